use std::sync::OnceLock;

use tandem::ann::{HnswParams, IndexArtifact, VectorStore};
use tandem::corpus::{
    generate_corpus, mine_for_queries, mine_hard_examples, CorpusSpec, GeneratedCorpus, Market, MiningConfig,
    RelevanceOracle,
};
use tandem::eval::{run_protocol, EvalSet, ProtocolConfig};
use tandem::rerank::{
    evaluate_rerank, ffn_score, head_pairwise_accuracy, train_head, FfnHead, HeadConfig, HeadTrainConfig, RerankError,
};
use tandem::towers::{truncate_matrix, FeatureHasher, ModelArtifact, Role, TowerConfig, TowerParams};
use tandem::trainer::{click_pairs, hard_sets, train_stage1, Featurized, HardSet, Palette, TrainConfig, TrainData};

const CUT: usize = 8;

struct Fixture {
    g: GeneratedCorpus,
    data: TrainData,
    model: ModelArtifact,
    eval: EvalSet,
    held_out_sets: Vec<HardSet>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let g = generate_corpus(&CorpusSpec {
            markets: vec![Market::Usa],
            docs_per_vertical: 150,
            queries_per_market: 400,
            seed: 13,
            ..CorpusSpec::default()
        })
        .unwrap();
        let hasher = FeatureHasher {
            num_buckets: 1 << 12,
            ..FeatureHasher::default()
        };
        let oracle = RelevanceOracle::new(13);
        let features = Featurized::build(&g.corpus, &hasher).unwrap();
        let pairs = click_pairs(&g.corpus, &g.interactions).unwrap();
        let mined = mine_hard_examples(&g.corpus, &g.interactions, &oracle, &MiningConfig::default()).unwrap();
        let hard = hard_sets(&g.corpus, &mined, 4, 4).unwrap();
        let palette = Palette::held_out(&g.corpus, 64, 32, 13).unwrap();
        let eval = EvalSet::held_out(&g.corpus);
        let ids: Vec<&str> = eval.queries.iter().map(|q| q.query_id.as_str()).collect();
        let ho = mine_for_queries(&g.corpus, &ids, &oracle, &MiningConfig::default()).unwrap();
        let held_out_sets = hard_sets(&g.corpus, &ho, 4, 4)
            .unwrap()
            .into_iter()
            .filter(|s| !s.positives.is_empty() && !s.negatives.is_empty())
            .collect();
        let data = TrainData {
            features,
            pairs,
            hard,
            palette,
        };
        let tc = TowerConfig {
            num_buckets: 1 << 12,
            hidden: 32,
            hidden_layers: 2,
            d_full: 32,
        };
        let init = ModelArtifact::new(
            hasher,
            TowerParams::init(tc, 1).unwrap(),
            TowerParams::init(tc, 2).unwrap(),
            vec![8, 16, 32],
            None,
        )
        .unwrap();
        let cfg = TrainConfig {
            micro_batch: 32,
            max_steps: 200,
            mrl_cuts: vec![8, 16, 32],
            eval_interval: 0,
            lr: 5e-3,
            ..TrainConfig::stage1()
        };
        let (model, _) = train_stage1(&cfg, &data, &init, None).unwrap();
        Fixture {
            g,
            data,
            model,
            eval,
            held_out_sets,
        }
    })
}

fn head_cfg() -> HeadTrainConfig {
    HeadTrainConfig {
        stage1_steps: 120,
        stage2_steps: 0,
        batch: 32,
        stage2_batch: 16,
        ..HeadTrainConfig::default()
    }
}

fn index(f: &Fixture) -> IndexArtifact {
    let m = &f.model;
    let docs: Vec<_> = f.g.corpus.documents().map(|x| x.0).collect();
    let blobs: Vec<String> = docs.iter().map(|r| m.hasher.blob(r).unwrap()).collect();
    let refs: Vec<&str> = blobs.iter().map(String::as_str).collect();
    let e = m.doc.encode_batch(&m.hasher, &refs, Role::Document).unwrap();
    let e = truncate_matrix(&e, CUT, &m.mrl_cuts).unwrap();
    let store = VectorStore::fp32(docs.iter().map(|r| r.id.clone()).collect(), &e).unwrap();
    IndexArtifact::build(&m.tte_id, store, HnswParams::default()).unwrap()
}

#[test]
fn zero_steps_leave_the_head_and_encoder_untouched() {
    let f = fixture();
    let h0 = FfnHead::cosine_init(HeadConfig::for_cut(CUT), &f.model.tte_id, 1).unwrap();
    let cfg = HeadTrainConfig {
        stage1_steps: 0,
        stage2_steps: 0,
        ..head_cfg()
    };
    let (h, log) = train_head(&h0, &f.model, &f.data, &cfg).unwrap();
    assert_eq!(h, h0);
    assert!(log.stage1.is_empty() && log.stage2.is_empty());

    let before = f.model.clone();
    let _ = train_head(&h0, &f.model, &f.data, &head_cfg()).unwrap();
    assert_eq!(before.to_bytes(), f.model.to_bytes());
}

#[test]
fn head_for_another_encoder_is_rejected() {
    let f = fixture();
    let h0 = FfnHead::cosine_init(HeadConfig::for_cut(CUT), "tte-0000000000000000", 1).unwrap();
    assert!(matches!(
        train_head(&h0, &f.model, &f.data, &head_cfg()),
        Err(RerankError::Version { .. })
    ));
}

#[test]
fn stage_one_loss_falls_over_epochs() {
    let f = fixture();
    for h0 in [
        FfnHead::init(HeadConfig::for_cut(CUT), &f.model.tte_id, 2).unwrap(),
        FfnHead::cosine_init(HeadConfig::for_cut(CUT), &f.model.tte_id, 2).unwrap(),
    ] {
        let (_, log) = train_head(&h0, &f.model, &f.data, &head_cfg()).unwrap();
        let per_epoch = f.data.pairs.len() / head_cfg().batch;
        let means: Vec<f64> = log
            .stage1
            .chunks(per_epoch)
            .filter(|c| c.len() == per_epoch)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        assert!(means.len() >= 3, "{means:?}");
        for w in means.windows(2) {
            assert!(w[1] <= w[0] * 1.02, "{means:?}");
        }
        assert!(means.last().unwrap() < &means[0], "{means:?}");
    }
}

#[test]
fn hard_example_stage_improves_held_out_pairwise_accuracy() {
    let f = fixture();
    let h0 = FfnHead::cosine_init(HeadConfig::for_cut(CUT), &f.model.tte_id, 3).unwrap();
    let (h1, _) = train_head(&h0, &f.model, &f.data, &head_cfg()).unwrap();
    let cfg2 = HeadTrainConfig {
        stage1_steps: 0,
        stage2_steps: 200,
        ..head_cfg()
    };
    let (h2, log) = train_head(&h1, &f.model, &f.data, &cfg2).unwrap();
    assert_eq!(log.stage2.len(), 200);
    let a1 = head_pairwise_accuracy(&h1, &f.model, &f.data.features, &f.held_out_sets).unwrap();
    let a2 = head_pairwise_accuracy(&h2, &f.model, &f.data.features, &f.held_out_sets).unwrap();
    assert!(a2 > a1, "stage 2 {a2:.4} vs stage 1 {a1:.4}");
}

#[test]
fn trained_head_is_not_a_pure_cosine() {
    let f = fixture();
    let h0 = FfnHead::init(HeadConfig::for_cut(CUT), &f.model.tte_id, 4).unwrap();
    let (h, _) = train_head(&h0, &f.model, &f.data, &head_cfg()).unwrap();
    let q: Vec<f32> = (0..CUT).map(|i| ((i + 1) as f32).sqrt()).collect();
    let n = q.iter().map(|x| x * x).sum::<f32>().sqrt();
    let q: Vec<f32> = q.iter().map(|x| x / n).collect();
    let neg: Vec<f32> = q.iter().map(|x| -x).collect();
    let same = ffn_score(&h, &q, &q).unwrap();
    let opposite = ffn_score(&h, &q, &neg).unwrap();
    assert_ne!(same, opposite);
    assert_ne!(ffn_score(&h, &neg, &neg).unwrap(), same);
}

#[test]
fn reranked_recall_never_exceeds_the_first_stage_pool() {
    let f = fixture();
    let idx = index(f);
    let h0 = FfnHead::init(HeadConfig::for_cut(CUT), &f.model.tte_id, 5).unwrap();
    let (h, _) = train_head(&h0, &f.model, &f.data, &head_cfg()).unwrap();
    let expansion = 3;
    let ks = [1usize, 5, 10, 20, 40];
    let re = evaluate_rerank(&f.model, &idx, &h, &f.g.corpus, &f.eval, &ks, expansion, 128, "rerank").unwrap();
    let pool_ks: Vec<usize> = ks.iter().map(|k| k * expansion).collect();
    let cfg = ProtocolConfig {
        ks: pool_ks,
        ..ProtocolConfig::default()
    };
    let base = run_protocol(&f.model, &idx, &f.g.corpus, &f.eval, &cfg, "dot").unwrap();
    assert_eq!(re.meta.rerank_expansion, Some(expansion));
    for (a, b) in re.per_query.iter().zip(&base.per_query) {
        assert_eq!(a.query_id, b.query_id);
        for (x, y) in a.recall.iter().zip(&b.recall) {
            assert!(x <= y, "{}: {:?} vs pool {:?}", a.query_id, a.recall, b.recall);
        }
    }
}
