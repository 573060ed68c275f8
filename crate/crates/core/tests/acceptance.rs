//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints a PASS/FAIL line even when an earlier one fails.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tandem::ann::{exact_knn, quantize_int8, HnswParams, IndexArtifact, Precision, VectorStore};
use tandem::autodiff::{grad_check, GradCheckConfig, NumericsError, Tape, Tensor, Var};
use tandem::eval::{efficiency_report, run_protocol, EvalSet, ProtocolConfig};
use tandem::objectives::{
    hit_at_k, info_nce, mrl_wrap, siglip_loss, triplet_nce, ContrastiveBatch, HardExampleBatch, MrlConfig, SiglipParams,
};
use tandem::pipeline::{
    self, batch_sensitivity, degradation, load_corpus, mrl_vs_fc, EvalOutcome, LoadedCorpus, PipelineConfig,
    TrainInputs, TrainSummary, Workspace,
};
use tandem::rerank::{head_forward, FfnHead, HeadConfig, HEAD_TENSORS};
use tandem::towers::{truncate_matrix, ModelArtifact, TowerConfig, TowerParams};
use tandem::trainer::{train_stage1, InBatchLoss, TrainConfig};

type Res<T> = Result<T, Box<dyn Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Res<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn num<E: std::fmt::Display>(e: E) -> NumericsError {
    NumericsError::Argument(e.to_string())
}

fn unit(t: &mut Tape<f64>, v: Var) -> Result<Var, NumericsError> {
    t.l2_normalize(v)
}

/// Random index pairs with every query row covered at least once.
fn pairs(rng: &mut ChaCha8Rng, nq: usize, nd: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for q in 0..nq {
        pos.push((q, rng.random_range(0..nd)));
        for _ in 0..rng.random_range(1..4) {
            neg.push((q, rng.random_range(0..nd)));
        }
    }
    (pos, neg)
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Res<Verdict> {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut batches = 0;
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    let mrl = MrlConfig::new(vec![2, 4, 6]).unwrap();

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let q = randn(&mut rng, 6, 6);
        let d = randn(&mut rng, 6, 6);
        let inputs = vec![("q".to_string(), q.clone()), ("d".to_string(), d.clone())];

        let r = grad_check(
            |t, v| {
                let (q, d) = (unit(t, v[0])?, unit(t, v[1])?);
                info_nce(t, &ContrastiveBatch::new(q, d), 0.07).map_err(num)
            },
            &inputs,
            cfg,
        )?;
        record("InfoNCE", r.max_rel_err());

        let r = grad_check(
            |t, v| {
                let (q, d) = (unit(t, v[0])?, unit(t, v[1])?);
                mrl_wrap(t, &mrl, q, d, |t, q, d| info_nce(t, &ContrastiveBatch::new(q, d), 0.07)).map_err(num)
            },
            &inputs,
            cfg,
        )?;
        record("MRL InfoNCE", r.max_rel_err());

        let sig_inputs = vec![
            ("q".to_string(), q.clone()),
            ("d".to_string(), d.clone()),
            ("log_t".to_string(), Tensor::vector(vec![rng.random_range(-3.0..0.0)])),
            ("b".to_string(), Tensor::vector(vec![rng.random_range(-6.0..0.0)])),
        ];
        let r = grad_check(
            |t, v| {
                let (q, d) = (unit(t, v[0])?, unit(t, v[1])?);
                let p = SiglipParams {
                    log_temperature: v[2],
                    bias: v[3],
                };
                siglip_loss(t, &ContrastiveBatch::new(q, d), p).map_err(num)
            },
            &sig_inputs,
            cfg,
        )?;
        record("SigLIP", r.max_rel_err());

        let r = grad_check(
            |t, v| {
                let (q, d) = (unit(t, v[0])?, unit(t, v[1])?);
                let p = SiglipParams {
                    log_temperature: v[2],
                    bias: v[3],
                };
                mrl_wrap(t, &mrl, q, d, |t, q, d| siglip_loss(t, &ContrastiveBatch::new(q, d), p)).map_err(num)
            },
            &sig_inputs,
            cfg,
        )?;
        record("MRL SigLIP", r.max_rel_err());

        let docs = randn(&mut rng, 9, 6);
        let (pos, neg) = pairs(&mut rng, 6, 9);
        let tri_inputs = vec![("q".to_string(), q.clone()), ("d".to_string(), docs)];
        let r = grad_check(
            |t, v| {
                let (q, d) = (unit(t, v[0])?, unit(t, v[1])?);
                let b = HardExampleBatch {
                    queries: q,
                    docs: d,
                    positives: pos.clone(),
                    negatives: neg.clone(),
                };
                triplet_nce(t, &b, 0.5).map_err(num)
            },
            &tri_inputs,
            cfg,
        )?;
        record("Triplet-NCE", r.max_rel_err());

        let r = grad_check(
            |t, v| {
                let (q, d) = (unit(t, v[0])?, unit(t, v[1])?);
                mrl_wrap(t, &mrl, q, d, |t, q, d| {
                    let b = HardExampleBatch {
                        queries: q,
                        docs: d,
                        positives: pos.clone(),
                        negatives: neg.clone(),
                    };
                    triplet_nce(t, &b, 0.5)
                })
                .map_err(num)
            },
            &tri_inputs,
            cfg,
        )?;
        record("MRL Triplet-NCE", r.max_rel_err());

        let hc = HeadConfig {
            dropout: 0.0,
            bound_output: seed % 2 == 1,
            ..HeadConfig::for_cut(3)
        };
        let h = FfnHead::init(hc, "tte-acceptance", seed)?;
        let mut head_inputs: Vec<(String, Tensor<f64>)> = HEAD_TENSORS
            .iter()
            .zip(&h.tensors)
            .map(|(n, t)| (n.to_string(), t.cast()))
            .collect();
        for (_, t) in head_inputs.iter_mut().skip(1) {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x += rng.sample::<f64, _>(StandardNormal) * 0.3);
        }
        head_inputs.push(("z".into(), randn(&mut rng, 4, 6)));
        let w: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let r = grad_check(
            |t, v| {
                let p: [Var; 8] = v[..8].try_into().unwrap();
                let s = head_forward(t, &p, v[8], &hc, 0)?;
                let w = t.constant(Tensor::matrix(4, 1, w.clone())?);
                let s = t.mul(s, w)?;
                Ok(t.sum(s))
            },
            &head_inputs,
            cfg,
        )?;
        record("FFN head", r.max_rel_err());
        batches += 1;
    }
    let elapsed = start.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let per: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        max < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{batches} batches per objective, max rel err {max:.2e} [{}], {:.1}s",
            per.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn closed_form_losses() -> Res<Verdict> {
    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::matrix(1, 3, vec![0.6, 0.8, 0.0])?);
    let d = t.constant(Tensor::matrix(1, 3, vec![0.0, 0.6, 0.8])?);
    let l = info_nce(&mut t, &ContrastiveBatch::new(q, d), 0.07)?;
    let single = t.value(l).item();

    let mut t = Tape::<f64>::new();
    let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let q = t.constant(eye.clone());
    let d = t.constant(eye);
    let l = info_nce(&mut t, &ContrastiveBatch::new(q, d), 1.0)?;
    let pair = t.value(l).item();
    let pair_expected = (1.0 + (-1.0f64).exp()).ln();

    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0])?);
    let d = t.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, -1.0])?);
    let b = HardExampleBatch {
        queries: q,
        docs: d,
        positives: vec![(0, 0)],
        negatives: vec![(0, 1)],
    };
    let l = triplet_nce(&mut t, &b, 0.05)?;
    let tri = t.value(l).item();
    let tri_expected = 2.0 * 2f64.ln();

    let ok = single.abs() <= 1e-9 && (pair - pair_expected).abs() <= 1e-9 && (tri - tri_expected).abs() <= 1e-9;
    verdict(
        ok,
        format!(
            "InfoNCE N=1 {single:.3e}; N=2 {pair:.12} vs {pair_expected:.12}; Triplet-NCE {tri:.12} vs {tri_expected:.12}"
        ),
    )
}

/// Loss on prefix-truncated copies of `q` and `d`, built on a fresh tape
/// without going through the MRL wrapper.
fn standalone<F>(q: &Tensor<f64>, d: &Tensor<f64>, m: usize, base: &mut F) -> Res<f64>
where
    F: FnMut(&mut Tape<f64>, Var, Var) -> Res<Var> + ?Sized,
{
    let prefix = |x: &Tensor<f64>| -> Tensor<f64> {
        let mut out = Vec::with_capacity(x.rows() * m);
        for r in 0..x.rows() {
            let row = &x.row(r)[..m];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.extend(row.iter().map(|v| v / n));
        }
        Tensor::matrix(x.rows(), m, out).unwrap()
    };
    let mut t = Tape::new();
    let (qv, dv) = if m == q.cols() {
        (t.constant(q.clone()), t.constant(d.clone()))
    } else {
        (t.constant(prefix(q)), t.constant(prefix(d)))
    };
    let l = base(&mut t, qv, dv)?;
    Ok(t.value(l).item())
}

fn normalized(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let x = randn(rng, r, c);
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(x.row(i).iter().map(|v| v / n));
    }
    Tensor::matrix(r, c, out).unwrap()
}

fn mrl_degeneracy_and_additivity() -> Res<Verdict> {
    let mut worst_sum: f64 = 0.0;
    let mut exact = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (n, w) = (8, 16);
        let q = normalized(&mut rng, n, w);
        let d = normalized(&mut rng, n, w);
        let (pos, neg) = pairs(&mut rng, n, n);
        let mut nce =
            |t: &mut Tape<f64>, q: Var, d: Var| -> Res<Var> { Ok(info_nce(t, &ContrastiveBatch::new(q, d), 0.07)?) };
        let mut tri = |t: &mut Tape<f64>, q: Var, d: Var| -> Res<Var> {
            let b = HardExampleBatch {
                queries: q,
                docs: d,
                positives: pos.clone(),
                negatives: neg.clone(),
            };
            Ok(triplet_nce(t, &b, 0.07)?)
        };
        let bases: [&mut dyn FnMut(&mut Tape<f64>, Var, Var) -> Res<Var>; 2] = [&mut nce, &mut tri];
        for base in bases {
            let mut run = |cfg: &MrlConfig| -> Res<f64> {
                let mut t = Tape::new();
                let (qv, dv) = (t.constant(q.clone()), t.constant(d.clone()));
                let mut failure: Option<String> = None;
                let l = mrl_wrap(&mut t, cfg, qv, dv, |t, a, b| {
                    base(t, a, b).map_err(|e| {
                        failure = Some(e.to_string());
                        tandem::objectives::ObjectiveError::Contract("base loss failed".into())
                    })
                });
                match l {
                    Ok(l) => Ok(t.value(l).item()),
                    Err(e) => Err(failure.unwrap_or_else(|| e.to_string()).into()),
                }
            };
            let single = run(&MrlConfig::single(w))?;
            let two = run(&MrlConfig::new(vec![4, w])?)?;
            let full = standalone(&q, &d, w, base)?;
            let cut = standalone(&q, &d, 4, base)?;
            exact &= single.to_bits() == full.to_bits();
            worst_sum = worst_sum.max((two - (full + cut)).abs());
        }
    }
    verdict(
        exact && worst_sum <= 1e-9,
        format!("single cut bit-exact: {exact}; two-cut max |sum error| {worst_sum:.2e} over 20 batches, InfoNCE and Triplet-NCE"),
    )
}

fn hit_oracle() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let (b, m) = (32, 32);
    let mut checked = 0;
    let mut mismatches = 0;
    for trial in 0..100 {
        // Every fourth matrix draws from a handful of values so ties are common.
        let logits: Vec<f64> = (0..b * m)
            .map(|_| {
                if trial % 4 == 0 {
                    f64::from(rng.random_range(0..4u8))
                } else {
                    rng.sample(StandardNormal)
                }
            })
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
        let z = Tensor::matrix(b, m, logits.clone())?;
        let ranks: Vec<usize> = (0..b)
            .map(|i| {
                let row = &logits[i * m..(i + 1) * m];
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
                order.iter().position(|&j| j == labels[i]).unwrap()
            })
            .collect();
        for k in 1..=m {
            let expected = ranks.iter().filter(|&&r| r < k).count() as f64 / b as f64;
            if hit_at_k(&z, &labels, k)? != expected {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{checked} (matrix, k) cases, {mismatches} mismatches"),
    )
}

fn random_unit_store(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Res<VectorStore> {
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        let v: Vec<f32> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    let ids = (0..n).map(|i| format!("v{i}")).collect();
    Ok(VectorStore::fp32(ids, &Tensor::matrix(n, m, data)?)?)
}

fn knn_oracle() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let (n, m) = (1000, 32);
    let store = random_unit_store(&mut rng, n, m)?;
    let rows: Vec<Vec<f32>> = (0..n).map(|i| store.vector(i).into_owned()).collect();
    let mut queries = 0;
    let mut mismatches = 0;
    for _ in 0..50 {
        let q: Vec<f32> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let mut naive: Vec<(u32, f32)> = Vec::with_capacity(n);
        for (i, r) in rows.iter().enumerate() {
            let mut s = 0.0f32;
            for j in 0..m {
                s += r[j] * q[j];
            }
            naive.push((i as u32, s));
        }
        naive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for k in [1, 20, 200] {
            let got: Vec<u32> = exact_knn(&store, &q, k, None)?.into_iter().map(|x| x.0).collect();
            let want: Vec<u32> = naive[..k].iter().map(|x| x.0).collect();
            if got != want {
                mismatches += 1;
            }
            queries += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{queries} (query, k) cases over {n} vectors, {mismatches} mismatches"),
    )
}

fn hnsw_guardrail() -> Res<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let store = random_unit_store(&mut rng, 10_000, 64)?;
    let index = IndexArtifact::build("tte-acceptance", store, HnswParams::default())?;
    let queries: Vec<Vec<f32>> = (0..100)
        .map(|_| (0..64).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let exact: Vec<Vec<u32>> = queries
        .iter()
        .map(|q| Ok(exact_knn(&index.store, q, 10, None)?.into_iter().map(|x| x.0).collect()))
        .collect::<Res<_>>()?;
    let mut curve = Vec::new();
    for ef in [16, 32, 64, 128, 256] {
        let mut total = 0.0;
        for (q, want) in queries.iter().zip(&exact) {
            let got = index.graph.search(&index.store, q, 10, ef, None)?;
            total += got.iter().filter(|x| want.contains(&x.0)).count() as f64 / want.len() as f64;
        }
        curve.push((ef, total / queries.len() as f64));
    }
    let at128 = curve.iter().find(|c| c.0 == 128).unwrap().1;
    let monotone = curve.windows(2).all(|w| w[1].1 >= w[0].1);
    let elapsed = start.elapsed();
    let cells: Vec<String> = curve.iter().map(|(ef, r)| format!("ef{ef} {r:.3}")).collect();
    verdict(
        at128 >= 0.95 && monotone && elapsed < Duration::from_secs(120),
        format!(
            "recall@10 {}; monotone {monotone}; {:.1}s",
            cells.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

struct Run {
    _dir: tempfile::TempDir,
    ws: Workspace,
    summary: TrainSummary,
    eval: EvalOutcome,
    elapsed: Duration,
}

fn full_pipeline() -> Res<Run> {
    let dir = tempfile::tempdir()?;
    let ws = Workspace::new(dir.path(), PipelineConfig::default())?;
    let start = Instant::now();
    pipeline::gen(&ws)?;
    let summary = pipeline::train(&ws)?;
    pipeline::embed(&ws, None)?;
    pipeline::index(&ws)?;
    let eval = pipeline::eval(&ws)?;
    let lineage = pipeline::report(&ws)?;
    if !lineage.problems.is_empty() {
        return Err(format!("lineage problems: {:?}", lineage.problems).into());
    }
    Ok(Run {
        _dir: dir,
        ws,
        summary,
        eval,
        elapsed: start.elapsed(),
    })
}

fn at(ks: &[usize], values: &[f64], k: usize) -> Res<f64> {
    ks.iter()
        .position(|&x| x == k)
        .map(|i| values[i])
        .ok_or_else(|| format!("k={k} not reported").into())
}

fn quantization_geometry(a: &Run, corpus: &LoadedCorpus, inputs: &TrainInputs) -> Res<Verdict> {
    let cfg = &a.ws.config;
    let d_full = 96;
    let cut = d_full / 6;
    let cuts = vec![cut, 32, 48, d_full];
    let towers = TowerConfig { d_full, ..cfg.towers };
    let init = ModelArtifact::new(
        cfg.hasher,
        TowerParams::init(towers, 96_001)?,
        TowerParams::init(towers, 96_002)?,
        cuts.clone(),
        None,
    )?;
    let tc = TrainConfig {
        mrl_cuts: cuts.clone(),
        ..cfg.stage1.clone()
    };
    let (model, _) = train_stage1(&tc, &inputs.data, &init, None)?;
    let (ids, full) = pipeline::doc_embeddings(&model, &corpus.corpus)?;
    let build = |m: usize, p: Precision| -> Res<IndexArtifact> {
        let mut store = VectorStore::fp32(ids.clone(), &truncate_matrix(&full, m, &model.mrl_cuts)?)?;
        if p == Precision::Int8 {
            store = quantize_int8(&store, &(0..store.len()).collect::<Vec<_>>())?;
        }
        Ok(IndexArtifact::build(&model.tte_id, store, cfg.hnsw)?)
    };
    let base = build(d_full, Precision::Fp32)?;
    let fp32 = build(cut, Precision::Fp32)?;
    let int8 = build(cut, Precision::Int8)?;
    let rows = efficiency_report(&[("fp32", &fp32), ("int8", &int8)], &base)?;
    let want = [1.0 / 6.0, 1.0 / 24.0];
    let mut ok = true;
    let mut cells = Vec::new();
    for (r, w) in rows.iter().zip(want) {
        let off = (r.vector_ratio / w - 1.0).abs();
        ok &= off <= 0.02;
        cells.push(format!(
            "{}-{} {:.4} (closed form {w:.4})",
            r.cut, r.precision, r.vector_ratio
        ));
    }
    let pc = ProtocolConfig {
        ks: vec![200],
        ef_search: cfg.eval.ef_search,
    };
    let r_fp = run_protocol(&model, &fp32, &corpus.corpus, &inputs.eval, &pc, "fp32")?.overall[0];
    let r_i8 = run_protocol(&model, &int8, &corpus.corpus, &inputs.eval, &pc, "int8")?.overall[0];
    let drop = r_fp - r_i8;
    ok &= drop <= 0.02;
    verdict(
        ok,
        format!(
            "base {d_full}-fp32; payload ratios {}; R@200 at {cut} dims fp32 {r_fp:.4} int8 {r_i8:.4} drop {drop:+.4}",
            cells.join(", ")
        ),
    )
}

fn mrl_effectiveness(a: &Run, corpus: &LoadedCorpus, inputs: &TrainInputs) -> Res<Verdict> {
    let s = mrl_vs_fc(&a.ws, corpus, inputs)?;
    if s.cut * 4 != s.d_full {
        return Err(format!("ablation cut {} is not a quarter of {}", s.cut, s.d_full).into());
    }
    let (mrl, plain) = s.retention(200).ok_or("no R@200 in the MRL study")?;
    let diff = s.mrl_minus_fc(200).ok_or("no R@200 in the MRL study")?;
    verdict(
        mrl >= 0.95 && plain < mrl && diff.abs() <= 0.02,
        format!(
            "R@200 retained at {} of {} dims: MRL {:.1}%, control {:.1}%; MRL {:.4} vs FC {:.4} ({diff:+.4})",
            s.cut,
            s.d_full,
            100.0 * mrl,
            100.0 * plain,
            at(&s.ks, &s.mrl_cut, 200)?,
            at(&s.ks, &s.fc, 200)?
        ),
    )
}

fn two_stage_lift(a: &Run) -> Res<Verdict> {
    let s = &a.summary;
    let r1 = at(&s.ks, &s.stage1_recall, 20)?;
    let r2 = at(&s.ks, &s.stage2_recall, 20)?;
    let lift = r2 / r1 - 1.0;
    verdict(
        s.stage2_margin > s.stage1_margin && (0.01..=0.10).contains(&lift),
        format!(
            "margin {:.4} -> {:.4}; R@20 {r1:.4} -> {r2:.4} ({:+.2}%)",
            s.stage1_margin,
            s.stage2_margin,
            100.0 * lift
        ),
    )
}

fn rerank_lift(a: &Run) -> Res<Verdict> {
    let (dot, ffn) = (&a.eval.dot, &a.eval.rerank);
    let d = at(&dot.ks, &dot.overall, 200)?;
    let f = at(&ffn.ks, &ffn.overall, 200)?;
    let lift = f / d - 1.0;

    let cfg = &a.ws.config;
    let model = ModelArtifact::load(&a.ws.path(&a.ws.model_file()))?;
    let spec = cfg
        .indices
        .iter()
        .find(|s| s.cut == cfg.rerank.cut && s.precision == Precision::Fp32)
        .ok_or("no fp32 index at the rerank cut")?;
    let index = IndexArtifact::load(&a.ws.path(&a.ws.index_file(spec)))?;
    let corpus = load_corpus(&a.ws)?;
    let pc = ProtocolConfig {
        ks: ffn.ks.iter().map(|k| k * cfg.rerank.expansion).collect(),
        ef_search: cfg.eval.ef_search,
    };
    let pool = run_protocol(
        &model,
        &index,
        &corpus.corpus,
        &EvalSet::held_out(&corpus.corpus),
        &pc,
        "pool",
    )?;
    let mut violations = 0;
    for (x, y) in ffn.per_query.iter().zip(&pool.per_query) {
        if x.query_id != y.query_id {
            return Err("rerank and pool reports list queries in different orders".into());
        }
        violations += x.recall.iter().zip(&y.recall).filter(|(r, p)| r > p).count();
    }
    verdict(
        f >= d && (0.0..=0.05).contains(&lift) && violations == 0,
        format!(
            "R@200 dot {d:.4} ffn {f:.4} ({:+.2}%); pool bound over k {:?}: {violations} violations",
            100.0 * lift,
            ffn.ks
        ),
    )
}

fn batch_sensitivity_check(a: &Run, corpus: &LoadedCorpus, inputs: &TrainInputs) -> Res<Verdict> {
    let rows = batch_sensitivity(&a.ws, corpus, inputs)?;
    let i =
        a.ws.config
            .ablation
            .ks
            .iter()
            .position(|&k| k == 200)
            .ok_or("ablation does not report R@200")?;
    let nce = degradation(&rows, InBatchLoss::InfoNce, i).ok_or("no InfoNCE rows")?;
    let sig = degradation(&rows, InBatchLoss::Siglip, i).ok_or("no SigLIP rows")?;
    let batches: Vec<usize> = a.ws.config.ablation.batch_sizes.clone();
    verdict(
        nce >= sig,
        format!("R@200 drop from largest to smallest of batches {batches:?}: InfoNCE {nce:+.4}, SigLIP {sig:+.4}"),
    )
}

fn tree(root: &Path) -> Res<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn determinism(a: &Run) -> Res<Verdict> {
    let b = full_pipeline()?;
    // Wall-clock latency is the one report that cannot repeat.
    let latency = a.ws.report_file("latency.txt");
    let mut ta = tree(&a.ws.root)?;
    let mut tb = tree(&b.ws.root)?;
    let had_latency = ta.remove(&latency).is_some() && tb.remove(&latency).is_some();
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|p| ta.get(*p) != tb.get(*p))
        .map(|p| p.display().to_string())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let model = a.ws.model_file();
    let must = [
        a.ws.stage1_file(),
        model.clone(),
        a.ws.head_file(),
        a.ws.embeddings_file(),
        a.ws.manifest_file(),
    ];
    let present = must.iter().all(|p| ta.contains_key(p))
        && a.ws.config.indices.iter().all(|s| ta.contains_key(&a.ws.index_file(s)))
        && ta.keys().any(|p| p.starts_with(&a.ws.config.paths.reports));
    let limit = Duration::from_secs(15 * 60);
    verdict(
        differing.is_empty() && present && had_latency && a.elapsed < limit && b.elapsed < limit,
        format!(
            "{} files compared, {} differ {:?}; pipeline {:.0}s and {:.0}s",
            ta.len(),
            differing.len(),
            differing,
            a.elapsed.as_secs_f64(),
            b.elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let start = Instant::now();
    let mut lines: Vec<(usize, &str, Result<Verdict, String>)> = Vec::new();
    let mut check = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Res<Verdict>| {
        let t = Instant::now();
        let r = f().map_err(|e| e.to_string());
        let (tag, detail) = match &r {
            Ok(v) => (if v.pass { "PASS" } else { "FAIL" }, v.detail.clone()),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        println!("{tag} {n:>2} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        lines.push((n, name, r));
    };

    check(1, "gradient suite", &mut gradient_suite);
    check(2, "closed-form losses", &mut closed_form_losses);
    check(3, "MRL degeneracy and additivity", &mut mrl_degeneracy_and_additivity);
    check(4, "Hit@k oracle", &mut hit_oracle);
    check(5, "exact kNN oracle", &mut knn_oracle);
    check(6, "HNSW guardrail", &mut hnsw_guardrail);

    let run = full_pipeline().map_err(|e| e.to_string());
    let shared = run.as_ref().map_err(Clone::clone).and_then(|a| {
        let corpus = load_corpus(&a.ws).map_err(|e| e.to_string())?;
        let inputs = TrainInputs::build(&corpus.corpus, &corpus.interactions, &a.ws.config.hasher, &a.ws.config)
            .map_err(|e| e.to_string())?;
        Ok((corpus, inputs))
    });
    let with = |f: &dyn Fn(&Run, &LoadedCorpus, &TrainInputs) -> Res<Verdict>| -> Res<Verdict> {
        match (&run, &shared) {
            (Ok(a), Ok((c, i))) => f(a, c, i),
            (Err(e), _) | (_, Err(e)) => Err(format!("pipeline run failed: {e}").into()),
        }
    };
    check(7, "quantization geometry", &mut || with(&quantization_geometry));
    check(8, "MRL effectiveness", &mut || with(&mrl_effectiveness));
    check(9, "two-stage lift", &mut || with(&|a, _, _| two_stage_lift(a)));
    check(10, "rerank lift", &mut || with(&|a, _, _| rerank_lift(a)));
    check(11, "batch sensitivity", &mut || with(&batch_sensitivity_check));
    check(12, "end-to-end determinism", &mut || with(&|a, _, _| determinism(a)));

    let failed: Vec<String> = lines
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(v) if v.pass))
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    println!(
        "{} of {} criteria passed in {:.0}s",
        lines.len() - failed.len(),
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
