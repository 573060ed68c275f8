use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{exact_eval, load_corpus, LoadedCorpus, TrainInputs};
use super::embed::EmbeddingSet;
use super::manifest::{
    CorpusEntry, EmbedEntry, EvalEntry, FileRef, IndexEntry, Manifest, Registry, RegistrySlot, TrainEntry,
};
use super::stage::Staging;
use super::{IndexSpec, PipelineError, Workspace};
use crate::ann::{probe_recall, quantize_int8, IndexArtifact, Precision, VectorStore};
use crate::corpus::{generate_corpus, write_corpus, write_interactions};
use crate::eval::{
    efficiency_report, measure_latency, query_embeddings, run_protocol, EfficiencyRow, EvalReport, EvalSet,
    LatencyStats, ProtocolConfig,
};
use crate::rerank::{dot_pairwise_accuracy, evaluate_rerank, head_pairwise_accuracy, train_head, FfnHead, HeadConfig};
use crate::seed;
use crate::towers::{truncate_matrix, FeatureHasher, ModelArtifact, TowerParams};
use crate::trainer::{hard_negative_margin, train_stage1, train_stage2, RunRecord};

fn load_manifest(ws: &Workspace) -> Result<Manifest, PipelineError> {
    Manifest::load(&ws.path(&ws.manifest_file()))
}

fn load_model(ws: &Workspace) -> Result<ModelArtifact, PipelineError> {
    Ok(ModelArtifact::load(&ws.input(&ws.model_file(), "train")?)?)
}

fn load_embeddings(ws: &Workspace) -> Result<EmbeddingSet, PipelineError> {
    EmbeddingSet::from_bytes(&std::fs::read(ws.input(&ws.embeddings_file(), "embed")?)?)
}

fn current_embeddings(
    ws: &Workspace,
    model: &ModelArtifact,
    corpus: &LoadedCorpus,
) -> Result<EmbeddingSet, PipelineError> {
    let emb = load_embeddings(ws)?;
    if emb.tte_id != model.tte_id {
        return Err(PipelineError::Version(format!(
            "document embeddings {} were made by {} but the model is {}; re-run `embed`",
            emb.set_id, emb.tte_id, model.tte_id
        )));
    }
    if !emb.is_current(model, &corpus.corpus)? {
        return Err(PipelineError::Version(format!(
            "document embeddings {} do not match the current corpus; re-run `embed --since {}`",
            emb.set_id, emb.set_id
        )));
    }
    Ok(emb)
}

fn log_bytes(r: &RunRecord) -> Result<Vec<u8>, PipelineError> {
    let mut b = Vec::new();
    r.write_jsonl(&mut b)?;
    Ok(b)
}

fn probes(
    model: &ModelArtifact,
    corpus: &LoadedCorpus,
    eval: &EvalSet,
    cut: usize,
) -> Result<Vec<Vec<f32>>, PipelineError> {
    let q = query_embeddings(model, &corpus.corpus, eval, cut)?;
    Ok((0..q.rows()).map(|i| q.row(i).to_vec()).collect())
}

/// Untrained towers for the configured shape, seeded from the workspace seed.
pub(crate) fn init_model(
    ws: &Workspace,
    hasher: FeatureHasher,
    towers: crate::towers::TowerConfig,
    cuts: Vec<usize>,
) -> Result<ModelArtifact, PipelineError> {
    let s = ws.config.seed;
    let q = TowerParams::init(towers, seed::derive(s, &[0x7177]))?;
    let d = TowerParams::init(towers, seed::derive(s, &[0x6477]))?;
    Ok(ModelArtifact::new(hasher, q, d, cuts, None)?)
}

pub fn gen(ws: &Workspace) -> Result<CorpusEntry, PipelineError> {
    let spec = &ws.config.corpus;
    let g = generate_corpus(spec)?;
    let mut corpus = Vec::new();
    write_corpus(&mut corpus, spec, &g.corpus)?;
    let mut interactions = Vec::new();
    write_interactions(&mut interactions, spec.seed, &g.interactions)?;
    let entry = CorpusEntry {
        corpus: FileRef::of(&ws.corpus_file(), &corpus),
        interactions: FileRef::of(&ws.interactions_file(), &interactions),
        seed: spec.seed,
        documents: g.corpus.documents().count(),
        queries: g.corpus.queries().count(),
        interaction_rows: g.interactions.len(),
    };
    let mut st = Staging::new(&ws.root, "gen")?;
    st.write(&ws.corpus_file(), &corpus)?;
    st.write(&ws.interactions_file(), &interactions)?;
    let mut m = load_manifest(ws)?;
    m.corpus = Some(entry.clone());
    st.write(&ws.manifest_file(), &m.to_bytes())?;
    st.commit()?;
    Ok(entry)
}

/// Headline numbers of a `train` run on the held-out queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage1_tte_id: String,
    pub tte_id: String,
    pub head_id: String,
    pub ks: Vec<usize>,
    /// Full-width exact-scan recall of each stage.
    pub stage1_recall: Vec<f64>,
    pub stage2_recall: Vec<f64>,
    pub stage1_margin: f64,
    pub stage2_margin: f64,
    pub rerank_cut: usize,
    pub dot_pairwise: f64,
    pub head_pairwise: f64,
}

impl TrainSummary {
    pub fn table(&self) -> String {
        let mut s = format!("{:<8}{:<24}", "stage", "tte_id");
        for k in &self.ks {
            let _ = write!(s, "{:>9}", format!("R@{k}"));
        }
        s.push_str("   margin\n");
        for (name, id, r, m) in [
            ("stage1", &self.stage1_tte_id, &self.stage1_recall, self.stage1_margin),
            ("stage2", &self.tte_id, &self.stage2_recall, self.stage2_margin),
        ] {
            let _ = write!(s, "{name:<8}{id:<24}");
            for x in r {
                let _ = write!(s, "{x:>9.4}");
            }
            let _ = writeln!(s, "{m:>9.4}");
        }
        let _ = writeln!(
            s,
            "held-out pairwise accuracy at cut {}: dot {:.4}, head {} {:.4}",
            self.rerank_cut, self.dot_pairwise, self.head_id, self.head_pairwise
        );
        s
    }
}

pub fn train(ws: &Workspace) -> Result<TrainSummary, PipelineError> {
    let cfg = &ws.config;
    let corpus = load_corpus(ws)?;
    let inputs = TrainInputs::build(&corpus.corpus, &corpus.interactions, &cfg.hasher, cfg)?;
    let init = init_model(ws, cfg.hasher, cfg.towers, cfg.serving_cuts())?;
    let ckpt =
        |name: &str, every: usize| (every > 0).then(|| ws.path(&cfg.paths.artifacts.join("checkpoints").join(name)));
    let c1 = ckpt("stage1", cfg.stage1.checkpoint_interval);
    let (s1, log1) = train_stage1(&cfg.stage1, &inputs.data, &init, c1.as_deref())?;
    let c2 = ckpt("stage2", cfg.stage2.checkpoint_interval);
    let (s2, log2) = train_stage2(&cfg.stage2, &inputs.data, &s1, c2.as_deref())?;

    let cut = cfg.rerank.cut;
    let h0 = FfnHead::cosine_init(HeadConfig::for_cut(cut), &s2.tte_id, seed::derive(cfg.seed, &[0x6865]))?;
    let (head, head_log) = train_head(&h0, &s2, &inputs.data, &cfg.rerank.train)?;

    let d = s2.d_full();
    let ks = &cfg.eval.ks;
    let r1 = exact_eval(&s1, &corpus.corpus, &inputs.eval, d, Precision::Fp32, ks, "stage1")?;
    let r2 = exact_eval(&s2, &corpus.corpus, &inputs.eval, d, Precision::Fp32, ks, "stage2")?;
    let f = &inputs.data.features;
    let summary = TrainSummary {
        stage1_tte_id: s1.tte_id.clone(),
        tte_id: s2.tte_id.clone(),
        head_id: head.head_id(),
        ks: ks.clone(),
        stage1_recall: r1.overall,
        stage2_recall: r2.overall,
        stage1_margin: hard_negative_margin(&s1, f, &inputs.held_out)?,
        stage2_margin: hard_negative_margin(&s2, f, &inputs.held_out)?,
        rerank_cut: cut,
        dot_pairwise: dot_pairwise_accuracy(&s2, cut, f, &inputs.held_out)?,
        head_pairwise: head_pairwise_accuracy(&head, &s2, f, &inputs.held_out)?,
    };

    let art = &cfg.paths.artifacts;
    let s1_bytes = s1.to_bytes();
    let s2_bytes = s2.to_bytes();
    let head_bytes = head.to_bytes();
    let logs = [
        (art.join("stage1-run.jsonl"), log_bytes(&log1)?),
        (art.join("stage2-run.jsonl"), log_bytes(&log2)?),
        (art.join("head-log.json"), serde_json::to_vec(&head_log)?),
    ];
    let mut st = Staging::new(&ws.root, "train")?;
    st.write(&ws.stage1_file(), &s1_bytes)?;
    st.write(&ws.model_file(), &s2_bytes)?;
    st.write(&ws.head_file(), &head_bytes)?;
    for (p, b) in &logs {
        st.write(p, b)?;
    }
    st.write(&art.join("train-summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    st.write(&ws.report_file("training.txt"), summary.table().as_bytes())?;
    let mut m = load_manifest(ws)?;
    m.train = Some(TrainEntry {
        corpus_id: corpus.corpus_id.clone(),
        data_fingerprint: format!("{:016x}", inputs.data.fingerprint()),
        init_tte_id: init.tte_id.clone(),
        stage1_tte_id: s1.tte_id.clone(),
        tte_id: s2.tte_id.clone(),
        query_model_id: s2.query_model_id.clone(),
        doc_model_id: s2.doc_model_id.clone(),
        head_id: head.head_id(),
        stage1: FileRef::of(&ws.stage1_file(), &s1_bytes),
        model: FileRef::of(&ws.model_file(), &s2_bytes),
        head: FileRef::of(&ws.head_file(), &head_bytes),
        logs: logs.iter().map(|(p, b)| FileRef::of(p, b)).collect(),
    });
    st.write(&ws.manifest_file(), &m.to_bytes())?;
    st.commit()?;
    Ok(summary)
}

/// Embeds every document, or with `since` only those whose model input
/// changed relative to the embedding set with that id.
pub fn embed(ws: &Workspace, since: Option<&str>) -> Result<EmbedEntry, PipelineError> {
    let model = load_model(ws)?;
    let corpus = load_corpus(ws)?;
    let (set, reused, recomputed) = match since {
        None => {
            let set = EmbeddingSet::build(&model, &corpus.corpus)?;
            let n = set.ids.len();
            (set, 0, n)
        }
        Some(id) => {
            let prev = load_embeddings(ws)?;
            if prev.set_id != id {
                return Err(PipelineError::Version(format!(
                    "asked for a delta from {id} but the embeddings file holds {}",
                    prev.set_id
                )));
            }
            let (set, stats) = EmbeddingSet::delta(&prev, &model, &corpus.corpus)?;
            (set, stats.reused, stats.recomputed)
        }
    };
    let bytes = set.to_bytes();
    let entry = EmbedEntry {
        set_id: set.set_id.clone(),
        tte_id: set.tte_id.clone(),
        corpus_id: corpus.corpus_id.clone(),
        parent_set_id: set.parent_set_id.clone(),
        reused,
        recomputed,
        file: FileRef::of(&ws.embeddings_file(), &bytes),
    };
    let mut st = Staging::new(&ws.root, "embed")?;
    st.write(&ws.embeddings_file(), &bytes)?;
    let mut m = load_manifest(ws)?;
    m.embeddings = Some(entry.clone());
    st.write(&ws.manifest_file(), &m.to_bytes())?;
    st.commit()?;
    Ok(entry)
}

#[derive(Debug, Clone)]
pub struct IndexOutcome {
    pub entries: Vec<IndexEntry>,
    pub efficiency: Vec<EfficiencyRow>,
    pub latency: Vec<(String, LatencyStats)>,
}

/// Builds one index per configured cut and precision. Each must pass the
/// probe-recall guardrail on held-out query embeddings; if any fails,
/// nothing is written.
pub fn index(ws: &Workspace) -> Result<IndexOutcome, PipelineError> {
    let cfg = &ws.config;
    let model = load_model(ws)?;
    let corpus = load_corpus(ws)?;
    let emb = current_embeddings(ws, &model, &corpus)?;
    let eval = EvalSet::held_out(&corpus.corpus);
    let guard = cfg.guardrail;
    let mut built = Vec::new();
    for spec in &cfg.indices {
        let e = truncate_matrix(&emb.vectors, spec.cut, &model.mrl_cuts)?;
        let mut store = VectorStore::fp32(emb.ids.clone(), &e)?;
        if spec.precision == Precision::Int8 {
            store = quantize_int8(&store, &(0..store.len()).collect::<Vec<_>>())?;
        }
        let idx = IndexArtifact::build(&model.tte_id, store, cfg.hnsw)?;
        let p = probes(&model, &corpus, &eval, spec.cut)?;
        let recall = probe_recall(&idx, &p, guard.k, guard.ef_search)?;
        if recall < guard.min_recall {
            return Err(PipelineError::Guardrail {
                label: spec.label(),
                recall,
                min: guard.min_recall,
            });
        }
        built.push((*spec, idx, p, recall));
    }
    let baseline = built
        .iter()
        .filter(|b| b.0.precision == Precision::Fp32)
        .max_by_key(|b| b.0.cut)
        .unwrap_or(&built[0]);
    let labels: Vec<String> = built.iter().map(|b| b.0.label()).collect();
    let pairs: Vec<(&str, &IndexArtifact)> = labels
        .iter()
        .map(String::as_str)
        .zip(built.iter().map(|b| &b.1))
        .collect();
    let efficiency = efficiency_report(&pairs, &baseline.1)?;
    let mut latency = Vec::new();
    if cfg.eval.latency_probes > 0 {
        for (spec, idx, p, _) in &built {
            latency.push((
                spec.label(),
                measure_latency(idx, p, cfg.eval.latency_probes, guard.k, cfg.eval.ef_search)?,
            ));
        }
    }

    let mut st = Staging::new(&ws.root, "index")?;
    let mut entries = Vec::new();
    for (spec, idx, _, recall) in &built {
        let bytes = idx.to_bytes()?;
        let rel = ws.index_file(spec);
        st.write(&rel, &bytes)?;
        entries.push(IndexEntry {
            label: spec.label(),
            cut: spec.cut,
            precision: spec.precision,
            tte_id: model.tte_id.clone(),
            embeddings_set_id: emb.set_id.clone(),
            probe_recall: *recall,
            file: FileRef::of(&rel, &bytes),
        });
    }
    let mut tsv = format!("{}\n", EfficiencyRow::tsv_header());
    for r in &efficiency {
        tsv.push_str(&r.tsv());
        tsv.push('\n');
    }
    let mut txt = EfficiencyRow::table(&efficiency);
    let _ = writeln!(
        txt,
        "\nguardrail recall@{} at ef {} (min {:.2}):",
        guard.k, guard.ef_search, guard.min_recall
    );
    for e in &entries {
        let _ = writeln!(txt, "  {:<12}{:.4}", e.label, e.probe_recall);
    }
    st.write(&ws.report_file("efficiency.txt"), txt.as_bytes())?;
    st.write(&ws.report_file("efficiency.tsv"), tsv.as_bytes())?;
    if !latency.is_empty() {
        // Wall-clock numbers differ between runs, so they live apart from the
        // deterministic reports.
        let mut lat = format!(
            "{:<12}{:>8}{:>12}{:>12}{:>12}\n",
            "index", "probes", "mean us", "p50 us", "p95 us"
        );
        for (l, s) in &latency {
            let _ = writeln!(
                lat,
                "{l:<12}{:>8}{:>12.1}{:>12.1}{:>12.1}",
                s.probes, s.mean_us, s.p50_us, s.p95_us
            );
        }
        st.write(&ws.report_file("latency.txt"), lat.as_bytes())?;
    }
    let mut m = load_manifest(ws)?;
    m.indices = entries.clone();
    st.write(&ws.manifest_file(), &m.to_bytes())?;
    st.commit()?;
    Ok(IndexOutcome {
        entries,
        efficiency,
        latency,
    })
}

/// Loads the index for `spec` and checks it was built from `model` and the
/// current embedding set.
fn checked_index(
    ws: &Workspace,
    manifest: &Manifest,
    spec: &IndexSpec,
    model: &ModelArtifact,
    emb: &EmbeddingSet,
) -> Result<IndexArtifact, PipelineError> {
    let idx = IndexArtifact::load(&ws.input(&ws.index_file(spec), "index")?)?;
    let label = spec.label();
    if idx.header.tte_id != model.tte_id {
        return Err(PipelineError::Version(format!(
            "index {label} was built for {} but the model is {}; re-run `index`",
            idx.header.tte_id, model.tte_id
        )));
    }
    match manifest.indices.iter().find(|e| e.label == label) {
        Some(e) if e.embeddings_set_id == emb.set_id => Ok(idx),
        Some(e) => Err(PipelineError::Version(format!(
            "index {label} was built from embeddings {} but the current set is {}; re-run `index`",
            e.embeddings_set_id, emb.set_id
        ))),
        None => Err(PipelineError::Version(format!(
            "index {label} has no recorded provenance; re-run `index`"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    pub dot: EvalReport,
    pub rerank: EvalReport,
}

fn lift(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        b / a - 1.0
    } else {
        0.0
    }
}

fn rerank_table(dot: &EvalReport, ffn: &EvalReport, expansion: usize) -> String {
    let mut s = format!("rerank of a {expansion}x first-stage pool at cut {}\n", dot.meta.cut);
    let _ = writeln!(s, "{:>8}{:>10}{:>10}{:>10}", "k", "dot", "ffn", "lift");
    for (i, k) in dot.ks.iter().enumerate() {
        let (a, b) = (dot.overall[i], ffn.overall[i]);
        let _ = writeln!(s, "{k:>8}{a:>10.4}{b:>10.4}{:>9.2}%", 100.0 * lift(a, b));
    }
    s
}

pub fn eval(ws: &Workspace) -> Result<EvalOutcome, PipelineError> {
    let cfg = &ws.config;
    let model = load_model(ws)?;
    let head = FfnHead::load(&ws.input(&ws.head_file(), "train")?)?;
    if head.encoder_tte_id != model.tte_id {
        return Err(PipelineError::Version(format!(
            "rerank head {} was trained on {} but the model is {}; re-run `train`",
            head.head_id(),
            head.encoder_tte_id,
            model.tte_id
        )));
    }
    let corpus = load_corpus(ws)?;
    let emb = current_embeddings(ws, &model, &corpus)?;
    let manifest = load_manifest(ws)?;
    let eval = EvalSet::held_out(&corpus.corpus);
    let pc = ProtocolConfig {
        ks: cfg.eval.ks.clone(),
        ef_search: cfg.eval.ef_search,
    };
    let mut st = Staging::new(&ws.root, "eval")?;
    let mut written = Vec::new();
    let mut put = |st: &mut Staging, name: String, body: String| -> Result<(), PipelineError> {
        let rel = ws.report_file(&name);
        st.write(&rel, body.as_bytes())?;
        written.push(FileRef::of(&rel, body.as_bytes()));
        Ok(())
    };
    let mut reports = Vec::new();
    let mut rerank_index = None;
    for spec in &cfg.indices {
        let idx = checked_index(ws, &manifest, spec, &model, &emb)?;
        let label = spec.label();
        let r = run_protocol(&model, &idx, &corpus.corpus, &eval, &pc, &label)?;
        put(
            &mut st,
            format!("eval-{label}.txt"),
            format!("{}{}\n", r.table(), r.coverage_line()),
        )?;
        put(&mut st, format!("eval-{label}.tsv"), r.tsv())?;
        if spec.cut == cfg.rerank.cut && spec.precision == Precision::Fp32 {
            rerank_index = Some(idx);
        }
        reports.push(r);
    }
    let idx =
        rerank_index.ok_or_else(|| PipelineError::Config(format!("no fp32 index at rerank cut {}", cfg.rerank.cut)))?;
    let rk = ProtocolConfig {
        ks: cfg.rerank.ks.clone(),
        ef_search: cfg.eval.ef_search,
    };
    let dot = run_protocol(&model, &idx, &corpus.corpus, &eval, &rk, "dot")?;
    let ex = cfg.rerank.expansion;
    let ffn = evaluate_rerank(
        &model,
        &idx,
        &head,
        &corpus.corpus,
        &eval,
        &cfg.rerank.ks,
        ex,
        cfg.eval.ef_search,
        "ffn",
    )?;
    put(&mut st, "rerank.txt".into(), rerank_table(&dot, &ffn, ex))?;
    put(&mut st, "rerank-dot.tsv".into(), dot.tsv())?;
    put(&mut st, "rerank-ffn.tsv".into(), ffn.tsv())?;

    let mut summary = format!(
        "model {} head {} embeddings {}\n",
        model.tte_id,
        head.head_id(),
        emb.set_id
    );
    for r in reports.iter().chain([&ffn]) {
        let _ = write!(summary, "{:<12}", r.meta.label);
        for (k, x) in r.ks.iter().zip(&r.overall) {
            let _ = write!(summary, "  R@{k} {x:.4}");
        }
        summary.push('\n');
    }
    put(&mut st, "summary.txt".into(), summary)?;

    let mut m = manifest.clone();
    m.eval = Some(EvalEntry {
        tte_id: model.tte_id.clone(),
        head_id: head.head_id(),
        embeddings_set_id: emb.set_id.clone(),
        indices: cfg.indices.iter().map(IndexSpec::label).collect(),
        reports: written,
    });
    st.write(&ws.manifest_file(), &m.to_bytes())?;
    st.commit()?;
    Ok(EvalOutcome {
        reports,
        dot,
        rerank: ffn,
    })
}

fn spec_by_label<'a>(ws: &'a Workspace, label: &str) -> Result<&'a IndexSpec, PipelineError> {
    ws.config.indices.iter().find(|s| s.label() == label).ok_or_else(|| {
        let known: Vec<String> = ws.config.indices.iter().map(IndexSpec::label).collect();
        PipelineError::Config(format!("no index `{label}` configured (known: {})", known.join(", ")))
    })
}

fn write_registry(ws: &Workspace, reg: &Registry) -> Result<(), PipelineError> {
    let mut st = Staging::new(&ws.root, "swap")?;
    st.write(&ws.registry_file(), &reg.to_bytes())?;
    st.commit()
}

/// Makes the index `label` active after it passes the guardrail; the
/// previously active index becomes standby. A failing candidate leaves the
/// registry untouched.
pub fn swap(ws: &Workspace, label: &str) -> Result<Registry, PipelineError> {
    let spec = spec_by_label(ws, label)?;
    let model = load_model(ws)?;
    let rel = ws.index_file(spec);
    let bytes = std::fs::read(ws.input(&rel, "index")?)?;
    let idx = IndexArtifact::from_bytes(&bytes)?;
    if idx.header.tte_id != model.tte_id {
        return Err(PipelineError::Version(format!(
            "index {label} was built for {} but the model is {}",
            idx.header.tte_id, model.tte_id
        )));
    }
    let corpus = load_corpus(ws)?;
    let eval = EvalSet::held_out(&corpus.corpus);
    let g = ws.config.guardrail;
    let recall = probe_recall(&idx, &probes(&model, &corpus, &eval, spec.cut)?, g.k, g.ef_search)?;
    if recall < g.min_recall {
        return Err(PipelineError::Guardrail {
            label: label.to_string(),
            recall,
            min: g.min_recall,
        });
    }
    let mut reg = Registry::load(&ws.path(&ws.registry_file()))?;
    reg.standby = reg.active.take();
    reg.active = Some(RegistrySlot {
        label: label.to_string(),
        tte_id: idx.header.tte_id.clone(),
        probe_recall: recall,
        file: FileRef::of(&rel, &bytes),
    });
    write_registry(ws, &reg)?;
    Ok(reg)
}

/// Reactivates the standby index.
pub fn rollback(ws: &Workspace) -> Result<Registry, PipelineError> {
    let mut reg = Registry::load(&ws.path(&ws.registry_file()))?;
    let Some(standby) = reg.standby.take() else {
        return Err(PipelineError::Config(
            "registry has no standby index to roll back to".into(),
        ));
    };
    if let Some(problem) = standby.file.check(&ws.root) {
        return Err(PipelineError::Version(format!("standby {}: {problem}", standby.label)));
    }
    reg.standby = reg.active.take();
    reg.active = Some(standby);
    write_registry(ws, &reg)?;
    Ok(reg)
}

/// Provenance of every recorded artifact, and whatever breaks the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Lineage {
    pub lines: Vec<String>,
    pub problems: Vec<String>,
}

impl Lineage {
    pub fn text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        if self.problems.is_empty() {
            s.push_str("chain intact\n");
        } else {
            for p in &self.problems {
                let _ = writeln!(s, "problem: {p}");
            }
        }
        s
    }
}

fn read_model(root: &Path, f: &FileRef) -> Option<ModelArtifact> {
    ModelArtifact::load(&root.join(&f.path)).ok()
}

/// Reconstructs lineage from the manifest and the artifacts' own headers and
/// writes it to `lineage.txt` in the reports directory.
pub fn report(ws: &Workspace) -> Result<Lineage, PipelineError> {
    let m = load_manifest(ws)?;
    let root = &ws.root;
    let mut lines = Vec::new();
    let mut problems = Vec::new();
    let check = |f: &FileRef, problems: &mut Vec<String>| {
        if let Some(p) = f.check(root) {
            problems.push(p);
        }
    };

    match &m.corpus {
        Some(c) => {
            lines.push(format!(
                "corpus      {} {} (seed {}, {} documents, {} queries, {} interaction rows)",
                c.corpus.path.display(),
                c.corpus.id,
                c.seed,
                c.documents,
                c.queries,
                c.interaction_rows
            ));
            check(&c.corpus, &mut problems);
            check(&c.interactions, &mut problems);
        }
        None => problems.push("no corpus recorded; run `gen`".into()),
    }
    let corpus_id = m.corpus.as_ref().map(|c| c.corpus.id.clone());

    let tte = if let Some(t) = &m.train {
        lines.push(format!(
            "stage1      {} {} from {} on data {}",
            t.stage1.path.display(),
            t.stage1_tte_id,
            t.init_tte_id,
            t.data_fingerprint
        ));
        lines.push(format!(
            "model       {} {} (query {}, doc {}) from {}",
            t.model.path.display(),
            t.tte_id,
            t.query_model_id,
            t.doc_model_id,
            t.stage1_tte_id
        ));
        lines.push(format!(
            "head        {} {} on {}",
            t.head.path.display(),
            t.head_id,
            t.tte_id
        ));
        for f in [&t.stage1, &t.model, &t.head].into_iter().chain(&t.logs) {
            check(f, &mut problems);
        }
        if corpus_id.as_deref() != Some(t.corpus_id.as_str()) {
            lines.push(format!(
                "            trained on corpus {}, which is no longer current",
                t.corpus_id
            ));
        }
        if let Some(s2) = read_model(root, &t.model) {
            if s2.tte_id != t.tte_id || s2.parent_tte_id.as_deref() != Some(t.stage1_tte_id.as_str()) {
                problems.push(format!(
                    "model header {} (parent {:?}) disagrees with the manifest",
                    s2.tte_id, s2.parent_tte_id
                ));
            }
        }
        if let Some(s1) = read_model(root, &t.stage1) {
            if s1.parent_tte_id.as_deref() != Some(t.init_tte_id.as_str()) {
                problems.push(format!(
                    "stage-1 parent {:?} is not the recorded init {}",
                    s1.parent_tte_id, t.init_tte_id
                ));
            }
        }
        if let Ok(h) = FfnHead::load(&root.join(&t.head.path)) {
            if h.encoder_tte_id != t.tte_id {
                problems.push(format!(
                    "head encoder {} is not the model {}",
                    h.encoder_tte_id, t.tte_id
                ));
            }
        }
        Some(t.tte_id.clone())
    } else {
        problems.push("no trained model recorded; run `train`".into());
        None
    };

    let set = if let Some(e) = &m.embeddings {
        let parent = e
            .parent_set_id
            .as_deref()
            .map(|p| format!(", delta from {p}"))
            .unwrap_or_default();
        lines.push(format!(
            "embeddings  {} {} by {} ({} reused, {} recomputed{parent})",
            e.file.path.display(),
            e.set_id,
            e.tte_id,
            e.reused,
            e.recomputed
        ));
        check(&e.file, &mut problems);
        if tte.as_deref() != Some(e.tte_id.as_str()) {
            problems.push(format!(
                "embeddings {} were made by {}, not the current model",
                e.set_id, e.tte_id
            ));
        }
        if corpus_id.as_deref() != Some(e.corpus_id.as_str()) {
            problems.push(format!("embeddings {} predate the current corpus", e.set_id));
        }
        Some(e.set_id.clone())
    } else {
        None
    };

    for ix in &m.indices {
        lines.push(format!(
            "index       {} {} cut {} {} by {} from {} (probe recall {:.4})",
            ix.file.path.display(),
            ix.file.id,
            ix.cut,
            ix.precision,
            ix.tte_id,
            ix.embeddings_set_id,
            ix.probe_recall
        ));
        check(&ix.file, &mut problems);
        if tte.as_deref() != Some(ix.tte_id.as_str()) {
            problems.push(format!(
                "index {} was built for {}, not the current model",
                ix.label, ix.tte_id
            ));
        }
        if set.as_deref() != Some(ix.embeddings_set_id.as_str()) {
            problems.push(format!(
                "index {} was built from stale embeddings {}",
                ix.label, ix.embeddings_set_id
            ));
        }
        if let Ok(idx) = IndexArtifact::load(&root.join(&ix.file.path)) {
            if idx.header.tte_id != ix.tte_id || idx.header.cut != ix.cut || idx.header.precision != ix.precision {
                problems.push(format!("index {} header disagrees with the manifest", ix.label));
            }
        }
    }

    if let Some(e) = &m.eval {
        lines.push(format!(
            "eval        {} reports for {} with head {} on {} over {}",
            e.reports.len(),
            e.tte_id,
            e.head_id,
            e.embeddings_set_id,
            e.indices.join(", ")
        ));
        for f in &e.reports {
            check(f, &mut problems);
        }
        if tte.as_deref() != Some(e.tte_id.as_str()) || set.as_deref() != Some(e.embeddings_set_id.as_str()) {
            problems.push("eval reports are older than the current model or embeddings".into());
        }
        if m.train.as_ref().map(|t| &t.head_id) != Some(&e.head_id) {
            problems.push(format!("eval used head {}, not the current one", e.head_id));
        }
    }

    let reg = Registry::load(&ws.path(&ws.registry_file()))?;
    for (name, slot) in [("active", &reg.active), ("standby", &reg.standby)] {
        if let Some(s) = slot {
            lines.push(format!("{name:<12}{} {} by {}", s.label, s.file.id, s.tte_id));
            if let Some(p) = s.file.check(root) {
                lines.push(format!("            {p}"));
            }
        }
    }

    let lineage = Lineage { lines, problems };
    let mut st = Staging::new(&ws.root, "report")?;
    st.write(&ws.report_file("lineage.txt"), lineage.text().as_bytes())?;
    st.commit()?;
    Ok(lineage)
}
