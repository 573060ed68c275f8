use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::data::{exact_eval, load_corpus, LoadedCorpus, TrainInputs};
use super::stage::Staging;
use super::steps::init_model;
use super::{IndexSpec, PipelineError, Workspace};
use crate::ann::{IndexArtifact, Precision};
use crate::corpus::Market;
use crate::eval::{run_protocol, EvalReport, EvalSet, ProtocolConfig};
use crate::rerank::{evaluate_rerank, FfnHead};
use crate::towers::{fixed_projection_head, FeatureHasher, InputFormat, ModelArtifact};
use crate::trainer::{train_stage1, Featurized, InBatchLoss, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    InputFormat,
    MrlVsFc,
    LossBatchSensitivity,
    RerankLift,
}

impl Study {
    pub const ALL: [Study; 4] = [
        Study::InputFormat,
        Study::MrlVsFc,
        Study::LossBatchSensitivity,
        Study::RerankLift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::InputFormat => "input-format",
            Study::MrlVsFc => "mrl-vs-fc",
            Study::LossBatchSensitivity => "loss-batch-sensitivity",
            Study::RerankLift => "rerank-lift",
        }
    }

    /// Short letter the study is filed under in the reports directory.
    pub fn letter(self) -> char {
        match self {
            Study::InputFormat => 'B',
            Study::MrlVsFc => 'D',
            Study::LossBatchSensitivity => 'E',
            Study::RerankLift => 'F',
        }
    }

    /// Runs the study and writes `ablation-<letter>-<name>.{txt,tsv}`.
    pub fn run(self, ws: &Workspace) -> Result<String, PipelineError> {
        let corpus = load_corpus(ws)?;
        let table = match self {
            Study::RerankLift => rerank_table(&rerank_lift(ws, &corpus)?, &ws.config.rerank.ks),
            _ => {
                let inputs = TrainInputs::build(&corpus.corpus, &corpus.interactions, &ws.config.hasher, &ws.config)?;
                match self {
                    Study::InputFormat => format_table(&input_format(ws, &corpus, &inputs)?, &ws.config.ablation.ks),
                    Study::MrlVsFc => mrl_table(&mrl_vs_fc(ws, &corpus, &inputs)?),
                    _ => batch_table(&batch_sensitivity(ws, &corpus, &inputs)?, &ws.config.ablation.ks),
                }
            }
        };
        let stem = format!("ablation-{}-{}", self.letter().to_ascii_lowercase(), self.name());
        let text = table.text(&format!("{} {}", self.letter(), self.name()));
        let mut st = Staging::new(&ws.root, "ablate")?;
        st.write(&ws.report_file(&format!("{stem}.txt")), text.as_bytes())?;
        st.write(&ws.report_file(&format!("{stem}.tsv")), table.tsv().as_bytes())?;
        st.commit()?;
        Ok(text)
    }
}

impl FromStr for Study {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s || st.letter().to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Study::ALL.iter().map(|s| s.name()).collect();
                PipelineError::Config(format!("unknown study `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    notes: Vec<String>,
}

impl Table {
    fn text(&self, title: &str) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.header[c].len()])
                    .max()
                    .unwrap_or(0)
                    + 2
            })
            .collect();
        let mut s = format!("{title}\n");
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (i, cell) in row.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{cell:<w$}", w = widths[i]);
                } else {
                    let _ = write!(s, "{cell:>w$}", w = widths[i]);
                }
            }
            s.push('\n');
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s
    }

    fn tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }
}

fn recall_cols(ks: &[usize]) -> impl Iterator<Item = String> + '_ {
    ks.iter().map(|k| format!("R@{k}"))
}

fn fmt4(xs: &[f64]) -> impl Iterator<Item = String> + '_ {
    xs.iter().map(|x| format!("{x:.4}"))
}

fn ablation_config(ws: &Workspace) -> TrainConfig {
    TrainConfig {
        max_steps: ws.config.ablation.steps,
        eval_interval: 0,
        checkpoint_interval: 0,
        ..ws.config.stage1.clone()
    }
}

fn full_width(
    ws: &Workspace,
    model: &ModelArtifact,
    corpus: &LoadedCorpus,
    eval: &EvalSet,
    cut: usize,
    label: &str,
) -> Result<EvalReport, PipelineError> {
    exact_eval(
        model,
        &corpus.corpus,
        eval,
        cut,
        Precision::Fp32,
        &ws.config.ablation.ks,
        label,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatRow {
    pub format: InputFormat,
    pub recall: Vec<f64>,
}

/// Structured `field: value` input against the same text without field names.
pub fn input_format(
    ws: &Workspace,
    corpus: &LoadedCorpus,
    inputs: &TrainInputs,
) -> Result<Vec<FormatRow>, PipelineError> {
    let cfg = &ws.config;
    let tc = ablation_config(ws);
    let mut out = Vec::new();
    for format in [InputFormat::Structured, InputFormat::Plain] {
        let hasher = FeatureHasher { format, ..cfg.hasher };
        let mut data = inputs.data.clone();
        if hasher != data.features.hasher {
            data.features = Featurized::build(&corpus.corpus, &hasher)?;
        }
        let init = init_model(ws, hasher, cfg.towers, cfg.serving_cuts())?;
        let (m, _) = train_stage1(&tc, &data, &init, None)?;
        let r = full_width(ws, &m, corpus, &inputs.eval, m.d_full(), "format")?;
        out.push(FormatRow {
            format,
            recall: r.overall,
        });
    }
    Ok(out)
}

fn format_table(rows: &[FormatRow], ks: &[usize]) -> Table {
    Table {
        header: ["Input format".to_string()]
            .into_iter()
            .chain(recall_cols(ks))
            .collect(),
        rows: rows
            .iter()
            .map(|r| {
                let name = match r.format {
                    InputFormat::Structured => "structured",
                    InputFormat::Plain => "plain",
                };
                [name.to_string()].into_iter().chain(fmt4(&r.recall)).collect()
            })
            .collect(),
        notes: vec![],
    }
}

/// Recall of an MRL model at full width and at `cut`, a model trained
/// without nested cuts and truncated the same way, and a model trained with
/// a `d_full -> cut` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MrlStudy {
    pub cut: usize,
    pub d_full: usize,
    pub ks: Vec<usize>,
    pub mrl_full: Vec<f64>,
    pub mrl_cut: Vec<f64>,
    pub plain_full: Vec<f64>,
    pub plain_cut: Vec<f64>,
    pub fc: Vec<f64>,
}

impl MrlStudy {
    fn at(&self, xs: &[f64], k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| xs[i])
    }

    /// Fraction of full-width recall@k kept at the cut, for the MRL model and
    /// the control.
    pub fn retention(&self, k: usize) -> Option<(f64, f64)> {
        Some((
            self.at(&self.mrl_cut, k)? / self.at(&self.mrl_full, k)?,
            self.at(&self.plain_cut, k)? / self.at(&self.plain_full, k)?,
        ))
    }

    pub fn mrl_minus_fc(&self, k: usize) -> Option<f64> {
        Some(self.at(&self.mrl_cut, k)? - self.at(&self.fc, k)?)
    }
}

pub fn mrl_vs_fc(ws: &Workspace, corpus: &LoadedCorpus, inputs: &TrainInputs) -> Result<MrlStudy, PipelineError> {
    let cfg = &ws.config;
    let cut = cfg.ablation.fc_cut;
    let cuts = cfg.serving_cuts();
    let tc = ablation_config(ws);
    let eval = &inputs.eval;
    let init = init_model(ws, cfg.hasher, cfg.towers, cuts.clone())?;
    let d = init.d_full();

    let (mrl, _) = train_stage1(&tc, &inputs.data, &init, None)?;
    // The control declares the same serving cuts so it can be truncated, but
    // trains on the full width only.
    let plain_cfg = TrainConfig {
        mrl_cuts: vec![],
        ..tc.clone()
    };
    let (plain, _) = train_stage1(&plain_cfg, &inputs.data, &init, None)?;
    let fc_init = ModelArtifact::new(
        cfg.hasher,
        fixed_projection_head(&init.query, cut)?,
        fixed_projection_head(&init.doc, cut)?,
        vec![cut],
        None,
    )?;
    let (fc, _) = train_stage1(&plain_cfg, &inputs.data, &fc_init, None)?;
    Ok(MrlStudy {
        cut,
        d_full: d,
        ks: cfg.ablation.ks.clone(),
        mrl_full: full_width(ws, &mrl, corpus, eval, d, "mrl")?.overall,
        mrl_cut: full_width(ws, &mrl, corpus, eval, cut, "mrl")?.overall,
        plain_full: full_width(ws, &plain, corpus, eval, d, "plain")?.overall,
        plain_cut: full_width(ws, &plain, corpus, eval, cut, "plain")?.overall,
        fc: full_width(ws, &fc, corpus, eval, cut, "fc")?.overall,
    })
}

fn mrl_table(s: &MrlStudy) -> Table {
    let rows = [
        ("MRL", s.d_full, &s.mrl_full),
        ("MRL", s.cut, &s.mrl_cut),
        ("no MRL", s.d_full, &s.plain_full),
        ("no MRL", s.cut, &s.plain_cut),
        ("FC", s.cut, &s.fc),
    ];
    let mut notes = Vec::new();
    for &k in &s.ks {
        if let (Some((a, b)), Some(diff)) = (s.retention(k), s.mrl_minus_fc(k)) {
            notes.push(format!(
                "R@{k}: retained at {} dims {:.1}% with MRL, {:.1}% without; MRL minus FC {diff:+.4}",
                s.cut,
                100.0 * a,
                100.0 * b
            ));
        }
    }
    Table {
        header: ["Model".to_string(), "Dims".to_string()]
            .into_iter()
            .chain(recall_cols(&s.ks))
            .collect(),
        rows: rows
            .iter()
            .map(|(n, d, r)| [n.to_string(), d.to_string()].into_iter().chain(fmt4(r)).collect())
            .collect(),
        notes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub loss: InBatchLoss,
    pub batch: usize,
    pub init_temperature: f64,
    /// SigLIP only.
    pub init_bias: Option<f64>,
    pub recall: Vec<f64>,
}

/// Recall drop from the largest to the smallest batch for `loss` at the
/// `i`-th evaluated k.
pub fn degradation(rows: &[BatchRow], loss: InBatchLoss, i: usize) -> Option<f64> {
    let mine: Vec<&BatchRow> = rows.iter().filter(|r| r.loss == loss).collect();
    let big = mine.iter().max_by_key(|r| r.batch)?;
    let small = mine.iter().min_by_key(|r| r.batch)?;
    Some(big.recall[i] - small.recall[i])
}

/// Trains each loss at each batch size for the same number of steps from
/// the same initialization.
pub fn batch_sensitivity(
    ws: &Workspace,
    corpus: &LoadedCorpus,
    inputs: &TrainInputs,
) -> Result<Vec<BatchRow>, PipelineError> {
    let cfg = &ws.config;
    let init = init_model(ws, cfg.hasher, cfg.towers, cfg.serving_cuts())?;
    let mut rows = Vec::new();
    for loss in [InBatchLoss::InfoNce, InBatchLoss::Siglip] {
        for &batch in &cfg.ablation.batch_sizes {
            let tc = TrainConfig {
                in_batch_loss: loss,
                micro_batch: batch,
                max_steps: cfg.ablation.batch_steps,
                ..ablation_config(ws)
            };
            let (m, _) = train_stage1(&tc, &inputs.data, &init, None)?;
            let r = full_width(ws, &m, corpus, &inputs.eval, m.d_full(), "batch")?;
            let (init_temperature, init_bias) = match loss {
                InBatchLoss::InfoNce => (tc.temperature, None),
                InBatchLoss::Siglip => (tc.siglip_temperature, Some(tc.siglip_bias)),
            };
            rows.push(BatchRow {
                loss,
                batch,
                init_temperature,
                init_bias,
                recall: r.overall,
            });
        }
    }
    Ok(rows)
}

fn batch_table(rows: &[BatchRow], ks: &[usize]) -> Table {
    let name = |l: InBatchLoss| match l {
        InBatchLoss::InfoNce => "InfoNCE",
        InBatchLoss::Siglip => "SigLIP",
    };
    let mut notes = Vec::new();
    for (i, k) in ks.iter().enumerate() {
        if let (Some(a), Some(b)) = (
            degradation(rows, InBatchLoss::InfoNce, i),
            degradation(rows, InBatchLoss::Siglip, i),
        ) {
            notes.push(format!(
                "R@{k} drop from largest to smallest batch: InfoNCE {a:+.4}, SigLIP {b:+.4}"
            ));
        }
    }
    Table {
        header: ["Loss", "Batch", "Init temp", "Init bias"]
            .into_iter()
            .map(String::from)
            .chain(recall_cols(ks))
            .collect(),
        rows: rows
            .iter()
            .map(|r| {
                let temp = format!("{}", r.init_temperature);
                let bias = r.init_bias.map(|b| format!("{b}")).unwrap_or_else(|| "-".into());
                [name(r.loss).to_string(), r.batch.to_string(), temp, bias]
                    .into_iter()
                    .chain(fmt4(&r.recall))
                    .collect()
            })
            .collect(),
        notes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankLiftRow {
    /// `None` for the all-market row.
    pub market: Option<Market>,
    pub queries: usize,
    pub dot: Vec<f64>,
    pub ffn: Vec<f64>,
}

/// Dot-product against head reranking of the trained model, per market.
pub fn rerank_lift(ws: &Workspace, corpus: &LoadedCorpus) -> Result<Vec<RerankLiftRow>, PipelineError> {
    let cfg = &ws.config;
    let model = ModelArtifact::load(&ws.input(&ws.model_file(), "train")?)?;
    let head = FfnHead::load(&ws.input(&ws.head_file(), "train")?)?;
    let spec = IndexSpec {
        cut: cfg.rerank.cut,
        precision: Precision::Fp32,
    };
    let idx = IndexArtifact::load(&ws.input(&ws.index_file(&spec), "index")?)?;
    if idx.header.tte_id != model.tte_id || head.encoder_tte_id != model.tte_id {
        return Err(PipelineError::Version(format!(
            "index {} and head {} must both belong to model {}",
            idx.header.tte_id, head.encoder_tte_id, model.tte_id
        )));
    }
    let eval = EvalSet::held_out(&corpus.corpus);
    let ks = &cfg.rerank.ks;
    let pc = ProtocolConfig {
        ks: ks.clone(),
        ef_search: cfg.eval.ef_search,
    };
    let dot = run_protocol(&model, &idx, &corpus.corpus, &eval, &pc, "dot")?;
    let ffn = evaluate_rerank(
        &model,
        &idx,
        &head,
        &corpus.corpus,
        &eval,
        ks,
        cfg.rerank.expansion,
        cfg.eval.ef_search,
        "ffn",
    )?;
    let mut acc: BTreeMap<Market, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (a, b) in dot.per_query.iter().zip(&ffn.per_query) {
        let e = acc
            .entry(a.market)
            .or_insert_with(|| (0, vec![0.0; ks.len()], vec![0.0; ks.len()]));
        e.0 += 1;
        for i in 0..ks.len() {
            e.1[i] += a.recall[i];
            e.2[i] += b.recall[i];
        }
    }
    let mut rows: Vec<RerankLiftRow> = acc
        .into_iter()
        .map(|(m, (n, d, f))| RerankLiftRow {
            market: Some(m),
            queries: n,
            dot: d.iter().map(|x| x / n as f64).collect(),
            ffn: f.iter().map(|x| x / n as f64).collect(),
        })
        .collect();
    rows.push(RerankLiftRow {
        market: None,
        queries: dot.evaluated,
        dot: dot.overall,
        ffn: ffn.overall,
    });
    Ok(rows)
}

fn rerank_table(rows: &[RerankLiftRow], ks: &[usize]) -> Table {
    let mut header = vec!["Market".to_string(), "Queries".to_string()];
    for k in ks {
        header.extend([format!("Dot R@{k}"), format!("FFN R@{k}"), format!("Lift R@{k}")]);
    }
    Table {
        header,
        rows: rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.market.map(|m| m.to_string()).unwrap_or_else(|| "all".into()),
                    r.queries.to_string(),
                ];
                for i in 0..ks.len() {
                    let lift = if r.dot[i] > 0.0 {
                        100.0 * (r.ffn[i] / r.dot[i] - 1.0)
                    } else {
                        0.0
                    };
                    row.extend([
                        format!("{:.4}", r.dot[i]),
                        format!("{:.4}", r.ffn[i]),
                        format!("{lift:+.2}%"),
                    ]);
                }
                row
            })
            .collect(),
        notes: vec![],
    }
}
