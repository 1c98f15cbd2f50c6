//! End-to-end runs: features, graphs, pretraining, fine-tuning, scoring and
//! the experiment grids built on top of them.

use std::io::Write;
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{dataset_osr, mask_labels, temporal_split, Dataset, KeyKind, LabelState, Split};
use crate::error::{Error, Result};
use crate::eval::{metrics_at, EvalReport, KeyOsr, ReportMeta, ScoredTransaction};
use crate::features::{engineered_features, NumericMatrix, Standardizer};
use crate::gbdt::{fit_gbdt, GbdtParams, TreeEnsemble};
use crate::gnn::{heads, ModelParams};
use crate::graph::{GraphVariant, NodeFeatures, NodeRef, TransactionGraph};
use crate::train::{
    embed, finetune, pretrain, stage_seed, EpochLog, ExperimentConfig, LabeledRoot, SplitConfig, TrainConfig, Variant,
};

/// Default first test date: 365 days before the last date.
pub fn default_test_from(d: &Dataset) -> Result<NaiveDate> {
    let last = d.records().iter().map(|r| r.date).max().ok_or(Error::EmptySplit("dataset"))?;
    Ok(last - Duration::days(364))
}

/// Temporal split followed by label masking of the train split.
pub fn prepare_dataset(d: &Dataset, split: &SplitConfig, seed: u64) -> Result<Dataset> {
    let test_from = match split.test_from {
        Some(t) => t,
        None => default_test_from(d)?,
    };
    let s = temporal_split(d, test_from, split.valid_fraction)?;
    mask_labels(&s, split.inspection_rate, seed)
}

/// Mean and standard deviation of `log(1 + revenue)` over labeled train records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueScale {
    pub mean: f64,
    pub std: f64,
}

impl RevenueScale {
    pub fn fit(d: &Dataset) -> Self {
        let v: Vec<f64> =
            d.labeled_train().into_iter().map(|i| d.record(i).raised_revenue.unwrap_or(0.0).ln_1p()).collect();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: if var > 0.0 { var.sqrt() } else { 1.0 } }
    }

    pub fn target(&self, revenue: f64) -> f64 {
        (revenue.ln_1p() - self.mean) / self.std
    }

    /// Back to currency units.
    pub fn revenue(&self, z: f64) -> f64 {
        (z * self.std + self.mean).exp_m1()
    }
}

/// Everything needed to score transactions after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub ensemble: Option<TreeEnsemble>,
    pub standardizer: Option<Standardizer>,
    pub revenue: RevenueScale,
    pub best_epoch: usize,
}

fn labeled_train_matrix(d: &Dataset) -> (NumericMatrix, Vec<f64>) {
    let rows = d.labeled_train();
    let x = engineered_features(d).select_rows(&rows);
    let y = rows.iter().map(|&i| if d.record(i).illicit == Some(true) { 1.0 } else { 0.0 }).collect();
    (x, y)
}

pub fn fit_baseline(d: &Dataset, params: &GbdtParams) -> Result<TreeEnsemble> {
    let (x, y) = labeled_train_matrix(d);
    fit_gbdt(&x, &y, params)
}

/// Node features for every record of `d`.
fn build_features(
    d: &Dataset,
    ensemble: Option<&TreeEnsemble>,
    standardizer: Option<&Standardizer>,
) -> Result<NodeFeatures> {
    let raw = engineered_features(d);
    match (ensemble, standardizer) {
        (Some(e), _) => Ok(NodeFeatures::MultiHot(e.encode_multihot(&raw)?)),
        (None, Some(s)) => {
            let rows: Vec<Vec<f64>> = (0..raw.rows()).map(|i| s.apply_row(raw.row(i))).collect();
            Ok(NodeFeatures::Dense(NumericMatrix::from_rows(&rows)?))
        }
        (None, None) => Err(Error::Checkpoint("model has neither a tree ensemble nor a standardizer".into())),
    }
}

/// Train records kept by a graph variant, optionally with all valid and test records.
fn graph_records(d: &Dataset, variant: GraphVariant, with_eval: bool) -> Vec<usize> {
    (0..d.len())
        .filter(|&i| match d.split(i) {
            Split::Train => match variant {
                GraphVariant::Full => true,
                GraphVariant::LabeledOnly => d.label_state(i) == LabelState::Labeled,
                GraphVariant::UnlabeledOnly => d.label_state(i) == LabelState::Unlabeled,
            },
            _ => with_eval,
        })
        .collect()
}

fn graph_for(d: &Dataset, feats: &Arc<NodeFeatures>, cfg: &TrainConfig, variant: GraphVariant, with_eval: bool) -> Result<TransactionGraph> {
    let records = graph_records(d, variant, with_eval);
    if records.is_empty() {
        return Err(Error::EmptyGraph(format!("graph variant {variant:?} selects no transactions")));
    }
    TransactionGraph::from_records(d, feats.clone(), &records, &cfg.graph_keys())
}

impl TrainedModel {
    pub fn node_features(&self, d: &Dataset) -> Result<NodeFeatures> {
        build_features(d, self.ensemble.as_ref(), self.standardizer.as_ref())
    }

    /// Fine-tuning graph plus every valid and test transaction.
    pub fn inference_graph(&self, d: &Dataset) -> Result<TransactionGraph> {
        let feats = Arc::new(self.node_features(d)?);
        if feats.width() != self.params.input_width() {
            return Err(Error::Shape(format!(
                "data yields {} input features, model expects {}",
                feats.width(),
                self.params.input_width()
            )));
        }
        graph_for(d, &feats, &self.config, self.config.finetune_graph, true)
    }

    fn inference_seed(&self) -> u64 {
        stage_seed(self.config.seed, 3, 0)
    }

    /// Final embedding of each record, using only transactions up to its date.
    pub fn embeddings(&self, g: &TransactionGraph, d: &Dataset, records: &[usize]) -> Result<Vec<Vec<f64>>> {
        let map = g.record_to_txn();
        records
            .iter()
            .map(|&i| {
                let txn = *map.get(&i).ok_or_else(|| Error::UnknownNode(format!("record {i} is not in the graph")))?;
                let t = embed(&self.params, g, NodeRef::txn(txn), &self.config.fanouts, self.inference_seed(), Some(d.record(i).date))?;
                Ok(t.root_embedding().to_vec())
            })
            .collect()
    }

    pub fn score_records(&self, g: &TransactionGraph, d: &Dataset, records: &[usize]) -> Result<Vec<ScoredTransaction>> {
        let embs = self.embeddings(g, d, records)?;
        records
            .iter()
            .zip(embs)
            .map(|(&i, s)| {
                let (y_cls, z) = heads(&self.params, &s)?;
                let r = d.record(i);
                Ok(ScoredTransaction {
                    txn_id: r.txn_id.clone(),
                    y_cls,
                    y_rev: self.revenue.revenue(z),
                    illicit: r.illicit,
                    raised_revenue: r.raised_revenue,
                })
            })
            .collect()
    }

    pub fn score_split(&self, d: &Dataset, split: Split) -> Result<Vec<ScoredTransaction>> {
        let g = self.inference_graph(d)?;
        self.score_records(&g, d, &d.indices_in(split))
    }
}

/// Scores from the tree ensemble alone.
pub fn baseline_scores(e: &TreeEnsemble, d: &Dataset, records: &[usize]) -> Result<Vec<ScoredTransaction>> {
    let raw = engineered_features(d);
    records
        .iter()
        .map(|&i| {
            let r = d.record(i);
            Ok(ScoredTransaction {
                txn_id: r.txn_id.clone(),
                y_cls: e.score(raw.row(i))?,
                y_rev: 0.0,
                illicit: r.illicit,
                raised_revenue: r.raised_revenue,
            })
        })
        .collect()
}

/// Label of a run: the variant, or the graph pair when it differs from (G, G).
pub fn run_label(cfg: &TrainConfig) -> String {
    if cfg.pretrain_graph == GraphVariant::Full && cfg.finetune_graph == GraphVariant::Full {
        cfg.variant.name().to_string()
    } else {
        grid_label(cfg.pretrain_graph, cfg.finetune_graph)
    }
}

fn graph_symbol(v: GraphVariant) -> &'static str {
    match v {
        GraphVariant::Full => "G",
        GraphVariant::LabeledOnly => "G_L",
        GraphVariant::UnlabeledOnly => "G_U",
    }
}

pub fn grid_label(pretrain: GraphVariant, finetune: GraphVariant) -> String {
    format!("Q({})+F({})", graph_symbol(pretrain), graph_symbol(finetune))
}

/// Pretraining graph crossed with the two fine-tuning graphs that carry labels.
pub fn graph_grid() -> Vec<(GraphVariant, GraphVariant)> {
    let mut v = Vec::with_capacity(6);
    for f in [GraphVariant::LabeledOnly, GraphVariant::Full] {
        for q in [GraphVariant::LabeledOnly, GraphVariant::UnlabeledOnly, GraphVariant::Full] {
            v.push((q, f));
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: TrainedModel,
    pub report: EvalReport,
    pub test_scores: Vec<ScoredTransaction>,
    pub curves: Vec<EpochLog>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

/// Trains on a split and masked dataset and reports on its test split.
pub fn run_pipeline(cfg: &TrainConfig, d: &Dataset, config_digest: &str) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (ensemble, standardizer) = if cfg.variant == Variant::Only {
        let raw = engineered_features(d);
        (None, Some(Standardizer::fit(&raw, &d.indices_in(Split::Train))))
    } else {
        (Some(stage("gbdt", fit_baseline(d, &cfg.gbdt))?), None)
    };
    let feats = Arc::new(stage("encode", build_features(d, ensemble.as_ref(), standardizer.as_ref()))?);
    let mut params = stage(
        "init",
        ModelParams::init(cfg.aggregator, feats.width(), cfg.hidden, cfg.n_layers, stage_seed(cfg.seed, 0, 0)),
    )?;
    let mut curves = Vec::new();
    let pre_graph = if matches!(cfg.variant, Variant::Semi) || (cfg.pretrain_epochs == 0 && cfg.variant != Variant::Joint) {
        None
    } else {
        Some(stage("pretrain graph", graph_for(d, &feats, cfg, cfg.pretrain_graph, false))?)
    };
    if cfg.variant != Variant::Joint {
        if let Some(g) = &pre_graph {
            curves.extend(stage("pretrain", pretrain(&mut params, g, cfg))?);
        }
    }
    params.reset_heads(stage_seed(cfg.seed, 4, 0));

    let revenue = RevenueScale::fit(d);
    let ft_graph = stage("finetune graph", graph_for(d, &feats, cfg, cfg.finetune_graph, false))?;
    let roots: Vec<LabeledRoot> = (0..ft_graph.n_txn() as u32)
        .filter(|&t| {
            let i = ft_graph.txn_record(t);
            d.split(i) == Split::Train && d.is_labeled(i)
        })
        .map(|t| {
            let r = d.record(ft_graph.txn_record(t));
            LabeledRoot {
                txn: t,
                label: if r.illicit == Some(true) { 1.0 } else { 0.0 },
                rev_target: revenue.target(r.raised_revenue.unwrap_or(0.0)),
            }
        })
        .collect();

    let mut model = TrainedModel { config: cfg.clone(), params: params.clone(), ensemble, standardizer, revenue, best_epoch: 0 };
    let inf_graph = stage("inference graph", graph_for(d, &feats, cfg, cfg.finetune_graph, true))?;
    let valid = d.indices_in(Split::Valid);
    let joint = if cfg.variant == Variant::Joint { pre_graph.as_ref() } else { None };
    let (logs, best_epoch) = stage(
        "finetune",
        finetune(&mut params, &ft_graph, &roots, cfg, joint, |p| {
            let m = TrainedModel { params: p.clone(), ..model.clone() };
            let scored = m.score_records(&inf_graph, d, &valid)?;
            let at = metrics_at(&scored, cfg.ranking_key, &[cfg.early_stop_fraction])?;
            Ok(at[0].recall)
        }),
    )?;
    curves.extend(logs);
    model.params = params;
    model.best_epoch = best_epoch;

    let test_scores = stage("score", model.score_records(&inf_graph, d, &d.indices_in(Split::Test)))?;
    let meta = ReportMeta {
        variant: run_label(cfg),
        seed: cfg.seed,
        config_digest: config_digest.to_string(),
        ranking_key: cfg.ranking_key,
    };
    let mut report = stage("report", EvalReport::new(&meta, &test_scores, &cfg.eval_fractions))?;
    for key in [KeyKind::Importer, KeyKind::HsCode] {
        report.osr.push(KeyOsr { key, summary: stage("report", dataset_osr(d, key))? });
    }
    Ok(PipelineOutput { model, report, test_scores, curves })
}

/// Prepares the data for one seed and runs the pipeline on it.
pub fn run_experiment(exp: &ExperimentConfig, raw: &Dataset) -> Result<PipelineOutput> {
    let d = stage("prepare", prepare_dataset(raw, &exp.data, exp.train.seed))?;
    run_pipeline(&exp.train, &d, &exp.digest())
}

/// Outcome of one sweep cell; failures are kept so the sweep can continue.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub inspection_rate: f64,
    pub seed: u64,
    pub outcome: std::result::Result<EvalReport, String>,
}

/// One full run per (inspection rate, seed).
pub fn sweep_inspection(exp: &ExperimentConfig, raw: &Dataset, rates: &[f64], seeds: &[u64]) -> Result<Vec<SweepCell>> {
    if rates.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one rate and one seed".into()));
    }
    if let Some(r) = rates.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config(format!("inspection rate {r} outside (0,1]")));
    }
    let mut cells = Vec::with_capacity(rates.len() * seeds.len());
    for &rate in rates {
        for &seed in seeds {
            let mut e = exp.clone();
            e.data.inspection_rate = rate;
            e.train.seed = seed;
            let outcome = run_experiment(&e, raw).map(|o| o.report).map_err(|err| err.to_string());
            if let Err(msg) = &outcome {
                log::warn!("sweep cell rate={rate} seed={seed} failed: {msg}");
            }
            cells.push(SweepCell { label: run_label(&e.train), inspection_rate: rate, seed, outcome });
        }
    }
    Ok(cells)
}

/// Configurations of a named grid: the graph-variant grid or the ablations.
pub fn grid_configs(base: &TrainConfig, grid: Grid) -> Vec<TrainConfig> {
    match grid {
        Grid::Graphs => graph_grid()
            .into_iter()
            .map(|(q, f)| TrainConfig { pretrain_graph: q, finetune_graph: f, ..base.clone() })
            .collect(),
        Grid::Ablations => Variant::ALL.into_iter().map(|v| TrainConfig { variant: v, ..base.clone() }).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Graphs,
    Ablations,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphs" => Ok(Grid::Graphs),
            "ablations" => Ok(Grid::Ablations),
            other => Err(Error::InvalidArgument(format!("unknown grid `{other}`"))),
        }
    }
}

/// Runs each config for each seed on the same data preparation.
pub fn run_grid(data: &SplitConfig, configs: &[TrainConfig], raw: &Dataset, seeds: &[u64]) -> Result<Vec<SweepCell>> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("grid needs at least one configuration and one seed".into()));
    }
    let mut cells = Vec::new();
    for cfg in configs {
        for &seed in seeds {
            let exp = ExperimentConfig { data: data.clone(), train: TrainConfig { seed, ..cfg.clone() } };
            let outcome = run_experiment(&exp, raw).map(|o| o.report).map_err(|e| e.to_string());
            cells.push(SweepCell { label: run_label(&exp.train), inspection_rate: data.inspection_rate, seed, outcome });
        }
    }
    Ok(cells)
}

/// Long-format table: one row per cell and inspection fraction; failed cells
/// get a single row carrying the error.
pub fn write_cells_csv<W: Write>(cells: &[SweepCell], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label", "inspection_rate", "seed", "status", "fraction", "precision", "recall", "revenue", "error"])?;
    for c in cells {
        match &c.outcome {
            Ok(r) => {
                for m in &r.metrics {
                    out.write_record([
                        c.label.clone(),
                        c.inspection_rate.to_string(),
                        c.seed.to_string(),
                        "ok".into(),
                        m.fraction.to_string(),
                        m.precision.to_string(),
                        m.recall.to_string(),
                        m.revenue.to_string(),
                        String::new(),
                    ])?;
                }
            }
            Err(e) => out.write_record([
                c.label.clone(),
                c.inspection_rate.to_string(),
                c.seed.to_string(),
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ])?,
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Embedding rows with an `illicit` / `licit` / `unlabeled` tag.
pub fn labeled_embeddings(model: &TrainedModel, g: &TransactionGraph, d: &Dataset, records: &[usize]) -> Result<Vec<(Vec<f64>, &'static str)>> {
    let embs = model.embeddings(g, d, records)?;
    Ok(records
        .iter()
        .zip(embs)
        .map(|(&i, e)| {
            let tag = if !d.is_labeled(i) {
                "unlabeled"
            } else if d.record(i).illicit == Some(true) {
                "illicit"
            } else {
                "licit"
            };
            (e, tag)
        })
        .collect())
}
