//! Downstream probe harness: feature pooling (history-only vs
//! history-plus-future), a one-hidden-layer MLP probe, AUROC/AUPRC, and
//! clustered bootstrap confidence intervals.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::ParadigmName;
use crate::encoder::{encode_window, EncoderConfig};
use crate::numerics::checkpoint::sha256_hex;
use crate::numerics::optim::{AdamHyper, OptimState};
use crate::numerics::params::{seeded_rng, xavier_uniform, ParamStore};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::predictor::{rollout_from_embeddings, ActionSource, PredictorConfig};
use crate::synthworld::StayWindow;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVariant {
    HistOnly,
    HistPlusFuture,
}

impl ProbeVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeVariant::HistOnly => "hist_only",
            ProbeVariant::HistPlusFuture => "hist_plus_future",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFeatures {
    pub variant: ProbeVariant,
    pub features: Vec<f32>,
    pub stay_id: u64,
    pub start_hour: usize,
    pub context: usize,
    pub rollout_horizon: usize,
}

/// Pool one window into probe features. History features are the
/// valid-hour means of the context's state and action embeddings plus the
/// demographics embedding (3*d_z); the future variant appends the mean of
/// the predictor's autoregressive rollout over the remaining trajectory
/// (4*d_z total).
pub fn pool_features(
    encoder: &ParamStore<f32>,
    predictor: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    pred_cfg: &PredictorConfig,
    window: &StayWindow,
    context: usize,
    variant: ProbeVariant,
    actions: ActionSource,
) -> Result<ProbeFeatures> {
    let t = window.t();
    if t < context {
        return Err(Error::InvalidArgument(format!(
            "window length {t} shorter than probe context {context}"
        )));
    }
    let emb = encode_window(encoder, window, enc_cfg)?;
    let d = enc_cfg.d_z;

    let mean_rows = |m: &Tensor<f32>, rows: &[usize]| -> Vec<f32> {
        let mut out = vec![0.0f32; d];
        for &r in rows {
            for (j, &v) in m.row(r).iter().enumerate() {
                out[j] += v;
            }
        }
        for v in out.iter_mut() {
            *v /= rows.len() as f32;
        }
        out
    };
    let mut ctx_rows: Vec<usize> = (0..context).filter(|&r| emb.valid[r]).collect();
    if ctx_rows.is_empty() {
        ctx_rows = (0..context).collect();
    }
    let mut features = mean_rows(&emb.z, &ctx_rows);
    features.extend(mean_rows(&emb.u, &ctx_rows));
    features.extend(emb.z_d.row(0));

    let mut horizon = 0usize;
    if variant == ProbeVariant::HistPlusFuture {
        horizon = t - context;
        if horizon == 0 {
            return Err(Error::InsufficientInput(format!(
                "window length {t} leaves no rollout horizon past context {context}"
            )));
        }
        let trace = rollout_from_embeddings(predictor, &emb, pred_cfg, context, horizon, actions)?;
        let rows: Vec<usize> = (0..horizon).collect();
        features.extend(mean_rows(&trace.predicted, &rows));
    }
    Ok(ProbeFeatures {
        variant,
        features,
        stay_id: window.stay_id,
        start_hour: window.start_hour,
        context,
        rollout_horizon: horizon,
    })
}

// ---------------------------------------------------------------------------
// Probe model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: u64,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            steps: 500,
            lr: 1e-3,
        }
    }
}

impl ProbeConfig {
    /// Hash covering architecture, step budget, learning rate, and the seed
    /// derivation label; identical across paradigms by construction and
    /// asserted by the suite.
    pub fn config_hash(&self, seed_label: &str) -> String {
        let text = format!(
            "hidden={};steps={};lr={};seed_label={}",
            self.hidden, self.steps, self.lr, seed_label
        );
        sha256_hex(text.as_bytes())
    }
}

fn feature_matrix(features: &[ProbeFeatures]) -> Tensor<f32> {
    let n = features.len();
    let f = features[0].features.len();
    let mut m = Tensor::zeros(n, f);
    for (i, row) in features.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&row.features);
    }
    m
}

/// Train the shallow MLP probe (one ReLU hidden layer, sigmoid output,
/// binary cross-entropy) with full-batch AdamW.
pub fn train_probe(
    features: &Tensor<f32>,
    labels: &[bool],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ParamStore<f32>> {
    if labels.len() != features.rows() {
        return Err(Error::InvalidArgument("probe label count mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::InvalidArgument(
            "probe training labels contain a single class".into(),
        ));
    }
    let f = features.cols();
    let mut rng = seeded_rng(seed, &["probe", "init"]);
    let mut params = ParamStore::new();
    params.insert("w1", xavier_uniform(cfg.hidden, f, &mut rng))?;
    params.insert("b1", Tensor::zeros(1, cfg.hidden))?;
    params.insert("w2", xavier_uniform(1, cfg.hidden, &mut rng))?;
    params.insert("b2", Tensor::zeros(1, 1))?;
    let mut opt = OptimState::new(&params, AdamHyper::default());
    let label_tensor = Rc::new(Tensor::from_vec(
        labels.len(),
        1,
        labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
    ));
    for _ in 0..cfg.steps {
        let mut tape: Tape<f32> = Tape::new();
        let vars = params.register(&mut tape, true);
        let x = tape.constant(features.clone());
        let h = tape.matmul(x, false, vars["w1"], true);
        let h = tape.add_row_broadcast(h, vars["b1"]);
        let h = tape.relu(h);
        let logits = tape.matmul(h, false, vars["w2"], true);
        let logits = tape.add_row_broadcast(logits, vars["b2"]);
        let loss = tape.bce_with_logits(logits, Rc::clone(&label_tensor));
        let grads = tape.backward(loss)?;
        let g = params.extract_grads(&grads, &vars);
        opt.step(&mut params, &g, cfg.lr)?;
    }
    Ok(params)
}

/// Probe scores (sigmoid probabilities) for a feature matrix.
pub fn probe_scores(params: &ParamStore<f32>, features: &Tensor<f32>) -> Result<Vec<f64>> {
    let mut tape: Tape<f32> = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(features.clone());
    let h = tape.matmul(x, false, vars["w1"], true);
    let h = tape.add_row_broadcast(h, vars["b1"]);
    let h = tape.relu(h);
    let logits = tape.matmul(h, false, vars["w2"], true);
    let logits = tape.add_row_broadcast(logits, vars["b2"]);
    let probs = tape.sigmoid(logits);
    Ok(tape.value(probs).data().iter().map(|&v| v as f64).collect())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// AUROC via the rank formulation with midrank tie handling.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument("auroc: shape mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc requires both classes present".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        for k in i..j {
            if labels[idx[k]] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// AUPRC as the interpolation-free sum over recall increments of precision
/// at each descending-score threshold group.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument("auprc: shape mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::UndefinedMetric(
            "auprc requires both classes present".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for k in i..j {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Percentile bootstrap CI with resampling clustered by `cluster_ids`:
/// whole clusters are drawn with replacement, the metric recomputed per
/// resample, and degenerate (single-class) resamples skipped with a count.
pub fn bootstrap_ci<F>(
    metric: F,
    scores: &[f64],
    labels: &[bool],
    cluster_ids: &[u64],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64, usize)>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    if scores.len() != labels.len() || scores.len() != cluster_ids.len() {
        return Err(Error::InvalidArgument("bootstrap_ci: shape mismatch".into()));
    }
    let mut clusters: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cluster_ids.iter().enumerate() {
        clusters.entry(c).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap_ci needs at least 2 clusters".into(),
        ));
    }
    let keys: Vec<u64> = clusters.keys().copied().collect();
    let mut rng = seeded_rng(seed, &["bootstrap"]);
    let mut stats = Vec::with_capacity(n_boot);
    let mut skipped = 0usize;
    for _ in 0..n_boot {
        let mut s = Vec::with_capacity(scores.len());
        let mut l = Vec::with_capacity(labels.len());
        for _ in 0..keys.len() {
            let k = keys[rng.gen_range(0..keys.len())];
            for &i in &clusters[&k] {
                s.push(scores[i]);
                l.push(labels[i]);
            }
        }
        match metric(&s, &l) {
            Ok(v) => stats.push(v),
            Err(_) => skipped += 1,
        }
    }
    if stats.is_empty() {
        return Err(Error::UndefinedCi(
            "every bootstrap resample was degenerate".into(),
        ));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let alpha = (1.0 - level) / 2.0;
    let lo = crate::diagnostics::quantile_sorted(&stats, alpha);
    let hi = crate::diagnostics::quantile_sorted(&stats, 1.0 - alpha);
    Ok((lo, hi, skipped))
}

// ---------------------------------------------------------------------------
// Probe suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc: f64,
    pub auprc_ci: (f64, f64),
    pub n_test: usize,
    pub prevalence: f64,
    pub skipped_resamples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeCell {
    pub paradigm: ParadigmName,
    pub task: String,
    pub variant: ProbeVariant,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cells: Vec<ProbeCell>,
    /// AUROC(hist_plus_future) - AUROC(hist_only) per (paradigm, task).
    pub lifts: Vec<(ParadigmName, String, f64)>,
    pub probe_config_hash: String,
    pub n_boot: usize,
    pub context: usize,
}

impl ProbeReport {
    pub fn cell(&self, p: ParadigmName, task: &str, v: ProbeVariant) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.paradigm == p && c.task == task && c.variant == v)
    }
}

pub struct ProbeSuiteInputs<'a> {
    pub models: &'a BTreeMap<ParadigmName, (ParamStore<f32>, ParamStore<f32>)>,
    pub train_windows: &'a [StayWindow],
    pub test_windows: &'a [StayWindow],
    pub tasks: &'a [String],
    pub enc_cfg: &'a EncoderConfig,
    pub pred_cfg: &'a PredictorConfig,
    pub probe_cfg: &'a ProbeConfig,
    pub context: usize,
    pub n_boot: usize,
    pub actions: ActionSource,
    pub seed: u64,
}

/// For each (paradigm, task, variant): pool features, train the probe on
/// the train split, evaluate on the test split with clustered bootstrap
/// CIs, and emit the paired hist-only / hist-plus-future lift. Metric
/// errors are recorded per cell without aborting the table.
pub fn probe_suite(inputs: &ProbeSuiteInputs) -> Result<ProbeReport> {
    let seed_label = "probe-task-variant";
    let hash = inputs.probe_cfg.config_hash(seed_label);
    let mut cells = Vec::new();
    let mut lifts = Vec::new();

    for (&paradigm, (encoder, predictor)) in inputs.models {
        for variant in [ProbeVariant::HistOnly, ProbeVariant::HistPlusFuture] {
            let pool = |windows: &[StayWindow]| -> Result<(Tensor<f32>, Vec<u64>)> {
                let feats: Result<Vec<ProbeFeatures>> = windows
                    .par_iter()
                    .map(|w| {
                        pool_features(
                            encoder,
                            predictor,
                            inputs.enc_cfg,
                            inputs.pred_cfg,
                            w,
                            inputs.context,
                            variant,
                            inputs.actions,
                        )
                    })
                    .collect();
                let feats = feats?;
                let clusters = feats.iter().map(|f| f.stay_id).collect();
                Ok((feature_matrix(&feats), clusters))
            };
            let pooled = pool(inputs.train_windows).and_then(|train| {
                pool(inputs.test_windows).map(|test| (train, test))
            });
            let ((x_train, _), (x_test, test_clusters)) = match pooled {
                Ok(v) => v,
                Err(e) => {
                    for task in inputs.tasks {
                        cells.push(ProbeCell {
                            paradigm,
                            task: task.clone(),
                            variant,
                            metrics: None,
                            error: Some(e.to_string()),
                        });
                    }
                    continue;
                }
            };

            for task in inputs.tasks {
                let outcome = (|| -> Result<CellMetrics> {
                    let y_train: Result<Vec<bool>> = inputs
                        .train_windows
                        .iter()
                        .map(|w| w.label(task))
                        .collect();
                    let y_train = y_train?;
                    let y_test: Result<Vec<bool>> =
                        inputs.test_windows.iter().map(|w| w.label(task)).collect();
                    let y_test = y_test?;
                    // identical probe seed schedule across paradigms
                    let probe_seed = crate::numerics::derive_seed(
                        inputs.seed,
                        &[seed_label, task, variant.as_str()],
                    );
                    let probe = train_probe(&x_train, &y_train, inputs.probe_cfg, probe_seed)?;
                    let scores = probe_scores(&probe, &x_test)?;
                    let a = auroc(&scores, &y_test)?;
                    let (alo, ahi, skipped_a) = bootstrap_ci(
                        auroc,
                        &scores,
                        &y_test,
                        &test_clusters,
                        inputs.n_boot,
                        0.95,
                        crate::numerics::derive_seed(inputs.seed, &["ci", task, variant.as_str()]),
                    )?;
                    let p = auprc(&scores, &y_test)?;
                    let (plo, phi, skipped_p) = bootstrap_ci(
                        auprc,
                        &scores,
                        &y_test,
                        &test_clusters,
                        inputs.n_boot,
                        0.95,
                        crate::numerics::derive_seed(inputs.seed, &["ci2", task, variant.as_str()]),
                    )?;
                    let n_pos = y_test.iter().filter(|&&l| l).count();
                    Ok(CellMetrics {
                        auroc: a,
                        auroc_ci: (alo, ahi),
                        auprc: p,
                        auprc_ci: (plo, phi),
                        n_test: y_test.len(),
                        prevalence: n_pos as f64 / y_test.len() as f64,
                        skipped_resamples: skipped_a + skipped_p,
                    })
                })();
                match outcome {
                    Ok(m) => cells.push(ProbeCell {
                        paradigm,
                        task: task.clone(),
                        variant,
                        metrics: Some(m),
                        error: None,
                    }),
                    Err(e) => cells.push(ProbeCell {
                        paradigm,
                        task: task.clone(),
                        variant,
                        metrics: None,
                        error: Some(e.to_string()),
                    }),
                }
            }
        }
        for task in inputs.tasks {
            let hist = cells
                .iter()
                .find(|c| {
                    c.paradigm == paradigm && &c.task == task && c.variant == ProbeVariant::HistOnly
                })
                .and_then(|c| c.metrics.as_ref());
            let full = cells
                .iter()
                .find(|c| {
                    c.paradigm == paradigm
                        && &c.task == task
                        && c.variant == ProbeVariant::HistPlusFuture
                })
                .and_then(|c| c.metrics.as_ref());
            if let (Some(h), Some(f)) = (hist, full) {
                lifts.push((paradigm, task.clone(), f.auroc - h.auroc));
            }
        }
    }
    Ok(ProbeReport {
        cells,
        lifts,
        probe_config_hash: hash,
        n_boot: inputs.n_boot,
        context: inputs.context,
    })
}
