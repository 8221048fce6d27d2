//! The online/target record-encoder pair.
//!
//! One shared residual-MLP body maps an hourly record — masked values, the
//! observation mask, a modality tag, and a sinusoidal hour index — to a
//! d_z-dimensional embedding. State, action, and demographics records all
//! pass through the same body with different modality tags. The target
//! encoder is an EMA shadow of the online encoder and never receives
//! gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::optim::{lr_at, AdamHyper, OptimState, ScheduleConfig};
use crate::numerics::params::{ema_update_store, seeded_rng, small_uniform, xavier_uniform, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Real, Tensor};
use crate::synthworld::{HourRecord, StayWindow, F_A, F_D, F_S};
use crate::{Error, Result};

pub const STORE_ONLINE: &str = "encoder.online";
pub const STORE_TARGET: &str = "encoder.target";

/// Padded per-modality value width.
pub const PAD_WIDTH: usize = F_S;
const N_MODALITIES: usize = 3;
const HOUR_FEATURES: usize = 8;
/// Body input layout: [values | mask | modality one-hot | hour features].
pub const INPUT_DIM: usize = 2 * PAD_WIDTH + N_MODALITIES + HOUR_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    State,
    Action,
    Demographics,
}

impl Modality {
    fn index(&self) -> usize {
        match self {
            Modality::State => 0,
            Modality::Action => 1,
            Modality::Demographics => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_z: 64,
            hidden: 64,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z < 2 {
            return Err(Error::Config(format!("encoder.d_z must be >= 2, got {}", self.d_z)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("encoder.hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// (name, rows, cols) for every body parameter.
    pub fn param_specs(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden;
        vec![
            ("body.w_in".into(), h, INPUT_DIM),
            ("body.b_in".into(), 1, h),
            ("body.w1".into(), h, h),
            ("body.b1".into(), 1, h),
            ("body.w2".into(), h, h),
            ("body.b2".into(), 1, h),
            ("body.w_out".into(), self.d_z, h),
            ("body.b_out".into(), 1, self.d_z),
            ("body.ln_gamma".into(), 1, self.d_z),
            ("body.ln_beta".into(), 1, self.d_z),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|(_, r, c)| r * c).sum()
    }
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed, &["encoder", "init"]);
    let mut store = ParamStore::new();
    for (name, rows, cols) in cfg.param_specs() {
        let t = if name == "body.ln_gamma" {
            Tensor::full(rows, cols, 1.0)
        } else if name == "body.ln_beta" {
            Tensor::zeros(rows, cols)
        } else if name.starts_with("body.b") {
            small_uniform(rows, cols, 0.01, &mut rng)
        } else {
            xavier_uniform(rows, cols, &mut rng)
        };
        store.insert(&name, t)?;
    }
    Ok(store)
}

/// Latent triple streams for one window: demographics embedding, per-hour
/// state embeddings, per-hour action embeddings, and per-hour validity.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence<S> {
    pub z_d: Tensor<S>,
    pub z: Tensor<S>,
    pub u: Tensor<S>,
    pub valid: Vec<bool>,
}

/// Tape-resident embedding sequence used while a loss is being built.
#[derive(Debug, Clone)]
pub struct EmbeddingVars {
    pub z_d: Var,
    pub z: Var,
    pub u: Var,
    pub valid: Vec<bool>,
}

fn hour_features<S: Real>(t: usize) -> [S; HOUR_FEATURES] {
    let tf = t as f64;
    let two_pi = std::f64::consts::TAU;
    [
        S::from_f64((two_pi * tf / 12.0).sin()),
        S::from_f64((two_pi * tf / 12.0).cos()),
        S::from_f64((two_pi * tf / 24.0).sin()),
        S::from_f64((two_pi * tf / 24.0).cos()),
        S::from_f64((two_pi * tf / 72.0).sin()),
        S::from_f64((two_pi * tf / 72.0).cos()),
        S::from_f64(tf / 72.0),
        S::one(),
    ]
}

/// Build the body input row for one record. Masked-out value slots are
/// zeroed regardless of their stored contents, so downstream embeddings
/// cannot depend on them.
fn input_row<S: Real>(rec: &HourRecord, modality: Modality, hour: Option<usize>, out: &mut [S]) {
    debug_assert_eq!(out.len(), INPUT_DIM);
    for v in out.iter_mut() {
        *v = S::zero();
    }
    for (f, (&v, &m)) in rec.values.iter().zip(&rec.mask).enumerate() {
        if m {
            out[f] = S::from_f64(v as f64);
            out[PAD_WIDTH + f] = S::one();
        }
    }
    out[2 * PAD_WIDTH + modality.index()] = S::one();
    if let Some(t) = hour {
        let hf = hour_features::<S>(t);
        out[2 * PAD_WIDTH + N_MODALITIES..].copy_from_slice(&hf);
    }
}

fn record_matrix<S: Real>(records: &[HourRecord], modality: Modality, with_hours: bool) -> Tensor<S> {
    let mut m = Tensor::zeros(records.len(), INPUT_DIM);
    for (i, rec) in records.iter().enumerate() {
        let hour = if with_hours { Some(i) } else { None };
        input_row(rec, modality, hour, m.row_mut(i));
    }
    m
}

/// Shared encoder body applied to a batch of input rows already on the tape.
pub fn body_forward<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    input: Var,
    cfg: &EncoderConfig,
) -> Var {
    let h0 = tape.matmul(input, false, vars["body.w_in"], true);
    let h0 = tape.add_row_broadcast(h0, vars["body.b_in"]);
    let mut h = tape.gelu(h0);
    h = tape.dropout(h, cfg.dropout);
    for layer in ["1", "2"] {
        let w = vars[&format!("body.w{layer}")];
        let b = vars[&format!("body.b{layer}")];
        let pre = tape.matmul(h, false, w, true);
        let pre = tape.add_row_broadcast(pre, b);
        let a = tape.gelu(pre);
        let a = tape.dropout(a, cfg.dropout);
        h = tape.add(h, a);
    }
    let out = tape.matmul(h, false, vars["body.w_out"], true);
    let out = tape.add_row_broadcast(out, vars["body.b_out"]);
    // Final norm: the embedding is the stand-in for a post-norm last-token
    // hidden state, and it keeps the collapse indicator scale-stable.
    tape.layer_norm(out, vars["body.ln_gamma"], vars["body.ln_beta"], S::from_f64(1e-5))
}

fn check_widths(window: &StayWindow) -> Result<()> {
    let ok = window.demographics.len() == F_D
        && window.states.iter().all(|r| r.values.len() == F_S && r.mask.len() == F_S)
        && window.actions.iter().all(|r| r.values.len() == F_A && r.mask.len() == F_A);
    if !ok {
        return Err(Error::InvalidArgument(
            "window feature widths do not match the generator layout".into(),
        ));
    }
    Ok(())
}

/// Hour validity: an hour enters losses only when it and the next hour both
/// have at least one observed state feature.
pub fn hour_observed(window: &StayWindow, t: usize) -> bool {
    window.states[t].mask.iter().any(|&m| m)
}

/// Encode one window on an existing tape. `vars` must contain the body
/// parameters (leaves for a trainable encoder, constants otherwise).
pub fn encode_window_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    window: &StayWindow,
    cfg: &EncoderConfig,
) -> Result<EmbeddingVars> {
    check_widths(window)?;
    if window.t() == 0 {
        return Err(Error::InvalidArgument("empty window".into()));
    }
    let state_in = tape.constant(record_matrix::<S>(&window.states, Modality::State, true));
    let action_in = tape.constant(record_matrix::<S>(&window.actions, Modality::Action, true));
    let demo_rec = HourRecord {
        values: window.demographics.clone(),
        mask: vec![true; window.demographics.len()],
    };
    let demo_in = tape.constant(record_matrix::<S>(
        std::slice::from_ref(&demo_rec),
        Modality::Demographics,
        false,
    ));
    let z = body_forward(tape, vars, state_in, cfg);
    let u = body_forward(tape, vars, action_in, cfg);
    let z_d = body_forward(tape, vars, demo_in, cfg);
    let valid = (0..window.t()).map(|t| hour_observed(window, t)).collect();
    Ok(EmbeddingVars { z_d, z, u, valid })
}

/// Evaluation-mode encoding: deterministic, dropout disabled.
pub fn encode_window<S: Real>(
    params: &ParamStore<S>,
    window: &StayWindow,
    cfg: &EncoderConfig,
) -> Result<EmbeddingSequence<S>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let emb = encode_window_on_tape(&mut tape, &vars, window, cfg)?;
    Ok(EmbeddingSequence {
        z_d: tape.value(emb.z_d).clone(),
        z: tape.value(emb.z).clone(),
        u: tape.value(emb.u).clone(),
        valid: emb.valid,
    })
}

/// Batch collapse indicator: per-dimension sample standard deviation across
/// the batch (n-1 denominator), averaged over dimensions.
pub fn z_std<S: Real>(embeddings: &Tensor<S>) -> Result<f64> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "z_std needs a batch of >= 2 embeddings, got {n}"
        )));
    }
    let d = embeddings.cols();
    let mut acc = 0.0f64;
    for j in 0..d {
        let mut mean = 0.0f64;
        for i in 0..n {
            mean += embeddings.get(i, j).as_f64();
        }
        mean /= n as f64;
        let mut var = 0.0f64;
        for i in 0..n {
            let dv = embeddings.get(i, j).as_f64() - mean;
            var += dv * dv;
        }
        var /= (n - 1) as f64;
        acc += var.sqrt();
    }
    Ok(acc / d as f64)
}

/// Online/target encoder pair. When the two are bit-equal by construction
/// (warmup/finalize phases, or right after a hard sync) the target store is
/// elided and reads alias the online store, which makes the equality
/// structural rather than maintained.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub online: ParamStore<f32>,
    target: Option<ParamStore<f32>>,
    pub tau: f64,
}

impl EncoderPair {
    pub fn new_shared(online: ParamStore<f32>, tau: f64) -> Self {
        EncoderPair {
            online,
            target: None,
            tau,
        }
    }

    pub fn with_target(online: ParamStore<f32>, target: ParamStore<f32>, tau: f64) -> Result<Self> {
        if !online.shapes_match(&target) {
            return Err(Error::Internal(
                "encoder pair: online/target shapes differ".into(),
            ));
        }
        Ok(EncoderPair {
            online,
            target: Some(target),
            tau,
        })
    }

    pub fn is_shared(&self) -> bool {
        self.target.is_none()
    }

    pub fn target(&self) -> &ParamStore<f32> {
        self.target.as_ref().unwrap_or(&self.online)
    }

    /// Materialize a separate target store (no-op if already separate).
    pub fn split_target(&mut self) {
        if self.target.is_none() {
            self.target = Some(self.online.clone());
        }
    }

    /// target <- tau*target + (1-tau)*online. A shared pair stays shared:
    /// the combination of equal stores is the identity.
    pub fn ema_update(&mut self) -> Result<()> {
        match &mut self.target {
            Some(t) => ema_update_store(t, &self.online, self.tau),
            None => Ok(()),
        }
    }

    /// Bit-exact copy online -> target, represented structurally.
    pub fn hard_sync(&mut self) {
        self.target = None;
    }
}

// ---------------------------------------------------------------------------
// Initialization pretraining: masked-feature reconstruction over per-hour
// state and action records.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SftInitConfig {
    pub steps: u64,
    pub batch_records: usize,
    pub lr: f64,
    pub mask_fraction: f64,
    pub weight_decay: f64,
}

impl Default for SftInitConfig {
    fn default() -> Self {
        SftInitConfig {
            steps: 400,
            batch_records: 256,
            lr: 1e-3,
            mask_fraction: 0.25,
            weight_decay: 0.0,
        }
    }
}

struct ReconBatch<S> {
    inputs: Tensor<S>,
    targets: Tensor<S>,
    loss_weights: Tensor<S>,
    n_hidden: usize,
}

fn sample_recon_batch<S: Real>(
    windows: &[StayWindow],
    n: usize,
    mask_fraction: f64,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> ReconBatch<S> {
    use rand::Rng;
    let mut inputs = Tensor::zeros(n, INPUT_DIM);
    let mut targets = Tensor::zeros(n, PAD_WIDTH);
    let mut weights = Tensor::zeros(n, PAD_WIDTH);
    let mut n_hidden = 0usize;
    for i in 0..n {
        let w = &windows[rng.gen_range(0..windows.len())];
        let hour = rng.gen_range(0..w.t());
        let (rec, modality) = if rng.gen::<bool>() {
            (&w.states[hour], Modality::State)
        } else {
            (&w.actions[hour], Modality::Action)
        };
        let mut masked = rec.clone();
        let observed: Vec<usize> = rec
            .mask
            .iter()
            .enumerate()
            .filter_map(|(f, &m)| m.then_some(f))
            .collect();
        let mut hidden: Vec<usize> = observed
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() < mask_fraction)
            .collect();
        if hidden.is_empty() && !observed.is_empty() {
            hidden.push(observed[rng.gen_range(0..observed.len())]);
        }
        for &f in &hidden {
            masked.mask[f] = false;
            masked.values[f] = 0.0;
            targets.set(i, f, S::from_f64(rec.values[f] as f64));
            weights.set(i, f, S::one());
            n_hidden += 1;
        }
        input_row(&masked, modality, Some(hour), inputs.row_mut(i));
    }
    ReconBatch {
        inputs,
        targets,
        loss_weights: weights,
        n_hidden,
    }
}

fn recon_loss_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    batch: &ReconBatch<S>,
    cfg: &EncoderConfig,
) -> Var {
    let x = tape.constant(batch.inputs.clone());
    let emb = body_forward(tape, vars, x, cfg);
    let pred = tape.matmul(emb, false, vars["recon.w"], true);
    let pred = tape.add_row_broadcast(pred, vars["recon.b"]);
    let tgt = tape.constant(batch.targets.clone());
    let diff = tape.sub(pred, tgt);
    let sq = tape.hadamard(diff, diff);
    let weighted = tape.mul_const(sq, std::rc::Rc::new(batch.loss_weights.clone()));
    let s = tape.sum(weighted);
    tape.scale(s, S::from_f64(1.0 / batch.n_hidden.max(1) as f64))
}

/// Build the masked-feature-reconstruction loss on an existing tape, with a
/// deterministically sampled record batch. `vars` must contain both the
/// body and reconstruction-head parameters. Used by gradient verification.
pub fn masked_recon_loss_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    windows: &[StayWindow],
    enc_cfg: &EncoderConfig,
    n_records: usize,
    mask_fraction: f64,
    seed: u64,
) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows for the recon loss".into()));
    }
    let mut rng = seeded_rng(seed, &["encoder", "recon-check"]);
    let batch = sample_recon_batch::<S>(windows, n_records, mask_fraction, &mut rng);
    Ok(recon_loss_on_tape(tape, vars, &batch, enc_cfg))
}

/// Mean reconstruction MSE of hidden features over a deterministic sample of
/// records; the before/after comparison for initialization quality.
pub fn reconstruction_mse(
    params: &ParamStore<f32>,
    recon_head: &ParamStore<f32>,
    windows: &[StayWindow],
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed, &["encoder", "recon-eval"]);
    let batch = sample_recon_batch::<f32>(windows, 512, 0.25, &mut rng);
    let mut tape = Tape::new();
    let mut vars = params.register(&mut tape, false);
    vars.extend(recon_head.register(&mut tape, false));
    let loss = recon_loss_on_tape(&mut tape, &vars, &batch, cfg);
    Ok(tape.value(loss).item().as_f64())
}

pub fn init_recon_head(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = seeded_rng(seed, &["encoder", "recon-head"]);
    let mut head = ParamStore::new();
    head.insert("recon.w", xavier_uniform(PAD_WIDTH, cfg.d_z, &mut rng))?;
    head.insert("recon.b", Tensor::zeros(1, PAD_WIDTH))?;
    Ok(head)
}

/// Masked-feature-reconstruction pretraining of the encoder body; returns
/// the trained body, which all training paradigms share as their starting
/// point. `steps == 0` returns the input parameters unchanged.
pub fn sft_init(
    encoder: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    train_windows: &[StayWindow],
    cfg: &SftInitConfig,
    seed: u64,
) -> Result<ParamStore<f32>> {
    sft_init_with_head(encoder, enc_cfg, train_windows, cfg, seed).map(|(body, _)| body)
}

/// As `sft_init`, but also returns the trained reconstruction head so the
/// initialization quality can be evaluated.
pub fn sft_init_with_head(
    encoder: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    train_windows: &[StayWindow],
    cfg: &SftInitConfig,
    seed: u64,
) -> Result<(ParamStore<f32>, ParamStore<f32>)> {
    let head = init_recon_head(enc_cfg, seed)?;
    if cfg.steps == 0 {
        return Ok((encoder.clone(), head));
    }
    if train_windows.is_empty() {
        return Err(Error::InsufficientData("sft_init: no training windows".into()));
    }
    let mut body = encoder.clone();
    // Body and head step together as one parameter group.
    let mut joint = ParamStore::new();
    for (name, t) in body.iter().chain(head.iter()) {
        joint.insert(name, t.clone())?;
    }
    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt = OptimState::new(&joint, hyper);
    let sched = ScheduleConfig {
        total_steps: cfg.steps,
        warmup_fraction: 0.0,
        peak_lr: cfg.lr,
    };
    let mut rng = seeded_rng(seed, &["encoder", "sft-batches"]);
    for step in 0..cfg.steps {
        let batch = sample_recon_batch::<f32>(train_windows, cfg.batch_records, cfg.mask_fraction, &mut rng);
        let mut tape = Tape::train(crate::numerics::derive_seed(seed, &["sft", &step.to_string()]));
        let vars = joint.register(&mut tape, true);
        let loss = recon_loss_on_tape(&mut tape, &vars, &batch, enc_cfg);
        let grads_tape = tape.backward(loss)?;
        let grads = joint.extract_grads(&grads_tape, &vars);
        let lr = lr_at(step, &sched)?;
        opt.step(&mut joint, &grads, lr)?;
    }
    for (name, t) in body.iter_mut() {
        *t = joint.get(name)?.clone();
    }
    let mut trained_head = head;
    for (name, t) in trained_head.iter_mut() {
        *t = joint.get(name)?.clone();
    }
    Ok((body, trained_head))
}
