//! Training engine: the L1 teacher-forcing loss with valid-set masking, the
//! 2-step rollout loss in native and teacher-forced regimes, the five-phase
//! co-training schedule, and the named training paradigms.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_window, encode_window_on_tape, z_std, EmbeddingSequence, EmbeddingVars, EncoderConfig,
    EncoderPair,
};
use crate::numerics::optim::{lr_at, post_clip_norm, AdamHyper, OptimState, ScheduleConfig};
use crate::numerics::params::{derive_seed, seeded_rng, xavier_uniform, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Real, Tensor};
use crate::predictor::{
    forward_on_tape, init_predictor, rollout_from_embeddings, ActionSource, PredictorConfig,
};
use crate::synthworld::StayWindow;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Phase and paradigm descriptions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    IdenticalToOnline,
    EmaSlow,
    EmaChase,
    HardSyncEvent,
    IdenticalPostSync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutRegime {
    Native,
    TeacherForced,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub name: String,
    pub encoder_trainable: bool,
    pub target_mode: TargetMode,
    pub rollout_regime: RolloutRegime,
    pub steps: u64,
    /// Random-mask latent-prediction phase (bidirectional attention over
    /// masked state tokens) instead of the trajectory objective.
    #[serde(default)]
    pub masked_latent: bool,
}

impl PhaseConfig {
    pub fn warmup(steps: u64) -> Self {
        PhaseConfig {
            name: "warmup".into(),
            encoder_trainable: false,
            target_mode: TargetMode::IdenticalToOnline,
            rollout_regime: RolloutRegime::Native,
            steps,
            masked_latent: false,
        }
    }

    pub fn cotrain(steps: u64) -> Self {
        PhaseConfig {
            name: "cotrain".into(),
            encoder_trainable: true,
            target_mode: TargetMode::EmaSlow,
            rollout_regime: RolloutRegime::TeacherForced,
            steps,
            masked_latent: false,
        }
    }

    pub fn align(steps: u64) -> Self {
        PhaseConfig {
            name: "align".into(),
            encoder_trainable: false,
            target_mode: TargetMode::EmaChase,
            rollout_regime: RolloutRegime::TeacherForced,
            steps,
            masked_latent: false,
        }
    }

    pub fn hard_sync() -> Self {
        PhaseConfig {
            name: "hard_sync".into(),
            encoder_trainable: false,
            target_mode: TargetMode::HardSyncEvent,
            rollout_regime: RolloutRegime::None,
            steps: 0,
            masked_latent: false,
        }
    }

    pub fn finalize(steps: u64) -> Self {
        PhaseConfig {
            name: "finalize".into(),
            encoder_trainable: false,
            target_mode: TargetMode::IdenticalPostSync,
            rollout_regime: RolloutRegime::Native,
            steps,
            masked_latent: false,
        }
    }

    pub fn masked_latent_stage(steps: u64) -> Self {
        PhaseConfig {
            name: "masked_latent".into(),
            encoder_trainable: true,
            target_mode: TargetMode::EmaSlow,
            rollout_regime: RolloutRegime::None,
            steps,
            masked_latent: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_mode == TargetMode::HardSyncEvent && self.steps != 0 {
            return Err(Error::Config(format!(
                "phase {:?}: hard-sync events take zero steps",
                self.name
            )));
        }
        if self.target_mode == TargetMode::EmaChase && self.encoder_trainable {
            return Err(Error::Config(format!(
                "phase {:?}: the alignment phase trains only the predictor",
                self.name
            )));
        }
        if self.masked_latent && self.rollout_regime != RolloutRegime::None {
            return Err(Error::Config(format!(
                "phase {:?}: masked-latent phases have no rollout regime",
                self.name
            )));
        }
        if !self.masked_latent
            && self.target_mode != TargetMode::HardSyncEvent
            && self.rollout_regime == RolloutRegime::None
        {
            return Err(Error::Config(format!(
                "phase {:?}: a trajectory phase needs a rollout regime",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ParadigmName {
    ClinJepa,
    Vjepa2acStyle,
    SftOnly,
    NoWarmup,
    NoAlignment,
}

impl ParadigmName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParadigmName::ClinJepa => "clin_jepa",
            ParadigmName::Vjepa2acStyle => "vjepa2ac_style",
            ParadigmName::SftOnly => "sft_only",
            ParadigmName::NoWarmup => "no_warmup",
            ParadigmName::NoAlignment => "no_alignment",
        }
    }

    pub fn all() -> [ParadigmName; 5] {
        [
            ParadigmName::ClinJepa,
            ParadigmName::Vjepa2acStyle,
            ParadigmName::SftOnly,
            ParadigmName::NoWarmup,
            ParadigmName::NoAlignment,
        ]
    }
}

impl FromStr for ParadigmName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clin_jepa" => Ok(ParadigmName::ClinJepa),
            "vjepa2ac_style" => Ok(ParadigmName::Vjepa2acStyle),
            "sft_only" => Ok(ParadigmName::SftOnly),
            "no_warmup" => Ok(ParadigmName::NoWarmup),
            "no_alignment" => Ok(ParadigmName::NoAlignment),
            other => Err(Error::Config(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParadigmSpec {
    pub name: ParadigmName,
    pub phases: Vec<PhaseConfig>,
}

/// Largest-remainder split of a step budget across phase weights.
pub fn split_budget(total: u64, weights: &[u64]) -> Vec<u64> {
    let wsum: u64 = weights.iter().sum();
    if wsum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u64> = weights.iter().map(|w| total * w / wsum).collect();
    let assigned: u64 = out.iter().sum();
    let mut remainders: Vec<(usize, u64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, (total * w) % wsum))
        .collect();
    remainders.sort_by_key(|&(i, r)| (std::cmp::Reverse(r), i));
    for k in 0..(total - assigned) as usize {
        out[remainders[k].0] += 1;
    }
    out
}

/// Reference phase-weight ratios (warmup : cotrain : align : finalize).
pub const PHASE_WEIGHTS: [u64; 4] = [3072, 3072, 1024, 4608];

/// Build a paradigm's phase list over a total optimizer-step budget. Every
/// paradigm consumes the same total so comparisons are compute-matched;
/// ablations redistribute removed phases' budget proportionally.
pub fn paradigm_spec(name: ParadigmName, total_steps: u64) -> ParadigmSpec {
    let phases = match name {
        ParadigmName::ClinJepa => {
            let s = split_budget(total_steps, &PHASE_WEIGHTS);
            vec![
                PhaseConfig::warmup(s[0]),
                PhaseConfig::cotrain(s[1]),
                PhaseConfig::align(s[2]),
                PhaseConfig::hard_sync(),
                PhaseConfig::finalize(s[3]),
            ]
        }
        ParadigmName::NoWarmup => {
            let s = split_budget(
                total_steps,
                &[PHASE_WEIGHTS[1], PHASE_WEIGHTS[2], PHASE_WEIGHTS[3]],
            );
            vec![
                PhaseConfig::cotrain(s[0]),
                PhaseConfig::align(s[1]),
                PhaseConfig::hard_sync(),
                PhaseConfig::finalize(s[2]),
            ]
        }
        ParadigmName::NoAlignment => {
            let s = split_budget(
                total_steps,
                &[PHASE_WEIGHTS[0], PHASE_WEIGHTS[1], PHASE_WEIGHTS[3]],
            );
            vec![
                PhaseConfig::warmup(s[0]),
                PhaseConfig::cotrain(s[1]),
                PhaseConfig::finalize(s[2]),
            ]
        }
        ParadigmName::SftOnly => {
            let mut p = PhaseConfig::warmup(total_steps);
            p.name = "predictor_only".into();
            vec![p]
        }
        ParadigmName::Vjepa2acStyle => {
            let s = split_budget(total_steps, &[1, 1]);
            let mut stage_b = PhaseConfig::finalize(s[1]);
            stage_b.name = "ac_predictor".into();
            vec![
                PhaseConfig::masked_latent_stage(s[0]),
                PhaseConfig::hard_sync(),
                stage_b,
            ]
        }
    };
    ParadigmSpec { name, phases }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over valid rows of the L1 distance summed over embedding dims.
/// Row i compares predictions[i] to targets[i]; valid[i] gates the pair.
pub fn loss_tf<S: Real>(predictions: &Tensor<S>, targets: &Tensor<S>, valid: &[bool]) -> Result<f64> {
    if predictions.shape() != targets.shape() || valid.len() != predictions.rows() {
        return Err(Error::InvalidArgument(
            "loss_tf: prediction/target/valid shapes disagree".into(),
        ));
    }
    let mut n = 0usize;
    let mut acc = 0.0f64;
    for i in 0..predictions.rows() {
        if !valid[i] {
            continue;
        }
        n += 1;
        let mut row = 0.0f64;
        for (a, b) in predictions.row(i).iter().zip(targets.row(i)) {
            row += (a.as_f64() - b.as_f64()).abs();
        }
        acc += row;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("loss_tf: empty valid set".into()));
    }
    Ok(acc / n as f64)
}

/// Validity of the (t, t+1) hour pair for 1-based hour t: both hours carry
/// at least one observed state feature.
fn pair_valid(valid: &[bool], t: usize) -> bool {
    valid[t - 1] && valid[t]
}

/// Standalone rollout loss over a window batch at any horizon, in either
/// regime: anchored at every hour t with t+horizon <= T, each step's term
/// included when its target pair is valid, averaged over included terms.
/// This is the evaluation-path reference for the fused training
/// construction.
pub fn loss_rollout(
    predictor: &ParamStore<f32>,
    pair: &EncoderPair,
    enc_cfg: &EncoderConfig,
    pred_cfg: &PredictorConfig,
    windows: &[StayWindow],
    horizon: usize,
    regime: RolloutRegime,
) -> Result<f64> {
    if regime == RolloutRegime::None {
        return Err(Error::InvalidArgument(
            "loss_rollout called with regime 'none'".into(),
        ));
    }
    if horizon < 1 {
        return Err(Error::InvalidArgument("rollout horizon must be >= 1".into()));
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for w in windows {
        let online = encode_window(&pair.online, w, enc_cfg)?;
        let target = encode_window(pair.target(), w, enc_cfg)?;
        let t_len = online.z.rows();
        if t_len < horizon + 1 {
            continue;
        }
        let tf_preds = crate::predictor::forward_teacher_forced(predictor, &online, pred_cfg)?;
        for anchor in 1..=(t_len - horizon) {
            let native_trace = if regime == RolloutRegime::Native && horizon >= 2 {
                Some(rollout_from_embeddings(
                    predictor,
                    &online,
                    pred_cfg,
                    anchor,
                    horizon,
                    ActionSource::GroundTruth,
                )?)
            } else {
                None
            };
            for step in 1..=horizon {
                let pred_hour = anchor + step; // predicting z_{pred_hour}
                if !pair_valid(&online.valid, pred_hour - 1) {
                    continue;
                }
                let pred_row: Vec<f32> = match (&native_trace, regime) {
                    (_, RolloutRegime::TeacherForced) | (None, _) => {
                        tf_preds.row(pred_hour - 2).to_vec()
                    }
                    (Some(trace), _) => trace.predicted.row(step - 1).to_vec(),
                };
                let tgt = target.z.row(pred_hour - 1);
                let mut l1 = 0.0f64;
                for (a, b) in pred_row.iter().zip(tgt) {
                    l1 += (*a as f64 - *b as f64).abs();
                }
                acc += l1;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "loss_rollout: no valid anchor terms in the batch".into(),
        ));
    }
    Ok(acc / n as f64)
}

// ---------------------------------------------------------------------------
// Training state and logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub total_steps: u64,
    pub batch_windows: usize,
    pub encoder_lr: f64,
    pub predictor_lr: f64,
    pub weight_decay: f64,
    pub encoder_clip: f64,
    pub predictor_clip: f64,
    pub tau: f64,
    pub warmup_fraction: f64,
    /// Fraction of state positions hidden in masked-latent stages.
    pub mask_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            total_steps: 2000,
            batch_windows: 16,
            encoder_lr: 1e-3,
            predictor_lr: 1e-3,
            weight_decay: 0.04,
            encoder_clip: 0.5,
            predictor_clip: 1.0,
            tau: 0.996,
            warmup_fraction: 0.02,
            mask_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub phase: String,
    pub l_tf: f32,
    pub l_roll: f32,
    pub total: f32,
    pub lr_encoder: f64,
    pub lr_predictor: f64,
    pub z_std: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_predictor: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    /// (phase name, first global step of the phase)
    pub phase_boundaries: Vec<(String, u64)>,
}

impl TrainLog {
    pub fn final_z_std(&self) -> Option<f64> {
        self.entries.last().map(|e| e.z_std)
    }
}

pub struct TrainerState {
    pub pair: EncoderPair,
    pub predictor: ParamStore<f32>,
    pub enc_cfg: EncoderConfig,
    pub pred_cfg: PredictorConfig,
    pub hyper: TrainHyper,
    pub enc_opt: OptimState<f32>,
    pub pred_opt: OptimState<f32>,
    pub global_step: u64,
    pub seed: u64,
}

impl TrainerState {
    pub fn new(
        sft_encoder: ParamStore<f32>,
        predictor: ParamStore<f32>,
        enc_cfg: EncoderConfig,
        pred_cfg: PredictorConfig,
        hyper: TrainHyper,
        seed: u64,
    ) -> Self {
        let enc_opt = OptimState::new(
            &sft_encoder,
            AdamHyper {
                weight_decay: hyper.weight_decay,
                clip_norm: Some(hyper.encoder_clip),
                ..AdamHyper::default()
            },
        );
        let pred_opt = OptimState::new(
            &predictor,
            AdamHyper {
                weight_decay: hyper.weight_decay,
                clip_norm: Some(hyper.predictor_clip),
                ..AdamHyper::default()
            },
        );
        TrainerState {
            pair: EncoderPair::new_shared(sft_encoder, hyper.tau),
            predictor,
            enc_cfg,
            pred_cfg,
            hyper,
            enc_opt,
            pred_opt,
            global_step: 0,
            seed,
        }
    }

    fn enc_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: self.hyper.total_steps,
            warmup_fraction: self.hyper.warmup_fraction,
            peak_lr: self.hyper.encoder_lr,
        }
    }

    fn pred_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: self.hyper.total_steps,
            warmup_fraction: self.hyper.warmup_fraction,
            peak_lr: self.hyper.predictor_lr,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-step passes on the tape
// ---------------------------------------------------------------------------

struct WindowPass {
    grads_pred: ParamStore<f32>,
    grads_enc: Option<ParamStore<f32>>,
    tf_sum: f64,
    roll_sum: f64,
    z_rows: Tensor<f32>,
}

/// Row weights (broadcast over columns) selecting included loss rows.
fn row_weight_tensor(rows: usize, cols: usize, included: &[bool]) -> Rc<Tensor<f32>> {
    let mut w = Tensor::zeros(rows, cols);
    for (i, &inc) in included.iter().enumerate() {
        if inc {
            for v in w.row_mut(i) {
                *v = 1.0;
            }
        }
    }
    Rc::new(w)
}

#[allow(clippy::too_many_arguments)]
fn window_pass(
    window: &StayWindow,
    target_emb: &EmbeddingSequence<f32>,
    state: &TrainerState,
    phase: &PhaseConfig,
    online_emb_cache: Option<&EmbeddingSequence<f32>>,
    inv_tf_count: f64,
    inv_roll_count: f64,
    tape_seed: u64,
) -> Result<WindowPass> {
    let mut tape = Tape::train(tape_seed);
    let enc_vars = state
        .pair
        .online
        .register(&mut tape, phase.encoder_trainable);
    let pred_vars = state.predictor.register(&mut tape, true);

    let emb: EmbeddingVars = match (phase.encoder_trainable, online_emb_cache) {
        (false, Some(cached)) => crate::predictor::embed_consts(&mut tape, cached),
        _ => encode_window_on_tape(&mut tape, &enc_vars, window, &state.enc_cfg)?,
    };
    let t_len = window.t();
    if t_len < 2 {
        return Err(Error::InvalidArgument(
            "training windows need at least two hours".into(),
        ));
    }

    let native = phase.rollout_regime == RolloutRegime::Native;
    let fwd = forward_on_tape(&mut tape, &pred_vars, &emb, &state.pred_cfg, native)?;

    // Teacher-forcing rows: prediction row r (predicting z_{r+2}) against
    // the target encoder's z row r+1, for r = 0..T-2.
    let preds = tape.slice_rows(fwd.preds, 0, t_len - 1);
    let mut tgt = Tensor::zeros(t_len - 1, state.enc_cfg.d_z);
    for r in 0..t_len - 1 {
        tgt.row_mut(r).copy_from_slice(target_emb.z.row(r + 1));
    }
    let tgt = tape.constant(tgt);
    let diff = tape.sub(preds, tgt);
    let l1 = tape.abs(diff);
    let included: Vec<bool> = (1..t_len).map(|t| pair_valid(&emb.valid, t)).collect();
    let w = row_weight_tensor(t_len - 1, state.enc_cfg.d_z, &included);
    let weighted = tape.mul_const(l1, w);
    let tf_sum_var = tape.sum(weighted);

    // Rollout loss (2-step): step-1 terms reuse the teacher-forced rows at
    // anchors t = 1..=T-2; step-2 terms come from the fed-back stream in the
    // native regime and from the same teacher-forced rows otherwise.
    let mut roll_parts: Vec<Var> = Vec::new();
    if t_len >= 3 && phase.rollout_regime != RolloutRegime::None {
        let mut inc1 = vec![false; t_len - 1];
        for t in 1..=t_len - 2 {
            inc1[t - 1] = pair_valid(&emb.valid, t);
        }
        let w1 = row_weight_tensor(t_len - 1, state.enc_cfg.d_z, &inc1);
        let s1 = tape.mul_const(l1, w1);
        roll_parts.push(tape.sum(s1));

        match phase.rollout_regime {
            RolloutRegime::TeacherForced => {
                // step-2 term for anchor t is the teacher-forced row t
                let mut inc2 = vec![false; t_len - 1];
                for t in 1..=t_len - 2 {
                    inc2[t] = pair_valid(&emb.valid, t + 1);
                }
                let w2 = row_weight_tensor(t_len - 1, state.enc_cfg.d_z, &inc2);
                let s2 = tape.mul_const(l1, w2);
                roll_parts.push(tape.sum(s2));
            }
            RolloutRegime::Native => {
                let roll2 = fwd
                    .roll2_preds
                    .expect("native forward provides the rollout stream");
                // row j predicts z_{j+3} for anchor t = j+1
                let mut tgt2 = Tensor::zeros(t_len - 2, state.enc_cfg.d_z);
                for j in 0..t_len - 2 {
                    tgt2.row_mut(j).copy_from_slice(target_emb.z.row(j + 2));
                }
                let tgt2 = tape.constant(tgt2);
                let diff2 = tape.sub(roll2, tgt2);
                let l1b = tape.abs(diff2);
                let mut inc2 = vec![false; t_len - 2];
                for j in 0..t_len - 2 {
                    inc2[j] = pair_valid(&emb.valid, j + 2);
                }
                let w2 = row_weight_tensor(t_len - 2, state.enc_cfg.d_z, &inc2);
                let s2 = tape.mul_const(l1b, w2);
                roll_parts.push(tape.sum(s2));
            }
            RolloutRegime::None => unreachable!(),
        }
    }

    // Loss node with batch-level means folded into the scales.
    let mut loss = tape.scale(tf_sum_var, inv_tf_count as f32);
    if !roll_parts.is_empty() {
        let mut roll = roll_parts[0];
        for p in &roll_parts[1..] {
            roll = tape.add(roll, *p);
        }
        let roll = tape.scale(roll, inv_roll_count as f32);
        loss = tape.add(loss, roll);
    }

    let grads = tape.backward(loss)?;
    let grads_pred = state.predictor.extract_grads(&grads, &pred_vars);
    let grads_enc = if phase.encoder_trainable {
        Some(state.pair.online.extract_grads(&grads, &enc_vars))
    } else {
        None
    };

    let tf_sum = tape.value(tf_sum_var).item() as f64;
    let roll_sum: f64 = roll_parts
        .iter()
        .map(|v| tape.value(*v).item() as f64)
        .sum();

    Ok(WindowPass {
        grads_pred,
        grads_enc,
        tf_sum,
        roll_sum,
        z_rows: tape.value(emb.z).clone(),
    })
}

/// Deterministic mask pattern for a masked-latent pass.
fn masked_hours(t_len: usize, mask_fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed, &["masked-latent"]);
    let mut hidden: Vec<usize> = (0..t_len)
        .filter(|_| rng.gen::<f64>() < mask_fraction)
        .collect();
    if hidden.is_empty() {
        hidden.push(rng.gen_range(0..t_len));
    }
    hidden
}

/// Masked-latent pass: bidirectional attention over the assembled sequence
/// with masked state tokens replaced by a learned mask embedding; predicts
/// the target encoder's embeddings at the masked positions.
fn masked_latent_pass(
    window: &StayWindow,
    target_emb: &EmbeddingSequence<f32>,
    state: &TrainerState,
    stage_params: &ParamStore<f32>,
    inv_count: f64,
    tape_seed: u64,
) -> Result<(ParamStore<f32>, ParamStore<f32>, f64, Tensor<f32>)> {
    let mut tape = Tape::train(tape_seed);
    let enc_vars = state.pair.online.register(&mut tape, true);
    let pred_vars = stage_params.register(&mut tape, true);
    let emb = encode_window_on_tape(&mut tape, &enc_vars, window, &state.enc_cfg)?;
    let t_len = window.t();
    let seq_len = 2 * t_len + 1;
    let hidden = masked_hours(t_len, state.hyper.mask_fraction, tape_seed);

    let tokens =
        crate::predictor::assemble_sequence_on_tape(&mut tape, &pred_vars, &emb, &state.pred_cfg)?;
    // Zero the masked state rows, then add the mask token at those rows.
    let keep_w = {
        let mut w = Tensor::full(seq_len, state.pred_cfg.d_p, 1.0);
        for &h in &hidden {
            for v in w.row_mut(2 * h + 1) {
                *v = 0.0;
            }
        }
        Rc::new(w)
    };
    let masked_tokens = tape.mul_const(tokens, keep_w);
    let sel = {
        let mut m = Tensor::zeros(seq_len, state.pred_cfg.d_p);
        for &h in &hidden {
            for v in m.row_mut(2 * h + 1) {
                *v = 1.0;
            }
        }
        Rc::new(m)
    };
    let ones_col = tape.constant(Tensor::full(seq_len, 1, 1.0));
    let tok_broadcast = tape.matmul(ones_col, false, pred_vars["mask_token"], false);
    let tok_at_masked = tape.mul_const(tok_broadcast, sel);
    let mut x = tape.add(masked_tokens, tok_at_masked);

    let full = crate::predictor::bidirectional_mask(seq_len);
    for l in 0..state.pred_cfg.layers {
        x = crate::predictor::layer_forward_simple(&mut tape, &pred_vars, l, x, &full, &state.pred_cfg);
    }
    let positions: Vec<usize> = hidden.iter().map(|&h| 2 * h + 1).collect();
    let preds = crate::predictor::head_at_positions(&mut tape, &pred_vars, x, Rc::new(positions));

    let mut tgt = Tensor::zeros(hidden.len(), state.enc_cfg.d_z);
    let mut inc = vec![false; hidden.len()];
    for (i, &h) in hidden.iter().enumerate() {
        tgt.row_mut(i).copy_from_slice(target_emb.z.row(h));
        inc[i] = emb.valid[h];
    }
    let tgt = tape.constant(tgt);
    let diff = tape.sub(preds, tgt);
    let l1 = tape.abs(diff);
    let w = row_weight_tensor(hidden.len(), state.enc_cfg.d_z, &inc);
    let weighted = tape.mul_const(l1, w);
    let sum = tape.sum(weighted);
    let loss = tape.scale(sum, inv_count as f32);
    let grads = tape.backward(loss)?;
    let g_enc = state.pair.online.extract_grads(&grads, &enc_vars);
    let g_stage = stage_params.extract_grads(&grads, &pred_vars);
    let sum_val = tape.value(sum).item() as f64;
    Ok((g_enc, g_stage, sum_val, tape.value(emb.z).clone()))
}

// ---------------------------------------------------------------------------
// Phase and paradigm execution
// ---------------------------------------------------------------------------

fn sample_batch(n_windows: usize, n: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed, &["batch", &step.to_string()]);
    (0..n).map(|_| rng.gen_range(0..n_windows)).collect()
}

/// Run one curriculum phase. Hard-sync events execute the parameter copy and
/// return immediately without consuming optimizer steps.
pub fn run_phase(
    state: &mut TrainerState,
    phase: &PhaseConfig,
    windows: &[StayWindow],
    log: &mut TrainLog,
) -> Result<()> {
    phase.validate()?;
    log.phase_boundaries
        .push((phase.name.clone(), state.global_step));

    match phase.target_mode {
        TargetMode::HardSyncEvent => {
            state.pair.hard_sync();
            return Ok(());
        }
        TargetMode::IdenticalToOnline => {
            // paradigm-start semantics: online and target are one store
            state.pair.hard_sync();
        }
        TargetMode::EmaSlow | TargetMode::EmaChase => {
            state.pair.split_target();
        }
        TargetMode::IdenticalPostSync => {
            // keep whatever relationship earlier phases established
        }
    }
    if phase.steps == 0 {
        return Ok(());
    }
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }

    // Stage-local parameters for masked-latent phases.
    let mut stage_params: Option<ParamStore<f32>> = None;
    let mut stage_opt: Option<OptimState<f32>> = None;
    if phase.masked_latent {
        let mut p = init_predictor(&state.pred_cfg, derive_seed(state.seed, &["stage-a"]))?;
        let mut rng = seeded_rng(state.seed, &["stage-a", "mask-token"]);
        p.insert("mask_token", xavier_uniform(1, state.pred_cfg.d_p, &mut rng))?;
        stage_opt = Some(OptimState::new(
            &p,
            AdamHyper {
                weight_decay: state.hyper.weight_decay,
                clip_norm: Some(state.hyper.predictor_clip),
                ..AdamHyper::default()
            },
        ));
        stage_params = Some(p);
    }

    // Frozen stores can reuse embeddings across the whole phase.
    let cache_online = !phase.encoder_trainable;
    let cache_target = cache_online
        && !matches!(phase.target_mode, TargetMode::EmaSlow | TargetMode::EmaChase);
    let mut online_cache: BTreeMap<usize, Arc<EmbeddingSequence<f32>>> = BTreeMap::new();
    let mut target_cache: BTreeMap<usize, Arc<EmbeddingSequence<f32>>> = BTreeMap::new();

    for _ in 0..phase.steps {
        let step = state.global_step;
        let batch = sample_batch(windows.len(), state.hyper.batch_windows, state.seed, step);

        // Target embeddings are computed outside any tape: stop-gradient by
        // construction.
        let mut target_embs: Vec<Arc<EmbeddingSequence<f32>>> = Vec::with_capacity(batch.len());
        let mut online_embs: Vec<Option<Arc<EmbeddingSequence<f32>>>> =
            Vec::with_capacity(batch.len());
        for &wi in &batch {
            let t_emb = if cache_target {
                match target_cache.get(&wi) {
                    Some(e) => Arc::clone(e),
                    None => {
                        let e =
                            Arc::new(encode_window(state.pair.target(), &windows[wi], &state.enc_cfg)?);
                        target_cache.insert(wi, Arc::clone(&e));
                        e
                    }
                }
            } else {
                Arc::new(encode_window(state.pair.target(), &windows[wi], &state.enc_cfg)?)
            };
            target_embs.push(t_emb);
            let o_emb = if cache_online && !phase.masked_latent {
                Some(match online_cache.get(&wi) {
                    Some(e) => Arc::clone(e),
                    None => {
                        let e =
                            Arc::new(encode_window(&state.pair.online, &windows[wi], &state.enc_cfg)?);
                        online_cache.insert(wi, Arc::clone(&e));
                        e
                    }
                })
            } else {
                None
            };
            online_embs.push(o_emb);
        }

        let enc_lr = lr_at(step, &state.enc_schedule())?;
        let pred_lr = lr_at(step, &state.pred_schedule())?;

        let (l_tf, l_roll, grad_norm_enc, grad_norm_pred, zs): (
            f32,
            f32,
            Option<f64>,
            f64,
            Vec<Tensor<f32>>,
        ) = if phase.masked_latent {
            let sp = stage_params.as_ref().expect("stage params exist");
            // Batch-level count of masked, observed positions.
            let mut total = 0usize;
            for (slot, &wi) in batch.iter().enumerate() {
                let w = &windows[wi];
                let seed =
                    derive_seed(state.seed, &["mask-step", &step.to_string(), &slot.to_string()]);
                let hidden = masked_hours(w.t(), state.hyper.mask_fraction, seed);
                total += hidden
                    .iter()
                    .filter(|&&h| crate::encoder::hour_observed(w, h))
                    .count();
            }
            let inv = 1.0 / total.max(1) as f64;
            let results: Result<Vec<_>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &wi)| {
                    let seed =
                        derive_seed(state.seed, &["mask-step", &step.to_string(), &slot.to_string()]);
                    masked_latent_pass(&windows[wi], &target_embs[slot], state, sp, inv, seed)
                })
                .collect();
            let mut g_enc = state.pair.online.zeros_like();
            let mut g_stage = sp.zeros_like();
            let mut loss_sum = 0.0f64;
            let mut z_all: Vec<Tensor<f32>> = Vec::new();
            for (ge, gs, s, z) in results? {
                g_enc.add_scaled(&ge, 1.0);
                g_stage.add_scaled(&gs, 1.0);
                loss_sum += s;
                z_all.push(z);
            }
            let ge_norm = state.enc_opt.step(&mut state.pair.online, &g_enc, enc_lr)?;
            let gs_norm = stage_opt
                .as_mut()
                .expect("stage optimizer exists")
                .step(stage_params.as_mut().expect("stage params"), &g_stage, pred_lr)?;
            ((loss_sum * inv) as f32, 0.0, Some(ge_norm), gs_norm, z_all)
        } else {
            // Batch-level valid counts.
            let mut v_tf = 0usize;
            let mut v_roll = 0usize;
            for &wi in &batch {
                let w = &windows[wi];
                let t_len = w.t();
                let valid: Vec<bool> = (0..t_len)
                    .map(|t| crate::encoder::hour_observed(w, t))
                    .collect();
                for t in 1..t_len {
                    if pair_valid(&valid, t) {
                        v_tf += 1;
                    }
                }
                if t_len >= 3 && phase.rollout_regime != RolloutRegime::None {
                    for t in 1..=t_len - 2 {
                        if pair_valid(&valid, t) {
                            v_roll += 1;
                        }
                        if pair_valid(&valid, t + 1) {
                            v_roll += 1;
                        }
                    }
                }
            }
            if v_tf == 0 {
                return Err(Error::InsufficientData(
                    "batch has no valid teacher-forcing pairs".into(),
                ));
            }
            let inv_tf = 1.0 / v_tf as f64;
            let inv_roll = 1.0 / v_roll.max(1) as f64;
            let results: Result<Vec<WindowPass>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &wi)| {
                    let tape_seed =
                        derive_seed(state.seed, &["step", &step.to_string(), &slot.to_string()]);
                    window_pass(
                        &windows[wi],
                        &target_embs[slot],
                        state,
                        phase,
                        online_embs[slot].as_deref(),
                        inv_tf,
                        inv_roll,
                        tape_seed,
                    )
                })
                .collect();
            let passes = results?;
            let mut g_pred = state.predictor.zeros_like();
            let mut g_enc = phase
                .encoder_trainable
                .then(|| state.pair.online.zeros_like());
            let mut tf_sum = 0.0f64;
            let mut roll_sum = 0.0f64;
            let mut z_all: Vec<Tensor<f32>> = Vec::new();
            for p in passes {
                g_pred.add_scaled(&p.grads_pred, 1.0);
                if let (Some(acc), Some(g)) = (g_enc.as_mut(), p.grads_enc.as_ref()) {
                    acc.add_scaled(g, 1.0);
                }
                tf_sum += p.tf_sum;
                roll_sum += p.roll_sum;
                z_all.push(p.z_rows);
            }
            let l_tf = (tf_sum * inv_tf) as f32;
            let l_roll = if v_roll > 0 { (roll_sum * inv_roll) as f32 } else { 0.0 };
            let gp_norm = state.pred_opt.step(&mut state.predictor, &g_pred, pred_lr)?;
            let ge_norm = match g_enc {
                Some(g) => Some(state.enc_opt.step(&mut state.pair.online, &g, enc_lr)?),
                None => None,
            };
            (l_tf, l_roll, ge_norm, gp_norm, z_all)
        };

        // EMA after the optimizer step.
        if matches!(phase.target_mode, TargetMode::EmaSlow | TargetMode::EmaChase) {
            state.pair.ema_update()?;
        }

        // Collapse indicator over the batch's state embeddings.
        let z_std_val = {
            let total_rows: usize = zs.iter().map(|z| z.rows()).sum();
            let d = state.enc_cfg.d_z;
            let mut all = Tensor::zeros(total_rows, d);
            let mut r = 0;
            for z in &zs {
                for i in 0..z.rows() {
                    all.row_mut(r).copy_from_slice(z.row(i));
                    r += 1;
                }
            }
            z_std(&all)?
        };

        log.entries.push(TrainLogEntry {
            step,
            phase: phase.name.clone(),
            l_tf,
            l_roll,
            total: l_tf + l_roll,
            lr_encoder: if phase.encoder_trainable { enc_lr } else { 0.0 },
            lr_predictor: pred_lr,
            z_std: z_std_val,
            grad_norm_encoder: grad_norm_enc.unwrap_or(0.0),
            grad_norm_predictor: grad_norm_pred,
        });
        state.global_step += 1;
    }
    let _ = post_clip_norm(0.0, None);
    Ok(())
}

pub struct TrainOutcome {
    pub pair: EncoderPair,
    pub predictor: ParamStore<f32>,
    pub log: TrainLog,
}

/// Execute a paradigm's full phase list from the shared initialization.
pub fn train_paradigm(
    spec: &ParadigmSpec,
    sft_encoder: &ParamStore<f32>,
    windows: &[StayWindow],
    enc_cfg: &EncoderConfig,
    pred_cfg: &PredictorConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    // All paradigms share the predictor initialization as well as the
    // initialized encoder.
    let predictor = init_predictor(pred_cfg, derive_seed(seed, &["predictor-init"]))?;
    let mut state = TrainerState::new(
        sft_encoder.clone(),
        predictor,
        *enc_cfg,
        *pred_cfg,
        *hyper,
        derive_seed(seed, &["paradigm", spec.name.as_str()]),
    );
    let total: u64 = spec.phases.iter().map(|p| p.steps).sum();
    state.hyper.total_steps = total.max(1);
    let mut log = TrainLog::default();
    for phase in &spec.phases {
        run_phase(&mut state, phase, windows, &mut log)?;
    }
    Ok(TrainOutcome {
        pair: state.pair,
        predictor: state.predictor,
        log,
    })
}
