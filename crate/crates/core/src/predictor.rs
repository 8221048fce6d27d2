//! Block-causal latent trajectory predictor.
//!
//! Consumes the interleaved token sequence [demographics, (state, action)
//! per hour] after modality-specific projections, runs pre-norm GELU
//! transformer layers under a block-causal mask (demographics globally
//! visible, bidirectional within a timestep block, strictly causal across
//! blocks), and reads an absolute next-state prediction from each state
//! position.
//!
//! Autoregressive rollout feeds each prediction back through the state
//! projection as the next block's state token. The incremental rollout here
//! reuses cached per-layer key/value rows for earlier blocks; because every
//! attention kernel iterates allowed keys in ascending position order, the
//! incremental path is bit-identical to re-running the full forward.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingSequence, EmbeddingVars, EncoderConfig};
use crate::numerics::params::{seeded_rng, small_uniform, xavier_uniform, ParamStore};
use crate::numerics::tape::{AttnMask, Tape, Var};
use crate::numerics::tensor::{Real, Tensor};
use crate::synthworld::StayWindow;
use crate::{Error, Result};

pub const STORE_PREDICTOR: &str = "predictor";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub d_z: usize,
    pub d_p: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub ffn_dropout: f64,
    pub attn_dropout: f64,
    pub max_seq: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            d_z: 64,
            d_p: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            ffn_dropout: 0.15,
            attn_dropout: 0.10,
            max_seq: 2 * 72 + 5,
        }
    }
}

impl PredictorConfig {
    /// Full-scale preset: 6 pre-norm GELU layers, hidden 1024, 8 heads,
    /// FFN 4096, learned positions over 149 tokens, 4096-dim latents.
    pub fn paper_preset() -> Self {
        PredictorConfig {
            d_z: 4096,
            d_p: 1024,
            layers: 6,
            heads: 8,
            ffn_dim: 4096,
            ffn_dropout: 0.15,
            attn_dropout: 0.10,
            max_seq: 149,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_p % self.heads != 0 {
            return Err(Error::Config(format!(
                "predictor.d_p {} must be divisible by heads {}",
                self.d_p, self.heads
            )));
        }
        if self.layers == 0 || self.heads == 0 || self.d_z < 1 || self.ffn_dim == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if self.max_seq < 3 {
            return Err(Error::Config("predictor.max_seq must be >= 3".into()));
        }
        if !(0.0..1.0).contains(&self.ffn_dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config("predictor dropout rates must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_p / self.heads
    }

    pub fn max_t(&self) -> usize {
        (self.max_seq - 1) / 2
    }

    pub fn param_specs(&self) -> Vec<(String, usize, usize)> {
        let mut v = vec![
            ("proj.w_s".into(), self.d_p, self.d_z),
            ("proj.b_s".into(), 1, self.d_p),
            ("proj.w_a".into(), self.d_p, self.d_z),
            ("proj.b_a".into(), 1, self.d_p),
            ("proj.w_d".into(), self.d_p, self.d_z),
            ("proj.b_d".into(), 1, self.d_p),
            ("pos".into(), self.max_seq, self.d_p),
        ];
        for l in 0..self.layers {
            for t in ["ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta"] {
                v.push((format!("layer{l}.{t}"), 1, self.d_p));
            }
            for t in ["wq", "wk", "wv", "wo"] {
                v.push((format!("layer{l}.attn.{t}"), self.d_p, self.d_p));
            }
            for t in ["bq", "bk", "bv", "bo"] {
                v.push((format!("layer{l}.attn.{t}"), 1, self.d_p));
            }
            v.push((format!("layer{l}.ffn.w1"), self.ffn_dim, self.d_p));
            v.push((format!("layer{l}.ffn.b1"), 1, self.ffn_dim));
            v.push((format!("layer{l}.ffn.w2"), self.d_p, self.ffn_dim));
            v.push((format!("layer{l}.ffn.b2"), 1, self.d_p));
        }
        v.push(("final_ln.gamma".into(), 1, self.d_p));
        v.push(("final_ln.beta".into(), 1, self.d_p));
        v.push(("head.w".into(), self.d_z, self.d_p));
        v.push(("head.b".into(), 1, self.d_z));
        v
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|(_, r, c)| r * c).sum()
    }
}

pub fn init_predictor(cfg: &PredictorConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed, &["predictor", "init"]);
    let mut store = ParamStore::new();
    for (name, rows, cols) in cfg.param_specs() {
        let t = if name.ends_with("gamma") {
            Tensor::full(rows, cols, 1.0)
        } else if name.ends_with("beta") || name.contains(".b") {
            Tensor::zeros(rows, cols)
        } else if name == "pos" {
            small_uniform(rows, cols, 0.02, &mut rng)
        } else {
            xavier_uniform(rows, cols, &mut rng)
        };
        store.insert(&name, t)?;
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Block index of a sequence position: demographics is block 0, the (z_t,
/// u_t) pair sits in block t at positions (2t-1, 2t).
pub fn block_of(pos: usize) -> usize {
    (pos + 1) / 2
}

/// Boolean (2T+1)x(2T+1) attention-visibility matrix plus the allowed-key
/// lists the kernels consume.
#[derive(Debug, Clone)]
pub struct BlockCausalMask {
    pub t: usize,
    mask: Rc<AttnMask>,
}

impl BlockCausalMask {
    pub fn seq_len(&self) -> usize {
        2 * self.t + 1
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.mask.allowed[q].binary_search(&(k as u32)).is_ok()
    }

    pub fn dense(&self) -> Vec<Vec<bool>> {
        let n = self.seq_len();
        let mut m = vec![vec![false; n]; n];
        for (q, row) in self.mask.allowed.iter().enumerate() {
            for &k in row {
                m[q][k as usize] = true;
            }
        }
        m
    }

    pub fn attn(&self) -> Rc<AttnMask> {
        Rc::clone(&self.mask)
    }
}

/// Entry (q, k) is allowed iff k is the demographics position, q and k share
/// a timestep block, or k's block strictly precedes q's block.
pub fn block_causal_mask(t: usize) -> Result<BlockCausalMask> {
    if t < 1 {
        return Err(Error::InvalidArgument("block_causal_mask requires T >= 1".into()));
    }
    let n = 2 * t + 1;
    let mut allowed = Vec::with_capacity(n);
    for q in 0..n {
        let bq = block_of(q);
        let mut row = Vec::new();
        for k in 0..n {
            let bk = block_of(k);
            if k == 0 || bk == bq || bk < bq {
                row.push(k as u32);
            }
        }
        allowed.push(row);
    }
    Ok(BlockCausalMask {
        t,
        mask: Rc::new(AttnMask { allowed }),
    })
}

thread_local! {
    static TF_MASK_CACHE: RefCell<HashMap<usize, BlockCausalMask>> = RefCell::new(HashMap::new());
    static ROLL_MASK_CACHE: RefCell<HashMap<usize, Rc<AttnMask>>> = RefCell::new(HashMap::new());
    static FULL_MASK_CACHE: RefCell<HashMap<(usize, usize), Rc<AttnMask>>> = RefCell::new(HashMap::new());
}

fn tf_mask(t: usize) -> Result<BlockCausalMask> {
    TF_MASK_CACHE.with(|c| {
        let mut map = c.borrow_mut();
        if let Some(m) = map.get(&t) {
            return Ok(m.clone());
        }
        let m = block_causal_mask(t)?;
        map.insert(t, m.clone());
        Ok(m)
    })
}

/// Mask for the rollout stream: queries are the fed-back blocks b = 2..=T-1
/// (two tokens each); keys are the teacher-forced sequence (length 2T+1)
/// followed by the stream's own tokens. A query in block b sees the
/// demographics key, all teacher-forced keys in blocks strictly before b,
/// and its own block's two stream tokens.
fn rollout_stream_mask(t: usize) -> Rc<AttnMask> {
    ROLL_MASK_CACHE.with(|c| {
        let mut map = c.borrow_mut();
        if let Some(m) = map.get(&t) {
            return Rc::clone(m);
        }
        let l_a = 2 * t + 1;
        let mut allowed = Vec::new();
        for b in 2..t {
            let mut row: Vec<u32> = Vec::with_capacity(2 * b + 2);
            row.push(0);
            for k in 1..=2 * (b - 1) {
                row.push(k as u32);
            }
            let own = l_a + 2 * (b - 2);
            row.push(own as u32);
            row.push(own as u32 + 1);
            allowed.push(row.clone());
            allowed.push(row);
        }
        let m = Rc::new(AttnMask { allowed });
        map.insert(t, Rc::clone(&m));
        m
    })
}

/// Bidirectional mask: every token sees every token (the random-mask latent
/// prediction stage).
pub fn bidirectional_mask(n: usize) -> Rc<AttnMask> {
    full_mask(n, n)
}

/// Full visibility of `n_q` queries over `n_k` keys (incremental rollout
/// steps and the bidirectional masked-prediction variant).
fn full_mask(n_q: usize, n_k: usize) -> Rc<AttnMask> {
    FULL_MASK_CACHE.with(|c| {
        let mut map = c.borrow_mut();
        if let Some(m) = map.get(&(n_q, n_k)) {
            return Rc::clone(m);
        }
        let row: Vec<u32> = (0..n_k as u32).collect();
        let m = Rc::new(AttnMask {
            allowed: vec![row; n_q],
        });
        map.insert((n_q, n_k), Rc::clone(&m));
        m
    })
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Interleave projected tokens: position 0 is the projected demographics,
/// positions (2t-1, 2t) are the projected (z_t, u_t), and the learned
/// positional embedding row is added at each position.
pub fn assemble_sequence_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    emb: &EmbeddingVars,
    cfg: &PredictorConfig,
) -> Result<Var> {
    let t = tape.value(emb.z).rows();
    if t < 1 {
        return Err(Error::InvalidArgument("assemble_sequence requires T >= 1".into()));
    }
    let seq_len = 2 * t + 1;
    if seq_len > cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq_len} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let hd = tape.matmul(emb.z_d, false, vars["proj.w_d"], true);
    let hd = tape.add_row_broadcast(hd, vars["proj.b_d"]);
    let hs = tape.matmul(emb.z, false, vars["proj.w_s"], true);
    let hs = tape.add_row_broadcast(hs, vars["proj.b_s"]);
    let ha = tape.matmul(emb.u, false, vars["proj.w_a"], true);
    let ha = tape.add_row_broadcast(ha, vars["proj.b_a"]);
    // concat as [hd | hs | ha] then permute into interleaved order
    let stacked = tape.concat_rows(&[hd, hs, ha]);
    let mut perm = Vec::with_capacity(seq_len);
    perm.push(0usize);
    for hour in 0..t {
        perm.push(1 + hour);
        perm.push(1 + t + hour);
    }
    let tokens = tape.gather_rows(stacked, Rc::new(perm));
    let pos = tape.slice_rows(vars["pos"], 0, seq_len);
    Ok(tape.add(tokens, pos))
}

struct LayerKv {
    k: Var,
    v: Var,
}

/// One pre-norm transformer layer over `x`, attending to keys/values built
/// from `kv_src` (which must include x's own rows). Returns the new hidden
/// state and the full-width K/V of this layer for reuse by other streams.
#[allow(clippy::too_many_arguments)]
fn layer_forward<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    layer: usize,
    x: Var,
    extra_kv: Option<&LayerKv>,
    mask: &Rc<AttnMask>,
    cfg: &PredictorConfig,
) -> (Var, LayerKv) {
    let g1 = vars[&format!("layer{layer}.ln1.gamma")];
    let b1 = vars[&format!("layer{layer}.ln1.beta")];
    let n1 = tape.layer_norm(x, g1, b1, S::from_f64(1e-5));
    let q = tape.matmul(n1, false, vars[&format!("layer{layer}.attn.wq")], true);
    let q = tape.add_row_broadcast(q, vars[&format!("layer{layer}.attn.bq")]);
    let k_own = tape.matmul(n1, false, vars[&format!("layer{layer}.attn.wk")], true);
    let k_own = tape.add_row_broadcast(k_own, vars[&format!("layer{layer}.attn.bk")]);
    let v_own = tape.matmul(n1, false, vars[&format!("layer{layer}.attn.wv")], true);
    let v_own = tape.add_row_broadcast(v_own, vars[&format!("layer{layer}.attn.bv")]);
    let (k_all, v_all) = match extra_kv {
        Some(kv) => (
            tape.concat_rows(&[kv.k, k_own]),
            tape.concat_rows(&[kv.v, v_own]),
        ),
        None => (k_own, v_own),
    };
    let dh = cfg.head_dim();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k_all, h * dh, dh);
        let vh = tape.slice_cols(v_all, h * dh, dh);
        head_outs.push(tape.attention_with_dropout(qh, kh, vh, Rc::clone(mask), scale, cfg.attn_dropout));
    }
    let cat = tape.concat_cols(&head_outs);
    let proj = tape.matmul(cat, false, vars[&format!("layer{layer}.attn.wo")], true);
    let proj = tape.add_row_broadcast(proj, vars[&format!("layer{layer}.attn.bo")]);
    let x = tape.add(x, proj);

    let g2 = vars[&format!("layer{layer}.ln2.gamma")];
    let b2 = vars[&format!("layer{layer}.ln2.beta")];
    let n2 = tape.layer_norm(x, g2, b2, S::from_f64(1e-5));
    let f = tape.matmul(n2, false, vars[&format!("layer{layer}.ffn.w1")], true);
    let f = tape.add_row_broadcast(f, vars[&format!("layer{layer}.ffn.b1")]);
    let f = tape.gelu(f);
    let f = tape.dropout(f, cfg.ffn_dropout);
    let f = tape.matmul(f, false, vars[&format!("layer{layer}.ffn.w2")], true);
    let f = tape.add_row_broadcast(f, vars[&format!("layer{layer}.ffn.b2")]);
    let x = tape.add(x, f);
    (
        x,
        LayerKv {
            k: k_own,
            v: v_own,
        },
    )
}

/// One transformer layer without cross-stream key/value reuse; the hidden
/// state attends within itself under the given mask.
pub fn layer_forward_simple<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    layer: usize,
    x: Var,
    mask: &Rc<AttnMask>,
    cfg: &PredictorConfig,
) -> Var {
    layer_forward(tape, vars, layer, x, None, mask, cfg).0
}

/// Final layer norm plus the absolute output head, applied at the given
/// sequence positions.
pub fn head_at_positions<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    hidden: Var,
    positions: Rc<Vec<usize>>,
) -> Var {
    head_at(tape, vars, hidden, positions)
}

fn head_at<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    hidden: Var,
    positions: Rc<Vec<usize>>,
) -> Var {
    let gathered = tape.gather_rows(hidden, positions);
    let normed = tape.layer_norm(
        gathered,
        vars["final_ln.gamma"],
        vars["final_ln.beta"],
        S::from_f64(1e-5),
    );
    let out = tape.matmul(normed, false, vars["head.w"], true);
    tape.add_row_broadcast(out, vars["head.b"])
}

pub struct TfForward {
    /// Predictions from each state position: row t-1 predicts z_{t+1}
    /// (T x d_z).
    pub preds: Var,
    /// Native two-step rollout predictions: row j predicts z_{j+3} from
    /// anchor t = j+1 with the fed-back first-step prediction
    /// ((T-2) x d_z); None unless requested or T < 3.
    pub roll2_preds: Option<Var>,
}

/// Teacher-forced forward pass on a tape, optionally extended with the
/// native two-step rollout stream (fed-back first-step predictions).
pub fn forward_on_tape<S: Real>(
    tape: &mut Tape<S>,
    vars: &BTreeMap<String, Var>,
    emb: &EmbeddingVars,
    cfg: &PredictorConfig,
    with_native_roll2: bool,
) -> Result<TfForward> {
    let t = tape.value(emb.z).rows();
    let tokens = assemble_sequence_on_tape(tape, vars, emb, cfg)?;
    let mask = tf_mask(t)?;
    let attn_mask = mask.attn();

    let mut x = tokens;
    let mut layer_kvs: Vec<LayerKv> = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (nx, kv) = layer_forward(tape, vars, l, x, None, &attn_mask, cfg);
        if !tape.value(nx).all_finite() {
            return Err(Error::NumericOverflow(format!(
                "non-finite activation after predictor layer {l}"
            )));
        }
        x = nx;
        layer_kvs.push(kv);
    }
    let state_positions: Vec<usize> = (1..=t).map(|hour| 2 * hour - 1).collect();
    let preds = head_at(tape, vars, x, Rc::new(state_positions));

    let roll2_preds = if with_native_roll2 && t >= 3 {
        // Fed-back state tokens for blocks b = 2..=T-1: prediction rows
        // b-2 of the teacher-forced output, projected like real states.
        let fed = tape.slice_rows(preds, 0, t - 2);
        let hs = tape.matmul(fed, false, vars["proj.w_s"], true);
        let hs = tape.add_row_broadcast(hs, vars["proj.b_s"]);
        // Real action embeddings u_b for the same blocks.
        let ua = tape.slice_rows(emb.u, 1, t - 2);
        let ha = tape.matmul(ua, false, vars["proj.w_a"], true);
        let ha = tape.add_row_broadcast(ha, vars["proj.b_a"]);
        // Interleave (z_b, u_b) pairs and add the original positions.
        let stacked = tape.concat_rows(&[hs, ha]);
        let n_blocks = t - 2;
        let mut perm = Vec::with_capacity(2 * n_blocks);
        let mut pos_idx = Vec::with_capacity(2 * n_blocks);
        for j in 0..n_blocks {
            perm.push(j);
            perm.push(n_blocks + j);
            let b = j + 2;
            pos_idx.push(2 * b - 1);
            pos_idx.push(2 * b);
        }
        let stream = tape.gather_rows(stacked, Rc::new(perm));
        let pos_all = vars["pos"];
        let pos_rows = tape.gather_rows(pos_all, Rc::new(pos_idx));
        let mut xb = tape.add(stream, pos_rows);
        let roll_mask = rollout_stream_mask(t);
        for l in 0..cfg.layers {
            let (nx, _) = layer_forward(tape, vars, l, xb, Some(&layer_kvs[l]), &roll_mask, cfg);
            xb = nx;
        }
        // State positions of the stream are its even rows.
        let state_rows: Vec<usize> = (0..n_blocks).map(|j| 2 * j).collect();
        Some(head_at(tape, vars, xb, Rc::new(state_rows)))
    } else {
        None
    };

    Ok(TfForward { preds, roll2_preds })
}

/// Evaluation-mode teacher-forced forward: deterministic, dropout disabled.
/// Output row t-1 is the absolute prediction of z_{t+1}.
pub fn forward_teacher_forced<S: Real>(
    params: &ParamStore<S>,
    emb: &EmbeddingSequence<S>,
    cfg: &PredictorConfig,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let emb_vars = embed_consts(&mut tape, emb);
    let fwd = forward_on_tape(&mut tape, &vars, &emb_vars, cfg, false)?;
    Ok(tape.value(fwd.preds).clone())
}

pub fn embed_consts<S: Real>(tape: &mut Tape<S>, emb: &EmbeddingSequence<S>) -> EmbeddingVars {
    EmbeddingVars {
        z_d: tape.constant(emb.z_d.clone()),
        z: tape.constant(emb.z.clone()),
        u: tape.constant(emb.u.clone()),
        valid: emb.valid.clone(),
    }
}

// ---------------------------------------------------------------------------
// Autoregressive rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    GroundTruth,
    RepeatLast,
}

#[derive(Debug, Clone)]
pub struct RolloutTrace<S> {
    pub context: usize,
    pub horizon: usize,
    /// Row h-1 is the prediction of z_{C+h} (H x d_z).
    pub predicted: Tensor<S>,
    /// True exactly for steps whose state input was a fed-back prediction.
    pub fed_back: Vec<bool>,
}

impl<S: Real> RolloutTrace<S> {
    /// One line of the line-delimited trace format: ids, context, horizon,
    /// fed-back flags, and the flattened prediction matrix.
    pub fn to_record_json(&self, stay_id: u64, start_hour: usize) -> String {
        let flat: Vec<f64> = self.predicted.data().iter().map(|v| v.as_f64()).collect();
        serde_json::json!({
            "stay_id": stay_id,
            "start_hour": start_hour,
            "context": self.context,
            "horizon": self.horizon,
            "fed_back": self.fed_back,
            "d_z": self.predicted.cols(),
            "predicted": flat,
        })
        .to_string()
    }
}

/// Deterministic autoregressive rollout from a context of C ground-truth
/// blocks. Step 1 reads the teacher-forced prediction at state position C;
/// each later step appends a block whose state token is the previous
/// prediction fed back through the state projection, with real action
/// embeddings.
pub fn rollout_from_embeddings<S: Real>(
    params: &ParamStore<S>,
    emb: &EmbeddingSequence<S>,
    cfg: &PredictorConfig,
    context: usize,
    horizon: usize,
    actions: ActionSource,
) -> Result<RolloutTrace<S>> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("rollout horizon must be >= 1".into()));
    }
    let t = emb.z.rows();
    if context < 1 || context > t {
        return Err(Error::InvalidArgument(format!(
            "rollout context {context} out of range for window length {t}"
        )));
    }
    // Step h consumes the action of hour context+h-1; hour indices are
    // 1-based, embedding rows 0-based.
    let last_action_hour = context + horizon - 1;
    if actions == ActionSource::GroundTruth && last_action_hour > t {
        return Err(Error::InsufficientInput(format!(
            "rollout needs actions through hour {last_action_hour} but the window has {t}"
        )));
    }
    let final_seq = 2 * (context + horizon - 1) + 1;
    if final_seq > cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "rollout sequence length {final_seq} exceeds max_seq {}",
            cfg.max_seq
        )));
    }

    let mut tape: Tape<S> = Tape::new();
    let vars = params.register(&mut tape, false);

    // Context forward over blocks 0..=C.
    let ctx_emb = EmbeddingVars {
        z_d: tape.constant(emb.z_d.clone()),
        z: {
            let mut zc = Tensor::zeros(context, emb.z.cols());
            for i in 0..context {
                zc.row_mut(i).copy_from_slice(emb.z.row(i));
            }
            tape.constant(zc)
        },
        u: {
            let mut uc = Tensor::zeros(context, emb.u.cols());
            for i in 0..context {
                uc.row_mut(i).copy_from_slice(emb.u.row(i));
            }
            tape.constant(uc)
        },
        valid: emb.valid[..context].to_vec(),
    };
    let tokens = assemble_sequence_on_tape(&mut tape, &vars, &ctx_emb, cfg)?;
    let mask = tf_mask(context)?;
    let attn_mask = mask.attn();
    let mut x = tokens;
    let mut caches: Vec<LayerKv> = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (nx, kv) = layer_forward(&mut tape, &vars, l, x, None, &attn_mask, cfg);
        x = nx;
        caches.push(kv);
    }
    let last_state_pos = 2 * context - 1;
    let mut pred = head_at(&mut tape, &vars, x, Rc::new(vec![last_state_pos]));

    let mut predicted = Tensor::zeros(horizon, cfg.d_z);
    predicted.row_mut(0).copy_from_slice(tape.value(pred).row(0));
    let mut fed_back = vec![false];

    let mut n_keys = 2 * context + 1;
    for h in 2..=horizon {
        let block = context + h - 1; // this block's state token is fed back
        let action_row = if actions == ActionSource::GroundTruth {
            block - 1
        } else {
            (block - 1).min(t - 1)
        };
        let hs = tape.matmul(pred, false, vars["proj.w_s"], true);
        let hs = tape.add_row_broadcast(hs, vars["proj.b_s"]);
        let mut urow = Tensor::zeros(1, emb.u.cols());
        urow.row_mut(0).copy_from_slice(emb.u.row(action_row));
        let uc = tape.constant(urow);
        let ha = tape.matmul(uc, false, vars["proj.w_a"], true);
        let ha = tape.add_row_broadcast(ha, vars["proj.b_a"]);
        let pair = tape.concat_rows(&[hs, ha]);
        let pos = tape.slice_rows(vars["pos"], 2 * block - 1, 2);
        let mut xb = tape.add(pair, pos);
        let mask = full_mask(2, n_keys + 2);
        for l in 0..cfg.layers {
            let (nx, kv) = layer_forward(&mut tape, &vars, l, xb, Some(&caches[l]), &mask, cfg);
            xb = nx;
            caches[l] = LayerKv {
                k: tape.concat_rows(&[caches[l].k, kv.k]),
                v: tape.concat_rows(&[caches[l].v, kv.v]),
            };
        }
        n_keys += 2;
        pred = head_at(&mut tape, &vars, xb, Rc::new(vec![0]));
        predicted.row_mut(h - 1).copy_from_slice(tape.value(pred).row(0));
        fed_back.push(true);
    }

    Ok(RolloutTrace {
        context,
        horizon,
        predicted,
        fed_back,
    })
}

/// Convenience wrapper: encode the window with the deployed encoder, then
/// roll out.
pub fn rollout<S: Real>(
    params: &ParamStore<S>,
    encoder: &ParamStore<S>,
    enc_cfg: &EncoderConfig,
    window: &StayWindow,
    cfg: &PredictorConfig,
    context: usize,
    horizon: usize,
    actions: ActionSource,
) -> Result<RolloutTrace<S>> {
    let emb = crate::encoder::encode_window(encoder, window, enc_cfg)?;
    rollout_from_embeddings(params, &emb, cfg, context, horizon, actions)
}
