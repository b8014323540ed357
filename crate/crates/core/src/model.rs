//! The re-ranking network.
//!
//! For a context of `K + 1` nodes (row 0 the query) with raw descriptors `d`
//! and side-information affinity blocks:
//!
//! ```text
//! p_i   = normalize(W d_i)                         descriptor projection
//! a_i   = [p_i·p_0 … p_i·p_L] ‖ side_i             affinity vector
//! x⁰    = W̄ a_i
//! m     = MHA(LN₁(x))
//! x'    = x + m + MLP(LN₂(x + m))                  per layer
//! ã_i   = normalize(x_i)
//! score = ã_i·ã_0
//! ```
//!
//! The MLP is `Linear(D̄, 4D̄) → GELU → Linear(4D̄, D̄)`. Ablation variants
//! switch off the projection (`W = I`), feed projected descriptors instead of
//! affinities to the attention layer, or drop the attention layer and score by
//! the raw dot product `a_i·a_0`.
//!
//! Parameters are registered in this order, which is also the checkpoint
//! order: `W`, `W_bar`, then per layer `ln1.gain`, `ln1.bias`, `attn.wq`,
//! `attn.bq`, `attn.wk`, `attn.bk`, `attn.wv`, `attn.bv`, `attn.wo`,
//! `attn.bo`, `ln2.gain`, `ln2.bias`, `mlp.w1`, `mlp.b1`, `mlp.w2`, `mlp.b2`.
//! Weight matrices are stored `out × in`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::BlockConfig;
use crate::tape::{GradTape, ParamId, ParamStore, Var};
use crate::tensor::{self, Tensor2};
use crate::{Error, Real, Result};

/// What the attention layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Affinity vectors `a_i`.
    Affinity,
    /// Normalized projected descriptors `W d_i`.
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw descriptor width `D`.
    pub d: usize,
    /// Projected width `D₀`; must equal `D` without a learned projection.
    pub d0: usize,
    /// Attention width `D̄`.
    pub d_bar: usize,
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Retrieved candidates per query.
    pub k: usize,
    /// Anchor candidates.
    pub l: usize,
    pub blocks: BlockConfig,
    /// Learn `W`; otherwise the identity is used.
    #[serde(default = "yes")]
    pub projection: bool,
    /// Refine with the attention layer; otherwise score `a_i·a_0`
    /// (affinity input) or the projected cosine (projected input).
    #[serde(default = "yes")]
    pub gnn: bool,
    #[serde(default = "affinity_mode")]
    pub input: InputMode,
}

fn default_layers() -> usize {
    1
}
fn default_mlp_ratio() -> usize {
    4
}
fn yes() -> bool {
    true
}
fn affinity_mode() -> InputMode {
    InputMode::Affinity
}

impl ModelConfig {
    /// Width of the attention layer input.
    pub fn input_dim(&self) -> usize {
        match self.input {
            InputMode::Affinity => self.blocks.affinity_dim(self.l),
            InputMode::Projected => self.d0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.d == 0 || self.d0 == 0 {
            return fail(format!(
                "descriptor widths must be positive (D = {}, D0 = {})",
                self.d, self.d0
            ));
        }
        if !self.projection && self.d0 != self.d {
            return fail(format!(
                "without a projection D0 must equal D ({} != {})",
                self.d0, self.d
            ));
        }
        if self.l > self.k {
            return fail(format!("L = {} exceeds K = {}", self.l, self.k));
        }
        if self.gnn {
            if self.heads == 0 || !self.d_bar.is_multiple_of(self.heads) {
                return fail(format!(
                    "D_bar = {} is not divisible by {} heads",
                    self.d_bar, self.heads
                ));
            }
            if self.d_bar < 2 || self.layers == 0 || self.mlp_ratio == 0 {
                return fail(format!(
                    "attention layer needs D_bar >= 2 and at least one layer (D_bar = {}, layers = {})",
                    self.d_bar, self.layers
                ));
            }
        }
        if self.input == InputMode::Projected && self.blocks.side_dim(self.l) > 0 {
            return fail("side-information blocks need affinity input".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter layout of a configured network; values live in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: ModelConfig,
    w: Option<ParamId>,
    w_bar: Option<ParamId>,
    layers: Vec<LayerIds>,
}

/// Training-time randomness.
pub struct Noise<'a, R: ?Sized> {
    /// Dropout on the network input (affinities, or descriptors for the
    /// projected input).
    pub p_input: f64,
    /// Dropout on post-softmax attention weights.
    pub p_attention: f64,
    pub rng: &'a mut R,
}

/// Inputs of one context. Row 0 is the query.
#[derive(Clone, Debug)]
pub struct ContextInput<T> {
    /// Raw descriptors, `(K + 1) × D`.
    pub descriptors: Tensor2<T>,
    /// Side-information blocks, `(K + 1) × side_dim`.
    pub side: Tensor2<T>,
}

fn glorot<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2<T> {
    let a = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.random_range(-a..a)))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("glorot shape")
}

impl Network {
    /// Registers freshly initialized parameters in a new store.
    pub fn init<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg
            .projection
            .then(|| store.add("W", glorot(cfg.d0, cfg.d, &mut rng)));
        let mut w_bar = None;
        let mut layers = Vec::new();
        if cfg.gnn {
            let (db, hidden) = (cfg.d_bar, cfg.d_bar * cfg.mlp_ratio);
            w_bar = Some(store.add("W_bar", glorot(db, cfg.input_dim(), &mut rng)));
            for l in 0..cfg.layers {
                let mut add = |name: &str, t: Tensor2<T>| store.add(format!("layer{l}.{name}"), t);
                let ids = LayerIds {
                    ln1_gain: add("ln1.gain", Tensor2::filled(1, db, T::one())),
                    ln1_bias: add("ln1.bias", Tensor2::zeros(1, db)),
                    wq: add("attn.wq", glorot(db, db, &mut rng)),
                    bq: add("attn.bq", Tensor2::zeros(1, db)),
                    wk: add("attn.wk", glorot(db, db, &mut rng)),
                    bk: add("attn.bk", Tensor2::zeros(1, db)),
                    wv: add("attn.wv", glorot(db, db, &mut rng)),
                    bv: add("attn.bv", Tensor2::zeros(1, db)),
                    wo: add("attn.wo", glorot(db, db, &mut rng)),
                    bo: add("attn.bo", Tensor2::zeros(1, db)),
                    ln2_gain: add("ln2.gain", Tensor2::filled(1, db, T::one())),
                    ln2_bias: add("ln2.bias", Tensor2::zeros(1, db)),
                    w1: add("mlp.w1", glorot(hidden, db, &mut rng)),
                    b1: add("mlp.b1", Tensor2::zeros(1, hidden)),
                    w2: add("mlp.w2", glorot(db, hidden, &mut rng)),
                    b2: add("mlp.b2", Tensor2::zeros(1, db)),
                };
                layers.push(ids);
            }
        }
        Ok((
            Self {
                cfg,
                w,
                w_bar,
                layers,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The projection parameter, if learned.
    pub fn projection(&self) -> Option<ParamId> {
        self.w
    }

    /// Parameters other than the projection.
    pub fn gnn_params<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids().filter(|&id| Some(id) != self.w).collect()
    }

    /// Checks that `store` has exactly this network's parameter shapes.
    pub fn check_store<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let (_, reference) = Network::init::<T>(self.cfg.clone(), 0)?;
        if store.len() != reference.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                store.len()
            )));
        }
        for (a, b) in store.entries().iter().zip(reference.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Real>(&self, input: &ContextInput<T>) -> Result<usize> {
        let n = input.descriptors.rows();
        if n < self.cfg.l + 1 {
            return Err(Error::Config(format!(
                "context has {} candidates but L = {}",
                n.saturating_sub(1),
                self.cfg.l
            )));
        }
        if input.descriptors.cols() != self.cfg.d {
            return Err(Error::shape(
                "descriptors",
                input.descriptors.shape(),
                (n, self.cfg.d),
            ));
        }
        let side = self.cfg.blocks.side_dim(self.cfg.l);
        if input.side.shape() != (n, side) {
            return Err(Error::Config(format!(
                "side affinity is {}x{}, model expects {}x{}",
                input.side.rows(),
                input.side.cols(),
                n,
                side
            )));
        }
        Ok(n)
    }

    fn dropout<T: Real, R: Rng + ?Sized>(
        tape: &mut GradTape<T>,
        x: Var,
        p: f64,
        noise: &mut Option<&mut Noise<'_, R>>,
    ) -> Result<Var> {
        match noise {
            Some(n) if p > 0.0 => {
                let len = tape.value(x).data().len();
                let mask = tensor::dropout_mask(len, p, n.rng)?;
                tape.mask(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Network input on the tape: affinity vectors or projected descriptors.
    pub fn input_on_tape<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradTape<T>,
        input: &ContextInput<T>,
        noise: &mut Option<&mut Noise<'_, R>>,
    ) -> Result<Var> {
        self.check_input(input)?;
        let p_in = noise.as_ref().map_or(0.0, |n| n.p_input);
        let mut d = tape.constant(input.descriptors.clone());
        if self.cfg.input == InputMode::Projected {
            d = Self::dropout(tape, d, p_in, noise)?;
        }
        let projected = match self.w {
            Some(w) => {
                let wv = tape.param(store, w);
                tape.matmul_t(d, wv)?
            }
            None => d,
        };
        let unit = tape.normalize_rows(projected);
        if self.cfg.input == InputMode::Projected {
            return Ok(unit);
        }
        let anchors = tape.slice_rows(unit, 0, self.cfg.l + 1)?;
        let vis = tape.matmul_t(unit, anchors)?;
        let a = if input.side.cols() > 0 {
            let side = tape.constant(input.side.clone());
            tape.concat_cols(&[vis, side])?
        } else {
            vis
        };
        Self::dropout(tape, a, p_in, noise)
    }

    /// Refined unit-norm node descriptors, `(K + 1) × D̄`.
    pub fn refine_on_tape<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradTape<T>,
        x_in: Var,
        noise: &mut Option<&mut Noise<'_, R>>,
    ) -> Result<Var> {
        let w_bar = self
            .w_bar
            .ok_or_else(|| Error::Config("network has no attention layer".into()))?;
        let wb = tape.param(store, w_bar);
        let mut x = tape.matmul_t(x_in, wb)?;
        let heads = self.cfg.heads;
        let hd = self.cfg.d_bar / heads;
        let scale = T::one() / T::from_usize(hd).sqrt();
        let p_att = noise.as_ref().map_or(0.0, |n| n.p_attention);
        for ids in &self.layers {
            let mut p = |id| tape.param(store, id);
            let (g1, b1n) = (p(ids.ln1_gain), p(ids.ln1_bias));
            let (wq, bq, wk, bk) = (p(ids.wq), p(ids.bq), p(ids.wk), p(ids.bk));
            let (wv, bv, wo, bo) = (p(ids.wv), p(ids.bv), p(ids.wo), p(ids.bo));
            let (g2, b2n) = (p(ids.ln2_gain), p(ids.ln2_bias));
            let (w1, b1, w2, b2) = (p(ids.w1), p(ids.b1), p(ids.w2), p(ids.b2));

            let h = tape.layer_norm_rows(x, g1, b1n)?;
            let q = tape.matmul_t(h, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul_t(h, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul_t(h, wv)?;
            let v = tape.add_row(v, bv)?;
            let mut ctx = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let logits = tape.matmul_t(qh, kh)?;
                let logits = tape.scale(logits, scale);
                let att = tape.softmax_rows(logits);
                let att = Self::dropout(tape, att, p_att, noise)?;
                ctx.push(tape.matmul(att, vh)?);
            }
            let ctx = if heads == 1 {
                ctx[0]
            } else {
                tape.concat_cols(&ctx)?
            };
            let m = tape.matmul_t(ctx, wo)?;
            let m = tape.add_row(m, bo)?;
            let y = tape.add(x, m)?;
            let z = tape.layer_norm_rows(y, g2, b2n)?;
            let f = tape.matmul_t(z, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul_t(f, w2)?;
            let f = tape.add_row(f, b2)?;
            x = tape.add(y, f)?;
        }
        Ok(tape.normalize_rows(x))
    }

    /// Candidate scores on the tape, `K × 1`.
    pub fn scores_on_tape<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradTape<T>,
        input: &ContextInput<T>,
        mut noise: Option<&mut Noise<'_, R>>,
    ) -> Result<Var> {
        let x = self.input_on_tape(store, tape, input, &mut noise)?;
        let out = if self.cfg.gnn {
            self.refine_on_tape(store, tape, x, &mut noise)?
        } else {
            x
        };
        let n = tape.value(out).rows();
        let query = tape.slice_rows(out, 0, 1)?;
        let cands = tape.slice_rows(out, 1, n - 1)?;
        tape.matmul_t(cands, query)
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (net, store) = Network::init(cfg, seed)?;
        Ok(Self { net, store })
    }

    /// Wraps loaded parameters after checking their layout.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let (net, _) = Network::init::<T>(cfg, 0)?;
        net.check_store(&store)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Evaluation-mode candidate scores.
    pub fn scores(&self, input: &ContextInput<T>) -> Result<Vec<T>> {
        let mut tape = GradTape::new();
        let s = self
            .net
            .scores_on_tape::<T, ChaCha8Rng>(&self.store, &mut tape, input, None)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Evaluation-mode refined descriptors, `(K + 1) × D̄`.
    pub fn refine(&self, input: &ContextInput<T>) -> Result<Tensor2<T>> {
        let mut tape = GradTape::new();
        let mut none: Option<&mut Noise<'_, ChaCha8Rng>> = None;
        let x = self
            .net
            .input_on_tape(&self.store, &mut tape, input, &mut none)?;
        let r = self
            .net
            .refine_on_tape(&self.store, &mut tape, x, &mut none)?;
        Ok(tape.value(r).clone())
    }

    /// New candidate order (indices into the initial ranking).
    pub fn rerank(&self, input: &ContextInput<T>) -> Result<Vec<usize>> {
        Ok(crate::loss::rank_by_score(&self.scores(input)?))
    }
}

/// Parameter count of a configuration without allocating it.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let mut n = if cfg.projection { cfg.d0 * cfg.d } else { 0 };
    if cfg.gnn {
        let (db, hidden) = (cfg.d_bar, cfg.d_bar * cfg.mlp_ratio);
        n += db * cfg.input_dim();
        let per_layer = 4 * db + 4 * (db * db + db) + (hidden * db + hidden) + (db * hidden + db);
        n += cfg.layers * per_layer;
    }
    n
}
