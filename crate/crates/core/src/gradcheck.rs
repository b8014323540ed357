//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::BlockConfig;
use crate::loss::{quantized_ap_loss, DEFAULT_BINS};
use crate::model::{ContextInput, InputMode, Model, ModelConfig, Network};
use crate::tape::{GradTape, ParamStore, Var};
use crate::tensor::Tensor2;
use crate::{Error, Real, Result};

/// Per-parameter relative error between analytic and finite-difference
/// gradients.
///
/// The error of one parameter tensor is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, f·G)`,
/// where `G` is the largest gradient entry over all tensors and `f` is
/// [`SCALE_FLOOR`]. The floor keeps tensors whose true gradient vanishes
/// (such as attention key biases, which softmax cancels) from reporting pure
/// rounding noise as a relative error of 1. The error is zero when both
/// gradients vanish.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .fold(None, |best: Option<&(String, f64)>, e| match best {
                Some(b) if b.1 >= e.1 => Some(b),
                _ => Some(e),
            })
    }
}

pub const SCALE_FLOOR: f64 = 1e-3;

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`, or zero when the denominator is zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|x| x.abs())
        .fold(floor, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn evaluate<T: Real, F>(store: &ParamStore<T>, loss_fn: &mut F) -> Result<T>
where
    F: FnMut(&ParamStore<T>, &mut GradTape<T>) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let loss = loss_fn(store, &mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(alloc::format!("loss evaluated to {v:?}")));
    }
    Ok(v)
}

fn analytic<T: Real, F>(store: &mut ParamStore<T>, loss_fn: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore<T>, &mut GradTape<T>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = GradTape::new();
    let loss = loss_fn(store, &mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(alloc::format!("loss evaluated to {v:?}")));
    }
    tape.backward(loss, store)?;
    Ok(store
        .entries()
        .iter()
        .map(|e| e.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect())
}

fn numeric<T: Real, F>(store: &mut ParamStore<T>, loss_fn: &mut F, step: T) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore<T>, &mut GradTape<T>) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).data().len();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let original = store.value(id).data()[i];
            store.entry_mut(id).value.data_mut()[i] = original + step;
            let plus = evaluate(store, loss_fn)?;
            store.entry_mut(id).value.data_mut()[i] = original - step;
            let minus = evaluate(store, loss_fn)?;
            store.entry_mut(id).value.data_mut()[i] = original;
            g.push((plus - minus).as_f64() / (2.0 * step.as_f64()));
        }
        out.push(g);
    }
    Ok(out)
}

fn report<T: Real>(store: &ParamStore<T>, a: &[Vec<f64>], n: &[Vec<f64>]) -> GradcheckReport {
    let global = store
        .entries()
        .iter()
        .zip(a)
        .filter(|(e, _)| !e.frozen)
        .flat_map(|(_, g)| g.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = SCALE_FLOOR * global;
    GradcheckReport {
        entries: store
            .entries()
            .iter()
            .zip(a.iter().zip(n))
            .filter(|(e, _)| !e.frozen)
            .map(|(e, (a, n))| (e.name.clone(), relative_error(a, n, floor)))
            .collect(),
    }
}

/// Compares the tape gradient of `loss_fn` with central differences of step
/// `step`, for every unfrozen parameter in `store`.
///
/// `loss_fn` must be deterministic (dropout disabled or re-seeded per call).
/// Accumulated gradients in `store` are overwritten.
pub fn gradcheck<T: Real, F>(
    store: &mut ParamStore<T>,
    mut loss_fn: F,
    step: T,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore<T>, &mut GradTape<T>) -> Result<Var>,
{
    let a = analytic(store, &mut loss_fn)?;
    let n = numeric(store, &mut loss_fn, step)?;
    Ok(report(store, &a, &n))
}

/// Checks the gradient computed at the precision of `store` against central
/// differences evaluated on a 64-bit copy of the same parameters.
///
/// Used for 32-bit checks, where finite differences taken in single precision
/// are dominated by rounding.
pub fn gradcheck_mixed<T, F, G>(
    store: &mut ParamStore<T>,
    mut loss_fn: F,
    mut reference: G,
    step: f64,
) -> Result<GradcheckReport>
where
    T: Real,
    F: FnMut(&ParamStore<T>, &mut GradTape<T>) -> Result<Var>,
    G: FnMut(&ParamStore<f64>, &mut GradTape<f64>) -> Result<Var>,
{
    let a = analytic(store, &mut loss_fn)?;
    let mut wide = store.cast::<f64>();
    let n = numeric(&mut wide, &mut reference, step)?;
    Ok(report(store, &a, &n))
}

/// Small full-model instance: K=7, L=3, D=16, D₀=8, D̄=12, H=2, all side
/// blocks.
pub fn reference_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        d0: 8,
        d_bar: 12,
        heads: 2,
        layers: 1,
        mlp_ratio: 4,
        k: 7,
        l: 3,
        blocks: BlockConfig {
            positional: true,
            heading: true,
            radio: true,
            query_heading: true,
            query_radio: true,
        },
        projection: true,
        gnn: true,
        input: InputMode::Affinity,
    }
}

fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ContextInput<f64> {
    let n = cfg.k + 1;
    let side_dim = cfg.blocks.side_dim(cfg.l);
    let desc = (0..n * cfg.d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let side = (0..n * side_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    ContextInput {
        descriptors: Tensor2::from_vec(n, cfg.d, desc).expect("descriptor shape"),
        side: Tensor2::from_vec(n, side_dim, side).expect("side shape"),
    }
}

fn model_loss<T: Real>(
    net: &Network,
    s: &ParamStore<T>,
    t: &mut GradTape<T>,
    input: &ContextInput<T>,
    labels: &[bool],
) -> Result<Var> {
    let scores = net.scores_on_tape::<T, ChaCha8Rng>(s, t, input, None)?;
    let lv = quantized_ap_loss(t.value(scores).data(), labels, DEFAULT_BINS)?;
    t.external_scalar(scores, lv.value, lv.grad)
}

/// Gradient check of the whole pipeline (projection, affinity, attention,
/// MLP, normalization, quantized AP) on a random [`reference_config`]
/// instance. With `wide` false the gradients are computed in f32 and
/// compared against f64 central differences.
pub fn check_model(seed: u64, wide: bool) -> Result<GradcheckReport> {
    let cfg = reference_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(&cfg, &mut rng);
    let mut labels: Vec<bool> = (0..cfg.k).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    let Model { net, store } = Model::<f64>::init(cfg, seed)?;
    if wide {
        let mut store = store;
        gradcheck(
            &mut store,
            |s, t| model_loss(&net, s, t, &input, &labels),
            1e-6,
        )
    } else {
        let mut narrow = store.cast::<f32>();
        let input32 = ContextInput {
            descriptors: input.descriptors.cast::<f32>(),
            side: input.side.cast::<f32>(),
        };
        let wide_input = ContextInput {
            descriptors: input32.descriptors.cast::<f64>(),
            side: input32.side.cast::<f64>(),
        };
        gradcheck_mixed(
            &mut narrow,
            |s, t| model_loss(&net, s, t, &input32, &labels),
            |s, t| model_loss(&net, s, t, &wide_input, &labels),
            1e-6,
        )
    }
}
