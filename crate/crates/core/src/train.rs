//! Training: example construction, the two-stage schedule and re-ranking of
//! evaluation contexts.
//!
//! Stage 1 (`Stage::Projection`) trains `W` alone, scoring candidates by the
//! cosine of their projections. Stage 2 (`Stage::Gnn`) freezes `W` and trains
//! the attention layer. `Stage::Joint` trains everything at once. All stages
//! use Adam on the quantized-AP loss, batches of independent contexts with
//! averaged gradients, a learning rate of `lr·decay^epoch`, and keep the
//! parameters of the epoch with the best validation mAP@10 (earliest on ties).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{radio_affinity, side_affinity, BlockConfig, SideInfoConfig};
use crate::dataset::{Dataset, Split};
use crate::loss::{quantized_ap_loss, DEFAULT_BINS};
use crate::metrics::evaluate;
use crate::model::{InputMode, Model, ModelConfig, Noise};
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::{DescriptorIndex, RetrievalContext};
use crate::tape::{GradTape, ParamStore};
use crate::tensor::Tensor2;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Projection,
    Gnn,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplied into the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Dropout on the network input.
    pub p_input: f64,
    /// Dropout on attention weights.
    pub p_attention: f64,
    /// Probability of dropping each radio reading.
    pub p_radio: f64,
    pub weight_decay: f64,
    /// Quantization bins of the AP loss.
    pub bins: usize,
    /// Use at most this many training examples per epoch (a seeded subset).
    pub max_examples: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::projection()
    }
}

impl TrainConfig {
    /// Stage-1 schedule.
    pub fn projection() -> Self {
        Self {
            stage: Stage::Projection,
            epochs: 10,
            lr: 1e-4,
            lr_decay: 0.9,
            batch_size: 32,
            p_input: 0.2,
            p_attention: 0.0,
            p_radio: 0.0,
            weight_decay: 0.0,
            bins: DEFAULT_BINS,
            max_examples: None,
            seed: 0,
        }
    }

    /// Stage-2 schedule used with side information.
    pub fn lamar() -> Self {
        Self {
            stage: Stage::Gnn,
            epochs: 10,
            p_input: 0.7,
            p_attention: 0.7,
            p_radio: 0.7,
            weight_decay: 1e-4,
            ..Self::projection()
        }
    }

    /// Stage-2 schedule for visual-only re-ranking.
    pub fn msls() -> Self {
        Self {
            stage: Stage::Gnn,
            epochs: 5,
            p_input: 0.2,
            p_attention: 0.2,
            p_radio: 0.0,
            ..Self::projection()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        for (name, p) in [
            ("p_input", self.p_input),
            ("p_attention", self.p_attention),
            ("p_radio", self.p_radio),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.lr_decay > 0.0) {
            return fail(format!(
                "invalid learning rate {} / decay {}",
                self.lr, self.lr_decay
            ));
        }
        if self.batch_size == 0 || self.bins < 2 {
            return fail("batch size and bin count must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight decay must be non-negative".into());
        }
        Ok(())
    }

    /// Learning rate of epoch `e` (from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * libm::pow(self.lr_decay, epoch as f64)
    }
}

/// A database image used as a query, with its candidates and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: RetrievalContext,
    pub labels: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labeling {
    /// Positional affinity above 1/3.
    PosThreshold,
    /// The dataset's relevance labels.
    GroundTruth,
}

/// Examples from every record of `split`; candidates from the same session
/// are excluded at retrieval. Returns the examples and the number dropped for
/// having no positive.
pub fn make_examples<T: Real>(
    ds: &Dataset,
    index: &DescriptorIndex<T>,
    split: Split,
    k: usize,
    side: &SideInfoConfig,
    labeling: Labeling,
) -> Result<(Vec<TrainingExample>, usize)> {
    let mut out = Vec::new();
    let mut dropped = 0;
    for context in ds.initial_contexts(index, split, k)? {
        let labels = match labeling {
            Labeling::PosThreshold => {
                ds.positional_relevance(context.query, &context.candidates, &side.fov)?
            }
            Labeling::GroundTruth => {
                let rel = ds.labels.get(&context.query);
                context
                    .candidates
                    .iter()
                    .map(|c| rel.is_some_and(|r| r.contains(c)))
                    .collect()
            }
        };
        if labels.iter().any(|&l| l) {
            out.push(TrainingExample { context, labels });
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} training examples without positives");
    }
    Ok((out, dropped))
}

/// Projection-only configuration used in stage 1.
pub fn projection_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        gnn: false,
        input: InputMode::Projected,
        blocks: BlockConfig::VISUAL,
        ..cfg.clone()
    }
}

/// A freshly initialized `cfg` model whose projection is copied from a
/// trained stage-1 model.
pub fn with_projection<T: Real>(
    cfg: ModelConfig,
    stage1: &Model<T>,
    seed: u64,
) -> Result<Model<T>> {
    let mut model = Model::init(cfg, seed)?;
    match (model.net.projection(), stage1.net.projection()) {
        (Some(dst), Some(src)) => {
            let w = stage1.store.value(src).clone();
            let entry = model.store.entry_mut(dst);
            if entry.value.shape() != w.shape() {
                return Err(Error::shape("projection", w.shape(), entry.value.shape()));
            }
            entry.value = w;
        }
        (None, _) => {}
        (Some(_), None) => return Err(Error::Config("stage-1 model has no projection".into())),
    }
    Ok(model)
}

/// Per-context data that does not change between epochs.
struct Prepared<T> {
    input: crate::model::ContextInput<T>,
    /// Side blocks other than radio.
    fixed_side: Tensor2<f64>,
}

/// Everything needed to score contexts of one dataset with one model layout.
pub struct ContextBuilder<'a> {
    pub ds: &'a Dataset,
    pub side: &'a SideInfoConfig,
    pub l: usize,
    pub blocks: BlockConfig,
}

impl<'a> ContextBuilder<'a> {
    pub fn new(ds: &'a Dataset, side: &'a SideInfoConfig, cfg: &ModelConfig) -> Self {
        Self {
            ds,
            side,
            l: cfg.l,
            blocks: cfg.blocks,
        }
    }

    fn side_cfg(&self, radio: bool) -> SideInfoConfig {
        SideInfoConfig {
            blocks: BlockConfig {
                radio,
                ..self.blocks
            },
            ..*self.side
        }
    }

    fn prepare<T: Real>(&self, ctx: &RetrievalContext) -> Result<Prepared<T>> {
        let cfg = self.side_cfg(false);
        let fixed_side = side_affinity(&self.ds.nodes(ctx, &cfg), self.l, &cfg)?;
        let input = self
            .ds
            .context_input(ctx, &Tensor2::zeros(ctx.candidates.len() + 1, 0));
        Ok(Prepared { input, fixed_side })
    }

    fn side_block(
        &self,
        ctx: &RetrievalContext,
        fixed: &Tensor2<f64>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Tensor2<f64>> {
        if !self.blocks.radio {
            return Ok(fixed.clone());
        }
        let cfg = self.side_cfg(true);
        let nodes = match dropout {
            Some((p, rng)) if p > 0.0 => self.ds.nodes_with_dropout(ctx, &cfg, p, rng),
            _ => self.ds.nodes(ctx, &cfg),
        };
        let rad = radio_affinity(&nodes, self.l, self.blocks.query_radio, &self.side.radio)?;
        Tensor2::concat_cols(&[fixed, &rad])
    }

    /// Network input of a context in evaluation mode.
    pub fn input<T: Real>(&self, ctx: &RetrievalContext) -> Result<crate::model::ContextInput<T>> {
        let p = self.prepare::<T>(ctx)?;
        let side = self.side_block(ctx, &p.fixed_side, None)?;
        Ok(crate::model::ContextInput {
            side: side.cast(),
            ..p.input
        })
    }
}

/// Re-ranked candidate ids of every context.
pub fn rerank_contexts<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    side: &SideInfoConfig,
    contexts: &[RetrievalContext],
) -> Result<Vec<RetrievalContext>> {
    let builder = ContextBuilder::new(ds, side, model.config());
    contexts
        .iter()
        .map(|ctx| {
            let scores: Vec<f64> = model
                .scores(&builder.input(ctx)?)?
                .into_iter()
                .map(Real::as_f64)
                .collect();
            Ok(ctx.reordered(&crate::loss::rank_by_score(&scores), &scores))
        })
        .collect()
}

/// Validation data: contexts with the dataset's labels.
pub struct Validation<'a> {
    pub contexts: &'a [RetrievalContext],
    pub labels: &'a BTreeMap<u32, BTreeSet<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_map10: f64,
    pub examples: usize,
}

/// Validation mAP@10 of `model` on `val`.
pub fn validation_map10<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    side: &SideInfoConfig,
    val: &Validation<'_>,
) -> Result<f64> {
    let rankings = crate::retrieval::rankings(&rerank_contexts(model, ds, side, val.contexts)?);
    Ok(evaluate(&rankings, val.labels, &[10])?.map[0])
}

/// Trains `model` in place according to `cfg.stage` and leaves it at the
/// best validation epoch. `on_epoch` sees every epoch record as it is made.
pub fn train<T: Real>(
    model: &mut Model<T>,
    ds: &Dataset,
    side: &SideInfoConfig,
    examples: &[TrainingExample],
    val: &Validation<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    match cfg.stage {
        Stage::Projection => {
            if mcfg.gnn || mcfg.input != InputMode::Projected {
                return Err(Error::Config(
                    "stage projection trains a projection-only model".into(),
                ));
            }
            if model.net.projection().is_none() {
                return Err(Error::Config(
                    "stage projection needs a learned projection".into(),
                ));
            }
        }
        Stage::Gnn | Stage::Joint => {
            if !mcfg.gnn {
                return Err(Error::Config(format!(
                    "stage {:?} needs the attention layer",
                    cfg.stage
                )));
            }
        }
    }
    if let Some(w) = model.net.projection() {
        model.store.set_frozen(w, cfg.stage == Stage::Gnn);
    }
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }

    let builder = ContextBuilder::new(ds, side, &mcfg);
    let prepared: Vec<Prepared<T>> = examples
        .iter()
        .map(|e| builder.prepare(&e.context))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut best = (
        validation_map10(model, ds, side, val)?,
        usize::MAX,
        model.store.clone(),
    );
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let used = cfg.max_examples.map_or(order.len(), |m| m.min(order.len()));
        let mut total = 0.0;
        for batch in order[..used].chunks(cfg.batch_size) {
            model.store.zero_grad();
            for &i in batch {
                total += step_example(model, &builder, &examples[i], &prepared[i], cfg, &mut rng)?;
            }
            model
                .store
                .scale_grads(T::from_f64(1.0 / batch.len() as f64));
            adam.step(&mut model.store, lr)?;
        }
        let val_map10 = validation_map10(model, ds, side, val)?;
        let log = EpochLog {
            epoch,
            lr,
            train_loss: total / used as f64,
            val_map10,
        };
        on_epoch(&log);
        if best.1 == usize::MAX || val_map10 > best.0 {
            best = (val_map10, epoch, model.store.clone());
        }
        logs.push(log);
    }
    if best.1 != usize::MAX {
        model.store = best.2;
    }
    if let Some(w) = model.net.projection() {
        model.store.set_frozen(w, false);
    }
    Ok(TrainReport {
        epochs: logs,
        best_epoch: best.1.min(cfg.epochs.saturating_sub(1)),
        best_val_map10: best.0,
        examples: examples.len(),
    })
}

fn step_example<T: Real>(
    model: &mut Model<T>,
    builder: &ContextBuilder<'_>,
    ex: &TrainingExample,
    prep: &Prepared<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let side = builder.side_block(
        &ex.context,
        &prep.fixed_side,
        Some((cfg.p_radio, &mut *rng)),
    )?;
    let input = crate::model::ContextInput {
        descriptors: prep.input.descriptors.clone(),
        side: side.cast(),
    };
    let mut tape = GradTape::new();
    let mut noise = Noise {
        p_input: cfg.p_input,
        p_attention: cfg.p_attention,
        rng,
    };
    let scores = model
        .net
        .scores_on_tape(&model.store, &mut tape, &input, Some(&mut noise))?;
    let lv = quantized_ap_loss(tape.value(scores).data(), &ex.labels, cfg.bins)?;
    if !lv.value.as_f64().is_finite() {
        return Err(Error::NonFinite(format!(
            "loss of query {}",
            ex.context.query
        )));
    }
    let loss = tape.external_scalar(scores, lv.value, lv.grad)?;
    tape.backward(loss, &mut model.store)?;
    Ok(lv.value.as_f64())
}

/// Copies of the trainable tensors, for checking what training changed.
pub fn snapshot<T: Real>(store: &ParamStore<T>) -> Vec<Tensor2<T>> {
    store.entries().iter().map(|e| e.value.clone()).collect()
}
