//! Generation, training and re-ranking steps shared by the command line and
//! the tests.

use std::collections::{BTreeMap, BTreeSet};

use gcsa_core::affinity::{BlockConfig, SideInfoConfig};
use gcsa_core::dataset::{Dataset, Split};
use gcsa_core::metrics::{evaluate, MetricsReport};
use gcsa_core::model::Model;
use gcsa_core::rerank::{rerank, Method};
use gcsa_core::retrieval::{rankings, RetrievalContext};
use gcsa_core::synth::generate;
use gcsa_core::train::{
    self, make_examples, projection_config, with_projection, EpochLog, Stage, TrainConfig,
    TrainReport, Validation,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::{DatasetMeta, FORMAT_VERSION};

/// Queries handed to one worker at a time.
const CHUNK: usize = 16;

/// Synthetic dataset of `cfg` with its metadata.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Dataset, DatasetMeta)> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let world = generate(&cfg.world)?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        descriptor_dim: world.dataset.dim(),
        records: world.dataset.records.len(),
        registry: world.dataset.registry.clone(),
        world: Some(cfg.world.clone()),
        endpoints: world.endpoints.clone(),
        unlabeled: world.unlabeled.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    Ok((world.dataset, meta))
}

/// Initial top-K contexts of every image in `split`.
pub fn contexts(ds: &Dataset, split: Split, k: usize) -> Result<Vec<RetrievalContext>> {
    let (index, _) = ds.database_index::<f32>()?;
    Ok(ds.initial_contexts(&index, split, k)?)
}

/// Where training starts from.
#[derive(Default)]
pub struct Start<'a> {
    /// Stage-1 model whose projection seeds a gnn or joint run.
    pub projection: Option<&'a Model<f32>>,
    /// Parameters to continue from; the optimizer state starts fresh.
    pub resume: Option<Model<f32>>,
}

pub struct Trained {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub schedule: TrainConfig,
}

/// Runs one training stage on the database-as-query examples of `ds`,
/// selecting the epoch with the best mAP@10 on the validation split.
pub fn train_stage(
    ds: &Dataset,
    cfg: &RunConfig,
    stage: Stage,
    start: Start<'_>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let full = cfg.model_config(ds.dim());
    let (expected, schedule, blocks) = match stage {
        Stage::Projection => (
            projection_config(&full),
            cfg.stage1.clone(),
            BlockConfig::VISUAL,
        ),
        _ => (
            full.clone(),
            TrainConfig {
                stage,
                ..cfg.stage2.clone()
            },
            cfg.blocks,
        ),
    };
    let mut model = match (start.resume, stage, start.projection) {
        (Some(m), _, _) => {
            if m.config() != &expected {
                return Err(CliError::Usage(format!(
                    "checkpoint to resume has model {:?}, the configuration asks for {expected:?}",
                    m.config()
                )));
            }
            m
        }
        (None, Stage::Projection, _) => Model::init(expected.clone(), cfg.seed + 1)?,
        (None, _, Some(s1)) => with_projection(full, s1, cfg.seed + 2)?,
        (None, Stage::Gnn, None) => {
            return Err(CliError::Usage(
                "stage gnn needs a stage-1 (projection) checkpoint".into(),
            ))
        }
        (None, _, None) => Model::init(full, cfg.seed + 2)?,
    };
    let side = cfg.side(blocks);
    let (index, _) = ds.database_index::<f32>()?;
    let (examples, dropped) = make_examples(
        ds,
        &index,
        Split::Database,
        cfg.model.k,
        &side,
        cfg.labeling,
    )?;
    log::info!(
        "{} training examples, {dropped} without positives dropped",
        examples.len()
    );
    let val_contexts = ds.initial_contexts(&index, Split::Val, cfg.model.k)?;
    if val_contexts.is_empty() {
        return Err(CliError::Data(
            "the dataset has no validation images".into(),
        ));
    }
    let val = Validation {
        contexts: &val_contexts,
        labels: &ds.labels,
    };
    let report = train::train(&mut model, ds, &side, &examples, &val, &schedule, on_epoch)?;
    Ok(Trained {
        model,
        report,
        schedule,
    })
}

/// Side information a re-ranking run uses: the model's blocks for GCSA,
/// the configured ones otherwise.
pub fn side_for(cfg: &RunConfig, model: Option<&Model<f32>>) -> SideInfoConfig {
    cfg.side(model.map_or(cfg.blocks, |m| m.config().blocks))
}

/// Re-ranks `contexts` in chunks on the current rayon pool. The output
/// order and values do not depend on the pool size.
pub fn run_method(
    method: Method,
    ds: &Dataset,
    side: &SideInfoConfig,
    contexts: &[RetrievalContext],
    model: Option<&Model<f32>>,
) -> Result<Vec<RetrievalContext>> {
    let parts = contexts
        .par_chunks(CHUNK)
        .map(|chunk| rerank(method, ds, side, chunk, model))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn metrics(
    contexts: &[RetrievalContext],
    labels: &BTreeMap<u32, BTreeSet<u32>>,
    ks: &[usize],
) -> Result<MetricsReport> {
    Ok(evaluate(&rankings(contexts), labels, ks)?)
}

/// αQE exponent with the best validation mAP@10 over the configured grid;
/// the earlier grid value wins ties. A configured exponent is returned as is.
pub fn tune_alpha(ds: &Dataset, cfg: &RunConfig, val_contexts: &[RetrievalContext]) -> Result<f64> {
    if let Some(a) = cfg.baselines.alpha {
        return Ok(a);
    }
    let side = cfg.side(cfg.blocks);
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &alpha in &cfg.baselines.alpha_grid {
        let method = Method::AlphaQe {
            n_qe: cfg.baselines.n_qe,
            alpha,
        };
        let out = run_method(method, ds, &side, val_contexts, None)?;
        let score = metrics(&out, &ds.labels, &[10])?.map[0];
        log::info!("alphaqe alpha={alpha}: validation mAP@10 {score:.4}");
        if score > best.0 {
            best = (score, alpha);
        }
    }
    Ok(best.1)
}

/// Method names accepted on the command line.
pub const METHODS: [&str; 7] = [
    "gcsa",
    "none",
    "aqe",
    "alphaqe",
    "aqewd",
    "heading-filter",
    "radio-filter",
];

/// Method called `name`, with parameters from the configuration. αQE is
/// tuned on the validation split of `ds` unless the configuration fixes α.
pub fn resolve_method(name: &str, ds: &Dataset, cfg: &RunConfig) -> Result<Method> {
    let b = &cfg.baselines;
    Ok(match name {
        "gcsa" => Method::Gcsa,
        "none" => Method::None,
        "aqe" => Method::Aqe { n_qe: b.n_qe },
        "aqewd" => Method::AqeWd { n_qe: b.n_qe },
        "heading-filter" => Method::HeadingFilter {
            max_deg: b.heading_max_deg,
        },
        "radio-filter" => Method::RadioFilter {
            fraction: b.radio_fraction,
        },
        "alphaqe" => {
            let val = contexts(ds, Split::Val, cfg.model.k)?;
            Method::AlphaQe {
                n_qe: b.n_qe,
                alpha: tune_alpha(ds, cfg, &val)?,
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown method {other}; expected one of {}",
                METHODS.join(", ")
            )))
        }
    })
}
