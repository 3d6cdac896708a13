use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{Report, ReportRow, SeparationRow};
use super::{evaluate, EvalConfig, EvalReport, SeedResult, DEFAULT_SEEDS};
use crate::annotator::{
    annotate_dataset, AnnotateOptions, Annotation, AnnotationCache, AnnotatorBackend, PromptPair,
};
use crate::datagen::{self, Dataset, DatasetConfig, SegmentOrder, TrajectoryLabel};
use crate::error::{Result, SfbcError};
use crate::learner::{self, Method, TrainConfig};
use crate::rng;
use crate::sfo::{build_weighted_dataset, AnnotationIndex, FilterStats, WeightedSample};

/// Learner settings shared by every preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub sigma: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::new(Method::Sfbc, 0);
        TrainSettings {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            hidden: d.hidden,
            sigma: d.sigma,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            seed,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            hidden: self.hidden.clone(),
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproduceConfig {
    pub root_seed: u64,
    pub n_trajectories: usize,
    pub horizon: usize,
    pub n_seeds: usize,
    pub presets: Vec<Method>,
    pub train: TrainSettings,
    pub eval: EvalConfig,
    pub subsample: usize,
    pub concurrency: usize,
}

impl ReproduceConfig {
    pub fn new(root_seed: u64) -> Self {
        let d = DatasetConfig::new(root_seed);
        ReproduceConfig {
            root_seed,
            n_trajectories: d.n_trajectories,
            horizon: d.horizon,
            n_seeds: DEFAULT_SEEDS,
            presets: Method::ALL.to_vec(),
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
            subsample: crate::annotator::DEFAULT_SUBSAMPLE,
            concurrency: 4,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_trajectories: self.n_trajectories,
            horizon: self.horizon,
            ..DatasetConfig::new(rng::derive_seed(self.root_seed, "dataset", 0))
        }
    }
}

/// Mean combined score of sub-trajectories lying wholly inside each half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationGate {
    pub expert_mean: f64,
    pub failure_mean: f64,
    pub expert_segments: usize,
    pub failure_segments: usize,
}

impl SeparationGate {
    pub const EXPERT_MIN: f64 = 0.8;
    pub const FAILURE_MAX: f64 = 0.3;

    pub fn passed(&self) -> bool {
        self.expert_mean >= Self::EXPERT_MIN && self.failure_mean <= Self::FAILURE_MAX
    }
}

/// Scores annotations against the ground-truth sidecar. Segments straddling
/// the policy switch are ignored.
pub fn separation_gate(
    dataset: &Dataset,
    labels: &[TrajectoryLabel],
    annotations: &[Annotation],
    segment_length: usize,
) -> Result<SeparationGate> {
    let half = dataset.horizon() / 2;
    let order: BTreeMap<u32, SegmentOrder> =
        labels.iter().map(|l| (l.traj_id, l.segment_order)).collect();
    let (mut expert, mut failure) = (Vec::new(), Vec::new());
    for a in annotations {
        let segment_order = order.get(&a.traj_id).ok_or_else(|| {
            SfbcError::InvalidArgument(format!("no label for trajectory {}", a.traj_id))
        })?;
        let (start, end) = (a.i * segment_length, (a.i + 1) * segment_length);
        let first_half = if end <= half {
            true
        } else if start >= half {
            false
        } else {
            continue;
        };
        let is_expert = first_half == (*segment_order == SegmentOrder::ExpertFirst);
        if is_expert {
            expert.push(a.p_vlm);
        } else {
            failure.push(a.p_vlm);
        }
    }
    if expert.is_empty() || failure.is_empty() {
        return Err(SfbcError::EmptyDataset(
            "no interior segments on one side of the switch".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SeparationGate {
        expert_mean: mean(&expert),
        failure_mean: mean(&failure),
        expert_segments: expert.len(),
        failure_segments: failure.len(),
    })
}

/// Generates the dataset from the root seed, then runs [`reproduce_on`].
pub fn reproduce(
    cfg: &ReproduceConfig,
    backend: &dyn AnnotatorBackend,
    prompts: &PromptPair,
    cache: &AnnotationCache,
) -> Result<Report> {
    let generated = datagen::generate(&cfg.dataset_config())?;
    reproduce_on(
        cfg,
        &generated.dataset,
        Some(&generated.labels),
        backend,
        prompts,
        cache,
    )
}

struct AnnotationSet {
    index: AnnotationIndex,
    failed_trajectories: BTreeSet<u32>,
}

/// Annotates, filters, trains and evaluates every requested preset on a fixed
/// dataset. A failing preset records a diagnostic and leaves the other rows intact.
pub fn reproduce_on(
    cfg: &ReproduceConfig,
    dataset: &Dataset,
    labels: Option<&[TrajectoryLabel]>,
    backend: &dyn AnnotatorBackend,
    prompts: &PromptPair,
    cache: &AnnotationCache,
) -> Result<Report> {
    if cfg.n_seeds == 0 || cfg.presets.is_empty() {
        return Err(SfbcError::InvalidArgument("need at least one seed and preset".into()));
    }
    cfg.eval.validate()?;
    let horizon = dataset.horizon();
    let mut presets = cfg.presets.clone();
    presets.sort_by_key(|m| m.name());
    presets.dedup();

    let lengths: BTreeSet<usize> = presets
        .iter()
        .filter(|m| m.filter_config().needs_annotations())
        .map(|m| m.segment_length().resolve(horizon))
        .collect();
    let mut annotation_sets: BTreeMap<usize, std::result::Result<AnnotationSet, String>> =
        BTreeMap::new();
    let mut separation = Vec::new();
    for &k in &lengths {
        let opts = AnnotateOptions {
            segment_length: k,
            subsample: cfg.subsample,
            concurrency: cfg.concurrency,
            ..AnnotateOptions::default()
        };
        let outcome = annotate_dataset(dataset, backend, prompts, cache, &opts)
            .map_err(|e| e.to_string())
            .map(|run| {
                if let Some(labels) = labels {
                    if let Ok(gate) = separation_gate(dataset, labels, &run.annotations, k) {
                        separation.push(SeparationRow {
                            segment_length: k,
                            gate,
                        });
                    }
                }
                AnnotationSet {
                    failed_trajectories: run.failures.iter().map(|f| f.traj_id).collect(),
                    index: AnnotationIndex::new(run.annotations),
                }
            });
        annotation_sets.insert(k, outcome);
    }

    let mut rows = Vec::with_capacity(presets.len());
    let mut memo = BTreeMap::new();
    for method in presets {
        rows.push(run_preset(cfg, dataset, method, &annotation_sets, &mut memo));
    }
    Ok(Report {
        config: cfg.clone(),
        dataset_checksum: dataset.manifest.dataset_checksum().to_string(),
        backend: backend.id(),
        separation,
        rows,
    })
}

fn run_preset(
    cfg: &ReproduceConfig,
    dataset: &Dataset,
    method: Method,
    annotation_sets: &BTreeMap<usize, std::result::Result<AnnotationSet, String>>,
    memo: &mut BTreeMap<String, Vec<SeedResult>>,
) -> ReportRow {
    let filter = method.filter_config();
    let k = method.segment_length().resolve(dataset.horizon());
    let empty = AnnotationSet {
        index: AnnotationIndex::new(Vec::new()),
        failed_trajectories: BTreeSet::new(),
    };
    let set = if filter.needs_annotations() {
        match &annotation_sets[&k] {
            Ok(set) => set,
            Err(e) => return ReportRow::failed(method, k, format!("annotation: {e}")),
        }
    } else {
        &empty
    };

    let complete;
    let usable = if set.failed_trajectories.is_empty() {
        dataset
    } else {
        complete = Dataset {
            trajectories: dataset
                .trajectories
                .iter()
                .filter(|t| !set.failed_trajectories.contains(&t.id))
                .cloned()
                .collect(),
            manifest: dataset.manifest.clone(),
        };
        &complete
    };
    let weighted = match build_weighted_dataset(usable, &set.index, &filter, k) {
        Ok(w) => w,
        Err(e) => return ReportRow::failed(method, k, format!("filter: {e}")),
    };

    // Training ignores the preset label, so identical sample sets give identical seeds.
    let fingerprint = sample_fingerprint(&weighted.samples);
    if let Some(seeds) = memo.get(&fingerprint) {
        return finish_row(method, k, weighted.stats, set, seeds.clone());
    }
    let outcomes: Vec<Result<SeedResult>> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| {
            let train_seed = rng::derive_seed(cfg.root_seed, "train", s as u64);
            let eval_seed = rng::derive_seed(cfg.root_seed, "eval", s as u64);
            let params = learner::train(&weighted.samples, &cfg.train.config(method, train_seed))?;
            evaluate(&params, &cfg.eval, eval_seed, s)
        })
        .collect();
    let seeds = match outcomes.into_iter().collect::<Result<Vec<_>>>() {
        Ok(s) => s,
        Err(e) => return ReportRow::failed(method, k, format!("train/eval: {e}")),
    };
    memo.insert(fingerprint, seeds.clone());
    finish_row(method, k, weighted.stats, set, seeds)
}

fn finish_row(
    method: Method,
    k: usize,
    stats: FilterStats,
    set: &AnnotationSet,
    seeds: Vec<SeedResult>,
) -> ReportRow {
    match EvalReport::from_seeds(method, seeds) {
        Ok(report) => ReportRow {
            method,
            segment_length: k,
            stats: Some(stats),
            skipped_trajectories: set.failed_trajectories.len(),
            result: Ok(report),
        },
        Err(e) => ReportRow::failed(method, k, e.to_string()),
    }
}

fn sample_fingerprint(samples: &[WeightedSample]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for s in samples {
        for v in [s.state.theta, s.state.omega, s.action.torque, s.weight] {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
