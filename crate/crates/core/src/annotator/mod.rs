//! Success probabilities for sub-trajectories.
//!
//! Every backend answers one question per (segment, prompt): the probability
//! that the answer is "no". The two answers are combined into the Markov,
//! non-Markov and overall success probabilities stored per segment.

mod cache;
mod oracle;
mod remote;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::env::State;
use crate::error::{Result, SfbcError};
use crate::io;
use crate::sfo::{decompose, Segmentation};

pub use cache::{AnnotationCache, CacheKey};
pub use oracle::ScriptedOracle;
pub use remote::{
    extract_p_no, ChatTransport, EndpointConfig, HttpTransport, RemoteBackend, TransportError,
    MAX_FRAMES,
};

pub const DEFAULT_SUBSAMPLE: usize = 20;

pub const MARKOV_PROMPT: &str = "You are watching a video of a red stick. If the black dot is at the bottom of the stick, answer 'Y'. Otherwise, answer 'N'.";
pub const NON_MARKOV_PROMPT: &str = "You are watching a video of a red stick. If the stick has moved between sides of the screen (left to right or right to left), answer 'Y'. Otherwise, answer 'N'.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Markov,
    NonMarkov,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub markov_text: String,
    pub nonmarkov_text: String,
}

impl Default for PromptPair {
    fn default() -> Self {
        PromptPair {
            markov_text: MARKOV_PROMPT.into(),
            nonmarkov_text: NON_MARKOV_PROMPT.into(),
        }
    }
}

impl PromptPair {
    pub fn new(markov_text: impl Into<String>, nonmarkov_text: impl Into<String>) -> Result<Self> {
        let pair = PromptPair {
            markov_text: markov_text.into(),
            nonmarkov_text: nonmarkov_text.into(),
        };
        if pair.markov_text.trim().is_empty() || pair.nonmarkov_text.trim().is_empty() {
            return Err(SfbcError::InvalidArgument("prompts must be non-empty".into()));
        }
        Ok(pair)
    }

    pub fn text(&self, kind: PromptKind) -> &str {
        match kind {
            PromptKind::Markov => &self.markov_text,
            PromptKind::NonMarkov => &self.nonmarkov_text,
        }
    }
}

/// The three success probabilities of one segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub p_markov: f64,
    pub p_nonmarkov: f64,
    pub p_vlm: f64,
}

/// Turns the two "no" probabilities into success probabilities:
/// each prompt's success is `1 - P(no)` and the overall success is their sum
/// capped at one.
pub fn combine(p_no_markov: f64, p_no_nonmarkov: f64) -> Result<Scores> {
    for (name, p) in [("markov", p_no_markov), ("non-markov", p_no_nonmarkov)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SfbcError::InvalidArgument(format!(
                "{name} no-probability {p} outside [0, 1]"
            )));
        }
    }
    let p_markov = 1.0 - p_no_markov;
    let p_nonmarkov = 1.0 - p_no_nonmarkov;
    Ok(Scores {
        p_markov,
        p_nonmarkov,
        p_vlm: (p_markov + p_nonmarkov).min(1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub traj_id: u32,
    pub i: usize,
    pub p_markov: f64,
    pub p_nonmarkov: f64,
    pub p_vlm: f64,
    pub backend: String,
}

impl Annotation {
    pub fn new(traj_id: u32, i: usize, scores: Scores, backend: impl Into<String>) -> Self {
        Annotation {
            traj_id,
            i,
            p_markov: scores.p_markov,
            p_nonmarkov: scores.p_nonmarkov,
            p_vlm: scores.p_vlm,
            backend: backend.into(),
        }
    }

    /// Checks the range and the combination identity.
    pub fn is_consistent(&self) -> bool {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        in_unit(self.p_markov)
            && in_unit(self.p_nonmarkov)
            && in_unit(self.p_vlm)
            && self.p_vlm == (self.p_markov + self.p_nonmarkov).min(1.0)
    }
}

/// A source of "no" probabilities.
pub trait AnnotatorBackend: Sync {
    /// Stable identifier; part of the cache key.
    fn id(&self) -> String;

    /// Largest number of states a single query may carry.
    fn max_states(&self) -> Option<usize> {
        None
    }

    /// Probability of a "no" answer for the given subsampled states.
    fn score(&self, states: &[State], kind: PromptKind, prompt: &str) -> Result<f64>;
}

/// Keeps indices `0, stride, 2*stride, ...` below `len`.
pub fn subsample_indices(len: usize, stride: usize) -> Vec<usize> {
    (0..len).step_by(stride.max(1)).collect()
}

/// Smallest stride `>= subsample` that keeps a segment within `max_states`.
pub fn stride_for(segment_length: usize, subsample: usize, max_states: Option<usize>) -> usize {
    let mut stride = subsample.max(1);
    if let Some(cap) = max_states {
        while segment_length.div_ceil(stride) > cap {
            stride += 1;
        }
    }
    stride
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnFailure {
    /// Record the failure and continue with other segments.
    #[default]
    Skip,
    /// Stop at the first failed segment.
    Abort,
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub segment_length: usize,
    pub subsample: usize,
    pub concurrency: usize,
    pub on_failure: OnFailure,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            segment_length: crate::sfo::DEFAULT_SEGMENT_LENGTH,
            subsample: DEFAULT_SUBSAMPLE,
            concurrency: 4,
            on_failure: OnFailure::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedSegment {
    pub traj_id: u32,
    pub i: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct AnnotationRun {
    /// Sorted by `(traj_id, i)`.
    pub annotations: Vec<Annotation>,
    pub failures: Vec<FailedSegment>,
    pub stride: usize,
    pub cache_hits: usize,
    pub queries: usize,
}

/// Scores every segment of every trajectory with both prompts.
pub fn annotate_dataset(
    dataset: &Dataset,
    backend: &dyn AnnotatorBackend,
    prompts: &PromptPair,
    cache: &AnnotationCache,
    opts: &AnnotateOptions,
) -> Result<AnnotationRun> {
    let stride = stride_for(opts.segment_length, opts.subsample, backend.max_states());
    let backend_id = backend.id();
    let dataset_checksum = dataset.manifest.dataset_checksum().to_string();

    let mut jobs = Vec::new();
    for traj in &dataset.trajectories {
        for seg in decompose(traj, Segmentation::Length(opts.segment_length))? {
            let states: Vec<State> = subsample_indices(seg.len(), stride)
                .into_iter()
                .map(|j| seg.records[j].state)
                .collect();
            jobs.push((seg.traj_id, seg.index, states));
        }
    }

    let hits = AtomicUsize::new(0);
    let queries = AtomicUsize::new(0);
    let score_one = |traj_id: u32, i: usize, states: &[State], kind: PromptKind| -> Result<f64> {
        let key = CacheKey {
            dataset: dataset_checksum.clone(),
            traj_id,
            i,
            segment_length: opts.segment_length,
            kind,
            backend: backend_id.clone(),
            stride,
        };
        if let Some(p) = cache.get(&key) {
            hits.fetch_add(1, Ordering::Relaxed);
            return Ok(p);
        }
        queries.fetch_add(1, Ordering::Relaxed);
        let p = backend.score(states, kind, prompts.text(kind))?;
        cache.insert(key, p)?;
        Ok(p)
    };
    let annotate_one = |(traj_id, i, states): &(u32, usize, Vec<State>)| -> Result<Annotation> {
        let p_no_markov = score_one(*traj_id, *i, states, PromptKind::Markov)?;
        let p_no_nonmarkov = score_one(*traj_id, *i, states, PromptKind::NonMarkov)?;
        Ok(Annotation::new(
            *traj_id,
            *i,
            combine(p_no_markov, p_no_nonmarkov)?,
            backend_id.clone(),
        ))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency.max(1))
        .build()
        .map_err(|e| SfbcError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Annotation>> = pool.install(|| {
        jobs.par_iter()
            .map(annotate_one)
            .collect()
    });

    let mut annotations = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for ((traj_id, i, _), result) in jobs.iter().zip(results) {
        match result {
            Ok(a) => annotations.push(a),
            Err(e) => {
                if opts.on_failure == OnFailure::Abort {
                    return Err(e);
                }
                failures.push(FailedSegment {
                    traj_id: *traj_id,
                    i: *i,
                    error: e.to_string(),
                });
            }
        }
    }
    annotations.sort_by_key(|a| (a.traj_id, a.i));
    Ok(AnnotationRun {
        annotations,
        failures,
        stride,
        cache_hits: hits.into_inner(),
        queries: queries.into_inner(),
    })
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    io::write_jsonl(path, annotations)
}

/// Reads an annotation file, rejecting entries that break the probability identity.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let annotations: Vec<Annotation> = io::read_jsonl(path)?;
    if let Some(bad) = annotations.iter().find(|a| !a.is_consistent()) {
        return Err(SfbcError::Schema {
            path: path.to_path_buf(),
            detail: format!("inconsistent annotation {bad:?}"),
        });
    }
    Ok(annotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, DatasetConfig};
    use proptest::prelude::*;

    #[test]
    fn combine_examples() {
        let s = combine(1.0, 1.0).unwrap();
        assert_eq!(s.p_vlm, 0.0);

        let s = combine(0.3, 0.5).unwrap();
        assert!((s.p_markov - 0.7).abs() < 1e-15);
        assert_eq!(s.p_nonmarkov, 0.5);
        assert_eq!(s.p_vlm, 1.0);

        let s = combine(0.95, 0.95).unwrap();
        assert!((s.p_vlm - 0.1).abs() < 1e-15);
    }

    #[test]
    fn combine_rejects_out_of_range() {
        assert!(combine(-0.1, 0.5).is_err());
        assert!(combine(0.5, 1.01).is_err());
        assert!(combine(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn subsampling_default_settings() {
        assert_eq!(subsample_indices(100, 20), vec![0, 20, 40, 60, 80]);
        assert_eq!(stride_for(100, 20, Some(MAX_FRAMES)), 20);
        let stride = stride_for(600, 20, Some(MAX_FRAMES));
        assert!(subsample_indices(600, stride).len() <= MAX_FRAMES);
        assert_eq!(stride_for(600, 20, None), 20);
    }

    #[test]
    fn prompts_are_non_empty() {
        assert!(PromptPair::new("", "x").is_err());
        let p = PromptPair::default();
        assert!(p.text(PromptKind::Markov).contains("black dot"));
        assert!(p.text(PromptKind::NonMarkov).contains("between sides"));
    }

    fn small_dataset() -> Dataset {
        datagen::generate(&DatasetConfig {
            n_trajectories: 4,
            ..DatasetConfig::new(1)
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn annotation_counts_and_determinism() {
        let d = small_dataset();
        let run = |cache: &AnnotationCache| {
            annotate_dataset(&d, &ScriptedOracle, &PromptPair::default(), cache, &Default::default())
                .unwrap()
        };
        let a = run(&AnnotationCache::in_memory());
        assert_eq!(a.annotations.len(), 4 * 6);
        assert_eq!(a.stride, 20);
        assert!(a.annotations.iter().all(Annotation::is_consistent));
        let b = run(&AnnotationCache::in_memory());
        assert_eq!(a.annotations, b.annotations);
    }

    #[test]
    fn rerun_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let d = small_dataset();
        let opts = AnnotateOptions::default();
        let first = {
            let cache = AnnotationCache::open(&path).unwrap();
            annotate_dataset(&d, &ScriptedOracle, &PromptPair::default(), &cache, &opts).unwrap()
        };
        assert_eq!(first.queries, 48);
        let cache = AnnotationCache::open(&path).unwrap();
        let second =
            annotate_dataset(&d, &ScriptedOracle, &PromptPair::default(), &cache, &opts).unwrap();
        assert_eq!(second.queries, 0);
        assert_eq!(second.cache_hits, 48);
        assert_eq!(first.annotations, second.annotations);
    }

    struct FlakyBackend;

    impl AnnotatorBackend for FlakyBackend {
        fn id(&self) -> String {
            "flaky".into()
        }

        fn score(&self, states: &[State], _kind: PromptKind, _prompt: &str) -> Result<f64> {
            if states[0].theta > 0.0 {
                Err(SfbcError::Backend("synthetic outage".into()))
            } else {
                Ok(0.5)
            }
        }
    }

    #[test]
    fn failures_are_counted_or_abort() {
        let d = small_dataset();
        let cache = AnnotationCache::in_memory();
        let run = annotate_dataset(&d, &FlakyBackend, &PromptPair::default(), &cache, &Default::default())
            .unwrap();
        assert!(!run.failures.is_empty());
        assert_eq!(run.failures.len() + run.annotations.len(), 24);

        let abort = AnnotateOptions {
            on_failure: OnFailure::Abort,
            ..Default::default()
        };
        let cache = AnnotationCache::in_memory();
        assert!(annotate_dataset(&d, &FlakyBackend, &PromptPair::default(), &cache, &abort).is_err());
    }

    #[test]
    fn annotation_file_rejects_broken_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let mut a = Annotation::new(0, 0, combine(0.2, 0.9).unwrap(), "oracle");
        write_annotations(&path, std::slice::from_ref(&a)).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), vec![a.clone()]);
        a.p_vlm = 0.5;
        write_annotations(&path, &[a]).unwrap();
        assert!(read_annotations(&path).is_err());
    }

    proptest! {
        #[test]
        fn combination_identity(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let s = combine(a, b).unwrap();
            let ann = Annotation::new(0, 0, s, "x");
            prop_assert!(ann.is_consistent());
        }
    }
}
