//! Weighted behavior cloning.
//!
//! The policy is a deterministic MLP read as the mean of a Gaussian with fixed
//! standard deviation `sigma`, so the weighted negative log-likelihood reduces
//! (up to constants) to `weight * (a - mu(s))^2 / (2 sigma^2)`, averaged over
//! the batch.

mod adam;
mod mlp;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Policy, State};
use crate::error::{Result, SfbcError};
use crate::io;
use crate::rng;
use crate::sfo::{FilterConfig, WeightedSample, DEFAULT_SEGMENT_LENGTH};

pub use adam::{Adam, AdamConfig};
pub use mlp::{features, ForwardCache, Layer, LayerRecord, Mlp, INPUT_DIM};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const PARAMS_SCHEMA_VERSION: u32 = 1;
const DIVERGENCE_LOSS: f64 = 1e6;

/// Training recipe for each compared method and ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sfbc,
    BcNaive,
    VlmBcFull,
    NoFiltering,
    MarkovOnly,
    NoWeighting,
    NoRetrospective,
}

/// Segment length used upstream of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentLength {
    Fixed(usize),
    /// One segment spanning the whole trajectory.
    FullTrajectory,
}

impl SegmentLength {
    pub fn resolve(self, horizon: usize) -> usize {
        match self {
            SegmentLength::Fixed(k) => k,
            SegmentLength::FullTrajectory => horizon,
        }
    }
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sfbc,
        Method::BcNaive,
        Method::VlmBcFull,
        Method::NoFiltering,
        Method::MarkovOnly,
        Method::NoWeighting,
        Method::NoRetrospective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sfbc => "sfbc",
            Method::BcNaive => "bc_naive",
            Method::VlmBcFull => "vlm_bc_full",
            Method::NoFiltering => "no_filtering",
            Method::MarkovOnly => "markov_only",
            Method::NoWeighting => "no_weighting",
            Method::NoRetrospective => "no_retrospective",
        }
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Sfbc => "SF-BC",
            Method::BcNaive => "BC Naive",
            Method::VlmBcFull => "VLM BC (Full-Trajectory)",
            Method::NoFiltering => "No Filtering",
            Method::MarkovOnly => "Markov Prompt Only",
            Method::NoWeighting => "No Weighting",
            Method::NoRetrospective => "No Retrospective Filtering",
        }
    }

    pub fn filter_config(self) -> FilterConfig {
        let sfbc = FilterConfig::default();
        match self {
            Method::Sfbc | Method::VlmBcFull => sfbc,
            Method::BcNaive => FilterConfig {
                filtering_enabled: false,
                retrospective: false,
                use_weighting: false,
                ..sfbc
            },
            Method::NoFiltering => FilterConfig {
                filtering_enabled: false,
                ..sfbc
            },
            Method::MarkovOnly => FilterConfig {
                markov_only: true,
                ..sfbc
            },
            Method::NoWeighting => FilterConfig {
                use_weighting: false,
                ..sfbc
            },
            Method::NoRetrospective => FilterConfig {
                retrospective: false,
                ..sfbc
            },
        }
    }

    pub fn segment_length(self) -> SegmentLength {
        match self {
            Method::BcNaive | Method::VlmBcFull => SegmentLength::FullTrajectory,
            _ => SegmentLength::Fixed(DEFAULT_SEGMENT_LENGTH),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SfbcError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SfbcError::InvalidArgument(format!("unknown method preset '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub sigma: f64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            seed,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 50,
            hidden: vec![256, 256],
            sigma: DEFAULT_SIGMA,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SfbcError::InvalidArgument(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.sigma > 0.0) {
            return Err(SfbcError::InvalidArgument(
                "learning rate and sigma must be positive".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(SfbcError::InvalidArgument(format!(
                "invalid hidden sizes {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

/// Trained network plus the provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub net: Mlp,
    pub config: TrainConfig,
    pub sample_count: usize,
    /// Loss over the full dataset before the first update.
    pub initial_loss: f64,
    /// Mean per-sample training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

impl PolicyParams {
    pub fn act(&self, s: &State) -> Action {
        self.net.act(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ParamsFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ParamsFile = io::read_json(path)?;
        if file.schema_version != PARAMS_SCHEMA_VERSION {
            return Err(SfbcError::Schema {
                path: path.to_path_buf(),
                detail: format!(
                    "schema version {} (expected {PARAMS_SCHEMA_VERSION})",
                    file.schema_version
                ),
            });
        }
        let layers = file
            .layers
            .iter()
            .map(Layer::try_from)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| SfbcError::Schema {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        Ok(PolicyParams {
            net: Mlp { layers },
            config: file.config,
            sample_count: file.sample_count,
            initial_loss: file.initial_loss,
            loss_curve: file.loss_curve,
        })
    }

    /// `epoch,mean_loss` with epoch 0 holding the pre-training loss.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        out.push_str(&format!("0,{}\n", self.initial_loss));
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

impl Policy for PolicyParams {
    fn act(&self, state: &State, _rng: &mut dyn rand::RngCore) -> Action {
        self.net.act(state)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    schema_version: u32,
    config: TrainConfig,
    sample_count: usize,
    initial_loss: f64,
    loss_curve: Vec<f64>,
    layers: Vec<LayerRecord>,
}

impl From<&PolicyParams> for ParamsFile {
    fn from(p: &PolicyParams) -> Self {
        ParamsFile {
            schema_version: PARAMS_SCHEMA_VERSION,
            config: p.config.clone(),
            sample_count: p.sample_count,
            initial_loss: p.initial_loss,
            loss_curve: p.loss_curve.clone(),
            layers: p.net.layers.iter().map(LayerRecord::from).collect(),
        }
    }
}

/// Column-wise view of weighted samples ready for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub target: Array1<f64>,
    pub weight: Array1<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[WeightedSample]) -> Self {
        Batch {
            x: features(samples.iter().map(|s| &s.state)),
            target: samples.iter().map(|s| s.action.torque).collect(),
            weight: samples.iter().map(|s| s.weight).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            x: self.x.select(Axis(0), rows),
            target: self.target.select(Axis(0), rows),
            weight: self.weight.select(Axis(0), rows),
        }
    }
}

/// Weighted Gaussian-surrogate loss and its gradient with respect to every parameter.
pub fn loss(net: &Mlp, batch: &Batch, sigma: f64) -> Result<(f64, Mlp)> {
    if batch.is_empty() {
        return Err(SfbcError::InvalidArgument("empty batch".into()));
    }
    if let Some(w) = batch.weight.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(SfbcError::InvalidArgument(format!("sample weight {w} outside [0, 1]")));
    }
    let (value, grads) = loss_unchecked(net, batch, sigma);
    if !value.is_finite() {
        return Err(SfbcError::NonFinite {
            context: "training loss",
            detail: value.to_string(),
        });
    }
    Ok((value, grads))
}

fn loss_unchecked(net: &Mlp, batch: &Batch, sigma: f64) -> (f64, Mlp) {
    let cache = net.forward(batch.x.view());
    let n = batch.len() as f64;
    let var = sigma * sigma;
    let residual = &cache.output - &batch.target;
    let weighted = &residual * &batch.weight;
    let value = (&weighted * &residual).sum() / (2.0 * var * n);
    let d_output = weighted / (var * n);
    (value, net.backward(&cache, &d_output))
}

/// Trains a fresh network on weighted samples with minibatch Adam.
pub fn train(samples: &[WeightedSample], cfg: &TrainConfig) -> Result<PolicyParams> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SfbcError::EmptyDataset("no training samples".into()));
    }
    let data = Batch::from_samples(samples);
    if let Some(w) = data.weight.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(SfbcError::InvalidArgument(format!("sample weight {w} outside [0, 1]")));
    }

    let mut net = Mlp::init(&cfg.hidden, &mut rng::stream(cfg.seed, "init", 0));
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle", 0);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &net,
    );

    let initial_loss = full_loss(&net, &data, cfg.sigma);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = data.select(rows);
            let (value, grads) = loss_unchecked(&net, &batch, cfg.sigma);
            if !value.is_finite() || value > DIVERGENCE_LOSS {
                return Err(SfbcError::Diverged { epoch, loss: value });
            }
            total += value * rows.len() as f64;
            adam.step(&mut net, &grads);
        }
        let mean = total / data.len() as f64;
        if !net.is_finite() {
            return Err(SfbcError::Diverged { epoch, loss: mean });
        }
        loss_curve.push(mean);
    }

    Ok(PolicyParams {
        net,
        config: cfg.clone(),
        sample_count: samples.len(),
        initial_loss,
        loss_curve,
    })
}

/// Mean loss over a whole dataset, evaluated in chunks.
pub fn full_loss(net: &Mlp, data: &Batch, sigma: f64) -> f64 {
    const CHUNK: usize = 4096;
    let mut total = 0.0;
    let var = sigma * sigma;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let x = data.x.slice(ndarray::s![start..end, ..]);
        let out = net.forward(x).output;
        for (j, mu) in out.iter().enumerate() {
            let r = mu - data.target[start + j];
            total += data.weight[start + j] * r * r / (2.0 * var);
        }
    }
    total / data.len() as f64
}
