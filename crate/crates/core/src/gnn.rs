//! Message-passing GNN ensemble for multi-task fuel property prediction.
//!
//! Each layer updates node states as
//! `h_v' = act(h_v · W_self + Σ_{u ∈ N(v)} h_u · W_nbr)`; the molecular
//! fingerprint is the sum of final node states, and a two-layer MLP maps it to
//! standardized (RON, MON, DCN) outputs. Gradients are computed analytically.

use crate::molgraph::{MolecularGraph, ATOM_FEATURE_DIM};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_TASKS: usize = 3;
pub const TASK_NAMES: [&str; NUM_TASKS] = ["ron", "mon", "dcn"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GnnError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ensemble has no models")]
    EmptyEnsemble,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("sample {index} has no labels")]
    MissingLabels { index: usize },
    #[error("non-finite loss in model {model} at epoch {epoch}")]
    NonFiniteLoss { model: usize, epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each graph-convolution layer; the last one is the
    /// fingerprint dimension.
    pub layer_dims: Vec<usize>,
    pub readout_hidden: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: ATOM_FEATURE_DIM,
            layer_dims: vec![32, 32, 32],
            readout_hidden: 16,
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    pub fn fingerprint_dim(&self) -> usize {
        *self.layer_dims.last().unwrap_or(&self.input_dim)
    }
}

/// Graph-convolution layer weights, both `d_in × d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnLayer {
    pub self_weight: DMatrix<f64>,
    pub neighbor_weight: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub hidden_weight: DMatrix<f64>,
    pub hidden_bias: DMatrix<f64>,
    pub output_weight: DMatrix<f64>,
    pub output_bias: DMatrix<f64>,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub layers: Vec<GnnLayer>,
    pub readout: Readout,
}

impl GnnParams {
    fn zeros_like(other: &GnnParams) -> GnnParams {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        GnnParams {
            layers: other
                .layers
                .iter()
                .map(|l| GnnLayer {
                    self_weight: z(&l.self_weight),
                    neighbor_weight: z(&l.neighbor_weight),
                })
                .collect(),
            readout: Readout {
                hidden_weight: z(&other.readout.hidden_weight),
                hidden_bias: z(&other.readout.hidden_bias),
                output_weight: z(&other.readout.output_weight),
                output_bias: z(&other.readout.output_bias),
            },
        }
    }

    /// Tensors in a fixed order: per layer (self, neighbor), then readout.
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.self_weight);
            v.push(&l.neighbor_weight);
        }
        let r = &self.readout;
        v.extend([&r.hidden_weight, &r.hidden_bias, &r.output_weight, &r.output_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.self_weight);
            v.push(&mut l.neighbor_weight);
        }
        let r = &mut self.readout;
        v.extend([
            &mut r.hidden_weight,
            &mut r.hidden_bias,
            &mut r.output_weight,
            &mut r.output_bias,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Per-task affine map between standardized network outputs and property
/// units: `property = output · scale + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub offset: [f64; NUM_TASKS],
    pub scale: [f64; NUM_TASKS],
}

impl Default for TargetScaling {
    fn default() -> Self {
        TargetScaling {
            offset: [0.0; NUM_TASKS],
            scale: [1.0; NUM_TASKS],
        }
    }
}

impl TargetScaling {
    /// Mean and population standard deviation of the present labels per task.
    pub fn fit(labels: &[Labels]) -> Self {
        let mut s = TargetScaling::default();
        for t in 0..NUM_TASKS {
            let vals: Vec<f64> = labels.iter().filter_map(|l| l.0[t]).collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            s.offset[t] = mean;
            s.scale[t] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        s
    }
}

/// Optional labels in task order (RON, MON, DCN).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Labels(pub [Option<f64>; NUM_TASKS]);

impl Labels {
    pub fn new(ron: Option<f64>, mon: Option<f64>, dcn: Option<f64>) -> Self {
        Labels([ron, mon, dcn])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|x| x.is_some()).count()
    }
}

/// Rounds to a multiple of 2^-32 so that sums and differences of predictions
/// below 2^20 in magnitude are exact in f64.
fn quantize(x: f64) -> f64 {
    const Q: f64 = 4_294_967_296.0;
    (x * Q).round() / Q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyPrediction {
    pub ron: f64,
    pub mon: f64,
    pub dcn: f64,
    pub os: f64,
}

impl PropertyPrediction {
    pub fn new(ron: f64, mon: f64, dcn: f64) -> Self {
        let (ron, mon, dcn) = (quantize(ron), quantize(mon), quantize(dcn));
        PropertyPrediction {
            ron,
            mon,
            dcn,
            os: ron - mon,
        }
    }

    /// Design objective RON + OS.
    pub fn score(&self) -> f64 {
        2.0 * self.ron - self.mon
    }
}

/// Sum-pooled node states of the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(pub Vec<f64>);

/// Graph inputs in matrix form: node features (`n × d_in`) and adjacency.
#[derive(Debug, Clone)]
pub struct GraphTensors {
    features: DMatrix<f64>,
    adjacency: DMatrix<f64>,
}

impl GraphTensors {
    pub fn from_graph(g: &MolecularGraph) -> Self {
        let n = g.num_atoms();
        let feats = g.atom_features();
        let features = DMatrix::from_fn(n, ATOM_FEATURE_DIM, |i, j| feats[i][j]);
        let mut adjacency = DMatrix::zeros(n, n);
        for b in g.bonds() {
            adjacency[(b.u, b.v)] = 1.0;
            adjacency[(b.v, b.u)] = 1.0;
        }
        GraphTensors {
            features,
            adjacency,
        }
    }

    /// Raw tensors, for callers that supply their own features.
    pub fn from_parts(features: DMatrix<f64>, adjacency: DMatrix<f64>) -> Self {
        GraphTensors {
            features,
            adjacency,
        }
    }
}

struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    aggregated: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    fingerprint: DMatrix<f64>,
    hidden_pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
    output: DMatrix<f64>,
}

/// A single GNN with its target scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gnn {
    pub architecture: Architecture,
    pub params: GnnParams,
    pub scaling: TargetScaling,
    pub seed: u64,
}

impl Gnn {
    /// Uniform initialization in `±1/sqrt(fan_in)`; biases start at zero.
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let limit = 1.0 / (rows as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
        };
        let mut layers = Vec::new();
        let mut d_in = architecture.input_dim;
        for &d_out in &architecture.layer_dims {
            layers.push(GnnLayer {
                self_weight: init(d_in, d_out),
                neighbor_weight: init(d_in, d_out),
            });
            d_in = d_out;
        }
        let readout = Readout {
            hidden_weight: init(d_in, architecture.readout_hidden),
            hidden_bias: DMatrix::zeros(1, architecture.readout_hidden),
            output_weight: init(architecture.readout_hidden, NUM_TASKS),
            output_bias: DMatrix::zeros(1, NUM_TASKS),
        };
        Gnn {
            architecture,
            params: GnnParams { layers, readout },
            scaling: TargetScaling::default(),
            seed,
        }
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(architecture: Architecture) -> Self {
        let mut g = Gnn::new(architecture, 0);
        for m in g.params.tensors_mut() {
            m.fill(0.0);
        }
        g
    }

    fn run(&self, x: &GraphTensors) -> Result<ForwardCache, GnnError> {
        if x.features.ncols() != self.architecture.input_dim {
            return Err(GnnError::DimensionMismatch {
                expected: self.architecture.input_dim,
                got: x.features.ncols(),
            });
        }
        let act = self.architecture.activation;
        let mut h = x.features.clone();
        let mut inputs = Vec::new();
        let mut aggregated = Vec::new();
        let mut pre = Vec::new();
        for layer in &self.params.layers {
            let agg = &x.adjacency * &h;
            let p = &h * &layer.self_weight + &agg * &layer.neighbor_weight;
            let next = p.map(|v| act.apply(v));
            inputs.push(h);
            aggregated.push(agg);
            pre.push(p);
            h = next;
        }
        let fingerprint = DMatrix::from_fn(1, h.ncols(), |_, j| h.column(j).sum());
        let r = &self.params.readout;
        let hidden_pre = &fingerprint * &r.hidden_weight + &r.hidden_bias;
        let hidden = hidden_pre.map(|v| act.apply(v));
        let output = &hidden * &r.output_weight + &r.output_bias;
        Ok(ForwardCache {
            inputs,
            aggregated,
            pre,
            fingerprint,
            hidden_pre,
            hidden,
            output,
        })
    }

    /// Standardized outputs (before target scaling).
    pub fn raw_output(&self, x: &GraphTensors) -> Result<[f64; NUM_TASKS], GnnError> {
        let c = self.run(x)?;
        Ok([c.output[0], c.output[1], c.output[2]])
    }

    pub fn forward_tensors(&self, x: &GraphTensors) -> Result<(Fingerprint, PropertyPrediction), GnnError> {
        let c = self.run(x)?;
        let s = &self.scaling;
        let prop = |t: usize| c.output[t] * s.scale[t] + s.offset[t];
        Ok((
            Fingerprint(c.fingerprint.iter().copied().collect()),
            PropertyPrediction::new(prop(0), prop(1), prop(2)),
        ))
    }

    pub fn forward(&self, g: &MolecularGraph) -> Result<(Fingerprint, PropertyPrediction), GnnError> {
        self.forward_tensors(&GraphTensors::from_graph(g))
    }

    /// Squared error over present tasks in standardized units, summed (not
    /// averaged), with gradients accumulated into `grad` scaled by `weight`.
    fn accumulate(
        &self,
        x: &GraphTensors,
        labels: &Labels,
        weight: f64,
        grad: &mut GnnParams,
    ) -> Result<f64, GnnError> {
        let c = self.run(x)?;
        let act = self.architecture.activation;
        let mut loss = 0.0;
        let mut d_out = DMatrix::zeros(1, NUM_TASKS);
        for t in 0..NUM_TASKS {
            if let Some(y) = labels.0[t] {
                let target = (y - self.scaling.offset[t]) / self.scaling.scale[t];
                let e = c.output[t] - target;
                loss += e * e;
                d_out[t] = 2.0 * e * weight;
            }
        }
        let r = &self.params.readout;
        grad.readout.output_weight += c.hidden.transpose() * &d_out;
        grad.readout.output_bias += &d_out;
        let d_hidden = &d_out * r.output_weight.transpose();
        let d_hidden_pre = d_hidden.zip_map(&c.hidden_pre, |d, p| d * act.derivative(p));
        grad.readout.hidden_weight += c.fingerprint.transpose() * &d_hidden_pre;
        grad.readout.hidden_bias += &d_hidden_pre;
        let d_fp = &d_hidden_pre * r.hidden_weight.transpose();

        let n = x.features.nrows();
        let mut d_h = DMatrix::from_fn(n, d_fp.ncols(), |_, j| d_fp[j]);
        for l in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[l];
            let d_pre = d_h.zip_map(&c.pre[l], |d, p| d * act.derivative(p));
            grad.layers[l].self_weight += c.inputs[l].transpose() * &d_pre;
            grad.layers[l].neighbor_weight += c.aggregated[l].transpose() * &d_pre;
            if l > 0 {
                d_h = &d_pre * layer.self_weight.transpose()
                    + &x.adjacency * (&d_pre * layer.neighbor_weight.transpose());
            }
        }
        Ok(loss * weight)
    }

    /// Masked mean squared error over all present labels and its gradient.
    pub fn loss_and_gradient(&self, data: &[(GraphTensors, Labels)]) -> Result<(f64, GnnParams), GnnError> {
        let present: usize = data.iter().map(|(_, l)| l.count()).sum();
        let mut grad = GnnParams::zeros_like(&self.params);
        if present == 0 {
            return Ok((0.0, grad));
        }
        let w = 1.0 / present as f64;
        let mut loss = 0.0;
        for (x, labels) in data {
            loss += self.accumulate(x, labels, w, &mut grad)?;
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, data: &[(GraphTensors, Labels)]) -> Result<f64, GnnError> {
        let present: usize = data.iter().map(|(_, l)| l.count()).sum();
        if present == 0 {
            return Ok(0.0);
        }
        let mut loss = 0.0;
        for (x, labels) in data {
            let out = self.raw_output(x)?;
            for t in 0..NUM_TASKS {
                if let Some(y) = labels.0[t] {
                    let target = (y - self.scaling.offset[t]) / self.scaling.scale[t];
                    loss += (out[t] - target).powi(2);
                }
            }
        }
        Ok(loss / present as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Train each member on a bootstrap resample of the data.
    pub bootstrap: bool,
    /// Samples per Adam step; `None` is full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bootstrap: true,
            batch_size: Some(10),
            seed: 0,
        }
    }
}

/// Per-model loss curve, one entry per epoch (mean of the batch losses
/// evaluated before each update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<Vec<f64>>,
    pub bootstrap_seeds: Vec<u64>,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn adam_update(params: &mut GnnParams, grad: &GnnParams, m: &mut GnnParams, v: &mut GnnParams, cfg: &TrainConfig, t: i32) {
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (mm, vv)) in params
        .tensors_mut()
        .into_iter()
        .zip(grad.tensors())
        .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()))
    {
        for i in 0..p.len() {
            mm[i] = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * g[i];
            vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = mm[i] / c1;
            let v_hat = vv[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Adam on one model. Target scaling is refit to `data` first.
pub fn train_model(
    model: &mut Gnn,
    data: &[(GraphTensors, Labels)],
    cfg: &TrainConfig,
    model_index: usize,
) -> Result<Vec<f64>, GnnError> {
    if data.is_empty() {
        return Err(GnnError::EmptyDataset);
    }
    let labels: Vec<Labels> = data.iter().map(|(_, l)| *l).collect();
    model.scaling = TargetScaling::fit(&labels);
    let mut m = GnnParams::zeros_like(&model.params);
    let mut v = GnnParams::zeros_like(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ model.seed, 0x5348_5546));
    let batch = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        if batch < data.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, grad) = if batch == data.len() {
                model.loss_and_gradient(data)?
            } else {
                let part: Vec<(GraphTensors, Labels)> = chunk.iter().map(|&i| data[i].clone()).collect();
                model.loss_and_gradient(&part)?
            };
            if !loss.is_finite() || !grad.is_finite() {
                return Err(GnnError::NonFiniteLoss {
                    model: model_index,
                    epoch,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
            adam_update(&mut model.params, &grad, &mut m, &mut v, cfg, step);
        }
        history.push(epoch_loss / data.len() as f64);
    }
    if !model.params.is_finite() {
        return Err(GnnError::NonFiniteLoss {
            model: model_index,
            epoch: cfg.epochs,
        });
    }
    Ok(history)
}

/// K independently initialized GNNs whose predictions are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnEnsemble {
    pub models: Vec<Gnn>,
}

impl GnnEnsemble {
    pub fn new(architecture: Architecture, size: usize, seed: u64) -> Self {
        GnnEnsemble {
            models: (0..size)
                .map(|k| Gnn::new(architecture.clone(), mix_seed(seed, k as u64)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn fingerprint_dim(&self) -> Option<usize> {
        self.models.first().map(|m| m.architecture.fingerprint_dim())
    }

    /// Fingerprint and prediction from every member.
    pub fn forward_all(&self, g: &MolecularGraph) -> Result<Vec<(Fingerprint, PropertyPrediction)>, GnnError> {
        let x = GraphTensors::from_graph(g);
        self.models.iter().map(|m| m.forward_tensors(&x)).collect()
    }

    pub fn predict(&self, g: &MolecularGraph) -> Result<PropertyPrediction, GnnError> {
        average(&self.forward_all(g)?.into_iter().map(|(_, p)| p).collect::<Vec<_>>())
    }

    /// Trains every member, in parallel, on its own bootstrap resample.
    pub fn train(&mut self, data: &[(MolecularGraph, Labels)], cfg: &TrainConfig) -> Result<TrainReport, GnnError> {
        if data.is_empty() {
            return Err(GnnError::EmptyDataset);
        }
        if self.models.is_empty() {
            return Err(GnnError::EmptyEnsemble);
        }
        if let Some(index) = data.iter().position(|(_, l)| l.count() == 0) {
            return Err(GnnError::MissingLabels { index });
        }
        let tensors: Vec<(GraphTensors, Labels)> = data
            .iter()
            .map(|(g, l)| (GraphTensors::from_graph(g), *l))
            .collect();
        let seeds: Vec<u64> = (0..self.models.len())
            .map(|k| mix_seed(cfg.seed, k as u64 + 1))
            .collect();
        let results: Vec<Result<Vec<f64>, GnnError>> = self
            .models
            .par_iter_mut()
            .zip(seeds.par_iter())
            .enumerate()
            .map(|(k, (model, &seed))| {
                let sample: Vec<(GraphTensors, Labels)> = if cfg.bootstrap {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..tensors.len())
                        .map(|_| tensors[rng.random_range(0..tensors.len())].clone())
                        .collect()
                } else {
                    tensors.clone()
                };
                train_model(model, &sample, cfg, k)
            })
            .collect();
        let loss_history = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(TrainReport {
            loss_history,
            bootstrap_seeds: if cfg.bootstrap { seeds } else { Vec::new() },
        })
    }
}

/// Element-wise mean of member predictions; OS is recomputed from the means.
pub fn average(preds: &[PropertyPrediction]) -> Result<PropertyPrediction, GnnError> {
    if preds.is_empty() {
        return Err(GnnError::EmptyEnsemble);
    }
    let k = preds.len() as f64;
    let mean = |f: fn(&PropertyPrediction) -> f64| preds.iter().map(f).sum::<f64>() / k;
    Ok(PropertyPrediction::new(
        mean(|p| p.ron),
        mean(|p| p.mon),
        mean(|p| p.dcn),
    ))
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub params_checked: usize,
}

/// Denominator floor for the relative error, below which differences are
/// effectively absolute.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences (step `1e-5`) against the analytic gradient of
/// the masked loss for a single molecule with all three labels set.
pub fn gradient_check(model: &Gnn, g: &MolecularGraph, labels: Labels) -> Result<GradientCheck, GnnError> {
    const STEP: f64 = 1e-5;
    let data = vec![(GraphTensors::from_graph(g), labels)];
    let (_, analytic) = model.loss_and_gradient(&data)?;
    let analytic: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|m| m.iter().copied().collect::<Vec<_>>())
        .collect();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_tensors = probe.params.tensors().len();
    for ti in 0..n_tensors {
        let len = probe.params.tensors()[ti].len();
        for i in 0..len {
            let orig = probe.params.tensors()[ti][i];
            probe.params.tensors_mut()[ti][i] = orig + STEP;
            let up = probe.loss(&data)?;
            probe.params.tensors_mut()[ti][i] = orig - STEP;
            let down = probe.loss(&data)?;
            probe.params.tensors_mut()[ti][i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff = (a - n).abs();
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / a.abs().max(n.abs()).max(GRADIENT_CHECK_FLOOR));
    }
    Ok(GradientCheck {
        max_relative_error: max_rel,
        max_abs_error: max_abs,
        params_checked: analytic.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    fn mol(s: &str) -> MolecularGraph {
        parse_smiles(s).unwrap()
    }

    #[test]
    fn zero_weights_give_bias_image() {
        let mut m = Gnn::zeroed(Architecture::default());
        m.params.readout.output_bias[0] = 1.5;
        m.params.readout.output_bias[1] = -0.25;
        m.params.readout.output_bias[2] = 3.0;
        let (fp, p) = m.forward(&mol("COC(C)(C)C")).unwrap();
        assert!(fp.0.iter().all(|&x| x == 0.0));
        assert_eq!((p.ron, p.mon, p.dcn), (1.5, -0.25, 3.0));
        assert_eq!(p.os, 1.75);
    }

    #[test]
    fn single_atom_identity_layer() {
        let arch = Architecture {
            layer_dims: vec![4],
            ..Architecture::default()
        };
        let mut m = Gnn::zeroed(arch);
        m.params.layers[0].self_weight = DMatrix::identity(4, 4);
        let (fp, _) = m.forward(&mol("C")).unwrap();
        assert_eq!(fp.0, vec![1.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn feature_dimension_checked() {
        let m = Gnn::new(Architecture::default(), 1);
        let x = GraphTensors::from_parts(DMatrix::zeros(2, 3), DMatrix::zeros(2, 2));
        assert_eq!(
            m.forward_tensors(&x).unwrap_err(),
            GnnError::DimensionMismatch { expected: 4, got: 3 }
        );
    }

    #[test]
    fn ensemble_mean_of_two() {
        let a = PropertyPrediction::new(100.0, 90.0, 0.0);
        let b = PropertyPrediction::new(110.0, 100.0, 0.0);
        let m = average(&[a, b]).unwrap();
        assert_eq!((m.ron, m.mon, m.os), (105.0, 95.0, 10.0));
        assert_eq!(average(&[]), Err(GnnError::EmptyEnsemble));
    }

    #[test]
    fn single_member_ensemble_matches_forward() {
        let e = GnnEnsemble::new(Architecture::default(), 1, 9);
        let g = mol("CC(C)(C)C=O");
        assert_eq!(e.predict(&g).unwrap(), e.models[0].forward(&g).unwrap().1);
    }

    #[test]
    fn memorizes_single_label() {
        let mut e = GnnEnsemble::new(Architecture::default(), 1, 4);
        let data = vec![(mol("COC(C)(C)C"), Labels::new(Some(118.0), None, None))];
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 1e-2,
            bootstrap: false,
            ..TrainConfig::default()
        };
        let report = e.train(&data, &cfg).unwrap();
        assert!(*report.loss_history[0].last().unwrap() < 1e-4);
        let p = e.predict(&data[0].0).unwrap();
        assert!((p.ron - 118.0).abs() < 1e-2, "{}", p.ron);
    }

    #[test]
    fn masked_task_gets_no_gradient() {
        let m = Gnn::new(Architecture::default(), 11);
        let data = vec![(
            GraphTensors::from_graph(&mol("CCO")),
            Labels::new(Some(1.0), None, None),
        )];
        let (_, g) = m.loss_and_gradient(&data).unwrap();
        for j in 0..16 {
            assert_eq!(g.readout.output_weight[(j, 2)], 0.0);
            assert_eq!(g.readout.output_weight[(j, 1)], 0.0);
        }
        assert_eq!(g.readout.output_bias[2], 0.0);
        assert!(g.readout.output_bias[0] != 0.0);
    }

    #[test]
    fn rejects_unlabeled_and_empty_data() {
        let mut e = GnnEnsemble::new(Architecture::default(), 1, 0);
        assert_eq!(
            e.train(&[], &TrainConfig::default()).unwrap_err(),
            GnnError::EmptyDataset
        );
        let data = vec![(mol("C"), Labels::default())];
        assert_eq!(
            e.train(&data, &TrainConfig::default()).unwrap_err(),
            GnnError::MissingLabels { index: 0 }
        );
    }

    #[test]
    fn divergence_reported() {
        let mut e = GnnEnsemble::new(Architecture::default(), 1, 0);
        let data = vec![
            (mol("C"), Labels::new(Some(1.0), None, None)),
            (mol("CC"), Labels::new(Some(2.0), None, None)),
        ];
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: f64::INFINITY,
            bootstrap: false,
            ..TrainConfig::default()
        };
        assert!(matches!(
            e.train(&data, &cfg),
            Err(GnnError::NonFiniteLoss { model: 0, .. })
        ));
    }

    #[test]
    fn dead_relu_parameter_has_zero_gradient() {
        let mut m = Gnn::new(Architecture::default(), 2);
        // Kill hidden unit 0 of the readout: its input weights and bias are
        // strongly negative, so its outgoing weights see no gradient.
        for i in 0..32 {
            m.params.readout.hidden_weight[(i, 0)] = -100.0;
        }
        m.params.readout.hidden_bias[0] = -100.0;
        let g = mol("COC");
        let data = vec![(GraphTensors::from_graph(&g), Labels::new(Some(1.0), Some(0.5), Some(0.0)))];
        let (_, grad) = m.loss_and_gradient(&data).unwrap();
        for t in 0..3 {
            assert_eq!(grad.readout.output_weight[(0, t)], 0.0);
        }
        let check = gradient_check(&m, &g, data[0].1).unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn linear_variant_agrees_tightly() {
        let arch = Architecture {
            activation: Activation::Identity,
            layer_dims: vec![8, 8],
            readout_hidden: 4,
            ..Architecture::default()
        };
        let m = Gnn::new(arch, 5);
        let check = gradient_check(&m, &mol("CC=O"), Labels::new(Some(0.5), Some(-1.0), Some(2.0))).unwrap();
        assert!(check.max_relative_error < 1e-6, "{check:?}");
    }
}
