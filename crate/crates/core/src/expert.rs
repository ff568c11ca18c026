//! Region experts: ReLU feed-forward regressors trained with mean squared
//! error, mini-batches and validation early stopping.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{fit_scaler_matrix, mean, variance, ColumnKind, Scaler, TabularDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub optimizer: Optimizer,
    /// Fit on `(y - mean) / stddev` of the training rows and undo it at
    /// prediction time.
    pub normalize_target: bool,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 200,
            patience: 20,
            validation_fraction: 0.1,
            optimizer: Optimizer::Adam,
            normalize_target: true,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("mlp max_epochs must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Config("mlp validation_fraction must be in (0, 0.5)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("mlp batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("mlp learning_rate must be > 0".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("mlp hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Network

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, out_o) in out.iter_mut().enumerate() {
            let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *out_o = self.biases[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// ReLU hidden layers and a linear scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// He-normal weights, zero biases.
    pub fn he_init(input: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut net = Self::zeros(input, hidden);
        for layer in &mut net.layers {
            let sd = (2.0 / layer.inputs.max(1) as f64).sqrt();
            for w in &mut layer.weights {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * sd;
            }
        }
        net
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.forward(&cur, &mut next);
            if l < last {
                relu(&mut next);
            }
            cur = next;
        }
        cur[0]
    }

    /// Pre-activations of every layer for one input.
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(&act, &mut z);
            if l < last {
                act = z.clone();
                relu(&mut act);
            }
            zs.push(z);
        }
        zs
    }

    /// Adds `scale · ∂(ŷ - y)²/∂θ` to `grads` and returns the squared error.
    fn accumulate(&self, x: &[f64], y: f64, scale: f64, grads: &mut Mlp) -> f64 {
        let zs = self.forward_cached(x);
        let last = self.layers.len() - 1;
        let err = zs[last][0] - y;
        let mut delta = vec![2.0 * err * scale];
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let relu_input;
            let input: &[f64] = if l == 0 {
                x
            } else {
                relu_input = zs[l - 1].iter().map(|&v| v.max(0.0)).collect::<Vec<_>>();
                &relu_input
            };
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                for (p, &z) in prev.iter_mut().zip(&zs[l - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        err * err
    }

    /// Gradient of the squared error `(ŷ - y)²` for one sample.
    pub fn gradients(&self, x: &[f64], y: f64) -> Mlp {
        let mut g = self.zeroed();
        self.accumulate(x, y, 1.0, &mut g);
        g
    }

    fn zeroed(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    fn all_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// `(ŷ - y)²` over all parameters. Pairs where both magnitudes are below
/// `1e-8` count as agreeing.
pub fn grad_check(net: &Mlp, x: &[f64], y: f64, eps: f64) -> f64 {
    let analytic: Vec<f64> = net.gradients(x, y).params().copied().collect();
    let mut probe = net.clone();
    let loss = |m: &Mlp| (m.forward(x) - y).powi(2);
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *probe.params_mut().nth(k).expect("parameter index");
        *probe.params_mut().nth(k).expect("parameter index") = orig + eps;
        let up = loss(&probe);
        *probe.params_mut().nth(k).expect("parameter index") = orig - eps;
        let down = loss(&probe);
        *probe.params_mut().nth(k).expect("parameter index") = orig;
        let n = (up - down) / (2.0 * eps);
        let scale = a.abs().max(n.abs());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

// ---------------------------------------------------------------------------
// Input layout

/// Maps dataset rows to network inputs: numeric columns are standardized,
/// categorical codes are expanded one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub scaler: Scaler,
    /// One-hot width per column; `None` for numeric columns.
    pub one_hot: Vec<Option<usize>>,
}

impl InputLayout {
    pub fn fit(ds: &TabularDataset, rows: &[usize]) -> Self {
        let x = ds.features().select_rows(rows);
        let kinds: Vec<ColumnKind> = ds.schema().kinds().collect();
        let scaler = fit_scaler_matrix(&x, kinds.iter().copied());
        let one_hot = kinds
            .iter()
            .enumerate()
            .map(|(j, k)| match k {
                ColumnKind::Numeric => None,
                ColumnKind::Categorical => {
                    let max_code = ds.features().column(j).fold(0.0f64, f64::max) as usize;
                    Some(ds.code_tables()[j].len().max(max_code + 1))
                }
            })
            .collect();
        Self { scaler, one_hot }
    }

    pub fn n_columns(&self) -> usize {
        self.one_hot.len()
    }

    pub fn width(&self) -> usize {
        self.one_hot.iter().map(|w| w.unwrap_or(1)).sum()
    }

    /// Appends the encoding of `row` to `out`. Unknown categorical codes
    /// encode as all zeros.
    pub fn encode_into(&self, row: &[f64], out: &mut Vec<f64>) {
        for (j, &v) in row.iter().enumerate() {
            match self.one_hot[j] {
                None => out.push(self.scaler.transform_value(j, v)),
                Some(w) => {
                    let start = out.len();
                    out.resize(start + w, 0.0);
                    if v >= 0.0 && (v as usize) < w {
                        out[start + v as usize] = 1.0;
                    }
                }
            }
        }
    }

    pub fn encode(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        self.encode_into(row, &mut out);
        out
    }

    pub fn encode_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_columns() {
            return Err(Error::Shape {
                expected: format!("{} feature columns", self.n_columns()),
                actual: format!("{} columns", x.cols()),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * self.width());
        for row in x.iter_rows() {
            self.encode_into(row, &mut data);
        }
        Matrix::new(x.rows(), self.width(), data)
    }
}

// ---------------------------------------------------------------------------
// Expert model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub config: MlpConfig,
    pub layout: InputLayout,
    pub network: Mlp,
    pub target_mean: f64,
    pub target_scale: f64,
    pub region_mean: Option<f64>,
    pub region_stddev: Option<f64>,
    /// Losses in target units, one entry per completed epoch.
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
}

impl ExpertModel {
    /// Model whose network is all zeros, so it predicts `0` everywhere.
    pub fn zeros(layout: InputLayout, hidden: &[usize]) -> Self {
        let network = Mlp::zeros(layout.width(), hidden);
        Self {
            config: MlpConfig {
                hidden_layers: hidden.to_vec(),
                ..Default::default()
            },
            layout,
            network,
            target_mean: 0.0,
            target_scale: 1.0,
            region_mean: None,
            region_stddev: None,
            history: Vec::new(),
            best_epoch: 0,
        }
    }

    pub fn with_region(mut self, mean: f64, stddev: f64) -> Self {
        self.region_mean = Some(mean);
        self.region_stddev = Some(stddev);
        self
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.history.iter().map(|h| h.val_loss).reduce(f64::min)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let mut width = self.layout.width();
        for (l, layer) in self.network.layers.iter().enumerate() {
            if layer.inputs != width
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.biases.len() != layer.outputs
            {
                return Err(Error::Invalid(format!("expert layer {l} has inconsistent shape")));
            }
            width = layer.outputs;
        }
        if width != 1 {
            return Err(Error::Invalid("expert network must end in one output".into()));
        }
        if !self.network.all_finite() {
            return Err(Error::Invalid("expert parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Rows held out for early stopping: a seeded shuffle's first
/// `ceil(fraction · n)` rows, leaving at least one training row.
pub fn validation_indices(n: usize, fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if n < 2 {
        0
    } else {
        ((fraction * n as f64).ceil() as usize).clamp(1, n - 1)
    };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn train_expert(ds: &TabularDataset, cfg: &MlpConfig) -> Result<ExpertModel> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("expert training set has no rows".into()));
    }
    let mut rng = rng::stream(cfg.seed, "expert");
    let (train_rows, mut val_rows) = validation_indices(ds.n_rows(), cfg.validation_fraction, &mut rng);
    if val_rows.is_empty() {
        val_rows = train_rows.clone();
    }
    let layout = InputLayout::fit(ds, &train_rows);
    let encoded = layout.encode_matrix(ds.features())?;

    let train_targets: Vec<f64> = train_rows.iter().map(|&i| ds.target(i)).collect();
    let (target_mean, target_scale) = if cfg.normalize_target {
        let sd = variance(&train_targets).sqrt();
        (mean(&train_targets), if sd > 1e-12 { sd } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let norm = |y: f64| (y - target_mean) / target_scale;
    let loss_scale = target_scale * target_scale;

    let mut net = Mlp::he_init(layout.width(), &cfg.hidden_layers, &mut rng);
    let n_params = net.n_params();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let val_loss = |net: &Mlp| -> f64 {
        val_rows
            .iter()
            .map(|&i| (net.forward(encoded.row(i)) - norm(ds.target(i))).powi(2))
            .sum::<f64>()
            / val_rows.len() as f64
            * loss_scale
    };

    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order = train_rows.clone();
    let mut grads = net.zeroed();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum_sq = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in grads.params_mut() {
                *g = 0.0;
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                sum_sq += net.accumulate(encoded.row(i), norm(ds.target(i)), scale, &mut grads);
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in net.params_mut().zip(grads.params()) {
                        *p -= cfg.learning_rate * g;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = 1.0 - BETA1.powi(adam.t);
                    let c2 = 1.0 - BETA2.powi(adam.t);
                    for (k, (p, &g)) in net.params_mut().zip(grads.params()).enumerate() {
                        adam.m[k] = BETA1 * adam.m[k] + (1.0 - BETA1) * g;
                        adam.v[k] = BETA2 * adam.v[k] + (1.0 - BETA2) * g * g;
                        let m_hat = adam.m[k] / c1;
                        let v_hat = adam.v[k] / c2;
                        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let train_loss = sum_sq / order.len() as f64 * loss_scale;
        if !train_loss.is_finite() || !net.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        let vl = val_loss(&net);
        if !vl.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss: vl,
        });
        if vl < best_loss {
            best_loss = vl;
            best = net.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }

    Ok(ExpertModel {
        config: cfg.clone(),
        layout,
        network: best,
        target_mean,
        target_scale,
        region_mean: None,
        region_stddev: None,
        history,
        best_epoch,
    })
}

/// Predictions for raw (unstandardized) feature rows.
pub fn predict(model: &ExpertModel, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != model.layout.n_columns() {
        return Err(Error::Shape {
            expected: format!("{} feature columns", model.layout.n_columns()),
            actual: format!("{} columns", x.cols()),
        });
    }
    let mut buf = Vec::with_capacity(model.layout.width());
    Ok(x.iter_rows()
        .map(|row| {
            buf.clear();
            model.layout.encode_into(row, &mut buf);
            model.network.forward(&buf) * model.target_scale + model.target_mean
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, FeatureSchema};
    use rand::Rng as _;

    fn linear(n: usize, seed: u64) -> TabularDataset {
        let mut rng = rng::stream(seed, "lin");
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys = xs.iter().map(|x| 2.0 * x).collect();
        TabularDataset::numeric(Matrix::new(n, 1, xs).unwrap(), ys).unwrap()
    }

    #[test]
    fn learns_linear_function() {
        let ds = linear(1000, 1);
        let cfg = MlpConfig {
            hidden_layers: vec![16, 16],
            learning_rate: 3e-3,
            batch_size: 32,
            ..Default::default()
        };
        let model = train_expert(&ds, &cfg).unwrap();
        let test = linear(200, 2);
        let pred = predict(&model, test.features()).unwrap();
        let mse = pred.iter().zip(test.targets()).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / 200.0;
        assert!(mse < 1e-2, "mse {mse}");
    }

    #[test]
    fn constant_target() {
        let mut ds = linear(300, 3);
        ds = TabularDataset::numeric(ds.features().clone(), vec![4.2; 300]).unwrap();
        let model = train_expert(&ds, &MlpConfig::default()).unwrap();
        let pred = predict(&model, ds.features()).unwrap();
        let mse = pred.iter().map(|p| (p - 4.2).powi(2)).sum::<f64>() / 300.0;
        assert!(mse < 1e-4, "mse {mse}");
    }

    #[test]
    fn patience_zero_stops_after_first_non_improvement() {
        let ds = linear(200, 4);
        let cfg = MlpConfig {
            patience: 0,
            max_epochs: 500,
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        let model = train_expert(&ds, &cfg).unwrap();
        let h = &model.history;
        let first_bad = (1..h.len())
            .find(|&i| h[i].val_loss >= h[..i].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min))
            .map(|i| i + 1);
        match first_bad {
            Some(e) => assert_eq!(h.len(), e),
            None => assert_eq!(h.len(), cfg.max_epochs),
        }
    }

    #[test]
    fn best_epoch_is_restored() {
        let ds = linear(300, 5);
        let model = train_expert(&ds, &MlpConfig { max_epochs: 30, patience: 3, ..Default::default() }).unwrap();
        let min = model.best_val_loss().unwrap();
        assert_eq!(model.history[model.best_epoch - 1].val_loss, min);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = linear(200, 6);
        let cfg = MlpConfig { max_epochs: 5, ..Default::default() };
        assert_eq!(train_expert(&ds, &cfg).unwrap(), train_expert(&ds, &cfg).unwrap());
    }

    #[test]
    fn zero_model_predicts_zero() {
        let ds = linear(10, 7);
        let layout = InputLayout::fit(&ds, &(0..10).collect::<Vec<_>>());
        let model = ExpertModel::zeros(layout, &[4]);
        assert!(predict(&model, ds.features()).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn batched_equals_row_by_row() {
        let ds = linear(50, 8);
        let model = train_expert(&ds, &MlpConfig { max_epochs: 3, ..Default::default() }).unwrap();
        let batch = predict(&model, ds.features()).unwrap();
        for i in 0..ds.n_rows() {
            let one = predict(&model, &Matrix::new(1, 1, vec![ds.row(i)[0]]).unwrap()).unwrap();
            assert_eq!(one[0], batch[i]);
        }
        assert!(predict(&model, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn gradient_check_small_net() {
        for seed in 0..20 {
            let mut rng = rng::stream(seed, "gc");
            let net = Mlp::he_init(4, &[8, 8], &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = grad_check(&net, &x, 0.3, 1e-5);
            assert!(err < 1e-4, "seed {seed} err {err}");
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let mut rng = rng::stream(9, "gc");
        let mut net = Mlp::he_init(3, &[5], &mut rng);
        for b in &mut net.layers[0].biases {
            *b = 0.5;
        }
        let g = net.gradients(&[0.0; 3], 2.0);
        assert!(g.layers[0].weights.iter().all(|&w| w == 0.0));
        assert!(g.layers.last().unwrap().biases[0] != 0.0);
    }

    #[test]
    fn categorical_one_hot() {
        let schema = FeatureSchema::new(vec![Column::numeric("a"), Column::categorical("c")], "y").unwrap();
        let ds = TabularDataset::new(
            schema,
            vec![vec![], vec!["p".into(), "q".into(), "r".into()]],
            Matrix::from_rows(&[[1.0, 0.0], [3.0, 2.0]]).unwrap(),
            vec![0.0, 1.0],
        )
        .unwrap();
        let layout = InputLayout::fit(&ds, &[0, 1]);
        assert_eq!(layout.width(), 4);
        assert_eq!(layout.encode(&[3.0, 2.0]), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn json_round_trip() {
        let ds = linear(40, 10);
        let model = train_expert(&ds, &MlpConfig { max_epochs: 2, ..Default::default() }).unwrap();
        let back = ExpertModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
