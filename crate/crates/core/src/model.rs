//! Multilayer perceptron with hand-derived gradients.
//!
//! Parameters live in one flat vector, layer by layer: the `out x in`
//! weight matrix (row-major) followed by the `out` biases. Hidden layers are
//! affine -> ReLU -> inverted dropout; the last layer is affine only.
//! Classification uses mean softmax cross-entropy over logits, regression
//! uses mean squared error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{TabularDataset, Targets};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    dropout_rate: f64,
    task: Task,
}

/// Hidden widths of the AEP reference MLP.
pub const AEP_HIDDEN: [usize; 5] = [210, 420, 840, 420, 210];
pub const AEP_INPUT: usize = 18;
pub const AEP_DROPOUT: f64 = 0.3;
pub const TOY_HIDDEN: [usize; 2] = [64, 64];

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, dropout_rate: f64, task: Task) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes must be >= 2 positive integers, got {layer_sizes:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        if task == Task::Regression && *layer_sizes.last().unwrap() != 1 {
            return Err(Error::invalid("regression models must have a single output"));
        }
        if task == Task::Classification && *layer_sizes.last().unwrap() < 2 {
            return Err(Error::invalid("classification models need at least 2 outputs"));
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::Relu,
            dropout_rate,
            task,
        })
    }

    /// 18 -> 210 -> 420 -> 840 -> 420 -> 210 -> 1, ReLU, dropout 0.3.
    pub fn aep_mlp() -> Self {
        let mut sizes = vec![AEP_INPUT];
        sizes.extend(AEP_HIDDEN);
        sizes.push(1);
        Self::new(sizes, AEP_DROPOUT, Task::Regression).expect("valid preset")
    }

    /// D -> 64 -> 64 -> O without dropout.
    pub fn toy_mlp(input: usize, output: usize, task: Task) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend(TOY_HIDDEN);
        sizes.push(output);
        Self::new(sizes, 0.0, task)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        self.layer_sizes
            .windows(2)
            .map(|w| LayerShape { rows: w[1], cols: w[0] })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(LayerShape::len).sum()
    }

    /// Checks that a dataset's width and target kind fit this model.
    pub fn check_dataset(&self, ds: &TabularDataset) -> Result<()> {
        if ds.dims() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects {} inputs, dataset has {}",
                self.input_dim(),
                ds.dims()
            )));
        }
        match (self.task, ds.targets()) {
            (Task::Classification, Targets::Categorical { num_classes, .. }) if *num_classes == self.output_dim() => Ok(()),
            (Task::Classification, Targets::Categorical { num_classes, .. }) => Err(Error::shape(format!(
                "model has {} outputs for {num_classes} classes",
                self.output_dim()
            ))),
            (Task::Regression, Targets::Continuous(_)) => Ok(()),
            _ => Err(Error::shape("model task does not match target kind")),
        }
    }
}

/// Shape of one affine layer: `rows` outputs by `cols` inputs plus `rows` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl ParamVector {
    pub fn from_values(values: Vec<f64>, layout: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayerShape::len).sum();
        if values.len() != expected {
            return Err(Error::shape(format!("{} values for a layout of {expected}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.num_params()],
            layout: spec.layout(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same layout, new values; the caller guarantees the length.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }

    /// (weights, biases) slices of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.layout[..l].iter().map(LayerShape::len).sum();
        let shape = self.layout[l];
        let w = &self.values[offset..offset + shape.rows * shape.cols];
        let b = &self.values[offset + shape.rows * shape.cols..offset + shape.len()];
        (w, b)
    }

    fn matches(&self, spec: &ModelSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(Error::shape("parameter layout does not match model spec"));
        }
        Ok(())
    }
}

/// Gradient of the mean loss, in the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVector {
    values: Vec<f64>,
}

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = seed::rng_for(seed, &[seed::tag::INIT]);
    let mut values = Vec::with_capacity(spec.num_params());
    for shape in spec.layout() {
        let limit = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
        values.extend((0..shape.rows * shape.cols).map(|_| rng.random_range(-limit..limit)));
        values.extend(std::iter::repeat_n(0.0, shape.rows));
    }
    ParamVector {
        values,
        layout: spec.layout(),
    }
}

/// Batch targets matching the model task.
#[derive(Debug, Clone, Copy)]
pub enum BatchTargets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl BatchTargets<'_> {
    fn len(&self) -> usize {
        match self {
            BatchTargets::Classes(c) => c.len(),
            BatchTargets::Values(v) => v.len(),
        }
    }
}

impl<'a> From<&'a Targets> for BatchTargets<'a> {
    fn from(t: &'a Targets) -> Self {
        match t {
            Targets::Categorical { values, .. } => BatchTargets::Classes(values),
            Targets::Continuous(v) => BatchTargets::Values(v),
        }
    }
}

/// Activations kept for backprop. `inputs[l]` feeds layer `l`; for hidden
/// layers `pre[l]` holds the affine output and `masks[l]` the dropout
/// scale (0 or 1/(1-p)) when dropout is active.
struct Trace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
    output: Matrix,
}

fn affine(input: &Matrix, w: &[f64], b: &[f64], shape: LayerShape) -> Matrix {
    let mut out = Matrix::zeros(input.rows(), shape.rows);
    for i in 0..input.rows() {
        let x = input.row(i);
        let dst = out.row_mut(i);
        for (o, d) in dst.iter_mut().enumerate() {
            let wr = &w[o * shape.cols..(o + 1) * shape.cols];
            *d = b[o] + wr.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

fn dropout_mask(dropout_seed: u64, layer: usize, rows: usize, cols: usize, rate: f64) -> Vec<f64> {
    let mut rng = seed::rng_for(dropout_seed, &[seed::tag::DROPOUT, layer as u64, rows as u64, cols as u64]);
    let keep_scale = 1.0 / (1.0 - rate);
    (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
        .collect()
}

fn run_forward(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix, train_mode: bool, dropout_seed: u64) -> Result<Trace> {
    params.matches(spec)?;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::shape(format!(
            "inputs have {} columns, model expects {}",
            inputs.cols(),
            spec.input_dim()
        )));
    }
    if inputs.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    let layout = spec.layout();
    let hidden = layout.len() - 1;
    let dropout_on = train_mode && spec.dropout_rate > 0.0;
    let mut trace = Trace {
        inputs: Vec::with_capacity(layout.len()),
        pre: Vec::with_capacity(hidden),
        masks: Vec::with_capacity(hidden),
        output: Matrix::zeros(0, 0),
    };
    let mut current = inputs.clone();
    for (l, &shape) in layout.iter().enumerate() {
        let (w, b) = params.layer(l);
        let z = affine(&current, w, b, shape);
        trace.inputs.push(current);
        if l == hidden {
            trace.output = z;
            break;
        }
        let mut h = z.clone();
        for v in h.as_mut_slice() {
            *v = v.max(0.0);
        }
        let mask = dropout_on.then(|| dropout_mask(dropout_seed, l, h.rows(), h.cols(), spec.dropout_rate));
        if let Some(m) = &mask {
            for (v, s) in h.as_mut_slice().iter_mut().zip(m) {
                *v *= s;
            }
        }
        trace.pre.push(z);
        trace.masks.push(mask);
        current = h;
    }
    Ok(trace)
}

/// Model outputs (logits for classification) for a batch.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix, train_mode: bool, dropout_seed: u64) -> Result<Matrix> {
    Ok(run_forward(spec, params, inputs, train_mode, dropout_seed)?.output)
}

/// Row-wise softmax of logits.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean loss and d(loss)/d(output).
fn loss_and_output_grad(spec: &ModelSpec, output: &Matrix, targets: BatchTargets<'_>) -> Result<(f64, Matrix)> {
    let b = output.rows();
    let inv_b = 1.0 / b as f64;
    match (spec.task, targets) {
        (Task::Classification, BatchTargets::Classes(labels)) => {
            let c = spec.output_dim();
            if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::shape(format!("label {bad} outside {c} outputs")));
            }
            let mut grad = Matrix::zeros(b, c);
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row = output.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[y];
                let g = grad.row_mut(i);
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = (row[j] - log_z).exp() * inv_b;
                }
                g[y] -= inv_b;
            }
            Ok((loss * inv_b, grad))
        }
        (Task::Regression, BatchTargets::Values(values)) => {
            let mut grad = Matrix::zeros(b, 1);
            let mut loss = 0.0;
            for (i, &y) in values.iter().enumerate() {
                let r = output.get(i, 0) - y;
                loss += r * r;
                grad.set(i, 0, 2.0 * r * inv_b);
            }
            Ok((loss * inv_b, grad))
        }
        _ => Err(Error::shape("batch targets do not match model task")),
    }
}

/// Mean loss over the batch and its exact gradient. With `train_mode` the
/// dropout masks are the ones `forward` would draw for the same seed.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: BatchTargets<'_>,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(f64, GradVector)> {
    if inputs.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if targets.len() != inputs.rows() {
        return Err(Error::shape(format!("{} targets for {} inputs", targets.len(), inputs.rows())));
    }
    let trace = run_forward(spec, params, inputs, train_mode, dropout_seed)?;
    let (loss, mut delta) = loss_and_output_grad(spec, &trace.output, targets)?;

    let layout = spec.layout();
    let mut grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(layout.len());
    let mut acc = 0;
    for s in &layout {
        offsets.push(acc);
        acc += s.len();
    }

    for l in (0..layout.len()).rev() {
        let shape = layout[l];
        let a = &trace.inputs[l];
        let (gw, gb) = grad[offsets[l]..offsets[l] + shape.len()].split_at_mut(shape.rows * shape.cols);
        for i in 0..a.rows() {
            let d = delta.row(i);
            let x = a.row(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv;
                for (g, &xv) in gw[o * shape.cols..(o + 1) * shape.cols].iter_mut().zip(x) {
                    *g += dv * xv;
                }
            }
        }
        if l == 0 {
            break;
        }
        // propagate into the previous hidden layer
        let (w, _) = params.layer(l);
        let mut prev = Matrix::zeros(a.rows(), shape.cols);
        for i in 0..a.rows() {
            let d = delta.row(i);
            let p = prev.row_mut(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (pv, &wv) in p.iter_mut().zip(&w[o * shape.cols..(o + 1) * shape.cols]) {
                    *pv += dv * wv;
                }
            }
        }
        let z = &trace.pre[l - 1];
        let mask = &trace.masks[l - 1];
        for (k, pv) in prev.as_mut_slice().iter_mut().enumerate() {
            if z.as_slice()[k] <= 0.0 {
                *pv = 0.0;
            } else if let Some(m) = mask {
                *pv *= m[k];
            }
        }
        delta = prev;
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("loss {loss} or its gradient")));
    }
    Ok((loss, GradVector::new(grad)))
}

/// Mean loss without the gradient, dropout off.
pub fn loss(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix, targets: BatchTargets<'_>) -> Result<f64> {
    let out = forward(spec, params, inputs, false, 0)?;
    Ok(loss_and_output_grad(spec, &out, targets)?.0)
}

/// `p - lr * g`, elementwise.
pub fn sgd_step(params: &ParamVector, grad: &GradVector, lr: f64) -> Result<ParamVector> {
    if grad.len() != params.len() {
        return Err(Error::shape(format!("gradient of {} for {} params", grad.len(), params.len())));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
    }
    if grad.values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(params.with_values(params.values.iter().zip(&grad.values).map(|(p, g)| p - lr * g).collect()))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    RSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: MetricKind,
    pub value: f64,
    /// Set for R² on targets with zero variance, where the value is defined as 0.
    pub degenerate: bool,
}

/// Accuracy (classification) or R² (regression) on `dataset`.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, dataset: &TabularDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    spec.check_dataset(dataset)?;
    let out = forward(spec, params, dataset.features(), false, 0)?;
    match dataset.targets() {
        Targets::Categorical { values, .. } => {
            let correct = values.iter().enumerate().filter(|&(i, &y)| argmax(out.row(i)) == y).count();
            Ok(Evaluation {
                kind: MetricKind::Accuracy,
                value: correct as f64 / values.len() as f64,
                degenerate: false,
            })
        }
        Targets::Continuous(y) => {
            let (value, degenerate) = r_squared(y, out.as_slice());
            Ok(Evaluation {
                kind: MetricKind::RSquared,
                value,
                degenerate,
            })
        }
    }
}

/// `1 - SS_res / SS_tot`; `(0, true)` when `SS_tot == 0`.
pub fn r_squared(targets: &[f64], predictions: &[f64]) -> (f64, bool) {
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = targets.iter().zip(predictions).map(|(y, p)| (y - p).powi(2)).sum();
    if ss_tot == 0.0 {
        (0.0, true)
    } else {
        (1.0 - ss_res / ss_tot, false)
    }
}

/// `confusion[i][j]` = samples of true class `i` predicted as `j`.
pub fn confusion_matrix(spec: &ModelSpec, params: &ParamVector, dataset: &TabularDataset) -> Result<Vec<Vec<i64>>> {
    spec.check_dataset(dataset)?;
    let labels = dataset
        .targets()
        .labels()
        .ok_or_else(|| Error::invalid("confusion matrix needs categorical targets"))?;
    let c = spec.output_dim();
    let out = forward(spec, params, dataset.features(), false, 0)?;
    let mut conf = vec![vec![0i64; c]; c];
    for (i, &y) in labels.iter().enumerate() {
        conf[y][argmax(out.row(i))] += 1;
    }
    Ok(conf)
}

/// Maximum relative error between the analytic gradient and central
/// differences over `coords` seeded coordinates, dropout disabled. The
/// denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Matrix,
    targets: BatchTargets<'_>,
    step: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let (_, grad) = loss_and_grad(spec, params, inputs, targets, false, 0)?;
    let mut rng = seed::rng(seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..params.len());
        let orig = params.values[k];
        probe.values[k] = orig + step;
        let up = loss(spec, &probe, inputs, targets)?;
        probe.values[k] = orig - step;
        let down = loss(spec, &probe, inputs, targets)?;
        probe.values[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grad.values[k];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
