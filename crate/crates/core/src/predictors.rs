//! Predictors (linear, logistic, multilayer perceptron), their risks, and
//! analytic gradients with respect to the flattened parameter vector.
//!
//! Mlp parameters are flattened layer by layer; within a layer the weight
//! matrix (rows = output units) comes first in row-major order, followed by
//! the bias vector.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env_data::EnvironmentDataset;
use crate::error::{CocoError, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => tanh(z),
            Self::Relu => z.max(0.0),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a` and input `z`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }

    /// Second derivative through the activation output `a`.
    fn second_derivative(self, a: f64) -> f64 {
        match self {
            Self::Tanh => -2.0 * a * (1.0 - a * a),
            Self::Relu | Self::Identity => 0.0,
        }
    }
}

/// Layer-size descriptor. Linear and logistic models have `hidden` empty and
/// `output == 1`, and carry no bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl ModelShape {
    pub fn linear(p: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            input: p,
            hidden: Vec::new(),
            output: 1,
            activation: Activation::Identity,
        }
    }

    pub fn logistic(p: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            ..Self::linear(p)
        }
    }

    pub fn mlp(input: usize, hidden: Vec<usize>, output: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input,
            hidden,
            output,
            activation,
        }
    }

    /// Widths `[input, hidden.., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input];
        sizes.extend(&self.hidden);
        sizes.push(self.output);
        sizes
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => self.input,
            ModelKind::Mlp => self
                .layer_sizes()
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
        }
    }

    /// Offsets `(weights, bias)` of each Mlp layer in the flat vector.
    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for w in self.layer_sizes().windows(2) {
            offsets.push((at, at + w[0] * w[1]));
            at += w[0] * w[1] + w[1];
        }
        offsets
    }

    /// Flat indices of the parameters that multiply input column `j`
    /// directly: the coefficient itself for linear models, the first-layer
    /// weight column for an Mlp.
    pub fn input_column_indices(&self, j: usize) -> Vec<usize> {
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => vec![j],
            ModelKind::Mlp => {
                let out = self.layer_sizes()[1];
                (0..out).map(|r| r * self.input + j).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 {
            return Err(CocoError::ShapeMismatch("model input and output must be >= 1".into()));
        }
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => {
                if !self.hidden.is_empty() || self.output != 1 {
                    return Err(CocoError::ShapeMismatch(
                        "linear and logistic models have one output and no hidden layers".into(),
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(CocoError::ShapeMismatch("hidden widths must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// A model shape together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub theta: DVector<f64>,
}

impl ModelParams {
    pub fn new(shape: ModelShape, theta: DVector<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.param_count() {
            return Err(CocoError::ShapeMismatch(format!(
                "theta has {} entries, shape needs {}",
                theta.len(),
                shape.param_count()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(CocoError::InvalidData("parameters must be finite".into()));
        }
        Ok(Self { shape, theta })
    }

    pub fn zeros(shape: ModelShape) -> Result<Self> {
        let n = shape.param_count();
        Self::new(shape, DVector::zeros(n))
    }

    /// Parameters with i.i.d. `N(0, scale²)` entries.
    pub fn random<R: Rng + ?Sized>(shape: ModelShape, scale: f64, rng: &mut R) -> Result<Self> {
        let n = shape.param_count();
        let d = Normal::new(0.0, scale)
            .map_err(|e| CocoError::Config(format!("invalid init scale {scale}: {e}")))?;
        Self::new(shape, DVector::from_fn(n, |_, _| d.sample(rng)))
    }

    pub fn kind(&self) -> ModelKind {
        self.shape.kind
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> Self {
        Self {
            shape: self.shape.clone(),
            theta,
        }
    }

    /// Weight matrix (rows = output units) and bias of Mlp layer `l`.
    pub fn layer(&self, l: usize) -> (DMatrix<f64>, DVector<f64>) {
        let sizes = self.shape.layer_sizes();
        let (w_at, b_at) = self.shape.layer_offsets()[l];
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let w = DMatrix::from_row_slice(fan_out, fan_in, &self.theta.as_slice()[w_at..b_at]);
        let b = DVector::from_column_slice(&self.theta.as_slice()[b_at..b_at + fan_out]);
        (w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Squared,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub loss: Loss,
}

impl RiskSpec {
    pub const SQUARED: Self = Self { loss: Loss::Squared };
    pub const CROSS_ENTROPY: Self = Self {
        loss: Loss::CrossEntropy,
    };

    /// Checks the loss against the model kind.
    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        let ok = match (self.loss, shape.kind) {
            (Loss::Squared, ModelKind::Linear) => true,
            (Loss::Squared, ModelKind::Mlp) => shape.output == 1,
            (Loss::CrossEntropy, ModelKind::Logistic) => true,
            (Loss::CrossEntropy, ModelKind::Mlp) => shape.output >= 2,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(CocoError::InvalidObjective(format!(
                "{:?} loss is not defined for a {:?} model with {} output(s)",
                self.loss, shape.kind, shape.output
            )))
        }
    }
}

fn check_input(params: &ModelParams, x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != params.shape.input {
        return Err(CocoError::ShapeMismatch(format!(
            "data has {} columns, model expects {}",
            x.ncols(),
            params.shape.input
        )));
    }
    Ok(())
}

/// `tanh` through a single `exp`, with a series near zero where `1 - t`
/// cancels. Agrees with the libm value to a few ulps and is several times
/// cheaper, which matters because activations dominate Mlp training time.
fn tanh(z: f64) -> f64 {
    let a = z.abs();
    if a < 1e-2 {
        let z2 = z * z;
        let poly = 17.0 / 315.0 - z2 * (62.0 / 2835.0);
        return z * (1.0 - z2 * (1.0 / 3.0 - z2 * (2.0 / 15.0 - z2 * poly)));
    }
    if a > 20.0 {
        return z.signum();
    }
    let t = (-2.0 * a).exp();
    ((1.0 - t) / (1.0 + t)).copysign(z)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward pass cache: pre-activations and activations of every layer.
struct Forward {
    /// `acts[0]` is the input; `acts[l]` the output of layer `l`.
    acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

fn forward(params: &ModelParams, x: &DMatrix<f64>) -> Forward {
    match params.kind() {
        ModelKind::Linear | ModelKind::Logistic => {
            let z = x * &params.theta;
            let z = DMatrix::from_column_slice(x.nrows(), 1, z.as_slice());
            Forward {
                acts: vec![x.clone(), z.clone()],
                pre: vec![z],
            }
        }
        ModelKind::Mlp => {
            let layers = params.shape.layer_sizes().len() - 1;
            let mut acts = Vec::with_capacity(layers + 1);
            let mut pre = Vec::with_capacity(layers);
            acts.push(x.clone());
            for l in 0..layers {
                let (w, b) = params.layer(l);
                let mut z = &acts[l] * w.transpose();
                for (j, mut col) in z.column_iter_mut().enumerate() {
                    col.add_scalar_mut(b[j]);
                }
                let a = if l + 1 < layers {
                    z.map(|v| params.shape.activation.apply(v))
                } else {
                    z.clone()
                };
                pre.push(z);
                acts.push(a);
            }
            Forward { acts, pre }
        }
    }
}

/// Backward pass from `dL/d(output)` (n x k) to the flat parameter gradient.
fn backward(params: &ModelParams, fwd: &Forward, out_grad: DMatrix<f64>) -> DVector<f64> {
    backward_keep(params, fwd, out_grad, false).0
}

/// Backward pass that optionally keeps `dL/dz_l` for every layer.
fn backward_keep(
    params: &ModelParams,
    fwd: &Forward,
    out_grad: DMatrix<f64>,
    keep: bool,
) -> (DVector<f64>, Vec<DMatrix<f64>>) {
    match params.kind() {
        ModelKind::Linear | ModelKind::Logistic => {
            let grad = fwd.acts[0].tr_mul(&out_grad.column(0));
            (grad, if keep { vec![out_grad] } else { Vec::new() })
        }
        ModelKind::Mlp => {
            let mut grad = DVector::zeros(params.len());
            let offsets = params.shape.layer_offsets();
            let layers = offsets.len();
            let mut kept = Vec::with_capacity(if keep { layers } else { 0 });
            let mut delta = out_grad;
            for l in (0..layers).rev() {
                let (w_at, b_at) = offsets[l];
                write_layer_grad(&mut grad, w_at, b_at, &delta.tr_mul(&fwd.acts[l]), &delta);
                let next = (l > 0).then(|| {
                    let (w, _) = params.layer(l);
                    let mut prev = &delta * w;
                    let act = params.shape.activation;
                    prev.zip_zip_apply(&fwd.pre[l - 1], &fwd.acts[l], |d, z, a| {
                        *d *= act.derivative(z, a)
                    });
                    prev
                });
                if keep {
                    kept.push(delta);
                }
                match next {
                    Some(prev) => delta = prev,
                    None => break,
                }
            }
            kept.reverse();
            (grad, kept)
        }
    }
}

/// Stores `dW` (out x in, row-major) and the column sums of `delta` as the
/// bias gradient.
fn write_layer_grad(grad: &mut DVector<f64>, w_at: usize, b_at: usize, dw: &DMatrix<f64>, delta: &DMatrix<f64>) {
    let (rows, cols) = dw.shape();
    for r in 0..rows {
        for c in 0..cols {
            grad[w_at + r * cols + c] = dw[(r, c)];
        }
        grad[b_at + r] = delta.column(r).sum();
    }
}

/// Raw model output: `Xα` (linear), `sigmoid(Xα)` (logistic), or the final
/// layer before any softmax (Mlp).
pub fn predict(params: &ModelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_input(params, x)?;
    let fwd = forward(params, x);
    let out = fwd.acts.into_iter().last().expect("at least one layer");
    Ok(match params.kind() {
        ModelKind::Logistic => out.map(sigmoid),
        _ => out,
    })
}

/// Class probabilities of a softmax Mlp.
pub fn predict_proba(params: &ModelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let logits = predict(params, x)?;
    Ok(softmax_rows(&logits))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = logits.shape();
    let mut out = logits.clone();
    let mut max = vec![f64::NEG_INFINITY; n];
    for c in 0..k {
        for (m, v) in max.iter_mut().zip(logits.column(c).iter()) {
            *m = m.max(*v);
        }
    }
    let mut sum = vec![0.0; n];
    for c in 0..k {
        for ((v, m), s) in out.column_mut(c).iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = (*v - m).exp();
            *s += *v;
        }
    }
    for c in 0..k {
        for (v, s) in out.column_mut(c).iter_mut().zip(&sum) {
            *v /= s;
        }
    }
    out
}

/// Predicted class: argmax of the Mlp output, or `sigmoid > 1/2` for
/// logistic models.
pub fn predict_class(params: &ModelParams, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let out = predict(params, x)?;
    Ok(match params.kind() {
        ModelKind::Logistic => out.column(0).iter().map(|&p| usize::from(p > 0.5)).collect(),
        _ => out.row_iter().map(|r| r.transpose().argmax().0).collect(),
    })
}

/// Share of correctly classified rows, in percent.
pub fn accuracy(params: &ModelParams, data: &EnvironmentDataset) -> Result<f64> {
    let pred = predict_class(params, &data.x)?;
    let hits = pred
        .iter()
        .zip(data.y.iter())
        .filter(|(p, y)| **p as f64 == **y)
        .count();
    Ok(100.0 * hits as f64 / data.n() as f64)
}

fn label_index(y: f64, classes: usize) -> Result<usize> {
    if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
        return Err(CocoError::InvalidData(format!(
            "label {y} is not a class index in 0..{classes}"
        )));
    }
    Ok(y as usize)
}

/// Per-sample losses and `dℓ/d(output)` for a forward pass.
struct LossEval {
    losses: DVector<f64>,
    out_grad: DMatrix<f64>,
    /// Softmax probabilities (Mlp cross-entropy) or sigmoid values
    /// (logistic); empty for squared loss.
    probs: DMatrix<f64>,
}

fn eval_loss(params: &ModelParams, fwd: &Forward, y: &DVector<f64>, spec: RiskSpec) -> Result<LossEval> {
    spec.validate(&params.shape)?;
    let out = fwd.acts.last().expect("output layer");
    let n = out.nrows();
    if y.len() != n {
        return Err(CocoError::ShapeMismatch(format!(
            "{} labels for {n} rows",
            y.len()
        )));
    }
    Ok(match (spec.loss, params.kind()) {
        (Loss::Squared, _) => {
            let r = DVector::from_iterator(n, (0..n).map(|i| out[(i, 0)] - y[i]));
            LossEval {
                losses: r.map(|v| 0.5 * v * v),
                out_grad: DMatrix::from_column_slice(n, 1, r.as_slice()),
                probs: DMatrix::zeros(0, 0),
            }
        }
        (Loss::CrossEntropy, ModelKind::Logistic) => {
            let p = out.map(sigmoid);
            let losses = DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    let q = p[(i, 0)].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    -(y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln())
                }),
            );
            let out_grad = DMatrix::from_fn(n, 1, |i, _| p[(i, 0)] - y[i]);
            LossEval {
                losses,
                out_grad,
                probs: p,
            }
        }
        (Loss::CrossEntropy, _) => {
            let k = out.ncols();
            let p = softmax_rows(out);
            let mut losses = DVector::zeros(n);
            let mut out_grad = p.clone();
            for i in 0..n {
                let c = label_index(y[i], k)?;
                losses[i] = -p[(i, c)].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
                out_grad[(i, c)] -= 1.0;
            }
            LossEval {
                losses,
                out_grad,
                probs: p,
            }
        }
    })
}

/// Mean loss over the sample.
pub fn empirical_risk(params: &ModelParams, data: &EnvironmentDataset, spec: RiskSpec) -> Result<f64> {
    check_input(params, &data.x)?;
    let fwd = forward(params, &data.x);
    let eval = eval_loss(params, &fwd, &data.y, spec)?;
    Ok(eval.losses.mean())
}

/// Risk and its gradient in one pass.
pub fn risk_and_gradient(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
) -> Result<(f64, DVector<f64>)> {
    check_input(params, &data.x)?;
    let fwd = forward(params, &data.x);
    let eval = eval_loss(params, &fwd, &data.y, spec)?;
    let n = data.n() as f64;
    let grad = backward(params, &fwd, eval.out_grad / n);
    Ok((eval.losses.mean(), grad))
}

/// Exact gradient of [`empirical_risk`].
pub fn risk_gradient(params: &ModelParams, data: &EnvironmentDataset, spec: RiskSpec) -> Result<DVector<f64>> {
    Ok(risk_and_gradient(params, data, spec)?.1)
}

/// Gradient of each sample's loss, one row per sample.
pub fn per_sample_gradients(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
) -> Result<DMatrix<f64>> {
    check_input(params, &data.x)?;
    let fwd = forward(params, &data.x);
    let eval = eval_loss(params, &fwd, &data.y, spec)?;
    let n = data.n();
    let mut out = DMatrix::zeros(n, params.len());
    match params.kind() {
        ModelKind::Linear | ModelKind::Logistic => {
            for i in 0..n {
                let r = eval.out_grad[(i, 0)];
                for j in 0..params.len() {
                    out[(i, j)] = r * data.x[(i, j)];
                }
            }
        }
        ModelKind::Mlp => {
            // Backpropagate every sample separately by reusing the layer-wise
            // deltas: per-sample weight gradients are outer products.
            let offsets = params.shape.layer_offsets();
            let act = params.shape.activation;
            let mut delta = eval.out_grad.clone();
            for l in (0..offsets.len()).rev() {
                let (w_at, b_at) = offsets[l];
                let a = &fwd.acts[l];
                let (fan_out, fan_in) = (delta.ncols(), a.ncols());
                for i in 0..n {
                    for r in 0..fan_out {
                        let d = delta[(i, r)];
                        for c in 0..fan_in {
                            out[(i, w_at + r * fan_in + c)] = d * a[(i, c)];
                        }
                        out[(i, b_at + r)] = d;
                    }
                }
                if l > 0 {
                    let (w, _) = params.layer(l);
                    let mut prev = &delta * w;
                    prev.zip_zip_apply(&fwd.pre[l - 1], &fwd.acts[l], |d, z, a| {
                        *d *= act.derivative(z, a)
                    });
                    delta = prev;
                }
            }
        }
    }
    Ok(out)
}

/// Central finite differences of [`empirical_risk`], coordinate by coordinate.
pub fn risk_gradient_fd(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
    step: f64,
) -> Result<DVector<f64>> {
    if step <= 0.0 || !step.is_finite() {
        return Err(CocoError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grad = DVector::zeros(params.len());
    let mut probe = params.clone();
    for j in 0..params.len() {
        let orig = probe.theta[j];
        probe.theta[j] = orig + step;
        let up = empirical_risk(&probe, data, spec)?;
        probe.theta[j] = orig - step;
        let down = empirical_risk(&probe, data, spec)?;
        probe.theta[j] = orig;
        grad[j] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Exact Hessian-vector product `∇²R(θ) v`.
pub fn hessian_vector_product(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    Linearization::new(params, data, spec)?.hvp(v)
}

/// Hessian-vector product by central differences of the analytic gradient
/// along `v`.
pub fn hessian_vector_product_fd(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
    v: &DVector<f64>,
    step: f64,
) -> Result<DVector<f64>> {
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(DVector::zeros(params.len()));
    }
    // Step along the unit direction keeps the truncation error independent of |v|.
    let h = step / norm;
    let up = risk_gradient(&params.with_theta(&params.theta + v * h), data, spec)?;
    let down = risk_gradient(&params.with_theta(&params.theta - v * h), data, spec)?;
    Ok((up - down) / (2.0 * h))
}

/// Risk, gradient and exact Hessian-vector products at a fixed parameter,
/// sharing one forward and backward pass.
///
/// Products use forward-mode differentiation of the backward pass, so each
/// one costs about a gradient evaluation without re-running activations.
pub struct Linearization<'a> {
    params: &'a ModelParams,
    x: &'a DMatrix<f64>,
    fwd: Forward,
    probs: DMatrix<f64>,
    deltas: Vec<DMatrix<f64>>,
    risk: f64,
    grad: DVector<f64>,
    loss: Loss,
}

impl<'a> Linearization<'a> {
    pub fn new(params: &'a ModelParams, data: &'a EnvironmentDataset, spec: RiskSpec) -> Result<Self> {
        check_input(params, &data.x)?;
        let fwd = forward(params, &data.x);
        let eval = eval_loss(params, &fwd, &data.y, spec)?;
        let n = data.n() as f64;
        let (grad, deltas) = backward_keep(params, &fwd, eval.out_grad / n, true);
        Ok(Self {
            params,
            x: &data.x,
            fwd,
            probs: eval.probs,
            deltas,
            risk: eval.losses.mean(),
            grad,
            loss: spec.loss,
        })
    }

    pub fn risk(&self) -> f64 {
        self.risk
    }

    pub fn gradient(&self) -> &DVector<f64> {
        &self.grad
    }

    /// Applies the output-space loss Hessian (already divided by `n`) to a
    /// tangent of the model output.
    fn output_curvature(&self, ro: &mut DMatrix<f64>) {
        let n = ro.nrows() as f64;
        match (self.loss, self.params.kind()) {
            (Loss::Squared, _) => *ro /= n,
            (Loss::CrossEntropy, ModelKind::Logistic) => {
                ro.zip_apply(&self.probs, |r, p| *r *= p * (1.0 - p) / n);
            }
            (Loss::CrossEntropy, _) => {
                let p = &self.probs;
                let dots = DVector::from_fn(ro.nrows(), |i, _| p.row(i).dot(&ro.row(i)));
                for c in 0..ro.ncols() {
                    for i in 0..ro.nrows() {
                        ro[(i, c)] = p[(i, c)] * (ro[(i, c)] - dots[i]) / n;
                    }
                }
            }
        }
    }

    /// `∇²R(θ) v`.
    pub fn hvp(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.params.len() {
            return Err(CocoError::ShapeMismatch(format!(
                "direction has {} entries, model has {}",
                v.len(),
                self.params.len()
            )));
        }
        let dir = self.params.with_theta(v.clone());
        match self.params.kind() {
            ModelKind::Linear | ModelKind::Logistic => {
                let mut ro = DMatrix::from_column_slice(self.x.nrows(), 1, (self.x * v).as_slice());
                self.output_curvature(&mut ro);
                Ok(self.x.tr_mul(&ro.column(0)))
            }
            ModelKind::Mlp => Ok(self.mlp_hvp(&dir)),
        }
    }

    fn mlp_hvp(&self, dir: &ModelParams) -> DVector<f64> {
        let params = self.params;
        let act = params.shape.activation;
        let fwd = &self.fwd;
        let offsets = params.shape.layer_offsets();
        let layers = offsets.len();
        let n = self.x.nrows();

        // Tangent forward: rz[l] = d z_l, ra[l] = d a_l (ra[0] = 0).
        let mut ra: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, params.shape.input)];
        let mut rz: Vec<DMatrix<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let (w, _) = params.layer(l);
            let (vw, vb) = dir.layer(l);
            let mut z = &fwd.acts[l] * vw.transpose();
            if l > 0 {
                z += &ra[l] * w.transpose();
            }
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(vb[j]);
            }
            if l + 1 < layers {
                let mut a = z.clone();
                a.zip_zip_apply(&fwd.pre[l], &fwd.acts[l + 1], |t, zz, aa| *t *= act.derivative(zz, aa));
                ra.push(a);
            }
            rz.push(z);
        }

        // Tangent backward.
        let mut out = DVector::zeros(params.len());
        let mut rdelta = rz[layers - 1].clone();
        self.output_curvature(&mut rdelta);
        for l in (0..layers).rev() {
            let (w_at, b_at) = offsets[l];
            let delta = &self.deltas[l];
            let mut rdw = rdelta.tr_mul(&fwd.acts[l]);
            if l > 0 {
                rdw += delta.tr_mul(&ra[l]);
            }
            write_layer_grad(&mut out, w_at, b_at, &rdw, &rdelta);
            if l == 0 {
                break;
            }
            let (w, _) = params.layer(l);
            let (vw, _) = dir.layer(l);
            let prev = delta * &w;
            let mut next = &rdelta * &w + delta * &vw;
            for c in 0..next.ncols() {
                for i in 0..n {
                    let z = fwd.pre[l - 1][(i, c)];
                    let a = fwd.acts[l][(i, c)];
                    next[(i, c)] = next[(i, c)] * act.derivative(z, a)
                        + prev[(i, c)] * act.second_derivative(a) * rz[l - 1][(i, c)];
                }
            }
            rdelta = next;
        }
        out
    }
}

/// Derivative `D` of the risk in a multiplicative output scale `w` at
/// `w = 1`, together with its gradient in the parameters.
///
/// For squared loss the scaled output is `w·f`; for the logistic model the
/// scale multiplies the logit; for a softmax Mlp it multiplies the logits.
pub fn output_scale_derivative(
    params: &ModelParams,
    data: &EnvironmentDataset,
    spec: RiskSpec,
) -> Result<(f64, DVector<f64>)> {
    check_input(params, &data.x)?;
    let fwd = forward(params, &data.x);
    let eval = eval_loss(params, &fwd, &data.y, spec)?;
    let out = fwd.acts.last().expect("output layer");
    let n = data.n();
    let nf = n as f64;
    // D = mean_i <u_i, f_i> with u = dℓ/df.
    let d = eval.out_grad.component_mul(out).sum() / nf;
    // dD/df_i = (∂u_i/∂f_i)ᵀ f_i + u_i
    let mut g_out = eval.out_grad.clone();
    match (spec.loss, params.kind()) {
        (Loss::Squared, _) => g_out += out,
        (Loss::CrossEntropy, ModelKind::Logistic) => {
            for i in 0..n {
                let p = eval.probs[(i, 0)];
                g_out[(i, 0)] += p * (1.0 - p) * out[(i, 0)];
            }
        }
        (Loss::CrossEntropy, _) => {
            for i in 0..n {
                let p = eval.probs.row(i);
                let f = out.row(i);
                let pf = p.dot(&f);
                for c in 0..out.ncols() {
                    g_out[(i, c)] += p[c] * (f[c] - pf);
                }
            }
        }
    }
    let grad = backward(params, &fwd, g_out / nf);
    Ok((d, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        let mut z = -25.0;
        while z < 25.0 {
            let (a, b) = (tanh(z), z.tanh());
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-300) + 1e-300, "z={z}: {a} vs {b}");
            z += 0.000_731;
        }
        for z in [1e-300, -1e-12, 5e-4, -9.99e-3, 1e-2, 20.0, -20.5] {
            assert!((tanh(z) - z.tanh()).abs() <= 1e-14 * z.tanh().abs());
        }
    }
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, p: usize, seed: u64, labels: Option<usize>) -> EnvironmentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| match labels {
            Some(k) => rng.random_range(0..k) as f64,
            None => rng.random_range(-2.0..2.0),
        });
        let names = (0..p).map(|j| format!("c{j}")).collect();
        EnvironmentDataset::new("t", x, y, names).unwrap()
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-8)
    }

    #[test]
    fn shapes_and_counts() {
        let s = ModelShape::mlp(8, vec![16, 16], 5, Activation::Tanh);
        assert_eq!(s.param_count(), 8 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5);
        assert_eq!(s.layer_offsets()[1], (8 * 16 + 16, 8 * 16 + 16 + 256));
        assert_eq!(s.input_column_indices(2)[1], 8 + 2);
        assert!(ModelParams::new(s, DVector::zeros(3)).is_err());
    }

    #[test]
    fn zero_parameters() {
        let d = data(5, 3, 1, None);
        let lin = ModelParams::zeros(ModelShape::linear(3)).unwrap();
        assert!(predict(&lin, &d.x).unwrap().iter().all(|&v| v == 0.0));
        let log = ModelParams::zeros(ModelShape::logistic(3)).unwrap();
        assert!(predict(&log, &d.x).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logistic_uniform_prediction_costs_ln2() {
        let mut d = data(6, 2, 1, Some(2));
        d.y = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let log = ModelParams::zeros(ModelShape::logistic(2)).unwrap();
        let r = empirical_risk(&log, &d, RiskSpec::CROSS_ENTROPY).unwrap();
        assert_abs_diff_eq!(r, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn identity_mlp_is_matrix_product() {
        let shape = ModelShape::mlp(3, vec![2], 1, Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::random(shape, 1.0, &mut rng).unwrap();
        // zero the biases so the network is exactly w B x
        let offs = params.shape.layer_offsets();
        for (l, (w_at, b_at)) in offs.iter().enumerate() {
            let width = params.shape.layer_sizes()[l + 1];
            let _ = w_at;
            for k in 0..width {
                params.theta[b_at + k] = 0.0;
            }
        }
        let (b, _) = params.layer(0);
        let (w, _) = params.layer(1);
        let d = data(4, 3, 9, None);
        let expected = &d.x * b.transpose() * w.transpose();
        assert_abs_diff_eq!(predict(&params, &d.x).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = data(20, 4, 2, None);
        let lin = ModelParams::random(ModelShape::linear(4), 1.0, &mut rng).unwrap();
        let g = risk_gradient(&lin, &d, RiskSpec::SQUARED).unwrap();
        let fd = risk_gradient_fd(&lin, &d, RiskSpec::SQUARED, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-6);

        let dc = data(20, 4, 2, Some(3));
        let mlp = ModelParams::random(ModelShape::mlp(4, vec![5, 3], 3, Activation::Tanh), 0.7, &mut rng).unwrap();
        let g = risk_gradient(&mlp, &dc, RiskSpec::CROSS_ENTROPY).unwrap();
        let fd = risk_gradient_fd(&mlp, &dc, RiskSpec::CROSS_ENTROPY, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn per_sample_rows_average_to_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = data(7, 3, 4, Some(2));
        let mlp = ModelParams::random(ModelShape::mlp(3, vec![4], 2, Activation::Tanh), 0.5, &mut rng).unwrap();
        let ps = per_sample_gradients(&mlp, &d, RiskSpec::CROSS_ENTROPY).unwrap();
        let g = risk_gradient(&mlp, &d, RiskSpec::CROSS_ENTROPY).unwrap();
        let mean = ps.row_mean().transpose();
        assert_abs_diff_eq!(mean, g, epsilon = 1e-12);
    }

    #[test]
    fn linear_per_sample_closed_form() {
        let d = data(4, 2, 8, None);
        let a = ModelParams::new(ModelShape::linear(2), DVector::from_vec(vec![0.5, -1.0])).unwrap();
        let ps = per_sample_gradients(&a, &d, RiskSpec::SQUARED).unwrap();
        for i in 0..4 {
            let r = d.x.row(i).dot(&a.theta.transpose()) - d.y[i];
            for j in 0..2 {
                assert_abs_diff_eq!(ps[(i, j)], r * d.x[(i, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn hvp_matches_explicit_hessian_for_linear() {
        let d = data(30, 3, 6, None);
        let a = ModelParams::new(ModelShape::linear(3), DVector::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let hv = hessian_vector_product(&a, &d, RiskSpec::SQUARED, &v).unwrap();
        let w = d.x.tr_mul(&d.x) / 30.0;
        assert_abs_diff_eq!(hv, &w * &v, epsilon = 1e-12);
        let fd = hessian_vector_product_fd(&a, &d, RiskSpec::SQUARED, &v, 1e-4).unwrap();
        assert_abs_diff_eq!(fd, &w * &v, epsilon = 1e-9);
    }

    #[test]
    fn exact_hvp_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = [
            (ModelParams::random(ModelShape::mlp(3, vec![4, 3], 3, Activation::Tanh), 0.8, &mut rng).unwrap(), data(20, 3, 8, Some(3)), RiskSpec::CROSS_ENTROPY),
            (ModelParams::random(ModelShape::mlp(3, vec![5], 1, Activation::Tanh), 0.8, &mut rng).unwrap(), data(20, 3, 9, None), RiskSpec::SQUARED),
            (ModelParams::random(ModelShape::logistic(3), 0.8, &mut rng).unwrap(), data(20, 3, 10, Some(2)), RiskSpec::CROSS_ENTROPY),
        ];
        for (params, d, spec) in cases {
            let v = ModelParams::random(params.shape.clone(), 1.0, &mut rng).unwrap().theta;
            let exact = hessian_vector_product(&params, &d, spec, &v).unwrap();
            let fd = hessian_vector_product_fd(&params, &d, spec, &v, 1e-5).unwrap();
            assert!(rel_err(&exact, &fd) < 1e-6, "{:?}: {exact} vs {fd}", params.kind());
        }
    }

    #[test]
    fn output_scale_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = data(15, 3, 7, Some(3));
        let mlp = ModelParams::random(ModelShape::mlp(3, vec![4], 3, Activation::Tanh), 0.8, &mut rng).unwrap();
        let (_, g) = output_scale_derivative(&mlp, &d, RiskSpec::CROSS_ENTROPY).unwrap();
        let mut fd = DVector::zeros(mlp.len());
        let h = 1e-5;
        for j in 0..mlp.len() {
            let mut up = mlp.clone();
            up.theta[j] += h;
            let mut dn = mlp.clone();
            dn.theta[j] -= h;
            let du = output_scale_derivative(&up, &d, RiskSpec::CROSS_ENTROPY).unwrap().0;
            let dd = output_scale_derivative(&dn, &d, RiskSpec::CROSS_ENTROPY).unwrap().0;
            fd[j] = (du - dd) / (2.0 * h);
        }
        assert!(rel_err(&g, &fd) < 1e-5);
    }

    #[test]
    fn loss_model_compatibility() {
        assert!(RiskSpec::CROSS_ENTROPY.validate(&ModelShape::linear(2)).is_err());
        assert!(RiskSpec::SQUARED.validate(&ModelShape::logistic(2)).is_err());
        assert!(RiskSpec::SQUARED
            .validate(&ModelShape::mlp(2, vec![3], 2, Activation::Tanh))
            .is_err());
    }
}
