use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_scores, PrototypeError, PrototypeStore};

pub const DEFAULT_HIDDEN: usize = 64;

/// Fully connected layer, `weight` is `outputs × inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights and biases uniform in `±1/√inputs`.
    pub fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        d.weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
        d.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-bound..bound));
        d
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn add_zero_outputs(&mut self, n: usize) {
        self.weight
            .extend(std::iter::repeat_n(0.0, n * self.inputs));
        self.bias.extend(std::iter::repeat_n(0.0, n));
        self.outputs += n;
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs)
    }

    /// Accumulates `dout ⊗ x` into the weight gradient and `dout` into the bias.
    fn accumulate(&mut self, dout: &[f64], x: &[f64]) {
        for (o, d) in dout.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut self.weight[o * self.inputs..(o + 1) * self.inputs];
            row.iter_mut().zip(x).for_each(|(w, v)| *w += d * v);
            self.bias[o] += d;
        }
    }

    /// `Wᵀ dout`.
    fn backward_input(&self, dout: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, d) in dout.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            dx.iter_mut().zip(row).for_each(|(a, w)| *a += d * w);
        }
        dx
    }
}

/// One ReLU hidden layer followed by a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
}

struct MlpTrace {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    fn new<R: Rng>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::uniform(inputs, hidden, rng),
            output: Dense::zeros(hidden, outputs),
        }
    }

    fn trace(&self, x: &[f64]) -> MlpTrace {
        let pre = self.hidden.forward(x);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let out = self.output.forward(&act);
        MlpTrace { pre, act, out }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).out
    }

    fn backward(&self, grad: &mut Mlp, t: &MlpTrace, x: &[f64], dout: &[f64]) {
        grad.output.accumulate(dout, &t.act);
        let dact = self.output.backward_input(dout);
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&t.pre)
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        grad.hidden.accumulate(&dpre, x);
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.hidden.params().chain(self.output.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.hidden.params_mut().chain(self.output.params_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaActivation {
    #[default]
    Sigmoid,
    Softmax,
}

/// The two gating networks. `alpha_net` maps `[f3d; f2d]` to two modality
/// logits; `gamma_net` maps it to one logit per novel class, in the order
/// of `gamma_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub dim3d: usize,
    pub dim2d: usize,
    pub hidden_width: usize,
    pub init_seed: u64,
    pub gamma_activation: GammaActivation,
    pub gamma_classes: Vec<String>,
    pub alpha_net: Mlp,
    pub gamma_net: Mlp,
}

impl GateParams {
    /// Hidden layers drawn from a seeded uniform; output layers zero so the
    /// initial fusion is α = (½, ½) and γ = ½.
    pub fn new(dim3d: usize, dim2d: usize, hidden_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dim3d + dim2d;
        Self {
            dim3d,
            dim2d,
            hidden_width,
            init_seed: seed,
            gamma_activation: GammaActivation::Sigmoid,
            gamma_classes: Vec::new(),
            alpha_net: Mlp::new(d, hidden_width, 2, &mut rng),
            gamma_net: Mlp::new(d, hidden_width, 0, &mut rng),
        }
    }

    pub fn with_gamma_activation(mut self, act: GammaActivation) -> Self {
        self.gamma_activation = act;
        self
    }

    /// Appends zero-initialized γ outputs for classes not yet covered.
    pub fn add_classes(&mut self, classes: &[String]) {
        for c in classes {
            if !self.gamma_classes.contains(c) {
                self.gamma_classes.push(c.clone());
                self.gamma_net.output.add_zero_outputs(1);
            }
        }
    }

    /// Fresh networks from the original seed, keeping the class list.
    pub fn reinitialized(&self) -> Self {
        let mut g = GateParams::new(self.dim3d, self.dim2d, self.hidden_width, self.init_seed)
            .with_gamma_activation(self.gamma_activation);
        g.add_classes(&self.gamma_classes);
        g
    }

    pub fn gamma_index(&self, class: &str) -> Option<usize> {
        self.gamma_classes.iter().position(|c| c == class)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.alpha_net
            .params()
            .chain(self.gamma_net.params())
            .copied()
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for p in self
            .alpha_net
            .params_mut()
            .chain(self.gamma_net.params_mut())
        {
            *p = *it.next().expect("parameter count");
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            alpha_net: self.alpha_net.zeros_like(),
            gamma_net: self.gamma_net.zeros_like(),
            ..self.clone()
        }
    }

    fn input(&self, f3d: &[f64], f2d: &[f64]) -> Result<Vec<f64>, PrototypeError> {
        if f3d.len() != self.dim3d || f2d.len() != self.dim2d {
            return Err(PrototypeError::DimensionMismatch(format!(
                "gate expects ({}, {}), got ({}, {})",
                self.dim3d,
                self.dim2d,
                f3d.len(),
                f2d.len()
            )));
        }
        Ok(f3d.iter().chain(f2d).copied().collect())
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gamma_activate(act: GammaActivation, u: &[f64]) -> Vec<f64> {
    match act {
        GammaActivation::Sigmoid => u.iter().map(|&v| sigmoid(v)).collect(),
        GammaActivation::Softmax if u.is_empty() => Vec::new(),
        GammaActivation::Softmax => softmax(u),
    }
}

/// Modality weights and per-class rebalancing for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub alpha3d: f64,
    pub alpha2d: f64,
    /// Aligned with `GateParams::gamma_classes`.
    pub gamma: Vec<f64>,
}

pub fn gate_forward(
    f3d: &[f64],
    f2d: &[f64],
    g: &GateParams,
) -> Result<GateOutput, PrototypeError> {
    let x = g.input(f3d, f2d)?;
    let alpha = softmax(&g.alpha_net.forward(&x));
    let gamma = gamma_activate(g.gamma_activation, &g.gamma_net.forward(&x));
    Ok(GateOutput {
        alpha3d: alpha[0],
        alpha2d: alpha[1],
        gamma,
    })
}

/// `γ ⊙ (α3D S3D + α2D S2D)` with one α pair per row.
pub fn fuse_scores(
    s3d: ArrayView2<f64>,
    s2d: ArrayView2<f64>,
    alpha: &[(f64, f64)],
    gamma: ArrayView2<f64>,
) -> Result<Array2<f64>, PrototypeError> {
    if s3d.dim() != s2d.dim() || s3d.dim() != gamma.dim() || alpha.len() != s3d.nrows() {
        return Err(PrototypeError::DimensionMismatch(format!(
            "S3D {:?}, S2D {:?}, gamma {:?}, {} alpha rows",
            s3d.dim(),
            s2d.dim(),
            gamma.dim(),
            alpha.len()
        )));
    }
    let mut out = Array2::zeros(s3d.dim());
    for ((n, c), v) in out.indexed_iter_mut() {
        let (a3, a2) = alpha[n];
        *v = gamma[(n, c)] * (a3 * s3d[(n, c)] + a2 * s2d[(n, c)]);
    }
    Ok(out)
}

/// One support sample: features of a positive location and its class index
/// into the trained class list (`None` = background).
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub f3d: Vec<f64>,
    pub f2d: Vec<f64>,
    pub label: Option<usize>,
}

struct Batch {
    inputs: Vec<Vec<f64>>,
    s3d: Array2<f64>,
    s2d: Array2<f64>,
    target: Array2<f64>,
    gamma_rows: Vec<usize>,
}

fn prepare(
    samples: &[GateSample],
    g: &GateParams,
    store: &PrototypeStore,
    classes: &[String],
) -> Result<Batch, PrototypeError> {
    if samples.is_empty() {
        return Err(PrototypeError::EmptySupport);
    }
    let gamma_rows = classes
        .iter()
        .map(|c| {
            g.gamma_index(c)
                .ok_or_else(|| PrototypeError::UnknownCategory(c.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (p3, p2) = store.matrices(classes)?;
    let n = samples.len();
    let mut f3 = Array2::zeros((n, g.dim3d));
    let mut f2 = Array2::zeros((n, g.dim2d));
    let mut target = Array2::zeros((n, classes.len()));
    let mut inputs = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        inputs.push(g.input(&s.f3d, &s.f2d)?);
        f3.row_mut(i).assign(&ndarray::ArrayView1::from(&s.f3d));
        f2.row_mut(i).assign(&ndarray::ArrayView1::from(&s.f2d));
        if let Some(l) = s.label {
            if l >= classes.len() {
                return Err(PrototypeError::DimensionMismatch(format!(
                    "label {l} for {} classes",
                    classes.len()
                )));
            }
            target[(i, l)] = 1.0;
        }
    }
    Ok(Batch {
        inputs,
        s3d: class_scores(f3.view(), p3.view())?,
        s2d: class_scores(f2.view(), p2.view())?,
        target,
        gamma_rows,
    })
}

fn batch_loss_and_grad(g: &GateParams, b: &Batch, want_grad: bool) -> (f64, GateParams) {
    let (n, c) = b.target.dim();
    let inv = 1.0 / (n * c) as f64;
    let mut grad = g.zeros_like();
    let mut loss = 0.0;
    for (i, x) in b.inputs.iter().enumerate() {
        let ta = g.alpha_net.trace(x);
        let tg = g.gamma_net.trace(x);
        let alpha = softmax(&ta.out);
        let gamma = gamma_activate(g.gamma_activation, &tg.out);

        let mut dalpha = [0.0; 2];
        let mut dgamma = vec![0.0; gamma.len()];
        for (col, &row) in b.gamma_rows.iter().enumerate() {
            let (s3, s2, y) = (b.s3d[(i, col)], b.s2d[(i, col)], b.target[(i, col)]);
            let m = alpha[0] * s3 + alpha[1] * s2;
            let s = gamma[row] * m;
            loss += ((1.0 - s) * y + s * (1.0 - y)) * inv;
            let ds = (1.0 - 2.0 * y) * inv;
            dgamma[row] += ds * m;
            let dm = ds * gamma[row];
            dalpha[0] += dm * s3;
            dalpha[1] += dm * s2;
        }
        if !want_grad {
            continue;
        }
        let dot = alpha[0] * dalpha[0] + alpha[1] * dalpha[1];
        let dz = [alpha[0] * (dalpha[0] - dot), alpha[1] * (dalpha[1] - dot)];
        let du: Vec<f64> = match g.gamma_activation {
            GammaActivation::Sigmoid => gamma
                .iter()
                .zip(&dgamma)
                .map(|(gm, d)| d * gm * (1.0 - gm))
                .collect(),
            GammaActivation::Softmax => {
                let dot: f64 = gamma.iter().zip(&dgamma).map(|(a, b)| a * b).sum();
                gamma
                    .iter()
                    .zip(&dgamma)
                    .map(|(gm, d)| gm * (d - dot))
                    .collect()
            }
        };
        g.alpha_net.backward(&mut grad.alpha_net, &ta, x, &dz);
        g.gamma_net.backward(&mut grad.gamma_net, &tg, x, &du);
    }
    (loss, grad)
}

/// Incremental loss over `classes` and its gradient with respect to every
/// gate parameter (returned in the shape of `GateParams`).
pub fn gate_loss_and_grad(
    samples: &[GateSample],
    g: &GateParams,
    store: &PrototypeStore,
    classes: &[String],
) -> Result<(f64, GateParams), PrototypeError> {
    let b = prepare(samples, g, store, classes)?;
    Ok(batch_loss_and_grad(g, &b, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateTraining {
    pub params: GateParams,
    /// Loss before the first step and after every step.
    pub trace: Vec<f64>,
}

/// Full-batch gradient descent on the incremental loss; prototypes stay
/// untouched.
pub fn train_gates(
    samples: &[GateSample],
    g: &GateParams,
    store: &PrototypeStore,
    classes: &[String],
    epochs: usize,
    lr: f64,
) -> Result<GateTraining, PrototypeError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(PrototypeError::InvalidLearningRate(lr));
    }
    let batch = prepare(samples, g, store, classes)?;
    let mut params = g.clone();
    let mut trace = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let (loss, grad) = batch_loss_and_grad(&params, &batch, epoch < epochs);
        trace.push(loss);
        if !loss.is_finite() {
            return Err(PrototypeError::NonFiniteLoss { epoch, trace });
        }
        if epoch == epochs {
            break;
        }
        for (p, d) in params
            .alpha_net
            .params_mut()
            .chain(params.gamma_net.params_mut())
            .zip(grad.alpha_net.params().chain(grad.gamma_net.params()))
        {
            *p -= lr * d;
        }
    }
    Ok(GateTraining { params, trace })
}
