//! Encoder, decoder and classifier head with their three objective terms.
//!
//! Layout:
//!
//! ```text
//! x ─ Dense ─ tanh ─┬─ Dense → mu      ┐
//!                   └─ Dense → logvar  ┴─ z = mu + exp(logvar/2)·ε
//! z ─ Dense ─ tanh ─ Dense ─ sigmoid → x̂
//! z ─ Dense → logits          (single affine map, no hidden layer)
//! ```
//!
//! Gradients are derived by hand for this fixed chain; noise `ε` is always
//! supplied by the caller.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::numerics::{self, Activation, Dense, DenseTrace, Matrix, NumericsError, ParameterSet};

pub const LATENT_DIM: usize = 3;

pub type Vec3 = [f64; LATENT_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("input has dimension {got}, model expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("value {value} at component {index} lies outside [0, 1]")]
    OutOfUnitInterval { index: usize, value: f64 },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter payload has {got} values, architecture needs {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer widths. The latent width is fixed at three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: 128,
            decoder_hidden: 128,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return Err(ModelError::Architecture("layer widths must be at least 1".into()));
        }
        if self.classes < 1 {
            return Err(ModelError::Architecture("at least one class is required".into()));
        }
        Ok(())
    }
}

/// All weights and biases of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub encoder_hidden: Dense,
    pub encoder_mu: Dense,
    pub encoder_logvar: Dense,
    pub decoder_hidden: Dense,
    pub decoder_output: Dense,
    pub classifier: Dense,
}

/// Which sub-network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Classifier,
}

impl ModelParameters {
    /// Glorot-uniform initialisation, deterministic in `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder_hidden: Dense::glorot(arch.input_dim, arch.encoder_hidden, &mut rng),
            encoder_mu: Dense::glorot(arch.encoder_hidden, LATENT_DIM, &mut rng),
            encoder_logvar: Dense::glorot(arch.encoder_hidden, LATENT_DIM, &mut rng),
            decoder_hidden: Dense::glorot(LATENT_DIM, arch.decoder_hidden, &mut rng),
            decoder_output: Dense::glorot(arch.decoder_hidden, arch.input_dim, &mut rng),
            classifier: Dense::glorot(LATENT_DIM, arch.classes, &mut rng),
        })
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            encoder_hidden: Dense::zeros(arch.input_dim, arch.encoder_hidden),
            encoder_mu: Dense::zeros(arch.encoder_hidden, LATENT_DIM),
            encoder_logvar: Dense::zeros(arch.encoder_hidden, LATENT_DIM),
            decoder_hidden: Dense::zeros(LATENT_DIM, arch.decoder_hidden),
            decoder_output: Dense::zeros(arch.decoder_hidden, arch.input_dim),
            classifier: Dense::zeros(LATENT_DIM, arch.classes),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.encoder_hidden.fan_in(),
            encoder_hidden: self.encoder_hidden.fan_out(),
            decoder_hidden: self.decoder_hidden.fan_out(),
            classes: self.classifier.fan_out(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_hidden.fan_in()
    }

    pub fn classes(&self) -> usize {
        self.classifier.fan_out()
    }

    fn layers(&self) -> [&Dense; 6] {
        [
            &self.encoder_hidden,
            &self.encoder_mu,
            &self.encoder_logvar,
            &self.decoder_hidden,
            &self.decoder_output,
            &self.classifier,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 6] {
        [
            &mut self.encoder_hidden,
            &mut self.encoder_mu,
            &mut self.encoder_logvar,
            &mut self.decoder_hidden,
            &mut self.decoder_output,
            &mut self.classifier,
        ]
    }

    /// Sub-network owning tensor `t` in [`ParameterSet::tensors`] order.
    pub fn part_of_tensor(t: usize) -> Part {
        match t / 2 {
            0..=2 => Part::Encoder,
            3 | 4 => Part::Decoder,
            _ => Part::Classifier,
        }
    }

    /// All parameters concatenated in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        arch.validate()?;
        let mut params = Self::zeros(arch);
        let expected = params.parameter_count();
        if flat.len() != expected {
            return Err(ModelError::PayloadLength {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl ParameterSet for ModelParameters {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().into_iter().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Gradient of the total loss, shape-congruent with [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParameters);

impl ParameterSet for Gradients {
    fn tensors(&self) -> Vec<&[f64]> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.tensors_mut()
    }
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Gradient step on the full parameter set.
pub fn sgd_step(params: &ModelParameters, grads: &Gradients, lr: f64) -> Result<ModelParameters> {
    Ok(numerics::sgd_step(params, grads, lr)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentCode {
    pub mu: Vec3,
    pub logvar: Vec3,
    pub z: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub classification: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(reconstruction: f64, kl: f64, classification: f64, weights: LossWeights) -> Self {
        Self {
            reconstruction,
            kl,
            classification,
            total: reconstruction + weights.beta * kl + weights.lambda * classification,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite()
            && self.kl.is_finite()
            && self.classification.is_finite()
            && self.total.is_finite()
    }
}

/// Weights of the KL (`beta`) and classification (`lambda`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 10.0,
        }
    }
}

fn row_matrix(x: &[f64]) -> Matrix {
    Matrix::from_vec(1, x.len(), x.to_vec())
}

fn vec3(row: &[f64]) -> Vec3 {
    [row[0], row[1], row[2]]
}

/// Posterior mean and log-variance for one sample.
pub fn encode(x: &[f64], params: &ModelParameters) -> Result<(Vec3, Vec3)> {
    if x.len() != params.input_dim() {
        return Err(ModelError::InputDimension {
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let (mu, logvar) = encode_batch(Exec::Sequential, &row_matrix(x), params)?;
    Ok((vec3(mu.row(0)), vec3(logvar.row(0))))
}

/// Row-wise [`encode`] over a batch.
pub fn encode_batch(exec: Exec, x: &Matrix, params: &ModelParameters) -> Result<(Matrix, Matrix)> {
    if x.cols() != params.input_dim() {
        return Err(ModelError::InputDimension {
            expected: params.input_dim(),
            got: x.cols(),
        });
    }
    let h = Activation::Tanh.forward(&params.encoder_hidden.forward(exec, x)?);
    let mu = params.encoder_mu.forward(exec, &h)?;
    let logvar = params.encoder_logvar.forward(exec, &h)?;
    Ok((mu, logvar))
}

/// `z = mu + exp(logvar/2) ⊙ noise`.
pub fn reparameterize(mu: Vec3, logvar: Vec3, noise: Vec3) -> Vec3 {
    std::array::from_fn(|i| mu[i] + (0.5 * logvar[i]).exp() * noise[i])
}

pub fn latent_code(mu: Vec3, logvar: Vec3, noise: Vec3) -> LatentCode {
    LatentCode {
        mu,
        logvar,
        z: reparameterize(mu, logvar, noise),
    }
}

fn decoder_logits(exec: Exec, z: &Matrix, params: &ModelParameters) -> Result<Matrix> {
    let g = Activation::Tanh.forward(&params.decoder_hidden.forward(exec, z)?);
    Ok(params.decoder_output.forward(exec, &g)?)
}

/// Reconstruction in `(0, 1)^d`.
pub fn decode(z: Vec3, params: &ModelParameters) -> Vec<f64> {
    decoder_logits(Exec::Sequential, &row_matrix(&z), params)
        .expect("latent width is fixed")
        .into_vec()
        .into_iter()
        .map(numerics::sigmoid)
        .collect()
}

/// Class logits: one affine map of `z`.
pub fn classify(z: Vec3, params: &ModelParameters) -> Vec<f64> {
    params
        .classifier
        .forward(Exec::Sequential, &row_matrix(&z))
        .expect("latent width is fixed")
        .into_vec()
}

pub fn predict_class(z: Vec3, params: &ModelParameters) -> usize {
    argmax(&classify(z, params))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Summed Bernoulli cross-entropy `−Σ [x ln x̂ + (1−x) ln(1−x̂)]`.
pub fn loss_reconstruction(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(ModelError::InputDimension {
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    let mut total = 0.0;
    for (index, (&xi, &pi)) in x.iter().zip(x_hat).enumerate() {
        if !(0.0..=1.0).contains(&xi) {
            return Err(ModelError::OutOfUnitInterval { index, value: xi });
        }
        if xi > 0.0 {
            total -= xi * pi.ln();
        }
        if xi < 1.0 {
            total -= (1.0 - xi) * (1.0 - pi).ln();
        }
    }
    Ok(total)
}

/// KL divergence from `N(mu, diag(exp(logvar)))` to `N(0, I)`.
pub fn loss_kl(mu: Vec3, logvar: Vec3) -> f64 {
    0.5 * mu
        .iter()
        .zip(&logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy `−ln softmax(logits)[label]`.
pub fn loss_classification(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

#[inline]
fn softplus(o: f64) -> f64 {
    o.max(0.0) + (-o.abs()).exp().ln_1p()
}

struct Forward {
    enc_trace: DenseTrace,
    h: Matrix,
    mu_trace: DenseTrace,
    logvar_trace: DenseTrace,
    mu: Matrix,
    logvar: Matrix,
    dec_trace: DenseTrace,
    g: Matrix,
    out_trace: DenseTrace,
    out_logits: Matrix,
    cls_trace: DenseTrace,
    class_logits: Matrix,
}

fn check_batch(batch: &Matrix, labels: &[Option<usize>], noise: &Matrix, params: &ModelParameters) -> Result<()> {
    if batch.cols() != params.input_dim() {
        return Err(ModelError::InputDimension {
            expected: params.input_dim(),
            got: batch.cols(),
        });
    }
    if noise.shape() != (batch.rows(), LATENT_DIM) {
        return Err(NumericsError::Shape {
            op: "noise",
            left: (batch.rows(), LATENT_DIM),
            right: noise.shape(),
        }
        .into());
    }
    if labels.len() != batch.rows() {
        return Err(NumericsError::Shape {
            op: "labels",
            left: batch.shape(),
            right: (labels.len(), 1),
        }
        .into());
    }
    let classes = params.classes();
    if let Some(&label) = labels.iter().flatten().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn forward(exec: Exec, batch: &Matrix, noise: &Matrix, params: &ModelParameters) -> Result<Forward> {
    let mut enc_trace = DenseTrace::default();
    let h = Activation::Tanh.forward(&params.encoder_hidden.forward_traced(exec, batch, &mut enc_trace)?);
    let mut mu_trace = DenseTrace::default();
    let mu = params.encoder_mu.forward_traced(exec, &h, &mut mu_trace)?;
    let mut logvar_trace = DenseTrace::default();
    let logvar = params.encoder_logvar.forward_traced(exec, &h, &mut logvar_trace)?;

    let mut z = Matrix::zeros(batch.rows(), LATENT_DIM);
    for i in 0..batch.rows() {
        let zi = reparameterize(vec3(mu.row(i)), vec3(logvar.row(i)), vec3(noise.row(i)));
        z.row_mut(i).copy_from_slice(&zi);
    }

    let mut dec_trace = DenseTrace::default();
    let g = Activation::Tanh.forward(&params.decoder_hidden.forward_traced(exec, &z, &mut dec_trace)?);
    let mut out_trace = DenseTrace::default();
    let out_logits = params.decoder_output.forward_traced(exec, &g, &mut out_trace)?;
    let mut cls_trace = DenseTrace::default();
    let class_logits = params.classifier.forward_traced(exec, &z, &mut cls_trace)?;

    Ok(Forward {
        enc_trace,
        h,
        mu_trace,
        logvar_trace,
        mu,
        logvar,
        dec_trace,
        g,
        out_trace,
        out_logits,
        cls_trace,
        class_logits,
    })
}

fn losses(fwd: &Forward, batch: &Matrix, labels: &[Option<usize>], weights: LossWeights) -> LossBreakdown {
    let b = batch.rows() as f64;
    let reconstruction = batch
        .data()
        .iter()
        .zip(fwd.out_logits.data())
        .map(|(&x, &o)| softplus(o) - x * o)
        .sum::<f64>()
        / b;
    let kl = (0..batch.rows())
        .map(|i| loss_kl(vec3(fwd.mu.row(i)), vec3(fwd.logvar.row(i))))
        .sum::<f64>()
        / b;
    let labeled = labels.iter().flatten().count();
    let classification = if labeled == 0 {
        0.0
    } else {
        labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| log_sum_exp(fwd.class_logits.row(i)) - fwd.class_logits.get(i, l)))
            .sum::<f64>()
            / labeled as f64
    };
    LossBreakdown::combine(reconstruction, kl, classification, weights)
}

/// Objective on a batch.
///
/// Reconstruction and KL are averaged over every row; classification over
/// the rows whose label is `Some` (zero when there are none). `noise` holds
/// one standard-normal triple per row.
pub fn total_loss(
    batch: &Matrix,
    labels: &[Option<usize>],
    params: &ModelParameters,
    noise: &Matrix,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    total_loss_with(Exec::default(), batch, labels, params, noise, weights)
}

pub fn total_loss_with(
    exec: Exec,
    batch: &Matrix,
    labels: &[Option<usize>],
    params: &ModelParameters,
    noise: &Matrix,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    check_batch(batch, labels, noise, params)?;
    let fwd = forward(exec, batch, noise, params)?;
    Ok(losses(&fwd, batch, labels, weights))
}

/// Loss plus exact gradients of `total` wrt every parameter, noise held fixed.
pub fn loss_and_gradients(
    exec: Exec,
    batch: &Matrix,
    labels: &[Option<usize>],
    params: &ModelParameters,
    noise: &Matrix,
    weights: LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    check_batch(batch, labels, noise, params)?;
    let fwd = forward(exec, batch, noise, params)?;
    let loss = losses(&fwd, batch, labels, weights);
    let rows = batch.rows();
    let b = rows as f64;

    // d rec / d output logits = (σ(o) − x) / B
    let mut d_out = fwd.out_logits.map(numerics::sigmoid);
    for (d, &x) in d_out.data_mut().iter_mut().zip(batch.data()) {
        *d = (*d - x) / b;
    }
    let (dg, grad_dec_out) = params.decoder_output.backward(exec, &fwd.out_trace, &d_out)?;
    let da2 = Activation::Tanh.backward(&fwd.g, &dg)?;
    let (mut dz, grad_dec_hidden) = params.decoder_hidden.backward(exec, &fwd.dec_trace, &da2)?;

    let labeled = labels.iter().flatten().count();
    let mut d_cls = Matrix::zeros(rows, params.classes());
    if labeled > 0 {
        let scale = weights.lambda / labeled as f64;
        for (i, label) in labels.iter().enumerate() {
            if let Some(label) = *label {
                let logits = fwd.class_logits.row(i);
                let lse = log_sum_exp(logits);
                for (c, d) in d_cls.row_mut(i).iter_mut().enumerate() {
                    let p = (logits[c] - lse).exp();
                    *d = scale * (p - if c == label { 1.0 } else { 0.0 });
                }
            }
        }
    }
    let (dz_cls, grad_cls) = params.classifier.backward(exec, &fwd.cls_trace, &d_cls)?;
    for (a, c) in dz.data_mut().iter_mut().zip(dz_cls.data()) {
        *a += c;
    }

    let mut d_mu = Matrix::zeros(rows, LATENT_DIM);
    let mut d_logvar = Matrix::zeros(rows, LATENT_DIM);
    for i in 0..rows {
        for k in 0..LATENT_DIM {
            let mu = fwd.mu.get(i, k);
            let lv = fwd.logvar.get(i, k);
            let eps = noise.get(i, k);
            let dzik = dz.get(i, k);
            d_mu.set(i, k, dzik + weights.beta * mu / b);
            d_logvar.set(
                i,
                k,
                dzik * eps * 0.5 * (0.5 * lv).exp() + weights.beta * 0.5 * (lv.exp() - 1.0) / b,
            );
        }
    }
    let (dh_mu, grad_mu) = params.encoder_mu.backward(exec, &fwd.mu_trace, &d_mu)?;
    let (dh_lv, grad_lv) = params.encoder_logvar.backward(exec, &fwd.logvar_trace, &d_logvar)?;
    let mut dh = dh_mu;
    for (a, c) in dh.data_mut().iter_mut().zip(dh_lv.data()) {
        *a += c;
    }
    let da1 = Activation::Tanh.backward(&fwd.h, &dh)?;
    let (_, grad_enc) = params.encoder_hidden.backward(exec, &fwd.enc_trace, &da1)?;

    Ok((
        loss,
        Gradients(ModelParameters {
            encoder_hidden: grad_enc,
            encoder_mu: grad_mu,
            encoder_logvar: grad_lv,
            decoder_hidden: grad_dec_hidden,
            decoder_output: grad_dec_out,
            classifier: grad_cls,
        }),
    ))
}
