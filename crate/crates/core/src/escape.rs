//! Local-minimum escape analysis.
//!
//! Dense noise covariances and Hessians over a model's flat parameter vector,
//! the `(t eta / 2) Tr(H Sigma)` escaping-efficiency estimate, the ingredients
//! of the mixed-loss bound (`F_p`, `H_p`, `M`), and an Euler-Maruyama
//! simulator of `dW = -grad L dt + sqrt(eta Sigma) dB` used to check the
//! estimate by Monte Carlo.
//!
//! Matrices are `P x P` with `P <= PARAM_CAP`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::{LossSpec, MixWeights};
use crate::math::{softmax, RandomSource};
use crate::model::ClassifierModel;

/// Largest parameter count for which dense `P x P` matrices are built.
pub const PARAM_CAP: usize = 2000;

/// Most negative eigenvalue still accepted as positive semidefinite.
pub const PSD_TOLERANCE: f64 = -1e-8;

/// Maximum `|A - A^T|` accepted as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

fn check_cap(params: usize) -> Result<()> {
    if params > PARAM_CAP {
        return Err(Error::TooManyParameters { params, cap: PARAM_CAP });
    }
    Ok(())
}

fn check_data(model: &ClassifierModel, data: &Dataset) -> Result<()> {
    check_cap(model.param_count())?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset features",
            expected: model.input_dim(),
            found: data.dim(),
        });
    }
    Ok(())
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Symmetric square root with negative eigenvalues clipped to zero.
/// Fails if any eigenvalue is below `PSD_TOLERANCE`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(invalid("square root of a non-square matrix"));
    }
    if max_asymmetry(m) > SYMMETRY_TOLERANCE {
        return Err(invalid("square root of a non-symmetric matrix"));
    }
    let eig = SymmetricEigen::new(m.clone());
    let lowest = eig.eigenvalues.min();
    if lowest < PSD_TOLERANCE {
        return Err(Error::NotPsd(lowest));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Minibatch gradient-noise covariance with its batch size and sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    matrix: DMatrix<f64>,
    batch_size: usize,
    samples: usize,
}

impl CovarianceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.matrix)
    }
}

/// Flattened gradient of `loss` at every sample, in dataset order.
pub fn per_sample_gradients(model: &ClassifierModel, data: &Dataset, loss: &LossSpec) -> Result<Vec<Vec<f64>>> {
    check_data(model, data)?;
    data.iter()
        .map(|(x, y)| Ok(model.backward_loss(x, y, loss)?.1.into_vec()))
        .collect()
}

/// `(1/m) [ (1/N) sum g_i g_i^T - gbar gbar^T ]`, accumulated from centered
/// gradients so the result is exactly symmetric and exactly zero when all
/// gradients agree.
pub fn noise_covariance_from_gradients(grads: &[Vec<f64>], batch_size: usize) -> Result<CovarianceMatrix> {
    let n = grads.len();
    if n == 0 {
        return Err(Error::Empty("gradient list"));
    }
    if batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let p = grads[0].len();
    check_cap(p)?;
    if let Some(g) = grads.iter().find(|g| g.len() != p) {
        return Err(Error::DimensionMismatch {
            context: "per-sample gradient",
            expected: p,
            found: g.len(),
        });
    }
    let mut mean = vec![0.0; p];
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(p, n, |k, i| grads[i][k] - mean[k]);
    let mut matrix = &centered * centered.transpose();
    let scale = 1.0 / (n as f64 * batch_size as f64);
    for i in 0..p {
        for j in i..p {
            let v = matrix[(i, j)] * scale;
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("noise covariance".into()));
    }
    Ok(CovarianceMatrix {
        matrix,
        batch_size,
        samples: n,
    })
}

pub fn noise_covariance(
    model: &ClassifierModel,
    data: &Dataset,
    loss: &LossSpec,
    batch_size: usize,
) -> Result<CovarianceMatrix> {
    noise_covariance_from_gradients(&per_sample_gradients(model, data, loss)?, batch_size)
}

/// Finite-difference Hessian and the asymmetry it had before symmetrizing.
#[derive(Debug, Clone, PartialEq)]
pub struct FdHessian {
    pub matrix: DMatrix<f64>,
    /// `max |H - H^T|` of the raw difference quotients.
    pub asymmetry: f64,
}

/// Central differences of `gradient` around `theta` with step
/// `1e-4 (1 + |theta_k|)`, then `(H + H^T) / 2`.
pub fn fd_hessian(theta: &[f64], gradient: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<FdHessian> {
    let p = theta.len();
    check_cap(p)?;
    let mut raw = DMatrix::zeros(p, p);
    let mut probe = theta.to_vec();
    for k in 0..p {
        let h = 1e-4 * (1.0 + theta[k].abs());
        probe[k] = theta[k] + h;
        let up = gradient(&probe)?;
        let hi = probe[k];
        probe[k] = theta[k] - h;
        let down = gradient(&probe)?;
        let width = hi - probe[k];
        probe[k] = theta[k];
        if up.len() != p || down.len() != p {
            return Err(Error::DimensionMismatch {
                context: "gradient in Hessian",
                expected: p,
                found: up.len(),
            });
        }
        for i in 0..p {
            raw[(i, k)] = (up[i] - down[i]) / width;
        }
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Hessian entry".into()));
    }
    let asymmetry = max_asymmetry(&raw);
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(FdHessian { matrix, asymmetry })
}

/// Mean gradient of `loss` over `data` with the model's parameters replaced by `theta`.
pub fn mean_gradient_at(model: &ClassifierModel, data: &Dataset, loss: &LossSpec, theta: &[f64]) -> Result<Vec<f64>> {
    let mut m = model.clone();
    m.params_mut().copy_from_slice(theta);
    let mut acc = vec![0.0; theta.len()];
    for (x, y) in data.iter() {
        let (_, g) = m.backward_loss(x, y, loss)?;
        for (a, v) in acc.iter_mut().zip(g.as_slice()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= data.len() as f64);
    Ok(acc)
}

/// Hessian of the mean loss over `data`, with the raw asymmetry.
pub fn hessian_with_asymmetry(model: &ClassifierModel, data: &Dataset, loss: &LossSpec) -> Result<FdHessian> {
    check_data(model, data)?;
    fd_hessian(model.params(), |theta| mean_gradient_at(model, data, loss, theta))
}

pub fn hessian(model: &ClassifierModel, data: &Dataset, loss: &LossSpec) -> Result<DMatrix<f64>> {
    Ok(hessian_with_asymmetry(model, data, loss)?.matrix)
}

/// Where the learning rate enters the escaping-efficiency estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaConvention {
    /// `(t eta / 2) Tr(H Sigma)`, consistent with diffusion `sqrt(eta Sigma)`.
    #[default]
    Scaled,
    /// `(t / 2) Tr(H Sigma)`; `eta` is ignored.
    Omitted,
}

/// `Tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.ncols() || a.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "trace of product",
            expected: a.nrows(),
            found: b.ncols(),
        });
    }
    let mut sum = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            sum += a[(i, j)] * b[(j, i)];
        }
    }
    Ok(sum)
}

pub fn escaping_efficiency_estimate(
    hessian: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    t: f64,
    lr: f64,
    convention: EtaConvention,
) -> Result<f64> {
    if hessian.shape() != sigma.shape() || !hessian.is_square() {
        return Err(Error::DimensionMismatch {
            context: "Hessian vs covariance",
            expected: hessian.nrows(),
            found: sigma.nrows(),
        });
    }
    let eta = match convention {
        EtaConvention::Scaled => lr,
        EtaConvention::Omitted => 1.0,
    };
    Ok(0.5 * t * eta * trace_of_product(hessian, sigma)?)
}

/// `F_p = E[grad p_y grad p_y^T]`, `H_p = -E[hess p_y]`, and `M = max p_y`
/// over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeQuantities {
    pub f_p: DMatrix<f64>,
    pub h_p: DMatrix<f64>,
    pub m_cap: f64,
}

impl EscapeQuantities {
    /// `Tr(F_p F_p^T + 2 H_p F_p)` via matrix products.
    pub fn trace_term(&self) -> f64 {
        (&self.f_p * self.f_p.transpose() + (&self.h_p * &self.f_p) * 2.0).trace()
    }

    /// The same trace as a Frobenius norm plus an entrywise sum.
    pub fn trace_term_entrywise(&self) -> f64 {
        let frob: f64 = self.f_p.iter().map(|v| v * v).sum();
        let cross = trace_of_product(&self.h_p, &self.f_p).unwrap_or(f64::NAN);
        frob + 2.0 * cross
    }
}

/// Since `EL = 1 - p_y`, the gradient of `p_y` is minus the EL gradient and
/// `H_p` is the Hessian of the mean EL.
pub fn escape_quantities(model: &ClassifierModel, batch: &Dataset) -> Result<EscapeQuantities> {
    check_data(model, batch)?;
    let p = model.param_count();
    let mut f_p = DMatrix::zeros(p, p);
    let mut m_cap: f64 = 0.0;
    for (x, y) in batch.iter() {
        let probs = softmax(&model.forward(x)?);
        m_cap = m_cap.max(probs.as_slice()[y]);
        let (_, g) = model.backward_loss(x, y, &LossSpec::El)?;
        let g = DVector::from_iterator(p, g.as_slice().iter().map(|v| -v));
        f_p += &g * g.transpose();
    }
    f_p /= batch.len() as f64;
    let h_p = hessian(model, batch, &LossSpec::El)?;
    Ok(EscapeQuantities { f_p, h_p, m_cap })
}

/// `(beta^3 + 3 beta^2 / M + beta (2 / M^2 + 1 / M)) Tr(F_p F_p^T + 2 H_p F_p)`.
pub fn ee_rhs_bound(q: &EscapeQuantities, beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(invalid(format!("beta must be >= 0, got {beta}")));
    }
    if !(q.m_cap > 0.0 && q.m_cap <= 1.0) {
        return Err(invalid(format!("M must be in (0, 1], got {}", q.m_cap)));
    }
    Ok(rhs_coefficient(beta, q.m_cap) * q.trace_term())
}

pub fn rhs_coefficient(beta: f64, m: f64) -> f64 {
    beta.powi(3) + 3.0 * beta * beta / m + beta * (2.0 / (m * m) + 1.0 / m)
}

/// A differentiable objective over a flat parameter vector.
pub trait Landscape: Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> Result<f64>;
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// `L(w) = 1/2 w^T H w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    h: DMatrix<f64>,
}

impl Quadratic {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if !h.is_square() || h.is_empty() {
            return Err(invalid("quadratic needs a non-empty square matrix"));
        }
        if max_asymmetry(&h) > SYMMETRY_TOLERANCE {
            return Err(invalid("quadratic matrix must be symmetric"));
        }
        Ok(Self { h })
    }

    pub fn diagonal(curvatures: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(curvatures)))
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }
}

impl Landscape for Quadratic {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let w = DVector::from_column_slice(w);
        Ok(0.5 * w.dot(&(&self.h * &w)))
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.h * DVector::from_column_slice(w)).as_slice().to_vec())
    }
}

/// `L(w) = w^4/4 + (1 - r) w^3/3 - r w^2/2`, so `L'(w) = w (w + 1)(w - r)`.
/// Minima at `-1` (curvature `1 + r`) and `r` (curvature `r (1 + r)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleWell {
    ratio: f64,
}

impl DoubleWell {
    pub fn new(sharpness_ratio: f64) -> Result<Self> {
        if !(sharpness_ratio.is_finite() && sharpness_ratio >= 1.0) {
            return Err(invalid(format!("sharpness ratio must be >= 1, got {sharpness_ratio}")));
        }
        Ok(Self { ratio: sharpness_ratio })
    }

    pub fn sharpness_ratio(&self) -> f64 {
        self.ratio
    }

    pub fn wide_minimum(&self) -> f64 {
        -1.0
    }

    pub fn sharp_minimum(&self) -> f64 {
        self.ratio
    }

    /// Position of the barrier between the two minima.
    pub fn barrier(&self) -> f64 {
        0.0
    }

    pub fn loss(&self, w: f64) -> f64 {
        let r = self.ratio;
        w.powi(4) / 4.0 + (1.0 - r) * w.powi(3) / 3.0 - r * w * w / 2.0
    }

    pub fn slope(&self, w: f64) -> f64 {
        w * (w + 1.0) * (w - self.ratio)
    }

    pub fn curvature(&self, w: f64) -> f64 {
        let r = self.ratio;
        3.0 * w * w + 2.0 * (1.0 - r) * w - r
    }
}

impl Landscape for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.loss(w[0]))
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.slope(w[0])])
    }
}

/// Mean loss of a model over a dataset plus `l2 / 2 |theta|^2`.
#[derive(Debug, Clone)]
pub struct ModelLandscape {
    model: ClassifierModel,
    data: Dataset,
    loss: LossSpec,
    l2: f64,
}

impl ModelLandscape {
    pub fn new(model: ClassifierModel, data: Dataset, loss: LossSpec, l2: f64) -> Result<Self> {
        check_data(&model, &data)?;
        if !loss.has_gradient() {
            return Err(Error::Unsupported(format!("loss {:?} has no gradient", loss.name())));
        }
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(invalid("l2 must be >= 0"));
        }
        Ok(Self { model, data, loss, l2 })
    }

    pub fn params(&self) -> &[f64] {
        self.model.params()
    }
}

impl Landscape for ModelLandscape {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let mut m = self.model.clone();
        m.params_mut().copy_from_slice(w);
        let mut total = 0.0;
        for (x, y) in self.data.iter() {
            total += self.loss.value(&softmax(&m.forward(x)?), y)?;
        }
        let norm: f64 = w.iter().map(|v| v * v).sum();
        Ok(total / self.data.len() as f64 + 0.5 * self.l2 * norm)
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut g = mean_gradient_at(&self.model, &self.data, &self.loss, w)?;
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi += self.l2 * wi;
        }
        Ok(g)
    }
}

/// Hessian of any landscape by central differences of its gradient.
pub fn landscape_hessian(l: &dyn Landscape, w: &[f64]) -> Result<FdHessian> {
    fd_hessian(w, |theta| l.gradient(theta))
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Full(DMatrix<f64>),
    /// `Sigma = variance * I`.
    Isotropic(f64),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeConfig {
    pub lr: f64,
    pub dt: f64,
    pub total_time: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    pub trajectories: usize,
}

impl SdeConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt must be > 0"));
        }
        if !(self.total_time.is_finite() && self.total_time >= self.dt) {
            return Err(invalid("total time must be >= dt"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid("learning rate must be >= 0"));
        }
        if self.trajectories == 0 {
            return Err(invalid("need at least one trajectory"));
        }
        match &self.noise {
            NoiseModel::Full(s) if s.nrows() != dim || s.ncols() != dim => Err(Error::DimensionMismatch {
                context: "noise covariance",
                expected: dim,
                found: s.nrows(),
            }),
            NoiseModel::Isotropic(v) if !(v.is_finite() && *v >= 0.0) => {
                Err(invalid("isotropic variance must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn steps(&self) -> usize {
        (self.total_time / self.dt).round().max(1.0) as usize
    }
}

/// Monte-Carlo mean of `L(W_t) - L(W_0)` with its standard error, recorded
/// at every step including `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeSummary {
    pub times: Vec<f64>,
    pub mean_excess: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Final positions, one per trajectory.
    pub final_positions: Vec<Vec<f64>>,
}

impl SdeSummary {
    pub fn final_excess(&self) -> (f64, f64) {
        (*self.mean_excess.last().unwrap(), *self.stderr.last().unwrap())
    }
}

enum Diffusion {
    Matrix(DMatrix<f64>),
    Scalar(f64),
    None,
}

/// Euler-Maruyama: `W <- W - grad L(W) dt + sqrt(dt) (eta Sigma)^{1/2} z`.
/// `start` plays the role of the minimum `W*`. Trajectory `r` draws from
/// `RandomSource::derive(seed, r)`, so results do not depend on thread count.
pub fn sde_simulate(landscape: &dyn Landscape, start: &[f64], cfg: &SdeConfig) -> Result<SdeSummary> {
    let dim = landscape.dim();
    if start.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "SDE start point",
            expected: dim,
            found: start.len(),
        });
    }
    cfg.validate(dim)?;
    let diffusion = match &cfg.noise {
        NoiseModel::Full(s) => Diffusion::Matrix(psd_sqrt(&(s * cfg.lr))?),
        NoiseModel::Isotropic(v) => Diffusion::Scalar((cfg.lr * v).sqrt()),
        NoiseModel::Zero => Diffusion::None,
    };
    let steps = cfg.steps();
    let base = landscape.value(start)?;
    let sqrt_dt = cfg.dt.sqrt();

    let runs: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut rng = RandomSource::derive(cfg.seed, r as u64);
            let mut w = start.to_vec();
            let mut excess = Vec::with_capacity(steps + 1);
            excess.push(0.0);
            let mut z = vec![0.0; dim];
            for step in 0..steps {
                let g = landscape.gradient(&w)?;
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= gi * cfg.dt;
                }
                match &diffusion {
                    Diffusion::Matrix(root) => {
                        z.iter_mut().for_each(|v| *v = rng.standard_normal());
                        for i in 0..dim {
                            let mut kick = 0.0;
                            for (j, zj) in z.iter().enumerate() {
                                kick += root[(i, j)] * zj;
                            }
                            w[i] += sqrt_dt * kick;
                        }
                    }
                    Diffusion::Scalar(s) => {
                        for wi in w.iter_mut() {
                            *wi += sqrt_dt * s * rng.standard_normal();
                        }
                    }
                    Diffusion::None => {}
                }
                let value = landscape.value(&w)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("SDE trajectory {r} at step {}", step + 1)));
                }
                excess.push(value - base);
            }
            Ok((excess, w))
        })
        .collect::<Result<_>>()?;

    let r = cfg.trajectories as f64;
    let mut mean_excess = vec![0.0; steps + 1];
    let mut stderr = vec![0.0; steps + 1];
    for k in 0..=steps {
        let mean = runs.iter().map(|(e, _)| e[k]).sum::<f64>() / r;
        mean_excess[k] = mean;
        if cfg.trajectories > 1 {
            let var = runs.iter().map(|(e, _)| (e[k] - mean).powi(2)).sum::<f64>() / (r - 1.0);
            stderr[k] = (var / r).sqrt();
        }
    }
    Ok(SdeSummary {
        times: (0..=steps).map(|k| k as f64 * cfg.dt).collect(),
        mean_excess,
        stderr,
        final_positions: runs.into_iter().map(|(_, w)| w).collect(),
    })
}

/// Plain gradient descent until `max |grad| <= tolerance` or `steps` run out.
pub fn gradient_descent(l: &dyn Landscape, start: &[f64], lr: f64, steps: usize, tolerance: f64) -> Result<Vec<f64>> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(invalid("descent step must be > 0"));
    }
    let mut w = start.to_vec();
    for _ in 0..steps {
        let g = l.gradient(&w)?;
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= tolerance {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * gi;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient descent iterate".into()));
        }
    }
    Ok(w)
}

/// Noise injected by an escape study. `Covariance` uses the gradient-noise
/// covariance of the loss being studied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyNoise {
    #[default]
    Covariance,
    Isotropic(f64),
    Zero,
}

fn default_refine_lr() -> f64 {
    0.1
}

/// Settings for comparing escaping efficiency across losses at one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeStudyConfig {
    pub time: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub dt: f64,
    pub trajectories: usize,
    pub seed: u64,
    /// L2 term added to every landscape so minima are proper.
    pub l2: f64,
    #[serde(default)]
    pub eta: EtaConvention,
    #[serde(default)]
    pub noise: StudyNoise,
    /// Full-batch descent steps on each loss before measuring, so every
    /// loss is studied at its own minimum.
    #[serde(default)]
    pub refine_steps: usize,
    #[serde(default = "default_refine_lr")]
    pub refine_lr: f64,
}

/// One loss evaluated at its minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeRow {
    pub method: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// `Tr(H Sigma)`.
    pub trace_term: f64,
    pub ee_estimate: f64,
    pub ee_simulated: f64,
    pub stderr: f64,
    /// Mixed-loss bound; present for `alpha = 1` mixtures.
    pub rhs_bound: Option<f64>,
}

/// Closed-form estimate and simulated `E[L(W_t) - L(W_0)]` for one landscape
/// and start point under constant noise.
pub fn estimate_and_simulate(
    landscape: &dyn Landscape,
    start: &[f64],
    sigma: Option<DMatrix<f64>>,
    cfg: &EscapeStudyConfig,
) -> Result<(f64, f64, f64, f64)> {
    let h = landscape_hessian(landscape, start)?.matrix;
    let dim = landscape.dim();
    let (sigma_matrix, noise) = match sigma {
        Some(s) => (s.clone(), NoiseModel::Full(s)),
        None => (DMatrix::zeros(dim, dim), NoiseModel::Zero),
    };
    let trace = trace_of_product(&h, &sigma_matrix)?;
    let estimate = escaping_efficiency_estimate(&h, &sigma_matrix, cfg.time, cfg.lr, cfg.eta)?;
    let sde = SdeConfig {
        lr: cfg.lr,
        dt: cfg.dt,
        total_time: cfg.time,
        noise,
        seed: cfg.seed,
        trajectories: cfg.trajectories,
    };
    let (simulated, stderr) = sde_simulate(landscape, start, &sde)?.final_excess();
    Ok((trace, estimate, simulated, stderr))
}

/// For each loss: descend to its regularized minimum, take `Sigma` from
/// per-sample gradients there and `H` of the regularized landscape, then
/// report the closed-form estimate next to a simulation under constant noise.
pub fn escape_study(
    model: &ClassifierModel,
    data: &Dataset,
    losses: &[LossSpec],
    cfg: &EscapeStudyConfig,
) -> Result<Vec<EscapeRow>> {
    check_data(model, data)?;
    if losses.is_empty() {
        return Err(Error::Empty("loss list"));
    }
    let quantities = escape_quantities(model, data)?;
    losses
        .iter()
        .map(|loss| {
            let landscape = ModelLandscape::new(model.clone(), data.clone(), *loss, cfg.l2)?;
            let start = gradient_descent(&landscape, model.params(), cfg.refine_lr, cfg.refine_steps, 1e-12)?;
            let mut at = model.clone();
            at.params_mut().copy_from_slice(&start);
            let sigma = match cfg.noise {
                StudyNoise::Covariance => Some(noise_covariance(&at, data, loss, cfg.batch_size)?.into_matrix()),
                StudyNoise::Isotropic(v) => {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(invalid("isotropic variance must be >= 0"));
                    }
                    Some(DMatrix::identity(start.len(), start.len()) * v)
                }
                StudyNoise::Zero => None,
            };
            let (trace_term, ee_estimate, ee_simulated, stderr) =
                estimate_and_simulate(&landscape, &start, sigma, cfg)?;
            let mix: Option<MixWeights> = loss.mix_weights();
            let rhs_bound = match mix {
                Some(w) if w.alpha == 1.0 => Some(ee_rhs_bound(&quantities, w.beta)?),
                _ => None,
            };
            Ok(EscapeRow {
                method: loss.name().to_string(),
                alpha: mix.map(|w| w.alpha),
                beta: mix.map(|w| w.beta),
                trace_term,
                ee_estimate,
                ee_simulated,
                stderr,
                rhs_bound,
            })
        })
        .collect()
}
