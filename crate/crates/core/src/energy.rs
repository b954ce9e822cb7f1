//! Activations as conjugate pairs, layer energies, losses and network specs.
//!
//! Each activation is the gradient of a convex conjugate: `f = ∇G*`, so the
//! layer output `f(W z)` minimizes `G(z) - z^T W z_prev`. Three energy forms
//! share that minimizer:
//!
//! - penalizer: `½‖z - f(W z_prev)‖²`
//! - Fenchel: `G(z) - z^T W z_prev`
//! - proximal: `½‖z - W z_prev‖² + F(z)` with `F = G - ½‖·‖²`
//!
//! Infeasible points evaluate to `f64::INFINITY`.

use crate::numeric::{glorot_uniform_init, negative_init, Matrix, Rng, Vector};
use crate::{Error, Result};

/// Tolerance on the simplex constraint `Σ z = 1`.
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    HardSigmoid,
    Softmax,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::HardSigmoid => "hardsigmoid",
            Activation::Softmax => "softmax",
        }
    }

    /// Coordinate bounds of `dom G` for the separable activations.
    pub fn box_bounds(&self) -> Option<(f64, f64)> {
        match self {
            Activation::Identity => Some((f64::NEG_INFINITY, f64::INFINITY)),
            Activation::Relu => Some((0.0, f64::INFINITY)),
            Activation::HardSigmoid => Some((0.0, 1.0)),
            Activation::Softmax => None,
        }
    }

    /// `f(u) = ∇G*(u)`
    pub fn apply(&self, u: &[f64]) -> Vector {
        match self {
            Activation::Identity => Vector::from(u),
            Activation::Relu => u.iter().map(|&v| v.max(0.0)).collect(),
            Activation::HardSigmoid => u.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
            Activation::Softmax => softmax(u),
        }
    }

    /// `f(a + d) - f(a)` without cancellation when `d` is tiny.
    pub fn apply_diff(&self, a: &[f64], d: &[f64]) -> Vector {
        assert_eq!(a.len(), d.len());
        match self {
            Activation::Identity => Vector::from(d),
            Activation::Relu | Activation::HardSigmoid => {
                let (lo, hi) = self.box_bounds().unwrap();
                a.iter()
                    .zip(d)
                    .map(|(&a, &d)| box_diff(a, d, lo, hi))
                    .collect()
            }
            Activation::Softmax => {
                let s = softmax(a);
                let shift = s
                    .iter()
                    .zip(d)
                    .map(|(s, d)| s * d.exp_m1())
                    .sum::<f64>()
                    .ln_1p();
                s.iter()
                    .zip(d)
                    .map(|(s, d)| s * (d - shift).exp_m1())
                    .collect()
            }
        }
    }

    /// `J_f(u)^T v`, taking derivative 0 at kinks.
    pub fn jacobian_t_mul(&self, u: &[f64], v: &[f64]) -> Vector {
        assert_eq!(u.len(), v.len());
        match self {
            Activation::Identity => Vector::from(v),
            Activation::Relu => u
                .iter()
                .zip(v)
                .map(|(&u, &v)| if u > 0.0 { v } else { 0.0 })
                .collect(),
            Activation::HardSigmoid => u
                .iter()
                .zip(v)
                .map(|(&u, &v)| if u > 0.0 && u < 1.0 { v } else { 0.0 })
                .collect(),
            Activation::Softmax => {
                let s = softmax(u);
                let sv = s.dot(v);
                s.zip_map(v, |s, v| s * (v - sv))
            }
        }
    }

    pub fn in_domain(&self, z: &[f64]) -> bool {
        match self {
            Activation::Softmax => {
                z.iter().all(|&v| v >= 0.0) && (z.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
            }
            _ => {
                let (lo, hi) = self.box_bounds().unwrap();
                z.iter().all(|&v| v >= lo && v <= hi)
            }
        }
    }

    /// Primal potential `G(z)`; `+∞` outside its domain.
    pub fn g(&self, z: &[f64]) -> f64 {
        if !self.in_domain(z) {
            return f64::INFINITY;
        }
        match self {
            Activation::Softmax => z.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum(),
            _ => 0.5 * z.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Conjugate `G*(u)`.
    pub fn g_star(&self, u: &[f64]) -> f64 {
        match self {
            Activation::Identity => 0.5 * u.iter().map(|v| v * v).sum::<f64>(),
            Activation::Relu => 0.5 * u.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>(),
            Activation::HardSigmoid => u
                .iter()
                .map(|&v| {
                    if v < 0.0 {
                        0.0
                    } else if v > 1.0 {
                        v - 0.5
                    } else {
                        0.5 * v * v
                    }
                })
                .sum(),
            Activation::Softmax => logsumexp(u),
        }
    }

    /// `(G*(u), ∇G*(u))`
    pub fn conjugate_eval(&self, u: &[f64]) -> (f64, Vector) {
        (self.g_star(u), self.apply(u))
    }

    /// `G(z) + G*(u) - z^T u`, nonnegative, zero iff `z = f(u)`.
    pub fn fenchel_young_gap(&self, z: &[f64], u: &[f64]) -> f64 {
        let g = self.g(z);
        if g.is_infinite() {
            return f64::INFINITY;
        }
        let zu: f64 = z.iter().zip(u).map(|(a, b)| a * b).sum();
        g + self.g_star(u) - zu
    }
}

fn box_diff(a: f64, d: f64, lo: f64, hi: f64) -> f64 {
    let b = a + d;
    let inside = |v: f64| v >= lo && v <= hi;
    if inside(a) && inside(b) {
        d
    } else if (a <= lo && b <= lo) || (a >= hi && b >= hi) {
        0.0
    } else {
        b.clamp(lo, hi) - a.clamp(lo, hi)
    }
}

pub fn logsumexp(u: &[f64]) -> f64 {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + u.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(u: &[f64]) -> Vector {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyForm {
    Penalizer,
    Fenchel,
    Proximal,
}

/// One layer: `z_k = argmin_z E(z, z_prev; W)`.
///
/// With `bias` set, `W` carries a trailing column multiplying a constant 1
/// appended to `z_prev`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub form: EnergyForm,
    pub activation: Activation,
    pub weight: Matrix,
    pub bias: bool,
}

impl LayerEnergy {
    pub fn new(form: EnergyForm, activation: Activation, weight: Matrix, bias: bool) -> Result<Self> {
        if bias && weight.cols() == 0 {
            return Err(Error::InvalidArgument("bias layer without columns".into()));
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite("layer weight".into()));
        }
        Ok(LayerEnergy {
            form,
            activation,
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols() - usize::from(self.bias)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn pre_activation(&self, z_prev: &[f64]) -> Vector {
        assert_eq!(z_prev.len(), self.in_dim(), "layer input dimension");
        self.weight.matvec(z_prev)
    }

    pub fn forward_map(&self, z_prev: &[f64]) -> Vector {
        self.activation.apply(&self.pre_activation(z_prev))
    }

    /// `W d` without the bias column, for differences of inputs.
    pub fn linear_map(&self, d: &[f64]) -> Vector {
        assert_eq!(d.len(), self.in_dim(), "layer input dimension");
        self.weight.matvec_prefix(d)
    }

    /// `W^T v` restricted to the non-bias columns.
    pub fn back_project(&self, v: &[f64]) -> Vector {
        self.weight.matvec_t_prefix(v, self.in_dim())
    }

    pub fn energy(&self, z: &[f64], z_prev: &[f64]) -> f64 {
        let u = self.pre_activation(z_prev);
        match self.form {
            EnergyForm::Penalizer => 0.5 * Vector::from(z).sub(&self.activation.apply(&u)).norm_sq(),
            EnergyForm::Fenchel => {
                let g = self.activation.g(z);
                if g.is_infinite() {
                    return g;
                }
                g - Vector::from(z).dot(&u)
            }
            EnergyForm::Proximal => {
                let g = self.activation.g(z);
                if g.is_infinite() {
                    return g;
                }
                let half_sq = 0.5 * z.iter().map(|v| v * v).sum::<f64>();
                0.5 * Vector::from(z).sub(&u).norm_sq() + (g - half_sq)
            }
        }
    }

    /// `min_z E(z, z_prev)`, attained at the forward map.
    pub fn min_energy(&self, z_prev: &[f64]) -> f64 {
        let u = self.pre_activation(z_prev);
        match self.form {
            EnergyForm::Penalizer => 0.0,
            EnergyForm::Fenchel => -self.activation.g_star(&u),
            EnergyForm::Proximal => 0.5 * u.norm_sq() - self.activation.g_star(&u),
        }
    }

    /// `Ẽ = E - min E`, evaluated in closed form so it is exactly zero at the minimizer.
    pub fn tilde_energy(&self, z: &[f64], z_prev: &[f64]) -> f64 {
        let u = self.pre_activation(z_prev);
        match self.form {
            EnergyForm::Penalizer => 0.5 * Vector::from(z).sub(&self.activation.apply(&u)).norm_sq(),
            EnergyForm::Fenchel | EnergyForm::Proximal => self.activation.fenchel_young_gap(z, &u),
        }
    }

    /// Residual `r` with `∂Ẽ/∂z_prev = W^T r` and `∂Ẽ/∂W = r ẑ_prev^T`.
    fn tilde_residual(&self, z: &[f64], u: &[f64]) -> Vector {
        let fz = self.activation.apply(u);
        match self.form {
            EnergyForm::Penalizer => self.activation.jacobian_t_mul(u, &fz.sub(z)),
            EnergyForm::Fenchel | EnergyForm::Proximal => fz.sub(z),
        }
    }

    pub fn grad_tilde_wrt_lower(&self, z: &[f64], z_prev: &[f64]) -> Vector {
        let u = self.pre_activation(z_prev);
        self.back_project(&self.tilde_residual(z, &u))
    }

    pub fn grad_tilde_wrt_weight(&self, z: &[f64], z_prev: &[f64]) -> Matrix {
        let u = self.pre_activation(z_prev);
        let mut g = Matrix::zeros(self.weight.rows(), self.weight.cols());
        g.add_outer(1.0, &self.tilde_residual(z, &u), z_prev);
        g
    }

    /// `∂E/∂W` at fixed `z`.
    pub fn grad_energy_wrt_weight(&self, z: &[f64], z_prev: &[f64]) -> Matrix {
        let u = self.pre_activation(z_prev);
        let r = match self.form {
            EnergyForm::Penalizer => self.tilde_residual(z, &u),
            EnergyForm::Fenchel => Vector::from(z).scale(-1.0),
            EnergyForm::Proximal => u.sub(z),
        };
        let mut g = Matrix::zeros(self.weight.rows(), self.weight.cols());
        g.add_outer(1.0, &r, z_prev);
        g
    }

    /// `argmin_z c^T z + E(z, z_prev)`
    pub fn tilted_minimizer(&self, z_prev: &[f64], c: &[f64]) -> Vector {
        let u = self.pre_activation(z_prev);
        match self.form {
            EnergyForm::Penalizer => self.activation.apply(&u).sub(c),
            EnergyForm::Fenchel | EnergyForm::Proximal => self.activation.apply(&u.sub(c)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `½‖z - y‖²`
    SquaredError,
    /// `-Σ y log z` on a softmax output.
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::SquaredError => "squared",
            LossKind::CrossEntropy => "cross-entropy",
        }
    }

    pub fn eval(&self, z: &[f64], y: &[f64]) -> f64 {
        assert_eq!(z.len(), y.len(), "loss dimension");
        match self {
            LossKind::SquaredError => 0.5 * z.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            LossKind::CrossEntropy => z
                .iter()
                .zip(y)
                .filter(|(_, &y)| y != 0.0)
                .map(|(&z, &y)| if z > 0.0 { -y * z.ln() } else { f64::INFINITY })
                .sum(),
        }
    }

    pub fn grad(&self, z: &[f64], y: &[f64]) -> Vector {
        assert_eq!(z.len(), y.len(), "loss dimension");
        match self {
            LossKind::SquaredError => z.iter().zip(y).map(|(a, b)| a - b).collect(),
            LossKind::CrossEntropy => z
                .iter()
                .zip(y)
                .map(|(&z, &y)| if y == 0.0 { 0.0 } else { -y / z })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Glorot,
    /// Negated absolute Glorot weights; bias columns start at zero.
    Negative,
}

/// Layer stack with a loss on the last layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerEnergy>,
    pub loss: LossKind,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerEnergy>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network without layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::shape(
                    "NetworkSpec layer chain",
                    format!("layer {} input {}", k + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        let last = layers.len() - 1;
        if let Some(k) = layers[..last]
            .iter()
            .position(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::InvalidArgument(format!(
                "softmax is only allowed on the output layer (found on layer {k})"
            )));
        }
        if loss == LossKind::CrossEntropy && layers[last].activation != Activation::Softmax {
            return Err(Error::InvalidArgument(
                "cross-entropy needs a softmax output layer".into(),
            ));
        }
        Ok(NetworkSpec { layers, loss })
    }

    /// Fully connected stack with `dims = [input, hidden..., output]`.
    #[allow(clippy::too_many_arguments)]
    pub fn mlp(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        form: EnergyForm,
        loss: LossKind,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("architecture {dims:?}")));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let (rows, fan_in) = (dims[k + 1], dims[k]);
            let w = match init {
                Init::Glorot => glorot_uniform_init(rows, fan_in, rng),
                Init::Negative => negative_init(rows, fan_in, rng),
            };
            let w = if bias {
                Matrix::from_fn(rows, fan_in + 1, |i, j| if j < fan_in { w[(i, j)] } else { 0.0 })
            } else {
                w
            };
            let act = if k + 1 == n { output } else { hidden };
            layers.push(LayerEnergy::new(form, act, w, bias)?);
        }
        NetworkSpec::new(layers, loss)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn form(&self) -> EnergyForm {
        self.layers[0].form
    }

    pub fn with_form(&self, form: EnergyForm) -> NetworkSpec {
        let mut n = self.clone();
        for l in &mut n.layers {
            l.form = form;
        }
        n
    }

    pub fn weights(&self) -> Vec<&Matrix> {
        self.layers.iter().map(|l| &l.weight).collect()
    }

    /// `ℓ(z*_L)` for the forward composition.
    pub fn deep_loss(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut z = Vector::from(x);
        for l in &self.layers {
            z = l.forward_map(&z);
        }
        self.loss.eval(&z, y)
    }
}
