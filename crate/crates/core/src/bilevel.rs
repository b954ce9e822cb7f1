//! Single-level bilevel problems and their surrogates.
//!
//! A problem is `min ℓ(z*(θ))` with `z*(θ) = argmin_z E(z; θ)`, where `E` is
//! one [`LayerEnergy`] evaluated at a fixed input and `θ` is its weight.
//! The contrastive surrogate perturbs the lower problem by `β ℓ`, the
//! linearized one by the tilt `τ z^T ℓ'(z*)`. As either step goes to zero
//! the surrogate gradient recovers the implicit gradient.

use nalgebra::{DMatrix, DVector};

use crate::energy::{softmax, Activation, EnergyForm, LayerEnergy, LossKind};
use crate::numeric::{Matrix, Vector};
use crate::{Error, Result};

const PG_TOL: f64 = 1e-10;
const PG_MAX_ITERS: usize = 10_000;
const ACTIVE_TOL: f64 = 1e-9;
/// Largest number of weakly active constraints the QP will enumerate.
pub const MAX_WEAKLY_ACTIVE: usize = 20;

/// Outer objective. Every variant is zero at its minimizer except `Linear`,
/// which is only used with the linearized surrogate.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `½‖z - y‖²`
    Squared(Vector),
    /// `Σ |z_i - y_i|`
    Absolute(Vector),
    /// `c^T z`
    Linear(Vector),
    /// `-Σ y log z`
    CrossEntropy(Vector),
    /// `½ (z - y)^T C (z - y)` with `C` symmetric positive semidefinite.
    Quadratic { c: Matrix, target: Vector },
}

impl Loss {
    pub fn from_kind(kind: LossKind, target: Vector) -> Loss {
        match kind {
            LossKind::SquaredError => Loss::Squared(target),
            LossKind::CrossEntropy => Loss::CrossEntropy(target),
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            Loss::Squared(y) => LossKind::SquaredError.eval(z, y),
            Loss::CrossEntropy(y) => LossKind::CrossEntropy.eval(z, y),
            Loss::Absolute(y) => z.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum(),
            Loss::Linear(c) => c.dot(z),
            Loss::Quadratic { c, target } => {
                let r = Vector::from(z).sub(target);
                0.5 * r.dot(&c.matvec(&r))
            }
        }
    }

    /// Gradient, or a subgradient (sign, 0 at the kink) for `Absolute`.
    pub fn grad(&self, z: &[f64]) -> Vector {
        match self {
            Loss::Squared(y) => LossKind::SquaredError.grad(z, y),
            Loss::CrossEntropy(y) => LossKind::CrossEntropy.grad(z, y),
            Loss::Absolute(y) => z
                .iter()
                .zip(y.iter())
                .map(|(a, b)| {
                    let d = a - b;
                    if d == 0.0 {
                        0.0
                    } else {
                        d.signum()
                    }
                })
                .collect(),
            Loss::Linear(c) => c.clone(),
            Loss::Quadratic { c, target } => c.matvec(&Vector::from(z).sub(target)),
        }
    }

    /// Coordinatewise `prox_{tℓ}(v)` when it has a closed form.
    fn separable_prox(&self, v: &[f64], t: f64) -> Option<Vector> {
        match self {
            Loss::Squared(y) => Some(
                v.iter()
                    .zip(y.iter())
                    .map(|(v, y)| (v + t * y) / (1.0 + t))
                    .collect(),
            ),
            Loss::Absolute(y) => Some(
                v.iter()
                    .zip(y.iter())
                    .map(|(v, y)| y + (v - y).signum() * ((v - y).abs() - t).max(0.0))
                    .collect(),
            ),
            Loss::Linear(c) => Some(Vector::from(v).zip_map(c, |v, c| v - t * c)),
            Loss::CrossEntropy(_) | Loss::Quadratic { .. } => None,
        }
    }

    fn grad_lipschitz(&self) -> Option<f64> {
        match self {
            Loss::Squared(_) => Some(1.0),
            Loss::Linear(_) => Some(0.0),
            Loss::Quadratic { c, .. } => Some(c.frobenius_sq().sqrt()),
            Loss::Absolute(_) | Loss::CrossEntropy(_) => None,
        }
    }
}

/// `min ℓ(z*)` with `z* = argmin_z E(z; x, W)`.
#[derive(Debug, Clone)]
pub struct BilevelProblem {
    pub energy: LayerEnergy,
    pub input: Vector,
    pub loss: Loss,
}

impl BilevelProblem {
    pub fn new(energy: LayerEnergy, input: Vector, loss: Loss) -> Result<Self> {
        if input.dim() != energy.in_dim() {
            return Err(Error::shape("BilevelProblem input", energy.in_dim(), input.dim()));
        }
        Ok(BilevelProblem {
            energy,
            input,
            loss,
        })
    }

    pub fn with_weight(&self, weight: Matrix) -> BilevelProblem {
        let mut p = self.clone();
        p.energy.weight = weight;
        p
    }

    /// `ℓ(z*(θ))`
    pub fn deep_loss(&self) -> f64 {
        self.loss.value(&free_minimizer(self))
    }
}

fn check_step(name: &str, s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {s}")))
    }
}

/// `z* = argmin_z E(z)`
pub fn free_minimizer(p: &BilevelProblem) -> Vector {
    p.energy.forward_map(&p.input)
}

/// `ẑ(β) = argmin_z β ℓ(z) + E(z)`
pub fn clamped_minimizer(p: &BilevelProblem, beta: f64) -> Result<Vector> {
    check_step("beta", beta)?;
    clamped_layer_minimizer(&p.energy, &p.input, &p.loss, beta)
}

/// `argmin_z β ℓ(z) + E(z, z_prev)` for one layer.
pub fn clamped_layer_minimizer(
    layer: &LayerEnergy,
    z_prev: &[f64],
    loss: &Loss,
    beta: f64,
) -> Result<Vector> {
    let u = layer.pre_activation(z_prev);
    clamped_from_pre(layer.form, layer.activation, &u, loss, beta)
}

/// Clamped minimizer given the pre-activation `u` of the layer.
pub(crate) fn clamped_from_pre(
    form: EnergyForm,
    act: Activation,
    u: &[f64],
    loss: &Loss,
    beta: f64,
) -> Result<Vector> {
    match (form, act.box_bounds()) {
        (EnergyForm::Penalizer, _) => {
            // β ℓ(z) + ½‖z - f(u)‖², unconstrained
            let center = act.apply(u);
            match loss.separable_prox(&center, beta) {
                Some(z) => Ok(z),
                None => projected_gradient(loss, beta, &center, None),
            }
        }
        (_, Some((lo, hi))) => {
            // β ℓ(z) + ½‖z - u‖² over a box; separable losses clamp their prox
            match loss.separable_prox(u, beta) {
                Some(z) => Ok(z.map(|v| v.clamp(lo, hi))),
                None => projected_gradient(loss, beta, u, Some((lo, hi))),
            }
        }
        (_, None) => match loss {
            Loss::Linear(c) => Ok(softmax(&Vector::from(u).zip_map(c, |u, c| u - beta * c))),
            Loss::CrossEntropy(y) => Ok(softmax_cross_entropy_prox(u, y, beta)),
            _ => Err(Error::Unsupported(format!(
                "clamped softmax layer with loss {loss:?}"
            ))),
        },
    }
}

/// Minimizes `β ℓ(z) + ½‖z - center‖²`, optionally over a box.
fn projected_gradient(
    loss: &Loss,
    beta: f64,
    center: &[f64],
    bounds: Option<(f64, f64)>,
) -> Result<Vector> {
    let lip = loss.grad_lipschitz().ok_or_else(|| {
        Error::Unsupported(format!("no smooth solver for loss {loss:?}"))
    })?;
    let step = 1.0 / (1.0 + beta * lip);
    let project = |z: Vector| match bounds {
        Some((lo, hi)) => z.map(|v| v.clamp(lo, hi)),
        None => z,
    };
    let mut z = project(Vector::from(center));
    for _ in 0..PG_MAX_ITERS {
        let g = loss.grad(&z).scale(beta).add(&z.sub(center));
        let next = project(z.zip_map(&g, |z, g| z - step * g));
        let moved = next.sub(&z).norm_inf();
        z = next;
        if moved <= PG_TOL {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence {
        routine: "projected gradient",
        iterations: PG_MAX_ITERS,
    })
}

/// `argmin_{z ∈ Δ} -β Σ y log z + Σ z log z - z^T u`.
///
/// Stationarity gives `log z_j - β y_j / z_j = u_j + t` with `t` fixed by
/// `Σ z = 1`. Each coordinate is a Lambert-W solve; `t` is bisected.
pub(crate) fn softmax_cross_entropy_prox(u: &[f64], y: &[f64], beta: f64) -> Vector {
    let coords = |t: f64| -> Vector {
        u.iter()
            .zip(y)
            .map(|(&u, &y)| {
                let s = u + t;
                let a = beta * y;
                if a <= 0.0 {
                    s.exp()
                } else {
                    (s + lambert_w_log(a.ln() - s)).exp()
                }
            })
            .collect()
    };
    let total = |t: f64| coords(t).iter().sum::<f64>();
    let mut hi = -crate::energy::logsumexp(u);
    let mut lo = hi - 1.0;
    while total(lo) > 1.0 {
        let gap = hi - lo;
        lo = hi - 2.0 * gap;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let z = coords(0.5 * (lo + hi));
    let s: f64 = z.iter().sum();
    z.scale(1.0 / s)
}

/// Principal Lambert W of `e^l`, i.e. the `q > 0` with `q + ln q = l`.
fn lambert_w_log(l: f64) -> f64 {
    // g(q) = q + ln q - l is increasing and concave, so Newton from a point
    // with g ≤ 0 climbs monotonically to the root.
    let mut q = if l <= 1.0 { (l - 1.0).exp() } else { l - l.ln() };
    if q == 0.0 {
        return 0.0;
    }
    for _ in 0..100 {
        let g = q + q.ln() - l;
        let step = g / (1.0 + 1.0 / q);
        let next = q - step;
        if (next - q).abs() <= 1e-16 * q || !next.is_finite() {
            return next.max(q);
        }
        q = next;
    }
    q
}

/// `z̄(τ) = argmin_z τ z^T ℓ'(z*) + E(z)`
pub fn linearized_minimizer(p: &BilevelProblem, tau: f64) -> Result<Vector> {
    check_step("tau", tau)?;
    let z_star = free_minimizer(p);
    let tilt = p.loss.grad(&z_star).scale(tau);
    Ok(p.energy.tilted_minimizer(&p.input, &tilt))
}

/// `ℓ(ẑ) + (E(ẑ) - E(z*)) / β`
pub fn contrastive_surrogate_value(p: &BilevelProblem, beta: f64) -> Result<f64> {
    let z_hat = clamped_minimizer(p, beta)?;
    Ok(p.loss.value(&z_hat) + p.energy.tilde_energy(&z_hat, &p.input) / beta)
}

/// `ℓ(z*) + (z̄ - z*)^T ℓ'(z*) + (E(z̄) - E(z*)) / τ`
pub fn linearized_surrogate_value(p: &BilevelProblem, tau: f64) -> Result<f64> {
    let z_star = free_minimizer(p);
    let z_bar = linearized_minimizer(p, tau)?;
    let g = p.loss.grad(&z_star);
    Ok(p.loss.value(&z_star)
        + z_bar.sub(&z_star).dot(&g)
        + p.energy.tilde_energy(&z_bar, &p.input) / tau)
}

/// `(1/β)(∂_W E(ẑ) - ∂_W E(z*))`
pub fn surrogate_parameter_gradient(p: &BilevelProblem, beta: f64) -> Result<Matrix> {
    let z_hat = clamped_minimizer(p, beta)?;
    let z_star = free_minimizer(p);
    let diff = p
        .energy
        .grad_energy_wrt_weight(&z_hat, &p.input)
        .sub(&p.energy.grad_energy_wrt_weight(&z_star, &p.input));
    Ok(diff.scale(1.0 / beta))
}

/// `(1/τ)(∂_W E(z̄) - ∂_W E(z*))` for the linearized surrogate.
pub fn linearized_parameter_gradient(p: &BilevelProblem, tau: f64) -> Result<Matrix> {
    let z_bar = linearized_minimizer(p, tau)?;
    let z_star = free_minimizer(p);
    let diff = p
        .energy
        .grad_energy_wrt_weight(&z_bar, &p.input)
        .sub(&p.energy.grad_energy_wrt_weight(&z_star, &p.input));
    Ok(diff.scale(1.0 / tau))
}

/// `-∂²E/∂W∂z (∂²E/∂z²)^{-1} ℓ'(z*)`, valid only when no constraint is active.
pub fn implicit_diff_gradient(p: &BilevelProblem) -> Result<Matrix> {
    let layer = &p.energy;
    let u = layer.pre_activation(&p.input);
    let z_star = layer.activation.apply(&u);
    let lg = p.loss.grad(&z_star);
    let n = z_star.dim();

    if let Some((lo, hi)) = layer.activation.box_bounds() {
        let kink = u
            .iter()
            .position(|&v| (v - lo).abs() <= ACTIVE_TOL || (v - hi).abs() <= ACTIVE_TOL || v < lo || v > hi);
        if let Some(j) = kink {
            if layer.activation != Activation::Identity {
                return Err(Error::ActiveConstraint(j));
            }
        }
    } else if let Some(j) = z_star.iter().position(|&v| v <= ACTIVE_TOL) {
        return Err(Error::ActiveConstraint(j));
    }

    // Hessian in z (with the simplex constraint bordered for softmax), then
    // the mixed term ∂_W ⟨∇_z E, v⟩.
    let v = match (layer.form, layer.activation) {
        (EnergyForm::Penalizer, act) => {
            let h = DMatrix::<f64>::identity(n, n);
            let v = solve_spd(h, &lg)?;
            act.jacobian_t_mul(&u, &v)
        }
        (_, Activation::Softmax) => {
            let mut k = DMatrix::<f64>::zeros(n + 1, n + 1);
            for j in 0..n {
                k[(j, j)] = 1.0 / z_star[j];
                k[(j, n)] = 1.0;
                k[(n, j)] = 1.0;
            }
            let mut rhs = DVector::<f64>::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from_slice(&lg);
            let sol = k.lu().solve(&rhs).ok_or(Error::NotPositiveDefinite)?;
            Vector::from(sol.rows(0, n).as_slice())
        }
        _ => solve_spd(DMatrix::<f64>::identity(n, n), &lg)?,
    };
    let mut g = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
    g.add_outer(1.0, &v, &p.input);
    Ok(g)
}

fn solve_spd(h: DMatrix<f64>, rhs: &[f64]) -> Result<Vector> {
    let chol = h.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let sol = chol.solve(&DVector::from_column_slice(rhs));
    Ok(Vector::from(sol.as_slice()))
}

/// `lim_{τ→0+} ([u - τ ℓ']_+ - [u]_+) / τ`, coordinatewise.
pub fn relu_one_sided_derivative(pre: &[f64], loss_grad: &[f64]) -> Result<Vector> {
    if pre.len() != loss_grad.len() {
        return Err(Error::shape("relu_one_sided_derivative", pre.len(), loss_grad.len()));
    }
    Ok(pre
        .iter()
        .zip(loss_grad)
        .map(|(&u, &g)| {
            if u > 0.0 {
                -g
            } else if u == 0.0 {
                (-g).max(0.0)
            } else {
                0.0
            }
        })
        .collect())
}

/// `min ½ ż^T A ż + c^T ż` subject to `B_i ż = 0` for strongly active rows
/// and `B_i ż ≥ 0` for weakly active rows.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
    pub weakly_active: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z_dot: Vector,
    /// One multiplier per row of `B`, with `A ż + c = B^T μ`.
    pub multipliers: Vector,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl QpInstance {
    fn validate(&self) -> Result<()> {
        let n = self.c.dim();
        if self.a.shape() != (n, n) {
            return Err(Error::shape("QpInstance A", format!("{n}x{n}"), format!("{:?}", self.a.shape())));
        }
        if self.b.rows() > 0 && self.b.cols() != n {
            return Err(Error::shape("QpInstance B columns", n, self.b.cols()));
        }
        if self.weakly_active.len() != self.b.rows() {
            return Err(Error::shape("QpInstance flags", self.b.rows(), self.weakly_active.len()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        0.5 * Vector::from(z).dot(&self.a.matvec(z)) + self.c.dot(z)
    }

    pub fn kkt_residuals(&self, sol: &QpSolution) -> KktResiduals {
        let z = &sol.z_dot;
        let mu = &sol.multipliers;
        let grad = self.a.matvec(z).add(&self.c);
        let stationarity = grad.sub(&self.b.matvec_t(mu)).norm_inf();
        let mut r = KktResiduals {
            stationarity,
            primal: 0.0,
            dual: 0.0,
            complementarity: 0.0,
        };
        for i in 0..self.b.rows() {
            let bz = Vector::from(self.b.row(i)).dot(z);
            if self.weakly_active[i] {
                r.primal = r.primal.max((-bz).max(0.0));
                r.dual = r.dual.max((-mu[i]).max(0.0));
                r.complementarity = r.complementarity.max((mu[i] * bz).abs());
            } else {
                r.primal = r.primal.max(bz.abs());
            }
        }
        r
    }

    /// Diagonal `A` with each constraint row touching a distinct single coordinate.
    fn decoupled(&self) -> Option<Vec<Option<(usize, f64)>>> {
        let n = self.c.dim();
        for i in 0..n {
            for j in 0..n {
                if i != j && self.a[(i, j)] != 0.0 {
                    return None;
                }
            }
        }
        let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
        for i in 0..self.b.rows() {
            let nz: Vec<usize> = (0..n).filter(|&j| self.b[(i, j)] != 0.0).collect();
            if nz.len() != 1 || owner[nz[0]].is_some() {
                return None;
            }
            owner[nz[0]] = Some((i, self.b[(i, nz[0])]));
        }
        Some(owner)
    }
}

/// Solves the directional-derivative QP. Closed form for decoupled
/// instances, otherwise enumeration of the weakly active constraints.
pub fn directional_derivative_qp(q: &QpInstance) -> Result<QpSolution> {
    q.validate()?;
    let n = q.c.dim();
    if q.a.to_nalgebra().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    if let Some(owner) = q.decoupled() {
        let mut z = Vector::zeros(n);
        let mut mu = Vector::zeros(q.b.rows());
        for j in 0..n {
            let free = -q.c[j] / q.a[(j, j)];
            match owner[j] {
                None => z[j] = free,
                Some((i, b)) => {
                    if q.weakly_active[i] && b * free >= 0.0 {
                        z[j] = free;
                    } else {
                        mu[i] = q.c[j] / b;
                    }
                }
            }
        }
        let objective = q.objective(&z);
        return Ok(QpSolution {
            z_dot: z,
            multipliers: mu,
            objective,
        });
    }

    let weak: Vec<usize> = (0..q.b.rows()).filter(|&i| q.weakly_active[i]).collect();
    if weak.len() > MAX_WEAKLY_ACTIVE {
        return Err(Error::EnumerationBudget(weak.len()));
    }
    let strong: Vec<usize> = (0..q.b.rows()).filter(|&i| !q.weakly_active[i]).collect();
    // Any KKT point of a strictly convex QP is its minimizer, so the first
    // consistent active set wins. Smaller active sets are tried first.
    let mut masks: Vec<u32> = (0..(1u32 << weak.len())).collect();
    masks.sort_by_key(|m| m.count_ones());
    for mask in masks {
        let active: Vec<usize> = strong
            .iter()
            .copied()
            .chain(
                weak.iter()
                    .enumerate()
                    .filter(|(k, _)| mask & (1 << k) != 0)
                    .map(|(_, &i)| i),
            )
            .collect();
        let Some((z, mu_active)) = solve_equality_qp(q, &active) else {
            continue;
        };
        let mut mu = Vector::zeros(q.b.rows());
        for (k, &i) in active.iter().enumerate() {
            mu[i] = mu_active[k];
        }
        let consistent = weak.iter().all(|&i| {
            let bz = Vector::from(q.b.row(i)).dot(&z);
            if active.contains(&i) {
                mu[i] >= -1e-12
            } else {
                bz >= -1e-12
            }
        });
        if consistent {
            let objective = q.objective(&z);
            return Ok(QpSolution {
                z_dot: z,
                multipliers: mu,
                objective,
            });
        }
    }
    Err(Error::NonConvergence {
        routine: "active-set enumeration",
        iterations: 1 << weak.len(),
    })
}

/// KKT solve of `min ½ ż^T A ż + c^T ż` with `B_S ż = 0`.
fn solve_equality_qp(q: &QpInstance, active: &[usize]) -> Option<(Vector, Vec<f64>)> {
    let n = q.c.dim();
    let m = active.len();
    let mut k = DMatrix::<f64>::zeros(n + m, n + m);
    let mut rhs = DVector::<f64>::zeros(n + m);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = q.a[(i, j)];
        }
        rhs[i] = -q.c[i];
    }
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            k[(j, n + r)] = -q.b[(i, j)];
            k[(n + r, j)] = q.b[(i, j)];
        }
    }
    let sol = k.lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let z = Vector::from(sol.rows(0, n).as_slice());
    let mu = sol.rows(n, m).iter().copied().collect();
    Some((z, mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_gradient;

    fn scalar_problem(theta: f64, loss: Loss) -> BilevelProblem {
        // E(z) = ½ (z - θ)²
        let layer = LayerEnergy::new(
            EnergyForm::Proximal,
            Activation::Identity,
            Matrix::from_rows(&[&[theta]]).unwrap(),
            false,
        )
        .unwrap();
        BilevelProblem::new(layer, Vector::from(vec![1.0]), loss).unwrap()
    }

    #[test]
    fn clamped_quadratic_closed_form() {
        let theta = 0.3;
        let p = scalar_problem(theta, Loss::Squared(Vector::from(vec![1.0])));
        for beta in [0.1, 1.0, 7.0] {
            let z = clamped_minimizer(&p, beta).unwrap();
            assert!((z[0] - (theta + beta) / (1.0 + beta)).abs() < 1e-15);
        }
    }

    #[test]
    fn absolute_loss_soft_threshold() {
        let p = scalar_problem(2.0, Loss::Absolute(Vector::from(vec![0.0])));
        assert_eq!(clamped_minimizer(&p, 1.0).unwrap()[0], 1.0);
        assert!((contrastive_surrogate_value(&p, 1.0).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn linearized_example() {
        let p = scalar_problem(1.0, Loss::Linear(Vector::from(vec![1.0])));
        let z = linearized_minimizer(&p, 0.1).unwrap();
        assert!((z[0] - 0.9).abs() < 1e-15);
        let v = linearized_surrogate_value(&p, 0.1).unwrap();
        assert!((v - 0.95).abs() < 1e-14);
    }

    #[test]
    fn steps_must_be_positive() {
        let p = scalar_problem(1.0, Loss::Squared(Vector::from(vec![0.0])));
        assert!(matches!(clamped_minimizer(&p, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(linearized_minimizer(&p, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn quadratic_loss_uses_projected_gradient() {
        let c = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]).unwrap();
        let target = Vector::from(vec![1.0, -1.0]);
        let layer = LayerEnergy::new(
            EnergyForm::Fenchel,
            Activation::Relu,
            Matrix::identity(2),
            false,
        )
        .unwrap();
        let x = Vector::from(vec![0.4, 0.2]);
        let p = BilevelProblem::new(layer, x.clone(), Loss::Quadratic { c: c.clone(), target: target.clone() }).unwrap();
        let z = clamped_minimizer(&p, 0.5).unwrap();
        // projected stationarity of 0.5 ℓ(z) + ½‖z - x‖² over z ≥ 0
        let g = c.matvec(&z.sub(&target)).scale(0.5).add(&z.sub(&x));
        for j in 0..2 {
            if z[j] > 0.0 {
                assert!(g[j].abs() < 1e-8);
            } else {
                assert!(g[j] >= -1e-8);
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_prox_is_stationary() {
        let u = [0.3, -1.2, 2.0, 0.1];
        let y = [0.0, 1.0, 0.0, 0.0];
        for beta in [1e-3, 0.5, 4.0] {
            let z = softmax_cross_entropy_prox(&u, &y, beta);
            assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            // log z_j - β y_j / z_j - u_j is the same constant for all j
            let r: Vec<f64> = (0..4).map(|j| z[j].ln() - beta * y[j] / z[j] - u[j]).collect();
            for j in 1..4 {
                assert!((r[j] - r[0]).abs() < 1e-9, "{beta}: {r:?}");
            }
        }
    }

    #[test]
    fn lambert_w_identity() {
        for l in [-50.0, -3.0, 0.0, 1.0, 2.5, 40.0, 700.0] {
            let q = lambert_w_log(l);
            assert!((q + q.ln() - l).abs() < 1e-12 * l.abs().max(1.0), "{l}");
        }
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let w = Matrix::from_rows(&[&[0.5, 0.3, -0.2], &[0.4, 0.2, 0.9]]).unwrap();
        let x = Vector::from(vec![1.0, 0.5, 0.25]);
        for (form, act, loss) in [
            (EnergyForm::Fenchel, Activation::Relu, Loss::Squared(Vector::from(vec![0.1, -0.3]))),
            (EnergyForm::Penalizer, Activation::HardSigmoid, Loss::Squared(Vector::from(vec![0.1, -0.3]))),
            (EnergyForm::Proximal, Activation::Softmax, Loss::CrossEntropy(Vector::from(vec![0.0, 1.0]))),
        ] {
            let layer = LayerEnergy::new(form, act, w.clone(), false).unwrap();
            let p = BilevelProblem::new(layer, x.clone(), loss).unwrap();
            let g = implicit_diff_gradient(&p).unwrap();
            let fd = finite_difference_gradient(|m| p.with_weight(m.clone()).deep_loss(), &w, 1e-6).unwrap();
            assert!(g.sub(&fd).max_abs() < 1e-8, "{form:?} {act:?}");
        }
    }

    #[test]
    fn implicit_gradient_rejects_active_constraint() {
        let layer = LayerEnergy::new(
            EnergyForm::Fenchel,
            Activation::Relu,
            Matrix::from_rows(&[&[-1.0]]).unwrap(),
            false,
        )
        .unwrap();
        let p = BilevelProblem::new(layer, Vector::from(vec![1.0]), Loss::Squared(Vector::from(vec![1.0]))).unwrap();
        assert!(matches!(implicit_diff_gradient(&p), Err(Error::ActiveConstraint(0))));
    }

    #[test]
    fn surrogate_gradient_approaches_implicit_gradient() {
        let w = Matrix::from_rows(&[&[0.5, 0.3], &[0.4, -0.2]]).unwrap();
        let layer = LayerEnergy::new(EnergyForm::Fenchel, Activation::Relu, w, false).unwrap();
        let p = BilevelProblem::new(
            layer,
            Vector::from(vec![1.0, 0.5]),
            Loss::Squared(Vector::from(vec![1.0, 0.0])),
        )
        .unwrap();
        let exact = implicit_diff_gradient(&p).unwrap();
        let mut prev = f64::INFINITY;
        for beta in [1e-1, 1e-2, 1e-3] {
            let err = surrogate_parameter_gradient(&p, beta).unwrap().sub(&exact).max_abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn relu_derivative_rule() {
        let d = relu_one_sided_derivative(&[1.0, 0.0, 0.0, -1.0], &[2.0, -3.0, 3.0, 5.0]).unwrap();
        assert_eq!(d.as_slice(), &[-2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn qp_decoupled_weak_constraint() {
        let q = QpInstance {
            a: Matrix::identity(2),
            b: Matrix::from_rows(&[&[1.0, 0.0]]).unwrap(),
            c: Vector::from(vec![1.0, -1.0]),
            weakly_active: vec![true],
        };
        let s = directional_derivative_qp(&q).unwrap();
        assert_eq!(s.z_dot.as_slice(), &[0.0, 1.0]);
        assert_eq!(s.multipliers.as_slice(), &[1.0]);
        assert!(q.kkt_residuals(&s).max() < 1e-14);
    }

    #[test]
    fn qp_enumeration_matches_decoupled() {
        // Coupled A forces enumeration.
        let q = QpInstance {
            a: Matrix::from_rows(&[&[2.0, 0.5, 0.0], &[0.5, 1.0, 0.2], &[0.0, 0.2, 1.5]]).unwrap(),
            b: Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0], &[0.0, 0.0, 1.0]]).unwrap(),
            c: Vector::from(vec![1.0, 0.3, -2.0]),
            weakly_active: vec![true, true, false],
        };
        let s = directional_derivative_qp(&q).unwrap();
        assert!(q.kkt_residuals(&s).max() < 1e-12);
    }

    #[test]
    fn qp_rejects_indefinite() {
        let q = QpInstance {
            a: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]).unwrap(),
            b: Matrix::zeros(0, 2),
            c: Vector::zeros(2),
            weakly_active: vec![],
        };
        assert!(matches!(directional_derivative_qp(&q), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn qp_budget() {
        let n = 21;
        let mut a = Matrix::identity(n);
        a[(0, 1)] = 0.1;
        a[(1, 0)] = 0.1;
        let q = QpInstance {
            a,
            b: Matrix::identity(n),
            c: Vector::zeros(n),
            weakly_active: vec![true; n],
        };
        assert!(matches!(directional_derivative_qp(&q), Err(Error::EnumerationBudget(21))));
    }

    fn relu_problem(pre: &[f64], loss: Loss) -> BilevelProblem {
        let layer = LayerEnergy::new(EnergyForm::Proximal, Activation::Relu, Matrix::identity(pre.len()), false).unwrap();
        BilevelProblem::new(layer, Vector::from(pre), loss).unwrap()
    }

    #[test]
    fn free_minimizer_examples() {
        let p = relu_problem(&[2.0, -3.0], Loss::Squared(Vector::zeros(2)));
        assert_eq!(free_minimizer(&p).as_slice(), &[2.0, 0.0]);
        let layer = LayerEnergy::new(EnergyForm::Fenchel, Activation::Softmax, Matrix::zeros(2, 2), false).unwrap();
        let p = BilevelProblem::new(layer, Vector::from(vec![1.0, -1.0]), Loss::CrossEntropy(Vector::from(vec![1.0, 0.0]))).unwrap();
        assert_eq!(free_minimizer(&p).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn clamped_minimizer_small_beta_limit() {
        let p = relu_problem(&[0.7, -0.2], Loss::Squared(Vector::from(vec![1.0, 1.0])));
        let z = clamped_minimizer(&p, 1e-8).unwrap();
        assert!(z.sub(&free_minimizer(&p)).norm_inf() < 1e-6);
    }

    #[test]
    fn linearized_minimizer_relu_example() {
        // ℓ(z) = c^T z has gradient c everywhere
        let p = relu_problem(&[1.0, 0.0, 0.0], Loss::Linear(Vector::from(vec![1.0, -2.0, 3.0])));
        assert_eq!(linearized_minimizer(&p, 0.5).unwrap().as_slice(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn contrastive_value_hand_example() {
        let p = scalar_problem(0.0, Loss::Squared(Vector::from(vec![1.0])));
        assert!((contrastive_surrogate_value(&p, 1.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn contrastive_value_at_loss_minimizer_is_zero() {
        let p = scalar_problem(0.4, Loss::Squared(Vector::from(vec![0.4])));
        for beta in [1e-3, 1.0, 10.0] {
            assert!(contrastive_surrogate_value(&p, beta).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn relu_derivative_example() {
        let d = relu_one_sided_derivative(&[1.0, 0.0, 0.0], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(d.as_slice(), &[-1.0, 2.0, 0.0]);
        let tau = 1e-7;
        let p = relu_problem(&[1.0, 0.0, 0.0], Loss::Linear(Vector::from(vec![1.0, -2.0, 3.0])));
        let fd = linearized_minimizer(&p, tau).unwrap().sub(&free_minimizer(&p)).scale(1.0 / tau);
        assert!(fd.sub(&d).norm_inf() < 1e-6);
    }

    #[test]
    fn qp_all_weak_identity() {
        let q = QpInstance {
            a: Matrix::identity(2),
            b: Matrix::identity(2),
            c: Vector::from(vec![1.0, -2.0]),
            weakly_active: vec![true, true],
        };
        let s = directional_derivative_qp(&q).unwrap();
        assert_eq!(s.z_dot.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn qp_unconstrained_and_pinned() {
        let a = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]).unwrap();
        let c = Vector::from(vec![1.0, -1.0]);
        let free = directional_derivative_qp(&QpInstance {
            a: a.clone(),
            b: Matrix::zeros(0, 2),
            c: c.clone(),
            weakly_active: vec![],
        })
        .unwrap();
        assert!(a.matvec(&free.z_dot).add(&c).norm_inf() < 1e-14);
        let pinned = directional_derivative_qp(&QpInstance {
            a,
            b: Matrix::identity(2),
            c,
            weakly_active: vec![false, false],
        })
        .unwrap();
        assert_eq!(pinned.z_dot.norm_inf(), 0.0);
    }

    #[test]
    fn implicit_gradient_quadratic_closed_form() {
        let w = Matrix::from_rows(&[&[0.5, 0.3], &[-0.4, 0.2]]).unwrap();
        let x = Vector::from(vec![1.0, -2.0]);
        let y = Vector::from(vec![0.3, 0.1]);
        let layer = LayerEnergy::new(EnergyForm::Proximal, Activation::Identity, w.clone(), false).unwrap();
        let p = BilevelProblem::new(layer, x.clone(), Loss::Squared(y.clone())).unwrap();
        let g = implicit_diff_gradient(&p).unwrap();
        let mut expect = Matrix::zeros(2, 2);
        expect.add_outer(1.0, &w.matvec(&x).sub(&y), &x);
        assert!(g.sub(&expect).max_abs() < 1e-14);
    }
}
