//! Deep networks: nested surrogates, their inference routines and the training step.
//!
//! Layers are numbered `1..=L`; state vectors are indexed `0..=L` with
//! `z[0] = x`. Layer `k` owns the weight mapping `z[k-1]` to `z[k]`, stored at
//! `net.layers[k - 1]`, and the spacing parameter `steps[k - 1]`.
//!
//! Methods:
//! - BP: the ε recursion with derivative 0 at kinks.
//! - Fenchel BP: linearized local surrogate with Fenchel energies. Targets
//!   come from perturbed forward problems.
//! - GCL: global contrastive objective, free and clamped phases, layer weights `1/Π_{l≥k} β_l`.
//! - MAC/LCL: quadratic-penalty energy with gradient-descent inference.
//! - LPOM: local contrastive objective with Fenchel energies, block-coordinate inference.

use crate::bilevel::{clamped_from_pre, Loss};
use crate::energy::{Activation, EnergyForm, LayerEnergy, LossKind, NetworkSpec};
use crate::numeric::{Matrix, Vector};
use crate::{Error, Result};

/// Positive spacing parameters, one per layer (`β_k` or `τ_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpacingSchedule {
    steps: Vec<f64>,
}

impl SpacingSchedule {
    pub fn new(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("empty spacing schedule".into()));
        }
        if let Some(s) = steps.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing parameter {s} must be positive")));
        }
        Ok(SpacingSchedule { steps })
    }

    pub fn uniform(depth: usize, step: f64) -> Result<Self> {
        SpacingSchedule::new(vec![step; depth])
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Spacing of layer `k` (1-based).
    pub fn step(&self, k: usize) -> f64 {
        self.steps[k - 1]
    }

    /// `P_k = Π_{l=k}^{L} β_l` for `k = 1..=L`, returned 0-based.
    pub fn suffix_products(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.steps.len()];
        let mut acc = 1.0;
        for k in (0..self.steps.len()).rev() {
            acc *= self.steps[k];
            p[k] = acc;
        }
        p
    }

    /// MAC penalty weights `μ_k = 1/β_k` (local identification).
    pub fn lcl_weights(&self) -> Vec<f64> {
        self.steps.iter().map(|b| 1.0 / b).collect()
    }

    /// MAC penalty weights `μ_k = 1/Π_{l≥k} β_l` (global identification).
    pub fn gcl_weights(&self) -> Vec<f64> {
        self.suffix_products().iter().map(|p| 1.0 / p).collect()
    }

    fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.depth() != net.depth() {
            return Err(Error::shape("spacing schedule", net.depth(), self.depth()));
        }
        if let Some(p) = self.suffix_products().iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing product {p} underflows")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Bp,
    FenchelBp,
    Gcl,
    MacLcl,
    Lpom,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Bp => "bp",
            MethodKind::FenchelBp => "fenchel-bp",
            MethodKind::Gcl => "gcl",
            MethodKind::MacLcl => "mac",
            MethodKind::Lpom => "lpom",
        }
    }

    /// Energy form the method is defined for.
    pub fn natural_form(&self) -> EnergyForm {
        match self {
            MethodKind::Bp | MethodKind::MacLcl => EnergyForm::Penalizer,
            MethodKind::FenchelBp | MethodKind::Gcl | MethodKind::Lpom => EnergyForm::Fenchel,
        }
    }

    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        let form = net.form();
        if net.layers.iter().any(|l| l.form != form) {
            return Err(Error::InvalidArgument("mixed energy forms".into()));
        }
        let ok = match self {
            MethodKind::Bp => true,
            MethodKind::MacLcl => form == EnergyForm::Penalizer,
            MethodKind::FenchelBp | MethodKind::Gcl | MethodKind::Lpom => form != EnergyForm::Penalizer,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{} is not defined for {form:?} energies",
                self.name()
            )))
        }
    }
}

/// Forward states `z*` and pre-activations.
#[derive(Debug, Clone)]
pub struct ActivationState {
    /// `pre[k - 1] = W_{k-1} ẑ*_{k-1}` for layer `k`.
    pub pre: Vec<Vector>,
    /// `z_star[0] = x`, `z_star[k]` the layer-`k` output.
    pub z_star: Vec<Vector>,
}

impl ActivationState {
    pub fn output(&self) -> &Vector {
        self.z_star.last().unwrap()
    }
}

pub fn forward_pass(net: &NetworkSpec, x: &[f64]) -> Result<ActivationState> {
    if x.len() != net.input_dim() {
        return Err(Error::shape("forward_pass input", net.input_dim(), x.len()));
    }
    let mut z_star = Vec::with_capacity(net.depth() + 1);
    let mut pre = Vec::with_capacity(net.depth());
    z_star.push(Vector::from(x));
    for layer in &net.layers {
        let u = layer.pre_activation(z_star.last().unwrap());
        z_star.push(layer.activation.apply(&u));
        pre.push(u);
    }
    Ok(ActivationState { pre, z_star })
}

fn check_target(net: &NetworkSpec, y: &[f64]) -> Result<()> {
    if y.len() != net.output_dim() {
        return Err(Error::shape("target", net.output_dim(), y.len()));
    }
    Ok(())
}

/// BP errors `ε_k` (0-based by layer): `ε_L = -τ_L ℓ'`, `ε_k = (τ_k/τ_{k+1}) f_k'^T ε_{k+1}`.
pub fn bp_backward_pass(
    net: &NetworkSpec,
    state: &ActivationState,
    y: &[f64],
    sched: &SpacingSchedule,
) -> Result<Vec<Vector>> {
    sched.check(net)?;
    check_target(net, y)?;
    let depth = net.depth();
    let mut eps = vec![Vector::default(); depth];
    eps[depth - 1] = net.loss.grad(state.output(), y).scale(-sched.step(depth));
    for k in (1..depth).rev() {
        let upper = &net.layers[k];
        let local = upper.activation.jacobian_t_mul(&state.pre[k], &eps[k]);
        eps[k - 1] = upper.back_project(&local).scale(sched.step(k) / sched.step(k + 1));
    }
    Ok(eps)
}

/// Weight gradients from BP errors: `-(1/τ_k) f'(u_k) ε_k ẑ*_{k-1}^T`.
pub fn bp_weight_gradient(
    net: &NetworkSpec,
    state: &ActivationState,
    eps: &[Vector],
    sched: &SpacingSchedule,
) -> Vec<Matrix> {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let local = layer.activation.jacobian_t_mul(&state.pre[i], &eps[i]);
            let mut g = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            g.add_outer(-1.0 / sched.step(i + 1), &local, &state.z_star[i]);
            g
        })
        .collect()
}

/// Targets of a linearized backward pass together with the per-unit steps used.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// `z_bar[0] = x`, `z_bar[k]` the layer-`k` target.
    pub z_bar: Vec<Vector>,
    /// Per-unit `τ` of each layer (0-based by layer).
    pub taus: Vec<Vector>,
    /// `δ_k = r_k / τ_k` with `∂Ẽ_k/∂W = r_k ẑ*_{k-1}^T`; the weight gradient is `δ_k ẑ*_{k-1}^T`.
    pub delta: Vec<Vector>,
}

/// Spacing parameters of the hidden layers during a backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPolicy {
    /// Use the schedule.
    Fixed,
    /// One `τ` per layer and sample from [`adaptive_tau`].
    AdaptiveLayer(AdaptiveTau),
    /// Per-unit `τ` that lets silent units escape their dead zone. A unit
    /// qualifies when it is inactive on every sample of the batch and its
    /// feedback points towards the active region; it then gets
    /// `τ = max(τ_min, ρ · distance / |feedback|)`. All other units use `τ_min`.
    DeadUnitEscape(AdaptiveTau),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveTau {
    pub rho: f64,
    pub tau_min: f64,
    pub delta: f64,
}

impl Default for AdaptiveTau {
    fn default() -> Self {
        AdaptiveTau {
            rho: 1.0,
            tau_min: 1e-3,
            delta: 1e-12,
        }
    }
}

/// `max(τ_min, ρ ‖pre‖∞ / max(‖feedback‖∞, δ))`, where `pre + τ feedback`
/// is the perturbed pre-activation.
pub fn adaptive_tau(pre: &[f64], feedback: &[f64], p: &AdaptiveTau) -> f64 {
    let fb = feedback.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if fb == 0.0 {
        return p.tau_min;
    }
    let pre_inf = pre.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    p.tau_min.max(p.rho * pre_inf / fb.max(p.delta))
}

/// Distance a pre-activation must travel along `feedback` to leave the flat
/// region of the activation, if it sits there and the feedback points out.
fn dead_zone_distance(act: Activation, pre: f64, feedback: f64) -> Option<f64> {
    match act {
        Activation::Relu | Activation::HardSigmoid if pre < 0.0 && feedback > 0.0 => Some(-pre),
        Activation::HardSigmoid if pre > 1.0 && feedback < 0.0 => Some(pre - 1.0),
        _ => None,
    }
}

/// Units of each hidden layer that sit in a flat region for every sample.
pub fn dead_unit_masks(net: &NetworkSpec, states: &[&ActivationState]) -> Vec<Vec<bool>> {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let flat = |u: f64| match layer.activation {
                Activation::Relu => u <= 0.0,
                Activation::HardSigmoid => u <= 0.0 || u >= 1.0,
                _ => false,
            };
            (0..layer.out_dim())
                .map(|j| !states.is_empty() && states.iter().all(|s| flat(s.pre[i][j])))
                .collect()
        })
        .collect()
}

/// Fenchel BP with a fixed schedule:
/// `z̄_L = f(u_L - τ_L ℓ')`, `z̄_k = f(u_k + (τ_k/τ_{k+1}) W_k^T (z̄_{k+1} - z*_{k+1}))`.
pub fn fenchel_backward_pass(
    net: &NetworkSpec,
    state: &ActivationState,
    y: &[f64],
    sched: &SpacingSchedule,
) -> Result<BackwardPass> {
    linearized_backward_pass(net, state, y, sched, &TauPolicy::Fixed, None)
}

/// Backward pass of the linearized local surrogate for any energy form.
///
/// Each target solves a tilted forward problem
/// `z̄_k = argmin_z c_k^T z + E_k(z, z*_{k-1})`; with Penalizer energies this
/// is BP, with Fenchel energies Fenchel BP.
pub fn linearized_backward_pass(
    net: &NetworkSpec,
    state: &ActivationState,
    y: &[f64],
    sched: &SpacingSchedule,
    policy: &TauPolicy,
    dead: Option<&[Vec<bool>]>,
) -> Result<BackwardPass> {
    sched.check(net)?;
    check_target(net, y)?;
    let depth = net.depth();
    let mut z_bar = state.z_star.clone();
    let mut taus = vec![Vector::default(); depth];
    let mut delta = vec![Vector::default(); depth];

    // h_k: the per-unit tilt before scaling by τ_k
    let mut h = net.loss.grad(state.output(), y);
    for k in (1..=depth).rev() {
        let layer = &net.layers[k - 1];
        let n = layer.out_dim();
        let tau = match policy {
            _ if k == depth => Vector::filled(n, sched.step(k)),
            TauPolicy::Fixed => Vector::filled(n, sched.step(k)),
            TauPolicy::AdaptiveLayer(p) => {
                let feedback = h.scale(-1.0);
                Vector::filled(n, adaptive_tau(&state.pre[k - 1], &feedback, p))
            }
            TauPolicy::DeadUnitEscape(p) => Vector::from_fn(n, |j| {
                let unit_dead = dead.map_or(true, |d| d[k - 1][j]);
                let u = state.pre[k - 1][j];
                let g = -h[j];
                match dead_zone_distance(layer.activation, u, g) {
                    Some(dist) if unit_dead => p.tau_min.max(p.rho * dist / g.abs().max(p.delta)),
                    _ => p.tau_min,
                }
            }),
        };
        let tilt = tau.zip_map(&h, |t, h| t * h);
        let target = layer.tilted_minimizer(&state.z_star[k - 1], &tilt);
        let residual = tilde_residual(layer, &target, &state.pre[k - 1]);
        let d = residual.zip_map(&tau, |r, t| r / t);
        h = layer.back_project(&d);
        z_bar[k] = target;
        taus[k - 1] = tau;
        delta[k - 1] = d;
    }
    Ok(BackwardPass { z_bar, taus, delta })
}

fn tilde_residual(layer: &LayerEnergy, z: &[f64], u: &[f64]) -> Vector {
    let fz = layer.activation.apply(u);
    match layer.form {
        EnergyForm::Penalizer => layer.activation.jacobian_t_mul(u, &fz.sub(z)),
        _ => fz.sub(z),
    }
}

/// `(1/τ_k)(z*_k - z̄_k) ẑ*_{k-1}^T` per layer, with the forward state on the right.
pub fn fenchel_weight_gradient(net: &NetworkSpec, state: &ActivationState, pass: &BackwardPass) -> Vec<Matrix> {
    let mut grads: Vec<Matrix> = net
        .layers
        .iter()
        .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
        .collect();
    accumulate_linearized_gradient(state, pass, &mut grads, 1.0);
    grads
}

fn accumulate_linearized_gradient(state: &ActivationState, pass: &BackwardPass, grads: &mut [Matrix], scale: f64) {
    for (i, g) in grads.iter_mut().enumerate() {
        g.add_outer(scale, &pass.delta[i], &state.z_star[i]);
    }
}

/// Closed-form linearized local surrogate for a finished backward pass.
pub fn linearized_local_surrogate_value(
    net: &NetworkSpec,
    state: &ActivationState,
    pass: &BackwardPass,
    y: &[f64],
    sched: &SpacingSchedule,
) -> Result<f64> {
    sched.check(net)?;
    check_target(net, y)?;
    let depth = net.depth();
    let z_star = &state.z_star;
    let z_bar = &pass.z_bar;
    let lg = net.loss.grad(&z_star[depth], y);
    let mut value = net.loss.eval(&z_star[depth], y) + z_bar[depth].sub(&z_star[depth]).dot(&lg);
    for k in 1..=depth {
        let layer = &net.layers[k - 1];
        value += layer.tilde_energy(&z_bar[k], &z_star[k - 1]) / sched.step(k);
        if k < depth {
            let upper = &net.layers[k];
            let grad = upper.grad_tilde_wrt_lower(&z_bar[k + 1], &z_star[k]);
            value += z_bar[k].sub(&z_star[k]).dot(&grad) / sched.step(k + 1);
        }
    }
    Ok(value)
}

/// Stopping rules for iterative inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseOptions {
    pub max_sweeps: usize,
    /// Relative change of the iterate between sweeps.
    pub tol: f64,
    pub block_max_iters: usize,
    pub block_tol: f64,
}

impl Default for PhaseOptions {
    fn default() -> Self {
        PhaseOptions {
            max_sweeps: 500,
            tol: 1e-13,
            block_max_iters: 10_000,
            block_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseResult {
    /// `states[0] = x`.
    pub states: Vec<Vector>,
    pub sweeps: usize,
    /// False when the sweep budget ran out; `states` is the last iterate.
    pub converged: bool,
}

/// Visit order of one Gauss-Seidel double sweep: up, then down.
fn double_sweep(depth: usize) -> impl Iterator<Item = usize> {
    (1..=depth).chain((1..depth).rev())
}

fn max_change(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(a, b)| a.sub(b).norm_inf())
        .fold(0.0, f64::max)
}

fn max_abs(v: &[Vector]) -> f64 {
    v.iter().map(|v| v.norm_inf()).fold(0.0, f64::max)
}

/// GCL block argument `W_{k-1} z_{k-1} + β_k W_k^T z_{k+1}` (the second term only below the top).
fn gcl_block_argument(net: &NetworkSpec, z: &[Vector], k: usize, betas: &[f64]) -> Vector {
    let mut v = net.layers[k - 1].pre_activation(&z[k - 1]);
    if k < net.depth() {
        v.axpy(betas[k - 1], &net.layers[k].back_project(&z[k + 1]));
    }
    v
}

/// Minimizes `½‖z‖² - z^T v + (β/2)‖W ẑ‖²` over the box of `act`.
fn proximal_block(
    upper: &LayerEnergy,
    act: Activation,
    beta: f64,
    v: &[f64],
    start: &Vector,
    opts: &PhaseOptions,
) -> Vector {
    let (lo, hi) = act.box_bounds().expect("hidden layers are separable");
    let lip = 1.0 + beta * upper.weight.spectral_norm_sq() * (1.0 + 1e-9);
    let mut z = start.clone();
    for _ in 0..opts.block_max_iters {
        let mut g = z.sub(v);
        g.axpy(beta, &upper.back_project(&upper.pre_activation(&z)));
        let next = z.zip_map(&g, |z, g| (z - g / lip).clamp(lo, hi));
        let moved = next.sub(&z).norm_inf();
        z = next;
        if moved <= opts.block_tol * (1.0 + z.norm_inf()) {
            break;
        }
    }
    z
}

/// Block-coordinate minimization of `Σ_k E_k / P_k`, plus `ℓ(z_L)` when
/// `target` is given.
fn gcl_absolute_phase(
    net: &NetworkSpec,
    x: &[f64],
    target: Option<&[f64]>,
    sched: &SpacingSchedule,
    opts: &PhaseOptions,
) -> Result<PhaseResult> {
    let depth = net.depth();
    let betas = sched.steps();
    let mut z = forward_pass(net, x)?.z_star;
    if net.form() == EnergyForm::Penalizer && target.is_none() {
        return Ok(PhaseResult {
            states: z,
            sweeps: 0,
            converged: true,
        });
    }
    for sweep in 1..=opts.max_sweeps {
        let before = z.clone();
        for k in double_sweep(depth) {
            z[k] = gcl_block(net, &z, k, target, betas, opts)?;
        }
        if max_change(&z, &before) <= opts.tol * (1.0 + max_abs(&z)) {
            return Ok(PhaseResult {
                states: z,
                sweeps: sweep,
                converged: true,
            });
        }
    }
    Ok(PhaseResult {
        states: z,
        sweeps: opts.max_sweeps,
        converged: false,
    })
}

fn gcl_block(
    net: &NetworkSpec,
    z: &[Vector],
    k: usize,
    target: Option<&[f64]>,
    betas: &[f64],
    opts: &PhaseOptions,
) -> Result<Vector> {
    let depth = net.depth();
    let layer = &net.layers[k - 1];
    if k == depth {
        let u = layer.pre_activation(&z[k - 1]);
        return match target {
            None => Ok(layer.activation.apply(&u)),
            Some(y) => clamped_from_pre(
                layer.form,
                layer.activation,
                &u,
                &Loss::from_kind(net.loss, Vector::from(y)),
                betas[k - 1],
            ),
        };
    }
    match layer.form {
        EnergyForm::Fenchel => Ok(layer.activation.apply(&gcl_block_argument(net, z, k, betas))),
        EnergyForm::Proximal => {
            let mut v = layer.pre_activation(&z[k - 1]);
            v.axpy(betas[k - 1], &net.layers[k].back_project(&z[k + 1]));
            Ok(proximal_block(&net.layers[k], layer.activation, betas[k - 1], &v, &z[k], opts))
        }
        EnergyForm::Penalizer => penalizer_block(net, z, k, betas),
    }
}

/// Gradient steps on the (possibly nonconvex) Penalizer block.
fn penalizer_block(net: &NetworkSpec, z: &[Vector], k: usize, betas: &[f64]) -> Result<Vector> {
    let layer = &net.layers[k - 1];
    let upper = &net.layers[k];
    let fu = layer.forward_map(&z[k - 1]);
    let block = |zk: &Vector| {
        0.5 * zk.sub(&fu).norm_sq() + betas[k - 1] * upper.energy(&z[k + 1], zk)
    };
    let grad = |zk: &Vector| {
        let mut g = zk.sub(&fu);
        g.axpy(betas[k - 1], &upper.grad_tilde_wrt_lower(&z[k + 1], zk));
        g
    };
    let mut zk = z[k].clone();
    let mut f = block(&zk);
    let mut step = 1.0 / (1.0 + betas[k - 1] * upper.weight.spectral_norm_sq());
    for _ in 0..200 {
        let g = grad(&zk);
        if g.norm_inf() <= 1e-14 {
            break;
        }
        let mut accepted = false;
        while step > 1e-12 {
            let cand = zk.zip_map(&g, |z, g| z - step * g);
            let fc = block(&cand);
            if fc <= f - 0.5 * step * g.norm_sq() {
                zk = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(zk)
}

/// Free phase `ž = argmin Σ_k E_k / P_k`.
pub fn free_phase(net: &NetworkSpec, x: &[f64], sched: &SpacingSchedule) -> Result<PhaseResult> {
    sched.check(net)?;
    gcl_absolute_phase(net, x, None, sched, &PhaseOptions::default())
}

/// Clamped phase `ẑ = argmin ℓ(z_L) + Σ_k E_k / P_k`.
pub fn clamped_phase(
    net: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    sched: &SpacingSchedule,
) -> Result<PhaseResult> {
    let (free, offsets) = gcl_phases(net, x, y, sched, &PhaseOptions::default())?;
    let states = free
        .states
        .iter()
        .zip(&offsets.states)
        .map(|(a, d)| a.add(d))
        .collect();
    Ok(PhaseResult {
        states,
        sweeps: offsets.sweeps,
        converged: offsets.converged,
    })
}

/// Free solution and the clamped solution as an offset `Δ = ẑ - ž`.
///
/// With Fenchel energies the offsets are iterated directly, so they keep full
/// relative precision even when `P_k` is tiny.
pub fn gcl_phases(
    net: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    sched: &SpacingSchedule,
    opts: &PhaseOptions,
) -> Result<(PhaseResult, PhaseResult)> {
    sched.check(net)?;
    check_target(net, y)?;
    let free = gcl_absolute_phase(net, x, None, sched, opts)?;
    if net.form() != EnergyForm::Fenchel {
        let clamped = gcl_absolute_phase(net, x, Some(y), sched, opts)?;
        let offsets = clamped
            .states
            .iter()
            .zip(&free.states)
            .map(|(c, f)| c.sub(f))
            .collect();
        return Ok((
            free,
            PhaseResult {
                states: offsets,
                sweeps: clamped.sweeps,
                converged: clamped.converged,
            },
        ));
    }

    let depth = net.depth();
    let betas = sched.steps();
    let zf = &free.states;
    let args: Vec<Vector> = (1..=depth).map(|k| gcl_block_argument(net, zf, k, betas)).collect();
    let mut d: Vec<Vector> = zf.iter().map(|v| Vector::zeros(v.dim())).collect();
    let top = &net.layers[depth - 1];
    let beta_top = betas[depth - 1];
    for sweep in 1..=opts.max_sweeps {
        let before = d.clone();
        for k in double_sweep(depth) {
            let layer = &net.layers[k - 1];
            let mut dv = layer.linear_map(&d[k - 1]);
            if k < depth {
                dv.axpy(betas[k - 1], &net.layers[k].back_project(&d[k + 1]));
                d[k] = layer.activation.apply_diff(&args[k - 1], &dv);
            } else {
                let base = &args[k - 1];
                d[k] = match (net.loss, top.activation) {
                    (LossKind::SquaredError, Activation::Softmax) => {
                        return Err(Error::Unsupported(
                            "squared loss on a softmax output in the clamped phase".into(),
                        ))
                    }
                    (LossKind::SquaredError, act) => {
                        // prox of the squared loss moves u by β(y - u)/(1 + β)
                        let shift: Vector = (0..dv.dim())
                            .map(|j| beta_top * (y[j] - base[j] - dv[j]) / (1.0 + beta_top))
                            .collect();
                        act.apply_diff(base, &dv.add(&shift))
                    }
                    (LossKind::CrossEntropy, act) => {
                        let u = base.add(&dv);
                        let z = clamped_from_pre(top.form, act, &u, &Loss::CrossEntropy(Vector::from(y)), beta_top)?;
                        z.sub(&zf[k])
                    }
                };
            }
        }
        let scale = max_abs(&d);
        if max_change(&d, &before) <= opts.tol * scale || scale == 0.0 {
            return Ok((
                free,
                PhaseResult {
                    states: d,
                    sweeps: sweep,
                    converged: true,
                },
            ));
        }
    }
    Ok((
        free,
        PhaseResult {
            states: d,
            sweeps: opts.max_sweeps,
            converged: false,
        },
    ))
}

/// `Σ_k (1/P_k)(∂_W E_k(ẑ) - ∂_W E_k(ž))`, one matrix per layer.
pub fn gcl_weight_gradient(
    net: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    sched: &SpacingSchedule,
) -> Result<Vec<Matrix>> {
    gcl_weight_gradient_with(net, x, y, sched, &PhaseOptions::default()).map(|(g, _)| g)
}

/// As [`gcl_weight_gradient`], also reporting whether both phases converged.
pub fn gcl_weight_gradient_with(
    net: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    sched: &SpacingSchedule,
    opts: &PhaseOptions,
) -> Result<(Vec<Matrix>, bool)> {
    let (free, offsets) = gcl_phases(net, x, y, sched, opts)?;
    let p = sched.suffix_products();
    let zf = &free.states;
    let d = &offsets.states;
    let grads = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let k = i + 1;
            let mut g = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            let z_hat_prev = zf[k - 1].add(&d[k - 1]);
            let scale = 1.0 / p[i];
            match layer.form {
                EnergyForm::Fenchel => {
                    // -(ẑ_k ẑ_{k-1}^T - ž_k ž_{k-1}^T) = -(Δ_k ẑ_{k-1}^T + ž_k Δ_{k-1}^T)
                    g.add_outer(-scale, &d[k], &z_hat_prev);
                    g.add_outer_prefix(-scale, &zf[k], &d[k - 1]);
                }
                _ => {
                    let z_hat = zf[k].add(&d[k]);
                    let hat = layer.grad_energy_wrt_weight(&z_hat, &z_hat_prev);
                    let free = layer.grad_energy_wrt_weight(&zf[k], &zf[k - 1]);
                    g = hat.sub(&free).scale(scale);
                }
            }
            g
        })
        .collect();
    Ok((grads, free.converged && offsets.converged))
}

/// `Ɛ^β(z) = Σ_k E_k(z_k, z_{k-1}) / P_k`
pub fn gcl_energy(net: &NetworkSpec, z: &[Vector], sched: &SpacingSchedule) -> f64 {
    let p = sched.suffix_products();
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.energy(&z[i + 1], &z[i]) / p[i])
        .sum()
}

/// `ℒ^β_GC = min Ɛ̂^β - min Ɛ^β`
pub fn gcl_objective(net: &NetworkSpec, x: &[f64], y: &[f64], sched: &SpacingSchedule) -> Result<f64> {
    let (free, offsets) = gcl_phases(net, x, y, sched, &PhaseOptions::default())?;
    let clamped: Vec<Vector> = free.states.iter().zip(&offsets.states).map(|(a, d)| a.add(d)).collect();
    let depth = net.depth();
    Ok(net.loss.eval(&clamped[depth], y) + gcl_energy(net, &clamped, sched) - gcl_energy(net, &free.states, sched))
}

/// `ℓ(z_L) + Σ_k (μ_k/2)‖z_k - f(W_{k-1} z_{k-1})‖²`
pub fn mac_energy(net: &NetworkSpec, z: &[Vector], y: &[f64], mu: &[f64]) -> f64 {
    let depth = net.depth();
    let mut e = net.loss.eval(&z[depth], y);
    for (i, layer) in net.layers.iter().enumerate() {
        e += 0.5 * mu[i] * z[i + 1].sub(&layer.forward_map(&z[i])).norm_sq();
    }
    e
}

fn mac_state_gradient(net: &NetworkSpec, z: &[Vector], y: &[f64], mu: &[f64]) -> Vec<Vector> {
    let depth = net.depth();
    let mut g: Vec<Vector> = z.iter().map(|v| Vector::zeros(v.dim())).collect();
    for k in 1..=depth {
        let layer = &net.layers[k - 1];
        let u = layer.pre_activation(&z[k - 1]);
        let r = z[k].sub(&layer.activation.apply(&u));
        g[k].axpy(mu[k - 1], &r);
        if k >= 2 {
            let back = layer.back_project(&layer.activation.jacobian_t_mul(&u, &r));
            g[k - 1].axpy(-mu[k - 1], &back);
        }
    }
    g[depth].axpy(1.0, &net.loss.grad(&z[depth], y));
    g
}

/// Gradient-descent inference on [`mac_energy`] from the forward states.
pub fn mac_infer(
    net: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    mu: &[f64],
    steps: usize,
    step_size: f64,
) -> Result<Vec<Vector>> {
    if net.loss != LossKind::SquaredError {
        return Err(Error::Unsupported("MAC inference needs the squared loss".into()));
    }
    check_target(net, y)?;
    let mut z = forward_pass(net, x)?.z_star;
    for _ in 0..steps {
        let g = mac_state_gradient(net, &z, y, mu);
        for k in 1..z.len() {
            z[k].axpy(-step_size, &g[k]);
        }
    }
    Ok(z)
}

/// `μ_k ∂_W ½‖z_k - f(W z_{k-1})‖²` per layer.
pub fn mac_weight_gradient(net: &NetworkSpec, z: &[Vector], mu: &[f64]) -> Vec<Matrix> {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let penal = LayerEnergy {
                form: EnergyForm::Penalizer,
                ..l.clone()
            };
            penal.grad_tilde_wrt_weight(&z[i + 1], &z[i]).scale(mu[i])
        })
        .collect()
}

/// `ℓ(z_L) + Σ_k (1/β_k) Ẽ_k(z_k, z_{k-1})`
pub fn lpom_objective(net: &NetworkSpec, z: &[Vector], y: &[f64], sched: &SpacingSchedule) -> Result<f64> {
    let depth = net.depth();
    if z.len() != depth + 1 {
        return Err(Error::shape("lpom state", depth + 1, z.len()));
    }
    let mut value = net.loss.eval(&z[depth], y);
    for k in 1..=depth {
        let t = net.layers[k - 1].tilde_energy(&z[k], &z[k - 1]);
        if t.is_infinite() {
            return Err(Error::InvalidArgument(format!("state of layer {k} is infeasible")));
        }
        value += t / sched.step(k);
    }
    Ok(value)
}

/// Exact minimizer of the LPOM objective over `z_k` with its neighbours fixed.
pub fn lpom_infer_layer(
    net: &NetworkSpec,
    z: &[Vector],
    k: usize,
    y: &[f64],
    sched: &SpacingSchedule,
    opts: &PhaseOptions,
) -> Result<Vector> {
    let depth = net.depth();
    let layer = &net.layers[k - 1];
    let u = layer.pre_activation(&z[k - 1]);
    if k == depth {
        return clamped_from_pre(
            EnergyForm::Fenchel,
            layer.activation,
            &u,
            &Loss::from_kind(net.loss, Vector::from(y)),
            sched.step(k),
        );
    }
    let (lo, hi) = layer
        .activation
        .box_bounds()
        .ok_or_else(|| Error::Unsupported("softmax hidden layer".into()))?;
    let upper = &net.layers[k];
    let (bk, bu) = (sched.step(k), sched.step(k + 1));
    // smooth part: (1/β_k)(½‖z‖² - z^T u) + (1/β_{k+1})(G*(W z) - z_{k+1}^T W z)
    let lip = (1.0 / bk + upper.weight.spectral_norm_sq() / bu) * (1.0 + 1e-9);
    let grad = |zk: &Vector| {
        let mut g = zk.sub(&u).scale(1.0 / bk);
        let r = upper.forward_map(zk).sub(&z[k + 1]);
        g.axpy(1.0 / bu, &upper.back_project(&r));
        g
    };
    let mut zk = z[k].clone();
    for _ in 0..opts.block_max_iters {
        let g = grad(&zk);
        let next = zk.zip_map(&g, |z, g| (z - g / lip).clamp(lo, hi));
        let moved = next.sub(&zk).norm_inf();
        zk = next;
        if moved <= opts.block_tol * (1.0 + zk.norm_inf()) {
            break;
        }
    }
    Ok(zk)
}

#[derive(Debug, Clone)]
pub struct LpomInference {
    pub states: Vec<Vector>,
    /// Objective after initialization and after every block update.
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Block-coordinate LPOM inference from the forward states.
pub fn lpom_infer(
    net: &NetworkSpec,
    x: &[f64],
    y: &[f64],
    sched: &SpacingSchedule,
    opts: &PhaseOptions,
) -> Result<LpomInference> {
    sched.check(net)?;
    check_target(net, y)?;
    MethodKind::Lpom.check(net)?;
    let depth = net.depth();
    let mut z = forward_pass(net, x)?.z_star;
    let mut trace = vec![lpom_objective(net, &z, y, sched)?];
    for sweep in 1..=opts.max_sweeps {
        let before = z.clone();
        for k in double_sweep(depth) {
            z[k] = lpom_infer_layer(net, &z, k, y, sched, opts)?;
            trace.push(lpom_objective(net, &z, y, sched)?);
        }
        if max_change(&z, &before) <= opts.tol * (1.0 + max_abs(&z)) {
            return Ok(LpomInference {
                states: z,
                trace,
                sweeps: sweep,
                converged: true,
            });
        }
    }
    Ok(LpomInference {
        states: z,
        trace,
        sweeps: opts.max_sweeps,
        converged: false,
    })
}

/// `(1/β_k) ∂_W Ẽ_k(z_k, z_{k-1})` at the inferred states.
pub fn lpom_weight_gradient(net: &NetworkSpec, z: &[Vector], sched: &SpacingSchedule) -> Vec<Matrix> {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.grad_tilde_wrt_weight(&z[i + 1], &z[i]).scale(1.0 / sched.step(i + 1)))
        .collect()
}

/// Everything a training step needs besides the data and learning rate.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub method: MethodKind,
    pub schedule: SpacingSchedule,
    pub tau_policy: TauPolicy,
    pub phase: PhaseOptions,
    pub mac_steps: usize,
}

impl TrainerConfig {
    pub fn new(method: MethodKind, schedule: SpacingSchedule) -> Self {
        TrainerConfig {
            method,
            schedule,
            tau_policy: TauPolicy::Fixed,
            phase: PhaseOptions::default(),
            mac_steps: 50,
        }
    }

    pub fn with_tau_policy(mut self, policy: TauPolicy) -> Self {
        self.tau_policy = policy;
        self
    }
}

/// Mean weight gradient and mean loss over a batch, reduced in sample order.
pub fn batch_gradient(
    net: &NetworkSpec,
    xs: &[&[f64]],
    ys: &[&[f64]],
    cfg: &TrainerConfig,
) -> Result<(Vec<Matrix>, f64)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "batch of {} inputs and {} targets",
            xs.len(),
            ys.len()
        )));
    }
    cfg.method.check(net)?;
    cfg.schedule.check(net)?;
    let scale = 1.0 / xs.len() as f64;
    let mut grads: Vec<Matrix> = net
        .layers
        .iter()
        .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
        .collect();
    let states: Vec<ActivationState> = xs.iter().map(|x| forward_pass(net, x)).collect::<Result<_>>()?;
    let mut loss = 0.0;
    for (s, y) in states.iter().zip(ys) {
        check_target(net, y)?;
        loss += net.loss.eval(s.output(), y);
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }

    match cfg.method {
        MethodKind::Bp => {
            for (s, y) in states.iter().zip(ys) {
                let eps = bp_backward_pass(net, s, y, &cfg.schedule)?;
                for (i, layer) in net.layers.iter().enumerate() {
                    let local = layer.activation.jacobian_t_mul(&s.pre[i], &eps[i]);
                    grads[i].add_outer(-scale / cfg.schedule.step(i + 1), &local, &s.z_star[i]);
                }
            }
        }
        MethodKind::FenchelBp => {
            let masks = match cfg.tau_policy {
                TauPolicy::DeadUnitEscape(_) => {
                    let refs: Vec<&ActivationState> = states.iter().collect();
                    Some(dead_unit_masks(net, &refs))
                }
                _ => None,
            };
            for (s, y) in states.iter().zip(ys) {
                let pass = linearized_backward_pass(net, s, y, &cfg.schedule, &cfg.tau_policy, masks.as_deref())?;
                accumulate_linearized_gradient(s, &pass, &mut grads, scale);
            }
        }
        MethodKind::Gcl => {
            for (x, y) in xs.iter().zip(ys) {
                let (g, _) = gcl_weight_gradient_with(net, x, y, &cfg.schedule, &cfg.phase)?;
                for (acc, g) in grads.iter_mut().zip(&g) {
                    acc.axpy(scale, g);
                }
            }
        }
        MethodKind::MacLcl => {
            let mu = cfg.schedule.lcl_weights();
            let mu_max = mu.iter().copied().fold(0.0, f64::max);
            for (x, y) in xs.iter().zip(ys) {
                let z = mac_infer(net, x, y, &mu, cfg.mac_steps, 0.1 / mu_max)?;
                for (acc, g) in grads.iter_mut().zip(&mac_weight_gradient(net, &z, &mu)) {
                    acc.axpy(scale, g);
                }
            }
        }
        MethodKind::Lpom => {
            for (x, y) in xs.iter().zip(ys) {
                let inf = lpom_infer(net, x, y, &cfg.schedule, &cfg.phase)?;
                for (acc, g) in grads.iter_mut().zip(&lpom_weight_gradient(net, &inf.states, &cfg.schedule)) {
                    acc.axpy(scale, g);
                }
            }
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of layer {}", i + 1)));
    }
    Ok((grads, loss))
}

/// One SGD step on every layer. Returns the mean batch loss before the update.
pub fn train_step(
    net: &mut NetworkSpec,
    xs: &[&[f64]],
    ys: &[&[f64]],
    cfg: &TrainerConfig,
    lr: f64,
) -> Result<f64> {
    let (grads, loss) = batch_gradient(net, xs, ys, cfg)?;
    for (layer, g) in net.layers.iter_mut().zip(&grads) {
        layer.weight = crate::numeric::sgd_step(&layer.weight, g, lr)?;
    }
    Ok(loss)
}
