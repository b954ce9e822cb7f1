use il_lab::bilevel::{
    clamped_minimizer, contrastive_surrogate_value, directional_derivative_qp, free_minimizer,
    relu_one_sided_derivative, BilevelProblem, Loss, QpInstance,
};
use il_lab::data::{evaluate, one_hot, parse_idx_images, parse_idx_labels, read_metrics, write_metrics, Dataset, Metrics, Split};
use il_lab::energy::{Activation, EnergyForm, Init, LayerEnergy, LossKind, NetworkSpec};
use il_lab::numeric::{finite_difference_gradient, sgd_step, Matrix, Rng, Vector};
use il_lab::trainers::{
    clamped_phase, fenchel_backward_pass, forward_pass, free_phase, gcl_energy, lpom_infer, PhaseOptions,
    SpacingSchedule,
};
use proptest::prelude::*;
use std::path::Path;

const ACTS: [Activation; 4] = [Activation::Identity, Activation::Relu, Activation::HardSigmoid, Activation::Softmax];
const FORMS: [EnergyForm; 3] = [EnergyForm::Penalizer, EnergyForm::Fenchel, EnergyForm::Proximal];

fn in_domain(act: Activation, raw: &[f64]) -> Vector {
    match act {
        Activation::Identity => Vector::from(raw),
        Activation::Relu => raw.iter().map(|v| v.abs()).collect(),
        Activation::HardSigmoid => raw.iter().map(|v| v.abs().min(1.0)).collect(),
        Activation::Softmax => {
            let w: Vector = raw.iter().map(|v| v.abs()).collect();
            let s: f64 = w.iter().sum();
            if s == 0.0 {
                Vector::filled(w.dim(), 1.0 / w.dim() as f64)
            } else {
                w.scale(1.0 / s)
            }
        }
    }
}

fn small_net(seed: u64, dims: &[usize], act: Activation, form: EnergyForm) -> NetworkSpec {
    NetworkSpec::mlp(
        dims,
        act,
        Activation::Identity,
        form,
        LossKind::SquaredError,
        seed % 2 == 0,
        Init::Glorot,
        &mut Rng::new(seed),
    )
    .unwrap()
}

fn vec_strategy(n: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rng_is_reproducible(seed in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..16 {
            prop_assert_eq!(a.uniform(-1.0, 1.0).to_bits(), b.uniform(-1.0, 1.0).to_bits());
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn finite_differences_on_quadratics(a in vec_strategy(9, 1.0), b in vec_strategy(3, 1.0), t in vec_strategy(3, 1.0)) {
        let a = Matrix::from_vec(3, 3, a).unwrap();
        let b = Vector::from(b);
        let theta = Matrix::from_vec(3, 1, t).unwrap();
        let f = |m: &Matrix| {
            let x = Vector::from(m.as_slice());
            0.5 * x.dot(&a.matvec(&x)) + b.dot(&x)
        };
        let h = 1e-5;
        let g = finite_difference_gradient(f, &theta, h).unwrap();
        let x = Vector::from(theta.as_slice());
        let exact = a.matvec(&x).add(&a.matvec_t(&x)).scale(0.5).add(&b);
        for (g, e) in g.as_slice().iter().zip(exact.iter()) {
            prop_assert!((g - e).abs() < 100.0 * h * h + 1e-9);
        }
    }

    #[test]
    fn sgd_step_is_linear(t in vec_strategy(6, 2.0), g1 in vec_strategy(6, 2.0), g2 in vec_strategy(6, 2.0), lr in 0.0..1.0f64) {
        let m = |v: Vec<f64>| Matrix::from_vec(2, 3, v).unwrap();
        let (t, g1, g2) = (m(t), m(g1), m(g2));
        let mut sum = g1.clone();
        sum.axpy(1.0, &g2);
        let once = sgd_step(&t, &sum, lr).unwrap();
        let twice = sgd_step(&sgd_step(&t, &g1, lr).unwrap(), &g2, lr).unwrap();
        prop_assert!(once.sub(&twice).max_abs() < 1e-12);
    }

    #[test]
    fn fenchel_young_inequality(a in 0..4usize, z in vec_strategy(5, 3.0), u in vec_strategy(5, 6.0)) {
        let act = ACTS[a];
        let z = in_domain(act, &z);
        prop_assert!(act.fenchel_young_gap(&z, &u) >= -1e-12);
        prop_assert!(act.fenchel_young_gap(&act.apply(&u), &u).abs() <= 1e-9);
    }

    #[test]
    fn conjugate_gradient_is_the_activation(a in 0..4usize, u in vec_strategy(6, 10.0)) {
        let act = ACTS[a];
        let (value, grad) = act.conjugate_eval(&u);
        prop_assert_eq!(grad, act.apply(&u));
        prop_assert_eq!(value, act.g_star(&u));
    }

    #[test]
    fn tilde_energy_vanishes_only_at_the_forward_map(
        a in 0..4usize, f in 0..3usize, w in vec_strategy(12, 2.0), zp in vec_strategy(3, 2.0), z in vec_strategy(4, 3.0)
    ) {
        let act = ACTS[a];
        let layer = LayerEnergy::new(FORMS[f], act, Matrix::from_vec(4, 3, w).unwrap(), false).unwrap();
        let z = in_domain(act, &z);
        let t = layer.tilde_energy(&z, &zp);
        prop_assert!(t >= -1e-12);
        let fwd = layer.forward_map(&zp);
        prop_assert!(layer.tilde_energy(&fwd, &zp).abs() <= 1e-9);
        if z.sub(&fwd).norm_inf() > 1e-3 {
            prop_assert!(t > 0.0);
        }
    }

    #[test]
    fn relu_and_hard_sigmoid_agree_inside_the_unit_box(x in prop::collection::vec(0.0..1.0f64, 3)) {
        let w = Matrix::from_fn(4, 3, |i, j| 0.3 * ((i + j) % 3) as f64 / 3.0);
        let relu = LayerEnergy::new(EnergyForm::Fenchel, Activation::Relu, w.clone(), false).unwrap();
        let hs = LayerEnergy::new(EnergyForm::Fenchel, Activation::HardSigmoid, w, false).unwrap();
        prop_assert_eq!(relu.forward_map(&x), hs.forward_map(&x));
    }

    #[test]
    fn softmax_conjugate_is_stable(u in vec_strategy(6, 700.0)) {
        let (v, g) = Activation::Softmax.conjugate_eval(&u);
        prop_assert!(v.is_finite() && g.is_finite());
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_surrogate_is_nonnegative(w in vec_strategy(6, 2.0), x in vec_strategy(3, 1.0), y in vec_strategy(2, 1.0), beta in 1e-3..10.0f64, a in 1..3usize) {
        let layer = LayerEnergy::new(EnergyForm::Fenchel, ACTS[a], Matrix::from_vec(2, 3, w).unwrap(), false).unwrap();
        let p = BilevelProblem::new(layer, Vector::from(x), Loss::Squared(Vector::from(y))).unwrap();
        prop_assert!(contrastive_surrogate_value(&p, beta).unwrap() >= -1e-12);
    }

    #[test]
    fn qp_solution_satisfies_kkt(
        n in 2..6usize, seed in any::<u64>(), coupled in any::<bool>()
    ) {
        let mut rng = Rng::new(seed);
        let l = Matrix::from_fn(n, n, |i, j| if coupled || i == j { rng.uniform(-1.0, 1.0) } else { 0.0 });
        let mut a = Matrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] += (0..n).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            }
        }
        let rows: Vec<usize> = (0..n).filter(|_| rng.coin(0.6)).collect();
        let b = Matrix::from_fn(rows.len(), n, |r, k| if coupled { rng.uniform(-1.0, 1.0) } else if rows[r] == k { 1.0 } else { 0.0 });
        let q = QpInstance {
            a,
            b,
            c: rng.uniform_vector(n, -2.0, 2.0),
            weakly_active: rows.iter().map(|_| rng.coin(0.5)).collect(),
        };
        let s = directional_derivative_qp(&q).unwrap();
        prop_assert!(q.kkt_residuals(&s).max() <= 1e-10);
    }

    #[test]
    fn relu_rule_equals_decoupled_qp(pre in prop::collection::vec(prop_oneof![Just(0.0), -2.0..2.0f64], 1..8), seed in any::<u64>()) {
        let n = pre.len();
        let g = Rng::new(seed).uniform_vector(n, -2.0, 2.0);
        let active: Vec<usize> = (0..n).filter(|&j| pre[j] <= 0.0).collect();
        let q = QpInstance {
            a: Matrix::identity(n),
            b: Matrix::from_fn(active.len(), n, |r, k| if active[r] == k { 1.0 } else { 0.0 }),
            c: g.clone(),
            weakly_active: active.iter().map(|&j| pre[j] == 0.0).collect(),
        };
        let s = directional_derivative_qp(&q).unwrap();
        prop_assert_eq!(relu_one_sided_derivative(&pre, &g).unwrap(), s.z_dot);
    }

    #[test]
    fn clamped_difference_quotient_converges_linearly(u in vec_strategy(4, 2.0), y in vec_strategy(4, 1.0)) {
        // keep pre-activations clear of the kink so the limit is approached at rate β
        let u: Vector = u.iter().map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { *v }).collect();
        let layer = LayerEnergy::new(EnergyForm::Fenchel, Activation::Relu, Matrix::identity(4), false).unwrap();
        let p = BilevelProblem::new(layer, u.clone(), Loss::Squared(Vector::from(y.clone()))).unwrap();
        let z = free_minimizer(&p);
        let limit = relu_one_sided_derivative(&u, &z.sub(&y)).unwrap();
        let gap = |beta: f64| clamped_minimizer(&p, beta).unwrap().sub(&z).scale(1.0 / beta).sub(&limit).norm_inf();
        let (g3, g4, g5) = (gap(1e-3), gap(1e-4), gap(1e-5));
        prop_assert!(g4 <= 0.2 * g3 + 1e-9 && g5 <= 0.2 * g4 + 1e-9);
    }

    #[test]
    fn network_tilde_energy_is_nonnegative(seed in any::<u64>(), a in 1..3usize, f in 0..3usize, noise in vec_strategy(12, 0.5)) {
        let net = small_net(seed, &[3, 5, 4], ACTS[a], FORMS[f]);
        let x = [0.2, 0.5, 0.9];
        let s = forward_pass(&net, &x).unwrap();
        let at_forward: f64 = (0..2).map(|k| net.layers[k].tilde_energy(&s.z_star[k + 1], &s.z_star[k])).sum();
        prop_assert!(at_forward.abs() <= 1e-9);
        let mut z = s.z_star.clone();
        z[1] = in_domain(ACTS[a], &z[1].add(&noise[..5]));
        z[2] = z[2].add(&noise[5..9]);
        let total: f64 = (0..2).map(|k| net.layers[k].tilde_energy(&z[k + 1], &z[k])).sum();
        prop_assert!(total >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clamped_energy_dominates_free_energy(seed in any::<u64>(), a in 1..3usize, beta in 0.05..0.5f64, y in vec_strategy(2, 1.0)) {
        let net = small_net(seed, &[3, 4, 2], ACTS[a], EnergyForm::Fenchel);
        let sched = SpacingSchedule::uniform(2, beta).unwrap();
        let x = [0.3, 0.6, 0.1];
        let free = free_phase(&net, &x, &sched).unwrap();
        let clamped = clamped_phase(&net, &x, &y, &sched).unwrap();
        prop_assert!(gcl_energy(&net, &clamped.states, &sched) >= gcl_energy(&net, &free.states, &sched) - 1e-9);
    }

    #[test]
    fn lpom_sweeps_are_monotone(seed in any::<u64>(), a in 1..3usize, beta in 0.05..1.0f64, y in vec_strategy(2, 1.0)) {
        let net = small_net(seed, &[3, 5, 4, 2], ACTS[a], EnergyForm::Fenchel);
        let sched = SpacingSchedule::uniform(3, beta).unwrap();
        let opts = PhaseOptions { max_sweeps: 20, ..PhaseOptions::default() };
        let inf = lpom_infer(&net, &[0.3, 0.6, 0.1], &y, &sched, &opts).unwrap();
        for w in inf.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
        prop_assert!(inf.trace.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_loss_gradient_leaves_targets_at_forward_states(seed in any::<u64>(), a in 1..3usize, tau in 1e-3..1.0f64) {
        let net = small_net(seed, &[3, 5, 2], ACTS[a], EnergyForm::Fenchel);
        let s = forward_pass(&net, &[0.3, 0.6, 0.1]).unwrap();
        let y = s.output().clone();
        let pass = fenchel_backward_pass(&net, &s, &y, &SpacingSchedule::uniform(2, tau).unwrap()).unwrap();
        prop_assert_eq!(pass.z_bar, s.z_star);
    }

    #[test]
    fn shuffle_is_a_permutation(seed in any::<u64>(), n in 0..200usize) {
        let mut v: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut v);
        v.sort_unstable();
        prop_assert_eq!(v, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn error_rate_is_scale_invariant(seed in any::<u64>(), s in 0.01..100.0f64) {
        let mut net = small_net(seed, &[2, 6, 3], Activation::Relu, EnergyForm::Penalizer);
        let mut rng = Rng::new(seed ^ 1);
        let inputs: Vec<Vector> = (0..40).map(|_| rng.uniform_vector(2, 0.0, 1.0)).collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.index(3)).collect();
        let d = Dataset::new("probe", inputs, labels, 3).unwrap();
        let before = evaluate(&net, &d).unwrap().0;
        let top = net.layers.last_mut().unwrap();
        top.weight = top.weight.scale(s);
        prop_assert_eq!(before, evaluate(&net, &d).unwrap().0);
    }

    #[test]
    fn one_hot_sums_to_one(n in 1..20usize, l in 0..20usize) {
        let l = l % n;
        let v = one_hot(l, n).unwrap();
        prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(v.argmax(), l);
    }

    #[test]
    fn idx_parsing_is_exact(pixels in prop::collection::vec(any::<u8>(), 0..6 * 12), labels in prop::collection::vec(0..10u8, 6)) {
        let count = pixels.len() / 12;
        let mut img = Vec::new();
        for v in [0x0803u32, count as u32, 3, 4] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&pixels[..count * 12]);
        let mut lab = Vec::new();
        for v in [0x0801u32, count as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(&labels[..count]);
        let x = parse_idx_images(&img, Path::new("img")).unwrap();
        let y = parse_idx_labels(&lab, Path::new("lab")).unwrap();
        prop_assert_eq!(x.len(), count);
        for (i, v) in x.iter().enumerate() {
            for (j, p) in v.iter().enumerate() {
                prop_assert_eq!(*p, f64::from(pixels[i * 12 + j]) / 255.0);
            }
        }
        prop_assert_eq!(y, labels[..count].iter().map(|&b| usize::from(b)).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_round_trip(rows in prop::collection::vec((1..100usize, any::<bool>(), 0.0..1.0f64, 0.0..10.0f64, 0..100_000u64), 0..10)) {
        let m: Vec<Metrics> = rows
            .into_iter()
            .map(|(epoch, train, error_rate, mean_loss, wall_ms)| Metrics {
                epoch,
                split: if train { Split::Train } else { Split::Test },
                error_rate,
                mean_loss,
                wall_ms,
            })
            .collect();
        let mut bytes = Vec::new();
        write_metrics(&m, &mut bytes).unwrap();
        let back = read_metrics(bytes.as_slice(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), m.len());
        for (a, b) in m.iter().zip(&back) {
            prop_assert!((a.error_rate - b.error_rate).abs() <= 5e-7);
            prop_assert_eq!((a.epoch, a.split, a.mean_loss, a.wall_ms), (b.epoch, b.split, b.mean_loss, b.wall_ms));
        }
    }
}
