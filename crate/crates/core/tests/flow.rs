use vllm_lab::autodiff::Tape;
use vllm_lab::flow::*;
use vllm_lab::{Rng, Tensor};

fn t(data: Vec<f64>) -> Tensor {
    let n = data.len();
    Tensor::new(vec![n], data).unwrap()
}

#[test]
fn interpolation_endpoints_are_exact() {
    let mut rng = Rng::new(1);
    let x0 = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
    let x1 = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
    assert_eq!(interpolate(&x0, &x1, 0.0).unwrap().data(), x0.data());
    assert_eq!(interpolate(&x0, &x1, 1.0).unwrap().data(), x1.data());
}

#[test]
fn midpoint_of_zero_and_two_is_one() {
    let m = interpolate(&t(vec![0.0; 5]), &t(vec![2.0; 5]), 0.5).unwrap();
    assert_eq!(m.data(), &[1.0; 5]);
}

#[test]
fn interpolation_symmetry_identity() {
    let mut rng = Rng::new(2);
    let a = Tensor::randn(&[32], 1.0, &mut rng);
    let b = Tensor::randn(&[32], 1.0, &mut rng);
    for &s in &[0.1, 0.37, 0.5, 0.9] {
        let l = interpolate(&a, &b, s).unwrap();
        let r = interpolate(&b, &a, s).unwrap();
        for i in 0..32 {
            let sum = a.data()[i] + b.data()[i];
            assert!((l.data()[i] + r.data()[i] - sum).abs() <= 1e-14 * sum.abs().max(1.0));
        }
    }
}

#[test]
fn interpolation_rejects_bad_inputs() {
    let a = t(vec![0.0; 3]);
    assert!(interpolate(&a, &t(vec![0.0; 4]), 0.5).is_err());
    assert!(interpolate(&a, &a, 1.5).is_err());
    assert!(interpolate(&a, &a, -0.1).is_err());
    assert!(velocity_target(&a, &t(vec![0.0; 2])).is_err());
}

#[test]
fn velocity_target_properties() {
    let mut rng = Rng::new(3);
    let a = Tensor::randn(&[16], 1.0, &mut rng);
    let b = Tensor::randn(&[16], 1.0, &mut rng);
    assert!(velocity_target(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
    let ab = velocity_target(&a, &b).unwrap();
    let ba = velocity_target(&b, &a).unwrap();
    for i in 0..16 {
        assert_eq!(ab.data()[i], -ba.data()[i]);
    }
    // The path derivative equals the target at every t.
    let h = 1e-6;
    for &s in &[0.1, 0.5, 0.8] {
        let up = interpolate(&a, &b, s + h).unwrap();
        let down = interpolate(&a, &b, s - h).unwrap();
        for i in 0..16 {
            let d = (up.data()[i] - down.data()[i]) / (2.0 * h);
            assert!((d - ab.data()[i]).abs() < 1e-8, "t={s}: {d} vs {}", ab.data()[i]);
        }
    }
}

#[test]
fn trajectory_samples_satisfy_their_invariants() {
    let mut rng = Rng::new(4);
    let data: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&[6], 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor> = data.iter().collect();
    for s in sample_trajectories(&refs, &mut rng).unwrap() {
        assert!((0.0..1.0).contains(&s.t));
        assert_eq!(s.x_t, interpolate(&s.x0, &s.x1, s.t).unwrap());
        assert_eq!(s.v_target, velocity_target(&s.x0, &s.x1).unwrap());
    }
    assert!(sample_trajectories(&[], &mut rng).is_err());
}

#[test]
fn oracle_predictions_give_zero_loss() {
    let mut rng = Rng::new(5);
    let data: Vec<Tensor> = (0..8).map(|_| Tensor::randn(&[10], 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor> = data.iter().collect();
    let samples = sample_trajectories(&refs, &mut rng).unwrap();
    let preds: Vec<Vec<f64>> = samples.iter().map(|s| s.v_target.data().to_vec()).collect();
    assert_eq!(loss_from_predictions(&samples, &preds).unwrap(), 0.0);
}

#[test]
fn zero_field_on_zero_data_has_unit_loss() {
    // x1 = 0 and v = 0 leave |x0|²/dim, whose mean is 1.
    let mut rng = Rng::new(6);
    let zero = Tensor::zeros(&[4]);
    let refs = vec![&zero; 10_000];
    let samples = sample_trajectories(&refs, &mut rng).unwrap();
    let preds = vec![vec![0.0; 4]; samples.len()];
    let loss = loss_from_predictions(&samples, &preds).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "{loss}");
}

#[test]
fn flow_loss_gradient_matches_finite_differences() {
    let cfg = FlowConfig {
        data_dim: 2,
        hidden: 6,
        cond_dim: 3,
        steps: 10,
        integrator: Integrator::Euler,
    };
    let net = VelocityNet::init(cfg, 3).unwrap();
    let mut rng = Rng::new(7);
    let data: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2], 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor> = data.iter().collect();
    let conds: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3, 1.0)).collect();
    let samples = sample_trajectories(&refs, &mut rng).unwrap();
    let loss_of = |n: &VelocityNet| {
        let mut tape = Tape::new();
        let b = n.params.register(&mut tape, false);
        let l = n.loss_on_tape(&mut tape, &b, &samples, &conds).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let b = net.params.register(&mut tape, true);
    let l = net.loss_on_tape(&mut tape, &b, &samples, &conds).unwrap();
    tape.backward(l).unwrap();
    let mut probe = net.clone();
    let h = 1e-5;
    for (pi, name) in net.params.names().iter().enumerate() {
        let g = tape.grad(b.vars()[pi]).unwrap().to_vec();
        for e in 0..g.len() {
            let orig = probe.params.get(name).unwrap().data()[e];
            probe.params.get_mut(name).unwrap().data_mut()[e] = orig + h;
            let up = loss_of(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[e] = orig - h;
            let down = loss_of(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[e] = orig;
            let num = (up - down) / (2.0 * h);
            let err = (g[e] - num).abs() / g[e].abs().max(num.abs()).max(1e-6);
            assert!(err <= 1e-4, "{name}[{e}]: {} vs {num}", g[e]);
        }
    }
}

fn field<F: Fn(&[f64], f64, &[f64]) -> Vec<f64>>(dim: usize, f: F) -> FnField<F> {
    FnField { dim, f }
}

#[test]
fn zero_field_returns_the_noise_draw() {
    let f = field(5, |x, _, _| vec![0.0; x.len()]);
    for integ in [Integrator::Euler, Integrator::Heun] {
        let s = euler_sample(&f, &[], 7, integ, 11).unwrap();
        assert_eq!(s.raw, s.x0);
        assert_eq!(s.x0, Rng::new(11).normal_vec(5, 1.0));
    }
}

#[test]
fn constant_field_is_integrated_exactly() {
    let c = [0.5, -1.25, 2.0];
    let f = field(3, move |_, _, _| c.to_vec());
    for n in [1, 3, 50] {
        let s = euler_sample(&f, &[], n, Integrator::Euler, 2).unwrap();
        for i in 0..3 {
            assert!((s.raw[i] - (s.x0[i] + c[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn euler_on_linear_decay_matches_geometric_product() {
    let f = field(4, |x, _, _| x.iter().map(|v| -v).collect());
    let s = euler_sample(&f, &[], 50, Integrator::Euler, 3).unwrap();
    let factor = (1.0f64 - 1.0 / 50.0).powi(50);
    for i in 0..4 {
        assert!((s.raw[i] - s.x0[i] * factor).abs() < 1e-12);
    }
}

#[test]
fn samples_are_clamped_only_in_the_image_view() {
    let f = field(3, |_, _, _| vec![5.0, -5.0, 0.0]);
    let s = euler_sample(&f, &[], 4, Integrator::Euler, 1).unwrap();
    assert_eq!(s.clamped[0], 1.0);
    assert_eq!(s.clamped[1], 0.0);
    assert!(s.raw[0] > 1.0 && s.raw[1] < 0.0);
}

/// Error of the sampler against `x0·e^{-1}` on `v = -x`.
fn decay_error(integ: Integrator, n: usize) -> f64 {
    let f = field(1, |x, _, _| vec![-x[0]]);
    let x0 = vec![vec![1.0]];
    let out = integrate(&f, x0, &[], n, integ).unwrap();
    (out[0][0] - (-1.0f64).exp()).abs()
}

#[test]
fn integrator_orders() {
    for (integ, want) in [(Integrator::Euler, 2.0), (Integrator::Heun, 4.0)] {
        for n in [10, 20, 40] {
            let ratio = decay_error(integ, n) / decay_error(integ, 2 * n);
            assert!((ratio / want - 1.0).abs() <= 0.2, "{integ:?} N={n}: ratio {ratio}");
        }
    }
}

#[test]
fn straightness_of_constant_field_is_zero() {
    let f = field(3, |_, _, _| vec![1.0, 2.0, 3.0]);
    assert!(straightness(&f, &[], 5, 1).unwrap() < 1e-24);
    let curved = field(2, |x, t, _| vec![-x[1] * t, x[0]]);
    assert!(straightness(&curved, &[], 5, 1).unwrap() > 0.0);
}

#[test]
fn net_velocity_is_deterministic_and_batched_consistently() {
    let net = VelocityNet::init(
        FlowConfig {
            data_dim: 4,
            hidden: 8,
            cond_dim: 2,
            steps: 5,
            integrator: Integrator::Heun,
        },
        1,
    )
    .unwrap();
    let xs = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 1.0, 2.0]];
    let cs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let both = net.velocity_batch(&xs, 0.3, &cs).unwrap();
    let one = net.velocity_batch(&xs[1..], 0.3, &cs[1..]).unwrap();
    assert_eq!(both, net.velocity_batch(&xs, 0.3, &cs).unwrap());
    for (a, b) in both[1].iter().zip(&one[0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(net.velocity_batch(&xs, 0.3, &cs[..1]).is_err());
}

#[test]
fn planar_training_reduces_loss() {
    let report = run_flow2d(&Flow2dSettings {
        steps: 300,
        batch: 64,
        samples: 200,
        probes: 8,
        lr: 1e-3,
        seed: 4,
    })
    .unwrap();
    assert_eq!(report.losses.len(), 300);
    assert_eq!(report.samples.len(), 200);
    let head: f64 = report.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = report.losses[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
}
