//! Rectified flow: straight-line couplings between Gaussian noise (`t = 0`)
//! and data (`t = 1`), a velocity MLP regressed onto `x1 - x0`, and ODE
//! samplers over the learned field.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, OptimizerState};
use crate::params::{Bound, Parameters};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `t` itself plus sin/cos at four octaves.
pub const TIME_FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Heun,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Integrator::Euler),
            "heun" => Ok(Integrator::Heun),
            other => Err(Error::UnknownWord(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Width of the conditioning vector; 0 for an unconditional flow.
    pub cond_dim: usize,
    pub steps: usize,
    pub integrator: Integrator,
}

impl FlowConfig {
    /// Whole-image flow conditioned on a pooled text embedding.
    pub fn image(cond_dim: usize) -> Self {
        FlowConfig {
            data_dim: 3 * 32 * 32,
            hidden: 256,
            cond_dim,
            steps: 50,
            integrator: Integrator::Euler,
        }
    }

    /// Unconditional flow on the plane.
    pub fn planar() -> Self {
        FlowConfig {
            data_dim: 2,
            cond_dim: 0,
            ..FlowConfig::image(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.steps == 0 {
            return Err(Error::OutOfRange("flow dims and steps must be positive".into()));
        }
        Ok(())
    }
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    f[0] = t;
    for j in 0..4 {
        let w = PI * f64::from(1u32 << j);
        f[1 + 2 * j] = (w * t).sin();
        f[2 + 2 * j] = (w * t).cos();
    }
    f
}

/// `(1 - t)·x0 + t·x1`, exact at both endpoints.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    same_shape("interpolate", x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} outside [0, 1]")));
    }
    let data = if t == 0.0 {
        x0.data().to_vec()
    } else if t == 1.0 {
        x1.data().to_vec()
    } else {
        x0.data().iter().zip(x1.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    };
    Tensor::new(x0.shape().to_vec(), data)
}

pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    same_shape("velocity_target", x0, x1)?;
    let data = x0.data().iter().zip(x1.data()).map(|(a, b)| b - a).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` for each data point, in order.
pub fn sample_trajectories(data: &[&Tensor], rng: &mut Rng) -> Result<Vec<TrajectorySample>> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    data.iter()
        .map(|&x1| {
            let x0 = Tensor::randn(x1.shape(), 1.0, rng);
            let t = rng.uniform();
            Ok(TrajectorySample {
                x_t: interpolate(&x0, x1, t)?,
                v_target: velocity_target(&x0, x1)?,
                x0,
                x1: x1.clone(),
                t,
            })
        })
        .collect()
}

/// Mean squared velocity error per dimension.
pub fn loss_from_predictions(samples: &[TrajectorySample], predictions: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if samples.len() != predictions.len() {
        return Err(Error::Length(format!("{} samples, {} predictions", samples.len(), predictions.len())));
    }
    let mut total = 0.0;
    for (s, p) in samples.iter().zip(predictions) {
        let target = s.v_target.data();
        if p.len() != target.len() {
            return Err(Error::Length(format!("prediction of {} values for {}", p.len(), target.len())));
        }
        let sq: f64 = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / target.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Anything that can act as a velocity field.
pub trait VelocityField {
    fn dim(&self) -> usize;

    /// Velocities for a batch of states sharing one time.
    fn velocity_batch(&self, xs: &[Vec<f64>], t: f64, conds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Closure-backed field, handy for closed-form flows.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64, &[f64]) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity_batch(&self, xs: &[Vec<f64>], t: f64, conds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(xs
            .iter()
            .enumerate()
            .map(|(i, x)| (self.f)(x, t, conds.get(i).map_or(&[][..], Vec::as_slice)))
            .collect())
    }
}

/// Two-hidden-layer SiLU MLP. The condition enters additively through its
/// own projection into the first hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub config: FlowConfig,
    pub params: Parameters,
}

impl VelocityNet {
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (d, h, c) = (config.data_dim, config.hidden, config.cond_dim);
        let mut p = Parameters::new();
        let mut w = |rows: usize, cols: usize| Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut rng);
        p.push("w_x", w(d, h));
        p.push("w_t", w(TIME_FEATURES, h));
        if c > 0 {
            p.push("w_c", w(c, h));
        }
        p.push("b1", Tensor::zeros(&[h]));
        p.push("w2", w(h, h));
        p.push("b2", Tensor::zeros(&[h]));
        p.push("w3", w(h, d));
        p.push("b3", Tensor::zeros(&[d]));
        p.push("w_skip", Tensor::zeros(&[TIME_FEATURES, 1]));
        Ok(VelocityNet { config, params: p })
    }

    pub fn from_parts(config: FlowConfig, params: Parameters) -> Result<Self> {
        let reference = VelocityNet::init(config.clone(), 0)?;
        if reference.params.names() != params.names()
            || reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::format("flow parameters", "names or shapes do not match the config"));
        }
        Ok(VelocityNet { config, params })
    }

    /// `x: [B, data_dim]`, one time per row, `cond: [B, cond_dim]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, b: &Bound, x: Var, ts: &[f64], cond: Option<Var>) -> Result<Var> {
        let tf: Vec<f64> = ts.iter().flat_map(|&t| time_features(t)).collect();
        let tf = tape.constant(Tensor::new(vec![ts.len(), TIME_FEATURES], tf)?);
        let hx = tape.matmul(x, b.var("w_x"))?;
        let ht = tape.matmul(tf, b.var("w_t"))?;
        let mut h = tape.add(hx, ht)?;
        if let (Some(c), Some(wc)) = (cond, b.try_var("w_c")) {
            let hc = tape.matmul(c, wc)?;
            h = tape.add(h, hc)?;
        }
        let h = tape.add_row(h, b.var("b1"))?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, b.var("w2"))?;
        let h = tape.add_row(h, b.var("b2"))?;
        let h = tape.silu(h)?;
        let y = tape.matmul(h, b.var("w3"))?;
        let y = tape.add_row(y, b.var("b3"))?;
        // Time-gated identity path. The hidden layer is far narrower than an
        // image, so the `-x_t / (1 - t)` part of the ideal field cannot pass
        // through it.
        let gate = tape.matmul(tf, b.var("w_skip"))?;
        let ones = tape.constant(Tensor::ones(&[1, self.config.data_dim]));
        let gate = tape.matmul(gate, ones)?;
        let skip = tape.mul(gate, x)?;
        tape.add(y, skip)
    }

    fn cond_tensor(&self, conds: &[Vec<f64>], rows: usize) -> Result<Option<Tensor>> {
        let c = self.config.cond_dim;
        if c == 0 {
            return Ok(None);
        }
        if conds.len() != rows || conds.iter().any(|v| v.len() != c) {
            return Err(Error::Length(format!("expected {rows} conditions of width {c}")));
        }
        Ok(Some(Tensor::new(vec![rows, c], conds.concat())?))
    }

    /// Loss on a sampled batch, built on `tape`.
    pub fn loss_on_tape(&self, tape: &mut Tape, b: &Bound, samples: &[TrajectorySample], conds: &[Vec<f64>]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = samples.len();
        let d = self.config.data_dim;
        let xs: Vec<f64> = samples.iter().flat_map(|s| s.x_t.data().iter().copied()).collect();
        let targets: Vec<f64> = samples.iter().flat_map(|s| s.v_target.data().iter().copied()).collect();
        if xs.len() != n * d {
            return Err(Error::Length(format!("flow samples must have {d} values each")));
        }
        let x = tape.constant(Tensor::new(vec![n, d], xs)?);
        let cond = self.cond_tensor(conds, n)?.map(|c| tape.constant(c));
        let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
        let v = self.forward_on_tape(tape, b, x, &ts, cond)?;
        let target = tape.constant(Tensor::new(vec![n, d], targets)?);
        let diff = tape.sub(v, target)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean(sq)
    }

    /// Samples a batch with `rng` and returns its loss value.
    pub fn flow_loss(&self, data: &[&Tensor], conds: &[Vec<f64>], rng: &mut Rng) -> Result<f64> {
        let samples = sample_trajectories(data, rng)?;
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        let loss = self.loss_on_tape(&mut tape, &b, &samples, conds)?;
        Ok(tape.value(loss).item())
    }

    pub fn train_step(&mut self, opt: &mut OptimizerState, data: &[&Tensor], conds: &[Vec<f64>], rng: &mut Rng) -> Result<f64> {
        let samples = sample_trajectories(data, rng)?;
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, true);
        let loss = self.loss_on_tape(&mut tape, &b, &samples, conds)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.params.absorb_grads(&tape, &b);
        adamw_step(&mut self.params.tensors_mut(), opt)?;
        Ok(value)
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.config.data_dim
    }

    fn velocity_batch(&self, xs: &[Vec<f64>], t: f64, conds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (n, d) = (xs.len(), self.config.data_dim);
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![n, d], xs.concat())?);
        let cond = self.cond_tensor(conds, n)?.map(|c| tape.constant(c));
        let v = self.forward_on_tape(&mut tape, &b, x, &vec![t; n], cond)?;
        Ok(tape.value(v).data().chunks(d).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    /// Final state before clamping.
    pub raw: Vec<f64>,
    /// `raw` clamped to `[0, 1]` for use as an image.
    pub clamped: Vec<f64>,
}

/// Integrates `dx/dt = v(x, t, c)` from `t = 0` to `1` in `steps` uniform
/// steps for every start point.
pub fn integrate(
    field: &dyn VelocityField,
    mut xs: Vec<Vec<f64>>,
    conds: &[Vec<f64>],
    steps: usize,
    integrator: Integrator,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::OutOfRange("sampler needs at least one step".into()));
    }
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * h;
        let v = field.velocity_batch(&xs, t, conds)?;
        match integrator {
            Integrator::Euler => {
                for (x, v) in xs.iter_mut().zip(&v) {
                    axpy(x, h, v);
                }
            }
            Integrator::Heun => {
                let predicted: Vec<Vec<f64>> = xs
                    .iter()
                    .zip(&v)
                    .map(|(x, v)| {
                        let mut p = x.clone();
                        axpy(&mut p, h, v);
                        p
                    })
                    .collect();
                let v2 = field.velocity_batch(&predicted, t + h, conds)?;
                for ((x, a), b) in xs.iter_mut().zip(&v).zip(&v2) {
                    for ((xi, ai), bi) in x.iter_mut().zip(a).zip(b) {
                        *xi += 0.5 * h * (ai + bi);
                    }
                }
            }
        }
    }
    Ok(xs)
}

fn axpy(x: &mut [f64], a: f64, v: &[f64]) {
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi += a * vi;
    }
}

/// Draws one noise vector per condition from `seed` and integrates each.
/// With `cond_dim = 0` pass `count` empty conditions.
pub fn sample_batch(
    field: &dyn VelocityField,
    conds: &[Vec<f64>],
    steps: usize,
    integrator: Integrator,
    seed: u64,
) -> Result<Vec<FlowSample>> {
    let mut rng = Rng::new(seed);
    let x0: Vec<Vec<f64>> = conds.iter().map(|_| rng.normal_vec(field.dim(), 1.0)).collect();
    let out = integrate(field, x0.clone(), conds, steps, integrator)?;
    Ok(x0
        .into_iter()
        .zip(out)
        .map(|(x0, raw)| FlowSample {
            clamped: raw.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            x0,
            raw,
        })
        .collect())
}

pub fn euler_sample(field: &dyn VelocityField, cond: &[f64], steps: usize, integrator: Integrator, seed: u64) -> Result<FlowSample> {
    let mut s = sample_batch(field, &[cond.to_vec()], steps, integrator, seed)?;
    Ok(s.remove(0))
}

/// Mean over Euler steps (N = 50) of `|v - (x̂1 - x0)|² / dim`, averaged
/// over `probes` trajectories. Zero means the field is constant along
/// every probed path.
pub fn straightness(field: &dyn VelocityField, cond: &[f64], probes: usize, seed: u64) -> Result<f64> {
    const N: usize = 50;
    if probes == 0 {
        return Err(Error::OutOfRange("straightness needs at least one probe".into()));
    }
    let dim = field.dim();
    let mut rng = Rng::new(seed);
    let x0: Vec<Vec<f64>> = (0..probes).map(|_| rng.normal_vec(dim, 1.0)).collect();
    let conds = vec![cond.to_vec(); probes];
    let h = 1.0 / N as f64;
    let mut xs = x0.clone();
    let mut history = Vec::with_capacity(N);
    for k in 0..N {
        let v = field.velocity_batch(&xs, k as f64 * h, &conds)?;
        for (x, v) in xs.iter_mut().zip(&v) {
            axpy(x, h, v);
        }
        history.push(v);
    }
    let mut total = 0.0;
    for p in 0..probes {
        let chord: Vec<f64> = xs[p].iter().zip(&x0[p]).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for v in &history {
            s += v[p].iter().zip(&chord).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / dim as f64;
        }
        total += s / N as f64;
    }
    Ok(total / probes as f64)
}

/// Mixture of two isotropic Gaussians at `(±2, 0)`, σ = 0.3, equal weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoGaussians {
    pub centers: [[f64; 2]; 2],
    pub sigma: f64,
}

impl Default for TwoGaussians {
    fn default() -> Self {
        TwoGaussians {
            centers: [[-2.0, 0.0], [2.0, 0.0]],
            sigma: 0.3,
        }
    }
}

impl TwoGaussians {
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                let c = self.centers[rng.below(2)];
                let p = vec![c[0] + self.sigma * rng.normal(), c[1] + self.sigma * rng.normal()];
                Tensor::raw(vec![2], p)
            })
            .collect()
    }

    pub fn nearest_mode(&self, p: &[f64]) -> usize {
        let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        usize::from(d(&self.centers[1]) < d(&self.centers[0]))
    }

    /// Per-mode sample means and weights after nearest-mode assignment.
    pub fn mode_summary(&self, points: &[Vec<f64>]) -> ([[f64; 2]; 2], [f64; 2]) {
        let mut sums = [[0.0; 2]; 2];
        let mut counts = [0usize; 2];
        for p in points {
            let m = self.nearest_mode(p);
            sums[m][0] += p[0];
            sums[m][1] += p[1];
            counts[m] += 1;
        }
        let mut means = [[f64::NAN; 2]; 2];
        for m in 0..2 {
            if counts[m] > 0 {
                means[m] = [sums[m][0] / counts[m] as f64, sums[m][1] / counts[m] as f64];
            }
        }
        let n = points.len().max(1) as f64;
        (means, [counts[0] as f64 / n, counts[1] as f64 / n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow2dSettings {
    pub steps: usize,
    pub batch: usize,
    pub samples: usize,
    pub probes: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Flow2dSettings {
    fn default() -> Self {
        Flow2dSettings {
            steps: 3000,
            batch: 256,
            samples: 2000,
            probes: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow2dReport {
    pub targets: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub straightness_untrained: f64,
    pub straightness_trained: f64,
    pub mode_means: [[f64; 2]; 2],
    pub mode_weights: [f64; 2],
}

/// Trains an unconditional planar flow on [`TwoGaussians`] and samples it.
pub fn run_flow2d(settings: &Flow2dSettings) -> Result<Flow2dReport> {
    let task = TwoGaussians::default();
    let mut rng = Rng::new(settings.seed);
    let mut net = VelocityNet::init(FlowConfig::planar(), rng.next_u64())?;
    let mut opt = OptimizerState::new(
        net.params.tensors(),
        crate::optim::AdamWConfig {
            learning_rate: settings.lr,
            ..Default::default()
        },
    );
    let probe_seed = rng.next_u64();
    let straightness_untrained = straightness(&net, &[], settings.probes, probe_seed)?;
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let batch = task.sample(settings.batch, &mut rng);
        let refs: Vec<&Tensor> = batch.iter().collect();
        losses.push(net.train_step(&mut opt, &refs, &[], &mut rng)?);
    }
    let straightness_trained = straightness(&net, &[], settings.probes, probe_seed)?;
    let empty = vec![Vec::new(); settings.samples];
    let samples: Vec<Vec<f64>> = sample_batch(&net, &empty, 50, Integrator::Euler, rng.next_u64())?
        .into_iter()
        .map(|s| s.raw)
        .collect();
    let targets = task
        .sample(settings.samples, &mut rng)
        .into_iter()
        .map(Tensor::into_data)
        .collect();
    let (mode_means, mode_weights) = task.mode_summary(&samples);
    Ok(Flow2dReport {
        targets,
        samples,
        losses,
        straightness_untrained,
        straightness_trained,
        mode_means,
        mode_weights,
    })
}
