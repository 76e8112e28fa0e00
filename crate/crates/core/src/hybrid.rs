//! Pathwise simulation of the two-parameter switching diffusion
//!
//! ```text
//! dX(t) = f(X(t), a(t)) dt + sqrt(delta) * sigma(X(t), a(t)) dW(t)
//! ```
//!
//! and of the pure-switching ODE obtained at `delta = 0`.
//!
//! Between switching events the state advances by Euler-Maruyama on a
//! uniform grid, with every substep cut at `min(next grid time, next switch
//! time)` so regime changes happen exactly at the sampled jump times. The
//! switching chain is sampled on the fly: exponential holding times for a
//! constant generator, thinning against the bound `qbar/eps` for a
//! state-dependent one. Candidate events of the thinning scheme that get
//! rejected only cut a substep; they are not recorded.
//!
//! For models whose noise rows are componentwise linear
//! (`sigma row k = x_k * v_{k,i}` with constant `v`), the `log_euler`
//! scheme integrates `y_k = ln x_k` with drift
//! `f_k(x,i)/x_k - delta |v_{k,i}|^2 / 2` and the constant row coefficient,
//! which keeps the path in the open positive orthant.
//!
//! Randomness: the switching chain and the Brownian increments draw from
//! separate deterministic substreams (see [`crate::rng`]), so the chain is
//! independent of the driving noise and each path of a batch is
//! reproducible regardless of batch size or thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{Generator, StateDependentGenerator};
use crate::error::{Error, Result};
use crate::rng::{substream, Channel};

/// Default blow-up guard radius.
pub const DEFAULT_GUARD_RADIUS: f64 = 1e6;

/// Integration scheme between switching events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    LogEuler,
}

/// Simulation parameters for one hybrid path or batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    pub eps: f64,
    pub delta: f64,
    /// Grid step `h`.
    pub step: f64,
    pub horizon: f64,
    pub seed: u64,
    pub scheme: Scheme,
    /// Burn-in time discarded by measure builders.
    pub burn_in: f64,
    /// Blow-up guard radius.
    #[serde(default = "default_guard")]
    pub guard_radius: f64,
}

fn default_guard() -> f64 {
    DEFAULT_GUARD_RADIUS
}

impl SimParams {
    pub fn new(eps: f64, delta: f64, step: f64, horizon: f64, seed: u64) -> Self {
        SimParams {
            eps,
            delta,
            step,
            horizon,
            seed,
            scheme: Scheme::EulerMaruyama,
            burn_in: 0.0,
            guard_radius: DEFAULT_GUARD_RADIUS,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.eps > 0.0) {
            problems.push(format!("eps = {} must be positive", self.eps));
        }
        if !(self.delta >= 0.0) {
            problems.push(format!("delta = {} must be nonnegative", self.delta));
        }
        if !(self.step > 0.0) {
            problems.push(format!("step = {} must be positive", self.step));
        }
        if !(self.horizon > 0.0) {
            problems.push(format!("horizon = {} must be positive", self.horizon));
        }
        if self.step > self.horizon {
            problems.push(format!(
                "step {} exceeds horizon {}",
                self.step, self.horizon
            ));
        }
        if self.burn_in < 0.0 || self.burn_in > self.horizon {
            problems.push(format!(
                "burn-in {} outside [0, horizon = {}]",
                self.burn_in, self.horizon
            ));
        }
        if !(self.guard_radius > 0.0) {
            problems.push(format!(
                "guard radius {} must be positive",
                self.guard_radius
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }
}

/// The switching mechanism of a hybrid model.
pub enum Switching {
    Constant(Generator),
    StateDependent(StateDependentGenerator),
}

impl Switching {
    pub fn n_states(&self) -> usize {
        match self {
            Switching::Constant(q) => q.n_states(),
            Switching::StateDependent(q) => q.n_states(),
        }
    }
}

pub type DriftFn = dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync;
/// Writes the `dim x noise_dim` diffusion matrix row-major into the buffer.
pub type DiffusionFn = dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync;

/// Full specification of the hybrid system: drift and diffusion callbacks
/// per regime plus the switching mechanism.
pub struct HybridModel {
    dim: usize,
    noise_dim: usize,
    drift: Box<DriftFn>,
    diffusion: Box<DiffusionFn>,
    pub switching: Switching,
    /// `linear_noise[k]` declares that sigma row `k` equals
    /// `x_k * (constant vector)` in every regime.
    linear_noise: Vec<bool>,
    /// State must remain in the open positive orthant.
    positive_domain: bool,
}

impl HybridModel {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: Box<DriftFn>,
        diffusion: Box<DiffusionFn>,
        switching: Switching,
    ) -> Self {
        HybridModel {
            dim,
            noise_dim,
            drift,
            diffusion,
            switching,
            linear_noise: vec![false; dim],
            positive_domain: false,
        }
    }

    pub fn with_linear_noise(mut self, flags: Vec<bool>) -> Self {
        assert_eq!(flags.len(), self.dim);
        self.linear_noise = flags;
        self
    }

    pub fn with_positive_domain(mut self) -> Self {
        self.positive_domain = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn n_regimes(&self) -> usize {
        self.switching.n_states()
    }

    pub fn positive_domain(&self) -> bool {
        self.positive_domain
    }

    pub fn linear_noise(&self) -> &[bool] {
        &self.linear_noise
    }

    pub fn drift(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        (self.drift)(x, regime, out);
    }

    pub fn diffusion(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        (self.diffusion)(x, regime, out);
    }

    /// Checks the declared linear-noise rows: the row evaluated at two
    /// probe points must scale exactly with `x_k`.
    pub fn validate_linear_noise(&self) -> Result<()> {
        let probes = [
            vec![1.0; self.dim],
            (0..self.dim).map(|k| 2.0 + k as f64).collect(),
        ];
        let mut s0 = vec![0.0; self.dim * self.noise_dim];
        let mut s1 = vec![0.0; self.dim * self.noise_dim];
        for i in 0..self.n_regimes() {
            self.diffusion(&probes[0], i, &mut s0);
            self.diffusion(&probes[1], i, &mut s1);
            for k in 0..self.dim {
                if !self.linear_noise[k] {
                    continue;
                }
                for j in 0..self.noise_dim {
                    let a = s0[k * self.noise_dim + j] / probes[0][k];
                    let b = s1[k * self.noise_dim + j] / probes[1][k];
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                        return Err(Error::validation(format!(
                            "sigma row {k} declared linear in x_{k} but does not scale \
                             (regime {i}, channel {j}: {a} vs {b})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Constant coefficient vectors `v_{k,i} = sigma_row_k(x, i) / x_k`
    /// for the log-Euler scheme, evaluated at the all-ones probe.
    fn noise_coefficients(&self) -> Vec<Vec<f64>> {
        let probe = vec![1.0; self.dim];
        let mut out = Vec::with_capacity(self.n_regimes());
        let mut buf = vec![0.0; self.dim * self.noise_dim];
        for i in 0..self.n_regimes() {
            self.diffusion(&probe, i, &mut buf);
            out.push(buf.clone());
        }
        out
    }
}

impl std::fmt::Debug for HybridModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridModel")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("n_regimes", &self.n_regimes())
            .field("linear_noise", &self.linear_noise)
            .field("positive_domain", &self.positive_domain)
            .finish()
    }
}

/// Time-stamped piecewise record of one hybrid path: every grid time and
/// every switching time, with the regime in force from that record on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flat row-major states, `dim` entries per record.
    pub states: Vec<f64>,
    pub regimes: Vec<u32>,
    /// Marks records that lie on the uniform grid (as opposed to pure
    /// switching times).
    pub on_grid: Vec<bool>,
    pub params: SimParams,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// CSV export: `t, x_1..x_d, regime`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t")?;
        for k in 0..self.dim {
            write!(w, ",x_{}", k + 1)?;
        }
        writeln!(w, ",regime")?;
        for k in 0..self.len() {
            write!(w, "{}", self.times[k])?;
            for v in self.state(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.regimes[k] + 1)?;
        }
        Ok(())
    }
}

/// Per-substep switching driver; samples jump/candidate times lazily.
enum SwitchDriver<'a> {
    /// Single state or rateless chain: never switches.
    None,
    Markov {
        q: &'a Generator,
        eps: f64,
        next: f64,
    },
    /// Thinning against the global bound: candidates at rate `qbar/eps`,
    /// accepted with probability `|q_ii(x)|/qbar`.
    Thinned {
        q: &'a StateDependentGenerator,
        eps: f64,
        next: f64,
    },
}

impl<'a> SwitchDriver<'a> {
    fn new(model: &'a HybridModel, eps: f64, regime: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        match &model.switching {
            Switching::Constant(q) => {
                if q.n_states() == 1 {
                    return Ok(SwitchDriver::None);
                }
                if !q.check_irreducible() {
                    return Err(Error::precondition("switching generator is reducible"));
                }
                let exit = -q.rate(regime, regime);
                let next = exp_time(rng, exit / eps);
                Ok(SwitchDriver::Markov { q, eps, next })
            }
            Switching::StateDependent(q) => {
                if q.n_states() == 1 {
                    return Ok(SwitchDriver::None);
                }
                let next = exp_time(rng, q.bound() / eps);
                Ok(SwitchDriver::Thinned { q, eps, next })
            }
        }
    }

    fn next_event(&self) -> f64 {
        match self {
            SwitchDriver::None => f64::INFINITY,
            SwitchDriver::Markov { next, .. } => *next,
            SwitchDriver::Thinned { next, .. } => *next,
        }
    }

    /// Processes the event at the current time; returns the new regime if a
    /// switch was accepted.
    fn fire(
        &mut self,
        t: f64,
        x: &[f64],
        regime: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<usize>> {
        match self {
            SwitchDriver::None => Ok(None),
            SwitchDriver::Markov { q, eps, next } => {
                let j = route_embedded(q, regime, rng);
                let exit = -q.rate(j, j);
                *next = t + exp_time(rng, exit / *eps);
                Ok(Some(j))
            }
            SwitchDriver::Thinned { q, eps, next } => {
                *next = t + exp_time(rng, q.bound() / *eps);
                let qx = q.probe(x)?;
                let exit = -qx.rate(regime, regime);
                let u: f64 = rng.random();
                if u * q.bound() < exit {
                    Ok(Some(route_embedded(&qx, regime, rng)))
                } else {
                    Ok(None)
                }
            }
        }
    }
}

fn exp_time(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn route_embedded(q: &Generator, i: usize, rng: &mut ChaCha8Rng) -> usize {
    let exit = -q.rate(i, i);
    let u: f64 = rng.random::<f64>() * exit;
    let mut acc = 0.0;
    let mut last = i;
    for j in 0..q.n_states() {
        if j == i || q.rate(i, j) <= 0.0 {
            continue;
        }
        acc += q.rate(i, j);
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// Streaming simulation core. The observer is called at `t = 0`, at every
/// grid time, and at every accepted switching time, with
/// `(t, state, regime, on_grid)`; returning `false` stops the path early.
pub fn simulate_observed<F>(
    model: &HybridModel,
    params: &SimParams,
    x0: &[f64],
    i0: usize,
    mut observe: F,
) -> Result<()>
where
    F: FnMut(f64, &[f64], usize, bool) -> bool,
{
    let mut switch_rng = substream(params.seed, 0, Channel::Switching);
    let mut noise_rng = substream(params.seed, 0, Channel::Diffusion);
    simulate_with_streams(
        model,
        params,
        x0,
        i0,
        &mut switch_rng,
        &mut noise_rng,
        &mut observe,
    )
}

/// Simulation core with externally supplied streams: batches and the
/// experiment drivers pass the substreams of path `p` so that every path
/// is reproducible independently of how the ensemble is partitioned.
pub fn simulate_with_streams<F>(
    model: &HybridModel,
    params: &SimParams,
    x0: &[f64],
    i0: usize,
    switch_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    observe: &mut F,
) -> Result<()>
where
    F: FnMut(f64, &[f64], usize, bool) -> bool,
{
    params.validate()?;
    if x0.len() != model.dim {
        return Err(Error::Dimension(format!(
            "x0 has length {}, model dimension is {}",
            x0.len(),
            model.dim
        )));
    }
    if i0 >= model.n_regimes() {
        return Err(Error::precondition(format!(
            "initial regime {i0} out of range for {} regimes",
            model.n_regimes()
        )));
    }
    if model.positive_domain && x0.iter().any(|&v| v <= 0.0) {
        return Err(Error::precondition(
            "x0 must be strictly positive on a positive-domain model",
        ));
    }
    let log_scheme = params.scheme == Scheme::LogEuler;
    if log_scheme {
        if !model.linear_noise.iter().all(|&b| b) {
            return Err(Error::precondition(
                "log_euler requires every linear-noise flag set",
            ));
        }
        model.validate_linear_noise()?;
    }

    let dim = model.dim;
    let m = model.noise_dim;
    let h = params.step;
    let horizon = params.horizon;
    let delta = params.delta;
    let sqrt_delta = delta.sqrt();

    let n_steps = (horizon / h - 1e-9).ceil().max(1.0) as usize;
    let grid_time = |k: usize| if k >= n_steps { horizon } else { k as f64 * h };

    let coeffs = if log_scheme {
        model.noise_coefficients()
    } else {
        Vec::new()
    };
    let coeff_sq: Vec<Vec<f64>> = coeffs
        .iter()
        .map(|rows| {
            (0..dim)
                .map(|k| rows[k * m..(k + 1) * m].iter().map(|v| v * v).sum::<f64>())
                .collect()
        })
        .collect();

    let mut x = x0.to_vec();
    // Log-coordinates carried alongside the state under log_euler.
    let mut y: Vec<f64> = if log_scheme {
        x.iter().map(|v| v.ln()).collect()
    } else {
        Vec::new()
    };
    let mut regime = i0;
    let mut fbuf = vec![0.0; dim];
    let mut sbuf = vec![0.0; dim * m];
    let mut xi = vec![0.0; m];

    let mut driver = SwitchDriver::new(model, params.eps, regime, switch_rng)?;

    if !observe(0.0, &x, regime, true) {
        return Ok(());
    }

    let mut t = 0.0;
    let mut k_grid = 1usize;
    while t < horizon {
        let tg = grid_time(k_grid);
        let ts = driver.next_event();
        let t_end = tg.min(ts).min(horizon);
        let dt = t_end - t;

        if dt > 0.0 {
            let draw_noise = delta > 0.0;
            if draw_noise {
                for z in xi.iter_mut() {
                    *z = noise_rng.sample(StandardNormal);
                }
            }
            let sq_dt = dt.sqrt();
            model.drift(&x, regime, &mut fbuf);
            if log_scheme {
                let v = &coeffs[regime];
                let v2 = &coeff_sq[regime];
                for k in 0..dim {
                    let mut dy = (fbuf[k] / x[k] - 0.5 * delta * v2[k]) * dt;
                    if draw_noise {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += v[k * m + j] * xi[j];
                        }
                        dy += sqrt_delta * sq_dt * dot;
                    }
                    y[k] += dy;
                    x[k] = y[k].exp();
                }
            } else {
                if draw_noise {
                    model.diffusion(&x, regime, &mut sbuf);
                }
                for k in 0..dim {
                    let mut dx = fbuf[k] * dt;
                    if draw_noise {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += sbuf[k * m + j] * xi[j];
                        }
                        dx += sqrt_delta * sq_dt * dot;
                    }
                    x[k] += dx;
                }
            }

            let mut norm_sq = 0.0;
            for &v in &x {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        time: t_end,
                        context: "state update".into(),
                    });
                }
                norm_sq += v * v;
            }
            if norm_sq.sqrt() > params.guard_radius {
                return Err(Error::BlowUp {
                    time: t_end,
                    norm: norm_sq.sqrt(),
                    guard: params.guard_radius,
                });
            }
            if model.positive_domain && x.iter().any(|&v| v <= 0.0) {
                return Err(Error::NonFinite {
                    time: t_end,
                    context: "state left the open positive orthant".into(),
                });
            }
        }
        t = t_end;

        let mut switched = false;
        if t == ts {
            if let Some(j) = driver.fire(t, &x, regime, switch_rng)? {
                regime = j;
                switched = true;
            }
        }
        let on_grid = t == tg;
        if on_grid {
            k_grid += 1;
        }
        if (on_grid || switched) && !observe(t, &x, regime, on_grid) {
            return Ok(());
        }
    }
    Ok(())
}

/// Simulates one path and materializes the full record.
pub fn simulate_path(
    model: &HybridModel,
    params: &SimParams,
    x0: &[f64],
    i0: usize,
) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut regimes = Vec::new();
    let mut on_grid = Vec::new();
    simulate_observed(model, params, x0, i0, |t, x, i, grid| {
        times.push(t);
        states.extend_from_slice(x);
        regimes.push(i as u32);
        on_grid.push(grid);
        true
    })?;
    Ok(Trajectory {
        dim: model.dim(),
        times,
        states,
        regimes,
        on_grid,
        params: params.clone(),
    })
}

/// Integrates the pure-switching ODE (the `delta = 0` reduction); noise
/// never enters the update.
pub fn simulate_switching_ode(
    model: &HybridModel,
    params: &SimParams,
    x0: &[f64],
    i0: usize,
) -> Result<Trajectory> {
    let mut p = params.clone();
    p.delta = 0.0;
    simulate_path(model, &p, x0, i0)
}

/// Options for batch simulation.
#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// Keep every `record_stride`-th grid record in the summary.
    pub record_stride: usize,
    /// Materialize the first `retain_paths` trajectories.
    pub retain_paths: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            record_stride: 1,
            retain_paths: 0,
        }
    }
}

/// Ensemble summary over a batch of paths: per-time mean and mean squared
/// norm on the (possibly thinned) grid.
#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub dim: usize,
    pub n_paths: usize,
    pub times: Vec<f64>,
    /// Flat row-major per-time ensemble means, `dim` entries per time.
    pub mean: Vec<f64>,
    /// Per-time ensemble mean of `|x|^2`.
    pub second_moment: Vec<f64>,
    pub params: SimParams,
    #[serde(skip)]
    pub retained: Vec<Trajectory>,
}

impl BatchSummary {
    pub fn mean_at(&self, k: usize) -> &[f64] {
        &self.mean[k * self.dim..(k + 1) * self.dim]
    }
}

struct ChunkAccum {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    retained: Vec<Trajectory>,
}

/// Simulates `n_paths` independent paths. Path `p` uses substreams indexed
/// by `p`, so the first half of a doubled batch reproduces the smaller
/// batch exactly; the reduction is chunked in fixed path order, so the
/// summary is bitwise deterministic for a given `(seed, n_paths)`
/// regardless of thread count.
pub fn simulate_batch(
    model: &HybridModel,
    params: &SimParams,
    x0: &[f64],
    i0: usize,
    n_paths: usize,
    opts: &BatchOptions,
) -> Result<BatchSummary> {
    if n_paths == 0 {
        return Err(Error::precondition("n_paths must be at least 1"));
    }
    if opts.record_stride == 0 {
        return Err(Error::precondition("record_stride must be at least 1"));
    }
    params.validate()?;

    let n_steps = (params.horizon / params.step - 1e-9).ceil().max(1.0) as usize;
    let rec_times: Vec<f64> = (0..=n_steps)
        .filter(|&k| k % opts.record_stride == 0 || k == n_steps)
        .map(|k| {
            if k >= n_steps {
                params.horizon
            } else {
                k as f64 * params.step
            }
        })
        .collect();
    let n_rec = rec_times.len();
    let dim = model.dim();

    let chunk_size = 64usize;
    let n_chunks = n_paths.div_ceil(chunk_size);

    let chunks: Vec<Result<ChunkAccum>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk_size;
            let hi = ((c + 1) * chunk_size).min(n_paths);
            let mut acc = ChunkAccum {
                sum: vec![0.0; n_rec * dim],
                sum_sq: vec![0.0; n_rec],
                retained: Vec::new(),
            };
            for p in lo..hi {
                let mut switch_rng = substream(params.seed, p as u64, Channel::Switching);
                let mut noise_rng = substream(params.seed, p as u64, Channel::Diffusion);
                let mut grid_seen = 0usize;
                let mut rec_idx = 0usize;
                let retain = p < opts.retain_paths;
                let mut traj_times = Vec::new();
                let mut traj_states = Vec::new();
                let mut traj_regimes = Vec::new();
                let mut traj_grid = Vec::new();
                let res = simulate_with_streams(
                    model,
                    params,
                    x0,
                    i0,
                    &mut switch_rng,
                    &mut noise_rng,
                    &mut |t, x: &[f64], i, on_grid| {
                        if retain {
                            traj_times.push(t);
                            traj_states.extend_from_slice(x);
                            traj_regimes.push(i as u32);
                            traj_grid.push(on_grid);
                        }
                        if on_grid {
                            let k = grid_seen;
                            grid_seen += 1;
                            if k % opts.record_stride == 0 || k == n_steps {
                                let base = rec_idx * dim;
                                let mut nsq = 0.0;
                                for (d, &v) in x.iter().enumerate() {
                                    acc.sum[base + d] += v;
                                    nsq += v * v;
                                }
                                acc.sum_sq[rec_idx] += nsq;
                                rec_idx += 1;
                            }
                        }
                        true
                    },
                );
                res.map_err(|e| e.in_path(p))?;
                if retain {
                    acc.retained.push(Trajectory {
                        dim,
                        times: traj_times,
                        states: traj_states,
                        regimes: traj_regimes,
                        on_grid: traj_grid,
                        params: params.clone(),
                    });
                }
            }
            Ok(acc)
        })
        .collect();

    let mut sum = vec![0.0; n_rec * dim];
    let mut sum_sq = vec![0.0; n_rec];
    let mut retained = Vec::new();
    for chunk in chunks {
        let c = chunk?;
        for (a, b) in sum.iter_mut().zip(&c.sum) {
            *a += b;
        }
        for (a, b) in sum_sq.iter_mut().zip(&c.sum_sq) {
            *a += b;
        }
        retained.extend(c.retained);
    }
    let n = n_paths as f64;
    for v in sum.iter_mut() {
        *v /= n;
    }
    for v in sum_sq.iter_mut() {
        *v /= n;
    }
    Ok(BatchSummary {
        dim,
        n_paths,
        times: rec_times,
        mean: sum,
        second_moment: sum_sq,
        params: params.clone(),
        retained,
    })
}

/// Pointwise and running-average second-moment curves of a batch:
/// `mean |Z(t)|^2` on the recorded grid and `(1/t) int_0^t mean|Z(s)|^2 ds`
/// by the trapezoid rule.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCourse {
    pub times: Vec<f64>,
    pub pointwise: Vec<f64>,
    pub running_average: Vec<f64>,
}

pub fn empirical_second_moment_course(batch: &BatchSummary) -> MomentCourse {
    let times = batch.times.clone();
    let pointwise = batch.second_moment.clone();
    let mut running = vec![0.0; times.len()];
    if !times.is_empty() {
        running[0] = pointwise[0];
        let mut integral = 0.0;
        for k in 1..times.len() {
            let dt = times[k] - times[k - 1];
            integral += 0.5 * (pointwise[k] + pointwise[k - 1]) * dt;
            running[k] = integral / times[k];
        }
    }
    MomentCourse {
        times,
        pointwise,
        running_average: running,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::Generator;

    fn single_regime_model(
        drift: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        sigma: f64,
    ) -> HybridModel {
        let q = Generator::new(vec![vec![0.0]]).unwrap();
        HybridModel::new(
            1,
            1,
            Box::new(move |x, _i, out| out[0] = drift(x)),
            Box::new(move |_x, _i, out| out[0] = sigma),
            Switching::Constant(q),
        )
    }

    fn ou_model() -> HybridModel {
        single_regime_model(|x| -x[0], 1.0)
    }

    #[test]
    fn deterministic_single_regime_matches_exponential_decay() {
        let model = single_regime_model(|x| -x[0], 0.0);
        let p = SimParams::new(1.0, 0.0, 1e-3, 1.0, 1);
        let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
        let xf = traj.final_state()[0];
        let exact = (-1.0f64).exp();
        assert!(
            (xf - exact).abs() < 2e-3,
            "Euler endpoint {xf} vs e^-1 = {exact}"
        );
    }

    #[test]
    fn determinism_same_inputs_same_path() {
        let model = ou_model();
        let p = SimParams::new(1.0, 1.0, 1e-2, 1.0, 99);
        let a = simulate_path(&model, &p, &[1.0], 0).unwrap();
        let b = simulate_path(&model, &p, &[1.0], 0).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.times, b.times);
    }

    #[test]
    fn delta_zero_matches_switching_ode_bitwise() {
        // Two-regime linear model; delta = 0 must coincide bit-for-bit
        // with the switching-ODE integrator on the same skeleton.
        let mk = || {
            let q = Generator::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
            HybridModel::new(
                1,
                1,
                Box::new(|x: &[f64], i: usize, out: &mut [f64]| {
                    out[0] = if i == 0 { -x[0] } else { -2.0 * x[0] }
                }),
                Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 1.0),
                Switching::Constant(q),
            )
        };
        let p = SimParams::new(0.1, 0.0, 1e-3, 2.0, 7);
        let a = simulate_path(&mk(), &p, &[1.0], 0).unwrap();
        let b = simulate_switching_ode(&mk(), &p, &[1.0], 0).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.states, b.states);
        assert_eq!(a.regimes, b.regimes);
        assert!(a.regimes.iter().any(|&r| r == 1), "path never switched");
    }

    #[test]
    fn ou_moments_match_closed_form() {
        // OU: dx = -x dt + dW (delta = 1). At t = 1 the mean is x0/e and
        // the variance is (1 - e^-2)/2.
        let model = ou_model();
        let p = SimParams::new(1.0, 1.0, 1e-2, 1.0, 4242);
        let n = 100_000usize;
        let opts = BatchOptions {
            record_stride: 100,
            retain_paths: 0,
        };
        let batch = simulate_batch(&model, &p, &[1.0], 0, n, &opts).unwrap();
        let kf = batch.times.len() - 1;
        let mean = batch.mean_at(kf)[0];
        let second = batch.second_moment[kf];
        let var = second - mean * mean;

        let exact_mean = (-1.0f64).exp();
        let exact_var = (1.0 - (-2.0f64).exp()) / 2.0;
        let se_mean = (exact_var / n as f64).sqrt();
        // Sample-variance standard error for a Gaussian: var * sqrt(2/(n-1)).
        let se_var = exact_var * (2.0 / (n as f64 - 1.0)).sqrt();
        // The h = 1e-2 discretization bias enters both comparisons; allow
        // one extra O(h) margin on top of the Monte Carlo band.
        assert!(
            (mean - exact_mean).abs() < 3.0 * se_mean + 5e-3,
            "mean {mean} vs {exact_mean} (se {se_mean})"
        );
        assert!(
            (var - exact_var).abs() < 3.0 * se_var + 5e-3,
            "var {var} vs {exact_var} (se {se_var})"
        );
    }

    #[test]
    fn batch_prefix_is_stable_under_growth() {
        let model = ou_model();
        let p = SimParams::new(1.0, 1.0, 1e-2, 0.5, 11);
        let opts = BatchOptions {
            record_stride: 10,
            retain_paths: 4,
        };
        let small = simulate_batch(&model, &p, &[1.0], 0, 4, &opts).unwrap();
        let large = simulate_batch(&model, &p, &[1.0], 0, 16, &opts).unwrap();
        for k in 0..4 {
            assert_eq!(small.retained[k].states, large.retained[k].states);
        }
    }

    #[test]
    fn single_path_batch_matches_trajectory() {
        let model = ou_model();
        let p = SimParams::new(1.0, 1.0, 1e-2, 0.5, 3);
        let opts = BatchOptions::default();
        let batch = simulate_batch(&model, &p, &[1.0], 0, 1, &opts).unwrap();
        let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
        let grid_states: Vec<f64> = (0..traj.len())
            .filter(|&k| traj.on_grid[k])
            .map(|k| traj.state(k)[0])
            .collect();
        assert_eq!(batch.mean, grid_states);
    }

    #[test]
    fn regime_freeze_matches_fixed_regime_reference() {
        // Pick a seed whose skeleton has no jumps on [0, 1]; the hybrid
        // path must then equal a fixed-regime EM integrator fed the same
        // Brownian increments.
        let q = Generator::new(vec![vec![-0.01, 0.01], vec![0.01, -0.01]]).unwrap();
        let model = HybridModel::new(
            1,
            1,
            Box::new(|x: &[f64], i: usize, out: &mut [f64]| {
                out[0] = if i == 0 { -x[0] } else { -3.0 * x[0] }
            }),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 1.0),
            Switching::Constant(q),
        );
        let h = 1e-2;
        let p = SimParams::new(1.0, 1.0, h, 1.0, 17);
        let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
        assert!(
            traj.regimes.iter().all(|&r| r == 0),
            "seed 17 produced a jump; pick another seed"
        );

        let mut rng = substream(17, 0, Channel::Diffusion);
        let mut x = 1.0f64;
        let n = (1.0 / h).round() as usize;
        let mut reference = vec![x];
        // Mirror the simulator's grid arithmetic (t_k = k * h computed
        // fresh) so the comparison is bitwise.
        let mut t_prev = 0.0;
        for k in 1..=n {
            let tk = if k >= n { 1.0 } else { k as f64 * h };
            let dt = tk - t_prev;
            let xi: f64 = rng.sample(StandardNormal);
            x += -x * dt + dt.sqrt() * xi;
            reference.push(x);
            t_prev = tk;
        }
        let grid_states: Vec<f64> = (0..traj.len())
            .filter(|&k| traj.on_grid[k])
            .map(|k| traj.state(k)[0])
            .collect();
        assert_eq!(grid_states, reference);
    }

    #[test]
    fn em_strong_order_one_for_additive_noise() {
        // Coupled comparison against the exact OU transition driven by the
        // same coarse increments: X(t+h) = X e^-h + a_h dW + b_h zeta,
        // with the conditional residual zeta drawn from a side stream.
        // Halving h should roughly halve the pathwise error.
        let model = ou_model();
        let t_end = 1.0;
        let n_paths = 400;
        let mut errs = Vec::new();
        for &h in &[1.0f64 / 64.0, 1.0 / 128.0] {
            let a_h = (1.0 - (-h).exp()) / h;
            let var_i = (1.0 - (-2.0 * h).exp()) / 2.0;
            let b_h = (var_i - a_h * a_h * h).max(0.0).sqrt();
            let n = (t_end / h).round() as usize;
            let mut total = 0.0;
            for path in 0..n_paths {
                let p = SimParams::new(1.0, 1.0, h, t_end, 500 + path);
                let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
                let mut rng = substream(500 + path, 0, Channel::Diffusion);
                let mut side = substream(900_000 + path, 0, Channel::Diffusion);
                let mut exact = 1.0f64;
                for _ in 0..n {
                    let xi: f64 = rng.sample(StandardNormal);
                    let zeta: f64 = side.sample(StandardNormal);
                    let dw = h.sqrt() * xi;
                    exact = exact * (-h).exp() + a_h * dw + b_h * zeta;
                }
                total += (traj.final_state()[0] - exact).abs();
            }
            errs.push(total / n_paths as f64);
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (1.5..=3.0).contains(&ratio),
            "strong-order ratio {ratio} outside [1.5, 3] (errors {errs:?})"
        );
    }

    #[test]
    fn log_euler_requires_flags_and_stays_positive() {
        // Geometric Brownian motion per regime: linear noise rows.
        let q = Generator::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let model = HybridModel::new(
            1,
            1,
            Box::new(|x: &[f64], i: usize, out: &mut [f64]| {
                out[0] = if i == 0 { 0.5 * x[0] } else { -0.5 * x[0] }
            }),
            Box::new(|x: &[f64], i: usize, out: &mut [f64]| {
                out[0] = if i == 0 { x[0] } else { 2.0 * x[0] }
            }),
            Switching::Constant(q),
        )
        .with_linear_noise(vec![true])
        .with_positive_domain();

        let p = SimParams::new(0.05, 1.0, 1e-3, 5.0, 23).with_scheme(Scheme::LogEuler);
        let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
        assert!(traj.states.iter().all(|&v| v > 0.0));

        let bad = SimParams::new(0.05, 1.0, 1e-3, 5.0, 23).with_scheme(Scheme::LogEuler);
        let unflagged = HybridModel::new(
            1,
            1,
            Box::new(|x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.5 * x[0]),
            Box::new(|x: &[f64], _i: usize, out: &mut [f64]| out[0] = x[0]),
            Switching::Constant(Generator::new(vec![vec![0.0]]).unwrap()),
        );
        assert!(simulate_path(&unflagged, &bad, &[1.0], 0).is_err());
    }

    #[test]
    fn blow_up_guard_reports_time() {
        let model = single_regime_model(|x| x[0] * x[0], 0.0); // finite-time blow-up
        let mut p = SimParams::new(1.0, 0.0, 1e-3, 10.0, 1);
        p.guard_radius = 1e3;
        let err = simulate_path(&model, &p, &[1.0], 0).unwrap_err();
        match err {
            Error::BlowUp { time, .. } => assert!(time > 0.0 && time < 10.0),
            other => panic!("expected BlowUp, got {other:?}"),
        }
    }

    #[test]
    fn moment_course_constant_path() {
        let model = single_regime_model(|_| 0.0, 0.0);
        let p = SimParams::new(1.0, 0.0, 0.1, 1.0, 5);
        let batch = simulate_batch(&model, &p, &[2.0], 0, 3, &BatchOptions::default()).unwrap();
        let course = empirical_second_moment_course(&batch);
        for &v in &course.pointwise {
            assert!((v - 4.0).abs() < 1e-12);
        }
        for &v in &course.running_average {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn switch_times_recorded_and_marked() {
        let q = Generator::new(vec![vec![-5.0, 5.0], vec![5.0, -5.0]]).unwrap();
        let model = HybridModel::new(
            1,
            1,
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Switching::Constant(q),
        );
        let p = SimParams::new(1.0, 0.0, 0.25, 2.0, 21);
        let traj = simulate_path(&model, &p, &[0.0], 0).unwrap();
        // Every regime change in the record happens at a switching record,
        // and times strictly increase.
        for k in 1..traj.len() {
            assert!(traj.times[k] > traj.times[k - 1]);
            if traj.regimes[k] != traj.regimes[k - 1] {
                assert!(
                    !traj.on_grid[k],
                    "regime change recorded on a bare grid point"
                );
            }
        }
        assert!(traj.regimes.iter().any(|&r| r == 1));
    }

    #[test]
    fn state_dependent_thinning_switches() {
        let sdg = StateDependentGenerator::new(
            2,
            4.0,
            Box::new(|x: &[f64]| {
                let r = if x[0] > 0.0 { 2.0 } else { 1.0 };
                vec![vec![-r, r], vec![1.0, -1.0]]
            }),
        )
        .unwrap();
        let model = HybridModel::new(
            1,
            1,
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Switching::StateDependent(sdg),
        );
        let p = SimParams::new(0.05, 0.0, 0.01, 5.0, 31);
        let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
        assert!(traj.regimes.iter().any(|&r| r == 1));
        assert!(traj.regimes.iter().any(|&r| r == 0));
    }

    #[test]
    fn csv_export_shape() {
        let model = ou_model();
        let p = SimParams::new(1.0, 1.0, 0.25, 1.0, 2);
        let traj = simulate_path(&model, &p, &[1.0], 0).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,regime");
        assert_eq!(lines.count(), traj.len());
    }
}
