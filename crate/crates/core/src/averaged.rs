//! The averaged ODE `dx = fbar(x) dt` with `fbar(x) = sum_i f(x,i) nu_i`:
//! construction of the averaged vector field, equilibrium search and
//! classification, limit-cycle detection via a Poincare return map, and
//! the occupation measure carried by the cycle.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{HybridModel, Switching, DEFAULT_GUARD_RADIUS};
use crate::measures::DiscreteMeasure;

/// A time-independent vector field on `R^d`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Vector field defined by a closure; used for analytic test fields and
/// hand-built systems.
pub struct FnField<F: Fn(&[f64], &mut [f64]) + Send + Sync> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Send + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// The stationary-average of the regime drifts. For a constant generator
/// the weights are fixed; for a state-dependent generator the stationary
/// distribution of `Q(x)` is recomputed at every probe point.
pub struct AveragedField<'a> {
    model: &'a HybridModel,
    nu: Vec<f64>,
}

impl<'a> AveragedField<'a> {
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// Regime weights in force at `x` (constant except for state-dependent
    /// switching).
    pub fn weights_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.model.switching {
            Switching::Constant(_) => Ok(self.nu.clone()),
            Switching::StateDependent(q) => q.probe(x)?.stationary_distribution(),
        }
    }
}

impl<'a> VectorField for AveragedField<'a> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let dim = self.model.dim();
        let weights = match &self.model.switching {
            Switching::Constant(_) => None,
            Switching::StateDependent(q) => Some(
                q.probe(x)
                    .and_then(|g| g.stationary_distribution())
                    .unwrap_or_else(|_| self.nu.clone()),
            ),
        };
        let nu = weights.as_deref().unwrap_or(&self.nu);
        let mut buf = vec![0.0; dim];
        out.fill(0.0);
        for (i, &w) in nu.iter().enumerate() {
            self.model.drift(x, i, &mut buf);
            for k in 0..dim {
                out[k] += w * buf[k];
            }
        }
    }
}

/// Builds the averaged field with explicit regime weights.
pub fn average_field<'a>(model: &'a HybridModel, nu: &[f64]) -> Result<AveragedField<'a>> {
    if nu.len() != model.n_regimes() {
        return Err(Error::Dimension(format!(
            "nu has length {}, model has {} regimes",
            nu.len(),
            model.n_regimes()
        )));
    }
    let total: f64 = nu.iter().sum();
    if (total - 1.0).abs() > 1e-9 || nu.iter().any(|&w| w < 0.0) {
        return Err(Error::validation(format!(
            "nu must be a probability vector (sum = {total})"
        )));
    }
    Ok(AveragedField {
        model,
        nu: nu.to_vec(),
    })
}

/// Builds the averaged field with the stationary distribution computed
/// from the model's own generator.
pub fn average_field_auto(model: &HybridModel) -> Result<AveragedField<'_>> {
    let nu = match &model.switching {
        Switching::Constant(q) => q.stationary_distribution()?,
        // Placeholder weights; state-dependent evaluation recomputes per probe.
        Switching::StateDependent(q) => vec![1.0 / q.n_states() as f64; q.n_states()],
    };
    Ok(AveragedField {
        model,
        nu,
    })
}

/// Deterministic trajectory of the averaged flow on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct OdeTrajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flat row-major states.
    pub states: Vec<f64>,
}

impl OdeTrajectory {
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

    /// Linear interpolation between grid records.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        if t <= self.times[0] {
            return self.state(0).to_vec();
        }
        let n = self.len();
        if t >= self.times[n - 1] {
            return self.final_state().to_vec();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let s = (t - t0) / (t1 - t0);
        self.state(k)
            .iter()
            .zip(self.state(k + 1))
            .map(|(a, b)| a + s * (b - a))
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t")?;
        for k in 0..self.dim {
            write!(w, ",x_{}", k + 1)?;
        }
        writeln!(w)?;
        for k in 0..self.len() {
            write!(w, "{}", self.times[k])?;
            for v in self.state(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn rk4_step(field: &dyn VectorField, x: &mut [f64], h: f64, scratch: &mut Rk4Scratch) {
    let d = x.len();
    field.eval(x, &mut scratch.k1);
    for k in 0..d {
        scratch.tmp[k] = x[k] + 0.5 * h * scratch.k1[k];
    }
    field.eval(&scratch.tmp, &mut scratch.k2);
    for k in 0..d {
        scratch.tmp[k] = x[k] + 0.5 * h * scratch.k2[k];
    }
    field.eval(&scratch.tmp, &mut scratch.k3);
    for k in 0..d {
        scratch.tmp[k] = x[k] + h * scratch.k3[k];
    }
    field.eval(&scratch.tmp, &mut scratch.k4);
    for k in 0..d {
        x[k] +=
            h / 6.0 * (scratch.k1[k] + 2.0 * scratch.k2[k] + 2.0 * scratch.k3[k] + scratch.k4[k]);
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(dim: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

fn check_state(x: &[f64], t: f64, guard: f64) -> Result<()> {
    let mut norm_sq = 0.0;
    for &v in x {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                time: t,
                context: "averaged flow".into(),
            });
        }
        norm_sq += v * v;
    }
    if norm_sq.sqrt() > guard {
        return Err(Error::BlowUp {
            time: t,
            norm: norm_sq.sqrt(),
            guard,
        });
    }
    Ok(())
}

/// Classical RK4 with fixed step; the final substep is shortened to land
/// on `t_end` exactly. The observer sees every grid point including the
/// initial one; returning `false` stops the integration.
pub fn integrate_observed<F>(
    field: &dyn VectorField,
    x0: &[f64],
    t_end: f64,
    h: f64,
    mut observe: F,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> bool,
{
    if h <= 0.0 {
        return Err(Error::precondition(format!("step {h} must be positive")));
    }
    if t_end < 0.0 {
        return Err(Error::precondition(format!(
            "integration time {t_end} must be nonnegative"
        )));
    }
    let mut x = x0.to_vec();
    let mut scratch = Rk4Scratch::new(x.len());
    if !observe(0.0, &x) {
        return Ok(x);
    }
    if t_end == 0.0 {
        return Ok(x);
    }
    let n_steps = (t_end / h - 1e-9).ceil().max(1.0) as usize;
    let mut t = 0.0;
    for k in 1..=n_steps {
        let tk = if k >= n_steps { t_end } else { k as f64 * h };
        rk4_step(field, &mut x, tk - t, &mut scratch);
        t = tk;
        check_state(&x, t, DEFAULT_GUARD_RADIUS)?;
        if !observe(t, &x) {
            break;
        }
    }
    Ok(x)
}

/// Integrates the field and materializes the grid trajectory.
pub fn integrate_ode(
    field: &dyn VectorField,
    x0: &[f64],
    t_end: f64,
    h: f64,
) -> Result<OdeTrajectory> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    integrate_observed(field, x0, t_end, h, |t, x| {
        times.push(t);
        states.extend_from_slice(x);
        true
    })?;
    Ok(OdeTrajectory {
        dim: field.dim(),
        times,
        states,
    })
}

/// Endpoint of the flow map `x0 -> X(t)`.
pub fn flow_map(field: &dyn VectorField, x0: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    integrate_observed(field, x0, t, h, |_, _| true)
}

/// Jacobian by central finite differences with step `1e-6 (1 + |x|)`.
pub fn jacobian(field: &dyn VectorField, x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let step = 1e-6 * (1.0 + norm);
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for j in 0..d {
        xp[j] = x[j] + step;
        xm[j] = x[j] - step;
        field.eval(&xp, &mut fp);
        field.eval(&xm, &mut fm);
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    jac
}

/// Threshold below which a real part counts as zero (nonhyperbolic).
pub const HYPERBOLICITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Source,
    Sink,
    Saddle,
    Nonhyperbolic,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

/// An equilibrium of the averaged field with its linearization data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Equilibrium {
    pub location: Vec<f64>,
    pub eigenvalues: Vec<Eigenvalue>,
    pub classification: Classification,
    /// Unit normal of the stable manifold (planar saddles only).
    pub stable_normal: Option<Vec<f64>>,
    /// Unit tangent of the stable manifold (planar saddles only).
    pub stable_direction: Option<Vec<f64>>,
    /// Residual `|fbar(x*)|` at the reported location.
    pub residual: f64,
}

fn classify(eigs: &[Complex64]) -> Classification {
    if eigs.iter().any(|e| e.re.abs() <= HYPERBOLICITY_TOL) {
        return Classification::Nonhyperbolic;
    }
    let pos = eigs.iter().filter(|e| e.re > 0.0).count();
    if pos == eigs.len() {
        Classification::Source
    } else if pos == 0 {
        Classification::Sink
    } else {
        Classification::Saddle
    }
}

/// Stable eigendirection and its normal for a planar saddle. The 2x2
/// saddle has real eigenvalues of opposite signs, so the stable
/// eigenvector is real; the normal is its 90-degree rotation.
fn planar_stable_data(jac: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b, c, d) = (jac[(0, 0)], jac[(0, 1)], jac[(1, 0)], jac[(1, 1)]);
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr - 4.0 * det;
    if disc <= 0.0 {
        return Err(Error::Numeric(
            "saddle with non-real eigenvalues is impossible in the plane".into(),
        ));
    }
    let sq = disc.sqrt();
    let lam = [(tr + sq) / 2.0, (tr - sq) / 2.0];
    let stable = lam
        .iter()
        .copied()
        .find(|l| *l < 0.0)
        .ok_or_else(|| Error::Numeric("no stable eigenvalue at a saddle".into()))?;
    // Eigenvector from the better-conditioned row of (J - lambda I).
    let r1 = (a - stable, b);
    let r2 = (c, d - stable);
    let v = if r1.0.hypot(r1.1) >= r2.0.hypot(r2.1) {
        [-r1.1, r1.0]
    } else {
        [-r2.1, r2.0]
    };
    let norm = v[0].hypot(v[1]);
    if norm == 0.0 {
        return Err(Error::Numeric("degenerate stable eigenvector".into()));
    }
    let vs = vec![v[0] / norm, v[1] / norm];
    let beta = vec![-vs[1], vs[0]];
    Ok((vs, beta))
}

/// Unit normal of the stable manifold at a planar saddle: the vector
/// orthogonal to the eigenvector of the negative eigenvalue.
pub fn stable_manifold_normal(field: &dyn VectorField, eq: &Equilibrium) -> Result<Vec<f64>> {
    if eq.classification != Classification::Saddle {
        return Err(Error::precondition(format!(
            "stable-manifold normal requested for a {:?}",
            eq.classification
        )));
    }
    if eq.location.len() != 2 {
        return Err(Error::precondition(
            "stable-manifold normal is implemented for planar saddles",
        ));
    }
    let jac = jacobian(field, &eq.location);
    let (vs, beta) = planar_stable_data(&jac)?;
    debug_assert!((beta[0] * vs[0] + beta[1] * vs[1]).abs() <= 1e-8);
    Ok(beta)
}

/// Newton search for equilibria seeded on an `n`-per-axis grid over the
/// box `[lo, hi]`. Converged roots are deduplicated at distance 1e-6 and
/// classified through their Jacobian eigenvalues. Seeds that diverge are
/// skipped silently; an empty result is possible.
pub fn find_equilibria(
    field: &dyn VectorField,
    lo: &[f64],
    hi: &[f64],
    n_per_axis: usize,
    tol: f64,
) -> Result<Vec<Equilibrium>> {
    let d = field.dim();
    if lo.len() != d || hi.len() != d {
        return Err(Error::Dimension("search box must match field dimension".into()));
    }
    if n_per_axis < 2 {
        return Err(Error::precondition("grid needs at least 2 nodes per axis"));
    }
    for k in 0..d {
        if !(hi[k] >= lo[k]) {
            return Err(Error::validation(format!(
                "empty search box on axis {k}: [{}, {}]",
                lo[k], hi[k]
            )));
        }
    }

    let mut roots: Vec<Vec<f64>> = Vec::new();
    let mut seed_idx = vec![0usize; d];
    let mut fbuf = vec![0.0; d];
    'seeds: loop {
        let seed: Vec<f64> = (0..d)
            .map(|k| {
                lo[k] + (hi[k] - lo[k]) * seed_idx[k] as f64 / (n_per_axis - 1) as f64
            })
            .collect();
        if let Some(root) = newton(field, &seed, tol, &mut fbuf) {
            let fresh = roots
                .iter()
                .all(|r| dist(r, &root) > 1e-6);
            if fresh {
                roots.push(root);
            }
        }
        // Advance the mixed-radix seed counter.
        for k in 0..d {
            seed_idx[k] += 1;
            if seed_idx[k] < n_per_axis {
                continue 'seeds;
            }
            seed_idx[k] = 0;
        }
        break;
    }

    let mut out = Vec::with_capacity(roots.len());
    for root in roots {
        field.eval(&root, &mut fbuf);
        let residual = fbuf.iter().map(|v| v * v).sum::<f64>().sqrt();
        let jac = jacobian(field, &root);
        let eigs: Vec<Complex64> = jac.complex_eigenvalues().iter().copied().collect();
        let classification = classify(&eigs);
        let (stable_direction, stable_normal) =
            if classification == Classification::Saddle && d == 2 {
                match planar_stable_data(&jac) {
                    Ok((vs, beta)) => (Some(vs), Some(beta)),
                    Err(_) => (None, None),
                }
            } else {
                (None, None)
            };
        out.push(Equilibrium {
            location: root,
            eigenvalues: eigs
                .iter()
                .map(|e| Eigenvalue { re: e.re, im: e.im })
                .collect(),
            classification,
            stable_normal,
            stable_direction,
            residual,
        });
    }
    // Deterministic report order.
    out.sort_by(|a, b| {
        a.location
            .iter()
            .zip(&b.location)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != std::cmp::Ordering::Equal)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn newton(field: &dyn VectorField, seed: &[f64], tol: f64, fbuf: &mut [f64]) -> Option<Vec<f64>> {
    let d = seed.len();
    let mut x = seed.to_vec();
    for _ in 0..60 {
        field.eval(&x, fbuf);
        if fbuf.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let res = fbuf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res <= tol {
            return Some(x);
        }
        let jac = jacobian(field, &x);
        if jac.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let rhs = nalgebra::DVector::from_iterator(d, fbuf.iter().map(|v| -v));
        let step = jac.lu().solve(&rhs)?;
        let mut step_norm = 0.0;
        for k in 0..d {
            x[k] += step[k];
            step_norm += step[k] * step[k];
        }
        if !x.iter().all(|v| v.is_finite()) || x.iter().map(|v| v * v).sum::<f64>() > 1e16 {
            return None;
        }
        if step_norm.sqrt() < 1e-14 {
            field.eval(&x, fbuf);
            let res = fbuf.iter().map(|v| v * v).sum::<f64>().sqrt();
            return (res <= tol).then_some(x);
        }
    }
    None
}

/// Poincare section: the hyperplane through `anchor` with the given
/// normal; crossings are counted in the direction of positive `normal`
/// component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Section {
    pub anchor: Vec<f64>,
    pub normal: Vec<f64>,
}

/// A detected periodic orbit of the averaged flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitCycle {
    pub dim: usize,
    /// Period of the orbit.
    pub period: f64,
    /// Orbit samples at uniform time spacing `period / n_samples`,
    /// flat row-major.
    pub samples: Vec<f64>,
    pub section: Section,
}

impl LimitCycle {
    pub fn n_samples(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.samples[k * self.dim..(k + 1) * self.dim]
    }

    /// First stored sample (lies on the section).
    pub fn base_point(&self) -> &[f64] {
        self.sample(0)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t")?;
        for k in 0..self.dim {
            write!(w, ",x_{}", k + 1)?;
        }
        writeln!(w)?;
        let dt = self.period / self.n_samples() as f64;
        for k in 0..self.n_samples() {
            write!(w, "{}", k as f64 * dt)?;
            for v in self.sample(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Tuning knobs for cycle detection.
#[derive(Debug, Clone)]
pub struct CycleOptions {
    /// RK4 step.
    pub step: f64,
    /// Two consecutive section crossings closer than this declare closure.
    pub closure_tol: f64,
    /// Crossing budget before giving up.
    pub max_crossings: usize,
    /// Longest wait for the next crossing before giving up.
    pub max_wait: f64,
    /// Number of uniformly spaced orbit samples stored.
    pub n_samples: usize,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions {
            step: 1e-3,
            closure_tol: 1e-8,
            max_crossings: 200,
            max_wait: 500.0,
            n_samples: 1024,
        }
    }
}

/// Detects a limit cycle by following the flow from `seed` (after a burn-in
/// of `burn` time units) and iterating the Poincare return map of `section`
/// (auto-built orthogonal to the flow at the post-burn point when absent)
/// until two consecutive crossings coincide to `closure_tol`.
pub fn detect_limit_cycle(
    field: &dyn VectorField,
    seed: &[f64],
    burn: f64,
    section: Option<Section>,
    equilibria: &[Equilibrium],
    opts: &CycleOptions,
) -> Result<LimitCycle> {
    let d = field.dim();
    if seed.len() != d {
        return Err(Error::Dimension("seed point dimension".into()));
    }
    for eq in equilibria {
        if dist(seed, &eq.location) < 1e-3 {
            return Err(Error::precondition(format!(
                "cycle seed {seed:?} is within 1e-3 of the equilibrium at {:?}",
                eq.location
            )));
        }
    }

    let start = flow_map(field, seed, burn, opts.step)?;
    let section = match section {
        Some(s) => {
            if s.anchor.len() != d || s.normal.len() != d {
                return Err(Error::Dimension("section dimension".into()));
            }
            let n = s.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::validation("section normal must be nonzero"));
            }
            Section {
                anchor: s.anchor,
                normal: s.normal.iter().map(|v| v / n).collect(),
            }
        }
        None => {
            let mut f = vec![0.0; d];
            field.eval(&start, &mut f);
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::NoCycle(
                    "flow vanishes at the post-burn point; seed converged to an equilibrium"
                        .into(),
                ));
            }
            Section {
                anchor: start.clone(),
                normal: f.iter().map(|v| v / n).collect(),
            }
        }
    };

    let g = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&section.anchor)
            .zip(&section.normal)
            .map(|((xi, ai), ni)| (xi - ai) * ni)
            .sum()
    };

    // Walk the flow, recording same-direction crossings by linear
    // interpolation between RK4 steps.
    let mut scratch = Rk4Scratch::new(d);
    let mut x = start.clone();
    let mut t = 0.0;
    let mut g_prev = g(&x);
    let mut last_crossing: Option<(f64, Vec<f64>)> = None;
    let mut crossing_gaps: Vec<f64> = Vec::new();
    let mut wait_start = 0.0;
    let mut closed: Option<(f64, Vec<f64>)> = None;

    'walk: for _ in 0..((opts.max_wait * (opts.max_crossings as f64) / opts.step) as usize) {
        let mut x_next = x.clone();
        rk4_step(field, &mut x_next, opts.step, &mut scratch);
        let t_next = t + opts.step;
        check_state(&x_next, t_next, DEFAULT_GUARD_RADIUS)?;
        let g_next = g(&x_next);
        if g_prev < 0.0 && g_next >= 0.0 {
            let s = g_prev / (g_prev - g_next);
            let t_c = t + s * opts.step;
            let x_c: Vec<f64> = x
                .iter()
                .zip(&x_next)
                .map(|(a, b)| a + s * (b - a))
                .collect();
            if let Some((t_last, x_last)) = &last_crossing {
                let gap = dist(&x_c, x_last);
                crossing_gaps.push(gap);
                if gap < opts.closure_tol {
                    closed = Some((t_c - t_last, x_c.clone()));
                    break 'walk;
                }
                if crossing_gaps.len() >= opts.max_crossings {
                    return Err(Error::NoCycle(format!(
                        "no closure after {} crossings (last gap {gap:.3e})",
                        opts.max_crossings
                    )));
                }
                // Divergence alarm: gaps growing consistently away from
                // their running minimum signal an unstable or absent cycle.
                let min_gap = crossing_gaps.iter().copied().fold(f64::INFINITY, f64::min);
                if crossing_gaps.len() > 20 && gap > 100.0 * min_gap && gap > 1e-3 {
                    return Err(Error::NoCycle(
                        "crossing sequence diverging; unstable or no cycle".into(),
                    ));
                }
            }
            last_crossing = Some((t_c, x_c));
            wait_start = t_c;
        }
        x = x_next;
        t = t_next;
        g_prev = g_next;
        if t - wait_start > opts.max_wait {
            return Err(Error::NoCycle(format!(
                "no section crossing within {} time units",
                opts.max_wait
            )));
        }
    }

    let (period, base) = closed.ok_or_else(|| {
        Error::NoCycle("integration budget exhausted before closure".into())
    })?;

    // Resample one period at uniform time spacing from the closing point.
    let k_samples = opts.n_samples.max(2);
    let dt = period / k_samples as f64;
    let mut samples = Vec::with_capacity(k_samples * d);
    let mut y = base.clone();
    for _ in 0..k_samples {
        samples.extend_from_slice(&y);
        let n_sub = (dt / opts.step).ceil().max(1.0) as usize;
        let sub = dt / n_sub as f64;
        for _ in 0..n_sub {
            rk4_step(field, &mut y, sub, &mut scratch);
        }
    }
    // Closure sanity on the stored orbit.
    let closure_err = dist(&y, &base);
    if closure_err > 1e-6 {
        return Err(Error::NoCycle(format!(
            "orbit fails to close after one period: gap {closure_err:.3e}"
        )));
    }

    Ok(LimitCycle {
        dim: d,
        period,
        samples,
        section,
    })
}

/// The occupation measure of the cycle: `K` atoms of weight `1/K` at
/// uniform-time samples along one period.
pub fn cycle_occupation_measure(cycle: &LimitCycle, k_atoms: usize) -> Result<DiscreteMeasure> {
    if k_atoms < 8 {
        return Err(Error::precondition("occupation measure needs at least 8 atoms"));
    }
    let stored = cycle.n_samples();
    let d = cycle.dim;
    if k_atoms == stored {
        return DiscreteMeasure::uniform(d, cycle.samples.clone());
    }
    // Resample by linear interpolation in time along the stored orbit.
    let mut points = Vec::with_capacity(k_atoms * d);
    for j in 0..k_atoms {
        let phase = j as f64 / k_atoms as f64 * stored as f64;
        let k0 = (phase as usize) % stored;
        let k1 = (k0 + 1) % stored;
        let s = phase - phase.floor();
        for dd in 0..d {
            points.push(cycle.sample(k0)[dd] * (1.0 - s) + cycle.sample(k1)[dd] * s);
        }
    }
    DiscreteMeasure::uniform(d, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::Generator;
    use crate::measures::sliced_wasserstein;

    fn linear_sink() -> FnField<impl Fn(&[f64], &mut [f64]) + Send + Sync> {
        FnField::new(2, |x: &[f64], out: &mut [f64]| {
            out[0] = -x[0];
            out[1] = -x[1];
        })
    }

    /// Hopf normal form: r' = r(1 - r^2), theta' = 1, in Cartesian form.
    fn hopf() -> FnField<impl Fn(&[f64], &mut [f64]) + Send + Sync> {
        FnField::new(2, |x: &[f64], out: &mut [f64]| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = x[0] * (1.0 - r2) - x[1];
            out[1] = x[1] * (1.0 - r2) + x[0];
        })
    }

    #[test]
    fn zero_field_constant_trajectory() {
        let field = FnField::new(1, |_x: &[f64], out: &mut [f64]| out[0] = 0.0);
        let traj = integrate_ode(&field, &[2.5], 1.0, 0.1).unwrap();
        for k in 0..traj.len() {
            assert_eq!(traj.state(k)[0], 2.5);
        }
    }

    #[test]
    fn rk4_exponential_decay_high_accuracy() {
        let field = FnField::new(1, |x: &[f64], out: &mut [f64]| out[0] = -x[0]);
        let traj = integrate_ode(&field, &[1.0], 1.0, 1e-3).unwrap();
        let exact = (-1.0f64).exp();
        assert!(
            (traj.final_state()[0] - exact).abs() < 1e-9,
            "endpoint {} vs {exact}",
            traj.final_state()[0]
        );
    }

    #[test]
    fn rk4_is_fourth_order() {
        let field = FnField::new(1, |x: &[f64], out: &mut [f64]| out[0] = -x[0]);
        let exact = (-1.0f64).exp();
        let err = |h: f64| {
            (integrate_ode(&field, &[1.0], 1.0, h).unwrap().final_state()[0] - exact).abs()
        };
        let e1 = err(0.1);
        let e2 = err(0.05);
        let e3 = err(0.025);
        for ratio in [e1 / e2, e2 / e3] {
            assert!(
                (8.0..=32.0).contains(&ratio),
                "order-4 ratio {ratio} outside [8, 32] ({e1:.3e} {e2:.3e} {e3:.3e})"
            );
        }
    }

    #[test]
    fn linear_field_single_sink() {
        let field = linear_sink();
        let eqs = find_equilibria(&field, &[-1.0, -1.0], &[1.0, 1.0], 5, 1e-9).unwrap();
        assert_eq!(eqs.len(), 1);
        let eq = &eqs[0];
        assert!(eq.location.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(eq.classification, Classification::Sink);
        assert!(eq.residual <= 1e-9);
    }

    #[test]
    fn classification_is_invariant_under_field_rescaling() {
        let field = hopf();
        let doubled = FnField::new(2, |x: &[f64], out: &mut [f64]| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = 2.0 * (x[0] * (1.0 - r2) - x[1]);
            out[1] = 2.0 * (x[1] * (1.0 - r2) + x[0]);
        });
        let a = find_equilibria(&field, &[-0.5, -0.5], &[0.5, 0.5], 3, 1e-9).unwrap();
        let b = find_equilibria(&doubled, &[-0.5, -0.5], &[0.5, 0.5], 3, 1e-9).unwrap();
        assert_eq!(a.len(), b.len());
        for (ea, eb) in a.iter().zip(&b) {
            assert_eq!(ea.classification, eb.classification);
            assert!(dist(&ea.location, &eb.location) < 1e-8);
        }
    }

    #[test]
    fn saddle_normal_for_diagonal_jacobian() {
        // f = (-x, y): stable eigenvector e1, beta = +-e2.
        let field = FnField::new(2, |x: &[f64], out: &mut [f64]| {
            out[0] = -x[0];
            out[1] = x[1];
        });
        let eqs = find_equilibria(&field, &[-1.0, -1.0], &[1.0, 1.0], 3, 1e-9).unwrap();
        assert_eq!(eqs.len(), 1);
        let eq = &eqs[0];
        assert_eq!(eq.classification, Classification::Saddle);
        let beta = stable_manifold_normal(&field, eq).unwrap();
        assert!(beta[0].abs() < 1e-8, "beta = {beta:?}");
        assert!((beta[1].abs() - 1.0).abs() < 1e-8);
        let vs = eq.stable_direction.as_ref().unwrap();
        assert!((vs[0].abs() - 1.0).abs() < 1e-8, "vs = {vs:?}");
    }

    #[test]
    fn stable_normal_rejects_non_saddle() {
        let field = linear_sink();
        let eqs = find_equilibria(&field, &[-1.0, -1.0], &[1.0, 1.0], 3, 1e-9).unwrap();
        assert!(stable_manifold_normal(&field, &eqs[0]).is_err());
    }

    #[test]
    fn hopf_cycle_period_and_radius() {
        let field = hopf();
        let cycle =
            detect_limit_cycle(&field, &[0.5, 0.0], 20.0, None, &[], &CycleOptions::default())
                .unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        assert!(
            (cycle.period - two_pi).abs() < 1e-6,
            "period {} vs 2 pi",
            cycle.period
        );
        for k in 0..cycle.n_samples() {
            let p = cycle.sample(k);
            let r = p[0].hypot(p[1]);
            assert!((r - 1.0).abs() < 1e-6, "radius {r} at sample {k}");
        }
    }

    #[test]
    fn hopf_cycle_closure_under_flow() {
        let field = hopf();
        let cycle =
            detect_limit_cycle(&field, &[0.5, 0.0], 20.0, None, &[], &CycleOptions::default())
                .unwrap();
        // Time-T map returns each stored sample to itself.
        for k in (0..cycle.n_samples()).step_by(128) {
            let back = flow_map(&field, cycle.sample(k), cycle.period, 1e-3).unwrap();
            assert!(
                dist(&back, cycle.sample(k)) < 1e-5,
                "sample {k} moved by {}",
                dist(&back, cycle.sample(k))
            );
        }
    }

    #[test]
    fn hopf_occupation_measure_is_centered() {
        let field = hopf();
        let cycle =
            detect_limit_cycle(&field, &[0.5, 0.0], 20.0, None, &[], &CycleOptions::default())
                .unwrap();
        let mu = cycle_occupation_measure(&cycle, 360).unwrap();
        assert!((mu.total_mass() - 1.0).abs() < 1e-12);
        let m = mu.mean();
        assert!(m[0].abs() < 1e-3 && m[1].abs() < 1e-3, "mean {m:?}");
    }

    #[test]
    fn occupation_measure_converges_in_atom_count() {
        let field = hopf();
        let cycle = detect_limit_cycle(
            &field,
            &[0.5, 0.0],
            20.0,
            None,
            &[],
            &CycleOptions {
                n_samples: 4096,
                ..CycleOptions::default()
            },
        )
        .unwrap();
        let reference = cycle_occupation_measure(&cycle, 1024).unwrap();
        let double = cycle_occupation_measure(&cycle, 2048).unwrap();
        let d = sliced_wasserstein(&double, &reference, 256, 11).unwrap();
        assert!(d < 1e-3, "doubling K moved the measure by {d}");
    }

    #[test]
    fn occupation_measure_invariant_under_section_choice() {
        let field = hopf();
        let a =
            detect_limit_cycle(&field, &[0.5, 0.0], 20.0, None, &[], &CycleOptions::default())
                .unwrap();
        let b = detect_limit_cycle(
            &field,
            &[0.0, 1.7],
            25.0,
            Some(Section {
                anchor: vec![0.0, 1.0],
                normal: vec![-1.0, 0.0],
            }),
            &[],
            &CycleOptions::default(),
        )
        .unwrap();
        assert!((a.period - b.period).abs() < 1e-6);
        let k = 8192;
        let mu_a = cycle_occupation_measure(&a, k).unwrap();
        let mu_b = cycle_occupation_measure(&b, k).unwrap();
        let d = sliced_wasserstein(&mu_a, &mu_b, 256, 13).unwrap();
        assert!(d < 1e-3, "section choice moved the measure by {d}");
    }

    #[test]
    fn cycle_seed_at_equilibrium_rejected() {
        let field = hopf();
        let eqs = find_equilibria(&field, &[-0.5, -0.5], &[0.5, 0.5], 3, 1e-9).unwrap();
        let err = detect_limit_cycle(
            &field,
            &eqs[0].location.clone(),
            1.0,
            None,
            &eqs,
            &CycleOptions::default(),
        );
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn no_cycle_in_a_gradient_field() {
        let field = linear_sink();
        let err = detect_limit_cycle(
            &field,
            &[1.0, 0.0],
            1.0,
            None,
            &[],
            &CycleOptions {
                max_wait: 20.0,
                ..CycleOptions::default()
            },
        );
        assert!(matches!(err, Err(Error::NoCycle(_))), "{err:?}");
    }

    #[test]
    fn averaged_field_two_regimes() {
                use crate::hybrid::{HybridModel, Switching};
        // f(x, 0) = -x, f(x, 1) = -3x, nu = (1/2, 1/2): fbar(x) = -2x.
        let q = Generator::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let model = HybridModel::new(
            1,
            1,
            Box::new(|x: &[f64], i: usize, out: &mut [f64]| {
                out[0] = if i == 0 { -x[0] } else { -3.0 * x[0] }
            }),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Switching::Constant(q),
        );
        let field = average_field_auto(&model).unwrap();
        let mut out = [0.0];
        field.eval(&[2.0], &mut out);
        assert!((out[0] + 4.0).abs() < 1e-12);

        // Explicit weights must match the convex combination exactly.
        let weighted = average_field(&model, &[0.25, 0.75]).unwrap();
        weighted.eval(&[2.0], &mut out);
        assert!((out[0] - (0.25 * -2.0 + 0.75 * -6.0)).abs() < 1e-12);

        assert!(average_field(&model, &[0.5]).is_err());
        assert!(average_field(&model, &[0.7, 0.7]).is_err());
    }

    #[test]
    fn single_regime_average_is_identity() {
                use crate::hybrid::{HybridModel, Switching};
        let model = HybridModel::new(
            1,
            1,
            Box::new(|x: &[f64], _i: usize, out: &mut [f64]| out[0] = x[0] * 2.0),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Switching::Constant(Generator::new(vec![vec![0.0]]).unwrap()),
        );
        let field = average_field(&model, &[1.0]).unwrap();
        let mut out = [0.0];
        field.eval(&[3.0], &mut out);
        assert_eq!(out[0], 6.0);
    }
}
