//! Monte Carlo experiments that confront the averaging claims with
//! simulation: sup-norm closeness of hybrid paths to the averaged flow,
//! exit times from neighborhoods of equilibria, convergence of empirical
//! occupation measures to the cycle measure across `(eps, delta)` regimes,
//! and a numerical audit of the standing assumptions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::averaged::{
    average_field_auto, integrate_ode, Classification, Equilibrium, LimitCycle, VectorField,
};
use crate::error::{Error, Result};
use crate::hybrid::{simulate_observed, HybridModel, SimParams};
use crate::measures::{sliced_wasserstein, DiscreteMeasure, OccupationAccumulator};
use crate::rng::{derive_seed, substream, Channel};

/// 97.5% standard-normal quantile used by every 95% interval here.
const Z95: f64 = 1.959963984540054;

/// Wilson score interval for a binomial proportion; valid near 0 and 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WilsonInterval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub successes: usize,
    pub n: usize,
}

pub fn wilson(successes: usize, n: usize) -> WilsonInterval {
    assert!(n > 0, "wilson interval of an empty sample");
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // The bounds reach the endpoints exactly at 0 and n successes.
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    WilsonInterval {
        estimate: p,
        lo,
        hi,
        successes,
        n,
    }
}

/// Scaling regime of a `(eps, delta)` family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeCase {
    /// `delta/eps -> l` in `(0, inf)`.
    Case1,
    /// `delta/eps -> 0`.
    Case2,
    /// `delta/eps -> inf`.
    Case3,
}

/// A declared scaling regime: the `(eps, delta)` cells of a sweep plus the
/// case tag their ratio sequence is approaching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub pairs: Vec<(f64, f64)>,
    pub case: RegimeCase,
}

impl RegimeSpec {
    /// Rejects a spec whose `delta/eps` sequence contradicts the declared
    /// case: the ratios must move monotonically toward the declared limit.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::validation("regime spec has no (eps, delta) pairs"));
        }
        for (k, &(eps, delta)) in self.pairs.iter().enumerate() {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::validation(format!(
                    "cell {k}: eps = {eps} must be positive"
                )));
            }
            if !(delta >= 0.0) || !delta.is_finite() {
                return Err(Error::validation(format!(
                    "cell {k}: delta = {delta} must be nonnegative"
                )));
            }
        }
        let ratios: Vec<f64> = self.pairs.iter().map(|&(e, d)| d / e).collect();
        let n = ratios.len();
        if n == 1 {
            return Ok(());
        }
        let ok = match self.case {
            RegimeCase::Case2 => {
                let mono = ratios.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                mono && (ratios[n - 1] < ratios[0] || ratios[n - 1] == 0.0)
            }
            RegimeCase::Case3 => {
                let mono = ratios.windows(2).all(|w| w[1] >= w[0] - 1e-12);
                mono && ratios[n - 1] > ratios[0]
            }
            RegimeCase::Case1 => {
                let target = ratios[n - 1];
                target > 0.0
                    && target.is_finite()
                    && ratios
                        .windows(2)
                        .all(|w| (w[1] - target).abs() <= (w[0] - target).abs() + 1e-12)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "regime tag {:?} contradicts the delta/eps sequence {ratios:?}",
                self.case
            )))
        }
    }
}

/// Common metadata embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub toolkit_version: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl ReportMeta {
    fn new(seed: u64, started: Instant) -> Self {
        ReportMeta {
            toolkit_version: crate::VERSION.to_string(),
            seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }
}

// ---------------------------------------------------------------------------
// Path closeness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ClosenessCell {
    pub eps: f64,
    pub delta: f64,
    /// Fraction of paths whose sup-deviation from the averaged flow
    /// reached `gamma`.
    pub p_hat: f64,
    pub interval: WilsonInterval,
    /// `-(eps + delta) ln max(p_hat, 1/N)`: the decay-rate diagnostic.
    pub rate_diagnostic: f64,
    /// Paths that left the integrable domain before a verdict; reported,
    /// never silently dropped.
    pub n_nonfinite: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosenessReport {
    pub gamma: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    pub i0: usize,
    pub sim: SimParams,
    pub regimes: RegimeSpec,
    pub cells: Vec<ClosenessCell>,
    pub meta: ReportMeta,
}

impl ClosenessReport {
    pub fn p_hats(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.p_hat).collect()
    }

    pub fn nonincreasing(&self) -> bool {
        self.cells.windows(2).all(|w| w[1].p_hat <= w[0].p_hat)
    }

    /// The extreme cells have non-overlapping 95% intervals.
    pub fn extremes_separated(&self) -> bool {
        if self.cells.len() < 2 {
            return false;
        }
        let first = &self.cells[0].interval;
        let last = &self.cells[self.cells.len() - 1].interval;
        first.lo > last.hi
    }
}

/// Estimates, per `(eps, delta)` cell, the probability that the hybrid
/// path deviates from the averaged trajectory by at least `gamma` anywhere
/// on `[0, horizon]`.
#[allow(clippy::too_many_arguments)]
pub fn closeness_probability(
    model: &HybridModel,
    template: &SimParams,
    x0: &[f64],
    i0: usize,
    gamma: f64,
    horizon: f64,
    regimes: &RegimeSpec,
    n_paths: usize,
) -> Result<ClosenessReport> {
    let started = Instant::now();
    regimes.validate()?;
    if gamma < 0.0 || gamma.is_nan() {
        return Err(Error::precondition(format!(
            "gamma = {gamma} must be nonnegative"
        )));
    }
    if n_paths == 0 {
        return Err(Error::precondition("n_paths must be at least 1"));
    }

    let field = average_field_auto(model)?;
    let averaged = integrate_ode(&field, x0, horizon, template.step)?;

    let mut cells = Vec::with_capacity(regimes.pairs.len());
    for (cell_idx, &(eps, delta)) in regimes.pairs.iter().enumerate() {
        let cell_seed = derive_seed(template.seed, cell_idx as u64);
        let mut params = template.clone();
        params.eps = eps;
        params.delta = delta;
        params.horizon = horizon;
        params.seed = cell_seed;

        // Degenerate thresholds have exact answers; skip the sampling.
        let (exceed, nonfinite) = if gamma == 0.0 {
            (n_paths, 0)
        } else if gamma.is_infinite() {
            (0, 0)
        } else {
            let outcomes: Vec<Result<bool>> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let mut switch_rng = substream(cell_seed, p as u64, Channel::Switching);
                    let mut noise_rng = substream(cell_seed, p as u64, Channel::Diffusion);
                    let mut exceeded = false;
                    let res = crate::hybrid::simulate_with_streams(
                        model,
                        &params,
                        x0,
                        i0,
                        &mut switch_rng,
                        &mut noise_rng,
                        &mut |t: f64, x: &[f64], _i: usize, _grid: bool| {
                            let xb = averaged.state_at(t);
                            let dev = x
                                .iter()
                                .zip(&xb)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt();
                            if dev >= gamma {
                                exceeded = true;
                                return false;
                            }
                            true
                        },
                    );
                    match res {
                        Ok(()) => Ok(exceeded),
                        Err(Error::BlowUp { .. }) | Err(Error::NonFinite { .. }) => {
                            Err(Error::NonFinite {
                                time: 0.0,
                                context: String::new(),
                            })
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect();
            let mut exceed = 0usize;
            let mut nonfinite = 0usize;
            for o in outcomes {
                match o {
                    Ok(true) => exceed += 1,
                    Ok(false) => {}
                    Err(Error::NonFinite { .. }) => nonfinite += 1,
                    Err(e) => return Err(e),
                }
            }
            (exceed, nonfinite)
        };

        let p_hat = exceed as f64 / n_paths as f64;
        let interval = wilson(exceed, n_paths);
        let rate = -(eps + delta) * p_hat.max(1.0 / n_paths as f64).ln();
        cells.push(ClosenessCell {
            eps,
            delta,
            p_hat,
            interval,
            rate_diagnostic: rate,
            n_nonfinite: nonfinite,
        });
    }

    Ok(ClosenessReport {
        gamma,
        horizon,
        n_paths,
        x0: x0.to_vec(),
        i0,
        sim: template.clone(),
        regimes: regimes.clone(),
        cells,
        meta: ReportMeta::new(template.seed, started),
    })
}

// ---------------------------------------------------------------------------
// Assumption audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessChannel {
    Drift,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessForm {
    /// Evaluated on the raw drift/diffusion callbacks.
    Raw,
    /// Evaluated on per-capita rates `f_k / x_k` (positivity-domain
    /// models), with the derivative limit on boundary coordinates.
    PerCapita,
}

/// A regime that certifies one of the case conditions at an equilibrium.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Witness {
    pub regime: usize,
    pub channel: WitnessChannel,
    pub form: WitnessForm,
    pub value: f64,
}

/// Per-regime evaluation of the case conditions at one equilibrium.
#[derive(Debug, Clone, Serialize)]
pub struct WitnessRow {
    pub regime: usize,
    pub drift: Vec<f64>,
    pub drift_norm: f64,
    pub sigma_norm: f64,
    pub percap_drift: Option<Vec<f64>>,
    /// `beta' f(x*, i)` (planar saddles).
    pub beta_drift: Option<f64>,
    pub beta_drift_percap: Option<f64>,
    /// `|beta' sigma(x*, i)|` (planar saddles).
    pub beta_sigma_norm: Option<f64>,
    pub beta_sigma_percap_norm: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumWitnesses {
    pub equilibrium: Equilibrium,
    pub rows: Vec<WitnessRow>,
    pub case1: Option<Witness>,
    pub case2: Option<Witness>,
    pub case3: Option<Witness>,
}

impl EquilibriumWitnesses {
    pub fn witness_for(&self, case: RegimeCase) -> Option<&Witness> {
        match case {
            RegimeCase::Case1 => self.case1.as_ref(),
            RegimeCase::Case2 => self.case2.as_ref(),
            RegimeCase::Case3 => self.case3.as_ref(),
        }
    }
}

const WITNESS_TOL: f64 = 1e-9;

/// Per-capita component: `f_k(x)/x_k`, replaced by the partial derivative
/// `d f_k / d x_k` on coordinates where `x_k` vanishes (the two agree for
/// density models whose k-th drift factors through `x_k`).
fn percap_component(
    eval: &dyn Fn(&[f64], &mut [f64]),
    x: &[f64],
    k: usize,
    buf: &mut [f64],
) -> f64 {
    if x[k].abs() > 1e-8 {
        eval(x, buf);
        return buf[k] / x[k];
    }
    let step = 1e-6;
    let mut xp = x.to_vec();
    xp[k] += step;
    eval(&xp, buf);
    let fp = buf[k];
    xp[k] = x[k] - step;
    eval(&xp, buf);
    let fm = buf[k];
    (fp - fm) / (2.0 * step)
}

/// Evaluates the case-1/2/3 exit conditions at one classified equilibrium.
pub fn equilibrium_witnesses(
    model: &HybridModel,
    eq: &Equilibrium,
) -> Result<EquilibriumWitnesses> {
    let d = model.dim();
    let m = model.noise_dim();
    let x = &eq.location;
    let beta = eq.stable_normal.clone();
    let percap = model.positive_domain();

    let mut rows = Vec::with_capacity(model.n_regimes());
    for i in 0..model.n_regimes() {
        let mut drift = vec![0.0; d];
        model.drift(x, i, &mut drift);
        let drift_norm = norm(&drift);
        let mut sigma = vec![0.0; d * m];
        model.diffusion(x, i, &mut sigma);
        let sigma_norm = norm(&sigma);

        let percap_drift = percap.then(|| {
            let mut buf = vec![0.0; d];
            (0..d)
                .map(|k| {
                    percap_component(&|p: &[f64], o: &mut [f64]| model.drift(p, i, o), x, k, &mut buf)
                })
                .collect::<Vec<f64>>()
        });

        let (beta_drift, beta_drift_percap, beta_sigma_norm, beta_sigma_percap_norm) =
            if let Some(b) = &beta {
                let bd = dot(b, &drift);
                let bdp = percap_drift.as_ref().map(|p| dot(b, p));
                // beta' sigma is a 1 x m row; report its norm.
                let mut bs = vec![0.0; m];
                for j in 0..m {
                    for k in 0..d {
                        bs[j] += b[k] * sigma[k * m + j];
                    }
                }
                let bs_norm = norm(&bs);
                let bs_percap = percap.then(|| {
                    let mut buf = vec![0.0; d * m];
                    let mut acc = vec![0.0; m];
                    // Per-capita row k: sigma_kj / x_k with the derivative
                    // limit on boundary coordinates.
                    for k in 0..d {
                        for j in 0..m {
                            let val = if x[k].abs() > 1e-8 {
                                model.diffusion(x, i, &mut buf);
                                buf[k * m + j] / x[k]
                            } else {
                                let step = 1e-6;
                                let mut xp = x.to_vec();
                                xp[k] += step;
                                model.diffusion(&xp, i, &mut buf);
                                let fp = buf[k * m + j];
                                xp[k] = x[k] - step;
                                model.diffusion(&xp, i, &mut buf);
                                let fm = buf[k * m + j];
                                (fp - fm) / (2.0 * step)
                            };
                            acc[j] += b[k] * val;
                        }
                    }
                    norm(&acc)
                });
                (Some(bd), bdp, Some(bs_norm), bs_percap)
            } else {
                (None, None, None, None)
            };

        rows.push(WitnessRow {
            regime: i,
            drift,
            drift_norm,
            sigma_norm,
            percap_drift,
            beta_drift,
            beta_drift_percap,
            beta_sigma_norm,
            beta_sigma_percap_norm,
        });
    }

    // A saddle needs the beta-projected conditions; a source repels on its
    // own, so any nonvanishing drift/noise row counts.
    let is_saddle_with_beta = beta.is_some();
    let mut case2 = None;
    let mut case3 = None;
    for row in &rows {
        if case2.is_none() {
            let (value, form) = if is_saddle_with_beta {
                let raw = row.beta_drift.unwrap_or(0.0);
                if raw.abs() > WITNESS_TOL {
                    (raw, WitnessForm::Raw)
                } else {
                    (row.beta_drift_percap.unwrap_or(0.0), WitnessForm::PerCapita)
                }
            } else {
                (row.drift_norm, WitnessForm::Raw)
            };
            if value.abs() > WITNESS_TOL {
                case2 = Some(Witness {
                    regime: row.regime,
                    channel: WitnessChannel::Drift,
                    form,
                    value,
                });
            }
        }
        if case3.is_none() {
            let (value, form) = if is_saddle_with_beta {
                let raw = row.beta_sigma_norm.unwrap_or(0.0);
                if raw.abs() > WITNESS_TOL {
                    (raw, WitnessForm::Raw)
                } else {
                    (
                        row.beta_sigma_percap_norm.unwrap_or(0.0),
                        WitnessForm::PerCapita,
                    )
                }
            } else {
                (row.sigma_norm, WitnessForm::Raw)
            };
            if value.abs() > WITNESS_TOL {
                case3 = Some(Witness {
                    regime: row.regime,
                    channel: WitnessChannel::Diffusion,
                    form,
                    value,
                });
            }
        }
    }
    let case1 = case2.or(case3);

    Ok(EquilibriumWitnesses {
        equilibrium: eq.clone(),
        rows,
        case1,
        case2,
        case3,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzProbe {
    pub regime: usize,
    pub drift_ratio_max: f64,
    pub sigma_ratio_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub lipschitz: Vec<LipschitzProbe>,
    pub equilibria: Vec<EquilibriumWitnesses>,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub meta: ReportMeta,
}

/// Numerically probes the standing assumptions over the box: local
/// Lipschitz ratios of the callbacks, the equilibrium inventory with
/// classifications, and the case-1/2/3 exit witnesses at each equilibrium.
pub fn assumption_audit(
    model: &HybridModel,
    lo: &[f64],
    hi: &[f64],
    grid_per_axis: usize,
    seed: u64,
) -> Result<AuditReport> {
    let started = Instant::now();
    let d = model.dim();
    let m = model.noise_dim();
    if lo.len() != d || hi.len() != d {
        return Err(Error::Dimension("audit box must match model dimension".into()));
    }

    // Lipschitz difference-quotient probes on random pairs.
    let mut rng = substream(seed, 0, Channel::Init);
    let mut lipschitz = Vec::with_capacity(model.n_regimes());
    let n_pairs = 200;
    let sample_point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|k| {
                let u: f64 = rng.random();
                lo[k] + u * (hi[k] - lo[k])
            })
            .collect()
    };
    for i in 0..model.n_regimes() {
        let mut drift_max = 0.0f64;
        let mut sigma_max = 0.0f64;
        let mut fa = vec![0.0; d];
        let mut fb = vec![0.0; d];
        let mut sa = vec![0.0; d * m];
        let mut sb = vec![0.0; d * m];
        for _ in 0..n_pairs {
            let xa = sample_point(&mut rng);
            let xb = sample_point(&mut rng);
            let gap = dist(&xa, &xb);
            if gap < 1e-9 {
                continue;
            }
            model.drift(&xa, i, &mut fa);
            model.drift(&xb, i, &mut fb);
            model.diffusion(&xa, i, &mut sa);
            model.diffusion(&xb, i, &mut sb);
            let df = fa
                .iter()
                .zip(&fb)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let ds = sa
                .iter()
                .zip(&sb)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            drift_max = drift_max.max(df / gap);
            sigma_max = sigma_max.max(ds / gap);
        }
        lipschitz.push(LipschitzProbe {
            regime: i,
            drift_ratio_max: drift_max,
            sigma_ratio_max: sigma_max,
        });
    }

    let field = average_field_auto(model)?;
    let equilibria = crate::averaged::find_equilibria(&field, lo, hi, grid_per_axis, 1e-9)?;
    let witnesses = equilibria
        .iter()
        .map(|eq| equilibrium_witnesses(model, eq))
        .collect::<Result<Vec<_>>>()?;

    Ok(AuditReport {
        lipschitz,
        equilibria: witnesses,
        box_lo: lo.to_vec(),
        box_hi: hi.to_vec(),
        meta: ReportMeta::new(seed, started),
    })
}

// ---------------------------------------------------------------------------
// Exit times
// ---------------------------------------------------------------------------

/// Configuration of one exit-time experiment around a classified
/// equilibrium.
#[derive(Debug, Clone)]
pub struct ExitSpec {
    pub equilibrium: Equilibrium,
    /// Radius of the starting ball around the equilibrium.
    pub theta1: f64,
    /// Exit threshold: distance from the stable-set proxy.
    pub theta3: f64,
    /// Time budget `H`.
    pub horizon: f64,
    pub n_paths: usize,
    /// Ball `B_R` inside which the exit must happen.
    pub ball_radius: f64,
    /// The `Delta` of the target bound `exp(-Delta/(eps+delta))`.
    pub delta_exponent: f64,
}

impl ExitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta3 > self.theta1) {
            return Err(Error::precondition(format!(
                "need 0 < theta1 < theta3, got theta1 = {}, theta3 = {}",
                self.theta1, self.theta3
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::precondition("exit horizon must be positive"));
        }
        if self.n_paths == 0 {
            return Err(Error::precondition("n_paths must be at least 1"));
        }
        Ok(())
    }
}

/// Computable stand-in for the stable set of an equilibrium: the point
/// itself for sources; for planar saddles, the local stable eigenline
/// extended by a short backward integration along the stable direction.
#[derive(Debug, Clone)]
pub enum StableSetProxy {
    Point {
        center: Vec<f64>,
    },
    Polyline {
        center: Vec<f64>,
        beta: Vec<f64>,
        /// Flat row-major polyline vertices (both branches).
        vertices: Vec<f64>,
        dim: usize,
        /// Half-width of the tube around the eigenline containing every
        /// vertex, plus the largest vertex gap; used for the fast
        /// no-exit test.
        tube: f64,
        /// Extent of the polyline along the stable direction.
        extent: f64,
        direction: Vec<f64>,
    },
}

impl StableSetProxy {
    /// Builds the proxy from the averaged field. `reach` controls how far
    /// the backward continuation walks (20 steps to `reach`).
    pub fn build(field: &dyn VectorField, eq: &Equilibrium, reach: f64) -> Result<Self> {
        match eq.classification {
            Classification::Source => Ok(StableSetProxy::Point {
                center: eq.location.clone(),
            }),
            Classification::Saddle => {
                let d = eq.location.len();
                if d != 2 {
                    return Err(Error::config(
                        "stable-set proxy for saddles is implemented in the plane",
                    ));
                }
                let vs = eq
                    .stable_direction
                    .clone()
                    .ok_or_else(|| Error::config("saddle lacks a stable direction"))?;
                let beta = eq
                    .stable_normal
                    .clone()
                    .ok_or_else(|| Error::config("saddle lacks a stable normal"))?;
                let n_steps = 20;
                let h = reach / n_steps as f64;
                let mut vertices = Vec::new();
                // The backward flow expands along the stable direction
                // and traces the local stable manifold on both sides.
                for sign in [-1.0, 1.0] {
                    let mut x: Vec<f64> = eq
                        .location
                        .iter()
                        .zip(&vs)
                        .map(|(c, v)| c + sign * 1e-4 * v)
                        .collect();
                    vertices.extend_from_slice(&eq.location);
                    let mut buf = vec![0.0; d];
                    for _ in 0..n_steps {
                        // One backward Euler-ish RK2 step of length h.
                        field.eval(&x, &mut buf);
                        let nb = norm(&buf).max(1e-12);
                        let mid: Vec<f64> = x
                            .iter()
                            .zip(&buf)
                            .map(|(xi, fi)| xi - 0.5 * h * fi / nb)
                            .collect();
                        field.eval(&mid, &mut buf);
                        let nb = norm(&buf).max(1e-12);
                        for (xi, fi) in x.iter_mut().zip(&buf) {
                            *xi -= h * fi / nb;
                        }
                        vertices.extend_from_slice(&x);
                    }
                }
                let mut tube = 0.0f64;
                let mut extent = 0.0f64;
                let nv = vertices.len() / d;
                for k in 0..nv {
                    let p = &vertices[k * d..(k + 1) * d];
                    let rel: Vec<f64> = p.iter().zip(&eq.location).map(|(a, b)| a - b).collect();
                    tube = tube.max(dot(&beta, &rel).abs());
                    extent = extent.max(dot(&vs, &rel).abs());
                }
                tube += h; // generous vertex-gap allowance
                Ok(StableSetProxy::Polyline {
                    center: eq.location.clone(),
                    beta,
                    vertices,
                    dim: d,
                    tube,
                    extent,
                    direction: vs,
                })
            }
            other => Err(Error::config(format!(
                "exit experiment requires a source or saddle, found {other:?}"
            ))),
        }
    }

    pub fn center(&self) -> &[f64] {
        match self {
            StableSetProxy::Point { center } => center,
            StableSetProxy::Polyline { center, .. } => center,
        }
    }

    /// Exact distance to the proxy set.
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            StableSetProxy::Point { center } => dist(x, center),
            StableSetProxy::Polyline {
                vertices, dim, ..
            } => {
                let nv = vertices.len() / dim;
                let mut best = f64::INFINITY;
                for k in 0..nv {
                    let p = &vertices[k * dim..(k + 1) * dim];
                    best = best.min(dist(x, p));
                }
                best
            }
        }
    }

    /// Fast sufficient condition for `distance(x) < theta`: used to skip
    /// the exact polyline scan on the (vastly more common) non-exit
    /// records.
    fn certainly_below(&self, x: &[f64], theta: f64) -> bool {
        match self {
            StableSetProxy::Point { .. } => false,
            StableSetProxy::Polyline {
                center,
                beta,
                tube,
                extent,
                direction,
                ..
            } => {
                let rel: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                let across = dot(beta, &rel).abs();
                let along = dot(direction, &rel).abs();
                along <= *extent && across + tube < theta
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitCell {
    pub eps: f64,
    pub delta: f64,
    pub exits: usize,
    pub p_hat: f64,
    pub interval: WilsonInterval,
    /// Target bound `exp(-Delta/(eps+delta))`.
    pub bound_eps_delta: f64,
    /// The sharper `exp(-Delta/eps)` variant, reported alongside.
    pub bound_eps: f64,
    /// Wilson lower bound clears the `(eps + delta)` target.
    pub passes_bound: bool,
    pub n_nonfinite: usize,
    #[serde(skip)]
    pub exit_times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitReport {
    pub theta1: f64,
    pub theta3: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub ball_radius: f64,
    pub delta_exponent: f64,
    pub equilibrium: Equilibrium,
    pub witness: Witness,
    pub case: RegimeCase,
    pub sim: SimParams,
    pub cells: Vec<ExitCell>,
    pub meta: ReportMeta,
}

impl ExitCell {
    /// Empirical `P(tau <= h)` for any `h` below the simulated horizon,
    /// from the same coupled path set.
    pub fn p_by(&self, h: f64) -> f64 {
        let hits = self.exit_times.iter().filter(|&&t| t <= h).count();
        hits as f64 / self.exit_times.len().max(1) as f64
    }
}

/// Starts paths uniformly in the `theta1`-ball around the equilibrium
/// (intersected with the open positive orthant for positivity models) and
/// measures the first time they are at least `theta3` away from the
/// stable-set proxy while inside `B_R`.
pub fn exit_time_experiment(
    model: &HybridModel,
    template: &SimParams,
    spec: &ExitSpec,
    case: RegimeCase,
    regimes: &RegimeSpec,
) -> Result<ExitReport> {
    let started = Instant::now();
    spec.validate()?;
    regimes.validate()?;
    if regimes.case != case {
        return Err(Error::config(format!(
            "declared case {case:?} does not match the regime spec tag {:?}",
            regimes.case
        )));
    }

    // Confirm the case witness before spending any simulation budget.
    let witnesses = equilibrium_witnesses(model, &spec.equilibrium)?;
    let witness = *witnesses.witness_for(case).ok_or_else(|| {
        let condition = match case {
            RegimeCase::Case1 => "beta'f(x*, i) != 0 or beta'sigma(x*, i) != 0 for some i",
            RegimeCase::Case2 => "beta'f(x*, i) != 0 for some i",
            RegimeCase::Case3 => "beta'sigma(x*, i) != 0 for some i",
        };
        Error::config(format!(
            "equilibrium at {:?} fails the {case:?} condition ({condition}); \
             the exit bound does not apply",
            spec.equilibrium.location
        ))
    })?;

    let field = average_field_auto(model)?;
    let proxy = StableSetProxy::build(&field, &spec.equilibrium, 2.0 * spec.theta3)?;
    let positive = model.positive_domain();

    let mut cells = Vec::with_capacity(regimes.pairs.len());
    for (cell_idx, &(eps, delta)) in regimes.pairs.iter().enumerate() {
        let cell_seed = derive_seed(template.seed, 7_000 + cell_idx as u64);
        let mut params = template.clone();
        params.eps = eps;
        params.delta = delta;
        params.horizon = spec.horizon;
        params.seed = cell_seed;

        let results: Vec<Result<Option<f64>>> = (0..spec.n_paths)
            .into_par_iter()
            .map(|p| {
                let mut init_rng = substream(cell_seed, p as u64, Channel::Init);
                let x0 = sample_ball(
                    &mut init_rng,
                    proxy.center(),
                    spec.theta1,
                    positive,
                )?;
                // Start regime drawn uniformly: the bound is uniform over
                // starting regimes.
                let i0 = (init_rng.random::<u64>() % model.n_regimes() as u64) as usize;

                let mut switch_rng = substream(cell_seed, p as u64, Channel::Switching);
                let mut noise_rng = substream(cell_seed, p as u64, Channel::Diffusion);
                let mut exit_at: Option<f64> = None;
                let res = crate::hybrid::simulate_with_streams(
                    model,
                    &params,
                    &x0,
                    i0,
                    &mut switch_rng,
                    &mut noise_rng,
                    &mut |t: f64, x: &[f64], _i: usize, _grid: bool| {
                        if proxy.certainly_below(x, spec.theta3) {
                            return true;
                        }
                        if norm(x) <= spec.ball_radius && proxy.distance(x) >= spec.theta3 {
                            exit_at = Some(t);
                            return false;
                        }
                        true
                    },
                );
                match res {
                    Ok(()) => Ok(exit_at),
                    Err(Error::BlowUp { .. }) | Err(Error::NonFinite { .. }) => Err(
                        Error::NonFinite {
                            time: 0.0,
                            context: String::new(),
                        },
                    ),
                    Err(e) => Err(e.in_path(p)),
                }
            })
            .collect();

        let mut exit_times = Vec::with_capacity(spec.n_paths);
        let mut exits = 0usize;
        let mut nonfinite = 0usize;
        for r in results {
            match r {
                Ok(Some(t)) => {
                    exits += 1;
                    exit_times.push(t);
                }
                Ok(None) => exit_times.push(f64::INFINITY),
                Err(Error::NonFinite { .. }) => {
                    nonfinite += 1;
                    exit_times.push(f64::NAN);
                }
                Err(e) => return Err(e),
            }
        }
        let interval = wilson(exits, spec.n_paths);
        let bound_eps_delta = (-spec.delta_exponent / (eps + delta)).exp();
        let bound_eps = (-spec.delta_exponent / eps).exp();
        cells.push(ExitCell {
            eps,
            delta,
            exits,
            p_hat: interval.estimate,
            interval,
            bound_eps_delta,
            bound_eps,
            passes_bound: interval.lo >= bound_eps_delta,
            n_nonfinite: nonfinite,
            exit_times,
        });
    }

    Ok(ExitReport {
        theta1: spec.theta1,
        theta3: spec.theta3,
        horizon: spec.horizon,
        n_paths: spec.n_paths,
        ball_radius: spec.ball_radius,
        delta_exponent: spec.delta_exponent,
        equilibrium: spec.equilibrium.clone(),
        witness,
        case,
        sim: template.clone(),
        cells,
        meta: ReportMeta::new(template.seed, started),
    })
}

fn sample_ball(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    radius: f64,
    positive: bool,
) -> Result<Vec<f64>> {
    let d = center.len();
    for _ in 0..10_000 {
        let mut dir: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let n = norm(&dir).max(1e-300);
        let u: f64 = rng.random();
        let r = radius * u.powf(1.0 / d as f64);
        for v in dir.iter_mut() {
            *v = *v / n * r;
        }
        let x: Vec<f64> = center.iter().zip(&dir).map(|(c, v)| c + v).collect();
        if !positive || x.iter().all(|&v| v > 0.0) {
            return Ok(x);
        }
    }
    Err(Error::config(format!(
        "could not sample a start point in the ball of radius {radius} \
         around {center:?} inside the positive orthant"
    )))
}

// ---------------------------------------------------------------------------
// Convergence sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Projections per sliced-Wasserstein evaluation.
    pub n_proj: usize,
    /// Fixed projection seed so every cell sees the same directions.
    pub sw_seed: u64,
    /// Target atom count per empirical measure (sets the thinning stride).
    pub target_atoms: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_proj: 256,
            sw_seed: 0x5157,
            target_atoms: 8192,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub eps: f64,
    pub delta: f64,
    pub distances: Vec<f64>,
    pub mean_distance: f64,
    pub sd_distance: f64,
    /// Normal-approximation 95% interval for the mean distance.
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Per-seed `int x_1 d mu_hat`.
    pub functional_x1: Vec<f64>,
    /// Per-seed `int |x|^2 d mu_hat`.
    pub functional_norm2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub horizon: f64,
    pub burn_in: f64,
    pub n_seeds: usize,
    pub stride: usize,
    pub cycle_period: f64,
    /// Reference value of `int x_1 d mu0` on the cycle measure.
    pub reference_x1: f64,
    pub reference_norm2: f64,
    pub sim: SimParams,
    pub regimes: RegimeSpec,
    pub cells: Vec<SweepCell>,
    pub meta: ReportMeta,
}

impl SweepReport {
    pub fn mean_distances(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.mean_distance).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.cells
            .windows(2)
            .all(|w| w[1].mean_distance < w[0].mean_distance)
    }

    pub fn first_last_ci_separated(&self) -> bool {
        if self.cells.len() < 2 {
            return false;
        }
        self.cells[0].ci_lo > self.cells[self.cells.len() - 1].ci_hi
    }
}

/// Per `(eps, delta)` cell, simulates `n_seeds` long paths, builds their
/// empirical occupation measures, and measures the sliced-Wasserstein
/// distance to the cycle occupation measure, together with the
/// bounded-functional comparison of the weak-convergence statement.
#[allow(clippy::too_many_arguments)]
pub fn convergence_sweep(
    model: &HybridModel,
    template: &SimParams,
    x0: &[f64],
    i0: usize,
    regimes: &RegimeSpec,
    n_seeds: usize,
    cycle: &LimitCycle,
    mu0: &DiscreteMeasure,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let started = Instant::now();
    regimes.validate()?;
    if n_seeds == 0 {
        return Err(Error::precondition("n_seeds must be at least 1"));
    }
    if cycle.period <= 0.0 || mu0.is_empty() {
        return Err(Error::config(
            "convergence sweep requires a detected cycle and its occupation measure",
        ));
    }

    let horizon = template.horizon;
    let burn_in = template.burn_in;
    let n_grid_post = ((horizon - burn_in) / template.step) as usize;
    let stride = (n_grid_post / opts.target_atoms).max(1);

    let reference_x1 = mu0.integrate(|x| x[0]);
    let reference_norm2 = mu0.integrate(|x| x.iter().map(|v| v * v).sum());

    let mut cells = Vec::with_capacity(regimes.pairs.len());
    for (cell_idx, &(eps, delta)) in regimes.pairs.iter().enumerate() {
        let cell_seed = derive_seed(template.seed, 11_000 + cell_idx as u64);
        let mut params = template.clone();
        params.eps = eps;
        params.delta = delta;
        params.seed = cell_seed;

        let per_seed: Vec<Result<(f64, f64, f64)>> = (0..n_seeds)
            .into_par_iter()
            .map(|s| {
                let run_seed = derive_seed(cell_seed, s as u64);
                let mut run_params = params.clone();
                run_params.seed = run_seed;
                let mut acc = OccupationAccumulator::new(model.dim(), burn_in, stride);
                simulate_observed(model, &run_params, x0, i0, |t, x, _i, grid| {
                    acc.observe(t, x, grid);
                    true
                })
                .map_err(|e| e.in_path(s))?;
                let mu_hat = acc.finish()?;
                let dist = sliced_wasserstein(&mu_hat, mu0, opts.n_proj, opts.sw_seed)?;
                let fx1 = mu_hat.integrate(|x| x[0]);
                let fn2 = mu_hat.integrate(|x| x.iter().map(|v| v * v).sum());
                Ok((dist, fx1, fn2))
            })
            .collect();

        let mut distances = Vec::with_capacity(n_seeds);
        let mut functional_x1 = Vec::with_capacity(n_seeds);
        let mut functional_norm2 = Vec::with_capacity(n_seeds);
        for r in per_seed {
            let (dist, fx1, fn2) = r?;
            distances.push(dist);
            functional_x1.push(fx1);
            functional_norm2.push(fn2);
        }
        let mean = distances.iter().sum::<f64>() / n_seeds as f64;
        let var = distances
            .iter()
            .map(|d| (d - mean) * (d - mean))
            .sum::<f64>()
            / (n_seeds as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        let half = Z95 * sd / (n_seeds as f64).sqrt();
        cells.push(SweepCell {
            eps,
            delta,
            distances,
            mean_distance: mean,
            sd_distance: sd,
            ci_lo: mean - half,
            ci_hi: mean + half,
            functional_x1,
            functional_norm2,
        });
    }

    Ok(SweepReport {
        horizon,
        burn_in,
        n_seeds,
        stride,
        cycle_period: cycle.period,
        reference_x1,
        reference_norm2,
        sim: template.clone(),
        regimes: regimes.clone(),
        cells,
        meta: ReportMeta::new(template.seed, started),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
