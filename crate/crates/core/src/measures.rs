//! Discrete measures on `R^d` and weak-convergence distances.
//!
//! The same atom-set representation carries both the limit-cycle
//! occupation measure and the empirical occupation measures read off
//! simulated paths. Distances: sliced Wasserstein-1 (exact weighted
//! 1-D transport under random projections) as the primary metric and the
//! energy distance as a cross-check; both metrize weak convergence on
//! bounded sets.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::Trajectory;
use crate::rng::{substream, Channel};

/// Weighted atoms on `R^d`; weights are strictly positive and sum to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: usize,
    /// Flat row-major atom locations, `dim` entries per atom.
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from flat atom coordinates and weights; weights are
    /// normalized to sum exactly to one.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("measure dimension must be positive"));
        }
        if weights.is_empty() {
            return Err(Error::validation("measure has no atoms"));
        }
        if points.len() != weights.len() * dim {
            return Err(Error::Dimension(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("atom coordinates must be finite"));
        }
        let mut total = 0.0;
        for &w in &weights {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::validation(format!(
                    "atom weight {w} must be positive"
                )));
            }
            total += w;
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(DiscreteMeasure {
            dim,
            points,
            weights,
        })
    }

    /// Equal-weight atoms.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        Self::new(dim, points, vec![1.0; n.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weighted barycenter.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for k in 0..self.len() {
            for (d, &v) in self.point(k).iter().enumerate() {
                m[d] += self.weights[k] * v;
            }
        }
        m
    }

    /// Weighted integral of a scalar observable over the atoms.
    pub fn integrate(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|k| self.weights[k] * g(self.point(k)))
            .sum()
    }

    pub fn translate(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::Dimension("translation vector length".into()));
        }
        let mut points = self.points.clone();
        for k in 0..self.len() {
            for d in 0..self.dim {
                points[k * self.dim + d] += shift[d];
            }
        }
        Ok(DiscreteMeasure {
            dim: self.dim,
            points,
            weights: self.weights.clone(),
        })
    }

    /// CSV export: `x_1..x_d, weight`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for k in 1..=self.dim {
            write!(w, "x_{k},")?;
        }
        writeln!(w, "weight")?;
        for k in 0..self.len() {
            for v in self.point(k) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", self.weights[k])?;
        }
        Ok(())
    }
}

/// Empirical occupation measure of one trajectory: grid states after the
/// burn-in, thinned by `stride`, with equal weights.
pub fn empirical_occupation(
    traj: &Trajectory,
    burn_in: f64,
    stride: usize,
) -> Result<DiscreteMeasure> {
    if burn_in >= traj.params.horizon {
        return Err(Error::precondition(format!(
            "burn-in {} is not below the horizon {}",
            burn_in, traj.params.horizon
        )));
    }
    let mut acc = OccupationAccumulator::new(traj.dim, burn_in, stride);
    for k in 0..traj.len() {
        acc.observe(traj.times[k], traj.state(k), traj.on_grid[k]);
    }
    acc.finish()
}

/// Streaming builder for empirical occupation measures; pairs with
/// [`crate::hybrid::simulate_observed`] so long horizons never materialize
/// a full trajectory.
#[derive(Debug)]
pub struct OccupationAccumulator {
    dim: usize,
    burn_in: f64,
    stride: usize,
    kept: usize,
    seen: usize,
    points: Vec<f64>,
}

impl OccupationAccumulator {
    pub fn new(dim: usize, burn_in: f64, stride: usize) -> Self {
        OccupationAccumulator {
            dim,
            burn_in,
            stride: stride.max(1),
            kept: 0,
            seen: 0,
            points: Vec::new(),
        }
    }

    pub fn observe(&mut self, t: f64, x: &[f64], on_grid: bool) {
        if !on_grid || t < self.burn_in {
            return;
        }
        if self.seen % self.stride == 0 {
            self.points.extend_from_slice(x);
            self.kept += 1;
        }
        self.seen += 1;
    }

    pub fn finish(self) -> Result<DiscreteMeasure> {
        if self.kept == 0 {
            return Err(Error::precondition(
                "no grid samples remain after the burn-in",
            ));
        }
        DiscreteMeasure::uniform(self.dim, self.points)
    }
}

/// Exact Wasserstein-1 distance between two weighted atom sets on the
/// line, by a merged CDF walk over the sorted support.
fn wasserstein_1d(a: &mut [(f64, f64)], b: &mut [(f64, f64)]) -> f64 {
    a.sort_unstable_by(|p, q| p.0.total_cmp(&q.0));
    b.sort_unstable_by(|p, q| p.0.total_cmp(&q.0));
    let mut i = 0;
    let mut j = 0;
    let mut cdf_a = 0.0f64;
    let mut cdf_b = 0.0f64;
    let mut last = f64::NAN;
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let xa = if i < a.len() { a[i].0 } else { f64::INFINITY };
        let xb = if j < b.len() { b[j].0 } else { f64::INFINITY };
        let x = xa.min(xb);
        if last.is_finite() {
            dist += (cdf_a - cdf_b).abs() * (x - last);
        }
        while i < a.len() && a[i].0 == x {
            cdf_a += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            cdf_b += b[j].1;
            j += 1;
        }
        last = x;
    }
    dist
}

/// Sliced Wasserstein-1 distance: the average over `n_proj` uniformly
/// random unit directions of the exact 1-D distance between the projected
/// measures. Deterministic for a given seed.
pub fn sliced_wasserstein(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Dimension(format!(
            "measure dimensions differ: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::precondition("sliced distance of an empty measure"));
    }
    if n_proj == 0 {
        return Err(Error::precondition("n_proj must be at least 1"));
    }
    let dim = mu.dim();
    let dists: Vec<f64> = (0..n_proj)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(seed, p as u64, Channel::Projection);
            let mut dir = vec![0.0; dim];
            loop {
                let mut norm_sq = 0.0f64;
                for v in dir.iter_mut() {
                    *v = rng.sample(StandardNormal);
                    norm_sq += *v * *v;
                }
                if norm_sq > 1e-24 {
                    let norm = norm_sq.sqrt();
                    for v in dir.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
            let mut pa: Vec<(f64, f64)> = (0..mu.len())
                .map(|k| (dot(mu.point(k), &dir), mu.weight(k)))
                .collect();
            let mut pb: Vec<(f64, f64)> = (0..nu.len())
                .map(|k| (dot(nu.point(k), &dir), nu.weight(k)))
                .collect();
            wasserstein_1d(&mut pa, &mut pb)
        })
        .collect();
    Ok(dists.iter().sum::<f64>() / n_proj as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` over weighted atom
/// pairs; nonnegative, zero iff the measures coincide.
pub fn energy_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Dimension(format!(
            "measure dimensions differ: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::precondition("energy distance of an empty measure"));
    }
    let cross = pair_mean(mu, nu);
    let within_mu = pair_mean(mu, mu);
    let within_nu = pair_mean(nu, nu);
    Ok((2.0 * cross - within_mu - within_nu).max(0.0))
}

fn pair_mean(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let partial: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let pi = a.point(i);
            let wi = a.weight(i);
            let mut acc = 0.0;
            for j in 0..b.len() {
                acc += wi * b.weight(j) * euclid(pi, b.point(j));
            }
            acc
        })
        .collect();
    partial.iter().sum()
}

/// Axis-aligned histogram of a measure; mass outside the box is tallied
/// separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridHistogram {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
    /// Row-major cell masses (last axis fastest).
    pub masses: Vec<f64>,
    pub outside_mass: f64,
}

impl GridHistogram {
    pub fn cell_mass(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            flat = flat * self.bins[d] + i;
        }
        self.masses[flat]
    }

    /// CSV grid export for two-dimensional histograms: one row per cell,
    /// `x_center, y_center, mass`.
    pub fn write_csv_2d<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        assert_eq!(self.bins.len(), 2, "csv grid export is two-dimensional");
        writeln!(w, "x_center,y_center,mass")?;
        let (nx, ny) = (self.bins[0], self.bins[1]);
        for ix in 0..nx {
            let xc = self.lo[0] + (ix as f64 + 0.5) * (self.hi[0] - self.lo[0]) / nx as f64;
            for iy in 0..ny {
                let yc = self.lo[1] + (iy as f64 + 0.5) * (self.hi[1] - self.lo[1]) / ny as f64;
                writeln!(w, "{xc},{yc},{}", self.masses[ix * ny + iy])?;
            }
        }
        Ok(())
    }
}

pub fn histogram(
    mu: &DiscreteMeasure,
    lo: &[f64],
    hi: &[f64],
    bins: &[usize],
) -> Result<GridHistogram> {
    let dim = mu.dim();
    if lo.len() != dim || hi.len() != dim || bins.len() != dim {
        return Err(Error::Dimension(
            "histogram box/bins must match the measure dimension".into(),
        ));
    }
    for d in 0..dim {
        if !(hi[d] > lo[d]) {
            return Err(Error::validation(format!(
                "degenerate histogram box on axis {d}: [{}, {}]",
                lo[d], hi[d]
            )));
        }
        if bins[d] == 0 {
            return Err(Error::validation(format!("zero bins on axis {d}")));
        }
    }
    let n_cells: usize = bins.iter().product();
    let mut masses = vec![0.0; n_cells];
    let mut outside = 0.0;
    'atoms: for k in 0..mu.len() {
        let x = mu.point(k);
        let mut flat = 0;
        for d in 0..dim {
            if x[d] < lo[d] || x[d] > hi[d] {
                outside += mu.weight(k);
                continue 'atoms;
            }
            let t = (x[d] - lo[d]) / (hi[d] - lo[d]);
            let i = ((t * bins[d] as f64) as usize).min(bins[d] - 1);
            flat = flat * bins[d] + i;
        }
        masses[flat] += mu.weight(k);
    }
    Ok(GridHistogram {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        bins: bins.to_vec(),
        masses,
        outside_mass: outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point_mass(dim: usize, at: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(dim, at.to_vec()).unwrap()
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let mu = DiscreteMeasure::uniform(2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let sw = sliced_wasserstein(&mu, &mu, 64, 1).unwrap();
        let ed = energy_distance(&mu, &mu).unwrap();
        assert!(sw.abs() < 1e-12);
        assert!(ed.abs() < 1e-12);
    }

    #[test]
    fn two_point_masses_match_cosine_average() {
        // For atoms at 0 and (1,0) in the plane, the sliced distance is
        // E|cos(theta)| = 2/pi.
        let mu = point_mass(2, &[0.0, 0.0]);
        let nu = point_mass(2, &[1.0, 0.0]);
        let sw = sliced_wasserstein(&mu, &nu, 10_000, 7).unwrap();
        let expect = 2.0 / std::f64::consts::PI;
        assert!(
            (sw - expect).abs() < 0.02 * expect,
            "sliced distance {sw} vs 2/pi = {expect}"
        );
    }

    #[test]
    fn energy_distance_two_point_masses_is_two() {
        let mu = point_mass(2, &[0.0, 0.0]);
        let nu = point_mass(2, &[1.0, 0.0]);
        let ed = energy_distance(&mu, &nu).unwrap();
        assert_eq!(ed, 2.0);
    }

    #[test]
    fn translation_shifts_distance_at_most_by_norm() {
        let mu = DiscreteMeasure::uniform(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let nu = DiscreteMeasure::uniform(2, vec![0.5, 0.0, 0.0, 2.0]).unwrap();
        let v = [0.3, -0.4];
        let base = sliced_wasserstein(&mu, &nu, 256, 3).unwrap();
        let shifted = sliced_wasserstein(&mu, &nu.translate(&v).unwrap(), 256, 3).unwrap();
        let vnorm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((shifted - base).abs() <= vnorm + 1e-12);
    }

    #[test]
    fn rigid_translation_of_both_measures_is_invariant() {
        let mu = DiscreteMeasure::uniform(2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.0]).unwrap();
        let nu = DiscreteMeasure::uniform(2, vec![0.5, 0.0, 0.0, 2.0]).unwrap();
        let v = [10.0, -3.0];
        let base = sliced_wasserstein(&mu, &nu, 128, 5).unwrap();
        let moved = sliced_wasserstein(
            &mu.translate(&v).unwrap(),
            &nu.translate(&v).unwrap(),
            128,
            5,
        )
        .unwrap();
        assert!((base - moved).abs() < 1e-12, "{base} vs {moved}");
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        let mu = point_mass(2, &[0.0, 0.0]);
        let nu3 = point_mass(3, &[0.0, 0.0, 0.0]);
        assert!(sliced_wasserstein(&mu, &nu3, 8, 0).is_err());
        assert!(energy_distance(&mu, &nu3).is_err());
        assert!(DiscreteMeasure::new(2, vec![], vec![]).is_err());
        assert!(DiscreteMeasure::new(2, vec![1.0, 2.0], vec![0.0]).is_err());
    }

    #[test]
    fn histogram_single_atom() {
        let mu = point_mass(2, &[0.25, 0.75]);
        let h = histogram(&mu, &[0.0, 0.0], &[1.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(h.cell_mass(&[0, 1]), 1.0);
        assert_eq!(h.outside_mass, 0.0);
    }

    #[test]
    fn histogram_uniform_square() {
        let mu =
            DiscreteMeasure::uniform(2, vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75])
                .unwrap();
        let h = histogram(&mu, &[0.0, 0.0], &[1.0, 1.0], &[2, 2]).unwrap();
        for m in &h.masses {
            assert!((m - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_degenerate_box_errors() {
        let mu = point_mass(1, &[0.0]);
        assert!(histogram(&mu, &[1.0], &[1.0], &[4]).is_err());
    }

    #[test]
    fn occupation_of_constant_trajectory_is_point_mass() {
        use crate::ctmc::Generator;
        use crate::hybrid::{simulate_path, HybridModel, SimParams, Switching};
        let model = HybridModel::new(
            1,
            1,
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Switching::Constant(Generator::new(vec![vec![0.0]]).unwrap()),
        );
        let p = SimParams::new(1.0, 0.0, 0.1, 1.0, 1);
        let traj = simulate_path(&model, &p, &[3.0], 0).unwrap();
        let mu = empirical_occupation(&traj, 0.0, 1).unwrap();
        assert!((mu.mean()[0] - 3.0).abs() < 1e-12);
        // Idempotent under burn-in changes for a constant path.
        let mu2 = empirical_occupation(&traj, 0.5, 1).unwrap();
        assert!(sliced_wasserstein(&mu, &mu2, 8, 1).unwrap() < 1e-12);
    }

    #[test]
    fn occupation_requires_samples_after_burn() {
        use crate::ctmc::Generator;
        use crate::hybrid::{simulate_path, HybridModel, SimParams, Switching};
        let model = HybridModel::new(
            1,
            1,
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Box::new(|_x: &[f64], _i: usize, out: &mut [f64]| out[0] = 0.0),
            Switching::Constant(Generator::new(vec![vec![0.0]]).unwrap()),
        );
        let p = SimParams::new(1.0, 0.0, 0.1, 1.0, 1);
        let traj = simulate_path(&model, &p, &[3.0], 0).unwrap();
        assert!(empirical_occupation(&traj, 1.0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn distances_symmetric_and_nonnegative(
            xs in prop::collection::vec(-5.0f64..5.0, 2..12),
            ys in prop::collection::vec(-5.0f64..5.0, 2..12),
        ) {
            let xs = if xs.len() % 2 == 1 { xs[..xs.len()-1].to_vec() } else { xs };
            let ys = if ys.len() % 2 == 1 { ys[..ys.len()-1].to_vec() } else { ys };
            prop_assume!(xs.len() >= 2 && ys.len() >= 2);
            let mu = DiscreteMeasure::uniform(2, xs).unwrap();
            let nu = DiscreteMeasure::uniform(2, ys).unwrap();
            let ab = sliced_wasserstein(&mu, &nu, 32, 9).unwrap();
            let ba = sliced_wasserstein(&nu, &mu, 32, 9).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            let ea = energy_distance(&mu, &nu).unwrap();
            let eb = energy_distance(&nu, &mu).unwrap();
            prop_assert!(ea >= 0.0);
            prop_assert!((ea - eb).abs() < 1e-12);
        }
    }
}
