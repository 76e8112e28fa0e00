//! Exact simulation and stationary analysis of the finite-state switching
//! chain with generator `Q/eps`.
//!
//! A generator is a square rate matrix with nonnegative off-diagonal
//! entries and zero row sums. Holding times in state `i` are exponential
//! with rate `|q_ii|/eps` and the embedded chain routes to `j` with
//! probability `q_ij/|q_ii|`, so skeletons are sampled exactly (no time
//! discretization). State-dependent generators carry a rate callback plus
//! a global bound and are simulated by thinning inside the hybrid
//! integrator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for generator validation.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A constant generator matrix for the switching chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    rates: Vec<Vec<f64>>,
}

impl Generator {
    /// Validates and wraps a rate matrix given as a row-major list of rows.
    ///
    /// Rejects non-square input, negative off-diagonal rates, row sums
    /// beyond `ROW_SUM_TOL`, and (for more than one state) rows with zero
    /// total rate, which would make the chain reducible.
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let m0 = rates.len();
        if m0 == 0 {
            return Err(Error::validation("generator has no states"));
        }
        for (i, row) in rates.iter().enumerate() {
            if row.len() != m0 {
                return Err(Error::validation(format!(
                    "generator row {i} has length {} but the matrix has {m0} rows",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for (j, &q) in row.iter().enumerate() {
                if !q.is_finite() {
                    return Err(Error::validation(format!(
                        "generator row {i} contains a non-finite entry at column {j}"
                    )));
                }
                if i != j && q < 0.0 {
                    return Err(Error::validation(format!(
                        "generator row {i}: off-diagonal entry q[{i}][{j}] = {q} is negative"
                    )));
                }
                sum += q;
            }
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!(
                    "generator row {i} sums to {sum:e}, beyond tolerance {ROW_SUM_TOL:e}"
                )));
            }
            if m0 > 1 && row[i] == 0.0 {
                return Err(Error::validation(format!(
                    "generator row {i} has zero exit rate; only a single-state chain may be rateless"
                )));
            }
        }
        Ok(Generator { rates })
    }

    pub fn n_states(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rates
    }

    /// True iff the directed graph on positive-rate edges is strongly
    /// connected. Exact graph search, no numerics.
    pub fn check_irreducible(&self) -> bool {
        let m0 = self.n_states();
        if m0 == 1 {
            return true;
        }
        let forward = |i: usize, j: usize| self.rates[i][j] > 0.0;
        let backward = |i: usize, j: usize| self.rates[j][i] > 0.0;
        reaches_all(m0, forward) && reaches_all(m0, backward)
    }

    /// Solves `nu Q = 0`, `sum nu_i = 1` by replacing one equation with the
    /// normalization row; the resulting system is solved directly (the
    /// chain is small).
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        if !self.check_irreducible() {
            return Err(Error::precondition(
                "stationary distribution requested for a reducible generator",
            ));
        }
        let m0 = self.n_states();
        if m0 == 1 {
            return Ok(vec![1.0]);
        }
        // nu Q = 0  <=>  Q' nu' = 0; replace the last row of Q' with ones.
        let mut a = DMatrix::<f64>::zeros(m0, m0);
        for i in 0..m0 {
            for j in 0..m0 {
                a[(i, j)] = self.rates[j][i];
            }
        }
        for j in 0..m0 {
            a[(m0 - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(m0);
        b[m0 - 1] = 1.0;
        let nu = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numeric("singular system in stationary solve".into()))?;

        let nu: Vec<f64> = nu.iter().copied().collect();
        // Residual check: nu Q = 0 componentwise.
        for j in 0..m0 {
            let r: f64 = (0..m0).map(|i| nu[i] * self.rates[i][j]).sum();
            if r.abs() > 1e-12 {
                return Err(Error::Numeric(format!(
                    "stationary solve residual {r:e} in component {j} exceeds 1e-12"
                )));
            }
        }
        if nu.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric(
                "stationary solve produced a nonpositive component".into(),
            ));
        }
        Ok(nu)
    }
}

fn reaches_all(n: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && i != j && edge(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// A state-dependent generator `x -> Q(x)` with a global bound
/// `qbar >= sup_x max_i |q_ii(x)|` used for thinning.
pub struct StateDependentGenerator {
    n_states: usize,
    rates: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>,
    bound: f64,
}

impl StateDependentGenerator {
    pub fn new(
        n_states: usize,
        bound: f64,
        rates: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::validation("generator has no states"));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::validation(format!(
                "state-dependent generator bound {bound} must be finite and positive"
            )));
        }
        Ok(StateDependentGenerator {
            n_states,
            rates,
            bound,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Evaluates `Q(x)` and checks it against all constant-generator
    /// invariants plus the global bound.
    pub fn probe(&self, x: &[f64]) -> Result<Generator> {
        let q = (self.rates)(x);
        let gen = Generator::new(q)?;
        if gen.n_states() != self.n_states {
            return Err(Error::Dimension(format!(
                "Q(x) returned {} states, declared {}",
                gen.n_states(),
                self.n_states
            )));
        }
        for i in 0..self.n_states {
            if gen.rate(i, i).abs() > self.bound {
                return Err(Error::validation(format!(
                    "|q_{i}{i}(x)| = {} exceeds the declared bound {}",
                    gen.rate(i, i).abs(),
                    self.bound
                )));
            }
        }
        Ok(gen)
    }
}

impl std::fmt::Debug for StateDependentGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateDependentGenerator")
            .field("n_states", &self.n_states)
            .field("bound", &self.bound)
            .finish()
    }
}

/// Discrete-event record of one realization of the switching chain:
/// the state entered at each jump time, truncated at the horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpSkeleton {
    /// Jump times; `times[0] == 0` is the initial time.
    pub times: Vec<f64>,
    /// `states[k]` is occupied on `[times[k], times[k+1])`.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl JumpSkeleton {
    /// State occupied at time `t` (left-continuous convention at jumps is
    /// irrelevant here because jump times have measure zero).
    pub fn state_at(&self, t: f64) -> usize {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.states[0],
            k => self.states[k - 1],
        }
    }

    pub fn n_jumps(&self) -> usize {
        self.times.len() - 1
    }

    /// Fraction of `[0, horizon]` spent in each state; sums to one.
    pub fn occupation_fractions(&self, n_states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n_states];
        for k in 0..self.states.len() {
            let end = if k + 1 < self.times.len() {
                self.times[k + 1]
            } else {
                self.horizon
            };
            occ[self.states[k]] += end - self.times[k];
        }
        for o in occ.iter_mut() {
            *o /= self.horizon;
        }
        occ
    }
}

/// Samples one jump skeleton of the chain with generator `Q/eps` started
/// in `i0`, exactly: exponential holding times, embedded-chain routing.
pub fn sample_jump_skeleton(
    q: &Generator,
    eps: f64,
    i0: usize,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<JumpSkeleton> {
    if eps <= 0.0 {
        return Err(Error::precondition(format!("eps = {eps} must be positive")));
    }
    if horizon <= 0.0 {
        return Err(Error::precondition(format!(
            "horizon = {horizon} must be positive"
        )));
    }
    if i0 >= q.n_states() {
        return Err(Error::precondition(format!(
            "initial state {i0} out of range for {} states",
            q.n_states()
        )));
    }
    let mut times = vec![0.0];
    let mut states = vec![i0];
    let mut t = 0.0;
    let mut i = i0;
    loop {
        let exit = -q.rate(i, i);
        if exit == 0.0 {
            break; // single-state chain
        }
        t += exp_sample(rng, exit / eps);
        if t > horizon {
            break;
        }
        i = route(q, i, rng);
        times.push(t);
        states.push(i);
    }
    Ok(JumpSkeleton {
        times,
        states,
        horizon,
    })
}

/// Exponential sample with the inverse-CDF transform; `u` is drawn from
/// the open interval so `ln` never sees zero.
fn exp_sample(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.random::<f64>();
    -(1.0 - u).ln() / rate
}

fn route(q: &Generator, i: usize, rng: &mut ChaCha8Rng) -> usize {
    let exit = -q.rate(i, i);
    let u: f64 = rng.random::<f64>() * exit;
    let mut acc = 0.0;
    let mut last = i;
    for j in 0..q.n_states() {
        if j == i {
            continue;
        }
        let r = q.rate(i, j);
        if r <= 0.0 {
            continue;
        }
        acc += r;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}
