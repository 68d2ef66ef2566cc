//! Projected gradient descent over the ellipse parameters of all agents.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{fmt9, Plant, Scenario, SimOptions, SimTrace};
use crate::trajectory::{self, EllipseParams, DEFAULT_A_MIN};

/// Which objective is minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Mean weighted backlog only.
    P1,
    /// Backlog plus the event-excitation term.
    P2,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Mode::P1),
            "P2" => Ok(Mode::P2),
            _ => Err(Error::InvalidParameter(format!("unknown mode '{s}', expected P1 or P2"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::P1 => "P1",
            Mode::P2 => "P2",
        })
    }
}

/// Step size sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    Fixed { eta0: f64 },
    /// `η_n = η₀ / (1 + n/n₀)`.
    Decay { eta0: f64, n0: f64 },
    /// Armijo backtracking along the projected path. When the first trial is
    /// rejected, up to `bundle` further searches run along the smallest
    /// convex combination of the gradients met so far, which keeps descent
    /// going across kinks of the objective.
    Backtracking { eta0: f64, shrink: f64, armijo: f64, max_trials: usize, bundle: usize },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking { eta0: 0.5, shrink: 0.5, armijo: 1e-4, max_trials: 30, bundle: 3 }
    }
}

impl StepRule {
    pub fn eta0(&self) -> f64 {
        match *self {
            StepRule::Fixed { eta0 } | StepRule::Decay { eta0, .. } | StepRule::Backtracking { eta0, .. } => eta0,
        }
    }

    pub fn with_eta0(self, eta0: f64) -> Self {
        match self {
            StepRule::Fixed { .. } => StepRule::Fixed { eta0 },
            StepRule::Decay { n0, .. } => StepRule::Decay { eta0, n0 },
            StepRule::Backtracking { shrink, armijo, max_trials, bundle, .. } => {
                StepRule::Backtracking { eta0, shrink, armijo, max_trials, bundle }
            }
        }
    }
}

/// Scale applied to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Time average as is.
    None,
    /// Divide by `T · Σ α_i σ_i`, making the backlog term dimensionless, and
    /// the excitation term additionally by the hull area.
    #[default]
    TotalInflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptOptions {
    pub mode: Mode,
    pub max_iters: usize,
    pub step: StepRule,
    /// Stop once `‖∇J‖₂` falls below this value.
    pub grad_tol: f64,
    /// Stop once `J` improved by less than this fraction over `rel_window` iterations.
    pub rel_tol: f64,
    pub rel_window: usize,
    /// Weight of the excitation term in P2.
    pub lambda: f64,
    /// Largest change of any single parameter in one iteration; `inf`
    /// disables the cap.
    pub max_step: f64,
    pub a_min: f64,
    pub normalization: Normalization,
    pub sim: SimOptions,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            mode: Mode::P2,
            max_iters: 1000,
            step: StepRule::default(),
            grad_tol: 1e-4,
            rel_tol: 1e-6,
            rel_window: 10,
            lambda: 1.0,
            max_step: 0.1,
            a_min: DEFAULT_A_MIN,
            normalization: Normalization::default(),
            sim: SimOptions::default(),
        }
    }
}

impl OptOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        let eta0 = self.step.eta0();
        if !(eta0 > 0.0) || !eta0.is_finite() {
            return bad("step size must be positive");
        }
        match self.step {
            StepRule::Decay { n0, .. } if !(n0 > 0.0) => return bad("decay constant must be positive"),
            StepRule::Backtracking { shrink, armijo, max_trials, .. } => {
                if !(shrink > 0.0 && shrink < 1.0) {
                    return bad("shrink factor must lie in (0, 1)");
                }
                if !(armijo > 0.0 && armijo < 1.0) {
                    return bad("Armijo constant must lie in (0, 1)");
                }
                if max_trials == 0 {
                    return bad("at least one line-search trial is required");
                }
            }
            _ => {}
        }
        if !(self.grad_tol >= 0.0) || !(self.rel_tol >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        if self.rel_window == 0 {
            return bad("improvement window must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.max_step > 0.0) {
            return bad("max_step must be positive");
        }
        if !(self.a_min > 0.0) {
            return bad("a_min must be positive");
        }
        Ok(())
    }
}

/// Objective value and its parts at one parameter vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub j: f64,
    pub j1: f64,
    /// Unweighted excitation part (zero in P1).
    pub j2: f64,
    pub gradient: Option<Vec<f64>>,
    pub trace: SimTrace,
}

/// Binds a scenario to optimizer options; the excitation field is built once.
#[derive(Debug, Clone)]
pub struct Problem {
    plant: Plant,
    opts: OptOptions,
    scale: f64,
    scale2: f64,
}

impl Problem {
    pub fn new(scenario: &Scenario, opts: &OptOptions) -> Result<Self> {
        opts.validate()?;
        let sim = SimOptions { excitation: opts.mode == Mode::P2, ..opts.sim.clone() };
        let plant = Plant::new(scenario, sim)?;
        let (scale, scale2) = match opts.normalization {
            Normalization::None => (1.0 / scenario.horizon(), 1.0 / scenario.horizon()),
            Normalization::TotalInflow => {
                let z = scenario.weighted_inflow();
                let z = if z > 0.0 { z } else { 1.0 };
                let scale = 1.0 / (scenario.horizon() * scenario.horizon() * z);
                let area = plant.field().map_or(1.0, |f| f.hull().area());
                (scale, scale / area.powf(1.5))
            }
        };
        Ok(Self { plant, opts: opts.clone(), scale, scale2 })
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn options(&self) -> &OptOptions {
        &self.opts
    }

    pub fn scenario(&self) -> &Scenario {
        self.plant.scenario()
    }

    /// Factors turning the two time integrals into the reported objective parts.
    pub fn scales(&self) -> (f64, f64) {
        (self.scale, self.scale2)
    }

    pub fn evaluate(&self, theta: &[EllipseParams], with_gradient: bool) -> Result<Evaluation> {
        let plant = if with_gradient == self.plant.options().sensitivities {
            self.plant.clone()
        } else {
            self.plant.with_sensitivities(with_gradient)
        };
        let trace = plant.simulate(theta)?;
        Ok(self.assemble(trace, with_gradient))
    }

    /// Objective evaluation without the trace samples, for repeated calls.
    pub fn evaluate_lean(&self, theta: &[EllipseParams], with_gradient: bool) -> Result<Evaluation> {
        let mut plant = self.plant.with_sensitivities(with_gradient);
        plant.set_record(false);
        let trace = plant.simulate(theta)?;
        Ok(self.assemble(trace, with_gradient))
    }

    fn assemble(&self, trace: SimTrace, with_gradient: bool) -> Evaluation {
        let j1 = self.scale * trace.j1_integral;
        let (j2, weight) = match self.opts.mode {
            Mode::P1 => (0.0, 0.0),
            Mode::P2 => (self.scale2 * trace.j2_integral, self.opts.lambda),
        };
        let gradient = with_gradient.then(|| {
            let mut g: Vec<f64> = trace.j1_grad_integral.iter().map(|v| self.scale * v).collect();
            if weight != 0.0 {
                for (gi, v) in g.iter_mut().zip(&trace.j2_grad_integral) {
                    *gi += weight * self.scale2 * v;
                }
            }
            g
        });
        Evaluation { j: j1 + weight * j2, j1, j2, gradient, trace }
    }
}

/// `(J, J₁ part, J₂ part, trace)`.
pub fn objective(scenario: &Scenario, theta: &[EllipseParams], opts: &OptOptions) -> Result<(f64, f64, f64, SimTrace)> {
    let e = Problem::new(scenario, opts)?.evaluate(theta, false)?;
    Ok((e.j, e.j1, e.j2, e.trace))
}

/// Gradient of the objective selected by `opts.mode`.
pub fn gradient(scenario: &Scenario, theta: &[EllipseParams], opts: &OptOptions) -> Result<Vec<f64>> {
    let e = Problem::new(scenario, opts)?.evaluate_lean(theta, true)?;
    Ok(e.gradient.unwrap_or_default())
}

/// Projection onto the admissible parameter set.
pub fn project(theta: &[EllipseParams], a_min: f64) -> Vec<EllipseParams> {
    theta.iter().map(|p| p.project(a_min)).collect()
}

/// One iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub theta: Vec<EllipseParams>,
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub gradient: Vec<f64>,
    /// Step size used to leave this iterate (zero for the last one).
    pub step: f64,
    pub n_events: usize,
}

impl IterRecord {
    pub fn grad_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Why the descent loop ended.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    GradientTolerance,
    Stalled,
    MaxIterations,
    LineSearchFailed,
    /// A simulation failed or produced a non-finite gradient; the history
    /// holds every iterate completed before that.
    Failed(Error),
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::GradientTolerance => f.write_str("gradient norm below tolerance"),
            StopReason::Stalled => f.write_str("relative improvement below tolerance"),
            StopReason::MaxIterations => f.write_str("iteration limit reached"),
            StopReason::LineSearchFailed => f.write_str("line search found no decrease"),
            StopReason::Failed(e) => write!(f, "aborted: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptHistory {
    pub mode: Mode,
    pub records: Vec<IterRecord>,
    pub stop: StopReason,
}

impl OptHistory {
    pub fn last(&self) -> &IterRecord {
        self.records.last().expect("history always holds the starting point")
    }

    pub fn first(&self) -> &IterRecord {
        &self.records[0]
    }

    pub fn final_theta(&self) -> &[EllipseParams] {
        &self.last().theta
    }

    /// Number of steps taken.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    /// The history as a result: failures become errors.
    pub fn into_result(self) -> Result<Self> {
        match &self.stop {
            StopReason::Failed(e) => Err(e.clone()),
            _ => Ok(self),
        }
    }

    /// Columns `iter, J, J1, J2, step, grad_norm`, then `A, B, a, b, phi` per agent.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "iter,J,J1,J2,step,grad_norm")?;
        let n = self.first().theta.len();
        for j in 0..n {
            write!(out, ",A_{j},B_{j},a_{j},b_{j},phi_{j}")?;
        }
        writeln!(out)?;
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                fmt9(r.j),
                fmt9(r.j1),
                fmt9(r.j2),
                fmt9(r.step),
                fmt9(r.grad_norm())
            )?;
            for v in trajectory::flatten(&r.theta) {
                write!(out, ",{}", fmt9(v))?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_gradient(g: &[f64], iteration: usize) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { iteration })
    }
}

fn step_from(theta: &[f64], g: &[f64], eta: f64, a_min: f64) -> (Vec<EllipseParams>, Vec<f64>) {
    let raw: Vec<f64> = theta.iter().zip(g).map(|(t, gi)| t - eta * gi).collect();
    let projected = project(&trajectory::unflatten(&raw), a_min);
    let flat = trajectory::flatten(&projected);
    (projected, flat)
}

struct Accepted {
    theta: Vec<EllipseParams>,
    eval: Evaluation,
    eta: f64,
}

struct LineSearch {
    accepted: Option<Accepted>,
    /// Whether the first trial was rejected.
    shrunk: bool,
    /// Gradient at the rejected trial closest to the current point.
    rejected_gradient: Option<Vec<f64>>,
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn capped_eta(eta: f64, dir: &[f64], max_step: f64) -> f64 {
    let d = norm_inf(dir);
    if eta * d > max_step {
        max_step / d
    } else {
        eta
    }
}

#[allow(clippy::too_many_arguments)]
fn backtrack(
    problem: &Problem,
    theta: &[f64],
    j0: f64,
    dir: &[f64],
    mut eta: f64,
    shrink: f64,
    armijo: f64,
    max_trials: usize,
) -> Result<LineSearch> {
    let a_min = problem.options().a_min;
    let mut out = LineSearch { accepted: None, shrunk: false, rejected_gradient: None };
    for _ in 0..max_trials {
        let (trial, flat) = step_from(theta, dir, eta, a_min);
        let eval = match problem.evaluate_lean(&trial, true) {
            Ok(e) => e,
            Err(Error::StepTooLarge { .. }) | Err(Error::TangentialCrossing { .. }) => {
                out.shrunk = true;
                eta *= shrink;
                continue;
            }
            Err(e) => return Err(e),
        };
        let decrease: f64 = dir.iter().zip(flat.iter().zip(theta)).map(|(d, (a, b))| d * (a - b)).sum();
        if eval.j <= j0 + armijo * decrease {
            out.accepted = Some(Accepted { theta: trial, eval, eta });
            return Ok(out);
        }
        out.shrunk = true;
        if eval.gradient.as_ref().is_some_and(|g| g.iter().all(|v| v.is_finite())) {
            out.rejected_gradient = eval.gradient;
        }
        eta *= shrink;
    }
    Ok(out)
}

/// Smallest-norm point of the convex hull of `vectors`.
pub fn min_norm_combination(vectors: &[Vec<f64>]) -> Vec<f64> {
    let k = vectors.len();
    let dim = vectors[0].len();
    let gram: Vec<Vec<f64>> =
        (0..k).map(|a| (0..k).map(|b| vectors[a].iter().zip(&vectors[b]).map(|(x, y)| x * y).sum()).collect()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let Some(weights) = affine_min_norm(&gram, &idx) else {
            continue;
        };
        if weights.iter().any(|&w| w < -1e-12) {
            continue;
        }
        let value: f64 = idx
            .iter()
            .zip(&weights)
            .map(|(&a, wa)| idx.iter().zip(&weights).map(|(&b, wb)| wa * wb * gram[a][b]).sum::<f64>())
            .sum();
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            let mut full = vec![0.0; k];
            for (&i, w) in idx.iter().zip(&weights) {
                full[i] = w.max(0.0);
            }
            best = Some((value, full));
        }
    }
    let weights = best.map(|(_, w)| w).unwrap_or_else(|| {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        w
    });
    let mut out = vec![0.0; dim];
    for (v, w) in vectors.iter().zip(&weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Minimizer of `‖Σ w_i v_i‖²` subject to `Σ w_i = 1` over the subset `idx`.
fn affine_min_norm(gram: &[Vec<f64>], idx: &[usize]) -> Option<Vec<f64>> {
    let m = idx.len();
    let n = m + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            a[r][c] = gram[i][j];
        }
        a[r][m] = 1.0;
        a[m][r] = 1.0;
    }
    a[m][n] = 1.0;
    let scale = idx.iter().map(|&i| gram[i][i]).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale.max(1.0) {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..m).map(|r| a[r][n] / a[r][r]).collect())
}

/// Runs the descent from `theta0`.
pub fn optimize(scenario: &Scenario, theta0: &[EllipseParams], opts: &OptOptions) -> Result<OptHistory> {
    let problem = Problem::new(scenario, opts)?;
    optimize_problem(&problem, theta0)
}

/// Same as [`optimize`] with a prepared problem.
pub fn optimize_problem(problem: &Problem, theta0: &[EllipseParams]) -> Result<OptHistory> {
    optimize_with_progress(problem, theta0, |_| {})
}

/// Descent loop calling `progress` after every accepted iterate.
pub fn optimize_with_progress<F: FnMut(&IterRecord)>(
    problem: &Problem,
    theta0: &[EllipseParams],
    mut progress: F,
) -> Result<OptHistory> {
    let opts = problem.options();
    let theta0 = project(theta0, opts.a_min);
    let first = problem.evaluate_lean(&theta0, true)?;
    let g0 = first.gradient.clone().unwrap_or_default();
    check_gradient(&g0, 0)?;

    let mut records = vec![IterRecord {
        iter: 0,
        theta: theta0,
        j: first.j,
        j1: first.j1,
        j2: first.j2,
        gradient: g0,
        step: 0.0,
        n_events: first.trace.events.len(),
    }];
    progress(&records[0]);

    let stop = loop {
        let n = records.len() - 1;
        let cur = &records[n];
        if cur.grad_norm() < opts.grad_tol {
            break StopReason::GradientTolerance;
        }
        if n >= opts.rel_window {
            let past = records[n - opts.rel_window].j;
            if past - cur.j < opts.rel_tol * past.abs() {
                break StopReason::Stalled;
            }
        }
        if n >= opts.max_iters {
            break StopReason::MaxIterations;
        }

        let theta = trajectory::flatten(&cur.theta);
        let g = cur.gradient.clone();
        let base_eta = match opts.step {
            StepRule::Fixed { eta0 } | StepRule::Backtracking { eta0, .. } => eta0,
            StepRule::Decay { eta0, n0 } => eta0 / (1.0 + n as f64 / n0),
        };

        let accepted = match opts.step {
            StepRule::Backtracking { shrink, armijo, max_trials, bundle, .. } => {
                let search = |dir: &[f64]| {
                    backtrack(problem, &theta, cur.j, dir, capped_eta(base_eta, dir, opts.max_step), shrink, armijo, max_trials)
                };
                let mut best: Option<Accepted> = None;
                let mut gradients = vec![g.clone()];
                let mut dir = g.clone();
                for _ in 0..=bundle {
                    let ls = match search(&dir) {
                        Ok(ls) => ls,
                        Err(e) => return Ok(OptHistory { mode: opts.mode, records, stop: StopReason::Failed(e) }),
                    };
                    if let Some(acc) = ls.accepted {
                        if best.as_ref().is_none_or(|b| acc.eval.j < b.eval.j) {
                            best = Some(acc);
                        }
                    }
                    let Some(other) = ls.rejected_gradient.filter(|_| ls.shrunk) else {
                        break;
                    };
                    gradients.push(other);
                    dir = min_norm_combination(&gradients);
                    if dir.iter().all(|v| v.abs() <= f64::EPSILON * norm_inf(&g)) {
                        break;
                    }
                }
                best
            }
            _ => {
                let eta = capped_eta(base_eta, &g, opts.max_step);
                let (theta_next, _) = step_from(&theta, &g, eta, opts.a_min);
                match problem.evaluate_lean(&theta_next, true) {
                    Ok(eval) => Some(Accepted { theta: theta_next, eval, eta }),
                    Err(e) => return Ok(OptHistory { mode: opts.mode, records, stop: StopReason::Failed(e) }),
                }
            }
        };

        let Some(Accepted { theta: trial, eval: e, eta }) = accepted else {
            break StopReason::LineSearchFailed;
        };
        let grad = e.gradient.clone().unwrap_or_default();
        if let Err(err) = check_gradient(&grad, n + 1) {
            break StopReason::Failed(err);
        }
        records[n].step = eta;
        records.push(IterRecord {
            iter: n + 1,
            theta: trial,
            j: e.j,
            j1: e.j1,
            j2: e.j2,
            gradient: grad,
            step: 0.0,
            n_events: e.trace.events.len(),
        });
        progress(&records[n + 1]);
    };
    Ok(OptHistory { mode: opts.mode, records, stop })
}
