//! Scenario files, experiment runners, output files and the
//! finite-difference gradient oracle.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::optimizer::{self, Mode, OptHistory, OptOptions, Problem, StopReason};
use crate::plant::{fmt9, EventKind, Scenario, SimTrace, Target};
use crate::trajectory::{self, EllipseParams, PARAMS_PER_AGENT};

/// Scenario files shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("fig3", include_str!("../scenarios/fig3.scenario")),
    ("fig3-offset-start", include_str!("../scenarios/fig3-offset-start.scenario")),
    ("fig4", include_str!("../scenarios/fig4.scenario")),
    ("two-target", include_str!("../scenarios/two-target.scenario")),
];

/// Samples in the exported trajectory polyline.
pub const POLYLINE_SAMPLES: usize = 1000;

/// Collection rate given once for all agents or per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuSpec {
    Shared(f64),
    PerAgent(Vec<f64>),
}

impl MuSpec {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            MuSpec::Shared(m) => vec![*m],
            MuSpec::PerAgent(v) => v.clone(),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub x: f64,
    pub y: f64,
    pub r: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    pub sigma: f64,
    pub mu: MuSpec,
    #[serde(default)]
    pub x0: f64,
}

impl TargetSpec {
    pub fn to_target(&self) -> Target {
        Target::new(Point2::new(self.x, self.y), self.r, self.alpha, self.sigma, self.mu.to_vec()).with_x0(self.x0)
    }
}

/// Targets drawn uniformly in a square box with pairwise disjoint ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomLayout {
    pub count: usize,
    pub box_size: f64,
    pub r: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    pub sigma: f64,
    pub mu: MuSpec,
    pub seed: u64,
}

/// Where results are written; file names are relative to `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub trace: String,
    pub events: String,
    pub history: String,
    pub polyline: String,
    pub gradcheck: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trace: "trace.csv".into(),
            events: "events.csv".into(),
            history: "history.csv".into(),
            polyline: "polyline.csv".into(),
            gradcheck: "gradcheck.csv".into(),
        }
    }
}

/// On-disk scenario description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<TargetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_layout: Option<RandomLayout>,
    /// Extra vertices of the excitation domain, as `[x, y]` pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub region: Vec<[f64; 2]>,
    pub agents: Vec<EllipseParams>,
    #[serde(default)]
    pub optimizer: OptOptions,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ScenarioFile {
    pub fn parse(text: &str, context: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { context: context.to_string(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse { context: "serialize".into(), message: e.to_string() })
    }

    /// Targets listed explicitly, or generated from the random layout.
    pub fn target_list(&self) -> Result<Vec<Target>> {
        match (&self.random_layout, self.targets.is_empty()) {
            (Some(_), false) => Err(Error::Validation("give either targets or random_layout, not both".into())),
            (Some(l), true) => random_layout(l),
            (None, _) => Ok(self.targets.iter().map(TargetSpec::to_target).collect()),
        }
    }

    /// Validated in-memory form.
    pub fn build(&self) -> Result<LoadedScenario> {
        let targets = self.target_list()?;
        let region = self.region.iter().map(|p| Point2::new(p[0], p[1])).collect();
        let scenario = Scenario::with_region(targets, self.agents.len(), self.horizon_t, region)?;
        for (j, p) in self.agents.iter().enumerate() {
            p.validate(self.optimizer.a_min).map_err(|e| Error::Validation(format!("agent {j}: {e}")))?;
        }
        self.optimizer.validate()?;
        Ok(LoadedScenario {
            name: self.name.clone(),
            scenario,
            theta0: self.agents.clone(),
            options: self.optimizer.clone(),
            output: self.output.clone(),
        })
    }
}

/// A scenario ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub name: String,
    pub scenario: Scenario,
    pub theta0: Vec<EllipseParams>,
    pub options: OptOptions,
    pub output: OutputPaths,
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ScenarioFile::parse(&text, &path.display().to_string())?.build()
}

/// Text of a bundled scenario; a trailing `.scenario` is ignored.
pub fn bundled(name: &str) -> Option<&'static str> {
    let key = name.strip_suffix(".scenario").unwrap_or(name);
    BUNDLED.iter().find(|(n, _)| *n == key).map(|(_, t)| *t)
}

/// Loads `arg` as a file path if it exists, otherwise as a bundled name.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioFile> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        return ScenarioFile::parse(&text, arg);
    }
    match bundled(arg) {
        Some(text) => ScenarioFile::parse(text, arg),
        None => Err(Error::Io(format!(
            "{arg}: no such file and not a bundled scenario ({})",
            BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ))),
    }
}

const LAYOUT_ATTEMPTS: usize = 100_000;

/// Draws target locations uniformly in `[r, box − r]²`, rejecting any that
/// would overlap an earlier range.
pub fn random_layout(spec: &RandomLayout) -> Result<Vec<Target>> {
    if !(spec.box_size > 2.0 * spec.r) || !(spec.r > 0.0) {
        return Err(Error::Validation("random layout box must exceed one sensing diameter".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out: Vec<Target> = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > LAYOUT_ATTEMPTS {
            return Err(Error::Validation(format!("could not place {} disjoint targets", spec.count)));
        }
        let p = Point2::new(rng.gen_range(spec.r..spec.box_size - spec.r), rng.gen_range(spec.r..spec.box_size - spec.r));
        if out.iter().all(|t| t.location.distance(p) > 2.0 * spec.r) {
            out.push(Target::new(p, spec.r, spec.alpha, spec.sigma, spec.mu.to_vec()));
        }
    }
    Ok(out)
}

/// One central-difference component.
#[derive(Debug, Clone, PartialEq)]
pub struct FdComponent {
    pub value: f64,
    /// Step finally used.
    pub h: f64,
    /// Whether both perturbed runs reproduced the nominal event sequence.
    pub sequence_match: bool,
}

/// Central differences of `f` at `x`. `f` returns a value and a signature
/// of the discrete behavior; when either perturbed signature differs from
/// the nominal one the step is halved, up to `max_halvings` times.
pub fn central_differences<S, F>(mut f: F, x: &[f64], h: f64, max_halvings: usize) -> Result<Vec<FdComponent>>
where
    S: PartialEq,
    F: FnMut(&[f64]) -> Result<(f64, S)>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let (_, nominal) = f(x)?;
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let mut step = h;
        let mut halvings = 0;
        loop {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[k] += step;
            dn[k] -= step;
            let (fu, su) = f(&up)?;
            let (fd, sd) = f(&dn)?;
            let matched = su == nominal && sd == nominal;
            if matched || halvings == max_halvings {
                out.push(FdComponent { value: (fu - fd) / (2.0 * step), h: step, sequence_match: matched });
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
    }
    Ok(out)
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Step halvings tried before a component is flagged.
pub const FD_MAX_HALVINGS: usize = 3;

/// Central-difference gradient of the problem's objective; parameters are
/// perturbed without projection.
pub fn fd_oracle(problem: &Problem, theta: &[EllipseParams], h: f64) -> Result<Vec<FdComponent>> {
    let f = |v: &[f64]| {
        let e = problem.evaluate_lean(&trajectory::unflatten(v), false)?;
        Ok((e.j, e.trace.event_signature()))
    };
    central_differences(f, &trajectory::flatten(theta), h, FD_MAX_HALVINGS)
}

/// Parameter name such as `a_1`.
pub fn param_name(index: usize) -> String {
    const NAMES: [&str; PARAMS_PER_AGENT] = ["A", "B", "a", "b", "phi"];
    format!("{}_{}", NAMES[index % PARAMS_PER_AGENT], index / PARAMS_PER_AGENT)
}

/// Relative tolerance of the gradient comparison.
pub const GRADCHECK_REL_TOL: f64 = 1e-2;
/// Below this magnitude components are compared absolutely.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub index: usize,
    pub ipa: f64,
    pub fd: f64,
    /// Relative error, or absolute error when `|fd|` is below the floor.
    pub error: f64,
    pub absolute: bool,
    pub sequence_match: bool,
}

impl GradRow {
    pub fn passes(&self) -> bool {
        if !self.sequence_match {
            return true;
        }
        if self.absolute {
            self.error < GRADCHECK_ABS_FLOOR
        } else {
            self.error < GRADCHECK_REL_TOL
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub mode: Mode,
    pub rows: Vec<GradRow>,
}

impl GradcheckReport {
    /// Largest relative discrepancy among compared components.
    pub fn max_relative_error(&self) -> f64 {
        self.rows.iter().filter(|r| r.sequence_match && !r.absolute).map(|r| r.error).fold(0.0, f64::max)
    }

    pub fn all_sequences_match(&self) -> bool {
        self.rows.iter().all(|r| r.sequence_match)
    }

    pub fn passes(&self) -> bool {
        self.rows.iter().all(GradRow::passes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "param,ipa,fd,error,absolute,sequence_match")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                param_name(r.index),
                fmt9(r.ipa),
                fmt9(r.fd),
                fmt9(r.error),
                r.absolute,
                r.sequence_match
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>7} {:>16} {:>16} {:>11}  seq", "param", "ipa", "fd", "error")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>7} {:>16.9e} {:>16.9e} {:>11.3e}{} {}",
                param_name(r.index),
                r.ipa,
                r.fd,
                r.error,
                if r.absolute { "a" } else { " " },
                if r.sequence_match { "ok" } else { "changed" }
            )?;
        }
        write!(f, "max relative error {:.3e} ({})", self.max_relative_error(), if self.passes() { "pass" } else { "FAIL" })
    }
}

/// IPA gradient against the finite-difference oracle.
pub fn gradcheck(problem: &Problem, theta: &[EllipseParams], h: f64) -> Result<GradcheckReport> {
    let e = problem.evaluate_lean(theta, true)?;
    let ipa = e.gradient.unwrap_or_default();
    let fd = fd_oracle(problem, theta, h)?;
    let rows = ipa
        .iter()
        .zip(&fd)
        .enumerate()
        .map(|(index, (&ipa, c))| {
            let absolute = c.value.abs() < GRADCHECK_ABS_FLOOR;
            let diff = (ipa - c.value).abs();
            let error = if absolute { diff } else { diff / c.value.abs() };
            GradRow { index, ipa, fd: c.value, error, absolute, sequence_match: c.sequence_match }
        })
        .collect();
    Ok(GradcheckReport { mode: problem.options().mode, rows })
}

/// Writes `t, agent, x, y` at [`POLYLINE_SAMPLES`] uniform times.
pub fn write_polyline_csv(path: &Path, theta: &[EllipseParams], horizon: f64) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,agent,x,y")?;
    for (j, p) in theta.iter().enumerate() {
        for (t, s) in trajectory::sample_positions(p, horizon, POLYLINE_SAMPLES, 16) {
            writeln!(out, "{},{},{},{}", fmt9(t), j, fmt9(s.x), fmt9(s.y))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Simulate,
    Optimize,
    Gradcheck,
    Reproduce,
}

/// Command-line options after parsing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRequest {
    pub scenario: String,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub step: Option<f64>,
    pub lambda: Option<f64>,
    /// Print one line per iteration while optimizing.
    pub verbose: bool,
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub mode: Option<Mode>,
    /// Objective at the starting parameters, for optimization runs.
    pub initial_j: Option<f64>,
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub wall_time: f64,
    pub event_counts: BTreeMap<String, usize>,
    pub targets_visited: usize,
    pub n_targets: usize,
    pub theta_unchanged: Option<bool>,
    pub gradcheck: Option<GradcheckReport>,
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl RunReport {
    /// Whether the run met its own success condition.
    pub fn succeeded(&self) -> bool {
        let stop_ok = !matches!(self.stop, Some(StopReason::Failed(_)));
        stop_ok && self.gradcheck.as_ref().is_none_or(GradcheckReport::passes)
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== {} ==", self.label)?;
        if let Some(m) = self.mode {
            writeln!(f, "mode            {m}")?;
        }
        if let Some(j0) = self.initial_j {
            writeln!(f, "initial J       {j0:.6}")?;
        }
        writeln!(f, "J               {:.6}", self.j)?;
        writeln!(f, "J1              {:.6}", self.j1)?;
        writeln!(f, "J2              {:.6}", self.j2)?;
        if let Some(stop) = &self.stop {
            writeln!(f, "iterations      {} ({stop})", self.iterations)?;
        }
        if let Some(u) = self.theta_unchanged {
            writeln!(f, "theta unchanged {u}")?;
        }
        writeln!(f, "wall time       {:.2} s", self.wall_time)?;
        let counts: Vec<String> = self.event_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(f, "events          {}", counts.join(" "))?;
        writeln!(f, "targets visited {}/{}", self.targets_visited, self.n_targets)?;
        if let Some(g) = &self.gradcheck {
            writeln!(f, "{g}")?;
        }
        for n in &self.notes {
            writeln!(f, "note            {n}")?;
        }
        for p in &self.files {
            writeln!(f, "wrote           {}", p.display())?;
        }
        Ok(())
    }
}

fn event_counts(trace: &SimTrace) -> BTreeMap<String, usize> {
    [EventKind::VisitStart, EventKind::VisitEnd, EventKind::Empty, EventKind::Fill]
        .iter()
        .map(|k| (k.to_string(), trace.count(*k)))
        .collect()
}

fn apply_overrides(file: &mut ScenarioFile, req: &RunRequest) -> Result<()> {
    if let Some(seed) = req.seed {
        match file.random_layout.as_mut() {
            Some(l) => l.seed = seed,
            None => return Err(Error::InvalidParameter("--seed needs a scenario with a random layout".into())),
        }
    }
    if let Some(m) = req.mode {
        file.optimizer.mode = m;
    }
    if let Some(n) = req.max_iters {
        file.optimizer.max_iters = n;
    }
    if let Some(s) = req.step {
        file.optimizer.step = file.optimizer.step.with_eta0(s);
    }
    if let Some(l) = req.lambda {
        file.optimizer.lambda = l;
    }
    if let Some(o) = &req.out {
        file.output.dir = o.clone();
    }
    Ok(())
}

fn output_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn write_trace_files(
    trace: &SimTrace,
    theta: &[EllipseParams],
    horizon: f64,
    dir: &Path,
    paths: &OutputPaths,
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let p = dir.join(&paths.trace);
    trace.write_trace_csv(&p)?;
    files.push(p);
    let p = dir.join(&paths.events);
    trace.write_events_csv(&p)?;
    files.push(p);
    let p = dir.join(&paths.polyline);
    write_polyline_csv(&p, theta, horizon)?;
    files.push(p);
    Ok(())
}

fn simulate_run(label: &str, loaded: &LoadedScenario, dir: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let problem = Problem::new(&loaded.scenario, &loaded.options)?;
    let e = problem.evaluate(&loaded.theta0, false)?;
    let mut files = Vec::new();
    write_trace_files(&e.trace, &loaded.theta0, loaded.scenario.horizon(), dir, &loaded.output, &mut files)?;
    Ok(RunReport {
        label: label.to_string(),
        mode: Some(loaded.options.mode),
        initial_j: None,
        j: e.j,
        j1: e.j1,
        j2: e.j2,
        iterations: 0,
        stop: None,
        wall_time: start.elapsed().as_secs_f64(),
        event_counts: event_counts(&e.trace),
        targets_visited: e.trace.visited_targets(loaded.scenario.n_targets()).iter().filter(|&&v| v).count(),
        n_targets: loaded.scenario.n_targets(),
        theta_unchanged: None,
        gradcheck: None,
        files,
        notes: e.trace.warnings.clone(),
    })
}

fn optimize_run(label: &str, loaded: &LoadedScenario, dir: &Path, verbose: bool) -> Result<(RunReport, OptHistory)> {
    let start = Instant::now();
    let problem = Problem::new(&loaded.scenario, &loaded.options)?;
    let history = optimizer::optimize_with_progress(&problem, &loaded.theta0, |r| {
        if verbose {
            eprintln!(
                "iter {:>4}  J {:.6}  J1 {:.6}  J2 {:.6}  |g| {:.3e}  events {}",
                r.iter,
                r.j,
                r.j1,
                r.j2,
                r.grad_norm(),
                r.n_events
            );
        }
    })?;
    let last = history.last().clone();
    let e = problem.evaluate(&last.theta, false)?;
    let mut files = Vec::new();
    let p = dir.join(&loaded.output.history);
    history.write_csv(&p)?;
    files.push(p);
    write_trace_files(&e.trace, &last.theta, loaded.scenario.horizon(), dir, &loaded.output, &mut files)?;
    let unchanged = history.records.iter().all(|r| r.theta == history.first().theta);
    let report = RunReport {
        label: label.to_string(),
        mode: Some(history.mode),
        initial_j: Some(history.first().j),
        j: last.j,
        j1: last.j1,
        j2: last.j2,
        iterations: history.iterations(),
        stop: Some(history.stop.clone()),
        wall_time: start.elapsed().as_secs_f64(),
        event_counts: event_counts(&e.trace),
        targets_visited: e.trace.visited_targets(loaded.scenario.n_targets()).iter().filter(|&&v| v).count(),
        n_targets: loaded.scenario.n_targets(),
        theta_unchanged: Some(unchanged),
        gradcheck: None,
        files,
        notes: e.trace.warnings.clone(),
    };
    Ok((report, history))
}

fn gradcheck_run(label: &str, loaded: &LoadedScenario, dir: &Path, modes: &[Mode]) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &mode in modes {
        let start = Instant::now();
        let opts = OptOptions { mode, ..loaded.options.clone() };
        let problem = Problem::new(&loaded.scenario, &opts)?;
        let report = gradcheck(&problem, &loaded.theta0, FD_STEP)?;
        let e = problem.evaluate_lean(&loaded.theta0, false)?;
        let p = dir.join(format!("{}_{}", mode.to_string().to_lowercase(), loaded.output.gradcheck));
        report.write_csv(&p)?;
        reports.push(RunReport {
            label: format!("{label} gradcheck {mode}"),
            mode: Some(mode),
            initial_j: None,
            j: e.j,
            j1: e.j1,
            j2: e.j2,
            iterations: 0,
            stop: None,
            wall_time: start.elapsed().as_secs_f64(),
            event_counts: event_counts(&e.trace),
            targets_visited: e.trace.visited_targets(loaded.scenario.n_targets()).iter().filter(|&&v| v).count(),
            n_targets: loaded.scenario.n_targets(),
            theta_unchanged: None,
            gradcheck: Some(report),
            files: vec![p],
            notes: e.trace.warnings.clone(),
        });
    }
    Ok(reports)
}

/// Executes one command-line action.
pub fn run(action: Action, req: &RunRequest) -> Result<Vec<RunReport>> {
    match action {
        Action::Reproduce => reproduce(req),
        _ => {
            let mut file = resolve_scenario(&req.scenario)?;
            apply_overrides(&mut file, req)?;
            let loaded = file.build()?;
            let label = if loaded.name.is_empty() { req.scenario.clone() } else { loaded.name.clone() };
            let dir = output_dir(&loaded.output.dir)?;
            match action {
                Action::Simulate => Ok(vec![simulate_run(&label, &loaded, &dir)?]),
                Action::Optimize => Ok(vec![optimize_run(&label, &loaded, &dir, req.verbose)?.0]),
                Action::Gradcheck => {
                    let modes: Vec<Mode> = match req.mode {
                        Some(m) => vec![m],
                        None => vec![Mode::P1, Mode::P2],
                    };
                    gradcheck_run(&label, &loaded, &dir, &modes)
                }
                Action::Reproduce => unreachable!(),
            }
        }
    }
}

/// Runs a bundled experiment end to end. `fig3` runs both objectives from
/// the same event-free start; `fig4` runs the excitation objective.
fn reproduce(req: &RunRequest) -> Result<Vec<RunReport>> {
    let name = req.scenario.strip_suffix(".scenario").unwrap_or(&req.scenario);
    let base = req.out.clone().unwrap_or_else(|| PathBuf::from("out")).join(name);
    let modes: Vec<Mode> = match (name, req.mode) {
        (_, Some(m)) => vec![m],
        ("fig3", None) => vec![Mode::P1, Mode::P2],
        ("fig4", None) => vec![Mode::P2],
        _ => return Err(Error::InvalidParameter(format!("unknown experiment '{name}', expected fig3 or fig4"))),
    };
    let mut reports = Vec::new();
    for mode in modes {
        let mut file = resolve_scenario(name)?;
        let sub = RunRequest { mode: Some(mode), out: Some(base.join(mode.to_string().to_lowercase())), ..req.clone() };
        apply_overrides(&mut file, &sub)?;
        let loaded = file.build()?;
        let dir = output_dir(&loaded.output.dir)?;
        let (mut report, _) = optimize_run(&format!("{name} {mode}"), &loaded, &dir, req.verbose)?;
        match (name, mode) {
            ("fig3", Mode::P2) => report.notes.push("reference values: J1* = 0.0859, J* = 0.2128, bound 0.0739".into()),
            ("fig4", Mode::P2) => report.notes.push("reference values (different layout): J1* = 0.1004, J* = 0.2979".into()),
            _ => {}
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_load() {
        for (name, _) in BUNDLED {
            let loaded = resolve_scenario(name).and_then(|f| f.build());
            assert!(loaded.is_ok(), "{name}: {loaded:?}");
        }
        assert!(bundled("fig3.scenario").is_some());
        assert!(bundled("nope").is_none());
    }

    #[test]
    fn fig3_parameters() {
        let l = resolve_scenario("fig3").unwrap().build().unwrap();
        assert_eq!(l.scenario.n_targets(), 7);
        assert_eq!(l.scenario.n_agents(), 1);
        assert_eq!(l.scenario.horizon(), 50.0);
        for t in l.scenario.targets() {
            assert_eq!((t.range_r, t.sigma, t.mu_for(0), t.alpha, t.x0), (0.2, 0.5, 100.0, 1.0, 0.0));
        }
    }

    #[test]
    fn fig4_parameters() {
        let l = resolve_scenario("fig4").unwrap().build().unwrap();
        assert_eq!(l.scenario.n_targets(), 7);
        assert_eq!(l.scenario.n_agents(), 2);
        assert_eq!(l.scenario.horizon(), 50.0);
        for t in l.scenario.targets() {
            assert_eq!((t.range_r, t.sigma, t.mu_for(0), t.mu_for(1), t.alpha), (0.5, 0.5, 10.0, 10.0, 1.0));
            assert!((0.0..=10.0).contains(&t.location.x) && (0.0..=10.0).contains(&t.location.y));
        }
    }

    #[test]
    fn overlapping_disks_are_a_load_error() {
        let text = r#"
            horizon_T = 10.0
            targets = [
                { x = 0.0, y = 0.0, r = 0.2, sigma = 0.5, mu = 100.0 },
                { x = 0.3, y = 0.0, r = 0.2, sigma = 0.5, mu = 100.0 },
                { x = 0.0, y = 1.0, r = 0.2, sigma = 0.5, mu = 100.0 },
            ]
            agents = [{ A = 0.0, B = 0.0, a = 1.0, b = 1.0, phi = 0.0 }]
        "#;
        let err = ScenarioFile::parse(text, "inline").unwrap().build().unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("overlap")), "{err}");
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = ScenarioFile::parse("horizon_T = \n", "broken.scenario").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken.scenario") && msg.contains("line 1"), "{msg}");
        let err = ScenarioFile::parse("horizon_T = 1.0\nagents = []\nbogus = 3\n", "x").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn defaults_are_applied() {
        let text = r#"
            horizon_T = 10.0
            targets = [
                { x = 0.0, y = 0.0, r = 0.2, sigma = 0.5, mu = [100.0, 50.0] },
                { x = 1.0, y = 0.0, r = 0.2, sigma = 0.5, mu = 100.0 },
                { x = 0.0, y = 1.0, r = 0.2, sigma = 0.5, mu = 100.0, x0 = 2.0, alpha = 3.0 },
            ]
            agents = [{ A = 0.0, B = 0.0, a = 1.0, b = 1.0, phi = 0.0 }, { A = 1.0, B = 0.0, a = 1.0, b = 1.0, phi = 0.0 }]
        "#;
        let l = ScenarioFile::parse(text, "inline").unwrap().build().unwrap();
        let t = l.scenario.targets();
        assert_eq!((t[0].x0, t[0].alpha, t[0].mu_for(1)), (0.0, 1.0, 50.0));
        assert_eq!((t[2].x0, t[2].alpha), (2.0, 3.0));
        assert_eq!(l.options, OptOptions::default());
        assert_eq!(l.options.lambda, 1.0);
    }

    #[test]
    fn layout_generation_is_deterministic_and_disjoint() {
        let spec = RandomLayout { count: 7, box_size: 10.0, r: 0.5, alpha: 1.0, sigma: 0.5, mu: MuSpec::Shared(10.0), seed: 11 };
        let a = random_layout(&spec).unwrap();
        assert_eq!(a, random_layout(&spec).unwrap());
        assert!(Scenario::new(a.clone(), 2, 50.0).is_ok());
        let b = random_layout(&RandomLayout { seed: 12, ..spec.clone() }).unwrap();
        assert_ne!(a, b);
        let crowded = RandomLayout { count: 500, ..spec };
        assert!(random_layout(&crowded).is_err());
    }

    #[test]
    fn central_differences_on_a_quadratic() {
        // f(x) = x₀² + 3 x₀ x₁ − 2 x₁²
        let f = |x: &[f64]| Ok((x[0] * x[0] + 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1], ()));
        let g = central_differences(f, &[0.7, -1.3], 1e-3, 3).unwrap();
        assert!((g[0].value - (1.4 - 3.9)).abs() < 1e-10);
        assert!((g[1].value - (2.1 + 5.2)).abs() < 1e-10);
        assert!(g.iter().all(|c| c.sequence_match && c.h == 1e-3));
    }

    #[test]
    fn central_differences_halve_on_signature_change() {
        let f = |x: &[f64]| Ok((x[0], x[0] > 0.3));
        let g = central_differences(f, &[0.285], 0.02, 3).unwrap();
        assert!(g[0].sequence_match);
        assert_eq!(g[0].h, 0.01);
        let g = central_differences(f, &[0.2999], 0.02, 3).unwrap();
        assert!(!g[0].sequence_match);
    }

    #[test]
    fn parameter_names() {
        assert_eq!(param_name(0), "A_0");
        assert_eq!(param_name(7), "a_1");
        assert_eq!(param_name(9), "phi_1");
    }
}
