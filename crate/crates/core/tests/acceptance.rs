//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use ipa_harvest::excitation::{self, ExcitationField};
use ipa_harvest::geometry::{self, ConvexPolygon, Point2};
use ipa_harvest::harness::{self, FD_STEP};
use ipa_harvest::optimizer::{self, Mode, OptOptions, Problem, StepRule};
use ipa_harvest::plant::{EventKind, Plant, Scenario, SimOptions, SimTrace, Target};
use ipa_harvest::trajectory::{self, EllipseParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_RELATIVE_TOL: f64 = 5e-3;
const C1_EXPECTED: f64 = 16.3956;
const C1_BUDGET: Duration = Duration::from_secs(1);
const C2_TOL: f64 = 1e-2;
const C2_CONFIGS: usize = 5;
const C2_BUDGET: Duration = Duration::from_secs(10);
const C3_BUDGET: Duration = Duration::from_secs(120);
const C4_ITERATIONS: usize = 50;
const C5_J1_RANGE: (f64, f64) = (0.0739, 0.15);
const C5_MAX_ITERS: usize = 1000;
const C5_BUDGET: Duration = Duration::from_secs(15 * 60);
const C6_MAX_RATIO: f64 = 0.5;
const C6_BUDGET: Duration = Duration::from_secs(20 * 60);
const C7_SPEED_TOL: f64 = 1e-6;
const C7_HALVING_TOL: f64 = 1e-3;
const C7_LINEAR_TOL: f64 = 1e-12;
const C8_TOL: f64 = 1e-2;
const C8_REFINEMENT: f64 = 4.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn regular_polygon(n: usize, radius: f64) -> ConvexPolygon {
    let pts: Vec<Point2> = (0..n).map(|k| Point2::from_angle(2.0 * PI * k as f64 / n as f64) * radius).collect();
    geometry::convex_hull(&pts).unwrap()
}

fn target(x: f64, y: f64, r: f64, sigma: f64, mu: f64) -> Target {
    Target::new(Point2::new(x, y), r, 1.0, sigma, vec![mu])
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let hull = regular_polygon(64, 1.0);
    let c = excitation::c_constants(&hull, &[target(0.0, 0.0, 0.2, 0.5, 1.0)]).unwrap()[0];
    let exact = 2.0 * PI * (1.0 + 5.0_f64.ln());
    let rel = (c - exact).abs() / exact;
    let elapsed = start.elapsed();
    outcome(
        rel < C1_RELATIVE_TOL && (exact - C1_EXPECTED).abs() < 1e-4 && elapsed < C1_BUDGET,
        format!("c = {c:.4}, closed form {exact:.4}, rel err {rel:.2e} (tol {C1_RELATIVE_TOL:e}), {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let square = [Point2::new(0.0, 0.0), Point2::new(10.0, 0.0), Point2::new(10.0, 10.0), Point2::new(0.0, 10.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for _ in 0..C2_CONFIGS {
        let n = rng.gen_range(2..=5);
        let mut targets: Vec<Target> = Vec::new();
        while targets.len() < n {
            let r = rng.gen_range(0.2..0.8);
            let p = Point2::new(rng.gen_range(1.0..9.0), rng.gen_range(1.0..9.0));
            if targets.iter().all(|t| t.location.distance(p) > t.range_r + r) {
                targets.push(Target::new(p, r, rng.gen_range(0.5..2.0), 0.5, vec![10.0]));
            }
        }
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let field = ExcitationField::new(&targets, &square, None).unwrap();
        worst = worst.max(excitation::verify_density_identity(&field, &targets, &x).unwrap());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < C2_TOL && elapsed < C2_BUDGET,
        format!("worst residual {worst:.2e} over {C2_CONFIGS} configurations (tol {C2_TOL:e}), {elapsed:.2?}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let loaded = harness::resolve_scenario("two-target").unwrap().build().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for mode in [Mode::P1, Mode::P2] {
        let opts = OptOptions { mode, ..loaded.options.clone() };
        let problem = Problem::new(&loaded.scenario, &opts).unwrap();
        let report = harness::gradcheck(&problem, &loaded.theta0, FD_STEP).unwrap();
        let events = problem.evaluate_lean(&loaded.theta0, false).unwrap().trace.events.len();
        pass &= report.passes() && report.all_sequences_match() && events > 0;
        parts.push(format!(
            "{mode}: max rel err {:.2e}, sequences {}, {events} events",
            report.max_relative_error(),
            if report.all_sequences_match() { "preserved" } else { "changed" }
        ));
    }
    let elapsed = start.elapsed();
    outcome(pass && elapsed < C3_BUDGET, format!("{}; {elapsed:.2?}", parts.join("; ")))
}

fn fig3() -> harness::LoadedScenario {
    harness::resolve_scenario("fig3").unwrap().build().unwrap()
}

fn criterion_4() -> Outcome {
    let loaded = fig3();
    let mut pass = true;
    let mut parts = Vec::new();
    let rules = [StepRule::default(), StepRule::Fixed { eta0: 0.5 }];
    for step in rules {
        let opts = OptOptions {
            mode: Mode::P1,
            step,
            grad_tol: 0.0,
            rel_tol: 0.0,
            max_iters: C4_ITERATIONS,
            ..loaded.options.clone()
        };
        let h = optimizer::optimize(&loaded.scenario, &loaded.theta0, &opts).unwrap();
        let bits0: Vec<u64> = trajectory::flatten(&loaded.theta0).iter().map(|v| v.to_bits()).collect();
        let zero_grad = h.records.iter().all(|r| r.gradient.iter().all(|&g| g == 0.0));
        let unchanged = h
            .records
            .iter()
            .all(|r| trajectory::flatten(&r.theta).iter().map(|v| v.to_bits()).collect::<Vec<_>>() == bits0);
        let no_events = h.records.iter().all(|r| r.n_events == 0);
        pass &= zero_grad && unchanged && no_events && h.iterations() == C4_ITERATIONS;
        parts.push(format!(
            "{}: {} iterations, zero gradient {zero_grad}, theta bitwise unchanged {unchanged}",
            match step {
                StepRule::Fixed { .. } => "fixed step",
                _ => "backtracking",
            },
            h.iterations()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn visited_all(trace: &SimTrace, n: usize) -> bool {
    trace.visited_targets(n).iter().all(|&v| v)
}

fn criterion_5() -> (Outcome, Vec<EllipseParams>) {
    let start = Instant::now();
    let loaded = fig3();
    let opts = OptOptions { mode: Mode::P2, max_iters: C5_MAX_ITERS, ..loaded.options.clone() };
    let h = optimizer::optimize(&loaded.scenario, &loaded.theta0, &opts).unwrap();
    let last = h.last().clone();
    let trace = Plant::new(&loaded.scenario, SimOptions::default()).unwrap().simulate(&last.theta).unwrap();
    let all = visited_all(&trace, 7);
    let in_range = (C5_J1_RANGE.0..=C5_J1_RANGE.1).contains(&last.j1);
    let elapsed = start.elapsed();
    let o = outcome(
        all && in_range && h.iterations() <= C5_MAX_ITERS && elapsed < C5_BUDGET,
        format!(
            "J1 = {:.4} (range [{}, {}]), J = {:.4}, all 7 visited {all}, {} iterations ({}), {elapsed:.1?}",
            last.j1,
            C5_J1_RANGE.0,
            C5_J1_RANGE.1,
            last.j,
            h.iterations(),
            h.stop
        ),
    );
    (o, last.theta)
}

fn criterion_6() -> (Outcome, Scenario, Vec<EllipseParams>) {
    let start = Instant::now();
    let loaded = harness::resolve_scenario("fig4").unwrap().build().unwrap();
    let h = optimizer::optimize(&loaded.scenario, &loaded.theta0, &loaded.options).unwrap();
    let (j0, last) = (h.first().j, h.last().clone());
    let trace = Plant::new(&loaded.scenario, SimOptions::default()).unwrap().simulate(&last.theta).unwrap();
    let all = visited_all(&trace, loaded.scenario.n_targets());
    let ratio = last.j / j0;
    let elapsed = start.elapsed();
    let o = outcome(
        all && ratio <= C6_MAX_RATIO && elapsed < C6_BUDGET,
        format!(
            "J {j0:.4} -> {:.4} (ratio {ratio:.3}, max {C6_MAX_RATIO}), J1 = {:.4}, all visited {all}, {} iterations, {elapsed:.1?}",
            last.j,
            last.j1,
            h.iterations()
        ),
    );
    (o, loaded.scenario, last.theta)
}

fn alternation_holds(trace: &SimTrace, n_targets: usize, n_agents: usize) -> bool {
    for i in 0..n_targets {
        for j in 0..n_agents {
            let mut inside = false;
            for e in trace.events.iter().filter(|e| e.target == i && e.agent == Some(j)) {
                match e.kind {
                    EventKind::VisitStart if !inside => inside = true,
                    EventKind::VisitEnd if inside => inside = false,
                    EventKind::VisitStart | EventKind::VisitEnd => return false,
                    _ => {}
                }
            }
        }
        let mut empty = false;
        for e in trace.events.iter().filter(|e| e.target == i) {
            match e.kind {
                EventKind::Empty if !empty => empty = true,
                EventKind::Fill if empty => empty = false,
                EventKind::Empty | EventKind::Fill => return false,
                _ => {}
            }
        }
    }
    true
}

fn criterion_7(cases: &[(Scenario, Vec<EllipseParams>)]) -> Outcome {
    let mut parts = Vec::new();

    let ellipses = [
        EllipseParams::new(0.0, 0.0, 1.0, 1.0, 0.0),
        EllipseParams::new(1.0, -2.0, 3.0, 0.2, 0.7),
        EllipseParams::new(-0.5, 0.5, 0.1, 2.5, 2.9),
    ];
    let mut speed_err = 0.0_f64;
    let mut cases_speed: Vec<EllipseParams> = ellipses.to_vec();
    cases_speed.extend(cases.iter().flat_map(|(_, th)| th.iter().copied()));
    for p in &cases_speed {
        for k in 0..5000 {
            let rho = 2.0 * PI * k as f64 / 5000.0;
            speed_err = speed_err.max((trajectory::velocity(p, rho).norm() - 1.0).abs());
        }
    }
    let speed_ok = speed_err <= C7_SPEED_TOL;
    parts.push(format!("max | |v| - 1 | = {speed_err:.1e}"));

    let mut nonneg = true;
    let mut alternation = true;
    let mut halving = 0.0_f64;
    for (sc, th) in cases {
        let plant = Plant::new(sc, SimOptions::default()).unwrap();
        let tr = plant.simulate(th).unwrap();
        nonneg &= tr.x.iter().flatten().all(|&v| v >= 0.0);
        alternation &= alternation_holds(&tr, sc.n_targets(), sc.n_agents());
        let fine = Plant::new(sc, SimOptions { n_steps: 2 * SimOptions::default().n_steps, ..SimOptions::default() })
            .unwrap()
            .simulate(th)
            .unwrap();
        halving = halving.max((fine.j1_integral - tr.j1_integral).abs() / tr.j1_integral.abs());
    }
    parts.push(format!("x >= 0 {nonneg}, alternation {alternation}, step-halving dJ1/J1 = {halving:.1e}"));

    let (sc, th) = &cases[0];
    let still: Vec<Target> = sc
        .targets()
        .iter()
        .map(|t| Target { mu: vec![0.0], x0: 0.25, ..t.clone() })
        .collect();
    let still = Scenario::new(still, sc.n_agents(), sc.horizon()).unwrap();
    let tr = Plant::new(&still, SimOptions::default()).unwrap().simulate(th).unwrap();
    let linear_err = still
        .targets()
        .iter()
        .zip(&tr.final_x)
        .map(|(t, &x)| (x - (t.x0 + t.sigma * still.horizon())).abs() / (t.x0 + t.sigma * still.horizon()))
        .fold(0.0, f64::max);
    let visited = visited_all(&tr, still.n_targets());
    let linear_ok = linear_err <= C7_LINEAR_TOL && visited;
    parts.push(format!("mu = 0 growth rel err {linear_err:.1e} with every disk crossed {visited}"));

    outcome(
        speed_ok && nonneg && alternation && halving < C7_HALVING_TOL && linear_ok,
        parts.join("; "),
    )
}

fn inside(poly: &ConvexPolygon, w: Point2) -> bool {
    poly.edges().all(|(a, b)| (b - a).cross(w - a) >= 0.0)
}

fn brute_force_j2(hull: &ConvexPolygon, targets: &[Target], positions: &[Point2], x: &[f64], h: f64) -> f64 {
    let (mut lo, mut hi) = (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN));
    for v in hull.vertices() {
        lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
        hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
    }
    let nx = ((hi.x - lo.x) / h).ceil() as usize;
    let ny = ((hi.y - lo.y) / h).ceil() as usize;
    let mut acc = 0.0;
    for ix in 0..nx {
        for iy in 0..ny {
            let w = Point2::new(lo.x + (ix as f64 + 0.5) * h, lo.y + (iy as f64 + 0.5) * h);
            if !inside(hull, w) {
                continue;
            }
            let cost: f64 = positions.iter().map(|&s| (s - w).norm_sq()).sum();
            let density: f64 = targets
                .iter()
                .zip(x)
                .map(|(t, &xi)| t.alpha * xi / w.distance(t.location).max(t.range_r))
                .sum();
            acc += cost * density * h * h;
        }
    }
    acc
}

fn criterion_8() -> Outcome {
    let ring: Vec<Target> = (0..7)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 7.0;
            target(1.5 * a.cos(), 1.5 * a.sin(), 0.2, 0.5, 100.0)
        })
        .collect();
    type Config = (Vec<Target>, Vec<Point2>, Vec<Point2>, Vec<f64>);
    let configs: Vec<Config> = vec![
        (ring, vec![], vec![Point2::new(0.3, -0.2)], vec![1.0, 2.0, 0.5, 3.0, 0.0, 1.5, 2.5]),
        (
            vec![target(2.0, 3.0, 0.5, 0.5, 10.0), target(7.0, 2.0, 0.5, 0.5, 10.0), target(5.0, 8.0, 0.5, 0.5, 10.0)],
            vec![Point2::new(0.0, 0.0), Point2::new(10.0, 0.0), Point2::new(10.0, 10.0), Point2::new(0.0, 10.0)],
            vec![Point2::new(3.0, 4.0), Point2::new(8.0, 7.0)],
            vec![4.0, 1.0, 2.0],
        ),
        (
            vec![target(0.0, 0.0, 0.3, 0.5, 5.0), target(4.0, 0.5, 0.3, 0.5, 5.0), target(1.0, 3.0, 0.3, 0.5, 5.0)],
            vec![],
            vec![Point2::new(1.5, 1.0)],
            vec![0.7, 1.3, 2.2],
        ),
    ];
    let mut worst = 0.0_f64;
    for (targets, region, positions, x) in &configs {
        let field = ExcitationField::new(targets, region, None).unwrap();
        let module = field.j2_fast(positions, x);
        let h = geometry::default_resolution(field.hull()) / C8_REFINEMENT;
        let brute = brute_force_j2(field.hull(), targets, positions, x, h);
        worst = worst.max((module - brute).abs() / brute.abs());
    }
    outcome(worst < C8_TOL, format!("worst relative gap {worst:.2e} over {} configurations (tol {C8_TOL:e})", configs.len()))
}

fn report(n: usize, name: &str, o: &Outcome, failures: &mut usize) {
    println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        *failures += 1;
    }
}

fn main() {
    let mut failures = 0;
    report(1, "log-form constant on a 64-gon", &criterion_1(), &mut failures);
    report(2, "density identity", &criterion_2(), &mut failures);
    report(3, "IPA vs finite differences", &criterion_3(), &mut failures);
    report(4, "P1 stall on an event-free start", &criterion_4(), &mut failures);
    let (o5, fig3_final) = criterion_5();
    report(5, "P2 excites every target (ring)", &o5, &mut failures);
    let (o6, fig4_scenario, fig4_final) = criterion_6();
    report(6, "P2 two-agent random layout", &o6, &mut failures);
    let two = harness::resolve_scenario("two-target").unwrap().build().unwrap();
    let cases = vec![
        (fig3().scenario, fig3_final),
        (fig4_scenario, fig4_final),
        (two.scenario, two.theta0),
    ];
    report(7, "plant invariants", &criterion_7(&cases), &mut failures);
    report(8, "J2 quadrature vs brute-force grid", &criterion_8(), &mut failures);
    println!("acceptance: {} of 8 criteria passed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
