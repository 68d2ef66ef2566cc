use std::f64::consts::PI;

use ipa_harvest::excitation::ExcitationField;
use ipa_harvest::geometry::Point2;
use ipa_harvest::harness::{self, FD_STEP};
use ipa_harvest::optimizer::{Mode, OptOptions, Problem};
use ipa_harvest::plant::{EventKind, Plant, Scenario, SimOptions, Target};
use ipa_harvest::trajectory::{self, EllipseParams};

const REL_TOL: f64 = 1e-2;

fn ring(n: usize, radius: f64, r: f64, mu: f64) -> Vec<Target> {
    (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            Target::new(Point2::new(radius * a.cos(), radius * a.sin()), r, 1.0, 0.5, vec![mu])
        })
        .collect()
}

fn assert_gradcheck(scenario: &Scenario, theta: &[EllipseParams], mode: Mode) -> harness::GradcheckReport {
    let problem = Problem::new(scenario, &OptOptions { mode, ..Default::default() }).unwrap();
    let report = harness::gradcheck(&problem, theta, FD_STEP).unwrap();
    assert!(report.all_sequences_match(), "{report}");
    assert!(report.passes(), "{report}");
    assert!(report.max_relative_error() < REL_TOL, "{report}");
    report
}

#[test]
fn single_target_crossing_matches_fd() {
    let targets = vec![
        Target::new(Point2::new(1.0, 0.0), 0.3, 1.0, 0.5, vec![100.0]),
        Target::new(Point2::new(-5.0, 5.0), 0.3, 1.0, 0.5, vec![100.0]),
        Target::new(Point2::new(-5.0, -5.0), 0.3, 1.0, 0.5, vec![100.0]),
    ];
    let sc = Scenario::new(targets, 1, 7.0).unwrap();
    let theta = [EllipseParams::new(0.1, -0.5, 1.0, 1.1, 0.2)];
    let trace = Plant::new(&sc, SimOptions::default()).unwrap().simulate(&theta).unwrap();
    assert!(trace.count(EventKind::VisitStart) > 0 && trace.count(EventKind::Empty) > 0);
    let report = assert_gradcheck(&sc, &theta, Mode::P1);
    assert!(report.rows.iter().any(|r| r.ipa.abs() > 1e-3));
}

#[test]
fn sensitivity_rows_match_fd_along_a_crossing() {
    let targets = vec![
        Target::new(Point2::new(1.0, 0.0), 0.3, 1.0, 0.5, vec![0.5]),
        Target::new(Point2::new(-5.0, 5.0), 0.3, 1.0, 0.5, vec![0.5]),
        Target::new(Point2::new(-5.0, -5.0), 0.3, 1.0, 0.5, vec![0.5]),
    ];
    let sc = Scenario::new(targets, 1, 7.0).unwrap();
    let theta = [EllipseParams::new(0.1, -0.5, 1.0, 1.1, 0.2)];
    let opts = SimOptions { record_sensitivities: true, ..Default::default() };
    let plant = Plant::new(&sc, opts).unwrap();
    let tr = plant.simulate(&theta).unwrap();
    let base = trajectory::flatten(&theta);
    let h = 1e-6;
    for k in 0..base.len() {
        let mut up = base.clone();
        let mut dn = base.clone();
        up[k] += h;
        dn[k] -= h;
        let tu = plant.simulate(&trajectory::unflatten(&up)).unwrap();
        let td = plant.simulate(&trajectory::unflatten(&dn)).unwrap();
        for s in (0..tr.times.len()).step_by(250) {
            let fd = (tu.x[s][0] - td.x[s][0]) / (2.0 * h);
            let ipa = tr.x_prime[s][k];
            assert!((ipa - fd).abs() <= 1e-4 + REL_TOL * fd.abs(), "param {k} t = {}: ipa {ipa} fd {fd}", tr.times[s]);
        }
    }
}

#[test]
fn two_agent_handoff_matches_fd() {
    let sc = Scenario::new(ring(5, 1.5, 0.5, 10.0), 2, 20.0).unwrap();
    let theta = [EllipseParams::new(0.0, 0.0, 1.5, 1.3, 0.1), EllipseParams::new(0.1, 0.05, 1.4, 1.6, 0.7)];
    let trace = Plant::new(&sc, SimOptions::default()).unwrap().simulate(&theta).unwrap();
    let mut open = [[false; 2]; 5];
    let mut handoffs = 0;
    for e in &trace.events {
        match (e.kind, e.agent) {
            (EventKind::VisitStart, Some(j)) => open[e.target][j] = true,
            (EventKind::VisitEnd, Some(j)) => {
                open[e.target][j] = false;
                if open[e.target][1 - j] {
                    handoffs += 1;
                }
            }
            _ => {}
        }
    }
    assert!(handoffs > 0, "scenario should exercise a hand-off");
    for mode in [Mode::P1, Mode::P2] {
        assert_gradcheck(&sc, &theta, mode);
    }
}

#[test]
fn excitation_gradient_on_one_agent_matches_fd() {
    let sc = Scenario::new(ring(7, 1.5, 0.2, 100.0), 1, 50.0).unwrap();
    for theta in [[EllipseParams::new(0.05, -0.03, 1.45, 1.35, 0.3)], [EllipseParams::new(0.05, -0.03, 0.8, 0.6, 0.3)]] {
        let report = assert_gradcheck(&sc, &theta, Mode::P2);
        assert!(report.rows.iter().all(|r| r.ipa != 0.0));
    }
}

#[test]
fn event_free_p1_oracle_is_zero() {
    let loaded = harness::resolve_scenario("fig3").unwrap().build().unwrap();
    let problem = Problem::new(&loaded.scenario, &OptOptions { mode: Mode::P1, ..Default::default() }).unwrap();
    let fd = harness::fd_oracle(&problem, &loaded.theta0, FD_STEP).unwrap();
    assert!(fd.iter().all(|c| c.value.abs() < 1e-12 && c.sequence_match));
    let e = problem.evaluate(&loaded.theta0, true).unwrap();
    assert!(e.gradient.unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn zero_weights_give_a_zero_gradient() {
    let targets: Vec<Target> = ring(5, 1.5, 0.3, 10.0).into_iter().map(|t| Target { alpha: 0.0, ..t }).collect();
    let sc = Scenario::new(targets, 1, 10.0).unwrap();
    let theta = [EllipseParams::new(0.0, 0.0, 1.5, 1.4, 0.2)];
    for mode in [Mode::P1, Mode::P2] {
        let problem = Problem::new(&sc, &OptOptions { mode, ..Default::default() }).unwrap();
        let e = problem.evaluate(&theta, true).unwrap();
        assert!(e.trace.count(EventKind::VisitStart) > 0);
        assert!(e.gradient.unwrap().iter().all(|&g| g == 0.0), "{mode}");
    }
}

#[test]
fn single_target_excitation_matches_brute_force() {
    let t = vec![Target::new(Point2::new(0.0, 0.0), 0.2, 1.0, 0.5, vec![1.0])];
    let square = [Point2::new(-1.0, -1.0), Point2::new(1.0, -1.0), Point2::new(1.0, 1.0), Point2::new(-1.0, 1.0)];
    let field = ExcitationField::new(&t, &square, None).unwrap();
    let module = field.j2_fast(&[Point2::new(0.0, 0.0)], &[1.0]);
    let h = ipa_harvest::geometry::default_resolution(field.hull()) / 4.0;
    let n = (2.0 / h).ceil() as usize;
    let h = 2.0 / n as f64;
    let mut brute = 0.0;
    for ix in 0..n {
        for iy in 0..n {
            let w = Point2::new(-1.0 + (ix as f64 + 0.5) * h, -1.0 + (iy as f64 + 0.5) * h);
            brute += w.norm_sq() / w.norm().max(0.2) * h * h;
        }
    }
    assert!((module - brute).abs() / brute < 1e-2, "{module} vs {brute}");
}
