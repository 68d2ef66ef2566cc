//! Event-driven sensitivity calculus for the data-harvesting plant.
//!
//! Between events the target sensitivities `x′_i = ∂x_i/∂θ` follow the
//! variational equation of the active flow; at events they jump by
//! `[f(τ⁻) − f(τ⁺)]·τ′`. With a continuous proximity function the only
//! non-trivial jumps are a target emptying (`x′_i ← 0`) and a visit ending
//! while another in-range agent takes over the connection.

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::plant::{proximity, EventKind, SimTrace, Target};
use crate::trajectory::{Jacobian, PARAMS_PER_AGENT};

/// Smallest admissible `|∂g/∂x · f|` when solving for `τ′`.
pub const TANGENTIAL_TOL: f64 = 1e-8;

/// Flow regime of one target between events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// No agent connected: `ẋ = σ`.
    Idle,
    /// Buffer held at zero: `ẋ = 0`.
    EmptyHeld,
    /// Agent `agent` is connected and the buffer is non-empty.
    Collecting { agent: usize },
}

/// `∂x_i/∂θ` for every target plus `∂ρ_j/∂θ_j` for every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    pub n_params: usize,
    /// Row-major `M × n_params`.
    pub x_prime: Vec<f64>,
    pub rho_sens: Vec<[f64; PARAMS_PER_AGENT]>,
}

impl SensitivityState {
    pub fn zeros(n_targets: usize, n_agents: usize) -> Self {
        let n_params = n_agents * PARAMS_PER_AGENT;
        Self {
            n_params,
            x_prime: vec![0.0; n_targets * n_params],
            rho_sens: vec![[0.0; PARAMS_PER_AGENT]; n_agents],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x_prime[i * self.n_params..(i + 1) * self.n_params]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.x_prime[i * self.n_params..(i + 1) * self.n_params]
    }
}

/// Derivative of an event time with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTimeDerivative {
    pub tau_prime: Vec<f64>,
}

impl EventTimeDerivative {
    /// Exogenous events do not move with `θ`.
    pub fn exogenous(n_params: usize) -> Self {
        Self { tau_prime: vec![0.0; n_params] }
    }
}

/// Rate of the sensitivity row of one target.
///
/// While agent `j` collects, `ẋ′_i = −μ_ij ∇_s p · s′_j` with
/// `∇_s p = −(s_j − w_i)/(r_i d_ij)`; otherwise the row is frozen. Only agent
/// `j`'s five columns can be non-zero. The collecting branch is the smooth
/// continuation of the in-range expression, so integrator stages that land
/// just past the range boundary before a visit end is resolved see no kink.
pub fn xprime_flow(mode: TargetMode, target: &Target, agent_position: Point2, jacobian: &Jacobian, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if let TargetMode::Collecting { agent } = mode {
        let u = agent_position - target.location;
        let d = u.norm();
        if d > 0.0 {
            let coeff = target.mu_for(agent) / (target.range_r * d);
            let cols = &mut out[agent * PARAMS_PER_AGENT..(agent + 1) * PARAMS_PER_AGENT];
            for (o, col) in cols.iter_mut().zip(jacobian) {
                *o = coeff * u.dot(*col);
            }
        }
    }
}

/// The guard whose zero crossing defined an event, with what is needed to
/// differentiate its crossing time.
#[derive(Debug, Clone, Copy)]
pub enum GuardCrossing<'a> {
    /// `g = ‖s_j − w_i‖ − r_i` (visit start or end).
    Visit {
        target: Point2,
        agent: usize,
        position: Point2,
        velocity: Point2,
        jacobian: &'a Jacobian,
        n_params: usize,
    },
    /// `g = x_i` reaching zero; `flow` is `ẋ_i` just before the event.
    Drain { x_prime_row: &'a [f64], flow: f64 },
    /// Clock-driven event.
    Exogenous { n_params: usize },
}

/// `τ′ = −(∂g/∂x · x′(τ⁻) + ∂g/∂θ) / (∂g/∂x · f(τ⁻))`.
///
/// For a visit guard this is `−(û·s′_j)/(û·ṡ_j)` with `û` the unit vector from
/// the target to the agent.
pub fn event_time_derivative(guard: GuardCrossing<'_>) -> Result<EventTimeDerivative> {
    match guard {
        GuardCrossing::Visit { target, agent, position, velocity, jacobian, n_params } => {
            let u = position - target;
            let d = u.norm();
            let u_hat = if d > 0.0 { u * (1.0 / d) } else { u };
            let denom = u_hat.dot(velocity);
            if denom.abs() < TANGENTIAL_TOL {
                return Err(Error::TangentialCrossing { denominator: denom });
            }
            let mut tau_prime = vec![0.0; n_params];
            for (c, col) in jacobian.iter().enumerate() {
                tau_prime[agent * PARAMS_PER_AGENT + c] = -u_hat.dot(*col) / denom;
            }
            Ok(EventTimeDerivative { tau_prime })
        }
        GuardCrossing::Drain { x_prime_row, flow } => {
            if flow.abs() < TANGENTIAL_TOL {
                return Err(Error::TangentialCrossing { denominator: flow });
            }
            Ok(EventTimeDerivative { tau_prime: x_prime_row.iter().map(|v| -v / flow).collect() })
        }
        GuardCrossing::Exogenous { n_params } => Ok(EventTimeDerivative::exogenous(n_params)),
    }
}

/// Agent that takes over a target when the connected agent leaves its range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Handoff {
    pub mu: f64,
    pub proximity: f64,
}

impl Handoff {
    pub fn new(target: &Target, agent: usize, distance: f64) -> Self {
        Self { mu: target.mu_for(agent), proximity: proximity(distance, target.range_r) }
    }
}

/// Sensitivity jump of one target row at an event.
///
/// * emptying: the row is reset to zero;
/// * visit end with a hand-off to agent `l`: the outgoing flow is `σ` (the
///   leaving agent's proximity is zero on the boundary) and the incoming flow
///   is `σ − μ_il p_il`, so the row gains `μ_il p_il τ′`;
/// * everything else leaves the row untouched.
pub fn apply_jump(kind: EventKind, handoff: Option<Handoff>, tau: &EventTimeDerivative, row: &mut [f64]) {
    match (kind, handoff) {
        (EventKind::Empty, _) => row.iter_mut().for_each(|v| *v = 0.0),
        (EventKind::VisitEnd, Some(h)) if h.proximity > 0.0 => {
            for (r, tp) in row.iter_mut().zip(&tau.tau_prime) {
                *r += h.mu * h.proximity * tp;
            }
        }
        _ => {}
    }
}

/// `(1/T) ∫₀ᵀ Σ_i α_i x′_i(t) dt` from a simulated trace.
pub fn j1_gradient(trace: &SimTrace) -> Vec<f64> {
    trace.j1_grad_integral.iter().map(|v| v / trace.horizon).collect()
}
