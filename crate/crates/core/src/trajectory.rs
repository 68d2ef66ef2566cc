//! Elliptical agent trajectories traversed at unit speed.
//!
//! An agent's position is `c + R(φ)·(a cos ρ, b sin ρ)` where the eccentric
//! anomaly `ρ(t)` obeys `ρ̇ = 1/‖∂s/∂ρ‖`, so the agent always moves at speed 1.
//! Because `ρ(t)` is itself the solution of an ODE whose right-hand side
//! depends on the shape, the position sensitivity carries a chain-rule term
//! through `∂ρ/∂θ`, which is integrated alongside the plant.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Number of shape parameters per agent: `[A, B, a, b, φ]`.
pub const PARAMS_PER_AGENT: usize = 5;

/// Default lower bound on both semi-axes.
pub const DEFAULT_A_MIN: f64 = 0.05;

/// Column-wise 2×5 sensitivity `ds/dθ_j`; column order `A, B, a, b, φ`.
pub type Jacobian = [Point2; PARAMS_PER_AGENT];

/// Ellipse parameters of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    /// Center x (`A`).
    #[serde(rename = "A")]
    pub cx: f64,
    /// Center y (`B`).
    #[serde(rename = "B")]
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Orientation of the `a` axis, radians in `[0, π)`.
    pub phi: f64,
}

impl EllipseParams {
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, phi: f64) -> Self {
        Self { cx, cy, a, b, phi }
    }

    pub fn to_array(self) -> [f64; PARAMS_PER_AGENT] {
        [self.cx, self.cy, self.a, self.b, self.phi]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn validate(&self, a_min: f64) -> Result<()> {
        let arr = self.to_array();
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite ellipse parameter {arr:?}")));
        }
        if self.a < a_min || self.b < a_min {
            return Err(Error::InvalidParameter(format!(
                "semi-axes ({}, {}) below minimum {a_min}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Clamp the semi-axes to `[a_min, ∞)` and wrap `φ` into `[0, π)`.
    /// Parameters already feasible are returned bit-for-bit unchanged.
    pub fn project(self, a_min: f64) -> Self {
        let phi = if (0.0..PI).contains(&self.phi) {
            self.phi
        } else {
            let w = self.phi.rem_euclid(PI);
            // rem_euclid can round up to exactly π
            if w >= PI { 0.0 } else { w }
        };
        Self { a: self.a.max(a_min), b: self.b.max(a_min), phi, ..self }
    }

    /// Upper bound on the curvature of the ellipse.
    pub fn max_curvature(&self) -> f64 {
        (self.a / (self.b * self.b)).max(self.b / (self.a * self.a))
    }

    /// Perimeter via Ramanujan's second approximation.
    pub fn perimeter(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        let h = ((a - b) / (a + b)).powi(2);
        PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
    }
}

/// Flatten per-agent parameters into one decision vector.
pub fn flatten(params: &[EllipseParams]) -> Vec<f64> {
    params.iter().flat_map(|p| p.to_array()).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(theta: &[f64]) -> Vec<EllipseParams> {
    theta.chunks_exact(PARAMS_PER_AGENT).map(EllipseParams::from_slice).collect()
}

/// Eccentric anomaly of one agent and its sensitivity to the agent's own
/// five parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentKinematics {
    pub rho: f64,
    pub rho_sens: [f64; PARAMS_PER_AGENT],
}

impl AgentKinematics {
    pub fn at(rho: f64) -> Self {
        Self { rho, rho_sens: [0.0; PARAMS_PER_AGENT] }
    }

    /// Starting state `ρ(0) = −φ`. The start point is then the same for `φ`
    /// and `φ + π`, so the whole sample path is invariant under the
    /// orientation wrap applied by [`EllipseParams::project`].
    pub fn initial(p: &EllipseParams) -> Self {
        let mut rho_sens = [0.0; PARAMS_PER_AGENT];
        rho_sens[4] = -1.0;
        Self { rho: -p.phi, rho_sens }
    }
}

/// Position on the ellipse at eccentric anomaly `rho`.
pub fn position(p: &EllipseParams, rho: f64) -> Point2 {
    let (sr, cr) = rho.sin_cos();
    let (sp, cp) = p.phi.sin_cos();
    Point2::new(
        p.cx + p.a * cr * cp - p.b * sr * sp,
        p.cy + p.a * cr * sp + p.b * sr * cp,
    )
}

/// `∂s/∂ρ`.
pub fn tangent(p: &EllipseParams, rho: f64) -> Point2 {
    let (sr, cr) = rho.sin_cos();
    let (sp, cp) = p.phi.sin_cos();
    Point2::new(-p.a * sr * cp - p.b * cr * sp, -p.a * sr * sp + p.b * cr * cp)
}

// ‖∂s/∂ρ‖² = a² sin²ρ + b² cos²ρ, independent of φ
fn speed_factor_sq(p: &EllipseParams, rho: f64) -> f64 {
    let (sr, cr) = rho.sin_cos();
    p.a * p.a * sr * sr + p.b * p.b * cr * cr
}

/// Anomaly rate that keeps the agent at unit speed.
pub fn rho_dot(p: &EllipseParams, rho: f64) -> f64 {
    1.0 / speed_factor_sq(p, rho).sqrt()
}

/// Agent velocity `ds/dt`; unit length by construction.
pub fn velocity(p: &EllipseParams, rho: f64) -> Point2 {
    tangent(p, rho) * rho_dot(p, rho)
}

/// Partial derivatives of `ρ̇` with respect to `ρ` and to `[A, B, a, b, φ]`.
pub fn rho_dot_partials(p: &EllipseParams, rho: f64) -> (f64, [f64; PARAMS_PER_AGENT]) {
    let (sr, cr) = rho.sin_cos();
    let q = speed_factor_sq(p, rho);
    let q32 = q * q.sqrt();
    let d_rho = -(p.a * p.a - p.b * p.b) * sr * cr / q32;
    let d_a = -p.a * sr * sr / q32;
    let d_b = -p.b * cr * cr / q32;
    (d_rho, [0.0, 0.0, d_a, d_b, 0.0])
}

/// Explicit partials `∂s/∂θ_j` at fixed `ρ`.
pub fn explicit_jacobian(p: &EllipseParams, rho: f64) -> Jacobian {
    let (sr, cr) = rho.sin_cos();
    let (sp, cp) = p.phi.sin_cos();
    [
        Point2::new(1.0, 0.0),
        Point2::new(0.0, 1.0),
        Point2::new(cr * cp, cr * sp),
        Point2::new(-sr * sp, sr * cp),
        Point2::new(-p.a * cr * sp - p.b * sr * cp, p.a * cr * cp - p.b * sr * sp),
    ]
}

/// Total derivative `ds/dθ_j`, including the path through `ρ(t; θ_j)`.
pub fn position_jacobian(p: &EllipseParams, k: &AgentKinematics) -> Jacobian {
    let mut jac = explicit_jacobian(p, k.rho);
    let t = tangent(p, k.rho);
    for (col, &rs) in jac.iter_mut().zip(&k.rho_sens) {
        *col = *col + t * rs;
    }
    jac
}

/// Right-hand side of the variational equation for `∂ρ/∂θ_j`.
pub fn rho_sensitivity_rhs(p: &EllipseParams, k: &AgentKinematics) -> [f64; PARAMS_PER_AGENT] {
    let (d_rho, d_theta) = rho_dot_partials(p, k.rho);
    let mut out = [0.0; PARAMS_PER_AGENT];
    for i in 0..PARAMS_PER_AGENT {
        out[i] = d_rho * k.rho_sens[i] + d_theta[i];
    }
    out
}

/// Positions at `n_samples` uniformly spaced times over `[0, horizon]`,
/// integrating the anomaly with `substeps` RK4 steps between samples.
pub fn sample_positions(p: &EllipseParams, horizon: f64, n_samples: usize, substeps: usize) -> Vec<(f64, Point2)> {
    let mut rho = AgentKinematics::initial(p).rho;
    let mut out = Vec::with_capacity(n_samples);
    if n_samples == 0 {
        return out;
    }
    out.push((0.0, position(p, rho)));
    if n_samples == 1 {
        return out;
    }
    let dt = horizon / (n_samples - 1) as f64;
    let h = dt / substeps.max(1) as f64;
    for k in 1..n_samples {
        for _ in 0..substeps.max(1) {
            let k1 = rho_dot(p, rho);
            let k2 = rho_dot(p, rho + 0.5 * h * k1);
            let k3 = rho_dot(p, rho + 0.5 * h * k2);
            let k4 = rho_dot(p, rho + h * k3);
            rho += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let t = if k + 1 == n_samples { horizon } else { k as f64 * dt };
        out.push((t, position(p, rho)));
    }
    out
}
