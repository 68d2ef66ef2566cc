//! Event-excitation potential field.
//!
//! Every target spreads its weighted backlog over the convex hull of the
//! targets as `α_i x_i / d⁺_i(w)`. Multiplied by the quadratic travel cost
//! `Σ_j ‖s_j − w‖²` and integrated over the hull this gives `J₂`, whose
//! gradient with respect to the trajectory parameters is non-zero even when
//! no agent ever enters a sensing disk.
//!
//! Because targets are static, `J₂` factors into per-target moments of
//! `1/d⁺_i` over the quadrature nodes:
//!
//! ```text
//! J₂ = Σ_i α_i x_i Σ_j ( ‖s_j‖² K0_i − 2 s_j·K1_i + K2_i )
//! ```
//!
//! with `K0_i = ∫ 1/d⁺_i`, `K1_i = ∫ w/d⁺_i`, `K2_i = ∫ ‖w‖²/d⁺_i`. The plant
//! evaluates `J₂` this way at every integrator stage; the node-by-node sums
//! ([`j2`], [`j2_gradient`]) are kept as the reference path.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{self, ConvexPolygon, Point2, QuadratureRule};
use crate::plant::Target;
use crate::trajectory::{Jacobian, PARAMS_PER_AGENT};

/// Rays used for the angular integrals over the hull.
pub const DEFAULT_RAYS: usize = 720;

/// Static data of one target as seen by the field.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Source {
    location: Point2,
    range_r: f64,
    alpha: f64,
}

/// Per-target moments of `1/d⁺` about the hull centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Moments {
    k0: f64,
    k1: Point2,
    k2: f64,
}

/// Quadrature rule over the target hull with cached `d⁺` values.
#[derive(Debug, Clone)]
pub struct ExcitationField {
    hull: ConvexPolygon,
    rule: QuadratureRule,
    sources: Vec<Source>,
    /// `d_plus[i][n]` for target `i` at node `n`.
    d_plus: Vec<Vec<f64>>,
    origin: Point2,
    moments: Vec<Moments>,
}

impl ExcitationField {
    /// Field over the convex hull of the target locations plus any extra
    /// region vertices.
    pub fn new(targets: &[Target], region: &[Point2], resolution: Option<f64>) -> Result<Self> {
        let mut pts: Vec<Point2> = targets.iter().map(|t| t.location).collect();
        pts.extend_from_slice(region);
        let hull = geometry::convex_hull(&pts)?;
        Self::with_hull(hull, targets, resolution)
    }

    /// Field over an explicitly given hull.
    pub fn with_hull(hull: ConvexPolygon, targets: &[Target], resolution: Option<f64>) -> Result<Self> {
        let res = resolution.unwrap_or_else(|| geometry::default_resolution(&hull));
        let rule = geometry::quadrature_over(&hull, res)?;
        let sources: Vec<Source> = targets
            .iter()
            .map(|t| Source { location: t.location, range_r: t.range_r, alpha: t.alpha })
            .collect();
        let d_plus: Vec<Vec<f64>> = sources
            .iter()
            .map(|s| rule.nodes().iter().map(|&(w, _)| geometry::d_plus(w, s.location, s.range_r)).collect())
            .collect();
        let origin = hull.centroid();
        let moments = d_plus
            .iter()
            .map(|dp| {
                let mut m = Moments { k0: 0.0, k1: Point2::default(), k2: 0.0 };
                for (&(w, wt), &d) in rule.nodes().iter().zip(dp) {
                    let wr = w - origin;
                    let f = wt / d;
                    m.k0 += f;
                    m.k1 = m.k1 + wr * f;
                    m.k2 += f * wr.norm_sq();
                }
                m
            })
            .collect();
        Ok(Self { hull, rule, sources, d_plus, origin, moments })
    }

    pub fn hull(&self) -> &ConvexPolygon {
        &self.hull
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn n_targets(&self) -> usize {
        self.sources.len()
    }

    /// Cached `d⁺` of target `i` at every node.
    pub fn d_plus_at_nodes(&self, i: usize) -> &[f64] {
        &self.d_plus[i]
    }

    /// `J₂` through the precomputed moments. Equal to [`j2`] up to rounding.
    pub fn j2_fast(&self, positions: &[Point2], x: &[f64]) -> f64 {
        let rel: Vec<Point2> = positions.iter().map(|&s| s - self.origin).collect();
        self.moments
            .iter()
            .zip(&self.sources)
            .zip(x)
            .map(|((m, src), &xi)| src.alpha * xi * agent_sum(m, &rel))
            .sum()
    }

    /// `J₂` together with its gradient through the moments; `x_prime` is
    /// row-major `M × P` with `P = 5N`. The gradient is added into `grad`.
    pub fn j2_fast_with_gradient(
        &self,
        positions: &[Point2],
        jacobians: &[Jacobian],
        x: &[f64],
        x_prime: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        let n_params = jacobians.len() * PARAMS_PER_AGENT;
        let rel: Vec<Point2> = positions.iter().map(|&s| s - self.origin).collect();
        let mut total = 0.0;
        for (i, ((m, src), &xi)) in self.moments.iter().zip(&self.sources).zip(x).enumerate() {
            let g = agent_sum(m, &rel);
            total += src.alpha * xi * g;
            let row = &x_prime[i * n_params..(i + 1) * n_params];
            for (gk, &xp) in grad.iter_mut().zip(row) {
                *gk += src.alpha * xp * g;
            }
            if xi != 0.0 {
                for (j, (s, jac)) in rel.iter().zip(jacobians).enumerate() {
                    // ∂/∂s_j of the bracket: 2 K0 s_j − 2 K1
                    let ds = (*s * m.k0 - m.k1) * 2.0;
                    for (c, col) in jac.iter().enumerate() {
                        grad[j * PARAMS_PER_AGENT + c] += src.alpha * xi * ds.dot(*col);
                    }
                }
            }
        }
        total
    }
}

fn agent_sum(m: &Moments, rel: &[Point2]) -> f64 {
    rel.iter().map(|s| s.norm_sq() * m.k0 - 2.0 * s.dot(m.k1) + m.k2).sum()
}

/// Reward density `R(w) = Σ_i α_i x_i / d⁺_i(w)` at quadrature node `node`.
pub fn reward_density(field: &ExcitationField, x: &[f64], node: usize) -> f64 {
    field.sources.iter().zip(x).zip(&field.d_plus).map(|((s, &xi), dp)| s.alpha * xi / dp[node]).sum()
}

/// Reward density at an arbitrary point.
pub fn reward_density_at(field: &ExcitationField, x: &[f64], w: Point2) -> f64 {
    field
        .sources
        .iter()
        .zip(x)
        .map(|(s, &xi)| s.alpha * xi / geometry::d_plus(w, s.location, s.range_r))
        .sum()
}

/// Quadratic travel cost `P(w, s) = Σ_j ‖s_j − w‖²`.
pub fn travel_cost(positions: &[Point2], w: Point2) -> f64 {
    positions.iter().map(|&s| (s - w).norm_sq()).sum()
}

/// Node-sum approximation of `∫_C P(w,s) R(w) dw`.
pub fn j2(field: &ExcitationField, positions: &[Point2], x: &[f64]) -> f64 {
    field
        .rule
        .nodes()
        .iter()
        .enumerate()
        .map(|(n, &(w, wt))| wt * travel_cost(positions, w) * reward_density(field, x, n))
        .sum()
}

/// Node-sum gradient of `J₂`: `Σ_n wt·[(dP/dθ) R + P (dR/dθ)]`, with
/// `x_prime` row-major `M × 5N`.
pub fn j2_gradient(
    field: &ExcitationField,
    positions: &[Point2],
    jacobians: &[Jacobian],
    x: &[f64],
    x_prime: &[f64],
) -> Vec<f64> {
    let n_params = jacobians.len() * PARAMS_PER_AGENT;
    let mut grad = vec![0.0; n_params];
    let mut d_r = vec![0.0; n_params];
    for (n, &(w, wt)) in field.rule.nodes().iter().enumerate() {
        let r = reward_density(field, x, n);
        let p = travel_cost(positions, w);
        d_r.iter_mut().for_each(|v| *v = 0.0);
        for (i, s) in field.sources.iter().enumerate() {
            let scale = s.alpha / field.d_plus[i][n];
            for (k, v) in d_r.iter_mut().enumerate() {
                *v += scale * x_prime[i * n_params + k];
            }
        }
        for (j, (&s, jac)) in positions.iter().zip(jacobians).enumerate() {
            let ds = (s - w) * 2.0;
            for (c, col) in jac.iter().enumerate() {
                grad[j * PARAMS_PER_AGENT + c] += wt * ds.dot(*col) * r;
            }
        }
        for (g, v) in grad.iter_mut().zip(&d_r) {
            *g += wt * p * v;
        }
    }
    grad
}

fn interior_check(hull: &ConvexPolygon, i: usize, t: &Target) -> Result<()> {
    let scale = hull.bbox_diagonal().max(1.0);
    if hull.is_vertex(t.location, 1e-9 * scale)
        || !geometry::strictly_inside(hull, t.location, 1e-9)
        || hull.distance_to_boundary(t.location) < 1e-9
    {
        return Err(Error::TargetOnHullBoundary(i));
    }
    Ok(())
}

fn angular_integral<F: Fn(f64) -> f64>(hull: &ConvexPolygon, origin: Point2, rays: usize, f: F) -> Result<f64> {
    let dtheta = 2.0 * PI / rays as f64;
    let mut acc = 0.0;
    for k in 0..rays {
        let lam = geometry::ray_boundary_distance(hull, origin, k as f64 * dtheta)?;
        acc += f(lam);
    }
    // periodic trapezoid rule
    Ok(acc * dtheta)
}

/// Constants `c_i = α_i [2π + ∫₀^{2π} log(Λ_i(θ)/r_i) dθ]` for interior
/// targets, with `Λ_i(θ)` the distance from the target to the hull boundary.
pub fn c_constants(hull: &ConvexPolygon, targets: &[Target]) -> Result<Vec<f64>> {
    c_constants_with_rays(hull, targets, DEFAULT_RAYS)
}

pub fn c_constants_with_rays(hull: &ConvexPolygon, targets: &[Target], rays: usize) -> Result<Vec<f64>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            interior_check(hull, i, t)?;
            let log_part = angular_integral(hull, t.location, rays, |lam| (lam / t.range_r).ln())?;
            Ok(t.alpha * (2.0 * PI + log_part))
        })
        .collect()
}

/// Constants `κ_i` with `∫_C α_i/d⁺_i(w) dw = κ_i`, by the polar-area
/// integral `∫₀^{2π} ∫₀^{Λ(θ)} ρ / max(ρ, r_i) dρ dθ`.
///
/// The radial integral is `Λ − r/2` when `Λ ≥ r` and `Λ²/(2r)` otherwise.
pub fn polar_density_constants(hull: &ConvexPolygon, targets: &[Target]) -> Result<Vec<f64>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            interior_check(hull, i, t)?;
            let r = t.range_r;
            let radial = |lam: f64| if lam >= r { lam - 0.5 * r } else { lam * lam / (2.0 * r) };
            Ok(t.alpha * angular_integral(hull, t.location, DEFAULT_RAYS, radial)?)
        })
        .collect()
}

/// Relative residual of `∫_C R(w) dw = Σ_i κ_i x_i`, with the left side from
/// the field's quadrature and the constants from [`polar_density_constants`].
pub fn verify_density_identity(field: &ExcitationField, targets: &[Target], x: &[f64]) -> Result<f64> {
    let kappa = polar_density_constants(field.hull(), targets)?;
    let lhs: f64 = (0..field.rule.len()).map(|n| field.rule.nodes()[n].1 * reward_density(field, x, n)).sum();
    let rhs: f64 = kappa.iter().zip(x).map(|(k, xi)| k * xi).sum();
    Ok((lhs - rhs).abs() / rhs.abs().max(1e-300))
}
