//! Error measures and computable a-posteriori quantities.

use crate::coefficient::CombinedCoefficient;
use crate::corrector::Linearization;
use crate::error::{invalid, Result};
use crate::fem::{h1_seminorm, l2_norm, NodalVector};
use crate::interpolation::TransferOperators;
use crate::solver::MultiscaleBasis;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// `|u_h − u_LOD|₁ / |u_h|₁`.
    pub e_lod: f64,
    /// `‖u_h − I_H u_LOD‖₀ / ‖u_h‖₀`, with `I_H u_LOD` prolonged to the fine mesh.
    pub e_h: f64,
    pub reference_h1: f64,
    pub reference_l2: f64,
}

pub fn relative_errors(u_ref: &NodalVector, u_lod: &NodalVector, tr: &TransferOperators) -> Result<ErrorReport> {
    let reference_h1 = h1_seminorm(u_ref);
    let reference_l2 = l2_norm(u_ref);
    if reference_h1 == 0.0 || reference_l2 == 0.0 {
        return Err(invalid("reference solution is zero"));
    }
    let e_lod = h1_seminorm(&u_lod.axpy(-1.0, u_ref)?) / reference_h1;
    let coarse_part = tr.prolong(&tr.interpolate(u_lod)?)?;
    let e_h = l2_norm(&coarse_part.axpy(-1.0, u_ref)?) / reference_l2;
    Ok(ErrorReport { e_lod, e_h, reference_h1, reference_l2 })
}

/// `‖u − I_H u‖₀ / ‖u‖₀`; a lower bound for every `e_h`.
pub fn coarse_best_approximation(u: &NodalVector, tr: &TransferOperators) -> Result<f64> {
    let norm = l2_norm(u);
    if norm == 0.0 {
        return Err(invalid("function is zero"));
    }
    Ok(l2_norm(&tr.prolong(&tr.interpolate(u)?)?.axpy(-1.0, u)?) / norm)
}

/// `(id − Q^k) I_H u` on the fine mesh.
pub fn corrected_interpolant(basis: &MultiscaleBasis, tr: &TransferOperators, u: &NodalVector) -> Result<NodalVector> {
    basis.expand(&tr.interpolate_free(&u.free_values())?)
}

/// `‖(α(x,p*) − α(x,u))∇v + (α(x,u_LOD) − α(x,p*))∇u_LOD‖₀` with every
/// factor evaluated at fine element midpoints.
pub fn diagnostic_g(
    u_ref: &NodalVector,
    u_lod: &NodalVector,
    p_star: &NodalVector,
    v_hk: &NodalVector,
    coeff: &CombinedCoefficient,
) -> Result<f64> {
    let mesh = coeff.mesh();
    for v in [u_ref, u_lod, p_star, v_hk] {
        if v.mesh() != mesh {
            return Err(invalid("all functions must live on the coefficient mesh"));
        }
    }
    let a_p = coeff.elementwise_alpha(p_star)?;
    let a_u = coeff.elementwise_alpha(u_ref)?;
    let a_l = coeff.elementwise_alpha(u_lod)?;
    let grad_v = v_hk.element_midpoint_gradients();
    let grad_l = u_lod.element_midpoint_gradients();
    let area = mesh.h() * mesh.h();
    let sum: f64 = (0..mesh.element_count())
        .map(|e| {
            let (s, t) = (a_p[e] - a_u[e], a_l[e] - a_p[e]);
            let fx = s * grad_v[e][0] + t * grad_l[e][0];
            let fy = s * grad_v[e][1] + t * grad_l[e][1];
            area * (fx * fx + fy * fy)
        })
        .sum();
    Ok(sum.sqrt())
}

/// Upper surrogates for the linearization error `η(u)`.
///
/// Kačanov: `‖p* − u‖_∞ |u|₁`. Fréchet: `max |α_ss(x,q) ∇q| · ‖u − p*‖₀² / 2`
/// with the maximum sampled along `q = p* + t(u − p*)`, `t ∈ [0, 1]`, at
/// element midpoints. Nodal maxima are exact for bilinear functions.
pub fn eta_bound(kind: Linearization, u_ref: &NodalVector, p_star: &NodalVector, coeff: &CombinedCoefficient) -> Result<f64> {
    let diff = u_ref.axpy(-1.0, p_star)?;
    match kind {
        Linearization::Kacanov => Ok(diff.max_abs() * h1_seminorm(u_ref)),
        Linearization::Frechet => {
            let mesh = coeff.mesh();
            let (pm, dm) = (p_star.element_midpoint_values(), diff.element_midpoint_values());
            let (pg, dg) = (p_star.element_midpoint_gradients(), diff.element_midpoint_gradients());
            const SAMPLES: usize = 11;
            let mut sup = 0.0f64;
            for e in 0..mesh.element_count() {
                for i in 0..SAMPLES {
                    let t = i as f64 / (SAMPLES - 1) as f64;
                    let q = pm[e] + t * dm[e];
                    let g = (pg[e][0] + t * dg[e][0]).hypot(pg[e][1] + t * dg[e][1]);
                    sup = sup.max((coeff.alpha_ss(e, q)? * g).abs());
                }
            }
            let l2 = l2_norm(&diff);
            Ok(sup * l2 * l2 / 2.0)
        }
    }
}

/// Least-squares fit of `log y = a + b log x`; returns `(b, R²)`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Least-squares line `y = a + b x`; returns `(b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("a fit needs at least two points of equal-length data"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("fit data must be finite"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit abscissae are all equal"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, r2))
}

/// Fits `d_k ≈ C ν^k` and returns `(ν, R²)`.
pub fn decay_rate(d: &[f64]) -> Result<(f64, f64)> {
    let k: Vec<f64> = (1..=d.len()).map(|k| k as f64).collect();
    let ld: Vec<f64> = d.iter().map(|v| v.ln()).collect();
    let (slope, r2) = linear_fit(&k, &ld)?;
    Ok((slope.exp(), r2))
}
