//! Weight reparameterizations for a single weight vector (one matrix row).
//!
//! Every forward map has a matching vector-jacobian product (`*_vjp`) so the
//! layer code can pull a gradient on the effective weight back onto the raw
//! direction `v` and the length `g`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l1_norm, l2_norm, sign0};

/// Offset inside `sign(w + ε)` of the sphere projections.
pub const PROJ_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormMode {
    /// `g · v / ‖v‖₁`
    L1wn,
    /// `g · v / ‖v‖₂`
    L2wn,
    /// `g · Proj(v)` onto the unit L1 sphere
    L1proj,
    /// `(1-α)·L1wn + α·L1proj`
    Blend { alpha: f64 },
    /// raw weights, lengths unused
    None,
}

impl NormMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormMode::Blend { alpha } if !(0.0..=1.0).contains(&alpha) => Err(Error::Config(
                format!("blend alpha must lie in [0, 1], got {alpha}"),
            )),
            _ => Ok(()),
        }
    }

    /// True for the modes that produce rows on the unit L1 sphere (before scaling by `g`).
    pub fn is_l1(&self) -> bool {
        matches!(
            self,
            NormMode::L1wn | NormMode::L1proj | NormMode::Blend { .. }
        )
    }

    pub fn uses_lengths(&self) -> bool {
        !matches!(self, NormMode::None)
    }
}

/// A raw direction together with its (sign-free) length.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamVector {
    pub v: Vec<f64>,
    pub g: f64,
}

impl ReparamVector {
    pub fn new(v: Vec<f64>, g: f64) -> Self {
        ReparamVector { v, g }
    }

    pub fn effective(&self, mode: NormMode) -> Result<Vec<f64>> {
        effective_weight(&self.v, self.g, mode)
    }
}

fn nonzero_norm(norm: f64, what: &str) -> Result<f64> {
    if norm > 0.0 && norm.is_finite() {
        Ok(norm)
    } else {
        Err(Error::Degenerate(format!(
            "{what} of the direction vector is {norm}"
        )))
    }
}

pub fn effective_weight(v: &[f64], g: f64, mode: NormMode) -> Result<Vec<f64>> {
    match mode {
        NormMode::L1wn => {
            let s = nonzero_norm(l1_norm(v), "L1 norm")?;
            Ok(v.iter().map(|x| g * x / s).collect())
        }
        NormMode::L2wn => {
            let s = nonzero_norm(l2_norm(v), "L2 norm")?;
            Ok(v.iter().map(|x| g * x / s).collect())
        }
        NormMode::L1proj => {
            nonzero_norm(l1_norm(v), "L1 norm")?;
            Ok(proj_l1_sphere(v).into_iter().map(|p| g * p).collect())
        }
        NormMode::Blend { alpha } => {
            mode.validate()?;
            let s = nonzero_norm(l1_norm(v), "L1 norm")?;
            let p = proj_l1_sphere(v);
            Ok(v.iter()
                .zip(&p)
                .map(|(x, pj)| (1.0 - alpha) * g * x / s + alpha * g * pj)
                .collect())
        }
        NormMode::None => Ok(v.to_vec()),
    }
}

/// Gradient of `⟨effective_weight(v, g, L1wn), x⟩` with respect to `v`:
/// `(g/‖v‖₁) · M_w x` with `M_w = I − sign(w) wᵀ / ‖w‖₁`, `sign(0) = 0`.
///
/// `sign(w) wᵀ / ‖w‖₁` equals `sign(v) vᵀ / ‖v‖₁` whenever `g ≠ 0`; the latter
/// form is used so that `g = 0` stays well defined.
pub fn l1wn_subgradient(v: &[f64], g: f64, x: &[f64]) -> Result<Vec<f64>> {
    if v.len() != x.len() {
        return Err(Error::dim("l1wn_subgradient", v.len(), x.len()));
    }
    let s = nonzero_norm(l1_norm(v), "L1 norm")?;
    let vx = dot(v, x) / s;
    Ok(v.iter()
        .zip(x)
        .map(|(vi, xi)| g / s * (xi - sign0(*vi) * vx))
        .collect())
}

/// Threshold of the L1-sphere projection: sort `|w|` descending, form the
/// shifted cumulative means, count the positions where the mean is still below
/// the sorted value and return the mean at that position.
pub fn find_threshold(w: &[f64]) -> f64 {
    threshold_with_support(w).0
}

/// Threshold plus the index set (in original positions) of the `i` largest
/// magnitudes that determined it.
fn threshold_with_support(w: &[f64]) -> (f64, Vec<usize>) {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()));
    let mut cumsum = 0.0;
    let mut means = Vec::with_capacity(w.len());
    let mut count = 0;
    for (k, &j) in order.iter().enumerate() {
        let u = w[j].abs();
        cumsum += u;
        let m = (cumsum - 1.0) / (k + 1) as f64;
        if m < u {
            count += 1;
        }
        means.push(m);
    }
    if count == 0 {
        // only reachable for an empty or all-NaN input
        return (f64::NAN, Vec::new());
    }
    order.truncate(count);
    (means[count - 1], order)
}

fn eps_sign(x: f64) -> f64 {
    if x + PROJ_EPS >= 0.0 {
        // sign(0) never occurs after the offset except at exactly -ε
        if x + PROJ_EPS == 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        -1.0
    }
}

/// Orthogonal projection onto the unit L1 sphere.
///
/// Points inside the ball are inflated onto the sphere; zero entries are then
/// pushed toward the positive side by the `sign(w + ε)` convention.
pub fn proj_l1_sphere(w: &[f64]) -> Vec<f64> {
    let tau = find_threshold(w);
    w.iter()
        .map(|&x| eps_sign(x) * (x.abs() - tau).max(0.0))
        .collect()
}

/// Paired projection for CReLU residual weights: the threshold comes from
/// `max(|w⁺|, |w⁻|)`, so that elementwise maximum lands on the sphere while
/// each half stays inside the ball.
pub fn proj_l1_crelu_pair(wp: &[f64], wm: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if wp.len() != wm.len() {
        return Err(Error::dim("proj_l1_crelu_pair", wp.len(), wm.len()));
    }
    let tilde: Vec<f64> = wp
        .iter()
        .zip(wm)
        .map(|(a, b)| a.abs().max(b.abs()))
        .collect();
    let tau = find_threshold(&tilde);
    let proj = |w: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|&x| eps_sign(x) * (x.abs() - tau).max(0.0))
            .collect()
    };
    Ok((proj(wp), proj(wm)))
}

/// Pulls `grad_out = ∂L/∂p` back through `p = proj_l1_sphere(w)`.
///
/// Follows the subgradient an autodiff engine produces for the projection:
/// sorting and indexing route gradients, `sign(w + ε)` is treated as a
/// constant, `d|x|/dx = sign(x)` with `sign(0) = 0`, and `max(0, ·)` passes
/// gradient only where its argument is positive.
pub fn proj_l1_sphere_vjp(w: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (tau, support) = threshold_with_support(w);
    let k = support.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut through_tau = 0.0;
    for (j, (&x, &gj)) in w.iter().zip(grad_out).enumerate() {
        if x.abs() - tau > 0.0 {
            let s = eps_sign(x) * gj;
            grad[j] += s * sign0(x);
            through_tau += s;
        }
    }
    for &m in &support {
        grad[m] -= through_tau / k * sign0(w[m]);
    }
    grad
}

/// Pulls `(∂L/∂p⁺, ∂L/∂p⁻)` back through [`proj_l1_crelu_pair`]. Ties in the
/// elementwise maximum route to `w⁺`.
pub fn proj_l1_crelu_pair_vjp(
    wp: &[f64],
    wm: &[f64],
    gp: &[f64],
    gm: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plus_wins: Vec<bool> = wp.iter().zip(wm).map(|(a, b)| a.abs() >= b.abs()).collect();
    let tilde: Vec<f64> = wp
        .iter()
        .zip(wm)
        .map(|(a, b)| a.abs().max(b.abs()))
        .collect();
    let (tau, support) = threshold_with_support(&tilde);
    let k = support.len() as f64;

    let mut dp = vec![0.0; wp.len()];
    let mut dm = vec![0.0; wm.len()];
    let mut through_tau = 0.0;
    for (w, g, d) in [(wp, gp, &mut dp), (wm, gm, &mut dm)] {
        for (j, (&x, &gj)) in w.iter().zip(g).enumerate() {
            if x.abs() - tau > 0.0 {
                let s = eps_sign(x) * gj;
                d[j] += s * sign0(x);
                through_tau += s;
            }
        }
    }
    for &m in &support {
        let dtilde = -through_tau / k;
        if plus_wins[m] {
            dp[m] += dtilde * sign0(wp[m]);
        } else {
            dm[m] += dtilde * sign0(wm[m]);
        }
    }
    (dp, dm)
}

/// Gradients of the loss with respect to one row's raw direction and length.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub v: Vec<f64>,
    pub g: f64,
}

/// Pulls `grad_w = ∂L/∂w` back through `w = effective_weight(v, g, mode)`.
pub fn effective_weight_vjp(v: &[f64], g: f64, mode: NormMode, grad_w: &[f64]) -> Result<RowGrad> {
    match mode {
        NormMode::L1wn => {
            let grad_v = l1wn_subgradient(v, g, grad_w)?;
            let s = l1_norm(v);
            Ok(RowGrad {
                v: grad_v,
                g: dot(v, grad_w) / s,
            })
        }
        NormMode::L2wn => {
            let n = nonzero_norm(l2_norm(v), "L2 norm")?;
            let vg = dot(v, grad_w);
            let grad_v = v
                .iter()
                .zip(grad_w)
                .map(|(vi, gi)| g / n * (gi - vg * vi / (n * n)))
                .collect();
            Ok(RowGrad {
                v: grad_v,
                g: vg / n,
            })
        }
        NormMode::L1proj => {
            nonzero_norm(l1_norm(v), "L1 norm")?;
            let p = proj_l1_sphere(v);
            let scaled: Vec<f64> = grad_w.iter().map(|x| g * x).collect();
            Ok(RowGrad {
                v: proj_l1_sphere_vjp(v, &scaled),
                g: dot(&p, grad_w),
            })
        }
        NormMode::Blend { alpha } => {
            mode.validate()?;
            let wn_part: Vec<f64> = grad_w.iter().map(|x| (1.0 - alpha) * x).collect();
            let pj_part: Vec<f64> = grad_w.iter().map(|x| alpha * x).collect();
            let a = effective_weight_vjp(v, g, NormMode::L1wn, &wn_part)?;
            let b = effective_weight_vjp(v, g, NormMode::L1proj, &pj_part)?;
            Ok(RowGrad {
                v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
                g: a.g + b.g,
            })
        }
        NormMode::None => Ok(RowGrad {
            v: grad_w.to_vec(),
            g: 0.0,
        }),
    }
}

/// Effective weights of a CReLU row pair whose normalization is shared through
/// `w̃ = max(|v⁺|, |v⁻|)`.
pub fn pair_effective(
    vp: &[f64],
    vm: &[f64],
    g: f64,
    mode: NormMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if vp.len() != vm.len() {
        return Err(Error::dim("pair_effective", vp.len(), vm.len()));
    }
    let tilde: Vec<f64> = vp
        .iter()
        .zip(vm)
        .map(|(a, b)| a.abs().max(b.abs()))
        .collect();
    let scale = |s: f64, v: &[f64]| -> Vec<f64> { v.iter().map(|x| g * x / s).collect() };
    match mode {
        NormMode::L1wn => {
            let s = nonzero_norm(l1_norm(&tilde), "L1 norm")?;
            Ok((scale(s, vp), scale(s, vm)))
        }
        NormMode::L2wn => {
            let s = nonzero_norm(l2_norm(&tilde), "L2 norm")?;
            Ok((scale(s, vp), scale(s, vm)))
        }
        NormMode::L1proj => {
            nonzero_norm(l1_norm(&tilde), "L1 norm")?;
            let (pp, pm) = proj_l1_crelu_pair(vp, vm)?;
            Ok((
                pp.into_iter().map(|x| g * x).collect(),
                pm.into_iter().map(|x| g * x).collect(),
            ))
        }
        NormMode::Blend { alpha } => {
            mode.validate()?;
            let (ap, am) = pair_effective(vp, vm, g, NormMode::L1wn)?;
            let (bp, bm) = pair_effective(vp, vm, g, NormMode::L1proj)?;
            let mix = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> {
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
                    .collect()
            };
            Ok((mix(ap, bp), mix(am, bm)))
        }
        NormMode::None => Ok((vp.to_vec(), vm.to_vec())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRowGrad {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub g: f64,
}

/// Pulls `(∂L/∂w⁺, ∂L/∂w⁻)` back through [`pair_effective`]. The subgradient
/// of `max(|a|, |b|)` goes to the `+` side on ties.
pub fn pair_effective_vjp(
    vp: &[f64],
    vm: &[f64],
    g: f64,
    mode: NormMode,
    gp: &[f64],
    gm: &[f64],
) -> Result<PairRowGrad> {
    let plus_wins: Vec<bool> = vp.iter().zip(vm).map(|(a, b)| a.abs() >= b.abs()).collect();
    let tilde: Vec<f64> = vp
        .iter()
        .zip(vm)
        .map(|(a, b)| a.abs().max(b.abs()))
        .collect();
    match mode {
        NormMode::L1wn | NormMode::L2wn => {
            let l1 = matches!(mode, NormMode::L1wn);
            let s = if l1 {
                nonzero_norm(l1_norm(&tilde), "L1 norm")?
            } else {
                nonzero_norm(l2_norm(&tilde), "L2 norm")?
            };
            // w± = g v± / s
            let inner = dot(vp, gp) + dot(vm, gm);
            let grad_s = -g * inner / (s * s);
            let mut plus: Vec<f64> = gp.iter().map(|x| g * x / s).collect();
            let mut minus: Vec<f64> = gm.iter().map(|x| g * x / s).collect();
            for j in 0..vp.len() {
                // ∂s/∂w̃_j
                let ds_dt = if l1 { 1.0 } else { tilde[j] / s };
                if plus_wins[j] {
                    plus[j] += grad_s * ds_dt * sign0(vp[j]);
                } else {
                    minus[j] += grad_s * ds_dt * sign0(vm[j]);
                }
            }
            Ok(PairRowGrad {
                plus,
                minus,
                g: inner / s,
            })
        }
        NormMode::L1proj => {
            nonzero_norm(l1_norm(&tilde), "L1 norm")?;
            let (pp, pm) = proj_l1_crelu_pair(vp, vm)?;
            let sp: Vec<f64> = gp.iter().map(|x| g * x).collect();
            let sm: Vec<f64> = gm.iter().map(|x| g * x).collect();
            let (plus, minus) = proj_l1_crelu_pair_vjp(vp, vm, &sp, &sm);
            Ok(PairRowGrad {
                plus,
                minus,
                g: dot(&pp, gp) + dot(&pm, gm),
            })
        }
        NormMode::Blend { alpha } => {
            mode.validate()?;
            let scale = |c: f64, x: &[f64]| -> Vec<f64> { x.iter().map(|y| c * y).collect() };
            let a = pair_effective_vjp(
                vp,
                vm,
                g,
                NormMode::L1wn,
                &scale(1.0 - alpha, gp),
                &scale(1.0 - alpha, gm),
            )?;
            let b = pair_effective_vjp(
                vp,
                vm,
                g,
                NormMode::L1proj,
                &scale(alpha, gp),
                &scale(alpha, gm),
            )?;
            let add = |x: Vec<f64>, y: Vec<f64>| -> Vec<f64> {
                x.iter().zip(&y).map(|(p, q)| p + q).collect()
            };
            Ok(PairRowGrad {
                plus: add(a.plus, b.plus),
                minus: add(a.minus, b.minus),
                g: a.g + b.g,
            })
        }
        NormMode::None => Ok(PairRowGrad {
            plus: gp.to_vec(),
            minus: gm.to_vec(),
            g: 0.0,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, standard_normal};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Nearest point on the unit L1 sphere by exhaustive search: every face of
    /// the cross-polytope is fixed by a support S and signs on S; the nearest
    /// point lies in the relative interior of some face, where it equals the
    /// projection onto that face's affine hull.
    fn sphere_projection_oracle(w: &[f64]) -> (Vec<f64>, f64) {
        let d = w.len();
        let mut best: Option<(Vec<f64>, f64)> = None;
        let total = 3usize.pow(d as u32);
        for code in 0..total {
            let mut c = code;
            let mut signs = vec![0.0; d];
            for s in signs.iter_mut() {
                *s = match c % 3 {
                    0 => 0.0,
                    1 => 1.0,
                    _ => -1.0,
                };
                c /= 3;
            }
            let k = signs.iter().filter(|s| **s != 0.0).count();
            if k == 0 {
                continue;
            }
            let sw: f64 = signs.iter().zip(w).map(|(s, x)| s * x).sum();
            let shift = (1.0 - sw) / k as f64;
            let p: Vec<f64> = signs
                .iter()
                .zip(w)
                .map(|(&s, &x)| if s == 0.0 { 0.0 } else { x + shift * s })
                .collect();
            if signs.iter().zip(&p).any(|(s, x)| s * x < 0.0) {
                continue;
            }
            let dist: f64 = p.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(_, bd)| dist < *bd) {
                best = Some((p, dist));
            }
        }
        best.unwrap()
    }

    #[test]
    fn effective_weight_examples() {
        let w = effective_weight(&[2.0, -2.0], 1.0, NormMode::L1wn).unwrap();
        assert_eq!(w, vec![0.5, -0.5]);
        let w = effective_weight(&[3.0, 1.0], 1.0, NormMode::L1proj).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        let w = effective_weight(&[3.0, 1.0], 1.0, NormMode::Blend { alpha: 0.5 }).unwrap();
        assert!(close(&w, &[0.875, 0.125], 1e-15));
        let w = effective_weight(&[3.0, 4.0], 2.0, NormMode::L2wn).unwrap();
        assert!(close(&w, &[1.2, 1.6], 1e-15));
        assert_eq!(
            effective_weight(&[3.0, -4.0], 7.0, NormMode::None).unwrap(),
            vec![3.0, -4.0]
        );
    }

    #[test]
    fn zero_direction_is_degenerate() {
        for mode in [NormMode::L1wn, NormMode::L2wn, NormMode::L1proj] {
            assert!(matches!(
                effective_weight(&[0.0, 0.0], 1.0, mode),
                Err(Error::Degenerate(_))
            ));
        }
        assert!(l1wn_subgradient(&[0.0], 1.0, &[1.0]).is_err());
        assert!(effective_weight(&[1.0], 1.0, NormMode::Blend { alpha: 1.5 }).is_err());
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let v: Vec<f64> = (0..7).map(|_| 3.0 * standard_normal(&mut rng)).collect();
            let g = standard_normal(&mut rng);
            assert_eq!(
                effective_weight(&v, g, NormMode::Blend { alpha: 0.0 }).unwrap(),
                effective_weight(&v, g, NormMode::L1wn).unwrap()
            );
            assert_eq!(
                effective_weight(&v, g, NormMode::Blend { alpha: 1.0 }).unwrap(),
                effective_weight(&v, g, NormMode::L1proj).unwrap()
            );
        }
    }

    #[test]
    fn subgradient_hand_cases() {
        // x already orthogonal to w: M_w x = x
        let x = [1.0, -1.0];
        let grad = l1wn_subgradient(&[1.0, 1.0], 2.0, &x).unwrap();
        assert!(close(&grad, &x, 1e-15));
        let grad = l1wn_subgradient(&[1.0, 1.0], 2.0, &[1.0, 0.0]).unwrap();
        assert!(close(&grad, &[0.5, -0.5], 1e-15));
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = seeded_rng(12);
        let h = 1e-6;
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
            let g = standard_normal(&mut rng);
            let x: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
            let f = |v: &[f64]| dot(&effective_weight(v, g, NormMode::L1wn).unwrap(), &x);
            let analytic = l1wn_subgradient(&v, g, &x).unwrap();
            for i in 0..6 {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i] += h;
                vm[i] -= h;
                let fd = (f(&vp) - f(&vm)) / (2.0 * h);
                let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
                assert!(
                    (fd - analytic[i]).abs() / scale < 1e-5,
                    "{fd} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn subgradient_sign_boundary_jump() {
        // w = (w0, 0.6, -0.3), x with |x_0| < |wᵀx| / ‖w‖₁
        let x = [0.01, 2.0, -1.0];
        let left = [-1e-9, 0.6, -0.3];
        let right = [1e-9, 0.6, -0.3];
        let gl = l1wn_subgradient(&left, 1.0, &x).unwrap();
        let gr = l1wn_subgradient(&right, 1.0, &x).unwrap();
        let s = l1_norm(&right);
        // (M_w x)_0 = (‖v‖₁/g) · grad_0
        let jump = (gl[0] - gr[0]) * s;
        let w = [0.0, 0.6, -0.3];
        let expected = 2.0 * dot(&w, &x) / l1_norm(&w);
        assert!((jump - expected).abs() < 1e-7, "{jump} vs {expected}");
        // the coordinate's derivative changes sign across 0
        assert!(gl[0] * gr[0] < 0.0);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(find_threshold(&[3.0, 1.0]), 2.0);
        assert_eq!(find_threshold(&[5.0, 0.0, 0.0, 0.0]), 4.0);
        assert_eq!(find_threshold(&[0.25, 0.25]), -0.25);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(proj_l1_sphere(&[3.0, 1.0]), vec![1.0, 0.0]);
        assert_eq!(proj_l1_sphere(&[0.5, -0.5]), vec![0.5, -0.5]);
        let inflated = proj_l1_sphere(&[0.25, 0.25]);
        assert_eq!(inflated, vec![0.5, 0.5]);
    }

    #[test]
    fn projection_matches_face_enumeration() {
        let mut rng = seeded_rng(31);
        for trial in 0..200 {
            let d = 1 + trial % 6;
            let scale = [0.05, 0.3, 1.0, 4.0][trial % 4];
            let w: Vec<f64> = (0..d).map(|_| scale * standard_normal(&mut rng)).collect();
            let p = proj_l1_sphere(&w);
            let (q, _) = sphere_projection_oracle(&w);
            assert!(close(&p, &q, 1e-8), "{w:?}: {p:?} vs {q:?}");
            assert!((l1_norm(&p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crelu_pair_examples() {
        let (p, m) = proj_l1_crelu_pair(&[3.0, 0.0], &[0.0, 3.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.0]);
        assert_eq!(m, vec![0.0, 0.5]);

        let (p, m) = proj_l1_crelu_pair(&[3.0, 1.0], &[3.0, 1.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert_eq!(m, vec![1.0, 0.0]);

        let (p, m) = proj_l1_crelu_pair(&[0.5, 0.0], &[0.0, -0.5]).unwrap();
        assert_eq!(p, vec![0.5, 0.0]);
        assert_eq!(m, vec![0.0, -0.5]);
    }

    #[test]
    fn crelu_pair_max_lands_on_sphere() {
        let mut rng = seeded_rng(8);
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            let b: Vec<f64> = (0..5).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            let (p, m) = proj_l1_crelu_pair(&a, &b).unwrap();
            let tilde: f64 = p.iter().zip(&m).map(|(x, y)| x.abs().max(y.abs())).sum();
            assert!((tilde - 1.0).abs() < 1e-12);
            assert!(l1_norm(&p) <= 1.0 + 1e-12 && l1_norm(&m) <= 1.0 + 1e-12);
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], tol: f64) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-2);
            assert!(
                (fd - analytic[i]).abs() / scale < tol,
                "coord {i}: fd {fd} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn row_vjp_matches_finite_differences_all_modes() {
        let mut rng = seeded_rng(77);
        let modes = [
            NormMode::L1wn,
            NormMode::L2wn,
            NormMode::L1proj,
            NormMode::Blend { alpha: 0.3 },
            NormMode::None,
        ];
        for mode in modes {
            for _ in 0..20 {
                let v: Vec<f64> = (0..6).map(|_| 2.0 * standard_normal(&mut rng)).collect();
                let g = standard_normal(&mut rng);
                let up: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
                let grad = effective_weight_vjp(&v, g, mode, &up).unwrap();
                let f = |v: &[f64]| dot(&effective_weight(v, g, mode).unwrap(), &up);
                fd_check(f, &v, &grad.v, 1e-5);
                let fg = |gs: &[f64]| dot(&effective_weight(&v, gs[0], mode).unwrap(), &up);
                fd_check(fg, &[g], &[grad.g], 1e-5);
            }
        }
    }

    #[test]
    fn pair_vjp_matches_finite_differences_all_modes() {
        let mut rng = seeded_rng(78);
        let modes = [
            NormMode::L1wn,
            NormMode::L2wn,
            NormMode::L1proj,
            NormMode::Blend { alpha: 0.6 },
        ];
        for mode in modes {
            for _ in 0..20 {
                let vp: Vec<f64> = (0..5).map(|_| 2.0 * standard_normal(&mut rng)).collect();
                let vm: Vec<f64> = (0..5).map(|_| 2.0 * standard_normal(&mut rng)).collect();
                let g = standard_normal(&mut rng);
                let up: Vec<f64> = (0..5).map(|_| standard_normal(&mut rng)).collect();
                let um: Vec<f64> = (0..5).map(|_| standard_normal(&mut rng)).collect();
                let grad = pair_effective_vjp(&vp, &vm, g, mode, &up, &um).unwrap();
                let obj = |a: &[f64], b: &[f64], g: f64| {
                    let (wp, wm) = pair_effective(a, b, g, mode).unwrap();
                    dot(&wp, &up) + dot(&wm, &um)
                };
                fd_check(|a| obj(a, &vm, g), &vp, &grad.plus, 1e-5);
                fd_check(|b| obj(&vp, b, g), &vm, &grad.minus, 1e-5);
                fd_check(|gs| obj(&vp, &vm, gs[0]), &[g], &[grad.g], 1e-5);
            }
        }
    }

    #[test]
    fn pair_l1wn_max_rows_have_length_norm() {
        let vp = [3.0, -1.0, 0.5];
        let vm = [-1.0, 2.0, 0.25];
        let (wp, wm) = pair_effective(&vp, &vm, -1.5, NormMode::L1wn).unwrap();
        let tilde: f64 = wp.iter().zip(&wm).map(|(a, b)| a.abs().max(b.abs())).sum();
        assert!((tilde - 1.5).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn l1wn_is_scale_invariant(
            v in prop::collection::vec(-10.0f64..10.0, 1..8),
            g in -5.0f64..5.0,
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(l1_norm(&v) > 1e-6);
            let a = effective_weight(&v, g, NormMode::L1wn).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let b = effective_weight(&scaled, g, NormMode::L1wn).unwrap();
            prop_assert!(close(&a, &b, 1e-12 * (1.0 + g.abs())));
        }

        #[test]
        fn subgradient_is_orthogonal_to_weight(
            v in prop::collection::vec(-10.0f64..10.0, 1..10),
            x in prop::collection::vec(-10.0f64..10.0, 10),
            g in -5.0f64..5.0,
        ) {
            prop_assume!(l1_norm(&v) > 1e-6 && g.abs() > 1e-6);
            let x = &x[..v.len()];
            let w = effective_weight(&v, g, NormMode::L1wn).unwrap();
            let grad = l1wn_subgradient(&v, g, x).unwrap();
            // floor the gradient scale at its a-priori magnitude so an
            // accidentally tiny gradient does not demand exact cancellation
            let scale = l2_norm(&grad).max(g.abs() / l1_norm(&v) * l2_norm(x) * 1e-3);
            prop_assert!(dot(&grad, &w).abs() <= 1e-10 * l2_norm(&w) * scale);
        }

        #[test]
        fn projection_is_idempotent_and_on_sphere(
            w in prop::collection::vec(-5.0f64..5.0, 1..12),
        ) {
            prop_assume!(l1_norm(&w) > 1e-6);
            let p = proj_l1_sphere(&w);
            prop_assert!((l1_norm(&p) - 1.0).abs() < 1e-12);
            let q = proj_l1_sphere(&p);
            prop_assert!(close(&p, &q, 1e-12));
        }
    }
}
