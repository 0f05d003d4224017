//! 1-path-norm bounds on the `ℓ∞ → ℓ1` Lipschitz constant.
//!
//! Every bound is evaluated right to left as matrix-vector products, so no
//! product matrix is ever formed. Gradient variants return the bound together
//! with its subgradient with respect to each weight matrix (sign of 0 is 0).

use std::borrow::Borrow;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::architectures::{Activation, Body, EffectiveWeights, Lengths, Network};
use crate::error::{Error, Result};
use crate::linalg::{l1_norm, op_inf_norm, op_inf_one_norm, sign0, InfOneNorm, Matrix, Rng};

/// Upper limit on the number of paths [`path_norm_enumerate`] will visit.
pub const MAX_ENUMERATED_PATHS: f64 = 1e7;

/// Step used by the local slope probes of [`empirical_lipschitz`].
pub const SLOPE_PROBE_STEP: f64 = 1e-4;

fn check_chain<M: Borrow<Matrix>>(op: &'static str, weights: &[M]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Degenerate(format!("{op}: no layers")));
    }
    for (k, pair) in weights.windows(2).enumerate() {
        let (lower, upper) = (pair[0].borrow(), pair[1].borrow());
        if upper.cols() != lower.rows() {
            return Err(Error::dim(
                op,
                format!("{} input columns at layer {}", lower.rows(), k + 1),
                upper.cols(),
            ));
        }
    }
    Ok(())
}

/// `|W| v` without materializing `|W|`.
fn abs_matvec(w: &Matrix, v: &[f64]) -> Vec<f64> {
    w.row_iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| a.abs() * b).sum())
        .collect()
}

/// `|W|ᵀ u`.
fn abs_tmatvec(w: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &ur) in w.row_iter().zip(u) {
        for (o, a) in out.iter_mut().zip(r) {
            *o += a.abs() * ur;
        }
    }
    out
}

/// `sign(W) ⊙ (u vᵀ)`.
fn sign_outer(w: &Matrix, u: &[f64], v: &[f64]) -> Matrix {
    let mut g = Matrix::zeros(w.rows(), w.cols());
    for (r, &ur) in u.iter().enumerate().take(w.rows()) {
        let (src, dst) = (w.row(r), g.row_mut(r));
        for ((d, &s), &vc) in dst.iter_mut().zip(src).zip(v) {
            *d = sign0(s) * ur * vc;
        }
    }
    g
}

/// `1ᵀ|W_K|…|W_1|1`.
pub fn path_norm_mlp<M: Borrow<Matrix>>(weights: &[M]) -> Result<f64> {
    check_chain("path_norm_mlp", weights)?;
    Ok(layered_forward(weights, false).last().unwrap().iter().sum())
}

/// Path-sum vectors `a_0 = 1, a_k = |W_k| a_{k-1}`. With `duplicate` set,
/// every hidden vector is stacked on itself before the next layer, which is
/// how CReLU features feed a plain MLP layer.
fn layered_forward<M: Borrow<Matrix>>(weights: &[M], duplicate: bool) -> Vec<Vec<f64>> {
    let mut acts = vec![vec![1.0; weights[0].borrow().cols()]];
    for (k, w) in weights.iter().enumerate() {
        let prev = acts.last().unwrap();
        let input = if duplicate && k > 0 {
            prev.iter().chain(prev.iter()).copied().collect()
        } else {
            prev.clone()
        };
        acts.push(abs_matvec(w.borrow(), &input));
    }
    acts
}

fn layered_grad<M: Borrow<Matrix>>(weights: &[M], duplicate: bool) -> (f64, Vec<Matrix>) {
    let acts = layered_forward(weights, duplicate);
    let value = acts.last().unwrap().iter().sum();
    let mut grads = vec![Matrix::zeros(0, 0); weights.len()];
    let mut u = vec![1.0; weights.last().unwrap().borrow().rows()];
    for k in (0..weights.len()).rev() {
        let w = weights[k].borrow();
        let dup = duplicate && k > 0;
        let input: Vec<f64> = if dup {
            acts[k].iter().chain(acts[k].iter()).copied().collect()
        } else {
            acts[k].clone()
        };
        grads[k] = sign_outer(w, &u, &input);
        let back = abs_tmatvec(w, &u);
        u = if dup {
            let h = back.len() / 2;
            (0..h).map(|i| back[i] + back[h + i]).collect()
        } else {
            back
        };
    }
    (value, grads)
}

/// [`path_norm_mlp`] and its subgradient with respect to every matrix.
pub fn path_norm_mlp_grad<M: Borrow<Matrix>>(weights: &[M]) -> Result<(f64, Vec<Matrix>)> {
    check_chain("path_norm_mlp_grad", weights)?;
    Ok(layered_grad(weights, false))
}

/// Sum over every input-to-output path of `|Π w|`, by depth-first traversal.
pub fn path_norm_enumerate<M: Borrow<Matrix>>(weights: &[M]) -> Result<f64> {
    check_chain("path_norm_enumerate", weights)?;
    let mut paths = weights[0].borrow().cols() as f64;
    for w in weights {
        paths *= w.borrow().rows() as f64;
    }
    if paths > MAX_ENUMERATED_PATHS {
        return Err(Error::Resource(format!(
            "{paths:.3e} paths exceeds the enumeration limit of {MAX_ENUMERATED_PATHS:.0e}"
        )));
    }
    let ws: Vec<&Matrix> = weights.iter().map(Borrow::borrow).collect();
    fn walk(ws: &[&Matrix], node: usize, product: f64) -> f64 {
        match ws.split_first() {
            None => product.abs(),
            Some((w, rest)) => (0..w.rows())
                .map(|r| walk(rest, r, product * w[(r, node)]))
                .sum(),
        }
    }
    Ok((0..ws[0].cols()).map(|i| walk(&ws, i, 1.0)).sum())
}

/// The path norm of the graph with one extra bias neuron per layer.
pub fn path_norm_with_bias<M: Borrow<Matrix>, B: AsRef<[f64]>>(
    weights: &[M],
    biases: &[B],
) -> Result<f64> {
    check_chain("path_norm_with_bias", weights)?;
    if biases.len() != weights.len() {
        return Err(Error::dim(
            "path_norm_with_bias",
            weights.len(),
            biases.len(),
        ));
    }
    let last = weights.len() - 1;
    let mut augmented = Vec::with_capacity(weights.len());
    for (k, (w, b)) in weights.iter().zip(biases).enumerate() {
        let (w, b) = (w.borrow(), b.as_ref());
        if b.len() != w.rows() {
            return Err(Error::dim("path_norm_with_bias bias", w.rows(), b.len()));
        }
        let offset = usize::from(k < last);
        let mut hat = Matrix::zeros(w.rows() + offset, w.cols() + 1);
        if k < last {
            hat[(0, 0)] = 1.0;
        }
        for r in 0..w.rows() {
            hat[(r + offset, 0)] = b[r];
            hat.row_mut(r + offset)[1..].copy_from_slice(w.row(r));
        }
        augmented.push(hat);
    }
    let mut v = vec![1.0; augmented[0].cols()];
    v[0] = 0.0;
    for w in &augmented {
        v = abs_matvec(w, &v);
    }
    Ok(v.iter().sum())
}

fn check_crelu(
    op: &'static str,
    first: &Matrix,
    blocks: &[(Matrix, Matrix)],
    last: &(Matrix, Matrix),
) -> Result<()> {
    let d = first.rows();
    for (i, (p, m)) in blocks.iter().enumerate() {
        if p.shape() != (d, d) || m.shape() != (d, d) {
            return Err(Error::dim(
                op,
                format!("{d}x{d} block {i}"),
                format!("{:?} / {:?}", p.shape(), m.shape()),
            ));
        }
    }
    if last.0.cols() != d || last.0.shape() != last.1.shape() {
        return Err(Error::dim(
            op,
            format!("output pair with {d} columns"),
            format!("{:?} / {:?}", last.0.shape(), last.1.shape()),
        ));
    }
    Ok(())
}

/// Elementwise `max(|W⁺|, |W⁻|)`.
fn tilde(pair: &(Matrix, Matrix)) -> Matrix {
    pair.0.max_abs(&pair.1).expect("pair shapes checked")
}

/// Routes a gradient on `max(|W⁺|, |W⁻|)` to whichever entry attains it,
/// preferring `W⁺` on ties.
fn route_tilde_grad(pair: &(Matrix, Matrix), g: &Matrix) -> (Matrix, Matrix) {
    let (p, m) = pair;
    let mut gp = Matrix::zeros(p.rows(), p.cols());
    let mut gm = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.data().len() {
        let (a, b) = (p.data()[i], m.data()[i]);
        if a.abs() >= b.abs() {
            gp.data_mut()[i] = sign0(a) * g.data()[i];
        } else {
            gm.data_mut()[i] = sign0(b) * g.data()[i];
        }
    }
    (gp, gm)
}

/// Subgradients of a CReLU residual bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CReLUBoundGrad {
    pub first: Matrix,
    pub blocks: Vec<(Matrix, Matrix)>,
    pub last: (Matrix, Matrix),
}

/// `1ᵀ W̃_K (I + W̃_{K−1}) … (I + W̃_2) |W_1| 1` with `W̃ = max(|W⁺|, |W⁻|)`.
pub fn improved_bound_crelu(
    first: &Matrix,
    blocks: &[(Matrix, Matrix)],
    last: &(Matrix, Matrix),
) -> Result<f64> {
    Ok(improved_bound_crelu_grad(first, blocks, last)?.0)
}

pub fn improved_bound_crelu_grad(
    first: &Matrix,
    blocks: &[(Matrix, Matrix)],
    last: &(Matrix, Matrix),
) -> Result<(f64, CReLUBoundGrad)> {
    check_crelu("improved_bound_crelu", first, blocks, last)?;
    let tildes: Vec<Matrix> = blocks.iter().map(tilde).collect();
    let last_tilde = tilde(last);
    let mut acts = vec![abs_matvec(first, &vec![1.0; first.cols()])];
    for t in &tildes {
        let a = acts.last().unwrap();
        let next: Vec<f64> = a.iter().zip(abs_matvec(t, a)).map(|(x, y)| x + y).collect();
        acts.push(next);
    }
    let top = abs_matvec(&last_tilde, acts.last().unwrap());
    let value = top.iter().sum();

    let mut u = vec![1.0; last_tilde.rows()];
    let last_grad = route_tilde_grad(last, &outer(&u, acts.last().unwrap()));
    u = abs_tmatvec(&last_tilde, &u);
    let mut block_grads = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); blocks.len()];
    for b in (0..blocks.len()).rev() {
        block_grads[b] = route_tilde_grad(&blocks[b], &outer(&u, &acts[b]));
        let back = abs_tmatvec(&tildes[b], &u);
        u = u.iter().zip(back).map(|(x, y)| x + y).collect();
    }
    let first_grad = sign_outer(first, &u, &vec![1.0; first.cols()]);
    Ok((
        value,
        CReLUBoundGrad {
            first: first_grad,
            blocks: block_grads,
            last: last_grad,
        },
    ))
}

fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (r, &ur) in u.iter().enumerate() {
        for (o, &vc) in m.row_mut(r).iter_mut().zip(v) {
            *o = ur * vc;
        }
    }
    m
}

/// The 1-path-norm of a CReLU residual network with skip and weight paths
/// counted separately: each block contributes `[(I + |W⁺|) (I + |W⁻|)]` acting
/// on the duplicated CReLU path sums.
pub fn naive_crelu_path_norm(
    first: &Matrix,
    blocks: &[(Matrix, Matrix)],
    last: &(Matrix, Matrix),
) -> Result<f64> {
    Ok(naive_crelu_path_norm_grad(first, blocks, last)?.0)
}

pub fn naive_crelu_path_norm_grad(
    first: &Matrix,
    blocks: &[(Matrix, Matrix)],
    last: &(Matrix, Matrix),
) -> Result<(f64, CReLUBoundGrad)> {
    check_crelu("naive_crelu_path_norm", first, blocks, last)?;
    let ones = vec![1.0; first.cols()];
    let mut acts = vec![abs_matvec(first, &ones)];
    for (p, m) in blocks {
        let a = acts.last().unwrap();
        let next: Vec<f64> = a
            .iter()
            .zip(abs_matvec(p, a))
            .zip(abs_matvec(m, a))
            .map(|((x, y), z)| 2.0 * x + y + z)
            .collect();
        acts.push(next);
    }
    let a = acts.last().unwrap();
    let value = abs_matvec(&last.0, a)
        .iter()
        .zip(abs_matvec(&last.1, a))
        .map(|(x, y)| x + y)
        .sum();

    let out = vec![1.0; last.0.rows()];
    let last_grad = (sign_outer(&last.0, &out, a), sign_outer(&last.1, &out, a));
    let mut u: Vec<f64> = abs_tmatvec(&last.0, &out)
        .iter()
        .zip(abs_tmatvec(&last.1, &out))
        .map(|(x, y)| x + y)
        .collect();
    let mut block_grads = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); blocks.len()];
    for b in (0..blocks.len()).rev() {
        let (p, m) = &blocks[b];
        block_grads[b] = (sign_outer(p, &u, &acts[b]), sign_outer(m, &u, &acts[b]));
        u = u
            .iter()
            .zip(abs_tmatvec(p, &u))
            .zip(abs_tmatvec(m, &u))
            .map(|((x, y), z)| 2.0 * x + y + z)
            .collect();
    }
    let first_grad = sign_outer(first, &u, &ones);
    Ok((
        value,
        CReLUBoundGrad {
            first: first_grad,
            blocks: block_grads,
            last: last_grad,
        },
    ))
}

/// The explicit layered graph behind [`naive_crelu_path_norm`], with absolute
/// weights: `[C|W_1|, C B_1, …, C B_n, [|W⁺_K| |W⁻_K|]]` where `C = [I; I]`
/// duplicates a hidden vector onto its CReLU halves and
/// `B = [(I + |W⁺|) (I + |W⁻|)]`.
pub fn crelu_distinct_path_graph(
    first: &Matrix,
    blocks: &[(Matrix, Matrix)],
    last: &(Matrix, Matrix),
) -> Result<Vec<Matrix>> {
    check_crelu("crelu_distinct_path_graph", first, blocks, last)?;
    let d = first.rows();
    let mut layers = vec![duplicate_rows(&first.abs())];
    for (p, m) in blocks {
        let mut stacked = Matrix::zeros(d, 2 * d);
        for r in 0..d {
            for c in 0..d {
                let id = if r == c { 1.0 } else { 0.0 };
                stacked[(r, c)] = id + p[(r, c)].abs();
                stacked[(r, d + c)] = id + m[(r, c)].abs();
            }
        }
        layers.push(duplicate_rows(&stacked));
    }
    layers.push(hstack(&last.0.abs(), &last.1.abs()));
    Ok(layers)
}

/// `[A; A]`.
fn duplicate_rows(a: &Matrix) -> Matrix {
    let mut data = a.data().to_vec();
    data.extend_from_slice(a.data());
    Matrix::from_vec(2 * a.rows(), a.cols(), data).expect("sizes agree")
}

/// `[A B]`.
fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        out.row_mut(r)[..a.cols()].copy_from_slice(a.row(r));
        out.row_mut(r)[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

/// `‖g_K‖₁ · Π |g_k|`.
pub fn psilon_closed_form_mlp(g_interior: &[f64], g_last: &[f64]) -> f64 {
    l1_norm(g_last) * g_interior.iter().map(|g| g.abs()).product::<f64>()
}

/// `‖g_K‖₁ · |g_1| · Π (1 + |g_k|)`.
pub fn psilon_closed_form_resnet(g1: f64, g_interior: &[f64], g_last: &[f64]) -> f64 {
    l1_norm(g_last) * g1.abs() * g_interior.iter().map(|g| 1.0 + g.abs()).product::<f64>()
}

/// `‖W_K‖_{∞,1} · Π ‖W_k‖_∞`; inexact when the last factor had to fall back
/// to its entrywise upper bound.
pub fn product_bound<M: Borrow<Matrix>>(
    weights: &[M],
    exact_dim_limit: usize,
) -> Result<InfOneNorm> {
    check_chain("product_bound", weights)?;
    let (last, rest) = weights.split_last().unwrap();
    let top = op_inf_one_norm(last.borrow(), exact_dim_limit);
    let value = top.value
        * rest
            .iter()
            .map(|w| op_inf_norm(w.borrow()))
            .product::<f64>();
    Ok(InfOneNorm {
        value,
        exact: top.exact,
    })
}

/// Lower estimate of the `ℓ∞ → ℓ1` Lipschitz constant of `net` on the box
/// `[−input_box, input_box]^d`.
///
/// Evaluates `n_pairs` random pairs plus `n_pairs` local slope probes at
/// distance [`SLOPE_PROBE_STEP`]; half the probes step along a random sign
/// vector (a cube vertex direction), half along a single coordinate.
pub fn empirical_lipschitz(
    net: &Network,
    n_pairs: usize,
    input_box: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::Config(
            "empirical_lipschitz needs at least one pair".into(),
        ));
    }
    const CHUNK: usize = 2048;
    let d = net.in_dim();
    let mut best: f64 = 0.0;
    let mut remaining = 2 * n_pairs;
    let mut probe_index = 0usize;
    while remaining > 0 {
        let n = remaining.min(CHUNK);
        let mut xs = Matrix::zeros(n, d);
        let mut ys = Matrix::zeros(n, d);
        for i in 0..n {
            let pair = probe_index < n_pairs;
            let x = xs.row_mut(i);
            for v in x.iter_mut() {
                *v = rng.random_range(-input_box..=input_box);
            }
            let x = x.to_vec();
            let y = ys.row_mut(i);
            if pair {
                for v in y.iter_mut() {
                    *v = rng.random_range(-input_box..=input_box);
                }
            } else if (probe_index - n_pairs).is_multiple_of(2) {
                for (v, xv) in y.iter_mut().zip(&x) {
                    let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    *v = xv + s * SLOPE_PROBE_STEP;
                }
            } else {
                y.copy_from_slice(&x);
                let j = rng.random_range(0..d);
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                y[j] += s * SLOPE_PROBE_STEP;
            }
            probe_index += 1;
        }
        let fx = net.predict(&xs)?;
        let fy = net.predict(&ys)?;
        for i in 0..n {
            let dist = xs
                .row(i)
                .iter()
                .zip(ys.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if dist == 0.0 {
                continue;
            }
            let num: f64 = fx
                .row(i)
                .iter()
                .zip(fy.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum();
            best = best.max(num / dist);
        }
        remaining -= n;
    }
    Ok(best)
}

/// Signed weights of an MLP with elementwise 1-Lipschitz activations that
/// computes the same function as `net`.
///
/// A CReLU layer is an elementwise activation applied after `C = [I; I]`, so
/// `C` is folded into the preceding map; a residual block becomes
/// `C [(I + W⁺) (I + W⁻)]`.
pub fn equivalent_mlp(net: &Network) -> Result<Vec<Matrix>> {
    let eff = net.effective_weights()?;
    Ok(match eff {
        EffectiveWeights::Mlp(ws) => {
            let n = ws.len();
            ws.into_iter()
                .enumerate()
                .map(|(k, w)| match net.activation {
                    Activation::Crelu if k + 1 < n => duplicate_rows(&w),
                    _ => w,
                })
                .collect()
        }
        EffectiveWeights::Residual {
            first,
            blocks,
            last,
        } => {
            let d = first.rows();
            let mut layers = vec![duplicate_rows(&first)];
            for (p, m) in &blocks {
                let mut ip = p.clone();
                let mut im = m.clone();
                for i in 0..d {
                    ip[(i, i)] += 1.0;
                    im[(i, i)] += 1.0;
                }
                layers.push(duplicate_rows(&hstack(&ip, &im)));
            }
            layers.push(hstack(&last.0, &last.1));
            layers
        }
    })
}

/// The naive 1-path-norm of `net` and its subgradient on effective weights.
/// Residual networks use [`naive_crelu_path_norm`].
pub fn network_naive_grad(net: &Network) -> Result<(f64, EffectiveWeights)> {
    match net.effective_weights()? {
        EffectiveWeights::Mlp(ws) => {
            let (v, g) = layered_grad(&ws, net.activation == Activation::Crelu);
            Ok((v, EffectiveWeights::Mlp(g)))
        }
        EffectiveWeights::Residual {
            first,
            blocks,
            last,
        } => {
            let (v, g) = naive_crelu_path_norm_grad(&first, &blocks, &last)?;
            Ok((v, residual_grads(g)))
        }
    }
}

pub fn network_naive(net: &Network) -> Result<f64> {
    Ok(network_naive_grad(net)?.0)
}

/// The improved CReLU bound of a residual network and its subgradient.
pub fn network_improved_grad(net: &Network) -> Result<(f64, EffectiveWeights)> {
    match net.effective_weights()? {
        EffectiveWeights::Residual {
            first,
            blocks,
            last,
        } => {
            let (v, g) = improved_bound_crelu_grad(&first, &blocks, &last)?;
            Ok((v, residual_grads(g)))
        }
        EffectiveWeights::Mlp(_) => Err(Error::Config(
            "the improved bound applies to CReLU residual networks only".into(),
        )),
    }
}

fn residual_grads(g: CReLUBoundGrad) -> EffectiveWeights {
    EffectiveWeights::Residual {
        first: g.first,
        blocks: g.blocks,
        last: g.last,
    }
}

fn lengths_l1(l: &Lengths, rows: usize) -> f64 {
    match l {
        Lengths::Shared(g) => rows as f64 * g.abs(),
        Lengths::PerRow(g) => l1_norm(g),
    }
}

fn shared_value(l: &Lengths) -> Result<f64> {
    match l {
        Lengths::Shared(g) => Ok(*g),
        Lengths::PerRow(_) => Err(Error::Config(
            "closed-form path norm needs a shared length on every interior layer".into(),
        )),
    }
}

/// Closed-form path norm of a PSiLON network, plus its gradient with respect
/// to each layer's length parameters (in [`Network::lengths`] order).
pub fn network_closed_form_grad(net: &Network) -> Result<(f64, Vec<Lengths>)> {
    if !net.is_psilon() {
        return Err(Error::Config(
            "closed-form path norm needs L1-normalized layers with shared interior lengths".into(),
        ));
    }
    let lengths = net.lengths();
    let (last, interior) = lengths.split_last().unwrap();
    let interior: Vec<f64> = interior
        .iter()
        .map(|l| shared_value(l))
        .collect::<Result<_>>()?;
    let out_rows = net.out_dim();
    let head = lengths_l1(last, out_rows);
    let residual = matches!(net.body, Body::Residual { .. });
    let factor = |i: usize, g: f64| {
        if residual && i > 0 {
            1.0 + g.abs()
        } else {
            g.abs()
        }
    };
    let factors: Vec<f64> = interior
        .iter()
        .enumerate()
        .map(|(i, &g)| factor(i, g))
        .collect();
    let value = head * factors.iter().product::<f64>();

    let mut grads = Vec::with_capacity(lengths.len());
    for (i, &g) in interior.iter().enumerate() {
        let others: f64 = factors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, f)| f)
            .product();
        grads.push(Lengths::Shared(head * others * sign0(g)));
    }
    let rest: f64 = factors.iter().product();
    grads.push(match last {
        Lengths::Shared(g) => Lengths::Shared(rest * out_rows as f64 * sign0(*g)),
        Lengths::PerRow(g) => Lengths::PerRow(g.iter().map(|&x| rest * sign0(x)).collect()),
    });
    Ok((value, grads))
}

pub fn network_closed_form(net: &Network) -> Result<f64> {
    Ok(network_closed_form_grad(net)?.0)
}

/// Options for [`analyze`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    pub oracle: bool,
    /// Random pairs for the empirical Lipschitz probe; 0 skips it.
    pub lipschitz_pairs: usize,
    pub input_box: f64,
    pub exact_dim_limit: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            oracle: false,
            lipschitz_pairs: 0,
            input_box: 1.0,
            exact_dim_limit: crate::linalg::DEFAULT_EXACT_DIM_LIMIT,
        }
    }
}

/// Every capacity bound of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathNormReport {
    pub naive_p1: f64,
    pub improved_p1: Option<f64>,
    pub closed_form: Option<f64>,
    pub product_bound: f64,
    pub product_bound_exact: bool,
    pub oracle_p1: Option<f64>,
    pub empirical_lipschitz: Option<f64>,
}

/// Builds the report for `net`. An oracle that would exceed the enumeration
/// limit is left out and explained in the returned warnings.
pub fn analyze(
    net: &Network,
    opts: &AnalyzeOptions,
    rng: &mut Rng,
) -> Result<(PathNormReport, Vec<String>)> {
    let mut warnings = Vec::new();
    let naive_p1 = network_naive(net)?;
    let improved_p1 = match net.body {
        Body::Residual { .. } => Some(network_improved_grad(net)?.0),
        Body::Mlp(_) => None,
    };
    let closed_form = if net.is_psilon() {
        Some(network_closed_form(net)?)
    } else {
        None
    };
    let product = product_bound(&equivalent_mlp(net)?, opts.exact_dim_limit)?;
    let oracle_p1 = if opts.oracle {
        let graph = match net.effective_weights()? {
            EffectiveWeights::Mlp(_) => equivalent_mlp(net)?,
            EffectiveWeights::Residual {
                first,
                blocks,
                last,
            } => crelu_distinct_path_graph(&first, &blocks, &last)?,
        };
        match path_norm_enumerate(&graph) {
            Ok(v) => Some(v),
            Err(Error::Resource(msg)) => {
                warnings.push(format!("oracle skipped: {msg}"));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let empirical = if opts.lipschitz_pairs > 0 {
        Some(empirical_lipschitz(
            net,
            opts.lipschitz_pairs,
            opts.input_box,
            rng,
        )?)
    } else {
        None
    };
    let report = PathNormReport {
        naive_p1,
        improved_p1,
        closed_form,
        product_bound: product.value,
        product_bound_exact: product.exact,
        oracle_p1,
        empirical_lipschitz: empirical,
    };
    Ok((report, warnings))
}
