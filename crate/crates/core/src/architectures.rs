//! PSiLON / S-Net MLPs and CReLU residual networks.
//!
//! A network stores raw directions and length parameters; effective weights
//! are materialized from them on every forward pass, so row-norm constraints
//! hold by construction no matter how the raw parameters move.
//!
//! Forward and backward passes are batched: inputs are `n x d_in` matrices,
//! one sample per row.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthogonal_init, Matrix, Rng};
use crate::normalization::{
    effective_weight, effective_weight_vjp, pair_effective, pair_effective_vjp, NormMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Mlp,
    CreluResnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Crelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutNonlinearity {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    SelfRows,
    CreluMaxRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lengths {
    /// One scalar shared by every row of the layer.
    Shared(f64),
    PerRow(Vec<f64>),
}

impl Lengths {
    pub fn get(&self, row: usize) -> f64 {
        match self {
            Lengths::Shared(g) => *g,
            Lengths::PerRow(g) => g[row],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Lengths::Shared(_) => 1,
            Lengths::PerRow(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Lengths::Shared(g) => std::slice::from_ref(g),
            Lengths::PerRow(g) => g,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Lengths::Shared(g) => std::slice::from_mut(g),
            Lengths::PerRow(g) => g,
        }
    }

    fn zeros_like(&self) -> Lengths {
        match self {
            Lengths::Shared(_) => Lengths::Shared(0.0),
            Lengths::PerRow(g) => Lengths::PerRow(vec![0.0; g.len()]),
        }
    }

    /// Accumulates a per-row gradient into this (gradient) container.
    fn accumulate(&mut self, row: usize, grad: f64) {
        match self {
            Lengths::Shared(g) => *g += grad,
            Lengths::PerRow(g) => g[row] += grad,
        }
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        match self {
            Lengths::PerRow(g) if g.len() != rows => {
                Err(Error::dim("Lengths::PerRow", rows, g.len()))
            }
            _ => Ok(()),
        }
    }
}

/// A weight matrix stored as raw direction rows plus lengths, normalized row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLinear {
    pub raw: Matrix,
    pub lengths: Lengths,
    pub bias: Option<Vec<f64>>,
    pub mode: NormMode,
}

impl NormalizedLinear {
    pub fn new(
        raw: Matrix,
        lengths: Lengths,
        bias: Option<Vec<f64>>,
        mode: NormMode,
    ) -> Result<Self> {
        let layer = NormalizedLinear {
            raw,
            lengths,
            bias,
            mode,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        self.lengths.check_rows(self.raw.rows())?;
        if let Some(b) = &self.bias {
            if b.len() != self.raw.rows() {
                return Err(Error::dim(
                    "NormalizedLinear bias",
                    self.raw.rows(),
                    b.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.raw.rows()
    }

    pub fn effective(&self) -> Result<Matrix> {
        if self.mode == NormMode::None {
            return Ok(self.raw.clone());
        }
        let mut w = Matrix::zeros(self.raw.rows(), self.raw.cols());
        for r in 0..self.raw.rows() {
            let row = effective_weight(self.raw.row(r), self.lengths.get(r), self.mode)?;
            w.row_mut(r).copy_from_slice(&row);
        }
        Ok(w)
    }

    /// Maps `∂L/∂W` (effective weight) to `(∂L/∂raw, ∂L/∂lengths)`.
    pub fn pullback(&self, grad_w: &Matrix) -> Result<(Matrix, Lengths)> {
        let mut graw = Matrix::zeros(self.raw.rows(), self.raw.cols());
        let mut glen = self.lengths.zeros_like();
        if self.mode == NormMode::None {
            return Ok((grad_w.clone(), glen));
        }
        for r in 0..self.raw.rows() {
            let g = effective_weight_vjp(
                self.raw.row(r),
                self.lengths.get(r),
                self.mode,
                grad_w.row(r),
            )?;
            graw.row_mut(r).copy_from_slice(&g.v);
            glen.accumulate(r, g.g);
        }
        Ok((graw, glen))
    }
}

/// A `(W⁺, W⁻)` pair acting on CReLU features, with rows of both matrices
/// normalized by the rows of `max(|W⁺|, |W⁻|)` and one set of lengths.
///
/// Residual blocks use it with a shared scalar length; the final layer of a
/// residual network uses it with a per-row length vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CReLUPairLinear {
    pub plus: Matrix,
    pub minus: Matrix,
    pub lengths: Lengths,
    pub bias: Option<Vec<f64>>,
    pub mode: NormMode,
}

/// `z + W⁺σ⁺(z) + W⁻σ⁻(z) + b`.
pub type CReLUResidualBlock = CReLUPairLinear;

impl CReLUPairLinear {
    pub fn new(
        plus: Matrix,
        minus: Matrix,
        lengths: Lengths,
        bias: Option<Vec<f64>>,
        mode: NormMode,
    ) -> Result<Self> {
        let layer = CReLUPairLinear {
            plus,
            minus,
            lengths,
            bias,
            mode,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if self.plus.shape() != self.minus.shape() {
            return Err(Error::dim(
                "CReLUPairLinear",
                format!("{:?}", self.plus.shape()),
                format!("{:?}", self.minus.shape()),
            ));
        }
        self.lengths.check_rows(self.plus.rows())?;
        if let Some(b) = &self.bias {
            if b.len() != self.plus.rows() {
                return Err(Error::dim(
                    "CReLUPairLinear bias",
                    self.plus.rows(),
                    b.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.plus.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.plus.rows()
    }

    pub fn effective(&self) -> Result<(Matrix, Matrix)> {
        if self.mode == NormMode::None {
            return Ok((self.plus.clone(), self.minus.clone()));
        }
        let (rows, cols) = self.plus.shape();
        let mut wp = Matrix::zeros(rows, cols);
        let mut wm = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let (a, b) = pair_effective(
                self.plus.row(r),
                self.minus.row(r),
                self.lengths.get(r),
                self.mode,
            )?;
            wp.row_mut(r).copy_from_slice(&a);
            wm.row_mut(r).copy_from_slice(&b);
        }
        Ok((wp, wm))
    }

    pub fn pullback(&self, gp: &Matrix, gm: &Matrix) -> Result<(Matrix, Matrix, Lengths)> {
        let mut glen = self.lengths.zeros_like();
        if self.mode == NormMode::None {
            return Ok((gp.clone(), gm.clone(), glen));
        }
        let (rows, cols) = self.plus.shape();
        let mut dp = Matrix::zeros(rows, cols);
        let mut dm = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let g = pair_effective_vjp(
                self.plus.row(r),
                self.minus.row(r),
                self.lengths.get(r),
                self.mode,
                gp.row(r),
                gm.row(r),
            )?;
            dp.row_mut(r).copy_from_slice(&g.plus);
            dm.row_mut(r).copy_from_slice(&g.minus);
            glen.accumulate(r, g.g);
        }
        Ok((dp, dm, glen))
    }
}

/// Everything after the first linear map.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Remaining MLP layers; the last entry is the output layer. Empty for a
    /// single-layer network.
    Mlp(Vec<NormalizedLinear>),
    Residual {
        blocks: Vec<CReLUResidualBlock>,
        last: CReLUPairLinear,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub first: NormalizedLinear,
    pub body: Body,
    /// Hidden nonlinearity of MLPs. Residual networks always use CReLU.
    pub activation: Activation,
    pub out_nonlinearity: OutNonlinearity,
    /// Keeps the lengths of every layer but the last fixed during training.
    pub freeze_interior_lengths: bool,
}

/// Materialized effective weights.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectiveWeights {
    Mlp(Vec<Matrix>),
    Residual {
        first: Matrix,
        blocks: Vec<(Matrix, Matrix)>,
        last: (Matrix, Matrix),
    },
}

impl EffectiveWeights {
    /// Every effective matrix in layer order, `+` before `-` within a pair.
    pub fn matrices(&self) -> Vec<&Matrix> {
        match self {
            EffectiveWeights::Mlp(ws) => ws.iter().collect(),
            EffectiveWeights::Residual {
                first,
                blocks,
                last,
            } => {
                let mut out = vec![first];
                for (p, m) in blocks {
                    out.push(p);
                    out.push(m);
                }
                out.push(&last.0);
                out.push(&last.1);
                out
            }
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            EffectiveWeights::Mlp(ws) => ws.iter_mut().collect(),
            EffectiveWeights::Residual {
                first,
                blocks,
                last,
            } => {
                let mut out = vec![first];
                for (p, m) in blocks.iter_mut() {
                    out.push(p);
                    out.push(m);
                }
                out.push(&mut last.0);
                out.push(&mut last.1);
                out
            }
        }
    }

    pub fn zeros_like(&self) -> EffectiveWeights {
        let mut z = self.clone();
        for m in z.matrices_mut() {
            m.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &EffectiveWeights) -> Result<()> {
        let theirs = other.matrices();
        let mut ours = self.matrices_mut();
        if ours.len() != theirs.len() {
            return Err(Error::dim(
                "EffectiveWeights::add_assign",
                ours.len(),
                theirs.len(),
            ));
        }
        for (a, b) in ours.iter_mut().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// Gradients with respect to effective weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGrads {
    pub weights: EffectiveWeights,
    /// One entry per linear layer in order; empty for layers without bias.
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Raw,
    RawMinus,
    Length,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKind {
    /// Index of the linear layer: 0 is the first map, the output layer is last.
    pub layer: usize,
    pub role: ParamRole,
}

/// Values retained by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Matrix,
    /// MLP: pre-activations of every hidden layer. Residual: the input of each
    /// block followed by the input of the final CReLU.
    pub pre: Vec<Matrix>,
    /// Output before `σ_out`.
    pub logits: Matrix,
    pub output: Matrix,
    pub effective: EffectiveWeights,
    fingerprint: u64,
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `[ReLU(z); −ReLU(−z)]`.
pub fn crelu(z: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = z.iter().map(|&x| relu(x)).collect();
    out.extend(z.iter().map(|&x| -relu(-x)));
    out
}

fn crelu_rows(z: &Matrix) -> Matrix {
    let (n, d) = z.shape();
    let mut out = Matrix::zeros(n, 2 * d);
    for r in 0..n {
        let src = z.row(r);
        let dst = out.row_mut(r);
        for j in 0..d {
            dst[j] = relu(src[j]);
            dst[d + j] = -relu(-src[j]);
        }
    }
    out
}

fn activate(z: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::Relu => z.map(relu),
        Activation::Crelu => crelu_rows(z),
    }
}

/// `∂L/∂z` from `∂L/∂σ(z)`. Subgradients at 0 are 0.
fn activate_backward(z: &Matrix, grad_h: &Matrix, act: Activation) -> Matrix {
    let (n, d) = z.shape();
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        let zr = z.row(r);
        let gh = grad_h.row(r);
        let o = out.row_mut(r);
        match act {
            Activation::Relu => {
                for j in 0..d {
                    o[j] = if zr[j] > 0.0 { gh[j] } else { 0.0 };
                }
            }
            Activation::Crelu => {
                for j in 0..d {
                    o[j] = if zr[j] > 0.0 {
                        gh[j]
                    } else if zr[j] < 0.0 {
                        gh[d + j]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    out
}

fn positive_part(z: &Matrix) -> Matrix {
    z.map(relu)
}

fn negative_part(z: &Matrix) -> Matrix {
    z.map(|x| -relu(-x))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(h: &Matrix, w: &Matrix, bias: Option<&Vec<f64>>) -> Result<Matrix> {
    let mut z = h.matmul_nt(w)?;
    if let Some(b) = bias {
        z.add_row_broadcast(b)?;
    }
    Ok(z)
}

/// `z + W⁺σ⁺(z) + W⁻σ⁻(z) + b` for a single vector, using effective weights.
pub fn block_forward(block: &CReLUResidualBlock, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != block.in_dim() || block.in_dim() != block.out_dim() {
        return Err(Error::dim("block_forward", block.in_dim(), z.len()));
    }
    let (wp, wm) = block.effective()?;
    let pos: Vec<f64> = z.iter().map(|&x| relu(x)).collect();
    let neg: Vec<f64> = z.iter().map(|&x| -relu(-x)).collect();
    let a = wp.matvec(&pos)?;
    let b = wm.matvec(&neg)?;
    let mut out: Vec<f64> = z
        .iter()
        .zip(a)
        .zip(b)
        .map(|((x, p), m)| x + p + m)
        .collect();
    if let Some(bias) = &block.bias {
        for (o, bi) in out.iter_mut().zip(bias) {
            *o += bi;
        }
    }
    Ok(out)
}

impl Network {
    pub fn kind(&self) -> NetworkKind {
        match self.body {
            Body::Mlp(_) => NetworkKind::Mlp,
            Body::Residual { .. } => NetworkKind::CreluResnet,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        match &self.body {
            Body::Mlp(rest) => rest.last().unwrap_or(&self.first).out_dim(),
            Body::Residual { last, .. } => last.out_dim(),
        }
    }

    /// Number of linear layers, counting a residual block as one.
    pub fn num_layers(&self) -> usize {
        match &self.body {
            Body::Mlp(rest) => 1 + rest.len(),
            Body::Residual { blocks, .. } => 2 + blocks.len(),
        }
    }

    /// Input dimension followed by the output dimension of every layer.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim(), self.first.out_dim()];
        match &self.body {
            Body::Mlp(rest) => dims.extend(rest.iter().map(|l| l.out_dim())),
            Body::Residual { blocks, last } => {
                dims.extend(blocks.iter().map(|b| b.out_dim()));
                dims.push(last.out_dim());
            }
        }
        dims
    }

    pub fn modes(&self) -> Vec<NormMode> {
        let mut modes = vec![self.first.mode];
        match &self.body {
            Body::Mlp(rest) => modes.extend(rest.iter().map(|l| l.mode)),
            Body::Residual { blocks, last } => {
                modes.extend(blocks.iter().map(|b| b.mode));
                modes.push(last.mode);
            }
        }
        modes
    }

    /// Sets the mode of every layer currently in `L1wn` or `Blend` mode.
    pub fn install_blend(&mut self, alpha: f64) {
        let target = NormMode::Blend { alpha };
        let update = |mode: &mut NormMode| {
            if matches!(mode, NormMode::L1wn | NormMode::Blend { .. }) {
                *mode = target;
            }
        };
        update(&mut self.first.mode);
        match &mut self.body {
            Body::Mlp(rest) => rest.iter_mut().for_each(|l| update(&mut l.mode)),
            Body::Residual { blocks, last } => {
                blocks.iter_mut().for_each(|b| update(&mut b.mode));
                update(&mut last.mode);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        match &self.body {
            Body::Mlp(rest) => {
                let mut fan_in = self.first.out_dim();
                for (i, layer) in rest.iter().enumerate() {
                    layer.validate()?;
                    let expected = match self.activation {
                        Activation::Relu => fan_in,
                        Activation::Crelu => 2 * fan_in,
                    };
                    if layer.in_dim() != expected {
                        return Err(Error::dim(
                            "Network layer chain",
                            format!("fan-in {expected} at layer {}", i + 1),
                            layer.in_dim(),
                        ));
                    }
                    fan_in = layer.out_dim();
                }
            }
            Body::Residual { blocks, last } => {
                let d = self.first.out_dim();
                for (i, b) in blocks.iter().enumerate() {
                    b.validate()?;
                    if b.in_dim() != d || b.out_dim() != d {
                        return Err(Error::dim(
                            "residual block",
                            format!("{d}x{d} at block {i}"),
                            format!("{}x{}", b.out_dim(), b.in_dim()),
                        ));
                    }
                }
                last.validate()?;
                if last.in_dim() != d {
                    return Err(Error::dim("residual output layer", d, last.in_dim()));
                }
            }
        }
        Ok(())
    }

    pub fn effective_weights(&self) -> Result<EffectiveWeights> {
        match &self.body {
            Body::Mlp(rest) => {
                let mut ws = vec![self.first.effective()?];
                for l in rest {
                    ws.push(l.effective()?);
                }
                Ok(EffectiveWeights::Mlp(ws))
            }
            Body::Residual { blocks, last } => Ok(EffectiveWeights::Residual {
                first: self.first.effective()?,
                blocks: blocks
                    .iter()
                    .map(|b| b.effective())
                    .collect::<Result<_>>()?,
                last: last.effective()?,
            }),
        }
    }

    fn biases(&self) -> Vec<Option<&Vec<f64>>> {
        let mut out = vec![self.first.bias.as_ref()];
        match &self.body {
            Body::Mlp(rest) => out.extend(rest.iter().map(|l| l.bias.as_ref())),
            Body::Residual { blocks, last } => {
                out.extend(blocks.iter().map(|b| b.bias.as_ref()));
                out.push(last.bias.as_ref());
            }
        }
        out
    }

    /// Zero bias gradients shaped like this network's biases.
    pub fn zero_bias_grads(&self) -> Vec<Vec<f64>> {
        self.biases()
            .iter()
            .map(|b| b.map_or_else(Vec::new, |b| vec![0.0; b.len()]))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let trace = self.forward_batch(&Matrix::row_vector(x))?;
        Ok((trace.output.row(0).to_vec(), trace))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(x)?.output)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Trace> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim("Network::forward", self.in_dim(), x.cols()));
        }
        let effective = self.effective_weights()?;
        let biases = self.biases();
        let mut pre = Vec::new();
        let logits = match &effective {
            EffectiveWeights::Mlp(ws) => {
                let mut h = x.clone();
                let last = ws.len() - 1;
                let mut z = Matrix::zeros(0, 0);
                for (i, w) in ws.iter().enumerate() {
                    z = affine(&h, w, biases[i])?;
                    if i < last {
                        h = activate(&z, self.activation);
                        pre.push(std::mem::replace(&mut z, Matrix::zeros(0, 0)));
                    }
                }
                z
            }
            EffectiveWeights::Residual {
                first,
                blocks,
                last,
            } => {
                let mut z = affine(x, first, biases[0])?;
                for (i, (wp, wm)) in blocks.iter().enumerate() {
                    let mut next = z.clone();
                    next.add_assign(&positive_part(&z).matmul_nt(wp)?)?;
                    next.add_assign(&negative_part(&z).matmul_nt(wm)?)?;
                    if let Some(b) = biases[i + 1] {
                        next.add_row_broadcast(b)?;
                    }
                    pre.push(std::mem::replace(&mut z, next));
                }
                let mut out = positive_part(&z).matmul_nt(&last.0)?;
                out.add_assign(&negative_part(&z).matmul_nt(&last.1)?)?;
                if let Some(b) = biases[blocks.len() + 1] {
                    out.add_row_broadcast(b)?;
                }
                pre.push(z);
                out
            }
        };
        let output = match self.out_nonlinearity {
            OutNonlinearity::Identity => logits.clone(),
            OutNonlinearity::Sigmoid => logits.map(sigmoid),
        };
        Ok(Trace {
            input: x.clone(),
            pre,
            logits,
            output,
            effective,
            fingerprint: self.fingerprint(),
        })
    }

    /// Gradients with respect to effective weights and biases, given
    /// `∂L/∂output` for the batch in `trace`.
    pub fn backward_effective(
        &self,
        trace: &Trace,
        grad_output: &Matrix,
    ) -> Result<EffectiveGrads> {
        if trace.fingerprint != self.fingerprint() {
            return Err(Error::Contract(
                "trace was produced by different network parameters".into(),
            ));
        }
        if grad_output.shape() != trace.output.shape() {
            return Err(Error::dim(
                "Network::backward",
                format!("{:?}", trace.output.shape()),
                format!("{:?}", grad_output.shape()),
            ));
        }
        let mut dz = match self.out_nonlinearity {
            OutNonlinearity::Identity => grad_output.clone(),
            OutNonlinearity::Sigmoid => {
                let mut d = grad_output.clone();
                for (g, y) in d.data_mut().iter_mut().zip(trace.output.data()) {
                    *g *= y * (1.0 - y);
                }
                d
            }
        };
        let has_bias: Vec<bool> = self.biases().iter().map(Option::is_some).collect();
        let mut bias_grads = vec![Vec::new(); has_bias.len()];
        let bias_grad = |dz: &Matrix, i: usize| {
            if has_bias[i] {
                dz.column_sums()
            } else {
                Vec::new()
            }
        };

        let weights = match &trace.effective {
            EffectiveWeights::Mlp(ws) => {
                let mut grads = vec![Matrix::zeros(0, 0); ws.len()];
                for i in (0..ws.len()).rev() {
                    let h = if i == 0 {
                        trace.input.clone()
                    } else {
                        activate(&trace.pre[i - 1], self.activation)
                    };
                    grads[i] = dz.matmul_tn(&h)?;
                    bias_grads[i] = bias_grad(&dz, i);
                    if i > 0 {
                        let dh = dz.matmul(&ws[i])?;
                        dz = activate_backward(&trace.pre[i - 1], &dh, self.activation);
                    }
                }
                EffectiveWeights::Mlp(grads)
            }
            EffectiveWeights::Residual {
                first,
                blocks,
                last,
            } => {
                let nb = blocks.len();
                let z = &trace.pre[nb];
                let (pos, neg) = (positive_part(z), negative_part(z));
                let last_grad = (dz.matmul_tn(&pos)?, dz.matmul_tn(&neg)?);
                bias_grads[nb + 1] = bias_grad(&dz, nb + 1);
                let dpos = dz.matmul(&last.0)?;
                let dneg = dz.matmul(&last.1)?;
                dz = split_crelu_grad(z, &dpos, &dneg);

                let mut block_grads = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); nb];
                for b in (0..nb).rev() {
                    let zin = &trace.pre[b];
                    let (pos, neg) = (positive_part(zin), negative_part(zin));
                    block_grads[b] = (dz.matmul_tn(&pos)?, dz.matmul_tn(&neg)?);
                    bias_grads[b + 1] = bias_grad(&dz, b + 1);
                    let dpos = dz.matmul(&blocks[b].0)?;
                    let dneg = dz.matmul(&blocks[b].1)?;
                    dz.add_assign(&split_crelu_grad(zin, &dpos, &dneg))?;
                }
                let first_grad = dz.matmul_tn(&trace.input)?;
                bias_grads[0] = bias_grad(&dz, 0);
                debug_assert_eq!(first_grad.shape(), first.shape());
                EffectiveWeights::Residual {
                    first: first_grad,
                    blocks: block_grads,
                    last: last_grad,
                }
            }
        };
        Ok(EffectiveGrads {
            weights,
            biases: bias_grads,
        })
    }

    /// Flat parameter gradient (in [`Network::params`] order) for `∂L/∂output`.
    pub fn backward(&self, trace: &Trace, grad_output: &Matrix) -> Result<Vec<f64>> {
        let eg = self.backward_effective(trace, grad_output)?;
        self.pullback(&eg)
    }

    /// Maps gradients on effective weights and biases to raw parameters.
    pub fn pullback(&self, grads: &EffectiveGrads) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_params());
        let nlayers = self.num_layers();
        let push_len = |out: &mut Vec<f64>, layer: usize, g: &Lengths| {
            let frozen = self.freeze_interior_lengths && layer + 1 < nlayers;
            out.extend(g.values().iter().map(|&x| if frozen { 0.0 } else { x }));
        };
        let push_bias = |out: &mut Vec<f64>, layer: usize, has: bool| {
            if has {
                out.extend_from_slice(&grads.biases[layer]);
            }
        };
        match (&self.body, &grads.weights) {
            (Body::Mlp(rest), EffectiveWeights::Mlp(gw)) => {
                let layers: Vec<&NormalizedLinear> =
                    std::iter::once(&self.first).chain(rest.iter()).collect();
                if gw.len() != layers.len() {
                    return Err(Error::dim("Network::pullback", layers.len(), gw.len()));
                }
                for (i, (layer, g)) in layers.iter().zip(gw).enumerate() {
                    let (graw, glen) = layer.pullback(g)?;
                    out.extend_from_slice(graw.data());
                    push_len(&mut out, i, &glen);
                    push_bias(&mut out, i, layer.bias.is_some());
                }
            }
            (
                Body::Residual { blocks, last },
                EffectiveWeights::Residual {
                    first: gf,
                    blocks: gb,
                    last: gl,
                },
            ) => {
                if gb.len() != blocks.len() {
                    return Err(Error::dim("Network::pullback", blocks.len(), gb.len()));
                }
                let (graw, glen) = self.first.pullback(gf)?;
                out.extend_from_slice(graw.data());
                push_len(&mut out, 0, &glen);
                push_bias(&mut out, 0, self.first.bias.is_some());
                let pairs = blocks
                    .iter()
                    .zip(gb.iter())
                    .chain(std::iter::once((last, gl)));
                for (i, (layer, (gp, gm))) in pairs.enumerate() {
                    let (dp, dm, glen) = layer.pullback(gp, gm)?;
                    out.extend_from_slice(dp.data());
                    out.extend_from_slice(dm.data());
                    push_len(&mut out, i + 1, &glen);
                    push_bias(&mut out, i + 1, layer.bias.is_some());
                }
            }
            _ => {
                return Err(Error::Contract(
                    "gradient structure does not match network kind".into(),
                ))
            }
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.param_kinds().len()
    }

    /// Role of every entry of [`Network::params`].
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        let mut push = |layer: usize, role: ParamRole, n: usize| {
            out.extend(std::iter::repeat_n(ParamKind { layer, role }, n));
        };
        let mut plain = |i: usize, l: &NormalizedLinear| {
            push(i, ParamRole::Raw, l.raw.data().len());
            push(i, ParamRole::Length, l.lengths.len());
            push(i, ParamRole::Bias, l.bias.as_ref().map_or(0, Vec::len));
        };
        plain(0, &self.first);
        match &self.body {
            Body::Mlp(rest) => {
                for (i, l) in rest.iter().enumerate() {
                    plain(i + 1, l);
                }
            }
            Body::Residual { blocks, last } => {
                for (i, l) in blocks.iter().chain(std::iter::once(last)).enumerate() {
                    push(i + 1, ParamRole::Raw, l.plus.data().len());
                    push(i + 1, ParamRole::RawMinus, l.minus.data().len());
                    push(i + 1, ParamRole::Length, l.lengths.len());
                    push(i + 1, ParamRole::Bias, l.bias.as_ref().map_or(0, Vec::len));
                }
            }
        }
        out
    }

    /// All trainable values: per layer raw (then raw minus), lengths, bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let plain = |out: &mut Vec<f64>, l: &NormalizedLinear| {
            out.extend_from_slice(l.raw.data());
            out.extend_from_slice(l.lengths.values());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        };
        plain(&mut out, &self.first);
        match &self.body {
            Body::Mlp(rest) => rest.iter().for_each(|l| plain(&mut out, l)),
            Body::Residual { blocks, last } => {
                for l in blocks.iter().chain(std::iter::once(last)) {
                    out.extend_from_slice(l.plus.data());
                    out.extend_from_slice(l.minus.data());
                    out.extend_from_slice(l.lengths.values());
                    if let Some(b) = &l.bias {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if values.len() != expected {
            return Err(Error::dim("Network::set_params", expected, values.len()));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&values[pos..pos + dst.len()]);
            pos += dst.len();
        };
        let plain = |l: &mut NormalizedLinear, take: &mut dyn FnMut(&mut [f64])| {
            take(l.raw.data_mut());
            take(l.lengths.values_mut());
            if let Some(b) = &mut l.bias {
                take(b);
            }
        };
        plain(&mut self.first, &mut take);
        match &mut self.body {
            Body::Mlp(rest) => rest.iter_mut().for_each(|l| plain(l, &mut take)),
            Body::Residual { blocks, last } => {
                for l in blocks.iter_mut().chain(std::iter::once(last)) {
                    take(l.plus.data_mut());
                    take(l.minus.data_mut());
                    take(l.lengths.values_mut());
                    if let Some(b) = &mut l.bias {
                        take(b);
                    }
                }
            }
        }
        Ok(())
    }

    /// Length parameters of the first layer through the last, in order.
    pub fn lengths(&self) -> Vec<&Lengths> {
        let mut out = vec![&self.first.lengths];
        match &self.body {
            Body::Mlp(rest) => out.extend(rest.iter().map(|l| &l.lengths)),
            Body::Residual { blocks, last } => {
                out.extend(blocks.iter().map(|b| &b.lengths));
                out.push(&last.lengths);
            }
        }
        out
    }

    /// True when the closed-form path norm applies: every layer L1-normalized,
    /// every layer but the last sharing one scalar length.
    pub fn is_psilon(&self) -> bool {
        let modes = self.modes();
        let lengths = self.lengths();
        let n = lengths.len();
        modes.iter().all(NormMode::is_l1)
            && lengths[..n - 1]
                .iter()
                .all(|l| matches!(l, Lengths::Shared(_)))
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in self.params() {
            x.to_bits().hash(&mut h);
        }
        for m in self.modes() {
            match m {
                NormMode::L1wn => 0u8.hash(&mut h),
                NormMode::L2wn => 1u8.hash(&mut h),
                NormMode::L1proj => 2u8.hash(&mut h),
                NormMode::Blend { alpha } => {
                    3u8.hash(&mut h);
                    alpha.to_bits().hash(&mut h);
                }
                NormMode::None => 4u8.hash(&mut h),
            }
        }
        h.finish()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from_network(
            self, None,
        ))?)
    }

    pub fn from_json(s: &str) -> Result<Network> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        doc.into_network()
    }

    pub fn save(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let json = serde_json::to_string_pretty(&ModelDoc::from_network(self, seed))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_json(&s)
    }
}

/// Splits `∂L/∂[σ⁺(z); σ⁻(z)]` back onto `z`.
fn split_crelu_grad(z: &Matrix, dpos: &Matrix, dneg: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for ((o, &zi), (&p, &m)) in out
        .data_mut()
        .iter_mut()
        .zip(z.data())
        .zip(dpos.data().iter().zip(dneg.data()))
    {
        *o = if zi > 0.0 {
            p
        } else if zi < 0.0 {
            m
        } else {
            0.0
        };
    }
    out
}

/// Architecture recipe for [`init_network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub kind: NetworkKind,
    pub d_in: usize,
    pub width: usize,
    /// Hidden layers for an MLP, residual blocks for a residual network.
    pub depth: usize,
    pub d_out: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_out")]
    pub out_nonlinearity: OutNonlinearity,
    pub mode: NormMode,
    /// One scalar length per layer for every layer but the last.
    #[serde(default = "default_true")]
    pub share_lengths: bool,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default)]
    pub freeze_interior_lengths: bool,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_out() -> OutNonlinearity {
    OutNonlinearity::Identity
}

fn default_true() -> bool {
    true
}

impl NetSpec {
    /// PSiLON Net: L1 WN with one shared length per interior layer.
    pub fn psilon_mlp(d_in: usize, width: usize, depth: usize, d_out: usize) -> Self {
        NetSpec {
            kind: NetworkKind::Mlp,
            d_in,
            width,
            depth,
            d_out,
            activation: Activation::Relu,
            out_nonlinearity: OutNonlinearity::Identity,
            mode: NormMode::L1wn,
            share_lengths: true,
            bias: true,
            freeze_interior_lengths: false,
        }
    }

    /// S-Net: L2 WN with per-row lengths.
    pub fn snet_mlp(d_in: usize, width: usize, depth: usize, d_out: usize) -> Self {
        NetSpec {
            mode: NormMode::L2wn,
            share_lengths: false,
            ..NetSpec::psilon_mlp(d_in, width, depth, d_out)
        }
    }

    /// Unnormalized MLP.
    pub fn plain_mlp(d_in: usize, width: usize, depth: usize, d_out: usize) -> Self {
        NetSpec {
            mode: NormMode::None,
            share_lengths: false,
            ..NetSpec::psilon_mlp(d_in, width, depth, d_out)
        }
    }

    /// PSiLON ResNet with `blocks` CReLU residual blocks of width `width`.
    pub fn psilon_resnet(d_in: usize, width: usize, blocks: usize, d_out: usize) -> Self {
        NetSpec {
            kind: NetworkKind::CreluResnet,
            activation: Activation::Crelu,
            ..NetSpec::psilon_mlp(d_in, width, blocks, d_out)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.width == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.kind == NetworkKind::CreluResnet && self.activation != Activation::Crelu {
            return Err(Error::Config(
                "residual networks use the crelu activation".into(),
            ));
        }
        self.mode.validate()
    }
}

/// Orthogonal raw matrices; zero biases; MLP lengths 1; residual networks get
/// `W⁻ = W⁺` ("looks linear"), lengths 1 on the first and last maps and 0 on
/// every block, so a fresh residual network is affine in its input.
pub fn init_network(spec: &NetSpec, rng: &mut Rng) -> Result<Network> {
    spec.validate()?;
    let bias = |rows: usize| spec.bias.then(|| vec![0.0; rows]);
    let lengths = |rows: usize, interior: bool, value: f64| {
        if interior && spec.share_lengths {
            Lengths::Shared(value)
        } else {
            Lengths::PerRow(vec![value; rows])
        }
    };
    let first_interior = !(spec.kind == NetworkKind::Mlp && spec.depth == 0);
    let first_out = if first_interior {
        spec.width
    } else {
        spec.d_out
    };
    let first = NormalizedLinear::new(
        orthogonal_init(first_out, spec.d_in, rng),
        lengths(first_out, first_interior, 1.0),
        bias(first_out),
        spec.mode,
    )?;
    let body = match spec.kind {
        NetworkKind::Mlp => {
            let fan = |d: usize| match spec.activation {
                Activation::Relu => d,
                Activation::Crelu => 2 * d,
            };
            let mut rest = Vec::new();
            for i in 0..spec.depth {
                let last = i + 1 == spec.depth;
                let out = if last { spec.d_out } else { spec.width };
                rest.push(NormalizedLinear::new(
                    orthogonal_init(out, fan(spec.width), rng),
                    lengths(out, !last, 1.0),
                    bias(out),
                    spec.mode,
                )?);
            }
            Body::Mlp(rest)
        }
        NetworkKind::CreluResnet => {
            let d = spec.width;
            let mut blocks = Vec::new();
            for _ in 0..spec.depth {
                let plus = if spec.mode == NormMode::None {
                    Matrix::zeros(d, d)
                } else {
                    orthogonal_init(d, d, rng)
                };
                blocks.push(CReLUPairLinear::new(
                    plus.clone(),
                    plus,
                    lengths(d, true, 0.0),
                    bias(d),
                    spec.mode,
                )?);
            }
            let plus = orthogonal_init(spec.d_out, d, rng);
            let last = CReLUPairLinear::new(
                plus.clone(),
                plus,
                Lengths::PerRow(vec![1.0; spec.d_out]),
                bias(spec.d_out),
                spec.mode,
            )?;
            Body::Residual { blocks, last }
        }
    };
    let net = Network {
        first,
        body,
        activation: spec.activation,
        out_nonlinearity: spec.out_nonlinearity,
        freeze_interior_lengths: spec.freeze_interior_lengths,
    };
    net.validate()?;
    Ok(net)
}

/// On-disk model document. Floats are written by `serde_json` in their
/// shortest round-trip decimal form and parsed with correct rounding, so a
/// save/load cycle reproduces every `f64` bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub kind: NetworkKind,
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub out_nonlinearity: OutNonlinearity,
    pub layers: Vec<LayerDoc>,
    #[serde(default)]
    pub freeze_interior_lengths: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub raw: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_minus: Option<Matrix>,
    pub lengths: Lengths,
    pub bias: Option<Vec<f64>>,
    pub mode: NormMode,
    pub norm_source: NormSource,
}

impl LayerDoc {
    fn plain(l: &NormalizedLinear) -> Self {
        LayerDoc {
            raw: l.raw.clone(),
            raw_minus: None,
            lengths: l.lengths.clone(),
            bias: l.bias.clone(),
            mode: l.mode,
            norm_source: NormSource::SelfRows,
        }
    }

    fn pair(l: &CReLUPairLinear) -> Self {
        LayerDoc {
            raw: l.plus.clone(),
            raw_minus: Some(l.minus.clone()),
            lengths: l.lengths.clone(),
            bias: l.bias.clone(),
            mode: l.mode,
            norm_source: NormSource::CreluMaxRows,
        }
    }

    fn into_plain(self) -> Result<NormalizedLinear> {
        if self.raw_minus.is_some() || self.norm_source != NormSource::SelfRows {
            return Err(Error::Config("expected a self-normalized layer".into()));
        }
        NormalizedLinear::new(self.raw, self.lengths, self.bias, self.mode)
    }

    fn into_pair(self) -> Result<CReLUPairLinear> {
        let minus = self
            .raw_minus
            .ok_or_else(|| Error::Config("paired layer is missing raw_minus".into()))?;
        if self.norm_source != NormSource::CreluMaxRows {
            return Err(Error::Config("paired layer must use crelu_max_rows".into()));
        }
        CReLUPairLinear::new(self.raw, minus, self.lengths, self.bias, self.mode)
    }
}

impl ModelDoc {
    pub fn from_network(net: &Network, seed: Option<u64>) -> Self {
        let mut layers = vec![LayerDoc::plain(&net.first)];
        match &net.body {
            Body::Mlp(rest) => layers.extend(rest.iter().map(LayerDoc::plain)),
            Body::Residual { blocks, last } => {
                layers.extend(blocks.iter().map(LayerDoc::pair));
                layers.push(LayerDoc::pair(last));
            }
        }
        ModelDoc {
            kind: net.kind(),
            dims: net.dims(),
            activation: net.activation,
            out_nonlinearity: net.out_nonlinearity,
            layers,
            freeze_interior_lengths: net.freeze_interior_lengths,
            seed,
        }
    }

    pub fn into_network(self) -> Result<Network> {
        let mut layers = self.layers.into_iter();
        let first = layers
            .next()
            .ok_or_else(|| Error::Config("model has no layers".into()))?
            .into_plain()?;
        let body = match self.kind {
            NetworkKind::Mlp => Body::Mlp(layers.map(LayerDoc::into_plain).collect::<Result<_>>()?),
            NetworkKind::CreluResnet => {
                let mut pairs: Vec<CReLUPairLinear> =
                    layers.map(LayerDoc::into_pair).collect::<Result<_>>()?;
                let last = pairs
                    .pop()
                    .ok_or_else(|| Error::Config("residual model has no output layer".into()))?;
                Body::Residual {
                    blocks: pairs,
                    last,
                }
            }
        };
        let net = Network {
            first,
            body,
            activation: self.activation,
            out_nonlinearity: self.out_nonlinearity,
            freeze_interior_lengths: self.freeze_interior_lengths,
        };
        net.validate()?;
        if net.dims() != self.dims {
            return Err(Error::dim(
                "ModelDoc dims",
                format!("{:?}", net.dims()),
                format!("{:?}", self.dims),
            ));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{l1_norm, seeded_rng, standard_normal};

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn crelu_examples() {
        assert_eq!(crelu(&[1.0, -2.0]), vec![1.0, 0.0, 0.0, -2.0]);
        assert_eq!(crelu(&[0.0, 0.0]), vec![0.0; 4]);
        let z = [0.3, -1.2, 2.0];
        let scaled: Vec<f64> = z.iter().map(|x| 2.5 * x).collect();
        let expected: Vec<f64> = crelu(&z).iter().map(|x| 2.5 * x).collect();
        assert_eq!(crelu(&scaled), expected);
    }

    #[test]
    fn crelu_halves_have_disjoint_support() {
        let mut rng = seeded_rng(0);
        for _ in 0..100 {
            let z: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
            let c = crelu(&z);
            for j in 0..6 {
                assert_eq!(c[j] * c[6 + j], 0.0);
            }
        }
    }

    fn pair(plus: Matrix, minus: Matrix, g: f64, mode: NormMode) -> CReLUPairLinear {
        let d = plus.rows();
        CReLUPairLinear::new(plus, minus, Lengths::Shared(g), Some(vec![0.0; d]), mode).unwrap()
    }

    #[test]
    fn block_forward_examples() {
        let zero = pair(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            1.0,
            NormMode::None,
        );
        assert_eq!(block_forward(&zero, &[0.7, -0.4]).unwrap(), vec![0.7, -0.4]);

        let id = pair(
            Matrix::identity(2),
            Matrix::identity(2),
            1.0,
            NormMode::None,
        );
        assert_eq!(block_forward(&id, &[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn block_skip_form_matches_stacked_form() {
        let mut rng = seeded_rng(9);
        for _ in 0..50 {
            let d = 4;
            let plus = orthogonal_init(d, d, &mut rng);
            let minus = orthogonal_init(d, d, &mut rng);
            let block = pair(plus, minus, 0.7, NormMode::L1wn);
            let z: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            // [(I + W⁺) (I + W⁻)] · crelu(z)
            let (wp, wm) = block.effective().unwrap();
            let mut stacked = Matrix::zeros(d, 2 * d);
            for r in 0..d {
                for c in 0..d {
                    let id = if r == c { 1.0 } else { 0.0 };
                    stacked[(r, c)] = id + wp[(r, c)];
                    stacked[(r, d + c)] = id + wm[(r, c)];
                }
            }
            let a = stacked.matvec(&crelu(&z)).unwrap();
            let b = block_forward(&block, &z).unwrap();
            assert!(max_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn one_layer_mlp_is_affine() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap();
        let first = NormalizedLinear::new(
            w,
            Lengths::PerRow(vec![1.0, 1.0]),
            Some(vec![0.5, -0.25]),
            NormMode::None,
        )
        .unwrap();
        let net = Network {
            first,
            body: Body::Mlp(vec![]),
            activation: Activation::Relu,
            out_nonlinearity: OutNonlinearity::Identity,
            freeze_interior_lengths: false,
        };
        let (y, _) = net.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![-0.5, -1.75]);
    }

    #[test]
    fn fresh_resnet_passes_blocks_through() {
        let spec = NetSpec::psilon_resnet(3, 5, 3, 2);
        let net = init_network(&spec, &mut seeded_rng(4)).unwrap();
        let Body::Residual { last, .. } = &net.body else {
            panic!()
        };
        let mut rng = seeded_rng(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
            let (y, _) = net.forward(&x).unwrap();
            let z = net.first.effective().unwrap().matvec(&x).unwrap();
            let (wp, wm) = last.effective().unwrap();
            let c = crelu(&z);
            let yp = wp.matvec(&c[..5]).unwrap();
            let ym = wm.matvec(&c[5..]).unwrap();
            let expected: Vec<f64> = yp.iter().zip(&ym).map(|(a, b)| a + b).collect();
            assert!(max_diff(&y, &expected) < 1e-12);
        }
    }

    #[test]
    fn fresh_resnet_is_affine() {
        let spec = NetSpec::psilon_resnet(4, 6, 2, 3);
        let net = init_network(&spec, &mut seeded_rng(14)).unwrap();
        let mut rng = seeded_rng(15);
        let f = |x: &[f64]| net.forward(x).unwrap().0;
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let y: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let lhs: Vec<f64> = f(&x).iter().zip(f(&y)).map(|(a, b)| a + b).collect();
            let rhs: Vec<f64> = f(&xy)
                .iter()
                .zip(f(&[0.0; 4]))
                .map(|(a, b)| a + b)
                .collect();
            assert!(max_diff(&lhs, &rhs) < 1e-9);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetSpec::psilon_mlp(5, 8, 2, 1);
        let a = init_network(&spec, &mut seeded_rng(3)).unwrap();
        let b = init_network(&spec, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn fresh_mlp_rows_have_unit_norm() {
        let spec = NetSpec::psilon_mlp(5, 8, 2, 3);
        let net = init_network(&spec, &mut seeded_rng(1)).unwrap();
        for w in net.effective_weights().unwrap().matrices() {
            for r in w.row_iter() {
                assert!((l1_norm(r) - 1.0).abs() < 1e-12);
            }
        }
        let spec = NetSpec::snet_mlp(5, 8, 2, 3);
        let net = init_network(&spec, &mut seeded_rng(1)).unwrap();
        for w in net.effective_weights().unwrap().matrices() {
            for r in w.row_iter() {
                assert!((crate::linalg::l2_norm(r) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_weights_examples() {
        let spec = NetSpec::plain_mlp(3, 4, 1, 2);
        let net = init_network(&spec, &mut seeded_rng(2)).unwrap();
        let EffectiveWeights::Mlp(ws) = net.effective_weights().unwrap() else {
            panic!()
        };
        assert_eq!(ws[0], net.first.raw);

        let mut spec = NetSpec::psilon_resnet(3, 4, 2, 2);
        spec.mode = NormMode::L1wn;
        let mut net = init_network(&spec, &mut seeded_rng(2)).unwrap();
        let Body::Residual { blocks, .. } = &mut net.body else {
            panic!()
        };
        blocks[0].lengths = Lengths::Shared(-0.8);
        blocks[0].minus = orthogonal_init(4, 4, &mut seeded_rng(99));
        let EffectiveWeights::Residual { blocks, .. } = net.effective_weights().unwrap() else {
            panic!()
        };
        let tilde = blocks[0].0.max_abs(&blocks[0].1).unwrap();
        for r in tilde.row_iter() {
            assert!((l1_norm(r) - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip_and_kinds_align() {
        for spec in [
            NetSpec::psilon_mlp(3, 4, 2, 2),
            NetSpec::psilon_resnet(3, 4, 2, 2),
        ] {
            let mut net = init_network(&spec, &mut seeded_rng(6)).unwrap();
            let p = net.params();
            assert_eq!(p.len(), net.param_kinds().len());
            let shifted: Vec<f64> = p.iter().map(|x| x + 0.5).collect();
            net.set_params(&shifted).unwrap();
            assert_eq!(net.params(), shifted);
            assert!(net.set_params(&p[1..]).is_err());
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let spec = NetSpec::psilon_mlp(3, 4, 1, 1);
        let mut net = init_network(&spec, &mut seeded_rng(6)).unwrap();
        let (_, trace) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let mut p = net.params();
        p[0] += 0.1;
        net.set_params(&p).unwrap();
        let err = net.backward(&trace, &Matrix::filled(1, 1, 1.0));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let spec = NetSpec::psilon_resnet(3, 4, 2, 2);
        let net = init_network(&spec, &mut seeded_rng(6)).unwrap();
        let trace = net.forward_batch(&Matrix::filled(5, 3, 0.3)).unwrap();
        let g = net.backward(&trace, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_neuron_backward_matches_subgradient() {
        let v = vec![0.5, -1.5, 2.0];
        let g = 1.3;
        let first = NormalizedLinear::new(
            Matrix::row_vector(&v),
            Lengths::PerRow(vec![g]),
            None,
            NormMode::L1wn,
        )
        .unwrap();
        let net = Network {
            first,
            body: Body::Mlp(vec![]),
            activation: Activation::Relu,
            out_nonlinearity: OutNonlinearity::Identity,
            freeze_interior_lengths: false,
        };
        let x = [0.2, 0.7, -1.1];
        let (_, trace) = net.forward(&x).unwrap();
        let upstream = 2.5;
        let grads = net
            .backward(&trace, &Matrix::filled(1, 1, upstream))
            .unwrap();
        let expected = crate::normalization::l1wn_subgradient(&v, g, &x).unwrap();
        for i in 0..3 {
            assert!((grads[i] - upstream * expected[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        for spec in [
            NetSpec::psilon_mlp(3, 4, 2, 2),
            NetSpec::psilon_resnet(3, 4, 2, 2),
            NetSpec {
                activation: Activation::Crelu,
                ..NetSpec::snet_mlp(2, 3, 2, 1)
            },
        ] {
            let mut net = init_network(&spec, &mut seeded_rng(12)).unwrap();
            let mut rng = seeded_rng(13);
            let noisy: Vec<f64> = net
                .params()
                .iter()
                .map(|x| x + 1e-3 * standard_normal(&mut rng))
                .collect();
            net.set_params(&noisy).unwrap();
            let json = net.to_json().unwrap();
            let back = Network::from_json(&json).unwrap();
            assert_eq!(back, net);
            let bits = |n: &Network| n.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&net));
        }
    }

    #[test]
    fn model_json_rejects_bad_documents() {
        let spec = NetSpec::psilon_mlp(3, 4, 1, 2);
        let net = init_network(&spec, &mut seeded_rng(12)).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&net.to_json().unwrap()).unwrap();
        doc["dims"] = serde_json::json!([3, 4, 3]);
        assert!(Network::from_json(&doc.to_string()).is_err());
        let mut doc: serde_json::Value = serde_json::from_str(&net.to_json().unwrap()).unwrap();
        doc["unexpected"] = serde_json::json!(1);
        assert!(Network::from_json(&doc.to_string()).is_err());
    }
}
