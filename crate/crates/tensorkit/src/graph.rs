//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Nodes only reference earlier nodes, so the tape
//! order is a topological order and backward simply walks it in reverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Option<Vec<f64>> },
    LeakyRelu { x: Var, slope: f64 },
    Softplus { x: Var },
    Sigmoid { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dense { x: Var, weight: Var, bias: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Reshape { x: Var },
    /// Scalar-valued op whose local gradients were computed eagerly in forward.
    Scalar { inputs: Vec<(Var, Vec<f64>)> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    /// Discrete branch decisions (activation signs, argmax picks, |·| signs).
    kinks: u64,
}

/// A single forward/backward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn finite_or_err(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::Numeric(format!("{name} produced a non-finite value")))
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn hash_of<T: Hash>(v: T) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, kinks: u64) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op, kinks });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf, 0)
    }

    /// Non-trainable leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf, 0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Hash of every discrete branch decision taken during forward. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            n.kinks.hash(&mut h);
        }
        h.finish()
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let (c_out, kc, kh, kw) = match self.value(kernel).shape() {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => return Err(TensorError::Dimension(format!("conv kernel must be [O,C,kH,kW], got {s:?}"))),
        };
        if kc != c_in {
            return Err(TensorError::Dimension(format!("conv kernel expects {kc} input channels, input has {c_in}")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(TensorError::Dimension(format!(
                "conv bias must be [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::Dimension(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom { c_in, h, w, kh, kw, pad, ho: h + 2 * pad - kh + 1, wo: w + 2 * pad - kw + 1 };
        let n = geom.col_cols();
        let mut out = vec![0.0; c_out * n];
        let cols = if geom.is_pointwise() { None } else { Some(kernels::im2col(self.value(input).data(), &geom)) };
        {
            let x = cols.as_deref().unwrap_or_else(|| self.value(input).data());
            kernels::gemm(c_out, geom.col_rows(), n, self.value(kernel).data(), false, x, false, &mut out, false);
        }
        let b = self.value(bias).data();
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += b[o]);
        }
        finite_or_err("conv2d", &out)?;
        let value = Tensor::new(vec![c_out, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(value, rg, Op::Conv2d { input, kernel, bias, geom, cols }, 0))
    }

    /// `x` where positive, `slope·x` otherwise. The kink at 0 takes the negative branch.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(TensorError::Argument(format!("leaky slope {slope} outside [0,1)")));
        }
        let src = self.value(x);
        let data: Vec<f64> = src.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let kinks = hash_of(src.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>());
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::LeakyRelu { x, slope }, kinks))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data: Vec<f64> = src
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() })
            .collect();
        finite_or_err("softplus", &data)?;
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softplus { x }, 0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data: Vec<f64> = src.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Sigmoid { x }, 0))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Dimension(format!("{h}x{w} not divisible by pool size {k}")));
        }
        let (out, argmax) = kernels::max_pool(self.value(x).data(), c, h, w, k);
        let kinks = hash_of(&argmax);
        let value = Tensor::new(vec![c, h / k, w / k], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }, kinks))
    }

    /// `weight · x + bias`. `x` may have any shape; it is read in row-major order.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).len();
        let (m, wn) = match self.value(weight).shape() {
            &[m, wn] => (m, wn),
            s => return Err(TensorError::Dimension(format!("dense weight must be [m,n], got {s:?}"))),
        };
        if wn != n {
            return Err(TensorError::Dimension(format!("dense weight expects {wn} inputs, got {n}")));
        }
        if self.value(bias).shape() != [m] {
            return Err(TensorError::Dimension(format!("dense bias must be [{m}], got {:?}", self.value(bias).shape())));
        }
        let mut out = self.value(bias).data().to_vec();
        kernels::gemm(m, n, 1, self.value(weight).data(), false, self.value(x).data(), false, &mut out, true);
        finite_or_err("dense", &out)?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(Tensor::from_vec(out)?, rg, Op::Dense { x, weight, bias }, 0))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(TensorError::Dimension(format!("spatial mismatch {ha}x{wa} vs {hb}x{wb}")));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![ca + cb, ha, wa], data)?, rg, Op::Concat { a, b }, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Dimension(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        finite_or_err("add", &data)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }, 0))
    }

    /// Inverted dropout: in training, each element survives with probability
    /// `1 - p` and is scaled by `1 / (1 - p)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Argument(format!("dropout rate {p} outside [0,1)")));
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = if training && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
        } else {
            vec![1.0; n]
        };
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }, 0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }, 0))
    }

    /// Records a scalar computed outside the graph together with its local
    /// gradient with respect to each input. `kinks` identifies the smooth
    /// piece the value was computed on (0 when the function is smooth).
    pub fn scalar_op(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>, kinks: u64) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numeric("scalar op produced a non-finite value".into()));
        }
        for (v, g) in &inputs {
            if g.len() != self.value(*v).len() {
                return Err(TensorError::Dimension(format!(
                    "local gradient of length {} for input of length {}",
                    g.len(),
                    self.value(*v).len()
                )));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(value), rg, Op::Scalar { inputs }, kinks))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut inputs = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
            inputs.push((v, vec![w]));
        }
        self.scalar_op(total, inputs, 0)
    }

    /// Reverse sweep from a scalar root. May be called once per graph.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Graph("backward already ran on this graph; rebuild it with a new forward".into()));
        }
        if self.value(root).len() != 1 {
            return Err(TensorError::Graph(format!("backward root must be scalar, has shape {:?}", self.value(root).shape())));
        }
        self.backward_done = true;
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.apply_backward(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if node.requires_grad {
            add_into(&mut node.grad, g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn apply_backward(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let c_out = self.value(*kernel).shape()[0];
                let n = geom.col_cols();
                let k = geom.col_rows();
                if self.wants(*bias) {
                    let gb: Vec<f64> = g.chunks(n).map(|row| row.iter().sum()).collect();
                    self.accumulate(*bias, &gb);
                }
                if self.wants(*kernel) {
                    let mut gk = vec![0.0; c_out * k];
                    let x = cols.as_deref().unwrap_or_else(|| self.value(*input).data());
                    kernels::gemm(c_out, n, k, g, false, x, true, &mut gk, false);
                    self.accumulate(*kernel, &gk);
                }
                if self.wants(*input) {
                    let mut gcols = vec![0.0; k * n];
                    kernels::gemm(k, c_out, n, self.value(*kernel).data(), true, g, false, &mut gcols, false);
                    if geom.is_pointwise() {
                        self.accumulate(*input, &gcols);
                    } else {
                        let mut gi = vec![0.0; geom.c_in * geom.h * geom.w];
                        kernels::col2im_add(&gcols, geom, &mut gi);
                        self.accumulate(*input, &gi);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let gi: Vec<f64> =
                    self.value(*x).data().iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { slope * d }).collect();
                self.accumulate(*x, &gi);
            }
            Op::Softplus { x } => {
                let gi: Vec<f64> = self.value(*x).data().iter().zip(g).map(|(&v, &d)| sigmoid(v) * d).collect();
                self.accumulate(*x, &gi);
            }
            Op::Sigmoid { x: src } => {
                let gi: Vec<f64> = self.nodes[i].value.data().iter().zip(g).map(|(&s, &d)| s * (1.0 - s) * d).collect();
                self.accumulate(*src, &gi);
            }
            Op::MaxPool { x, argmax } => {
                let mut gi = vec![0.0; self.value(*x).len()];
                for (&idx, &d) in argmax.iter().zip(g) {
                    gi[idx] += d;
                }
                self.accumulate(*x, &gi);
            }
            Op::Dense { x, weight, bias } => {
                let m = g.len();
                let n = self.value(*x).len();
                self.accumulate(*bias, g);
                if self.wants(*weight) {
                    let mut gw = vec![0.0; m * n];
                    kernels::gemm(m, 1, n, g, false, self.value(*x).data(), false, &mut gw, false);
                    self.accumulate(*weight, &gw);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; n];
                    kernels::gemm(n, m, 1, self.value(*weight).data(), true, g, false, &mut gx, false);
                    self.accumulate(*x, &gx);
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                self.accumulate(*a, &g[..na]);
                self.accumulate(*b, &g[na..]);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Dropout { x, mask } => {
                let gi: Vec<f64> = g.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accumulate(*x, &gi);
            }
            Op::Reshape { x } => self.accumulate(*x, g),
            Op::Scalar { inputs } => {
                let d = g[0];
                for (v, local) in inputs {
                    let gi: Vec<f64> = local.iter().map(|l| l * d).collect();
                    self.accumulate(*v, &gi);
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
