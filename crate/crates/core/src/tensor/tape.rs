//! The computation tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller indices than the node itself. Backward walks indices downward,
//! which visits each node after all of its consumers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::exact;
use super::kernels::{self, ConvGeometry};
use super::{numel, Real, Result, Tensor, TensorError, TensorId};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    /// `out[o] = x[index[o]]`; covers max/min reductions, pooling,
    /// broadcasting, transposition and nearest upsampling.
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
    },
    Blur {
        x: usize,
        taps: Vec<T>,
        planes: usize,
        h: usize,
        w: usize,
    },
    LogSoftmax {
        x: usize,
        cols: usize,
    },
}

#[derive(Debug)]
enum Origin<T> {
    Constant,
    Leaf(TensorId),
    Op(Op<T>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    tracked: bool,
    origin: Origin<T>,
}

/// Records operations for reverse-mode differentiation. One tape per
/// forward/backward pass; a tape is single-threaded.
#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, keyed by the leaf tensor they belong to.
///
/// A tensor recorded several times keeps one contribution per recording.
/// Since gradient buffers sum exactly, summing N losses on one tape lands
/// on the same buffer as N separate accumulations.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    parts: HashMap<TensorId, Vec<Vec<T>>>,
    total: HashMap<TensorId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn from_parts(parts: HashMap<TensorId, Vec<Vec<T>>>) -> Self {
        let total = parts
            .iter()
            .map(|(id, list)| {
                let sum = if list.len() == 1 {
                    list[0].clone()
                } else {
                    (0..list[0].len())
                        .map(|k| T::lit(exact::sum(list.iter().map(|g| g[k].as_f64()))))
                        .collect()
                };
                (*id, sum)
            })
            .collect();
        Gradients { parts, total }
    }

    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.total.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// Adds each leaf gradient into the `grad` buffer of the matching
    /// trainable tensor. Tensors without a recorded gradient are untouched.
    pub fn accumulate_into<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    ) -> Result<()> {
        for p in params {
            if !p.requires_grad() {
                continue;
            }
            if let Some(list) = self.parts.get(&p.id()) {
                for g in list {
                    p.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a [C,H,W] tensor, got shape {shape:?}"),
        }),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Drops every node. Variables from before the clear become foreign.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(TensorError::ForeignVar)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.index)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.node(v)?.value)
    }

    /// Single value of a one-element variable.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let node = self.node(v)?;
        if node.value.len() != 1 {
            return Err(TensorError::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    pub fn is_tracked(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.tracked)
    }

    /// Copies a recorded value out as a fresh (non-trainable) tensor.
    pub fn to_tensor(&self, v: Var) -> Result<Tensor<T>> {
        let node = self.node(v)?;
        Tensor::new(&node.shape, node.value.as_ref().clone())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        let origin = if tracked { Origin::Op(op) } else { Origin::Constant };
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            tracked,
            origin,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            tracked: false,
            origin: Origin::Constant,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a parameter; tracked iff it currently requires grad.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            tracked,
            origin: if tracked {
                Origin::Leaf(t.id())
            } else {
                Origin::Constant
            },
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar_const(&mut self, value: T) -> Var {
        self.constant(&Tensor::scalar(value))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        let value: Vec<T> = if na.shape == nb.shape {
            na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if nb.shape.is_empty() {
            let y = nb.value[0];
            na.value.iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let shape = na.shape.clone();
        Ok(self.push(shape, value, make(ia, ib), &[ia, ib]))
    }

    /// `a + b`; `b` may be rank-0.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, value, op(ix), &[ix]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let c = T::lit(c);
        let node = &self.nodes[ix];
        let value = node.value.iter().map(|&v| v * c).collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, value, Op::Scale(ix, c), &[ix]))
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary(x, |v| v + c, Op::Shift)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::ln, Op::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::abs, Op::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    // ---- reductions and shape ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.iter().copied().sum();
        Ok(self.push(vec![], vec![s], Op::Sum(ix), &[ix]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        let n = T::lit(node.value.len() as f64);
        let s: T = node.value.iter().copied().sum();
        Ok(self.push(vec![], vec![s / n], Op::Mean(ix), &[ix]))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<usize> {
        let ix = self.idx(x)?;
        let rank = self.nodes[ix].shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(ix)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check_axis("sum_axis", x, axis)?;
        let node = &self.nodes[ix];
        let (outer, len, inner) = axis_split(&node.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += node.value[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = node.shape.clone();
        shape[axis] = 1;
        Ok(self.push(shape, out, Op::SumAxis { x: ix, axis }, &[ix]))
    }

    fn extreme_axis(&mut self, op: &'static str, x: Var, axis: usize, want_max: bool) -> Result<Var> {
        let ix = self.check_axis(op, x, axis)?;
        let node = &self.nodes[ix];
        let (outer, len, inner) = axis_split(&node.shape, axis);
        let mut index = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let cand = (o * len + l) * inner + i;
                    let better = if want_max {
                        node.value[cand] > node.value[best]
                    } else {
                        node.value[cand] < node.value[best]
                    };
                    if better {
                        best = cand;
                    }
                }
                index.push(best);
            }
        }
        let mut shape = node.shape.clone();
        shape[axis] = 1;
        Ok(self.gather(ix, shape, index))
    }

    /// Maximum along `axis` (kept with extent 1); ties go to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extreme_axis("max_axis", x, axis, true)
    }

    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.extreme_axis("min_axis", x, axis, false)
    }

    fn gather(&mut self, ix: usize, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let src = &self.nodes[ix].value;
        let value = index.iter().map(|&i| src[i]).collect();
        self.push(shape, value, Op::Gather { x: ix, index }, &[ix])
    }

    /// Expands extent-1 axes to `shape` (ranks must match).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let from = self.nodes[ix].shape.clone();
        let compatible = from.len() == shape.len()
            && from.iter().zip(shape).all(|(&f, &t)| f == t || f == 1);
        if !compatible || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let rank = shape.len();
        let mut src_strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            src_strides[d] = if from[d] == 1 { 0 } else { acc };
            acc *= from[d];
        }
        let total = numel(shape);
        let mut index = Vec::with_capacity(total);
        let mut coord = vec![0usize; rank];
        for _ in 0..total {
            index.push(coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        Ok(self.gather(ix, shape.to_vec(), index))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        if numel(shape) != node.value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = node.value.as_ref().clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(ix), &[ix]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (r, c) = match *self.nodes[ix].shape {
            [r, c] => (r, c),
            ref s => {
                return Err(TensorError::InvalidArgument {
                    op: "transpose",
                    reason: format!("expected rank 2, got shape {s:?}"),
                })
            }
        };
        let index = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        Ok(self.gather(ix, vec![c, r], index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.clone(),
                    rhs: sb.clone(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.nodes[ia].value, false, &self.nodes[ib].value, false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib]))
    }

    // ---- image-shaped ops --------------------------------------------

    /// Cross-correlation with zero padding over a single `[C,H,W]` input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (c_in, h, wd) = dims3("conv2d", &self.nodes[ix].shape)?;
        let (c_out, wc_in, k) = match *self.nodes[iw].shape {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            ref s => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("weight must be [C_out,C_in,k,k], got {s:?}"),
                })
            }
        };
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.nodes[ix].shape.clone(),
                rhs: self.nodes[iw].shape.clone(),
            });
        }
        if self.nodes[ib].shape != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.nodes[iw].shape.clone(),
                rhs: self.nodes[ib].shape.clone(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {k} exceeds padded extent {}x{}", h + 2 * pad, wd + 2 * pad),
            });
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        Ok(self.push(
            vec![c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d { x: ix, w: iw, b: ib, geom },
            &[ix, iw, ib],
        ))
    }

    /// 2×2 max pooling of a `[C,H,W]` tensor with even extents.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, h, w) = dims3("max_pool2", &self.nodes[ix].shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2",
                reason: format!("extent {h}x{w} is not even"),
            });
        }
        let (_, index) = kernels::max_pool2(c, h, w, &self.nodes[ix].value);
        Ok(self.gather(ix, vec![c, h / 2, w / 2], index))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, h, w) = dims3("upsample_nearest2", &self.nodes[ix].shape)?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    index.push((ch * h + i / 2) * w + j / 2);
                }
            }
        }
        Ok(self.gather(ix, vec![c, ho, wo], index))
    }

    /// Per-channel separable Gaussian blur (radius `ceil(3σ)`, mirrored borders).
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "gaussian_blur",
                reason: format!("sigma must be positive, got {sigma}"),
            });
        }
        let (c, h, w) = dims3("gaussian_blur", &self.nodes[ix].shape)?;
        let taps: Vec<T> = kernels::gaussian_kernel(sigma).into_iter().map(T::lit).collect();
        let out = kernels::gaussian_blur_planes(c, h, w, &taps, &self.nodes[ix].value);
        Ok(self.push(
            vec![c, h, w],
            out,
            Op::Blur { x: ix, taps, planes: c, h, w },
            &[ix],
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        let cols = *node.shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "log_softmax",
            reason: "rank-0 input".into(),
        })?;
        let mut out = Vec::with_capacity(node.value.len());
        for row in node.value.chunks(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let shape = node.shape.clone();
        Ok(self.push(shape, out, Op::LogSoftmax { x: ix, cols }, &[ix]))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a rank-0 `loss`. Returns ∂loss/∂leaf for every
    /// tracked leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if !self.nodes[li].shape.is_empty() {
            return Err(TensorError::NotScalar(self.nodes[li].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        let mut by_leaf: HashMap<TensorId, Vec<Vec<T>>> = HashMap::new();
        if self.nodes[li].tracked {
            grads[li] = Some(vec![T::one()]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].origin {
                Origin::Constant => {}
                Origin::Leaf(id) => by_leaf.entry(*id).or_default().push(g),
                Origin::Op(op) => self.backward_op(op, i, &g, &mut grads),
            }
        }
        Ok(Gradients::from_parts(by_leaf))
    }

    /// Backward plus accumulation into the trainable tensors in `params`.
    pub fn backward_into<'a>(
        &self,
        loss: Var,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    ) -> Result<()> {
        self.backward(loss)?.accumulate_into(params)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[i].tracked {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Vec<T>>],
        target: usize,
        g: &[T],
        f: impl Fn(usize, T) -> T,
    ) {
        if let Some(slot) = self.grad_slot(grads, target) {
            if slot.len() == g.len() {
                for (k, (s, &gv)) in slot.iter_mut().zip(g).enumerate() {
                    *s += f(k, gv);
                }
            } else {
                // rank-0 operand broadcast over the output
                let total: T = g.iter().enumerate().map(|(k, &gv)| f(k, gv)).sum();
                slot[0] += total;
            }
        }
    }

    fn backward_op(&self, op: &Op<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| -> &[T] { &self.nodes[i].value };
        let at = |v: &[T], k: usize| if v.len() == 1 { v[0] } else { v[k] };
        match *op {
            Op::Add(a, b) => {
                self.elementwise_back(grads, a, g, |_, gv| gv);
                self.elementwise_back(grads, b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.elementwise_back(grads, a, g, |_, gv| gv);
                self.elementwise_back(grads, b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                self.elementwise_back(grads, a, g, |k, gv| gv * at(vb, k));
                self.elementwise_back(grads, b, g, |k, gv| gv * va[k]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                self.elementwise_back(grads, a, g, |k, gv| gv / at(vb, k));
                self.elementwise_back(grads, b, g, |k, gv| {
                    let d = at(vb, k);
                    -gv * va[k] / (d * d)
                });
            }
            Op::Scale(x, c) => self.elementwise_back(grads, x, g, |_, gv| gv * c),
            Op::Shift(x) => self.elementwise_back(grads, x, g, |_, gv| gv),
            Op::Relu(x) => {
                let vx = val(x);
                self.elementwise_back(grads, x, g, |k, gv| {
                    if vx[k] > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Exp(x) => {
                let vo = val(out);
                self.elementwise_back(grads, x, g, |k, gv| gv * vo[k]);
            }
            Op::Ln(x) => {
                let vx = val(x);
                self.elementwise_back(grads, x, g, |k, gv| gv / vx[k]);
            }
            Op::Sqrt(x) => {
                let vo = val(out);
                let half = T::lit(0.5);
                self.elementwise_back(grads, x, g, |k, gv| gv * half / vo[k]);
            }
            Op::Abs(x) => {
                let vx = val(x);
                self.elementwise_back(grads, x, g, |k, gv| {
                    if vx[k] > T::zero() {
                        gv
                    } else if vx[k] < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(x);
                let two = T::lit(2.0);
                self.elementwise_back(grads, x, g, |k, gv| two * vx[k] * gv);
            }
            Op::Sum(x) => {
                if let Some(slot) = self.grad_slot(grads, x) {
                    slot.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(slot) = self.grad_slot(grads, x) {
                    let share = g[0] / T::lit(slot.len() as f64);
                    slot.iter_mut().for_each(|s| *s += share);
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(&self.nodes[x].shape, axis);
                if let Some(slot) = self.grad_slot(grads, x) {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                slot[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, ref index } => {
                if let Some(slot) = self.grad_slot(grads, x) {
                    for (&src, &gv) in index.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Reshape(x) => self.elementwise_back(grads, x, g, |_, gv| gv),
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                if let Some(slot) = self.grad_slot(grads, a) {
                    T::gemm(m, n, k, g, false, &vb, true, slot, true);
                }
                if let Some(slot) = self.grad_slot(grads, b) {
                    T::gemm(k, m, n, &va, true, g, false, slot, true);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = [self.nodes[x].tracked, self.nodes[w].tracked, self.nodes[b].tracked];
                let cg = kernels::conv2d_backward(&geom, val(x), val(w), g, need);
                for (target, part) in [(x, cg.input), (w, cg.weight), (b, cg.bias)] {
                    if let (Some(part), Some(slot)) = (part, self.grad_slot(grads, target)) {
                        slot.iter_mut().zip(&part).for_each(|(s, &p)| *s += p);
                    }
                }
            }
            Op::Blur { x, ref taps, planes, h, w } => {
                if self.nodes[x].tracked {
                    let gx = kernels::gaussian_blur_planes_adjoint(planes, h, w, taps, g);
                    self.elementwise_back(grads, x, &gx, |_, gv| gv);
                }
            }
            Op::LogSoftmax { x, cols } => {
                let vo = self.nodes[out].value.clone();
                if let Some(slot) = self.grad_slot(grads, x) {
                    for ((srow, grow), orow) in
                        slot.chunks_mut(cols).zip(g.chunks(cols)).zip(vo.chunks(cols))
                    {
                        let total: T = grow.iter().copied().sum();
                        for ((s, &gv), &o) in srow.iter_mut().zip(grow).zip(orow) {
                            *s += gv - o.exp() * total;
                        }
                    }
                }
            }
        }
    }
}
