//! Minimal reverse-mode automatic differentiation on dynamic-dimension
//! arrays.
//!
//! Nodes are evaluated eagerly when constructed and the backward pass builds
//! its gradients as new tape nodes, so gradients are themselves
//! differentiable. That property is what the critic's gradient penalty
//! relies on: the norm of an input gradient is an ordinary tape value whose
//! own gradient w.r.t. the critic weights can be taken again.

pub mod conv;

use ndarray::{ArrayD, ArrayViewD, IxDyn, NdFloat};
use std::cell::{Ref, RefCell};
use std::ops::Range;
use std::rc::Rc;

// some payload fields exist for symmetry/debugging and are not read back
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Abs(usize),
    Sqr(usize),
    PowF(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvBwdInput {
        w: usize,
        dy: usize,
        stride: usize,
        pad: usize,
        xh: usize,
        xw: usize,
    },
    ConvBwdWeight {
        x: usize,
        dy: usize,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    },
    AddChanBias(usize, usize),
    SumChan(usize),
    BroadcastChan(usize, [usize; 3]),
    AddRowBias(usize, usize),
    SumAxis0(usize),
    BroadcastAxis0(usize, usize),
    MulPerSample(usize, usize),
    SumPerSample(usize),
    BroadcastPerSample(usize, Vec<usize>),
    SumSpatial(usize),
    BroadcastSpatial(usize, [usize; 2]),
    ConcatChan(usize, usize),
    SliceChan(usize, Range<usize>),
    PadChan {
        x: usize,
        total: usize,
        offset: usize,
    },
    Upsample2(usize),
    PoolSum2(usize),
    SumAll(usize),
    BroadcastAll(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
}

struct Node<F> {
    data: ArrayD<F>,
    op: Op,
}

/// Shared computation tape. Cloning is cheap (reference counted).
pub struct Tape<F> {
    nodes: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var<F> {
    tape: Tape<F>,
    id: usize,
}

impl<F: NdFloat> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: NdFloat> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: ArrayD<F>, op: Op) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { data, op });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Insert a leaf (parameter, input or constant).
    pub fn leaf(&self, data: ArrayD<F>) -> Var<F> {
        self.push(data, Op::Leaf)
    }

    pub fn scalar(&self, v: F) -> Var<F> {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }
}

fn c<F: NdFloat>(v: f64) -> F {
    F::from(v).expect("constant conversion")
}

impl<F: NdFloat> Var<F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].data)
    }

    pub fn value(&self) -> ArrayD<F> {
        self.data().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data().shape().to_vec()
    }

    pub fn scalar_value(&self) -> F {
        let d = self.data();
        assert_eq!(d.len(), 1, "scalar_value on non-scalar");
        *d.iter().next().unwrap()
    }

    fn unary<G>(&self, op: Op, f: G) -> Var<F>
    where
        G: FnOnce(&ArrayViewD<F>) -> ArrayD<F>,
    {
        let data = f(&self.data().view());
        self.tape.push(data, op)
    }

    fn binary<G>(&self, other: &Var<F>, op: Op, f: G) -> Var<F>
    where
        G: FnOnce(&ArrayViewD<F>, &ArrayViewD<F>) -> ArrayD<F>,
    {
        let data = f(&self.data().view(), &other.data().view());
        self.tape.push(data, op)
    }

    pub fn add(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::Add(self.id, b.id), |x, y| {
            assert_eq!(x.shape(), y.shape(), "add shape mismatch");
            x + y
        })
    }

    pub fn sub(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::Sub(self.id, b.id), |x, y| {
            assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
            x - y
        })
    }

    pub fn mul(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::Mul(self.id, b.id), |x, y| {
            assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
            x * y
        })
    }

    pub fn scale(&self, k: f64) -> Var<F> {
        self.unary(Op::Scale(self.id, k), |x| x.mapv(|v| v * c::<F>(k)))
    }

    pub fn neg(&self) -> Var<F> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Var<F> {
        self.unary(Op::AddScalar(self.id, k), |x| x.mapv(|v| v + c::<F>(k)))
    }

    pub fn abs(&self) -> Var<F> {
        self.unary(Op::Abs(self.id), |x| x.mapv(|v| v.abs()))
    }

    pub fn sqr(&self) -> Var<F> {
        self.unary(Op::Sqr(self.id), |x| x.mapv(|v| v * v))
    }

    pub fn powf_const(&self, e: f64) -> Var<F> {
        self.unary(Op::PowF(self.id, e), |x| x.mapv(|v| v.powf(c::<F>(e))))
    }

    pub fn sqrt(&self) -> Var<F> {
        self.powf_const(0.5)
    }

    pub fn relu(&self) -> Var<F> {
        self.unary(Op::Relu(self.id), |x| {
            x.mapv(|v| if v > F::zero() { v } else { F::zero() })
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<F> {
        let s = c::<F>(slope);
        self.unary(Op::LeakyRelu(self.id, slope), |x| {
            x.mapv(|v| if v > F::zero() { v } else { v * s })
        })
    }

    pub fn tanh(&self) -> Var<F> {
        self.unary(Op::Tanh(self.id), |x| x.mapv(|v| v.tanh()))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::MatMul(self.id, b.id), |x, y| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            x2.dot(&y2).into_dyn()
        })
    }

    pub fn transpose2(&self) -> Var<F> {
        self.unary(Op::Transpose(self.id), |x| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            x2.t().to_owned().into_dyn()
        })
    }

    pub fn conv2d(&self, w: &Var<F>, stride: usize, pad: usize) -> Var<F> {
        self.binary(
            w,
            Op::Conv {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
            |x, wv| {
                let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let w4 = wv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                conv::conv2d(&x4, &w4, stride, pad).into_dyn()
            },
        )
    }

    fn conv2d_bwd_input(w: &Var<F>, dy: &Var<F>, stride: usize, pad: usize, xh: usize, xw: usize) -> Var<F> {
        w.binary(
            dy,
            Op::ConvBwdInput {
                w: w.id,
                dy: dy.id,
                stride,
                pad,
                xh,
                xw,
            },
            |wv, dyv| {
                let w4 = wv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let dy4 = dyv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                conv::conv2d_bwd_input(&w4, &dy4, stride, pad, xh, xw).into_dyn()
            },
        )
    }

    fn conv2d_bwd_weight(x: &Var<F>, dy: &Var<F>, stride: usize, pad: usize, kh: usize, kw: usize) -> Var<F> {
        x.binary(
            dy,
            Op::ConvBwdWeight {
                x: x.id,
                dy: dy.id,
                stride,
                pad,
                kh,
                kw,
            },
            |xv, dyv| {
                let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let dy4 = dyv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                conv::conv2d_bwd_weight(&x4, &dy4, stride, pad, kh, kw).into_dyn()
            },
        )
    }

    /// [N,C,H,W] + [C] broadcast over batch and space.
    pub fn add_chan_bias(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::AddChanBias(self.id, b.id), |x, bv| {
            let mut out = x.to_owned();
            let (n, ch) = (x.shape()[0], x.shape()[1]);
            for ni in 0..n {
                for ci in 0..ch {
                    let bias = bv[[ci]];
                    out.index_axis_mut(ndarray::Axis(0), ni)
                        .index_axis_mut(ndarray::Axis(0), ci)
                        .mapv_inplace(|v| v + bias);
                }
            }
            out
        })
    }

    /// [N,C,H,W] -> [C]
    pub fn sum_chan(&self) -> Var<F> {
        self.unary(Op::SumChan(self.id), |x| {
            let ch = x.shape()[1];
            let mut out = ArrayD::<F>::zeros(IxDyn(&[ch]));
            for ci in 0..ch {
                out[[ci]] = x.index_axis(ndarray::Axis(1), ci).sum();
            }
            out
        })
    }

    /// [C] -> [N,C,H,W]
    pub fn broadcast_chan(&self, n: usize, h: usize, w: usize) -> Var<F> {
        self.unary(Op::BroadcastChan(self.id, [n, h, w]), |x| {
            let ch = x.len();
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n, ch, h, w]));
            for ni in 0..n {
                for ci in 0..ch {
                    out.index_axis_mut(ndarray::Axis(0), ni)
                        .index_axis_mut(ndarray::Axis(0), ci)
                        .fill(x[[ci]]);
                }
            }
            out
        })
    }

    /// [N,O] + [O]
    pub fn add_row_bias(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::AddRowBias(self.id, b.id), |x, bv| {
            let mut out = x.to_owned();
            let (n, o) = (x.shape()[0], x.shape()[1]);
            for ni in 0..n {
                for oi in 0..o {
                    out[[ni, oi]] += bv[[oi]];
                }
            }
            out
        })
    }

    /// [N,O] -> [O]
    pub fn sum_axis0(&self) -> Var<F> {
        self.unary(Op::SumAxis0(self.id), |x| {
            x.sum_axis(ndarray::Axis(0))
        })
    }

    /// [O] -> [N,O]
    pub fn broadcast_axis0(&self, n: usize) -> Var<F> {
        self.unary(Op::BroadcastAxis0(self.id, n), |x| {
            let o = x.len();
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n, o]));
            for ni in 0..n {
                for oi in 0..o {
                    out[[ni, oi]] = x[[oi]];
                }
            }
            out
        })
    }

    /// [N, ...] * [N], the scalar broadcast over each sample.
    pub fn mul_per_sample(&self, s: &Var<F>) -> Var<F> {
        self.binary(s, Op::MulPerSample(self.id, s.id), |x, sv| {
            let n = x.shape()[0];
            assert_eq!(sv.len(), n, "mul_per_sample length mismatch");
            let mut out = x.to_owned();
            for ni in 0..n {
                let k = sv[[ni]];
                out.index_axis_mut(ndarray::Axis(0), ni)
                    .mapv_inplace(|v| v * k);
            }
            out
        })
    }

    /// [N, ...] -> [N], summing everything but the batch axis.
    pub fn sum_per_sample(&self) -> Var<F> {
        self.unary(Op::SumPerSample(self.id), |x| {
            let n = x.shape()[0];
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n]));
            for ni in 0..n {
                out[[ni]] = x.index_axis(ndarray::Axis(0), ni).sum();
            }
            out
        })
    }

    /// [N] -> [N, rest...], value repeated across each sample.
    pub fn broadcast_per_sample(&self, rest: &[usize]) -> Var<F> {
        let shape = rest.to_vec();
        self.unary(Op::BroadcastPerSample(self.id, shape.clone()), |x| {
            let n = x.len();
            let mut full = vec![n];
            full.extend_from_slice(&shape);
            let mut out = ArrayD::<F>::zeros(IxDyn(&full));
            for ni in 0..n {
                out.index_axis_mut(ndarray::Axis(0), ni).fill(x[[ni]]);
            }
            out
        })
    }

    /// [N,C,H,W] -> [N,C]
    pub fn sum_spatial(&self) -> Var<F> {
        self.unary(Op::SumSpatial(self.id), |x| {
            let (n, ch) = (x.shape()[0], x.shape()[1]);
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n, ch]));
            for ni in 0..n {
                for ci in 0..ch {
                    out[[ni, ci]] = x
                        .index_axis(ndarray::Axis(0), ni)
                        .index_axis(ndarray::Axis(0), ci)
                        .sum();
                }
            }
            out
        })
    }

    /// [N,C] -> [N,C,H,W]
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Var<F> {
        self.unary(Op::BroadcastSpatial(self.id, [h, w]), |x| {
            let (n, ch) = (x.shape()[0], x.shape()[1]);
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n, ch, h, w]));
            for ni in 0..n {
                for ci in 0..ch {
                    out.index_axis_mut(ndarray::Axis(0), ni)
                        .index_axis_mut(ndarray::Axis(0), ci)
                        .fill(x[[ni, ci]]);
                }
            }
            out
        })
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_chan(&self, b: &Var<F>) -> Var<F> {
        self.binary(b, Op::ConcatChan(self.id, b.id), |x, y| {
            ndarray::concatenate(ndarray::Axis(1), &[x.view(), y.view()]).unwrap()
        })
    }

    pub fn slice_chan(&self, range: Range<usize>) -> Var<F> {
        let r = range.clone();
        self.unary(Op::SliceChan(self.id, range), |x| {
            x.slice_axis(ndarray::Axis(1), ndarray::Slice::from(r.start as isize..r.end as isize))
                .to_owned()
        })
    }

    /// Embed channels [offset, offset+c) of `self` into a zero block with
    /// `total` channels.
    pub fn pad_chan(&self, total: usize, offset: usize) -> Var<F> {
        self.unary(
            Op::PadChan {
                x: self.id,
                total,
                offset,
            },
            |x| {
                let mut shape = x.shape().to_vec();
                let cx = shape[1];
                shape[1] = total;
                let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
                out.slice_axis_mut(
                    ndarray::Axis(1),
                    ndarray::Slice::from(offset as isize..(offset + cx) as isize),
                )
                .assign(x);
                out
            },
        )
    }

    /// Nearest-neighbor 2x upsampling of [N,C,H,W].
    pub fn upsample2(&self) -> Var<F> {
        self.unary(Op::Upsample2(self.id), |x| {
            let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n, ch, h * 2, w * 2]));
            for ni in 0..n {
                for ci in 0..ch {
                    for i in 0..h {
                        for j in 0..w {
                            let v = x[[ni, ci, i, j]];
                            out[[ni, ci, 2 * i, 2 * j]] = v;
                            out[[ni, ci, 2 * i, 2 * j + 1]] = v;
                            out[[ni, ci, 2 * i + 1, 2 * j]] = v;
                            out[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                        }
                    }
                }
            }
            out
        })
    }

    /// 2x2 sum pooling; scale by 0.25 for average pooling.
    pub fn pool_sum2(&self) -> Var<F> {
        self.unary(Op::PoolSum2(self.id), |x| {
            let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            assert!(h % 2 == 0 && w % 2 == 0, "pool_sum2 needs even spatial size");
            let mut out = ArrayD::<F>::zeros(IxDyn(&[n, ch, h / 2, w / 2]));
            for ni in 0..n {
                for ci in 0..ch {
                    for i in 0..h / 2 {
                        for j in 0..w / 2 {
                            out[[ni, ci, i, j]] = x[[ni, ci, 2 * i, 2 * j]]
                                + x[[ni, ci, 2 * i, 2 * j + 1]]
                                + x[[ni, ci, 2 * i + 1, 2 * j]]
                                + x[[ni, ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
            }
            out
        })
    }

    pub fn avg_pool2(&self) -> Var<F> {
        self.pool_sum2().scale(0.25)
    }

    pub fn sum_all(&self) -> Var<F> {
        self.unary(Op::SumAll(self.id), |x| {
            ArrayD::from_elem(IxDyn(&[1]), x.sum())
        })
    }

    pub fn mean_all(&self) -> Var<F> {
        let n = self.data().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// [1] scalar -> arbitrary shape, repeated.
    pub fn broadcast_all(&self, shape: &[usize]) -> Var<F> {
        let sh = shape.to_vec();
        self.unary(Op::BroadcastAll(self.id, sh.clone()), |x| {
            ArrayD::from_elem(IxDyn(&sh), x[[0]])
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<F> {
        let sh = shape.to_vec();
        self.unary(Op::Reshape(self.id, sh.clone()), |x| {
            let flat: Vec<F> = x.iter().cloned().collect();
            ArrayD::from_shape_vec(IxDyn(&sh), flat).expect("reshape size mismatch")
        })
    }

    /// Cut the node loose from its history: the value survives as a fresh
    /// leaf, gradients stop here.
    pub fn detach(&self) -> Var<F> {
        self.tape.leaf(self.value())
    }
}

fn accumulate<F: NdFloat>(slot: &mut Option<Var<F>>, contribution: Var<F>) {
    *slot = Some(match slot.take() {
        None => contribution,
        Some(existing) => existing.add(&contribution),
    });
}

/// Reverse-mode gradient of a scalar `output` w.r.t. each var in `wrt`.
///
/// The returned vars live on the same tape, so they can be differentiated
/// again.
pub fn grad<F: NdFloat>(output: &Var<F>, wrt: &[&Var<F>]) -> Vec<Var<F>> {
    let tape = output.tape.clone();
    assert_eq!(output.data().len(), 1, "grad target must be scalar");
    let top = output.id;
    let mut grads: Vec<Option<Var<F>>> = vec![None; top + 1];
    let seed_shape = output.shape();
    grads[top] = Some(tape.leaf(ArrayD::from_elem(IxDyn(&seed_shape), F::one())));

    let var = |id: usize| Var {
        tape: tape.clone(),
        id,
    };

    for id in (0..=top).rev() {
        let u = match grads[id].clone() {
            Some(u) => u,
            None => continue,
        };
        let op = tape.nodes.borrow()[id].op.clone();
        match op {
            Op::Leaf => continue,
            Op::Add(a, b) => {
                accumulate(&mut grads[a], u.clone());
                accumulate(&mut grads[b], u.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a], u.clone());
                accumulate(&mut grads[b], u.neg());
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a], u.mul(&var(b)));
                accumulate(&mut grads[b], u.mul(&var(a)));
            }
            Op::Scale(a, k) => accumulate(&mut grads[a], u.scale(k)),
            Op::AddScalar(a, _) => accumulate(&mut grads[a], u.clone()),
            Op::Abs(a) => {
                let sign_data = var(a).data().mapv(|v| {
                    if v > F::zero() {
                        F::one()
                    } else if v < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                let sign = tape.leaf(sign_data);
                accumulate(&mut grads[a], u.mul(&sign));
            }
            Op::Sqr(a) => accumulate(&mut grads[a], u.mul(&var(a)).scale(2.0)),
            Op::PowF(a, e) => {
                let d = var(a).powf_const(e - 1.0).scale(e);
                accumulate(&mut grads[a], u.mul(&d));
            }
            Op::Relu(a) => {
                let mask_data = var(a)
                    .data()
                    .mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                let mask = tape.leaf(mask_data);
                accumulate(&mut grads[a], u.mul(&mask));
            }
            Op::LeakyRelu(a, s) => {
                let sf = c::<F>(s);
                let mask_data = var(a)
                    .data()
                    .mapv(|v| if v > F::zero() { F::one() } else { sf });
                let mask = tape.leaf(mask_data);
                accumulate(&mut grads[a], u.mul(&mask));
            }
            Op::Tanh(a) => {
                let d_data = tape.nodes.borrow()[id].data.mapv(|y| F::one() - y * y);
                let d = tape.leaf(d_data);
                accumulate(&mut grads[a], u.mul(&d));
            }
            Op::MatMul(a, b) => {
                accumulate(&mut grads[a], u.matmul(&var(b).transpose2()));
                accumulate(&mut grads[b], var(a).transpose2().matmul(&u));
            }
            Op::Transpose(a) => accumulate(&mut grads[a], u.transpose2()),
            Op::Conv { x, w, stride, pad } => {
                let xs = var(x).shape();
                accumulate(
                    &mut grads[x],
                    Var::conv2d_bwd_input(&var(w), &u, stride, pad, xs[2], xs[3]),
                );
                let ws = var(w).shape();
                accumulate(
                    &mut grads[w],
                    Var::conv2d_bwd_weight(&var(x), &u, stride, pad, ws[2], ws[3]),
                );
            }
            Op::ConvBwdInput {
                w,
                dy,
                stride,
                pad,
                xh: _,
                xw: _,
            } => {
                // B(w,dy) = A_w^T dy; <u, B> linear in both arguments.
                let ws = var(w).shape();
                accumulate(
                    &mut grads[w],
                    Var::conv2d_bwd_weight(&u, &var(dy), stride, pad, ws[2], ws[3]),
                );
                accumulate(&mut grads[dy], u.conv2d(&var(w), stride, pad));
            }
            Op::ConvBwdWeight {
                x,
                dy,
                stride,
                pad,
                kh: _,
                kw: _,
            } => {
                let xs = var(x).shape();
                accumulate(
                    &mut grads[x],
                    Var::conv2d_bwd_input(&u, &var(dy), stride, pad, xs[2], xs[3]),
                );
                accumulate(&mut grads[dy], var(x).conv2d(&u, stride, pad));
            }
            Op::AddChanBias(x, b) => {
                accumulate(&mut grads[x], u.clone());
                accumulate(&mut grads[b], u.sum_chan());
            }
            Op::SumChan(x) => {
                let xs = var(x).shape();
                accumulate(&mut grads[x], u.broadcast_chan(xs[0], xs[2], xs[3]));
            }
            Op::BroadcastChan(x, _) => accumulate(&mut grads[x], u.sum_chan()),
            Op::AddRowBias(x, b) => {
                accumulate(&mut grads[x], u.clone());
                accumulate(&mut grads[b], u.sum_axis0());
            }
            Op::SumAxis0(x) => {
                let n = var(x).shape()[0];
                accumulate(&mut grads[x], u.broadcast_axis0(n));
            }
            Op::BroadcastAxis0(x, _) => accumulate(&mut grads[x], u.sum_axis0()),
            Op::MulPerSample(x, s) => {
                accumulate(&mut grads[x], u.mul_per_sample(&var(s)));
                accumulate(&mut grads[s], u.mul(&var(x)).sum_per_sample());
            }
            Op::SumPerSample(x) => {
                let xs = var(x).shape();
                accumulate(&mut grads[x], u.broadcast_per_sample(&xs[1..]));
            }
            Op::BroadcastPerSample(x, _) => accumulate(&mut grads[x], u.sum_per_sample()),
            Op::SumSpatial(x) => {
                let xs = var(x).shape();
                accumulate(&mut grads[x], u.broadcast_spatial(xs[2], xs[3]));
            }
            Op::BroadcastSpatial(x, _) => accumulate(&mut grads[x], u.sum_spatial()),
            Op::ConcatChan(a, b) => {
                let ca = var(a).shape()[1];
                let cb = var(b).shape()[1];
                accumulate(&mut grads[a], u.slice_chan(0..ca));
                accumulate(&mut grads[b], u.slice_chan(ca..ca + cb));
            }
            Op::SliceChan(x, r) => {
                let total = var(x).shape()[1];
                accumulate(&mut grads[x], u.pad_chan(total, r.start));
            }
            Op::PadChan { x, total: _, offset } => {
                let cx = var(x).shape()[1];
                accumulate(&mut grads[x], u.slice_chan(offset..offset + cx));
            }
            Op::Upsample2(x) => accumulate(&mut grads[x], u.pool_sum2()),
            Op::PoolSum2(x) => accumulate(&mut grads[x], u.upsample2()),
            Op::SumAll(x) => {
                let xs = var(x).shape();
                accumulate(&mut grads[x], u.broadcast_all(&xs));
            }
            Op::BroadcastAll(x, _) => accumulate(&mut grads[x], u.sum_all()),
            Op::Reshape(x, _) => {
                let xs = var(x).shape();
                accumulate(&mut grads[x], u.reshape(&xs));
            }
        }
    }

    wrt.iter()
        .map(|v| {
            assert!(
                Rc::ptr_eq(&v.tape.nodes, &tape.nodes),
                "wrt var from another tape"
            );
            match &grads[v.id] {
                Some(g) => g.clone(),
                None => tape.leaf(ArrayD::zeros(IxDyn(&v.shape()))),
            }
        })
        .collect()
}
