//! Vector-Jacobian products, written once against [`GradBackend`] and run
//! either eagerly on tensors or by recording onto the tape.
//!
//! Every adjoint is expressed through ops that themselves have adjoints in
//! this file, which is what makes the recorded backward differentiable.
//! Masks derived from forward values (ReLU, abs, max) enter as constants:
//! their derivative is zero almost everywhere.

use super::{eval, Op, Result, Tape};
use crate::tensor::kernels::{self, BinaryKind, UnaryKind};
use crate::tensor::{Shape, Tensor};

trait GradBackend {
    type V: Clone;

    fn tape(&self) -> &Tape;
    /// The forward node itself, as a gradient-side value.
    fn forward(&mut self, index: usize) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn apply(&mut self, op: Op, inputs: &[&Self::V]) -> Result<Self::V>;
    fn shape(&self, v: &Self::V) -> Shape;

    fn fwd_value(&self, index: usize) -> &Tensor {
        &self.tape().nodes[index].value
    }

    fn un(&mut self, op: Op, a: &Self::V) -> Result<Self::V> {
        self.apply(op, &[a])
    }

    fn bin(&mut self, op: Op, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(op, &[a, b])
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.bin(Op::Binary(BinaryKind::Mul), a, b)
    }

    /// Reduce a full-shape gradient onto a broadcast operand's shape.
    fn reduce_to(&mut self, g: Self::V, target: &Shape) -> Result<Self::V> {
        if &self.shape(&g) == target {
            return Ok(g);
        }
        let s = self.un(Op::SumAll, &g)?;
        if target.rank() == 1 {
            Ok(s)
        } else {
            self.un(Op::Reshape(target.clone()), &s)
        }
    }
}

struct Eager<'a> {
    tape: &'a Tape,
}

impl GradBackend for Eager<'_> {
    type V = Tensor;

    fn tape(&self) -> &Tape {
        self.tape
    }

    fn forward(&mut self, index: usize) -> Tensor {
        self.tape.nodes[index].value.clone()
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        eval(&op, inputs)
    }

    fn shape(&self, v: &Tensor) -> Shape {
        v.shape().clone()
    }
}

struct Recording<'a> {
    tape: &'a mut Tape,
}

impl GradBackend for Recording<'_> {
    type V = usize;

    fn tape(&self) -> &Tape {
        self.tape
    }

    fn forward(&mut self, index: usize) -> usize {
        index
    }

    fn constant(&mut self, t: Tensor) -> usize {
        self.tape.constant(t).index
    }

    fn apply(&mut self, op: Op, inputs: &[&usize]) -> Result<usize> {
        let parents = inputs.iter().map(|&&i| i).collect();
        Ok(self.tape.record_indices(op, parents)?.index)
    }

    fn shape(&self, v: &usize) -> Shape {
        self.tape.nodes[*v].value.shape().clone()
    }
}

pub(super) fn eager(tape: &Tape, root: usize, wrt: &[usize]) -> Result<Vec<Tensor>> {
    run(&mut Eager { tape }, root, wrt)
}

pub(super) fn recorded(tape: &mut Tape, root: usize, wrt: &[usize]) -> Result<Vec<usize>> {
    run(&mut Recording { tape }, root, wrt)
}

fn run<B: GradBackend>(b: &mut B, root: usize, wrt: &[usize]) -> Result<Vec<B::V>> {
    let n = root + 1;
    // A node matters when it depends on some wrt node and root depends on it.
    let mut below = vec![false; n];
    for &w in wrt {
        if w < n {
            below[w] = true;
        }
    }
    for i in 0..n {
        if !below[i] && b.tape().nodes[i].parents.iter().any(|&p| below[p]) {
            below[i] = true;
        }
    }
    let mut above = vec![false; n];
    above[root] = true;
    for i in (0..n).rev() {
        if above[i] {
            for &p in &b.tape().nodes[i].parents {
                above[p] = true;
            }
        }
    }
    let relevant: Vec<bool> = below.iter().zip(&above).map(|(x, y)| *x && *y).collect();
    let mut wanted = vec![false; n];
    for &w in wrt {
        if w < n {
            wanted[w] = true;
        }
    }

    let mut grads: Vec<Option<B::V>> = vec![None; n];
    let mut kept: Vec<Option<B::V>> = vec![None; n];
    if relevant[root] {
        let shape = b.fwd_value(root).shape().clone();
        grads[root] = Some(b.constant(Tensor::full(&shape, 1.0)));
    }

    for i in (0..n).rev() {
        if !relevant[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        if wanted[i] {
            kept[i] = Some(g.clone());
        }
        let (op, parents) = {
            let node = &b.tape().nodes[i];
            (node.op.clone(), node.parents.clone())
        };
        if parents.is_empty() {
            continue;
        }
        let need: Vec<bool> = parents.iter().map(|&p| relevant[p]).collect();
        if !need.iter().any(|&x| x) {
            continue;
        }
        let contributions = vjp(b, &op, i, &parents, &need, g)?;
        for ((p, c), needed) in parents.iter().zip(contributions).zip(&need) {
            if !needed {
                continue;
            }
            let Some(c) = c else { continue };
            grads[*p] = Some(match grads[*p].take() {
                None => c,
                Some(acc) => b.bin(Op::Binary(BinaryKind::Add), &acc, &c)?,
            });
        }
    }

    wrt.iter()
        .map(|&w| match kept.get(w).and_then(|k| k.clone()) {
            Some(g) => Ok(g),
            None => {
                let shape = b.tape().nodes[w].value.shape().clone();
                Ok(b.constant(Tensor::zeros(&shape)))
            }
        })
        .collect()
}

fn vjp<B: GradBackend>(
    b: &mut B,
    op: &Op,
    node: usize,
    parents: &[usize],
    need: &[bool],
    g: B::V,
) -> Result<Vec<Option<B::V>>> {
    let pshape = |b: &B, k: usize| b.fwd_value(parents[k]).shape().clone();
    let out = match op {
        Op::Leaf | Op::Const => Vec::new(),
        Op::Binary(kind) => {
            let (sa, sb) = (pshape(b, 0), pshape(b, 1));
            match kind {
                BinaryKind::Add => {
                    let gb = if need[1] { Some(b.reduce_to(g.clone(), &sb)?) } else { None };
                    vec![Some(g), gb]
                }
                BinaryKind::Sub => {
                    let gb = if need[1] {
                        let r = b.reduce_to(g.clone(), &sb)?;
                        Some(b.un(Op::Scale(-1.0), &r)?)
                    } else {
                        None
                    };
                    vec![Some(g), gb]
                }
                BinaryKind::Mul => {
                    let ga = if need[0] {
                        let y = b.forward(parents[1]);
                        Some(b.mul(&g, &y)?)
                    } else {
                        None
                    };
                    let gb = if need[1] {
                        let x = b.forward(parents[0]);
                        let prod = b.mul(&g, &x)?;
                        Some(b.reduce_to(prod, &sb)?)
                    } else {
                        None
                    };
                    vec![ga, gb]
                }
                BinaryKind::Max => {
                    let (va, vb) = (b.fwd_value(parents[0]), b.fwd_value(parents[1]));
                    let mask = if sa == sb {
                        Tensor::raw(
                            sa.clone(),
                            va.data()
                                .iter()
                                .zip(vb.data())
                                .map(|(x, y)| if x >= y { 1.0 } else { 0.0 })
                                .collect(),
                        )
                    } else {
                        let y = vb.item();
                        va.map(|x| if x >= y { 1.0 } else { 0.0 })
                    };
                    let inv = mask.map(|m| 1.0 - m);
                    let ga = if need[0] {
                        let m = b.constant(mask);
                        Some(b.mul(&g, &m)?)
                    } else {
                        None
                    };
                    let gb = if need[1] {
                        let m = b.constant(inv);
                        let prod = b.mul(&g, &m)?;
                        Some(b.reduce_to(prod, &sb)?)
                    } else {
                        None
                    };
                    vec![ga, gb]
                }
            }
        }
        Op::Scale(c) => vec![Some(b.un(Op::Scale(*c), &g)?)],
        Op::AddConst(_) => vec![Some(g)],
        Op::Unary(kind) => {
            let ga = match kind {
                UnaryKind::Relu => {
                    let mask = kernels::positive_mask(b.fwd_value(node));
                    let m = b.constant(mask);
                    b.mul(&g, &m)?
                }
                UnaryKind::Abs => {
                    let s = kernels::sign(b.fwd_value(parents[0]));
                    let m = b.constant(s);
                    b.mul(&g, &m)?
                }
                UnaryKind::Sqrt => {
                    let y = b.forward(node);
                    let r = b.un(Op::Unary(UnaryKind::Recip), &y)?;
                    let half = b.un(Op::Scale(0.5), &r)?;
                    b.mul(&g, &half)?
                }
                UnaryKind::Recip => {
                    let y = b.forward(node);
                    let y2 = b.mul(&y, &y)?;
                    let neg = b.un(Op::Scale(-1.0), &y2)?;
                    b.mul(&g, &neg)?
                }
                UnaryKind::Exp => {
                    let y = b.forward(node);
                    b.mul(&g, &y)?
                }
                UnaryKind::Ln => {
                    let x = b.forward(parents[0]);
                    let r = b.un(Op::Unary(UnaryKind::Recip), &x)?;
                    b.mul(&g, &r)?
                }
            };
            vec![Some(ga)]
        }
        Op::MatMul => {
            let ga = if need[0] {
                let y = b.forward(parents[1]);
                let yt = b.un(Op::Transpose, &y)?;
                Some(b.bin(Op::MatMul, &g, &yt)?)
            } else {
                None
            };
            let gb = if need[1] {
                let x = b.forward(parents[0]);
                let xt = b.un(Op::Transpose, &x)?;
                Some(b.bin(Op::MatMul, &xt, &g)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Transpose => vec![Some(b.un(Op::Transpose, &g)?)],
        Op::Conv2d(geom) => {
            let (sx, sw) = (pshape(b, 0), pshape(b, 1));
            let gx = if need[0] {
                let w = b.forward(parents[1]);
                let op = Op::ConvInputGrad {
                    geom: *geom,
                    input_hw: (sx.dims()[2], sx.dims()[3]),
                };
                Some(b.bin(op, &g, &w)?)
            } else {
                None
            };
            let gw = if need[1] {
                let x = b.forward(parents[0]);
                let op = Op::ConvWeightGrad {
                    geom: *geom,
                    kernel_hw: (sw.dims()[2], sw.dims()[3]),
                };
                Some(b.bin(op, &x, &g)?)
            } else {
                None
            };
            vec![gx, gw]
        }
        Op::ConvInputGrad { geom, .. } => {
            // node = A(gy, w), the input-adjoint; upstream g has input shape.
            let sw = pshape(b, 1);
            let d_gy = if need[0] {
                let w = b.forward(parents[1]);
                Some(b.bin(Op::Conv2d(*geom), &g, &w)?)
            } else {
                None
            };
            let d_w = if need[1] {
                let gy = b.forward(parents[0]);
                let op = Op::ConvWeightGrad {
                    geom: *geom,
                    kernel_hw: (sw.dims()[2], sw.dims()[3]),
                };
                Some(b.bin(op, &g, &gy)?)
            } else {
                None
            };
            vec![d_gy, d_w]
        }
        Op::ConvWeightGrad { geom, .. } => {
            // node = W(x, gy), the kernel-adjoint; upstream g has kernel shape.
            let sx = pshape(b, 0);
            let d_x = if need[0] {
                let gy = b.forward(parents[1]);
                let op = Op::ConvInputGrad {
                    geom: *geom,
                    input_hw: (sx.dims()[2], sx.dims()[3]),
                };
                Some(b.bin(op, &gy, &g)?)
            } else {
                None
            };
            let d_gy = if need[1] {
                let x = b.forward(parents[0]);
                Some(b.bin(Op::Conv2d(*geom), &x, &g)?)
            } else {
                None
            };
            vec![d_x, d_gy]
        }
        Op::Upsample2x => vec![Some(b.un(Op::BlockSum2x, &g)?)],
        Op::BlockSum2x => vec![Some(b.un(Op::Upsample2x, &g)?)],
        Op::GlobalAvgPool => {
            let s = pshape(b, 0);
            let op = Op::SpreadPool {
                h: s.dims()[2],
                w: s.dims()[3],
            };
            vec![Some(b.un(op, &g)?)]
        }
        Op::SpreadPool { .. } => vec![Some(b.un(Op::GlobalAvgPool, &g)?)],
        Op::ChannelSum => {
            let s = pshape(b, 0);
            vec![Some(b.un(Op::ChannelBroadcast(s), &g)?)]
        }
        Op::ChannelBroadcast(_) => vec![Some(b.un(Op::ChannelSum, &g)?)],
        Op::Concat => {
            let mut start = 0;
            let mut out = Vec::with_capacity(parents.len());
            for (k, &p) in parents.iter().enumerate() {
                let len = b.fwd_value(p).dims()[1];
                out.push(if need[k] {
                    Some(b.un(Op::SliceChannels { start, len }, &g)?)
                } else {
                    None
                });
                start += len;
            }
            out
        }
        Op::SliceChannels { start, .. } => {
            let total = pshape(b, 0).dims()[1];
            vec![Some(b.un(
                Op::EmbedChannels {
                    start: *start,
                    total,
                },
                &g,
            )?)]
        }
        Op::EmbedChannels { start, .. } => {
            let len = pshape(b, 0).dims()[1];
            vec![Some(b.un(Op::SliceChannels { start: *start, len }, &g)?)]
        }
        Op::SumAll => {
            let s = pshape(b, 0);
            vec![Some(b.un(Op::Expand(s), &g)?)]
        }
        Op::Expand(_) => {
            let s = pshape(b, 0);
            let summed = b.un(Op::SumAll, &g)?;
            vec![Some(b.reduce_to(summed, &s)?)]
        }
        Op::Reshape(_) => {
            let s = pshape(b, 0);
            vec![Some(b.un(Op::Reshape(s), &g)?)]
        }
    };
    Ok(out)
}
