//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller ids and a single reverse sweep visits each node once.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{pact_backward_raw, pact_forward_value, PactParam, SparsityMask};
use crate::ops::linear::{self, ConvGeometry};
use crate::ops::loss;
use crate::ops::norm::{self, BatchNormSaved, ChannelLayout};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Param,
    Dense,
    Conv2d,
    Relu,
    BatchNorm,
    BatchNormEval,
    AvgPool,
    Reshape,
    Add,
    Mul,
    SoftmaxXent,
    MaskedSte,
    Pact,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        geom: ConvGeometry,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layout: ChannelLayout,
        saved: BatchNormSaved,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layout: ChannelLayout,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
    },
    AvgPool {
        input: NodeId,
        kernel: usize,
    },
    Reshape {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
        classes: usize,
    },
    MaskedSte {
        input: NodeId,
        mask: SparsityMask,
    },
    Pact {
        input: NodeId,
        alpha: NodeId,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::MaskedSte { .. } => OpKind::MaskedSte,
            Op::Pact { .. } => OpKind::Pact,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Output of a training-mode batch norm, including the batch statistics
/// the caller folds into its running estimates.
pub struct BatchNormOutput {
    pub node: NodeId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(without_grad(value), Op::Input)
    }

    /// Leaf bound to a parameter; its gradient is written back by [`Graph::backward`].
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        self.push(without_grad(params.get(id).clone()), Op::Param(id))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return dim_err(format!(
                "dense expects [B,I] x [O,I] + [O], got {xs:?}, {ws:?}, {bs:?}"
            ));
        }
        let (batch, inf, outf) = (xs[0], xs[1], ws[0]);
        let out = linear::dense_forward(x.data(), w.data(), b.data(), batch, inf, outf);
        let value = Tensor::new(vec![batch, outf], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (x, w) = (self.value(input), self.value(weight));
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let out = linear::conv2d_forward(x.data(), w.data(), &geom);
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { input })
    }

    fn check_affine(&self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<ChannelLayout> {
        let layout = ChannelLayout::of(self.value(input).shape())?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != layout.channels || b.numel() != layout.channels {
            return dim_err(format!(
                "batchnorm over {} channels with gamma {:?} and beta {:?}",
                layout.channels,
                g.shape(),
                b.shape()
            ));
        }
        Ok(layout)
    }

    /// Normalizes with the batch's own statistics.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<BatchNormOutput> {
        let layout = self.check_affine(input, gamma, beta)?;
        let x = self.value(input);
        let out = norm::batchnorm_train(
            x.data(),
            layout,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let value = Tensor::new(x.shape().to_vec(), out.output)?;
        let node = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                layout,
                saved: out.saved,
            },
        );
        Ok(BatchNormOutput {
            node,
            batch_mean: out.batch_mean,
            batch_var: out.batch_var_unbiased,
        })
    }

    /// Normalizes with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<NodeId> {
        let layout = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != layout.channels || running_var.len() != layout.channels {
            return dim_err("running statistics do not match channel count");
        }
        let x = self.value(input);
        let out = norm::batchnorm_eval(
            x.data(),
            layout,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
        );
        let inv_std: Vec<f32> = running_var
            .iter()
            .map(|v| 1.0 / (v + norm::BN_EPS).sqrt())
            .collect();
        let mut normalized = vec![0.0f32; x.numel()];
        for (i, n) in normalized.iter_mut().enumerate() {
            let c = (i / layout.spatial) % layout.channels;
            *n = (x.data()[i] - running_mean[c]) * inv_std[c];
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                layout,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn avg_pool(&mut self, input: NodeId, kernel: usize) -> Result<NodeId> {
        let x = self.value(input);
        let (out, shape) = linear::avg_pool_forward(x.data(), x.shape(), kernel)?;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AvgPool { input, kernel }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape();
        let batch = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(input, vec![batch, rest])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return dim_err(format!(
                "elementwise op on {:?} and {:?}",
                x.shape(),
                y.shape()
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary(a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits; yields a one-element node.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        if x.rank() != 2 {
            return dim_err(format!("logits must be [B, C], got {:?}", x.shape()));
        }
        if x.shape()[0] != labels.len() {
            return dim_err(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x.shape()[0]
            ));
        }
        let classes = x.shape()[1];
        let (value, probs) = loss::softmax_xent(x.data(), labels, classes)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        ))
    }

    /// Substitutes `projected` for the value of `input` in the forward pass;
    /// backward passes the gradient straight through, gated by `mask`.
    pub fn masked_ste(
        &mut self,
        input: NodeId,
        projected: Tensor,
        mask: SparsityMask,
    ) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape() != projected.shape() || mask.len() != x.numel() {
            return dim_err(format!(
                "projection {:?} / mask {} for input {:?}",
                projected.shape(),
                mask.len(),
                x.shape()
            ));
        }
        Ok(self.push(without_grad(projected), Op::MaskedSte { input, mask }))
    }

    /// Parameterized clipping to `[0, alpha]`, quantized to `k_act` bits
    /// unless `k_act >= 32`. `alpha` must be a one-element node.
    pub fn pact(&mut self, input: NodeId, alpha: NodeId, k_act: u32) -> Result<NodeId> {
        let a = self.value(alpha);
        if a.numel() != 1 {
            return dim_err("PACT alpha must have one element");
        }
        let p = PactParam::new(a.data()[0], k_act)?;
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| pact_forward_value(v, &p))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Pact { input, alpha }))
    }

    /// Propagates `d loss / d node` back to every parameter leaf, adding into
    /// the parameters' gradient slots. Each graph supports one backward pass.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut send = |to: NodeId, delta: Vec<f32>| accumulate(&mut grads, to, delta);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.get_mut(*id).accumulate_grad(&g)?,
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                    let (gi, gw, gb) = linear::dense_backward(
                        &g,
                        x.data(),
                        w.data(),
                        x.shape()[0],
                        x.shape()[1],
                        w.shape()[0],
                    );
                    send(*input, gi);
                    send(*weight, gw);
                    send(*bias, gb);
                }
                Op::Conv2d {
                    input,
                    weight,
                    geom,
                } => {
                    let (x, w) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                    let (gi, gw) = linear::conv2d_backward(&g, x.data(), w.data(), geom);
                    send(*input, gi);
                    send(*weight, gw);
                }
                Op::Relu { input } => {
                    // derivative at exactly 0 is 0
                    let x = &self.nodes[input.0].value;
                    let gi = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    send(*input, gi);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    layout,
                    saved,
                } => {
                    let gm = &self.nodes[gamma.0].value;
                    let (gi, gg, gb) = norm::batchnorm_backward(&g, *layout, gm.data(), saved);
                    send(*input, gi);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    layout,
                    normalized,
                    inv_std,
                } => {
                    let gm = self.nodes[gamma.0].value.data();
                    let mut gi = vec![0.0f32; g.len()];
                    let mut gg = vec![0.0f32; layout.channels];
                    let mut gb = vec![0.0f32; layout.channels];
                    for i in 0..g.len() {
                        let c = (i / layout.spatial) % layout.channels;
                        gi[i] = g[i] * gm[c] * inv_std[c];
                        gg[c] += g[i] * normalized[i];
                        gb[c] += g[i];
                    }
                    send(*input, gi);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::AvgPool { input, kernel } => {
                    let shape = self.nodes[input.0].value.shape();
                    send(*input, linear::avg_pool_backward(&g, shape, *kernel));
                }
                Op::Reshape { input } => send(*input, g),
                Op::Add { a, b } => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul { a, b } => {
                    let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.iter().zip(y.data()).map(|(g, v)| g * v).collect();
                    let gb = g.iter().zip(x.data()).map(|(g, v)| g * v).collect();
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                    classes,
                } => {
                    send(
                        *logits,
                        loss::softmax_xent_backward(g[0], probs, labels, *classes),
                    );
                }
                Op::MaskedSte { input, mask } => {
                    let gi = g.iter().zip(mask.as_f32()).map(|(g, m)| g * m).collect();
                    send(*input, gi);
                }
                Op::Pact { input, alpha } => {
                    let x = &self.nodes[input.0].value;
                    let a = self.nodes[alpha.0].value.data()[0];
                    let (gx, ga) = pact_backward_raw(&g, x.data(), a);
                    send(*input, gx);
                    send(*alpha, vec![ga]);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], to: NodeId, delta: Vec<f32>) {
    match &mut grads[to.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn without_grad(mut t: Tensor) -> Tensor {
    t.clear_grad();
    t
}
