//! Operation recording and the reverse-mode backward pass.
//!
//! A [`Recording`] is an append-only list of nodes; append order is the
//! topological order, and [`Recording::backward`] walks it in exact reverse.
//! One recording is confined to one logical training thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{NodeRef, Tensor};

pub type NodeId = usize;

static NEXT_RECORDING_ID: AtomicU64 = AtomicU64::new(1);

/// Input values saved for a backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Saved {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

impl Saved {
    pub fn of(t: &Tensor) -> Saved {
        Saved {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
        }
    }
}

/// Operation kind plus whatever the backward pass needs.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// inputs: [input, kernel, bias]
    Conv2d {
        stride: usize,
        pad: usize,
        input: Saved,
        kernel: Saved,
    },
    /// inputs: [input]; argmax holds the flat input index feeding each output
    /// cell (ties resolved to the first maximum in row-major scan order)
    MaxPool2d {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    /// inputs: [input, weight, bias]
    Linear {
        input: Saved,
        weight: Saved,
    },
    Relu {
        input: Saved,
    },
    Sigmoid {
        output: Saved,
    },
    GlobalAvgPool {
        in_shape: Vec<usize>,
    },
    /// inputs: [a, b], identical shapes
    Mul {
        a: Saved,
        b: Saved,
    },
    /// inputs: [input NCHW, mask NC]
    ChannelScale {
        input: Saved,
        mask: Saved,
    },
    /// Row-wise x / max(||x||, eps)
    L2Normalize {
        eps: f64,
        input: Saved,
        output: Saved,
    },
    Add,
    Sub,
    Scale {
        factor: f64,
    },
    SumAll {
        in_shape: Vec<usize>,
    },
    /// [N, D] -> [N]
    SumRows {
        in_shape: Vec<usize>,
    },
    Sqrt {
        output: Saved,
    },
    /// inputs: [logits]; mean over the batch of -sum_k y_k log softmax(z)_k
    CrossEntropyMean {
        softmax: Saved,
        onehot: Saved,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    /// None marks a constant input — no gradient flows there.
    pub inputs: Vec<Option<NodeId>>,
    pub out_shape: Vec<usize>,
}

struct Inner {
    nodes: Vec<Node>,
    /// Keyed leaves (parameter slots): fetching the same key twice in one
    /// step returns the same node, so aliased uses accumulate one gradient.
    keyed_leaves: HashMap<u64, NodeId>,
}

/// Append-only record of one step's computation.
pub struct Recording {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Recording {
    fn default() -> Self {
        Self::new()
    }
}

impl Recording {
    pub fn new() -> Recording {
        Recording {
            id: NEXT_RECORDING_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                keyed_leaves: HashMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attach a tensor as a fresh differentiable leaf.
    pub fn var(&self, t: &Tensor) -> Tensor {
        let node = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_shape: t.shape().to_vec(),
        });
        t.detached().with_node(NodeRef { rec_id: self.id, node })
    }

    /// Attach a tensor as a leaf identified by `key`, reusing the existing
    /// node if the key was already attached this step.
    pub fn keyed_var(&self, key: u64, t: &Tensor) -> Tensor {
        if let Some(&node) = self.inner.borrow().keyed_leaves.get(&key) {
            return t.detached().with_node(NodeRef { rec_id: self.id, node });
        }
        let out = self.var(t);
        let node = out.node.expect("var always attaches a node").node;
        self.inner.borrow_mut().keyed_leaves.insert(key, node);
        out
    }

    pub fn keyed_leaf(&self, key: u64) -> Option<NodeId> {
        self.inner.borrow().keyed_leaves.get(&key).copied()
    }

    pub(crate) fn push(&self, node: Node) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Node link for `t` if it was recorded here.
    pub(crate) fn link(&self, t: &Tensor) -> Result<Option<NodeId>> {
        match t.node {
            None => Ok(None),
            Some(nref) if nref.rec_id == self.id => Ok(Some(nref.node)),
            Some(_) => Err(Error::contract(
                "tensor belongs to a different recording".to_string(),
            )),
        }
    }

    pub(crate) fn node_ref(&self, node: NodeId) -> NodeRef {
        NodeRef { rec_id: self.id, node }
    }

    /// Reverse-mode sweep from a scalar loss. Returns the gradient of the
    /// loss with respect to every reachable leaf; unreached leaves are
    /// simply absent (callers read them as zeros).
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_node = self
            .link(loss)?
            .ok_or_else(|| Error::contract("loss tensor was not recorded".to_string()))?;

        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for id in (0..=loss_node).rev() {
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue; // keep leaf gradients in place
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let needs: Vec<bool> = node.inputs.iter().map(|l| l.is_some()).collect();
            let input_grads = op_backward(&node.op, &g, &needs);
            for (link, gin) in node.inputs.iter().zip(input_grads) {
                let (target, gin) = match (link, gin) {
                    (Some(t), Some(g)) => (*t, g),
                    _ => continue,
                };
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(gin.iter()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gin),
                }
            }
        }

        let mut leaf_grads = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let g = match g {
                Some(g) => g,
                None => continue,
            };
            if !matches!(inner.nodes[id].op, Op::Leaf) {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            let t = Tensor::new(inner.nodes[id].out_shape.clone(), g)
                .expect("gradient shape equals leaf shape");
            leaf_grads.insert(id, t);
        }

        Ok(GradMap {
            rec_id: self.id,
            grads: leaf_grads,
            keyed: inner.keyed_leaves.clone(),
        })
    }
}

/// Gradients keyed by leaf node, with a secondary index by leaf key.
pub struct GradMap {
    rec_id: u64,
    grads: HashMap<NodeId, Tensor>,
    keyed: HashMap<u64, NodeId>,
}

impl GradMap {
    /// Gradient of the loss with respect to `t`, if `t` is a reached leaf of
    /// the recording this map came from.
    pub fn grad(&self, t: &Tensor) -> Option<&Tensor> {
        match t.node {
            Some(nref) if nref.rec_id == self.rec_id => self.grads.get(&nref.node),
            _ => None,
        }
    }

    /// Gradient for `t`, or zeros of its shape when the loss never reached it.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Tensor {
        self.grad(t)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    /// Gradient for a keyed leaf (parameter slot), if reached.
    pub fn grad_for_key(&self, key: u64) -> Option<&Tensor> {
        self.keyed.get(&key).and_then(|node| self.grads.get(node))
    }
}

/// Per-op vector-Jacobian products. Entries align with the node's inputs;
/// `needs[i] == false` skips the work and yields None.
fn op_backward(op: &Op, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d {
            stride,
            pad,
            input,
            kernel,
        } => conv2d_backward(*stride, *pad, input, kernel, g, needs),
        Op::MaxPool2d { in_shape, argmax } => {
            let mut gi = vec![0.0; in_shape.iter().product()];
            for (out_idx, &in_idx) in argmax.iter().enumerate() {
                gi[in_idx] += g[out_idx];
            }
            vec![Some(gi)]
        }
        Op::Linear { input, weight } => linear_backward(input, weight, g, needs),
        Op::Relu { input } => {
            let gi = input
                .data
                .iter()
                .zip(g.iter())
                .map(|(&x, &go)| if x > 0.0 { go } else { 0.0 })
                .collect();
            vec![Some(gi)]
        }
        Op::Sigmoid { output } => {
            let gi = output
                .data
                .iter()
                .zip(g.iter())
                .map(|(&y, &go)| go * y * (1.0 - y))
                .collect();
            vec![Some(gi)]
        }
        Op::GlobalAvgPool { in_shape } => {
            let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
            let inv = 1.0 / (h * w) as f64;
            let mut gi = vec![0.0; n * c * h * w];
            for bi in 0..n {
                for ci in 0..c {
                    let go = g[bi * c + ci] * inv;
                    let base = (bi * c + ci) * h * w;
                    for v in &mut gi[base..base + h * w] {
                        *v = go;
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::Mul { a, b } => {
            let ga = needs[0].then(|| b.data.iter().zip(g).map(|(&bv, &go)| go * bv).collect());
            let gb = needs[1].then(|| a.data.iter().zip(g).map(|(&av, &go)| go * av).collect());
            vec![ga, gb]
        }
        Op::ChannelScale { input, mask } => channel_scale_backward(input, mask, g, needs),
        Op::L2Normalize { eps, input, output } => {
            vec![Some(l2_normalize_backward(*eps, input, output, g))]
        }
        Op::Add => vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.to_vec()),
        ],
        Op::Sub => vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Scale { factor } => vec![Some(g.iter().map(|v| v * factor).collect())],
        Op::SumAll { in_shape } => {
            vec![Some(vec![g[0]; in_shape.iter().product()])]
        }
        Op::SumRows { in_shape } => {
            let (n, d) = (in_shape[0], in_shape[1]);
            let mut gi = vec![0.0; n * d];
            for row in 0..n {
                for col in 0..d {
                    gi[row * d + col] = g[row];
                }
            }
            vec![Some(gi)]
        }
        Op::Sqrt { output } => {
            // Subgradient 0 at sqrt(0): coincident embeddings yield zero pull.
            let gi = output
                .data
                .iter()
                .zip(g.iter())
                .map(|(&y, &go)| if y == 0.0 { 0.0 } else { go * 0.5 / y })
                .collect();
            vec![Some(gi)]
        }
        Op::CrossEntropyMean { softmax, onehot } => {
            let n = softmax.shape[0] as f64;
            let gi = softmax
                .data
                .iter()
                .zip(onehot.data.iter())
                .map(|(&p, &y)| g[0] * (p - y) / n)
                .collect();
            vec![Some(gi)]
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
    }
}

fn conv2d_backward(
    stride: usize,
    pad: usize,
    input: &Saved,
    kernel: &Saved,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (n, cin, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (cout, _, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let mut gi = needs[0].then(|| vec![0.0; n * cin * h * w]);
    let mut gk = needs[1].then(|| vec![0.0; cout * cin * kh * kw]);
    let mut gb = needs[2].then(|| vec![0.0; cout]);

    let x = &input.data;
    let k = &kernel.data;
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((bi * cout + co) * oh + oy) * ow + ox];
                    if let Some(gb) = gb.as_deref_mut() {
                        gb[co] += go;
                    }
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                if let Some(gi) = gi.as_deref_mut() {
                                    gi[xi] += go * k[ki];
                                }
                                if let Some(gk) = gk.as_deref_mut() {
                                    gk[ki] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    vec![gi, gk, gb]
}

fn linear_backward(
    input: &Saved,
    weight: &Saved,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (n, d) = (input.shape[0], input.shape[1]);
    let m = weight.shape[0];

    let gi = needs[0].then(|| {
        let mut gi = vec![0.0; n * d];
        for row in 0..n {
            for mi in 0..m {
                let go = g[row * m + mi];
                for di in 0..d {
                    gi[row * d + di] += go * weight.data[mi * d + di];
                }
            }
        }
        gi
    });
    let gw = needs[1].then(|| {
        let mut gw = vec![0.0; m * d];
        for row in 0..n {
            for mi in 0..m {
                let go = g[row * m + mi];
                for di in 0..d {
                    gw[mi * d + di] += go * input.data[row * d + di];
                }
            }
        }
        gw
    });
    let gb = needs[2].then(|| {
        let mut gb = vec![0.0; m];
        for row in 0..n {
            for mi in 0..m {
                gb[mi] += g[row * m + mi];
            }
        }
        gb
    });
    vec![gi, gw, gb]
}

fn channel_scale_backward(
    input: &Saved,
    mask: &Saved,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let plane = h * w;
    let gi = needs[0].then(|| {
        let mut gi = vec![0.0; n * c * plane];
        for bi in 0..n {
            for ci in 0..c {
                let mv = mask.data[bi * c + ci];
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    gi[base + i] = g[base + i] * mv;
                }
            }
        }
        gi
    });
    let gm = needs[1].then(|| {
        let mut gm = vec![0.0; n * c];
        for bi in 0..n {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut acc = 0.0;
                for i in 0..plane {
                    acc += g[base + i] * input.data[base + i];
                }
                gm[bi * c + ci] = acc;
            }
        }
        gm
    });
    vec![gi, gm]
}

fn l2_normalize_backward(eps: f64, input: &Saved, output: &Saved, g: &[f64]) -> Vec<f64> {
    let (n, d) = (input.shape[0], input.shape[1]);
    let mut gi = vec![0.0; n * d];
    for row in 0..n {
        let x = &input.data[row * d..(row + 1) * d];
        let y = &output.data[row * d..(row + 1) * d];
        let go = &g[row * d..(row + 1) * d];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = &mut gi[row * d..(row + 1) * d];
        if norm > eps {
            let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
            for i in 0..d {
                out[i] = (go[i] - y[i] * dot) / norm;
            }
        } else {
            // Clamped branch is plain division by eps.
            for i in 0..d {
                out[i] = go[i] / eps;
            }
        }
    }
    gi
}
