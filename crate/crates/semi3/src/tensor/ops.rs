//! Forward operations. Every op validates its shape contract, refuses to
//! return non-finite values, and appends a node to the recording whenever a
//! differentiable input is involved.

use crate::error::{Error, Result};
use crate::tensor::recording::{GradMap, Node, Op, Recording, Saved};
use crate::tensor::Tensor;

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

// Largest f64 strictly below 1; sigmoid clamps here so its output stays in
// the open interval (0, 1) even for saturating inputs.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

fn finish(
    rec: &Recording,
    op_name: &'static str,
    op: Op,
    inputs: &[&Tensor],
    out_shape: Vec<usize>,
    data: Vec<f64>,
) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: op_name });
    }
    let links: Vec<_> = inputs
        .iter()
        .map(|t| rec.link(t))
        .collect::<Result<Vec<_>>>()?;
    let out = Tensor::new(out_shape.clone(), data)?;
    if links.iter().all(|l| l.is_none()) {
        return Ok(out); // pure constant computation, nothing to record
    }
    let node = rec.push(Node {
        op,
        inputs: links,
        out_shape,
    });
    Ok(out.with_node(rec.node_ref(node)))
}

/// 2-d convolution with zero padding.
/// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
pub fn conv2d(
    rec: &Recording,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 4 || kshape.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d wants 4-d input and kernel, got {:?} and {:?}",
            ishape, kshape
        )));
    }
    let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if cin != kcin {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input Cin={cin}, kernel Cin={kcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv2d bias shape {:?} does not match Cout={cout}",
            bias.shape()
        )));
    }
    if stride < 1 {
        return Err(Error::dim("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
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
                                acc += x[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    finish(
        rec,
        "conv2d",
        Op::Conv2d {
            stride,
            pad,
            input: Saved::of(input),
            kernel: Saved::of(kernel),
        },
        &[input, kernel, bias],
        vec![n, cout, oh, ow],
        out,
    )
}

/// Max pooling over k x k windows. Gradients route to the argmax position
/// only; ties break to the first maximum in row-major scan order.
pub fn maxpool2d(rec: &Recording, input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!(
            "maxpool2d wants 4-d input, got {:?}",
            shape
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k > h || k > w {
        return Err(Error::dim(format!(
            "maxpool2d window {k} exceeds input {h}x{w}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;

    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx =
                                ((bi * c + ci) * h + oy * stride + ky) * w + ox * stride + kx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oi = ((bi * c + ci) * oh + oy) * ow + ox;
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    finish(
        rec,
        "maxpool2d",
        Op::MaxPool2d {
            in_shape: shape.to_vec(),
            argmax,
        },
        &[input],
        vec![n, c, oh, ow],
        out,
    )
}

/// Fully connected layer: out[n,m] = sum_d input[n,d] * weight[m,d] + bias[m].
pub fn linear(rec: &Recording, input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 2 || wshape.len() != 2 {
        return Err(Error::dim(format!(
            "linear wants 2-d input and weight, got {:?} and {:?}",
            ishape, wshape
        )));
    }
    let (n, d) = (ishape[0], ishape[1]);
    let (m, wd) = (wshape[0], wshape[1]);
    if d != wd {
        return Err(Error::dim(format!(
            "linear inner dimensions disagree: input D={d}, weight D={wd}"
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::dim(format!(
            "linear bias shape {:?} does not match M={m}",
            bias.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * m];
    for row in 0..n {
        for mi in 0..m {
            let mut acc = b[mi];
            for di in 0..d {
                acc += x[row * d + di] * wt[mi * d + di];
            }
            out[row * m + mi] = acc;
        }
    }
    finish(
        rec,
        "linear",
        Op::Linear {
            input: Saved::of(input),
            weight: Saved::of(weight),
        },
        &[input, weight, bias],
        vec![n, m],
        out,
    )
}

/// Elementwise ReLU or sigmoid. Sigmoid output is clamped into the open
/// interval (0, 1) so saturation never rounds to an endpoint.
pub fn activation(rec: &Recording, input: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => {
            let out = input.data().iter().map(|&v| v.max(0.0)).collect();
            finish(
                rec,
                "relu",
                Op::Relu {
                    input: Saved::of(input),
                },
                &[input],
                input.shape().to_vec(),
                out,
            )
        }
        Activation::Sigmoid => {
            let out: Vec<f64> = input
                .data()
                .iter()
                .map(|&v| {
                    let y = 1.0 / (1.0 + (-v).exp());
                    y.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
                })
                .collect();
            let saved = Tensor::new(input.shape().to_vec(), out.clone())?;
            finish(
                rec,
                "sigmoid",
                Op::Sigmoid {
                    output: Saved::of(&saved),
                },
                &[input],
                input.shape().to_vec(),
                out,
            )
        }
    }
}

pub fn relu(rec: &Recording, input: &Tensor) -> Result<Tensor> {
    activation(rec, input, Activation::Relu)
}

pub fn sigmoid(rec: &Recording, input: &Tensor) -> Result<Tensor> {
    activation(rec, input, Activation::Sigmoid)
}

/// Mean over the spatial dimensions: [N,C,H,W] -> [N,C].
pub fn global_avg_pool(rec: &Recording, input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!(
            "global_avg_pool wants 4-d input, got {:?}",
            shape
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let inv = 1.0 / (h * w) as f64;
    let x = input.data();
    let mut out = vec![0.0; n * c];
    for bi in 0..n {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            out[bi * c + ci] = x[base..base + h * w].iter().sum::<f64>() * inv;
        }
    }
    finish(
        rec,
        "global_avg_pool",
        Op::GlobalAvgPool {
            in_shape: shape.to_vec(),
        },
        &[input],
        vec![n, c],
        out,
    )
}

/// Elementwise product of same-shaped tensors.
pub fn elementwise_mul(rec: &Recording, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "elementwise_mul shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    finish(
        rec,
        "elementwise_mul",
        Op::Mul {
            a: Saved::of(a),
            b: Saved::of(b),
        },
        &[a, b],
        a.shape().to_vec(),
        out,
    )
}

/// Scale every spatial plane of `input` by its channel's mask entry.
pub fn channel_scale(rec: &Recording, input: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 4 || mask.shape().len() != 2 {
        return Err(Error::dim(format!(
            "channel_scale wants [N,C,H,W] and [N,C], got {:?} and {:?}",
            ishape,
            mask.shape()
        )));
    }
    if mask.shape()[0] != ishape[0] || mask.shape()[1] != ishape[1] {
        return Err(Error::dim(format!(
            "channel_scale channel mismatch: input {:?}, mask {:?}",
            ishape,
            mask.shape()
        )));
    }
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let plane = h * w;
    let x = input.data();
    let m = mask.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..n {
        for ci in 0..c {
            let mv = m[bi * c + ci];
            let base = (bi * c + ci) * plane;
            for i in 0..plane {
                out[base + i] = x[base + i] * mv;
            }
        }
    }
    finish(
        rec,
        "channel_scale",
        Op::ChannelScale {
            input: Saved::of(input),
            mask: Saved::of(mask),
        },
        &[input, mask],
        ishape.to_vec(),
        out,
    )
}

pub const L2_NORM_EPS: f64 = 1e-12;

/// Divide each row by max(its L2 norm, eps). Zero rows pass through scaled
/// by 1/eps instead of erroring.
pub fn l2_normalize(rec: &Recording, input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!(
            "l2_normalize wants a 2-d input, got {:?}",
            shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = input.data();
    let mut out = vec![0.0; n * d];
    for row in 0..n {
        let r = &x[row * d..(row + 1) * d];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let div = norm.max(L2_NORM_EPS);
        for i in 0..d {
            out[row * d + i] = r[i] / div;
        }
    }
    let saved = Tensor::new(shape.to_vec(), out.clone())?;
    finish(
        rec,
        "l2_normalize",
        Op::L2Normalize {
            eps: L2_NORM_EPS,
            input: Saved::of(input),
            output: Saved::of(&saved),
        },
        &[input],
        shape.to_vec(),
        out,
    )
}

pub fn add(rec: &Recording, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    finish(rec, "add", Op::Add, &[a, b], a.shape().to_vec(), out)
}

pub fn sub(rec: &Recording, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "sub shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    finish(rec, "sub", Op::Sub, &[a, b], a.shape().to_vec(), out)
}

pub fn scale(rec: &Recording, a: &Tensor, factor: f64) -> Result<Tensor> {
    let out = a.data().iter().map(|x| x * factor).collect();
    finish(
        rec,
        "scale",
        Op::Scale { factor },
        &[a],
        a.shape().to_vec(),
        out,
    )
}

/// Sum of all elements, as a rank-0 scalar.
pub fn sum_all(rec: &Recording, a: &Tensor) -> Result<Tensor> {
    let out = vec![a.data().iter().sum()];
    finish(
        rec,
        "sum_all",
        Op::SumAll {
            in_shape: a.shape().to_vec(),
        },
        &[a],
        Vec::new(),
        out,
    )
}

/// Row sums: [N,D] -> [N].
pub fn sum_rows(rec: &Recording, a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("sum_rows wants 2-d input, got {:?}", shape)));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = a.data();
    let out = (0..n)
        .map(|row| x[row * d..(row + 1) * d].iter().sum())
        .collect();
    finish(
        rec,
        "sum_rows",
        Op::SumRows {
            in_shape: shape.to_vec(),
        },
        &[a],
        vec![n],
        out,
    )
}

/// Elementwise square root. Requires non-negative input.
pub fn sqrt(rec: &Recording, a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("sqrt of a negative value".into()));
    }
    let out: Vec<f64> = a.data().iter().map(|v| v.sqrt()).collect();
    let saved = Tensor::new(a.shape().to_vec(), out.clone())?;
    finish(
        rec,
        "sqrt",
        Op::Sqrt {
            output: Saved::of(&saved),
        },
        &[a],
        a.shape().to_vec(),
        out,
    )
}

/// Softmax cross-entropy against one-hot labels, averaged over the batch.
/// Uses the log-sum-exp form; labels must be exactly one-hot.
pub fn cross_entropy_mean(rec: &Recording, logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || onehot.shape() != shape {
        return Err(Error::dim(format!(
            "cross_entropy wants matching 2-d logits and labels, got {:?} and {:?}",
            shape,
            onehot.shape()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let y = onehot.data();
    for row in 0..n {
        let r = &y[row * k..(row + 1) * k];
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!(
                "label row {row} is not one-hot: {:?}",
                r
            )));
        }
    }
    let z = logits.data();
    let mut softmax = vec![0.0; n * k];
    let mut total = 0.0;
    for row in 0..n {
        let zr = &z[row * k..(row + 1) * k];
        let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in zr {
            denom += (v - m).exp();
        }
        let lse = m + denom.ln();
        for i in 0..k {
            softmax[row * k + i] = (zr[i] - m).exp() / denom;
        }
        let target: f64 = zr
            .iter()
            .zip(&y[row * k..(row + 1) * k])
            .map(|(zv, yv)| zv * yv)
            .sum();
        total += lse - target;
    }
    let loss = total / n as f64;
    let softmax_t = Tensor::new(vec![n, k], softmax)?;
    finish(
        rec,
        "cross_entropy",
        Op::CrossEntropyMean {
            softmax: Saved::of(&softmax_t),
            onehot: Saved::of(onehot),
        },
        &[logits],
        Vec::new(),
        vec![loss],
    )
}

/// Change shape without touching data.
pub fn reshape(rec: &Recording, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(Error::dim(format!(
            "reshape {:?} -> {:?} changes element count",
            a.shape(),
            shape
        )));
    }
    finish(
        rec,
        "reshape",
        Op::Reshape {
            in_shape: a.shape().to_vec(),
        },
        &[a],
        shape.to_vec(),
        a.data().to_vec(),
    )
}

/// Mean of all elements, as a rank-0 scalar.
pub fn mean_all(rec: &Recording, a: &Tensor) -> Result<Tensor> {
    let total = sum_all(rec, a)?;
    scale(rec, &total, 1.0 / a.numel() as f64)
}

/// Reverse-mode gradients of a scalar loss recorded on `rec`.
pub fn backward(rec: &Recording, loss: &Tensor) -> Result<GradMap> {
    rec.backward(loss)
}
