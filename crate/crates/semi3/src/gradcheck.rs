//! Finite-difference verification of every gradient path.
//!
//! The numeric side only ever calls forward code (fresh recordings, no
//! backward), so it is an independent oracle for the reverse-mode
//! implementation. Central differences with step 1e-6; relative error is
//! measured as |analytic - numeric| / max(1, |numeric|).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{self, HybridBatch};
use crate::model::Semi3Model;
use crate::tensor::ops;
use crate::tensor::{Recording, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<28} max_rel_err={:.3e} tol={:.0e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.tol
                )
            })
            .collect()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central-difference gradient of a scalar function of a flat buffer.
pub fn central_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values in [-1,1] kept away from zero, for kinked ops.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() > margin {
                break v;
            }
        })
        .collect()
}

/// One op check: loss(x...) = sum(op(x...) * probe_weights). The closure
/// rebuilds the op from flat buffers; `arg` selects which input to
/// differentiate.
struct OpCheck<'a> {
    name: String,
    // buffers for all inputs of the op
    inputs: Vec<Vec<f64>>,
    // which inputs get checked (e.g. skip integer-like constants)
    diff_args: Vec<usize>,
    forward: Box<dyn Fn(&Recording, &[Tensor]) -> Result<Tensor> + 'a>,
    shapes: Vec<Vec<usize>>,
}

fn run_op_check(check: &OpCheck, probe: &[f64], report: &mut Report) -> Result<()> {
    let build = |bufs: &[Vec<f64>]| -> Result<Vec<Tensor>> {
        bufs.iter()
            .zip(&check.shapes)
            .map(|(b, s)| Tensor::new(s.clone(), b.clone()))
            .collect()
    };

    // analytic gradients, one recording, all inputs as leaves
    let rec = Recording::new();
    let tensors = build(&check.inputs)?;
    let vars: Vec<Tensor> = tensors.iter().map(|t| rec.var(t)).collect();
    let out = (check.forward)(&rec, &vars)?;
    debug_assert_eq!(out.numel(), probe.len(), "probe must match op output size");
    let w = Tensor::new(out.shape().to_vec(), probe.to_vec())?;
    let loss = ops::sum_all(&rec, &ops::elementwise_mul(&rec, &out, &w)?)?;
    let grads = rec.backward(&loss)?;

    for &arg in &check.diff_args {
        // numeric gradient: pure forward evaluations
        let numeric = central_diff(
            |x: &[f64]| -> Result<f64> {
                let mut bufs = check.inputs.clone();
                bufs[arg] = x.to_vec();
                let rec = Recording::new();
                let tensors = build(&bufs)?;
                let out = (check.forward)(&rec, &tensors)?;
                let w = Tensor::new(out.shape().to_vec(), probe.to_vec())?;
                ops::sum_all(&rec, &ops::elementwise_mul(&rec, &out, &w)?)?.item()
            },
            &check.inputs[arg],
            FD_STEP,
        )?;
        let analytic = grads.grad_or_zeros(&vars[arg]);
        let max_err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        report.checks.push(CheckResult {
            name: format!("{}[arg{}]", check.name, arg),
            max_rel_err: max_err,
            tol: OP_TOL,
        });
    }
    Ok(())
}

/// Finite-difference check of every differentiable operation.
pub fn op_gradient_suite(seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();

    // conv2d: 1x2x5x5 input, 3x2x3x3 kernel, stride 1, pad 1
    {
        let shapes = vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]];
        let inputs = shapes
            .iter()
            .map(|s| rand_vec(&mut rng, s.iter().product(), -1.0, 1.0))
            .collect();
        let probe = rand_vec(&mut rng, 3 * 5 * 5, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "conv2d".into(),
                inputs,
                diff_args: vec![0, 1, 2],
                forward: Box::new(|rec, t| ops::conv2d(rec, &t[0], &t[1], &t[2], 1, 1)),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // maxpool2d: keep window runner-ups clearly separated so the FD step
    // cannot flip an argmax
    {
        let shapes = vec![vec![1, 2, 6, 6]];
        let inputs = vec![separated_pool_input(&mut rng, 72)];
        let probe = rand_vec(&mut rng, 2 * 3 * 3, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "maxpool2d".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::maxpool2d(rec, &t[0], 2, 2)),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // linear: 3x4 by 5x4
    {
        let shapes = vec![vec![3, 4], vec![5, 4], vec![5]];
        let inputs = shapes
            .iter()
            .map(|s| rand_vec(&mut rng, s.iter().product(), -1.0, 1.0))
            .collect();
        let probe = rand_vec(&mut rng, 15, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "linear".into(),
                inputs,
                diff_args: vec![0, 1, 2],
                forward: Box::new(|rec, t| ops::linear(rec, &t[0], &t[1], &t[2])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // relu: inputs bounded away from the kink
    {
        let shapes = vec![vec![4, 6]];
        let inputs = vec![rand_vec_off_zero(&mut rng, 24, 1e-3)];
        let probe = rand_vec(&mut rng, 24, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "relu".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::relu(rec, &t[0])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // sigmoid
    {
        let shapes = vec![vec![4, 6]];
        let inputs = vec![rand_vec(&mut rng, 24, -3.0, 3.0)];
        let probe = rand_vec(&mut rng, 24, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "sigmoid".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::sigmoid(rec, &t[0])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // global_avg_pool
    {
        let shapes = vec![vec![2, 3, 4, 4]];
        let inputs = vec![rand_vec(&mut rng, 96, -1.0, 1.0)];
        let probe = rand_vec(&mut rng, 6, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "global_avg_pool".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::global_avg_pool(rec, &t[0])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // elementwise_mul
    {
        let shapes = vec![vec![3, 5], vec![3, 5]];
        let inputs = vec![rand_vec(&mut rng, 15, -1.0, 1.0), rand_vec(&mut rng, 15, -1.0, 1.0)];
        let probe = rand_vec(&mut rng, 15, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "elementwise_mul".into(),
                inputs,
                diff_args: vec![0, 1],
                forward: Box::new(|rec, t| ops::elementwise_mul(rec, &t[0], &t[1])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // channel_scale
    {
        let shapes = vec![vec![2, 3, 3, 3], vec![2, 3]];
        let inputs = vec![rand_vec(&mut rng, 54, -1.0, 1.0), rand_vec(&mut rng, 6, 0.05, 0.95)];
        let probe = rand_vec(&mut rng, 54, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "channel_scale".into(),
                inputs,
                diff_args: vec![0, 1],
                forward: Box::new(|rec, t| ops::channel_scale(rec, &t[0], &t[1])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // l2_normalize: rows with clearly nonzero norm
    {
        let shapes = vec![vec![3, 6]];
        let inputs = vec![rand_vec_off_zero(&mut rng, 18, 0.05)];
        let probe = rand_vec(&mut rng, 18, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "l2_normalize".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::l2_normalize(rec, &t[0])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // add / sub / scale / reshape
    {
        let shapes = vec![vec![3, 4], vec![3, 4]];
        let inputs = vec![rand_vec(&mut rng, 12, -1.0, 1.0), rand_vec(&mut rng, 12, -1.0, 1.0)];
        let probe = rand_vec(&mut rng, 12, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "add".into(),
                inputs: inputs.clone(),
                diff_args: vec![0, 1],
                forward: Box::new(|rec, t| ops::add(rec, &t[0], &t[1])),
                shapes: shapes.clone(),
            },
            &probe,
            &mut report,
        )?;
        run_op_check(
            &OpCheck {
                name: "sub".into(),
                inputs: inputs.clone(),
                diff_args: vec![0, 1],
                forward: Box::new(|rec, t| ops::sub(rec, &t[0], &t[1])),
                shapes: shapes.clone(),
            },
            &probe,
            &mut report,
        )?;
        run_op_check(
            &OpCheck {
                name: "scale".into(),
                inputs: vec![inputs[0].clone()],
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::scale(rec, &t[0], -1.7)),
                shapes: vec![shapes[0].clone()],
            },
            &probe,
            &mut report,
        )?;
        run_op_check(
            &OpCheck {
                name: "reshape".into(),
                inputs: vec![inputs[0].clone()],
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::reshape(rec, &t[0], &[2, 6])),
                shapes: vec![shapes[0].clone()],
            },
            &probe,
            &mut report,
        )?;
    }

    // sum_all / sum_rows
    {
        let shapes = vec![vec![3, 4]];
        let inputs = vec![rand_vec(&mut rng, 12, -1.0, 1.0)];
        let probe1 = rand_vec(&mut rng, 1, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "sum_all".into(),
                inputs: inputs.clone(),
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::sum_all(rec, &t[0])),
                shapes: shapes.clone(),
            },
            &probe1,
            &mut report,
        )?;
        let probe3 = rand_vec(&mut rng, 3, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "sum_rows".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::sum_rows(rec, &t[0])),
                shapes,
            },
            &probe3,
            &mut report,
        )?;
    }

    // sqrt on inputs bounded away from zero
    {
        let shapes = vec![vec![10]];
        let inputs = vec![rand_vec(&mut rng, 10, 0.05, 2.0)];
        let probe = rand_vec(&mut rng, 10, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "sqrt".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(|rec, t| ops::sqrt(rec, &t[0])),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    // cross-entropy: logits differentiable, labels constant
    {
        let onehot = losses::one_hot(&[1, 0, 3], 4)?;
        let shapes = vec![vec![3, 4]];
        let inputs = vec![rand_vec(&mut rng, 12, -2.0, 2.0)];
        let probe = rand_vec(&mut rng, 1, -1.0, 1.0);
        run_op_check(
            &OpCheck {
                name: "cross_entropy".into(),
                inputs,
                diff_args: vec![0],
                forward: Box::new(move |rec, t| ops::cross_entropy_mean(rec, &t[0], &onehot)),
                shapes,
            },
            &probe,
            &mut report,
        )?;
    }

    Ok(report)
}

/// Pool input where every 2x2 window has a clear winner.
fn separated_pool_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = rand_vec(rng, n, -1.0, 1.0);
        // 6x6 planes, 2x2 windows
        let ok = (0..n / 36).all(|plane| {
            (0..3).all(|wy| {
                (0..3).all(|wx| {
                    let mut vals: Vec<f64> = (0..2)
                        .flat_map(|dy| {
                            (0..2).map(move |dx| (wy * 2 + dy, wx * 2 + dx))
                        })
                        .map(|(y, x)| v[plane * 36 + y * 6 + x])
                        .collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    vals[0] - vals[1] > 1e-4
                })
            })
        });
        if ok {
            return v;
        }
    }
}

/// Micro configuration for the composite check: small enough that exact
/// finite differences over every parameter stay fast.
pub fn micro_run_config(seed: u64) -> RunConfig {
    RunConfig {
        image_size: 8,
        stages: vec![(1, 4), (1, 4)],
        fc_dims: vec![8],
        embed_dim: 8,
        num_classes: 3,
        num_categories: 3,
        per_category: 2,
        attention_reduction: 2,
        seed,
        ..RunConfig::default()
    }
}

/// The full composite: forward_triple plus the combined loss on a 2-sample
/// batch, checked against finite differences for every parameter element.
pub fn end_to_end_check(seed: u64) -> Result<Report> {
    let run = micro_run_config(seed);
    let mut model = Semi3Model::new(&run)?;
    model.tie()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let n = 2;
    let size = run.image_size;
    let s = Tensor::new(vec![n, 3, size, size], rand_vec(&mut rng, n * 3 * size * size, 0.0, 1.0))?;
    let i = Tensor::new(vec![n, 3, size, size], rand_vec(&mut rng, n * 3 * size * size, 0.0, 1.0))?;
    let e = Tensor::new(vec![n, 3, size, size], rand_vec(&mut rng, n * 3 * size * size, 0.0, 1.0))?;
    let sketch_cats = vec![0usize, 1];
    let image_cats = vec![0usize, 2];
    let l_sim = Tensor::new(vec![n], vec![1.0, 0.0])?;
    let onehot_s = losses::one_hot(&sketch_cats, run.num_classes)?;
    let onehot_i = losses::one_hot(&image_cats, run.num_classes)?;
    let weights = run.loss_weights();

    let loss_of = |model: &Semi3Model| -> Result<f64> {
        let rec = Recording::new();
        let out = model.forward_triple(&rec, &s, &i, &e)?;
        let (total, _) = losses::hybrid_loss(
            &rec,
            &HybridBatch {
                f_s: &out.f_s,
                f_i: &out.f_i,
                f_e: &out.f_e,
                logits_s: &out.logits_s,
                logits_i: &out.logits_i,
                logits_e: &out.logits_e,
                onehot_s: &onehot_s,
                onehot_i: &onehot_i,
                l_sim: &l_sim,
            },
            &weights,
        )?;
        total.item()
    };

    // analytic pass
    let rec = Recording::new();
    let out = model.forward_triple(&rec, &s, &i, &e)?;
    let (total, _) = losses::hybrid_loss(
        &rec,
        &HybridBatch {
            f_s: &out.f_s,
            f_i: &out.f_i,
            f_e: &out.f_e,
            logits_s: &out.logits_s,
            logits_i: &out.logits_i,
            logits_e: &out.logits_e,
            onehot_s: &onehot_s,
            onehot_i: &onehot_i,
            l_sim: &l_sim,
        },
        &weights,
    )?;
    let grads = rec.backward(&total)?;

    let slots = model.store.unique_slots();
    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    for slot in slots {
        let analytic = grads
            .grad_for_key(slot as u64)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; model.store.slot_data(slot).len()]);
        let base = model.store.slot_data(slot).to_vec();
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus[idx] += FD_STEP;
            model.store.replace_slot_data(slot, plus);
            let f_plus = loss_of(&model)?;
            let mut minus = base.clone();
            minus[idx] -= FD_STEP;
            model.store.replace_slot_data(slot, minus);
            let f_minus = loss_of(&model)?;
            model.store.replace_slot_data(slot, base.clone());
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[idx], numeric);
            if err > max_err {
                max_err = err;
                worst = format!("slot {slot} element {idx}");
            }
        }
    }

    let mut report = Report::default();
    report.checks.push(CheckResult {
        name: format!("forward_triple+hybrid_loss ({worst})"),
        max_rel_err: max_err,
        tol: END_TO_END_TOL,
    });
    Ok(report)
}

/// Everything the `grad-check` command runs.
pub fn full_suite(seed: u64) -> Result<Report> {
    let mut report = op_gradient_suite(seed)?;
    report.checks.extend(end_to_end_check(seed)?.checks);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_identity_and_fd() {
        // d/dx sigmoid = s(x)(1-s(x)); both must match finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: f64 = rng.random_range(-4.0..4.0);
            let rec = Recording::new();
            let xt = rec.var(&Tensor::new(vec![1, 1], vec![x]).unwrap());
            let y = ops::sigmoid(&rec, &xt).unwrap();
            let loss = ops::sum_all(&rec, &y).unwrap();
            let g = rec.backward(&loss).unwrap().grad(&xt).unwrap().data()[0];

            let s = 1.0 / (1.0 + (-x).exp());
            assert!((g - s * (1.0 - s)).abs() < 1e-12);

            let numeric = central_diff(
                |v| {
                    let rec = Recording::new();
                    let t = Tensor::new(vec![1, 1], v.to_vec()).unwrap();
                    ops::sum_all(&rec, &ops::sigmoid(&rec, &t).unwrap()).unwrap().item()
                },
                &[x],
                FD_STEP,
            )
            .unwrap()[0];
            assert!(rel_err(g, numeric) < 1e-6);
        }
    }

    #[test]
    fn op_suite_passes() {
        let report = op_gradient_suite(0xC0FFEE).unwrap();
        for line in report.lines() {
            eprintln!("{line}");
        }
        assert!(report.passed());
    }
}
