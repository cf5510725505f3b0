//! Channel-wise attention and the co-attention model.
//!
//! Each attention module squeezes a feature map with global average
//! pooling, runs a two-layer bottleneck (FC, ReLU, FC, sigmoid), and emits
//! a per-channel mask in (0,1). The co-attention model multiplies the image
//! and edgemap masks into one co-mask that rescales both feature maps; the
//! sketch branch applies its own mask directly.

use crate::error::{Error, Result};
use crate::params::{Init, ParameterStore};
use crate::tensor::ops;
use crate::tensor::{Recording, Tensor};

/// One squeeze-excite style attention module over `channels` channels.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

/// Register the two FC layers of an attention module under `prefix`.
pub fn build_attention(
    prefix: &str,
    channels: usize,
    reduction: usize,
    store: &mut ParameterStore,
) -> Result<AttentionModule> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "attention reduction {reduction} must divide channel count {channels}"
        )));
    }
    let hidden = channels / reduction;
    let sigma1 = (2.0 / channels as f64).sqrt();
    let sigma2 = (1.0 / hidden as f64).sqrt();
    store.register(&format!("{prefix}.fc1.weight"), &[hidden, channels], Init::Gaussian(sigma1))?;
    store.register(&format!("{prefix}.fc1.bias"), &[hidden], Init::Zeros)?;
    store.register(&format!("{prefix}.fc2.weight"), &[channels, hidden], Init::Gaussian(sigma2))?;
    store.register(&format!("{prefix}.fc2.bias"), &[channels], Init::Zeros)?;
    Ok(AttentionModule {
        prefix: prefix.to_string(),
        channels,
        reduction,
    })
}

/// sigmoid(W2 . relu(W1 . GAP(x) + b1) + b2) as an [N,C] mask in (0,1).
pub fn attention_mask(
    module: &AttentionModule,
    store: &ParameterStore,
    rec: &Recording,
    x: &Tensor,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != module.channels {
        return Err(Error::dim(format!(
            "attention module over {} channels got input {:?}",
            module.channels, shape
        )));
    }
    let squeezed = ops::global_avg_pool(rec, x)?;
    let w1 = store.tracked(rec, &format!("{}.fc1.weight", module.prefix))?;
    let b1 = store.tracked(rec, &format!("{}.fc1.bias", module.prefix))?;
    let hidden = ops::relu(rec, &ops::linear(rec, &squeezed, &w1, &b1)?)?;
    let w2 = store.tracked(rec, &format!("{}.fc2.weight", module.prefix))?;
    let b2 = store.tracked(rec, &format!("{}.fc2.bias", module.prefix))?;
    ops::sigmoid(rec, &ops::linear(rec, &hidden, &w2, &b2)?)
}

/// Elementwise product of two masks; symmetric, entrywise below both.
pub fn co_mask(rec: &Recording, mask_i: &Tensor, mask_e: &Tensor) -> Result<Tensor> {
    ops::elementwise_mul(rec, mask_i, mask_e)
}

/// Rescale both the image and edgemap feature maps by their shared co-mask.
pub fn apply_co_attention(
    attn_i: &AttentionModule,
    attn_e: &AttentionModule,
    store: &ParameterStore,
    rec: &Recording,
    x_i: &Tensor,
    x_e: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if x_i.shape() != x_e.shape() {
        return Err(Error::dim(format!(
            "co-attention inputs differ: {:?} vs {:?}",
            x_i.shape(),
            x_e.shape()
        )));
    }
    let mask_i = attention_mask(attn_i, store, rec, x_i)?;
    let mask_e = attention_mask(attn_e, store, rec, x_e)?;
    let co = co_mask(rec, &mask_i, &mask_e)?;
    let out_i = ops::channel_scale(rec, x_i, &co)?;
    let out_e = ops::channel_scale(rec, x_e, &co)?;
    Ok((out_i, out_e))
}

/// The sketch branch reweights itself with its own mask; no co-mask.
pub fn apply_self_attention(
    attn: &AttentionModule,
    store: &ParameterStore,
    rec: &Recording,
    x: &Tensor,
) -> Result<Tensor> {
    let mask = attention_mask(attn, store, rec, x)?;
    ops::channel_scale(rec, x, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(store: &mut ParameterStore, prefix: &str, c: usize) -> AttentionModule {
        build_attention(prefix, c, 4, store).unwrap()
    }

    #[test]
    fn zero_second_layer_gives_half_mask() {
        let mut store = ParameterStore::new(0);
        let m = module(&mut store, "attn.test", 8);
        // gaussian fc2 -> overwrite with zeros; biases are already zero
        store
            .set_value("attn.test.fc2.weight", vec![0.0; 8 * 2])
            .unwrap();
        let rec = Recording::new();
        let x = Tensor::full(&[2, 8, 3, 3], 0.7);
        let mask = attention_mask(&m, &store, &rec, &x).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.5), "{:?}", mask.data());
    }

    #[test]
    fn mask_matches_manual_composition() {
        let mut store = ParameterStore::new(11);
        let m = module(&mut store, "attn.x", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(
            vec![2, 8, 4, 4],
            (0..2 * 8 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let rec = Recording::new();
        let mask = attention_mask(&m, &store, &rec, &x).unwrap();

        let rec2 = Recording::new();
        let gap = ops::global_avg_pool(&rec2, &x).unwrap();
        let h = ops::relu(
            &rec2,
            &ops::linear(
                &rec2,
                &gap,
                &store.value("attn.x.fc1.weight").unwrap(),
                &store.value("attn.x.fc1.bias").unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        let manual = ops::sigmoid(
            &rec2,
            &ops::linear(
                &rec2,
                &h,
                &store.value("attn.x.fc2.weight").unwrap(),
                &store.value("attn.x.fc2.bias").unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        for (a, b) in mask.data().iter().zip(manual.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn co_mask_commutes_and_is_below_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rec = Recording::new();
        let a = Tensor::new(vec![3, 6], (0..18).map(|_| rng.random_range(0.01..0.99)).collect())
            .unwrap();
        let b = Tensor::new(vec![3, 6], (0..18).map(|_| rng.random_range(0.01..0.99)).collect())
            .unwrap();
        let ab = co_mask(&rec, &a, &b).unwrap();
        let ba = co_mask(&rec, &b, &a).unwrap();
        assert_eq!(ab, ba);
        for ((&m, &x), &y) in ab.data().iter().zip(a.data()).zip(b.data()) {
            assert!(m <= x.min(y));
            assert!(m > 0.0 && m < 1.0);
        }
    }

    #[test]
    fn self_attention_with_zero_fc2_halves_input() {
        let mut store = ParameterStore::new(0);
        let m = module(&mut store, "attn.s", 4);
        store.set_value("attn.s.fc2.weight", vec![0.0; 4]).unwrap();
        let rec = Recording::new();
        let x = Tensor::full(&[1, 4, 2, 2], 0.8);
        let y = apply_self_attention(&m, &store, &rec, &x).unwrap();
        for (&out, &inp) in y.data().iter().zip(x.data()) {
            assert!((out - 0.5 * inp).abs() < 1e-15);
        }
    }

    #[test]
    fn co_attention_scales_each_channel_by_the_shared_mask() {
        let mut store = ParameterStore::new(21);
        let mi = module(&mut store, "attn.image", 8);
        let me = module(&mut store, "attn.edgemap", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2;
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                vec![n, 8, 3, 3],
                (0..n * 8 * 9).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let xi = mk(&mut rng);
        let xe = mk(&mut rng);
        let rec = Recording::new();
        let (oi, oe) = apply_co_attention(&mi, &me, &store, &rec, &xi, &xe).unwrap();

        let rec2 = Recording::new();
        let mask_i = attention_mask(&mi, &store, &rec2, &xi).unwrap();
        let mask_e = attention_mask(&me, &store, &rec2, &xe).unwrap();
        for bi in 0..n {
            for c in 0..8 {
                let m = mask_i.data()[bi * 8 + c] * mask_e.data()[bi * 8 + c];
                for s in 0..9 {
                    let idx = (bi * 8 + c) * 9 + s;
                    assert!((oi.data()[idx] - m * xi.data()[idx]).abs() < 1e-12);
                    assert!((oe.data()[idx] - m * xe.data()[idx]).abs() < 1e-12);
                }
            }
        }
    }
}
