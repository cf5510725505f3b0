//! VGG-style feature-mapping branch and shared embedding head.
//!
//! A branch is a stack of (3x3 conv, pad 1, ReLU) layers grouped into
//! stages, each stage closed by a 2x2 max-pool of stride 2, followed by a
//! head of fully-connected layers, an embedding layer, L2 normalization,
//! and a classifier read from the pre-normalization embedding output.

use crate::error::{Error, Result};
use crate::params::{Init, ParameterStore};
use crate::tensor::ops;
use crate::tensor::{Recording, Tensor};

/// Which domain a branch serves; fixes its parameter-name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Sketch,
    Image,
    Edgemap,
}

impl Role {
    pub fn prefix(&self) -> &'static str {
        match self {
            Role::Sketch => "sketch",
            Role::Image => "image",
            Role::Edgemap => "edgemap",
        }
    }

    pub const ALL: [Role; 3] = [Role::Sketch, Role::Image, Role::Edgemap];

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "sketch" => Ok(Role::Sketch),
            "image" => Ok(Role::Image),
            "edgemap" => Ok(Role::Edgemap),
            other => Err(Error::Config(format!("unknown branch role `{other}`"))),
        }
    }
}

/// Structural description of one branch; all three branches share it.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// (convolution count, output channels) per stage; every stage ends in
    /// a 2x2 max-pool of stride 2.
    pub stages: Vec<(usize, usize)>,
    /// Hidden fully-connected widths between flatten and the embedding layer.
    pub fc_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Paper-scale configuration: the VGG19 stack with a 256-d embedding.
    pub fn vgg19(num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stages: vec![(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)],
            fc_dims: vec![4096, 4096],
            embed_dim: 256,
            num_classes,
        }
    }

    /// Small configuration for CPU-scale runs and tests.
    pub fn desk(num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stages: vec![(1, 8), (1, 16)],
            fc_dims: vec![64],
            embed_dim: 32,
            num_classes,
        }
    }

    /// Channel count of the last stage (the co-attention width).
    pub fn last_channels(&self) -> usize {
        self.stages.last().map(|&(_, c)| c).unwrap_or(self.in_channels)
    }

    /// Spatial size after every pooling stage, given a square input.
    pub fn feature_hw(&self, input_size: usize) -> Result<usize> {
        let mut hw = input_size;
        for (si, _) in self.stages.iter().enumerate() {
            if hw < 2 {
                return Err(Error::Config(format!(
                    "spatial size collapses to {hw} before the pool of stage {si} \
                     (input {input_size})"
                )));
            }
            hw /= 2; // 3x3 pad-1 convs preserve size; 2x2/2 pool halves it
        }
        if hw == 0 {
            return Err(Error::Config(format!(
                "spatial size collapses to zero (input {input_size})"
            )));
        }
        Ok(hw)
    }

    /// Flattened feature length entering the head.
    pub fn flattened_len(&self, input_size: usize) -> Result<usize> {
        let hw = self.feature_hw(input_size)?;
        Ok(self.last_channels() * hw * hw)
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.embed_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "embed_dim, num_classes, in_channels must be positive".into(),
            ));
        }
        self.feature_hw(input_size)?;
        Ok(())
    }

    /// Parameter-name suffixes of the feature-mapping part, in
    /// registration order (tied under conv-sharing strategies).
    pub fn fm_param_suffixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (si, &(convs, _)) in self.stages.iter().enumerate() {
            for ci in 0..convs {
                out.push(format!("fm.s{si}.c{ci}.weight"));
                out.push(format!("fm.s{si}.c{ci}.bias"));
            }
        }
        out
    }

    /// Parameter-name suffixes of the embedding head, in registration
    /// order (tied under FC-sharing strategies).
    pub fn head_param_suffixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.fc_dims.len() {
            out.push(format!("head.fc{i}.weight"));
            out.push(format!("head.fc{i}.bias"));
        }
        out.push("head.embed.weight".into());
        out.push("head.embed.bias".into());
        out.push("head.cls.weight".into());
        out.push("head.cls.bias".into());
        out
    }
}

/// A constructed branch: its role plus the name prefix of its parameters.
#[derive(Clone, Debug)]
pub struct Branch {
    pub role: Role,
    pub prefix: &'static str,
}

/// Register all parameters of one branch. No tying happens here.
pub fn build_branch(
    cfg: &BackboneConfig,
    role: Role,
    input_size: usize,
    store: &mut ParameterStore,
) -> Result<Branch> {
    cfg.validate(input_size)?;
    let prefix = role.prefix();
    let mut cin = cfg.in_channels;
    for (si, &(convs, cout)) in cfg.stages.iter().enumerate() {
        for ci in 0..convs {
            let sigma = (2.0 / (cin * 9) as f64).sqrt();
            store.register(
                &format!("{prefix}.fm.s{si}.c{ci}.weight"),
                &[cout, cin, 3, 3],
                Init::Gaussian(sigma),
            )?;
            store.register(&format!("{prefix}.fm.s{si}.c{ci}.bias"), &[cout], Init::Zeros)?;
            cin = cout;
        }
    }
    let mut dim = cfg.flattened_len(input_size)?;
    for (i, &width) in cfg.fc_dims.iter().enumerate() {
        let sigma = (2.0 / dim as f64).sqrt();
        store.register(
            &format!("{prefix}.head.fc{i}.weight"),
            &[width, dim],
            Init::Gaussian(sigma),
        )?;
        store.register(&format!("{prefix}.head.fc{i}.bias"), &[width], Init::Zeros)?;
        dim = width;
    }
    let sigma = (1.0 / dim as f64).sqrt();
    store.register(
        &format!("{prefix}.head.embed.weight"),
        &[cfg.embed_dim, dim],
        Init::Gaussian(sigma),
    )?;
    store.register(&format!("{prefix}.head.embed.bias"), &[cfg.embed_dim], Init::Zeros)?;
    let sigma = (1.0 / cfg.embed_dim as f64).sqrt();
    store.register(
        &format!("{prefix}.head.cls.weight"),
        &[cfg.num_classes, cfg.embed_dim],
        Init::Gaussian(sigma),
    )?;
    store.register(&format!("{prefix}.head.cls.bias"), &[cfg.num_classes], Init::Zeros)?;
    Ok(Branch { role, prefix })
}

/// Run the convolution/pooling stack; returns the last pooling output,
/// which is where co-attention attaches.
pub fn forward_feature_map(
    cfg: &BackboneConfig,
    role: Role,
    store: &ParameterStore,
    rec: &Recording,
    x: &Tensor,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::dim(format!(
            "branch input must be [N,{},H,W], got {:?}",
            cfg.in_channels, shape
        )));
    }
    let prefix = role.prefix();
    let mut cur = x.clone();
    for (si, &(convs, _)) in cfg.stages.iter().enumerate() {
        for ci in 0..convs {
            let w = store.tracked(rec, &format!("{prefix}.fm.s{si}.c{ci}.weight"))?;
            let b = store.tracked(rec, &format!("{prefix}.fm.s{si}.c{ci}.bias"))?;
            cur = ops::conv2d(rec, &cur, &w, &b, 1, 1)?;
            cur = ops::relu(rec, &cur)?;
        }
        cur = ops::maxpool2d(rec, &cur, 2, 2)?;
    }
    Ok(cur)
}

/// Run the shared head: flatten, hidden FC+ReLU chain, embedding layer,
/// L2 normalization. Logits read the pre-normalization embedding output.
pub fn forward_embedding(
    cfg: &BackboneConfig,
    role: Role,
    store: &ParameterStore,
    rec: &Recording,
    feat: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let shape = feat.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!(
            "head input must be a 4-d feature map, got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let flat = shape[1] * shape[2] * shape[3];
    let prefix = role.prefix();
    let mut cur = ops::reshape(rec, feat, &[n, flat])?;
    for i in 0..cfg.fc_dims.len() {
        let w = store.tracked(rec, &format!("{prefix}.head.fc{i}.weight"))?;
        let b = store.tracked(rec, &format!("{prefix}.head.fc{i}.bias"))?;
        cur = ops::linear(rec, &cur, &w, &b)?;
        cur = ops::relu(rec, &cur)?;
    }
    let w = store.tracked(rec, &format!("{prefix}.head.embed.weight"))?;
    let b = store.tracked(rec, &format!("{prefix}.head.embed.bias"))?;
    let pre_embed = ops::linear(rec, &cur, &w, &b)?;
    let embedding = ops::l2_normalize(rec, &pre_embed)?;
    let w = store.tracked(rec, &format!("{prefix}.head.cls.weight"))?;
    let b = store.tracked(rec, &format!("{prefix}.head.cls.bias"))?;
    let logits = ops::linear(rec, &pre_embed, &w, &b)?;
    Ok((embedding, logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_flatten_arithmetic() {
        let cfg = BackboneConfig {
            in_channels: 3,
            stages: vec![(1, 4), (1, 8)],
            fc_dims: vec![16],
            embed_dim: 8,
            num_classes: 4,
        };
        assert_eq!(cfg.flattened_len(16).unwrap(), 8 * 4 * 4);
    }

    #[test]
    fn vgg19_flatten_matches_224_input() {
        let cfg = BackboneConfig::vgg19(125);
        assert_eq!(cfg.flattened_len(224).unwrap(), 512 * 7 * 7);
        assert_eq!(cfg.embed_dim, 256);
    }

    #[test]
    fn collapsing_spatial_size_is_a_config_error() {
        let cfg = BackboneConfig {
            in_channels: 3,
            stages: vec![(1, 4), (1, 4), (1, 4), (1, 4)],
            fc_dims: vec![],
            embed_dim: 4,
            num_classes: 2,
        };
        // 8 -> 4 -> 2 -> 1, then the fourth pool cannot fit
        assert!(cfg.validate(8).is_err());
        assert!(cfg.validate(16).is_ok());
    }

    #[test]
    fn two_builds_same_role_same_names() {
        let cfg = BackboneConfig::desk(4);
        let mut s1 = ParameterStore::new(1);
        let mut s2 = ParameterStore::new(2);
        build_branch(&cfg, Role::Sketch, 16, &mut s1).unwrap();
        build_branch(&cfg, Role::Sketch, 16, &mut s2).unwrap();
        assert_eq!(s1.names(), s2.names());
    }

    #[test]
    fn forward_shapes_and_unit_norm() {
        let cfg = BackboneConfig {
            in_channels: 3,
            stages: vec![(1, 4), (1, 8)],
            fc_dims: vec![16],
            embed_dim: 8,
            num_classes: 5,
        };
        let mut store = ParameterStore::new(3);
        build_branch(&cfg, Role::Image, 16, &mut store).unwrap();
        let rec = Recording::new();
        let x = Tensor::full(&[2, 3, 16, 16], 0.3);
        let feat = forward_feature_map(&cfg, Role::Image, &store, &rec, &x).unwrap();
        assert_eq!(feat.shape(), &[2, 8, 4, 4]);
        let (embed, logits) = forward_embedding(&cfg, Role::Image, &store, &rec, &feat).unwrap();
        assert_eq!(embed.shape(), &[2, 8]);
        assert_eq!(logits.shape(), &[2, 5]);
        for row in 0..2 {
            let norm: f64 = embed.data()[row * 8..(row + 1) * 8]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row norm {norm}");
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_feature_map() {
        let cfg = BackboneConfig::desk(4);
        let mut store = ParameterStore::new(3);
        build_branch(&cfg, Role::Sketch, 16, &mut store).unwrap();
        let rec = Recording::new();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let feat = forward_feature_map(&cfg, Role::Sketch, &store, &rec, &x).unwrap();
        assert!(feat.data().iter().all(|&v| v == 0.0));
    }
}
