//! The assembled three-branch network: feature-mapping branches, the
//! co-attention model between image and edgemap, the sketch self-attention,
//! the shared embedding heads, and checkpoint save/load.

use std::path::Path;

use crate::attention::{self, AttentionModule};
use crate::backbone::{self, BackboneConfig, Branch, Role};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::params::{ParameterStore, SharePlan, Strategy, TieReport};
use crate::tensor::{Recording, Tensor};

/// Runtime component toggles (the ablation axes).
#[derive(Clone, Copy, Debug)]
pub struct Toggles {
    /// false disables the co-attention model and the sketch self-attention.
    pub use_co_attention: bool,
    pub weights: LossWeights,
}

/// Embeddings and classifier logits of one triple forward pass.
#[derive(Clone, Debug)]
pub struct TripleOutput {
    pub f_s: Tensor,
    pub f_i: Tensor,
    pub f_e: Tensor,
    pub logits_s: Tensor,
    pub logits_i: Tensor,
    pub logits_e: Tensor,
}

pub struct Semi3Model {
    pub run: RunConfig,
    pub config: BackboneConfig,
    pub input_size: usize,
    pub strategy: Strategy,
    pub toggles: Toggles,
    pub store: ParameterStore,
    pub branches: Vec<Branch>,
    attn_image: AttentionModule,
    attn_edgemap: AttentionModule,
    attn_sketch: AttentionModule,
}

impl Semi3Model {
    /// Build a fresh model from a run configuration. Branch registration
    /// order is sketch, image, edgemap, so the sketch branch donates values
    /// when share-groups are tied.
    pub fn new(run: &RunConfig) -> Result<Semi3Model> {
        let config = run.backbone();
        let input_size = run.image_size;
        config.validate(input_size)?;
        let channels = config.last_channels();
        if run.attention_reduction == 0 || channels % run.attention_reduction != 0 {
            return Err(Error::Config(format!(
                "attention_reduction {} must divide last-stage channels {channels}",
                run.attention_reduction
            )));
        }
        let mut store = ParameterStore::new(run.seed);
        let mut branches = Vec::new();
        for role in Role::ALL {
            branches.push(backbone::build_branch(&config, role, input_size, &mut store)?);
        }
        let attn_image =
            attention::build_attention("attn.image", channels, run.attention_reduction, &mut store)?;
        let attn_edgemap = attention::build_attention(
            "attn.edgemap",
            channels,
            run.attention_reduction,
            &mut store,
        )?;
        let attn_sketch = attention::build_attention(
            "attn.sketch",
            channels,
            run.attention_reduction,
            &mut store,
        )?;
        Ok(Semi3Model {
            config,
            input_size,
            strategy: run.share_plan,
            toggles: Toggles {
                use_co_attention: run.use_co_attention,
                weights: run.loss_weights(),
            },
            store,
            branches,
            attn_image,
            attn_edgemap,
            attn_sketch,
            run: run.clone(),
        })
    }

    /// The tying plan implied by this model's strategy and architecture.
    pub fn share_plan(&self) -> SharePlan {
        SharePlan::build(
            self.strategy,
            &self.config.fm_param_suffixes(),
            &self.config.head_param_suffixes(),
        )
    }

    /// Alias share-groups per the plan. Called once, after pretraining.
    pub fn tie(&mut self) -> Result<()> {
        let plan = self.share_plan();
        self.store.tie(&plan)
    }

    pub fn is_tied(&self) -> bool {
        !self.store.groups().is_empty()
    }

    pub fn assert_tied(&self) -> Result<TieReport> {
        self.store.assert_tied(&self.share_plan())
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || shape[2] != self.input_size
            || shape[3] != self.input_size
        {
            return Err(Error::dim(format!(
                "{what} input must be [N,{},{},{}], got {:?}",
                self.config.in_channels, self.input_size, self.input_size, shape
            )));
        }
        Ok(())
    }

    /// Sketch path: feature map, optional self-attention, shared head.
    pub fn embed_sketch(&self, rec: &Recording, s: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(s, "sketch")?;
        let mut feat = backbone::forward_feature_map(&self.config, Role::Sketch, &self.store, rec, s)?;
        if self.toggles.use_co_attention {
            feat = attention::apply_self_attention(&self.attn_sketch, &self.store, rec, &feat)?;
        }
        backbone::forward_embedding(&self.config, Role::Sketch, &self.store, rec, &feat)
    }

    /// Image+edgemap path: both feature maps, one shared co-mask, both heads.
    /// Returns ((embed_i, logits_i), (embed_e, logits_e)).
    #[allow(clippy::type_complexity)]
    pub fn embed_image_edgemap(
        &self,
        rec: &Recording,
        i: &Tensor,
        e: &Tensor,
    ) -> Result<((Tensor, Tensor), (Tensor, Tensor))> {
        self.check_input(i, "image")?;
        self.check_input(e, "edgemap")?;
        if i.shape() != e.shape() {
            return Err(Error::dim(format!(
                "image and edgemap batches differ: {:?} vs {:?}",
                i.shape(),
                e.shape()
            )));
        }
        let feat_i = backbone::forward_feature_map(&self.config, Role::Image, &self.store, rec, i)?;
        let feat_e =
            backbone::forward_feature_map(&self.config, Role::Edgemap, &self.store, rec, e)?;
        let (feat_i, feat_e) = if self.toggles.use_co_attention {
            attention::apply_co_attention(
                &self.attn_image,
                &self.attn_edgemap,
                &self.store,
                rec,
                &feat_i,
                &feat_e,
            )?
        } else {
            (feat_i, feat_e)
        };
        let out_i = backbone::forward_embedding(&self.config, Role::Image, &self.store, rec, &feat_i)?;
        let out_e =
            backbone::forward_embedding(&self.config, Role::Edgemap, &self.store, rec, &feat_e)?;
        Ok((out_i, out_e))
    }

    /// Full three-way forward pass.
    pub fn forward_triple(
        &self,
        rec: &Recording,
        s: &Tensor,
        i: &Tensor,
        e: &Tensor,
    ) -> Result<TripleOutput> {
        if s.shape() != i.shape() || i.shape() != e.shape() {
            return Err(Error::dim(format!(
                "triple inputs must share one shape: {:?}, {:?}, {:?}",
                s.shape(),
                i.shape(),
                e.shape()
            )));
        }
        let (f_s, logits_s) = self.embed_sketch(rec, s)?;
        let ((f_i, logits_i), (f_e, logits_e)) = self.embed_image_edgemap(rec, i, e)?;
        Ok(TripleOutput {
            f_s,
            f_i,
            f_e,
            logits_s,
            logits_i,
            logits_e,
        })
    }

    /// One branch alone, attention bypassed entirely. This is the
    /// pretraining path.
    pub fn forward_single(&self, rec: &Recording, role: Role, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x, role.prefix())?;
        let feat = backbone::forward_feature_map(&self.config, role, &self.store, rec, x)?;
        backbone::forward_embedding(&self.config, role, &self.store, rec, &feat)
    }

    /// Serialize every parameter, the group table, and the run config.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write_store(&self.store, &self.run.serialize(), path)
    }

    /// Rebuild a model from a checkpoint. The embedded run config restores
    /// the architecture; the group table restores aliasing.
    pub fn load_checkpoint(path: &Path) -> Result<Semi3Model> {
        let (store, config_text) = checkpoint::read_store(path)?;
        let run = RunConfig::parse(&config_text)?;
        let fresh = Semi3Model::new(&run)?;
        // the loaded store must cover exactly the expected parameters
        for name in fresh.store.names() {
            if !store.contains(name) {
                return Err(Error::Format(format!(
                    "checkpoint is missing parameter `{name}`"
                )));
            }
            if store.shape(name)? != fresh.store.shape(name)? {
                return Err(Error::Format(format!(
                    "checkpoint parameter `{name}` has shape {:?}, expected {:?}",
                    store.shape(name)?,
                    fresh.store.shape(name)?
                )));
            }
        }
        if store.names().len() != fresh.store.names().len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} parameters, model defines {}",
                store.names().len(),
                fresh.store.names().len()
            )));
        }
        Ok(Semi3Model { store, ..fresh })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_run() -> RunConfig {
        RunConfig {
            image_size: 8,
            stages: vec![(1, 4), (1, 8)],
            fc_dims: vec![16],
            embed_dim: 8,
            num_classes: 3,
            num_categories: 3,
            per_category: 4,
            attention_reduction: 4,
            seed: 5,
            ..RunConfig::default()
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
        Tensor::new(
            vec![n, 3, size, size],
            (0..n * 3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn triple_output_shapes_and_unit_norms() {
        let model = Semi3Model::new(&tiny_run()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_batch(&mut rng, 2, 8);
        let i = random_batch(&mut rng, 2, 8);
        let e = random_batch(&mut rng, 2, 8);
        let rec = Recording::new();
        let out = model.forward_triple(&rec, &s, &i, &e).unwrap();
        for f in [&out.f_s, &out.f_i, &out.f_e] {
            assert_eq!(f.shape(), &[2, 8]);
            for row in 0..2 {
                let norm: f64 = f.data()[row * 8..(row + 1) * 8]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(out.logits_s.shape(), &[2, 3]);
    }

    #[test]
    fn all_sharing_identical_inputs_identical_embeddings() {
        let mut run = tiny_run();
        run.share_plan = Strategy::AllSharing;
        let mut model = Semi3Model::new(&run).unwrap();
        model.tie().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(&mut rng, 2, 8);
        // identical I and E through identical (tied) branch functions; the
        // shared co-mask scales both identically
        let rec = Recording::new();
        let ((f_i, _), (f_e, _)) = model.embed_image_edgemap(&rec, &x, &x).unwrap();
        assert_eq!(f_i, f_e);
    }

    #[test]
    fn semi3_shared_head_same_feature_same_output() {
        let mut model = Semi3Model::new(&tiny_run()).unwrap();
        model.tie().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feat = Tensor::new(
            vec![2, 8, 2, 2],
            (0..2 * 8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let rec = Recording::new();
        let (e1, l1) =
            backbone::forward_embedding(&model.config, Role::Sketch, &model.store, &rec, &feat)
                .unwrap();
        let (e2, l2) =
            backbone::forward_embedding(&model.config, Role::Edgemap, &model.store, &rec, &feat)
                .unwrap();
        assert_eq!(e1, e2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn forward_single_equals_triple_path_with_attention_off() {
        let mut run = tiny_run();
        run.use_co_attention = false;
        let model = Semi3Model::new(&run).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_batch(&mut rng, 2, 8);
        let i = random_batch(&mut rng, 2, 8);
        let e = random_batch(&mut rng, 2, 8);
        let rec = Recording::new();
        let out = model.forward_triple(&rec, &s, &i, &e).unwrap();
        let rec2 = Recording::new();
        let (f_s, logits_s) = model.forward_single(&rec2, Role::Sketch, &s).unwrap();
        let (f_i, _) = model.forward_single(&rec2, Role::Image, &i).unwrap();
        assert_eq!(out.f_s, f_s);
        assert_eq!(out.logits_s, logits_s);
        assert_eq!(out.f_i, f_i);
    }

    #[test]
    fn edgemap_perturbation_couples_into_image_embedding_iff_co_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let i = random_batch(&mut rng, 1, 8);
        let e = random_batch(&mut rng, 1, 8);
        let mut e2_data = e.data().to_vec();
        e2_data[0] += 0.25; // finite perturbation of one edgemap pixel
        let e2 = Tensor::new(e.shape().to_vec(), e2_data).unwrap();

        for (use_co, expect_change) in [(true, true), (false, false)] {
            let mut run = tiny_run();
            run.use_co_attention = use_co;
            let model = Semi3Model::new(&run).unwrap();
            let rec = Recording::new();
            let ((f_i_a, _), _) = model.embed_image_edgemap(&rec, &i, &e).unwrap();
            let ((f_i_b, _), _) = model.embed_image_edgemap(&rec, &i, &e2).unwrap();
            let changed = f_i_a
                .data()
                .iter()
                .zip(f_i_b.data())
                .any(|(a, b)| a != b);
            assert_eq!(changed, expect_change, "use_co_attention={use_co}");
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise_and_tied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Semi3Model::new(&tiny_run()).unwrap();
        model.tie().unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = Semi3Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store.names(), model.store.names());
        for name in model.store.names() {
            assert_eq!(
                loaded.store.value(name).unwrap(),
                model.store.value(name).unwrap(),
                "parameter {name} differs after reload"
            );
        }
        assert!(loaded.assert_tied().unwrap().all_identical());
        // identical forward behavior after reload
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_batch(&mut rng, 1, 8);
        let rec_a = Recording::new();
        let rec_b = Recording::new();
        let (fa, _) = model.embed_sketch(&rec_a, &s).unwrap();
        let (fb, _) = loaded.embed_sketch(&rec_b, &s).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Semi3Model::new(&tiny_run()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Semi3Model::load_checkpoint(&path).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Semi3Model::new(&tiny_run()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_batch(&mut rng, 2, 8);
        let i = random_batch(&mut rng, 2, 8);
        let e = random_batch(&mut rng, 2, 8);
        let rec1 = Recording::new();
        let rec2 = Recording::new();
        let o1 = model.forward_triple(&rec1, &s, &i, &e).unwrap();
        let o2 = model.forward_triple(&rec2, &s, &i, &e).unwrap();
        assert_eq!(o1.f_s, o2.f_s);
        assert_eq!(o1.f_i, o2.f_i);
        assert_eq!(o1.f_e, o2.f_e);
        // gradients replay identically too
        let g1 = {
            let loss = ops::sum_all(&rec1, &o1.f_s).unwrap();
            rec1.backward(&loss).unwrap()
        };
        let g2 = {
            let loss = ops::sum_all(&rec2, &o2.f_s).unwrap();
            rec2.backward(&loss).unwrap()
        };
        for name in model.store.names() {
            let slot = model.store.slot_of(name).unwrap() as u64;
            match (g1.grad_for_key(slot), g2.grad_for_key(slot)) {
                (Some(a), Some(b)) => assert_eq!(a, b, "gradient of {name} differs"),
                (None, None) => {}
                _ => panic!("reachability of {name} differs between replays"),
            }
        }
    }
}
