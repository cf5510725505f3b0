//! Named trainable parameters organized into share-groups.
//!
//! Sharing is aliasing: every name in a group resolves to the same storage
//! slot, so a forward pass that touches a shared tensor through several
//! branches records one leaf and its gradient accumulates the sum of all
//! contributions. The optimizer then updates each underlying slot exactly
//! once per step.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Recording, Tensor};

/// Initialization scheme for a freshly registered parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean gaussian with the given standard deviation.
    Gaussian(f64),
    Zeros,
    /// Identity matrix; requires a square 2-d shape.
    Identity,
}

struct Slot {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    momentum: Vec<f64>,
}

/// One share-group: a set of parameter names aliased to one slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub id: String,
    pub members: Vec<String>,
}

/// Weight-sharing strategies across the three branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Sketch+edgemap convolutions tied, all heads tied, image convolutions
    /// and attention modules free.
    Semi3,
    /// Convolutions and heads tied across all three branches.
    AllSharing,
    /// Only the heads tied across all three branches.
    FcOnly,
    /// Only sketch+edgemap convolutions tied.
    SketchEdgemapOnly,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "semi3" => Ok(Strategy::Semi3),
            "all_sharing" => Ok(Strategy::AllSharing),
            "fc_only" => Ok(Strategy::FcOnly),
            "sketch_edgemap_only" => Ok(Strategy::SketchEdgemapOnly),
            other => Err(Error::Config(format!("unknown share plan `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Semi3 => "semi3",
            Strategy::AllSharing => "all_sharing",
            Strategy::FcOnly => "fc_only",
            Strategy::SketchEdgemapOnly => "sketch_edgemap_only",
        }
    }
}

/// Declarative tying plan: which names group together under a strategy.
#[derive(Clone, Debug)]
pub struct SharePlan {
    pub strategy: Strategy,
    pub groups: Vec<Group>,
}

impl SharePlan {
    /// Build the group list from a strategy and the per-branch parameter
    /// suffixes (feature-mapping vs head). Branch order is sketch, image,
    /// edgemap everywhere; the first member of a group is the donor whose
    /// values win at tie time.
    pub fn build(strategy: Strategy, fm_suffixes: &[String], head_suffixes: &[String]) -> SharePlan {
        let mut groups = Vec::new();
        let se_conv = |s: &String| Group {
            id: format!("SE-conv:{s}"),
            members: vec![format!("sketch.{s}"), format!("edgemap.{s}")],
        };
        let all_conv = |s: &String| Group {
            id: format!("conv-all:{s}"),
            members: vec![
                format!("sketch.{s}"),
                format!("image.{s}"),
                format!("edgemap.{s}"),
            ],
        };
        let fc_all = |s: &String| Group {
            id: format!("FC-all:{s}"),
            members: vec![
                format!("sketch.{s}"),
                format!("image.{s}"),
                format!("edgemap.{s}"),
            ],
        };
        match strategy {
            Strategy::Semi3 => {
                groups.extend(fm_suffixes.iter().map(se_conv));
                groups.extend(head_suffixes.iter().map(fc_all));
            }
            Strategy::AllSharing => {
                groups.extend(fm_suffixes.iter().map(all_conv));
                groups.extend(head_suffixes.iter().map(fc_all));
            }
            Strategy::FcOnly => {
                groups.extend(head_suffixes.iter().map(fc_all));
            }
            Strategy::SketchEdgemapOnly => {
                groups.extend(fm_suffixes.iter().map(se_conv));
            }
        }
        SharePlan { strategy, groups }
    }
}

/// Per-group result of a tying audit.
#[derive(Clone, Debug)]
pub struct TieReport {
    pub groups: Vec<(String, bool)>,
}

impl TieReport {
    pub fn all_identical(&self) -> bool {
        self.groups.iter().all(|(_, ok)| *ok)
    }

    /// True when every group whose id starts with `family` is identical
    /// (and at least one such group exists).
    pub fn family_identical(&self, family: &str) -> bool {
        let mut seen = false;
        for (id, ok) in &self.groups {
            if id.starts_with(family) {
                seen = true;
                if !ok {
                    return false;
                }
            }
        }
        seen
    }
}

/// Named trainable tensors plus their momentum buffers and share-groups.
pub struct ParameterStore {
    slots: Vec<Slot>,
    names: Vec<String>, // registration order
    name_to_slot: HashMap<String, usize>,
    groups: Vec<Group>,
    rng: ChaCha8Rng,
}

impl ParameterStore {
    pub fn new(seed: u64) -> ParameterStore {
        ParameterStore {
            slots: Vec::new(),
            names: Vec::new(),
            name_to_slot: HashMap::new(),
            groups: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Create a trainable tensor under a fresh name.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.name_to_slot.contains_key(name) {
            return Err(Error::Store(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Gaussian(sigma) => {
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| Error::Config(format!("gaussian init: {e}")))?;
                (0..numel).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::Identity => {
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::Store(format!(
                        "identity init needs a square 2-d shape, got {:?}",
                        shape
                    )));
                }
                let n = shape[0];
                let mut data = vec![0.0; n * n];
                for i in 0..n {
                    data[i * n + i] = 1.0;
                }
                data
            }
        };
        self.slots.push(Slot {
            shape: shape.to_vec(),
            data: Arc::new(data),
            momentum: vec![0.0; numel],
        });
        let slot = self.slots.len() - 1;
        self.names.push(name.to_string());
        self.name_to_slot.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.name_to_slot.contains_key(name)
    }

    /// All parameter names in registration order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slot_of(&self, name: &str) -> Result<usize> {
        self.name_to_slot
            .get(name)
            .copied()
            .ok_or_else(|| Error::Store(format!("unknown parameter `{name}`")))
    }

    /// Current value as a detached tensor (shares the buffer).
    pub fn value(&self, name: &str) -> Result<Tensor> {
        let slot = self.slot_of(name)?;
        Ok(self.slot_value(slot))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        let slot = self.slot_of(name)?;
        Ok(&self.slots[slot].shape)
    }

    /// Fetch a parameter as a differentiable leaf of `rec`. Aliased names
    /// resolve to the same slot and therefore the same leaf node.
    pub fn tracked(&self, rec: &Recording, name: &str) -> Result<Tensor> {
        let slot = self.slot_of(name)?;
        Ok(rec.keyed_var(slot as u64, &self.slot_value(slot)))
    }

    /// Overwrite a parameter's values (aliased names observe the change).
    pub fn set_value(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let slot = self.slot_of(name)?;
        if values.len() != self.slots[slot].data.len() {
            return Err(Error::Store(format!(
                "value length {} does not match parameter `{name}` ({})",
                values.len(),
                self.slots[slot].data.len()
            )));
        }
        self.slots[slot].data = Arc::new(values);
        Ok(())
    }

    pub(crate) fn slot_value(&self, slot: usize) -> Tensor {
        let s = &self.slots[slot];
        Tensor::new(s.shape.clone(), s.data.as_ref().clone())
            .expect("slot shape and data always agree")
    }

    pub(crate) fn slot_shape(&self, slot: usize) -> &[usize] {
        &self.slots[slot].shape
    }

    pub(crate) fn slot_data(&self, slot: usize) -> &[f64] {
        &self.slots[slot].data
    }

    pub(crate) fn slot_momentum_mut(&mut self, slot: usize) -> &mut Vec<f64> {
        &mut self.slots[slot].momentum
    }

    pub(crate) fn replace_slot_data(&mut self, slot: usize, data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.slots[slot].data.len());
        self.slots[slot].data = Arc::new(data);
    }

    /// Distinct storage slots in first-use order; aliased names collapse.
    pub fn unique_slots(&self) -> Vec<usize> {
        let mut seen = vec![false; self.slots.len()];
        let mut out = Vec::new();
        for name in &self.names {
            let slot = self.name_to_slot[name];
            if !seen[slot] {
                seen[slot] = true;
                out.push(slot);
            }
        }
        out
    }

    /// Alias every group's members to the first member's slot. The first
    /// registered member is listed first by plan construction, so its
    /// values win.
    pub fn tie(&mut self, plan: &SharePlan) -> Result<()> {
        for group in &plan.groups {
            let donor = group
                .members
                .first()
                .ok_or_else(|| Error::Store(format!("empty share-group `{}`", group.id)))?;
            let donor_slot = self.slot_of(donor)?;
            for member in &group.members {
                let slot = self.slot_of(member)?;
                if self.slots[slot].shape != self.slots[donor_slot].shape {
                    return Err(Error::Store(format!(
                        "cannot tie `{member}` ({:?}) to `{donor}` ({:?}) in group `{}`",
                        self.slots[slot].shape, self.slots[donor_slot].shape, group.id
                    )));
                }
            }
            for member in &group.members {
                self.name_to_slot.insert(member.clone(), donor_slot);
            }
        }
        self.groups = plan.groups.clone();
        Ok(())
    }

    /// Groups applied by the last `tie`, empty before tying.
    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Remap one group's members onto the first member's slot without
    /// touching values. Used when rebuilding aliasing from a checkpoint.
    pub(crate) fn alias_members(&mut self, group: &Group) -> Result<()> {
        let donor = group
            .members
            .first()
            .ok_or_else(|| Error::Store(format!("empty share-group `{}`", group.id)))?;
        let donor_slot = self.slot_of(donor)?;
        for member in &group.members {
            self.slot_of(member)?;
            self.name_to_slot.insert(member.clone(), donor_slot);
        }
        Ok(())
    }

    pub(crate) fn set_groups(&mut self, groups: Vec<Group>) {
        self.groups = groups;
    }

    /// Audit a plan: per group, are all members' values bitwise identical?
    pub fn assert_tied(&self, plan: &SharePlan) -> Result<TieReport> {
        let mut report = Vec::new();
        for group in &plan.groups {
            let donor = group
                .members
                .first()
                .ok_or_else(|| Error::Store(format!("empty share-group `{}`", group.id)))?;
            let donor_data = self.slot_data(self.slot_of(donor)?);
            let mut identical = true;
            for member in &group.members {
                let data = self.slot_data(self.slot_of(member)?);
                if data.len() != donor_data.len()
                    || data
                        .iter()
                        .zip(donor_data)
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    identical = false;
                    break;
                }
            }
            report.push((group.id.clone(), identical));
        }
        Ok(TieReport { groups: report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_zeros() {
        let mut store = ParameterStore::new(0);
        store.register("w", &[4], Init::Zeros).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParameterStore::new(0);
        store.register("w", &[2], Init::Zeros).unwrap();
        assert!(store.register("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn same_seed_same_order_is_bitwise_identical() {
        let mut a = ParameterStore::new(7);
        let mut b = ParameterStore::new(7);
        for store in [&mut a, &mut b] {
            store.register("w1", &[32], Init::Gaussian(0.1)).unwrap();
            store.register("w2", &[16], Init::Gaussian(0.05)).unwrap();
        }
        assert_eq!(a.value("w1").unwrap(), b.value("w1").unwrap());
        assert_eq!(a.value("w2").unwrap(), b.value("w2").unwrap());
    }

    #[test]
    fn gaussian_sample_mean_is_near_zero() {
        // sigma = 0.05 over 10^4 draws: the sample mean has std sigma/100,
        // so |mean| should stay within 3 sigma / 100.
        let mut store = ParameterStore::new(123);
        store.register("g", &[10_000], Init::Gaussian(0.05)).unwrap();
        let mean: f64 =
            store.value("g").unwrap().data().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 3.0 * 0.05 / 100.0, "sample mean {mean}");
    }

    #[test]
    fn identity_init() {
        let mut store = ParameterStore::new(0);
        store.register("i", &[3, 3], Init::Identity).unwrap();
        let v = store.value("i").unwrap();
        assert_eq!(v.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(store.register("j", &[2, 3], Init::Identity).is_err());
    }

    #[test]
    fn tie_aliases_and_write_through_is_visible() {
        let mut store = ParameterStore::new(1);
        store.register("sketch.c1", &[3], Init::Gaussian(0.1)).unwrap();
        store.register("image.c1", &[3], Init::Gaussian(0.1)).unwrap();
        store.register("edgemap.c1", &[3], Init::Gaussian(0.1)).unwrap();
        let plan = SharePlan {
            strategy: Strategy::SketchEdgemapOnly,
            groups: vec![Group {
                id: "SE-conv:c1".into(),
                members: vec!["sketch.c1".into(), "edgemap.c1".into()],
            }],
        };
        store.tie(&plan).unwrap();
        // donor values won
        assert_eq!(
            store.value("sketch.c1").unwrap(),
            store.value("edgemap.c1").unwrap()
        );
        // write through one handle, read through the other
        store.set_value("sketch.c1", vec![9.0, 8.0, 7.0]).unwrap();
        assert_eq!(store.value("edgemap.c1").unwrap().data(), &[9.0, 8.0, 7.0]);
        // image.c1 stays independent
        assert_ne!(store.value("image.c1").unwrap().data(), &[9.0, 8.0, 7.0]);
        assert!(store.assert_tied(&plan).unwrap().all_identical());
    }

    #[test]
    fn tie_rejects_unequal_shapes() {
        let mut store = ParameterStore::new(1);
        store.register("a", &[3], Init::Zeros).unwrap();
        store.register("b", &[4], Init::Zeros).unwrap();
        let plan = SharePlan {
            strategy: Strategy::Semi3,
            groups: vec![Group {
                id: "g".into(),
                members: vec!["a".into(), "b".into()],
            }],
        };
        assert!(store.tie(&plan).is_err());
    }

    #[test]
    fn assert_tied_flags_divergent_untied_values() {
        let mut store = ParameterStore::new(1);
        store.register("a", &[2], Init::Zeros).unwrap();
        store.register("b", &[2], Init::Zeros).unwrap();
        store.set_value("b", vec![1.0, 2.0]).unwrap();
        let plan = SharePlan {
            strategy: Strategy::Semi3,
            groups: vec![Group {
                id: "g".into(),
                members: vec!["a".into(), "b".into()],
            }],
        };
        let report = store.assert_tied(&plan).unwrap();
        assert!(!report.all_identical());
    }

    #[test]
    fn strategies_change_grouping_not_names() {
        let fm = vec!["c1.w".to_string()];
        let head = vec!["fc.w".to_string()];
        let semi3 = SharePlan::build(Strategy::Semi3, &fm, &head);
        let all = SharePlan::build(Strategy::AllSharing, &fm, &head);
        let fc = SharePlan::build(Strategy::FcOnly, &fm, &head);
        let se = SharePlan::build(Strategy::SketchEdgemapOnly, &fm, &head);

        assert_eq!(semi3.groups.len(), 2);
        assert_eq!(all.groups.len(), 2);
        assert_eq!(fc.groups.len(), 1);
        assert_eq!(se.groups.len(), 1);

        // semi3 conv group excludes the image branch; all_sharing includes it
        assert_eq!(
            semi3.groups[0].members,
            vec!["sketch.c1.w".to_string(), "edgemap.c1.w".to_string()]
        );
        assert!(all.groups[0].members.contains(&"image.c1.w".to_string()));
        // head group is identical across semi3 / all_sharing / fc_only
        assert_eq!(semi3.groups[1].members, fc.groups[0].members);
    }
}
