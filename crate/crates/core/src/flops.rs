//! Analytic FLOP model for stacks of selective-SSM blocks.
//!
//! Per processed slot and layer the cost is fixed by the block dimensions,
//! so the total is `layers · slots · per_slot`. Padding slots cost the same
//! as real tokens; that is the whole point of counting them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::{
    BlockDims, FlopKind, NORM_FLOPS_PER_ELEMENT, SCAN_FLOPS_PER_CHANNEL, SCAN_FLOPS_PER_STATE,
};
use crate::error::{Error, Result};
use crate::packing::PackPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub expansion: usize,
}

/// Shape of a config file: `{"models": [ModelConfig, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub models: Vec<ModelConfig>,
}

fn preset(name: &str, layers: usize, model_dim: usize) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        layers,
        model_dim,
        state_dim: 16,
        conv_width: 4,
        expansion: 2,
    }
}

/// Built-in presets. `desk` is the single small block the test suites run.
pub fn builtin_presets() -> Vec<ModelConfig> {
    vec![
        preset("desk", 1, 64),
        preset("mamba-110m", 16, 1024),
        preset("mamba-1.4b", 48, 2048),
        preset("mamba-2.8b", 64, 2560),
    ]
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        builtin_presets()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownPreset(name.to_string()))
    }

    pub fn from_block_dims(name: &str, layers: usize, dims: BlockDims) -> Result<Self> {
        if dims.model_dim == 0 || !dims.expanded_dim.is_multiple_of(dims.model_dim) {
            return Err(Error::InvalidConfig(format!(
                "expanded_dim {} is not a multiple of model_dim {}",
                dims.expanded_dim, dims.model_dim
            )));
        }
        let cfg = Self {
            name: name.to_string(),
            layers,
            model_dim: dims.model_dim,
            state_dim: dims.state_dim,
            conv_width: dims.conv_width,
            expansion: dims.expanded_dim / dims.model_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("state_dim", self.state_dim),
            ("conv_width", self.conv_width),
            ("expansion", self.expansion),
        ];
        if let Some((field, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!(
                "model `{}` has zero {field}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            model_dim: self.model_dim,
            expanded_dim: self.expanded_dim(),
            state_dim: self.state_dim,
            conv_width: self.conv_width,
        }
    }

    pub fn expanded_dim(&self) -> usize {
        self.expansion * self.model_dim
    }

    /// FLOPs one block spends on one slot, split by operator kind.
    pub fn per_slot_breakdown(&self) -> [(FlopKind, u128); 4] {
        let d = self.model_dim as u128;
        let e = self.expanded_dim() as u128;
        let n = self.state_dim as u128;
        let w = self.conv_width as u128;
        let in_proj = 2 * d * (2 * e);
        let dt_proj = 2 * e * e + e;
        let bc_proj = 2 * (2 * e * n);
        let out_proj = 2 * e * d;
        [
            (FlopKind::Linear, in_proj + dt_proj + bc_proj + out_proj),
            (FlopKind::Conv, 2 * w * e),
            (
                FlopKind::Scan,
                e * (SCAN_FLOPS_PER_STATE as u128 * n + SCAN_FLOPS_PER_CHANNEL as u128),
            ),
            (FlopKind::Norm, NORM_FLOPS_PER_ELEMENT as u128 * d),
        ]
    }

    /// FLOPs one block spends on one slot.
    pub fn per_slot_layer(&self) -> u128 {
        self.per_slot_breakdown().iter().map(|(_, v)| v).sum()
    }

    /// FLOPs of the full stack over `slots` processed slots.
    pub fn flops_for_slots(&self, slots: usize) -> u128 {
        self.layers as u128 * slots as u128 * self.per_slot_layer()
    }
}

/// Total forward FLOPs for running every pack of `plan` through the model.
pub fn flops_estimate(config: &ModelConfig, plan: &PackPlan) -> Result<u128> {
    config.validate()?;
    Ok(config.flops_for_slots(plan.total_slots()))
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)?;
    let file: ConfigFile = serde_json::from_str(&text)?;
    for m in &file.models {
        m.validate()?;
    }
    Ok(file)
}

/// Looks `name` up in `file` first, then among the built-in presets.
pub fn resolve_model(name: &str, file: Option<&ConfigFile>) -> Result<ModelConfig> {
    if let Some(found) = file.and_then(|f| f.models.iter().find(|m| m.name == name)) {
        return Ok(found.clone());
    }
    ModelConfig::preset(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{mamba_block_forward_counted, BlockParams, FlopCounter};
    use crate::packing::{plan_fifo, plan_greedy_sorted, plan_pad_to_max};
    use ndarray::Array3;

    #[test]
    fn presets_match_published_sizes() {
        let m = ModelConfig::preset("mamba-110m").unwrap();
        assert_eq!((m.layers, m.model_dim), (16, 1024));
        let m = ModelConfig::preset("mamba-1.4b").unwrap();
        assert_eq!((m.layers, m.model_dim), (48, 2048));
        let m = ModelConfig::preset("mamba-2.8b").unwrap();
        assert_eq!((m.layers, m.model_dim), (64, 2560));
        assert!(matches!(
            ModelConfig::preset("nope"),
            Err(Error::UnknownPreset(_))
        ));
        assert_eq!(
            ModelConfig::preset("desk").unwrap().block_dims(),
            BlockDims::default()
        );
    }

    #[test]
    fn flops_depend_only_on_slots() {
        let cfg = ModelConfig::preset("mamba-110m").unwrap();
        let a = PackPlan::new(8, vec![vec![0, 1], vec![2]], vec![4, 4, 8]).unwrap();
        let b = PackPlan::new(8, vec![vec![0], vec![1]], vec![1, 1]).unwrap();
        let c = PackPlan::new(16, vec![vec![0]], vec![3]).unwrap();
        assert_eq!(
            flops_estimate(&cfg, &a).unwrap(),
            flops_estimate(&cfg, &b).unwrap()
        );
        assert_eq!(
            flops_estimate(&cfg, &a).unwrap(),
            flops_estimate(&cfg, &c).unwrap()
        );
        let d = PackPlan::new(8, vec![vec![0], vec![1], vec![2]], vec![1, 1, 1]).unwrap();
        assert_eq!(
            2 * flops_estimate(&cfg, &d).unwrap(),
            3 * flops_estimate(&cfg, &a).unwrap()
        );
    }

    #[test]
    fn half_padding_doubles_flops() {
        let cfg = ModelConfig::preset("desk").unwrap();
        let dense = PackPlan::new(4, vec![vec![0, 1]], vec![2, 2]).unwrap();
        let padded = plan_pad_to_max(&[2, 2], 4).unwrap();
        assert_eq!(
            flops_estimate(&cfg, &padded).unwrap(),
            2 * flops_estimate(&cfg, &dense).unwrap()
        );
    }

    #[test]
    fn packed_over_padded_ratio_is_slot_ratio() {
        let cfg = ModelConfig::preset("mamba-1.4b").unwrap();
        let lengths = [5, 4, 3, 2, 1, 1];
        let padded = plan_pad_to_max(&lengths, 8).unwrap();
        for packed in [
            plan_fifo(&lengths, 8).unwrap(),
            plan_greedy_sorted(&lengths, 8).unwrap(),
        ] {
            let lhs = flops_estimate(&cfg, &packed).unwrap() * padded.total_slots() as u128;
            let rhs = flops_estimate(&cfg, &padded).unwrap() * packed.total_slots() as u128;
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn analytic_model_matches_counters() {
        let dims = BlockDims {
            model_dim: 3,
            expanded_dim: 6,
            state_dim: 2,
            conv_width: 3,
        };
        let cfg = ModelConfig::from_block_dims("tiny", 1, dims).unwrap();
        let plan = plan_fifo(&[3, 2, 4], 5).unwrap();
        let params = BlockParams::<f64>::init(dims, 5);
        let x = Array3::from_shape_fn((plan.num_packs(), 5, 3), |(p, t, c)| {
            (p + t + c) as f64 * 0.1
        });
        let counter = FlopCounter::new();
        mamba_block_forward_counted(&x, &plan.position_indices(), &params, &counter).unwrap();
        for (kind, per_slot) in cfg.per_slot_breakdown() {
            assert_eq!(
                counter.get(kind) as u128,
                per_slot * plan.total_slots() as u128,
                "{kind:?}"
            );
        }
        assert_eq!(
            counter.total() as u128,
            flops_estimate(&cfg, &plan).unwrap()
        );
    }

    #[test]
    fn config_file_round_trip_and_lookup() {
        let file = ConfigFile {
            models: vec![preset("custom", 2, 32)],
        };
        let text = serde_json::to_string(&file).unwrap();
        let back: ConfigFile = serde_json::from_str(&text).unwrap();
        assert_eq!(resolve_model("custom", Some(&back)).unwrap().layers, 2);
        assert_eq!(resolve_model("mamba-110m", Some(&back)).unwrap().layers, 16);
    }
}
