//! Parameter regions and per-region gradient maps.
//!
//! Every learnable parameter carries exactly one [`RegionTag`]; a
//! [`GradientMap`] holds one gradient tensor per parameter, in parameter
//! declaration order, so per-region norms and scalings are stable across
//! runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionTag {
    /// Per-modality encoder upstream of the fusion seam (first modality).
    LidarBranch,
    /// Per-modality encoder upstream of the fusion seam (second modality).
    ImageBranch,
    /// Columns of the first fusion-layer weight that multiply the first
    /// modality's features.
    FusionLidarSplit,
    /// Columns of the first fusion-layer weight that multiply the second
    /// modality's features.
    FusionImageSplit,
    /// Remaining parameters of the first fusion layer (its bias).
    FusionRest,
    /// Shared trunk layers between fusion and the heads (minus the last
    /// trunk weight).
    SharedTrunk,
    /// The last shared trunk layer's weight matrix.
    SharedLast,
    /// Detection head.
    HeadDet,
    /// Segmentation head.
    HeadSeg,
}

impl RegionTag {
    pub const ALL: [RegionTag; 9] = [
        RegionTag::LidarBranch,
        RegionTag::ImageBranch,
        RegionTag::FusionLidarSplit,
        RegionTag::FusionImageSplit,
        RegionTag::FusionRest,
        RegionTag::SharedTrunk,
        RegionTag::SharedLast,
        RegionTag::HeadDet,
        RegionTag::HeadSeg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegionTag::LidarBranch => "lidar_branch",
            RegionTag::ImageBranch => "image_branch",
            RegionTag::FusionLidarSplit => "fusion_lidar_split",
            RegionTag::FusionImageSplit => "fusion_image_split",
            RegionTag::FusionRest => "fusion_rest",
            RegionTag::SharedTrunk => "shared_trunk",
            RegionTag::SharedLast => "shared_last",
            RegionTag::HeadDet => "head_det",
            RegionTag::HeadSeg => "head_seg",
        }
    }
}

impl std::fmt::Display for RegionTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gradient of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub region: RegionTag,
    pub grad: Tensor,
}

/// Per-parameter gradients produced by one backward pass from one scalar
/// root. Entries follow parameter declaration order; parameters unreachable
/// from the root hold all-zero gradients.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<GradEntry>,
}

impl GradientMap {
    pub(crate) fn new(entries: Vec<GradEntry>) -> Self {
        GradientMap { entries }
    }

    pub fn entries(&self) -> &[GradEntry] {
        &self.entries
    }

    pub fn has_region(&self, tag: RegionTag) -> bool {
        self.entries.iter().any(|e| e.region == tag)
    }

    /// All gradient entries in region `tag`, flattened in declaration order
    /// (each tensor row-major).
    pub fn region_gradient(&self, tag: RegionTag) -> Result<Vec<f64>> {
        if !self.has_region(tag) {
            return Err(Error::Usage(format!("region {tag} not present in map")));
        }
        let mut flat = Vec::new();
        for entry in self.entries.iter().filter(|e| e.region == tag) {
            flat.extend_from_slice(entry.grad.data());
        }
        Ok(flat)
    }

    /// L2 norm over the whole region.
    pub fn region_norm(&self, tag: RegionTag) -> Result<f64> {
        let sq: f64 = self
            .region_gradient(tag)?
            .iter()
            .map(|v| v * v)
            .sum();
        Ok(sq.sqrt())
    }

    /// Multiplies every gradient entry in region `tag` by `factor`,
    /// leaving other regions untouched.
    pub fn scale_region(&mut self, tag: RegionTag, factor: f64) -> Result<()> {
        if !factor.is_finite() {
            return Err(Error::Usage(format!("non-finite scale factor {factor}")));
        }
        if !self.has_region(tag) {
            return Err(Error::Usage(format!("region {tag} not present in map")));
        }
        for entry in self.entries.iter_mut().filter(|e| e.region == tag) {
            entry.grad.scale_in_place(factor);
        }
        Ok(())
    }
}
