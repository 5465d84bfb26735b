use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Group,
    Batch,
}

/// Architecture hyperparameters. Every field has a default, so partial JSON
/// objects deserialize into a complete configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Resolution levels including the bottleneck; `levels - 1` downsamplings.
    pub levels: usize,
    pub encoder_kernel: [usize; 3],
    pub resample_kernel: [usize; 3],
    pub bottleneck_kernel: [usize; 3],
    pub norm: NormKind,
    pub gn_groups: usize,
    pub use_sam: bool,
    pub sam_kernel: [usize; 3],
    pub use_aspp: bool,
    pub aspp_rates: Vec<[usize; 3]>,
    /// Image-level global-average-pooling branch in the ASPP block.
    pub aspp_pooling_branch: bool,
    pub out_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 24,
            levels: 4,
            encoder_kernel: [3, 3, 1],
            resample_kernel: [2, 2, 1],
            bottleneck_kernel: [3, 3, 3],
            norm: NormKind::Group,
            gn_groups: 8,
            use_sam: true,
            sam_kernel: [14, 14, 1],
            use_aspp: true,
            aspp_rates: vec![[1, 1, 1], [2, 2, 1], [4, 4, 1]],
            aspp_pooling_branch: false,
            out_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Plain U-Net with batch norm and isotropic kernels, no attention or ASPP.
    pub fn backbone_isotropic() -> Self {
        Self {
            encoder_kernel: [3, 3, 3],
            resample_kernel: [2, 2, 2],
            norm: NormKind::Batch,
            use_sam: false,
            use_aspp: false,
            ..Self::default()
        }
    }

    /// Feature channels at resolution level `level` (bottleneck = `levels - 1`).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2 (got {})", self.levels));
        }
        if self.base_channels < 2 {
            return bad(format!("base_channels must be >= 2 (got {})", self.base_channels));
        }
        if self.levels > 8 {
            return bad(format!("levels {} is unreasonably deep", self.levels));
        }
        if self.out_classes != 2 {
            return bad(format!("out_classes must be 2 (got {})", self.out_classes));
        }
        for (name, k) in [("encoder_kernel", self.encoder_kernel), ("bottleneck_kernel", self.bottleneck_kernel)] {
            if k.iter().any(|&e| e == 0 || e % 2 == 0) {
                return bad(format!("{name} {k:?} must have odd positive extents"));
            }
        }
        if self.bottleneck_kernel != [3, 3, 3] {
            return bad(format!("bottleneck_kernel is fixed at [3, 3, 3] (got {:?})", self.bottleneck_kernel));
        }
        if self.resample_kernel.contains(&0) {
            return bad(format!("resample_kernel {:?} must be positive", self.resample_kernel));
        }
        if self.sam_kernel.contains(&0) {
            return bad(format!("sam_kernel {:?} must be positive", self.sam_kernel));
        }
        if self.use_aspp {
            if self.aspp_rates.is_empty() {
                return bad("aspp_rates must not be empty when use_aspp".into());
            }
            if self.aspp_rates.iter().flatten().any(|&r| r == 0) {
                return bad(format!("aspp_rates {:?} must be positive", self.aspp_rates));
            }
        }
        if self.gn_groups == 0 {
            return bad("gn_groups must be >= 1".into());
        }
        let mut normalized: Vec<usize> = Vec::new();
        if self.norm == NormKind::Group {
            normalized.extend((0..self.levels).map(|l| self.channels(l)));
        }
        if self.use_aspp {
            // ASPP branches always use group norm
            normalized.push(self.bottleneck_channels());
        }
        for c in normalized {
            if c % self.gn_groups != 0 {
                return bad(format!("gn_groups {} does not divide {c} channels", self.gn_groups));
            }
        }
        Ok(())
    }

    /// Checks a network input's spatial extent `[H, W, D]`.
    pub fn check_spatial(&self, spatial: [usize; 3]) -> Result<()> {
        let steps = self.levels - 1;
        for a in 0..3 {
            let factor = self.resample_kernel[a].pow(steps as u32);
            if spatial[a] == 0 || !spatial[a].is_multiple_of(factor) {
                return Err(Error::Shape(format!(
                    "input extent {spatial:?} not divisible by {factor} along axis {a} \
                     ({} resampling steps of {:?})",
                    steps, self.resample_kernel
                )));
            }
        }
        if self.use_aspp {
            let b = self.bottleneck_spatial(spatial);
            for rate in &self.aspp_rates {
                for a in 0..3 {
                    // every off-centre tap of a 3-wide kernel would land in padding
                    if b[a] > 1 && rate[a] >= b[a] {
                        return Err(Error::Shape(format!(
                            "ASPP dilation {rate:?} exceeds bottleneck extent {b:?} on axis {a}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn bottleneck_spatial(&self, spatial: [usize; 3]) -> [usize; 3] {
        let steps = (self.levels - 1) as u32;
        std::array::from_fn(|a| spatial[a] / self.resample_kernel[a].pow(steps))
    }
}
