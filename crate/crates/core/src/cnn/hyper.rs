use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub patch_size: usize,
    /// Spatial width of the convolution kernels (1 for the standard network).
    pub kernel_width: usize,
    pub kernel_count: usize,
    /// Pooling window and stride.
    pub pool_size: usize,
    pub fc_units: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random training patches drawn per image and epoch.
    pub patches_per_image: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            patch_size: 32,
            kernel_width: 1,
            kernel_count: 240,
            pool_size: 8,
            fc_units: 40,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            patches_per_image: 100,
            patience: 5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_size", self.patch_size),
            ("kernel_width", self.kernel_width),
            ("kernel_count", self.kernel_count),
            ("pool_size", self.pool_size),
            ("fc_units", self.fc_units),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be >= 1")));
        }
        if !self.patch_size.is_multiple_of(self.pool_size) {
            return Err(Error::Parameter(format!(
                "patch_size {} is not divisible by pool_size {}",
                self.patch_size, self.pool_size
            )));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel_width {} must be odd", self.kernel_width)));
        }
        if self.kernel_width > self.patch_size {
            return Err(Error::Parameter(format!(
                "kernel_width {} exceeds patch_size {}",
                self.kernel_width, self.patch_size
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Side of the pooled feature grid.
    pub fn pool_grid(&self) -> usize {
        self.patch_size / self.pool_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_describe_standard_network() {
        let h = HyperParams::default();
        h.validate().unwrap();
        assert_eq!((h.patch_size, h.kernel_count, h.pool_grid(), h.fc_units), (32, 240, 4, 40));
    }

    #[test]
    fn rejects_bad_divisibility() {
        let h = HyperParams {
            pool_size: 5,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        let h = HyperParams {
            fc_units: 0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
    }

    #[test]
    fn json_fills_missing_fields() {
        let h: HyperParams = serde_json::from_str(r#"{"kernel_count": 32}"#).unwrap();
        assert_eq!(h.kernel_count, 32);
        assert_eq!(h.fc_units, 40);
    }
}
