//! Retrains the network across values of one architecture parameter and
//! records the held-out median error for each.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cnn::HyperParams;
use crate::error::{Error, Result};
use crate::estimator::{estimate_image, train, Pooling};
use crate::evaluation::{angular_error, summarize};
use crate::manifest::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    KernelWidth,
    KernelCount,
    PoolSize,
    FcUnits,
    PatchSize,
}

impl SweepParameter {
    pub const ALL: [SweepParameter; 5] = [
        SweepParameter::KernelWidth,
        SweepParameter::KernelCount,
        SweepParameter::PoolSize,
        SweepParameter::FcUnits,
        SweepParameter::PatchSize,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::KernelWidth => "kernel_width",
            SweepParameter::KernelCount => "kernel_count",
            SweepParameter::PoolSize => "pool_size",
            SweepParameter::FcUnits => "fc_units",
            SweepParameter::PatchSize => "patch_size",
        }
    }

    /// `base` with this parameter set to `value`, validated.
    pub fn apply(&self, base: &HyperParams, value: usize) -> Result<HyperParams> {
        let mut h = base.clone();
        match self {
            SweepParameter::KernelWidth => h.kernel_width = value,
            SweepParameter::KernelCount => h.kernel_count = value,
            SweepParameter::PoolSize => h.pool_size = value,
            SweepParameter::FcUnits => h.fc_units = value,
            SweepParameter::PatchSize => h.patch_size = value,
        }
        h.validate()
            .map_err(|e| Error::Parameter(format!("{} = {value}: {e}", self.name())))?;
        Ok(h)
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Parameter(format!(
                "unknown sweep parameter {s:?}; expected one of kernel_width, kernel_count, pool_size, fc_units, patch_size"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<usize>,
    pub base: HyperParams,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
}

fn default_pooling() -> Pooling {
    Pooling::Median
}

impl SweepConfig {
    /// Checks every value before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Parameter("sweep needs at least one value".into()));
        }
        for v in &self.values {
            self.parameter.apply(&self.base, *v)?;
        }
        Ok(())
    }
}

/// Small, fast settings for sweeps.
pub fn reduced_hyper() -> HyperParams {
    HyperParams {
        kernel_count: 16,
        fc_units: 16,
        epochs: 8,
        patches_per_image: 40,
        patience: 3,
        ..HyperParams::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub median_error: f64,
}

/// Median held-out pooled angular error for each value, training a full
/// cross-validation per value.
pub fn run_sweep(dataset: &Dataset, cfg: &SweepConfig) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    cfg.values
        .iter()
        .map(|&value| {
            let hyper = cfg.parameter.apply(&cfg.base, value)?;
            let cv = train(dataset, &hyper)?;
            let mut errors = Vec::with_capacity(dataset.samples.len());
            for fm in &cv.folds {
                for i in dataset.fold_indices(fm.test_fold) {
                    let s = &dataset.samples[i];
                    let est = estimate_image(&fm.params, &s.image, cfg.pooling, hyper.patch_size)?;
                    errors.push(angular_error(&est.illuminant, &s.illuminant)?);
                }
            }
            Ok(SweepPoint {
                value,
                median_error: summarize(&errors)?.median,
            })
        })
        .collect()
}

pub fn sweep_csv(parameter: SweepParameter, points: &[SweepPoint]) -> String {
    let mut s = format!("{parameter},median_angular_error\n");
    for p in points {
        writeln!(s, "{},{:.6}", p.value, p.median_error).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, to_dataset, SynthConfig};

    #[test]
    fn parameters_parse_and_apply() {
        for p in SweepParameter::ALL {
            assert_eq!(p.name().parse::<SweepParameter>().unwrap(), p);
        }
        assert!("depth".parse::<SweepParameter>().is_err());
        let base = reduced_hyper();
        assert_eq!(SweepParameter::FcUnits.apply(&base, 7).unwrap().fc_units, 7);
        assert!(SweepParameter::PoolSize.apply(&base, 5).is_err());
        assert!(SweepParameter::KernelWidth.apply(&base, 2).is_err());
        assert!(SweepParameter::PatchSize.apply(&base, 12).is_err());
    }

    #[test]
    fn tiny_sweep_emits_one_row_per_value() {
        let ds = to_dataset(&generate(&SynthConfig { count: 6, width: 32, height: 32, ..SynthConfig::default() }).unwrap());
        let cfg = SweepConfig {
            parameter: SweepParameter::FcUnits,
            values: vec![2, 4],
            base: HyperParams {
                patch_size: 16,
                kernel_count: 4,
                pool_size: 8,
                epochs: 1,
                patches_per_image: 4,
                ..HyperParams::default()
            },
            pooling: Pooling::Median,
        };
        let points = run_sweep(&ds, &cfg).unwrap();
        assert_eq!(points.iter().map(|p| p.value).collect::<Vec<_>>(), vec![2, 4]);
        let csv = sweep_csv(cfg.parameter, &points);
        assert!(csv.starts_with("fc_units,median_angular_error\n"));
        assert_eq!(csv.lines().count(), 3);
        let bad = SweepConfig { values: vec![2, 3], parameter: SweepParameter::PoolSize, ..cfg };
        assert!(run_sweep(&ds, &bad).is_err());
    }
}
