//! Angular error, the six summary statistics and the benchmark report.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cnn::NetworkParams;
use crate::error::{Error, Result};
use crate::estimator::{estimate_image, Pooling};
use crate::image::{norm3, Illuminant};
use crate::manifest::Dataset;
use crate::parallel;
use crate::statistics::{do_nothing, minkowski_estimate, Preset};

/// Angle in degrees between two nonzero RGB vectors.
pub fn angular_error_raw(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let (na, nb) = (norm3(a), norm3(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEstimate(format!(
            "angular error of {a:?} and {b:?} needs nonzero finite vectors"
        )));
    }
    // Same angle as arccos of the normalized dot product, but well conditioned
    // near 0° and 180°.
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = norm3([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]);
    Ok(cross.atan2(dot).to_degrees())
}

/// Angle in degrees between two illuminants.
pub fn angular_error(a: &Illuminant, b: &Illuminant) -> Result<f64> {
    angular_error_raw(a.rgb(), b.rgb())
}

/// Minimum, 10th percentile, median, mean, 90th percentile and maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub min: f64,
    pub prc10: f64,
    pub median: f64,
    pub mean: f64,
    pub prc90: f64,
    pub max: f64,
}

/// Percentile by linear interpolation between closest ranks, at zero-based
/// rank `p/100 · (n − 1)` of the sorted sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub fn summarize(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::Empty("no errors to summarize".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ErrorStats {
        min: sorted[0],
        prc10: percentile(&sorted, 10.0),
        median: percentile(&sorted, 50.0),
        // Sum in sorted order so the result does not depend on input order.
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        prc90: percentile(&sorted, 90.0),
        max: sorted[sorted.len() - 1],
    })
}

/// Estimators the benchmark can score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    DoNothing,
    Statistic(Preset),
    CnnPerPatch,
    CnnAverage,
    CnnMedian,
    CnnFineTuned,
}

impl EstimatorKind {
    pub fn label(&self) -> String {
        match self {
            EstimatorKind::DoNothing => "DN".into(),
            EstimatorKind::Statistic(p) => p.name().into(),
            EstimatorKind::CnnPerPatch => "CNN per patch".into(),
            EstimatorKind::CnnAverage => "CNN average-pooling".into(),
            EstimatorKind::CnnMedian => "CNN median-pooling".into(),
            EstimatorKind::CnnFineTuned => "CNN fine-tuned".into(),
        }
    }

    fn is_cnn(&self) -> bool {
        matches!(
            self,
            EstimatorKind::CnnPerPatch
                | EstimatorKind::CnnAverage
                | EstimatorKind::CnnMedian
                | EstimatorKind::CnnFineTuned
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Network weights per test fold.
#[derive(Clone, Debug, Default)]
pub struct FoldModels {
    pub pretrained: BTreeMap<usize, NetworkParams>,
    pub finetuned: BTreeMap<usize, NetworkParams>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkRow {
    pub estimator: String,
    pub stats: ErrorStats,
}

#[derive(Clone, Debug)]
pub struct ImageError {
    pub image_id: String,
    pub estimator: String,
    pub degrees: f64,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub per_image: Vec<ImageError>,
}

impl BenchmarkReport {
    pub fn row(&self, estimator: &str) -> Option<&ErrorStats> {
        self.rows.iter().find(|r| r.estimator == estimator).map(|r| &r.stats)
    }

    /// Aligned text table with two decimals.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.estimator.len()).max().unwrap_or(9).max(9);
        let mut s = format!(
            "{:<width$} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "Algorithm", "Min", "10prc", "Med", "Avg", "90prc", "Max"
        );
        for r in &self.rows {
            let t = &r.stats;
            let _ = writeln!(
                s,
                "{:<width$} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                r.estimator, t.min, t.prc10, t.median, t.mean, t.prc90, t.max
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimator,min,prc10,median,mean,prc90,max\n");
        for r in &self.rows {
            let t = &r.stats;
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.estimator, t.min, t.prc10, t.median, t.mean, t.prc90, t.max
            );
        }
        s
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("image_id,estimator,degrees\n");
        for e in &self.per_image {
            let _ = writeln!(s, "{},{},{:.6}", e.image_id, e.estimator, e.degrees);
        }
        s
    }

    /// Writes `<stem>.txt`, `<stem>.csv` and `<stem>_per_image.csv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        for (suffix, body) in [
            (".txt", self.to_table()),
            (".csv", self.to_csv()),
            ("_per_image.csv", self.per_image_csv()),
        ] {
            let mut name = stem.as_os_str().to_owned();
            name.push(suffix);
            fs::write(&name, body).map_err(|e| Error::io(&name, e))?;
        }
        Ok(())
    }
}

/// Scores each estimator on every image of `dataset`.
///
/// CNN rows use the model trained with the image's fold held out. Whenever a
/// CNN row is requested the per-patch row is included as well.
pub fn benchmark(
    dataset: &Dataset,
    estimators: &[EstimatorKind],
    models: &FoldModels,
    patch_size: usize,
) -> Result<BenchmarkReport> {
    if dataset.samples.is_empty() {
        return Err(Error::Empty("dataset has no images".into()));
    }
    let mut kinds: Vec<EstimatorKind> = estimators.to_vec();
    if kinds.iter().any(|k| k.is_cnn()) && !kinds.contains(&EstimatorKind::CnnPerPatch) {
        kinds.push(EstimatorKind::CnnPerPatch);
    }
    kinds.sort();
    kinds.dedup();

    let model_for = |kind: EstimatorKind, fold: usize| -> Result<&NetworkParams> {
        let table = if kind == EstimatorKind::CnnFineTuned {
            &models.finetuned
        } else {
            &models.pretrained
        };
        table.get(&fold).ok_or(Error::MissingModel(fold))
    };

    let mut rows = Vec::with_capacity(kinds.len());
    let mut per_image = Vec::new();
    for kind in kinds {
        let label = kind.label();
        // One entry per image; the per-patch row collects all patch errors.
        let results: Vec<Result<Vec<f64>>> = parallel::map(&dataset.samples, |s| {
            let gt = &s.illuminant;
            let single = |est: Illuminant| angular_error(&est, gt).map(|e| vec![e]);
            match kind {
                EstimatorKind::DoNothing => single(do_nothing()),
                EstimatorKind::Statistic(p) => single(minkowski_estimate(&s.image, &p.params())?),
                EstimatorKind::CnnPerPatch => {
                    let est = estimate_image(model_for(kind, s.fold)?, &s.image, Pooling::Median, patch_size)?;
                    est.per_patch.iter().map(|p| angular_error(&p.estimate, gt)).collect()
                }
                EstimatorKind::CnnAverage => single(
                    estimate_image(model_for(kind, s.fold)?, &s.image, Pooling::Average, patch_size)?.illuminant,
                ),
                EstimatorKind::CnnMedian | EstimatorKind::CnnFineTuned => single(
                    estimate_image(model_for(kind, s.fold)?, &s.image, Pooling::Median, patch_size)?.illuminant,
                ),
            }
        });
        let mut all = Vec::new();
        for (s, r) in dataset.samples.iter().zip(results) {
            let errs = r?;
            if kind != EstimatorKind::CnnPerPatch {
                per_image.push(ImageError {
                    image_id: s.id.clone(),
                    estimator: label.clone(),
                    degrees: errs[0],
                });
            }
            all.extend(errs);
        }
        rows.push(BenchmarkRow {
            estimator: label,
            stats: summarize(&all)?,
        });
    }
    Ok(BenchmarkReport { rows, per_image })
}
