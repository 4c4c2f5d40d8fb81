//! Image-level estimation from per-patch network outputs, training with
//! three-fold cross-validation, and fine-tuning through the pooling step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{
    angular_loss, backward, batch_gradient, forward, forward_cached, init_params, sgd_step,
    HyperParams, LossKind, MomentumState, NetworkParams,
};
use crate::error::{Error, Result};
use crate::evaluation::{angular_error, angular_error_raw, summarize, ErrorStats};
use crate::image::{norm3, Illuminant, LinearImage};
use crate::manifest::{Dataset, FOLDS};
use crate::parallel;
use crate::patch::{
    extract_grid_patches, histogram_stretch, resize_max_side, sample_random_patches, stream_seed,
    ExclusionMask, Patch, Rect,
};

/// Images are downscaled to this longest side before patch extraction.
pub const MAX_SIDE: usize = 1200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Average,
    Median,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Average => "average",
            Pooling::Median => "median",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Pooling::Average),
            "median" => Ok(Pooling::Median),
            other => Err(Error::Parameter(format!(
                "unknown pooling {other:?}; expected average or median"
            ))),
        }
    }
}

/// Unit direction of the nonnegative part of a network output, if any.
fn positive_direction(raw: [f64; 3]) -> Option<[f64; 3]> {
    let pos = raw.map(|v| v.max(0.0));
    let n = norm3(pos);
    (n > 0.0 && n.is_finite()).then(|| pos.map(|v| v / n))
}

/// Normalized network estimate for one contrast-normalized patch.
///
/// Negative output channels are clipped to zero before normalization.
pub fn estimate_patch(params: &NetworkParams, patch: &Patch) -> Result<Illuminant> {
    let raw = forward(params, patch)?;
    let dir = positive_direction(raw).ok_or_else(|| {
        Error::DegenerateEstimate(format!("network output {raw:?} has no positive component"))
    })?;
    Illuminant::normalize(dir)
}

pub fn pool_average(estimates: &[Illuminant]) -> Result<Illuminant> {
    if estimates.is_empty() {
        return Err(Error::Empty("no estimates to pool".into()));
    }
    if estimates.iter().all(|e| *e == estimates[0]) {
        return Ok(estimates[0]);
    }
    let mut sum = [0.0; 3];
    for e in estimates {
        let v = e.rgb();
        for c in 0..3 {
            sum[c] += v[c];
        }
    }
    let n = estimates.len() as f64;
    Illuminant::normalize(sum.map(|s| s / n))
}

/// Channel median of `values` and the weight each input contributes to it:
/// the middle element for odd counts, half to each of the two middle
/// elements for even counts. Ties keep input order.
pub(crate) fn median_weights(values: &[f64]) -> (f64, Vec<(usize, f64)>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)));
    let n = idx.len();
    if n % 2 == 1 {
        let i = idx[n / 2];
        (values[i], vec![(i, 1.0)])
    } else {
        let (a, b) = (idx[n / 2 - 1], idx[n / 2]);
        (0.5 * (values[a] + values[b]), vec![(a, 0.5), (b, 0.5)])
    }
}

pub fn pool_median(estimates: &[Illuminant]) -> Result<Illuminant> {
    if estimates.is_empty() {
        return Err(Error::Empty("no estimates to pool".into()));
    }
    let med = [0, 1, 2].map(|c| {
        let vals: Vec<f64> = estimates.iter().map(|e| e.rgb()[c]).collect();
        median_weights(&vals).0
    });
    Illuminant::normalize(med).map_err(|_| {
        Error::DegenerateEstimate(format!("channel medians {med:?} give no direction"))
    })
}

pub fn pool(estimates: &[Illuminant], pooling: Pooling) -> Result<Illuminant> {
    match pooling {
        Pooling::Average => pool_average(estimates),
        Pooling::Median => pool_median(estimates),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEstimate {
    pub origin: (usize, usize),
    pub raw: [f64; 3],
    pub estimate: Illuminant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledEstimate {
    pub illuminant: Illuminant,
    pub per_patch: Vec<PatchEstimate>,
    pub pooling: Pooling,
    /// Patches dropped for having no contrast or no positive network output.
    pub skipped: usize,
}

/// Resized, contrast-normalized, non-degenerate grid patches of an image.
pub fn prepare_grid_patches(img: &LinearImage, patch_size: usize) -> (Vec<Patch>, usize) {
    let resized = resize_max_side(img, MAX_SIDE);
    let patches = extract_grid_patches(&resized, patch_size);
    let total = patches.len();
    let kept: Vec<Patch> = patches
        .iter()
        .map(histogram_stretch)
        .filter(|p| !p.degenerate)
        .collect();
    let skipped = total - kept.len();
    (kept, skipped)
}

/// Global estimate: resize, grid patches, stretch, per-patch estimates, pool.
pub fn estimate_image(
    params: &NetworkParams,
    img: &LinearImage,
    pooling: Pooling,
    patch_size: usize,
) -> Result<PooledEstimate> {
    let (patches, mut skipped) = prepare_grid_patches(img, patch_size);
    let outputs = parallel::map(&patches, |p| forward(params, p));
    let mut per_patch = Vec::with_capacity(patches.len());
    for (p, out) in patches.iter().zip(outputs) {
        let raw = out?;
        match positive_direction(raw) {
            Some(dir) => per_patch.push(PatchEstimate {
                origin: p.origin,
                raw,
                estimate: Illuminant::normalize(dir)?,
            }),
            None => skipped += 1,
        }
    }
    if per_patch.is_empty() {
        return Err(Error::EstimationImpossible(format!(
            "no usable {patch_size}-pixel patch in {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let estimates: Vec<Illuminant> = per_patch.iter().map(|p| p.estimate).collect();
    Ok(PooledEstimate {
        illuminant: pool(&estimates, pooling)?,
        per_patch,
        pooling,
        skipped,
    })
}

/// Image-level angular loss (radians) of the pooled estimate and its gradient
/// with respect to all network parameters.
///
/// The gradient flows back through the final normalization, the pooling
/// (mean: `1/N` to every patch; median: to the patch or pair of patches
/// realizing each channel's median) and each patch's normalization.
pub fn image_loss_gradient(
    params: &NetworkParams,
    patches: &[Patch],
    gt: &Illuminant,
    pooling: Pooling,
) -> Result<(f64, NetworkParams)> {
    let forwards = parallel::map(patches, |p| forward_cached(params, p));
    let mut caches = Vec::with_capacity(patches.len());
    let mut dirs = Vec::with_capacity(patches.len());
    let mut raws = Vec::with_capacity(patches.len());
    for f in forwards {
        let (raw, cache) = f?;
        if let Some(d) = positive_direction(raw) {
            caches.push(cache);
            dirs.push(d);
            raws.push(raw);
        }
    }
    if dirs.is_empty() {
        return Err(Error::EstimationImpossible("no usable patch for fine-tuning".into()));
    }
    let n = dirs.len();

    let mut pooled = [0.0; 3];
    // grad_dirs[i] accumulates d(pooled)/d(dir_i) routing per channel.
    let mut routing = vec![[0.0; 3]; n];
    match pooling {
        Pooling::Average => {
            for d in &dirs {
                for c in 0..3 {
                    pooled[c] += d[c] / n as f64;
                }
            }
            routing.iter_mut().for_each(|r| *r = [1.0 / n as f64; 3]);
        }
        Pooling::Median => {
            for c in 0..3 {
                let vals: Vec<f64> = dirs.iter().map(|d| d[c]).collect();
                let (m, weights) = median_weights(&vals);
                pooled[c] = m;
                for (i, w) in weights {
                    routing[i][c] = w;
                }
            }
        }
    }
    let (loss, g_pooled) = angular_loss(pooled, gt)?;

    let grads: Vec<Result<Option<NetworkParams>>> = parallel::map_range(n, |i| {
        let g_dir = [0, 1, 2].map(|c| g_pooled[c] * routing[i][c]);
        if g_dir.iter().all(|v| *v == 0.0) {
            return Ok(None);
        }
        // d(dir)/d(raw) for dir = raw⁺/‖raw⁺‖ is (I − dir dirᵀ)/‖raw⁺‖ on the
        // positive channels and zero elsewhere.
        let d = dirs[i];
        let pos_norm = norm3(raws[i].map(|v| v.max(0.0)));
        let proj = d[0] * g_dir[0] + d[1] * g_dir[1] + d[2] * g_dir[2];
        let g_raw = [0, 1, 2].map(|c| {
            if raws[i][c] > 0.0 {
                (g_dir[c] - d[c] * proj) / pos_norm
            } else {
                0.0
            }
        });
        backward(params, &caches[i], g_raw).map(Some)
    });
    let mut total = params.zeros_like();
    for g in grads {
        if let Some(g) = g? {
            total.add_assign(&g);
        }
    }
    Ok((loss, total))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub fold: usize,
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angular: Option<ErrorStats>,
}

/// Serializes records as line-delimited JSON.
pub fn log_to_jsonl(records: &[LogRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

/// A network trained with one fold held out.
#[derive(Clone, Debug)]
pub struct FoldModel {
    pub test_fold: usize,
    pub train_fold: usize,
    pub val_fold: usize,
    pub params: NetworkParams,
    /// Epoch whose weights were kept (0 = the starting weights).
    pub best_epoch: usize,
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldModel>,
}

impl CrossValidation {
    pub fn models(&self) -> BTreeMap<usize, NetworkParams> {
        self.folds.iter().map(|f| (f.test_fold, f.params.clone())).collect()
    }

    pub fn log(&self) -> Vec<LogRecord> {
        self.folds.iter().flat_map(|f| f.log.iter().cloned()).collect()
    }
}

/// Training and validation folds used when `test` is held out.
pub fn fold_roles(test: usize) -> (usize, usize) {
    ((test + 1) % FOLDS, (test + 2) % FOLDS)
}

fn scale_mask(mask: &ExclusionMask, from: &LinearImage, to: &LinearImage) -> ExclusionMask {
    if from.width() == to.width() && from.height() == to.height() {
        return mask.clone();
    }
    let sx = to.width() as f64 / from.width() as f64;
    let sy = to.height() as f64 / from.height() as f64;
    ExclusionMask::new(
        mask.rects
            .iter()
            .map(|r| {
                let x0 = (r.x as f64 * sx).floor() as usize;
                let y0 = (r.y as f64 * sy).floor() as usize;
                let x1 = (((r.x + r.w) as f64 * sx).ceil() as usize).min(to.width());
                let y1 = (((r.y + r.h) as f64 * sy).ceil() as usize).min(to.height());
                Rect::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
            })
            .collect(),
    )
}

struct PreparedImage {
    patches: Vec<Patch>,
    gt: Illuminant,
}

fn prepare(dataset: &Dataset, indices: &[usize], patch_size: usize) -> Vec<PreparedImage> {
    parallel::map(indices, |&i| {
        let s = &dataset.samples[i];
        PreparedImage {
            patches: prepare_grid_patches(&s.image, patch_size).0,
            gt: s.illuminant,
        }
    })
}

/// Angular error of every validation patch, in degrees. A zero output
/// counts as 90°.
fn patch_errors(params: &NetworkParams, images: &[PreparedImage]) -> Result<Vec<f64>> {
    let mut errors = Vec::new();
    for img in images {
        let outs = parallel::map(&img.patches, |p| forward(params, p));
        for o in outs {
            errors.push(angular_error_raw(o?, img.gt.rgb()).unwrap_or(90.0));
        }
    }
    Ok(errors)
}

fn pooled_errors(params: &NetworkParams, images: &[PreparedImage], pooling: Pooling) -> Result<Vec<f64>> {
    images
        .iter()
        .map(|img| {
            let outs = parallel::map(&img.patches, |p| forward(params, p));
            let mut ests = Vec::with_capacity(outs.len());
            for o in outs {
                if let Some(d) = positive_direction(o?) {
                    ests.push(Illuminant::normalize(d)?);
                }
            }
            match pool(&ests, pooling) {
                Ok(e) => angular_error(&e, &img.gt),
                Err(_) => Ok(90.0),
            }
        })
        .collect()
}

/// Trains one network on `train_idx` with Euclidean loss on random patches,
/// keeping the weights with the lowest median per-patch validation error.
pub fn train_network(
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    hyper: &HyperParams,
    fold: usize,
) -> Result<(NetworkParams, usize, Vec<LogRecord>)> {
    hyper.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let mut params = init_params(hyper, stream_seed(hyper.seed, 1_000 + fold as u64))?;
    let mut state = MomentumState::new(&params);
    let resized: Vec<(LinearImage, ExclusionMask)> = parallel::map(train_idx, |&i| {
        let s = &dataset.samples[i];
        let r = resize_max_side(&s.image, MAX_SIDE);
        let m = scale_mask(&s.mask, &s.image, &r);
        (r, m)
    });
    let val = prepare(dataset, val_idx, hyper.patch_size);

    let mut log = Vec::new();
    let validate = |params: &NetworkParams| -> Result<ErrorStats> {
        summarize(&patch_errors(params, &val)?)
    };
    let mut best = validate(&params)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    log.push(LogRecord {
        fold,
        stage: "train".into(),
        epoch: 0,
        split: "validation".into(),
        loss: None,
        angular: Some(best),
    });

    let mut stale = 0;
    for epoch in 1..=hyper.epochs {
        let epoch_seed = stream_seed(hyper.seed, epoch as u64);
        let sampled: Vec<Result<Vec<(Patch, Illuminant)>>> = parallel::map_range(train_idx.len(), |k| {
            let (img, mask) = &resized[k];
            let gt = dataset.samples[train_idx[k]].illuminant;
            let seed = stream_seed(epoch_seed, train_idx[k] as u64);
            Ok(sample_random_patches(img, hyper.patch_size, hyper.patches_per_image, mask, seed)?
                .iter()
                .map(histogram_stretch)
                .filter(|p| !p.degenerate)
                .map(|p| (p, gt))
                .collect())
        });
        let mut samples = Vec::new();
        for s in sampled {
            samples.extend(s?);
        }
        if samples.is_empty() {
            return Err(Error::Dataset("no usable training patches".into()));
        }
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(epoch_seed, u64::MAX)));

        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in samples.chunks(hyper.batch_size) {
            let refs: Vec<(&Patch, Illuminant)> = batch.iter().map(|(p, g)| (p, *g)).collect();
            let (loss, grads) = batch_gradient(&params, &refs, LossKind::Euclidean)?;
            sgd_step(&mut params, &grads, hyper, &mut state)?;
            loss_sum += loss;
            batches += 1;
        }
        let stats = validate(&params)?;
        log.push(LogRecord {
            fold,
            stage: "train".into(),
            epoch,
            split: "train".into(),
            loss: Some(loss_sum / batches as f64),
            angular: None,
        });
        log.push(LogRecord {
            fold,
            stage: "train".into(),
            epoch,
            split: "validation".into(),
            loss: None,
            angular: Some(stats),
        });
        if stats.median < best.median {
            best = stats;
            best_params = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    Ok((best_params, best_epoch, log))
}

/// Three-fold cross-validation: for each held-out test fold, train on the
/// next fold and validate on the remaining one.
pub fn train(dataset: &Dataset, hyper: &HyperParams) -> Result<CrossValidation> {
    dataset.check_folds()?;
    let mut folds = Vec::with_capacity(FOLDS);
    for test in 0..FOLDS {
        let (tr, va) = fold_roles(test);
        let (params, best_epoch, log) =
            train_network(dataset, &dataset.fold_indices(tr), &dataset.fold_indices(va), hyper, test)?;
        folds.push(FoldModel {
            test_fold: test,
            train_fold: tr,
            val_fold: va,
            params,
            best_epoch,
            log,
        });
    }
    Ok(CrossValidation { folds })
}

/// Fine-tunes `params` with the pooled image-level angular loss, one image
/// per update, for `hyper.epochs` passes over `indices`.
pub fn fine_tune(
    params: &NetworkParams,
    dataset: &Dataset,
    indices: &[usize],
    hyper: &HyperParams,
    pooling: Pooling,
) -> Result<(NetworkParams, Vec<LogRecord>)> {
    let train = prepare(dataset, indices, hyper.patch_size);
    let mut params = params.clone();
    let mut log = Vec::new();
    fine_tune_epochs(&mut params, &train, hyper, pooling, 0, |_, epoch, loss| {
        log.push(LogRecord {
            fold: 0,
            stage: "finetune".into(),
            epoch,
            split: "train".into(),
            loss: Some(loss),
            angular: None,
        });
        Ok(true)
    })?;
    Ok((params, log))
}

/// Runs fine-tuning epochs; `on_epoch(params, epoch, mean_loss_degrees)`
/// returns whether to continue.
fn fine_tune_epochs(
    params: &mut NetworkParams,
    train: &[PreparedImage],
    hyper: &HyperParams,
    pooling: Pooling,
    fold: usize,
    mut on_epoch: impl FnMut(&NetworkParams, usize, f64) -> Result<bool>,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Dataset("fine-tuning needs at least one image".into()));
    }
    let mut state = MomentumState::new(params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        let seed = stream_seed(hyper.seed ^ 0xF1E7, (fold * 100_000 + epoch) as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut total = 0.0;
        for &i in &order {
            let img = &train[i];
            let (loss, grads) = image_loss_gradient(params, &img.patches, &img.gt, pooling)?;
            sgd_step(params, &grads, hyper, &mut state)?;
            total += loss.to_degrees();
        }
        if !on_epoch(params, epoch, total / train.len() as f64)? {
            break;
        }
    }
    Ok(())
}

/// Fine-tunes every fold model on its training fold, keeping the weights with
/// the lowest median pooled validation error (the starting weights included).
pub fn fine_tune_cv(
    dataset: &Dataset,
    pretrained: &CrossValidation,
    hyper: &HyperParams,
    pooling: Pooling,
) -> Result<CrossValidation> {
    dataset.check_folds()?;
    let mut folds = Vec::with_capacity(pretrained.folds.len());
    for fm in &pretrained.folds {
        let train = prepare(dataset, &dataset.fold_indices(fm.train_fold), hyper.patch_size);
        let val = prepare(dataset, &dataset.fold_indices(fm.val_fold), hyper.patch_size);
        let fold = fm.test_fold;
        let score = |p: &NetworkParams| -> Result<ErrorStats> { summarize(&pooled_errors(p, &val, pooling)?) };

        let mut best = score(&fm.params)?;
        let mut best_params = fm.params.clone();
        let mut best_epoch = 0;
        let mut stale = 0;
        let mut log = vec![LogRecord {
            fold,
            stage: "finetune".into(),
            epoch: 0,
            split: "validation".into(),
            loss: None,
            angular: Some(best),
        }];
        let mut params = fm.params.clone();
        fine_tune_epochs(&mut params, &train, hyper, pooling, fold, |p, epoch, loss| {
            let stats = score(p)?;
            log.push(LogRecord {
                fold,
                stage: "finetune".into(),
                epoch,
                split: "train".into(),
                loss: Some(loss),
                angular: None,
            });
            log.push(LogRecord {
                fold,
                stage: "finetune".into(),
                epoch,
                split: "validation".into(),
                loss: None,
                angular: Some(stats),
            });
            if stats.median < best.median {
                best = stats;
                best_params = p.clone();
                best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
            }
            Ok(stale < hyper.patience)
        })?;
        folds.push(FoldModel {
            test_fold: fold,
            train_fold: fm.train_fold,
            val_fold: fm.val_fold,
            params: best_params,
            best_epoch,
            log,
        });
    }
    Ok(CrossValidation { folds })
}
