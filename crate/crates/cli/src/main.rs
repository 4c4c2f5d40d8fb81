use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use ccnn::cnn::{gradient_check, init_params, load_weights, save_weights, HyperParams, LossKind, NetworkParams};
use ccnn::estimator::{estimate_image, fine_tune_cv, log_to_jsonl, train, CrossValidation, FoldModel, Pooling};
use ccnn::evaluation::{benchmark, summarize, EstimatorKind, FoldModels};
use ccnn::image::{correct_von_kries, load_ppm16, save_illuminant_map, save_ppm16, Illuminant, LinearImage};
use ccnn::local::{angular_error_map, estimate_local_map, filter_gaussian_3x3, filter_median_3x3};
use ccnn::manifest::{Dataset, FOLDS};
use ccnn::patch::{histogram_stretch, Patch};
use ccnn::statistics::{do_nothing, minkowski_estimate, Preset};
use ccnn::sweep::{reduced_hyper, run_sweep, sweep_csv, SweepConfig, SweepParameter};
use ccnn::synth::{write_dataset, SynthConfig};
use ccnn::{Error, Result};

#[derive(Parser)]
#[command(name = "ccnn", version, about = "Patch-based illuminant estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand. A JSON file passed with `--config`
/// may set any of them; flags given on the command line take precedence.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Common {
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Weights file, or a directory of fold{k}.ccnn files.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    pooling: Option<Pooling>,
    /// DN, GW, WP, SoG, gGW, GE1, GE2 or cnn.
    #[arg(long, global = true)]
    algo: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on a single worker.
    #[arg(long, global = true)]
    #[serde(deserialize_with = "flag")]
    deterministic: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    kernel_count: Option<usize>,
    #[arg(long, global = true)]
    kernel_width: Option<usize>,
    #[arg(long, global = true)]
    pool_size: Option<usize>,
    #[arg(long, global = true)]
    fc_units: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    patches_per_image: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
}

fn flag<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    Ok(Option::<bool>::deserialize(d)?.unwrap_or(false))
}

impl Common {
    fn merged_with(self, file: Common) -> Common {
        Common {
            config: self.config,
            manifest: self.manifest.or(file.manifest),
            model: self.model.or(file.model),
            seed: self.seed.or(file.seed),
            patch_size: self.patch_size.or(file.patch_size),
            pooling: self.pooling.or(file.pooling),
            algo: self.algo.or(file.algo),
            out: self.out.or(file.out),
            threads: self.threads.or(file.threads),
            deterministic: self.deterministic || file.deterministic,
            epochs: self.epochs.or(file.epochs),
            kernel_count: self.kernel_count.or(file.kernel_count),
            kernel_width: self.kernel_width.or(file.kernel_width),
            pool_size: self.pool_size.or(file.pool_size),
            fc_units: self.fc_units.or(file.fc_units),
            learning_rate: self.learning_rate.or(file.learning_rate),
            momentum: self.momentum.or(file.momentum),
            weight_decay: self.weight_decay.or(file.weight_decay),
            batch_size: self.batch_size.or(file.batch_size),
            patches_per_image: self.patches_per_image.or(file.patches_per_image),
            patience: self.patience.or(file.patience),
        }
    }

    fn hyper(&self, base: HyperParams) -> Result<HyperParams> {
        let h = HyperParams {
            patch_size: self.patch_size.unwrap_or(base.patch_size),
            kernel_width: self.kernel_width.unwrap_or(base.kernel_width),
            kernel_count: self.kernel_count.unwrap_or(base.kernel_count),
            pool_size: self.pool_size.unwrap_or(base.pool_size),
            fc_units: self.fc_units.unwrap_or(base.fc_units),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            momentum: self.momentum.unwrap_or(base.momentum),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed.unwrap_or(base.seed),
            patches_per_image: self.patches_per_image.unwrap_or(base.patches_per_image),
            patience: self.patience.unwrap_or(base.patience),
        };
        h.validate()?;
        Ok(h)
    }

    fn patch_size(&self) -> usize {
        self.patch_size.unwrap_or(HyperParams::default().patch_size)
    }

    fn pooling(&self) -> Pooling {
        self.pooling.unwrap_or(Pooling::Median)
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| missing("--manifest"))
    }

    fn model(&self) -> Result<&Path> {
        self.model.as_deref().ok_or_else(|| missing("--model"))
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| missing("--out"))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train one network per test fold with Euclidean loss.
    Train,
    /// Fine-tune fold models with the pooled angular loss.
    Finetune,
    /// Estimate the illuminant of one image.
    Estimate { image: PathBuf },
    /// Divide out an illuminant (given or estimated) and write the result.
    Correct {
        image: PathBuf,
        /// Illuminant as r,g,b; estimated with --algo when absent.
        #[arg(long, value_delimiter = ',')]
        illuminant: Option<Vec<f64>>,
    },
    /// Per-patch illuminant map of one image.
    LocalMap {
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Filter::None)]
        filter: Filter,
        /// Per-pixel ground-truth map to score against.
        #[arg(long)]
        gt_map: Option<PathBuf>,
    },
    /// Score estimators on a dataset with per-fold models.
    Evaluate {
        /// Comma-separated estimators; defaults to DN, the presets and, when
        /// models are given, the CNN rows.
        #[arg(long, value_delimiter = ',')]
        algos: Option<Vec<String>>,
        /// Directory of fine-tuned fold models.
        #[arg(long)]
        finetuned: Option<PathBuf>,
    },
    /// Retrain across values of one architecture parameter.
    Sweep {
        #[arg(long)]
        parameter: SweepParameter,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Finite-difference check of the network gradient on a toy network.
    Gradcheck,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long)]
    rects: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    two_illuminant: bool,
    #[arg(long)]
    gray_world: bool,
    #[arg(long)]
    white_patch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Filter {
    None,
    Gaussian,
    Median,
}

fn missing(flag: &str) -> Error {
    Error::Parameter(format!("{flag} is required"))
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn fold_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}.ccnn"))
}

fn load_fold_models(dir: &Path) -> Result<std::collections::BTreeMap<usize, NetworkParams>> {
    (0..FOLDS).map(|k| Ok((k, load_weights(fold_path(dir, k))?))).collect()
}

fn save_cv(cv: &CrossValidation, dir: &Path, log_name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for f in &cv.folds {
        save_weights(&f.params, fold_path(dir, f.test_fold))?;
    }
    let log = dir.join(log_name);
    fs::write(&log, log_to_jsonl(&cv.log())).map_err(|e| io_err(&log, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn estimate_with(algo: &str, img: &LinearImage, c: &Common) -> Result<(Illuminant, serde_json::Value)> {
    match algo {
        "DN" => Ok((do_nothing(), json!({}))),
        "cnn" => {
            let params = load_weights(c.model()?)?;
            let est = estimate_image(&params, img, c.pooling(), c.patch_size())?;
            Ok((
                est.illuminant,
                json!({"patches": est.per_patch.len(), "skipped": est.skipped, "pooling": est.pooling}),
            ))
        }
        name => {
            let preset: Preset = name.parse()?;
            Ok((minkowski_estimate(img, &preset.params())?, json!({})))
        }
    }
}

fn parse_estimator(name: &str) -> Result<EstimatorKind> {
    Ok(match name {
        "DN" => EstimatorKind::DoNothing,
        "cnn-patch" => EstimatorKind::CnnPerPatch,
        "cnn-average" => EstimatorKind::CnnAverage,
        "cnn-median" => EstimatorKind::CnnMedian,
        "cnn-finetuned" => EstimatorKind::CnnFineTuned,
        other => EstimatorKind::Statistic(other.parse().map_err(|_| {
            Error::Parameter(format!(
                "unknown estimator {other:?}; expected DN, GW, WP, SoG, gGW, GE1, GE2, cnn-patch, cnn-average, cnn-median or cnn-finetuned"
            ))
        })?),
    })
}

fn run(cmd: Cmd, c: Common) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                count: a.count,
                width: a.width,
                height: a.height,
                seed: c.seed.unwrap_or(0),
                rects: a.rects.unwrap_or(d.rects),
                noise: a.noise.unwrap_or(d.noise),
                two_illuminant: a.two_illuminant,
                gray_world: a.gray_world,
                white_patch: a.white_patch,
                ..d
            };
            let dir = c.out()?;
            let m = write_dataset(&cfg, dir)?;
            print(json!({"manifest": dir.join("manifest.json"), "images": m.entries.len()}));
        }
        Cmd::Train => {
            let ds = Dataset::load(c.manifest()?)?;
            let hyper = c.hyper(HyperParams::default())?;
            let cv = train(&ds, &hyper)?;
            let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
            save_cv(&cv, &dir, "train_log.jsonl")?;
            for f in &cv.folds {
                print(fold_summary(f, &fold_path(&dir, f.test_fold)));
            }
        }
        Cmd::Finetune => {
            let ds = Dataset::load(c.manifest()?)?;
            let hyper = c.hyper(HyperParams::default())?;
            let models = load_fold_models(c.model()?)?;
            let pretrained = CrossValidation {
                folds: models
                    .into_iter()
                    .map(|(k, params)| {
                        let (train_fold, val_fold) = ccnn::estimator::fold_roles(k);
                        FoldModel {
                            test_fold: k,
                            train_fold,
                            val_fold,
                            params,
                            best_epoch: 0,
                            log: Vec::new(),
                        }
                    })
                    .collect(),
            };
            let cv = fine_tune_cv(&ds, &pretrained, &hyper, c.pooling())?;
            let dir = c.out()?;
            save_cv(&cv, dir, "finetune_log.jsonl")?;
            for f in &cv.folds {
                print(fold_summary(f, &fold_path(dir, f.test_fold)));
            }
        }
        Cmd::Estimate { image } => {
            let img = load_ppm16(&image)?;
            let algo = c.algo.as_deref().unwrap_or("cnn");
            let (ill, extra) = estimate_with(algo, &img, &c)?;
            print(json!({"image": image, "algo": algo, "illuminant": ill.rgb(), "details": extra}));
        }
        Cmd::Correct { image, illuminant } => {
            let img = load_ppm16(&image)?;
            let ill = match illuminant {
                Some(v) => {
                    let rgb: [f64; 3] = v.as_slice().try_into().map_err(|_| {
                        Error::Parameter(format!("--illuminant needs 3 values, got {}", v.len()))
                    })?;
                    Illuminant::normalize(rgb)?
                }
                None => estimate_with(c.algo.as_deref().unwrap_or("GW"), &img, &c)?.0,
            };
            let corrected = correct_von_kries(&img, &ill)?;
            let out = c.out()?;
            save_ppm16(&corrected.image, out)?;
            print(json!({"out": out, "illuminant": ill.rgb(), "saturated": corrected.saturated}));
        }
        Cmd::LocalMap { image, filter, gt_map } => {
            let img = load_ppm16(&image)?;
            let params = load_weights(c.model()?)?;
            let ps = c.patch_size();
            let raw = estimate_local_map(&params, &img, ps)?;
            let map = match filter {
                Filter::None => raw,
                Filter::Gaussian => filter_gaussian_3x3(&raw)?,
                Filter::Median => filter_median_3x3(&raw)?,
            };
            let stem = c.out()?;
            let with_ext = |ext: &str| {
                let mut s = stem.as_os_str().to_owned();
                s.push(ext);
                PathBuf::from(s)
            };
            save_illuminant_map(&map, with_ext(".ppm"))?;
            let csv = with_ext(".csv");
            fs::write(&csv, map.to_csv()).map_err(|e| io_err(&csv, e))?;
            let mut report = json!({"grid": [map.grid_w(), map.grid_h()], "map": with_ext(".ppm"), "csv": csv});
            if let Some(gt) = gt_map {
                let gt = ccnn::image::load_illuminant_map(gt, 1)?.majority_downsample(ps)?;
                let errors = angular_error_map(&map, &gt)?;
                report["errors"] = serde_json::to_value(summarize(&errors.degrees)?)?;
            }
            print(report);
        }
        Cmd::Evaluate { algos, finetuned } => {
            let ds = Dataset::load(c.manifest()?)?;
            let mut models = FoldModels::default();
            if let Some(dir) = &c.model {
                models.pretrained = load_fold_models(dir)?;
            }
            if let Some(dir) = &finetuned {
                models.finetuned = load_fold_models(dir)?;
            }
            let kinds = match algos {
                Some(names) => names.iter().map(|n| parse_estimator(n)).collect::<Result<Vec<_>>>()?,
                None => {
                    let mut k = vec![EstimatorKind::DoNothing];
                    k.extend(Preset::ALL.iter().map(|p| EstimatorKind::Statistic(*p)));
                    if !models.pretrained.is_empty() {
                        k.extend([EstimatorKind::CnnAverage, EstimatorKind::CnnMedian]);
                    }
                    if !models.finetuned.is_empty() {
                        k.push(EstimatorKind::CnnFineTuned);
                    }
                    k
                }
            };
            let report = benchmark(&ds, &kinds, &models, c.patch_size())?;
            if let Some(stem) = &c.out {
                report.write(stem)?;
            }
            print!("{}", report.to_table());
        }
        Cmd::Sweep { parameter, values } => {
            let ds = Dataset::load(c.manifest()?)?;
            let cfg = SweepConfig {
                parameter,
                values,
                base: c.hyper(reduced_hyper())?,
                pooling: c.pooling(),
            };
            let points = run_sweep(&ds, &cfg)?;
            let csv = sweep_csv(parameter, &points);
            if let Some(out) = &c.out {
                fs::write(out, &csv).map_err(|e| io_err(out, e))?;
            }
            print!("{csv}");
        }
        Cmd::Gradcheck => {
            let hyper = HyperParams {
                patch_size: 8,
                kernel_count: 4,
                pool_size: 4,
                fc_units: 5,
                ..HyperParams::default()
            };
            let seed = c.seed.unwrap_or(0);
            let mut params = init_params(&hyper, seed)?;
            params.out_b.data_mut().copy_from_slice(&[0.5, 0.6, 0.4]);
            let img = LinearImage::from_fn(8, 8, |x, y| {
                let t = (x * 8 + y) as f64 + seed as f64;
                [(t * 0.37).sin().abs(), (t * 0.61).cos().abs(), (t * 0.23).sin().abs()]
            })?;
            let patch = histogram_stretch(&Patch::from_image(&img, (0, 0), 8));
            let gt = Illuminant::normalize([0.3, 0.5, 0.4])?;
            let mut worst = 0.0f64;
            for loss in [LossKind::Euclidean, LossKind::Angular] {
                let report = gradient_check(&params, &patch, &gt, loss)?;
                worst = worst.max(report.max_error());
                print(json!({"loss": loss, "max_rel_error": report.max_error(), "layers": report.layers}));
            }
            if worst >= 1e-3 {
                return Err(Error::NumericFault(format!("gradient check failed: max relative error {worst:e}")));
            }
        }
    }
    Ok(())
}

fn fold_summary(f: &FoldModel, path: &Path) -> serde_json::Value {
    json!({"fold": f.test_fold, "train_fold": f.train_fold, "val_fold": f.val_fold, "best_epoch": f.best_epoch, "model": path})
}

fn configure_threads(c: &Common) -> Result<()> {
    let threads = if c.deterministic { Some(1) } else { c.threads };
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Parameter(format!("cannot start {n} worker threads: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let common = match &cli.common.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                let file: Common = serde_json::from_str(&text)?;
                cli.common.clone().merged_with(file)
            }
            None => cli.common.clone(),
        };
        configure_threads(&common)?;
        run(cli.cmd, common)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
