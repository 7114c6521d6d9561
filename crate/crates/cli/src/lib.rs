//! Subcommands of the `splatnet` binary.
//!
//! Each `cmd_*` function prints its report to standard output, prints
//! errors to standard error and returns the process exit code: 0 on
//! success, 1 for runtime failures and 2 for usage or configuration errors.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatnet::bcl::project;
use splatnet::checkpoint::load_checkpoint;
use splatnet::data::{
    compute_iou, load_cloud, save_cloud, shapenet_miou, split_dataset, CloudFormat, PointCloud, ShapeObject,
};
use splatnet::lattice::{LatticeConfig, SparseLattice};
use splatnet::network::{forward, parse_arch, predict, Mode, Parameters};
use splatnet::train::{DirectoryObserver, Evaluation, LogRecord, TrainObserver, Trainer};
use splatnet::{Error, FeatureMatrix, Result};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Exit code for an error: configuration and architecture problems are
/// usage errors, everything else is a runtime failure.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Arch { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn finish(result: Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path))
}

fn save(cloud: &PointCloud, path: &Path) -> Result<()> {
    save_cloud(cloud, path, CloudFormat::from_path(path))
}

fn labels<'a>(cloud: &'a PointCloud, path: &Path) -> Result<&'a [i32]> {
    cloud
        .labels()
        .ok_or_else(|| Error::Config(format!("{}: no label channel", path.display())))
}

/// Point-cloud files (`.ply`, `.xyz`, `.txt`) directly inside `dir`, sorted
/// by name.
pub fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("ply" | "xyz" | "txt")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Command-line overrides for `train`; each takes precedence over the
/// config file.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub lambda0: Option<String>,
}

struct ConsoleObserver {
    inner: DirectoryObserver,
}

impl TrainObserver for ConsoleObserver {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        println!(
            "iteration {:>6}  loss {:.6}  accuracy {:.4}",
            record.iteration, record.loss, record.accuracy
        );
        self.inner.on_log(record)
    }

    fn on_validation(&mut self, iteration: u64, evaluation: &Evaluation) -> Result<()> {
        println!(
            "iteration {iteration:>6}  validation loss {:.6}  accuracy {:.4}",
            evaluation.loss, evaluation.accuracy
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &splatnet::checkpoint::Checkpoint) -> Result<()> {
        self.inner.on_checkpoint(checkpoint)
    }
}

/// `splatnet train --config FILE`: trains on every cloud in `data_dir` and
/// writes `metrics.csv` and `checkpoint.splt` to `output_dir`.
pub fn cmd_train(config_path: &Path, overrides: &TrainOverrides) -> i32 {
    finish(train(config_path, overrides))
}

fn train(config_path: &Path, overrides: &TrainOverrides) -> Result<()> {
    let mut config = RunConfig::from_file(config_path)?;
    if let Some(seed) = overrides.seed {
        config.train.seed = seed;
    }
    if let Some(dir) = &overrides.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(lambda) = &overrides.lambda0 {
        config.lambda0 = config::parse_lambda("lambda0", lambda)?;
    }

    let files = cloud_files(&config.data_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no point clouds in {}", config.data_dir.display())));
    }
    let clouds: Vec<PointCloud> = files.iter().map(|p| load(p)).collect::<Result<_>>()?;
    let num_classes = match config.num_classes {
        Some(n) => n,
        None => {
            let mut max = -1;
            for (cloud, path) in clouds.iter().zip(&files) {
                let ignore = config.train.ignore_label;
                max = labels(cloud, path)?.iter().filter(|&&l| Some(l) != ignore).fold(max, |m, &l| m.max(l));
            }
            if max < 0 {
                return Err(Error::Config("num_classes: no labels to infer it from".into()));
            }
            max as usize + 1
        }
    };
    let spec = parse_arch(&config.arch, &config.lattice_config()?, num_classes, &config.channels())?
        .with_normalization(config.normalize);

    let (train, validation): (Vec<PointCloud>, Vec<PointCloud>) = if config.val_fraction > 0.0 {
        let parts = split_dataset(clouds.len(), &[1.0 - config.val_fraction, config.val_fraction], config.train.seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| clouds[i].clone()).collect();
        (pick(&parts[0]), pick(&parts[1]))
    } else {
        (clouds, Vec::new())
    };
    if train.is_empty() {
        return Err(Error::Config("val_fraction leaves no training clouds".into()));
    }

    let trainer = match &config.resume {
        Some(path) => {
            let checkpoint = load_checkpoint(path)?;
            if checkpoint.spec != spec {
                return Err(Error::Config(format!(
                    "resume: {} was trained with a different network configuration",
                    path.display()
                )));
            }
            Trainer::resume(checkpoint, config.train.clone(), &train, &validation)?
        }
        None => {
            let params = Parameters::init(&spec, &mut ChaCha8Rng::seed_from_u64(config.train.seed));
            Trainer::new(spec, params, config.train.clone(), &train, &validation)?
        }
    };
    let mut observer = ConsoleObserver {
        inner: DirectoryObserver::new(&config.output_dir)?,
    };
    let checkpoint_path = observer.inner.checkpoint_path().to_path_buf();
    let outcome = trainer.run(&mut observer)?;
    println!(
        "finished at iteration {}{}; checkpoint {}",
        outcome.state.iteration,
        if outcome.stopped_early { " (validation plateau)" } else { "" },
        checkpoint_path.display()
    );
    Ok(())
}

/// `splatnet predict`: labels every point of a cloud with a trained model.
/// With `probabilities`, class probabilities are added as extra channels
/// `prob_0`, `prob_1`, ...
pub fn cmd_predict(checkpoint: &Path, cloud_path: &Path, out: &Path, probabilities: bool) -> i32 {
    finish(predict_cloud(checkpoint, cloud_path, out, probabilities))
}

fn predict_cloud(checkpoint: &Path, cloud_path: &Path, out: &Path, probabilities: bool) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let mut cloud = load(cloud_path)?;
    let (probs, _) = forward(&model.spec, &model.params, &cloud, Mode::Inference)?;
    let predicted: Vec<i32> = predict(&probs).into_iter().map(|c| c as i32).collect();
    cloud = cloud.with_labels(predicted)?;
    if probabilities {
        for c in 0..probs.cols() {
            cloud.set_channel(&format!("prob_{c}"), probs.column(c))?;
        }
    }
    save(&cloud, out)?;
    println!("wrote {} predicted points to {}", cloud.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Per-class IoU and their mean over two labelled files.
    AverageIou,
    /// Class- and instance-average mIoU over `<category>/<object>` files in
    /// two directory trees.
    ShapenetMiou,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub num_classes: Option<usize>,
    pub ignore_label: Option<i32>,
    pub csv: bool,
}

/// `splatnet eval`: scores predicted labels against ground truth.
pub fn cmd_eval(pred: &Path, gt: &Path, mode: EvalMode, options: &EvalOptions) -> i32 {
    finish(match mode {
        EvalMode::AverageIou => eval_average_iou(pred, gt, options),
        EvalMode::ShapenetMiou => eval_shapenet(pred, gt, options),
    })
}

fn eval_average_iou(pred_path: &Path, gt_path: &Path, options: &EvalOptions) -> Result<()> {
    let (pred_cloud, gt_cloud) = (load(pred_path)?, load(gt_path)?);
    let (pred, gt) = (labels(&pred_cloud, pred_path)?, labels(&gt_cloud, gt_path)?);
    let num_classes = match options.num_classes {
        Some(n) => n,
        None => pred.iter().chain(gt).filter(|&&l| Some(l) != options.ignore_label).max().map_or(0, |&m| (m + 1).max(0) as usize),
    };
    let report = compute_iou(pred, gt, num_classes, options.ignore_label)?;
    if options.csv {
        print!("{}", report.to_csv());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn eval_shapenet(pred_root: &Path, gt_root: &Path, options: &EvalOptions) -> Result<()> {
    let mut categories: Vec<PathBuf> = std::fs::read_dir(gt_root)
        .map_err(|e| Error::Io {
            path: gt_root.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    categories.sort();
    let mut objects = Vec::new();
    let mut names = Vec::new();
    for dir in &categories {
        let category = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut pairs = Vec::new();
        for gt_path in cloud_files(dir)? {
            let pred_path = pred_root.join(&category).join(gt_path.file_name().unwrap_or_default());
            let (pred_cloud, gt_cloud) = (load(&pred_path)?, load(&gt_path)?);
            let (pred, gt) = (labels(&pred_cloud, &pred_path)?.to_vec(), labels(&gt_cloud, &gt_path)?.to_vec());
            if pred.len() != gt.len() {
                return Err(Error::Shape(format!(
                    "{} has {} points, {} has {}",
                    pred_path.display(),
                    pred.len(),
                    gt_path.display(),
                    gt.len()
                )));
            }
            pairs.push((pred, gt));
        }
        // Parts of a category are the ground-truth labels seen in it,
        // renumbered densely; predictions outside that set count as wrong.
        let mut parts: Vec<i32> = pairs
            .iter()
            .flat_map(|(_, gt)| gt.iter().copied())
            .filter(|&l| Some(l) != options.ignore_label)
            .collect();
        parts.sort_unstable();
        parts.dedup();
        let local = |l: i32| {
            if Some(l) == options.ignore_label {
                l
            } else {
                parts.binary_search(&l).map_or(-1, |i| i as i32)
            }
        };
        for (pred, gt) in pairs {
            let gt: Vec<i32> = gt.into_iter().map(local).collect();
            let pred = pred.into_iter().map(local).collect();
            objects.push(ShapeObject {
                category: category.clone(),
                num_parts: parts.len(),
                pred,
                gt,
            });
        }
        names.push(category);
    }
    if let Some(ignore) = options.ignore_label {
        // Ignored ground-truth points are dropped from each object.
        for o in &mut objects {
            let keep: Vec<usize> = (0..o.gt.len()).filter(|&i| o.gt[i] != ignore).collect();
            o.pred = keep.iter().map(|&i| o.pred[i]).collect();
            o.gt = keep.iter().map(|&i| o.gt[i]).collect();
        }
    }
    let report = shapenet_miou(&objects, &names)?;
    if options.csv {
        println!("category,objects,miou");
        for c in &report.per_category {
            println!("{},{},{}", c.category, c.objects, c.miou.map_or(String::new(), |m| m.to_string()));
        }
        println!("class_average,,{}", report.class_average);
        println!("instance_average,,{}", report.instance_average);
    } else {
        println!("{report}");
    }
    Ok(())
}

/// `splatnet filter`: transports `channels` from the source cloud onto the
/// destination points through a lattice over `lattice_channels`, with
/// density normalization, and writes the destination cloud.
pub fn cmd_filter(src: &Path, dst: &Path, lambda: &str, out: &Path, channels: &str, lattice_channels: &str) -> i32 {
    finish(filter(src, dst, lambda, out, channels, lattice_channels))
}

fn filter(src: &Path, dst: &Path, lambda: &str, out: &Path, channels: &str, lattice_channels: &str) -> Result<()> {
    let (source, mut destination) = (load(src)?, load(dst)?);
    let channels = config::parse_channels(channels);
    let lattice_channels = config::parse_channels(lattice_channels);
    if channels.is_empty() || lattice_channels.is_empty() {
        return Err(Error::Config("channel lists must not be empty".into()));
    }
    let cfg = lattice_config(lambda, lattice_channels.len())?;
    let features = source.select(&channels, 1)?;
    let transported = project(
        &features,
        &source.select(&lattice_channels, 1)?,
        &destination.select(&lattice_channels, 1)?,
        &cfg,
    )?;
    for (c, name) in channels.iter().enumerate() {
        let mut column = transported.column(c);
        if matches!(name.as_str(), "red" | "green" | "blue") {
            // Convex combinations of colors can leave [0, 1] by rounding.
            column.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        destination.ensure_group(name);
        destination.set_channel(name, column)?;
    }
    save(&destination, out)?;
    println!(
        "transported {} channel(s) from {} to {} points; wrote {}",
        channels.len(),
        source.len(),
        destination.len(),
        out.display()
    );
    Ok(())
}

fn lattice_config(lambda: &str, d: usize) -> Result<LatticeConfig> {
    let values = config::parse_lambda("lambda", lambda)?;
    match values.len() {
        1 => LatticeConfig::isotropic(d, values[0]),
        n if n == d => LatticeConfig::new(values),
        n => Err(Error::Config(format!("lambda has {n} values but {d} lattice channels are selected"))),
    }
}

/// `splatnet lattice-stats`: lattice size and fill for each scale in a
/// comma-separated list, one `key: value` block per scale.
pub fn cmd_lattice_stats(cloud_path: &Path, lambdas: &str, channels: &str) -> i32 {
    finish(lattice_stats(cloud_path, lambdas, channels))
}

fn lattice_stats(cloud_path: &Path, lambdas: &str, channels: &str) -> Result<()> {
    let cloud = load(cloud_path)?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no points", cloud_path.display())));
    }
    let channels = config::parse_channels(channels);
    let features: FeatureMatrix = cloud.select(&channels, 1)?;
    let lambdas = config::parse_lambda("lambda", lambdas)?;
    let mut stdout = std::io::stdout().lock();
    for (i, lambda) in lambdas.iter().enumerate() {
        let cfg = LatticeConfig::isotropic(channels.len(), *lambda)?;
        let stats = SparseLattice::build(&features, &cfg)?.stats();
        let scale: Vec<String> = cfg.scale().iter().map(f64::to_string).collect();
        let block = format!(
            "{}lambda: {lambda}\nn: {}\nd_l: {}\nscale: {}\nV: {}\noccupancy: {:.6}\nadjacency_fill: {:.6}\n",
            if i > 0 { "\n" } else { "" },
            stats.points,
            stats.dim,
            scale.join(","),
            stats.vertices,
            stats.occupancy,
            stats.adjacency_fill
        );
        stdout.write_all(block.as_bytes()).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })?;
    }
    Ok(())
}
