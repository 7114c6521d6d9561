//! Point-wise cross-entropy training with Adam.
//!
//! One iteration draws `batch_size` clouds from a per-epoch shuffle, crops
//! each to `sample_size` points, augments it, and accumulates the gradient
//! of its mean point loss. The averaged gradient drives a single Adam step.
//! Every random draw is derived from `(seed, counter)`, so a run restored
//! from a checkpoint continues exactly where the original left off.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::network::{backward, forward_input, predict, Mode, NetworkInput, NetworkSpec, Parameters};

/// Probabilities below this are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

pub const LOG_HEADER: &str = "iteration,loss,accuracy,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    /// Rotate uniformly over SO(3) instead of about the gravity axis.
    pub full_rotation: bool,
    pub translate: bool,
    pub translate_range: f64,
    pub scale: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub color_jitter: bool,
    pub jitter_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            full_rotation: false,
            translate: true,
            translate_range: 0.1,
            scale: true,
            scale_min: 0.9,
            scale_max: 1.1,
            color_jitter: false,
            jitter_range: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn none() -> Self {
        Self {
            rotate: false,
            translate: false,
            scale: false,
            color_jitter: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// A learning rate of zero freezes the model, BatchNorm running
    /// statistics included.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub augment: AugmentConfig,
    /// Points per training crop; `None` trains on whole clouds.
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub ignore_label: Option<i32>,
    pub log_interval: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Iterations between validation passes; 0 disables validation.
    pub validation_interval: u64,
    /// Stop after this many validation passes without improvement.
    pub patience: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 4,
            max_iterations: 1000,
            augment: AugmentConfig::default(),
            sample_size: None,
            seed: 0,
            ignore_label: None,
            log_interval: 10,
            checkpoint_interval: 0,
            validation_interval: 0,
            patience: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "batch_size",
    "max_iterations",
    "rotate",
    "full_rotation",
    "translate",
    "translate_range",
    "scale",
    "scale_min",
    "scale_max",
    "color_jitter",
    "jitter_range",
    "sample_size",
    "seed",
    "ignore_label",
    "log_interval",
    "checkpoint_interval",
    "validation_interval",
    "patience",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" | "" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

impl TrainConfig {
    /// Sets one field from its config-file spelling. Unknown keys are
    /// errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_iterations" => self.max_iterations = parse_value(key, value)?,
            "rotate" => a.rotate = parse_value(key, value)?,
            "full_rotation" => a.full_rotation = parse_value(key, value)?,
            "translate" => a.translate = parse_value(key, value)?,
            "translate_range" => a.translate_range = parse_value(key, value)?,
            "scale" => a.scale = parse_value(key, value)?,
            "scale_min" => a.scale_min = parse_value(key, value)?,
            "scale_max" => a.scale_max = parse_value(key, value)?,
            "color_jitter" => a.color_jitter = parse_value(key, value)?,
            "jitter_range" => a.jitter_range = parse_value(key, value)?,
            "sample_size" => self.sample_size = parse_optional(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "ignore_label" => self.ignore_label = parse_optional(key, value)?,
            "log_interval" => self.log_interval = parse_value(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, value)?,
            "validation_interval" => self.validation_interval = parse_value(key, value)?,
            "patience" => self.patience = parse_optional(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        for (key, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad("adam_epsilon", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.sample_size == Some(0) {
            return bad("sample_size", "must be at least 1");
        }
        let a = &self.augment;
        if !(a.translate_range.is_finite() && a.translate_range >= 0.0) {
            return bad("translate_range", "must be non-negative");
        }
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max && a.scale_max.is_finite()) {
            return bad("scale_min", "need 0 < scale_min <= scale_max");
        }
        if !(a.jitter_range.is_finite() && a.jitter_range >= 0.0) {
            return bad("jitter_range", "must be non-negative");
        }
        Ok(())
    }
}

/// Mean cross-entropy over points whose label is not `ignore_label`, and
/// its gradient with respect to the probabilities.
pub fn cross_entropy_loss(
    probabilities: &FeatureMatrix,
    labels: &[i32],
    ignore_label: Option<i32>,
) -> Result<(f64, FeatureMatrix)> {
    probabilities.check_rows(labels.len(), "labels")?;
    let classes = probabilities.cols();
    let mut counted = 0usize;
    for &l in labels {
        if Some(l) == ignore_label {
            continue;
        }
        if l < 0 || l as usize >= classes {
            return Err(Error::InvalidInput(format!("label {l} outside 0..{classes}")));
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::DegenerateBatch("every point carries the ignore label".into()));
    }
    let m = counted as f64;
    let mut loss = 0.0;
    let mut grad = FeatureMatrix::zeros(probabilities.rows(), classes);
    for (r, &l) in labels.iter().enumerate() {
        if Some(l) == ignore_label {
            continue;
        }
        let p = probabilities.get(r, l as usize);
        if p > PROBABILITY_FLOOR {
            loss -= p.ln();
            grad.set(r, l as usize, -1.0 / (m * p));
        } else {
            loss -= PROBABILITY_FLOOR.ln();
        }
    }
    Ok((loss / m, grad))
}

/// Adam moments, one pair per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Checks that the moments mirror the trainable tensors of `params`.
    pub fn check(&self, params: &Parameters) -> Result<()> {
        let shapes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
        let ok = self.first.len() == shapes.len()
            && self.second.len() == shapes.len()
            && self.first.iter().zip(&self.second).zip(&shapes).all(|((m, v), &n)| m.len() == n && v.len() == n)
            && self.second.iter().flatten().all(|&v| v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::shape("optimizer moments do not match the parameters"))
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both
/// `params` and `state` untouched.
pub fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut OptimizerState, config: &TrainConfig) -> Result<()> {
    state.check(params)?;
    let g = grads.trainable();
    if g.len() != state.first.len() || g.iter().zip(&state.first).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("gradient shapes do not match the parameters"));
    }
    if g.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient { iteration: state.step + 1 });
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.step.min(i32::MAX as u64) as i32);
    for (((p, g), m), v) in params
        .trainable_mut()
        .into_iter()
        .zip(g)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}

/// Random rigid motion, scaling and color perturbation, applied in that
/// order. Normals follow the rotation; labels and point count never change.
pub fn augment(cloud: &PointCloud, config: &AugmentConfig, gravity_axis: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if gravity_axis > 2 {
        return Err(Error::Config(format!("gravity axis {gravity_axis} is not 0, 1 or 2")));
    }
    if config.color_jitter && cloud.colors().is_none() {
        return Err(Error::Config("color jitter requested but the cloud has no rgb channels".into()));
    }
    let mut out = cloud.clone();
    if config.rotate {
        let r = if config.full_rotation {
            random_rotation(rng)
        } else {
            axis_rotation(gravity_axis, rng.random_range(0.0..std::f64::consts::TAU))
        };
        out.positions_mut().iter_mut().for_each(|p| *p = apply(&r, p));
        if let Some(normals) = out.normals_mut() {
            normals.iter_mut().for_each(|n| *n = apply(&r, n));
        }
    }
    if config.translate && config.translate_range > 0.0 {
        let t = config.translate_range;
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-t..=t));
        for p in out.positions_mut() {
            for k in 0..3 {
                p[k] += shift[k];
            }
        }
    }
    if config.scale {
        let s = rng.random_range(config.scale_min..=config.scale_max);
        for p in out.positions_mut() {
            p.iter_mut().for_each(|v| *v *= s);
        }
        if let Some(h) = out.height() {
            let scaled = h.iter().map(|v| v * s).collect();
            out.set_channel("height", scaled)?;
        }
    }
    if config.color_jitter && config.jitter_range > 0.0 {
        let j = config.jitter_range;
        for c in out.colors_mut().expect("checked above") {
            c.iter_mut()
                .for_each(|v| *v = (*v + rng.random_range(-j..=j)).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

type Rotation = [[f64; 3]; 3];

fn apply(r: &Rotation, p: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

fn axis_rotation(axis: usize, angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut r = [[0.0; 3]; 3];
    r[axis][axis] = 1.0;
    r[a][a] = c;
    r[a][b] = -s;
    r[b][a] = s;
    r[b][b] = c;
    r
}

/// Uniformly distributed rotation from a uniform unit quaternion.
fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Resumable progress of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Completed iterations.
    pub iteration: u64,
    pub optimizer: OptimizerState,
    pub best_validation: Option<f64>,
    pub stale_validations: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
}

impl LogRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{:.3}", self.iteration, self.loss, self.accuracy, self.wall_seconds)
    }
}

/// Loss and accuracy of a model on labelled clouds, without augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub points: usize,
}

/// Inference-mode loss and accuracy, pooled over every counted point.
pub fn evaluate(spec: &NetworkSpec, params: &Parameters, clouds: &[PointCloud], ignore_label: Option<i32>) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut points = 0usize;
    for cloud in clouds {
        let labels = cloud_labels(cloud)?;
        let input = NetworkInput::from_cloud(cloud, spec.channels())?;
        let (p, _) = forward_input(spec, params, &input, Mode::Inference)?;
        let (l, _) = cross_entropy_loss(&p, labels, ignore_label)?;
        let (c, n) = count_correct(&p, labels, ignore_label);
        loss += l * n as f64;
        correct += c;
        points += n;
    }
    if points == 0 {
        return Err(Error::EmptyEvaluation("no labelled points to evaluate".into()));
    }
    Ok(Evaluation {
        loss: loss / points as f64,
        accuracy: correct as f64 / points as f64,
        points,
    })
}

fn cloud_labels(cloud: &PointCloud) -> Result<&[i32]> {
    cloud
        .labels()
        .ok_or_else(|| Error::Config("training and evaluation clouds need a label channel".into()))
}

fn count_correct(p: &FeatureMatrix, labels: &[i32], ignore: Option<i32>) -> (usize, usize) {
    let pred = predict(p);
    let mut correct = 0;
    let mut counted = 0;
    for (&y, &l) in pred.iter().zip(labels) {
        if Some(l) == ignore {
            continue;
        }
        counted += 1;
        correct += (y as i32 == l) as usize;
    }
    (correct, counted)
}

// Independent random streams per purpose.
const STREAM_EPOCH: u64 = 1 << 56;
const STREAM_CLOUD: u64 = 2 << 56;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Receives progress from [`Trainer::run`].
pub trait TrainObserver {
    fn on_log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn on_validation(&mut self, _iteration: u64, _evaluation: &Evaluation) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Discards all progress reports.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Appends the metrics CSV and overwrites `checkpoint.splt` in a directory.
pub struct DirectoryObserver {
    log_path: PathBuf,
    checkpoint_path: PathBuf,
}

impl DirectoryObserver {
    /// Creates the directory and writes the CSV header unless the log
    /// already exists (a resumed run appends to it).
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("metrics.csv");
        if !log_path.exists() {
            std::fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(Self {
            log_path,
            checkpoint_path: dir.join("checkpoint.splt"),
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn checkpoint_path(&self) -> &Path {
        &self.checkpoint_path
    }
}

impl TrainObserver for DirectoryObserver {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.log_path)
            .map_err(|e| Error::io(&self.log_path, e))?;
        writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io(&self.log_path, e))
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        save_checkpoint(&self.checkpoint_path, checkpoint)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub state: TrainingState,
    pub log: Vec<LogRecord>,
    /// True if validation stopped the run before `max_iterations`.
    pub stopped_early: bool,
}

/// Drives training one iteration at a time.
pub struct Trainer<'a> {
    spec: NetworkSpec,
    params: Parameters,
    state: TrainingState,
    config: TrainConfig,
    train: &'a [PointCloud],
    validation: &'a [PointCloud],
    epoch: Option<(u64, Vec<usize>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: NetworkSpec,
        params: Parameters,
        config: TrainConfig,
        train: &'a [PointCloud],
        validation: &'a [PointCloud],
    ) -> Result<Self> {
        let state = TrainingState {
            iteration: 0,
            optimizer: OptimizerState::new(&params),
            best_validation: None,
            stale_validations: 0,
        };
        Self::with_state(spec, params, state, config, train, validation)
    }

    /// Continues a run saved with [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, train: &'a [PointCloud], validation: &'a [PointCloud]) -> Result<Self> {
        let state = checkpoint
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        Self::with_state(checkpoint.spec, checkpoint.params, state, config, train, validation)
    }

    fn with_state(
        spec: NetworkSpec,
        params: Parameters,
        state: TrainingState,
        config: TrainConfig,
        train: &'a [PointCloud],
        validation: &'a [PointCloud],
    ) -> Result<Self> {
        config.validate()?;
        params.check(&spec)?;
        state.optimizer.check(&params)?;
        if train.is_empty() {
            return Err(Error::EmptyInput("training set is empty".into()));
        }
        for (i, cloud) in train.iter().chain(validation).enumerate() {
            let labels = cloud_labels(cloud)?;
            if let Some(&l) = labels
                .iter()
                .find(|&&l| Some(l) != config.ignore_label && !(0..spec.num_classes() as i32).contains(&l))
            {
                return Err(Error::Config(format!(
                    "cloud {i} has label {l} but the network has {} classes",
                    spec.num_classes()
                )));
            }
        }
        Ok(Self {
            spec,
            params,
            state,
            config,
            train,
            validation,
            epoch: None,
            started: Instant::now(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self.params.clone(),
            training: Some(self.state.clone()),
        }
    }

    fn cloud_index(&mut self, draw: u64) -> usize {
        let n = self.train.len() as u64;
        let epoch = draw / n;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut stream_rng(self.config.seed, STREAM_EPOCH | epoch));
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().unwrap().1[(draw % n) as usize]
    }

    /// Runs one iteration: `batch_size` forward/backward passes and one
    /// optimizer step.
    pub fn step(&mut self) -> Result<StepReport> {
        let iteration = self.state.iteration + 1;
        let batch = self.config.batch_size;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut counted = 0usize;
        let frozen = self.config.learning_rate == 0.0;
        let gravity = self.spec.channels().gravity_axis;

        for j in 0..batch {
            let draw = (iteration - 1) * batch as u64 + j as u64;
            let source = &self.train[self.cloud_index(draw)];
            let mut rng = stream_rng(self.config.seed, STREAM_CLOUD | draw);
            let cropped;
            let cloud = match self.config.sample_size {
                Some(s) if s < source.len() => {
                    let mut idx = rand::seq::index::sample(&mut rng, source.len(), s).into_vec();
                    idx.sort_unstable();
                    cropped = source.subset(&idx);
                    &cropped
                }
                _ => source,
            };
            let cloud = augment(cloud, &self.config.augment, gravity, &mut rng)?;
            let labels = cloud_labels(&cloud)?;
            let input = NetworkInput::from_cloud(&cloud, self.spec.channels())?;
            let (p, tape) = forward_input(&self.spec, &self.params, &input, Mode::Training)?;
            let (l, g) = match cross_entropy_loss(&p, labels, self.config.ignore_label) {
                Err(Error::DegenerateBatch(_)) => continue,
                other => other?,
            };
            let cloud_grads = backward(&self.spec, &self.params, &tape, &g)?;
            grads.add_scaled(&cloud_grads.params, 1.0 / batch as f64);
            if !frozen {
                self.params.absorb_statistics(&tape);
            }
            let (c, n) = count_correct(&p, labels, self.config.ignore_label);
            loss += l;
            correct += c;
            counted += n;
        }
        if counted == 0 {
            return Err(Error::DegenerateBatch(format!(
                "iteration {iteration}: every sampled point carries the ignore label"
            )));
        }
        match adam_step(&mut self.params, &grads, &mut self.state.optimizer, &self.config) {
            Err(Error::NonFiniteGradient { .. }) => return Err(Error::NonFiniteGradient { iteration }),
            other => other?,
        }
        self.params.round_to_f32();
        self.state.iteration = iteration;
        Ok(StepReport {
            iteration,
            loss: loss / batch as f64,
            accuracy: correct as f64 / counted as f64,
        })
    }

    /// Trains until `max_iterations` or a validation plateau, reporting to
    /// `observer`. A final checkpoint is always emitted.
    pub fn run(mut self, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let mut log = Vec::new();
        let mut stopped_early = false;
        let cfg = self.config.clone();
        while self.state.iteration < cfg.max_iterations {
            let report = self.step()?;
            let it = report.iteration;
            if cfg.log_interval > 0 && (it % cfg.log_interval == 0 || it == cfg.max_iterations) {
                let record = LogRecord {
                    iteration: it,
                    loss: report.loss,
                    accuracy: report.accuracy,
                    wall_seconds: self.started.elapsed().as_secs_f64(),
                };
                observer.on_log(&record)?;
                log.push(record);
            }
            if cfg.validation_interval > 0 && it % cfg.validation_interval == 0 && !self.validation.is_empty() {
                let eval = evaluate(&self.spec, &self.params, self.validation, cfg.ignore_label)?;
                observer.on_validation(it, &eval)?;
                if self.state.best_validation.is_none_or(|b| eval.loss < b) {
                    self.state.best_validation = Some(eval.loss);
                    self.state.stale_validations = 0;
                } else {
                    self.state.stale_validations += 1;
                }
                if cfg.patience.is_some_and(|p| self.state.stale_validations >= p) {
                    stopped_early = true;
                    break;
                }
            }
            if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 && it < cfg.max_iterations {
                observer.on_checkpoint(&self.checkpoint())?;
            }
        }
        observer.on_checkpoint(&self.checkpoint())?;
        Ok(TrainOutcome {
            params: self.params,
            state: self.state,
            log,
            stopped_early,
        })
    }
}

/// Trains `params` on `train` from scratch.
pub fn train_loop(
    spec: &NetworkSpec,
    params: Parameters,
    train: &[PointCloud],
    validation: &[PointCloud],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    Trainer::new(spec.clone(), params, config.clone(), train, validation)?.run(observer)
}
