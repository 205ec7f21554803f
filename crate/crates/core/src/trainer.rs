//! Adversarially augmented training loop, ablation and weather-mixing studies.
//!
//! Each batch first perturbs its tuples against the current (frozen) weights,
//! then takes gradient steps on the sample set selected by [`MixMode`]. Every
//! pipeline stage and update is written to an [`AuditSink`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Dataset, SampleTuple, Weather};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::loss::LossParams;
use crate::model::{ArchDescriptor, PoseModel, PoseRegressor};
use crate::perturb::{
    compute_threshold, mix_seed, perturb_batch, Method, PerturbOptions, PerturberConfig, StageEvent,
};
use crate::storage::{write_checkpoint, CheckpointMeta};
use crate::synth::{generate_dataset, Scene, TrajectorySpec, WeatherTable};

/// Which samples a batch trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// A step on the original tuples followed by a step on their perturbed copies.
    #[default]
    OriginalPlusAdversarial,
    AdversarialOnly,
    OriginalOnly,
}

/// Pixel range the threshold is computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSchedule {
    #[default]
    PerBatch,
    /// One threshold from the whole training set, fixed for the epoch.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_tuples: usize,
    pub lr: f64,
    pub perturber: PerturberConfig,
    #[serde(default)]
    pub mix_mode: MixMode,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub threshold_schedule: ThresholdSchedule,
    #[serde(default)]
    pub loss: LossParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_tuples: 8,
            lr: 1e-3,
            perturber: PerturberConfig::rada(),
            mix_mode: MixMode::OriginalPlusAdversarial,
            seed: 0,
            checkpoint_every: 0,
            threshold_schedule: ThresholdSchedule::PerBatch,
            loss: LossParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_tuples == 0 {
            return Err(Error::invalid("epochs and batch_tuples must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        self.perturber.validate()?;
        self.loss.validate()
    }

    /// Same settings without any augmentation.
    pub fn baseline(&self) -> Self {
        TrainConfig {
            perturber: PerturberConfig::none(),
            mix_mode: MixMode::OriginalOnly,
            ..self.clone()
        }
    }

    fn perturbs(&self) -> bool {
        self.mix_mode != MixMode::OriginalOnly && self.perturber.method != Method::None
    }
}

/// One line of the training audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AuditEvent {
    Stage(StageEvent),
    Update(UpdateEvent),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename = "update")]
pub struct UpdateEvent {
    /// `original` or `adversarial`.
    pub samples: String,
    pub loss: f64,
    /// Largest perturbation magnitude of this batch (0 without augmentation).
    pub max_abs_delta: f64,
    pub checksum_after: String,
}

pub trait AuditSink {
    fn record(&mut self, rec: AuditRecord) -> Result<()>;
}

impl AuditSink for Vec<AuditRecord> {
    fn record(&mut self, rec: AuditRecord) -> Result<()> {
        self.push(rec);
        Ok(())
    }
}

/// Discards everything.
pub struct NullAudit;

impl AuditSink for NullAudit {
    fn record(&mut self, _: AuditRecord) -> Result<()> {
        Ok(())
    }
}

/// Newline-delimited JSON.
pub struct JsonLinesAudit<W: Write>(pub W);

impl<W: Write> AuditSink for JsonLinesAudit<W> {
    fn record(&mut self, rec: AuditRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, &rec)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// Where and how checkpoints are written.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean pre-update loss over every step of the epoch.
    pub mean_loss: f64,
    pub steps: usize,
    /// Threshold realised for each batch (empty when thresholding is off).
    pub eta_th: Vec<f64>,
    pub max_abs_delta: f64,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub total_steps: u64,
    /// Digest of the tuple order consumed, to check that runs saw the same batches.
    pub batch_order_digest: String,
    pub final_loss_params: LossParams,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Seeded permutation of `0..n` used for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Smallest output scale; keeps near-constant pose components trainable.
const MIN_OUTPUT_SCALE: f64 = 1e-2;

/// Fresh regressor whose output affine standardises the training poses, so
/// the untrained network predicts their mean.
pub fn init_model(arch: &ArchDescriptor, seed: u64, train: &Dataset) -> Result<PoseRegressor> {
    if train.frames().is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut model = PoseRegressor::new(arch.clone(), seed)?;
    let n = train.frames().len() as f64;
    let mut mean = [0.0; 6];
    for f in train.frames() {
        for (m, v) in mean.iter_mut().zip(f.pose.to_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 6];
    for f in train.frames() {
        for ((s, v), m) in var.iter_mut().zip(f.pose.to_array()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    model.set_output_affine(mean, var.map(|v| v.sqrt().max(MIN_OUTPUT_SCALE)))?;
    Ok(model)
}

/// Trained weights plus everything observed along the way.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PoseRegressor,
    pub loss: LossParams,
    pub report: TrainReport,
}

pub fn run_training(
    dataset: &Dataset,
    model: PoseRegressor,
    cfg: &TrainConfig,
    audit: &mut dyn AuditSink,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.dims() != model.input_dims() {
        return Err(Error::shape(model.input_dims(), dataset.dims()));
    }
    if dataset.tuples().is_empty() {
        return Err(Error::invalid("dataset has no tuples"));
    }
    let mut model = model;
    let mut loss = cfg.loss;
    let mut order_hash = Sha256::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut total_steps = 0u64;
    let tuples = dataset.tuples();
    let save = |model: &PoseRegressor, loss: &LossParams, name: &str, steps: u64| -> Result<Option<PathBuf>> {
        let Some(policy) = checkpoints else { return Ok(None) };
        std::fs::create_dir_all(&policy.dir)?;
        let path = policy.dir.join(name);
        let meta = CheckpointMeta {
            seed: cfg.seed,
            steps,
            config_hash: policy.config_hash.clone(),
        };
        write_checkpoint(&path, model, loss, &meta)?;
        Ok(Some(path))
    };
    // Numeric failures keep the last finite weights as `last_good.ckpt`.
    let abort = |err: Error, good: &PoseRegressor, good_loss: &LossParams, epoch: usize, batch: usize, steps: u64| {
        if !err.is_numeric() {
            return err;
        }
        match save(good, good_loss, "last_good.ckpt", steps) {
            Ok(last_checkpoint) => Error::TrainingAborted {
                epoch,
                batch,
                reason: err.to_string(),
                last_checkpoint,
            },
            Err(e) => e,
        }
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, tuples.len());
        for &i in &order {
            order_hash.update((i as u64).to_le_bytes());
        }
        let epoch_th = match cfg.threshold_schedule {
            ThresholdSchedule::PerEpoch if cfg.perturbs() && cfg.perturber.use_threshold => {
                Some(compute_threshold(dataset.frames().iter().map(|f| f.pixels.as_ref()), cfg.perturber.eta)?)
            }
            _ => None,
        };
        let mut stats = EpochStats {
            epoch,
            mean_loss: 0.0,
            steps: 0,
            eta_th: Vec::new(),
            max_abs_delta: 0.0,
            wall_clock_secs: 0.0,
        };
        let mut loss_sum = 0.0;

        for (b, chunk) in order.chunks(cfg.batch_tuples).enumerate() {
            let batch: Vec<SampleTuple> = chunk.iter().map(|&i| tuples[i].clone()).collect();
            let (adversarial, max_abs_delta) = if cfg.perturbs() {
                let before = model.checksum();
                let pb = perturb_batch(
                    &model,
                    &batch,
                    &loss,
                    &cfg.perturber,
                    PerturbOptions {
                        stream: mix_seed(epoch as u64, b as u64),
                        fixed_threshold: epoch_th,
                    },
                )
                .map_err(|e| abort(e, &model, &loss, epoch, b, total_steps))?;
                if model.checksum() != before {
                    return Err(Error::invalid("weights changed while generating perturbations"));
                }
                for ev in &pb.events {
                    if let StageEvent::Threshold { eta_th, .. } = ev {
                        stats.eta_th.push(*eta_th);
                    }
                    audit.record(AuditRecord {
                        epoch,
                        batch: b,
                        event: AuditEvent::Stage(ev.clone()),
                    })?;
                }
                let m = pb.max_abs_delta();
                (Some(pb.tuples), m)
            } else {
                (None, 0.0)
            };
            stats.max_abs_delta = stats.max_abs_delta.max(max_abs_delta);

            let sets: Vec<(&str, &[SampleTuple])> = match (cfg.mix_mode, &adversarial) {
                (MixMode::OriginalOnly, _) | (_, None) => vec![("original", &batch)],
                (MixMode::AdversarialOnly, Some(adv)) => vec![("adversarial", adv)],
                (MixMode::OriginalPlusAdversarial, Some(adv)) => vec![("original", &batch), ("adversarial", adv)],
            };
            for (name, set) in sets {
                let before_step = model.clone();
                let out = match model.train_step(set, &loss, cfg.lr) {
                    Ok(out) => out,
                    Err(e) => return Err(abort(e, &model, &loss, epoch, b, total_steps)),
                };
                if !model.params().iter().all(|p| p.is_finite()) || !(out.params.beta.is_finite() && out.params.gamma.is_finite()) {
                    let err = Error::NonFinite("weights after update".into());
                    return Err(abort(err, &before_step, &loss, epoch, b, total_steps));
                }
                loss = out.params;
                loss_sum += out.loss;
                stats.steps += 1;
                total_steps += 1;
                audit.record(AuditRecord {
                    epoch,
                    batch: b,
                    event: AuditEvent::Update(UpdateEvent {
                        samples: name.to_string(),
                        loss: out.loss,
                        max_abs_delta,
                        checksum_after: model.checksum(),
                    }),
                })?;
            }
        }
        stats.mean_loss = loss_sum / stats.steps as f64;
        stats.wall_clock_secs = started.elapsed().as_secs_f64();
        epochs.push(stats);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save(&model, &loss, &format!("epoch_{:04}.ckpt", epoch + 1), total_steps)?;
        }
    }

    let final_checkpoint = save(&model, &loss, "final.ckpt", total_steps)?;
    Ok(TrainOutcome {
        model,
        loss,
        report: TrainReport {
            epochs,
            total_steps,
            batch_order_digest: hex::encode(order_hash.finalize()),
            final_loss_params: loss,
            final_checkpoint,
        },
    })
}


#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Complete,
    NoClip,
    NoThreshold,
    NoThresholdNoClip,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Complete,
        AblationVariant::NoClip,
        AblationVariant::NoThreshold,
        AblationVariant::NoThresholdNoClip,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::Complete => "complete",
            AblationVariant::NoClip => "no_clip",
            AblationVariant::NoThreshold => "no_threshold",
            AblationVariant::NoThresholdNoClip => "no_threshold_no_clip",
        }
    }

    pub fn apply(&self, base: &PerturberConfig) -> PerturberConfig {
        let (threshold, clip) = match self {
            AblationVariant::Complete => (true, true),
            AblationVariant::NoClip => (true, false),
            AblationVariant::NoThreshold => (false, true),
            AblationVariant::NoThresholdNoClip => (false, false),
        };
        PerturberConfig {
            use_threshold: threshold,
            use_clip: clip,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub variant: AblationVariant,
    pub outcome: TrainOutcome,
    pub eval: EvalResult,
}

/// Trains the four threshold/clip variants from the same initial weights and seed.
pub fn run_ablation(
    train: &Dataset,
    test: &Dataset,
    arch: &ArchDescriptor,
    model_seed: u64,
    base: &TrainConfig,
) -> Result<Vec<AblationEntry>> {
    base.validate()?;
    let init = init_model(arch, model_seed, train)?;
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                perturber: variant.apply(&base.perturber),
                ..base.clone()
            };
            let outcome = run_training(train, init.clone(), &cfg, &mut NullAudit, None)?;
            let eval = evaluate(&outcome.model, test)?;
            Ok(AblationEntry { variant, outcome, eval })
        })
        .collect()
}

/// Layout of a weather-mixing study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSpec {
    pub source: Weather,
    pub target: Weather,
    pub fractions: Vec<f64>,
    pub train: TrajectorySpec,
    pub test: TrajectorySpec,
    pub tuple_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub t_err: f64,
    pub r_err: f64,
}

impl ErrorPair {
    fn of(r: &EvalResult) -> Self {
        ErrorPair {
            t_err: r.overall.mean_t_err,
            r_err: r.overall.mean_r_err,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub fraction: f64,
    /// Target-weather frames in the training set.
    pub target_frames: usize,
    pub baseline_target: ErrorPair,
    pub rada_target: ErrorPair,
    pub baseline_source: ErrorPair,
    pub rada_source: ErrorPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingTable {
    pub source: Weather,
    pub target: Weather,
    pub rows: Vec<MixingRow>,
}

const MIXING_HEADER: &str = "fraction,target_frames,baseline_target_t,baseline_target_r,rada_target_t,rada_target_r,\
baseline_source_t,baseline_source_r,rada_source_t,rada_source_r";

impl MixingTable {
    /// CSV with a `# source=..,target=..` comment line; floats are written losslessly.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# source={},target={}\n{MIXING_HEADER}\n", self.source, self.target);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.fraction,
                r.target_frames,
                r.baseline_target.t_err,
                r.baseline_target.r_err,
                r.rada_target.t_err,
                r.rada_target.r_err,
                r.baseline_source.t_err,
                r.baseline_source.r_err,
                r.rada_source.t_err,
                r.rada_source.r_err
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: String| Error::invalid(format!("mixing table: {m}"));
        let meta = lines.next().ok_or_else(|| bad("empty".into()))?;
        let meta = meta.strip_prefix("# ").ok_or_else(|| bad("missing metadata line".into()))?;
        let mut kv = BTreeMap::new();
        for part in meta.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("bad metadata `{part}`")))?;
            kv.insert(k, v);
        }
        let weather = |k: &str| -> Result<Weather> {
            kv.get(k).ok_or_else(|| bad(format!("missing {k}")))?.parse()
        };
        let (source, target) = (weather("source")?, weather("target")?);
        if lines.next() != Some(MIXING_HEADER) {
            return Err(bad("unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 10 {
                return Err(bad(format!("row {} has {} columns", n + 1, cols.len())));
            }
            let f = |i: usize| -> Result<f64> {
                cols[i]
                    .parse()
                    .map_err(|_| bad(format!("row {} column {}: `{}`", n + 1, i + 1, cols[i])))
            };
            let pair = |i: usize| -> Result<ErrorPair> {
                Ok(ErrorPair {
                    t_err: f(i)?,
                    r_err: f(i + 1)?,
                })
            };
            rows.push(MixingRow {
                fraction: f(0)?,
                target_frames: cols[1]
                    .parse()
                    .map_err(|_| bad(format!("row {} frame count `{}`", n + 1, cols[1])))?,
                baseline_target: pair(2)?,
                rada_target: pair(4)?,
                baseline_source: pair(6)?,
                rada_source: pair(8)?,
            });
        }
        Ok(MixingTable { source, target, rows })
    }
}

/// For each fraction, trains a baseline and an augmented model on a
/// source/target weather mix and evaluates both on pure source and pure
/// target test sets.
pub fn run_mixing_study(
    scene: &Scene,
    weathers: &WeatherTable,
    spec: &MixingSpec,
    arch: &ArchDescriptor,
    model_seed: u64,
    cfg: &TrainConfig,
) -> Result<MixingTable> {
    cfg.validate()?;
    if spec.source == spec.target {
        return Err(Error::invalid("source and target weather must differ"));
    }
    if spec.fractions.is_empty() || spec.fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(Error::invalid(format!("fractions must lie in [0, 1): {:?}", spec.fractions)));
    }
    let single = |w: Weather| BTreeMap::from([(w, 1.0)]);
    let target_test = generate_dataset(scene, &spec.test, &single(spec.target), weathers, spec.tuple_len)?;
    let source_test = generate_dataset(scene, &spec.test, &single(spec.source), weathers, spec.tuple_len)?;
    let baseline_cfg = cfg.baseline();

    let mut rows = Vec::with_capacity(spec.fractions.len());
    for &fraction in &spec.fractions {
        let mut mix = BTreeMap::from([(spec.source, 1.0 - fraction)]);
        if fraction > 0.0 {
            mix.insert(spec.target, fraction);
        }
        let train = generate_dataset(scene, &spec.train, &mix, weathers, spec.tuple_len)?;
        let target_frames = train.frames().iter().filter(|f| f.weather == spec.target).count();
        let init = init_model(arch, model_seed, &train)?;
        let base = run_training(&train, init.clone(), &baseline_cfg, &mut NullAudit, None)?;
        let rada = run_training(&train, init, cfg, &mut NullAudit, None)?;
        rows.push(MixingRow {
            fraction,
            target_frames,
            baseline_target: ErrorPair::of(&evaluate(&base.model, &target_test)?),
            rada_target: ErrorPair::of(&evaluate(&rada.model, &target_test)?),
            baseline_source: ErrorPair::of(&evaluate(&base.model, &source_test)?),
            rada_source: ErrorPair::of(&evaluate(&rada.model, &source_test)?),
        });
    }
    Ok(MixingTable {
        source: spec.source,
        target: spec.target,
        rows,
    })
}

/// Writes a training report as pretty JSON.
pub fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
