//! One function per subcommand. Each creates a run directory, writes its
//! outputs there and finishes with a manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use radaug_core::analysis::{compare_methods, mean_histogram, MethodComparison};
use radaug_core::domain::{Dataset, LandmarkMask, Weather};
use radaug_core::eval::{evaluate, export_trajectory, EvalResult};
use radaug_core::perturb::{Method, PerturberConfig};
use radaug_core::storage::{
    dataset_digest, directory_sha256, read_checkpoint, read_dataset, write_dataset, write_png,
};
use radaug_core::synth::{generate_dataset, generate_scene};
use radaug_core::trainer::{
    init_model, run_ablation, run_mixing_study, run_training, write_report, AblationEntry, CheckpointPolicy,
    JsonLinesAudit, MixingTable, TrainReport,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, SplitSpec};
use crate::error::CliError;
use crate::run::{output_root, RunDir, RunManifest};

/// What a finished command leaves behind.
#[derive(Debug)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn start(cfg: &ExperimentConfig, out: Option<&Path>, command: &str) -> Result<RunDir, CliError> {
    let root = output_root(out, cfg.output_dir.as_deref());
    let run = RunDir::create(&root, command, cfg.train.seed)?;
    write_json(&run.join("config.json"), cfg)?;
    Ok(run)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(radaug_core::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Renders one split of the configured scene.
pub fn build_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset, CliError> {
    let spec: &SplitSpec = match split {
        Split::Train => &cfg.data.train,
        Split::Test => &cfg.data.test,
    };
    let scene = generate_scene(&cfg.scene)?;
    Ok(generate_dataset(
        &scene,
        &spec.trajectory,
        &spec.weather_mix,
        &cfg.weathers,
        cfg.data.tuple_len,
    )?)
}

/// A dataset directory, or a `gen-data` run directory holding `train/` and `test/`.
fn split_dir(data: &Path, split: Split) -> PathBuf {
    if data.join("manifest.json").is_file() {
        data.to_path_buf()
    } else {
        data.join(split.name())
    }
}

/// The split from `data` when given, otherwise rendered from the config.
/// Also returns the hash recorded in the run manifest.
fn obtain_split(
    cfg: Option<&ExperimentConfig>,
    data: Option<&Path>,
    split: Split,
) -> Result<(Dataset, String), CliError> {
    match (data, cfg) {
        (Some(dir), _) => {
            let dir = split_dir(dir, split);
            let (ds, _) = read_dataset(&dir)?;
            Ok((ds, directory_sha256(&dir)?))
        }
        (None, Some(cfg)) => {
            let ds = build_split(cfg, split)?;
            let digest = dataset_digest(&ds);
            Ok((ds, digest))
        }
        (None, None) => Err(CliError::Config("either --data or --config is required".into())),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    // render before touching the filesystem so a bad spec leaves nothing behind
    let train = build_split(cfg, Split::Train)?;
    let test = build_split(cfg, Split::Test)?;
    let run = start(cfg, out, "gen-data")?;
    let mut summary = String::new();
    for (split, ds, spec) in [(Split::Train, &train, &cfg.data.train), (Split::Test, &test, &cfg.data.test)] {
        let generation = json!({
            "scene": cfg.scene,
            "trajectory": spec.trajectory,
            "weather_mix": spec.weather_mix,
            "weathers": cfg.weathers,
        });
        write_dataset(ds, &run.join(split.name()), generation)?;
        let _ = writeln!(
            summary,
            "{}: {} frames, {} tuples, {:?}",
            split.name(),
            ds.frames().len(),
            ds.tuples().len(),
            ds.metadata().weather_counts
        );
    }
    finish(run, cfg, None, summary)
}

fn finish(run: RunDir, cfg: &ExperimentConfig, input: Option<String>, summary: String) -> Result<Outcome, CliError> {
    let run_dir = run.path().to_path_buf();
    let manifest = run.finish(&cfg.hash(), input)?;
    Ok(Outcome {
        run_dir,
        manifest,
        summary,
    })
}

/// Trains from the config's train split (or `data`), writing checkpoints,
/// the audit log and the report.
pub fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, out: Option<&Path>) -> Result<Outcome, CliError> {
    let (train, input_hash) = obtain_split(Some(cfg), data, Split::Train)?;
    let model = init_model(&cfg.model.arch, cfg.model.seed, &train)?;
    let run = start(cfg, out, "train")?;
    let policy = CheckpointPolicy {
        dir: run.join("checkpoints"),
        config_hash: cfg.hash(),
    };
    let result = {
        let file = fs::File::create(run.join("audit.ndjson"))?;
        let mut audit = JsonLinesAudit(BufWriter::new(file));
        let r = run_training(&train, model, &cfg.train, &mut audit, Some(&policy));
        std::io::Write::flush(&mut audit.0)?;
        r
    };
    match result {
        Ok(outcome) => {
            write_report(&run.join("report.json"), &outcome.report)?;
            let summary = train_summary(&outcome.report);
            finish(run, cfg, Some(input_hash), summary)
        }
        Err(e) => {
            // keep the partial run inventoried before reporting the failure
            run.finish(&cfg.hash(), Some(input_hash))?;
            Err(e.into())
        }
    }
}

fn train_summary(report: &TrainReport) -> String {
    let mut s = String::new();
    for e in &report.epochs {
        let th = if e.eta_th.is_empty() {
            String::from("-")
        } else {
            let lo = e.eta_th.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = e.eta_th.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            format!("{lo:.2}..{hi:.2}")
        };
        let _ = writeln!(
            s,
            "epoch {:>3}  loss {:>10.4}  steps {:>4}  eta_th {th}  max|delta| {:.3}  {:.1}s",
            e.epoch + 1,
            e.mean_loss,
            e.steps,
            e.max_abs_delta,
            e.wall_clock_secs
        );
    }
    if let Some(p) = &report.final_checkpoint {
        let _ = writeln!(s, "checkpoint {}", p.display());
    }
    s
}

/// Evaluates a checkpoint on the test split: JSON metrics, trajectory CSV and plot.
pub fn cmd_eval(
    cfg: Option<&ExperimentConfig>,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<Outcome, CliError> {
    let (model, _) = read_checkpoint(checkpoint)?;
    let (test, input_hash) = obtain_split(cfg, data, Split::Test)?;
    let result = evaluate(&model, &test)?;
    let fallback;
    let cfg = match cfg {
        Some(c) => c,
        None => {
            fallback = standalone_config(checkpoint);
            &fallback
        }
    };
    let run = start(cfg, out, "eval")?;
    write_json(&run.join("eval.json"), &result)?;
    export_trajectory(&model, &test, &run.join("trajectory.csv"), Some(&run.join("trajectory.png")))?;
    finish(run, cfg, Some(input_hash), result.table())
}

/// Minimal config recorded for commands run without `--config`.
fn standalone_config(checkpoint: &Path) -> ExperimentConfig {
    let text = format!(
        r#"{{"data": {{"tuple_len": 2,
              "train": {{"trajectory": {{"frames": 2}}, "weather_mix": {{"overcast": 1.0}}}},
              "test": {{"trajectory": {{"frames": 2}}, "weather_mix": {{"overcast": 1.0}}}}}},
            "train": {{"epochs": 1, "batch_tuples": 1, "lr": 1.0,
              "perturber": {{"method": "none", "epsilon": 0.0, "pow": 0.0, "eta": 1,
                "use_threshold": false, "use_clip": false, "gaussian_mean": 0.0, "gaussian_var": 0.0}}}},
            "output_dir": null, "seed": null}}"#
    );
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).expect("static config parses");
    cfg.output_dir = None;
    let _ = checkpoint;
    cfg
}

/// Per-method histogram summary written to `histograms.json`.
#[derive(Debug, Serialize)]
struct MethodSummary<'a> {
    method: Method,
    config: &'a PerturberConfig,
    mean_grid: Option<[[f64; 3]; 3]>,
    mean_entropy: f64,
    mean_concentration_ratio: Option<f64>,
    frames: Vec<&'a MethodComparison>,
}

/// Perturbation histograms and concentration for each configured method on
/// evenly spaced test tuples.
pub fn cmd_histogram(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<Outcome, CliError> {
    let (model, loss) = read_checkpoint(checkpoint)?;
    let (test, input_hash) = obtain_split(Some(cfg), data, Split::Test)?;
    let a = &cfg.analysis;
    if a.methods.is_empty() || a.frames == 0 {
        return Err(CliError::Config("analysis needs at least one method and one frame".into()));
    }
    let tuples = test.tuples();
    let n = a.frames.min(tuples.len());
    let picks: Vec<usize> = (0..n).map(|k| k * tuples.len() / n).collect();

    let mut per_method: Vec<Vec<MethodComparison>> = vec![Vec::new(); a.methods.len()];
    for &ti in &picks {
        let tuple = &tuples[ti];
        let masks = tuple
            .samples()
            .iter()
            .map(|s| mask_for(&test, s.frame_index))
            .collect::<Result<Vec<_>, _>>()?;
        let results = compare_methods(&model, tuple, &masks, &loss, &a.methods, a.threshold_abs, a.mode)?;
        for (slot, r) in per_method.iter_mut().zip(results) {
            slot.push(r);
        }
    }

    let run = start(cfg, out, "histogram")?;
    fs::create_dir_all(run.join("strips"))?;
    let mut summaries = Vec::new();
    let mut summary = String::new();
    for (cfg_m, results) in a.methods.iter().zip(&per_method) {
        let hists: Vec<_> = results.iter().flat_map(|r| r.histograms.iter().copied()).collect();
        let ratios: Vec<f64> = results
            .iter()
            .flat_map(|r| r.reports.iter().filter_map(|c| c.concentration_ratio))
            .collect();
        let mean_ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
        let mean_entropy = hists.iter().map(|h| h.entropy()).sum::<f64>() / hists.len().max(1) as f64;
        for r in results.iter().take(4) {
            let name = format!("strips/{}_{:06}.png", cfg_m.method.as_str(), r.frames[0]);
            write_png(&run.join(&name), &r.strip)?;
        }
        let _ = writeln!(
            summary,
            "{:<9} entropy {:.4}  concentration {}",
            cfg_m.method.as_str(),
            mean_entropy,
            mean_ratio.map_or("undefined".to_string(), |r| format!("{r:.3}"))
        );
        summaries.push(MethodSummary {
            method: cfg_m.method,
            config: cfg_m,
            mean_grid: mean_histogram(&hists),
            mean_entropy,
            mean_concentration_ratio: mean_ratio,
            frames: results.iter().collect(),
        });
    }
    write_json(&run.join("histograms.json"), &summaries)?;
    finish(run, cfg, Some(input_hash), summary)
}

fn mask_for(ds: &Dataset, frame_index: u64) -> Result<LandmarkMask, CliError> {
    ds.frames()
        .iter()
        .position(|f| f.frame_index == frame_index)
        .map(|i| ds.masks()[i].clone())
        .ok_or_else(|| CliError::Config(format!("frame {frame_index} has no landmark mask")))
}

/// Rows of `ablation.csv`: variant, weather, t_err, r_err.
pub fn ablation_csv(entries: &[AblationEntry]) -> String {
    let mut s = String::from("variant,weather,t_err,r_err\n");
    for e in entries {
        for (w, st) in &e.eval.per_weather {
            let _ = writeln!(s, "{},{},{},{}", e.variant.as_str(), w.as_str(), st.mean_t_err, st.mean_r_err);
        }
        let o = &e.eval.overall;
        let _ = writeln!(s, "{},average,{},{}", e.variant.as_str(), o.mean_t_err, o.mean_r_err);
    }
    s
}

pub fn cmd_ablate(cfg: &ExperimentConfig, data: Option<&Path>, out: Option<&Path>) -> Result<Outcome, CliError> {
    let (train, train_hash) = obtain_split(Some(cfg), data, Split::Train)?;
    let (test, _) = obtain_split(Some(cfg), data, Split::Test)?;
    let entries = run_ablation(&train, &test, &cfg.model.arch, cfg.model.seed, &cfg.train)?;
    let run = start(cfg, out, "ablate")?;
    fs::write(run.join("ablation.csv"), ablation_csv(&entries))?;
    let json: Vec<_> = entries
        .iter()
        .map(|e| json!({"variant": e.variant, "eval": e.eval, "report": e.outcome.report}))
        .collect();
    write_json(&run.join("ablation.json"), &json)?;
    let mut summary = String::new();
    for e in &entries {
        let _ = writeln!(
            summary,
            "{:<22} t_err {:.3}  r_err {:.2}",
            e.variant.as_str(),
            e.eval.overall.mean_t_err,
            e.eval.overall.mean_r_err
        );
    }
    finish(run, cfg, Some(train_hash), summary)
}

pub fn cmd_mixing(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let spec = cfg
        .mixing
        .as_ref()
        .ok_or_else(|| CliError::Config("`mixing` section is required for the mixing study".into()))?;
    let scene = generate_scene(&cfg.scene)?;
    let table = run_mixing_study(&scene, &cfg.weathers, spec, &cfg.model.arch, cfg.model.seed, &cfg.train)?;
    let run = start(cfg, out, "mixing")?;
    fs::write(run.join("mixing.csv"), table.to_csv())?;
    write_json(&run.join("mixing.json"), &table)?;
    finish(run, cfg, None, mixing_summary(&table))
}

fn mixing_summary(t: &MixingTable) -> String {
    let mut s = format!(
        "{:>8} | {:^23} | {:^23}\n{:>8} | {:>11} {:>11} | {:>11} {:>11}\n",
        "",
        format!("{} (target)", t.target.label()),
        format!("{} (source)", t.source.label()),
        "fraction",
        "baseline",
        "augmented",
        "baseline",
        "augmented"
    );
    let cell = |p: &radaug_core::trainer::ErrorPair| format!("{:.2}m/{:.1}°", p.t_err, p.r_err);
    for r in &t.rows {
        let _ = writeln!(
            s,
            "{:>7.0}% | {:>11} {:>11} | {:>11} {:>11}",
            r.fraction * 100.0,
            cell(&r.baseline_target),
            cell(&r.rada_target),
            cell(&r.baseline_source),
            cell(&r.rada_source)
        );
    }
    s
}

/// Loads a config file and applies seed, perturber and override flags.
pub fn resolve_config(
    path: &Path,
    seed: Option<u64>,
    perturber: Option<Method>,
    overrides: &[String],
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?.with_overrides(overrides)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let mut cfg = cfg.resolve_seeds();
    if let Some(m) = perturber {
        cfg = cfg.with_perturber(m);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Evaluation JSON for `weathers` only, as used by cross-weather checks.
pub fn mean_translation_error(result: &EvalResult, weathers: &[Weather]) -> Option<f64> {
    let (sum, n) = weathers
        .iter()
        .filter_map(|w| result.per_weather.get(w))
        .fold((0.0, 0usize), |(s, n), st| (s + st.mean_t_err * st.frames as f64, n + st.frames));
    (n > 0).then(|| sum / n as f64)
}
