//! Subcommand implementations.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use pgrefine::dataset::{
    build_scenario, normalize_pg, read_samples, sample_dir_name, scenario_ids, split_scenarios,
    synthetic_corpus, write_samples, CorpusConfig, Sample, ScenarioConfig, TruthSpec,
};
use pgrefine::evalkit::{
    baseline_compare, default_ratios, evaluate_with, refine_experiment, split_sweep, EvalReport,
};
use pgrefine::geodata::{crop_tile, load_elevation, GridTile, MapPoint};
use pgrefine::propagate::{rough_estimate, write_gray_png, Generator, Heatmap, LinkGeometry};
use pgrefine::sounder::{
    moving_average, read_capture, read_gps, trace_from_samples, write_trace, CalibrationParams,
    SounderConfig,
};
use pgrefine::unet::{
    load_params, predict, predict_sample, save_params, train, EpochStats, ModelParams, TrainConfig,
    UNetConfig,
};
use pgrefine::derive_seed;

use crate::manifest::{digest_path, now_unix_s, InputDigest, RunManifest};
use crate::{Cli, Command, EvalArgs, GenArgs, HyperArgs, PredictArgs, RefineArgs, SceneArgs, SoundArgs, SweepArgs, TrainArgs};

/// ECDF CSVs keep at most this many curve points.
const ECDF_POINTS: usize = 1000;

#[derive(Debug)]
pub enum CliError {
    Core(pgrefine::Error),
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<pgrefine::Error> for CliError {
    fn from(e: pgrefine::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    usage(format!("{}: {e}", path.display()))
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file or directory", path.display())))
    }
}

/// Runs the selected command and writes its manifest.
pub fn run(cli: &Cli) -> Result<()> {
    let started = now_unix_s();
    let (out, inputs) = match &cli.command {
        Command::Gen(a) => gen(a, cli.seed)?,
        Command::Train(a) => train_cmd(a, cli.seed)?,
        Command::Predict(a) => predict_cmd(a)?,
        Command::Eval(a) => eval_cmd(a, cli.seed)?,
        Command::Sweep(a) => sweep_cmd(a, cli.seed)?,
        Command::Sound(a) => sound_cmd(a)?,
        Command::Refine(a) => refine_cmd(a, cli.seed)?,
    };
    let inputs = inputs
        .into_iter()
        .map(|p| {
            let sha256 = digest_path(&p).map_err(|e| io_err(&p, e))?;
            Ok(InputDigest { path: p, sha256 })
        })
        .collect::<Result<_>>()?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: std::env::args().skip(1).collect(),
        seed: cli.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        started_unix_s: started,
        finished_unix_s: now_unix_s(),
    };
    manifest.write_for(&out).map_err(|e| io_err(&out, e))?;
    Ok(())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{what}: `{t}` is not a number")))
        })
        .collect()
}

fn parse_pair(text: &str, what: &str) -> Result<(f64, f64)> {
    match parse_list(text, what)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(usage(format!("{what}: expected two comma-separated numbers"))),
    }
}

fn scenario_config(s: &SceneArgs) -> Result<ScenarioConfig> {
    let (lo, hi) = parse_pair(&s.offset_db, "--offset-db")?;
    if lo > hi {
        return Err(usage("--offset-db: lower bound exceeds upper bound"));
    }
    Ok(ScenarioConfig {
        tile_px: s.tile_px,
        coarse_factor: s.coarse_factor,
        geom: LinkGeometry::new(s.tx_height, s.rx_height, s.frequency)?.with_reflection(s.reflection),
        truth: TruthSpec {
            reflection_coeff: None,
            offset_db: (lo, hi),
        },
    })
}

/// TX list: one `x_m,y_m` pair per line, optional header.
fn read_tx_list(path: &Path) -> Result<Vec<MapPoint>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match (parsed, fields.len()) {
            (Some(v), 2) => out.push(MapPoint::new(v[0], v[1])),
            (None, _) if i == 0 => continue,
            _ => {
                return Err(pgrefine::Error::Parse {
                    line: i + 1,
                    msg: format!("expected `x_m,y_m`, got `{line}`"),
                }
                .into())
            }
        }
    }
    if out.is_empty() {
        return Err(usage(format!("{}: no TX positions", path.display())));
    }
    Ok(out)
}

fn gen(a: &GenArgs, seed: u64) -> Result<(PathBuf, Vec<PathBuf>)> {
    let scenario = scenario_config(&a.scene)?;
    let mut inputs = Vec::new();
    let samples = match (&a.map, &a.tx_file, a.random_scenarios) {
        (Some(map_path), Some(tx_path), None) => {
            require_exists(map_path)?;
            require_exists(tx_path)?;
            let map = load_elevation(map_path)?;
            let txs = read_tx_list(tx_path)?;
            inputs.extend([map_path.clone(), tx_path.clone()]);
            let per: Vec<Vec<Sample>> = txs
                .par_iter()
                .enumerate()
                .map(|(i, tx)| {
                    let id = i as u64;
                    build_scenario(&map, *tx, &scenario, id, a.augment, derive_seed(seed, (1 << 32) + id))
                })
                .collect::<pgrefine::Result<_>>()?;
            per.into_iter().flatten().collect::<Vec<_>>()
        }
        (None, None, Some(n)) => {
            if n == 0 {
                return Err(usage("--random-scenarios must be at least 1"));
            }
            let per_city = n.min(6);
            let cfg = CorpusConfig {
                cities: n.div_ceil(per_city),
                tx_per_city: per_city,
                n_augment: a.augment,
                scenario,
                ..CorpusConfig::default()
            };
            let mut all = synthetic_corpus(&cfg, seed)?;
            all.retain(|s| s.meta.scenario_id < n as u64);
            all
        }
        _ => return Err(usage("give either --map with --tx-file, or --random-scenarios")),
    };
    write_samples(&samples, &a.out)?;
    println!(
        "wrote {} samples from {} scenarios to {}",
        samples.len(),
        scenario_ids(&samples).len(),
        a.out.display()
    );
    Ok((a.out.clone(), inputs))
}

fn train_config(h: &HyperArgs, seed: u64, tile_px: usize) -> Result<TrainConfig> {
    if h.width_divisor == 0 {
        return Err(usage("--width-divisor must be at least 1"));
    }
    Ok(TrainConfig {
        epochs: h.epochs,
        batch_size: h.batch_size,
        learning_rate: h.learning_rate,
        seed,
        validation_fraction: h.validation_fraction,
        arch: UNetConfig {
            tile_px,
            ..UNetConfig::narrow(h.width_divisor)
        },
    })
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    require_exists(dir)?;
    let samples = read_samples(dir)?;
    if samples.is_empty() {
        return Err(pgrefine::Error::EmptyDataset.into());
    }
    Ok(samples)
}

/// Scenario split shared by `train --ratio` and `eval --ratio`.
fn split_seed(seed: u64) -> u64 {
    derive_seed(seed, 1)
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        let val = h.val_loss.map_or(String::new(), |v| v.to_string());
        text.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, val));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<(PathBuf, Vec<PathBuf>)> {
    let samples = load_samples(&a.samples)?;
    let cfg = train_config(&a.hyper, seed, samples[0].size_px())?;
    let train_set: Vec<&Sample> = if a.ratio < 1.0 {
        let plan = split_scenarios(&scenario_ids(&samples), a.ratio, split_seed(seed))?;
        plan.apply(&samples).0
    } else if a.ratio == 1.0 {
        samples.iter().collect()
    } else {
        return Err(usage("--ratio must lie in (0, 1]"));
    };
    let outcome = train(&train_set, &cfg)?;
    save_params(&outcome.params, &a.out)?;
    let history = a.history.clone().unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    write_history(&history, &outcome.history)?;
    match outcome.history.last() {
        Some(h) => println!("trained {} epochs on {} samples, final loss {:.6e}", cfg.epochs, train_set.len(), h.train_loss),
        None => println!("wrote the initial model (0 epochs)"),
    }
    Ok((a.out.clone(), vec![a.samples.clone()]))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Absolute difference rendered over 0 to 40 dB.
fn write_diff_png(pred: &Heatmap, truth: &Heatmap, path: &Path) -> Result<()> {
    let mut tile = pred.tile.clone();
    for k in 0..tile.values.len() {
        tile.mask[k] &= truth.tile.mask[k];
        tile.values[k] = if tile.mask[k] {
            (pred.tile.values[k] - truth.tile.values[k]).abs()
        } else {
            0.0
        };
    }
    Ok(write_gray_png(&tile, 0.0, 40.0, path)?)
}

fn predict_cmd(a: &PredictArgs) -> Result<(PathBuf, Vec<PathBuf>)> {
    require_exists(&a.model)?;
    let params = load_params(&a.model)?;
    create_dir(&a.out)?;
    let mut inputs = vec![a.model.clone()];
    if let Some(dir) = &a.samples {
        let samples = load_samples(dir)?;
        inputs.push(dir.clone());
        for s in &samples {
            let name = sample_dir_name(&s.meta);
            let p = predict_sample(&params, s)?;
            let target = s.target_heatmap();
            p.heatmap.write_png(a.out.join(format!("{name}_pred.png")))?;
            target.write_png(a.out.join(format!("{name}_target.png")))?;
            write_diff_png(&p.heatmap, &target, &a.out.join(format!("{name}_diff.png")))?;
            if a.time {
                println!("{name}: predict {:.2} ms", p.latency.as_secs_f64() * 1e3);
            }
        }
        println!("predicted {} tiles into {}", samples.len(), a.out.display());
    } else if let (Some(map_path), Some(tx)) = (&a.map, &a.tx) {
        require_exists(map_path)?;
        let map = load_elevation(map_path)?;
        inputs.push(map_path.clone());
        let (x, y) = parse_pair(tx, "--tx")?;
        let tx = MapPoint::new(x, y);
        let scenario = scenario_config(&a.scene)?;
        let start = Instant::now();
        let rough = rough_estimate(&map, tx, &scenario.geom, scenario.tile_px, scenario.coarse_factor)?;
        let rough_ms = start.elapsed().as_secs_f64() * 1e3;
        let elevation: GridTile = crop_tile(&map, tx, scenario.tile_px);
        let estimate = rough.tile.map_valid(normalize_pg);
        let p = predict(&params, &elevation, &estimate)?;
        rough.write_png(a.out.join("rough.png"))?;
        p.heatmap.write_png(a.out.join("pred.png"))?;
        if a.time {
            println!("rough_estimate: {rough_ms:.2} ms");
            println!("predict: {:.2} ms", p.latency.as_secs_f64() * 1e3);
        }
    } else {
        return Err(usage("give either --samples or --map with --tx"));
    }
    Ok((a.out.clone(), inputs))
}

fn held_out(samples: &[Sample], ratio: Option<f64>, seed: u64) -> Result<Vec<&Sample>> {
    match ratio {
        None => Ok(samples.iter().collect()),
        Some(r) => {
            let plan = split_scenarios(&scenario_ids(samples), r, split_seed(seed))?;
            Ok(plan.apply(samples).1)
        }
    }
}

fn write_report(dir: &Path, value: &impl serde::Serialize) -> Result<()> {
    let path = dir.join("report.json");
    let mut bytes = serde_json::to_vec_pretty(value).map_err(pgrefine::Error::from)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))
}

fn write_ecdf(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(e) = &report.ecdf {
        e.write_csv(path, ECDF_POINTS)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, seed: u64) -> Result<(PathBuf, Vec<PathBuf>)> {
    let truth = load_samples(&a.samples)?;
    let subset = held_out(&truth, a.ratio, seed)?;
    create_dir(&a.out)?;
    let mut inputs = vec![a.samples.clone()];
    if let Some(model) = &a.model {
        require_exists(model)?;
        inputs.push(model.clone());
        let params: ModelParams = load_params(model)?;
        let cmp = baseline_compare(&params, &subset)?;
        write_report(&a.out, &cmp)?;
        write_ecdf(&cmp.model, &a.out.join("ecdf_model.csv"))?;
        write_ecdf(&cmp.baseline, &a.out.join("ecdf_baseline.csv"))?;
        println!(
            "model nrmse {:.5} median {:.5} ({:.2} dB); baseline nrmse {:.5} median {:.5} ({:.2} dB)",
            cmp.model.nrmse,
            cmp.model.median_abs_error,
            cmp.model.median_abs_error_db,
            cmp.baseline.nrmse,
            cmp.baseline.median_abs_error,
            cmp.baseline.median_abs_error_db
        );
    } else if let Some(pred_dir) = &a.pred {
        let preds = load_samples(pred_dir)?;
        inputs.push(pred_dir.clone());
        let by_key: HashMap<(u64, u32), Heatmap> = preds
            .iter()
            .map(|s| ((s.meta.scenario_id, s.meta.augmentation_index), s.target_heatmap()))
            .collect();
        for s in &subset {
            if !by_key.contains_key(&(s.meta.scenario_id, s.meta.augmentation_index)) {
                return Err(usage(format!("{}: no prediction for {}", pred_dir.display(), sample_dir_name(&s.meta))));
            }
        }
        let report = evaluate_with(&subset, Generator::Model, |s| {
            Ok(by_key[&(s.meta.scenario_id, s.meta.augmentation_index)].clone())
        })?;
        write_report(&a.out, &report)?;
        write_ecdf(&report, &a.out.join("ecdf.csv"))?;
        println!(
            "nrmse {:.5} median {:.5} ({:.2} dB) over {} pixels",
            report.nrmse, report.median_abs_error, report.median_abs_error_db, report.n_pixels
        );
    }
    Ok((a.out.clone(), inputs))
}

fn sweep_cmd(a: &SweepArgs, seed: u64) -> Result<(PathBuf, Vec<PathBuf>)> {
    let samples = load_samples(&a.samples)?;
    let ratios = match &a.ratios {
        Some(t) => parse_list(t, "--ratios")?,
        None => default_ratios(),
    };
    let cfg = train_config(&a.hyper, seed, samples[0].size_px())?;
    let table = split_sweep(&samples, &ratios, a.repeats, &cfg, seed)?;
    table.write_csv(&a.out)?;
    for r in &table.rows {
        println!("ratio {:.2}: nrmse {:.5} +/- {:.5}", r.ratio, r.mean_nrmse, r.std_nrmse);
    }
    for (r, why) in &table.skipped {
        eprintln!("warning: ratio {r} skipped: {why}");
    }
    Ok((a.out.clone(), vec![a.samples.clone()]))
}

fn sound_cmd(a: &SoundArgs) -> Result<(PathBuf, Vec<PathBuf>)> {
    for p in [&a.iq, &a.gps, &a.cal] {
        require_exists(p)?;
    }
    let cal_text = fs::read_to_string(&a.cal).map_err(|e| io_err(&a.cal, e))?;
    let cal: CalibrationParams = serde_json::from_str(&cal_text).map_err(pgrefine::Error::from)?;
    let (meta, iq) = read_capture(&a.iq)?;
    let gps = read_gps(&a.gps)?;
    let cfg = SounderConfig::new(a.chip_rate.unwrap_or(meta.sample_rate_hz / 2.0), cal);
    let mut trace = trace_from_samples(&meta, &iq, &gps, &cfg)?;
    if a.window > 1 {
        trace = moving_average(&trace, a.window)?;
    }
    write_trace(&a.out, &trace)?;
    println!("wrote {} trace points to {}", trace.points.len(), a.out.display());
    Ok((a.out.clone(), vec![a.iq.clone(), a.gps.clone(), a.cal.clone()]))
}

fn refine_cmd(a: &RefineArgs, seed: u64) -> Result<(PathBuf, Vec<PathBuf>)> {
    require_exists(&a.model)?;
    let params = load_params(&a.model)?;
    let samples = load_samples(&a.samples)?;
    let cfg = train_config(&a.hyper, seed, params.config().tile_px)?;
    let (report, tuned) = refine_experiment(&params, &samples, a.holdout, &cfg, seed)?;
    create_dir(&a.out)?;
    save_params(&tuned, a.out.join("refined.unet"))?;
    write_report(&a.out, &report)?;
    write_ecdf(&report.before, &a.out.join("ecdf_before.csv"))?;
    write_ecdf(&report.after, &a.out.join("ecdf_after.csv"))?;
    println!(
        "median before {:.5} ({:.2} dB), after {:.5} ({:.2} dB)",
        report.before.median_abs_error,
        report.before.median_abs_error_db,
        report.after.median_abs_error,
        report.after.median_abs_error_db
    );
    Ok((a.out.clone(), vec![a.model.clone(), a.samples.clone()]))
}
