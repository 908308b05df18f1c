use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use ndarray::s;
use serde::Serialize;

use softsae::checkpoint::{self, load_checkpoint, save_checkpoint};
use softsae::config::{TrainConfig, TrainMode};
use softsae::datagen::{self, GeneratorParams};
use softsae::dataio::{compute_stats, ActivationFile};
use softsae::eval::{run_eval, EvalGating, EvalReport, TruthSource};
use softsae::gradcheck::{run_gradcheck, GradcheckOptions, MIN_CHECKED_ALPHA};
use softsae::trainer::{self, TrainState};
use softsae::SaeError;

use crate::{EvalArgs, GenDataArgs, GradcheckArgs, InspectArgs, StatsArgs, TrainArgs};

/// Exit code for invalid flag combinations, matching clap's usage errors.
const USAGE_EXIT: u8 = 2;
/// Rows used to probe inference L0 during training.
const PROBE_ROWS: usize = 1024;

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
    ExitCode::from(USAGE_EXIT)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let params = GeneratorParams {
        n: a.n,
        atoms: a.atoms,
        samples: a.samples,
        c_min: a.c_min,
        c_max: a.c_max,
        coeff_low: a.coeff_low,
        coeff_high: a.coeff_high,
        noise_sigma: a.noise,
        seed: a.seed,
        dict_seed: a.dict_seed.unwrap_or(a.seed),
    };
    if a.c_min > a.c_max {
        return Ok(usage_error(&format!("--c-min ({}) must not exceed --c-max ({})", a.c_min, a.c_max)));
    }
    if let Err(e) = params.validate() {
        return Ok(usage_error(&e.to_string()));
    }
    let outputs = [a.out.clone(), datagen::truth_path(&a.out), datagen::dict_path(&a.out)];
    if !a.force {
        if let Some(existing) = outputs.iter().find(|p| p.exists()) {
            bail!("{} already exists (pass --force to overwrite)", existing.display());
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let ds = datagen::generate(&params)?;
    datagen::write_dataset(&ds, &a.out)?;
    let mean_c = ds.factor_counts.iter().sum::<usize>() as f64 / ds.factor_counts.len().max(1) as f64;
    println!("wrote {} (N={}, n={}, mean factor count {:.4})", a.out.display(), params.samples, params.n, mean_c);
    Ok(ExitCode::SUCCESS)
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "softsae" => Ok(TrainMode::Softsae),
        "topk" => Ok(TrainMode::Topk),
        other => bail!("unknown mode {other:?} (expected softsae or topk)"),
    }
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, &a.profile) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("config {} is invalid", path.display()))?
        }
        (None, Some(name)) => TrainConfig::profile(name).with_context(|| {
            format!("unknown profile {name:?} (available: {})", TrainConfig::PROFILE_NAMES.join(", "))
        })?,
        (None, None) => TrainConfig::desk(),
    };
    if let Some(steps) = a.steps {
        cfg = cfg.with_total_steps(steps);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(mode) = &a.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if a.no_anneal {
        cfg = cfg.without_annealing();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Artifacts {
    config: PathBuf,
    metrics: PathBuf,
    checkpoints: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    version: &'static str,
    status: &'static str,
    seed: u64,
    config: TrainConfig,
    data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from: Option<PathBuf>,
    started_unix: u64,
    finished_unix: u64,
    /// Number of steps completed without error.
    last_good_step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    artifacts: Artifacts,
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let started = unix_now();
    let cfg = match resolve_config(&a) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(ExitCode::from(USAGE_EXIT));
        }
    };
    let file = ActivationFile::open(&a.data)?;
    if file.n() != cfg.n {
        bail!("data width {} does not match config n = {}", file.n(), cfg.n);
    }
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        bail!("{} is not empty (pass --force to overwrite)", a.out.display());
    }
    fs::create_dir_all(a.out.join("checkpoints")).with_context(|| format!("creating {}", a.out.display()))?;

    let data = file.read_all()?;
    let mut state = match &a.resume {
        Some(path) => {
            let (state, _) = load_checkpoint(path)?;
            if state.params.n() != cfg.n || state.params.d() != cfg.d || state.params.k_max != cfg.k_max {
                bail!("checkpoint {} does not match the config dimensions", path.display());
            }
            state
        }
        None => TrainState::init(&cfg, compute_stats(&a.data)?.mean.view())?,
    };
    let probe = trainer::to_f64(data.slice(s![..data.nrows().min(PROBE_ROWS), ..]));

    let config_path = a.out.join("config.json");
    write_json(&config_path, &cfg)?;
    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut checkpoints = Vec::new();
    let ckpt_dir = a.out.join("checkpoints");

    let result = trainer::train_until(&mut state, data.view(), Some(probe.view()), &cfg, cfg.total_steps, |st, rec| {
        let line = serde_json::to_string(rec).map_err(|e| SaeError::Internal(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(|e| SaeError::io(&metrics_path, e))?;
        if a.checkpoint_every > 0 && st.step % a.checkpoint_every == 0 && st.step < cfg.total_steps {
            let path = ckpt_dir.join(format!("step_{:08}.ckpt", st.step));
            save_checkpoint(st, Some(&cfg), &path)?;
            checkpoints.push(path);
        }
        Ok(())
    });
    metrics.flush()?;
    drop(metrics);

    let (status, error, final_checkpoint) = match &result {
        Ok(()) => {
            let path = a.out.join("final.ckpt");
            save_checkpoint(&state, Some(&cfg), &path)?;
            ("completed", None, Some(path))
        }
        Err(e) => {
            let path = a.out.join("last_good.ckpt");
            save_checkpoint(&state, Some(&cfg), &path)?;
            checkpoints.push(path);
            ("aborted", Some(e.to_string()), None)
        }
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        status,
        seed: cfg.seed,
        config: cfg.clone(),
        data: a.data.clone(),
        resumed_from: a.resume.clone(),
        started_unix: started,
        finished_unix: unix_now(),
        last_good_step: state.step,
        error,
        artifacts: Artifacts {
            config: config_path,
            metrics: metrics_path,
            checkpoints,
            final_checkpoint,
        },
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    match result {
        Ok(()) => {
            println!("trained {} steps; outputs in {}", state.step, a.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: training aborted after {} good steps: {e}", state.step);
            Ok(ExitCode::FAILURE)
        }
    }
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (state, cfg) = load_checkpoint(&a.checkpoint)?;
    let gating = cfg.as_ref().map(EvalGating::for_config).unwrap_or(EvalGating::Adaptive);
    let truth = match &a.truth {
        Some(p) => TruthSource::Explicit(p),
        None => TruthSource::Sidecar,
    };
    let model_id = a.checkpoint.display().to_string();
    let report = run_eval(&state.params, gating, &a.data, truth, &model_id)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        append_csv(csv, &report)?;
    }
    println!("fve {:.6}", report.fve);
    println!("l0 {:.4}", report.mean_l0);
    println!("khat_mean {:.4}", report.khat_mean);
    match report.spearman_khat_complexity {
        Some(r) => println!("spearman {r:.4}"),
        None => println!("spearman n/a"),
    }
    Ok(ExitCode::SUCCESS)
}

fn append_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{}", EvalReport::CSV_HEADER)?;
    }
    writeln!(f, "{}", report.csv_row())?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    for &alpha in &a.alphas {
        if !(alpha >= MIN_CHECKED_ALPHA) {
            eprintln!("warning: alpha {alpha:e} is below {MIN_CHECKED_ALPHA:e}; the relaxation is effectively hard there, skipping its differentiability checks");
        }
    }
    let opts = GradcheckOptions {
        n: a.n,
        d: a.d,
        batch: a.batch,
        alphas: a.alphas,
        seed: a.seed,
        trials: a.trials,
        inject_sign_flip: a.inject_fault,
        ..Default::default()
    };
    let report = run_gradcheck(&opts)?;
    for g in &report.groups {
        let verdict = if g.worst_rel_err < g.tolerance { "ok" } else { "FAIL" };
        println!(
            "{:<18} worst rel err {:.3e} (tol {:.0e}, {} checks) {verdict}",
            g.group, g.worst_rel_err, g.tolerance, g.checked
        );
    }
    if report.passed() {
        return Ok(ExitCode::SUCCESS);
    }
    for g in report.failures() {
        eprintln!(
            "failed: {} rel err {:.3e} at instance seed {} (alpha {})",
            g.group, g.worst_rel_err, g.worst_seed, g.worst_alpha
        );
    }
    Ok(ExitCode::FAILURE)
}

pub fn inspect(a: InspectArgs) -> Result<ExitCode> {
    let header = checkpoint::read_header(&a.checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&header)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StatsOut {
    count: usize,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

pub fn stats(a: StatsArgs) -> Result<ExitCode> {
    let st = compute_stats(&a.data)?;
    let out = StatsOut {
        count: st.count,
        mean: st.mean.to_vec(),
        variance: st.variance.to_vec(),
    };
    match &a.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(ExitCode::SUCCESS)
}
