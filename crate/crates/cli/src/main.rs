//! `cmdm`: dataset export, training, generation, evaluation, schedule and
//! config inspection for the causal motion diffusion model.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime or numerical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cmdm::config::{parse_override, RunConfig};
use cmdm::data::{Dataset, ToyCaption};
use cmdm::dit::TextCondition;
use cmdm::io::{load_params, save_params, write_file, NamedArray};
use cmdm::pipeline::{hard_concatenation_baseline, Pipeline};
use cmdm::sampler::{build_fss_matrix, CaptionPlan, SamplerMode};
use cmdm::train::{reconstruction_mse, train_dit, train_vae, vae_from_tree, DitModel};
use cmdm::vae::DOWNSAMPLE;
use cmdm::Error;

/// Directory searched for `default.json` when `--config` is not given.
const CONFIG_DIR_ENV: &str = "CMDM_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "cmdm", version, about = "Causal motion diffusion on a toy trajectory corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults to $CMDM_CONFIG_DIR/default.json,
    /// then to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.dit.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding checkpoints and outputs.
    #[arg(long, default_value = "run")]
    run: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset and write it as a tensor container.
    Data(Common),
    /// Train the causal VAE.
    TrainVae(Common),
    /// Train the diffusion transformer on latents of the trained VAE.
    TrainDit(Common),
    /// Sample motion with the AR or frame-wise (FSS) sampler.
    Generate(GenerateArgs),
    /// Consistency, transition smoothness and reconstruction report.
    Eval(EvalArgs),
    /// Print a frame-wise schedule matrix as JSON.
    Schedule(ScheduleArgs),
    /// Print the resolved configuration (file, overrides and defaults).
    Config(Common),
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SamplerMode>,
    /// Denoising steps per frame.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Lag between neighbouring frames.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Motion frames to generate (multiple of 4).
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Caption such as "fast circle". Repeat together with --switch-at.
    #[arg(long = "caption", required = true)]
    captions: Vec<String>,
    /// Motion frame at which the next caption takes over (multiple of 4).
    #[arg(long = "switch-at")]
    switch_at: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output container; the resolved config is written beside it.
    #[arg(long, default_value = "motion.cmdt")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Spread generations over worker threads.
    #[arg(long)]
    parallel: bool,
    /// Skip the two-caption transition study.
    #[arg(long)]
    no_transitions: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long = "K")]
    k: usize,
    #[arg(long = "L")]
    l: usize,
    #[arg(long)]
    frames: usize,
}

fn parse_mode(s: &str) -> Result<SamplerMode, String> {
    s.parse::<SamplerMode>().map_err(|e| e.to_string())
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit_code(&e), e),
    }
}

fn load_config(c: &Common) -> cmdm::Result<RunConfig> {
    let overrides = c.overrides.iter().map(|s| parse_override(s)).collect::<cmdm::Result<Vec<_>>>()?;
    let path = match &c.config {
        Some(p) => Some(p.clone()),
        None => std::env::var_os(CONFIG_DIR_ENV).map(|d| Path::new(&d).join("default.json")),
    };
    match path {
        Some(p) => {
            let text = fs::read_to_string(&p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_json(&text, &overrides)
        }
        None => RunConfig::from_json("{}", &overrides),
    }
}

fn write_config(path: &Path, cfg: &RunConfig) -> cmdm::Result<()> {
    fs::write(path, cfg.to_json() + "\n")?;
    Ok(())
}

fn vae_path(run: &Path) -> PathBuf {
    run.join("vae.cmdt")
}

fn dit_path(run: &Path) -> PathBuf {
    run.join("dit.cmdt")
}

fn require(path: &Path) -> cmdm::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )))
    }
}

fn load_pipeline(cfg: &RunConfig, run: &Path) -> cmdm::Result<Pipeline<f32>> {
    let (vp, dp) = (vae_path(run), dit_path(run));
    require(&vp)?;
    require(&dp)?;
    let vae = vae_from_tree(cfg, load_params(&vp, cfg.vae_hash())?)?;
    let model = DitModel::from_tree(cfg, load_params(&dp, cfg.dit_hash())?)?;
    Pipeline::new(cfg.clone(), vae, model)
}

fn run(cmd: Command) -> cmdm::Result<()> {
    match cmd {
        Command::Data(c) => data(&c),
        Command::TrainVae(c) => train_vae_cmd(&c),
        Command::TrainDit(c) => train_dit_cmd(&c),
        Command::Generate(a) => generate(&a),
        Command::Eval(a) => eval(&a),
        Command::Schedule(a) => schedule(&a),
        Command::Config(c) => {
            println!("{}", load_config(&c)?.to_json());
            Ok(())
        }
    }
}

fn data(c: &Common) -> cmdm::Result<()> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.run)?;
    let ds = Dataset::<f32>::generate(&cfg.data)?;
    let mut arrays = Vec::with_capacity(ds.len() + 1);
    arrays.push(NamedArray::ints("captions", ds.samples.iter().map(|s| s.caption.index() as i64).collect()));
    for (i, s) in ds.samples.iter().enumerate() {
        arrays.push(NamedArray::from_tensor(format!("motion.{i:04}"), &s.motion.frames));
    }
    let out = c.run.join("dataset.cmdt");
    write_file(&out, &arrays)?;
    write_config(&c.run.join("data.config.json"), &cfg)?;
    println!("{}", json!({ "samples": ds.len(), "frames": cfg.data.frames, "out": out }));
    Ok(())
}

fn train_vae_cmd(c: &Common) -> cmdm::Result<()> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.run)?;
    write_config(&c.run.join("train-vae.config.json"), &cfg)?;
    let ds = Dataset::<f32>::generate(&cfg.data)?;
    let start = Instant::now();
    let every = cfg.train.vae.log_every.max(1);
    let mut csv = String::from("step,lr,total,recon,kl,align,lambda,grad_norm\n");
    let vae = train_vae(&cfg, &ds, |l| {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            l.step, l.lr, l.total, l.recon, l.kl, l.align, l.lambda, l.grad_norm
        );
        if (l.step + 1) % every == 0 {
            eprintln!(
                "vae step {:>6} recon {:.5} kl {:.4} align {:.4} lambda {:.3} ({:.0}s)",
                l.step + 1,
                l.recon,
                l.kl,
                l.align,
                l.lambda,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    save_params(&vae_path(&c.run), &vae.params, cfg.vae_hash())?;
    fs::write(c.run.join("train-vae.csv"), csv)?;
    let mse = reconstruction_mse(&vae, &ds)?;
    let report = json!({
        "seed": cfg.seed,
        "steps": cfg.train.vae.steps,
        "recon_mse": mse,
        "seconds": start.elapsed().as_secs_f64(),
        "checkpoint": vae_path(&c.run),
    });
    fs::write(c.run.join("train-vae.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{report}");
    Ok(())
}

fn train_dit_cmd(c: &Common) -> cmdm::Result<()> {
    let cfg = load_config(c)?;
    let vp = vae_path(&c.run);
    require(&vp)?;
    let vae = vae_from_tree(&cfg, load_params(&vp, cfg.vae_hash())?)?;
    write_config(&c.run.join("train-dit.config.json"), &cfg)?;
    let ds = Dataset::<f32>::generate(&cfg.data)?;
    let start = Instant::now();
    let every = cfg.train.dit.log_every.max(1);
    let mut csv = String::from("step,lr,loss,grad_norm\n");
    let mut window = (0.0, 0usize);
    let model = train_dit(&cfg, &vae, &ds, |l| {
        let _ = writeln!(csv, "{},{:e},{:e},{:e}", l.step, l.lr, l.loss, l.grad_norm);
        window.0 += l.loss;
        window.1 += 1;
        if (l.step + 1) % every == 0 {
            eprintln!(
                "dit step {:>6} loss {:.5} ({:.0}s)",
                l.step + 1,
                window.0 / window.1 as f64,
                start.elapsed().as_secs_f64()
            );
            window = (0.0, 0);
        }
    })?;
    save_params(&dit_path(&c.run), &model.to_tree(), cfg.dit_hash())?;
    fs::write(c.run.join("train-dit.csv"), csv)?;
    let report = json!({
        "seed": cfg.seed,
        "steps": cfg.train.dit.steps,
        "parameters": model.dit.num_params(),
        "seconds": start.elapsed().as_secs_f64(),
        "checkpoint": dit_path(&c.run),
    });
    fs::write(c.run.join("train-dit.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{report}");
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(a: &GenerateArgs) -> cmdm::Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.mode {
        cfg.sampler.mode = m;
    }
    if let Some(k) = a.k {
        cfg.sampler.steps = k;
    }
    if let Some(l) = a.l {
        cfg.sampler.lag = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let captions = a
        .captions
        .iter()
        .map(|s| s.parse::<ToyCaption>().map(TextCondition::from))
        .collect::<cmdm::Result<Vec<_>>>()?;
    if a.frames == 0 || a.frames % DOWNSAMPLE != 0 {
        return Err(Error::Config(format!("--frames must be a positive multiple of {DOWNSAMPLE}")));
    }
    if let Some(&bad) = a.switch_at.iter().find(|&&f| f % DOWNSAMPLE != 0 || f >= a.frames) {
        return Err(Error::Config(format!("--switch-at {bad} must be a multiple of {DOWNSAMPLE} below --frames")));
    }
    let switch: Vec<usize> = a.switch_at.iter().map(|f| f / DOWNSAMPLE).collect();
    let plan = CaptionPlan::switching(captions, &switch)?;

    let pipe = load_pipeline(&cfg, &a.common.run)?;
    let report = pipe.generate(cfg.sampler.mode, plan, a.frames, cfg.seed)?;
    let motion = report.motion.as_ref().ok_or_else(|| Error::Config("no decoder loaded".into()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_file(
        &a.out,
        &[NamedArray::from_tensor("motion", &motion.frames), NamedArray::from_tensor("latents", &report.latents.z)],
    )?;
    write_config(&sidecar(&a.out, ".config.json"), &cfg)?;
    let summary = json!({
        "mode": cfg.sampler.mode,
        "K": cfg.sampler.steps,
        "L": cfg.sampler.lag,
        "seed": cfg.seed,
        "frames": motion.len(),
        "captions": a.captions,
        "switch_at": a.switch_at,
        "model_calls": report.model_calls,
        "network_passes": report.network_passes,
        "amortized_calls_per_frame": report.amortized_calls_per_frame(),
        "wall_time": report.wall_time,
        "out": a.out,
    });
    fs::write(sidecar(&a.out, ".json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{summary}");
    Ok(())
}

fn eval(a: &EvalArgs) -> cmdm::Result<()> {
    let mut cfg = load_config(&a.common)?;
    if a.parallel {
        cfg.eval.parallel = true;
    }
    let pipe = load_pipeline(&cfg, &a.common.run)?;
    let ds = Dataset::<f32>::generate(&cfg.data)?;
    let start = Instant::now();
    let recon = reconstruction_mse(&pipe.vae, &ds)?;
    let mut report = json!({ "seed": cfg.seed, "recon_mse": recon, "config": cfg });
    let mut csv = String::from("study,mode,caption,second,seed,value\n");
    for mode in [SamplerMode::Ar, SamplerMode::Fss] {
        let r = pipe.consistency(mode, cfg.seed)?;
        eprintln!("consistency {mode}: {:.3} ({:.0}s)", r.accuracy, start.elapsed().as_secs_f64());
        for s in &r.samples {
            let hit = s.predicted.as_deref() == Some(s.caption.as_str());
            let _ = writeln!(csv, "consistency,{mode},{},{},{},{}", s.caption, s.predicted.as_deref().unwrap_or("none"), s.seed, hit as u8);
        }
        report[format!("consistency_{mode}")] = serde_json::to_value(&r)?;
    }
    if !a.no_transitions {
        let base = hard_concatenation_baseline(&cfg, cfg.seed)?;
        let mut auj: Vec<(String, f64)> = vec![("hard".into(), base.median_auj)];
        for s in &base.samples {
            let _ = writeln!(csv, "auj,hard,{},{},{},{}", s.first, s.second, s.seed, s.auj);
        }
        report["transitions_hard"] = serde_json::to_value(&base)?;
        for mode in [SamplerMode::Ar, SamplerMode::Fss] {
            let r = pipe.transitions(mode, cfg.seed)?;
            eprintln!("median AUJ {mode}: {:.4} ({:.0}s)", r.median_auj, start.elapsed().as_secs_f64());
            for s in &r.samples {
                let _ = writeln!(csv, "auj,{mode},{},{},{},{}", s.first, s.second, s.seed, s.auj);
            }
            auj.push((mode.to_string(), r.median_auj));
            report[format!("transitions_{mode}")] = serde_json::to_value(&r)?;
        }
        report["median_auj"] = Value::Object(auj.into_iter().map(|(k, v)| (k, json!(v))).collect());
    }
    report["seconds"] = json!(start.elapsed().as_secs_f64());
    fs::create_dir_all(&a.common.run)?;
    write_config(&a.common.run.join("eval.config.json"), &cfg)?;
    fs::write(a.common.run.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(a.common.run.join("eval.csv"), csv)?;
    let mut brief = report.clone();
    if let Some(o) = brief.as_object_mut() {
        o.retain(|k, _| !k.starts_with("transitions_") && k != "config");
        for (_, v) in o.iter_mut() {
            if let Some(inner) = v.as_object_mut() {
                inner.remove("samples");
            }
        }
    }
    println!("{brief}");
    Ok(())
}

fn schedule(a: &ScheduleArgs) -> cmdm::Result<()> {
    let m = build_fss_matrix(a.k, a.l, a.frames).map_err(|e| Error::Config(e.to_string()))?;
    m.validate()?;
    println!(
        "{}",
        json!({ "K": m.k, "L": m.lag, "frames": m.frames, "rows": m.rows(), "levels": m.levels })
    );
    Ok(())
}
