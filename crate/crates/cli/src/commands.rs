//! Subcommand implementations other than `report`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use ecae::arch::{cae_to_text, expand, parse_arch, trace_shapes, CaeSpec, LayerKind};
use ecae::cgp::{genotype_from_text, genotype_to_text};
use ecae::data::{corrupt_image, fixed_pairs, load_images, ImageSet};
use ecae::evolution::{
    finetune as run_finetune, run_evolution_with, Control, EvoCheckpoint, EvoConfig, EvoState, FinetuneConfig,
};
use ecae::metrics::{evaluate_pairs, QualityReport};
use ecae::nn::gradcheck::{self, ConvKind, DEFAULT_EPS};
use ecae::nn::{read_weights, weights_to_bytes, Identity, TrainTrace};
use ecae::seed::{derived_rng, rng_from};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    ArchCommand, CliError, ConfigArgs, CorruptArgs, EvalArgs, EvolveArgs, FinetuneArgs, GradcheckArgs, NetShape,
    SplitName, DEFAULT_OUT_DIR, OUT_DIR_ENV,
};

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GENOTYPE_FILE: &str = "best.genotype.toml";
pub const WEIGHTS_FILE: &str = "best.weights";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Loads the run configuration and applies command-line overrides.
pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref(), args.profile)?;
    let o = &args.overrides;
    let e = &mut cfg.evolution;
    macro_rules! set {
        ($($field:ident => $target:ident),* $(,)?) => {
            $(if let Some(v) = o.$field.clone() { e.$target = v; })*
        };
    }
    set!(
        generations => generations,
        children => children,
        mutation_rate => mutation_rate,
        rows => rows,
        cols => cols,
        level_back => level_back,
        iterations => iterations,
        batch_size => batch_size,
        learning_rate => learning_rate,
        mode => mode,
        corruption => corruption,
        input_size => input_size,
        input_channels => input_channels,
        width => parallel_width,
        checkpoint_interval => checkpoint_interval,
    );
    cfg.validate()?;
    Ok(cfg)
}

/// `--out-dir`, then the config file, then `$ECAE_OUT_DIR`, then the built-in default.
pub fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn show_config(args: &ConfigArgs) -> Result<()> {
    print!("{}", resolve(args)?.to_toml());
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    started_unix: f64,
    finished_unix: f64,
    wall_seconds: f64,
    completed: bool,
    generations_done: usize,
    generations_target: usize,
    resumed_from: Option<usize>,
    initial_psnr: ecae::evolution::Fitness,
    best_psnr: ecae::evolution::Fitness,
    arch: &'a str,
    version: &'static str,
}

/// Everything except the fields a resumed run may change.
fn resumable(cfg: &EvoConfig) -> EvoConfig {
    EvoConfig {
        generations: 0,
        parallel_width: 0,
        checkpoint_interval: 0,
        ..cfg.clone()
    }
}

fn load_resume(path: &Path, evo: &EvoConfig) -> Result<Option<EvoState>> {
    if !path.exists() {
        info!("no checkpoint at {}, starting fresh", path.display());
        return Ok(None);
    }
    let (saved, state) = EvoCheckpoint::read(path)?;
    if resumable(&saved) != resumable(evo) {
        return Err(CliError::usage(format!(
            "checkpoint {} was written with a different configuration",
            path.display()
        ))
        .into());
    }
    Ok(Some(state))
}

pub fn evolve(args: &EvolveArgs, out_flag: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(&args.config)?;
    if let Some(seeds) = &args.seeds {
        if seeds.is_empty() {
            return Err(CliError::usage("--seeds needs at least one value").into());
        }
        cfg.seeds = seeds.clone();
    }
    let root = out_dir(out_flag, &cfg);
    create_dir(&root)?;
    for &seed in &cfg.seeds {
        let mut evo = cfg.evolution.clone();
        evo.seed = seed;
        let dir = root.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let mut run_cfg = cfg.clone();
        run_cfg.seeds = vec![seed];
        run_cfg.evolution = evo.clone();
        write_file(&dir.join(CONFIG_FILE), run_cfg.to_toml())?;
        let splits = cfg.data.load(&evo)?;
        info!(
            "seed {seed}: {} training, {} validation images",
            splits.train.len(),
            splits.val.len()
        );
        let ckpt = dir.join(CHECKPOINT_FILE);
        let resume = if args.resume { load_resume(&ckpt, &evo)? } else { None };
        let resumed_from = resume.as_ref().map(|s| s.generation);

        let log_path = dir.join(LOG_FILE);
        let mut log = BufWriter::new(
            fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
        );
        if let Some(state) = &resume {
            for r in &state.log {
                writeln!(log, "{}", r.to_json_line())?;
            }
            log.flush()?;
        }

        let started = unix_now();
        let clock = Instant::now();
        let interval = evo.checkpoint_interval;
        let stop_after = args.stop_after;
        let mut hook = |state: &EvoState, record: &ecae::evolution::GenerationRecord| -> ecae::Result<Control> {
            let io = |e: std::io::Error| ecae::Error::Io {
                path: log_path.clone(),
                source: e,
            };
            writeln!(log, "{}", record.to_json_line()).map_err(io)?;
            log.flush().map_err(io)?;
            info!(
                "seed {seed} generation {}: parent {} best child {} {}",
                record.generation, record.parent_psnr, record.best_child_psnr, record.arch
            );
            let stop = stop_after.is_some_and(|n| state.generation >= n);
            if stop || (interval > 0 && state.generation % interval == 0) {
                EvoCheckpoint::write(&ckpt, &evo, state)?;
            }
            Ok(if stop { Control::Stop } else { Control::Continue })
        };
        let outcome = run_evolution_with(&evo, &splits.train, &splits.val, resume, &mut hook)?;
        drop(log);

        let table = evo.type_table()?;
        write_file(&dir.join(GENOTYPE_FILE), genotype_to_text(&outcome.best.genotype, &table))?;
        match &outcome.best_network {
            Some(net) => write_file(&dir.join(WEIGHTS_FILE), weights_to_bytes(net))?,
            None => warn!("seed {seed}: best individual has no trained network"),
        }
        let summary = RunSummary {
            seed,
            started_unix: started,
            finished_unix: unix_now(),
            wall_seconds: clock.elapsed().as_secs_f64(),
            completed: outcome.completed,
            generations_done: outcome.log.len(),
            generations_target: evo.generations,
            resumed_from,
            initial_psnr: outcome.initial_fitness,
            best_psnr: outcome.best.fitness,
            arch: &outcome.best.arch,
            version: env!("CARGO_PKG_VERSION"),
        };
        write_file(&dir.join(RUN_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
        println!(
            "seed={seed} generations={} best_psnr={} arch={} completed={} dir={}",
            outcome.log.len(),
            outcome.best.fitness,
            outcome.best.arch,
            outcome.completed,
            dir.display()
        );
    }
    Ok(())
}

fn trace_csv(trace: &TrainTrace) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loss", "learning_rate"])?;
    for (i, (l, r)) in trace.losses.iter().zip(&trace.learning_rates).enumerate() {
        w.write_record([i.to_string(), l.to_string(), r.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn summary_line(prefix: &str, report: &QualityReport, input: &QualityReport) -> String {
    format!(
        "{prefix}images={} psnr={:.4} ssim={:.4} input_psnr={:.4} input_ssim={:.4}",
        report.count, report.mean_psnr, report.mean_ssim, input.mean_psnr, input.mean_ssim
    )
}

pub fn finetune(args: &FinetuneArgs, out_flag: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(&args.config)?;
    let text = fs::read_to_string(&args.genotype).with_context(|| format!("reading {}", args.genotype.display()))?;
    let (genotype, table) = genotype_from_text(&text)?;
    let mut evo = cfg.evolution.clone();
    evo.rows = genotype.rows();
    evo.cols = genotype.cols();
    evo.level_back = genotype.level_back();
    evo.filters = table.filter_set().to_vec();
    evo.kernels = table.kernel_set().to_vec();
    if let Some(s) = args.seed.or_else(|| cfg.seeds.first().copied()) {
        evo.seed = s;
    }
    let mut ft = cfg.finetune.clone();
    if let Some(n) = args.ft_iterations {
        ft = FinetuneConfig {
            checkpoint_every: ft.checkpoint_every,
            ..FinetuneConfig::scaled(n)
        };
    }
    if let Some(m) = &args.milestones {
        ft.milestones = m.clone();
    }
    let dir = out_dir(out_flag, &cfg).join("finetune");
    create_dir(&dir)?;
    let splits = cfg.data.load(&evo)?;
    let weights = dir.join("weights.bin");
    let outcome = run_finetune(&genotype, &evo, &ft, &splits.train, &splits.test, Some(&weights))?;
    write_file(&weights, weights_to_bytes(&outcome.network))?;
    write_file(&dir.join("report.csv"), outcome.report.to_csv())?;
    write_file(&dir.join("input_report.csv"), outcome.input_report.to_csv())?;
    write_file(&dir.join("trace.csv"), trace_csv(&outcome.trace)?)?;
    println!(
        "{} dir={}",
        summary_line("", &outcome.report, &outcome.input_report),
        dir.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs, out_flag: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(&args.config)?;
    let mut file = fs::File::open(&args.weights).with_context(|| format!("opening {}", args.weights.display()))?;
    let net = read_weights(&mut file)?;
    let spec = net.spec();
    let set: ImageSet = match &args.images {
        Some(dir) => load_images(dir, spec.input_channels)?,
        None => {
            let mut evo = cfg.evolution.clone();
            evo.input_channels = spec.input_channels;
            evo.input_size = spec.input_size.0;
            let s = cfg.data.load(&evo)?;
            match args.split {
                SplitName::Train => s.train,
                SplitName::Val => s.val,
                SplitName::Test => s.test,
            }
        }
    };
    let corruption = cfg.evolution.corruption;
    let pairs = fixed_pairs(&set, spec.input_size, &corruption, args.seed)?;
    let report = evaluate_pairs(&net, &pairs, &set.labels)?;
    let input = evaluate_pairs(&Identity, &pairs, &set.labels)?;
    let path = match &args.output {
        Some(p) => p.clone(),
        None => {
            let dir = out_dir(out_flag, &cfg).join("eval");
            create_dir(&dir)?;
            dir.join("report.csv")
        }
    };
    write_file(&path, report.to_csv())?;
    println!("{} corruption={corruption} csv={}", summary_line("", &report, &input), path.display());
    Ok(())
}

pub fn corrupt(args: &CorruptArgs) -> Result<()> {
    args.corruption.validate()?;
    let set = load_images(&args.input, args.channels)?;
    create_dir(&args.output)?;
    for (i, (img, label)) in set.images.iter().zip(&set.labels).enumerate() {
        let mut rng = derived_rng(args.seed, &[i as u64]);
        let out = corrupt_image(img, &args.corruption, &mut rng);
        let stem = Path::new(label).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| i.to_string());
        out.save(&args.output.join(format!("{stem}.png")))?;
    }
    println!("corrupted={} corruption={} dir={}", set.len(), args.corruption, args.output.display());
    Ok(())
}

fn expand_arch(arch: &str, shape: &NetShape) -> Result<CaeSpec> {
    let enc = parse_arch(arch)?;
    Ok(expand(&enc, shape.mode, shape.channels, (shape.size, shape.size))?)
}

fn kind_name(k: LayerKind) -> &'static str {
    match k {
        LayerKind::Conv => "conv",
        LayerKind::TransposedConv => "tconv",
        LayerKind::OutputConv => "output",
    }
}

pub fn arch(cmd: &ArchCommand) -> Result<()> {
    match cmd {
        ArchCommand::Parse { arch } => println!("{}", parse_arch(arch)?),
        ArchCommand::Expand { arch, shape } => print!("{}", cae_to_text(&expand_arch(arch, shape)?)),
        ArchCommand::Shapes { arch, shape } => {
            let cae = expand_arch(arch, shape)?;
            let shapes = trace_shapes(&cae)?;
            println!("input {}", cae.input_shape());
            for (i, (layer, s)) in cae.layers().zip(&shapes).enumerate() {
                let skip = match (layer.skip_provider, layer.skip_source) {
                    (true, _) => " skip-out".to_string(),
                    (_, Some(src)) => format!(" skip-in={src}"),
                    _ => String::new(),
                };
                println!(
                    "{i} {} k={} s={} {}->{} {s}{skip}",
                    kind_name(layer.kind),
                    layer.kernel,
                    layer.stride,
                    layer.in_channels,
                    layer.out_channels
                );
            }
        }
        ArchCommand::Params { arch, shape } => println!("{}", expand_arch(arch, shape)?.param_count()),
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut rng = rng_from(args.seed);
    let mut worst: f64 = 0.0;
    if args.layers {
        let mut layer = |name: String, err: ecae::Result<f64>| -> Result<()> {
            let err = err?;
            println!("layer={name} max_relative_error={err:.3e}");
            worst = worst.max(err);
            Ok(())
        };
        for kernel in [1, 3, 5] {
            for stride in [1, 2] {
                layer(
                    format!("conv_k{kernel}_s{stride}"),
                    gradcheck::check_conv(ConvKind::Conv, stride, kernel, DEFAULT_EPS, &mut rng),
                )?;
                layer(
                    format!("tconv_k{kernel}_s{stride}"),
                    gradcheck::check_conv(ConvKind::Transposed, stride, kernel, DEFAULT_EPS, &mut rng),
                )?;
            }
        }
        layer("relu".into(), gradcheck::check_relu(DEFAULT_EPS, &mut rng))?;
        layer("skip_add".into(), gradcheck::check_skip_add(DEFAULT_EPS, &mut rng))?;
        layer("mse".into(), gradcheck::check_mse(DEFAULT_EPS, &mut rng))?;
    }
    let shape = NetShape {
        mode: args.mode,
        channels: args.channels,
        size: args.size,
    };
    let cae = expand_arch(&args.arch, &shape)?;
    let r = gradcheck::gradcheck(&cae, args.batch, args.eps, &mut rng)?;
    println!(
        "network={} max_param_error={:.3e} max_input_error={:.3e} checked={} skipped={}",
        parse_arch(&args.arch)?,
        r.max_param_error,
        r.max_input_error,
        r.checked,
        r.skipped
    );
    worst = worst.max(r.max_error());
    if !(worst <= args.tolerance) {
        return Err(CliError::runtime(
            "gradcheck",
            format!("max relative error {worst:.3e} exceeds tolerance {:.1e}", args.tolerance),
        )
        .into());
    }
    println!("ok tolerance={:.1e}", args.tolerance);
    Ok(())
}
