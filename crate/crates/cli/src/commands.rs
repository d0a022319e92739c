use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use mtvnet::analysis::{lam_3d, lam_csv, profile_memory, save_lam_heatmap, LamOptions, PredictionBox, ProfileOptions};
use mtvnet::evaluator::{evaluate, SrModel, TrilinearModel};
use mtvnet::synth::{make_corpus, Generator, SynthSpec};
use mtvnet::trainer::{load_model, parse_loss_csv, train, TrainState, TrainingSet};
use mtvnet::volume::{default_blur_sigma, degrade, write_atomic};
use mtvnet::{ExperimentConfig, Preset};

use crate::store::{load_dir, load_pairs, volume_files, Store, VOLUME_EXT};
use crate::{Cli, Command, ConfigArgs, EvalArgs, LamArgs, MakeDataArgs, ProfileArgs, TrainArgs};

/// Runs one subcommand; returns its one-line machine-readable summary.
pub fn run(cli: Cli) -> Result<String> {
    let store = Store { root: cli.data_dir };
    match cli.command {
        Command::MakeData(a) => make_data(&store, a),
        Command::Train(a) => cmd_train(&store, a),
        Command::Eval(a) => eval(&store, a),
        Command::Lam(a) => lam(&store, a),
        Command::Profile(a) => profile(&store, a),
    }
}

fn make_data(store: &Store, a: MakeDataArgs) -> Result<String> {
    let generator: Generator = a.generator.parse()?;
    ensure!(a.count > 0, "--count must be positive");
    ensure!(a.scale > 0, "--scale must be positive");
    ensure!(
        a.edge % a.scale == 0,
        "--edge {} is not divisible by --scale {}",
        a.edge,
        a.scale
    );
    let sigma = (!a.no_blur).then(|| a.blur_sigma.unwrap_or(default_blur_sigma(a.scale)));
    let hr_dir = store.hr_dir(&a.name);
    let lr_dir = store.lr_dir(&a.name, a.scale);
    let hr = make_corpus(&SynthSpec::new(generator, a.count, a.edge, a.seed))?;
    let mut written = Vec::new();
    for v in &hr {
        let file = format!("{}.{VOLUME_EXT}", v.name);
        let mut lr = degrade(v, a.scale, sigma)?;
        lr.quantize_f32();
        v.save(&hr_dir.join(&file))?;
        lr.save(&lr_dir.join(&file))?;
        written.push(file);
    }
    // leftovers of an earlier, larger corpus would leak into training and evaluation
    for dir in [&hr_dir, &lr_dir] {
        for stale in volume_files(dir)? {
            let name = stale.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !written.iter().any(|w| w == name) {
                warn!("removing stale volume {}", stale.display());
                std::fs::remove_file(&stale).with_context(|| format!("removing {}", stale.display()))?;
            }
        }
    }
    info!("wrote {} HR volumes to {} and LR volumes to {}", hr.len(), hr_dir.display(), lr_dir.display());
    Ok(format!(
        "ok command=make-data hr={} lr={} dataset={}",
        hr.len(),
        hr.len(),
        store.dataset(&a.name).display()
    ))
}

fn resolve_config(args: &ConfigArgs, extra: &[String]) -> Result<ExperimentConfig> {
    let text = match (&args.config, &args.preset) {
        (Some(path), _) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        (None, preset) => preset.as_deref().unwrap_or("desk").parse::<Preset>().map(ExperimentConfig::preset)?.to_text(),
    };
    let overrides: Vec<String> = args.set.iter().chain(extra).cloned().collect();
    Ok(ExperimentConfig::parse_with_overrides(&text, &overrides)?)
}

fn cmd_train(store: &Store, a: TrainArgs) -> Result<String> {
    let extra: Vec<String> = a.seed.map(|s| format!("train.seed={s}")).into_iter().collect();
    let mut cfg = resolve_config(&a.cfg, &extra)?;
    if let Some(steps) = a.steps {
        ensure!(steps > 0, "--steps must be positive");
        cfg.train = cfg.train.with_total_iters(steps);
    }
    cfg.validate()?;
    let hr_dir = store.hr_dir(&a.data);
    let hr = load_dir(&hr_dir).with_context(|| format!("dataset '{}' not found; run make-data first", a.data))?;
    let data = TrainingSet::from_hr(hr, &cfg)?;
    let run = store.run(&a.run);

    let (mut state, mut trace) = if a.resume {
        let state = TrainState::load(&run.last(), &cfg)
            .with_context(|| format!("resuming run '{}'", a.run))?;
        let trace = match std::fs::read_to_string(run.loss_csv()) {
            Ok(text) => parse_loss_csv(&text)?,
            Err(_) => Vec::new(),
        };
        info!("resuming at iteration {}", state.iteration);
        (state, trace)
    } else {
        if run.last().exists() {
            warn!("overwriting run '{}'", a.run);
        }
        (TrainState::new(&cfg)?, Vec::new())
    };
    trace.retain(|r| r.iter <= state.iteration);
    let total = cfg.train.total_iters;
    ensure!(
        state.iteration < total,
        "run '{}' already completed {} of {total} iterations",
        a.run,
        state.iteration
    );
    info!(
        "training {} parameters on {} volume(s) for {total} iterations",
        state.model.params.count(),
        data.pairs.len()
    );
    train(&mut state, &data, &cfg, total, Some(&run), &mut trace)?;
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "ok command=train iterations={} loss={last:.6} checkpoint={}",
        state.iteration,
        run.last().display()
    ))
}

fn resolve_ckpt(store: &Store, ckpt: &str, run: &str) -> Result<PathBuf> {
    let path = if ckpt == "last" {
        store.run(run).last()
    } else {
        PathBuf::from(ckpt)
    };
    ensure!(path.exists(), "checkpoint {} not found", path.display());
    Ok(path)
}

/// Explicit config, else the `config.cfg` written next to the checkpoint.
fn checkpoint_config(ckpt: &Path, config: Option<&Path>) -> Result<ExperimentConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("config.cfg"),
    };
    ExperimentConfig::load(&path).with_context(|| format!("loading configuration {}", path.display()))
}

fn eval(store: &Store, a: EvalArgs) -> Result<String> {
    let (model, label, default_out): (Box<dyn SrModel>, String, PathBuf) = match (&a.model, &a.ckpt) {
        (Some(name), None) => {
            ensure!(name == "trilinear", "unknown built-in model '{name}' (available: trilinear)");
            let scale = match a.scale {
                Some(s) => s,
                None => match store.lr_scales(&a.data).as_slice() {
                    [s] => *s,
                    [] => bail!("dataset '{}' has no LR volumes; run make-data first", a.data),
                    many => bail!("dataset '{}' has several LR scales {many:?}; pass --scale", a.data),
                },
            };
            ensure!(a.tile > 0, "--tile must be positive");
            let out = store.dataset(&a.data).join(format!("eval_trilinear_x{scale}.csv"));
            (Box::new(TrilinearModel { scale, tile: a.tile }), "trilinear".into(), out)
        }
        (None, Some(ckpt)) => {
            let path = resolve_ckpt(store, ckpt, &a.run)?;
            let cfg = checkpoint_config(&path, a.config.as_deref())?;
            let model = load_model(&path, &cfg).with_context(|| format!("loading {}", path.display()))?;
            if a.scale.is_some_and(|s| s != cfg.model.scale) {
                bail!("--scale {} disagrees with the checkpoint's scale {}", a.scale.unwrap(), cfg.model.scale);
            }
            let out = path.parent().unwrap_or(Path::new(".")).join(format!("eval_{}.csv", a.data));
            (Box::new(model), path.display().to_string(), out)
        }
        _ => unreachable!("clap enforces exactly one model source"),
    };
    let s = model.scale();
    let pairs = load_pairs(&store.hr_dir(&a.data), &store.lr_dir(&a.data, s))
        .with_context(|| format!("loading dataset '{}' at scale {s}", a.data))?;
    let report = evaluate(&pairs, model.as_ref(), !a.no_padding)?;
    let out = a.out.unwrap_or(default_out);
    write_atomic(&out, report.to_csv().as_bytes())?;
    print!("{}", report.to_text());
    let mean = report.aggregate().context("no volume had a slice with enough foreground to score")?;
    Ok(format!(
        "ok command=eval model={label} volumes={} psnr={:.4} ssim={:.4} nrmse={:.4} report={}",
        pairs.len(),
        mean.psnr,
        mean.ssim,
        mean.nrmse,
        out.display()
    ))
}

fn lam(store: &Store, a: LamArgs) -> Result<String> {
    let path = resolve_ckpt(store, &a.ckpt, &a.run)?;
    let cfg = checkpoint_config(&path, a.config.as_deref())?;
    let model = load_model(&path, &cfg).with_context(|| format!("loading {}", path.display()))?;
    let s = cfg.model.scale;
    let volumes = load_dir(&store.lr_dir(&a.data, s)).with_context(|| format!("loading dataset '{}' at scale {s}", a.data))?;
    let lr = volumes
        .get(a.volume)
        .with_context(|| format!("--volume {} out of range ({} volumes)", a.volume, volumes.len()))?;
    let dims = lr.dims();
    let center = match &a.center {
        Some(c) => [c[0], c[1], c[2]],
        None => dims.map(|d| d / 2),
    };
    ensure!(
        (0..3).all(|i| center[i] < dims[i]),
        "--center {center:?} outside the volume {dims:?}"
    );
    let extents = model.context_extents();
    let region = lr.crop_centered(center, extents[0], true)?;
    let bx = PredictionBox::centered(cfg.model.output_edge(), a.box_size);
    let opts = LamOptions { steps: a.steps, baseline_sigma: a.sigma };
    let map = lam_3d(&model, &region, bx, &opts)?;

    let out = a.out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("lam"));
    write_atomic(&out.join("lam.csv"), lam_csv(&map).as_bytes())?;
    save_lam_heatmap(&map, 8, &out.join("lam.png"))?;
    map.attribution.save(&out.join(format!("attribution.{VOLUME_EXT}")))?;
    let summary = format!(
        "volume {}\ncenter {center:?}\nregion edge {}\nprediction box {:?} + {:?}\nsteps {}\nbaseline sigma {}\n\
         diffusion index {:.4}\nF(input) {:.6e}\nF(baseline) {:.6e}\nattribution total {:.6e}\ncompleteness error {:.4e}\n",
        lr.name,
        extents[0],
        bx.origin,
        bx.size,
        opts.steps,
        opts.baseline_sigma,
        map.di,
        map.f_input,
        map.f_baseline,
        map.signed_total(),
        map.completeness_error()
    );
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    Ok(format!(
        "ok command=lam di={:.4} completeness_error={:.3e} out={}",
        map.di,
        map.completeness_error(),
        out.display()
    ))
}

fn profile(store: &Store, a: ProfileArgs) -> Result<String> {
    ensure!(!a.resolutions.is_empty(), "--resolutions is empty");
    ensure!(a.batch > 0, "--batch must be positive");
    let presets = if a.preset.is_empty() && a.config.is_empty() {
        vec!["l1".to_string(), "l3".to_string()]
    } else {
        a.preset.clone()
    };
    let mut configs = Vec::new();
    for p in &presets {
        let preset: Preset = p.parse()?;
        configs.push((p.to_ascii_uppercase(), ExperimentConfig::preset(preset).model));
    }
    for path in &a.config {
        let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        let label = path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
        configs.push((label, cfg.model));
    }
    let opts = ProfileOptions {
        batch: a.batch,
        measure_up_to: a.measure_up_to_mib.map(|m| m * 1024 * 1024),
        seed: 0,
    };
    let profile = profile_memory(&configs, &a.resolutions, &opts);
    let out = a.out.unwrap_or_else(|| store.root.join("profile"));
    let csv = out.join("profile.csv");
    write_atomic(&csv, profile.to_csv().as_bytes())?;
    profile.save_plot(&out.join("profile.png"))?;
    for r in &profile.rows {
        match &r.invalid {
            None => info!(
                "{:>6} @ {:>4}: ITEs/level {:?}, {:.1} MiB analytic",
                r.label,
                r.resolution,
                r.ites_per_level(),
                r.analytic_bytes() as f64 / (1024.0 * 1024.0)
            ),
            Some(why) => info!("{:>6} @ {:>4}: invalid ({why})", r.label, r.resolution),
        }
    }
    let valid = profile.rows.iter().filter(|r| r.is_valid()).count();
    Ok(format!(
        "ok command=profile rows={} valid={valid} csv={}",
        profile.rows.len(),
        csv.display()
    ))
}
