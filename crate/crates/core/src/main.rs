use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lowsplat::adapter::AdapterParams;
use lowsplat::benchmark::{
    build_benchmark, evaluate, ingest_dataset, load_manifest, load_view_tree, predict_targets, synth_scene,
    train_adapter_on_scenes, write_scene, CameraEntry, Level, LevelMode, MetricsTable, SceneData, ViewKey,
};
use lowsplat::camera::CameraView;
use lowsplat::config::RunConfig;
use lowsplat::gradcheck;
use lowsplat::imaging::{load_image, save_image, Image};
use lowsplat::lowlight::{degrade, sample_params};
use lowsplat::mvs::reconstruct;
use lowsplat::render::render;
use lowsplat::rng::{SeededRng, StreamId};
use lowsplat::scene::{scene_read, scene_write};
use lowsplat::Error;

#[derive(Parser, Debug)]
#[command(name = "lowsplat", version, about = "Lowlight two-view Gaussian splatting toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize)]
struct GlobalArgs {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (1 is the determinism reference).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "lowsplat-out")]
    out: PathBuf,
    /// Config override `section.key=value`, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Render synthetic scenes into the dataset layout.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        gaussians: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Apply the lowlight degradation to individual images.
    Degrade {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Stream name; image `i` uses view id `i`.
        #[arg(long, default_value = "cli")]
        scene_id: String,
    },
    /// Write a degraded benchmark tree from a dataset.
    BuildBenchmark {
        #[arg(long)]
        dataset: PathBuf,
        /// clean, gamma, exposure, shift or blur.
        #[arg(long)]
        level: Option<String>,
        /// Enable only the level's own stage instead of all stages up to it.
        #[arg(long)]
        isolated: bool,
    },
    /// Train the adapter on the context views of a dataset.
    TrainAdapter {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from an existing parameter file.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Reconstruct one scene from its two context views.
    Reconstruct {
        /// Manifest file, benchmark scene directory or dataset scene directory.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Supervise refinement with the clean target views.
        #[arg(long)]
        supervise_targets: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a scene file from the cameras of a camera file.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
    },
    /// Compare predicted views against targets.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "eval")]
        condition: String,
    },
    /// Reconstruct every scene at every degradation level.
    Ablation {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        isolated: bool,
    },
    /// Finite-difference checks of the renderer, adapter and loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 25)]
        samples: usize,
    },
}

type CliResult<T> = Result<T, Error>;

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::InvalidConfig(_) | Error::InvalidArgument(_) => ("invalid-config", 2),
        Error::MissingFile(_)
        | Error::UnsupportedFormat { .. }
        | Error::CorruptData { .. }
        | Error::MalformedRecord { .. }
        | Error::Io { .. }
        | Error::EmptyInput(_) => ("missing-input", 3),
        _ => ("stage-failure", 4),
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct RunEcho<'a> {
    version: &'a str,
    command: &'a Command,
    out: &'a Path,
    config: &'a RunConfig,
}

fn read_adapter(path: Option<&Path>) -> CliResult<Option<AdapterParams>> {
    path.map(AdapterParams::read).transpose()
}

fn load_dataset(root: &Path) -> CliResult<Vec<lowsplat::benchmark::SceneManifest>> {
    let ingested = ingest_dataset(root)?;
    for (id, reason) in &ingested.skipped {
        eprintln!("warning: skipped scene {id}: {reason}");
    }
    if ingested.manifests.is_empty() {
        return Err(Error::EmptyInput(format!("no usable scenes under {}", root.display())));
    }
    Ok(ingested.manifests)
}

fn level_mode(isolated: bool, cfg: &RunConfig) -> LevelMode {
    if isolated {
        LevelMode::Isolated
    } else {
        cfg.benchmark.mode
    }
}

fn validate_inputs(cmd: &Command) -> CliResult<()> {
    let paths: Vec<&Path> = match cmd {
        Command::Synth { .. } | Command::Gradcheck { .. } => vec![],
        Command::Degrade { input, .. } => input.iter().map(PathBuf::as_path).collect(),
        Command::BuildBenchmark { dataset, .. } => vec![dataset],
        Command::TrainAdapter { dataset, init, .. } => [Some(dataset.as_path()), init.as_deref()].into_iter().flatten().collect(),
        Command::Reconstruct { scene, adapter, .. } => {
            [Some(scene.as_path()), adapter.as_deref()].into_iter().flatten().collect()
        }
        Command::Render { scene, cameras } => vec![scene, cameras],
        Command::Evaluate { pred, target, .. } => vec![pred, target],
        Command::Ablation { dataset, adapter, .. } => {
            [Some(dataset.as_path()), adapter.as_deref()].into_iter().flatten().collect()
        }
    };
    paths.into_iter().try_for_each(require)
}

/// Applies subcommand flags that mirror config keys.
fn apply_flags(cmd: &Command, cfg: &mut RunConfig) -> CliResult<()> {
    match cmd {
        Command::Synth {
            scenes,
            size,
            gaussians,
            views,
        } => {
            if let Some(v) = scenes {
                cfg.benchmark.scenes = *v;
            }
            if let Some(v) = size {
                cfg.synth.size = *v;
            }
            if let Some(v) = gaussians {
                cfg.synth.n_gaussians = *v;
            }
            if let Some(v) = views {
                cfg.synth.n_views = *v;
            }
        }
        Command::BuildBenchmark { level: Some(l), .. } => cfg.benchmark.level = Level::parse(l)?,
        Command::TrainAdapter { epochs: Some(e), .. } => cfg.adapter.train.epochs = *e,
        Command::Reconstruct { steps: Some(s), .. } => cfg.pipeline.refine.steps = *s,
        _ => {}
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides)?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.global.threads {
        cfg.threads = t;
    }
    apply_flags(&cli.command, &mut cfg)?;
    cfg.validate()?;
    validate_inputs(&cli.command)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("cannot configure {} threads: {e}", cfg.threads)))?;
    }
    let out = cli.global.out.as_path();
    create_dir(out)?;
    let echo = RunEcho {
        version: env!("CARGO_PKG_VERSION"),
        command: &cli.command,
        out,
        config: &cfg,
    };
    write_text(&out.join("run.json"), &(serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n"))?;

    match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg, out),
        Command::Degrade { input, scene_id } => cmd_degrade(&cfg, out, input, scene_id),
        Command::BuildBenchmark { dataset, isolated, .. } => {
            let manifests = load_dataset(dataset)?;
            let built = build_benchmark(
                &manifests,
                &cfg.lowlight,
                cfg.seed,
                out,
                cfg.benchmark.level,
                level_mode(*isolated, &cfg),
            )?;
            println!("wrote {} scenes at level {}", built.len(), cfg.benchmark.level.label());
            Ok(())
        }
        Command::TrainAdapter { dataset, init, .. } => cmd_train_adapter(&cfg, out, dataset, init.as_deref()),
        Command::Reconstruct {
            scene,
            adapter,
            supervise_targets,
            ..
        } => cmd_reconstruct(&cfg, out, scene, adapter.as_deref(), *supervise_targets),
        Command::Render { scene, cameras } => cmd_render(&cfg, out, scene, cameras),
        Command::Evaluate {
            pred,
            target,
            condition,
        } => {
            let table = evaluate(condition, &load_view_tree(pred)?, &load_view_tree(target)?)?;
            table.write(out)?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Ablation {
            dataset,
            adapter,
            isolated,
        } => cmd_ablation(&cfg, out, dataset, adapter.as_deref(), level_mode(*isolated, &cfg)),
        Command::Gradcheck { scenes, samples } => cmd_gradcheck(&cfg, out, *scenes, *samples),
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    for k in 0..cfg.benchmark.scenes as u64 {
        let s = synth_scene(cfg.seed.wrapping_add(k), &cfg.synth)?;
        let m = write_scene(&s.data, out)?;
        scene_write(&s.truth, m.base_dir.join("truth.lsc"))?;
        println!("{}", m.scene_id);
    }
    Ok(())
}

fn cmd_degrade(cfg: &RunConfig, out: &Path, inputs: &[PathBuf], scene_id: &str) -> CliResult<()> {
    #[derive(Serialize)]
    struct Provenance {
        source: PathBuf,
        params: lowsplat::lowlight::DegradeParams,
        stream: StreamId,
    }
    for (i, path) in inputs.iter().enumerate() {
        let img = load_image(path)?;
        let stream = StreamId::new(scene_id, i as u64);
        let params = sample_params(&cfg.lowlight, &mut SeededRng::new(cfg.seed, stream.clone()));
        let degraded = degrade(&img, &params, cfg.lowlight.stages)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_image(&degraded, out.join(format!("{stem}.png")))?;
        let prov = Provenance {
            source: path.clone(),
            params,
            stream,
        };
        write_text(
            &out.join(format!("{stem}.params.json")),
            &(serde_json::to_string_pretty(&prov).expect("provenance serializes") + "\n"),
        )?;
    }
    Ok(())
}

fn cmd_train_adapter(cfg: &RunConfig, out: &Path, dataset: &Path, init: Option<&Path>) -> CliResult<()> {
    let scenes: Vec<SceneData> = load_dataset(dataset)?.iter().map(|m| m.load()).collect::<CliResult<_>>()?;
    let init = match init {
        Some(p) => AdapterParams::read(p)?,
        None => AdapterParams::init(cfg.adapter.arch, cfg.adapter.lambda, cfg.seed)?,
    };
    let outcome = train_adapter_on_scenes(&scenes, &cfg.lowlight, &cfg.curriculum, &cfg.adapter.train, &init, cfg.seed)?;
    outcome.params.write(out.join("adapter.txt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.12e}\n"));
    }
    write_text(&out.join("loss_trace.csv"), &csv)?;
    println!("best loss {:.6e} after {} epochs", outcome.best_loss, outcome.loss_trace.len());
    Ok(())
}

fn cmd_reconstruct(cfg: &RunConfig, out: &Path, scene: &Path, adapter: Option<&Path>, supervise: bool) -> CliResult<()> {
    let manifest = load_manifest(scene)?;
    let data = manifest.load()?;
    let adapter = read_adapter(adapter)?;
    let targets: Vec<(Image, CameraView)> = data.targets().iter().map(|t| (t.image.clone(), t.camera)).collect();
    let supervision = supervise.then_some(targets.as_slice());
    let rec = reconstruct(&data.contexts(), adapter.as_ref(), &cfg.pipeline, supervision)?;
    scene_write(&rec.scene, out.join("scene.lsc"))?;
    let renders = out.join("renders");
    create_dir(&renders)?;
    for t in data.targets() {
        let img = render(&rec.scene, &t.camera, cfg.pipeline.refine.background).image;
        save_image(&img, renders.join(format!("{}.png", t.name)))?;
    }
    let mut csv = String::from("step,loss,psnr\n");
    for t in &rec.trace {
        csv.push_str(&format!("{},{:.12e},{:.6}\n", t.step, t.loss, t.psnr));
    }
    write_text(&out.join("trace.csv"), &csv)?;
    println!("{} primitives, final loss {:.6e}", rec.scene.len(), rec.trace.last().map_or(f64::NAN, |t| t.loss));
    Ok(())
}

fn cmd_render(cfg: &RunConfig, out: &Path, scene: &Path, cameras: &Path) -> CliResult<()> {
    let scene = scene_read(scene)?;
    let text = fs::read_to_string(cameras).map_err(|e| Error::Io {
        path: cameras.to_path_buf(),
        source: e,
    })?;
    let entries: Vec<CameraEntry> = serde_json::from_str(&text).map_err(|e| Error::CorruptData {
        path: cameras.to_path_buf(),
        reason: e.to_string(),
    })?;
    for e in &entries {
        let cam = CameraView::try_from(&e.camera)?;
        save_image(&render(&scene, &cam, cfg.pipeline.refine.background).image, out.join(format!("{}.png", e.name)))?;
    }
    Ok(())
}

fn cmd_ablation(cfg: &RunConfig, out: &Path, dataset: &Path, adapter: Option<&Path>, mode: LevelMode) -> CliResult<()> {
    let manifests = load_dataset(dataset)?;
    let adapter = read_adapter(adapter)?;
    let sources: Vec<SceneData> = manifests.iter().map(|m| m.load()).collect::<CliResult<_>>()?;
    let targets: BTreeMap<ViewKey, Image> = lowsplat::benchmark::target_map(&sources);
    let mut table = MetricsTable::default();
    for level in Level::ALL {
        let dir = out.join("levels").join(format!("{level:?}").to_lowercase());
        let built = build_benchmark(&manifests, &cfg.lowlight, cfg.seed, &dir, level, mode)?;
        let mut preds = BTreeMap::new();
        for m in &built {
            preds.extend(predict_targets(&m.load()?, adapter.as_ref(), &cfg.pipeline)?);
        }
        table.append(evaluate(level.label(), &preds, &targets)?);
    }
    table.write(out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, out: &Path, scenes: usize, samples: usize) -> CliResult<()> {
    let reports = [
        gradcheck::renderer(cfg.seed, scenes, 50, 32, samples)?,
        gradcheck::adapter(cfg.seed, 500)?,
        gradcheck::losses(cfg.seed, 1000)?,
    ];
    let mut ok = true;
    for r in &reports {
        let pass = r.rate() >= 0.95;
        ok &= pass;
        println!(
            "{:<9} {:>5}/{:<5} {:>7.2}%  {}",
            r.suite,
            r.passed,
            r.checked,
            100.0 * r.rate(),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    write_text(
        &out.join("gradcheck.json"),
        &(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"),
    )?;
    if ok {
        Ok(())
    } else {
        Err(Error::DegenerateGeometry("finite-difference agreement below 95%".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (cat, code) = category(&e);
            eprintln!("error[{cat}]: {e}");
            ExitCode::from(code)
        }
    }
}
