use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorsplat::config::{RunConfig, VoxelSize};
use anchorsplat::decoders::Head;
use anchorsplat::scene_io::{
    load_colmap_text, load_transforms_json, split_train_test, write_colmap_text, Camera, Scene,
    SplitRule,
};
use anchorsplat::synthetic::{toy_scene, ToySceneConfig};
use anchorsplat::trainer::{evaluate, load_checkpoint, save_checkpoint, train, LogRow, TrainState};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "train_log.csv";
const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(
    name = "anchorsplat",
    version,
    about = "Train and render anchor-scaffolded Gaussian splatting scenes on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, a CSV log and the effective config.
    Train(TrainArgs),
    /// Render dataset views or a camera described in JSON to PNG.
    Render(RenderArgs),
    /// Score the held-out views of a dataset.
    Eval(EvalArgs),
    /// Summarize a checkpoint and export anchor positions as PLY.
    Inspect(InspectArgs),
    /// Write the synthetic five-Gaussian dataset as a COLMAP text scene.
    Toy(ToyArgs),
}

#[derive(Args)]
struct FilterFlags {
    /// Keep anchors outside the view frustum.
    #[arg(long)]
    no_frustum_filter: bool,
    /// Keep Gaussians regardless of their opacity.
    #[arg(long)]
    no_opacity_filter: bool,
}

impl FilterFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.no_frustum_filter {
            cfg.filter.frustum = false;
        }
        if self.no_opacity_filter {
            cfg.filter.opacity = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// COLMAP text scene directory, or a transforms.json file (or its directory).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base voxel size, either `auto` or a positive number.
    #[arg(long, value_parser = VoxelSize::parse)]
    voxel_size: Option<VoxelSize>,
    #[arg(long)]
    no_grow: bool,
    #[arg(long)]
    no_prune: bool,
    #[command(flatten)]
    filters: FilterFlags,
    /// Hold out every n-th view, starting with view 0.
    #[arg(long)]
    test_every: Option<usize>,
    /// Print a progress line every n iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset view index to render; may be repeated. Needs --data.
    #[arg(long, requires = "data", conflicts_with = "camera")]
    view: Vec<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON camera with intrinsics and a row-major world-to-camera matrix.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write stats.csv with visible-anchor and Gaussian counts.
    #[arg(long)]
    dump_stats: bool,
    #[command(flatten)]
    filters: FilterFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for eval.csv and eval.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the held-out stride stored in the checkpoint.
    #[arg(long)]
    test_every: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Where to write the anchor point cloud; defaults to anchors.ply beside the checkpoint.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
}

/// Errors caused by bad input map to 2, broken invariants to 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<anchorsplat::Error>() {
        Some(anchorsplat::Error::Internal(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_scene(data: &Path, test_every: usize) -> Result<Scene> {
    let scene = if data.is_file() {
        load_transforms_json(data)?
    } else if data.join("transforms.json").is_file() {
        load_transforms_json(data.join("transforms.json"))?
    } else if data.join("cameras.txt").is_file() {
        load_colmap_text(data)?
    } else {
        bail!(
            "{}: no cameras.txt or transforms.json found",
            data.display()
        );
    };
    Ok(split_train_test(scene, &SplitRule::EveryNth(test_every))?)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = a.voxel_size {
        cfg.model.voxel_size = v;
    }
    if let Some(n) = a.test_every {
        cfg.train.test_every = n;
    }
    if a.no_grow {
        cfg.refine.grow = false;
    }
    if a.no_prune {
        cfg.refine.prune = false;
    }
    a.filters.apply(&mut cfg);
    cfg.validate()?;

    let scene = load_scene(&a.data, cfg.train.test_every)?;
    let mut state = TrainState::new(&scene, &cfg)?;
    create_dir(&a.out)?;
    // the echo carries the resolved voxel size so it reproduces this run
    write_file(&a.out.join(CONFIG_ECHO_FILE), state.config.to_toml())?;
    eprintln!(
        "{} views ({} train), {} anchors, voxel size {}",
        scene.len(),
        scene.train_indices().len(),
        state.grid.len(),
        state.grid.voxel_size
    );

    let log_path = a.out.join(LOG_FILE);
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{}", LogRow::CSV_HEADER)?;
    let mut io_err = None;
    train(&scene, &mut state, |row| {
        if io_err.is_none() {
            io_err = writeln!(log, "{}", row.to_csv()).err();
        }
        if a.log_every > 0 && row.iter % a.log_every == 0 {
            eprintln!(
                "iter {:>6}  loss {:.5}  psnr {:.2}  anchors {}  gaussians {}",
                row.iter, row.loss, row.psnr, row.anchors, row.gaussians
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    save_checkpoint(&state, &a.out.join(CHECKPOINT_FILE))?;
    if state.skipped_updates > 0 {
        eprintln!(
            "warning: {} updates skipped for non-finite gradients",
            state.skipped_updates
        );
    }
    println!("{}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mut state = load_checkpoint(&a.ckpt)?;
    a.filters.apply(&mut state.config);
    let jobs: Vec<(String, Camera)> = match (&a.camera, &a.data) {
        (Some(path), _) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            vec![(
                "render".to_string(),
                Camera::from_json(&text, &path.display().to_string())?,
            )]
        }
        (None, Some(data)) if !a.view.is_empty() => {
            let scene = load_scene(data, state.config.train.test_every)?;
            a.view
                .iter()
                .map(|&v| {
                    let cam = scene.cameras.get(v).ok_or_else(|| {
                        anyhow!("view {v} out of range for {} views", scene.len())
                    })?;
                    Ok((format!("view_{v:04}"), cam.clone()))
                })
                .collect::<Result<_>>()?
        }
        _ => bail!("pass either --camera <json> or --view <index> with --data <dir>"),
    };

    create_dir(&a.out)?;
    let mut stats = String::from("name,visible_anchors,candidates,gaussians,splats\n");
    for (name, cam) in &jobs {
        let view = state.render(cam)?;
        view.image().write_png(a.out.join(format!("{name}.png")))?;
        writeln!(
            stats,
            "{name},{},{},{},{}",
            view.visible.len(),
            view.candidates,
            view.gaussians.len(),
            view.splats.len()
        )?;
    }
    if a.dump_stats {
        write_file(&a.out.join("stats.csv"), &stats)?;
    }
    print!("{stats}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let test_every = a.test_every.unwrap_or(state.config.train.test_every);
    let scene = load_scene(&a.data, test_every)?;
    let views = scene.test_indices();
    if views.is_empty() {
        bail!("the test split of {} is empty", a.data.display());
    }
    let bytes = fs::metadata(&a.ckpt)
        .with_context(|| format!("reading {}", a.ckpt.display()))?
        .len();
    let report = evaluate(
        &scene,
        &state,
        &views,
        Some(bytes as f64 / (1u64 << 20) as f64),
    )?;
    create_dir(&a.out)?;
    write_file(&a.out.join("eval.csv"), report.to_csv())?;
    let json = report.to_json().to_string();
    write_file(&a.out.join("eval.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let grid = &state.grid;
    println!("anchors: {}", grid.len());
    println!("voxel_size: {}", grid.voxel_size);
    println!("iteration: {}", state.iteration);
    let counts = state.decoders.param_counts();
    for head in Head::ALL {
        println!("mlp.{}: {}", head.name(), counts[head as usize]);
    }
    println!("--- config ---\n{}", state.config.to_toml());

    let ply_path = a.ply.unwrap_or_else(|| {
        a.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join("anchors.ply")
    });
    let mut ply = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uint level\nend_header\n",
        grid.len()
    );
    for anchor in &grid.anchors {
        let p = anchor.position;
        writeln!(ply, "{:?} {:?} {:?} {}", p.x, p.y, p.z, anchor.level)?;
    }
    write_file(&ply_path, ply)?;
    println!("ply: {}", ply_path.display());
    Ok(())
}

fn cmd_toy(a: ToyArgs) -> Result<()> {
    let scene = toy_scene(&ToySceneConfig::default())?;
    write_colmap_text(&scene, &a.out)?;
    println!("{} views written to {}", scene.len(), a.out.display());
    Ok(())
}
