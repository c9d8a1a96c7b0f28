use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvrelight_core::datagen::{generate_dataset, read_dataset, GenConfig, OlatScene};
use mvrelight_core::lightmap::EditsDoc;
use mvrelight_core::model::VelocityNet;
use mvrelight_core::trainer::{evaluate, train, EvalReport, TrainConfig};
use mvrelight_core::Image;
use rand::SeedableRng;

use crate::relighter::Relighter;
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "mvrelight", version, about = "Multi-view one-step relighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic OLAT dataset.
    GenData(GenDataArgs),
    /// Train a velocity network on a dataset.
    Train(TrainArgs),
    /// Relight a set of views with one forward pass.
    Relight(RelightArgs),
    /// Score a checkpoint on held-out scenes.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Training scenes.
    #[arg(long, default_value_t = 64)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub test_scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cameras per test scene; defaults to the training rig.
    #[arg(long)]
    pub test_cameras: Option<usize>,
    #[arg(long)]
    pub auto_exposure: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training configuration; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelightArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG views, reference first.
    #[arg(long, num_args = 1.., required = true)]
    pub views: Vec<PathBuf>,
    #[arg(long)]
    pub edits: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root (its `test` split is used when present) or a split directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 4)]
    pub pairs_per_scene: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint to serve; without one `/relight` answers 503.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset root or split listed by `/scenes` and used by `/compose-gt`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 2)]
    pub max_concurrent: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Relight(a) => relight(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        train_scenes: a.scenes,
        test_scenes: a.test_scenes,
        seed: a.seed,
        test_cameras: a.test_cameras,
        auto_exposure: a.auto_exposure,
        ..Default::default()
    };
    generate_dataset(&cfg, &a.out)?;
    eprintln!("wrote {} train and {} test scenes to {}", a.scenes, a.test_scenes, a.out.display());
    Ok(())
}

/// The `test` split under `root` when it exists, else `root` itself.
fn test_split(root: &Path) -> Result<Vec<OlatScene>> {
    let test = root.join("test");
    Ok(read_dataset(if test.is_dir() { &test } else { root })?)
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg: TrainConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let train_root = a.data.join("train");
    let train_set = read_dataset(&train_root)?;
    let test_set = if a.data.join("test").is_dir() { read_dataset(&a.data.join("test"))? } else { Vec::new() };
    let cam = train_set.first().and_then(|s| s.scene.cameras.first()).context("training set has no cameras")?;
    let f = cfg.codec_factor;
    if cam.width != cfg.model.latent_width * f || cam.height != cfg.model.latent_height * f {
        bail!(
            "data is {}x{} but the model expects {}x{}",
            cam.width,
            cam.height,
            cfg.model.latent_width * f,
            cfg.model.latent_height * f
        );
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), toml::to_string(&cfg)?)?;
    let mut net = VelocityNet::new(cfg.model.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed))?;
    eprintln!("{} parameters, {} steps", cfg.model.num_parameters(), cfg.steps);
    let outcome = train(&cfg, &train_set, &test_set, &mut net, Some(&a.out), |r| {
        if (r.step + 1) % 100 == 0 {
            eprintln!("step {:>6}  total {:.5}  lbm {:.5}", r.step + 1, r.total, r.l_lbm);
        }
    })?;
    for (step, r) in &outcome.evals {
        eprintln!(
            "eval@{step}: other psnr {:.2} (floor {:.2}), ΔE00 {:.2} (floor {:.2})",
            r.model.other.psnr, r.floor.other.psnr, r.model.other.delta_e00, r.floor.other.delta_e00
        );
    }
    eprintln!("done in {:.0}s", outcome.seconds);
    Ok(())
}

pub fn relight(a: &RelightArgs) -> Result<()> {
    let relighter = Relighter::load(&a.ckpt)?;
    let views = a
        .views
        .iter()
        .map(|p| Image::load_png(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let text = std::fs::read_to_string(&a.edits).with_context(|| format!("reading {}", a.edits.display()))?;
    let edits = EditsDoc::from_json(&text)?.edits;
    let started = std::time::Instant::now();
    let relit = relighter.relight(&views, &edits)?;
    let ms = started.elapsed().as_secs_f64() * 1e3;
    std::fs::create_dir_all(&a.out)?;
    for (i, img) in relit.images.iter().enumerate() {
        img.save_png(a.out.join(format!("relit_{i}.png")))?;
    }
    eprintln!("relit {} views in {ms:.1} ms ({} forward pass)", views.len(), relit.forward_passes);
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let relighter = Relighter::load(&a.ckpt)?;
    let scenes = test_split(&a.data)?;
    let report = evaluate(relighter.net(), &scenes, a.views, a.pairs_per_scene, a.seed, relighter.codec(), relighter.bridge())?;
    write_report(&a.report, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = format!("{}\n", EvalReport::CSV_HEADER);
    for row in report.csv_rows() {
        text.push_str(&row);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let relighter = a.ckpt.as_deref().map(Relighter::load).transpose()?;
    let scenes = a.data.as_deref().map(test_split).transpose()?.unwrap_or_default();
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad host/port")?;
    let state = AppState::new(relighter, scenes, a.max_concurrent);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(server::serve(state, addr))
}
