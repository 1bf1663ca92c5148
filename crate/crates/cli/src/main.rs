//! Command-line front end: toy scenes, training, rendering, evaluation,
//! mesh extraction and dataset corruption.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use augnerf::corrupt::{corrupt_image, Corruption};
use augnerf::field::RadianceField;
use augnerf::forward::render_view;
use augnerf::geometry::{export_density_grid, marching_cubes};
use augnerf::metrics::MetricReport;
use augnerf::raster::save_depth;
use augnerf::scene::{generate_toy_scene, load_scene, save_scene, SceneDataset, View};
use augnerf::train::{log_csv, render_settings, train};
use clap::{error::ErrorKind, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;

#[derive(Parser, Debug)]
#[command(
    name = "augnerf",
    version,
    about = "Adversarially augmented radiance field training"
)]
struct Cli {
    /// Overrides `train.seed` and seeds stochastic subcommands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration (`version = 1` plus optional
    /// `[train]`, `[attack]`, `[data]` and `[toy]` tables).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "augnerf-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the configured toy scene and write it as a dataset.
    Toy,
    /// Fit a field to a dataset; writes checkpoints and `log.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Render colour and depth for every view of a split.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Per-view PSNR, SSIM and average metric as `metrics.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Extract the density isosurface as `mesh.obj`.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, default_value_t = 25.0)]
        threshold: f64,
        /// Also write the sampled density grid.
        #[arg(long)]
        grid: bool,
    },
    /// Copy a dataset with noise applied to the images of a split.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: Corruption,
        #[arg(long)]
        severity: usize,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

impl Split {
    fn views(self, scene: &SceneDataset) -> Vec<(&'static str, &View)> {
        let train = scene.train.iter().map(|v| ("train", v));
        let test = scene.test.iter().map(|v| ("test", v));
        match self {
            Split::Train => train.collect(),
            Split::Test => test.collect(),
            Split::All => train.chain(test).collect(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, Command::Train { .. }) && cli.config.is_none() {
        Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                "`train` needs a run configuration: --config <CONFIG>",
            )
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.ends_with(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let seed = cli.seed.unwrap_or(config.train.seed);
    config.train.seed = seed;
    let out = cli.out.as_path();
    let name = match &cli.command {
        Command::Toy => "toy",
        Command::Train { .. } => "train",
        Command::Render { .. } => "render",
        Command::Eval { .. } => "eval",
        Command::Mesh { .. } => "mesh",
        Command::Corrupt { .. } => "corrupt",
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Toy => toy(&config, out)?,
        Command::Train { data } => train_cmd(&config, data, out)?,
        Command::Render {
            checkpoint,
            data,
            split,
        } => render(&config, checkpoint, data, *split, out)?,
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(&config, checkpoint, data, *split, out)?,
        Command::Mesh {
            checkpoint,
            resolution,
            threshold,
            grid,
        } => mesh(checkpoint, *resolution, *threshold, *grid, out)?,
        Command::Corrupt {
            data,
            kind,
            severity,
            split,
        } => corrupt(&config, data, *kind, *severity, *split, seed, out)?,
    }
    manifest::write(out, name, seed, &config)
}

fn toy(config: &Config, out: &Path) -> Result<()> {
    let (scene, field) = generate_toy_scene(&config.toy)?;
    save_scene(&scene, out)?;
    let path = out.join("toy_field.json");
    std::fs::write(&path, serde_json::to_string_pretty(&field)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {} train and {} test views to {}",
        scene.train.len(),
        scene.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: &Config, data: &Path, out: &Path) -> Result<()> {
    let scene = load_scene(data, &config.data)?;
    let outcome = train(&scene, &config.train, &config.attack, Some(out))?;
    let path = out.join("log.csv");
    std::fs::write(&path, log_csv(&outcome.log))
        .with_context(|| format!("writing {}", path.display()))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "iteration {}: loss {:.6}{}",
            last.iteration,
            last.loss.total,
            last.eval_psnr
                .map(|p| format!(", held-out PSNR {p:.3} dB"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<RadianceField> {
    RadianceField::load(path).context("loading checkpoint")
}

fn file_stem(view: &View) -> String {
    Path::new(&view.name)
        .file_stem()
        .map_or_else(|| view.name.clone(), |s| s.to_string_lossy().into_owned())
}

fn render(config: &Config, checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    let field = load_checkpoint(checkpoint)?;
    let scene = load_scene(data, &config.data)?;
    let settings = render_settings(&scene, &config.train, &config.attack)?;
    for (split_name, view) in split.views(&scene) {
        let r = render_view(&field, &view.camera, config.train.sampling(), settings)?;
        let stem = format!("{split_name}_{}", file_stem(view));
        r.color.save_png(&out.join(format!("{stem}.png")))?;
        let depth_stem = out.join(format!("{stem}_depth"));
        save_depth(
            &depth_stem,
            &r.depth,
            view.camera.width,
            view.camera.height,
            view.camera.near,
            view.camera.far,
        )?;
    }
    Ok(())
}

fn eval(config: &Config, checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    let field = load_checkpoint(checkpoint)?;
    let scene = load_scene(data, &config.data)?;
    let settings = render_settings(&scene, &config.train, &config.attack)?;
    let views = split.views(&scene);
    anyhow::ensure!(
        !views.is_empty(),
        "split {split:?} of {} is empty",
        data.display()
    );
    let mut csv = String::from("view,psnr,ssim,average\n");
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for (split_name, view) in &views {
        let r = render_view(&field, &view.camera, config.train.sampling(), settings)?;
        let m = MetricReport::measure(&r.color, &view.image, None)?;
        let name = file_stem(view);
        writeln!(
            csv,
            "{split_name}/{name},{},{},{}",
            m.psnr, m.ssim, m.average
        )?;
        psnr += m.psnr;
        ssim += m.ssim;
    }
    let n = views.len() as f64;
    let mean = MetricReport::new(psnr / n, ssim / n, None);
    writeln!(csv, "mean,{},{},{}", mean.psnr, mean.ssim, mean.average)?;
    let path = out.join("metrics.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("PSNR {:.3} dB, SSIM {:.4}", mean.psnr, mean.ssim);
    Ok(())
}

fn mesh(
    checkpoint: &Path,
    resolution: usize,
    threshold: f64,
    grid: bool,
    out: &Path,
) -> Result<()> {
    let field = load_checkpoint(checkpoint)?;
    let densities = export_density_grid(&field, resolution)?;
    if grid {
        densities.save(&out.join("density"))?;
    }
    let mesh = marching_cubes(&densities, threshold);
    mesh.save_obj(&out.join("mesh.obj"))?;
    println!(
        "{} vertices, {} triangles",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

fn corrupt(
    config: &Config,
    data: &Path,
    kind: Corruption,
    severity: usize,
    split: Split,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if severity == 0 {
        return copy_tree(data, out);
    }
    // rejects the severity before anything is written
    kind.parameter(severity)?;
    let mut scene = load_scene(data, &config.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = match split {
        Split::Train => (true, false),
        Split::Test => (false, true),
        Split::All => (true, true),
    };
    if train {
        for v in &mut scene.train {
            v.image = corrupt_image(&v.image, kind, severity, &mut rng)?;
        }
    }
    if test {
        for v in &mut scene.test {
            v.image = corrupt_image(&v.image, kind, severity, &mut rng)?;
        }
    }
    save_scene(&scene, out)?;
    Ok(())
}

/// Severity zero is the identity, so the dataset is copied file for file.
fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to).with_context(|| format!("creating {}", to.display()))?;
    for entry in std::fs::read_dir(from).with_context(|| format!("reading {}", from.display()))? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), &target)
                .with_context(|| format!("copying {}", entry.path().display()))?;
        }
    }
    Ok(())
}
