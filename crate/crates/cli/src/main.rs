use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mediasplat::grad::{fd_check, micro_inputs, micro_scene, FdOptions, Objective};
use mediasplat::hydrosim::{degrade, make_fixture, normalize_depth, FixtureSpec, MediumPreset};
use mediasplat::image::Image;
use mediasplat::io;
use mediasplat::medium::MediumMap;
use mediasplat::metrics::{MetricReport, Task};
use mediasplat::render::{render, render_restored, AlphaMode};
use mediasplat::train::{train, Checkpoint, Dataset, TrainConfig};

#[derive(Parser)]
#[command(name = "mediasplat", version, about = "Gaussian splatting in scattering media")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    Underwater,
    Fog,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    /// Object plus medium.
    Color,
    Object,
    Medium,
    Depth,
    /// Object with attenuation and backscatter removed.
    Restored,
    /// Accumulated opacity.
    Alpha,
    Transmittance,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Png,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    NovelView,
    Restoration,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade clean images with a scattering medium.
    Simulate {
        /// Directory of clean images (.png or .raw).
        #[arg(long)]
        clean: PathBuf,
        /// Directory of depth maps, paired with the clean images by sorted name.
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "underwater")]
        preset: PresetName,
        /// Overrides the preset attenuation, as `r,g,b`.
        #[arg(long, value_delimiter = ',', value_name = "R,G,B")]
        beta_d: Option<Vec<f64>>,
        /// Overrides the preset backscatter coefficient, as `r,g,b`.
        #[arg(long, value_delimiter = ',', value_name = "R,G,B")]
        beta_b: Option<Vec<f64>>,
        /// Overrides the preset veiling color, as `r,g,b`.
        #[arg(long, value_delimiter = ',', value_name = "R,G,B")]
        beta_inf: Option<Vec<f64>>,
    },
    /// Write a synthetic dataset with known geometry.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        gaussians: usize,
        #[arg(long, default_value_t = 12)]
        train_views: usize,
        #[arg(long, default_value_t = 3)]
        test_views: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, value_enum, default_value = "fog")]
        preset: PresetName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Standard deviation of the noise added to seed points.
        #[arg(long, default_value_t = 0.05)]
        init_noise: f64,
    },
    /// Optimize a scene; writes train_log.jsonl and checkpoints to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML configuration; keys not given take preset values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base configuration: desk, 10k or 15k.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one component for every camera in a camera file.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "color")]
        component: Component,
        #[arg(long, value_enum, default_value = "raw")]
        format: Format,
        /// Opacity blend weight; defaults to the checkpoint's schedule.
        #[arg(long)]
        alpha_w: Option<f64>,
    },
    /// Compare predictions with references, paired by sorted file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "novel-view")]
        task: TaskArg,
    },
    /// Finite-difference check of every loss term on a random micro-scene.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        gaussians: usize,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = FdOptions::default().step)]
        step: f64,
        #[arg(long, default_value_t = FdOptions::default().tolerance)]
        tol: f64,
        #[arg(long, default_value_t = FdOptions::default().kink_tolerance)]
        kink_tol: f64,
    },
}

fn preset_of(name: PresetName) -> MediumPreset {
    match name {
        PresetName::Underwater => MediumPreset::underwater(),
        PresetName::Fog => MediumPreset::fog(),
    }
}

fn triple(flag: &str, v: &Option<Vec<f64>>, fallback: [f64; 3]) -> Result<[f64; 3]> {
    match v.as_deref() {
        None => Ok(fallback),
        Some(&[r, g, b]) => Ok([r, g, b]),
        Some(other) => bail!("--{flag} needs three comma-separated values, got {}", other.len()),
    }
}

fn first_channel(img: &Image) -> Image {
    Image::from_fn(img.width(), img.height(), 1, |x, y, _| img.get(x, y, 0))
}

fn simulate(
    clean: &Path,
    depth: &Path,
    out: &Path,
    preset: MediumPreset,
) -> Result<()> {
    let cleans = io::list_images(clean)?;
    let depths = io::list_images(depth)?;
    if cleans.len() != depths.len() {
        bail!("{} clean images but {} depth maps", cleans.len(), depths.len());
    }
    io::create_dir(out)?;
    let mut manifest = format!(
        "beta_d = {:?}\nbeta_b = {:?}\nbeta_inf = {:?}\ndepth_normalization = \"min-max\"\nimages = [\n",
        preset.beta_d, preset.beta_b, preset.beta_inf
    );
    for (c, d) in cleans.iter().zip(&depths) {
        let img = io::read_image(c)?;
        let z = normalize_depth(&first_channel(&io::read_image(d)?));
        let degraded = degrade(&img, &z, &preset).with_context(|| format!("degrading {}", c.display()))?;
        let name = c.file_name().expect("listed file");
        io::write_image(&out.join(name), &degraded)?;
        manifest += &format!("  {:?},\n", name.to_string_lossy());
    }
    manifest += "]\n";
    io::write_text(&out.join("manifest.toml"), &manifest)?;
    println!("degraded {} images into {}", cleans.len(), out.display());
    Ok(())
}

fn render_cmd(
    checkpoint: &Path,
    cameras: &Path,
    out: &Path,
    component: Component,
    format: Format,
    alpha_w: Option<f64>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cams = io::load_cameras(cameras)?;
    let w = alpha_w.unwrap_or_else(|| ck.alpha_w());
    let field = &ck.model.field;
    let mode = if w != 0.0 {
        AlphaMode::Adjusted { field, w }
    } else {
        AlphaMode::Raw
    };
    io::create_dir(out)?;
    let ext = match format {
        Format::Raw => "raw",
        Format::Png => "png",
    };
    for (k, cam) in cams.iter().enumerate() {
        let map = MediumMap::from_field(field, cam)?;
        let img = match component {
            Component::Restored => render_restored(&ck.model.cloud, cam, &map)?.clamp01(),
            _ => {
                let b = render(&ck.model.cloud, cam, Some(&map), mode)?;
                match component {
                    Component::Color => b.color.clamp01(),
                    Component::Object => b.object,
                    Component::Medium => b.medium,
                    Component::Depth => b.depth,
                    Component::Alpha => b.alpha,
                    Component::Transmittance => b.transmittance,
                    Component::Restored => unreachable!(),
                }
            }
        };
        io::write_image(&out.join(format!("view_{k:03}.{ext}")), &img)?;
    }
    println!("rendered {} views into {}", cams.len(), out.display());
    Ok(())
}

fn eval_cmd(pred: &Path, reference: &Path, task: TaskArg) -> Result<()> {
    let a = io::list_images(pred)?;
    let b = io::list_images(reference)?;
    if a.len() != b.len() || a.is_empty() {
        bail!("{} predictions but {} references", a.len(), b.len());
    }
    let imgs_a = a.iter().map(|p| io::read_image(p)).collect::<mediasplat::Result<Vec<_>>>()?;
    let imgs_b = b.iter().map(|p| io::read_image(p)).collect::<mediasplat::Result<Vec<_>>>()?;
    let names = b.iter().map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    let task = match task {
        TaskArg::NovelView => Task::NovelView,
        TaskArg::Restoration => Task::Restoration,
    };
    let report = MetricReport::compute(
        task,
        names.zip(imgs_a.iter()).zip(imgs_b.iter()).map(|((n, x), y)| (n, x, y)),
    )?;
    print!("{}", report.to_json_lines()?);
    Ok(())
}

fn check_grad(seed: u64, gaussians: usize, size: usize, opts: FdOptions) -> Result<bool> {
    if !(1e-7..=1e-3).contains(&opts.step) {
        bail!("finite-difference step must lie in [1e-7, 1e-3]");
    }
    let (model, cam, gt) = micro_scene(seed, gaussians, size)?;
    let inputs = micro_inputs(&cam, &gt);
    let subset: Vec<usize> = (0..model.layout().total()).collect();
    println!(
        "{:<8} {:>8} {:>6} {:>12} {:>12} {:>12}  {:<24} status",
        "term", "checked", "kinks", "max_rel", "mean_rel", "max_kink", "worst"
    );
    let mut ok = true;
    for o in Objective::ALL {
        let r = fd_check(&model, &inputs, o, &subset, &opts)?;
        ok &= r.passed;
        println!(
            "{:<8} {:>8} {:>6} {:>12.3e} {:>12.3e} {:>12.3e}  {:<24} {}",
            o.name(),
            r.checked,
            r.near_kink,
            r.max_rel_error,
            r.mean_rel_error,
            r.max_rel_error_near_kink,
            r.worst_parameter,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate {
            clean,
            depth,
            out,
            preset,
            beta_d,
            beta_b,
            beta_inf,
        } => {
            let base = preset_of(preset);
            let p = MediumPreset {
                beta_d: triple("beta-d", &beta_d, base.beta_d)?,
                beta_b: triple("beta-b", &beta_b, base.beta_b)?,
                beta_inf: triple("beta-inf", &beta_inf, base.beta_inf)?,
            };
            p.validate()?;
            simulate(&clean, &depth, &out, p)?;
        }
        Command::Fixture {
            out,
            gaussians,
            train_views,
            test_views,
            width,
            height,
            preset,
            seed,
            init_noise,
        } => {
            let fix = make_fixture(&FixtureSpec {
                gaussians,
                train_views,
                test_views,
                width,
                height,
                preset: preset_of(preset),
                seed,
            })?;
            let data = Dataset::from_fixture(&fix, init_noise, seed);
            data.save(&out)?;
            io::save_scene(&out.join("gt_scene.txt"), &fix.cloud)?;
            println!("wrote fixture with {} training views to {}", data.train.len(), out.display());
        }
        Command::Train {
            data,
            out,
            config,
            preset,
            steps,
            seed,
        } => {
            let mut cfg = TrainConfig::preset(&preset)?;
            if let Some(path) = config {
                let text = io::read_text(&path)?;
                let base = toml::Table::try_from(&cfg).context("serializing preset")?;
                let mut merged = base;
                let user: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
                merged.extend(user);
                cfg = TrainConfig::from_toml(&merged.to_string())?;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = Dataset::load(&data)?;
            let outcome = train(&cfg, &dataset, Some(&out))?;
            println!(
                "trained {} steps: {} primitives, final loss {:.6}",
                cfg.total_steps,
                outcome.model.cloud.len(),
                outcome.log.last().map_or(0.0, |r| r.loss.total)
            );
            println!("{}", serde_json::to_string(&outcome.validation)?);
        }
        Command::Render {
            checkpoint,
            cameras,
            out,
            component,
            format,
            alpha_w,
        } => render_cmd(&checkpoint, &cameras, &out, component, format, alpha_w)?,
        Command::Eval { pred, reference, task } => eval_cmd(&pred, &reference, task)?,
        Command::CheckGrad {
            seed,
            gaussians,
            size,
            step,
            tol,
            kink_tol,
        } => {
            let opts = FdOptions {
                step,
                tolerance: tol,
                kink_tolerance: kink_tol,
                ..FdOptions::default()
            };
            return check_grad(seed, gaussians, size, opts);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
