//! Command-line surface. [`run`] parses arguments, builds the worker pool, and
//! dispatches; it returns the process exit code (0 success, 1 task failure,
//! 2 usage error).
//!
//! Every file written gets a `<file>.meta.json` sidecar with the SHA-256 of
//! the effective config and the seed.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, BeliefModel, Generative, ObservedOnly, TaskSet};
use crate::bench::metrics::{psnr, ssim};
use crate::config::{self, BenchModel, RunConfig};
use crate::geometry::{CameraPose, Intrinsics, Mat3, Vec3};
use crate::diffusion::denoiser::DenoiserParams;
use crate::hypothesis::{train_denoiser, TrainReport};
use crate::image::ImageBuf;
use crate::planner::{run_episodes, write_results_csv, Ablation, Components};
use crate::render::render;
use crate::scene::read_scene;
use crate::world::io::{world_to_text, write_trace};
use crate::world::{World, MAX_RANGE};

pub const JOBS_ENV: &str = "BELIEF_JOBS";
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "belief", version, about = "Generative 3D scene beliefs for embodied navigation")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random choice (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config; default "out").
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: BELIEF_JOBS, else all logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    SingleHypothesis,
    NoGeometry,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::SingleHypothesis => Ablation::SingleHypothesis,
            AblationArg::NoGeometry => Ablation::NoGeometry,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    ObservedOnly,
    Generative,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate procedural worlds as text files.
    GenWorld {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train the voxel denoiser on ground-truth grids of procedural worlds.
    TrainDenoiser {
        #[arg(long)]
        worlds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run object-navigation episodes and write per-episode results.
    Navigate {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Denoiser manifest (needed unless the ablation is no-geometry).
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Also write one action trace per episode.
        #[arg(long)]
        traces: bool,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        suite: BenchCommand,
    },
    /// Render a scene file from a camera pose.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Whitespace-separated numbers: `x y z yaw` (sensor intrinsics) or
        /// position (3), world-to-camera rotation row-major (9), and
        /// `fx fy cx cy width height`.
        #[arg(long)]
        pose: PathBuf,
    },
    /// PSNR and SSIM between two equally sized images.
    #[command(name = "eval-2d")]
    Eval2d { a: PathBuf, b: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Completion and permanence suite.
    Core {
        /// Task-set file; generated from the config when absent.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    version: &'static str,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    command: &'static str,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn meta(&self, file: &Path) -> Result<(), String> {
        let meta = Meta {
            command: self.command,
            config_sha256: self.cfg.hash(),
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
        };
        let mut name = file.as_os_str().to_owned();
        name.push(".meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| e.to_string())? + "\n";
        fs::write(PathBuf::from(name), text).map_err(|e| format!("{}: {e}", file.display()))
    }

    /// Write `bytes` to `name` in the output directory plus its sidecar.
    fn emit(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, String> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| format!("{}: {e}", p.display()))?;
        self.meta(&p)?;
        Ok(p)
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn jobs(flag: Option<usize>) -> Result<usize, String> {
    if let Some(j) = flag {
        return if j == 0 { Err("--jobs must be positive".into()) } else { Ok(j) };
    }
    match std::env::var(JOBS_ENV) {
        Ok(v) if !v.is_empty() => match v.parse::<usize>() {
            Ok(j) if j > 0 => Ok(j),
            _ => Err(format!("{JOBS_ENV}={v:?} is not a positive integer")),
        },
        _ => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn dispatch(cli: Cli) -> Result<i32, String> {
    let mut cfg = match &cli.config {
        Some(p) => config::load_config(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs(cli.jobs)?)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| match cli.command {
        Command::GenWorld { count } => gen_world(cfg, out, count),
        Command::TrainDenoiser { worlds, steps } => train(cfg, out, worlds, steps),
        Command::Navigate {
            episodes,
            ablation,
            denoiser,
            traces,
        } => navigate(cfg, out, episodes, ablation, denoiser, traces),
        Command::Bench {
            suite: BenchCommand::Core { tasks, model, denoiser },
        } => bench_core(cfg, out, tasks, model, denoiser),
        Command::Render { scene, pose } => render_cmd(cfg, out, &scene, &pose),
        Command::Eval2d { a, b } => eval_2d(cfg, out, &a, &b),
    })
}

fn gen_world(cfg: RunConfig, out: PathBuf, count: usize) -> Result<i32, String> {
    let ctx = Ctx {
        cfg,
        out,
        command: "gen-world",
    };
    for i in 0..count {
        let seed = crate::planner::mix(ctx.cfg.seed, i as u64);
        let world = World::generate(seed, &ctx.cfg.world).map_err(|e| e.to_string())?;
        let p = ctx.emit(&format!("world_{i:03}.json"), world_to_text(&world).as_bytes())?;
        println!("{}", p.display());
    }
    Ok(EXIT_OK)
}

fn train(mut cfg: RunConfig, out: PathBuf, worlds: Option<usize>, steps: Option<usize>) -> Result<i32, String> {
    if let Some(w) = worlds {
        cfg.denoiser.train_worlds = w;
    }
    if let Some(s) = steps {
        cfg.denoiser.training.steps = s;
    }
    let ctx = Ctx {
        cfg,
        out,
        command: "train-denoiser",
    };
    let (params, report) = train_from_config(&ctx.cfg)?;
    let manifest = ctx.path("denoiser.toml");
    config::save_denoiser(&params, &manifest).map_err(|e| e.to_string())?;
    ctx.meta(&manifest)?;
    ctx.meta(&config::weights_path(&manifest))?;
    let mut log = String::from("step,loss,mse\n");
    for (i, (l, m)) in report.losses.iter().zip(&report.mse).enumerate() {
        log.push_str(&format!("{i},{l:.6},{m:.6}\n"));
    }
    ctx.emit("train_loss.csv", log.as_bytes())?;
    println!(
        "trained {} steps on {} grids: loss {:.4} -> {:.4}; wrote {}",
        report.losses.len(),
        ctx.cfg.denoiser.train_worlds,
        report.initial_loss,
        report.final_loss,
        manifest.display()
    );
    Ok(EXIT_OK)
}

/// Train on ground-truth grids of `train_worlds` procedural worlds, world `i`
/// drawn with seed `mix(seed, i)`.
pub fn train_from_config(cfg: &RunConfig) -> Result<(DenoiserParams, TrainReport), String> {
    let schedule = cfg.schedule()?;
    let grids = (0..cfg.denoiser.train_worlds as u64)
        .map(|i| {
            World::generate(crate::planner::mix(cfg.seed, i), &cfg.world)
                .map(|w| w.voxel_truth(w.grid_spec()))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    train_denoiser(&grids, &schedule, &cfg.denoiser.training, cfg.denoiser.network.clone(), cfg.seed)
        .map_err(|e| e.to_string())
}

fn denoiser_for(cfg: &RunConfig, flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| cfg.denoiser.path.clone())
}

fn navigate(
    mut cfg: RunConfig,
    out: PathBuf,
    episodes: Option<usize>,
    ablation: Option<AblationArg>,
    denoiser: Option<PathBuf>,
    traces: bool,
) -> Result<i32, String> {
    if let Some(n) = episodes {
        cfg.episodes.count = n;
    }
    if let Some(a) = ablation {
        cfg.navigation.ablation = a.into();
    }
    let manifest = denoiser_for(&cfg, denoiser);
    if let Some(m) = &manifest {
        cfg.denoiser.path = Some(m.clone());
    }
    let ctx = Ctx {
        cfg,
        out,
        command: "navigate",
    };
    let c = &ctx.cfg;
    let params = match &manifest {
        Some(m) => config::load_denoiser(m).map_err(|e| format!("{}: {e}", m.display()))?,
        None if c.navigation.effective_k() == 0 => {
            DenoiserParams::init(c.denoiser.network.clone(), c.seed)
        }
        None => return Err("this ablation samples hypotheses; pass --denoiser (see train-denoiser)".into()),
    };
    let schedule = c.schedule()?;
    let provider = c.provider();
    let comps = Components {
        denoiser: &params,
        schedule: &schedule,
        provider: &provider,
        sensor: &c.sensor,
    };
    let results = run_episodes(&c.episode_spec(), comps, &c.navigation).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_results_csv(&mut buf, &results).map_err(|e| e.to_string())?;
    let p = ctx.emit("episodes.csv", &buf)?;
    if traces {
        let dir = ctx.path("traces");
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        for r in &results {
            let mut t = Vec::new();
            write_trace(&mut t, &r.trace).map_err(|e| e.to_string())?;
            ctx.emit(&format!("traces/episode_{:04}.jsonl", r.episode), &t)?;
        }
    }
    let summary = (
        crate::planner::sr(&results),
        crate::planner::spl(&results),
        crate::planner::sel(&results),
    );
    if let (Ok(sr), Ok(spl), Ok(sel)) = summary {
        println!("{} episodes: SR {sr:.3} SPL {spl:.3} SEL {sel:.3}; wrote {}", results.len(), p.display());
    }
    Ok(EXIT_OK)
}

fn bench_core(
    mut cfg: RunConfig,
    out: PathBuf,
    tasks: Option<PathBuf>,
    model: Option<ModelArg>,
    denoiser: Option<PathBuf>,
) -> Result<i32, String> {
    if let Some(m) = model {
        cfg.bench.model = match m {
            ModelArg::ObservedOnly => BenchModel::ObservedOnly,
            ModelArg::Generative => BenchModel::Generative,
        };
    }
    let manifest = denoiser_for(&cfg, denoiser);
    if let Some(m) = &manifest {
        cfg.denoiser.path = Some(m.clone());
    }
    let ctx = Ctx {
        cfg,
        out,
        command: "bench core",
    };
    let c = &ctx.cfg;
    let set = match &tasks {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
            TaskSet::read_from(std::io::BufReader::new(f)).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => {
            let bc = c.bench_config();
            let tasks = bench::generate_tasks(&bc).map_err(|e| e.to_string())?;
            let set = TaskSet { config: bc, tasks };
            let mut buf = Vec::new();
            set.write_to(&mut buf).map_err(|e| e.to_string())?;
            ctx.emit("core_tasks.json", &buf)?;
            set
        }
    };
    let provider = c.provider();
    let schedule = c.schedule()?;
    let params;
    let generative;
    let model: &dyn BeliefModel = match c.bench.model {
        BenchModel::ObservedOnly => &ObservedOnly,
        BenchModel::Generative => {
            let m = manifest.as_ref().ok_or("the generative model needs --denoiser")?;
            params = config::load_denoiser(m).map_err(|e| format!("{}: {e}", m.display()))?;
            generative = Generative {
                denoiser: &params,
                schedule: &schedule,
                provider: &provider,
                sampler_steps: c.navigation.sampler_steps,
            };
            &generative
        }
    };
    let mut buf = Vec::new();
    let rows = bench::run_suite(&set.tasks, model, &provider, &set.config, &mut buf).map_err(|e| e.to_string())?;
    let p = ctx.emit("core_results.csv", &buf)?;
    let failed = rows.iter().filter(|r| r.status.starts_with("error")).count();
    println!("{} tasks ({failed} failed) with {}; wrote {}", rows.len(), model.name(), p.display());
    Ok(if failed > 0 { EXIT_FAILURE } else { EXIT_OK })
}

/// Camera from a pose file; see [`Command::Render`].
pub fn parse_pose(text: &str, cfg: &RunConfig) -> Result<CameraPose, String> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect::<Result<_, _>>()?;
    match v.len() {
        4 => Ok(CameraPose::level(Vec3::new(v[0], v[1], v[2]), v[3], cfg.sensor.intrinsics())),
        18 => {
            let size = |x: f64| {
                if x >= 1.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(format!("image size {x} is not a positive integer"))
                }
            };
            let k = Intrinsics {
                fx: v[12],
                fy: v[13],
                cx: v[14],
                cy: v[15],
                width: size(v[16])?,
                height: size(v[17])?,
            };
            CameraPose::new(Vec3::new(v[0], v[1], v[2]), Mat3::from_row_slice(&v[3..12]), k).map_err(|e| e.to_string())
        }
        n => Err(format!("pose file holds {n} numbers; expected 4 or 18")),
    }
}

fn render_cmd(cfg: RunConfig, out: PathBuf, scene: &Path, pose: &Path) -> Result<i32, String> {
    let ctx = Ctx {
        cfg,
        out,
        command: "render",
    };
    let f = fs::File::open(scene).map_err(|e| format!("{}: {e}", scene.display()))?;
    let belief = read_scene(std::io::BufReader::new(f)).map_err(|e| format!("{}: {e}", scene.display()))?;
    let text = fs::read_to_string(pose).map_err(|e| format!("{}: {e}", pose.display()))?;
    let camera = parse_pose(&text, &ctx.cfg)?;
    let obs = render(&belief, &camera);
    let rgb = ctx.path("render_rgb.png");
    obs.rgb.save_png(&rgb).map_err(|e| e.to_string())?;
    ctx.meta(&rgb)?;
    let mut depth = obs.depth.clone();
    depth.data.iter_mut().for_each(|d| *d /= MAX_RANGE);
    let dpng = ctx.path("render_depth.png");
    depth.save_png(&dpng).map_err(|e| e.to_string())?;
    ctx.meta(&dpng)?;
    let raw = ctx.path("render_depth.f64");
    let mut w = BufWriter::new(fs::File::create(&raw).map_err(|e| e.to_string())?);
    obs.depth.write_float(&mut w).map_err(|e| e.to_string())?;
    w.flush().map_err(|e| e.to_string())?;
    ctx.meta(&raw)?;
    println!("rendered {} primitives to {}", belief.len(), rgb.display());
    Ok(EXIT_OK)
}

fn eval_2d(cfg: RunConfig, out: PathBuf, a: &Path, b: &Path) -> Result<i32, String> {
    let ctx = Ctx {
        cfg,
        out,
        command: "eval-2d",
    };
    let load = |p: &Path| ImageBuf::load_png_rgb(p).map_err(|e| format!("{}: {e}", p.display()));
    let (ia, ib) = (load(a)?, load(b)?);
    if !ia.same_shape(&ib) {
        return Err(format!("image sizes differ: {}x{} vs {}x{}", ia.width, ia.height, ib.width, ib.height));
    }
    let line = format!("{:.6},{:.6}\n", psnr(&ia, &ib), ssim(&ia, &ib));
    ctx.emit("eval2d.csv", format!("psnr,ssim\n{line}").as_bytes())?;
    print!("psnr,ssim\n{line}");
    Ok(EXIT_OK)
}
