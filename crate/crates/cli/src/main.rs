//! `davs`: run episodes, train and evaluate policies, ablate the
//! exploration weight and export action manifolds.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use davs_core::{build_davs, DavsConfig, DavsError, DavsManifold, SoiKeypointSet, Vec3};
use davs_sim::config::{BirthMode, ConfigError, EnvConfig, Scenario};
use davs_sim::env::camera_position;
use davs_sim::policy::{replay_validate, rollout, Method, PolicyConfig, PolicyParams, ReplayReport, RolloutOptions};
use davs_sim::train::{
    config_hash, eval_seeds, evaluate, train, write_curve_csv, write_metrics_csv, CemConfig,
    EvalMetrics, ParamsFile, TrainError,
};

#[derive(Debug, Parser)]
#[command(name = "davs", version, about = "Active vision space experiments on the bag-opening proxy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode per seed and write its step log.
    Episode {
        #[command(flatten)]
        run: RunArgs,
        /// Trained parameters; untrained zeros when absent.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train a policy with the cross-entropy search.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cem: CemArgs,
    },
    /// Evaluate a policy over seeded episodes.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train and evaluate DAVS for each weight plus the baselines, on both
    /// scenarios.
    AblateOmega {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cem: CemArgs,
        /// Comma-separated weights in [0, 1]; empty for baselines only.
        #[arg(long, default_value = "0,0.5,1")]
        omegas: String,
    },
    /// Build the active vision space for a keypoint file and write it as JSON.
    ExportDavs {
        #[command(flatten)]
        run: RunArgs,
        /// JSON keypoint set: `{"keypoints": [[x, y, z], ...], "timestamp": 0}`.
        #[arg(long)]
        keypoints: PathBuf,
        /// Camera position `x,y,z`; the configured birth pose when absent.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        camera: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodKind {
    Davs,
    NoDavs,
    Vs,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Clean,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BirthArg {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// Environment configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long, value_enum, default_value = "davs")]
    method: MethodKind,
    /// Exploration weight for the davs method.
    #[arg(long, default_value_t = 1.0)]
    omega: f64,
    #[arg(long, value_enum)]
    camera_birth: Option<BirthArg>,
    #[arg(long, value_enum)]
    ee_birth: Option<BirthArg>,
    /// Repeatable; the first seed also seeds training.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Evaluation episodes.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = "davs-out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct CemArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    elite: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Degenerate(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) | TrainError::Params(m) => CliError::Config(m),
            other => CliError::Internal(other.into()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAVS_LOG_LEVEL", "warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Episode { run, params } => cmd_episode(&run, params.as_deref()),
        Command::Train { run, cem } => cmd_train(&run, &cem),
        Command::Evaluate { run, params } => cmd_evaluate(&run, params.as_deref()),
        Command::AblateOmega { run, cem, omegas } => cmd_ablate(&run, &cem, &parse_omegas(&omegas)?),
        Command::ExportDavs {
            run,
            keypoints,
            camera,
        } => cmd_export(&run, &keypoints, camera.as_deref()),
    }
}

fn birth(b: BirthArg) -> BirthMode {
    match b {
        BirthArg::Fixed => BirthMode::Fixed,
        BirthArg::Random => BirthMode::Random,
    }
}

fn scenario(s: ScenarioArg) -> Scenario {
    match s {
        ScenarioArg::Clean => Scenario::Clean,
        ScenarioArg::Obstacle => Scenario::Obstacle,
    }
}

/// Environment configuration from the file or preset, with flag overrides.
fn env_config(run: &RunArgs, forced: Option<Scenario>) -> Result<EnvConfig> {
    let wanted = forced.or(run.scenario.map(scenario));
    let mut cfg = match &run.config {
        Some(path) => {
            let mut cfg = EnvConfig::load(path)?;
            if let Some(s) = wanted {
                cfg.scenario = s;
            }
            cfg
        }
        None => EnvConfig::preset(wanted.unwrap_or(Scenario::Clean)),
    };
    if let Some(b) = run.camera_birth {
        cfg.camera.birth = birth(b);
    }
    if let Some(b) = run.ee_birth {
        cfg.ee.birth = birth(b);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn method(run: &RunArgs) -> Result<Method> {
    let m = match run.method {
        MethodKind::Davs => {
            check_omega(run.omega)?;
            Method::Davs { omega: run.omega }
        }
        MethodKind::NoDavs => Method::NoDavs,
        MethodKind::Vs => Method::Vs,
        MethodKind::Static => Method::Static,
    };
    Ok(m)
}

fn check_omega(omega: f64) -> Result<()> {
    if (0.0..=1.0).contains(&omega) {
        Ok(())
    } else {
        Err(CliError::Config(format!("invalid value for `omega`: {omega} is outside [0, 1]")))
    }
}

fn parse_omegas(list: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let w: f64 = item
            .parse()
            .map_err(|_| CliError::Config(format!("invalid value for `omegas`: cannot parse {item:?}")))?;
        check_omega(w)?;
        out.push(w);
    }
    Ok(out)
}

fn seeds(run: &RunArgs) -> Vec<u64> {
    if run.seeds.is_empty() {
        vec![0]
    } else {
        run.seeds.clone()
    }
}

fn cem_config(run: &RunArgs, args: &CemArgs) -> Result<CemConfig> {
    let d = CemConfig::default();
    let cfg = CemConfig {
        iterations: args.iterations.unwrap_or(d.iterations),
        population: args.population.unwrap_or(d.population),
        elite: args.elite.unwrap_or(d.elite.min(args.population.unwrap_or(d.population))),
        seed: seeds(run)[0],
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn setup(run: &RunArgs) -> Result<()> {
    if let Some(jobs) = run.jobs {
        if jobs == 0 {
            return Err(CliError::Config("invalid value for `jobs`: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_params(path: Option<&Path>, method: &Method, hash: &str) -> Result<PolicyParams> {
    let Some(path) = path else {
        return Ok(PolicyParams::zeros());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: ParamsFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("malformed parameter file {}: {e}", path.display())))?;
    if &file.method != method {
        log::warn!("parameters were trained for {}, running {}", file.method.name(), method.name());
    }
    if file.config_hash != hash {
        log::warn!("parameters were trained under a different configuration");
    }
    Ok(file.params()?)
}

fn cmd_episode(run: &RunArgs, params: Option<&Path>) -> Result<()> {
    setup(run)?;
    let cfg = env_config(run, None)?;
    let method = method(run)?;
    let pcfg = PolicyConfig::default();
    let params = load_params(params, &method, &config_hash(&cfg, &pcfg, &method))?;
    let opts = RolloutOptions {
        keep_log: true,
        ..RolloutOptions::default()
    };
    for seed in seeds(run) {
        let rec = rollout(&cfg, &pcfg, method, &params, seed, opts).context("running episode")?;
        let name = format!("episode-{}-seed{seed}.jsonl", method.name());
        let mut out = create(&run.out, &name)?;
        rec.log.write_jsonl(&mut out).context("writing episode log")?;
        out.flush().context("writing episode log")?;
        println!(
            "{} seed {seed}: length {} reward {:.3} {} ({} fallback steps)",
            method.name(),
            rec.length,
            rec.discounted_return,
            rec.done_reason,
            rec.fallback_steps
        );
    }
    Ok(())
}

/// Train, save parameters and the learning curve, and return the replay
/// check over all training episodes.
fn train_one(
    run: &RunArgs,
    cfg: &EnvConfig,
    method: Method,
    cem: &CemConfig,
) -> Result<(PolicyParams, ReplayReport)> {
    let pcfg = PolicyConfig::default();
    let opts = RolloutOptions {
        keep_transitions: matches!(method, Method::Davs { .. }),
        ..RolloutOptions::default()
    };
    let mut replay = ReplayReport::default();
    let outcome = train(cfg, &pcfg, method, cem, opts, |rec| {
        replay.merge(&replay_validate(rec, cfg, 1e-9));
    })?;
    let stem = format!("{}-{}", cfg.scenario.name(), method.name());
    let file = ParamsFile::new(&outcome.params, method, config_hash(cfg, &pcfg, &method));
    let mut out = create(&run.out, &format!("params-{stem}.json"))?;
    serde_json::to_writer_pretty(&mut out, &file).context("writing parameters")?;
    out.flush().context("writing parameters")?;
    let out = create(&run.out, &format!("curve-{stem}.csv"))?;
    write_curve_csv(&outcome.curve, &method, cfg, out).context("writing learning curve")?;
    Ok((outcome.params, replay))
}

fn cmd_train(run: &RunArgs, cem_args: &CemArgs) -> Result<()> {
    setup(run)?;
    let cfg = env_config(run, None)?;
    let method = method(run)?;
    let cem = cem_config(run, cem_args)?;
    let (_, replay) = train_one(run, &cfg, method, &cem)?;
    println!(
        "trained {} on {}: {} constrained steps, {} outside their cone, {} fallback",
        method.name(),
        cfg.scenario.name(),
        replay.constrained,
        replay.constrained - replay.inside,
        replay.fallback
    );
    Ok(())
}

fn evaluation_seeds(run: &RunArgs) -> Result<Vec<u64>> {
    if run.episodes == 0 {
        return Err(CliError::Config("invalid value for `episodes`: must be at least 1".into()));
    }
    Ok(eval_seeds(seeds(run)[0], run.episodes))
}

fn print_row(m: &EvalMetrics) {
    println!(
        "{:<10} {:<8} {:<14} length {:>6.1} reward {:>10.1} success {:>5.1}%",
        m.method, m.scenario, m.birth_mode, m.mean_len, m.mean_reward, m.success_pct
    );
}

fn cmd_evaluate(run: &RunArgs, params: Option<&Path>) -> Result<()> {
    setup(run)?;
    let cfg = env_config(run, None)?;
    let method = method(run)?;
    let pcfg = PolicyConfig::default();
    let params = load_params(params, &method, &config_hash(&cfg, &pcfg, &method))?;
    let seeds = evaluation_seeds(run)?;
    let (metrics, _) = evaluate(&cfg, &pcfg, method, &params, &seeds, RolloutOptions::default())?;
    let out = create(&run.out, "metrics.csv")?;
    write_metrics_csv(std::slice::from_ref(&metrics), out).context("writing metrics")?;
    print_row(&metrics);
    Ok(())
}

fn cmd_ablate(run: &RunArgs, cem_args: &CemArgs, omegas: &[f64]) -> Result<()> {
    setup(run)?;
    let cem = cem_config(run, cem_args)?;
    let seeds = evaluation_seeds(run)?;
    let pcfg = PolicyConfig::default();
    let mut methods: Vec<Method> = omegas.iter().map(|&omega| Method::Davs { omega }).collect();
    methods.extend([Method::NoDavs, Method::Vs, Method::Static]);
    let mut rows = Vec::new();
    for s in [Scenario::Clean, Scenario::Obstacle] {
        let cfg = env_config(run, Some(s))?;
        for &m in &methods {
            let (params, replay) = train_one(run, &cfg, m, &cem)?;
            if !replay.all_inside() {
                return Err(CliError::Internal(anyhow::anyhow!(
                    "{} camera actions left their cone during training",
                    replay.constrained - replay.inside
                )));
            }
            let (metrics, _) = evaluate(&cfg, &pcfg, m, &params, &seeds, RolloutOptions::default())?;
            print_row(&metrics);
            rows.push(metrics);
        }
    }
    let out = create(&run.out, "ablation.csv")?;
    write_metrics_csv(&rows, out).context("writing ablation table")?;
    Ok(())
}

fn cmd_export(run: &RunArgs, keypoints: &Path, camera: Option<&[f64]>) -> Result<()> {
    setup(run)?;
    let cfg = env_config(run, None)?;
    let text = fs::read_to_string(keypoints)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", keypoints.display())))?;
    let kps: SoiKeypointSet = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("malformed keypoint file {}: {e}", keypoints.display())))?;
    let chart = cfg.chart();
    let position = match camera {
        Some(&[x, y, z]) => Vec3::new(x, y, z),
        Some(c) => {
            return Err(CliError::Config(format!(
                "invalid value for `camera`: expected x,y,z, got {} values",
                c.len()
            )))
        }
        None => camera_position(
            &cfg,
            cfg.camera.birth_pitch_deg.to_radians(),
            cfg.camera.birth_yaw_deg.to_radians(),
        ),
    };
    let p0 = davs_core::sphere::radial_project(&position, &chart)
        .map_err(|e| CliError::Degenerate(format!("camera position: {e}")))?;
    let m = build_davs(&kps, &p0, &chart, &DavsConfig::default()).map_err(degenerate)?;
    m.validate().map_err(degenerate)?;
    let json = m.to_json();
    // what we write must read back to the same document
    let back = DavsManifold::from_json(&json).context("re-reading exported manifold")?;
    if back.to_json() != json {
        return Err(CliError::Internal(anyhow::anyhow!("exported manifold does not round-trip")));
    }
    let mut out = create(&run.out, "davs.json")?;
    out.write_all(json.as_bytes()).context("writing manifold")?;
    out.flush().context("writing manifold")?;
    println!(
        "manifold with {} polygon vertices written to {}",
        m.polygon.len(),
        run.out.join("davs.json").display()
    );
    Ok(())
}

fn degenerate(e: DavsError) -> CliError {
    CliError::Degenerate(e.to_string())
}
