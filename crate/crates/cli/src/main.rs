mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use occflow_core::baseline::{
    constant_velocity_hypotheses, constant_velocity_predict, trajectory_prediction, HypothesisSet,
};
use occflow_core::format::{self, write_atomic, Header, ID_MAGIC};
use occflow_core::grid::AgentClass;
use occflow_core::labels::{build_labels, LabelMode, Labels};
use occflow_core::losses::Prediction;
use occflow_core::metrics::{evaluate, EvalOptions, MetricReport};
use occflow_core::scene::{generate_synthetic_scenario, MotionKind, MotionMix, Scenario, SyntheticConfig};
use occflow_core::store;
use occflow_core::warp::{flow_trace, WarpedOccupancy};

#[derive(Parser, Debug)]
#[command(name = "occflow", version, about = "Occupancy flow fields: labels, prediction, evaluation")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file supplying defaults for flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenarios as JSON.
    Generate(GenerateArgs),
    /// Build occupancy, flow and ID labels for a scenario.
    Labels(LabelsArgs),
    /// Run a baseline predictor.
    #[command(subcommand)]
    Predict(PredictCommand),
    /// Warp the labeled current occupancy through predicted flows.
    Trace(TraceArgs),
    /// Score a prediction against labels.
    Evaluate(EvaluateArgs),
    /// Render a grid file as a PGM/PPM image.
    Render(RenderArgs),
    /// Generate, label, predict, evaluate and render in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct SceneArgs {
    /// Agents observed from the first step.
    #[arg(long)]
    agents: Option<usize>,
    /// Agents that first appear in the future.
    #[arg(long)]
    late_agents: Option<usize>,
    #[arg(long, value_enum)]
    motion: Option<MotionArg>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args, Debug)]
struct LabelsArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Regular)]
    mode: ModeArg,
}

#[derive(Subcommand, Debug)]
enum PredictCommand {
    /// Constant-velocity extrapolation of every agent observed at t = 0.
    Cv {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Occupancy from weighted trajectory hypotheses with Gaussian uncertainty.
    Trajset {
        /// Hypothesis file; derived from --scenario when absent.
        #[arg(long, required_unless_present = "scenario")]
        hypotheses: Option<PathBuf>,
        #[arg(long, conflicts_with = "hypotheses")]
        scenario: Option<PathBuf>,
        /// Position standard deviation growth for derived hypotheses, m/s.
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    prediction: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    prediction: PathBuf,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV row per class and waypoint.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print a fixed-width table to stdout.
    #[arg(long)]
    table: bool,
    #[arg(long)]
    thresholds: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// OFF1 occupancy or flow file, or OFI1 ID file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = StyleArg::Auto)]
    style: StyleArg,
    /// Occupancy file for the combined view.
    #[arg(long)]
    occupancy: Option<PathBuf>,
    /// Flow magnitude (cells) mapped to full saturation; the maximum in the file when absent.
    #[arg(long)]
    max_magnitude: Option<f64>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Regular)]
    mode: ModeArg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum MotionArg {
    Mixed,
    Cv,
    Turn,
    StopAndGo,
}

impl MotionArg {
    fn mix(self) -> MotionMix {
        match self {
            MotionArg::Mixed => MotionMix::default(),
            MotionArg::Cv => MotionMix::only(MotionKind::ConstantVelocity),
            MotionArg::Turn => MotionMix::only(MotionKind::ConstantTurnRate),
            MotionArg::StopAndGo => MotionMix::only(MotionKind::StopAndGo),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Regular,
    Speculative,
}

impl From<ModeArg> for LabelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Regular => LabelMode::Regular,
            ModeArg::Speculative => LabelMode::Speculative,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum StyleArg {
    /// Pick from the file contents.
    Auto,
    Occupancy,
    Flow,
    Combined,
    Ids,
}

/// Defaults read from `--config`; flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    jobs: Option<usize>,
    count: Option<usize>,
    agents: Option<usize>,
    late_agents: Option<usize>,
    motion: Option<MotionArg>,
    thresholds: Option<usize>,
    sigma: Option<f64>,
    /// Full generator configuration; the flags above override its fields.
    scene: Option<SyntheticConfig>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = serde_json::from_str(&text)
            .map_err(occflow_core::Error::from)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    fn synthetic(&self, flags: &SceneArgs) -> Result<SyntheticConfig> {
        let mut cfg = self.scene.clone().unwrap_or_default();
        if let Some(n) = flags.agents.or(self.agents) {
            cfg.agents = n;
        }
        if let Some(n) = flags.late_agents.or(self.late_agents) {
            cfg.late_agents = n;
        }
        if let Some(m) = flags.motion.or(self.motion) {
            cfg.motion_mix = m.mix();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct RunContext {
    seed: u64,
    config: ConfigFile,
}

fn scenario_name(i: usize) -> String {
    format!("scene_{i:03}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn generate_all(ctx: &RunContext, count: usize, cfg: &SyntheticConfig) -> Result<Vec<Scenario>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            generate_synthetic_scenario(ctx.seed.wrapping_add(i as u64), cfg)
                .with_context(|| format!("generating scenario {i}"))
        })
        .collect()
}

fn cmd_generate(ctx: &RunContext, args: &GenerateArgs) -> Result<()> {
    let cfg = ctx.config.synthetic(&args.scene)?;
    let count = args.count.or(ctx.config.count).unwrap_or(1);
    let scenes = generate_all(ctx, count, &cfg)?;
    for (i, s) in scenes.iter().enumerate() {
        write_text(&args.out.join(format!("{}.json", scenario_name(i))), &s.to_json())?;
    }
    log::info!("wrote {count} scenarios to {}", args.out.display());
    Ok(())
}

fn cmd_labels(args: &LabelsArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario)?;
    let labels = build_labels(&scenario, args.mode.into())?;
    store::write_labels(&args.out, &labels)?;
    Ok(())
}

fn cmd_predict(ctx: &RunContext, cmd: &PredictCommand) -> Result<()> {
    let (pred, out) = match cmd {
        PredictCommand::Cv { scenario, out } => {
            (constant_velocity_predict(&load_scenario(scenario)?)?, out)
        }
        PredictCommand::Trajset {
            hypotheses,
            scenario,
            sigma,
            out,
        } => {
            let set = match (hypotheses, scenario) {
                (Some(path), _) => HypothesisSet::load(path)
                    .with_context(|| format!("loading hypotheses {}", path.display()))?,
                (None, Some(path)) => {
                    let sigma = ctx.config.sigma.unwrap_or(*sigma);
                    constant_velocity_hypotheses(&load_scenario(path)?, sigma)?
                }
                (None, None) => bail!("either --hypotheses or --scenario is required"),
            };
            (trajectory_prediction(&set)?, out)
        }
    };
    store::write_prediction(out, &pred)?;
    Ok(())
}

fn traces_for(pred: &Prediction, labels: &Labels) -> Result<BTreeMap<AgentClass, Vec<WarpedOccupancy>>> {
    pred.spec.ensure_compatible(&labels.spec)?;
    let mut out = BTreeMap::new();
    for (&class, set) in &labels.classes {
        out.insert(class, flow_trace(&set.current, pred.class(class)?.flows())?);
    }
    Ok(out)
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let labels = store::read_labels(&args.labels)?;
    let pred = store::read_prediction(&args.prediction)?;
    let traces = traces_for(&pred, &labels)?;
    store::write_traces(&args.out, &labels.spec, &traces)?;
    Ok(())
}

fn eval_options(ctx: &RunContext, flag: Option<usize>) -> Result<EvalOptions> {
    let thresholds = flag
        .or(ctx.config.thresholds)
        .unwrap_or(EvalOptions::default().thresholds);
    if thresholds < 2 {
        bail!(occflow_core::Error::InvalidConfig(
            "--thresholds must be at least 2".into()
        ));
    }
    Ok(EvalOptions { thresholds })
}

fn cmd_evaluate(ctx: &RunContext, args: &EvaluateArgs) -> Result<()> {
    let options = eval_options(ctx, args.thresholds)?;
    let labels = store::read_labels(&args.labels)?;
    let pred = store::read_prediction(&args.prediction)?;
    let report = evaluate(&pred, &labels, &options)?;
    match &args.out {
        Some(path) => write_text(path, &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    if let Some(path) = &args.csv {
        write_text(path, &report.to_csv())?;
    }
    if args.table {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn render_file(args: &RenderArgs) -> Result<Vec<u8>> {
    let bytes = std::fs::read(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let header = Header::decode(&bytes)?;
    let style = match (args.style, header.magic, header.channels) {
        (StyleArg::Auto, m, _) if m == ID_MAGIC => StyleArg::Ids,
        (StyleArg::Auto, _, 1) => StyleArg::Occupancy,
        (StyleArg::Auto, _, _) if args.occupancy.is_some() => StyleArg::Combined,
        (StyleArg::Auto, _, _) => StyleArg::Flow,
        (s, _, _) => s,
    };
    let scale = |flow| args.max_magnitude.unwrap_or_else(|| render::max_flow_magnitude(flow));
    Ok(match style {
        StyleArg::Occupancy => render::occupancy_pgm(&format::decode_occupancy(&bytes)?),
        StyleArg::Flow => {
            let flow = format::decode_flow(&bytes)?;
            render::flow_ppm(&flow, scale(&flow))
        }
        StyleArg::Combined => {
            let Some(occ_path) = &args.occupancy else {
                bail!(occflow_core::Error::InvalidConfig(
                    "the combined style needs --occupancy".into()
                ));
            };
            let flow = format::decode_flow(&bytes)?;
            let occ_bytes = std::fs::read(occ_path)
                .with_context(|| format!("reading {}", occ_path.display()))?;
            let occ = format::decode_occupancy(&occ_bytes)?;
            flow.grid().ensure_same_shape(occ.grid())?;
            render::combined_ppm(&flow, &occ, scale(&flow))
        }
        StyleArg::Ids => {
            if header.magic != ID_MAGIC {
                bail!(occflow_core::Error::Format {
                    offset: 0,
                    reason: format!("expected {:?} magic for an ID raster", ID_MAGIC),
                });
            }
            render::ids_ppm(&format::decode_ids(&bytes)?)
        }
        StyleArg::Auto => unreachable!("resolved above"),
    })
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    if let Some(m) = args.max_magnitude {
        if !(m.is_finite() && m > 0.0) {
            bail!(occflow_core::Error::InvalidConfig(
                "--max-magnitude must be positive".into()
            ));
        }
    }
    let image = render_file(args)?;
    write_bytes(&args.out, &image)
}

fn render_views(dir: &Path, name: &str, pred: &Prediction, labels: &Labels) -> Result<()> {
    let t_last = labels.spec.num_waypoints;
    for (&class, set) in &labels.classes {
        for t in [1, t_last] {
            let label = &set.waypoints[t - 1];
            let p = pred.class(class)?;
            let prefix = format!("{name}_{}_t{t:02}", class.name());
            let scale = render::max_flow_magnitude(&label.flow).max(1.0);
            write_bytes(&dir.join(format!("{prefix}_label.pgm")), &render::occupancy_pgm(&label.occupancy))?;
            write_bytes(&dir.join(format!("{prefix}_pred.pgm")), &render::occupancy_pgm(&p.probability(t - 1)))?;
            write_bytes(
                &dir.join(format!("{prefix}_flow.ppm")),
                &render::combined_ppm(&p.flows()[t - 1], &p.probability(t - 1), scale),
            )?;
            write_bytes(&dir.join(format!("{prefix}_ids.ppm")), &render::ids_ppm(&label.ids))?;
        }
    }
    Ok(())
}

fn mean_summary(reports: &[(String, MetricReport)]) -> serde_json::Value {
    let mut root = serde_json::Map::new();
    for (name, report) in reports {
        root.insert(name.clone(), report.to_json_value()["mean"].clone());
    }
    serde_json::Value::Object(root)
}

fn cmd_pipeline(ctx: &RunContext, args: &PipelineArgs) -> Result<()> {
    let cfg = ctx.config.synthetic(&args.scene)?;
    let count = args.count.or(ctx.config.count).unwrap_or(2);
    let options = eval_options(ctx, None)?;
    let scenes = generate_all(ctx, count, &cfg)?;
    let mut reports = Vec::with_capacity(count);
    for (i, scenario) in scenes.iter().enumerate() {
        let name = scenario_name(i);
        write_text(&args.out.join("scenarios").join(format!("{name}.json")), &scenario.to_json())?;
        let labels = build_labels(scenario, args.mode.into())?;
        store::write_labels(&args.out.join("labels").join(&name), &labels)?;
        let pred = constant_velocity_predict(scenario)?;
        store::write_prediction(&args.out.join("predictions").join(&name), &pred)?;
        let traces = traces_for(&pred, &labels)?;
        store::write_traces(&args.out.join("traces").join(&name), &labels.spec, &traces)?;
        let report = evaluate(&pred, &labels, &options)?;
        let reports_dir = args.out.join("reports");
        write_text(&reports_dir.join(format!("{name}.json")), &report.to_json())?;
        write_text(&reports_dir.join(format!("{name}.csv")), &report.to_csv())?;
        write_text(&reports_dir.join(format!("{name}.txt")), &report.to_table())?;
        render_views(&args.out.join("images"), &name, &pred, &labels)?;
        reports.push((name, report));
    }
    let mut summary = serde_json::to_string_pretty(&mean_summary(&reports))?;
    summary.push('\n');
    write_text(&args.out.join("summary.json"), &summary)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = ConfigFile::load(cli.config.as_deref())?;
    let jobs = cli.jobs.or(config.jobs).unwrap_or(0);
    let ctx = RunContext {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building thread pool")?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Labels(a) => cmd_labels(a),
        Command::Predict(c) => cmd_predict(&ctx, c),
        Command::Trace(a) => cmd_trace(a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Render(a) => cmd_render(a),
        Command::Pipeline(a) => cmd_pipeline(&ctx, a),
    })
}

/// Stable diagnostic code for an error chain.
fn error_code(err: &anyhow::Error) -> &'static str {
    use occflow_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidConfig(_) | E::InvalidSpec(_) | E::InvalidValue(_) | E::NotPsd(_) => "E001",
                E::Io(_) => "E002",
                E::Format { .. } => "E003",
                E::SpecMismatch(_) | E::LengthMismatch { .. } => "E004",
                E::InvalidScenario(_) | E::Json(_) => "E005",
                _ => "E009",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "E002";
        }
    }
    "E009"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", error_code(&err));
            ExitCode::FAILURE
        }
    }
}
