//! `orchard`: simulate orchard rows, map them, and score the maps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use orchard_core::eval::{evaluate, gate_range, match_maps, sweep_thresholds, EvalReport};
use orchard_core::io::{
    read_frame_log, read_tree_map, render_overlay_svg, write_frame_log, write_json, write_sweep_csv, write_trajectory,
    write_tree_map,
};
use orchard_core::pipeline::{ablation_run, run_baseline, run_pipeline, PipelineConfig, RunStats, Toggles};
use orchard_core::simulator::{Scenario, PRESETS};

#[derive(Parser)]
#[command(name = "orchard", version, about = "Tree-level mapping of orchard rows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a frame log and ground truth for a scenario.
    Simulate(SimulateArgs),
    /// Map a frame log with the factor-graph pipeline.
    Run(RunArgs),
    /// Map a frame log by clustering all detections.
    Baseline(BaselineArgs),
    /// Score a predicted tree map against ground truth.
    Eval(EvalArgs),
    /// Score a scenario with each component switched off in turn.
    Ablate(AblateArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScenarioSource {
    /// Built-in scenario name.
    #[arg(long)]
    preset: Option<String>,
    /// Scenario TOML file (same schema as the written scenario.toml).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScenarioSource {
    fn load(&self) -> Result<Scenario> {
        let scn = match (&self.preset, &self.config) {
            (Some(name), _) => {
                Scenario::preset(name).map_err(|e| anyhow!("{e}; known presets: {}", PRESETS.join(", ")))?
            }
            (None, Some(path)) => load_toml(path)?,
            (None, None) => unreachable!("clap requires one source"),
        };
        scn.validate()?;
        Ok(scn)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Frame log (JSON Lines).
    #[arg(long)]
    log: PathBuf,
    /// Pipeline TOML; `simulate` writes a matching run.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Use the plain cloud centroid instead of the PCA trunk centre.
    #[arg(long)]
    no_pca: bool,
    /// Skip the cascade association stage.
    #[arg(long)]
    no_cascade: bool,
    /// Leave out distance factors between trees seen together.
    #[arg(long)]
    no_inter_distance: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// DBSCAN neighbourhood radius (m).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_samples: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted map CSV (`id,x,y`).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth map CSV.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 1.1)]
    planting_distance: f64,
    /// Match gate (m); half the planting distance by default.
    #[arg(long)]
    gate: Option<f64>,
    /// Gate sweep written to sweep.csv: LOW HIGH STEPS.
    #[arg(long, num_args = 3, value_names = ["LOW", "HIGH", "STEPS"])]
    sweep: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = toml::de::Deserializer::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        anyhow!("{}: field `{field}`: {}", path.display(), e.into_inner())
    })
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serializing TOML")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => load_toml(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut scn = args.source.load()?;
    if let Some(seed) = args.seed {
        scn = scn.with_seed(seed);
    }
    let sim = scn.run()?;
    prepare_out(&args.out)?;
    let out = &args.out;
    write_frame_log(&out.join("frames.jsonl"), &sim.frames)?;
    write_tree_map(&out.join("trees.csv"), &sim.surveyed)?;
    write_tree_map(&out.join("trees_all.csv"), &sim.trees)?;
    let truth: Vec<_> = sim
        .frames
        .iter()
        .map(|f| f.frame)
        .zip(sim.true_poses.iter().copied())
        .collect();
    write_trajectory(&out.join("trajectory_true.csv"), &truth)?;
    write_toml(&out.join("scenario.toml"), &scn)?;
    let heading = sim.true_poses.first().map_or(0.0, |p| p.theta);
    write_toml(&out.join("run.toml"), &PipelineConfig::for_scenario(&scn, heading))?;
    let n_det: usize = sim.frames.iter().map(|f| f.detections.len()).sum();
    println!(
        "{} seed {}: {} trees ({} in view), planting distance {} m, {} frames, {} detections",
        scn.name,
        scn.sensors.seed,
        sim.trees.len(),
        sim.surveyed.len(),
        scn.orchard.planting_distance,
        sim.frames.len(),
        n_det
    );
    Ok(())
}

#[derive(Serialize)]
struct RunReport {
    frames: usize,
    toggles: Toggles,
    stats: RunStats,
}

fn run(args: &RunArgs) -> Result<()> {
    let mut cfg = pipeline_config(args.config.as_deref())?;
    cfg.toggles.pca &= !args.no_pca;
    cfg.toggles.cascade &= !args.no_cascade;
    cfg.toggles.inter_distance &= !args.no_inter_distance;
    let frames = read_frame_log(&args.log)?;
    let out = run_pipeline(&frames, &cfg)?;
    prepare_out(&args.out)?;
    write_tree_map(&args.out.join("map.csv"), &out.map)?;
    write_trajectory(&args.out.join("trajectory.csv"), &out.trajectory)?;
    write_json(&args.out.join("graph.json"), &out.graph.snapshot())?;
    let report = RunReport {
        frames: frames.len(),
        toggles: cfg.toggles,
        stats: out.stats,
    };
    write_json(&args.out.join("run_report.json"), &report)?;
    println!(
        "{} frames: {} trees mapped from {} tracks, batch cost {:.3} after {} iterations",
        frames.len(),
        out.map.len(),
        report.stats.tracks,
        report.stats.batch.final_cost,
        report.stats.batch.iterations
    );
    Ok(())
}

fn baseline(args: &BaselineArgs) -> Result<()> {
    let mut cfg = pipeline_config(args.config.as_deref())?;
    if let Some(eps) = args.eps {
        if !(eps.is_finite() && eps > 0.0) {
            bail!("--eps must be a positive number");
        }
        cfg.baseline_eps = eps;
    }
    if let Some(m) = args.min_samples {
        if m == 0 {
            bail!("--min-samples must be at least 1");
        }
        cfg.baseline_min_samples = m;
    }
    let frames = read_frame_log(&args.log)?;
    let map = run_baseline(&frames, &cfg);
    prepare_out(&args.out)?;
    write_tree_map(&args.out.join("baseline_map.csv"), &map)?;
    println!(
        "{} frames: {} clusters (eps {} m, min samples {})",
        frames.len(),
        map.len(),
        cfg.baseline_eps,
        cfg.baseline_min_samples
    );
    Ok(())
}

fn parse_sweep(raw: &[String], pd: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(gate_range(0.05, pd, 22));
    }
    let lo: f64 = raw[0].parse().context("sweep LOW")?;
    let hi: f64 = raw[1].parse().context("sweep HIGH")?;
    let n: usize = raw[2].parse().context("sweep STEPS")?;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        bail!("--sweep needs 0 < LOW <= HIGH and STEPS >= 1");
    }
    Ok(gate_range(lo, hi, n))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let pd = args.planting_distance;
    if !(pd.is_finite() && pd > 0.0) {
        bail!("--planting-distance must be a positive number");
    }
    let gate = args.gate.unwrap_or(pd / 2.0);
    if !(gate.is_finite() && gate > 0.0) {
        bail!("--gate must be a positive number");
    }
    let gates = parse_sweep(args.sweep.as_deref().unwrap_or_default(), pd)?;
    let pred = read_tree_map(&args.pred)?;
    let gt = read_tree_map(&args.gt)?;
    let report = evaluate(&pred, &gt, gate, pd);
    prepare_out(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    write_sweep_csv(&args.out.join("sweep.csv"), &sweep_thresholds(&pred, &gt, &gates, pd))?;
    let m = match_maps(&pred, &gt, gate);
    fs::write(
        args.out.join("overlay.svg"),
        render_overlay_svg(&pred, &gt, &m.matches, gate),
    )
    .with_context(|| format!("writing {}", args.out.join("overlay.svg").display()))?;
    println!(
        "gate {gate} m: tp {} fp {} fn {} | precision {:.3} recall {:.3} f1 {:.3} | mean error {:.3} m",
        report.tp, report.fp, report.fn_, report.precision, report.recall, report.f1, report.mean_tp_error
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    report: EvalReport,
}

#[derive(Serialize)]
struct Variant {
    name: &'static str,
    toggles: Toggles,
    mean_recall: f64,
    mean_precision: f64,
    mean_tp_error: f64,
    runs: Vec<SeedReport>,
}

#[derive(Serialize)]
struct Ablation {
    scenario: String,
    seeds: Vec<u64>,
    variants: Vec<Variant>,
}

fn ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let scn = args.source.load()?;
    let on = Toggles::default();
    let variants = [
        ("full", on),
        ("no-pca", Toggles { pca: false, ..on }),
        ("no-cascade", Toggles { cascade: false, ..on }),
        (
            "no-inter-distance",
            Toggles {
                inter_distance: false,
                ..on
            },
        ),
    ];
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let mut out = Ablation {
        scenario: scn.name.clone(),
        seeds: seeds.clone(),
        variants: Vec::new(),
    };
    for (name, toggles) in variants {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let report = ablation_run(&scn.clone().with_seed(seed), toggles)?;
            runs.push(SeedReport { seed, report });
        }
        let mean = |f: fn(&EvalReport) -> f64| runs.iter().map(|r| f(&r.report)).sum::<f64>() / runs.len() as f64;
        let v = Variant {
            name,
            toggles,
            mean_recall: mean(|r| r.recall),
            mean_precision: mean(|r| r.precision),
            mean_tp_error: mean(|r| r.mean_tp_error),
            runs,
        };
        println!(
            "{name:>18}: recall {:.3} precision {:.3} error {:.3} m",
            v.mean_recall, v.mean_precision, v.mean_tp_error
        );
        out.variants.push(v);
    }
    prepare_out(&args.out)?;
    write_json(&args.out.join("ablation.json"), &out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
