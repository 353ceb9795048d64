use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use leris_core::config::{linear_to_db, ScenarioConfig};
use leris_core::experiments::{
    build_scenario, draw_rng, run_error_vs_azimuth, run_rate_vs_elements, run_rate_vs_snr, write_csv, RunManifest,
    Scenario, UePose,
};
use leris_core::optical::NoiseMode;
use leris_core::{LerisError, Result, Vec3};

#[derive(Parser)]
#[command(name = "leris", version, about = "VCSEL-RIS localization and mmWave link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize one user pose from the optical anchors.
    Localize(PoseArgs),
    /// Best route and link budget for one user pose.
    LinkBudget(PoseArgs),
    /// Run a figure sweep and write `<which>.csv` plus `manifest.json`.
    Figure {
        which: Figure,
        #[command(flatten)]
        common: Common,
    },
    /// Print the effective configuration as JSON.
    Config {
        #[command(flatten)]
        common: Common,
        /// Print the one-line canonical form instead of pretty JSON.
        #[arg(long)]
        canonical: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    Fig2,
    Fig3,
    Fig4,
}

impl Figure {
    fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Literal,
    Fixed,
    Stochastic,
    Off,
}

impl From<NoiseArg> for NoiseMode {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Literal => NoiseMode::Literal,
            NoiseArg::Fixed => NoiseMode::Fixed,
            NoiseArg::Stochastic => NoiseMode::Stochastic,
            NoiseArg::Off => NoiseMode::Off,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Worker threads, 0 for one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    noise_mode: Option<NoiseArg>,
    #[arg(long)]
    quadrature_deg: Option<f64>,
    /// Active panel ids, comma separated. Replaces the configured panel sets
    /// with this single set.
    #[arg(long, value_delimiter = ',')]
    panels: Option<Vec<u32>>,
}

#[derive(Args, Clone)]
struct PoseArgs {
    #[command(flatten)]
    common: Common,
    /// User position `x,y,z` in metres.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    ue: [f64; 3],
    /// Azimuth of the user normal in degrees.
    #[arg(long, allow_negative_numbers = true)]
    azimuth_deg: f64,
    /// Elevation of the user normal in degrees; defaults to the configured value.
    #[arg(long, allow_negative_numbers = true)]
    elevation_deg: Option<f64>,
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected x,y,z, got {} values", v.len()))
}

fn load_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(i) = c.iterations {
        cfg.iterations = i;
        cfg.sweeps.iterations = i;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(n) = c.noise_mode {
        cfg.optical.noise_mode = n.into();
    }
    if let Some(q) = c.quadrature_deg {
        cfg.mmwave.quadrature_deg = q;
    }
    if let Some(p) = &c.panels {
        cfg.sweeps.panel_sets = vec![p.clone()];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &LerisError) -> u8 {
    match e {
        LerisError::InvalidArgument(_) => 2,
        LerisError::Configuration(_) => 3,
        LerisError::Validation(_) => 4,
        LerisError::Io(_) => 5,
        LerisError::InsufficientAnchors { .. } => 6,
        LerisError::DegenerateGeometry(_) => 7,
        LerisError::BehindEmitter { .. } => 8,
        LerisError::InfeasibleRatio { .. } => 9,
        LerisError::InconsistentRanges { .. } => 10,
        LerisError::AmbiguousSolution { .. } => 11,
        LerisError::NoFeasibleRoot => 12,
        LerisError::IllConditioned { .. } => 13,
        LerisError::NoiseDominated { .. } => 14,
        LerisError::Quadrature { .. } => 15,
    }
}

fn db(x: f64) -> Value {
    if x > 0.0 {
        json!(linear_to_db(x))
    } else {
        Value::Null
    }
}

struct Query {
    cfg: ScenarioConfig,
    sc: Scenario,
    pose: UePose,
}

fn query(a: &PoseArgs) -> Result<Query> {
    let cfg = load_config(&a.common)?;
    let sc = build_scenario(&cfg)?;
    let p = Vec3::new(a.ue[0], a.ue[1], a.ue[2]);
    if !sc.room.contains(&p, 0.0) {
        return Err(LerisError::Validation(vec![format!(
            "user position ({}, {}, {}) lies outside the room",
            p.x, p.y, p.z
        )]));
    }
    let el = a.elevation_deg.unwrap_or(cfg.ue.elevation_deg);
    let pose = UePose::facing(p, a.azimuth_deg.to_radians(), el.to_radians());
    Ok(Query { cfg, sc, pose })
}

fn active_ids(q: &Query) -> Vec<u32> {
    match &q.cfg.sweeps.panel_sets[..] {
        [one] => one.clone(),
        _ => q.sc.panels.iter().map(|p| p.id).collect(),
    }
}

fn pose_json(p: &UePose) -> Value {
    let (r, n) = (p.position(), p.normal());
    json!({ "position": [r.x, r.y, r.z], "normal": [n.x, n.y, n.z] })
}

fn manifest_to(dir: Option<&Path>, m: &RunManifest) -> Result<()> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        m.write(d)?;
    }
    Ok(())
}

fn cmd_localize(a: &PoseArgs) -> Result<Value> {
    let t0 = Instant::now();
    let q = query(a)?;
    let set = q.sc.active(&active_ids(&q))?;
    let serving: Vec<String> = q.sc.serving(&set, &q.pose).iter().map(|v| v.id.to_string()).collect();
    let mut rng = draw_rng(q.cfg.seed, 0);
    let est = q.sc.localize(&set, &q.pose, Some(&mut rng))?;
    let err_m = (est.position() - q.pose.position()).norm();
    let cos = est.orientation().dot(&q.pose.normal()).clamp(-1.0, 1.0);
    let mut m = RunManifest::new("localize", &q.cfg, q.cfg.seed, 1, 1);
    m.stage("localize", t0);
    manifest_to(a.common.out.as_deref(), &m)?;
    Ok(json!({
        "true_pose": pose_json(&q.pose),
        "active_panels": set.panel_ids,
        "serving_anchors": serving,
        "anchors_used": est.anchor_ids.iter().map(|i| i.to_string()).collect::<Vec<_>>(),
        "estimate": {
            "position": est.position,
            "normal": est.orientation,
        },
        "position_error_mm": err_m * 1e3,
        "orientation_error_deg": cos.acos().to_degrees(),
        "condition_number": est.condition_number,
        "residual_m": est.residual_m,
    }))
}

fn cmd_link_budget(a: &PoseArgs) -> Result<Value> {
    let t0 = Instant::now();
    let q = query(a)?;
    let set = q.sc.active(&active_ids(&q))?;
    let mut rng = draw_rng(q.cfg.seed, 0);
    let est = q.sc.localize(&set, &q.pose, Some(&mut rng))?;
    let b = q.sc.link_budget(&set, &q.pose, &est.position())?;
    let gamma = q.sc.mmwave.gamma_t();
    let mut m = RunManifest::new("link-budget", &q.cfg, q.cfg.seed, 1, 1);
    m.stage("link-budget", t0);
    manifest_to(a.common.out.as_deref(), &m)?;
    let route = b.route.as_ref().map(|r| {
        json!({
            "panels": r.panel_ids,
            "length": r.panel_ids.len(),
            "segment_lengths_m": r.segment_lengths,
            "chi_s": r.feasibility.iter().map(|f| u8::from(*f)).collect::<Vec<_>>(),
        })
    });
    let gains = b.gain.map(|g| {
        json!({
            "cascaded_db": db(g.cascaded),
            "effective_aperture_m2": g.aperture,
            "final_panel_db": db(g.final_gain),
            "ue_gain": g.ue_gain,
            "ue_gain_db": db(g.ue_gain),
            "route_db": db(g.total()),
        })
    });
    Ok(json!({
        "true_pose": pose_json(&q.pose),
        "estimated_position": est.position,
        "active_panels": set.panel_ids,
        "feasible": b.feasible,
        "route": route,
        "gains": gains,
        "path_loss_db": if b.feasible { db(b.path_loss) } else { Value::Null },
        "snr_db": db(b.snr_factor * gamma),
        "transmit_snr_db": linear_to_db(gamma),
        "rate_bits_per_hz": b.spectral_efficiency,
    }))
}

fn cmd_figure(which: Figure, c: &Common) -> Result<Value> {
    let t0 = Instant::now();
    let cfg = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let sets = cfg.sweeps.panel_sets.clone();
    let iterations = cfg.sweeps.iterations;
    let mut m = RunManifest::new(&format!("figure {}", which.name()), &cfg, cfg.seed, iterations, cfg.workers);
    let result = match which {
        Figure::Fig2 => {
            let sc = build_scenario(&cfg)?;
            m.iterations = 1;
            let step = cfg.sweeps.azimuth_step_deg;
            let n = (360.0 / step).round() as usize;
            let az: Vec<f64> = (0..n).map(|i| i as f64 * step).collect();
            run_error_vs_azimuth(&sc, &sets, &az)?
        }
        Figure::Fig3 => {
            let sc = build_scenario(&cfg)?;
            run_rate_vs_snr(&sc, &sets, &cfg.sweeps.snr_db, iterations, cfg.seed, None)?
        }
        Figure::Fig4 => run_rate_vs_elements(
            &cfg,
            &sets,
            &cfg.sweeps.elements,
            cfg.sweeps.elements_snr_db,
            iterations,
            cfg.seed,
            None,
        )?,
    };
    let t1 = Instant::now();
    m.stage("sweep", t0);
    m.absorb(&result);
    let csv = write_csv(&out, &result)?;
    m.outputs.push(csv.display().to_string());
    m.stage("write", t1);
    let manifest = m.write(&out)?;
    Ok(json!({
        "csv": csv.display().to_string(),
        "manifest": manifest.display().to_string(),
        "rows": result.rows.len(),
        "errors": result.errors,
    }))
}

fn cmd_config(c: &Common, canonical: bool) -> Result<Value> {
    let cfg = load_config(c)?;
    let text = if canonical { cfg.canonical_json() } else { cfg.pretty_json() };
    println!("{text}");
    Ok(Value::Null)
}

fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Localize(a) => cmd_localize(a),
        Command::LinkBudget(a) => cmd_link_budget(a),
        Command::Figure { which, common } => cmd_figure(*which, common),
        Command::Config { common, canonical } => cmd_config(common, *canonical),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            let report = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}
