use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spinewarp::cli::{
    cmd_evaluate, cmd_phantom, cmd_run, merge, read_config, thread_limit, CliError, CliResult, EvaluateConfig,
    PhantomConfig, RunConfig, Settings,
};

#[derive(Parser)]
#[command(name = "spinewarp", version, about = "Virtual spine straightening and cement upper bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Straighten, inpaint the fractured vertebrae and write the report.
    Run(RunArgs),
    /// Write a synthetic healthy/fractured spine with truth.json.
    Phantom(PhantomArgs),
    /// Fill a run report with truth values, optionally against an ablation run.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ct: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Comma-separated labels, e.g. L2 or 21,T12.
    #[arg(long)]
    fractured: Option<String>,
    /// Atlas directory (index.json + masks); a built-in phantom atlas otherwise.
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Skip straightening and inpaint on the input image.
    #[arg(long)]
    ablation: bool,
    /// Also write the blended displacement field.
    #[arg(long)]
    export_field: bool,
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    window_level: Option<f32>,
    #[arg(long)]
    window_width: Option<f32>,
    /// Pre-fracture scan of the same patient, for metrics.
    #[arg(long, requires = "reference_mask")]
    reference_ct: Option<PathBuf>,
    #[arg(long, requires = "reference_ct")]
    reference_mask: Option<PathBuf>,
    /// Phantom truth.json for the pre-fracture columns.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    icp_max_iterations: Option<usize>,
    #[arg(long)]
    icp_tolerance: Option<f64>,
    #[arg(long)]
    icp_max_points: Option<usize>,
    #[arg(long)]
    margin_mm: Option<f64>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Comma-separated levels to fracture.
    #[arg(long)]
    fracture: Option<String>,
    #[arg(long)]
    height_factor: Option<f64>,
    #[arg(long)]
    kink_deg: Option<f64>,
    /// Anterior wedge collapse (true) or uniform collapse (false).
    #[arg(long)]
    wedge: Option<bool>,
    /// Level range, e.g. T10-L5.
    #[arg(long)]
    levels: Option<String>,
    /// Minimum field of view in mm, e.g. 256x128x384.
    #[arg(long)]
    fov: Option<String>,
    /// Voxel spacing in mm, one or three values.
    #[arg(long)]
    spacing: Option<String>,
    /// Also write an atlas built from the healthy phantom.
    #[arg(long)]
    write_atlas: bool,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output directory of `spinewarp run`.
    run_dir: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Run directory of the matching run with (or without) straightening.
    #[arg(long)]
    ablation_compare: Option<PathBuf>,
}

fn put(s: &mut Settings, k: &str, v: Option<impl ToString>) {
    if let Some(v) = v {
        s.insert(k.into(), v.to_string());
    }
}

fn put_flag(s: &mut Settings, k: &str, on: bool) {
    if on {
        s.insert(k.into(), "true".into());
    }
}

fn layered(config: Option<&PathBuf>, flags: Settings) -> CliResult<Settings> {
    let file = match config {
        Some(p) => read_config(p)?,
        None => Settings::new(),
    };
    Ok(merge(file, flags))
}

fn run(a: RunArgs) -> CliResult<()> {
    let mut s = Settings::new();
    put(&mut s, "ct", a.ct.map(|p| p.display().to_string()));
    put(&mut s, "mask", a.mask.map(|p| p.display().to_string()));
    put(&mut s, "fractured", a.fractured);
    put(&mut s, "atlas", a.atlas.map(|p| p.display().to_string()));
    put(&mut s, "output", a.output.map(|p| p.display().to_string()));
    put_flag(&mut s, "ablation", a.ablation);
    put_flag(&mut s, "export_field", a.export_field);
    put_flag(&mut s, "overwrite", a.overwrite);
    put(&mut s, "window_level", a.window_level);
    put(&mut s, "window_width", a.window_width);
    put(&mut s, "reference_ct", a.reference_ct.map(|p| p.display().to_string()));
    put(&mut s, "reference_mask", a.reference_mask.map(|p| p.display().to_string()));
    put(&mut s, "truth", a.truth.map(|p| p.display().to_string()));
    put(&mut s, "icp_max_iterations", a.icp_max_iterations);
    put(&mut s, "icp_tolerance", a.icp_tolerance);
    put(&mut s, "icp_max_points", a.icp_max_points);
    put(&mut s, "margin_mm", a.margin_mm);
    let cfg = RunConfig::from_settings(&layered(a.config.as_ref(), s)?)?;
    let report = cmd_run(&cfg)?;
    print!("{}", report.to_text());
    Ok(())
}

fn phantom(a: PhantomArgs) -> CliResult<()> {
    let mut s = Settings::new();
    put(&mut s, "seed", a.seed);
    put(&mut s, "output", a.output.map(|p| p.display().to_string()));
    put(&mut s, "fracture", a.fracture);
    put(&mut s, "height_factor", a.height_factor);
    put(&mut s, "kink_deg", a.kink_deg);
    put(&mut s, "wedge", a.wedge);
    put(&mut s, "levels", a.levels);
    put(&mut s, "fov", a.fov);
    put(&mut s, "spacing", a.spacing);
    put_flag(&mut s, "write_atlas", a.write_atlas);
    put_flag(&mut s, "overwrite", a.overwrite);
    let cfg = PhantomConfig::from_settings(&layered(a.config.as_ref(), s)?)?;
    let truth = cmd_phantom(&cfg)?;
    println!(
        "wrote {} levels to {} (fractured: {})",
        truth.levels.len(),
        cfg.output.display(),
        if truth.fractured_levels.is_empty() {
            "none".to_string()
        } else {
            truth.fractured_levels.join(", ")
        }
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let ev = cmd_evaluate(&EvaluateConfig {
        run_dir: a.run_dir,
        truth: a.truth,
        ablation_compare: a.ablation_compare,
    })?;
    print!("{}", ev.text);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_limit().and_then(|n| {
        if let Some(n) = n {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::bad_input(e.to_string()))?;
        }
        match cli.command {
            Command::Run(a) => run(a),
            Command::Phantom(a) => phantom(a),
            Command::Evaluate(a) => evaluate(a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
