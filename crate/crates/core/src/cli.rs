//! Command implementations behind the `spinewarp` binary.
//!
//! Settings come from three layers, highest first: command-line flags, a
//! config file, built-in defaults. The config file is flat `key = value`
//! text; `#` starts a comment. Keys are the long flag names with `-` or `_`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{ablation_table, fracture_distance, PipelineReport, PreFracture};
use crate::atlas::{build_atlas, Atlas};
use crate::error::Error;
use crate::labels;
use crate::nifti::{read_labels, read_scalar, write_field_nifti, write_nifti};
use crate::phantom::{apply_fracture, generate_healthy, FractureSpec, PhantomSpec, TruthDocument};
use crate::pipeline::{compare_reference, run_pipeline, PipelineOptions, Reference};
use crate::render::{write_mip_png, write_scatter_png, Window};
use crate::volume::{mip, Axis};

/// Seed of the phantom used as the atlas when none is given.
pub const DEFAULT_ATLAS_SEED: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadInput,
    Pipeline,
    Io,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub path: Option<PathBuf>,
}

impl CliError {
    pub fn bad_input(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::BadInput,
            message: message.into(),
            path: None,
        }
    }

    fn at(mut self, path: &Path) -> Self {
        self.path.get_or_insert_with(|| path.to_path_buf());
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::BadInput => 2,
            ErrorKind::Pipeline => 3,
            ErrorKind::Io => 4,
        }
    }

    /// Single-line machine-readable record.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a CliError,
            exit_code: i32,
        }
        serde_json::to_string(&Record {
            error: self,
            exit_code: self.exit_code(),
        })
        .expect("serializable")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}: {}", p.display(), self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { .. } | Error::Png(_) => ErrorKind::Io,
            Error::Degenerate(_) | Error::NonFinite(_) => ErrorKind::Pipeline,
            _ => ErrorKind::BadInput,
        };
        let path = match &e {
            Error::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError {
            kind,
            message: e.to_string(),
            path,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Input-side failures keep their kind; everything else that goes wrong
/// while the pipeline runs is a pipeline failure.
fn pipeline_err(e: Error) -> CliError {
    let keep = matches!(e, Error::InvalidInput(_) | Error::Io { .. } | Error::Png(_));
    let mut c = CliError::from(e);
    if !keep {
        c.kind = ErrorKind::Pipeline;
    }
    c
}

pub type Settings = BTreeMap<String, String>;

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_").to_ascii_lowercase()
}

pub fn parse_config(text: &str) -> CliResult<Settings> {
    let mut out = Settings::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::bad_input(format!("config line {}: expected key = value", n + 1)))?;
        out.insert(normalize_key(k), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> CliResult<Settings> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
    parse_config(&text).map_err(|e| e.at(path))
}

/// `flags` win over `file`.
pub fn merge(file: Settings, flags: Settings) -> Settings {
    let mut out = file;
    out.extend(flags.into_iter().map(|(k, v)| (normalize_key(&k), v)));
    out
}

struct Reader<'a> {
    s: &'a Settings,
    known: &'static [&'static str],
}

impl Reader<'_> {
    fn check_keys(&self) -> CliResult<()> {
        for k in self.s.keys() {
            if !self.known.contains(&k.as_str()) {
                return Err(CliError::bad_input(format!("unknown setting {k:?}")));
            }
        }
        Ok(())
    }

    fn str(&self, k: &str) -> Option<&str> {
        self.s.get(k).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn path(&self, k: &str) -> Option<PathBuf> {
        self.str(k).map(PathBuf::from)
    }

    fn required_path(&self, k: &str) -> CliResult<PathBuf> {
        self.path(k)
            .ok_or_else(|| CliError::bad_input(format!("missing required setting {}", k.replace('_', "-"))))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str, default: T) -> CliResult<T> {
        match self.str(k) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::bad_input(format!("invalid value {v:?} for {k}"))),
        }
    }

    fn flag(&self, k: &str) -> CliResult<bool> {
        match self.str(k).map(|v| v.to_ascii_lowercase()) {
            None => Ok(false),
            Some(v) if ["1", "true", "yes", "on"].contains(&v.as_str()) => Ok(true),
            Some(v) if ["0", "false", "no", "off"].contains(&v.as_str()) => Ok(false),
            Some(v) => Err(CliError::bad_input(format!("invalid boolean {v:?} for {k}"))),
        }
    }

    fn labels(&self, k: &str) -> CliResult<Vec<u8>> {
        let Some(v) = self.str(k) else {
            return Ok(Vec::new());
        };
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| labels::parse(s).map_err(CliError::from))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ct: PathBuf,
    pub mask: PathBuf,
    pub fractured: BTreeSet<u8>,
    /// Default atlas phantom when absent.
    pub atlas: Option<PathBuf>,
    pub output: PathBuf,
    pub export_field: bool,
    pub overwrite: bool,
    pub window: Window,
    pub reference: Option<(PathBuf, PathBuf)>,
    pub truth: Option<PathBuf>,
    pub options: PipelineOptions,
}

const RUN_KEYS: &[&str] = &[
    "ct",
    "mask",
    "fractured",
    "atlas",
    "output",
    "ablation",
    "export_field",
    "overwrite",
    "window_level",
    "window_width",
    "reference_ct",
    "reference_mask",
    "truth",
    "icp_max_iterations",
    "icp_tolerance",
    "icp_max_points",
    "margin_mm",
];

impl RunConfig {
    pub fn from_settings(s: &Settings) -> CliResult<Self> {
        let r = Reader { s, known: RUN_KEYS };
        r.check_keys()?;
        let fractured: BTreeSet<u8> = r.labels("fractured")?.into_iter().collect();
        if fractured.is_empty() {
            return Err(CliError::bad_input("missing required setting fractured"));
        }
        let mut options = PipelineOptions {
            ablation: r.flag("ablation")?,
            ..Default::default()
        };
        let icp = &mut options.straighten.icp;
        icp.max_iterations = r.parse("icp_max_iterations", icp.max_iterations)?;
        icp.tolerance = r.parse("icp_tolerance", icp.tolerance)?;
        icp.max_points = r.parse("icp_max_points", icp.max_points)?;
        options.inpaint.icp = options.straighten.icp;
        options.straighten.margin_mm = r.parse("margin_mm", options.straighten.margin_mm)?;
        if !(options.straighten.margin_mm >= 0.0) || options.straighten.icp.max_iterations == 0 {
            return Err(CliError::bad_input("margin must be >= 0 and icp iterations > 0"));
        }
        let d = Window::default();
        let window = Window {
            level: r.parse("window_level", d.level)?,
            width: r.parse("window_width", d.width)?,
        };
        if !(window.width > 0.0) {
            return Err(CliError::bad_input("window width must be > 0"));
        }
        let reference = match (r.path("reference_ct"), r.path("reference_mask")) {
            (Some(c), Some(m)) => Some((c, m)),
            (None, None) => None,
            _ => return Err(CliError::bad_input("reference-ct and reference-mask go together")),
        };
        Ok(RunConfig {
            ct: r.required_path("ct")?,
            mask: r.required_path("mask")?,
            fractured,
            atlas: r.path("atlas"),
            output: r.required_path("output")?,
            export_field: r.flag("export_field")?,
            overwrite: r.flag("overwrite")?,
            window,
            reference,
            truth: r.path("truth"),
            options,
        })
    }
}

fn require_exists(p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::bad_input("no such file or directory").at(p))
    }
}

pub fn default_atlas() -> crate::Result<Atlas> {
    build_atlas(&generate_healthy(&PhantomSpec::with_seed(DEFAULT_ATLAS_SEED))?.mask)
}

fn load_atlas(dir: Option<&Path>) -> CliResult<Atlas> {
    match dir {
        Some(d) => Atlas::read(d).map_err(|e| CliError::from(e).at(d)),
        None => default_atlas().map_err(pipeline_err),
    }
}

/// Pre-fracture columns from a phantom truth document. Distances use the
/// healthy mask centroids, as measured on the images.
pub fn pre_from_truth(truth: &TruthDocument, fractured: &BTreeSet<u8>) -> CliResult<PreFracture> {
    let centroids = truth.healthy_mask_centroids()?;
    let mut pre = PreFracture::default();
    for &c in fractured {
        let v = truth
            .healthy_volume(c)
            .ok_or_else(|| CliError::bad_input(format!("truth has no volume for {}", labels::display(c))))?;
        pre.volumes_ml.insert(c, v);
        pre.distances_mm.insert(c, fracture_distance(&centroids, c)?);
    }
    Ok(pre)
}

/// Fresh sibling directory for staging outputs.
fn staging_dir(output: &Path) -> CliResult<PathBuf> {
    let parent = output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CliError::from(Error::io(parent, e)))?;
    let name = output
        .file_name()
        .ok_or_else(|| CliError::bad_input("output must name a directory").at(output))?
        .to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CliError::from(Error::io(&tmp, e)))?;
    }
    fs::create_dir(&tmp).map_err(|e| CliError::from(Error::io(&tmp, e)))?;
    Ok(tmp)
}

fn check_output(output: &Path, overwrite: bool) -> CliResult<()> {
    let occupied = output.is_file()
        || fs::read_dir(output)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
    if occupied && !overwrite {
        return Err(CliError::bad_input("output exists and is not empty (use --overwrite)").at(output));
    }
    Ok(())
}

/// Moves the staged directory into place; the previous content, if any, is
/// removed only after the new one is complete.
fn publish(tmp: &Path, output: &Path) -> CliResult<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| CliError::from(Error::io(p, e))
    };
    if output.exists() {
        let old = tmp.with_extension("old");
        fs::rename(output, &old).map_err(io(output))?;
        fs::rename(tmp, output).map_err(io(output))?;
        if old.is_dir() {
            fs::remove_dir_all(&old).map_err(io(&old))?;
        } else {
            fs::remove_file(&old).map_err(io(&old))?;
        }
    } else {
        fs::rename(tmp, output).map_err(io(output))?;
    }
    Ok(())
}

fn staged<T>(output: &Path, overwrite: bool, write: impl FnOnce(&Path) -> CliResult<T>) -> CliResult<T> {
    check_output(output, overwrite)?;
    let tmp = staging_dir(output)?;
    match write(&tmp) {
        Ok(v) => {
            publish(&tmp, output)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::from(Error::io(path, e)))
}

pub const RUN_ARTIFACTS: [&str; 11] = [
    "straightened.nii.gz",
    "healthy_ct.nii.gz",
    "healthy_mask.nii.gz",
    "report.json",
    "report.txt",
    "mip_pre_sagittal.png",
    "mip_pre_coronal.png",
    "mip_straightened_sagittal.png",
    "mip_straightened_coronal.png",
    "mip_inpainted_sagittal.png",
    "mip_inpainted_coronal.png",
];

pub fn cmd_run(cfg: &RunConfig) -> CliResult<PipelineReport> {
    let mut inputs = vec![&cfg.ct, &cfg.mask];
    inputs.extend(cfg.atlas.iter());
    inputs.extend(cfg.truth.iter());
    if let Some((c, m)) = &cfg.reference {
        inputs.extend([c, m]);
    }
    for p in inputs {
        require_exists(p)?;
    }
    check_output(&cfg.output, cfg.overwrite)?;
    let ct = read_scalar(&cfg.ct).map_err(|e| CliError::from(e).at(&cfg.ct))?;
    let mask = read_labels(&cfg.mask).map_err(|e| CliError::from(e).at(&cfg.mask))?;
    let truth = match &cfg.truth {
        Some(p) => Some(TruthDocument::read(p).map_err(|e| CliError::from(e).at(p))?),
        None => None,
    };
    let atlas = load_atlas(cfg.atlas.as_deref())?;
    let out = run_pipeline(&ct, &mask, &cfg.fractured, &atlas, &cfg.options).map_err(pipeline_err)?;
    let report = match (&cfg.reference, &truth) {
        (Some((rc, rm)), _) => {
            let rct = read_scalar(rc).map_err(|e| CliError::from(e).at(rc))?;
            let rmask = read_labels(rm).map_err(|e| CliError::from(e).at(rm))?;
            let cmp = compare_reference(&out, &Reference { ct: &rct, mask: &rmask }, &atlas, &cfg.options)
                .map_err(pipeline_err)?;
            out.report(Some(cmp.pre), cmp.metrics)
        }
        (None, Some(t)) => out.report(Some(pre_from_truth(t, &cfg.fractured)?), Default::default()),
        (None, None) => out.report(None, Default::default()),
    }
    .map_err(pipeline_err)?;

    staged(&cfg.output, cfg.overwrite, |dir| {
        let straightened = out.working_ct(&ct);
        write_nifti(straightened, dir.join("straightened.nii.gz"))?;
        write_nifti(&out.healthy_ct, dir.join("healthy_ct.nii.gz"))?;
        write_nifti(&out.healthy_mask, dir.join("healthy_mask.nii.gz"))?;
        if let Some(s) = &out.straightened {
            write_nifti(&s.mask, dir.join("straightened_mask.nii.gz"))?;
            if cfg.export_field {
                write_field_nifti(&s.field, dir.join("field.nii.gz"))?;
            }
        }
        write_text(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
        write_text(&dir.join("report.txt"), &report.to_text())?;
        write_text(&dir.join("scatter.csv"), &report.scatter_csv())?;
        let pts: Vec<(f64, f64)> = report
            .volumes
            .iter()
            .filter_map(|r| r.pre_ml.map(|p| (p, r.inpainted_ml)))
            .collect();
        if !pts.is_empty() {
            write_scatter_png(&dir.join("scatter.png"), &pts, 256)?;
        }
        for (stage, vol) in [("pre", &ct), ("straightened", straightened), ("inpainted", &out.healthy_ct)] {
            for axis in [Axis::Sagittal, Axis::Coronal] {
                let p = dir.join(format!("mip_{stage}_{}.png", axis.name()));
                write_mip_png(&p, &mip(vol, axis), cfg.window)?;
            }
        }
        Ok(())
    })?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub fractures: Vec<u8>,
    pub height_factor: f64,
    pub kink_deg: f64,
    pub wedge: bool,
    /// Inclusive code range, cranial first.
    pub levels: Option<(u8, u8)>,
    pub min_fov: [f64; 3],
    pub spacing: [f64; 3],
    pub write_atlas: bool,
    pub overwrite: bool,
}

const PHANTOM_KEYS: &[&str] = &[
    "seed",
    "output",
    "fracture",
    "height_factor",
    "kink_deg",
    "wedge",
    "levels",
    "fov",
    "spacing",
    "write_atlas",
    "overwrite",
];

fn triple(r: &Reader, k: &str, default: [f64; 3]) -> CliResult<[f64; 3]> {
    let Some(v) = r.str(k) else {
        return Ok(default);
    };
    let parts: Vec<f64> = v
        .split(['x', ','])
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::bad_input(format!("invalid {k} {v:?}")))?;
    match parts.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(CliError::bad_input(format!("{k} needs 1 or 3 values, got {v:?}"))),
    }
}

impl PhantomConfig {
    pub fn from_settings(s: &Settings) -> CliResult<Self> {
        let r = Reader { s, known: PHANTOM_KEYS };
        r.check_keys()?;
        let levels = match r.str("levels") {
            None => None,
            Some(v) => {
                let (a, b) = v
                    .split_once('-')
                    .ok_or_else(|| CliError::bad_input(format!("levels must look like T10-L5, got {v:?}")))?;
                Some((labels::parse(a)?, labels::parse(b)?))
            }
        };
        let d = PhantomSpec::default();
        Ok(PhantomConfig {
            seed: r.parse("seed", 0)?,
            output: r.required_path("output")?,
            fractures: r.labels("fracture")?,
            height_factor: r.parse("height_factor", 0.6)?,
            kink_deg: r.parse("kink_deg", 10.0)?,
            wedge: match r.str("wedge") {
                None => true,
                Some(_) => r.flag("wedge")?,
            },
            levels,
            min_fov: triple(&r, "fov", d.min_fov)?,
            spacing: triple(&r, "spacing", d.spacing)?,
            write_atlas: r.flag("write_atlas")?,
            overwrite: r.flag("overwrite")?,
        })
    }

    pub fn spec(&self) -> PhantomSpec {
        let mut spec = PhantomSpec {
            min_fov: self.min_fov,
            spacing: self.spacing,
            ..PhantomSpec::with_seed(self.seed)
        };
        if let Some((a, b)) = self.levels {
            spec.levels = (a..=b).collect();
        }
        spec
    }
}

pub fn cmd_phantom(cfg: &PhantomConfig) -> CliResult<TruthDocument> {
    let spec = cfg.spec();
    spec.validate()?;
    let healthy = generate_healthy(&spec)?;
    let mut cur = healthy.clone();
    for &level in &cfg.fractures {
        let f = FractureSpec {
            level,
            height_factor: cfg.height_factor,
            wedge: cfg.wedge,
            kink_deg: cfg.kink_deg,
        };
        cur = apply_fracture(&cur, &f)?;
    }
    let truth = TruthDocument::from_truth(&spec.levels, &cur.truth);
    staged(&cfg.output, cfg.overwrite, |dir| {
        write_nifti(&healthy.ct, dir.join("healthy_ct.nii.gz"))?;
        write_nifti(&healthy.mask, dir.join("healthy_mask.nii.gz"))?;
        if !cfg.fractures.is_empty() {
            write_nifti(&cur.ct, dir.join("fractured_ct.nii.gz"))?;
            write_nifti(&cur.mask, dir.join("fractured_mask.nii.gz"))?;
        }
        truth.write(&dir.join("truth.json"))?;
        if cfg.write_atlas {
            build_atlas(&healthy.mask)?.write(&dir.join("atlas"))?;
        }
        Ok(())
    })?;
    Ok(truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateConfig {
    pub run_dir: PathBuf,
    pub truth: PathBuf,
    /// Second run directory for a with/without-straightening table.
    pub ablation_compare: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: PipelineReport,
    pub text: String,
}

fn read_report(dir: &Path) -> CliResult<PipelineReport> {
    let p = dir.join("report.json");
    require_exists(&p)?;
    let text = fs::read_to_string(&p).map_err(|e| CliError::from(Error::io(&p, e)))?;
    PipelineReport::from_json(&text).map_err(|e| CliError::from(e).at(&p))
}

/// Fills the pre-fracture columns from truth, writes `evaluation.json` and
/// `evaluation.txt` (plus `ablation.json`/`ablation.txt` for a pair) into
/// the run directory.
pub fn cmd_evaluate(cfg: &EvaluateConfig) -> CliResult<Evaluation> {
    require_exists(&cfg.truth)?;
    let truth = TruthDocument::read(&cfg.truth).map_err(|e| CliError::from(e).at(&cfg.truth))?;
    let fill = |dir: &Path| -> CliResult<PipelineReport> {
        let r = read_report(dir)?;
        let pre = pre_from_truth(&truth, &r.fractured_codes()?)?;
        Ok(r.with_pre(&pre)?)
    };
    let report = fill(&cfg.run_dir)?;
    let mut text = report.to_text();
    write_text(&cfg.run_dir.join("evaluation.json"), &(report.to_json()? + "\n"))?;
    write_text(&cfg.run_dir.join("evaluation.txt"), &text)?;
    if let Some(other) = &cfg.ablation_compare {
        let second = fill(other)?;
        let (with, without) = match (report.ablation, second.ablation) {
            (false, true) => (&report, &second),
            (true, false) => (&second, &report),
            _ => {
                return Err(CliError::bad_input(
                    "ablation comparison needs one run with and one without straightening",
                ))
            }
        };
        let table = ablation_table(with, without)?;
        let t = table.to_text();
        write_text(
            &cfg.run_dir.join("ablation.json"),
            &(serde_json::to_string_pretty(&table).map_err(Error::from)? + "\n"),
        )?;
        write_text(&cfg.run_dir.join("ablation.txt"), &t)?;
        text = format!("{text}\nAblation\n{t}");
    }
    Ok(Evaluation { report, text })
}

/// Worker count from `SPINEWARP_THREADS`, if set.
pub fn thread_limit() -> CliResult<Option<usize>> {
    match std::env::var("SPINEWARP_THREADS") {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::bad_input(format!("SPINEWARP_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> Settings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn config_text_format() {
        let s = parse_config("# comment\nct = a.nii.gz\n\nwindow-level=300 # trailing\n").unwrap();
        assert_eq!(s["ct"], "a.nii.gz");
        assert_eq!(s["window_level"], "300");
        assert!(parse_config("just words").is_err());
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = settings(&[("ct", "file.nii"), ("mask", "m.nii"), ("fractured", "L1"), ("output", "o"), ("window_level", "100")]);
        let flags = settings(&[("fractured", "l2,T12"), ("window-width", "500")]);
        let cfg = RunConfig::from_settings(&merge(file, flags)).unwrap();
        assert_eq!(cfg.ct, PathBuf::from("file.nii"));
        assert_eq!(cfg.fractured, BTreeSet::from([19, 21]));
        assert_eq!(cfg.window, Window { level: 100.0, width: 500.0 });
        assert!(!cfg.options.ablation);
        assert_eq!(cfg.options.straighten.margin_mm, 30.0);
    }

    #[test]
    fn bad_settings_are_input_errors() {
        let base = [("ct", "c"), ("mask", "m"), ("output", "o")];
        let with = |extra: &[(&str, &str)]| {
            let mut s = settings(&base);
            s.extend(settings(extra));
            RunConfig::from_settings(&s)
        };
        for bad in [
            vec![],
            vec![("fractured", "X9")],
            vec![("fractured", "L2"), ("ablation", "maybe")],
            vec![("fractured", "L2"), ("colour", "red")],
            vec![("fractured", "L2"), ("reference_ct", "r")],
            vec![("fractured", "L2"), ("window_width", "0")],
        ] {
            let e = with(&bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad:?}");
        }
    }

    #[test]
    fn error_records() {
        let e = CliError::from(Error::io("/x/y", std::io::Error::other("boom")));
        assert_eq!(e.exit_code(), 4);
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["kind"], "io");
        assert_eq!(v["error"]["path"], "/x/y");
        assert_eq!(v["exit_code"], 4);
        assert_eq!(pipeline_err(Error::Degenerate("d".into())).exit_code(), 3);
        assert_eq!(pipeline_err(Error::MissingLabel(3)).exit_code(), 3);
        assert_eq!(pipeline_err(Error::InvalidInput("i".into())).exit_code(), 2);
    }

    #[test]
    fn phantom_settings() {
        let c = PhantomConfig::from_settings(&settings(&[
            ("output", "o"),
            ("fracture", "L2"),
            ("levels", "t11-l4"),
            ("fov", "256x128x384"),
        ]))
        .unwrap();
        assert_eq!(c.fractures, vec![21]);
        assert_eq!(c.spec().levels, (18..=23).collect::<Vec<_>>());
        assert_eq!(c.min_fov, [256.0, 128.0, 384.0]);
        assert!(c.wedge);
        let d = PhantomConfig::from_settings(&settings(&[("output", "o")])).unwrap();
        assert_eq!(d.spec().levels.len(), 8);
    }
}
