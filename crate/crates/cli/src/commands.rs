use std::fs;
use std::path::{Path, PathBuf};

use kspod::metrics::{evaluate_case, CaseReport};
use kspod::snapshot::{linspace, tensor_grid, uniform_times};
use kspod::{generate_slhd, read_dataset, synth_flowfield, train as fit, write_dataset, DesignMatrix, EmulatorModel};
use kspod::{SnapshotSet, SynthRecipe};
use serde::Serialize;

use crate::access;
use crate::config::RunConfig;
use crate::CliError;

/// Offset of the held-out design seed from the root seed.
const HELDOUT_SEED_OFFSET: u64 = 1;
/// Held-out points stay this far inside the unit cube.
const HELDOUT_MARGIN: f64 = 0.1;

#[derive(Debug, Serialize)]
pub struct Report {
    pub model: Option<String>,
    pub rank: Option<usize>,
    pub cases: Vec<CaseReport>,
    pub mean_field_error: f64,
    pub mean_axial_eps: f64,
}

impl Report {
    fn new(model: Option<&EmulatorModel>, model_path: Option<&Path>, cases: Vec<CaseReport>) -> Self {
        let avg = |f: &dyn Fn(&CaseReport) -> f64| cases.iter().map(f).sum::<f64>() / cases.len().max(1) as f64;
        Report {
            model: model_path
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned()),
            rank: model.map(|m| m.rank()),
            mean_field_error: avg(&|c| c.field_error),
            mean_axial_eps: avg(&|c| c.axial_mean_eps),
            cases,
        }
    }
}

fn io(e: std::io::Error) -> CliError {
    CliError::Domain(e.into())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io),
        _ => Ok(()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    access::write(path);
    fs::write(path, bytes).map_err(io)
}

fn save_dataset(set: &SnapshotSet, path: &Path) -> Result<(), CliError> {
    ensure_parent(path)?;
    access::write(path);
    Ok(write_dataset(set, path)?)
}

fn load_dataset(path: &Path) -> Result<SnapshotSet, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("dataset not found: {}", path.display())));
    }
    access::read(path);
    Ok(read_dataset(path)?)
}

fn load_model(path: &Path) -> Result<EmulatorModel, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("model not found: {}", path.display())));
    }
    access::read(path);
    let bytes = fs::read(path).map_err(io)?;
    Ok(EmulatorModel::from_bytes(&bytes)?)
}

fn write_report(report: &Report, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Sorted `*.kspd` files of a directory.
fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "kspd"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .kspd files in {}", dir.display())));
    }
    Ok(files)
}

fn recipe(cfg: &RunConfig) -> Result<SynthRecipe, CliError> {
    let mut r = SynthRecipe::desk(cfg.design.ranges()?);
    r.mean.length = cfg.synth.length;
    r.mean.wall_radius = cfg.synth.wall_radius;
    Ok(r)
}

/// Synthesizes one dataset per physical design point into `dir`, naming them
/// `{prefix}01.kspd`, `{prefix}02.kspd`, ...
fn synth_points(cfg: &RunConfig, points: &[Vec<f64>], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, CliError> {
    let s = &cfg.synth;
    let grid = tensor_grid(&linspace(0.0, s.length, s.nx), &linspace(0.0, s.wall_radius, s.nr));
    let times = uniform_times(s.snapshots, s.dt);
    let recipe = recipe(cfg)?;
    fs::create_dir_all(dir).map_err(io)?;
    let mut out = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let mut set = synth_flowfield(x, &grid, &times, &recipe)?;
        set.case_id = format!("{prefix}{:02}", i + 1);
        let path = dir.join(format!("{}.kspd", set.case_id));
        save_dataset(&set, &path)?;
        out.push(path);
    }
    Ok(out)
}

fn training_design(cfg: &RunConfig) -> Result<DesignMatrix, CliError> {
    let d = &cfg.design;
    Ok(generate_slhd(d.slices, d.per_slice, d.dims, cfg.seed)?)
}

/// Held-out physical points: a single-slice design squeezed into the
/// interior of the range.
fn heldout_points(cfg: &RunConfig) -> Result<Vec<Vec<f64>>, CliError> {
    let d = &cfg.design;
    let unit = generate_slhd(1, d.heldout, d.dims, cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET))?;
    let ranges = d.ranges()?;
    (0..unit.n())
        .map(|i| {
            let u: Vec<f64> = unit
                .row(i)
                .iter()
                .map(|v| HELDOUT_MARGIN + (1.0 - 2.0 * HELDOUT_MARGIN) * v)
                .collect();
            Ok(ranges.to_physical(&u)?)
        })
        .collect()
}

pub fn design(cfg: &RunConfig) -> Result<(), CliError> {
    let design = training_design(cfg)?;
    let mut buf = Vec::new();
    design.write_csv(&mut buf)?;
    write_bytes(&cfg.paths.design, &buf)?;
    log::info!("wrote {} design points to {}", design.n(), cfg.paths.design.display());
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let path = &cfg.paths.design;
    if !path.is_file() {
        return Err(CliError::Usage(format!("design not found: {}", path.display())));
    }
    access::read(path);
    let design = DesignMatrix::read_csv(fs::File::open(path).map_err(io)?)?;
    let ranges = cfg.design.ranges()?;
    if design.dims() != ranges.dims() {
        return Err(CliError::Usage(format!(
            "design has {} columns but the configured ranges have {}",
            design.dims(),
            ranges.dims()
        )));
    }
    let points = (0..design.n())
        .map(|i| ranges.to_physical(&design.row(i)))
        .collect::<kspod::Result<Vec<_>>>()?;
    synth_points(cfg, &points, &cfg.paths.dataset_dir, "case")
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let opts = cfg.train_options()?;
    let cases = dataset_files(&cfg.paths.dataset_dir)?
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<Vec<_>, _>>()?;
    let model = fit(&cases, &opts)?;
    log::info!("trained on {} cases, rank {}", model.cases(), model.rank());
    write_bytes(&cfg.paths.model, &model.to_bytes())
}

fn time_indices(cfg: &RunConfig, model: &EmulatorModel) -> Vec<usize> {
    cfg.predict
        .time_indices
        .clone()
        .unwrap_or_else(|| (0..model.times().len()).collect())
}

pub fn predict(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let model = load_model(&cfg.paths.model)?;
    let x = cfg
        .predict
        .design
        .as_ref()
        .ok_or_else(|| CliError::Usage("no design point given (use --design)".into()))?;
    let set = model.predict_dataset(x, &time_indices(cfg, &model))?;
    save_dataset(&set, out)
}

pub fn eval(cfg: &RunConfig, sim: &Path, emu: &Path) -> Result<(), CliError> {
    let sim = load_dataset(sim)?;
    let emu = load_dataset(emu)?;
    let case = evaluate_case(&sim, &emu, &cfg.eval_options())?;
    write_report(&Report::new(None, None, vec![case]), &cfg.paths.report)
}

pub fn pipeline(cfg: &RunConfig, root: &Path) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    for p in [
        &mut cfg.paths.design,
        &mut cfg.paths.dataset_dir,
        &mut cfg.paths.heldout_dir,
        &mut cfg.paths.model,
        &mut cfg.paths.prediction_dir,
        &mut cfg.paths.report,
    ] {
        *p = root.join(&*p);
    }
    let cfg = cfg;

    access::phase("design");
    design(&cfg)?;
    let heldout = heldout_points(&cfg)?;

    access::phase("synth");
    synth(&cfg)?;
    let heldout_files = synth_points(&cfg, &heldout, &cfg.paths.heldout_dir, "heldout")?;

    access::phase("train");
    train(&cfg)?;

    access::phase("predict");
    let model = load_model(&cfg.paths.model)?;
    let mut pairs = Vec::with_capacity(heldout.len());
    for (x, sim_path) in heldout.iter().zip(&heldout_files) {
        let set = model.predict_dataset(x, &time_indices(&cfg, &model))?;
        let stem = sim_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = cfg.paths.prediction_dir.join(format!("{stem}.kspd"));
        save_dataset(&set, &out)?;
        pairs.push((sim_path.clone(), out));
    }

    access::phase("eval");
    let opts = cfg.eval_options();
    let mut cases = Vec::with_capacity(pairs.len());
    for (sim_path, emu_path) in &pairs {
        let sim = load_dataset(sim_path)?;
        let mut emu = load_dataset(emu_path)?;
        if emu.times.len() != sim.times.len() {
            return Err(CliError::Usage("pipeline evaluation needs every snapshot predicted".into()));
        }
        emu.case_id = sim.case_id.clone();
        cases.push(evaluate_case(&sim, &emu, &opts)?);
    }
    let report = Report::new(Some(&model), Some(&cfg.paths.model), cases);
    log::info!(
        "held-out mean field error {:.3}%, mean axial eps {:.3}%",
        report.mean_field_error,
        report.mean_axial_eps
    );
    write_report(&report, &cfg.paths.report)
}
