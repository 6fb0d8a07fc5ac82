//! Batch commands behind the `cmfseg` binary. Each command writes into an
//! output directory and refuses to replace existing files unless forced.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::cmf::{build_capacities, solve_cmf, CmfReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_volume, payload_path, save_mask, save_volume};
use crate::metrics::{evaluate_batch, BatchReport};
use crate::oracle::{discretize, labels_to_mask, min_cut};
use crate::phantom::{generate_lv_phantom, generate_training_set, probability_from_volume, simulate_acquisition};
use crate::prior_cmf::{segment_with_prior, OuterRecord};
use crate::render::{hstack, render_overlay};
use crate::shape::{align_mask, CANONICAL_EDGE, fit_gaussian_prior, fit_kde_prior, load_model, save_model, ModelKind, ShapeModel};
use crate::volume::{resample_trilinear, Volume3D};

const MODULE: &str = "cli";

pub const CONFIG_FILE: &str = "config.txt";

/// Output directory with write-once semantics.
#[derive(Debug)]
pub struct OutDir {
    dir: PathBuf,
    force: bool,
}

impl OutDir {
    pub fn new(dir: impl Into<PathBuf>, force: bool) -> Self {
        OutDir { dir: dir.into(), force }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Creates the directory and checks that none of `names` exists yet.
    /// Volume headers (`.mhd`) also claim their `.raw` payload.
    fn claim<S: AsRef<str>>(&self, names: &[S]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        if self.force {
            return Ok(());
        }
        for name in names {
            let path = self.path(name.as_ref());
            let mut claimed = vec![path.clone()];
            if path.extension().is_some_and(|e| e == "mhd") {
                claimed.push(payload_path(&path));
            }
            if let Some(p) = claimed.into_iter().find(|p| p.exists()) {
                return Err(Error::Exists(p));
            }
        }
        Ok(())
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn config_text(cfg: &RunConfig) -> String {
    cfg.to_kv().to_text()
}

/// Writes the ground truth, activity, noisy acquisition and probability map
/// of one phantom, plus the resolved configuration.
pub fn cmd_phantom(cfg: &RunConfig, out: &OutDir) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let names = ["gt_mask.mhd", "activity.mhd", "noisy.mhd", "prob.mhd", CONFIG_FILE];
    out.claim(&names)?;
    let (gt, activity) = generate_lv_phantom(&cfg.phantom)?;
    let noisy = simulate_acquisition(&activity, &cfg.phantom)?;
    let prob = probability_from_volume(&noisy, cfg.gain, cfg.midpoint)?;
    save_mask(&gt, out.path(names[0]))?;
    save_volume(&activity, out.path(names[1]))?;
    save_volume(&noisy, out.path(names[2]))?;
    save_volume(&prob, out.path(names[3]))?;
    out.write(CONFIG_FILE, config_text(cfg))?;
    Ok(names.iter().map(|n| out.path(n)).collect())
}

/// Writes `n` defect-free ground-truth masks with jittered geometry,
/// `shape_000.mhd`, `shape_001.mhd`, …
pub fn cmd_training_set(cfg: &RunConfig, n: usize, out: &OutDir) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let names: Vec<String> = (0..n).map(|i| format!("shape_{i:03}.mhd")).collect();
    out.claim(&names)?;
    out.claim(&[CONFIG_FILE])?;
    let masks = generate_training_set(n, &cfg.phantom, &cfg.variation, cfg.seed)?;
    let mut paths = Vec::with_capacity(n + 1);
    for (name, mask) in names.iter().zip(&masks) {
        let path = out.path(name);
        save_mask(mask, &path)?;
        paths.push(path);
    }
    paths.push(out.write(CONFIG_FILE, config_text(cfg))?);
    Ok(paths)
}

/// Fits the configured shape model to the given masks and writes `model.shape`.
pub fn cmd_fit_prior(cfg: &RunConfig, masks: &[PathBuf], out: &OutDir) -> Result<(ShapeModel, PathBuf)> {
    cfg.validate()?;
    if masks.is_empty() {
        return Err(Error::invalid(MODULE, "fit-prior needs at least one mask"));
    }
    out.claim(&["model.shape"])?;
    let samples = masks
        .iter()
        .map(|p| {
            let mask = load_volume(p)?;
            mask.ensure_binary(MODULE, "training mask")?;
            align_mask(&mask, [CANONICAL_EDGE; 3])
        })
        .collect::<Result<Vec<_>>>()?;
    let model = match cfg.model_kind {
        ModelKind::Gaussian => fit_gaussian_prior(&samples, cfg.modes, cfg.lambda_perp)?,
        ModelKind::Kde => fit_kde_prior(&samples, cfg.modes, cfg.lambda_perp, cfg.sigma)?,
    };
    let path = out.path("model.shape");
    save_model(&model, &path)?;
    Ok((model, path))
}

/// Which slice `segment` renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSpec {
    pub axis: usize,
    /// Defaults to the middle slice.
    pub index: Option<usize>,
}

impl std::str::FromStr for SliceSpec {
    type Err = Error;

    /// `AXIS` or `AXIS:INDEX`, e.g. `2` or `2:20`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(MODULE, format!("expected AXIS or AXIS:INDEX, got {s:?}"));
        let (axis, index) = match s.split_once(':') {
            Some((a, i)) => (a, Some(i.parse().map_err(|_| bad())?)),
            None => (s, None),
        };
        let axis = axis.parse().map_err(|_| bad())?;
        if axis > 2 {
            return Err(bad());
        }
        Ok(SliceSpec { axis, index })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegmentArgs {
    pub prob: PathBuf,
    pub model: Option<PathBuf>,
    /// Background of the overlays; the probability map when absent.
    pub image: Option<PathBuf>,
    pub overlay: Option<SliceSpec>,
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub mask: Volume3D,
    pub plain: Volume3D,
    pub trace: Vec<OuterRecord>,
    pub files: Vec<PathBuf>,
}

/// Brings a mask solved on the working grid back to the input grid.
fn to_native(mask: &Volume3D, native: &Volume3D) -> Result<Volume3D> {
    if mask.dims() == native.dims() {
        return Ok(mask.clone());
    }
    let back = resample_trilinear(mask, native.dims())?;
    Volume3D::new(
        *native.grid(),
        back.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    )
}

/// Tab-separated run log: a `# solve k` line before each inner solve's
/// per-iteration records.
pub fn format_run_log(reports: &[&CmfReport]) -> Vec<u8> {
    let mut out = Vec::new();
    for (k, r) in reports.iter().enumerate() {
        // writing to a Vec cannot fail
        let _ = writeln!(out, "# solve {k}: {} iterations, converged = {}", r.iters, r.converged);
        let _ = r.write_log(&mut out);
    }
    out
}

pub fn format_trace(trace: &[OuterRecord]) -> String {
    let mut s = String::from("iter\tcut_energy\tshape_energy\tdisagreement\tobjective\tcmf_iters\tforeground\n");
    for r in trace {
        s += &format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{}\n",
            r.iter, r.cut_energy, r.shape_energy, r.disagreement, r.objective, r.cmf_iters, r.foreground
        );
    }
    s
}

/// Plain CMF without a model, shape-prior CMF with one. Writes `mask.mhd`,
/// `run_log.tsv`, `config.txt`, `trace.tsv` (with a model) and
/// `overlay.ppm` (when requested).
pub fn cmd_segment(cfg: &RunConfig, args: &SegmentArgs, out: &OutDir) -> Result<SegmentOutput> {
    cfg.validate()?;
    let mut names = vec!["mask.mhd", "run_log.tsv", CONFIG_FILE];
    if args.model.is_some() {
        names.push("trace.tsv");
    }
    if args.overlay.is_some() {
        names.push("overlay.ppm");
    }
    out.claim(&names)?;

    let prob = load_volume(&args.prob)?;
    let model = args.model.as_ref().map(load_model).transpose()?;
    let background = args.image.as_ref().map(load_volume).transpose()?;
    if let Some(bg) = &background {
        bg.grid().ensure_same(prob.grid(), "overlay image")?;
    }
    let overlay = args
        .overlay
        .map(|spec| {
            let n = prob.dims()[spec.axis];
            let index = spec.index.unwrap_or(n / 2);
            if index >= n {
                return Err(Error::invalid(
                    MODULE,
                    format!("slice {index} out of range along axis {} (size {n})", spec.axis),
                ));
            }
            Ok((spec.axis, index))
        })
        .transpose()?;

    let working = match cfg.grid {
        Some(g) if g != prob.dims() => resample_trilinear(&prob, g)?,
        _ => prob.clone(),
    };
    let (mask, plain, reports, trace) = match &model {
        Some(model) => {
            let sol = segment_with_prior(&working, model, &cfg.prior)?;
            let mut reports = sol.earlier;
            reports.push(sol.last.report);
            (sol.mask, sol.plain, reports, sol.trace)
        }
        None => {
            let caps = build_capacities(&working, &cfg.capacity_params())?;
            let sol = solve_cmf(&caps, &cfg.prior.cmf)?;
            (sol.mask.clone(), sol.mask, vec![sol.report], Vec::new())
        }
    };
    let mask = to_native(&mask, &prob)?;
    let plain = to_native(&plain, &prob)?;

    let mut files = vec![out.path("mask.mhd")];
    save_mask(&mask, &files[0])?;
    files.push(out.write("run_log.tsv", format_run_log(&reports.iter().collect::<Vec<_>>()))?);
    files.push(out.write(CONFIG_FILE, config_text(cfg))?);
    if model.is_some() {
        files.push(out.write("trace.tsv", format_trace(&trace))?);
    }
    if let Some((axis, index)) = overlay {
        let bg = background.as_ref().unwrap_or(&prob);
        let empty = Volume3D::zeros(*prob.grid());
        let mut columns = vec![render_overlay(bg, &empty, axis, index)?, render_overlay(bg, &plain, axis, index)?];
        if model.is_some() {
            columns.push(render_overlay(bg, &mask, axis, index)?);
        }
        files.push(out.write("overlay.ppm", hstack(&columns, 2)?.to_ppm())?);
    }
    Ok(SegmentOutput {
        mask,
        plain,
        trace,
        files,
    })
}

/// Scores each prediction against its ground truth and writes `report.tsv`.
/// Cases are named by prediction path and listed in path order.
pub fn cmd_evaluate(pred: &[PathBuf], gt: &[PathBuf], out: &OutDir) -> Result<(BatchReport, PathBuf)> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            MODULE,
            format!("{} predictions but {} ground-truth masks", pred.len(), gt.len()),
        ));
    }
    out.claim(&["report.tsv"])?;
    let mut pairs: Vec<(&PathBuf, &PathBuf)> = pred.iter().zip(gt).collect();
    pairs.sort();
    let loaded = pairs
        .iter()
        .map(|(p, g)| Ok((p.display().to_string(), load_volume(p)?, load_volume(g)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_batch(loaded.iter().map(|(n, p, g)| (n.clone(), p, g)))?;
    let path = out.write("report.tsv", report.to_tsv())?;
    Ok((report, path))
}

/// Exact discrete minimum cut of the plain capacities (small grids only);
/// writes `oracle_mask.mhd` and returns the cut value.
pub fn cmd_oracle(cfg: &RunConfig, prob: &Path, out: &OutDir) -> Result<(f64, PathBuf)> {
    cfg.validate()?;
    out.claim(&["oracle_mask.mhd"])?;
    let prob = load_volume(prob)?;
    let caps = build_capacities(&prob, &cfg.capacity_params())?;
    let graph = discretize(&caps)?;
    let cut = min_cut(&graph)?;
    let mask = labels_to_mask(*prob.grid(), &cut.cut.labels);
    let path = out.path("oracle_mask.mhd");
    save_mask(&mask, &path)?;
    Ok((cut.cut.value, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::KeyValues;

    fn small_cfg() -> RunConfig {
        let text = "phantom.dims = 24 24 24\nphantom.center = 11.5 11.5 10\nphantom.axes = 6 6 9\n\
                    phantom.thickness = 2.5\nsegment.grid = native\ncmf.max_iters = 60";
        RunConfig::from_kv(&KeyValues::parse(text, "test").unwrap()).unwrap()
    }

    #[test]
    fn slice_spec_parsing() {
        assert_eq!("2".parse::<SliceSpec>().unwrap(), SliceSpec { axis: 2, index: None });
        assert_eq!("0:7".parse::<SliceSpec>().unwrap(), SliceSpec { axis: 0, index: Some(7) });
        for bad in ["3", "x", "1:", "1:-2"] {
            assert!(bad.parse::<SliceSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn outputs_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::new(dir.path(), false);
        cmd_phantom(&small_cfg(), &out).unwrap();
        let err = cmd_phantom(&small_cfg(), &out).unwrap_err();
        assert!(matches!(err, Error::Exists(_)));
        assert!(err.is_io());
        cmd_phantom(&small_cfg(), &OutDir::new(dir.path(), true)).unwrap();
    }

    #[test]
    fn claim_covers_raw_payloads() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mask.raw"), b"x").unwrap();
        let err = OutDir::new(dir.path(), false).claim(&["mask.mhd"]).unwrap_err();
        assert!(matches!(err, Error::Exists(p) if p.ends_with("mask.raw")));
    }

    #[test]
    fn run_log_lists_every_solve() {
        let r = CmfReport {
            iters: 1,
            final_residual: 0.5,
            converged: false,
            primal_energy: 1.0,
            history: vec![crate::cmf::IterRecord {
                index: 0,
                residual: 0.5,
                elapsed_ms: 1.25,
            }],
        };
        let text = String::from_utf8(format_run_log(&[&r, &r])).unwrap();
        assert_eq!(text.matches("# solve").count(), 2);
        assert!(text.contains("# solve 1: 1 iterations, converged = false\niter\tresidual\telapsed_ms\n0\t5.000000000e-1\t1.250\n"));
    }

    #[test]
    fn evaluate_rejects_mismatched_lists() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_evaluate(&[PathBuf::from("a.mhd")], &[], &OutDir::new(dir.path(), false)).unwrap_err();
        assert_eq!(err.module(), MODULE);
    }
}
