//! Run configuration shared by all CLI commands.
//!
//! A config file is flat `key = value` text (see [`crate::kv`]). Keys are
//! grouped by prefix; absent keys keep their defaults, unknown keys are
//! rejected. `auto` / `none` / `native` select the documented fallbacks.
//!
//! ```text
//! seed = 1
//! cmf.c = 0.35            cmf.gamma = 0.11       cmf.max_iters = 300
//! cmf.tol = 0.0001        cmf.threshold = 0.5    cmf.bound = componentwise
//! cmf.alpha0 = 0.5        cmf.eps = 1e-6
//! prior.outer_iters = 3   prior.beta = 3         prior.width = 0.35
//! prior.pose_rounds = 2
//! phantom.dims = 48 48 48 phantom.center = 23.5 23.5 20
//! phantom.axes = 12 12 18 phantom.thickness = 4  phantom.apex = +z
//! phantom.truncation = 0.6
//! phantom.defect_rho = none          phantom.defect_azimuth = 0 1.5708
//! phantom.defect_polar = 0 3.1416
//! phantom.blur_fwhm = 2.5 phantom.mean_counts = 20
//! phantom.gain = 8        phantom.midpoint = auto
//! variation.axes = 1.5 1.5 2         variation.thickness = 0.5
//! variation.truncation = 0.05        variation.center = 1.5 1.5 1.5
//! segment.grid = 128 128 128         (or `native`)
//! fit.kind = gaussian     fit.modes = 5
//! fit.lambda_perp = auto  fit.sigma = auto
//! ```
//! (one pair per line in an actual file)

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::cmf::{CapacityParams, FlowBound};
use crate::error::{Error, Result};
use crate::kv::{join, KeyValues};
use crate::phantom::{Defect, PhantomConfig, Variation, DEFAULT_GAIN};
use crate::prior_cmf::PriorCmfConfig;
use crate::shape::ModelKind;

const MODULE: &str = "config";

/// Default working grid of `segment`.
pub const DEFAULT_GRID: [usize; 3] = [128, 128, 128];

const DEFAULT_AZIMUTH: [f64; 2] = [0.0, FRAC_PI_2];
const DEFAULT_POLAR: [f64; 2] = [0.0, PI];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds the acquisition noise and the training-set jitter.
    pub seed: u64,
    pub prior: PriorCmfConfig,
    /// `seed` is kept equal to [`RunConfig::seed`].
    pub phantom: PhantomConfig,
    pub gain: f64,
    /// Logistic midpoint; `None` uses the Otsu threshold.
    pub midpoint: Option<f64>,
    pub variation: Variation,
    /// Working grid of `segment`; `None` solves on the input grid.
    pub grid: Option<[usize; 3]>,
    pub model_kind: ModelKind,
    pub modes: usize,
    pub lambda_perp: Option<f64>,
    pub sigma: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        RunConfig {
            seed: phantom.seed,
            prior: PriorCmfConfig::default(),
            phantom,
            gain: DEFAULT_GAIN,
            midpoint: None,
            variation: Variation {
                axes: [1.5, 1.5, 2.0],
                thickness: 0.5,
                truncation: 0.05,
                center: [1.5, 1.5, 1.5],
            },
            grid: Some(DEFAULT_GRID),
            model_kind: ModelKind::Gaussian,
            modes: 5,
            lambda_perp: None,
            sigma: None,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(MODULE, format!("`{key}`: cannot parse {v:?}")))
}

fn array<T: FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items = v
        .split_whitespace()
        .map(|s| value(key, s))
        .collect::<Result<Vec<T>>>()?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| Error::invalid(MODULE, format!("`{key}`: expected {N} values, got {n}")))
}

/// `auto` / `none` (given as `word`) or a value.
fn optional<T: FromStr>(key: &str, v: &str, word: &str) -> Result<Option<T>> {
    if v == word {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

fn show_optional<T: Display>(v: Option<T>, word: &str) -> String {
    v.map_or_else(|| word.to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Defaults overridden by `kv`, validated.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut defect = DefectKeys::from(cfg.phantom.defect);
        for (key, v) in kv.iter() {
            cfg.apply(key, v, &mut defect)?;
        }
        cfg.phantom.defect = defect.rho.map(|rho| Defect {
            azimuth: defect.azimuth,
            polar: defect.polar,
            rho,
        });
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, then applies `overrides` in order (last writer wins).
    pub fn load(path: Option<&Path>, overrides: &KeyValues) -> Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KeyValues::parse(&text, MODULE)?
            }
            None => KeyValues::new(),
        };
        kv.merge(overrides);
        Self::from_kv(&kv)
    }

    fn apply(&mut self, key: &str, v: &str, defect: &mut DefectKeys) -> Result<()> {
        let cmf = &mut self.prior.cmf;
        let ph = &mut self.phantom;
        match key {
            "seed" => {
                self.seed = value(key, v)?;
                ph.seed = self.seed;
            }
            "cmf.c" => cmf.c = value(key, v)?,
            "cmf.gamma" => cmf.gamma = value(key, v)?,
            "cmf.max_iters" => cmf.max_iters = value(key, v)?,
            "cmf.tol" => cmf.tol = value(key, v)?,
            "cmf.threshold" => cmf.threshold = value(key, v)?,
            "cmf.bound" => cmf.bound = v.parse::<FlowBound>()?,
            "cmf.alpha0" => self.prior.alpha0 = value(key, v)?,
            "cmf.eps" => self.prior.eps = value(key, v)?,
            "prior.outer_iters" => self.prior.outer_iters = value(key, v)?,
            "prior.beta" => self.prior.beta = value(key, v)?,
            "prior.width" => self.prior.width = value(key, v)?,
            "prior.pose_rounds" => self.prior.pose_rounds = value(key, v)?,
            "phantom.dims" => ph.dims = array(key, v)?,
            "phantom.center" => ph.center = array(key, v)?,
            "phantom.axes" => ph.axes = array(key, v)?,
            "phantom.thickness" => ph.thickness = value(key, v)?,
            "phantom.apex" => ph.apex = v.parse()?,
            "phantom.truncation" => ph.truncation = value(key, v)?,
            "phantom.defect_rho" => defect.rho = optional(key, v, "none")?,
            "phantom.defect_azimuth" => defect.azimuth = array(key, v)?,
            "phantom.defect_polar" => defect.polar = array(key, v)?,
            "phantom.blur_fwhm" => ph.blur_fwhm = value(key, v)?,
            "phantom.mean_counts" => ph.mean_counts = value(key, v)?,
            "phantom.gain" => self.gain = value(key, v)?,
            "phantom.midpoint" => self.midpoint = optional(key, v, "auto")?,
            "variation.axes" => self.variation.axes = array(key, v)?,
            "variation.thickness" => self.variation.thickness = value(key, v)?,
            "variation.truncation" => self.variation.truncation = value(key, v)?,
            "variation.center" => self.variation.center = array(key, v)?,
            "segment.grid" => {
                self.grid = if v == "native" { None } else { Some(array(key, v)?) }
            }
            "fit.kind" => self.model_kind = v.parse()?,
            "fit.modes" => self.modes = value(key, v)?,
            "fit.lambda_perp" => self.lambda_perp = optional(key, v, "auto")?,
            "fit.sigma" => self.sigma = optional(key, v, "auto")?,
            other => return Err(Error::invalid(MODULE, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Checks every section with its owner's rules.
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if !(self.prior.alpha0 >= 0.0 && self.prior.alpha0.is_finite()) {
            return Err(Error::invalid(MODULE, format!("cmf.alpha0 must be ≥ 0, got {}", self.prior.alpha0)));
        }
        if !(self.prior.eps > 0.0 && self.prior.eps < 0.5) {
            return Err(Error::invalid(MODULE, format!("cmf.eps must lie in (0, 0.5), got {}", self.prior.eps)));
        }
        self.phantom.validate()?;
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::invalid(MODULE, format!("phantom.gain must be > 0, got {}", self.gain)));
        }
        if self.midpoint.is_some_and(|q| !q.is_finite()) {
            return Err(Error::invalid(MODULE, "phantom.midpoint must be finite"));
        }
        let v = &self.variation;
        if v.axes.iter().chain(&v.center).chain([&v.thickness, &v.truncation]).any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid(MODULE, "variation ranges must be finite and ≥ 0"));
        }
        if let Some(g) = self.grid {
            if g.iter().any(|&n| n < 2) {
                return Err(Error::invalid(MODULE, format!("segment.grid needs ≥ 2 voxels per axis, got {g:?}")));
            }
        }
        if self.modes == 0 {
            return Err(Error::invalid(MODULE, "fit.modes must be ≥ 1"));
        }
        if self.lambda_perp.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(MODULE, "fit.lambda_perp must be > 0"));
        }
        if self.sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(MODULE, "fit.sigma must be > 0"));
        }
        Ok(())
    }

    /// Capacity parameters without a shape term.
    pub fn capacity_params(&self) -> CapacityParams<'static> {
        CapacityParams {
            alpha0: self.prior.alpha0,
            edge: None,
            shape: None,
            beta: 0.0,
            eps: self.prior.eps,
        }
    }

    /// Every key with its resolved value; parsing the result gives back `self`.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let (p, c, ph) = (&self.prior, &self.prior.cmf, &self.phantom);
        kv.set("seed", self.seed.to_string());
        kv.set("cmf.c", c.c.to_string());
        kv.set("cmf.gamma", c.gamma.to_string());
        kv.set("cmf.max_iters", c.max_iters.to_string());
        kv.set("cmf.tol", c.tol.to_string());
        kv.set("cmf.threshold", c.threshold.to_string());
        kv.set("cmf.bound", c.bound.name());
        kv.set("cmf.alpha0", p.alpha0.to_string());
        kv.set("cmf.eps", p.eps.to_string());
        kv.set("prior.outer_iters", p.outer_iters.to_string());
        kv.set("prior.beta", p.beta.to_string());
        kv.set("prior.width", p.width.to_string());
        kv.set("prior.pose_rounds", p.pose_rounds.to_string());
        kv.set("phantom.dims", join(&ph.dims));
        kv.set("phantom.center", join(&ph.center));
        kv.set("phantom.axes", join(&ph.axes));
        kv.set("phantom.thickness", ph.thickness.to_string());
        kv.set("phantom.apex", ph.apex.to_string());
        kv.set("phantom.truncation", ph.truncation.to_string());
        let d = DefectKeys::from(ph.defect);
        kv.set("phantom.defect_rho", show_optional(d.rho, "none"));
        kv.set("phantom.defect_azimuth", join(&d.azimuth));
        kv.set("phantom.defect_polar", join(&d.polar));
        kv.set("phantom.blur_fwhm", ph.blur_fwhm.to_string());
        kv.set("phantom.mean_counts", ph.mean_counts.to_string());
        kv.set("phantom.gain", self.gain.to_string());
        kv.set("phantom.midpoint", show_optional(self.midpoint, "auto"));
        kv.set("variation.axes", join(&self.variation.axes));
        kv.set("variation.thickness", self.variation.thickness.to_string());
        kv.set("variation.truncation", self.variation.truncation.to_string());
        kv.set("variation.center", join(&self.variation.center));
        kv.set("segment.grid", self.grid.map_or_else(|| "native".into(), |g| join(&g)));
        kv.set("fit.kind", self.model_kind.name());
        kv.set("fit.modes", self.modes.to_string());
        kv.set("fit.lambda_perp", show_optional(self.lambda_perp, "auto"));
        kv.set("fit.sigma", show_optional(self.sigma, "auto"));
        kv
    }
}

/// Defect keys, independent of each other until parsing is complete.
struct DefectKeys {
    rho: Option<f64>,
    azimuth: [f64; 2],
    polar: [f64; 2],
}

impl From<Option<Defect>> for DefectKeys {
    fn from(d: Option<Defect>) -> Self {
        DefectKeys {
            rho: d.map(|d| d.rho),
            azimuth: d.map_or(DEFAULT_AZIMUTH, |d| d.azimuth),
            polar: d.map_or(DEFAULT_POLAR, |d| d.polar),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(text: &str) -> KeyValues {
        KeyValues::parse(text, "test").unwrap()
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_kv(&KeyValues::new()).unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::from_kv(&kv("seed = 7\nprior.beta = 1.25\nphantom.defect_rho = 0.2\n\
             phantom.defect_azimuth = 1 2.5\nsegment.grid = native\nfit.kind = kde\nfit.sigma = 3\n\
             phantom.midpoint = 0.4\ncmf.bound = euclidean"))
        .unwrap();
        assert_eq!(cfg.phantom.seed, 7);
        assert_eq!(cfg.phantom.defect.unwrap().azimuth, [1.0, 2.5]);
        assert_eq!(cfg.grid, None);
        let text = cfg.to_kv().to_text();
        assert_eq!(RunConfig::from_kv(&kv(&text)).unwrap(), cfg);
        assert_eq!(RunConfig::from_kv(&RunConfig::default().to_kv()).unwrap(), RunConfig::default());
    }

    #[test]
    fn later_values_win() {
        let mut base = kv("prior.beta = 1\ncmf.max_iters = 10");
        base.merge(&kv("prior.beta = 2"));
        let cfg = RunConfig::from_kv(&base).unwrap();
        assert_eq!(cfg.prior.beta, 2.0);
        assert_eq!(cfg.prior.cmf.max_iters, 10);
    }

    #[test]
    fn bad_entries_are_rejected_with_their_module() {
        for (text, module) in [
            ("nope = 1", "config"),
            ("prior.beta = x", "config"),
            ("phantom.dims = 4 4", "config"),
            ("prior.beta = -1", "prior_cmf"),
            ("cmf.tol = 0", "cmf"),
            ("phantom.thickness = 30", "phantom"),
            ("fit.kind = pca", "shape"),
            ("segment.grid = 1 8 8", "config"),
            ("fit.modes = 0", "config"),
        ] {
            let err = RunConfig::from_kv(&kv(text)).unwrap_err();
            assert_eq!(err.module(), module, "{text}");
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.cfg")), &KeyValues::new()).unwrap_err();
        assert!(err.is_io());
    }
}
