//! Synthetic left-ventricle phantoms: a truncated ellipsoidal shell with an
//! optional hypoperfused sector, SPECT-like blur and count noise, and a
//! logistic stand-in for a network's foreground probability.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume3D};

const MODULE: &str = "phantom";

/// Axis-aligned direction from the ellipsoid centre towards the apex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Apex {
    pub axis: usize,
    pub positive: bool,
}

impl Apex {
    fn sign(self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }
}

impl std::fmt::Display for Apex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = if self.positive { '+' } else { '-' };
        write!(f, "{s}{}", ['x', 'y', 'z'][self.axis])
    }
}

impl std::str::FromStr for Apex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(MODULE, format!("apex must be one of +x -x +y -y +z -z, got {s:?}"));
        let mut chars = s.chars();
        let positive = match chars.next() {
            Some('+') => true,
            Some('-') => false,
            _ => return Err(bad()),
        };
        let axis = match (chars.next(), chars.next()) {
            (Some('x'), None) => 0,
            (Some('y'), None) => 1,
            (Some('z'), None) => 2,
            _ => return Err(bad()),
        };
        Ok(Apex { axis, positive })
    }
}

/// A sector of the shell with reduced tracer uptake.
///
/// Angles are taken around the apex axis: `polar` is measured from the apex
/// direction (0..π), `azimuth` counter-clockwise from the next axis in cyclic
/// order (x→y→z→x). An azimuth range may wrap past 2π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defect {
    pub azimuth: [f64; 2],
    pub polar: [f64; 2],
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub center: [f64; 3],
    /// Outer semi-axes (voxels).
    pub axes: [f64; 3],
    pub thickness: f64,
    pub apex: Apex,
    /// Fraction of the ellipsoid's extent along the apex axis that is kept,
    /// measured from the apex; 1 keeps the closed ellipsoid, 0.5 a half cup.
    pub truncation: f64,
    pub defect: Option<Defect>,
    pub blur_fwhm: f64,
    pub mean_counts: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 48, 48],
            center: [23.5, 23.5, 20.0],
            axes: [12.0, 12.0, 18.0],
            thickness: 4.0,
            apex: Apex {
                axis: 2,
                positive: true,
            },
            truncation: 0.6,
            defect: None,
            blur_fwhm: 2.5,
            mean_counts: 20.0,
            seed: 1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(MODULE, msg));
        if self.dims.iter().any(|&n| n == 0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.axes.iter().chain(&self.center).any(|v| !v.is_finite()) {
            return bad("center and axes must be finite".into());
        }
        let min_axis = self.axes.iter().copied().fold(f64::INFINITY, f64::min);
        if !(self.thickness > 0.0 && self.thickness < min_axis) {
            return bad(format!(
                "wall thickness must lie in (0, {min_axis}), got {}",
                self.thickness
            ));
        }
        // only the kept part of the ellipsoid has to fit
        for a in 0..3 {
            let (mut lo, mut hi) = (self.center[a] - self.axes[a], self.center[a] + self.axes[a]);
            if a == self.apex.axis.min(2) {
                let s = self.apex.sign() * self.axes[a];
                let base = self.center[a] + s * (1.0 - 2.0 * self.truncation.clamp(0.0, 1.0));
                (lo, hi) = (base.min(self.center[a] + s), base.max(self.center[a] + s));
            }
            if lo < 2.0 || hi > self.dims[a] as f64 - 3.0 {
                return bad(format!(
                    "shell spans [{lo}, {hi}] along axis {a}; the grid needs 2 voxels of margin within [0, {}]",
                    self.dims[a] - 1
                ));
            }
        }
        if self.apex.axis > 2 {
            return bad("apex axis must be 0, 1 or 2".into());
        }
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return bad(format!("truncation must lie in (0, 1], got {}", self.truncation));
        }
        if let Some(d) = &self.defect {
            if !(0.0..=1.0).contains(&d.rho) {
                return bad(format!("defect intensity scale must lie in [0, 1], got {}", d.rho));
            }
            if d.azimuth.iter().chain(&d.polar).any(|v| !v.is_finite())
                || d.azimuth[0] > d.azimuth[1]
                || d.polar[0] > d.polar[1]
            {
                return bad("defect angle ranges must be finite and ordered".into());
            }
        }
        if !(self.blur_fwhm >= 0.0 && self.blur_fwhm.is_finite()) {
            return bad(format!("blur_fwhm must be ≥ 0, got {}", self.blur_fwhm));
        }
        if !(self.mean_counts > 0.0 && self.mean_counts.is_finite()) {
            return bad(format!("mean_counts must be positive, got {}", self.mean_counts));
        }
        Ok(())
    }

    fn frame(&self) -> (usize, usize, usize) {
        let w = self.apex.axis;
        (w, (w + 1) % 3, (w + 2) % 3)
    }

    fn in_defect(&self, offset: [f64; 3]) -> bool {
        let Some(d) = &self.defect else {
            return false;
        };
        let (w, u, v) = self.frame();
        let along = self.apex.sign() * offset[w];
        let polar = offset[u].hypot(offset[v]).atan2(along);
        let mut az = offset[v].atan2(offset[u]);
        if az < 0.0 {
            az += 2.0 * PI;
        }
        let in_az = (az >= d.azimuth[0] && az < d.azimuth[1])
            || (az + 2.0 * PI >= d.azimuth[0] && az + 2.0 * PI < d.azimuth[1]);
        in_az && polar >= d.polar[0] && polar <= d.polar[1]
    }
}

/// Ground-truth shell mask and noiseless activity.
pub fn generate_lv_phantom(cfg: &PhantomConfig) -> Result<(Volume3D, Volume3D)> {
    cfg.validate()?;
    let grid = Grid::unit(cfg.dims)?;
    let outer = cfg.axes;
    let inner = cfg.axes.map(|a| a - cfg.thickness);
    let (w, _, _) = cfg.frame();
    let base = 1.0 - 2.0 * cfg.truncation;
    let mut mask = vec![0.0; grid.len()];
    let mut activity = vec![0.0; grid.len()];
    for (idx, (m, act)) in mask.iter_mut().zip(activity.iter_mut()).enumerate() {
        let c = grid.coords(idx);
        let offset: [f64; 3] = std::array::from_fn(|a| c[a] as f64 - cfg.center[a]);
        let q = |ax: [f64; 3]| (0..3).map(|a| (offset[a] / ax[a]).powi(2)).sum::<f64>();
        let kept = cfg.apex.sign() * offset[w] / outer[w] >= base;
        if kept && q(outer) <= 1.0 && q(inner) > 1.0 {
            *m = 1.0;
            *act = if cfg.in_defect(offset) {
                cfg.defect.unwrap().rho
            } else {
                1.0
            };
        }
    }
    let mask = Volume3D::new(grid, mask)?;
    if mask.count_nonzero() == 0 {
        return Err(Error::invalid(MODULE, "phantom shell contains no voxels"));
    }
    Ok((mask, Volume3D::new(grid, activity)?))
}

/// Separable Gaussian blur (kernel renormalized at the borders) followed by
/// Poisson counting at `mean_counts` per unit activity, rescaled back.
pub fn simulate_acquisition(activity: &Volume3D, cfg: &PhantomConfig) -> Result<Volume3D> {
    if !(cfg.mean_counts > 0.0 && cfg.mean_counts.is_finite()) {
        return Err(Error::invalid(
            MODULE,
            format!("mean_counts must be positive, got {}", cfg.mean_counts),
        ));
    }
    if let Some(i) = activity.data().iter().position(|&v| v < 0.0) {
        return Err(Error::invalid(MODULE, format!("negative activity at voxel {i}")));
    }
    let blurred = gaussian_blur(activity, cfg.blur_fwhm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = blurred
        .data()
        .iter()
        .map(|&v| {
            let mean = v * cfg.mean_counts;
            let counts = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| Error::invalid(MODULE, format!("poisson mean {mean}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            Ok(counts / cfg.mean_counts)
        })
        .collect::<Result<Vec<f64>>>()?;
    Volume3D::new(*activity.grid(), data)
}

/// Gaussian smoothing with the given full width at half maximum (voxels).
pub fn gaussian_blur(vol: &Volume3D, fwhm: f64) -> Result<Volume3D> {
    if !(fwhm >= 0.0 && fwhm.is_finite()) {
        return Err(Error::invalid(MODULE, format!("blur_fwhm must be ≥ 0, got {fwhm}")));
    }
    let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
    if sigma < 1e-3 {
        return Ok(vol.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let grid = *vol.grid();
    let strides = [1, grid.dims[0], grid.plane()];
    let mut cur = vol.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = grid.dims[axis] as isize;
        let stride = strides[axis];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = grid.coords(idx)[axis] as isize;
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, w) in taps.iter().enumerate() {
                let q = pos + k as isize - radius;
                if (0..n).contains(&q) {
                    let j = (idx as isize + (q - pos) * stride as isize) as usize;
                    acc += w * cur[j];
                    norm += w;
                }
            }
            *out = acc / norm;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Volume3D::new(grid, cur)
}

/// Otsu threshold of the sample histogram (256 bins between min and max).
pub fn otsu_threshold(vol: &Volume3D) -> Result<f64> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        return Err(Error::invalid(
            MODULE,
            "volume is constant; Otsu threshold is undefined",
        ));
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in vol.data() {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = vol.len() as f64;
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let sum_all: f64 = (0..BINS).map(|b| hist[b] as f64 * centre(b)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for b in 0..BINS - 1 {
        w0 += hist[b] as f64;
        sum0 += hist[b] as f64 * centre(b);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (sum0 / w0 - (sum_all - sum0) / w1).powi(2);
        if between > best {
            best = between;
            best_bin = b;
        }
    }
    Ok(lo + (best_bin + 1) as f64 * width)
}

pub const DEFAULT_GAIN: f64 = 8.0;

/// Foreground probability `logistic(gain · (v − midpoint))`; the midpoint
/// defaults to the Otsu threshold of the volume.
pub fn probability_from_volume(noisy: &Volume3D, gain: f64, midpoint: Option<f64>) -> Result<Volume3D> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::invalid(MODULE, format!("gain must be positive, got {gain}")));
    }
    let q = match midpoint {
        Some(q) if q.is_finite() => q,
        Some(q) => return Err(Error::invalid(MODULE, format!("midpoint must be finite, got {q}"))),
        None => otsu_threshold(noisy)?,
    };
    noisy.map(|v| crate::shape::logistic(gain * (v - q)))
}

/// Half-widths of the uniform jitter applied per training phantom.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Variation {
    pub axes: [f64; 3],
    pub thickness: f64,
    pub truncation: f64,
    pub center: [f64; 3],
}

/// `n` copies of `base` with geometry jittered uniformly within `var`;
/// deterministic in `seed`. Each copy is validated.
pub fn jittered_configs(
    n: usize,
    base: &PhantomConfig,
    var: &Variation,
    seed: u64,
) -> Result<Vec<PhantomConfig>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    (0..n)
        .map(|_| {
            let mut cfg = base.clone();
            for a in 0..3 {
                cfg.axes[a] += jitter(var.axes[a]);
            }
            cfg.thickness += jitter(var.thickness);
            cfg.truncation = (cfg.truncation + jitter(var.truncation)).min(1.0);
            for a in 0..3 {
                cfg.center[a] += jitter(var.center[a]);
            }
            cfg.validate().map(|_| cfg)
        })
        .collect()
}

/// Ground-truth masks of [`jittered_configs`].
pub fn generate_training_set(
    n: usize,
    base: &PhantomConfig,
    var: &Variation,
    seed: u64,
) -> Result<Vec<Volume3D>> {
    jittered_configs(n, base, var, seed)?
        .iter()
        .map(|cfg| generate_lv_phantom(cfg).map(|(mask, _)| mask))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn connected(mask: &Volume3D) -> bool {
        let g = mask.grid();
        let d = mask.data();
        let Some(start) = d.iter().position(|&v| v == 1.0) else {
            return true;
        };
        let mut seen = vec![false; d.len()];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            let c = g.coords(i);
            for a in 0..3 {
                for s in [-1isize, 1] {
                    let q = c[a] as isize + s;
                    if q < 0 || q >= g.dims[a] as isize {
                        continue;
                    }
                    let mut cc = c;
                    cc[a] = q as usize;
                    let j = g.index(cc[0], cc[1], cc[2]);
                    if d[j] == 1.0 && !seen[j] {
                        seen[j] = true;
                        count += 1;
                        queue.push_back(j);
                    }
                }
            }
        }
        count == mask.count_nonzero()
    }

    #[test]
    fn apex_parses_and_prints() {
        for s in ["+x", "-y", "+z"] {
            assert_eq!(s.parse::<Apex>().unwrap().to_string(), s);
        }
        assert!("z".parse::<Apex>().is_err());
        assert!("+w".parse::<Apex>().is_err());
    }

    #[test]
    fn no_defect_activity_equals_mask() {
        let cfg = PhantomConfig::default();
        let (mask, act) = generate_lv_phantom(&cfg).unwrap();
        assert_eq!(mask, act);
        assert!(connected(&mask));
        let rho_one = PhantomConfig {
            defect: Some(Defect {
                azimuth: [0.0, 2.0],
                polar: [0.0, PI],
                rho: 1.0,
            }),
            ..cfg
        };
        assert_eq!(generate_lv_phantom(&rho_one).unwrap().1, act);
    }

    #[test]
    fn full_shell_volume_matches_closed_form() {
        let cfg = PhantomConfig {
            dims: [40, 44, 48],
            center: [19.5, 21.5, 23.5],
            axes: [12.0, 14.0, 17.0],
            thickness: 3.0,
            truncation: 1.0,
            ..PhantomConfig::default()
        };
        let (mask, _) = generate_lv_phantom(&cfg).unwrap();
        let [a, b, c] = cfg.axes;
        let t = cfg.thickness;
        let expected = 4.0 * PI / 3.0 * (a * b * c - (a - t) * (b - t) * (c - t));
        let got = mask.count_nonzero() as f64;
        assert!((got / expected - 1.0).abs() < 0.05, "{got} vs {expected}");
        assert!(connected(&mask));
    }

    #[test]
    fn full_sphere_zero_defect_silences_activity() {
        let cfg = PhantomConfig {
            defect: Some(Defect {
                azimuth: [0.0, 2.0 * PI],
                polar: [0.0, PI],
                rho: 0.0,
            }),
            ..PhantomConfig::default()
        };
        let (mask, act) = generate_lv_phantom(&cfg).unwrap();
        assert_eq!(mask, generate_lv_phantom(&PhantomConfig::default()).unwrap().0);
        assert!(act.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = PhantomConfig::default();
        let cases = [
            PhantomConfig { thickness: 12.0, ..base.clone() },
            PhantomConfig { truncation: 0.0, ..base.clone() },
            PhantomConfig { center: [5.0, 23.5, 20.0], ..base.clone() },
            PhantomConfig { mean_counts: 0.0, ..base.clone() },
            PhantomConfig {
                defect: Some(Defect { azimuth: [0.0, 1.0], polar: [0.0, 1.0], rho: 1.5 }),
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(generate_lv_phantom(&c).is_err(), "{c:?}");
        }
        let g = Grid::unit([4, 4, 4]).unwrap();
        assert!(simulate_acquisition(&Volume3D::filled(g, -1.0), &base).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let g = Grid::unit([9, 7, 5]).unwrap();
        let b = gaussian_blur(&Volume3D::filled(g, 3.25), 3.0).unwrap();
        assert!(b.data().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn high_counts_without_blur_reproduce_activity() {
        let cfg = PhantomConfig {
            blur_fwhm: 0.0,
            mean_counts: 1e8,
            ..PhantomConfig::default()
        };
        let (_, act) = generate_lv_phantom(&cfg).unwrap();
        let noisy = simulate_acquisition(&act, &cfg).unwrap();
        let num: f64 = noisy.data().iter().zip(act.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = act.data().iter().map(|v| v * v).sum();
        assert!((num / den).sqrt() < 1e-3);
    }

    #[test]
    fn acquisition_is_seeded() {
        let cfg = PhantomConfig::default();
        let (_, act) = generate_lv_phantom(&cfg).unwrap();
        let a = simulate_acquisition(&act, &cfg).unwrap();
        let b = simulate_acquisition(&act, &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_acquisition(&act, &PhantomConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_variance_scales_with_mean() {
        let g = Grid::unit([6, 6, 6]).unwrap();
        let act = Volume3D::from_fn(g, |i, _, _| if i >= 3 { 1.0 } else { 0.0 }).unwrap();
        let voxel = g.index(3, 3, 3);
        let base = PhantomConfig {
            blur_fwhm: 2.0,
            mean_counts: 50.0,
            ..PhantomConfig::default()
        };
        let blurred = gaussian_blur(&act, base.blur_fwhm).unwrap().data()[voxel];
        let xs: Vec<f64> = (0..100)
            .map(|s| {
                let cfg = PhantomConfig { seed: s, ..base.clone() };
                simulate_acquisition(&act, &cfg).unwrap().data()[voxel]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let expected = blurred / base.mean_counts;
        assert!((var / expected - 1.0).abs() < 0.2, "{var} vs {expected}");
    }

    #[test]
    fn probability_map_properties() {
        let g = Grid::unit([4, 1, 1]).unwrap();
        let v = Volume3D::new(g, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let p = probability_from_volume(&v, 8.0, Some(0.5)).unwrap();
        assert_eq!(p.data()[2], 0.5);
        assert!(p.data().windows(2).all(|w| w[0] < w[1]));
        assert!(probability_from_volume(&Volume3D::filled(g, 1.0), 8.0, None).is_err());

        let cfg = PhantomConfig {
            mean_counts: 2000.0,
            ..PhantomConfig::default()
        };
        let (mask, act) = generate_lv_phantom(&cfg).unwrap();
        let noisy = simulate_acquisition(&act, &cfg).unwrap();
        let p = probability_from_volume(&noisy, DEFAULT_GAIN, None).unwrap();
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (q, m) in p.data().iter().zip(mask.data()) {
            match (*q >= 0.5, *m == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let dice = 2.0 * tp / (2.0 * tp + fp + fneg);
        assert!(dice >= 0.9, "{dice}");
    }

    #[test]
    fn training_sets() {
        let base = PhantomConfig::default();
        assert!(generate_training_set(0, &base, &Variation::default(), 1).unwrap().is_empty());
        let same = generate_training_set(3, &base, &Variation::default(), 1).unwrap();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
        let var = Variation {
            axes: [1.5, 1.5, 2.0],
            thickness: 0.5,
            truncation: 0.05,
            center: [1.0, 1.0, 1.0],
        };
        let a = generate_training_set(4, &base, &var, 7).unwrap();
        let b = generate_training_set(4, &base, &var, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(connected));
    }
}
