//! Slice overlays: a grayscale slice with the mask outline burned in, written
//! as binary PPM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

const MODULE: &str = "render";

pub const CONTOUR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// In-plane axes `(horizontal, vertical)` of a slice normal to `axis`.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Renders slice `index` normal to `axis`. Intensities are scaled by the
/// volume-wide range; mask voxels with an in-plane 4-neighbour outside the
/// mask (or outside the slice) are drawn in [`CONTOUR`].
pub fn render_overlay(volume: &Volume3D, mask: &Volume3D, axis: usize, index: usize) -> Result<RgbImage> {
    volume.grid().ensure_same(mask.grid(), "overlay mask")?;
    mask.ensure_binary(MODULE, "overlay mask")?;
    if axis > 2 {
        return Err(Error::invalid(MODULE, format!("axis must be 0, 1 or 2, got {axis}")));
    }
    let dims = volume.dims();
    if index >= dims[axis] {
        return Err(Error::invalid(
            MODULE,
            format!("slice {index} out of range along axis {axis} (size {})", dims[axis]),
        ));
    }
    let (h, v) = plane_axes(axis);
    let (width, height) = (dims[h], dims[v]);
    let at = |x: usize, y: usize| {
        let mut c = [0; 3];
        c[axis] = index;
        c[h] = x;
        c[v] = y;
        volume.grid().index(c[0], c[1], c[2])
    };
    let (lo, hi) = volume.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let inside = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < width
            && (y as usize) < height
            && mask.data()[at(x as usize, y as usize)] == 1.0
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (xi, yi) = (x as isize, y as isize);
            let edge = inside(xi, yi)
                && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                    .iter()
                    .any(|(dx, dy)| !inside(xi + dx, yi + dy));
            if edge {
                pixels.extend_from_slice(&CONTOUR);
            } else {
                let g = ((volume.data()[at(x, y)] - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                pixels.extend_from_slice(&[g, g, g]);
            }
        }
    }
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

/// Places equally tall images side by side, separated by `gap` black columns.
pub fn hstack(images: &[RgbImage], gap: usize) -> Result<RgbImage> {
    let Some(first) = images.first() else {
        return Err(Error::invalid(MODULE, "nothing to stack"));
    };
    let height = first.height;
    if images.iter().any(|i| i.height != height) {
        return Err(Error::invalid(MODULE, "stacked images must share their height"));
    }
    let width = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for (n, img) in images.iter().enumerate() {
            if n > 0 {
                pixels.extend(std::iter::repeat_n(0u8, 3 * gap));
            }
            pixels.extend_from_slice(&img.pixels[3 * y * img.width..3 * (y + 1) * img.width]);
        }
    }
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn ramp(dims: [usize; 3]) -> Volume3D {
        Volume3D::from_fn(Grid::unit(dims).unwrap(), |i, j, k| (i + 2 * j + 3 * k) as f64).unwrap()
    }

    #[test]
    fn empty_mask_is_plain_grayscale() {
        let v = ramp([4, 3, 2]);
        let img = render_overlay(&v, &Volume3D::zeros(*v.grid()), 2, 1).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        // max value 3 + 4 + 3 = 10 maps to 255
        assert_eq!(img.pixel(0, 0), [77, 77, 77]);
        assert_eq!(img.pixel(3, 2), [255, 255, 255]);
        assert!(img.pixels.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn full_mask_outlines_the_slice_border() {
        let v = ramp([5, 4, 3]);
        let img = render_overlay(&v, &Volume3D::filled(*v.grid(), 1.0), 0, 2).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        for y in 0..3 {
            for x in 0..4 {
                let border = x == 0 || y == 0 || x == 3 || y == 2;
                assert_eq!(img.pixel(x, y) == CONTOUR, border, "({x},{y})");
            }
        }
    }

    #[test]
    fn two_voxel_mask_contour_positions() {
        let g = Grid::unit([5, 5, 1]).unwrap();
        let v = Volume3D::zeros(g);
        let mut m = vec![0.0; g.len()];
        m[g.index(1, 2, 0)] = 1.0;
        m[g.index(2, 2, 0)] = 1.0;
        let img = render_overlay(&v, &Volume3D::new(g, m).unwrap(), 2, 0).unwrap();
        let red: Vec<(usize, usize)> = (0..5)
            .flat_map(|y| (0..5).map(move |x| (x, y)))
            .filter(|&(x, y)| img.pixel(x, y) == CONTOUR)
            .collect();
        assert_eq!(red, vec![(1, 2), (2, 2)]);
        assert_eq!(img.pixel(0, 0), [0, 0, 0]);
    }

    #[test]
    fn ppm_bytes_and_errors() {
        let v = ramp([2, 2, 2]);
        let img = render_overlay(&v, &Volume3D::zeros(*v.grid()), 1, 0).unwrap();
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 12);
        assert!(render_overlay(&v, &Volume3D::zeros(*v.grid()), 1, 2).is_err());
        assert!(render_overlay(&v, &Volume3D::zeros(*v.grid()), 3, 0).is_err());
        let row = hstack(&[img.clone(), img.clone()], 1).unwrap();
        assert_eq!(row.width, 5);
        assert_eq!(row.pixel(2, 0), [0, 0, 0]);
        assert_eq!(row.pixel(3, 1), img.pixel(0, 1));
    }
}
