use std::f64::consts::PI;

use super::Image;
use crate::error::{Error, Result};

/// Precomputed bilinear taps mapping a square aerial image onto an
/// `out_h × out_w` panorama strip.
///
/// Output pixel `(i, j)` samples the aerial image at
/// `row = S/2 − (S/2)·r·cos θ`, `col = S/2 + (S/2)·r·sin θ` with
/// `r = (out_h − i)/out_h` and `θ = 2πj/out_w`: column 0 looks north and
/// columns sweep clockwise; the bottom row approaches the image center.
/// Taps that fall outside the source contribute zero.
#[derive(Clone, Debug)]
pub struct PolarMap {
    size: usize,
    out_h: usize,
    out_w: usize,
    /// Per output pixel: four `(source pixel index, weight)` taps in the
    /// order (r0,c0), (r0,c1), (r1,c0), (r1,c1).
    taps: Vec<[(Option<usize>, f64); 4]>,
}

impl PolarMap {
    pub fn new(size: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::config("aerial size", format!("must be ≥ 2, got {size}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::config(
                "polar output",
                format!("dimensions must be ≥ 1, got {out_h}×{out_w}"),
            ));
        }
        let half = size as f64 / 2.0;
        let index = |r: i64, c: i64| {
            (r >= 0 && c >= 0 && (r as usize) < size && (c as usize) < size)
                .then(|| r as usize * size + c as usize)
        };
        let mut taps = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let radius = (out_h - i) as f64 / out_h as f64;
            for j in 0..out_w {
                let theta = 2.0 * PI * j as f64 / out_w as f64;
                let row = half - half * radius * theta.cos();
                let col = half + half * radius * theta.sin();
                let (r0, c0) = (row.floor(), col.floor());
                let (fr, fc) = (row - r0, col - c0);
                let (r0, c0) = (r0 as i64, c0 as i64);
                taps.push([
                    (index(r0, c0), (1.0 - fr) * (1.0 - fc)),
                    (index(r0, c0 + 1), (1.0 - fr) * fc),
                    (index(r0 + 1, c0), fr * (1.0 - fc)),
                    (index(r0 + 1, c0 + 1), fr * fc),
                ]);
            }
        }
        Ok(Self { size, out_h, out_w, taps })
    }

    /// Interleaved `out_h × out_w × 3` samples at full precision.
    pub fn apply_f64(&self, aerial: &Image) -> Result<Vec<f64>> {
        if aerial.height() != self.size || aerial.width() != self.size {
            return Err(Error::Shape(format!(
                "polar map built for {0}×{0}, got {1}×{2}",
                self.size,
                aerial.height(),
                aerial.width()
            )));
        }
        let src = aerial.data();
        let mut out = Vec::with_capacity(self.out_h * self.out_w * 3);
        for taps in &self.taps {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for &(idx, w) in taps {
                    let v = idx.map_or(0.0, |p| src[p * 3 + c] as f64);
                    acc += w * v;
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, aerial: &Image) -> Result<Image> {
        let out = self.apply_f64(aerial)?;
        Image::new(self.out_h, self.out_w, out.into_iter().map(|v| v as f32).collect())
    }
}

fn check_square(aerial: &Image) -> Result<()> {
    if aerial.height() != aerial.width() {
        return Err(Error::config(
            "model.polar_transform",
            format!(
                "aerial image must be square, got {}×{}",
                aerial.height(),
                aerial.width()
            ),
        ));
    }
    Ok(())
}

/// Warps a square `S × S` aerial image into an `out_h × out_w` panorama-like strip.
pub fn polar_transform(aerial: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    check_square(aerial)?;
    PolarMap::new(aerial.height(), out_h, out_w)?.apply(aerial)
}

/// [`polar_transform`] without rounding to `f32`: interleaved `out_h × out_w × 3`.
pub fn polar_transform_f64(aerial: &Image, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    check_square(aerial)?;
    PolarMap::new(aerial.height(), out_h, out_w)?.apply_f64(aerial)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape() {
        let img = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        let out = polar_transform(&img, 4, 16).unwrap();
        assert_eq!((out.height(), out.width()), (4, 16));
    }

    #[test]
    fn constant_image_stays_constant_inside() {
        let rgb = [0.25, 0.5, 0.75];
        let img = Image::filled(16, 16, rgb);
        // radius ≤ 7/8 keeps every tap inside the 16×16 source
        let out = polar_transform(&img, 8, 32).unwrap();
        for i in 1..8 {
            for j in 0..32 {
                let p = out.pixel(i, j);
                for c in 0..3 {
                    assert!((p[c] - rgb[c]).abs() < 1e-6, "({i},{j}) {p:?}");
                }
            }
        }
    }

    #[test]
    fn small_radius_converges_to_center() {
        let img = Image::from_fn(32, 32, |y, x| {
            if (15..=17).contains(&y) && (15..=17).contains(&x) {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            }
        });
        let out = polar_transform(&img, 64, 12).unwrap();
        for j in 0..12 {
            let p = out.pixel(63, j);
            assert!((p[0] - 1.0).abs() < 1e-6 && p[1] == 0.0 && p[2].abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            polar_transform(&Image::filled(4, 5, [0.0; 3]), 2, 2),
            Err(Error::Config { .. })
        ));
        assert!(polar_transform(&Image::filled(1, 1, [0.0; 3]), 2, 2).is_err());
        assert!(polar_transform(&Image::filled(4, 4, [0.0; 3]), 0, 2).is_err());
    }
}
