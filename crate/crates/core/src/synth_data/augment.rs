//! Training-time flip, crop-and-resize and random erasing, applied jointly
//! to an image and its joint response maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::Raster;
use super::render::PixelBox;
use crate::heatmaps::RawKeypointStack;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Side-length fraction of the kept window.
    pub crop_scale: [f64; 2],
    pub erase_prob: f64,
    /// Area fraction of the erased rectangle.
    pub erase_area: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, crop_prob: 0.5, crop_scale: [0.85, 1.0], erase_prob: 0.5, erase_area: [0.02, 0.2] }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { flip_prob: 0.0, crop_prob: 0.0, erase_prob: 0.0, ..Default::default() }
    }
}

/// What [`augment`] did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentTrace {
    pub flipped: bool,
    /// `(top, left, height, width)` window in image pixels.
    pub crop: Option<(f64, f64, f64, f64)>,
    pub erased: Option<PixelBox>,
}

fn draw(rng: &mut ChaCha8Rng, p: f64) -> bool {
    p > 0.0 && rng.random_bool(p.min(1.0))
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resample of every channel with zero padding outside the grid.
fn crop_resize_maps<T: Scalar>(raw: &RawKeypointStack<T>, top: f64, left: f64, h: f64, w: f64) -> RawKeypointStack<T> {
    let (gh, gw) = (raw.height, raw.width);
    let hw = gh * gw;
    let mut channels = vec![T::zero(); raw.channels.len()];
    let at = |src: &[T], r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= gh as isize || c >= gw as isize {
            0.0
        } else {
            src[r as usize * gw + c as usize].to_f64_lossy()
        }
    };
    for (ch, dst) in channels.chunks_mut(hw).enumerate() {
        let src = &raw.channels[ch * hw..(ch + 1) * hw];
        for r in 0..gh {
            let y = top + (r as f64 + 0.5) * h / gh as f64 - 0.5;
            let (y0, fy) = (y.floor(), y - y.floor());
            for c in 0..gw {
                let x = left + (c as f64 + 0.5) * w / gw as f64 - 0.5;
                let (x0, fx) = (x.floor(), x - x.floor());
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = (at(src, y0, x0) * (1.0 - fx) + at(src, y0, x0 + 1) * fx) * (1.0 - fy)
                    + (at(src, y0 + 1, x0) * (1.0 - fx) + at(src, y0 + 1, x0 + 1) * fx) * fy;
                dst[r * gw + c] = T::lit(v);
            }
        }
    }
    RawKeypointStack { height: gh, width: gw, channels, joints: None }
}

/// Randomly flips, crops and erases. Heatmaps follow the geometric
/// transforms; erasing leaves them untouched, as a pose estimator run
/// before augmentation would.
pub fn augment<T: Scalar>(
    image: &Raster,
    raw: &RawKeypointStack<T>,
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
) -> (Raster, RawKeypointStack<T>, AugmentTrace) {
    let mut trace = AugmentTrace::default();
    let (mut image, mut raw) = (image.clone(), raw.clone());
    if draw(rng, config.flip_prob) {
        image = image.flipped();
        raw = raw.mirrored();
        trace.flipped = true;
    }
    if draw(rng, config.crop_prob) {
        let (hf, wf) = (image.height as f64, image.width as f64);
        let s = uniform(rng, config.crop_scale).clamp(0.1, 1.0);
        let (h, w) = (s * hf, s * wf);
        let top = uniform(rng, [0.0, hf - h]);
        let left = uniform(rng, [0.0, wf - w]);
        image = image.crop_resize(top, left, h, w, image.height, image.width);
        let (sy, sx) = (raw.height as f64 / hf, raw.width as f64 / wf);
        raw = crop_resize_maps(&raw, top * sy, left * sx, h * sy, w * sx);
        trace.crop = Some((top, left, h, w));
    }
    if draw(rng, config.erase_prob) {
        let (ih, iw) = (image.height, image.width);
        let area = uniform(rng, config.erase_area) * (ih * iw) as f64;
        let aspect = uniform(rng, [0.5, 2.0]);
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, ih);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, iw);
        let top = rng.random_range(0..=ih - eh);
        let left = rng.random_range(0..=iw - ew);
        for r in top..top + eh {
            for c in left..left + ew {
                let v: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                image.set(r, c, v);
            }
        }
        trace.erased = Some(PixelBox { top, left, bottom: top + eh, right: left + ew });
    }
    (image, raw, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmaps::{Grouping, HeatmapStack, JointObservation, PartGroup, NUM_JOINTS};
    use crate::rng::stream;

    fn sample_raw() -> RawKeypointStack<f64> {
        let joints: [JointObservation; NUM_JOINTS] =
            std::array::from_fn(|j| JointObservation { row: (j % 8) as f64, col: (j % 3) as f64 * 1.3, visibility: 0.5 + j as f64 / 40.0 });
        crate::heatmaps::synthesize_heatmaps(&joints, 0.9, 8, 4).unwrap()
    }

    fn sample_image() -> Raster {
        let mut r = Raster::filled(16, 8, [0.0; 3]);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        r
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let (img, raw) = (sample_image(), sample_raw());
        let (a, b, t) = augment(&img, &raw, &mut stream(1, &[]), &AugmentConfig::identity());
        assert_eq!(a, img);
        assert_eq!(b, raw);
        assert_eq!(t, AugmentTrace::default());
    }

    #[test]
    fn flip_swaps_lateral_groups() {
        let (img, raw) = (sample_image(), sample_raw());
        let cfg = AugmentConfig { flip_prob: 1.0, ..AugmentConfig::identity() };
        let (_, out, _) = augment(&img, &raw, &mut stream(1, &[]), &cfg);
        let g = Grouping::default();
        let before = HeatmapStack::from_raw(&raw, &g).unwrap();
        let after = HeatmapStack::from_raw(&out, &g).unwrap();
        let (h, w) = (before.height, before.width);
        let right = before.group(PartGroup::RightLowerArm);
        let left = after.group(PartGroup::LeftLowerArm);
        for r in 0..h {
            for c in 0..w {
                assert_eq!(left[r * w + c], right[r * w + (w - 1 - c)]);
            }
        }
    }

    #[test]
    fn full_window_crop_keeps_maps() {
        let raw = sample_raw();
        let same = crop_resize_maps(&raw, 0.0, 0.0, raw.height as f64, raw.width as f64);
        for (a, b) in same.channels.iter().zip(&raw.channels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn erasing_writes_one_rectangle() {
        let img = Raster::filled(16, 8, [0.5; 3]);
        let raw = sample_raw();
        let cfg = AugmentConfig { erase_prob: 1.0, ..AugmentConfig::identity() };
        for seed in 0..20 {
            let (out, maps, trace) = augment(&img, &raw, &mut stream(seed, &[]), &cfg);
            let b = trace.erased.expect("erased");
            assert_eq!(maps, raw);
            // Changed pixels all lie inside the reported box, and their
            // bounding box is a rectangle within it.
            let mut rows = (usize::MAX, 0);
            for r in 0..16 {
                for c in 0..8 {
                    if out.get(r, c) != img.get(r, c) {
                        assert!(r >= b.top && r < b.bottom && c >= b.left && c < b.right);
                        rows = (rows.0.min(r), rows.1.max(r));
                    }
                }
            }
            assert!(rows.0 <= rows.1);
        }
    }
}
