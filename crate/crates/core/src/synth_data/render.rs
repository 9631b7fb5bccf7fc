//! Stick-figure person renderer, occluders and partial crops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{segment_distance, Raster};
use crate::error::{Error, Result};
use crate::heatmaps::{Joint, JointObservation, NUM_JOINTS};
use crate::rng::{stream, tag};

/// Response level assigned to a joint hidden by an occluder.
pub const OCCLUDED_VISIBILITY: f64 = 0.03;

/// Offsets into [`IdentitySpec::part_appearances`].
pub mod appearance {
    pub const HAIR: usize = 0;
    pub const SKIN: usize = 3;
    pub const UPPER: usize = 6;
    pub const UPPER_ALT: usize = 9;
    pub const STRIPE_PERIOD: usize = 12;
    pub const LOWER: usize = 13;
    pub const SHOES: usize = 16;
    pub const LONG_SLEEVES: usize = 19;
    pub const BUILD: usize = 20;
    pub const LEN: usize = 21;
}

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.55, 0.85],
    [0.20, 0.70, 0.25],
    [0.90, 0.80, 0.20],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.12],
    [0.55, 0.30, 0.70],
    [0.90, 0.50, 0.15],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub part_appearances: Vec<f64>,
    pub seed: u64,
}

impl IdentitySpec {
    /// Draws a random appearance: palette colors with continuous jitter, so
    /// distinct ids differ with probability one.
    pub fn generate(id: usize, master_seed: u64) -> Self {
        let seed = crate::rng::derive_seed(master_seed, &[tag::IDENTITY, id as u64]);
        let mut rng = stream(seed, &[]);
        let mut v = vec![0.0; appearance::LEN];
        let mut color = |rng: &mut ChaCha8Rng, at: usize, jitter: f64| {
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            for k in 0..3 {
                v[at + k] = (base[k] + rng.random_range(-jitter..jitter)).clamp(0.0, 1.0);
            }
        };
        color(&mut rng, appearance::HAIR, 0.1);
        color(&mut rng, appearance::UPPER, 0.1);
        color(&mut rng, appearance::UPPER_ALT, 0.1);
        color(&mut rng, appearance::LOWER, 0.1);
        color(&mut rng, appearance::SHOES, 0.1);
        let skin_tone = rng.random_range(0.35..0.9);
        v[appearance::SKIN] = skin_tone;
        v[appearance::SKIN + 1] = skin_tone * 0.78;
        v[appearance::SKIN + 2] = skin_tone * 0.62;
        v[appearance::STRIPE_PERIOD] = if rng.random_bool(0.5) { rng.random_range(2..=5) as f64 } else { 0.0 };
        v[appearance::LONG_SLEEVES] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        v[appearance::BUILD] = rng.random_range(0.85..1.15);
        IdentitySpec { id, part_appearances: v, seed }
    }

    fn rgb(&self, at: usize) -> [f32; 3] {
        std::array::from_fn(|k| self.part_appearances[at + k] as f32)
    }
}

/// Integer pixel box `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (r, c) = (row.round(), col.round());
        r >= self.top as f64 && r < self.bottom as f64 && c >= self.left as f64 && c < self.right as f64
    }
}

pub struct RenderedSample {
    pub image: Raster,
    /// Image-pixel coordinates.
    pub joints: [JointObservation; NUM_JOINTS],
    pub body_box: PixelBox,
}

/// Per-camera photometric setup, a pure function of the camera index.
struct CameraLook {
    gain: [f32; 3],
    background: [f32; 3],
}

fn camera_look(camera: usize) -> CameraLook {
    let mut rng = stream(0xCA4E_7A, &[camera as u64]);
    CameraLook {
        gain: std::array::from_fn(|_| rng.random_range(0.8..1.2)),
        background: std::array::from_fn(|_| rng.random_range(0.25..0.6)),
    }
}

/// Renders one image of `spec` seen by `camera`. Deterministic in all
/// three arguments.
pub fn render_sample(spec: &IdentitySpec, camera: usize, seed: u64, height: usize, width: usize) -> RenderedSample {
    use appearance as ap;
    let mut rng = stream(seed, &[]);
    let look = camera_look(camera);
    let (hf, wf) = (height as f64, width as f64);

    let mut img = Raster::filled(height, width, look.background);
    // Background clutter.
    for _ in 0..rng.random_range(1..4) {
        let c: [f32; 3] = std::array::from_fn(|k| (look.background[k] + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0));
        let (h, w) = (rng.random_range(2..height / 3), rng.random_range(2..width / 2));
        let (t, l) = (rng.random_range(0..height - h), rng.random_range(0..width - w));
        for r in t..t + h {
            for cc in l..l + w {
                img.set(r, cc, c);
            }
        }
    }

    let person_h = hf * rng.random_range(0.82..0.95);
    let top = rng.random_range(0.0..(hf - person_h).max(0.01));
    let cx = wf / 2.0 + rng.random_range(-1.5..1.5);
    let build = spec.part_appearances[ap::BUILD];
    let unit = person_h;
    let y = |f: f64| top + f * unit;
    let side = |f: f64| f * unit * build;

    let mut joints = [JointObservation { row: 0.0, col: 0.0, visibility: 1.0 }; NUM_JOINTS];
    let mut put = |j: Joint, row: f64, col: f64| joints[j.index()] = JointObservation { row, col, visibility: 1.0 };
    let arm_swing = rng.random_range(-0.03..0.03);
    let stride = rng.random_range(-0.03..0.03);
    put(Joint::Nose, y(0.09), cx);
    put(Joint::LeftEye, y(0.07), cx + side(0.025));
    put(Joint::RightEye, y(0.07), cx - side(0.025));
    put(Joint::LeftEar, y(0.08), cx + side(0.05));
    put(Joint::RightEar, y(0.08), cx - side(0.05));
    put(Joint::LeftShoulder, y(0.19), cx + side(0.11));
    put(Joint::RightShoulder, y(0.19), cx - side(0.11));
    put(Joint::LeftElbow, y(0.34), cx + side(0.14 + arm_swing));
    put(Joint::RightElbow, y(0.34), cx - side(0.14 - arm_swing));
    put(Joint::LeftWrist, y(0.48), cx + side(0.15 + 2.0 * arm_swing));
    put(Joint::RightWrist, y(0.48), cx - side(0.15 - 2.0 * arm_swing));
    put(Joint::LeftHip, y(0.52), cx + side(0.07));
    put(Joint::RightHip, y(0.52), cx - side(0.07));
    put(Joint::LeftKnee, y(0.73), cx + side(0.075 + stride));
    put(Joint::RightKnee, y(0.73), cx - side(0.075 - stride));
    put(Joint::LeftAnkle, y(0.94), cx + side(0.08 + 2.0 * stride));
    put(Joint::RightAnkle, y(0.94), cx - side(0.08 - 2.0 * stride));
    let at = |j: Joint| (joints[j.index()].row, joints[j.index()].col);

    let (skin, hair, upper, upper_alt, lower, shoes) =
        (spec.rgb(ap::SKIN), spec.rgb(ap::HAIR), spec.rgb(ap::UPPER), spec.rgb(ap::UPPER_ALT), spec.rgb(ap::LOWER), spec.rgb(ap::SHOES));
    let stripe = spec.part_appearances[ap::STRIPE_PERIOD];
    let long_sleeves = spec.part_appearances[ap::LONG_SLEEVES] > 0.5;
    let limb = 0.045 * unit * build;
    let leg = 0.05 * unit * build;
    let head_r = 0.075 * unit;
    let head_c = (y(0.085), cx);
    let (sh_y, hip_y) = (y(0.17), y(0.55));

    for r in 0..height {
        for c in 0..width {
            let (py, px) = (r as f64, c as f64);
            let mut color: Option<[f32; 3]> = None;
            // Legs and shoes.
            for (hip, knee, ankle) in [
                (Joint::LeftHip, Joint::LeftKnee, Joint::LeftAnkle),
                (Joint::RightHip, Joint::RightKnee, Joint::RightAnkle),
            ] {
                if segment_distance(py, px, at(hip), at(knee)) <= leg || segment_distance(py, px, at(knee), at(ankle)) <= leg {
                    color = Some(lower);
                }
                let a = at(ankle);
                if segment_distance(py, px, (a.0 + 0.01 * unit, a.1), (a.0 + 0.035 * unit, a.1)) <= leg * 1.1 {
                    color = Some(shoes);
                }
            }
            // Torso, with optional horizontal stripes.
            if py >= sh_y && py <= hip_y {
                let t = (py - sh_y) / (hip_y - sh_y);
                let half = side(0.13) * (1.0 - t) + side(0.10) * t;
                if (px - cx).abs() <= half {
                    let alt = stripe > 0.0 && (((py - sh_y) / stripe).floor() as i64) % 2 == 1;
                    color = Some(if alt { upper_alt } else { upper });
                }
            }
            // Arms.
            for (s, e, w) in [
                (Joint::LeftShoulder, Joint::LeftElbow, Joint::LeftWrist),
                (Joint::RightShoulder, Joint::RightElbow, Joint::RightWrist),
            ] {
                if segment_distance(py, px, at(s), at(e)) <= limb {
                    color = Some(upper);
                }
                if segment_distance(py, px, at(e), at(w)) <= limb {
                    color = Some(if long_sleeves { upper } else { skin });
                }
            }
            // Head with hair on top.
            let dh = ((py - head_c.0).powi(2) + (px - head_c.1).powi(2)).sqrt();
            if dh <= head_r {
                color = Some(if py < head_c.0 - 0.3 * head_r { hair } else { skin });
            }
            if let Some(col) = color {
                img.set(r, c, col);
            }
        }
    }

    // Illumination, camera response and sensor noise.
    let illum: f32 = rng.random_range(0.85..1.15);
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = *v * look.gain[i % 3] * illum + noise.sample(&mut rng);
    }
    img.clamp01();

    let rows = joints.iter().map(|j| j.row);
    let cols = joints.iter().map(|j| j.col);
    let min_r = rows.clone().fold(f64::INFINITY, f64::min).min(head_c.0 - head_r);
    let max_r = rows.fold(f64::NEG_INFINITY, f64::max) + 0.035 * unit + leg;
    let min_c = cols.clone().fold(f64::INFINITY, f64::min) - limb;
    let max_c = cols.fold(f64::NEG_INFINITY, f64::max) + limb;
    let body_box = PixelBox {
        top: min_r.floor().max(0.0) as usize,
        left: min_c.floor().max(0.0) as usize,
        bottom: (max_r.ceil() as usize + 1).min(height),
        right: (max_c.ceil() as usize + 1).min(width),
    };
    RenderedSample { image: img, joints, body_box }
}

pub fn validate_fraction_range(range: [f64; 2]) -> Result<()> {
    let [lo, hi] = range;
    if !(0.0 <= lo && lo <= hi && hi <= 0.6) {
        return Err(Error::config(format!("occlusion fraction range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 0.6")));
    }
    Ok(())
}

/// Overlays a gray textured band covering a uniform fraction in
/// `fraction_range` of the body box. Returns the occluder box, if any.
pub fn occlude(
    image: &mut Raster,
    joints: &mut [JointObservation; NUM_JOINTS],
    body_box: PixelBox,
    fraction_range: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Result<Option<PixelBox>> {
    validate_fraction_range(fraction_range)?;
    let [lo, hi] = fraction_range;
    let fraction = if hi > lo { rng.random_range(lo..hi) } else { lo };
    if fraction <= 0.0 {
        return Ok(None);
    }
    let (bh, bw) = (body_box.bottom - body_box.top, body_box.right - body_box.left);
    let horizontal = rng.random_bool(0.7);
    let occluder = if horizontal {
        let rows = ((fraction * bh as f64).round() as usize).clamp(1, bh);
        let top = body_box.top + rng.random_range(0..=bh - rows);
        let ext_l = rng.random_range(0..=body_box.left);
        let ext_r = rng.random_range(0..=image.width - body_box.right);
        PixelBox { top, bottom: top + rows, left: body_box.left - ext_l, right: body_box.right + ext_r }
    } else {
        let cols = ((fraction * bw as f64).round() as usize).clamp(1, bw);
        let left = body_box.left + rng.random_range(0..=bw - cols);
        PixelBox { top: body_box.top, bottom: body_box.bottom, left, right: left + cols }
    };
    let gray: f32 = rng.random_range(0.35..0.65);
    let freq: f32 = rng.random_range(0.5..1.5);
    for r in occluder.top..occluder.bottom {
        for c in occluder.left..occluder.right {
            let texture = 0.08 * ((r as f32 + c as f32) * freq).sin() + rng.random_range(-0.06f32..0.06);
            let v = (gray + texture).clamp(0.0, 1.0);
            image.set(r, c, [v, v, v]);
        }
    }
    for j in joints.iter_mut() {
        if occluder.contains(j.row, j.col) {
            j.visibility = j.visibility.min(OCCLUDED_VISIBILITY);
        }
    }
    Ok(Some(occluder))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Half,
    Third,
}

impl CropMode {
    pub fn kept_rows(self, height: usize) -> usize {
        match self {
            CropMode::Half => height / 2,
            CropMode::Third => height / 3,
        }
    }
}

/// Keeps the top half or third of the rows and stretches them back to the
/// canonical size. Joints below the crop line lose all visibility.
pub fn partial_crop(image: &Raster, joints: &[JointObservation; NUM_JOINTS], mode: CropMode) -> (Raster, [JointObservation; NUM_JOINTS]) {
    let (h, w) = (image.height, image.width);
    let keep = mode.kept_rows(h);
    let out = image.crop_resize(0.0, 0.0, keep as f64, w as f64, h, w);
    let ratio = h as f64 / keep as f64;
    let joints = joints.map(|j| {
        let below = j.row + 0.5 > keep as f64;
        JointObservation {
            row: (j.row + 0.5) * ratio - 0.5,
            col: j.col,
            visibility: if below { 0.0 } else { j.visibility },
        }
    });
    (out, joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmaps::PartGroup;

    const H: usize = 64;
    const W: usize = 32;

    #[test]
    fn rendering_is_deterministic() {
        let spec = IdentitySpec::generate(3, 11);
        let a = render_sample(&spec, 1, 99, H, W);
        let b = render_sample(&spec, 1, 99, H, W);
        assert_eq!(a.image, b.image);
        assert_eq!(a.joints, b.joints);
    }

    #[test]
    fn different_ids_look_different() {
        let (s1, s2) = (IdentitySpec::generate(0, 5), IdentitySpec::generate(1, 5));
        assert_ne!(s1.part_appearances, s2.part_appearances);
        let (a, b) = (render_sample(&s1, 0, 7, H, W), render_sample(&s2, 0, 7, H, W));
        let bx = a.body_box;
        let mut diff = 0.0;
        for r in bx.top..bx.bottom {
            for c in bx.left..bx.right {
                let (x, y) = (a.image.get(r, c), b.image.get(r, c));
                diff += (0..3).map(|k| (x[k] - y[k]).abs()).sum::<f32>();
            }
        }
        assert!(diff > 0.0);
    }

    #[test]
    fn joints_inside_body_box() {
        for id in 0..20 {
            let s = render_sample(&IdentitySpec::generate(id, 1), id % 3, id as u64, H, W);
            for j in &s.joints {
                assert!(s.body_box.contains(j.row, j.col), "joint {j:?} outside {:?}", s.body_box);
            }
        }
    }

    #[test]
    fn zero_occlusion_is_identity() {
        let s = render_sample(&IdentitySpec::generate(0, 1), 0, 3, H, W);
        let (mut img, mut joints) = (s.image.clone(), s.joints);
        let mut rng = stream(1, &[]);
        assert_eq!(occlude(&mut img, &mut joints, s.body_box, [0.0, 0.0], &mut rng).unwrap(), None);
        assert_eq!(img, s.image);
        assert_eq!(joints, s.joints);
    }

    #[test]
    fn invalid_fraction_range_rejected() {
        let s = render_sample(&IdentitySpec::generate(0, 1), 0, 3, H, W);
        let (mut img, mut joints) = (s.image.clone(), s.joints);
        let mut rng = stream(1, &[]);
        for bad in [[0.3, 0.2], [-0.1, 0.2], [0.1, 0.7]] {
            assert!(matches!(occlude(&mut img, &mut joints, s.body_box, bad, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn occluder_area_within_requested_range() {
        for seed in 0..40u64 {
            let s = render_sample(&IdentitySpec::generate(seed as usize, 2), 0, seed, H, W);
            let (mut img, mut joints) = (s.image.clone(), s.joints);
            let mut rng = stream(seed, &[9]);
            let (lo, hi) = (0.2, 0.5);
            let occ = occlude(&mut img, &mut joints, s.body_box, [lo, hi], &mut rng).unwrap().unwrap();
            let b = s.body_box;
            let covered = (occ.top.max(b.top)..occ.bottom.min(b.bottom)).count()
                * (occ.left.max(b.left)..occ.right.min(b.right)).count();
            let frac = covered as f64 / b.area() as f64;
            let (bh, bw) = ((b.bottom - b.top) as f64, (b.right - b.left) as f64);
            let slack = 0.5 / bh.min(bw);
            assert!(frac >= lo - slack && frac <= hi + slack, "covered {frac}");
            for (j, after) in s.joints.iter().zip(&joints) {
                if occ.contains(j.row, j.col) {
                    assert!(after.visibility <= 0.05);
                } else {
                    assert_eq!(after.visibility, j.visibility);
                }
            }
        }
    }

    #[test]
    fn crop_row_counts() {
        assert_eq!(CropMode::Half.kept_rows(256), 128);
        assert_eq!(CropMode::Third.kept_rows(256), 85);
        assert_eq!(CropMode::Half.kept_rows(64), 32);
        assert_eq!(CropMode::Third.kept_rows(64), 21);
    }

    #[test]
    fn third_crop_drops_legs_keeps_head() {
        let grouping = crate::heatmaps::Grouping::default();
        for id in 0..20 {
            let s = render_sample(&IdentitySpec::generate(id, 4), 0, id as u64, H, W);
            let (_, joints) = partial_crop(&s.image, &s.joints, CropMode::Third);
            for g in [PartGroup::LeftKnee, PartGroup::RightKnee, PartGroup::LeftAnkle, PartGroup::RightAnkle] {
                for j in grouping.members(g) {
                    assert_eq!(joints[j.index()].visibility, 0.0);
                }
            }
            for j in grouping.members(PartGroup::Head) {
                assert_eq!(joints[j.index()].visibility, s.joints[j.index()].visibility);
            }
        }
    }
}
