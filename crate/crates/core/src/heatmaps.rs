//! Keypoint heatmaps: synthesis, semantic grouping and spatial softmax.
//!
//! A [`RawKeypointStack`] holds 17 COCO-ordered joint response maps at
//! feature-map resolution. [`HeatmapStack::from_raw`] merges them into the
//! eight body-part groups (element-wise max within a group) and turns every
//! group channel into a spatial probability distribution.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NUM_JOINTS: usize = 17;
pub const NUM_GROUPS: usize = 8;

/// COCO keypoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Joint {
    Nose,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Nose,
        Joint::LeftEye,
        Joint::RightEye,
        Joint::LeftEar,
        Joint::RightEar,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftAnkle,
        Joint::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::Nose => "nose",
            Joint::LeftEye => "left_eye",
            Joint::RightEye => "right_eye",
            Joint::LeftEar => "left_ear",
            Joint::RightEar => "right_ear",
            Joint::LeftShoulder => "left_shoulder",
            Joint::RightShoulder => "right_shoulder",
            Joint::LeftElbow => "left_elbow",
            Joint::RightElbow => "right_elbow",
            Joint::LeftWrist => "left_wrist",
            Joint::RightWrist => "right_wrist",
            Joint::LeftHip => "left_hip",
            Joint::RightHip => "right_hip",
            Joint::LeftKnee => "left_knee",
            Joint::RightKnee => "right_knee",
            Joint::LeftAnkle => "left_ankle",
            Joint::RightAnkle => "right_ankle",
        }
    }

    pub fn from_name(name: &str) -> Option<Joint> {
        Joint::ALL.into_iter().find(|j| j.name() == name)
    }

    /// The laterally mirrored joint (identity for the nose).
    pub fn mirror(self) -> Joint {
        use Joint::*;
        match self {
            Nose => Nose,
            LeftEye => RightEye,
            RightEye => LeftEye,
            LeftEar => RightEar,
            RightEar => LeftEar,
            LeftShoulder => RightShoulder,
            RightShoulder => LeftShoulder,
            LeftElbow => RightElbow,
            RightElbow => LeftElbow,
            LeftWrist => RightWrist,
            RightWrist => LeftWrist,
            LeftHip => RightHip,
            RightHip => LeftHip,
            LeftKnee => RightKnee,
            RightKnee => LeftKnee,
            LeftAnkle => RightAnkle,
            RightAnkle => LeftAnkle,
        }
    }
}

/// Semantic keypoint groups, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartGroup {
    Head,
    LeftLowerArm,
    RightLowerArm,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
    Torso,
}

impl PartGroup {
    pub const ALL: [PartGroup; NUM_GROUPS] = [
        PartGroup::Head,
        PartGroup::LeftLowerArm,
        PartGroup::RightLowerArm,
        PartGroup::LeftKnee,
        PartGroup::RightKnee,
        PartGroup::LeftAnkle,
        PartGroup::RightAnkle,
        PartGroup::Torso,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PartGroup::Head => "head",
            PartGroup::LeftLowerArm => "left lower arm",
            PartGroup::RightLowerArm => "right lower arm",
            PartGroup::LeftKnee => "left knee",
            PartGroup::RightKnee => "right knee",
            PartGroup::LeftAnkle => "left ankle",
            PartGroup::RightAnkle => "right ankle",
            PartGroup::Torso => "torso",
        }
    }

    pub fn from_name(name: &str) -> Option<PartGroup> {
        PartGroup::ALL.into_iter().find(|g| g.name() == name)
    }

    /// Lateral counterpart; head and torso map to themselves.
    pub fn mirror(self) -> PartGroup {
        use PartGroup::*;
        match self {
            Head => Head,
            Torso => Torso,
            LeftLowerArm => RightLowerArm,
            RightLowerArm => LeftLowerArm,
            LeftKnee => RightKnee,
            RightKnee => LeftKnee,
            LeftAnkle => RightAnkle,
            RightAnkle => LeftAnkle,
        }
    }
}

/// Assignment of every joint to one group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grouping {
    group_of: [PartGroup; NUM_JOINTS],
}

impl Default for Grouping {
    fn default() -> Self {
        use Joint::*;
        let mut group_of = [PartGroup::Head; NUM_JOINTS];
        for j in Joint::ALL {
            group_of[j.index()] = match j {
                Nose | LeftEye | RightEye | LeftEar | RightEar => PartGroup::Head,
                LeftShoulder | RightShoulder | LeftHip | RightHip => PartGroup::Torso,
                LeftElbow | LeftWrist => PartGroup::LeftLowerArm,
                RightElbow | RightWrist => PartGroup::RightLowerArm,
                Joint::LeftKnee => PartGroup::LeftKnee,
                Joint::RightKnee => PartGroup::RightKnee,
                Joint::LeftAnkle => PartGroup::LeftAnkle,
                Joint::RightAnkle => PartGroup::RightAnkle,
            };
        }
        Grouping { group_of }
    }
}

impl Grouping {
    /// Builds a grouping from `(joint name, group name)` pairs. Every joint
    /// must be assigned exactly once.
    pub fn from_names<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        let mut group_of: [Option<PartGroup>; NUM_JOINTS] = [None; NUM_JOINTS];
        for (joint, group) in pairs {
            let j = Joint::from_name(joint.as_ref())
                .ok_or_else(|| Error::config(format!("unknown joint `{}`", joint.as_ref())))?;
            let g = PartGroup::from_name(group.as_ref())
                .ok_or_else(|| Error::config(format!("unknown group `{}`", group.as_ref())))?;
            if group_of[j.index()].replace(g).is_some() {
                return Err(Error::config(format!("joint `{}` assigned twice", j.name())));
            }
        }
        let mut out = [PartGroup::Head; NUM_JOINTS];
        for j in Joint::ALL {
            out[j.index()] = group_of[j.index()]
                .ok_or_else(|| Error::config(format!("joint `{}` not assigned to a group", j.name())))?;
        }
        Ok(Grouping { group_of: out })
    }

    pub fn group_of(&self, joint: Joint) -> PartGroup {
        self.group_of[joint.index()]
    }

    pub fn members(&self, group: PartGroup) -> Vec<Joint> {
        Joint::ALL.into_iter().filter(|&j| self.group_of(j) == group).collect()
    }
}

/// Position of one joint in heatmap-grid coordinates (pixel centers at
/// integer positions) and how visible it is.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointObservation {
    pub row: f64,
    pub col: f64,
    pub visibility: f64,
}

/// Seventeen non-negative joint response maps of size `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawKeypointStack<T> {
    pub height: usize,
    pub width: usize,
    /// Channel-major: `channels[j * height * width + r * width + c]`.
    pub channels: Vec<T>,
    /// Ground truth, present for synthesized stacks.
    pub joints: Option<[JointObservation; NUM_JOINTS]>,
}

impl<T: Scalar> RawKeypointStack<T> {
    pub fn new(height: usize, width: usize, channels: Vec<T>) -> Result<Self> {
        if channels.len() != NUM_JOINTS * height * width {
            return Err(Error::shape(format!(
                "raw stack {}x{} needs {} values, got {}",
                height,
                width,
                NUM_JOINTS * height * width,
                channels.len()
            )));
        }
        if channels.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::Numeric("keypoint responses must be finite and non-negative".into()));
        }
        Ok(RawKeypointStack { height, width, channels, joints: None })
    }

    pub fn channel(&self, joint: Joint) -> &[T] {
        let hw = self.height * self.width;
        &self.channels[joint.index() * hw..(joint.index() + 1) * hw]
    }

    /// Left/right flip: columns reversed and lateral joints swapped.
    pub fn mirrored(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut channels = vec![T::zero(); self.channels.len()];
        for j in Joint::ALL {
            let src = self.channel(j.mirror());
            let dst = &mut channels[j.index() * h * w..(j.index() + 1) * h * w];
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = src[r * w + (w - 1 - c)];
                }
            }
        }
        let joints = self.joints.map(|js| {
            std::array::from_fn(|i| {
                let src = js[Joint::ALL[i].mirror().index()];
                JointObservation { col: (w as f64 - 1.0) - src.col, ..src }
            })
        });
        RawKeypointStack { height: h, width: w, channels, joints }
    }
}

/// Renders Gaussian joint responses: each channel peaks at the joint with
/// amplitude equal to its visibility.
pub fn synthesize_heatmaps<T: Scalar>(
    joints: &[JointObservation; NUM_JOINTS],
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<RawKeypointStack<T>> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let hw = height * width;
    let mut channels = vec![T::zero(); NUM_JOINTS * hw];
    let denom = 2.0 * sigma * sigma;
    for (j, obs) in joints.iter().enumerate() {
        let vis = obs.visibility.clamp(0.0, 1.0);
        if vis == 0.0 {
            continue;
        }
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 - obs.row).powi(2) + (c as f64 - obs.col).powi(2);
                channels[j * hw + r * width + c] = T::lit(vis * (-d2 / denom).exp());
            }
        }
    }
    Ok(RawKeypointStack { height, width, channels, joints: Some(*joints) })
}

/// Eight unnormalized group channels: element-wise max over member joints.
pub fn merge_keypoints<T: Scalar>(raw: &RawKeypointStack<T>, grouping: &Grouping) -> Vec<T> {
    let hw = raw.height * raw.width;
    let mut merged = vec![T::zero(); NUM_GROUPS * hw];
    let mut seen = [false; NUM_GROUPS];
    for j in Joint::ALL {
        let g = grouping.group_of(j).index();
        let dst = &mut merged[g * hw..(g + 1) * hw];
        let src = raw.channel(j);
        if seen[g] {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = d.max(s);
            }
        } else {
            dst.copy_from_slice(src);
            seen[g] = true;
        }
    }
    merged
}

/// Spatial softmax of one map (max-subtracted).
pub fn normalize_heatmap<T: Scalar>(map: &[T]) -> Result<Vec<T>> {
    if map.is_empty() {
        return Err(Error::shape("cannot normalize an empty heatmap"));
    }
    if let Some(bad) = map.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite heatmap value {bad}")));
    }
    // Accumulate in f64 so single-precision maps still sum to one within 1e-6.
    let mut wide: Vec<f64> = map.iter().map(|v| v.to_f64_lossy()).collect();
    crate::autograd::softmax_in_place(&mut wide);
    Ok(wide.into_iter().map(T::lit).collect())
}

/// Spatially normalized group heatmaps `H_k`, each summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T> {
    pub height: usize,
    pub width: usize,
    /// Group-major: `groups[k * height * width + r * width + c]`.
    pub groups: Vec<T>,
}

impl<T: Scalar> HeatmapStack<T> {
    pub fn from_raw(raw: &RawKeypointStack<T>, grouping: &Grouping) -> Result<Self> {
        let hw = raw.height * raw.width;
        let merged = merge_keypoints(raw, grouping);
        let mut groups = Vec::with_capacity(merged.len());
        for chunk in merged.chunks(hw) {
            groups.extend(normalize_heatmap(chunk)?);
        }
        Ok(HeatmapStack { height: raw.height, width: raw.width, groups })
    }

    /// Uniform `1 / (h w)` maps, which reduce part pooling to global pooling.
    pub fn uniform(height: usize, width: usize) -> Self {
        let v = T::one() / T::from_usize_lossy(height * width);
        HeatmapStack { height, width, groups: vec![v; NUM_GROUPS * height * width] }
    }

    pub fn group(&self, g: PartGroup) -> &[T] {
        let hw = self.height * self.width;
        &self.groups[g.index() * hw..(g.index() + 1) * hw]
    }

    pub fn group_names() -> [&'static str; NUM_GROUPS] {
        PartGroup::ALL.map(|g| g.name())
    }
}

const PGHM_MAGIC: &[u8; 4] = b"PGHM";

/// Appends one record (`PGHM`, u32 h, u32 w, u32 channels, then row-major
/// little-endian f32 per channel) and returns its byte offset.
pub fn write_pghm_record<W: Write + Seek>(out: &mut W, height: usize, width: usize, channels: &[f32]) -> std::io::Result<u64> {
    let offset = out.stream_position()?;
    let hw = height * width;
    assert!(hw > 0 && channels.len() % hw == 0, "channel payload not a multiple of h*w");
    out.write_all(PGHM_MAGIC)?;
    for v in [height, width, channels.len() / hw] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in channels {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(offset)
}

/// One decoded `PGHM` record.
#[derive(Clone, Debug, PartialEq)]
pub struct PghmRecord {
    pub height: usize,
    pub width: usize,
    pub num_channels: usize,
    pub data: Vec<f32>,
}

pub fn read_pghm_record<R: Read + Seek>(input: &mut R, offset: u64) -> Result<PghmRecord> {
    let corrupt = |what: &str| Error::Integrity(format!("PGHM record at {offset}: {what}"));
    input.seek(SeekFrom::Start(offset)).map_err(|_| corrupt("offset out of range"))?;
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
    if &header[0..4] != PGHM_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (height, width, num_channels) = (field(0), field(1), field(2));
    let count = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(num_channels))
        .filter(|&v| v <= 1 << 28)
        .ok_or_else(|| corrupt("implausible dimensions"))?;
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes).map_err(|_| corrupt("truncated payload"))?;
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(PghmRecord { height, width, num_channels, data })
}

/// Writes a list of raw stacks into `<stem>.pghm` plus a `<stem>.idx` text
/// index of `image_id offset` lines.
pub fn write_pghm_file<T: Scalar>(dir: &Path, stem: &str, stacks: &[(String, &RawKeypointStack<T>)]) -> Result<()> {
    let data_path = dir.join(format!("{stem}.pghm"));
    let index_path = dir.join(format!("{stem}.idx"));
    let file = File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = BufWriter::new(file);
    let mut index = String::new();
    for (id, stack) in stacks {
        let payload: Vec<f32> = stack.channels.iter().map(|v| v.to_f64_lossy() as f32).collect();
        let offset = write_pghm_record(&mut out, stack.height, stack.width, &payload).map_err(|e| Error::io(&data_path, e))?;
        index.push_str(&format!("{id} {offset}\n"));
    }
    out.flush().map_err(|e| Error::io(&data_path, e))?;
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Reads every record listed in `<stem>.idx`, in index order.
pub fn read_pghm_file<T: Scalar>(dir: &Path, stem: &str) -> Result<Vec<(String, RawKeypointStack<T>)>> {
    let data_path = dir.join(format!("{stem}.pghm"));
    let index_path = dir.join(format!("{stem}.idx"));
    let index = File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut data = BufReader::new(File::open(&data_path).map_err(|e| Error::io(&data_path, e))?);
    let mut out = Vec::new();
    for line in BufReader::new(index).lines() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, offset) = line
            .rsplit_once(' ')
            .and_then(|(id, off)| off.parse::<u64>().ok().map(|o| (id.to_string(), o)))
            .ok_or_else(|| Error::Integrity(format!("bad index line `{line}`")))?;
        let rec = read_pghm_record(&mut data, offset)?;
        if rec.num_channels != NUM_JOINTS {
            return Err(Error::Integrity(format!("record {id} has {} channels, expected {NUM_JOINTS}", rec.num_channels)));
        }
        let stack = RawKeypointStack::new(rec.height, rec.width, rec.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        out.push((id, stack));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(visibility: f64, h: usize, w: usize) -> [JointObservation; NUM_JOINTS] {
        [JointObservation { row: (h / 2) as f64, col: (w / 2) as f64, visibility }; NUM_JOINTS]
    }

    #[test]
    fn default_grouping_covers_all_joints() {
        let g = Grouping::default();
        let total: usize = PartGroup::ALL.iter().map(|&p| g.members(p).len()).sum();
        assert_eq!(total, NUM_JOINTS);
        assert_eq!(g.members(PartGroup::Head).len(), 5);
        assert_eq!(
            g.members(PartGroup::Torso),
            vec![Joint::LeftShoulder, Joint::RightShoulder, Joint::LeftHip, Joint::RightHip]
        );
        assert_eq!(g.members(PartGroup::LeftLowerArm), vec![Joint::LeftElbow, Joint::LeftWrist]);
    }

    #[test]
    fn unknown_joint_name_is_config_error() {
        let err = Grouping::from_names(&[("left_tail", "torso")]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = Grouping::from_names(&[("nose", "head")]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "incomplete grouping must be rejected");
    }

    #[test]
    fn single_nonzero_member_passes_through_max() {
        let (h, w) = (4, 3);
        let mut channels = vec![0.0f64; NUM_JOINTS * h * w];
        let elbow = Joint::LeftElbow.index();
        for p in 0..h * w {
            channels[elbow * h * w + p] = p as f64 * 0.1;
        }
        let raw = RawKeypointStack::new(h, w, channels.clone()).unwrap();
        let merged = merge_keypoints(&raw, &Grouping::default());
        let g = PartGroup::LeftLowerArm.index();
        assert_eq!(&merged[g * h * w..(g + 1) * h * w], &channels[elbow * h * w..(elbow + 1) * h * w]);
        for other in PartGroup::ALL.iter().filter(|&&p| p != PartGroup::LeftLowerArm) {
            let k = other.index();
            assert!(merged[k * h * w..(k + 1) * h * w].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn all_zero_raw_merges_to_zero() {
        let raw = RawKeypointStack::new(2, 2, vec![0.0f32; NUM_JOINTS * 4]).unwrap();
        assert!(merge_keypoints(&raw, &Grouping::default()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_examples() {
        let u = normalize_heatmap(&[0.0f64; 4]).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let v = normalize_heatmap(&[2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        for (a, b) in v.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(normalize_heatmap(&[0.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(normalize_heatmap(&[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn large_inputs_do_not_overflow() {
        let v = normalize_heatmap(&[1000.0f32, 999.0]).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn synthesis_examples() {
        let (h, w) = (9, 5);
        let raw = synthesize_heatmaps::<f64>(&centered(1.0, h, w), 1.5, h, w).unwrap();
        let ch = raw.channel(Joint::Nose);
        let (argmax, max) = ch.iter().enumerate().fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(max, 1.0);
        assert_eq!(argmax, (h / 2) * w + w / 2);

        let zero = synthesize_heatmaps::<f64>(&centered(0.0, h, w), 1.5, h, w).unwrap();
        assert!(zero.channels.iter().all(|&v| v == 0.0));

        assert!(matches!(synthesize_heatmaps::<f64>(&centered(1.0, h, w), 0.0, h, w), Err(Error::Config(_))));
        assert!(matches!(synthesize_heatmaps::<f64>(&centered(1.0, h, w), -1.0, h, w), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_frame_joint_has_weak_response() {
        let (h, w, sigma) = (8, 4, 1.0);
        let mut joints = centered(1.0, h, w);
        // Three sigma below the last row.
        joints[Joint::LeftAnkle.index()].row = (h - 1) as f64 + 3.0 * sigma;
        let raw = synthesize_heatmaps::<f64>(&joints, sigma, h, w).unwrap();
        let max = raw.channel(Joint::LeftAnkle).iter().copied().fold(0.0, f64::max);
        // Nearest in-grid pixel sits exactly 3 sigma away.
        let tail = (-4.5f64).exp();
        assert!((max - tail).abs() < 1e-12);
        assert!(max < 0.05);
    }

    #[test]
    fn from_raw_groups_sum_to_one() {
        let (h, w) = (8, 4);
        let raw = synthesize_heatmaps::<f64>(&centered(0.7, h, w), 1.0, h, w).unwrap();
        let stack = HeatmapStack::from_raw(&raw, &Grouping::default()).unwrap();
        for g in PartGroup::ALL {
            let s: f64 = stack.group(g).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(stack.group(g).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn pghm_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (h, w) = (4, 2);
        let a = synthesize_heatmaps::<f32>(&centered(1.0, h, w), 1.0, h, w).unwrap();
        let b = synthesize_heatmaps::<f32>(&centered(0.3, h, w), 0.5, h, w).unwrap();
        write_pghm_file(dir.path(), "train", &[("img0".into(), &a), ("img1".into(), &b)]).unwrap();
        let back = read_pghm_file::<f32>(dir.path(), "train").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "img0");
        assert_eq!(back[1].1.channels, b.channels);

        let path = dir.path().join("train.pghm");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_pghm_file::<f32>(dir.path(), "train"), Err(Error::Integrity(_))));
    }
}
