//! Synthetic occluded-person dataset: identities, cameras, occluders,
//! upper-body crops and the train/query/gallery splits.

mod augment;
mod io;
pub mod raster;
pub mod render;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, AugmentTrace};
pub use raster::Raster;
pub use render::{occlude, partial_crop, render_sample, CropMode, IdentitySpec, PixelBox, RenderedSample};

use crate::error::{Error, Result};
use crate::heatmaps::{synthesize_heatmaps, Grouping, HeatmapStack, JointObservation, PartGroup, RawKeypointStack, NUM_GROUPS, NUM_JOINTS};
use crate::rng::{derive_seed, stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// How much of the person an image shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Holistic,
    UpperHalf,
    UpperThird,
}

impl SampleKind {
    fn crop(self) -> Option<CropMode> {
        match self {
            SampleKind::Holistic => None,
            SampleKind::UpperHalf => Some(CropMode::Half),
            SampleKind::UpperThird => Some(CropMode::Third),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Heatmap grid, equal to the backbone feature-map size.
    pub heatmap_height: usize,
    pub heatmap_width: usize,
    /// Gaussian width in heatmap-grid cells.
    pub heatmap_sigma: f64,
    pub num_cameras: usize,
    pub train_ids: usize,
    pub test_ids: usize,
    pub train_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub occlusion_fraction: [f64; 2],
    pub train_occlusion_prob: f64,
    pub query_occlusion_prob: f64,
    pub gallery_occlusion_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_height: 64,
            image_width: 32,
            heatmap_height: 8,
            heatmap_width: 4,
            heatmap_sigma: 0.8,
            num_cameras: 4,
            train_ids: 40,
            test_ids: 40,
            train_per_id: 32,
            query_per_id: 8,
            gallery_per_id: 24,
            occlusion_fraction: [0.2, 0.5],
            train_occlusion_prob: 0.5,
            query_occlusion_prob: 1.0,
            gallery_occlusion_prob: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 12 || self.image_width < 6 {
            return Err(Error::config(format!("image size {}x{} too small", self.image_height, self.image_width)));
        }
        if self.heatmap_height == 0 || self.heatmap_width == 0 {
            return Err(Error::config("heatmap grid must be non-empty"));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::config(format!("heatmap sigma must be positive, got {}", self.heatmap_sigma)));
        }
        if self.num_cameras < 2 {
            return Err(Error::config("at least two cameras are needed for cross-camera evaluation"));
        }
        for (name, n) in [("train_per_id", self.train_per_id), ("query_per_id", self.query_per_id), ("gallery_per_id", self.gallery_per_id)] {
            check_per_id(name, n)?;
        }
        if self.train_ids == 0 || self.test_ids == 0 {
            return Err(Error::config("train_ids and test_ids must be positive"));
        }
        render::validate_fraction_range(self.occlusion_fraction)?;
        for p in [self.train_occlusion_prob, self.query_occlusion_prob, self.gallery_occlusion_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("occlusion probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn occlusion_prob(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train_occlusion_prob,
            Split::Query => self.query_occlusion_prob,
            Split::Gallery => self.gallery_occlusion_prob,
        }
    }

    fn per_id(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_id,
            Split::Query => self.query_per_id,
            Split::Gallery => self.gallery_per_id,
        }
    }

    /// Identity labels of a split. Train labels are `0..train_ids`; query
    /// and gallery share the disjoint block after them.
    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => (0..self.train_ids).collect(),
            Split::Query | Split::Gallery => (self.train_ids..self.train_ids + self.test_ids).collect(),
        }
    }
}

fn check_per_id(name: &str, n: usize) -> Result<()> {
    if n == 0 || n % 4 != 0 {
        return Err(Error::config(format!("{name} = {n} must be a positive multiple of 4")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `<split>/<index>`, also the image file stem.
    pub name: String,
    pub split: Split,
    pub id: usize,
    pub camera: usize,
    pub kind: SampleKind,
    pub occluder: Option<PixelBox>,
    pub image: Raster,
    /// Image-pixel coordinates after cropping.
    pub joints: [JointObservation; NUM_JOINTS],
    /// Joint responses on the heatmap grid.
    pub raw: RawKeypointStack<f32>,
}

impl Sample {
    /// Per-group visibility: the most visible member joint.
    pub fn group_visibility(&self, grouping: &Grouping) -> [f64; NUM_GROUPS] {
        PartGroup::ALL.map(|g| grouping.members(g).iter().map(|j| self.joints[j.index()].visibility).fold(0.0, f64::max))
    }

    pub fn heatmaps(&self, grouping: &Grouping) -> Result<HeatmapStack<f32>> {
        HeatmapStack::from_raw(&self.raw, grouping)
    }
}

/// One planned image of the Partial-Duke layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedSample {
    pub id: usize,
    pub index_in_id: usize,
    pub kind: SampleKind,
    pub camera: usize,
}

/// Per identity: the first half of the images holistic, then a quarter
/// upper-half crops and a quarter upper-third crops. Cameras cycle from an
/// id-dependent offset so every id is seen by several cameras.
pub fn partial_duke_plan(n_per_id: usize, ids: &[usize], num_cameras: usize) -> Result<Vec<PlannedSample>> {
    check_per_id("n_per_id", n_per_id)?;
    if num_cameras == 0 {
        return Err(Error::config("num_cameras must be positive"));
    }
    let mut plan = Vec::with_capacity(n_per_id * ids.len());
    for &id in ids {
        for i in 0..n_per_id {
            let kind = if i < n_per_id / 2 {
                SampleKind::Holistic
            } else if i < 3 * n_per_id / 4 {
                SampleKind::UpperHalf
            } else {
                SampleKind::UpperThird
            };
            // Interleave kinds across cameras: holistic i and partial i + n/2
            // land on cameras that differ in general.
            let camera = (id * 3 + i + i / num_cameras) % num_cameras;
            plan.push(PlannedSample { id, index_in_id: i, kind, camera });
        }
    }
    Ok(plan)
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Query => 1,
        Split::Gallery => 2,
    }
}

/// Renders one split. Each image draws from its own stream, derived from
/// the master seed, so generation order does not matter.
pub fn build_partial_duke_split(config: &SynthConfig, split: Split, master_seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    let ids = config.split_ids(split);
    let plan = partial_duke_plan(config.per_id(split), &ids, config.num_cameras)?;
    plan.par_iter()
        .enumerate()
        .map(|(index, p)| render_planned(config, split, index, p, master_seed))
        .collect()
}

fn render_planned(config: &SynthConfig, split: Split, index: usize, p: &PlannedSample, master_seed: u64) -> Result<Sample> {
    use rand::Rng;
    let spec = IdentitySpec::generate(p.id, master_seed);
    let seed = derive_seed(master_seed, &[tag::SAMPLE, split_tag(split), p.id as u64, p.index_in_id as u64]);
    let (h, w) = (config.image_height, config.image_width);
    let rendered = render_sample(&spec, p.camera, seed, h, w);
    let (mut image, mut joints) = (rendered.image, rendered.joints);
    let mut rng = stream(seed, &[1]);
    let occluder = if rng.random_bool(config.occlusion_prob(split)) {
        occlude(&mut image, &mut joints, rendered.body_box, config.occlusion_fraction, &mut rng)?
    } else {
        None
    };
    if let Some(mode) = p.kind.crop() {
        (image, joints) = partial_crop(&image, &joints, mode);
    }
    // Images are stored as 8-bit PNG; quantize now so generated and
    // reloaded datasets agree exactly.
    let image = Raster::from_u8(h, w, &image.to_u8())?;
    let raw = raw_heatmaps(config, &joints)?;
    Ok(Sample {
        name: format!("{}/{index:05}", split.name()),
        split,
        id: p.id,
        camera: p.camera,
        kind: p.kind,
        occluder,
        image,
        joints,
        raw,
    })
}

/// Image-pixel joints to heatmap-grid Gaussians.
pub fn raw_heatmaps(config: &SynthConfig, joints: &[JointObservation; NUM_JOINTS]) -> Result<RawKeypointStack<f32>> {
    synthesize_heatmaps(&grid_joints(config, joints), config.heatmap_sigma, config.heatmap_height, config.heatmap_width)
}

/// Maps pixel-center coordinates of the image onto the heatmap grid.
pub fn grid_joints(config: &SynthConfig, joints: &[JointObservation; NUM_JOINTS]) -> [JointObservation; NUM_JOINTS] {
    let (sy, sx) = (
        config.heatmap_height as f64 / config.image_height as f64,
        config.heatmap_width as f64 / config.image_width as f64,
    );
    joints.map(|j| JointObservation { row: (j.row + 0.5) * sy - 0.5, col: (j.col + 0.5) * sx - 0.5, visibility: j.visibility })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl Dataset {
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Dataset {
            config: config.clone(),
            seed,
            train: build_partial_duke_split(config, Split::Train, seed)?,
            query: build_partial_duke_split(config, Split::Query, seed)?,
            gallery: build_partial_duke_split(config, Split::Gallery, seed)?,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn num_train_ids(&self) -> usize {
        self.config.train_ids
    }
}

pub use io::{load_dataset, save_dataset, write_checksums, DatasetMeta, SampleMeta, CHECKSUM_FILE, META_FILE};

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn tally(plan: &[PlannedSample]) -> BTreeMap<usize, [usize; 3]> {
        let mut t = BTreeMap::new();
        for p in plan {
            let e = t.entry(p.id).or_insert([0; 3]);
            e[p.kind as usize] += 1;
        }
        t
    }

    #[test]
    fn plan_composition() {
        assert_eq!(tally(&partial_duke_plan(16, &[0], 4).unwrap())[&0], [8, 4, 4]);
        assert_eq!(tally(&partial_duke_plan(4, &[3], 4).unwrap())[&3], [2, 1, 1]);
        assert!(matches!(partial_duke_plan(6, &[0], 4), Err(Error::Config(_))));
    }

    #[test]
    fn every_id_seen_by_two_cameras() {
        for n in [4, 8, 32] {
            let plan = partial_duke_plan(n, &(0..10).collect::<Vec<_>>(), 4).unwrap();
            for id in 0..10 {
                let cams: BTreeSet<_> = plan.iter().filter(|p| p.id == id).map(|p| p.camera).collect();
                assert!(cams.len() >= 2);
            }
        }
    }

    fn tiny() -> SynthConfig {
        SynthConfig { train_ids: 3, test_ids: 2, train_per_id: 4, query_per_id: 4, gallery_per_id: 4, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(&tiny(), 5).unwrap();
        let b = Dataset::generate(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        let c = Dataset::generate(&tiny(), 6).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn visibility_matches_ground_truth() {
        let d = Dataset::generate(&SynthConfig { query_occlusion_prob: 1.0, ..tiny() }, 2).unwrap();
        let g = Grouping::default();
        for s in d.train.iter().chain(&d.query) {
            let vis = s.group_visibility(&g);
            for (k, group) in PartGroup::ALL.iter().enumerate() {
                let hidden = g.members(*group).iter().all(|j| s.joints[j.index()].visibility <= 0.05);
                assert_eq!(vis[k] <= 0.05, hidden);
            }
            if s.kind == SampleKind::UpperThird {
                assert!(vis[PartGroup::LeftAnkle.index()] == 0.0 && vis[PartGroup::RightKnee.index()] == 0.0);
            }
        }
    }

    #[test]
    fn heatmaps_normalize() {
        let d = Dataset::generate(&tiny(), 1).unwrap();
        for s in &d.gallery {
            let h = s.heatmaps(&Grouping::default()).unwrap();
            for g in PartGroup::ALL {
                let sum: f64 = h.group(g).iter().map(|&v| v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
