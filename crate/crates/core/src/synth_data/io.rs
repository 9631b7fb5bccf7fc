//! On-disk dataset layout:
//!
//! ```text
//! meta.json              config, seed and one record per image
//! <split>/<index>.png    8-bit RGB images
//! <split>.pghm/.idx      joint response maps, indexed by image name
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{grid_joints, Dataset, PixelBox, Raster, Sample, SampleKind, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::heatmaps::{read_pghm_file, write_pghm_file, Grouping, JointObservation, NUM_GROUPS, NUM_JOINTS};

pub const META_FILE: &str = "meta.json";
pub const CHECKSUM_FILE: &str = "SHA256SUMS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub name: String,
    pub split: Split,
    pub id: usize,
    pub camera: usize,
    pub kind: SampleKind,
    pub occluder: Option<PixelBox>,
    pub visibility: [f64; NUM_GROUPS],
    pub joints: [JointObservation; NUM_JOINTS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: SynthConfig,
    pub group_names: Vec<String>,
    pub samples: Vec<SampleMeta>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let grouping = Grouping::default();
    let mut samples = Vec::new();
    for split in Split::ALL {
        let split_dir = dir.join(split.name());
        std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let list = dataset.split(split);
        for s in list {
            let path = dir.join(format!("{}.png", s.name));
            image::save_buffer(&path, &s.image.to_u8(), s.image.width as u32, s.image.height as u32, image::ExtendedColorType::Rgb8)
                .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
            samples.push(SampleMeta {
                name: s.name.clone(),
                split,
                id: s.id,
                camera: s.camera,
                kind: s.kind,
                occluder: s.occluder,
                visibility: s.group_visibility(&grouping),
                joints: s.joints,
            });
        }
        let stacks: Vec<(String, _)> = list.iter().map(|s| (s.name.clone(), &s.raw)).collect();
        write_pghm_file(dir, split.name(), &stacks)?;
    }
    let meta = DatasetMeta {
        seed: dataset.seed,
        config: dataset.config.clone(),
        group_names: crate::heatmaps::HeatmapStack::<f32>::group_names().iter().map(|s| s.to_string()).collect(),
        samples,
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("malformed {}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = load_meta(dir)?;
    meta.config.validate()?;
    let cfg = &meta.config;
    let mut dataset = Dataset { config: cfg.clone(), seed: meta.seed, train: vec![], query: vec![], gallery: vec![] };
    let mut maps = HashMap::new();
    for split in Split::ALL {
        for (name, raw) in read_pghm_file::<f32>(dir, split.name())? {
            maps.insert(name, raw);
        }
    }
    for m in meta.samples {
        let path = dir.join(format!("{}.png", m.name));
        let img = image::open(&path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?.to_rgb8();
        if (img.height() as usize, img.width() as usize) != (cfg.image_height, cfg.image_width) {
            return Err(Error::Data(format!("{} is {}x{}, expected {}x{}", path.display(), img.height(), img.width(), cfg.image_height, cfg.image_width)));
        }
        let image = Raster::from_u8(cfg.image_height, cfg.image_width, img.as_raw())?;
        let mut raw = maps.remove(&m.name).ok_or_else(|| Error::Data(format!("no heatmaps for {}", m.name)))?;
        if (raw.height, raw.width) != (cfg.heatmap_height, cfg.heatmap_width) {
            return Err(Error::Data(format!("heatmaps of {} are {}x{}, expected {}x{}", m.name, raw.height, raw.width, cfg.heatmap_height, cfg.heatmap_width)));
        }
        raw.joints = Some(grid_joints(cfg, &m.joints));
        let sample = Sample { name: m.name, split: m.split, id: m.id, camera: m.camera, kind: m.kind, occluder: m.occluder, image, joints: m.joints, raw };
        match m.split {
            Split::Train => dataset.train.push(sample),
            Split::Query => dataset.query.push(sample),
            Split::Gallery => dataset.gallery.push(sample),
        }
    }
    Ok(dataset)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `SHA256SUMS` listing every other file under `dir` in path order
/// and returns the digest of that listing.
pub fn write_checksums(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .filter_map(|p| {
            let r = p.strip_prefix(dir).ok()?.to_string_lossy().replace('\\', "/");
            (r != CHECKSUM_FILE).then_some((r, p))
        })
        .collect();
    rel.sort();
    let mut listing = String::new();
    for (r, p) in &rel {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        listing.push_str(&format!("{}  {r}\n", hex(&Sha256::digest(&bytes))));
    }
    let path = dir.join(CHECKSUM_FILE);
    std::fs::write(&path, &listing).map_err(|e| Error::io(&path, e))?;
    Ok(hex(&Sha256::digest(listing.as_bytes())))
}
