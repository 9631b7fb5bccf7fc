//! Per-image numeric response maps: the channel-mean feature response and
//! the foreground attention, both on the feature-map grid.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heatmaps::{Grouping, NUM_GROUPS};
use crate::model::Model;
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::synth_data::Sample;
use crate::tensor::Tensor;
use crate::trainer::image_planes;

/// Threshold below which a joint counts as hidden.
const HIDDEN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMaps {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Row-major mean over channels of the backbone feature map.
    pub channel_mean: Vec<f64>,
    /// Row-major attention; sums to one.
    pub attention: Vec<f64>,
}

/// Runs the backbone and foreground attention on each sample in inference
/// mode. The attention has no parameters, so any checkpoint can produce it.
pub fn response_maps<T: Scalar>(model: &Model<T>, samples: &[Sample]) -> Result<Vec<ResponseMaps>> {
    let mc = &model.config;
    let (h, w) = mc.feature_size();
    let grouping = Grouping::default();
    samples
        .par_iter()
        .map(|s| {
            if (s.image.height, s.image.width) != (mc.image_height, mc.image_width) {
                return Err(Error::Data(format!("image {} does not match the model input size", s.name)));
            }
            let stack = s.heatmaps(&grouping)?;
            if (stack.height, stack.width) != (h, w) {
                return Err(Error::Data(format!("heatmaps of {} are {}x{}, feature map is {h}x{w}", s.name, stack.height, stack.width)));
            }
            let mut g = Graph::new(&model.params, false);
            let images = g.tape.constant(Tensor::new(&[1, 3, mc.image_height, mc.image_width], image_planes::<T>(&s.image))?);
            let heat = g.tape.constant(Tensor::new(&[1, NUM_GROUPS, h, w], stack.groups.iter().map(|&v| T::lit(f64::from(v))).collect())?);
            let bundle = model.forward(&mut g, images, Some(heat), false, true)?;
            let f = g.tape.value(bundle.feature_map);
            let c = f.dim(1);
            let fd = f.data();
            let channel_mean = (0..h * w).map(|p| (0..c).map(|k| fd[k * h * w + p].to_f64_lossy()).sum::<f64>() / c as f64).collect();
            let a = bundle.attention.expect("attention requested");
            let attention = g.tape.value(a).data().iter().map(|v| v.to_f64_lossy()).collect();
            Ok(ResponseMaps { name: s.name.clone(), height: h, width: w, channel_mean, attention })
        })
        .collect()
}

/// `height` lines of `width` comma-separated values.
pub fn grid_csv(height: usize, width: usize, values: &[f64]) -> String {
    let mut out = String::new();
    for r in 0..height {
        let row: Vec<String> = values[r * width..(r + 1) * width].iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(out, "{}", row.join(",")).expect("string write");
    }
    out
}

/// Writes `<stem>.response.csv` and `<stem>.attention.csv` under `dir`,
/// with `/` in sample names replaced by `_`.
pub fn write_response_maps(dir: &Path, maps: &ResponseMaps) -> Result<()> {
    let stem = maps.name.replace('/', "_");
    for (suffix, values) in [("response", &maps.channel_mean), ("attention", &maps.attention)] {
        let path = dir.join(format!("{stem}.{suffix}.csv"));
        std::fs::write(&path, grid_csv(maps.height, maps.width, values)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Mean attention per feature cell over the occluder and over visible
/// body joints. A cell belongs to the occluder when its centre lies in the
/// occluder box, and to the body when it holds a visible joint and is not
/// occluded. `None` when either region is empty.
pub fn region_attention_means(maps: &ResponseMaps, sample: &Sample) -> Option<(f64, f64)> {
    let occ = sample.occluder?;
    let (sy, sx) = (sample.image.height as f64 / maps.height as f64, sample.image.width as f64 / maps.width as f64);
    let in_occluder = |r: usize, c: usize| occ.contains((r as f64 + 0.5) * sy - 0.5, (c as f64 + 0.5) * sx - 0.5);
    let mut body = vec![false; maps.height * maps.width];
    for j in sample.joints.iter().filter(|j| j.visibility > HIDDEN) {
        let (r, c) = ((j.row + 0.5) / sy - 0.5, (j.col + 0.5) / sx - 0.5);
        let (r, c) = (r.round(), c.round());
        if r >= 0.0 && c >= 0.0 && (r as usize) < maps.height && (c as usize) < maps.width {
            body[r as usize * maps.width + c as usize] = true;
        }
    }
    let (mut o, mut no, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for r in 0..maps.height {
        for c in 0..maps.width {
            let a = maps.attention[r * maps.width + c];
            if in_occluder(r, c) {
                o += a;
                no += 1;
            } else if body[r * maps.width + c] {
                b += a;
                nb += 1;
            }
        }
    }
    (no > 0 && nb > 0).then(|| (o / no as f64, b / nb as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::stream;
    use crate::synth_data::{Dataset, SynthConfig};

    #[test]
    fn untrained_model_emits_feature_grids() {
        let cfg = SynthConfig { train_ids: 2, test_ids: 2, train_per_id: 4, query_per_id: 4, gallery_per_id: 4, ..SynthConfig::default() };
        let data = Dataset::generate(&cfg, 1).unwrap();
        let model = Model::<f32>::new(ModelConfig { num_classes: 2, ..ModelConfig::default() }, &mut stream(1, &[])).unwrap();
        let maps = response_maps(&model, &data.query).unwrap();
        assert_eq!(maps.len(), data.query.len());
        for m in &maps {
            assert_eq!((m.height, m.width), model.config.feature_size());
            assert_eq!(m.channel_mean.len(), m.height * m.width);
            assert!((m.attention.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let csv = grid_csv(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);
    }
}
