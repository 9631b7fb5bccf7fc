//! Identity-balanced optimization of a [`Model`] and the gradient checks
//! that run alongside it.

mod optim;
mod sampler;
pub mod verify;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::heatmaps::{Grouping, HeatmapStack, NUM_GROUPS};
use crate::model::Model;
use crate::params::{apply_stat_updates, Graph};
use crate::reid_losses::{LossBreakdown, LossWeights};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::synth_data::{augment, AugmentConfig, Raster, Sample};
use crate::tensor::Tensor;

pub use optim::{Adam, AdamConfig, Schedule};
pub use sampler::epoch_batches;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub s: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    /// Run the fusion-gradient identity check every this many steps in
    /// debug builds; 0 disables it.
    pub verify_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 4,
            s: 4,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            verify_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.s < 2 {
            return Err(Error::config("batch-hard mining needs P >= 2 and S >= 2"));
        }
        self.schedule.validate()?;
        self.weights.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.s
    }
}

/// Images as `[N, 3, H, W]`, group heatmaps as `[N, K, h, w]` and class
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<T> {
    pub images: Tensor<T>,
    pub heatmaps: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

/// Planar, standardized copy of an interleaved raster.
pub fn image_planes<T: Scalar>(image: &Raster) -> Vec<T> {
    let hw = image.height * image.width;
    let mut out = vec![T::zero(); 3 * hw];
    for (p, px) in image.data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * hw + p] = T::lit(f64::from((px[ch] - PIXEL_MEAN) / PIXEL_STD));
        }
    }
    out
}

impl<T: Scalar> LabeledBatch<T> {
    /// Stacks `samples` with optional per-sample augmentation. Sample `i`
    /// draws from the stream `(seed, AUGMENT, key..., i)`, so the batch does
    /// not depend on thread scheduling.
    pub fn assemble(
        samples: &[&Sample],
        labels: Vec<usize>,
        with_heatmaps: bool,
        augment_with: Option<(&AugmentConfig, u64, &[u64])>,
    ) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
        let (ih, iw) = (first.image.height, first.image.width);
        let (gh, gw) = (first.raw.height, first.raw.width);
        let grouping = Grouping::default();
        let rows: Vec<Result<(Vec<T>, Option<Vec<T>>)>> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                if (s.image.height, s.image.width, s.raw.height, s.raw.width) != (ih, iw, gh, gw) {
                    return Err(Error::data(format!("sample {} has inconsistent dimensions", s.name)));
                }
                let (image, raw) = match augment_with {
                    Some((cfg, seed, key)) => {
                        let mut path = vec![tag::AUGMENT];
                        path.extend_from_slice(key);
                        path.push(i as u64);
                        let (img, raw, _) = augment(&s.image, &s.raw, &mut stream(seed, &path), cfg);
                        (img, raw)
                    }
                    None => (s.image.clone(), s.raw.clone()),
                };
                let maps = if with_heatmaps {
                    let h = HeatmapStack::from_raw(&raw, &grouping)?;
                    Some(h.groups.iter().map(|&v| T::lit(f64::from(v))).collect())
                } else {
                    None
                };
                Ok((image_planes(&image), maps))
            })
            .collect();
        let n = samples.len();
        let mut images = Vec::with_capacity(n * 3 * ih * iw);
        let mut heat = Vec::with_capacity(if with_heatmaps { n * NUM_GROUPS * gh * gw } else { 0 });
        for row in rows {
            let (img, maps) = row?;
            images.extend(img);
            if let Some(m) = maps {
                heat.extend(m);
            }
        }
        Ok(LabeledBatch {
            images: Tensor::new(&[n, 3, ih, iw], images)?,
            heatmaps: if with_heatmaps { Some(Tensor::new(&[n, NUM_GROUPS, gh, gw], heat)?) } else { None },
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> LabeledBatch<U> {
        LabeledBatch { images: self.images.cast(), heatmaps: self.heatmaps.as_ref().map(Tensor::cast), labels: self.labels.clone() }
    }
}

/// Contiguous class labels for the identities present in `samples`,
/// ordered by identity.
pub fn class_labels(samples: &[Sample]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for s in samples {
        map.entry(s.id).or_insert(0usize);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    (samples.iter().map(|s| map[&s.id]).collect(), map.len())
}

/// Whether the enabled branches read heatmaps.
pub fn needs_heatmaps<T>(model: &Model<T>) -> bool {
    let sw = model.config.switches;
    sw.sab || sw.feb
}

/// One optimizer update on all enabled loss terms.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    batch: &LabeledBatch<T>,
    weights: &LossWeights,
    lr: f64,
    break_detach: bool,
) -> Result<LossBreakdown> {
    let sw = model.config.switches;
    let (grads, stats, breakdown) = {
        let mut g = Graph::with_tape(&model.params, true, Tape::new().with_broken_detach(break_detach));
        let images = g.tape.constant(batch.images.clone());
        let heat = batch.heatmaps.as_ref().map(|h| g.tape.constant(h.clone()));
        let bundle = model.forward(&mut g, images, heat, sw.sab, sw.feb)?;
        let (loss, breakdown, _) = model.losses(&mut g, &bundle, &batch.labels, weights)?;
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {breakdown:?} on labels {:?}", batch.labels)));
        }
        let grads = g.tape.backward(loss);
        let pgrads = g.param_gradients(&grads);
        if let Some(i) = pgrads.iter().position(|t| t.as_ref().is_some_and(|t| !t.all_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient for `{}` with loss {breakdown:?}", model.params.param(i).name)));
        }
        (pgrads, g.into_stat_updates(), breakdown)
    };
    optimizer.update(&mut model.params, &grads, lr);
    apply_stat_updates(&mut model.params, &stats, T::lit(model.config.bn_momentum));
    Ok(breakdown)
}

/// Progress notifications from [`Trainer::run`].
pub enum TrainEvent<'a, T: Scalar> {
    Step { epoch: usize, step: usize, loss: &'a LossBreakdown },
    EpochEnd { epoch: usize, trainer: &'a Trainer<T> },
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub epoch: usize,
    /// Test hook that turns every stop-gradient into the identity.
    pub break_detach: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam.clone(), &model.params);
        Ok(Trainer { model, optimizer, config, seed, step: 0, epoch: 0, break_detach: false })
    }

    fn check_data(&self, train: &[Sample]) -> Result<Vec<usize>> {
        let first = train.first().ok_or_else(|| Error::data("training split is empty"))?;
        let mc = &self.model.config;
        if (first.image.height, first.image.width) != (mc.image_height, mc.image_width) {
            return Err(Error::data(format!(
                "images are {}x{} but the model expects {}x{}",
                first.image.height, first.image.width, mc.image_height, mc.image_width
            )));
        }
        if needs_heatmaps(&self.model) && (first.raw.height, first.raw.width) != mc.feature_size() {
            return Err(Error::data(format!(
                "heatmaps are {}x{} but the feature map is {:?}",
                first.raw.height,
                first.raw.width,
                mc.feature_size()
            )));
        }
        let (labels, classes) = class_labels(train);
        if classes != mc.num_classes {
            return Err(Error::data(format!("training split has {classes} identities, model has {} classes", mc.num_classes)));
        }
        Ok(labels)
    }

    /// Trains the remaining epochs, writing one CSV row per step to `log`.
    pub fn run(&mut self, train: &[Sample], mut log: Option<&mut dyn Write>, mut on_event: impl FnMut(TrainEvent<'_, T>) -> Result<()>) -> Result<()> {
        let labels = self.check_data(train)?;
        let with_heatmaps = needs_heatmaps(&self.model);
        let io_err = |e| Error::io("training log", e);
        if self.step == 0 {
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", LossBreakdown::CSV_HEADER).map_err(io_err)?;
            }
        }
        while self.epoch < self.config.schedule.epochs {
            let epoch = self.epoch;
            let lr = self.config.schedule.lr(epoch);
            let batches = epoch_batches(&labels, self.config.p, self.config.s, &mut stream(self.seed, &[tag::SAMPLER, epoch as u64]))?;
            for (b, idx) in batches.iter().enumerate() {
                let samples: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
                let key = [epoch as u64, b as u64];
                let batch = LabeledBatch::<T>::assemble(
                    &samples,
                    idx.iter().map(|&i| labels[i]).collect(),
                    with_heatmaps,
                    Some((&self.config.augment, self.seed, &key)),
                )?;
                if cfg!(debug_assertions) && self.config.verify_every > 0 && self.step % self.config.verify_every == 0 {
                    let sw = self.model.config.switches;
                    if sw.sab && sw.interaction {
                        let report = verify::verify_fusion_gradients(&self.model.cast::<f64>(), &batch.cast::<f64>(), &self.config.weights)?;
                        report.ensure()?;
                    }
                }
                let loss = train_step(&mut self.model, &mut self.optimizer, &batch, &self.config.weights, lr, self.break_detach)?;
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", loss.csv_row(self.step)).map_err(io_err)?;
                }
                on_event(TrainEvent::Step { epoch, step: self.step, loss: &loss })?;
                self.step += 1;
            }
            self.epoch += 1;
            on_event(TrainEvent::EpochEnd { epoch, trainer: self })?;
        }
        if let Some(w) = log.as_mut() {
            w.flush().map_err(io_err)?;
        }
        Ok(())
    }
}
