//! Feature extraction, distance matrices, CMC / mAP with cross-camera
//! filtering, feature dumps and inference complexity.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmaps::{Grouping, HeatmapStack, NUM_GROUPS};
use crate::model::{FeatureTag, Model};
use crate::params::{Branch, Graph};
use crate::scalar::Scalar;
use crate::synth_data::Sample;
use crate::tensor::Tensor;
use crate::trainer::image_planes;

/// Heatmap provider that counts every read.
pub struct CountingHeatmaps<'a> {
    samples: &'a [Sample],
    grouping: Grouping,
    reads: AtomicUsize,
}

impl<'a> CountingHeatmaps<'a> {
    pub fn new(samples: &'a [Sample]) -> Self {
        CountingHeatmaps { samples, grouping: Grouping::default(), reads: AtomicUsize::new(0) }
    }

    pub fn get(&self, i: usize) -> Result<HeatmapStack<f32>> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.samples[i].heatmaps(&self.grouping)
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOptions {
    /// Match on the BNNeck output instead of the raw embedding.
    pub post_bnneck: bool,
    pub batch_size: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions { post_bnneck: true, batch_size: 64 }
    }
}

/// One embedding per image with its identity and camera.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub tag: FeatureTag,
    /// `[n, dim]`.
    pub features: Tensor<f32>,
    pub names: Vec<String>,
    pub ids: Vec<usize>,
    pub cameras: Vec<usize>,
    /// Heatmap reads performed during extraction.
    pub heatmap_reads: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim(1)
    }
}

/// Embeds every sample of a split with the model in inference mode.
pub fn extract_features<T: Scalar>(model: &Model<T>, samples: &[Sample], tag: FeatureTag, opts: &ExtractOptions) -> Result<FeatureSet> {
    model.supports(tag)?;
    if opts.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mc = &model.config;
    let heat = CountingHeatmaps::new(samples);
    let chunks: Vec<(usize, &[Sample])> = samples.chunks(opts.batch_size).enumerate().map(|(i, c)| (i * opts.batch_size, c)).collect();
    let rows: Vec<Result<Vec<f32>>> = chunks
        .par_iter()
        .map(|&(start, chunk)| {
            let n = chunk.len();
            let mut images = Vec::with_capacity(n * 3 * mc.image_height * mc.image_width);
            for s in chunk {
                if (s.image.height, s.image.width) != (mc.image_height, mc.image_width) {
                    return Err(Error::data(format!("image {} is {}x{}, model expects {}x{}", s.name, s.image.height, s.image.width, mc.image_height, mc.image_width)));
                }
                images.extend(image_planes::<T>(&s.image));
            }
            let mut g = Graph::new(&model.params, false);
            let images = g.tape.constant(Tensor::new(&[n, 3, mc.image_height, mc.image_width], images)?);
            let maps = if tag.needs_heatmaps() {
                let (h, w) = mc.feature_size();
                let mut data = Vec::with_capacity(n * NUM_GROUPS * h * w);
                for i in start..start + n {
                    let stack = heat.get(i)?;
                    if (stack.height, stack.width) != (h, w) {
                        return Err(Error::data(format!("heatmaps are {}x{}, feature map is {h}x{w}", stack.height, stack.width)));
                    }
                    data.extend(stack.groups.iter().map(|&v| T::lit(f64::from(v))));
                }
                Some(g.tape.constant(Tensor::new(&[n, NUM_GROUPS, h, w], data)?))
            } else {
                None
            };
            let out = model.embed(&mut g, images, maps, tag, opts.post_bnneck)?;
            Ok(g.tape.value(out).data().iter().map(|v| v.to_f64_lossy() as f32).collect())
        })
        .collect();
    let mut data = Vec::new();
    for r in rows {
        data.extend(r?);
    }
    let dim = if samples.is_empty() { mc.feature_dim() } else { data.len() / samples.len() };
    Ok(FeatureSet {
        tag,
        features: Tensor::new(&[samples.len(), dim], data)?,
        names: samples.iter().map(|s| s.name.clone()).collect(),
        ids: samples.iter().map(|s| s.id).collect(),
        cameras: samples.iter().map(|s| s.camera).collect(),
        heatmap_reads: heat.reads(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::config(format!("unknown metric `{s}` (expected cosine|euclidean)"))),
        }
    }
}

/// Row-major `rows x cols` distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} distance matrix needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.data[q * self.cols + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.data[q * self.cols..(q + 1) * self.cols]
    }
}

/// Pairwise distances between the rows of `query` and `gallery`. Cosine
/// distance is `1 − cos`; a zero vector has similarity 0 with everything.
pub fn distance_matrix<T: Scalar>(query: &Tensor<T>, gallery: &Tensor<T>, metric: Metric) -> Result<DistanceMatrix> {
    if query.shape().len() != 2 || gallery.shape().len() != 2 || query.dim(1) != gallery.dim(1) {
        return Err(Error::shape(format!("cannot compare features {:?} with {:?}", query.shape(), gallery.shape())));
    }
    let to64 = |t: &Tensor<T>| -> Vec<Vec<f64>> { (0..t.dim(0)).map(|i| t.row(i).iter().map(|v| v.to_f64_lossy()).collect()).collect() };
    let (q, g) = (to64(query), to64(gallery));
    let norms = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect() };
    let (qn, gn) = (norms(&q), norms(&g));
    let data: Vec<f64> = q
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, a)| {
            let (g, gn, qn) = (&g, &gn, &qn);
            g.iter().enumerate().map(move |(j, b)| match metric {
                Metric::Cosine => {
                    let denom = qn[i] * gn[j];
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    1.0 - if denom > 0.0 { dot / denom } else { 0.0 }
                }
                Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            })
        })
        .collect();
    DistanceMatrix::new(q.len(), g.len(), data)
}

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub feature_used: Option<FeatureTag>,
    pub metric: Metric,
    /// Rank-1, rank-5 and rank-10 accuracy over valid queries.
    pub cmc: [f64; 3],
    pub map: f64,
    /// `None` for queries without a valid positive.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_queries: usize,
    pub valid_queries: usize,
    pub skipped_queries: usize,
    pub distances: DistanceMatrix,
    /// Per query, whether each gallery entry survives camera filtering.
    pub valid_mask: Vec<Vec<bool>>,
}

impl RankingReport {
    pub const CSV_HEADER: &'static str = "feature,metric,queries,valid,skipped,rank1,rank5,rank10,mAP";

    pub fn rank(&self, k: usize) -> Option<f64> {
        CMC_RANKS.iter().position(|&r| r == k).map(|i| self.cmc[i])
    }

    pub fn csv_row(&self) -> String {
        let tag = self.feature_used.map_or("-".to_string(), |t| t.to_string());
        let metric = match self.metric {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        };
        format!(
            "{tag},{metric},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.num_queries, self.valid_queries, self.skipped_queries, self.cmc[0], self.cmc[1], self.cmc[2], self.map
        )
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        let text = serde_json::to_string(self).map_err(|e| Error::data(format!("cannot serialize report: {e}")))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}

/// CMC and mAP under the standard protocol: gallery entries sharing both
/// identity and camera with the query are removed, ties go to the lower
/// gallery index, and queries left without a positive are skipped.
pub fn evaluate_ranking(distances: &DistanceMatrix, q_ids: &[usize], q_cams: &[usize], g_ids: &[usize], g_cams: &[usize]) -> Result<RankingReport> {
    if q_ids.len() != distances.rows || q_cams.len() != distances.rows || g_ids.len() != distances.cols || g_cams.len() != distances.cols {
        return Err(Error::shape(format!(
            "{}x{} distances with {} / {} query and {} / {} gallery labels",
            distances.rows,
            distances.cols,
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    if let Some(i) = distances.data.iter().position(|d| d.is_nan()) {
        return Err(Error::Numeric(format!("NaN distance at entry {i}")));
    }
    let per_query: Vec<(Vec<bool>, Option<(f64, usize)>)> = (0..distances.rows)
        .into_par_iter()
        .map(|q| {
            let mask: Vec<bool> = (0..distances.cols).map(|g| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q])).collect();
            let mut order: Vec<usize> = (0..distances.cols).filter(|&g| mask[g]).collect();
            let row = distances.row(q);
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let positives = order.iter().filter(|&&g| g_ids[g] == q_ids[q]).count();
            if positives == 0 {
                return (mask, None);
            }
            let (mut hits, mut precision_sum, mut first) = (0usize, 0.0, usize::MAX);
            for (rank, &g) in order.iter().enumerate() {
                if g_ids[g] == q_ids[q] {
                    hits += 1;
                    precision_sum += hits as f64 / (rank + 1) as f64;
                    first = first.min(rank);
                }
            }
            (mask, Some((precision_sum / positives as f64, first)))
        })
        .collect();
    let valid: Vec<(f64, usize)> = per_query.iter().filter_map(|(_, r)| *r).collect();
    if valid.is_empty() {
        return Err(Error::Evaluation(format!("none of the {} queries has a valid gallery positive", distances.rows)));
    }
    let n = valid.len() as f64;
    let cmc = CMC_RANKS.map(|k| valid.iter().filter(|(_, first)| *first < k).count() as f64 / n);
    let map = valid.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    Ok(RankingReport {
        feature_used: None,
        metric: Metric::Cosine,
        cmc,
        map,
        per_query_ap: per_query.iter().map(|(_, r)| r.map(|(ap, _)| ap)).collect(),
        num_queries: distances.rows,
        valid_queries: valid.len(),
        skipped_queries: distances.rows - valid.len(),
        distances: distances.clone(),
        valid_mask: per_query.into_iter().map(|(m, _)| m).collect(),
    })
}

/// Extracts query and gallery features for `tag` and ranks them.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    query: &[Sample],
    gallery: &[Sample],
    tag: FeatureTag,
    metric: Metric,
    opts: &ExtractOptions,
) -> Result<(RankingReport, FeatureSet, FeatureSet)> {
    let q = extract_features(model, query, tag, opts)?;
    let g = extract_features(model, gallery, tag, opts)?;
    let d = distance_matrix(&q.features, &g.features, metric)?;
    let mut report = evaluate_ranking(&d, &q.ids, &q.cameras, &g.ids, &g.cameras)?;
    report.feature_used = Some(tag);
    report.metric = metric;
    Ok((report, q, g))
}

const PGFT_MAGIC: &[u8; 4] = b"PGFT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SidecarEntry {
    name: String,
    id: usize,
    camera: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    feature: FeatureTag,
    entries: Vec<SidecarEntry>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

/// Writes the binary feature dump and its `<path>.ids.json` sidecar.
pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    let (n, d) = (set.len(), set.dim());
    let mut buf = Vec::with_capacity(12 + 4 * n * d);
    buf.extend_from_slice(PGFT_MAGIC);
    buf.extend_from_slice(&u32::try_from(n).map_err(|_| Error::data("too many features"))?.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(d).map_err(|_| Error::data("feature dimension too large"))?.to_le_bytes());
    for v in set.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        feature: set.tag,
        entries: (0..n).map(|i| SidecarEntry { name: set.names[i].clone(), id: set.ids[i], camera: set.cameras[i] }).collect(),
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::data(format!("cannot serialize sidecar: {e}")))?;
    fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Integrity(format!("{}: {what}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != PGFT_MAGIC {
        return Err(corrupt("not a feature dump"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, d) = (word(4), word(8));
    if bytes.len() != 12 + 4 * n * d {
        return Err(corrupt("length does not match header"));
    }
    let data: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", sp.display())))?;
    if side.entries.len() != n {
        return Err(corrupt("sidecar count differs from dump"));
    }
    Ok(FeatureSet {
        tag: side.feature,
        features: Tensor::new(&[n, d], data)?,
        names: side.entries.iter().map(|e| e.name.clone()).collect(),
        ids: side.entries.iter().map(|e| e.id).collect(),
        cameras: side.entries.iter().map(|e| e.camera).collect(),
        heatmap_reads: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub feature: FeatureTag,
    /// Trainable parameters stored in the model.
    pub model_parameters: usize,
    /// Trainable parameters on the inference path of `feature`.
    pub path_parameters: usize,
    pub multiply_adds: u64,
}

pub fn complexity_report<T: Scalar>(model: &Model<T>, tag: FeatureTag) -> Result<ComplexityReport> {
    model.supports(tag)?;
    let on_path = |b: Branch| match b {
        Branch::Backbone | Branch::MbHead => true,
        Branch::Sab => matches!(tag, FeatureTag::P | FeatureTag::V),
        Branch::Feb => tag == FeatureTag::E,
    };
    let path_parameters = model.params.iter().filter(|p| p.trainable && on_path(p.branch)).map(|p| p.value.numel()).sum();
    Ok(ComplexityReport { feature: tag, model_parameters: model.params.trainable_count(), path_parameters, multiply_adds: model.multiply_adds(tag) })
}
