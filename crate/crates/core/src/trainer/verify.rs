//! Gradient verification: the fusion-gradient identity, finite-difference
//! checks of the loss functions and the stop-gradient contracts of the two
//! distillation terms.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledBatch;
use crate::autograd::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::autograd::{Gradients, Tape, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::feb::consistent_loss;
use crate::heatmaps::{normalize_heatmap, NUM_GROUPS};
use crate::model::{Ablation, Model, ModelConfig, SAB_PROJ, SAB_PROJ_BN};
use crate::params::{Branch, Graph};
use crate::reid_losses::{
    id_loss, softmax_triplet, softmax_triplet_anchor_gradient, softmax_triplet_log_softmax_form, softmax_triplet_value,
    triplet_batch_hard, LossWeights,
};
use crate::rng::{stream, tag};
use crate::sab::{multi_part_contrastive_loss, SymmetryGroups};
use crate::tensor::Tensor;

/// Relative-error bound for central-difference checks in `f64`.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    /// Element-wise max `|∂L/∂f_G − ∂L/∂f_P|` for the loss on `f_G + f_P`.
    pub max_fusion_difference: f64,
    /// `(sample, channel)` entries where the two gradients differ.
    pub offending: Vec<(usize, usize)>,
    /// Autodiff vs. central differences for `∂L_tri/∂v_a`.
    pub triplet_relative_error: f64,
    /// Batch indices of the anchor, positive and negative.
    pub triplet: (usize, usize, usize),
}

impl FusionReport {
    pub fn passes(&self) -> bool {
        self.max_fusion_difference == 0.0 && self.triplet_relative_error < FD_TOLERANCE
    }

    pub fn ensure(&self) -> Result<()> {
        if self.passes() {
            return Ok(());
        }
        let shown: Vec<_> = self.offending.iter().take(8).collect();
        Err(Error::CheckFailed(format!(
            "fusion gradients differ by {:e} at {} entries (first {:?}); triplet relative error {:e} on samples {:?}",
            self.max_fusion_difference,
            self.offending.len(),
            shown,
            self.triplet_relative_error,
            self.triplet
        )))
    }
}

fn grad_of(grads: &Gradients<f64>, tape: &Tape<f64>, v: Var) -> Tensor<f64> {
    grads.get_or_zeros(v, tape.shape(v))
}

/// Anchor, positive and negative indices: the first sample, its first
/// same-label partner and the first sample with another label.
fn pick_triplet(labels: &[usize]) -> Result<(usize, usize, usize)> {
    let a = 0;
    let p = (1..labels.len()).find(|&i| labels[i] == labels[a]);
    let n = (1..labels.len()).find(|&i| labels[i] != labels[a]);
    match (labels.first(), p, n) {
        (Some(_), Some(p), Some(n)) => Ok((a, p, n)),
        _ => Err(Error::data("triplet check needs a positive and a negative for the first sample")),
    }
}

fn row(t: &Tensor<f64>, i: usize) -> Tensor<f64> {
    Tensor::new(&[1, t.dim(1)], t.row(i).to_vec()).expect("row shape")
}

/// Checks that the fused loss sends identical gradients to `f_G` and `f_P`
/// and that the softmax-triplet gradient on the fused features agrees with
/// central differences.
pub fn verify_fusion_gradients(model: &Model<f64>, batch: &LabeledBatch<f64>, weights: &LossWeights) -> Result<FusionReport> {
    let sw = model.config.switches;
    if !(sw.sab && sw.interaction) {
        return Err(Error::Capability("fusion check needs the sab branch with interaction".into()));
    }
    let mut g = Graph::new(&model.params, true);
    let images = g.tape.constant(batch.images.clone());
    let heat = batch.heatmaps.as_ref().map(|h| g.tape.constant(h.clone()));
    let bundle = model.forward(&mut g, images, heat, true, false)?;
    let f_v = bundle.f_v.ok_or_else(|| Error::Capability("fused feature missing".into()))?;
    let f_p = bundle.f_p.expect("f_p accompanies f_v");
    let loss = model.reid_loss(&mut g, Branch::Sab, f_v, &batch.labels, weights)?;
    let grads = g.tape.backward(loss);
    let (dg, dp) = (grad_of(&grads, &g.tape, bundle.f_g), grad_of(&grads, &g.tape, f_p));
    let c = dg.dim(1);
    let mut max_fusion_difference = 0.0f64;
    let mut offending = Vec::new();
    for (k, (a, b)) in dg.data().iter().zip(dp.data()).enumerate() {
        let d = (a - b).abs();
        if d != 0.0 || !d.is_finite() {
            offending.push((k / c, k % c));
        }
        max_fusion_difference = max_fusion_difference.max(if d.is_finite() { d } else { f64::INFINITY });
    }
    let triplet = pick_triplet(&batch.labels)?;
    let v = g.tape.value(f_v);
    let inputs = [row(v, triplet.0), row(v, triplet.1), row(v, triplet.2)];
    let report = check_gradients(&inputs, DEFAULT_STEP, |t, x| softmax_triplet(t, x[0], x[1], x[2]).expect("matching shapes"));
    Ok(FusionReport { max_fusion_difference, offending, triplet_relative_error: report.relative_errors[0], triplet })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StopGradientReport {
    /// Largest gradient `L_CL` sends into the enhanced path: `f_F`, the
    /// attention map and every foreground-branch parameter.
    pub cl_teacher_path: f64,
    /// Largest deviation of the backbone gradient of `L_CL` from the same
    /// loss with the teacher supplied as a constant.
    pub cl_backbone_deviation: f64,
    /// Largest gradient `L_MCL` sends into the part projections and their
    /// normalization.
    pub mcl_projection: f64,
}

impl StopGradientReport {
    pub fn cl_passes(&self) -> bool {
        self.cl_teacher_path == 0.0 && self.cl_backbone_deviation == 0.0
    }

    pub fn mcl_passes(&self) -> bool {
        self.mcl_projection == 0.0
    }
}

fn max_abs(t: Option<&Tensor<f64>>) -> f64 {
    t.map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, x| if x.is_finite() { m.max(x.abs()) } else { f64::INFINITY }))
}

fn backbone_gradients(model: &Model<f64>, g: &Graph<'_, f64>, grads: &Gradients<f64>) -> Vec<Tensor<f64>> {
    g.param_gradients(grads)
        .into_iter()
        .zip(model.params.iter())
        .filter(|(_, p)| p.branch == Branch::Backbone && p.trainable)
        .map(|(t, p)| t.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

/// Backpropagates `L_CL` and `L_MCL` of the full model separately and
/// measures what leaks past their stop-gradients.
pub fn check_stop_gradients(model: &Model<f64>, batch: &LabeledBatch<f64>, weights: &LossWeights, break_detach: bool) -> Result<StopGradientReport> {
    let sw = model.config.switches;
    if !(sw.cl && sw.mcl) {
        return Err(Error::Capability("stop-gradient check needs both distillation terms".into()));
    }
    let heat_needed = || batch.heatmaps.clone().ok_or_else(|| Error::data("stop-gradient check needs heatmaps"));
    let mut g = Graph::with_tape(&model.params, true, Tape::new().with_broken_detach(break_detach));
    let images = g.tape.constant(batch.images.clone());
    let heat = g.tape.constant(heat_needed()?);
    let bundle = model.forward(&mut g, images, Some(heat), true, true)?;
    let (_, _, terms) = model.losses(&mut g, &bundle, &batch.labels, weights)?;
    let (cl, mcl) = (terms.cl.expect("cl enabled"), terms.mcl.expect("mcl enabled"));

    let cl_grads = g.tape.backward(cl);
    let mut cl_teacher_path = max_abs(cl_grads.get(bundle.f_f.expect("feb on"))).max(max_abs(cl_grads.get(bundle.attention.expect("feb on"))));
    for (t, p) in g.param_gradients(&cl_grads).iter().zip(model.params.iter()) {
        if p.branch == Branch::Feb {
            cl_teacher_path = cl_teacher_path.max(max_abs(t.as_ref()));
        }
    }
    let backbone = backbone_gradients(model, &g, &cl_grads);

    let mcl_grads = g.tape.backward(mcl);
    let mut mcl_projection = 0.0f64;
    for (t, p) in g.param_gradients(&mcl_grads).iter().zip(model.params.iter()) {
        if p.name == SAB_PROJ || p.name.starts_with(SAB_PROJ_BN) {
            mcl_projection = mcl_projection.max(max_abs(t.as_ref()));
        }
    }

    let teacher = g.tape.value(bundle.f_e.expect("feb on")).clone();
    let mut r = Graph::new(&model.params, true);
    let images = r.tape.constant(batch.images.clone());
    let (_, f_g) = model.forward_main(&mut r, images)?;
    let t = r.tape.constant(teacher);
    let t = r.tape.detach(t);
    let reference = consistent_loss(&mut r.tape, f_g, t)?;
    let ref_grads = r.tape.backward(reference);
    let mut cl_backbone_deviation = 0.0f64;
    for (a, b) in backbone.iter().zip(backbone_gradients(model, &r, &ref_grads)) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (x - y).abs();
            cl_backbone_deviation = cl_backbone_deviation.max(if d.is_finite() { d } else { f64::INFINITY });
        }
    }
    Ok(StopGradientReport { cl_teacher_path, cl_backbone_deviation, mcl_projection })
}

/// Tiny full model and a `2 x 2` batch with random images and heatmaps for
/// the verification harness.
pub fn tiny_setup(seed: u64) -> Result<(Model<f64>, LabeledBatch<f64>)> {
    let config = ModelConfig {
        image_height: 16,
        image_width: 8,
        backbone: BackboneConfig { channels: vec![8, 16], strides: vec![2, 2], kernel: 3, batch_norm: true },
        num_classes: 3,
        switches: Ablation::Full.switches(),
        ..Default::default()
    };
    let mut rng = stream(seed, &[tag::PROBE]);
    let model = Model::<f64>::new(config.clone(), &mut rng)?;
    let (h, w) = config.feature_size();
    let n = 4;
    let images = Tensor::from_fn(&[n, 3, config.image_height, config.image_width], |_| StandardNormal.sample(&mut rng));
    let mut heat = Vec::with_capacity(n * NUM_GROUPS * h * w);
    for _ in 0..n * NUM_GROUPS {
        let logits: Vec<f64> = (0..h * w).map(|_| 2.0 * rng.random::<f64>()).collect();
        heat.extend(normalize_heatmap(&logits)?);
    }
    let batch = LabeledBatch { images, heatmaps: Some(Tensor::new(&[n, NUM_GROUPS, h, w], heat)?), labels: vec![0, 0, 2, 2] };
    Ok((model, batch))
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    /// Passing requires `value < threshold`, or `value == 0` when the
    /// threshold is 0.
    pub threshold: f64,
}

impl CheckOutcome {
    fn new(name: &str, value: f64, threshold: f64) -> Self {
        CheckOutcome { name: name.to_string(), value, threshold }
    }

    pub fn passed(&self) -> bool {
        if self.threshold == 0.0 {
            self.value == 0.0
        } else {
            self.value < self.threshold
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let rel = if self.threshold == 0.0 { "==" } else { "<" };
        write!(f, "{verdict} {:<28} {:.3e} (need {rel} {:e})", self.name, self.value, self.threshold)
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Every gradient check on a tiny random model: the fusion identity,
/// finite differences of each loss against its inputs, agreement of the
/// two softmax-triplet forms, and the stop-gradient contracts.
pub fn run_gradient_checks(seed: u64, break_detach: bool) -> Result<Vec<CheckOutcome>> {
    let (model, batch) = tiny_setup(seed)?;
    let weights = LossWeights::default();
    let mut out = Vec::new();

    let fusion = verify_fusion_gradients(&model, &batch, &weights)?;
    out.push(CheckOutcome::new("fusion_gradient_difference", fusion.max_fusion_difference, 0.0));
    out.push(CheckOutcome::new("softmax_triplet_fd", fusion.triplet_relative_error, FD_TOLERANCE));

    let mut rng = stream(seed, &[tag::PROBE, 1]);
    let labels = [0usize, 0, 1, 1, 2, 2];
    let (n, c) = (labels.len(), 16);
    let fd = |name: &str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        let r = check_gradients(&inputs, DEFAULT_STEP, build);
        CheckOutcome::new(name, r.max_relative_error(), FD_TOLERANCE)
    };
    out.push(fd("id_loss_fd", vec![random(&[n, 3], &mut rng)], &|t, x| id_loss(t, x[0], &labels).expect("labels in range")));
    out.push(fd("batch_hard_triplet_fd", vec![random(&[n, c], &mut rng)], &|t, x| {
        triplet_batch_hard(t, x[0], &labels, weights.margin).expect("valid batch")
    }));
    // Teachers enter as captured constants: their analytic gradient is zero
    // by construction, so only the student is perturbed.
    let teacher = random(&[n, c], &mut rng);
    out.push(fd("consistency_loss_fd", vec![random(&[n, c], &mut rng)], &|t, x| {
        let k = t.constant(teacher.clone());
        let k = t.detach(k);
        consistent_loss(t, x[0], k).expect("shapes")
    }));
    let sym = SymmetryGroups::default();
    let parts = random(&[n, NUM_GROUPS, 2], &mut rng);
    out.push(fd(
        "multi_part_contrastive_fd",
        vec![random(&[n, NUM_GROUPS, 2], &mut rng)],
        &|t, x| {
            let k = t.constant(parts.clone());
            let k = t.detach(k);
            multi_part_contrastive_loss(t, x[0], k, &sym, 0.5).expect("shapes")
        },
    ));

    let (va, vp, vn) = (random(&[1, c], &mut rng), random(&[1, c], &mut rng), random(&[1, c], &mut rng));
    let forms = (softmax_triplet_value(va.data(), vp.data(), vn.data()) - softmax_triplet_log_softmax_form(va.data(), vp.data(), vn.data())).abs();
    out.push(CheckOutcome::new("softmax_triplet_form_gap", forms, 1e-12));
    let closed = Tensor::new(&[1, c], softmax_triplet_anchor_gradient(va.data(), vp.data(), vn.data()))?;
    let inputs = [va, vp, vn];
    let fd_anchor = crate::autograd::gradcheck::numerical_gradient(&inputs, 0, DEFAULT_STEP, &|t: &mut Tape<f64>, x: &[Var]| {
        softmax_triplet(t, x[0], x[1], x[2]).expect("shapes")
    });
    out.push(CheckOutcome::new("softmax_triplet_closed_form", crate::autograd::gradcheck::relative_error(&closed, &fd_anchor), FD_TOLERANCE));

    let stop = check_stop_gradients(&model, &batch, &weights, break_detach)?;
    out.push(CheckOutcome::new("cl_teacher_path_gradient", stop.cl_teacher_path, 0.0));
    out.push(CheckOutcome::new("cl_backbone_deviation", stop.cl_backbone_deviation, 0.0));
    out.push(CheckOutcome::new("mcl_projection_gradient", stop.mcl_projection, 0.0));
    Ok(out)
}
