//! The three-branch network: backbone and main-branch head, the
//! foreground-enhanced branch and the semantics-aligned branch, with
//! ablation switches.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{backbone_forward, global_pool, part_pool, BackboneConfig};
use crate::error::{Error, Result};
use crate::feb::{attentive_pool, consistent_loss, enhance, foreground_attention, AttentionOptions};
use crate::heatmaps::NUM_GROUPS;
use crate::params::{push_batch_norm as push_bn, Branch, Graph, ParamStore};
use crate::reid_losses::{id_loss, total_loss, triplet_batch_hard, LossBreakdown, LossTerms, LossWeights};
use crate::sab::{fuse, multi_part_contrastive_loss, project_parts, split_groups, SymmetryGroups};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which branches and distillation terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub sab: bool,
    pub feb: bool,
    /// Supervise `f_V = f_G + f_P` instead of `f_P` alone.
    pub interaction: bool,
    pub mcl: bool,
    pub cl: bool,
}

impl Switches {
    pub fn validate(&self) -> Result<()> {
        if (self.interaction || self.mcl) && !self.sab {
            return Err(Error::config("interaction and mcl switches need the sab branch"));
        }
        if self.cl && !self.feb {
            return Err(Error::config("cl switch needs the feb branch"));
        }
        Ok(())
    }
}

/// The six rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "sab")]
    Sab,
    #[serde(rename = "sab-i")]
    SabI,
    #[serde(rename = "sab-im")]
    SabIm,
    #[serde(rename = "sab-feb")]
    SabFeb,
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::Baseline, Ablation::Sab, Ablation::SabI, Ablation::SabIm, Ablation::SabFeb, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Sab => "sab",
            Ablation::SabI => "sab-i",
            Ablation::SabIm => "sab-im",
            Ablation::SabFeb => "sab-feb",
            Ablation::Full => "full",
        }
    }

    pub fn switches(self) -> Switches {
        let (sab, interaction, mcl, feb, cl) = match self {
            Ablation::Baseline => (false, false, false, false, false),
            Ablation::Sab => (true, false, false, false, false),
            Ablation::SabI => (true, true, false, false, false),
            Ablation::SabIm => (true, true, true, false, false),
            Ablation::SabFeb => (true, true, true, true, false),
            Ablation::Full => (true, true, true, true, true),
        };
        Switches { sab, feb, interaction, mcl, cl }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}` (expected baseline|sab|sab-i|sab-im|sab-feb|full)")))
    }
}

/// Feature used for matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureTag {
    G,
    P,
    V,
    F,
    E,
}

impl FeatureTag {
    pub const ALL: [FeatureTag; 5] = [FeatureTag::G, FeatureTag::P, FeatureTag::V, FeatureTag::F, FeatureTag::E];

    pub fn needs_heatmaps(self) -> bool {
        self != FeatureTag::G
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureTag::G => "G",
            FeatureTag::P => "P",
            FeatureTag::V => "V",
            FeatureTag::F => "F",
            FeatureTag::E => "E",
        }
    }
}

impl fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown feature tag `{s}` (expected G|P|V|F|E)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub switches: Switches,
    pub attention_normalized: bool,
    pub attention_temperature: f64,
    pub mcl_temperature: f64,
    /// One BNNeck head for every supervised feature instead of one each.
    pub shared_heads: bool,
    pub bn_momentum: f64,
    /// Set on stripped inference checkpoints.
    pub mb_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 32,
            backbone: BackboneConfig::default(),
            num_classes: 40,
            switches: Ablation::Full.switches(),
            attention_normalized: false,
            attention_temperature: 1.0,
            mcl_temperature: 1.0,
            shared_heads: false,
            bn_momentum: 0.1,
            mb_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.switches.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("need at least two identity classes"));
        }
        if !(self.attention_temperature > 0.0) || !(self.mcl_temperature > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.backbone.feature_size(self.image_height, self.image_width)
    }

    fn attention(&self) -> AttentionOptions {
        AttentionOptions { normalized: self.attention_normalized, temperature: self.attention_temperature }
    }
}

pub const MB_HEAD: &str = "mb.bnneck";
pub const FEB_HEAD: &str = "feb.bnneck";
pub const SAB_HEAD: &str = "sab.bnneck";
pub const SAB_PROJ: &str = "sab.proj.weight";
pub const SAB_PROJ_BN: &str = "sab.proj_bn";

/// Per-image features of one forward pass. Branch outputs are `None` when
/// the branch did not run.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingBundle {
    pub feature_map: Var,
    pub f_g: Var,
    /// `[N, K, c]`.
    pub f_l: Option<Var>,
    pub f_l_mean: Option<Var>,
    /// `[N, h*w]`.
    pub attention: Option<Var>,
    pub f_f: Option<Var>,
    pub f_e: Option<Var>,
    pub f_p: Option<Var>,
    pub f_v: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn push_head<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, branch: Branch, dim: usize, classes: usize, rng: &mut ChaCha8Rng) {
    push_bn(store, prefix, branch, dim);
    let normal = Normal::new(0.0, 0.001).expect("finite std");
    store.push(format!("{prefix}.classifier"), branch, true, Tensor::from_fn(&[classes, dim], |_| T::lit(normal.sample(rng))));
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.feature_dim();
        let mut params = ParamStore::new();
        config.backbone.init_params(&mut params, rng);
        push_head(&mut params, MB_HEAD, Branch::MbHead, c, config.num_classes, rng);
        let sw = config.switches;
        if sw.sab {
            let d = c / NUM_GROUPS;
            let he = Normal::new(0.0, (2.0 / c as f64).sqrt()).expect("finite std");
            params.push(SAB_PROJ, Branch::Sab, true, Tensor::from_fn(&[NUM_GROUPS, d, c], |_| T::lit(he.sample(rng))));
            push_bn(&mut params, SAB_PROJ_BN, Branch::Sab, c);
            if !config.shared_heads {
                push_head(&mut params, SAB_HEAD, Branch::Sab, c, config.num_classes, rng);
            }
        }
        if sw.feb && !config.shared_heads {
            push_head(&mut params, FEB_HEAD, Branch::Feb, c, config.num_classes, rng);
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn head_prefix(&self, branch: Branch) -> &'static str {
        match branch {
            _ if self.config.shared_heads => MB_HEAD,
            Branch::Feb => FEB_HEAD,
            Branch::Sab => SAB_HEAD,
            _ => MB_HEAD,
        }
    }

    /// Inference copy keeping only the backbone and the main-branch head.
    pub fn export_mb_only(&self) -> Model<T> {
        let mut config = self.config.clone();
        config.switches = Switches::default();
        config.mb_only = true;
        Model { config, params: self.params.retain_branches(&[Branch::Backbone, Branch::MbHead]) }
    }

    /// Backbone feature map and `f_G`; touches no heatmaps.
    pub fn forward_main(&self, g: &mut Graph<'_, T>, images: Var) -> Result<(Var, Var)> {
        let f = backbone_forward(g, &self.config.backbone, images, (self.config.image_height, self.config.image_width))?;
        let f_g = global_pool(&mut g.tape, f);
        Ok((f, f_g))
    }

    /// Full forward pass for the enabled branches. `heatmaps` is
    /// `[N, K, h, w]` and required when any branch is on.
    pub fn forward(&self, g: &mut Graph<'_, T>, images: Var, heatmaps: Option<Var>, sab: bool, feb: bool) -> Result<EmbeddingBundle> {
        let (f, f_g) = self.forward_main(g, images)?;
        let mut out = EmbeddingBundle { feature_map: f, f_g, f_l: None, f_l_mean: None, attention: None, f_f: None, f_e: None, f_p: None, f_v: None };
        if !(sab || feb) {
            return Ok(out);
        }
        let h = heatmaps.ok_or_else(|| Error::Capability("pose-guided branches need heatmaps".into()))?;
        let (f_l, f_l_mean) = part_pool(&mut g.tape, f, h)?;
        out.f_l = Some(f_l);
        out.f_l_mean = Some(f_l_mean);
        if feb {
            let a = foreground_attention(&mut g.tape, f, f_l_mean, self.config.attention())?;
            let f_f = attentive_pool(&mut g.tape, f, a)?;
            out.attention = Some(a);
            out.f_f = Some(f_f);
            out.f_e = Some(enhance(&mut g.tape, f_f, f_g)?);
        }
        if sab {
            let w = g.param(SAB_PROJ)?;
            let lin = project_parts(&mut g.tape, f_l, w)?;
            let bn = g.batch_norm(lin, SAB_PROJ_BN)?;
            let f_p = g.tape.relu(bn);
            out.f_p = Some(f_p);
            out.f_v = Some(fuse(&mut g.tape, f_g, f_p)?);
        }
        Ok(out)
    }

    /// BNNeck: returns the post-normalization feature and classifier logits.
    pub fn head(&self, g: &mut Graph<'_, T>, branch: Branch, x: Var) -> Result<(Var, Var)> {
        let prefix = self.head_prefix(branch);
        let post = g.batch_norm(x, prefix)?;
        let w = g.param(&format!("{prefix}.classifier"))?;
        let logits = g.tape.bmm_nt(post, w);
        Ok((post, logits))
    }

    /// ID loss on the post-BN feature plus triplet loss on the pre-BN one.
    pub fn reid_loss(&self, g: &mut Graph<'_, T>, branch: Branch, x: Var, labels: &[usize], w: &LossWeights) -> Result<Var> {
        let (_, logits) = self.head(g, branch, x)?;
        let id = id_loss(&mut g.tape, logits, labels)?;
        let tri = triplet_batch_hard(&mut g.tape, x, labels, w.margin)?;
        Ok(g.tape.weighted_sum(&[(id, T::lit(w.id_weight)), (tri, T::lit(w.triplet_weight))]))
    }

    /// The feature supervised by the semantics-aligned head.
    pub fn sab_feature(&self, bundle: &EmbeddingBundle) -> Option<Var> {
        if self.config.switches.interaction {
            bundle.f_v
        } else {
            bundle.f_p
        }
    }

    /// All enabled loss terms for a training batch.
    pub fn losses(&self, g: &mut Graph<'_, T>, bundle: &EmbeddingBundle, labels: &[usize], w: &LossWeights) -> Result<(Var, LossBreakdown, LossTerms)> {
        let sw = self.config.switches;
        let missing = |what: &str| Error::Capability(format!("{what} was not computed"));
        let reid_g = self.reid_loss(g, Branch::MbHead, bundle.f_g, labels, w)?;
        let mut terms = LossTerms { reid_g, reid_e: None, reid_v: None, cl: None, mcl: None };
        if sw.sab {
            let x = self.sab_feature(bundle).ok_or_else(|| missing("f_P"))?;
            terms.reid_v = Some(self.reid_loss(g, Branch::Sab, x, labels, w)?);
            if sw.mcl {
                let f_p = bundle.f_p.ok_or_else(|| missing("f_P"))?;
                let p_parts = split_groups(&mut g.tape, f_p, NUM_GROUPS)?;
                let p_parts = g.tape.detach(p_parts);
                let g_parts = split_groups(&mut g.tape, bundle.f_g, NUM_GROUPS)?;
                terms.mcl = Some(multi_part_contrastive_loss(&mut g.tape, g_parts, p_parts, &SymmetryGroups::default(), self.config.mcl_temperature)?);
            }
        }
        if sw.feb {
            let f_e = bundle.f_e.ok_or_else(|| missing("f_E"))?;
            terms.reid_e = Some(self.reid_loss(g, Branch::Feb, f_e, labels, w)?);
            if sw.cl {
                let teacher = g.tape.detach(f_e);
                terms.cl = Some(consistent_loss(&mut g.tape, bundle.f_g, teacher)?);
            }
        }
        let (total, breakdown) = total_loss(&mut g.tape, &terms, w);
        Ok((total, breakdown, terms))
    }

    /// Whether `tag` can be computed by this model.
    pub fn supports(&self, tag: FeatureTag) -> Result<()> {
        let sw = self.config.switches;
        let ok = match tag {
            FeatureTag::G => true,
            FeatureTag::P | FeatureTag::V => sw.sab && self.params.contains(SAB_PROJ),
            FeatureTag::F | FeatureTag::E => sw.feb,
        };
        if ok {
            Ok(())
        } else if self.config.mb_only {
            Err(Error::Capability(format!("feature {tag} needs pose-guided branches stripped from this main-branch-only checkpoint")))
        } else {
            Err(Error::Capability(format!("feature {tag} needs a branch this model was not built with")))
        }
    }

    /// Matching feature for `tag` in inference mode. `heatmaps` is only
    /// read for tags other than `G`.
    pub fn embed(&self, g: &mut Graph<'_, T>, images: Var, heatmaps: Option<Var>, tag: FeatureTag, post_bnneck: bool) -> Result<Var> {
        self.supports(tag)?;
        if tag == FeatureTag::G {
            let (_, f_g) = self.forward_main(g, images)?;
            return if post_bnneck { Ok(self.head(g, Branch::MbHead, f_g)?.0) } else { Ok(f_g) };
        }
        let (sab, feb) = (matches!(tag, FeatureTag::P | FeatureTag::V), matches!(tag, FeatureTag::F | FeatureTag::E));
        let b = self.forward(g, images, heatmaps, sab, feb)?;
        let pick = |v: Option<Var>| v.ok_or_else(|| Error::Capability(format!("feature {tag} unavailable")));
        Ok(match tag {
            FeatureTag::P => pick(b.f_p)?,
            FeatureTag::F => pick(b.f_f)?,
            FeatureTag::V => {
                let x = pick(self.sab_feature(&b))?;
                if post_bnneck { self.head(g, Branch::Sab, x)?.0 } else { pick(b.f_v)? }
            }
            FeatureTag::E => {
                let x = pick(b.f_e)?;
                if post_bnneck { self.head(g, Branch::Feb, x)?.0 } else { x }
            }
            FeatureTag::G => unreachable!(),
        })
    }

    /// Inference multiply-adds per image for `tag`: convolutions, pooling,
    /// attention, projections and the BN scaling of the matched feature.
    pub fn multiply_adds(&self, tag: FeatureTag) -> u64 {
        let c = self.config.feature_dim() as u64;
        let (h, w) = self.config.feature_size();
        let hw = (h * w) as u64;
        let k = NUM_GROUPS as u64;
        let conv = self.config.backbone.multiply_adds(self.config.image_height, self.config.image_width);
        let gap = hw * c;
        let parts = k * hw * c;
        let attention = 2 * hw * c;
        let projection = k * (c / k) * c + c;
        conv + gap
            + match tag {
                FeatureTag::G => c,
                FeatureTag::P => parts + projection,
                FeatureTag::V => parts + projection + c + c,
                FeatureTag::F => parts + attention,
                FeatureTag::E => parts + attention + c + c,
            }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            a.switches().validate().unwrap();
        }
        assert!("model-7".parse::<Ablation>().is_err());
        assert_eq!(Ablation::Baseline.switches(), Switches::default());
        assert!(Switches { cl: true, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mb_only_export_matches_baseline_size() {
        let full = Model::<f32>::new(ModelConfig::default(), &mut stream(1, &[])).unwrap();
        let base = Model::<f32>::new(ModelConfig { switches: Switches::default(), ..Default::default() }, &mut stream(1, &[])).unwrap();
        let mb = full.export_mb_only();
        assert_eq!(mb.params.trainable_count(), base.params.trainable_count());
        assert!(mb.params.trainable_count() < full.params.trainable_count());
        assert_eq!(mb.multiply_adds(FeatureTag::G), base.multiply_adds(FeatureTag::G));
        for tag in [FeatureTag::P, FeatureTag::V, FeatureTag::F, FeatureTag::E] {
            assert!(matches!(mb.supports(tag), Err(Error::Capability(_))));
        }
    }
}
