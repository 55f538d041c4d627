//! Inference and training passes.
//!
//! Objects are processed in a canonical order that depends only on where
//! they were clicked (background first, then by smallest clicked point
//! index), and each object's latent noise is keyed the same way. Renaming
//! objects or reordering clicks therefore changes nothing but the output ids.

use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gaussian::{standard_noise, Gaussian, GaussianVar};
use crate::loss::DICE_SMOOTH;
use crate::model::encoder::{encode_points, Encoded, PreparedScene};
use crate::model::head::{predict, score, PredictionBundle};
use crate::model::latent::{object_latent, scene_latent, Side};
use crate::model::modulate::modulate;
use crate::model::{ClickSet, Model, Modulation, PrototypeAggregation, MAX_OBJECT_ID};
use crate::rng::{Rng, SeedTree};
use crate::tensor::Tensor;

/// Values of the loss terms of one training pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub ce: f64,
    pub dice: f64,
    pub kl_scene: f64,
    /// Summed over the clicked objects.
    pub kl_objects: f64,
}

/// Scalar loss terms of a training pass, still attached to their graph.
#[derive(Debug, Clone, Copy)]
pub struct TrainPass {
    pub ce: Var,
    pub dice: Var,
    pub kl_scene: Var,
    pub kl_objects: Var,
    pub components: LossComponents,
}

struct Noise {
    root: SeedTree,
}

impl Noise {
    fn draw(rng: &mut Rng) -> Self {
        Self {
            root: SeedTree::new(rng.random::<u64>()),
        }
    }

    fn scene(&self, d: usize) -> Tensor {
        standard_noise(1, d, &mut self.root.child("scene").rng())
    }

    fn object(&self, key: u64, samples: usize, d: usize) -> Tensor {
        standard_noise(samples, d, &mut self.root.child("object").index(key).rng())
    }
}

/// Per-object key: smallest clicked point index, background fixed.
fn object_keys(clicks: &ClickSet, num_objects: usize) -> Vec<u64> {
    let mut keys = vec![u64::MAX; num_objects + 1];
    for c in clicks {
        if c.object_id != 0 {
            keys[c.object_id] = keys[c.object_id].min(c.point_index as u64);
        }
    }
    keys
}

fn object_order(enc: &Encoded, keys: &[u64]) -> Vec<usize> {
    let mut order = enc.present();
    order.sort_by_key(|&m| (m != 0, keys[m], m));
    order
}

/// Prototype statistics of the objects in `order`.
struct Summary {
    /// `G x d` mean prototype per object.
    means: Var,
    /// `1 x d` mean of `means`.
    scene_mean: Var,
    /// `G x d` input to the object prior (sum or mean of prototypes).
    aggregates: Var,
}

fn summarize(g: &mut Graph, model: &Model, enc: &Encoded, order: &[usize]) -> Summary {
    let groups: Vec<Vec<usize>> = order.iter().map(|&m| enc.groups[m].clone()).collect();
    let means = g.row_group_mean(enc.prototypes, groups.clone());
    let scene_mean = g.mean_rows(means);
    let aggregates = match model.config.prototype_aggregation {
        PrototypeAggregation::Sum => {
            let w = vec![1.0; groups.len()];
            g.row_group_sum(enc.prototypes, groups, w)
        }
        PrototypeAggregation::Mean => means,
    };
    Summary {
        means,
        scene_mean,
        aggregates,
    }
}

fn uses_object_latent(model: &Model) -> bool {
    model.config.use_object_latent && model.config.modulation != Modulation::Deterministic
}

fn repeat_rows(g: &mut Graph, dist: &GaussianVar, rows: usize, samples: usize) -> GaussianVar {
    let idx = (0..rows).flat_map(|r| std::iter::repeat_n(r, samples)).collect();
    dist.select(g, idx)
}

fn stacked_noise(noise: &Noise, order: &[usize], keys: &[u64], samples: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(order.len() * samples * d);
    for &m in order {
        data.extend(noise.object(keys[m], samples, d).into_data());
    }
    Tensor::matrix(order.len() * samples, d, data)
}

/// Number of object slots for a scene and click set, after validating ids.
fn object_slots(scene: &PreparedScene, clicks: &ClickSet) -> Result<usize> {
    let limit = scene.scene.num_objects.max(MAX_OBJECT_ID);
    if let Some(c) = clicks.iter().find(|c| c.object_id > limit) {
        return Err(Error::InvalidClick {
            point_index: c.point_index,
            object_id: c.object_id,
            reason: format!("object ids are limited to 0..={limit}"),
        });
    }
    Ok(scene.scene.num_objects.max(clicks.max_object().unwrap_or(0)))
}

/// Predict a mask and uncertainty map from clicks, sampling latents from the priors.
///
/// The scene latent is sampled once and shared by all objects; each object
/// latent is sampled `mc_samples` times. Without the scene latent its sample
/// is zero; without the object latent (or in deterministic mode) each
/// object's mean prototype drives the modulator and a single sample is used.
pub fn forward_infer(
    model: &Model,
    scene: &PreparedScene,
    clicks: &ClickSet,
    prev_mask: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<PredictionBundle> {
    infer_with_latents(model, scene, clicks, prev_mask, rng).map(|(b, _)| b)
}

/// Prior distributions behind one inference pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorLatents {
    /// `None` when the scene latent is disabled or unused.
    pub scene: Option<Gaussian>,
    /// Object id and its latent distribution, in processing order.
    pub objects: Vec<(usize, Gaussian)>,
}

/// [`forward_infer`] that also returns the prior distributions it sampled from.
pub fn infer_with_latents(
    model: &Model,
    scene: &PreparedScene,
    clicks: &ClickSet,
    prev_mask: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<(PredictionBundle, PriorLatents)> {
    let num_objects = object_slots(scene, clicks)?;
    let mut g = Graph::new();
    let enc = encode_points(&mut g, model, scene, clicks, prev_mask, num_objects)?;
    let keys = object_keys(clicks, num_objects);
    let order = object_order(&enc, &keys);
    let d = model.config.feature_dim;
    let noise = Noise::draw(rng);
    let summary = summarize(&mut g, model, &enc, &order);

    let samples = model.config.effective_samples();
    let mut latents = PriorLatents::default();
    let z = if uses_object_latent(model) {
        let z_s = if model.config.use_scene_latent {
            let ps = scene_latent(&mut g, model, Side::Prior, summary.scene_mean, summary.means)?;
            latents.scene = Some(ps.extract(&g, 0));
            ps.sample_with(&mut g, noise.scene(d))
        } else {
            g.constant(Tensor::zeros(&[1, d]))
        };
        let po = object_latent(&mut g, model, Side::Prior, z_s, summary.aggregates)?;
        latents.objects = order.iter().enumerate().map(|(k, &m)| (m, po.extract(&g, k))).collect();
        let rep = repeat_rows(&mut g, &po, order.len(), samples);
        rep.sample_with(&mut g, stacked_noise(&noise, &order, &keys, samples, d))
    } else {
        summary.means
    };
    let modulated = modulate(&mut g, model, &enc, &order, z, samples)?;
    let bundle = predict(&mut g, enc.features, &modulated, num_objects)?;
    g.check_finite()?;
    Ok((bundle, latents))
}

/// Build the training objective for one scene and click set.
///
/// Latents are sampled once each from the posteriors, which read encoder
/// features grouped by the ground-truth labels. The scene KL compares the
/// posterior and the click-conditioned prior; the object KL is summed over
/// the clicked objects, with both object distributions conditioned on the
/// posterior scene sample. Cross-entropy and dice use temperature-scaled
/// logits; objects without clicks get the lowest cosine.
pub fn forward_train(
    g: &mut Graph,
    model: &Model,
    scene: &PreparedScene,
    clicks: &ClickSet,
    prev_mask: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<TrainPass> {
    let labeled = &scene.scene;
    let num_objects = labeled.num_objects;
    if let Some(c) = clicks.iter().find(|c| c.object_id > num_objects) {
        return Err(Error::InvalidClick {
            point_index: c.point_index,
            object_id: c.object_id,
            reason: format!("scene has objects 0..={num_objects}"),
        });
    }
    let enc = encode_points(g, model, scene, clicks, prev_mask, num_objects)?;
    let keys = object_keys(clicks, num_objects);
    let order = object_order(&enc, &keys);
    let d = model.config.feature_dim;
    let noise = Noise::draw(rng);
    let summary = summarize(g, model, &enc, &order);

    let zero = g.constant(Tensor::scalar(0.0));
    let mut kl_scene = zero;
    let mut kl_objects = zero;
    let z = if uses_object_latent(model) {
        let targets: Vec<Vec<usize>> = (0..=num_objects).map(|m| labeled.object_points(m)).collect();
        if let Some(m) = targets.iter().position(|t| t.is_empty()) {
            return Err(Error::Empty(format!("object {m} has no points")));
        }
        let target_means = g.row_group_mean(enc.features, targets);
        let z_s = if model.config.use_scene_latent {
            let scene_mean = g.mean_rows(target_means);
            let qs = scene_latent(g, model, Side::Posterior, scene_mean, target_means)?;
            let ps = scene_latent(g, model, Side::Prior, summary.scene_mean, summary.means)?;
            kl_scene = qs.kl(g, &ps);
            qs.sample_with(g, noise.scene(d))
        } else {
            g.constant(Tensor::zeros(&[1, d]))
        };
        let clicked_means = g.gather_rows(target_means, order.clone());
        let qo = object_latent(g, model, Side::Posterior, z_s, clicked_means)?;
        let po = object_latent(g, model, Side::Prior, z_s, summary.aggregates)?;
        kl_objects = qo.kl(g, &po);
        qo.sample_with(g, stacked_noise(&noise, &order, &keys, 1, d))
    } else {
        summary.means
    };
    let modulated = modulate(g, model, &enc, &order, z, 1)?;
    let head = score(g, enc.features, &modulated)?;

    let mut map = vec![None; num_objects + 1];
    for (k, &m) in order.iter().enumerate() {
        map[m] = Some(k);
    }
    let full = g.scatter_cols(head.logits, map, -1.0);
    let log_temp = g.param(&model.params, "head.log_temp")?;
    let temp = g.exp(log_temp);
    let logits = g.scale_by(full, temp);
    let labels = Arc::new(labeled.labels.clone());
    let ce = g.cross_entropy(logits, labels.clone());
    let probs = g.softmax_rows(logits);
    let dice = g.dice(probs, labels, DICE_SMOOTH);
    g.check_finite()?;

    let components = LossComponents {
        ce: g.value(ce).item(),
        dice: g.value(dice).item(),
        kl_scene: g.value(kl_scene).item(),
        kl_objects: g.value(kl_objects).item(),
    };
    Ok(TrainPass {
        ce,
        dice,
        kl_scene,
        kl_objects,
        components,
    })
}
