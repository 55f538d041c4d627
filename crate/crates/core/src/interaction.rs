//! Simulated users and segmentation metrics.
//!
//! Evaluation follows a round-robin protocol: the first round clicks the
//! centre of every object, and each later round adds as many corrective
//! clicks as there are objects, each at the centre of the largest remaining
//! error region. IoU@k is the mean object IoU after round `k`.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_to_centroid, radius_components};
use crate::model::encoder::PreparedScene;
use crate::model::{forward_infer, Click, ClickSet, Model};
use crate::rng::{Rng, SeedTree};
use crate::scene::LabeledScene;

pub const IOU_KS: [usize; 6] = [1, 2, 3, 5, 10, 15];
pub const NOC_THRESHOLDS: [f64; 3] = [0.8, 0.85, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Rounds per evaluation episode (clicks per object).
    pub budget: usize,
    /// Inclusive range of random initial clicks per object in training.
    pub init_clicks: (usize, usize),
    /// Upper bound of corrective clicks added during training.
    pub max_iter_clicks: usize,
    /// Error regions link points closer than this many mean NN distances.
    pub radius_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            budget: 20,
            init_clicks: (1, 3),
            max_iter_clicks: 3,
            radius_factor: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("click budget must be >= 1".into()));
        }
        if self.init_clicks.0 == 0 || self.init_clicks.0 > self.init_clicks.1 {
            return Err(Error::Config(format!("bad initial click range {:?}", self.init_clicks)));
        }
        if !(self.radius_factor > 0.0) {
            return Err(Error::Config("radius factor must be positive".into()));
        }
        Ok(())
    }

    pub fn radius(&self, scene: &PreparedScene) -> f64 {
        self.radius_factor * scene.index.mean_nn_distance
    }
}

/// The object's point nearest its centroid.
pub fn center_click(scene: &LabeledScene, object_id: usize) -> Result<Click> {
    let members = scene.object_points(object_id);
    nearest_to_centroid(scene, &members)
        .map(|p| Click::new(p, object_id))
        .ok_or_else(|| Error::Empty(format!("object {object_id} has no points")))
}

/// Click at the centre of the largest misclassified region, labelled with its
/// true object; `None` once the prediction is perfect.
pub fn next_click(pred: &[usize], scene: &LabeledScene, radius: f64) -> Result<Option<Click>> {
    next_click_where(pred, scene, radius, |_| true)
}

/// [`next_click`] restricted to misclassified points accepted by `keep`.
///
/// Errors are split by ground-truth label, each split into connected
/// components of the radius graph. The largest component wins; ties go to
/// the smaller label, then to the component with the smaller point index.
pub fn next_click_where(
    pred: &[usize],
    scene: &LabeledScene,
    radius: f64,
    keep: impl Fn(usize) -> bool,
) -> Result<Option<Click>> {
    if pred.len() != scene.len() {
        return Err(Error::Shape(format!("mask has {} labels for {} points", pred.len(), scene.len())));
    }
    let mut by_label = vec![Vec::new(); scene.num_objects + 1];
    for (i, (&p, &y)) in pred.iter().zip(&scene.labels).enumerate() {
        if p != y && keep(i) {
            by_label[y].push(i);
        }
    }
    let mut best: Option<(usize, Vec<usize>)> = None;
    for (label, members) in by_label.iter().enumerate() {
        for comp in radius_components(scene, members, radius) {
            let better = match &best {
                None => true,
                Some((bl, bc)) => comp.len() > bc.len() || (comp.len() == bc.len() && (label, comp[0]) < (*bl, bc[0])),
            };
            if better {
                best = Some((label, comp));
            }
        }
    }
    Ok(best.map(|(label, comp)| {
        let p = nearest_to_centroid(scene, &comp).expect("component is non-empty");
        Click::new(p, label)
    }))
}

/// Clicks for one training example: random clicks on every object, a
/// background click half the time, then up to `max_iter_clicks` corrective
/// clicks from the current model (`predict` maps clicks to a mask).
pub fn simulate_training_clicks<F>(scene: &PreparedScene, mut predict: F, sim: &SimConfig, rng: &mut Rng) -> Result<ClickSet>
where
    F: FnMut(&ClickSet) -> Result<Vec<usize>>,
{
    sim.validate()?;
    let labeled = &scene.scene;
    let mut clicks = ClickSet::new();
    for m in 1..=labeled.num_objects {
        let points = labeled.object_points(m);
        if points.is_empty() {
            return Err(Error::Empty(format!("object {m} has no points")));
        }
        let count = rng.random_range(sim.init_clicks.0..=sim.init_clicks.1).min(points.len());
        for k in sample(rng, points.len(), count) {
            clicks.push(Click::new(points[k], m));
        }
    }
    if rng.random_bool(0.5) {
        let bg = labeled.object_points(0);
        if !bg.is_empty() {
            clicks.push(Click::new(bg[rng.random_range(0..bg.len())], 0));
        }
    }
    let rounds = rng.random_range(0..=sim.max_iter_clicks);
    let radius = sim.radius(scene);
    for _ in 0..rounds {
        let mask = predict(&clicks)?;
        let clicked: HashSet<usize> = clicks.iter().map(|c| c.point_index).collect();
        match next_click_where(&mask, labeled, radius, |i| !clicked.contains(&i))? {
            Some(c) => clicks.push(c),
            None => break,
        }
    }
    Ok(clicks)
}

/// IoU of object `object_id`; 1 when neither mask contains it.
pub fn compute_iou(pred: &[usize], gt: &[usize], object_id: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks of length {} and {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == object_id, g == object_id);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Clicks (1-based) until `curve` first reaches `q`, or `budget` if it never does.
pub fn compute_noc(curve: &[f64], q: f64, budget: usize) -> Result<usize> {
    if curve.is_empty() {
        return Err(Error::Empty("empty IoU curve".into()));
    }
    Ok(curve.iter().position(|&v| v >= q).map_or(budget, |k| k + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub clicks: Vec<Click>,
    /// IoU of objects `1..=M`.
    pub object_iou: Vec<f64>,
    pub mean_iou: f64,
    pub mean_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub rounds: Vec<RoundRecord>,
    pub budget: usize,
    /// Stopped early because nothing was left to correct.
    pub converged: bool,
}

impl EpisodeRecord {
    /// Mean IoU after each of the `budget` rounds, carrying the last value forward.
    pub fn iou_curve(&self) -> Vec<f64> {
        forward_fill(self.rounds.iter().map(|r| r.mean_iou).collect(), self.budget)
    }

    pub fn uncertainty_curve(&self) -> Vec<f64> {
        forward_fill(self.rounds.iter().map(|r| r.mean_uncertainty).collect(), self.budget)
    }

    pub fn clicks(&self) -> impl Iterator<Item = &Click> {
        self.rounds.iter().flat_map(|r| r.clicks.iter())
    }
}

fn forward_fill(mut v: Vec<f64>, len: usize) -> Vec<f64> {
    let last = v.last().copied().unwrap_or(0.0);
    v.resize(len.max(v.len()), last);
    v
}

fn round_record(scene: &LabeledScene, clicks: Vec<Click>, mask: &[usize], mean_uncertainty: f64) -> Result<RoundRecord> {
    let object_iou = (1..=scene.num_objects)
        .map(|m| compute_iou(mask, &scene.labels, m))
        .collect::<Result<Vec<_>>>()?;
    let mean_iou = if object_iou.is_empty() {
        1.0
    } else {
        object_iou.iter().sum::<f64>() / object_iou.len() as f64
    };
    Ok(RoundRecord {
        clicks,
        object_iou,
        mean_iou,
        mean_uncertainty,
    })
}

/// Simulated interactive session on one scene with the model's predictions.
pub fn run_episode(model: &Model, scene: &PreparedScene, sim: &SimConfig, rng: &mut Rng) -> Result<EpisodeRecord> {
    let use_prev = model.config.use_prev_mask;
    run_episode_with(scene, sim, |clicks, prev| {
        let b = forward_infer(model, scene, clicks, if use_prev { prev } else { None }, rng)?;
        let u = b.mean_uncertainty();
        Ok((b.mask, u))
    })
}

/// Simulated interactive session driven by any predictor mapping clicks
/// (and the previous mask) to a mask and its mean uncertainty.
///
/// No point is clicked twice and no object receives more than `budget`
/// clicks; the episode ends early when every point is correct or no eligible
/// error remains.
pub fn run_episode_with<F>(scene: &PreparedScene, sim: &SimConfig, mut predict: F) -> Result<EpisodeRecord>
where
    F: FnMut(&ClickSet, Option<&[usize]>) -> Result<(Vec<usize>, f64)>,
{
    sim.validate()?;
    let labeled = &scene.scene;
    let radius = sim.radius(scene);
    let mut clicks = ClickSet::new();
    let mut per_label = vec![0usize; labeled.num_objects + 1];

    let mut added = Vec::new();
    for m in 1..=labeled.num_objects {
        added.push(center_click(labeled, m)?);
    }
    for c in &added {
        clicks.push(*c);
        per_label[c.object_id] += 1;
    }
    let (mut mask, mut unc) = predict(&clicks, None)?;
    let mut rounds = vec![round_record(labeled, added, &mask, unc)?];
    let mut converged = false;

    while rounds.len() < sim.budget && !converged {
        let mut added = Vec::new();
        for _ in 0..labeled.num_objects.max(1) {
            let clicked: HashSet<usize> = clicks.iter().map(|c| c.point_index).collect();
            let keep = |i: usize| !clicked.contains(&i) && per_label[labeled.labels[i]] < sim.budget;
            let Some(c) = next_click_where(&mask, labeled, radius, keep)? else {
                converged = true;
                break;
            };
            clicks.push(c);
            per_label[c.object_id] += 1;
            added.push(c);
            (mask, unc) = predict(&clicks, Some(&mask))?;
        }
        if added.is_empty() {
            break;
        }
        rounds.push(round_record(labeled, added, &mask, unc)?);
    }
    Ok(EpisodeRecord {
        rounds,
        budget: sim.budget,
        converged,
    })
}

/// Averages over episodes, serialised with fixed keys (`iou_at."5"`, `noc_at."0.8"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub episodes: usize,
    pub budget: usize,
    pub iou_at: BTreeMap<String, f64>,
    pub noc_at: BTreeMap<String, f64>,
    /// Mean IoU after each round.
    pub mean_iou_curve: Vec<f64>,
    pub mean_uncertainty_curve: Vec<f64>,
}

impl MetricReport {
    pub fn iou(&self, k: usize) -> Option<f64> {
        self.iou_at.get(&k.to_string()).copied()
    }

    pub fn noc(&self, q: f64) -> Option<f64> {
        self.noc_at.get(&q.to_string()).copied()
    }
}

fn mean_curves(curves: &[Vec<f64>], len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64)
        .collect()
}

pub fn aggregate_metrics(episodes: &[EpisodeRecord]) -> Result<MetricReport> {
    let first = episodes.first().ok_or_else(|| Error::Empty("no episodes to aggregate".into()))?;
    let budget = first.budget;
    if episodes.iter().any(|e| e.budget != budget) {
        return Err(Error::Config("episodes use different budgets".into()));
    }
    let ious: Vec<Vec<f64>> = episodes.iter().map(EpisodeRecord::iou_curve).collect();
    let uncs: Vec<Vec<f64>> = episodes.iter().map(EpisodeRecord::uncertainty_curve).collect();
    let mean_iou_curve = mean_curves(&ious, budget);
    let mean_uncertainty_curve = mean_curves(&uncs, budget);
    let iou_at = IOU_KS
        .iter()
        .filter(|&&k| k <= budget)
        .map(|&k| (k.to_string(), mean_iou_curve[k - 1]))
        .collect();
    let mut noc_at = BTreeMap::new();
    for q in NOC_THRESHOLDS {
        let mut total = 0.0;
        for c in &ious {
            total += compute_noc(c, q, budget)? as f64;
        }
        noc_at.insert(q.to_string(), total / ious.len() as f64);
    }
    Ok(MetricReport {
        episodes: episodes.len(),
        budget,
        iou_at,
        noc_at,
        mean_iou_curve,
        mean_uncertainty_curve,
    })
}

/// Run one episode per scene (in parallel, each with its own stream) and aggregate.
pub fn evaluate(model: &Model, scenes: &[PreparedScene], sim: &SimConfig, seed: u64) -> Result<(MetricReport, Vec<EpisodeRecord>)> {
    let root = SeedTree::new(seed).child("episode");
    let episodes = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_episode(model, s, sim, &mut root.index(i as u64).rng()))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate_metrics(&episodes)?, episodes))
}

#[cfg(test)]
mod tests;
