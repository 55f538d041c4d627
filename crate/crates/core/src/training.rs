//! Objective, optimisation loop and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::interaction::{simulate_training_clicks, SimConfig};
use crate::model::encoder::PreparedScene;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{forward_infer, forward_train, Click, ClickSet, LossComponents, Model, ModelConfig, TrainPass};
use crate::nn::Activation;
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;
use crate::rng::SeedTree;
use crate::scene::SceneSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate factor applied from `decay_epoch()` on.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub scene_spec: SceneSpec,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 5e-4,
            lr_decay: 0.1,
            batch_size: 4,
            kl_weight: 0.005,
            ce_weight: 1.0,
            dice_weight: 2.0,
            seed: 0,
            train_scenes: 200,
            scene_spec: SceneSpec::default(),
            sim: SimConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The long schedule: 600 epochs, batch 5, decay after epoch 500.
    pub fn full_scale() -> Self {
        Self {
            epochs: 600,
            batch_size: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("kl_weight", self.kl_weight),
            ("ce_weight", self.ce_weight),
            ("dice_weight", self.dice_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        self.sim.validate()
    }

    /// First epoch (0-based) trained at the decayed rate.
    pub fn decay_epoch(&self) -> usize {
        self.epochs * 5 / 6
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

fn check_kl(c: &LossComponents) -> Result<()> {
    // tiny negatives are rounding in the closed form
    if c.kl_scene < -1e-12 || c.kl_objects < -1e-12 {
        return Err(Error::InvalidDistribution(format!(
            "negative KL (scene {}, objects {})",
            c.kl_scene, c.kl_objects
        )));
    }
    Ok(())
}

/// `w_ce * ce + w_dice * dice + lambda * (kl_scene + kl_objects)`.
pub fn assemble_loss(c: &LossComponents, cfg: &TrainConfig) -> Result<f64> {
    check_kl(c)?;
    let total = cfg.ce_weight * c.ce + cfg.dice_weight * c.dice + cfg.kl_weight * (c.kl_scene + c.kl_objects);
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    Ok(total)
}

/// Graph version of [`assemble_loss`].
pub fn assemble_loss_var(g: &mut Graph, pass: &TrainPass, cfg: &TrainConfig) -> Result<Var> {
    check_kl(&pass.components)?;
    let ce = g.scale(pass.ce, cfg.ce_weight);
    let dice = g.scale(pass.dice, cfg.dice_weight);
    let kl = g.add(pass.kl_scene, pass.kl_objects);
    let kl = g.scale(kl, cfg.kl_weight);
    let seg = g.add(ce, dice);
    Ok(g.add(seg, kl))
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_dice: f64,
    /// Scene plus object KL.
    pub mean_kl: f64,
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss,mean_ce,mean_dice,mean_kl\n");
    for e in history {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.mean_loss, e.mean_ce, e.mean_dice, e.mean_kl);
    }
    s
}

pub fn write_loss_csv(history: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub loss_history: Vec<EpochLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, StoredTensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        let params = model
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params,
            meta,
        }
    }

    /// Rebuild the model, checking names and shapes against the config.
    pub fn to_model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.config.validate()?;
        let mut store = ParamStore::new(self.meta.seed);
        for (name, t) in &self.params {
            let tensor = Tensor::new(t.shape.clone(), t.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            if !tensor.all_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
            store.insert(name, tensor);
        }
        Model::validate_params(&self.config, &store)?;
        Ok(Model {
            config: self.config.clone(),
            params: store,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(ckpt)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read and validate a checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.to_model()?;
    Ok(ckpt)
}

/// Train `model` on `scenes` and return the final checkpoint.
pub fn train_run(cfg: &TrainConfig, model: Model, scenes: &[PreparedScene]) -> Result<Checkpoint> {
    train_run_with(cfg, model, scenes, |_| {})
}

/// [`train_run`] reporting each finished epoch to `on_epoch`.
///
/// Every epoch visits the scenes in a seeded random order. Each scene gets
/// simulated clicks (corrective ones come from the current model), one
/// training pass, and gradients averaged over the batch before an Adam step.
pub fn train_run_with<F>(cfg: &TrainConfig, mut model: Model, scenes: &[PreparedScene], mut on_epoch: F) -> Result<Checkpoint>
where
    F: FnMut(&EpochLoss),
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Empty("no training scenes".into()));
    }
    let root = SeedTree::new(cfg.seed).child("train");
    let mut adam = AdamState::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    model.params.zero_grads();

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut root.child("shuffle").index(epoch as u64).rng());
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grads();
            for &i in batch {
                let scene = &scenes[i];
                let node = root.child("step").index(epoch as u64).index(i as u64);
                let mut sim_rng = node.child("clicks").rng();
                let mut infer_rng = node.child("infer").rng();
                let mut last_mask = None;
                let clicks = simulate_training_clicks(
                    scene,
                    |c| {
                        let mask = forward_infer(&model, scene, c, None, &mut infer_rng)?.mask;
                        last_mask = Some(mask.clone());
                        Ok(mask)
                    },
                    &cfg.sim,
                    &mut sim_rng,
                )?;
                let prev = if model.config.use_prev_mask { last_mask.as_deref() } else { None };
                let mut g = Graph::new();
                let pass = forward_train(&mut g, &model, scene, &clicks, prev, &mut node.child("latent").rng())
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, scene: i },
                        other => other,
                    })?;
                let loss = assemble_loss_var(&mut g, &pass, cfg)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, scene: i });
                }
                g.backward_into(loss, &mut model.params, 1.0 / batch.len() as f64)?;
                let c = pass.components;
                sums[0] += value;
                sums[1] += c.ce;
                sums[2] += c.dice;
                sums[3] += c.kl_scene + c.kl_objects;
            }
            adam_step(&mut model.params, &mut adam)?;
        }
        let n = scenes.len() as f64;
        let e = EpochLoss {
            epoch,
            mean_loss: sums[0] / n,
            mean_ce: sums[1] / n,
            mean_dice: sums[2] / n,
            mean_kl: sums[3] / n,
        };
        on_epoch(&e);
        history.push(e);
    }
    model.params.zero_grads();
    Ok(Checkpoint::from_model(
        &model,
        CheckpointMeta {
            epochs: cfg.epochs,
            seed: cfg.seed,
            train: Some(cfg.clone()),
            loss_history: history,
        },
    ))
}

/// Finite-difference check of the full training loss on a small instance:
/// `feature_dim`-wide tanh model, one scene of `num_points` points and two
/// objects, one click per label, every parameter redrawn from `N(0, 0.4^2)`
/// and the latent noise frozen.
pub fn loss_grad_check(feature_dim: usize, num_points: usize, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let spec = SceneSpec {
        num_points,
        min_objects: 2,
        max_objects: 2,
        ..SceneSpec::default()
    };
    let config = ModelConfig {
        feature_dim,
        hidden_dim: 2 * feature_dim,
        knn: 8,
        scene_tokens: 16,
        mc_samples: 4,
        activation: Activation::Tanh,
        ..ModelConfig::default()
    };
    let root = SeedTree::new(seed).child("gradcheck");
    let scene = PreparedScene::new(crate::scene::generate_scene(&spec, root.child("scene").key())?, config.knn);
    let mut model = Model::init(config, root.child("init").key())?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let shape = model.params.get(&name).expect("listed").shape().to_vec();
        let t = model.params.normal(&format!("redraw/{name}"), &shape, 0.4);
        model.params.insert(&name, t);
    }
    let clicks: ClickSet = (0..=scene.scene.num_objects)
        .map(|m| Click::new(scene.scene.object_points(m)[0], m))
        .collect();
    let cfg = TrainConfig::default();
    let noise = root.child("noise");
    grad_check(
        |params, g| {
            let m = Model {
                config: model.config.clone(),
                params: params.clone(),
            };
            let pass = forward_train(g, &m, &scene, &clicks, None, &mut noise.rng())?;
            assemble_loss_var(g, &pass, &cfg)
        },
        &model.params,
        1e-4,
        max_coords,
        seed,
    )
}

/// Prepare scenes for training or evaluation with the model's neighbourhood size.
pub fn prepare_scenes(scenes: Vec<crate::scene::LabeledScene>, config: &ModelConfig) -> Vec<PreparedScene> {
    use rayon::prelude::*;
    scenes.into_par_iter().map(|s| PreparedScene::new(s, config.knn)).collect()
}
