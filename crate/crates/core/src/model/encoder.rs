use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::SceneIndex;
use crate::model::{ClickSet, Model, MAX_OBJECT_ID};
use crate::nn::{cross_attention_apply, mlp_apply};
use crate::scene::LabeledScene;
use crate::tensor::Tensor;

/// A scene with its neighbourhood structure and encoder inputs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: LabeledScene,
    pub index: SceneIndex,
    pub inputs: Tensor,
}

impl PreparedScene {
    pub fn new(scene: LabeledScene, knn: usize) -> Self {
        let index = SceneIndex::build(&scene, knn);
        let inputs = index.point_inputs(&scene);
        Self {
            scene,
            index,
            inputs,
        }
    }

    pub fn len(&self) -> usize {
        self.scene.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene.is_empty()
    }
}

/// Encoder output inside a graph.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `N x d` point features.
    pub features: Var,
    /// All prototypes stacked: learned background prototypes first, then one
    /// row per click in click order.
    pub prototypes: Var,
    /// Prototype rows per object id `0..=num_objects`; background prototypes
    /// first, then clicks by point index.
    pub groups: Vec<Vec<usize>>,
}

impl Encoded {
    pub fn num_objects(&self) -> usize {
        self.groups.len() - 1
    }

    /// Object ids with at least one prototype, ascending.
    pub fn present(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&m| !self.groups[m].is_empty()).collect()
    }

    /// Prototype values grouped by object.
    pub fn prototypes(&self, g: &Graph) -> ClickPrototypes {
        let t = g.value(self.prototypes);
        ClickPrototypes {
            per_object: self
                .groups
                .iter()
                .map(|rows| rows.iter().map(|&r| t.row_slice(r).to_vec()).collect())
                .collect(),
        }
    }
}

/// Prototype vectors per object id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickPrototypes {
    pub per_object: Vec<Vec<Vec<f64>>>,
}

/// Means of the prototypes per object and over the present objects.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSummary {
    /// `None` for objects without prototypes.
    pub object_means: Vec<Option<Vec<f64>>>,
    pub scene_mean: Vec<f64>,
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

pub fn summarize_prototypes(protos: &ClickPrototypes) -> Result<PrototypeSummary> {
    let object_means: Vec<Option<Vec<f64>>> = protos
        .per_object
        .iter()
        .map(|rows| (!rows.is_empty()).then(|| mean_of(rows)))
        .collect();
    let present: Vec<Vec<f64>> = object_means.iter().flatten().cloned().collect();
    if present.is_empty() {
        return Err(Error::NoPrototypes);
    }
    Ok(PrototypeSummary {
        scene_mean: mean_of(&present),
        object_means,
    })
}

/// Evenly strided subsample of `n` indices, at most `k` of them.
pub fn scene_token_indices(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

/// Validate clicks against the scene and the id limit.
pub fn check_clicks(clicks: &ClickSet, n: usize, max_object: usize) -> Result<()> {
    for c in clicks {
        if c.point_index >= n {
            return Err(Error::InvalidClick {
                point_index: c.point_index,
                object_id: c.object_id,
                reason: format!("scene has {n} points"),
            });
        }
        if c.object_id > max_object {
            return Err(Error::InvalidClick {
                point_index: c.point_index,
                object_id: c.object_id,
                reason: format!("object ids are limited to 0..={max_object}"),
            });
        }
    }
    Ok(())
}

/// Per-point features and click prototypes.
///
/// Features are an MLP over the precomputed point inputs (plus the embedded
/// previous mask when enabled). Each clicked point's feature attends once to a
/// strided subsample of scene features; the result is its prototype. The
/// learned background prototypes are placed in object 0's group ahead of any
/// background clicks.
pub fn encode_points(
    g: &mut Graph,
    model: &Model,
    scene: &PreparedScene,
    clicks: &ClickSet,
    prev_mask: Option<&[usize]>,
    num_objects: usize,
) -> Result<Encoded> {
    let cfg = &model.config;
    let store = &model.params;
    let n = scene.len();
    check_clicks(clicks, n, num_objects)?;

    let mut input = g.constant(scene.inputs.clone());
    if cfg.use_prev_mask {
        let classes = MAX_OBJECT_ID + 1;
        let mut onehot = vec![0.0; n * classes];
        if let Some(mask) = prev_mask {
            if mask.len() != n {
                return Err(Error::Shape(format!("previous mask has {} entries for {n} points", mask.len())));
            }
            for (i, &l) in mask.iter().enumerate() {
                if l > num_objects.min(MAX_OBJECT_ID) {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        max: num_objects.min(MAX_OBJECT_ID),
                    });
                }
                onehot[i * classes + l] = 1.0;
            }
        }
        let oh = g.constant(Tensor::matrix(n, classes, onehot));
        let emb = mlp_apply(g, store, oh, "enc.prev", 4, cfg.activation)?;
        input = g.concat_cols(&[input, emb]);
    }
    let features = mlp_apply(g, store, input, "enc.mlp", 3, cfg.activation)?;

    let b0 = cfg.background_prototypes;
    let mut parts = Vec::new();
    if b0 > 0 {
        parts.push(g.param(store, "enc.bg")?);
    }
    if !clicks.is_empty() {
        let idx: Vec<usize> = clicks.iter().map(|c| c.point_index).collect();
        let queries = g.gather_rows(features, idx);
        let context = g.gather_rows(features, scene_token_indices(n, cfg.scene_tokens));
        let refined = cross_attention_apply(g, store, queries, context, "enc.attn", cfg.activation)?;
        parts.push(refined.output);
    }
    let mut groups = vec![Vec::new(); num_objects + 1];
    groups[0].extend(0..b0);
    for (k, c) in clicks.iter().enumerate() {
        groups[c.object_id].push(b0 + k);
    }
    // canonical order inside a group, so sums do not depend on click order
    let clicks_slice = clicks.as_slice();
    for rows in &mut groups {
        rows.sort_by_key(|&r| if r < b0 { (0, r) } else { (1, clicks_slice[r - b0].point_index) });
    }
    let prototypes = if parts.is_empty() {
        // nothing to score against; keep an empty-width placeholder out of the graph
        return Err(Error::NoPrototypes);
    } else if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    };
    Ok(Encoded {
        features,
        prototypes,
        groups,
    })
}
