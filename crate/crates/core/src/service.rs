//! Click-and-refine sessions over a frozen model.
//!
//! Transport-agnostic: the HTTP layer lives in the CLI crate and maps
//! [`ServiceError::status`] onto response codes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::interaction::compute_iou;
use crate::model::encoder::PreparedScene;
use crate::model::{forward_infer, Click, ClickSet, Model, PredictionBundle};
use crate::rng::SeedTree;
use crate::scene::{parse_scene, read_scene, LabeledScene};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    InvalidClick(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    /// HTTP status code for this error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict(_) => 409,
            ServiceError::InvalidClick(_) => 422,
            ServiceError::Internal(_) => 500,
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidClick { .. } => ServiceError::InvalidClick(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

/// Body of a session-creation request: a registered scene id or an inline
/// `NPSC1` document, exactly one of them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub scene_id: Option<String>,
    #[serde(default)]
    pub scene: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub num_points: usize,
    pub num_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: String,
    pub num_points: usize,
    pub num_objects: usize,
}

/// What the client renders after each click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mask: Vec<usize>,
    pub uncertainty: Vec<f64>,
    pub u_min: f64,
    pub u_max: f64,
    /// IoU of objects `1..=M`, keyed by id; `null` for unlabelled scenes.
    pub iou_per_object: Option<BTreeMap<String, f64>>,
}

impl Prediction {
    fn from_bundle(bundle: PredictionBundle, scene: &LabeledScene) -> ServiceResult<Self> {
        let u_min = bundle.uncertainty.iter().copied().fold(f64::INFINITY, f64::min);
        let u_max = bundle.uncertainty.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let iou_per_object = if scene.num_objects > 0 {
            let mut m = BTreeMap::new();
            for k in 1..=scene.num_objects {
                m.insert(k.to_string(), compute_iou(&bundle.mask, &scene.labels, k)?);
            }
            Some(m)
        } else {
            None
        };
        Ok(Self {
            mask: bundle.mask,
            uncertainty: bundle.uncertainty,
            u_min,
            u_max,
            iou_per_object,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub scene_id: Option<String>,
    pub clicks: Vec<Click>,
    pub prediction: Option<Prediction>,
}

struct Session {
    scene_id: Option<String>,
    scene: Arc<PreparedScene>,
    clicks: ClickSet,
    /// Prediction after each click, so undo is a pop.
    predictions: Vec<Prediction>,
}

/// Registry of scenes and live sessions.
///
/// Every recomputation draws its latent samples from the same seed, so a
/// session's state depends only on its click history. Operations on one
/// session are serialised by its own lock; different sessions proceed in
/// parallel over the shared model.
pub struct SessionManager {
    model: Arc<Model>,
    seed: u64,
    scenes: RwLock<BTreeMap<String, Arc<PreparedScene>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model: Arc::new(model),
            seed,
            scenes: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn add_scene(&self, id: impl Into<String>, scene: LabeledScene) {
        let prepared = Arc::new(PreparedScene::new(scene, self.model.config.knn));
        self.scenes.write().unwrap().insert(id.into(), prepared);
    }

    /// Register every `*.npsc` file in `dir` under its file stem.
    pub fn load_scene_dir(&self, dir: impl AsRef<Path>) -> crate::Result<usize> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "npsc"))
            .collect();
        paths.sort();
        for p in &paths {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            self.add_scene(id, read_scene(p)?);
        }
        Ok(paths.len())
    }

    pub fn scenes(&self) -> Vec<SceneInfo> {
        self.scenes
            .read()
            .unwrap()
            .iter()
            .map(|(id, s)| SceneInfo {
                id: id.clone(),
                num_points: s.scene.len(),
                num_objects: s.scene.num_objects,
            })
            .collect()
    }

    pub fn create_session(&self, req: CreateSession) -> ServiceResult<SessionCreated> {
        let (scene_id, scene) = match (req.scene_id, req.scene) {
            (Some(id), None) => {
                let scene = self
                    .scenes
                    .read()
                    .unwrap()
                    .get(&id)
                    .cloned()
                    .ok_or_else(|| ServiceError::NotFound(format!("unknown scene `{id}`")))?;
                (Some(id), scene)
            }
            (None, Some(text)) => {
                let parsed = parse_scene(&text).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
                (None, Arc::new(PreparedScene::new(parsed, self.model.config.knn)))
            }
            _ => {
                return Err(ServiceError::BadRequest(
                    "give exactly one of `scene_id` and `scene`".into(),
                ))
            }
        };
        let session_id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let created = SessionCreated {
            session_id: session_id.clone(),
            num_points: scene.scene.len(),
            num_objects: scene.scene.num_objects,
        };
        let session = Session {
            scene_id,
            scene,
            clicks: ClickSet::new(),
            predictions: Vec::new(),
        };
        self.sessions
            .write()
            .unwrap()
            .insert(session_id, Arc::new(Mutex::new(session)));
        Ok(created)
    }

    fn session(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session `{id}`")))
    }

    pub fn add_click(&self, id: &str, click: Click) -> ServiceResult<Prediction> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        let n = s.scene.scene.len();
        if click.point_index >= n {
            return Err(ServiceError::InvalidClick(format!(
                "point_index {} out of range for {n} points",
                click.point_index
            )));
        }
        let mut clicks = s.clicks.clone();
        clicks.push(click);
        let prev = if self.model.config.use_prev_mask {
            s.predictions.last().map(|p| p.mask.clone())
        } else {
            None
        };
        let mut rng = SeedTree::new(self.seed).child("session").rng();
        let bundle = forward_infer(&self.model, &s.scene, &clicks, prev.as_deref(), &mut rng)?;
        let prediction = Prediction::from_bundle(bundle, &s.scene.scene)?;
        s.clicks = clicks;
        s.predictions.push(prediction.clone());
        Ok(prediction)
    }

    /// Drop the last click. Returns the restored prediction, `None` once the
    /// history is empty again.
    pub fn undo(&self, id: &str) -> ServiceResult<Option<Prediction>> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        if s.clicks.pop().is_none() {
            return Err(ServiceError::Conflict("nothing to undo".into()));
        }
        s.predictions.pop();
        Ok(s.predictions.last().cloned())
    }

    pub fn get_session(&self, id: &str) -> ServiceResult<SessionSnapshot> {
        let session = self.session(id)?;
        let s = session.lock().unwrap();
        Ok(SessionSnapshot {
            session_id: id.to_string(),
            scene_id: s.scene_id.clone(),
            clicks: s.clicks.as_slice().to_vec(),
            prediction: s.predictions.last().cloned(),
        })
    }
}
