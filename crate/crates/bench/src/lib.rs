//! Fixtures shared by the benchmarks.

use npiseg_core::model::encoder::PreparedScene;
use npiseg_core::model::{Click, ClickSet, Model, ModelConfig};
use npiseg_core::{generate_scene, SceneSpec};

/// A default-sized scene prepared for `config`.
pub fn scene(config: &ModelConfig, num_points: usize, seed: u64) -> PreparedScene {
    let spec = SceneSpec {
        num_points,
        ..SceneSpec::default()
    };
    PreparedScene::new(generate_scene(&spec, seed).expect("scene"), config.knn)
}

/// `per_object` clicks on every object and one on the background.
pub fn clicks(scene: &PreparedScene, per_object: usize) -> ClickSet {
    let s = &scene.scene;
    let mut out = ClickSet::new();
    out.push(Click::new(s.object_points(0)[0], 0));
    for m in 1..=s.num_objects {
        for &p in s.object_points(m).iter().step_by(3).take(per_object) {
            out.push(Click::new(p, m));
        }
    }
    out
}

pub fn model(config: ModelConfig) -> Model {
    Model::init(config, 0).expect("model")
}
