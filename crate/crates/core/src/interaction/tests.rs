use super::*;
use crate::scene::{generate_scene, SceneSpec};
use proptest::prelude::*;

fn line_scene(xs: &[f64], labels: Vec<usize>, num_objects: usize) -> LabeledScene {
    let points = xs.iter().map(|&x| [x, 0.0, 0.0, 0.5, 0.5, 0.5]).collect();
    LabeledScene::new(points, labels, num_objects).unwrap()
}

fn prepared(seed: u64, n: usize) -> PreparedScene {
    let spec = SceneSpec {
        num_points: n,
        ..SceneSpec::default()
    };
    PreparedScene::new(generate_scene(&spec, seed).unwrap(), 8)
}

/// Exhaustive reference: components by repeated pairwise scans.
fn brute_next_click(pred: &[usize], scene: &LabeledScene, radius: f64) -> Option<Click> {
    let n = scene.len();
    let wrong: Vec<usize> = (0..n).filter(|&i| pred[i] != scene.labels[i]).collect();
    let d2 = |a: usize, b: usize| {
        let (p, q) = (scene.xyz(a), scene.xyz(b));
        (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()
    };
    let mut seen = vec![false; n];
    let mut comps: Vec<(usize, Vec<usize>)> = Vec::new();
    for &s in &wrong {
        if seen[s] {
            continue;
        }
        let label = scene.labels[s];
        let mut comp = vec![s];
        seen[s] = true;
        let mut grew = true;
        while grew {
            grew = false;
            for &t in &wrong {
                if !seen[t] && scene.labels[t] == label && comp.iter().any(|&c| d2(c, t) <= radius * radius) {
                    seen[t] = true;
                    comp.push(t);
                    grew = true;
                }
            }
        }
        comp.sort_unstable();
        comps.push((label, comp));
    }
    let best = comps
        .into_iter()
        .min_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)).then(a.1[0].cmp(&b.1[0])))?;
    let mut c = [0.0; 3];
    for &i in &best.1 {
        for k in 0..3 {
            c[k] += scene.xyz(i)[k];
        }
    }
    let c = c.map(|v| v / best.1.len() as f64);
    let mut pick = best.1[0];
    let mut pd = f64::INFINITY;
    for &i in &best.1 {
        let p = scene.xyz(i);
        let d = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
        if d < pd {
            pd = d;
            pick = i;
        }
    }
    Some(Click::new(pick, best.0))
}

#[test]
fn center_click_symmetric_cube() {
    let mut pts = vec![[0.0, 0.0, 0.0, 0.1, 0.1, 0.1]];
    for x in [-1.0, 1.0] {
        for y in [-1.0, 1.0] {
            for z in [-1.0, 1.0] {
                pts.push([x, y, z, 0.1, 0.1, 0.1]);
            }
        }
    }
    pts.push([5.0, 5.0, 5.0, 0.1, 0.1, 0.1]);
    let mut labels = vec![1; 9];
    labels.push(0);
    let s = LabeledScene::new(pts, labels, 1).unwrap();
    assert_eq!(center_click(&s, 1).unwrap(), Click::new(0, 1));
}

#[test]
fn center_click_tie_goes_to_lower_index() {
    let s = line_scene(&[1.0, 0.0, 9.0], vec![1, 1, 0], 1);
    assert_eq!(center_click(&s, 1).unwrap(), Click::new(0, 1));
}

#[test]
fn center_click_l_shape_matches_exhaustive_search() {
    let mut pts = Vec::new();
    for i in 0..6 {
        pts.push([i as f64 * 0.1, 0.0, 0.0, 0.2, 0.2, 0.2]);
    }
    for j in 1..6 {
        pts.push([0.0, j as f64 * 0.1, 0.0, 0.2, 0.2, 0.2]);
    }
    let n = pts.len();
    let s = LabeledScene::new(pts.clone(), vec![1; n], 1).unwrap();
    let cx: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let best = (0..n)
        .min_by(|&a, &b| {
            let da = (pts[a][0] - cx).powi(2) + (pts[a][1] - cy).powi(2);
            let db = (pts[b][0] - cx).powi(2) + (pts[b][1] - cy).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    assert_eq!(center_click(&s, 1).unwrap().point_index, best);
}

#[test]
fn center_click_of_missing_object_errors() {
    let s = line_scene(&[0.0, 1.0], vec![0, 1], 1);
    assert!(center_click(&s, 2).is_err());
}

#[test]
fn single_wrong_point() {
    let s = line_scene(&[0.0, 1.0, 2.0], vec![0, 1, 1], 1);
    let c = next_click(&[0, 0, 1], &s, 0.5).unwrap().unwrap();
    assert_eq!(c, Click::new(1, 1));
    assert_eq!(next_click(&[0, 1, 1], &s, 0.5).unwrap(), None);
}

#[test]
fn larger_blob_wins() {
    // blob of 5 (label 1) at x = 0..0.4, blob of 3 (label 2) at x = 10..10.2
    let mut xs: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
    xs.extend((0..3).map(|i| 10.0 + i as f64 * 0.1));
    xs.push(20.0);
    let mut labels = vec![1; 5];
    labels.extend([2; 3]);
    labels.push(0);
    let s = line_scene(&xs, labels, 2);
    let pred = vec![0; 9];
    let c = next_click(&pred, &s, 0.15).unwrap().unwrap();
    assert_eq!(c, Click::new(2, 1));
    assert_eq!(brute_next_click(&pred, &s, 0.15), Some(c));
}

#[test]
fn equal_blobs_prefer_smaller_label() {
    let xs = [10.0, 10.1, 0.0, 0.1, 30.0];
    let s = line_scene(&xs, vec![2, 2, 1, 1, 0], 2);
    let c = next_click(&[0; 5], &s, 0.15).unwrap().unwrap();
    assert_eq!(c.object_id, 1);
}

#[test]
fn mask_length_mismatch() {
    let s = line_scene(&[0.0, 1.0], vec![0, 1], 1);
    assert!(next_click(&[0], &s, 1.0).is_err());
}

fn random_mask(scene: &LabeledScene, seed: u64, flip: f64) -> Vec<usize> {
    let mut rng = SeedTree::new(seed).rng();
    scene
        .labels
        .iter()
        .map(|&l| {
            if rng.random_bool(flip) {
                rng.random_range(0..=scene.num_objects)
            } else {
                l
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn next_click_matches_brute_force(scene_seed in 0u64..1000, mask_seed: u64, flip in 0.0f64..0.6) {
        let scene = prepared(scene_seed, 256);
        let pred = random_mask(&scene.scene, mask_seed, flip);
        let radius = SimConfig::default().radius(&scene);
        let fast = next_click(&pred, &scene.scene, radius).unwrap();
        prop_assert_eq!(fast, brute_next_click(&pred, &scene.scene, radius));
        if let Some(c) = fast {
            prop_assert_ne!(pred[c.point_index], scene.scene.labels[c.point_index]);
            prop_assert_eq!(c.object_id, scene.scene.labels[c.point_index]);
        }
    }

    #[test]
    fn noc_is_monotone_in_threshold(curve in prop::collection::vec(0.0f64..=1.0, 1..20), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(compute_noc(&curve, lo, 20).unwrap() <= compute_noc(&curve, hi, 20).unwrap());
    }
}

#[test]
fn training_clicks_without_iterations_never_call_the_model() {
    let scene = prepared(3, 256);
    let sim = SimConfig {
        max_iter_clicks: 0,
        ..SimConfig::default()
    };
    let clicks = simulate_training_clicks(&scene, |_| panic!("model called"), &sim, &mut SeedTree::new(1).rng()).unwrap();
    assert!(clicks.len() >= scene.scene.num_objects);
}

#[test]
fn training_clicks_are_seeded_and_bounded() {
    let sim = SimConfig::default();
    for seed in 0..30 {
        let scene = prepared(seed, 256);
        let m = scene.scene.num_objects;
        let all_bg = |_: &ClickSet| Ok(vec![0; 256]);
        let a = simulate_training_clicks(&scene, all_bg, &sim, &mut SeedTree::new(seed).rng()).unwrap();
        let b = simulate_training_clicks(&scene, all_bg, &sim, &mut SeedTree::new(seed).rng()).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = sim.init_clicks;
        assert!(a.len() >= m * lo && a.len() <= m * hi + 1 + sim.max_iter_clicks, "{}", a.len());
        for c in &a {
            if c.object_id != 0 {
                assert_eq!(scene.scene.labels[c.point_index], c.object_id);
            }
        }
    }
}

#[test]
fn iou_examples() {
    assert_eq!(compute_iou(&[1, 1, 0, 0], &[1, 0, 0, 0], 1).unwrap(), 0.5);
    assert_eq!(compute_iou(&[2, 1, 0], &[2, 1, 0], 1).unwrap(), 1.0);
    assert_eq!(compute_iou(&[1, 1, 0], &[0, 0, 1], 1).unwrap(), 0.0);
    assert_eq!(compute_iou(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
    assert!(compute_iou(&[0], &[0, 1], 1).is_err());
}

#[test]
fn noc_examples() {
    assert_eq!(compute_noc(&[0.5, 0.82, 0.9], 0.8, 20).unwrap(), 2);
    assert_eq!(compute_noc(&[0.1; 20], 0.8, 20).unwrap(), 20);
    assert_eq!(compute_noc(&[0.95], 0.9, 20).unwrap(), 1);
    assert!(compute_noc(&[], 0.9, 20).is_err());
}

fn episode(curve: &[f64], budget: usize) -> EpisodeRecord {
    EpisodeRecord {
        rounds: curve
            .iter()
            .map(|&v| RoundRecord {
                clicks: vec![],
                object_iou: vec![v],
                mean_iou: v,
                mean_uncertainty: 0.0,
            })
            .collect(),
        budget,
        converged: curve.len() < budget,
    }
}

#[test]
fn aggregate_examples() {
    let curve: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    let r = aggregate_metrics(&[episode(&curve, 20)]).unwrap();
    for k in IOU_KS {
        assert_eq!(r.iou(k).unwrap(), curve[k - 1]);
    }
    assert_eq!(r.noc(0.8).unwrap(), 16.0);

    let mut a = vec![0.0; 20];
    a[4] = 0.8;
    let mut b = vec![0.0; 20];
    b[4] = 1.0;
    let r = aggregate_metrics(&[episode(&a, 20), episode(&b, 20)]).unwrap();
    assert!((r.iou(5).unwrap() - 0.9).abs() < 1e-15);

    let r = aggregate_metrics(&[episode(&[0.7, 1.0], 20)]).unwrap();
    assert_eq!(r.iou(5).unwrap(), 1.0);
    assert_eq!(r.iou(15).unwrap(), 1.0);
    assert_eq!(r.noc(0.9).unwrap(), 2.0);

    assert!(aggregate_metrics(&[]).is_err());
}

#[test]
fn report_json_uses_fixed_keys() {
    let r = aggregate_metrics(&[episode(&[0.5, 0.9, 0.95], 3)]).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    assert_eq!(v["iou_at"]["3"], 0.95);
    assert!(v["iou_at"].get("5").is_none());
    assert_eq!(v["noc_at"]["0.85"], 2.0);
    assert_eq!(v["noc_at"]["0.9"], 2.0);
    assert_eq!(v["noc_at"]["0.8"], 2.0);
}

#[test]
fn perfect_predictor_converges_after_one_round() {
    let scene = prepared(5, 256);
    let gt = scene.scene.labels.clone();
    let rec = run_episode_with(&scene, &SimConfig::default(), |_, _| Ok((gt.clone(), 0.0))).unwrap();
    assert_eq!(rec.rounds.len(), 1);
    assert!(rec.converged);
    assert_eq!(rec.rounds[0].mean_iou, 1.0);
    assert_eq!(rec.iou_curve(), vec![1.0; 20]);
}

#[test]
fn episode_clicks_are_unique_and_budgeted() {
    let scene = prepared(6, 256);
    let sim = SimConfig {
        budget: 6,
        ..SimConfig::default()
    };
    // a predictor that never changes its mind
    let rec = run_episode_with(&scene, &sim, |_, _| Ok((vec![0; 256], 0.5))).unwrap();
    assert!(rec.rounds.len() <= sim.budget);
    let clicks: Vec<Click> = rec.clicks().copied().collect();
    let unique: HashSet<(usize, usize)> = clicks.iter().map(|c| (c.point_index, c.object_id)).collect();
    assert_eq!(unique.len(), clicks.len());
    for m in 0..=scene.scene.num_objects {
        assert!(clicks.iter().filter(|c| c.object_id == m).count() <= sim.budget);
    }
    assert_eq!(rec.rounds[0].clicks.len(), scene.scene.num_objects);
}

#[test]
fn model_episode_is_deterministic() {
    let scene = prepared(7, 128);
    let model = Model::init(
        crate::model::ModelConfig {
            feature_dim: 8,
            hidden_dim: 8,
            scene_tokens: 16,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let sim = SimConfig {
        budget: 3,
        ..SimConfig::default()
    };
    let a = run_episode(&model, &scene, &sim, &mut SeedTree::new(1).rng()).unwrap();
    let b = run_episode(&model, &scene, &sim, &mut SeedTree::new(1).rng()).unwrap();
    assert_eq!(a, b);
    let (r1, _) = evaluate(&model, std::slice::from_ref(&scene), &sim, 4).unwrap();
    let (r2, _) = evaluate(&model, std::slice::from_ref(&scene), &sim, 4).unwrap();
    assert_eq!(r1, r2);
}
