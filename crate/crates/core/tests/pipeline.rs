mod common;

use common::*;
use disco_core::clustering::{cluster_triplets, dbscan_triplets, ClusterConfig};
use disco_core::detect::{model_correspondences, ransac_detect, DiscoveryConfig, RansacParams};
use disco_core::matching::{
    generate_triplets, match_descriptors, prune_pairs_ppf, PairRelation, TripletConfig, TripletFilters, TripletMatch,
};
use disco_core::modelgraph::{
    assemble_model, build_graph, bundle_adjust, chain_transforms, select_reference, Landmark, ObjectModel,
};
use disco_core::pipeline::discover;
use disco_core::synth::{generate_scene, pose_error, ObjectSpec, SceneSpec};
use disco_core::{geom, RigidTransform, Vec3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn exact_spec(landmarks: usize, instances: usize, seed: u64) -> SceneSpec {
    let mut spec = SceneSpec::single(landmarks, instances, seed);
    spec.position_noise = 0.0;
    spec.descriptor_noise = 0.0;
    spec.clutter = 0;
    spec
}

fn triplets_of(kps: &[disco_core::frame::Keypoint3D], cfg: &DiscoveryConfig) -> Vec<TripletMatch> {
    let matches = match_descriptors(kps, cfg.desc_thresh);
    let relation = prune_pairs_ppf(&matches, kps, cfg.ppf_dist_tol, cfg.ppf_angle_tol);
    generate_triplets(&matches, &relation, kps, &cfg.triplet_config()).triplets
}

#[test]
fn identical_descriptors_form_one_match_per_landmark() {
    let scene = generate_scene(&exact_spec(10, 2, 1)).unwrap();
    let matches = match_descriptors(&scene.keypoints, 0.25);
    assert_eq!(matches.len(), 10);
    for m in &matches {
        let (a, b) = (scene.labels[m.i].unwrap(), scene.labels[m.j].unwrap());
        assert_eq!(a.landmark, b.landmark);
        assert_ne!(a.instance, b.instance);
    }
}

#[test]
fn accepted_triplets_carry_the_true_relative_pose() {
    let scene = generate_scene(&exact_spec(10, 2, 4)).unwrap();
    let triplets = triplets_of(&scene.keypoints, &DiscoveryConfig::default());
    assert!(!triplets.is_empty());
    for t in &triplets {
        let si = scene.labels[t.src[0]].unwrap().instance;
        let di = scene.labels[t.dst[0]].unwrap().instance;
        let truth = scene.annotations[di]
            .pose
            .compose(&scene.annotations[si].pose.inverse());
        let (r, d) = pose_error(&t.pose, &truth);
        assert!(r.to_radians() < 1e-6 && d < 1e-6, "{r} deg {d} mm");
    }
}

#[test]
fn sign_only_combinations_are_enumerated_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for m in 3..=7usize {
        let kps: Vec<_> = (0..2 * m)
            .map(|k| {
                kp(
                    random_vec(&mut rng, 100.0) + Vec3::new(0., 0., 900.),
                    Vec3::z(),
                    vec![k as f64],
                )
            })
            .collect();
        let matches: Vec<_> = (0..m)
            .map(|i| disco_core::matching::KeypointMatch {
                i,
                j: m + i,
                desc_dist: 0.0,
            })
            .collect();
        let cfg = TripletConfig {
            filters: TripletFilters::none(),
            keypoint_cap: usize::MAX,
            ..Default::default()
        };
        let out = generate_triplets(&matches, &PairRelation::complete(m), &kps, &cfg);
        assert_eq!(out.candidates, 2 * m * (m - 1) * (m - 2) / 3);
        assert!(out.triplets.len() <= out.candidates);
    }
}

#[test]
fn keypoint_cap_bounds_triplet_usage() {
    let scene = generate_scene(&SceneSpec::single(40, 2, 2)).unwrap();
    let cfg = DiscoveryConfig {
        keypoint_cap: 5,
        ..DiscoveryConfig::default()
    };
    let triplets = triplets_of(&scene.keypoints, &cfg);
    let mut usage = vec![0; scene.keypoints.len()];
    for t in &triplets {
        for &k in t.src.iter().chain(&t.dst) {
            usage[k] += 1;
        }
    }
    assert!(usage.iter().all(|&u| u <= 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dbscan_matches_brute_force(seed in any::<u64>(), n in 1usize..48, groups in 1usize..4, eps in 10.0..60.0f64, min_pts in 1usize..5) {
        let (kps, triplets) = grouped_triplets(seed, n, groups);
        let fast = dbscan_triplets(&triplets, &kps, eps, min_pts);
        let slow = brute_dbscan(&triplets, &kps, eps, min_pts);
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn bundle_adjustment_never_increases_cost(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, obs) = noisy_model(&mut rng);
        let ba = bundle_adjust(&model, &obs, 50, 1e-10).unwrap();
        for w in ba.costs.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert_eq!(ba.model.instances[0], model.instances[0]);
    }
}

#[test]
fn separated_transform_groups_form_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ta = RigidTransform::from_axis_angle(Vec3::z(), 0.5, Vec3::new(200., 0., 0.));
    let tb = RigidTransform::from_axis_angle(Vec3::x(), 1.2, Vec3::new(0., -300., 50.));
    let mut kps = Vec::new();
    let mut triplets = Vec::new();
    for (g, t) in [ta, tb].iter().enumerate() {
        for _ in 0..20 {
            let src: [Vec3; 3] = std::array::from_fn(|_| random_vec(&mut rng, 50.0) + Vec3::new(0., 0., 900.));
            let dst = src.map(|p| t.apply(&p) + gaussian(&mut rng, 0.2));
            let s0 = kps.len();
            for p in src.iter().chain(&dst) {
                kps.push(kp(*p, Vec3::z(), vec![g as f64]));
            }
            let pose = geom::umeyama3(&src, &dst).unwrap();
            triplets.push(TripletMatch {
                src: [s0, s0 + 1, s0 + 2],
                dst: [s0 + 3, s0 + 4, s0 + 5],
                pose,
                residual: 0.0,
            });
        }
    }
    let clusters = dbscan_triplets(&triplets, &kps, 35.0, 3);
    assert_eq!(clusters, vec![(0..20).collect::<Vec<_>>(), (20..40).collect()]);
    let cfg = ClusterConfig::default();
    let refined = cluster_triplets(&triplets, &kps, &cfg);
    assert_eq!(refined.len(), 2);
    assert!(pose_error(&refined[0].transform, &ta).0 < 0.5);
    assert!(pose_error(&refined[1].transform, &tb).0 < 0.5);
}

#[test]
fn assembled_poses_reproduce_ground_truth_on_exact_scenes() {
    let scene = generate_scene(&exact_spec(30, 3, 11)).unwrap();
    let kps = &scene.keypoints;
    let cfg = DiscoveryConfig::default();
    let triplets = triplets_of(kps, &cfg);
    let clusters = cluster_triplets(&triplets, kps, &cfg.cluster_config());
    let graph = build_graph(&clusters, &triplets, kps, cfg.delta);
    for comp in graph.components() {
        let reference = select_reference(&graph, &comp);
        let (_, chain) = chain_transforms(&graph, reference);
        assert!(comp.iter().all(|&n| chain[n].is_some()));
        let assembled = assemble_model(&graph, &comp, reference, kps, cfg.merge_radius).unwrap();
        let dm = disco_core::detect::DiscoveredModel {
            model: assembled.model,
            observations: assembled.observations,
        };
        let truth = instance_truth(&dm, &scene);
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                let rel = dm.model.instances[j].compose(&dm.model.instances[i].inverse());
                let gt = scene.annotations[truth[j].unwrap()]
                    .pose
                    .compose(&scene.annotations[truth[i].unwrap()].pose.inverse());
                let (r, _) = pose_error(&rel, &gt);
                let shift = (rel.apply(&scene.annotations[truth[i].unwrap()].pose.translation)
                    - gt.apply(&scene.annotations[truth[i].unwrap()].pose.translation))
                .norm();
                assert!(r.to_radians() < 1e-6 && shift < 1e-3, "{r} deg {shift} mm");
            }
        }
    }
}

#[test]
fn planted_model_is_detected_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let landmarks: Vec<Landmark> = (0..20)
        .map(|l| Landmark {
            position: random_vec(&mut rng, 50.0),
            descriptor: vec![l as f64],
            observations: 2,
        })
        .collect();
    let model = ObjectModel::new(landmarks, vec![RigidTransform::identity()]);
    let truth = RigidTransform::from_axis_angle(Vec3::new(1., 2., 3.), 0.8, Vec3::new(10., -40., 880.));
    let kps: Vec<_> = model
        .landmarks
        .iter()
        .map(|l| kp(truth.apply(&l.position), Vec3::z(), l.descriptor.clone()))
        .collect();
    let corrs = model_correspondences(&model, &kps, 0.5);
    assert_eq!(corrs.len(), 20);
    let params = RansacParams::from(&DiscoveryConfig::default());
    let det = ransac_detect(&model, 0, &kps, &corrs, &params, &mut rng).unwrap();
    assert_eq!(det.inliers.len(), 20);
    let (r, t) = pose_error(&det.pose, &truth);
    assert!(r.to_radians() < 1e-6 && t < 1e-6);
}

#[test]
fn discover_two_exact_instances() {
    let scene = generate_scene(&exact_spec(40, 2, 6)).unwrap();
    let found = discover(&scene.keypoints, &DiscoveryConfig::default()).unwrap();
    assert_eq!(found.models.len(), 1);
    let dm = &found.models[0];
    assert_eq!(dm.model.instances.len(), 2);
    let (r, t) = worst_relative_error(dm, &scene).unwrap();
    assert!(r.to_radians() < 1e-3 && t < 1e-3, "{r} deg {t} mm");
    let rows = found.instances(0, &scene.keypoints, 5.0);
    assert!(rows.iter().all(|i| i.inlier_ratio == 1.0));
}

#[test]
fn discover_keeps_distinct_objects_apart() {
    let mut spec = SceneSpec::single(60, 2, 8);
    spec.objects.push(ObjectSpec {
        landmarks: 60,
        extent: 100.0,
    });
    spec.instances = vec![2, 2];
    let scene = generate_scene(&spec).unwrap();
    let found = discover(&scene.keypoints, &DiscoveryConfig::default()).unwrap();
    assert_eq!(found.models.len(), 2);
    assert_eq!(found.report.cross_merges, 0);
}

#[test]
fn clutter_only_scene_reports_no_recurrent_pattern() {
    let mut spec = SceneSpec::single(10, 0, 2);
    spec.clutter = 200;
    let scene = generate_scene(&spec).unwrap();
    let found = discover(&scene.keypoints, &DiscoveryConfig::default()).unwrap();
    assert!(found.models.is_empty());
    assert!(found.report.notes.iter().any(|n| n.contains("no recurrent pattern")));
}

#[test]
fn report_counts_are_monotone() {
    let scene = generate_scene(&SceneSpec::single(40, 2, 3)).unwrap();
    let r = discover(&scene.keypoints, &DiscoveryConfig::default()).unwrap().report;
    assert_eq!(r.keypoints, scene.keypoints.len());
    assert!(r.accepted_triplets <= r.candidate_triplets);
    assert!(r.models <= r.assembled_models);
    assert_eq!(r.timings.len(), 7);
}
