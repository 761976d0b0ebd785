#![allow(dead_code)]

use std::collections::BTreeMap;

use disco_core::clustering::triplet_distance;
use disco_core::detect::DiscoveredModel;
use disco_core::frame::Keypoint3D;
use disco_core::geom;
use disco_core::matching::TripletMatch;
use disco_core::modelgraph::{Landmark, ObjectModel};
use disco_core::synth::{pose_error, SyntheticScene};
use disco_core::{Mat3, RigidTransform, Vec3};
use nalgebra::{Rotation3, UnitQuaternion};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn arb_rotation() -> impl Strategy<Value = Mat3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero quaternion", |(w, x, y, z)| {
            w * w + x * x + y * y + z * z > 0.01
        })
        .prop_map(|(w, x, y, z)| {
            *UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
                .to_rotation_matrix()
                .matrix()
        })
}

pub fn arb_vec(scale: f64) -> impl Strategy<Value = Vec3> {
    (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

pub fn arb_rigid() -> impl Strategy<Value = RigidTransform> {
    (arb_rotation(), arb_vec(500.0)).prop_map(|(r, t)| RigidTransform::new(r, t))
}

pub fn arb_unit() -> impl Strategy<Value = Vec3> {
    arb_vec(1.0)
        .prop_filter("non-zero", |v| v.norm() > 0.1)
        .prop_map(|v| v.normalize())
}

/// Triangles with area well above the degeneracy bound.
pub fn arb_triangle() -> impl Strategy<Value = [Vec3; 3]> {
    (arb_vec(100.0), arb_vec(100.0), arb_vec(100.0))
        .prop_map(|(a, b, c)| [a, b, c])
        .prop_filter("non-degenerate", |t| (t[1] - t[0]).cross(&(t[2] - t[0])).norm() > 50.0)
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    disco_core::synth::random_rotation(rng)
        .to_rotation_matrix()
        .into_inner()
}

pub fn random_vec<R: Rng>(rng: &mut R, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

pub fn random_rigid<R: Rng>(rng: &mut R) -> RigidTransform {
    RigidTransform::new(random_rotation(rng), random_vec(rng, 500.0))
}

pub fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, sigma).unwrap();
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Angle of `a·bᵀ` from the quaternion of the relative rotation.
pub fn quaternion_angle(a: &Mat3, b: &Mat3) -> f64 {
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b));
    let rel = qa.inverse() * qb;
    2.0 * rel.imag().norm().atan2(rel.w.abs())
}

pub fn kp(position: Vec3, normal: Vec3, descriptor: Vec<f64>) -> Keypoint3D {
    Keypoint3D {
        pixel: [0.0; 2],
        position,
        normal,
        descriptor,
    }
}

/// Textbook DBSCAN on a precomputed distance relation (every point counts
/// in its own neighbourhood, as for a metric): core points and their
/// eps-connectivity define the clusters, each border point joins the cluster
/// created first among those holding one of its core neighbours.
pub fn brute_dbscan(triplets: &[TripletMatch], kps: &[Keypoint3D], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    let n = triplets.len();
    let near: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| i == j || triplet_distance(&triplets[i], &triplets[j], kps) <= eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = (0..n)
        .map(|i| near[i].iter().filter(|&&b| b).count() >= min_pts)
        .collect();
    let mut comp = vec![usize::MAX; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        let mut stack = vec![s];
        comp[s] = id;
        let mut members = Vec::new();
        while let Some(u) = stack.pop() {
            members.push(u);
            for v in 0..n {
                if core[v] && near[u][v] && comp[v] == usize::MAX {
                    comp[v] = id;
                    stack.push(v);
                }
            }
        }
        clusters.push(members);
    }
    for b in 0..n {
        if core[b] {
            continue;
        }
        if let Some(c) = (0..n).filter(|&c| core[c] && near[b][c]).map(|c| comp[c]).min() {
            clusters[c].push(b);
        }
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters
}

/// Annotation index observed by the majority of each instance's keypoints.
pub fn instance_truth(dm: &DiscoveredModel, scene: &SyntheticScene) -> Vec<Option<usize>> {
    dm.observations
        .iter()
        .map(|obs| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for o in obs {
                if let Some(l) = scene.labels[o.keypoint] {
                    *votes.entry(l.instance).or_default() += 1;
                }
            }
            votes
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|e| e.0)
        })
        .collect()
}

/// Worst rotation (deg) and translation (mm) error over all ordered pairs
/// of recovered instances. The recovered relative motion `E_j·E_i⁻¹` is
/// applied to the true pose of instance i and compared with the true pose
/// of instance j.
pub fn worst_relative_error(dm: &DiscoveredModel, scene: &SyntheticScene) -> Option<(f64, f64)> {
    let truth = instance_truth(dm, scene);
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..truth.len() {
        for j in 0..truth.len() {
            if i == j {
                continue;
            }
            let (gi, gj) = (truth[i]?, truth[j]?);
            if gi == gj {
                return None;
            }
            let rel = dm.model.instances[j].compose(&dm.model.instances[i].inverse());
            let (r, t) = pose_error(&rel.compose(&scene.annotations[gi].pose), &scene.annotations[gj].pose);
            worst = (worst.0.max(r), worst.1.max(t));
        }
    }
    Some(worst)
}

/// Moves every descriptor of annotated `instance` to distance `radius` from
/// its canonical descriptor, resampling until it is farther than `min_gap`
/// from every other copy of the same landmark.
pub fn perturb_instance<R: Rng>(scene: &mut SyntheticScene, instance: usize, radius: f64, min_gap: f64, rng: &mut R) {
    let n = scene.keypoints.len();
    for k in 0..n {
        let Some(label) = scene.labels[k] else { continue };
        if label.instance != instance {
            continue;
        }
        let canon = scene.objects[label.object].descriptors[label.landmark].clone();
        let copies: Vec<Vec<f64>> = (0..n)
            .filter(|&o| {
                scene.labels[o]
                    .is_some_and(|l| l.instance != instance && l.object == label.object && l.landmark == label.landmark)
            })
            .map(|o| scene.keypoints[o].descriptor.clone())
            .collect();
        loop {
            let dir: Vec<f64> = (0..canon.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d: Vec<f64> = canon.iter().zip(&dir).map(|(c, x)| c + radius * x / norm).collect();
            let dist = |o: &Vec<f64>| o.iter().zip(&d).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if copies.iter().all(|o| dist(o) > min_gap) {
                scene.keypoints[k].descriptor = d;
                break;
            }
        }
    }
}

/// Triplets scattered around `groups` random relative poses with per-triplet
/// noise of up to 8 mm.
pub fn grouped_triplets(seed: u64, n: usize, groups: usize) -> (Vec<Keypoint3D>, Vec<TripletMatch>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<RigidTransform> = (0..groups).map(|_| random_rigid(&mut rng)).collect();
    let mut kps = Vec::new();
    let mut triplets = Vec::new();
    for _ in 0..n {
        let g = rng.random_range(0..groups);
        let noise = rng.random_range(0.0..8.0);
        let base = random_vec(&mut rng, 60.0);
        let src: [Vec3; 3] = std::array::from_fn(|_| base + random_vec(&mut rng, 40.0));
        let dst = src.map(|p| poses[g].apply(&p) + gaussian(&mut rng, noise));
        let Ok(pose) = geom::umeyama3(&src, &dst) else { continue };
        let s0 = kps.len();
        for p in src.iter().chain(&dst) {
            kps.push(kp(*p, Vec3::z(), vec![]));
        }
        triplets.push(TripletMatch {
            src: [s0, s0 + 1, s0 + 2],
            dst: [s0 + 3, s0 + 4, s0 + 5],
            pose,
            residual: geom::rms_residual(&pose, &src, &dst),
        });
    }
    (kps, triplets)
}

/// A model whose landmarks and poses are perturbed away from a noisy truth.
pub fn noisy_model(rng: &mut ChaCha8Rng) -> (ObjectModel, Vec<Vec<(usize, Vec3)>>) {
    let n_land = rng.random_range(8..40);
    let n_inst = rng.random_range(2..5);
    let truth: Vec<Vec3> = (0..n_land).map(|_| random_vec(rng, 60.0)).collect();
    let mut poses = vec![RigidTransform::identity()];
    for _ in 1..n_inst {
        poses.push(random_rigid(rng));
    }
    let mut obs: Vec<Vec<(usize, Vec3)>> = vec![Vec::new(); n_inst];
    for (t, o) in poses.iter().zip(&mut obs) {
        for (l, p) in truth.iter().enumerate() {
            if rng.random_bool(0.85) {
                o.push((l, t.apply(p) + gaussian(rng, 1.0)));
            }
        }
    }
    let landmarks = truth
        .iter()
        .map(|p| Landmark {
            position: p + gaussian(rng, 3.0),
            descriptor: vec![0.0],
            observations: 1,
        })
        .collect();
    let start = poses
        .iter()
        .enumerate()
        .map(|(j, t)| {
            if j == 0 {
                *t
            } else {
                let wiggle = RigidTransform::from_axis_angle(random_vec(rng, 1.0), 0.03, gaussian(rng, 2.0));
                wiggle.compose(t)
            }
        })
        .collect();
    (ObjectModel::new(landmarks, start), obs)
}
