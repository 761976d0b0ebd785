//! RANSAC detection of models in scene keypoints, cross-model merging and
//! recovery of instances missed by clustering.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterConfig;
use crate::frame::Keypoint3D;
use crate::geom::{register_points, umeyama3, RigidTransform, Vec3};
use crate::matching::{descriptor_distance, TripletConfig, TripletFilters};
use crate::modelgraph::{Landmark, ObjectModel, Observation};
use crate::{Error, Result};

/// Every threshold of the discovery pipeline. Distances in mm, angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    pub ppf_dist_tol: f64,
    pub ppf_angle_tol: f64,
    pub min_edge: f64,
    pub max_edge: f64,
    pub min_angle: f64,
    pub sidedness_eps: f64,
    pub cluster_eps: f64,
    pub dbscan_min_pts: usize,
    pub min_cluster_size: usize,
    pub delta: f64,
    pub merge_radius: f64,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
    pub keypoint_cap: usize,
    /// Descriptor distance bound for pairing scene keypoints.
    pub desc_thresh: f64,
    /// Descriptor distance bound for model-to-scene correspondences.
    pub corr_thresh: f64,
    pub ransac_iterations: usize,
    pub ba_max_iters: usize,
    pub ba_tol: f64,
    pub seed: u64,
    pub use_ppf: bool,
    pub filters: TripletFilters,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            ppf_dist_tol: 5.0,
            ppf_angle_tol: 35f64.to_radians(),
            min_edge: 10.0,
            max_edge: 125.0,
            min_angle: 10f64.to_radians(),
            sidedness_eps: 0.1,
            cluster_eps: 35.0,
            dbscan_min_pts: 3,
            min_cluster_size: 14,
            delta: 1.0,
            merge_radius: 5.0,
            inlier_threshold: 5.0,
            min_inliers: 5,
            min_inlier_ratio: 0.125,
            keypoint_cap: 60,
            desc_thresh: 0.25,
            corr_thresh: 0.5,
            ransac_iterations: 2000,
            ba_max_iters: 50,
            ba_tol: 1e-8,
            seed: 0,
            use_ppf: true,
            filters: TripletFilters::default(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.ppf_dist_tol,
            self.ppf_angle_tol,
            self.min_edge,
            self.max_edge,
            self.min_angle,
            self.sidedness_eps,
            self.cluster_eps,
            self.delta,
            self.merge_radius,
            self.inlier_threshold,
            self.desc_thresh,
            self.corr_thresh,
            self.ba_tol,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("thresholds must be strictly positive"));
        }
        let counts = [
            self.dbscan_min_pts,
            self.min_cluster_size,
            self.min_inliers,
            self.keypoint_cap,
            self.ransac_iterations,
            self.ba_max_iters,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("counts must be at least 1"));
        }
        if !(self.min_inlier_ratio > 0.0 && self.min_inlier_ratio <= 1.0) {
            return Err(Error::InvalidArgument("min inlier ratio must lie in (0, 1]"));
        }
        if self.min_edge > self.max_edge {
            return Err(Error::InvalidArgument("min edge exceeds max edge"));
        }
        Ok(())
    }

    pub fn triplet_config(&self) -> TripletConfig {
        TripletConfig {
            min_edge: self.min_edge,
            max_edge: self.max_edge,
            min_angle: self.min_angle,
            sidedness_eps: self.sidedness_eps,
            keypoint_cap: self.keypoint_cap,
            filters: self.filters,
        }
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            eps: self.cluster_eps,
            min_pts: self.dbscan_min_pts,
            min_cluster_size: self.min_cluster_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub model: usize,
    /// Model frame → scene.
    pub pose: RigidTransform,
    /// `(landmark, keypoint)` pairs.
    pub inliers: Vec<(usize, usize)>,
    pub inlier_ratio: f64,
}

/// Nearest landmark (by descriptor) of every scene keypoint, when within
/// `max_desc_dist`. Landmarks may be shared by several keypoints.
pub fn model_correspondences(model: &ObjectModel, kps: &[Keypoint3D], max_desc_dist: f64) -> Vec<(usize, usize)> {
    let all: Vec<usize> = (0..kps.len()).collect();
    model_correspondences_among(model, kps, &all, max_desc_dist)
}

/// [`model_correspondences`] restricted to the keypoints in `candidates`.
pub fn model_correspondences_among(
    model: &ObjectModel,
    kps: &[Keypoint3D],
    candidates: &[usize],
    max_desc_dist: f64,
) -> Vec<(usize, usize)> {
    let found = crate::par::map_range(candidates.len(), |x| {
        let k = candidates[x];
        let mut best: Option<(usize, f64)> = None;
        for (l, lm) in model.landmarks.iter().enumerate() {
            let d = descriptor_distance(&lm.descriptor, &kps[k].descriptor);
            if d <= max_desc_dist && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((l, d));
            }
        }
        best.map(|(l, _)| (l, k))
    });
    found.into_iter().flatten().collect()
}

#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
    pub iterations: usize,
}

impl From<&DiscoveryConfig> for RansacParams {
    fn from(c: &DiscoveryConfig) -> Self {
        Self {
            inlier_threshold: c.inlier_threshold,
            min_inliers: c.min_inliers,
            min_inlier_ratio: c.min_inlier_ratio,
            iterations: c.ransac_iterations,
        }
    }
}

const BATCH: usize = 64;

/// Inliers of `pose` among `corrs`: residual within the threshold, each
/// keypoint and each landmark claimed once in ascending residual order.
/// Returns indices into `corrs` and the residual sum.
fn claim_inliers(
    pose: &RigidTransform,
    model: &ObjectModel,
    kps: &[Keypoint3D],
    corrs: &[(usize, usize)],
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut hits: Vec<(f64, usize)> = corrs
        .iter()
        .enumerate()
        .filter_map(|(x, &(l, k))| {
            let r = (pose.apply(&model.landmarks[l].position) - kps[k].position).norm();
            (r <= threshold).then_some((r, x))
        })
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut taken_l = alloc::collections::BTreeSet::new();
    let mut taken_k = alloc::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut sum = 0.0;
    for (r, x) in hits {
        let (l, k) = corrs[x];
        if !taken_l.contains(&l) && !taken_k.contains(&k) {
            taken_l.insert(l);
            taken_k.insert(k);
            out.push(x);
            sum += r;
        }
    }
    out.sort_unstable();
    (out, sum)
}

#[derive(Clone)]
struct Attempt {
    count: usize,
    residual: f64,
    iteration: usize,
    pose: RigidTransform,
    inliers: Vec<usize>,
}

impl Attempt {
    fn better_than(&self, other: &Attempt) -> bool {
        self.count > other.count
            || (self.count == other.count
                && (self.residual < other.residual
                    || (self.residual == other.residual && self.iteration < other.iteration)))
    }
}

fn batch_seed(base: u64, batch: usize) -> u64 {
    // splitmix64 of the batch index, mixed into the base seed
    let mut z = base ^ (batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Three-point RANSAC registration of `model` onto the scene keypoints of
/// `corrs`. Samples are drawn so their scene points lie pairwise within the
/// model diameter. Deterministic given the generator state; iterations run
/// in batches with derived seeds so the winner does not depend on threads.
pub fn ransac_detect<R: RngCore + ?Sized>(
    model: &ObjectModel,
    model_id: usize,
    kps: &[Keypoint3D],
    corrs: &[(usize, usize)],
    params: &RansacParams,
    rng: &mut R,
) -> Option<DetectionResult> {
    let base = rng.next_u64();
    let n = corrs.len();
    if n < 3 || n < params.min_inliers {
        return None;
    }
    let reach = model.diameter;
    let near: Vec<Vec<usize>> = (0..n)
        .map(|a| {
            (0..n)
                .filter(|&b| {
                    b != a
                        && corrs[b].0 != corrs[a].0
                        && corrs[b].1 != corrs[a].1
                        && (kps[corrs[a].1].position - kps[corrs[b].1].position).norm() <= reach
                })
                .collect()
        })
        .collect();

    let batches = params.iterations.div_ceil(BATCH);
    let best_per_batch = crate::par::map_range(batches, |batch| {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(base, batch));
        let mut best: Option<Attempt> = None;
        let start = batch * BATCH;
        let end = (start + BATCH).min(params.iterations);
        for iteration in start..end {
            let a = rng.random_range(0..n);
            let nb = &near[a];
            if nb.len() < 2 {
                continue;
            }
            let x = rng.random_range(0..nb.len());
            let mut y = rng.random_range(0..nb.len() - 1);
            if y >= x {
                y += 1;
            }
            let (b, c) = (nb[x], nb[y]);
            if corrs[b].0 == corrs[c].0
                || corrs[b].1 == corrs[c].1
                || (kps[corrs[b].1].position - kps[corrs[c].1].position).norm() > reach
            {
                continue;
            }
            let p = [a, b, c].map(|i| model.landmarks[corrs[i].0].position);
            let q = [a, b, c].map(|i| kps[corrs[i].1].position);
            let Ok(pose) = umeyama3(&p, &q) else {
                continue;
            };
            let (inliers, residual) = claim_inliers(&pose, model, kps, corrs, params.inlier_threshold);
            let attempt = Attempt {
                count: inliers.len(),
                residual,
                iteration,
                pose,
                inliers,
            };
            if best.as_ref().is_none_or(|b| attempt.better_than(b)) {
                best = Some(attempt);
            }
        }
        best
    });
    let mut best: Option<Attempt> = None;
    for a in best_per_batch.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| a.better_than(b)) {
            best = Some(a);
        }
    }
    let mut best = best?;

    let (src, dst): (Vec<Vec3>, Vec<Vec3>) = best
        .inliers
        .iter()
        .map(|&x| (model.landmarks[corrs[x].0].position, kps[corrs[x].1].position))
        .unzip();
    if let Ok(refit) = register_points(&src, &dst) {
        let (inliers, residual) = claim_inliers(&refit, model, kps, corrs, params.inlier_threshold);
        if inliers.len() >= best.count {
            best.count = inliers.len();
            best.inliers = inliers;
            best.residual = residual;
            best.pose = refit;
        }
    }

    let ratio = best.count as f64 / n as f64;
    if best.count < params.min_inliers || ratio <= params.min_inlier_ratio {
        return None;
    }
    Some(DetectionResult {
        model: model_id,
        pose: best.pose,
        inliers: best.inliers.iter().map(|&x| corrs[x]).collect(),
        inlier_ratio: ratio,
    })
}

/// A model together with the scene keypoints observing each of its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveredModel {
    pub model: ObjectModel,
    pub observations: Vec<Vec<Observation>>,
}

impl DiscoveredModel {
    pub fn owned_keypoints(&self) -> alloc::collections::BTreeSet<usize> {
        self.observations.iter().flatten().map(|o| o.keypoint).collect()
    }

    /// Index of an existing instance occupying the same place as `pose`.
    pub fn coinciding_instance(&self, pose: &RigidTransform) -> Option<usize> {
        let c = self.model.centroid();
        let at = pose.apply(&c);
        let limit = 0.5 * self.model.diameter;
        self.model
            .instances
            .iter()
            .map(|t| (t.apply(&c) - at).norm())
            .enumerate()
            .filter(|&(_, d)| d < limit)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// Per-instance `(landmark, scene position)` lists for bundle adjustment.
    pub fn scene_observations(&self, kps: &[Keypoint3D]) -> Vec<Vec<(usize, Vec3)>> {
        self.observations
            .iter()
            .map(|obs| obs.iter().map(|o| (o.landmark, kps[o.keypoint].position)).collect())
            .collect()
    }

    fn add_observation(&mut self, instance: usize, obs: Observation) -> bool {
        let list = &mut self.observations[instance];
        if list
            .iter()
            .any(|o| o.keypoint == obs.keypoint || o.landmark == obs.landmark)
        {
            return false;
        }
        list.push(obs);
        true
    }
}

/// Folds `from` into `into`; `x` maps `from`'s model frame into `into`'s.
pub fn merge_models(into: &mut DiscoveredModel, from: &DiscoveredModel, x: &RigidTransform, merge_radius: f64) {
    let base = into.model.landmarks.len();
    let mut taken = alloc::vec![false; base];
    let mut remap = Vec::with_capacity(from.model.landmarks.len());
    for lm in &from.model.landmarks {
        let p = x.apply(&lm.position);
        let hit = into.model.landmarks[..base]
            .iter()
            .enumerate()
            .filter(|(l, _)| !taken[*l])
            .map(|(l, o)| (l, (o.position - p).norm()))
            .filter(|&(_, d)| d <= merge_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match hit {
            Some((l, _)) => {
                taken[l] = true;
                let target = &mut into.model.landmarks[l];
                let (wa, wb) = (target.observations as f64, lm.observations as f64);
                target.position = (target.position * wa + p * wb) / (wa + wb);
                target.observations += lm.observations;
                remap.push(l);
            }
            None => {
                into.model.landmarks.push(Landmark {
                    position: p,
                    descriptor: lm.descriptor.clone(),
                    observations: lm.observations,
                });
                remap.push(into.model.landmarks.len() - 1);
            }
        }
    }
    into.model.update_diameter();

    let x_inv = x.inverse();
    for (j, pose) in from.model.instances.iter().enumerate() {
        let pose = pose.compose(&x_inv);
        let target = match into.coinciding_instance(&pose) {
            Some(i) => i,
            None => {
                into.model.instances.push(pose);
                into.observations.push(Vec::new());
                into.model.instances.len() - 1
            }
        };
        for o in &from.observations[j] {
            into.add_observation(
                target,
                Observation {
                    landmark: remap[o.landmark],
                    keypoint: o.keypoint,
                },
            );
        }
    }
}

fn landmark_count(m: &DiscoveredModel) -> usize {
    m.model.landmarks.len()
}

/// Detection of `mi` among keypoints it does not own that lie inside the
/// bounding spheres of `mj`'s instances. Returns the detection and the
/// instance of `mj` it landed on.
fn detect_in_other<R: RngCore + ?Sized>(
    mi: &DiscoveredModel,
    i: usize,
    mj: &DiscoveredModel,
    kps: &[Keypoint3D],
    cfg: &DiscoveryConfig,
    rng: &mut R,
) -> Option<(DetectionResult, usize)> {
    let owned = mi.owned_keypoints();
    let c = mj.model.centroid();
    let radius = mj.model.radius() + cfg.inlier_threshold;
    let centers: Vec<Vec3> = mj.model.instances.iter().map(|t| t.apply(&c)).collect();
    let inside = |k: usize| centers.iter().position(|ctr| (kps[k].position - ctr).norm() <= radius);
    let candidates: Vec<usize> = (0..kps.len())
        .filter(|k| !owned.contains(k) && inside(*k).is_some())
        .collect();
    let corrs = model_correspondences_among(&mi.model, kps, &candidates, cfg.corr_thresh);
    let det = ransac_detect(&mi.model, i, kps, &corrs, &RansacParams::from(cfg), rng)?;
    let mut votes = alloc::vec![0usize; centers.len()];
    for &(_, k) in &det.inliers {
        if let Some(s) = inside(k) {
            votes[s] += 1;
        }
    }
    let (k, v) = votes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (*v > 0).then_some((det, k))
}

/// Repeatedly detects each model among the other models' instance regions
/// and folds the smaller model of a detected pair into the larger. Returns
/// the surviving models and the number of merges.
pub fn cross_model_merge<R: RngCore + ?Sized>(
    models: Vec<DiscoveredModel>,
    kps: &[Keypoint3D],
    cfg: &DiscoveryConfig,
    rng: &mut R,
) -> (Vec<DiscoveredModel>, usize) {
    let mut models = models;
    let mut merges = 0;
    'scan: loop {
        for i in 0..models.len() {
            for j in 0..models.len() {
                if i == j {
                    continue;
                }
                let Some((det, k)) = detect_in_other(&models[i], i, &models[j], kps, cfg, rng) else {
                    continue;
                };
                // frame of j → frame of i
                let x = det.pose.inverse().compose(&models[j].model.instances[k]);
                let (ni, nj) = (landmark_count(&models[i]), landmark_count(&models[j]));
                let (keep, fold, x) = if ni > nj || (ni == nj && i < j) {
                    (i, j, x)
                } else {
                    (j, i, x.inverse())
                };
                let folded = models[fold].clone();
                merge_models(&mut models[keep], &folded, &x, cfg.merge_radius);
                models.remove(fold);
                merges += 1;
                continue 'scan;
            }
        }
        break;
    }
    (models, merges)
}

/// Detects models among keypoints not yet `used`, adding new instances (or
/// observations of an existing instance the detection coincides with) and
/// claiming the inliers, until no model detects anything. Returns the
/// number of new instances and the indices of models that changed.
pub fn detect_remaining<R: RngCore + ?Sized>(
    models: &mut [DiscoveredModel],
    kps: &[Keypoint3D],
    used: &mut [bool],
    cfg: &DiscoveryConfig,
    rng: &mut R,
) -> (usize, Vec<usize>) {
    let params = RansacParams::from(cfg);
    let mut new_instances = 0;
    let mut changed = alloc::collections::BTreeSet::new();
    loop {
        let mut any = false;
        for (mi, dm) in models.iter_mut().enumerate() {
            let free: Vec<usize> = (0..kps.len()).filter(|&k| !used[k]).collect();
            if free.len() < 3 {
                continue;
            }
            let corrs = model_correspondences_among(&dm.model, kps, &free, cfg.corr_thresh);
            let Some(det) = ransac_detect(&dm.model, mi, kps, &corrs, &params, rng) else {
                continue;
            };
            any = true;
            changed.insert(mi);
            let inst = match dm.coinciding_instance(&det.pose) {
                Some(i) => i,
                None => {
                    dm.model.instances.push(det.pose);
                    dm.observations.push(Vec::new());
                    new_instances += 1;
                    dm.model.instances.len() - 1
                }
            };
            for &(l, k) in &det.inliers {
                used[k] = true;
                if dm.add_observation(
                    inst,
                    Observation {
                        landmark: l,
                        keypoint: k,
                    },
                ) {
                    dm.model.landmarks[l].observations += 1;
                }
            }
        }
        if !any {
            break;
        }
    }
    (new_instances, changed.into_iter().collect())
}

/// Runs correspondence search and RANSAC repeatedly on a single model,
/// removing each detection's inlier keypoints before the next attempt.
pub fn detect_instances<R: RngCore + ?Sized>(
    model: &ObjectModel,
    model_id: usize,
    kps: &[Keypoint3D],
    cfg: &DiscoveryConfig,
    rng: &mut R,
) -> Vec<DetectionResult> {
    let params = RansacParams::from(cfg);
    let mut used = alloc::vec![false; kps.len()];
    let mut found = Vec::new();
    loop {
        let free: Vec<usize> = (0..kps.len()).filter(|&k| !used[k]).collect();
        if free.len() < 3 {
            break;
        }
        let corrs = model_correspondences_among(model, kps, &free, cfg.corr_thresh);
        let Some(det) = ransac_detect(model, model_id, kps, &corrs, &params, rng) else {
            break;
        };
        for &(_, k) in &det.inliers {
            used[k] = true;
        }
        found.push(det);
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn default_config_is_valid() {
        let c = DiscoveryConfig::default();
        c.validate().unwrap();
        assert!((c.ppf_angle_tol - 35f64.to_radians()).abs() < 1e-15);
        let bad = DiscoveryConfig {
            min_inlier_ratio: 1.5,
            ..DiscoveryConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DiscoveryConfig {
            cluster_eps: 0.0,
            ..DiscoveryConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_scene_has_no_correspondences() {
        let model = ObjectModel::new(
            vec![Landmark {
                position: Vec3::zeros(),
                descriptor: vec![1.0],
                observations: 1,
            }],
            vec![RigidTransform::identity()],
        );
        assert!(model_correspondences(&model, &[], 1.0).is_empty());
    }

    #[test]
    fn batch_seeds_differ() {
        assert_ne!(batch_seed(7, 0), batch_seed(7, 1));
        assert_eq!(batch_seed(7, 3), batch_seed(7, 3));
    }
}
