//! End-to-end discovery: matching, triplets, clustering, model assembly,
//! cross-model merging and detection of the remaining instances.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::cluster_triplets;
use crate::detect::{cross_model_merge, detect_remaining, DiscoveredModel, DiscoveryConfig};
use crate::frame::Keypoint3D;
use crate::geom::RigidTransform;
use crate::matching::{generate_triplets, match_descriptors, prune_pairs_ppf, PairRelation};
use crate::modelgraph::{assemble_model, build_graph, bundle_adjust, select_reference};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub ms: f64,
}

/// Stage-by-stage counts and wall times of one [`discover`] run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub keypoints: usize,
    pub matches: usize,
    pub compatible_pairs: usize,
    pub candidate_triplets: usize,
    pub accepted_triplets: usize,
    pub clusters: usize,
    pub graph_nodes: usize,
    pub assembled_models: usize,
    pub cross_merges: usize,
    pub new_instances: usize,
    pub models: usize,
    pub instances: usize,
    pub timings: Vec<StageTiming>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveredInstance {
    pub pose: RigidTransform,
    /// Scene keypoints observing this instance.
    pub keypoints: Vec<usize>,
    /// Fraction of those keypoints within the inlier threshold of their
    /// landmark under `pose`.
    pub inlier_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub models: Vec<DiscoveredModel>,
    pub report: RunReport,
}

impl Discovery {
    pub fn instances(&self, model: usize, kps: &[Keypoint3D], inlier_threshold: f64) -> Vec<DiscoveredInstance> {
        let dm = &self.models[model];
        dm.model
            .instances
            .iter()
            .zip(&dm.observations)
            .map(|(pose, obs)| {
                let within = obs
                    .iter()
                    .filter(|o| {
                        (pose.apply(&dm.model.landmarks[o.landmark].position) - kps[o.keypoint].position).norm()
                            <= inlier_threshold
                    })
                    .count();
                DiscoveredInstance {
                    pose: *pose,
                    keypoints: obs.iter().map(|o| o.keypoint).collect(),
                    inlier_ratio: if obs.is_empty() {
                        0.0
                    } else {
                        within as f64 / obs.len() as f64
                    },
                }
            })
            .collect()
    }
}

struct Stopwatch {
    #[cfg(feature = "std")]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(feature = "std")]
            start: std::time::Instant::now(),
        }
    }

    #[cfg(feature = "std")]
    fn lap(&mut self) -> f64 {
        let now = std::time::Instant::now();
        let ms = (now - self.start).as_secs_f64() * 1e3;
        self.start = now;
        ms
    }

    #[cfg(not(feature = "std"))]
    fn lap(&mut self) -> f64 {
        0.0
    }
}

/// Bundle-adjusts `dm` in place when every instance has at least three
/// observations; returns whether it ran.
pub fn refine_model(dm: &mut DiscoveredModel, kps: &[Keypoint3D], cfg: &DiscoveryConfig) -> bool {
    if dm.observations.iter().any(|o| o.len() < 3) {
        return false;
    }
    let obs = dm.scene_observations(kps);
    match bundle_adjust(&dm.model, &obs, cfg.ba_max_iters, cfg.ba_tol) {
        Ok(ba) => {
            dm.model = ba.model;
            true
        }
        Err(_) => false,
    }
}

/// Runs the full pipeline on the keypoints of one frame.
pub fn discover(kps: &[Keypoint3D], cfg: &DiscoveryConfig) -> Result<Discovery> {
    cfg.validate()?;
    let mut report = RunReport {
        keypoints: kps.len(),
        ..RunReport::default()
    };
    let mut clock = Stopwatch::start();
    let mut lap = |report: &mut RunReport, stage: &'static str| {
        report.timings.push(StageTiming { stage, ms: clock.lap() });
    };

    let matches = match_descriptors(kps, cfg.desc_thresh);
    report.matches = matches.len();
    lap(&mut report, "match");

    let relation = if cfg.use_ppf {
        prune_pairs_ppf(&matches, kps, cfg.ppf_dist_tol, cfg.ppf_angle_tol)
    } else {
        PairRelation::complete(matches.len())
    };
    report.compatible_pairs = relation.count();
    lap(&mut report, "prune");

    let trip = generate_triplets(&matches, &relation, kps, &cfg.triplet_config());
    report.candidate_triplets = trip.candidates;
    report.accepted_triplets = trip.triplets.len();
    lap(&mut report, "triplets");

    let clusters = cluster_triplets(&trip.triplets, kps, &cfg.cluster_config());
    report.clusters = clusters.len();
    lap(&mut report, "cluster");

    let graph = build_graph(&clusters, &trip.triplets, kps, cfg.delta);
    report.graph_nodes = graph.nodes.len();
    let mut models = Vec::new();
    for comp in graph.components() {
        let reference = select_reference(&graph, &comp);
        let assembled = assemble_model(&graph, &comp, reference, kps, cfg.merge_radius)?;
        let mut dm = DiscoveredModel {
            model: assembled.model,
            observations: assembled.observations,
        };
        refine_model(&mut dm, kps, cfg);
        models.push(dm);
    }
    report.assembled_models = models.len();
    lap(&mut report, "model");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut models, merges) = cross_model_merge(models, kps, cfg, &mut rng);
    report.cross_merges = merges;
    lap(&mut report, "cross-merge");

    let mut used = alloc::vec![false; kps.len()];
    for node in &graph.nodes {
        for &k in &node.keypoints {
            used[k] = true;
        }
    }
    let (new_instances, _) = detect_remaining(&mut models, kps, &mut used, cfg, &mut rng);
    report.new_instances = new_instances;
    for dm in &mut models {
        refine_model(dm, kps, cfg);
    }
    models.retain(|m| m.model.instances.len() >= 2);
    lap(&mut report, "detect");

    report.models = models.len();
    report.instances = models.iter().map(|m| m.model.instances.len()).sum();
    if models.is_empty() {
        report.notes.push(String::from(
            "no recurrent pattern: no object with two or more instances found",
        ));
    }
    Ok(Discovery { models, report })
}
