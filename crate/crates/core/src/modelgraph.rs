//! Graph of clustered point sets, reference selection, transform chaining
//! and bundle adjustment of the resulting landmark models.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::clustering::Cluster;
use crate::frame::Keypoint3D;
use crate::geom::{register_points, RigidTransform, Vec3};
use crate::matching::TripletMatch;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Src,
    Dst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetNode {
    pub id: usize,
    pub cluster: usize,
    pub side: Side,
    /// Sorted keypoint indices.
    pub keypoints: Vec<usize>,
    /// Matched correspondences plus keypoints shared with other nodes.
    pub score: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Matched,
    Common,
}

/// Undirected edge; `transform` maps node `a`'s points onto node `b`'s.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    pub transform: RigidTransform,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SetGraph {
    pub nodes: Vec<SetNode>,
    pub edges: Vec<SetEdge>,
}

pub fn build_graph(clusters: &[Cluster], triplets: &[TripletMatch], kps: &[Keypoint3D], delta: f64) -> SetGraph {
    let mut nodes = Vec::with_capacity(clusters.len() * 2);
    let mut edges = Vec::new();
    let mut corr_counts = Vec::with_capacity(clusters.len() * 2);
    for (ci, c) in clusters.iter().enumerate() {
        let n_corr = c.correspondences(triplets).len();
        let a = nodes.len();
        nodes.push(SetNode {
            id: a,
            cluster: ci,
            side: Side::Src,
            keypoints: c.src_points.clone(),
            score: 0,
        });
        nodes.push(SetNode {
            id: a + 1,
            cluster: ci,
            side: Side::Dst,
            keypoints: c.dst_points.clone(),
            score: 0,
        });
        corr_counts.push(n_corr);
        corr_counts.push(n_corr);
        edges.push(SetEdge {
            a,
            b: a + 1,
            weight: c.mean_residual(triplets, kps),
            transform: c.transform,
            kind: EdgeKind::Matched,
        });
    }

    let mut owners: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for node in &nodes {
        for &k in &node.keypoints {
            owners.entry(k).or_default().push(node.id);
        }
    }
    let mut shared = alloc::vec![0usize; nodes.len()];
    let mut common = alloc::collections::BTreeSet::new();
    for ids in owners.values() {
        if ids.len() < 2 {
            continue;
        }
        for (x, &a) in ids.iter().enumerate() {
            shared[a] += 1;
            for &b in &ids[x + 1..] {
                common.insert((a.min(b), a.max(b)));
            }
        }
    }
    for (a, b) in common {
        edges.push(SetEdge {
            a,
            b,
            weight: delta,
            transform: RigidTransform::identity(),
            kind: EdgeKind::Common,
        });
    }
    for node in &mut nodes {
        node.score = corr_counts[node.id] + shared[node.id];
    }
    SetGraph { nodes, edges }
}

impl SetGraph {
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = alloc::vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[edge.a].push(e);
            adj[edge.b].push(e);
        }
        adj
    }

    /// Connected components, each sorted, ordered by smallest node id.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = alloc::vec![false; self.nodes.len()];
        let mut out = Vec::new();
        for start in 0..self.nodes.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = alloc::vec![start];
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &e in &adj[u] {
                    let edge = &self.edges[e];
                    let v = if edge.a == u { edge.b } else { edge.a };
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Highest-scoring node of the component; ties go to the lowest id.
pub fn select_reference(graph: &SetGraph, component: &[usize]) -> usize {
    assert!(!component.is_empty(), "empty component");
    let mut best = component[0];
    for &n in component {
        let (s, b) = (graph.nodes[n].score, graph.nodes[best].score);
        if s > b || (s == b && n < best) {
            best = n;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub position: Vec3,
    pub descriptor: Vec<f64>,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub landmarks: Vec<Landmark>,
    /// Model frame → scene, one per instance; the first is the reference.
    pub instances: Vec<RigidTransform>,
    pub diameter: f64,
}

impl ObjectModel {
    pub fn new(landmarks: Vec<Landmark>, instances: Vec<RigidTransform>) -> Self {
        let mut m = Self {
            landmarks,
            instances,
            diameter: 0.0,
        };
        m.update_diameter();
        m
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.landmarks.first().map(|l| l.descriptor.len())
    }

    pub fn update_diameter(&mut self) {
        let mut d2: f64 = 0.0;
        for (i, a) in self.landmarks.iter().enumerate() {
            for b in &self.landmarks[i + 1..] {
                d2 = d2.max((a.position - b.position).norm_squared());
            }
        }
        self.diameter = math::sqrt(d2);
    }

    pub fn centroid(&self) -> Vec3 {
        if self.landmarks.is_empty() {
            return Vec3::zeros();
        }
        self.landmarks.iter().fold(Vec3::zeros(), |acc, l| acc + l.position) / self.landmarks.len() as f64
    }

    /// Largest landmark distance from the centroid.
    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        self.landmarks
            .iter()
            .map(|l| (l.position - c).norm())
            .fold(0.0, f64::max)
    }
}

/// A scene keypoint observing a landmark within one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Observation {
    pub landmark: usize,
    pub keypoint: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledModel {
    pub model: ObjectModel,
    /// Per instance, the keypoints observing each landmark.
    pub observations: Vec<Vec<Observation>>,
    /// Instance index of every component node, in component order.
    pub node_instances: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path distances from `source` and, per node, the transform that
/// carries its points into `source`'s frame.
pub fn chain_transforms(graph: &SetGraph, source: usize) -> (Vec<f64>, Vec<Option<RigidTransform>>) {
    let adj = graph.adjacency();
    let n = graph.nodes.len();
    let mut dist = alloc::vec![f64::INFINITY; n];
    let mut chain: Vec<Option<RigidTransform>> = alloc::vec![None; n];
    let mut done = alloc::vec![false; n];
    dist[source] = 0.0;
    chain[source] = Some(RigidTransform::identity());
    let mut heap = BinaryHeap::new();
    heap.push(Frontier {
        dist: 0.0,
        node: source,
    });
    while let Some(Frontier { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        let cu = chain[u].expect("settled node has a chain");
        for &e in &adj[u] {
            let edge = &graph.edges[e];
            let (v, step) = if edge.a == u {
                (edge.b, edge.transform.inverse())
            } else {
                (edge.a, edge.transform)
            };
            let nd = d + edge.weight;
            if nd < dist[v] {
                dist[v] = nd;
                chain[v] = Some(cu.compose(&step));
                heap.push(Frontier { dist: nd, node: v });
            }
        }
    }
    (dist, chain)
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// Maps every node of the component into the reference node's frame along
/// shortest paths and merges the mapped points into landmarks. Nodes joined
/// by common-point edges form one instance.
pub fn assemble_model(
    graph: &SetGraph,
    component: &[usize],
    reference: usize,
    kps: &[Keypoint3D],
    merge_radius: f64,
) -> Result<AssembledModel> {
    let (dist, chain) = chain_transforms(graph, reference);
    for &n in component {
        if chain[n].is_none() {
            return Err(Error::Disconnected(n));
        }
    }

    let mut parent: Vec<usize> = (0..graph.nodes.len()).collect();
    for e in &graph.edges {
        if e.kind == EdgeKind::Common {
            let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }

    let mut order: Vec<usize> = component.to_vec();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));

    let mut group_instance: BTreeMap<usize, usize> = BTreeMap::new();
    let mut instances = Vec::new();
    let mut node_instances = Vec::new();
    for &n in &order {
        let g = find(&mut parent, n);
        let next = instances.len();
        let inst = *group_instance.entry(g).or_insert(next);
        if inst == next {
            let pose = if n == reference {
                RigidTransform::identity()
            } else {
                chain[n].unwrap().inverse()
            };
            instances.push(pose);
        }
        node_instances.push((n, inst));
    }

    let mut landmarks: Vec<Landmark> = Vec::new();
    let mut contributors: Vec<Vec<usize>> = Vec::new();
    let mut observations: Vec<Vec<Observation>> = alloc::vec![Vec::new(); instances.len()];
    let mut kp_landmark: BTreeMap<usize, usize> = BTreeMap::new();
    for &(n, inst) in &node_instances {
        let c = chain[n].unwrap();
        for &k in &graph.nodes[n].keypoints {
            let mapped = c.apply(&kps[k].position);
            let existing = kp_landmark.get(&k).copied().or_else(|| {
                landmarks
                    .iter()
                    .enumerate()
                    .filter(|(l, _)| !observations[inst].iter().any(|o| o.landmark == *l))
                    .map(|(l, lm)| (l, (lm.position - mapped).norm()))
                    .filter(|&(_, d)| d <= merge_radius)
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .map(|(l, _)| l)
            });
            let l = match existing {
                Some(l) => {
                    if !contributors[l].contains(&n) {
                        let lm = &mut landmarks[l];
                        let w = lm.observations as f64;
                        lm.position = (lm.position * w + mapped) / (w + 1.0);
                        lm.observations += 1;
                        contributors[l].push(n);
                    }
                    l
                }
                None => {
                    landmarks.push(Landmark {
                        position: mapped,
                        descriptor: kps[k].descriptor.clone(),
                        observations: 1,
                    });
                    contributors.push(alloc::vec![n]);
                    landmarks.len() - 1
                }
            };
            kp_landmark.insert(k, l);
            let obs = &mut observations[inst];
            if !obs.iter().any(|o| o.keypoint == k) {
                obs.push(Observation {
                    landmark: l,
                    keypoint: k,
                });
            }
        }
    }

    Ok(AssembledModel {
        model: ObjectModel::new(landmarks, instances),
        observations,
        node_instances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleAdjustment {
    pub model: ObjectModel,
    /// Cost before the first step, then after every half-step.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

impl BundleAdjustment {
    pub fn initial_rms(&self, n_obs: usize) -> f64 {
        rms(self.costs[0], n_obs)
    }

    pub fn final_rms(&self, n_obs: usize) -> f64 {
        rms(*self.costs.last().unwrap(), n_obs)
    }
}

fn rms(cost: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        math::sqrt(cost / n as f64)
    }
}

/// `Σ_j Σ_i ‖T_j(x_i) − p_ij‖²`.
pub fn reprojection_cost(model: &ObjectModel, observations: &[Vec<(usize, Vec3)>]) -> f64 {
    observations
        .iter()
        .zip(&model.instances)
        .map(|(obs, t)| {
            obs.iter()
                .map(|(l, p)| (t.apply(&model.landmarks[*l].position) - p).norm_squared())
                .sum::<f64>()
        })
        .sum()
}

/// Alternating refinement of instance poses (closed-form registration per
/// instance) and landmark positions (mean of back-mapped observations).
/// The first instance stays at identity. Stops when the relative cost
/// decrease of an iteration drops below `tol` or after `max_iters`.
pub fn bundle_adjust(
    model: &ObjectModel,
    observations: &[Vec<(usize, Vec3)>],
    max_iters: usize,
    tol: f64,
) -> Result<BundleAdjustment> {
    assert_eq!(
        observations.len(),
        model.instances.len(),
        "one observation list per instance"
    );
    let mut model = model.clone();
    let mut cost = reprojection_cost(&model, observations);
    let mut costs = alloc::vec![cost];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let start = cost;

        let poses = crate::par::map_range(model.instances.len(), |j| {
            if j == 0 {
                return Ok(model.instances[0]);
            }
            let (src, dst): (Vec<Vec3>, Vec<Vec3>) = observations[j]
                .iter()
                .map(|(l, p)| (model.landmarks[*l].position, *p))
                .unzip();
            register_points(&src, &dst)
        });
        let mut candidate = model.clone();
        for (j, pose) in poses.into_iter().enumerate() {
            candidate.instances[j] = pose?;
        }
        let c = reprojection_cost(&candidate, observations);
        if c <= cost {
            model = candidate;
            cost = c;
        }
        costs.push(cost);

        let mut sums = alloc::vec![(Vec3::zeros(), 0usize); model.landmarks.len()];
        for (j, obs) in observations.iter().enumerate() {
            let inv = model.instances[j].inverse();
            for (l, p) in obs {
                sums[*l].0 += inv.apply(p);
                sums[*l].1 += 1;
            }
        }
        let mut candidate = model.clone();
        for (lm, (sum, n)) in candidate.landmarks.iter_mut().zip(&sums) {
            if *n > 0 {
                lm.position = sum / *n as f64;
            }
        }
        let c = reprojection_cost(&candidate, observations);
        if c <= cost {
            model = candidate;
            cost = c;
        }
        costs.push(cost);

        if start <= 0.0 || (start - cost) / start < tol {
            break;
        }
    }
    model.update_diameter();
    Ok(BundleAdjustment {
        model,
        costs,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ClusterMember;
    use alloc::vec;

    fn kp(p: Vec3, tag: f64) -> Keypoint3D {
        Keypoint3D {
            pixel: [0.0; 2],
            position: p,
            normal: Vec3::new(0., 0., -1.),
            descriptor: vec![tag],
        }
    }

    fn cluster(src: Vec<usize>, dst: Vec<usize>, t: RigidTransform) -> Cluster {
        Cluster {
            members: vec![ClusterMember {
                triplet: 0,
                reversed: false,
            }],
            transform: t,
            src_points: src,
            dst_points: dst,
        }
    }

    #[test]
    fn single_cluster_graph() {
        let kps: Vec<Keypoint3D> = (0..6)
            .map(|i| kp(Vec3::new(i as f64 * 10.0, (i % 2) as f64 * 7.0, 500.), 0.0))
            .collect();
        let trips = vec![TripletMatch {
            src: [0, 1, 2],
            dst: [3, 4, 5],
            pose: RigidTransform::identity(),
            residual: 0.0,
        }];
        let c = cluster(
            vec![0, 1, 2],
            vec![3, 4, 5],
            RigidTransform::from_translation(Vec3::new(30., 0., 0.)),
        );
        let g = build_graph(&[c], &trips, &kps, 1.0);
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].kind, EdgeKind::Matched);
        assert_eq!(g.components(), vec![vec![0, 1]]);
    }

    #[test]
    fn shared_keypoints_add_common_edge() {
        let kps: Vec<Keypoint3D> = (0..9).map(|i| kp(Vec3::new(i as f64, 0., 500.), 0.0)).collect();
        let trips = vec![
            TripletMatch {
                src: [0, 1, 2],
                dst: [3, 4, 5],
                pose: RigidTransform::identity(),
                residual: 0.0,
            },
            TripletMatch {
                src: [3, 4, 5],
                dst: [6, 7, 8],
                pose: RigidTransform::identity(),
                residual: 0.0,
            },
        ];
        let mut c0 = cluster(vec![0, 1, 2], vec![3, 4, 5], RigidTransform::identity());
        let mut c1 = cluster(vec![3, 4, 5], vec![6, 7, 8], RigidTransform::identity());
        c1.members[0].triplet = 1;
        c0.members[0].triplet = 0;
        let g = build_graph(&[c0, c1], &trips, &kps, 1.0);
        assert_eq!(g.nodes.len(), 4);
        let matched = g.edges.iter().filter(|e| e.kind == EdgeKind::Matched).count();
        let common: Vec<_> = g.edges.iter().filter(|e| e.kind == EdgeKind::Common).collect();
        assert_eq!(matched, 2);
        assert_eq!(common.len(), 1);
        assert_eq!((common[0].a, common[0].b), (1, 2));
        assert_eq!(common[0].weight, 1.0);
        assert_eq!(g.components(), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn reference_selection_rules() {
        let mk = |id: usize, score: usize| SetNode {
            id,
            cluster: id,
            side: Side::Src,
            keypoints: vec![id],
            score,
        };
        let g = SetGraph {
            nodes: vec![mk(0, 5), mk(1, 9), mk(2, 9), mk(3, 2)],
            edges: vec![],
        };
        assert_eq!(select_reference(&g, &[3]), 3);
        assert_eq!(select_reference(&g, &[0, 1, 2, 3]), 1);
        assert_eq!(select_reference(&g, &[2, 1]), 1);
    }

    #[test]
    fn common_only_nodes_dedupe_landmarks() {
        let kps: Vec<Keypoint3D> = (0..4)
            .map(|i| kp(Vec3::new(i as f64 * 20.0, (i * i) as f64, 500.), i as f64))
            .collect();
        let g = SetGraph {
            nodes: vec![
                SetNode {
                    id: 0,
                    cluster: 0,
                    side: Side::Src,
                    keypoints: vec![0, 1, 2, 3],
                    score: 1,
                },
                SetNode {
                    id: 1,
                    cluster: 1,
                    side: Side::Src,
                    keypoints: vec![0, 1, 2, 3],
                    score: 0,
                },
            ],
            edges: vec![SetEdge {
                a: 0,
                b: 1,
                weight: 1.0,
                transform: RigidTransform::identity(),
                kind: EdgeKind::Common,
            }],
        };
        let out = assemble_model(&g, &[0, 1], 0, &kps, 5.0).unwrap();
        assert_eq!(out.model.landmarks.len(), 4);
        assert!(out.model.landmarks.iter().all(|l| l.observations == 2));
        assert_eq!(out.model.instances.len(), 1);
        assert_eq!(out.observations[0].len(), 4);
    }

    #[test]
    fn disconnected_component_is_error() {
        let g = SetGraph {
            nodes: vec![
                SetNode {
                    id: 0,
                    cluster: 0,
                    side: Side::Src,
                    keypoints: vec![0],
                    score: 0,
                },
                SetNode {
                    id: 1,
                    cluster: 0,
                    side: Side::Dst,
                    keypoints: vec![1],
                    score: 0,
                },
            ],
            edges: vec![],
        };
        let kps = vec![kp(Vec3::new(0., 0., 1.), 0.), kp(Vec3::new(1., 0., 1.), 0.)];
        assert_eq!(assemble_model(&g, &[0, 1], 0, &kps, 5.0), Err(Error::Disconnected(1)));
    }

    #[test]
    fn gauge_only_bundle_adjustment() {
        let model = ObjectModel::new(
            vec![
                Landmark {
                    position: Vec3::new(0., 0., 0.),
                    descriptor: vec![],
                    observations: 1,
                },
                Landmark {
                    position: Vec3::new(10., 0., 0.),
                    descriptor: vec![],
                    observations: 1,
                },
            ],
            vec![RigidTransform::identity()],
        );
        let obs = vec![vec![(0, Vec3::new(1., 1., 1.)), (1, Vec3::new(12., 0., 0.))]];
        let ba = bundle_adjust(&model, &obs, 10, 1e-8).unwrap();
        assert_eq!(ba.model.landmarks[0].position, Vec3::new(1., 1., 1.));
        assert_eq!(ba.model.landmarks[1].position, Vec3::new(12., 0., 0.));
        assert_eq!(ba.model.instances[0], RigidTransform::identity());
        assert_eq!(*ba.costs.last().unwrap(), 0.0);
    }
}
