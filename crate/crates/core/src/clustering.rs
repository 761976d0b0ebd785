//! Density-based clustering of triplet matches by relative pose.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::frame::Keypoint3D;
use crate::geom::{register_points, triplet_pair_distance, RigidTransform, Vec3};
use crate::matching::TripletMatch;
use crate::Result;

/// Bidirectional point-to-point distance between two triplet matches.
pub fn triplet_distance(a: &TripletMatch, b: &TripletMatch, kps: &[Keypoint3D]) -> f64 {
    triplet_pair_distance(
        &a.pose,
        &b.pose,
        &a.src_triangle(kps),
        &a.dst_triangle(kps),
        &b.src_triangle(kps),
        &b.dst_triangle(kps),
    )
}

/// DBSCAN over `n` items given their eps-neighborhoods (each including the
/// item itself). Items are visited and clusters expanded in ascending index
/// order; returned clusters hold ascending member indices.
pub fn dbscan_from_neighbors(neighbors: &[Vec<usize>], min_pts: usize) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let n = neighbors.len();
    let mut label = alloc::vec![UNSEEN; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for p in 0..n {
        if label[p] != UNSEEN {
            continue;
        }
        if neighbors[p].len() < min_pts {
            label[p] = NOISE;
            continue;
        }
        let id = clusters.len();
        label[p] = id;
        let mut members = alloc::vec![p];
        let mut queue: alloc::collections::VecDeque<usize> = neighbors[p].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            if label[q] == NOISE {
                label[q] = id;
                members.push(q);
                continue;
            }
            if label[q] != UNSEEN {
                continue;
            }
            label[q] = id;
            members.push(q);
            if neighbors[q].len() >= min_pts {
                queue.extend(neighbors[q].iter().copied());
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

/// DBSCAN of triplet matches under [`triplet_distance`].
pub fn dbscan_triplets(triplets: &[TripletMatch], kps: &[Keypoint3D], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    let n = triplets.len();
    let neighbors = crate::par::map_range(n, |i| {
        (0..n)
            .filter(|&j| j == i || triplet_distance(&triplets[i], &triplets[j], kps) <= eps)
            .collect::<Vec<_>>()
    });
    dbscan_from_neighbors(&neighbors, min_pts.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClusterMember {
    pub triplet: usize,
    /// Member read dst → src.
    pub reversed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<ClusterMember>,
    pub transform: RigidTransform,
    pub src_points: Vec<usize>,
    pub dst_points: Vec<usize>,
}

fn oriented(t: &TripletMatch, reversed: bool) -> ([usize; 3], [usize; 3]) {
    if reversed {
        (t.dst, t.src)
    } else {
        (t.src, t.dst)
    }
}

/// Deduplicated keypoint correspondences `(src, dst)` of a member set.
pub fn member_correspondences(members: &[ClusterMember], triplets: &[TripletMatch]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for m in members {
        let (s, d) = oriented(&triplets[m.triplet], m.reversed);
        for k in 0..3 {
            set.insert((s[k], d[k]));
        }
    }
    set.into_iter().collect()
}

fn positions(pairs: &[(usize, usize)], kps: &[Keypoint3D]) -> (Vec<Vec3>, Vec<Vec3>) {
    pairs.iter().map(|&(s, d)| (kps[s].position, kps[d].position)).unzip()
}

struct ParityForest {
    parent: Vec<usize>,
    parity: Vec<bool>,
}

impl ParityForest {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            parity: alloc::vec![false; n],
        }
    }

    /// Root of `x` and whether `x` lies on the opposite side from it.
    fn find(&mut self, x: usize) -> (usize, bool) {
        let p = self.parent[x];
        if p == x {
            return (x, false);
        }
        let (root, par) = self.find(p);
        self.parent[x] = root;
        self.parity[x] ^= par;
        (root, self.parity[x])
    }

    fn union(&mut self, a: usize, b: usize, opposite: bool) {
        let (ra, pa) = self.find(a);
        let (rb, pb) = self.find(b);
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
            self.parity[hi] = pa ^ pb ^ opposite;
        }
    }
}

/// Orients the triplets of one cluster so that every member reads from the
/// same side, dropping triplets that straddle both.
///
/// A relative pose close to a half-turn is its own inverse, so a cluster can
/// hold matches in both directions between the same two instances, and even
/// triplets mixing the two. Keypoints are two-coloured by their
/// correspondences, groups that share no keypoint are aligned by proximity
/// to the source side of the largest group, and the colouring is then
/// refined spatially.
pub fn orient_members(ids: &[usize], triplets: &[TripletMatch], kps: &[Keypoint3D]) -> Vec<ClusterMember> {
    let mut local = alloc::collections::BTreeMap::new();
    for &t in ids {
        let tm = &triplets[t];
        for &k in tm.src.iter().chain(&tm.dst) {
            let n = local.len();
            local.entry(k).or_insert(n);
        }
    }
    let mut forest = ParityForest::new(local.len());
    for &t in ids {
        let tm = &triplets[t];
        let s: [usize; 3] = core::array::from_fn(|k| local[&tm.src[k]]);
        let d: [usize; 3] = core::array::from_fn(|k| local[&tm.dst[k]]);
        forest.union(s[0], s[1], false);
        forest.union(s[0], s[2], false);
        for k in 0..3 {
            forest.union(s[k], d[k], true);
        }
    }
    let placed: Vec<(usize, bool)> = ids.iter().map(|&t| forest.find(local[&triplets[t].src[0]])).collect();

    let mut sizes: alloc::collections::BTreeMap<usize, usize> = alloc::collections::BTreeMap::new();
    for &(root, _) in &placed {
        *sizes.entry(root).or_default() += 1;
    }
    let Some(main) = placed
        .iter()
        .map(|p| p.0)
        .max_by(|a, b| sizes[a].cmp(&sizes[b]).then(b.cmp(a)))
    else {
        return Vec::new();
    };
    let main_flip = placed.iter().find(|p| p.0 == main).is_some_and(|p| p.1);

    // Centroids of each root's parity-false and parity-true sides.
    let mut sums: alloc::collections::BTreeMap<usize, [(Vec3, usize); 2]> = alloc::collections::BTreeMap::new();
    for (&k, &l) in &local {
        let (root, par) = forest.find(l);
        let e = sums.entry(root).or_insert([(Vec3::zeros(), 0); 2]);
        e[par as usize].0 += kps[k].position;
        e[par as usize].1 += 1;
    }
    let centroid = |root: usize, side: bool| {
        let (sum, n) = sums[&root][side as usize];
        sum / n.max(1) as f64
    };
    let anchor = centroid(main, main_flip);
    let mut flip_of = alloc::collections::BTreeMap::new();
    flip_of.insert(main, main_flip);
    for &root in sizes.keys() {
        if root != main {
            let near_false = (centroid(root, false) - anchor).norm();
            let near_true = (centroid(root, true) - anchor).norm();
            flip_of.insert(root, near_true < near_false);
        }
    }
    // Side of every keypoint (true = destination), then a two-means pass
    // that keeps each correspondence split across the sides.
    let mut side: alloc::collections::BTreeMap<usize, bool> = alloc::collections::BTreeMap::new();
    for (&k, &l) in &local {
        let (root, par) = forest.find(l);
        side.insert(k, par != flip_of[&root]);
    }
    let mut pairs = BTreeSet::new();
    for &t in ids {
        let tm = &triplets[t];
        for k in 0..3 {
            pairs.insert((tm.src[k].min(tm.dst[k]), tm.src[k].max(tm.dst[k])));
        }
    }
    for _ in 0..16 {
        let mut acc = [(Vec3::zeros(), 0usize); 2];
        for (&k, &d) in &side {
            acc[d as usize].0 += kps[k].position;
            acc[d as usize].1 += 1;
        }
        if acc[0].1 == 0 || acc[1].1 == 0 {
            break;
        }
        let cs = acc[0].0 / acc[0].1 as f64;
        let cd = acc[1].0 / acc[1].1 as f64;
        let mut changed = false;
        for &(x, y) in &pairs {
            let (px, py) = (kps[x].position, kps[y].position);
            let x_dst = (px - cd).norm() + (py - cs).norm() < (px - cs).norm() + (py - cd).norm();
            if side[&x] != x_dst || side[&y] == x_dst {
                side.insert(x, x_dst);
                side.insert(y, !x_dst);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    ids.iter()
        .filter_map(|&triplet| {
            let tm = &triplets[triplet];
            let src_side = side[&tm.src[0]];
            let consistent = (0..3).all(|k| side[&tm.src[k]] == src_side && side[&tm.dst[k]] != src_side);
            consistent.then_some(ClusterMember {
                triplet,
                reversed: src_side,
            })
        })
        .collect()
}

/// Least-squares rigid transform over all deduplicated correspondences of
/// the members.
pub fn refit_cluster_transform(
    members: &[ClusterMember],
    triplets: &[TripletMatch],
    kps: &[Keypoint3D],
) -> Result<RigidTransform> {
    let pairs = member_correspondences(members, triplets);
    let (src, dst) = positions(&pairs, kps);
    register_points(&src, &dst)
}

impl Cluster {
    pub fn from_members(
        mut members: Vec<ClusterMember>,
        triplets: &[TripletMatch],
        kps: &[Keypoint3D],
    ) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        let transform = refit_cluster_transform(&members, triplets, kps)?;
        let pairs = member_correspondences(&members, triplets);
        let src_points: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let dst_points: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        Ok(Self {
            members,
            transform,
            src_points: src_points.into_iter().collect(),
            dst_points: dst_points.into_iter().collect(),
        })
    }

    pub fn correspondences(&self, triplets: &[TripletMatch]) -> Vec<(usize, usize)> {
        member_correspondences(&self.members, triplets)
    }

    /// Mean distance between transformed source points and their targets.
    pub fn mean_residual(&self, triplets: &[TripletMatch], kps: &[Keypoint3D]) -> f64 {
        let pairs = self.correspondences(triplets);
        if pairs.is_empty() {
            return 0.0;
        }
        pairs
            .iter()
            .map(|&(s, d)| (self.transform.apply(&kps[s].position) - kps[d].position).norm())
            .sum::<f64>()
            / pairs.len() as f64
    }
}

fn mean_inverse_residual(t: &RigidTransform, pairs: &[(usize, usize)], kps: &[Keypoint3D]) -> f64 {
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    pairs
        .iter()
        .map(|&(s, d)| (t.apply(&kps[d].position) - kps[s].position).norm())
        .sum::<f64>()
        / pairs.len() as f64
}

/// Distance between `a`'s transform and the inverse of `b`'s, on the six-term
/// scale of the triplet distance: three times the mean residual of `a`'s
/// transform on `b`'s swapped correspondences plus the same the other way.
pub fn inverse_cluster_distance(a: &Cluster, b: &Cluster, triplets: &[TripletMatch], kps: &[Keypoint3D]) -> f64 {
    let pa = a.correspondences(triplets);
    let pb = b.correspondences(triplets);
    3.0 * mean_inverse_residual(&a.transform, &pb, kps) + 3.0 * mean_inverse_residual(&b.transform, &pa, kps)
}

/// Folds every cluster whose transform is the inverse of an earlier
/// cluster's into it (with its members reversed), until no pair qualifies.
pub fn merge_inverse_clusters(
    clusters: Vec<Cluster>,
    triplets: &[TripletMatch],
    kps: &[Keypoint3D],
    eps: f64,
) -> Vec<Cluster> {
    let mut clusters = clusters;
    'scan: loop {
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                if inverse_cluster_distance(&clusters[i], &clusters[j], triplets, kps) > eps {
                    continue;
                }
                let mut members = clusters[i].members.clone();
                members.extend(clusters[j].members.iter().map(|m| ClusterMember {
                    triplet: m.triplet,
                    reversed: !m.reversed,
                }));
                if let Ok(merged) = Cluster::from_members(members, triplets, kps) {
                    clusters[i] = merged;
                    clusters.remove(j);
                    continue 'scan;
                }
            }
        }
        break;
    }
    clusters
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub min_cluster_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 35.0,
            min_pts: 3,
            min_cluster_size: 14,
        }
    }
}

/// DBSCAN, refit, inverse merging and the minimum-size discard rule.
pub fn cluster_triplets(triplets: &[TripletMatch], kps: &[Keypoint3D], cfg: &ClusterConfig) -> Vec<Cluster> {
    let raw = dbscan_triplets(triplets, kps, cfg.eps, cfg.min_pts);
    let clusters: Vec<Cluster> = raw
        .into_iter()
        .filter_map(|ids| {
            let members = orient_members(&ids, triplets, kps);
            Cluster::from_members(members, triplets, kps).ok()
        })
        .collect();
    merge_inverse_clusters(clusters, triplets, kps, cfg.eps)
        .into_iter()
        .filter(|c| c.members.len() >= cfg.min_cluster_size)
        .collect()
}
