//! Unique descriptor matching and generation of geometrically consistent
//! triplets of matches.

use alloc::vec::Vec;

use crate::frame::Keypoint3D;
use crate::geom::{
    self, compute_ppf, ppf_compatible, sidedness_consistent, triangle_valid, triangles_overlap, umeyama3,
    OrientedTriangle, RigidTransform, Triangle,
};
use crate::math;

/// Two keypoints paired by descriptor similarity, `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointMatch {
    pub i: usize,
    pub j: usize,
    pub desc_dist: f64,
}

pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Greedy one-to-one matching: repeatedly takes the globally closest pair of
/// still-unused keypoints whose descriptor distance is at most `max_dist`.
/// Ties go to the lexicographically smaller `(i, j)`.
pub fn match_descriptors(kps: &[Keypoint3D], max_dist: f64) -> Vec<KeypointMatch> {
    let n = kps.len();
    let rows = crate::par::map_range(n, |i| {
        let mut row = Vec::new();
        for j in i + 1..n {
            let d = descriptor_distance(&kps[i].descriptor, &kps[j].descriptor);
            if d <= max_dist {
                row.push(KeypointMatch { i, j, desc_dist: d });
            }
        }
        row
    });
    let mut candidates: Vec<KeypointMatch> = rows.into_iter().flatten().collect();
    candidates.sort_by(|a, b| {
        a.desc_dist
            .total_cmp(&b.desc_dist)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    let mut used = alloc::vec![false; n];
    let mut out = Vec::new();
    for m in candidates {
        if !used[m.i] && !used[m.j] {
            used[m.i] = true;
            used[m.j] = true;
            out.push(m);
        }
    }
    out
}

/// Relative orientation of two matches inside a triplet. `Aligned` pairs
/// `(a.i, b.i)` with `(a.j, b.j)`; `Flipped` pairs `(a.i, b.j)` with `(a.j, b.i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Orientation {
    Aligned,
    Flipped,
}

impl Orientation {
    fn relative(self, other: Orientation) -> Orientation {
        if self == other {
            Orientation::Aligned
        } else {
            Orientation::Flipped
        }
    }
}

/// Which orientations of each unordered pair of matches are PPF-compatible.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRelation {
    matches: usize,
    /// Bit 0: aligned, bit 1: flipped; indexed `a * matches + b`, `a < b`.
    flags: Vec<u8>,
    /// For each match, compatible partners with a larger index, ascending.
    neighbors: Vec<Vec<(usize, Orientation)>>,
}

impl PairRelation {
    /// Every orientation of every pair is compatible.
    pub fn complete(matches: usize) -> Self {
        Self::from_fn(matches, |_, _| (true, true))
    }

    fn from_fn(matches: usize, f: impl Fn(usize, usize) -> (bool, bool)) -> Self {
        let mut flags = alloc::vec![0u8; matches * matches];
        let mut neighbors = alloc::vec![Vec::new(); matches];
        for a in 0..matches {
            for b in a + 1..matches {
                let (aligned, flipped) = f(a, b);
                let bits = aligned as u8 | ((flipped as u8) << 1);
                flags[a * matches + b] = bits;
                if aligned {
                    neighbors[a].push((b, Orientation::Aligned));
                }
                if flipped {
                    neighbors[a].push((b, Orientation::Flipped));
                }
            }
        }
        Self {
            matches,
            flags,
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.matches
    }

    pub fn is_empty(&self) -> bool {
        self.matches == 0
    }

    pub fn compatible(&self, a: usize, b: usize, o: Orientation) -> bool {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let bits = self.flags[a * self.matches + b];
        match o {
            Orientation::Aligned => bits & 1 != 0,
            Orientation::Flipped => bits & 2 != 0,
        }
    }

    /// Number of compatible (pair, orientation) entries.
    pub fn count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    fn neighbors(&self, a: usize) -> &[(usize, Orientation)] {
        &self.neighbors[a]
    }
}

fn pair_compatible(
    kps: &[Keypoint3D],
    src: (usize, usize),
    dst: (usize, usize),
    dist_tol: f64,
    angle_tol: f64,
) -> bool {
    let f = |(x, y): (usize, usize)| compute_ppf(&kps[x].position, &kps[x].normal, &kps[y].position, &kps[y].normal);
    match (f(src), f(dst)) {
        (Ok(a), Ok(b)) => ppf_compatible(&a, &b, dist_tol, angle_tol),
        _ => false,
    }
}

/// Point-pair-feature pruning of every unordered pair of matches, in both
/// relative orientations.
pub fn prune_pairs_ppf(matches: &[KeypointMatch], kps: &[Keypoint3D], dist_tol: f64, angle_tol: f64) -> PairRelation {
    let m = matches.len();
    let rows = crate::par::map_range(m, |a| {
        let ma = &matches[a];
        (a + 1..m)
            .map(|b| {
                let mb = &matches[b];
                let aligned = pair_compatible(kps, (ma.i, mb.i), (ma.j, mb.j), dist_tol, angle_tol);
                let flipped = pair_compatible(kps, (ma.i, mb.j), (ma.j, mb.i), dist_tol, angle_tol);
                (aligned, flipped)
            })
            .collect::<Vec<_>>()
    });
    PairRelation::from_fn(m, |a, b| rows[a][b - a - 1])
}

/// Two corresponding keypoint triangles and the pose mapping `src` onto `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletMatch {
    pub src: [usize; 3],
    pub dst: [usize; 3],
    pub pose: RigidTransform,
    /// RMS residual of the three-point fit, mm.
    pub residual: f64,
}

impl TripletMatch {
    pub fn src_triangle(&self, kps: &[Keypoint3D]) -> Triangle {
        self.src.map(|k| kps[k].position)
    }

    pub fn dst_triangle(&self, kps: &[Keypoint3D]) -> Triangle {
        self.dst.map(|k| kps[k].position)
    }

    /// The same correspondence read in the opposite direction.
    pub fn reversed(&self) -> TripletMatch {
        TripletMatch {
            src: self.dst,
            dst: self.src,
            pose: self.pose.inverse(),
            residual: self.residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletFilters {
    pub triangle: bool,
    pub sidedness: bool,
    pub overlap: bool,
}

impl Default for TripletFilters {
    fn default() -> Self {
        Self {
            triangle: true,
            sidedness: true,
            overlap: true,
        }
    }
}

impl TripletFilters {
    pub fn none() -> Self {
        Self {
            triangle: false,
            sidedness: false,
            overlap: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub min_edge: f64,
    pub max_edge: f64,
    pub min_angle: f64,
    pub sidedness_eps: f64,
    /// Maximum number of accepted triplets any keypoint may appear in.
    pub keypoint_cap: usize,
    pub filters: TripletFilters,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            min_edge: 10.0,
            max_edge: 125.0,
            min_angle: 10f64.to_radians(),
            sidedness_eps: 0.1,
            keypoint_cap: 60,
            filters: TripletFilters::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutcome {
    pub triplets: Vec<TripletMatch>,
    /// (combination, orientation) candidates that passed every enabled
    /// filter, before the per-keypoint cap.
    pub candidates: usize,
}

fn oriented(kps: &[Keypoint3D], idx: &[usize; 3]) -> OrientedTriangle {
    OrientedTriangle::new(idx.map(|k| kps[k].position), idx.map(|k| kps[k].normal))
}

fn triangle_checks(kps: &[Keypoint3D], src: &[usize; 3], dst: &[usize; 3], cfg: &TripletConfig) -> bool {
    let p = oriented(kps, src);
    let q = oriented(kps, dst);
    if cfg.filters.triangle
        && !(triangle_valid(&p.points, cfg.min_edge, cfg.max_edge, cfg.min_angle)
            && triangle_valid(&q.points, cfg.min_edge, cfg.max_edge, cfg.min_angle))
    {
        return false;
    }
    if cfg.filters.sidedness && !sidedness_consistent(&p, &q, cfg.sidedness_eps).unwrap_or(false) {
        return false;
    }
    if cfg.filters.overlap && triangles_overlap(&p.points, &q.points) {
        return false;
    }
    true
}

fn endpoints(m: &KeypointMatch, o: Orientation) -> (usize, usize) {
    match o {
        Orientation::Aligned => (m.i, m.j),
        Orientation::Flipped => (m.j, m.i),
    }
}

/// Enumerates triplets of matches in the four non-equivalent orientations
/// (the first match fixed, the other two free), keeps those passing the
/// pair relation and the enabled triangle filters, fits their poses and
/// applies the per-keypoint cap in ascending-residual order.
pub fn generate_triplets(
    matches: &[KeypointMatch],
    relation: &PairRelation,
    kps: &[Keypoint3D],
    cfg: &TripletConfig,
) -> TripletOutcome {
    assert_eq!(relation.len(), matches.len(), "relation built for other matches");
    let per_first = crate::par::map_range(matches.len(), |a| {
        let mut found = Vec::new();
        let mut candidates = 0usize;
        let nb = relation.neighbors(a);
        for (x, &(b, ob)) in nb.iter().enumerate() {
            for &(c, oc) in &nb[x + 1..] {
                if c <= b || !relation.compatible(b, c, ob.relative(oc)) {
                    continue;
                }
                let (s0, d0) = (matches[a].i, matches[a].j);
                let (s1, d1) = endpoints(&matches[b], ob);
                let (s2, d2) = endpoints(&matches[c], oc);
                let src = [s0, s1, s2];
                let dst = [d0, d1, d2];
                if !triangle_checks(kps, &src, &dst, cfg) {
                    continue;
                }
                candidates += 1;
                let p = src.map(|k| kps[k].position);
                let q = dst.map(|k| kps[k].position);
                if let Ok(pose) = umeyama3(&p, &q) {
                    found.push(TripletMatch {
                        src,
                        dst,
                        pose,
                        residual: geom::rms_residual(&pose, &p, &q),
                    });
                }
            }
        }
        (found, candidates)
    });

    let mut candidates = 0;
    let mut pool = Vec::new();
    for (found, c) in per_first {
        candidates += c;
        pool.extend(found);
    }
    pool.sort_by(|a, b| {
        a.residual
            .total_cmp(&b.residual)
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
    });
    let mut usage = alloc::vec![0usize; kps.len()];
    let mut accepted = Vec::new();
    for t in pool {
        let fits = t.src.iter().chain(&t.dst).all(|&k| usage[k] < cfg.keypoint_cap);
        if fits {
            for &k in t.src.iter().chain(&t.dst) {
                usage[k] += 1;
            }
            accepted.push(t);
        }
    }
    accepted.sort_by(|a, b| a.src.cmp(&b.src).then(a.dst.cmp(&b.dst)));
    TripletOutcome {
        triplets: accepted,
        candidates,
    }
}
