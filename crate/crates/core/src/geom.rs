//! Rigid transforms, least-squares rigid registration, point pair features
//! and the triangle predicates used to filter triplet matches.

use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};

use crate::math;
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Triangle = [Vec3; 3];

/// A 6-DOF pose acting as `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        let rotation = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self::new(rotation, translation)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// Row-major rotation followed by translation.
    pub fn to_row_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_array(v: &[f64; 12]) -> Self {
        let rotation = Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vec3::new(v[9], v[10], v[11]))
    }

    /// True if the rotation part is orthonormal with determinant +1 within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let off = (rtr - Mat3::identity()).abs().max();
        off <= tol && math::abs(self.rotation.determinant() - 1.0) <= tol
    }

    /// Rotation angle in radians, computed from the chordal distance to the
    /// identity so it stays accurate near zero.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle_between(&self.rotation, &Mat3::identity())
    }
}

/// Angle of `a · bᵀ` in radians, in `[0, π]`.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    // ‖A − B‖_F = 2√2 · sin(θ/2)
    let chord = (a - b).norm() / (2.0 * core::f64::consts::SQRT_2);
    2.0 * math::asin(chord.min(1.0))
}

/// Angle between two vectors in `[0, π]`. Zero vectors give 0.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    math::atan2(a.cross(b).norm(), a.dot(b))
}

/// Four-component feature describing two oriented surface points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPairFeature {
    pub dist: f64,
    pub angle_n1_d: f64,
    pub angle_n2_d: f64,
    pub angle_n1_n2: f64,
}

pub fn compute_ppf(m1: &Vec3, n1: &Vec3, m2: &Vec3, n2: &Vec3) -> Result<PointPairFeature> {
    let d = m2 - m1;
    let dist = d.norm();
    if dist < 1e-9 {
        return Err(Error::DegeneratePair);
    }
    Ok(PointPairFeature {
        dist,
        angle_n1_d: angle_between(n1, &d),
        angle_n2_d: angle_between(n2, &d),
        angle_n1_n2: angle_between(n1, n2),
    })
}

pub fn ppf_compatible(f1: &PointPairFeature, f2: &PointPairFeature, dist_tol: f64, angle_tol: f64) -> bool {
    math::abs(f1.dist - f2.dist) <= dist_tol
        && math::abs(f1.angle_n1_d - f2.angle_n1_d) <= angle_tol
        && math::abs(f1.angle_n2_d - f2.angle_n2_d) <= angle_tol
        && math::abs(f1.angle_n1_n2 - f2.angle_n1_n2) <= angle_tol
}

pub fn triangle_area(t: &Triangle) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

/// Least-squares rigid transform mapping the three points `p` onto `q`.
pub fn umeyama3(p: &Triangle, q: &Triangle) -> Result<RigidTransform> {
    if triangle_area(p) <= 1e-6 {
        return Err(Error::DegenerateInput);
    }
    Ok(kabsch(p, q))
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]` for any
/// number of correspondences (at least three, not all collinear).
pub fn register_points(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    assert_eq!(src.len(), dst.len(), "correspondence lists differ in length");
    if src.len() < 3 || is_collinear(src) {
        return Err(Error::DegenerateInput);
    }
    Ok(kabsch(src, dst))
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = Vec3::zeros();
    for p in points {
        c += p;
    }
    c / points.len() as f64
}

/// Points lie on a line (or coincide) relative to their own spread.
pub fn is_collinear(points: &[Vec3]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let c = centroid(points);
    let far = points
        .iter()
        .map(|p| p - c)
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
        .unwrap();
    let len = far.norm();
    if len < 1e-9 {
        return true;
    }
    let axis = far / len;
    let off = points.iter().map(|p| (p - c).cross(&axis).norm()).fold(0.0, f64::max);
    off <= 1e-9 * len.max(1.0)
}

/// Least-squares rotation via the dominant eigenvector of Horn's 4x4 matrix.
fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut m = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        m += (s - cs) * (d - cd).transpose();
    }
    let (xx, xy, xz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (yx, yy, yz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (zx, zy, zz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    #[rustfmt::skip]
    let n = Matrix4::new(
        xx + yy + zz, yz - zy, zx - xz, xy - yx,
        yz - zy, xx - yy - zz, xy + yx, zx + xz,
        zx - xz, xy + yx, -xx + yy - zz, yz + zy,
        xy - yx, zx + xz, yz + zy, -xx - yy + zz,
    );
    let eig = SymmetricEigen::new(n);
    let q = eig.eigenvectors.column(eig.eigenvalues.imax());
    let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner();
    RigidTransform::new(rotation, cd - rotation * cs)
}

/// Root-mean-square residual of `t` over the correspondences.
pub fn rms_residual(t: &RigidTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let ss: f64 = src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    math::sqrt(ss / src.len() as f64)
}

/// Bidirectional sum of point-to-point distances between two triplet
/// matches: `Σ‖T_pq(aᵢ) − bᵢ‖ + Σ‖T_ab(pᵢ) − qᵢ‖`.
pub fn triplet_pair_distance(
    t_pq: &RigidTransform,
    t_ab: &RigidTransform,
    p: &Triangle,
    q: &Triangle,
    a: &Triangle,
    b: &Triangle,
) -> f64 {
    let mut sum = 0.0;
    for i in 0..3 {
        sum += (t_pq.apply(&a[i]) - b[i]).norm();
        sum += (t_ab.apply(&p[i]) - q[i]).norm();
    }
    sum
}

/// A triangle whose vertices carry surface normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedTriangle {
    pub points: Triangle,
    pub normals: Triangle,
}

impl OrientedTriangle {
    pub fn new(points: Triangle, normals: Triangle) -> Self {
        Self { points, normals }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.map(|p| t.apply(&p)),
            normals: self.normals.map(|n| t.apply_vector(&n)),
        }
    }

    /// Signed alignment of each edge cross product `dᵢ × dⱼ` (i < j) with
    /// the mean vertex normal. A proper rigid motion leaves these unchanged;
    /// a reflection flips their sign.
    fn side_indicators(&self) -> Result<[f64; 3]> {
        let [p1, p2, p3] = self.points;
        let edges = [p2 - p1, p3 - p2, p1 - p3];
        let mean_normal = self.normals[0] + self.normals[1] + self.normals[2];
        let mn = mean_normal.norm();
        if mn < 1e-9 {
            return Err(Error::DegenerateTriangle);
        }
        let mean_normal = mean_normal / mn;
        let mut out = [0.0; 3];
        for (slot, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            let v = edges[i].cross(&edges[j]);
            let len = v.norm();
            if len < 1e-12 {
                return Err(Error::DegenerateTriangle);
            }
            out[slot] = v.dot(&mean_normal) / len;
        }
        Ok(out)
    }
}

/// False when the two triangles are mirror images of each other.
///
/// For every edge pair the cross product is signed against the surface
/// normal of its own triangle; the match is rejected when the two signed
/// values point in opposite directions and nearly cancel (`|s_P + s_Q| < eps`).
pub fn sidedness_consistent(p: &OrientedTriangle, q: &OrientedTriangle, eps: f64) -> Result<bool> {
    let sp = p.side_indicators()?;
    let sq = q.side_indicators()?;
    Ok(sp
        .iter()
        .zip(&sq)
        .all(|(a, b)| !(a * b < 0.0 && math::abs(a + b) < eps)))
}

/// Every edge within `[min_edge, max_edge]` and every interior angle at
/// least `min_angle`.
pub fn triangle_valid(t: &Triangle, min_edge: f64, max_edge: f64, min_angle: f64) -> bool {
    for i in 0..3 {
        let a = t[i];
        let b = t[(i + 1) % 3];
        let c = t[(i + 2) % 3];
        let len = (b - a).norm();
        if !(min_edge..=max_edge).contains(&len) {
            return false;
        }
        if angle_between(&(b - a), &(c - a)) < min_angle {
            return false;
        }
    }
    true
}

const CONTACT_TOL: f64 = 1e-6;

/// True if the two 3D triangles touch or intersect (within 1 µm).
pub fn triangles_overlap(p: &Triangle, q: &Triangle) -> bool {
    let (cp, rp) = bounding_sphere(p);
    let (cq, rq) = bounding_sphere(q);
    if (cp - cq).norm() > rp + rq + CONTACT_TOL {
        return false;
    }
    for i in 0..3 {
        let (a, b) = (p[i], p[(i + 1) % 3]);
        if segment_triangle_distance(&a, &b, q) <= CONTACT_TOL {
            return true;
        }
        let (a, b) = (q[i], q[(i + 1) % 3]);
        if segment_triangle_distance(&a, &b, p) <= CONTACT_TOL {
            return true;
        }
    }
    false
}

fn bounding_sphere(t: &Triangle) -> (Vec3, f64) {
    let c = (t[0] + t[1] + t[2]) / 3.0;
    let r = t.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    (c, r)
}

fn segment_triangle_distance(a: &Vec3, b: &Vec3, tri: &Triangle) -> f64 {
    let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
    let nn = n.norm();
    if nn > 0.0 {
        let n = n / nn;
        let da = (a - tri[0]).dot(&n);
        let db = (b - tri[0]).dot(&n);
        if da * db < 0.0 {
            let x = a + (b - a) * (da / (da - db));
            if (closest_point_on_triangle(&x, tri) - x).norm() <= CONTACT_TOL {
                return 0.0;
            }
        }
    }
    let mut best = (closest_point_on_triangle(a, tri) - a).norm();
    best = best.min((closest_point_on_triangle(b, tri) - b).norm());
    for i in 0..3 {
        best = best.min(segment_segment_distance(a, b, &tri[i], &tri[(i + 1) % 3]));
    }
    best
}

/// Closest point on a triangle to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, tri: &Triangle) -> Vec3 {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = va + vb + vc;
    if math::abs(denom) < f64::MIN_POSITIVE {
        // Degenerate triangle: fall back to the nearest edge.
        let mut best = a;
        let mut best_d = f64::INFINITY;
        for (s, e) in [(a, b), (b, c), (c, a)] {
            let q = closest_point_on_segment(p, &s, &e);
            let d = (q - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        return best;
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

fn closest_point_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (s, t);
    if a <= f64::EPSILON && e <= f64::EPSILON {
        return r.norm();
    }
    if a <= f64::EPSILON {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= f64::EPSILON {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}
