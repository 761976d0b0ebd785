//! Synthetic scenes with ground truth, and detection scoring.

use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::frame::{project, CameraIntrinsics, Keypoint3D};
use crate::geom::{rotation_angle_between, RigidTransform, Vec3};
use crate::math;
use crate::{Error, Result};

/// Margin added around each annotated box, in mm.
pub const BOX_MARGIN: f64 = 5.0;
const MAX_ATTEMPTS: usize = 1000;
/// Centre of the sampled workspace.
pub const WORKSPACE_CENTER: Vec3 = Vec3::new(0.0, 0.0, 900.0);

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub landmarks: usize,
    /// Side of the cube the landmarks are sampled in, mm.
    pub extent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    /// Instance count per object, parallel to `objects`.
    pub instances: Vec<usize>,
    pub position_noise: f64,
    pub descriptor_noise: f64,
    pub descriptor_dim: usize,
    pub clutter: usize,
    /// Side of the workspace cube, mm.
    pub workspace_extent: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// One object with `landmarks` landmarks in a 100 mm cube, `instances`
    /// copies, 1 mm position noise and 150 clutter keypoints.
    pub fn single(landmarks: usize, instances: usize, seed: u64) -> Self {
        Self {
            objects: alloc::vec![ObjectSpec {
                landmarks,
                extent: 100.0,
            }],
            instances: alloc::vec![instances],
            position_noise: 1.0,
            descriptor_noise: 0.01,
            descriptor_dim: 32,
            clutter: 150,
            workspace_extent: 600.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() != self.instances.len() {
            return Err(Error::InvalidArgument("one instance count per object required"));
        }
        if self.objects.iter().any(|o| !(o.extent > 0.0)) || !(self.workspace_extent > 0.0) {
            return Err(Error::InvalidArgument("extents must be positive"));
        }
        if !(self.position_noise >= 0.0) || !(self.descriptor_noise >= 0.0) {
            return Err(Error::InvalidArgument("noise must be non-negative"));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::InvalidArgument("descriptor dimension must be positive"));
        }
        Ok(())
    }
}

/// Axis-aligned box in the scene frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub object: usize,
    /// Maps canonical object coordinates into the scene.
    pub pose: RigidTransform,
    pub bbox: Aabb,
}

/// Canonical object: landmark positions, normals and descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalObject {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub descriptors: Vec<Vec<f64>>,
}

/// Ground truth for one scene keypoint; clutter has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeypointLabel {
    pub object: usize,
    /// Index into the annotation list.
    pub instance: usize,
    pub landmark: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub keypoints: Vec<Keypoint3D>,
    pub annotations: Vec<Annotation>,
    /// Parallel to `keypoints`.
    pub labels: Vec<Option<KeypointLabel>>,
    pub objects: Vec<CanonicalObject>,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = math::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn unit_vec3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let v = unit_vector(rng, 3);
    Vec3::new(v[0], v[1], v[2])
}

/// Uniformly distributed rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    let q = unit_vector(rng, 4);
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn uniform_in_cube<R: Rng + ?Sized>(rng: &mut R, center: &Vec3, side: f64) -> Vec3 {
    let h = side / 2.0;
    center
        + Vec3::new(
            rng.random_range(-h..=h),
            rng.random_range(-h..=h),
            rng.random_range(-h..=h),
        )
}

fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Generates a scene deterministically from `spec.seed`.
///
/// Landmark descriptors are resampled until every pair is at least
/// `3·σ·√(2D)` apart, which is three times the expected distance between two
/// noisy copies of the same descriptor. Instances are placed so their bounding
/// spheres do not intersect.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.descriptor_dim;
    let separation = 3.0 * spec.descriptor_noise * math::sqrt(2.0 * dim as f64);

    let mut all_desc: Vec<Vec<f64>> = Vec::new();
    let mut objects = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let mut obj = CanonicalObject {
            positions: Vec::with_capacity(o.landmarks),
            normals: Vec::with_capacity(o.landmarks),
            descriptors: Vec::with_capacity(o.landmarks),
        };
        for _ in 0..o.landmarks {
            obj.positions.push(uniform_in_cube(&mut rng, &Vec3::zeros(), o.extent));
            obj.normals.push(unit_vec3(&mut rng));
            let mut attempt = 0;
            let d = loop {
                let d = unit_vector(&mut rng, dim);
                if all_desc.iter().all(|e| descriptor_distance(e, &d) >= separation) {
                    break d;
                }
                attempt += 1;
                if attempt >= MAX_ATTEMPTS {
                    return Err(Error::InfeasibleSpec("descriptor separation not achievable"));
                }
            };
            all_desc.push(d.clone());
            obj.descriptors.push(d);
        }
        objects.push(obj);
    }

    let pos_noise = Normal::new(0.0, spec.position_noise).map_err(|_| Error::InvalidArgument("position noise"))?;
    let desc_noise = Normal::new(0.0, spec.descriptor_noise).map_err(|_| Error::InvalidArgument("descriptor noise"))?;
    let intr = CameraIntrinsics::vga();

    let mut placed: Vec<(Vec3, f64)> = Vec::new();
    let mut annotations = Vec::new();
    let mut keypoints = Vec::new();
    let mut labels = Vec::new();
    for (oi, (o, &count)) in spec.objects.iter().zip(&spec.instances).enumerate() {
        let obj = &objects[oi];
        let radius = obj.positions.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for _ in 0..count {
            let mut attempt = 0;
            let center = loop {
                let c = uniform_in_cube(&mut rng, &WORKSPACE_CENTER, spec.workspace_extent - o.extent);
                if c.z - radius > 1.0 && placed.iter().all(|(q, r)| (c - q).norm() > r + radius) {
                    break c;
                }
                attempt += 1;
                if attempt >= MAX_ATTEMPTS {
                    return Err(Error::InfeasibleSpec("instances do not fit in the workspace"));
                }
            };
            placed.push((center, radius));
            let pose = RigidTransform::new(*random_rotation(&mut rng).to_rotation_matrix().matrix(), center);
            let instance = annotations.len();
            let mut min = Vec3::repeat(f64::INFINITY);
            let mut max = Vec3::repeat(f64::NEG_INFINITY);
            for (l, p) in obj.positions.iter().enumerate() {
                let exact = pose.apply(p);
                min = min.inf(&exact);
                max = max.sup(&exact);
                let position = exact + Vec3::from_fn(|_, _| pos_noise.sample(&mut rng));
                let descriptor = obj.descriptors[l]
                    .iter()
                    .map(|x| x + desc_noise.sample(&mut rng))
                    .collect();
                let (u, v, _) = project(&intr, &position);
                keypoints.push(Keypoint3D {
                    pixel: [u, v],
                    position,
                    normal: pose.apply_vector(&obj.normals[l]),
                    descriptor,
                });
                labels.push(Some(KeypointLabel {
                    object: oi,
                    instance,
                    landmark: l,
                }));
            }
            let margin = Vec3::repeat(BOX_MARGIN);
            annotations.push(Annotation {
                object: oi,
                pose,
                bbox: Aabb {
                    min: min - margin,
                    max: max + margin,
                },
            });
        }
    }

    for _ in 0..spec.clutter {
        let mut position = uniform_in_cube(&mut rng, &WORKSPACE_CENTER, spec.workspace_extent);
        position.z = position.z.max(1.0);
        let (u, v, _) = project(&intr, &position);
        keypoints.push(Keypoint3D {
            pixel: [u, v],
            position,
            normal: unit_vec3(&mut rng),
            descriptor: unit_vector(&mut rng, dim),
        });
        labels.push(None);
    }

    // Fisher-Yates so keypoint order carries no instance information.
    for i in (1..keypoints.len()).rev() {
        let j = rng.random_range(0..=i);
        keypoints.swap(i, j);
        labels.swap(i, j);
    }

    Ok(SyntheticScene {
        keypoints,
        annotations,
        labels,
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// True positives and misses per annotated object id. False positives
    /// have no object and only appear in `confusion`.
    pub per_object: Vec<Confusion>,
    /// Annotation matched to each detection.
    pub assignment: Vec<Option<usize>>,
}

fn cmp_vec(a: &Vec3, b: &Vec3) -> Ordering {
    (0..3)
        .map(|i| a[i].total_cmp(&b[i]))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Scores detections, each given by the scene positions of its inlier
/// keypoints, against annotations.
///
/// Pairs whose containment fraction reaches `containment` are assigned
/// greedily, highest fraction first and one-to-one. Ties are broken on the
/// box and detection geometry so the result does not depend on input order.
pub fn evaluate(detections: &[Vec<Vec3>], annotations: &[Annotation], containment: f64) -> Evaluation {
    let centroids: Vec<Vec3> = detections.iter().map(|d| centroid(d)).collect();
    let mut pairs = Vec::new();
    for (di, det) in detections.iter().enumerate() {
        if det.is_empty() {
            continue;
        }
        for (ai, ann) in annotations.iter().enumerate() {
            let inside = det.iter().filter(|p| ann.bbox.contains(p)).count();
            let frac = inside as f64 / det.len() as f64;
            if frac >= containment {
                pairs.push((frac, di, ai));
            }
        }
    }
    pairs.sort_by(|x, y| {
        let (ax, ay) = (&annotations[x.2], &annotations[y.2]);
        y.0.total_cmp(&x.0)
            .then_with(|| cmp_vec(&ax.bbox.min, &ay.bbox.min))
            .then_with(|| cmp_vec(&ax.bbox.max, &ay.bbox.max))
            .then_with(|| ax.object.cmp(&ay.object))
            .then_with(|| detections[x.1].len().cmp(&detections[y.1].len()))
            .then_with(|| cmp_vec(&centroids[x.1], &centroids[y.1]))
    });

    let mut assignment = alloc::vec![None; detections.len()];
    let mut taken = alloc::vec![false; annotations.len()];
    for (_, di, ai) in pairs {
        if assignment[di].is_none() && !taken[ai] {
            assignment[di] = Some(ai);
            taken[ai] = true;
        }
    }

    let n_obj = annotations.iter().map(|a| a.object + 1).max().unwrap_or(0);
    let mut per_object = alloc::vec![Confusion::default(); n_obj];
    for (ai, ann) in annotations.iter().enumerate() {
        if taken[ai] {
            per_object[ann.object].tp += 1;
        } else {
            per_object[ann.object].fn_ += 1;
        }
    }
    let tp = assignment.iter().filter(|a| a.is_some()).count();
    let confusion = Confusion {
        tp,
        fp: detections.len() - tp,
        fn_: annotations.len() - tp,
    };
    Evaluation {
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        confusion,
        per_object,
        assignment,
    }
}

/// Rotation error in degrees and translation error in mm.
pub fn pose_error(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let angle = rotation_angle_between(&est.rotation, &gt.rotation);
    (angle.to_degrees(), (est.translation - gt.translation).norm())
}
