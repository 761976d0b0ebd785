//! Text formats: keypoints (`.kp3`), object models (`.objm`), ground-truth
//! annotations and instance rows.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use disco_core::frame::Keypoint3D;
use disco_core::modelgraph::{Landmark, ObjectModel};
use disco_core::synth::{Aabb, Annotation};
use disco_core::{RigidTransform, Vec3};

use crate::{Error, Result};

/// Content lines with their 1-based line numbers.
struct Lines<'a> {
    path: &'a Path,
    lines: Vec<(usize, &'a str)>,
    pos: usize,
    total: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self {
            path,
            lines,
            pos: 0,
            total: text.lines().count(),
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let Some(&l) = self.lines.get(self.pos) else {
            return Err(self.err(self.total + 1, format!("unexpected end of file, expected {what}")));
        };
        self.pos += 1;
        Ok(l)
    }

    fn finish(&self) -> Result<()> {
        match self.lines.get(self.pos) {
            Some(&(line, _)) => Err(self.err(line, "unexpected content after the declared rows")),
            None => Ok(()),
        }
    }

    fn value<T: FromStr>(&self, line: usize, tok: &str, what: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| self.err(line, format!("invalid {what} {tok:?}")))
    }

    fn reals(&self, line: usize, s: &str) -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|t| {
                let v: f64 = self.value(line, t, "number")?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.err(line, format!("non-finite number {t:?}")))
                }
            })
            .collect()
    }

    /// `MAGIC 1 n1 n2 ...` with `fields` counts after the version.
    fn header(&mut self, magic: &str, fields: &[&str]) -> Result<Vec<usize>> {
        let (line, text) = self.next("header")?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.first() != Some(&magic) {
            return Err(self.err(line, format!("expected {magic} header")));
        }
        if toks.get(1) != Some(&"1") {
            return Err(self.err(line, format!("unsupported {magic} version")));
        }
        if toks.len() != 2 + fields.len() {
            return Err(self.err(line, format!("header must be `{magic} 1 {}`", fields.join(" "))));
        }
        toks[2..]
            .iter()
            .zip(fields)
            .map(|(t, f)| self.value(line, t, f))
            .collect()
    }

    fn pose(&mut self) -> Result<RigidTransform> {
        let (line, text) = self.next("pose row")?;
        let v = self.reals(line, text)?;
        let arr: [f64; 12] = v
            .try_into()
            .map_err(|v: Vec<f64>| self.err(line, format!("pose row has {} values, expected 12", v.len())))?;
        let pose = RigidTransform::from_row_array(&arr);
        if !pose.is_valid(1e-6) {
            return Err(self.err(line, "pose rotation is not orthonormal"));
        }
        Ok(pose)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn push_reals(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v}").unwrap();
    }
}

fn push_pose(out: &mut String, pose: &RigidTransform) {
    push_reals(out, pose.to_row_array());
    out.push('\n');
}

fn check_dim(what: &str, expected: usize, descriptors: impl IntoIterator<Item = usize>) -> Result<()> {
    for found in descriptors {
        if found != expected {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Keypoints together with the descriptor length declared in the header.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub dim: usize,
    pub keypoints: Vec<Keypoint3D>,
}

/// Serializes keypoints as `KP3 1 <N> <D>` followed by one
/// `u v x y z nx ny nz d1 ... dD` row each.
pub fn write_kp3(kps: &[Keypoint3D], dim: usize) -> Result<String> {
    check_dim("keypoint", dim, kps.iter().map(|k| k.descriptor.len()))?;
    let mut out = format!("KP3 1 {} {dim}\n", kps.len());
    for k in kps {
        push_reals(
            &mut out,
            k.pixel
                .iter()
                .chain(k.position.iter())
                .chain(k.normal.iter())
                .chain(&k.descriptor)
                .copied(),
        );
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_kp3(path: &Path, text: &str) -> Result<KeypointSet> {
    let mut lines = Lines::new(path, text);
    let h = lines.header("KP3", &["N", "D"])?;
    let (n, dim) = (h[0], h[1]);
    let mut keypoints = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let (line, row) = lines.next("keypoint row")?;
        let v = lines.reals(line, row)?;
        if v.len() != 8 + dim {
            return Err(lines.err(
                line,
                format!(
                    "keypoint row has {} descriptor values, header declares D={dim}",
                    v.len().saturating_sub(8)
                ),
            ));
        }
        let k = Keypoint3D {
            pixel: [v[0], v[1]],
            position: Vec3::new(v[2], v[3], v[4]),
            normal: Vec3::new(v[5], v[6], v[7]),
            descriptor: v[8..].to_vec(),
        };
        if !k.is_valid() {
            return Err(lines.err(line, "keypoint needs a unit normal and positive depth"));
        }
        keypoints.push(k);
    }
    lines.finish()?;
    Ok(KeypointSet { dim, keypoints })
}

pub fn read_kp3(path: &Path) -> Result<KeypointSet> {
    parse_kp3(path, &read(path)?)
}

pub fn load_keypoints(path: &Path) -> Result<Vec<Keypoint3D>> {
    Ok(read_kp3(path)?.keypoints)
}

/// Writes `kps`, taking D from the first keypoint (0 when empty).
pub fn save_keypoints(path: &Path, kps: &[Keypoint3D]) -> Result<()> {
    let dim = kps.first().map_or(0, |k| k.descriptor.len());
    write(path, &write_kp3(kps, dim)?)
}

/// An object model together with the descriptor length declared in the header.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub dim: usize,
    pub model: ObjectModel,
}

/// Serializes a model as `OBJM 1 <L> <D> <K>`, L landmark rows
/// `x y z obs d1 ... dD` and K pose rows.
pub fn write_objm(model: &ObjectModel, dim: usize) -> Result<String> {
    check_dim("landmark", dim, model.landmarks.iter().map(|l| l.descriptor.len()))?;
    let mut out = format!("OBJM 1 {} {dim} {}\n", model.landmarks.len(), model.instances.len());
    for l in &model.landmarks {
        push_reals(&mut out, l.position.iter().copied());
        write!(out, " {}", l.observations).unwrap();
        if dim > 0 {
            out.push(' ');
        }
        push_reals(&mut out, l.descriptor.iter().copied());
        out.push('\n');
    }
    for pose in &model.instances {
        push_pose(&mut out, pose);
    }
    Ok(out)
}

pub fn parse_objm(path: &Path, text: &str) -> Result<ModelFile> {
    let mut lines = Lines::new(path, text);
    let h = lines.header("OBJM", &["L", "D", "K"])?;
    let (n_land, dim, n_inst) = (h[0], h[1], h[2]);
    let mut landmarks = Vec::with_capacity(n_land.min(1 << 20));
    for _ in 0..n_land {
        let (line, row) = lines.next("landmark row")?;
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != 4 + dim {
            return Err(lines.err(
                line,
                format!(
                    "landmark row has {} descriptor values, header declares D={dim}",
                    toks.len().saturating_sub(4)
                ),
            ));
        }
        let p = lines.reals(line, &toks[..3].join(" "))?;
        let observations = lines.value(line, toks[3], "observation count")?;
        let descriptor = lines.reals(line, &toks[4..].join(" "))?;
        landmarks.push(Landmark {
            position: Vec3::new(p[0], p[1], p[2]),
            descriptor,
            observations,
        });
    }
    let mut instances = Vec::with_capacity(n_inst.min(1 << 16));
    for _ in 0..n_inst {
        instances.push(lines.pose()?);
    }
    lines.finish()?;
    Ok(ModelFile {
        dim,
        model: ObjectModel::new(landmarks, instances),
    })
}

pub fn read_objm(path: &Path) -> Result<ModelFile> {
    parse_objm(path, &read(path)?)
}

pub fn save_objm(path: &Path, model: &ObjectModel) -> Result<()> {
    write(path, &write_objm(model, model.descriptor_dim().unwrap_or(0))?)
}

/// Serializes annotations as `ANN 1 <K>` and, per instance,
/// `obj=<id> box=(xmin ymin zmin xmax ymax zmax)` plus a pose row.
pub fn write_annotations(anns: &[Annotation]) -> String {
    let mut out = format!("ANN 1 {}\n", anns.len());
    for a in anns {
        write!(out, "obj={} box=(", a.object).unwrap();
        push_reals(&mut out, a.bbox.min.iter().chain(a.bbox.max.iter()).copied());
        out.push_str(")\n");
        push_pose(&mut out, &a.pose);
    }
    out
}

pub fn parse_annotations(path: &Path, text: &str) -> Result<Vec<Annotation>> {
    let mut lines = Lines::new(path, text);
    let k = lines.header("ANN", &["K"])?[0];
    let mut anns = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        let (line, row) = lines.next("annotation row")?;
        let malformed = || lines.err(line, "expected `obj=<id> box=(xmin ymin zmin xmax ymax zmax)`");
        let (obj, rest) = row.split_once(char::is_whitespace).ok_or_else(malformed)?;
        let obj = obj.strip_prefix("obj=").ok_or_else(malformed)?;
        let inner = rest
            .trim()
            .strip_prefix("box=(")
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(malformed)?;
        let object = lines.value(line, obj, "object id")?;
        let b = lines.reals(line, inner)?;
        if b.len() != 6 {
            return Err(malformed());
        }
        let bbox = Aabb {
            min: Vec3::new(b[0], b[1], b[2]),
            max: Vec3::new(b[3], b[4], b[5]),
        };
        let pose = lines.pose()?;
        anns.push(Annotation { object, pose, bbox });
    }
    lines.finish()?;
    Ok(anns)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    parse_annotations(path, &read(path)?)
}

pub fn save_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    write(path, &write_annotations(anns))
}

/// One detected or discovered instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRow {
    pub model: usize,
    pub inliers: usize,
    pub ratio: f64,
    /// Model frame to scene.
    pub pose: RigidTransform,
}

/// Serializes rows as `INST 1 <K>` and, per instance,
/// `model=<id> inliers=<n> ratio=<r>` plus a pose row.
pub fn write_instances(rows: &[InstanceRow]) -> String {
    let mut out = format!("INST 1 {}\n", rows.len());
    for r in rows {
        writeln!(out, "model={} inliers={} ratio={}", r.model, r.inliers, r.ratio).unwrap();
        push_pose(&mut out, &r.pose);
    }
    out
}

pub fn parse_instances(path: &Path, text: &str) -> Result<Vec<InstanceRow>> {
    let mut lines = Lines::new(path, text);
    let k = lines.header("INST", &["K"])?[0];
    let mut rows = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        let (line, row) = lines.next("instance row")?;
        let toks: Vec<&str> = row.split_whitespace().collect();
        let field = |i: usize, key: &str| {
            toks.get(i)
                .and_then(|t| t.strip_prefix(key))
                .and_then(|t| t.strip_prefix('='))
                .ok_or_else(|| lines.err(line, "expected `model=<id> inliers=<n> ratio=<r>`"))
        };
        if toks.len() != 3 {
            return Err(lines.err(line, "expected `model=<id> inliers=<n> ratio=<r>`"));
        }
        let model = lines.value(line, field(0, "model")?, "model id")?;
        let inliers = lines.value(line, field(1, "inliers")?, "inlier count")?;
        let ratio: f64 = lines.value(line, field(2, "ratio")?, "ratio")?;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(lines.err(line, format!("ratio {ratio} outside [0, 1]")));
        }
        let pose = lines.pose()?;
        rows.push(InstanceRow {
            model,
            inliers,
            ratio,
            pose,
        });
    }
    lines.finish()?;
    Ok(rows)
}

pub fn load_instances(path: &Path) -> Result<Vec<InstanceRow>> {
    parse_instances(path, &read(path)?)
}

pub fn save_instances(path: &Path, rows: &[InstanceRow]) -> Result<()> {
    write(path, &write_instances(rows))
}
