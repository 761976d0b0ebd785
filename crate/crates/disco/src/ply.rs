//! ASCII PLY export of colored points.

use std::fmt::Write as _;

use disco_core::Vec3;

/// Instance colors, cycled by instance index. None of them is red.
pub const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [197, 176, 213],
];
pub const LANDMARK_COLOR: [u8; 3] = [255, 0, 0];
pub const UNASSIGNED_COLOR: [u8; 3] = [128, 128, 128];

pub fn instance_color(k: usize) -> [u8; 3] {
    PALETTE[k % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vec3,
    pub color: [u8; 3],
}

pub fn write_ply(points: &[ColoredPoint]) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\ncomment disco export\n");
    writeln!(out, "element vertex {}", points.len()).unwrap();
    for p in ["x", "y", "z"] {
        writeln!(out, "property float {p}").unwrap();
    }
    for c in ["red", "green", "blue"] {
        writeln!(out, "property uchar {c}").unwrap();
    }
    out.push_str("end_header\n");
    for p in points {
        let [r, g, b] = p.color;
        writeln!(
            out,
            "{} {} {} {r} {g} {b}",
            p.position.x as f32, p.position.y as f32, p.position.z as f32
        )
        .unwrap();
    }
    out
}
