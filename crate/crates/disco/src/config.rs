//! `key=value` configuration for [`DiscoveryConfig`]. Keys are the field
//! names; `ppf_angle_tol` and `min_angle` are given in degrees and the
//! triplet filters appear as `filter_triangle`, `filter_sidedness` and
//! `filter_overlap`.

use std::path::Path;

use disco_core::detect::DiscoveryConfig;

use crate::{Error, Result};

pub const KEYS: &[&str] = &[
    "ppf_dist_tol",
    "ppf_angle_tol",
    "min_edge",
    "max_edge",
    "min_angle",
    "sidedness_eps",
    "cluster_eps",
    "dbscan_min_pts",
    "min_cluster_size",
    "delta",
    "merge_radius",
    "inlier_threshold",
    "min_inliers",
    "min_inlier_ratio",
    "keypoint_cap",
    "desc_thresh",
    "corr_thresh",
    "ransac_iterations",
    "ba_max_iters",
    "ba_tol",
    "seed",
    "use_ppf",
    "filter_triangle",
    "filter_sidedness",
    "filter_overlap",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

/// Sets one field from its textual value.
pub fn set(cfg: &mut DiscoveryConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let v = value.trim();
    match key {
        "ppf_dist_tol" => cfg.ppf_dist_tol = num(key, v)?,
        "ppf_angle_tol" => cfg.ppf_angle_tol = num::<f64>(key, v)?.to_radians(),
        "min_edge" => cfg.min_edge = num(key, v)?,
        "max_edge" => cfg.max_edge = num(key, v)?,
        "min_angle" => cfg.min_angle = num::<f64>(key, v)?.to_radians(),
        "sidedness_eps" => cfg.sidedness_eps = num(key, v)?,
        "cluster_eps" => cfg.cluster_eps = num(key, v)?,
        "dbscan_min_pts" => cfg.dbscan_min_pts = num(key, v)?,
        "min_cluster_size" => cfg.min_cluster_size = num(key, v)?,
        "delta" => cfg.delta = num(key, v)?,
        "merge_radius" => cfg.merge_radius = num(key, v)?,
        "inlier_threshold" => cfg.inlier_threshold = num(key, v)?,
        "min_inliers" => cfg.min_inliers = num(key, v)?,
        "min_inlier_ratio" => cfg.min_inlier_ratio = num(key, v)?,
        "keypoint_cap" => cfg.keypoint_cap = num(key, v)?,
        "desc_thresh" => cfg.desc_thresh = num(key, v)?,
        "corr_thresh" => cfg.corr_thresh = num(key, v)?,
        "ransac_iterations" => cfg.ransac_iterations = num(key, v)?,
        "ba_max_iters" => cfg.ba_max_iters = num(key, v)?,
        "ba_tol" => cfg.ba_tol = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        "use_ppf" => cfg.use_ppf = num(key, v)?,
        "filter_triangle" => cfg.filters.triangle = num(key, v)?,
        "filter_sidedness" => cfg.filters.sidedness = num(key, v)?,
        "filter_overlap" => cfg.filters.overlap = num(key, v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

fn degrees(rad: f64) -> String {
    format!("{}", (rad.to_degrees() * 1e9).round() / 1e9)
}

/// Every key with its current value, in [`KEYS`] order.
pub fn echo(cfg: &DiscoveryConfig) -> Vec<(&'static str, String)> {
    KEYS.iter()
        .map(|&k| {
            let v = match k {
                "ppf_dist_tol" => cfg.ppf_dist_tol.to_string(),
                "ppf_angle_tol" => degrees(cfg.ppf_angle_tol),
                "min_edge" => cfg.min_edge.to_string(),
                "max_edge" => cfg.max_edge.to_string(),
                "min_angle" => degrees(cfg.min_angle),
                "sidedness_eps" => cfg.sidedness_eps.to_string(),
                "cluster_eps" => cfg.cluster_eps.to_string(),
                "dbscan_min_pts" => cfg.dbscan_min_pts.to_string(),
                "min_cluster_size" => cfg.min_cluster_size.to_string(),
                "delta" => cfg.delta.to_string(),
                "merge_radius" => cfg.merge_radius.to_string(),
                "inlier_threshold" => cfg.inlier_threshold.to_string(),
                "min_inliers" => cfg.min_inliers.to_string(),
                "min_inlier_ratio" => cfg.min_inlier_ratio.to_string(),
                "keypoint_cap" => cfg.keypoint_cap.to_string(),
                "desc_thresh" => cfg.desc_thresh.to_string(),
                "corr_thresh" => cfg.corr_thresh.to_string(),
                "ransac_iterations" => cfg.ransac_iterations.to_string(),
                "ba_max_iters" => cfg.ba_max_iters.to_string(),
                "ba_tol" => cfg.ba_tol.to_string(),
                "seed" => cfg.seed.to_string(),
                "use_ppf" => cfg.use_ppf.to_string(),
                "filter_triangle" => cfg.filters.triangle.to_string(),
                "filter_sidedness" => cfg.filters.sidedness.to_string(),
                "filter_overlap" => cfg.filters.overlap.to_string(),
                _ => unreachable!(),
            };
            (k, v)
        })
        .collect()
}

/// Applies the `key=value` lines of `text`.
pub fn apply_text(cfg: &mut DiscoveryConfig, path: &Path, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err("expected key=value".into()))?;
        set(cfg, key.trim(), value).map_err(parse_err)?;
    }
    Ok(())
}

pub fn apply_file(cfg: &mut DiscoveryConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_text(cfg, path, &text)
}
