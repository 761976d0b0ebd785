//! Command-line interface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use disco_core::detect::{detect_instances, model_correspondences, DiscoveryConfig};
use disco_core::frame::{lift_keypoints, Keypoint2D, Keypoint3D, DEFAULT_NORMAL_WINDOW};
use disco_core::modelgraph::ObjectModel;
use disco_core::pipeline::{discover, RunReport};
use disco_core::synth::{evaluate, generate_scene, ObjectSpec, SceneSpec};
use disco_core::RigidTransform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config;
use crate::formats::{
    read_kp3, read_objm, save_annotations, save_instances, write_kp3, write_objm, InstanceRow, KeypointSet, ModelFile,
};
use crate::frameio::load_frame;
use crate::ply::{instance_color, write_ply, ColoredPoint, LANDMARK_COLOR, UNASSIGNED_COLOR};
use crate::{Error, Result};

macro_rules! config_flags {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty,)*) => {
        /// Overrides for individual discovery parameters.
        #[derive(Args, Debug, Clone, Default)]
        pub struct ConfigFlags {
            $(
                $(#[doc = $doc])*
                #[arg(long, global = true, help_heading = "Discovery parameters")]
                pub $field: Option<$ty>,
            )*
        }

        impl ConfigFlags {
            /// `(key, value)` pairs of the flags that were given.
            pub fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.to_string()));
                    }
                )*
                out
            }
        }
    };
}

config_flags! {
    /// PPF distance tolerance, mm [default: 5]
    ppf_dist_tol: f64,
    /// PPF angle tolerance, degrees [default: 35]
    ppf_angle_tol: f64,
    /// Shortest triangle edge, mm [default: 10]
    min_edge: f64,
    /// Longest triangle edge, mm [default: 125]
    max_edge: f64,
    /// Smallest triangle angle, degrees [default: 10]
    min_angle: f64,
    /// Sidedness tolerance on normalized cross products [default: 0.1]
    sidedness_eps: f64,
    /// DBSCAN radius on the triplet distance, mm [default: 35]
    cluster_eps: f64,
    /// DBSCAN core-point threshold [default: 3]
    dbscan_min_pts: usize,
    /// Clusters with fewer triplets are discarded [default: 14]
    min_cluster_size: usize,
    /// Weight of common points in the point-set graph [default: 1]
    delta: f64,
    /// Radius for merging landmarks, mm [default: 5]
    merge_radius: f64,
    /// RANSAC inlier threshold, mm [default: 5]
    inlier_threshold: f64,
    /// Fewest RANSAC inliers for a detection [default: 5]
    min_inliers: usize,
    /// Smallest RANSAC inlier ratio for a detection [default: 0.125]
    min_inlier_ratio: f64,
    /// Most triplets any keypoint may take part in [default: 60]
    keypoint_cap: usize,
    /// Descriptor distance bound for scene keypoint matches [default: 0.25]
    desc_thresh: f64,
    /// Descriptor distance bound for model correspondences [default: 0.5]
    corr_thresh: f64,
    /// RANSAC hypotheses per detection attempt [default: 2000]
    ransac_iterations: usize,
    /// Bundle adjustment iteration limit [default: 50]
    ba_max_iters: usize,
    /// Bundle adjustment relative cost tolerance [default: 1e-8]
    ba_tol: f64,
    /// Prune match pairs by point pair features [default: true]
    use_ppf: bool,
    /// Edge length and angle filter on triangles [default: true]
    filter_triangle: bool,
    /// Sidedness filter on triangle pairs [default: true]
    filter_sidedness: bool,
    /// Overlap filter on triangle pairs [default: true]
    filter_overlap: bool,
}

#[derive(Parser, Debug)]
#[command(
    name = "disco",
    version,
    about = "Discover, model and localize repeated rigid objects in one RGB-D frame"
)]
pub struct Cli {
    /// Seed for every randomized stage
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for one per core. Never changes outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// File of key=value lines overriding the defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: ConfigFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Discover objects with several instances and write their models
    Discover {
        /// Keypoint file (.kp3)
        keypoints: PathBuf,
        /// Frame directory; keypoints are then lifted from its depth map at their pixels
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Output directory
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Detect instances of a known model
    Detect {
        /// Model file (.objm)
        model: PathBuf,
        /// Keypoint file (.kp3)
        keypoints: PathBuf,
        /// Instance file to write
        #[arg(long, short)]
        out: PathBuf,
        /// Model id written to the instance rows
        #[arg(long, default_value_t = 0)]
        model_id: usize,
    },
    /// Generate a synthetic scene with annotations
    Synth(SynthArgs),
    /// Score instances against annotations
    Eval {
        /// Instance file
        instances: PathBuf,
        /// Annotation file
        annotations: PathBuf,
        /// Directory holding model_<k>.objm
        #[arg(long)]
        models: PathBuf,
        /// Scene keypoints; detections are then their inlier keypoints instead of the placed landmarks
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Fraction of a detection's points that must fall in a box
        #[arg(long, default_value_t = 0.9)]
        containment: f64,
    },
    /// Write scene keypoints and placed model landmarks as a colored PLY
    ExportPly {
        /// Scene keypoints, colored by the instance they support
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Directory holding model_<k>.objm
        #[arg(long)]
        models: Option<PathBuf>,
        /// Instance poses to use instead of those stored in the models
        #[arg(long, requires = "models")]
        instances: Option<PathBuf>,
        /// PLY file to write
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for scene.kp3 and annotations.txt
    #[arg(long, short)]
    pub out: PathBuf,
    /// Landmarks per object, comma separated or one value for all
    #[arg(long, value_delimiter = ',', default_value = "60")]
    pub landmarks: Vec<usize>,
    /// Instances per object, comma separated
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub instances: Vec<usize>,
    /// Object extent, mm
    #[arg(long, default_value_t = 100.0)]
    pub extent: f64,
    /// Position noise sigma, mm
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Descriptor noise sigma
    #[arg(long, default_value_t = 0.01)]
    pub descriptor_noise: f64,
    /// Descriptor length
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Clutter keypoints
    #[arg(long, default_value_t = 150)]
    pub clutter: usize,
    /// Side of the workspace cube, mm
    #[arg(long, default_value_t = 600.0)]
    pub workspace: f64,
}

pub const SCENE_FILE: &str = "scene.kp3";
pub const ANNOTATION_FILE: &str = "annotations.txt";
pub const INSTANCE_FILE: &str = "instances.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timings.txt";

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<DiscoveryConfig> {
    let mut cfg = DiscoveryConfig::default();
    if let Some(path) = &cli.config {
        config::apply_file(&mut cfg, path)?;
    }
    for (k, v) in cli.params.overrides() {
        config::set(&mut cfg, k, &v).map_err(Error::Usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the command on a pool of `--threads` workers and returns what it
/// prints on standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(cmd: &Command, cfg: &DiscoveryConfig) -> Result<String> {
    match cmd {
        Command::Discover { keypoints, frame, out } => cmd_discover(keypoints, frame.as_deref(), out, cfg),
        Command::Detect {
            model,
            keypoints,
            out,
            model_id,
        } => cmd_detect(model, keypoints, out, *model_id, cfg),
        Command::Synth(args) => cmd_synth(args, cfg),
        Command::Eval {
            instances,
            annotations,
            models,
            scene,
            containment,
        } => cmd_eval(instances, annotations, models, scene.as_deref(), *containment, cfg),
        Command::ExportPly {
            scene,
            models,
            instances,
            out,
        } => cmd_export_ply(scene.as_deref(), models.as_deref(), instances.as_deref(), out, cfg),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn model_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("model_{k}.objm"))
}

/// Every `model_<k>.objm` in `dir`, keyed by k.
pub fn load_models(dir: &Path) -> Result<BTreeMap<usize, ModelFile>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut models = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(k) = name
            .to_str()
            .and_then(|n| n.strip_prefix("model_")?.strip_suffix(".objm")?.parse::<usize>().ok())
        else {
            continue;
        };
        models.insert(k, read_objm(&entry.path())?);
    }
    Ok(models)
}

fn same_dim(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        })
    }
}

/// Scene keypoints that correspond to a landmark of `model` by descriptor
/// and lie within the inlier threshold of it when placed at `pose`.
pub fn instance_support(
    model: &ObjectModel,
    corrs: &[(usize, usize)],
    pose: &RigidTransform,
    kps: &[Keypoint3D],
    cfg: &DiscoveryConfig,
) -> Vec<usize> {
    corrs
        .iter()
        .filter(|&&(l, k)| (pose.apply(&model.landmarks[l].position) - kps[k].position).norm() <= cfg.inlier_threshold)
        .map(|&(_, k)| k)
        .collect()
}

pub fn format_report(r: &RunReport, dropped: Option<usize>, cfg: &DiscoveryConfig) -> String {
    let mut out = String::from("# disco discover report\n");
    let mut line = |k: &str, v: usize| writeln!(out, "{k}={v}").unwrap();
    line("keypoints", r.keypoints);
    if let Some(d) = dropped {
        line("dropped_keypoints", d);
    }
    line("matches", r.matches);
    line("compatible_pairs", r.compatible_pairs);
    line("candidate_triplets", r.candidate_triplets);
    line("accepted_triplets", r.accepted_triplets);
    line("clusters", r.clusters);
    line("graph_nodes", r.graph_nodes);
    line("assembled_models", r.assembled_models);
    line("cross_merges", r.cross_merges);
    line("new_instances", r.new_instances);
    line("models", r.models);
    line("instances", r.instances);
    for n in &r.notes {
        writeln!(out, "note={n}").unwrap();
    }
    out.push_str("[config]\n");
    for (k, v) in config::echo(cfg) {
        writeln!(out, "{k}={v}").unwrap();
    }
    out
}

pub fn format_timings(r: &RunReport) -> String {
    let mut out = String::from("# wall time per stage, ms\n");
    for t in &r.timings {
        writeln!(out, "{}={:.3}", t.stage, t.ms).unwrap();
    }
    writeln!(out, "total={:.3}", r.timings.iter().map(|t| t.ms).sum::<f64>()).unwrap();
    out
}

fn cmd_discover(path: &Path, frame: Option<&Path>, out: &Path, cfg: &DiscoveryConfig) -> Result<String> {
    let KeypointSet { dim, keypoints } = read_kp3(path)?;
    let (kps, dropped) = match frame {
        Some(dir) => {
            let frame = load_frame(dir)?;
            let flat: Vec<Keypoint2D> = keypoints
                .into_iter()
                .map(|k| Keypoint2D {
                    u: k.pixel[0],
                    v: k.pixel[1],
                    descriptor: k.descriptor,
                })
                .collect();
            let lifted = lift_keypoints(&frame, &flat, DEFAULT_NORMAL_WINDOW);
            (lifted.keypoints, Some(lifted.dropped))
        }
        None => (keypoints, None),
    };
    let found = discover(&kps, cfg)?;

    create_dir(out)?;
    let mut rows = Vec::new();
    for (k, dm) in found.models.iter().enumerate() {
        write_file(&model_path(out, k), &write_objm(&dm.model, dim)?)?;
        for inst in found.instances(k, &kps, cfg.inlier_threshold) {
            rows.push(InstanceRow {
                model: k,
                inliers: inst.keypoints.len(),
                ratio: inst.inlier_ratio,
                pose: inst.pose,
            });
        }
    }
    save_instances(&out.join(INSTANCE_FILE), &rows)?;
    write_file(&out.join(REPORT_FILE), &format_report(&found.report, dropped, cfg))?;
    write_file(&out.join(TIMING_FILE), &format_timings(&found.report))?;

    let mut msg = format!(
        "{} models, {} instances from {} keypoints\n",
        found.report.models,
        found.report.instances,
        kps.len()
    );
    for n in &found.report.notes {
        writeln!(msg, "{n}").unwrap();
    }
    Ok(msg)
}

fn cmd_detect(model: &Path, scene: &Path, out: &Path, model_id: usize, cfg: &DiscoveryConfig) -> Result<String> {
    let mf = read_objm(model)?;
    let scene = read_kp3(scene)?;
    same_dim("scene keypoints", mf.dim, scene.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows: Vec<InstanceRow> = detect_instances(&mf.model, model_id, &scene.keypoints, cfg, &mut rng)
        .into_iter()
        .map(|d| InstanceRow {
            model: d.model,
            inliers: d.inliers.len(),
            ratio: d.inlier_ratio,
            pose: d.pose,
        })
        .collect();
    save_instances(out, &rows)?;
    Ok(format!("{} instances\n", rows.len()))
}

fn cmd_synth(args: &SynthArgs, cfg: &DiscoveryConfig) -> Result<String> {
    let n = args.instances.len();
    let landmarks = match args.landmarks.len() {
        1 => vec![args.landmarks[0]; n],
        m if m == n => args.landmarks.clone(),
        m => return Err(Error::Usage(format!("{m} landmark counts for {n} objects"))),
    };
    let spec = SceneSpec {
        objects: landmarks
            .into_iter()
            .map(|l| ObjectSpec {
                landmarks: l,
                extent: args.extent,
            })
            .collect(),
        instances: args.instances.clone(),
        position_noise: args.noise,
        descriptor_noise: args.descriptor_noise,
        descriptor_dim: args.dim,
        clutter: args.clutter,
        workspace_extent: args.workspace,
        seed: cfg.seed,
    };
    let scene = generate_scene(&spec)?;
    create_dir(&args.out)?;
    write_file(&args.out.join(SCENE_FILE), &write_kp3(&scene.keypoints, args.dim)?)?;
    save_annotations(&args.out.join(ANNOTATION_FILE), &scene.annotations)?;
    Ok(format!(
        "{} keypoints, {} annotated instances\n",
        scene.keypoints.len(),
        scene.annotations.len()
    ))
}

/// Correspondences per model id, each computed once.
struct Supports<'a> {
    models: &'a BTreeMap<usize, ModelFile>,
    scene: &'a [Keypoint3D],
    corrs: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl<'a> Supports<'a> {
    fn new(models: &'a BTreeMap<usize, ModelFile>, scene: &'a [Keypoint3D]) -> Self {
        Self {
            models,
            scene,
            corrs: BTreeMap::new(),
        }
    }

    fn of(&mut self, row: &InstanceRow, cfg: &DiscoveryConfig) -> Vec<usize> {
        let model = &self.models[&row.model].model;
        let corrs = self
            .corrs
            .entry(row.model)
            .or_insert_with(|| model_correspondences(model, self.scene, cfg.corr_thresh));
        instance_support(model, corrs, &row.pose, self.scene, cfg)
    }
}

fn rows_with_models(
    rows: &[InstanceRow],
    models: &BTreeMap<usize, ModelFile>,
    instances: &Path,
    dir: &Path,
) -> Result<()> {
    for r in rows {
        if !models.contains_key(&r.model) {
            return Err(Error::Usage(format!(
                "{} refers to model {} but {} does not exist",
                instances.display(),
                r.model,
                model_path(dir, r.model).display()
            )));
        }
    }
    Ok(())
}

fn check_scene_dims(scene: &KeypointSet, models: &BTreeMap<usize, ModelFile>) -> Result<()> {
    for (k, m) in models {
        same_dim(&format!("model {k}"), scene.dim, m.dim)?;
    }
    Ok(())
}

fn cmd_eval(
    instances: &Path,
    annotations: &Path,
    models_dir: &Path,
    scene: Option<&Path>,
    containment: f64,
    cfg: &DiscoveryConfig,
) -> Result<String> {
    if !(containment > 0.0 && containment <= 1.0) {
        return Err(Error::Usage(format!("containment {containment} outside (0, 1]")));
    }
    let rows = crate::formats::load_instances(instances)?;
    let anns = crate::formats::load_annotations(annotations)?;
    let models = load_models(models_dir)?;
    rows_with_models(&rows, &models, instances, models_dir)?;
    let detections: Vec<Vec<disco_core::Vec3>> = match scene {
        Some(path) => {
            let scene = read_kp3(path)?;
            check_scene_dims(&scene, &models)?;
            let mut supports = Supports::new(&models, &scene.keypoints);
            rows.iter()
                .map(|r| {
                    supports
                        .of(r, cfg)
                        .into_iter()
                        .map(|k| scene.keypoints[k].position)
                        .collect()
                })
                .collect()
        }
        None => rows
            .iter()
            .map(|r| {
                models[&r.model]
                    .model
                    .landmarks
                    .iter()
                    .map(|l| r.pose.apply(&l.position))
                    .collect()
            })
            .collect(),
    };
    let e = evaluate(&detections, &anns, containment);
    Ok(format!("P={:.3} R={:.3} F1={:.3}\n", e.precision, e.recall, e.f1))
}

fn cmd_export_ply(
    scene: Option<&Path>,
    models_dir: Option<&Path>,
    instances: Option<&Path>,
    out: &Path,
    cfg: &DiscoveryConfig,
) -> Result<String> {
    if scene.is_none() && models_dir.is_none() {
        return Err(Error::Usage("export-ply needs --scene, --models or both".into()));
    }
    let scene = scene.map(read_kp3).transpose()?;
    let models = models_dir.map(load_models).transpose()?.unwrap_or_default();
    let rows: Vec<InstanceRow> = match (instances, models_dir) {
        (Some(path), Some(dir)) => {
            let rows = crate::formats::load_instances(path)?;
            rows_with_models(&rows, &models, path, dir)?;
            rows
        }
        _ => models
            .iter()
            .flat_map(|(&k, m)| {
                m.model.instances.iter().map(move |&pose| InstanceRow {
                    model: k,
                    inliers: 0,
                    ratio: 0.0,
                    pose,
                })
            })
            .collect(),
    };

    let mut points = Vec::new();
    if let Some(scene) = &scene {
        check_scene_dims(scene, &models)?;
        let mut owner: Vec<Option<usize>> = vec![None; scene.keypoints.len()];
        let mut supports = Supports::new(&models, &scene.keypoints);
        for (i, r) in rows.iter().enumerate() {
            for k in supports.of(r, cfg) {
                owner[k].get_or_insert(i);
            }
        }
        points.extend(scene.keypoints.iter().zip(&owner).map(|(k, o)| ColoredPoint {
            position: k.position,
            color: o.map_or(UNASSIGNED_COLOR, instance_color),
        }));
    }
    for r in &rows {
        points.extend(models[&r.model].model.landmarks.iter().map(|l| ColoredPoint {
            position: r.pose.apply(&l.position),
            color: LANDMARK_COLOR,
        }));
    }
    write_file(out, &write_ply(&points))?;
    Ok(format!("{} points, {} instances\n", points.len(), rows.len()))
}
