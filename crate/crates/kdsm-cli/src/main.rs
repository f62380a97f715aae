//! Command-line driver for the kdsm cloth pipeline: every stage is
//! exposed as a subcommand, from level-set construction through dataset
//! generation, training, inference, and the metrics report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use kdsm::displacement_model::{gather, infer, pose_feature, read_regressor};
use kdsm::embedding::{
    backmap_ground_truth, embed_rest, method1, method2, hybrid, write_displacement_field,
    write_embedding, DisplacementField, GroundTruthFrame, PosedKdsm,
};
use kdsm::level_set::{build_level_set, ScalarGrid};
use kdsm::obj::read_obj;
use kdsm::pipeline::{
    build_scene, evaluate_dataset, read_atlas, read_config, read_ground_truth, run_pipeline,
    train_model, MetricsReport, PipelineConfig, Scene,
};
use kdsm::skinning::{
    assign_weights, read_pose, read_poses, read_skeleton, skin_vertices, Pose,
};
use kdsm::tet_lattice::{build_lattice, read_tet_mesh, write_tet_mesh};

#[derive(Parser)]
#[command(
    name = "kdsm",
    version,
    about = "Kinematically deforming skinned meshes for virtual cloth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a signed-distance grid around a closed triangle mesh.
    Levelset {
        /// Closed body mesh (OBJ).
        #[arg(long)]
        mesh: PathBuf,
        /// Grid spacing in cm.
        #[arg(long, default_value_t = 2.0)]
        dx: f64,
        /// Margin of grid cells kept around the mesh bounds, in cm.
        #[arg(long, default_value_t = 11.0)]
        padding: f64,
        /// Outward offset applied to the stored distances, in cm.
        #[arg(long, default_value_t = 0.0)]
        thicken: f64,
        /// Output grid file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mesh the negative region of a level-set grid into a tet lattice.
    Tetmesh {
        /// Input grid file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Lattice cell size in cm.
        #[arg(long, default_value_t = 2.0)]
        h: f64,
        /// Output tet-mesh file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Skin a tet mesh to one pose of a skeleton.
    Skin {
        /// Rest tet mesh.
        #[arg(long)]
        mesh: PathBuf,
        /// Skeleton JSON.
        #[arg(long)]
        skeleton: PathBuf,
        /// Pose JSON: a single pose or an array of poses.
        #[arg(long)]
        pose: PathBuf,
        /// Index into the pose array (for array files).
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Output tet-mesh file with deformed vertices.
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed cloth vertices into a rest lattice (parent tets/weights).
    Embed {
        /// Cloth mesh (OBJ).
        #[arg(long)]
        cloth: PathBuf,
        /// Rest lattice tet mesh.
        #[arg(long)]
        lattice: PathBuf,
        /// Output embedding JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate label displacement fields for one method from ground
    /// truth frames.
    GenData {
        /// Pipeline config JSON describing the scene.
        #[arg(long)]
        config: PathBuf,
        /// Label method.
        #[arg(long)]
        method: Method,
        /// Poses JSON (array of poses).
        #[arg(long)]
        poses: PathBuf,
        /// Directory of ground-truth frames (gt_NNNN.pos).
        #[arg(long)]
        gt: PathBuf,
        /// Seed for the random candidate choice (defaults to the
        /// config seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the label fields.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ridge regressor on one method's labels.
    Train {
        /// Dataset directory produced by `run` or `gen-data`.
        #[arg(long)]
        dir: PathBuf,
        /// Label method to train on.
        #[arg(long)]
        method: Method,
    },
    /// Predict a displacement field for one pose with a trained model.
    Infer {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Cloth atlas file (UVs and panel sides).
        #[arg(long)]
        atlas: PathBuf,
        /// Pose JSON: a single pose or an array of poses.
        #[arg(long)]
        pose: PathBuf,
        /// Index into the pose array (for array files).
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Output displacement-field file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the metrics report from a dataset directory.
    Metrics {
        /// Dataset directory with labels and trained models.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run everything: generate the-dataset, train every method, and
    /// evaluate.
    Run {
        /// Pipeline config JSON (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    #[value(name = "1")]
    Method1,
    #[value(name = "2")]
    Method2,
    #[value(name = "hybrid")]
    Hybrid,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Method1 => "method1",
            Method::Method2 => "method2",
            Method::Hybrid => "hybrid",
        }
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Levelset {
            mesh,
            dx,
            padding,
            thicken,
            out,
        } => {
            let body = read_obj(&mesh)?;
            let mut phi = build_level_set(&body, dx, padding)?;
            if thicken > 0.0 {
                phi = phi.thicken(thicken);
            }
            phi.write(&out)?;
            println!("wrote {} ({}x{}x{} nodes)", out.display(), phi.dims[0], phi.dims[1], phi.dims[2]);
        }
        Command::Tetmesh { input, h, out } => {
            let phi = ScalarGrid::read(&input)?;
            let lattice = build_lattice(&phi, h)?;
            write_tet_mesh(&out, &lattice)?;
            println!(
                "wrote {} ({} vertices, {} tets)",
                out.display(),
                lattice.vertices.len(),
                lattice.tets.len()
            );
        }
        Command::Skin {
            mesh,
            skeleton,
            pose,
            frame,
            out,
        } => {
            let mut lattice = read_tet_mesh(&mesh)?;
            let skeleton = read_skeleton(&skeleton)?;
            let pose = read_pose_arg(&pose, frame)?;
            let weights = assign_weights(&lattice.vertices, &skeleton.bone_segments())?;
            lattice.vertices = skin_vertices(&lattice.vertices, &weights, &skeleton, &pose)?;
            write_tet_mesh(&out, &lattice)?;
            println!("wrote {}", out.display());
        }
        Command::Embed { cloth, lattice, out } => {
            let cloth = read_obj(&cloth)?;
            let lattice = read_tet_mesh(&lattice)?;
            let emb = embed_rest(&cloth.vertices, &lattice)?;
            write_embedding(&out, &emb)?;
            println!("wrote {} ({} vertices)", out.display(), emb.parents.len());
        }
        Command::GenData {
            config,
            method,
            poses,
            gt,
            seed,
            out,
        } => {
            let config = read_config(&config)?;
            let scene = build_scene(&config)?;
            let poses = read_poses(&poses)?;
            let seed = seed.unwrap_or(config.seed);
            fs::create_dir_all(&out)?;
            for (id, pose) in poses.iter().enumerate() {
                let frame = read_ground_truth(&gt.join(format!("gt_{id:04}.pos")))?;
                let field = label_field(&scene, pose, &frame, method, config.tau, seed)?;
                let name = method.name();
                write_displacement_field(&out.join(format!("{name}_{id:04}.disp")), &field)?;
            }
            println!("wrote {} {} fields to {}", poses.len(), method.name(), out.display());
        }
        Command::Train { dir, method } => {
            let model = train_model(&dir, method.name())?;
            println!(
                "wrote {} ({} features)",
                dir.join(format!("model_{}.ridge", method.name())).display(),
                model.feature_mean.len()
            );
        }
        Command::Infer {
            model,
            atlas,
            pose,
            frame,
            out,
        } => {
            let model = read_regressor(&model)?;
            let (uvs, sides) = read_atlas(&atlas)?;
            let pose = read_pose_arg(&pose, frame)?;
            let image = infer(&model, &pose_feature(&pose))?;
            let d = gather(&image, &uvs, &sides)?;
            write_displacement_field(&out, &DisplacementField { pose: frame, d })?;
            println!("wrote {}", out.display());
        }
        Command::Metrics { dir } => {
            let report = evaluate_dataset(&dir)?;
            println!("wrote {}", dir.join("report.json").display());
            print_report(&report);
        }
        Command::Run { config, out } => {
            let config = match config {
                Some(path) => read_config(&path)?,
                None => PipelineConfig::default(),
            };
            let report = run_pipeline(&config, &out)?;
            println!("wrote {}", out.join("report.json").display());
            print_report(&report);
        }
    }
    Ok(())
}

/// Reads `--pose` files: either a single pose object or an array of
/// poses indexed by `--frame`.
fn read_pose_arg(path: &Path, frame: usize) -> anyhow::Result<Pose> {
    if let Ok(pose) = read_pose(path) {
        if frame != 0 {
            bail!("{} holds a single pose; --frame must be 0", path.display());
        }
        return Ok(pose);
    }
    let poses = read_poses(path).with_context(|| format!("reading poses from {}", path.display()))?;
    poses
        .get(frame)
        .cloned()
        .ok_or_else(|| anyhow::anyhow!("frame {frame} out of range ({} poses)", poses.len()))
}

/// Computes one method's label field for one frame.
fn label_field(
    scene: &Scene,
    pose: &Pose,
    frame: &GroundTruthFrame,
    method: Method,
    tau: f64,
    seed: u64,
) -> anyhow::Result<DisplacementField> {
    let m2 = || -> anyhow::Result<DisplacementField> {
        let body_posed = skin_vertices(&scene.body.vertices, &scene.body_weights, &scene.skeleton, pose)?;
        Ok(method2(
            frame.pose,
            &frame.positions,
            &scene.anchors,
            &scene.body,
            &body_posed,
            &scene.shirt.vertices,
        )?)
    };
    if matches!(method, Method::Method2) {
        return m2();
    }
    let deformed = skin_vertices(
        &scene.lattice.vertices,
        &scene.lattice_weights,
        &scene.skeleton,
        pose,
    )?;
    let kdsm = PosedKdsm::new(&scene.lattice.vertices, &deformed, &scene.lattice.tets);
    let backmap = backmap_ground_truth(&frame.positions, &kdsm);
    match method {
        Method::Method1 => Ok(method1(
            frame.pose,
            &backmap,
            &frame.positions,
            &kdsm,
            &scene.shirt.vertices,
            seed.wrapping_add(frame.pose as u64),
        )?),
        Method::Hybrid => Ok(hybrid(
            frame.pose,
            &backmap,
            &m2()?,
            &scene.shirt.vertices,
            &scene.edges,
            tau,
        )?),
        Method::Method2 => unreachable!("handled above"),
    }
}

fn print_report(report: &MetricsReport) {
    println!(
        "{} frames ({} train / {} val / {} test, {} overlap), lattice {} tets, shirt {} vertices",
        report.frames,
        report.train_frames,
        report.val_frames,
        report.test_frames,
        report.overlap_frames,
        report.lattice_tets,
        report.shirt_vertices
    );
    for (name, m) in &report.methods {
        println!(
            "{name}: label err avg {:.3e} max {:.3e} | overlap avg |dd| {:.3} | test err {:.3} +- {:.3} | volume err {:.1}",
            m.label_vertex_error.mean,
            m.label_max_vertex_error,
            m.overlap_avg_delta_d,
            m.test_vertex_error.mean,
            m.test_vertex_error.std,
            m.test_volume_error.mean
        );
    }
    println!(
        "baseline: test err {:.3} +- {:.3}",
        report.baseline_test_vertex_error.mean, report.baseline_test_vertex_error.std
    );
}
