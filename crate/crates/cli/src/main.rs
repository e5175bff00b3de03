use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rigkit::ablation::{run_ablation, AblationSettings};
use rigkit::arae::{self, ArAEConfig, TrainConfig};
use rigkit::deform::augment_pose;
use rigkit::diffusion::{self, DiffusionConfig, DiffusionTrainConfig, NoiseSchedule};
use rigkit::gvb::{compute_gvb_weights, GvbConfig};
use rigkit::io::{
    load_checkpoint, load_obj, load_rig, save_checkpoint, save_rig, synth_rig, DatasetManifest,
    Template,
};
use rigkit::metrics::{evaluate, MatchConfig};
use rigkit::motion::{fit_sequence, retarget, CorrespondenceMap, FitConfig};
use rigkit::mst::{mst_connectivity, RootRule};
use rigkit::nn::AdamConfig;
use rigkit::pointnet::{pretrain_pointnet, sample_surface_points, PointNetConfig};
use rigkit::skeleton::{Mesh, RigAsset, Skeleton, Vec3};
use rigkit::tokenizer::{
    detokenize, tokenize_skeleton, tokens_from_binary, tokens_from_text, tokens_to_binary,
    tokens_to_text, Vocab,
};
use rigkit::RigError;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "rigkit", about = "Skeleton rigging toolkit", version)]
struct Cli {
    /// Seed for all random choices.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config file overriding model hyperparameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Logging verbosity: quiet, info, or debug.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rig.
    Synth(SynthArgs),
    /// Tokenize a rig's skeleton into a token file.
    Tokenize(TokenizeArgs),
    /// Decode a token file back into a rig file.
    Detokenize(DetokenizeArgs),
    /// Compare a predicted rig against ground truth, emitting CSV.
    Eval(EvalArgs),
    /// Apply a random pose to a skinned rig.
    Augment(AugmentArgs),
    /// Compute geodesic-voxel skin weights.
    Skin(SkinArgs),
    /// Replace connectivity with a minimum spanning tree over the joints.
    Mst(MstArgs),
    /// Train the autoregressive auto-encoder.
    TrainArae(TrainAraeArgs),
    /// Train the latent diffusion model on top of a trained auto-encoder.
    TrainDiffusion(TrainDiffusionArgs),
    /// Predict a skeleton for a bare mesh.
    Predict(PredictArgs),
    /// Retarget a motion sequence onto a rigged mesh.
    Transfer(TransferArgs),
    /// Run the ablation benchmark comparing pipeline variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value = "chain")]
    template: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write little-endian u16 tokens instead of text.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct DetokenizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    binary: bool,
    /// Rig file providing the mesh for the output document; without it a
    /// bounding-cube placeholder mesh is written.
    #[arg(long)]
    mesh_from: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    max_angle: f64,
}

#[derive(Args)]
struct SkinArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Args)]
struct MstArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAraeArgs {
    /// Dataset manifest JSON listing rig files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Pose-augmentation magnitude in degrees; 0 disables it.
    #[arg(long, default_value_t = 30.0)]
    aug_max_angle: f64,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    arae_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    pretrain_steps: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Input mesh: .obj or a rig JSON whose mesh is used.
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    arae_ckpt: PathBuf,
    #[arg(long)]
    diff_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    target: PathBuf,
    /// Directory of OBJ frames, processed in filename order.
    #[arg(long)]
    source_frames: PathBuf,
    /// Correspondence map JSON.
    #[arg(long)]
    correspondence: PathBuf,
    /// Output directory for posed meshes and transforms JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 200)]
    assets: usize,
    #[arg(long, default_value_t = 4000)]
    train_steps: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success status
            let _ = e.print();
            return if e.exit_code() == 0 { ExitCode::SUCCESS } else { ExitCode::from(EXIT_USAGE) };
        }
    };
    let config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_DATA, &e),
    };
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                RigError::Invalid(_) | RigError::Format(_) | RigError::Parse { .. }
                | RigError::Range(_) | RigError::Dimension(_) => EXIT_DATA,
                _ => EXIT_RUNTIME,
            };
            fail(code, &e)
        }
    }
}

fn fail(code: u8, e: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

fn load_config(path: Option<&Path>) -> Result<Value, RigError> {
    match path {
        None => Ok(json!({})),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| RigError::Format(format!("invalid config: {e}")))
        }
    }
}

fn config_usize(config: &Value, key: &str, default: usize) -> usize {
    config.get(key).and_then(Value::as_u64).map(|v| v as usize).unwrap_or(default)
}

fn arae_config_from(config: &Value) -> ArAEConfig {
    let d = ArAEConfig::default();
    ArAEConfig {
        latent_tokens: config_usize(config, "latent_tokens", d.latent_tokens),
        width: config_usize(config, "width", d.width),
        decoder_layers: config_usize(config, "decoder_layers", d.decoder_layers),
        heads: config_usize(config, "heads", d.heads),
        freq_bands: config_usize(config, "freq_bands", d.freq_bands),
        vocab_bins: config_usize(config, "vocab_bins", d.vocab_bins as usize) as u32,
        max_joints: config_usize(config, "max_joints", d.max_joints),
    }
}

fn diffusion_config_from(config: &Value, arae: &ArAEConfig, cond_width: usize) -> DiffusionConfig {
    let d = DiffusionConfig::default();
    DiffusionConfig {
        latent_tokens: arae.latent_tokens,
        width: arae.width,
        heads: config_usize(config, "diffusion_heads", d.heads),
        blocks: config_usize(config, "diffusion_blocks", d.blocks),
        cond_width,
    }
}

fn pointnet_config_from(config: &Value) -> PointNetConfig {
    let d = PointNetConfig::default();
    PointNetConfig {
        feature_width: config_usize(config, "point_feature_width", d.feature_width),
        hidden: config_usize(config, "point_hidden", d.hidden),
        recon_points: config_usize(config, "point_recon", d.recon_points),
    }
}

fn load_dataset(manifest_path: &Path, split: Option<&str>) -> Result<Vec<RigAsset>, RigError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut assets = Vec::new();
    for entry in &manifest.entries {
        if let Some(split) = split {
            if entry.split != split {
                continue;
            }
        }
        let path = base.join(&entry.path);
        assets.push(load_rig(&path)?);
    }
    if assets.is_empty() {
        return Err(RigError::Degenerate("manifest selects no assets".into()));
    }
    Ok(assets)
}

fn vocab_from(config: &ArAEConfig) -> Vocab {
    Vocab::new(config.vocab_bins)
}

fn placeholder_mesh(skeleton: &Skeleton) -> Mesh {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in &skeleton.joints {
        lo = Vec3::new(lo.x.min(j.x), lo.y.min(j.y), lo.z.min(j.z));
        hi = Vec3::new(hi.x.max(j.x), hi.y.max(j.y), hi.z.max(j.z));
    }
    let pad = 0.05;
    lo = lo.sub(Vec3::new(pad, pad, pad));
    hi = hi.add(Vec3::new(pad, pad, pad));
    let corners: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
        .collect();
    let faces = vec![
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ];
    Mesh { vertices: corners, faces }
}

fn load_mesh_any(path: &Path) -> Result<Mesh, RigError> {
    if path.extension().map(|e| e == "obj").unwrap_or(false) {
        load_obj(path)
    } else {
        Ok(load_rig(path)?.mesh)
    }
}

fn run(cli: &Cli, config: &Value) -> Result<(), RigError> {
    let arae_config = arae_config_from(config);
    match &cli.command {
        Command::Synth(a) => {
            let template: Template = a.template.parse()?;
            let asset = synth_rig(cli.seed, a.k, template)?;
            save_rig(&a.out, &asset)?;
            info(cli, &format!("wrote {} ({} joints)", a.out.display(), a.k));
        }
        Command::Tokenize(a) => {
            let asset = load_rig(&a.input)?;
            let vocab = vocab_from(&arae_config);
            let tokens = tokenize_skeleton(&asset.skeleton, &vocab)?;
            if a.binary {
                fs::write(&a.out, tokens_to_binary(&tokens)?)?;
            } else {
                fs::write(&a.out, tokens_to_text(&tokens) + "\n")?;
            }
            info(cli, &format!("wrote {} tokens", tokens.ids.len()));
        }
        Command::Detokenize(a) => {
            let vocab = vocab_from(&arae_config);
            let tokens = if a.binary {
                tokens_from_binary(&fs::read(&a.input)?)?
            } else {
                tokens_from_text(&fs::read_to_string(&a.input)?)?
            };
            let skeleton = detokenize(&tokens, &vocab)?;
            let mesh = match &a.mesh_from {
                Some(p) => load_rig(p)?.mesh,
                None => placeholder_mesh(&skeleton),
            };
            let asset = RigAsset { mesh, skeleton, skin: None, category: "other".into() };
            save_rig(&a.out, &asset)?;
        }
        Command::Eval(a) => {
            let pred = load_rig(&a.pred)?;
            let gt = load_rig(&a.gt)?;
            let cfg = MatchConfig { tau: a.tau, ..MatchConfig::default() };
            let report = evaluate(&pred.skeleton, &gt.skeleton, &cfg)?;
            let id = a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let csv = format!(
                "id,iou,precision,recall,cd_j2j,cd_j2b,cd_b2b\n{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                report.iou, report.precision, report.recall, report.cd_j2j, report.cd_j2b, report.cd_b2b
            );
            match &a.out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Augment(a) => {
            let asset = load_rig(&a.input)?;
            let posed = augment_pose(&asset, cli.seed, a.max_angle)?;
            save_rig(&a.out, &posed)?;
        }
        Command::Skin(a) => {
            let mut asset = load_rig(&a.input)?;
            let cfg = GvbConfig { resolution: a.resolution, ..GvbConfig::default() };
            let (weights, diagnostics) = compute_gvb_weights(&asset.mesh, &asset.skeleton, &cfg)?;
            if !diagnostics.euclidean_fallback_vertices.is_empty() {
                info(
                    cli,
                    &format!(
                        "{} vertices used the euclidean fallback",
                        diagnostics.euclidean_fallback_vertices.len()
                    ),
                );
            }
            asset.skin = Some(weights);
            save_rig(&a.out, &asset)?;
        }
        Command::Mst(a) => {
            let mut asset = load_rig(&a.input)?;
            asset.skeleton = mst_connectivity(&asset.skeleton.joints, RootRule::NearestCentroid)?;
            asset.skin = None;
            save_rig(&a.out, &asset)?;
        }
        Command::TrainArae(a) => {
            let dataset = load_dataset(&a.data, Some("train"))?;
            let mut params = arae::init_arae_params(&arae_config, cli.seed);
            let train = TrainConfig {
                steps: a.steps,
                adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
                seed: cli.seed,
                aug_max_angle: if a.aug_max_angle > 0.0 { Some(a.aug_max_angle) } else { None },
            };
            let curve = arae::train_arae(&mut params, &arae_config, &dataset, &train)?;
            let meta = json!({
                "kind": "arae",
                "latent_tokens": arae_config.latent_tokens,
                "width": arae_config.width,
                "decoder_layers": arae_config.decoder_layers,
                "heads": arae_config.heads,
                "freq_bands": arae_config.freq_bands,
                "vocab_bins": arae_config.vocab_bins,
                "max_joints": arae_config.max_joints,
            });
            save_checkpoint(&a.out, &meta, &params)?;
            info(cli, &format!("final loss {:.6}", curve.last().copied().unwrap_or(f64::NAN)));
        }
        Command::TrainDiffusion(a) => {
            let dataset = load_dataset(&a.data, Some("train"))?;
            let (arae_meta, arae_params) = load_checkpoint(&a.arae_ckpt)?;
            let arae_config = arae_config_of_meta(&arae_meta)?;
            let pointnet_config = pointnet_config_from(config);
            let mut point_params = rigkit::pointnet::init_pointnet_params(&pointnet_config, cli.seed);
            let clouds: Vec<Vec<Vec3>> = dataset
                .iter()
                .enumerate()
                .map(|(i, asset)| {
                    sample_surface_points(&asset.mesh, 1024, cli.seed.wrapping_add(i as u64))
                })
                .collect::<Result<_, _>>()?;
            pretrain_pointnet(
                &mut point_params,
                &pointnet_config,
                &clouds,
                a.pretrain_steps,
                AdamConfig { lr: a.lr, ..AdamConfig::default() },
                cli.seed,
            )?;
            let diff_config = diffusion_config_from(config, &arae_config, pointnet_config.feature_width);
            let schedule = NoiseSchedule::linear(config_usize(config, "diffusion_steps", 100));
            let mut denoiser = diffusion::init_denoiser_params(&diff_config, cli.seed);
            let train = DiffusionTrainConfig {
                steps: a.steps,
                adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
                seed: cli.seed,
                surface_points: 1024,
                aug_max_angle: None,
                cond_seed: cli.seed,
            };
            let curve = diffusion::train_diffusion(
                &mut denoiser,
                &diff_config,
                &arae_params,
                &arae_config,
                &point_params,
                &dataset,
                &schedule,
                &train,
            )?;
            // single artifact: denoiser plus the frozen point encoder
            let mut params = denoiser;
            for (name, value) in point_params {
                params.insert(name, value);
            }
            let meta = json!({
                "kind": "diffusion",
                "latent_tokens": diff_config.latent_tokens,
                "width": diff_config.width,
                "heads": diff_config.heads,
                "blocks": diff_config.blocks,
                "cond_width": diff_config.cond_width,
                "schedule_steps": schedule.steps(),
                "point_feature_width": pointnet_config.feature_width,
                "point_hidden": pointnet_config.hidden,
                "point_recon": pointnet_config.recon_points,
            });
            save_checkpoint(&a.out, &meta, &params)?;
            info(cli, &format!("final loss {:.6}", curve.last().copied().unwrap_or(f64::NAN)));
        }
        Command::Predict(a) => {
            let mesh = load_mesh_any(&a.mesh)?;
            let (arae_meta, arae_params) = load_checkpoint(&a.arae_ckpt)?;
            let arae_config = arae_config_of_meta(&arae_meta)?;
            let (diff_meta, mut diff_params) = load_checkpoint(&a.diff_ckpt)?;
            if diff_meta.get("kind").and_then(Value::as_str) != Some("diffusion") {
                return Err(RigError::Format("diffusion checkpoint has wrong kind".into()));
            }
            let diff_config = DiffusionConfig {
                latent_tokens: config_usize(&diff_meta, "latent_tokens", 16),
                width: config_usize(&diff_meta, "width", 64),
                heads: config_usize(&diff_meta, "heads", 4),
                blocks: config_usize(&diff_meta, "blocks", 2),
                cond_width: config_usize(&diff_meta, "cond_width", 128),
            };
            let point_params: rigkit::nn::Params = {
                let names: Vec<String> =
                    diff_params.keys().filter(|k| k.starts_with("pt.")).cloned().collect();
                names.into_iter().map(|n| { let v = diff_params.remove(&n).unwrap(); (n, v) }).collect()
            };
            let skeleton = diffusion::predict_skeleton(
                &mesh,
                &arae_params,
                &arae_config,
                &diff_params,
                &diff_config,
                &point_params,
                1024,
                cli.seed,
            )?;
            let asset = RigAsset { mesh, skeleton, skin: None, category: "other".into() };
            save_rig(&a.out, &asset)?;
        }
        Command::Transfer(a) => {
            let target = load_rig(&a.target)?;
            let map: CorrespondenceMap = {
                let text = fs::read_to_string(&a.correspondence)?;
                serde_json::from_str(&text)
                    .map_err(|e| RigError::Format(format!("invalid correspondence: {e}")))?
            };
            let mut frame_paths: Vec<PathBuf> = fs::read_dir(&a.source_frames)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "obj").unwrap_or(false))
                .collect();
            frame_paths.sort();
            if frame_paths.is_empty() {
                return Err(RigError::Degenerate("no .obj frames in source directory".into()));
            }
            let frames: Vec<Mesh> =
                frame_paths.iter().map(load_obj).collect::<Result<_, _>>()?;
            let fits = fit_sequence(&target, &frames, &map, None, &FitConfig::default())?;
            fs::create_dir_all(&a.out)?;
            let transforms: Vec<Vec<rigkit::deform::JointTransform>> =
                fits.iter().map(|f| f.transforms.clone()).collect();
            let sequence = retarget(&transforms, &target)?;
            for (i, mesh) in sequence.frames.iter().enumerate() {
                let mut obj = String::new();
                for v in &mesh.vertices {
                    obj.push_str(&format!("v {:.9} {:.9} {:.9}\n", v.x, v.y, v.z));
                }
                for f in &mesh.faces {
                    obj.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
                }
                fs::write(a.out.join(format!("frame_{i:04}.obj")), obj)?;
            }
            let report: Vec<Value> = fits
                .iter()
                .map(|f| {
                    json!({
                        "energy": f.energy,
                        "iterations": f.iterations,
                        "converged": f.converged,
                        "lambda": f.lambda,
                        "transforms": f.transforms,
                    })
                })
                .collect();
            fs::write(
                a.out.join("transforms.json"),
                serde_json::to_string_pretty(&report).map_err(|e| RigError::Format(e.to_string()))?
                    + "\n",
            )?;
            info(cli, &format!("wrote {} frames", sequence.frames.len()));
        }
        Command::Ablate(a) => {
            let settings = AblationSettings {
                assets: a.assets,
                train_steps: a.train_steps,
                seed: cli.seed,
                ..AblationSettings::default()
            };
            let report = run_ablation(&settings)?;
            let mut csv = String::from("variant,iou,precision,recall,cd_j2j,cd_b2b,failures\n");
            for s in &report.scores {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                    s.name, s.iou, s.precision, s.recall, s.cd_j2j, s.cd_b2b, s.failures
                ));
            }
            match &a.out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn arae_config_of_meta(meta: &Value) -> Result<ArAEConfig, RigError> {
    if meta.get("kind").and_then(Value::as_str) != Some("arae") {
        return Err(RigError::Format("checkpoint is not an auto-encoder checkpoint".into()));
    }
    let d = ArAEConfig::default();
    Ok(ArAEConfig {
        latent_tokens: config_usize(meta, "latent_tokens", d.latent_tokens),
        width: config_usize(meta, "width", d.width),
        decoder_layers: config_usize(meta, "decoder_layers", d.decoder_layers),
        heads: config_usize(meta, "heads", d.heads),
        freq_bands: config_usize(meta, "freq_bands", d.freq_bands),
        vocab_bins: config_usize(meta, "vocab_bins", d.vocab_bins as usize) as u32,
        max_joints: config_usize(meta, "max_joints", d.max_joints),
    })
}

fn info(cli: &Cli, msg: &str) {
    if cli.log_level != "quiet" {
        eprintln!("{msg}");
    }
}
