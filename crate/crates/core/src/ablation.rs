//! Relational ablation runner: the full two-stage pipeline against the
//! "coordinate diffusion + MST" and "point-conditioned decoder only"
//! variants on a seeded synthetic benchmark.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arae::{self, ArAEConfig, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::diffusion::{
    self, ddpm_forward, DiffusionConfig, DiffusionTrainConfig, NoiseSchedule,
};
use crate::error::RigError;
use crate::io::{synth_rig, Template};
use crate::metrics::{evaluate, MatchConfig, MetricsReport};
use crate::mst::{mst_connectivity, RootRule};
use crate::nn::{self, linear, multi_head_attention, randn, timestep_embed, Adam, AdamConfig, Params};
use crate::pointnet::{
    encode_pointcloud, pretrain_pointnet, sample_surface_points, PointCloudFeature, PointNetConfig,
};
use crate::skeleton::{RigAsset, Skeleton, Vec3};
use crate::tokenizer::detokenize;

/// Chamfer penalty for a variant that fails to produce a usable skeleton:
/// the diameter of the normalized bounding cube.
/// Shared Adam learning rate, identical across the compared variants.
pub const LEARNING_RATE: f64 = 3e-3;

pub const FAILURE_DISTANCE: f64 = 3.4641016151377544; // 2 * sqrt(3)

#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub assets: usize,
    /// Optimizer-step budget per variant; the two-stage pipeline splits it
    /// evenly between its stages.
    pub train_steps: usize,
    pub pretrain_steps: usize,
    pub surface_points: usize,
    pub seed: u64,
    pub arae: ArAEConfig,
    pub diffusion: DiffusionConfig,
    pub pointnet: PointNetConfig,
    pub schedule_steps: usize,
    /// Joint-count range of the benchmark assets.
    pub min_joints: usize,
    pub max_joints: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let pointnet = PointNetConfig { feature_width: 64, hidden: 32, recon_points: 32 };
        AblationSettings {
            assets: 200,
            train_steps: 4000,
            pretrain_steps: 2000,
            surface_points: 256,
            seed: 0,
            arae: ArAEConfig {
                latent_tokens: 4,
                width: 32,
                decoder_layers: 2,
                heads: 2,
                freq_bands: 8,
                vocab_bins: 256,
                max_joints: 100,
            },
            diffusion: DiffusionConfig {
                latent_tokens: 4,
                width: 32,
                heads: 2,
                blocks: 2,
                cond_width: 64,
            },
            pointnet,
            schedule_steps: 100,
            min_joints: 5,
            max_joints: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantScore {
    pub name: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub cd_j2j: f64,
    pub cd_b2b: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub scores: Vec<VariantScore>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&VariantScore> {
        self.scores.iter().find(|s| s.name == name)
    }
}

const TEMPLATES: [Template; 5] = [
    Template::Chain,
    Template::Quadruped,
    Template::Biped,
    Template::Star,
    Template::RandomTree,
];

/// Seeded benchmark: templates cycled, joint counts cycled through the
/// configured range.
pub fn build_benchmark(settings: &AblationSettings) -> Result<Vec<RigAsset>, RigError> {
    let span = settings.max_joints - settings.min_joints + 1;
    (0..settings.assets)
        .map(|i| {
            let k = settings.min_joints + i % span;
            synth_rig(settings.seed.wrapping_add(i as u64), k, TEMPLATES[i % TEMPLATES.len()])
        })
        .collect()
}

fn score_variant(
    name: &str,
    predictions: &[Option<Skeleton>],
    dataset: &[RigAsset],
) -> Result<VariantScore, RigError> {
    let cfg = MatchConfig::default();
    let mut sum = MetricsReport {
        iou: 0.0,
        precision: 0.0,
        recall: 0.0,
        cd_j2j: 0.0,
        cd_j2b: 0.0,
        cd_b2b: 0.0,
        tau: cfg.tau,
    };
    let mut failures = 0;
    for (pred, gt) in predictions.iter().zip(dataset) {
        // a prediction the metrics reject (e.g. too few joints) counts as
        // a failure, same as no prediction at all
        match pred.as_ref().map(|skeleton| evaluate(skeleton, &gt.skeleton, &cfg)) {
            Some(Ok(report)) => {
                sum.iou += report.iou;
                sum.precision += report.precision;
                sum.recall += report.recall;
                sum.cd_j2j += report.cd_j2j;
                sum.cd_b2b += report.cd_b2b;
            }
            Some(Err(_)) | None => {
                failures += 1;
                sum.cd_j2j += FAILURE_DISTANCE;
                sum.cd_b2b += FAILURE_DISTANCE;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(VariantScore {
        name: name.to_string(),
        iou: sum.iou / n,
        precision: sum.precision / n,
        recall: sum.recall / n,
        cd_j2j: sum.cd_j2j / n,
        cd_b2b: sum.cd_b2b / n,
        failures,
    })
}

fn point_features(
    point_params: &Params,
    dataset: &[RigAsset],
    surface_points: usize,
    seed: u64,
) -> Result<Vec<PointCloudFeature>, RigError> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, asset)| {
            let pts = sample_surface_points(&asset.mesh, surface_points, seed.wrapping_add(i as u64))?;
            encode_pointcloud(point_params, &pts)
        })
        .collect()
}

fn randn_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| randn(rng))
}

/// Full pipeline: ArAE + latent diffusion, predicted per asset from its
/// sampled surface points alone.
fn run_full(
    settings: &AblationSettings,
    dataset: &[RigAsset],
    point_params: &Params,
) -> Result<Vec<Option<Skeleton>>, RigError> {
    let mut arae_params = arae::init_arae_params(&settings.arae, settings.seed.wrapping_add(1));
    let stage_steps = settings.train_steps / 2;
    arae::train_arae(
        &mut arae_params,
        &settings.arae,
        dataset,
        &TrainConfig {
            steps: stage_steps,
            adam: AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
            seed: settings.seed.wrapping_add(2),
            aug_max_angle: None,
        },
    )?;
    let mut denoiser = diffusion::init_denoiser_params(&settings.diffusion, settings.seed.wrapping_add(3));
    let schedule = NoiseSchedule::linear(settings.schedule_steps);
    diffusion::train_diffusion(
        &mut denoiser,
        &settings.diffusion,
        &arae_params,
        &settings.arae,
        point_params,
        dataset,
        &schedule,
        &DiffusionTrainConfig {
            steps: stage_steps,
            adam: AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
            seed: settings.seed.wrapping_add(4),
            surface_points: settings.surface_points,
            aug_max_angle: None,
            cond_seed: settings.seed,
        },
    )?;
    let features = point_features(point_params, dataset, settings.surface_points, settings.seed)?;
    let max_len = 6 * settings.max_joints + 1;
    let predictions = features
        .iter()
        .enumerate()
        .map(|(i, cond)| {
            let latent = diffusion::ddpm_sample(
                &denoiser,
                &settings.diffusion,
                cond,
                &schedule,
                settings.seed.wrapping_add(i as u64),
            );
            let tokens =
                arae::generate_tokens(&arae_params, &settings.arae, &latent, arae::Strategy::Greedy, max_len)
                    .ok()?;
            detokenize(&tokens, &settings.arae.vocab()).ok()
        })
        .collect();
    Ok(predictions)
}

fn init_coord_denoiser(settings: &AblationSettings, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let d = settings.diffusion.width;
    nn::init_linear(&mut params, &mut rng, "od.in", 3, d);
    nn::init_linear(&mut params, &mut rng, "od.t", d, d);
    nn::init_linear(&mut params, &mut rng, "od.cond", settings.pointnet.feature_width, d);
    nn::init_linear(&mut params, &mut rng, "od.g", settings.pointnet.feature_width, d);
    params.insert("od.pos".into(), nn::init_matrix(&mut rng, settings.max_joints, d, 0.02));
    for b in 0..settings.diffusion.blocks {
        nn::init_attention(&mut params, &mut rng, &format!("od.block{b}.self"), d, d, d);
        nn::init_attention(&mut params, &mut rng, &format!("od.block{b}.cross"), d, d, d);
        nn::init_ffn(&mut params, &mut rng, &format!("od.block{b}.ffn"), d, 4 * d);
    }
    nn::init_linear(&mut params, &mut rng, "od.head", d, 3);
    params
}

fn coord_denoise_on_tape(
    tape: &mut Tape,
    params: &Params,
    settings: &AblationSettings,
    x_t: Var,
    t: usize,
    cond: Var,
    cond_global: Var,
) -> Var {
    let d = settings.diffusion.width;
    let heads = settings.diffusion.heads;
    let temb = tape.constant(timestep_embed(t, d));
    let temb = linear(tape, params, "od.t", temb);
    let lifted = linear(tape, params, "od.in", x_t);
    let x = tape.add_row(lifted, temb);
    let gemb = linear(tape, params, "od.g", cond_global);
    let x = tape.add_row(x, gemb);
    let pos = tape.param("od.pos", params["od.pos"].clone());
    let mut x = tape.add(x, pos);
    let cond_proj = linear(tape, params, "od.cond", cond);
    for b in 0..settings.diffusion.blocks {
        let normed = tape.layer_norm_rows(x);
        let sa = multi_head_attention(tape, params, &format!("od.block{b}.self"), normed, normed, heads, None);
        x = tape.add(x, sa);
        let normed = tape.layer_norm_rows(x);
        let ca = multi_head_attention(tape, params, &format!("od.block{b}.cross"), normed, cond_proj, heads, None);
        x = tape.add(x, ca);
        let normed = tape.layer_norm_rows(x);
        let f = nn::ffn(tape, params, &format!("od.block{b}.ffn"), normed);
        x = tape.add(x, f);
    }
    linear(tape, params, "od.head", x)
}

fn padded_coords(skeleton: &Skeleton, rows: usize) -> Array2<f64> {
    let mut x = Array2::zeros((rows, 3));
    for (i, j) in skeleton.joints.iter().enumerate().take(rows) {
        x[[i, 0]] = j.x;
        x[[i, 1]] = j.y;
        x[[i, 2]] = j.z;
    }
    x
}

/// Greedy radius clustering: rows within `radius` of an existing cluster
/// mean merge into it.
fn collapse_near_duplicates(rows: &Array2<f64>, radius: f64) -> Vec<Vec3> {
    let mut means: Vec<(Vec3, usize)> = Vec::new();
    for r in rows.rows() {
        let p = Vec3::new(r[0], r[1], r[2]);
        match means.iter_mut().find(|(m, _)| m.dist(p) < radius) {
            Some((m, n)) => {
                *m = m.scale(*n as f64).add(p).scale(1.0 / (*n + 1) as f64);
                *n += 1;
            }
            None => means.push((p, 1)),
        }
    }
    means.into_iter().map(|(m, _)| m).collect()
}

/// Coordinate diffusion + MST: diffuse padded joint coordinates directly,
/// collapse near-duplicate rows, and connect with a minimum spanning tree.
fn run_only_diffusion(
    settings: &AblationSettings,
    dataset: &[RigAsset],
    point_params: &Params,
) -> Result<Vec<Option<Skeleton>>, RigError> {
    let rows = settings.max_joints;
    let schedule = NoiseSchedule::linear(settings.schedule_steps);
    let mut params = init_coord_denoiser(settings, settings.seed.wrapping_add(10));
    let mut opt = Adam::new(AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(11));
    let features = point_features(point_params, dataset, settings.surface_points, settings.seed)?;
    for step in 0..settings.train_steps {
        let i = step % dataset.len();
        let x0 = padded_coords(&dataset[i].skeleton, rows);
        let t = rng.gen_range(1..=schedule.steps());
        let noise = randn_matrix(&mut rng, rows, 3);
        let x_t = ddpm_forward(&x0, t, &noise, &schedule)?;
        let mut tape = Tape::new();
        let x = tape.constant(x_t);
        let c = tape.constant(features[i].per_point.clone());
        let g = tape.constant(features[i].global.clone());
        let pred = coord_denoise_on_tape(&mut tape, &params, settings, x, t, c, g);
        let loss = tape.mse_const(pred, &x0);
        let grads = tape.backward(loss);
        opt.apply(&mut params, &grads);
    }
    let predictions = features
        .iter()
        .enumerate()
        .map(|(i, cond)| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(i as u64));
            let mut x = randn_matrix(&mut rng, rows, 3);
            for t in (1..=schedule.steps()).rev() {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let cv = tape.constant(cond.per_point.clone());
                let gv = tape.constant(cond.global.clone());
                let pred = coord_denoise_on_tape(&mut tape, &params, settings, xv, t, cv, gv);
                let x0_hat = tape.value(pred).clone();
                let beta = schedule.betas[t - 1];
                let alpha = schedule.alphas[t - 1];
                let ab = schedule.alpha_bar(t);
                let ab_prev = schedule.alpha_bar(t - 1);
                let mean = x0_hat * (ab_prev.sqrt() * beta / (1.0 - ab))
                    + &x * (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
                if t > 1 {
                    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                    x = mean + randn_matrix(&mut rng, rows, 3) * sigma;
                } else {
                    x = mean;
                }
            }
            let joints = collapse_near_duplicates(&x, 0.12);
            if joints.len() < 2 || joints.len() > crate::skeleton::MAX_JOINTS {
                return None;
            }
            mst_connectivity(&joints, RootRule::NearestCentroid).ok()
        })
        .collect();
    Ok(predictions)
}

/// Point-conditioned decoder only: the latent rows come from a learned
/// projection of the global point feature instead of the joints encoder.
fn run_only_gpt(
    settings: &AblationSettings,
    dataset: &[RigAsset],
    point_params: &Params,
) -> Result<Vec<Option<Skeleton>>, RigError> {
    let config = &settings.arae;
    let vocab = config.vocab();
    let mut params = arae::init_arae_params(config, settings.seed.wrapping_add(20));
    {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(21));
        nn::init_linear(
            &mut params,
            &mut rng,
            "og.cond",
            settings.pointnet.feature_width,
            config.latent_tokens * config.width,
        );
    }
    let features = point_features(point_params, dataset, settings.surface_points, settings.seed)?;
    let mut opt = Adam::new(AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() });
    let latent_of = |tape: &mut Tape, params: &Params, feature: &PointCloudFeature| -> Var {
        let global = tape.constant(feature.global.clone());
        let projected = linear(tape, params, "og.cond", global);
        tape.reshape(projected, config.latent_tokens, config.width)
    };
    for step in 0..settings.train_steps {
        let i = step % dataset.len();
        let mut tokens = crate::tokenizer::tokenize_skeleton(&dataset[i].skeleton, &vocab)?;
        tokens.ids.push(vocab.eos());
        let payload = &tokens.ids[..tokens.ids.len() - 1];
        let mut tape = Tape::new();
        let latent = latent_of(&mut tape, &params, &features[i]);
        let logits = arae::decode_on_tape(&mut tape, &params, config, latent, payload);
        let targets: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy_rows(logits, &targets);
        let grads = tape.backward(loss);
        opt.apply(&mut params, &grads);
    }
    let max_len = 6 * settings.max_joints + 1;
    let predictions = features
        .iter()
        .map(|feature| {
            let mut tape = Tape::new();
            let latent = latent_of(&mut tape, &params, feature);
            let latent = tape.value(latent).clone();
            let tokens =
                arae::generate_tokens(&params, config, &latent, arae::Strategy::Greedy, max_len).ok()?;
            detokenize(&tokens, &vocab).ok()
        })
        .collect();
    Ok(predictions)
}

/// Train and score all three variants on the same benchmark, point
/// encoder, and step budget.
pub fn run_ablation(settings: &AblationSettings) -> Result<AblationReport, RigError> {
    let dataset = build_benchmark(settings)?;
    let mut point_params = crate::pointnet::init_pointnet_params(&settings.pointnet, settings.seed);
    let clouds: Vec<Vec<Vec3>> = dataset
        .iter()
        .enumerate()
        .map(|(i, a)| {
            sample_surface_points(&a.mesh, settings.surface_points, settings.seed.wrapping_add(i as u64))
        })
        .collect::<Result<_, _>>()?;
    pretrain_pointnet(
        &mut point_params,
        &settings.pointnet,
        &clouds,
        settings.pretrain_steps,
        AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
        settings.seed.wrapping_add(30),
    )?;
    let full = run_full(settings, &dataset, &point_params)?;
    let only_diffusion = run_only_diffusion(settings, &dataset, &point_params)?;
    let only_gpt = run_only_gpt(settings, &dataset, &point_params)?;
    Ok(AblationReport {
        scores: vec![
            score_variant("only-diffusion", &only_diffusion, &dataset)?,
            score_variant("only-gpt", &only_gpt, &dataset)?,
            score_variant("full", &full, &dataset)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_is_deterministic_and_sized() {
        let settings = AblationSettings { assets: 10, ..AblationSettings::default() };
        let a = build_benchmark(&settings).unwrap();
        let b = build_benchmark(&settings).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        for asset in &a {
            let k = asset.skeleton.len();
            assert!((5..=8).contains(&k));
        }
    }

    #[test]
    fn collapse_merges_close_rows() {
        let rows = Array2::from_shape_vec(
            (4, 3),
            vec![0.0, 0.0, 0.0, 0.01, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.005, 0.0],
        )
        .unwrap();
        let out = collapse_near_duplicates(&rows, 0.1);
        assert_eq!(out.len(), 2);
        assert!(out[0].norm() < 0.02);
        assert!((out[1].x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let settings = AblationSettings { assets: 4, ..AblationSettings::default() };
        let dataset = build_benchmark(&settings).unwrap();
        let preds: Vec<Option<Skeleton>> = dataset.iter().map(|a| Some(a.skeleton.clone())).collect();
        let score = score_variant("oracle", &preds, &dataset).unwrap();
        assert!((score.iou - 1.0).abs() < 1e-12);
        assert!(score.cd_b2b.abs() < 1e-12);
        assert_eq!(score.failures, 0);
    }

    #[test]
    fn failures_are_penalized() {
        let settings = AblationSettings { assets: 2, ..AblationSettings::default() };
        let dataset = build_benchmark(&settings).unwrap();
        let preds = vec![Some(dataset[0].skeleton.clone()), None];
        let score = score_variant("partial", &preds, &dataset).unwrap();
        assert_eq!(score.failures, 1);
        assert!((score.cd_b2b - FAILURE_DISTANCE / 2.0).abs() < 1e-12);
        assert!((score.iou - 0.5).abs() < 1e-12);
    }
}
