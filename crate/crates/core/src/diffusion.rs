//! Mesh-conditioned latent diffusion: a DDPM over the ArAE latent
//! embedding, denoised by self-attention over latent rows with
//! cross-attention to frozen point-cloud features.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arae::{self, ArAEConfig, LatentEmbedding};
use crate::autodiff::{Tape, Var};
use crate::error::RigError;
use crate::nn::{self, linear, multi_head_attention, randn, timestep_embed, Adam, AdamConfig, Params};
use crate::pointnet::{encode_pointcloud, sample_surface_points, PointCloudFeature};
use crate::skeleton::{validate_mesh, Mesh, RigAsset, Skeleton};
use crate::tokenizer::detokenize;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Cumulative products; `alpha_bar(0)` is defined as 1.
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from 1e-4 to 0.02 over `steps` timesteps.
    pub fn linear(steps: usize) -> Self {
        assert!(steps >= 1);
        let (b0, b1) = (1e-4, 0.02);
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    b0
                } else {
                    b0 + (b1 - b0) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule { betas, alphas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// alpha_bar at 1-based timestep t; t = 0 returns 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig {
    /// Latent shape, shared with the ArAE.
    pub latent_tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Point-feature width d_c from the point encoder.
    pub cond_width: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { latent_tokens: 16, width: 64, heads: 4, blocks: 2, cond_width: 128 }
    }
}

pub fn init_denoiser_params(config: &DiffusionConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let d = config.width;
    nn::init_linear(&mut params, &mut rng, "dn.t", d, d);
    nn::init_linear(&mut params, &mut rng, "dn.cond", config.cond_width, d);
    nn::init_linear(&mut params, &mut rng, "dn.g", config.cond_width, d);
    // row identities: without these the network is permutation-equivariant
    // over latent rows and cannot regress row-distinct clean latents from noise
    params.insert("dn.pos".into(), nn::init_matrix(&mut rng, config.latent_tokens, d, 0.02));
    for b in 0..config.blocks {
        nn::init_attention(&mut params, &mut rng, &format!("dn.block{b}.self"), d, d, d);
        nn::init_attention(&mut params, &mut rng, &format!("dn.block{b}.cross"), d, d, d);
        nn::init_ffn(&mut params, &mut rng, &format!("dn.block{b}.ffn"), d, 4 * d);
    }
    nn::init_linear(&mut params, &mut rng, "dn.head", d, d);
    params
}

/// q(x_t | x_0): x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn ddpm_forward(
    x0: &LatentEmbedding,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>, RigError> {
    if t < 1 || t > schedule.steps() {
        return Err(RigError::Range(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    if noise.dim() != x0.dim() {
        return Err(RigError::Dimension("noise shape differs from x0".into()));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

fn denoise_on_tape(
    tape: &mut Tape,
    params: &Params,
    config: &DiffusionConfig,
    x_t: Var,
    t: usize,
    cond: Var,
    cond_global: Var,
) -> Var {
    let temb = tape.constant(timestep_embed(t, config.width));
    let temb = linear(tape, params, "dn.t", temb);
    let x = tape.add_row(x_t, temb);
    let gemb = linear(tape, params, "dn.g", cond_global);
    let x = tape.add_row(x, gemb);
    let pos = tape.param("dn.pos", params["dn.pos"].clone());
    let mut x = tape.add(x, pos);
    let cond_proj = linear(tape, params, "dn.cond", cond);
    for b in 0..config.blocks {
        let normed = tape.layer_norm_rows(x);
        let sa = multi_head_attention(tape, params, &format!("dn.block{b}.self"), normed, normed, config.heads, None);
        x = tape.add(x, sa);
        let normed = tape.layer_norm_rows(x);
        let ca = multi_head_attention(tape, params, &format!("dn.block{b}.cross"), normed, cond_proj, config.heads, None);
        x = tape.add(x, ca);
        let normed = tape.layer_norm_rows(x);
        let f = nn::ffn(tape, params, &format!("dn.block{b}.ffn"), normed);
        x = tape.add(x, f);
    }
    linear(tape, params, "dn.head", x)
}

/// Predicted clean latent x_0 from x_t at timestep t under the given
/// conditioning.
pub fn denoise_predict(
    params: &Params,
    config: &DiffusionConfig,
    x_t: &Array2<f64>,
    t: usize,
    cond: &PointCloudFeature,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let c = tape.constant(cond.per_point.clone());
    let g = tape.constant(cond.global.clone());
    let out = denoise_on_tape(&mut tape, params, config, x, t, c, g);
    tape.value(out).clone()
}

/// MSE between the predicted and true clean latent (x_0 parameterization).
pub fn diffusion_loss_on_tape(
    tape: &mut Tape,
    params: &Params,
    config: &DiffusionConfig,
    x0: &LatentEmbedding,
    cond: &PointCloudFeature,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Var, RigError> {
    let x_t = ddpm_forward(x0, t, noise, schedule)?;
    let x = tape.constant(x_t);
    let c = tape.constant(cond.per_point.clone());
    let g = tape.constant(cond.global.clone());
    let pred = denoise_on_tape(tape, params, config, x, t, c, g);
    Ok(tape.mse_const(pred, x0))
}

pub fn diffusion_loss(
    params: &Params,
    config: &DiffusionConfig,
    x0: &LatentEmbedding,
    cond: &PointCloudFeature,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<f64, RigError> {
    let mut tape = Tape::new();
    let loss = diffusion_loss_on_tape(&mut tape, params, config, x0, cond, t, noise, schedule)?;
    Ok(tape.scalar(loss))
}

fn randn_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| randn(rng))
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub surface_points: usize,
    /// Pose-augmentation magnitude in degrees, applied online; None disables.
    pub aug_max_angle: Option<f64>,
    /// Base seed for per-asset surface sampling; asset i uses cond_seed + i,
    /// so training sees the same clouds a later evaluation pass will.
    pub cond_seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 2000,
            adam: AdamConfig::default(),
            seed: 0,
            surface_points: 1024,
            aug_max_angle: None,
            cond_seed: 0,
        }
    }
}

/// Train the denoiser. The joints encoder (ArAE params) and point encoder
/// are read-only here, matching the two-stage protocol.
pub fn train_diffusion(
    denoiser: &mut Params,
    config: &DiffusionConfig,
    arae_params: &Params,
    arae_config: &ArAEConfig,
    point_params: &Params,
    dataset: &[RigAsset],
    schedule: &NoiseSchedule,
    train: &DiffusionTrainConfig,
) -> Result<Vec<f64>, RigError> {
    if dataset.is_empty() {
        return Err(RigError::Degenerate("empty dataset".into()));
    }
    let mut opt = Adam::new(train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut curve = Vec::with_capacity(train.steps);
    let mut base: Vec<Option<(LatentEmbedding, PointCloudFeature)>> = vec![None; dataset.len()];
    for step in 0..train.steps {
        let i = step % dataset.len();
        let asset = &dataset[i];
        let augmented = match train.aug_max_angle {
            Some(angle) if angle > 0.0 && asset.skin.is_some() => {
                Some(crate::deform::augment_pose(asset, rng.gen(), angle)?)
            }
            _ => None,
        };
        let (x0, cond) = match &augmented {
            Some(working) => {
                let valid = vec![true; working.skeleton.len()];
                let x0 =
                    arae::encode_joints(arae_params, arae_config, &working.skeleton.joints, &valid)?;
                let points = sample_surface_points(&working.mesh, train.surface_points, rng.gen())?;
                (x0, encode_pointcloud(point_params, &points)?)
            }
            None => {
                if base[i].is_none() {
                    let valid = vec![true; asset.skeleton.len()];
                    let x0 =
                        arae::encode_joints(arae_params, arae_config, &asset.skeleton.joints, &valid)?;
                    let points = sample_surface_points(
                        &asset.mesh,
                        train.surface_points,
                        train.cond_seed.wrapping_add(i as u64),
                    )?;
                    base[i] = Some((x0, encode_pointcloud(point_params, &points)?));
                }
                base[i].clone().unwrap()
            }
        };
        let t = rng.gen_range(1..=schedule.steps());
        let noise = randn_matrix(&mut rng, x0.nrows(), x0.ncols());
        let mut tape = Tape::new();
        let loss = diffusion_loss_on_tape(&mut tape, denoiser, config, &x0, &cond, t, &noise, schedule)?;
        curve.push(tape.scalar(loss));
        let grads = tape.backward(loss);
        opt.apply(denoiser, &grads);
    }
    Ok(curve)
}

/// Ancestral DDPM sampling from pure noise down to x_0.
pub fn ddpm_sample(
    params: &Params,
    config: &DiffusionConfig,
    cond: &PointCloudFeature,
    schedule: &NoiseSchedule,
    seed: u64,
) -> LatentEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d) = (config.latent_tokens, config.width);
    let mut x = randn_matrix(&mut rng, m, d);
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = denoise_predict(params, config, &x, t, cond);
        let beta = schedule.betas[t - 1];
        let alpha = schedule.alphas[t - 1];
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let mean = x0_hat * (ab_prev.sqrt() * beta / (1.0 - ab))
            + &x * (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        if t > 1 {
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            x = mean + randn_matrix(&mut rng, m, d) * sigma;
        } else {
            x = mean;
        }
    }
    x
}

/// Gradient check for the diffusion loss.
pub fn diffusion_grad_check(
    params: &Params,
    config: &DiffusionConfig,
    x0: &LatentEmbedding,
    cond: &PointCloudFeature,
    t: usize,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<f64, RigError> {
    let mut tape = Tape::new();
    let loss = diffusion_loss_on_tape(&mut tape, params, config, x0, cond, t, noise, schedule)?;
    let grads = tape.backward(loss);
    let loss_at = |p: &Params| diffusion_loss(p, config, x0, cond, t, noise, schedule).unwrap();
    Ok(arae::finite_diff_check(params, &grads, loss_at, epsilon, coords, seed))
}

/// Full skeleton prediction: sample surface points, encode, sample a
/// latent with the diffusion model, decode tokens, detokenize.
pub fn predict_skeleton(
    mesh: &Mesh,
    arae_params: &Params,
    arae_config: &ArAEConfig,
    denoiser: &Params,
    diff_config: &DiffusionConfig,
    point_params: &Params,
    surface_points: usize,
    seed: u64,
) -> Result<Skeleton, RigError> {
    let report = validate_mesh(mesh);
    if !report.is_empty() {
        return Err(RigError::Invalid(report));
    }
    let points = sample_surface_points(mesh, surface_points, seed)?;
    let cond = encode_pointcloud(point_params, &points)?;
    let schedule = NoiseSchedule::linear(100);
    let latent = ddpm_sample(denoiser, diff_config, &cond, &schedule, seed);
    let tokens = arae::generate_tokens(
        arae_params,
        arae_config,
        &latent,
        arae::Strategy::Greedy,
        arae_config.max_sequence(),
    )?;
    detokenize(&tokens, &arae_config.vocab())
        .map_err(|e| RigError::Format(format!("{e}; raw tokens: {:?}", tokens.ids)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_monotone_and_identity() {
        let s = NoiseSchedule::linear(100);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.betas[t - 1] > 0.0 && s.betas[t - 1] < 1.0);
            let c = s.alpha_bar(t).sqrt().powi(2) + (1.0 - s.alpha_bar(t)).sqrt().powi(2);
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_alpha_bar_t4() {
        let s = NoiseSchedule::linear(4);
        // betas: 1e-4, 0.0067333..., 0.0133666..., 0.02
        let expect = (1.0 - 1e-4)
            * (1.0 - (1e-4 + (0.02 - 1e-4) / 3.0))
            * (1.0 - (1e-4 + 2.0 * (0.02 - 1e-4) / 3.0))
            * (1.0 - 0.02);
        assert!((s.alpha_bar(4) - expect).abs() < 1e-12);
        assert!((s.alpha_bar(4) - 0.9597).abs() < 1e-3);
    }

    #[test]
    fn forward_identity_when_noise_zero() {
        let s = NoiseSchedule::linear(10);
        let x0 = Array2::from_elem((2, 3), 0.7);
        let zero = Array2::zeros((2, 3));
        let x1 = ddpm_forward(&x0, 1, &zero, &s).unwrap();
        // at t=1 with tiny beta, x_t is very close to x0
        assert!((&x1 - &(x0.clone() * s.alpha_bar(1).sqrt())).mapv(f64::abs).sum() < 1e-12);
        assert!(ddpm_forward(&x0, 0, &zero, &s).is_err());
        assert!(ddpm_forward(&x0, 11, &zero, &s).is_err());
    }

    #[test]
    fn forward_variance_matches_schedule() {
        let s = NoiseSchedule::linear(100);
        let x0 = Array2::zeros((1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &[10usize, 50, 100] {
            let draws = 10_000;
            let mut sum2 = 0.0;
            for _ in 0..draws {
                let noise = randn_matrix(&mut rng, 1, 1);
                let x = ddpm_forward(&x0, t, &noise, &s).unwrap();
                sum2 += x[[0, 0]] * x[[0, 0]];
            }
            let var = sum2 / draws as f64;
            let expect = 1.0 - s.alpha_bar(t);
            assert!((var - expect).abs() / expect < 0.05, "t={t}: var {var} expect {expect}");
        }
    }

    fn toy_setup() -> (DiffusionConfig, Params, PointCloudFeature, NoiseSchedule) {
        let config = DiffusionConfig { latent_tokens: 2, width: 8, heads: 2, blocks: 1, cond_width: 8 };
        let params = init_denoiser_params(&config, 1);
        let cond = PointCloudFeature {
            per_point: Array2::from_shape_fn((5, 8), |(i, j)| ((i + 2 * j) as f64 * 0.37).sin()),
            global: Array2::zeros((1, 8)),
        };
        (config, params, cond, NoiseSchedule::linear(10))
    }

    #[test]
    fn loss_nonnegative_and_zero_at_exact_prediction() {
        let (config, params, cond, schedule) = toy_setup();
        let x0 = Array2::from_elem((2, 8), 0.3);
        let noise = Array2::from_elem((2, 8), 0.5);
        let loss = diffusion_loss(&params, &config, &x0, &cond, 3, &noise, &schedule).unwrap();
        assert!(loss >= 0.0);
        // a denoiser forced to output zero against the clean target -> loss is
        // exactly mean(x0^2), independent of the drawn noise
        let mut zeroed = params.clone();
        for (name, value) in zeroed.iter_mut() {
            if name.starts_with("dn.head") {
                value.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let noise = randn_matrix(&mut rng, 2, 8);
            let loss = diffusion_loss(&zeroed, &config, &x0, &cond, 3, &noise, &schedule).unwrap();
            assert!((loss - 0.09).abs() < 1e-12, "loss {loss}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (config, params, cond, schedule) = toy_setup();
        let x0 = Array2::from_shape_fn((2, 8), |(i, j)| ((i * 3 + j) as f64 * 0.21).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = randn_matrix(&mut rng, 2, 8);
        let err = diffusion_grad_check(&params, &config, &x0, &cond, 5, &noise, &schedule, 1e-5, 100, 3).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn sampling_shape_and_seed_behavior() {
        let (config, params, cond, schedule) = toy_setup();
        let a = ddpm_sample(&params, &config, &cond, &schedule, 1);
        let b = ddpm_sample(&params, &config, &cond, &schedule, 1);
        let c = ddpm_sample(&params, &config, &cond, &schedule, 2);
        assert_eq!(a.dim(), (2, 8));
        assert_eq!(a, b);
        assert!((&a - &c).mapv(f64::abs).sum() > 0.0);
    }
}
