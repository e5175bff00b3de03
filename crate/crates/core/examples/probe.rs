use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rigkit::ablation::{build_benchmark, AblationSettings, LEARNING_RATE};
use rigkit::arae::{self, TrainConfig};
use rigkit::diffusion::{self, DiffusionTrainConfig, NoiseSchedule};
use rigkit::metrics::{evaluate, MatchConfig};
use rigkit::nn::AdamConfig;
use rigkit::pointnet::{encode_pointcloud, init_pointnet_params, pretrain_pointnet, sample_surface_points};
use rigkit::tokenizer::detokenize;

fn main() {
    let settings = AblationSettings {
        assets: 40,
        train_steps: 4000,
        ..AblationSettings::default()
    };
    let dataset = build_benchmark(&settings).unwrap();

    let mut point_params = init_pointnet_params(&settings.pointnet, settings.seed);
    let clouds: Vec<Vec<rigkit::Vec3>> = dataset
        .iter()
        .enumerate()
        .map(|(i, a)| {
            sample_surface_points(&a.mesh, settings.surface_points, settings.seed.wrapping_add(i as u64))
                .unwrap()
        })
        .collect();
    pretrain_pointnet(
        &mut point_params,
        &settings.pointnet,
        &clouds,
        settings.pretrain_steps,
        AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
        settings.seed.wrapping_add(30),
    )
    .unwrap();

    let stage_steps = settings.train_steps / 2;
    let mut arae_params = arae::init_arae_params(&settings.arae, settings.seed.wrapping_add(1));
    let curve = arae::train_arae(
        &mut arae_params,
        &settings.arae,
        &dataset,
        &TrainConfig {
            steps: stage_steps,
            adam: AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
            seed: settings.seed.wrapping_add(2),
            aug_max_angle: None,
        },
    )
    .unwrap();
    println!("arae final loss: {:.4}", curve.last().unwrap());

    // Decoder robustness: iou of greedy decode from true latent + sigma*noise.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let max_len = 6 * settings.max_joints + 1;
    for sigma in [0.0, 0.05, 0.1, 0.2, 0.4] {
        let mut iou_sum = 0.0;
        let mut fails = 0usize;
        for asset in &dataset {
            let valid = vec![true; asset.skeleton.len()];
            let latent =
                arae::encode_joints(&arae_params, &settings.arae, &asset.skeleton.joints, &valid)
                    .unwrap();
            let noisy = &latent
                + &Array2::from_shape_fn(latent.dim(), |_| {
                    sigma * rigkit::nn::randn(&mut rng)
                });
            match arae::generate_tokens(&arae_params, &settings.arae, &noisy, arae::Strategy::Greedy, max_len)
                .ok()
                .and_then(|t| detokenize(&t, &settings.arae.vocab()).ok())
                .and_then(|s| evaluate(&s, &asset.skeleton, &MatchConfig::default()).ok())
            {
                Some(r) => iou_sum += r.iou,
                None => fails += 1,
            }
        }
        println!(
            "decoder robustness sigma={sigma:.2}: iou={:.4} fails={fails}",
            iou_sum / dataset.len() as f64
        );
    }

    let mut denoiser =
        diffusion::init_denoiser_params(&settings.diffusion, settings.seed.wrapping_add(3));
    let schedule = NoiseSchedule::linear(settings.schedule_steps);
    let dcurve = diffusion::train_diffusion(
        &mut denoiser,
        &settings.diffusion,
        &arae_params,
        &settings.arae,
        &point_params,
        &dataset,
        &schedule,
        &DiffusionTrainConfig {
            steps: stage_steps,
            adam: AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
            seed: settings.seed.wrapping_add(4),
            surface_points: settings.surface_points,
            aug_max_angle: None,
            cond_seed: settings.seed,
        },
    )
    .unwrap();
    let tail: f64 = dcurve[dcurve.len() - 50..].iter().sum::<f64>() / 50.0;
    println!(
        "diffusion loss: first={:.4} mid={:.4} tail50={:.4}",
        dcurve[0],
        dcurve[dcurve.len() / 2],
        tail
    );

    // Per-timestep x0 prediction error after training.
    let mut rng2 = ChaCha8Rng::seed_from_u64(123);
    for t in [100usize, 75, 50, 25, 10, 1] {
        let mut mse_sum = 0.0;
        for (i, asset) in dataset.iter().enumerate() {
            let pts = sample_surface_points(&asset.mesh, settings.surface_points, settings.seed.wrapping_add(i as u64)).unwrap();
            let cond = encode_pointcloud(&point_params, &pts).unwrap();
            let valid = vec![true; asset.skeleton.len()];
            let x0 = arae::encode_joints(&arae_params, &settings.arae, &asset.skeleton.joints, &valid).unwrap();
            let noise = Array2::from_shape_fn(x0.dim(), |_| rigkit::nn::randn(&mut rng2));
            let x_t = diffusion::ddpm_forward(&x0, t, &noise, &schedule).unwrap();
            let pred = diffusion::denoise_predict(&denoiser, &settings.diffusion, &x_t, t, &cond);
            mse_sum += (&pred - &x0).mapv(|v| v * v).mean().unwrap();
        }
        println!("t={t:3}: x0 pred mse={:.4}", mse_sum / dataset.len() as f64);
    }

    // One-shot decode: x0 predicted directly from pure noise at t=T.
    let mut iou_one = 0.0;
    let mut fails_one = 0usize;
    for (i, asset) in dataset.iter().enumerate() {
        let pts = sample_surface_points(&asset.mesh, settings.surface_points, settings.seed.wrapping_add(i as u64)).unwrap();
        let cond = encode_pointcloud(&point_params, &pts).unwrap();
        let m = settings.diffusion.latent_tokens;
        let d = settings.diffusion.width;
        let x_t = Array2::from_shape_fn((m, d), |_| rigkit::nn::randn(&mut rng2));
        let pred = diffusion::denoise_predict(&denoiser, &settings.diffusion, &x_t, settings.schedule_steps, &cond);
        match arae::generate_tokens(&arae_params, &settings.arae, &pred, arae::Strategy::Greedy, max_len)
            .ok()
            .and_then(|t| detokenize(&t, &settings.arae.vocab()).ok())
            .and_then(|s| evaluate(&s, &asset.skeleton, &MatchConfig::default()).ok())
        {
            Some(r) => iou_one += r.iou,
            None => fails_one += 1,
        }
    }
    println!(
        "one-shot x0 decode: iou={:.4} fails={fails_one}",
        iou_one / dataset.len() as f64
    );

    // Sampled latent vs true latent, and iou of decoding the sample.
    let mut rms_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut fails = 0usize;
    for (i, asset) in dataset.iter().enumerate() {
        let pts = sample_surface_points(&asset.mesh, settings.surface_points, settings.seed.wrapping_add(i as u64)).unwrap();
        let cond = encode_pointcloud(&point_params, &pts).unwrap();
        let latent = diffusion::ddpm_sample(&denoiser, &settings.diffusion, &cond, &schedule, settings.seed.wrapping_add(i as u64));
        let valid = vec![true; asset.skeleton.len()];
        let truth =
            arae::encode_joints(&arae_params, &settings.arae, &asset.skeleton.joints, &valid).unwrap();
        let diff = &latent - &truth;
        rms_sum += (diff.mapv(|v| v * v).mean().unwrap()).sqrt();
        match arae::generate_tokens(&arae_params, &settings.arae, &latent, arae::Strategy::Greedy, max_len)
            .ok()
            .and_then(|t| detokenize(&t, &settings.arae.vocab()).ok())
            .and_then(|s| evaluate(&s, &asset.skeleton, &MatchConfig::default()).ok())
        {
            Some(r) => iou_sum += r.iou,
            None => fails += 1,
        }
    }
    println!(
        "sampled latent rms err: {:.4}, decoded iou: {:.4}, fails={fails}",
        rms_sum / dataset.len() as f64,
        iou_sum / dataset.len() as f64
    );
}
