//! Surface point sampling and a small permutation-invariant point-cloud
//! encoder (shared per-point MLP with symmetric max pooling), pre-trained
//! with a point-cloud autoencoding objective and then frozen.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::RigError;
use crate::nn::{self, linear, Adam, AdamConfig, Params};
use crate::skeleton::{Mesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointNetConfig {
    /// Per-point / global feature width d_c.
    pub feature_width: usize,
    pub hidden: usize,
    /// Points reconstructed by the autoencoding head during pretraining.
    pub recon_points: usize,
}

impl Default for PointNetConfig {
    fn default() -> Self {
        PointNetConfig { feature_width: 128, hidden: 64, recon_points: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFeature {
    /// n x d_c per-point features.
    pub per_point: Array2<f64>,
    /// 1 x d_c pooled global feature.
    pub global: Array2<f64>,
}

/// Area-weighted triangle selection, then uniform barycentric sampling.
/// Deterministic per seed.
pub fn sample_surface_points(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Vec3>, RigError> {
    if n == 0 {
        return Err(RigError::Range("need at least one sample".into()));
    }
    let areas: Vec<f64> = mesh
        .faces
        .iter()
        .map(|f| {
            let a = mesh.vertices[f[0]];
            let b = mesh.vertices[f[1]];
            let c = mesh.vertices[f[2]];
            b.sub(a).cross(c.sub(a)).norm() * 0.5
        })
        .collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Err(RigError::Degenerate("zero-total-area mesh".into()));
    }
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(0.0..total);
        let fi = cumulative.partition_point(|&c| c <= r).min(mesh.faces.len() - 1);
        let f = mesh.faces[fi];
        let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let a = mesh.vertices[f[0]];
        let b = mesh.vertices[f[1]];
        let c = mesh.vertices[f[2]];
        out.push(a.add(b.sub(a).scale(u)).add(c.sub(a).scale(v)));
    }
    Ok(out)
}

pub fn init_pointnet_params(config: &PointNetConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    nn::init_linear(&mut params, &mut rng, "pt.l1", 3, config.hidden);
    nn::init_linear(&mut params, &mut rng, "pt.l2", config.hidden, config.feature_width);
    nn::init_linear(&mut params, &mut rng, "pt.post", config.feature_width, config.feature_width);
    nn::init_linear(&mut params, &mut rng, "pt.dec", config.feature_width, 3 * config.recon_points);
    params
}

fn points_matrix(points: &[Vec3]) -> Array2<f64> {
    let mut m = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        m[[i, 0]] = p.x;
        m[[i, 1]] = p.y;
        m[[i, 2]] = p.z;
    }
    m
}

/// Forward on an existing tape; returns (per-point, global) feature Vars.
fn encode_on_tape(tape: &mut Tape, params: &Params, points: &[Vec3]) -> (Var, Var) {
    let x = tape.constant(points_matrix(points));
    let h = linear(tape, params, "pt.l1", x);
    let h = tape.relu(h);
    let per_point = linear(tape, params, "pt.l2", h);
    let pooled = tape.max_rows(per_point);
    let global = linear(tape, params, "pt.post", pooled);
    (per_point, global)
}

/// Shared per-point transform with symmetric max pooling; output is
/// exactly invariant to point order.
pub fn encode_pointcloud(params: &Params, points: &[Vec3]) -> Result<PointCloudFeature, RigError> {
    if points.is_empty() {
        return Err(RigError::Degenerate("no points".into()));
    }
    let mut tape = Tape::new();
    let (per_point, global) = encode_on_tape(&mut tape, params, points);
    Ok(PointCloudFeature {
        per_point: tape.value(per_point).clone(),
        global: tape.value(global).clone(),
    })
}

/// Symmetric chamfer between a tracked point matrix and a fixed target
/// set, with nearest-pair assignments computed outside the tape.
fn chamfer_loss_on_tape(tape: &mut Tape, pred: Var, target: &Array2<f64>) -> Var {
    let pred_val = tape.value(pred).clone();
    let np = pred_val.nrows();
    let nt = target.nrows();
    let dist2 = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    // pred -> target assignment
    let fwd: Vec<usize> = (0..np)
        .map(|i| {
            (0..nt)
                .min_by(|&a, &b| {
                    dist2(pred_val.row(i), target.row(a))
                        .partial_cmp(&dist2(pred_val.row(i), target.row(b)))
                        .unwrap()
                })
                .unwrap()
        })
        .collect();
    let bwd: Vec<usize> = (0..nt)
        .map(|j| {
            (0..np)
                .min_by(|&a, &b| {
                    dist2(pred_val.row(a), target.row(j))
                        .partial_cmp(&dist2(pred_val.row(b), target.row(j)))
                        .unwrap()
                })
                .unwrap()
        })
        .collect();
    let fwd_target = {
        let mut m = Array2::zeros((np, 3));
        for (i, &j) in fwd.iter().enumerate() {
            m.row_mut(i).assign(&target.row(j));
        }
        m
    };
    let loss_fwd = tape.mse_const(pred, &fwd_target);
    let picked = tape.gather_rows(pred, &bwd);
    let loss_bwd = tape.mse_const(picked, target);
    let sum = tape.add(loss_fwd, loss_bwd);
    tape.scale(sum, 0.5)
}

/// Self-supervised pretraining: reconstruct a small point set from the
/// global feature under a chamfer objective. Returns the loss curve.
pub fn pretrain_pointnet(
    params: &mut Params,
    config: &PointNetConfig,
    clouds: &[Vec<Vec3>],
    steps: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<Vec<f64>, RigError> {
    if clouds.is_empty() {
        return Err(RigError::Degenerate("no training clouds".into()));
    }
    let mut opt = Adam::new(adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let cloud = &clouds[step % clouds.len()];
        // fixed-size reconstruction target: a seeded subsample
        let target: Vec<Vec3> = (0..config.recon_points)
            .map(|_| cloud[rng.gen_range(0..cloud.len())])
            .collect();
        let mut tape = Tape::new();
        let (_, global) = encode_on_tape(&mut tape, params, cloud);
        let flat = linear(&mut tape, params, "pt.dec", global);
        let recon = tape.reshape(flat, config.recon_points, 3);
        let loss = chamfer_loss_on_tape(&mut tape, recon, &points_matrix(&target));
        curve.push(tape.scalar(loss));
        let grads = tape.backward(loss);
        opt.apply(params, &grads);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_mesh() -> Mesh {
        Mesh {
            vertices: vec![
                Vec3::ZERO,
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn samples_stay_inside_triangle() {
        let pts = sample_surface_points(&tri_mesh(), 200, 3).unwrap();
        for p in pts {
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= 1.0 + 1e-12);
            assert!(p.z.abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_deterministic() {
        let a = sample_surface_points(&tri_mesh(), 64, 9).unwrap();
        let b = sample_surface_points(&tri_mesh(), 64, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn area_weighting_nine_to_one() {
        // two triangles with area ratio 9:1
        let mesh = Mesh {
            vertices: vec![
                Vec3::ZERO,
                Vec3::new(3.0, 0.0, 0.0),
                Vec3::new(0.0, 3.0, 0.0),
                Vec3::new(10.0, 0.0, 0.0),
                Vec3::new(11.0, 0.0, 0.0),
                Vec3::new(10.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let pts = sample_surface_points(&mesh, 10_000, 11).unwrap();
        let big = pts.iter().filter(|p| p.x < 9.0).count() as f64 / 10_000.0;
        assert!((big - 0.9).abs() < 0.03, "big-triangle share {big}");
    }

    #[test]
    fn zero_area_mesh_rejected() {
        let mesh = Mesh {
            vertices: vec![Vec3::ZERO, Vec3::ZERO, Vec3::ZERO],
            faces: vec![[0, 1, 2]],
        };
        assert!(sample_surface_points(&mesh, 10, 0).is_err());
    }

    #[test]
    fn encoder_permutation_invariant() {
        let config = PointNetConfig { feature_width: 16, hidden: 8, recon_points: 4 };
        let params = init_pointnet_params(&config, 1);
        let pts = sample_surface_points(&tri_mesh(), 50, 5).unwrap();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let a = encode_pointcloud(&params, &pts).unwrap();
        let b = encode_pointcloud(&params, &shuffled).unwrap();
        let diff = (&a.global - &b.global).mapv(f64::abs).sum();
        assert!(diff < 1e-9);
        assert_eq!(a.per_point.dim(), (50, 16));
        assert_eq!(a.global.dim(), (1, 16));
    }

    #[test]
    fn duplicated_points_same_global() {
        let config = PointNetConfig { feature_width: 16, hidden: 8, recon_points: 4 };
        let params = init_pointnet_params(&config, 2);
        let pts = sample_surface_points(&tri_mesh(), 30, 6).unwrap();
        let mut doubled = pts.clone();
        doubled.extend_from_slice(&pts);
        let a = encode_pointcloud(&params, &pts).unwrap();
        let b = encode_pointcloud(&params, &doubled).unwrap();
        assert!((&a.global - &b.global).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let config = PointNetConfig { feature_width: 16, hidden: 16, recon_points: 8 };
        let mut params = init_pointnet_params(&config, 3);
        let clouds: Vec<Vec<Vec3>> = (0..4)
            .map(|s| sample_surface_points(&tri_mesh(), 40, s).unwrap())
            .collect();
        let curve = pretrain_pointnet(&mut params, &config, &clouds, 300, AdamConfig { lr: 1e-2, ..Default::default() }, 4).unwrap();
        let head: f64 = curve[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = curve[curve.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head * 0.5, "head {head} tail {tail}");
    }
}
