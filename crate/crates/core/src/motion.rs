//! Motion transfer: carry skinning weights through a vertex
//! correspondence, estimate per-frame joints, fit per-joint rigid
//! transforms by gradient descent, and retarget a sequence onto the
//! target mesh.

use serde::{Deserialize, Serialize};

use crate::deform::{linear_blend_skinning, JointTransform, Quat};
use crate::error::RigError;
use crate::skeleton::{Mesh, RigAsset, SkinWeights, Vec3};

/// Sparse row-stochastic map from source vertices to target vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub target_vertex_count: usize,
}

impl CorrespondenceMap {
    pub fn identity(n: usize) -> Self {
        CorrespondenceMap {
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
            target_vertex_count: n,
        }
    }

    pub fn validate(&self) -> Result<(), RigError> {
        for (i, row) in self.rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(t, w) in row {
                if t >= self.target_vertex_count {
                    return Err(RigError::Range(format!(
                        "row {i}: target index {t} out of range {}",
                        self.target_vertex_count
                    )));
                }
                if w < 0.0 {
                    return Err(RigError::Range(format!("row {i}: negative weight {w}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(RigError::Range(format!("row {i}: weights sum to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<Mesh>,
}

/// Pull target-side skinning back to the source mesh: the row-stochastic
/// product of map and skin, with rows renormalized to absorb rounding.
pub fn transfer_skinning(map: &CorrespondenceMap, skin_t: &SkinWeights) -> Result<SkinWeights, RigError> {
    map.validate()?;
    if map.target_vertex_count != skin_t.rows.len() {
        return Err(RigError::Dimension(format!(
            "map addresses {} target vertices but skin has {} rows",
            map.target_vertex_count,
            skin_t.rows.len()
        )));
    }
    let mut rows = Vec::with_capacity(map.rows.len());
    for map_row in &map.rows {
        let mut dense = vec![0.0; skin_t.joint_count];
        for &(t, mw) in map_row {
            for &(j, sw) in &skin_t.rows[t] {
                dense[j] += mw * sw;
            }
        }
        let total: f64 = dense.iter().sum();
        if total <= 0.0 {
            return Err(RigError::Degenerate("source vertex with zero transferred weight".into()));
        }
        let row: Vec<(usize, f64)> = dense
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (j, w / total))
            .collect();
        rows.push(row);
    }
    Ok(SkinWeights { rows, joint_count: skin_t.joint_count })
}

/// Weighted mean of vertices per joint: J_j = sum_v w_vj v / sum_v w_vj.
pub fn estimate_joints_from_skin(vertices: &[Vec3], skin: &SkinWeights) -> Result<Vec<Vec3>, RigError> {
    if skin.rows.len() != vertices.len() {
        return Err(RigError::Dimension(format!(
            "{} skin rows for {} vertices",
            skin.rows.len(),
            vertices.len()
        )));
    }
    let mut sums = vec![Vec3::ZERO; skin.joint_count];
    let mut totals = vec![0.0; skin.joint_count];
    for (v, row) in vertices.iter().zip(&skin.rows) {
        for &(j, w) in row {
            sums[j] = sums[j].add(v.scale(w));
            totals[j] += w;
        }
    }
    let mut joints = Vec::with_capacity(skin.joint_count);
    for (j, (s, t)) in sums.into_iter().zip(&totals).enumerate() {
        if *t <= 0.0 {
            return Err(RigError::Degenerate(format!("joint {j} has zero total skin weight")));
        }
        joints.push(s.scale(1.0 / t));
    }
    Ok(joints)
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    Vec3::new(
        m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
        m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
        m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
    )
}

fn skew(v: Vec3) -> Mat3 {
    [[0.0, -v.z, v.y], [v.z, 0.0, -v.x], [-v.y, v.x, 0.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rodrigues: R = I + sin(phi)/phi [w]x + (1-cos(phi))/phi^2 [w]x^2.
fn rotation_from_axis_angle(w: Vec3) -> Mat3 {
    let phi = w.norm();
    if phi < 1e-12 {
        return IDENTITY3;
    }
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let a = phi.sin() / phi;
    let b = (1.0 - phi.cos()) / (phi * phi);
    let mut out = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// dR/dw_i, the exact derivative of the rotation matrix with respect to
/// one axis-angle coordinate (Gallego & Yezzi 2015, Eq. 10), with the
/// skew-generator limit at the identity.
fn rotation_derivatives(w: Vec3, r: &Mat3) -> [Mat3; 3] {
    let phi2 = w.dot(w);
    let es = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
    if phi2 < 1e-14 {
        return [skew(es[0]), skew(es[1]), skew(es[2])];
    }
    let wi = [w.x, w.y, w.z];
    let mut out = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        // (I - R) e_i is column i of I - R
        let col = Vec3::new(
            (i == 0) as u8 as f64 - r[0][i],
            (i == 1) as u8 as f64 - r[1][i],
            (i == 2) as u8 as f64 - r[2][i],
        );
        let term = skew(w.cross(col));
        let kw = skew(w);
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = (wi[i] * kw[a][b] + term[a][b]) / phi2;
            }
        }
        out[i] = mat_mul(&m, r);
    }
    out
}

fn axis_angle_from_quat(q: Quat) -> Vec3 {
    let q = if q.w < 0.0 {
        Quat { w: -q.w, x: -q.x, y: -q.y, z: -q.z }
    } else {
        q
    };
    let qv = Vec3::new(q.x, q.y, q.z);
    let s = qv.norm();
    if s < 1e-12 {
        return Vec3::ZERO;
    }
    let angle = 2.0 * s.atan2(q.w);
    qv.scale(angle / s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Rotation-magnitude regularizer weight.
    pub lambda: f64,
    /// Stop when the energy improvement falls below this.
    pub energy_tol: f64,
    /// Final energies above this mark the result as unconverged.
    pub converged_energy: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iters: 500, lambda: 1e-3, energy_tol: 1e-12, converged_energy: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub transforms: Vec<JointTransform>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda: f64,
}

/// Flat per-joint parameters: axis-angle then translation, 6 per joint.
fn params_from_transforms(init: &[JointTransform]) -> Vec<f64> {
    let mut p = Vec::with_capacity(init.len() * 6);
    for t in init {
        let w = axis_angle_from_quat(t.rotation);
        p.extend_from_slice(&[w.x, w.y, w.z, t.translation.x, t.translation.y, t.translation.z]);
    }
    p
}

fn transforms_from_params(p: &[f64]) -> Vec<JointTransform> {
    p.chunks(6)
        .map(|c| {
            let w = Vec3::new(c[0], c[1], c[2]);
            let phi = w.norm();
            let rotation = if phi < 1e-12 {
                Quat::IDENTITY
            } else {
                Quat::from_axis_angle(w.scale(1.0 / phi), phi)
            };
            JointTransform { rotation, translation: Vec3::new(c[3], c[4], c[5]) }
        })
        .collect()
}

struct FitProblem<'a> {
    rest: &'a [Vec3],
    skin: &'a SkinWeights,
    map: &'a CorrespondenceMap,
    source: &'a [Vec3],
    lambda: f64,
}

impl FitProblem<'_> {
    /// E = sum_s || sum_t map_st lbs_t - x_s ||^2 + lambda sum_j |w_j|^2,
    /// with the gradient over axis-angle and translation coordinates.
    fn energy_and_grad(&self, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let k = self.skin.joint_count;
        let mut rots = Vec::with_capacity(k);
        let mut trans = Vec::with_capacity(k);
        for c in params.chunks(6) {
            rots.push(rotation_from_axis_angle(Vec3::new(c[0], c[1], c[2])));
            trans.push(Vec3::new(c[3], c[4], c[5]));
        }
        let lbs: Vec<Vec3> = self
            .rest
            .iter()
            .zip(&self.skin.rows)
            .map(|(&v, row)| {
                let mut out = Vec3::ZERO;
                for &(j, w) in row {
                    out = out.add(mat_vec(&rots[j], v).add(trans[j]).scale(w));
                }
                out
            })
            .collect();
        let mut energy = 0.0;
        // g_t accumulates 2 * map^T residual per target vertex
        let mut g_t = vec![Vec3::ZERO; self.rest.len()];
        for (row, &x) in self.map.rows.iter().zip(self.source) {
            let mut pred = Vec3::ZERO;
            for &(t, mw) in row {
                pred = pred.add(lbs[t].scale(mw));
            }
            let r = pred.sub(x);
            energy += r.dot(r);
            for &(t, mw) in row {
                g_t[t] = g_t[t].add(r.scale(2.0 * mw));
            }
        }
        for c in params.chunks(6) {
            energy += self.lambda * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
        }
        if let Some(grad) = grad {
            grad.fill(0.0);
            let derivs: Vec<[Mat3; 3]> = params
                .chunks(6)
                .enumerate()
                .map(|(j, c)| rotation_derivatives(Vec3::new(c[0], c[1], c[2]), &rots[j]))
                .collect();
            for ((&v, row), &g) in self.rest.iter().zip(&self.skin.rows).zip(&g_t) {
                if g == Vec3::ZERO {
                    continue;
                }
                for &(j, w) in row {
                    let base = 6 * j;
                    for i in 0..3 {
                        grad[base + i] += w * g.dot(mat_vec(&derivs[j][i], v));
                    }
                    grad[base + 3] += w * g.x;
                    grad[base + 4] += w * g.y;
                    grad[base + 5] += w * g.z;
                }
            }
            for (j, c) in params.chunks(6).enumerate() {
                for i in 0..3 {
                    grad[6 * j + i] += 2.0 * self.lambda * c[i];
                }
            }
        }
        energy
    }
}

/// Fit per-joint rigid transforms so the target rig, deformed by linear
/// blend skinning and pushed through the correspondence, matches the
/// source frame. Gradient descent with backtracking line search; the
/// accepted energy sequence is monotone non-increasing.
pub fn fit_joint_transforms(
    target: &RigAsset,
    source_frame: &Mesh,
    map: &CorrespondenceMap,
    init: &[JointTransform],
    config: &FitConfig,
) -> Result<FitResult, RigError> {
    let skin = target
        .skin
        .as_ref()
        .ok_or_else(|| RigError::Degenerate("target rig has no skin weights".into()))?;
    if init.len() != skin.joint_count {
        return Err(RigError::Dimension(format!(
            "{} init transforms for {} joints",
            init.len(),
            skin.joint_count
        )));
    }
    if map.rows.len() != source_frame.vertices.len() {
        return Err(RigError::Dimension(format!(
            "{} map rows for {} source vertices",
            map.rows.len(),
            source_frame.vertices.len()
        )));
    }
    if map.target_vertex_count != target.mesh.vertices.len() {
        return Err(RigError::Dimension(format!(
            "map addresses {} target vertices but mesh has {}",
            map.target_vertex_count,
            target.mesh.vertices.len()
        )));
    }
    map.validate()?;
    let problem = FitProblem {
        rest: &target.mesh.vertices,
        skin,
        map,
        source: &source_frame.vertices,
        lambda: config.lambda,
    };
    let mut params = params_from_transforms(init);
    let mut grad = vec![0.0; params.len()];
    let mut energy = problem.energy_and_grad(&params, Some(&mut grad));
    let mut step = 1.0;
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            let trial_energy = problem.energy_and_grad(&trial, None);
            if trial_energy <= energy - 1e-4 * step * g2 {
                let improvement = energy - trial_energy;
                params = trial;
                energy = problem.energy_and_grad(&params, Some(&mut grad));
                step = (step * 2.0).min(1e6);
                accepted = true;
                iterations += 1;
                if improvement < config.energy_tol {
                    accepted = false;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(FitResult {
        transforms: transforms_from_params(&params),
        energy,
        iterations,
        converged: energy <= config.converged_energy,
        lambda: config.lambda,
    })
}

/// Fit a whole sequence: frame 0 starts from `init` (identity when None),
/// later frames warm-start from the previous solution.
pub fn fit_sequence(
    target: &RigAsset,
    frames: &[Mesh],
    map: &CorrespondenceMap,
    init: Option<&[JointTransform]>,
    config: &FitConfig,
) -> Result<Vec<FitResult>, RigError> {
    if frames.is_empty() {
        return Err(RigError::Degenerate("empty motion sequence".into()));
    }
    let k = target.skeleton.len();
    let mut current: Vec<JointTransform> = match init {
        Some(init) => init.to_vec(),
        None => vec![JointTransform::IDENTITY; k],
    };
    let mut results = Vec::with_capacity(frames.len());
    for frame in frames {
        let fit = fit_joint_transforms(target, frame, map, &current, config)?;
        current = fit.transforms.clone();
        results.push(fit);
    }
    Ok(results)
}

/// Apply each frame's transforms to the target rest mesh.
pub fn retarget(frames: &[Vec<JointTransform>], target: &RigAsset) -> Result<MotionSequence, RigError> {
    let skin = target
        .skin
        .as_ref()
        .ok_or_else(|| RigError::Degenerate("target rig has no skin weights".into()))?;
    let mut out = Vec::with_capacity(frames.len());
    for transforms in frames {
        out.push(linear_blend_skinning(&target.mesh, skin, transforms)?);
    }
    Ok(MotionSequence { frames: out })
}

/// Root-mean-square vertex distance between meshes of equal size.
pub fn vertex_rms(a: &Mesh, b: &Mesh) -> Result<f64, RigError> {
    if a.vertices.len() != b.vertices.len() {
        return Err(RigError::Dimension("vertex count mismatch".into()));
    }
    let sum: f64 = a
        .vertices
        .iter()
        .zip(&b.vertices)
        .map(|(&p, &q)| p.dist(q) * p.dist(q))
        .sum();
    Ok((sum / a.vertices.len() as f64).sqrt())
}
