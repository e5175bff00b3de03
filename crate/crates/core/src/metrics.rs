//! RigNet-style skeleton evaluation: chamfer distances between joints,
//! joints-vs-bones, and bone samples, plus matching-based IoU/precision/recall.

use serde::{Deserialize, Serialize};

use crate::error::RigError;
use crate::skeleton::{bone_segments, point_segment_distance, Skeleton, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Match radius in normalized units.
    pub tau: f64,
    /// Arc-length spacing for bone sampling.
    pub bone_spacing: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { tau: 0.1, bone_spacing: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub cd_j2j: f64,
    pub cd_j2b: f64,
    pub cd_b2b: f64,
    pub tau: f64,
}

/// Symmetric chamfer distance: the two directed mean nearest-neighbor
/// distances, averaged. Unsquared Euclidean.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, RigError> {
    if a.is_empty() || b.is_empty() {
        return Err(RigError::Degenerate("empty point set".into()));
    }
    let directed = |from: &[Vec3], to: &[Vec3]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| p.dist(*q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

pub fn cd_j2j(pred: &Skeleton, gt: &Skeleton) -> Result<f64, RigError> {
    chamfer(&pred.joints, &gt.joints)
}

fn min_dist_to_segments(p: Vec3, segments: &[(Vec3, Vec3)]) -> f64 {
    segments
        .iter()
        .map(|&(a, b)| point_segment_distance(p, a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Chamfer between each side's joints and the other side's bone segments.
pub fn cd_j2b(pred: &Skeleton, gt: &Skeleton) -> Result<f64, RigError> {
    let pred_bones = bone_segments(pred)?;
    let gt_bones = bone_segments(gt)?;
    if pred_bones.is_empty() || gt_bones.is_empty() {
        return Err(RigError::Degenerate("no bones".into()));
    }
    let dir = |joints: &[Vec3], bones: &[(Vec3, Vec3)]| -> f64 {
        joints.iter().map(|&j| min_dist_to_segments(j, bones)).sum::<f64>() / joints.len() as f64
    };
    Ok(0.5 * (dir(&pred.joints, &gt_bones) + dir(&gt.joints, &pred_bones)))
}

/// Dense arc-length samples over all bones; both endpoints included,
/// at least 2 samples per bone. Direction-invariant by symmetry.
pub fn sample_bones(skeleton: &Skeleton, spacing: f64) -> Result<Vec<Vec3>, RigError> {
    let bones = bone_segments(skeleton)?;
    if bones.is_empty() {
        return Err(RigError::Degenerate("no bones".into()));
    }
    let mut samples = Vec::new();
    for (a, b) in bones {
        let len = a.dist(b);
        let steps = ((len / spacing).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            samples.push(a.add(b.sub(a).scale(t)));
        }
    }
    Ok(samples)
}

pub fn cd_b2b(pred: &Skeleton, gt: &Skeleton, cfg: &MatchConfig) -> Result<f64, RigError> {
    let a = sample_bones(pred, cfg.bone_spacing)?;
    let b = sample_bones(gt, cfg.bone_spacing)?;
    chamfer(&a, &b)
}

/// Max-cardinality min-cost bipartite matching on a square padded cost
/// matrix (Hungarian / Jonker-Volgenant potentials). Entries >= `forbidden`
/// count as unmatched. Returns for each row its assigned column.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed potentials, standard O(n^3) formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

// Forbidden-pair cost: large enough that minimizing total cost first
// maximizes the number of real (<= tau) matches.
const FORBIDDEN: f64 = 1e9;

/// Optimal matching of pred joints to gt joints under radius `tau`.
/// Returns (iou, precision, recall).
pub fn joint_match_scores(pred: &Skeleton, gt: &Skeleton, cfg: &MatchConfig) -> (f64, f64, f64) {
    let np = pred.joints.len();
    let ng = gt.joints.len();
    let n = np.max(ng);
    let mut cost = vec![vec![FORBIDDEN; n]; n];
    for (i, &pj) in pred.joints.iter().enumerate() {
        for (j, &gj) in gt.joints.iter().enumerate() {
            let d = pj.dist(gj);
            if d <= cfg.tau {
                cost[i][j] = d;
            }
        }
    }
    let assignment = hungarian(&cost);
    let matched = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < np && j < ng && cost[i][j] < FORBIDDEN)
        .count();
    let precision = matched as f64 / np as f64;
    let recall = matched as f64 / ng as f64;
    let iou = matched as f64 / (np + ng - matched) as f64;
    (iou, precision, recall)
}

/// Full metric suite for one prediction / ground-truth pair.
pub fn evaluate(pred: &Skeleton, gt: &Skeleton, cfg: &MatchConfig) -> Result<MetricsReport, RigError> {
    let (iou, precision, recall) = joint_match_scores(pred, gt, cfg);
    Ok(MetricsReport {
        iou,
        precision,
        recall,
        cd_j2j: cd_j2j(pred, gt)?,
        cd_j2b: cd_j2b(pred, gt)?,
        cd_b2b: cd_b2b(pred, gt, cfg)?,
        tau: cfg.tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::ROOT_PARENT;

    fn chain(points: &[Vec3]) -> Skeleton {
        let mut parents = vec![ROOT_PARENT];
        for i in 1..points.len() {
            parents.push(i as i32 - 1);
        }
        Skeleton::new(points.to_vec(), parents)
    }

    #[test]
    fn chamfer_basics() {
        let a = vec![Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let single_a = vec![Vec3::ZERO];
        let single_b = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert!((chamfer(&single_a, &single_b).unwrap() - 1.0).abs() < 1e-15);
        // (1+1)/2 one way, 1 the other, average 1
        let b = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert!((chamfer(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(chamfer(&[], &b).is_err());
    }

    #[test]
    fn cd_j2b_identity_and_perp() {
        let s = chain(&[Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(cd_j2b(&s, &s).unwrap(), 0.0);

        // symmetric: both sides a single bone on the x axis; pred shifted up by 1
        let gt = chain(&[Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]);
        let pred = chain(&[Vec3::new(-1.0, 1.0, 0.0), Vec3::new(1.0, 1.0, 0.0)]);
        assert!((cd_j2b(&pred, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cd_b2b_parallel_offset() {
        let cfg = MatchConfig::default();
        let gt = chain(&[Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(cd_b2b(&gt, &gt, &cfg).unwrap(), 0.0);

        let pred = chain(&[Vec3::new(0.0, 0.5, 0.0), Vec3::new(1.0, 0.5, 0.0)]);
        let d = cd_b2b(&pred, &gt, &cfg).unwrap();
        assert!((d - 0.5).abs() < cfg.bone_spacing, "got {d}");
    }

    #[test]
    fn cd_b2b_direction_invariant() {
        let cfg = MatchConfig::default();
        let fwd = chain(&[Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)]);
        let rev = chain(&[Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO]);
        assert!(cd_b2b(&fwd, &rev, &cfg).unwrap() < 1e-12);
    }

    #[test]
    fn match_scores_identity() {
        let s = chain(&[Vec3::ZERO, Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.6, 0.0, 0.0)]);
        let (iou, p, r) = joint_match_scores(&s, &s, &MatchConfig::default());
        assert_eq!((iou, p, r), (1.0, 1.0, 1.0));
    }

    #[test]
    fn match_scores_extra_pred_joint() {
        let gt = chain(&[Vec3::ZERO, Vec3::new(0.9, 0.0, 0.0)]);
        let pred = chain(&[Vec3::ZERO, Vec3::new(0.5, 0.0, 0.0)]);
        // only the coincident joint matches at tau=0.1
        let gt1 = Skeleton::new(vec![Vec3::ZERO], vec![ROOT_PARENT]);
        let (iou, p, r) = joint_match_scores(&pred, &gt1, &MatchConfig::default());
        assert_eq!((iou, p, r), (0.5, 0.5, 1.0));
        let _ = gt;
    }

    #[test]
    fn match_scores_one_pair_beyond_tau() {
        let pred = chain(&[Vec3::ZERO, Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.6, 0.0, 0.0)]);
        let gt = chain(&[
            Vec3::new(0.01, 0.0, 0.0),
            Vec3::new(0.31, 0.0, 0.0),
            Vec3::new(0.9, 0.0, 0.0),
        ]);
        let (iou, _, _) = joint_match_scores(&pred, &gt, &MatchConfig::default());
        assert!((iou - 0.5).abs() < 1e-12); // matched 2 of (3+3-2)=4
    }

    #[test]
    fn swap_swaps_precision_recall() {
        let pred = chain(&[Vec3::ZERO, Vec3::new(0.05, 0.0, 0.0), Vec3::new(0.6, 0.0, 0.0)]);
        let gt = chain(&[Vec3::ZERO, Vec3::new(0.6, 0.0, 0.0)]);
        let cfg = MatchConfig::default();
        let (iou_a, p_a, r_a) = joint_match_scores(&pred, &gt, &cfg);
        let (iou_b, p_b, r_b) = joint_match_scores(&gt, &pred, &cfg);
        assert_eq!(iou_a, iou_b);
        assert_eq!(p_a, r_b);
        assert_eq!(r_a, p_b);
        assert!(iou_a <= p_a.min(r_a));
    }
}
