//! Connectivity baseline: build a rooted tree over unordered joints with
//! Prim's minimum spanning tree on the complete Euclidean graph.

use crate::error::RigError;
use crate::skeleton::{Skeleton, Vec3, ROOT_PARENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootRule {
    /// Joint nearest the centroid of all joints, ties to lowest index.
    #[default]
    NearestCentroid,
    /// A fixed joint index.
    Fixed(usize),
}

/// Prim's algorithm over all joint pairs; parents oriented away from the
/// chosen root. Deterministic: edge ties resolve to the lowest index.
pub fn mst_connectivity(joints: &[Vec3], root_rule: RootRule) -> Result<Skeleton, RigError> {
    let k = joints.len();
    if k < 2 {
        return Err(RigError::Degenerate(format!("need at least 2 joints, got {k}")));
    }
    for i in 0..k {
        for j in i + 1..k {
            if joints[i].dist(joints[j]) == 0.0 {
                return Err(RigError::Degenerate(format!("degenerate joint set: {i} and {j} coincide")));
            }
        }
    }
    let root = match root_rule {
        RootRule::Fixed(r) => {
            if r >= k {
                return Err(RigError::Range(format!("root index {r} out of range")));
            }
            r
        }
        RootRule::NearestCentroid => {
            let centroid = joints
                .iter()
                .fold(Vec3::ZERO, |acc, &p| acc.add(p))
                .scale(1.0 / k as f64);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &p) in joints.iter().enumerate() {
                let d = p.dist(centroid);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        }
    };

    // Dense Prim: best[i] = cheapest connection of i into the tree.
    let mut in_tree = vec![false; k];
    let mut best_cost = vec![f64::INFINITY; k];
    let mut best_from = vec![root; k];
    let mut parents = vec![ROOT_PARENT; k];
    in_tree[root] = true;
    for i in 0..k {
        if i != root {
            best_cost[i] = joints[root].dist(joints[i]);
        }
    }
    for _ in 1..k {
        let mut next = usize::MAX;
        let mut next_cost = f64::INFINITY;
        for i in 0..k {
            if !in_tree[i] && best_cost[i] < next_cost {
                next_cost = best_cost[i];
                next = i;
            }
        }
        in_tree[next] = true;
        parents[next] = best_from[next] as i32;
        for i in 0..k {
            if !in_tree[i] {
                let d = joints[next].dist(joints[i]);
                if d < best_cost[i] {
                    best_cost[i] = d;
                    best_from[i] = next;
                }
            }
        }
    }
    Ok(Skeleton::new(joints.to_vec(), parents))
}

/// Total Euclidean edge weight of a skeleton's bones.
pub fn tree_weight(skeleton: &Skeleton) -> f64 {
    skeleton
        .parents
        .iter()
        .enumerate()
        .filter(|(_, &p)| p != ROOT_PARENT)
        .map(|(i, &p)| skeleton.joints[i].dist(skeleton.joints[p as usize]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::validate_skeleton;

    #[test]
    fn collinear_chain() {
        let joints = vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let s = mst_connectivity(&joints, RootRule::default()).unwrap();
        assert!(validate_skeleton(&s).is_empty());
        // centroid is (1,0,0) -> root 1, chain 0-1-2
        assert_eq!(s.parents, vec![1, ROOT_PARENT, 1]);
    }

    #[test]
    fn recovers_short_bone_tree() {
        // ground-truth star whose bones are all shorter than any non-bone pair
        let joints = vec![
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-0.3, 0.95, 0.0),
            Vec3::new(-0.3, -0.95, 0.0),
        ];
        let s = mst_connectivity(&joints, RootRule::Fixed(0)).unwrap();
        assert_eq!(s.parents, vec![ROOT_PARENT, 0, 0, 0]);
    }

    #[test]
    fn square_total_weight() {
        let joints = vec![
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let s = mst_connectivity(&joints, RootRule::default()).unwrap();
        assert!((tree_weight(&s) - 3.0).abs() < 1e-12);
        // deterministic tie-break: rerun yields the identical tree
        let s2 = mst_connectivity(&joints, RootRule::default()).unwrap();
        assert_eq!(s.parents, s2.parents);
    }

    #[test]
    fn rejects_duplicates_and_singletons() {
        assert!(mst_connectivity(&[Vec3::ZERO, Vec3::ZERO], RootRule::default()).is_err());
        assert!(mst_connectivity(&[Vec3::ZERO], RootRule::default()).is_err());
    }

    /// Brute-force minimum over all spanning trees via parent-vector enumeration.
    fn brute_force_min_weight(joints: &[Vec3]) -> f64 {
        let k = joints.len();
        // enumerate parent choices for nodes 1..k (node 0 is root), filter cycles
        let mut best = f64::INFINITY;
        let mut parent = vec![0usize; k];
        fn rec(joints: &[Vec3], parent: &mut Vec<usize>, node: usize, best: &mut f64) {
            let k = joints.len();
            if node == k {
                // check acyclic (every node reaches 0)
                for start in 1..k {
                    let mut cur = start;
                    let mut steps = 0;
                    while cur != 0 {
                        cur = parent[cur];
                        steps += 1;
                        if steps > k {
                            return;
                        }
                    }
                }
                let w: f64 = (1..k).map(|i| joints[i].dist(joints[parent[i]])).sum();
                if w < *best {
                    *best = w;
                }
                return;
            }
            for p in 0..k {
                if p != node {
                    parent[node] = p;
                    rec(joints, parent, node + 1, best);
                }
            }
        }
        rec(joints, &mut parent, 1, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_up_to_7() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..15 {
            let k = 3 + trial % 5; // up to 7
            let joints: Vec<Vec3> = (0..k)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let s = mst_connectivity(&joints, RootRule::Fixed(0)).unwrap();
            let oracle = brute_force_min_weight(&joints);
            assert!((tree_weight(&s) - oracle).abs() < 1e-9, "trial {trial}");
        }
    }
}
