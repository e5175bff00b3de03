//! Bidirectional codec between a skeleton tree and its discrete token
//! sequence: interleaved parent/joint coordinate triples, quantized to
//! `B` bins, with nearest-neighbor parent resolution on decode.

use crate::error::RigError;
use crate::skeleton::{traversal_order, Skeleton, Vec3, MAX_JOINTS, ROOT_PARENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub bins: u32,
}

impl Vocab {
    pub fn new(bins: u32) -> Self {
        assert!(bins >= 2, "need at least 2 coordinate bins");
        Vocab { bins }
    }

    pub fn bos(&self) -> u32 {
        self.bins
    }

    pub fn eos(&self) -> u32 {
        self.bins + 1
    }

    pub fn pad(&self) -> u32 {
        self.bins + 2
    }

    /// Total vocabulary size including BOS/EOS/PAD.
    pub fn size(&self) -> usize {
        self.bins as usize + 3
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(256)
    }
}

/// A payload of coordinate tokens; BOS/EOS/PAD never appear inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Quantize a coordinate in [-1, 1] to a bin id, rounding half up.
pub fn quantize_coord(x: f64, bins: u32) -> Result<u32, RigError> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(RigError::Range(format!("coordinate {x} outside [-1, 1]")));
    }
    let q = ((x + 1.0) / 2.0 * (bins - 1) as f64 + 0.5).floor();
    Ok((q as u32).min(bins - 1))
}

/// Bin center of id `q`: 2q/(B-1) - 1.
pub fn dequantize_coord(q: u32, bins: u32) -> Result<f64, RigError> {
    if q >= bins {
        return Err(RigError::Range(format!("bin id {q} outside 0..{bins}")));
    }
    Ok(2.0 * q as f64 / (bins - 1) as f64 - 1.0)
}

fn quantize_point(p: Vec3, bins: u32) -> Result<[u32; 3], RigError> {
    Ok([
        quantize_coord(p.x, bins)?,
        quantize_coord(p.y, bins)?,
        quantize_coord(p.z, bins)?,
    ])
}

/// Emit 6k payload tokens: for each joint in traversal order, three parent
/// coordinate tokens then three joint coordinate tokens. The root is
/// self-parented so the first three tokens are the root's own position.
pub fn tokenize_skeleton(skeleton: &Skeleton, vocab: &Vocab) -> Result<TokenSequence, RigError> {
    let order = traversal_order(skeleton)?;
    let mut ids = Vec::with_capacity(6 * skeleton.len());
    for &i in &order {
        let parent = skeleton.parents[i];
        let parent_pos = if parent == ROOT_PARENT {
            skeleton.joints[i]
        } else {
            skeleton.joints[parent as usize]
        };
        ids.extend(quantize_point(parent_pos, vocab.bins)?);
        ids.extend(quantize_point(skeleton.joints[i], vocab.bins)?);
    }
    Ok(TokenSequence { ids })
}

fn dequantize_triple(ids: &[u32], bins: u32) -> Result<Vec3, RigError> {
    Ok(Vec3::new(
        dequantize_coord(ids[0], bins)?,
        dequantize_coord(ids[1], bins)?,
        dequantize_coord(ids[2], bins)?,
    ))
}

/// Rebuild a skeleton from payload tokens. Odd triples are parent
/// positions, even triples joint positions; each joint after the root
/// attaches to the nearest previously-decoded joint, so the output is
/// structurally a tree.
pub fn detokenize(tokens: &TokenSequence, vocab: &Vocab) -> Result<Skeleton, RigError> {
    let n = tokens.ids.len();
    if n == 0 {
        return Err(RigError::Format("empty payload".into()));
    }
    if n % 6 != 0 {
        return Err(RigError::Format(format!("payload length {n} is not a multiple of 6")));
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id >= vocab.bins) {
        return Err(RigError::Format(format!("special token {id} inside payload")));
    }
    let k = n / 6;
    if k > MAX_JOINTS {
        return Err(RigError::Format(format!("{k} joints exceeds the cap of {MAX_JOINTS}")));
    }
    let mut joints: Vec<Vec3> = Vec::with_capacity(k);
    let mut parents: Vec<i32> = Vec::with_capacity(k);
    for i in 0..k {
        let parent_pos = dequantize_triple(&tokens.ids[6 * i..6 * i + 3], vocab.bins)?;
        let joint_pos = dequantize_triple(&tokens.ids[6 * i + 3..6 * i + 6], vocab.bins)?;
        if i == 0 {
            // The first triple is the root's self-parent; discard it.
            joints.push(joint_pos);
            parents.push(ROOT_PARENT);
        } else {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &existing) in joints.iter().enumerate() {
                let d = existing.dist(parent_pos);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            joints.push(joint_pos);
            parents.push(best as i32);
        }
    }
    Ok(Skeleton::new(joints, parents))
}

/// Serialize payload ids as whitespace-separated decimals.
pub fn tokens_to_text(tokens: &TokenSequence) -> String {
    tokens
        .ids
        .iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokens_from_text(text: &str) -> Result<TokenSequence, RigError> {
    let ids = text
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|e| RigError::Format(format!("bad token {t:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenSequence { ids })
}

/// Serialize payload ids as little-endian u16.
pub fn tokens_to_binary(tokens: &TokenSequence) -> Result<Vec<u8>, RigError> {
    let mut out = Vec::with_capacity(tokens.ids.len() * 2);
    for &id in &tokens.ids {
        if id > u16::MAX as u32 {
            return Err(RigError::Format(format!("token id {id} exceeds 16 bits")));
        }
        out.extend_from_slice(&(id as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn tokens_from_binary(bytes: &[u8]) -> Result<TokenSequence, RigError> {
    if bytes.len() % 2 != 0 {
        return Err(RigError::Format("odd byte count in binary token stream".into()));
    }
    let ids = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    Ok(TokenSequence { ids })
}

/// Quantization error bound per axis for a round trip through `bins` bins.
pub fn quantization_step(bins: u32) -> f64 {
    1.0 / (bins - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::validate_skeleton;
    use proptest::prelude::*;

    #[test]
    fn quantize_bounds() {
        assert_eq!(quantize_coord(-1.0, 256).unwrap(), 0);
        assert_eq!(quantize_coord(1.0, 256).unwrap(), 255);
        assert_eq!(quantize_coord(0.5, 256).unwrap(), 191);
        assert!(quantize_coord(1.5, 256).is_err());
    }

    #[test]
    fn dequantize_values() {
        assert_eq!(dequantize_coord(0, 256).unwrap(), -1.0);
        assert_eq!(dequantize_coord(255, 256).unwrap(), 1.0);
        assert!((dequantize_coord(191, 256).unwrap() - (382.0 / 255.0 - 1.0)).abs() < 1e-15);
        assert!(dequantize_coord(256, 256).is_err());
    }

    fn two_joint() -> Skeleton {
        Skeleton::new(
            vec![Vec3::ZERO, Vec3::new(0.5, 0.0, 0.0)],
            vec![ROOT_PARENT, 0],
        )
    }

    #[test]
    fn tokenize_two_joint() {
        let toks = tokenize_skeleton(&two_joint(), &Vocab::default()).unwrap();
        assert_eq!(
            toks.ids,
            vec![128, 128, 128, 128, 128, 128, 128, 128, 128, 191, 128, 128]
        );
        assert_eq!(toks.len(), 12);
    }

    #[test]
    fn first_triple_is_quantized_root() {
        let s = Skeleton::new(
            vec![Vec3::new(0.25, -0.5, 0.75), Vec3::new(0.5, 0.5, 0.5)],
            vec![ROOT_PARENT, 0],
        );
        let v = Vocab::default();
        let toks = tokenize_skeleton(&s, &v).unwrap();
        let root = s.joints[0];
        assert_eq!(toks.ids[0], quantize_coord(root.x, v.bins).unwrap());
        assert_eq!(toks.ids[1], quantize_coord(root.y, v.bins).unwrap());
        assert_eq!(toks.ids[2], quantize_coord(root.z, v.bins).unwrap());
    }

    #[test]
    fn detokenize_two_joint() {
        let v = Vocab::default();
        let toks = tokenize_skeleton(&two_joint(), &v).unwrap();
        let s = detokenize(&toks, &v).unwrap();
        assert_eq!(s.parents, vec![ROOT_PARENT, 0]);
        assert!(s.joints[0].dist(Vec3::new(0.0039, 0.0039, 0.0039)) < 1e-3);
        assert!(s.joints[1].dist(Vec3::new(0.4980, 0.0039, 0.0039)) < 1e-3);
    }

    #[test]
    fn detokenize_rejects_bad_payloads() {
        let v = Vocab::default();
        assert!(detokenize(&TokenSequence { ids: vec![1; 7] }, &v).is_err());
        assert!(detokenize(&TokenSequence { ids: vec![] }, &v).is_err());
        let mut with_special = vec![1u32; 12];
        with_special[4] = v.bos();
        assert!(detokenize(&TokenSequence { ids: with_special }, &v).is_err());
    }

    #[test]
    fn text_and_binary_round_trip() {
        let toks = tokenize_skeleton(&two_joint(), &Vocab::default()).unwrap();
        assert_eq!(tokens_from_text(&tokens_to_text(&toks)).unwrap(), toks);
        assert_eq!(
            tokens_from_binary(&tokens_to_binary(&toks).unwrap()).unwrap(),
            toks
        );
    }

    /// Random valid skeleton with min pairwise joint separation.
    pub fn random_separated_skeleton(seed: u64, k: usize, min_sep: f64) -> Skeleton {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut joints: Vec<Vec3> = Vec::with_capacity(k);
        while joints.len() < k {
            let p = Vec3::new(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            );
            if joints.iter().all(|q| q.dist(p) > min_sep) {
                joints.push(p);
            }
        }
        let mut parents = vec![ROOT_PARENT];
        for i in 1..k {
            parents.push(rng.gen_range(0..i) as i32);
        }
        Skeleton::new(joints, parents)
    }

    #[test]
    fn round_trip_preserves_topology() {
        let v = Vocab::default();
        let min_sep = 3f64.sqrt() * 2.0 / 255.0 * 1.01;
        for seed in 0..20 {
            let s = random_separated_skeleton(seed, 2 + (seed as usize % 30), min_sep);
            let toks = tokenize_skeleton(&s, &v).unwrap();
            assert_eq!(toks.len(), 6 * s.len());
            let back = detokenize(&toks, &v).unwrap();
            // topology comparison in traversal order of the original
            let order = traversal_order(&s).unwrap();
            let mut pos_of = vec![0usize; s.len()];
            for (rank, &i) in order.iter().enumerate() {
                pos_of[i] = rank;
            }
            for (rank, &i) in order.iter().enumerate() {
                let p = s.parents[i];
                let expect = if p == ROOT_PARENT { ROOT_PARENT } else { pos_of[p as usize] as i32 };
                assert_eq!(back.parents[rank], expect, "seed {seed} joint {i}");
                assert!((back.joints[rank].x - s.joints[i].x).abs() <= 1.0 / 255.0 + 1e-12);
                assert!((back.joints[rank].y - s.joints[i].y).abs() <= 1.0 / 255.0 + 1e-12);
                assert!((back.joints[rank].z - s.joints[i].z).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn quantize_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_coord(lo, 256).unwrap() <= quantize_coord(hi, 256).unwrap());
        }

        #[test]
        fn dequantize_quantize_error_bound(x in -1.0f64..=1.0) {
            let q = quantize_coord(x, 256).unwrap();
            let back = dequantize_coord(q, 256).unwrap();
            prop_assert!((back - x).abs() <= 1.0 / 255.0 + 1e-12);
        }

        #[test]
        fn detokenize_always_yields_tree(ids in proptest::collection::vec(0u32..256, 12..=120)) {
            let n = ids.len() - ids.len() % 6;
            if n == 0 { return Ok(()); }
            let toks = TokenSequence { ids: ids[..n].to_vec() };
            let s = detokenize(&toks, &Vocab::default()).unwrap();
            prop_assert!(validate_skeleton(&s).is_empty());
        }
    }
}
