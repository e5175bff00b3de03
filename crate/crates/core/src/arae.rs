//! Toy-scale autoregressive auto-encoder: a cross-attention joints
//! encoder compressing padded joints into an m x d latent, and a causal
//! decoder trained with next-token prediction over skeleton tokens.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::deform::augment_pose;
use crate::error::RigError;
use crate::nn::{
    self, causal_mask, freq_embed, key_padding_mask, linear, multi_head_attention, self_attn_block, Adam,
    AdamConfig, Params,
};
use crate::skeleton::{RigAsset, Vec3, MAX_JOINTS};
use crate::tokenizer::{tokenize_skeleton, TokenSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArAEConfig {
    /// Learnable query count m.
    pub latent_tokens: usize,
    /// Model width d.
    pub width: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub freq_bands: usize,
    pub vocab_bins: u32,
    pub max_joints: usize,
}

impl Default for ArAEConfig {
    fn default() -> Self {
        ArAEConfig {
            latent_tokens: 16,
            width: 64,
            decoder_layers: 4,
            heads: 4,
            freq_bands: 8,
            vocab_bins: 256,
            max_joints: MAX_JOINTS,
        }
    }
}

impl ArAEConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_bins)
    }

    /// Longest decoder input: latent rows + BOS + payload.
    pub fn max_sequence(&self) -> usize {
        6 * self.max_joints + 2
    }

    pub fn validate(&self) -> Result<(), RigError> {
        if self.width % self.heads != 0 {
            return Err(RigError::Dimension(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.latent_tokens == 0 {
            return Err(RigError::Dimension("latent_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// m x d latent produced by the joints encoder.
pub type LatentEmbedding = Array2<f64>;

pub fn init_arae_params(config: &ArAEConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let d = config.width;
    let feat_width = 3 * (1 + 2 * config.freq_bands);
    params.insert("enc.query".into(), nn::init_matrix(&mut rng, config.latent_tokens, d, 0.02));
    nn::init_linear(&mut params, &mut rng, "enc.in", feat_width, d);
    nn::init_attention(&mut params, &mut rng, "enc.attn", d, d, d);
    nn::init_ffn(&mut params, &mut rng, "enc.ffn", d, 4 * d);

    let vocab = config.vocab();
    params.insert("dec.tok_emb".into(), nn::init_matrix(&mut rng, vocab.size(), d, 0.02));
    params.insert(
        "dec.pos_emb".into(),
        nn::init_matrix(&mut rng, config.latent_tokens + config.max_sequence(), d, 0.02),
    );
    nn::init_linear(&mut params, &mut rng, "dec.lat_in", d, d);
    for layer in 0..config.decoder_layers {
        nn::init_self_attn_block(&mut params, &mut rng, &format!("dec.block{layer}"), d);
    }
    nn::init_linear(&mut params, &mut rng, "dec.head", d, vocab.size());
    params
}

/// Encoder forward on an existing tape; returns the latent Var.
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    params: &Params,
    config: &ArAEConfig,
    joints: &[Vec3],
    valid: &[bool],
) -> Var {
    let feats = freq_embed(joints, config.freq_bands);
    let feats = tape.constant(feats);
    let feats = linear(tape, params, "enc.in", feats);
    let queries = tape.param("enc.query", params["enc.query"].clone());
    let mask = key_padding_mask(config.latent_tokens, valid);
    let q_norm = tape.layer_norm_rows(queries);
    let kv_norm = tape.layer_norm_rows(feats);
    let attn = multi_head_attention(tape, params, "enc.attn", q_norm, kv_norm, config.heads, Some(&mask));
    let x = tape.add(queries, attn);
    let normed = tape.layer_norm_rows(x);
    let f = nn::ffn(tape, params, "enc.ffn", normed);
    let x = tape.add(x, f);
    // final norm keeps latent rows at unit scale, which the latent
    // diffusion model depends on
    tape.layer_norm_rows(x)
}

/// Cross-attend m learnable queries over frequency-embedded joints.
/// Padded positions receive zero attention, so the output is invariant
/// to the padding amount.
pub fn encode_joints(
    params: &Params,
    config: &ArAEConfig,
    joints: &[Vec3],
    valid: &[bool],
) -> Result<LatentEmbedding, RigError> {
    config.validate()?;
    if joints.len() != valid.len() {
        return Err(RigError::Dimension("joints/mask length mismatch".into()));
    }
    let real = valid.iter().filter(|&&v| v).count();
    if real > config.max_joints {
        return Err(RigError::Range(format!("{real} joints exceeds cap {}", config.max_joints)));
    }
    if real == 0 {
        return Err(RigError::Degenerate("no real joints".into()));
    }
    let mut tape = Tape::new();
    let latent = encode_on_tape(&mut tape, params, config, joints, valid);
    Ok(tape.value(latent).clone())
}

/// Decoder forward on an existing tape. Input rows are
/// [projected latent (m), BOS, prefix tokens]; returns logits at every
/// token position (one row per prefix token plus one for BOS).
pub(crate) fn decode_on_tape(
    tape: &mut Tape,
    params: &Params,
    config: &ArAEConfig,
    latent: Var,
    prefix: &[u32],
) -> Var {
    let m = config.latent_tokens;
    let vocab = config.vocab();
    let lat = linear(tape, params, "dec.lat_in", latent);
    let tok_emb = tape.param("dec.tok_emb", params["dec.tok_emb"].clone());
    let mut token_ids = vec![vocab.bos() as usize];
    token_ids.extend(prefix.iter().map(|&t| t as usize));
    let toks = tape.gather_rows(tok_emb, &token_ids);
    let x = tape.concat_rows(&[lat, toks]);
    let rows = m + token_ids.len();
    let pos_emb = tape.param("dec.pos_emb", params["dec.pos_emb"].clone());
    let pos = tape.gather_rows(pos_emb, &(0..rows).collect::<Vec<_>>());
    let mut x = tape.add(x, pos);
    let mask = causal_mask(rows);
    for layer in 0..config.decoder_layers {
        x = self_attn_block(tape, params, &format!("dec.block{layer}"), x, config.heads, Some(&mask));
    }
    let x = tape.layer_norm_rows(x);
    let logits = linear(tape, params, "dec.head", x);
    tape.slice_rows(logits, m, rows)
}

/// Next-token logits for each position after BOS given a prefix.
pub fn decode_logits(
    params: &Params,
    config: &ArAEConfig,
    latent: &LatentEmbedding,
    prefix: &[u32],
) -> Result<Array2<f64>, RigError> {
    config.validate()?;
    if prefix.len() + 1 > config.max_sequence() {
        return Err(RigError::Range(format!("prefix of {} tokens over limit", prefix.len())));
    }
    let mut tape = Tape::new();
    let latent = tape.constant(latent.clone());
    let logits = decode_on_tape(&mut tape, params, config, latent, prefix);
    Ok(tape.value(logits).clone())
}

fn padded_joints(joints: &[Vec3], pad_to: usize) -> (Vec<Vec3>, Vec<bool>) {
    let mut pts = joints.to_vec();
    let mut valid = vec![true; joints.len()];
    while pts.len() < pad_to {
        pts.push(Vec3::ZERO);
        valid.push(false);
    }
    (pts, valid)
}

/// End-to-end loss on one skeleton: encode joints, teacher-force the
/// decoder on [BOS, payload], and take mean next-token cross-entropy over
/// payload + EOS. `gt_tokens` must be tokenize(skeleton) + EOS.
pub fn arae_loss_on_tape(
    tape: &mut Tape,
    params: &Params,
    config: &ArAEConfig,
    joints: &[Vec3],
    gt_tokens: &TokenSequence,
) -> Result<Var, RigError> {
    let vocab = config.vocab();
    let ids = &gt_tokens.ids;
    if ids.last() != Some(&vocab.eos()) {
        return Err(RigError::Format("gt tokens must end with EOS".into()));
    }
    let payload = &ids[..ids.len() - 1];
    if payload.len() != 6 * joints.len() {
        return Err(RigError::Dimension(format!(
            "{} payload tokens inconsistent with {} joints",
            payload.len(),
            joints.len()
        )));
    }
    let (pts, valid) = padded_joints(joints, joints.len());
    let latent = encode_on_tape(tape, params, config, &pts, &valid);
    let logits = decode_on_tape(tape, params, config, latent, payload);
    // position of BOS predicts payload[0]; last payload position predicts EOS
    let targets: Vec<usize> = ids
        .iter()
        .map(|&t| if t == vocab.pad() { usize::MAX } else { t as usize })
        .collect();
    Ok(tape.cross_entropy_rows(logits, &targets))
}

pub fn arae_loss(
    params: &Params,
    config: &ArAEConfig,
    joints: &[Vec3],
    gt_tokens: &TokenSequence,
) -> Result<f64, RigError> {
    let mut tape = Tape::new();
    let loss = arae_loss_on_tape(&mut tape, params, config, joints, gt_tokens)?;
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Online pose-augmentation magnitude in degrees; None disables it.
    pub aug_max_angle: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 500, adam: AdamConfig::default(), seed: 0, aug_max_angle: Some(30.0) }
    }
}

/// Deterministic single-threaded training loop. Returns the per-step loss
/// curve. Assets without skin weights skip augmentation.
pub fn train_arae(
    params: &mut Params,
    config: &ArAEConfig,
    dataset: &[RigAsset],
    train: &TrainConfig,
) -> Result<Vec<f64>, RigError> {
    if dataset.is_empty() {
        return Err(RigError::Degenerate("empty dataset".into()));
    }
    config.validate()?;
    let vocab = config.vocab();
    let mut opt = Adam::new(train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut curve = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let asset = &dataset[step % dataset.len()];
        let working;
        let asset = match train.aug_max_angle {
            Some(angle) if angle > 0.0 && asset.skin.is_some() => {
                working = augment_pose(asset, rng.gen(), angle)?;
                &working
            }
            _ => asset,
        };
        let mut tokens = tokenize_skeleton(&asset.skeleton, &vocab)?;
        tokens.ids.push(vocab.eos());
        let mut tape = Tape::new();
        let loss = arae_loss_on_tape(&mut tape, params, config, &asset.skeleton.joints, &tokens)?;
        curve.push(tape.scalar(loss));
        let grads = tape.backward(loss);
        opt.apply(params, &grads);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy)]
pub enum Strategy {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Autoregressive generation from a latent: greedy argmax by default,
/// stops at EOS or max_len, payload truncated to a multiple of 6.
pub fn generate_tokens(
    params: &Params,
    config: &ArAEConfig,
    latent: &LatentEmbedding,
    strategy: Strategy,
    max_len: usize,
) -> Result<TokenSequence, RigError> {
    let vocab = config.vocab();
    let mut ids: Vec<u32> = Vec::new();
    let mut rng = match strategy {
        Strategy::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Strategy::Greedy => None,
    };
    while ids.len() < max_len && ids.len() + 1 < config.max_sequence() {
        let logits = decode_logits(params, config, latent, &ids)?;
        let last = logits.row(logits.nrows() - 1);
        let next = match strategy {
            Strategy::Temperature { temperature, .. } if temperature > 0.0 => {
                let rng = rng.as_mut().unwrap();
                let max = last.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let weights: Vec<f64> = last.iter().map(|&v| ((v - max) / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut chosen = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        chosen = i;
                        break;
                    }
                    pick -= w;
                }
                chosen as u32
            }
            _ => {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (i, &v) in last.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best as u32
            }
        };
        if next == vocab.eos() {
            break;
        }
        ids.push(next);
    }
    ids.truncate(ids.len() - ids.len() % 6);
    Ok(TokenSequence { ids })
}

/// Max relative error between analytic gradients and central finite
/// differences over a random subset of parameter coordinates.
pub fn grad_check(
    params: &Params,
    config: &ArAEConfig,
    joints: &[Vec3],
    gt_tokens: &TokenSequence,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<f64, RigError> {
    let mut tape = Tape::new();
    let loss = arae_loss_on_tape(&mut tape, params, config, joints, gt_tokens)?;
    let grads = tape.backward(loss);
    let loss_at = |p: &Params| -> f64 { arae_loss(p, config, joints, gt_tokens).unwrap() };
    Ok(finite_diff_check(params, &grads, loss_at, epsilon, coords, seed))
}

/// Shared finite-difference comparison used by every gradient check.
pub fn finite_diff_check<F: Fn(&Params) -> f64>(
    params: &Params,
    grads: &std::collections::BTreeMap<String, Array2<f64>>,
    loss_at: F,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&String> = grads.keys().collect();
    let mut max_rel = 0.0f64;
    for _ in 0..coords {
        let name = names[rng.gen_range(0..names.len())];
        let g = &grads[name.as_str()];
        let r = rng.gen_range(0..g.nrows());
        let c = rng.gen_range(0..g.ncols());
        let mut perturbed = params.clone();
        perturbed.get_mut(name.as_str()).unwrap()[[r, c]] += epsilon;
        let fp = loss_at(&perturbed);
        perturbed.get_mut(name.as_str()).unwrap()[[r, c]] -= 2.0 * epsilon;
        let fm = loss_at(&perturbed);
        let fd = (fp - fm) / (2.0 * epsilon);
        let an = g[[r, c]];
        let denom = an.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(((an - fd) / denom).abs());
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{Skeleton, ROOT_PARENT};

    fn toy_config() -> ArAEConfig {
        ArAEConfig {
            latent_tokens: 4,
            width: 16,
            decoder_layers: 2,
            heads: 2,
            freq_bands: 4,
            vocab_bins: 256,
            max_joints: 16,
        }
    }

    fn toy_skeleton() -> Skeleton {
        Skeleton::new(
            vec![Vec3::ZERO, Vec3::new(0.5, 0.1, -0.2), Vec3::new(-0.4, 0.3, 0.6)],
            vec![ROOT_PARENT, 0, 0],
        )
    }

    fn gt_tokens(config: &ArAEConfig, s: &Skeleton) -> TokenSequence {
        let vocab = config.vocab();
        let mut t = tokenize_skeleton(s, &vocab).unwrap();
        t.ids.push(vocab.eos());
        t
    }

    #[test]
    fn encoder_invariant_to_padding() {
        let config = toy_config();
        let params = init_arae_params(&config, 1);
        let s = toy_skeleton();
        let (p1, v1) = padded_joints(&s.joints, 5);
        let (p2, v2) = padded_joints(&s.joints, 12);
        let l0 = encode_joints(&params, &config, &s.joints, &vec![true; 3]).unwrap();
        let l1 = encode_joints(&params, &config, &p1, &v1).unwrap();
        let l2 = encode_joints(&params, &config, &p2, &v2).unwrap();
        let diff1 = (&l0 - &l1).mapv(f64::abs).sum();
        let diff2 = (&l0 - &l2).mapv(f64::abs).sum();
        assert!(diff1 < 1e-6 && diff2 < 1e-6, "diffs {diff1} {diff2}");
        assert_eq!(l0.dim(), (config.latent_tokens, config.width));
        assert!(l0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoder_causality() {
        let config = toy_config();
        let params = init_arae_params(&config, 2);
        let latent = encode_joints(&params, &config, &toy_skeleton().joints, &[true; 3]).unwrap();
        let prefix: Vec<u32> = vec![10, 20, 30, 40, 50];
        let base = decode_logits(&params, &config, &latent, &prefix).unwrap();
        let mut mutated = prefix.clone();
        mutated[3] = 200;
        let changed = decode_logits(&params, &config, &latent, &mutated).unwrap();
        // positions before the mutation (logit rows 0..=3) are bit-identical
        for row in 0..4 {
            for col in 0..base.ncols() {
                assert_eq!(base[[row, col]], changed[[row, col]], "row {row}");
            }
        }
        // the mutated position influences later logits
        assert!(base.row(4) != changed.row(4));
    }

    #[test]
    fn decoder_empty_prefix_one_row() {
        let config = toy_config();
        let params = init_arae_params(&config, 3);
        let latent = encode_joints(&params, &config, &toy_skeleton().joints, &[true; 3]).unwrap();
        let logits = decode_logits(&params, &config, &latent, &[]).unwrap();
        assert_eq!(logits.nrows(), 1);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_uniform_head_is_ln_v() {
        let config = toy_config();
        let mut params = init_arae_params(&config, 4);
        // force the output head to produce uniform logits
        params.insert("dec.head.w".into(), Array2::zeros(params["dec.head.w"].dim()));
        params.insert("dec.head.b".into(), Array2::zeros(params["dec.head.b"].dim()));
        let s = toy_skeleton();
        let loss = arae_loss(&params, &config, &s.joints, &gt_tokens(&config, &s)).unwrap();
        let v = config.vocab().size() as f64;
        assert!((loss - v.ln()).abs() < 1e-12, "loss {loss} vs ln V {}", v.ln());
        assert!(loss >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = ArAEConfig {
            latent_tokens: 2,
            width: 8,
            decoder_layers: 1,
            heads: 2,
            freq_bands: 2,
            vocab_bins: 16,
            max_joints: 8,
        };
        let params = init_arae_params(&config, 5);
        let s = Skeleton::new(
            vec![Vec3::ZERO, Vec3::new(0.5, 0.0, 0.0)],
            vec![ROOT_PARENT, 0],
        );
        let err = grad_check(&params, &config, &s.joints, &gt_tokens(&config, &s), 1e-5, 100, 6).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn train_zero_lr_keeps_params() {
        let config = toy_config();
        let mut params = init_arae_params(&config, 7);
        let before = params.clone();
        let asset = RigAsset {
            mesh: crate::Mesh {
                vertices: vec![
                    Vec3::new(-1.0, -1.0, -1.0),
                    Vec3::new(1.0, -1.0, -1.0),
                    Vec3::new(0.0, 1.0, 1.0),
                ],
                faces: vec![[0, 1, 2]],
            },
            skeleton: toy_skeleton(),
            skin: None,
            category: "other".into(),
        };
        let train = TrainConfig {
            steps: 3,
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            seed: 1,
            aug_max_angle: None,
        };
        train_arae(&mut params, &config, &[asset], &train).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn train_deterministic_and_memorizes() {
        let config = toy_config();
        let asset = RigAsset {
            mesh: crate::Mesh {
                vertices: vec![
                    Vec3::new(-1.0, -1.0, -1.0),
                    Vec3::new(1.0, -1.0, -1.0),
                    Vec3::new(0.0, 1.0, 1.0),
                ],
                faces: vec![[0, 1, 2]],
            },
            skeleton: toy_skeleton(),
            skin: None,
            category: "other".into(),
        };
        let train = TrainConfig {
            steps: 400,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            seed: 2,
            aug_max_angle: None,
        };
        let mut p1 = init_arae_params(&config, 8);
        let c1 = train_arae(&mut p1, &config, &[asset.clone()], &train).unwrap();
        let mut p2 = init_arae_params(&config, 8);
        let c2 = train_arae(&mut p2, &config, &[asset.clone()], &train).unwrap();
        assert_eq!(c1, c2);
        assert!(c1.last().unwrap() < &0.05, "final loss {}", c1.last().unwrap());

        // the overfit model regenerates the exact token sequence greedily
        let latent = encode_joints(&p1, &config, &asset.skeleton.joints, &[true; 3]).unwrap();
        let out = generate_tokens(&p1, &config, &latent, Strategy::Greedy, 64).unwrap();
        let expect = tokenize_skeleton(&asset.skeleton, &config.vocab()).unwrap();
        assert_eq!(out, expect);
    }
}
