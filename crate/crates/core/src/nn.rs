//! Shared neural-network machinery: named parameter maps, initialization,
//! Adam, frequency embeddings, and pre-norm attention blocks on the tape.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::skeleton::Vec3;

/// Named map of parameter matrices. BTreeMap keeps iteration (and thus
/// training) order deterministic.
pub type Params = BTreeMap<String, Array2<f64>>;

/// Box-Muller standard normal; avoids an extra distribution dependency.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| randn(rng) * std)
}

/// Adds `name.w` (in x out, Xavier-scaled) and `name.b` (1 x out, zero).
pub fn init_linear(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    params.insert(format!("{name}.w"), init_matrix(rng, fan_in, fan_out, std));
    params.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

pub fn linear(tape: &mut Tape, params: &Params, name: &str, x: Var) -> Var {
    let w = tape.param(&format!("{name}.w"), params[&format!("{name}.w")].clone());
    let b = tape.param(&format!("{name}.b"), params[&format!("{name}.b")].clone());
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

/// Per coordinate c: [c, sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^(L-1) pi c), cos(2^(L-1) pi c)].
/// Output width 3 * (1 + 2 * bands).
pub fn freq_embed(points: &[Vec3], bands: usize) -> Array2<f64> {
    let width = 3 * (1 + 2 * bands);
    let mut out = Array2::zeros((points.len(), width));
    for (i, p) in points.iter().enumerate() {
        let mut col = 0;
        for c in [p.x, p.y, p.z] {
            out[[i, col]] = c;
            col += 1;
            for l in 0..bands {
                let f = (1u64 << l) as f64 * std::f64::consts::PI * c;
                out[[i, col]] = f.sin();
                out[[i, col + 1]] = f.cos();
                col += 2;
            }
        }
    }
    out
}

/// Sinusoidal timestep embedding as a 1 x dim row.
pub fn timestep_embed(t: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((1, dim));
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[[0, i]] = (t as f64 * freq).sin();
        out[[0, half + i]] = (t as f64 * freq).cos();
    }
    out
}

/// Multi-head attention: queries from `q`, keys/values from `kv`, with an
/// optional additive score mask (rows = query positions, cols = keys).
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &Params,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&Array2<f64>>,
) -> Var {
    let q = linear(tape, params, &format!("{name}.q"), q_in);
    let k = linear(tape, params, &format!("{name}.k"), kv_in);
    let v = linear(tape, params, &format!("{name}.v"), kv_in);
    let d = tape.value(q).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.add_const(scores, m),
            None => scores,
        };
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&outs);
    linear(tape, params, &format!("{name}.o"), merged)
}

pub fn init_attention(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, d_q: usize, d_kv: usize, d: usize) {
    init_linear(params, rng, &format!("{name}.q"), d_q, d);
    init_linear(params, rng, &format!("{name}.k"), d_kv, d);
    init_linear(params, rng, &format!("{name}.v"), d_kv, d);
    init_linear(params, rng, &format!("{name}.o"), d, d);
}

pub fn init_ffn(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) {
    init_linear(params, rng, &format!("{name}.up"), d, hidden);
    init_linear(params, rng, &format!("{name}.down"), hidden, d);
}

pub fn ffn(tape: &mut Tape, params: &Params, name: &str, x: Var) -> Var {
    let h = linear(tape, params, &format!("{name}.up"), x);
    let h = tape.relu(h);
    linear(tape, params, &format!("{name}.down"), h)
}

/// Pre-norm self-attention block: x + MHA(LN(x)); x + FFN(LN(x)).
pub fn self_attn_block(
    tape: &mut Tape,
    params: &Params,
    name: &str,
    x: Var,
    heads: usize,
    mask: Option<&Array2<f64>>,
) -> Var {
    let normed = tape.layer_norm_rows(x);
    let attn = multi_head_attention(tape, params, &format!("{name}.attn"), normed, normed, heads, mask);
    let x = tape.add(x, attn);
    let normed = tape.layer_norm_rows(x);
    let f = ffn(tape, params, &format!("{name}.ffn"), normed);
    tape.add(x, f)
}

pub fn init_self_attn_block(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, d: usize) {
    init_attention(params, rng, &format!("{name}.attn"), d, d, d);
    init_ffn(params, rng, &format!("{name}.ffn"), d, 4 * d);
}

/// Lower-triangular causal mask (0 allowed, -1e30 blocked).
pub fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { -1e30 })
}

/// Column mask blocking padded key positions.
pub fn key_padding_mask(rows: usize, valid: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((rows, valid.len()), |(_, j)| if valid[j] { 0.0 } else { -1e30 })
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment gradient descent over a named parameter map.
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    pub fn apply(&mut self, params: &mut Params, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.cfg.beta1 + g * (1.0 - self.cfg.beta1);
            *v = &*v * self.cfg.beta2 + &g.mapv(|x| x * x) * (1.0 - self.cfg.beta2);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let update = mhat / (vhat.mapv(f64::sqrt) + self.cfg.eps);
            *p -= &(update * self.cfg.lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn freq_embed_shapes_and_values() {
        let e = freq_embed(&[Vec3::ZERO], 8);
        assert_eq!(e.dim(), (1, 51));
        // all sin terms 0, all cos terms 1 at the origin
        for c in 0..3 {
            let base = c * 17;
            assert_eq!(e[[0, base]], 0.0);
            for l in 0..8 {
                assert_eq!(e[[0, base + 1 + 2 * l]], 0.0);
                assert_eq!(e[[0, base + 2 + 2 * l]], 1.0);
            }
        }
        // c = 0.5, band l=1: sin(pi * 2 * 0.5) = 0
        let e = freq_embed(&[Vec3::new(0.5, 0.0, 0.0)], 2);
        assert!(e[[0, 3]].abs() < 1e-12);
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        init_linear(&mut params, &mut rng, "l", 3, 3);
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("l.w".to_string(), Array2::ones((3, 3)));
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        opt.apply(&mut params, &grads);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut params = Params::new();
        params.insert("x".into(), Array2::from_elem((1, 1), 5.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let g = params["x"].clone() * 2.0;
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            opt.apply(&mut params, &grads);
        }
        assert!(params["x"][[0, 0]].abs() < 1e-2);
    }
}
