//! Neural building blocks: linear layers, multi-head attention, feed-forward
//! blocks, layer norm with affine parameters, 2D sine positional encoding,
//! Xavier initialization and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named trainable tensors, collected in deterministic order.
pub type ParamList = Vec<(String, Tensor)>;

pub fn xavier_uniform(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data: Vec<f64> = (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::param(&[out_dim, in_dim], data).unwrap()
}

pub struct Linear {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: xavier_uniform(rng, out_dim, in_dim),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]).unwrap(),
        }
    }

    /// Zero weight and zero bias; the gate layer of gated correlation starts
    /// here so that sigmoid(0) = 0.5 holds exactly.
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: Tensor::param(&[out_dim, in_dim], vec![0.0; out_dim * in_dim]).unwrap(),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]).unwrap(),
        }
    }

    /// Identity map (square, frozen); used by op-level attention tests.
    pub fn identity(dim: usize) -> Linear {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        let weight = Tensor::from_vec(&[dim, dim], w).unwrap();
        let bias = Tensor::zeros(&[dim]);
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let wt = tape.transpose(&self.weight)?;
        let y = tape.matmul(x, &wt)?;
        tape.broadcast_add(&y, &self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Raw scaled dot-product attention kernel shared by every attention path:
/// softmax(q·kᵀ/√dk)·v. Returns the output and the (on-tape) weight matrix.
pub fn attention_kernel(tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.shape()[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&scores, 1.0 / (dk as f64).sqrt())?;
    let attn = tape.softmax_rows(&scaled)?;
    let out = tape.matmul(&attn, v)?;
    Ok((out, attn))
}

pub struct MultiHeadAttention {
    pub head_count: usize,
    pub model_dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, model_dim: usize, head_count: usize) -> Result<MultiHeadAttention> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} not divisible by head_count {head_count}"
            )));
        }
        Ok(MultiHeadAttention {
            head_count,
            model_dim,
            wq: Linear::new(rng, model_dim, model_dim),
            wk: Linear::new(rng, model_dim, model_dim),
            wv: Linear::new(rng, model_dim, model_dim),
            wo: Linear::new(rng, model_dim, model_dim),
        })
    }

    /// Single head, frozen identity projections — the literal correlation
    /// operator used by the op-level tests.
    pub fn identity(model_dim: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            head_count: 1,
            model_dim,
            wq: Linear::identity(model_dim),
            wk: Linear::identity(model_dim),
            wv: Linear::identity(model_dim),
            wo: Linear::identity(model_dim),
        }
    }

    /// Returns the attended output [N_Q, d] and the head-averaged attention
    /// matrix [N_Q, N_V]. The diagnostic matrix is detached from the tape.
    pub fn forward(&self, tape: &Tape, q_tokens: &Tensor, kv_tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.model_dim;
        if q_tokens.shape()[1] != d || kv_tokens.shape()[1] != d {
            return Err(Error::dim(
                "mha_forward",
                format!(
                    "feature dims of q {:?} / kv {:?} do not match model_dim {}",
                    q_tokens.shape(),
                    kv_tokens.shape(),
                    d
                ),
            ));
        }
        let qp = self.wq.forward(tape, q_tokens)?;
        let kp = self.wk.forward(tape, kv_tokens)?;
        let vp = self.wv.forward(tape, kv_tokens)?;
        let dk = d / self.head_count;
        let nq = q_tokens.shape()[0];
        let nv = kv_tokens.shape()[0];
        let mut heads = Vec::with_capacity(self.head_count);
        let mut attn_avg = vec![0.0; nq * nv];
        for h in 0..self.head_count {
            let (s, e) = (h * dk, (h + 1) * dk);
            let qh = tape.slice(&qp, 1, s, e)?;
            let kh = tape.slice(&kp, 1, s, e)?;
            let vh = tape.slice(&vp, 1, s, e)?;
            let (oh, ah) = attention_kernel(tape, &qh, &kh, &vh)?;
            for (acc, v) in attn_avg.iter_mut().zip(ah.data().iter()) {
                *acc += v / self.head_count as f64;
            }
            heads.push(oh);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let cat = tape.concat(&refs, 1)?;
        let out = self.wo.forward(tape, &cat)?;
        let attn = Tensor::from_vec(&[nq, nv], attn_avg)?;
        Ok((out, attn))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(&[dim], vec![1.0; dim]).unwrap(),
            beta: Tensor::param(&[dim], vec![0.0; dim]).unwrap(),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let normed = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let scaled = tape.broadcast_mul(&normed, &self.gamma)?;
        tape.broadcast_add(&scaled, &self.beta)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Transformer feed-forward block: linear -> relu -> linear, with residual
/// connection and pre-norm (the identity path stays unnormalized, which
/// trains stably without warmup).
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> FeedForward {
        FeedForward {
            lin1: Linear::new(rng, dim, hidden),
            lin2: Linear::new(rng, hidden, dim),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let n = self.norm.forward(tape, x)?;
        let h = self.lin1.forward(tape, &n)?;
        let h = tape.relu(&h)?;
        let h = self.lin2.forward(tape, &h)?;
        tape.add(x, &h)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.lin1.params(&format!("{prefix}.lin1"), out);
        self.lin2.params(&format!("{prefix}.lin2"), out);
        self.norm.params(&format!("{prefix}.norm"), out);
    }
}

/// DETR-convention 2D sine positional encoding over an h x w grid, row-major
/// tokens, d features (d/2 for the y axis, d/2 for the x axis).
pub fn sine_positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dim {d} must be divisible by 4"
        )));
    }
    let half = d / 2;
    let temperature: f64 = 10000.0;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x) * d + d];
            for i in 0..half / 2 {
                let freq = temperature.powf(2.0 * i as f64 / half as f64);
                row[2 * i] = (y as f64 / freq).sin();
                row[2 * i + 1] = (y as f64 / freq).cos();
                row[half + 2 * i] = (x as f64 / freq).sin();
                row[half + 2 * i + 1] = (x as f64 / freq).cos();
            }
        }
    }
    Tensor::from_vec(&[h * w, d], data)
}

pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamList) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// One Adam update with bias correction. Parameters without an
    /// accumulated gradient are left untouched. Gradients are cleared.
    pub fn step(&mut self, params: &ParamList, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, (name, p)) in params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn xavier_values_within_bound() {
        let mut r = rng(7);
        let w = xavier_uniform(&mut r, 10, 20);
        let bound = (6.0 / 30.0f64).sqrt();
        assert!(w.to_vec().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let a = xavier_uniform(&mut rng(3), 8, 8);
        let b = xavier_uniform(&mut rng(3), 8, 8);
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn zeroed_gate_outputs_zero() {
        let tape = Tape::new();
        let gate = Linear::zeroed(8, 4);
        let x = Tensor::from_vec(&[3, 8], (0..24).map(|v| v as f64).collect()).unwrap();
        let y = gate.forward(&tape, &x).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mha_single_key_attention_is_one() {
        let tape = Tape::new();
        let mha = MultiHeadAttention::new(&mut rng(1), 12, 6).unwrap();
        let q = Tensor::from_vec(&[4, 12], vec![0.1; 48]).unwrap();
        let kv = Tensor::from_vec(&[1, 12], vec![0.2; 12]).unwrap();
        let (_, attn) = mha.forward(&tape, &q, &kv).unwrap();
        assert_eq!(attn.shape(), vec![4, 1]);
        assert!(attn.to_vec().iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mha_attention_rows_sum_to_one() {
        let mut r = rng(5);
        let tape = Tape::new();
        let mha = MultiHeadAttention::new(&mut r, 12, 6).unwrap();
        let q = xavier_uniform(&mut r, 5, 12);
        let kv = xavier_uniform(&mut r, 7, 12);
        let (_, attn) = mha.forward(&tape, &q, &kv).unwrap();
        let a = attn.to_vec();
        for i in 0..5 {
            let s: f64 = a[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mha_kv_permutation_invariance() {
        let mut r = rng(9);
        let mha = MultiHeadAttention::new(&mut r, 12, 6).unwrap();
        let q = xavier_uniform(&mut r, 3, 12);
        let kv = xavier_uniform(&mut r, 6, 12);
        let tape = Tape::new();
        let (out, _) = mha.forward(&tape, &q, &kv).unwrap();
        // reverse kv rows
        let kvd = kv.to_vec();
        let mut rev = vec![0.0; kvd.len()];
        for i in 0..6 {
            rev[i * 12..(i + 1) * 12].copy_from_slice(&kvd[(5 - i) * 12..(6 - i) * 12]);
        }
        let kv2 = Tensor::from_vec(&[6, 12], rev).unwrap();
        let tape2 = Tape::new();
        let (out2, _) = mha.forward(&tape2, &q, &kv2).unwrap();
        for (a, b) in out.to_vec().iter().zip(out2.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_rejects_heads_not_dividing_dim() {
        assert!(MultiHeadAttention::new(&mut rng(0), 64, 6).is_err());
    }

    #[test]
    fn ffn_preserves_shape() {
        let mut r = rng(2);
        let ffn = FeedForward::new(&mut r, 8, 32);
        let tape = Tape::new();
        let x = xavier_uniform(&mut r, 5, 8);
        let y = ffn.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), vec![5, 8]);
    }

    #[test]
    fn pos_encoding_deterministic_and_unit_pairs() {
        let a = sine_positional_encoding(4, 4, 16).unwrap();
        let b = sine_positional_encoding(4, 4, 16).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        // each (sin, cos) frequency pair has unit norm on every row
        let d = 16;
        let data = a.to_vec();
        for row in data.chunks(d) {
            for pair in row.chunks(2) {
                let n = pair[0] * pair[0] + pair[1] * pair[1];
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pos_encoding_single_cell_and_bad_dim() {
        let a = sine_positional_encoding(1, 1, 8).unwrap();
        assert_eq!(a.shape(), vec![1, 8]);
        assert!(sine_positional_encoding(2, 2, 6).is_err());
    }

    #[test]
    fn pos_encoding_distinct_positions_distinct_rows() {
        let a = sine_positional_encoding(3, 3, 16).unwrap();
        let d = a.to_vec();
        for i in 0..9 {
            for j in (i + 1)..9 {
                let diff: f64 = (0..16).map(|k| (d[i * 16 + k] - d[j * 16 + k]).abs()).sum();
                assert!(diff > 1e-9, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params);
        adam.step(&params, 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn adam_single_step_hand_value() {
        // g = 1: mhat = 1, vhat = 1, delta = -lr / (1 + eps) ~ -0.1
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        p.accum_grad(&[1.0]);
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params);
        adam.step(&params, 0.1).unwrap();
        assert!((p.to_vec()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_descends_against_constant_gradient() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params);
        for _ in 0..50 {
            p.accum_grad(&[2.5]);
            adam.step(&params, 0.01).unwrap();
        }
        assert!(p.to_vec()[0] < -0.1);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        p.accum_grad(&[f64::NAN]);
        let params = vec![("theta".to_string(), p)];
        let mut adam = AdamState::new(&params);
        let err = adam.step(&params, 0.1).unwrap_err().to_string();
        assert!(err.contains("theta"));
    }

    #[test]
    fn adam_lr_zero_is_identity() {
        let p = Tensor::param(&[2], vec![3.0, -1.0]).unwrap();
        p.accum_grad(&[0.5, 0.5]);
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params);
        adam.step(&params, 0.0).unwrap();
        assert_eq!(p.to_vec(), vec![3.0, -1.0]);
    }
}
