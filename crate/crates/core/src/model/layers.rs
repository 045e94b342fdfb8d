//! Transformer building blocks on candle primitives. Everything here is
//! composed from differentiable ops only.

use candle_core::{Device, Tensor, D};

use super::params::ParamStore;
use crate::error::Result;

/// Additive mask value for disallowed attention entries.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Self {
            weight: ps.normal(&format!("{name}.weight"), &[d_out, d_in], std)?,
            bias: Some(ps.zeros(&format!("{name}.bias"), &[d_out])?),
        })
    }

    pub fn no_bias(ps: &ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Self { weight: ps.normal(&format!("{name}.weight"), &[d_out, d_in], std)?, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.ones(&format!("{name}.weight"), &[d])?,
            shift: ps.zeros(&format!("{name}.bias"), &[d])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &ParamStore, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), d, hidden)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &ParamStore, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d)?,
            k: Linear::new(ps, &format!("{name}.k"), d, d)?,
            v: Linear::new(ps, &format!("{name}.v"), d, d)?,
            o: Linear::new(ps, &format!("{name}.o"), d, d)?,
            n_heads,
        })
    }

    /// `query` is `(B, Tq, d)`, `memory` `(B, Tk, d)`; `mask` broadcasts to
    /// `(B, H, Tq, Tk)` and is added to the attention logits.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = memory.dim(1)?;
        let dh = d / self.n_heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.n_heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, tq)?;
        let k = split(self.k.forward(memory)?, tk)?;
        let v = split(self.v.forward(memory)?, tk)?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &ParamStore, name: &str, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), d)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, ffn)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &ParamStore, name: &str, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), d)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, heads)?,
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), d)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, heads)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, ffn)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        self_mask: &Tensor,
        memory_mask: &Tensor,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(self_mask))?)?;
        let h = self.ln_cross.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, Some(memory_mask))?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Left-padded 1-D convolution over the time axis of `(B, T, d)` inputs:
/// output step `t` sees inputs `t - kernel + 1 ..= t` only.
#[derive(Debug, Clone)]
pub struct CausalConv1d {
    /// One `(d_in, d_out)` matrix per tap; tap `s` multiplies input `t - s`.
    taps: Vec<Tensor>,
    bias: Tensor,
}

impl CausalConv1d {
    pub fn new(ps: &ParamStore, name: &str, d: usize, kernel: usize) -> Result<Self> {
        let std = (1.0 / (d * kernel) as f64).sqrt();
        let taps = (0..kernel)
            .map(|s| ps.normal(&format!("{name}.tap{s}"), &[d, d], std))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { taps, bias: ps.zeros(&format!("{name}.bias"), &[d])? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let pad = self.taps.len() - 1;
        let padded = if pad > 0 {
            let zeros = Tensor::zeros((b, pad, d), x.dtype(), x.device())?;
            Tensor::cat(&[&zeros, x], 1)?
        } else {
            x.clone()
        };
        let mut out = self.bias.broadcast_as((b, t, d))?.contiguous()?;
        for (s, tap) in self.taps.iter().enumerate() {
            let shifted = padded.narrow(1, pad - s, t)?;
            out = (out + shifted.broadcast_matmul(tap)?)?;
        }
        Ok(out)
    }
}

/// Fixed sinusoidal position table, `(len, d)`.
pub fn sinusoidal_positions(len: usize, d: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(data, (len, d), device)?)
}

/// `(1, 1, T, T)` additive mask hiding future positions.
pub fn causal_mask(t: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = MASK_NEG as f32;
        }
    }
    Ok(Tensor::from_vec(data, (1, 1, t, t), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn causal_conv_ignores_future_steps() {
        let ps = ParamStore::new(3, DType::F64);
        let conv = CausalConv1d::new(&ps, "c", 4, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 4), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        let mut x2 = x.to_vec3::<f64>().unwrap();
        x2[0][3] = vec![9.0; 4];
        x2[0][4] = vec![-9.0; 4];
        let y2 = conv.forward(&Tensor::new(x2, &Device::Cpu).unwrap()).unwrap();
        let a = y.narrow(1, 0, 3).unwrap().to_vec3::<f64>().unwrap();
        let b = y2.narrow(1, 0, 3).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&ps, "ln", 6).unwrap();
        let x = Tensor::new(&[[1f64, 2., 3., 4., 5., 6.]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 6.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sinusoid_first_row() {
        let p = sinusoidal_positions(2, 4, &Device::Cpu).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(p[0], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((p[1][0] - 1f32.sin()).abs() < 1e-6);
    }
}
