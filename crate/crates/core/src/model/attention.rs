//! Multi-head self-attention, window masks and pre-norm transformer blocks.

use rand_chacha::ChaCha8Rng;

use super::layers::{LayerNorm, Linear, Session};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, std, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, std, rng),
            heads,
            dim,
        }
    }

    /// `mask` is an additive `n × n` bias (0 where attention is allowed,
    /// `-inf` where it is not); `None` means global attention.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let qkv = self.qkv.forward(s, x)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask = mask.map(|m| s.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice_cols(h * head_dim, head_dim)?;
            let k = qkv.slice_cols(self.dim + h * head_dim, head_dim)?;
            let v = qkv.slice_cols(2 * self.dim + h * head_dim, head_dim)?;
            let mut scores = q.matmul(&k.transpose()?)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            outs.push(scores.softmax()?.matmul(&v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 1)? };
        self.proj.forward(s, merged)
    }
}

/// Window index of every position when the flattened sequence of length `n`
/// is cut into windows of `window` tokens starting at offset `shift`
/// (wrapping around the end).
pub fn window_ids(n: usize, window: usize, shift: usize) -> Vec<usize> {
    let shift = if n == 0 { 0 } else { shift % n };
    (0..n).map(|i| ((i + n - shift) % n) / window).collect()
}

/// Additive attention mask for shifted local windows, or `None` when one
/// window covers the whole sequence.
pub fn local_window_mask(n: usize, window: usize, shift: usize) -> Result<Option<Tensor>> {
    if window == 0 {
        return Err(Error::Param("attention window must be at least 1".into()));
    }
    if window >= n {
        if window > n {
            log::debug!("attention window {window} exceeds {n} tokens; using global attention");
        }
        return Ok(None);
    }
    let ids = window_ids(n, window, shift);
    let mut data = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            if ids[i] == ids[j] {
                data[i * n + j] = 0.0;
            }
        }
    }
    Ok(Some(Tensor::matrix(n, n, data)?))
}

/// Self-attention where each token only sees the tokens in its (shifted) window.
pub fn shifted_local_attention<'t>(
    s: &Session<'t>,
    tokens: Var<'t>,
    window: usize,
    shift: usize,
    attn: &Attention,
) -> Result<Var<'t>> {
    let n = tokens.shape()[0];
    let mask = local_window_mask(n, window, shift)?;
    attn.forward(s, tokens, mask.as_ref())
}

/// Pre-norm block: `x + attn(norm(x))`, then `x + mlp(norm(x))` with a GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, std, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_ratio * dim, std, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * dim, dim, std, rng),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let h = self.attn.forward(s, self.norm1.forward(s, x)?, mask)?;
        let x = x.add(&h)?;
        let h = self.fc1.forward(s, self.norm2.forward(s, x)?)?.gelu();
        x.add(&self.fc2.forward(s, h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_ids_wrap_with_shift() {
        assert_eq!(window_ids(6, 2, 0), vec![0, 0, 1, 1, 2, 2]);
        // windows start at 1: {1,2}, {3,4}, {5,0}
        assert_eq!(window_ids(6, 2, 1), vec![2, 0, 0, 1, 1, 2]);
    }

    #[test]
    fn full_window_means_no_mask() {
        assert!(local_window_mask(8, 8, 0).unwrap().is_none());
        assert!(local_window_mask(8, 20, 3).unwrap().is_none());
        assert!(local_window_mask(8, 0, 0).is_err());
        let m = local_window_mask(4, 1, 0).unwrap().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.data()[i * 4 + j] == 0.0, i == j);
            }
        }
    }
}
