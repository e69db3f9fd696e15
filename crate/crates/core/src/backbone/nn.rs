//! Transformer layers built only from differentiable tensor primitives, so the
//! whole model backpropagates in both single and double precision.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::rng::StreamRng;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Named parameter visitor. Names are dotted paths; visiting order is fixed by
/// each layer's field order and defines the flattened parameter list.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: StreamRng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(rng: StreamRng, dtype: DType, device: Device) -> Self {
        Init { rng, dtype, device }
    }

    fn var(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.var(vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Result<Var> {
        self.var(vec![1.0; shape.iter().product()], shape)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.var(values, shape)
    }

    /// Xavier-uniform weight of shape `(fan_out, fan_in)`.
    pub fn xavier(&mut self, fan_out: usize, fan_in: usize) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let values = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        self.var(values, &[fan_out, fan_in])
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.xavier(fan_out, fan_in)?,
            bias: init.zeros(&[fan_out])?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies `x W^T + b` over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / fan_in;
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: init.ones(&[dim])?,
            bias: init.zeros(&[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.weight.as_tensor(), self.bias.as_tensor())
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Softmax over the last dimension. The subtracted row maximum is detached; it
/// cancels analytically.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            qkv: Linear::new(init, dim, 3 * dim)?,
            proj: Linear::new(init, dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Multi-head attention of `queries` over `context`. Returns the output and
    /// the attention probabilities `(B, H, Tq, Tk)`.
    pub fn forward(&self, queries: &Tensor, context: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, tq, dim) = queries.dims3()?;
        let q_proj = self.qkv.forward(queries)?;
        let (q, k, v) = match context {
            None => (
                q_proj.narrow(2, 0, dim)?,
                q_proj.narrow(2, dim, dim)?,
                q_proj.narrow(2, 2 * dim, dim)?,
            ),
            Some(ctx) => {
                let kv = self.qkv.forward(ctx)?;
                (
                    q_proj.narrow(2, 0, dim)?,
                    kv.narrow(2, dim, dim)?,
                    kv.narrow(2, 2 * dim, dim)?,
                )
            }
        };
        let (q, k, v) = (self.split_heads(&q)?, self.split_heads(&k)?, self.split_heads(&v)?);
        let scale = 1.0 / ((dim / self.heads) as f64).sqrt();
        let scores = q.matmul(&k.t()?.contiguous()?)?.affine(scale, 0.0)?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, dim))?;
        Ok((self.proj.forward(&out)?, attn))
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(init, dim, hidden)?,
            fc2: Linear::new(init, hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm transformer block. With a context the block cross-attends from its
/// input tokens to the (fixed) context tokens.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(init: &mut Init, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(init, dim)?,
            attn: Attention::new(init, dim, heads)?,
            norm2: LayerNorm::new(init, dim)?,
            mlp: Mlp::new(init, dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let normed = self.norm1.forward(x)?;
        let (a, probs) = match context {
            None => self.attn.forward(&normed, None)?,
            Some(ctx) => {
                let ctx = self.norm1.forward(ctx)?;
                self.attn.forward(&normed, Some(&ctx))?
            }
        };
        let x = (x + a)?;
        let y = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((y, probs))
    }
}

impl Params for Block {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.mlp.visit(&join(prefix, "mlp"), out);
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Fixed 2-D sine-cosine embedding for a `grid_w x grid_h` grid, row-major,
/// optionally preceded by an all-zero row for the class token. The first half
/// of the channels encodes the column, the second half the row.
pub fn sincos_2d(dim: usize, grid_w: usize, grid_h: usize, class_token: bool) -> Vec<f64> {
    assert!(dim.is_multiple_of(4), "sine-cosine embedding width must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity((grid_w * grid_h + usize::from(class_token)) * dim);
    if class_token {
        out.extend(std::iter::repeat_n(0.0, dim));
    }
    for y in 0..grid_h {
        for x in 0..grid_w {
            for pos in [x as f64, y as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    out
}

/// Rows of `x: (B, T, C)` selected per batch element.
pub fn gather_tokens(x: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    assert_eq!(b, indices.len(), "one index list per batch element");
    let k = indices.first().map_or(0, Vec::len);
    let flat: Vec<u32> = indices
        .iter()
        .enumerate()
        .flat_map(|(bi, idx)| {
            assert_eq!(idx.len(), k, "index lists must have equal length");
            idx.iter().map(move |&i| (bi * t + i) as u32)
        })
        .collect();
    let ids = Tensor::from_vec(flat, b * k, x.device())?;
    Ok(x.reshape((b * t, c))?.index_select(&ids, 0)?.reshape((b, k, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn init() -> Init {
        Init::new(rng::stream("test", &[0]), DType::F64, Device::Cpu)
    }

    #[test]
    fn layer_norm_matches_scalar_formula() {
        let x = Tensor::new(&[[1.0f64, 2.0, 4.0, 9.0]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[1.0f64, 1.0, 1.0, 1.0], &Device::Cpu).unwrap();
        let b = Tensor::new(&[0.0f64; 4], &Device::Cpu).unwrap();
        let y: Vec<f64> = layer_norm(&x, &w, &b).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = 4.0;
        let var = (9.0 + 4.0 + 0.0 + 25.0) / 4.0;
        for (yi, xi) in y.iter().zip([1.0, 2.0, 4.0, 9.0]) {
            assert!((yi - (xi - mean) / (var + LAYER_NORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, -3.0, 700.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_attention_shapes() {
        let mut init = init();
        let block = Block::new(&mut init, 8, 2, 4).unwrap();
        let q = Tensor::zeros((2, 3, 8), DType::F64, &Device::Cpu).unwrap();
        let kv = Tensor::ones((2, 5, 8), DType::F64, &Device::Cpu).unwrap();
        let (y, attn) = block.forward(&q, Some(&kv)).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8]);
        assert_eq!(attn.dims(), &[2, 2, 3, 5]);
        assert_eq!(block.named_params("b").len(), 12);
    }

    #[test]
    fn sincos_layout() {
        let e = sincos_2d(8, 3, 2, true);
        assert_eq!(e.len(), 7 * 8);
        assert!(e[..8].iter().all(|v| *v == 0.0));
        // token (x=0, y=0): sin parts 0, cos parts 1
        assert_eq!(&e[8..16], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // token (x=1, y=0), first omega is 1
        assert_eq!(e[16], 1f64.sin());
    }

    #[test]
    fn gather_selects_rows() {
        let x = Tensor::arange(0f64, 12.0, &Device::Cpu).unwrap().reshape((2, 3, 2)).unwrap();
        let g = gather_tokens(&x, &[vec![2, 0], vec![1, 1]]).unwrap();
        let v: Vec<Vec<Vec<f64>>> = g.to_vec3().unwrap();
        assert_eq!(v, vec![vec![vec![4.0, 5.0], vec![0.0, 1.0]], vec![vec![8.0, 9.0], vec![8.0, 9.0]]]);
    }
}
