//! Small neural-network toolkit over candle tensors with seeded, named parameters.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};

/// Named trainable parameters with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> ParamStore {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        assert!(!self.vars.contains_key(name), "duplicate parameter {name}");
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Affine layer with the usual `1/sqrt(fan_in)` uniform initialization.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound)?;
        let bias = self.uniform(&format!("{name}.bias"), &[fan_out], bound)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound)?;
        Ok(Linear { weight, bias: None })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: self.constant(&format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter values as `f32`, keyed by name.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(name.clone(), (var.dims().to_vec(), values));
        }
        Ok(out)
    }

    /// Overwrites every parameter; names and shapes must match exactly.
    pub fn import(&self, params: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        ensure!(
            params.len() == self.vars.len(),
            "parameter count mismatch: have {}, got {}",
            self.vars.len(),
            params.len()
        );
        for (name, var) in &self.vars {
            let (shape, values) = params
                .get(name)
                .ok_or_else(|| crate::Error::Incompatible(format!("missing parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(crate::Error::Incompatible(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    shape
                )));
            }
            let t = Tensor::from_slice(values, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Deep copy of the current values, detached from the variables.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            if let Some(t) = snapshot.get(name) {
                var.set(t)?;
            }
        }
        Ok(())
    }
}

/// `y = x W^T + b` over the last dimension, for inputs of any rank.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Elu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu()?,
            Activation::Elu => x.elu(1.0)?,
        })
    }
}

/// Two-layer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: [usize; 3], act: Activation) -> Result<Mlp> {
        Ok(Mlp {
            hidden: ps.linear(&format!("{name}.0"), dims[0], dims[1])?,
            out: ps.linear(&format!("{name}.1"), dims[1], dims[2])?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.act.apply(&self.hidden.forward(x)?)?;
        self.out.forward(&h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Numerically stable softmax over `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Multi-head scaled dot-product self-attention over `[batch, seq, dim]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        ensure!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Ok(SelfAttention {
            query: ps.linear(&format!("{name}.q"), dim, dim)?,
            key: ps.linear(&format!("{name}.k"), dim, dim)?,
            value: ps.linear(&format!("{name}.v"), dim, dim)?,
            out: ps.linear(&format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// Attention probabilities `[batch, heads, seq, seq]`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.split(&self.query.forward(x)?)?;
        let k = self.split(&self.key.forward(x)?)?;
        let dk = q.dim(D::Minus1)? as f64;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / dk.sqrt())?;
        softmax(&scores, 3)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let attn = self.weights(x)?;
        let v = self.split(&self.value.forward(x)?)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(&mixed)
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm_attn: ps.layer_norm(&format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm_ffn: ps.layer_norm(&format!("{name}.ln2"), dim)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), [dim, ffn, dim], Activation::Gelu)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm_attn.forward(x)?)?)?;
        let y = self.ffn.forward(&self.norm_ffn.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Standard sine/cosine encoding of integer positions, `[positions.len(), dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((p * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((p * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// Builds an `f64` host buffer into a tensor of the store's dtype.
pub fn tensor(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Flattens any tensor to host `f64`.
pub fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(DType::F64, 7);
        let mut b = ParamStore::new(DType::F64, 7);
        let la = a.linear("l", 3, 4).unwrap();
        let lb = b.linear("l", 3, 4).unwrap();
        assert_eq!(to_f64(&la.weight).unwrap(), to_f64(&lb.weight).unwrap());
        assert_eq!(a.num_params(), 16);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1e3, 0.0, 1e3]], &Device::Cpu).unwrap();
        let s = softmax(&x, 1).unwrap();
        for row in s.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let mut a = ParamStore::new(DType::F32, 1);
        a.linear("x", 2, 2).unwrap();
        let mut b = ParamStore::new(DType::F32, 2);
        b.linear("x", 2, 2).unwrap();
        b.import(&a.export().unwrap()).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());
    }

    #[test]
    fn import_rejects_shape_mismatch() {
        let mut a = ParamStore::new(DType::F32, 1);
        a.linear("x", 2, 3).unwrap();
        let mut b = ParamStore::new(DType::F32, 1);
        b.linear("x", 3, 2).unwrap();
        assert!(b.import(&a.export().unwrap()).is_err());
    }
}
