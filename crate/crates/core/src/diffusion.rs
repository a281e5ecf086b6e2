//! Residual diffusion: linear noise schedule, closed-form forward process,
//! token-conditioned denoiser, Min-SNR loss and deterministic DDIM sampling.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{Point, ResidualStats, Trajectory};
use crate::error::{ensure, Result};
use crate::nn::{self, Activation, LayerNorm, Linear, Mlp, ParamStore, TransformerBlock};

/// Linear-beta schedule. Timesteps are 1-based: `t` in `1..=steps()`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(steps >= 1, "schedule needs at least one step");
    ensure!(
        0.0 < beta_start && beta_start < beta_end && beta_end < 1.0,
        "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
    );
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        ensure!(1 <= t && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }

    /// Min-SNR weight `1 / (SNR + 1)`, algebraically `1 - alpha_bar`.
    pub fn min_snr_weight(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.alpha_bar(t)?)
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`, one timestep per leading row.
pub fn forward_sample(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    ensure!(
        x0.dims() == eps.dims(),
        "noise shape {:?} differs from data {:?}",
        eps.dims(),
        x0.dims()
    );
    let b = x0.dim(0)?;
    ensure!(t.len() == b, "one timestep per row required");
    let (keep, noise) = row_coefficients(x0, t, schedule)?;
    Ok((x0.broadcast_mul(&keep)? + eps.broadcast_mul(&noise)?)?)
}

/// `sqrt(ab_t)` and `sqrt(1 - ab_t)` shaped to broadcast over rows of `like`.
fn row_coefficients(like: &Tensor, t: &[usize], schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let mut shape = vec![t.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    let ab = t.iter().map(|&s| schedule.alpha_bar(s)).collect::<Result<Vec<_>>>()?;
    let keep = ab.iter().map(|a| a.sqrt()).collect();
    let noise = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok((
        nn::tensor(keep, &shape, like.dtype(), like.device())?,
        nn::tensor(noise, &shape, like.dtype(), like.device())?,
    ))
}

/// One ancestral step `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(x_prev: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check(t)?;
    let (a, b) = (schedule.alpha[t - 1].sqrt(), schedule.beta[t - 1].sqrt());
    Ok(x_prev.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn normalize_residual(delta: &Trajectory, stats: &ResidualStats) -> Trajectory {
    Trajectory(
        delta
            .points()
            .iter()
            .map(|p| {
                [
                    (p[0] - stats.mu[0]) / stats.sigma[0],
                    (p[1] - stats.mu[1]) / stats.sigma[1],
                ]
            })
            .collect(),
    )
}

pub fn denormalize_residual(x0: &Trajectory, stats: &ResidualStats) -> Trajectory {
    Trajectory(
        x0.points()
            .iter()
            .map(|p| [p[0] * stats.sigma[0] + stats.mu[0], p[1] * stats.sigma[1] + stats.mu[1]])
            .collect(),
    )
}

/// Per-step tokens `[r_t ; p_t]`: `[B, T, 2]` twice to `[B, T, 4]`.
pub fn build_tokens(noisy: &Tensor, proxy: &Tensor) -> Result<Tensor> {
    ensure!(
        noisy.dims() == proxy.dims(),
        "residual {:?} and proxy {:?} differ in shape",
        noisy.dims(),
        proxy.dims()
    );
    Ok(Tensor::cat(&[noisy, proxy], 2)?)
}

/// Final prediction: proxy plus residual.
pub fn refine(proxy: &Trajectory, residual: &Trajectory) -> Result<Trajectory> {
    ensure!(
        proxy.len() == residual.len(),
        "proxy has {} steps, residual {}",
        proxy.len(),
        residual.len()
    );
    Ok(Trajectory(
        proxy
            .points()
            .iter()
            .zip(residual.points())
            .map(|(p, r)| [p[0] + r[0], p[1] + r[1]])
            .collect(),
    ))
}

/// Mean over rows of `w(t) ||eps_hat - eps||^2`.
pub fn min_snr_loss(eps_hat: &Tensor, eps: &Tensor, t: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    ensure!(
        eps_hat.dims() == eps.dims(),
        "prediction {:?} and target {:?} differ in shape",
        eps_hat.dims(),
        eps.dims()
    );
    let b = eps.dim(0)?;
    ensure!(t.len() == b, "one timestep per row required");
    let w = t
        .iter()
        .map(|&s| schedule.min_snr_weight(s))
        .collect::<Result<Vec<_>>>()?;
    let w = nn::tensor(w, &[b], eps.dtype(), eps.device())?;
    let sse = (eps_hat - eps)?.sqr()?.flatten_from(1)?.sum(1)?;
    Ok(((sse * w)?.sum_all()? / b as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub cond_dim: usize,
    pub t_fut: usize,
    /// When false the proxy half of every token is zeroed.
    pub token_condition: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            width: 128,
            layers: 4,
            heads: 8,
            ffn: 256,
            cond_dim: 130,
            t_fut: crate::dataio::T_FUT,
            token_condition: true,
        }
    }
}

/// Transformer over the future-step axis predicting the injected noise.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub token_in: Linear,
    pub time: Mlp,
    pub cond: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub out: Linear,
    position: Tensor,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, cfg: DenoiserConfig) -> Result<Denoiser> {
        let w = cfg.width;
        let steps: Vec<f64> = (0..cfg.t_fut).map(|t| t as f64).collect();
        Ok(Denoiser {
            token_in: ps.linear("denoiser.token", 4, w)?,
            time: Mlp::new(ps, "denoiser.time", [w, w, w], Activation::Gelu)?,
            cond: ps.linear("denoiser.cond", cfg.cond_dim, w)?,
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(ps, &format!("denoiser.block{l}"), w, cfg.heads, cfg.ffn))
                .collect::<Result<_>>()?,
            norm: ps.layer_norm("denoiser.norm", w)?,
            out: ps.linear("denoiser.out", w, 2)?,
            position: nn::sinusoidal(&steps, w, ps.dtype(), ps.device())?,
            cfg,
        })
    }

    /// `x_t`, `proxy`: `[B, T, 2]`; `cond`: `[B, cond_dim]`; one timestep per row.
    pub fn predict_epsilon(&self, x_t: &Tensor, t: &[usize], cond: &Tensor, proxy: &Tensor) -> Result<Tensor> {
        let (b, steps, _) = x_t.dims3()?;
        ensure!(
            steps == self.cfg.t_fut,
            "expected {} future steps, got {steps}",
            self.cfg.t_fut
        );
        ensure!(t.len() == b, "one timestep per row required");
        let proxy = if self.cfg.token_condition {
            proxy.clone()
        } else {
            proxy.zeros_like()?
        };
        let tokens = self.token_in.forward(&build_tokens(x_t, &proxy)?)?;
        let tf: Vec<f64> = t.iter().map(|&s| s as f64).collect();
        let temb = nn::sinusoidal(&tf, self.cfg.width, x_t.dtype(), x_t.device())?;
        let global = (self.time.forward(&temb)? + self.cond.forward(cond)?)?;
        let mut x = tokens
            .broadcast_add(&self.position)?
            .broadcast_add(&global.unsqueeze(1)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.out.forward(&self.norm.forward(&x)?)
    }
}

/// Anything that predicts the noise in `x_t` at a shared timestep `t`.
pub trait EpsilonModel {
    fn epsilon(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Denoiser bound to fixed conditions.
pub struct Conditioned<'a> {
    pub denoiser: &'a Denoiser,
    pub cond: &'a Tensor,
    pub proxy: &'a Tensor,
}

impl EpsilonModel for Conditioned<'_> {
    fn epsilon(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        self.denoiser.predict_epsilon(x_t, &vec![t; b], self.cond, self.proxy)
    }
}

/// Selected timesteps, descending from `T` with stride `T / n_steps`.
pub fn ddim_timesteps(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    ensure!(
        n_steps >= 1 && n_steps <= total,
        "DDIM steps must be in 1..={total}, got {n_steps}"
    );
    let stride = total / n_steps;
    Ok((0..n_steps).map(|i| total - i * stride).collect())
}

/// Deterministic (eta = 0) DDIM from `x_t_start` at `t = T` down to a clean estimate.
///
/// After the last selected timestep the update jumps straight to
/// `alpha_bar = 1`, i.e. returns that step's clean estimate.
pub fn ddim_sample(
    model: &dyn EpsilonModel,
    x_start: &Tensor,
    schedule: &NoiseSchedule,
    n_steps: usize,
) -> Result<Tensor> {
    let ts = ddim_timesteps(schedule.steps(), n_steps)?;
    let mut x = x_start.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let eps = model.epsilon(&x, t)?.detach();
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        x = match ts.get(i + 1) {
            Some(&prev) => {
                let abp = schedule.alpha_bar(prev)?;
                ((x0 * abp.sqrt())? + (eps * (1.0 - abp).sqrt())?)?
            }
            None => x0,
        };
    }
    Ok(x)
}

/// Starting noise for hypotheses `ks`, each from its own seeded stream: `[len, t_fut, 2]`.
pub fn initial_noise(seed: u64, ks: &[usize], t_fut: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ks.len() * t_fut * 2);
    for &k in ks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        data.extend((0..t_fut * 2).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    nn::tensor(data, &[ks.len(), t_fut, 2], dtype, device)
}

/// `[B, T, 2]` tensor from trajectories.
pub fn stack(trajs: &[Trajectory], dtype: DType, device: &Device) -> Result<Tensor> {
    ensure!(!trajs.is_empty(), "nothing to stack");
    let t = trajs[0].len();
    ensure!(trajs.iter().all(|x| x.len() == t), "ragged trajectories");
    let data = trajs.iter().flat_map(|x| x.flatten()).collect();
    nn::tensor(data, &[trajs.len(), t, 2], dtype, device)
}

/// Inverse of [`stack`].
pub fn unstack(t: &Tensor) -> Result<Vec<Trajectory>> {
    let (b, steps, _) = t.dims3()?;
    let v = nn::to_f64(t)?;
    Ok((0..b)
        .map(|i| Trajectory::from_flat(&v[i * steps * 2..(i + 1) * steps * 2]))
        .collect())
}

/// Elementwise normalization on a `[.., 2]` tensor.
pub fn normalize_tensor(delta: &Tensor, stats: &ResidualStats) -> Result<Tensor> {
    let (mu, sigma) = stats_tensors(delta, stats)?;
    Ok(delta.broadcast_sub(&mu)?.broadcast_div(&sigma)?)
}

pub fn denormalize_tensor(x0: &Tensor, stats: &ResidualStats) -> Result<Tensor> {
    let (mu, sigma) = stats_tensors(x0, stats)?;
    Ok(x0.broadcast_mul(&sigma)?.broadcast_add(&mu)?)
}

fn stats_tensors(like: &Tensor, stats: &ResidualStats) -> Result<(Tensor, Tensor)> {
    let as_t = |p: Point| nn::tensor(p.to_vec(), &[2], like.dtype(), like.device());
    Ok((as_t(stats.mu)?, as_t(stats.sigma)?))
}
