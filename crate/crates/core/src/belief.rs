//! Goal hypotheses, goal-conditioned Gaussian beliefs, proxy trajectories and
//! the free-energy training objective.
//!
//! All coordinates here are target-centric: the target sits at the origin at
//! t = 0. Callers add the origin back for world-frame quantities.

use candle_core::{DType, Tensor, D};

use crate::dataio::Point;
use crate::error::{ensure, Result};
use crate::nn::{self, Activation, Mlp, ParamStore};

/// Lower and upper clamp for the belief log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
/// Guard inside the classification log.
pub const CLS_EPS: f64 = 1e-12;
/// Squared-distance floor keeping `sqrt` differentiable at coincident points.
const DIST2_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeliefConfig {
    pub hidden: usize,
    pub latent: usize,
    pub hypotheses: usize,
    pub head_hidden: usize,
    pub t_fut: usize,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        BeliefConfig {
            hidden: 128,
            latent: 128,
            hypotheses: 20,
            head_hidden: 128,
            t_fut: crate::dataio::T_FUT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub free_bits: f64,
    pub cls: f64,
    pub div: f64,
    pub cons: f64,
    pub coll: f64,
    pub margin: f64,
    pub d_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kl: 5e-3,
            free_bits: 0.02,
            cls: 0.5,
            div: 0.25,
            cons: 0.075,
            coll: 0.003,
            margin: 2.0,
            d_min: 0.2,
        }
    }
}

/// Terms switched off by the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub individual: bool,
    pub goal_supervision: bool,
    pub social: bool,
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        ObjectiveTerms {
            individual: true,
            goal_supervision: true,
            social: true,
        }
    }
}

/// The four decoding heads.
#[derive(Clone, Debug)]
pub struct BeliefHeads {
    pub cfg: BeliefConfig,
    pub goal: Mlp,
    pub weight: Mlp,
    pub belief: Mlp,
    pub proxy: Mlp,
    ramp: Tensor,
}

/// Every per-hypothesis quantity for a batch of `B` targets.
#[derive(Clone, Debug)]
pub struct BeliefOutput {
    /// `[B, K, 2]`
    pub goals: Tensor,
    /// `[B, K]`
    pub logits: Tensor,
    /// `[B, K]`, rows sum to one.
    pub pi: Tensor,
    /// `[B, K, d_z]`
    pub mu: Tensor,
    /// `[B, K, d_z]`, clamped.
    pub log_sigma: Tensor,
    /// `[B, K, t_fut, 2]`
    pub proxy: Tensor,
}

impl BeliefHeads {
    pub fn new(ps: &mut ParamStore, cfg: BeliefConfig) -> Result<BeliefHeads> {
        ensure!(cfg.hypotheses >= 1, "at least one goal hypothesis required");
        let (d, h, k, dz) = (cfg.hidden, cfg.head_hidden, cfg.hypotheses, cfg.latent);
        let ramp: Vec<f64> = (1..=cfg.t_fut).map(|t| t as f64 / cfg.t_fut as f64).collect();
        Ok(BeliefHeads {
            cfg,
            goal: Mlp::new(ps, "belief.goal", [d, h, 2 * k], Activation::Relu)?,
            weight: Mlp::new(ps, "belief.weight", [d, h, k], Activation::Relu)?,
            belief: Mlp::new(ps, "belief.posterior", [d + 2, h, 2 * dz], Activation::Relu)?,
            proxy: Mlp::new(ps, "belief.proxy", [dz + 2, h, 2 * cfg.t_fut], Activation::Relu)?,
            ramp: nn::tensor(ramp, &[cfg.t_fut, 1], ps.dtype(), ps.device())?,
        })
    }

    /// Goals `[B, K, 2]` and weight logits `[B, K]`.
    pub fn decode_goals(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = h.dim(0)?;
        let goals = self.goal.forward(h)?.reshape((b, self.cfg.hypotheses, 2))?;
        Ok((goals, self.weight.forward(h)?))
    }

    /// `h`: `[.., d]`, `goal`: `[.., 2]` with matching leading dims.
    pub fn posterior(&self, h: &Tensor, goal: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.belief.forward(&Tensor::cat(&[h, goal], D::Minus1)?)?;
        let dz = self.cfg.latent;
        let last = out.rank() - 1;
        let mu = out.narrow(last, 0, dz)?;
        let log_sigma = out.narrow(last, dz, dz)?.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, log_sigma))
    }

    /// Mean-only proxy decoder: `[.., d_z]` and `[.., 2]` to `[.., t_fut, 2]`.
    ///
    /// The output is a straight ramp from the origin to the goal plus a learned
    /// correction, so the proxy endpoint tracks the goal from initialization.
    pub fn proxy_decode(&self, mu: &Tensor, goal: &Tensor) -> Result<Tensor> {
        let raw = self.proxy.forward(&Tensor::cat(&[mu, goal], D::Minus1)?)?;
        let mut shape = goal.dims().to_vec();
        let lead = shape.len() - 1;
        shape.truncate(lead);
        let mut out_shape = shape.clone();
        out_shape.extend([self.cfg.t_fut, 2]);
        let correction = raw.reshape(out_shape.as_slice())?;
        let line = goal.unsqueeze(lead)?.broadcast_mul(&self.ramp)?;
        Ok((correction + line)?)
    }

    pub fn forward(&self, h: &Tensor) -> Result<BeliefOutput> {
        let (b, d) = h.dims2()?;
        let k = self.cfg.hypotheses;
        let (goals, logits) = self.decode_goals(h)?;
        let pi = nn::softmax(&logits, 1)?;
        let hk = h.unsqueeze(1)?.broadcast_as((b, k, d))?.contiguous()?;
        let (mu, log_sigma) = self.posterior(&hk, &goals)?;
        let proxy = self.proxy_decode(&mu, &goals)?;
        Ok(BeliefOutput {
            goals,
            logits,
            pi,
            mu,
            log_sigma,
            proxy,
        })
    }
}

impl BeliefOutput {
    pub fn batch(&self) -> usize {
        self.goals.dims()[0]
    }

    pub fn hypotheses(&self) -> usize {
        self.goals.dims()[1]
    }

    /// Rows of every per-hypothesis tensor at `(b, k_b)`: `(goal, mu, log_sigma, proxy)`.
    pub fn select(&self, k: &[usize]) -> Result<Selected> {
        let (b, kk) = (self.batch(), self.hypotheses());
        ensure!(k.len() == b, "one selection per batch row required");
        let idx: Vec<u32> = k.iter().enumerate().map(|(i, &ki)| (i * kk + ki) as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.goals.device())?;
        let pick = |t: &Tensor| -> Result<Tensor> {
            let mut dims = t.dims().to_vec();
            let rest: Vec<usize> = dims.split_off(2);
            let mut flat = vec![b * kk];
            flat.extend(&rest);
            Ok(t.reshape(flat.as_slice())?.index_select(&idx, 0)?)
        };
        Ok(Selected {
            goal: pick(&self.goals)?,
            mu: pick(&self.mu)?,
            log_sigma: pick(&self.log_sigma)?,
            proxy: pick(&self.proxy)?,
        })
    }
}

/// One hypothesis per target, leading dim `B`.
#[derive(Clone, Debug)]
pub struct Selected {
    pub goal: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub proxy: Tensor,
}

/// Per-dimension KL of `N(mu, exp(log_sigma)^2)` from the standard normal.
pub fn kl_standard_normal(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let var = (log_sigma * 2.0)?.exp()?;
    let inner = ((mu.sqr()? + var)? - 1.0)?;
    Ok(((inner - (log_sigma * 2.0)?)? * 0.5)?)
}

/// Host closed form of the same per-dimension KL.
pub fn kl_standard_normal_scalar(mu: f64, log_sigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * log_sigma).exp() - 1.0 - 2.0 * log_sigma)
}

/// Accuracy (sum of squared errors) and floored complexity, each `[B]`.
///
/// `proxy`, `gt`: `[B, T, 2]`; `mu`, `log_sigma`: `[B, d_z]`.
pub fn individual_free_energy(
    proxy: &Tensor,
    gt: &Tensor,
    mu: &Tensor,
    log_sigma: &Tensor,
    lambda_kl: f64,
    lambda_fb: f64,
) -> Result<(Tensor, Tensor)> {
    ensure!(
        proxy.dims() == gt.dims(),
        "proxy {:?} and truth {:?} differ in shape",
        proxy.dims(),
        gt.dims()
    );
    let accuracy = (proxy - gt)?.sqr()?.sum((1, 2))?;
    let kl = kl_standard_normal(mu, log_sigma)?.maximum(lambda_fb)?;
    let complexity = (kl.sum(1)? * lambda_kl)?;
    Ok((accuracy, complexity))
}

/// Index of the goal closest to `endpoint`; ties go to the lowest index.
pub fn wta_select(goals: &[Point], endpoint: Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, g) in goals.iter().enumerate() {
        let d = (g[0] - endpoint[0]).hypot(g[1] - endpoint[1]);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Winner-take-all index for every batch row of `goals` `[B, K, 2]`.
pub fn wta_batch(goals: &Tensor, endpoints: &[Point]) -> Result<Vec<usize>> {
    let (b, k, _) = goals.dims3()?;
    ensure!(endpoints.len() == b, "one endpoint per batch row required");
    let g = nn::to_f64(goals)?;
    Ok((0..b)
        .map(|i| {
            let row: Vec<Point> = (0..k).map(|j| [g[(i * k + j) * 2], g[(i * k + j) * 2 + 1]]).collect();
            wta_select(&row, endpoints[i])
        })
        .collect())
}

fn safe_norm(diff: &Tensor) -> Result<Tensor> {
    Ok(diff.sqr()?.sum(D::Minus1)?.maximum(DIST2_FLOOR)?.sqrt()?)
}

/// Hinge-squared margin penalty over ordered goal pairs, averaged over the batch.
pub fn diversity_loss(goals: &Tensor, margin: f64) -> Result<Tensor> {
    let (b, k, _) = goals.dims3()?;
    if k < 2 {
        return Ok(Tensor::zeros((), goals.dtype(), goals.device())?);
    }
    let diff = goals.unsqueeze(2)?.broadcast_sub(&goals.unsqueeze(1)?)?;
    let dist = safe_norm(&diff)?;
    let hinge = (dist.neg()? + margin)?.relu()?.sqr()?;
    let off_diag: Vec<f64> = (0..k * k).map(|i| if i / k == i % k { 0.0 } else { 1.0 }).collect();
    let mask = nn::tensor(off_diag, &[k, k], goals.dtype(), goals.device())?;
    let per_row = hinge.broadcast_mul(&mask)?.sum((1, 2))?;
    Ok((per_row.sum_all()? / (b * k * (k - 1)) as f64)?)
}

/// Mean over rows of `-log(pi[k*] + eps)`.
pub fn classification_loss(pi: &Tensor, k_star: &[usize]) -> Result<Tensor> {
    let (b, _) = pi.dims2()?;
    ensure!(k_star.len() == b, "one label per batch row required");
    let idx: Vec<u32> = k_star.iter().map(|&k| k as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), pi.device())?;
    let p = pi.gather(&idx, 1)?;
    Ok(((p + CLS_EPS)?.log()?.neg()?.sum_all()? / b as f64)?)
}

fn edge_index(edges: &[(usize, usize)], device: &candle_core::Device) -> Result<(Tensor, Tensor)> {
    let a: Vec<u32> = edges.iter().map(|e| e.0 as u32).collect();
    let b: Vec<u32> = edges.iter().map(|e| e.1 as u32).collect();
    Ok((Tensor::new(a.as_slice(), device)?, Tensor::new(b.as_slice(), device)?))
}

/// Symmetric diagonal-Gaussian KL over `edges`, normalized by `2|E|`.
///
/// `mu`, `log_sigma`: `[N, d_z]`, one posterior per agent.
pub fn social_consistency_loss(mu: &Tensor, log_sigma: &Tensor, edges: &[(usize, usize)]) -> Result<Tensor> {
    if edges.is_empty() {
        return Ok(Tensor::zeros((), mu.dtype(), mu.device())?);
    }
    let (ia, ib) = edge_index(edges, mu.device())?;
    let (mu_a, mu_b) = (mu.index_select(&ia, 0)?, mu.index_select(&ib, 0)?);
    let var_a = (log_sigma.index_select(&ia, 0)? * 2.0)?.exp()?;
    let var_b = (log_sigma.index_select(&ib, 0)? * 2.0)?.exp()?;
    let d2 = (mu_a - mu_b)?.sqr()?;
    // KL(a||b) + KL(b||a): the log terms cancel.
    let ab = ((&var_a + &d2)? / (&var_b * 2.0)?)?;
    let ba = ((&var_b + &d2)? / (&var_a * 2.0)?)?;
    let sym = ((ab + ba)? - 1.0)?;
    Ok((sym.sum_all()? / (2 * edges.len()) as f64)?)
}

/// Mean over `edges` of `ReLU(d_min - min_t ||p_a,t - p_b,t||)^2`.
///
/// `proxies`: `[N, T, 2]` in a common (world) frame.
pub fn collision_loss(proxies: &Tensor, edges: &[(usize, usize)], d_min: f64) -> Result<Tensor> {
    if edges.is_empty() {
        return Ok(Tensor::zeros((), proxies.dtype(), proxies.device())?);
    }
    let (ia, ib) = edge_index(edges, proxies.device())?;
    let diff = (proxies.index_select(&ia, 0)? - proxies.index_select(&ib, 0)?)?;
    let closest = safe_norm(&diff)?.min(1)?;
    let pen = (closest.neg()? + d_min)?.relu()?.sqr()?;
    Ok((pen.sum_all()? / edges.len() as f64)?)
}

/// Scalar values of the objective after one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean individual free energy (accuracy plus complexity).
    pub f_ind: f64,
    /// Mean complexity part of `f_ind`.
    pub complexity: f64,
    pub l_cls: f64,
    pub l_div: f64,
    pub l_cons: f64,
    pub l_coll: f64,
    pub total: f64,
    pub k_star: Vec<usize>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.f_ind, self.l_cls, self.l_div, self.l_cons, self.l_coll, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `f_ind=.. l_cls=.. l_div=.. l_cons=.. l_coll=.. total=..`
    pub fn log_fields(&self) -> String {
        format!(
            "f_ind={:.6} l_cls={:.6} l_div={:.6} l_cons={:.6} l_coll={:.6} total={:.6}",
            self.f_ind, self.l_cls, self.l_div, self.l_cons, self.l_coll, self.total
        )
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.log_fields())
    }
}

/// Differentiable total plus its logged breakdown.
pub struct Objective {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Ground truth for a batch, in the same target-centric frame as the heads.
pub struct Targets<'a> {
    /// `[B, T, 2]`
    pub future: &'a Tensor,
    pub endpoints: &'a [Point],
    /// World position of each target at t = 0.
    pub origins: &'a [Point],
    /// Pairs of batch rows that are neighbors.
    pub edges: &'a [(usize, usize)],
}

/// Total free-energy objective over a batch.
pub fn total_objective(
    out: &BeliefOutput,
    targets: &Targets<'_>,
    w: &LossWeights,
    terms: ObjectiveTerms,
) -> Result<Objective> {
    let b = out.batch();
    ensure!(
        targets.endpoints.len() == b && targets.origins.len() == b,
        "targets do not match batch size {b}"
    );
    let k_star = wta_batch(&out.goals, targets.endpoints)?;
    let sel = out.select(&k_star)?;
    let zero = Tensor::zeros((), out.goals.dtype(), out.goals.device())?;

    let (accuracy, complexity) =
        individual_free_energy(&sel.proxy, targets.future, &sel.mu, &sel.log_sigma, w.kl, w.free_bits)?;
    let f_ind = ((accuracy + &complexity)?.sum_all()? / b as f64)?;
    let complexity = (complexity.sum_all()? / b as f64)?;
    let l_cls = classification_loss(&out.pi, &k_star)?;
    let l_div = diversity_loss(&out.goals, w.margin)?;
    let (l_cons, l_coll) = if targets.edges.is_empty() {
        (zero.clone(), zero.clone())
    } else {
        let origins: Vec<f64> = targets.origins.iter().flat_map(|p| [p[0], p[1]]).collect();
        let origins = nn::tensor(origins, &[b, 1, 2], out.goals.dtype(), out.goals.device())?;
        let world = sel.proxy.broadcast_add(&origins)?;
        (
            social_consistency_loss(&sel.mu, &sel.log_sigma, targets.edges)?,
            collision_loss(&world, targets.edges, w.d_min)?,
        )
    };

    let mut total = (&l_div * w.div)?;
    if terms.individual {
        total = (total + &f_ind)?;
    }
    if terms.goal_supervision {
        total = (total + (&l_cls * w.cls)?)?;
    }
    if terms.social {
        total = ((total + (&l_cons * w.cons)?)? + (&l_coll * w.coll)?)?;
    }
    let breakdown = LossBreakdown {
        f_ind: nn::scalar(&f_ind)?,
        complexity: nn::scalar(&complexity)?,
        l_cls: nn::scalar(&l_cls)?,
        l_div: nn::scalar(&l_div)?,
        l_cons: nn::scalar(&l_cons)?,
        l_coll: nn::scalar(&l_coll)?,
        total: nn::scalar(&total)?,
        k_star,
    };
    Ok(Objective { total, breakdown })
}

/// Host copy of a belief output for one batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypotheses {
    pub goals: Vec<Point>,
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub proxies: Vec<Vec<Point>>,
}

impl BeliefOutput {
    pub fn to_host(&self) -> Result<Vec<Hypotheses>> {
        let (b, k) = (self.batch(), self.hypotheses());
        let t = self.proxy.dims()[2];
        let dz = self.mu.dims()[2];
        let goals = nn::to_f64(&self.goals)?;
        let pi = nn::to_f64(&self.pi)?;
        let mu = nn::to_f64(&self.mu)?;
        let proxy = nn::to_f64(&self.proxy)?;
        Ok((0..b)
            .map(|i| Hypotheses {
                goals: (0..k)
                    .map(|j| [goals[(i * k + j) * 2], goals[(i * k + j) * 2 + 1]])
                    .collect(),
                pi: pi[i * k..(i + 1) * k].to_vec(),
                mu: (0..k)
                    .map(|j| mu[(i * k + j) * dz..(i * k + j + 1) * dz].to_vec())
                    .collect(),
                proxies: (0..k)
                    .map(|j| {
                        (0..t)
                            .map(|s| {
                                let at = ((i * k + j) * t + s) * 2;
                                [proxy[at], proxy[at + 1]]
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect())
    }
}

/// Convenience for tests and tools: an `[n, m]` or higher tensor from nested host data.
pub fn host_tensor(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    nn::tensor(data, shape, dtype, &candle_core::Device::Cpu)
}
