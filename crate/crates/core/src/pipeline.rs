//! Data preparation, two-stage training and K-hypothesis inference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief::{self, BeliefHeads, BeliefOutput, Targets};
use crate::checkpoint::{Checkpoint, ParamMap, Stage};
use crate::config::{DiffusionTrainConfig, ExperimentConfig};
use crate::dataio::{
    build_local_observation, parse_scene, residual_stats, window_scene, LocalObservation, Manifest, Point,
    ResidualStats, Trajectory, T_FUT, T_OBS,
};
use crate::diffusion::{self, Conditioned, Denoiser, NoiseSchedule};
use crate::encoder::{Encoder, GraphBatch};
use crate::error::{ensure, Error, Result};
use crate::metrics::{self, AgentResult, EvalReport};
use crate::nn::{self, ParamStore};

/// Floating-point type of trained models; checkpoints store `f32`.
pub const MODEL_DTYPE: DType = DType::F32;

/// One target agent's local observation, tagged with its scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedSample {
    pub scene: String,
    pub obs: LocalObservation,
}

impl PreparedSample {
    fn group(&self) -> (&str, i64) {
        (&self.scene, self.obs.ego.frame)
    }
}

/// Windows a scene file and restricts every window to its local observation.
pub fn prepare_scene(name: &str, path: &Path, delta: f64) -> Result<Vec<PreparedSample>> {
    if !path.exists() {
        return Err(Error::MissingScene(format!("{name} ({})", path.display())));
    }
    let table = parse_scene(path)?;
    window_scene(&table, T_OBS, T_FUT)?
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                scene: name.to_string(),
                obs: build_local_observation(s, delta)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub samples: usize,
    pub mean_neighbors: f64,
}

/// Serialized output of the `prepare` step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedArchive {
    pub delta: f64,
    pub heldout: String,
    pub scenes: BTreeMap<String, SceneSummary>,
    pub samples: Vec<PreparedSample>,
}

impl PreparedArchive {
    pub fn build(manifest: &Manifest, heldout: &str, delta: f64) -> Result<PreparedArchive> {
        manifest.scene_path(heldout)?;
        let mut scenes = BTreeMap::new();
        let mut samples = Vec::new();
        for name in manifest.scenes.keys() {
            let s = prepare_scene(name, manifest.scene_path(name)?, delta)?;
            let mean_neighbors = if s.is_empty() {
                0.0
            } else {
                s.iter().map(|p| p.obs.neighbors.len()).sum::<usize>() as f64 / s.len() as f64
            };
            scenes.insert(
                name.clone(),
                SceneSummary {
                    samples: s.len(),
                    mean_neighbors,
                },
            );
            samples.extend(s);
        }
        Ok(PreparedArchive {
            delta,
            heldout: heldout.to_string(),
            scenes,
            samples,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Contract(format!("archive serialization: {e}")))
    }
}

/// Leave-one-scene-out split.
pub struct Split {
    pub heldout: String,
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

fn group_indices(samples: &[PreparedSample]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(&str, i64), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.group()).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Seeded subset of whole frame groups, truncated to at most `cap` samples.
pub fn subsample(samples: Vec<PreparedSample>, cap: Option<usize>, seed: u64) -> Vec<PreparedSample> {
    let Some(cap) = cap else { return samples };
    if samples.len() <= cap {
        return samples;
    }
    let mut groups = group_indices(&samples);
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let mut keep: Vec<usize> = groups.into_iter().flatten().take(cap).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| samples[i].clone()).collect()
}

/// Holds out `fraction` of each scene's frame groups, chosen with `seed`.
pub fn split_validation(
    samples: Vec<PreparedSample>,
    fraction: f64,
    seed: u64,
) -> (Vec<PreparedSample>, Vec<PreparedSample>) {
    if fraction <= 0.0 {
        return (samples, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
    let mut by_scene: BTreeMap<&str, Vec<Vec<usize>>> = BTreeMap::new();
    for g in group_indices(&samples) {
        by_scene.entry(samples[g[0]].scene.as_str()).or_default().push(g);
    }
    let mut val = BTreeSet::new();
    for groups in by_scene.values_mut() {
        groups.shuffle(&mut rng);
        let n = ((groups.len() as f64) * fraction).round() as usize;
        let n = n.min(groups.len().saturating_sub(1));
        val.extend(groups[..n].iter().flatten().copied());
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if val.contains(&i) {
            va.push(s);
        } else {
            tr.push(s);
        }
    }
    (tr, va)
}

/// Loads the manifest named by the config and builds the held-out split.
pub fn load_split(cfg: &ExperimentConfig) -> Result<Split> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    let manifest = Manifest::load(path)?;
    let heldout = cfg
        .data
        .heldout
        .clone()
        .or_else(|| manifest.heldout.clone())
        .ok_or_else(|| Error::Config("no held-out scene in config or manifest".into()))?;
    let (train_names, test_name) = manifest.split(&heldout)?;
    let mut train = Vec::new();
    for name in &train_names {
        train.extend(prepare_scene(name, manifest.scene_path(name)?, cfg.data.delta)?);
    }
    let test = prepare_scene(&test_name, manifest.scene_path(&test_name)?, cfg.data.delta)?;
    let train = subsample(train, cfg.data.max_train_samples, cfg.seed);
    let test = subsample(test, cfg.data.max_eval_samples, cfg.seed);
    let (train, val) = split_validation(train, cfg.data.val_fraction, cfg.seed);
    Ok(Split {
        heldout: test_name,
        train,
        val,
        test,
    })
}

/// Packs whole frame groups (split when larger than `size`) into batches.
pub fn make_batches(samples: &[PreparedSample], size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = group_indices(samples)
        .into_iter()
        .flat_map(|g| g.chunks(size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    if let Some(rng) = rng {
        groups.shuffle(rng);
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for g in groups {
        if current.len() + g.len() > size && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(g);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Row pairs that share a frame and are within each other's neighborhood.
pub fn batch_edges(rows: &[&PreparedSample]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            if rows[a].group() == rows[b].group() && rows[a].obs.graph.nodes[1..].contains(&rows[b].obs.ego.target_id) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Tensors for one training or inference batch.
pub struct Batch {
    pub graph: GraphBatch,
    /// Futures relative to each target's t = 0 position, `[B, T_FUT, 2]`.
    pub future: Tensor,
    pub endpoints: Vec<Point>,
    pub edges: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(rows: &[&PreparedSample], dtype: DType) -> Result<Batch> {
        let obs: Vec<&LocalObservation> = rows.iter().map(|r| &r.obs).collect();
        let graph = GraphBatch::from_observations(&obs, dtype, &Device::Cpu)?;
        let futures: Vec<Trajectory> = rows
            .iter()
            .map(|r| {
                let o = r.obs.ego.current();
                r.obs.ego.future.translated([-o[0], -o[1]])
            })
            .collect();
        let endpoints = futures.iter().map(|f| f.last().expect("non-empty future")).collect();
        Ok(Batch {
            future: diffusion::stack(&futures, dtype, &Device::Cpu)?,
            graph,
            endpoints,
            edges: batch_edges(rows),
        })
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            future: &self.future,
            endpoints: &self.endpoints,
            origins: &self.graph.origins,
            edges: &self.edges,
        }
    }
}

/// Encoder plus decoding heads, with their parameters.
pub struct BeliefModel {
    pub ps: ParamStore,
    pub encoder: Encoder,
    pub heads: BeliefHeads,
}

impl BeliefModel {
    pub fn new(cfg: &ExperimentConfig, dtype: DType, seed: u64) -> Result<BeliefModel> {
        let mut ps = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut ps, cfg.encoder())?;
        let heads = BeliefHeads::new(&mut ps, cfg.heads())?;
        Ok(BeliefModel { ps, encoder, heads })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<BeliefModel> {
        ensure!(ckpt.stage == Stage::Belief, "expected a belief checkpoint");
        let model = BeliefModel::new(&ckpt.config, MODEL_DTYPE, ckpt.config.seed)?;
        model.ps.import(&ckpt.params)?;
        Ok(model)
    }

    pub fn forward(&self, batch: &GraphBatch) -> Result<BeliefOutput> {
        let enc = self.encoder.forward(batch)?;
        self.heads.forward(&enc.context)
    }
}

/// Rescales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += nn::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Proxy best-of-K ADE averaged over samples.
pub fn proxy_min_ade(model: &BeliefModel, samples: &[PreparedSample], batch_size: usize) -> Result<f64> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let mut total = 0.0;
    for idx in make_batches(samples, batch_size, None) {
        let rows: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = Batch::new(&rows, model.ps.dtype())?;
        let hyps = model.forward(&batch.graph)?.to_host()?;
        let futures = diffusion::unstack(&batch.future)?;
        for (h, gt) in hyps.iter().zip(&futures) {
            let proxies: Vec<Trajectory> = h.proxies.iter().map(|p| Trajectory(p.clone())).collect();
            total += metrics::min_over_k(&proxies, gt)?.0;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Result of stage one.
pub struct BeliefRun {
    pub model: BeliefModel,
    pub checkpoint: Checkpoint,
    /// Mean total objective per epoch.
    pub epoch_totals: Vec<f64>,
    /// Mean complexity per epoch.
    pub epoch_complexity: Vec<f64>,
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
}

/// Stage one: minimizes the free-energy objective with early stopping on
/// validation proxy minADE.
pub fn train_belief(
    cfg: &ExperimentConfig,
    train: &[PreparedSample],
    val: &[PreparedSample],
    log: &mut dyn FnMut(&str),
) -> Result<BeliefRun> {
    ensure!(!train.is_empty(), "no training samples");
    let model = BeliefModel::new(cfg, MODEL_DTYPE, cfg.seed)?;
    let vars = model.ps.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.belief.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let terms = cfg.objective_terms();
    let mut step = 0usize;
    let (mut epoch_totals, mut epoch_complexity, mut val_history) = (Vec::new(), Vec::new(), Vec::new());
    let mut best = (f64::INFINITY, 0usize, model.ps.snapshot()?);
    let mut stale = 0usize;

    for epoch in 1..=cfg.belief.epochs {
        let (mut sum, mut cx, mut n) = (0.0, 0.0, 0usize);
        for idx in make_batches(train, cfg.belief.batch_size, Some(&mut rng)) {
            let rows: Vec<&PreparedSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&rows, MODEL_DTYPE)?;
            let out = model.forward(&batch.graph)?;
            let obj = belief::total_objective(&out, &batch.targets(), &cfg.loss, terms)?;
            step += 1;
            if !obj.breakdown.is_finite() {
                return Err(Error::Diverged {
                    step,
                    breakdown: obj.breakdown.log_fields(),
                });
            }
            log(&format!("step={step} {}", obj.breakdown.log_fields()));
            let mut grads = obj.total.backward()?;
            clip_gradients(&mut grads, &vars, cfg.belief.grad_clip)?;
            opt.step(&grads)?;
            sum += obj.breakdown.total * rows.len() as f64;
            cx += obj.breakdown.complexity * rows.len() as f64;
            n += rows.len();
        }
        epoch_totals.push(sum / n as f64);
        epoch_complexity.push(cx / n as f64);
        let metric = if val.is_empty() {
            sum / n as f64
        } else {
            proxy_min_ade(&model, val, cfg.belief.batch_size)?
        };
        val_history.push(metric);
        log(&format!(
            "epoch={epoch} train_total={:.6} val_proxy_min_ade={metric:.6}",
            sum / n as f64
        ));
        if metric < best.0 {
            best = (metric, epoch, model.ps.snapshot()?);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.belief.patience {
                log(&format!("early stop at epoch {epoch}, best epoch {}", best.1));
                break;
            }
        }
    }
    model.ps.restore(&best.2)?;
    let mut checkpoint = Checkpoint::new(Stage::Belief, cfg.clone(), model.ps.export()?);
    checkpoint.meta.insert("epoch".into(), best.1.to_string());
    checkpoint.meta.insert("best_val".into(), best.0.to_string());
    Ok(BeliefRun {
        model,
        checkpoint,
        epoch_totals,
        epoch_complexity,
        val_history,
        best_epoch: best.1,
    })
}

/// Warmup-then-cosine learning rate at fractional epoch `progress`.
pub fn lr_at(progress: f64, cfg: &DiffusionTrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    let total = cfg.epochs as f64;
    if progress < warm {
        return cfg.lr * progress / warm;
    }
    if total <= warm {
        return cfg.lr;
    }
    let frac = ((progress - warm) / (total - warm)).clamp(0.0, 1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `shadow = decay * shadow + (1 - decay) * live`, parameter by parameter.
pub fn ema_update(shadow: &ParamStore, live: &ParamStore, decay: f64) -> Result<()> {
    for (name, s) in shadow.named() {
        let l = live
            .get(name)
            .ok_or_else(|| Error::Contract(format!("EMA shadow has no live parameter {name}")))?;
        let next = ((s.as_tensor() * decay)? + (l.as_tensor() * (1.0 - decay))?)?;
        s.set(&next)?;
    }
    Ok(())
}

/// Live and EMA-shadow denoisers with identical structure.
pub struct DiffusionModel {
    pub ps: ParamStore,
    pub denoiser: Denoiser,
    pub shadow_ps: ParamStore,
    pub shadow: Denoiser,
}

impl DiffusionModel {
    pub fn new(cfg: &ExperimentConfig, dtype: DType, seed: u64) -> Result<DiffusionModel> {
        let mut ps = ParamStore::new(dtype, seed.wrapping_add(1));
        let denoiser = Denoiser::new(&mut ps, cfg.denoiser())?;
        let mut shadow_ps = ParamStore::new(dtype, seed.wrapping_add(1));
        let shadow = Denoiser::new(&mut shadow_ps, cfg.denoiser())?;
        Ok(DiffusionModel {
            ps,
            denoiser,
            shadow_ps,
            shadow,
        })
    }

    pub fn export(&self) -> Result<ParamMap> {
        let mut all = self.ps.export()?;
        for (k, v) in self.shadow_ps.export()? {
            all.insert(format!("ema.{k}"), v);
        }
        Ok(all)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<DiffusionModel> {
        ensure!(ckpt.stage == Stage::Diffusion, "expected a diffusion checkpoint");
        let model = DiffusionModel::new(&ckpt.config, MODEL_DTYPE, ckpt.config.seed)?;
        let live: ParamMap = ckpt
            .params
            .iter()
            .filter(|(k, _)| !k.starts_with("ema."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        model.ps.import(&live)?;
        model.shadow_ps.import(&ckpt.params_with_prefix("ema."))?;
        Ok(model)
    }
}

/// Frozen-belief conditions for one training target.
#[derive(Clone, Debug)]
pub struct ResidualExample {
    /// `[mu_z ; goal]` of the winning hypothesis.
    pub cond: Vec<f64>,
    /// Target-centric proxy of the winning hypothesis.
    pub proxy: Trajectory,
    /// Ground truth minus proxy, in meters.
    pub residual: Trajectory,
}

/// Runs the frozen belief learner once over `samples`.
pub fn residual_examples(
    model: &BeliefModel,
    samples: &[PreparedSample],
    batch_size: usize,
) -> Result<Vec<ResidualExample>> {
    let mut out = Vec::with_capacity(samples.len());
    for idx in make_batches(samples, batch_size, None) {
        let rows: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = Batch::new(&rows, model.ps.dtype())?;
        let o = model.forward(&batch.graph)?;
        let k = belief::wta_batch(&o.goals, &batch.endpoints)?;
        let sel = o.select(&k)?;
        let cond = Tensor::cat(&[&sel.mu, &sel.goal], 1)?.detach();
        let width = cond.dim(1)?;
        let cond = nn::to_f64(&cond)?;
        let proxies = diffusion::unstack(&sel.proxy.detach())?;
        let futures = diffusion::unstack(&batch.future)?;
        for (i, (p, f)) in proxies.into_iter().zip(futures).enumerate() {
            let residual = Trajectory(
                f.points()
                    .iter()
                    .zip(p.points())
                    .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
                    .collect(),
            );
            out.push(ResidualExample {
                cond: cond[i * width..(i + 1) * width].to_vec(),
                proxy: p,
                residual,
            });
        }
    }
    Ok(out)
}

pub fn schedule_of(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    diffusion::make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
}

/// Result of stage two.
pub struct DiffusionRun {
    pub model: DiffusionModel,
    pub stats: ResidualStats,
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

/// Stage two: trains the denoiser on frozen-belief residuals of the winning hypothesis.
pub fn train_diffusion(
    cfg: &ExperimentConfig,
    belief_model: &BeliefModel,
    train: &[PreparedSample],
    log: &mut dyn FnMut(&str),
) -> Result<DiffusionRun> {
    ensure!(!train.is_empty(), "no training samples");
    let frozen_before = belief_model.ps.export()?;
    let schedule = schedule_of(cfg)?;
    let examples = residual_examples(belief_model, train, cfg.belief.batch_size)?;
    let residuals: Vec<Trajectory> = examples.iter().map(|e| e.residual.clone()).collect();
    let stats = residual_stats(&residuals)?;

    let model = DiffusionModel::new(cfg, MODEL_DTYPE, cfg.seed)?;
    let vars = model.ps.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: lr_at(0.0, &cfg.diffusion),
            weight_decay: cfg.diffusion.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff);
    let dc = &cfg.diffusion;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let per_epoch = examples.len().div_ceil(dc.batch_size);
    let mut step = 0usize;
    let mut epoch_losses = Vec::new();

    for epoch in 0..dc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(dc.batch_size).enumerate() {
            let b = chunk.len();
            let ex: Vec<&ResidualExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let width = ex[0].cond.len();
            let cond = nn::tensor(
                ex.iter().flat_map(|e| e.cond.clone()).collect(),
                &[b, width],
                MODEL_DTYPE,
                &Device::Cpu,
            )?;
            let proxies: Vec<Trajectory> = ex.iter().map(|e| e.proxy.clone()).collect();
            let proxy = diffusion::stack(&proxies, MODEL_DTYPE, &Device::Cpu)?;
            let x0: Vec<Trajectory> = ex
                .iter()
                .map(|e| diffusion::normalize_residual(&e.residual, &stats))
                .collect();
            let x0 = diffusion::stack(&x0, MODEL_DTYPE, &Device::Cpu)?;
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noise: Vec<f64> = (0..b * T_FUT * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = nn::tensor(noise, &[b, T_FUT, 2], MODEL_DTYPE, &Device::Cpu)?;
            let x_t = diffusion::forward_sample(&x0, &t, &eps, &schedule)?;
            let eps_hat = model.denoiser.predict_epsilon(&x_t, &t, &cond, &proxy)?;
            let loss = diffusion::min_snr_loss(&eps_hat, &eps, &t, &schedule)?;
            let value = nn::scalar(&loss)?;
            step += 1;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    breakdown: format!("min_snr={value}"),
                });
            }
            let lr = lr_at(epoch as f64 + (bi + 1) as f64 / per_epoch as f64, dc);
            opt.set_learning_rate(lr);
            let mut grads = loss.backward()?;
            clip_gradients(&mut grads, &vars, dc.grad_clip)?;
            opt.step(&grads)?;
            ema_update(&model.shadow_ps, &model.ps, dc.ema_decay)?;
            log(&format!("step={step} min_snr={value:.6} lr={lr:.3e}"));
            sum += value * b as f64;
        }
        let mean = sum / examples.len() as f64;
        epoch_losses.push(mean);
        log(&format!("epoch={} train_min_snr={mean:.6}", epoch + 1));
    }

    ensure!(
        belief_model.ps.export()? == frozen_before,
        "belief parameters changed during stage two"
    );
    let mut checkpoint = Checkpoint::new(Stage::Diffusion, cfg.clone(), model.export()?);
    checkpoint.meta.insert("epoch".into(), dc.epochs.to_string());
    insert_stats(&mut checkpoint, &stats);
    Ok(DiffusionRun {
        model,
        stats,
        checkpoint,
        epoch_losses,
    })
}

fn insert_stats(ckpt: &mut Checkpoint, stats: &ResidualStats) {
    for (k, v) in [
        ("residual_mu_x", stats.mu[0]),
        ("residual_mu_y", stats.mu[1]),
        ("residual_sigma_x", stats.sigma[0]),
        ("residual_sigma_y", stats.sigma[1]),
    ] {
        // `{:e}` on f64 round-trips exactly through `parse`
        ckpt.meta.insert(k.into(), format!("{v:e}"));
    }
}

fn read_stats(ckpt: &Checkpoint) -> Result<ResidualStats> {
    Ok(ResidualStats {
        mu: [ckpt.meta_f64("residual_mu_x")?, ckpt.meta_f64("residual_mu_y")?],
        sigma: [ckpt.meta_f64("residual_sigma_x")?, ckpt.meta_f64("residual_sigma_y")?],
    })
}

/// K hypotheses for one target, in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scene: String,
    pub target_id: i64,
    pub frame: i64,
    pub pi: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub proxies: Vec<Trajectory>,
}

/// Trajectory of the most probable hypothesis; ties go to the lowest index.
pub fn select_deterministic(p: &PredictionSet) -> Result<&Trajectory> {
    ensure!(
        !p.trajectories.is_empty() && p.pi.len() == p.trajectories.len(),
        "empty prediction set"
    );
    Ok(&p.trajectories[most_probable(&p.pi)])
}

fn most_probable(pi: &[f64]) -> usize {
    let mut best = 0;
    for (k, w) in pi.iter().enumerate() {
        if *w > pi[best] {
            best = k;
        }
    }
    best
}

/// Per-agent seed for the initial diffusion noise.
pub fn agent_seed(seed: u64, frame: i64, target_id: i64) -> u64 {
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (target_id as u64).rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frozen belief learner plus (optionally) the EMA denoiser.
pub struct Predictor {
    pub cfg: ExperimentConfig,
    pub belief: BeliefModel,
    pub denoiser: Option<(ParamStore, Denoiser)>,
    pub stats: ResidualStats,
    pub schedule: NoiseSchedule,
}

impl Predictor {
    /// Without a diffusion checkpoint, or with the diffusion ablation, the
    /// proxies are returned unrefined.
    pub fn from_checkpoints(belief_ckpt: &Checkpoint, diffusion_ckpt: Option<&Checkpoint>) -> Result<Predictor> {
        let belief = BeliefModel::from_checkpoint(belief_ckpt)?;
        let cfg = belief_ckpt.config.clone();
        let (denoiser, stats) = match diffusion_ckpt {
            Some(d) if cfg.ablation.diffusion && d.config.ablation.diffusion => {
                d.check_compatible(&cfg)?;
                let mut ps = ParamStore::new(MODEL_DTYPE, d.config.seed);
                let den = Denoiser::new(&mut ps, d.config.denoiser())?;
                ps.import(&d.params_with_prefix("ema."))?;
                (Some((ps, den)), read_stats(d)?)
            }
            _ => (None, ResidualStats::identity()),
        };
        let schedule = match diffusion_ckpt {
            Some(d) => schedule_of(&d.config)?,
            None => schedule_of(&cfg)?,
        };
        let cfg = match diffusion_ckpt {
            Some(d) => {
                let mut c = cfg;
                c.diffusion = d.config.diffusion.clone();
                c.ablation.token_condition = d.config.ablation.token_condition;
                c
            }
            None => cfg,
        };
        Ok(Predictor {
            cfg,
            belief,
            denoiser,
            stats,
            schedule,
        })
    }

    /// Builds a predictor from in-memory stage results.
    pub fn from_runs(belief: &BeliefRun, diffusion: Option<&DiffusionRun>) -> Result<Predictor> {
        Predictor::from_checkpoints(&belief.checkpoint, diffusion.map(|d| &d.checkpoint))
    }

    pub fn num_params(&self) -> usize {
        self.belief.ps.num_params() + self.denoiser.as_ref().map_or(0, |(ps, _)| ps.num_params())
    }

    /// DDIM-samples normalized residuals for rows of `cond` `[N, d_z + 2]` and
    /// `proxy` `[N, T, 2]` from `noise` `[N, T, 2]`, returning meters.
    pub fn sample_residuals(&self, cond: &Tensor, proxy: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (_, den) = self
            .denoiser
            .as_ref()
            .ok_or_else(|| Error::Contract("no denoiser loaded".into()))?;
        let model = Conditioned {
            denoiser: den,
            cond,
            proxy,
        };
        let x0 = diffusion::ddim_sample(&model, noise, &self.schedule, self.cfg.diffusion.ddim_steps)?;
        diffusion::denormalize_tensor(&x0, &self.stats)
    }

    pub fn predict(&self, rows: &[&PreparedSample], seed: u64) -> Result<Vec<PredictionSet>> {
        ensure!(!rows.is_empty(), "nothing to predict");
        let obs: Vec<&LocalObservation> = rows.iter().map(|r| &r.obs).collect();
        let graph = GraphBatch::from_observations(&obs, MODEL_DTYPE, &Device::Cpu)?;
        let out = self.belief.forward(&graph)?;
        let (b, k) = (out.batch(), out.hypotheses());
        let hyps = out.to_host()?;
        let proxy_flat = out.proxy.reshape((b * k, T_FUT, 2))?;
        let refined = match &self.denoiser {
            Some(_) => {
                let cond = Tensor::cat(&[&out.mu, &out.goals], 2)?;
                let width = cond.dim(2)?;
                let cond = cond.reshape((b * k, width))?;
                let ks: Vec<usize> = (0..k).collect();
                let noise = rows
                    .iter()
                    .map(|r| {
                        diffusion::initial_noise(
                            agent_seed(seed, r.obs.ego.frame, r.obs.ego.target_id),
                            &ks,
                            T_FUT,
                            MODEL_DTYPE,
                            &Device::Cpu,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let noise = Tensor::cat(&noise, 0)?;
                let residual = self.sample_residuals(&cond, &proxy_flat, &noise)?;
                Some(diffusion::unstack(&(proxy_flat + residual)?)?)
            }
            None => None,
        };
        Ok(rows
            .iter()
            .zip(hyps)
            .enumerate()
            .map(|(i, (r, h))| {
                let o = graph.origins[i];
                let world = |t: &Trajectory| t.translated(o);
                let proxies: Vec<Trajectory> = h.proxies.iter().map(|p| world(&Trajectory(p.clone()))).collect();
                let trajectories = match &refined {
                    Some(all) => all[i * k..(i + 1) * k].iter().map(world).collect(),
                    None => proxies.clone(),
                };
                PredictionSet {
                    scene: r.scene.clone(),
                    target_id: r.obs.ego.target_id,
                    frame: r.obs.ego.frame,
                    pi: h.pi,
                    trajectories,
                    proxies,
                }
            })
            .collect())
    }

    /// Predictions for every sample, batched by frame groups.
    pub fn predict_all(&self, samples: &[PreparedSample], seed: u64, batch_size: usize) -> Result<Vec<PredictionSet>> {
        let mut by_index: Vec<Option<PredictionSet>> = vec![None; samples.len()];
        for idx in make_batches(samples, batch_size, None) {
            let rows: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
            for (i, p) in idx.into_iter().zip(self.predict(&rows, seed)?) {
                by_index[i] = Some(p);
            }
        }
        Ok(by_index
            .into_iter()
            .map(|p| p.expect("every sample predicted"))
            .collect())
    }
}

/// Which trajectories to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Refinement {
    /// Final refined trajectories.
    Refined,
    /// Belief proxies only.
    Proxy,
}

/// Best-of-K and deterministic metrics for predictions against ground truth.
pub fn score(samples: &[PreparedSample], preds: &[PredictionSet], which: Refinement) -> Result<Vec<AgentResult>> {
    ensure!(samples.len() == preds.len(), "one prediction set per sample required");
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let set = match which {
                Refinement::Refined => &p.trajectories,
                Refinement::Proxy => &p.proxies,
            };
            let gt = &s.obs.ego.future;
            let (min_ade, min_fde) = metrics::min_over_k(set, gt)?;
            let pick = &set[most_probable(&p.pi)];
            Ok(AgentResult {
                scene: s.scene.clone(),
                min_ade,
                min_fde,
                ade_1: metrics::ade(pick, gt)?,
                fde_1: metrics::fde(pick, gt)?,
            })
        })
        .collect()
}

/// Evaluation over several seeds, averaged; latency measured on one batch.
pub fn evaluate(
    predictor: &Predictor,
    samples: &[PreparedSample],
    seeds: &[u64],
    batch_size: usize,
    latency: bool,
) -> Result<EvalReport> {
    ensure!(
        !samples.is_empty() && !seeds.is_empty(),
        "evaluation needs samples and seeds"
    );
    let k = predictor.cfg.model.hypotheses;
    let mut runs = Vec::new();
    for &seed in seeds {
        let preds = predictor.predict_all(samples, seed, batch_size)?;
        runs.push(EvalReport::from_results(
            &score(samples, &preds, Refinement::Refined)?,
            k,
        ));
    }
    let mut report = EvalReport::average(&runs);
    report.params_m = predictor.num_params() as f64 / 1e6;
    if latency {
        let first = &make_batches(samples, batch_size, None)[0];
        let rows: Vec<&PreparedSample> = first.iter().map(|&i| &samples[i]).collect();
        let l = metrics::measure_latency(rows.len(), || predictor.predict(&rows, seeds[0]).map(|_| ()))?;
        report.latency_ms_per_agent = l.median_ms_per_agent;
        report.latency_variance = l.variance;
    }
    Ok(report)
}

/// Constant-velocity baseline report (deterministic: min over K equals the single guess).
pub fn constant_velocity_report(samples: &[PreparedSample]) -> Result<EvalReport> {
    let results = samples
        .iter()
        .map(|s| {
            let cv = metrics::constant_velocity(&s.obs.ego.history, T_FUT);
            let gt = &s.obs.ego.future;
            let (a, f) = (metrics::ade(&cv, gt)?, metrics::fde(&cv, gt)?);
            Ok(AgentResult {
                scene: s.scene.clone(),
                min_ade: a,
                min_fde: f,
                ade_1: a,
                fde_1: f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_results(&results, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DiffusionTrainConfig {
        ExperimentConfig::default().diffusion
    }

    #[test]
    fn warmup_reaches_peak_then_decays() {
        let c = cfg();
        assert_eq!(lr_at(0.0, &c), 0.0);
        assert!((lr_at(2.5, &c) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(5.0, &c), 1e-4);
        let mut prev = lr_at(5.0, &c);
        for e in 6..=150 {
            let lr = lr_at(e as f64, &c);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(lr_at(150.0, &c) < 1e-12);
    }

    #[test]
    fn ema_single_update() {
        let mut live = ParamStore::new(DType::F64, 0);
        live.constant("p", &[1], 2.0).unwrap();
        let mut shadow = ParamStore::new(DType::F64, 0);
        shadow.constant("p", &[1], 1.0).unwrap();
        ema_update(&shadow, &live, 0.999).unwrap();
        let v = nn::to_f64(shadow.get("p").unwrap().as_tensor()).unwrap()[0];
        assert!((v - (0.999 * 1.0 + 0.001 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_pick() {
        let t = |x: f64| Trajectory(vec![[x, 0.0]]);
        let mut p = PredictionSet {
            scene: "s".into(),
            target_id: 1,
            frame: 0,
            pi: vec![0.05; 20],
            trajectories: (0..20).map(|k| t(k as f64)).collect(),
            proxies: vec![],
        };
        assert_eq!(select_deterministic(&p).unwrap(), &t(0.0));
        p.pi = (0..20).map(|k| if k == 7 { 1.0 } else { 0.0 }).collect();
        assert_eq!(select_deterministic(&p).unwrap(), &t(7.0));
    }

    #[test]
    fn agent_seeds_differ() {
        assert_ne!(agent_seed(0, 10, 1), agent_seed(0, 10, 2));
        assert_ne!(agent_seed(0, 10, 1), agent_seed(0, 20, 1));
        assert_eq!(agent_seed(3, 10, 1), agent_seed(3, 10, 1));
    }
}
