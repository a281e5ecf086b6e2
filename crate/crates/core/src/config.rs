//! Flat `key=value` experiment configuration with dotted namespaces.
//!
//! Every key has a default; unknown keys are rejected. `#` starts a comment.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::belief::{BeliefConfig, LossWeights, ObjectiveTerms};
use crate::dataio::{DEFAULT_DELTA, T_FUT, T_OBS};
use crate::diffusion::DenoiserConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Overrides the manifest's held-out scene.
    pub heldout: Option<String>,
    pub delta: f64,
    pub max_train_samples: Option<usize>,
    pub max_eval_samples: Option<usize>,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub gat_out: usize,
    pub latent: usize,
    pub heads: usize,
    pub hypotheses: usize,
    pub temporal_layers: usize,
    pub gat_layers: usize,
    pub head_hidden: usize,
    pub denoiser_width: usize,
    pub denoiser_layers: usize,
    pub denoiser_ffn: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeliefTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub individual_fe: bool,
    pub goal_supervision: bool,
    pub social_fe: bool,
    pub token_condition: bool,
    pub diffusion: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub belief: BeliefTrainConfig,
    pub diffusion: DiffusionTrainConfig,
    pub ablation: AblationConfig,
    pub eval_seeds: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig {
                manifest: None,
                heldout: None,
                delta: DEFAULT_DELTA,
                max_train_samples: None,
                max_eval_samples: None,
                val_fraction: 0.1,
            },
            model: ModelConfig {
                hidden: 128,
                gat_out: 64,
                latent: 128,
                heads: 8,
                hypotheses: 20,
                temporal_layers: 2,
                gat_layers: 2,
                head_hidden: 128,
                denoiser_width: 128,
                denoiser_layers: 4,
                denoiser_ffn: 256,
            },
            loss: LossWeights::default(),
            belief: BeliefTrainConfig {
                lr: 1e-3,
                epochs: 150,
                patience: 15,
                batch_size: 64,
                grad_clip: 1.0,
            },
            diffusion: DiffusionTrainConfig {
                lr: 1e-4,
                weight_decay: 0.01,
                epochs: 150,
                warmup_epochs: 5,
                ema_decay: 0.999,
                batch_size: 64,
                grad_clip: 1.0,
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
                ddim_steps: 50,
            },
            ablation: AblationConfig {
                individual_fe: true,
                goal_supervision: true,
                social_fe: true,
                token_condition: true,
                diffusion: true,
            },
            eval_seeds: 3,
            seed: 0,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}={value}: expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::parse(&text)?;
        // relative manifest paths are taken relative to the config file
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "data.manifest" => self.data.manifest = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "data.heldout" => self.data.heldout = (!v.is_empty() && v != "none").then(|| v.to_string()),
            "data.delta" => self.data.delta = num(key, v)?,
            "data.max_train_samples" => self.data.max_train_samples = optional(key, v)?,
            "data.max_eval_samples" => self.data.max_eval_samples = optional(key, v)?,
            "data.val_fraction" => self.data.val_fraction = num(key, v)?,
            "model.hidden" => self.model.hidden = num(key, v)?,
            "model.gat_out" => self.model.gat_out = num(key, v)?,
            "model.latent" => self.model.latent = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.hypotheses" => self.model.hypotheses = num(key, v)?,
            "model.temporal_layers" => self.model.temporal_layers = num(key, v)?,
            "model.gat_layers" => self.model.gat_layers = num(key, v)?,
            "model.head_hidden" => self.model.head_hidden = num(key, v)?,
            "model.denoiser_width" => self.model.denoiser_width = num(key, v)?,
            "model.denoiser_layers" => self.model.denoiser_layers = num(key, v)?,
            "model.denoiser_ffn" => self.model.denoiser_ffn = num(key, v)?,
            "loss.lambda_kl" => self.loss.kl = num(key, v)?,
            "loss.lambda_fb" => self.loss.free_bits = num(key, v)?,
            "loss.lambda_cls" => self.loss.cls = num(key, v)?,
            "loss.lambda_div" => self.loss.div = num(key, v)?,
            "loss.lambda_cons" => self.loss.cons = num(key, v)?,
            "loss.lambda_coll" => self.loss.coll = num(key, v)?,
            "loss.margin" => self.loss.margin = num(key, v)?,
            "loss.d_min" => self.loss.d_min = num(key, v)?,
            "belief.lr" => self.belief.lr = num(key, v)?,
            "belief.epochs" => self.belief.epochs = num(key, v)?,
            "belief.patience" => self.belief.patience = num(key, v)?,
            "belief.batch_size" => self.belief.batch_size = num(key, v)?,
            "belief.grad_clip" => self.belief.grad_clip = num(key, v)?,
            "diffusion.lr" => self.diffusion.lr = num(key, v)?,
            "diffusion.weight_decay" => self.diffusion.weight_decay = num(key, v)?,
            "diffusion.epochs" => self.diffusion.epochs = num(key, v)?,
            "diffusion.warmup_epochs" => self.diffusion.warmup_epochs = num(key, v)?,
            "diffusion.ema_decay" => self.diffusion.ema_decay = num(key, v)?,
            "diffusion.batch_size" => self.diffusion.batch_size = num(key, v)?,
            "diffusion.grad_clip" => self.diffusion.grad_clip = num(key, v)?,
            "diffusion.steps" => self.diffusion.steps = num(key, v)?,
            "diffusion.beta_start" => self.diffusion.beta_start = num(key, v)?,
            "diffusion.beta_end" => self.diffusion.beta_end = num(key, v)?,
            "diffusion.ddim_steps" => self.diffusion.ddim_steps = num(key, v)?,
            "ablation.individual_fe" => self.ablation.individual_fe = flag(key, v)?,
            "ablation.goal_supervision" => self.ablation.goal_supervision = flag(key, v)?,
            "ablation.social_fe" => self.ablation.social_fe = flag(key, v)?,
            "ablation.token_condition" => self.ablation.token_condition = flag(key, v)?,
            "ablation.diffusion" => self.ablation.diffusion = flag(key, v)?,
            "eval.seeds" => self.eval_seeds = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, m, l, b, f, a) = (
            &self.data,
            &self.model,
            &self.loss,
            &self.belief,
            &self.diffusion,
            &self.ablation,
        );
        vec![
            (
                "data.manifest",
                d.manifest.as_ref().map_or("none".into(), |p| p.display().to_string()),
            ),
            ("data.heldout", show(&d.heldout)),
            ("data.delta", d.delta.to_string()),
            ("data.max_train_samples", show(&d.max_train_samples)),
            ("data.max_eval_samples", show(&d.max_eval_samples)),
            ("data.val_fraction", d.val_fraction.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.gat_out", m.gat_out.to_string()),
            ("model.latent", m.latent.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.hypotheses", m.hypotheses.to_string()),
            ("model.temporal_layers", m.temporal_layers.to_string()),
            ("model.gat_layers", m.gat_layers.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.denoiser_width", m.denoiser_width.to_string()),
            ("model.denoiser_layers", m.denoiser_layers.to_string()),
            ("model.denoiser_ffn", m.denoiser_ffn.to_string()),
            ("loss.lambda_kl", l.kl.to_string()),
            ("loss.lambda_fb", l.free_bits.to_string()),
            ("loss.lambda_cls", l.cls.to_string()),
            ("loss.lambda_div", l.div.to_string()),
            ("loss.lambda_cons", l.cons.to_string()),
            ("loss.lambda_coll", l.coll.to_string()),
            ("loss.margin", l.margin.to_string()),
            ("loss.d_min", l.d_min.to_string()),
            ("belief.lr", b.lr.to_string()),
            ("belief.epochs", b.epochs.to_string()),
            ("belief.patience", b.patience.to_string()),
            ("belief.batch_size", b.batch_size.to_string()),
            ("belief.grad_clip", b.grad_clip.to_string()),
            ("diffusion.lr", f.lr.to_string()),
            ("diffusion.weight_decay", f.weight_decay.to_string()),
            ("diffusion.epochs", f.epochs.to_string()),
            ("diffusion.warmup_epochs", f.warmup_epochs.to_string()),
            ("diffusion.ema_decay", f.ema_decay.to_string()),
            ("diffusion.batch_size", f.batch_size.to_string()),
            ("diffusion.grad_clip", f.grad_clip.to_string()),
            ("diffusion.steps", f.steps.to_string()),
            ("diffusion.beta_start", f.beta_start.to_string()),
            ("diffusion.beta_end", f.beta_end.to_string()),
            ("diffusion.ddim_steps", f.ddim_steps.to_string()),
            ("ablation.individual_fe", a.individual_fe.to_string()),
            ("ablation.goal_supervision", a.goal_supervision.to_string()),
            ("ablation.social_fe", a.social_fe.to_string()),
            ("ablation.token_condition", a.token_condition.to_string()),
            ("ablation.diffusion", a.diffusion.to_string()),
            ("eval.seeds", self.eval_seeds.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Short hex digest of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        let weights = [l.kl, l.free_bits, l.cls, l.div, l.cons, l.coll, l.margin, l.d_min];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss weights and margins must be finite and non-negative".into(),
            ));
        }
        if self.model.hypotheses == 0 {
            return Err(Error::Config("model.hypotheses must be at least 1".into()));
        }
        if !(self.data.delta > 0.0) {
            return Err(Error::Config("data.delta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("data.val_fraction must be in [0, 1)".into()));
        }
        if self.model.hidden % self.model.heads != 0 || self.model.gat_out % self.model.heads != 0 {
            return Err(Error::Config("model widths must be divisible by model.heads".into()));
        }
        if self.model.denoiser_width % self.model.heads != 0 {
            return Err(Error::Config(
                "model.denoiser_width must be divisible by model.heads".into(),
            ));
        }
        if self.belief.batch_size == 0 || self.diffusion.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.diffusion.ema_decay) {
            return Err(Error::Config("diffusion.ema_decay must be in [0, 1)".into()));
        }
        if self.diffusion.ddim_steps == 0 || self.diffusion.ddim_steps > self.diffusion.steps {
            return Err(Error::Config(
                "diffusion.ddim_steps must be in 1..=diffusion.steps".into(),
            ));
        }
        if !(0.0 < self.diffusion.beta_start
            && self.diffusion.beta_start < self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return Err(Error::Config(
                "need 0 < diffusion.beta_start < diffusion.beta_end < 1".into(),
            ));
        }
        if self.eval_seeds == 0 {
            return Err(Error::Config("eval.seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.model.hidden,
            gat_out: self.model.gat_out,
            heads: self.model.heads,
            temporal_layers: self.model.temporal_layers,
            gat_layers: self.model.gat_layers,
            t_obs: T_OBS,
        }
    }

    pub fn heads(&self) -> BeliefConfig {
        BeliefConfig {
            hidden: self.model.hidden,
            latent: self.model.latent,
            hypotheses: self.model.hypotheses,
            head_hidden: self.model.head_hidden,
            t_fut: T_FUT,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.model.denoiser_width,
            layers: self.model.denoiser_layers,
            heads: self.model.heads,
            ffn: self.model.denoiser_ffn,
            cond_dim: self.model.latent + 2,
            t_fut: T_FUT,
            token_condition: self.ablation.token_condition,
        }
    }

    pub fn objective_terms(&self) -> ObjectiveTerms {
        ObjectiveTerms {
            individual: self.ablation.individual_fe,
            goal_supervision: self.ablation.goal_supervision,
            social: self.ablation.social_fe,
        }
    }

    /// Keys whose values fix parameter shapes; checkpoints must agree on these.
    pub fn shape_keys(&self) -> Vec<(&'static str, String)> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("model."))
            .collect()
    }
}
