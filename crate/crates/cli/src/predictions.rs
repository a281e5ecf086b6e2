//! Line-oriented prediction export.
//!
//! ```text
//! FEPDIFF-PREDICTIONS 1
//! scene=<name>
//! seed=<u64>
//! K=<hypotheses>
//! config=<hash>
//! <agent_id> <frame> <k> <pi> <x1> <y1> ... <x12> <y12>
//! ```
//!
//! Floats are written in shortest round-trip form, so parsing a written file
//! returns the exact values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use fepdiff::dataio::{Trajectory, T_FUT};
use fepdiff::pipeline::PredictionSet;

const MAGIC: &str = "FEPDIFF-PREDICTIONS 1";
const PI_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentPrediction {
    pub agent_id: i64,
    pub frame: i64,
    pub pi: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFile {
    pub scene: String,
    pub seed: u64,
    pub k: usize,
    pub config_hash: String,
    pub agents: Vec<AgentPrediction>,
}

impl PredictionFile {
    pub fn from_sets(scene: &str, seed: u64, config_hash: &str, sets: &[PredictionSet]) -> Result<PredictionFile> {
        let k = sets.first().map_or(0, |s| s.trajectories.len());
        let file = PredictionFile {
            scene: scene.to_string(),
            seed,
            k,
            config_hash: config_hash.to_string(),
            agents: sets
                .iter()
                .map(|s| AgentPrediction {
                    agent_id: s.target_id,
                    frame: s.frame,
                    pi: s.pi.clone(),
                    trajectories: s.trajectories.clone(),
                })
                .collect(),
        };
        file.validate()?;
        Ok(file)
    }

    /// Exactly K records per agent and weights summing to one.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k > 0, "prediction file has K = 0");
        for a in &self.agents {
            ensure!(
                a.pi.len() == self.k && a.trajectories.len() == self.k,
                "agent {} at frame {} has {} records, expected {}",
                a.agent_id,
                a.frame,
                a.trajectories.len(),
                self.k
            );
            let total: f64 = a.pi.iter().sum();
            ensure!(
                (total - 1.0).abs() <= PI_TOLERANCE,
                "weights of agent {} at frame {} sum to {total}",
                a.agent_id,
                a.frame
            );
            for t in &a.trajectories {
                ensure!(
                    t.len() == T_FUT,
                    "trajectory of agent {} has {} steps",
                    a.agent_id,
                    t.len()
                );
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MAGIC}\nscene={}\nseed={}\nK={}\nconfig={}\n",
            self.scene, self.seed, self.k, self.config_hash
        );
        for a in &self.agents {
            for (k, (pi, t)) in a.pi.iter().zip(&a.trajectories).enumerate() {
                let _ = write!(s, "{} {} {k} {pi}", a.agent_id, a.frame);
                for [x, y] in t.points() {
                    let _ = write!(s, " {x} {y}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<PredictionFile> {
        let mut lines = text.lines().enumerate();
        ensure!(lines.next().map(|l| l.1) == Some(MAGIC), "not a prediction file");
        let mut header = BTreeMap::new();
        for key in ["scene", "seed", "K", "config"] {
            let (n, line) = lines.next().context("truncated header")?;
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .with_context(|| format!("line {}: expected `{key}=`", n + 1))?;
            header.insert(key, value.to_string());
        }
        let k: usize = header["K"].parse().context("bad K")?;
        let mut agents: Vec<AgentPrediction> = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 + 2 * T_FUT {
                bail!(
                    "line {}: expected {} fields, found {}",
                    n + 1,
                    4 + 2 * T_FUT,
                    fields.len()
                );
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse()
                    .with_context(|| format!("line {}: bad number `{}`", n + 1, fields[i]))
            };
            let agent_id: i64 = fields[0]
                .parse()
                .with_context(|| format!("line {}: bad agent id", n + 1))?;
            let frame: i64 = fields[1]
                .parse()
                .with_context(|| format!("line {}: bad frame", n + 1))?;
            let idx: usize = fields[2]
                .parse()
                .with_context(|| format!("line {}: bad hypothesis index", n + 1))?;
            let points = (0..T_FUT)
                .map(|t| Ok([num(4 + 2 * t)?, num(5 + 2 * t)?]))
                .collect::<Result<Vec<_>>>()?;
            let fresh = agents.last().is_none_or(|a| a.agent_id != agent_id || a.frame != frame);
            if fresh {
                agents.push(AgentPrediction {
                    agent_id,
                    frame,
                    pi: Vec::new(),
                    trajectories: Vec::new(),
                });
            }
            let a = agents.last_mut().expect("pushed above");
            ensure!(idx == a.pi.len(), "line {}: hypothesis {idx} out of order", n + 1);
            a.pi.push(num(3)?);
            a.trajectories.push(Trajectory(points));
        }
        let file = PredictionFile {
            scene: header["scene"].clone(),
            seed: header["seed"].parse().context("bad seed")?,
            k,
            config_hash: header["config"].clone(),
            agents,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<PredictionFile> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        PredictionFile::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PredictionFile {
        let traj = |s: f64| Trajectory((0..T_FUT).map(|t| [s * t as f64 + 0.1, -0.3 * t as f64]).collect());
        PredictionFile {
            scene: "zara1".into(),
            seed: 4,
            k: 2,
            config_hash: "00ff".into(),
            agents: vec![
                AgentPrediction {
                    agent_id: 3,
                    frame: 80,
                    pi: vec![0.25, 0.75],
                    trajectories: vec![traj(1.0), traj(1.0 / 3.0)],
                },
                AgentPrediction {
                    agent_id: 5,
                    frame: 80,
                    pi: vec![0.5, 0.5],
                    trajectories: vec![traj(0.7), traj(-2.0)],
                },
            ],
        }
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let f = sample();
        assert_eq!(PredictionFile::parse(&f.to_text()).unwrap(), f);
    }

    #[test]
    fn rejects_bad_weights_and_counts() {
        let mut f = sample();
        f.agents[0].pi = vec![0.25, 0.70];
        assert!(f.validate().is_err());
        let mut f = sample();
        f.agents[1].pi.pop();
        f.agents[1].trajectories.pop();
        assert!(PredictionFile::parse(&f.to_text()).is_err());
    }
}
