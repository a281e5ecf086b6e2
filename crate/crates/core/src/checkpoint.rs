//! Single-file checkpoints: a plain-text header followed by the raw
//! little-endian `f32` payload of every parameter, in header order.
//!
//! ```text
//! FEPDIFF-CHECKPOINT 1
//! kind=belief
//! config.<key>=<value>
//! meta.<key>=<value>
//! param <name> <d0>x<d1>...
//! END
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

const MAGIC: &str = "FEPDIFF-CHECKPOINT 1";
const END: &str = "END\n";

pub type ParamMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Belief,
    Diffusion,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Belief => "belief",
            Stage::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: ExperimentConfig,
    /// Free-form metadata (epoch, validation metric, statistics, schedule).
    pub meta: BTreeMap<String, String>,
    pub params: ParamMap,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: ExperimentConfig, params: ParamMap) -> Checkpoint {
        Checkpoint {
            stage,
            config,
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nkind={}\n", self.stage.as_str());
        for (k, v) in self.config.entries() {
            head.push_str(&format!("config.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            head.push_str(&format!("meta.{k}={v}\n"));
        }
        for (name, (shape, _)) in &self.params {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("param {name} {}\n", dims.join("x")));
        }
        head.push_str(END);
        let mut out = head.into_bytes();
        for (_, values) in self.params.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        let end = find(bytes, END.as_bytes()).ok_or_else(|| fail("missing END marker"))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| fail("header is not UTF-8"))?;
        let mut payload = &bytes[end + END.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fail("not a checkpoint file"));
        }
        let stage = match lines.next() {
            Some("kind=belief") => Stage::Belief,
            Some("kind=diffusion") => Stage::Diffusion,
            _ => return Err(fail("missing or unknown kind")),
        };
        let mut config = ExperimentConfig::default();
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("config.") {
                let (k, v) = rest.split_once('=').ok_or_else(|| fail("bad config line"))?;
                config.set(k, v)?;
            } else if let Some(rest) = line.strip_prefix("meta.") {
                let (k, v) = rest.split_once('=').ok_or_else(|| fail("bad meta line"))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let (name, dims) = rest.rsplit_once(' ').ok_or_else(|| fail("bad param line"))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| fail("bad param shape")))
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name.to_string(), shape));
            } else {
                return Err(fail(&format!("unexpected header line `{line}`")));
            }
        }
        let mut params = BTreeMap::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(fail("payload truncated"));
            }
            let (chunk, rest) = payload.split_at(4 * n);
            let values = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, (shape, values));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(fail("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            stage,
            config,
            meta,
            params,
        })
    }

    /// Writes via a temporary sibling so a failed save leaves nothing behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing numeric metadata `{key}`")))
    }

    /// Parameters whose names start with `prefix`, with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamMap {
        self.params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Errors unless `other` was built with identical model dimensions.
    pub fn check_compatible(&self, other: &ExperimentConfig) -> Result<()> {
        let mine = self.config.shape_keys();
        let theirs = other.shape_keys();
        for ((k, a), (_, b)) in mine.iter().zip(&theirs) {
            if a != b {
                return Err(Error::Incompatible(format!("{k}: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Writes `bytes` to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.partial"));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamMap::new();
        params.insert(
            "a.weight".into(),
            (vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]),
        );
        params.insert("b".into(), (vec![1], vec![0.125]));
        let mut c = Checkpoint::new(Stage::Diffusion, ExperimentConfig::default(), params);
        c.meta.insert("epoch".into(), "3".into());
        c
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_f64("epoch").unwrap(), 3.0);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn dimension_mismatch_is_incompatible() {
        let c = sample();
        let mut other = ExperimentConfig::default();
        other.model.latent = 64;
        assert!(matches!(c.check_compatible(&other), Err(Error::Incompatible(_))));
        assert!(c.check_compatible(&ExperimentConfig::default()).is_ok());
    }
}
