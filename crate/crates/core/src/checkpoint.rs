//! Checkpoint container. Layout (see `docs/checkpoint.md`):
//!
//! ```text
//! SWCKPT <version> <sha256 of body, hex> <body length in bytes>\n
//! <body: one JSON object>
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::train::{Model, ModelKind, TrainState};

pub const MAGIC: &str = "SWCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// `Config::model_hash` of the run that produced the weights.
    pub config_hash: String,
    pub seed: u64,
    pub model: Model,
    pub feature_map: FeatureMap,
    pub state: TrainState,
    /// Mean and standard deviation of the single-step prediction error on the
    /// training set. The changepoint baseline standardizes with these.
    pub residual: Option<(f64, f64)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = serde_json::to_vec(self).expect("checkpoint serializes");
        let mut out = format!("{MAGIC} {VERSION} {} {}\n", sha256_hex(&body), body.len()).into_bytes();
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::InvalidInput("checkpoint header missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::InvalidInput("checkpoint header not utf-8".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != MAGIC {
            return Err(Error::InvalidInput(format!("not a checkpoint header: {header:?}")));
        }
        let version: u32 = fields[1].parse().map_err(|_| Error::InvalidInput("bad version field".into()))?;
        if version != VERSION {
            return Err(Error::Schema(version));
        }
        let len: usize = fields[3].parse().map_err(|_| Error::InvalidInput("bad length field".into()))?;
        let body = &bytes[nl + 1..];
        if body.len() != len {
            return Err(Error::InvalidInput(format!("checkpoint body is {} bytes, header says {len}", body.len())));
        }
        let found = sha256_hex(body);
        if found != fields[2] {
            return Err(Error::HashMismatch {
                found,
                expected: fields[2].to_string(),
            });
        }
        let mut ck: Checkpoint = serde_json::from_slice(body)?;
        ck.model.check_layout()?;
        if ck.model.kind() != ck.kind {
            return Err(Error::InvalidInput("checkpoint kind disagrees with its model".into()));
        }
        Ok(ck)
    }

    /// Written to a sibling temp file first, then renamed.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Load and refuse weights trained under a different configuration.
    pub fn load_expecting(path: &Path, config_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config_hash != config_hash {
            return Err(Error::HashMismatch {
                found: ck.config_hash,
                expected: config_hash.to_string(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::GruConfig;
    use crate::sim::{run_episode, Transition, WorkspaceConfig};
    use crate::uatom::UatomConfig;

    fn sample(kind: ModelKind) -> Checkpoint {
        let cfg = WorkspaceConfig::default();
        let log = run_episode(Transition::all()[0], 1, &cfg, None).unwrap();
        let fm = FeatureMap::calibrate(&log.observations, 32, 0).unwrap();
        let model = Model::new(kind, &UatomConfig::default(), &GruConfig::default(), 3).unwrap();
        Checkpoint {
            kind,
            config_hash: "abc".into(),
            seed: 3,
            state: TrainState::new(&model),
            model,
            feature_map: fm,
            residual: Some((0.1, 0.05)),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        for kind in [ModelKind::Uatom, ModelKind::Gru] {
            let ck = sample(kind);
            let bytes = ck.to_bytes();
            assert!(bytes.starts_with(b"SWCKPT 1 "));
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupted_body_rejected() {
        let mut bytes = sample(ModelKind::Gru).to_bytes();
        let last = bytes.len() - 2;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::HashMismatch { .. })));
        bytes.truncate(bytes.len() - 5);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn bad_header_rejected() {
        let bytes = sample(ModelKind::Gru).to_bytes();
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Schema(2))));
        assert!(Checkpoint::from_bytes(b"hello\n{}").is_err());
        assert!(Checkpoint::from_bytes(b"no newline").is_err());
    }

    #[test]
    fn config_hash_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample(ModelKind::Uatom).save(&p).unwrap();
        assert!(Checkpoint::load_expecting(&p, "abc").is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&p, "def"),
            Err(Error::HashMismatch { .. })
        ));
    }
}
