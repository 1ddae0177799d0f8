//! Binary model checkpoints.
//!
//! Layout: 8 magic bytes, format version (u32 LE), header length (u64 LE),
//! JSON header, parameter values as f64 LE, then the SHA-256 of everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aleatoric::ResidualCvae;
use crate::baselines::{FullVae, ProbMlp, ProbMlpArch};
use crate::ensemble::{DynamicsArch, DynamicsEnsemble, TrainMeta};
use crate::env::Normalization;
use crate::error::{Error, Result};
use crate::numeric::params::Layout;
use crate::numeric::ParamVector;
use crate::vae::{SeqVae, VaeArch};

const MAGIC: &[u8; 8] = b"TRAJCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ensemble(DynamicsEnsemble),
    ResidualCvae(ResidualCvae),
    FullVae(FullVae),
    ProbMlp(ProbMlp),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Ensemble(_) => "ensemble",
            Model::ResidualCvae(_) => "residual-vae",
            Model::FullVae(_) => "full-vae",
            Model::ProbMlp(_) => "prob-mlp",
        }
    }

    pub fn parameters(&self) -> Vec<&ParamVector> {
        match self {
            Model::Ensemble(e) => e.members.iter().collect(),
            Model::ResidualCvae(c) => vec![&c.vae.encoder, &c.vae.decoder],
            Model::FullVae(f) => vec![&f.vae.encoder, &f.vae.decoder],
            Model::ProbMlp(p) => vec![&p.params],
        }
    }

    pub fn train_meta(&self) -> &TrainMeta {
        match self {
            Model::Ensemble(e) => &e.train_meta,
            Model::ResidualCvae(c) => &c.vae.train_meta,
            Model::FullVae(f) => &f.vae.train_meta,
            Model::ProbMlp(p) => &p.train_meta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Ensemble(e) => e.validate(),
            Model::ResidualCvae(c) => c.vae.validate(),
            Model::FullVae(f) => f.vae.validate(),
            Model::ProbMlp(p) => p.validate(),
        }
    }

    fn spec(&self) -> Spec {
        let vae = |v: &SeqVae| VaeSpec {
            arch: v.arch.clone(),
            beta: v.beta,
            kappa: v.kappa.clone(),
            normalization: v.normalization.clone(),
            train_meta: v.train_meta.clone(),
        };
        match self {
            Model::Ensemble(e) => Spec::Ensemble {
                arch: e.arch.clone(),
                normalization: e.normalization.clone(),
                train_meta: e.train_meta.clone(),
            },
            Model::ResidualCvae(c) => Spec::ResidualVae(vae(&c.vae)),
            Model::FullVae(f) => Spec::FullVae(vae(&f.vae)),
            Model::ProbMlp(p) => Spec::ProbMlp {
                arch: p.arch.clone(),
                normalization: p.normalization.clone(),
                train_meta: p.train_meta.clone(),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VaeSpec {
    arch: VaeArch,
    beta: f64,
    kappa: Vec<f64>,
    normalization: Normalization,
    train_meta: TrainMeta,
}

impl VaeSpec {
    fn into_vae(self, mut params: Vec<ParamVector>) -> Result<SeqVae> {
        if params.len() != 2 {
            return Err(Error::Integrity(
                "VAE checkpoint must hold two parameter vectors".into(),
            ));
        }
        let decoder = params.remove(1);
        let encoder = params.remove(0);
        Ok(SeqVae {
            arch: self.arch,
            encoder,
            decoder,
            beta: self.beta,
            kappa: self.kappa,
            normalization: self.normalization,
            train_meta: self.train_meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Spec {
    Ensemble {
        arch: DynamicsArch,
        normalization: Normalization,
        train_meta: TrainMeta,
    },
    ResidualVae(VaeSpec),
    FullVae(VaeSpec),
    ProbMlp {
        arch: ProbMlpArch,
        normalization: Normalization,
        train_meta: TrainMeta,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: Spec,
    layouts: Vec<Layout>,
}

/// Serialises `model` to bytes.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let params = model.parameters();
    let header = Header {
        model: model.spec(),
        layouts: params.iter().map(|p| p.layout().clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n_values: usize = params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * n_values + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses bytes written by [`encode`]. Never returns a partially built model.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint or truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity(
            "checkpoint digest mismatch (truncated or corrupted)".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])?;
    let data = &body[header_end..];
    let total: usize = header.layouts.iter().map(Layout::total_len).sum();
    if data.len() != 8 * total {
        return Err(Error::Integrity(format!(
            "expected {total} parameter values, found {} bytes",
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = Vec::with_capacity(header.layouts.len());
    for layout in header.layouts {
        let v: Vec<f64> = values.by_ref().take(layout.total_len()).collect();
        params.push(ParamVector::new(layout, v)?);
    }
    let model = match header.model {
        Spec::Ensemble {
            arch,
            normalization,
            train_meta,
        } => Model::Ensemble(DynamicsEnsemble {
            members: params,
            arch,
            normalization,
            train_meta,
        }),
        Spec::ResidualVae(v) => Model::ResidualCvae(ResidualCvae {
            vae: v.into_vae(params)?,
        }),
        Spec::FullVae(v) => Model::FullVae(FullVae {
            vae: v.into_vae(params)?,
        }),
        Spec::ProbMlp {
            arch,
            normalization,
            train_meta,
        } => {
            let [p]: [ParamVector; 1] = params
                .try_into()
                .map_err(|_| Error::Integrity("prob-mlp checkpoint must hold one parameter vector".into()))?;
            Model::ProbMlp(ProbMlp {
                params: p,
                arch,
                normalization,
                train_meta,
            })
        }
    };
    model
        .validate()
        .map_err(|e| Error::Integrity(format!("checkpoint content invalid: {e}")))?;
    Ok(model)
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written checkpoint.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    fn ensemble() -> DynamicsEnsemble {
        let arch = DynamicsArch {
            state_dim: 2,
            action_dim: 1,
            hidden: 3,
            head_hidden: 4,
        };
        let mut rng = RngStream::new(1, 2);
        DynamicsEnsemble {
            members: (0..2).map(|_| arch.init(&mut rng)).collect(),
            arch,
            normalization: Normalization::identity(2, 1),
            train_meta: TrainMeta::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::Ensemble(ensemble());
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn version_and_truncation() {
        let mut bytes = encode(&Model::Ensemble(ensemble())).unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(decode(cut), Err(Error::Integrity(_))));
        bytes[8] += 1;
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn corrupted_value_is_detected() {
        let mut bytes = encode(&Model::Ensemble(ensemble())).unwrap();
        let i = bytes.len() - DIGEST_LEN - 3;
        bytes[i] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
    }
}
