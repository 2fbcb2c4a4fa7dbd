//! Trained components and their named-tensor layout.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::formats::{decode_model, encode_model, hash_from_tensor, hash_tensor, read_file, write_file, HASH_TENSOR};
use crate::backend::{AttentionParams, Backend, NpldaModel, NpldaParams, PldaModel, Preproc};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Whatever a run has trained so far. A container with no tensors loads as
/// an empty model and fails only when used.
#[derive(Debug, Clone, Default)]
pub struct SavedModel {
    pub encoder: Option<EncoderParams>,
    pub attention: Option<AttentionParams>,
    pub plda: Option<PldaModel>,
    pub nplda: Option<NpldaModel>,
}

fn flag(b: bool) -> Tensor {
    Tensor::scalar(if b { 1.0 } else { 0.0 })
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::Compatibility(msg.into())
}

struct Pool(BTreeMap<String, Tensor>);

impl Pool {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.0.remove(name).ok_or_else(|| incompatible(format!("missing tensor {name}")))
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.0.keys().any(|k| k.starts_with(prefix))
    }

    fn take_flag(&mut self, name: &str) -> Result<bool> {
        let t = self.take(name)?;
        match t.data() {
            [v] if *v == 0.0 || *v == 1.0 => Ok(*v == 1.0),
            _ => Err(incompatible(format!("{name} must be a 0/1 scalar"))),
        }
    }

    /// Fills `template` in place from `prefix`-named tensors, checking shapes.
    fn fill(&mut self, prefix: &str, names: Vec<String>, slots: Vec<&mut Tensor>) -> Result<()> {
        for (n, slot) in names.into_iter().zip(slots) {
            let key = format!("{prefix}{n}");
            let t = self.take(&key)?;
            if t.shape() != slot.shape() {
                return Err(incompatible(format!(
                    "{key}: shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(incompatible(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(())
}

impl SavedModel {
    pub fn is_empty(&self) -> bool {
        self.encoder.is_none() && self.attention.is_none() && self.plda.is_none() && self.nplda.is_none()
    }

    /// Embedding-level back-end for `choice`; `auto` picks attention, then
    /// NPLDA, then PLDA, then cosine.
    pub fn backend(&self, choice: &str) -> Result<Backend> {
        if self.is_empty() {
            return Err(Error::EmptyModel);
        }
        let need = |b: Option<Backend>, what: &str| b.ok_or_else(|| incompatible(format!("model holds no {what}")));
        match choice {
            "auto" => Ok(self
                .attention
                .clone()
                .map(Backend::Attention)
                .or_else(|| self.nplda.clone().map(Backend::Nplda))
                .or_else(|| self.plda.clone().map(Backend::Plda))
                .unwrap_or(Backend::CosineMean)),
            "attention" => need(self.attention.clone().map(Backend::Attention), "attention back-end"),
            "nplda" => need(self.nplda.clone().map(Backend::Nplda), "NPLDA back-end"),
            "plda" => need(self.plda.clone().map(Backend::Plda), "PLDA back-end"),
            "cosine" => Ok(Backend::CosineMean),
            other => Err(Error::Config(format!(
                "back-end `{other}`: expected auto, cosine, cosine-concat, plda, nplda or attention"
            ))),
        }
    }

    pub fn to_tensors(&self, cfg: &RunConfig) -> Vec<(String, Tensor)> {
        let mut out = vec![(HASH_TENSOR.to_string(), hash_tensor(cfg.model_hash()))];
        if let Some(e) = &self.encoder {
            out.extend(e.named().into_iter().map(|(n, t)| (format!("encoder.{n}"), t.clone())));
        }
        if let Some(a) = &self.attention {
            out.extend(a.named().into_iter().map(|(n, t)| (format!("attention.{n}"), t.clone())));
        }
        if let Some(p) = &self.plda {
            out.push(("plda.pre.mean".into(), p.preproc.mean.clone()));
            if let Some(l) = &p.preproc.lda {
                out.push(("plda.pre.lda".into(), l.clone()));
            }
            out.push(("plda.pre.length_norm".into(), flag(p.preproc.length_norm)));
            out.push(("plda.mu".into(), p.mu.clone()));
            out.push(("plda.f".into(), p.f.clone()));
            out.push(("plda.sigma".into(), p.sigma.clone()));
        }
        if let Some(m) = &self.nplda {
            out.extend(m.params.named().into_iter().map(|(n, t)| (n, t.clone())));
            out.push(("nplda.length_norm".into(), flag(m.length_norm)));
        }
        out
    }

    /// Rebuilds the components present in `tensors`, verifying the config
    /// hash and every shape against `cfg`.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>, cfg: &RunConfig) -> Result<Self> {
        if tensors.is_empty() {
            return Ok(Self::default());
        }
        let mut pool = Pool(tensors.into_iter().collect());
        let hash = hash_from_tensor(&pool.take(HASH_TENSOR)?)?;
        if hash != cfg.model_hash() {
            return Err(incompatible(format!(
                "model config hash {hash:016x} differs from the current config {:016x}",
                cfg.model_hash()
            )));
        }
        let dim = cfg.usize("encoder.embedding_dim")?;
        let mut model = Self::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        if pool.has_prefix("encoder.") {
            let ecfg = cfg.encoder()?;
            let mut e = EncoderParams::init(&ecfg, &mut rng)?;
            let names = e.named().into_iter().map(|(n, _)| n).collect();
            pool.fill("encoder.", names, e.values_mut())?;
            model.encoder = Some(e);
        }
        if pool.has_prefix("attention.") {
            let mut a = AttentionParams::init(&cfg.attention()?, &mut rng)?;
            let names = a.named().into_iter().map(|(n, _)| n).collect();
            pool.fill("attention.", names, a.values_mut())?;
            model.attention = Some(a);
        }
        if pool.has_prefix("plda.") {
            let mean = pool.take("plda.pre.mean")?;
            expect_shape("plda.pre.mean", &mean, &[dim])?;
            let lda = pool.0.remove("plda.pre.lda");
            if let Some(l) = &lda {
                if l.rank() != 2 || l.rows() != dim {
                    return Err(incompatible(format!("plda.pre.lda: shape {:?}, expected [{dim} × _]", l.shape())));
                }
            }
            let length_norm = pool.take_flag("plda.pre.length_norm")?;
            let preproc = Preproc { mean, lda, length_norm };
            let d = preproc.output_dim();
            let mu = pool.take("plda.mu")?;
            let f = pool.take("plda.f")?;
            let sigma = pool.take("plda.sigma")?;
            expect_shape("plda.mu", &mu, &[d])?;
            expect_shape("plda.sigma", &sigma, &[d, d])?;
            if f.rank() != 2 || f.rows() != d {
                return Err(incompatible(format!("plda.f: shape {:?}, expected [{d} × R]", f.shape())));
            }
            model.plda = Some(PldaModel::new(preproc, mu, f, sigma)?);
        }
        if pool.has_prefix("nplda.") {
            let w1 = pool.take("nplda.w1")?;
            if w1.rank() != 2 || w1.rows() != dim {
                return Err(incompatible(format!("nplda.w1: shape {:?}, expected [{dim} × _]", w1.shape())));
            }
            let d = w1.cols();
            let params = NpldaParams {
                w1,
                b1: pool.take("nplda.b1")?,
                w2: pool.take("nplda.w2")?,
                b2: pool.take("nplda.b2")?,
                p: pool.take("nplda.p")?,
                q: pool.take("nplda.q")?,
            };
            for (n, t) in params.named() {
                let want: &[usize] = match n.as_str() {
                    "nplda.b1" | "nplda.b2" => &[d],
                    "nplda.w1" => continue,
                    _ => &[d, d],
                };
                expect_shape(&n, t, want)?;
            }
            model.nplda = Some(NpldaModel {
                params,
                length_norm: pool.take_flag("nplda.length_norm")?,
            });
        }
        if let Some(extra) = pool.0.keys().next() {
            return Err(incompatible(format!("unrecognised tensor {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<()> {
        write_file(path, encode_model(&self.to_tensors(cfg))?)
    }

    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        Self::from_tensors(decode_model(&read_file(path)?)?, cfg)
    }
}
