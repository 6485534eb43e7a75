//! Binary feature files and checkpoints.
//!
//! Feature file: `CNAT`, version u32, T u32, F u32, then `T·F` little-endian
//! f32 values row-major. Checkpoint: `CNCK`, version u32, model kind,
//! model config text, a named parameter table and a trailing SHA-256 of
//! everything before it.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"CNAT";
const FEATURE_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CNCK";
const CHECKPOINT_VERSION: u32 = 1;
const PRECISION_F64: u8 = 0;
const DIGEST_LEN: usize = 32;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos, detail: format!("truncated {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format { offset: at, detail: format!("{what} is not UTF-8") })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Usage(format!("{v} does not fit a 32-bit field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_features(x: &Tensor) -> Result<Vec<u8>> {
    let (t, f) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(16 + 4 * t * f);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION as usize)?;
    put_u32(&mut out, t)?;
    put_u32(&mut out, f)?;
    for v in x.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic, expected CNAT".into() });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}") });
    }
    let t = r.u32("frame count")? as usize;
    let f = r.u32("feature width")? as usize;
    if t == 0 || f == 0 {
        return Err(Error::Format { offset: 8, detail: format!("empty feature matrix {t}x{f}") });
    }
    let expected = 16 + 4 * t * f;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            detail: format!("file is {} bytes, header implies {expected}", bytes.len()),
        });
    }
    let data = r
        .take(4 * t * f, "values")?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new([t, f], data)
}

pub fn write_features(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, encode_features(x)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&fs::read(path)?)
}

/// Utterance id: the file name without its extension.
pub fn utterance_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A single feature file, or every `*.feat` file of a directory in name order.
pub fn feature_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "feat"));
    paths.sort();
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_string(&mut out, self.kind.tag())?;
        put_string(&mut out, &self.config.to_text())?;
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_string(&mut out, name)?;
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            out.push(PRECISION_F64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and validates: the checksum must match and the parameter table
    /// must hold exactly the tensors the config implies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, detail: "not a checkpoint (bad magic or too short)".into() });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader::new(body);
        r.take(4, "magic")?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, detail: format!("unsupported checkpoint version {version}") });
        }
        let kind = ModelKind::from_tag(&r.string("model kind")?)?;
        let config = ModelConfig::from_text(&r.string("model config")?)?;
        let (_, mut params) = Model::build(kind, &config, 0)?;
        let count = r.u32("parameter count")? as usize;
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let at = r.pos;
            let tag = r.take(1, "precision tag")?[0];
            if tag != PRECISION_F64 {
                return Err(Error::Format { offset: at, detail: format!("unknown precision tag {tag}") });
            }
            let n: usize = shape.iter().product();
            let data = r
                .take(8 * n, "parameter values")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let expected = params
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if expected.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {shape:?}, config implies {:?}",
                    expected.shape()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
            }
            params.set(&name, Tensor::new(shape, data)?)?;
        }
        if r.pos != body.len() {
            return Err(Error::Format { offset: r.pos, detail: "trailing bytes after parameter table".into() });
        }
        if let Some((missing, _)) = params.iter().find(|(n, _)| !seen.contains(*n)) {
            return Err(Error::Checkpoint(format!("parameter {missing} missing")));
        }
        Ok(Self { kind, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// The model architecture paired with the stored parameters.
    pub fn model(&self) -> Result<(Model, ParamStore)> {
        let (model, _) = Model::build(self.kind, &self.config, 0)?;
        Ok((model, self.params.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            feat_dim: 8,
            frontend_channels: 2,
            d_att: 8,
            n_heads: 2,
            d_ff: 12,
            n_enc: 2,
            enc_middle: 1,
            n_sad: 1,
            n_mad: 2,
            mad_middle: 1,
            k_enc: 3,
            k_dec: 2,
            enc_kernel: 3,
            dec_kernel: 3,
            vocab: 4,
            at_dec_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn checkpoint(kind: ModelKind) -> Checkpoint {
        let config = small_config();
        let (_, params) = Model::build(kind, &config, 9).unwrap();
        Checkpoint { kind, config, params }
    }

    proptest! {
        #[test]
        fn feature_round_trip_is_bit_exact(t in 1usize..20, f in 1usize..10, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..t * f).map(|_| f64::from(rng.gen::<f32>() * 8.0 - 4.0)).collect();
            let x = Tensor::new([t, f], data).unwrap();
            let bytes = encode_features(&x).unwrap();
            prop_assert_eq!(bytes.len(), 16 + 4 * t * f);
            let back = decode_features(&bytes).unwrap();
            prop_assert_eq!(&back, &x);
            prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_feature_files_report_offsets() {
        let x = Tensor::full([3, 2], 0.5);
        let good = encode_features(&x).unwrap();
        let err = |b: &[u8]| match decode_features(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut magic = good.clone();
        magic[0] = b'X';
        assert_eq!(err(&magic), 0);
        let mut version = good.clone();
        version[4] = 9;
        assert_eq!(err(&version), 4);
        assert_eq!(err(&good[..10]), 8);
        assert_eq!(err(&good[..good.len() - 2]), good.len() - 2);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(err(&long), good.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        for kind in [ModelKind::CassNat, ModelKind::AtBaseline] {
            let ck = checkpoint(kind);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
            for ((_, a), (_, b)) in back.params.iter().zip(ck.params.iter()) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let bytes = checkpoint(ModelKind::CassNat).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_and_extra_parameters_named() {
        let ck = checkpoint(ModelKind::AtBaseline);
        let mut params = ParamStore::new();
        for (n, t) in ck.params.iter().filter(|(n, _)| *n != "at.out.b") {
            params.add(n, t.clone()).unwrap();
        }
        let bytes = Checkpoint { params: params.clone(), ..ck.clone() }.to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("at.out.b"), "{m}"),
            other => panic!("{other:?}"),
        }
        params.add("stray", Tensor::scalar(1.0)).unwrap();
        params.add("at.out.b", ck.params.by_name("at.out.b").unwrap().clone()).unwrap();
        let bytes = Checkpoint { params, ..ck }.to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("stray"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn directory_inputs_sorted_by_name() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.feat", "a.feat", "notes.txt"] {
            fs::write(dir.path().join(n), b"").unwrap();
        }
        let ids: Vec<String> = feature_paths(dir.path()).unwrap().iter().map(|p| utterance_id(p)).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
