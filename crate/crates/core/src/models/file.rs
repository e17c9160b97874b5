//! Versioned model files.
//!
//! Layout (little-endian):
//! `"STLMODEL"`, version u32, kind u8, spec JSON (u32 length + bytes),
//! parameter count u32, then per parameter: name, trainable u8, ndim u32,
//! dims u64×ndim, values f64×numel; finally a CRC-32 of everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use steallab_autodiff::{Parameter, Tensor};

use super::{ClassifierModel, ClassifierSpec, GeneratorModel, GeneratorSpec};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STLMODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const KIND_CLASSIFIER: u8 = 0;
const KIND_GENERATOR: u8 = 1;

fn encode<S: Serialize>(kind: u8, spec: &S, params: &[Parameter]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(MODEL_FORMAT_VERSION);
    w.u8(kind);
    w.bytes(serde_json::to_string(spec)?.as_bytes());
    w.u32(params.len() as u32);
    for p in params {
        w.bytes(p.name.as_bytes());
        w.u8(u8::from(p.trainable));
        w.u32(p.tensor.ndim() as u32);
        for &d in p.tensor.shape() {
            w.u64(d as u64);
        }
        w.f64s(p.tensor.data());
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn decode<S: DeserializeOwned>(bytes: &[u8], path: &Path, kind: u8) -> Result<(S, Vec<Parameter>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "not a model file".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let mut r = Reader::new(&body[12..], path);
    let found_kind = r.u8()?;
    if found_kind != kind {
        return Err(r.corrupt(format!("model kind {found_kind}, expected {kind}")));
    }
    let spec: S = serde_json::from_slice(r.bytes()?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let tensor = Tensor::new(&shape, r.f64s(numel)?)?;
        params.push(Parameter {
            name,
            tensor,
            grad: None,
            trainable,
        });
    }
    if !r.is_done() {
        return Err(r.corrupt("trailing bytes after parameters"));
    }
    Ok((spec, params))
}

/// Stored parameters must match the spec's freshly built layout name for name.
fn check_layout(reference: &[Parameter], stored: &[Parameter]) -> Result<()> {
    if reference.len() != stored.len() {
        return Err(Error::ParamMismatch(format!(
            "spec has {} parameters, file has {}",
            reference.len(),
            stored.len()
        )));
    }
    for (a, b) in reference.iter().zip(stored) {
        if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
            return Err(Error::ParamMismatch(format!(
                "expected `{}` {:?}, found `{}` {:?}",
                a.name,
                a.tensor.shape(),
                b.name,
                b.tensor.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_classifier(model: &ClassifierModel, path: &Path) -> Result<()> {
    write_file(path, &encode(KIND_CLASSIFIER, model.spec(), model.params())?)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let (spec, params): (ClassifierSpec, _) = decode(&read_file(path)?, path, KIND_CLASSIFIER)?;
    let reference = ClassifierModel::build(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    check_layout(reference.params(), &params)?;
    Ok(ClassifierModel::from_parts(spec, params))
}

pub fn save_generator(model: &GeneratorModel, path: &Path) -> Result<()> {
    write_file(path, &encode(KIND_GENERATOR, model.spec(), model.params())?)
}

pub fn load_generator(path: &Path) -> Result<GeneratorModel> {
    let (spec, params): (GeneratorSpec, _) = decode(&read_file(path)?, path, KIND_GENERATOR)?;
    let reference = GeneratorModel::build(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    check_layout(reference.params(), &params)?;
    Ok(GeneratorModel::from_parts(spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Capacity, InputKind};

    fn victim() -> ClassifierModel {
        let spec = ClassifierSpec::conv(1, 8, 8, 10, Capacity::Tiny);
        ClassifierModel::build(spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn classifier_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.model");
        let m = victim();
        save_classifier(&m, &path).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn generator_round_trip_keeps_running_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.model");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = GeneratorModel::build(GeneratorSpec::for_output(InputKind::Vector { dim: 16 }), &mut rng).unwrap();
        g.generate(&Tensor::randn(&[32, 64], &mut rng)).unwrap();
        save_generator(&g, &path).unwrap();
        let back = load_generator(&path).unwrap();
        assert_eq!(back.params(), g.params());
        assert!(back.params().iter().any(|p| !p.trainable));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.model");
        save_classifier(&victim(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_classifier(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn mismatched_spec_and_blobs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.model");
        let m = victim();
        // Claim a different capacity while keeping the tiny blobs.
        let mut spec = *m.spec();
        spec.capacity = Capacity::Small;
        std::fs::write(&path, encode(KIND_CLASSIFIER, &spec, m.params()).unwrap()).unwrap();
        assert!(matches!(load_classifier(&path), Err(Error::ParamMismatch(_))));
    }

    #[test]
    fn wrong_kind_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.model");
        save_classifier(&victim(), &path).unwrap();
        assert!(matches!(load_generator(&path), Err(Error::Corrupt { .. })));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_classifier(&path),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }
}
