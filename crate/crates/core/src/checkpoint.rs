//! Checkpoint archive: a single binary file holding every named parameter
//! tensor with its group label, plus the TOML configuration the run used.
//! The format is little-endian and length-prefixed throughout, written in
//! parameter allocation order so identical runs produce identical bytes.

use crate::nn::ParamStore;
use ndarray::{ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SCCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed for {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(&'static str),
    #[error("checkpoint tensor {0:?} does not exist in the model being restored")]
    UnknownTensor(String),
    #[error("model parameter {0:?} is missing from the checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor {name:?} is labeled group {got:?}, expected {expected:?}")]
    GroupMismatch {
        name: String,
        expected: String,
        got: String,
    },
}

/// One tensor as stored in the archive.
#[derive(Debug, Clone)]
pub struct SavedTensor {
    pub name: String,
    pub group: String,
    pub values: ArrayD<f32>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read, cap: u64) -> Result<Vec<u8>, CheckpointError> {
    let len = read_u64(r).map_err(|_| CheckpointError::Corrupt("truncated length"))?;
    if len > cap {
        return Err(CheckpointError::Corrupt("length field out of bounds"));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("truncated payload"))?;
    Ok(buf)
}

fn read_string(r: &mut impl Read) -> Result<String, CheckpointError> {
    let bytes = read_bytes(r, 1 << 20)?;
    String::from_utf8(bytes).map_err(|_| CheckpointError::Corrupt("non-utf8 string"))
}

/// Writes every parameter of `store` plus the config text to `path`.
pub fn save_checkpoint(
    path: &Path,
    config_toml: &str,
    store: &ParamStore<f32>,
) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, config_toml.as_bytes())?;
        w.write_all(&(store.len() as u64).to_le_bytes())?;
        for id in store.ids() {
            write_bytes(&mut w, store.name(id).as_bytes())?;
            write_bytes(&mut w, store.group(id).label().as_bytes())?;
            let value = store.value(id);
            w.write_all(&(value.ndim() as u64).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// Reads the archive back: the config text and every stored tensor, in file
/// order.
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<SavedTensor>), CheckpointError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)
        .map_err(|_| CheckpointError::Corrupt("truncated header"))?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config = {
        let bytes = read_bytes(&mut r, 1 << 24)?;
        String::from_utf8(bytes).map_err(|_| CheckpointError::Corrupt("non-utf8 config"))?
    };
    let count = read_u64(&mut r).map_err(|_| CheckpointError::Corrupt("truncated tensor count"))?;
    if count > 1 << 24 {
        return Err(CheckpointError::Corrupt("tensor count out of bounds"));
    }
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let group = read_string(&mut r)?;
        let ndim = read_u64(&mut r).map_err(|_| CheckpointError::Corrupt("truncated rank"))? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Corrupt("tensor rank out of bounds"));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = read_u64(&mut r).map_err(|_| CheckpointError::Corrupt("truncated shape"))? as usize;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= 1 << 30)
                .ok_or(CheckpointError::Corrupt("tensor size out of bounds"))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Corrupt("truncated tensor data"))?;
            data.push(f32::from_le_bytes(buf));
        }
        let values = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|_| CheckpointError::Corrupt("inconsistent tensor shape"))?;
        tensors.push(SavedTensor {
            name,
            group,
            values,
        });
    }
    Ok((config, tensors))
}

/// Copies saved tensors into a freshly built store by name, insisting on
/// exact two-way coverage and matching shapes and group labels.
pub fn restore_into(
    store: &mut ParamStore<f32>,
    tensors: Vec<SavedTensor>,
) -> Result<(), CheckpointError> {
    let mut seen = vec![false; store.len()];
    for tensor in tensors {
        let id = store
            .lookup(&tensor.name)
            .ok_or_else(|| CheckpointError::UnknownTensor(tensor.name.clone()))?;
        let expected_group = store.group(id).label();
        if expected_group != tensor.group {
            return Err(CheckpointError::GroupMismatch {
                name: tensor.name,
                expected: expected_group,
                got: tensor.group,
            });
        }
        if store.value(id).shape() != tensor.values.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: tensor.name,
                expected: store.value(id).shape().to_vec(),
                got: tensor.values.shape().to_vec(),
            });
        }
        *store.value_mut(id) = tensor.values;
        seen[id.index()] = true;
    }
    for id in store.ids() {
        if !seen[id.index()] {
            return Err(CheckpointError::MissingTensor(store.name(id).to_string()));
        }
    }
    Ok(())
}

/// Convenience check that an archive covers exactly the six expected groups.
pub fn group_labels(tensors: &[SavedTensor]) -> Vec<String> {
    let mut labels: Vec<String> = tensors.iter().map(|t| t.group.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamGroup};
    use ndarray::IxDyn;

    fn sample_store(seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        init.weight("enc.w", ParamGroup::Alpha, &[3, 4]);
        init.zeros("enc.b", ParamGroup::Alpha, &[4]);
        init.weight("code.w", ParamGroup::Beta, &[2, 2]);
        init.ones("dec.gain", ParamGroup::Theta(1), &[5]);
        store
    }

    #[test]
    fn roundtrip_preserves_everything_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store(7);
        save_checkpoint(&path, "epochs = 3\n", &store).unwrap();

        let (config, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(config, "epochs = 3\n");
        assert_eq!(tensors.len(), 4);
        assert_eq!(group_labels(&tensors), vec!["alpha", "beta", "theta_1"]);

        let mut fresh = sample_store(99); // different values, same structure
        assert_ne!(fresh.value(fresh.lookup("enc.w").unwrap()), store.value(store.lookup("enc.w").unwrap()));
        restore_into(&mut fresh, tensors).unwrap();
        for id in store.ids() {
            assert_eq!(fresh.value(id), store.value(id), "{}", store.name(id));
        }
    }

    #[test]
    fn identical_stores_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, "x = 1\n", &sample_store(3)).unwrap();
        save_checkpoint(&b, "x = 1\n", &sample_store(3)).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "", &sample_store(1)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn restore_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store(5);
        save_checkpoint(&path, "", &store).unwrap();
        let (_, tensors) = load_checkpoint(&path).unwrap();

        // Missing parameter in the archive.
        let mut bigger = sample_store(5);
        bigger.insert("extra.w", ParamGroup::Phi(0), ArrayD::zeros(IxDyn(&[1])));
        assert!(matches!(
            restore_into(&mut bigger, tensors.clone()),
            Err(CheckpointError::MissingTensor(name)) if name == "extra.w"
        ));

        // Archive tensor unknown to the model.
        let mut smaller = ParamStore::<f32>::new();
        let mut init = Init::new(&mut smaller, 5);
        init.weight("enc.w", ParamGroup::Alpha, &[3, 4]);
        assert!(matches!(
            restore_into(&mut smaller, tensors.clone()),
            Err(CheckpointError::UnknownTensor(_))
        ));

        // Wrong shape.
        let mut reshaped = ParamStore::<f32>::new();
        let mut init = Init::new(&mut reshaped, 5);
        init.weight("enc.w", ParamGroup::Alpha, &[4, 3]);
        init.zeros("enc.b", ParamGroup::Alpha, &[4]);
        init.weight("code.w", ParamGroup::Beta, &[2, 2]);
        init.ones("dec.gain", ParamGroup::Theta(1), &[5]);
        assert!(matches!(
            restore_into(&mut reshaped, tensors.clone()),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        // Wrong group label.
        let mut regrouped = ParamStore::<f32>::new();
        let mut init = Init::new(&mut regrouped, 5);
        init.weight("enc.w", ParamGroup::Beta, &[3, 4]);
        init.zeros("enc.b", ParamGroup::Alpha, &[4]);
        init.weight("code.w", ParamGroup::Beta, &[2, 2]);
        init.ones("dec.gain", ParamGroup::Theta(1), &[5]);
        assert!(matches!(
            restore_into(&mut regrouped, tensors),
            Err(CheckpointError::GroupMismatch { .. })
        ));
    }
}
