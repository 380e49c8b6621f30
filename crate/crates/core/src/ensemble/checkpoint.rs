//! Versioned binary model container.
//!
//! Layout: 8-byte magic, u32 LE schema version, u64 LE header length, a
//! JSON header describing family/dimensions and the matrix manifest, then
//! every parameter matrix as row-major f64 little-endian. Loading
//! re-derives the expected manifest from the header dimensions and rejects
//! any mismatch, so a checkpoint can never materialize a model that
//! violates the shape invariants.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleModel, Family};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{CombinerParams, MlpParams, Param};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"KWTAENS\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    family: Family,
    in_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    subnet_count: usize,
    k_frac: f64,
    delay_epochs: usize,
    matrices: Vec<MatrixMeta>,
}

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
struct MatrixMeta {
    name: String,
    rows: usize,
    cols: usize,
}

/// Manifest a well-formed model of these dimensions must carry, in the
/// exact serialization order.
fn expected_manifest(
    family: Family,
    in_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    subnet_count: usize,
) -> Vec<MatrixMeta> {
    let mlp_entries = |prefix: &str, outputs: usize| {
        vec![
            MatrixMeta {
                name: format!("{prefix}.w1"),
                rows: hidden_dim,
                cols: in_dim,
            },
            MatrixMeta {
                name: format!("{prefix}.b1"),
                rows: 1,
                cols: hidden_dim,
            },
            MatrixMeta {
                name: format!("{prefix}.w2"),
                rows: outputs,
                cols: hidden_dim,
            },
            MatrixMeta {
                name: format!("{prefix}.b2"),
                rows: 1,
                cols: outputs,
            },
        ]
    };
    let mut out = Vec::new();
    for m in 0..subnet_count {
        out.extend(mlp_entries(&format!("subnet{m}"), out_dim));
    }
    if family == Family::MoE {
        out.extend(mlp_entries("gate", subnet_count));
    }
    if family == Family::KwtaEnn {
        out.push(MatrixMeta {
            name: "combiner.wz".into(),
            rows: out_dim,
            cols: subnet_count * out_dim,
        });
        out.push(MatrixMeta {
            name: "combiner.bz".into(),
            rows: 1,
            cols: out_dim,
        });
    }
    out
}

fn model_matrices<F: Scalar>(model: &EnsembleModel<F>) -> Vec<&Matrix<F>> {
    let mut mats: Vec<&Matrix<F>> = Vec::new();
    for net in &model.subnets {
        mats.extend(net.params().map(|p| &p.value));
    }
    if let Some(gate) = &model.gate {
        mats.extend(gate.params().map(|p| &p.value));
    }
    if let Some(comb) = &model.combiner {
        mats.push(&comb.wz.value);
        mats.push(&comb.bz.value);
    }
    mats
}

/// Write weights only; gradient and velocity buffers are not persisted.
pub fn save_checkpoint<F: Scalar>(model: &EnsembleModel<F>, path: &Path) -> Result<()> {
    let mats = model_matrices(model);
    let header = Header {
        family: model.family(),
        in_dim: model.in_dim(),
        hidden_dim: model.hidden_dim(),
        out_dim: model.out_dim(),
        subnet_count: model.subnet_count(),
        k_frac: model.k_frac(),
        delay_epochs: model.delay_epochs(),
        matrices: expected_manifest(
            model.family(),
            model.in_dim(),
            model.hidden_dim(),
            model.out_dim(),
            model.subnet_count(),
        ),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for mat in mats {
        for v in mat.data() {
            w.write_f64::<LittleEndian>(v.to_f64_lossy())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<EnsembleModel<F>> {
    let fmt = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };

    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!(
            "unsupported schema version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| fmt(format!("bad header: {e}")))?;

    let expected = expected_manifest(
        header.family,
        header.in_dim,
        header.hidden_dim,
        header.out_dim,
        header.subnet_count,
    );
    if header.matrices != expected {
        return Err(fmt(format!(
            "matrix manifest does not match a {} model of {}-{}-{} with {} sub-networks",
            header.family, header.in_dim, header.hidden_dim, header.out_dim, header.subnet_count
        )));
    }

    let mut read_matrix = |meta: &MatrixMeta| -> Result<Matrix<F>> {
        let mut data = Vec::with_capacity(meta.rows * meta.cols);
        for _ in 0..meta.rows * meta.cols {
            let v = r.read_f64::<LittleEndian>()?;
            if !v.is_finite() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("non-finite value in matrix '{}'", meta.name),
                });
            }
            data.push(F::c(v));
        }
        Matrix::from_vec(meta.rows, meta.cols, data)
    };

    let mut idx = 0;
    let next_mlp = |metas: &[MatrixMeta],
                        read: &mut dyn FnMut(&MatrixMeta) -> Result<Matrix<F>>|
     -> Result<MlpParams<F>> {
        let w1 = read(&metas[0])?;
        let b1 = read(&metas[1])?;
        let w2 = read(&metas[2])?;
        let b2 = read(&metas[3])?;
        Ok(MlpParams {
            w1: Param::new(w1, "w1"),
            b1: Param::new(b1, "b1"),
            w2: Param::new(w2, "w2"),
            b2: Param::new(b2, "b2"),
        })
    };

    let mut subnets = Vec::with_capacity(header.subnet_count);
    for _ in 0..header.subnet_count {
        subnets.push(next_mlp(&expected[idx..idx + 4], &mut read_matrix)?);
        idx += 4;
    }
    let gate = if header.family == Family::MoE {
        let g = next_mlp(&expected[idx..idx + 4], &mut read_matrix)?;
        idx += 4;
        Some(g)
    } else {
        None
    };
    let combiner = if header.family == Family::KwtaEnn {
        let wz = read_matrix(&expected[idx])?;
        let bz = read_matrix(&expected[idx + 1])?;
        Some(CombinerParams {
            wz: Param::new(wz, "wz"),
            bz: Param::new(bz, "bz"),
        })
    } else {
        None
    };

    EnsembleModel::from_parts(
        header.family,
        subnets,
        gate,
        combiner,
        header.k_frac,
        header.delay_epochs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn roundtrip(family: Family) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model =
            EnsembleModel::<f64>::init(family, &mut Rng::new(5), 4, 6, 3, 2, 0.75, 3).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();

        assert_eq!(loaded.family(), family);
        assert_eq!(loaded.subnet_count(), 2);
        assert_eq!(loaded.k_frac(), model.k_frac());
        assert_eq!(loaded.delay_epochs(), model.delay_epochs());
        for (a, b) in model.subnets.iter().zip(&loaded.subnets) {
            assert_eq!(a.w1.value, b.w1.value);
            assert_eq!(a.b1.value, b.b1.value);
            assert_eq!(a.w2.value, b.w2.value);
            assert_eq!(a.b2.value, b.b2.value);
        }
        // Model behaves identically after the roundtrip.
        let x = Rng::new(9).uniform(-1.0, 1.0, 3, 4).unwrap();
        let before = model.forward(&x, 10).unwrap();
        let after = loaded.forward(&x, 10).unwrap();
        assert_eq!(before.final_probs, after.final_probs);
    }

    #[test]
    fn checkpoint_roundtrips_every_family() {
        for family in [
            Family::Independent,
            Family::Cooperative,
            Family::MoE,
            Family::KwtaEnn,
        ] {
            roundtrip(family);
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMAGIC0000000000000000").unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn load_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = EnsembleModel::<f64>::init(
            Family::Cooperative,
            &mut Rng::new(6),
            4,
            6,
            3,
            2,
            0.75,
            0,
        )
        .unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn load_rejects_tampered_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = EnsembleModel::<f64>::init(
            Family::KwtaEnn,
            &mut Rng::new(7),
            4,
            6,
            3,
            2,
            0.75,
            0,
        )
        .unwrap();
        save_checkpoint(&model, &path).unwrap();

        // Rewrite the header with an inconsistent subnet count.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
        header["subnet_count"] = serde_json::json!(3);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[..12]);
        tampered.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        tampered.extend_from_slice(&new_header);
        tampered.extend_from_slice(&bytes[20 + header_len..]);
        std::fs::write(&path, tampered).unwrap();

        let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("manifest"), "{err}");
    }
}
