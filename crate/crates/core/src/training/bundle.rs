//! Model persistence: a JSON manifest plus a little-endian `f32` payload in
//! manifest order, closed by a 64-bit FNV-1a checksum of the payload bytes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{MifError, Result};
use crate::validation;

const MAGIC: &[u8; 4] = b"MIFB";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Descriptive metadata stored with every parameter payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BundleManifest {
    /// Network kind: `mif`, `if`, `rfs`, or `mc`.
    pub kind: String,
    /// Reference count the network was built for (0 when not applicable).
    pub m: usize,
    pub qp: i32,
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Donor bundle this model was fine-tuned from, if any.
    pub init_from: Option<String>,
    pub created_by: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub manifest: BundleManifest,
    pub params: ParamSet<f32>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl ModelBundle {
    /// Packs a parameter set with its metadata; tensor table is derived from
    /// the set so the two cannot drift apart.
    pub fn new(mut manifest: BundleManifest, params: ParamSet<f32>) -> ModelBundle {
        manifest.tensors = params
            .iter()
            .map(|(name, value)| TensorInfo { name: name.to_string(), shape: value.shape().to_vec() })
            .collect();
        ModelBundle { manifest, params }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let manifest_json = serde_json::to_vec(&self.manifest)
            .map_err(|e| MifError::Format(format!("{}: {e}", path.display())))?;
        let mut payload = Vec::new();
        for (_, value) in self.params.iter() {
            for &v in value.as_slice().expect("standard layout") {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a64(&payload);

        let mut file = std::fs::File::create(path).map_err(|e| MifError::io(path, e))?;
        let write = |file: &mut std::fs::File, bytes: &[u8]| -> Result<()> {
            file.write_all(bytes).map_err(|e| MifError::io(path, e))
        };
        write(&mut file, MAGIC)?;
        write(&mut file, &(manifest_json.len() as u32).to_le_bytes())?;
        write(&mut file, &manifest_json)?;
        write(&mut file, &payload)?;
        write(&mut file, &checksum.to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| MifError::io(path, e))?;
        let fail = |why: String| MifError::Format(format!("{}: {why}", path.display()));

        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fail("not a model bundle".into()));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + mlen + 8 {
            return Err(fail("truncated manifest".into()));
        }
        let manifest: BundleManifest = serde_json::from_slice(&bytes[8..8 + mlen])
            .map_err(|e| fail(format!("bad manifest: {e}")))?;

        let n_scalars: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload_start = 8 + mlen;
        let payload_len = n_scalars * 4;
        if bytes.len() != payload_start + payload_len + 8 {
            return Err(fail(format!(
                "expected {} payload bytes plus checksum, file has {}",
                payload_len,
                bytes.len() - payload_start
            )));
        }
        let payload = &bytes[payload_start..payload_start + payload_len];
        let stored = u64::from_le_bytes(bytes[payload_start + payload_len..].try_into().unwrap());
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(fail(format!("checksum mismatch: stored {stored:016x}, computed {computed:016x}")));
        }

        let mut params = ParamSet::new();
        let mut off = 0;
        for t in &manifest.tensors {
            let count: usize = t.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for k in 0..count {
                let b = &payload[(off + k) * 4..(off + k) * 4 + 4];
                data.push(f32::from_le_bytes(b.try_into().unwrap()));
            }
            off += count;
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data)
                .map_err(|e| fail(format!("tensor {}: {e}", t.name)))?;
            params.add(t.name.clone(), arr);
        }
        Ok(ModelBundle { manifest, params })
    }

    /// Bit-exactness check used by round-trip tests.
    pub fn params_bit_equal(a: &ParamSet<f32>, b: &ParamSet<f32>) -> bool {
        if a.len() != b.len() {
            return false;
        }
        a.iter().zip(b.iter()).all(|((na, va), (nb, vb))| {
            na == nb
                && va.shape() == vb.shape()
                && va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Checks that a loaded bundle matches the expected network kind.
pub fn expect_kind(bundle: &ModelBundle, kind: &str) -> Result<()> {
    if bundle.manifest.kind != kind {
        return Err(validation!(
            "bundle holds a `{}` model, expected `{kind}`",
            bundle.manifest.kind
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_bundle() -> ModelBundle {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.add("a.w", ArrayD::from_shape_fn(IxDyn(&[3, 2, 3, 3]), |_| r.gen_range(-1.0f32..1.0)));
        params.add("a.b", ArrayD::from_shape_fn(IxDyn(&[3]), |_| r.gen_range(-1.0f32..1.0)));
        ModelBundle::new(
            BundleManifest {
                kind: "mc".into(),
                m: 0,
                qp: 37,
                iterations: 123,
                learning_rate: 1e-4,
                batch_size: 16,
                seed: 7,
                init_from: None,
                created_by: "test".into(),
                tensors: Vec::new(),
            },
            params,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bundle = sample_bundle();
        let path = std::env::temp_dir().join(format!("mif-bundle-{}.mifb", std::process::id()));
        bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.manifest, bundle.manifest);
        assert!(ModelBundle::params_bit_equal(&back.params, &bundle.params));

        // Save the loaded bundle again: identical bytes.
        let path2 = std::env::temp_dir().join(format!("mif-bundle2-{}.mifb", std::process::id()));
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(&path2).unwrap();
    }

    #[test]
    fn corruption_is_detected() {
        let bundle = sample_bundle();
        let path = std::env::temp_dir().join(format!("mif-bundle-bad-{}.mifb", std::process::id()));
        bundle.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 20;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = ModelBundle::load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }
}
