//! Named-tensor archives in the safetensors format.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};
use crate::ladder::sha256_hex;
use crate::scalar::Scalar;

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }

    fn data_len(&self) -> usize {
        self.data.len()
    }
}

/// Serializes matrices in the scalar's native dtype.
pub fn encode<'a, T: Scalar>(
    tensors: impl IntoIterator<Item = (String, ArrayViewD<'a, T>)>,
) -> Result<Vec<u8>> {
    let raws: BTreeMap<String, Raw> = tensors
        .into_iter()
        .map(|(name, m)| {
            let mut data = Vec::with_capacity(m.len() * std::mem::size_of::<T>());
            for &v in m.iter() {
                v.write_le(&mut data);
            }
            (
                name,
                Raw {
                    dtype: T::DTYPE,
                    shape: m.shape().to_vec(),
                    data,
                },
            )
        })
        .collect();
    safetensors::tensor::serialize(raws.iter().map(|(k, v)| (k.clone(), v)), &None)
        .map_err(|e| Error::WeightLoadError(e.to_string()))
}

/// Writes an archive and returns its SHA-256.
pub fn save<'a, T: Scalar>(
    path: &Path,
    tensors: impl IntoIterator<Item = (String, ArrayViewD<'a, T>)>,
) -> Result<String> {
    let bytes = encode(tensors)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A loaded archive: name → n-dimensional array, converted to `T`.
pub struct Archive<T> {
    pub tensors: BTreeMap<String, ArrayD<T>>,
    pub sha256: String,
}

impl<T: Scalar> Archive<T> {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::WeightLoadError(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<T> = match view.dtype() {
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|b| T::c(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                    .collect(),
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|b| T::c(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                    .collect(),
                other => {
                    return Err(Error::WeightLoadError(format!(
                        "tensor {name}: unsupported dtype {other:?}"
                    )))
                }
            };
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::WeightLoadError(format!("tensor {name}: {e}")))?;
            tensors.insert(name, arr);
        }
        Ok(Self {
            tensors,
            sha256: sha256_hex(bytes),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::WeightLoadError(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::decode(&bytes)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::WeightLoadError(format!("missing tensor {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<T>> {
        self.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::WeightLoadError(format!("tensor {name}: {e}")))
    }
}
