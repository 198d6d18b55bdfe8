//! Model checkpoints in a small, auditable, language-neutral container.
//!
//! Layout, all integers little-endian: magic `CRID`, u32 version (currently
//! 1), u32 array count; then per array a u16 name length, the UTF-8 name, a
//! u8 dtype code (0 = f32, 1 = f64), a u8 rank, rank × u32 dims, and the
//! row-major payload. Saving a loaded checkpoint reproduces the file byte
//! for byte.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use metareid_core::model::{ModelConfig, ModelParams};
use metareid_core::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"CRID";
pub const VERSION: u32 = 1;

/// Refuse to allocate absurd arrays from corrupt or hostile headers.
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("array `{name}`: unknown dtype code {code}")]
    BadDtype { name: String, code: u8 },
    #[error("array `{name}`: name is not UTF-8")]
    BadName { name: String },
    #[error("array `{name}`: {elements} elements exceed the sanity limit")]
    TooLarge { name: String, elements: u64 },
    #[error("checkpoint is missing array `{0}`")]
    MissingArray(&'static str),
    #[error("array `{name}` is {found}, expected {expected}")]
    WrongDtype { name: &'static str, found: &'static str, expected: &'static str },
    #[error("array `{name}` has shape {found:?}, expected {expected}")]
    WrongShape { name: &'static str, found: Vec<usize>, expected: String },
}

/// Element storage preserving the on-disk precision exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// An ordered bag of named arrays; order is part of the format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Dtype of the first array — the whole-model precision for checkpoints
    /// written by [`from_params`].
    pub fn dtype(&self) -> Option<Dtype> {
        self.arrays.first().map(|a| a.data.dtype())
    }
}

fn tensor_to_array<F: Scalar>(name: &str, t: &Tensor<F>) -> NamedArray {
    let data = match F::DTYPE {
        Dtype::F32 => ArrayData::F32(t.data().iter().map(|x| x.into_f64() as f32).collect()),
        Dtype::F64 => ArrayData::F64(t.data().iter().map(|x| x.into_f64()).collect()),
    };
    NamedArray { name: name.to_string(), shape: t.shape().to_vec(), data }
}

/// All model state — the eight learnable tensors in parameter order, then
/// the running-statistic buffers.
pub fn from_params<F: Scalar>(params: &ModelParams<F>) -> Checkpoint {
    let mut arrays: Vec<NamedArray> = ModelParams::<F>::param_names()
        .iter()
        .zip(params.param_list())
        .map(|(name, t)| tensor_to_array(name, t))
        .collect();
    arrays.push(tensor_to_array("running_mean", &params.running_mean));
    arrays.push(tensor_to_array("running_var", &params.running_var));
    Checkpoint { arrays }
}

fn take_tensor<F: Scalar>(
    ck: &Checkpoint,
    name: &'static str,
) -> Result<Tensor<F>, CheckpointError> {
    let arr = ck.find(name).ok_or(CheckpointError::MissingArray(name))?;
    let data: Vec<F> = match (&arr.data, F::DTYPE) {
        (ArrayData::F32(v), Dtype::F32) => v.iter().map(|&x| F::from_f64(x as f64)).collect(),
        (ArrayData::F64(v), Dtype::F64) => v.iter().map(|&x| F::from_f64(x)).collect(),
        (found, _) => {
            return Err(CheckpointError::WrongDtype {
                name,
                found: match found.dtype() {
                    Dtype::F32 => "f32",
                    Dtype::F64 => "f64",
                },
                expected: match F::DTYPE {
                    Dtype::F32 => "f32",
                    Dtype::F64 => "f64",
                },
            })
        }
    };
    Ok(Tensor::new(arr.shape.clone(), data))
}

fn expect_shape(
    name: &'static str,
    t: &Tensor<impl Scalar>,
    want: &[usize],
) -> Result<(), CheckpointError> {
    if t.shape() != want {
        return Err(CheckpointError::WrongShape {
            name,
            found: t.shape().to_vec(),
            expected: format!("{want:?}"),
        });
    }
    Ok(())
}

/// Rebuild model state; the architecture is derived from the stored shapes
/// and cross-checked for consistency.
pub fn to_params<F: Scalar>(ck: &Checkpoint) -> Result<ModelParams<F>, CheckpointError> {
    let w1: Tensor<F> = take_tensor(ck, "w1")?;
    if w1.rank() != 2 {
        return Err(CheckpointError::WrongShape {
            name: "w1",
            found: w1.shape().to_vec(),
            expected: "[input_dim, hidden_dim]".to_string(),
        });
    }
    let (input_dim, hidden_dim) = (w1.shape()[0], w1.shape()[1]);
    let w_emb: Tensor<F> = take_tensor(ck, "w_emb")?;
    if w_emb.rank() != 2 || w_emb.shape()[0] != hidden_dim {
        return Err(CheckpointError::WrongShape {
            name: "w_emb",
            found: w_emb.shape().to_vec(),
            expected: format!("[{hidden_dim}, embed_dim]"),
        });
    }
    let embed_dim = w_emb.shape()[1];
    let w_cls: Tensor<F> = take_tensor(ck, "w_cls")?;
    if w_cls.rank() != 2 || w_cls.shape()[0] != embed_dim {
        return Err(CheckpointError::WrongShape {
            name: "w_cls",
            found: w_cls.shape().to_vec(),
            expected: format!("[{embed_dim}, num_classes]"),
        });
    }
    let num_classes = w_cls.shape()[1];

    let b1: Tensor<F> = take_tensor(ck, "b1")?;
    let w2: Tensor<F> = take_tensor(ck, "w2")?;
    let b2: Tensor<F> = take_tensor(ck, "b2")?;
    let gamma: Tensor<F> = take_tensor(ck, "mlr_gamma")?;
    let beta: Tensor<F> = take_tensor(ck, "mlr_beta")?;
    let running_mean: Tensor<F> = take_tensor(ck, "running_mean")?;
    let running_var: Tensor<F> = take_tensor(ck, "running_var")?;
    expect_shape("b1", &b1, &[hidden_dim])?;
    expect_shape("w2", &w2, &[hidden_dim, hidden_dim])?;
    expect_shape("b2", &b2, &[hidden_dim])?;
    expect_shape("mlr_gamma", &gamma, &[hidden_dim])?;
    expect_shape("mlr_beta", &beta, &[hidden_dim])?;
    expect_shape("running_mean", &running_mean, &[hidden_dim])?;
    expect_shape("running_var", &running_var, &[hidden_dim])?;

    Ok(ModelParams {
        cfg: ModelConfig { input_dim, hidden_dim, embed_dim, num_classes },
        w1,
        b1,
        w2,
        b2,
        gamma,
        beta,
        w_emb,
        w_cls,
        running_mean,
        running_var,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ck.arrays.len() as u32).to_le_bytes())?;
    for arr in &ck.arrays {
        let name = arr.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[arr.data.dtype().code(), arr.shape.len() as u8])?;
        for &d in &arr.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &arr.data {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if read_exact::<4>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CheckpointError::BadName {
                name: String::from_utf8_lossy(e.as_bytes()).into_owned(),
            })?;
        let [dtype_code, rank] = read_exact::<2>(&mut r)?;
        let dtype = Dtype::from_code(dtype_code)
            .ok_or_else(|| CheckpointError::BadDtype { name: name.clone(), code: dtype_code })?;
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = u32::from_le_bytes(read_exact::<4>(&mut r)?) as u64;
            elements = elements.saturating_mul(d);
            shape.push(d as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(CheckpointError::TooLarge { name, elements });
        }
        let n = elements as usize;
        let data = match dtype {
            Dtype::F32 => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(f32::from_le_bytes(read_exact::<4>(&mut r)?));
                }
                ArrayData::F32(v)
            }
            Dtype::F64 => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
                }
                ArrayData::F64(v)
            }
        };
        arrays.push(NamedArray { name, shape, data });
    }
    Ok(Checkpoint { arrays })
}
