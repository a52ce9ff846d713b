//! Little-endian binary formats.
//!
//! | file            | layout |
//! |-----------------|--------|
//! | dataset         | `"TASEDS1\0"`, u32 N, u32 d_in, u32 C, u32 x C class counts, f32 x N*d_in features (row-major), u32 x N labels |
//! | checkpoint      | `"TASECKP1"`, u32 #encoder dims, u32 dims.., u32 #projector dims, u32 dims.., then per layer u32 rows, u32 cols, f32 weights, u32 len, f32 bias; then u32 epochs completed, u32 has-momentum flag and, if set, the momentum buffers in the same tensor layout |
//! | pseudo state    | `"TASEPS1\0"`, u32 N, u32 K, u32 x N assignments, u32 x K sizes, f32 x K*d centroids (d inferred from length) |
//! | embedding dump  | `"TASEEMB1"`, u32 N, u32 d, f32 x N*d rows, u32 x N labels |
//!
//! Values are stored as `f32`; `f32` data round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::datagen::Dataset;
use crate::error::{Result, TaseError};
use crate::model::{Dense, Gradients, MlpSpec, ModelParams};
use crate::pseudo::PseudoState;
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 8] = b"TASEDS1\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TASECKP1";
pub const PSEUDO_MAGIC: &[u8; 8] = b"TASEPS1\0";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"TASEEMB1";

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(TaseError::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| TaseError::Format(format!("{what} = {n} does not fit in u32")))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    Ok(r.read_u32::<LittleEndian>()? as usize)
}

fn write_f32s<W: Write, T: Scalar>(w: &mut W, values: impl Iterator<Item = T>) -> Result<()> {
    for v in values {
        w.write_f32::<LittleEndian>(v.as_f32())?;
    }
    Ok(())
}

fn read_f32s<R: Read, T: Scalar>(r: &mut R, n: usize) -> Result<Vec<T>> {
    let mut raw = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut raw)?;
    Ok(raw.into_iter().map(|x| T::lit(x as f64)).collect())
}

fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<usize>> {
    let mut raw = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut raw)?;
    Ok(raw.into_iter().map(|x| x as usize).collect())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(TaseError::Format("trailing bytes after payload".into()));
    }
    Ok(())
}

pub fn write_dataset<W: Write, T: Scalar>(w: &mut W, ds: &Dataset<T>) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(u32_of(ds.len(), "N")?)?;
    w.write_u32::<LittleEndian>(u32_of(ds.dim(), "d_in")?)?;
    w.write_u32::<LittleEndian>(u32_of(ds.num_classes(), "C")?)?;
    for &c in ds.class_counts() {
        w.write_u32::<LittleEndian>(u32_of(c, "class count")?)?;
    }
    write_f32s(w, ds.features().iter().copied())?;
    for &y in ds.labels_for_eval() {
        w.write_u32::<LittleEndian>(y as u32)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read, T: Scalar>(r: &mut R) -> Result<Dataset<T>> {
    expect_magic(r, DATASET_MAGIC)?;
    let n = read_len(r)?;
    let d = read_len(r)?;
    let c = read_len(r)?;
    let counts = read_u32s(r, c)?;
    let features = Array2::from_shape_vec((n, d), read_f32s(r, n * d)?)
        .map_err(|e| TaseError::Format(e.to_string()))?;
    let labels = read_u32s(r, n)?;
    expect_eof(r)?;
    let ds = Dataset::new(features, labels, c)?;
    if ds.class_counts() != counts.as_slice() {
        return Err(TaseError::Format("header class counts disagree with labels".into()));
    }
    Ok(ds)
}

fn write_dense<W: Write, T: Scalar>(w: &mut W, layers: &[Dense<T>]) -> Result<()> {
    for l in layers {
        let (rows, cols) = l.weight.dim();
        w.write_u32::<LittleEndian>(u32_of(rows, "rows")?)?;
        w.write_u32::<LittleEndian>(u32_of(cols, "cols")?)?;
        write_f32s(w, l.weight.iter().copied())?;
        w.write_u32::<LittleEndian>(u32_of(l.bias.len(), "bias length")?)?;
        write_f32s(w, l.bias.iter().copied())?;
    }
    Ok(())
}

fn read_dense<R: Read, T: Scalar>(r: &mut R, spec: &MlpSpec) -> Result<Vec<Dense<T>>> {
    spec.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let (rows, cols) = (read_len(r)?, read_len(r)?);
            if (rows, cols) != (fan_in, fan_out) {
                return Err(TaseError::Format(format!(
                    "tensor {rows}x{cols} where spec expects {fan_in}x{fan_out}"
                )));
            }
            let weight = Array2::from_shape_vec((rows, cols), read_f32s(r, rows * cols)?)
                .map_err(|e| TaseError::Format(e.to_string()))?;
            let len = read_len(r)?;
            if len != fan_out {
                return Err(TaseError::Format(format!("bias of length {len}, expected {fan_out}")));
            }
            Ok(Dense {
                weight,
                bias: Array1::from(read_f32s(r, len)?),
            })
        })
        .collect()
}

/// Parameters plus what is needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub epochs_completed: usize,
    pub momentum: Option<Gradients<T>>,
}

pub fn write_checkpoint<W: Write, T: Scalar>(w: &mut W, ckpt: &Checkpoint<T>) -> Result<()> {
    let spec = ckpt.params.spec();
    w.write_all(CHECKPOINT_MAGIC)?;
    for dims in [&spec.encoder_dims, &spec.proj_dims] {
        w.write_u32::<LittleEndian>(u32_of(dims.len(), "dims")?)?;
        for &d in dims.iter() {
            w.write_u32::<LittleEndian>(u32_of(d, "width")?)?;
        }
    }
    write_dense(w, ckpt.params.layers())?;
    w.write_u32::<LittleEndian>(u32_of(ckpt.epochs_completed, "epoch")?)?;
    match &ckpt.momentum {
        Some(buf) => {
            w.write_u32::<LittleEndian>(1)?;
            write_dense(w, &buf.layers)?;
        }
        None => w.write_u32::<LittleEndian>(0)?,
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, T: Scalar>(r: &mut R) -> Result<Checkpoint<T>> {
    expect_magic(r, CHECKPOINT_MAGIC)?;
    let mut dims = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = read_len(r)?;
        dims.push(read_u32s(r, n)?);
    }
    let proj = dims.pop().unwrap();
    let enc = dims.pop().unwrap();
    let spec = MlpSpec::new(enc, proj).map_err(|e| TaseError::Format(e.to_string()))?;
    let layers = read_dense(r, &spec)?;
    let epochs_completed = read_len(r)?;
    let momentum = match r.read_u32::<LittleEndian>()? {
        0 => None,
        1 => Some(Gradients {
            layers: read_dense(r, &spec)?,
        }),
        f => return Err(TaseError::Format(format!("bad momentum flag {f}"))),
    };
    expect_eof(r)?;
    Ok(Checkpoint {
        params: ModelParams::from_layers(spec, layers)?,
        epochs_completed,
        momentum,
    })
}

pub fn write_pseudo_state<W: Write, T: Scalar>(w: &mut W, state: &PseudoState<T>) -> Result<()> {
    w.write_all(PSEUDO_MAGIC)?;
    w.write_u32::<LittleEndian>(u32_of(state.len(), "N")?)?;
    w.write_u32::<LittleEndian>(u32_of(state.k(), "K")?)?;
    for &m in state.assignments() {
        w.write_u32::<LittleEndian>(m as u32)?;
    }
    for &p in state.sizes() {
        w.write_u32::<LittleEndian>(u32_of(p, "cluster size")?)?;
    }
    write_f32s(w, state.centroids().iter().copied())
}

/// Read a pseudo-state dump. `epoch_computed` is not part of the format and is
/// supplied by the caller; inertia is not stored and comes back as NaN.
pub fn read_pseudo_state<R: Read, T: Scalar>(r: &mut R, epoch_computed: usize) -> Result<PseudoState<T>> {
    expect_magic(r, PSEUDO_MAGIC)?;
    let n = read_len(r)?;
    let k = read_len(r)?;
    let assignments = read_u32s(r, n)?;
    let sizes = read_u32s(r, k)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if k == 0 || rest.len() % (4 * k) != 0 {
        return Err(TaseError::Format("centroid block length is not a multiple of 4*K".into()));
    }
    let d = rest.len() / (4 * k);
    let centroids = Array2::from_shape_vec((k, d), read_f32s(&mut rest.as_slice(), k * d)?)
        .map_err(|e| TaseError::Format(e.to_string()))?;
    let state = PseudoState::from_parts(assignments, centroids, epoch_computed, f64::NAN)?;
    if state.sizes() != sizes.as_slice() {
        return Err(TaseError::Format("stored cluster sizes disagree with assignments".into()));
    }
    Ok(state)
}

/// Embeddings with their ground-truth labels, for evaluating external features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump<T> {
    pub rows: Array2<T>,
    pub labels: Vec<usize>,
}

pub fn write_embeddings<W: Write, T: Scalar>(w: &mut W, dump: &EmbeddingDump<T>) -> Result<()> {
    if dump.rows.nrows() != dump.labels.len() {
        return Err(TaseError::shape("embedding rows and labels differ in length"));
    }
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_u32::<LittleEndian>(u32_of(dump.rows.nrows(), "N")?)?;
    w.write_u32::<LittleEndian>(u32_of(dump.rows.ncols(), "d")?)?;
    write_f32s(w, dump.rows.iter().copied())?;
    for &y in &dump.labels {
        w.write_u32::<LittleEndian>(u32_of(y, "label")?)?;
    }
    Ok(())
}

pub fn read_embeddings<R: Read, T: Scalar>(r: &mut R) -> Result<EmbeddingDump<T>> {
    expect_magic(r, EMBEDDING_MAGIC)?;
    let n = read_len(r)?;
    let d = read_len(r)?;
    let rows = Array2::from_shape_vec((n, d), read_f32s(r, n * d)?).map_err(|e| TaseError::Format(e.to_string()))?;
    let labels = read_u32s(r, n)?;
    expect_eof(r)?;
    Ok(EmbeddingDump { rows, labels })
}

/// Peek at the 8-byte magic of a file.
pub fn sniff_magic(path: &Path) -> Result<[u8; 8]> {
    let mut buf = [0u8; 8];
    File::open(path)?.read_exact(&mut buf)?;
    Ok(buf)
}

macro_rules! path_io {
    ($save:ident, $load:ident, $write:ident, $read:ident, $ty:ty) => {
        pub fn $save<T: Scalar>(path: &Path, value: &$ty) -> Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            $write(&mut w, value)?;
            w.flush()?;
            Ok(())
        }

        pub fn $load<T: Scalar>(path: &Path) -> Result<$ty> {
            $read(&mut BufReader::new(File::open(path)?))
        }
    };
}

path_io!(save_dataset, load_dataset, write_dataset, read_dataset, Dataset<T>);
path_io!(save_checkpoint, load_checkpoint, write_checkpoint, read_checkpoint, Checkpoint<T>);
path_io!(save_embeddings, load_embeddings, write_embeddings, read_embeddings, EmbeddingDump<T>);

pub fn save_pseudo_state<T: Scalar>(path: &Path, state: &PseudoState<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pseudo_state(&mut w, state)?;
    w.flush()?;
    Ok(())
}

pub fn load_pseudo_state<T: Scalar>(path: &Path, epoch_computed: usize) -> Result<PseudoState<T>> {
    read_pseudo_state(&mut BufReader::new(File::open(path)?), epoch_computed)
}
