//! Dense row-major tensors and the `.ebt` container format.
//!
//! Layout is always `[batch, channel, spatial...]`, last axis fastest. Float to
//! integer conversions round half to even; int8 saturates to `[-127, 127]`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const I8_QMAX: i32 = 127;
pub const I8_QMIN: i32 = -127;

const EBT_MAGIC: &[u8; 4] = b"EBT1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {actual} does not match shape product {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("window start {start:?} size {size:?} out of bounds for shape {shape:?}")]
    OutOfBounds {
        start: Vec<usize>,
        size: Vec<usize>,
        shape: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected dtype {expected}, found {actual}")]
    DTypeMismatch { expected: DType, actual: DType },
    #[error("invalid shape {0:?}: rank must be >= 1 and every extent >= 1")]
    InvalidShape(Vec<usize>),
    #[error("bad magic in tensor file")]
    BadMagic,
    #[error("malformed tensor file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I32),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "F32",
            DType::I8 => "I8",
            DType::I32 => "I32",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Offset of `index` inside a row-major buffer of the given `shape`.
pub fn row_major_offset(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    shape
        .iter()
        .zip(index)
        .fold(0, |acc, (&extent, &i)| acc * extent + i)
}

pub fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, checking that `data` holds exactly `product(shape)` elements.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        check_shape(&shape)?;
        let expected = shape_len(&shape);
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, TensorData::I8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    /// Copies `data` into a new tensor; the `create` entry point.
    pub fn create<T: Element>(shape: &[usize], data: &[T]) -> Result<Self> {
        Self::new(shape.to_vec(), T::wrap(data.to_vec()))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Self> {
        check_shape(shape)?;
        let n = shape_len(shape);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::I8 => TensorData::I8(vec![0; n]),
            DType::I32 => TensorData::I32(vec![0; n]),
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full_f32(shape: &[usize], value: f32) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: TensorData::F32(vec![value; shape_len(shape)]),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().width()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::I8,
                actual: other.dtype(),
            }),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::I32,
                actual: other.dtype(),
            }),
        }
    }

    /// Element at a multi-index, widened to f64 regardless of dtype.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.rank() || index.iter().zip(&self.shape).any(|(&i, &e)| i >= e) {
            return Err(TensorError::OutOfBounds {
                start: index.to_vec(),
                size: vec![1; index.len()],
                shape: self.shape.clone(),
            });
        }
        let off = row_major_offset(&self.shape, index);
        Ok(match &self.data {
            TensorData::F32(v) => v[off] as f64,
            TensorData::I8(v) => v[off] as f64,
            TensorData::I32(v) => v[off] as f64,
        })
    }

    /// All elements converted to f32 (exact for I8, rounded for large I32).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::I8(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Elementwise conversion. Float to integer rounds half to even and saturates;
    /// the int8 range is `[-127, 127]`.
    pub fn cast_saturating(&self, to: DType) -> Tensor {
        let data = match (&self.data, to) {
            (TensorData::F32(v), DType::F32) => TensorData::F32(v.clone()),
            (TensorData::F32(v), DType::I8) => TensorData::I8(v.iter().map(|&x| f32_to_i8(x)).collect()),
            (TensorData::F32(v), DType::I32) => TensorData::I32(v.iter().map(|&x| f32_to_i32(x)).collect()),
            (TensorData::I8(v), DType::F32) => TensorData::F32(v.iter().map(|&x| x as f32).collect()),
            (TensorData::I8(v), DType::I8) => TensorData::I8(v.iter().map(|&x| x.max(I8_QMIN as i8)).collect()),
            (TensorData::I8(v), DType::I32) => TensorData::I32(v.iter().map(|&x| x as i32).collect()),
            (TensorData::I32(v), DType::F32) => TensorData::F32(v.iter().map(|&x| x as f32).collect()),
            (TensorData::I32(v), DType::I8) => {
                TensorData::I8(v.iter().map(|&x| x.clamp(I8_QMIN, I8_QMAX) as i8).collect())
            }
            (TensorData::I32(v), DType::I32) => TensorData::I32(v.clone()),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Copies the hyper-rectangle `[start, start + size)` out of the tensor.
    pub fn extract_patch(&self, start: &[usize], size: &[usize]) -> Result<Tensor> {
        check_window(&self.shape, start, size)?;
        check_shape(size)?;
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(copy_window(v, &self.shape, start, size)),
            TensorData::I8(v) => TensorData::I8(copy_window(v, &self.shape, start, size)),
            TensorData::I32(v) => TensorData::I32(copy_window(v, &self.shape, start, size)),
        };
        Ok(Tensor {
            shape: size.to_vec(),
            data,
        })
    }

    pub fn write_ebt(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_ebt_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ebt(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ebt_bytes(&bytes)
    }

    pub fn to_ebt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.rank() + self.byte_len());
        out.extend_from_slice(EBT_MAGIC);
        out.push(self.dtype().code());
        out.push(self.rank() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        self.write_payload(&mut out);
        out
    }

    /// Appends the raw little-endian element bytes.
    pub fn write_payload(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    /// Decodes a raw little-endian payload produced by [`Tensor::write_payload`].
    pub fn from_payload(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        check_shape(&shape)?;
        let n = shape_len(&shape);
        if bytes.len() != n * dtype.width() {
            return Err(TensorError::LengthMismatch {
                expected: n * dtype.width(),
                actual: bytes.len(),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }

    pub fn from_ebt_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 6 {
            return Err(TensorError::Malformed("file shorter than header".into()));
        }
        if &bytes[..4] != EBT_MAGIC {
            return Err(TensorError::BadMagic);
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| TensorError::Malformed(format!("unknown dtype code {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        let header_end = 6 + 8 * rank;
        if bytes.len() < header_end {
            return Err(TensorError::Malformed("truncated shape".into()));
        }
        let shape: Vec<usize> = bytes[6..header_end]
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                u64::from_le_bytes(b) as usize
            })
            .collect();
        Self::from_payload(dtype, shape, &bytes[header_end..])
            .map_err(|e| match e {
                TensorError::LengthMismatch { expected, actual } => {
                    TensorError::Malformed(format!("payload is {actual} bytes, expected {expected}"))
                }
                other => other,
            })
    }
}

/// Adds `patch` into `canvas` at `start` and increments `counts` over the same region.
pub fn accumulate_patch(canvas: &mut Tensor, counts: &mut Tensor, patch: &Tensor, start: &[usize]) -> Result<()> {
    if canvas.shape() != counts.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "counts {:?} vs canvas {:?}",
            counts.shape(),
            canvas.shape()
        )));
    }
    if patch.rank() != canvas.rank() {
        return Err(TensorError::ShapeMismatch(format!(
            "patch rank {} vs canvas rank {}",
            patch.rank(),
            canvas.rank()
        )));
    }
    check_window(canvas.shape(), start, patch.shape())?;
    let shape = canvas.shape().to_vec();
    let src = patch.as_f32()?;
    let dst = canvas.as_f32_mut()?;
    for_each_row(&shape, start, patch.shape(), |dst_off, src_off, run| {
        for (d, s) in dst[dst_off..dst_off + run].iter_mut().zip(&src[src_off..src_off + run]) {
            *d += *s;
        }
    });
    let cnt = counts.as_f32_mut()?;
    for_each_row(&shape, start, patch.shape(), |dst_off, _, run| {
        for c in &mut cnt[dst_off..dst_off + run] {
            *c += 1.0;
        }
    });
    Ok(())
}

fn check_window(shape: &[usize], start: &[usize], size: &[usize]) -> Result<()> {
    let bad = start.len() != shape.len()
        || size.len() != shape.len()
        || shape
            .iter()
            .zip(start.iter().zip(size))
            .any(|(&e, (&s, &n))| s + n > e);
    if bad {
        return Err(TensorError::OutOfBounds {
            start: start.to_vec(),
            size: size.to_vec(),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

/// Visits every contiguous last-axis run of a window, passing
/// `(offset in full tensor, offset in window, run length)`.
fn for_each_row(shape: &[usize], start: &[usize], size: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    let run = size[rank - 1];
    let outer: usize = size[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank];
    for row in 0..outer {
        // decode row into the leading window coordinates
        let mut r = row;
        for ax in (0..rank - 1).rev() {
            idx[ax] = start[ax] + r % size[ax];
            r /= size[ax];
        }
        idx[rank - 1] = start[rank - 1];
        f(row_major_offset(shape, &idx), row * run, run);
    }
}

fn copy_window<T: Copy>(src: &[T], shape: &[usize], start: &[usize], size: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(shape_len(size));
    for_each_row(shape, start, size, |off, _, run| out.extend_from_slice(&src[off..off + run]));
    out
}

pub fn f32_to_i8(x: f32) -> i8 {
    if x.is_nan() {
        return 0;
    }
    x.round_ties_even().clamp(I8_QMIN as f32, I8_QMAX as f32) as i8
}

pub fn f32_to_i32(x: f32) -> i32 {
    if x.is_nan() {
        return 0;
    }
    // `as` saturates at the i32 bounds
    x.round_ties_even() as i32
}

/// Element types a [`Tensor`] can hold.
pub trait Element: Copy {
    const DTYPE: DType;
    fn wrap(v: Vec<Self>) -> TensorData;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::F32(v)
    }
}

impl Element for i8 {
    const DTYPE: DType = DType::I8;
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::I8(v)
    }
}

impl Element for i32 {
    const DTYPE: DType = DType::I32;
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::I32(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn create_row_major() {
        let t = Tensor::create(&[2, 2], &[1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]).unwrap(), 3.0);
        let s = Tensor::create(&[1], &[5i8]).unwrap();
        assert_eq!(s.dtype(), DType::I8);
        assert_eq!(s.get(&[0]).unwrap(), 5.0);
        assert!(matches!(
            Tensor::create(&[2], &[1.0f32, 2.0, 3.0]),
            Err(TensorError::LengthMismatch { expected: 2, actual: 3 })
        ));
        assert!(matches!(Tensor::zeros(&[2, 0], DType::F32), Err(TensorError::InvalidShape(_))));
    }

    #[test]
    fn dtype_widths() {
        assert_eq!(DType::F32.width(), 4);
        assert_eq!(DType::I8.width(), 1);
        assert_eq!(DType::I32.width(), 4);
    }

    #[test]
    fn cast_rounding_and_saturation() {
        let t = Tensor::create(&[5], &[1.4f32, -1.6, 300.0, 2.5, -500.0]).unwrap();
        let q = t.cast_saturating(DType::I8);
        assert_eq!(q.as_i8().unwrap(), &[1, -2, 127, 2, -127]);
        let h = Tensor::create(&[4], &[0.5f32, 1.5, -0.5, -2.5]).unwrap();
        assert_eq!(h.cast_saturating(DType::I8).as_i8().unwrap(), &[0, 2, 0, -2]);
        let i = Tensor::create(&[2], &[i32::MAX, -1000]).unwrap();
        assert_eq!(i.cast_saturating(DType::I8).as_i8().unwrap(), &[127, -127]);
        let m = Tensor::create(&[1], &[-128i8]).unwrap();
        assert_eq!(m.cast_saturating(DType::I8).as_i8().unwrap(), &[-127]);
    }

    #[test]
    fn extract_patch_examples() {
        let data: Vec<f32> = (1..=9).map(|x| x as f32).collect();
        let t = Tensor::create(&[3, 3], &data).unwrap();
        let p = t.extract_patch(&[0, 0], &[2, 2]).unwrap();
        assert_eq!(p.as_f32().unwrap(), &[1.0, 2.0, 4.0, 5.0]);
        let p = t.extract_patch(&[1, 1], &[2, 2]).unwrap();
        assert_eq!(p.as_f32().unwrap(), &[5.0, 6.0, 8.0, 9.0]);
        assert!(matches!(
            t.extract_patch(&[2, 2], &[2, 2]),
            Err(TensorError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn accumulate_patch_examples() {
        let mut canvas = Tensor::zeros(&[4], DType::F32).unwrap();
        let mut counts = Tensor::zeros(&[4], DType::F32).unwrap();
        let patch = Tensor::create(&[2], &[1.0f32, 1.0]).unwrap();
        accumulate_patch(&mut canvas, &mut counts, &patch, &[0]).unwrap();
        accumulate_patch(&mut canvas, &mut counts, &patch, &[1]).unwrap();
        assert_eq!(canvas.as_f32().unwrap(), &[1.0, 2.0, 1.0, 0.0]);
        assert_eq!(counts.as_f32().unwrap(), &[1.0, 2.0, 1.0, 0.0]);

        let mut canvas = Tensor::zeros(&[3], DType::F32).unwrap();
        let mut counts = Tensor::zeros(&[3], DType::F32).unwrap();
        let whole = Tensor::create(&[3], &[4.0f32, 5.0, 6.0]).unwrap();
        accumulate_patch(&mut canvas, &mut counts, &whole, &[0]).unwrap();
        assert_eq!(canvas, whole);
        assert_eq!(counts.as_f32().unwrap(), &[1.0, 1.0, 1.0]);

        let mut canvas = Tensor::zeros(&[4], DType::F32).unwrap();
        let mut counts = Tensor::zeros(&[4], DType::F32).unwrap();
        assert!(matches!(
            accumulate_patch(&mut canvas, &mut counts, &patch, &[3]),
            Err(TensorError::OutOfBounds { .. })
        ));
        let mut bad_counts = Tensor::zeros(&[3], DType::F32).unwrap();
        assert!(matches!(
            accumulate_patch(&mut canvas, &mut bad_counts, &patch, &[0]),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ebt_round_trip_and_errors() {
        let t = Tensor::create(&[2, 3], &[1i32, -2, 3, -4, 5, i32::MIN]).unwrap();
        let bytes = t.to_ebt_bytes();
        assert_eq!(&bytes[..4], b"EBT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 2);
        assert_eq!(bytes.len(), 6 + 16 + 24);
        assert_eq!(Tensor::from_ebt_bytes(&bytes).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_ebt_bytes(&bad), Err(TensorError::BadMagic)));
        assert!(matches!(
            Tensor::from_ebt_bytes(&bytes[..bytes.len() - 1]),
            Err(TensorError::Malformed(_))
        ));
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=5)
    }

    proptest! {
        #[test]
        fn create_read_round_trip(shape in shape_strategy(), seed in any::<u64>()) {
            let n = shape_len(&shape);
            let data: Vec<f32> = (0..n).map(|i| (i as u64 ^ seed) as f32).collect();
            let t = Tensor::create(&shape, &data).unwrap();
            let mut idx = vec![0usize; shape.len()];
            for (flat, &v) in data.iter().enumerate() {
                let mut r = flat;
                for ax in (0..shape.len()).rev() {
                    idx[ax] = r % shape[ax];
                    r /= shape[ax];
                }
                prop_assert_eq!(row_major_offset(&shape, &idx), flat);
                prop_assert_eq!(t.get(&idx).unwrap(), v as f64);
            }
        }

        #[test]
        fn extract_then_accumulate_reproduces(shape in shape_strategy(), frac in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 5)) {
            let n = shape_len(&shape);
            let data: Vec<f32> = (0..n).map(|i| i as f32 * 0.5 - 3.0).collect();
            let t = Tensor::create(&shape, &data).unwrap();
            let mut start = Vec::new();
            let mut size = Vec::new();
            for (ax, &e) in shape.iter().enumerate() {
                let s = ((frac[ax].0 * e as f64) as usize).min(e - 1);
                let len = 1 + ((frac[ax].1 * (e - s) as f64) as usize).min(e - s - 1);
                start.push(s);
                size.push(len);
            }
            let patch = t.extract_patch(&start, &size).unwrap();
            let mut canvas = Tensor::zeros(&shape, DType::F32).unwrap();
            let mut counts = Tensor::zeros(&shape, DType::F32).unwrap();
            accumulate_patch(&mut canvas, &mut counts, &patch, &start).unwrap();
            let back = canvas.extract_patch(&start, &size).unwrap();
            prop_assert_eq!(back, patch);
        }

        #[test]
        fn ebt_round_trip(shape in shape_strategy(), v in any::<i8>()) {
            let n = shape_len(&shape);
            let t = Tensor::create(&shape, &vec![v; n]).unwrap();
            prop_assert_eq!(Tensor::from_ebt_bytes(&t.to_ebt_bytes()).unwrap(), t);
        }
    }

    #[test]
    fn i8_round_trip_through_f32() {
        let all: Vec<f32> = (-127..=127).map(|x| x as f32).collect();
        let t = Tensor::create(&[all.len()], &all).unwrap();
        let back = t.cast_saturating(DType::I8).cast_saturating(DType::F32);
        assert_eq!(back, t);
    }
}
