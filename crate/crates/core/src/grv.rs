//! GRV volume files.
//!
//! Layout: magic `GRV1`, then little-endian `u32` dtype tag, `u32` nx, ny,
//! nz, `f64` spacing in mm, then the raw payload in x-fastest order.
//! Tensor volumes store the upper triangle `(xx, xy, xz, yy, yz, zz)` as six
//! `f32` per voxel.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::fields::{FieldError, InvasionMap, ScalarField, Segmentation, Shape, TissueClass, TissueModel};

pub const MAGIC: &[u8; 4] = b"GRV1";
pub const HEADER_LEN: usize = 4 + 4 * 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    U8 = 1,
    F32 = 2,
    F64 = 3,
    Tensor6F32 = 4,
}

impl DType {
    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(DType::U8),
            2 => Some(DType::F32),
            3 => Some(DType::F64),
            4 => Some(DType::Tensor6F32),
            _ => None,
        }
    }

    pub fn voxel_bytes(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Tensor6F32 => 24,
        }
    }
}

#[derive(Debug, Error)]
pub enum GrvError {
    #[error("input not found: {0}")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype tag {0}")]
    UnknownDType(u32),
    #[error("invalid dims {0:?}")]
    InvalidDims([u32; 3]),
    #[error("invalid spacing {0}")]
    InvalidSpacing(f64),
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("NaN in payload at voxel {0}")]
    NanInPayload(usize),
    #[error("invalid content: {0}")]
    Invalid(#[from] FieldError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    Tensor6(Vec<[f32; 6]>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::U8(_) => DType::U8,
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::Tensor6(_) => DType::Tensor6F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::U8(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Tensor6(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoded GRV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Shape,
    pub payload: Payload,
}

impl Volume {
    pub fn new(shape: Shape, payload: Payload) -> Result<Self, GrvError> {
        if payload.len() != shape.len() {
            return Err(FieldError::LengthMismatch {
                expected: shape.len(),
                found: payload.len(),
            }
            .into());
        }
        Ok(Volume { shape, payload })
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.payload.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + self.shape.len() * dtype.voxel_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(dtype as u32).to_le_bytes());
        for d in self.shape.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.shape.spacing_mm.to_le_bytes());
        match &self.payload {
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Tensor6(v) => v.iter().flatten().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GrvError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(GrvError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(GrvError::MalformedHeader(format!(
                "header needs {HEADER_LEN} bytes, file has {}",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let tag = u32_at(4);
        let dtype = DType::from_tag(tag).ok_or(GrvError::UnknownDType(tag))?;
        let dims_raw = [u32_at(8), u32_at(12), u32_at(16)];
        let spacing = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        if dims_raw.contains(&0) {
            return Err(GrvError::InvalidDims(dims_raw));
        }
        let dims = dims_raw.map(|d| d as usize);
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(GrvError::InvalidDims(dims_raw))?;
        let shape = Shape::new(dims, spacing).map_err(|e| match e {
            FieldError::InvalidSpacing(s) => GrvError::InvalidSpacing(s),
            _ => GrvError::InvalidDims(dims_raw),
        })?;
        let body = &bytes[HEADER_LEN..];
        let expected = n
            .checked_mul(dtype.voxel_bytes())
            .ok_or(GrvError::InvalidDims(dims_raw))?;
        if body.len() < expected {
            return Err(GrvError::TruncatedPayload {
                expected,
                found: body.len(),
            });
        }
        if body.len() > expected {
            return Err(GrvError::TrailingBytes(body.len() - expected));
        }
        let payload = match dtype {
            DType::U8 => Payload::U8(body.to_vec()),
            DType::F32 => {
                let v: Vec<f32> = body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if let Some(i) = v.iter().position(|x| x.is_nan()) {
                    return Err(GrvError::NanInPayload(i));
                }
                Payload::F32(v)
            }
            DType::F64 => {
                let v: Vec<f64> = body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if let Some(i) = v.iter().position(|x| x.is_nan()) {
                    return Err(GrvError::NanInPayload(i));
                }
                Payload::F64(v)
            }
            DType::Tensor6F32 => {
                let mut v = Vec::with_capacity(n);
                for (i, c) in body.chunks_exact(24).enumerate() {
                    let mut t = [0f32; 6];
                    for (k, w) in c.chunks_exact(4).enumerate() {
                        t[k] = f32::from_le_bytes(w.try_into().unwrap());
                    }
                    if t.iter().any(|x| x.is_nan()) {
                        return Err(GrvError::NanInPayload(i));
                    }
                    v.push(t);
                }
                Payload::Tensor6(v)
            }
        };
        Ok(Volume { shape, payload })
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, GrvError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => GrvError::NotFound(path.display().to_string()),
        _ => GrvError::Io(e),
    })?;
    Volume::decode(&bytes)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<(), GrvError> {
    fs::write(path, volume.encode())?;
    Ok(())
}

fn mismatch(expected: DType, found: DType) -> GrvError {
    GrvError::DTypeMismatch { expected, found }
}

impl From<&ScalarField> for Volume {
    fn from(f: &ScalarField) -> Self {
        Volume {
            shape: *f.shape(),
            payload: Payload::F64(f.values().to_vec()),
        }
    }
}

impl From<&Segmentation> for Volume {
    fn from(s: &Segmentation) -> Self {
        Volume {
            shape: *s.shape(),
            payload: Payload::U8(s.mask().iter().map(|&m| m as u8).collect()),
        }
    }
}

impl From<&InvasionMap> for Volume {
    fn from(m: &InvasionMap) -> Self {
        Volume {
            shape: *m.shape(),
            payload: Payload::F64(m.times().to_vec()),
        }
    }
}

impl TryFrom<Volume> for ScalarField {
    type Error = GrvError;

    /// Accepts `f32` and `f64` payloads.
    fn try_from(v: Volume) -> Result<Self, GrvError> {
        let values = match v.payload {
            Payload::F64(x) => x,
            Payload::F32(x) => x.into_iter().map(f64::from).collect(),
            other => return Err(mismatch(DType::F64, other.dtype())),
        };
        Ok(ScalarField::new(v.shape, values)?)
    }
}

impl TryFrom<Volume> for Segmentation {
    type Error = GrvError;

    fn try_from(v: Volume) -> Result<Self, GrvError> {
        let Payload::U8(bytes) = v.payload else {
            return Err(mismatch(DType::U8, v.payload.dtype()));
        };
        if let Some(i) = bytes.iter().position(|&b| b > 1) {
            return Err(FieldError::InvalidValue {
                index: i,
                reason: format!("segmentation value {}", bytes[i]),
            }
            .into());
        }
        Ok(Segmentation::new(v.shape, bytes.iter().map(|&b| b == 1).collect())?)
    }
}

impl TryFrom<Volume> for InvasionMap {
    type Error = GrvError;

    fn try_from(v: Volume) -> Result<Self, GrvError> {
        let field = ScalarField::try_from(v)?;
        Ok(InvasionMap::new(*field.shape(), field.into_values())?)
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarField, GrvError> {
    read_volume(path)?.try_into()
}

pub fn read_segmentation(path: impl AsRef<Path>) -> Result<Segmentation, GrvError> {
    read_volume(path)?.try_into()
}

pub fn read_invasion_map(path: impl AsRef<Path>) -> Result<InvasionMap, GrvError> {
    read_volume(path)?.try_into()
}

pub fn write_scalar(field: &ScalarField, path: impl AsRef<Path>) -> Result<(), GrvError> {
    write_volume(&field.into(), path)
}

pub fn write_segmentation(seg: &Segmentation, path: impl AsRef<Path>) -> Result<(), GrvError> {
    write_volume(&seg.into(), path)
}

pub fn write_invasion_map(map: &InvasionMap, path: impl AsRef<Path>) -> Result<(), GrvError> {
    write_volume(&map.into(), path)
}

/// File names of the three tissue volumes inside a tissue directory.
pub const LABELS_FILE: &str = "labels.grv";
pub const FA_FILE: &str = "fa.grv";
pub const TENSOR_FILE: &str = "tensor.grv";

/// Writes `labels.grv` (u8), `fa.grv` (f64) and `tensor.grv` (tensor6).
pub fn write_tissue(tissue: &TissueModel, dir: impl AsRef<Path>) -> Result<(), GrvError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let shape = *tissue.shape();
    let labels = Payload::U8(tissue.labels().iter().map(|&l| l as u8).collect());
    write_volume(&Volume::new(shape, labels)?, dir.join(LABELS_FILE))?;
    write_volume(
        &Volume::new(shape, Payload::F64(tissue.fa().to_vec()))?,
        dir.join(FA_FILE),
    )?;
    write_volume(
        &Volume::new(shape, Payload::Tensor6(tissue.tensors().to_vec()))?,
        dir.join(TENSOR_FILE),
    )
}

pub fn read_tissue(dir: impl AsRef<Path>) -> Result<TissueModel, GrvError> {
    let dir = dir.as_ref();
    let labels_vol = read_volume(dir.join(LABELS_FILE))?;
    let shape = labels_vol.shape;
    let Payload::U8(raw) = labels_vol.payload else {
        return Err(mismatch(DType::U8, labels_vol.payload.dtype()));
    };
    let labels = raw
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            TissueClass::from_u8(b).ok_or(FieldError::InvalidValue {
                index: i,
                reason: format!("tissue label {b}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fa = ScalarField::try_from(read_volume(dir.join(FA_FILE))?)?;
    shape.ensure_same(fa.shape())?;
    let tensor_vol = read_volume(dir.join(TENSOR_FILE))?;
    shape.ensure_same(&tensor_vol.shape)?;
    let Payload::Tensor6(tensor) = tensor_vol.payload else {
        return Err(mismatch(DType::Tensor6F32, tensor_vol.payload.dtype()));
    };
    Ok(TissueModel::new(shape, labels, fa.into_values(), tensor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::NEVER_INVADED;
    use proptest::prelude::*;

    fn shape(nx: usize, ny: usize, nz: usize) -> Shape {
        Shape::new([nx, ny, nz], 1.0).unwrap()
    }

    #[test]
    fn small_float_volume_round_trips_in_x_fastest_order() {
        let f = ScalarField::new(shape(2, 2, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = Volume::from(&f).encode();
        assert_eq!(&bytes[..4], b"GRV1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        let back: ScalarField = Volume::decode(&bytes).unwrap().try_into().unwrap();
        assert_eq!(back, f);
        assert_eq!(back.get(f.shape().index(1, 1, 0)), 3.0);
    }

    #[test]
    fn header_is_bit_exact() {
        let s = Segmentation::new(Shape::new([3, 1, 2], 1.5).unwrap(), vec![true; 6]).unwrap();
        let bytes = Volume::from(&s).encode();
        let mut expected = b"GRV1".to_vec();
        for v in [1u32, 3, 1, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&[1; 6]);
        assert_eq!(bytes, expected);
    }

    fn header(tag: u32, dims: [u32; 3]) -> Vec<u8> {
        let mut b = b"GRV1".to_vec();
        b.extend_from_slice(&tag.to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&1.0f64.to_le_bytes());
        b
    }

    #[test]
    fn zero_dim_is_invalid() {
        let b = header(2, [0, 2, 2]);
        assert!(matches!(Volume::decode(&b), Err(GrvError::InvalidDims(_))));
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut b = header(2, [2, 2, 1]);
        b.extend_from_slice(&[0u8; 12]);
        assert!(matches!(
            Volume::decode(&b),
            Err(GrvError::TruncatedPayload {
                expected: 16,
                found: 12
            })
        ));
    }

    #[test]
    fn distinct_errors_for_distinct_defects() {
        assert!(matches!(Volume::decode(b"NOPE"), Err(GrvError::BadMagic)));
        assert!(matches!(
            Volume::decode(&header(9, [1, 1, 1])),
            Err(GrvError::UnknownDType(9))
        ));
        let mut nan = header(3, [1, 1, 1]);
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Volume::decode(&nan), Err(GrvError::NanInPayload(0))));
        let mut u8vol = header(1, [1, 1, 1]);
        u8vol.push(1);
        let v = Volume::decode(&u8vol).unwrap();
        assert!(matches!(ScalarField::try_from(v), Err(GrvError::DTypeMismatch { .. })));
        let mut bad_seg = header(1, [1, 1, 1]);
        bad_seg.push(7);
        assert!(Segmentation::try_from(Volume::decode(&bad_seg).unwrap()).is_err());
    }

    #[test]
    fn missing_file_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_volume(dir.path().join("nope.grv")),
            Err(GrvError::NotFound(_))
        ));
    }

    #[test]
    fn never_invaded_survives_a_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.grv");
        let m = InvasionMap::new(shape(3, 1, 1), vec![0.0, 2.5, NEVER_INVADED]).unwrap();
        write_invasion_map(&m, &p).unwrap();
        let back = read_invasion_map(&p).unwrap();
        assert_eq!(back, m);
        assert!(!back.is_invaded(2));
    }

    #[test]
    fn segmentation_is_stored_as_u8() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.grv");
        let s = Segmentation::new(shape(4, 1, 1), vec![true, false, false, true]).unwrap();
        write_segmentation(&s, &p).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[HEADER_LEN..], &[1, 0, 0, 1]);
        assert_eq!(read_segmentation(&p).unwrap(), s);
    }

    #[test]
    fn tissue_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = shape(2, 1, 1);
        let t = TissueModel::new(
            s,
            vec![TissueClass::WhiteMatter, TissueClass::Outside],
            vec![0.25, 0.0],
            vec![[0.5, 0.1, 0.0, 0.25, 0.0, 0.25], [0.0; 6]],
        )
        .unwrap();
        write_tissue(&t, dir.path()).unwrap();
        assert_eq!(read_tissue(dir.path()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn every_payload_round_trips_bit_exactly(
            dims in (1usize..5, 1usize..5, 1usize..4),
            spacing in 0.1f64..4.0,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new([dims.0, dims.1, dims.2], spacing).unwrap();
            let n = s.len();
            let payloads = vec![
                Payload::U8((0..n).map(|_| rng.random()).collect()),
                Payload::F32((0..n).map(|_| rng.random_range(-1e6f32..1e6)).collect()),
                Payload::F64((0..n).map(|_| {
                    if rng.random_bool(0.1) { f64::INFINITY } else { rng.random_range(-1e9..1e9) }
                }).collect()),
                Payload::Tensor6((0..n).map(|_| std::array::from_fn(|_| rng.random::<f32>())).collect()),
            ];
            for p in payloads {
                let v = Volume::new(s, p).unwrap();
                let bytes = v.encode();
                let back = Volume::decode(&bytes).unwrap();
                prop_assert_eq!(back.encode(), bytes);
                prop_assert_eq!(back, v);
            }
        }
    }
}
