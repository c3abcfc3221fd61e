//! On-disk formats: the tensor container, KITTI `.bin` point clouds and
//! KITTI-style calibration text.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! b"PGTENSOR" | u32 version | u64 meta_len | meta (UTF-8 JSON) | u32 count
//! count x ( u32 name_len | name | u8 dtype | u32 ndim | u64 x ndim shape
//!           | u64 payload_len | payload, row-major )
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::rangeview::{Calibration, Mat34, Mat44, PointCloud};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PGTENSOR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Entry {
    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
            Entry::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::U8 { shape, .. } => shape,
        }
    }
}

/// Named tensors plus JSON metadata. Entries are kept sorted by name so the
/// byte encoding is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub entries: BTreeMap<String, Entry>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new(Value::Object(Default::default()))
    }
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let e = match T::DTYPE {
            DType::F64 => Entry::F64(t.cast()),
            _ => Entry::F32(t.cast()),
        };
        self.entries.insert(name.into(), e);
    }

    pub fn insert_u8(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u8>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("u8 payload of {} for shape {shape:?}", data.len())));
        }
        self.entries.insert(
            name.into(),
            Entry::U8 {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    /// Float tensor converted to `T`; u8 entries are rejected.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match self.entry(name)? {
            Entry::F32(t) => Ok(t.cast()),
            Entry::F64(t) => Ok(t.cast()),
            Entry::U8 { .. } => Err(Error::Format(format!("tensor '{name}' is u8, expected float"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.entry(name)? {
            Entry::U8 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Format(format!("tensor '{name}' is float, expected u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype().code());
            out.extend_from_slice(&(e.shape().len() as u32).to_le_bytes());
            for &d in e.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let mut payload = Vec::new();
            match e {
                Entry::F32(t) => t.data().iter().for_each(|v| v.to_le_bytes_vec(&mut payload)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.to_le_bytes_vec(&mut payload)),
                Entry::U8 { data, .. } => payload.extend_from_slice(data),
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a tensor container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::Format(format!("unknown dtype for '{name}'")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload_len = r.u64()? as usize;
            if payload_len != numel * dtype.size() {
                return Err(Error::Format(format!(
                    "'{name}': payload {payload_len} bytes for shape {shape:?}"
                )));
            }
            let payload = r.take(payload_len)?;
            let entry = match dtype {
                DType::F32 => Entry::F32(decode(&shape, payload)?),
                DType::F64 => Entry::F64(decode(&shape, payload)?),
                DType::U8 => Entry::U8 {
                    shape,
                    data: payload.to_vec(),
                },
            };
            entries.insert(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { meta, entries })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let size = std::mem::size_of::<T>();
    let data = payload.chunks_exact(size).map(T::from_le_slice).collect();
    Tensor::from_vec(shape, data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("container truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        e.into()
    })
}

/// KITTI velodyne record stream: `(x, y, z, intensity)` as f32, no header.
pub fn kitti_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 16);
    for (p, &e) in cloud.points.iter().zip(&cloud.intensity) {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, e] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a KITTI `.bin` buffer. Intensities are clamped to `[0, 1]`.
pub fn parse_kitti(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "KITTI point buffer of {} bytes is not a whole number of 16-byte records",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let (x, y, z, e) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && e.is_finite()) {
            return Err(Error::NonFinite("KITTI record with non-finite value".into()));
        }
        points.push([x as f64, y as f64, z as f64]);
        intensity.push(e.clamp(0.0, 1.0));
    }
    PointCloud::new(points, intensity)
}

pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &kitti_bytes(cloud))
}

pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    parse_kitti(&fs::read(path)?)
}

/// `P: <12 floats>` and `Tr: <16 floats>` lines, row-major.
pub fn format_calib(calib: &Calibration) -> String {
    let join = |v: Vec<f64>| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    format!(
        "P: {}\nTr: {}\n",
        join(calib.k.iter().flatten().copied().collect()),
        join(calib.t.iter().flatten().copied().collect())
    )
}

/// Accepts the output of [`format_calib`]. `Tr` may also carry 12 values
/// (KITTI's 3x4 form), in which case the bottom row `(0,0,0,1)` is implied.
pub fn parse_calib(text: &str) -> Result<Calibration> {
    let mut p = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let vals = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("calibration '{key}': {e}")))?;
        match key.trim() {
            "P" | "P2" => p = Some(vals),
            "Tr" | "Tr_velo_to_cam" => tr = Some(vals),
            _ => {}
        }
    }
    let p = p.ok_or_else(|| Error::Format("calibration lacks a P line".into()))?;
    let tr = tr.ok_or_else(|| Error::Format("calibration lacks a Tr line".into()))?;
    if p.len() != 12 {
        return Err(Error::Format(format!("P has {} values, expected 12", p.len())));
    }
    let mut k: Mat34 = [[0.0; 4]; 3];
    for (i, v) in p.iter().enumerate() {
        k[i / 4][i % 4] = *v;
    }
    let mut t: Mat44 = [[0.0; 4]; 4];
    t[3][3] = 1.0;
    match tr.len() {
        12 | 16 => {
            for (i, v) in tr.iter().enumerate() {
                t[i / 4][i % 4] = *v;
            }
        }
        n => return Err(Error::Format(format!("Tr has {n} values, expected 12 or 16"))),
    }
    Calibration::new(k, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::camera_rig;
    use proptest::prelude::*;

    #[test]
    fn container_round_trip_all_dtypes() {
        let mut c = Container::new(serde_json::json!({"kind": "test", "n": 3}));
        c.insert("a", Tensor::<f32>::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        c.insert("b", Tensor::<f64>::from_f64(&[1], &[std::f64::consts::PI]).unwrap());
        c.insert_u8("c", &[2, 2], vec![0, 1, 254, 255]).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get::<f64>("b").unwrap().data()[0], std::f64::consts::PI);
        assert!(back.get::<f32>("c").is_err());
        assert!(back.get::<f32>("missing").is_err());
    }

    #[test]
    fn container_rejects_corruption() {
        let mut c = Container::default();
        c.insert("x", Tensor::<f32>::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }

    #[test]
    fn container_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgt");
        let mut c = Container::default();
        c.insert("x", Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap());
        c.write(&path).unwrap();
        assert_eq!(Container::read(&path).unwrap(), c);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn kitti_layout_is_four_f32_per_point() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]], vec![0.5]).unwrap();
        let b = kitti_bytes(&cloud);
        assert_eq!(b.len(), 16);
        assert_eq!(f32::from_le_bytes(b[8..12].try_into().unwrap()), 3.0);
        assert_eq!(f32::from_le_bytes(b[12..16].try_into().unwrap()), 0.5);
        assert!(parse_kitti(&b[..15]).is_err());
    }

    #[test]
    fn calib_round_trip_and_kitti_3x4() {
        for cam in camera_rig(4, 64, 128).unwrap() {
            let back = parse_calib(&format_calib(&cam.calib)).unwrap();
            assert_eq!(back, cam.calib);
        }
        let text = "P2: 7 0 3 0 0 7 2 0 0 0 1 0\nTr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
        let c = parse_calib(text).unwrap();
        assert_eq!(c.t[3], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.t[2][0], 1.0);
    }

    proptest! {
        #[test]
        fn kitti_round_trip_is_exact_in_f32(
            pts in prop::collection::vec(((-80f32..80.0), (-80f32..80.0), (-5f32..5.0), (0f32..=1.0)), 0..40)
        ) {
            let cloud = PointCloud::new(
                pts.iter().map(|p| [p.0 as f64, p.1 as f64, p.2 as f64]).collect(),
                pts.iter().map(|p| p.3).collect(),
            ).unwrap();
            let back = parse_kitti(&kitti_bytes(&cloud)).unwrap();
            prop_assert_eq!(back, cloud);
        }
    }
}
