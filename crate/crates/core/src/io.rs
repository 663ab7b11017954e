//! Binary grid (`PVOX`) and point cloud (`PPTS`) formats, plus JSON helpers.
//!
//! Everything is little-endian. A PVOX file is
//!
//! ```text
//! "PVOX" | version u32 | kind u32 | H u32 | W u32 | Z u32 | D u32
//!        | origin 3 x f64 | cell_size 3 x f64 | payload (row-major)
//! ```
//!
//! with kind 0 = dense f32 features (D channels), 1 = semantic u16,
//! 2 = instance u32, 3 = mask u8. For semantic payloads the D slot carries
//! the class count C; for instance and mask payloads it is 1.
//!
//! A PPTS file is `"PPTS" | version u32 | count u32` followed by `count`
//! 18-byte records `x f32 | y f32 | z f32 | label u16 | instance u32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, DenseVolume, InstanceGrid, SemanticGrid, VoxelGridSpec};
use crate::supervision::{LabeledPoint, LabeledPointCloud};

pub const PVOX_MAGIC: &[u8; 4] = b"PVOX";
pub const PPTS_MAGIC: &[u8; 4] = b"PPTS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum PayloadKind {
    Dense = 0,
    Semantic = 1,
    Instance = 2,
    Mask = 3,
}

impl PayloadKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Self::Dense),
            1 => Ok(Self::Semantic),
            2 => Ok(Self::Instance),
            3 => Ok(Self::Mask),
            other => Err(pvox_err(format!("unknown payload kind {other}"))),
        }
    }
}

/// Any grid that can live in a PVOX file.
#[derive(Debug, Clone, PartialEq)]
pub enum Pvox {
    Dense(DenseVolume),
    Semantic(SemanticGrid),
    Instance(InstanceGrid),
    Mask(BinaryMask),
}

impl Pvox {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Pvox::Dense(_) => PayloadKind::Dense,
            Pvox::Semantic(_) => PayloadKind::Semantic,
            Pvox::Instance(_) => PayloadKind::Instance,
            Pvox::Mask(_) => PayloadKind::Mask,
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        match self {
            Pvox::Dense(v) => v.spec(),
            Pvox::Semantic(g) => g.spec(),
            Pvox::Instance(g) => g.spec(),
            Pvox::Mask(m) => m.spec(),
        }
    }
}

fn pvox_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PVOX",
        reason: reason.into(),
    }
}

fn ppts_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PPTS",
        reason: reason.into(),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| pvox_err(format!("{what} {v} does not fit in u32")))
}

pub fn write_pvox<W: Write>(grid: &Pvox, mut w: W) -> Result<()> {
    let spec = grid.spec();
    let d = match grid {
        Pvox::Dense(v) => v.channels(),
        Pvox::Semantic(g) => g.num_classes() as usize,
        Pvox::Instance(_) | Pvox::Mask(_) => 1,
    };
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(PVOX_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.kind() as u32).to_le_bytes());
    for dim in spec.dims() {
        buf.extend_from_slice(&to_u32(dim, "dimension")?.to_le_bytes());
    }
    buf.extend_from_slice(&to_u32(d, "channel count")?.to_le_bytes());
    for v in spec.origin().into_iter().chain(spec.cell_size()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;

    let mut w = BufWriter::new(w);
    match grid {
        Pvox::Dense(v) => {
            for (n, &x) in v.data().iter().enumerate() {
                let narrowed = x as f32;
                if !narrowed.is_finite() {
                    return Err(pvox_err(format!("value {x} at {n} overflows f32")));
                }
                w.write_all(&narrowed.to_le_bytes())?;
            }
        }
        Pvox::Semantic(g) => {
            for &l in g.labels() {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        Pvox::Instance(g) => {
            for &id in g.ids() {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        Pvox::Mask(m) => {
            for &b in m.bits() {
                w.write_all(&[b as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub fn read_pvox<R: Read>(r: R) -> Result<Pvox> {
    let mut r = BufReader::new(r);
    if &read_array::<4, _>(&mut r)? != PVOX_MAGIC {
        return Err(pvox_err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(pvox_err(format!("unsupported version {version}")));
    }
    let kind = PayloadKind::from_u32(read_u32(&mut r)?)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let channels = read_u32(&mut r)? as usize;
    let mut geo = [0f64; 6];
    for v in &mut geo {
        *v = f64::from_le_bytes(read_array(&mut r)?);
    }
    let spec = VoxelGridSpec::new(dims, [geo[0], geo[1], geo[2]], [geo[3], geo[4], geo[5]])?;
    let cells = spec.num_cells();

    let grid = match kind {
        PayloadKind::Dense => {
            let mut data = Vec::with_capacity(cells * channels);
            for _ in 0..cells * channels {
                data.push(f32::from_le_bytes(read_array(&mut r)?) as f64);
            }
            Pvox::Dense(DenseVolume::new(spec, channels, data)?)
        }
        PayloadKind::Semantic => {
            let num_classes = u16::try_from(channels)
                .map_err(|_| pvox_err(format!("class count {channels} exceeds u16")))?;
            let mut labels = Vec::with_capacity(cells);
            for _ in 0..cells {
                labels.push(u16::from_le_bytes(read_array(&mut r)?));
            }
            Pvox::Semantic(SemanticGrid::new(spec, num_classes, labels)?)
        }
        PayloadKind::Instance => {
            let mut ids = Vec::with_capacity(cells);
            for _ in 0..cells {
                ids.push(read_u32(&mut r)?);
            }
            Pvox::Instance(InstanceGrid::new(spec, ids)?)
        }
        PayloadKind::Mask => {
            let mut bits = Vec::with_capacity(cells);
            for _ in 0..cells {
                match read_array::<1, _>(&mut r)?[0] {
                    0 => bits.push(false),
                    1 => bits.push(true),
                    other => return Err(pvox_err(format!("mask byte {other} is not 0/1"))),
                }
            }
            Pvox::Mask(BinaryMask::new(spec, bits)?)
        }
    };
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(pvox_err("trailing bytes after payload"));
    }
    Ok(grid)
}

pub fn pvox_to_bytes(grid: &Pvox) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_pvox(grid, &mut out)?;
    Ok(out)
}

pub fn save_pvox(grid: &Pvox, path: impl AsRef<Path>) -> Result<()> {
    write_pvox(grid, File::create(path)?)
}

pub fn load_pvox(path: impl AsRef<Path>) -> Result<Pvox> {
    read_pvox(File::open(path)?)
}

macro_rules! typed_loader {
    ($name:ident, $variant:ident, $ty:ty, $label:literal) => {
        pub fn $name(path: impl AsRef<Path>) -> Result<$ty> {
            match load_pvox(path)? {
                Pvox::$variant(g) => Ok(g),
                other => Err(pvox_err(format!(
                    concat!("expected ", $label, " payload, found {:?}"),
                    other.kind()
                ))),
            }
        }
    };
}

typed_loader!(load_dense, Dense, DenseVolume, "dense");
typed_loader!(load_semantic, Semantic, SemanticGrid, "semantic");
typed_loader!(load_instance, Instance, InstanceGrid, "instance");
typed_loader!(load_mask, Mask, BinaryMask, "mask");

pub fn write_ppts<W: Write>(pc: &LabeledPointCloud, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let count = u32::try_from(pc.points().len())
        .map_err(|_| ppts_err("more than u32::MAX points"))?;
    w.write_all(PPTS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for p in pc.points() {
        for c in p.position {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&p.label.to_le_bytes())?;
        w.write_all(&p.instance.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a PPTS stream; labels are validated against `num_classes`.
pub fn read_ppts<R: Read>(r: R, num_classes: u16) -> Result<LabeledPointCloud> {
    let mut r = BufReader::new(r);
    if &read_array::<4, _>(&mut r)? != PPTS_MAGIC {
        return Err(ppts_err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(ppts_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let rec: [u8; 18] = read_array(&mut r)?;
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
        points.push(LabeledPoint {
            position: [f(0), f(4), f(8)],
            label: u16::from_le_bytes([rec[12], rec[13]]),
            instance: u32::from_le_bytes(rec[14..18].try_into().unwrap()),
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ppts_err("trailing bytes after records"));
    }
    LabeledPointCloud::new(points, num_classes)
}

pub fn save_ppts(pc: &LabeledPointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_ppts(pc, File::create(path)?)
}

pub fn load_ppts(path: impl AsRef<Path>, num_classes: u16) -> Result<LabeledPointCloud> {
    read_ppts(File::open(path)?, num_classes)
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// One compact JSON object per line.
pub fn write_json_lines<T: Serialize, W: Write>(items: &[T], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json_lines<T: DeserializeOwned, R: Read>(r: R) -> Result<Vec<T>> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([2, 3, 2], [-1.0, 0.5, 2.0], [0.5, 0.25, 1.0]).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let mask = BinaryMask::new(spec(), (0..12).map(|n| n % 3 == 0).collect()).unwrap();
        let bytes = pvox_to_bytes(&Pvox::Mask(mask)).unwrap();
        assert_eq!(&bytes[0..4], b"PVOX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), -1.0);
        assert_eq!(bytes.len(), 4 + 4 * 6 + 8 * 6 + 12);
        assert_eq!(&bytes[76..79], &[1, 0, 0]);
    }

    #[test]
    fn every_payload_kind_round_trips() {
        let s = spec();
        let grids = vec![
            Pvox::Dense(DenseVolume::from_fn(s, 2, |c, f| {
                f[0] = c[0] as f64 * 0.5;
                f[1] = -(c[2] as f64);
            })
            .unwrap()),
            Pvox::Semantic(SemanticGrid::new(s, 5, (0..12).map(|n| (n % 7) as u16).collect()).unwrap()),
            Pvox::Instance(InstanceGrid::new(s, (0..12).map(|n| n % 4).collect()).unwrap()),
            Pvox::Mask(BinaryMask::new(s, (0..12).map(|n| n % 2 == 0).collect()).unwrap()),
        ];
        for g in grids {
            let bytes = pvox_to_bytes(&g).unwrap();
            let back = read_pvox(&bytes[..]).unwrap();
            assert_eq!(back, g);
            assert_eq!(pvox_to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corrupt_pvox() {
        let g = Pvox::Instance(InstanceGrid::zeros(spec()));
        let mut bytes = pvox_to_bytes(&g).unwrap();
        assert!(read_pvox(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_pvox(&bytes[..]).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(read_pvox(&bytes[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn ppts_round_trip() {
        let pc = LabeledPointCloud::new(
            vec![
                LabeledPoint { position: [1.25, -3.0, 0.1], label: 2, instance: 7 },
                LabeledPoint { position: [0.0, 0.0, 0.0], label: 1, instance: 0 },
            ],
            4,
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_ppts(&pc, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 12 + 2 * 18);
        let back = read_ppts(&bytes[..], 4).unwrap();
        assert_eq!(back, pc);
        let mut again = Vec::new();
        write_ppts(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
        // label 2 is out of range for a single-class taxonomy
        assert!(read_ppts(&bytes[..], 1).is_err());
    }
}
