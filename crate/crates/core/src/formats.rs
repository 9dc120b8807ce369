//! Binary file formats: VOLB volumes, IMGF images, CKPT checkpoints and
//! 16-bit PGM previews. All multi-byte values are little-endian except PGM
//! samples, which that format defines as big-endian.

use std::fs;
use std::path::Path;

use crate::drr::Image;
use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume, VoxelVolume};

const VERSION: u8 = 1;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so a failed run leaves no partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cursor that reports the byte offset of whatever it failed to read.
struct Reader<'a> {
    what: &'a str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'a str, buf: &'a [u8]) -> Self {
        Reader { what, buf, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: self.what.to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {field}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u8("version")?;
        if v != VERSION {
            return Err(Error::Version {
                what: self.what.to_string(),
                version: v,
            });
        }
        Ok(())
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?, field)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("extent fits u32").to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Contents of a VOLB file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolbData {
    F32(VoxelVolume),
    U8(MaskVolume),
}

fn volb_header<T: Copy>(v: &Volume<T>, dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(30 + v.len() * 4);
    out.extend_from_slice(b"VOLB");
    out.push(VERSION);
    out.push(dtype);
    for d in v.dims() {
        put_u32(&mut out, d);
    }
    put_f32s(&mut out, &v.spacing());
    out
}

pub fn encode_volb_f32(v: &VoxelVolume) -> Vec<u8> {
    let mut out = volb_header(v, 0);
    put_f32s(&mut out, v.data());
    out
}

pub fn encode_volb_u8(v: &MaskVolume) -> Vec<u8> {
    let mut out = volb_header(v, 1);
    out.extend_from_slice(v.data());
    out
}

pub fn decode_volb(bytes: &[u8]) -> Result<VolbData> {
    let mut r = Reader::new("VOLB", bytes);
    r.magic(b"VOLB")?;
    r.version()?;
    let dtype_at = r.pos;
    let dtype = r.u8("dtype")?;
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        *d = r.u32(["depth", "height", "width"][a])? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r.f32("spacing")?;
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n = n.ok_or_else(|| r.err("dimension product overflows"))?;
    let header_end = r.pos;
    let to_err = |e: Error| match e {
        Error::Config(msg) => Error::Format {
            what: "VOLB".into(),
            offset: header_end,
            msg,
        },
        e => e,
    };
    let out = match dtype {
        0 => VolbData::F32(Volume::new(dims, spacing, r.f32s(n, "voxel data")?).map_err(to_err)?),
        1 => VolbData::U8(Volume::new(dims, spacing, r.take(n, "voxel data")?.to_vec()).map_err(to_err)?),
        other => {
            r.pos = dtype_at;
            return Err(r.err(format!("unknown dtype {other}")));
        }
    };
    r.finish()?;
    Ok(out)
}

pub fn write_volume(path: &Path, v: &VoxelVolume) -> Result<()> {
    write_file(path, &encode_volb_f32(v))
}

pub fn write_mask(path: &Path, v: &MaskVolume) -> Result<()> {
    write_file(path, &encode_volb_u8(v))
}

pub fn read_volume(path: &Path) -> Result<VoxelVolume> {
    match decode_volb(&read_file(path)?)? {
        VolbData::F32(v) => Ok(v),
        VolbData::U8(_) => Err(Error::config(format!(
            "{}: expected f32 volume, found mask",
            path.display()
        ))),
    }
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match decode_volb(&read_file(path)?)? {
        VolbData::U8(v) => Ok(v),
        VolbData::F32(_) => Err(Error::config(format!(
            "{}: expected u8 mask, found f32 volume",
            path.display()
        ))),
    }
}

pub fn encode_imgf(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + img.data().len() * 4);
    out.extend_from_slice(b"IMGF");
    out.push(VERSION);
    put_u32(&mut out, img.rows());
    put_u32(&mut out, img.cols());
    put_f32s(&mut out, &[img.pixel_mm()]);
    put_f32s(&mut out, img.data());
    out
}

pub fn decode_imgf(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new("IMGF", bytes);
    r.magic(b"IMGF")?;
    r.version()?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let pixel = r.f32("pixel spacing")?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| r.err("dimension product overflows"))?;
    let header_end = r.pos;
    let data = r.f32s(n, "pixel data")?;
    r.finish()?;
    Image::new(rows, cols, pixel, data).map_err(|e| Error::Format {
        what: "IMGF".into(),
        offset: header_end,
        msg: e.to_string(),
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_imgf(img))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_imgf(&read_file(path)?)
}

/// One named tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CkptEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_ckpt(entries: &[CkptEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"CKPT");
    out.push(VERSION);
    put_u32(&mut out, entries.len());
    for e in entries {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.dims.len());
        for &d in &e.dims {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, &e.data);
    }
    out
}

pub fn decode_ckpt(bytes: &[u8]) -> Result<Vec<CkptEntry>> {
    let mut r = Reader::new("CKPT", bytes);
    r.magic(b"CKPT")?;
    r.version()?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Format {
                what: "CKPT".into(),
                offset: at,
                msg: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            r.pos -= 4;
            return Err(r.err(format!("implausible rank {rank} for `{name}`")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err("dimension product overflows"))?;
        let data = r.f32s(n, "tensor data")?;
        entries.push(CkptEntry { name, dims, data });
    }
    r.finish()?;
    Ok(entries)
}

/// Binary 16-bit PGM (`P5`, maxval 65535) of `data` scaled from its own
/// min/max range.
pub fn encode_pgm16(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in data {
        let t = if range > 0.0 { (v - lo) / range } else { 0.0 };
        let q = (t * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    write_file(path, &encode_pgm16(rows, cols, data))
}
