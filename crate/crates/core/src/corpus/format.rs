//! `VGCD` container: little-endian header, named tables, then records.
//!
//! ```text
//! magic "VGCD" | version u16 | split (u16 len + utf8)
//! n_samples u32 | n_v u32 | d_v u32 | n_a u32 | n_mel u32
//! n_tables u32 | per table: name (u16 len + utf8), rows u32, cols u32, f64 payload
//! per record: id (u16 len + utf8), start u32, end u32, event u32 (u32::MAX = none),
//!             audio_valid u32, video rows u32, cols u32, f64 payload,
//!             audio rows u32, cols u32, f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{CorpusFile, GroundingSample, Span};
use crate::numerics::{read_exact, read_f64, read_u16, read_u32, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VGCD";
const VERSION: u16 = 1;
const NO_EVENT: u32 = u32::MAX;

pub(super) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Invalid(format!("string too long: {s:.32}...")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(super) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
}

pub(super) fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(super) fn write_matrix<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let (r, c) = t.dims2()?;
    write_u32(w, r)?;
    write_u32(w, c)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(super) fn read_matrix<R: Read>(r: &mut R) -> Result<Tensor> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let n = rows.checked_mul(cols).filter(|&n| n > 0 && n < (1 << 31)).ok_or_else(|| Error::Corrupt(format!("bad matrix dims {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(r)?);
    }
    Tensor::new(&[rows, cols], data)
}

impl CorpusFile {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.split)?;
        for v in [self.samples.len(), self.n_v, self.d_v, self.n_a, self.n_mel] {
            write_u32(w, v)?;
        }
        write_u32(w, self.tables.len())?;
        for (name, t) in &self.tables {
            write_str(w, name)?;
            write_matrix(w, t)?;
        }
        for s in &self.samples {
            write_str(w, &s.sample_id)?;
            write_u32(w, s.span.start)?;
            write_u32(w, s.span.end)?;
            w.write_all(&s.event.unwrap_or(NO_EVENT).to_le_bytes())?;
            write_u32(w, s.audio_valid)?;
            write_matrix(w, &s.video)?;
            write_matrix(w, &s.audio)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Corrupt(format!("bad corpus magic {magic:?}")));
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported corpus version {version}")));
        }
        let split = read_str(r)?;
        let count = read_u32(r)? as usize;
        let n_v = read_u32(r)? as usize;
        let d_v = read_u32(r)? as usize;
        let n_a = read_u32(r)? as usize;
        let n_mel = read_u32(r)? as usize;
        if [n_v, d_v, n_a, n_mel].contains(&0) {
            return Err(Error::Corrupt("zero dimension in corpus header".into()));
        }
        let n_tables = read_u32(r)? as usize;
        let mut tables = Vec::with_capacity(n_tables.min(64));
        for _ in 0..n_tables {
            let name = read_str(r)?;
            let t = read_matrix(r).map_err(|e| e.context(format!("table {name:?}")))?;
            tables.push((name, t));
        }
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let rec = read_record(r).map_err(|e| e.context(format!("record {i}")))?;
            if rec.video.shape() != [n_v, d_v] || rec.audio.shape() != [n_a, n_mel] {
                return Err(Error::Corrupt(format!(
                    "record {i} ({}): video {:?} / audio {:?} do not match header {n_v}x{d_v} / {n_a}x{n_mel}",
                    rec.sample_id,
                    rec.video.shape(),
                    rec.audio.shape()
                )));
            }
            rec.validate().map_err(|e| e.context(format!("record {i}")))?;
            samples.push(rec);
        }
        Ok(CorpusFile { split, n_v, d_v, n_a, n_mel, tables, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn read_record<R: Read>(r: &mut R) -> Result<GroundingSample> {
    let sample_id = read_str(r)?;
    let start = read_u32(r)? as usize;
    let end = read_u32(r)? as usize;
    let event = match read_u32(r)? {
        NO_EVENT => None,
        e => Some(e),
    };
    let audio_valid = read_u32(r)? as usize;
    let video = read_matrix(r)?;
    let audio = read_matrix(r)?;
    Ok(GroundingSample { sample_id, video, audio, span: Span { start, end }, event, audio_valid })
}

/// Reads and validates a corpus file.
pub fn load(path: impl AsRef<Path>) -> Result<CorpusFile> {
    let path = path.as_ref();
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    CorpusFile::read_from(&mut f).map_err(|e| e.context(path.display().to_string()))
}
