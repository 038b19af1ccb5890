use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::{
    Dtype, FileKind, FormatError, FrameReader, FrameWriter, Role, TokenClass, MAX_SEQ_LEN,
};

/// One target-task sample: tokens, roles, last-layer hidden states and the
/// post-softmax attention of the final `layers` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub sample_id: String,
    pub token_ids: Vec<TokenClass>,
    pub roles: Vec<Role>,
    /// Row-major `[T × D]`.
    pub hidden: Vec<f32>,
    /// Row-major `[L × H × T × T]`; row `i` holds query `i`'s distribution over keys.
    pub attention: Vec<f32>,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl ValidationRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn hidden_row(&self, i: usize) -> &[f32] {
        &self.hidden[i * self.dim..(i + 1) * self.dim]
    }

    /// The `T × T` attention matrix of one layer and head.
    pub fn attention_matrix(&self, layer: usize, head: usize) -> &[f32] {
        let t = self.len();
        let start = (layer * self.heads + head) * t * t;
        &self.attention[start..start + t * t]
    }

    pub fn attention_row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let t = self.len();
        &self.attention_matrix(layer, head)[row * t..(row + 1) * t]
    }

    fn check_shape(&self, header: &ValidationHeader) -> Result<(), String> {
        let t = self.len();
        check_common(
            &self.sample_id,
            t,
            self.roles.len(),
            self.hidden.len(),
            header.dim,
        )?;
        if self.dim != header.dim || self.layers != header.layers || self.heads != header.heads {
            return Err(format!(
                "record dims (D={}, L={}, H={}) disagree with header (D={}, L={}, H={})",
                self.dim, self.layers, self.heads, header.dim, header.layers, header.heads
            ));
        }
        let expected = header.layers * header.heads * t * t;
        if self.attention.len() != expected {
            return Err(format!(
                "attention has {} values, expected L*H*T*T = {expected}",
                self.attention.len()
            ));
        }
        Ok(())
    }
}

/// One corpus sample. Candidates carry no attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub sample_id: String,
    pub token_ids: Vec<TokenClass>,
    pub roles: Vec<Role>,
    /// Row-major `[T × D]`.
    pub hidden: Vec<f32>,
    pub dim: usize,
}

impl CandidateRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn hidden_row(&self, i: usize) -> &[f32] {
        &self.hidden[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_common(id: &str, t: usize, roles: usize, hidden: usize, dim: usize) -> Result<(), String> {
    if id.len() > u16::MAX as usize {
        return Err(format!(
            "sample id is {} bytes, limit is {}",
            id.len(),
            u16::MAX
        ));
    }
    if t > MAX_SEQ_LEN {
        return Err(format!("sequence length {t} exceeds {MAX_SEQ_LEN}"));
    }
    if roles != t {
        return Err(format!("{roles} roles for {t} tokens"));
    }
    if hidden != t * dim {
        return Err(format!(
            "hidden has {hidden} values, expected T*D = {}",
            t * dim
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationHeader {
    pub dtype: Dtype,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateHeader {
    pub dtype: Dtype,
    pub dim: usize,
}

fn dim_u32(name: &str, v: usize) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::InvalidHeader(format!("{name}={v} exceeds u32")))
}

fn write_prefix(
    w: &mut FrameWriter,
    dtype: Dtype,
    id: &str,
    tokens: &[TokenClass],
    roles: &[Role],
    hidden: &[f32],
) -> Result<(), FormatError> {
    w.u16(id.len() as u16)?;
    w.raw(id.as_bytes())?;
    w.u32(tokens.len() as u32)?;
    w.u32s(tokens.iter().map(|t| t.0))?;
    let codes: Vec<u8> = roles.iter().map(|r| r.code()).collect();
    w.raw(&codes)?;
    w.floats(dtype, hidden)
}

struct Prefix {
    sample_id: String,
    token_ids: Vec<TokenClass>,
    roles: Vec<Role>,
    hidden: Vec<f32>,
}

fn read_prefix<R: Read>(
    r: &mut FrameReader<R>,
    dtype: Dtype,
    dim: usize,
) -> Result<Prefix, FormatError> {
    let id_len = r.u16()? as usize;
    let id_bytes = r.bytes(id_len)?;
    let sample_id =
        String::from_utf8(id_bytes).map_err(|_| r.corrupt("sample id is not valid UTF-8"))?;
    let t = r.u32()? as usize;
    if t > MAX_SEQ_LEN {
        return Err(r.corrupt(format!("sequence length {t} exceeds {MAX_SEQ_LEN}")));
    }
    let token_ids = r.u32s(t)?.into_iter().map(TokenClass).collect();
    let codes = r.bytes(t)?;
    let mut roles = Vec::with_capacity(t);
    for (pos, &c) in codes.iter().enumerate() {
        match Role::from_code(c) {
            Some(role) => roles.push(role),
            None => return Err(r.corrupt(format!("role code {c} at position {pos}"))),
        }
    }
    let hidden = r.floats(dtype, t * dim)?;
    Ok(Prefix {
        sample_id,
        token_ids,
        roles,
        hidden,
    })
}

/// Streaming TRMV writer. Records are framed as they arrive; the count is
/// patched and the file renamed into place by [`ValidationWriter::finish`].
pub struct ValidationWriter {
    inner: FrameWriter,
    header: ValidationHeader,
    count: u64,
}

impl ValidationWriter {
    pub fn create(path: impl AsRef<Path>, header: ValidationHeader) -> Result<Self, FormatError> {
        let mut inner = FrameWriter::create(path.as_ref())?;
        inner.preamble(FileKind::Validation)?;
        inner.u8(header.dtype.code())?;
        inner.u32(dim_u32("D", header.dim)?)?;
        inner.u32(dim_u32("L", header.layers)?)?;
        inner.u32(dim_u32("H", header.heads)?)?;
        inner.count_slot()?;
        Ok(ValidationWriter {
            inner,
            header,
            count: 0,
        })
    }

    pub fn write(&mut self, record: &ValidationRecord) -> Result<(), FormatError> {
        record
            .check_shape(&self.header)
            .map_err(|reason| FormatError::RejectRecord {
                index: self.count as usize,
                reason,
            })?;
        let dtype = self.header.dtype;
        write_prefix(
            &mut self.inner,
            dtype,
            &record.sample_id,
            &record.token_ids,
            &record.roles,
            &record.hidden,
        )?;
        self.inner.floats(dtype, &record.attention)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<u64, FormatError> {
        let count = self.count;
        self.inner.finish(count)?;
        Ok(count)
    }
}

/// Streaming TRMC writer.
pub struct CandidateWriter {
    inner: FrameWriter,
    header: CandidateHeader,
    count: u64,
}

impl CandidateWriter {
    pub fn create(path: impl AsRef<Path>, header: CandidateHeader) -> Result<Self, FormatError> {
        let mut inner = FrameWriter::create(path.as_ref())?;
        inner.preamble(FileKind::Candidate)?;
        inner.u8(header.dtype.code())?;
        inner.u32(dim_u32("D", header.dim)?)?;
        inner.count_slot()?;
        Ok(CandidateWriter {
            inner,
            header,
            count: 0,
        })
    }

    pub fn write(&mut self, record: &CandidateRecord) -> Result<(), FormatError> {
        let t = record.len();
        check_common(
            &record.sample_id,
            t,
            record.roles.len(),
            record.hidden.len(),
            self.header.dim,
        )
        .and_then(|_| {
            if record.dim == self.header.dim {
                Ok(())
            } else {
                Err(format!(
                    "record D={} disagrees with header D={}",
                    record.dim, self.header.dim
                ))
            }
        })
        .map_err(|reason| FormatError::RejectRecord {
            index: self.count as usize,
            reason,
        })?;
        write_prefix(
            &mut self.inner,
            self.header.dtype,
            &record.sample_id,
            &record.token_ids,
            &record.roles,
            &record.hidden,
        )?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<u64, FormatError> {
        let count = self.count;
        self.inner.finish(count)?;
        Ok(count)
    }
}

pub fn write_validation_file<'a>(
    path: impl AsRef<Path>,
    header: ValidationHeader,
    records: impl IntoIterator<Item = &'a ValidationRecord>,
) -> Result<u64, FormatError> {
    let mut w = ValidationWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

pub fn write_candidate_file<'a>(
    path: impl AsRef<Path>,
    header: CandidateHeader,
    records: impl IntoIterator<Item = &'a CandidateRecord>,
) -> Result<u64, FormatError> {
    let mut w = CandidateWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

fn open_buffered(path: &Path) -> Result<BufReader<File>, FormatError> {
    Ok(BufReader::with_capacity(1 << 20, File::open(path)?))
}

/// Iterator over the records of a TRMV stream, in file order.
pub struct ValidationReader<R> {
    frames: FrameReader<R>,
    header: ValidationHeader,
    total: u64,
    next: u64,
    done: bool,
}

impl ValidationReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::new(open_buffered(path.as_ref())?)
    }
}

impl<R: Read> ValidationReader<R> {
    pub fn new(inner: R) -> Result<Self, FormatError> {
        let mut frames = FrameReader::new(inner);
        frames.preamble(FileKind::Validation)?;
        let dtype = frames.dtype()?;
        let dim = frames.u32()? as usize;
        let layers = frames.u32()? as usize;
        let heads = frames.u32()? as usize;
        let total = frames.u64()?;
        Ok(ValidationReader {
            frames,
            header: ValidationHeader {
                dtype,
                dim,
                layers,
                heads,
            },
            total,
            next: 0,
            done: false,
        })
    }

    pub fn header(&self) -> ValidationHeader {
        self.header
    }

    pub fn record_count(&self) -> u64 {
        self.total
    }

    pub fn offset(&self) -> u64 {
        self.frames.offset()
    }

    fn read_one(&mut self) -> Result<ValidationRecord, FormatError> {
        let h = self.header;
        let p = read_prefix(&mut self.frames, h.dtype, h.dim)?;
        let t = p.token_ids.len();
        let n = h
            .layers
            .checked_mul(h.heads)
            .and_then(|x| x.checked_mul(t))
            .and_then(|x| x.checked_mul(t))
            .ok_or_else(|| self.frames.corrupt("attention size overflows"))?;
        let attention = self.frames.floats(h.dtype, n)?;
        Ok(ValidationRecord {
            sample_id: p.sample_id,
            token_ids: p.token_ids,
            roles: p.roles,
            hidden: p.hidden,
            attention,
            dim: h.dim,
            layers: h.layers,
            heads: h.heads,
        })
    }
}

impl<R: Read> Iterator for ValidationReader<R> {
    type Item = Result<ValidationRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.total {
            self.done = true;
            return trailing_check(&mut self.frames, self.total).err().map(Err);
        }
        self.frames.set_context(format!("record {}", self.next));
        let out = self.read_one();
        self.next += 1;
        if out.is_err() {
            self.done = true;
        }
        Some(out)
    }
}

/// Iterator over the records of a TRMC stream, in file order. Holds one
/// record at a time plus a fixed-size read buffer.
pub struct CandidateReader<R> {
    frames: FrameReader<R>,
    header: CandidateHeader,
    total: u64,
    next: u64,
    done: bool,
}

impl CandidateReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::new(open_buffered(path.as_ref())?)
    }
}

impl<R: Read> CandidateReader<R> {
    pub fn new(inner: R) -> Result<Self, FormatError> {
        let mut frames = FrameReader::new(inner);
        frames.preamble(FileKind::Candidate)?;
        let dtype = frames.dtype()?;
        let dim = frames.u32()? as usize;
        let total = frames.u64()?;
        Ok(CandidateReader {
            frames,
            header: CandidateHeader { dtype, dim },
            total,
            next: 0,
            done: false,
        })
    }

    pub fn header(&self) -> CandidateHeader {
        self.header
    }

    pub fn record_count(&self) -> u64 {
        self.total
    }

    fn read_one(&mut self) -> Result<CandidateRecord, FormatError> {
        let h = self.header;
        let p = read_prefix(&mut self.frames, h.dtype, h.dim)?;
        Ok(CandidateRecord {
            sample_id: p.sample_id,
            token_ids: p.token_ids,
            roles: p.roles,
            hidden: p.hidden,
            dim: h.dim,
        })
    }
}

impl<R: Read> Iterator for CandidateReader<R> {
    type Item = Result<CandidateRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.total {
            self.done = true;
            return trailing_check(&mut self.frames, self.total).err().map(Err);
        }
        self.frames.set_context(format!("record {}", self.next));
        let out = self.read_one();
        self.next += 1;
        if out.is_err() {
            self.done = true;
        }
        Some(out)
    }
}

fn trailing_check<R: Read>(frames: &mut FrameReader<R>, total: u64) -> Result<(), FormatError> {
    frames.set_context(format!("after record {}", total.saturating_sub(1)));
    if frames.at_eof()? {
        Ok(())
    } else {
        Err(frames.corrupt(format!("trailing bytes after the declared {total} records")))
    }
}

pub fn read_validation_file(
    path: impl AsRef<Path>,
) -> Result<(ValidationHeader, Vec<ValidationRecord>), FormatError> {
    let reader = ValidationReader::open(path)?;
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

/// Opens a TRMC file for one-pass streaming.
pub fn read_candidate_stream(
    path: impl AsRef<Path>,
) -> Result<CandidateReader<BufReader<File>>, FormatError> {
    CandidateReader::open(path)
}

pub fn read_candidate_file(
    path: impl AsRef<Path>,
) -> Result<(CandidateHeader, Vec<CandidateRecord>), FormatError> {
    let reader = CandidateReader::open(path)?;
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}
