use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use super::{magic_string, Dtype, FileKind, FormatError, FORMAT_VERSION};

/// Byte-offset tracking reader for framed containers.
pub(crate) struct FrameReader<R> {
    inner: R,
    offset: u64,
    context: String,
    scratch: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        FrameReader {
            inner,
            offset: 0,
            context: "header".to_string(),
            scratch: Vec::new(),
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn set_context(&mut self, context: impl Into<String>) {
        self.context = context.into();
    }

    pub(crate) fn corrupt(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Corrupt {
            offset: self.offset,
            context: self.context.clone(),
            reason: reason.into(),
        }
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    self.offset += got as u64;
                    return Err(FormatError::Truncated {
                        offset: self.offset,
                        context: self.context.clone(),
                    });
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += got as u64;
        Ok(())
    }

    /// True when no further byte can be read.
    pub(crate) fn at_eof(&mut self) -> Result<bool, FormatError> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, FormatError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>, FormatError> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    /// Reads `n` elements of `dtype`, widened to f32.
    pub(crate) fn floats(&mut self, dtype: Dtype, n: usize) -> Result<Vec<f32>, FormatError> {
        let nbytes = n
            .checked_mul(dtype.width())
            .ok_or_else(|| self.corrupt("tensor size overflows"))?;
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.resize(nbytes, 0);
        let res = self.fill(&mut scratch);
        let out = res.map(|_| match dtype {
            Dtype::F32 => scratch
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => scratch
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        });
        self.scratch = scratch;
        out
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        let nbytes = n
            .checked_mul(4)
            .ok_or_else(|| self.corrupt("array size overflows"))?;
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.resize(nbytes, 0);
        let res = self.fill(&mut scratch);
        let out = res.map(|_| {
            scratch
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        });
        self.scratch = scratch;
        out
    }

    /// Consumes magic and version, checking both against `kind`.
    pub(crate) fn preamble(&mut self, kind: FileKind) -> Result<(), FormatError> {
        let mut magic = [0u8; 4];
        self.fill(&mut magic)?;
        if &magic != kind.magic() {
            return Err(FormatError::BadMagic {
                expected: magic_string(kind.magic()),
                found: magic_string(&magic),
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(())
    }

    pub(crate) fn dtype(&mut self) -> Result<Dtype, FormatError> {
        let code = self.u8()?;
        Dtype::from_code(code).ok_or(FormatError::UnknownDtype(code))
    }
}

/// Temporary file next to `dest`, created with ordinary file permissions so
/// the renamed result looks like any other output.
pub(crate) fn sibling_temp(dest: &Path) -> std::io::Result<NamedTempFile> {
    let dir = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut b = tempfile::Builder::new();
    b.prefix(".trim-");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        b.permissions(std::fs::Permissions::from_mode(0o666));
    }
    b.tempfile_in(dir)
}

/// Writes a container to a temporary sibling of the destination and renames
/// it into place on [`FrameWriter::finish`]. The record count is a
/// placeholder until then.
pub(crate) struct FrameWriter {
    out: BufWriter<NamedTempFile>,
    dest: PathBuf,
    count_offset: u64,
    scratch: Vec<u8>,
}

impl FrameWriter {
    pub(crate) fn create(dest: &Path) -> Result<Self, FormatError> {
        let tmp = sibling_temp(dest)?;
        Ok(FrameWriter {
            out: BufWriter::with_capacity(1 << 20, tmp),
            dest: dest.to_path_buf(),
            count_offset: 0,
            scratch: Vec::new(),
        })
    }

    pub(crate) fn position(&mut self) -> Result<u64, FormatError> {
        Ok(self.out.stream_position()?)
    }

    /// Marks the current position as the u64 record-count slot and writes a
    /// zero placeholder.
    pub(crate) fn count_slot(&mut self) -> Result<(), FormatError> {
        self.count_offset = self.position()?;
        self.u64(0)
    }

    pub(crate) fn raw(&mut self, bytes: &[u8]) -> Result<(), FormatError> {
        self.out.write_all(bytes)?;
        Ok(())
    }

    pub(crate) fn u8(&mut self, v: u8) -> Result<(), FormatError> {
        self.raw(&[v])
    }

    pub(crate) fn u16(&mut self, v: u16) -> Result<(), FormatError> {
        self.raw(&v.to_le_bytes())
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<(), FormatError> {
        self.raw(&v.to_le_bytes())
    }

    pub(crate) fn u64(&mut self, v: u64) -> Result<(), FormatError> {
        self.raw(&v.to_le_bytes())
    }

    pub(crate) fn f32(&mut self, v: f32) -> Result<(), FormatError> {
        self.raw(&v.to_le_bytes())
    }

    pub(crate) fn floats(&mut self, dtype: Dtype, values: &[f32]) -> Result<(), FormatError> {
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.clear();
        scratch.reserve(values.len() * dtype.width());
        match dtype {
            Dtype::F32 => {
                for v in values {
                    scratch.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in values {
                    scratch.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
                }
            }
        }
        let res = self.raw(&scratch);
        self.scratch = scratch;
        res
    }

    pub(crate) fn u32s(
        &mut self,
        values: impl IntoIterator<Item = u32>,
    ) -> Result<(), FormatError> {
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.clear();
        for v in values {
            scratch.extend_from_slice(&v.to_le_bytes());
        }
        let res = self.raw(&scratch);
        self.scratch = scratch;
        res
    }

    pub(crate) fn preamble(&mut self, kind: FileKind) -> Result<(), FormatError> {
        self.raw(kind.magic())?;
        self.u32(FORMAT_VERSION)
    }

    /// Patches the record count and atomically moves the file into place.
    pub(crate) fn finish(self, count: u64) -> Result<(), FormatError> {
        let mut tmp = self.out.into_inner().map_err(|e| e.into_error())?;
        let file: &mut File = tmp.as_file_mut();
        file.seek(SeekFrom::Start(self.count_offset))?;
        file.write_all(&count.to_le_bytes())?;
        file.sync_all()?;
        tmp.persist(&self.dest).map_err(|e| e.error)?;
        Ok(())
    }
}
