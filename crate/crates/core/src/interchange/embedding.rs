use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::{Dtype, FileKind, FormatError, FrameReader, FrameWriter, TokenClass};

/// Rows of the scoring model's input-embedding matrix, stored raw.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<TokenClass, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a row, returning the previous one for that class if present.
    ///
    /// Panics if `vector` does not have the table's dimension.
    pub fn insert(&mut self, class: TokenClass, vector: Vec<f32>) -> Option<Vec<f32>> {
        assert_eq!(vector.len(), self.dim, "embedding row has wrong dimension");
        self.entries.insert(class, vector)
    }

    pub fn get(&self, class: TokenClass) -> Option<&[f32]> {
        self.entries.get(&class).map(Vec::as_slice)
    }

    pub fn contains(&self, class: TokenClass) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenClass, &[f32])> {
        self.entries.iter().map(|(c, v)| (*c, v.as_slice()))
    }
}

/// Writes entries in ascending class order.
pub fn write_embedding_file(
    path: impl AsRef<Path>,
    table: &EmbeddingTable,
    dtype: Dtype,
) -> Result<(), FormatError> {
    let mut w = FrameWriter::create(path.as_ref())?;
    w.preamble(FileKind::Embedding)?;
    w.u8(dtype.code())?;
    let dim = u32::try_from(table.dim)
        .map_err(|_| FormatError::InvalidHeader(format!("D_e={} exceeds u32", table.dim)))?;
    w.u32(dim)?;
    w.count_slot()?;
    for (class, v) in table.iter() {
        w.u32(class.0)?;
        w.floats(dtype, v)?;
    }
    w.finish(table.len() as u64)
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingTable, FormatError> {
    let file = File::open(path.as_ref())?;
    let mut r = FrameReader::new(BufReader::with_capacity(1 << 20, file));
    r.preamble(FileKind::Embedding)?;
    let dtype = r.dtype()?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut table = EmbeddingTable::new(dim);
    for i in 0..count {
        r.set_context(format!("entry {i}"));
        let class = TokenClass(r.u32()?);
        let v = r.floats(dtype, dim)?;
        if table.entries.insert(class, v).is_some() {
            return Err(r.corrupt(format!("duplicate class {class}")));
        }
    }
    r.set_context("end of entries");
    if !r.at_eof()? {
        return Err(r.corrupt(format!("trailing bytes after the declared {count} entries")));
    }
    Ok(table)
}
