//! On-disk container: magic, length-prefixed compressed baskets, a trailing
//! index and a fixed-size footer pointing at the index.
//!
//! ```text
//! "PSNK0001"
//! basket*   : u64 record_len, record
//! index     : u16 label_len, label, u64 total_events, u32 n_columns,
//!             { u16 name_len, name, u32 n_baskets, { u64 offset, u64 first_entry, u32 entry_count }* }*
//! footer    : u64 index_offset, "PSNK0001"
//! ```
//!
//! A basket record is `u16 name_len, name, u64 first_entry, u32 entry_count,
//! u64 raw_len, u64 compressed_len, u32 checksum, u8 level,
//! u64 entry_offsets[entry_count], payload`. All integers are little-endian.
//! Baskets can be appended at any time before [`ContainerWriter::finish`],
//! so merging never rewrites bytes already written.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use crate::codec::{BasketHeader, CompressedBasket};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSNK0001";
pub const FOOTER_LEN: usize = 16;

/// File-level metadata written into the trailer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileMeta {
    pub label: String,
    pub total_events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasketLocator {
    pub offset: u64,
    pub first_entry: u64,
    pub entry_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnIndex {
    pub name: String,
    pub baskets: Vec<BasketLocator>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trailer {
    pub meta: FileMeta,
    /// Columns in order of first appearance.
    pub columns: Vec<ColumnIndex>,
}

impl Trailer {
    pub fn column(&self, name: &str) -> Option<&ColumnIndex> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn basket_count(&self) -> usize {
        self.columns.iter().map(|c| c.baskets.len()).sum()
    }
}

/// Streaming writer; requires exclusive access to its sink.
#[derive(Debug)]
pub struct ContainerWriter<W: Write> {
    sink: W,
    offset: u64,
    columns: Vec<ColumnIndex>,
    positions: HashMap<Arc<str>, usize>,
    scratch: Vec<u8>,
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut sink: W) -> Result<Self> {
        sink.write_all(MAGIC)?;
        Ok(ContainerWriter {
            sink,
            offset: MAGIC.len() as u64,
            columns: Vec::new(),
            positions: HashMap::new(),
            scratch: Vec::new(),
        })
    }

    /// Bytes written so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn append(&mut self, cb: &CompressedBasket) -> Result<u64> {
        self.append_rebased(cb, 0)
    }

    /// Appends `cb` with its first entry shifted by `entry_base`.
    pub fn append_rebased(&mut self, cb: &CompressedBasket, entry_base: u64) -> Result<u64> {
        let h = &cb.header;
        let first_entry = h.first_entry + entry_base;
        self.scratch.clear();
        encode_header(&mut self.scratch, h, first_entry)?;
        let record_len = (self.scratch.len() + cb.payload.len()) as u64;
        let at = self.offset;
        self.sink.write_all(&record_len.to_le_bytes())?;
        self.sink.write_all(&self.scratch)?;
        self.sink.write_all(&cb.payload)?;
        self.offset += 8 + record_len;

        let slot = match self.positions.get(&h.column) {
            Some(&i) => i,
            None => {
                self.columns.push(ColumnIndex {
                    name: h.column.to_string(),
                    baskets: Vec::new(),
                });
                self.positions.insert(h.column.clone(), self.columns.len() - 1);
                self.columns.len() - 1
            }
        };
        self.columns[slot].baskets.push(BasketLocator {
            offset: at,
            first_entry,
            entry_count: h.entry_count,
        });
        Ok(at)
    }

    /// Writes the index and footer and hands back the sink.
    pub fn finish(mut self, meta: FileMeta) -> Result<W> {
        let index_offset = self.offset;
        let mut buf = Vec::new();
        put_str(&mut buf, &meta.label)?;
        buf.extend_from_slice(&meta.total_events.to_le_bytes());
        buf.extend_from_slice(&(self.columns.len() as u32).to_le_bytes());
        for col in &self.columns {
            put_str(&mut buf, &col.name)?;
            buf.extend_from_slice(&(col.baskets.len() as u32).to_le_bytes());
            for b in &col.baskets {
                buf.extend_from_slice(&b.offset.to_le_bytes());
                buf.extend_from_slice(&b.first_entry.to_le_bytes());
                buf.extend_from_slice(&b.entry_count.to_le_bytes());
            }
        }
        buf.extend_from_slice(&index_offset.to_le_bytes());
        buf.extend_from_slice(MAGIC);
        self.sink.write_all(&buf)?;
        self.sink.flush()?;
        Ok(self.sink)
    }
}

pub fn write_container<'a, W, I>(sink: W, baskets: I, meta: FileMeta) -> Result<W>
where
    W: Write,
    I: IntoIterator<Item = &'a CompressedBasket>,
{
    let mut w = ContainerWriter::new(sink)?;
    for cb in baskets {
        w.append(cb)?;
    }
    w.finish(meta)
}

/// Parses a whole container and cross-checks the index against the records.
pub fn read_container(bytes: &[u8]) -> Result<(Vec<CompressedBasket>, Trailer)> {
    if bytes.len() < MAGIC.len() + FOOTER_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad leading magic".into()));
    }
    let footer = &bytes[bytes.len() - FOOTER_LEN..];
    if &footer[8..] != MAGIC {
        return Err(Error::Format("bad footer magic (truncated file?)".into()));
    }
    let index_offset = u64::from_le_bytes(footer[..8].try_into().unwrap());
    let index_end = (bytes.len() - FOOTER_LEN) as u64;
    if index_offset < 8 || index_offset > index_end {
        return Err(Error::Format(format!("index offset {index_offset} out of range")));
    }

    let mut baskets = Vec::new();
    let mut offsets = Vec::new();
    let mut cur = Cursor::new(&bytes[..index_offset as usize], 8);
    while !cur.is_empty() {
        let at = cur.pos as u64;
        let len = cur.u64()? as usize;
        let record = cur.take(len)?;
        baskets.push(decode_record(record)?);
        offsets.push(at);
    }

    let mut cur = Cursor::new(&bytes[..index_end as usize], index_offset as usize);
    let label = cur.string()?;
    let total_events = cur.u64()?;
    let n_columns = cur.u32()?;
    let mut columns = Vec::new();
    for _ in 0..n_columns {
        let name = cur.string()?;
        let n = cur.u32()?;
        let mut locs = Vec::new();
        for _ in 0..n {
            locs.push(BasketLocator {
                offset: cur.u64()?,
                first_entry: cur.u64()?,
                entry_count: cur.u32()?,
            });
        }
        columns.push(ColumnIndex { name, baskets: locs });
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after index".into()));
    }
    let trailer = Trailer {
        meta: FileMeta { label, total_events },
        columns,
    };
    check_index(&trailer, &baskets, &offsets)?;
    Ok((baskets, trailer))
}

fn check_index(trailer: &Trailer, baskets: &[CompressedBasket], offsets: &[u64]) -> Result<()> {
    if trailer.basket_count() != baskets.len() {
        return Err(Error::Format(format!(
            "index lists {} baskets, file holds {}",
            trailer.basket_count(),
            baskets.len()
        )));
    }
    let by_offset: HashMap<u64, &CompressedBasket> =
        offsets.iter().copied().zip(baskets.iter()).collect();
    for col in &trailer.columns {
        for loc in &col.baskets {
            let cb = by_offset.get(&loc.offset).ok_or_else(|| {
                Error::Format(format!(
                    "index entry for `{}` points at offset {} which starts no basket",
                    col.name, loc.offset
                ))
            })?;
            let h = &cb.header;
            if *h.column != *col.name
                || h.first_entry != loc.first_entry
                || h.entry_count != loc.entry_count
            {
                return Err(Error::Format(format!(
                    "index entry for `{}` at offset {} disagrees with the basket header",
                    col.name, loc.offset
                )));
            }
        }
    }
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Format(format!("name longer than 65535 bytes: {s:.32}...")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_header(buf: &mut Vec<u8>, h: &BasketHeader, first_entry: u64) -> Result<()> {
    put_str(buf, &h.column)?;
    buf.extend_from_slice(&first_entry.to_le_bytes());
    buf.extend_from_slice(&h.entry_count.to_le_bytes());
    buf.extend_from_slice(&h.raw_len.to_le_bytes());
    buf.extend_from_slice(&h.compressed_len.to_le_bytes());
    buf.extend_from_slice(&h.checksum.to_le_bytes());
    buf.push(h.level);
    for off in &h.entry_offsets {
        buf.extend_from_slice(&off.to_le_bytes());
    }
    Ok(())
}

fn decode_record(record: &[u8]) -> Result<CompressedBasket> {
    let mut cur = Cursor::new(record, 0);
    let column: Arc<str> = Arc::from(cur.string()?);
    let first_entry = cur.u64()?;
    let entry_count = cur.u32()?;
    let raw_len = cur.u64()?;
    let compressed_len = cur.u64()?;
    let checksum = cur.u32()?;
    let level = cur.u8()?;
    let mut entry_offsets = Vec::with_capacity((entry_count as usize).min(record.len() / 8));
    for _ in 0..entry_count {
        entry_offsets.push(cur.u64()?);
    }
    let payload = cur.rest().to_vec();
    if payload.len() as u64 != compressed_len {
        return Err(Error::Format(format!(
            "basket `{column}`: record holds {} payload bytes, header says {compressed_len}",
            payload.len()
        )));
    }
    Ok(CompressedBasket {
        header: BasketHeader {
            column,
            first_entry,
            entry_count,
            raw_len,
            compressed_len,
            checksum,
            level,
            entry_offsets,
        },
        payload,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Cursor { bytes, pos }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}
