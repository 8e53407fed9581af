//! Columnar serialization and basket compression.
//!
//! Every product name maps to a [`ColumnBuffer`]. Appending an event routes
//! each payload to its column and records the end offset of the entry. A
//! column is cut into a [`Basket`] when its pending bytes reach the
//! [`FlushPolicy`] target, or for all columns at once when the event-count
//! cadence fires. Baskets are compressed independently.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::event_model::Event;

/// Highest accepted codec level.
pub const MAX_LEVEL: u32 = 9;

/// Reserved column holding each entry's event id as a little-endian u64.
pub const EVENT_ID_COLUMN: &str = "@event_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushPolicy {
    pub basket_target_bytes: usize,
    pub flush_every_n_events: Option<u64>,
}

impl FlushPolicy {
    pub fn by_size(basket_target_bytes: usize) -> Self {
        FlushPolicy {
            basket_target_bytes,
            flush_every_n_events: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.basket_target_bytes == 0 {
            return Err(Error::Config("basket_target_bytes must be positive".into()));
        }
        if self.flush_every_n_events == Some(0) {
            return Err(Error::Config("flush_every_n_events must be positive".into()));
        }
        Ok(())
    }
}

/// Pending bytes of one column.
#[derive(Debug, Clone)]
pub struct ColumnBuffer {
    name: Arc<str>,
    pending: Vec<u8>,
    /// End offset of each pending entry within `pending`.
    entry_offsets: Vec<u64>,
    first_entry: u64,
}

impl ColumnBuffer {
    fn new(name: Arc<str>) -> Self {
        ColumnBuffer {
            name,
            pending: Vec::new(),
            entry_offsets: Vec::new(),
            first_entry: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_entries(&self) -> usize {
        self.entry_offsets.len()
    }

    pub fn first_entry(&self) -> u64 {
        self.first_entry
    }

    fn push(&mut self, bytes: &[u8]) {
        self.pending.extend_from_slice(bytes);
        self.entry_offsets.push(self.pending.len() as u64);
    }

    fn cut(&mut self) -> Option<Basket> {
        if self.entry_offsets.is_empty() {
            return None;
        }
        let entries = self.entry_offsets.len() as u64;
        let basket = Basket {
            column: self.name.clone(),
            first_entry: self.first_entry,
            entry_offsets: std::mem::take(&mut self.entry_offsets),
            raw: std::mem::take(&mut self.pending),
        };
        self.first_entry += entries;
        Some(basket)
    }
}

/// One column's bytes for a contiguous span of entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basket {
    pub column: Arc<str>,
    pub first_entry: u64,
    /// End offset of each entry, relative to the start of `raw`.
    pub entry_offsets: Vec<u64>,
    pub raw: Vec<u8>,
}

impl Basket {
    /// A basket holding a single entry.
    pub fn single(column: &str, first_entry: u64, raw: Vec<u8>) -> Self {
        Basket {
            column: Arc::from(column),
            first_entry,
            entry_offsets: vec![raw.len() as u64],
            raw,
        }
    }

    pub fn entry_count(&self) -> usize {
        self.entry_offsets.len()
    }

    /// Splits `raw` back into per-entry payloads.
    pub fn entries(&self) -> impl Iterator<Item = &[u8]> {
        let mut start = 0usize;
        self.entry_offsets.iter().map(move |&end| {
            let s = &self.raw[start..end as usize];
            start = end as usize;
            s
        })
    }
}

/// A set of column buffers owned by a single writer.
#[derive(Debug, Clone)]
pub struct ColumnStore {
    columns: Vec<ColumnBuffer>,
    index: HashMap<Arc<str>, usize>,
    policy: FlushPolicy,
    events_in_span: u64,
    entries: u64,
}

impl ColumnStore {
    /// Creates a store with the event-id column followed by `products`.
    pub fn new<S: AsRef<str>>(products: &[S], policy: FlushPolicy) -> Result<Self> {
        policy.validate()?;
        let mut columns = Vec::with_capacity(products.len() + 1);
        let mut index = HashMap::with_capacity(products.len() + 1);
        for name in std::iter::once(EVENT_ID_COLUMN).chain(products.iter().map(|s| s.as_ref())) {
            let name: Arc<str> = Arc::from(name);
            if index.insert(name.clone(), columns.len()).is_some() {
                return Err(Error::SchemaMismatch(format!("duplicate column `{name}`")));
            }
            columns.push(ColumnBuffer::new(name));
        }
        Ok(ColumnStore {
            columns,
            index,
            policy,
            events_in_span: 0,
            entries: 0,
        })
    }

    pub fn policy(&self) -> FlushPolicy {
        self.policy
    }

    pub fn columns(&self) -> &[ColumnBuffer] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&ColumnBuffer> {
        self.index.get(name).map(|&i| &self.columns[i])
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name())
    }

    /// Entries appended since creation or the last [`reset`](Self::reset).
    pub fn entries(&self) -> u64 {
        self.entries
    }

    pub fn pending_bytes(&self) -> usize {
        self.columns.iter().map(|c| c.pending.len()).sum()
    }

    /// Appends one event given as `(product name, payload)` pairs.
    ///
    /// The pairs must name every product column exactly once. Nothing is
    /// modified when validation fails.
    pub fn append<'a, I>(&mut self, event_id: u64, products: I) -> Result<Vec<Basket>>
    where
        I: IntoIterator<Item = (&'a str, &'a [u8])>,
    {
        let mut slots: Vec<Option<&[u8]>> = vec![None; self.columns.len()];
        for (name, bytes) in products {
            match self.index.get(name) {
                Some(0) | None => {
                    return Err(Error::SchemaMismatch(format!("unknown product `{name}`")))
                }
                Some(&i) => {
                    if slots[i].replace(bytes).is_some() {
                        return Err(Error::SchemaMismatch(format!("product `{name}` given twice")));
                    }
                }
            }
        }
        if let Some(missing) = slots.iter().skip(1).position(Option::is_none) {
            return Err(Error::SchemaMismatch(format!(
                "event {event_id} lacks product `{}`",
                self.columns[missing + 1].name
            )));
        }

        let id_bytes = event_id.to_le_bytes();
        slots[0] = Some(&id_bytes);
        for (col, bytes) in self.columns.iter_mut().zip(&slots) {
            col.push(bytes.expect("validated above"));
        }
        self.entries += 1;
        self.events_in_span += 1;

        let mut cut = Vec::new();
        if self
            .policy
            .flush_every_n_events
            .is_some_and(|n| self.events_in_span >= n)
        {
            cut.extend(self.flush_all());
        } else {
            let target = self.policy.basket_target_bytes;
            for col in &mut self.columns {
                if col.pending.len() >= target {
                    cut.extend(col.cut());
                }
            }
        }
        Ok(cut)
    }

    pub fn append_event(&mut self, event: &Event) -> Result<Vec<Basket>> {
        self.append(event.id, event.product_refs())
    }

    /// Cuts every column that holds pending entries.
    pub fn flush_all(&mut self) -> Vec<Basket> {
        self.events_in_span = 0;
        self.columns.iter_mut().filter_map(ColumnBuffer::cut).collect()
    }

    /// Discards pending data and restarts entry numbering at zero.
    pub fn reset(&mut self) {
        for col in &mut self.columns {
            col.pending.clear();
            col.entry_offsets.clear();
            col.first_entry = 0;
        }
        self.events_in_span = 0;
        self.entries = 0;
    }
}

/// Fixed-size metadata preceding a compressed payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasketHeader {
    pub column: Arc<str>,
    pub first_entry: u64,
    pub entry_count: u32,
    pub raw_len: u64,
    pub compressed_len: u64,
    /// CRC-32 of the uncompressed bytes.
    pub checksum: u32,
    pub level: u8,
    pub entry_offsets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedBasket {
    pub header: BasketHeader,
    pub payload: Vec<u8>,
}

/// Integer-levelled general-purpose compressor. Level 0 stores bytes verbatim.
pub trait Codec: Send + Sync {
    fn compress(&self, raw: &[u8], level: u32) -> Vec<u8>;
    fn decompress(&self, payload: &[u8], level: u32, size_hint: usize) -> std::io::Result<Vec<u8>>;
}

/// Raw deflate via `flate2`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Deflate;

impl Codec for Deflate {
    fn compress(&self, raw: &[u8], level: u32) -> Vec<u8> {
        if level == 0 {
            return raw.to_vec();
        }
        let mut enc = DeflateEncoder::new(Vec::with_capacity(raw.len() / 2 + 64), Compression::new(level));
        enc.write_all(raw).expect("writing to a Vec cannot fail");
        enc.finish().expect("writing to a Vec cannot fail")
    }

    fn decompress(&self, payload: &[u8], level: u32, size_hint: usize) -> std::io::Result<Vec<u8>> {
        if level == 0 {
            return Ok(payload.to_vec());
        }
        let mut out = Vec::with_capacity(size_hint.min(1 << 28));
        DeflateDecoder::new(payload).read_to_end(&mut out)?;
        Ok(out)
    }
}

pub fn compress_basket(basket: &Basket, level: u32) -> Result<CompressedBasket> {
    compress_basket_with(&Deflate, basket, level)
}

pub fn compress_basket_with(codec: &dyn Codec, basket: &Basket, level: u32) -> Result<CompressedBasket> {
    if level > MAX_LEVEL {
        return Err(Error::Usage(format!("codec level {level} outside 0..={MAX_LEVEL}")));
    }
    let payload = codec.compress(&basket.raw, level);
    Ok(CompressedBasket {
        header: BasketHeader {
            column: basket.column.clone(),
            first_entry: basket.first_entry,
            entry_count: basket.entry_offsets.len() as u32,
            raw_len: basket.raw.len() as u64,
            compressed_len: payload.len() as u64,
            checksum: crc32fast::hash(&basket.raw),
            level: level as u8,
            entry_offsets: basket.entry_offsets.clone(),
        },
        payload,
    })
}

pub fn decompress_basket(cb: &CompressedBasket) -> Result<Basket> {
    decompress_basket_with(&Deflate, cb)
}

pub fn decompress_basket_with(codec: &dyn Codec, cb: &CompressedBasket) -> Result<Basket> {
    let h = &cb.header;
    let column = h.column.to_string();
    if cb.payload.len() as u64 != h.compressed_len {
        return Err(Error::Format(format!(
            "column `{column}`: payload holds {} bytes, header says {}",
            cb.payload.len(),
            h.compressed_len
        )));
    }
    if h.entry_count as usize != h.entry_offsets.len() {
        return Err(Error::Format(format!(
            "column `{column}`: {} offsets for {} entries",
            h.entry_offsets.len(),
            h.entry_count
        )));
    }
    if u32::from(h.level) > MAX_LEVEL {
        return Err(Error::Format(format!("column `{column}`: bad codec level {}", h.level)));
    }
    let raw = codec
        .decompress(&cb.payload, u32::from(h.level), h.raw_len as usize)
        .map_err(|e| Error::Corruption {
            column: column.clone(),
            detail: format!("inflate failed: {e}"),
        })?;
    let actual = crc32fast::hash(&raw);
    if actual != h.checksum {
        return Err(Error::Corruption {
            column,
            detail: format!("checksum {actual:#010x} != {:#010x}", h.checksum),
        });
    }
    if raw.len() as u64 != h.raw_len {
        return Err(Error::Format(format!(
            "column `{column}`: decompressed {} bytes, header says {}",
            raw.len(),
            h.raw_len
        )));
    }
    let mut prev = 0;
    for &off in &h.entry_offsets {
        if off < prev || off > h.raw_len {
            return Err(Error::Format(format!("column `{column}`: bad entry offset {off}")));
        }
        prev = off;
    }
    if h.entry_offsets.last().copied().unwrap_or(0) != h.raw_len {
        return Err(Error::Format(format!(
            "column `{column}`: last entry offset does not match raw length"
        )));
    }
    Ok(Basket {
        column: h.column.clone(),
        first_entry: h.first_entry,
        entry_offsets: h.entry_offsets.clone(),
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(names: &[&str], target: usize, every: Option<u64>) -> ColumnStore {
        ColumnStore::new(
            names,
            FlushPolicy {
                basket_target_bytes: target,
                flush_every_n_events: every,
            },
        )
        .unwrap()
    }

    #[test]
    fn below_threshold_emits_nothing() {
        let mut s = store(&["a", "b"], 1 << 20, None);
        let out = s.append(0, [("a", &[1u8; 10][..]), ("b", &[2u8; 10][..])]).unwrap();
        assert!(out.is_empty());
        assert_eq!(s.column("a").unwrap().pending_len(), 10);
        assert_eq!(s.column("b").unwrap().pending_len(), 10);
        assert_eq!(s.column(EVENT_ID_COLUMN).unwrap().pending_len(), 8);
    }

    #[test]
    fn size_cut_on_second_append() {
        // 60 + 60 = 120 >= 100: the product column is cut on the second event;
        // the id column (16 bytes) is not.
        let mut s = store(&["a"], 100, None);
        let p = [7u8; 60];
        assert!(s.append(0, [("a", &p[..])]).unwrap().is_empty());
        let out = s.append(1, [("a", &p[..])]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(&*out[0].column, "a");
        assert_eq!(out[0].first_entry, 0);
        assert_eq!(out[0].entry_count(), 2);
        assert_eq!(out[0].entry_offsets, vec![60, 120]);
        assert_eq!(s.column("a").unwrap().pending_len(), 0);
        assert_eq!(s.column("a").unwrap().first_entry(), 2);

        let out = s.append(2, [("a", &p[..])]).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn forced_flush_every_event() {
        let mut s = store(&["a", "b"], 1 << 20, Some(1));
        for id in 0..3 {
            let out = s.append(id, [("a", &[1u8][..]), ("b", &[][..])]).unwrap();
            // event id column + both product columns, including the zero-length one
            assert_eq!(out.len(), 3);
            assert!(out.iter().all(|b| b.entry_count() == 1 && b.first_entry == id));
        }
    }

    #[test]
    fn schema_mismatch_leaves_store_untouched() {
        let mut s = store(&["a"], 100, None);
        let err = s.append(0, [("a", &[1u8][..]), ("zz", &[1u8][..])]).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)), "{err}");
        assert!(s.append(0, std::iter::empty()).is_err());
        assert!(s.append(0, [(EVENT_ID_COLUMN, &[1u8][..])]).is_err());
        assert_eq!(s.entries(), 0);
        assert_eq!(s.pending_bytes(), 0);
    }

    #[test]
    fn level_zero_is_store_mode() {
        let b = Basket::single("c", 3, b"hello basket".to_vec());
        let cb = compress_basket(&b, 0).unwrap();
        assert_eq!(cb.header.compressed_len, cb.header.raw_len);
        assert_eq!(cb.payload, b.raw);
        assert_eq!(decompress_basket(&cb).unwrap(), b);
    }

    #[test]
    fn repeating_pattern_compresses_tenfold() {
        // 64 KiB of a 64-byte pattern: measured ratio at level 6 is 0.0045.
        let pattern: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(37)).collect();
        let raw: Vec<u8> = pattern.iter().copied().cycle().take(64 * 1024).collect();
        let cb = compress_basket(&Basket::single("c", 0, raw), 6).unwrap();
        assert!(cb.header.compressed_len * 10 < cb.header.raw_len);
    }

    #[test]
    fn empty_basket() {
        let b = Basket {
            column: Arc::from("c"),
            first_entry: 0,
            entry_offsets: vec![],
            raw: vec![],
        };
        for level in [0, 6] {
            let cb = compress_basket(&b, level).unwrap();
            assert_eq!(cb.header.raw_len, 0);
            assert_eq!(decompress_basket(&cb).unwrap(), b);
        }
    }

    #[test]
    fn invalid_level_rejected() {
        assert!(compress_basket(&Basket::single("c", 0, vec![1]), 10).is_err());
    }

    fn fixture() -> CompressedBasket {
        let raw: Vec<u8> = (0..4000u32).map(|i| (i % 251) as u8 ^ (i / 97) as u8).collect();
        compress_basket(&Basket::single("fx", 0, raw), 6).unwrap()
    }

    #[test]
    fn flipped_bit_is_corruption() {
        let good = fixture();
        let original = decompress_basket(&good).unwrap();
        let mut harmless = 0;
        for bit in 0..good.payload.len() * 8 {
            let mut bad = good.clone();
            bad.payload[bit / 8] ^= 1 << (bit % 8);
            match decompress_basket(&bad) {
                Err(Error::Corruption { column, .. }) => assert_eq!(column, "fx"),
                // padding bits after the final deflate block carry no data
                Ok(b) if b == original => harmless += 1,
                other => panic!("bit {bit}: expected corruption, got {other:?}"),
            }
        }
        assert!(harmless < 8, "{harmless} flips went undetected");
        let mut stored = compress_basket(&Basket::single("s", 0, vec![9; 100]), 0).unwrap();
        stored.payload[50] ^= 0x10;
        assert!(matches!(decompress_basket(&stored), Err(Error::Corruption { .. })));
    }

    #[test]
    fn forged_raw_len_is_format_error() {
        let mut cb = fixture();
        cb.header.raw_len += 1;
        assert!(matches!(decompress_basket(&cb), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut cb = fixture();
        cb.payload.truncate(cb.payload.len() - 3);
        assert!(matches!(decompress_basket(&cb), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn roundtrip(raw in proptest::collection::vec(any::<u8>(), 0..4096), level in 0u32..=MAX_LEVEL, first in 0u64..1000) {
            let b = Basket::single("p", first, raw);
            let cb = compress_basket(&b, level).unwrap();
            prop_assert_eq!(cb.header.compressed_len as usize, cb.payload.len());
            prop_assert_eq!(decompress_basket(&cb).unwrap(), b);
        }

        #[test]
        fn reconstruction_and_flush_bound(
            sizes in proptest::collection::vec((0usize..300, 0usize..300), 1..60),
            target in 1usize..700,
            every in proptest::option::of(1u64..8),
        ) {
            let mut s = store(&["a", "b"], target, every);
            let mut baskets = Vec::new();
            let mut events = Vec::new();
            for (id, (na, nb)) in sizes.iter().enumerate() {
                let a: Vec<u8> = (0..*na).map(|i| (i + id) as u8).collect();
                let b: Vec<u8> = (0..*nb).map(|i| (i * 3 + id) as u8).collect();
                baskets.extend(s.append(id as u64, [("a", &a[..]), ("b", &b[..])]).unwrap());
                events.push((a, b));
            }
            baskets.extend(s.flush_all());
            let max_payload = 300;
            for b in &baskets {
                prop_assert!(b.raw.len() <= target + max_payload);
                prop_assert_eq!(b.entry_offsets.last().copied().unwrap_or(0), b.raw.len() as u64);
            }
            let mut col_a = Vec::new();
            let mut ids = Vec::new();
            for b in &baskets {
                let b = decompress_basket(&compress_basket(b, 1).unwrap()).unwrap();
                if &*b.column == "a" {
                    prop_assert_eq!(b.first_entry, col_a.len() as u64);
                    col_a.extend(b.entries().map(<[u8]>::to_vec));
                } else if &*b.column == EVENT_ID_COLUMN {
                    ids.extend(b.entries().map(|e| u64::from_le_bytes(e.try_into().unwrap())));
                }
            }
            prop_assert_eq!(col_a, events.iter().map(|e| e.0.clone()).collect::<Vec<_>>());
            prop_assert_eq!(ids, (0..events.len() as u64).collect::<Vec<_>>());
        }
    }
}
