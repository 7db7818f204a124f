//! On-disk layout of atlas generation files.
//!
//! The first 4096 bytes hold the file header:
//!
//! | offset | size | field            |
//! |-------:|-----:|------------------|
//! |      0 |    4 | magic `"AEON"`   |
//! |      4 |    4 | format version   |
//! |      8 |    4 | dimension D      |
//! |     12 |    4 | metadata bytes M |
//! |     16 |    4 | quantization Q   |
//! |     20 |    4 | branching B      |
//! |     24 |    8 | node count       |
//! |     32 |    8 | root slot        |
//! |     40 |    8 | node stride S    |
//! |     48 |    8 | generation       |
//! |     56 |    8 | next node id     |
//! |     64 |    8 | tree depth       |
//! |     72 |    8 | slot capacity    |
//!
//! Node slot `i` starts at `4096 + i * S`, with
//! `S = align_up(64 + payload + M, 64)` and payload `4D` (FP32) or `D` (INT8).
//!
//! | offset          | size | field                                   |
//! |----------------:|-----:|-----------------------------------------|
//! |               0 |    8 | id                                      |
//! |               8 |    4 | flags (bit 0 tombstone, bit 1 internal) |
//! |              12 |    4 | child count                             |
//! |              16 |    8 | parent slot (`u64::MAX` for none)       |
//! |              24 |    4 | quantization scale                      |
//! |              28 |    4 | hub penalty                             |
//! |              64 |    P | vector payload                          |
//! |          64 + P |  256 | child table, 64 × u32 (`u32::MAX` free) |
//! |    64 + P + 256 | M-256| user metadata                           |

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::storage::{align_up, le, HEADER_BYTES};

pub const ATLAS_MAGIC: [u8; 4] = *b"AEON";
pub const ATLAS_VERSION: u32 = 1;
pub const NODE_HEADER_BYTES: usize = 64;
pub const CHILD_TABLE_BYTES: usize = 256;
pub const MAX_BRANCHING: u32 = 64;
pub const DEFAULT_METADATA_BYTES: u32 = 256;
pub const MIN_DIMENSION: u32 = 8;
pub const MAX_DIMENSION: u32 = 4096;
pub const NO_CHILD: u32 = u32::MAX;
pub const NO_PARENT: u64 = u64::MAX;
/// Slot capacity of the smallest generation file; larger files double it.
pub const INITIAL_SLOT_CAPACITY: u64 = 4096;

pub const FLAG_TOMBSTONE: u32 = 1;
pub const FLAG_INTERNAL: u32 = 2;

const OFF_ID: usize = 0;
const OFF_FLAGS: usize = 8;
const OFF_CHILD_COUNT: usize = 12;
const OFF_PARENT: usize = 16;
const OFF_SCALE: usize = 24;
const OFF_HUB: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Quantization {
    Fp32 = 0,
    Int8 = 1,
}

impl Quantization {
    pub fn from_u32(v: u32) -> Result<Quantization> {
        match v {
            0 => Ok(Quantization::Fp32),
            1 => Ok(Quantization::Int8),
            other => Err(Error::invalid(format!("unsupported quantization {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quantization::Fp32 => "fp32",
            Quantization::Int8 => "int8",
        }
    }
}

impl std::str::FromStr for Quantization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" => Ok(Quantization::Fp32),
            "int8" | "i8" => Ok(Quantization::Int8),
            _ => Err(Error::invalid(format!("unknown quantization {s:?} (expected fp32 or int8)"))),
        }
    }
}

/// Shape parameters fixed for the lifetime of an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtlasParams {
    pub dim: u32,
    pub quantization: Quantization,
    pub metadata_bytes: u32,
    pub branching: u32,
}

impl AtlasParams {
    pub fn new(dim: u32, quantization: Quantization) -> Result<AtlasParams> {
        AtlasParams {
            dim,
            quantization,
            metadata_bytes: DEFAULT_METADATA_BYTES,
            branching: MAX_BRANCHING,
        }
        .validated()
    }

    pub fn with_metadata_bytes(self, m: u32) -> Result<AtlasParams> {
        AtlasParams { metadata_bytes: m, ..self }.validated()
    }

    pub fn with_branching(self, b: u32) -> Result<AtlasParams> {
        AtlasParams { branching: b, ..self }.validated()
    }

    pub fn validated(self) -> Result<AtlasParams> {
        if !(MIN_DIMENSION..=MAX_DIMENSION).contains(&self.dim) {
            return Err(Error::invalid(format!(
                "dimension {} outside [{MIN_DIMENSION}, {MAX_DIMENSION}]",
                self.dim
            )));
        }
        if self.metadata_bytes < CHILD_TABLE_BYTES as u32 || !self.metadata_bytes.is_multiple_of(64) {
            return Err(Error::invalid(format!(
                "metadata size {} must be a multiple of 64 and at least {CHILD_TABLE_BYTES}",
                self.metadata_bytes
            )));
        }
        if !(1..=MAX_BRANCHING).contains(&self.branching) {
            return Err(Error::invalid(format!(
                "branching factor {} outside [1, {MAX_BRANCHING}]",
                self.branching
            )));
        }
        Ok(self)
    }

    pub fn payload_bytes(&self) -> usize {
        match self.quantization {
            Quantization::Fp32 => 4 * self.dim as usize,
            Quantization::Int8 => self.dim as usize,
        }
    }

    pub fn stride(&self) -> usize {
        node_stride(self.dim, self.quantization, self.metadata_bytes) as usize
    }

    /// Bytes of free-form metadata available per node after the child table.
    pub fn extra_metadata_bytes(&self) -> usize {
        self.metadata_bytes as usize - CHILD_TABLE_BYTES
    }

    pub fn file_bytes(&self, slot_capacity: u64) -> u64 {
        HEADER_BYTES + slot_capacity * self.stride() as u64
    }

    fn child_table_offset(&self) -> usize {
        NODE_HEADER_BYTES + self.payload_bytes()
    }

    fn metadata_offset(&self) -> usize {
        self.child_table_offset() + CHILD_TABLE_BYTES
    }
}

pub fn node_stride(dim: u32, quantization: Quantization, metadata_bytes: u32) -> u64 {
    let payload = match quantization {
        Quantization::Fp32 => 4 * u64::from(dim),
        Quantization::Int8 => u64::from(dim),
    };
    align_up(NODE_HEADER_BYTES as u64 + payload + u64::from(metadata_bytes), 64)
}

/// Smallest `INITIAL_SLOT_CAPACITY * 2^k` that holds `nodes`.
pub fn slot_capacity_for(nodes: u64) -> u64 {
    let mut cap = INITIAL_SLOT_CAPACITY;
    while cap < nodes {
        cap *= 2;
    }
    cap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtlasHeader {
    pub params: AtlasParams,
    pub node_count: u64,
    pub root_slot: u64,
    pub generation: u64,
    pub next_id: u64,
    pub depth: u64,
    pub slot_capacity: u64,
}

impl AtlasHeader {
    pub fn encode(&self, buf: &mut [u8]) {
        buf[..HEADER_BYTES as usize].fill(0);
        buf[0..4].copy_from_slice(&ATLAS_MAGIC);
        le::put_u32(buf, 4, ATLAS_VERSION);
        le::put_u32(buf, 8, self.params.dim);
        le::put_u32(buf, 12, self.params.metadata_bytes);
        le::put_u32(buf, 16, self.params.quantization as u32);
        le::put_u32(buf, 20, self.params.branching);
        le::put_u64(buf, 24, self.node_count);
        le::put_u64(buf, 32, self.root_slot);
        le::put_u64(buf, 40, self.params.stride() as u64);
        le::put_u64(buf, 48, self.generation);
        le::put_u64(buf, 56, self.next_id);
        le::put_u64(buf, 64, self.depth);
        le::put_u64(buf, 72, self.slot_capacity);
    }

    /// Parses a header and checks the stored stride against the one
    /// recomputed from D, Q and M.
    pub fn decode(buf: &[u8], path: &Path) -> Result<AtlasHeader> {
        if buf.len() < HEADER_BYTES as usize || buf[0..4] != ATLAS_MAGIC {
            return Err(Error::corrupt(path, "bad atlas magic"));
        }
        let version = le::get_u32(buf, 4);
        if version != ATLAS_VERSION {
            return Err(Error::corrupt(path, format!("unsupported atlas version {version}")));
        }
        let params = AtlasParams {
            dim: le::get_u32(buf, 8),
            metadata_bytes: le::get_u32(buf, 12),
            quantization: Quantization::from_u32(le::get_u32(buf, 16))
                .map_err(|e| Error::corrupt(path, e.to_string()))?,
            branching: le::get_u32(buf, 20),
        }
        .validated()
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
        let stored = le::get_u64(buf, 40);
        if stored != params.stride() as u64 {
            return Err(Error::corrupt(
                path,
                format!("stored stride {stored} disagrees with computed stride {}", params.stride()),
            ));
        }
        let header = AtlasHeader {
            params,
            node_count: le::get_u64(buf, 24),
            root_slot: le::get_u64(buf, 32),
            generation: le::get_u64(buf, 48),
            next_id: le::get_u64(buf, 56),
            depth: le::get_u64(buf, 64),
            slot_capacity: le::get_u64(buf, 72),
        };
        if header.node_count > header.slot_capacity {
            return Err(Error::corrupt(path, "node count exceeds slot capacity"));
        }
        Ok(header)
    }
}

/// Serializes a fresh, unattached node.
pub fn encode_node(params: &AtlasParams, id: u64, vector: &[f32], metadata: &[u8]) -> Vec<u8> {
    debug_assert_eq!(vector.len(), params.dim as usize);
    debug_assert!(metadata.len() <= params.extra_metadata_bytes());
    let mut buf = vec![0u8; params.stride()];
    le::put_u64(&mut buf, OFF_ID, id);
    le::put_u64(&mut buf, OFF_PARENT, NO_PARENT);
    let payload = &mut buf[NODE_HEADER_BYTES..NODE_HEADER_BYTES + params.payload_bytes()];
    let scale = match params.quantization {
        Quantization::Fp32 => {
            for (chunk, x) in payload.chunks_exact_mut(4).zip(vector) {
                chunk.copy_from_slice(&x.to_le_bytes());
            }
            1.0
        }
        Quantization::Int8 => {
            let out: &mut [i8] = bytemuck::cast_slice_mut(payload);
            kernels::quantize_into(vector, out)
        }
    };
    le::put_f32(&mut buf, OFF_SCALE, scale);
    let ct = params.child_table_offset();
    buf[ct..ct + CHILD_TABLE_BYTES].fill(0xFF);
    let mo = params.metadata_offset();
    buf[mo..mo + metadata.len()].copy_from_slice(metadata);
    buf
}

/// Tree fields rewritten when a node is placed in a new generation.
pub(crate) struct Placement<'a> {
    pub parent_slot: u64,
    pub children: &'a [u32],
    pub hub_penalty: f32,
}

/// Copies `src` into `dst`, clearing the tombstone flag and installing the
/// given tree fields.
pub(crate) fn place_node(params: &AtlasParams, src: NodeRef<'_>, dst: &mut [u8], placement: &Placement<'_>) {
    let stride = params.stride();
    // SAFETY: `src` points at a full record; only the flags word can change
    // concurrently and it is overwritten below.
    unsafe { std::ptr::copy_nonoverlapping(src.ptr, dst.as_mut_ptr(), stride) };
    let flags = if placement.children.is_empty() { 0 } else { FLAG_INTERNAL };
    le::put_u32(dst, OFF_FLAGS, flags);
    le::put_u32(dst, OFF_CHILD_COUNT, placement.children.len() as u32);
    le::put_u64(dst, OFF_PARENT, placement.parent_slot);
    le::put_f32(dst, OFF_HUB, placement.hub_penalty);
    let ct = params.child_table_offset();
    let table = &mut dst[ct..ct + CHILD_TABLE_BYTES];
    table.fill(0xFF);
    for (i, &c) in placement.children.iter().enumerate() {
        le::put_u32(table, 4 * i, c);
    }
}

/// A view of one node record.
///
/// Records can live in a shared mapping whose flags word is updated
/// atomically by tombstoning, so the flags are read atomically and every
/// other field is read from bytes that never change after publication.
#[derive(Clone, Copy)]
pub struct NodeRef<'a> {
    ptr: *const u8,
    params: &'a AtlasParams,
}

impl<'a> NodeRef<'a> {
    /// # Safety
    /// `ptr` must be 8-byte aligned and point at `params.stride()` readable
    /// bytes that stay valid for `'a`; only the flags word may be mutated
    /// during that time, and only atomically.
    pub(crate) unsafe fn from_ptr(ptr: *const u8, params: &'a AtlasParams) -> NodeRef<'a> {
        debug_assert_eq!(ptr as usize % 8, 0);
        NodeRef { ptr, params }
    }

    fn bytes(&self, off: usize, len: usize) -> &'a [u8] {
        debug_assert!(off + len <= self.params.stride());
        // SAFETY: in bounds of the record and disjoint from the flags word
        // for every caller.
        unsafe { std::slice::from_raw_parts(self.ptr.add(off), len) }
    }

    pub fn id(&self) -> u64 {
        le::get_u64(self.bytes(OFF_ID, 8), 0)
    }

    pub(crate) fn flags_atomic(&self) -> &'a AtomicU32 {
        // SAFETY: the flags word is 4-byte aligned within an 8-aligned record.
        unsafe { &*(self.ptr.add(OFF_FLAGS) as *const AtomicU32) }
    }

    pub fn flags(&self) -> u32 {
        self.flags_atomic().load(Ordering::Acquire)
    }

    pub fn is_tombstoned(&self) -> bool {
        self.flags() & FLAG_TOMBSTONE != 0
    }

    pub fn child_count(&self) -> u32 {
        le::get_u32(self.bytes(OFF_CHILD_COUNT, 4), 0)
    }

    pub fn parent_slot(&self) -> u64 {
        le::get_u64(self.bytes(OFF_PARENT, 8), 0)
    }

    pub fn scale(&self) -> f32 {
        le::get_f32(self.bytes(OFF_SCALE, 4), 0)
    }

    pub fn hub_penalty(&self) -> f32 {
        le::get_f32(self.bytes(OFF_HUB, 4), 0)
    }

    pub fn payload(&self) -> &'a [u8] {
        self.bytes(NODE_HEADER_BYTES, self.params.payload_bytes())
    }

    /// FP32 payload; only meaningful for FP32 indexes.
    pub fn vector_f32(&self) -> &'a [f32] {
        bytemuck::cast_slice(self.payload())
    }

    /// INT8 payload; only meaningful for INT8 indexes.
    pub fn vector_i8(&self) -> &'a [i8] {
        bytemuck::cast_slice(self.payload())
    }

    /// The stored vector as FP32, dequantizing INT8 payloads.
    pub fn to_f32(&self) -> Vec<f32> {
        match self.params.quantization {
            Quantization::Fp32 => self.vector_f32().to_vec(),
            Quantization::Int8 => {
                let mut out = vec![0.0; self.params.dim as usize];
                kernels::dequantize_into(self.vector_i8(), self.scale(), &mut out);
                out
            }
        }
    }

    pub fn child(&self, i: u32) -> u32 {
        le::get_u32(self.bytes(self.params.child_table_offset() + 4 * i as usize, 4), 0)
    }

    pub fn children(&self) -> impl Iterator<Item = u32> + 'a {
        let table = self.bytes(self.params.child_table_offset(), CHILD_TABLE_BYTES);
        let n = self.child_count().min(MAX_BRANCHING) as usize;
        table[..4 * n].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()))
    }

    pub fn metadata(&self) -> &'a [u8] {
        self.bytes(self.params.metadata_offset(), self.params.extra_metadata_bytes())
    }
}

/// Similarity between two stored nodes at index precision.
pub fn node_similarity(params: &AtlasParams, a: NodeRef<'_>, b: NodeRef<'_>) -> f32 {
    match params.quantization {
        Quantization::Fp32 => kernels::dot_f32(a.vector_f32(), b.vector_f32()),
        Quantization::Int8 => {
            kernels::dot_i8(a.vector_i8(), b.vector_i8()) as f32 * (a.scale() * b.scale())
        }
    }
}

/// A query prepared for scoring against stored nodes.
pub struct Scorer<'a> {
    quantization: Quantization,
    query: &'a [f32],
    quantized: Vec<i8>,
    scale: f32,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &AtlasParams, query: &'a [f32]) -> Scorer<'a> {
        let (quantized, scale) = match params.quantization {
            Quantization::Fp32 => (Vec::new(), 1.0),
            Quantization::Int8 => {
                let mut q = vec![0i8; query.len()];
                let s = kernels::quantize_into(query, &mut q);
                (q, s)
            }
        };
        Scorer {
            quantization: params.quantization,
            query,
            quantized,
            scale,
        }
    }

    #[inline]
    pub fn score(&self, node: NodeRef<'_>) -> f32 {
        match self.quantization {
            Quantization::Fp32 => kernels::dot_f32(self.query, node.vector_f32()),
            Quantization::Int8 => {
                kernels::dot_i8(&self.quantized, node.vector_i8()) as f32 * (self.scale * node.scale())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_for_768_dimensions() {
        assert_eq!(node_stride(768, Quantization::Fp32, 256), 3392);
        assert_eq!(node_stride(768, Quantization::Int8, 256), 1088);
        assert_eq!(node_stride(384, Quantization::Int8, 256), 704);
    }

    #[test]
    fn slot_capacity_doubles_from_4096() {
        assert_eq!(slot_capacity_for(0), 4096);
        assert_eq!(slot_capacity_for(4096), 4096);
        assert_eq!(slot_capacity_for(4097), 8192);
        assert_eq!(slot_capacity_for(100_000), 131_072);
        assert_eq!(slot_capacity_for(1_000_000), 1_048_576);
    }

    #[test]
    fn file_sizes_at_100k() {
        let fp = AtlasParams::new(768, Quantization::Fp32).unwrap();
        let i8 = AtlasParams::new(768, Quantization::Int8).unwrap();
        assert_eq!(fp.file_bytes(131_072), 4096 + 131_072 * 3392);
        assert_eq!(i8.file_bytes(131_072), 4096 + 131_072 * 1088);
    }

    #[test]
    fn parameter_validation() {
        assert!(AtlasParams::new(7, Quantization::Fp32).is_err());
        assert!(AtlasParams::new(4097, Quantization::Int8).is_err());
        let p = AtlasParams::new(8, Quantization::Fp32).unwrap();
        assert!(p.with_metadata_bytes(128).is_err());
        assert!(p.with_metadata_bytes(300).is_err());
        assert!(p.with_branching(0).is_err());
        assert!(p.with_branching(65).is_err());
        assert_eq!(p.with_metadata_bytes(320).unwrap().extra_metadata_bytes(), 64);
        assert!(Quantization::from_u32(2).is_err());
    }

    #[test]
    fn header_roundtrip_and_stride_check() {
        let params = AtlasParams::new(384, Quantization::Int8).unwrap();
        let h = AtlasHeader {
            params,
            node_count: 5,
            root_slot: 0,
            generation: 3,
            next_id: 9,
            depth: 1,
            slot_capacity: 4096,
        };
        let mut buf = vec![0u8; 4096];
        h.encode(&mut buf);
        let p = Path::new("x");
        assert_eq!(AtlasHeader::decode(&buf, p).unwrap(), h);
        le::put_u64(&mut buf, 40, 768);
        assert!(matches!(AtlasHeader::decode(&buf, p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn encoded_node_fields() {
        let params = AtlasParams::new(8, Quantization::Int8).unwrap().with_metadata_bytes(320).unwrap();
        let v = [0.5f32, -0.25, 0.125, 0.0, 0.0, 0.0, 0.0, 0.0];
        let words: Vec<u64> = {
            let rec = encode_node(&params, 42, &v, b"meta");
            let mut w = vec![0u64; rec.len() / 8];
            bytemuck::cast_slice_mut::<u64, u8>(&mut w).copy_from_slice(&rec);
            w
        };
        let node = unsafe { NodeRef::from_ptr(words.as_ptr() as *const u8, &params) };
        assert_eq!(node.id(), 42);
        assert_eq!(node.flags(), 0);
        assert_eq!(node.child_count(), 0);
        assert_eq!(node.parent_slot(), NO_PARENT);
        assert_eq!(&node.vector_i8()[..4], &[127, -64, 32, 0]);
        assert_eq!(node.scale(), (0.5f64 / 127.0) as f32);
        assert_eq!(&node.metadata()[..4], b"meta");
        assert_eq!(node.children().count(), 0);
        assert_eq!(node.child(0), NO_CHILD);
    }
}
