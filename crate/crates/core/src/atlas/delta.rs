use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;

use super::layout::{AtlasParams, NodeRef, FLAG_TOMBSTONE};

/// Node records inserted since the last freeze, plus tombstones issued
/// since then.
///
/// Records use the generation file's stride so a frozen delta can be copied
/// into the next generation verbatim. The arena is a `Vec<u64>` so every
/// record starts 8-byte aligned.
pub(crate) struct Delta {
    params: AtlasParams,
    words: Vec<u64>,
    len: usize,
    index: HashMap<u64, usize>,
    /// Ids tombstoned since the last freeze, wherever the node lives.
    tombstones: HashSet<u64>,
}

impl Delta {
    pub fn new(params: AtlasParams) -> Delta {
        Delta {
            params,
            words: Vec::new(),
            len: 0,
            index: HashMap::new(),
            tombstones: HashSet::new(),
        }
    }

    fn stride_words(&self) -> usize {
        self.params.stride() / 8
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn bytes(&self) -> u64 {
        (self.len * self.params.stride()) as u64
    }

    pub fn push(&mut self, record: &[u8]) {
        debug_assert_eq!(record.len(), self.params.stride());
        let start = self.words.len();
        self.words.resize(start + self.stride_words(), 0);
        bytemuck::cast_slice_mut::<u64, u8>(&mut self.words[start..]).copy_from_slice(record);
        let id = u64::from_le_bytes(record[..8].try_into().unwrap());
        self.index.insert(id, self.len);
        self.len += 1;
    }

    pub fn record(&self, i: usize) -> NodeRef<'_> {
        assert!(i < self.len);
        let ptr = self.words[i * self.stride_words()..].as_ptr() as *const u8;
        // SAFETY: aligned, in bounds, and borrowed from `self`.
        unsafe { NodeRef::from_ptr(ptr, &self.params) }
    }

    pub fn records(&self) -> impl Iterator<Item = NodeRef<'_>> {
        (0..self.len).map(move |i| self.record(i))
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    /// Flags a record held here and records the id as tombstoned.
    pub fn tombstone(&mut self, id: u64) {
        if let Some(i) = self.position(id) {
            self.record(i).flags_atomic().fetch_or(FLAG_TOMBSTONE, Ordering::AcqRel);
        }
        self.tombstones.insert(id);
    }


    pub fn is_tombstoned(&self, id: u64) -> bool {
        !self.tombstones.is_empty() && self.tombstones.contains(&id)
    }

    /// Moves everything out, leaving an empty delta behind.
    pub fn take(&mut self) -> Delta {
        std::mem::replace(self, Delta::new(self.params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::layout::{encode_node, Quantization};

    #[test]
    fn push_lookup_and_tombstone() {
        let params = AtlasParams::new(8, Quantization::Fp32).unwrap();
        let mut d = Delta::new(params);
        let v = [1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        d.push(&encode_node(&params, 7, &v, &[]));
        d.push(&encode_node(&params, 9, &v, &[]));
        assert_eq!(d.len(), 2);
        assert_eq!(d.bytes(), 2 * params.stride() as u64);
        assert_eq!(d.record(1).id(), 9);
        assert_eq!(d.record(0).vector_f32(), &v);
        d.tombstone(9);
        d.tombstone(1234);
        assert!(d.record(1).is_tombstoned());
        assert!(!d.record(0).is_tombstoned());
        assert!(d.is_tombstoned(1234));
        let frozen = d.take();
        assert_eq!((frozen.len(), d.len()), (2, 0));
        assert!(d.tombstones.is_empty());
    }
}
