//! Tree descent and linear scans over node records.

use super::layout::{AtlasParams, NodeRef, Scorer};
use crate::storage::HEADER_BYTES;

/// The node slots of one mapped generation.
#[derive(Clone, Copy)]
pub(crate) struct Tree<'g> {
    base: *const u8,
    count: u64,
    root: u64,
    params: &'g AtlasParams,
}

impl<'g> Tree<'g> {
    /// # Safety
    /// `file_base` must point at a mapping holding the header plus `count`
    /// records, kept alive for `'g`.
    pub unsafe fn new(file_base: *const u8, count: u64, root: u64, params: &'g AtlasParams) -> Tree<'g> {
        Tree {
            base: file_base.add(HEADER_BYTES as usize),
            count,
            root,
            params,
        }
    }


    pub fn node(&self, slot: u64) -> NodeRef<'g> {
        assert!(slot < self.count, "slot {slot} out of {} nodes", self.count);
        // SAFETY: slot is in bounds; records are 64-byte aligned in a
        // page-aligned mapping.
        unsafe { NodeRef::from_ptr(self.base.add(slot as usize * self.params.stride()), self.params) }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeRef<'g>> + '_ {
        (0..self.count).map(move |s| self.node(s))
    }

    pub fn root(&self) -> Option<u64> {
        (self.count > 0).then_some(self.root)
    }
}

/// Running best live candidate. Earlier candidates win ties.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Best {
    pub hit: Option<(u64, f32)>,
}

impl Best {
    #[inline]
    pub fn offer(&mut self, id: u64, sim: f32) {
        if self.hit.is_none_or(|(_, s)| sim > s) {
            self.hit = Some((id, sim));
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Counters {
    pub hops: u32,
    pub comparisons: u64,
    pub expanded: u64,
}

/// Descends from the root to a leaf, always moving to the most similar
/// child (lowest slot on ties). Every scored live node is a candidate.
pub(crate) fn greedy(
    tree: &Tree<'_>,
    scorer: &Scorer<'_>,
    live: &impl Fn(NodeRef<'_>) -> bool,
    best: &mut Best,
    c: &mut Counters,
) {
    let Some(root) = tree.root() else { return };
    let mut node = tree.node(root);
    let s = scorer.score(node);
    c.comparisons += 1;
    if live(node) {
        best.offer(node.id(), s);
    }
    loop {
        let mut next: Option<(u32, f32)> = None;
        for slot in node.children() {
            let child = tree.node(u64::from(slot));
            let s = scorer.score(child);
            c.comparisons += 1;
            if live(child) {
                best.offer(child.id(), s);
            }
            if next.is_none_or(|(_, b)| s > b) {
                next = Some((slot, s));
            }
        }
        let Some((slot, _)) = next else { break };
        c.expanded += 1;
        c.hops += 1;
        node = tree.node(u64::from(slot));
    }
}

/// Level-wise beam search.
///
/// The first frontier entry always follows the greedy path (the best child
/// of the previous first entry); the other `width - 1` entries are the best
/// remaining candidates of the level. With `csls` the frontier is chosen by
/// `2 * sim - hub_penalty`; candidates are still ranked by raw similarity.
pub(crate) fn beam(
    tree: &Tree<'_>,
    scorer: &Scorer<'_>,
    width: usize,
    csls: bool,
    live: &impl Fn(NodeRef<'_>) -> bool,
    best: &mut Best,
    c: &mut Counters,
) {
    debug_assert!(width >= 1);
    let Some(root) = tree.root() else { return };
    let root_node = tree.node(root);
    let s = scorer.score(root_node);
    c.comparisons += 1;
    if live(root_node) {
        best.offer(root_node.id(), s);
    }
    let mut frontier = vec![root as u32];
    // (selection score, slot, index of the parent in the frontier)
    let mut candidates: Vec<(f32, u32, usize)> = Vec::new();
    loop {
        candidates.clear();
        for (pi, &f) in frontier.iter().enumerate() {
            let parent = tree.node(u64::from(f));
            let before = candidates.len();
            for slot in parent.children() {
                let child = tree.node(u64::from(slot));
                let s = scorer.score(child);
                c.comparisons += 1;
                if live(child) {
                    best.offer(child.id(), s);
                }
                let sel = if csls { 2.0 * s - child.hub_penalty() } else { s };
                candidates.push((sel, slot, pi));
            }
            if candidates.len() > before {
                c.expanded += 1;
            }
        }
        if candidates.is_empty() {
            break;
        }
        c.hops += 1;
        let mut principal: Option<(f32, u32)> = None;
        for &(sel, slot, pi) in &candidates {
            if pi == 0 && principal.is_none_or(|(b, _)| sel > b) {
                principal = Some((sel, slot));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        frontier.clear();
        if let Some((_, slot)) = principal {
            frontier.push(slot);
        }
        for &(_, slot, _) in &candidates {
            if frontier.len() == width {
                break;
            }
            if Some(slot) != principal.map(|p| p.1) {
                frontier.push(slot);
            }
        }
    }
}

/// Scores every record, offering the live ones.
pub(crate) fn scan<'r>(
    records: impl Iterator<Item = NodeRef<'r>>,
    scorer: &Scorer<'_>,
    live: &impl Fn(NodeRef<'_>) -> bool,
    best: &mut Best,
    c: &mut Counters,
) {
    for node in records {
        let s = scorer.score(node);
        c.comparisons += 1;
        if live(node) {
            best.offer(node.id(), s);
        }
    }
}

/// Scores only live records; the comparison count equals the live count.
pub(crate) fn scan_live<'r>(
    records: impl Iterator<Item = NodeRef<'r>>,
    scorer: &Scorer<'_>,
    live: &impl Fn(NodeRef<'_>) -> bool,
    best: &mut Best,
    c: &mut Counters,
) {
    for node in records {
        if live(node) {
            let s = scorer.score(node);
            c.comparisons += 1;
            best.offer(node.id(), s);
        }
    }
}
