//! Bulk construction of a generation file from a list of live nodes.

use std::path::Path;
use std::sync::Arc;

use super::layout::{
    node_similarity, place_node, slot_capacity_for, AtlasHeader, AtlasParams, NodeRef, Placement, NO_PARENT,
};
use crate::error::Result;
use crate::storage::{EpochManager, GenerationFile, HEADER_BYTES};

/// Parent links, child lists and depths of a routed tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeShape {
    pub parent: Vec<u64>,
    pub children: Vec<Vec<u32>>,
    pub depth: u32,
}

/// Routes nodes into a tree in the given order.
///
/// Node 0 is the root. Each later node descends from the root: it becomes
/// a child of the current node if that node has fewer than `B` children,
/// and otherwise moves on to the current node's most similar child (the
/// lowest slot on ties).
pub fn route(params: &AtlasParams, nodes: &[NodeRef<'_>]) -> TreeShape {
    let n = nodes.len();
    let b = params.branching as usize;
    let mut parent = vec![NO_PARENT; n];
    let mut children: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut depth_of = vec![0u32; n];
    let mut depth = 0;
    for i in 1..n {
        let mut cur = 0usize;
        loop {
            if children[cur].len() < b {
                children[cur].push(i as u32);
                parent[i] = cur as u64;
                depth_of[i] = depth_of[cur] + 1;
                depth = depth.max(depth_of[i]);
                break;
            }
            let mut next = (usize::MAX, f32::NEG_INFINITY);
            for &c in &children[cur] {
                let s = node_similarity(params, nodes[i], nodes[c as usize]);
                if next.0 == usize::MAX || s > next.1 {
                    next = (c as usize, s);
                }
            }
            cur = next.0;
        }
    }
    TreeShape {
        parent,
        children,
        depth,
    }
}

/// Mean similarity of each node to its siblings; 0 for the root and for
/// only children.
pub fn hub_penalties(params: &AtlasParams, nodes: &[NodeRef<'_>], shape: &TreeShape) -> Vec<f32> {
    let mut sums = vec![0.0f64; nodes.len()];
    let mut out = vec![0.0f32; nodes.len()];
    for kids in &shape.children {
        let k = kids.len();
        if k < 2 {
            continue;
        }
        for a in 0..k {
            for b in a + 1..k {
                let (x, y) = (kids[a] as usize, kids[b] as usize);
                let s = f64::from(node_similarity(params, nodes[x], nodes[y]));
                sums[x] += s;
                sums[y] += s;
            }
        }
        for &c in kids {
            out[c as usize] = (sums[c as usize] / (k - 1) as f64) as f32;
        }
    }
    out
}

/// Writes `nodes` as a new generation file at `path` and syncs it.
pub(crate) fn write_generation(
    path: &Path,
    params: &AtlasParams,
    nodes: &[NodeRef<'_>],
    generation: u32,
    next_id: u64,
    epochs: Arc<EpochManager>,
) -> Result<(GenerationFile, AtlasHeader)> {
    let shape = route(params, nodes);
    let hubs = hub_penalties(params, nodes, &shape);
    let slot_capacity = slot_capacity_for(nodes.len() as u64);
    let file = GenerationFile::create(path, generation, params.file_bytes(slot_capacity), epochs)?;
    let stride = params.stride();
    let mut buf = vec![0u8; stride];
    for (i, node) in nodes.iter().enumerate() {
        place_node(
            params,
            *node,
            &mut buf,
            &Placement {
                parent_slot: shape.parent[i],
                children: &shape.children[i],
                hub_penalty: hubs[i],
            },
        );
        file.write_at(HEADER_BYTES + (i * stride) as u64, &buf)?;
    }
    let header = AtlasHeader {
        params: *params,
        node_count: nodes.len() as u64,
        root_slot: if nodes.is_empty() { NO_PARENT } else { 0 },
        generation: u64::from(generation),
        next_id,
        depth: u64::from(shape.depth),
        slot_capacity,
    };
    let mut page = vec![0u8; HEADER_BYTES as usize];
    header.encode(&mut page);
    file.write_at(0, &page)?;
    file.set_used(HEADER_BYTES + (nodes.len() * stride) as u64);
    file.sync()?;
    Ok((file, header))
}
