//! Lifetime-based buffer planning.

use crate::graph::{DType, Graph, TensorId};

/// Which arena a buffer lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arena {
    /// `f32` activations.
    Float,
    /// Bitpacked `u32` words.
    Words,
}

/// One planned activation buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Buffer {
    pub tensor: TensorId,
    pub arena: Arena,
    /// Length in arena elements (4 bytes each).
    pub len: usize,
    /// First step at which the buffer is live (producer, or 0 for inputs).
    pub first: usize,
    /// Last step at which the buffer is read; graph outputs stay live until
    /// the end.
    pub last: usize,
    /// Offset in arena elements.
    pub offset: usize,
}

impl Buffer {
    pub fn bytes(&self) -> usize {
        self.len * 4
    }

    pub fn live_together(&self, other: &Buffer) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    pub fn overlaps(&self, other: &Buffer) -> bool {
        self.arena == other.arena && self.offset < other.offset + other.len && other.offset < self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryPlan {
    pub buffers: Vec<Buffer>,
    pub float_len: usize,
    pub words_len: usize,
}

impl MemoryPlan {
    pub fn peak_bytes(&self) -> usize {
        (self.float_len + self.words_len) * 4
    }

    /// Total bytes without any reuse.
    pub fn unshared_bytes(&self) -> usize {
        self.buffers.iter().map(Buffer::bytes).sum()
    }

    pub fn buffer_of(&self, t: TensorId) -> Option<usize> {
        self.buffers.iter().position(|b| b.tensor == t)
    }

    /// Pairs of buffers that are live at the same step and share memory.
    pub fn conflicts(&self) -> Vec<(TensorId, TensorId)> {
        let mut out = Vec::new();
        for (i, a) in self.buffers.iter().enumerate() {
            for b in &self.buffers[i + 1..] {
                if a.len > 0 && b.len > 0 && a.live_together(b) && a.overlaps(b) {
                    out.push((a.tensor, b.tensor));
                }
            }
        }
        out
    }
}

/// Plans every non-constant tensor of a shape-inferred, sorted graph.
pub fn plan_memory(graph: &Graph) -> MemoryPlan {
    let steps = graph.nodes.len();
    let mut buffers: Vec<Buffer> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut add = |t: TensorId, first: usize, buffers: &mut Vec<Buffer>| {
        let def = graph.tensor(t);
        let arena = match def.dtype {
            DType::Bitpacked => Arena::Words,
            _ => Arena::Float,
        };
        index.insert(t, buffers.len());
        buffers.push(Buffer {
            tensor: t,
            arena,
            len: def.storage_len().unwrap_or(0),
            first,
            last: first,
            offset: 0,
        });
    };
    for &t in &graph.inputs {
        add(t, 0, &mut buffers);
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        for &t in &node.outputs {
            add(t, i, &mut buffers);
        }
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        for t in &node.inputs {
            if let Some(&b) = index.get(t) {
                buffers[b].last = buffers[b].last.max(i);
            }
        }
    }
    for t in &graph.outputs {
        if let Some(&b) = index.get(t) {
            buffers[b].last = steps;
        }
    }

    // Largest first; each buffer takes the smallest gap that fits among the
    // buffers already placed that are live at the same time.
    let mut order: Vec<usize> = (0..buffers.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(buffers[i].len), buffers[i].first, buffers[i].tensor));
    let mut placed: Vec<usize> = Vec::new();
    for &i in &order {
        let mut busy: Vec<(usize, usize)> = placed
            .iter()
            .map(|&j| &buffers[j])
            .filter(|b| b.arena == buffers[i].arena && b.live_together(&buffers[i]) && b.len > 0)
            .map(|b| (b.offset, b.offset + b.len))
            .collect();
        busy.sort_unstable();
        let len = buffers[i].len;
        let mut best: Option<(usize, usize)> = None;
        let mut cursor = 0;
        for &(start, end) in &busy {
            if start > cursor {
                let gap = start - cursor;
                if gap >= len && best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, cursor));
                }
            }
            cursor = cursor.max(end);
        }
        buffers[i].offset = best.map_or(cursor, |(_, at)| at);
        placed.push(i);
    }
    let extent = |arena: Arena| {
        buffers
            .iter()
            .filter(|b| b.arena == arena)
            .map(|b| b.offset + b.len)
            .max()
            .unwrap_or(0)
    };
    MemoryPlan {
        float_len: extent(Arena::Float),
        words_len: extent(Arena::Words),
        buffers,
    }
}
