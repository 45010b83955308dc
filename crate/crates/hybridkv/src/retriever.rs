//! Chunk-wise dynamic retrieval: the context is cut into contiguous
//! fixed-size chunks, each summarized by its mean key vector. At every
//! decode step the query scores all chunk summaries by inner product, the
//! top-capacity chunks become the resident set (an exact replacement), and
//! only newly resident chunks pay a transfer cost out of the slow tier.

use crate::error::{Error, Result};

/// Summary index over one head's keys: one mean-key centroid per chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkIndex {
    pub chunk_size: usize,
    pub context_len: usize,
    pub head_dim: usize,
    /// Row-major `[num_chunks, head_dim]` centroids.
    pub centroids: Vec<f32>,
}

impl ChunkIndex {
    pub fn num_chunks(&self) -> usize {
        self.context_len.div_ceil(self.chunk_size)
    }

    /// Half-open token range `[start, end)` covered by chunk `g`; the final
    /// chunk may be ragged.
    pub fn chunk_bounds(&self, g: usize) -> (usize, usize) {
        let start = g * self.chunk_size;
        (start, ((g + 1) * self.chunk_size).min(self.context_len))
    }

    pub fn chunk_tokens(&self, g: usize) -> usize {
        let (start, end) = self.chunk_bounds(g);
        end - start
    }

    /// Bytes held by the summary index itself (f32 centroids).
    pub fn metadata_bytes(&self) -> u64 {
        (self.num_chunks() * self.head_dim * 4) as u64
    }
}

/// Build the mean-key index over `keys` laid out `[context_len, head_dim]`.
pub fn build_index(
    keys: &[f32],
    context_len: usize,
    head_dim: usize,
    chunk_size: usize,
) -> Result<ChunkIndex> {
    if chunk_size == 0 {
        return Err(Error::InvalidArg("chunk_size must be >= 1".into()));
    }
    if context_len == 0 || head_dim == 0 {
        return Err(Error::InvalidArg("index needs a non-empty key matrix".into()));
    }
    if keys.len() != context_len * head_dim {
        return Err(Error::Shape(format!(
            "key matrix has {} floats, expected {}",
            keys.len(),
            context_len * head_dim
        )));
    }
    let num_chunks = context_len.div_ceil(chunk_size);
    let mut centroids = vec![0.0f32; num_chunks * head_dim];
    for g in 0..num_chunks {
        let start = g * chunk_size;
        let end = ((g + 1) * chunk_size).min(context_len);
        let mut acc = vec![0.0f64; head_dim];
        for row in keys[start * head_dim..end * head_dim].chunks_exact(head_dim) {
            for (a, &x) in acc.iter_mut().zip(row.iter()) {
                *a += x as f64;
            }
        }
        let inv = 1.0 / (end - start) as f64;
        for (out, a) in centroids[g * head_dim..(g + 1) * head_dim]
            .iter_mut()
            .zip(acc.iter())
        {
            *out = (a * inv) as f32;
        }
    }
    Ok(ChunkIndex {
        chunk_size,
        context_len,
        head_dim,
        centroids,
    })
}

/// Raw inner product of the query against every centroid.
pub fn score_chunks(index: &ChunkIndex, query: &[f32]) -> Result<Vec<f64>> {
    if query.len() != index.head_dim {
        return Err(Error::Shape(format!(
            "query has {} dims, index expects {}",
            query.len(),
            index.head_dim
        )));
    }
    let d = index.head_dim;
    Ok((0..index.num_chunks())
        .map(|g| {
            index.centroids[g * d..(g + 1) * d]
                .iter()
                .zip(query.iter())
                .map(|(&c, &q)| c as f64 * q as f64)
                .sum()
        })
        .collect())
}

/// Pick the `capacity` best-scoring chunk ids (ties to the lower id),
/// returned sorted ascending. Capacities beyond the chunk count saturate.
pub fn select_top_chunks(scores: &[f64], capacity: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b)));
    ids.truncate(capacity);
    ids.sort_unstable();
    ids
}

/// Two-tier store for one dynamic head: the full key/value matrices sit in
/// the slow tier; a resident chunk set is served from the fast tier. Every
/// resident-set replacement charges `tokens * 2 * head_dim * 4` bytes for
/// each chunk that was not already resident; evictions are free.
#[derive(Debug, Clone)]
pub struct TieredStore {
    keys: Vec<f32>,
    values: Vec<f32>,
    index_geometry: ChunkIndex,
    resident: Vec<usize>,
    transfer_bytes: u64,
}

impl TieredStore {
    /// Wrap one head's `[context_len, head_dim]` key/value matrices. The
    /// fast tier starts empty.
    pub fn new(
        keys: Vec<f32>,
        values: Vec<f32>,
        context_len: usize,
        head_dim: usize,
        chunk_size: usize,
    ) -> Result<Self> {
        if values.len() != keys.len() {
            return Err(Error::Shape(format!(
                "key/value matrices disagree: {} vs {} floats",
                keys.len(),
                values.len()
            )));
        }
        // Reuse the index constructor's geometry checks; centroids are
        // discarded (the caller builds its own index from the same keys).
        let index_geometry = build_index(&keys, context_len, head_dim, chunk_size)?;
        Ok(Self {
            keys,
            values,
            index_geometry,
            resident: Vec::new(),
            transfer_bytes: 0,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.index_geometry.num_chunks()
    }

    /// Resident chunk ids, ascending.
    pub fn resident(&self) -> &[usize] {
        &self.resident
    }

    /// Tokens currently in the fast tier.
    pub fn resident_tokens(&self) -> usize {
        self.resident
            .iter()
            .map(|&g| self.index_geometry.chunk_tokens(g))
            .sum()
    }

    /// Cumulative bytes moved from the slow tier since construction.
    pub fn transfer_bytes(&self) -> u64 {
        self.transfer_bytes
    }

    /// Replace the resident set. Chunks already resident stay free of
    /// charge; each newly loaded chunk pays its key+value bytes. Returns the
    /// bytes charged by this call.
    pub fn set_resident(&mut self, chunks: &[usize]) -> Result<u64> {
        let mut next: Vec<usize> = chunks.to_vec();
        next.sort_unstable();
        next.dedup();
        if let Some(&bad) = next.iter().find(|&&g| g >= self.num_chunks()) {
            return Err(Error::InvalidArg(format!(
                "chunk id {bad} out of range (have {})",
                self.num_chunks()
            )));
        }
        let d = self.index_geometry.head_dim;
        let mut loaded = 0u64;
        for &g in &next {
            if self.resident.binary_search(&g).is_err() {
                loaded += (self.index_geometry.chunk_tokens(g) * 2 * d * 4) as u64;
            }
        }
        self.resident = next;
        self.transfer_bytes += loaded;
        Ok(loaded)
    }

    /// Copy the resident rows out of the slow tier: `(positions, keys,
    /// values)` with positions ascending and rows bit-identical to the
    /// originals.
    pub fn gather(&self) -> (Vec<usize>, Vec<f32>, Vec<f32>) {
        let d = self.index_geometry.head_dim;
        let tokens = self.resident_tokens();
        let mut positions = Vec::with_capacity(tokens);
        let mut keys = Vec::with_capacity(tokens * d);
        let mut values = Vec::with_capacity(tokens * d);
        for &g in &self.resident {
            let (start, end) = self.index_geometry.chunk_bounds(g);
            positions.extend(start..end);
            keys.extend_from_slice(&self.keys[start * d..end * d]);
            values.extend_from_slice(&self.values[start * d..end * d]);
        }
        (positions, keys, values)
    }
}
