//! Exact top-k cosine-similarity search.
//!
//! Both matrices are copied into a zero-padded layout whose row stride is a
//! multiple of [`LANES`]. Queries are split into tiles processed in parallel;
//! inside a tile the reference matrix is walked in cache-sized tiles and a
//! register-blocked micro-kernel produces a `QB x RB` block of scores at a
//! time, each fed into a per-query bounded heap.
//!
//! Every score is bit-identical to [`similarity`]: lane `l` accumulates the
//! products of coordinates `d ≡ l (mod LANES)` in increasing `d`, then the
//! lanes are folded pairwise. Tiling, blocking and thread count therefore do
//! not affect results.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;

pub const LANES: usize = 8;

const QUERY_TILE: usize = 64;
/// Bytes of reference rows scanned per query tile before moving on.
const REFERENCE_TILE_BYTES: usize = 256 * 1024;
const QB: usize = 4;
const RB: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnnError {
    #[error("dimension mismatch: query has {query} columns, reference has {reference}")]
    Shape { query: usize, reference: usize },
    #[error("{0} matrix is not normalized")]
    NotNormalized(&'static str),
    #[error("k = {k} outside 1..={n_reference}")]
    InvalidK { k: usize, n_reference: usize },
}

/// Neighbours per query row, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    k: usize,
    indices: Vec<usize>,
    scores: Vec<f32>,
}

impl TopK {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        self.indices.len() / self.k
    }

    /// Reference indices for query `q`, ordered by descending score, ties by
    /// ascending index.
    pub fn indices(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn scores(&self, q: usize) -> &[f32] {
        &self.scores[q * self.k..(q + 1) * self.k]
    }

    pub fn best(&self, q: usize) -> (usize, f32) {
        (self.indices[q * self.k], self.scores[q * self.k])
    }
}

#[inline(always)]
fn fold_lanes(acc: [f32; LANES]) -> f32 {
    let s = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    let t = [s[0] + s[2], s[1] + s[3]];
    t[0] + t[1]
}

/// The canonical similarity of two equal-length vectors.
pub fn similarity(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    for (ca, cb) in a.chunks(LANES).zip(b.chunks(LANES)) {
        for l in 0..ca.len() {
            acc[l] += ca[l] * cb[l];
        }
    }
    fold_lanes(acc)
}

/// Heap entry ordered so that the heap's maximum is the worst neighbour.
#[derive(Clone, Copy)]
struct Candidate {
    score: f32,
    index: usize,
}

impl Candidate {
    fn beats(&self, other: &Candidate) -> bool {
        self.score > other.score || (self.score == other.score && self.index < other.index)
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // better sorts first, so the max-heap top is the worst kept entry
        if self.beats(other) {
            Ordering::Less
        } else if other.beats(self) {
            Ordering::Greater
        } else {
            Ordering::Equal
        }
    }
}

/// Bounded heap keeping the `k` best candidates seen so far.
struct BoundedHeap {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl BoundedHeap {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    fn push(&mut self, score: f32, index: usize) {
        let c = Candidate { score, index };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c.beats(&worst) {
                *worst = c;
            }
        }
    }

    /// Best first.
    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

/// Copies rows into a zero-padded buffer with stride `stride`.
fn pad_rows(m: &EmbeddingMatrix, stride: usize) -> Cow<'_, [f32]> {
    let dim = m.dim();
    if stride == dim {
        return Cow::Borrowed(m.data());
    }
    let mut out = vec![0.0f32; m.rows() * stride];
    for (dst, src) in out.chunks_exact_mut(stride).zip(m.data().chunks_exact(dim)) {
        dst[..dim].copy_from_slice(src);
    }
    Cow::Owned(out)
}

#[inline(always)]
fn block_scores<const Q: usize, const R: usize>(queries: [&[f32]; Q], refs: [&[f32]; R]) -> [[f32; R]; Q] {
    let mut acc = [[[0.0f32; LANES]; R]; Q];
    let chunks = queries[0].len() / LANES;
    for c in 0..chunks {
        let off = c * LANES;
        let lanes = |row: &[f32]| -> [f32; LANES] { *<&[f32; LANES]>::try_from(&row[off..off + LANES]).unwrap() };
        let rv: [[f32; LANES]; R] = std::array::from_fn(|j| lanes(refs[j]));
        for i in 0..Q {
            let qv = lanes(queries[i]);
            for j in 0..R {
                for l in 0..LANES {
                    acc[i][j][l] += qv[l] * rv[j][l];
                }
            }
        }
    }
    let mut out = [[0.0f32; R]; Q];
    for i in 0..Q {
        for j in 0..R {
            out[i][j] = fold_lanes(acc[i][j]);
        }
    }
    out
}

#[inline(always)]
fn scan_rows<const Q: usize>(
    queries: [&[f32]; Q],
    heaps: &mut [BoundedHeap],
    reference: &[f32],
    stride: usize,
    ref_start: usize,
    ref_end: usize,
) {
    let row = |r: usize| &reference[r * stride..(r + 1) * stride];
    let mut r = ref_start;
    while r + RB <= ref_end {
        let scores = block_scores::<Q, RB>(queries, [row(r), row(r + 1), row(r + 2), row(r + 3)]);
        for (i, heap) in heaps.iter_mut().enumerate() {
            for (j, &s) in scores[i].iter().enumerate() {
                heap.push(s, r + j);
            }
        }
        r += RB;
    }
    while r < ref_end {
        let scores = block_scores::<Q, 1>(queries, [row(r)]);
        for (i, heap) in heaps.iter_mut().enumerate() {
            heap.push(scores[i][0], r);
        }
        r += 1;
    }
}

#[inline(always)]
fn scan_query_tile_impl(tile: &[f32], reference: &[f32], stride: usize, k: usize) -> Vec<BoundedHeap> {
    let n_q = tile.len() / stride;
    let n_r = reference.len() / stride;
    let mut heaps: Vec<BoundedHeap> = (0..n_q).map(|_| BoundedHeap::new(k)).collect();
    let ref_tile = (REFERENCE_TILE_BYTES / (stride * 4)).max(RB * 4) / RB * RB;
    let qrow = |q: usize| &tile[q * stride..(q + 1) * stride];

    let mut start = 0;
    while start < n_r {
        let end = (start + ref_tile).min(n_r);
        let mut q = 0;
        while q + QB <= n_q {
            scan_rows::<QB>(
                [qrow(q), qrow(q + 1), qrow(q + 2), qrow(q + 3)],
                &mut heaps[q..q + QB],
                reference,
                stride,
                start,
                end,
            );
            q += QB;
        }
        while q < n_q {
            scan_rows::<1>([qrow(q)], &mut heaps[q..q + 1], reference, stride, start, end);
            q += 1;
        }
        start = end;
    }
    heaps
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn scan_query_tile_avx512(tile: &[f32], reference: &[f32], stride: usize, k: usize) -> Vec<BoundedHeap> {
    scan_query_tile_impl(tile, reference, stride, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scan_query_tile_avx2(tile: &[f32], reference: &[f32], stride: usize, k: usize) -> Vec<BoundedHeap> {
    scan_query_tile_impl(tile, reference, stride, k)
}

fn scan_query_tile(tile: &[f32], reference: &[f32], stride: usize, k: usize) -> Vec<BoundedHeap> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            return unsafe { scan_query_tile_avx512(tile, reference, stride, k) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { scan_query_tile_avx2(tile, reference, stride, k) };
        }
    }
    scan_query_tile_impl(tile, reference, stride, k)
}

/// Exact `k` most similar reference rows for every query row.
///
/// Runs on the current rayon pool; the result does not depend on its size.
pub fn topk(query: &EmbeddingMatrix, reference: &EmbeddingMatrix, k: usize) -> Result<TopK, KnnError> {
    if query.dim() != reference.dim() {
        return Err(KnnError::Shape { query: query.dim(), reference: reference.dim() });
    }
    if !query.is_normalized() {
        return Err(KnnError::NotNormalized("query"));
    }
    if !reference.is_normalized() {
        return Err(KnnError::NotNormalized("reference"));
    }
    if k == 0 || k > reference.rows() {
        return Err(KnnError::InvalidK { k, n_reference: reference.rows() });
    }
    let stride = query.dim().div_ceil(LANES) * LANES;
    let q = pad_rows(query, stride);
    let r = pad_rows(reference, stride);

    let per_tile: Vec<Vec<BoundedHeap>> =
        q.par_chunks(QUERY_TILE * stride).map(|tile| scan_query_tile(tile, &r, stride, k)).collect();

    let mut indices = Vec::with_capacity(query.rows() * k);
    let mut scores = Vec::with_capacity(query.rows() * k);
    for heap in per_tile.into_iter().flatten() {
        for c in heap.into_sorted() {
            indices.push(c.index);
            scores.push(c.score);
        }
    }
    Ok(TopK { k, indices, scores })
}
