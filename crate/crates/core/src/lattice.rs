//! The permutohedral lattice: elevation onto the sum-zero hyperplane,
//! enclosing-simplex location, the occupied-vertex index and the
//! one-ring neighbor adjacency.
//!
//! A `d`-dimensional lattice feature vector is first scaled per axis, then
//! mapped to `d + 1` coordinates summing to zero. Lattice vertices are the
//! integer points of that hyperplane whose coordinates are all congruent
//! modulo `d + 1`; the common residue is the vertex's *remainder*. Every
//! elevated point lies in a simplex with exactly one vertex of each
//! remainder, and its barycentric weights in that simplex drive splatting
//! and slicing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Sentinel for an unoccupied vertex in embeddings and adjacency tables.
pub const MISSING: u32 = u32::MAX;

// Elevated coordinates must stay well inside i32 range once rounded.
const MAX_ELEVATED: f64 = 1.0e9;

/// Per-axis lattice scale. Larger values give a finer lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeConfig {
    scale: Vec<f64>,
}

impl LatticeConfig {
    pub fn new(scale: Vec<f64>) -> Result<Self> {
        if scale.is_empty() {
            return Err(Error::InvalidInput(
                "lattice dimensionality must be at least 1".into(),
            ));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "lattice scale entries must be positive and finite, got {s}"
            )));
        }
        Ok(Self { scale })
    }

    /// `lambda` along each of `dim` axes.
    pub fn isotropic(dim: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; dim])
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Every scale entry divided by `divisor`.
    pub fn divided_by(&self, divisor: f64) -> Result<Self> {
        Self::new(self.scale.iter().map(|s| s / divisor).collect())
    }
}

/// A lattice feature vector lifted onto the sum-zero hyperplane.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevatedPoint {
    pub coords: Vec<f64>,
}

/// Integer coordinates of a lattice vertex plus its remainder class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatticeKey {
    pub coords: Vec<i32>,
    pub remainder: usize,
}

/// The enclosing simplex of an elevated point. `vertex_keys[k]` is the
/// remainder-`k` vertex and `bary[k]` its barycentric weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexEmbedding {
    pub vertex_keys: Vec<LatticeKey>,
    pub bary: Vec<f64>,
}

/// Scales `feature` and lifts it onto the `d + 1` dimensional sum-zero
/// hyperplane.
pub fn elevate(feature: &[f64], config: &LatticeConfig) -> Result<ElevatedPoint> {
    let d = config.dim();
    if feature.len() != d {
        return Err(Error::shape(format!(
            "lattice feature has {} entries, lattice is {d}-dimensional",
            feature.len()
        )));
    }
    let factors = canonical_factors(config);
    let mut coords = vec![0.0; d + 1];
    elevate_into(feature, &factors, &mut coords)?;
    Ok(ElevatedPoint { coords })
}

/// `scale[i] * (d + 1) / sqrt((i + 1)(i + 2))` for each axis.
fn canonical_factors(config: &LatticeConfig) -> Vec<f64> {
    let d = config.dim() as f64;
    config
        .scale()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let i = i as f64;
            s * (d + 1.0) / ((i + 1.0) * (i + 2.0)).sqrt()
        })
        .collect()
}

fn elevate_into(feature: &[f64], factors: &[f64], out: &mut [f64]) -> Result<()> {
    let d = factors.len();
    if let Some(v) = feature.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite lattice feature {v}"
        )));
    }
    // Backward recurrence: out[i] = (sum of scaled values above i) - i * scaled[i - 1].
    let mut running = 0.0;
    for i in (1..=d).rev() {
        let scaled = feature[i - 1] * factors[i - 1];
        out[i] = running - i as f64 * scaled;
        running += scaled;
    }
    out[0] = running;
    if out.iter().any(|c| c.abs() > MAX_ELEVATED) {
        return Err(Error::InvalidInput(
            "lattice features times scale exceed the representable lattice range".into(),
        ));
    }
    Ok(())
}

/// Reusable buffers for simplex location.
struct Locator {
    d: usize,
    greedy: Vec<i32>,
    rank: Vec<usize>,
    bary: Vec<f64>,
}

impl Locator {
    fn new(d: usize) -> Self {
        Self {
            d,
            greedy: vec![0; d + 1],
            rank: vec![0; d + 1],
            bary: vec![0.0; d + 2],
        }
    }

    /// Fills `greedy` (the remainder-0 vertex), `rank` and `bary[..=d]`.
    fn locate(&mut self, elevated: &[f64]) {
        let d = self.d;
        let dp1 = (d + 1) as i32;
        let inv = 1.0 / (d + 1) as f64;

        // Nearest remainder-0 point by coordinate-wise rounding.
        let mut sum = 0i32;
        for i in 0..=d {
            let v = elevated[i] * inv;
            let up = v.ceil() * (d + 1) as f64;
            let down = v.floor() * (d + 1) as f64;
            let g = if up - elevated[i] < elevated[i] - down {
                up
            } else {
                down
            };
            self.greedy[i] = g as i32;
            sum += self.greedy[i];
        }
        sum /= dp1;

        // Rank coordinates by their rounding residual, largest first; ties
        // go to the lower index.
        self.rank.iter_mut().for_each(|r| *r = 0);
        for i in 0..d {
            for j in i + 1..=d {
                let di = elevated[i] - self.greedy[i] as f64;
                let dj = elevated[j] - self.greedy[j] as f64;
                if di < dj {
                    self.rank[i] += 1;
                } else {
                    self.rank[j] += 1;
                }
            }
        }

        // Repair the sum-zero violation by moving the coordinates with the
        // largest residuals.
        if sum > 0 {
            let s = sum as usize;
            for i in 0..=d {
                if self.rank[i] >= d + 1 - s {
                    self.greedy[i] -= dp1;
                    self.rank[i] = self.rank[i] + s - (d + 1);
                } else {
                    self.rank[i] += s;
                }
            }
        } else if sum < 0 {
            let s = (-sum) as usize;
            for i in 0..=d {
                if self.rank[i] < s {
                    self.greedy[i] += dp1;
                    self.rank[i] = self.rank[i] + (d + 1) - s;
                } else {
                    self.rank[i] -= s;
                }
            }
        }

        self.bary.iter_mut().for_each(|b| *b = 0.0);
        for i in 0..=d {
            let delta = (elevated[i] - self.greedy[i] as f64) * inv;
            self.bary[d - self.rank[i]] += delta;
            self.bary[d + 1 - self.rank[i]] -= delta;
        }
        self.bary[0] += 1.0 + self.bary[d + 1];
    }

    /// Writes the remainder-`remainder` vertex of the located simplex.
    fn vertex(&self, remainder: usize, out: &mut [i32]) {
        let d = self.d;
        for i in 0..=d {
            out[i] = if self.rank[i] <= d - remainder {
                self.greedy[i] + remainder as i32
            } else {
                self.greedy[i] + remainder as i32 - (d + 1) as i32
            };
        }
    }
}

/// Finds the lattice simplex enclosing `p` and the barycentric weights of
/// `p` inside it.
pub fn locate(p: &ElevatedPoint) -> SimplexEmbedding {
    let d = p.coords.len() - 1;
    let mut loc = Locator::new(d);
    loc.locate(&p.coords);
    let vertex_keys = (0..=d)
        .map(|r| {
            let mut coords = vec![0; d + 1];
            loc.vertex(r, &mut coords);
            LatticeKey {
                coords,
                remainder: r,
            }
        })
        .collect();
    SimplexEmbedding {
        vertex_keys,
        bary: loc.bary[..=d].to_vec(),
    }
}

/// Integer displacement vectors of a lattice neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborOffsets {
    dim: usize,
    offsets: Vec<Vec<i32>>,
    opposite: Vec<usize>,
}

impl NeighborOffsets {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of taps, including the center.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn get(&self, k: usize) -> &[i32] {
        &self.offsets[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i32]> {
        self.offsets.iter().map(|o| o.as_slice())
    }

    /// Index of the offset `-get(k)`; the one-ring is symmetric.
    pub fn opposite(&self, k: usize) -> usize {
        self.opposite[k]
    }
}

/// Enumerates the one-ring neighborhood of a `d`-dimensional lattice.
///
/// For every remainder `r` in `0..=d` and every subset `S` of the `d + 1`
/// coordinates with `|S| = r` there is one offset, equal to `r - (d + 1)` on
/// `S` and `r` elsewhere. Offsets are ordered by `(r, subset bitmask)`, so the
/// zero offset comes first. The total is `2^(d+1) - 1`.
pub fn neighbor_offsets(d: usize, s: usize) -> Result<NeighborOffsets> {
    if d == 0 {
        return Err(Error::InvalidInput(
            "lattice dimensionality must be at least 1".into(),
        ));
    }
    if s != 1 {
        return Err(Error::Unsupported(format!(
            "only one-ring neighborhoods are supported, got s = {s}"
        )));
    }
    if d >= 30 {
        return Err(Error::Unsupported(format!(
            "a {d}-dimensional one-ring neighborhood is too large to enumerate"
        )));
    }
    let n = d + 1;
    let mut offsets = Vec::with_capacity((1 << n) - 1);
    for r in 0..n {
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != r {
                continue;
            }
            let offset: Vec<i32> = (0..n)
                .map(|i| {
                    if mask & (1 << i) != 0 {
                        r as i32 - n as i32
                    } else {
                        r as i32
                    }
                })
                .collect();
            offsets.push(offset);
        }
    }
    let opposite = offsets
        .iter()
        .map(|o| {
            let neg: Vec<i32> = o.iter().map(|c| -c).collect();
            offsets
                .iter()
                .position(|p| *p == neg)
                .expect("one-ring offsets are closed under negation")
        })
        .collect();
    Ok(NeighborOffsets {
        dim: d,
        offsets,
        opposite,
    })
}

/// Open-addressing hash table from lattice keys to dense indices.
///
/// Only the first `key_len` coordinates are hashed and stored; for lattice
/// vertices the last coordinate follows from the sum-zero constraint.
#[derive(Debug, Clone)]
pub struct KeyTable {
    key_len: usize,
    slots: Vec<u32>,
    shift: u32,
    keys: Vec<i32>,
}

const EMPTY: u32 = u32::MAX;
const HASH_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

impl KeyTable {
    /// Capacity is `2 * expected` rounded up to a power of two.
    pub fn with_capacity(key_len: usize, expected: usize) -> Self {
        let capacity = (2 * expected.max(1)).next_power_of_two().max(2);
        Self {
            key_len,
            slots: vec![EMPTY; capacity],
            shift: 64 - capacity.trailing_zeros(),
            keys: Vec::with_capacity(expected * key_len),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.key_len.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Stored key material of dense index `index`.
    pub fn key(&self, index: usize) -> &[i32] {
        &self.keys[index * self.key_len..(index + 1) * self.key_len]
    }

    #[inline]
    fn hash(&self, key: &[i32]) -> usize {
        let mut h: u64 = 0;
        for &c in key {
            h = (h ^ c as u32 as u64).wrapping_mul(HASH_MULTIPLIER);
            h ^= h >> 32;
        }
        (h.wrapping_mul(HASH_MULTIPLIER) >> self.shift) as usize
    }

    /// Dense index of `key`, if present.
    pub fn get(&self, key: &[i32]) -> Option<usize> {
        let key = &key[..self.key_len];
        let mask = self.slots.len() - 1;
        let mut slot = self.hash(key);
        loop {
            let entry = self.slots[slot];
            if entry == EMPTY {
                return None;
            }
            if self.key(entry as usize) == key {
                return Some(entry as usize);
            }
            slot = (slot + 1) & mask;
        }
    }

    /// Inserts `key` if absent. Returns its dense index and whether it was
    /// newly added. Indices are assigned in insertion order.
    pub fn insert(&mut self, key: &[i32]) -> (usize, bool) {
        let key = &key[..self.key_len];
        if 2 * (self.len() + 1) > self.slots.len() {
            self.grow();
        }
        let mask = self.slots.len() - 1;
        let mut slot = self.hash(key);
        loop {
            let entry = self.slots[slot];
            if entry == EMPTY {
                let index = self.len();
                self.slots[slot] = index as u32;
                self.keys.extend_from_slice(key);
                return (index, true);
            }
            if self.key(entry as usize) == key {
                return (entry as usize, false);
            }
            slot = (slot + 1) & mask;
        }
    }

    fn grow(&mut self) {
        let capacity = self.slots.len() * 2;
        self.slots = vec![EMPTY; capacity];
        self.shift = 64 - capacity.trailing_zeros();
        let mask = capacity - 1;
        for index in 0..self.len() {
            let mut slot = self.hash(self.key(index));
            while self.slots[slot] != EMPTY {
                slot = (slot + 1) & mask;
            }
            self.slots[slot] = index as u32;
        }
    }
}

/// Fixed-width packing of stored keys into a `u64`, first coordinate most
/// significant, so integer order is lexicographic key order and adding a
/// packed offset translates a key (as long as it stays in range).
#[derive(Debug, Clone)]
struct KeyPacking {
    mins: Vec<i64>,
    shifts: Vec<u32>,
    widths: Vec<u32>,
}

impl KeyPacking {
    /// Packing covering `[lo[i] - margin, hi[i] + margin]` per coordinate, or
    /// `None` if that needs more than 64 bits.
    fn new(lo: &[i64], hi: &[i64], margin: i64) -> Option<Self> {
        let widths: Vec<u32> = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| 64 - ((h - l + 2 * margin) as u64).leading_zeros())
            .collect();
        if widths.iter().sum::<u32>() > 64 {
            return None;
        }
        let mut shifts = vec![0; widths.len()];
        let mut acc = 0;
        for i in (0..widths.len()).rev() {
            shifts[i] = acc;
            acc += widths[i];
        }
        Some(Self {
            mins: lo.iter().map(|l| l - margin).collect(),
            shifts,
            widths,
        })
    }

    fn pack(&self, key: &[i32]) -> Option<u64> {
        let mut code = 0u64;
        for (i, &c) in key.iter().enumerate() {
            let field = c as i64 - self.mins[i];
            if field < 0 || (field as u64) >> self.widths[i] != 0 {
                return None;
            }
            code |= (field as u64) << self.shifts[i];
        }
        Some(code)
    }

    fn unpack(&self, code: u64, out: &mut [i32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let field = (code >> self.shifts[i]) & (u64::MAX >> (64 - self.widths[i].max(1)));
            *o = (field as i64 + self.mins[i]) as i32;
        }
    }

    /// Code difference produced by adding `offset` to a key.
    fn delta(&self, offset: &[i32]) -> u64 {
        offset
            .iter()
            .zip(&self.shifts)
            .fold(0u64, |acc, (&o, &s)| acc.wrapping_add(((o as i64) << s) as u64))
    }
}

/// Lookup structure for occupied vertices. Packed codes are kept sorted, so
/// a vertex's index is its rank; keys too wide to pack fall back to a hash
/// table with insertion-order indices.
#[derive(Debug, Clone)]
enum VertexIndex {
    Sorted { packing: KeyPacking, codes: Vec<u64> },
    Hashed(KeyTable),
}

impl VertexIndex {
    fn len(&self) -> usize {
        match self {
            Self::Sorted { codes, .. } => codes.len(),
            Self::Hashed(table) => table.len(),
        }
    }

    fn get(&self, key: &[i32]) -> Option<usize> {
        match self {
            Self::Sorted { packing, codes } => {
                let d = packing.widths.len();
                codes.binary_search(&packing.pack(&key[..d])?).ok()
            }
            Self::Hashed(table) => table.get(key),
        }
    }

    fn key(&self, v: usize, out: &mut [i32]) {
        match self {
            Self::Sorted { packing, codes } => packing.unpack(codes[v], out),
            Self::Hashed(table) => out.copy_from_slice(table.key(v)),
        }
    }
}

/// Per-point simplex membership resolved to dense vertex indices.
///
/// Point `i` touches `vertices[i * (d + 1) + k]` with weight
/// `weights[i * (d + 1) + k]`, where `k` is the vertex remainder. Vertices
/// absent from the lattice are [`MISSING`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    stride: usize,
    vertices: Vec<u32>,
    weights: Vec<f64>,
}

impl Embedding {
    /// Number of embedded points.
    pub fn len(&self) -> usize {
        self.vertices.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Vertices per point (`d + 1`).
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn point(&self, i: usize) -> (&[u32], &[f64]) {
        let range = i * self.stride..(i + 1) * self.stride;
        (&self.vertices[range.clone()], &self.weights[range])
    }

    /// Whether any of the point's vertices is occupied.
    pub fn is_supported(&self, i: usize) -> bool {
        self.point(i).0.iter().any(|&v| v != MISSING)
    }
}

/// Summary numbers for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeStats {
    pub points: usize,
    pub dim: usize,
    pub vertices: usize,
    /// `V / (n (d + 1))`.
    pub occupancy: f64,
    /// Fraction of adjacency entries that resolve to an occupied vertex.
    pub adjacency_fill: f64,
}

/// The occupied part of a permutohedral lattice for one point set.
#[derive(Debug, Clone)]
pub struct SparseLattice {
    config: LatticeConfig,
    factors: Vec<f64>,
    index: VertexIndex,
    embedding: Embedding,
    offsets: NeighborOffsets,
    adjacency: Vec<u32>,
}

/// Builds the sparse lattice for the rows of `features` (`n × d`).
pub fn build_lattice(features: &FeatureMatrix, config: &LatticeConfig) -> Result<SparseLattice> {
    SparseLattice::build(features, config)
}

impl SparseLattice {
    pub fn build(features: &FeatureMatrix, config: &LatticeConfig) -> Result<Self> {
        let d = config.dim();
        let n = features.rows();
        if n == 0 {
            return Err(Error::EmptyInput("lattice needs at least one point".into()));
        }
        if features.cols() != d {
            return Err(Error::shape(format!(
                "lattice features have {} columns, lattice is {d}-dimensional",
                features.cols()
            )));
        }
        let offsets = neighbor_offsets(d, 1)?;
        let factors = canonical_factors(config);

        let stride = d + 1;
        let mut elevated = vec![0.0; stride];
        let mut key = vec![0; stride];
        let mut loc = Locator::new(d);

        // Bounding box of the elevated points; vertex keys lie within d + 1
        // of it and one-ring neighbors within another d + 1.
        let mut lo = vec![i64::MAX; d];
        let mut hi = vec![i64::MIN; d];
        for i in 0..n {
            elevate_into(features.row(i), &factors, &mut elevated)?;
            for c in 0..d {
                lo[c] = lo[c].min(elevated[c].floor() as i64);
                hi[c] = hi[c].max(elevated[c].ceil() as i64);
            }
        }
        let mut vertices = vec![MISSING; n * stride];
        let mut weights = vec![0.0; n * stride];
        let index = match KeyPacking::new(&lo, &hi, 2 * stride as i64) {
            Some(packing) => {
                let mut entries: Vec<(u64, u32)> = Vec::with_capacity(n * stride);
                for i in 0..n {
                    elevate_into(features.row(i), &factors, &mut elevated)?;
                    loc.locate(&elevated);
                    for r in 0..stride {
                        loc.vertex(r, &mut key);
                        let code = packing.pack(&key[..d]).expect("vertex keys lie inside the packing range");
                        entries.push((code, (i * stride + r) as u32));
                        weights[i * stride + r] = loc.bary[r];
                    }
                }
                entries.par_sort_unstable();
                let mut codes: Vec<u64> = Vec::new();
                for &(code, entry) in &entries {
                    if codes.last() != Some(&code) {
                        codes.push(code);
                    }
                    vertices[entry as usize] = (codes.len() - 1) as u32;
                }
                VertexIndex::Sorted { packing, codes }
            }
            None => {
                let mut table = KeyTable::with_capacity(d, n * stride);
                for i in 0..n {
                    elevate_into(features.row(i), &factors, &mut elevated)?;
                    loc.locate(&elevated);
                    for r in 0..stride {
                        loc.vertex(r, &mut key);
                        vertices[i * stride + r] = table.insert(&key).0 as u32;
                        weights[i * stride + r] = loc.bary[r];
                    }
                }
                VertexIndex::Hashed(table)
            }
        };

        let adjacency = Self::resolve_adjacency(&index, &offsets);
        Ok(Self {
            config: config.clone(),
            factors,
            index,
            embedding: Embedding {
                stride,
                vertices,
                weights,
            },
            offsets,
            adjacency,
        })
    }

    fn resolve_adjacency(index: &VertexIndex, offsets: &NeighborOffsets) -> Vec<u32> {
        const BLOCK: usize = 4096;
        let d = offsets.dim();
        let taps = offsets.len();
        let mut adjacency = vec![MISSING; index.len() * taps];
        adjacency
            .par_chunks_mut(taps * BLOCK)
            .enumerate()
            .for_each(|(b, rows)| {
                let first = b * BLOCK;
                let count = rows.len() / taps;
                for j in 0..count {
                    rows[j * taps] = (first + j) as u32;
                }
                match index {
                    // Translating every key by the same offset preserves
                    // their order, so each tap is one merge pass.
                    VertexIndex::Sorted { packing, codes } => {
                        for k in 1..taps {
                            let delta = packing.delta(offsets.get(k));
                            let target = |v: usize| codes[v].wrapping_add(delta);
                            let mut u = codes.partition_point(|&c| c < target(first));
                            for j in 0..count {
                                let t = target(first + j);
                                while u < codes.len() && codes[u] < t {
                                    u += 1;
                                }
                                if u < codes.len() && codes[u] == t {
                                    rows[j * taps + k] = u as u32;
                                }
                            }
                        }
                    }
                    VertexIndex::Hashed(table) => {
                        let mut neighbor = vec![0i32; d];
                        for j in 0..count {
                            let key = table.key(first + j);
                            for k in 1..taps {
                                for (i, (c, o)) in key.iter().zip(offsets.get(k)).enumerate() {
                                    neighbor[i] = c + o;
                                }
                                if let Some(u) = table.get(&neighbor) {
                                    rows[j * taps + k] = u as u32;
                                }
                            }
                        }
                    }
                }
            });
        adjacency
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Number of input points.
    pub fn num_points(&self) -> usize {
        self.embedding.len()
    }

    /// Number of occupied vertices `V`.
    pub fn num_vertices(&self) -> usize {
        self.index.len()
    }

    /// Adjacency width `K`.
    pub fn num_taps(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &NeighborOffsets {
        &self.offsets
    }

    /// Embedding of the points the lattice was built from.
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Row `v` of the adjacency table; column `k` follows `offsets().get(k)`.
    #[inline]
    pub fn neighbors(&self, v: usize) -> &[u32] {
        let taps = self.num_taps();
        &self.adjacency[v * taps..(v + 1) * taps]
    }

    pub fn adjacency(&self) -> &[u32] {
        &self.adjacency
    }

    /// Full `d + 1` coordinates of vertex `v`.
    pub fn vertex_key(&self, v: usize) -> LatticeKey {
        let mut coords = vec![0; self.dim() + 1];
        self.index.key(v, &mut coords[..self.dim()]);
        coords[self.dim()] = -coords.iter().sum::<i32>();
        let remainder = coords[0].rem_euclid(self.dim() as i32 + 1) as usize;
        LatticeKey { coords, remainder }
    }

    /// Dense index of a vertex, if occupied.
    pub fn lookup(&self, key: &[i32]) -> Option<usize> {
        self.index.get(key)
    }

    /// Embeds another point set against this lattice's vertex set. Points
    /// whose simplex vertices are unoccupied get [`MISSING`] entries.
    pub fn embed(&self, features: &FeatureMatrix) -> Result<Embedding> {
        let d = self.dim();
        if features.cols() != d {
            return Err(Error::shape(format!(
                "output lattice features have {} columns, lattice is {d}-dimensional",
                features.cols()
            )));
        }
        let n = features.rows();
        let mut vertices = Vec::with_capacity(n * (d + 1));
        let mut weights = Vec::with_capacity(n * (d + 1));
        let mut elevated = vec![0.0; d + 1];
        let mut key = vec![0; d + 1];
        let mut loc = Locator::new(d);
        for i in 0..n {
            elevate_into(features.row(i), &self.factors, &mut elevated)?;
            loc.locate(&elevated);
            for r in 0..=d {
                loc.vertex(r, &mut key);
                let index = self.index.get(&key).map_or(MISSING, |v| v as u32);
                vertices.push(index);
                weights.push(loc.bary[r]);
            }
        }
        Ok(Embedding {
            stride: d + 1,
            vertices,
            weights,
        })
    }

    pub fn stats(&self) -> LatticeStats {
        let n = self.num_points();
        let d = self.dim();
        let filled = self.adjacency.iter().filter(|&&u| u != MISSING).count();
        LatticeStats {
            points: n,
            dim: d,
            vertices: self.num_vertices(),
            occupancy: self.num_vertices() as f64 / (n * (d + 1)) as f64,
            adjacency_fill: filled as f64 / self.adjacency.len().max(1) as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut impl Rng, n: usize, d: usize, range: f64) -> FeatureMatrix {
        let data = (0..n * d).map(|_| rng.random_range(-range..range)).collect();
        FeatureMatrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn config_rejects_bad_scales() {
        assert!(LatticeConfig::new(vec![]).is_err());
        assert!(LatticeConfig::new(vec![1.0, 0.0]).is_err());
        assert!(LatticeConfig::new(vec![-1.0]).is_err());
        assert!(LatticeConfig::new(vec![f64::NAN]).is_err());
        assert!(LatticeConfig::isotropic(3, 64.0).is_ok());
    }

    #[test]
    fn elevate_origin_is_origin() {
        let cfg = LatticeConfig::isotropic(1, 7.5).unwrap();
        assert_eq!(elevate(&[0.0], &cfg).unwrap().coords, vec![0.0, 0.0]);
    }

    #[test]
    fn elevate_one_dimensional_is_antisymmetric() {
        for (t, lambda) in [(0.3, 2.0), (-1.5, 0.5), (4.0, 16.0)] {
            let cfg = LatticeConfig::isotropic(1, lambda).unwrap();
            let c = elevate(&[t], &cfg).unwrap().coords;
            assert_eq!(c[0], -c[1]);
            assert_eq!(c[0].signum(), (t * lambda).signum());
            // proportional to |t * lambda|
            let c2 = elevate(&[2.0 * t], &cfg).unwrap().coords;
            assert!((c2[0] - 2.0 * c[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn elevate_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LatticeConfig::new(vec![1.0, 2.5, 0.3]).unwrap();
        for _ in 0..1000 {
            let f: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let e = elevate(&f, &cfg).unwrap();
            assert!(e.coords.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn elevate_rejects_non_finite_and_wrong_length() {
        let cfg = LatticeConfig::isotropic(2, 1.0).unwrap();
        assert!(matches!(
            elevate(&[1.0, f64::INFINITY], &cfg),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(elevate(&[1.0], &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn locate_at_remainder_zero_vertex() {
        // (4, -4, 0, 0) is a remainder-0 vertex for d = 3.
        let p = ElevatedPoint {
            coords: vec![4.0, -4.0, 0.0, 0.0],
        };
        let s = locate(&p);
        assert_eq!(s.vertex_keys[0].coords, vec![4, -4, 0, 0]);
        assert!((s.bary[0] - 1.0).abs() < 1e-12);
        for b in &s.bary[1..] {
            assert!(b.abs() < 1e-12);
        }
    }

    #[test]
    fn locate_at_simplex_centroid() {
        for d in 1..=5 {
            // Simplex around the origin for the identity ranking.
            let n = d + 1;
            let mut centroid = vec![0.0; n];
            for r in 0..n {
                for (i, c) in centroid.iter_mut().enumerate() {
                    let v = if i <= d - r { r as f64 } else { r as f64 - n as f64 };
                    *c += v / n as f64;
                }
            }
            let s = locate(&ElevatedPoint { coords: centroid });
            for b in &s.bary {
                assert!((b - 1.0 / n as f64).abs() < 1e-9, "d={d} bary={:?}", s.bary);
            }
        }
    }

    fn assert_valid_embedding(e: &ElevatedPoint, s: &SimplexEmbedding) {
        let d = e.coords.len() - 1;
        assert!(s.bary.iter().all(|&b| b >= -1e-12));
        assert!((s.bary.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (k, key) in s.vertex_keys.iter().enumerate() {
            assert_eq!(key.remainder, k);
            assert_eq!(key.coords.iter().sum::<i32>(), 0);
            for &c in &key.coords {
                assert_eq!(c.rem_euclid(d as i32 + 1), k as i32);
            }
        }
        for i in 0..=d {
            let rec: f64 = s
                .vertex_keys
                .iter()
                .zip(&s.bary)
                .map(|(k, b)| b * k.coords[i] as f64)
                .sum();
            assert!((rec - e.coords[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn locate_reconstructs_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = LatticeConfig::isotropic(2, 1.0).unwrap();
        for _ in 0..1000 {
            let f: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = elevate(&f, &cfg).unwrap();
            assert_valid_embedding(&e, &locate(&e));
        }
    }

    #[test]
    fn locate_handles_ties_deterministically() {
        // Exactly halfway between remainder-0 points in every coordinate.
        let p = ElevatedPoint {
            coords: vec![1.5, -1.5, 1.5, -1.5],
        };
        let a = locate(&p);
        let b = locate(&p);
        assert_eq!(a, b);
        assert_valid_embedding(&p, &a);
    }

    #[test]
    fn neighbor_offsets_small_cases() {
        let o = neighbor_offsets(1, 1).unwrap();
        let mut all: Vec<&[i32]> = o.iter().collect();
        // (r, bitmask) order: zero, then r = 1 with S = {0}, then S = {1}.
        assert_eq!(all, vec![&[0, 0][..], &[-1, 1][..], &[1, -1][..]]);
        all.sort();
        assert_eq!(all, vec![&[-1, 1][..], &[0, 0][..], &[1, -1][..]]);
        assert_eq!(neighbor_offsets(2, 1).unwrap().len(), 7);
        assert_eq!(neighbor_offsets(3, 1).unwrap().len(), 15);
        assert!(matches!(neighbor_offsets(2, 2), Err(Error::Unsupported(_))));
        assert!(neighbor_offsets(0, 1).is_err());
    }

    #[test]
    fn opposite_offsets_negate() {
        for d in 1..=5 {
            let o = neighbor_offsets(d, 1).unwrap();
            assert_eq!(o.opposite(0), 0);
            for k in 0..o.len() {
                let sum: Vec<i32> = o.get(k).iter().zip(o.get(o.opposite(k))).map(|(a, b)| a + b).collect();
                assert!(sum.iter().all(|&c| c == 0));
            }
        }
    }

    #[test]
    fn key_table_matches_association_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut table = KeyTable::with_capacity(3, 4);
        let mut list: Vec<Vec<i32>> = Vec::new();
        for _ in 0..500 {
            let key: Vec<i32> = (0..3).map(|_| rng.random_range(-6..6)).collect();
            let (idx, fresh) = table.insert(&key);
            match list.iter().position(|k| *k == key) {
                Some(p) => assert!(!fresh && p == idx),
                None => {
                    assert!(fresh && idx == list.len());
                    list.push(key);
                }
            }
        }
        for (i, k) in list.iter().enumerate() {
            assert_eq!(table.get(k), Some(i));
        }
        for _ in 0..100_000 {
            let key: Vec<i32> = (0..3).map(|_| rng.random_range(-50..50)).collect();
            let expected = list.iter().position(|k| *k == key);
            assert_eq!(table.get(&key), expected);
        }
    }

    #[test]
    fn single_point_lattice() {
        let f = FeatureMatrix::from_rows(&[[0.1, -0.2, 0.3]]).unwrap();
        let lat = build_lattice(&f, &LatticeConfig::isotropic(3, 1.0).unwrap()).unwrap();
        assert_eq!(lat.num_vertices(), 4);
        assert_eq!(lat.num_taps(), 15);
        assert_eq!(lat.adjacency().len(), 4 * 15);
        let column0: Vec<u32> = (0..4).map(|v| lat.neighbors(v)[0]).collect();
        assert_eq!(column0, vec![0, 1, 2, 3]);
    }

    #[test]
    fn identical_points_share_one_simplex() {
        let f = FeatureMatrix::from_rows(&vec![[0.7, 0.1]; 10]).unwrap();
        let lat = build_lattice(&f, &LatticeConfig::isotropic(2, 3.0).unwrap()).unwrap();
        assert!(lat.num_vertices() <= 3);
        let first = lat.embedding().point(0);
        for i in 1..10 {
            assert_eq!(lat.embedding().point(i), first);
        }
    }

    #[test]
    fn build_rejects_empty_and_non_finite() {
        let cfg = LatticeConfig::isotropic(2, 1.0).unwrap();
        assert!(matches!(
            build_lattice(&FeatureMatrix::zeros(0, 2), &cfg),
            Err(Error::EmptyInput(_))
        ));
        let bad = FeatureMatrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert!(matches!(build_lattice(&bad, &cfg), Err(Error::InvalidInput(_))));
    }

    fn check_adjacency(lat: &SparseLattice) {
        let keys: Vec<LatticeKey> = (0..lat.num_vertices()).map(|v| lat.vertex_key(v)).collect();
        for v in 0..lat.num_vertices() {
            assert_eq!(lat.lookup(&keys[v].coords), Some(v));
            for (k, &u) in lat.neighbors(v).iter().enumerate() {
                let target: Vec<i32> = keys[v]
                    .coords
                    .iter()
                    .zip(lat.offsets().get(k))
                    .map(|(a, b)| a + b)
                    .collect();
                let expected = keys.iter().position(|key| key.coords == target);
                assert_eq!(expected.map(|e| e as u32).unwrap_or(MISSING), u);
            }
        }
    }

    #[test]
    fn adjacency_matches_key_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&mut rng, 40, 2, 1.0);
        let lat = build_lattice(&f, &LatticeConfig::isotropic(2, 2.0).unwrap()).unwrap();
        assert!(matches!(lat.index, VertexIndex::Sorted { .. }));
        check_adjacency(&lat);
    }

    #[test]
    fn wide_key_ranges_fall_back_to_hashing() {
        // Two tight clusters far apart need more than 64 bits of packed key.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let center = if i % 2 == 0 { -1.0e6 } else { 1.0e6 };
                (0..3).map(|_| center + rng.random_range(-0.3..0.3)).collect()
            })
            .collect();
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let lat = build_lattice(&f, &LatticeConfig::isotropic(3, 10.0).unwrap()).unwrap();
        assert!(matches!(lat.index, VertexIndex::Hashed(_)));
        check_adjacency(&lat);
        assert_eq!(&lat.embed(&f).unwrap(), lat.embedding());
    }

    #[test]
    fn embed_of_own_points_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&mut rng, 30, 3, 2.0);
        let lat = build_lattice(&f, &LatticeConfig::isotropic(3, 1.5).unwrap()).unwrap();
        assert_eq!(&lat.embed(&f).unwrap(), lat.embedding());
    }

    #[test]
    fn build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_features(&mut rng, 200, 3, 1.0);
        let cfg = LatticeConfig::isotropic(3, 4.0).unwrap();
        let a = build_lattice(&f, &cfg).unwrap();
        let b = build_lattice(&f, &cfg).unwrap();
        assert_eq!(a.embedding(), b.embedding());
        assert_eq!(a.adjacency(), b.adjacency());
        for v in 0..a.num_vertices() {
            assert_eq!(a.vertex_key(v), b.vertex_key(v));
        }
    }

    #[test]
    fn zero_variance_axis_is_allowed() {
        let f = FeatureMatrix::from_rows(&[[0.0, 1.0], [0.5, 1.0], [1.0, 1.0]]).unwrap();
        let lat = build_lattice(&f, &LatticeConfig::isotropic(2, 4.0).unwrap()).unwrap();
        assert!(lat.num_vertices() >= 3);
    }
}
