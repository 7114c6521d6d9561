//! Bilateral convolution: splat onto the lattice, convolve over the
//! occupied vertices, slice back onto points.
//!
//! Each stage is a sparse linear map, so a layer computes
//! `slice · conv · splat · F` channel by channel. Every stage also has its
//! adjoint here, which is all the backward pass needs.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{Embedding, LatticeConfig, SparseLattice, MISSING};
use crate::matrix::FeatureMatrix;

/// Floor applied to normalization denominators.
pub const DENSITY_EPSILON: f64 = 1e-12;

/// Learnable lattice filter: one `c_in × c_out` matrix per neighborhood tap
/// plus a bias. Weights are laid out taps first, then input channel, then
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    taps: usize,
    c_in: usize,
    c_out: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(taps: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            taps,
            c_in,
            c_out,
            weights: vec![0.0; taps * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    pub fn from_parts(
        taps: usize,
        c_in: usize,
        c_out: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != taps * c_in * c_out || bias.len() != c_out {
            return Err(Error::shape(format!(
                "filter bank {taps}x{c_in}x{c_out} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            taps,
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    /// Center tap is the identity, everything else zero.
    pub fn identity(taps: usize, channels: usize) -> Self {
        let mut f = Self::zeros(taps, channels, channels);
        for c in 0..channels {
            f.set(0, c, c, 1.0);
        }
        f
    }

    /// A kernel that applies `profile[k]` at tap `k` to every channel
    /// independently.
    pub fn per_tap(profile: &[f64], channels: usize) -> Self {
        let mut f = Self::zeros(profile.len(), channels, channels);
        for (k, &p) in profile.iter().enumerate() {
            for c in 0..channels {
                f.set(k, c, c, p);
            }
        }
        f
    }

    /// Fixed single-channel smoothing kernel used for density
    /// normalization: weight 1 at the center, 0.5 at every other tap,
    /// scaled to sum to one.
    pub fn density_blur(taps: usize) -> Self {
        let total = 1.0 + 0.5 * (taps as f64 - 1.0);
        let profile: Vec<f64> = (0..taps)
            .map(|k| if k == 0 { 1.0 / total } else { 0.5 / total })
            .collect();
        Self::per_tap(&profile, 1)
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    #[inline]
    fn index(&self, k: usize, ci: usize, co: usize) -> usize {
        (k * self.c_in + ci) * self.c_out + co
    }

    pub fn get(&self, k: usize, ci: usize, co: usize) -> f64 {
        self.weights[self.index(k, ci, co)]
    }

    pub fn set(&mut self, k: usize, ci: usize, co: usize, value: f64) {
        let i = self.index(k, ci, co);
        self.weights[i] = value;
    }

    /// The `c_out` weights of tap `k`, input channel `ci`.
    #[inline]
    fn row(&self, k: usize, ci: usize) -> &[f64] {
        let start = self.index(k, ci, 0);
        &self.weights[start..start + self.c_out]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Vec<f64> {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Vec<f64> {
        &mut self.bias
    }

    pub fn weights_and_bias_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.weights, &mut self.bias)
    }
}

/// Scatters point features onto lattice vertices with barycentric weights.
pub fn splat(features: &FeatureMatrix, lattice: &SparseLattice) -> Result<FeatureMatrix> {
    features.check_rows(lattice.num_points(), "splat input")?;
    Ok(splat_embedding(
        features,
        lattice.embedding(),
        lattice.num_vertices(),
    ))
}

/// Scatter-add in ascending point order. Also the adjoint of [`slice`].
fn splat_embedding(features: &FeatureMatrix, embedding: &Embedding, vertices: usize) -> FeatureMatrix {
    let c = features.cols();
    let mut out = FeatureMatrix::zeros(vertices, c);
    for i in 0..embedding.len() {
        let (verts, weights) = embedding.point(i);
        let src = features.row(i);
        for (&v, &w) in verts.iter().zip(weights) {
            if v == MISSING {
                continue;
            }
            let dst = out.row_mut(v as usize);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// Applies the filter over each vertex's one-ring, including the bias.
/// Unoccupied neighbors contribute nothing.
pub fn convolve(
    vertex_features: &FeatureMatrix,
    lattice: &SparseLattice,
    filter: &FilterBank,
) -> Result<FeatureMatrix> {
    check_filter(vertex_features, lattice, filter)?;
    let mut out = convolve_linear(vertex_features, lattice, filter);
    let bias = filter.bias();
    out.as_mut_slice()
        .par_chunks_mut(filter.c_out().max(1))
        .for_each(|row| {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        });
    Ok(out)
}

fn check_filter(
    vertex_features: &FeatureMatrix,
    lattice: &SparseLattice,
    filter: &FilterBank,
) -> Result<()> {
    vertex_features.check_rows(lattice.num_vertices(), "convolution input")?;
    if filter.taps() != lattice.num_taps() {
        return Err(Error::shape(format!(
            "filter has {} taps, lattice neighborhood has {}",
            filter.taps(),
            lattice.num_taps()
        )));
    }
    if filter.c_in() != vertex_features.cols() {
        return Err(Error::shape(format!(
            "filter expects {} input channels, got {}",
            filter.c_in(),
            vertex_features.cols()
        )));
    }
    Ok(())
}

/// Convolution without the bias term.
fn convolve_linear(
    vertex_features: &FeatureMatrix,
    lattice: &SparseLattice,
    filter: &FilterBank,
) -> FeatureMatrix {
    let c_out = filter.c_out();
    let mut out = FeatureMatrix::zeros(lattice.num_vertices(), c_out);
    if c_out == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(c_out)
        .enumerate()
        .for_each(|(v, row)| {
            for (k, &u) in lattice.neighbors(v).iter().enumerate() {
                if u == MISSING {
                    continue;
                }
                let input = vertex_features.row(u as usize);
                for (ci, &x) in input.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    for (o, w) in row.iter_mut().zip(filter.row(k, ci)) {
                        *o += x * w;
                    }
                }
            }
        });
    out
}

/// Adjoint of [`convolve_linear`]: `out[u] = Σ_k W[k] · upstream[u - offset_k]`.
fn convolve_transpose(
    upstream: &FeatureMatrix,
    lattice: &SparseLattice,
    filter: &FilterBank,
) -> FeatureMatrix {
    let c_in = filter.c_in();
    let offsets = lattice.offsets();
    let mut out = FeatureMatrix::zeros(lattice.num_vertices(), c_in);
    if c_in == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(c_in)
        .enumerate()
        .for_each(|(u, row)| {
            let neighbors = lattice.neighbors(u);
            for k in 0..filter.taps() {
                // v with neighbors(v)[k] == u is u shifted by the opposite offset.
                let v = neighbors[offsets.opposite(k)];
                if v == MISSING {
                    continue;
                }
                let g = upstream.row(v as usize);
                for (ci, o) in row.iter_mut().enumerate() {
                    *o += filter.row(k, ci).iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
                }
            }
        });
    out
}

/// `grad[k, ci, co] = Σ_v input[adj[v, k], ci] · upstream[v, co]`, reduced in
/// ascending vertex order.
fn filter_gradient(
    vertex_features: &FeatureMatrix,
    upstream: &FeatureMatrix,
    lattice: &SparseLattice,
    c_out: usize,
) -> Vec<f64> {
    let c_in = vertex_features.cols();
    let taps = lattice.num_taps();
    let mut grad = vec![0.0; taps * c_in * c_out];
    if c_in * c_out == 0 {
        return grad;
    }
    grad.par_chunks_mut(c_in * c_out)
        .enumerate()
        .for_each(|(k, block)| {
            for v in 0..lattice.num_vertices() {
                let u = lattice.neighbors(v)[k];
                if u == MISSING {
                    continue;
                }
                let x = vertex_features.row(u as usize);
                let g = upstream.row(v);
                for (ci, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (b, gv) in block[ci * c_out..(ci + 1) * c_out].iter_mut().zip(g) {
                        *b += xi * gv;
                    }
                }
            }
        });
    grad
}

/// Interpolates vertex values onto the points of `embedding`.
pub fn slice(vertex_features: &FeatureMatrix, embedding: &Embedding) -> Result<FeatureMatrix> {
    let vertices = vertex_features.rows();
    for i in 0..embedding.len() {
        if let Some(&v) = embedding
            .point(i)
            .0
            .iter()
            .find(|&&v| v != MISSING && v as usize >= vertices)
        {
            return Err(Error::shape(format!(
                "embedding references vertex {v} but only {vertices} are present"
            )));
        }
    }
    Ok(slice_unchecked(vertex_features, embedding))
}

fn slice_unchecked(vertex_features: &FeatureMatrix, embedding: &Embedding) -> FeatureMatrix {
    let c = vertex_features.cols();
    let mut out = FeatureMatrix::zeros(embedding.len(), c);
    if c == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(i, row)| {
            let (verts, weights) = embedding.point(i);
            for (&v, &w) in verts.iter().zip(weights) {
                if v == MISSING {
                    continue;
                }
                for (o, s) in row.iter_mut().zip(vertex_features.row(v as usize)) {
                    *o += w * s;
                }
            }
        });
    out
}

/// Filter response of an all-ones signal, floored at [`DENSITY_EPSILON`].
pub fn density(
    lattice: &SparseLattice,
    embedding: &Embedding,
    blur: &FilterBank,
) -> Result<Vec<f64>> {
    if blur.c_in() != 1 || blur.c_out() != 1 {
        return Err(Error::shape("density kernel must be single-channel"));
    }
    let ones = FeatureMatrix::filled(lattice.num_points(), 1, 1.0);
    let splatted = splat(&ones, lattice)?;
    check_filter(&splatted, lattice, blur)?;
    let blurred = convolve_linear(&splatted, lattice, blur);
    let sliced = slice(&blurred, embedding)?;
    Ok(sliced
        .into_vec()
        .into_iter()
        .map(|v| v.max(DENSITY_EPSILON))
        .collect())
}

/// Divides each row of `raw` by the density of the corresponding output
/// point under the fixed kernel `blur`.
pub fn normalize(
    raw: &FeatureMatrix,
    lattice: &SparseLattice,
    embedding: &Embedding,
    blur: &FilterBank,
) -> Result<FeatureMatrix> {
    raw.check_rows(embedding.len(), "normalization input")?;
    let denominators = density(lattice, embedding, blur)?;
    let mut out = raw.clone();
    divide_rows(&mut out, &denominators);
    Ok(out)
}

fn divide_rows(m: &mut FeatureMatrix, denominators: &[f64]) {
    for (r, &d) in denominators.iter().enumerate() {
        for v in m.row_mut(r) {
            *v /= d;
        }
    }
}

/// Transports features from one point set to another through a shared
/// lattice: normalized splat then slice, no convolution.
///
/// Destination points outside every occupied simplex receive zeros.
pub fn project(
    source_features: &FeatureMatrix,
    source_lattice_features: &FeatureMatrix,
    destination_lattice_features: &FeatureMatrix,
    config: &LatticeConfig,
) -> Result<FeatureMatrix> {
    source_features.check_rows(source_lattice_features.rows(), "projection source")?;
    let lattice = SparseLattice::build(source_lattice_features, config)?;
    let destination = lattice.embed(destination_lattice_features)?;
    let splatted = splat(source_features, &lattice)?;
    let mut out = slice_unchecked(&splatted, &destination);
    let ones = FeatureMatrix::filled(lattice.num_points(), 1, 1.0);
    let support = slice_unchecked(&splat(&ones, &lattice)?, &destination);
    divide_rows(
        &mut out,
        &support
            .as_slice()
            .iter()
            .map(|v| v.max(DENSITY_EPSILON))
            .collect::<Vec<_>>(),
    );
    Ok(out)
}

/// A bilateral convolution bound to its input lattice and output points.
///
/// The output points default to the input points. When normalization is on,
/// the density denominators are computed once at construction.
#[derive(Debug, Clone)]
pub struct BclDescriptor {
    lattice: Arc<SparseLattice>,
    output: Option<Embedding>,
    normalize: bool,
    blur: FilterBank,
    denominators: Option<Vec<f64>>,
}

/// Intermediates retained by a forward pass.
#[derive(Debug, Clone)]
pub struct BclState {
    splatted: FeatureMatrix,
    output_rows: usize,
}

/// Gradients of one bilateral convolution.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub input: FeatureMatrix,
    /// Shaped like the filter; bias gradients included.
    pub filter: FilterBank,
}

impl BclDescriptor {
    pub fn new(lattice: Arc<SparseLattice>, output: Option<Embedding>, normalize: bool) -> Result<Self> {
        let blur = FilterBank::density_blur(lattice.num_taps());
        Self::with_blur(lattice, output, normalize, blur)
    }

    /// Like [`BclDescriptor::new`] with a caller-supplied fixed density kernel.
    pub fn with_blur(
        lattice: Arc<SparseLattice>,
        output: Option<Embedding>,
        normalize: bool,
        blur: FilterBank,
    ) -> Result<Self> {
        if let Some(out) = &output {
            if out.stride() != lattice.dim() + 1 {
                return Err(Error::shape("output embedding dimensionality differs from lattice"));
            }
        }
        let mut desc = Self {
            lattice,
            output,
            normalize,
            blur,
            denominators: None,
        };
        if normalize {
            desc.denominators = Some(density(&desc.lattice, desc.output_embedding(), &desc.blur)?);
        }
        Ok(desc)
    }

    /// Builds the lattice from `input_lattice` and embeds `output_lattice`
    /// (if any) against it.
    pub fn from_features(
        input_lattice: &FeatureMatrix,
        output_lattice: Option<&FeatureMatrix>,
        config: &LatticeConfig,
        normalize: bool,
    ) -> Result<Self> {
        let lattice = SparseLattice::build(input_lattice, config)?;
        let output = output_lattice.map(|l| lattice.embed(l)).transpose()?;
        Self::new(Arc::new(lattice), output, normalize)
    }

    pub fn lattice(&self) -> &SparseLattice {
        &self.lattice
    }

    pub fn output_embedding(&self) -> &Embedding {
        self.output.as_ref().unwrap_or(self.lattice.embedding())
    }

    pub fn output_len(&self) -> usize {
        self.output_embedding().len()
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn denominators(&self) -> Option<&[f64]> {
        self.denominators.as_deref()
    }

    /// `slice(conv(splat(F)))`, divided by the density when normalizing,
    /// plus the filter bias at every output point.
    pub fn forward(&self, features: &FeatureMatrix, filter: &FilterBank) -> Result<(FeatureMatrix, BclState)> {
        let splatted = splat(features, &self.lattice)?;
        check_filter(&splatted, &self.lattice, filter)?;
        let convolved = convolve_linear(&splatted, &self.lattice, filter);
        let mut out = slice_unchecked(&convolved, self.output_embedding());
        if let Some(den) = &self.denominators {
            divide_rows(&mut out, den);
        }
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(filter.bias()) {
                *o += b;
            }
        }
        let output_rows = out.rows();
        Ok((out, BclState { splatted, output_rows }))
    }

    pub fn backward(
        &self,
        state: &BclState,
        grad_output: &FeatureMatrix,
        filter: &FilterBank,
    ) -> Result<GradientPair> {
        grad_output.check_rows(state.output_rows, "bcl gradient")?;
        if grad_output.cols() != filter.c_out() {
            return Err(Error::shape(format!(
                "gradient has {} channels, filter produces {}",
                grad_output.cols(),
                filter.c_out()
            )));
        }
        let mut bias = vec![0.0; filter.c_out()];
        for r in 0..grad_output.rows() {
            for (b, g) in bias.iter_mut().zip(grad_output.row(r)) {
                *b += g;
            }
        }
        let mut scaled = grad_output.clone();
        if let Some(den) = &self.denominators {
            divide_rows(&mut scaled, den);
        }
        let at_vertices = splat_embedding(&scaled, self.output_embedding(), self.lattice.num_vertices());
        let weights = filter_gradient(&state.splatted, &at_vertices, &self.lattice, filter.c_out());
        let grad_splatted = convolve_transpose(&at_vertices, &self.lattice, filter);
        let input = slice_unchecked(&grad_splatted, self.lattice.embedding());
        Ok(GradientPair {
            input,
            filter: FilterBank::from_parts(filter.taps(), filter.c_in(), filter.c_out(), weights, bias)?,
        })
    }
}

/// A stateful bilateral convolution layer owning its filter and the
/// intermediates of the most recent forward pass.
#[derive(Debug, Clone)]
pub struct BilateralConv {
    descriptor: BclDescriptor,
    filter: FilterBank,
    retained: Option<BclState>,
}

impl BilateralConv {
    pub fn new(descriptor: BclDescriptor, filter: FilterBank) -> Self {
        Self {
            descriptor,
            filter,
            retained: None,
        }
    }

    pub fn descriptor(&self) -> &BclDescriptor {
        &self.descriptor
    }

    pub fn filter(&self) -> &FilterBank {
        &self.filter
    }

    pub fn forward(&mut self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        let (out, state) = self.descriptor.forward(features, &self.filter)?;
        self.retained = Some(state);
        Ok(out)
    }

    pub fn backward(&self, grad_output: &FeatureMatrix) -> Result<GradientPair> {
        let state = self
            .retained
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        self.descriptor.backward(state, grad_output, &self.filter)
    }
}

/// One-shot bilateral convolution of `features` from the points of
/// `input_lattice` onto those of `output_lattice` (or back onto the inputs).
/// The returned layer retains what [`BilateralConv::backward`] needs.
pub fn bcl_forward(
    features: &FeatureMatrix,
    input_lattice: &FeatureMatrix,
    output_lattice: Option<&FeatureMatrix>,
    config: &LatticeConfig,
    filter: &FilterBank,
    normalize: bool,
) -> Result<(FeatureMatrix, BilateralConv)> {
    features.check_rows(input_lattice.rows(), "bcl input")?;
    let descriptor = BclDescriptor::from_features(input_lattice, output_lattice, config, normalize)?;
    let mut layer = BilateralConv::new(descriptor, filter.clone());
    let out = layer.forward(features)?;
    Ok((out, layer))
}
