//! Test-only oracles: explicit dense matrices for the sparse lattice maps and
//! central finite differences.
#![allow(dead_code)]

use rand::Rng;
use splatnet::bcl::FilterBank;
use splatnet::lattice::{Embedding, SparseLattice, MISSING};
use splatnet::FeatureMatrix;

pub type Dense = Vec<Vec<f64>>;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_filter(rng: &mut impl Rng, taps: usize, c_in: usize, c_out: usize, bias: bool) -> FilterBank {
    let w = (0..taps * c_in * c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..c_out)
        .map(|_| if bias { rng.random_range(-1.0..1.0) } else { 0.0 })
        .collect();
    FilterBank::from_parts(taps, c_in, c_out, w, b).unwrap()
}

/// `m × V` interpolation matrix of an embedding.
pub fn dense_slice(embedding: &Embedding, vertices: usize) -> Dense {
    let mut s = vec![vec![0.0; vertices]; embedding.len()];
    for i in 0..embedding.len() {
        let (verts, weights) = embedding.point(i);
        for (&v, &w) in verts.iter().zip(weights) {
            if v != MISSING {
                s[i][v as usize] += w;
            }
        }
    }
    s
}

/// `V × n` splat matrix.
pub fn dense_splat(lattice: &SparseLattice) -> Dense {
    transpose(&dense_slice(lattice.embedding(), lattice.num_vertices()))
}

/// Single-channel-pair convolution matrix `B[v][u]` for filter entry
/// `(ci, co)`, built by searching vertex keys directly rather than through
/// the adjacency table.
pub fn dense_conv(lattice: &SparseLattice, filter: &FilterBank, ci: usize, co: usize) -> Dense {
    let v_count = lattice.num_vertices();
    let keys: Vec<Vec<i32>> = (0..v_count).map(|v| lattice.vertex_key(v).coords).collect();
    let mut b = vec![vec![0.0; v_count]; v_count];
    for v in 0..v_count {
        for (k, off) in lattice.offsets().iter().enumerate() {
            let target: Vec<i32> = keys[v].iter().zip(off).map(|(a, o)| a + o).collect();
            if let Some(u) = keys.iter().position(|key| *key == target) {
                b[v][u] += filter.get(k, ci, co);
            }
        }
    }
    b
}

pub fn transpose(a: &Dense) -> Dense {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn matvec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

/// Dense `S_slice · B_conv · S_splat · F` plus bias, optionally divided by
/// `S_slice · B_blur · S_splat · 1`.
pub fn dense_bcl(
    lattice: &SparseLattice,
    output: &Embedding,
    features: &FeatureMatrix,
    filter: &FilterBank,
    blur: Option<&FilterBank>,
) -> FeatureMatrix {
    let splat = dense_splat(lattice);
    let slice = dense_slice(output, lattice.num_vertices());
    let m = output.len();
    let mut out = FeatureMatrix::zeros(m, filter.c_out());
    let splatted: Vec<Vec<f64>> = (0..features.cols())
        .map(|c| matvec(&splat, &features.column(c)))
        .collect();
    for co in 0..filter.c_out() {
        let mut acc = vec![0.0; lattice.num_vertices()];
        for ci in 0..filter.c_in() {
            let b = dense_conv(lattice, filter, ci, co);
            for (a, v) in acc.iter_mut().zip(matvec(&b, &splatted[ci])) {
                *a += v;
            }
        }
        let col = matvec(&slice, &acc);
        for (i, v) in col.into_iter().enumerate() {
            out.set(i, co, v);
        }
    }
    if let Some(blur) = blur {
        let ones = vec![1.0; features.rows()];
        let den = matvec(&slice, &matvec(&dense_conv(lattice, blur, 0, 0), &matvec(&splat, &ones)));
        for (i, d) in den.into_iter().enumerate() {
            for v in out.row_mut(i) {
                *v /= d.max(1e-12);
            }
        }
    }
    for i in 0..m {
        for (v, b) in out.row_mut(i).iter_mut().zip(filter.bias()) {
            *v += b;
        }
    }
    out
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sensibly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Clouds of `points` points drawn from two isotropic Gaussians (std 0.1)
/// centred at ±0.5 on the gravity axis; the label is the source blob.
pub fn two_blob_clouds(rng: &mut impl Rng, clouds: usize, points: usize) -> Vec<splatnet::data::PointCloud> {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, 0.1).unwrap();
    (0..clouds)
        .map(|_| {
            let mut positions = Vec::with_capacity(points);
            let mut labels = Vec::with_capacity(points);
            for i in 0..points {
                let label = (i % 2) as i32;
                let centre = if label == 0 { -0.5 } else { 0.5 };
                let mut p: [f64; 3] = std::array::from_fn(|_| noise.sample(rng));
                p[1] += centre;
                positions.push(p);
                labels.push(label);
            }
            splatnet::data::PointCloud::new(positions).with_labels(labels).unwrap()
        })
        .collect()
}

/// Worst relative error between the analytic BCL gradients (input, weights,
/// bias) and central differences of `⟨forward(F, W), R⟩` for random `R`.
pub fn bcl_gradient_error(rng: &mut impl Rng, d: usize, n: usize, normalize: bool, distinct_output: bool) -> f64 {
    use splatnet::bcl::BclDescriptor;
    use splatnet::lattice::LatticeConfig;
    let c = 2;
    let l_in = random_matrix(rng, n, d);
    let l_out = random_matrix(rng, n.div_ceil(2) + 1, d);
    let cfg = LatticeConfig::isotropic(d, 1.0).unwrap();
    let taps = (1 << (d + 1)) - 1;
    let f = random_matrix(rng, n, c);
    let w = random_filter(rng, taps, c, c, true);
    let desc = BclDescriptor::from_features(&l_in, distinct_output.then_some(&l_out), &cfg, normalize).unwrap();
    let (out, state) = desc.forward(&f, &w).unwrap();
    let probe = random_matrix(rng, out.rows(), c);
    let grads = desc.backward(&state, &probe, &w).unwrap();

    let h = 1e-5;
    let objective = |f: &FeatureMatrix, w: &FilterBank| desc.forward(f, w).unwrap().0.dot(&probe);
    let mut worst: f64 = 0.0;
    let mut x = f.as_slice().to_vec();
    for i in 0..x.len() {
        let numeric = central_difference(&mut x, i, h, |v| objective(&FeatureMatrix::from_vec(n, c, v.to_vec()).unwrap(), &w));
        worst = worst.max(rel_err(grads.input.as_slice()[i], numeric));
    }
    let mut x = w.weights().to_vec();
    for i in 0..x.len() {
        let numeric = central_difference(&mut x, i, h, |v| {
            let mut wp = w.clone();
            wp.weights_mut().copy_from_slice(v);
            objective(&f, &wp)
        });
        worst = worst.max(rel_err(grads.filter.weights()[i], numeric));
    }
    let mut x = w.bias().to_vec();
    for i in 0..x.len() {
        let numeric = central_difference(&mut x, i, h, |v| {
            let mut wp = w.clone();
            wp.bias_mut().copy_from_slice(v);
            objective(&f, &wp)
        });
        worst = worst.max(rel_err(grads.filter.bias()[i], numeric));
    }
    worst
}

/// Worst relative error between every analytic parameter and input gradient
/// of a training-mode network and central differences of
/// `⟨probabilities, R⟩` on `n` random points.
pub fn network_gradient_error(spec: &splatnet::network::NetworkSpec, n: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    use splatnet::network::{backward, forward_input, Mode, NetworkInput, Parameters};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::init(spec, &mut rng);
    // Move BatchNorm affine parameters off their defaults.
    for t in params.trainable_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let input = NetworkInput {
        features: random_matrix(&mut rng, n, spec.channels().feature_width()),
        lattice: random_matrix(&mut rng, n, spec.lattice0().dim()),
    };
    let r = random_matrix(&mut rng, n, spec.num_classes());
    let probe = |p: &Parameters, input: &NetworkInput| forward_input(spec, p, input, Mode::Training).unwrap().0.dot(&r);
    let (_, tape) = forward_input(spec, &params, &input, Mode::Training).unwrap();
    let grads = backward(spec, &params, &tape, &r).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = grads.params.trainable().iter().map(|t| t.to_vec()).collect();
    for (t, tensor) in analytic.iter().enumerate() {
        let mut x = params.trainable()[t].to_vec();
        for (i, &a) in tensor.iter().enumerate() {
            let numeric = central_difference(&mut x, i, h, |v| {
                let mut p = params.clone();
                p.trainable_mut()[t].copy_from_slice(v);
                probe(&p, &input)
            });
            worst = worst.max(rel_err(a, numeric));
        }
    }
    let mut x = input.features.as_slice().to_vec();
    for i in 0..x.len() {
        let numeric = central_difference(&mut x, i, h, |v| {
            let features = FeatureMatrix::from_vec(n, input.features.cols(), v.to_vec()).unwrap();
            probe(&params, &NetworkInput { features, lattice: input.lattice.clone() })
        });
        worst = worst.max(rel_err(grads.input.as_slice()[i], numeric));
    }
    worst
}

/// Every lattice vector in `[-(d+1), d+1]^(d+1)` that is congruent, sums to
/// zero and spans at most `d + 1`: the vertices sharing a simplex with the
/// origin.
pub fn brute_force_ring(d: usize) -> std::collections::HashSet<Vec<i32>> {
    let m = d as i32 + 1;
    let mut out = std::collections::HashSet::new();
    for r in 0..m {
        let values: Vec<i32> = (-m..=m).filter(|v| v.rem_euclid(m) == r).collect();
        let mut idx = vec![0usize; d + 1];
        loop {
            let v: Vec<i32> = idx.iter().map(|&i| values[i]).collect();
            let span = v.iter().max().unwrap() - v.iter().min().unwrap();
            if v.iter().sum::<i32>() == 0 && span <= m {
                out.insert(v);
            }
            let mut k = 0;
            while k <= d {
                idx[k] += 1;
                if idx[k] < values.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k > d {
                break;
            }
        }
    }
    out
}
