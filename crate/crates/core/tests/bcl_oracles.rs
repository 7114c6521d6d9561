mod common;

use std::sync::Arc;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatnet::bcl::{self, bcl_forward, BclDescriptor, FilterBank};
use splatnet::lattice::{build_lattice, LatticeConfig};
use splatnet::FeatureMatrix;

fn config(d: usize, lambda: f64) -> LatticeConfig {
    LatticeConfig::isotropic(d, lambda).unwrap()
}

#[test]
fn splat_matches_dense_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let l = random_matrix(&mut rng, 8, 2);
    let lat = build_lattice(&l, &config(2, 2.0)).unwrap();
    let f = random_matrix(&mut rng, 8, 3);
    let sparse = bcl::splat(&f, &lat).unwrap();
    let dense = dense_splat(&lat);
    for c in 0..3 {
        let expected = matvec(&dense, &f.column(c));
        for (v, e) in expected.iter().enumerate() {
            assert!((sparse.get(v, c) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn convolve_matches_dense_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // Grow the cloud until it occupies at least 20 vertices.
    let mut n = 4;
    let lat = loop {
        let l = random_matrix(&mut rng, n, 2);
        let lat = build_lattice(&l, &config(2, 1.5)).unwrap();
        if lat.num_vertices() >= 20 {
            break lat;
        }
        n += 2;
    };
    let fv = random_matrix(&mut rng, lat.num_vertices(), 3);
    let w = random_filter(&mut rng, lat.num_taps(), 3, 3, true);
    let sparse = bcl::convolve(&fv, &lat, &w).unwrap();
    for co in 0..3 {
        let mut expected = vec![w.bias()[co]; lat.num_vertices()];
        for ci in 0..3 {
            let b = dense_conv(&lat, &w, ci, co);
            for (e, x) in expected.iter_mut().zip(matvec(&b, &fv.column(ci))) {
                *e += x;
            }
        }
        for (v, e) in expected.iter().enumerate() {
            assert!((sparse.get(v, co) - e).abs() < 1e-10);
        }
    }
}

#[test]
fn slice_is_adjoint_of_splat() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=40);
        let l = random_matrix(&mut rng, n, d);
        let lat = build_lattice(&l, &config(d, rng.random_range(0.5..4.0))).unwrap();
        let v = random_matrix(&mut rng, lat.num_vertices(), 2);
        let u = random_matrix(&mut rng, n, 2);
        let lhs = bcl::slice(&v, lat.embedding()).unwrap().dot(&u);
        let rhs = v.dot(&bcl::splat(&u, &lat).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}

#[test]
fn normalize_matches_dense_quotient() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let l = random_matrix(&mut rng, 12, 2);
    let lat = build_lattice(&l, &config(2, 2.0)).unwrap();
    let f = random_matrix(&mut rng, 12, 2);
    let w = random_filter(&mut rng, lat.num_taps(), 2, 2, false);
    let blur = FilterBank::density_blur(lat.num_taps());
    let raw = bcl::slice(
        &bcl::convolve(&bcl::splat(&f, &lat).unwrap(), &lat, &w).unwrap(),
        lat.embedding(),
    )
    .unwrap();
    let got = bcl::normalize(&raw, &lat, lat.embedding(), &blur).unwrap();
    let expected = dense_bcl(&lat, lat.embedding(), &f, &w, Some(&blur));
    for (g, e) in got.as_slice().iter().zip(expected.as_slice()) {
        assert!((g - e).abs() <= 1e-9 * e.abs().max(1e-12));
    }
}

#[test]
fn normalize_with_matching_kernel_preserves_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let l = random_matrix(&mut rng, 30, 3);
    let lat = build_lattice(&l, &config(3, 2.0)).unwrap();
    let blur = FilterBank::density_blur(lat.num_taps());
    // Convolution kernel equal to the blur applied per channel.
    let profile: Vec<f64> = (0..lat.num_taps()).map(|k| blur.get(k, 0, 0)).collect();
    let w = FilterBank::per_tap(&profile, 2);
    let f = FeatureMatrix::filled(30, 2, 4.2);
    let raw = bcl::slice(&bcl::convolve(&bcl::splat(&f, &lat).unwrap(), &lat, &w).unwrap(), lat.embedding()).unwrap();
    let out = bcl::normalize(&raw, &lat, lat.embedding(), &blur).unwrap();
    for v in out.as_slice() {
        assert!((v - 4.2).abs() < 1e-6);
    }
}

#[test]
fn identity_kernel_forward_is_lattice_smoothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let l = random_matrix(&mut rng, 15, 3);
    let f = random_matrix(&mut rng, 15, 2);
    let cfg = config(3, 1.0);
    let (out, layer) = bcl_forward(&f, &l, None, &cfg, &FilterBank::identity(15, 2), false).unwrap();
    let lat = layer.descriptor().lattice();
    let smoothed = bcl::slice(&bcl::splat(&f, lat).unwrap(), lat.embedding()).unwrap();
    assert!(out.max_abs_diff(&smoothed) < 1e-14);
}

#[test]
fn identity_kernel_with_matching_blur_keeps_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let l = random_matrix(&mut rng, 20, 3);
    let lat = Arc::new(build_lattice(&l, &config(3, 2.0)).unwrap());
    let taps = lat.num_taps();
    let desc = BclDescriptor::with_blur(lat, None, true, FilterBank::identity(taps, 1)).unwrap();
    let (out, _) = desc.forward(&FeatureMatrix::filled(20, 1, -3.0), &FilterBank::identity(taps, 1)).unwrap();
    for v in out.as_slice() {
        assert!((v + 3.0).abs() < 1e-6);
    }
}

#[test]
fn forward_matches_dense_product_with_distinct_output_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for normalize in [false, true] {
        let l_in = random_matrix(&mut rng, 14, 2);
        let l_out = random_matrix(&mut rng, 9, 2);
        let f = random_matrix(&mut rng, 14, 3);
        let cfg = config(2, 1.5);
        let w = random_filter(&mut rng, 7, 3, 2, true);
        let (out, layer) = bcl_forward(&f, &l_in, Some(&l_out), &cfg, &w, normalize).unwrap();
        let desc = layer.descriptor();
        let blur = FilterBank::density_blur(7);
        let expected = dense_bcl(
            desc.lattice(),
            desc.output_embedding(),
            &f,
            &w,
            normalize.then_some(&blur),
        );
        assert_eq!(out.shape(), (9, 2));
        assert!(out.max_abs_diff(&expected) < 1e-9);
    }
}

#[test]
fn forward_is_linear_without_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let l = random_matrix(&mut rng, 16, 3);
    let cfg = config(3, 2.0);
    let w = random_filter(&mut rng, 15, 2, 2, false);
    let f1 = random_matrix(&mut rng, 16, 2);
    let f2 = random_matrix(&mut rng, 16, 2);
    let (a, b) = (0.7, -1.3);
    let mut combo = f1.clone();
    combo.scale(a);
    let mut f2s = f2.clone();
    f2s.scale(b);
    combo.add_assign(&f2s);
    let y = bcl_forward(&combo, &l, None, &cfg, &w, false).unwrap().0;
    let mut expected = bcl_forward(&f1, &l, None, &cfg, &w, false).unwrap().0;
    expected.scale(a);
    let mut y2 = bcl_forward(&f2, &l, None, &cfg, &w, false).unwrap().0;
    y2.scale(b);
    expected.add_assign(&y2);
    assert!(y.max_abs_diff(&expected) < 1e-10);
}

#[test]
fn backward_matches_dense_transpose_for_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let l = random_matrix(&mut rng, 10, 2);
    let f = random_matrix(&mut rng, 10, 1);
    let (_, layer) = bcl_forward(&f, &l, None, &config(2, 2.0), &FilterBank::identity(7, 1), false).unwrap();
    let g = random_matrix(&mut rng, 10, 1);
    let grads = layer.backward(&g).unwrap();
    let lat = layer.descriptor().lattice();
    // (S_slice S_splat)^T g with S_slice = S_splat^T.
    let splat = dense_splat(lat);
    let expected = matvec(&transpose(&splat), &matvec(&splat, &g.column(0)));
    for (i, e) in expected.iter().enumerate() {
        assert!((grads.input.get(i, 0) - e).abs() < 1e-10);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for (d, normalize, distinct) in [(2, false, false), (2, true, false), (2, true, true), (1, true, true), (3, false, true)] {
        let worst = bcl_gradient_error(&mut rng, d, 6, normalize, distinct);
        assert!(worst < 1e-4, "d={d} normalize={normalize} distinct={distinct}: {worst}");
    }
}

#[test]
fn project_matches_dense_normalized_transport() {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let src = random_matrix(&mut rng, 20, 3);
    let dst = random_matrix(&mut rng, 12, 3);
    let f = random_matrix(&mut rng, 20, 2);
    let cfg = config(3, 1.0);
    let out = bcl::project(&f, &src, &dst, &cfg).unwrap();
    let lat = build_lattice(&src, &cfg).unwrap();
    let emb = lat.embed(&dst).unwrap();
    let splat = dense_splat(&lat);
    let slice = dense_slice(&emb, lat.num_vertices());
    let den = matvec(&slice, &matvec(&splat, &vec![1.0; 20]));
    for c in 0..2 {
        let num = matvec(&slice, &matvec(&splat, &f.column(c)));
        for i in 0..12 {
            let e = num[i] / den[i].max(1e-12);
            assert!((out.get(i, c) - e).abs() <= 1e-9 * e.abs().max(1e-12));
        }
    }
}

#[test]
fn permuting_points_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let n = 25;
    let l = random_matrix(&mut rng, n, 3);
    let f = random_matrix(&mut rng, n, 2);
    let w = random_filter(&mut rng, 15, 2, 3, true);
    let cfg = config(3, 1.5);
    let (out, _) = bcl_forward(&f, &l, None, &cfg, &w, true).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let (out_p, _) = bcl_forward(&f.select_rows(&perm), &l.select_rows(&perm), None, &cfg, &w, true).unwrap();
    assert!(out_p.max_abs_diff(&out.select_rows(&perm)) < 1e-6);
}
