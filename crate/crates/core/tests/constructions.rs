use icreg::constructions::*;
use icreg::linalg::{invert, max_norm, Matrix};
use icreg::regression::{
    bspline_basis, cardinal_bspline, reference_predict, reference_predict_vector,
    sigma_closed_form, FeatureSpec, Uniform,
};
use icreg::tasks::SeededRng;
use icreg::transformer::{
    attention_forward, block_forward, embed_prompt, embed_prompt_vector, forward_trace,
    network_forward, ActivationKind,
};

fn random_context(n: usize, rng: &mut SeededRng) -> (Vec<(f64, f64)>, f64) {
    let ctx = (0..n)
        .map(|_| (rng.uniform_in(-1.0, 1.0), rng.uniform_in(-2.0, 2.0)))
        .collect();
    (ctx, rng.uniform_in(-1.0, 1.0))
}

/// Powers by direct exponentiation, independent of the iterated products in the library.
fn vandermonde_target(h: &Matrix, d: usize) -> Matrix {
    let mut want = h.clone();
    for t in 0..h.cols() {
        let x = h[(0, t)];
        for k in 0..=d {
            want[(1 + k, t)] = x.powi(k as i32);
        }
    }
    want
}

fn featurize(d: usize, h: &Matrix, n: usize) -> Matrix {
    let mut z = block_forward(&build_copy_block(d, n).unwrap(), h).unwrap();
    for b in build_power_doubling_blocks(d, n).unwrap() {
        z = block_forward(&b, &z).unwrap();
    }
    z
}

#[test]
fn doubling_reproduces_vandermonde_d4() {
    let mut rng = SeededRng::new(41);
    let (ctx, q) = random_context(3, &mut rng);
    let p = embed_prompt(&ctx, q, poly_embed_dim(4)).unwrap();
    let z = featurize(4, &p.matrix, 3);
    let dev = max_norm(&z.sub(&vandermonde_target(&p.matrix, 4)).unwrap());
    assert!(dev <= 1e-10, "deviation {dev:e}");
    let last = z.column(3);
    for k in 0..=4 {
        assert!((last[1 + k] - q.powi(k as i32)).abs() <= 1e-12);
    }
}

#[test]
fn featurization_exact_over_degrees() {
    let mut rng = SeededRng::new(5);
    for d in 1..=8 {
        for n in [1, 4, 9] {
            for _ in 0..5 {
                let (ctx, q) = random_context(n, &mut rng);
                let p = embed_prompt(&ctx, q, poly_embed_dim(d)).unwrap();
                let z = featurize(d, &p.matrix, n);
                let dev = max_norm(&z.sub(&vandermonde_target(&p.matrix, d)).unwrap());
                assert!(dev <= 1e-9, "d={d} n={n} deviation {dev:e}");
            }
        }
    }
}

#[test]
fn all_zero_inputs_give_zero_row() {
    let ctx = vec![(0.0, 0.5), (0.0, -0.5)];
    let p = embed_prompt(&ctx, 0.0, poly_embed_dim(3)).unwrap();
    let z = block_forward(&build_copy_block(3, 2).unwrap(), &p.matrix).unwrap();
    assert!(z.row(1).iter().all(|&v| v == 1.0));
    assert!(z.row(2).iter().all(|&v| v == 0.0));
}

#[test]
fn random_interaction_heads_follow_contract() {
    let mut rng = SeededRng::new(77);
    let de = 9;
    for _ in 0..200 {
        let n = 1 + rng.below(6);
        let ell = n + 1;
        let (ctx, q) = random_context(n, &mut rng);
        let mut h = embed_prompt(&ctx, q, de).unwrap().matrix;
        for r in 1..4 {
            for t in 0..ell {
                h[(r, t)] = rng.uniform_in(-1.5, 1.5);
            }
        }
        let mut qd = Matrix::zeros(de - 3, de);
        let mut kd = Matrix::zeros(de - 3, de);
        for r in 0..de - 3 {
            for c in 0..de {
                if rng.uniform() < 0.3 {
                    qd[(r, c)] = rng.uniform_in(-1.0, 1.0);
                }
                if rng.uniform() < 0.3 {
                    kd[(r, c)] = rng.uniform_in(-1.0, 1.0);
                }
            }
        }
        let spec = InteractionSpec {
            t1: rng.below(ell),
            t2: rng.below(ell),
            out_row: rng.below(de),
            q_data: qd,
            k_data: kd,
            scale: rng.uniform_in(-2.0, 2.0),
            shift: if rng.uniform() < 0.5 { 0.0 } else { rng.uniform_in(0.0, 5.0) },
        };
        let built = build_interaction_head_report(&spec, ell, de, 2.0).unwrap();
        assert!(built.max_weight <= built.weight_bound);
        let out = attention_forward(&built.weights, &h, ActivationKind::relu()).unwrap();
        let mut by_hand = 0.0;
        for r in 0..de - 3 {
            let a: f64 = (0..de).map(|c| spec.q_data[(r, c)] * h[(c, spec.t1)]).sum();
            let b: f64 = (0..de).map(|c| spec.k_data[(r, c)] * h[(c, spec.t2)]).sum();
            by_hand += a * b;
        }
        let want = spec.scale * (by_hand + spec.shift).max(0.0);
        for i in 0..de {
            for t in 0..ell {
                if (i, t) == (spec.out_row, spec.t1) {
                    assert!((out[(i, t)] - want).abs() <= 1e-10);
                } else {
                    assert_eq!(out[(i, t)], 0.0);
                }
            }
        }
    }
}

#[test]
fn shift_round_trip_for_large_shifts() {
    let mut rng = SeededRng::new(8);
    for shift in [10.0, 1e3, 1e6] {
        let params = OracleParams {
            input_bound: 1.0,
            shift: Some(shift),
        };
        let layout = FeatureLayout::polynomial(2, 1);
        let (ctx, q) = random_context(5, &mut rng);
        let p = embed_prompt(&ctx, q, layout.d_embed).unwrap();
        let block = build_copy_block_with(&layout, 2, 5, &params).unwrap();
        let z = block_forward(&block, &p.matrix).unwrap();
        let want = vandermonde_target(&p.matrix, 1);
        assert!(max_norm(&z.sub(&want).unwrap()) <= 1e-10);
    }
}

#[test]
fn linear_spline_block_matches_basis() {
    let grid = KnotGrid::new(-1.0, 1.0, 5, 1).unwrap();
    let mut rng = SeededRng::new(12);
    let (ctx, q) = random_context(6, &mut rng);
    let layout = FeatureLayout::linear_spline(5);
    let p = embed_prompt(&ctx, q, layout.d_embed).unwrap();
    let z = block_forward(&build_linear_spline_block(&grid, 6).unwrap(), &p.matrix).unwrap();
    for t in 0..7 {
        let x = p.matrix[(0, t)];
        let b = bspline_basis(x, &grid);
        for (j, v) in b.iter().enumerate() {
            assert!((z[(1 + j, t)] - v).abs() <= 1e-10);
        }
    }
    // knot centre gives exactly one active basis function
    let p = embed_prompt(&[(grid.knot(3), 0.0)], grid.knot(2), layout.d_embed).unwrap();
    let z = block_forward(&build_linear_spline_block(&grid, 1).unwrap(), &p.matrix).unwrap();
    assert!((z[(3, 0)] - 1.0).abs() <= 1e-12);
    assert!((z[(2, 1)] - 1.0).abs() <= 1e-12);
}

#[test]
fn quadratic_spline_blocks_match_formula() {
    let grid = KnotGrid::new(-1.0, 1.0, 4, 2).unwrap();
    let h = grid.spacing();
    let mut rng = SeededRng::new(13);
    let (ctx, q) = random_context(5, &mut rng);
    let layout = FeatureLayout::quadratic_spline(4);
    let p = embed_prompt(&ctx, q, layout.d_embed).unwrap();
    let mut z = p.matrix.clone();
    for b in build_quadratic_spline_blocks(&grid, 5).unwrap() {
        z = block_forward(&b, &z).unwrap();
    }
    for t in 0..6 {
        let x = p.matrix[(0, t)];
        for (slot, j) in grid.basis_indices().enumerate() {
            let want = cardinal_bspline((x - grid.knot(j)) / h, 2);
            let got = z[(layout.features.start + slot, t)];
            assert!((got - want).abs() <= 1e-9, "x={x} j={j}: {got} vs {want}");
        }
    }
    assert_eq!(z.row(layout.outputs.start), p.matrix.row(layout.outputs.start));
}

#[test]
fn poly_oracle_equals_formula() {
    let mut rng = SeededRng::new(99);
    for d in [1, 2, 4] {
        let spec = FeatureSpec::Monomial(d);
        let sinv = invert(&sigma_closed_form(&spec, &Uniform::symmetric()).unwrap()).unwrap();
        let n = 8;
        let net = build_poly_oracle(d, n, &sinv).unwrap();
        assert_eq!(net.d_embed, d + 7);
        assert_eq!(net.readout_rows, d + 2..d + 3);
        for _ in 0..10 {
            let (ctx, q) = random_context(n, &mut rng);
            let p = embed_prompt(&ctx, q, net.d_embed).unwrap();
            let got = network_forward(&net, &p).unwrap()[0];
            let want = reference_predict(&ctx, q, &spec, &sinv).unwrap();
            assert!((got - want).abs() <= 1e-8, "d={d}: {got} vs {want}");
        }
    }
}

#[test]
fn ols_block_hand_case() {
    let block = build_ols_linear_block(&Matrix::identity(2), 1, 1.0).unwrap();
    let p = embed_prompt(&[(1.0, 2.0)], 1.0, 8).unwrap();
    let mut h = p.matrix.clone();
    h[(1, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h[(2, 0)] = 1.0;
    h[(2, 1)] = 1.0;
    let out = block_forward(&block, &h).unwrap();
    assert_eq!(out[(3, 1)], 4.0);
    let zero = build_ols_linear_block(&Matrix::identity(2), 1, 0.0).unwrap();
    assert_eq!(block_forward(&zero, &h).unwrap()[(3, 1)], 0.0);
}

#[test]
fn vector_oracle_matches_coordinatewise() {
    let d = 2;
    let spec = FeatureSpec::Monomial(d);
    let sinv = invert(&sigma_closed_form(&spec, &Uniform::symmetric()).unwrap()).unwrap();
    let n = 6;
    let mut rng = SeededRng::new(4);
    let net = build_vector_valued_oracle(d, n, 2, &sinv).unwrap();
    assert_eq!(net.d_embed, 2 + d + 6);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let ys: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
    let q = 0.3;
    let p = embed_prompt_vector(&xs, &ys, q, net.d_embed).unwrap();
    let got = network_forward(&net, &p).unwrap();
    let want = reference_predict_vector(&xs, &ys, q, &spec, &sinv).unwrap();
    for k in 0..2 {
        assert!((got[k] - want[k]).abs() <= 1e-10);
    }
    let scalar = build_poly_oracle(d, n, &sinv).unwrap();
    let net1 = build_vector_valued_oracle(d, n, 1, &sinv).unwrap();
    let ctx: Vec<(f64, f64)> = xs.iter().zip(&ys).map(|(&x, y)| (x, y[0])).collect();
    let p1 = embed_prompt(&ctx, q, scalar.d_embed).unwrap();
    assert_eq!(
        network_forward(&net1, &p1).unwrap(),
        network_forward(&scalar, &p1).unwrap()
    );
    let zeros: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; 3]).collect();
    let net3 = build_vector_valued_oracle(d, n, 3, &sinv).unwrap();
    let p3 = embed_prompt_vector(&xs, &zeros, q, net3.d_embed).unwrap();
    assert_eq!(network_forward(&net3, &p3).unwrap(), vec![0.0; 3]);
}

#[test]
fn y_row_untouched_by_featurizer() {
    let mut rng = SeededRng::new(3);
    let (ctx, q) = random_context(4, &mut rng);
    let p = embed_prompt(&ctx, q, poly_embed_dim(4)).unwrap();
    let mut net = build_poly_oracle(4, 4, &Matrix::identity(5)).unwrap();
    net.blocks.pop();
    let states = forward_trace(&net, &p).unwrap();
    for s in &states {
        assert_eq!(s.row(6), p.matrix.row(6));
    }
}
