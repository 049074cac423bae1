use super::*;
use crate::linalg::{kron, orthogonality_defect, svd};
use crate::random::{gaussian, orthogonal, seeded, special_orthogonal};

fn random_base(rng: &mut crate::random::SodaRng, m: usize, n: usize) -> FrozenBase {
    FrozenBase::new(gaussian(rng, m, n, 1.0 / (n as f64).sqrt()))
}

fn config_for(method: Method) -> AdapterConfig {
    let rank = match method {
        Method::Lora => 2,
        Method::Oft | Method::OftShared => 2,
        _ => 3,
    };
    AdapterConfig::new(method, rank)
}

/// Random, non-identity trainables with σ + δ kept away from the ReLU kink.
fn perturbed_state(base: &FrozenBase, method: Method, rng: &mut crate::random::SodaRng) -> AdapterState {
    let mut st = AdapterState::init(base, &config_for(method), rng).unwrap();
    let (m, n) = base.shape();
    if let Some((b, a)) = st.trainables.lora_mut() {
        *b = gaussian(rng, m, b.cols(), 0.3);
        *a = gaussian(rng, a.rows(), n, 0.3);
    }
    if let Some(d) = st.trainables.delta_mut() {
        for v in d.iter_mut() {
            *v = gaussian(rng, 1, 1, 0.05)[(0, 0)];
        }
    }
    for r in st.trainables.rotations_mut() {
        *r = special_orthogonal(rng, r.rows());
    }
    st
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `l = ⟨dh, W x⟩` over every trainable scalar.
fn finite_difference_grads(base: &FrozenBase, st: &AdapterState, x: &DenseMatrix, dh: &DenseMatrix) -> Vec<f64> {
    let flat = st.trainables.flatten();
    let h = 1e-5;
    let loss = |vals: &[f64]| {
        let mut s = st.clone();
        s.trainables.assign_flat(vals).unwrap();
        forward(base, &s, x).unwrap().inner(dh).unwrap()
    };
    (0..flat.len())
        .map(|i| {
            let mut p = flat.clone();
            let mut q = flat.clone();
            p[i] += h;
            q[i] -= h;
            (loss(&p) - loss(&q)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn every_method_starts_at_the_base_weight() {
    let mut rng = seeded(1);
    for &n in &[8usize, 16, 64] {
        let base = random_base(&mut rng, n, n);
        for method in Method::ALL {
            for constraint in Constraint::ALL {
                let cfg = config_for(method).with_constraint(constraint);
                let st = AdapterState::init(&base, &cfg, &mut rng).unwrap();
                let w = effective_weight(&base, &st).unwrap();
                let err = w.sub(base.w0()).unwrap().frobenius_norm();
                assert!(
                    err <= 1e-8 * (1.0 + base.w0().frobenius_norm()),
                    "{method} {constraint} n={n}: {err}"
                );
            }
        }
    }
}

#[test]
fn soda_svd_relu_arithmetic() {
    let mut rng = seeded(2);
    let u = orthogonal(&mut rng, 2);
    let v = orthogonal(&mut rng, 2);
    let w0 = u
        .matmul(&DenseMatrix::from_diag(&[2.0, 1.0]))
        .unwrap()
        .matmul_tr(&v)
        .unwrap();
    let base = FrozenBase::new(w0);
    let mut st = AdapterState::init(&base, &AdapterConfig::new(Method::SodaSvd, 1), &mut rng).unwrap();
    *st.trainables.delta_mut().unwrap() = vec![-3.0, 0.5];
    let w = effective_weight(&base, &st).unwrap();
    let dec = base.spectral().unwrap();
    let expect = dec
        .u
        .matmul(&DenseMatrix::from_diag(&[0.0, 1.5]))
        .unwrap()
        .matmul(&dec.vt)
        .unwrap();
    assert!(w.sub(&expect).unwrap().max_abs() < 1e-14);
    assert_eq!(effective_spectrum(&base, &st).unwrap().unwrap()[0], 0.0);
}

#[test]
fn koft_quarter_turns_preserve_norm() {
    let mut rng = seeded(3);
    let base = random_base(&mut rng, 4, 4);
    let r = DenseMatrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]);
    let st = AdapterState {
        constraint: Constraint::Relu,
        rank: 2,
        trainables: Trainables::Koft {
            rotation: KroneckerRotation::from_factors(vec![r.clone(), r.clone()]).unwrap(),
        },
    };
    let w = effective_weight(&base, &st).unwrap();
    let expect = base.w0().matmul(&kron(&r, &r).unwrap()).unwrap();
    assert_eq!(w, expect);
    assert!((w.frobenius_norm() - base.w0().frobenius_norm()).abs() <= 1e-10);
}

#[test]
fn oft_shared_is_identity_kron_block() {
    let mut rng = seeded(4);
    let base = random_base(&mut rng, 5, 6);
    let block = special_orthogonal(&mut rng, 3);
    let st = AdapterState {
        constraint: Constraint::Relu,
        rank: 2,
        trainables: Trainables::OftShared { block: block.clone() },
    };
    let expect = base
        .w0()
        .matmul(&kron(&DenseMatrix::identity(2), &block).unwrap())
        .unwrap();
    assert!(effective_weight(&base, &st).unwrap().sub(&expect).unwrap().max_abs() < 1e-15);
}

#[test]
fn forward_examples() {
    let mut rng = seeded(5);
    let base = random_base(&mut rng, 6, 8);
    for method in [Method::Lora, Method::Koft, Method::SodaQr] {
        let st = perturbed_state(&base, method, &mut rng);
        let h = forward(&base, &st, &DenseMatrix::zeros(8, 3)).unwrap();
        assert_eq!(h, DenseMatrix::zeros(6, 3));
    }
    let st = AdapterState::init(&base, &AdapterConfig::new(Method::Lora, 2), &mut rng).unwrap();
    let x = gaussian(&mut rng, 8, 4, 1.0);
    assert_eq!(forward(&base, &st, &x).unwrap(), base.w0().matmul(&x).unwrap());

    let st = perturbed_state(&base, Method::Lora, &mut rng);
    let factored = forward(&base, &st, &x).unwrap();
    let materialized = effective_weight(&base, &st).unwrap().matmul(&x).unwrap();
    assert!(factored.sub(&materialized).unwrap().max_abs() <= 1e-12);

    assert!(matches!(
        forward(&base, &st, &DenseMatrix::zeros(7, 1)),
        Err(SodaError::Shape { .. })
    ));
}

#[test]
fn backward_zero_upstream_gives_zero_gradients() {
    let mut rng = seeded(6);
    let base = random_base(&mut rng, 8, 8);
    for method in Method::ALL {
        let st = perturbed_state(&base, method, &mut rng);
        let x = gaussian(&mut rng, 8, 2, 1.0);
        let g = backward(&base, &st, &x, &DenseMatrix::zeros(8, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0), "{method}");
    }
}

#[test]
fn svdiff_gradient_with_identity_bases() {
    let base = FrozenBase::new(DenseMatrix::from_diag(&[2.0, 1.0]));
    let mut rng = seeded(7);
    let st = AdapterState::init(&base, &AdapterConfig::new(Method::Svdiff, 1), &mut rng).unwrap();
    let x = DenseMatrix::column_vector(&[3.0, 4.0]);
    let dh = DenseMatrix::column_vector(&[1.0, 2.0]);
    let g = backward(&base, &st, &x, &dh).unwrap();
    assert_eq!(g.delta().unwrap(), &[3.0, 8.0]);
}

#[test]
fn backward_matches_finite_differences_for_every_method() {
    let mut rng = seeded(8);
    for trial in 0..4 {
        let base = random_base(&mut rng, 8, 8);
        for method in Method::ALL {
            let st = perturbed_state(&base, method, &mut rng);
            let x = gaussian(&mut rng, 8, 3, 1.0);
            let dh = gaussian(&mut rng, 8, 3, 1.0);
            let analytic = backward(&base, &st, &x, &dh).unwrap().flatten();
            let numeric = finite_difference_grads(&base, &st, &x, &dh);
            for (i, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
                assert!(rel_err(*a, *f) <= 1e-5, "{method} trial {trial} entry {i}: {a} vs {f}");
            }
        }
    }
}

#[test]
fn backward_handles_rectangular_layers() {
    let mut rng = seeded(9);
    for (m, n) in [(6usize, 8usize), (8, 6)] {
        let base = random_base(&mut rng, m, n);
        for method in Method::ALL {
            if method == Method::SodaQr && m > n {
                assert!(AdapterState::init(&base, &config_for(method), &mut rng).is_err());
                continue;
            }
            let mut cfg = config_for(method);
            if method.uses_kronecker() {
                cfg.rank = 2;
            }
            let mut st = AdapterState::init(&base, &cfg, &mut rng).unwrap();
            if let Some((b, a)) = st.trainables.lora_mut() {
                *b = gaussian(&mut rng, m, b.cols(), 0.3);
                *a = gaussian(&mut rng, a.rows(), n, 0.3);
            }
            for r in st.trainables.rotations_mut() {
                *r = special_orthogonal(&mut rng, r.rows());
            }
            let x = gaussian(&mut rng, n, 2, 1.0);
            let dh = gaussian(&mut rng, m, 2, 1.0);
            let analytic = backward(&base, &st, &x, &dh).unwrap().flatten();
            let numeric = finite_difference_grads(&base, &st, &x, &dh);
            for (a, f) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *f) <= 1e-5, "{method} {m}x{n}: {a} vs {f}");
            }
        }
    }
}

#[test]
fn relu_kink_blocks_gradient() {
    let mut rng = seeded(10);
    let base = random_base(&mut rng, 4, 4);
    let mut st = AdapterState::init(&base, &AdapterConfig::new(Method::Svdiff, 1), &mut rng).unwrap();
    let sigma = base.spectral().unwrap().sigma.clone();
    st.trainables.delta_mut().unwrap()[0] = -sigma[0] - 1.0;
    let x = gaussian(&mut rng, 4, 2, 1.0);
    let dh = gaussian(&mut rng, 4, 2, 1.0);
    let g = backward(&base, &st, &x, &dh).unwrap();
    assert_eq!(g.delta().unwrap()[0], 0.0);
}

#[test]
fn param_count_examples() {
    assert_eq!(param_count(Method::Lora, 64, 64, 1).unwrap(), 128);
    assert_eq!(param_count(Method::Koft, 64, 64, 3).unwrap(), 48);
    assert_eq!(param_count(Method::SodaSvd, 64, 64, 3).unwrap(), 112);
    assert_eq!(param_count(Method::SodaQr, 64, 64, 3).unwrap(), 112);
    assert_eq!(param_count(Method::Oft, 64, 64, 4).unwrap(), 1024);
    assert_eq!(param_count(Method::OftShared, 64, 64, 4).unwrap(), 256);
    assert!(matches!(param_count(Method::Oft, 64, 64, 3), Err(SodaError::Config(_))));
    assert!(param_count(Method::Koft, 7, 7, 2).is_err());
}

#[test]
fn param_count_matches_initialized_scalars() {
    let mut rng = seeded(11);
    for (m, n) in [(8usize, 8usize), (16, 16), (6, 8), (12, 8)] {
        let base = random_base(&mut rng, m, n);
        for method in Method::ALL {
            for r in 1..=3 {
                let cfg = AdapterConfig::new(method, r);
                match AdapterState::init(&base, &cfg, &mut rng) {
                    Ok(st) => assert_eq!(
                        st.trainables.scalar_count(),
                        param_count(method, m, n, r).unwrap(),
                        "{method} {m}x{n} r={r}"
                    ),
                    Err(_) => assert!(param_count(method, m, n, r).is_err(), "{method} {m}x{n} r={r}"),
                }
            }
        }
    }
}

#[test]
fn residual_and_merge() {
    let mut rng = seeded(12);
    let base = random_base(&mut rng, 8, 8);
    let fresh = AdapterState::init(&base, &AdapterConfig::new(Method::SodaSvd, 3), &mut rng).unwrap();
    assert!(residual(&base, &fresh).unwrap().max_abs() < 1e-12);

    let lora = perturbed_state(&base, Method::Lora, &mut rng);
    let (b, a) = lora.trainables.lora().unwrap();
    assert_eq!(residual(&base, &lora).unwrap(), b.matmul(a).unwrap());

    let soda = perturbed_state(&base, Method::SodaSvd, &mut rng);
    let dw = residual(&base, &soda).unwrap();
    let w = effective_weight(&base, &soda).unwrap();
    assert!(dw.add(base.w0()).unwrap().sub(&w).unwrap().max_abs() <= 1e-12);

    let zero = DenseMatrix::zeros(8, 8);
    assert_eq!(merge(&dw, &zero).unwrap(), dw);
    assert_eq!(merge(&dw, &dw.scale(-1.0)).unwrap(), zero);
    let other = residual(&base, &lora).unwrap();
    assert_eq!(merge(&dw, &other).unwrap(), merge(&other, &dw).unwrap());
    assert!(merge(&dw, &DenseMatrix::zeros(8, 7)).is_err());
}

#[test]
fn lora_residual_rank_is_bounded() {
    let mut rng = seeded(13);
    let base = random_base(&mut rng, 10, 10);
    for r in 1..=4 {
        let mut st = AdapterState::init(&base, &AdapterConfig::new(Method::Lora, r), &mut rng).unwrap();
        let (b, _) = st.trainables.lora_mut().unwrap();
        *b = gaussian(&mut rng, 10, r, 1.0);
        let sigma = svd(&residual(&base, &st).unwrap()).unwrap().sigma;
        assert!(sigma[r..].iter().all(|&s| s < 1e-10), "r={r}: {sigma:?}");
    }
}

#[test]
fn spectral_projection_examples() {
    let mut rng = seeded(14);
    let u = orthogonal(&mut rng, 4);
    let v = orthogonal(&mut rng, 4);
    let d = [1.0, -2.0, 0.5, 3.0];
    let dw = u.matmul(&DenseMatrix::from_diag(&d)).unwrap().matmul_tr(&v).unwrap();
    let p = spectral_projection_delta(&u, &v, &dw).unwrap();
    for (i, want) in d.iter().enumerate() {
        assert!((p.delta_sigma[(i, i)] - want).abs() < 1e-12);
    }
    assert!((p.projected_norm - dw.frobenius_norm()).abs() < 1e-12);

    let swap = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
    let eye = DenseMatrix::identity(2);
    let p = spectral_projection_delta(&eye, &eye, &swap).unwrap();
    assert_eq!(p.delta_sigma, DenseMatrix::zeros(2, 2));
    assert_eq!(p.projected_norm, 0.0);

    for _ in 0..100 {
        let u = orthogonal(&mut rng, 8);
        let v = orthogonal(&mut rng, 8);
        let dw = gaussian(&mut rng, 8, 8, 1.0);
        let p = spectral_projection_delta(&u, &v, &dw).unwrap();
        assert!(p.projected_norm <= dw.frobenius_norm());
    }
}

#[test]
fn pure_rotations_preserve_norm() {
    let mut rng = seeded(15);
    let base = random_base(&mut rng, 8, 8);
    for method in [Method::Oft, Method::OftShared, Method::Koft, Method::SodaSvd] {
        let mut st = AdapterState::init(&base, &config_for(method), &mut rng).unwrap();
        for r in st.trainables.rotations_mut() {
            *r = orthogonal(&mut rng, r.rows());
        }
        let w = effective_weight(&base, &st).unwrap();
        assert!(
            (w.frobenius_norm() - base.w0().frobenius_norm()).abs() <= 1e-8,
            "{method}"
        );
    }
}

#[test]
fn constraint_semantics() {
    let mut rng = seeded(16);
    let base = random_base(&mut rng, 6, 6);
    for constraint in Constraint::ALL {
        let cfg = AdapterConfig::new(Method::SodaSvd, 2).with_constraint(constraint);
        let mut st = AdapterState::init(&base, &cfg, &mut rng).unwrap();
        *st.trainables.delta_mut().unwrap() = vec![-5.0; 6];
        let s = effective_spectrum(&base, &st).unwrap().unwrap();
        match constraint {
            Constraint::Relu => assert!(s.iter().all(|&v| v >= 0.0)),
            Constraint::Softplus => assert!(s.iter().all(|&v| v > 0.0)),
            Constraint::None => assert!(s.iter().any(|&v| v < 0.0)),
        }
    }
}

#[test]
fn kronecker_product_of_orthogonal_factors_is_orthogonal() {
    let mut rng = seeded(17);
    for _ in 0..20 {
        let rot = KroneckerRotation::from_factors(vec![
            orthogonal(&mut rng, 2),
            orthogonal(&mut rng, 3),
            orthogonal(&mut rng, 4),
        ])
        .unwrap();
        assert!(rot.max_factor_defect() <= 1e-8);
        assert!(orthogonality_defect(&rot.materialize()) <= 1e-7);
    }
}

#[test]
fn config_errors() {
    let mut rng = seeded(18);
    let base = random_base(&mut rng, 7, 7);
    assert!(matches!(
        AdapterState::init(&base, &AdapterConfig::new(Method::Oft, 2), &mut rng),
        Err(SodaError::Config(_))
    ));
    assert!(AdapterState::init(&base, &AdapterConfig::new(Method::Koft, 3), &mut rng).is_err());
    let base = random_base(&mut rng, 8, 8);
    let bad = AdapterConfig::new(Method::Koft, 2).with_kron_sizes(vec![3, 3]);
    assert!(AdapterState::init(&base, &bad, &mut rng).is_err());
    let ok = AdapterConfig::new(Method::Koft, 2).with_kron_sizes(vec![2, 4]);
    let st = AdapterState::init(&base, &ok, &mut rng).unwrap();
    assert_eq!(st.trainables.rotations()[1].rows(), 4);
}

#[test]
fn method_and_constraint_names_parse() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert_eq!("soda-svd".parse::<Method>().unwrap(), Method::SodaSvd);
    assert!("dora".parse::<Method>().is_err());
    for c in Constraint::ALL {
        assert_eq!(c.name().to_lowercase().parse::<Constraint>().unwrap(), c);
    }
}

#[test]
fn checkpoints_round_trip_for_every_method() {
    let mut rng = seeded(19);
    let base = random_base(&mut rng, 8, 8);
    for method in Method::ALL {
        let st = perturbed_state(&base, method, &mut rng);
        let ck = Checkpoint {
            shape: (8, 8),
            state: st,
        };
        let text = format_checkpoint(&ck);
        assert_eq!(parse_checkpoint(&text).unwrap(), ck, "{method}");
    }
}

#[test]
fn checkpoint_errors_are_located() {
    let text =
        "soda-checkpoint 1\nmethod SVDIFF\nshape 2 2\nrank 1\nconstraint RELU\ntensor delta\n1 2\n0.0 oops\nend\n";
    assert!(matches!(parse_checkpoint(text), Err(SodaError::Parse { line: 8, .. })));
    let text = "soda-checkpoint 1\nmethod SVDIFF\nshape 2 2\nrank 1\nconstraint RELU\ntensor delta\n1 3\n0 0 0\nend\n";
    assert!(matches!(parse_checkpoint(text), Err(SodaError::Shape { .. })));
    assert!(parse_checkpoint("not a checkpoint").is_err());
}
