mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

use common::{add_control_points, random_trajectory, rng, LinearFactor};
use splinevio::factors::{PoseFactor, PriorFactor};
use splinevio::lie;
use splinevio::optimizer::{marginalize_schur, solve, BlockKind, ParamKey, Problem, SolverOptions, Termination};

#[derive(Clone)]
struct Term {
    vars: Vec<usize>,
    a: Vec<DMatrix<f64>>,
    b: DVector<f64>,
}

fn random_term(r: &mut impl Rng, vars: &[usize], dim: usize, m: usize) -> Term {
    Term {
        vars: vars.to_vec(),
        a: vars.iter().map(|_| DMatrix::from_fn(m, dim, |_, _| r.gen_range(-1.0..1.0))).collect(),
        b: DVector::from_fn(m, |_, _| r.gen_range(-1.0..1.0)),
    }
}

fn build(values: &[Vec<f64>], vars: &[usize], terms: &[Term]) -> Problem {
    let mut p = Problem::new();
    for &v in vars {
        p.add_block(ParamKey::Aux(v as u64), BlockKind::Vector(values[v].len()), values[v].clone());
    }
    for s in terms {
        let blocks = s.vars.iter().map(|&v| p.block_id(&ParamKey::Aux(v as u64)).unwrap()).collect();
        p.add_factor(Box::new(LinearFactor { blocks, a: s.a.clone(), b: s.b.clone() })).unwrap();
    }
    p
}

/// Dense `H` over `vars` (in order) built independently of the solver.
fn dense_h(terms: &[Term], vars: &[usize], dim: usize) -> DMatrix<f64> {
    let n = vars.len() * dim;
    let mut h = DMatrix::zeros(n, n);
    for s in terms {
        let mut j = DMatrix::zeros(s.b.len(), n);
        for (v, a) in s.vars.iter().zip(&s.a) {
            let c = vars.iter().position(|x| x == v).unwrap() * dim;
            j.view_mut((0, c), (s.b.len(), dim)).copy_from(a);
        }
        h += j.transpose() * &j;
    }
    h
}

fn exact() -> SolverOptions {
    SolverOptions { initial_lambda: 0.0, max_iterations: 10, ..SolverOptions::default() }
}

#[test]
fn one_dimensional_quadratic() {
    let mut p = Problem::new();
    let x = p.add_block(ParamKey::Aux(0), BlockKind::Vector(1), vec![0.0]);
    p.add_factor(Box::new(LinearFactor {
        blocks: vec![x],
        a: vec![DMatrix::identity(1, 1)],
        b: DVector::from_element(1, 5.0),
    }))
    .unwrap();
    let rep = solve(&mut p, &SolverOptions::default()).unwrap();
    assert!((p.value(x)[0] - 5.0).abs() < 1e-10, "x = {}", p.value(x)[0]);
    assert!(rep.final_cost <= rep.initial_cost);
}

#[test]
fn zero_residual_start_is_a_no_op() {
    let mut p = Problem::new();
    let x = p.add_block(ParamKey::Aux(0), BlockKind::Vector(1), vec![5.0]);
    p.add_factor(Box::new(LinearFactor {
        blocks: vec![x],
        a: vec![DMatrix::identity(1, 1)],
        b: DVector::from_element(1, 5.0),
    }))
    .unwrap();
    let rep = solve(&mut p, &SolverOptions::default()).unwrap();
    assert!(rep.iterations <= 1);
    assert_eq!(rep.final_cost, 0.0);
    assert_eq!(rep.termination, Termination::ZeroCost);
    assert_eq!(p.value(x), &[5.0]);
}

#[test]
fn gauss_newton_solves_linear_problem_in_one_step() {
    let mut r = rng(3);
    let values: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let terms: Vec<Term> = (0..8)
        .map(|i| random_term(&mut r, &[i % 4, (i + 1) % 4], 3, 4))
        .collect();
    let vars = [0, 1, 2, 3];
    let mut p = build(&values, &vars, &terms);
    let rep = solve(&mut p, &exact()).unwrap();
    assert_eq!(rep.accepted_steps, 1, "{rep:?}");

    let h = dense_h(&terms, &vars, 3);
    let mut g = DVector::zeros(12);
    for s in &terms {
        let mut j = DMatrix::zeros(4, 12);
        for (v, a) in s.vars.iter().zip(&s.a) {
            j.view_mut((0, v * 3), (4, 3)).copy_from(a);
        }
        g += j.transpose() * &s.b;
    }
    let x = h.cholesky().unwrap().solve(&g);
    for v in 0..4 {
        for c in 0..3 {
            assert!((p.value(v)[c] - x[v * 3 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn accepted_steps_never_increase_cost() {
    let mut r = rng(11);
    let truth = random_trajectory(&mut r, 8, 0.0, 0.2, 0.3, 0.4);
    let mut p = Problem::new();
    add_control_points(&mut p, &truth);
    for k in 0..8 {
        let id = p.block_id(&ParamKey::RotCp(k)).unwrap();
        let v = BlockKind::RotationCp.plus(p.value(id), &[0.2, -0.1, 0.3]);
        p.set_value(id, v);
    }
    let (t0, t1) = truth.domain();
    let grid = *truth.grid();
    for i in 0..50 {
        let t = t0 + (t1 - t0) * i as f64 / 49.0;
        let (rot, pos) = truth.eval_pose(t).unwrap();
        p.add_factor(Box::new(PoseFactor::new(&p, &grid, t, rot, pos, 1.0, 1.0).unwrap())).unwrap();
    }
    let mut last = p.cost().unwrap();
    for _ in 0..5 {
        let rep = solve(&mut p, &SolverOptions { max_iterations: 1, ..SolverOptions::default() }).unwrap();
        assert!(rep.final_cost <= last + 1e-15);
        last = rep.final_cost;
    }
}

#[test]
fn spline_fit_recovers_sampled_poses() {
    let mut r = rng(5);
    let truth = random_trajectory(&mut r, 8, 1.0, 0.25, 0.3, 0.5);
    let mut p = Problem::new();
    add_control_points(&mut p, &truth);
    for k in 0..8 {
        let rid = p.block_id(&ParamKey::RotCp(k)).unwrap();
        let pid = p.block_id(&ParamKey::PosCp(k)).unwrap();
        let dr = common::rand_vec(&mut r, 0.1);
        let rv = BlockKind::RotationCp.plus(p.value(rid), dr.as_slice());
        p.set_value(rid, rv);
        let pv: Vec<f64> = p.value(pid).iter().map(|v| v + r.gen_range(-0.1..0.1)).collect();
        p.set_value(pid, pv);
    }
    let (t0, t1) = truth.domain();
    let grid = *truth.grid();
    let mut samples = Vec::new();
    for i in 0..50 {
        let t = t0 + (t1 - t0) * i as f64 / 49.0;
        let (rot, pos) = truth.eval_pose(t).unwrap();
        samples.push((t, rot, pos));
        p.add_factor(Box::new(PoseFactor::new(&p, &grid, t, rot, pos, 1.0, 1.0).unwrap())).unwrap();
    }
    let rep = solve(&mut p, &SolverOptions { max_iterations: 50, ..SolverOptions::default() }).unwrap();
    assert!(rep.final_cost < 1e-16, "{rep:?}");

    let cps = (0..8)
        .map(|k| {
            let rot = nalgebra::Matrix3::from_column_slice(p.value_by_key(&ParamKey::RotCp(k)).unwrap());
            let pos = Vector3::from_column_slice(p.value_by_key(&ParamKey::PosCp(k)).unwrap());
            splinevio::spline::ControlPoint::new(rot, pos)
        })
        .collect();
    let fit = splinevio::spline::Trajectory::new(1.0, 0.25, cps, truth.extrinsic).unwrap();
    for (t, rot, pos) in samples {
        let (fr, fp) = fit.eval_pose(t).unwrap();
        assert!(lie::log_unchecked(&(rot.transpose() * fr)).norm() < 1e-7);
        assert!((fp - pos).norm() < 1e-7);
    }
}

/// Chain x0 - x1 - x2 with unit-information factors.
fn chain_terms() -> Vec<Term> {
    let i = || DMatrix::<f64>::identity(2, 2);
    vec![
        Term { vars: vec![0], a: vec![i()], b: DVector::from_vec(vec![1.0, -1.0]) },
        Term { vars: vec![0, 1], a: vec![-i(), i()], b: DVector::from_vec(vec![0.5, 0.25]) },
        Term { vars: vec![1, 2], a: vec![-i(), i()], b: DVector::from_vec(vec![-0.3, 0.7]) },
    ]
}

#[test]
fn chain_marginalization_matches_dense_marginal() {
    let terms = chain_terms();
    let values = vec![vec![0.1, 0.2], vec![-0.4, 0.3], vec![1.0, 2.0]];
    // the sub-problem holds every factor touching x0
    let sub = build(&values, &[0, 1], &terms[..2]);
    let prior = marginalize_schur(&sub, &[sub.block_id(&ParamKey::Aux(0)).unwrap()]).unwrap();
    assert_eq!(prior.keys, vec![ParamKey::Aux(1)]);

    let h = dense_h(&terms, &[0, 1, 2], 2);
    let cov = h.clone().try_inverse().unwrap();
    let marginal_info = cov.view((2, 2), (4, 4)).into_owned().try_inverse().unwrap();
    let mut with_prior = dense_h(&terms[2..], &[1, 2], 2);
    let mut top = with_prior.view_mut((0, 0), (2, 2));
    top += prior.information();
    assert!((with_prior - marginal_info).norm() < 1e-10);
}

#[test]
fn sqrt_information_reconstructs_schur_complement() {
    let mut r = rng(17);
    let values: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let terms: Vec<Term> = vec![
        random_term(&mut r, &[0], 3, 3),
        random_term(&mut r, &[0, 1], 3, 4),
        random_term(&mut r, &[0, 2], 3, 4),
        random_term(&mut r, &[1, 3], 3, 3),
        random_term(&mut r, &[1, 2, 4], 3, 5),
    ];
    let vars = [0, 1, 2, 3, 4];
    let sub = build(&values, &vars, &terms);
    let marg: Vec<_> = [0, 1].iter().map(|&v| sub.block_id(&ParamKey::Aux(v)).unwrap()).collect();
    let prior = marginalize_schur(&sub, &marg).unwrap();

    let h = dense_h(&terms, &vars, 3);
    let hmm = h.view((0, 0), (6, 6)).into_owned();
    let hrm = h.view((6, 0), (9, 6)).into_owned();
    let hrr = h.view((6, 6), (9, 9)).into_owned();
    let s = &hrr - &hrm * hmm.try_inverse().unwrap() * hrm.transpose();
    assert!((prior.information() - &s).norm() < 1e-9);
    for i in 0..prior.sqrt_info.nrows() {
        assert!(prior.sqrt_info[(i, i)] >= 0.0);
        for j in 0..i {
            assert_eq!(prior.sqrt_info[(i, j)], 0.0);
        }
    }
}

#[test]
fn prior_plus_remaining_factors_preserve_minimizer() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let values: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let terms: Vec<Term> = vec![
            random_term(&mut r, &[0], 2, 2),
            random_term(&mut r, &[0, 1], 2, 3),
            random_term(&mut r, &[1, 2], 2, 3),
            random_term(&mut r, &[0, 3], 2, 2),
            random_term(&mut r, &[2, 3], 2, 3),
            random_term(&mut r, &[3, 4], 2, 3),
            random_term(&mut r, &[4, 5], 2, 3),
            random_term(&mut r, &[5], 2, 2),
            random_term(&mut r, &[1, 5], 2, 2),
        ];
        let all = [0, 1, 2, 3, 4, 5];
        let mut full = build(&values, &all, &terms);
        solve(&mut full, &exact()).unwrap();

        let marg_vars = [0usize, 1];
        let (touching, rest): (Vec<Term>, Vec<Term>) =
            terms.iter().cloned().partition(|s| s.vars.iter().any(|v| marg_vars.contains(v)));
        let sub_vars: Vec<usize> = all.iter().copied().filter(|v| touching.iter().any(|s| s.vars.contains(v))).collect();
        let sub = build(&values, &sub_vars, &touching);
        let marg: Vec<_> = marg_vars.iter().map(|&v| sub.block_id(&ParamKey::Aux(v as u64)).unwrap()).collect();
        let prior = Arc::new(marginalize_schur(&sub, &marg).unwrap());

        let mut reduced = build(&values, &[2, 3, 4, 5], &rest);
        let bound = prior.bind(&reduced).unwrap();
        reduced.add_factor(Box::new(bound)).unwrap();
        solve(&mut reduced, &exact()).unwrap();
        for v in [2u64, 3, 4, 5] {
            let a = full.value_by_key(&ParamKey::Aux(v)).unwrap();
            let b = reduced.value_by_key(&ParamKey::Aux(v)).unwrap();
            for c in 0..2 {
                assert!((a[c] - b[c]).abs() < 1e-9, "seed {seed} var {v}: {a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn zero_coupling_marginalization_keeps_untouched_information() {
    let mut r = rng(21);
    let values = vec![vec![0.3, -0.2], vec![1.0, 0.5]];
    let terms = vec![random_term(&mut r, &[0], 2, 3), random_term(&mut r, &[1], 2, 3)];
    let sub = build(&values, &[0, 1], &terms);
    let prior = marginalize_schur(&sub, &[sub.block_id(&ParamKey::Aux(0)).unwrap()]).unwrap();
    let expect = dense_h(&terms[1..], &[1], 2);
    assert!((prior.information() - expect).norm() < 1e-12);
}

#[test]
fn unobserved_landmark_gives_finite_prior() {
    let mut p = Problem::new();
    let x = p.add_block(ParamKey::Aux(0), BlockKind::Vector(1), vec![0.5]);
    let l = p.add_block(ParamKey::InvDepth(7), BlockKind::InverseDepth, vec![0.2]);
    // the landmark column is identically zero
    p.add_factor(Box::new(LinearFactor {
        blocks: vec![x, l],
        a: vec![DMatrix::identity(1, 1), DMatrix::zeros(1, 1)],
        b: DVector::from_element(1, 1.0),
    }))
    .unwrap();
    let prior = marginalize_schur(&p, &[l]).unwrap();
    assert!(prior.sqrt_info.iter().all(|v| v.is_finite()));
    assert!((prior.information()[(0, 0)] - 1.0).abs() < 1e-12);
}

#[test]
fn prior_at_linearization_point_returns_offset() {
    let mut r = rng(8);
    let rot = lie::exp(&common::rand_vec(&mut r, 1.0));
    let prior = PriorFactor {
        keys: vec![ParamKey::RotCp(0), ParamKey::Aux(1)],
        kinds: vec![BlockKind::RotationCp, BlockKind::Vector(2)],
        x0: vec![rot.as_slice().to_vec(), vec![1.0, 2.0]],
        sqrt_info: DMatrix::from_fn(5, 5, |i, j| if j >= i { 1.0 + (i + j) as f64 } else { 0.0 }),
        offset: DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]),
    };
    let values: Vec<&[f64]> = prior.x0.iter().map(|v| v.as_slice()).collect();
    assert_eq!(prior.residual(&values, None).unwrap(), prior.offset);

    let empty = PriorFactor::empty();
    assert_eq!(empty.residual(&[], None).unwrap().len(), 0);
    assert!(prior.residual(&values[..1], None).is_err());
}

#[test]
fn prior_jacobian_matches_finite_differences() {
    let mut r = rng(9);
    let mut p = Problem::new();
    let rot = lie::exp(&common::rand_vec(&mut r, 1.0));
    p.add_block(ParamKey::RotCp(0), BlockKind::RotationCp, rot.as_slice().to_vec());
    p.add_block(ParamKey::Aux(1), BlockKind::Vector(2), vec![0.3, 0.4]);
    let prior = Arc::new(PriorFactor {
        keys: vec![ParamKey::RotCp(0), ParamKey::Aux(1)],
        kinds: vec![BlockKind::RotationCp, BlockKind::Vector(2)],
        x0: vec![lie::exp(&common::rand_vec(&mut r, 1.0)).as_slice().to_vec(), vec![1.0, 2.0]],
        sqrt_info: DMatrix::from_fn(5, 5, |i, j| if j >= i { 1.0 + (i * j) as f64 } else { 0.0 }),
        offset: DVector::zeros(5),
    });
    let bound = prior.bind(&p).unwrap();
    assert!(common::factor_jacobian_error(&p, &bound) < 1e-6);
}

#[test]
fn prior_normal_terms_equal_jacobian_products() {
    use splinevio::optimizer::Factor;
    let mut r = rng(10);
    for _ in 0..20 {
        let mut p = Problem::new();
        let rots: Vec<_> = (0..2).map(|_| lie::exp(&common::rand_vec(&mut r, 1.0))).collect();
        p.add_block(ParamKey::RotCp(0), BlockKind::RotationCp, rots[0].as_slice().to_vec());
        p.add_block(ParamKey::PosCp(0), BlockKind::PositionCp, common::rand_vec(&mut r, 1.0).as_slice().to_vec());
        p.add_block(ParamKey::RotCp(1), BlockKind::RotationCp, rots[1].as_slice().to_vec());
        p.add_block(ParamKey::InvDepth(4), BlockKind::InverseDepth, vec![0.2]);
        let n = 10;
        let prior = Arc::new(PriorFactor {
            keys: vec![ParamKey::RotCp(0), ParamKey::PosCp(0), ParamKey::RotCp(1), ParamKey::InvDepth(4)],
            kinds: vec![BlockKind::RotationCp, BlockKind::PositionCp, BlockKind::RotationCp, BlockKind::InverseDepth],
            x0: vec![
                lie::exp(&common::rand_vec(&mut r, 1.0)).as_slice().to_vec(),
                common::rand_vec(&mut r, 1.0).as_slice().to_vec(),
                lie::exp(&common::rand_vec(&mut r, 1.0)).as_slice().to_vec(),
                vec![0.25],
            ],
            sqrt_info: DMatrix::from_fn(n, n, |i, j| if j >= i { r.gen_range(0.5..2.0) } else { 0.0 }),
            offset: DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0)),
        });
        let bound = prior.bind(&p).unwrap();
        let values: Vec<&[f64]> = bound.blocks().iter().map(|&b| p.value(b)).collect();
        let mut jacs: Vec<DMatrix<f64>> = p_kinds(&prior).iter().map(|&m| DMatrix::zeros(n, m)).collect();
        let res = bound.evaluate(&values, Some(&mut jacs)).unwrap();
        let j = DMatrix::from_fn(n, n, |row, col| {
            let (mut b, mut c) = (0, col);
            while c >= jacs[b].ncols() {
                c -= jacs[b].ncols();
                b += 1;
            }
            jacs[b][(row, c)]
        });
        let nt = bound.normal_terms(&values).expect("prior provides normal terms").unwrap();
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &res;
        assert!((&nt.jtj - &jtj).norm() < 1e-10 * jtj.norm(), "{}", (&nt.jtj - &jtj).norm());
        assert!((&nt.jtr - &jtr).norm() < 1e-10 * (1.0 + jtr.norm()));
        assert!((nt.squared_norm - res.norm_squared()).abs() < 1e-12 * (1.0 + res.norm_squared()));
    }
}

fn p_kinds(prior: &PriorFactor) -> Vec<usize> {
    prior.kinds.iter().map(|k| k.tangent_dim()).collect()
}
