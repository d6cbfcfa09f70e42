use super::*;
use proptest::prelude::*;
use rand::Rng;

fn cvar_map(w: usize, h: usize, res: f64, f: impl Fn(f64, f64) -> f64) -> GridMap {
    let mut map = GridMap::new(w, h, res, [0.0, 0.0]).unwrap();
    let data = (0..map.len())
        .map(|i| {
            let p = map.world_of(map.cell_at(i));
            f(p[0], p[1])
        })
        .collect();
    map.insert_layer(layers::CVAR, data).unwrap();
    map
}

fn straight_path(a: Point2, b: Point2) -> GeometricPath {
    GeometricPath {
        poses: vec![a, b],
        total_risk: 0.0,
        total_length: (b[0] - a[0]).hypot(b[1] - a[1]),
        cost: 0.0,
    }
}

fn test_mpc(horizon: usize) -> Mpc {
    let cfg = MpcConfig {
        horizon,
        ..MpcConfig::default()
    };
    Mpc::new(DynamicsModel::diff_drive(0.1), FootprintSpec::default(), cfg).unwrap()
}

fn level() -> RiskLevel {
    RiskLevel::new(0.5).unwrap()
}

#[test]
fn stopping_examples() {
    let mut model = DynamicsModel::diff_drive(0.5);
    model.a_max[0] = 1.0;
    let t = stopping_trajectory(&model, &State::diff_drive(0.0, 0.0, 0.0, 1.0), 4);
    let v: Vec<f64> = t.states.iter().map(State::v_x).collect();
    assert_eq!(v, vec![1.0, 0.5, 0.0, 0.0, 0.0]);

    let rest = State::diff_drive(1.0, 2.0, 0.3, 0.0);
    let t = stopping_trajectory(&model, &rest, 5);
    assert!(t.states.iter().all(|s| *s == rest));

    let g = DynamicsModel::general6(0.1, 0.0);
    let t = stopping_trajectory(&g, &State::general(0.0, 0.0, 0.0, -0.73, 0.41, 0.9), 30);
    for w in t.states.windows(2) {
        for i in 3..6 {
            assert!(w[1].0[i].abs() <= w[0].0[i].abs());
            assert!(w[1].0[i] * w[0].0[i] >= 0.0, "sign flip");
        }
    }
    assert_eq!(&t.final_state().0[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn velocity_bound_monotone_in_risk() {
    let mpc = test_mpc(5);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for i in 0..=100 {
        let b = mpc.velocity_bounds(i as f64 / 100.0);
        assert!(b.0 <= last.0 && b.1 <= last.1);
        assert!(b.0 >= mpc.cfg.gamma_v * mpc.model.v_max[0] - 1e-15);
        last = b;
    }
    assert_eq!(mpc.velocity_bounds(0.0), (mpc.model.v_max[0], mpc.model.v_max[2]));
}

#[test]
fn alpha_policy_examples() {
    let p = AlphaPolicy::default();
    let a = |v| RiskLevel::new(v).unwrap();
    let close = |x: RiskLevel, y: f64| (x.alpha() - y).abs() < 1e-12;
    assert!(close(adjust_alpha(a(0.9), PlanOutcome::Infeasible, 0, a(0.9), &p), 0.8));
    assert!(close(adjust_alpha(a(0.05), PlanOutcome::Infeasible, 0, a(0.9), &p), 0.05));
    assert!(close(adjust_alpha(a(0.5), PlanOutcome::Stuck, 0, a(0.9), &p), 0.4));
    assert!(close(adjust_alpha(a(0.5), PlanOutcome::Feasible, 10, a(0.9), &p), 0.6));
    assert!(close(adjust_alpha(a(0.5), PlanOutcome::Feasible, 3, a(0.9), &p), 0.5));

    let mut s = AlphaScheduler::new(a(0.9), p);
    s.update(PlanOutcome::Infeasible);
    s.update(PlanOutcome::Infeasible);
    assert!(close(s.current, 0.7));
    for _ in 0..9 {
        s.update(PlanOutcome::Feasible);
    }
    assert!(close(s.current, 0.7));
    s.update(PlanOutcome::Feasible);
    assert!(close(s.current, 0.8));
    for _ in 0..100 {
        s.update(PlanOutcome::Feasible);
    }
    assert!(close(s.current, 0.9));
}

#[test]
fn cvar_derivatives_constant_and_linear() {
    let map = cvar_map(20, 20, 0.1, |_, _| 0.3);
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let d = cvar_cost_derivatives(&scene, &State::diff_drive(1.0, 1.0, 0.0, 0.0)).unwrap();
    assert!(d.gradient.iter().all(|g| g.abs() < 1e-12));
    assert!(d.hessian.iter().flatten().all(|h| h.abs() < 1e-12));

    let slope = 0.2;
    let map = cvar_map(20, 20, 0.1, |x, _| 0.1 + slope * x);
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let d = cvar_cost_derivatives(&scene, &State::diff_drive(1.03, 0.77, 0.4, 0.0)).unwrap();
    assert!((d.gradient[0] - slope).abs() < 1e-9);
    assert!(d.gradient[1].abs() < 1e-9 && d.gradient[2] == 0.0);

    assert!(matches!(
        cvar_cost_derivatives(&scene, &State::diff_drive(-3.0, 0.0, 0.0, 0.0)),
        Err(Error::OutOfBounds(_))
    ));
}

proptest! {
    #[test]
    fn cvar_hessian_is_psd(x in 0.1f64..1.8, y in 0.1f64..1.8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let mut map = GridMap::new(20, 20, 0.1, [0.0, 0.0]).unwrap();
        map.insert_layer(layers::CVAR, vals).unwrap();
        let scene = Scene::new(&map, level(), 0.7, None).unwrap();
        let h = cvar_cost_derivatives(&scene, &State::diff_drive(x, y, 0.0, 0.0)).unwrap().hessian;
        prop_assert!((h[0][1] - h[1][0]).abs() == 0.0);
        let tr = h[0][0] + h[1][1];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let disc = (0.25 * (h[0][0] - h[1][1]).powi(2) + h[0][1] * h[0][1]).sqrt();
        prop_assert!(0.5 * tr - disc >= -1e-12 * (1.0 + tr.abs()), "min eig {} det {}", 0.5 * tr - disc, det);
    }
}

fn normal_map(nx: f64, ny: f64, nz: f64) -> GridMap {
    let mut map = cvar_map(10, 10, 0.2, |_, _| 0.0);
    map.add_layer(layers::NORMAL_X, nx);
    map.add_layer(layers::NORMAL_Y, ny);
    map.add_layer(layers::NORMAL_Z, nz);
    map
}

#[test]
fn orientation_examples() {
    let flat = normal_map(0.0, 0.0, 1.0);
    let o = orientation_constraint_rows(&flat, [1.0, 1.0, 0.7]).unwrap();
    assert_eq!(o.omega, [0.0, -0.0]);
    assert!(o.jacobian.iter().all(|r| r[0] == 0.0 && r[1] == 0.0));

    let t = 10f64.to_radians();
    let ramp = normal_map(-t.sin(), 0.0, t.cos());
    let o = orientation_constraint_rows(&ramp, [1.0, 1.0, 0.0]).unwrap();
    assert!((o.omega[0] + t).abs() < 1e-12 && o.omega[1].abs() < 1e-12);
    let o = orientation_constraint_rows(&ramp, [1.0, 1.0, std::f64::consts::FRAC_PI_2]).unwrap();
    assert!(o.omega[0].abs() < 1e-12);
    assert!((o.omega[1] + t).abs() < 1e-12);
}

/// Smooth terrain with normals, for derivative checks.
pub(crate) fn wavy_map() -> GridMap {
    let mut map = cvar_map(60, 60, 0.1, |_, _| 0.0);
    let elev = (0..map.len())
        .map(|i| {
            let p = map.world_of(map.cell_at(i));
            0.3 * (0.9 * p[0]).sin() * (0.7 * p[1]).cos()
        })
        .collect();
    map.insert_layer(layers::ELEVATION, elev).unwrap();
    map.compute_surface_normals(layers::ELEVATION).unwrap();
    map
}

/// True when `v` is at least `gap` away from every cell-center line, so a
/// small stencil stays inside one bilinear patch.
pub(crate) fn inside_patch(map: &GridMap, p: Point2, gap: f64) -> bool {
    let o = map.origin();
    (0..2).all(|a| {
        let f = ((p[a] - o[a]) / map.resolution()).rem_euclid(1.0);
        f > gap && f < 1.0 - gap
    })
}

#[test]
fn orientation_jacobian_matches_finite_differences() {
    let map = wavy_map();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 100 {
        let pose = [rng.random_range(0.5..5.4), rng.random_range(0.5..5.4), rng.random_range(-3.1..3.1)];
        if !inside_patch(&map, [pose[0], pose[1]], 1e-3) {
            continue;
        }
        let h = 1e-7;
        let rows = orientation_constraint_rows_with_step(&map, pose, h).unwrap();
        for axis in 0..3 {
            let mut a = pose;
            let mut b = pose;
            a[axis] += h;
            b[axis] -= h;
            let (wa, wb) = (orientation(&map, a).unwrap(), orientation(&map, b).unwrap());
            for i in 0..2 {
                let fd = (wa[i] - wb[i]) / (2.0 * h);
                let an = rows.jacobian[i][axis];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-2), "pose {pose:?} i {i} axis {axis}: {an} vs {fd}");
            }
        }
        checked += 1;
    }
}

#[test]
fn library_follower_wins_on_clear_corridor() {
    let map = cvar_map(100, 60, 0.1, |_, _| 0.0);
    let mpc = test_mpc(20);
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let x0 = State::diff_drive(1.0, 3.0, 0.0, 0.0);
    let path = straight_path([1.0, 3.0], [9.0, 3.0]);
    let reference = reference_trajectory(&mpc, &scene, &x0, &path);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lib = generate_trajectory_library(&mpc, &scene, &x0, &path, &reference, None, &mut rng);
    assert_eq!(lib.choose(None).kind, CandidateKind::Follower);
    assert!(lib.candidates.windows(2).all(|w| w[0].cost <= w[1].cost));
    assert!(lib.candidates.iter().any(|c| c.kind == CandidateKind::Braking));
    // exhaustive re-evaluation agrees with the stored scores
    for c in &lib.candidates {
        let e = mpc.evaluate(&scene, &c.trajectory, &reference);
        assert_eq!(e.cost, c.cost);
        assert_eq!(e.collisions, c.collisions);
        assert_eq!(mpc.model.rollout(x0, &c.trajectory.controls), c.trajectory);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let again = generate_trajectory_library(&mpc, &scene, &x0, &path, &reference, None, &mut rng);
    assert_eq!(lib, again);
}

#[test]
fn qp_zero_step_is_feasible_and_stationary_on_reference() {
    let map = cvar_map(100, 60, 0.1, |_, _| 0.0);
    let mut mpc = test_mpc(10);
    mpc.cfg.r = [0.0; 3];
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let x0 = State::diff_drive(1.0, 3.0, 0.0, 0.0);
    let path = straight_path([1.0, 3.0], [9.0, 3.0]);
    let reference = reference_trajectory(&mpc, &scene, &x0, &path);
    // controls that reproduce the reference exactly
    let controls: Vec<Control> = reference
        .windows(2)
        .map(|w| Control::diff_drive((w[1].v_x() - w[0].v_x()) / mpc.model.dt, 0.0))
        .collect();
    let cand = mpc.model.rollout(x0, &controls);
    for (a, b) in cand.states.iter().zip(&reference) {
        assert!((a.p_x() - b.p_x()).abs() < 1e-9 && (a.v_x() - b.v_x()).abs() < 1e-12);
    }
    let built = build_sqp_qp(&mpc, &scene, &cand, &reference).unwrap();
    let zero = vec![0.0; built.qp.n];
    let ax = built.qp.constraint_values(&zero);
    for i in 0..built.qp.m() {
        assert!(built.qp.l[i] <= ax[i] + 1e-12 && ax[i] <= built.qp.u[i] + 1e-12, "row {i}");
    }
    let sol = solve_qp(&built.qp, &QpSettings::default(), None).unwrap();
    assert_eq!(sol.status, QpStatus::Solved);
    assert!(built.qp.q.iter().all(|v| v.abs() < 1e-9));
    assert!(built.qp.objective(&sol.x).abs() <= 1e-9);
    assert!(sol.x.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn trust_region_rows_follow_eps_u() {
    let map = cvar_map(60, 60, 0.1, |_, _| 0.0);
    let mut mpc = test_mpc(6);
    mpc.cfg.eps_u = 0.1;
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let x0 = State::diff_drive(3.0, 3.0, 0.0, 0.2);
    let cand = mpc.model.rollout(x0, &vec![Control::diff_drive(0.0, 0.0); 6]);
    let reference = cand.states.clone();
    let built = build_sqp_qp(&mpc, &scene, &cand, &reference).unwrap();
    let lay = built.layout;
    for k in 0..6 {
        for j in 0..2 {
            let col = lay.u(k, j);
            let row = (0..built.qp.m())
                .find(|&r| {
                    let entries: Vec<_> = built.qp.a.triplets.iter().filter(|t| t.0 == r).collect();
                    entries.len() == 1 && entries[0].1 == col
                })
                .unwrap();
            assert_eq!((built.qp.l[row], built.qp.u[row]), (-0.1, 0.1));
        }
    }
}

#[test]
fn obstacle_rows_match_distance_oracle() {
    // lethal block ahead of the robot
    let map = cvar_map(80, 60, 0.1, |x, y| if (5.0..5.6).contains(&x) && (2.0..4.0).contains(&y) { 1.0 } else { 0.0 });
    let mut mpc = test_mpc(10);
    mpc.cfg.activation_distance = 1.5;
    mpc.cfg.obstacles_per_step = 16;
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    assert!(!scene.obstacles.is_empty());
    let x0 = State::diff_drive(2.5, 3.0, 0.0, 1.0);
    let cand = mpc.model.rollout(x0, &vec![Control::diff_drive(0.5, 0.0); 10]);
    let built = build_sqp_qp(&mpc, &scene, &cand, &cand.states).unwrap();
    for k in 1..=10 {
        let fp = footprint_at(&mpc.footprint, cand.states[k].pose());
        let expected = scene
            .obstacles
            .iter()
            .filter(|o| signed_distance(&fp, &o.polygon) <= 1.5)
            .count();
        assert_eq!(built.sd_rows[k], expected, "step {k}");
    }
    assert!(built.sd_rows[10] >= 1);
}

#[test]
fn qp_linearization_predicts_rollout() {
    let map = cvar_map(100, 100, 0.1, |x, y| 0.2 + 0.1 * (x * 0.8).sin() * (y * 0.6).cos());
    let mut mpc = test_mpc(15);
    mpc.cfg.lambda = 5.0;
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let x0 = State::diff_drive(3.0, 5.0, 0.3, 0.4);
    let cand = mpc.model.rollout(x0, &vec![Control::diff_drive(0.2, 0.3); 15]);
    let path = straight_path([3.0, 5.0], [8.0, 6.0]);
    let reference = reference_trajectory(&mpc, &scene, &x0, &path);
    let built = build_sqp_qp(&mpc, &scene, &cand, &reference).unwrap();
    let sol = solve_qp(&built.qp, &mpc.cfg.qp, None).unwrap();
    let du = built.layout.controls(&sol.x);
    let dx = built.layout.states(&sol.x);
    for gamma in [1e-2, 1e-3] {
        let controls: Vec<Control> = cand
            .controls
            .iter()
            .zip(&du)
            .map(|(u, d)| Control([u.0[0] + gamma * d.0[0], u.0[1] + gamma * d.0[1], 0.0]))
            .collect();
        let rolled = mpc.model.rollout(x0, &controls);
        let mut worst: f64 = 0.0;
        for k in 0..=15 {
            for i in 0..4 {
                let pred = cand.states[k].0[i] + gamma * dx[k].0[i];
                let d = if i == 2 { wrap_angle(rolled.states[k].0[i] - pred) } else { rolled.states[k].0[i] - pred };
                worst = worst.max(d.abs());
            }
        }
        // second-order remainder
        assert!(worst < 50.0 * gamma * gamma, "gamma {gamma}: {worst}");
    }
}

#[test]
fn linesearch_cases() {
    let map = cvar_map(100, 60, 0.1, |_, _| 0.0);
    let mpc = test_mpc(10);
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let x0 = State::diff_drive(2.0, 3.0, 0.0, 0.0);
    let path = straight_path([2.0, 3.0], [8.0, 3.0]);
    let reference = reference_trajectory(&mpc, &scene, &x0, &path);
    let cand = mpc.model.rollout(x0, &vec![Control::default(); 10]);
    let base = mpc.evaluate(&scene, &cand, &reference);

    let zero = vec![Control::default(); 10];
    let out = linesearch(&mpc, &scene, &cand, base, &zero, &reference, 1.0).unwrap();
    assert!(out.accepted && out.trials == 1 && out.evaluation.cost == base.cost);

    // accelerating toward the moving reference is a descent direction
    let push = vec![Control::diff_drive(0.5, 0.0); 10];
    let out = linesearch(&mpc, &scene, &cand, base, &push, &reference, 1.0).unwrap();
    assert!(out.accepted && out.evaluation.cost < base.cost);

    let bad = vec![Control::default(); 3];
    assert!(linesearch(&mpc, &scene, &cand, base, &bad, &reference, 1.0).is_err());
}

#[test]
fn linesearch_rejects_steps_into_a_wall() {
    let map = cvar_map(100, 60, 0.1, |x, _| if x > 2.6 { 1.0 } else { 0.0 });
    let mut mpc = test_mpc(10);
    mpc.cfg.linesearch.gamma_min = 0.25;
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let x0 = State::diff_drive(2.0, 3.0, 0.0, 0.0);
    let reference = vec![State::diff_drive(6.0, 3.0, 0.0, 0.0); 11];
    let cand = mpc.model.rollout(x0, &vec![Control::default(); 10]);
    let base = mpc.evaluate(&scene, &cand, &reference);
    assert_eq!(base.collisions, 0);
    let into = vec![Control::diff_drive(10.0, 0.0); 10];
    let out = linesearch(&mpc, &scene, &cand, base, &into, &reference, 1.0).unwrap();
    for gamma in [1.0, 0.5, 0.25] {
        let c: Vec<Control> = into.iter().map(|u| mpc.model.clamp_control(Control([gamma * u.0[0], 0.0, 0.0]))).collect();
        assert!(mpc.evaluate(&scene, &mpc.model.rollout(x0, &c), &reference).collisions > 0);
    }
    assert!(!out.accepted);
    assert_eq!(out.gamma_next, 0.25);
}

fn audit_sd(mpc: &Mpc, scene: &Scene, t: &Trajectory) -> f64 {
    t.states[1..]
        .iter()
        .map(|x| scene.min_signed_distance(&footprint_at(&mpc.footprint, x.pose())))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn replan_tracks_clear_corridor() {
    let map = cvar_map(100, 60, 0.1, |_, _| 0.0);
    let mpc = test_mpc(20);
    let x0 = State::diff_drive(1.0, 3.0, 0.0, 0.0);
    let path = straight_path([1.0, 3.0], [9.0, 3.0]);
    let res = mpc.replan(&x0, None, &path, &map, 3).unwrap();
    assert!(res.feasible);
    assert!(res.stats.sqp_iterations <= 3);
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    let reference = reference_trajectory(&mpc, &scene, &x0, &path);
    for (x, r) in res.trajectory.states.iter().zip(&reference) {
        let e = (x.p_x() - r.p_x()).hypot(x.p_y() - r.p_y());
        assert!(e < 0.1, "tracking error {e}");
    }
    assert_eq!(mpc.model.rollout(x0, &res.trajectory.controls), res.trajectory);
    assert!(res.stats.cost_history.windows(2).all(|w| w[1] <= w[0]));
    let again = mpc.replan(&x0, None, &path, &map, 3).unwrap();
    assert_eq!(res.trajectory, again.trajectory);
    assert_eq!(res.stats.cost_history, again.stats.cost_history);
}

#[test]
fn replan_stops_before_wall() {
    let map = cvar_map(100, 60, 0.1, |x, _| if (4.0..4.5).contains(&x) { 1.0 } else { 0.0 });
    let mpc = test_mpc(20);
    let x0 = State::diff_drive(2.0, 3.0, 0.0, 0.8);
    let path = straight_path([2.0, 3.0], [9.0, 3.0]);
    let res = mpc.replan(&x0, None, &path, &map, 5).unwrap();
    let scene = Scene::new(&map, level(), 0.7, None).unwrap();
    assert!(res.feasible);
    assert!(audit_sd(&mpc, &scene, &res.trajectory) >= -1e-3);
    let b = mpc.model.control_bounds();
    assert!(res.trajectory.controls.iter().all(|u| u.0[0].abs() <= b[0] && u.0[1].abs() <= b[1]));
}

#[test]
fn replan_all_blocked_returns_braking() {
    let map = cvar_map(60, 60, 0.1, |_, _| 1.0);
    let mpc = test_mpc(10);
    let x0 = State::diff_drive(3.0, 3.0, 0.0, 0.5);
    let path = straight_path([3.0, 3.0], [5.0, 3.0]);
    let res = mpc.replan(&x0, None, &path, &map, 0).unwrap();
    assert!(!res.feasible);
    assert_eq!(res.source, PlanSource::Stopping);
    assert_eq!(res.trajectory, stopping_trajectory(&mpc.model, &x0, 10));
}

#[test]
fn replan_rejects_bad_inputs() {
    let map = cvar_map(20, 20, 0.1, |_, _| 0.0);
    let mpc = test_mpc(5);
    let empty = GeometricPath {
        poses: vec![],
        total_risk: 0.0,
        total_length: 0.0,
        cost: 0.0,
    };
    let x0 = State::diff_drive(1.0, 1.0, 0.0, 0.0);
    assert!(matches!(mpc.replan(&x0, None, &empty, &map, 0), Err(Error::InvalidArgument(_))));
    let off = State::diff_drive(10.0, 1.0, 0.0, 0.0);
    assert!(matches!(
        mpc.replan(&off, None, &straight_path([1.0, 1.0], [1.5, 1.0]), &map, 0),
        Err(Error::OutOfBounds(_))
    ));
}

#[test]
fn warm_replan_reuses_previous_solution() {
    let map = cvar_map(100, 60, 0.1, |x, y| 0.1 * (x + y).sin().abs());
    let mpc = test_mpc(15);
    let path = straight_path([1.0, 3.0], [9.0, 3.5]);
    let mut x = State::diff_drive(1.0, 3.0, 0.0, 0.0);
    let mut prev: Option<ReplanResult> = None;
    for cycle in 0..5 {
        let res = mpc.replan(&x, prev.as_ref(), &path, &map, cycle).unwrap();
        assert!(res.feasible);
        x = res.trajectory.states[1];
        prev = Some(res);
    }
    assert!(x.p_x() > 1.0);
}
