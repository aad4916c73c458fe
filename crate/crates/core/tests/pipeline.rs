use asc_core::costmap::*;
use asc_core::driver::*;
use asc_core::dynamics::*;
use asc_core::solver::*;
use asc_core::Error;
use std::sync::OnceLock;

struct Maps {
    plain: CostMap<f64>,
    penalized: CostMap<f64>,
}

fn maps() -> &'static Maps {
    static MAPS: OnceLock<Maps> = OnceLock::new();
    MAPS.get_or_init(|| {
        let params = DynamicsParams::default();
        let grid = StateGrid::uniform(&params, 57, 55).unwrap();
        let controls = ControlGrid::uniform(&params, 23).unwrap();
        let model = DriverModel::naughty_child(&grid, default_demand_values(&params, 9), 3.0).unwrap();
        let t = TerminalSpec::one_cell(&grid);
        let solve = |cost| solve_map(&grid, &controls, &model, &params, cost, t, Default::default()).unwrap();
        Maps { plain: solve(CostSpec::plain()), penalized: solve(CostSpec::penalized(1000.0)) }
    })
}

#[test]
fn save_load_is_exact() {
    let m = &maps().plain;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.json");
    m.save(&path).unwrap();
    let back = CostMap::<f64>::load(&path).unwrap();
    assert_eq!(&back, m);
    let again = dir.path().join("again.json");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn load_rejects_truncated_file() {
    let text = maps().plain.to_json().unwrap();
    let cut = &text[..text.len() / 2];
    assert!(matches!(CostMap::<f64>::from_json(cut), Err(Error::Malformed(_))));
}

#[test]
fn lookup_is_exact_at_nodes() {
    let m = &maps().plain;
    for node in (0..m.grid.len()).step_by(37) {
        let s = m.grid.state(node);
        assert!((m.lookup(s.x, s.v).unwrap() - m.j[node]).abs() <= 1e-12);
    }
}

#[test]
fn time_shrinks_toward_the_obstacle_at_rest() {
    let m = &maps().plain;
    let iv = m.grid.v_values.iter().position(|v| v.abs() < 1e-12).unwrap();
    for ix in 1..m.grid.nx() {
        assert!(m.j[m.grid.node(ix, iv)] <= m.j[m.grid.node(ix - 1, iv)] + 1e-9, "column {ix}");
    }
}

#[test]
fn mask_invariants() {
    let m = &maps().penalized;
    let mask = feasibility_region(m, None).unwrap();
    for node in 0..m.grid.len() {
        if m.is_terminal(node) {
            assert!(mask.feasible[node]);
        } else if is_penalty_node(&m.grid, node) {
            assert!(!mask.feasible[node]);
        }
    }
    assert!(matches!(feasibility_region(&maps().plain, None), Err(Error::InvalidParam(_))));
}

#[test]
fn default_boundary_is_monotone_and_stops_at_the_obstacle() {
    let Maps { plain, penalized } = maps();
    let mask = feasibility_region(penalized, None).unwrap();
    let b = safe_velocity_boundary(plain, &mask, DEFAULT_THRESHOLD).unwrap();
    b.validate().unwrap();
    assert_eq!(b.v_b[0], b.params.v_max);
    assert!(*b.v_b.last().unwrap() <= plain.terminal.v_tol);
    let text = b.to_json().unwrap();
    assert_eq!(SafeBoundary::<f64>::from_json(&text).unwrap(), b);
}

#[test]
fn single_precision_pipeline() {
    let params = DynamicsParams::<f32>::default();
    // coarser grids let nearest-node snapping freeze the motion
    let grid = StateGrid::uniform(&params, 57, 55).unwrap();
    let controls = ControlGrid::uniform(&params, 23).unwrap();
    let model = DriverModel::blind(&grid, default_demand_values(&params, 9)).unwrap();
    let t = TerminalSpec::one_cell(&grid);
    let opts = PolicyIterationOptions { eval: EvalOptions { tol: 1e-4, max_sweeps: 10_000 }, ..Default::default() };
    let plain = solve_map(&grid, &controls, &model, &params, CostSpec::plain(), t, opts).unwrap();
    let pen = solve_map(&grid, &controls, &model, &params, CostSpec::penalized(1000.0), t, opts).unwrap();
    let mask = feasibility_region(&pen, None).unwrap();
    let b = safe_velocity_boundary(&plain, &mask, 1.5).unwrap();
    b.validate().unwrap();
}
