use super::*;
use crate::diffusion::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::NoiseSchedule;
use crate::geometry::{Aabb, Intrinsics};
use crate::image::ImageBuf;
use crate::scene::{GaussianPrimitive, Origin};
use crate::semantic::EmbeddingProvider;
use crate::world::{AgentState, Furniture, Room, Sensor, World, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> OccupancyGrid {
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, [n, n], CellState::Free);
    for c in g.cells.iter_mut() {
        let r: f64 = rng.gen();
        *c = if r < 0.25 {
            CellState::Occupied
        } else if r < 0.5 {
            CellState::Unknown
        } else {
            CellState::Free
        };
    }
    g
}

/// Plain O(n²) uniform-cost search.
fn ucs_cost(g: &OccupancyGrid, start: Cell, goal: Cell, mult: f64) -> Option<f64> {
    let n = g.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[g.index(start)] = 0.0;
    loop {
        let mut best = None;
        for i in 0..n {
            if !done[i] && dist[i].is_finite() && best.is_none_or(|b: usize| dist[i] < dist[b]) {
                best = Some(i);
            }
        }
        let i = best?;
        if i == g.index(goal) {
            return Some(dist[i]);
        }
        done[i] = true;
        for nb in g.neighbors4(g.cell_at(i)) {
            let j = g.index(nb);
            let w = match g.cells[j] {
                CellState::Free => 1.0,
                CellState::Unknown => mult,
                CellState::Occupied => continue,
            };
            if dist[i] + w < dist[j] {
                dist[j] = dist[i] + w;
            }
        }
    }
}

#[test]
fn astar_matches_uniform_cost_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let mut g = random_grid(&mut rng, 32);
        let s = [rng.gen_range(0..32), rng.gen_range(0..32)];
        let t = [rng.gen_range(0..32), rng.gen_range(0..32)];
        g.set(s, CellState::Free);
        let got = astar(&g, s, t, 2.0);
        let want = ucs_cost(&g, s, t, 2.0);
        assert_eq!(got.as_ref().map(|p| p.1), want);
        if let Some((path, cost)) = got {
            assert_eq!(path[0], s);
            assert_eq!(*path.last().unwrap(), t);
            let mut c = 0.0;
            for w in path.windows(2) {
                assert_eq!(w[0][0].abs_diff(w[1][0]) + w[0][1].abs_diff(w[1][1]), 1);
                c += if g.get(w[1]) == CellState::Unknown { 2.0 } else { 1.0 };
            }
            assert_eq!(c, cost);
        }
    }
}

#[test]
fn astar_corridor_and_enclosure() {
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, [6, 1], CellState::Free);
    let (path, cost) = astar(&g, [0, 0], [5, 0], 2.0).unwrap();
    assert_eq!(path.len(), 6);
    assert_eq!(cost, 5.0);
    g.set([4, 0], CellState::Occupied);
    assert!(astar(&g, [0, 0], [5, 0], 2.0).is_none());
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, [5, 5], CellState::Free);
    for c in [[1, 2], [3, 2], [2, 1], [2, 3]] {
        g.set(c, CellState::Occupied);
    }
    assert!(astar(&g, [0, 0], [2, 2], 2.0).is_none());
}

#[test]
fn cost_field_agrees_with_astar() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = random_grid(&mut rng, 12);
    g.set([0, 0], CellState::Free);
    let f = cost_field(&g, [0, 0], 2.0);
    for i in 0..g.len() {
        let c = g.cell_at(i);
        let a = astar(&g, [0, 0], c, 2.0).map_or(f64::INFINITY, |p| p.1);
        assert_eq!(a, f[i]);
    }
}

proptest! {
    #[test]
    fn astar_cost_is_symmetric_on_free_grids(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_grid(&mut rng, 10);
        for c in g.cells.iter_mut() {
            if *c == CellState::Unknown {
                *c = CellState::Free;
            }
        }
        let a = [rng.gen_range(0..10), rng.gen_range(0..10)];
        let b = [rng.gen_range(0..10), rng.gen_range(0..10)];
        g.set(a, CellState::Free);
        g.set(b, CellState::Free);
        let ab = astar(&g, a, b, 2.0).map(|p| p.1);
        let ba = astar(&g, b, a, 2.0).map(|p| p.1);
        prop_assert_eq!(ab, ba);
    }
}

fn provider() -> EmbeddingProvider {
    EmbeddingProvider::synthetic(16)
}

fn spec_10() -> GridSpec {
    GridSpec::covering([0.0, 0.0], [2.5, 2.5], 0.25)
}

#[test]
fn empty_belief_is_unknown() {
    let p = provider();
    let g = belief_occupancy(
        &SceneBelief::new(0),
        &FreeSpace::new(0.25),
        &spec_10(),
        [0.125, 1.8],
        &p.embed_label("floor").unwrap(),
    )
    .unwrap();
    assert_eq!(g.count(CellState::Unknown), g.len());
    assert!(matches!(
        belief_occupancy(&SceneBelief::new(0), &FreeSpace::new(0.25), &spec_10(), [1.0, 1.0], &p.embed_label("floor").unwrap()),
        Err(PlannerError::InvalidBand(..))
    ));
}

#[test]
fn one_wall_primitive_one_occupied_cell() {
    let p = provider();
    let prim = GaussianPrimitive::isotropic(
        Vec3::new(1.0, 1.0, 1.2),
        0.05,
        1.0,
        [0.5; 3],
        p.embed_label("wall").unwrap().values().to_vec(),
        Origin::Observed,
    )
    .unwrap();
    let mut b = SceneBelief::new(0);
    b.primitives.push(prim);
    let g = belief_occupancy(&b, &FreeSpace::new(0.25), &spec_10(), [0.125, 1.8], &p.embed_label("floor").unwrap()).unwrap();
    assert_eq!(g.count(CellState::Occupied), 1);
    assert_eq!(g.get(g.cell_of(1.0, 1.0).unwrap()), CellState::Occupied);
}

fn corridor() -> World {
    World::from_parts(
        0,
        WorldConfig::default(),
        vec![Room {
            min: [0.0, 0.0],
            max: [6.0, 1.5],
        }],
        vec![],
        vec![],
    )
}

/// Navigation-band occupancy of the ground-truth voxels.
fn truth_2d(world: &World) -> OccupancyGrid {
    let spec = world.grid_spec();
    let v = world.voxel_truth(spec);
    let mut g = OccupancyGrid::from_spec(&spec, CellState::Free);
    for y in 0..spec.dims[1] {
        for x in 0..spec.dims[0] {
            if (1..spec.dims[2]).any(|z| v.is_occupied(spec.index(x, y, z))) {
                g.set([x, y], CellState::Occupied);
            }
        }
    }
    g
}

#[test]
fn corridor_observation_matches_truth() {
    let world = corridor();
    let p = provider();
    let sensor = Sensor::default();
    let state = AgentState {
        position: [0.5, 0.75],
        heading: 0.0,
    };
    let (obs, log) = world.observe(&sensor.pose(&state), &p).unwrap();
    let b = SceneBelief::new(0).incorporate_observation(&obs, 1).unwrap();
    let mut free = FreeSpace::new(0.25);
    carve_rays(&mut free, &log, obs.width(), 1);
    let g = belief_occupancy(&b, &free, &world.grid_spec(), [0.125, 1.8], &p.embed_label("floor").unwrap()).unwrap();
    let gt = truth_2d(&world);
    let known: Vec<usize> = (0..g.len()).filter(|i| g.cells[*i] != CellState::Unknown).collect();
    assert!(known.len() > 20);
    let agree = known.iter().filter(|i| g.cells[**i] == gt.cells[**i]).count();
    assert!(agree as f64 / known.len() as f64 >= 0.95, "{agree}/{}", known.len());
    // the corridor interior ahead is free, its walls occupied
    assert_eq!(g.get(g.cell_of(3.0, 0.75).unwrap()), CellState::Free);
    assert_eq!(g.get(g.cell_of(2.0, 0.0).unwrap()), CellState::Occupied);
}

#[test]
fn inflate_points_marks_disk() {
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, [8, 8], CellState::Free);
    g.inflate_points([[1.0, 1.0]], 0.3);
    for i in 0..g.len() {
        let c = g.center(g.cell_at(i));
        let inside = (c[0] - 1.0).hypot(c[1] - 1.0) < 0.3;
        assert_eq!(g.cells[i] == CellState::Occupied, inside);
    }
}

#[test]
fn waypoints_goal_and_exhaustion() {
    let g = OccupancyGrid::new([0.0, 0.0], 0.25, [6, 6], CellState::Free);
    let none = HashSet::new();
    assert_eq!(sample_waypoints(&g, [0, 0], Some([3, 4]), 3, 2.0, &none).unwrap(), vec![[3, 4]]);
    assert_eq!(sample_waypoints(&g, [0, 0], None, 3, 2.0, &none), Err(PlannerError::NoFrontier));
    assert_eq!(sample_waypoints(&g, [0, 0], None, 0, 2.0, &none), Err(PlannerError::InvalidCount));
}

#[test]
fn waypoints_are_frontiers_and_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, [20, 20], CellState::Unknown);
    // explored left half with a few obstacles
    for y in 0..20 {
        for x in 0..10 {
            let s = if rng.gen_bool(0.1) { CellState::Occupied } else { CellState::Free };
            g.set([x, y], s);
        }
    }
    g.set([2, 10], CellState::Free);
    let w = sample_waypoints(&g, [2, 10], None, 4, 10.0, &HashSet::new()).unwrap();
    assert_eq!(w.len(), 4);
    for c in &w {
        assert_eq!(g.get(*c), CellState::Free);
        assert!(g.neighbors4(*c).any(|n| g.get(n) == CellState::Unknown));
    }
    let uniq: HashSet<_> = w.iter().collect();
    assert_eq!(uniq.len(), 4);
}

fn template() -> CameraPose {
    CameraPose::level(Vec3::new(0.0, 0.0, 0.9), 0.0, Intrinsics::from_hfov(16, 12, 90.0))
}

fn belief_with_box(p: &EmbeddingProvider) -> SceneBelief {
    let mut b = SceneBelief::new(0);
    for (i, c) in ["bed", "sofa", "plant"].iter().enumerate() {
        let e = p.embed_label(c).unwrap().values().to_vec();
        for k in 0..4 {
            b.primitives.push(
                GaussianPrimitive::isotropic(
                    Vec3::new(3.0 + i as f64, -1.0 + k as f64 * 0.7, 0.6),
                    0.3,
                    0.9,
                    [0.2 * i as f64, 0.4, 0.6],
                    e.clone(),
                    Origin::Observed,
                )
                .unwrap(),
            );
        }
    }
    b
}

#[test]
fn mental_simulate_shapes() {
    let p = provider();
    let b = belief_with_box(&p);
    let hyps = vec![b.clone(), b.clone(), b];
    let path: Vec<[f64; 2]> = (0..9).map(|i| [i as f64 * 0.25, 0.0]).collect();
    let r = mental_simulate(&hyps, &path, &template(), 1);
    assert_eq!(r.len(), 3);
    assert!(r.iter().all(|f| f.len() == 8));
    let r = mental_simulate(&hyps[..1], &path, &template(), 20);
    assert_eq!(r[0].len(), 1);
    assert_eq!(r[0][0].pose.position.x, 2.0);
}

#[test]
fn loop_render_is_consistent() {
    let p = provider();
    let b = belief_with_box(&p);
    // out and back along a square loop
    let mut path = vec![[0.0, 0.0]];
    for (dx, dy, n) in [(1.0, 0.0, 4), (0.0, 1.0, 4), (-1.0, 0.0, 4), (0.0, -1.0, 4)] {
        for _ in 0..n {
            let l = *path.last().unwrap();
            path.push([l[0] + 0.25 * dx, l[1] + 0.25 * dy]);
        }
    }
    path.push([0.25, 0.0]);
    let first = render(&b, &path_poses(&[[0.0, 0.0], [0.25, 0.0]], &template(), 1)[0]);
    let frames = &mental_simulate(&[b], &path, &template(), 1)[0];
    let last = frames.last().unwrap();
    for i in 0..first.mask.len() {
        if first.mask[i] {
            let c = crate::semantic::cosine(first.semantic.at(i), last.semantic.at(i));
            assert!(c >= 0.99, "pixel {i}: {c}");
        }
    }
}

fn frame_with_features(features: &[Vec<f64>]) -> Observation {
    let w = features.len();
    let dim = features[0].len();
    let data: Vec<f64> = features.iter().flatten().copied().collect();
    Observation::new(
        ImageBuf::new(w, 1, 3),
        ImageBuf::new(w, 1, 1),
        ImageBuf::from_vec(w, 1, dim, data).unwrap(),
        vec![false; w],
        CameraPose::level(Vec3::zeros(), 0.0, Intrinsics::from_hfov(w, 1, 90.0)),
    )
    .unwrap()
}

#[test]
fn score_orthogonal_and_known_is_zero() {
    let q = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
    let f = frame_with_features(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let g = OccupancyGrid::new([0.0, 0.0], 0.25, [8, 8], CellState::Free);
    let s = score_path(&[vec![f.clone()], vec![f]], &q, &g, &[[1, 1], [2, 1]], &ScoreWeights::default());
    assert_eq!(s, 0.0);
}

#[test]
fn score_matches_hand_sum() {
    let q = Embedding::new(vec![1.0, 0.0]).unwrap();
    let s2 = 0.5f64.sqrt();
    let hit = frame_with_features(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let half = frame_with_features(&[vec![s2, s2], vec![0.0, 0.0]]);
    let miss = frame_with_features(&[vec![-1.0, 0.0], vec![0.0, 1.0]]);
    let rollout = vec![vec![miss.clone(), hit], vec![half, miss.clone()], vec![miss]];
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, [10, 10], CellState::Free);
    g.set([0, 0], CellState::Unknown);
    g.set([9, 9], CellState::Unknown);
    g.set([5, 3], CellState::Unknown);
    let path = [[2, 2], [3, 2], [4, 2]];
    let w = ScoreWeights::default();
    let got = score_path(&rollout, &q, &g, &path, &w);
    // (0,0) is sqrt(8) cells = 0.71 m from (2,2); (5,3) is 1.41 cells from (4,2)
    let info = 2.0 / 3.0;
    let sem = (1.0 + s2 + 0.0) / 3.0;
    assert!((got - (w.w_sem * sem + w.w_info * info)).abs() < 1e-9, "{got}");
    // one perfect hit among K hypotheses bounds the semantic term below
    assert!(semantic_scores(&rollout, &q).iter().sum::<f64>() / 3.0 >= 1.0 / 3.0);
}

fn result(success: bool, p: f64, l: f64, e: usize, o: usize) -> EpisodeResult {
    EpisodeResult {
        episode: 0,
        seed: 0,
        target: "bed".into(),
        success,
        steps: e,
        path_length: p,
        shortest_path_length: l,
        oracle_steps: o,
        collisions: 0,
        trace: vec![],
    }
}

#[test]
fn metrics_hand_values() {
    assert_eq!(sr(&[]), Err(PlannerError::EmptyResultSet));
    assert_eq!(spl(&[]), Err(PlannerError::EmptyResultSet));
    assert_eq!(sel(&[]), Err(PlannerError::EmptyResultSet));
    let fails = [result(false, 3.0, 2.0, 10, 5), result(false, 1.0, 1.0, 3, 3)];
    assert_eq!((sr(&fails).unwrap(), spl(&fails).unwrap(), sel(&fails).unwrap()), (0.0, 0.0, 0.0));
    assert_eq!(spl(&[result(true, 2.0, 2.0, 9, 9)]).unwrap(), 1.0);
    let batch = [
        result(true, 4.0, 2.0, 20, 10),
        result(true, 1.5, 1.5, 6, 8),
        result(false, 9.0, 3.0, 200, 14),
        result(true, 5.0, 4.0, 30, 24),
    ];
    assert!((sr(&batch).unwrap() - 0.75).abs() < 1e-12);
    assert!((spl(&batch).unwrap() - (0.5 + 1.0 + 0.0 + 0.8) / 4.0).abs() < 1e-12);
    assert!((sel(&batch).unwrap() - (0.5 + 1.0 + 0.0 + 0.8) / 4.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn spl_and_sel_bounded_by_sr(
        eps in prop::collection::vec((any::<bool>(), 0.0f64..20.0, 0.0f64..20.0, 0usize..200, 0usize..200), 1..30)
    ) {
        let rs: Vec<EpisodeResult> = eps.iter().map(|(s, p, l, e, o)| result(*s, *p, *l, *e, *o)).collect();
        let r = sr(&rs).unwrap();
        prop_assert!(spl(&rs).unwrap() <= r + 1e-12);
        prop_assert!(sel(&rs).unwrap() <= r + 1e-12);
    }
}

#[test]
fn actions_follow_the_path() {
    let path = [[0, 0], [1, 0], [1, 1], [0, 1]];
    let a = actions_along(&path, 0.0, None);
    use crate::world::Action::*;
    assert_eq!(
        a,
        vec![Forward, RotateLeft, RotateLeft, RotateLeft, Forward, RotateLeft, RotateLeft, RotateLeft, Forward]
    );
    // a half turn prefers left; facing snaps to the nearest lattice heading
    assert_eq!(actions_along(&[[0, 0]], 0.0, Some(std::f64::consts::PI)).len(), 6);
    assert_eq!(actions_along(&[[0, 0]], 0.0, Some(-0.6)), vec![RotateRight]);
}

fn one_room(furniture: Vec<Furniture>) -> World {
    World::from_parts(
        0,
        WorldConfig::default(),
        vec![Room {
            min: [0.0, 0.0],
            max: [5.0, 4.0],
        }],
        vec![],
        furniture,
    )
}

fn bed_at(min: [f64; 2]) -> Furniture {
    Furniture {
        class: "bed".into(),
        aabb: Aabb::new([min[0], min[1], 0.0], [min[0] + 1.4, min[1] + 2.0, 0.5]),
        color: [0.7, 0.2, 0.2],
        room: 0,
    }
}

struct Kit {
    den: DenoiserParams,
    schedule: NoiseSchedule,
    provider: EmbeddingProvider,
    sensor: Sensor,
}

impl Kit {
    fn new() -> Self {
        // an untrained network is enough to exercise the sampling path
        let mut den = DenoiserParams::init(DenoiserConfig::default(), 1);
        den.trained_steps = 1;
        Self {
            den,
            schedule: NoiseSchedule::linear(1e-4, 0.1, 20).unwrap(),
            provider: provider(),
            sensor: Sensor::default(),
        }
    }

    fn comps(&self) -> Components<'_> {
        Components {
            denoiser: &self.den,
            schedule: &self.schedule,
            provider: &self.provider,
            sensor: &self.sensor,
        }
    }
}

#[test]
fn adjacent_visible_target_succeeds_at_once() {
    let kit = Kit::new();
    let world = one_room(vec![bed_at([3.0, 1.0])]);
    let start = AgentState {
        position: [2.0, 2.0],
        heading: 0.0,
    };
    let r = navigate(&world, kit.comps(), "bed", &NavConfig::default(), start, 1).unwrap();
    assert!(r.success);
    assert!(r.steps <= 3);
    assert_eq!(r.trace.last().unwrap().action, crate::world::Action::Done);
}

#[test]
fn zero_budget_fails_without_steps() {
    let kit = Kit::new();
    let world = one_room(vec![bed_at([3.0, 1.0])]);
    let start = AgentState {
        position: [2.0, 2.0],
        heading: 0.0,
    };
    let cfg = NavConfig {
        budget: 0,
        ..NavConfig::default()
    };
    let r = navigate(&world, kit.comps(), "bed", &cfg, start, 1).unwrap();
    assert!(!r.success);
    assert_eq!(r.steps, 0);
    assert!(matches!(
        navigate(&world, kit.comps(), "piano", &cfg, start, 1),
        Err(PlannerError::World(_))
    ));
}

#[test]
fn target_behind_agent_is_found() {
    let kit = Kit::new();
    let world = one_room(vec![bed_at([0.2, 1.0])]);
    let start = AgentState {
        position: [4.0, 2.0],
        heading: 0.0,
    };
    for ablation in [Ablation::Full, Ablation::NoGeometry] {
        let cfg = NavConfig {
            ablation,
            ..NavConfig::default()
        };
        let r = navigate(&world, kit.comps(), "bed", &cfg, start, 3).unwrap();
        assert!(r.success, "{ablation:?}");
        assert!(r.steps <= cfg.budget);
        assert!(r.path_length >= r.shortest_path_length - 0.25);
        assert!(r.steps >= r.oracle_steps);
        let forwards = r.trace.iter().filter(|t| t.action == crate::world::Action::Forward && !t.collided).count();
        assert_eq!(forwards as f64 * 0.25, r.path_length);
        assert_eq!(r.trace.iter().filter(|t| t.collided).count(), r.collisions);
    }
}

#[test]
fn episodes_are_deterministic_and_worker_independent() {
    let kit = Kit::new();
    let spec = EpisodeSpec {
        episodes: 3,
        seed: 5,
        ..EpisodeSpec::default()
    };
    let cfg = NavConfig {
        budget: 40,
        ..NavConfig::default()
    };
    let a = run_episodes(&spec, kit.comps(), &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| run_episodes(&spec, kit.comps(), &cfg).unwrap());
    assert_eq!(a, b);
    let mut csv = Vec::new();
    write_results_csv(&mut csv, &a).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("episode,seed,target,success,steps,path_len,shortest_len,collisions\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn ground_truth_in_open_room() {
    let world = one_room(vec![bed_at([3.0, 1.0])]);
    let sensor = Sensor::default();
    // facing away: one half turn then Done
    let start = AgentState {
        position: [2.0, 2.0],
        heading: std::f64::consts::PI,
    };
    let gt = ground_truth(&world, &start, "bed", &sensor).unwrap();
    assert_eq!(gt.shortest_cells, 0);
    assert_eq!(gt.oracle_steps, 7);
}
