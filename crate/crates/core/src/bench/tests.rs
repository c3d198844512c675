use super::*;
use crate::geometry::Aabb;
use crate::image::ImageBuf;
use crate::scene::{GaussianPrimitive, Origin};
use crate::world::{AgentState, Furniture, Room};
use proptest::prelude::*;
use rand::Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cloud(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(r.gen::<f64>() * scale, r.gen::<f64>() * scale, r.gen::<f64>() * scale))
        .collect()
}

fn brute_directed(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            best = best.min((p - q).norm());
        }
        total += best;
    }
    total / a.len() as f64
}

fn brute_iou(a: &[Vec3], b: &[Vec3], size: f64, dims: usize) -> f64 {
    let key = |p: &Vec3| -> Vec<i64> { (0..dims).map(|i| (p[i] / size).floor() as i64).collect() };
    let mut ka: Vec<Vec<i64>> = a.iter().map(key).collect();
    let mut kb: Vec<Vec<i64>> = b.iter().map(key).collect();
    ka.sort();
    ka.dedup();
    kb.sort();
    kb.dedup();
    let inter = ka.iter().filter(|k| kb.binary_search(k).is_ok()).count();
    let union = ka.len() + kb.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn chamfer_and_iou_match_brute_force() {
    let mut r = rng(1);
    for trial in 0..200 {
        let na = r.gen_range(1..=250);
        let nb = r.gen_range(1..=250);
        let scale = if trial % 2 == 0 { 0.5 } else { 2.0 };
        let a = cloud(&mut r, na, scale);
        let b = cloud(&mut r, nb, scale);
        let want = 0.5 * (brute_directed(&a, &b) + brute_directed(&b, &a));
        assert!((chamfer(&a, &b).unwrap() - want).abs() < 1e-6);
        assert!((directed_chamfer(&a, &b).unwrap() - brute_directed(&a, &b)).abs() < 1e-6);
        assert_eq!(iou3d(&a, &b, IOU_VOXEL), brute_iou(&a, &b, IOU_VOXEL, 3));
        assert_eq!(bev_iou(&a, &b, IOU_VOXEL), brute_iou(&a, &b, IOU_VOXEL, 2));
    }
}

#[test]
fn identical_sets_score_perfectly() {
    let pts = box_surface([0.0; 3], [1.0, 0.5, 0.8], GT_SPACING, true);
    assert_eq!(iou3d(&pts, &pts, IOU_VOXEL), 1.0);
    assert_eq!(bev_iou(&pts, &pts, IOU_VOXEL), 1.0);
    assert_eq!(chamfer(&pts, &pts), Some(0.0));
    assert_eq!(chamfer(&pts, &[]), None);
}

#[test]
fn shifted_cube_chamfer() {
    // corners only: every corner's nearest shifted corner is its own image
    let corners: Vec<Vec3> = (0..8)
        .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    let shifted: Vec<Vec3> = corners.iter().map(|p| p + Vec3::new(0.1, 0.0, 0.0)).collect();
    assert!((directed_chamfer(&corners, &shifted).unwrap() - 0.1).abs() < 1e-12);
    assert!((chamfer(&corners, &shifted).unwrap() - 0.1).abs() < 1e-12);
    let surface = box_surface([0.0; 3], [1.0; 3], 0.1, false);
    let moved: Vec<Vec3> = surface.iter().map(|p| p + Vec3::new(0.1, 0.0, 0.0)).collect();
    let want = 0.5 * (brute_directed(&surface, &moved) + brute_directed(&moved, &surface));
    assert!((chamfer(&surface, &moved).unwrap() - want).abs() < 1e-6);
}

#[test]
fn box_surface_points_lie_on_the_surface() {
    let (lo, hi) = ([0.2, -0.3, 0.0], [0.9, 0.4, 0.55]);
    let pts = box_surface(lo, hi, GT_SPACING, true);
    for p in &pts {
        let on = (0..3).any(|a| (p[a] - lo[a]).abs() < 1e-12 || (p[a] - hi[a]).abs() < 1e-12);
        assert!(on);
        assert!((0..3).all(|a| p[a] >= lo[a] - 1e-12 && p[a] <= hi[a] + 1e-12));
    }
    assert!(pts.iter().all(|p| p.z > 0.0 || p.x == lo[0] || p.x == hi[0] || p.y == lo[1] || p.y == hi[1]));
}

#[test]
fn iou_is_monotone_in_overlap() {
    let mut r = rng(7);
    let pred: Vec<Vec3> = (0..60).map(|i| Vec3::new(i as f64 * 0.05 + 0.01, 0.01, 0.01)).collect();
    let far: Vec<Vec3> = (0..60).map(|i| Vec3::new(i as f64 * 0.05 + 0.01, 5.01, 0.01)).collect();
    let mut prev = -1.0;
    for k in 0..=60 {
        let mut gt: Vec<Vec3> = pred[..k].to_vec();
        gt.extend_from_slice(&far[k..]);
        gt.shuffle(&mut r);
        let v = iou3d(&pred, &gt, IOU_VOXEL);
        assert!(v >= prev, "k={k}: {v} < {prev}");
        prev = v;
    }
    assert_eq!(prev, 1.0);
}

fn random_grid(r: &mut ChaCha8Rng, dims: [usize; 2]) -> OccupancyGrid {
    let mut g = OccupancyGrid::new([0.0, 0.0], 0.25, dims, CellState::Unknown);
    for c in g.cells.iter_mut() {
        *c = match r.gen_range(0..3) {
            0 => CellState::Free,
            1 => CellState::Occupied,
            _ => CellState::Unknown,
        };
    }
    g
}

#[test]
fn occupancy_metrics_match_cell_counts() {
    let mut r = rng(3);
    for _ in 0..200 {
        let dims = [r.gen_range(1..=64), r.gen_range(1..=64)];
        let p = random_grid(&mut r, dims);
        let g = random_grid(&mut r, dims);
        let m = occupancy_metrics(&p, &g);
        let (mut known, mut agree) = (0.0, 0.0);
        let (mut fi, mut fu, mut oi, mut ou) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..p.cells.len() {
            let (a, b) = (p.cells[i], g.cells[i]);
            if a != CellState::Unknown && b != CellState::Unknown {
                known += 1.0;
                if a == b {
                    agree += 1.0;
                }
            }
            if a == CellState::Free && b == CellState::Free {
                fi += 1.0;
            }
            if a == CellState::Free || b == CellState::Free {
                fu += 1.0;
            }
            if a == CellState::Occupied && b == CellState::Occupied {
                oi += 1.0;
            }
            if a == CellState::Occupied || b == CellState::Occupied {
                ou += 1.0;
            }
        }
        let div = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
        let acc = if known == 0.0 { 0.0 } else { agree / known };
        assert!((m.occ_acc - acc).abs() < 1e-12);
        assert!((m.iou_free - div(fi, fu)).abs() < 1e-12);
        assert!((m.iou_occ - div(oi, ou)).abs() < 1e-12);
        assert_eq!(m.occ_iou, (m.iou_free + m.iou_occ) / 2.0);
        for v in [m.occ_acc, m.iou_free, m.iou_occ, m.occ_iou] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn perfect_grid_scores_one() {
    let mut r = rng(4);
    let mut g = random_grid(&mut r, [12, 9]);
    g.cells.iter_mut().filter(|c| **c == CellState::Unknown).for_each(|c| *c = CellState::Free);
    let m = occupancy_metrics(&g, &g);
    assert_eq!((m.occ_acc, m.iou_free, m.iou_occ, m.occ_iou), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn multiset_scores() {
    assert_eq!(multiset_prf(&[4, 4, 5], &[4, 5, 5, 6]), (2.0 / 3.0, 0.5, 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5)));
    assert_eq!(multiset_prf(&[], &[]), (1.0, 1.0, 1.0));
    assert_eq!(multiset_prf(&[], &[3]), (0.0, 0.0, 0.0));
    assert_eq!(multiset_prf(&[3], &[]), (0.0, 0.0, 0.0));
    assert_eq!(multiset_prf(&[7, 3], &[3, 7]), (1.0, 1.0, 1.0));
}

fn noise_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuf {
    ImageBuf::from_vec(w, h, 3, (0..w * h * 3).map(|_| r.gen::<f64>() * 0.8).collect()).unwrap()
}

#[test]
fn image_metrics_closed_forms() {
    let mut r = rng(5);
    let a = noise_image(&mut r, 20, 15);
    assert_eq!(psnr(&a, &a), PSNR_CAP);
    assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
    let mut b = a.clone();
    for px in b.data.chunks_mut(3) {
        px[0] += 0.1;
    }
    // MSE = 0.01 / 3
    let want = 10.0 * (3.0f64 / 0.01).log10();
    assert!((psnr(&a, &b) - want).abs() < 1e-9);
    assert!(ssim(&a, &b) < 1.0);
    let feat = noise_image(&mut r, 20, 15);
    assert!((embedding_cosine(&feat, &feat) - 1.0).abs() < 1e-12);
    let mut half = feat.clone();
    half.data.iter_mut().take(30 * 3).for_each(|v| *v = 0.0);
    assert!((embedding_cosine(&feat, &half) - 270.0 / 300.0).abs() < 1e-12);
}

#[test]
fn histogram_normalizes_per_channel() {
    let img = ImageBuf::from_vec(2, 1, 3, vec![0.0, 0.5, 1.0, 0.99, 0.5, 0.2]).unwrap();
    let h = color_histogram(&img, &[true, true]);
    for c in 0..3 {
        let s: f64 = h[c * metrics::HIST_BINS..(c + 1) * metrics::HIST_BINS].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(h[0], 0.5);
    assert_eq!(h[7], 0.5);
    assert_eq!(color_histogram(&img, &[false, false]), vec![0.0; 24]);
}

fn small_config() -> WorldConfig {
    WorldConfig::default()
}

/// Independent hit-counting: compare the first-hit solid's box against the
/// target's box.
fn oracle_visibility(world: &World, target: usize, pose: &CameraPose) -> f64 {
    let b = world.furniture[target].aabb;
    let s = tasks::VISIBILITY_SUPERSAMPLE as f64;
    let (w, h) = (pose.intrinsics.width * 2, pose.intrinsics.height * 2);
    let (mut sil, mut vis) = (0u32, 0u32);
    for r in 0..h {
        for c in 0..w {
            let d = pose.pixel_direction((c as f64 + 0.5) / s, (r as f64 + 0.5) / s);
            if b.ray_hit(&pose.position, &d, 1e-9).is_none() {
                continue;
            }
            sil += 1;
            if let Some(hit) = world.raycast(&pose.position, &d, f64::INFINITY) {
                if hit.solid.is_some_and(|i| world.solids[i].aabb == b) {
                    vis += 1;
                }
            }
        }
    }
    vis as f64 / sil as f64
}

fn find_object_task(v: f64) -> (World, CoreTask) {
    let cfg = small_config();
    for seed in 0..20u64 {
        let world = World::generate(seed, &cfg).unwrap();
        for id in 0..world.furniture.len() {
            if let Ok(t) = gen_object_completion(&world, id, v, &Sensor::default(), seed) {
                return (task_world(&t, &cfg), t);
            }
        }
    }
    panic!("no task for visibility {v}");
}

fn task_world(t: &CoreTask, cfg: &WorldConfig) -> World {
    t.world(cfg).unwrap()
}

#[test]
fn object_tasks_hit_requested_visibility() {
    let sensor = Sensor::default();
    for (v, lo, hi) in [(0.95, 0.90, 1.0), (0.55, 0.50, 0.60), (0.05, 0.0, 0.10)] {
        let (world, t) = find_object_task(v);
        t.validate().unwrap();
        let pose = sensor.pose(&t.initial[0]);
        let got = oracle_visibility(&world, t.target.unwrap(), &pose);
        assert!(got >= lo && got <= hi, "visibility {v}: measured {got}");
        assert!((visible_fraction(&world, t.target.unwrap(), &pose).0 - got).abs() < 1e-12);
        if v < 0.9 {
            assert!(t.occluder.is_some());
        }
        assert!(!t.trajectory.is_empty());
    }
}

#[test]
fn visibility_out_of_range_is_rejected() {
    let world = World::generate(0, &small_config()).unwrap();
    assert!(matches!(
        gen_object_completion(&world, 0, 1.2, &Sensor::default(), 0),
        Err(BenchError::InvalidVisibility(_))
    ));
}

fn gt_belief(world: &World, target: usize, provider: &EmbeddingProvider) -> SceneBelief {
    let f = &world.furniture[target];
    let emb = provider.embed_label(&f.class).unwrap();
    let mut b = SceneBelief::new(0);
    b.primitives = object_points(world, target)
        .into_iter()
        .map(|p| {
            GaussianPrimitive::isotropic(p, 0.02, 1.0, f.color, emb.values().to_vec(), Origin::Observed).unwrap()
        })
        .collect();
    b
}

#[test]
fn object_eval_identity_and_empty() {
    let provider = EmbeddingProvider::synthetic(16);
    let cfg = BenchConfig::default();
    let (world, t) = find_object_task(0.95);
    let target = t.target.unwrap();
    let m = eval_object_completion(&t, &world, &gt_belief(&world, target, &provider), &provider, &cfg).unwrap();
    assert_eq!(m.iou3d, 1.0);
    assert_eq!(m.bev_iou, 1.0);
    assert_eq!(m.chamfer, 0.0);
    assert!(m.appearance_sim > 0.0 && m.appearance_sim <= 1.0 + 1e-12);
    let empty = SceneBelief::new(0);
    assert!(matches!(
        eval_object_completion(&t, &world, &empty, &provider, &cfg),
        Err(BenchError::NothingPredicted)
    ));
}

/// One 4×3 m room with a bed and a plant well apart.
fn room_world() -> World {
    let furn = |class: &str, min: [f64; 3], max: [f64; 3]| Furniture {
        class: class.into(),
        aabb: Aabb::new(min, max),
        color: [0.5, 0.3, 0.2],
        room: 0,
    };
    World::from_parts(
        0,
        WorldConfig::default(),
        vec![Room {
            min: [0.0, 0.0],
            max: [4.0, 3.0],
        }],
        vec![],
        vec![
            furn("bed", [0.5, 0.5, 0.0], [1.5, 2.0, 0.5]),
            furn("plant", [3.0, 2.0, 0.0], [3.5, 2.5, 1.0]),
        ],
    )
}

fn room_task() -> CoreTask {
    CoreTask {
        id: 0,
        kind: TaskKind::RoomCompletion,
        world_seed: 0,
        seed: 0,
        initial: vec![AgentState {
            position: [2.5, 1.0],
            heading: 0.0,
        }],
        trajectory: vec![AgentState {
            position: [2.5, 1.0],
            heading: 0.0,
        }],
        target: Some(0),
        occluder: None,
    }
}

#[test]
fn perfect_room_prediction_scores_one() {
    let provider = EmbeddingProvider::synthetic(16);
    let cfg = BenchConfig::default();
    let world = room_world();
    let task = room_task();
    let spec = focus_grid(&task, &world, cfg.window);
    let gt = truth_occupancy(&world, &spec, cfg.band);
    let floor = provider.embed_label("floor").unwrap();
    let mut b = SceneBelief::new(0);
    for i in 0..gt.len() {
        let c = gt.cell_at(i);
        let [x, y] = gt.center(c);
        let (z, emb) = match gt.get(c) {
            CellState::Free => (0.0, floor.clone()),
            _ => {
                let solid = world
                    .solids
                    .iter()
                    .filter(|s| s.aabb.z_overlaps(cfg.band[0], cfg.band[1]))
                    .find(|s| s.aabb.footprint_overlaps([x - 0.125, y - 0.125], [x + 0.125, y + 0.125]))
                    .unwrap();
                (0.5, provider.embed_class(solid.class).unwrap())
            }
        };
        b.primitives.push(
            GaussianPrimitive::isotropic(Vec3::new(x, y, z), 0.05, 1.0, [0.5; 3], emb.values().to_vec(), Origin::Observed)
                .unwrap(),
        );
    }
    let m = eval_room_completion(&task, &world, &b, &FreeSpace::new(DEFAULT_CELL), &provider, &cfg).unwrap();
    assert_eq!(m.occupancy.occ_acc, 1.0);
    assert_eq!(m.occupancy.occ_iou, 1.0);
    assert_eq!((m.obj_precision, m.obj_recall, m.obj_f1), (1.0, 1.0, 1.0));
    let empty = eval_room_completion(&task, &world, &SceneBelief::new(0), &FreeSpace::new(DEFAULT_CELL), &provider, &cfg)
        .unwrap();
    assert_eq!(empty.occupancy.occ_acc, 0.0);
    assert_eq!(empty.obj_recall, 0.0);
}

#[test]
fn permanence_requires_closed_loop() {
    let provider = EmbeddingProvider::synthetic(16);
    let cfg = BenchConfig::default();
    let world = World::generate(2, &cfg.world).unwrap();
    let mut t = gen_object_permanence(&world, &cfg.sensor, 2).unwrap();
    assert!(is_closed(&t.trajectory));
    assert_eq!(t.trajectory.first(), t.trajectory.last());
    let m = eval_object_permanence(&t, &world, &StaticBelief, &provider, &cfg).unwrap();
    assert_eq!(m.psnr, PSNR_CAP);
    assert!((m.ssim - 1.0).abs() < 1e-12);
    assert!((m.embed_cos - 1.0).abs() < 1e-12);
    t.trajectory.pop();
    t.trajectory.push(AgentState {
        position: [t.initial[0].position[0] + 0.25, t.initial[0].position[1]],
        heading: 0.0,
    });
    assert!(matches!(
        eval_object_permanence(&t, &world, &ObservedOnly, &provider, &cfg),
        Err(BenchError::TrajectoryNotClosed)
    ));
}

fn suite_config() -> BenchConfig {
    BenchConfig {
        object_tasks: 1,
        visibilities: vec![0.95, 0.55],
        room_tasks: 2,
        permanence_tasks: 2,
        seed: 11,
        ..BenchConfig::default()
    }
}

#[test]
fn empty_suite_writes_header_only() {
    let mut out = Vec::new();
    let rows = run_suite(&[], &ObservedOnly, &EmbeddingProvider::synthetic(16), &BenchConfig::default(), &mut out).unwrap();
    assert!(rows.is_empty());
    assert_eq!(String::from_utf8(out).unwrap(), BENCH_COLUMNS.join(",") + "\n");
}

#[test]
fn suite_flags_failures_and_is_deterministic() {
    let provider = EmbeddingProvider::synthetic(16);
    let cfg = suite_config();
    let mut tasks = generate_tasks(&cfg).unwrap();
    assert_eq!(tasks.len(), 6);
    assert!(tasks.iter().enumerate().all(|(i, t)| t.id == i));
    for t in &tasks {
        t.validate().unwrap();
    }
    // break one permanence task
    let last = tasks.len() - 1;
    tasks[last].trajectory.pop();
    tasks[last].trajectory.push(AgentState {
        position: [-50.0, -50.0],
        heading: 1.0,
    });
    let run = |pool: usize| {
        let mut out = Vec::new();
        let rows = rayon::ThreadPoolBuilder::new()
            .num_threads(pool)
            .build()
            .unwrap()
            .install(|| run_suite(&tasks, &ObservedOnly, &provider, &cfg, &mut out).unwrap());
        (rows, out)
    };
    let (rows, a) = run(1);
    let (_, b) = run(3);
    assert_eq!(a, b);
    assert_eq!(rows.len(), 6);
    assert!(rows[last].status.starts_with("error"));
    assert!(rows[..last].iter().all(|r| r.metrics.is_some()));
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // header, 6 task rows, 3 mean rows
    assert_eq!(lines.len(), 10);
    assert!(lines[6].contains("error: trajectory"));
    assert!(lines[9].starts_with("mean,object_permanence,,,n=1"));
    let again = generate_tasks(&cfg).unwrap();
    assert_eq!(again[..last], tasks[..last]);
}

#[test]
fn task_set_round_trips() {
    let cfg = BenchConfig {
        object_tasks: 0,
        room_tasks: 1,
        permanence_tasks: 1,
        ..BenchConfig::default()
    };
    let set = TaskSet {
        tasks: generate_tasks(&cfg).unwrap(),
        config: cfg,
    };
    let mut buf = Vec::new();
    set.write_to(&mut buf).unwrap();
    assert_eq!(TaskSet::read_from(buf.as_slice()).unwrap(), set);
    let bad = String::from_utf8(buf).unwrap().replacen("\"seed\"", "\"sed\"", 1);
    assert!(TaskSet::read_from(bad.as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_ranges(seed in 0u64..10_000, na in 1usize..80, nb in 1usize..80) {
        let mut r = rng(seed);
        let a = cloud(&mut r, na, 0.4);
        let b = cloud(&mut r, nb, 0.4);
        let i3 = iou3d(&a, &b, IOU_VOXEL);
        let ib = bev_iou(&a, &b, IOU_VOXEL);
        prop_assert!((0.0..=1.0).contains(&i3));
        prop_assert!((0.0..=1.0).contains(&ib));
        prop_assert!(chamfer(&a, &b).unwrap() >= 0.0);
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn prf_in_unit_range(p in proptest::collection::vec(1u8..6, 0..10), g in proptest::collection::vec(1u8..6, 0..10)) {
        let (pr, rc, f1) = multiset_prf(&p, &g);
        for v in [pr, rc, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(f1 <= pr.max(rc) + 1e-12);
    }
}
