//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detpipe::boxcluster::{nms_indices, tile_patches, ConsolidateParams, ModelStream};
use detpipe::dataio::{load_dataset, read_json_artifact, BoundingBox, Volume};
use detpipe::empirical::SweepReport;
use detpipe::empirical::EmpiricalParams;
use detpipe::fingerprint::{DatasetFingerprint, ExtentPercentiles, IntensityStats, ObjectsPerCase, SpacingPercentiles};
use detpipe::matching::{atss_match, AnchorGrid, MatchParams};
use detpipe::metrics::{average_precision, cpm, match_greedy, Criterion};
use detpipe::pipeline::{run_stage, BaselineMode, RunConfig, Stage};
use detpipe::planner::{anchor_objective, optimize_anchors, plan_topology, BATCH_SIZE, DEFAULT_ANCHOR_SWEEPS};
use detpipe::seg2det::{components_to_objects, connected_components_3d, instances_from_softmax, write_softmax, SegPostParams, SoftmaxVolume};
use detpipe::synth::{generate_synthetic_dataset, OracleNoise, SynthConfig};

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let elapsed = start.elapsed();
    let outcome = outcome.and_then(|_| ensure(elapsed <= limit, || format!("took {elapsed:.2?}, limit {limit:?}")));
    match &outcome {
        Ok(()) => println!("criterion {id:>2}: PASS  {name} ({elapsed:.2?})"),
        Err(e) => println!("criterion {id:>2}: FAIL  {name} ({elapsed:.2?}): {e}"),
    }
    outcome.is_ok()
}

// 1 ---------------------------------------------------------------------------

fn cpm_anchor() -> Check {
    let v = cpm(&[0.812, 0.885, 0.927, 0.950, 0.969, 0.979, 0.985]).map_err(|e| e.to_string())?;
    ensure((v - 0.930).abs() <= 0.0005, || format!("cpm = {v}"))
}

// 2 ---------------------------------------------------------------------------

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let min = [0, 1, 2].map(|_| rng.random_range(0.0..60.0));
    let size = [0, 1, 2].map(|_| rng.random_range(1.0..20.0));
    BoundingBox::new(min, [0, 1, 2].map(|a| min[a] + size[a]), 0).with_score(rng.random_range(0.0..1.0))
}

/// Suppression-flag formulation: walk by descending score and mark every
/// later box overlapping a surviving one.
fn reference_nms(boxes: &[BoundingBox], thr: f64) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score_or_zero().total_cmp(&boxes[i].score_or_zero()).then(i.cmp(&j)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = BTreeSet::new();
    for (p, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.insert(i);
        for &j in &order[p + 1..] {
            if boxes[i].iou(&boxes[j]) > thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

fn nms_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..100 {
        let boxes: Vec<BoundingBox> = (0..1000).map(|_| random_box(&mut rng)).collect();
        let thr = rng.random_range(0.1..0.9);
        let keys: Vec<f64> = boxes.iter().map(BoundingBox::score_or_zero).collect();
        let got: BTreeSet<usize> = nms_indices(&boxes, &keys, thr).into_iter().collect();
        let want = reference_nms(&boxes, thr);
        ensure(got == want, || format!("instance {inst}: {} kept vs {} in reference", got.len(), want.len()))?;
    }
    Ok(())
}

// 3 ---------------------------------------------------------------------------

/// Direct transcription of the five matching steps over an explicit anchor
/// list: nearest k per level by (distance, id), pool, IoU, mean + population
/// std, threshold.
fn brute_force_atss(g: &BoundingBox, grid: &AnchorGrid, k: usize) -> (Vec<usize>, BTreeSet<usize>) {
    let anchors = grid.anchors();
    let gc = g.center();
    let mut pool = Vec::new();
    for level in 0..grid.level_strides.len() {
        let mut at_level: Vec<(f64, usize)> = anchors
            .iter()
            .filter(|a| a.level == level)
            .map(|a| ((0..3).map(|i| (a.center[i] - gc[i]).powi(2)).sum::<f64>().sqrt(), a.id))
            .collect();
        at_level.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pool.extend(at_level.iter().take(k).map(|x| x.1));
    }
    pool.sort_unstable();
    let ious: Vec<f64> = pool.iter().map(|&id| anchors[id].to_box().iou(g)).collect();
    let n = ious.len() as f64;
    let mean = ious.iter().sum::<f64>() / n;
    let std = (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let t = mean + std;
    let pos = pool.iter().zip(&ious).filter(|(_, &v)| v >= t - 1e-12).map(|(&i, _)| i).collect();
    (pool, pos)
}

fn random_grid(rng: &mut ChaCha8Rng) -> AnchorGrid {
    loop {
        let levels = rng.random_range(1..=3);
        let patch = [0, 1, 2].map(|_| rng.random_range(2..=8usize));
        let strides: Vec<usize> = (0..levels).map(|_| rng.random_range(2..=6usize)).collect();
        if strides.iter().any(|&s| patch.iter().any(|&p| p < s)) {
            continue;
        }
        let positions: usize = strides.iter().map(|&s| patch.iter().map(|p| p / s).product::<usize>()).sum();
        if positions * 27 > 200 {
            continue;
        }
        let sizes = (0..levels)
            .map(|_| (0..27).map(|_| [0, 1, 2].map(|_| rng.random_range(0.5..8.0))).collect())
            .collect();
        let origin = [0, 1, 2].map(|_| rng.random_range(-4..4i64));
        return AnchorGrid::new(origin, patch, strides, sizes).expect("valid grid");
    }
}

fn atss_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in 0..200 {
        let grid = random_grid(&mut rng);
        let k = rng.random_range(1..=30);
        let gt: Vec<BoundingBox> = (0..rng.random_range(0..=10))
            .map(|_| {
                let c = [0, 1, 2].map(|a| grid.origin[a] as f64 + rng.random_range(-2.0..grid.patch_size[a] as f64 + 2.0));
                let s = [0, 1, 2].map(|_| rng.random_range(0.5..8.0));
                BoundingBox::centered(c, s, 0)
            })
            .collect();
        let got = atss_match(&gt, &grid, &MatchParams { k, center_inside_required: false });
        for (g, m) in gt.iter().zip(&got) {
            let (cand, pos) = brute_force_atss(g, &grid, k);
            ensure(m.candidates == cand && m.positives == pos, || format!("configuration {cfg} disagrees"))?;
        }
    }
    // a gt between anchor centers (at 2 and 6 per axis) still gets positives
    let sizes = vec![(0..27).map(|i| [1.0 + (i % 3) as f64, 1.0 + (i / 3 % 3) as f64, 1.0 + (i / 9) as f64]).collect()];
    let grid = AnchorGrid::new([0; 3], [8; 3], vec![4], sizes).map_err(|e| e.to_string())?;
    let small = BoundingBox::new([3.2; 3], [3.8; 3], 0);
    let centers_inside = grid.anchors().iter().filter(|a| (0..3).all(|i| a.center[i] > 3.2 && a.center[i] < 3.8)).count();
    let m = &atss_match(&[small], &grid, &MatchParams::default())[0];
    ensure(centers_inside == 0 && !m.positives.is_empty(), || "small gt without inside centers has no positive".into())
}

// 4 ---------------------------------------------------------------------------

fn cube(x: f64, score: Option<f64>) -> BoundingBox {
    let mut b = BoundingBox::new([x, 0.0, 0.0], [x + 4.0, 4.0, 4.0], 0);
    b.score = score;
    b
}

fn brute_force_ap(labels: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut cuts: Vec<f64> = labels.iter().map(|l| l.0).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let pr: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&s| {
            let tp = labels.iter().filter(|l| l.0 >= s && l.1).count() as f64;
            let n = labels.iter().filter(|l| l.0 >= s).count() as f64;
            (tp / num_gt as f64, tp / n)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..pr.len() {
        let p = pr[i..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (pr[i].0 - prev) * p;
        prev = pr[i].0;
    }
    ap
}

fn ap_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..500 {
        let num_gt = rng.random_range(1..=6);
        let gt: Vec<BoundingBox> = (0..num_gt).map(|j| cube(10.0 * j as f64, None)).collect();
        let preds: Vec<BoundingBox> = (0..rng.random_range(0..=10))
            .map(|_| cube(10.0 * rng.random_range(0..num_gt + 3) as f64, Some(f64::from(rng.random_range(0..6u8)) / 5.0)))
            .collect();
        let m = match_greedy(&[("a".to_string(), preds)].into(), &[("a".to_string(), gt)].into(), 0.1, Criterion::Iou);
        let labels: Vec<(f64, bool)> = m.preds.iter().map(|p| (p.score, p.gt.is_some())).collect();
        let ap = average_precision(&m, 0).unwrap();
        let oracle = brute_force_ap(&labels, num_gt);
        ensure((ap - oracle).abs() < 1e-9, || format!("instance {inst}: {ap} vs {oracle}"))?;
    }
    let gt = vec![cube(0.0, None), cube(20.0, None)];
    let preds = vec![cube(0.0, Some(0.9)), cube(50.0, Some(0.8)), cube(20.0, Some(0.7))];
    let m = match_greedy(&[("a".to_string(), preds)].into(), &[("a".to_string(), gt)].into(), 0.1, Criterion::Iou);
    let ap = average_precision(&m, 0).unwrap();
    ensure((ap - 5.0 / 6.0).abs() < 1e-12, || format!("worked example gives {ap}"))
}

// 5 ---------------------------------------------------------------------------

/// Breadth-first flood fill under 26-connectivity, seeds in scan order.
fn flood_fill(mask: &Volume<bool>) -> Vec<u32> {
    let [nx, ny, nz] = mask.dims;
    let mut label = vec![0u32; mask.data.len()];
    let mut next = 0;
    for start in 0..mask.data.len() {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let [x, y, z] = mask.coords(i).map(|v| v as i64);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                            continue;
                        }
                        let j = mask.index(qx as usize, qy as usize, qz as usize);
                        if mask.data[j] && label[j] == 0 {
                            label[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    label
}

fn cc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..50 {
        let density = rng.random_range(0.05..0.35);
        let mask = Volume {
            dims: [32; 3],
            spacing_mm: [1.0; 3],
            data: (0..32 * 32 * 32).map(|_| rng.random_bool(density)).collect(),
        };
        let cs = connected_components_3d(&mask, 0).map_err(|e| e.to_string())?;
        let oracle = flood_fill(&mask);
        let got: Vec<u32> = cs.labelmap.data.iter().map(|&v| u32::from(v)).collect();
        ensure(got == oracle, || format!("mask {inst} (density {density:.2}) partitions differ"))?;
    }
    let mut mask = Volume::filled([3, 3, 3], [1.0; 3], false);
    mask.set(0, 0, 0, true);
    mask.set(1, 1, 1, true);
    let cs = connected_components_3d(&mask, 0).map_err(|e| e.to_string())?;
    ensure(cs.components.len() == 1, || "diagonal voxels split".into())
}

// 6 ---------------------------------------------------------------------------

fn diameter_filter() -> Check {
    let none = BTreeSet::new();
    for (extent, keep) in [([2.0, 2.0, 2.0], false), ([3.0, 1.0, 1.0], true), ([5.0, 5.0, 5.0], true)] {
        let mut mask = Volume::filled([2, 2, 2], extent, false);
        mask.set(0, 0, 0, true);
        let cs = connected_components_3d(&mask, 0).map_err(|e| e.to_string())?;
        let kept = components_to_objects(&cs, extent, 3.0, &none).len() == 1;
        ensure(kept == keep, || format!("extent {extent:?} mm: kept = {kept}"))?;
    }
    Ok(())
}

// 7 ---------------------------------------------------------------------------

fn cubes(edges: &[(f64, usize)]) -> Vec<BoundingBox> {
    edges
        .iter()
        .flat_map(|&(e, n)| (0..n).map(move |_| BoundingBox::new([0.0; 3], [e; 3], 0)))
        .collect()
}

/// Best isotropic triple on a half-voxel grid: the same three sizes on every
/// axis, exhaustively.
fn grid_search_oracle(boxes: &[BoundingBox]) -> f64 {
    let values: Vec<f64> = (4..=48).map(|i| f64::from(i) / 2.0).collect();
    let extents: Vec<[f64; 3]> = boxes.iter().map(BoundingBox::size).collect();
    let mut best = 0.0f64;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            for k in j + 1..values.len() {
                let t = [values[i], values[j], values[k]];
                best = best.max(anchor_objective(&[t, t, t], &extents));
            }
        }
    }
    best
}

/// Edges drawn per axis independently from {4, 8, 16} with the given weights.
fn mixed_boxes(rng: &mut ChaCha8Rng, n: usize, weights: [f64; 3]) -> Vec<BoundingBox> {
    let total: f64 = weights.iter().sum();
    let mut edge = || {
        let mut u = rng.random_range(0.0..total);
        for (w, e) in weights.iter().zip([4.0, 8.0, 16.0]) {
            if u < *w {
                return e;
            }
            u -= w;
        }
        16.0
    };
    (0..n).map(|_| BoundingBox::new([0.0; 3], [edge(), edge(), edge()], 0)).collect()
}

fn anchor_optimizer() -> Check {
    for (seed, edge) in [(1u64, 5.0), (2, 8.0), (3, 14.0), (4, 23.0)] {
        let boxes = cubes(&[(edge, 12)]);
        let plan = optimize_anchors(&boxes, DEFAULT_ANCHOR_SWEEPS, seed).map_err(|e| e.to_string())?;
        ensure(plan.anchors.len() == 27, || "anchor count".into())?;
        ensure(plan.objective() >= 0.99, || format!("mono {edge}: objective {}", plan.objective()))?;
        let recovered = plan.anchors.iter().any(|a| a.iter().all(|&v| (v - edge).abs() <= 0.05 * edge));
        ensure(recovered, || format!("mono {edge}: no anchor within 5%"))?;
        ensure(plan.objective_trace.windows(2).all(|w| w[0] <= w[1]), || "trace decreased".into())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // uneven weights so the percentile initialization misses a size
    for (seed, weights) in [(5u64, [1.0, 1.0, 1.0]), (6, [0.55, 0.1, 0.35]), (7, [0.2, 0.1, 0.7])] {
        let boxes = mixed_boxes(&mut rng, 120, weights);
        let plan = optimize_anchors(&boxes, DEFAULT_ANCHOR_SWEEPS, seed).map_err(|e| e.to_string())?;
        let oracle = grid_search_oracle(&boxes);
        ensure(plan.anchors.len() == 27, || "anchor count".into())?;
        ensure(plan.objective() >= 0.9, || format!("mixed {weights:?}: objective {}", plan.objective()))?;
        ensure(plan.objective() >= 0.98 * oracle, || format!("mixed {weights:?}: {} vs oracle {oracle}", plan.objective()))?;
        ensure(plan.objective_trace.windows(2).all(|w| w[0] <= w[1]), || "trace decreased".into())?;
    }
    Ok(())
}

// 8 ---------------------------------------------------------------------------

fn random_fingerprint(rng: &mut ChaCha8Rng) -> DatasetFingerprint {
    let spacing = [0, 1, 2].map(|_| rng.random_range(0.3..6.0));
    let shape = [0, 1, 2].map(|_| rng.random_range(8..600usize));
    let p99 = [0, 1, 2].map(|_| rng.random_range(1.0..150.0));
    DatasetFingerprint {
        num_cases: 1,
        num_classes: 1,
        median_shape: shape,
        median_extent_mm: [0, 1, 2].map(|a| shape[a] as f64 * spacing[a]),
        spacing_percentiles: [0, 1, 2].map(|a| SpacingPercentiles {
            p10: spacing[a] * rng.random_range(0.5..1.0),
            p50: spacing[a],
            p90: spacing[a] * rng.random_range(1.0..1.5),
        }),
        anisotropy_ratio: 1.0,
        intensity_global: IntensityStats::default(),
        object_extent_percentiles_mm: Some(p99.map(|v| ExtentPercentiles {
            p10: v / 8.0,
            p25: v / 4.0,
            p50: v / 2.0,
            p75: v / 1.5,
            p90: v / 1.2,
            p99: v,
        })),
        objects_per_case: ObjectsPerCase { min: 1, median: 1.0, max: 1 },
        class_counts: BTreeMap::new(),
    }
}

fn topology_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let fp = random_fingerprint(&mut rng);
        let budget = [32u64.pow(3), 64u64.pow(3), 96 * 96 * 96, 128u64.pow(3), 160u64.pow(3)][rng.random_range(0..5)];
        let topo = plan_topology(&fp, budget).map_err(|e| format!("fingerprint {i}: {e}"))?;
        topo.check_invariants().map_err(|e| format!("fingerprint {i}: {e}"))?;
        ensure(topo.batch_size == BATCH_SIZE && BATCH_SIZE == 4, || "batch size".into())?;
        for a in 0..3 {
            ensure(topo.patch_size[a] % (1 << topo.num_pool_per_axis[a]) == 0, || format!("fingerprint {i}: divisibility"))?;
            ensure(topo.num_pool_per_axis[a] <= 6, || format!("fingerprint {i}: too many pools"))?;
            ensure(topo.deepest_extent()[a] >= 4, || format!("fingerprint {i}: deepest extent"))?;
        }
    }
    Ok(())
}

// 9 ---------------------------------------------------------------------------

fn gt_and_predictions(dataset_root: &Path, workdir: &Path) -> std::result::Result<(BTreeMap<String, Vec<BoundingBox>>, BTreeMap<String, Vec<BoundingBox>>), String> {
    let ds = load_dataset(dataset_root).map_err(|e| e.to_string())?;
    let mut gt = BTreeMap::new();
    let mut preds = BTreeMap::new();
    for c in &ds.cases {
        gt.insert(c.id.clone(), c.objects.clone());
        let p: Vec<BoundingBox> = read_json_artifact(workdir.join("predictions").join(format!("{}.json", c.id))).map_err(|e| e.to_string())?;
        preds.insert(c.id.clone(), p);
    }
    Ok((gt, preds))
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds_root = tmp.path().join("ds");
    let synth = SynthConfig {
        num_cases: 20,
        dims: [64; 3],
        object_edge_range: [(4, 16); 3],
        objects_per_case: (1, 4),
        seed: 9,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&synth, &ds_root).map_err(|e| e.to_string())?;

    let mut cfg = RunConfig::new(&ds_root, tmp.path().join("zero"));
    cfg.noise = OracleNoise::zero();
    cfg.overlap = 0.5;
    run_stage(&cfg, Stage::All).map_err(|e| e.to_string())?;
    let (gt, preds) = gt_and_predictions(&ds_root, &cfg.workdir)?;
    let m = match_greedy(&preds, &gt, 0.1, Criterion::Iou);
    let map = average_precision(&m, 0).unwrap_or(0.0);
    let (np, ng) = (preds.values().map(Vec::len).sum::<usize>(), gt.values().map(Vec::len).sum::<usize>());
    ensure(map == 1.0 && np == ng, || format!("zero noise: mAP {map}, {np} predictions for {ng} objects"))?;

    // objects that straddle patches of a 32³ tiling are deduplicated too when
    // they lie fully inside the overlap
    let grid = tile_patches([64; 3], [32; 3], 0.5).map_err(|e| e.to_string())?;
    let obj = BoundingBox::from_voxels([20, 20, 20], [28, 28, 28], 0);
    let stream = |tta: u32| ModelStream {
        model: 0,
        tta,
        patches: (0..grid.len())
            .filter(|&p| {
                let (lo, hi) = grid.bounds(p);
                (0..3).all(|a| lo[a] <= obj.min[a] && obj.max[a] <= hi[a])
            })
            .map(|p| (p, vec![obj.clone().with_score(0.9)]))
            .collect(),
    };
    let streams = [stream(0), stream(1)];
    let patches_seeing = streams[0].patches.len();
    let merged = detpipe::boxcluster::consolidate_case(&streams, &grid, &ConsolidateParams::default()).map_err(|e| e.to_string())?;
    ensure(patches_seeing > 1 && merged.len() == 1, || format!("{patches_seeing} patches gave {} boxes", merged.len()))?;

    let mut noisy = RunConfig::new(&ds_root, tmp.path().join("noisy"));
    noisy.noise = OracleNoise {
        center_jitter_voxels: 1.0,
        fp_per_patch: 0.5,
        drop_rate: 0.1,
        ..OracleNoise::noisy()
    };
    for stage in [Stage::Fingerprint, Stage::Plan, Stage::Simulate, Stage::Sweep] {
        run_stage(&noisy, stage).map_err(|e| e.to_string())?;
    }
    let report: SweepReport<EmpiricalParams> = read_json_artifact(noisy.workdir.join("sweep.json")).map_err(|e| e.to_string())?;
    let t = &report.objective_trace;
    ensure(t.windows(2).all(|w| w[0] <= w[1]), || format!("trace {t:?}"))?;
    ensure(t.last() >= t.first(), || format!("post-sweep below initialization: {t:?}"))
}

// 10 --------------------------------------------------------------------------

fn baseline_property() -> Check {
    let n = 10 * 10 * 10;
    let mut bg = vec![1.0f32; n];
    let mut fg = vec![0.0f32; n];
    for z in 3..7 {
        for y in 3..7 {
            for x in 3..7 {
                let i = x + 10 * (y + 10 * z);
                bg[i] = 0.55;
                fg[i] = 0.45;
            }
        }
    }
    let sm = SoftmaxVolume {
        dims: [10; 3],
        spacing_mm: [1.0; 3],
        channels: vec![bg, fg],
    };
    let basic = instances_from_softmax(&sm, &SegPostParams::basic()).map_err(|e| e.to_string())?;
    let plus = instances_from_softmax(&sm, &SegPostParams { softmax_threshold: 0.4, ..SegPostParams::basic() }).map_err(|e| e.to_string())?;
    ensure(basic.is_empty() && plus.len() == 1, || format!("basic {} / plus {}", basic.len(), plus.len()))
}

// 11 --------------------------------------------------------------------------

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn softmax_from_labels(labels: &Volume<u16>) -> SoftmaxVolume {
    let fg: Vec<f32> = labels.data.iter().map(|&v| if v != 0 { 0.8 } else { 0.1 }).collect();
    SoftmaxVolume {
        dims: labels.dims,
        spacing_mm: labels.spacing_mm,
        channels: vec![fg.iter().map(|v| 1.0 - v).collect(), fg],
    }
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds_root = tmp.path().join("ds");
    let synth = SynthConfig {
        num_cases: 8,
        dims: [32; 3],
        object_edge_range: [(3, 8); 3],
        num_classes: 2,
        sphere_fraction: 0.5,
        seed: 11,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&synth, &ds_root).map_err(|e| e.to_string())?;
    for c in &ds.cases {
        let labels = ds.load_labels(c).map_err(|e| e.to_string())?.unwrap();
        write_softmax(&ds_root, &c.id, &softmax_from_labels(&labels)).map_err(|e| e.to_string())?;
    }

    let stages = [
        Stage::ConvertLabels,
        Stage::Fingerprint,
        Stage::Plan,
        Stage::Simulate,
        Stage::Sweep,
        Stage::Consolidate,
        Stage::Evaluate,
        Stage::Baseline,
    ];
    let run_all = |workdir: PathBuf, jobs: usize| -> std::result::Result<RunConfig, String> {
        let mut cfg = RunConfig::new(&ds_root, workdir);
        cfg.seed = 5;
        cfg.folds = 3;
        cfg.jobs = Some(jobs);
        cfg.baseline_mode = BaselineMode::Plus;
        for stage in stages {
            run_stage(&cfg, stage).map_err(|e| format!("{stage:?}: {e}"))?;
        }
        Ok(cfg)
    };
    let a = run_all(tmp.path().join("a"), 1)?;
    run_all(tmp.path().join("b"), 4)?;
    let (fa, fb) = (collect_files(&tmp.path().join("a")), collect_files(&tmp.path().join("b")));
    ensure(fa.len() > 20, || format!("only {} artifacts", fa.len()))?;
    ensure(fa == fb, || {
        let diff: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
        format!("artifacts differ across runs: {diff:?}")
    })?;
    // rerunning each stage in place leaves every artifact unchanged
    for stage in stages {
        run_stage(&a, stage).map_err(|e| format!("{stage:?}: {e}"))?;
    }
    ensure(collect_files(&a.workdir) == fa, || "rerun changed artifacts".into())
}

fn main() {
    let checks: Vec<(&str, Duration, fn() -> Check)> = vec![
        ("CPM of a reference sensitivity row is 0.930", Duration::from_secs(1), cpm_anchor),
        ("greedy NMS equals the O(n²) reference", Duration::from_secs(5), nms_oracle),
        ("ATSS equals the brute-force definition", Duration::from_secs(60), atss_oracle),
        ("envelope AP equals all-cut integration", Duration::from_secs(60), ap_oracle),
        ("connected components equal flood fill", Duration::from_secs(60), cc_oracle),
        ("3 mm diameter filter", Duration::from_secs(1), diameter_filter),
        ("anchor optimizer recovers sizes", Duration::from_secs(120), anchor_optimizer),
        ("topology invariants over random fingerprints", Duration::from_secs(60), topology_invariants),
        ("end-to-end synthetic pipeline", Duration::from_secs(120), end_to_end),
        ("thresholded baseline recovers argmax loser", Duration::from_secs(1), baseline_property),
        ("stage artifacts are byte-identical on rerun", Duration::from_secs(120), determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in checks.into_iter().enumerate() {
        if !run(i + 1, name, limit, f) {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
