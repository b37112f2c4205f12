//! Acceptance suite: one line of `ACCEPTANCE <criterion>: PASS|FAIL` per criterion, then the
//! usual assertion. Oracles here are written independently of the library code they check.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclodet_core::augment::Sample;
use cyclodet_core::cyclone_track::{centers_for_series, find_local_minima, link_tracks, TrackerConfig};
use cyclodet_core::detector::loss::mine_hard_negatives;
use cyclodet_core::detector::{
    decode, encode, infer, match_priors, multibox_loss, multibox_loss_with_grad, InferConfig, LossConfig, LossRecord, MatchAssignment,
    MiniSsd, ModelConfig, PriorBox, PriorPredictions, PriorTarget, Real, TrainConfig, Trainer,
};
use cyclodet_core::eval::{average_precision, evaluate, mean_ap, pr_curve, GroundTruth, Interpolation, ScoredBox};
use cyclodet_core::grid::{haversine_km, GridGeometry, LatLon, EARTH_RADIUS_KM};
use cyclodet_core::labelstore::{next_state, ActorRole, ReviewAction, ReviewState};
use cyclodet_core::labelstore::{
    category_counts, export_dataset, import_dataset, split_train_test, LabelStore, LabeledBox, NewAnnotation, Split,
};
use cyclodet_core::raster::Raster;
use cyclodet_core::synth::{gen_dataset, gen_mslp_series, random_lows, PlantedLow, SynthDataset, SynthDatasetConfig};
use cyclodet_core::{BoundingBox, Rect, StageClass};

/// Written straight to the process stdout so the line shows up without `--nocapture`.
fn report(name: &str, ok: bool, detail: &str) {
    use std::io::Write;
    let line = format!("ACCEPTANCE {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
}

// ---------------------------------------------------------------------------------------------
// Tracker closed loop

const MAX_STEP_KM: f64 = 333.36;
const SERIES: u64 = 20;
const FRAMES: usize = 12;

type Path = Vec<(usize, usize, usize)>;

fn cells_of(low: &PlantedLow, g: &GridGeometry) -> Path {
    low.path.iter().enumerate().filter_map(|(f, p)| p.map(|p| {
        let (i, j) = g.cell_of(p);
        (f, i, j)
    })).collect()
}

fn far_from_all(lows: &[PlantedLow], path: &[Option<LatLon>], min_deg: f64) -> bool {
    path.iter().enumerate().all(|(f, p)| {
        p.map_or(true, |p| lows.iter().all(|l| l.position(f).map_or(true, |q| haversine_km(p, q) >= min_deg * 111.19)))
    })
}

/// A low that lives long enough but jumps three cells east per frame (over 333.36 km at any
/// latitude below 66N).
fn speeding_low(g: &GridGeometry, lows: &[PlantedLow], rng: &mut ChaCha8Rng) -> PlantedLow {
    loop {
        let len = rng.gen_range(4..=8);
        let start = rng.gen_range(0..=FRAMES - len);
        let i_lat = (0..g.n_lat).filter(|&i| (35.0..=60.0).contains(&g.lat_of(i))).nth(rng.gen_range(0..11)).unwrap();
        let i_lon = rng.gen_range(0..g.n_lon) as isize;
        let mut path = vec![None; FRAMES];
        for (k, f) in (start..start + len).enumerate() {
            path[f] = Some(g.position(i_lat, g.wrap_lon(i_lon + 3 * k as isize)));
        }
        let pts: Vec<LatLon> = path.iter().flatten().copied().collect();
        assert!(pts.windows(2).all(|w| haversine_km(w[0], w[1]) > MAX_STEP_KM));
        if far_from_all(lows, &path, 25.0) {
            return PlantedLow { path, depth: rng.gen_range(1500.0..3000.0), radius: 4.0 };
        }
    }
}

/// A well-behaved low that only lasts two or three frames.
fn short_low(g: &GridGeometry, lows: &[PlantedLow], rng: &mut ChaCha8Rng) -> PlantedLow {
    loop {
        let len = rng.gen_range(2..=3);
        let start = rng.gen_range(0..=FRAMES - len);
        let i_lat = (0..g.n_lat).filter(|&i| (40.0..=60.0).contains(&g.lat_of(i))).nth(rng.gen_range(0..9)).unwrap();
        let i_lon = rng.gen_range(0..g.n_lon) as isize;
        let mut path = vec![None; FRAMES];
        for (k, f) in (start..start + len).enumerate() {
            path[f] = Some(g.position(i_lat, g.wrap_lon(i_lon + k as isize)));
        }
        if far_from_all(lows, &path, 25.0) {
            return PlantedLow { path, depth: rng.gen_range(1500.0..3000.0), radius: 4.0 };
        }
    }
}

/// A shallower, tighter low riding three rows (7.5 deg) poleward of `host`.
fn companion_of(host: &PlantedLow, g: &GridGeometry) -> PlantedLow {
    let path = host
        .path
        .iter()
        .map(|p| {
            p.map(|p| {
                let (i, j) = g.cell_of(p);
                g.position(i - 3, j)
            })
        })
        .collect();
    PlantedLow { path, depth: 0.5 * host.depth, radius: 1.5 }
}

#[test]
fn tracker_closed_loop() {
    let g = GridGeometry::global(144, 73);
    let cfg = TrackerConfig::default();
    let t0 = Instant::now();
    let (mut planted, mut recovered, mut violations, mut leaked) = (0, 0, 0, 0);
    let mut failures = Vec::new();
    for seed in 0..SERIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let valid = random_lows(3, FRAMES, &g, (4, 8), 25.0, MAX_STEP_KM, &mut rng).unwrap();
        let mut all = valid.clone();
        let speeding = speeding_low(&g, &all, &mut rng);
        all.push(speeding.clone());
        let short = short_low(&g, &all, &mut rng);
        all.push(short.clone());
        // The companion only appears next to a host that sits low enough for it to stay on the grid.
        let host = valid.iter().find(|l| l.path.iter().flatten().all(|p| p.lat <= 62.5)).expect("a host low below 62.5N");
        let companion = companion_of(host, &g);
        all.push(companion.clone());

        let (series, _) = gen_mslp_series(101_325.0, &all, FRAMES, g, 1.0, seed).unwrap();

        // The companion is a genuine local minimum: it shows up once the neighbor rule is relaxed to nothing.
        let loose = TrackerConfig { neighbor_min_deg: 1e-6, ..cfg.clone() };
        let companion_cells: BTreeSet<_> = cells_of(&companion, &g).into_iter().collect();
        for (f, grid) in series.frames().iter().enumerate() {
            let raw: BTreeSet<_> = find_local_minima(grid, &loose).unwrap().iter().map(|c| (f, c.i_lat, c.i_lon)).collect();
            assert!(companion_cells.iter().filter(|c| c.0 == f).all(|c| raw.contains(c)), "seed {seed}: companion not a minimum");
        }

        let tracks = link_tracks(&centers_for_series(&series, &cfg).unwrap(), &cfg);
        let found: BTreeSet<Path> =
            tracks.iter().map(|t| t.centers().iter().map(|c| (c.frame_index, c.i_lat, c.i_lon)).collect()).collect();
        let expected: BTreeSet<Path> = valid.iter().map(|l| cells_of(l, &g)).collect();
        planted += expected.len();
        recovered += expected.intersection(&found).count();
        for bad in [&speeding, &short, &companion] {
            violations += 1;
            let cells: BTreeSet<_> = cells_of(bad, &g).into_iter().collect();
            if found.iter().any(|p| p.iter().any(|c| cells.contains(c))) {
                leaked += 1;
            }
        }
        if found != expected {
            failures.push(seed);
        }
    }
    let elapsed = t0.elapsed();
    let ok = recovered == planted && leaked == 0 && failures.is_empty() && elapsed < Duration::from_secs(10);
    report(
        "tracker closed loop",
        ok,
        &format!(
            "{recovered}/{planted} planted tracks exact, {leaked}/{violations} violations leaked, mismatched seeds {failures:?}, {:.2}s < 10s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------------
// Loss oracle

fn neg_log_softmax(pred: &PriorPredictions) -> Vec<Vec<f64>> {
    let labels = pred.n_labels;
    let mut neg_log_p = vec![vec![0.0f64; labels]; pred.n_priors];
    for p in 0..pred.n_priors {
        let mut m = f64::NEG_INFINITY;
        for k in 0..labels {
            m = m.max(pred.logits[p * labels + k] as f64);
        }
        let mut z = 0.0;
        for k in 0..labels {
            z += (pred.logits[p * labels + k] as f64 - m).exp();
        }
        for k in 0..labels {
            neg_log_p[p][k] = -(pred.logits[p * labels + k] as f64 - m - z.ln());
        }
    }
    neg_log_p
}

/// Hard negatives by repeated argmax of the background loss.
fn oracle_negatives(pred: &PriorPredictions, a: &MatchAssignment, ratio: usize) -> Vec<usize> {
    let neg_log_p = neg_log_softmax(pred);
    let n = a.targets.iter().filter(|t| matches!(t, PriorTarget::Object { .. })).count();
    let mut taken = vec![false; pred.n_priors];
    let mut picked = Vec::new();
    for _ in 0..ratio * n {
        let mut best: Option<usize> = None;
        for p in 0..pred.n_priors {
            if matches!(a.targets[p], PriorTarget::Background) && !taken[p] {
                if best.map_or(true, |b| neg_log_p[p][0] > neg_log_p[b][0]) {
                    best = Some(p);
                }
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        picked.push(b);
    }
    picked
}

/// Unnormalized (conf, loc, positives) with the negative set given.
fn scalar_loss_with(pred: &PriorPredictions, a: &MatchAssignment, negatives: &[usize]) -> (f64, f64, usize) {
    let neg_log_p = neg_log_softmax(pred);
    let mut n = 0;
    let (mut conf, mut loc) = (0.0, 0.0);
    for p in 0..pred.n_priors {
        if let PriorTarget::Object { stage, offsets, .. } = a.targets[p] {
            n += 1;
            conf += neg_log_p[p][stage.code() + 1];
            for k in 0..4 {
                let d = pred.offsets[p * 4 + k] as f64 - offsets[k];
                loc += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        }
    }
    conf += negatives.iter().map(|&p| neg_log_p[p][0]).sum::<f64>();
    (conf, loc, n)
}

/// Straight-line reference: softmax per prior, hard negatives picked by repeated argmax.
fn scalar_loss(pred: &PriorPredictions, a: &MatchAssignment, ratio: usize) -> (f64, f64, usize) {
    scalar_loss_with(pred, a, &oracle_negatives(pred, a, ratio))
}

fn random_fixture(rng: &mut ChaCha8Rng) -> (PriorPredictions, MatchAssignment) {
    let priors = rng.gen_range(1..=16);
    let labels = rng.gen_range(2..=4);
    let mut pred = PriorPredictions::zeros(priors, labels);
    for v in pred.logits.iter_mut() {
        *v = rng.gen_range(-6.0..6.0);
    }
    for v in pred.offsets.iter_mut() {
        *v = rng.gen_range(-3.0..3.0);
    }
    let p_pos = rng.gen_range(0.0..0.6);
    let targets = (0..priors)
        .map(|_| {
            if rng.gen_bool(p_pos) {
                let stage = StageClass::from_code(rng.gen_range(0..labels - 1)).unwrap();
                PriorTarget::Object { gt: 0, stage, offsets: [0; 4].map(|_| rng.gen_range(-3.0..3.0)) }
            } else {
                PriorTarget::Background
            }
        })
        .collect();
    (pred, MatchAssignment { targets })
}

#[test]
fn loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    let mut fixtures = 0;
    while fixtures < 100 {
        let (pred, a) = random_fixture(&mut rng);
        let alpha = rng.gen_range(0.5..2.0);
        let ratio = rng.gen_range(1..=4);
        let got = multibox_loss(&pred, &a, alpha, ratio).unwrap();
        let (conf, loc, n) = scalar_loss(&pred, &a, ratio);
        assert_eq!(got.n, n);
        if n == 0 {
            zero_ok &= got.total == 0.0 && got.conf == 0.0 && got.loc == 0.0;
        } else {
            let want = (conf + alpha * loc) / n as f64;
            worst = worst.max(((got.total - want) / want).abs());
        }
        fixtures += 1;
    }
    // Batched form: sums over images, one shared normalizer.
    for _ in 0..20 {
        let batch: Vec<_> = (0..3).map(|_| random_fixture(&mut rng)).collect();
        let labels = batch[0].0.n_labels;
        let batch: Vec<_> = batch
            .into_iter()
            .filter(|(p, a)| p.n_labels == labels && a.targets.iter().all(|t| t.label() < labels))
            .collect();
        let preds: Vec<_> = batch.iter().map(|(p, _)| p.clone()).collect();
        let assigns: Vec<_> = batch.iter().map(|(_, a)| a.clone()).collect();
        let (got, _) = multibox_loss_with_grad(&preds, &assigns, &LossConfig { alpha: 1.0, neg_pos_ratio: 3 }).unwrap();
        let (mut conf, mut loc, mut n) = (0.0, 0.0, 0);
        for (p, a) in &batch {
            let (c, l, k) = scalar_loss(p, a, 3);
            conf += c;
            loc += l;
            n += k;
        }
        if n == 0 {
            zero_ok &= got.total == 0.0;
        } else {
            worst = worst.max(((got.total - (conf + loc) / n as f64) / got.total).abs());
        }
    }
    let mut empty = PriorPredictions::zeros(5, 4);
    empty.logits.iter_mut().enumerate().for_each(|(i, v)| *v = (i as Real * 0.7).sin() * 4.0);
    let l = multibox_loss(&empty, &MatchAssignment::background(5), 1.0, 3).unwrap();
    zero_ok &= l.total == 0.0;
    let ok = worst < 1e-9 && zero_ok;
    report("loss oracle", ok, &format!("100 fixtures + 20 batches, max relative error {worst:.2e} < 1e-9, N = 0 gives exactly 0: {zero_ok}"));
    assert!(ok);
}

#[test]
fn mined_negatives_are_the_hardest() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (pred, a) = random_fixture(&mut rng);
        let mined = mine_hard_negatives(&pred, &a, 3);
        let bg: Vec<usize> = (0..pred.n_priors).filter(|&p| !a.is_positive(p)).collect();
        assert_eq!(mined.len(), bg.len().min(3 * a.num_positive()));
        let loss = |p: usize| {
            let row = pred.logits_of(p);
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln() - row[0]
        };
        let floor = mined.iter().map(|&p| loss(p)).fold(Real::INFINITY, Real::min);
        assert!(bg.iter().filter(|p| !mined.contains(p)).all(|&p| loss(p) <= floor));
    }
}

// ---------------------------------------------------------------------------------------------
// Gradient check

/// Batch loss through the scalar reference with each image's negative set held fixed. Mining is
/// piecewise constant in the parameters, so a +-eps probe could otherwise straddle a change of
/// selection that the analytic gradient never sees.
fn batch_loss(model: &MiniSsd, images: &[Vec<Real>], assigns: &[MatchAssignment], negatives: &[Vec<usize>]) -> f64 {
    let (mut conf, mut loc, mut n) = (0.0, 0.0, 0);
    for ((x, a), neg) in images.iter().zip(assigns).zip(negatives) {
        let (c, l, k) = scalar_loss_with(&model.predict(x).unwrap(), a, neg);
        conf += c;
        loc += l;
        n += k;
    }
    (conf + loc) / n as f64
}

#[test]
fn gradients_match_finite_differences() {
    let t0 = Instant::now();
    let cfg = ModelConfig::reduced();
    let eps = 1e-3;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut tensors = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut model = MiniSsd::new(cfg.clone(), seed).unwrap();
        // Perturb biases too so no tensor sits at a symmetric point.
        for p in model.params_mut() {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let side = cfg.input_size;
        let mut images = Vec::new();
        let mut assigns = Vec::new();
        for _ in 0..2 {
            let mut img = Raster::new(side, side);
            for v in img.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            images.push(model.input_from_raster(&img).unwrap());
            let gts: Vec<LabeledBox> = (0..3)
                .map(|k| {
                    let (cx, cy) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
                    let (w, h) = (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5));
                    let bbox = BoundingBox::clamped(Rect::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)).unwrap();
                    LabeledBox { bbox, stage: StageClass::ALL[k] }
                })
                .collect();
            assigns.push(match_priors(model.priors(), &gts, 0.5).unwrap());
        }
        let preds_caches: Vec<_> = images.iter().map(|x| model.forward(x).unwrap()).collect();
        let preds: Vec<_> = preds_caches.iter().map(|(p, _)| p.clone()).collect();
        let (_, d_preds) = multibox_loss_with_grad(&preds, &assigns, &LossConfig::default()).unwrap();
        let negatives: Vec<Vec<usize>> = preds.iter().zip(&assigns).map(|(p, a)| oracle_negatives(p, a, 3)).collect();
        for ((p, a), neg) in preds.iter().zip(&assigns).zip(&negatives) {
            let mut mined = mine_hard_negatives(p, a, 3);
            let mut neg = neg.clone();
            mined.sort_unstable();
            neg.sort_unstable();
            assert_eq!(mined, neg, "fixture {seed}: mined set disagrees with the oracle");
        }
        let mut grads = model.zero_grads();
        for ((_, cache), d) in preds_caches.iter().zip(&d_preds) {
            model.backward(cache, d, &mut grads).unwrap();
        }
        for t in 0..model.params().len() {
            let mut diff2 = 0.0;
            let (mut a2, mut f2) = (0.0, 0.0);
            for i in 0..model.params()[t].data.len() {
                let orig = model.params()[t].data[i];
                model.params_mut()[t].data[i] = orig + eps as Real;
                let up = batch_loss(&model, &images, &assigns, &negatives);
                model.params_mut()[t].data[i] = orig - eps as Real;
                let down = batch_loss(&model, &images, &assigns, &negatives);
                model.params_mut()[t].data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads[t][i] as f64;
                diff2 += (an - fd).powi(2);
                a2 += an * an;
                f2 += fd * fd;
            }
            let rel = diff2.sqrt() / a2.sqrt().max(f2.sqrt()).max(1e-12);
            tensors += 1;
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{} (fixture {seed})", model.params()[t].name));
            }
        }
    }
    let elapsed = t0.elapsed();
    let ok = worst.0 < 1e-4 && elapsed < Duration::from_secs(120);
    report(
        "gradient check",
        ok,
        &format!("{tensors} tensors over 5 fixtures, worst relative error {:.2e} at {} < 1e-4, {:.1}s < 120s", worst.0, worst.1, elapsed.as_secs_f64()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------------
// mAP oracle

/// Recomputes the matching from scratch for every score cut-off and integrates the
/// interpolated precision exactly over recall.
fn exhaustive_ap(dets: &[ScoredBox], gts: &[GroundTruth], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut pr = Vec::new();
    for cut in 1..=order.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &d in &order[..cut] {
            let mut best = None;
            let mut best_iou = thr;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image != dets[d].image {
                    continue;
                }
                let v = dets[d].bbox.rect().iou(&g.bbox.rect());
                if v > best_iou {
                    best_iou = v;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / gts.len() as f64, tp as f64 / cut as f64));
    }
    let mut levels: Vec<f64> = pr.iter().map(|p| p.0).collect();
    levels.push(0.0);
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut ap = 0.0;
    for w in levels.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let p = pr.iter().filter(|q| q.0 >= hi).map(|q| q.1).fold(0.0, f64::max);
        ap += (hi - lo) * p;
    }
    ap
}

fn jitter_box(b: &BoundingBox, s: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let d = |rng: &mut ChaCha8Rng| rng.gen_range(-s..s);
    BoundingBox::clamped(Rect::new(b.xmin() + d(rng), b.ymin() + d(rng), b.xmax() + d(rng), b.ymax() + d(rng)))
        .unwrap_or(*b)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (x, y) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
    BoundingBox::new(x, y, x + rng.gen_range(0.1..0.4), y + rng.gen_range(0.1..0.4)).unwrap()
}

#[test]
fn ap_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let stage = StageClass::Mature;
    let mut worst = 0.0f64;
    let fixtures = 2000;
    for _ in 0..fixtures {
        let images = rng.gen_range(1..=2u32);
        let gts: Vec<GroundTruth> = (0..rng.gen_range(0..=4))
            .map(|_| GroundTruth { image: rng.gen_range(0..images), bbox: random_box(&mut rng), stage })
            .collect();
        let dets: Vec<ScoredBox> = (0..rng.gen_range(0..=6))
            .map(|_| {
                let (image, bbox) = match gts.len() {
                    n if n > 0 && rng.gen_bool(0.7) => {
                        let g = &gts[rng.gen_range(0..n)];
                        (g.image, jitter_box(&g.bbox, 0.08, &mut rng))
                    }
                    _ => (rng.gen_range(0..images), random_box(&mut rng)),
                };
                ScoredBox { image, bbox, stage, score: rng.gen_range(0.0..1.0) }
            })
            .collect();
        let got = average_precision(&pr_curve(&dets, &gts, 0.5), Interpolation::AllPoint);
        worst = worst.max((got - exhaustive_ap(&dets, &gts, 0.5)).abs());
    }
    // Hand case: TP, FP, TP over two gts.
    let g1 = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
    let g2 = BoundingBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
    let off = BoundingBox::new(0.35, 0.0, 0.5, 0.1).unwrap();
    let gts = [GroundTruth { image: 0, bbox: g1, stage }, GroundTruth { image: 0, bbox: g2, stage }];
    let dets = [
        ScoredBox { image: 0, bbox: g1, stage, score: 0.9 },
        ScoredBox { image: 0, bbox: off, stage, score: 0.8 },
        ScoredBox { image: 0, bbox: g2, stage, score: 0.7 },
    ];
    let hand = average_precision(&pr_curve(&dets, &gts, 0.5), Interpolation::AllPoint);
    let ok = worst <= 1e-12 && (hand - 0.8333).abs() <= 1e-4 && (hand - 5.0 / 6.0).abs() <= 1e-9;
    report("mAP oracle", ok, &format!("{fixtures} fixtures, max |ap - oracle| {worst:.1e} <= 1e-12, hand case ap {hand:.10} = 0.8333 +- 1e-9"));
    assert!(ok);
}

// ---------------------------------------------------------------------------------------------
// Scaled training

fn samples(d: &SynthDataset) -> Vec<Sample> {
    d.entries.iter().map(|(f, boxes)| Sample { image: Raster::from_gray(&d.images[f]), boxes: boxes.clone() }).collect()
}

struct TrainingRun {
    trace: Vec<LossRecord>,
    ap: HashMap<StageClass, f64>,
    map: f64,
    elapsed: Duration,
}

/// One training run shared by the criteria that read it.
fn training_run() -> &'static TrainingRun {
    static RUN: OnceLock<TrainingRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let train_set = gen_dataset(&SynthDatasetConfig::default()).unwrap();
        let test_set =
            gen_dataset(&SynthDatasetConfig { counts: [112, 130, 70], seed: 1, first_frame: 1_000_000, ..Default::default() })
                .unwrap();
        let train_counts = category_counts(&train_set.manifest(Split::Train, 0));
        let test_counts = category_counts(&test_set.manifest(Split::Test, 0));
        for (s, tr, te) in [(StageClass::Developing, 554, 112), (StageClass::Mature, 650, 130), (StageClass::Declining, 303, 70)] {
            assert_eq!(train_counts.get(s, Split::Train), tr);
            assert_eq!(test_counts.get(s, Split::Test), te);
        }
        let cfg = TrainConfig { iterations: 2000, lr: 3e-4, batch_size: 5, alpha: 1.0, seed: 0, log_every: 0, ..Default::default() };
        let mut trainer = Trainer::new(ModelConfig::default(), cfg).unwrap();
        let trace = trainer.run(&samples(&train_set)).unwrap();
        let model = trainer.into_model();

        let infer_cfg = InferConfig { score_threshold: 0.05, ..InferConfig::default() };
        let (mut dets, mut gts) = (Vec::new(), Vec::new());
        for (k, s) in samples(&test_set).iter().enumerate() {
            let image = k as u32;
            for d in infer(&model, &s.image, &infer_cfg).unwrap() {
                dets.push(ScoredBox { image, bbox: d.bbox, stage: d.stage, score: d.score });
            }
            gts.extend(s.boxes.iter().map(|b| GroundTruth { image, bbox: b.bbox, stage: b.stage }));
        }
        let results = evaluate(&dets, &gts, 0.5, Interpolation::AllPoint);
        let map = mean_ap(&results).unwrap();
        let ap = results.iter().map(|r| (r.stage, r.ap)).collect();
        TrainingRun { trace, ap, map, elapsed: t0.elapsed() }
    })
}

#[test]
fn scaled_training() {
    let run = training_run();
    let (dev, mat, dec) = (run.ap[&StageClass::Developing], run.ap[&StageClass::Mature], run.ap[&StageClass::Declining]);
    let ok = run.map >= 0.70 && mat >= dev && dev >= dec && run.elapsed <= Duration::from_secs(15 * 60);
    report(
        "scaled training",
        ok,
        &format!(
            "mAP@0.5 {:.4} >= 0.70, AP mature {mat:.4} >= developing {dev:.4} >= declining {dec:.4}, {:.0}s <= 900s",
            run.map,
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn training_loss_drops() {
    let trace = &training_run().trace;
    let first: f64 = trace[..100].iter().map(|r| r.total).sum::<f64>() / 100.0;
    let last: f64 = trace[trace.len() - 100..].iter().map(|r| r.total).sum::<f64>() / 100.0;
    let ok = last < 0.25 * first;
    report("training loss drop", ok, &format!("final 100-step mean {last:.4} vs initial {first:.4}, ratio {:.3} < 0.25", last / first));
    assert!(ok);
}

// ---------------------------------------------------------------------------------------------
// Round trips

/// Spherical law of cosines through the 3-D unit vectors of both points.
fn chord_distance_km(a: LatLon, b: LatLon) -> f64 {
    let v = |p: LatLon| {
        let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (u, w) = (v(a), v(b));
    let cross = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
    let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let cos = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
    EARTH_RADIUS_KM * sin.atan2(cos)
}

#[test]
fn round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let mut codec_err = 0.0f64;
    for _ in 0..1000 {
        let prior = PriorBox { cx: rng.gen_range(0.0..1.0), cy: rng.gen_range(0.0..1.0), w: rng.gen_range(0.02..1.0), h: rng.gen_range(0.02..1.0) };
        let b = random_box(&mut rng);
        let back = decode(&encode(&b, &prior).unwrap(), &prior).unwrap();
        for (x, y) in [(b.xmin(), back.xmin()), (b.ymin(), back.ymin()), (b.xmax(), back.xmax()), (b.ymax(), back.ymax())] {
            codec_err = codec_err.max((x - y).abs());
        }
    }

    let mut geo_err = 0.0f64;
    for _ in 0..50 {
        let a = LatLon::new(rng.gen_range(-90.0..90.0), rng.gen_range(0.0..360.0));
        let b = LatLon::new(rng.gen_range(-90.0..90.0), rng.gen_range(0.0..360.0));
        geo_err = geo_err.max((haversine_km(a, b) - chord_distance_km(a, b)).abs());
    }

    let ds = gen_dataset(&SynthDatasetConfig { counts: [4, 5, 3], seed: 5, ..Default::default() }).unwrap();
    let manifest = ds.split(0.25, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&manifest, &ds.images, dir.path()).unwrap();
    let export_ok = import_dataset(dir.path()).unwrap() == manifest;

    let entries: Vec<(u32, Vec<LabeledBox>)> = (0..1507u32)
        .map(|f| (f, vec![LabeledBox { bbox: random_box(&mut rng), stage: StageClass::ALL[f as usize % 3] }]))
        .collect();
    let ratio = 300.0 / 1507.0;
    let s1 = split_train_test(entries.clone(), ratio, 42).unwrap();
    let s2 = split_train_test(entries, ratio, 42).unwrap();
    let test_frames = s1.frame_count(Split::Test);
    let split_ok = s1 == s2 && test_frames == 300 && s1.frame_count(Split::Train) == 1207;

    let ok = codec_err <= 1e-9 && geo_err <= 0.1 && export_ok && split_ok;
    report(
        "round trips",
        ok,
        &format!(
            "codec max error {codec_err:.1e} <= 1e-9, haversine vs vector form {geo_err:.1e} km <= 0.1 km over 50 pairs, export/import identity {export_ok}, split deterministic with |Test| = {test_frames} of 1507"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------------
// Review state machine

/// The transition table written out longhand: (from, action, needs second expert, needs note, to).
const TABLE: [(ReviewState, ReviewAction, bool, bool, ReviewState); 6] = [
    (ReviewState::Draft, ReviewAction::Submit, false, false, ReviewState::Submitted),
    (ReviewState::Submitted, ReviewAction::Suggest, true, false, ReviewState::Suggested),
    (ReviewState::Submitted, ReviewAction::Accept, true, false, ReviewState::Consensus),
    (ReviewState::Suggested, ReviewAction::Accept, true, false, ReviewState::Consensus),
    (ReviewState::Suggested, ReviewAction::Dispute, false, false, ReviewState::Disputed),
    (ReviewState::Disputed, ReviewAction::Resolve, false, true, ReviewState::Consensus),
];

#[test]
fn review_state_machine() {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for state in ReviewState::ALL {
        for action in ReviewAction::ALL {
            for role in [ActorRole::Author, ActorRole::SecondExpert] {
                for note in [None, Some("   "), Some("agreed after discussion")] {
                    checked += 1;
                    let want = TABLE.iter().find(|r| r.0 == state && r.1 == action).and_then(|&(_, _, second, needs_note, to)| {
                        let note_ok = note.is_some_and(|n| !n.trim().is_empty());
                        (!(second && role == ActorRole::Author) && (!needs_note || note_ok)).then_some(to)
                    });
                    let got = next_state(state, action, role, note).ok();
                    if got != want {
                        mismatches.push(format!("{state:?} {action:?} {role:?} {note:?}: {got:?} vs {want:?}"));
                    }
                }
            }
        }
    }

    // Random walks through the store: every Consensus record has two distinct actors.
    let store = LabelStore::in_memory();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let actors = ["ana", "ben", "chen"];
    let mut ids = Vec::new();
    for f in 0..60 {
        let who = actors[rng.gen_range(0..3)];
        let new = NewAnnotation { frame_index: f, bbox: random_box(&mut rng), stage: StageClass::ALL[f as usize % 3], track_id: None };
        ids.push(store.create(new, who).unwrap().0.id);
    }
    for _ in 0..2000 {
        let id = &ids[rng.gen_range(0..ids.len())];
        let action = ReviewAction::ALL[rng.gen_range(0..5)];
        let who = actors[rng.gen_range(0..3)];
        let note = if rng.gen_bool(0.5) { Some("discussed") } else { None };
        let _ = store.transition(id, action, who, note);
    }
    let all = store.list();
    let consensus: Vec<_> = all.iter().filter(|a| a.review == ReviewState::Consensus).collect();
    let single = consensus.iter().filter(|a| a.distinct_actors() < 2).count();
    let replay_ok = all.iter().all(|a| a.replay_state().unwrap() == a.review);

    let ok = mismatches.is_empty() && single == 0 && !consensus.is_empty() && replay_ok;
    report(
        "review state machine",
        ok,
        &format!(
            "{checked} (state, action, role, note) cases, {} mismatches; {} consensus records, {single} with a single actor; replay consistent {replay_ok}",
            mismatches.len(),
            consensus.len()
        ),
    );
    assert!(ok, "{mismatches:?}");
}
