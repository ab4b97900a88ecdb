//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the measured
//! value next to its tolerance, then asserts.
//!
//! The lines go straight to the stdout handle so they show up in the normal
//! `cargo test` log, not only on failure.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use light_yolo::boxes::{box_loss, iou, rasterized_iou, BBox, BoxKind, LossOptions};
use light_yolo::data::{synth, Dataset, Split};
use light_yolo::gam::Gam;
use light_yolo::gradsuite::{negative_control, run_suite, SUITE_TOL};
use light_yolo::metrics::{average_precision, evaluate, fps_bench, match_class, precision_recall, GroundTruth, MATCH_IOU};
use light_yolo::model::{checkpoint, Arch, Detection, Detector, ModelConfig, COST_REF_SIZE};
use light_yolo::nn::{Act, ConvGeom, ParamStore};
use light_yolo::sepvit::{window_merge, window_partition, SepVitBlock};
use light_yolo::train::{evaluate_indices, fit, predict, Profile};
use light_yolo::{Error, Graph, Tensor};

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("[acceptance] {:>2} {} {name}: {detail}\n", id, if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn totals(arch: Arch) -> (f64, f64) {
    let m = Detector::<f32>::build(ModelConfig::new(arch, 2), 0).unwrap();
    let t = m.cost(COST_REF_SIZE, COST_REF_SIZE).total;
    (t.params as f64, t.flops as f64)
}

fn rel(x: f64, want: f64) -> f64 {
    (x / want - 1.0).abs()
}

#[test]
fn c01_cost_parity_params() {
    let (b, l) = (totals(Arch::Baseline).0, totals(Arch::Light).0);
    let red = 100.0 * (1.0 - l / b);
    let ok = rel(b, 1.77e6) <= 0.05 && rel(l, 1.29e6) <= 0.08 && (red - 27.1).abs() <= 3.0;
    let detail = format!(
        "baseline {:.4}M (1.77M ±5%), light {:.4}M (1.29M ±8%), reduction {red:.2}% (27.1 ±3)",
        b / 1e6,
        l / 1e6
    );
    report(1, "cost parity, params", ok, &detail);
}

#[test]
fn c02_cost_parity_flops() {
    let (b, l) = (totals(Arch::Baseline).1, totals(Arch::Light).1);
    let red = 100.0 * (1.0 - l / b);
    let ok = rel(b, 4.2e9) <= 0.15 && rel(l, 3.4e9) <= 0.15 && (red - 19.1).abs() <= 3.0;
    let detail = format!(
        "baseline {:.3} GFLOPs (4.2 ±15%), light {:.3} GFLOPs (3.4 ±15%), reduction {red:.2}% (19.1 ±3)",
        b / 1e9,
        l / 1e9
    );
    report(2, "cost parity, FLOPs at 640", ok, &detail);
}

/// The published accuracy tables need a private dataset and a specific GPU.
/// What can be checked is that the same measurement pipeline (per-class AP,
/// P, R, mAP@0.5 and FPS) runs end to end on the synthetic substitute.
#[test]
fn c03_accuracy_tables_substituted() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(20, 3, dir.path(), 64, 64).unwrap();
    let ds = Dataset::open(dir.path(), 2, 3).unwrap();
    let cfg = ModelConfig {
        img: 64,
        ..Profile::Toy.model(Arch::Light, 2)
    };
    let model = Detector::<f32>::build(cfg, 3).unwrap();
    let r = evaluate_indices(&model, &ds, &ds.indices(Split::Test), 64, 4).unwrap();
    let x = synth::render(3, 0, 64, 64).image.reshaped(&[1, 3, 64, 64]).unwrap();
    let bench = fps_bench(3, 1, || model.detect(&x, 0.25, 0.45).map(|_| ())).unwrap();
    let ok = r.classes.len() == 2 && (0.0..=1.0).contains(&r.map50) && bench.fps > 0.0;
    let detail = format!(
        "not reproducible (private data); pipeline substitute ran: mAP@0.5 {:.3} on {} test images, {:.1} FPS; accuracy claims replaced by criteria 4-10",
        r.map50,
        ds.indices(Split::Test).len(),
        bench.fps
    );
    report(3, "accuracy tables", ok, &detail);
}

#[test]
fn c04_gradient_suite() {
    let t = Instant::now();
    let entries = run_suite(0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let required = [
        "conv2d", "depthwise_conv", "batchnorm", "layernorm", "mish", "hswish", "leakyrelu", "gelu", "dwa", "pwa",
        "sepvit_block", "dssconv", "dssc3", "gam", "gam_bottleneck", "iou_loss", "giou_loss", "diou_loss", "ciou_loss",
        "eiou_loss", "siou_loss", "training_loss",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !entries.iter().any(|e| e.name == *r)).collect();
    let stub_caught = !negative_control(0).passed();
    let ok = failed.is_empty() && missing.is_empty() && stub_caught && secs < 120.0;
    let detail = format!(
        "{} layers, worst rel err {worst:.2e} (≤ {SUITE_TOL:e}), failed {failed:?}, missing {missing:?}, wrong stub rejected {stub_caught}, {secs:.1}s (< 120s)",
        entries.len()
    );
    report(4, "gradient suite", ok, &detail);
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.2..6.0), rng.gen_range(0.2..6.0))
}

#[test]
fn c05_iou_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_box(&mut rng);
        // Half the pairs are near each other so most of them overlap.
        let b = if rng.gen_bool(0.5) {
            a.shifted(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)).scaled(rng.gen_range(0.6..1.5))
        } else {
            random_box(&mut rng)
        };
        worst = worst.max((iou(&a, &b) - rasterized_iou(&a, &b, 1000)).abs());
    }
    let mut zero_worst: f64 = 0.0;
    for _ in 0..100 {
        let a = random_box(&mut rng);
        for kind in BoxKind::ALL {
            zero_worst = zero_worst.max(box_loss(kind, &a, &a, LossOptions::default()).abs());
        }
    }
    let mut order_violations = 0;
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (l_iou, l_giou) = (box_loss(BoxKind::Iou, &a, &b, LossOptions::default()), box_loss(BoxKind::Giou, &a, &b, LossOptions::default()));
        if l_giou < l_iou - 1e-12 {
            order_violations += 1;
        }
    }
    let ok = worst <= 2e-3 && zero_worst <= 1e-6 && order_violations == 0;
    let detail = format!(
        "max |iou - raster| {worst:.2e} (≤ 2e-3, 1000 pairs), max loss on identical boxes {zero_worst:.1e} (≤ 1e-6), GIoU < IoU loss in {order_violations}/10000"
    );
    report(5, "IoU oracle", ok, &detail);
}

#[test]
fn c06_depthwise_is_masked_full_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(1..=6);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(k..k + 6), rng.gen_range(k..k + 6));
        let rand = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            Tensor::<f32>::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand(&[2, c, h, w], &mut rng);
        let wd = rand(&[c, 1, k, k], &mut rng);
        let mut full = vec![0.0f32; c * c * k * k];
        for ch in 0..c {
            full[(ch * c + ch) * k * k..][..k * k].copy_from_slice(&wd.data()[ch * k * k..][..k * k]);
        }
        let full = Tensor::new(&[c, c, k, k], full).unwrap();
        let mut g = Graph::<f32>::inference();
        let (vx, vd, vf) = (g.constant(x), g.constant(wd), g.constant(full));
        let a = g.conv2d(vx, vd, None, ConvGeom::new(s, k / 2, c)).unwrap();
        let b = g.conv2d(vx, vf, None, ConvGeom::new(s, k / 2, 1)).unwrap();
        worst = worst.max(g.value(a).max_abs_diff(g.value(b)) as f64);
    }
    report(6, "depthwise conv vs masked full conv", worst <= 1e-6, &format!("max abs diff {worst:.2e} over 100 cases (≤ 1e-6, f32)"));
}

#[test]
fn c07_sepvit_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut roundtrip = true;
    for _ in 0..20 {
        let ws = rng.gen_range(1..=4);
        let (h, w) = (ws * rng.gen_range(1..=4), ws * rng.gen_range(1..=4));
        let n = 2 * 3 * h * w;
        let x = Tensor::<f32>::new(&[2, 3, h, w], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let (t, grid) = window_partition(&mut g, v, ws).unwrap();
        let y = window_merge(&mut g, t, grid).unwrap();
        roundtrip &= g.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let mut store = ParamStore::<f32>::new();
    let block = SepVitBlock::new(&mut store, "sv", 256, 7, &mut rng);
    let x = Tensor::<f32>::new(&[1, 256, 14, 14], (0..256 * 196).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut g = Graph::inference();
    let v = g.constant(x);
    let tr = block.trace(&mut g, &store, v).unwrap();
    let mut row_err: f64 = 0.0;
    for a in [tr.window_attn, tr.global_attn] {
        let t = g.value(a);
        let last = *t.shape().last().unwrap();
        for row in t.data().chunks(last) {
            row_err = row_err.max((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs());
        }
    }
    let shape = g.shape(tr.out).to_vec();
    let ok = roundtrip && row_err <= 1e-6 && shape == [1, 256, 14, 14];
    let detail = format!("partition/merge bit-exact {roundtrip}, max |row sum - 1| {row_err:.1e} (≤ 1e-6), output {shape:?} for (1,256,14,14) ws 7");
    report(7, "SepViT invariants", ok, &detail);
}

#[test]
fn c08_gam_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let gam = Gam::new(&mut store, "gam", 16, Act::Mish, &mut rng).unwrap();
    let mut violations = 0;
    for _ in 0..100 {
        let x = Tensor::<f64>::new(&[2, 16, 5, 5], (0..800).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = gam.forward(&mut g, &store, v).unwrap();
        violations += g.value(y).data().iter().zip(x.data()).filter(|(a, b)| a.abs() > b.abs()).count();
    }
    let mut g = Graph::inference();
    let v = g.constant(Tensor::zeros(&[1, 16, 5, 5]));
    let y = gam.forward(&mut g, &store, v).unwrap();
    let zero = g.value(y).data().iter().all(|&v| v == 0.0);
    report(8, "GAM bound", violations == 0 && zero, &format!("|F3| > |F1| at {violations} elements over 100 inputs, gam(0) == 0 exactly: {zero}"));
}

fn det(b: BBox, class_id: usize, confidence: f64) -> Detection {
    Detection { bbox: b, class_id, confidence }
}

/// Brute-force AP: recompute matching at every confidence cut, then take the
/// area under the monotone envelope of the resulting (recall, precision) points.
fn sweep_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|t| t.class_id == class_id).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut cuts: Vec<f64> = dets.iter().flatten().filter(|d| d.class_id == class_id).map(|d| d.confidence).collect();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let mut pts = vec![(0.0, 1.0)];
    for t in cuts {
        let kept: Vec<Vec<Detection>> = dets.iter().map(|d| d.iter().filter(|x| x.confidence >= t).copied().collect()).collect();
        let m = match_class(&kept, gts, class_id, MATCH_IOU);
        let tp = m.records.iter().filter(|r| r.1).count();
        let (p, r) = precision_recall(tp, m.records.len() - tp, num_gt - tp);
        pts.push((r, p));
    }
    let mut levels: Vec<f64> = pts.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for r in levels {
        let p = pts.iter().filter(|q| q.0 >= r && q.0 > 0.0).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

#[test]
fn c09_metrics_oracle() {
    // Two truths; detections ranked TP, FP, TP.
    let g1 = BBox::new(10.0, 10.0, 8.0, 8.0);
    let g2 = BBox::new(40.0, 40.0, 8.0, 8.0);
    let gts = vec![vec![GroundTruth { class_id: 0, bbox: g1 }, GroundTruth { class_id: 0, bbox: g2 }]];
    let dets = vec![vec![det(g1, 0, 0.9), det(BBox::new(70.0, 10.0, 8.0, 8.0), 0, 0.8), det(g2.shifted(0.5, 0.0), 0, 0.7)]];
    let hand = evaluate(&dets, &gts, 1, MATCH_IOU).map50;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let images = rng.gen_range(1..=3);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let g: Vec<GroundTruth> = (0..rng.gen_range(0..=3))
                .map(|_| GroundTruth {
                    class_id: rng.gen_range(0..2),
                    bbox: BBox::new(rng.gen_range(10.0..90.0), rng.gen_range(10.0..90.0), rng.gen_range(5.0..20.0), rng.gen_range(5.0..20.0)),
                })
                .collect();
            let mut d = Vec::new();
            for t in &g {
                for _ in 0..rng.gen_range(0..=2) {
                    let b = t.bbox.shifted(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)).scaled(rng.gen_range(0.7..1.3));
                    d.push(det(b, t.class_id, rng.gen_range(0.0..1.0)));
                }
            }
            for _ in 0..rng.gen_range(0..=2) {
                let b = BBox::new(rng.gen_range(10.0..90.0), rng.gen_range(10.0..90.0), rng.gen_range(5.0..20.0), rng.gen_range(5.0..20.0));
                d.push(det(b, rng.gen_range(0..2), rng.gen_range(0.0..1.0)));
            }
            gts.push(g);
            dets.push(d);
        }
        for c in 0..2 {
            let m = match_class(&dets, &gts, c, MATCH_IOU);
            let got = average_precision(&m).filter(|_| m.num_gt > 0).map(|p| p.ap);
            match (got, sweep_ap(&dets, &gts, c)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                (a, b) => panic!("AP presence differs: {a:?} vs {b:?}"),
            }
        }
    }
    let ok = (hand - 0.8333).abs() <= 1e-4 && worst <= 1e-9;
    report(9, "metrics oracle", ok, &format!("hand case AP {hand:.4} (0.8333 ±1e-4), max |AP - sweep| {worst:.1e} over 50 random instances"));
}

#[test]
fn c10_overfit_smoke() {
    let profile = Profile::Toy;
    let cfg = profile.train(0);
    let dir = tempfile::tempdir().unwrap();
    synth::generate(profile.synth_count(), 0, dir.path(), cfg.img, cfg.img).unwrap();
    let ds = Dataset::open(dir.path(), 2, 0).unwrap();
    let train = ds.indices(Split::Train);

    // Same seed, same trace: a short prefix run twice.
    let short = light_yolo::train::TrainConfig { max_iters: Some(3), ..cfg };
    let trace = || {
        let mut m = Detector::<f32>::build(profile.model(Arch::Light, 2), 0).unwrap();
        fit(&mut m, &ds, &short, None, |_| {}).unwrap().trace
    };
    let (a, b) = (trace(), trace());
    let deterministic = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == 3;

    let t = Instant::now();
    let mut model = Detector::<f32>::build(profile.model(Arch::Light, 2), 0).unwrap();
    let out = fit(&mut model, &ds, &cfg, None, |_| {}).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (dets, gts) = predict(&model, &ds, &train, cfg.img, cfg.batch).unwrap();
    let r = evaluate(&dets, &gts, 2, MATCH_IOU);
    let aps: Vec<String> = r.classes.iter().map(|c| c.as_ref().map_or("-".into(), |c| format!("{:.3}", c.ap))).collect();
    let ok = r.map50 >= 0.9 && out.trace.len() <= 300 && deterministic && secs <= 600.0;
    let detail = format!(
        "train-set mAP@0.5 {:.4} (≥ 0.9; per class {aps:?}) after {} iterations on {} of {} images, batch {}, {secs:.0}s (≤ 600s), deterministic {deterministic}",
        r.map50,
        out.trace.len(),
        train.len(),
        ds.entries.len(),
        cfg.batch
    );
    report(10, "end-to-end overfit", ok, &detail);
}

#[test]
fn c11_checkpoint_roundtrip() {
    let cfg = ModelConfig {
        img: 64,
        ..Profile::Toy.model(Arch::Light, 2)
    };
    let model = Detector::<f32>::build(cfg.clone(), 1).unwrap();
    let x = synth::render(1, 0, 64, 64).image.reshaped(&[1, 3, 64, 64]).unwrap();
    let run = |m: &Detector<f32>| -> Vec<u32> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let hs = m.forward(&mut g, v).unwrap();
        hs.iter().flat_map(|&h| g.value(h).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lyv5");
    checkpoint::save(&model.store, &path).unwrap();
    let mut other = Detector::<f32>::build(cfg, 2).unwrap();
    let differs_before = run(&other) != run(&model);
    checkpoint::load(&mut other.store, &path).unwrap();
    let identical = run(&other) == run(&model);

    let bytes = std::fs::read(&path).unwrap();
    let name_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    let mut bad_dtype = bytes.clone();
    bad_dtype[14 + name_len] = 7;
    let mut trailing = bytes.clone();
    trailing.push(0);
    let kinds: Vec<String> = [bad_magic, bad_version, bad_dtype, bytes[..bytes.len() / 2].to_vec(), trailing]
        .iter()
        .map(|b| match checkpoint::decode::<f32>(b) {
            Err(Error::BadMagic(_)) => "bad_magic",
            Err(Error::UnsupportedVersion(_)) => "version",
            Err(Error::UnknownDtype(_)) => "dtype",
            Err(Error::Truncated(_)) => "truncated",
            Err(Error::Checkpoint(_)) => "trailing",
            Err(_) => "other",
            Ok(_) => "accepted",
        }.to_string())
        .collect();
    let distinct = kinds == ["bad_magic", "version", "dtype", "truncated", "trailing"];
    let ok = differs_before && identical && distinct;
    report(11, "checkpoint roundtrip", ok, &format!("forward bit-identical after load {identical}, corruptions rejected as {kinds:?}"));
}
