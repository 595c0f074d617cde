//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Tolerances and budgets are fixed constants below.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segforge_core::architectures::{boxenet_spec, enet_spec, Arch, BuildConfig, Network};
use segforge_core::bench::{bench_dataset, evaluate, time_fn, time_forward};
use segforge_core::boxconv::{boxconv, boxconv_forward, X_MAX, X_MIN, Y_MAX, Y_MIN};
use segforge_core::data::{generate_dataset, generate_scene, load_split, manifest_files, normalize, tile, DatasetConfig, SceneConfig, Split, MANIFEST_FILE};
use segforge_core::metrics::{dsc, iou, pixel_f1, summarize, Mask};
use segforge_core::nn::{batchnorm2d, conv2d, conv_transpose2d, max_unpool2d, maxpool2d, prelu, BatchNormState, ConvCfg, Mode};
use segforge_core::training::{dsc_scores, soft_dice_loss, train, train_step, AdamConfig, AdamState, TileSet, TrainConfig, DICE_SMOOTHING};
use segforge_core::{checkpoint, grad_check, ops, Init, Result, Tape, Tensor, Var};

const GRAD_TOL: f64 = 1e-5;
const BOX_EDGE_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_CASES: usize = 200;
const ORACLE_TOL: f64 = 1e-9;
const BOX_TIME_RATIO: f64 = 1.5;
const TARGET_VAL_DSC: f64 = 0.80;
const MAX_EPOCHS: usize = 50;
const TRAIN_BUDGET: Duration = Duration::from_secs(45 * 60);
const OVERFIT_DSC: f64 = 0.99;
const OVERFIT_STEPS: u64 = 200;
const OVERFIT_LR: f64 = 5e-3;
const LATENCY_RATIO: f64 = 2.0;
const METRIC_PAIRS: usize = 1000;
const METRIC_TOL: f64 = 1e-12;

struct Verdicts {
    failed: usize,
}

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { seed, lo, hi }).unwrap()
}

/// Weighted sum of every element, so the scalar depends on each output.
fn weighted(tape: &Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let w = Var::constant(uniform(y.shape(), seed, -1.0, 1.0));
    Ok(ops::reduce_sum_all(tape, &ops::mul(tape, y, &w)?))
}

/// Box offsets whose edges stay at least 0.15 px away from pixel boundaries.
fn fractional_boxes(planes: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::with_capacity(planes * 4);
    for _ in 0..planes {
        for _ in 0..2 {
            let lo = -(rng.random_range(0..3) as f64) + rng.random_range(-0.35..0.35);
            let hi = lo + rng.random_range(1..4) as f64 + rng.random_range(-0.3..0.3);
            d.extend([lo, hi]);
        }
    }
    Tensor::new(&[planes, 4], d).unwrap()
}

fn gradient_suite() -> Result<Vec<(String, f64, f64)>> {
    let eps = 1e-4;
    let mut out = Vec::new();
    for d in [1usize, 2, 4, 8, 16] {
        let x = uniform(&[1, 2, 6, 5], d as u64, -1.0, 1.0);
        let w = uniform(&[2, 2, 3, 3], 100 + d as u64, -1.0, 1.0);
        let b = uniform(&[2], 200 + d as u64, -1.0, 1.0);
        let r = grad_check(|tp, v| weighted(tp, &conv2d(tp, &v[0], &v[1], Some(&v[2]), ConvCfg::same(3, d))?, 1), &[x, w, b], eps)?;
        out.push((format!("conv2d d={d}"), r.max_rel_error, GRAD_TOL));
    }
    let x = uniform(&[2, 2, 5, 6], 2, -1.0, 1.0);
    let w = uniform(&[3, 2, 3, 3], 3, -1.0, 1.0);
    let cfg = ConvCfg { stride: 2, padding: 1, dilation: 1 };
    let r = grad_check(|tp, v| weighted(tp, &conv2d(tp, &v[0], &v[1], None, cfg)?, 4), &[x, w], eps)?;
    out.push(("conv2d stride 2".into(), r.max_rel_error, GRAD_TOL));

    let x = uniform(&[2, 3, 3, 4], 5, -1.0, 1.0);
    let w = uniform(&[3, 2, 2, 2], 6, -1.0, 1.0);
    let b = uniform(&[2], 7, -1.0, 1.0);
    let r = grad_check(|tp, v| weighted(tp, &conv_transpose2d(tp, &v[0], &v[1], Some(&v[2]), 2, 0)?, 8), &[x, w, b], eps)?;
    out.push(("transposed conv".into(), r.max_rel_error, GRAD_TOL));

    let x = uniform(&[2, 3, 4, 4], 9, -1.0, 1.0);
    let scale = uniform(&[3], 10, 0.5, 1.5);
    let shift = uniform(&[3], 11, -1.0, 1.0);
    for mode in [Mode::Train, Mode::Eval] {
        let r = grad_check(
            |tp, v| {
                let mut st = BatchNormState::new(3);
                st.running_mean = vec![0.1, -0.2, 0.3];
                st.running_var = vec![0.5, 1.5, 2.0];
                weighted(tp, &batchnorm2d(tp, &v[0], &v[1], &v[2], &mut st, mode)?, 12)
            },
            &[x.clone(), scale.clone(), shift.clone()],
            eps,
        )?;
        out.push((format!("batchnorm {mode:?}"), r.max_rel_error, GRAD_TOL));
    }

    // inputs kept away from the kink at zero
    let x = uniform(&[2, 3, 3, 3], 13, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let a = uniform(&[3], 14, 0.0, 0.5);
    let r = grad_check(|tp, v| weighted(tp, &prelu(tp, &v[0], &v[1])?, 15), &[x, a], eps)?;
    out.push(("prelu".into(), r.max_rel_error, GRAD_TOL));

    // distinct values keep every argmax stable under perturbation
    let vals: Vec<f64> = (0..32).map(|i| ((i * 37) % 32) as f64 * 0.1).collect();
    let x = Tensor::from_f64_slice(&[1, 2, 4, 4], &vals)?;
    let r = grad_check(
        |tp, v| {
            let (y, idx) = maxpool2d(tp, &v[0])?;
            let up = max_unpool2d(tp, &ops::sigmoid(tp, &y), &idx)?;
            weighted(tp, &up, 16)
        },
        &[x],
        eps,
    )?;
    out.push(("maxpool/unpool".into(), r.max_rel_error, GRAD_TOL));

    let logits = uniform(&[2, 2, 4, 5], 17, -2.0, 2.0);
    let target = Tensor::from_f64_slice(&[2, 4, 5], &(0..40).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect::<Vec<_>>())?;
    let r = grad_check(|tp, v| soft_dice_loss(tp, &v[0], &target, DICE_SMOOTHING), &[logits], eps)?;
    out.push(("soft dice".into(), r.max_rel_error, GRAD_TOL));

    // linear in the input, so a wide step is exact
    let x = uniform(&[2, 2, 6, 7], 18, -1.0, 1.0);
    let boxes = fractional_boxes(2, 19);
    let r = grad_check(|tp, v| weighted(tp, &boxconv(tp, &v[0], &Var::constant(boxes.clone()))?, 20), &[x], 1e-2)?;
    out.push(("boxconv input".into(), r.max_rel_error, GRAD_TOL));

    let mut worst = 0.0f64;
    for seed in 0..5 {
        let x = uniform(&[2, 2, 8, 9], 30 + seed, -1.0, 1.0);
        let boxes = fractional_boxes(2, 40 + seed);
        let r = grad_check(|tp, v| weighted(tp, &boxconv(tp, &Var::constant(x.clone()), &v[0])?, 50 + seed), &[boxes], eps)?;
        worst = worst.max(r.max_rel_error);
    }
    out.push(("boxconv edges".into(), worst, BOX_EDGE_TOL));
    Ok(out)
}

fn criterion_1(v: &mut Verdicts) {
    let start = Instant::now();
    match gradient_suite() {
        Ok(checks) => {
            let elapsed = start.elapsed();
            let bad: Vec<&str> = checks.iter().filter(|c| !(c.1 < c.2)).map(|c| c.0.as_str()).collect();
            let worst_dense = checks.iter().filter(|c| c.2 == GRAD_TOL).map(|c| c.1).fold(0.0, f64::max);
            let worst_edges = checks.iter().filter(|c| c.2 == BOX_EDGE_TOL).map(|c| c.1).fold(0.0, f64::max);
            v.record(
                "C1 gradient suite",
                bad.is_empty() && elapsed < GRAD_BUDGET,
                format!(
                    "{} checks, max rel err {worst_dense:.2e} (< {GRAD_TOL:.0e}), box edges {worst_edges:.2e} (< {BOX_EDGE_TOL:.0e}), {:.1}s (< {}s){}",
                    checks.len(),
                    elapsed.as_secs_f64(),
                    GRAD_BUDGET.as_secs(),
                    if bad.is_empty() { String::new() } else { format!(", failing: {bad:?}") }
                ),
            );
        }
        Err(e) => v.record("C1 gradient suite", false, format!("error: {e}")),
    }
}

/// Direct clipped-box average: every pixel weighted by its overlap area.
fn box_average_oracle(x: &Tensor<f64>, boxes: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let per = boxes.shape()[0] / c;
    let overlap = |a: f64, b: f64, p: usize| (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
    let mut out = Vec::with_capacity(n * c * per * h * w);
    for i in 0..n {
        for ch in 0..c {
            for k in 0..per {
                let q = &boxes.data()[4 * (ch * per + k)..][..4];
                let area = (q[X_MAX] - q[X_MIN]) * (q[Y_MAX] - q[Y_MIN]);
                for y in 0..h {
                    for xx in 0..w {
                        let (cx, cy) = (xx as f64 + 0.5, y as f64 + 0.5);
                        let mut s = 0.0;
                        for py in 0..h {
                            let oy = overlap(cy + q[Y_MIN], cy + q[Y_MAX], py);
                            for px in 0..w {
                                s += oy * overlap(cx + q[X_MIN], cx + q[X_MAX], px) * x.data()[((i * c + ch) * h + py) * w + px];
                            }
                        }
                        out.push(s / area);
                    }
                }
            }
        }
    }
    out
}

fn criterion_2(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let (n, c, per) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..13), rng.random_range(1..13));
        let x = uniform(&[n, c, h, w], 1000 + case as u64, -2.0, 2.0);
        let mut d = Vec::new();
        for _ in 0..c * per {
            for extent in [w, h] {
                let lo = rng.random_range(-(extent as f64 + 3.0)..extent as f64);
                d.extend([lo, lo + rng.random_range(0.25..extent as f64 + 4.0)]);
            }
        }
        let boxes = Tensor::new(&[c * per, 4], d).unwrap();
        let got = boxconv_forward(&x, &boxes).unwrap();
        let want = box_average_oracle(&x, &boxes);
        worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    v.record("C2 box-conv oracle", worst < ORACLE_TOL, format!("{ORACLE_CASES} random cases, max abs err {worst:.2e} (< {ORACLE_TOL:.0e})"));

    let x = uniform(&[1, 1, 512, 512], 3, 0.0, 1.0);
    let time_box = |half: f64| {
        let boxes = Tensor::new(&[1, 4], vec![-half, half, -half, half]).unwrap();
        time_fn(|| boxconv_forward(&x, &boxes), 2, 9, x.shape()).unwrap().median
    };
    let (small, large) = (time_box(1.5), time_box(15.0));
    let ratio = small.max(large) / small.min(large);
    v.record(
        "C2 box-conv size independence",
        ratio < BOX_TIME_RATIO,
        format!("512x512 median 3px {:.2}ms, 30px {:.2}ms, ratio {ratio:.3} (< {BOX_TIME_RATIO})", small * 1e3, large * 1e3),
    );
}

fn criterion_3(v: &mut Verdicts) {
    let golden = common::golden_table();
    let (e, b) = (enet_spec(), boxenet_spec());
    let matches = golden.len() == e.rows.len()
        && golden.len() == b.rows.len()
        && golden.iter().enumerate().all(|(k, g)| e.rows[k].to_string() == g.enet && b.rows[k].to_string() == g.boxenet);
    v.record("C3 table transcription", matches, format!("{} rows of both serialized specs equal the checked-in table", golden.len()));

    let diff: Vec<usize> = (0..e.rows.len()).filter(|&k| e.rows[k] != b.rows[k]).collect();
    let bold: Vec<usize> = (0..golden.len()).filter(|&k| golden[k].bold).collect();
    v.record(
        "C3 spec diff",
        diff == bold,
        format!("rows differing between ENet and BoxENet {diff:?}, bolded rows {bold:?} ({} bolded rows in the table)", bold.len()),
    );

    let x = Tensor::<f32>::create(&[1, 3, 256, 256], Init::Uniform { seed: 1, lo: 0.0, hi: 1.0 }).unwrap();
    let mut shapes = Vec::new();
    for arch in Arch::ALL {
        let net = Network::<f32>::build(BuildConfig::new(arch)).unwrap();
        shapes.push((arch, net.predict(&x).map(|y| y.shape().to_vec())));
    }
    let ok = shapes.iter().all(|(_, s)| matches!(s, Ok(s) if s == &[1, 2, 256, 256]));
    let text: Vec<String> = shapes.iter().map(|(a, s)| format!("{a} {s:?}")).collect();
    v.record("C3 shape contract", ok, format!("(1,3,256,256) -> {}", text.join(", ")));
}

fn criterion_4(v: &mut Verdicts) {
    let count = |arch| Network::<f32>::build(BuildConfig::new(arch)).unwrap().count_parameters();
    let (u, e, b) = (count(Arch::UNet), count(Arch::ENet), count(Arch::BoxENet));
    v.record(
        "C4 parameter ordering",
        b < e && e < u && 2 * e <= u,
        format!("boxenet {b} < enet {e} < unet {u}, enet/unet {:.4} (<= 0.5)", e as f64 / u as f64),
    );
}

struct Trained {
    arch: Arch,
    net: Network<f32>,
}

fn criterion_5(v: &mut Verdicts, root: &Path) -> Option<(Vec<Trained>, TileSet<f32>)> {
    let cfg = DatasetConfig { scenes: 80, seed: 0, tile_size: 128, ratio: (74, 51), scene: SceneConfig::with_size(256, 256) };
    let loaded = generate_dataset(root, &cfg).and_then(|m| Ok((load_split::<f32>(root, &m, Split::Train)?, load_split::<f32>(root, &m, Split::Validation)?)));
    let (train_set, val_set) = match loaded {
        Ok(sets) => sets,
        Err(e) => {
            v.record("C5 desk-scale training", false, format!("dataset error: {e}"));
            return None;
        }
    };
    println!(
        "     dataset: 80 scenes of 256x256 cut into 128x128 tiles, {} train / {} validation tiles, batch 4, lr 1e-4",
        train_set.len(),
        val_set.len()
    );

    let mut trained = Vec::new();
    let mut reached = Vec::new();
    for arch in Arch::ALL {
        let mut net = Network::<f32>::build(BuildConfig { arch, width_mult: 1.0, input_size: 128, seed: 0 }).unwrap();
        let tc = TrainConfig { epochs: MAX_EPOCHS, batch_size: 4, seed: 0, target_val_dsc: Some(TARGET_VAL_DSC), ..TrainConfig::default() };
        let start = Instant::now();
        let out = match train(&mut net, &train_set, &val_set, &tc, |r| {
            println!("     {arch} epoch {} val dsc {:.4} train dsc {:.4} ({:.0}s)", r.epoch, r.val_dsc, r.train_dsc, r.seconds)
        }) {
            Ok(out) => out,
            Err(e) => {
                v.record(&format!("C5 {arch} training"), false, format!("error: {e}"));
                continue;
            }
        };
        let elapsed = start.elapsed();
        let best = out.history.best().unwrap();
        reached.push((arch, best.val_dsc));
        v.record(
            &format!("C5 {arch} training"),
            best.val_dsc >= TARGET_VAL_DSC && elapsed < TRAIN_BUDGET,
            format!(
                "best validation DSC {:.4} (>= {TARGET_VAL_DSC}) at epoch {} of at most {MAX_EPOCHS}, {:.1} min (< {} min)",
                best.val_dsc,
                best.epoch,
                elapsed.as_secs_f64() / 60.0,
                TRAIN_BUDGET.as_secs() / 60
            ),
        );
        trained.push(Trained { arch, net: out.best });
    }
    let score = |a| reached.iter().find(|r| r.0 == a).map(|r| r.1);
    if let (Some(u), Some(e)) = (score(Arch::UNet), score(Arch::ENet)) {
        println!("     reported: UNet - ENet validation DSC gap {:+.4} (stopping at the {TARGET_VAL_DSC} target)", u - e);
    }

    // one native-resolution tile: the first in raster order of a full-size
    // scene with at least a tenth of its pixels in the foreground
    let scene = generate_scene(0, &SceneConfig::default()).unwrap();
    let tiles = tile(&scene, 256).unwrap();
    let t = tiles.iter().find(|t| t.mask.count() * 10 >= t.mask.h * t.mask.w).unwrap();
    println!("     overfit tile: row {} col {} of a 1024x1280 scene, {} foreground pixels", t.row, t.col, t.mask.count());
    let single = TileSet::new(vec![normalize::<f32>(&t.rgb)], vec![t.mask.clone()]).unwrap();
    for arch in Arch::ALL {
        let mut net = Network::<f32>::build(BuildConfig::new(arch)).unwrap();
        let mut state = AdamState::new(&net, AdamConfig { lr: OVERFIT_LR, ..AdamConfig::default() });
        let (x, y) = single.batch(&[0]).unwrap();
        let (mut best, mut at) = (0.0f64, 0);
        let start = Instant::now();
        for step in 1..=OVERFIT_STEPS {
            train_step(&mut net, &mut state, x.clone(), &y, step).unwrap();
            let d = dsc_scores(&net, &single, 1).unwrap()[0];
            if d > best {
                (best, at) = (d, step);
            }
            if d >= OVERFIT_DSC {
                break;
            }
        }
        v.record(
            &format!("C5 {arch} single-tile overfit"),
            best >= OVERFIT_DSC,
            format!("train DSC {best:.4} (>= {OVERFIT_DSC}) at step {at} of at most {OVERFIT_STEPS}, lr {OVERFIT_LR}, {:.0}s", start.elapsed().as_secs_f64()),
        );
    }
    Some((trained, val_set))
}

fn criterion_6(v: &mut Verdicts, trained: Option<&(Vec<Trained>, TileSet<f32>)>) {
    let x = Tensor::<f32>::create(&[1, 3, 256, 256], Init::Uniform { seed: 6, lo: 0.0, hi: 1.0 }).unwrap();
    let median = |arch| {
        let net = Network::<f32>::build(BuildConfig::new(arch)).unwrap();
        time_forward(&net, &x, 2, 10).unwrap().median
    };
    let (u, e, b) = (median(Arch::UNet), median(Arch::ENet), median(Arch::BoxENet));
    let ratio = u / e;
    v.record(
        "C6 single-input latency",
        ratio >= LATENCY_RATIO,
        format!(
            "1 thread, 256x256 median unet {:.1}ms enet {:.1}ms boxenet {:.1}ms, unet/enet {ratio:.2} (>= {LATENCY_RATIO}; GPU figure reported as 8-15x)",
            u * 1e3,
            e * 1e3,
            b * 1e3
        ),
    );

    let Some((nets, val_set)) = trained else {
        v.record("C6 full-validation time", false, "no trained networks".into());
        return;
    };
    let mut totals = Vec::new();
    for t in nets {
        totals.push((t.arch, bench_dataset(&t.net, val_set, 1, 5).unwrap().total.median));
    }
    let total = |a| totals.iter().find(|t| t.0 == a).map(|t| t.1);
    let text: Vec<String> = totals.iter().map(|(a, s)| format!("{a} {s:.2}s")).collect();
    let pass = matches!((total(Arch::ENet), total(Arch::UNet)), (Some(e), Some(u)) if e < u);
    v.record("C6 full-validation time", pass, format!("{} tiles, median pass {}", val_set.len(), text.join(", ")));
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let p = rng.random_range(0.0..1.0);
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p) as u8).collect()).unwrap()
}

fn criterion_7(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut iou_err, mut f1_err) = (0.0f64, 0.0f64);
    for _ in 0..METRIC_PAIRS {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let d = dsc(&a, &b);
        iou_err = iou_err.max((iou(&a, &b) - d / (2.0 - d)).abs());
        f1_err = f1_err.max((pixel_f1(&a, &b) - d).abs());
    }
    v.record(
        "C7 metric identities",
        iou_err < METRIC_TOL && f1_err < METRIC_TOL,
        format!("{METRIC_PAIRS} pairs, |iou - dsc/(2-dsc)| {iou_err:.1e}, |pixel_f1 - dsc| {f1_err:.1e} (< {METRIC_TOL:.0e})"),
    );

    let mut ordered = 0;
    for _ in 0..METRIC_PAIRS {
        let scores: Vec<f64> = (0..rng.random_range(1..50)).map(|_| rng.random_range(0.0..=1.0)).collect();
        let s = summarize(&scores).unwrap();
        ordered += (s.percentile_10 <= s.median && s.median <= s.max) as usize;
    }
    v.record("C7 summary ordering", ordered == METRIC_PAIRS, format!("p10 <= median <= max on {ordered}/{METRIC_PAIRS} score lists"));
}

/// Dataset files, checkpoints and metrics from one gen/train/eval round.
fn pipeline(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let cfg = DatasetConfig { scenes: 4, seed: 8, tile_size: 64, ratio: (74, 51), scene: SceneConfig::with_size(128, 128) };
    let manifest = generate_dataset(&root.join("data"), &cfg)?;
    let mut files = vec![(MANIFEST_FILE.to_string(), std::fs::read(root.join("data").join(MANIFEST_FILE))?)];
    for f in manifest_files(&manifest) {
        files.push((f.display().to_string(), std::fs::read(root.join("data").join(&f))?));
    }
    let train_set = load_split::<f32>(&root.join("data"), &manifest, Split::Train)?;
    let val_set = load_split::<f32>(&root.join("data"), &manifest, Split::Validation)?;
    for arch in Arch::ALL {
        let mut net = Network::<f32>::build(BuildConfig { arch, width_mult: 0.25, input_size: 64, seed: 8 })?;
        let dir = root.join(arch.name());
        std::fs::create_dir_all(&dir)?;
        let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 8, checkpoint_dir: Some(dir.clone()), ..TrainConfig::default() };
        let out = train(&mut net, &train_set, &val_set, &tc, |_| {})?;
        files.push((format!("{arch} best.bin"), std::fs::read(dir.join("best.bin"))?));
        files.push((format!("{arch} final"), checkpoint::to_bytes(&net, Some(&out.state))?));
        // wall-clock seconds are the only nondeterministic history column
        let rows: Vec<String> = out.history.records.iter().map(|r| format!("{},{},{},{}", r.epoch, r.train_dsc, r.val_dsc, r.loss)).collect();
        files.push((format!("{arch} history"), rows.join("\n").into_bytes()));
        let eval = evaluate(&out.best, &val_set, 4)?;
        files.push((format!("{arch} metrics"), serde_json::to_vec_pretty(&eval)?));
    }
    Ok(files)
}

fn criterion_8(v: &mut Verdicts, root: &Path) {
    match (pipeline(&root.join("a")), pipeline(&root.join("b"))) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
            v.record(
                "C8 determinism",
                a.len() == b.len() && differing.is_empty(),
                format!(
                    "two gen/train/eval rounds, {} files compared byte for byte{}",
                    a.len(),
                    if differing.is_empty() { String::new() } else { format!(", differing: {differing:?}") }
                ),
            );
        }
        (a, b) => v.record("C8 determinism", false, format!("pipeline error: {:?}", a.err().or(b.err()))),
    }
}

/// Criteria named on the command line (`C1`, `C5`, ...) run alone; flags
/// passed through by the test runner are ignored.
fn selected() -> impl Fn(&str) -> bool {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_uppercase()).collect();
    move |id| wanted.is_empty() || wanted.iter().any(|w| w == id)
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let run = selected();
    let mut v = Verdicts { failed: 0 };
    let start = Instant::now();
    if run("C1") {
        criterion_1(&mut v);
    }
    if run("C2") {
        criterion_2(&mut v);
    }
    if run("C3") {
        criterion_3(&mut v);
    }
    if run("C4") {
        criterion_4(&mut v);
    }
    if run("C7") {
        criterion_7(&mut v);
    }
    if run("C8") {
        criterion_8(&mut v, &dir.path().join("determinism"));
    }
    let trained = if run("C5") { criterion_5(&mut v, &dir.path().join("desk")) } else { None };
    if run("C6") {
        criterion_6(&mut v, trained.as_ref());
    }
    println!("acceptance: {} failing, {:.1} min", v.failed, start.elapsed().as_secs_f64() / 60.0);
    if v.failed > 0 {
        std::process::exit(1);
    }
}
