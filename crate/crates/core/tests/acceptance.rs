//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! values and the pinned tolerance. Exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use unetmm::arch::{ModelConfig, Reduction, SkipMode, UNet};
use unetmm::gradcheck::full_suite;
use unetmm::inspect::{inspect_features, probe_image};
use unetmm::memory::{analyze, feature_bytes, format_mb, skip_timeline, Phase, TraceRecorder};
use unetmm::metrics::{psnr, representative_ability, ssim};
use unetmm::ops::{pixel_shuffle, pixel_unshuffle};
use unetmm::train::{median, train, worker_threads, TrainConfig, TrainRun};
use unetmm::{Shape, Tape, Tensor};

type Check = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Check);

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reference_input() -> Shape {
    Shape::new(1, 3, 256, 256).unwrap()
}

fn c1_reference_memory() -> Check {
    let start = Instant::now();
    let a = analyze(&ModelConfig::default(), reference_input()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let text = a.report.to_text();
    let r = &a.report;
    let ok = r.baseline_peak_bytes == 3_932_160
        && r.candidate_peak_bytes == 262_144
        && r.reduction_pct == 93.3
        && text.contains("3.75 MB")
        && text.contains("0.25 MB")
        && text.contains("93.3%")
        && elapsed < Duration::from_secs(1);
    ensure(
        ok,
        format!(
            "full {} B ({} MB), msiam-iem {} B ({} MB), reduction {:.1}% in {:.1?} [exact; < 1 s]",
            r.baseline_peak_bytes,
            format_mb(r.baseline_peak_bytes),
            r.candidate_peak_bytes,
            format_mb(r.candidate_peak_bytes),
            r.reduction_pct,
            elapsed
        ),
    )
}

fn c2_closed_form() -> Check {
    let mut bad = Vec::new();
    for n in 2..=8usize {
        let side = 1usize << (n + 2);
        let cfg = ModelConfig {
            num_stages: n,
            base_width: 8,
            blocks_per_stage: vec![1; 2 * n - 1],
            msiam_reduction: vec![Reduction::new(1, 1); n - 1],
            target_level: 1,
            skip_mode: SkipMode::Full,
            ..ModelConfig::default()
        };
        let peak = skip_timeline(&cfg, Shape::new(1, 3, side, side).unwrap()).map_err(|e| e.to_string())?.peak();
        let m1 = feature_bytes(8, side, side, 8);
        // M_E1 (2 - 2^(2-N)) in exact integer form
        if peak * (1 << (n - 2)) != m1 * ((1 << (n - 1)) - 1) {
            bad.push(n);
        }
    }
    let t = skip_timeline(&ModelConfig::default().with_skip_mode(SkipMode::Full), reference_input())
        .map_err(|e| e.to_string())?;
    let m1 = t.live_at(Phase::Encoder(1)).unwrap();
    let e2 = t.live_at(Phase::Encoder(2)).unwrap();
    let e3 = t.live_at(Phase::Encoder(3)).unwrap();
    let ok = bad.is_empty() && 2 * e2 == 3 * m1 && 4 * e3 == 7 * m1 && 8 * t.peak() == 15 * m1;
    ensure(ok, format!("N=2..8 peak = M_E1(2-2^(2-N)) (mismatch at {bad:?}); N=5 sums 3/2, 7/4, 15/8 of M_E1 [exact]"))
}

fn toy_configs(mode: SkipMode) -> Vec<ModelConfig> {
    let a = ModelConfig::micro(mode);
    let b = ModelConfig {
        num_stages: 4,
        base_width: 16,
        blocks_per_stage: vec![1, 2, 1, 1, 1, 2, 1],
        msiam_reduction: vec![Reduction::new(1, 4); 3],
        target_level: 3,
        ..ModelConfig::micro(mode)
    };
    vec![a, b]
}

fn c3_trace_agreement() -> Check {
    let modes = [SkipMode::Full, SkipMode::None, SkipMode::SingleAt(1), SkipMode::SingleAt(2), SkipMode::MsiamIem];
    let mut checked = 0;
    for mode in modes {
        for cfg in toy_configs(mode) {
            let (model, params) = UNet::init(&cfg, 3).map_err(|e| e.to_string())?;
            let x = Tensor::full(Shape::new(1, cfg.in_channels, 16, 16).unwrap(), 0.5);
            let tape = Tape::new();
            let mut rec = TraceRecorder::new(cfg.accounting_bits);
            model
                .forward_detailed(&tape, &params, tape.constant(x.clone()), Some(&mut rec))
                .map_err(|e| e.to_string())?;
            let traced = rec.finish();
            let symbolic = skip_timeline(&cfg, x.shape()).map_err(|e| e.to_string())?;
            if traced.samples != symbolic.samples {
                return Err(format!(
                    "{mode} on N={}: traced {:?} vs symbolic {:?}",
                    cfg.num_stages, traced.samples, symbolic.samples
                ));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} toy configs (2 per mode, 5 modes) traced byte-for-byte equal to the symbolic timeline [exact]"
    ))
}

fn c4_doubled_width() -> Check {
    let cfg = ModelConfig { base_width: 64, ..ModelConfig::default() };
    let r = analyze(&cfg, reference_input()).map_err(|e| e.to_string())?.report;
    let (a, b) = (format_mb(r.baseline_peak_bytes), format_mb(r.candidate_peak_bytes));
    ensure(
        a == "7.5" && b == "0.5" && r.reduction_pct == 93.3,
        format!("full {a} MB vs msiam-iem {b} MB, reduction {:.1}% [exact]", r.reduction_pct),
    )
}

fn c5_gradients() -> Check {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    let mut model_err = f64::NAN;
    let mut failures = Vec::new();
    let cases = full_suite();
    let count = cases.len();
    for case in cases {
        let report = (case.run)().map_err(|e| format!("{}: {e}", case.name))?;
        if report.name.starts_with("model") {
            model_err = report.max_rel_err;
        } else {
            worst_op = worst_op.max(report.max_rel_err);
        }
        if !report.passed() {
            failures.push(format!("{} ({:.2e})", report.name, report.max_rel_err));
        }
    }
    let elapsed = start.elapsed();
    ensure(
        failures.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{count} cases, worst op rel err {worst_op:.2e}, end-to-end {model_err:.2e}, {elapsed:.1?}; failures {failures:?} [ops <= 1e-3, model <= 1e-2, < 2 min]"
        ),
    )
}

fn c6_structure() -> Check {
    let mut runs = 0;
    for target in [4, 2, 1] {
        let mut modes = vec![SkipMode::Full, SkipMode::None, SkipMode::MsiamIem];
        modes.extend((1..=4).map(SkipMode::SingleAt));
        for mode in modes {
            let cfg = ModelConfig {
                base_width: 16,
                in_channels: 1,
                msiam_reduction: vec![Reduction::new(1, 2); 4],
                target_level: target,
                skip_mode: mode,
                ..ModelConfig::default()
            };
            let (model, params) = UNet::init(&cfg, 0).map_err(|e| e.to_string())?;
            let tape = Tape::new();
            let x = Tensor::full(Shape::new(1, 1, 16, 16).unwrap(), 0.25);
            let out =
                model.forward_detailed(&tape, &params, tape.constant(x.clone()), None).map_err(|e| e.to_string())?;
            if out.output.shape() != x.shape() {
                return Err(format!("target {target} {mode}: output {}", out.output.shape()));
            }
            for (n, s) in out.iem.iter().enumerate() {
                if s.shape() != out.encoder[n].shape() {
                    return Err(format!(
                        "target {target}: IEM{} {} vs E{} {}",
                        n + 1,
                        s.shape(),
                        n + 1,
                        out.encoder[n].shape()
                    ));
                }
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} models (targets 4/2/1 x 7 skip modes) built and ran; IEM_n shapes equal E_n [exact]"))
}

fn c7_shuffle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for r in [1usize, 2, 4, 8] {
        for (n, c, hb, wb) in [(1, 1, 1, 1), (2, 3, 2, 3), (1, 4, 3, 1)] {
            let s = Shape::new(n, c, hb * r, wb * r).unwrap();
            let x = Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen()).collect()).unwrap();
            let tape = Tape::new();
            let back = pixel_shuffle(pixel_unshuffle(tape.constant(x.clone()), r).unwrap(), r).unwrap();
            if back.value().data() != x.data() {
                return Err(format!("round trip differs for r={r} on {s}"));
            }
            checked += 1;
        }
    }
    Ok(format!("shuffle(unshuffle(x)) == x bit-exact on {checked} shapes, r in {{1,2,4,8}} [exact]"))
}

/// Seeds and budget of the desk-scale ablation.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_config() -> TrainConfig {
    TrainConfig { iterations: 2000, batch_size: 4, patch_size: 16, ..TrainConfig::default() }
}

struct Ablation {
    ours: Vec<TrainRun>,
    none: Vec<f64>,
    elapsed: Duration,
}

fn run_desk_ablation() -> Result<Ablation, String> {
    let start = Instant::now();
    let jobs: Vec<(SkipMode, u64)> =
        [SkipMode::MsiamIem, SkipMode::None].iter().flat_map(|&m| SEEDS.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build().map_err(|e| e.to_string())?;
    let mut runs: Vec<(SkipMode, TrainRun)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| {
                let t = TrainConfig { seed, ..desk_config() };
                train(&ModelConfig::micro(mode), &t).map(|r| (mode, r)).map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, String>>()
    })?;
    let none = runs.iter().filter(|(m, _)| *m == SkipMode::None).map(|(_, r)| r.final_val_psnr()).collect();
    runs.retain(|(m, _)| *m == SkipMode::MsiamIem);
    Ok(Ablation { ours: runs.into_iter().map(|(_, r)| r).collect(), none, elapsed: start.elapsed() })
}

fn c8_training(ab: &Ablation) -> Check {
    let ours: Vec<f64> = ab.ours.iter().map(|r| r.final_val_psnr()).collect();
    let baseline = ab.ours[0].baseline_psnr;
    let (mo, mn) = (median(&ours), median(&ab.none));
    ensure(
        mo > baseline && mo >= mn,
        format!(
            "median val PSNR msiam-iem {mo:.3} dB vs identity {baseline:.3} dB vs no-skip {mn:.3} dB (2000 steps, seeds 0-4, {:.0?}) [ours > identity, ours >= none]",
            ab.elapsed
        ),
    )
}

fn c9_diagnostics(ab: &Ablation) -> Check {
    let run = &ab.ours[0];
    let probe = probe_image(&run.model, desk_config().noise_sigma).map_err(|e| e.to_string())?;
    let report = inspect_features(&run.model, &run.state.params, &probe).map_err(|e| e.to_string())?;
    let ssims: Vec<f64> = report.rows.iter().map(|r| r.ssim_to_encoder).collect();

    // brute-force representative ability on random Gaussian channels
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = Shape::new(1, 8, 16, 16).unwrap();
    let f = Tensor::from_vec(s, (0..s.numel()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap();
    let mut d = Vec::new();
    for i in 0..8 {
        for j in 0..8 {
            if i < j {
                let (mut dot, mut ni, mut nj) = (0.0f64, 0.0f64, 0.0f64);
                for p in 0..256 {
                    let (a, b) = (f.data()[i * 256 + p] as f64, f.data()[j * 256 + p] as f64);
                    dot += a * b;
                    ni += a * a;
                    nj += b * b;
                }
                d.push(1.0 - dot / (ni.sqrt() * nj.sqrt()));
            }
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d.len() as f64;
    let ra = representative_ability(&f).map_err(|e| e.to_string())?;
    let ra_err = (ra.mean - mean).abs().max((ra.variance - var).abs());
    ensure(
        ssims.iter().all(|&v| v < 0.9) && ra_err <= 1e-6,
        format!("trained micro feature SSIM per stage {ssims:.4?}; RA vs brute force max err {ra_err:.1e} [each < 0.9; <= 1e-6]"),
    )
}

fn c10_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = Shape::new(1, 3, 32, 32).unwrap();
    let x = Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen()).collect()).unwrap();
    let self_ssim = ssim(&x, &x, 1.0).map_err(|e| e.to_string())?;
    // 4 of 100 entries off by 0.5: MSE = 1/100 with every term exact
    let t = Shape::new(1, 1, 10, 10).unwrap();
    let a = Tensor::zeros(t);
    let mut bd = vec![0.0f32; 100];
    for i in [3, 31, 59, 97] {
        bd[i] = 0.5;
    }
    let b = Tensor::from_vec(t, bd).unwrap();
    let p = psnr(&a, &b, 1.0).map_err(|e| e.to_string())?;
    ensure(
        self_ssim == 1.0 && (p - 20.0).abs() <= 1e-9,
        format!("ssim(x,x) = {self_ssim}; psnr at MSE 0.01, L=1 = {p:.12} dB [exact; |psnr - 20| <= 1e-9]"),
    )
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: usize| filter.as_deref().is_none_or(|f| f == id.to_string());
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let simple: [Criterion; 8] = [
        (1, "memory model, reference config", c1_reference_memory),
        (2, "memory model, closed form", c2_closed_form),
        (3, "symbolic/empirical agreement", c3_trace_agreement),
        (4, "doubled-width check", c4_doubled_width),
        (5, "gradient suite", c5_gradients),
        (6, "structural contracts", c6_structure),
        (7, "shuffle round-trip", c7_shuffle),
        (10, "metric sanity", c10_metrics),
    ];
    for (id, name, f) in simple {
        if wanted(id) {
            let r = guarded(f);
            report(id, name, &r);
            results.push((id, name, r));
        }
    }
    if wanted(8) || wanted(9) {
        let trained = catch_unwind(run_desk_ablation).unwrap_or_else(|_| Err("panicked".into()));
        match &trained {
            Ok(ab) => {
                for (id, name, f) in [
                    (8usize, "desk-scale training direction", c8_training as fn(&Ablation) -> Check),
                    (9, "diagnostics direction", c9_diagnostics),
                ] {
                    if wanted(id) {
                        let r = guarded(|| f(ab));
                        report(id, name, &r);
                        results.push((id, name, r));
                    }
                }
            }
            Err(e) => {
                for (id, name) in [(8, "desk-scale training direction"), (9, "diagnostics direction")] {
                    if wanted(id) {
                        let r = Err(format!("training failed: {e}"));
                        report(id, name, &r);
                        results.push((id, name, r));
                    }
                }
            }
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, _, r)| r.is_err()).map(|(id, _, _)| *id).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn report(id: usize, name: &str, r: &Check) {
    match r {
        Ok(msg) => println!("[PASS] {id:>2} {name}: {msg}"),
        Err(msg) => println!("[FAIL] {id:>2} {name}: {msg}"),
    }
}
