use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use unetmm::arch::UNet;
use unetmm::gradcheck::{full_suite, run_cases};
use unetmm::inspect::{inspect_features as inspect, probe_image};
use unetmm::memory::{analyze, format_mb};
use unetmm::metrics::write_csv_rows;
use unetmm::tensor::write_tnsr;
use unetmm::train::{evaluate, load_checkpoint, save_checkpoint, train_with, validation_set};
use unetmm::ParamSet;

use crate::config::RunConfig;
use crate::{Common, Failure, GradcheckArgs, WithCheckpoint};

/// Creates `dir` if needed; a non-empty directory needs `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<(), Failure> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Failure::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    } else if dir.exists() {
        return Err(Failure::usage(format!("{} exists and is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 1, msg: format!("{}: {e}", path.display()) }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    Ok(write_csv_rows(create(path)?, rows)?)
}

fn setup(c: &Common) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(&c.config, c.overrides())?;
    prepare_out(&c.out, c.force)?;
    Ok(cfg)
}

pub fn analyze_memory(c: &Common) -> Result<(), Failure> {
    let cfg = setup(c)?;
    let input = cfg.analyze_input()?;
    let a = analyze(&cfg.model, input)?;
    let selected = cfg.model.skip_mode;
    for (mode, t) in &a.timelines {
        let file = c.out.join(format!("timeline_{}.csv", mode.to_string().replace(':', "-")));
        t.write_csv(create(&file)?)?;
        let mark = if *mode == selected { "  (configured)" } else { "" };
        println!("{:<10} peak {:>10} bytes  {} MB{mark}", mode.to_string(), t.peak(), format_mb(t.peak()));
    }
    a.report.write_csv(create(&c.out.join("comparison.csv"))?)?;
    let text = a.report.to_text();
    write_text(&c.out.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn train(c: &Common, verbose: bool) -> Result<(), Failure> {
    let cfg = setup(c)?;
    write_text(&c.out.join("config.toml"), &cfg.to_toml())?;
    let run = train_with(&cfg.model, &cfg.train, |row| {
        if verbose {
            eprintln!(
                "step {:>6}  lr {:.3e}  loss {:.4}  val {:.3} dB",
                row.step, row.lr, row.train_loss, row.val_psnr
            );
        }
    })?;
    write_rows(&c.out.join("metrics.csv"), &run.history)?;
    save_checkpoint(&c.out.join("checkpoint"), &cfg.model, &run.state.params, run.state.step)?;
    println!(
        "trained {} steps: val PSNR {:.3} dB (noisy input {:.3} dB)",
        run.state.step,
        run.final_val_psnr(),
        run.baseline_psnr
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&PathBuf>) -> Result<(UNet, ParamSet), Failure> {
    let (model, mut params) = UNet::init(&cfg.model, cfg.train.seed)?;
    if let Some(dir) = checkpoint {
        load_checkpoint(dir, &mut params)?;
    }
    Ok((model, params))
}

pub fn eval(c: &WithCheckpoint) -> Result<(), Failure> {
    let cfg = setup(&c.common)?;
    let (model, params) = load_model(&cfg, c.checkpoint.as_ref())?;
    let (noisy, clean) = validation_set(&cfg.train, cfg.model.in_channels)?;
    let report = evaluate(&model, &params, &noisy, &clean)?;
    write_rows(&c.common.out.join("eval.csv"), std::slice::from_ref(&report))?;
    println!(
        "PSNR {:.3} dB  SSIM {:.4}  (noisy input: PSNR {:.3} dB  SSIM {:.4})",
        report.psnr, report.ssim, report.baseline_psnr, report.baseline_ssim
    );
    Ok(())
}

#[derive(Serialize)]
struct EncoderRaRow {
    stage: usize,
    ra_mean: f64,
    ra_variance: f64,
}

pub fn inspect_features(c: &WithCheckpoint) -> Result<(), Failure> {
    let cfg = setup(&c.common)?;
    let mode = cfg.model.skip_mode;
    if mode != unetmm::arch::SkipMode::MsiamIem {
        return Err(Failure::usage(format!("inspect-features needs skip_mode msiam-iem, got {mode}")));
    }
    let (model, params) = load_model(&cfg, c.checkpoint.as_ref())?;
    let probe = probe_image(&model, cfg.train.noise_sigma)?;
    let report = inspect(&model, &params, &probe)?;
    let out = &c.common.out;
    write_rows(&out.join("features.csv"), &report.rows)?;
    let enc: Vec<EncoderRaRow> = report
        .encoder_ra
        .iter()
        .enumerate()
        .map(|(i, r)| EncoderRaRow { stage: i + 1, ra_mean: r.mean, ra_variance: r.variance })
        .collect();
    write_rows(&out.join("encoder_ra.csv"), &enc)?;
    let dir = out.join("tensors");
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    write_tnsr(&dir.join("probe.tnsr"), &probe)?;
    for (i, (e, m)) in report.encoder.iter().zip(&report.iem).enumerate() {
        write_tnsr(&dir.join(format!("E{}.tnsr", i + 1)), e)?;
        write_tnsr(&dir.join(format!("IEM{}.tnsr", i + 1)), m)?;
    }
    println!("stage  ssim    ra_variance (iem)  ra_variance (encoder)");
    for (row, e) in report.rows.iter().zip(&report.encoder_ra) {
        println!("{:>5}  {:.4}  {:>17.6}  {:>21.6}", row.stage, row.ssim_to_encoder, row.ra_variance, e.variance);
    }
    Ok(())
}

#[derive(Serialize)]
struct GradRow {
    case: String,
    checked: usize,
    tolerance: f64,
    max_rel_err: f64,
    passed: bool,
}

pub fn gradcheck(g: &GradcheckArgs, verbose: bool) -> Result<(), Failure> {
    if let Some(out) = &g.out {
        prepare_out(out, g.force)?;
    }
    let cases: Vec<_> =
        full_suite().into_iter().filter(|c| g.filter.as_deref().is_none_or(|f| c.name.contains(f))).collect();
    if cases.is_empty() {
        eprintln!("warning: no gradient cases selected; nothing to check");
    }
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (name, result) in run_cases(&cases)? {
        match result {
            Ok(r) => {
                if verbose || !r.passed() {
                    eprintln!(
                        "{} {name}: max rel err {:.2e} (tol {:.0e})",
                        if r.passed() { "ok  " } else { "FAIL" },
                        r.max_rel_err,
                        r.tolerance
                    );
                }
                if !r.passed() {
                    failed.push(name.clone());
                }
                rows.push(GradRow {
                    case: name,
                    checked: r.checked,
                    tolerance: r.tolerance,
                    max_rel_err: r.max_rel_err,
                    passed: r.passed(),
                });
            }
            Err(e) => {
                eprintln!("FAIL {name}: {e}");
                failed.push(name);
            }
        }
    }
    if let Some(out) = &g.out {
        write_rows(&out.join("gradcheck.csv"), &rows)?;
    }
    println!("gradcheck: {} of {} cases passed", cases.len() - failed.len(), cases.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: Failure::NUMERIC,
            msg: format!("finite-difference check failed for: {}", failed.join(", ")),
        })
    }
}
