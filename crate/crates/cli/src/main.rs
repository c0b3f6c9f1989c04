use aple_core::clip_head::{ce_loss, kl_divergence, predict, stage1_loss, Logits, Provenance};
use aple_core::encoders::{init_prompts, Side};
use aple_core::eval_harness::{
    emit_report, generate_dataset, harmonic_mean, read_report, run_pipeline, run_repeats, sweep, write_run,
    ExperimentConfig, PreparedCache, Split, SweepAxis,
};
use aple_core::image_adapter::{adapt, fft2, ifft2, AdapterConfig, ImageGrid};
use aple_core::tensor::{grad_check, write_archive_file, GradCheckReport};
use aple_core::trainer::{batch_loss, class_text_features, image_features, FeatureSource, Objective, TrainData};
use aple_core::{Error, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "aple", about = "Adaptive multi-modal prompt learning experiments")]
#[command(after_help = "Config fields can be overridden as dotted paths, e.g. --train.lambda_d 0.8")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs with consecutive seeds, averaged.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run(ConfigArgs),
    /// Run one experiment per value of an axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// prompt_length, sigma, lambda_d, lambda_g or adaptation_on_off
        #[arg(long)]
        axis: String,
        /// Comma-separated values; adaptation_on_off also takes off/on.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write the synthetic dataset of a config to disk.
    GenData(ConfigArgs),
    /// Re-emit tables from a stored run directory.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the stage-1 prompt gradients.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-3)]
        eps: f32,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Quick invariant checks on a small run.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Usage(_) => 1,
        Error::Divergence(_) | Error::Numeric(_) => 3,
        _ => 2,
    }
}

type Overrides = Vec<(String, String)>;

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), Error> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(path) = a.strip_prefix("--").filter(|p| p.contains('.')) else {
            rest.push(a);
            continue;
        };
        match path.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("--{path} needs a value")))?;
                overrides.push((path.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn load(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<ExperimentConfig, Error> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.display().to_string());
    }
    if let Some(n) = args.repeats {
        cfg.repeats = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    match &cfg.output_dir {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from("runs").join(&cfg.fingerprint()[..12]),
    }
}

fn parse_value(axis: SweepAxis, s: &str) -> Result<f64, Error> {
    match (axis, s) {
        (SweepAxis::AdaptationOnOff, "off") => Ok(0.0),
        (SweepAxis::AdaptationOnOff, "on") => Ok(1.0),
        _ => s.trim().parse().map_err(|_| Error::Usage(format!("bad sweep value {s:?}"))),
    }
}

fn cmd_run(cfg: &ExperimentConfig) -> Result<(), Error> {
    let out = run_repeats(cfg, &mut PreparedCache::new())?;
    let dir = out_dir(cfg);
    write_run(&out, &dir)?;
    let r = &out.report;
    println!(
        "base {:.2}  novel {:.2}  hm {:.2}  (zero-shot base {:.2} novel {:.2})",
        r.base_accuracy, r.novel_accuracy, r.harmonic_mean, r.zero_shot.base_accuracy, r.zero_shot.novel_accuracy
    );
    if let Some(rep) = &r.repeats {
        println!("mean over {} runs: base {:.2}  novel {:.2}  hm {:.2}", rep.runs.len(), rep.mean_base, rep.mean_novel, rep.mean_hm);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, axis: &str, values: &[String]) -> Result<(), Error> {
    let axis = SweepAxis::parse(axis)?;
    let values = values.iter().map(|v| parse_value(axis, v)).collect::<Result<Vec<_>, _>>()?;
    let outcome = sweep(axis, &values, cfg, &mut PreparedCache::new())?;
    let dir = out_dir(cfg);
    for (run, row) in outcome.runs.iter().zip(&outcome.table.rows) {
        write_run(run, dir.join(format!("{}_{}", axis.name(), row.value)))?;
    }
    if let Some(report) = outcome.report() {
        emit_report(&report, &dir)?;
    }
    println!("{:>10} {:>8} {:>8} {:>8}", axis.name(), "base", "novel", "hm");
    for r in &outcome.table.rows {
        println!("{:>10} {:>8.2} {:>8.2} {:>8.2}", r.value, r.base, r.novel, r.hm);
    }
    if let Some(a) = &outcome.table.aggregate {
        println!("{:>10} {:>8.2} {:>8.2} {:>8.2}", "mean", a.mean_base, a.mean_novel, a.mean_hm);
        println!("{:>10} {:>8.2} {:>8.2} {:>8.2}", "std", a.std_base, a.std_novel, a.std_hm);
    }
    println!("wrote {}", dir.display());
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(), Error> {
    let ds = generate_dataset(&cfg.dataset)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let names = ds.spec.class_names();
    let tensors: Vec<(String, Tensor)> = [("train", &ds.train), ("eval", &ds.eval)]
        .iter()
        .flat_map(|(split, samples)| {
            let names = &names;
            samples.iter().map(move |s| {
                let img = &s.image;
                let name = format!("{split}/{}/{:04}", names[s.label], s.index);
                Tensor::new(vec![img.channels(), img.height(), img.width()], img.data().to_vec()).map(|t| (name, t))
            })
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_archive_file(dir.join("dataset.apnt"), &refs)?;
    let manifest = serde_json::json!({
        "fingerprint": ds.fingerprint,
        "spec": ds.spec,
        "base": ds.spec.split_classes(Split::Base),
        "novel": ds.spec.split_classes(Split::Novel),
        "train_images": ds.train.len(),
        "eval_images": ds.eval.len(),
    });
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("{} train + {} eval images, fingerprint {}", ds.train.len(), ds.eval.len(), ds.fingerprint);
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_report(run_dir: &Path, out: Option<&Path>) -> Result<(), Error> {
    let report = read_report(run_dir.join("report.json"))?;
    let dir = out.unwrap_or(run_dir);
    emit_report(&report, dir)?;
    println!("base {:.2}  novel {:.2}  hm {:.2}", report.base_accuracy, report.novel_accuracy, report.harmonic_mean);
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_grad_check(cfg: &ExperimentConfig, eps: f32, precision: Precision, tolerance: f64) -> Result<bool, Error> {
    let p = PreparedCache::new().get(cfg)?;
    let w = &p.weights;
    let data = TrainData::prepare(w, &cfg.model, &cfg.adapter, &p.vocab, &p.dataset, &cfg.train)?;
    let t = &cfg.train;
    let pack = init_prompts(&cfg.model, t.prompt_length, t.seed, t.init_mode, &w.text, &p.vocab)?;
    let n = data.len();
    let batch: Vec<usize> = (0..n).step_by((n / t.batch_size).max(1)).collect();
    let imgs: Vec<&ImageGrid> = data.student_images.iter().collect();
    let vf = image_features(&w.vision, &cfg.model, &imgs, pack.side(Side::Vision))?;
    let tf = class_text_features(&w.text, &cfg.model, &data.classes, pack.side(Side::Language))?;

    let mut worst: f64 = 0.0;
    for side in [Side::Language, Side::Vision] {
        let (lambda, text, image) = match side {
            Side::Language => (t.lambda_d, None, Some(&vf)),
            Side::Vision => (t.lambda_g, Some(&tf), None),
        };
        let objective = Objective::Stage1 {
            lambda: lambda as f32,
            direction: t.kl_direction,
        };
        macro_rules! audit {
            ($t:ty) => {
                grad_check::<$t, _>(
                    |g, vars| {
                        let ts = text.map_or(FeatureSource::Live(vars), FeatureSource::Fixed);
                        let is = image.map_or(FeatureSource::Live(vars), FeatureSource::Fixed);
                        Ok(batch_loss(g, w, &cfg.model, &data, &batch, ts, is, objective)?.total)
                    },
                    pack.side(side),
                    eps,
                    0.0,
                )?
            };
        }
        let r: GradCheckReport = match precision {
            Precision::F32 => audit!(f32),
            Precision::F64 => audit!(f64),
        };
        println!(
            "{side:?}: max relative error {:.3e} over {} coordinates (worst {:?}: analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error, r.coordinates, r.worst, r.analytic_at_worst, r.numeric_at_worst
        );
        worst = worst.max(r.max_rel_error);
    }
    let ok = worst < tolerance;
    println!("{} tolerance {tolerance:e}", if ok { "within" } else { "above" });
    Ok(ok)
}

fn cmd_selftest() -> Result<bool, Error> {
    let mut failures = 0;
    let mut check = |name: &str, r: Result<bool, Error>| {
        let ok = matches!(r, Ok(true));
        if !ok {
            failures += 1;
        }
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
    };

    check("harmonic mean", harmonic_mean(69.34, 74.22).map(|h| (h - 71.70).abs() <= 0.005));
    let img = ImageGrid::new(8, 8, 3, (0..192).map(|i| (i % 7) as f32 / 7.0).collect())?;
    check(
        "adapter identity at alpha=1",
        adapt(&img, &AdapterConfig { alpha: 1.0, ..AdapterConfig::default() }).map(|o| o.max_abs_diff(&img) <= 1e-6),
    );
    check("fft round trip", fft2(&img).and_then(|s| ifft2(&s)).map(|o| o.max_abs_diff(&img) < 1e-6));
    let p = predict(&Logits { scores: vec![0.3, -0.2, 0.1], provenance: Provenance::Prompted }, 0.01)?;
    let q = predict(&Logits { scores: vec![0.1, 0.0, 0.2], provenance: Provenance::ZeroShot }, 0.01)?;
    check("KL(p,p) = 0", kl_divergence(&p.probs, &p.probs).map(|k| k.abs() <= 1e-9));
    check(
        "stage-1 loss at lambda 0 is CE",
        stage1_loss(&p, 1, &q, 0.0).and_then(|s| Ok(s.to_bits() == ce_loss(&p, 1)?.to_bits())),
    );

    let mut cfg = ExperimentConfig::default();
    cfg.warmup.epochs = 1;
    cfg.train.epochs_stage1_lang = 1;
    cfg.train.epochs_stage1_vis = 1;
    cfg.train.epochs_stage2 = 1;
    let mut cache = PreparedCache::new();
    let a = run_pipeline(&cfg, &mut cache)?;
    let b = run_pipeline(&cfg, &mut cache)?;
    check("backbone unchanged", Ok(a.report.backbone.unchanged));
    check("repeatable report", Ok(a.report == b.report));
    check(
        "logged total decomposes",
        Ok(a.state.history.iter().all(|r| (r.total - (r.ce + r.lambda * r.kl.unwrap_or(0.0))).abs() <= 1e-6)),
    );
    println!("{failures} failed");
    Ok(failures == 0)
}

/// `Ok(false)` is a completed check that found problems.
fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<bool, Error> {
    let no_overrides = |what: &str| {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(format!("{what} takes no config overrides")))
        }
    };
    match cli.cmd {
        Cmd::Run(a) => cmd_run(&load(&a, overrides)?).map(|_| true),
        Cmd::Sweep { cfg, axis, values } => cmd_sweep(&load(&cfg, overrides)?, &axis, &values).map(|_| true),
        Cmd::GenData(a) => cmd_gen_data(&load(&a, overrides)?).map(|_| true),
        Cmd::Report { run_dir, out } => {
            no_overrides("report")?;
            cmd_report(&run_dir, out.as_deref()).map(|_| true)
        }
        Cmd::GradCheck { cfg, eps, precision, tolerance } => {
            cmd_grad_check(&load(&cfg, overrides)?, eps, precision, tolerance)
        }
        Cmd::Selftest => {
            no_overrides("selftest")?;
            cmd_selftest()
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) =
            split_overrides(strings(&["aple", "run", "--train.lambda_d", "0.8", "--out", "x", "--adapter.sigma=0.1"]))
                .unwrap();
        assert_eq!(rest, strings(&["aple", "run", "--out", "x"]));
        assert_eq!(
            ov,
            vec![("train.lambda_d".into(), "0.8".into()), ("adapter.sigma".into(), "0.1".into())]
        );
        assert!(split_overrides(strings(&["aple", "run", "--train.seed"])).is_err());
    }

    #[test]
    fn sweep_values() {
        assert_eq!(parse_value(SweepAxis::AdaptationOnOff, "off").unwrap(), 0.0);
        assert_eq!(parse_value(SweepAxis::AdaptationOnOff, "on").unwrap(), 1.0);
        assert_eq!(parse_value(SweepAxis::PromptLength, "4").unwrap(), 4.0);
        assert!(parse_value(SweepAxis::Sigma, "on").is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Validation(vec![])), 1);
        assert_eq!(exit_code(&Error::Divergence(String::new())), 3);
        assert_eq!(exit_code(&Error::Format(String::new())), 2);
    }
}
