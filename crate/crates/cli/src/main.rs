use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use s2m_core::checks::{CheckTarget, GRAD_TOLERANCE};
use s2m_core::data::{
    gen_corpus, hash_split, image_files, load_dataset, load_gray, load_mask, save_pgm, write_dataset, ShapeKind,
};
use s2m_core::masl::{modulation, morph_features};
use s2m_core::model::{load_checkpoint, save_checkpoint};
use s2m_core::spectral::energy_retention;
use s2m_core::train::{evaluate, train, write_metrics_csv, RunConfig};
use s2m_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "s2m", version, about = "Spectral token mixing segmentation: data, training and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (images/, masks/, manifest.csv).
    GenData {
        /// blob, tube, irregular, multi, or mixed (cycles through all four).
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a JSON config; writes config.json, metrics.csv, best.ckpt
    /// and beta/ maps into the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// How many validation samples get routing-map dumps.
        #[arg(long, default_value_t = 2)]
        beta_dumps: usize,
    },
    /// Hard Dice and IoU of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Per-image low-frequency energy retention as CSV on stdout.
    AnalyzeSpectrum {
        /// Dataset root (uses images/) or a directory of images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
    },
    /// Shape features and loss modulation per mask as CSV on stdout.
    MorphReport {
        /// Dataset root (uses masks/) or a directory of masks.
        #[arg(long)]
        masks: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// all, sstm, decoder, masl or model.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Csv(_) | Error::Checkpoint(_) => 3,
        Error::Numeric { .. } | Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn stdout_err(e: io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

/// `<dir>/<sub>` when it exists, otherwise `dir` itself.
fn subdir_or_self(dir: &Path, sub: &str) -> PathBuf {
    let d = dir.join(sub);
    if d.is_dir() {
        d
    } else {
        dir.to_path_buf()
    }
}

fn gen_data(kind: &str, count: usize, size: usize, out: &Path, seed: u64) -> Result<()> {
    let kinds = if kind == "mixed" {
        ShapeKind::ALL.to_vec()
    } else {
        vec![kind.parse::<ShapeKind>()?]
    };
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let corpus = gen_corpus(&kinds, count, (size, size), seed)?;
    write_dataset(out, &corpus)?;
    println!("wrote {} samples to {}", corpus.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, data: &Path, out: &Path, beta_dumps: usize) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let cfg = RunConfig::from_json(&text)?;
    let [h, w] = cfg.model.input_size;
    let samples = load_dataset(data, (h, w))?;
    let (train_set, val_set) = hash_split(samples);
    log::info!("{} training and {} validation samples", train_set.len(), val_set.len());

    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(io_err(&cfg_path))?;

    let mut model = s2m_core::model::Model::build(&cfg.model)?;
    log::info!("model has {} parameters", model.param_count());
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, |s| {
        log::debug!("step {} loss {:.5} grad norm {:.4}", s.step, s.loss, s.grad_norm);
        true
    })?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.history)?;
    save_checkpoint(&out.join("best.ckpt"), &outcome.best_model, Some(&outcome.best_weights))?;

    if beta_dumps > 0 && cfg.model.boundary_stream {
        let dir = out.join("beta");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for s in val_set.iter().take(beta_dumps) {
            let x = s.image.clone().reshape([1, 3, h, w])?;
            let (p, betas) = outcome.best_model.predict(&x)?;
            for (m, b) in betas.iter().enumerate() {
                save_pgm(&dir.join(format!("{}_stage{}.pgm", s.id, m + 1)), b)?;
            }
            save_pgm(&dir.join(format!("{}_pred.pgm", s.id)), &p)?;
        }
    }
    println!(
        "best val dice {:.4} at epoch {} after {} steps{}; weights {:?}",
        outcome.best_val_dice,
        outcome.best_epoch,
        outcome.steps,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_weights.to_array()
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let ck = load_checkpoint(checkpoint)?;
    let [h, w] = ck.model.config.input_size;
    let samples = load_dataset(data, (h, w))?;
    let weights = ck.masl_weights.unwrap_or_default();
    let rep = evaluate(&ck.model, &samples, weights, &Default::default(), threshold)?;
    let mut out = io::stdout().lock();
    writeln!(out, "id,dice,iou").map_err(stdout_err)?;
    for (id, d, u) in &rep.per_sample {
        writeln!(out, "{id},{d:.6},{u:.6}").map_err(stdout_err)?;
    }
    writeln!(out, "mean,{:.6},{:.6}", rep.dice, rep.iou).map_err(stdout_err)?;
    Ok(())
}

fn analyze_spectrum(data: &Path, k: usize) -> Result<()> {
    let files = image_files(&subdir_or_self(data, "images"))?;
    let mut out = io::stdout().lock();
    writeln!(out, "path,H,W,k,total_energy,retention_ratio").map_err(stdout_err)?;
    for f in files {
        let g: Tensor = load_gray(&f)?;
        let (h, w) = (g.shape()[0], g.shape()[1]);
        let st = energy_retention(&g, k.min(h).min(w))?;
        writeln!(out, "{},{h},{w},{},{:.6},{:.6}", f.display(), st.k, st.total_energy, st.retention_ratio)
            .map_err(stdout_err)?;
    }
    Ok(())
}

fn morph_report(masks: &Path) -> Result<()> {
    let files = image_files(&subdir_or_self(masks, "masks"))?;
    let mut out = io::stdout().lock();
    writeln!(out, "path,tau,c,iota,s,alpha_core,alpha_bnd,alpha_str,alpha_sca,alpha_tex").map_err(stdout_err)?;
    for f in files {
        let m = load_mask(&f)?;
        let feat = morph_features(&m)?;
        let a = modulation(&feat);
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            f.display(),
            feat.tubularity,
            feat.compactness,
            feat.irregularity,
            feat.scale,
            a[0],
            a[1],
            a[2],
            a[3],
            a[4]
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}

fn gradcheck(module: &str) -> Result<()> {
    let targets = if module == "all" {
        CheckTarget::ALL.to_vec()
    } else {
        vec![module.parse::<CheckTarget>()?]
    };
    let mut failed = Vec::new();
    for t in targets {
        let err = t.run()?;
        let ok = err < GRAD_TOLERANCE;
        println!("{t}: max relative error {err:.3e} {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            failed.push(t.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric {
            step: 0,
            msg: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            kind,
            count,
            size,
            out,
            seed,
        } => gen_data(&kind, count, size, &out, seed),
        Cmd::Train {
            config,
            data,
            out,
            beta_dumps,
        } => run_train(&config, &data, &out, beta_dumps),
        Cmd::Eval {
            checkpoint,
            data,
            threshold,
        } => run_eval(&checkpoint, &data, threshold),
        Cmd::AnalyzeSpectrum { data, k } => analyze_spectrum(&data, k),
        Cmd::MorphReport { masks } => morph_report(&masks),
        Cmd::Gradcheck { module } => gradcheck(&module),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
