//! `dmsa`: train, refine pseudo labels with PAR, score masks, print the
//! dilation schedule.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dmsa::aspp::DilationSchedule;
use dmsa::decoder::PseudoLabelMask;
use dmsa::par::{par_refine, ParParams};
use dmsa::pipeline::checkpoint;
use dmsa::pipeline::netpbm::{read_pgm, read_ppm, write_pgm, LabelImage};
use dmsa::pipeline::{evaluate, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "dmsa", version, about = "Unsupervised segmentation with dynamic-dilation ASPP and PAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic benchmark; writes metrics.csv, per-epoch
    /// checkpoints and sample masks to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a mask against an image with PAR.
    Refine {
        /// P6 image.
        #[arg(long)]
        image: PathBuf,
        /// P5 label mask, or a `.dmsa` probability mask.
        #[arg(long)]
        mask: PathBuf,
        /// P5 label output, or `.dmsa` for probabilities.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        omega3: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        dilations: Option<Vec<usize>>,
    },
    /// Score predicted label masks against ground truth; prints JSON.
    Eval {
        /// P5 file, or a directory of them.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        /// Relabel predictions by the best class matching first.
        #[arg(long = "match")]
        use_matching: bool,
    },
    /// Print the ASPP dilation rates for an inclusive epoch range `A..B`.
    Schedule {
        #[arg(long, value_parser = parse_epochs)]
        epochs: (u64, u64),
    },
}

fn parse_epochs(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("bad epoch `{v}`: {e}"));
    let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
    if a == 0 || a > b {
        return Err(format!("need 1 <= A <= B, got {a}..{b}"));
    }
    Ok((a, b))
}

fn is_dmsa(p: &Path) -> bool {
    p.extension() == Some(OsStr::new("dmsa"))
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let mut trainer = Trainer::new(cfg)?;
    let history = trainer.run_to_dir(out)?;
    let report = trainer.evaluate(false)?;
    if let Some(last) = history.last() {
        println!("step {} epoch {} total {:.6}", last.step, last.epoch, last.total);
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn refine(
    image: &Path,
    mask: &Path,
    out: &Path,
    iters: Option<usize>,
    omega3: Option<f64>,
    dilations: Option<Vec<usize>>,
) -> Result<()> {
    let img = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let input = if is_dmsa(mask) {
        checkpoint::load_mask(mask)
    } else {
        read_pgm(mask).and_then(|m| PseudoLabelMask::one_hot(&m.labels, m.height, m.width, m.classes()))
    }
    .with_context(|| format!("reading {}", mask.display()))?;
    if (input.height(), input.width()) != (h, w) {
        bail!("mask is {}x{} but the image is {w}x{h}", input.width(), input.height());
    }
    let mut params = ParParams::default();
    if let Some(n) = iters {
        params.iterations = n;
    }
    if let Some(x) = omega3 {
        params.omega3 = x;
    }
    if let Some(d) = dilations {
        params.dilation_list = d;
    }
    let refined = par_refine(&input, &img, &params)?;
    if is_dmsa(out) {
        checkpoint::save_mask(&refined, out)?;
    } else {
        write_pgm(out, &LabelImage::new(refined.argmax(), w, h, refined.classes())?)?;
    }
    Ok(())
}

/// `(name, labels)` for a file or every regular file in a directory, by name.
fn load_labels(path: &Path, classes: usize) -> Result<Vec<(String, Vec<u8>)>> {
    let files = if path.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let m = read_pgm(&f).with_context(|| format!("reading {}", f.display()))?;
        if m.classes() > classes {
            bail!("{} declares {} classes, more than --classes {classes}", f.display(), m.classes());
        }
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, m.labels));
    }
    Ok(out)
}

fn eval(pred: &Path, gt: &Path, classes: usize, use_matching: bool) -> Result<()> {
    let p = load_labels(pred, classes)?;
    let g = load_labels(gt, classes)?;
    if p.len() != g.len() {
        bail!("{} prediction files but {} ground-truth files", p.len(), g.len());
    }
    let both_dirs = pred.is_dir() && gt.is_dir();
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    for ((pn, pl), (gn, gl)) in p.into_iter().zip(g) {
        if both_dirs && pn != gn {
            bail!("file names differ: `{pn}` vs `{gn}`");
        }
        if pl.len() != gl.len() {
            bail!("`{pn}` has {} pixels, `{gn}` has {}", pl.len(), gl.len());
        }
        all_p.extend(pl);
        all_g.extend(gl);
    }
    let report = evaluate(&all_p, &all_g, classes, use_matching)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn schedule(a: u64, b: u64) {
    let table = DilationSchedule::default();
    for epoch in a..=b {
        let r = table.rates(epoch);
        println!("{epoch} [{},{},{},{}]", r[0], r[1], r[2], r[3]);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Refine { image, mask, out, iters, omega3, dilations } => {
            refine(&image, &mask, &out, iters, omega3, dilations)
        }
        Command::Eval { pred, gt, classes, use_matching } => eval(&pred, &gt, classes, use_matching),
        Command::Schedule { epochs: (a, b) } => {
            schedule(a, b);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
