//! Command-line front end. Every command writes into `--out` (default: the
//! config's `out_dir`), starting with `config.json`, the fully resolved
//! configuration. Exit status: 0 on success, 1 on usage or input errors,
//! 2 when a check fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{error_map, selfsim_heatmap};
use crate::colormap::colorize;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::extractor::{ArchSpec, Extractor};
use crate::gradcheck::gradcheck_suite;
use crate::io::{load_image, save_image, write_error_grid, write_gradcheck, write_rows, write_trace, write_train_log};
use crate::selection::{SelectionLayers, StructureNet};
use crate::stylize::stylize;
use crate::synth::{domain_energy_ratios, synth_dataset, SynthSpec};
use crate::tensor::Tensor;
use crate::train::{training_corpora, train_structure_net};
use crate::weights::load_weights;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sesim", version, about = "Spatially-correlative structure losses")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Self-similarity heatmap of one query position.
    Selfsim {
        #[arg(long)]
        image: PathBuf,
        /// Query in tap coordinates of the first configured tap, `ROW,COL`.
        #[arg(long, value_parser = parse_coord)]
        query: (usize, usize),
    },
    /// Structure error grid and heatmap between two images.
    ErrorMap {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
    },
    /// Train selection layers contrastively on the synthetic corpus.
    TrainStructure,
    /// Optimize pixels for content structure plus Gram style. Without
    /// images, the seeded synthetic demo pair is used.
    Stylize {
        #[arg(long, requires = "style")]
        content: Option<PathBuf>,
        #[arg(long, requires = "content")]
        style: Option<PathBuf>,
    },
    /// Write the synthetic paired-structure corpus.
    Synth,
    /// Finite-difference check of every backward pass.
    Gradcheck,
}

fn parse_coord(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(r)?, p(c)?))
}

/// Parse `args` (including the program name), run, and return the exit status.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) if !path.exists() => return Err(Error::MissingFile(path.clone())),
        Some(path) => RunConfig::from_json(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn build_extractor(cfg: &RunConfig) -> Result<Extractor<f32>> {
    match &cfg.extractor.weights {
        Some(path) => {
            let (arch, weights) = load_weights(path, None)?;
            Extractor::new(arch, weights)
        }
        None => Extractor::seeded(ArchSpec::desk(cfg.extractor.padding), cfg.extractor.seed),
    }
}

fn load_selection(cfg: &RunConfig) -> Result<Option<SelectionLayers<f32>>> {
    cfg.selection.as_deref().map(SelectionLayers::load).transpose()
}

fn net<'a>(ext: &'a Extractor<f32>, sel: &'a Option<SelectionLayers<f32>>) -> StructureNet<'a, f32> {
    match sel {
        Some(s) => StructureNet::learned(ext, s),
        None => StructureNet::fixed(ext),
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let cfg = resolve(&cli)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    match cli.command {
        Command::Selfsim { image, query } => cmd_selfsim(&cfg, &out, &image, query),
        Command::ErrorMap { x, y } => cmd_error_map(&cfg, &out, &x, &y),
        Command::TrainStructure => cmd_train(&cfg, &out),
        Command::Stylize { content, style } => cmd_stylize(&cfg, &out, content.zip(style)),
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Gradcheck => cmd_gradcheck(&cfg, &out),
    }
}

fn cmd_selfsim(cfg: &RunConfig, out: &Path, image: &Path, query: (usize, usize)) -> Result<i32> {
    let img = load_image(image)?;
    let ext = build_extractor(cfg)?;
    let sel = load_selection(cfg)?;
    let map = selfsim_heatmap(&img, query, &cfg.sesim, &net(&ext, &sel))?;
    let p = cfg.sesim.patch;
    let rows: Vec<Vec<f64>> = (0..p * p)
        .map(|k| vec![(k / p) as f64, (k % p) as f64, map.raw[k], map.normalized[k]])
        .collect();
    write_rows(&out.join("selfsim.csv"), &["patch_row", "patch_col", "raw", "normalized"], &rows)?;
    save_image(&colorize(&map.heatmap), &out.join("selfsim.png"))?;
    Ok(EXIT_OK)
}

fn cmd_error_map(cfg: &RunConfig, out: &Path, x: &Path, y: &Path) -> Result<i32> {
    let (x, y) = (load_image(x)?, load_image(y)?);
    let ext = build_extractor(cfg)?;
    let sel = load_selection(cfg)?;
    let map = error_map(&x, &y, &cfg.sesim, &net(&ext, &sel))?;
    write_error_grid(&out.join("error_grid.csv"), &map.grid)?;
    save_image(&colorize(&map.heatmap), &out.join("error_map.png"))?;
    println!("mean error {:.6}", map.grid.mean());
    Ok(EXIT_OK)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let ext = build_extractor(cfg)?;
    let (train, heldout) = training_corpora(cfg)?;
    let every = cfg.train.log_every.max(1);
    let outcome = train_structure_net(&train, &heldout, &ext, cfg, |r| {
        if r.step % every == 0 {
            eprintln!("step {:5}  loss {:.4}  retrieval {:.3}", r.step, r.loss, r.retrieval_rate);
        }
    })?;
    write_train_log(&out.join("train_log.csv"), &outcome.log)?;
    outcome.selection.save(&out.join("selection.json"))?;
    write_rows(
        &out.join("heldout.csv"),
        &["seed", "loss", "retrieval_rate"],
        &[vec![cfg.seed as f64, outcome.heldout_loss, outcome.heldout_retrieval]],
    )?;
    println!("held-out loss {:.4}, retrieval {:.4}", outcome.heldout_loss, outcome.heldout_retrieval);
    Ok(EXIT_OK)
}

/// Content is the stripe rendering of mask 0, style the noise rendering of
/// mask 1, both from the `synth` settings and the run seed.
pub fn demo_pair(cfg: &RunConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let spec = SynthSpec { count: 2, ..SynthSpec::new(&cfg.synth, cfg.seed) };
    let mut corpus = synth_dataset(&spec)?;
    Ok((corpus.stripes.swap_remove(0), corpus.noise.swap_remove(1)))
}

fn cmd_stylize(cfg: &RunConfig, out: &Path, images: Option<(PathBuf, PathBuf)>) -> Result<i32> {
    let (content, style) = match images {
        Some((c, s)) => (load_image(&c)?, load_image(&s)?),
        None => demo_pair(cfg)?,
    };
    let ext = build_extractor(cfg)?;
    let sel = load_selection(cfg)?;
    let result = stylize(&content, &style, &net(&ext, &sel), &cfg.sesim, &cfg.stylize)?;
    write_trace(&out.join("trace.csv"), &result.trace)?;
    save_image(&result.image, &out.join("stylized.png"))?;
    save_image(&result.best_image, &out.join("best.png"))?;
    println!("total loss {:.6} -> best {:.6}", result.initial_total(), result.best_total());
    Ok(EXIT_OK)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let corpus = synth_dataset(&SynthSpec::new(&cfg.synth, cfg.seed))?;
    for i in 0..corpus.len() {
        save_image(&corpus.stripes[i], &out.join(format!("stripes_{i:03}.png")))?;
        save_image(&corpus.noise[i], &out.join(format!("noise_{i:03}.png")))?;
        save_image(&corpus.masks[i].to_image(), &out.join(format!("mask_{i:03}.png")))?;
    }
    let rows: Vec<Vec<f64>> = (0..corpus.len())
        .map(|i| vec![i as f64, i as f64, corpus.shuffled[i] as f64, corpus.masks[i].coverage()])
        .collect();
    write_rows(&out.join("pairs.csv"), &["stripes", "aligned_noise", "shuffled_noise", "coverage"], &rows)?;
    let (s, n) = domain_energy_ratios(&corpus);
    write_rows(&out.join("energy.csv"), &["stripes", "noise"], &[vec![s, n]])?;
    println!("{} pairs, high-frequency energy stripes {s:.4} noise {n:.4}", corpus.len());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let report = gradcheck_suite(cfg.seed)?;
    fs::write(out.join("gradcheck.txt"), report.to_text())?;
    write_gradcheck(&out.join("gradcheck.csv"), &report)?;
    print!("{}", report.to_text());
    Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
}
