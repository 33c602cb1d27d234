//! Command implementations behind the `lapyr` binary.

pub mod args;
pub mod experiment;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use lapyr::imageio::{load_image, save_image, BitDepth};
use lapyr::metrics::MetricReport;
use lapyr::models::{load_checkpoint, save_checkpoint, ModelBundle, ModelConfig, Ordering};
use lapyr::pipeline::{enhance_image, EnhanceConfig};
use lapyr::pyramid::decompose;
use lapyr::training::{
    ingest_manifest, synth_dataset, train, write_loss_csv, LossWeights, NoiseConfig, SampleTriplet,
};
use rayon::prelude::*;

use args::{Cli, Command, CompareArgs, DataSource, DecomposeArgs, EnhanceArgs, EvalArgs, StatsArgs, TrainArgs};
use experiment::{compare_orderings, HELD_OUT_SEED_OFFSET};

/// Bad flag values or combinations; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_MODEL: i32 = 3;

/// 1 for usage errors, 2 for I/O failures, 3 for model and format errors.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<lapyr::Error>() {
            return match e {
                lapyr::Error::Io(_) => EXIT_IO,
                lapyr::Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_MODEL,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_MODEL
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    match cli.command {
        Command::Enhance(a) => enhance(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Decompose(a) => decompose_cmd(&a),
        Command::Stats(a) => stats(&a),
        Command::Compare(a) => compare(&a),
    }
}

fn open_checkpoint(path: &Path) -> Result<ModelBundle> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn open_image(path: &Path) -> Result<lapyr::Tensor> {
    load_image(path).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn enhance(a: &EnhanceArgs) -> Result<()> {
    let bundle = open_checkpoint(&a.checkpoint)?;
    let config = EnhanceConfig::new(a.order.unwrap_or(bundle.ordering), a.patch_size)
        .map_err(|e| UsageError(e.to_string()))?;
    let image = open_image(&a.input)?;
    let out = enhance_image(&image, &bundle, &config)?;
    let depth = if a.sixteen_bit { BitDepth::Sixteen } else { BitDepth::Eight };
    save_image(&out, &a.output, depth).with_context(|| format!("writing {}", a.output.display()))?;
    log::info!("wrote {} ({})", a.output.display(), config.ordering);
    Ok(())
}

fn load_data(source: &DataSource, seed: u64) -> Result<Vec<SampleTriplet>> {
    match (&source.manifest, source.synthetic) {
        (Some(path), _) => {
            let ingested = ingest_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
            if ingested.samples.is_empty() {
                bail!(UsageError(format!("manifest {} has no usable scenes", path.display())));
            }
            Ok(ingested.samples)
        }
        (None, Some(0)) => Err(UsageError("--synthetic needs at least one scene".into()).into()),
        (None, Some(n)) => Ok(synth_dataset(n, seed, &NoiseConfig::default())?),
        (None, None) => Err(UsageError("one of --manifest or --synthetic is required".into()).into()),
    }
}

fn write_history(path: &Path, history: &[lapyr::training::LossRecord]) -> Result<()> {
    let mut out = create(path)?;
    write_loss_csv(history, &mut out)?;
    out.flush()?;
    Ok(())
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let phases = a.schedule.phase_configs()?;
    let seed = a.schedule.seed;
    let mut bundle = match &a.init {
        Some(p) => open_checkpoint(p)?,
        None => ModelBundle::init(&ModelConfig::default(), Ordering::Tfdl, seed),
    };
    if let Some(o) = a.order {
        bundle.ordering = o;
    }
    let data = load_data(&a.data, seed)?;
    log::info!("training {} on {} samples", bundle.ordering, data.len());
    let history = train(&mut bundle, &data, &phases, &LossWeights::default(), seed)?;
    save_checkpoint(&bundle, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| loss_csv_path(&a.out));
    write_history(&csv, &history)
}

/// One row of an `eval` pairs file.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub candidate: PathBuf,
    pub target: PathBuf,
    pub reference: Option<PathBuf>,
}

/// Reads 2- or 3-column TAB-separated lines. Three columns follow the
/// training manifest order `input, merged, final`, so the target is the
/// last column and the HDR reference the middle one.
pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<PathBuf> = line.split('\t').map(|c| base.join(c.trim())).collect();
        let (candidate, target, reference) = match cols.as_slice() {
            [c, t] => (c.clone(), t.clone(), None),
            [c, r, t] => (c.clone(), t.clone(), Some(r.clone())),
            _ => bail!("{}:{}: expected 2 or 3 TAB-separated paths", path.display(), n + 1),
        };
        let name = candidate
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("line{}", n + 1));
        pairs.push(Pair {
            name,
            candidate,
            target,
            reference,
        });
    }
    Ok(pairs)
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.lpips {
        eprintln!("note: LPIPS needs a pretrained perceptual network and is not computed");
    }
    let bundle = a.checkpoint.as_deref().map(open_checkpoint).transpose()?;
    let config = match &bundle {
        Some(b) => Some(
            EnhanceConfig::new(a.order.unwrap_or(b.ordering), lapyr::pipeline::PATCH_SIZE)
                .map_err(|e| UsageError(e.to_string()))?,
        ),
        None => None,
    };
    let pairs = read_pairs(&a.pairs)?;
    let reports = pairs
        .par_iter()
        .map(|p| {
            let mut candidate = open_image(&p.candidate)?;
            if let (Some(b), Some(c)) = (&bundle, &config) {
                candidate = enhance_image(&candidate, b, c)?;
            }
            let target = open_image(&p.target)?;
            let reference = match &p.reference {
                Some(r) => open_image(r)?,
                None => target.clone(),
            };
            MetricReport::compute(&p.name, &candidate, &target, &reference)
                .with_context(|| format!("scoring {}", p.name))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = create(&a.report)?;
    writeln!(out, "{}", MetricReport::CSV_HEADER)?;
    for r in &reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    log::info!("scored {} pairs into {}", reports.len(), a.report.display());
    Ok(())
}

fn decompose_cmd(a: &DecomposeArgs) -> Result<()> {
    let image = open_image(&a.input)?;
    let pyramid = decompose(&image).map_err(|e| UsageError(format!("{}: {e}", a.input.display())))?;
    fs::create_dir_all(&a.outdir).with_context(|| format!("creating {}", a.outdir.display()))?;
    for (i, level) in pyramid.levels().into_iter().enumerate() {
        // detail levels are signed; shift them into the visible range
        let (name, visible) = if i < lapyr::pyramid::DETAIL_LEVELS {
            (format!("level{i}.png"), level.map(|v| (v + 1.0) / 2.0))
        } else {
            ("base.png".to_owned(), level.clone())
        };
        save_image(&visible, a.outdir.join(&name), BitDepth::Sixteen)
            .with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<()> {
    let bundle = open_checkpoint(&a.checkpoint)?;
    print!("{}", stats_report(&bundle));
    Ok(())
}

pub fn stats_report(bundle: &ModelBundle) -> String {
    let mut s = format!("ordering: {}\n", bundle.ordering);
    for (i, t) in bundle.tonemappers.iter().enumerate() {
        s.push_str(&format!("tonemapper {i}: {} params\n", t.param_count()));
    }
    for (i, d) in bundle.denoisers.iter().enumerate() {
        s.push_str(&format!("denoiser {i}: {} params\n", d.param_count()));
    }
    let st = bundle.stats();
    s.push_str(&format!("total params: {}\n", st.params));
    s.push_str(&format!("MACs per 224x224 patch: {}\n", st.macs_per_patch));
    s
}

fn compare(a: &CompareArgs) -> Result<()> {
    let phases = a.schedule.phase_configs()?;
    let seed = a.schedule.seed;
    let data = load_data(&a.data, seed)?;
    let held_out = match (&a.data.synthetic, &a.held_out_manifest) {
        (_, Some(path)) => ingest_manifest(path)?.samples,
        (Some(_), None) => synth_dataset(a.held_out, seed.wrapping_add(HELD_OUT_SEED_OFFSET), &NoiseConfig::default())?,
        (None, None) => bail!(UsageError("--manifest needs --held-out-manifest".into())),
    };
    if held_out.is_empty() {
        bail!(UsageError("held-out set is empty".into()));
    }
    let cmp = compare_orderings(&data, &held_out, &phases, seed)?;
    let mut out = create(&a.report)?;
    out.write_all(cmp.csv().as_bytes())?;
    out.flush()?;
    if let Some(dir) = &a.outdir {
        for run in &cmp.runs {
            let ckpt = dir.join(format!("{}.lpyr", run.ordering));
            fs::create_dir_all(dir)?;
            save_checkpoint(&run.bundle, &ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
            write_history(&loss_csv_path(&ckpt), &run.history)?;
        }
    }
    for run in &cmp.runs {
        log::info!(
            "{}: {:.3} dB (untrained {:.3}, gamma {:.3}) in {:.1}s",
            run.ordering,
            run.trained.psnr,
            run.untrained.psnr,
            cmp.gamma.psnr,
            run.seconds
        );
    }
    Ok(())
}

