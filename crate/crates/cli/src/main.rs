//! `neural-mrf` command-line tool.
//!
//! Exit status: 0 on success, 2 for usage errors (bad flags, unreadable
//! inputs), 1 for failures while running.

mod args;
mod config;
mod imageio;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use log::{info, warn};
use neural_mrf::synthesis::run_transfer_with;
use neural_mrf::vgg::{self, make_test_network};
use neural_mrf::{run_invert, run_match_report, InvertJob, NetworkDef, SynthesisJob};

use args::{Cli, Command, GenArgs, InvertArgs, MatchArgs, NetworkSource, TransferArgs};

/// A problem with how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_network(n: &NetworkSource) -> anyhow::Result<NetworkDef> {
    if let Some(seed) = n.source.test_net {
        info!("using test network seed {seed}");
        return Ok(make_test_network(seed, n.test_net_width.into()));
    }
    let path = n
        .source
        .weights
        .as_ref()
        .expect("clap requires a network source");
    if !path.is_file() {
        return Err(usage(format!("weight file {} not found", path.display())));
    }
    let net = vgg::load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    info!("loaded {} ({:?} width)", path.display(), net.width_scale());
    Ok(net)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn transfer(a: TransferArgs) -> anyhow::Result<()> {
    let settings = config::resolve(&a.energy)?;
    let guided = settings.energy.alpha_content > 0.0;
    let style = imageio::load(&a.style)?;
    let content = match (&a.content, guided) {
        (Some(path), true) => Some(imageio::load(path)?),
        (Some(_), false) => {
            warn!("--content is ignored when --alpha-content is 0; synthesizing at the style size or --size");
            None
        }
        (None, true) => return Err(usage("--content is required unless --alpha-content is 0")),
        (None, false) => None,
    };
    if guided && a.size.is_some() {
        warn!("--size is ignored for guided transfer; the output takes the content size");
    }
    let net = load_network(&a.network)?;
    settings
        .energy
        .validate_layers(&net)
        .map_err(|e| usage(e.to_string()))?;

    let mut job = SynthesisJob::new(style, content, settings.energy);
    job.seed = settings.seed;
    job.output_size = a.size;
    job.iterations_per_level = settings.iterations;
    job.lbfgs_memory = settings.lbfgs_memory;

    let mut trace = a.trace.as_deref().map(create).transpose()?;
    let mut trace_err = None;
    let result = run_transfer_with(&net, &job, &mut |rec| {
        if let Some(t) = trace.as_mut() {
            if let Err(e) = writeln!(t, "{rec}") {
                trace_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e).context("writing trace");
    }
    if let Some(mut t) = trace {
        t.flush().context("writing trace")?;
    }
    for level in &result.levels {
        if let Some(last) = level.records.last() {
            info!(
                "level {} {}x{}: {} iterations, final energy {:e}",
                level.level, level.height, level.width, last.iteration, last.total
            );
        }
    }
    imageio::save_png(&result.image, &a.output)
}

fn invert(a: InvertArgs) -> anyhow::Result<()> {
    let image = imageio::load(&a.image)?;
    let blend = match &a.blend_with {
        Some(path) => {
            let other = imageio::load(path)?;
            if other.shape() != image.shape() {
                return Err(usage(format!(
                    "--blend-with image is {}x{}, --image is {}x{}",
                    other.height(),
                    other.width(),
                    image.height(),
                    image.width()
                )));
            }
            Some(neural_mrf::synthesis::Blend {
                other,
                lambda: a.lambda,
            })
        }
        None => None,
    };
    let net = load_network(&a.network)?;
    for tap in &a.taps {
        if !net.has_tap(tap) {
            return Err(usage(format!("unknown tap {tap:?}")));
        }
    }
    if a.iterations == 0 {
        return Err(usage("--iterations must be at least 1"));
    }
    let mut job = InvertJob::new(image, a.taps);
    if let Some(v) = a.alpha_tv {
        job.alpha_tv = v;
    }
    job.iterations = a.iterations;
    job.lbfgs_memory = a.lbfgs_memory;
    job.seed = a.seed;
    job.blend = blend;

    let result = run_invert(&net, &job)?;
    info!(
        "feature energy {:e} -> {:e}",
        result.initial_feature_energy, result.final_feature_energy
    );
    if let Some(path) = &a.trace {
        let mut t = create(path)?;
        for (i, e) in result.trace.iter().enumerate() {
            writeln!(t, "iter={i} total={e:e}")?;
        }
        t.flush()?;
    }
    imageio::save_png(&result.image, &a.output)
}

fn match_report(a: MatchArgs) -> anyhow::Result<()> {
    let img_a = imageio::load(&a.a)?;
    let img_b = imageio::load(&a.b)?;
    for &(y, x) in &a.coords {
        if y >= img_a.height() || x >= img_a.width() {
            return Err(usage(format!(
                "coordinate {y},{x} is outside the {}x{} image",
                img_a.height(),
                img_a.width()
            )));
        }
    }
    let net = load_network(&a.network)?;
    for layer in &a.layers {
        if !net.has_tap(layer) {
            return Err(usage(format!("unknown layer {layer:?}")));
        }
    }
    let rows = run_match_report(&net, &img_a, &img_b, &a.coords, &a.layers, a.patch_size)?;
    let mut out = std::io::stdout().lock();
    for row in rows {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn gen_test_weights(a: GenArgs) -> anyhow::Result<()> {
    let net = make_test_network(a.seed, a.width.into());
    vgg::save_weights(&net, &a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    info!("wrote {}", a.output.display());
    Ok(())
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_target(false)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Transfer(a) => transfer(a),
        Command::Invert(a) => invert(a),
        Command::MatchReport(a) => match_report(a),
        Command::GenTestWeights(a) => gen_test_weights(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
