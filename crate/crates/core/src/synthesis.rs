//! End-to-end jobs: coarse-to-fine style transfer, activation inversion and
//! cross-layer match reports.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsOptions, Problem, Termination};
use crate::mrf;
use crate::objective::{self, EnergyConfig, EnergyReport, Objective};
use crate::tensor::{self, Tensor};
use crate::vgg::{self, NetworkDef};

/// Default L-BFGS iterations per pyramid level.
pub const ITERATIONS_PER_LEVEL: usize = 200;
/// Halving stops once the longest side drops below this.
pub const PYRAMID_MIN_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidLevel {
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
}

/// Coarse-to-fine resolutions ending at the output size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidSchedule {
    pub levels: Vec<PyramidLevel>,
}

impl PyramidSchedule {
    /// Halves (rounding up) from the output size until the longest side is
    /// below [`PYRAMID_MIN_SIDE`], then orders coarse to fine.
    pub fn new(height: usize, width: usize, iterations: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("output size must be at least 1x1"));
        }
        let mut dims = vec![(height, width)];
        let (mut h, mut w) = (height, width);
        while h.max(w) >= PYRAMID_MIN_SIDE {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            dims.push((h, w));
        }
        Ok(PyramidSchedule {
            levels: dims
                .into_iter()
                .rev()
                .map(|(height, width)| PyramidLevel {
                    height,
                    width,
                    iterations,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Seeded uniform noise in `[0, 255]`.
pub fn noise_image(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(channels, height, width, |_, _, _| {
        rng.random_range(0.0f32..=255.0)
    })
}

/// One accepted iterate (iteration 0 is the level's initialization).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub level: usize,
    pub iteration: usize,
    pub total: f64,
    /// Layer-weighted style energy.
    pub style: f64,
    pub content: f64,
    pub tv: f64,
}

impl TraceRecord {
    fn from_report(level: usize, iteration: usize, r: &EnergyReport, cfg: &EnergyConfig) -> Self {
        TraceRecord {
            level,
            iteration,
            total: r.total,
            style: r.weighted_style(cfg),
            content: r.content,
            tv: r.tv,
        }
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "level={} iter={} total={:e} style={:e} content={:e} tv={:e}",
            self.level, self.iteration, self.total, self.style, self.content, self.tv
        )
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisJob {
    pub style: Tensor,
    /// Needed iff `config.alpha_content > 0`; ignored otherwise.
    pub content: Option<Tensor>,
    pub config: EnergyConfig,
    pub seed: u64,
    /// Output size for unguided synthesis. Defaults to the style size.
    pub output_size: Option<(usize, usize)>,
    pub iterations_per_level: usize,
    pub lbfgs_memory: usize,
}

impl SynthesisJob {
    pub fn new(style: Tensor, content: Option<Tensor>, config: EnergyConfig) -> Self {
        SynthesisJob {
            style,
            content,
            config,
            seed: 0,
            output_size: None,
            iterations_per_level: ITERATIONS_PER_LEVEL,
            lbfgs_memory: LbfgsOptions::default().memory,
        }
    }

    fn guided(&self) -> bool {
        self.config.alpha_content > 0.0
    }

    /// Final image size: the content size when guided.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        if self.guided() {
            let c = self
                .content
                .as_ref()
                .ok_or_else(|| Error::config("alpha_content > 0 requires a content image"))?;
            Ok((c.height(), c.width()))
        } else {
            Ok(self
                .output_size
                .unwrap_or((self.style.height(), self.style.width())))
        }
    }

    pub fn schedule(&self) -> Result<PyramidSchedule> {
        let (h, w) = self.output_dims()?;
        PyramidSchedule::new(h, w, self.iterations_per_level)
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (what, img) in [
            ("style", Some(&self.style)),
            ("content", self.content.as_ref()),
        ] {
            if let Some(img) = img {
                if img.channels() != 3 || img.is_empty() {
                    return Err(Error::Input(format!("{what} image must be non-empty RGB")));
                }
            }
        }
        if self.iterations_per_level == 0 {
            return Err(Error::config("iterations per level must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LevelTrace {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// The style image was too small for this level's patches.
    pub skipped: bool,
    pub records: Vec<TraceRecord>,
    pub termination: Option<Termination>,
}

#[derive(Clone, Debug)]
pub struct TransferResult {
    /// Clamped to `[0, 255]`.
    pub image: Tensor,
    pub levels: Vec<LevelTrace>,
}

/// Style image size at a level: scaled by the same factor as the output.
fn level_style_dims(job: &SynthesisJob, level: &PyramidLevel) -> Result<(usize, usize)> {
    let (out_h, out_w) = job.output_dims()?;
    let scale = |n: usize, num: usize, den: usize| {
        ((n as f64 * num as f64 / den as f64).round() as usize).max(1)
    };
    Ok((
        scale(job.style.height(), level.height, out_h),
        scale(job.style.width(), level.width, out_w),
    ))
}

/// The per-level objective of a transfer job: style resized by the level's
/// scale factor, content resized to the level size.
pub fn level_objective<'a>(
    net: &'a NetworkDef,
    job: &'a SynthesisJob,
    level: &PyramidLevel,
) -> Result<Objective<'a>> {
    let (sh, sw) = level_style_dims(job, level)?;
    let style = tensor::bilinear_resize(&job.style, sh, sw)?;
    let content = if job.guided() {
        let c = job.content.as_ref().expect("validated");
        Some(tensor::bilinear_resize(c, level.height, level.width)?)
    } else {
        None
    };
    Objective::new(net, &job.config, Some(&style), content.as_ref())
}

/// Whether both the synthesized image and at least one style copy have
/// room for a patch at every MRF layer at this level.
fn level_fits(net: &NetworkDef, job: &SynthesisJob, level: &PyramidLevel) -> Result<bool> {
    let cfg = &job.config;
    let k = cfg.patch_size;
    for layer in &cfg.mrf_layers {
        let (fh, fw) = net.tap_dims(layer, level.height, level.width)?;
        if fh < k || fw < k {
            return Ok(false);
        }
    }
    let style_dims = level_style_dims(job, level)?;
    Ok(mrf::usable_copies(net, style_dims, &cfg.mrf_layers, k, &cfg.augmentation)? > 0)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn from_f64(shape: &Tensor, x: &[f64]) -> Tensor {
    shape.with_data(x.iter().map(|&v| v as f32).collect())
}

/// Adapts an [`Objective`] to the minimizer and records accepted iterates.
struct LevelProblem<'o, 'a, 'f> {
    objective: &'o Objective<'a>,
    template: Tensor,
    level: usize,
    last: Option<EnergyReport>,
    records: Vec<TraceRecord>,
    on_record: &'f mut dyn FnMut(&TraceRecord),
}

impl LevelProblem<'_, '_, '_> {
    fn record(&mut self, iteration: usize) {
        let report = self.last.as_ref().expect("evaluated before recording");
        let rec = TraceRecord::from_report(self.level, iteration, report, self.objective.config());
        log::info!("{rec}");
        (self.on_record)(&rec);
        self.records.push(rec);
    }
}

impl Problem for LevelProblem<'_, '_, '_> {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let image = from_f64(&self.template, x);
        let report = self.objective.evaluate(&image)?;
        let out = (report.total, to_f64(&report.grad));
        self.last = Some(report);
        // The minimizer evaluates its starting point first.
        if self.records.is_empty() {
            self.record(0);
        }
        Ok(out)
    }

    fn accepted(&mut self, iteration: usize, _energy: f64) {
        self.record(iteration);
    }
}

pub fn run_transfer(net: &NetworkDef, job: &SynthesisJob) -> Result<TransferResult> {
    run_transfer_with(net, job, &mut |_| {})
}

/// Coarse-to-fine transfer; `on_record` sees every trace record as it is
/// produced.
pub fn run_transfer_with(
    net: &NetworkDef,
    job: &SynthesisJob,
    on_record: &mut dyn FnMut(&TraceRecord),
) -> Result<TransferResult> {
    job.validate()?;
    job.config.validate_layers(net)?;
    let schedule = job.schedule()?;
    let last_level = schedule.len() - 1;
    let opts = LbfgsOptions {
        max_iters: job.iterations_per_level,
        memory: job.lbfgs_memory,
        ..Default::default()
    };

    let mut current: Option<Tensor> = None;
    let mut traces = Vec::with_capacity(schedule.len());
    for (i, level) in schedule.levels.iter().enumerate() {
        if i < last_level && !level_fits(net, job, level).map_err(|e| e.at_level(i))? {
            log::warn!(
                "pyramid level {i} ({}x{}) is too small for {}x{} patches; skipped",
                level.height,
                level.width,
                job.config.patch_size,
                job.config.patch_size
            );
            traces.push(LevelTrace {
                level: i,
                height: level.height,
                width: level.width,
                skipped: true,
                records: Vec::new(),
                termination: None,
            });
            continue;
        }

        let init = match &current {
            Some(prev) => tensor::bilinear_resize(prev, level.height, level.width),
            None => Ok(noise_image(3, level.height, level.width, job.seed)),
        }
        .map_err(|e| e.at_level(i))?;
        let objective = level_objective(net, job, level).map_err(|e| e.at_level(i))?;

        let mut problem = LevelProblem {
            objective: &objective,
            template: init.clone(),
            level: i,
            last: None,
            records: Vec::new(),
            on_record,
        };
        let result =
            lbfgs::minimize(&mut problem, to_f64(&init), &opts).map_err(|e| e.at_level(i))?;
        current = Some(from_f64(&init, &result.x));
        traces.push(LevelTrace {
            level: i,
            height: level.height,
            width: level.width,
            skipped: false,
            records: problem.records,
            termination: Some(result.termination),
        });
    }

    let image = current
        .expect("the final level always runs")
        .clamp(0.0, 255.0);
    Ok(TransferResult {
        image,
        levels: traces,
    })
}

/// Second image whose activations are blended with the primary's.
#[derive(Clone, Debug)]
pub struct Blend {
    pub other: Tensor,
    /// Weight of the primary image's activations.
    pub lambda: f32,
}

#[derive(Clone, Debug)]
pub struct InvertJob {
    pub image: Tensor,
    pub taps: Vec<String>,
    pub alpha_tv: f32,
    pub iterations: usize,
    pub seed: u64,
    pub blend: Option<Blend>,
    pub lbfgs_memory: usize,
}

impl InvertJob {
    pub fn new(image: Tensor, taps: Vec<String>) -> Self {
        InvertJob {
            image,
            taps,
            alpha_tv: EnergyConfig::default().alpha_tv,
            iterations: ITERATIONS_PER_LEVEL,
            seed: 0,
            blend: None,
            lbfgs_memory: LbfgsOptions::default().memory,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InvertResult {
    /// Clamped to `[0, 255]`.
    pub image: Tensor,
    /// Total energy at the noise init, then at each accepted iterate.
    pub trace: Vec<f64>,
    /// Feature reconstruction energy (without smoothness) at the noise init.
    pub initial_feature_energy: f64,
    pub final_feature_energy: f64,
}

struct InvertProblem<'a> {
    net: &'a NetworkDef,
    targets: BTreeMap<String, Tensor>,
    alpha_tv: f32,
    template: Tensor,
}

impl InvertProblem<'_> {
    /// `(total, feature energy, gradient)`
    fn energy(&self, image: &Tensor) -> Result<(f64, f64, Tensor)> {
        let taps: Vec<&str> = self.targets.keys().map(String::as_str).collect();
        let acts = vgg::forward_tapped(self.net, image, &taps)?;
        let mut grads = BTreeMap::new();
        let mut feature = 0.0;
        for (name, target) in &self.targets {
            let act = acts.get(self.net, name).expect("tapped");
            let (e, g) = objective::content_energy_and_grad(act, target)?;
            feature += e;
            grads.insert(name.clone(), g);
        }
        let mut grad = vgg::backward_multi_tap(self.net, &acts, &grads)?;
        let (tv, tv_grad) = objective::tv_energy_and_grad(image);
        grad.add_scaled(&tv_grad, self.alpha_tv);
        Ok((feature + self.alpha_tv as f64 * tv, feature, grad))
    }
}

impl Problem for InvertProblem<'_> {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (total, _, grad) = self.energy(&from_f64(&self.template, x))?;
        Ok((total, to_f64(&grad)))
    }
}

/// Reconstructs an image from its activations at `taps` (or from a blend
/// of two images' activations), starting from seeded noise.
pub fn run_invert(net: &NetworkDef, job: &InvertJob) -> Result<InvertResult> {
    if job.taps.is_empty() {
        return Err(Error::config("inversion needs at least one tap layer"));
    }
    if !(job.alpha_tv >= 0.0) {
        return Err(Error::config("alpha_tv must be >= 0"));
    }
    let acts_a = vgg::forward_tapped(net, &job.image, &job.taps)?;
    let acts_b = match &job.blend {
        Some(b) => {
            if b.other.shape() != job.image.shape() {
                return Err(Error::Input(format!(
                    "blend images differ in size: {:?} vs {:?}",
                    job.image.shape(),
                    b.other.shape()
                )));
            }
            Some(vgg::forward_tapped(net, &b.other, &job.taps)?)
        }
        None => None,
    };
    let mut targets = BTreeMap::new();
    for tap in &job.taps {
        let a = acts_a.get(net, tap).expect("tapped");
        let target = match (&job.blend, &acts_b) {
            (Some(blend), Some(acts_b)) => {
                let b = acts_b.get(net, tap).expect("tapped");
                let lambda = blend.lambda;
                a.with_data(
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&va, &vb)| lambda * va + (1.0 - lambda) * vb)
                        .collect(),
                )
            }
            _ => a.clone(),
        };
        targets.insert(tap.clone(), target);
    }

    let (c, h, w) = job.image.shape();
    let init = noise_image(c, h, w, job.seed);
    let mut problem = InvertProblem {
        net,
        targets,
        alpha_tv: job.alpha_tv,
        template: init.clone(),
    };
    let (_, initial_feature_energy, _) = problem.energy(&init)?;
    let opts = LbfgsOptions {
        max_iters: job.iterations,
        memory: job.lbfgs_memory,
        ..Default::default()
    };
    let result = lbfgs::minimize(&mut problem, to_f64(&init), &opts)?;
    let raw = from_f64(&init, &result.x);
    let (_, final_feature_energy, _) = problem.energy(&raw)?;
    Ok(InvertResult {
        image: raw.clamp(0.0, 255.0),
        trace: result.trace,
        initial_feature_energy,
        final_feature_energy,
    })
}

/// One query of a match report. Coordinates are `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRow {
    pub layer: String,
    /// Requested pixel in image A.
    pub query: (usize, usize),
    /// Top-left feature cell of the query patch.
    pub query_cell: (usize, usize),
    /// `query_cell` mapped back to A's pixels.
    pub query_pixel: (usize, usize),
    /// Top-left feature cell of the best patch in B.
    pub match_cell: (usize, usize),
    /// `match_cell` mapped back to B's pixels.
    pub match_pixel: (usize, usize),
    pub ncc: f32,
}

impl fmt::Display for MatchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer={} query_y={} query_x={} match_y={} match_x={} ncc={:.6}",
            self.layer,
            self.query.0,
            self.query.1,
            self.match_pixel.0,
            self.match_pixel.1,
            self.ncc
        )
    }
}

/// For each layer and query pixel of A, the best-matching `k×k` neural
/// patch in B, reported in B's pixel coordinates.
pub fn run_match_report<S: AsRef<str>>(
    net: &NetworkDef,
    image_a: &Tensor,
    image_b: &Tensor,
    queries: &[(usize, usize)],
    layers: &[S],
    k: usize,
) -> Result<Vec<MatchRow>> {
    for &(y, x) in queries {
        if y >= image_a.height() || x >= image_a.width() {
            return Err(Error::Input(format!(
                "query ({y}, {x}) lies outside the {}x{} image",
                image_a.height(),
                image_a.width()
            )));
        }
    }
    let acts_a = vgg::forward_tapped(net, image_a, layers)?;
    let acts_b = vgg::forward_tapped(net, image_b, layers)?;
    let mut rows = Vec::with_capacity(queries.len() * layers.len());
    for layer in layers {
        let layer = layer.as_ref();
        let stride = net.cumulative_stride(layer)?;
        let fa = acts_a.get(net, layer).expect("tapped");
        let bank_b = mrf::extract_patches(acts_b.get(net, layer).expect("tapped"), k, 1)?;
        if fa.height() < k || fa.width() < k {
            return Err(Error::config(format!(
                "{layer} map of image A is {}x{}, too small for {k}x{k} patches",
                fa.height(),
                fa.width()
            )));
        }
        for &(y, x) in queries {
            let cy = (y / stride).min(fa.height() - k);
            let cx = (x / stride).min(fa.width() - k);
            let query = mrf::extract_patches(&fa.crop(cy, cx, k, k)?, k, 1)?;
            let m = mrf::match_patches_scored(&query, &bank_b)?[0];
            let origin = bank_b.provenance()[m.index];
            rows.push(MatchRow {
                layer: layer.to_owned(),
                query: (y, x),
                query_cell: (cy, cx),
                query_pixel: (cy * stride, cx * stride),
                match_cell: (origin.y, origin.x),
                match_pixel: (origin.y * stride, origin.x * stride),
                ncc: m.ncc,
            });
        }
    }
    Ok(rows)
}
