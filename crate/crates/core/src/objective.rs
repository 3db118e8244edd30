//! Total synthesis energy: MRF style terms, content term and a squared
//! forward-difference smoothness term, with the gradient w.r.t. pixels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mrf::{self, AugmentationSet, PatchBank};
use crate::tensor::Tensor;
use crate::vgg::{self, NetworkDef};

/// Every knob of the energy.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyConfig {
    /// Content weight; 0 for unguided synthesis.
    pub alpha_content: f32,
    /// Smoothness weight.
    pub alpha_tv: f32,
    pub mrf_layers: Vec<String>,
    pub mrf_layer_weights: Vec<f32>,
    pub content_layer: String,
    pub patch_size: usize,
    pub stride: usize,
    pub augmentation: AugmentationSet,
    /// Divide each term by its element count. Off reproduces the plain sums.
    pub normalize: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            alpha_content: 1.0,
            alpha_tv: 0.001,
            mrf_layers: vec!["relu3_1".into(), "relu4_1".into()],
            mrf_layer_weights: vec![1.0, 1.0],
            content_layer: "relu4_2".into(),
            patch_size: 3,
            stride: 1,
            augmentation: AugmentationSet::default(),
            normalize: false,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_content >= 0.0 && self.alpha_content.is_finite()) {
            return Err(Error::config("alpha_content must be finite and >= 0"));
        }
        if !(self.alpha_tv >= 0.0 && self.alpha_tv.is_finite()) {
            return Err(Error::config("alpha_tv must be finite and >= 0"));
        }
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::config("patch size and stride must be >= 1"));
        }
        if self.mrf_layers.len() != self.mrf_layer_weights.len() {
            return Err(Error::config(format!(
                "{} MRF layers but {} layer weights",
                self.mrf_layers.len(),
                self.mrf_layer_weights.len()
            )));
        }
        if self.mrf_layer_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("MRF layer weights must be >= 0"));
        }
        if self.augmentation.scales.is_empty()
            || self.augmentation.scales.iter().any(|s| !(*s > 0.0))
        {
            return Err(Error::config(
                "augmentation scales must be non-empty and positive",
            ));
        }
        Ok(())
    }

    pub fn validate_layers(&self, net: &NetworkDef) -> Result<()> {
        for layer in self.mrf_layers.iter().chain([&self.content_layer]) {
            if !net.has_tap(layer) {
                return Err(Error::config(format!("unknown layer '{layer}'")));
            }
        }
        Ok(())
    }
}

/// One evaluation of the energy.
#[derive(Clone, Debug)]
pub struct EnergyReport {
    pub total: f64,
    /// Unweighted style energy per MRF layer.
    pub style: Vec<f64>,
    /// Unweighted content energy.
    pub content: f64,
    /// Unweighted smoothness energy.
    pub tv: f64,
    pub grad: Tensor,
    /// Nearest-neighbour assignments used for each MRF layer.
    pub assignments: Vec<Vec<usize>>,
}

impl EnergyReport {
    /// Sum of the layer-weighted style energies.
    pub fn weighted_style(&self, config: &EnergyConfig) -> f64 {
        self.style
            .iter()
            .zip(&config.mrf_layer_weights)
            .map(|(e, &w)| w as f64 * e)
            .sum()
    }
}

/// `‖act − target‖²` and its gradient `2(act − target)`.
pub fn content_energy_and_grad(act: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if !act.same_shape(target) {
        return Err(Error::config(format!(
            "content activation {:?} and target {:?} differ in shape",
            act.shape(),
            target.shape()
        )));
    }
    let mut energy = 0.0f64;
    let grad = act
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &t)| {
            let d = a - t;
            energy += (d as f64) * (d as f64);
            2.0 * d
        })
        .collect();
    Ok((energy, act.with_data(grad)))
}

/// Squared forward differences summed over channels, rows and columns.
/// Differences that would leave the image are omitted.
pub fn tv_energy_and_grad(image: &Tensor) -> (f64, Tensor) {
    let (c, h, w) = image.shape();
    let mut grad = Tensor::zeros(c, h, w);
    let mut energy = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = image.get(ch, y, x);
                if x + 1 < w {
                    let d = image.get(ch, y, x + 1) - v;
                    energy += (d as f64) * (d as f64);
                    let g = grad.data_mut();
                    let i = (ch * h + y) * w + x;
                    g[i + 1] += 2.0 * d;
                    g[i] -= 2.0 * d;
                }
                if y + 1 < h {
                    let d = image.get(ch, y + 1, x) - v;
                    energy += (d as f64) * (d as f64);
                    let g = grad.data_mut();
                    let i = (ch * h + y) * w + x;
                    g[i + w] += 2.0 * d;
                    g[i] -= 2.0 * d;
                }
            }
        }
    }
    (energy, grad)
}

/// How the E-step is handled during an evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Assignments<'a> {
    /// Re-match every query patch against the style bank.
    Rematch,
    /// Reuse given assignments, one list per MRF layer.
    Frozen(&'a [Vec<usize>]),
}

/// Everything fixed for one pyramid level: the network, style banks and
/// content target.
pub struct Objective<'a> {
    net: &'a NetworkDef,
    config: &'a EnergyConfig,
    banks: Vec<PatchBank>,
    content_target: Option<Tensor>,
    taps: Vec<String>,
}

impl<'a> Objective<'a> {
    /// Builds style banks from `style` and, when `alpha_content > 0`, the
    /// content target from `content`. The content image must already have
    /// the synthesis resolution.
    pub fn new(
        net: &'a NetworkDef,
        config: &'a EnergyConfig,
        style: Option<&Tensor>,
        content: Option<&Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        config.validate_layers(net)?;
        let banks = match style {
            Some(style) if !config.mrf_layers.is_empty() => mrf::build_style_banks(
                net,
                style,
                &config.mrf_layers,
                config.patch_size,
                config.stride,
                &config.augmentation,
            )?,
            Some(_) => Vec::new(),
            None if config.mrf_layers.is_empty() => Vec::new(),
            None => return Err(Error::config("MRF layers configured but no style image")),
        };
        let content_target = if config.alpha_content > 0.0 {
            let content = content
                .ok_or_else(|| Error::config("alpha_content > 0 requires a content image"))?;
            let acts = vgg::forward_tapped(net, content, &[&config.content_layer])?;
            Some(
                acts.get(net, &config.content_layer)
                    .expect("tapped")
                    .clone(),
            )
        } else {
            None
        };
        Ok(Self::from_parts(net, config, banks, content_target))
    }

    /// Assembles an objective from prebuilt banks (one per MRF layer) and
    /// content target.
    pub fn from_parts(
        net: &'a NetworkDef,
        config: &'a EnergyConfig,
        banks: Vec<PatchBank>,
        content_target: Option<Tensor>,
    ) -> Self {
        let mut taps: Vec<String> = config.mrf_layers.clone();
        if content_target.is_some() && !taps.contains(&config.content_layer) {
            taps.push(config.content_layer.clone());
        }
        Objective {
            net,
            config,
            banks,
            content_target,
            taps,
        }
    }

    pub fn banks(&self) -> &[PatchBank] {
        &self.banks
    }

    pub fn config(&self) -> &EnergyConfig {
        self.config
    }

    pub fn content_target(&self) -> Option<&Tensor> {
        self.content_target.as_ref()
    }

    pub fn evaluate(&self, image: &Tensor) -> Result<EnergyReport> {
        self.evaluate_with(image, Assignments::Rematch)
    }

    pub fn evaluate_with(
        &self,
        image: &Tensor,
        assignments: Assignments<'_>,
    ) -> Result<EnergyReport> {
        let cfg = self.config;
        let acts = vgg::forward_tapped(self.net, image, &self.taps)?;
        let mut tap_grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut add_grad = |name: &str, g: Tensor, w: f32| {
            let entry = tap_grads.entry(name.to_owned());
            match entry {
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    e.get_mut().add_scaled(&g, w)
                }
                std::collections::btree_map::Entry::Vacant(e) => {
                    let mut g = g;
                    if w != 1.0 {
                        g.scale(w);
                    }
                    e.insert(g);
                }
            }
        };

        let mut style = Vec::with_capacity(self.banks.len());
        let mut used = Vec::with_capacity(self.banks.len());
        for (i, bank) in self.banks.iter().enumerate() {
            let layer = &cfg.mrf_layers[i];
            let feature = acts.get(self.net, layer).expect("tapped");
            let assign = match assignments {
                Assignments::Rematch => {
                    let query = mrf::extract_patches(feature, bank.k(), bank.stride())?;
                    mrf::match_patches(&query, bank)?
                }
                Assignments::Frozen(all) => all
                    .get(i)
                    .ok_or_else(|| {
                        Error::config(format!("no frozen assignments for layer {layer}"))
                    })?
                    .clone(),
            };
            let (mut e, mut g) = mrf::style_energy_and_grad(feature, bank, &assign)?;
            if cfg.normalize {
                let n = (assign.len() * bank.patch_len()).max(1) as f64;
                e /= n;
                g.scale((1.0 / n) as f32);
            }
            add_grad(layer, g, cfg.mrf_layer_weights[i]);
            style.push(e);
            used.push(assign);
        }

        let mut content = 0.0;
        if let Some(target) = &self.content_target {
            let act = acts.get(self.net, &cfg.content_layer).expect("tapped");
            let (mut e, mut g) = content_energy_and_grad(act, target)?;
            if cfg.normalize {
                let n = act.len().max(1) as f64;
                e /= n;
                g.scale((1.0 / n) as f32);
            }
            content = e;
            add_grad(&cfg.content_layer, g, cfg.alpha_content);
        }

        let mut grad = vgg::backward_multi_tap(self.net, &acts, &tap_grads)?;
        let (mut tv, mut tv_grad) = tv_energy_and_grad(image);
        if cfg.normalize {
            let n = image.len().max(1) as f64;
            tv /= n;
            tv_grad.scale((1.0 / n) as f32);
        }
        grad.add_scaled(&tv_grad, cfg.alpha_tv);

        let mut report = EnergyReport {
            total: 0.0,
            style,
            content,
            tv,
            grad,
            assignments: used,
        };
        report.total = report.weighted_style(cfg)
            + cfg.alpha_content as f64 * report.content
            + cfg.alpha_tv as f64 * report.tv;
        Ok(report)
    }
}
