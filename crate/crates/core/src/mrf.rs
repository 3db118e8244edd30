//! Neural-patch MRF prior.
//!
//! Style feature maps are cut into dense `k×k×C` patches. Every patch of
//! the synthesized feature map is paired with the style patch of highest
//! normalized cross-correlation, and the style energy is the summed squared
//! distance of those pairs. Matching is a convolution: style patches act as
//! filters over the unrolled query windows, and each response is divided by
//! the filter magnitude, which is computed once when the bank is built.

use std::f32::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::{self, Tensor};
use crate::vgg::{self, NetworkDef};

/// Where a patch was cut from: augmented copy, then the top-left feature
/// cell of the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub copy: usize,
    pub y: usize,
    pub x: usize,
}

/// Flattened `k×k×C` patches with their magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBank {
    k: usize,
    channels: usize,
    stride: usize,
    layer: String,
    /// `len × patch_len`, each row laid out `(channel, dy, dx)`.
    patches: Vec<f32>,
    norms: Vec<f32>,
    provenance: Vec<PatchOrigin>,
    /// Window grid of the map the bank was extracted from (last copy).
    grid: (usize, usize),
}

impl PatchBank {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.patches[i * n..(i + 1) * n]
    }

    pub fn patches(&self) -> &[f32] {
        &self.patches
    }

    pub fn norms(&self) -> &[f32] {
        &self.norms
    }

    pub fn provenance(&self) -> &[PatchOrigin] {
        &self.provenance
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }

    /// Appends another bank's patches, tagging them with `copy`.
    fn extend(&mut self, other: PatchBank, copy: usize) {
        debug_assert_eq!((self.k, self.channels), (other.k, other.channels));
        self.patches.extend(other.patches);
        self.norms.extend(other.norms);
        self.provenance.extend(
            other
                .provenance
                .into_iter()
                .map(|o| PatchOrigin { copy, ..o }),
        );
        self.grid = other.grid;
    }
}

fn norm(v: &[f32]) -> f32 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Every valid `k×k` window (no padding) of `feature`, row-major scan order.
pub fn extract_patches(feature: &Tensor, k: usize, stride: usize) -> Result<PatchBank> {
    let (c, h, w) = feature.shape();
    if k == 0 || stride == 0 {
        return Err(Error::config("patch size and stride must be at least 1"));
    }
    if k > h || k > w {
        return Err(Error::config(format!(
            "{k}x{k} patches do not fit a {h}x{w} feature map"
        )));
    }
    let unfolded = tensor::unfold(feature, k, stride, 0)?;
    let norms = unfolded
        .rows
        .par_chunks(unfolded.row_len)
        .map(norm)
        .collect();
    let provenance = (0..unfolded.out_h)
        .flat_map(|gy| {
            (0..unfolded.out_w).map(move |gx| PatchOrigin {
                copy: 0,
                y: gy * stride,
                x: gx * stride,
            })
        })
        .collect();
    Ok(PatchBank {
        k,
        channels: c,
        stride,
        layer: String::new(),
        patches: unfolded.rows,
        norms,
        provenance,
        grid: (unfolded.out_h, unfolded.out_w),
    })
}

/// Scaled and rotated copies of the style image the bank is sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSet {
    pub scales: Vec<f32>,
    /// Radians.
    pub rotations: Vec<f32>,
    pub enabled_rotations: bool,
}

impl Default for AugmentationSet {
    fn default() -> Self {
        AugmentationSet {
            scales: vec![0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15],
            rotations: vec![-PI / 12.0, -PI / 24.0, 0.0, PI / 24.0, PI / 12.0],
            enabled_rotations: false,
        }
    }
}

impl AugmentationSet {
    /// The style image as-is.
    pub fn identity() -> Self {
        AugmentationSet {
            scales: vec![1.0],
            rotations: vec![0.0],
            enabled_rotations: false,
        }
    }

    /// `(scale, angle)` for every copy, scale-major.
    pub fn copies(&self) -> Vec<(f32, f32)> {
        let angles: &[f32] = if self.enabled_rotations {
            &self.rotations
        } else {
            &[0.0]
        };
        self.scales
            .iter()
            .flat_map(|&s| angles.iter().map(move |&a| (s, a)))
            .collect()
    }
}

fn augmented_copy(style: &Tensor, scale: f32, angle: f32) -> Result<Tensor> {
    let (_, h, w) = style.shape();
    let sh = ((h as f32 * scale).round() as usize).max(1);
    let sw = ((w as f32 * scale).round() as usize).max(1);
    let scaled = tensor::bilinear_resize(style, sh, sw)?;
    Ok(tensor::rotate(&scaled, angle))
}

/// Number of augmented copies of an `h×w` style image whose feature maps
/// hold at least one `k×k` patch at every layer.
pub fn usable_copies<S: AsRef<str>>(
    net: &NetworkDef,
    (h, w): (usize, usize),
    layers: &[S],
    k: usize,
    aug: &AugmentationSet,
) -> Result<usize> {
    let mut n = 0;
    for (scale, _) in aug.copies() {
        let sh = ((h as f32 * scale).round() as usize).max(1);
        let sw = ((w as f32 * scale).round() as usize).max(1);
        let mut fits = true;
        for l in layers {
            let (fh, fw) = net.tap_dims(l.as_ref(), sh, sw)?;
            fits &= fh >= k && fw >= k;
        }
        n += fits as usize;
    }
    Ok(n)
}

/// Banks for several layers at once, sharing one forward pass per copy.
/// Copies whose feature maps are smaller than `k` are skipped.
pub fn build_style_banks<S: AsRef<str>>(
    net: &NetworkDef,
    style_image: &Tensor,
    layers: &[S],
    k: usize,
    stride: usize,
    aug: &AugmentationSet,
) -> Result<Vec<PatchBank>> {
    let mut banks: Vec<Option<PatchBank>> = vec![None; layers.len()];
    for (copy, (scale, angle)) in aug.copies().into_iter().enumerate() {
        let image = augmented_copy(style_image, scale, angle)?;
        let too_small = layers.iter().try_fold(false, |small, l| {
            let (fh, fw) = net.tap_dims(l.as_ref(), image.height(), image.width())?;
            Ok::<_, Error>(small || fh < k || fw < k)
        })?;
        if too_small {
            log::warn!(
                "style copy {copy} (scale {scale}, angle {angle:.4}) is {}x{}, too small for {k}x{k} patches; skipped",
                image.height(),
                image.width()
            );
            continue;
        }
        let acts = vgg::forward_tapped(net, &image, layers)?;
        for (slot, layer) in banks.iter_mut().zip(layers) {
            let feature = acts.get(net, layer.as_ref()).expect("tapped");
            let bank = extract_patches(feature, k, stride)?;
            match slot {
                Some(b) => b.extend(bank, copy),
                None => {
                    let mut b = bank.with_layer(layer.as_ref());
                    b.provenance.iter_mut().for_each(|o| o.copy = copy);
                    *slot = Some(b);
                }
            }
        }
    }
    banks
        .into_iter()
        .map(|b| {
            b.ok_or_else(|| {
                Error::config(format!(
                    "every augmented copy of the {}x{} style image is too small for {k}x{k} patches",
                    style_image.height(),
                    style_image.width()
                ))
            })
        })
        .collect()
}

pub fn build_style_bank(
    net: &NetworkDef,
    style_image: &Tensor,
    layer: &str,
    k: usize,
    stride: usize,
    aug: &AugmentationSet,
) -> Result<PatchBank> {
    Ok(
        build_style_banks(net, style_image, &[layer], k, stride, aug)?
            .pop()
            .expect("one layer"),
    )
}

/// Best style patch for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index: usize,
    /// Normalized cross-correlation in `[-1, 1]`; 0 for zero-norm patches.
    pub ncc: f32,
}

const QUERY_BLOCK: usize = 32;

/// Exact NCC in f64. Zero-norm patches score 0.
fn ncc64(q: &[f32], s: &[f32]) -> (f64, f64) {
    let mut dot = 0.0f64;
    let mut qq = 0.0f64;
    let mut ss = 0.0f64;
    for (&a, &b) in q.iter().zip(s) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        qq += a * a;
        ss += b * b;
    }
    let denom = qq.sqrt() * ss.sqrt();
    let ncc = if denom > 0.0 { dot / denom } else { 0.0 };
    (ncc, dot)
}

fn check_compatible(query: &PatchBank, style: &PatchBank) -> Result<()> {
    if style.is_empty() {
        return Err(Error::config("style patch bank is empty"));
    }
    if (query.k, query.channels) != (style.k, style.channels) {
        return Err(Error::config(format!(
            "query patches are {}x{}x{}, style patches {}x{}x{}",
            query.k, query.k, query.channels, style.k, style.k, style.channels
        )));
    }
    Ok(())
}

/// Nearest style patch by normalized cross-correlation for every query.
///
/// Responses come from the shared f32 inner-product kernel with each column
/// divided by the precomputed style magnitude; the query magnitude is a
/// per-row constant and does not affect the argmax. Candidates within f32
/// rounding distance of the best response are re-scored in f64 so the
/// result is the exact argmax. Ties go to the lowest style index. An
/// all-zero query has no defined NCC and falls back to the raw inner
/// product, which is zero everywhere and so selects index 0.
pub fn match_patches_scored(query: &PatchBank, style: &PatchBank) -> Result<Vec<Match>> {
    check_compatible(query, style)?;
    let n = style.len();
    let len = style.patch_len();
    let inv_norms: Vec<f32> = style
        .norms
        .iter()
        .map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    // Worst-case f32 error of a response relative to |q|.
    let slack = 4.0 * (len as f32 + 2.0) * f32::EPSILON;

    let mut out = vec![Match { index: 0, ncc: 0.0 }; query.len()];
    out.par_chunks_mut(QUERY_BLOCK)
        .enumerate()
        .for_each(|(block, matches)| {
            let mut scores = vec![0.0f32; n];
            let mut candidates = Vec::new();
            for (j, m) in matches.iter_mut().enumerate() {
                let qi = block * QUERY_BLOCK + j;
                let q = query.patch(qi);
                let q_norm = query.norms[qi];
                if q_norm == 0.0 {
                    *m = Match { index: 0, ncc: 0.0 };
                    continue;
                }
                gemm::dot_rows(q, &style.patches, len, &mut scores);
                let mut best = f32::NEG_INFINITY;
                for (s, &inv) in scores.iter_mut().zip(&inv_norms) {
                    *s *= inv;
                    best = best.max(*s);
                }
                let window = slack * q_norm;
                candidates.clear();
                candidates.extend((0..n).filter(|&i| scores[i] >= best - window));
                let mut pick = (candidates[0], f64::NEG_INFINITY);
                for &i in &candidates {
                    let (ncc, _) = ncc64(q, style.patch(i));
                    if ncc > pick.1 {
                        pick = (i, ncc);
                    }
                }
                *m = Match {
                    index: pick.0,
                    ncc: pick.1 as f32,
                };
            }
        });
    Ok(out)
}

/// Style index assigned to every query patch.
pub fn match_patches(query: &PatchBank, style: &PatchBank) -> Result<Vec<usize>> {
    Ok(match_patches_scored(query, style)?
        .into_iter()
        .map(|m| m.index)
        .collect())
}

/// Nearest-neighbour reconstruction of a feature map: every cell is the
/// mean of the matched style values of the patches covering it. Cells no
/// patch covers keep their current value.
pub fn mrf_reconstruction(
    query_features: &Tensor,
    style: &PatchBank,
    assignments: &[usize],
) -> Result<Tensor> {
    let query = extract_patches(query_features, style.k, style.stride)?;
    check_assignments(&query, style, assignments)?;
    let len = style.patch_len();
    let mut matched = Vec::with_capacity(query.len() * len);
    for &a in assignments {
        matched.extend_from_slice(style.patch(a));
    }
    let sum = tensor::fold(&matched, query_features.shape(), style.k, style.stride, 0)?;
    let counts = tensor::fold(
        &vec![1.0; matched.len()],
        query_features.shape(),
        style.k,
        style.stride,
        0,
    )?;
    let data = sum
        .data()
        .iter()
        .zip(counts.data())
        .zip(query_features.data())
        .map(|((&s, &c), &q)| if c > 0.0 { s / c } else { q })
        .collect();
    Ok(query_features.with_data(data))
}

fn check_assignments(query: &PatchBank, style: &PatchBank, assignments: &[usize]) -> Result<()> {
    check_compatible(query, style)?;
    if assignments.len() != query.len() {
        return Err(Error::config(format!(
            "{} assignments for {} query patches",
            assignments.len(),
            query.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= style.len()) {
        return Err(Error::config(format!(
            "assignment {bad} out of range for a bank of {}",
            style.len()
        )));
    }
    Ok(())
}

/// Summed squared distance between each query patch and its assigned style
/// patch, and the gradient of that sum w.r.t. the query feature map.
pub fn style_energy_and_grad(
    query_features: &Tensor,
    style: &PatchBank,
    assignments: &[usize],
) -> Result<(f64, Tensor)> {
    let query = extract_patches(query_features, style.k, style.stride)?;
    check_assignments(&query, style, assignments)?;
    let len = style.patch_len();
    let mut diff = query.patches;
    let energy: f64 = diff
        .par_chunks_mut(len)
        .zip(assignments.par_iter())
        .map(|(row, &a)| {
            let mut e = 0.0f64;
            for (d, &s) in row.iter_mut().zip(style.patch(a)) {
                let v = *d - s;
                e += (v as f64) * (v as f64);
                *d = 2.0 * v;
            }
            e
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    let grad = tensor::fold(&diff, query_features.shape(), style.k, style.stride, 0)?;
    Ok((energy, grad))
}
