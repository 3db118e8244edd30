//! Independent f64 reference implementations and finite-difference helpers.
//!
//! Nothing here calls into the library's arithmetic: convolutions are naive
//! nested loops, matching is a double loop, energies are written out from
//! their definitions. Only weights, patch values and layer order are read
//! from library types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use neural_mrf::mrf::PatchBank;
use neural_mrf::tensor::{ConvSpec, Tensor};
use neural_mrf::vgg::{LayerOp, NetworkDef, INPUT_TAP, VGG_MEAN_BGR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense f64 map, channel-major.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map {
            c,
            h,
            w,
            v: vec![0.0; c * h * w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[(c * self.h + y) * self.w + x]
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = t.shape();
        Map {
            c,
            h,
            w,
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn from_flat(shape: (usize, usize, usize), v: &[f64]) -> Self {
        Map {
            c: shape.0,
            h: shape.1,
            w: shape.2,
            v: v.to_vec(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| r.random_range(lo..hi))
}

pub fn random_spec(r: &mut impl Rng, inp: usize, out: usize, bias: bool) -> ConvSpec {
    let w = (0..out * inp * 9)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    let b = (0..out)
        .map(|_| {
            if bias {
                r.random_range(-1.0f32..1.0)
            } else {
                0.0
            }
        })
        .collect();
    ConvSpec::new(inp, out, w, b).unwrap()
}

/// Smooth random RGB image in [0, 255]: a few random sinusoids per channel.
pub fn textured_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut r = rng(seed);
    let waves: Vec<[f32; 5]> = (0..3 * 6)
        .map(|_| {
            [
                r.random_range(0.05f32..0.6),
                r.random_range(0.05f32..0.6),
                r.random_range(0.0f32..std::f32::consts::TAU),
                r.random_range(10.0f32..40.0),
                if r.random_bool(0.5) { 1.0 } else { -1.0 },
            ]
        })
        .collect();
    Tensor::from_fn(3, h, w, |c, y, x| {
        let mut v = 127.5f32;
        for wv in &waves[c * 6..(c + 1) * 6] {
            v += wv[3] * (wv[0] * y as f32 * wv[4] + wv[1] * x as f32 + wv[2]).sin();
        }
        v.clamp(0.0, 255.0)
    })
}

// ---------- layers ----------

pub fn conv(input: &Map, spec: &ConvSpec) -> Map {
    let (inp, out) = (spec.in_channels(), spec.out_channels());
    assert_eq!(input.c, inp);
    let wts = spec.weights();
    let mut o = Map::zeros(out, input.h, input.w);
    for oc in 0..out {
        for y in 0..input.h {
            for x in 0..input.w {
                let mut s = spec.bias()[oc] as f64;
                for ic in 0..inp {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            let xx = x as isize + kx as isize - 1;
                            if yy < 0 || xx < 0 || yy >= input.h as isize || xx >= input.w as isize
                            {
                                continue;
                            }
                            s += wts[((oc * inp + ic) * 3 + ky) * 3 + kx] as f64
                                * input.at(ic, yy as usize, xx as usize);
                        }
                    }
                }
                *o.at_mut(oc, y, x) = s;
            }
        }
    }
    o
}

pub fn relu(input: &Map) -> Map {
    Map {
        v: input.v.iter().map(|&x| x.max(0.0)).collect(),
        ..input.clone()
    }
}

pub fn pool(input: &Map) -> Map {
    let (oh, ow) = (input.h.div_ceil(2), input.w.div_ceil(2));
    let mut o = Map::zeros(input.c, oh, ow);
    for c in 0..input.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let yy = (2 * y + dy).min(input.h - 1);
                        let xx = (2 * x + dx).min(input.w - 1);
                        m = m.max(input.at(c, yy, xx));
                    }
                }
                *o.at_mut(c, y, x) = m;
            }
        }
    }
    o
}

/// RGB pixels → BGR with the VGG means removed.
pub fn preprocess(image: &Map) -> Map {
    let mut o = Map::zeros(3, image.h, image.w);
    for (c, &mean) in VGG_MEAN_BGR.iter().enumerate() {
        for y in 0..image.h {
            for x in 0..image.w {
                *o.at_mut(c, y, x) = image.at(2 - c, y, x) - mean as f64;
            }
        }
    }
    o
}

/// Activations at `taps` by walking the layer list with the naive layers.
pub fn forward(net: &NetworkDef, image: &Map, taps: &[&str]) -> BTreeMap<String, Map> {
    let mut out = BTreeMap::new();
    let mut cur = preprocess(image);
    if taps.contains(&INPUT_TAP) {
        out.insert(INPUT_TAP.to_string(), cur.clone());
    }
    for layer in net.layers() {
        if out.len() == taps.len() {
            break;
        }
        cur = match &layer.op {
            LayerOp::Conv(spec) => conv(&cur, spec),
            LayerOp::Relu => relu(&cur),
            LayerOp::Pool => pool(&cur),
        };
        if taps.contains(&layer.name.as_str()) {
            out.insert(layer.name.clone(), cur.clone());
        }
    }
    out
}

// ---------- energies ----------

/// Σ_i ‖patch_i(feature) − style[assign[i]]‖² with patches enumerated by
/// stride in row-major order, layout (channel, dy, dx).
pub fn style_energy(feature: &Map, bank: &PatchBank, assign: &[usize]) -> f64 {
    let (k, stride) = (bank.k(), bank.stride());
    let gh = (feature.h - k) / stride + 1;
    let gw = (feature.w - k) / stride + 1;
    assert_eq!(assign.len(), gh * gw);
    let mut e = 0.0;
    for gy in 0..gh {
        for gx in 0..gw {
            let s = bank.patch(assign[gy * gw + gx]);
            let mut i = 0;
            for c in 0..feature.c {
                for dy in 0..k {
                    for dx in 0..k {
                        let d = feature.at(c, gy * stride + dy, gx * stride + dx) - s[i] as f64;
                        e += d * d;
                        i += 1;
                    }
                }
            }
        }
    }
    e
}

pub fn sq_dist(a: &Map, b: &Map) -> f64 {
    a.v.iter().zip(&b.v).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn tv(image: &Map) -> f64 {
    let mut e = 0.0;
    for c in 0..image.c {
        for y in 0..image.h {
            for x in 0..image.w {
                if x + 1 < image.w {
                    let d = image.at(c, y, x + 1) - image.at(c, y, x);
                    e += d * d;
                }
                if y + 1 < image.h {
                    let d = image.at(c, y + 1, x) - image.at(c, y, x);
                    e += d * d;
                }
            }
        }
    }
    e
}

// ---------- matching ----------

/// Double-loop NCC argmax, lowest index on ties; an all-zero query takes
/// the raw inner product argmax instead.
pub fn brute_force_match(query: &PatchBank, style: &PatchBank) -> Vec<usize> {
    (0..query.len())
        .map(|i| {
            let q = query.patch(i);
            let qn: f64 = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let mut best = (0usize, f64::NEG_INFINITY);
            for j in 0..style.len() {
                let s = style.patch(j);
                let dot: f64 = q.iter().zip(s).map(|(&a, &b)| a as f64 * b as f64).sum();
                let sn: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let score = if qn == 0.0 {
                    dot
                } else if sn == 0.0 {
                    0.0
                } else {
                    dot / (qn * sn)
                };
                if score > best.1 {
                    best = (j, score);
                }
            }
            best.0
        })
        .collect()
}

// ---------- finite differences ----------

/// Central differences of `f` at every coordinate in `coords`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn pick(values: &[f64], coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&i| values[i]).collect()
}

pub fn all_coords(n: usize) -> Vec<usize> {
    (0..n).collect()
}
