//! Learned medium parameters per ray and depth-aware opacity adjustment.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projective::CameraView;
use crate::scene::{logit, sigmoid};

pub const MEDIUM_FORMAT_VERSION: u32 = 1;

#[inline]
/// `ln(e^y − 1)`, the inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
}

/// Fully connected network with ReLU hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input of every layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform fan-in initialization; the output layer starts at zero.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "network needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (n_in as f64).sqrt();
                let weights = if l + 1 == n {
                    vec![0.0; n_in * n_out]
                } else {
                    (0..n_in * n_out).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Layer {
                    n_in,
                    n_out,
                    weights,
                    bias: vec![0.0; n_out],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut o = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[o..o + nw]);
            o += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[o..o + nb]);
            o += nb;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = affine(l, &h);
            if i != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        h
    }

    pub fn forward_tape(&self, x: &[f64]) -> (Vec<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = affine(l, &h);
            inputs.push(h);
            h = if i != last { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        (h, MlpTape { inputs, pre })
    }

    /// Accumulates parameter gradients into `grad` (flat layout of
    /// [`Mlp::params`]) and returns the gradient w.r.t. the input.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |o, l| {
                let start = *o;
                *o += l.param_count();
                Some(start)
            })
            .collect();
        let last = self.layers.len() - 1;
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i != last {
                for (dv, z) in d.iter_mut().zip(&tape.pre[i]) {
                    if *z <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let x = &tape.inputs[i];
            let g = &mut grad[offsets[i]..offsets[i] + l.param_count()];
            let (gw, gb) = g.split_at_mut(l.weights.len());
            let mut dx = vec![0.0; l.n_in];
            for o in 0..l.n_out {
                let dz = d[o];
                if dz == 0.0 {
                    continue;
                }
                gb[o] += dz;
                let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                let grow = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                for k in 0..l.n_in {
                    grow[k] += dz * x[k];
                    dx[k] += dz * row[k];
                }
            }
            d = dx;
        }
        d
    }
}

#[inline]
fn affine(l: &Layer, x: &[f64]) -> Vec<f64> {
    (0..l.n_out)
        .map(|o| {
            let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
            l.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// `[v, sin(2^k π v), cos(2^k π v) for k < freqs]`, length `3 + 6·freqs`.
pub fn encode_direction(v: &Vector3<f64>, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * freqs);
    out.extend_from_slice(v.as_slice());
    for k in 0..freqs {
        let s = (1u64 << k) as f64 * std::f64::consts::PI;
        for i in 0..3 {
            out.push((s * v[i]).sin());
        }
        for i in 0..3 {
            out.push((s * v[i]).cos());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub direction_freqs: usize,
}

impl Default for MediumConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            hidden_layers: 2,
            direction_freqs: 4,
        }
    }
}

/// Medium parameters along one ray.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MediumSample {
    pub sigma_attn: [f64; 3],
    pub sigma_bs: [f64; 3],
    pub c_med: [f64; 3],
}

impl MediumSample {
    pub fn is_finite(&self) -> bool {
        self.sigma_attn
            .iter()
            .chain(&self.sigma_bs)
            .chain(&self.c_med)
            .all(|v| v.is_finite())
    }
}

/// The ray medium network and the opacity adjustment network.
#[derive(Clone, Debug, PartialEq)]
pub struct MediumField {
    pub phi_med: Mlp,
    pub phi_alpha: Mlp,
    pub direction_freqs: usize,
    pub scene_extent: f64,
}

impl MediumField {
    pub fn new(config: &MediumConfig, scene_extent: f64, seed: u64) -> Result<Self> {
        if !(scene_extent > 0.0 && scene_extent.is_finite()) {
            return Err(Error::InvalidArgument(format!("scene extent must be positive, got {scene_extent}")));
        }
        if config.hidden_width == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = vec![config.hidden_width; config.hidden_layers];
        let sizes = |n_in: usize, n_out: usize| {
            let mut s = vec![n_in];
            s.extend_from_slice(&hidden);
            s.push(n_out);
            s
        };
        let phi_med = Mlp::new(&sizes(3 + 6 * config.direction_freqs, 9), &mut rng);
        let phi_alpha = Mlp::new(&sizes(5, 1), &mut rng);
        Ok(Self {
            phi_med,
            phi_alpha,
            direction_freqs: config.direction_freqs,
            scene_extent,
        })
    }

    pub fn param_count(&self) -> usize {
        self.phi_med.param_count() + self.phi_alpha.param_count()
    }

    /// Sets the medium network's output biases so that, while its last layer
    /// weights are zero, every ray evaluates to `sample`.
    pub fn set_output_bias(&mut self, sample: &MediumSample) -> Result<()> {
        if sample.sigma_attn.iter().chain(&sample.sigma_bs).any(|&v| !(v > 0.0 && v.is_finite()))
            || sample.c_med.iter().any(|&c| !(c > 0.0 && c < 1.0))
        {
            return Err(Error::InvalidArgument(format!("medium outside the network's range: {sample:?}")));
        }
        let last = self.phi_med.layers.last_mut().expect("network has layers");
        for c in 0..3 {
            last.bias[c] = inverse_softplus(sample.sigma_attn[c]);
            last.bias[3 + c] = inverse_softplus(sample.sigma_bs[c]);
            last.bias[6 + c] = logit(sample.c_med[c]);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.phi_med.params().iter().chain(&self.phi_alpha.params()).all(|v| v.is_finite())
    }
}

fn unit_direction(dir: &Vector3<f64>) -> Vector3<f64> {
    let n = dir.norm();
    if (n - 1.0).abs() > 1e-6 {
        log::warn!("medium direction has norm {n}, normalizing");
        return dir / n;
    }
    *dir
}

fn decode_medium(raw: &[f64]) -> MediumSample {
    let mut s = MediumSample::default();
    for c in 0..3 {
        s.sigma_attn[c] = softplus(raw[c]);
        s.sigma_bs[c] = softplus(raw[3 + c]);
        s.c_med[c] = open_unit(sigmoid(raw[6 + c]));
    }
    s
}

/// Keeps saturated logistic outputs strictly inside (0, 1).
#[inline]
fn open_unit(p: f64) -> f64 {
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn medium_eval(field: &MediumField, ray_dir: &Vector3<f64>) -> MediumSample {
    let v = unit_direction(ray_dir);
    decode_medium(&field.phi_med.forward(&encode_direction(&v, field.direction_freqs)))
}

/// Accumulates the φ_med parameter gradient for upstream gradients `d`
/// on the outputs at `ray_dir`.
pub fn medium_eval_backward(field: &MediumField, ray_dir: &Vector3<f64>, d: &MediumSample, grad: &mut [f64]) {
    let v = unit_direction(ray_dir);
    let (raw, tape) = field.phi_med.forward_tape(&encode_direction(&v, field.direction_freqs));
    let mut d_raw = [0.0; 9];
    for c in 0..3 {
        d_raw[c] = d.sigma_attn[c] * sigmoid(raw[c]);
        d_raw[3 + c] = d.sigma_bs[c] * sigmoid(raw[3 + c]);
        let s = sigmoid(raw[6 + c]);
        d_raw[6 + c] = d.c_med[c] * s * (1.0 - s);
    }
    field.phi_med.backward(&tape, &d_raw, grad);
}

/// Medium parameters for every pixel ray of a camera.
#[derive(Clone, Debug, PartialEq)]
pub struct MediumMap {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<MediumSample>,
}

impl MediumMap {
    pub fn constant(width: usize, height: usize, sample: MediumSample) -> Self {
        Self {
            width,
            height,
            samples: vec![sample; width * height],
        }
    }

    pub fn from_field(field: &MediumField, cam: &CameraView) -> Result<Self> {
        let (w, h) = (cam.width, cam.height);
        let samples: Vec<MediumSample> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| (0..w).map(move |x| medium_eval(field, &cam.ray_direction(x as f64, y as f64))))
            .collect();
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("medium output at pixel ({}, {})", i % w, i / w)));
        }
        Ok(Self {
            width: w,
            height: h,
            samples,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &MediumSample {
        &self.samples[y * self.width + x]
    }
}

/// φ_med parameter gradient from per-pixel gradients on a [`MediumMap`].
/// Rows are reduced in order so the result is independent of thread count.
pub fn medium_map_backward(field: &MediumField, cam: &CameraView, grads: &[MediumSample]) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let n = field.phi_med.param_count();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut g = vec![0.0; n];
            for x in 0..w {
                let d = &grads[y * w + x];
                if *d == MediumSample::default() {
                    continue;
                }
                medium_eval_backward(field, &cam.ray_direction(x as f64, y as f64), d, &mut g);
            }
            g
        })
        .collect();
    let mut total = vec![0.0; n];
    for r in rows {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    total
}

/// Blend weight of the depth-aware opacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaAdjustState {
    pub w: f64,
    pub active: bool,
}

impl AlphaAdjustState {
    pub fn new(w: f64) -> Self {
        Self {
            w,
            active: w != 0.0,
        }
    }

    pub fn off() -> Self {
        Self { w: 0.0, active: false }
    }
}

fn alpha_input(field: &MediumField, alpha: f64, z: f64, v: &Vector3<f64>) -> [f64; 5] {
    [alpha, z / field.scene_extent, v.x, v.y, v.z]
}

/// `(1 − w)·α + w·sigmoid(φ_α(α, z/extent, v))`.
pub fn alpha_adjust(field: &MediumField, alpha: f64, z: f64, v: &Vector3<f64>, w: f64) -> f64 {
    if w == 0.0 {
        return alpha;
    }
    let ad = open_unit(sigmoid(field.phi_alpha.forward(&alpha_input(field, alpha, z, v))[0]));
    (1.0 - w) * alpha + w * ad
}

/// Gradients of [`alpha_adjust`] w.r.t. `(α, z, v)`; φ_α parameter
/// gradients are accumulated into `grad`.
pub fn alpha_adjust_backward(
    field: &MediumField,
    alpha: f64,
    z: f64,
    v: &Vector3<f64>,
    w: f64,
    d_out: f64,
    grad: &mut [f64],
) -> (f64, f64, Vector3<f64>) {
    if w == 0.0 {
        return (d_out, 0.0, Vector3::zeros());
    }
    let (raw, tape) = field.phi_alpha.forward_tape(&alpha_input(field, alpha, z, v));
    let s = sigmoid(raw[0]);
    let d_raw = d_out * w * s * (1.0 - s);
    let dx = field.phi_alpha.backward(&tape, &[d_raw], grad);
    (
        (1.0 - w) * d_out + dx[0],
        dx[1] / field.scene_extent,
        Vector3::new(dx[2], dx[3], dx[4]),
    )
}

fn write_mlp<W: Write>(name: &str, m: &Mlp, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "network {name} {}", m.layers.len())?;
    for l in &m.layers {
        writeln!(w, "layer {} {}", l.n_in, l.n_out)?;
        let ws: Vec<String> = l.weights.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", ws.join(" "))?;
        let bs: Vec<String> = l.bias.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", bs.join(" "))?;
    }
    Ok(())
}

/// Versioned text block: header, encoding and extent, then each network's
/// layer shapes followed by row-major weights and biases.
pub fn write_medium<W: Write>(field: &MediumField, mut w: W) -> std::io::Result<()> {
    writeln!(w, "mediasplat-medium {MEDIUM_FORMAT_VERSION}")?;
    writeln!(w, "freqs {}", field.direction_freqs)?;
    writeln!(w, "extent {:?}", field.scene_extent)?;
    write_mlp("phi_med", &field.phi_med, &mut w)?;
    write_mlp("phi_alpha", &field.phi_alpha, &mut w)
}

struct Lines<R> {
    inner: std::iter::Enumerate<std::io::Lines<R>>,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<(usize, String)> {
        match self.inner.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::parse("medium", i + 1, e.to_string())),
            None => Err(Error::parse("medium", 0, "unexpected end of file")),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<String>)> {
        let (n, l) = self.next()?;
        let toks: Vec<String> = l.split_whitespace().map(str::to_string).collect();
        if toks.first().map(String::as_str) != Some(key) {
            return Err(Error::parse("medium", n, format!("expected `{key}`")));
        }
        Ok((n, toks[1..].to_vec()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let (n, l) = self.next()?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("medium", n, e.to_string()))?;
        if v.len() != count {
            return Err(Error::parse("medium", n, format!("expected {count} values, found {}", v.len())));
        }
        Ok(v)
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&String>, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    tok.ok_or_else(|| Error::parse("medium", line, "missing value"))?
        .parse()
        .map_err(|e: T::Err| Error::parse("medium", line, e.to_string()))
}

fn read_mlp<R: BufRead>(name: &str, lines: &mut Lines<R>) -> Result<Mlp> {
    let (n, t) = lines.keyed("network")?;
    if t.first().map(String::as_str) != Some(name) {
        return Err(Error::parse("medium", n, format!("expected network `{name}`")));
    }
    let count: usize = parse_num(t.get(1), n)?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, t) = lines.keyed("layer")?;
        let n_in: usize = parse_num(t.first(), n)?;
        let n_out: usize = parse_num(t.get(1), n)?;
        if let Some(prev) = layers.last() {
            let prev: &Layer = prev;
            if prev.n_out != n_in {
                return Err(Error::parse("medium", n, "layer shapes do not chain"));
            }
        }
        let weights = lines.floats(n_in * n_out)?;
        let bias = lines.floats(n_out)?;
        layers.push(Layer {
            n_in,
            n_out,
            weights,
            bias,
        });
    }
    if layers.is_empty() {
        return Err(Error::parse("medium", n, "network without layers"));
    }
    Ok(Mlp { layers })
}

pub fn read_medium<R: BufRead>(r: R) -> Result<MediumField> {
    let mut lines = Lines {
        inner: r.lines().enumerate(),
    };
    let (n, t) = lines.keyed("mediasplat-medium")?;
    let version: u32 = parse_num(t.first(), n)?;
    if version != MEDIUM_FORMAT_VERSION {
        return Err(Error::parse("medium", n, format!("unsupported version {version}")));
    }
    let (n, t) = lines.keyed("freqs")?;
    let direction_freqs: usize = parse_num(t.first(), n)?;
    let (n, t) = lines.keyed("extent")?;
    let scene_extent: f64 = parse_num(t.first(), n)?;
    let phi_med = read_mlp("phi_med", &mut lines)?;
    let phi_alpha = read_mlp("phi_alpha", &mut lines)?;
    if phi_med.input_size() != 3 + 6 * direction_freqs || phi_med.output_size() != 9 {
        return Err(Error::parse("medium", 0, "phi_med shape does not match the encoding"));
    }
    if phi_alpha.input_size() != 5 || phi_alpha.output_size() != 1 {
        return Err(Error::parse("medium", 0, "phi_alpha must map 5 inputs to 1 output"));
    }
    Ok(MediumField {
        phi_med,
        phi_alpha,
        direction_freqs,
        scene_extent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn randomized(seed: u64, scale: f64) -> MediumField {
        let mut f = MediumField::new(&MediumConfig::default(), 4.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for m in [&mut f.phi_med, &mut f.phi_alpha] {
            let p: Vec<f64> = (0..m.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
            m.set_params(&p);
        }
        f
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_output_layer_defaults() {
        let f = MediumField::new(&MediumConfig::default(), 3.0, 1).unwrap();
        let s = medium_eval(&f, &Vector3::new(0.0, 0.6, 0.8));
        for c in 0..3 {
            assert!((s.sigma_attn[c] - 2f64.ln()).abs() < 1e-15);
            assert!((s.sigma_bs[c] - 2f64.ln()).abs() < 1e-15);
            assert_eq!(s.c_med[c], 0.5);
        }
        assert_eq!(alpha_adjust(&f, 0.3, 2.0, &Vector3::z(), 1.0), 0.5);
        assert_eq!(alpha_adjust(&f, 0.3, 2.0, &Vector3::z(), 0.0), 0.3);
    }

    #[test]
    fn output_bias_sets_initial_medium() {
        let mut f = MediumField::new(&MediumConfig::default(), 3.0, 1).unwrap();
        let want = MediumSample {
            sigma_attn: [0.02, 0.05, 0.1],
            sigma_bs: [0.2, 0.3, 40.0],
            c_med: [0.1, 0.5, 0.9],
        };
        f.set_output_bias(&want).unwrap();
        let got = medium_eval(&f, &Vector3::new(0.6, 0.0, 0.8));
        for c in 0..3 {
            assert!((got.sigma_attn[c] - want.sigma_attn[c]).abs() < 1e-12);
            assert!((got.sigma_bs[c] - want.sigma_bs[c]).abs() < 1e-12);
            assert!((got.c_med[c] - want.c_med[c]).abs() < 1e-12);
        }
        assert!(f.set_output_bias(&MediumSample::default()).is_err());
    }

    #[test]
    fn blend_formula() {
        let f = randomized(3, 0.5);
        let v = Vector3::new(0.0, 0.0, 1.0);
        let ad = sigmoid(f.phi_alpha.forward(&[0.8, 0.5, 0.0, 0.0, 1.0])[0]);
        assert!((alpha_adjust(&f, 0.8, 2.0, &v, 0.5) - (0.4 + 0.5 * ad)).abs() < 1e-15);
    }

    #[test]
    fn encoding_layout() {
        let v = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(encode_direction(&v, 0), vec![0.0, 0.0, 1.0]);
        let e = encode_direction(&v, 1);
        assert_eq!(e.len(), 9);
        assert_eq!(&e[3..5], &[0.0, 0.0]);
        assert!((e[5] - std::f64::consts::PI.sin()).abs() < 1e-15);
        assert_eq!(&e[6..8], &[1.0, 1.0]);
        assert_eq!(e[8], -1.0);
        let a = Vector3::new(0.3, -0.4, (1.0f64 - 0.25).sqrt());
        assert_ne!(encode_direction(&a, 4), encode_direction(&(-a), 4));
    }

    #[test]
    fn determinism() {
        let f = randomized(5, 0.7);
        let v = Vector3::new(0.1, 0.2, 0.9).normalize();
        assert_eq!(medium_eval(&f, &v), medium_eval(&f, &v));
    }

    #[test]
    fn medium_param_gradients_match_fd() {
        let f = randomized(9, 0.6);
        let v = Vector3::new(-0.3, 0.25, 0.9).normalize();
        let upstream = MediumSample {
            sigma_attn: [0.3, -0.7, 1.1],
            sigma_bs: [0.5, 0.2, -0.4],
            c_med: [-1.0, 0.8, 0.6],
        };
        let obj = |f: &MediumField| {
            let s = medium_eval(f, &v);
            (0..3)
                .map(|c| {
                    upstream.sigma_attn[c] * s.sigma_attn[c]
                        + upstream.sigma_bs[c] * s.sigma_bs[c]
                        + upstream.c_med[c] * s.c_med[c]
                })
                .sum::<f64>()
        };
        let mut g = vec![0.0; f.phi_med.param_count()];
        medium_eval_backward(&f, &v, &upstream, &mut g);
        let p0 = f.phi_med.params();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..p0.len() {
            let mut fp = f.clone();
            let mut p = p0.clone();
            p[i] += h;
            fp.phi_med.set_params(&p);
            let up = obj(&fp);
            p[i] -= 2.0 * h;
            fp.phi_med.set_params(&p);
            let dn = obj(&fp);
            let fd = (up - dn) / (2.0 * h);
            if fd.abs() > 1e-9 || g[i].abs() > 1e-9 {
                worst = worst.max(rel_err(fd, g[i]));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn alpha_gradients_match_fd() {
        let f = randomized(11, 0.8);
        let (alpha, z, w) = (0.6, 2.5, 0.5);
        let v = Vector3::new(0.2, -0.1, 0.97).normalize();
        let mut g = vec![0.0; f.phi_alpha.param_count()];
        let (da, dz, dv) = alpha_adjust_backward(&f, alpha, z, &v, w, 1.0, &mut g);
        let h = 1e-6;
        let fd = |e: &dyn Fn(f64) -> f64| (e(h) - e(-h)) / (2.0 * h);
        assert!(rel_err(fd(&|d| alpha_adjust(&f, alpha + d, z, &v, w)), da) < 1e-6);
        assert!(rel_err(fd(&|d| alpha_adjust(&f, alpha, z + d, &v, w)), dz) < 1e-6);
        for k in 0..3 {
            let e = |d: f64| {
                let mut vv = v;
                vv[k] += d;
                alpha_adjust(&f, alpha, z, &vv, w)
            };
            assert!((fd(&e) - dv[k]).abs() < 1e-8);
        }
        let p0 = f.phi_alpha.params();
        for i in 0..p0.len() {
            let e = |d: f64| {
                let mut ff = f.clone();
                let mut p = p0.clone();
                p[i] += d;
                ff.phi_alpha.set_params(&p);
                alpha_adjust(&ff, alpha, z, &v, w)
            };
            let num = fd(&e);
            assert!((num - g[i]).abs() <= 1e-4 * num.abs().max(g[i].abs()).max(1e-8) + 1e-9);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let f = randomized(2, 1.0);
        let mut buf = Vec::new();
        write_medium(&f, &mut buf).unwrap();
        assert_eq!(read_medium(buf.as_slice()).unwrap(), f);
        let text = String::from_utf8(buf).unwrap().replace("layer 27 32", "layer 26 32");
        assert!(read_medium(text.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(seed in 0u64..1000, scale in 0.1f64..20.0,
                                 x in -1.0f64..1.0, y in -1.0f64..1.0, a in 0.001f64..0.999, z in 0.0f64..50.0) {
            let f = randomized(seed, scale);
            let v = Vector3::new(x, y, 0.5).normalize();
            let s = medium_eval(&f, &v);
            for c in 0..3 {
                prop_assert!(s.sigma_attn[c] >= 0.0 && s.sigma_bs[c] >= 0.0);
                prop_assert!(s.c_med[c] > 0.0 && s.c_med[c] < 1.0);
            }
            let out = alpha_adjust(&f, a, z, &v, 1.0);
            prop_assert!(out > 0.0 && out < 1.0);
        }
    }
}
