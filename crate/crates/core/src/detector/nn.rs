//! MiniSSD: a stack of stride-2 3x3 convolutions, some followed by stride-1 refinements, with
//! SiLU activations and one 3x3 head per detection map. Convolutions run as im2col followed by a GEMM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::PriorPredictions;
use super::priors::{generate_priors, PriorBox, PriorConfig};
use super::{DetectorError, Real};
use crate::raster::Raster;

const K: usize = 3;
const BACKGROUND_BIAS: Real = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Output channels of each stride-2 block.
    pub channels: Vec<usize>,
    /// Zero padding of each block.
    pub pads: Vec<usize>,
    /// Extra stride-1 3x3 convolutions closing each block; empty means none.
    pub refine: Vec<usize>,
    /// Blocks whose activations feed a detection head, one per prior map.
    pub head_sources: Vec<usize>,
    pub num_classes: usize,
    pub priors: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 300,
            channels: vec![8, 16, 32, 48, 64, 64, 64],
            pads: vec![1, 1, 0, 0, 1, 1, 1],
            refine: vec![0, 0, 1, 1, 1, 0, 0],
            head_sources: vec![3, 4, 5, 6],
            num_classes: 3,
            priors: PriorConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A shrunken model on 20x20 inputs, small enough for finite differences.
    pub fn reduced() -> Self {
        Self {
            input_size: 20,
            channels: vec![3, 4, 4, 4],
            pads: vec![1, 1, 1, 1],
            refine: vec![0, 1, 0, 0],
            head_sources: vec![1, 2, 3],
            num_classes: 3,
            priors: PriorConfig {
                feature_map_sizes: vec![5, 3, 2],
                scales: vec![0.3, 0.5, 0.7],
                aspect_ratios: vec![vec![1.0, 2.0]; 3],
                clip: true,
            },
        }
    }

    pub fn n_labels(&self) -> usize {
        self.num_classes + 1
    }

    /// Spatial side after each block.
    pub fn block_sizes(&self) -> Result<Vec<usize>, DetectorError> {
        let mut s = self.input_size;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &p) in self.pads.iter().enumerate() {
            if s + 2 * p < K {
                return Err(DetectorError::Config(format!("block {i} input {s} too small for a 3x3 kernel")));
            }
            s = (s + 2 * p - K) / 2 + 1;
            out.push(s);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.priors.validate()?;
        let bad = |m: String| Err(DetectorError::Config(m));
        if self.channels.is_empty() || self.channels.len() != self.pads.len() {
            return bad("channels and pads must be non-empty and aligned".into());
        }
        if !self.refine.is_empty() && self.refine.len() != self.channels.len() {
            return bad("refine must be empty or aligned with channels".into());
        }
        if self.channels.contains(&0) || self.num_classes == 0 || self.input_size == 0 {
            return bad("channel counts, classes and input size must be positive".into());
        }
        if self.head_sources.len() != self.priors.feature_map_sizes.len() {
            return bad("one head per prior map".into());
        }
        let sizes = self.block_sizes()?;
        for (m, &src) in self.head_sources.iter().enumerate() {
            match sizes.get(src) {
                Some(&s) if s == self.priors.feature_map_sizes[m] => {}
                Some(&s) => return bad(format!("head {m} reads a {s}x{s} map, priors expect {}", self.priors.feature_map_sizes[m])),
                None => return bad(format!("head {m} reads missing block {src}")),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name, shape, data: vec![0.0; n] }
    }
}

/// Geometry of one 3x3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    cin: usize,
    cout: usize,
    size_in: usize,
    size_out: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn patch(&self) -> usize {
        self.cin * K * K
    }

    fn out_pixels(&self) -> usize {
        self.size_out * self.size_out
    }
}

fn im2col(input: &[Real], c: &Conv, col: &mut [Real]) {
    let (s, so) = (c.size_in as isize, c.size_out);
    for ch in 0..c.cin {
        let plane = &input[ch * c.size_in * c.size_in..(ch + 1) * c.size_in * c.size_in];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[((ch * K + ky) * K + kx) * so * so..][..so * so];
                for oy in 0..so {
                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                    let dst = &mut row[oy * so..(oy + 1) * so];
                    if iy < 0 || iy >= s {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * c.size_in..][..c.size_in];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                        *d = if ix < 0 || ix >= s { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `out`.
fn col2im(col: &[Real], c: &Conv, out: &mut [Real]) {
    let (s, so) = (c.size_in as isize, c.size_out);
    for ch in 0..c.cin {
        let plane = &mut out[ch * c.size_in * c.size_in..(ch + 1) * c.size_in * c.size_in];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[((ch * K + ky) * K + kx) * so * so..][..so * so];
                for oy in 0..so {
                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                    if iy < 0 || iy >= s {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * c.size_in..][..c.size_in];
                    for (ox, &v) in row[oy * so..(oy + 1) * so].iter().enumerate() {
                        let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                        if ix >= 0 && ix < s {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `C = A B + beta C` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    (rsa, csa): (usize, usize),
    b: &[Real],
    (rsb, csb): (usize, usize),
    beta: Real,
    c: &mut [Real],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices, and `c` does not
    // alias `a` or `b` because it is borrowed mutably.
    unsafe {
        #[cfg(not(feature = "narrow"))]
        let f = matrixmultiply::dgemm;
        #[cfg(feature = "narrow")]
        let f = matrixmultiply::sgemm;
        f(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(c: &Conv, weight: &[Real], bias: &[Real], input: &[Real], col: &mut Vec<Real>) -> Vec<Real> {
    let (kk, hw) = (c.patch(), c.out_pixels());
    col.resize(kk * hw, 0.0);
    im2col(input, c, col);
    let mut out = vec![0.0; c.cout * hw];
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[o]);
    }
    gemm(c.cout, kk, hw, weight, (kk, 1), col, (hw, 1), 1.0, &mut out);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked for.
fn conv_backward(
    c: &Conv,
    weight: &[Real],
    col: &[Real],
    d_out: &[Real],
    d_weight: &mut [Real],
    d_bias: &mut [Real],
    want_input: bool,
) -> Option<Vec<Real>> {
    let (kk, hw) = (c.patch(), c.out_pixels());
    gemm(c.cout, hw, kk, d_out, (hw, 1), col, (1, hw), 1.0, d_weight);
    for (db, row) in d_bias.iter_mut().zip(d_out.chunks_exact(hw)) {
        *db += row.iter().sum::<Real>();
    }
    if !want_input {
        return None;
    }
    let mut d_col = vec![0.0; kk * hw];
    gemm(kk, c.cout, hw, weight, (1, kk), d_out, (hw, 1), 0.0, &mut d_col);
    let mut d_in = vec![0.0; c.cin * c.size_in * c.size_in];
    col2im(&d_col, c, &mut d_in);
    Some(d_in)
}

#[inline]
fn sigmoid(z: Real) -> Real {
    1.0 / (1.0 + (-z).exp())
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cols: Vec<Vec<Real>>,
    pre: Vec<Vec<Real>>,
    acts: Vec<Vec<Real>>,
    head_cols: Vec<Vec<Real>>,
}

/// Parameter gradients, aligned with [`MiniSsd::params`].
pub type Gradients = Vec<Vec<Real>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MiniSsd {
    config: ModelConfig,
    priors: Vec<PriorBox>,
    layers: Vec<Conv>,
    /// Index of the last layer of each block.
    block_ends: Vec<usize>,
    heads: Vec<Conv>,
    /// Weight then bias of every layer, then of every head.
    params: Vec<Tensor>,
}

impl MiniSsd {
    /// He-uniform weights from a seeded RNG, zero biases, background logits biased up.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DetectorError> {
        let mut m = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_labels = m.config.n_labels();
        for (t, conv) in m.layers.clone().iter().chain(m.heads.clone().iter()).enumerate() {
            let bound = (6.0 / conv.patch() as f64).sqrt();
            for w in &mut m.params[2 * t].data {
                *w = rng.gen_range(-bound..bound) as Real;
            }
        }
        let first_head = 2 * m.layers.len();
        for h in 0..m.heads.len() {
            let bias = &mut m.params[first_head + 2 * h + 1].data;
            for a in 0..m.config.priors.priors_per_cell(h) {
                bias[a * (4 + n_labels) + 4] = BACKGROUND_BIAS;
            }
        }
        Ok(m)
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        let priors = generate_priors(&config.priors)?;
        let sizes = config.block_sizes()?;
        let mut layers = Vec::new();
        let mut block_ends = Vec::new();
        let mut params = Vec::new();
        let (mut cin, mut s) = (1, config.input_size);
        for (i, (&cout, &pad)) in config.channels.iter().zip(&config.pads).enumerate() {
            layers.push(Conv { cin, cout, size_in: s, size_out: sizes[i], stride: 2, pad });
            params.push(Tensor::zeros(format!("block{i}.weight"), vec![cout, cin, K, K]));
            params.push(Tensor::zeros(format!("block{i}.bias"), vec![cout]));
            cin = cout;
            s = sizes[i];
            for r in 0..config.refine.get(i).copied().unwrap_or(0) {
                layers.push(Conv { cin, cout, size_in: s, size_out: s, stride: 1, pad: 1 });
                params.push(Tensor::zeros(format!("block{i}.refine{r}.weight"), vec![cout, cin, K, K]));
                params.push(Tensor::zeros(format!("block{i}.refine{r}.bias"), vec![cout]));
            }
            block_ends.push(layers.len() - 1);
        }
        let n_labels = config.n_labels();
        let mut heads = Vec::new();
        for (m, &src) in config.head_sources.iter().enumerate() {
            let c = config.channels[src];
            let cout = config.priors.priors_per_cell(m) * (4 + n_labels);
            heads.push(Conv { cin: c, cout, size_in: sizes[src], size_out: sizes[src], stride: 1, pad: 1 });
            params.push(Tensor::zeros(format!("head{m}.weight"), vec![cout, c, K, K]));
            params.push(Tensor::zeros(format!("head{m}.bias"), vec![cout]));
        }
        Ok(Self { config, priors, layers, block_ends, heads, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn priors(&self) -> &[PriorBox] {
        &self.priors
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    /// Replaces parameters by name; shapes must match.
    pub fn load_params(&mut self, tensors: Vec<Tensor>) -> Result<(), DetectorError> {
        if tensors.len() != self.params.len() {
            return Err(DetectorError::Shape(format!("{} tensors for {} parameters", tensors.len(), self.params.len())));
        }
        for t in tensors {
            let slot = self
                .params
                .iter_mut()
                .find(|p| p.name == t.name)
                .ok_or_else(|| DetectorError::Shape(format!("unknown tensor {}", t.name)))?;
            if slot.shape != t.shape || t.data.len() != slot.data.len() {
                return Err(DetectorError::Shape(format!("tensor {} has shape {:?}, expected {:?}", t.name, t.shape, slot.shape)));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Maps `[0, 1]` pixels to `[-1, 1]`; the raster must match the input size.
    pub fn input_from_raster(&self, img: &Raster) -> Result<Vec<Real>, DetectorError> {
        let s = self.config.input_size;
        if img.width() != s || img.height() != s {
            return Err(DetectorError::Shape(format!("input {}x{}, model expects {s}x{s}", img.width(), img.height())));
        }
        Ok(img.data().iter().map(|&v| (2.0 * v - 1.0) as Real).collect())
    }

    pub fn forward(&self, input: &[Real]) -> Result<(PriorPredictions, ForwardCache), DetectorError> {
        let s = self.config.input_size;
        if input.len() != s * s {
            return Err(DetectorError::Shape(format!("input has {} values, expected {}", input.len(), s * s)));
        }
        let mut cache = ForwardCache { cols: Vec::new(), pre: Vec::new(), acts: Vec::new(), head_cols: Vec::new() };
        for (i, c) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &cache.acts[i - 1] };
            let mut col = Vec::new();
            let z = conv_forward(c, &self.params[2 * i].data, &self.params[2 * i + 1].data, x, &mut col);
            let a = z.iter().map(|&v| v * sigmoid(v)).collect();
            cache.cols.push(col);
            cache.pre.push(z);
            cache.acts.push(a);
        }
        let n_labels = self.config.n_labels();
        let mut pred = PriorPredictions::zeros(self.priors.len(), n_labels);
        let first_head = 2 * self.layers.len();
        let mut base = 0;
        for (m, h) in self.heads.iter().enumerate() {
            let mut col = Vec::new();
            let x = &cache.acts[self.block_ends[self.config.head_sources[m]]];
            let out = conv_forward(h, &self.params[first_head + 2 * m].data, &self.params[first_head + 2 * m + 1].data, x, &mut col);
            let (a_per, hw) = (self.config.priors.priors_per_cell(m), h.out_pixels());
            for cell in 0..hw {
                for a in 0..a_per {
                    let p = base + cell * a_per + a;
                    let ch = a * (4 + n_labels);
                    for t in 0..4 {
                        pred.offsets[p * 4 + t] = out[(ch + t) * hw + cell];
                    }
                    for l in 0..n_labels {
                        pred.logits[p * n_labels + l] = out[(ch + 4 + l) * hw + cell];
                    }
                }
            }
            base += hw * a_per;
            cache.head_cols.push(col);
        }
        Ok((pred, cache))
    }

    /// Adds the gradient of a scalar loss, given its gradient `d_pred` with respect to the
    /// predictions, into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_pred: &PriorPredictions, grads: &mut Gradients) -> Result<(), DetectorError> {
        let n_labels = self.config.n_labels();
        if d_pred.n_priors != self.priors.len() || d_pred.n_labels != n_labels || grads.len() != self.params.len() {
            return Err(DetectorError::Shape("gradient does not match the model".into()));
        }
        let mut d_acts: Vec<Vec<Real>> = cache.acts.iter().map(|a| vec![0.0; a.len()]).collect();
        let first_head = 2 * self.layers.len();
        let mut base = 0;
        for (m, h) in self.heads.iter().enumerate() {
            let (a_per, hw) = (self.config.priors.priors_per_cell(m), h.out_pixels());
            let mut d_out = vec![0.0; h.cout * hw];
            for cell in 0..hw {
                for a in 0..a_per {
                    let p = base + cell * a_per + a;
                    let ch = a * (4 + n_labels);
                    for t in 0..4 {
                        d_out[(ch + t) * hw + cell] = d_pred.offsets[p * 4 + t];
                    }
                    for l in 0..n_labels {
                        d_out[(ch + 4 + l) * hw + cell] = d_pred.logits[p * n_labels + l];
                    }
                }
            }
            base += hw * a_per;
            let (gw, rest) = grads[first_head + 2 * m..].split_at_mut(1);
            let d_in = conv_backward(h, &self.params[first_head + 2 * m].data, &cache.head_cols[m], &d_out, &mut gw[0], &mut rest[0], true)
                .expect("input gradient requested");
            for (d, v) in d_acts[self.block_ends[self.config.head_sources[m]]].iter_mut().zip(d_in) {
                *d += v;
            }
        }
        for i in (0..self.layers.len()).rev() {
            let d_z: Vec<Real> = d_acts[i]
                .iter()
                .zip(&cache.pre[i])
                .map(|(&da, &z)| {
                    let s = sigmoid(z);
                    da * s * (1.0 + z * (1.0 - s))
                })
                .collect();
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            if let Some(d_in) = conv_backward(&self.layers[i], &self.params[2 * i].data, &cache.cols[i], &d_z, &mut gw[0], &mut rest[0], i > 0) {
                for (d, v) in d_acts[i - 1].iter_mut().zip(d_in) {
                    *d += v;
                }
            }
        }
        Ok(())
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, input: &[Real]) -> Result<PriorPredictions, DetectorError> {
        self.forward(input).map(|(p, _)| p)
    }
}
