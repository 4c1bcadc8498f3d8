//! Coordinate-neighborhood attention features.
//!
//! Both extractors share the same skeleton: a stride-1 convolution turns each
//! image into a feature map, the earlier image supplies one query per pixel,
//! the later image supplies keys over the `n x n` window centred on that
//! pixel, and a softmax over the (flattened, border-masked) window produces
//! attention weights.
//!
//! * Texture change: the weights mix value vectors from the later image.
//! * Deformation: the weights average the window offsets, i.e. the expected
//!   matching coordinate minus the pixel's own coordinate.
//!
//! Every forward pass has a matching reverse pass that accumulates parameter
//! gradients. Window cells are always visited in row-major offset order so
//! results do not depend on how pixels are scheduled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor3};

/// Number of texture scales (1x1, 3x3 and 5x5 kernels).
pub const SCALES: usize = 3;

/// Kernel side used by the deformation extractor's convolution.
pub const DEFORMATION_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodWindow {
    n: usize,
    chat: usize,
}

impl NeighborhoodWindow {
    pub fn new(n: usize, chat: usize) -> Result<Self> {
        if n < 3 || n % 2 == 0 {
            return Err(Error::Config(format!("window side must be odd and >= 3, got {n}")));
        }
        if chat == 0 {
            return Err(Error::Config("projected channel count must be >= 1".into()));
        }
        Ok(Self { n, chat })
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> usize {
        (self.n - 1) / 2
    }

    pub fn projected_channels(&self) -> usize {
        self.chat
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// `(di, dj)` offset of window cell `m`, row-major from `(-r, -r)`.
    #[inline]
    pub fn offset(&self, m: usize) -> (isize, isize) {
        let r = self.radius() as isize;
        ((m / self.n) as isize - r, (m % self.n) as isize - r)
    }
}

/// Smooth ramp used after every convolution: `x * sigmoid(x)`.
#[inline]
pub fn ramp(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn ramp_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn uniform_init<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let s = (1.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-s..s)).collect()
}

/// Square stride-1 convolution with zero padding. Weights are laid out as
/// `[ky][kx][cin][cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(size: usize, cin: usize, cout: usize) -> Self {
        Self {
            size,
            cin,
            cout,
            weight: vec![0.0; size * size * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    pub fn init<R: Rng>(rng: &mut R, size: usize, cin: usize, cout: usize) -> Self {
        let fan_in = size * size * cin;
        Self {
            size,
            cin,
            cout,
            weight: uniform_init(rng, size * size * cin * cout, fan_in),
            bias: uniform_init(rng, cout, fan_in),
        }
    }

    fn check(&self) -> Result<()> {
        if self.size % 2 == 0
            || self.weight.len() != self.size * self.size * self.cin * self.cout
            || self.bias.len() != self.cout
        {
            return Err(Error::Shape(format!(
                "malformed {}x{} convolution {}->{}",
                self.size, self.size, self.cin, self.cout
            )));
        }
        Ok(())
    }

    #[inline]
    fn w_index(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * self.size + kx) * self.cin + ci) * self.cout
    }

    /// Pre-activation output.
    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        self.check()?;
        if input.channels() != self.cin {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.cin,
                input.channels()
            )));
        }
        let (h, w, _) = input.dims();
        let r = (self.size / 2) as isize;
        let mut out = Tensor3::zeros(h, w, self.cout);
        for i in 0..h {
            for j in 0..w {
                let acc = out.pixel_mut(i, j);
                acc.copy_from_slice(&self.bias);
                for ky in 0..self.size {
                    let y = i as isize + ky as isize - r;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..self.size {
                        let x = j as isize + kx as isize - r;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src = input.pixel(y as usize, x as usize);
                        for (ci, &v) in src.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let base = self.w_index(ky, kx, ci);
                            let taps = &self.weight[base..base + self.cout];
                            for (a, t) in acc.iter_mut().zip(taps) {
                                *a += v * t;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients into `grad` and, when requested,
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        input: &Tensor3,
        d_out: &Tensor3,
        grad: &mut Conv2d,
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        let (h, w, _) = input.dims();
        let r = (self.size / 2) as isize;
        let mut d_in = want_input_grad.then(|| Tensor3::zeros(h, w, self.cin));
        for i in 0..h {
            for j in 0..w {
                let g = d_out.pixel(i, j);
                for (b, &gv) in grad.bias.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..self.size {
                    let y = i as isize + ky as isize - r;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..self.size {
                        let x = j as isize + kx as isize - r;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let (y, x) = (y as usize, x as usize);
                        for ci in 0..self.cin {
                            let base = self.w_index(ky, kx, ci);
                            let v = input.get(y, x, ci);
                            let taps = &mut grad.weight[base..base + self.cout];
                            for (t, &gv) in taps.iter_mut().zip(g) {
                                *t += v * gv;
                            }
                            if let Some(d_in) = d_in.as_mut() {
                                let wt = &self.weight[base..base + self.cout];
                                let s: f64 = wt.iter().zip(g).map(|(a, b)| a * b).sum();
                                let cur = d_in.get(y, x, ci);
                                d_in.set(y, x, ci, cur + s);
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Per-pixel linear map `C -> C_hat` without bias, row-major `[C][C_hat]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
}

impl Projection {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
        }
    }

    pub fn init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: uniform_init(rng, rows * cols, rows),
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
        out
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        if input.channels() != self.rows || self.weight.len() != self.rows * self.cols {
            return Err(Error::Shape(format!(
                "projection {}x{} applied to {} channels",
                self.rows,
                self.cols,
                input.channels()
            )));
        }
        let (h, w, _) = input.dims();
        let mut out = Tensor3::zeros(h, w, self.cols);
        for i in 0..h {
            for j in 0..w {
                let y = self.apply_vec(input.pixel(i, j));
                out.pixel_mut(i, j).copy_from_slice(&y);
            }
        }
        Ok(out)
    }

    /// Accumulates the weight gradient and adds the input gradient into
    /// `d_in`.
    pub fn backward(&self, input: &Tensor3, d_out: &Tensor3, grad: &mut Projection, d_in: &mut Tensor3) {
        let (h, w, _) = input.dims();
        for i in 0..h {
            for j in 0..w {
                let x = input.pixel(i, j);
                let g = d_out.pixel(i, j);
                let dx = d_in.pixel_mut(i, j);
                for r in 0..self.rows {
                    let row = &self.weight[r * self.cols..(r + 1) * self.cols];
                    let grow = &mut grad.weight[r * self.cols..(r + 1) * self.cols];
                    let mut acc = 0.0;
                    for c in 0..self.cols {
                        grow[c] += x[r] * g[c];
                        acc += row[c] * g[c];
                    }
                    dx[r] += acc;
                }
            }
        }
    }
}

/// Feature map produced by one texture scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor3,
    pub scale_k: usize,
}

/// Convolution followed by the ramp. `scale_k` must match the kernel side
/// (`2k - 1`).
pub fn extract_texture(img: &ImageTensor, scale_k: usize, conv: &Conv2d) -> Result<FeatureMap> {
    if !(1..=SCALES).contains(&scale_k) || conv.size != 2 * scale_k - 1 {
        return Err(Error::Shape(format!(
            "scale {scale_k} needs a {}x{} kernel, got {}x{}",
            2 * scale_k.max(1) - 1,
            2 * scale_k.max(1) - 1,
            conv.size,
            conv.size
        )));
    }
    if conv.cin != 1 {
        return Err(Error::Shape(format!("texture kernels take 1 input channel, got {}", conv.cin)));
    }
    let mut data = conv.forward(img.pixels())?;
    data.data_mut().iter_mut().for_each(|v| *v = ramp(*v));
    Ok(FeatureMap { data, scale_k })
}

/// Gathered `n^2 x C` neighbourhood with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub rows: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

pub fn neighborhood_gather(fm: &Tensor3, i: usize, j: usize, win: &NeighborhoodWindow) -> Result<Neighborhood> {
    if i >= fm.height() {
        return Err(Error::Index { index: i, extent: fm.height() });
    }
    if j >= fm.width() {
        return Err(Error::Index { index: j, extent: fm.width() });
    }
    let mut rows = Vec::with_capacity(win.cells());
    let mut mask = Vec::with_capacity(win.cells());
    for m in 0..win.cells() {
        let (di, dj) = win.offset(m);
        let (y, x) = (i as isize + di, j as isize + dj);
        if y >= 0 && x >= 0 && (y as usize) < fm.height() && (x as usize) < fm.width() {
            rows.push(fm.pixel(y as usize, x as usize).to_vec());
            mask.push(true);
        } else {
            rows.push(vec![0.0; fm.channels()]);
            mask.push(false);
        }
    }
    Ok(Neighborhood { rows, mask })
}

/// Masked softmax of `q . k_m / sqrt(C_hat)` over the window.
pub fn attention_scores(q: &[f64], k_rows: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = k_rows
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    masked_softmax(&logits, mask)
}

/// Softmax over entries with `mask[m] == true`; masked entries are exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Mask);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &ok)| if ok { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Attention-weighted mixture of value rows.
pub fn texture_change(s: &[f64], v_rows: &[Vec<f64>]) -> Vec<f64> {
    let c = v_rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; c];
    for (w, row) in s.iter().zip(v_rows) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out
}

/// Pixel coordinate grid: `data[i, j] = (i, j)`.
pub fn coordinate_map(h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, 2, |i, j, k| if k == 0 { i as f64 } else { j as f64 })
}

/// Dense neighbourhood attention between a query map and a key map.
fn attention_map(q: &Tensor3, k: &Tensor3, win: &NeighborhoodWindow) -> Tensor3 {
    let (h, w, c) = q.dims();
    let cells = win.cells();
    let scale = 1.0 / (c as f64).sqrt();
    let mut s = Tensor3::zeros(h, w, cells);
    let mut logits = vec![0.0; cells];
    let mut valid = vec![false; cells];
    for i in 0..h {
        for j in 0..w {
            let qv = q.pixel(i, j);
            for m in 0..cells {
                let (di, dj) = win.offset(m);
                let (y, x) = (i as isize + di, j as isize + dj);
                valid[m] = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                logits[m] = if valid[m] {
                    let kv = k.pixel(y as usize, x as usize);
                    qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    0.0
                };
            }
            let weights = masked_softmax(&logits, &valid).expect("window centre is always valid");
            s.pixel_mut(i, j).copy_from_slice(&weights);
        }
    }
    s
}

/// Given `dL/dS`, accumulates `dL/dQ` and `dL/dK` through the softmax and the
/// scaled dot products.
fn attention_map_backward(
    q: &Tensor3,
    k: &Tensor3,
    s: &Tensor3,
    d_s: &Tensor3,
    win: &NeighborhoodWindow,
    d_q: &mut Tensor3,
    d_k: &mut Tensor3,
) {
    let (h, w, c) = q.dims();
    let cells = win.cells();
    let scale = 1.0 / (c as f64).sqrt();
    for i in 0..h {
        for j in 0..w {
            let sw = s.pixel(i, j);
            let ds = d_s.pixel(i, j);
            let dot: f64 = sw.iter().zip(ds).map(|(a, b)| a * b).sum();
            for m in 0..cells {
                if sw[m] == 0.0 {
                    continue;
                }
                let (di, dj) = win.offset(m);
                let (y, x) = (i as isize + di, j as isize + dj);
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                let g = sw[m] * (ds[m] - dot) * scale;
                for ch in 0..c {
                    let qv = q.get(i, j, ch);
                    let kv = k.get(y, x, ch);
                    let cur = d_q.get(i, j, ch);
                    d_q.set(i, j, ch, cur + g * kv);
                    let cur = d_k.get(y, x, ch);
                    d_k.set(y, x, ch, cur + g * qv);
                }
            }
        }
    }
}

/// Parameters of one texture scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureScale {
    pub conv: Conv2d,
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
}

impl TextureScale {
    pub fn zeros(scale_k: usize, channels: usize, chat: usize) -> Self {
        Self {
            conv: Conv2d::zeros(2 * scale_k - 1, 1, channels),
            wq: Projection::zeros(channels, chat),
            wk: Projection::zeros(channels, chat),
            wv: Projection::zeros(channels, chat),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, scale_k: usize, channels: usize, chat: usize) -> Self {
        Self {
            conv: Conv2d::init(rng, 2 * scale_k - 1, 1, channels),
            wq: Projection::init(rng, channels, chat),
            wk: Projection::init(rng, channels, chat),
            wv: Projection::init(rng, channels, chat),
        }
    }
}

/// Parameters of the deformation extractor. Only queries and keys are
/// needed: the attention weights average coordinates, not values.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationParams {
    pub conv: Conv2d,
    pub wq: Projection,
    pub wk: Projection,
}

impl DeformationParams {
    pub fn zeros(channels: usize, chat: usize) -> Self {
        Self {
            conv: Conv2d::zeros(DEFORMATION_KERNEL, 1, channels),
            wq: Projection::zeros(channels, chat),
            wk: Projection::zeros(channels, chat),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, channels: usize, chat: usize) -> Self {
        Self {
            conv: Conv2d::init(rng, DEFORMATION_KERNEL, 1, channels),
            wq: Projection::init(rng, channels, chat),
            wk: Projection::init(rng, channels, chat),
        }
    }
}

/// Everything one attention branch keeps for its reverse pass.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    pre0: Tensor3,
    pre1: Tensor3,
    a0: Tensor3,
    a1: Tensor3,
    q: Tensor3,
    k: Tensor3,
    v: Option<Tensor3>,
    /// Attention weights, `h x w x n^2`.
    pub attention: Tensor3,
}

fn check_pair(i0: &ImageTensor, i1: &ImageTensor) -> Result<()> {
    if !i0.same_shape(i1) {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{} vs {}x{}",
            i0.height(),
            i0.width(),
            i1.height(),
            i1.width()
        )));
    }
    Ok(())
}

fn branch_forward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    conv: &Conv2d,
    wq: &Projection,
    wk: &Projection,
    wv: Option<&Projection>,
    win: &NeighborhoodWindow,
) -> Result<BranchTrace> {
    let pre0 = conv.forward(i0.pixels())?;
    let pre1 = conv.forward(i1.pixels())?;
    let act = |t: &Tensor3| {
        let mut a = t.clone();
        a.data_mut().iter_mut().for_each(|v| *v = ramp(*v));
        a
    };
    let a0 = act(&pre0);
    let a1 = act(&pre1);
    if wq.cols != win.projected_channels() || wk.cols != win.projected_channels() {
        return Err(Error::Shape(format!(
            "projections produce {} channels, window expects {}",
            wq.cols,
            win.projected_channels()
        )));
    }
    let q = wq.forward(&a0)?;
    let k = wk.forward(&a1)?;
    let v = wv.map(|p| p.forward(&a1)).transpose()?;
    let attention = attention_map(&q, &k, win);
    Ok(BranchTrace {
        pre0,
        pre1,
        a0,
        a1,
        q,
        k,
        v,
        attention,
    })
}

/// Shared tail of the reverse pass: from `dL/dS` back to the convolution.
#[allow(clippy::too_many_arguments)]
fn branch_backward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    trace: &BranchTrace,
    d_s: &Tensor3,
    d_v: Option<&Tensor3>,
    win: &NeighborhoodWindow,
    conv: &Conv2d,
    wq: &Projection,
    wk: &Projection,
    wv: Option<&Projection>,
    g_conv: &mut Conv2d,
    g_wq: &mut Projection,
    g_wk: &mut Projection,
    g_wv: Option<&mut Projection>,
) {
    let (h, w, c) = trace.a0.dims();
    let chat = win.projected_channels();
    let mut d_q = Tensor3::zeros(h, w, chat);
    let mut d_k = Tensor3::zeros(h, w, chat);
    attention_map_backward(&trace.q, &trace.k, &trace.attention, d_s, win, &mut d_q, &mut d_k);

    let mut d_a0 = Tensor3::zeros(h, w, c);
    let mut d_a1 = Tensor3::zeros(h, w, c);
    wq.backward(&trace.a0, &d_q, g_wq, &mut d_a0);
    wk.backward(&trace.a1, &d_k, g_wk, &mut d_a1);
    if let (Some(wv), Some(g_wv), Some(d_v)) = (wv, g_wv, d_v) {
        wv.backward(&trace.a1, d_v, g_wv, &mut d_a1);
    }
    for (d, z) in d_a0.data_mut().iter_mut().zip(trace.pre0.data()) {
        *d *= ramp_grad(*z);
    }
    for (d, z) in d_a1.data_mut().iter_mut().zip(trace.pre1.data()) {
        *d *= ramp_grad(*z);
    }
    conv.backward(i0.pixels(), &d_a0, g_conv, false);
    conv.backward(i1.pixels(), &d_a1, g_conv, false);
}

/// Texture change of one scale plus its trace.
#[derive(Clone, Debug)]
pub struct TextureTrace {
    pub change: Tensor3,
    pub branch: BranchTrace,
}

/// Texture change features for all three scales.
pub fn ttcn_forward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    scales: &[TextureScale; SCALES],
    win: &NeighborhoodWindow,
) -> Result<[TextureTrace; SCALES]> {
    check_pair(i0, i1)?;
    let mut out = Vec::with_capacity(SCALES);
    for (idx, scale) in scales.iter().enumerate() {
        if scale.conv.size != 2 * idx + 1 {
            return Err(Error::Shape(format!(
                "texture scale {} needs a {}x{} kernel",
                idx + 1,
                2 * idx + 1,
                2 * idx + 1
            )));
        }
        let branch = branch_forward(i0, i1, &scale.conv, &scale.wq, &scale.wk, Some(&scale.wv), win)?;
        let change = mix_values(&branch.attention, branch.v.as_ref().expect("values computed"), win);
        out.push(TextureTrace { change, branch });
    }
    Ok(out.try_into().expect("three scales"))
}

fn mix_values(s: &Tensor3, v: &Tensor3, win: &NeighborhoodWindow) -> Tensor3 {
    let (h, w, c) = v.dims();
    let mut out = Tensor3::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let sw = s.pixel(i, j);
            let acc = out.pixel_mut(i, j);
            for (m, &weight) in sw.iter().enumerate() {
                if weight == 0.0 {
                    continue;
                }
                let (di, dj) = win.offset(m);
                let vv = v.pixel((i as isize + di) as usize, (j as isize + dj) as usize);
                for (a, b) in acc.iter_mut().zip(vv) {
                    *a += weight * b;
                }
            }
        }
    }
    out
}

/// Reverse pass of [`ttcn_forward`] for one scale.
pub fn ttcn_backward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    scale: &TextureScale,
    trace: &TextureTrace,
    d_change: &Tensor3,
    win: &NeighborhoodWindow,
    grad: &mut TextureScale,
) {
    let branch = &trace.branch;
    let v = branch.v.as_ref().expect("texture branch keeps values");
    let (h, w, chat) = v.dims();
    let cells = win.cells();
    let mut d_s = Tensor3::zeros(h, w, cells);
    let mut d_v = Tensor3::zeros(h, w, chat);
    for i in 0..h {
        for j in 0..w {
            let g = d_change.pixel(i, j);
            for m in 0..cells {
                let weight = branch.attention.get(i, j, m);
                if weight == 0.0 {
                    continue;
                }
                let (di, dj) = win.offset(m);
                let (y, x) = ((i as isize + di) as usize, (j as isize + dj) as usize);
                let vv = v.pixel(y, x);
                d_s.set(i, j, m, g.iter().zip(vv).map(|(a, b)| a * b).sum());
                let dv = d_v.pixel_mut(y, x);
                for (d, &gv) in dv.iter_mut().zip(g) {
                    *d += weight * gv;
                }
            }
        }
    }
    branch_backward(
        i0,
        i1,
        branch,
        &d_s,
        Some(&d_v),
        win,
        &scale.conv,
        &scale.wq,
        &scale.wk,
        Some(&scale.wv),
        &mut grad.conv,
        &mut grad.wq,
        &mut grad.wk,
        Some(&mut grad.wv),
    );
}

/// Deformation field plus its trace.
#[derive(Clone, Debug)]
pub struct DeformationTrace {
    /// `h x w x 2` displacement `(row, col)` in pixels.
    pub field: Tensor3,
    pub branch: BranchTrace,
}

/// Expected window offset under the attention weights at every pixel.
pub fn deformation_from_attention(s: &Tensor3, win: &NeighborhoodWindow) -> Tensor3 {
    let (h, w, cells) = s.dims();
    let mut field = Tensor3::zeros(h, w, 2);
    for i in 0..h {
        for j in 0..w {
            let sw = s.pixel(i, j);
            let (mut dy, mut dx) = (0.0, 0.0);
            for (m, &weight) in sw.iter().enumerate().take(cells) {
                let (di, dj) = win.offset(m);
                dy += weight * di as f64;
                dx += weight * dj as f64;
            }
            let px = field.pixel_mut(i, j);
            px[0] = dy;
            px[1] = dx;
        }
    }
    field
}

pub fn tdcn_forward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    params: &DeformationParams,
    win: &NeighborhoodWindow,
) -> Result<DeformationTrace> {
    check_pair(i0, i1)?;
    let branch = branch_forward(i0, i1, &params.conv, &params.wq, &params.wk, None, win)?;
    let field = deformation_from_attention(&branch.attention, win);
    Ok(DeformationTrace { field, branch })
}

pub fn tdcn_backward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    params: &DeformationParams,
    trace: &DeformationTrace,
    d_field: &Tensor3,
    win: &NeighborhoodWindow,
    grad: &mut DeformationParams,
) {
    let (h, w, _) = d_field.dims();
    let cells = win.cells();
    let mut d_s = Tensor3::zeros(h, w, cells);
    for i in 0..h {
        for j in 0..w {
            let g = d_field.pixel(i, j);
            for m in 0..cells {
                let (di, dj) = win.offset(m);
                d_s.set(i, j, m, g[0] * di as f64 + g[1] * dj as f64);
            }
        }
    }
    branch_backward(
        i0,
        i1,
        &trace.branch,
        &d_s,
        None,
        win,
        &params.conv,
        &params.wq,
        &params.wk,
        None,
        &mut grad.conv,
        &mut grad.wq,
        &mut grad.wk,
        None,
    );
}
