//! End-to-end forward pass: attention features, time-conditioned NIG heads,
//! pointwise fusion, uncertainty maps and the convolutional decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    self, sigmoid, Conv2d, DeformationParams, DeformationTrace, NeighborhoodWindow, TextureScale,
    TextureTrace, SCALES,
};
use crate::nig::{self, MixtureMode, NigParams, PARAM_FLOOR};
use crate::tensor::{ImageTensor, Tensor3};

/// Acquisition times of the two inputs and of the requested output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpec {
    t0: f64,
    t1: f64,
    target: f64,
}

impl TimeSpec {
    pub fn new(t0: f64, t1: f64, target: f64) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && target.is_finite()) {
            return Err(Error::Domain("times must be finite".into()));
        }
        if t1 <= t0 {
            return Err(Error::Domain(format!("t1 ({t1}) must be later than t0 ({t0})")));
        }
        Ok(Self { t0, t1, target })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// `(target - t1) / (t1 - t0)`: in `(-1, 0)` strictly between the
    /// inputs, positive beyond `t1`.
    pub fn normalized(&self) -> f64 {
        (self.target - self.t1) / (self.t1 - self.t0)
    }

    pub fn is_extrapolation(&self) -> bool {
        self.target > self.t1
    }
}

/// Per-pixel NIG parameter fields, each `h x w x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMaps {
    pub delta: Tensor3,
    pub gamma: Tensor3,
    pub alpha: Tensor3,
    pub beta: Tensor3,
}

impl ParamMaps {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            delta: Tensor3::zeros(h, w, 1),
            gamma: Tensor3::zeros(h, w, 1),
            alpha: Tensor3::zeros(h, w, 1),
            beta: Tensor3::zeros(h, w, 1),
        }
    }

    /// Fills every pixel with the same parameters.
    pub fn uniform(h: usize, w: usize, p: &NigParams) -> Self {
        let mut maps = Self::zeros(h, w);
        for idx in 0..h * w {
            maps.set_index(idx, p);
        }
        maps
    }

    pub fn height(&self) -> usize {
        self.delta.height()
    }

    pub fn width(&self) -> usize {
        self.delta.width()
    }

    pub fn len(&self) -> usize {
        self.delta.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at_index(&self, idx: usize) -> NigParams {
        NigParams::new_unchecked(
            self.delta.data()[idx],
            self.gamma.data()[idx],
            self.alpha.data()[idx],
            self.beta.data()[idx],
        )
    }

    #[inline]
    pub fn set_index(&mut self, idx: usize, p: &NigParams) {
        self.delta.data_mut()[idx] = p.delta();
        self.gamma.data_mut()[idx] = p.gamma();
        self.alpha.data_mut()[idx] = p.alpha();
        self.beta.data_mut()[idx] = p.beta();
    }

    /// True when every pixel satisfies the NIG constraints and is finite.
    pub fn is_valid(&self) -> bool {
        (0..self.len()).all(|idx| {
            let [d, g, a, b] = self.at_index(idx).to_array();
            d.is_finite() && g.is_finite() && a.is_finite() && b.is_finite() && g > 0.0 && a > 1.0 && b > 0.0
        })
    }

    pub fn same_shape(&self, other: &ParamMaps) -> bool {
        self.delta.same_shape(&other.delta)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-pixel affine map from `features ++ [t_norm]` to the four raw NIG
/// values. Weight layout `[in_features + 1][4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamHead {
    pub in_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamHead {
    pub fn zeros(in_features: usize) -> Self {
        Self {
            in_features,
            weight: vec![0.0; (in_features + 1) * 4],
            bias: vec![0.0; 4],
        }
    }

    pub fn init<R: rand::Rng>(rng: &mut R, in_features: usize) -> Self {
        let fan_in = in_features + 1;
        Self {
            in_features,
            weight: features::uniform_init(rng, fan_in * 4, fan_in),
            bias: features::uniform_init(rng, 4, fan_in),
        }
    }

    fn raw(&self, x: &[f64], t_norm: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        out.copy_from_slice(&self.bias);
        for (f, &xv) in x.iter().chain(std::iter::once(&t_norm)).enumerate() {
            let row = &self.weight[f * 4..f * 4 + 4];
            for o in 0..4 {
                out[o] += xv * row[o];
            }
        }
        out
    }
}

#[inline]
fn activate(raw: [f64; 4]) -> NigParams {
    NigParams::new_unchecked(
        raw[0],
        softplus(raw[1]) + PARAM_FLOOR,
        1.0 + softplus(raw[2]) + PARAM_FLOOR,
        softplus(raw[3]) + PARAM_FLOOR,
    )
}

/// Applies a head at every pixel of `feat`.
pub fn param_head(feat: &Tensor3, t: &TimeSpec, head: &ParamHead) -> Result<ParamMaps> {
    Ok(head_forward(feat, t.normalized(), head)?.1)
}

fn head_forward(feat: &Tensor3, t_norm: f64, head: &ParamHead) -> Result<(Tensor3, ParamMaps)> {
    if feat.channels() != head.in_features || head.weight.len() != (head.in_features + 1) * 4 || head.bias.len() != 4 {
        return Err(Error::Shape(format!(
            "head expects {} feature channels, got {}",
            head.in_features,
            feat.channels()
        )));
    }
    if !feat.all_finite() {
        return Err(Error::Numerical("non-finite features entering a parameter head".into()));
    }
    let (h, w, _) = feat.dims();
    let mut raw_map = Tensor3::zeros(h, w, 4);
    let mut maps = ParamMaps::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let raw = head.raw(feat.pixel(i, j), t_norm);
            raw_map.pixel_mut(i, j).copy_from_slice(&raw);
            maps.set_index(i * w + j, &activate(raw));
        }
    }
    Ok((raw_map, maps))
}

/// Reverse pass through the activations and the affine map. Adds the
/// feature gradient into `d_feat`.
fn head_backward(
    feat: &Tensor3,
    t_norm: f64,
    raw: &Tensor3,
    d_params: &[[f64; 4]],
    head: &ParamHead,
    grad: &mut ParamHead,
    d_feat: &mut Tensor3,
) {
    let (h, w, f) = feat.dims();
    for i in 0..h {
        for j in 0..w {
            let g = d_params[i * w + j];
            let r = raw.pixel(i, j);
            let d_raw = [g[0], g[1] * sigmoid(r[1]), g[2] * sigmoid(r[2]), g[3] * sigmoid(r[3])];
            for o in 0..4 {
                grad.bias[o] += d_raw[o];
            }
            let x = feat.pixel(i, j);
            let dx = d_feat.pixel_mut(i, j);
            for k in 0..=f {
                let xv = if k < f { x[k] } else { t_norm };
                let row = &head.weight[k * 4..k * 4 + 4];
                let grow = &mut grad.weight[k * 4..k * 4 + 4];
                let mut acc = 0.0;
                for o in 0..4 {
                    grow[o] += xv * d_raw[o];
                    acc += row[o] * d_raw[o];
                }
                if k < f {
                    dx[k] += acc;
                }
            }
        }
    }
}

/// Hyperparameters fixed at model construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Neighbourhood window side `n`.
    pub window: usize,
    /// Texture feature channels `C`.
    pub channels: usize,
    /// Projected channels `C_hat`.
    pub projected: usize,
    /// Hidden channels of the decoder.
    pub decoder_hidden: usize,
    pub mixture: MixtureMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 3,
            channels: 8,
            projected: 8,
            decoder_hidden: 8,
            mixture: MixtureMode::Symmetric,
        }
    }
}

impl ModelConfig {
    pub fn window(&self) -> Result<NeighborhoodWindow> {
        NeighborhoodWindow::new(self.window, self.projected)
    }

    pub fn validate(&self) -> Result<()> {
        self.window()?;
        if self.channels == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// All learnable parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub texture: [TextureScale; SCALES],
    pub deformation: DeformationParams,
    pub local_heads: [ParamHead; SCALES],
    pub global_head: ParamHead,
    /// `3 -> hidden` then `hidden -> 1`, both 3x3.
    pub decoder: [Conv2d; 2],
}

pub const DECODER_KERNEL: usize = 3;

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let (c, p, hd) = (config.channels, config.projected, config.decoder_hidden);
        Self {
            config,
            texture: std::array::from_fn(|k| TextureScale::zeros(k + 1, c, p)),
            deformation: DeformationParams::zeros(c, p),
            local_heads: std::array::from_fn(|_| ParamHead::zeros(p)),
            global_head: ParamHead::zeros(2),
            decoder: [
                Conv2d::zeros(DECODER_KERNEL, 3, hd),
                Conv2d::zeros(DECODER_KERNEL, hd, 1),
            ],
        }
    }

    /// Uniform `(-s, s)` initialisation with `s = sqrt(1 / fan_in)`, rounded
    /// to `f32` so the parameters survive a save/load round trip.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, p, hd) = (config.channels, config.projected, config.decoder_hidden);
        let texture = std::array::from_fn(|k| TextureScale::init(&mut rng, k + 1, c, p));
        let deformation = DeformationParams::init(&mut rng, c, p);
        let local_heads = std::array::from_fn(|_| ParamHead::init(&mut rng, p));
        let global_head = ParamHead::init(&mut rng, 2);
        let decoder = [
            Conv2d::init(&mut rng, DECODER_KERNEL, 3, hd),
            Conv2d::init(&mut rng, DECODER_KERNEL, hd, 1),
        ];
        let mut model = Self {
            config,
            texture,
            deformation,
            local_heads,
            global_head,
            decoder,
        };
        model.for_each_tensor_mut(|_, _, values| crate::tensor::quantize_f32(values));
        Ok(model)
    }

    /// Visits every parameter tensor in a fixed order with its name and
    /// dims.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        let (c, p, hd) = (self.config.channels, self.config.projected, self.config.decoder_hidden);
        for (k, s) in self.texture.iter().enumerate() {
            let ks = s.conv.size;
            f(&format!("texture.{k}.conv.weight"), &[ks, ks, 1, c], &s.conv.weight);
            f(&format!("texture.{k}.conv.bias"), &[c], &s.conv.bias);
            f(&format!("texture.{k}.wq"), &[c, p], &s.wq.weight);
            f(&format!("texture.{k}.wk"), &[c, p], &s.wk.weight);
            f(&format!("texture.{k}.wv"), &[c, p], &s.wv.weight);
        }
        let d = &self.deformation;
        let ks = d.conv.size;
        f("deformation.conv.weight", &[ks, ks, 1, c], &d.conv.weight);
        f("deformation.conv.bias", &[c], &d.conv.bias);
        f("deformation.wq", &[c, p], &d.wq.weight);
        f("deformation.wk", &[c, p], &d.wk.weight);
        for (k, head) in self.local_heads.iter().enumerate() {
            f(&format!("head.local.{k}.weight"), &[p + 1, 4], &head.weight);
            f(&format!("head.local.{k}.bias"), &[4], &head.bias);
        }
        f("head.global.weight", &[3, 4], &self.global_head.weight);
        f("head.global.bias", &[4], &self.global_head.bias);
        f("decoder.0.weight", &[3, 3, 3, hd], &self.decoder[0].weight);
        f("decoder.0.bias", &[hd], &self.decoder[0].bias);
        f("decoder.1.weight", &[3, 3, hd, 1], &self.decoder[1].weight);
        f("decoder.1.bias", &[1], &self.decoder[1].bias);
    }

    /// Mutable counterpart of [`for_each_tensor`](Self::for_each_tensor),
    /// same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut Vec<f64>)) {
        let (c, p, hd) = (self.config.channels, self.config.projected, self.config.decoder_hidden);
        for (k, s) in self.texture.iter_mut().enumerate() {
            let ks = s.conv.size;
            f(&format!("texture.{k}.conv.weight"), &[ks, ks, 1, c], &mut s.conv.weight);
            f(&format!("texture.{k}.conv.bias"), &[c], &mut s.conv.bias);
            f(&format!("texture.{k}.wq"), &[c, p], &mut s.wq.weight);
            f(&format!("texture.{k}.wk"), &[c, p], &mut s.wk.weight);
            f(&format!("texture.{k}.wv"), &[c, p], &mut s.wv.weight);
        }
        let d = &mut self.deformation;
        let ks = d.conv.size;
        f("deformation.conv.weight", &[ks, ks, 1, c], &mut d.conv.weight);
        f("deformation.conv.bias", &[c], &mut d.conv.bias);
        f("deformation.wq", &[c, p], &mut d.wq.weight);
        f("deformation.wk", &[c, p], &mut d.wk.weight);
        for (k, head) in self.local_heads.iter_mut().enumerate() {
            f(&format!("head.local.{k}.weight"), &[p + 1, 4], &mut head.weight);
            f(&format!("head.local.{k}.bias"), &[4], &mut head.bias);
        }
        f("head.global.weight", &[3, 4], &mut self.global_head.weight);
        f("head.global.bias", &[4], &mut self.global_head.bias);
        f("decoder.0.weight", &[3, 3, 3, hd], &mut self.decoder[0].weight);
        f("decoder.0.bias", &[hd], &mut self.decoder[0].bias);
        f("decoder.1.weight", &[3, 3, hd, 1], &mut self.decoder[1].weight);
        f("decoder.1.bias", &[1], &mut self.decoder[1].bias);
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _, v| n += v.len());
        n
    }

    /// All parameters concatenated in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each_tensor(|_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all parameters from a flat vector in visiting order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut pos = 0;
        self.for_each_tensor_mut(|_, _, v| {
            let n = v.len();
            v.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image: ImageTensor,
    pub d_map: Tensor3,
    pub al_map: Tensor3,
    pub ep_map: Tensor3,
    pub fused: ParamMaps,
}

/// Intermediate values kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub texture: [TextureTrace; SCALES],
    pub deformation: DeformationTrace,
    local_raw: [Tensor3; SCALES],
    pub local: [ParamMaps; SCALES],
    global_raw: Tensor3,
    pub global: ParamMaps,
    /// `local_1 ⊕ local_2` and the full local fold.
    partial: [ParamMaps; 2],
    decoder_input: Tensor3,
    hidden_pre: Tensor3,
    hidden: Tensor3,
    t_norm: f64,
}

fn fold_maps(a: &ParamMaps, b: &ParamMaps, mode: MixtureMode) -> ParamMaps {
    let mut out = ParamMaps::zeros(a.height(), a.width());
    for idx in 0..a.len() {
        out.set_index(idx, &nig::mix(&a.at_index(idx), &b.at_index(idx), mode));
    }
    out
}

/// Pointwise `(d, al, ep)` maps of a parameter field.
pub fn uncertainty_maps(p: &ParamMaps) -> (Tensor3, Tensor3, Tensor3) {
    let (h, w) = (p.height(), p.width());
    let mut d = Tensor3::zeros(h, w, 1);
    let mut al = Tensor3::zeros(h, w, 1);
    let mut ep = Tensor3::zeros(h, w, 1);
    for idx in 0..p.len() {
        let u = nig::uncertainty(&p.at_index(idx));
        d.data_mut()[idx] = u.d;
        al.data_mut()[idx] = u.al;
        ep.data_mut()[idx] = u.ep;
    }
    (d, al, ep)
}

fn stack3(a: &Tensor3, b: &Tensor3, c: &Tensor3) -> Tensor3 {
    Tensor3::from_fn(a.height(), a.width(), 3, |i, j, k| match k {
        0 => a.get(i, j, 0),
        1 => b.get(i, j, 0),
        _ => c.get(i, j, 0),
    })
}

fn check_decoder(decoder: &[Conv2d; 2]) -> Result<()> {
    if decoder[0].cin != 3 || decoder[1].cin != decoder[0].cout || decoder[1].cout != 1 {
        return Err(Error::Shape("decoder must map 3 channels to 1 through a hidden layer".into()));
    }
    Ok(())
}

fn decode_traced(
    d: &Tensor3,
    al: &Tensor3,
    ep: &Tensor3,
    decoder: &[Conv2d; 2],
) -> Result<(Tensor3, Tensor3, Tensor3, Tensor3)> {
    if !(d.same_shape(al) && d.same_shape(ep)) || d.channels() != 1 {
        return Err(Error::Shape("decoder inputs must be aligned single-channel maps".into()));
    }
    check_decoder(decoder)?;
    let input = stack3(d, al, ep);
    let hidden_pre = decoder[0].forward(&input)?;
    let mut hidden = hidden_pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = features::ramp(*v));
    let mut out = decoder[1].forward(&hidden)?;
    out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok((input, hidden_pre, hidden, out))
}

/// Decodes `(d, al, ep)` into an image in `[0, 1]`.
pub fn decode(d: &Tensor3, al: &Tensor3, ep: &Tensor3, decoder: &[Conv2d; 2], age_years: f64) -> Result<ImageTensor> {
    let (_, _, _, out) = decode_traced(d, al, ep, decoder)?;
    if !out.all_finite() {
        return Err(Error::Numerical("decoder produced non-finite pixels".into()));
    }
    ImageTensor::new(out, age_years.max(0.0))
}

pub fn tnig_forward(i0: &ImageTensor, i1: &ImageTensor, t: &TimeSpec, m: &ModelParams) -> Result<Prediction> {
    Ok(forward_traced(i0, i1, t, m)?.0)
}

/// Forward pass that also returns the trace needed by [`backward`].
pub fn forward_traced(
    i0: &ImageTensor,
    i1: &ImageTensor,
    t: &TimeSpec,
    m: &ModelParams,
) -> Result<(Prediction, ForwardTrace)> {
    let win = m.config.window()?;
    let t_norm = t.normalized();
    let texture = features::ttcn_forward(i0, i1, &m.texture, &win)?;
    let deformation = features::tdcn_forward(i0, i1, &m.deformation, &win)?;

    let mut local_raw = Vec::with_capacity(SCALES);
    let mut local = Vec::with_capacity(SCALES);
    for (trace, head) in texture.iter().zip(&m.local_heads) {
        let (raw, maps) = head_forward(&trace.change, t_norm, head)?;
        local_raw.push(raw);
        local.push(maps);
    }
    let local_raw: [Tensor3; SCALES] = local_raw.try_into().expect("three scales");
    let local: [ParamMaps; SCALES] = local.try_into().expect("three scales");
    let (global_raw, global) = head_forward(&deformation.field, t_norm, &m.global_head)?;

    let mode = m.config.mixture;
    let p12 = fold_maps(&local[0], &local[1], mode);
    let p123 = fold_maps(&p12, &local[2], mode);
    let fused = fold_maps(&p123, &global, mode);
    if !fused.is_valid() {
        return Err(Error::Numerical("fused NIG parameters are not finite".into()));
    }

    let (d_map, al_map, ep_map) = uncertainty_maps(&fused);
    let (decoder_input, hidden_pre, hidden, out) = decode_traced(&d_map, &al_map, &ep_map, &m.decoder)?;
    if !out.all_finite() {
        return Err(Error::Numerical("decoder produced non-finite pixels".into()));
    }
    let image = ImageTensor::new(out, t.target().max(0.0))?;
    let prediction = Prediction {
        image,
        d_map,
        al_map,
        ep_map,
        fused,
    };
    let trace = ForwardTrace {
        texture,
        deformation,
        local_raw,
        local,
        global_raw,
        global,
        partial: [p12, p123],
        decoder_input,
        hidden_pre,
        hidden,
        t_norm,
    };
    Ok((prediction, trace))
}

/// Reverse pass. `d_image` is `dL/d(image pixels)`; `d_fused` holds
/// `dL/d(delta, gamma, alpha, beta)` of the fused maps from loss terms that
/// read them directly. Returns parameter gradients shaped like `m`.
pub fn backward(
    i0: &ImageTensor,
    i1: &ImageTensor,
    m: &ModelParams,
    prediction: &Prediction,
    trace: &ForwardTrace,
    d_image: &Tensor3,
    d_fused: &ParamMaps,
) -> Result<ModelParams> {
    let win = m.config.window()?;
    let mut grad = ModelParams::zeros(m.config);
    let (h, w) = (prediction.fused.height(), prediction.fused.width());
    let n = h * w;

    // Decoder.
    let mut d_logit = d_image.clone();
    for (g, y) in d_logit.data_mut().iter_mut().zip(prediction.image.pixels().data()) {
        *g *= y * (1.0 - y);
    }
    let mut d_hidden = m.decoder[1]
        .backward(&trace.hidden, &d_logit, &mut grad.decoder[1], true)
        .expect("input gradient requested");
    for (g, z) in d_hidden.data_mut().iter_mut().zip(trace.hidden_pre.data()) {
        *g *= features::ramp_grad(*z);
    }
    let d_input = m.decoder[0]
        .backward(&trace.decoder_input, &d_hidden, &mut grad.decoder[0], true)
        .expect("input gradient requested");

    // Uncertainty maps -> fused parameters.
    let fused = &prediction.fused;
    let mut g_fused: Vec<[f64; 4]> = Vec::with_capacity(n);
    for idx in 0..n {
        let p = fused.at_index(idx);
        let (g_d, g_al, g_ep) = (
            d_input.data()[idx * 3],
            d_input.data()[idx * 3 + 1],
            d_input.data()[idx * 3 + 2],
        );
        let am1 = p.alpha() - 1.0;
        let al = p.beta() / am1;
        let ep = al / p.gamma();
        g_fused.push([
            g_d + d_fused.delta.data()[idx],
            g_ep * (-ep / p.gamma()) + d_fused.gamma.data()[idx],
            g_al * (-al / am1) + g_ep * (-ep / am1) + d_fused.alpha.data()[idx],
            g_al / am1 + g_ep / (p.gamma() * am1) + d_fused.beta.data()[idx],
        ]);
    }

    // Unfold the mixtures: fused = ((l1 ⊕ l2) ⊕ l3) ⊕ g.
    let mode = m.config.mixture;
    let mut g_local: [Vec<[f64; 4]>; SCALES] = std::array::from_fn(|_| Vec::with_capacity(n));
    let mut g_global = Vec::with_capacity(n);
    for (idx, &g_out) in g_fused.iter().enumerate() {
        let p123 = trace.partial[1].at_index(idx);
        let (g123, gg) = nig::mix_adjoint(&p123, &trace.global.at_index(idx), mode, g_out);
        let p12 = trace.partial[0].at_index(idx);
        let (g12, g3) = nig::mix_adjoint(&p12, &trace.local[2].at_index(idx), mode, g123);
        let (g1, g2) = nig::mix_adjoint(
            &trace.local[0].at_index(idx),
            &trace.local[1].at_index(idx),
            mode,
            g12,
        );
        g_local[0].push(g1);
        g_local[1].push(g2);
        g_local[2].push(g3);
        g_global.push(gg);
    }

    // Heads -> feature gradients -> attention branches.
    for k in 0..SCALES {
        let change = &trace.texture[k].change;
        let mut d_change = Tensor3::zeros(h, w, change.channels());
        head_backward(
            change,
            trace.t_norm,
            &trace.local_raw[k],
            &g_local[k],
            &m.local_heads[k],
            &mut grad.local_heads[k],
            &mut d_change,
        );
        features::ttcn_backward(i0, i1, &m.texture[k], &trace.texture[k], &d_change, &win, &mut grad.texture[k]);
    }
    let field = &trace.deformation.field;
    let mut d_field = Tensor3::zeros(h, w, 2);
    head_backward(
        field,
        trace.t_norm,
        &trace.global_raw,
        &g_global,
        &m.global_head,
        &mut grad.global_head,
        &mut d_field,
    );
    features::tdcn_backward(i0, i1, &m.deformation, &trace.deformation, &d_field, &win, &mut grad.deformation);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageTensor::from_rows(h, w, data, 60.0).unwrap()
    }

    #[test]
    fn time_spec_contract() {
        assert!(TimeSpec::new(2.0, 2.0, 3.0).is_err());
        assert!(TimeSpec::new(3.0, 2.0, 3.0).is_err());
        let interp = TimeSpec::new(0.0, 2.0, 1.0).unwrap();
        assert_eq!(interp.normalized(), -0.5);
        assert!(!interp.is_extrapolation());
        let extrap = TimeSpec::new(0.0, 2.0, 5.0).unwrap();
        assert_eq!(extrap.normalized(), 1.5);
        assert!(extrap.is_extrapolation());
    }

    #[test]
    fn zero_head_gives_softplus_of_zero() {
        let feat = Tensor3::filled(4, 4, 3, 0.7);
        let t = TimeSpec::new(0.0, 1.0, 2.0).unwrap();
        let maps = param_head(&feat, &t, &ParamHead::zeros(3)).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for idx in 0..16 {
            let p = maps.at_index(idx);
            assert_eq!(p.delta(), 0.0);
            assert!((p.gamma() - (ln2 + 1e-6)).abs() < 1e-15);
            assert!((p.alpha() - (1.0 + ln2 + 1e-6)).abs() < 1e-15);
            assert!((p.beta() - (ln2 + 1e-6)).abs() < 1e-15);
        }
        assert!((maps.gamma.data()[0] - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn head_time_dependence_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = ParamHead::init(&mut rng, 2);
        let feat = Tensor3::filled(4, 4, 2, 0.3);
        let t_a = TimeSpec::new(0.0, 1.0, 1.5).unwrap();
        let t_b = TimeSpec::new(0.0, 1.0, 3.0).unwrap();
        assert_ne!(param_head(&feat, &t_a, &head).unwrap(), param_head(&feat, &t_b, &head).unwrap());
        head.weight[8..12].fill(0.0);
        assert_eq!(param_head(&feat, &t_a, &head).unwrap(), param_head(&feat, &t_b, &head).unwrap());
        assert!(param_head(&Tensor3::zeros(4, 4, 3), &t_a, &head).is_err());
    }

    #[test]
    fn extreme_head_outputs_respect_floors() {
        let mut head = ParamHead::zeros(1);
        head.bias = vec![0.0, -800.0, -800.0, -800.0];
        let t = TimeSpec::new(0.0, 1.0, 2.0).unwrap();
        let maps = param_head(&Tensor3::zeros(2, 2, 1), &t, &head).unwrap();
        assert!(maps.is_valid());
        assert!(maps.gamma.data()[0] >= PARAM_FLOOR);
        assert!(maps.alpha.data()[0] >= 1.0 + PARAM_FLOOR);
    }

    #[test]
    fn zero_decoder_outputs_half() {
        let cfg = ModelConfig::default();
        let m = ModelParams::zeros(cfg);
        let d = Tensor3::filled(8, 8, 1, 0.3);
        let img = decode(&d, &d, &d, &m.decoder, 60.0).unwrap();
        assert_eq!(img.pixels().dims(), (8, 8, 1));
        assert!(img.pixels().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn random_decoders_stay_in_unit_interval() {
        let d = Tensor3::from_fn(10, 10, 1, |i, j, _| (i as f64 - j as f64) * 3.0);
        for seed in 0..100 {
            let m = ModelParams::init(ModelConfig::default(), seed).unwrap();
            let img = decode(&d, &d, &d, &m.decoder, 1.0).unwrap();
            assert!(img.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn forward_invariants_on_random_init() {
        let m = ModelParams::init(ModelConfig::default(), 5).unwrap();
        let (i0, i1) = (image(32, 32, 1), image(32, 32, 2));
        let t = TimeSpec::new(60.0, 62.0, 65.0).unwrap();
        let (pred, trace) = forward_traced(&i0, &i1, &t, &m).unwrap();
        assert_eq!(pred.image.pixels().dims(), (32, 32, 1));
        for idx in 0..32 * 32 {
            let srcs = [
                trace.local[0].at_index(idx),
                trace.local[1].at_index(idx),
                trace.local[2].at_index(idx),
                trace.global.at_index(idx),
            ];
            let f = pred.fused.at_index(idx);
            let g_sum: f64 = srcs.iter().map(|p| p.gamma()).sum();
            let a_sum: f64 = srcs.iter().map(|p| p.alpha()).sum();
            assert!((f.gamma() - g_sum).abs() <= 1e-12 * g_sum);
            assert!((f.alpha() - (a_sum + 1.5)).abs() <= 1e-12 * a_sum);
            assert_eq!(pred.d_map.data()[idx], f.delta());
            assert!(pred.al_map.data()[idx] >= 0.0 && pred.ep_map.data()[idx] >= 0.0);
        }
        assert_eq!(pred, tnig_forward(&i0, &i1, &t, &m).unwrap());
    }

    #[test]
    fn flatten_round_trip() {
        let m = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let flat = m.flatten();
        let mut z = ModelParams::zeros(m.config);
        z.assign_flat(&flat).unwrap();
        assert_eq!(z, m);
        assert!(z.assign_flat(&flat[1..]).is_err());
    }
}
