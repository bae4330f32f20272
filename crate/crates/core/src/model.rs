//! Pyramid-input encoder–decoder.
//!
//! The input is average-pooled into `D` scales. One shared stem convolution
//! is applied to every scale and its output is added to the pooled encoder
//! features of the matching resolution, so each encoder level sees both the
//! local (full resolution) and the global (coarse) context. A bottleneck at
//! `S / 2^D` produces the encoder features; the decoder upsamples and fuses
//! skip connections back to full resolution and a 1×1 head gives per-pixel
//! class logits, followed by softmax.
//!
//! ```text
//! x_d ──stem──relu──(+ pool e_{d-1})──conv──relu──▶ e_d ─────────────┐ skip
//!                                                   │pool            │
//!                                   bottleneck ◀────┘                ▼
//!                  f ──up──concat(e_{D-1})──conv──relu── … ──▶ g_0 ──head──softmax
//! ```
//!
//! All parameters live in one flat vector; [`ParamLayout`] names the slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::RngStream;
use crate::datasets::{Dataset, Image, LabelMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Where feature-level dropout is applied in the perturbed stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbSite {
    /// The bottleneck output only.
    #[default]
    Deepest,
    /// The bottleneck output and every skip connection.
    AllSkips,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of input scales (full, 1/2, 1/4, ...).
    pub pyramid_depth: usize,
    pub base_width: usize,
    /// Softmax width: background plus every foreground class.
    pub num_classes: usize,
    /// Network input side length.
    pub input_size: usize,
    pub feature_dropout: f64,
    pub perturb_site: PerturbSite,
    /// Optional pre-processing: resize to this side, then center-crop to
    /// `input_size`.
    pub resize_to: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pyramid_depth: 3,
            base_width: 16,
            num_classes: 4,
            input_size: 96,
            feature_dropout: 0.5,
            perturb_site: PerturbSite::Deepest,
            resize_to: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_depth < 1 {
            return Err(Error::validation("model.pyramid_depth must be at least 1"));
        }
        if self.base_width < 1 {
            return Err(Error::validation("model.base_width must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("model.num_classes must be at least 2"));
        }
        let unit = 1usize << self.pyramid_depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return Err(Error::validation(format!(
                "model.input_size {} must be a positive multiple of 2^pyramid_depth = {unit}",
                self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.feature_dropout) {
            return Err(Error::validation(format!(
                "model.feature_dropout {} must lie in [0, 1)",
                self.feature_dropout
            )));
        }
        if let Some(r) = self.resize_to {
            if r < self.input_size {
                return Err(Error::validation("model.resize_to must be at least input_size"));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `10C + (D+1)(9C² + C) + D(18C² + C) + (C+1)(K+1)`.
    pub fn param_count(&self) -> usize {
        let c = self.base_width;
        let d = self.pyramid_depth;
        let k1 = self.num_classes;
        10 * c + (d + 1) * (9 * c * c + c) + d * (18 * c * c + c) + (c + 1) * k1
    }

    /// Side of the bottleneck features.
    pub fn feature_side(&self) -> usize {
        self.input_size >> self.pyramid_depth
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayer {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }
}

/// Named slices of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    layers: Vec<ConvLayer>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let c = cfg.base_width;
        let d = cfg.pyramid_depth;
        let mut specs = vec![("stem".to_owned(), 1, c, 3)];
        specs.extend((0..d).map(|i| (format!("enc{i}"), c, c, 3)));
        specs.push(("bottleneck".to_owned(), c, c, 3));
        specs.extend((0..d).map(|i| (format!("dec{i}"), 2 * c, c, 3)));
        specs.push(("head".to_owned(), c, cfg.num_classes, 1));
        let mut offset = 0;
        let layers = specs
            .into_iter()
            .map(|(name, in_ch, out_ch, kernel)| {
                let weight_offset = offset;
                let bias_offset = weight_offset + out_ch * in_ch * kernel * kernel;
                offset = bias_offset + out_ch;
                ConvLayer {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    weight_offset,
                    bias_offset,
                }
            })
            .collect();
        ParamLayout { layers, total: offset }
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `(name, offset, len)` for every weight and bias array.
    pub fn arrays(&self) -> Vec<(String, usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight_offset, l.weight_len()),
                    (format!("{}.bias", l.name), l.bias_offset, l.out_ch),
                ]
            })
            .collect()
    }

    /// Layer that owns flat index `i`.
    pub fn layer_of(&self, i: usize) -> &ConvLayer {
        self.layers
            .iter()
            .find(|l| i >= l.weight_offset && i < l.bias_offset + l.out_ch)
            .expect("index inside the layout")
    }
}

/// Per-pixel class probabilities for a batch, `N × (K+1) × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        if probs.channels() < 2 {
            return Err(Error::shape("a prediction needs at least two classes"));
        }
        Ok(Prediction { probs })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor<T> {
        self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.batch()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.channels()
    }

    /// Hard labels, lowest class index on ties.
    pub fn argmax(&self) -> Vec<LabelMap> {
        let [n, k1, h, w] = self.probs.shape();
        let hw = h * w;
        (0..n)
            .map(|s| {
                let p = self.probs.sample(s);
                let labels = (0..hw)
                    .map(|i| {
                        let mut best = 0;
                        for c in 1..k1 {
                            if p[c * hw + i] > p[best * hw + i] {
                                best = c;
                            }
                        }
                        best as u8
                    })
                    .collect();
                LabelMap::new(h, w, labels).expect("sized from the tensor")
            })
            .collect()
    }

    /// Largest deviation of a pixel's probability sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let [n, k1, h, w] = self.probs.shape();
        let hw = h * w;
        let mut worst = 0f64;
        for s in 0..n {
            let p = self.probs.sample(s);
            for i in 0..hw {
                let sum: f64 = (0..k1).map(|c| p[c * hw + i].as_f64()).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }
}

/// Bottleneck output of the shared encoder, `N × C × S/2^D × S/2^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<T>(pub Tensor<T>);

/// Channel dropout scales for the feature-perturbed stream: one entry per
/// `(sample, channel)`, either 0 or `1/(1 − rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask<T> {
    pub deepest: Vec<T>,
    /// Per decoder level, present for [`PerturbSite::AllSkips`].
    pub skips: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> FeatureMask<T> {
    fn draw(rng: &mut RngStream, len: usize, rate: f64) -> Vec<T> {
        let keep = T::of(1.0 / (1.0 - rate));
        (0..len)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect()
    }

    pub fn sample(rng: &mut RngStream, batch: usize, cfg: &ModelConfig) -> Self {
        let len = batch * cfg.base_width;
        let deepest = Self::draw(rng, len, cfg.feature_dropout);
        let skips = (cfg.perturb_site == PerturbSite::AllSkips)
            .then(|| (0..cfg.pyramid_depth).map(|_| Self::draw(rng, len, cfg.feature_dropout)).collect());
        FeatureMask { deepest, skips }
    }

    /// Fraction of zeroed bottleneck channels.
    pub fn dropped_fraction(&self) -> f64 {
        self.deepest.iter().filter(|v| **v == T::zero()).count() as f64 / self.deepest.len() as f64
    }
}

/// Activations kept from a training forward pass for the backward pass.
pub struct ForwardCache<T> {
    pyramid: Vec<Tensor<T>>,
    stem_out: Vec<Tensor<T>>,
    enc_in: Vec<Tensor<T>>,
    enc_out: Vec<Tensor<T>>,
    bott_in: Tensor<T>,
    bott_out: Tensor<T>,
    features: Tensor<T>,
    mask: Option<FeatureMask<T>>,
    dec_in: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
    prediction: Prediction<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn prediction(&self) -> &Prediction<T> {
        &self.prediction
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

const STEM: usize = 0;

impl<T: Scalar> Model<T> {
    /// He-initialized weights (fan-in scaling, drawn in `f64` from
    /// `cfg.init_seed`), zero biases.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::for_config(&cfg);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        for l in layout.layers() {
            let fan_in = (l.in_ch * l.kernel * l.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for p in &mut params[l.weight_offset..l.weight_offset + l.weight_len()] {
                *p = T::of(normal.sample(&mut rng));
            }
        }
        Ok(Model { cfg, layout, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::for_config(&cfg);
        if params.len() != layout.total() {
            return Err(Error::shape(format!(
                "model needs {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Model { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn depth(&self) -> usize {
        self.cfg.pyramid_depth
    }

    fn enc(&self, d: usize) -> usize {
        1 + d
    }

    fn bottleneck(&self) -> usize {
        1 + self.depth()
    }

    fn dec(&self, d: usize) -> usize {
        2 + self.depth() + d
    }

    fn head(&self) -> usize {
        2 + 2 * self.depth()
    }

    fn conv(&self, layer: usize, x: &Tensor<T>) -> Tensor<T> {
        let l = &self.layout.layers[layer];
        tensor::conv2d(
            x,
            &self.params[l.weight_offset..l.bias_offset],
            &self.params[l.bias_offset..l.bias_offset + l.out_ch],
            l.out_ch,
            l.kernel,
        )
    }

    fn conv_relu(&self, layer: usize, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.conv(layer, x);
        tensor::relu_inplace(&mut y);
        y
    }

    fn conv_backward(&self, layer: usize, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [T], need_dx: bool) -> Option<Tensor<T>> {
        let l = &self.layout.layers[layer];
        let (gw, gb) = grads[l.weight_offset..l.bias_offset + l.out_ch].split_at_mut(l.weight_len());
        tensor::conv2d_backward(x, dy, &self.params[l.weight_offset..l.bias_offset], l.kernel, gw, gb, need_dx)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let s = self.cfg.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(format!(
                "network expects 1x{s}x{s} inputs (input_size = {s}), got {c}x{h}x{w}"
            )));
        }
        if n == 0 {
            return Err(Error::shape("empty input batch"));
        }
        if !x.is_finite() {
            return Err(Error::validation("input contains non-finite values"));
        }
        Ok(())
    }

    /// Full forward pass keeping every activation the backward pass needs.
    pub fn forward_cached(&self, x: &Tensor<T>, mask: Option<FeatureMask<T>>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let depth = self.depth();
        let c = self.cfg.base_width;
        if let Some(m) = &mask {
            let ok = m.deepest.len() == x.batch() * c
                && m.skips.as_ref().is_none_or(|s| s.len() == depth && s.iter().all(|v| v.len() == x.batch() * c));
            if !ok {
                return Err(Error::shape("feature mask does not match the batch"));
            }
        }

        let mut pyramid = vec![x.clone()];
        for d in 1..depth {
            let next = tensor::avg_pool2(&pyramid[d - 1]);
            pyramid.push(next);
        }
        let mut stem_out = Vec::with_capacity(depth);
        let mut enc_in = Vec::with_capacity(depth);
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(depth);
        for d in 0..depth {
            let s = self.conv_relu(STEM, &pyramid[d]);
            let mut h = s.clone();
            if d > 0 {
                h.add_assign(&tensor::avg_pool2(&enc_out[d - 1]));
            }
            let e = self.conv_relu(self.enc(d), &h);
            stem_out.push(s);
            enc_in.push(h);
            enc_out.push(e);
        }
        let bott_in = tensor::avg_pool2(&enc_out[depth - 1]);
        let bott_out = self.conv_relu(self.bottleneck(), &bott_in);
        let features = match &mask {
            Some(m) => tensor::scale_channels(&bott_out, &m.deepest),
            None => bott_out.clone(),
        };

        let mut dec_in = vec![Tensor::zeros([0, 0, 0, 0]); depth];
        let mut dec_out = vec![Tensor::zeros([0, 0, 0, 0]); depth];
        for d in (0..depth).rev() {
            let prev = if d + 1 == depth { &features } else { &dec_out[d + 1] };
            let up = tensor::upsample2(prev);
            let skip = match mask.as_ref().and_then(|m| m.skips.as_ref()) {
                Some(sk) => tensor::scale_channels(&enc_out[d], &sk[d]),
                None => enc_out[d].clone(),
            };
            let cat = tensor::concat_channels(&up, &skip);
            dec_out[d] = self.conv_relu(self.dec(d), &cat);
            dec_in[d] = cat;
        }
        let logits = self.conv(self.head(), &dec_out[0]);
        let prediction = Prediction::new(tensor::softmax_channels(&logits))?;
        Ok(ForwardCache {
            pyramid,
            stem_out,
            enc_in,
            enc_out,
            bott_in,
            bott_out,
            features,
            mask,
            dec_in,
            dec_out,
            prediction,
        })
    }

    /// Evaluation forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Prediction<T>, EncoderFeatures<T>)> {
        let cache = self.forward_cached(x, None)?;
        Ok((cache.prediction, EncoderFeatures(cache.features)))
    }

    /// Forward pass with channel dropout at `rate` on the encoder features.
    /// A zero rate skips the mask entirely and equals [`forward`](Self::forward).
    pub fn forward_feature_perturbed(&self, x: &Tensor<T>, rate: f64, rng: &mut RngStream) -> Result<(Prediction<T>, Option<FeatureMask<T>>)> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!("feature dropout rate {rate} must lie in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok((self.forward(x)?.0, None));
        }
        let cfg = ModelConfig {
            feature_dropout: rate,
            ..self.cfg.clone()
        };
        let mask = FeatureMask::sample(rng, x.batch(), &cfg);
        let cache = self.forward_cached(x, Some(mask))?;
        Ok((cache.prediction, cache.mask))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂probs`.
    pub fn backward(&self, cache: &ForwardCache<T>, dprobs: &Tensor<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let depth = self.depth();
        let c = self.cfg.base_width;
        let dlogits = tensor::softmax_backward(cache.prediction.probs(), dprobs);
        let mut dg = self
            .conv_backward(self.head(), &cache.dec_out[0], &dlogits, grads, true)
            .expect("input grad requested");

        let mut denc: Vec<Option<Tensor<T>>> = vec![None; depth];
        let mut dfeatures = None;
        for d in 0..depth {
            tensor::relu_backward_inplace(&cache.dec_out[d], &mut dg);
            let dcat = self
                .conv_backward(self.dec(d), &cache.dec_in[d], &dg, grads, true)
                .expect("input grad requested");
            let (dup, mut dskip) = tensor::split_channels(&dcat, c);
            if let Some(sk) = cache.mask.as_ref().and_then(|m| m.skips.as_ref()) {
                dskip = tensor::scale_channels(&dskip, &sk[d]);
            }
            denc[d] = Some(dskip);
            let dprev = tensor::upsample2_backward(&dup);
            if d + 1 == depth {
                dfeatures = Some(dprev);
            } else {
                dg = dprev;
            }
        }

        let mut dbott = dfeatures.expect("depth >= 1");
        if let Some(m) = &cache.mask {
            dbott = tensor::scale_channels(&dbott, &m.deepest);
        }
        tensor::relu_backward_inplace(&cache.bott_out, &mut dbott);
        let dbin = self
            .conv_backward(self.bottleneck(), &cache.bott_in, &dbott, grads, true)
            .expect("input grad requested");
        let mut carry = tensor::avg_pool2_backward(&dbin);

        for d in (0..depth).rev() {
            let mut de = denc[d].take().expect("filled above");
            de.add_assign(&carry);
            tensor::relu_backward_inplace(&cache.enc_out[d], &mut de);
            let dh = self
                .conv_backward(self.enc(d), &cache.enc_in[d], &de, grads, true)
                .expect("input grad requested");
            if d > 0 {
                carry = tensor::avg_pool2_backward(&dh);
            }
            let mut ds = dh;
            tensor::relu_backward_inplace(&cache.stem_out[d], &mut ds);
            self.conv_backward(STEM, &cache.pyramid[d], &ds, grads, false);
        }
    }
}

/// Stacks equally sized images into a `N×1×S×S` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[Image], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for (i, img) in images.iter().enumerate() {
        if img.height() != side || img.width() != side {
            return Err(Error::shape(format!(
                "image {i} is {}x{}, the network expects {side}x{side}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.pixels().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec([images.len(), 1, side, side], data)
}

/// Average-pooled copies of `image`: scale `d` has side `S / 2^d`, scale 0
/// is the input itself.
pub fn build_pyramid(image: &Image, depth: usize) -> Result<Vec<Image>> {
    if depth == 0 {
        return Err(Error::validation("pyramid depth must be at least 1"));
    }
    let unit = 1usize << (depth - 1);
    if !image.height().is_multiple_of(unit) || !image.width().is_multiple_of(unit) {
        return Err(Error::shape(format!(
            "image {}x{} is not divisible by 2^(depth-1) = {unit}",
            image.height(),
            image.width()
        )));
    }
    let mut out = vec![image.clone()];
    for _ in 1..depth {
        let prev = out.last().expect("non-empty");
        let t: Tensor<f64> = Tensor::from_vec(
            [1, 1, prev.height(), prev.width()],
            prev.pixels().iter().map(|&v| v as f64).collect(),
        )?;
        let p = tensor::avg_pool2(&t);
        out.push(Image::from_parts_unchecked(
            p.height(),
            p.width(),
            p.data().iter().map(|&v| v as f32).collect(),
        ));
    }
    Ok(out)
}

fn bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let v = (1.0 - ty) * ((1.0 - tx) * src[y0 * w + x0] as f64 + tx * src[y0 * w + x1] as f64)
                + ty * ((1.0 - tx) * src[y1 * w + x0] as f64 + tx * src[y1 * w + x1] as f64);
            out.push(v as f32);
        }
    }
    out
}

fn nearest<E: Copy>(src: &[E], h: usize, w: usize, oh: usize, ow: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = ((oy * h) / oh).min(h - 1);
        for ox in 0..ow {
            out.push(src[sy * w + ((ox * w) / ow).min(w - 1)]);
        }
    }
    out
}

fn center_crop<E: Copy>(src: &[E], side: usize, crop: usize) -> Vec<E> {
    let off = (side - crop) / 2;
    let mut out = Vec::with_capacity(crop * crop);
    for y in 0..crop {
        out.extend_from_slice(&src[(off + y) * side + off..(off + y) * side + off + crop]);
    }
    out
}

/// Resizes to `resize_to` (bilinear) and center-crops to `crop_to`.
pub fn preprocess_image(image: &Image, resize_to: usize, crop_to: usize) -> Result<Image> {
    if crop_to > resize_to {
        return Err(Error::validation("crop side exceeds resize side"));
    }
    let resized = bilinear(image.pixels(), image.height(), image.width(), resize_to, resize_to);
    Image::new(crop_to, crop_to, center_crop(&resized, resize_to, crop_to))
}

/// Label counterpart of [`preprocess_image`] (nearest neighbour).
pub fn preprocess_labels(labels: &LabelMap, resize_to: usize, crop_to: usize) -> Result<LabelMap> {
    if crop_to > resize_to {
        return Err(Error::validation("crop side exceeds resize side"));
    }
    let resized = nearest(labels.labels(), labels.height(), labels.width(), resize_to, resize_to);
    LabelMap::new(crop_to, crop_to, center_crop(&resized, resize_to, crop_to))
}

/// Applies the configured resize/crop to a whole dataset in place. A no-op
/// without `resize_to`.
pub fn preprocess_dataset(ds: &mut Dataset, cfg: &ModelConfig) -> Result<()> {
    if let Some(r) = cfg.resize_to {
        for img in &mut ds.images {
            *img = preprocess_image(img, r, cfg.input_size)?;
        }
        for lab in ds.labels.iter_mut().flatten() {
            *lab = preprocess_labels(lab, r, cfg.input_size)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(width: usize, k1: usize, s: usize) -> ModelConfig {
        ModelConfig {
            base_width: width,
            num_classes: k1,
            input_size: s,
            ..ModelConfig::default()
        }
    }

    fn noise(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([n, 1, s, s], (0..n * s * s).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_shape_and_normalization() {
        let m: Model<f32> = Model::new(tiny(4, 4, 96)).unwrap();
        let x = noise(2, 96, 1).cast::<f32>();
        let (p, f) = m.forward(&x).unwrap();
        assert_eq!(p.probs().shape(), [2, 4, 96, 96]);
        assert!(p.max_normalization_error() < 1e-5);
        assert!(p.probs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(f.0.shape(), [2, 4, 12, 12]);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let m: Model<f32> = Model::new(tiny(4, 3, 32)).unwrap();
        let one = noise(1, 32, 5).cast::<f32>();
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let x = Tensor::from_vec([2, 1, 32, 32], both).unwrap();
        let (p, _) = m.forward(&x).unwrap();
        assert_eq!(p.probs().sample(0), p.probs().sample(1));
    }

    #[test]
    fn wrong_input_size_names_expected_side() {
        let m: Model<f64> = Model::new(tiny(4, 3, 32)).unwrap();
        let msg = m.forward(&noise(1, 16, 0)).unwrap_err().to_string();
        assert!(msg.contains("32"), "{msg}");
    }

    #[test]
    fn param_count_formula_matches_layout() {
        for (w, d, k1) in [(4, 1, 2), (4, 3, 3), (16, 3, 4), (8, 2, 5)] {
            let cfg = ModelConfig {
                pyramid_depth: d,
                ..tiny(w, k1, 32)
            };
            let m: Model<f32> = Model::new(cfg.clone()).unwrap();
            assert_eq!(m.params().len(), cfg.param_count());
            let arrays: usize = m.layout().arrays().iter().map(|a| a.2).sum();
            assert_eq!(arrays, cfg.param_count());
        }
    }

    #[test]
    fn zero_rate_perturbation_is_plain_forward() {
        let m: Model<f32> = Model::new(tiny(4, 3, 32)).unwrap();
        let x = noise(2, 32, 2).cast::<f32>();
        let mut rng = RngStream::new(0);
        let (p0, mask) = m.forward_feature_perturbed(&x, 0.0, &mut rng).unwrap();
        assert!(mask.is_none());
        assert_eq!(p0, m.forward(&x).unwrap().0);
        assert!(m.forward_feature_perturbed(&x, 1.0, &mut rng).is_err());
        assert!(m.forward_feature_perturbed(&x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn pyramid_sides_and_constants() {
        let img = Image::filled(96, 96, 0.3).unwrap();
        let p = build_pyramid(&img, 3).unwrap();
        let sides: Vec<usize> = p.iter().map(|i| i.height()).collect();
        assert_eq!(sides, vec![96, 48, 24]);
        assert_eq!(p[0], img);
        for s in &p {
            assert!(s.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        }
        assert!(build_pyramid(&Image::filled(12, 12, 0.0).unwrap(), 4).is_err());
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let px = (0..16 * 16).map(|i| ((i / 16 + i % 16) % 2) as f32).collect();
        let img = Image::new(16, 16, px).unwrap();
        let p = build_pyramid(&img, 2).unwrap();
        assert!(p[1].pixels().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn resize_then_crop() {
        let img = Image::filled(32, 32, 0.7).unwrap();
        let out = preprocess_image(&img, 36, 32).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(out.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let lab = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        let l = preprocess_labels(&lab, 8, 8).unwrap();
        assert_eq!(l, lab);
    }
}
