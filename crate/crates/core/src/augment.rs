//! Weak (flip / 90° rotation) and strong (intensity jitter, blur, CutMix)
//! disturbances. Every disturbance is sampled into a plain record first and
//! applied second, so images, label maps and pseudo-labels can be moved
//! through exactly the same transform and the records can be replayed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::losses::PseudoLabel;

/// Seeded random stream. The same `(seed, stream, position)` always yields
/// the same draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Restores a stream at a recorded position.
    pub fn at(seed: u64, stream: u64, position: u128) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.rng.set_word_pos(position);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// An independent child stream keyed by `tag`.
    pub fn fork(&self, tag: u64) -> RngStream {
        RngStream::with_stream(splitmix64(self.seed ^ splitmix64(self.stream)), tag)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Flips followed by `k_rot90` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub k_rot90: u8,
}

impl WeakTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_record_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

pub fn sample_weak(rng: &mut RngStream) -> WeakTransform {
    WeakTransform {
        hflip: rng.gen_bool(0.5),
        vflip: rng.gen_bool(0.5),
        k_rot90: rng.gen_range(0..4),
    }
}

/// Applies a weak transform to any row-major grid. Returns the new
/// `(height, width, data)`; odd rotations swap the sides.
pub fn apply_weak_grid<E: Copy>(t: &WeakTransform, h: usize, w: usize, data: &[E]) -> (usize, usize, Vec<E>) {
    assert_eq!(data.len(), h * w, "grid size mismatch");
    let mut cur = data.to_vec();
    if t.hflip {
        for row in cur.chunks_mut(w) {
            row.reverse();
        }
    }
    if t.vflip {
        let src = cur.clone();
        for y in 0..h {
            cur[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
        }
    }
    let (mut ch, mut cw) = (h, w);
    for _ in 0..(t.k_rot90 % 4) {
        // counter-clockwise: out[i][j] = in[j][cw - 1 - i], out is cw × ch
        let mut out = Vec::with_capacity(cur.len());
        for i in 0..cw {
            for j in 0..ch {
                out.push(cur[j * cw + (cw - 1 - i)]);
            }
        }
        cur = out;
        std::mem::swap(&mut ch, &mut cw);
    }
    (ch, cw, cur)
}

pub fn apply_weak_image(t: &WeakTransform, image: &Image) -> Image {
    let (h, w, px) = apply_weak_grid(t, image.height(), image.width(), image.pixels());
    Image::from_parts_unchecked(h, w, px)
}

pub fn apply_weak_labels(t: &WeakTransform, labels: &LabelMap) -> LabelMap {
    let (h, w, l) = apply_weak_grid(t, labels.height(), labels.width(), labels.labels());
    LabelMap::new(h, w, l).expect("weak transform preserves size")
}

/// Brightness shift, contrast scale about the image mean, then gamma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub gamma: f32,
}

/// Replace `box` of the image with the same box of batch sample `partner`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutMix {
    pub partner: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutMix {
    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > h || self.left + self.width > w {
            return Err(Error::validation(format!(
                "cutmix box (top {}, left {}, {}x{}) does not fit a {h}x{w} image",
                self.top, self.left, self.height, self.width
            )));
        }
        Ok(())
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// One strong disturbance. `None` means the stage was not drawn. The
/// grayscale stage is recorded but is the identity on single-channel data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrongTransform {
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f32>,
    pub cutmix: Option<CutMix>,
}

impl StrongTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_record_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

/// Stage probabilities and parameter ranges for strong disturbances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongConfig {
    pub p_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub p_cutmix: f64,
    pub brightness: f32,
    pub contrast: [f32; 2],
    pub gamma: [f32; 2],
    pub blur_sigma: [f32; 2],
    /// CutMix box area as a fraction of the image.
    pub cutmix_area: [f64; 2],
    /// CutMix box aspect ratio range (height / width), sampled log-uniformly.
    pub cutmix_ratio: [f64; 2],
}

impl Default for StrongConfig {
    fn default() -> Self {
        StrongConfig {
            p_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur: 0.2,
            p_cutmix: 0.5,
            brightness: 0.2,
            contrast: [0.8, 1.2],
            gamma: [0.7, 1.3],
            blur_sigma: [0.1, 1.5],
            cutmix_area: [0.02, 0.4],
            cutmix_ratio: [0.3, 1.0 / 0.3],
        }
    }
}

impl StrongConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_jitter", self.p_jitter),
            ("p_grayscale", self.p_grayscale),
            ("p_blur", self.p_blur),
            ("p_cutmix", self.p_cutmix),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("semi.{name} = {p} is not a probability")));
            }
        }
        let ok = (0.0..=0.2).contains(&self.brightness)
            && 0.8 <= self.contrast[0]
            && self.contrast[0] <= self.contrast[1]
            && self.contrast[1] <= 1.2
            && 0.7 <= self.gamma[0]
            && self.gamma[0] <= self.gamma[1]
            && self.gamma[1] <= 1.3
            && 0.0 <= self.blur_sigma[0]
            && self.blur_sigma[0] <= self.blur_sigma[1]
            && self.blur_sigma[1] <= 1.5
            && 0.0 < self.cutmix_area[0]
            && self.cutmix_area[0] <= self.cutmix_area[1]
            && self.cutmix_area[1] <= 1.0
            && 0.0 < self.cutmix_ratio[0]
            && self.cutmix_ratio[0] <= self.cutmix_ratio[1];
        if !ok {
            return Err(Error::validation(
                "strong disturbance ranges must satisfy brightness<=0.2, contrast in [0.8,1.2], gamma in [0.7,1.3], blur in [0,1.5]",
            ));
        }
        Ok(())
    }
}

fn range_f32(rng: &mut RngStream, r: [f32; 2]) -> f32 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Draws one strong transform per batch sample. CutMix partners are other
/// samples of the same batch (the sample itself when the batch has one).
pub fn sample_strong(rng: &mut RngStream, batch_size: usize, h: usize, w: usize, cfg: &StrongConfig) -> Vec<StrongTransform> {
    (0..batch_size)
        .map(|i| {
            let jitter = rng.gen_bool(cfg.p_jitter).then(|| Jitter {
                brightness: if cfg.brightness > 0.0 {
                    rng.gen_range(-cfg.brightness..cfg.brightness)
                } else {
                    0.0
                },
                contrast: range_f32(rng, cfg.contrast),
                gamma: range_f32(rng, cfg.gamma),
            });
            let grayscale = rng.gen_bool(cfg.p_grayscale);
            let blur_sigma = rng.gen_bool(cfg.p_blur).then(|| range_f32(rng, cfg.blur_sigma));
            let cutmix = rng.gen_bool(cfg.p_cutmix).then(|| {
                let partner = if batch_size > 1 {
                    (i + rng.gen_range(1..batch_size)) % batch_size
                } else {
                    i
                };
                let area = rng.gen_range(cfg.cutmix_area[0]..=cfg.cutmix_area[1]) * (h * w) as f64;
                let ratio = rng
                    .gen_range(cfg.cutmix_ratio[0].ln()..=cfg.cutmix_ratio[1].ln())
                    .exp();
                let bh = ((area * ratio).sqrt().round() as usize).clamp(1, h);
                let bw = ((area / ratio).sqrt().round() as usize).clamp(1, w);
                CutMix {
                    partner,
                    top: rng.gen_range(0..=h - bh),
                    left: rng.gen_range(0..=w - bw),
                    height: bh,
                    width: bw,
                }
            });
            StrongTransform {
                jitter,
                grayscale,
                blur_sigma,
                cutmix,
            }
        })
        .collect()
}

fn apply_jitter(j: &Jitter, px: &mut [f32]) {
    for v in px.iter_mut() {
        *v = (*v + j.brightness).clamp(0.0, 1.0);
    }
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
    let mean = mean as f32;
    for v in px.iter_mut() {
        *v = ((*v - mean) * j.contrast + mean).clamp(0.0, 1.0);
    }
    if j.gamma != 1.0 {
        for v in px.iter_mut() {
            *v = v.powf(j.gamma).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with edge replication.
fn apply_blur(sigma: f32, h: usize, w: usize, px: &mut [f32]) {
    if sigma < 1e-3 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; px.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * px[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            px[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
}

/// Intensity stages only (jitter, grayscale, blur), in that order.
pub fn apply_intensity(t: &StrongTransform, image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut px = image.pixels().to_vec();
    if let Some(j) = &t.jitter {
        apply_jitter(j, &mut px);
    }
    if let Some(sigma) = t.blur_sigma {
        apply_blur(sigma, h, w, &mut px);
    }
    Image::from_parts_unchecked(h, w, px)
}

/// Applies every stage of `t` left to right. When the record carries a
/// CutMix box, `partner` supplies the pasted region and must have the same
/// size as `image`.
pub fn apply_strong(t: &StrongTransform, image: &Image, partner: Option<&Image>) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let out = apply_intensity(t, image);
    let Some(cm) = &t.cutmix else {
        return Ok(out);
    };
    cm.check(h, w)?;
    let partner = partner.ok_or_else(|| Error::validation("cutmix record needs a partner image"))?;
    if partner.height() != h || partner.width() != w {
        return Err(Error::shape("cutmix partner differs in size"));
    }
    let mut px = out.pixels().to_vec();
    for y in cm.top..cm.top + cm.height {
        px[y * w + cm.left..y * w + cm.left + cm.width]
            .copy_from_slice(&partner.pixels()[y * w + cm.left..y * w + cm.left + cm.width]);
    }
    Ok(Image::from_parts_unchecked(h, w, px))
}

/// Applies per-sample strong transforms to a batch. CutMix pastes from the
/// partner's intensity-disturbed view.
pub fn apply_strong_batch(ts: &[StrongTransform], images: &[Image]) -> Result<Vec<Image>> {
    if ts.len() != images.len() {
        return Err(Error::validation("one strong transform per image is required"));
    }
    let stage1: Vec<Image> = ts.iter().zip(images).map(|(t, im)| apply_intensity(t, im)).collect();
    ts.iter()
        .enumerate()
        .map(|(i, t)| match &t.cutmix {
            None => Ok(stage1[i].clone()),
            Some(cm) => {
                let partner = stage1
                    .get(cm.partner)
                    .ok_or_else(|| Error::validation(format!("cutmix partner {} outside batch", cm.partner)))?;
                let only_mix = StrongTransform {
                    cutmix: Some(*cm),
                    ..StrongTransform::identity()
                };
                apply_strong(&only_mix, &stage1[i], Some(partner))
            }
        })
        .collect()
}

/// Moves a pseudo-label through the spatial part of a strong transform:
/// intensity stages leave it alone, CutMix pastes the partner's labels and
/// keep-mask inside the box.
pub fn transport_pseudo_label(y: &PseudoLabel, t: &StrongTransform, partner: Option<&PseudoLabel>) -> Result<PseudoLabel> {
    let Some(cm) = &t.cutmix else {
        return Ok(y.clone());
    };
    let (h, w) = (y.labels.height(), y.labels.width());
    cm.check(h, w)?;
    let p = partner.ok_or_else(|| Error::validation("cutmix record needs a partner pseudo-label"))?;
    if p.labels.height() != h || p.labels.width() != w {
        return Err(Error::shape("partner pseudo-label differs in size"));
    }
    let mut out = y.clone();
    for yy in cm.top..cm.top + cm.height {
        for xx in cm.left..cm.left + cm.width {
            let i = yy * w + xx;
            out.labels.labels_mut()[i] = p.labels.labels()[i];
            out.keep[i] = p.keep[i];
        }
    }
    debug_assert!((0..h * w).all(|i| cm.contains(i / w, i % w) || out.keep[i] == y.keep[i]));
    Ok(out)
}

/// Transports a whole batch of pseudo-labels.
pub fn transport_batch(ys: &[PseudoLabel], ts: &[StrongTransform]) -> Result<Vec<PseudoLabel>> {
    if ys.len() != ts.len() {
        return Err(Error::validation("one strong transform per pseudo-label is required"));
    }
    ys.iter()
        .zip(ts)
        .map(|(y, t)| {
            let partner = t.cutmix.map(|cm| &ys[cm.partner]);
            transport_pseudo_label(y, t, partner)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| (i as f32) / (h * w) as f32).collect()).unwrap()
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = ramp(8, 8);
        let t = WeakTransform { hflip: true, vflip: false, k_rot90: 0 };
        assert_eq!(apply_weak_image(&t, &apply_weak_image(&t, &img)), img);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = ramp(8, 8);
        let t = WeakTransform { hflip: false, vflip: false, k_rot90: 1 };
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = apply_weak_image(&t, &cur);
        }
        assert_eq!(cur, img);
        assert_ne!(apply_weak_image(&t, &img), img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // [[0,1],[2,3]] -> [[1,3],[0,2]]
        let t = WeakTransform { hflip: false, vflip: false, k_rot90: 1 };
        let (h, w, d) = apply_weak_grid(&t, 2, 2, &[0, 1, 2, 3]);
        assert_eq!((h, w, d), (2, 2, vec![1, 3, 0, 2]));
        let (h, w, _) = apply_weak_grid(&t, 2, 3, &[0; 6]);
        assert_eq!((h, w), (3, 2));
    }

    #[test]
    fn identity_strong_is_identity() {
        let img = ramp(16, 16);
        assert_eq!(apply_strong(&StrongTransform::identity(), &img, None).unwrap(), img);
    }

    #[test]
    fn brightness_saturates_at_one() {
        let img = Image::filled(8, 8, 0.95).unwrap();
        let t = StrongTransform {
            jitter: Some(Jitter { brightness: 0.1, contrast: 1.0, gamma: 1.0 }),
            ..StrongTransform::identity()
        };
        let out = apply_strong(&t, &img, None).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cutmix_out_of_bounds_is_rejected() {
        let img = ramp(16, 16);
        let t = StrongTransform {
            cutmix: Some(CutMix { partner: 0, top: 10, left: 0, height: 8, width: 4 }),
            ..StrongTransform::identity()
        };
        assert!(matches!(apply_strong(&t, &img, Some(&img)), Err(Error::Validation(_))));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(12, 12, 0.4).unwrap();
        let t = StrongTransform { blur_sigma: Some(1.5), ..StrongTransform::identity() };
        let out = apply_strong(&t, &img, None).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn sampled_boxes_fit_and_partners_differ() {
        let mut rng = RngStream::new(3);
        let cfg = StrongConfig { p_cutmix: 1.0, ..StrongConfig::default() };
        for _ in 0..200 {
            for (i, t) in sample_strong(&mut rng, 4, 24, 24, &cfg).iter().enumerate() {
                let cm = t.cutmix.unwrap();
                cm.check(24, 24).unwrap();
                assert_ne!(cm.partner, i);
            }
        }
    }

    #[test]
    fn rng_stream_position_replays() {
        let mut a = RngStream::with_stream(5, 2);
        let _ = a.next_u64();
        let pos = a.position();
        let x = a.next_u64();
        let mut b = RngStream::at(5, 2, pos);
        assert_eq!(b.next_u64(), x);
    }

    #[test]
    fn records_serialize_to_one_line() {
        let t = StrongTransform {
            jitter: Some(Jitter { brightness: 0.1, contrast: 1.1, gamma: 0.9 }),
            grayscale: true,
            blur_sigma: None,
            cutmix: Some(CutMix { partner: 1, top: 2, left: 3, height: 4, width: 5 }),
        };
        let line = t.to_record_line();
        assert!(!line.contains('\n'));
        let back: StrongTransform = serde_json::from_str(&line).unwrap();
        assert_eq!(back, t);
    }
}
