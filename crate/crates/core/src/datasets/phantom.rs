//! Synthetic 2D phantoms: non-overlapping elliptical "organs" with
//! class-specific intensity and texture on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassRegistry, Image, LabelMap, MIN_SIDE};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 200;

/// Geometry and appearance of one organ class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    /// Semi-axis range in pixels; each axis is drawn independently.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Center range as fractions of (height, width).
    pub center_min: [f64; 2],
    pub center_max: [f64; 2],
    /// Per-image organ intensity is drawn from N(mean, std).
    pub intensity_mean: f64,
    pub intensity_std: f64,
    /// Probability that the organ appears in a given image.
    pub presence: f64,
    /// Amplitude of a one-pixel checker pattern inside the organ; 0 leaves
    /// it smooth. Unlike the mean intensity, the pattern survives
    /// brightness shifts and box mixing between images.
    #[serde(default)]
    pub texture: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// One entry per registry class, in registry order.
    pub classes: Vec<ClassShape>,
    pub background_mean: f64,
    pub background_std: f64,
    /// Amplitude of a smooth random intensity ripple over the whole image.
    #[serde(default)]
    pub ripple: f64,
    /// Per-pixel Gaussian noise.
    pub noise_std: f64,
    pub count: usize,
    pub seed: u64,
}

impl PhantomSpec {
    /// Liver/kidney/spleen-like defaults at the given side length.
    pub fn abdominal(side: usize, count: usize, seed: u64) -> Self {
        let s = side as f64;
        PhantomSpec {
            height: side,
            width: side,
            classes: vec![
                ClassShape {
                    radius_min: 0.16 * s,
                    radius_max: 0.24 * s,
                    center_min: [0.3, 0.25],
                    center_max: [0.55, 0.4],
                    intensity_mean: 0.55,
                    intensity_std: 0.06,
                    presence: 0.9,
                    texture: 0.0,
                },
                ClassShape {
                    radius_min: 0.06 * s,
                    radius_max: 0.1 * s,
                    center_min: [0.55, 0.55],
                    center_max: [0.8, 0.8],
                    intensity_mean: 0.7,
                    intensity_std: 0.06,
                    presence: 0.9,
                    texture: 0.0,
                },
                ClassShape {
                    radius_min: 0.08 * s,
                    radius_max: 0.13 * s,
                    center_min: [0.2, 0.6],
                    center_max: [0.45, 0.8],
                    intensity_mean: 0.45,
                    intensity_std: 0.06,
                    presence: 0.9,
                    texture: 0.08,
                },
            ],
            background_mean: 0.25,
            background_std: 0.04,
            ripple: 0.05,
            noise_std: 0.05,
            count,
            seed,
        }
    }

    pub fn validate(&self, registry: &ClassRegistry) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::validation(format!("phantom spec `{field}`: {why}")));
        if self.height < MIN_SIDE {
            return bad("height", "must be at least 8");
        }
        if self.width < MIN_SIDE {
            return bad("width", "must be at least 8");
        }
        if self.count == 0 {
            return bad("count", "must be at least 1");
        }
        if self.classes.len() != registry.len() {
            return bad("classes", "needs exactly one entry per registry class");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be finite and non-negative");
        }
        if !(self.background_std >= 0.0 && self.background_std.is_finite()) {
            return bad("background_std", "must be finite and non-negative");
        }
        if !(self.ripple >= 0.0 && self.ripple.is_finite()) {
            return bad("ripple", "must be finite and non-negative");
        }
        if !self.background_mean.is_finite() {
            return bad("background_mean", "must be finite");
        }
        for (i, c) in self.classes.iter().enumerate() {
            let field = |f: &str| format!("classes[{i}].{f}");
            if !(c.radius_min >= 2.0) {
                return bad(&field("radius_min"), "must be at least 2 px");
            }
            if !(c.radius_max >= c.radius_min && c.radius_max.is_finite()) {
                return bad(&field("radius_max"), "must be finite and at least radius_min");
            }
            for a in 0..2 {
                if !(0.0..=1.0).contains(&c.center_min[a]) || !(0.0..=1.0).contains(&c.center_max[a]) {
                    return bad(&field("center_min/center_max"), "fractions must lie in [0, 1]");
                }
                if c.center_min[a] > c.center_max[a] {
                    return bad(&field("center_min"), "must not exceed center_max");
                }
            }
            if !(c.intensity_std >= 0.0 && c.intensity_std.is_finite()) {
                return bad(&field("intensity_std"), "must be finite and non-negative");
            }
            if !(c.texture >= 0.0 && c.texture.is_finite()) {
                return bad(&field("texture"), "must be finite and non-negative");
            }
            if !c.intensity_mean.is_finite() {
                return bad(&field("intensity_mean"), "must be finite");
            }
            if !(0.0..=1.0).contains(&c.presence) {
                return bad(&field("presence"), "must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Membership with the semi-axes grown by `grow` pixels.
    fn contains(&self, y: f64, x: f64, grow: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / (self.rx + grow);
        let v = (-dx * self.sin + dy * self.cos) / (self.ry + grow);
        u * u + v * v <= 1.0
    }

    fn bbox(&self, grow: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r = self.rx.max(self.ry) + grow + 1.0;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let y1 = ((self.cy + r).ceil() as usize).min(h);
        let x1 = ((self.cx + r).ceil() as usize).min(w);
        (y0, y1, x0, x1)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(mean, std).expect("validated std").sample(rng)
    } else {
        mean
    }
}

/// Tries to place one organ that does not touch any already labeled pixel.
fn place(rng: &mut ChaCha8Rng, shape: &ClassShape, labels: &[u8], h: usize, w: usize) -> Option<Ellipse> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let e = Ellipse {
            cy: uniform(rng, shape.center_min[0], shape.center_max[0]) * (h - 1) as f64,
            cx: uniform(rng, shape.center_min[1], shape.center_max[1]) * (w - 1) as f64,
            ry: uniform(rng, shape.radius_min, shape.radius_max),
            rx: uniform(rng, shape.radius_min, shape.radius_max),
            cos: 0.0,
            sin: 0.0,
        };
        let theta = uniform(rng, 0.0, std::f64::consts::PI);
        let e = Ellipse {
            cos: theta.cos(),
            sin: theta.sin(),
            ..e
        };
        let (y0, y1, x0, x1) = e.bbox(1.0, h, w);
        let clear = (y0..y1).all(|y| (x0..x1).all(|x| labels[y * w + x] == 0 || !e.contains(y as f64, x as f64, 1.0)));
        let nonempty = (y0..y1).any(|y| (x0..x1).any(|x| e.contains(y as f64, x as f64, 0.0)));
        if clear && nonempty {
            return Some(e);
        }
    }
    None
}

fn generate_one(spec: &PhantomSpec, index: usize) -> Result<(Image, LabelMap)> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut labels = vec![0u8; h * w];
    let mut base = vec![0f64; h * w];

    let bg = gaussian(&mut rng, spec.background_mean, spec.background_std);
    let (fy, fx) = (uniform(&mut rng, 0.5, 2.0), uniform(&mut rng, 0.5, 2.0));
    let (py, px) = (uniform(&mut rng, 0.0, 6.3), uniform(&mut rng, 0.0, 6.3));
    for y in 0..h {
        for x in 0..w {
            let ripple = if spec.ripple > 0.0 {
                let a = std::f64::consts::TAU * fy * y as f64 / h as f64 + py;
                let b = std::f64::consts::TAU * fx * x as f64 / w as f64 + px;
                spec.ripple * a.sin() * b.cos()
            } else {
                0.0
            };
            base[y * w + x] = bg + ripple;
        }
    }

    for (ci, shape) in spec.classes.iter().enumerate() {
        let class = ci as u8 + 1;
        let forced = ci % spec.count == index;
        let present = rng.gen_bool(shape.presence);
        let intensity = gaussian(&mut rng, shape.intensity_mean, shape.intensity_std);
        if !(present || forced) {
            continue;
        }
        match place(&mut rng, shape, &labels, h, w) {
            Some(e) => {
                let (y0, y1, x0, x1) = e.bbox(0.0, h, w);
                for y in y0..y1 {
                    for x in x0..x1 {
                        if e.contains(y as f64, x as f64, 0.0) {
                            labels[y * w + x] = class;
                            let sign = if (y + x) % 2 == 0 { 1.0 } else { -1.0 };
                            base[y * w + x] = intensity + sign * shape.texture;
                        }
                    }
                }
            }
            None if forced => {
                return Err(Error::validation(format!(
                    "phantom spec `classes[{ci}]`: could not place the organ without overlap in a {h}x{w} image"
                )))
            }
            None => {}
        }
    }

    let pixels = base
        .into_iter()
        .map(|v| gaussian(&mut rng, v, spec.noise_std).clamp(0.0, 1.0) as f32)
        .collect();
    Ok((Image::new(h, w, pixels)?, LabelMap::new(h, w, labels)?))
}

/// Generates `spec.count` image/label pairs. Image `i` depends only on
/// `(spec, i)`; every class appears in at least one image when
/// `count >= K`.
pub fn generate_phantom(spec: &PhantomSpec, registry: &ClassRegistry) -> Result<Vec<(Image, LabelMap)>> {
    spec.validate(registry)?;
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}
