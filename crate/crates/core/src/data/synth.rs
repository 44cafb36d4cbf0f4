//! Ultrasound-like synthetic clips: a dark elliptical lesion that translates,
//! rotates and breathes, with blurred boundaries, multiplicative speckle and
//! optional lesion-like distractor blobs.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dataset::{Label, Padding, VideoSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Semi-axis range in pixels; each sequence samples both axes from it.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Largest centre displacement per frame, in pixels.
    pub max_speed: f64,
    /// Relative axis oscillation amplitude, `a·(1 ± d·sin)`.
    pub deformation: f64,
    /// Oscillation period in frames.
    pub deformation_period: f64,
    /// Largest rotation per frame, in radians.
    pub max_rotation: f64,
    pub background_level: f64,
    pub lesion_level: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_sigma: f64,
    /// Standard deviation of the mean-1 gamma speckle; 0 disables it.
    pub speckle: f64,
    pub distractors: usize,
    /// 0 = background intensity, 1 = lesion intensity.
    pub distractor_similarity: f64,
    /// Minimum gap in pixels between the lesion and the image border.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 5,
            axis_min: 7.0,
            axis_max: 12.0,
            max_speed: 1.5,
            deformation: 0.1,
            deformation_period: 8.0,
            max_rotation: 0.1,
            background_level: 0.6,
            lesion_level: 0.25,
            blur_sigma: 1.0,
            speckle: 0.2,
            distractors: 2,
            distractor_similarity: 0.8,
            margin: 2.0,
        }
    }
}

impl SynthConfig {
    /// No blur, speckle, deformation, rotation or distractors.
    pub fn noiseless() -> Self {
        Self {
            deformation: 0.0,
            max_rotation: 0.0,
            blur_sigma: 0.0,
            speckle: 0.0,
            distractors: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(format!("synth config: {msg}")));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.height < 8 || self.width < 8 {
            return bad(format!("resolution {}x{} below 8x8", self.height, self.width));
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if !(self.axis_min > 0.0 && self.axis_min <= self.axis_max) {
            return bad(format!("axis range [{}, {}] must satisfy 0 < min <= max", self.axis_min, self.axis_max));
        }
        if !(self.max_speed >= 0.0 && self.max_rotation >= 0.0 && self.margin >= 0.0) {
            return bad("max_speed, max_rotation and margin must be non-negative".into());
        }
        if !(0.0..=0.5).contains(&self.deformation) || self.deformation_period <= 0.0 {
            return bad("deformation must lie in [0, 0.5] with a positive period".into());
        }
        if !(unit(self.background_level) && unit(self.lesion_level) && self.lesion_level < self.background_level) {
            return bad("levels must lie in [0, 1] with the lesion darker than the background".into());
        }
        if !(0.0..=10.0).contains(&self.blur_sigma) || !unit(self.speckle) || !unit(self.distractor_similarity) {
            return bad("blur_sigma in [0, 10], speckle and distractor_similarity in [0, 1]".into());
        }
        if self.distractors > 16 {
            return bad(format!("{} distractors (at most 16)", self.distractors));
        }
        Ok(())
    }
}

/// An ellipse `(cx, cy, a, b, θ)` in pixel coordinates, where pixel `(x, y)`
/// has centre `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width)
            .map(|i| self.contains((i % width) as f64 + 0.5, (i / width) as f64 + 0.5))
            .collect()
    }
}

/// Lesion motion over a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionTrack {
    pub start: Ellipse,
    pub velocity: (f64, f64),
    pub spin: f64,
    pub deformation: f64,
    pub period: f64,
    pub phase: f64,
}

impl LesionTrack {
    pub fn at(&self, t: usize) -> Ellipse {
        let tf = t as f64;
        let wobble = self.deformation * (2.0 * PI * tf / self.period + self.phase).sin();
        Ellipse {
            cx: self.start.cx + self.velocity.0 * tf,
            cy: self.start.cy + self.velocity.1 * tf,
            a: self.start.a * (1.0 + wobble),
            b: self.start.b * (1.0 - wobble),
            angle: self.start.angle + self.spin * tf,
        }
    }

    fn sample<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Self> {
        let a = rng.random_range(cfg.axis_min..=cfg.axis_max);
        let b = rng.random_range(cfg.axis_min..=cfg.axis_max);
        let dir = rng.random_range(0.0..2.0 * PI);
        let speed = rng.random_range(0.0..=cfg.max_speed);
        let velocity = (speed * dir.cos(), speed * dir.sin());
        let reach = a.max(b) * (1.0 + cfg.deformation) + cfg.margin;
        let span = (cfg.frames - 1) as f64;
        let range = |v: f64, size: usize| {
            let lo = reach - (v * span).min(0.0);
            let hi = size as f64 - reach - (v * span).max(0.0);
            (lo <= hi).then_some((lo, hi))
        };
        let (Some((x0, x1)), Some((y0, y1))) = (range(velocity.0, cfg.width), range(velocity.1, cfg.height)) else {
            return Err(Error::Synth(format!(
                "a lesion with semi-axes up to {:.1}px moving {speed:.2}px/frame for {} frames leaves the {}x{} field of view; \
                 lower axis_max, max_speed or frames, or raise the resolution",
                a.max(b),
                cfg.frames,
                cfg.height,
                cfg.width
            )));
        };
        Ok(Self {
            start: Ellipse {
                cx: rng.random_range(x0..=x1),
                cy: rng.random_range(y0..=y1),
                a,
                b,
                angle: rng.random_range(0.0..PI),
            },
            velocity,
            spin: rng.random_range(-cfg.max_rotation..=cfg.max_rotation),
            deformation: cfg.deformation,
            period: cfg.deformation_period,
            phase: rng.random_range(0.0..2.0 * PI),
        })
    }
}

fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = kernel
                    .iter()
                    .zip(-radius..)
                    .map(|(k, d)| {
                        let (sx, sy) = if along_x {
                            ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                        };
                        k * src[sy * w + sx]
                    })
                    .sum();
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Renders a clip along an explicit lesion track. Fails if the lesion's
/// bounding box leaves the image in any frame.
pub fn render_track<R: Rng>(
    cfg: &SynthConfig,
    track: &LesionTrack,
    distractors: &[Ellipse],
    name: &str,
    rng: &mut R,
) -> Result<VideoSequence> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let distractor_level =
        cfg.background_level - cfg.distractor_similarity * (cfg.background_level - cfg.lesion_level);
    let distractor_masks: Vec<Vec<bool>> = distractors.iter().map(|d| d.rasterize(h, w)).collect();
    let speckle = (cfg.speckle > 0.0)
        .then(|| {
            let k = 1.0 / (cfg.speckle * cfg.speckle);
            Gamma::new(k, 1.0 / k).map_err(|e| Error::Synth(format!("speckle distribution: {e}")))
        })
        .transpose()?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let e = track.at(t);
        let (hx, hy) = e.half_extent();
        if e.cx - hx < 0.0 || e.cy - hy < 0.0 || e.cx + hx > w as f64 || e.cy + hy > h as f64 {
            return Err(Error::Synth(format!(
                "lesion leaves the {h}x{w} field of view at frame {t} (centre {:.1},{:.1}); keep the trajectory within the image",
                e.cx, e.cy
            )));
        }
        let inside = e.rasterize(h, w);
        let mut plane = vec![cfg.background_level; h * w];
        for dm in &distractor_masks {
            for (p, &d) in plane.iter_mut().zip(dm) {
                if d {
                    *p = distractor_level;
                }
            }
        }
        for (p, &m) in plane.iter_mut().zip(&inside) {
            if m {
                *p = cfg.lesion_level;
            }
        }
        if cfg.blur_sigma > 0.0 {
            plane = blur(&plane, h, w, cfg.blur_sigma);
        }
        if let Some(g) = &speckle {
            plane.iter_mut().for_each(|p| *p *= g.sample(rng));
        }
        // 8-bit quantization so that frames survive a disk round trip exactly
        let plane = plane.into_iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        frames.push(Tensor::from_parts(vec![1, h, w], plane));
        masks.push(Tensor::from_parts(vec![1, h, w], inside.into_iter().map(f64::from).collect()));
    }
    Ok(VideoSequence {
        name: name.to_string(),
        frames,
        masks: Some(masks),
        label: Some(Label::Synthetic),
        padding: Padding::default(),
    })
}

fn sample_distractors<R: Rng>(cfg: &SynthConfig, track: &LesionTrack, rng: &mut R) -> Vec<Ellipse> {
    let mut out = Vec::new();
    let lesion: Vec<Ellipse> = (0..cfg.frames).map(|t| track.at(t)).collect();
    for _ in 0..cfg.distractors {
        for _attempt in 0..100 {
            let a = rng.random_range(0.5 * cfg.axis_min..=0.8 * cfg.axis_max);
            let b = rng.random_range(0.5 * cfg.axis_min..=0.8 * cfg.axis_max);
            let r = a.max(b);
            if 2.0 * r >= cfg.width.min(cfg.height) as f64 {
                break;
            }
            let d = Ellipse {
                cx: rng.random_range(r..=cfg.width as f64 - r),
                cy: rng.random_range(r..=cfg.height as f64 - r),
                a,
                b,
                angle: rng.random_range(0.0..PI),
            };
            let clear = lesion.iter().chain(&out).all(|e: &Ellipse| {
                let gap = e.a.max(e.b) + r + 2.0;
                (e.cx - d.cx).hypot(e.cy - d.cy) > gap
            });
            if clear {
                out.push(d);
                break;
            }
        }
    }
    out
}

/// One synthetic sequence, fully determined by `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, name: &str) -> Result<VideoSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let track = LesionTrack::sample(cfg, &mut rng)?;
    let distractors = sample_distractors(cfg, &track, &mut rng);
    render_track(cfg, &track, &distractors, name, &mut rng)
}

/// A whole synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sequences: usize,
    /// How many of the sequences go to the validation split.
    pub val_sequences: usize,
    pub seed: u64,
    pub config: SynthConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sequences: 12,
            val_sequences: 2,
            seed: 0,
            config: SynthConfig::default(),
        }
    }
}

pub struct SynthDataset {
    pub sequences: Vec<VideoSequence>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Generates `spec.sequences` sequences named `synth000, synth001, …`; the
/// last `val_sequences` form the validation split.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.val_sequences > spec.sequences {
        return Err(Error::validation(format!(
            "{} validation sequences requested out of {}",
            spec.val_sequences, spec.sequences
        )));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let sequences = (0..spec.sequences)
        .map(|i| synth_generate(&spec.config, seeds.next_u64(), &format!("synth{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = sequences.iter().map(|s| s.name.clone()).collect();
    let n_train = spec.sequences - spec.val_sequences;
    Ok(SynthDataset {
        train: names[..n_train].to_vec(),
        val: names[n_train..].to_vec(),
        sequences,
    })
}
