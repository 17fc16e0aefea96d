//! Procedural paired tagged/cine phantoms with known deformation.
//!
//! A subject is a handful of overlapping soft-edged ellipses (a bright organ
//! on a dark background) carrying a multiplicative band-limited texture. Each
//! frame warps the anatomy by a smooth periodic displacement field, and the
//! tagged image is the cine image multiplied by a horizontal stripe pattern
//! advected by the same field:
//!
//! ```text
//! tagged(x, y) = cine(x, y) · (1 − A_f · cos²(π · ỹ / period)),
//! A_f = amplitude · (1 − fade_per_frame)^frame,   ỹ = y + dy(x, y)
//! ```
//!
//! The class of a subject is the quantized orientation of its main ellipse,
//! which gives the surrogate classifier used by the inception score a label.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, hash_str, rng_for};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_FRAMES: usize = 26;
pub const DEFAULT_FOV_MM: f64 = 240.0;
pub const DEFAULT_PIXEL_MM: f64 = 1.875;
pub const NUM_SHAPE_CLASSES: usize = 10;
/// Peak displacement at 64×64; scaled linearly with image size.
pub const DEFAULT_MOTION_PX_AT_64: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Center in normalized `[0,1]` coordinates (x to the right, y down).
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in normalized units.
    pub ax: f64,
    pub ay: f64,
    /// Rotation in radians, `[0, π)`.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Normalized radius; `≤ 1` inside.
    fn radius(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let a = du * c + dv * s;
        let b = -du * s + dv * c;
        ((a / self.ax).powi(2) + (b / self.ay).powi(2)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganParams {
    /// First entry is the main ellipse whose orientation defines the class.
    pub ellipses: Vec<Ellipse>,
    pub background: f64,
    pub texture_strength: f64,
    /// Width of the soft edge in pixels.
    pub edge_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub subject_seed: u64,
    pub image_size: usize,
    pub n_frames: usize,
    pub fov_mm: f64,
    pub pixel_mm: f64,
    pub organ: OrganParams,
    pub texture_seed: u64,
    /// Peak displacement magnitude in pixels (the field's smoothness scale).
    pub motion_px: f64,
    pub shape_class: usize,
}

impl PhantomSpec {
    /// Draws a subject from its seed.
    pub fn random(subject_seed: u64, image_size: usize, n_frames: usize) -> Result<Self> {
        let mut rng = rng_for(subject_seed, &[hash_str("organ")]);
        let shape_class = rng.gen_range(0..NUM_SHAPE_CLASSES);
        let bin = PI / NUM_SHAPE_CLASSES as f64;
        let main = Ellipse {
            cx: 0.5 + rng.gen_range(-0.04..0.04),
            cy: 0.5 + rng.gen_range(-0.04..0.04),
            ax: rng.gen_range(0.26..0.32),
            ay: rng.gen_range(0.10..0.13),
            angle: (shape_class as f64 + 0.5 + rng.gen_range(-0.2..0.2)) * bin,
            intensity: rng.gen_range(0.72..0.86),
        };
        let n_satellites = rng.gen_range(1..=3);
        let mut ellipses = vec![main.clone()];
        for _ in 0..n_satellites {
            ellipses.push(Ellipse {
                cx: main.cx + rng.gen_range(-0.15..0.15),
                cy: main.cy + rng.gen_range(-0.15..0.15),
                ax: rng.gen_range(0.05..0.10),
                ay: rng.gen_range(0.05..0.10),
                angle: rng.gen_range(0.0..PI),
                intensity: rng.gen_range(0.35..0.65),
            });
        }
        let spec = PhantomSpec {
            subject_seed,
            image_size,
            n_frames,
            fov_mm: DEFAULT_FOV_MM,
            pixel_mm: DEFAULT_PIXEL_MM,
            organ: OrganParams {
                ellipses,
                background: rng.gen_range(0.04..0.08),
                texture_strength: 0.12,
                edge_px: 1.0,
            },
            texture_seed: derive_seed(subject_seed, &[hash_str("texture")]),
            motion_px: DEFAULT_MOTION_PX_AT_64 * image_size as f64 / 64.0,
            shape_class,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_motion(mut self, motion_px: f64) -> Self {
        self.motion_px = motion_px;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be >= 1".into()));
        }
        if self.organ.ellipses.is_empty() {
            return Err(Error::InvalidConfig("organ needs at least one ellipse".into()));
        }
        if self.motion_px < 0.0 {
            return Err(Error::InvalidConfig("motion_px must be >= 0".into()));
        }
        let margin = (self.motion_px + 2.0 * self.organ.edge_px) / self.image_size as f64;
        for e in &self.organ.ellipses {
            let reach = e.ax.max(e.ay) + margin;
            let room = e.cx.min(e.cy).min(1.0 - e.cx).min(1.0 - e.cy);
            if reach >= room {
                return Err(Error::InvalidConfig(format!(
                    "ellipse at ({:.3}, {:.3}) reaches the image border",
                    e.cx, e.cy
                )));
            }
        }
        Ok(())
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.n_frames {
            return Err(Error::OutOfRange {
                what: "frame",
                index: frame,
                len: self.n_frames,
            });
        }
        Ok(())
    }

    fn texture_waves(&self) -> Vec<Wave> {
        let mut rng = rng_for(self.texture_seed, &[]);
        let mut waves: Vec<Wave> = (0..6)
            .map(|_| {
                let mut f = || {
                    let m: f64 = rng.gen_range(1.0..4.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                };
                Wave {
                    fx: f(),
                    fy: f(),
                    phase: 0.0,
                    amp: 0.0,
                }
            })
            .collect();
        for w in &mut waves {
            w.phase = rng.gen_range(0.0..2.0 * PI);
            w.amp = rng.gen_range(0.5..1.0);
        }
        normalize_amps(&mut waves);
        waves
    }

    fn motion_waves(&self) -> [Vec<Wave>; 2] {
        let mut rng = rng_for(self.subject_seed, &[hash_str("motion")]);
        let mut component = || {
            let mut waves: Vec<Wave> = (0..3)
                .map(|_| Wave {
                    fx: rng.gen_range(-1.0..1.0),
                    fy: rng.gen_range(-1.0..1.0),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: rng.gen_range(0.3..1.0),
                })
                .collect();
            normalize_amps(&mut waves);
            waves
        };
        [component(), component()]
    }

    /// Noise-free anatomy at a material point in pixel coordinates.
    fn anatomy(&self, waves: &[Wave], mx: f64, my: f64) -> f64 {
        let n = self.image_size as f64;
        let (u, v) = ((mx + 0.5) / n, (my + 0.5) / n);
        let organ = &self.organ;
        let mut outside = 1.0;
        for e in &organ.ellipses {
            let signed_px = (1.0 - e.radius(u, v)) * e.ax.min(e.ay) * n;
            let s = logistic(signed_px / organ.edge_px * 2.0);
            outside *= 1.0 - e.intensity * s;
        }
        let base = organ.background + (1.0 - organ.background) * (1.0 - outside);
        let texture: f64 = waves
            .iter()
            .map(|w| w.amp * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).cos())
            .sum();
        (base * (1.0 + organ.texture_strength * texture)).clamp(0.0, 1.0)
    }

    fn inside_organ(&self, mx: f64, my: f64) -> bool {
        let n = self.image_size as f64;
        let (u, v) = ((mx + 0.5) / n, (my + 0.5) / n);
        self.organ.ellipses.iter().any(|e| e.radius(u, v) <= 1.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn normalize_amps(waves: &mut [Wave]) {
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    for w in waves {
        w.amp /= total;
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-pixel displacement `(dx, dy)` in pixels for one frame. A pixel at
/// `(x, y)` shows the material originally at `(x + dx, y + dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    size: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
    pub smoothness_scale: f64,
}

impl DeformationField {
    pub fn zero(size: usize, smoothness_scale: f64) -> Self {
        DeformationField {
            size,
            dx: vec![0.0; size * size],
            dy: vec![0.0; size * size],
            smoothness_scale,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.size + x;
        (self.dx[i], self.dy[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// Minimum over pixels of det(I + ∇d), using central differences in the
    /// interior and one-sided differences on the border.
    pub fn min_jacobian_det(&self) -> f64 {
        let n = self.size;
        let diff = |f: &[f64], y: usize, x: usize, along_x: bool| {
            let idx = |yy: usize, xx: usize| f[yy * n + xx];
            if along_x {
                let (lo, hi) = (x.saturating_sub(1), (x + 1).min(n - 1));
                (idx(y, hi) - idx(y, lo)) / (hi - lo) as f64
            } else {
                let (lo, hi) = (y.saturating_sub(1), (y + 1).min(n - 1));
                (idx(hi, x) - idx(lo, x)) / (hi - lo) as f64
            }
        };
        let mut min = f64::INFINITY;
        for y in 0..n {
            for x in 0..n {
                let a = 1.0 + diff(&self.dx, y, x, true);
                let b = diff(&self.dx, y, x, false);
                let c = diff(&self.dy, y, x, true);
                let d = 1.0 + diff(&self.dy, y, x, false);
                min = min.min(a * d - b * c);
            }
        }
        min
    }
}

/// Smooth periodic displacement for `frame`: zero at frame 0, period
/// `n_frames`, magnitude at most `spec.motion_px`.
pub fn make_deformation(spec: &PhantomSpec, frame: usize) -> Result<DeformationField> {
    spec.check_frame(frame)?;
    let n = spec.image_size;
    let mut field = DeformationField::zero(n, spec.motion_px);
    let phase = 2.0 * PI * frame as f64 / spec.n_frames as f64;
    let temporal = 0.5 * (1.0 - phase.cos());
    if temporal == 0.0 || spec.motion_px == 0.0 {
        return Ok(field);
    }
    // each component bounded by motion/√2, so the vector magnitude is bounded by motion
    let scale = spec.motion_px / std::f64::consts::SQRT_2 * temporal;
    let [wx, wy] = spec.motion_waves();
    let eval = |waves: &[Wave], u: f64, v: f64| -> f64 {
        waves
            .iter()
            .map(|w| w.amp * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).sin())
            .sum()
    };
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let i = y * n + x;
            field.dx[i] = scale * eval(&wx, u, v);
            field.dy[i] = scale * eval(&wy, u, v);
        }
    }
    Ok(field)
}

fn check_field(spec: &PhantomSpec, field: &DeformationField) -> Result<()> {
    if field.size != spec.image_size {
        return Err(Error::Shape(format!(
            "deformation field {0}x{0} vs image {1}x{1}",
            field.size, spec.image_size
        )));
    }
    Ok(())
}

pub fn render_cine(spec: &PhantomSpec, frame: usize, field: &DeformationField) -> Result<Image> {
    spec.check_frame(frame)?;
    check_field(spec, field)?;
    let waves = spec.texture_waves();
    let n = spec.image_size;
    Ok(Image::from_fn(n, n, |y, x| {
        let (dx, dy) = field.at(y, x);
        spec.anatomy(&waves, x as f64 + dx, y as f64 + dy)
    }))
}

/// Binary organ mask (1 inside any ellipse) under the given deformation.
pub fn organ_mask(spec: &PhantomSpec, field: &DeformationField) -> Result<Image> {
    check_field(spec, field)?;
    let n = spec.image_size;
    Ok(Image::from_fn(n, n, |y, x| {
        let (dx, dy) = field.at(y, x);
        if spec.inside_organ(x as f64 + dx, y as f64 + dy) {
            1.0
        } else {
            0.0
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TagOrientation {
    #[default]
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagPattern {
    #[serde(skip)]
    pub orientation: TagOrientation,
    pub period_px: f64,
    pub amplitude: f64,
    pub fade_per_frame: f64,
}

impl Default for TagPattern {
    fn default() -> Self {
        TagPattern {
            orientation: TagOrientation::Horizontal,
            period_px: 8.0,
            amplitude: 0.9,
            fade_per_frame: 0.03,
        }
    }
}

impl TagPattern {
    pub fn validate(&self) -> Result<()> {
        if self.period_px.is_nan() || self.period_px < 2.0 {
            return Err(Error::InvalidConfig(format!(
                "tag period {} must be >= 2 px",
                self.period_px
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::InvalidConfig(format!(
                "tag amplitude {} outside [0, 1]",
                self.amplitude
            )));
        }
        if !(0.0..1.0).contains(&self.fade_per_frame) {
            return Err(Error::InvalidConfig(format!(
                "tag fade {} outside [0, 1)",
                self.fade_per_frame
            )));
        }
        Ok(())
    }

    /// Modulation depth at `frame`.
    pub fn amplitude_at(&self, frame: usize) -> f64 {
        self.amplitude * (1.0 - self.fade_per_frame).powi(frame as i32)
    }
}

pub fn apply_tags(cine: &Image, pattern: &TagPattern, frame: usize, field: &DeformationField) -> Result<Image> {
    pattern.validate()?;
    if cine.height() != field.size || cine.width() != field.size {
        return Err(Error::Shape(format!(
            "cine {:?} vs deformation field {}x{}",
            cine.dims(),
            field.size,
            field.size
        )));
    }
    let depth = pattern.amplitude_at(frame);
    Ok(Image::from_fn(cine.height(), cine.width(), |y, x| {
        let (_, dy) = field.at(y, x);
        let c = (PI * (y as f64 + dy) / pattern.period_px).cos();
        (cine.get(y, x) * (1.0 - depth * c * c)).clamp(0.0, 1.0)
    }))
}

/// One rendered frame of a subject.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub cine: Image,
    pub tagged: Image,
    pub mask: Image,
    pub field: DeformationField,
}

pub fn render_frame(spec: &PhantomSpec, pattern: &TagPattern, frame: usize) -> Result<RenderedFrame> {
    let field = make_deformation(spec, frame)?;
    let cine = render_cine(spec, frame, &field)?;
    let tagged = apply_tags(&cine, pattern, frame, &field)?;
    let mask = organ_mask(spec, &field)?;
    Ok(RenderedFrame {
        cine,
        tagged,
        mask,
        field,
    })
}

/// Class-labeled cine frames from freshly drawn subjects, for training the
/// surrogate classifier. Labels are the subjects' shape classes.
pub fn labeled_cine_set(seed: u64, count: usize, image_size: usize, n_frames: usize) -> Result<Vec<(Image, usize)>> {
    let mut rng = rng_for(seed, &[hash_str("labeled")]);
    (0..count)
        .map(|i| {
            let spec = PhantomSpec::random(
                derive_seed(seed, &[hash_str("labeled"), i as u64]),
                image_size,
                n_frames,
            )?;
            let frame = rng.gen_range(0..n_frames);
            let field = make_deformation(&spec, frame)?;
            Ok((render_cine(&spec, frame, &field)?, spec.shape_class))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec::random(seed, 64, DEFAULT_FRAMES).unwrap()
    }

    #[test]
    fn still_subject_renders_identical_frames() {
        let s = spec(3).with_motion(0.0);
        let f0 = render_cine(&s, 0, &make_deformation(&s, 0).unwrap()).unwrap();
        let f1 = render_cine(&s, 1, &make_deformation(&s, 1).unwrap()).unwrap();
        assert_eq!(f0, f1);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_frame(&spec(42), &TagPattern::default(), 0).unwrap();
        let b = render_frame(&spec(42), &TagPattern::default(), 0).unwrap();
        assert_eq!(a.cine.data(), b.cine.data());
        assert_eq!(a.tagged.data(), b.tagged.data());
    }

    #[test]
    fn organ_brighter_than_background() {
        for seed in 0..10 {
            let s = spec(1000 + seed);
            let frame = (seed as usize * 3) % s.n_frames;
            let r = render_frame(&s, &TagPattern::default(), frame).unwrap();
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for (v, m) in r.cine.data().iter().zip(r.mask.data()) {
                if *m > 0.5 {
                    inside += v;
                    ni += 1;
                } else {
                    outside += v;
                    no += 1;
                }
            }
            assert!(ni > 0 && no > 0);
            assert!(inside / ni as f64 > outside / no as f64 + 0.3, "seed {seed}");
        }
    }

    #[test]
    fn frame_out_of_range_is_rejected() {
        let s = spec(1);
        assert!(matches!(
            make_deformation(&s, s.n_frames),
            Err(Error::OutOfRange { .. })
        ));
        let f = DeformationField::zero(64, 0.0);
        assert!(matches!(render_cine(&s, 99, &f), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn first_frame_is_at_rest() {
        let f = make_deformation(&spec(5), 0).unwrap();
        assert_eq!(f.max_magnitude(), 0.0);
    }

    #[test]
    fn displacement_bounded_for_every_frame() {
        for seed in 0..5 {
            let s = spec(seed);
            let mut peak: f64 = 0.0;
            for frame in 0..s.n_frames {
                let f = make_deformation(&s, frame).unwrap();
                assert!(f.max_magnitude() <= f.smoothness_scale + 1e-12);
                peak = peak.max(f.max_magnitude());
            }
            assert!(peak > 0.1 * s.motion_px, "motion is not trivially zero");
        }
    }

    #[test]
    fn jacobian_positive_everywhere() {
        for seed in 0..5 {
            let s = spec(seed);
            for frame in 0..s.n_frames {
                let f = make_deformation(&s, frame).unwrap();
                assert!(f.min_jacobian_det() > 0.0, "seed {seed} frame {frame}");
            }
        }
    }

    #[test]
    fn zero_amplitude_tags_are_identity() {
        let s = spec(8);
        let r = render_frame(&s, &TagPattern::default(), 4).unwrap();
        let p = TagPattern {
            amplitude: 0.0,
            ..TagPattern::default()
        };
        assert_eq!(apply_tags(&r.cine, &p, 4, &r.field).unwrap(), r.cine);
    }

    #[test]
    fn full_amplitude_blacks_out_tag_centers() {
        let s = spec(9);
        let field = DeformationField::zero(64, 0.0);
        let cine = render_cine(&s, 0, &field).unwrap();
        let p = TagPattern {
            amplitude: 1.0,
            ..TagPattern::default()
        };
        let t = apply_tags(&cine, &p, 0, &field).unwrap();
        for y in (0..64).step_by(8) {
            for x in 0..64 {
                assert!(t.get(y, x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tag_contrast_fades_geometrically() {
        let s = spec(10);
        let field = DeformationField::zero(64, 0.0);
        let cine = render_cine(&s, 0, &field).unwrap();
        let p = TagPattern::default();
        let depth = |frame| {
            let t = apply_tags(&cine, &p, frame, &field).unwrap();
            // tag-center row crossing the organ
            let (y, x) = (32, 32);
            1.0 - t.get(y, x) / cine.get(y, x)
        };
        let ratio = depth(10) / depth(0);
        assert!((ratio - 0.97f64.powi(10)).abs() < 1e-12);
        assert!((ratio - 0.7374).abs() < 1e-4);
    }

    #[test]
    fn tags_reject_mismatched_field() {
        let cine = Image::filled(32, 32, 0.5);
        let field = DeformationField::zero(64, 0.0);
        assert!(matches!(
            apply_tags(&cine, &TagPattern::default(), 0, &field),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(PhantomSpec::random(1, 48, 26).is_err());
        assert!(PhantomSpec::random(1, 8, 26).is_err());
        assert!(PhantomSpec::random(1, 64, 0).is_err());
        let mut s = spec(2);
        s.organ.ellipses[0].cx = 0.1;
        assert!(s.validate().is_err());
        let bad = TagPattern {
            period_px: 1.0,
            ..TagPattern::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for seed in 20..25 {
            let s = spec(seed);
            let r = render_frame(&s, &TagPattern::default(), 7).unwrap();
            assert!(r
                .cine
                .data()
                .iter()
                .chain(r.tagged.data())
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classes_cover_all_bins() {
        let mut seen = [false; NUM_SHAPE_CLASSES];
        for seed in 0..200 {
            seen[spec(seed).shape_class] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
