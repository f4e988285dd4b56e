//! Synthetic desk-scale videos with unambiguous referring expressions.
//!
//! A scene is a handful of colored shapes drifting linearly across a flat
//! background. Generation guarantees three invariants that the rest of the
//! pipeline leans on:
//!
//! * object masks are pairwise disjoint in every frame,
//! * every expression resolves to exactly one object (each expression
//!   names both a color and a shape, and objects carry distinct
//!   color/shape pairs),
//! * the same seed reproduces the same scene byte for byte.
//!
//! Scenes serialize to JSON; rasterization from a spec is deterministic,
//! so frames never need to be stored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::FrameTargets;
use crate::metrics::Mask;
use crate::tensor::Tensor;

/// Background intensity on all three channels.
pub const BACKGROUND: f64 = 0.1;

/// Color vocabulary with the RGB value each name paints.
pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.10, 0.70, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
];

/// Shape vocabulary.
pub const SHAPES: &[&str] = &["circle", "square", "triangle"];

/// Extra words used by phrasing variants.
pub const FILLER_WORDS: &[&str] = &["the", "object"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: String,
    pub color: String,
    /// Half-extent in pixels: circle radius, square half-edge, triangle
    /// half-height. Axis-aligned span is `2 * size` for every shape.
    pub size: f64,
    /// Center at frame 0, in pixels.
    pub x: f64,
    pub y: f64,
    /// Velocity in pixels per frame.
    pub vx: f64,
    pub vy: f64,
}

impl ObjectSpec {
    /// Center position at frame `t`.
    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.x + self.vx * t as f64, self.y + self.vy * t as f64)
    }

    fn contains(&self, px: f64, py: f64, t: usize) -> bool {
        let (cx, cy) = self.center(t);
        let (dx, dy) = (px - cx, py - cy);
        match self.shape.as_str() {
            "circle" => dx * dx + dy * dy <= self.size * self.size,
            "square" => dx.abs() <= self.size && dy.abs() <= self.size,
            // Isoceles triangle: apex up, width growing linearly to the base.
            "triangle" => dy.abs() <= self.size && dx.abs() <= (dy + self.size) / 2.0,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionSpec {
    pub words: Vec<String>,
    /// Index of the referent in `SceneSpec::objects`.
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectSpec>,
    pub expressions: Vec<ExpressionSpec>,
}

/// The three phrasing variants for one object, in generation order.
pub fn phrasings(color: &str, shape: &str) -> [Vec<String>; 3] {
    let s = |w: &str| w.to_string();
    [
        vec![s(color), s(shape)],
        vec![s("the"), s(color), s(shape)],
        vec![s(color), s(shape), s("object")],
    ]
}

/// Generates a scene. `paraphrases` (1..=3) phrasing variants are emitted
/// per object, object-major. Placement retries until all objects stay in
/// frame and pairwise separated for the whole clip; persistent failure is
/// reported with the attempt count rather than looping forever.
pub fn generate_scene(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    objects: usize,
    paraphrases: usize,
) -> Result<SceneSpec> {
    if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "scene size must be a positive multiple of 16, got {height}x{width}"
        )));
    }
    if frames == 0 || objects == 0 {
        return Err(Error::Config("frames and objects must be positive".into()));
    }
    if objects > COLORS.len() * SHAPES.len() {
        return Err(Error::Config(format!(
            "at most {} distinct objects, requested {objects}",
            COLORS.len() * SHAPES.len()
        )));
    }
    if !(1..=3).contains(&paraphrases) {
        return Err(Error::Config(format!(
            "paraphrases supports 1..=3, got {paraphrases}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let min_dim = height.min(width) as f64;
    let lo = (min_dim / 10.0).max(3.0);
    let hi = (min_dim / 6.5).max(lo + 0.5);
    let max_speed = 1.5;
    let drift = max_speed * (frames - 1) as f64;

    const SCENE_ATTEMPTS: usize = 32;
    const PLACE_ATTEMPTS: usize = 64;
    let mut attempts = 0;
    for _ in 0..SCENE_ATTEMPTS {
        // Distinct (color, shape) pairs for this attempt.
        let mut combos: Vec<(usize, usize)> = (0..COLORS.len())
            .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
            .collect();
        for i in 0..objects {
            let j = rng.gen_range(i..combos.len());
            combos.swap(i, j);
        }

        let mut placed: Vec<ObjectSpec> = Vec::with_capacity(objects);
        'objects: for &(ci, si) in combos.iter().take(objects) {
            for _ in 0..PLACE_ATTEMPTS {
                attempts += 1;
                let size = rng.gen_range(lo..hi);
                let margin = size + drift + 1.0;
                if 2.0 * margin >= width as f64 || 2.0 * margin >= height as f64 {
                    return Err(Error::Config(format!(
                        "{height}x{width} frame too small for objects of size {size:.1}"
                    )));
                }
                let candidate = ObjectSpec {
                    shape: SHAPES[si].to_string(),
                    color: COLORS[ci].0.to_string(),
                    size,
                    x: rng.gen_range(margin..width as f64 - margin),
                    y: rng.gen_range(margin..height as f64 - margin),
                    vx: rng.gen_range(-max_speed..max_speed),
                    vy: rng.gen_range(-max_speed..max_speed),
                };
                if placed.iter().all(|o| separated(o, &candidate, frames)) {
                    placed.push(candidate);
                    continue 'objects;
                }
            }
            placed.clear();
            break;
        }
        if placed.len() != objects {
            continue;
        }

        let mut expressions = Vec::new();
        for (idx, obj) in placed.iter().enumerate() {
            for words in phrasings(&obj.color, &obj.shape).into_iter().take(paraphrases) {
                expressions.push(ExpressionSpec { words, object: idx });
            }
        }
        let spec = SceneSpec {
            seed,
            frames,
            height,
            width,
            objects: placed,
            expressions,
        };
        validate_scene(&spec)?;
        return Ok(spec);
    }
    Err(Error::Generation(attempts))
}

/// Conservative pairwise clearance: bounding circles (half-extent times
/// sqrt(2) covers square and triangle corners) plus two pixels, at every
/// frame of the clip.
fn separated(a: &ObjectSpec, b: &ObjectSpec, frames: usize) -> bool {
    let reach = (a.size + b.size) * std::f64::consts::SQRT_2 + 2.0;
    (0..frames).all(|t| {
        let (ax, ay) = a.center(t);
        let (bx, by) = b.center(t);
        (ax - bx).hypot(ay - by) >= reach
    })
}

/// Rasterizes one object's mask at frame `t`. Pixels sample their center.
pub fn rasterize_object(obj: &ObjectSpec, height: usize, width: usize, t: usize) -> Mask {
    let mut data = vec![false; height * width];
    for iy in 0..height {
        for ix in 0..width {
            data[iy * width + ix] = obj.contains(ix as f64 + 0.5, iy as f64 + 0.5, t);
        }
    }
    Mask::new(height, width, data).expect("sized to match")
}

/// Renders frame `t`: an `(3, H, W)` image plus one mask per object.
pub fn render_frame(spec: &SceneSpec, t: usize) -> Result<(Tensor, Vec<Mask>)> {
    let (h, w) = (spec.height, spec.width);
    let mut image = vec![BACKGROUND; 3 * h * w];
    let mut masks = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        let rgb = COLORS
            .iter()
            .find(|(name, _)| *name == obj.color)
            .map(|(_, rgb)| *rgb)
            .ok_or_else(|| Error::Format(format!("unknown color {:?}", obj.color)))?;
        let mask = rasterize_object(obj, h, w, t);
        for (i, &fg) in mask.data().iter().enumerate() {
            if fg {
                for (c, &value) in rgb.iter().enumerate() {
                    image[c * h * w + i] = value;
                }
            }
        }
        masks.push(mask);
    }
    Ok((Tensor::from_vec(&[3, h, w], image)?, masks))
}

/// Renders the whole clip: images per frame, masks per frame per object.
pub fn render_video(spec: &SceneSpec) -> Result<(Vec<Tensor>, Vec<Vec<Mask>>)> {
    let mut images = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (image, frame_masks) = render_frame(spec, t)?;
        images.push(image);
        masks.push(frame_masks);
    }
    Ok((images, masks))
}

/// Tight normalized center/size box around the foreground. An empty mask
/// has no box and is rejected.
pub fn tight_box(mask: &Mask) -> Result<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..mask.h() {
        for x in 0..mask.w() {
            if mask.get(y, x) {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !any {
        return Err(Error::DegenerateBox { w: 0.0, h: 0.0 });
    }
    let (fw, fh) = (mask.w() as f64, mask.h() as f64);
    let bw = (x1 - x0 + 1) as f64;
    let bh = (y1 - y0 + 1) as f64;
    Ok([
        (x0 as f64 + bw / 2.0) / fw,
        (y0 as f64 + bh / 2.0) / fh,
        bw / fw,
        bh / fh,
    ])
}

/// Mask as a 0/1-valued `(H, W)` tensor.
pub fn mask_to_tensor(mask: &Mask) -> Result<Tensor> {
    let data = mask.data().iter().map(|&fg| f64::from(u8::from(fg))).collect();
    Tensor::from_vec(&[mask.h(), mask.w()], data)
}

/// Loss targets per expression per frame: the referent's mask and box.
pub fn expression_targets(spec: &SceneSpec) -> Result<Vec<Vec<FrameTargets>>> {
    let (_, masks) = render_video(spec)?;
    let mut out = Vec::with_capacity(spec.expressions.len());
    for expr in &spec.expressions {
        let mut frames = Vec::with_capacity(spec.frames);
        for frame_masks in &masks {
            let mask = &frame_masks[expr.object];
            frames.push(FrameTargets {
                mask: mask_to_tensor(mask)?,
                box_cxcywh: Tensor::from_vec(&[4], tight_box(mask)?.to_vec())?,
            });
        }
        out.push(frames);
    }
    Ok(out)
}

/// Objects whose color and shape are both named by `words`.
fn matching_objects(spec: &SceneSpec, words: &[String]) -> Vec<usize> {
    spec.objects
        .iter()
        .enumerate()
        .filter(|(_, o)| words.contains(&o.color) && words.contains(&o.shape))
        .map(|(i, _)| i)
        .collect()
}

/// Checks every scene invariant: legal names and geometry, objects fully
/// in frame for the whole clip, distinct color/shape pairs, disjoint
/// rasterized masks in every frame, and unambiguous expressions.
pub fn validate_scene(spec: &SceneSpec) -> Result<()> {
    let fail = |msg: String| Err(Error::Format(msg));
    if spec.frames == 0 || spec.objects.is_empty() || spec.expressions.is_empty() {
        return fail("scene needs at least one frame, object, and expression".into());
    }
    if spec.height % 16 != 0 || spec.width % 16 != 0 {
        return fail(format!(
            "scene size must be a multiple of 16, got {}x{}",
            spec.height, spec.width
        ));
    }
    let mut pairs = Vec::new();
    for (i, obj) in spec.objects.iter().enumerate() {
        if !SHAPES.contains(&obj.shape.as_str()) {
            return fail(format!("object {i}: unknown shape {:?}", obj.shape));
        }
        if COLORS.iter().all(|(name, _)| *name != obj.color) {
            return fail(format!("object {i}: unknown color {:?}", obj.color));
        }
        if !(obj.size > 0.0) {
            return fail(format!("object {i}: size must be positive"));
        }
        for t in 0..spec.frames {
            let (cx, cy) = obj.center(t);
            if cx - obj.size < 0.0
                || cy - obj.size < 0.0
                || cx + obj.size > spec.width as f64
                || cy + obj.size > spec.height as f64
            {
                return fail(format!("object {i} leaves the frame at t={t}"));
            }
        }
        let pair = (obj.color.clone(), obj.shape.clone());
        if pairs.contains(&pair) {
            return fail(format!("object {i} duplicates {}/{}", obj.color, obj.shape));
        }
        pairs.push(pair);
    }
    for t in 0..spec.frames {
        let masks: Vec<Mask> = spec
            .objects
            .iter()
            .map(|o| rasterize_object(o, spec.height, spec.width, t))
            .collect();
        for (i, m) in masks.iter().enumerate() {
            if m.area() == 0 {
                return fail(format!("object {i} rasterizes to nothing at t={t}"));
            }
            for (j, n) in masks.iter().enumerate().skip(i + 1) {
                let overlap = m.data().iter().zip(n.data()).any(|(&a, &b)| a && b);
                if overlap {
                    return fail(format!("objects {i} and {j} overlap at t={t}"));
                }
            }
        }
    }
    for (e, expr) in spec.expressions.iter().enumerate() {
        if expr.object >= spec.objects.len() {
            return fail(format!("expression {e} refers to missing object {}", expr.object));
        }
        let matches = matching_objects(spec, &expr.words);
        if matches != [expr.object] {
            return fail(format!(
                "expression {e} ({:?}) resolves to {matches:?}, expected [{}]",
                expr.words.join(" "),
                expr.object
            ));
        }
    }
    Ok(())
}
