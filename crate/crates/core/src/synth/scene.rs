use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SceneSpec, SegSample, BACKGROUND, PAD, VIA, WIRE};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

const MAX_TRIES: usize = 200;
const GAP: i64 = 2;

const LEVEL_BACKGROUND: f32 = 0.2;
const LEVEL_WIRE: f32 = 0.55;
const LEVEL_PAD: f32 = 0.8;
const LEVEL_VIA_RING: f32 = 0.95;
const LEVEL_VIA_CORE: f32 = 0.3;

/// Pixel sets shared by the rasterizer and the labeler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Pixels with `(x-cx)² + (y-cy)² ≤ r²`.
    Disc { cx: i64, cy: i64, r: i64 },
    /// Half-open `[x0, x1) × [y0, y1)`.
    Rect { x0: i64, y0: i64, x1: i64, y1: i64 },
}

impl Shape {
    pub fn covers(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub class: u8,
    pub shape: Shape,
}

fn pick(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn place_discs(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    class: u8,
    count: usize,
    radius: (usize, usize),
    placed: &mut Vec<(i64, i64, i64)>,
) -> Result<()> {
    let size = spec.size as i64;
    for _ in 0..count {
        let r = pick(rng, radius) as i64;
        let spot = (0..MAX_TRIES).find_map(|_| {
            let cx = rng.random_range(r + 1..size - r - 1);
            let cy = rng.random_range(r + 1..size - r - 1);
            let clear = placed
                .iter()
                .all(|&(ox, oy, or)| (cx - ox).pow(2) + (cy - oy).pow(2) >= (r + or + GAP).pow(2));
            clear.then_some((cx, cy))
        });
        let (cx, cy) = spot.ok_or_else(|| {
            Error::Data(format!(
                "seed {}: no room for class {class} disc of radius {r} after {MAX_TRIES} tries",
                spec.seed
            ))
        })?;
        placed.push((cx, cy, r));
    }
    Ok(())
}

fn segment(a: (i64, i64), b: (i64, i64), w: i64) -> Shape {
    let lo = w / 2;
    let hi = w - lo;
    Shape::Rect {
        x0: a.0.min(b.0) - lo,
        y0: a.1.min(b.1) - lo,
        x1: a.0.max(b.0) + hi,
        y1: a.1.max(b.1) + hi,
    }
}

/// Samples scene geometry: pads, vias, then wires between element centers.
fn layout(spec: &SceneSpec) -> Result<Vec<Element>> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "scene", &[]);
    let n_pads = pick(&mut rng, spec.pad_count);
    let n_vias = pick(&mut rng, spec.via_count);
    let n_wires = pick(&mut rng, spec.wire_count);

    let mut discs = Vec::new();
    place_discs(&mut rng, spec, PAD, n_pads, spec.pad_radius, &mut discs)?;
    place_discs(&mut rng, spec, VIA, n_vias, spec.via_radius, &mut discs)?;
    if n_wires > 0 && discs.len() < 2 {
        return Err(Error::Data(format!(
            "seed {}: {n_wires} wires need at least two elements to connect",
            spec.seed
        )));
    }

    let mut elements = Vec::new();
    for _ in 0..n_wires {
        let i = rng.random_range(0..discs.len());
        let j = (i + rng.random_range(1..discs.len())) % discs.len();
        let a = (discs[i].0, discs[i].1);
        let b = (discs[j].0, discs[j].1);
        let w = pick(&mut rng, spec.wire_width) as i64;
        if a.0 == b.0 || a.1 == b.1 {
            elements.push(Element {
                class: WIRE,
                shape: segment(a, b, w),
            });
        } else {
            let corner = if rng.random_bool(0.5) {
                (b.0, a.1)
            } else {
                (a.0, b.1)
            };
            elements.push(Element {
                class: WIRE,
                shape: segment(a, corner, w),
            });
            elements.push(Element {
                class: WIRE,
                shape: segment(corner, b, w),
            });
        }
    }
    for (k, &(cx, cy, r)) in discs.iter().enumerate() {
        let class = if k < n_pads { PAD } else { VIA };
        elements.push(Element {
            class,
            shape: Shape::Disc { cx, cy, r },
        });
    }
    Ok(elements)
}

fn via_core(shape: &Shape) -> Option<Shape> {
    match *shape {
        Shape::Disc { cx, cy, r } => Some(Shape::Disc {
            cx,
            cy,
            r: (r / 2).max(1),
        }),
        Shape::Rect { .. } => None,
    }
}

/// Label rank under the via > pad > wire priority.
fn rank(class: u8) -> u8 {
    match class {
        VIA => 3,
        PAD => 2,
        WIRE => 1,
        _ => 0,
    }
}

pub fn generate(spec: &SceneSpec) -> Result<SegSample> {
    let elements = layout(spec)?;
    let (mut image, labels) = render(&elements, spec.size);
    add_noise(&mut image, spec);
    Ok(SegSample {
        image: Tensor::new(vec![1, spec.size, spec.size], image)?,
        labels,
    })
}

/// Noise-free intensities and labels for `elements` on an `n × n` canvas.
/// Overlaps resolve via > pad > wire regardless of input order.
pub fn render(elements: &[Element], n: usize) -> (Vec<f32>, Vec<u8>) {
    let mut labels = vec![BACKGROUND; n * n];
    let mut image = vec![LEVEL_BACKGROUND; n * n];
    let mut ordered = elements.to_vec();
    ordered.sort_by_key(|e| rank(e.class));
    for e in &ordered {
        let core = (e.class == VIA).then(|| via_core(&e.shape)).flatten();
        for y in 0..n {
            for x in 0..n {
                let (xi, yi) = (x as i64, y as i64);
                if !e.shape.covers(xi, yi) {
                    continue;
                }
                labels[y * n + x] = e.class;
                image[y * n + x] = match e.class {
                    WIRE => LEVEL_WIRE,
                    PAD => LEVEL_PAD,
                    _ if core.is_some_and(|c| c.covers(xi, yi)) => LEVEL_VIA_CORE,
                    _ => LEVEL_VIA_RING,
                };
            }
        }
    }
    (image, labels)
}

fn add_noise(image: &mut [f32], spec: &SceneSpec) {
    let n = spec.size;
    let mut rng = substream(spec.seed, "noise", &[]);

    let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    if spec.gradient_amp != 0.0 {
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..n {
            for x in 0..n {
                let t = (x as f64 * c + y as f64 * s) / n as f64;
                image[y * n + x] += (spec.gradient_amp * t) as f32;
            }
        }
    }

    for _ in 0..spec.streak_count {
        let px = rng.random::<f64>() * n as f64;
        let py = rng.random::<f64>() * n as f64;
        let phi = rng.random::<f64>() * std::f64::consts::PI;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (c, s) = (phi.cos(), phi.sin());
        for y in 0..n {
            for x in 0..n {
                let d = ((x as f64 - px) * s - (y as f64 - py) * c).abs();
                if d < 0.75 {
                    image[y * n + x] += (sign * spec.streak_amp) as f32;
                }
            }
        }
    }

    if spec.blur_radius > 0 {
        box_blur(image, n, spec.blur_radius);
    }

    if spec.grain_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.grain_sigma).expect("finite sigma");
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
}

/// Separable box blur with clamped edges.
fn box_blur(image: &mut [f32], n: usize, r: usize) {
    let r = r as i64;
    let at = |i: i64| i.clamp(0, n as i64 - 1) as usize;
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = (-r..=r)
                .map(|d| image[y * n + at(x as i64 + d)])
                .sum::<f32>()
                * norm;
        }
    }
    for y in 0..n {
        for x in 0..n {
            image[y * n + x] = (-r..=r).map(|d| tmp[at(y as i64 + d) * n + x]).sum::<f32>() * norm;
        }
    }
}
