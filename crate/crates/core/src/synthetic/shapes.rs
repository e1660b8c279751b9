//! Canonical shape templates and jittered renderings of them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

const FOREGROUND: f32 = 1.0;
const BACKGROUND: f32 = -1.0;

/// Centered canonical rendering of one prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTemplate {
    pub token: String,
    pub pixels: Image,
}

/// Templates for a vocabulary, in vocabulary order.
///
/// Known tokens: `circle` (ring), `square` (outline), `cross` (plus sign),
/// `diamond` (outline), `bar` (horizontal band). Geometry scales with `side`.
pub fn templates(vocab: &[String], side: usize) -> Result<Vec<ShapeTemplate>> {
    vocab
        .iter()
        .map(|token| {
            render_template(token, side).map(|pixels| ShapeTemplate {
                token: token.clone(),
                pixels,
            })
        })
        .collect()
}

fn render_template(token: &str, side: usize) -> Result<Image> {
    let k = side as f64 / 16.0;
    let c = (side as f64 - 1.0) / 2.0;
    let inside: Box<dyn Fn(f64, f64) -> bool> = match token {
        "circle" => Box::new(move |dy, dx| {
            let r = (dx * dx + dy * dy).sqrt();
            r >= 3.4 * k && r <= 5.6 * k
        }),
        "square" => Box::new(move |dy, dx| {
            let m = dx.abs().max(dy.abs());
            m >= 3.5 * k - 1e-9 && m <= 4.5 * k + 1e-9
        }),
        "cross" => Box::new(move |dy, dx| {
            let (lo, hi) = (dx.abs().min(dy.abs()), dx.abs().max(dy.abs()));
            lo <= 0.5 * k + 1e-9 && hi <= 5.5 * k + 1e-9
        }),
        "diamond" => Box::new(move |dy, dx| {
            let m = dx.abs() + dy.abs();
            m >= 4.0 * k && m <= 6.0 * k
        }),
        "bar" => Box::new(move |dy, dx| dy.abs() <= 1.5 * k + 1e-9 && dx.abs() <= 5.5 * k + 1e-9),
        other => return Err(Error::Config(format!("no shape template for token {other:?}"))),
    };
    let mut px = vec![BACKGROUND; side * side];
    for r in 0..side {
        for col in 0..side {
            if inside(r as f64 - c, col as f64 - c) {
                px[r * side + col] = FOREGROUND;
            }
        }
    }
    Image::new(side, px)
}

/// Rows/columns occupied by foreground: `(row_min, row_max, col_min, col_max)`.
fn bounding_box(img: &Image) -> Option<(usize, usize, usize, usize)> {
    let side = img.side();
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for r in 0..side {
        for c in 0..side {
            if img.get(r, c) > 0.0 {
                bb = Some(match bb {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    bb
}

/// Translates an image by whole pixels, filling with background.
pub fn shift(img: &Image, dy: i64, dx: i64) -> Image {
    let side = img.side() as i64;
    let mut px = vec![BACKGROUND; img.len()];
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = (r - dy, c - dx);
            if (0..side).contains(&sr) && (0..side).contains(&sc) {
                px[(r * side + c) as usize] = img.pixels()[(sr * side + sc) as usize];
            }
        }
    }
    Image::new(img.side(), px).expect("shifted image is finite")
}

/// Largest shifts keeping the template's foreground on the canvas:
/// `(min_dy, max_dy, min_dx, max_dx)`.
fn shift_limits(template: &Image) -> (i64, i64, i64, i64) {
    let last = template.side() as i64 - 1;
    match bounding_box(template) {
        Some((r0, r1, c0, c1)) => (-(r0 as i64), last - r1 as i64, -(c0 as i64), last - c1 as i64),
        None => (0, 0, 0, 0),
    }
}

/// Renders a template with a uniform integer offset in `[-jitter, jitter]`
/// per axis, clamped so the shape stays on the canvas.
pub fn render_jittered<R: Rng + ?Sized>(template: &ShapeTemplate, jitter: usize, rng: &mut R) -> (Image, bool) {
    let j = jitter as i64;
    let (dy, dx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
    let (min_dy, max_dy, min_dx, max_dx) = shift_limits(&template.pixels);
    let (cy, cx) = (dy.clamp(min_dy, max_dy), dx.clamp(min_dx, max_dx));
    (shift(&template.pixels, cy, cx), (cy, cx) != (dy, dx))
}

/// `n_per_class` jittered renderings of every template, interleaved by class.
pub fn gen_dataset(templates: &[ShapeTemplate], n_per_class: usize, jitter: usize, seed: u64) -> Result<Vec<(Image, usize)>> {
    if n_per_class == 0 {
        return Err(Error::Validation("n_per_class must be >= 1".into()));
    }
    if templates.is_empty() {
        return Err(Error::Validation("no templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * templates.len());
    let mut clamped = 0usize;
    for _ in 0..n_per_class {
        for (class, template) in templates.iter().enumerate() {
            let (img, was_clamped) = render_jittered(template, jitter, &mut rng);
            clamped += usize::from(was_clamped);
            out.push((img, class));
        }
    }
    if clamped > 0 {
        log::warn!("jitter {jitter} pushed {clamped} renderings off the canvas; offsets were clamped");
    }
    Ok(out)
}

/// Nearest template under L2 distance, minimized over integer shifts up to
/// `max_shift` in each axis.
pub fn classify(img: &Image, templates: &[ShapeTemplate], max_shift: usize) -> usize {
    let s = max_shift as i64;
    let mut best = (f64::INFINITY, 0);
    for (class, template) in templates.iter().enumerate() {
        for dy in -s..=s {
            for dx in -s..=s {
                let shifted = shift(&template.pixels, dy, dx);
                let d = l2_sq(img.pixels(), shifted.pixels(), None);
                if d < best.0 {
                    best = (d, class);
                }
            }
        }
    }
    best.1
}

/// Squared L2 distance, over hole pixels of `mask` when given.
pub fn l2_sq(a: &[f32], b: &[f32], mask: Option<&Mask>) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| !m.is_known(*i)))
        .map(|(_, (x, y))| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Writes one PGM per item plus `labels.csv` (`filename,token`).
pub fn export_dataset(dir: &Path, dataset: &[(Image, usize)], vocab: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("filename,token\n");
    for (i, (img, class)) in dataset.iter().enumerate() {
        let token = vocab
            .get(*class)
            .ok_or(Error::UnknownPrompt {
                index: *class,
                vocab: vocab.len(),
            })?;
        let name = format!("{i:05}.pgm");
        fs::write(dir.join(&name), img.to_pgm())?;
        labels.push_str(&format!("{name},{token}\n"));
    }
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}
