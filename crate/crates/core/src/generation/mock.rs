//! Deterministic procedural stand-in for a text-to-image model.
//!
//! The picture is a function of the prompt text and the seed only:
//!
//! * the class token (text before the first `,`, minus any "a photo of
//!   multiple [different]" prefix) fixes the foreground hue, saturation,
//!   value, shape kind and stripe pattern;
//! * the background token (text after " inside ", if any) fixes the
//!   background color;
//! * the seed jitters shape position, size and count, and the background
//!   gradient.
//!
//! Classes are therefore separable by foreground color, and most pairs also
//! by shape or stripes, which survive photometric augmentation. The
//! end-to-end tests rely on this.

use std::io::Cursor;
use std::time::Instant;

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Backend, Capabilities, ImageMeta, ImageResult};
use crate::error::Result;
use crate::imaging::hsv_to_rgb;
use crate::prompt::GenParams;

pub const MOCK_BACKEND_ID: &str = "mock-procedural-v1";

const MULTI_PREFIXES: [&str; 2] = ["a photo of multiple different ", "a photo of multiple "];

/// Class token of a rendered prompt.
pub fn class_token(prompt: &str) -> &str {
    let head = prompt.split(',').next().unwrap_or("");
    let head = head.split(" inside ").next().unwrap_or(head);
    MULTI_PREFIXES
        .iter()
        .find_map(|p| head.strip_prefix(p))
        .unwrap_or(head)
        .trim()
}

/// Background token of a rendered prompt ("" when there is none).
pub fn background_token(prompt: &str) -> &str {
    prompt.rsplit_once(" inside ").map_or("", |(_, b)| b.trim())
}

fn is_multi(prompt: &str) -> bool {
    MULTI_PREFIXES.iter().any(|p| prompt.starts_with(p))
}

fn unit(bytes: &[u8]) -> f32 {
    u16::from_le_bytes([bytes[0], bytes[1]]) as f32 / 65536.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLook {
    pub hue: f32,
    pub saturation: f32,
    pub value: f32,
    pub shape: ShapeKind,
    pub stripes: Stripes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Diamond,
    Ring,
}

/// Darker bands across the foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stripes {
    None,
    Horizontal,
    Vertical,
    Diagonal,
}

/// Foreground appearance for a class token.
pub fn class_look(token: &str) -> ClassLook {
    let h = Sha256::digest(token.as_bytes());
    ClassLook {
        hue: unit(&h[0..2]),
        saturation: 0.7 + 0.3 * unit(&h[2..4]),
        value: 0.75 + 0.25 * unit(&h[4..6]),
        shape: match h[6] % 4 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Diamond,
            _ => ShapeKind::Ring,
        },
        stripes: match h[7] % 4 {
            0 => Stripes::None,
            1 => Stripes::Horizontal,
            2 => Stripes::Vertical,
            _ => Stripes::Diagonal,
        },
    }
}

/// Background base color for a background token.
pub fn background_color(token: &str) -> [f32; 3] {
    let h = Sha256::digest(token.as_bytes());
    let (r, g, b) = hsv_to_rgb(
        unit(&h[0..2]),
        0.1 + 0.3 * unit(&h[2..4]),
        0.2 + 0.4 * unit(&h[4..6]),
    );
    [r, g, b]
}

struct Shape {
    cx: f32,
    cy: f32,
    radius: f32,
}

fn inside(kind: ShapeKind, s: &Shape, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - s.cx, y - s.cy);
    match kind {
        ShapeKind::Disk => dx * dx + dy * dy <= s.radius * s.radius,
        ShapeKind::Square => dx.abs() <= s.radius * 0.85 && dy.abs() <= s.radius * 0.85,
        ShapeKind::Diamond => dx.abs() + dy.abs() <= s.radius * 1.2,
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= s.radius * s.radius && r2 >= 0.25 * s.radius * s.radius
        }
    }
}

fn on_stripe(stripes: Stripes, period: f32, x: f32, y: f32) -> bool {
    let t = match stripes {
        Stripes::None => return false,
        Stripes::Horizontal => y,
        Stripes::Vertical => x,
        Stripes::Diagonal => (x + y) * std::f32::consts::FRAC_1_SQRT_2,
    };
    (t / period).rem_euclid(1.0) < 0.5
}

/// Renders the procedural image for `(prompt, seed)` at the requested size.
pub fn mock_image(prompt: &str, seed: u64, width: u32, height: u32) -> RgbImage {
    let prompt_hash = Sha256::digest(prompt.as_bytes());
    let mut mix = [0u8; 8];
    mix.copy_from_slice(&prompt_hash[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(mix));

    let look = class_look(class_token(prompt));
    let (fr, fg, fb) = hsv_to_rgb(look.hue, look.saturation, look.value);
    let bg = background_color(background_token(prompt));
    let gradient: f32 = rng.random_range(-0.12..0.12);

    let (w, h) = (width as f32, height as f32);
    let short = w.min(h);
    let count = if is_multi(prompt) {
        rng.random_range(2..=4)
    } else {
        1
    };
    let scale = if count > 1 { 0.6 } else { 1.0 };
    let shapes: Vec<Shape> = (0..count)
        .map(|i| {
            let (ox, oy) = if count > 1 {
                let a =
                    std::f32::consts::TAU * i as f32 / count as f32 + rng.random_range(0.0..1.0);
                (0.22 * w * a.cos(), 0.22 * h * a.sin())
            } else {
                (0.0, 0.0)
            };
            Shape {
                cx: w / 2.0 + ox + rng.random_range(-0.1..0.1) * w,
                cy: h / 2.0 + oy + rng.random_range(-0.1..0.1) * h,
                radius: short * scale * rng.random_range(0.2..0.32),
            }
        })
        .collect();

    let fg_px = Rgb([to_u8(fr), to_u8(fg), to_u8(fb)]);
    let band_px = Rgb([to_u8(fr * 0.4), to_u8(fg * 0.4), to_u8(fb * 0.4)]);
    let period = (short * scale * 0.16).max(3.0);
    RgbImage::from_fn(width, height, |x, y| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        if shapes.iter().any(|s| inside(look.shape, s, px, py)) {
            if on_stripe(look.stripes, period, px, py) {
                band_px
            } else {
                fg_px
            }
        } else {
            let t = 1.0 + gradient * (py / h - 0.5) * 2.0;
            Rgb([to_u8(bg[0] * t), to_u8(bg[1] * t), to_u8(bg[2] * t)])
        }
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Mock generation as a free function.
pub fn mock_generate(prompt: &str, seed: u64, params: &GenParams) -> Result<ImageResult> {
    let start = Instant::now();
    let png = encode_png(&mock_image(prompt, seed, params.width, params.height))?;
    Ok(ImageResult {
        png,
        meta: ImageMeta {
            backend_id: MOCK_BACKEND_ID.into(),
            elapsed_ms: start.elapsed().as_millis() as u64,
            safety_flagged: false,
            sampler: None,
        },
    })
}

/// The procedural backend; fully concurrent.
#[derive(Debug, Clone, Default)]
pub struct MockBackend;

impl Backend for MockBackend {
    fn id(&self) -> &str {
        MOCK_BACKEND_ID
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_width: 4096,
            max_height: 4096,
        }
    }

    fn generate(&self, prompt: &str, seed: u64, params: &GenParams) -> Result<ImageResult> {
        mock_generate(prompt, seed, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::rgb_to_hsv;
    use std::collections::HashSet;

    #[test]
    fn tokens() {
        assert_eq!(
            class_token("pirate, pirate ship, ship inside bedroom"),
            "pirate"
        );
        assert_eq!(
            background_token("pirate, pirate ship, ship inside bedroom"),
            "bedroom"
        );
        assert_eq!(
            class_token("a photo of multiple different papillon, toy spaniel"),
            "papillon"
        );
        assert_eq!(
            class_token("a photo of multiple papillon, toy spaniel"),
            "papillon"
        );
        assert_eq!(class_token("papillon"), "papillon");
        assert_eq!(background_token("papillon"), "");
        assert_eq!(class_token(""), "");
    }

    #[test]
    fn background_changes_only_background() {
        let a = mock_image("goldfish, cyprinid inside bedroom", 3, 64, 48);
        let b = mock_image("goldfish, cyprinid inside beach", 3, 64, 48);
        let look = class_look("goldfish");
        assert_eq!(look.shape, ShapeKind::Square);
        let (r, g, bb) = hsv_to_rgb(look.hue, look.saturation, look.value);
        let fg = Rgb([to_u8(r), to_u8(g), to_u8(bb)]);
        let band = Rgb([to_u8(r * 0.4), to_u8(g * 0.4), to_u8(bb * 0.4)]);
        let center = (32, 24);
        for img in [&a, &b] {
            let px = *img.get_pixel(center.0, center.1);
            assert!(px == fg || px == band, "{px:?}");
        }
        assert_ne!(a.get_pixel(0, 0), b.get_pixel(0, 0));
    }

    #[test]
    fn seeds_give_distinct_images_same_hue_bucket() {
        let mut hashes = HashSet::new();
        let look = class_look("goldfish");
        let bucket = |h: f32| (h * 36.0).floor() as i32;
        for seed in 0..100u64 {
            let img = mock_image("goldfish, cyprinid", seed, 48, 36);
            hashes.insert(crate::store::sha256_hex(img.as_raw()));
            // Dominant saturated hue: histogram over pixels with s > 0.5.
            let mut hist = [0usize; 36];
            for p in img.pixels() {
                let (h, s, _) = rgb_to_hsv(
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                );
                if s > 0.5 {
                    hist[bucket(h).clamp(0, 35) as usize] += 1;
                }
            }
            let dominant = hist.iter().enumerate().max_by_key(|(_, n)| **n).unwrap().0 as i32;
            assert!(
                (dominant - bucket(look.hue)).rem_euclid(36) <= 1
                    || (bucket(look.hue) - dominant).rem_euclid(36) <= 1
            );
        }
        assert_eq!(hashes.len(), 100);
    }

    #[test]
    fn empty_prompt_is_fine() {
        let r = mock_generate(
            "",
            0,
            &GenParams {
                width: 16,
                height: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let img = image::load_from_memory(&r.png).unwrap();
        assert_eq!((img.width(), img.height()), (16, 8));
    }
}
