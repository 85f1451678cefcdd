//! Synthetic dataset generator.
//!
//! Produces desk-scale color images in which skin is marked by smoothly shaded
//! skin-toned ellipses. Two decoy families keep the task honest: color decoys
//! are skin-toned but carry high-frequency texture, texture decoys are smooth
//! but off-tone. Color cues alone and texture cues alone are each fooled by
//! one family, so classifiers using either signal stay separable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, ImgError, Image, SamplePair};
use crate::rng;

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Squared normalized radius; <= 1 means inside.
    fn dist2(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

fn random_ellipse(rng: &mut ChaCha8Rng, size: f64, r_lo: f64, r_hi: f64) -> Ellipse {
    Ellipse {
        cy: rng.gen_range(0.25 * size..0.75 * size),
        cx: rng.gen_range(0.25 * size..0.75 * size),
        ry: rng.gen_range(r_lo * size..r_hi * size),
        rx: rng.gen_range(r_lo * size..r_hi * size),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

fn skin_tone(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // red-dominant tones, r > g > b
    let r = rng.gen_range(0.55..0.95);
    let g = r * rng.gen_range(0.62..0.82);
    let b = g * rng.gen_range(0.68..0.88);
    [r, g, b]
}

/// Fixed palette of background base tones shared by every sample, so color
/// statistics learned on one subset carry over to the rest.
const BACKGROUNDS: [[f64; 3]; 6] = [
    [0.18, 0.42, 0.62], // slate blue
    [0.12, 0.55, 0.45], // teal
    [0.30, 0.60, 0.80], // sky
    [0.25, 0.50, 0.25], // leaf green
    [0.55, 0.55, 0.60], // concrete
    [0.10, 0.25, 0.45], // deep navy
];

/// Accent tones of the texture decoys, also fixed across samples.
const ACCENTS: [[f64; 3]; 4] = [
    [0.45, 0.20, 0.60], // violet
    [0.10, 0.65, 0.70], // cyan
    [0.55, 0.75, 0.20], // lime
    [0.20, 0.20, 0.75], // indigo
];

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = (y * self.size + x) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }
}

/// Paints an ellipse with radial shading and a directional light term.
/// `texture` adds a per-cell checker modulation (the color-decoy signature);
/// `brightness` scales the whole ellipse (dim skin sits in shadow).
fn paint_ellipse(
    canvas: &mut Canvas,
    ellipse: &Ellipse,
    color: [f64; 3],
    texture: bool,
    brightness: f64,
    mask: Option<&mut Vec<bool>>,
) {
    let size = canvas.size;
    let mut bits = mask;
    for y in 0..size {
        for x in 0..size {
            let d2 = ellipse.dist2(y as f64, x as f64);
            if d2 > 1.0 {
                continue;
            }
            let shade = 0.72 + 0.28 * (1.0 - d2);
            let light = 1.0 + 0.08 * (x as f64 - ellipse.cx) / ellipse.rx.max(1.0);
            let mut factor = shade * light * brightness;
            if texture {
                // 2x2-cell checker flips brightness sharply; its dark cells
                // share color bins with dim (shadowed) skin
                let cell = (y / 2 + x / 2) % 2;
                factor *= if cell == 0 { 1.12 } else { 0.68 };
            }
            let px = [
                (color[0] * factor).clamp(0.0, 1.0),
                (color[1] * factor).clamp(0.0, 1.0),
                (color[2] * factor).clamp(0.0, 1.0),
            ];
            canvas.put(y, x, px);
            if let Some(bits) = bits.as_deref_mut() {
                bits[y * size + x] = true;
            }
        }
    }
}

fn generate_one(index: u64, size: usize, seed: u64) -> Result<SamplePair, ImgError> {
    let mut rng = rng::stream(seed, "synth", index);
    let n = size * size;

    // background: three horizontal bands of distinct palette tones with a
    // vertical gradient and per-pixel noise; every image shows half of the
    // palette, so any split keeps the color statistics in-domain
    let mut band_tones: Vec<[f64; 3]> = BACKGROUNDS.to_vec();
    for i in (1..band_tones.len()).rev() {
        band_tones.swap(i, rng.gen_range(0..=i));
    }
    let mut canvas = Canvas { size, data: vec![0.0; n * 3] };
    for y in 0..size {
        let bg = band_tones[(y * 3 / size).min(2)];
        let grad = 0.85 + 0.3 * (y as f64 / size as f64 - 0.5);
        for x in 0..size {
            let noise = rng.gen_range(-0.06..0.06);
            let px = [
                (bg[0] * grad + noise).clamp(0.0, 1.0),
                (bg[1] * grad + noise).clamp(0.0, 1.0),
                (bg[2] * grad + noise).clamp(0.0, 1.0),
            ];
            canvas.put(y, x, px);
        }
    }

    // texture decoys: smooth but off-tone
    for _ in 0..rng.gen_range(0..=2) {
        let e = random_ellipse(&mut rng, size as f64, 0.08, 0.18);
        let tone = ACCENTS[rng.gen_range(0..ACCENTS.len())];
        paint_ellipse(&mut canvas, &e, tone, false, 1.0, None);
    }
    // color decoys: skin-toned but high-frequency textured; at least two per
    // image keep color evidence genuinely ambiguous
    for _ in 0..rng.gen_range(2..=3) {
        let e = random_ellipse(&mut rng, size as f64, 0.10, 0.22);
        let tone = skin_tone(&mut rng);
        paint_ellipse(&mut canvas, &e, tone, true, 1.0, None);
    }

    // skin ellipses drawn last so truth pixels show skin colors; some sit in
    // shadow, where color alone cannot separate them from decoy dark cells
    let mut bits = vec![false; n];
    let n_skin = rng.gen_range(1..=3);
    for _ in 0..n_skin {
        let e = random_ellipse(&mut rng, size as f64, 0.12, 0.26);
        let tone = skin_tone(&mut rng);
        let brightness = if rng.gen_bool(0.3) { 0.6 } else { 1.0 };
        paint_ellipse(&mut canvas, &e, tone, false, brightness, Some(&mut bits));
    }

    let data: Vec<f32> = canvas.data.iter().map(|&v| v as f32).collect();
    let image = Image::new(size, size, 3, data)?;
    let truth = BinaryMask::new(size, size, bits)?;
    SamplePair::new(format!("synth_{index:04}"), image, truth)
}

/// Generates `n` synthetic samples, each deterministic in `(seed, index)`.
pub fn generate_synthetic_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>, ImgError> {
    assert!(n >= 1, "need at least one sample");
    assert!(size >= 32, "size must be at least 32");
    (0..n as u64).map(|i| generate_one(i, size, seed)).collect()
}
