//! Procedural generator of paired scene-text samples.
//!
//! Everything training needs is produced from a seed: procedural background
//! textures, an embedded bitmap font, and text warped into a rotated box by
//! the same normalized-coordinate transform the model itself uses, so paired
//! ground truth is exactly achievable by the architecture. All images are
//! quantized to 8 bits and mapped to [-1, 1], which makes PNG round trips
//! bit-exact.

mod font;
mod io;

pub use io::{load_image, load_split, save_image, save_split};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{theta_from_box, RotatedBox};
use crate::tensor::{Scalar, Tape, Tensor};

pub use font::{GLYPH_H, GLYPH_W};

/// Lowercase letters then digits; CTC blank is appended after these.
#[derive(Clone, Debug, Default)]
pub struct Alphabet;

impl Alphabet {
    pub const SIZE: usize = 36;

    pub fn index_of(c: char) -> Option<usize> {
        match c {
            'a'..='z' => Some(c as usize - 'a' as usize),
            '0'..='9' => Some(26 + c as usize - '0' as usize),
            _ => None,
        }
    }

    pub fn char_at(idx: usize) -> Option<char> {
        match idx {
            0..=25 => Some((b'a' + idx as u8) as char),
            26..=35 => Some((b'0' + (idx - 26) as u8) as char),
            _ => None,
        }
    }

    pub fn encode(text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                Self::index_of(c).ok_or_else(|| {
                    Error::contract(format!("character '{c}' outside the supported alphabet"))
                })
            })
            .collect()
    }

    pub fn string(symbols: &[usize]) -> String {
        symbols.iter().filter_map(|&s| Self::char_at(s)).collect()
    }
}

/// 200 fixed words; random strings cover the rest of the symbol space.
pub const LEXICON: [&str; 200] = [
    "the", "and", "for", "are", "but", "not", "you", "all", "can", "her", "was", "one", "our",
    "out", "day", "get", "has", "him", "his", "how", "man", "new", "now", "old", "see", "two",
    "way", "who", "boy", "did", "its", "let", "put", "say", "she", "too", "use", "dog", "cat",
    "sun", "map", "car", "bus", "zip", "box", "fox", "jam", "key", "log", "mix", "net", "oak",
    "pen", "quiz", "rat", "saw", "tap", "urn", "vat", "wax", "yak", "zoo", "able", "acid",
    "aged", "also", "area", "army", "away", "baby", "back", "ball", "band", "bank", "base",
    "bath", "bear", "beat", "been", "beer", "bell", "belt", "best", "bill", "bird", "blow",
    "blue", "boat", "body", "bomb", "bond", "bone", "book", "boom", "born", "boss", "both",
    "bowl", "bulk", "burn", "bush", "busy", "call", "calm", "came", "camp", "card", "care",
    "case", "cash", "cast", "cell", "chat", "chip", "city", "club", "coal", "coat", "code",
    "cold", "come", "cook", "cool", "cope", "copy", "core", "cost", "crew", "crop", "dark",
    "data", "date", "dawn", "days", "dead", "deal", "dean", "dear", "debt", "deep", "deny",
    "desk", "dial", "dick", "diet", "disc", "disk", "does", "done", "door", "dose", "down",
    "draw", "drew", "drop", "drug", "dual", "duke", "dust", "duty", "each", "earn", "ease",
    "east", "easy", "edge", "else", "even", "ever", "evil", "exit", "face", "fact", "fail",
    "fair", "fall", "farm", "fast", "fate", "fear", "feed", "feel", "feet", "fell", "felt",
    "file", "fill", "film", "find", "fine", "fire", "firm", "fish", "five", "flat", "flow",
    "food", "foot", "ford", "form",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Target equals source; the scene itself is the supervision.
    Real,
    /// Synthetic pair: target text differs and the edited image is known.
    Paired,
}

impl SampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::Real => "real",
            SampleMode::Paired => "paired",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(SampleMode::Real),
            "paired" => Ok(SampleMode::Paired),
            other => Err(Error::Dataset(format!("unknown sample mode '{other}'"))),
        }
    }
}

/// One training/evaluation record. `gt_edited == scene` in real mode.
#[derive(Clone)]
pub struct SceneSample {
    pub seed: u64,
    pub mode: SampleMode,
    /// [3, H_L, W_L] in [-1, 1].
    pub scene: Tensor<f32>,
    pub bx: RotatedBox,
    pub source_text: String,
    pub target_text: String,
    /// Target text black-on-white, [3, H_c, W_c]; W_c is a multiple of 32.
    pub content: Tensor<f32>,
    pub gt_edited: Tensor<f32>,
    /// [3, local_h, local_w] crop of gt_edited under the box.
    pub gt_patch: Tensor<f32>,
}

/// Rendering parameters; identical spec plus text gives a bit-identical
/// image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub fg_color: [f32; 3],
    pub texture: Texture,
    pub theta: f64,
    /// Letter spacing in glyph units at the content frame scale.
    pub spacing: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Gradient {
        from: [f32; 3],
        to: [f32; 3],
        horizontal: bool,
    },
    Checker {
        a: [f32; 3],
        b: [f32; 3],
        period: usize,
    },
    Noise {
        base: [f32; 3],
        amp: f32,
        cell: usize,
        seed: u64,
    },
}

/// Generator configuration, derived from the network configuration so data
/// and model always agree on frame sizes.
#[derive(Clone, Debug)]
pub struct DataConfig {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub content_h: usize,
    pub local_h: usize,
    pub local_w: usize,
    /// Glyph scale of the content frame (glyph height 7 * scale).
    pub content_scale: usize,
    /// Horizontal margin inside the content frame, pixels.
    pub content_margin: usize,
    /// Random box text heights, pixels.
    pub min_box_h: usize,
    pub max_box_h: usize,
    pub max_rotation: f64,
    pub max_retries: usize,
    /// Words longer than this are never drawn (canvas capacity).
    pub max_word_len: usize,
}

impl DataConfig {
    pub fn from_net(cfg: &crate::nets::NetConfig) -> Self {
        DataConfig {
            canvas_h: cfg.canvas_h,
            canvas_w: cfg.canvas_w,
            content_h: cfg.content_h,
            local_h: cfg.local_h,
            local_w: cfg.local_w,
            content_scale: (cfg.content_h * 2 / 3 / font::GLYPH_H).max(1),
            content_margin: 4,
            min_box_h: cfg.canvas_h / 5,
            max_box_h: cfg.canvas_h / 3,
            max_rotation: 0.35,
            max_retries: 8,
            max_word_len: 10,
        }
    }

    /// Content frame width for a word of `len` characters at the given
    /// letter spacing: strip plus margin, rounded up to a multiple of 32.
    pub fn content_width(&self, len: usize, spacing: usize) -> usize {
        let s = self.content_scale;
        let strip = len * font::GLYPH_W * s + len.saturating_sub(1) * spacing * s;
        let w = strip + 2 * self.content_margin;
        w.div_ceil(32) * 32
    }
}

fn quantize(v: f32) -> f32 {
    let u = ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8;
    u as f32 / 255.0 * 2.0 - 1.0
}

fn quantize_tensor(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_vec(t.data().iter().map(|&v| quantize(v)).collect(), t.shape().to_vec())
}

/// Rasterize `text` as an alpha strip at `scale`, then smooth with a 3x3
/// box filter. Returns (w, h, alpha in [0,1]).
fn render_strip(text: &str, scale: usize, spacing: usize) -> Result<(usize, usize, Vec<f32>)> {
    let n = text.chars().count();
    if n == 0 {
        return Err(Error::contract("cannot render empty text"));
    }
    let s = scale.max(1);
    let w = n * font::GLYPH_W * s + (n - 1) * spacing * s;
    let h = font::GLYPH_H * s;
    let mut hard = vec![0.0f32; w * h];
    let mut x0 = 0usize;
    for c in text.chars() {
        let rows = font::glyph_rows(c)
            .ok_or_else(|| Error::contract(format!("character '{c}' outside the alphabet")))?;
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..font::GLYPH_W {
                if row & (1 << (font::GLYPH_W - 1 - rx)) != 0 {
                    for dy in 0..s {
                        for dx in 0..s {
                            hard[(ry * s + dy) * w + x0 + rx * s + dx] = 1.0;
                        }
                    }
                }
            }
        }
        x0 += (font::GLYPH_W + spacing) * s;
    }
    // 3x3 box smoothing keeps edges inside a 1-pixel dilation.
    let mut soft = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += hard[yy as usize * w + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            soft[y * w + x] = acc / cnt;
        }
    }
    Ok((w, h, soft))
}

fn texture_pixel(texture: &Texture, x: usize, y: usize, w: usize, h: usize) -> [f32; 3] {
    match texture {
        Texture::Gradient {
            from,
            to,
            horizontal,
        } => {
            let t = if *horizontal {
                x as f32 / (w - 1).max(1) as f32
            } else {
                y as f32 / (h - 1).max(1) as f32
            };
            [
                from[0] + (to[0] - from[0]) * t,
                from[1] + (to[1] - from[1]) * t,
                from[2] + (to[2] - from[2]) * t,
            ]
        }
        Texture::Checker { a, b, period } => {
            let p = (*period).max(2);
            if ((x / p) + (y / p)) % 2 == 0 {
                *a
            } else {
                *b
            }
        }
        Texture::Noise {
            base,
            amp,
            cell,
            seed,
        } => {
            // Value noise on a coarse lattice with bilinear interpolation.
            let c = (*cell).max(2);
            let lat = |gx: u64, gy: u64| -> f32 {
                let mut v = gx
                    .wrapping_mul(0x9E3779B97F4A7C15)
                    .wrapping_add(gy.wrapping_mul(0xC2B2AE3D27D4EB4F))
                    .wrapping_add(*seed);
                v ^= v >> 29;
                v = v.wrapping_mul(0xBF58476D1CE4E5B9);
                v ^= v >> 32;
                (v & 0xFFFF) as f32 / 65535.0 - 0.5
            };
            let gx = x / c;
            let gy = y / c;
            let fx = (x % c) as f32 / c as f32;
            let fy = (y % c) as f32 / c as f32;
            let n = lat(gx as u64, gy as u64) * (1.0 - fx) * (1.0 - fy)
                + lat(gx as u64 + 1, gy as u64) * fx * (1.0 - fy)
                + lat(gx as u64, gy as u64 + 1) * (1.0 - fx) * fy
                + lat(gx as u64 + 1, gy as u64 + 1) * fx * fy;
            [
                (base[0] + amp * n).clamp(0.0, 1.0),
                (base[1] + amp * n).clamp(0.0, 1.0),
                (base[2] + amp * n).clamp(0.0, 1.0),
            ]
        }
    }
}

fn background(texture: &Texture, h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = texture_pixel(texture, x, y, w, h);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] * 2.0 - 1.0;
            }
        }
    }
    Tensor::from_vec(data, vec![3, h, w])
}

fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
}

fn random_texture<R: Rng>(rng: &mut R) -> Texture {
    match rng.gen_range(0..3u8) {
        0 => Texture::Gradient {
            from: random_color(rng),
            to: random_color(rng),
            horizontal: rng.gen(),
        },
        1 => {
            let a = random_color(rng);
            // Low-contrast partner so text stays the dominant structure.
            let b = [
                (a[0] + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0),
                (a[1] + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0),
                (a[2] + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0),
            ];
            Texture::Checker {
                a,
                b,
                period: rng.gen_range(4..16),
            }
        }
        _ => Texture::Noise {
            base: random_color(rng),
            amp: rng.gen_range(0.1..0.3),
            cell: rng.gen_range(4..16),
            seed: rng.gen(),
        },
    }
}

fn texture_mean(texture: &Texture, h: usize, w: usize) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    for y in (0..h).step_by(4) {
        for x in (0..w).step_by(4) {
            let px = texture_pixel(texture, x, y, w, h);
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
    }
    let n = (h.div_ceil(4) * w.div_ceil(4)) as f64;
    [
        (acc[0] / n) as f32,
        (acc[1] / n) as f32,
        (acc[2] / n) as f32,
    ]
}

/// Colored-text-on-transparent frame [4, content_h, W_c]: RGB plus alpha,
/// strip centered. Also used with black-on-white flattening for the content
/// image.
fn text_frame(
    cfg: &DataConfig,
    text: &str,
    color: [f32; 3],
    spacing: usize,
) -> Result<Tensor<f32>> {
    let (sw, sh, alpha) = render_strip(text, cfg.content_scale, spacing)?;
    let h = cfg.content_h;
    let w = cfg.content_width(text.chars().count(), spacing);
    if sw + 2 > w || sh + 2 > h {
        return Err(Error::contract(format!(
            "strip {sw}x{sh} exceeds content frame {w}x{h}"
        )));
    }
    let x0 = (w - sw) / 2;
    let y0 = (h - sh) / 2;
    let mut data = vec![0.0f32; 4 * h * w];
    for sy in 0..sh {
        for sx in 0..sw {
            let a = alpha[sy * sw + sx];
            if a == 0.0 {
                continue;
            }
            let (x, y) = (x0 + sx, y0 + sy);
            for c in 0..3 {
                data[c * h * w + y * w + x] = (color[c] * 2.0 - 1.0) * a;
            }
            data[3 * h * w + y * w + x] = a;
        }
    }
    Ok(Tensor::from_vec(data, vec![4, h, w]))
}

/// Content image: target text black on white, [3, H_c, W_c]. The spacing
/// must match the paired ground-truth rendering.
pub fn render_content(cfg: &DataConfig, text: &str, spacing: usize) -> Result<Tensor<f32>> {
    let frame = text_frame(cfg, text, [0.0, 0.0, 0.0], spacing)?;
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let fd = frame.data();
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let a = fd[3 * h * w + i];
        for c in 0..3 {
            // Composite black text over white.
            data[c * h * w + i] = quantize(1.0 * (1.0 - a) + (-1.0) * a);
        }
    }
    Ok(Tensor::from_vec(data, vec![3, h, w]))
}

/// Warp a [4, H_c, W_c] text frame into `bx` on top of `canvas` using the
/// model's own normalized-coordinate transform.
fn composite_frame(
    canvas: &Tensor<f32>,
    frame: &Tensor<f32>,
    bx: &RotatedBox,
) -> Result<Tensor<f32>> {
    let (ch, cw) = (canvas.shape()[1], canvas.shape()[2]);
    let (fh, fw) = (frame.shape()[1], frame.shape()[2]);
    let theta = theta_from_box(bx, (fw, fh), (cw, ch))?;
    let mut tape = Tape::<f32>::inference();
    let src = tape.reshape(frame, vec![1, 4, fh, fw])?;
    let warped = tape.affine_grid_sample(&src, &[theta], ch, cw)?;
    let wd = warped.data();
    let cd = canvas.data();
    let plane = ch * cw;
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let a = wd[3 * plane + i].clamp(0.0, 1.0);
        for c in 0..3 {
            // Frame RGB is premultiplied by alpha.
            out[c * plane + i] = cd[c * plane + i] * (1.0 - a) + wd[c * plane + i];
        }
    }
    Ok(Tensor::from_vec(out, vec![3, ch, cw]))
}

fn pick_word<R: Rng>(rng: &mut R, max_len: usize) -> String {
    for _ in 0..32 {
        let word: String = if rng.gen_bool(0.6) {
            LEXICON[rng.gen_range(0..LEXICON.len())].to_string()
        } else {
            let len = rng.gen_range(1..=max_len.min(10));
            (0..len)
                .map(|_| Alphabet::char_at(rng.gen_range(0..Alphabet::SIZE)).unwrap())
                .collect()
        };
        if word.chars().count() <= max_len {
            return word;
        }
    }
    // Fallback: single random character always fits.
    Alphabet::char_at(rng.gen_range(0..Alphabet::SIZE))
        .unwrap()
        .to_string()
}

/// Snap an angle in degrees to a fixed point of degrees -> radians ->
/// degrees, so manifests (which store degrees) round-trip bit-exactly.
fn snap_degrees(mut d: f64) -> f64 {
    for _ in 0..8 {
        let d2 = d.to_radians().to_degrees();
        if d2 == d {
            break;
        }
        d = d2;
    }
    d
}

fn box_fits(bx: &RotatedBox, h: usize, w: usize, margin: f64) -> bool {
    bx.corners().iter().all(|&(x, y)| {
        x >= margin && y >= margin && x <= w as f64 - 1.0 - margin && y <= h as f64 - 1.0 - margin
    })
}

/// Extract the ground-truth local patch (no gradients involved).
fn crop_patch(cfg: &DataConfig, img: &Tensor<f32>, bx: &RotatedBox) -> Result<Tensor<f32>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut tape = Tape::<f32>::inference();
    let batched = tape.reshape(img, vec![1, 3, h, w])?;
    let patch = tape.extract_rotated_patch(&batched, &[*bx], cfg.local_h, cfg.local_w)?;
    Ok(quantize_tensor(&Tensor::from_vec(
        patch.data().to_vec(),
        vec![3, cfg.local_h, cfg.local_w],
    )))
}

/// Deterministically render one sample. Paired mode draws two words and
/// renders both with one [`RenderSpec`] over one background; real mode
/// renders one word and uses the scene itself as ground truth.
pub fn render_sample(cfg: &DataConfig, seed: u64, mode: SampleMode) -> Result<SceneSample> {
    render_sample_with(cfg, seed, mode, None)
}

/// Variant forcing the target word length (evaluation buckets).
pub fn render_sample_with(
    cfg: &DataConfig,
    seed: u64,
    mode: SampleMode,
    target_len: Option<usize>,
) -> Result<SceneSample> {
    let mut rng = crate::rng(seed ^ 0xDA7A);
    let texture = random_texture(&mut rng);
    let bg_mean = texture_mean(&texture, cfg.canvas_h, cfg.canvas_w);
    // Foreground color with usable contrast against the background.
    let fg_color = loop {
        let c = random_color(&mut rng);
        if (luma(c) - luma(bg_mean)).abs() > 0.3 {
            break c;
        }
    };
    let spacing = rng.gen_range(1..=2usize);
    let canvas = background(&texture, cfg.canvas_h, cfg.canvas_w);

    let mut max_len = cfg.max_word_len;
    for attempt in 0..=cfg.max_retries {
        let source_text = pick_word(&mut rng, max_len);
        let target_text = match (mode, target_len) {
            (SampleMode::Real, _) => source_text.clone(),
            (SampleMode::Paired, Some(len)) => (0..len)
                .map(|_| Alphabet::char_at(rng.gen_range(0..Alphabet::SIZE)).unwrap())
                .collect(),
            (SampleMode::Paired, None) => pick_word(&mut rng, cfg.max_word_len),
        };

        let src_len = source_text.chars().count();
        let frame_w = cfg.content_width(src_len, spacing);
        let aspect = frame_w as f64 / cfg.content_h as f64;
        let max_deg = cfg.max_rotation.to_degrees();
        let theta = snap_degrees(rng.gen_range(-max_deg..=max_deg)).to_radians();
        let margin = 3.0;
        let budget_w = cfg.canvas_w as f64 - 1.0 - 2.0 * margin;
        let budget_h = cfg.canvas_h as f64 - 1.0 - 2.0 * margin;
        // Largest text height whose rotated bounding box fits the canvas.
        let (s_a, c_a) = (theta.sin().abs(), theta.cos().abs());
        let h_cap = (budget_w / (aspect * c_a + s_a))
            .min(budget_h / (aspect * s_a + c_a))
            .min(cfg.max_box_h as f64);
        if h_cap < cfg.min_box_h as f64 {
            // Word too long for this canvas: retry with a shorter draw.
            max_len = max_len.saturating_sub(1).max(1);
            if attempt == cfg.max_retries {
                return Err(Error::contract(format!(
                    "no box placement found for seed {seed} after {} retries",
                    cfg.max_retries
                )));
            }
            continue;
        }
        let box_h = rng.gen_range(cfg.min_box_h as f64..=h_cap);
        let box_w = box_h * aspect;
        let half_w = (box_w * c_a + box_h * s_a) / 2.0;
        let half_h = (box_w * s_a + box_h * c_a) / 2.0;
        let cx = rng.gen_range(margin + half_w..=cfg.canvas_w as f64 - 1.0 - margin - half_w);
        let cy = rng.gen_range(margin + half_h..=cfg.canvas_h as f64 - 1.0 - margin - half_h);
        let bx = RotatedBox::new(cx, cy, box_w, box_h, theta);
        debug_assert!(box_fits(&bx, cfg.canvas_h, cfg.canvas_w, 1.0));

        let spec = RenderSpec {
            fg_color,
            texture: texture.clone(),
            theta,
            spacing,
            seed,
        };
        let src_frame = text_frame(cfg, &source_text, spec.fg_color, spec.spacing)?;
        let scene = quantize_tensor(&composite_frame(&canvas, &src_frame, &bx)?);

        let (gt_edited, content_text) = match mode {
            SampleMode::Real => (scene.clone(), source_text.clone()),
            SampleMode::Paired => {
                let tgt_frame = text_frame(cfg, &target_text, spec.fg_color, spec.spacing)?;
                (
                    quantize_tensor(&composite_frame(&canvas, &tgt_frame, &bx)?),
                    target_text.clone(),
                )
            }
        };
        let content = render_content(cfg, &content_text, spacing)?;
        let gt_patch = crop_patch(cfg, &gt_edited, &bx)?;

        return Ok(SceneSample {
            seed,
            mode,
            scene,
            bx,
            source_text,
            target_text,
            content,
            gt_edited,
            gt_patch,
        });
    }
    unreachable!("retry loop returns or errors");
}

/// Zero out the box interior of a scene batch and append a mask channel:
/// [N,3,H,W] -> [N,4,H,W]. Differentiable with respect to the scene.
pub fn mask_box<T: Scalar>(
    tape: &mut Tape<T>,
    scene: &Tensor<T>,
    boxes: &[RotatedBox],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = scene.dims4()?;
    if c != 3 {
        return Err(Error::dim(format!("mask_box expects RGB scenes, got C={c}")));
    }
    if boxes.len() != n && boxes.len() != 1 {
        return Err(Error::contract(format!(
            "mask_box: {} boxes for batch of {n}",
            boxes.len()
        )));
    }
    for b in boxes {
        b.validate()?;
    }
    let mut keep = vec![T::one(); n * 3 * h * w];
    let mut mask = vec![T::zero(); n * h * w];
    for ni in 0..n {
        let bx = &boxes[if boxes.len() == 1 { 0 } else { ni }];
        for y in 0..h {
            for x in 0..w {
                if bx.contains(x as f64, y as f64) {
                    mask[(ni * h + y) * w + x] = T::one();
                    for ci in 0..3 {
                        keep[((ni * 3 + ci) * h + y) * w + x] = T::zero();
                    }
                }
            }
        }
    }
    let keep = Tensor::from_vec(keep, vec![n, 3, h, w]);
    let mask = Tensor::from_vec(mask, vec![n, 1, h, w]);
    let masked = tape.mul(scene, &keep)?;
    tape.concat_channels(&[&masked, &mask])
}

/// Deterministic interleave of real and paired samples; `mix_ratio` is the
/// paired fraction (0.5 by default, 1:1).
pub fn make_batch(cfg: &DataConfig, seeds: &[u64], mix_ratio: f64) -> Result<Vec<SceneSample>> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::contract(format!(
            "mix_ratio must lie in [0,1], got {mix_ratio}"
        )));
    }
    let n = seeds.len();
    let paired_count = (n as f64 * mix_ratio).round() as usize;
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            // Spread paired samples evenly across the batch.
            let paired = (i + 1) * paired_count / n > i * paired_count / n;
            let mode = if paired {
                SampleMode::Paired
            } else {
                SampleMode::Real
            };
            render_sample(cfg, seed, mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig::from_net(&crate::nets::NetConfig::toy())
    }

    #[test]
    fn same_seed_bit_identical() {
        let cfg = cfg();
        let a = render_sample(&cfg, 42, SampleMode::Paired).unwrap();
        let b = render_sample(&cfg, 42, SampleMode::Paired).unwrap();
        assert_eq!(a.scene.data(), b.scene.data());
        assert_eq!(a.gt_edited.data(), b.gt_edited.data());
        assert_eq!(a.content.data(), b.content.data());
        assert_eq!(a.source_text, b.source_text);
        assert_eq!(a.target_text, b.target_text);
        assert_eq!(a.bx, b.bx);
    }

    #[test]
    fn paired_scene_and_gt_differ_only_inside_dilated_box() {
        let cfg = cfg();
        for seed in [1u64, 7, 19, 33] {
            let s = render_sample(&cfg, seed, SampleMode::Paired).unwrap();
            let (h, w) = (cfg.canvas_h, cfg.canvas_w);
            let dilated = RotatedBox::new(s.bx.cx, s.bx.cy, s.bx.w + 6.0, s.bx.h + 6.0, s.bx.theta);
            for y in 0..h {
                for x in 0..w {
                    if dilated.contains(x as f64, y as f64) {
                        continue;
                    }
                    for c in 0..3 {
                        let a = s.scene.data()[c * h * w + y * w + x];
                        let b = s.gt_edited.data()[c * h * w + y * w + x];
                        assert!(
                            (a - b).abs() < 1e-6,
                            "seed {seed}: pixel ({x},{y}) differs outside the box"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn real_mode_target_equals_source_and_gt_equals_scene() {
        let cfg = cfg();
        let s = render_sample(&cfg, 5, SampleMode::Real).unwrap();
        assert_eq!(s.source_text, s.target_text);
        assert_eq!(s.scene.data(), s.gt_edited.data());
    }

    #[test]
    fn box_always_inside_canvas() {
        let cfg = cfg();
        for seed in 0..50u64 {
            let s = render_sample(&cfg, seed, SampleMode::Paired).unwrap();
            assert!(box_fits(&s.bx, cfg.canvas_h, cfg.canvas_w, 1.0), "seed {seed}");
        }
    }

    #[test]
    fn mask_full_canvas_box_masks_everything() {
        let mut tape = Tape::<f32>::inference();
        let scene = Tensor::full(vec![1, 3, 8, 8], 0.5f32);
        let bx = RotatedBox::new(3.5, 3.5, 100.0, 100.0, 0.0);
        let masked = mask_box(&mut tape, &scene, &[bx]).unwrap();
        assert_eq!(masked.shape(), &[1, 4, 8, 8]);
        for i in 0..3 * 64 {
            assert_eq!(masked.data()[i], 0.0);
        }
        for i in 3 * 64..4 * 64 {
            assert_eq!(masked.data()[i], 1.0);
        }
    }

    #[test]
    fn mask_area_matches_box_area_within_perimeter() {
        let mut tape = Tape::<f32>::inference();
        let scene = Tensor::zeros(vec![1, 3, 64, 64]);
        let bx = RotatedBox::new(30.0, 30.0, 20.0, 12.0, 0.5);
        let masked = mask_box(&mut tape, &scene, &[bx]).unwrap();
        let mask_area: f32 = masked.data()[3 * 64 * 64..].iter().sum();
        let area = (bx.w * bx.h) as f32;
        let perimeter = (2.0 * (bx.w + bx.h)).ceil() as f32;
        assert!(
            (mask_area - area).abs() <= perimeter,
            "mask {mask_area} vs analytic {area}"
        );
    }

    #[test]
    fn zero_rotation_mask_is_exact_rectangle() {
        let mut tape = Tape::<f32>::inference();
        let scene = Tensor::zeros(vec![1, 3, 16, 16]);
        let bx = RotatedBox::new(7.5, 7.5, 8.0, 4.0, 0.0);
        let masked = mask_box(&mut tape, &scene, &[bx]).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let inside = (4..=11).contains(&x) && (6..=9).contains(&y);
                let m = masked.data()[3 * 256 + y * 16 + x];
                assert_eq!(m == 1.0, inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn batch_mixing_counts() {
        let cfg = cfg();
        let seeds: Vec<u64> = (0..12).collect();
        let batch = make_batch(&cfg, &seeds, 0.5).unwrap();
        let paired = batch
            .iter()
            .filter(|s| s.mode == SampleMode::Paired)
            .count();
        assert_eq!(paired, 6);
        let all_paired = make_batch(&cfg, &seeds, 1.0).unwrap();
        assert!(all_paired.iter().all(|s| s.mode == SampleMode::Paired));
        let none_paired = make_batch(&cfg, &seeds, 0.0).unwrap();
        assert!(none_paired.iter().all(|s| s.mode == SampleMode::Real));
    }

    #[test]
    fn glyph_coverage_over_thousand_samples() {
        let cfg = cfg();
        let mut counts = [0usize; Alphabet::SIZE];
        for seed in 0..1000u64 {
            let mode = if seed % 2 == 0 {
                SampleMode::Paired
            } else {
                SampleMode::Real
            };
            let s = render_sample(&cfg, seed, mode).unwrap();
            for c in s.source_text.chars().chain(s.target_text.chars()) {
                counts[Alphabet::index_of(c).unwrap()] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                c >= 10,
                "symbol {} appeared only {c} times",
                Alphabet::char_at(i).unwrap()
            );
        }
    }

    #[test]
    fn content_width_is_multiple_of_32() {
        let cfg = cfg();
        for len in 1..=10 {
            for spacing in 1..=2 {
                assert_eq!(cfg.content_width(len, spacing) % 32, 0);
            }
        }
    }

    #[test]
    fn alphabet_round_trip() {
        let ids = Alphabet::encode("az09").unwrap();
        assert_eq!(ids, vec![0, 25, 26, 35]);
        assert_eq!(Alphabet::string(&ids), "az09");
        assert!(Alphabet::encode("A!").is_err());
    }
}
