//! Image and dataset-split persistence.
//!
//! Images are 8-bit RGB (PNG, or PPM when the extension says so); tensors in
//! [-1, 1] are quantized to the same 8-bit lattice at render time, so a save
//! and load returns bit-identical tensors. A split directory holds one
//! manifest plus four images per sample.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::tensor::Tensor;

use super::{SampleMode, SceneSample};

/// Write a [3,H,W] tensor in [-1,1] as an 8-bit RGB image; the format comes
/// from the extension (.png default, .ppm/.pnm supported).
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Image(format!(
                "save_image expects [3,H,W], got {:?}",
                img.shape()
            )))
        }
    };
    if c != 3 {
        return Err(Error::Image(format!("save_image expects 3 channels, got {c}")));
    }
    let data = img.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = data[ch * h * w + y * w + x];
                ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Read an 8-bit RGB image as a [3,H,W] tensor in [-1,1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, vec![3, h, w]))
}

const MANIFEST_HEADER: &str = "glaste-dataset v1";

/// Write a split: manifest plus scene/content/gt/gtpatch images per sample.
pub fn save_split(samples: &[SceneSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "{MANIFEST_HEADER}").expect("string write");
    writeln!(manifest, "count={}", samples.len()).expect("string write");
    for (id, s) in samples.iter().enumerate() {
        writeln!(
            manifest,
            "id={id} seed={} mode={} box={},{},{},{},{} src={} tgt={}",
            s.seed,
            s.mode.as_str(),
            s.bx.cx,
            s.bx.cy,
            s.bx.w,
            s.bx.h,
            s.bx.theta.to_degrees(),
            s.source_text,
            s.target_text,
        )
        .expect("string write");
        save_image(&s.scene, &dir.join(format!("{id:05}_scene.png")))?;
        save_image(&s.content, &dir.join(format!("{id:05}_content.png")))?;
        save_image(&s.gt_edited, &dir.join(format!("{id:05}_gt.png")))?;
        save_image(&s.gt_patch, &dir.join(format!("{id:05}_gtpatch.png")))?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn field<'a>(token: &'a str, key: &str) -> Result<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::Dataset(format!("expected field '{key}=' in '{token}'")))
}

/// Load a split saved by [`save_split`]; tensors come back bit-identical.
pub fn load_split(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some(MANIFEST_HEADER) => {}
        other => {
            return Err(Error::Dataset(format!(
                "bad manifest header: {other:?} (expected '{MANIFEST_HEADER}')"
            )))
        }
    }
    let count: usize = field(
        lines
            .next()
            .ok_or_else(|| Error::Dataset("manifest missing count line".into()))?,
        "count",
    )?
    .parse()
    .map_err(|e| Error::Dataset(format!("bad count: {e}")))?;

    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(Error::Dataset(format!(
                "record {i}: expected 6 fields, got {}",
                tokens.len()
            )));
        }
        let id: usize = field(tokens[0], "id")?
            .parse()
            .map_err(|e| Error::Dataset(format!("record {i}: bad id: {e}")))?;
        let seed: u64 = field(tokens[1], "seed")?
            .parse()
            .map_err(|e| Error::Dataset(format!("record {i}: bad seed: {e}")))?;
        let mode = SampleMode::parse(field(tokens[2], "mode")?)?;
        let nums: Vec<f64> = field(tokens[3], "box")?
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Dataset(format!("record {i}: bad box number: {e}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 5 {
            return Err(Error::Dataset(format!(
                "record {i}: box needs 5 numbers, got {}",
                nums.len()
            )));
        }
        let bx = RotatedBox::new(nums[0], nums[1], nums[2], nums[3], nums[4].to_radians());
        let source_text = field(tokens[4], "src")?.to_string();
        let target_text = field(tokens[5], "tgt")?.to_string();

        out.push(SceneSample {
            seed,
            mode,
            scene: load_image(&dir.join(format!("{id:05}_scene.png")))?,
            bx,
            source_text,
            target_text,
            content: load_image(&dir.join(format!("{id:05}_content.png")))?,
            gt_edited: load_image(&dir.join(format!("{id:05}_gt.png")))?,
            gt_patch: load_image(&dir.join(format!("{id:05}_gtpatch.png")))?,
        });
    }
    if out.len() != count {
        return Err(Error::Dataset(format!(
            "manifest count {count} but {} records present",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, DataConfig};

    #[test]
    fn image_round_trip_bit_exact() {
        let cfg = DataConfig::from_net(&crate::nets::NetConfig::toy());
        let s = crate::data::render_sample(&cfg, 9, SampleMode::Paired).unwrap();
        let dir = std::env::temp_dir().join(format!("glaste_io_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scene.png");
        save_image(&s.scene, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(s.scene.data(), back.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_round_trip_bit_exact() {
        let cfg = DataConfig::from_net(&crate::nets::NetConfig::toy());
        let seeds: Vec<u64> = (100..104).collect();
        let samples = make_batch(&cfg, &seeds, 0.5).unwrap();
        let dir = std::env::temp_dir().join(format!("glaste_split_test_{}", std::process::id()));
        save_split(&samples, &dir).unwrap();
        let loaded = load_split(&dir).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.mode, b.mode);
            assert_eq!(a.source_text, b.source_text);
            assert_eq!(a.target_text, b.target_text);
            assert_eq!(a.bx, b.bx, "box must round-trip bit-exactly");
            assert_eq!(a.scene.data(), b.scene.data());
            assert_eq!(a.content.data(), b.content.data());
            assert_eq!(a.gt_edited.data(), b.gt_edited.data());
            assert_eq!(a.gt_patch.data(), b.gt_patch.data());
        }
        // Idempotence: dumping the reload produces identical manifests.
        let dir2 = dir.join("again");
        save_split(&loaded, &dir2).unwrap();
        let m1 = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
        let m2 = std::fs::read_to_string(dir2.join("manifest.txt")).unwrap();
        assert_eq!(m1, m2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_manifest_is_rejected() {
        let dir = std::env::temp_dir().join(format!("glaste_bad_split_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("manifest.txt"), "glaste-dataset v1\ncount=3\n").unwrap();
        assert!(matches!(load_split(&dir), Err(Error::Dataset(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
