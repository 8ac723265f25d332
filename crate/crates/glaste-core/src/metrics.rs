//! Evaluation metrics: MSE, PSNR, SSIM on [0,1] images, and recognition
//! accuracy / character error rate on decoded strings.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map a [-1,1] image to the [0,1] range metrics are defined on.
pub fn to_unit(img: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_vec(
        img.data()
            .iter()
            .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect(),
        img.shape().to_vec(),
    )
}

/// Mean squared error; inputs already in [0,1].
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "mse: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 100 dB
/// for (near-)identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn to_luma(img: &Tensor<f32>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::dim(format!(
                "ssim expects [3,H,W] images, got {:?}",
                img.shape()
            )))
        }
    };
    if c != 3 {
        return Err(Error::dim(format!("ssim expects 3 channels, got {c}")));
    }
    let d = img.data();
    let plane = h * w;
    let luma = (0..plane)
        .map(|i| {
            0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64
        })
        .collect();
    Ok((h, w, luma))
}

/// Structural similarity with a uniform 7x7 window, K1 = 0.01, K2 = 0.03,
/// dynamic range 1, computed on luma and averaged over all window positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "ssim: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, la) = to_luma(a)?;
    let (_, _, lb) = to_luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let va = la[(y0 + dy) * w + x0 + dx];
                    let vb = lb[(y0 + dy) * w + x0 + dx];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Edit distance between two character sequences.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Exact-match fraction and character error rate
/// (sum of edit distances over sum of ground-truth lengths).
pub fn accuracy_and_cer(preds: &[String], gts: &[String]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "accuracy_and_cer: {} predictions vs {} references",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::contract("accuracy_and_cer: empty ground-truth corpus"));
    }
    let total_len: usize = gts.iter().map(|g| g.chars().count()).sum();
    if total_len == 0 {
        return Err(Error::contract(
            "accuracy_and_cer: ground-truth corpus has zero total length",
        ));
    }
    let exact = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    let dist: usize = preds.iter().zip(gts).map(|(p, g)| levenshtein(p, g)).sum();
    Ok((
        exact as f64 / gts.len() as f64,
        dist as f64 / total_len as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_cap_psnr() {
        let mut rng = crate::rng(51);
        let a = to_unit(&Tensor::randn(&mut rng, vec![3, 8, 8], 0.5));
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn uniform_half_difference_closed_form() {
        let a = Tensor::full(vec![3, 8, 8], 0.25f32);
        let b = Tensor::full(vec![3, 8, 8], 0.75f32);
        let m = mse(&a, &b).unwrap();
        assert!((m - 0.25).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 6.0205999132796239).abs() < 1e-6);
    }

    #[test]
    fn psnr_monotone_decreasing_in_mse() {
        let base = Tensor::full(vec![3, 8, 8], 0.5f32);
        let mut last = f64::INFINITY;
        for d in [0.05f32, 0.1, 0.2, 0.4] {
            let other = Tensor::full(vec![3, 8, 8], 0.5 + d);
            let p = psnr(&base, &other).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let mut rng = crate::rng(52);
        let a = to_unit(&Tensor::randn(&mut rng, vec![3, 12, 12], 0.5));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_negative_image_below_one() {
        let mut rng = crate::rng(53);
        let a = to_unit(&Tensor::randn(&mut rng, vec![3, 12, 12], 0.5));
        let b = Tensor::from_vec(
            a.data().iter().map(|&v| 1.0 - v).collect(),
            a.shape().to_vec(),
        );
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_matches_direct_formula_evaluator() {
        // Independent evaluation: explicit window loops on the luma planes,
        // written separately from the implementation above.
        let mut rng = crate::rng(54);
        let a = to_unit(&Tensor::randn(&mut rng, vec![3, 10, 11], 0.5));
        let b = to_unit(&Tensor::randn(&mut rng, vec![3, 10, 11], 0.5));
        let got = ssim(&a, &b).unwrap();

        let luma = |img: &Tensor<f32>| -> Vec<f64> {
            let (h, w) = (10usize, 11usize);
            let d = img.data();
            (0..h * w)
                .map(|i| {
                    0.299 * d[i] as f64
                        + 0.587 * d[h * w + i] as f64
                        + 0.114 * d[2 * h * w + i] as f64
                })
                .collect()
        };
        let (la, lb) = (luma(&a), luma(&b));
        let (h, w, win) = (10usize, 11usize, 7usize);
        let mut scores = Vec::new();
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for dy in 0..win {
                    for dx in 0..win {
                        pa.push(la[(y0 + dy) * w + x0 + dx]);
                        pb.push(lb[(y0 + dy) * w + x0 + dx]);
                    }
                }
                let n = pa.len() as f64;
                let mu_a: f64 = pa.iter().sum::<f64>() / n;
                let mu_b: f64 = pb.iter().sum::<f64>() / n;
                let var_a: f64 = pa.iter().map(|v| (v - mu_a).powi(2)).sum::<f64>() / n;
                let var_b: f64 = pb.iter().map(|v| (v - mu_b).powi(2)).sum::<f64>() / n;
                let cov: f64 = pa
                    .iter()
                    .zip(&pb)
                    .map(|(x, y)| (x - mu_a) * (y - mu_b))
                    .sum::<f64>()
                    / n;
                let c1 = 0.01f64.powi(2);
                let c2 = 0.03f64.powi(2);
                scores.push(
                    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a.powi(2) + mu_b.powi(2) + c1) * (var_a + var_b + c2)),
                );
            }
        }
        let expect = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(vec![3, 5, 5]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn cer_single_substitution() {
        let (acc, cer) = accuracy_and_cer(&["abc".to_string()], &["abd".to_string()]).unwrap();
        assert_eq!(acc, 0.0);
        assert!((cer - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_exact_matches() {
        let xs = vec!["one".to_string(), "two".to_string()];
        let (acc, cer) = accuracy_and_cer(&xs, &xs).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(cer, 0.0);
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        assert!(accuracy_and_cer(&[], &[]).is_err());
    }

    #[test]
    fn levenshtein_matches_brute_force_oracle() {
        // Exhaustive recursion, no memoization: the textbook definition.
        fn brute(a: &[char], b: &[char]) -> usize {
            match (a.split_first(), b.split_first()) {
                (None, _) => b.len(),
                (_, None) => a.len(),
                (Some((ca, ra)), Some((cb, rb))) => {
                    let sub = brute(ra, rb) + usize::from(ca != cb);
                    sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
                }
            }
        }
        let mut rng = crate::rng(55);
        use rand::Rng;
        for _ in 0..50 {
            let len_a = rng.gen_range(0..6);
            let len_b = rng.gen_range(0..6);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> String {
                (0..n)
                    .map(|_| (b'a' + rng.gen_range(0..4u8)) as char)
                    .collect()
            };
            let a = mk(&mut rng, len_a);
            let b = mk(&mut rng, len_b);
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            assert_eq!(levenshtein(&a, &b), brute(&ca, &cb), "{a} vs {b}");
        }
    }

    #[test]
    fn levenshtein_triangle_inequality() {
        let mut rng = crate::rng(56);
        use rand::Rng;
        for _ in 0..30 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
                let n = rng.gen_range(0..8);
                (0..n)
                    .map(|_| (b'a' + rng.gen_range(0..3u8)) as char)
                    .collect()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
