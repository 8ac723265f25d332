//! Training objectives: adversarial (global + weighted local), joint L1,
//! joint perceptual against a frozen feature network, CTC recognition loss,
//! and the weighted total.
//!
//! Conventions shared by all losses: expectations and norms are means, so the
//! weights are resolution-independent, and probabilities inside logs are
//! floored at 1e-7.

use crate::error::{Error, Result};
use crate::gradcheck::{max_rel_err, OpCheck};
use crate::tensor::{Scalar, Tape, Tensor};

/// Balancing weights. Defaults are the published training configuration:
/// alpha = 1, beta = 10, lambda1 = 10, lambda2 = 1, lambda3 = 0.1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 10.0,
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }

    /// The "without local loss" ablation: alpha = beta = lambda3 = 0.
    pub fn without_local(mut self) -> Self {
        self.alpha = 0.0;
        self.beta = 0.0;
        self.lambda3 = 0.0;
        self
    }
}

/// Target character sequence: alphabet indices excluding blank, plus the raw
/// string kept for error-rate reporting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSeq {
    pub symbols: Vec<usize>,
    pub raw: String,
}

impl LabelSeq {
    pub fn new(symbols: Vec<usize>, raw: impl Into<String>, alphabet_size: usize) -> Result<Self> {
        if let Some(&bad) = symbols.iter().find(|&&s| s >= alphabet_size) {
            return Err(Error::contract(format!(
                "label symbol {bad} outside alphabet of size {alphabet_size}"
            )));
        }
        Ok(LabelSeq {
            symbols,
            raw: raw.into(),
        })
    }
}

/// Discriminator objective (higher is better for the discriminator):
/// mean log D1(real) + mean log(1-D1(fake)) + alpha * (local pair).
/// Inputs are raw logit maps; fakes must already be detached.
pub fn d_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d1_real: &Tensor<T>,
    d1_fake: &Tensor<T>,
    d2_real: &Tensor<T>,
    d2_fake: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let real1 = tape.log_sigmoid(d1_real);
    let real1 = tape.mean_all(&real1);
    let fake1 = tape.log_one_minus_sigmoid(d1_fake);
    let fake1 = tape.mean_all(&fake1);
    let global = tape.add(&real1, &fake1)?;

    let real2 = tape.log_sigmoid(d2_real);
    let real2 = tape.mean_all(&real2);
    let fake2 = tape.log_one_minus_sigmoid(d2_fake);
    let fake2 = tape.mean_all(&fake2);
    let local = tape.add(&real2, &fake2)?;
    let local = tape.scale(&local, T::of(alpha));

    tape.add(&global, &local)
}

/// Non-saturating generator adversarial loss:
/// -mean log D1(fake) - alpha * mean log D2(fake). Fakes stay attached.
pub fn g_adv_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d1_fake: &Tensor<T>,
    d2_fake: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    let lg1 = tape.log_sigmoid(d1_fake);
    let lg1 = tape.mean_all(&lg1);
    let lg1 = tape.neg(&lg1);
    let lg2 = tape.log_sigmoid(d2_fake);
    let lg2 = tape.mean_all(&lg2);
    let lg2 = tape.scale(&lg2, T::of(-alpha));
    tape.add(&lg1, &lg2)
}

/// Joint reconstruction loss: mean|G_Lc - ref| + beta * mean|G_c - ref_local|.
pub fn l1_joint<T: Scalar>(
    tape: &mut Tape<T>,
    g_global: &Tensor<T>,
    ref_global: &Tensor<T>,
    g_local: &Tensor<T>,
    ref_local: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    let global = tape.mean_abs_diff(g_global, ref_global)?;
    let local = tape.mean_abs_diff(g_local, ref_local)?;
    let local = tape.scale(&local, T::of(beta));
    tape.add(&global, &local)
}

/// Frozen random-weight feature extractor standing in for a pretrained
/// perceptual network: four stride-2 conv stages, leaky-ReLU, fixed seed.
/// Parameters are never registered on a tape, so they receive no updates.
#[derive(Clone)]
pub struct FeatNet<T> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

pub const FEAT_NET_WIDTHS: [usize; 4] = [8, 12, 16, 24];

impl<T: Scalar> FeatNet<T> {
    /// Rebuild from externally stored stage tensors (checkpoint path).
    pub fn from_tensors(stages: Vec<(Tensor<T>, Tensor<T>)>) -> Self {
        FeatNet { stages }
    }

    /// Stage (weight, bias) tensors in order.
    pub fn stage_tensors(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.stages
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = crate::rng(seed ^ 0xfea7);
        let mut stages = Vec::new();
        let mut cin = 3;
        for &cout in FEAT_NET_WIDTHS.iter() {
            let std = (2.0 / (cin * 16) as f64).sqrt();
            stages.push((
                Tensor::randn(&mut rng, vec![cout, cin, 4, 4], std),
                Tensor::zeros(vec![cout]),
            ));
            cin = cout;
        }
        FeatNet { stages }
    }

    /// Stage outputs phi_i(x), i = 1..4. Input spatial extents must survive
    /// four stride-2 halvings.
    pub fn features(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let conv = tape.conv2d(&cur, w, b, 2, 1)?;
            cur = tape.leaky_relu(&conv, T::of(0.2));
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Joint perceptual loss over the frozen feature stages:
/// sum_i mean|phi_i(G) - phi_i(ref)| for the global pair plus beta times the
/// local pair.
pub fn perceptual_joint<T: Scalar>(
    tape: &mut Tape<T>,
    feat: &FeatNet<T>,
    g_global: &Tensor<T>,
    ref_global: &Tensor<T>,
    g_local: &Tensor<T>,
    ref_local: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    let pair = |tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        let fa = feat.features(tape, a)?;
        let fb = feat.features(tape, b)?;
        let mut acc = Tensor::scalar(T::zero());
        for (ya, yb) in fa.iter().zip(&fb) {
            let d = tape.mean_abs_diff(ya, yb)?;
            acc = tape.add(&acc, &d)?;
        }
        Ok(acc)
    };
    let global = pair(tape, g_global, ref_global)?;
    let local = pair(tape, g_local, ref_local)?;
    let local = tape.scale(&local, T::of(beta));
    tape.add(&global, &local)
}

fn lse(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Blank-extended label: blank, s1, blank, s2, ..., blank. Blank index is
/// the last class (alphabet size).
fn extended_label(symbols: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * symbols.len() + 1);
    ext.push(blank);
    for &s in symbols {
        ext.push(s);
        ext.push(blank);
    }
    ext
}

fn min_frames(symbols: &[usize]) -> usize {
    let repeats = symbols.windows(2).filter(|w| w[0] == w[1]).count();
    symbols.len() + repeats
}

/// CTC negative log-likelihood via the forward dynamic program in log space,
/// averaged over the batch. `logprobs` is [T, N, A+1] of per-frame
/// log-probabilities with blank as the last class; gradients flow into it.
pub fn ctc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logprobs: &Tensor<T>,
    labels: &[LabelSeq],
) -> Result<Tensor<T>> {
    let (t_len, n, k) = match *logprobs.shape() {
        [t, n, k] => (t, n, k),
        _ => {
            return Err(Error::dim(format!(
                "ctc_loss expects [T,N,classes], got {:?}",
                logprobs.shape()
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::contract(format!(
            "ctc_loss: {} labels for batch of {n}",
            labels.len()
        )));
    }
    if k < 2 {
        return Err(Error::contract("ctc_loss needs at least one symbol plus blank"));
    }
    let blank = k - 1;
    for label in labels {
        if let Some(&bad) = label.symbols.iter().find(|&&s| s >= blank) {
            return Err(Error::contract(format!(
                "label symbol {bad} collides with blank/alphabet of size {blank}"
            )));
        }
        if min_frames(&label.symbols) > t_len {
            return Err(Error::InfeasibleLabel(format!(
                "label '{}' needs at least {} frames, got {t_len}",
                label.raw,
                min_frames(&label.symbols)
            )));
        }
    }

    let data = logprobs.data();
    let at = |t: usize, ni: usize, class: usize| data[(t * n + ni) * k + class].f64();

    let mut total = 0.0f64;
    // Per-sample per-frame per-class gradient of the mean NLL.
    let mut grad = vec![T::zero(); t_len * n * k];
    let inv_n = 1.0 / n as f64;

    for (ni, label) in labels.iter().enumerate() {
        let ext = extended_label(&label.symbols, blank);
        let s_len = ext.len();
        let neg = f64::NEG_INFINITY;

        // Forward variable, emission at t included.
        let mut alpha = vec![neg; t_len * s_len];
        alpha[0] = at(0, ni, ext[0]);
        if s_len > 1 {
            alpha[1] = at(0, ni, ext[1]);
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let mut terms = [neg; 3];
                terms[0] = alpha[(t - 1) * s_len + s];
                if s >= 1 {
                    terms[1] = alpha[(t - 1) * s_len + s - 1];
                }
                if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                    terms[2] = alpha[(t - 1) * s_len + s - 2];
                }
                let prev = lse(&terms);
                alpha[t * s_len + s] = if prev == neg {
                    neg
                } else {
                    prev + at(t, ni, ext[s])
                };
            }
        }
        let log_p = lse(&[
            alpha[(t_len - 1) * s_len + s_len - 1],
            if s_len > 1 {
                alpha[(t_len - 1) * s_len + s_len - 2]
            } else {
                neg
            },
        ]);
        if log_p == f64::NEG_INFINITY {
            return Err(Error::InfeasibleLabel(format!(
                "no feasible alignment for label '{}'",
                label.raw
            )));
        }
        total += -log_p;

        // Backward variable, emission at t included.
        let mut beta = vec![neg; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = at(t_len - 1, ni, ext[s_len - 1]);
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = at(t_len - 1, ni, ext[s_len - 2]);
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let mut terms = [neg; 3];
                terms[0] = beta[(t + 1) * s_len + s];
                if s + 1 < s_len {
                    terms[1] = beta[(t + 1) * s_len + s + 1];
                }
                if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                    terms[2] = beta[(t + 1) * s_len + s + 2];
                }
                let next = lse(&terms);
                beta[t * s_len + s] = if next == neg {
                    neg
                } else {
                    next + at(t, ni, ext[s])
                };
            }
        }

        // d(-log p)/d u(t, class) = -exp(lse_{s: ext[s]=class}(alpha+beta-u) - log p).
        for t in 0..t_len {
            let mut per_class = vec![neg; k];
            for (s, &class) in ext.iter().enumerate() {
                let a = alpha[t * s_len + s];
                let b = beta[t * s_len + s];
                if a == neg || b == neg {
                    continue;
                }
                let g = a + b - at(t, ni, class);
                per_class[class] = lse(&[per_class[class], g]);
            }
            for (class, &g) in per_class.iter().enumerate() {
                if g != neg {
                    grad[(t * n + ni) * k + class] = T::of(-((g - log_p).exp()) * inv_n);
                }
            }
        }
    }

    let parents = vec![tape.parent_id(logprobs)];
    Ok(tape.emit(
        vec![T::of(total * inv_n)],
        vec![1],
        parents,
        Box::new(move |dy| {
            let scale = dy[0];
            vec![Some(grad.iter().map(|&g| g * scale).collect())]
        }),
    ))
}

/// Weighted total generator objective:
/// g_adv + lambda1 * L1 + lambda2 * perceptual + lambda3 * recognition.
pub fn total_g_loss<T: Scalar>(
    tape: &mut Tape<T>,
    g_adv: &Tensor<T>,
    l1: &Tensor<T>,
    perceptual: &Tensor<T>,
    recognition: Option<&Tensor<T>>,
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    weights.validate()?;
    let mut total = g_adv.clone();
    let wl1 = tape.scale(l1, T::of(weights.lambda1));
    total = tape.add(&total, &wl1)?;
    let wper = tape.scale(perceptual, T::of(weights.lambda2));
    total = tape.add(&total, &wper)?;
    if let Some(rec) = recognition {
        let wrec = tape.scale(rec, T::of(weights.lambda3));
        total = tape.add(&total, &wrec)?;
    }
    Ok(total)
}

/// Gradient checks for every loss, registered into the main suite.
pub(crate) fn loss_checks() -> Vec<OpCheck> {
    let mut checks = Vec::new();

    checks.push(OpCheck {
        name: "d_loss",
        run: Box::new(|seed| {
            let mut rng = crate::rng(seed);
            let shapes = vec![1usize, 1, 3, 3];
            let ins: Vec<Tensor<f64>> = (0..4)
                .map(|_| Tensor::randn(&mut rng, shapes.clone(), 1.5))
                .collect();
            max_rel_err(
                |tape, ins| d_loss(tape, &ins[0], &ins[1], &ins[2], &ins[3], 0.7),
                &ins,
            )
        }),
    });

    checks.push(OpCheck {
        name: "g_adv_loss",
        run: Box::new(|seed| {
            let mut rng = crate::rng(seed);
            let a = Tensor::randn(&mut rng, vec![1, 1, 3, 3], 1.5);
            let b = Tensor::randn(&mut rng, vec![1, 1, 2, 2], 1.5);
            max_rel_err(|tape, ins| g_adv_loss(tape, &ins[0], &ins[1], 1.0), &[a, b])
        }),
    });

    checks.push(OpCheck {
        name: "l1_joint",
        run: Box::new(|seed| {
            let mut rng = crate::rng(seed);
            let ins: Vec<Tensor<f64>> = (0..4)
                .map(|_| Tensor::randn(&mut rng, vec![1, 2, 3, 3], 1.0))
                .collect();
            max_rel_err(
                |tape, ins| l1_joint(tape, &ins[0], &ins[1], &ins[2], &ins[3], 10.0),
                &ins,
            )
        }),
    });

    checks.push(OpCheck {
        name: "perceptual_joint",
        run: Box::new(|seed| {
            let mut rng = crate::rng(seed);
            let feat = FeatNet::from_seed(99);
            let ins: Vec<Tensor<f64>> = (0..4)
                .map(|_| Tensor::randn(&mut rng, vec![1, 3, 16, 16], 0.5))
                .collect();
            max_rel_err(
                move |tape, ins| {
                    perceptual_joint(tape, &feat, &ins[0], &ins[1], &ins[2], &ins[3], 10.0)
                },
                &ins,
            )
        }),
    });

    checks.push(OpCheck {
        name: "ctc_loss",
        run: Box::new(|seed| {
            let mut rng = crate::rng(seed);
            let (t, n, k) = (5usize, 2usize, 4usize);
            let raw = Tensor::randn(&mut rng, vec![t, n, k], 1.0);
            let labels = vec![
                LabelSeq::new(vec![0, 1], "ab", k - 1).unwrap(),
                LabelSeq::new(vec![2], "c", k - 1).unwrap(),
            ];
            max_rel_err(
                move |tape, ins| {
                    let lp = tape.log_softmax_last(&ins[0])?;
                    ctc_loss(tape, &lp, &labels)
                },
                &[raw],
            )
        }),
    });

    checks.push(OpCheck {
        name: "total_g_loss",
        run: Box::new(|seed| {
            let mut rng = crate::rng(seed);
            let parts: Vec<Tensor<f64>> = (0..4)
                .map(|_| Tensor::randn(&mut rng, vec![1], 1.0))
                .collect();
            max_rel_err(
                |tape, ins| {
                    total_g_loss(
                        tape,
                        &ins[0],
                        &ins[1],
                        &ins[2],
                        Some(&ins[3]),
                        &LossWeights::default(),
                    )
                },
                &parts,
            )
        }),
    });

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive CTC oracle: sum the probability of every frame path that
    /// collapses to the label.
    pub(crate) fn ctc_brute_force(logprobs: &[f64], t: usize, k: usize, label: &[usize]) -> f64 {
        let blank = k - 1;
        let mut total = 0.0f64;
        let mut path = vec![0usize; t];
        fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
            let mut out = Vec::new();
            let mut prev = usize::MAX;
            for &p in path {
                if p != prev && p != blank {
                    out.push(p);
                }
                prev = p;
            }
            out
        }
        fn rec(
            depth: usize,
            t: usize,
            k: usize,
            path: &mut Vec<usize>,
            logprobs: &[f64],
            label: &[usize],
            blank: usize,
            total: &mut f64,
        ) {
            if depth == t {
                if collapse(path, blank) == label {
                    let lp: f64 = path
                        .iter()
                        .enumerate()
                        .map(|(ti, &c)| logprobs[ti * k + c])
                        .sum();
                    *total += lp.exp();
                }
                return;
            }
            for c in 0..k {
                path[depth] = c;
                rec(depth + 1, t, k, path, logprobs, label, blank, total);
            }
        }
        rec(0, t, k, &mut path, logprobs, label, blank, &mut total);
        total
    }

    #[test]
    fn d_loss_closed_form_at_half() {
        let mut tape = Tape::<f64>::new();
        let zeros = Tensor::zeros(vec![1, 1, 2, 2]);
        let loss = d_loss(&mut tape, &zeros, &zeros, &zeros, &zeros, 1.0).unwrap();
        assert!((loss.item() - 4.0 * 0.5f64.ln()).abs() < 1e-9);
        assert!((loss.item() + 2.7725887222397811).abs() < 1e-9);
    }

    #[test]
    fn d_loss_alpha_zero_is_global_only() {
        let mut rng = crate::rng(21);
        let mut tape = Tape::<f64>::new();
        let r1 = Tensor::randn(&mut rng, vec![1, 1, 3, 3], 1.0);
        let f1 = Tensor::randn(&mut rng, vec![1, 1, 3, 3], 1.0);
        let r2 = Tensor::randn(&mut rng, vec![1, 1, 2, 2], 1.0);
        let f2 = Tensor::randn(&mut rng, vec![1, 1, 2, 2], 1.0);
        let with_alpha0 = d_loss(&mut tape, &r1, &f1, &r2, &f2, 0.0).unwrap();
        let lr = tape.log_sigmoid(&r1);
        let lr = tape.mean_all(&lr);
        let lf = tape.log_one_minus_sigmoid(&f1);
        let lf = tape.mean_all(&lf);
        let global = tape.add(&lr, &lf).unwrap();
        assert!((with_alpha0.item() - global.item()).abs() < 1e-12);
    }

    #[test]
    fn g_adv_closed_form_at_half() {
        let mut tape = Tape::<f64>::new();
        let zeros = Tensor::zeros(vec![1, 1, 2, 2]);
        let loss = g_adv_loss(&mut tape, &zeros, &zeros, 1.0).unwrap();
        assert!((loss.item() - 1.3862943611198906).abs() < 1e-9);
    }

    #[test]
    fn g_adv_alpha_scales_local_linearly() {
        let mut rng = crate::rng(22);
        let f1 = Tensor::randn(&mut rng, vec![1, 1, 3, 3], 1.0);
        let f2 = Tensor::randn(&mut rng, vec![1, 1, 2, 2], 1.0);
        let mut tape = Tape::<f64>::new();
        let l0 = g_adv_loss(&mut tape, &f1, &f2, 0.0).unwrap().item();
        let l1 = g_adv_loss(&mut tape, &f1, &f2, 1.0).unwrap().item();
        let l2 = g_adv_loss(&mut tape, &f1, &f2, 2.0).unwrap().item();
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn g_adv_gradient_pushes_logits_up() {
        let mut tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(vec![0.3, -0.5], vec![1, 1, 1, 2]);
        let leaf = tape.leaf(&logits);
        let loss = g_adv_loss(&mut tape, &leaf, &leaf, 1.0).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for &g in grads.get(&leaf).unwrap().data() {
            assert!(g < 0.0, "gradient must push D(G) upward, got {g}");
        }
    }

    #[test]
    fn l1_identical_pairs_zero() {
        let mut rng = crate::rng(23);
        let a = Tensor::<f64>::randn(&mut rng, vec![1, 3, 4, 4], 1.0);
        let b = Tensor::<f64>::randn(&mut rng, vec![1, 3, 2, 2], 1.0);
        let mut tape = Tape::new();
        let loss = l1_joint(&mut tape, &a, &a, &b, &b, 10.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn l1_uniform_global_difference() {
        let a = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        let b = Tensor::full(vec![1, 1, 4, 4], 0.1);
        let c = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let mut tape = Tape::new();
        let loss = l1_joint(&mut tape, &a, &b, &c, &c, 10.0).unwrap();
        assert!((loss.item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn perceptual_identical_zero_and_symmetric() {
        let mut rng = crate::rng(24);
        let feat = FeatNet::from_seed(7);
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 3, 16, 16], 0.7);
        let y = Tensor::<f64>::randn(&mut rng, vec![1, 3, 16, 16], 0.7);
        let z = Tensor::<f64>::randn(&mut rng, vec![1, 3, 16, 16], 0.7);
        let mut tape = Tape::new();
        let zero = perceptual_joint(&mut tape, &feat, &x, &x, &y, &y, 10.0).unwrap();
        assert_eq!(zero.item(), 0.0);
        let xy = perceptual_joint(&mut tape, &feat, &x, &y, &z, &z, 10.0).unwrap();
        let yx = perceptual_joint(&mut tape, &feat, &y, &x, &z, &z, 10.0).unwrap();
        assert!((xy.item() - yx.item()).abs() < 1e-12);
    }

    #[test]
    fn perceptual_monotone_under_blending() {
        let mut rng = crate::rng(25);
        let feat = FeatNet::from_seed(7);
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 3, 16, 16], 0.7);
        let noise = Tensor::<f64>::randn(&mut rng, vec![1, 3, 16, 16], 0.7);
        let dummy = Tensor::<f64>::zeros(vec![1, 3, 16, 16]);
        let mut vals = Vec::new();
        for t in [0.0, 0.5, 1.0] {
            let mut tape = Tape::new();
            let blend: Vec<f64> = x
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&a, &n)| (1.0 - t) * a + t * n)
                .collect();
            let y = Tensor::from_vec(blend, vec![1, 3, 16, 16]);
            let loss = perceptual_joint(&mut tape, &feat, &x, &y, &dummy, &dummy, 0.0).unwrap();
            vals.push(loss.item());
        }
        assert!(vals[0] <= vals[1] + 1e-12 && vals[1] <= vals[2] + 1e-12, "{vals:?}");
    }

    #[test]
    fn ctc_single_frame_single_path() {
        let mut tape = Tape::<f64>::new();
        // Classes: a, b, blank. p(a) = 0.6.
        let lp = Tensor::from_vec(
            vec![0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()],
            vec![1, 1, 3],
        );
        let labels = vec![LabelSeq::new(vec![0], "a", 2).unwrap()];
        let loss = ctc_loss(&mut tape, &lp, &labels).unwrap();
        assert!((loss.item() - 0.5108256237659907).abs() < 1e-9);
    }

    #[test]
    fn ctc_two_frames_uniform_third() {
        let mut tape = Tape::<f64>::new();
        let third = (1.0f64 / 3.0).ln();
        let lp = Tensor::from_vec(vec![third; 6], vec![2, 1, 3]);
        let labels = vec![LabelSeq::new(vec![0], "a", 2).unwrap()];
        let loss = ctc_loss(&mut tape, &lp, &labels).unwrap();
        // Paths aa, a-, -a: total 3/9.
        assert!((loss.item() - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ctc_matches_exhaustive_path_enumeration() {
        let mut rng = crate::rng(26);
        use rand::Rng;
        for trial in 0..40 {
            let t = rng.gen_range(1..=6usize);
            let k = rng.gen_range(2..=5usize);
            let l_max = t.min(3);
            let l = rng.gen_range(0..=l_max);
            let symbols: Vec<usize> = (0..l).map(|_| rng.gen_range(0..k - 1)).collect();
            if super::min_frames(&symbols) > t {
                continue;
            }
            let raw = Tensor::<f64>::randn(&mut rng, vec![t, 1, k], 1.0);
            let mut tape = Tape::new();
            let lp = tape.log_softmax_last(&raw).unwrap();
            let labels = vec![LabelSeq::new(symbols.clone(), "", k - 1).unwrap()];
            let loss = ctc_loss(&mut tape, &lp, &labels).unwrap();
            let brute = ctc_brute_force(lp.data(), t, k, &symbols);
            let expect = -brute.ln();
            assert!(
                (loss.item() - expect).abs() < 1e-6,
                "trial {trial}: dp {} vs brute {expect}",
                loss.item()
            );
        }
    }

    #[test]
    fn ctc_infeasible_label_rejected() {
        let mut tape = Tape::<f64>::new();
        let lp = Tensor::from_vec(vec![0.0; 3], vec![1, 1, 3]);
        let labels = vec![LabelSeq::new(vec![0, 1], "ab", 2).unwrap()];
        assert!(matches!(
            ctc_loss(&mut tape, &lp, &labels),
            Err(Error::InfeasibleLabel(_))
        ));
        // Adjacent repeats need a separating blank.
        let lp2 = Tensor::from_vec(vec![0.0; 6], vec![2, 1, 3]);
        let labels2 = vec![LabelSeq::new(vec![0, 0], "aa", 2).unwrap()];
        assert!(matches!(
            ctc_loss(&mut tape, &lp2, &labels2),
            Err(Error::InfeasibleLabel(_))
        ));
    }

    #[test]
    fn ctc_nonnegative_on_random_inputs() {
        let mut rng = crate::rng(27);
        for _ in 0..10 {
            let raw = Tensor::<f64>::randn(&mut rng, vec![4, 1, 4], 1.0);
            let mut tape = Tape::new();
            let lp = tape.log_softmax_last(&raw).unwrap();
            let labels = vec![LabelSeq::new(vec![1], "b", 3).unwrap()];
            let loss = ctc_loss(&mut tape, &lp, &labels).unwrap();
            assert!(loss.item() >= 0.0);
        }
    }

    #[test]
    fn total_defaults_and_linearity() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta), (1.0, 10.0));
        assert_eq!((w.lambda1, w.lambda2, w.lambda3), (10.0, 1.0, 0.1));

        let mut tape = Tape::<f64>::new();
        let adv = Tensor::scalar(0.4);
        let l1 = Tensor::scalar(0.3);
        let per = Tensor::scalar(0.2);
        let rec = Tensor::scalar(0.5);
        let zero_w = LossWeights {
            alpha: 1.0,
            beta: 10.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let only_adv = total_g_loss(&mut tape, &adv, &l1, &per, Some(&rec), &zero_w).unwrap();
        assert!((only_adv.item() - 0.4).abs() < 1e-12);

        let lam1 = total_g_loss(&mut tape, &adv, &l1, &per, Some(&rec), &w).unwrap();
        let mut w2 = w;
        w2.lambda1 *= 2.0;
        let lam2 = total_g_loss(&mut tape, &adv, &l1, &per, Some(&rec), &w2).unwrap();
        assert!(((lam2.item() - lam1.item()) - w.lambda1 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn without_local_zeroes_the_three_weights() {
        let w = LossWeights::default().without_local();
        assert_eq!((w.alpha, w.beta, w.lambda3), (0.0, 0.0, 0.0));
        assert_eq!((w.lambda1, w.lambda2), (10.0, 1.0));
    }
}
