//! End-to-end model assembly, the alternating training loop, recognizer
//! pretraining, checkpoint persistence, and evaluation.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{self, Alphabet, DataConfig, SampleMode, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{theta_from_box, RotatedBox};
use crate::losses::{
    ctc_loss, d_loss, g_adv_loss, l1_joint, perceptual_joint, total_g_loss, FeatNet, LabelSeq,
    LossWeights,
};
use crate::nets::{
    ContentEncoder, FusionHead, Inpainter, Live, NetConfig, Params, PatchGan, Recognizer,
    StyleEncoder, StyleProjections, Synthesizer,
};
use crate::tensor::{adam_update, AdamHyper, AdamState, Gradients, Scalar, Tape, Tensor};

/// Parameter-name prefixes of the generator groups.
pub const GENERATOR_GROUPS: [&str; 6] = [
    "inpainter.",
    "style_encoder.",
    "content_encoder.",
    "synthesizer.",
    "style_proj.",
    "fusion.",
];

pub const DISCRIMINATOR_GROUPS: [&str; 2] = ["d1.", "d2."];

fn in_groups(name: &str, groups: &[&str]) -> bool {
    groups.iter().any(|g| name.starts_with(g))
}

/// The assembled model: every sub-network plus the shared parameter store.
pub struct Model<T: Scalar> {
    pub cfg: NetConfig,
    pub params: Params<T>,
    pub inpainter: Inpainter,
    pub style_encoder: StyleEncoder,
    pub content_encoder: ContentEncoder,
    pub synthesizer: Synthesizer,
    pub style_proj: StyleProjections,
    pub fusion: FusionHead,
    pub d1: PatchGan,
    pub d2: PatchGan,
    pub recognizer: Recognizer,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization; the registration order defines the
    /// checkpoint layout.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng(seed ^ 0x1217);
        let mut params = Params::new();
        let inpainter = Inpainter::init(&mut params, &mut rng, cfg);
        let style_encoder = StyleEncoder::init(&mut params, &mut rng, cfg);
        let content_encoder = ContentEncoder::init(&mut params, &mut rng, cfg);
        let mut proj = None;
        let synthesizer = Synthesizer::init(&mut params, &mut rng, cfg, &mut proj);
        let fusion = FusionHead::init(&mut params, &mut rng, cfg);
        let d1 = PatchGan::init(&mut params, &mut rng, "d1", cfg.disc_width);
        let d2 = PatchGan::init(&mut params, &mut rng, "d2", cfg.disc_width);
        let recognizer = Recognizer::init(&mut params, &mut rng, cfg);
        // The frozen perceptual network is part of the checkpoint unit.
        let feat = FeatNet::<T>::from_seed(cfg.feat_seed);
        for (i, (w, b)) in feat.stage_tensors().iter().enumerate() {
            params.register(format!("feat.stage{i}.w"), w.clone(), false);
            params.register(format!("feat.stage{i}.b"), b.clone(), false);
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
            inpainter,
            style_encoder,
            content_encoder,
            synthesizer,
            style_proj: proj.expect("synthesizer registers projections"),
            fusion,
            d1,
            d2,
            recognizer,
        })
    }

    /// Frozen perceptual feature network, rebuilt from the parameter store.
    pub fn feat_net(&self) -> FeatNet<T> {
        let mut stages = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (
                self.params.id_of(&format!("feat.stage{i}.w")),
                self.params.id_of(&format!("feat.stage{i}.b")),
            ) else {
                break;
            };
            stages.push((self.params.get(w).clone(), self.params.get(b).clone()));
        }
        FeatNet::from_tensors(stages)
    }

    /// Hash of a parameter group's raw bytes (frozen-group invariance checks).
    pub fn group_hash(&self, prefix: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (_, e) in self.params.entries() {
            if !e.name.starts_with(prefix) {
                continue;
            }
            for &v in e.value.data() {
                for byte in v.f64().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn freeze_recognizer(&mut self) {
        self.params.set_trainable_prefix("recognizer.", false);
    }

    pub fn recognizer_frozen(&self) -> bool {
        self.params
            .entries()
            .filter(|(_, e)| e.name.starts_with("recognizer."))
            .all(|(_, e)| !e.trainable)
    }
}

/// Ablation switches; each maps onto one published ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub skip_connections: bool,
    pub local_loss: bool,
    pub paired_data: bool,
    pub use_recognizer: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            skip_connections: true,
            local_loss: true,
            paired_data: true,
            use_recognizer: true,
        }
    }
}

/// Full training configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub mix_ratio: f64,
    pub ablation: AblationFlags,
    pub checkpoint_every: u64,
    /// Reuse one fixed seed list every step (overfit experiments).
    pub frozen_data: bool,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            net: NetConfig::toy(),
            weights: LossWeights::default(),
            lr: 1e-4,
            batch_size: 8,
            iterations: 3000,
            seed: 7,
            mix_ratio: 0.5,
            ablation: AblationFlags::default(),
            checkpoint_every: 1000,
            frozen_data: false,
        }
    }

    /// Published full-scale schedule: batch 12, 500k iterations, 1:1 mixing.
    pub fn paper_scale() -> Self {
        TrainConfig {
            net: NetConfig::paper_scale(),
            weights: LossWeights::default(),
            lr: 1e-4,
            batch_size: 12,
            iterations: 500_000,
            seed: 7,
            mix_ratio: 0.5,
            ablation: AblationFlags::default(),
            checkpoint_every: 10_000,
            frozen_data: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!(
                "mix_ratio must lie in [0,1], got {}",
                self.mix_ratio
            )));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch size and iterations must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    /// Loss weights after applying the local-loss ablation.
    pub fn effective_weights(&self) -> LossWeights {
        if self.ablation.local_loss {
            self.weights
        } else {
            self.weights.without_local()
        }
    }

    /// Paired fraction after applying the paired-data ablation.
    pub fn effective_mix(&self) -> f64 {
        if self.ablation.paired_data {
            self.mix_ratio
        } else {
            0.0
        }
    }
}

/// Flat per-parameter Adam optimizer with one shared step counter.
pub struct Optimizer<T> {
    states: HashMap<usize, AdamState<T>>,
    pub hyper: AdamHyper,
    pub t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(lr: f64) -> Self {
        Optimizer {
            states: HashMap::new(),
            hyper: AdamHyper {
                lr,
                ..AdamHyper::default()
            },
            t: 0,
        }
    }

    /// Apply gradients to the listed parameters at step `self.t` (callers
    /// bump `t` once per iteration before the first apply).
    pub fn apply(
        &mut self,
        params: &mut Params<T>,
        ids: &[crate::nets::ParamId],
        live: &Live<T>,
        grads: &Gradients<T>,
    ) -> Result<()> {
        for &id in ids {
            let value = params.get(id);
            let grad = grads
                .get(live.get(id))
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![T::zero(); value.numel()]);
            let state = self
                .states
                .entry(id_index(id))
                .or_insert_with(|| AdamState::zeros(value.numel()));
            let mut next = value.data().to_vec();
            adam_update(&mut next, &grad, state, self.t, self.hyper)?;
            params.set(id, Tensor::from_vec(next, value.shape().to_vec()));
        }
        Ok(())
    }

    pub fn state_of(&self, id: crate::nets::ParamId) -> Option<&AdamState<T>> {
        self.states.get(&id_index(id))
    }

    pub fn insert_state(&mut self, id: crate::nets::ParamId, state: AdamState<T>) {
        self.states.insert(id_index(id), state);
    }
}

fn id_index(id: crate::nets::ParamId) -> usize {
    id.index()
}

/// Batch of samples lifted into tensors of scalar type T.
pub struct BatchTensors<T> {
    pub scene: Tensor<T>,
    pub reference: Tensor<T>,
    pub ref_patch: Tensor<T>,
    pub contents: Vec<Tensor<T>>,
    pub boxes: Vec<RotatedBox>,
    pub labels: Vec<LabelSeq>,
}

pub fn batch_tensors<T: Scalar>(samples: &[SceneSample]) -> Result<BatchTensors<T>> {
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let n = samples.len();
    let concat3 = |field: &dyn Fn(&SceneSample) -> &Tensor<f32>| -> Tensor<T> {
        let mut data = Vec::with_capacity(n * field(&samples[0]).numel());
        for s in samples {
            data.extend(field(s).data().iter().map(|&v| T::of(v as f64)));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(field(&samples[0]).shape());
        Tensor::from_vec(data, shape)
    };
    let scene = concat3(&|s| &s.scene);
    let reference = concat3(&|s| &s.gt_edited);
    let ref_patch = concat3(&|s| &s.gt_patch);
    let contents = samples
        .iter()
        .map(|s| {
            let c = &s.content;
            let mut shape = vec![1];
            shape.extend_from_slice(c.shape());
            Tensor::from_vec(c.data().iter().map(|&v| T::of(v as f64)).collect(), shape)
        })
        .collect();
    let labels = samples
        .iter()
        .map(|s| {
            LabelSeq::new(
                Alphabet::encode(&s.target_text)?,
                s.target_text.clone(),
                Alphabet::SIZE,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTensors {
        scene,
        reference,
        ref_patch,
        contents,
        boxes: samples.iter().map(|s| s.bx).collect(),
        labels,
    })
}

/// Outputs of one generator pass.
pub struct ForwardOut<T> {
    pub g_b: Tensor<T>,
    pub g_f: Vec<Tensor<T>>,
    pub g_lc: Tensor<T>,
    pub coverage: Tensor<T>,
}

/// Full generator forward: inpaint the masked scene, encode style from the
/// box, synthesize the styled foreground per sample, warp it into the box,
/// and fuse. Output matches the scene extents.
pub fn glaste_forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    live: &Live<T>,
    scene: &Tensor<T>,
    boxes: &[RotatedBox],
    contents: &[Tensor<T>],
) -> Result<ForwardOut<T>> {
    let (n, _, h_l, w_l) = scene.dims4()?;
    if boxes.len() != n || contents.len() != n {
        return Err(Error::contract(format!(
            "glaste_forward: {n} samples but {} boxes / {} contents",
            boxes.len(),
            contents.len()
        )));
    }
    let masked = data::mask_box(tape, scene, boxes)?;
    let g_b = model.inpainter.forward(tape, live, &masked)?;
    let z = model.style_encoder.encode(tape, live, scene, boxes)?;

    let mut warped = Vec::with_capacity(n);
    let mut coverages = Vec::with_capacity(n);
    let mut g_f = Vec::with_capacity(n);
    for i in 0..n {
        let (_, _, h_c, w_c) = contents[i].dims4()?;
        let fc = model.content_encoder.encode(tape, live, &contents[i])?;
        let z_i = tape.slice_batch(&z, i, 1)?;
        let fg = model
            .synthesizer
            .forward(tape, live, &model.style_proj, &fc, &z_i)?;
        let theta = theta_from_box(&boxes[i], (w_c, h_c), (w_l, h_l))?;
        let warp = tape.affine_grid_sample(&fg, &[theta], h_l, w_l)?;
        let ones = Tensor::full(vec![1, 1, h_c, w_c], T::one());
        let cov = tape.affine_grid_sample(&ones, &[theta], h_l, w_l)?;
        g_f.push(fg);
        warped.push(warp);
        coverages.push(cov);
    }
    let warped_refs: Vec<&Tensor<T>> = warped.iter().collect();
    let warped = tape.concat_batch(&warped_refs)?;
    let cov_refs: Vec<&Tensor<T>> = coverages.iter().collect();
    let coverage = tape.concat_batch(&cov_refs)?;
    let g_lc = model
        .fusion
        .forward(tape, live, &g_b, &warped, &coverage)?;
    Ok(ForwardOut {
        g_b,
        g_f,
        g_lc,
        coverage,
    })
}

/// Rotated local patch extraction at the configured fixed size.
pub fn extract_local<T: Scalar>(
    tape: &mut Tape<T>,
    img: &Tensor<T>,
    boxes: &[RotatedBox],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    tape.extract_rotated_patch(img, boxes, out_h, out_w)
}

/// Component losses of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub d: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub per: f64,
    pub ctc: f64,
    pub total: f64,
}

/// Loss-log line format (external interface).
pub fn format_loss_line(step: u64, l: &StepLosses) -> String {
    format!(
        "step={step} d={:.6} g_adv={:.6} l1={:.6} per={:.6} ctc={:.6} total={:.6}",
        l.d, l.g_adv, l.l1, l.per, l.ctc, l.total
    )
}

/// One alternating iteration: discriminator ascent on detached fakes, then a
/// generator step on the weighted total. Returns all component losses.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &BatchTensors<T>,
    tcfg: &TrainConfig,
) -> Result<StepLosses> {
    if tcfg.ablation.use_recognizer && !model.recognizer_frozen() {
        return Err(Error::contract(
            "recognizer must be pretrained and frozen before training",
        ));
    }
    let weights = tcfg.effective_weights();
    let (lh, lw) = (model.cfg.local_h, model.cfg.local_w);
    opt.t += 1;

    let mut tape = Tape::new();
    let live_g = model
        .params
        .live(&mut tape, |e| in_groups(&e.name, &GENERATOR_GROUPS));
    let fwd = glaste_forward(model, &mut tape, &live_g, &batch.scene, &batch.boxes, &batch.contents)?;
    let i_s = extract_local(&mut tape, &batch.reference, &batch.boxes, lh, lw)?;
    let g_c = extract_local(&mut tape, &fwd.g_lc, &batch.boxes, lh, lw)?;

    // Discriminator phase: fakes detached, current discriminator weights.
    let live_d = model
        .params
        .live(&mut tape, |e| in_groups(&e.name, &DISCRIMINATOR_GROUPS));
    let fake_global = fwd.g_lc.detach();
    let fake_local = g_c.detach();
    let d1_real = model.d1.forward(&mut tape, &live_d, &batch.reference)?;
    let d1_fake = model.d1.forward(&mut tape, &live_d, &fake_global)?;
    let d2_real = model.d2.forward(&mut tape, &live_d, &i_s)?;
    let d2_fake = model.d2.forward(&mut tape, &live_d, &fake_local)?;
    let l_d = d_loss(
        &mut tape, &d1_real, &d1_fake, &d2_real, &d2_fake, weights.alpha,
    )?;
    let d_objective = tape.neg(&l_d);
    let d_grads = tape.backward(&d_objective)?;
    let d_ids: Vec<_> = DISCRIMINATOR_GROUPS
        .iter()
        .flat_map(|g| model.params.ids_with_prefix(g))
        .collect();
    opt.apply(&mut model.params, &d_ids, &live_d, &d_grads)?;

    // Generator phase: updated discriminators as constants, fakes attached.
    let live_frozen = model.params.live(&mut tape, |_| false);
    let d1_fake_g = model.d1.forward(&mut tape, &live_frozen, &fwd.g_lc)?;
    let d2_fake_g = model.d2.forward(&mut tape, &live_frozen, &g_c)?;
    let g_adv = g_adv_loss(&mut tape, &d1_fake_g, &d2_fake_g, weights.alpha)?;
    let l1 = l1_joint(
        &mut tape,
        &fwd.g_lc,
        &batch.reference,
        &g_c,
        &batch.ref_patch,
        weights.beta,
    )?;
    let feat = model.feat_net();
    let per = perceptual_joint(
        &mut tape,
        &feat,
        &fwd.g_lc,
        &batch.reference,
        &g_c,
        &batch.ref_patch,
        weights.beta,
    )?;
    let ctc = if tcfg.ablation.use_recognizer {
        let logprobs = model.recognizer.forward(&mut tape, &live_frozen, &g_c)?;
        Some(ctc_loss(&mut tape, &logprobs, &batch.labels)?)
    } else {
        None
    };
    let total = total_g_loss(&mut tape, &g_adv, &l1, &per, ctc.as_ref(), &weights)?;
    if !total.item().is_finite() {
        return Err(Error::NonFinite(format!(
            "generator loss diverged at step {}: {}",
            opt.t,
            total.item()
        )));
    }
    let g_grads = tape.backward(&total)?;
    let g_ids: Vec<_> = GENERATOR_GROUPS
        .iter()
        .flat_map(|g| model.params.ids_with_prefix(g))
        .collect();
    opt.apply(&mut model.params, &g_ids, &live_g, &g_grads)?;

    Ok(StepLosses {
        d: l_d.item().f64(),
        g_adv: g_adv.item().f64(),
        l1: l1.item().f64(),
        per: per.item().f64(),
        ctc: ctc.map(|c| c.item().f64()).unwrap_or(0.0),
        total: total.item().f64(),
    })
}

/// Seeds of the batch drawn at `step`.
pub fn batch_seeds(tcfg: &TrainConfig, step: u64) -> Vec<u64> {
    let n = tcfg.batch_size as u64;
    if tcfg.frozen_data {
        (0..n).map(|i| tcfg.seed.wrapping_add(i)).collect()
    } else {
        (0..n)
            .map(|i| {
                tcfg.seed
                    .wrapping_mul(0x9E3779B97F4A7C15)
                    .wrapping_add(step * n + i)
            })
            .collect()
    }
}

/// Run the full training loop; `on_step` receives every step's losses.
/// Checkpoints land in `out_dir` every `checkpoint_every` steps plus a final
/// one; a non-finite loss aborts with a state dump.
pub fn run_training(
    model: &mut Model<f32>,
    opt: &mut Optimizer<f32>,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(u64, &StepLosses),
) -> Result<()> {
    tcfg.validate()?;
    let dcfg = DataConfig::from_net(&model.cfg);
    let mix = tcfg.effective_mix();
    for step in 0..tcfg.iterations {
        let seeds = batch_seeds(tcfg, step);
        let samples = data::make_batch(&dcfg, &seeds, mix)?;
        let batch = batch_tensors::<f32>(&samples)?;
        match train_step(model, opt, &batch, tcfg) {
            Ok(losses) => {
                on_step(step, &losses);
                if let Some(dir) = out_dir {
                    let due = tcfg.checkpoint_every > 0
                        && (step + 1) % tcfg.checkpoint_every == 0;
                    if due || step + 1 == tcfg.iterations {
                        std::fs::create_dir_all(dir)?;
                        save_checkpoint(model, opt, tcfg, &dir.join(format!("step_{:07}.ckpt", step + 1)))?;
                    }
                }
            }
            Err(e) => {
                if let Some(dir) = out_dir {
                    std::fs::create_dir_all(dir)?;
                    let dump = dir.join("abort_state.ckpt");
                    save_checkpoint(model, opt, tcfg, &dump)?;
                    return Err(Error::NonFinite(format!(
                        "{e}; state dumped to {}",
                        dump.display()
                    )));
                }
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Outcome of recognizer pretraining.
#[derive(Clone, Copy, Debug)]
pub struct PretrainReport {
    pub steps: u64,
    pub heldout_accuracy: f64,
}

/// Train the recognizer alone with CTC on synthetic crops until held-out
/// sequence accuracy reaches `target_acc` or the step budget is exhausted,
/// then freeze it. Falling short of 0.5 accuracy is a hard failure.
pub fn pretrain_recognizer(
    model: &mut Model<f32>,
    tcfg: &TrainConfig,
    max_steps: u64,
    target_acc: f64,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<PretrainReport> {
    let dcfg = DataConfig::from_net(&model.cfg);
    let batch_size = 16usize;
    let heldout: Vec<SceneSample> = (0..64u64)
        .map(|i| data::render_sample(&dcfg, tcfg.seed.wrapping_add(0xE0A1_0000) + i, SampleMode::Paired))
        .collect::<Result<_>>()?;
    let mut opt = Optimizer::<f32>::new(1e-3);
    let rec_ids = model.params.ids_with_prefix("recognizer.");
    let mut accuracy = 0.0;
    let mut steps_done = 0;

    for step in 0..max_steps {
        let seeds: Vec<u64> = (0..batch_size as u64)
            .map(|i| {
                tcfg.seed
                    .wrapping_mul(0xA5A5_5A5A_1234_5678)
                    .wrapping_add(step * batch_size as u64 + i)
            })
            .collect();
        let samples = data::make_batch(&dcfg, &seeds, 1.0)?;
        let batch = batch_tensors::<f32>(&samples)?;
        let mut tape = Tape::new();
        let live = model
            .params
            .live(&mut tape, |e| e.name.starts_with("recognizer."));
        let logprobs = model.recognizer.forward(&mut tape, &live, &batch.ref_patch)?;
        let loss = ctc_loss(&mut tape, &logprobs, &batch.labels)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!(
                "recognizer pretraining loss diverged at step {step}"
            )));
        }
        opt.t += 1;
        let grads = tape.backward(&loss)?;
        opt.apply(&mut model.params, &rec_ids, &live, &grads)?;
        steps_done = step + 1;

        if (step + 1) % 250 == 0 || step + 1 == max_steps {
            accuracy = recognizer_accuracy(model, &heldout)?;
            on_step(step + 1, accuracy);
            if accuracy >= target_acc {
                break;
            }
        }
    }
    if accuracy < 0.5 {
        return Err(Error::contract(format!(
            "recognizer pretraining stalled at accuracy {accuracy:.3} after {steps_done} steps"
        )));
    }
    model.freeze_recognizer();
    Ok(PretrainReport {
        steps: steps_done,
        heldout_accuracy: accuracy,
    })
}

/// Copy pretrained recognizer weights from another model and freeze them.
pub fn adopt_recognizer(dst: &mut Model<f32>, src: &Model<f32>) -> Result<()> {
    if !src.recognizer_frozen() {
        return Err(Error::contract(
            "source checkpoint's recognizer is not marked frozen (pretrain it first)",
        ));
    }
    let ids = dst.params.ids_with_prefix("recognizer.");
    if ids.is_empty() {
        return Err(Error::contract("model has no recognizer parameters"));
    }
    for id in ids {
        let name = dst.params.entry(id).name.clone();
        let sid = src
            .params
            .id_of(&name)
            .ok_or_else(|| Error::contract(format!("source checkpoint lacks '{name}'")))?;
        let value = src.params.get(sid).clone();
        if value.shape() != dst.params.entry(id).value.shape() {
            return Err(Error::contract(format!(
                "recognizer shape mismatch for '{name}': {:?} vs {:?}",
                value.shape(),
                dst.params.entry(id).value.shape()
            )));
        }
        dst.params.set(id, value);
    }
    dst.freeze_recognizer();
    Ok(())
}

/// Scene extents a model can process: divisible by the style stride, with a
/// power-of-two inpainter feature map, and large enough for the
/// discriminator.
pub fn validate_scene_dims(cfg: &NetConfig, h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 {
        return Err(Error::contract(format!(
            "scene {h}x{w} below the 32-pixel minimum"
        )));
    }
    if h % cfg.fs_stride != 0 || w % cfg.fs_stride != 0 {
        return Err(Error::contract(format!(
            "scene {h}x{w} not divisible by the style stride {}",
            cfg.fs_stride
        )));
    }
    let (fh, fw) = (h / cfg.fb_stride, w / cfg.fb_stride);
    if !fh.is_power_of_two() || !fw.is_power_of_two() {
        return Err(Error::contract(format!(
            "inpainter feature map {fh}x{fw} must have power-of-two extents"
        )));
    }
    Ok(())
}

/// Greedy-decode sequence accuracy of the recognizer on sample crops.
pub fn recognizer_accuracy(model: &Model<f32>, samples: &[SceneSample]) -> Result<f64> {
    let batch = batch_tensors::<f32>(samples)?;
    let mut tape = Tape::inference();
    let live = model.params.live(&mut tape, |_| false);
    let logprobs = model.recognizer.forward(&mut tape, &live, &batch.ref_patch)?;
    let decoded = crate::nets::greedy_ctc_decode(&logprobs)?;
    let hits = decoded
        .iter()
        .zip(samples)
        .filter(|(seq, s)| Alphabet::string(seq) == s.target_text)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

// ── Inference and evaluation ────────────────────────────────────────

/// Inference outputs for a batch of samples.
pub struct InferenceOut {
    pub g_b: Tensor<f32>,
    pub g_lc: Tensor<f32>,
    /// Foreground images, one per sample (widths vary).
    pub g_f: Vec<Tensor<f32>>,
    /// [N, 3, local_h, local_w] patches extracted from g_lc.
    pub patches: Tensor<f32>,
    /// Greedy-decoded text per sample.
    pub decoded: Vec<String>,
}

/// Run the generator without recording gradients.
pub fn infer_batch(model: &Model<f32>, samples: &[SceneSample]) -> Result<InferenceOut> {
    let batch = batch_tensors::<f32>(samples)?;
    let mut tape = Tape::inference();
    let live = model.params.live(&mut tape, |_| false);
    let fwd = glaste_forward(model, &mut tape, &live, &batch.scene, &batch.boxes, &batch.contents)?;
    let patches = extract_local(
        &mut tape,
        &fwd.g_lc,
        &batch.boxes,
        model.cfg.local_h,
        model.cfg.local_w,
    )?;
    let logprobs = model.recognizer.forward(&mut tape, &live, &patches)?;
    let decoded = crate::nets::greedy_ctc_decode(&logprobs)?
        .iter()
        .map(|seq| Alphabet::string(seq))
        .collect();
    Ok(InferenceOut {
        g_b: fwd.g_b,
        g_lc: fwd.g_lc,
        g_f: fwd.g_f,
        patches,
        decoded,
    })
}

/// Line-oriented evaluation report.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub sections: Vec<(String, Vec<(String, f64)>)>,
}

impl EvalReport {
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (section, metrics) in &self.sections {
            for (metric, value) in metrics {
                out.push(format!("section={section} metric={metric} value={value:.6}"));
            }
        }
        out
    }

    pub fn get(&self, section: &str, metric: &str) -> Option<f64> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)
            .and_then(|(_, ms)| ms.iter().find(|(m, _)| m == metric))
            .map(|(_, v)| *v)
    }
}

/// Extract sample `i` of an [N,...] batch as its own tensor.
pub fn nth_image(batch: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let shape: Vec<usize> = batch.shape()[1..].to_vec();
    let item: usize = shape.iter().product();
    Tensor::from_vec(batch.data()[i * item..(i + 1) * item].to_vec(), shape)
}

fn image_metrics(
    outputs: &Tensor<f32>,
    references: &Tensor<f32>,
    suffix: &str,
) -> Result<Vec<(String, f64)>> {
    let n = outputs.shape()[0];
    let (mut m, mut p, mut s) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let a = crate::metrics::to_unit(&nth_image(outputs, i));
        let b = crate::metrics::to_unit(&nth_image(references, i));
        m += crate::metrics::mse(&a, &b)?;
        p += crate::metrics::psnr(&a, &b)?;
        s += crate::metrics::ssim(&a, &b)?;
    }
    let n = n as f64;
    Ok(vec![
        (format!("mse_{suffix}"), m / n),
        (format!("psnr_{suffix}"), p / n),
        (format!("ssim_{suffix}"), s / n),
    ])
}

fn section_metrics(model: &Model<f32>, samples: &[SceneSample]) -> Result<Vec<(String, f64)>> {
    let out = infer_batch(model, samples)?;
    let batch = batch_tensors::<f32>(samples)?;
    let mut metrics = image_metrics(&out.patches, &batch.ref_patch, "patch")?;
    metrics.extend(image_metrics(&out.g_lc, &batch.reference, "full")?);
    let gts: Vec<String> = samples.iter().map(|s| s.target_text.clone()).collect();
    let (acc, cer) = crate::metrics::accuracy_and_cer(&out.decoded, &gts)?;
    metrics.push(("acc".to_string(), acc));
    metrics.push(("cer".to_string(), cer));
    Ok(metrics)
}

/// Evaluation lengths mirroring the variable-length experiment design.
pub const EVAL_LENGTHS: [usize; 4] = [1, 2, 9, 10];

/// Evaluate a model on freshly generated held-out splits: a reconstruction
/// section (target equals source), a target-text generation section, and
/// per-length recognition buckets.
pub fn evaluate(model: &Model<f32>, seed: u64, per_section: usize) -> Result<EvalReport> {
    if per_section == 0 {
        return Err(Error::contract("evaluate needs at least one sample per section"));
    }
    let dcfg = DataConfig::from_net(&model.cfg);
    let base = seed ^ 0xE7A1_0000_0000;
    let mut report = EvalReport::default();

    let recon: Vec<SceneSample> = (0..per_section as u64)
        .map(|i| data::render_sample(&dcfg, base + i, SampleMode::Real))
        .collect::<Result<_>>()?;
    report
        .sections
        .push(("reconstruct".to_string(), section_metrics(model, &recon)?));

    let gen: Vec<SceneSample> = (0..per_section as u64)
        .map(|i| data::render_sample(&dcfg, base + 0x1000 + i, SampleMode::Paired))
        .collect::<Result<_>>()?;
    report
        .sections
        .push(("generate".to_string(), section_metrics(model, &gen)?));

    for (li, &len) in EVAL_LENGTHS.iter().enumerate() {
        let bucket: Vec<SceneSample> = (0..per_section as u64)
            .map(|i| {
                data::render_sample_with(
                    &dcfg,
                    base + 0x2000 + (li as u64) * 0x100 + i,
                    SampleMode::Paired,
                    Some(len),
                )
            })
            .collect::<Result<_>>()?;
        let out = infer_batch(model, &bucket)?;
        let gts: Vec<String> = bucket.iter().map(|s| s.target_text.clone()).collect();
        let (acc, cer) = crate::metrics::accuracy_and_cer(&out.decoded, &gts)?;
        report.sections.push((
            format!("generate_len{len}"),
            vec![("acc".to_string(), acc), ("cer".to_string(), cer)],
        ));
    }
    Ok(report)
}

// ── Checkpointing ───────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLSTE001";

fn push_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &ext in shape {
        buf.extend_from_slice(&(ext as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn config_tensor(cfg: &NetConfig) -> Vec<f32> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<f32>, v: usize| out.push(v as f32);
    push(&mut out, cfg.canvas_h);
    push(&mut out, cfg.canvas_w);
    push(&mut out, cfg.content_h);
    push(&mut out, cfg.style_dim);
    push(&mut out, cfg.fs_stride);
    push(&mut out, cfg.fb_stride);
    push(&mut out, cfg.synth_depth);
    push(&mut out, cfg.skip_stages.len());
    for &s in &cfg.skip_stages {
        push(&mut out, s);
    }
    out.push(if cfg.skip_connections { 1.0 } else { 0.0 });
    push(&mut out, cfg.roi_grid);
    push(&mut out, cfg.ffc_depth);
    push(&mut out, cfg.blocks_per_stage);
    push(&mut out, cfg.local_h);
    push(&mut out, cfg.local_w);
    push(&mut out, cfg.alphabet_size);
    for widths in [&cfg.content_widths, &cfg.style_widths, &cfg.inpaint_widths] {
        push(&mut out, widths.len());
        for &w in widths {
            push(&mut out, w);
        }
    }
    push(&mut out, cfg.disc_width);
    push(&mut out, cfg.fusion_width);
    push(&mut out, cfg.recognizer_widths.len());
    for &w in &cfg.recognizer_widths {
        push(&mut out, w);
    }
    // Raw bit storage keeps the 64-bit seed exact inside f32 slots.
    out.push(f32::from_bits((cfg.feat_seed & 0xFFFF_FFFF) as u32));
    out.push(f32::from_bits((cfg.feat_seed >> 32) as u32));
    out
}

fn config_from_tensor(data: &[f32]) -> Result<NetConfig> {
    let mut pos = 0usize;
    let mut next = || -> Result<f32> {
        let v = data
            .get(pos)
            .copied()
            .ok_or_else(|| Error::Checkpoint("config tensor truncated".into()))?;
        pos += 1;
        Ok(v)
    };
    let mut next_usize = || -> Result<usize> { Ok(next()? as usize) };
    let canvas_h = next_usize()?;
    let canvas_w = next_usize()?;
    let content_h = next_usize()?;
    let style_dim = next_usize()?;
    let fs_stride = next_usize()?;
    let fb_stride = next_usize()?;
    let synth_depth = next_usize()?;
    let n_skips = next_usize()?;
    let mut skip_stages = Vec::with_capacity(n_skips);
    for _ in 0..n_skips {
        skip_stages.push(next_usize()?);
    }
    let skip_connections = next_usize()? == 1;
    let roi_grid = next_usize()?;
    let ffc_depth = next_usize()?;
    let blocks_per_stage = next_usize()?;
    let local_h = next_usize()?;
    let local_w = next_usize()?;
    let alphabet_size = next_usize()?;
    let mut widths3 = Vec::new();
    for _ in 0..3 {
        let n = next_usize()?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(next_usize()?);
        }
        widths3.push(v);
    }
    let disc_width = next_usize()?;
    let fusion_width = next_usize()?;
    let n_rec = next_usize()?;
    let mut recognizer_widths = Vec::with_capacity(n_rec);
    for _ in 0..n_rec {
        recognizer_widths.push(next_usize()?);
    }
    let lo = next()?.to_bits() as u64;
    let hi = next()?.to_bits() as u64;
    let inpaint_widths = widths3.pop().expect("three width lists");
    let style_widths = widths3.pop().expect("three width lists");
    let content_widths = widths3.pop().expect("three width lists");
    Ok(NetConfig {
        canvas_h,
        canvas_w,
        content_h,
        style_dim,
        fs_stride,
        fb_stride,
        synth_depth,
        skip_stages,
        skip_connections,
        roi_grid,
        ffc_depth,
        blocks_per_stage,
        local_h,
        local_w,
        alphabet_size,
        content_widths,
        style_widths,
        inpaint_widths,
        disc_width,
        fusion_width,
        recognizer_widths,
        feat_seed: lo | (hi << 32),
    })
}

/// Serialize the model, optimizer moments, configuration and ablation flags.
/// Layout: magic, then per entry name/rank/extents/f32 data, then a trailing
/// little-endian u64 step counter.
pub fn save_checkpoint(
    model: &Model<f32>,
    opt: &Optimizer<f32>,
    tcfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_entry(
        &mut buf,
        "config.net",
        &[config_tensor(&model.cfg).len()],
        &config_tensor(&model.cfg),
    );
    let flags = [
        tcfg.ablation.skip_connections,
        tcfg.ablation.local_loss,
        tcfg.ablation.paired_data,
        tcfg.ablation.use_recognizer,
    ]
    .map(|b| if b { 1.0f32 } else { 0.0 });
    push_entry(&mut buf, "config.ablation", &[4], &flags);
    let trainable: Vec<f32> = model
        .params
        .entries()
        .map(|(_, e)| if e.trainable { 1.0f32 } else { 0.0 })
        .collect();
    push_entry(&mut buf, "config.trainable", &[trainable.len()], &trainable);
    for (id, e) in model.params.entries() {
        push_entry(&mut buf, &e.name, e.value.shape(), e.value.data());
        if e.trainable {
            if let Some(state) = opt.state_of(id) {
                push_entry(&mut buf, &format!("adam.m.{}", e.name), e.value.shape(), &state.m);
                push_entry(&mut buf, &format!("adam.v.{}", e.name), e.value.shape(), &state.v);
            }
        }
    }
    buf.extend_from_slice(&opt.t.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct RawEntry {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_entries(bytes: &[u8]) -> Result<(Vec<(String, RawEntry)>, u64)> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected {:?}",
            std::str::from_utf8(CHECKPOINT_MAGIC).expect("ascii magic")
        )));
    }
    let mut pos = 8usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut entries = Vec::new();
    while pos + 8 < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, RawEntry { shape, data }));
    }
    if pos + 8 != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "trailing bytes malformed: {} bytes after entries, expected 8",
            bytes.len() - pos
        )));
    }
    let step = u64::from_le_bytes(bytes[pos..].try_into().expect("8 bytes"));
    Ok((entries, step))
}

/// Load a checkpoint written by [`save_checkpoint`]: rebuilds the model from
/// the embedded configuration, restores every parameter and Adam moment, and
/// verifies the name sets match exactly.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Optimizer<f32>, AblationFlags)> {
    let bytes = std::fs::read(path)?;
    let (entries, step) = read_entries(&bytes)?;
    let mut map: HashMap<String, RawEntry> = HashMap::new();
    for (name, e) in entries {
        if map.insert(name.clone(), e).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry '{name}'")));
        }
    }
    let cfg_entry = map
        .remove("config.net")
        .ok_or_else(|| Error::Checkpoint("missing entry 'config.net'".into()))?;
    let cfg = config_from_tensor(&cfg_entry.data)?;
    let flags_entry = map
        .remove("config.ablation")
        .ok_or_else(|| Error::Checkpoint("missing entry 'config.ablation'".into()))?;
    if flags_entry.data.len() != 4 {
        return Err(Error::Checkpoint("config.ablation must have 4 entries".into()));
    }
    let flags = AblationFlags {
        skip_connections: flags_entry.data[0] == 1.0,
        local_loss: flags_entry.data[1] == 1.0,
        paired_data: flags_entry.data[2] == 1.0,
        use_recognizer: flags_entry.data[3] == 1.0,
    };
    let trainable_entry = map
        .remove("config.trainable")
        .ok_or_else(|| Error::Checkpoint("missing entry 'config.trainable'".into()))?;

    let mut model = Model::<f32>::init(&cfg, 0)?;
    if trainable_entry.data.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "trainable mask has {} entries for {} parameters",
            trainable_entry.data.len(),
            model.params.len()
        )));
    }
    let mut opt = Optimizer::<f32>::new(AdamHyper::default().lr);
    opt.t = step;

    let ids: Vec<_> = model.params.entries().map(|(id, _)| id).collect();
    for id in ids {
        let (name, shape, trainable_now) = {
            let e = model.params.entry(id);
            (e.name.clone(), e.value.shape().to_vec(), e.trainable)
        };
        let raw = map
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter group '{name}'")))?;
        if raw.shape != shape {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                raw.shape, shape
            )));
        }
        model.params.set(id, Tensor::from_vec(raw.data, shape.clone()));
        let was_trainable = trainable_entry.data[id_index(id)] == 1.0;
        if was_trainable != trainable_now {
            model.params.set_trainable(id, was_trainable);
        }
        if was_trainable {
            let m = map.remove(&format!("adam.m.{name}"));
            let v = map.remove(&format!("adam.v.{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                if m.shape != shape || v.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for '{name}' has mismatched shape"
                    )));
                }
                opt.insert_state(id, AdamState { m: m.data, v: v.data });
            }
        }
    }
    if let Some((name, _)) = map.into_iter().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected extra entry '{name}' in checkpoint"
        )));
    }
    Ok((model, opt, flags))
}
