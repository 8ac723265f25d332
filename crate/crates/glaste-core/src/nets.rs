//! Network definitions: style encoder, content encoder, AdaIN-conditioned
//! text synthesizer with skip connections, patch discriminators, the small
//! CTC recognizer, the Fourier-convolution inpainter, and the fusion head.
//!
//! Parameters live in a [`Params`] registry keyed by stable names; network
//! structs hold [`ParamId`] handles plus layer hyper-parameters. A forward
//! pass works against a [`Live`] view, which registers each parameter on the
//! tape as either a tracked leaf or a constant, so one model can serve the
//! discriminator phase, the generator phase, and inference without copies.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::spectral::{ffc_residual_stack, FfcWeights};
use crate::tensor::{Scalar, Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ADAIN_EPS: f64 = 1e-5;

/// Adaptive instance normalization: standardize per sample and channel, then
/// scale by z_s and shift by z_b (both [N, C]).
pub fn adain<T: Scalar>(
    tape: &mut Tape<T>,
    fc: &Tensor<T>,
    z_s: &Tensor<T>,
    z_b: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let standardized = tape.instance_standardize(fc, T::of(eps))?;
    tape.channel_affine(&standardized, z_s, z_b)
}

// ── Parameter registry ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order (stable across save/load).
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named, ordered collection of all learnable tensors. Iteration order is
/// registration order and is the checkpoint order.
pub struct Params<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Register every parameter on the tape: tracked leaves where `track`
    /// says so (and the entry is trainable), constants otherwise.
    pub fn live<F>(&self, tape: &mut Tape<T>, track: F) -> Live<T>
    where
        F: Fn(&ParamEntry<T>) -> bool,
    {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable && track(e) {
                    tape.leaf(&e.value)
                } else {
                    e.value.detach()
                }
            })
            .collect();
        Live { tensors }
    }

    /// Cast every parameter (used to lift an f32 model into the f64
    /// gradient-check path).
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Params::new()
    }
}

/// Tape-registered view of all parameters for one forward phase.
pub struct Live<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Live<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }
}

// ── Configuration ───────────────────────────────────────────────────

/// Architecture hyper-parameters. `toy()` is the desk-scale default;
/// `paper_scale()` records the published full-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Content image height H_c; widths are per-sample, divisible by 32.
    pub content_h: usize,
    /// Style vector length d.
    pub style_dim: usize,
    /// Total downsampling of the style backbone producing FS.
    pub fs_stride: usize,
    /// Total downsampling of the inpainter trunk producing FB.
    pub fb_stride: usize,
    /// Residual stages in the text synthesizer (equals content stages).
    pub synth_depth: usize,
    /// Synthesizer stages after which encoder maps are concatenated.
    pub skip_stages: Vec<usize>,
    pub skip_connections: bool,
    /// Rotated RoIAlign grid resolution.
    pub roi_grid: usize,
    /// FFC residual blocks in the inpainter.
    pub ffc_depth: usize,
    /// Residual blocks per encoder stage.
    pub blocks_per_stage: usize,
    /// Fixed local-patch extraction size (recognizer height first).
    pub local_h: usize,
    pub local_w: usize,
    /// Symbols excluding blank.
    pub alphabet_size: usize,
    /// Per-stage widths.
    pub content_widths: Vec<usize>,
    pub style_widths: Vec<usize>,
    pub inpaint_widths: Vec<usize>,
    pub disc_width: usize,
    pub fusion_width: usize,
    pub recognizer_widths: Vec<usize>,
    /// Seed of the frozen perceptual substitute network.
    pub feat_seed: u64,
}

impl NetConfig {
    pub fn toy() -> Self {
        NetConfig {
            canvas_h: 64,
            canvas_w: 64,
            content_h: 32,
            style_dim: 128,
            fs_stride: 16,
            fb_stride: 8,
            synth_depth: 5,
            skip_stages: vec![1, 2, 3],
            skip_connections: true,
            roi_grid: 7,
            ffc_depth: 2,
            blocks_per_stage: 1,
            local_h: 32,
            local_w: 128,
            alphabet_size: 36,
            content_widths: vec![10, 14, 20, 28, 28],
            style_widths: vec![10, 14, 20],
            inpaint_widths: vec![10, 14, 20],
            disc_width: 10,
            fusion_width: 12,
            recognizer_widths: vec![16, 24, 32],
            feat_seed: 20240501,
        }
    }

    /// Published full-scale configuration: 256x256 canvas, content height 64,
    /// style dimension 512, ResNet34-width backbones. Recorded for
    /// documentation and config validation; not sized for desk training.
    pub fn paper_scale() -> Self {
        NetConfig {
            canvas_h: 256,
            canvas_w: 256,
            content_h: 64,
            style_dim: 512,
            fs_stride: 16,
            fb_stride: 8,
            synth_depth: 5,
            skip_stages: vec![1, 2, 3],
            skip_connections: true,
            roi_grid: 7,
            ffc_depth: 3,
            blocks_per_stage: 2,
            local_h: 64,
            local_w: 256,
            alphabet_size: 36,
            content_widths: vec![64, 128, 256, 512, 512],
            style_widths: vec![64, 128, 256],
            inpaint_widths: vec![64, 96, 128],
            disc_width: 64,
            fusion_width: 64,
            recognizer_widths: vec![64, 128, 256],
            feat_seed: 20240501,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !self.fs_stride.is_power_of_two() || !self.fb_stride.is_power_of_two() {
            return err(format!(
                "backbone strides must be powers of two, got {} and {}",
                self.fs_stride, self.fb_stride
            ));
        }
        if self.canvas_h % self.fs_stride != 0 || self.canvas_w % self.fs_stride != 0 {
            return err(format!(
                "canvas {}x{} not divisible by style stride {}",
                self.canvas_h, self.canvas_w, self.fs_stride
            ));
        }
        if self.canvas_h % self.fb_stride != 0 || self.canvas_w % self.fb_stride != 0 {
            return err("canvas not divisible by inpainter stride".to_string());
        }
        let fb_h = self.canvas_h / self.fb_stride;
        let fb_w = self.canvas_w / self.fb_stride;
        if !fb_h.is_power_of_two() || !fb_w.is_power_of_two() {
            return err(format!(
                "inpainter feature map {fb_h}x{fb_w} must have power-of-two extents for the FFT"
            ));
        }
        if self.synth_depth != self.content_widths.len() {
            return err(format!(
                "synthesizer depth {} must equal content stage count {}",
                self.synth_depth,
                self.content_widths.len()
            ));
        }
        if self.synth_depth < 2 {
            return err("synthesizer depth must be >= 2".to_string());
        }
        if self
            .skip_stages
            .iter()
            .any(|&k| k == 0 || k > self.synth_depth - 2)
        {
            return err(format!(
                "skip stages {:?} must lie in 1..={}",
                self.skip_stages,
                self.synth_depth - 2
            ));
        }
        if self.content_h % (1 << self.synth_depth) != 0 {
            return err(format!(
                "content height {} must be divisible by {}",
                self.content_h,
                1 << self.synth_depth
            ));
        }
        if self.style_widths.len() + 1 != log2(self.fs_stride) {
            return err(format!(
                "style backbone needs {} stage widths before the final {} one",
                log2(self.fs_stride) - 1,
                self.style_dim
            ));
        }
        if self.inpaint_widths.len() != log2(self.fb_stride) {
            return err("inpainter needs one width per stride-2 stage".to_string());
        }
        if self.local_h < 32 || self.local_w < 32 {
            return err("local patch extents must be >= 32 for the discriminator".to_string());
        }
        if self.local_h % 16 != 0 || self.local_w % 16 != 0 {
            return err("local patch extents must be divisible by 16".to_string());
        }
        if self.local_w % 4 != 0 {
            return err("local patch width must be divisible by 4 (recognizer frames)".to_string());
        }
        if self.recognizer_widths.len() != 3 {
            return err("recognizer needs exactly 3 stage widths".to_string());
        }
        if self.alphabet_size == 0 {
            return err("alphabet must not be empty".to_string());
        }
        if self.blocks_per_stage == 0 || self.ffc_depth == 0 || self.roi_grid == 0 {
            return err("depths and grid sizes must be >= 1".to_string());
        }
        Ok(())
    }

    /// Input channel width of each synthesizer block, after any skip concat.
    pub fn synth_input_widths(&self) -> Vec<usize> {
        let cw = &self.content_widths;
        let depth = self.synth_depth;
        let mut widths = Vec::with_capacity(depth);
        let mut cur = cw[depth - 1];
        for j in 1..=depth {
            widths.push(cur);
            let mut out = if j < depth { cw[depth - 1 - j] } else { cw[0].min(16) };
            if j == depth {
                out = self.fusion_width.min(cw[0]);
            }
            if self.skip_connections && self.skip_stages.contains(&j) {
                out += cw[depth - 1 - j];
            }
            cur = out;
        }
        widths
    }

    /// Frames emitted by the recognizer for a patch of width w.
    pub fn recognizer_frames(&self, w: usize) -> usize {
        w / 4
    }
}

fn log2(x: usize) -> usize {
    x.trailing_zeros() as usize
}

// ── Layers ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = params.register(format!("{name}.w"), Tensor::randn(rng, vec![cout, cin, k, k], std), true);
        let b = params.register(format!("{name}.b"), Tensor::zeros(vec![cout]), true);
        ConvLayer { w, b, stride, pad }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        tape.conv2d(x, live.get(self.w), live.get(self.b), self.stride, self.pad)
    }
}

/// conv-lrelu-conv plus a (possibly projected) shortcut.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    proj: Option<ConvLayer>,
}

impl ResBlock {
    fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let conv1 = ConvLayer::init(params, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1);
        let conv2 = ConvLayer::init(params, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let proj = (cin != cout)
            .then(|| ConvLayer::init(params, rng, &format!("{name}.proj"), cin, cout, 1, 1, 0));
        ResBlock { conv1, conv2, proj }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let h = self.conv1.forward(tape, live, x)?;
        let h = tape.leaky_relu(&h, T::of(LEAKY_SLOPE));
        let h = self.conv2.forward(tape, live, &h)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(tape, live, x)?,
            None => x.clone(),
        };
        let sum = tape.add(&h, &shortcut)?;
        Ok(tape.leaky_relu(&sum, T::of(LEAKY_SLOPE)))
    }
}

/// Stride-2 downsampling stage: strided conv followed by residual blocks.
#[derive(Clone, Debug)]
struct DownStage {
    down: ConvLayer,
    blocks: Vec<ResBlock>,
}

impl DownStage {
    fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        blocks: usize,
    ) -> Self {
        let down = ConvLayer::init(params, rng, &format!("{name}.down"), cin, cout, 4, 2, 1);
        let blocks = (0..blocks)
            .map(|i| ResBlock::init(params, rng, &format!("{name}.res{i}"), cout, cout))
            .collect();
        DownStage { down, blocks }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut cur = self.down.forward(tape, live, x)?;
        cur = tape.leaky_relu(&cur, T::of(LEAKY_SLOPE));
        for b in &self.blocks {
            cur = b.forward(tape, live, &cur)?;
        }
        Ok(cur)
    }
}

// ── Style encoder ───────────────────────────────────────────────────

/// Residual CNN with total stride `fs_stride`, pooled over the box by
/// rotated RoIAlign into a style vector whose length never depends on the
/// box size.
pub struct StyleEncoder {
    stages: Vec<DownStage>,
    stride: usize,
    grid: usize,
    style_dim: usize,
}

impl StyleEncoder {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        cfg: &NetConfig,
    ) -> Self {
        let mut widths = cfg.style_widths.clone();
        widths.push(cfg.style_dim);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(DownStage::init(
                params,
                rng,
                &format!("style_encoder.stage{i}"),
                cin,
                w,
                cfg.blocks_per_stage,
            ));
            cin = w;
        }
        StyleEncoder {
            stages,
            stride: cfg.fs_stride,
            grid: cfg.roi_grid,
            style_dim: cfg.style_dim,
        }
    }

    /// Style feature map FS at 1/stride resolution.
    pub fn feature_map<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        scene: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut cur = scene.clone();
        for s in &self.stages {
            cur = s.forward(tape, live, &cur)?;
        }
        Ok(cur)
    }

    /// z = avg-pool of bilinear samples on the rotated grid inside each box.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        scene: &Tensor<T>,
        boxes: &[RotatedBox],
    ) -> Result<Tensor<T>> {
        let fs = self.feature_map(tape, live, scene)?;
        let scaled: Vec<RotatedBox> = boxes.iter().map(|b| b.scaled(self.stride as f64)).collect();
        let z = tape.rotated_roi_align(&fs, &scaled, self.grid, self.grid)?;
        debug_assert_eq!(z.shape()[1], self.style_dim);
        Ok(z)
    }
}

// ── Content encoder ─────────────────────────────────────────────────

/// Five stride-2 stages producing feature maps at 1/2^i resolution.
pub struct ContentEncoder {
    stages: Vec<DownStage>,
}

impl ContentEncoder {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        cfg: &NetConfig,
    ) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.content_widths.iter().enumerate() {
            stages.push(DownStage::init(
                params,
                rng,
                &format!("content_encoder.stage{i}"),
                cin,
                w,
                cfg.blocks_per_stage,
            ));
            cin = w;
        }
        ContentEncoder { stages }
    }

    /// FC_i for i = 1..=depth; extents halve per stage.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        content: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let (_, _, h, w) = content.dims4()?;
        let div = 1usize << self.stages.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::contract(format!(
                "content extents {h}x{w} must be divisible by {div}"
            )));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = content.clone();
        for s in &self.stages {
            cur = s.forward(tape, live, &cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

// ── Style projections and synthesizer ───────────────────────────────

/// One learnable linear map per AdaIN site producing (z_s, z_b); biases start
/// at (1, 0) so AdaIN begins as plain instance normalization.
pub struct StyleProjections {
    sites: Vec<(ParamId, ParamId, usize)>,
}

impl StyleProjections {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        style_dim: usize,
        site_channels: &[usize],
    ) -> Self {
        let sites = site_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let w = params.register(
                    format!("style_proj.site{i}.w"),
                    Tensor::randn(rng, vec![2 * c, style_dim], 0.02),
                    true,
                );
                let mut bias = vec![T::zero(); 2 * c];
                for v in bias.iter_mut().take(c) {
                    *v = T::one();
                }
                let b = params.register(
                    format!("style_proj.site{i}.b"),
                    Tensor::from_vec(bias, vec![2 * c]),
                    true,
                );
                (w, b, c)
            })
            .collect();
        StyleProjections { sites }
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// (z_s, z_b) for one AdaIN site.
    pub fn project<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        z: &Tensor<T>,
        site: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (w, b, c) = *self
            .sites
            .get(site)
            .ok_or_else(|| Error::contract(format!("unknown AdaIN site {site}")))?;
        let zz = tape.linear(z, live.get(w), live.get(b))?;
        let z_s = tape.slice_cols(&zz, 0, c)?;
        let z_b = tape.slice_cols(&zz, c, c)?;
        Ok((z_s, z_b))
    }
}

struct SynthBlock {
    res: ResBlock,
    site: usize,
}

/// Mirror of the content encoder: residual up-blocks that apply AdaIN, then
/// 2x upsampling, concatenating encoder maps at the configured stages.
pub struct Synthesizer {
    blocks: Vec<SynthBlock>,
    to_rgb: ConvLayer,
    skip_stages: Vec<usize>,
    skip_connections: bool,
    depth: usize,
}

impl Synthesizer {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        cfg: &NetConfig,
        projections_out: &mut Option<StyleProjections>,
    ) -> Self {
        let widths = cfg.synth_input_widths();
        let depth = cfg.synth_depth;
        let cw = &cfg.content_widths;
        let mut blocks = Vec::with_capacity(depth);
        let mut site_channels = Vec::with_capacity(depth);
        for j in 1..=depth {
            let cin = widths[j - 1];
            let cout = if j < depth {
                cw[depth - 1 - j]
            } else {
                cfg.fusion_width.min(cw[0])
            };
            site_channels.push(cin);
            blocks.push(SynthBlock {
                res: ResBlock::init(params, rng, &format!("synthesizer.block{j}"), cin, cout),
                site: j - 1,
            });
        }
        let last_out = if depth >= 1 { cfg.fusion_width.min(cw[0]) } else { cw[0] };
        let to_rgb = ConvLayer::init(params, rng, "synthesizer.to_rgb", last_out, 3, 3, 1, 1);
        *projections_out = Some(StyleProjections::init(
            params,
            rng,
            cfg.style_dim,
            &site_channels,
        ));
        Synthesizer {
            blocks,
            to_rgb,
            skip_stages: cfg.skip_stages.clone(),
            skip_connections: cfg.skip_connections,
            depth,
        }
    }

    /// fc_list comes from [`ContentEncoder::encode`]; z is one style vector
    /// per sample. Output is [N, 3, H_c, W_c] in [-1, 1].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        projections: &StyleProjections,
        fc_list: &[Tensor<T>],
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if fc_list.len() != self.depth {
            return Err(Error::dim(format!(
                "synthesizer expects {} encoder maps, got {}",
                self.depth,
                fc_list.len()
            )));
        }
        let mut cur = fc_list[self.depth - 1].clone();
        for (j, block) in self.blocks.iter().enumerate() {
            let stage = j + 1;
            let (z_s, z_b) = projections.project(tape, live, z, block.site)?;
            let styled = adain(tape, &cur, &z_s, &z_b, ADAIN_EPS)?;
            let res = block.res.forward(tape, live, &styled)?;
            cur = tape.upsample_nearest2x(&res)?;
            if self.skip_connections && self.skip_stages.contains(&stage) {
                let skip = &fc_list[self.depth - 1 - stage];
                if skip.shape()[2..] != cur.shape()[2..] {
                    return Err(Error::dim(format!(
                        "skip junction {stage}: {:?} vs {:?}",
                        skip.shape(),
                        cur.shape()
                    )));
                }
                cur = tape.concat_channels(&[&cur, skip])?;
            }
        }
        let rgb = self.to_rgb.forward(tape, live, &cur)?;
        Ok(tape.tanh(&rgb))
    }
}

// ── Discriminators ──────────────────────────────────────────────────

/// PatchGAN: four stride-2 blocks and one stride-1 block, kernel 4, emitting
/// a map of per-patch realness logits.
pub struct PatchGan {
    layers: Vec<ConvLayer>,
}

impl PatchGan {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        name: &str,
        base: usize,
    ) -> Self {
        let widths = [base, base * 2, base * 4, base * 4];
        let mut layers = Vec::with_capacity(5);
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(ConvLayer::init(
                params,
                rng,
                &format!("{name}.conv{i}"),
                cin,
                w,
                4,
                2,
                1,
            ));
            cin = w;
        }
        layers.push(ConvLayer::init(params, rng, &format!("{name}.logits"), cin, 1, 4, 1, 1));
        PatchGan { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        img: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (_, _, h, w) = img.dims4()?;
        if h < 32 || w < 32 {
            return Err(Error::contract(format!(
                "discriminator input {h}x{w} below the 32-pixel minimum"
            )));
        }
        let mut cur = img.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(tape, live, &cur)?;
            if i + 1 < self.layers.len() {
                cur = tape.leaky_relu(&cur, T::of(LEAKY_SLOPE));
            }
        }
        Ok(cur)
    }
}

// ── Recognizer ──────────────────────────────────────────────────────

/// Column-feature CTC recognizer: convolutional stages, height collapse, a
/// 1-D convolution over frames in place of a recurrent layer, per-frame
/// log-probabilities over alphabet-plus-blank.
pub struct Recognizer {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    frame_w: ParamId,
    frame_b: ParamId,
    head: ConvLayer,
    pub input_h: usize,
}

impl Recognizer {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        cfg: &NetConfig,
    ) -> Self {
        let [r1, r2, r3]: [usize; 3] = cfg.recognizer_widths.clone().try_into().expect("3 widths");
        let conv1 = ConvLayer::init(params, rng, "recognizer.conv1", 3, r1, 3, 1, 1);
        let conv2 = ConvLayer::init(params, rng, "recognizer.conv2", r1, r2, 3, 1, 1);
        let conv3 = ConvLayer::init(params, rng, "recognizer.conv3", r2, r3, 3, 1, 1);
        let std = (2.0 / (r3 * 3) as f64).sqrt();
        let frame_w = params.register(
            "recognizer.frame_conv.w",
            Tensor::randn(rng, vec![r3, r3, 1, 3], std),
            true,
        );
        let frame_b = params.register("recognizer.frame_conv.b", Tensor::zeros(vec![r3]), true);
        let head = ConvLayer::init(
            params,
            rng,
            "recognizer.head",
            r3,
            cfg.alphabet_size + 1,
            1,
            1,
            0,
        );
        Recognizer {
            conv1,
            conv2,
            conv3,
            frame_w,
            frame_b,
            head,
            input_h: cfg.local_h,
        }
    }

    /// [N, 3, h, w] -> [T = w/4, N, alphabet+1] log-probabilities.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        patch: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (_, _, h, w) = patch.dims4()?;
        if h != self.input_h {
            return Err(Error::contract(format!(
                "recognizer expects height {}, got {h}",
                self.input_h
            )));
        }
        if w % 4 != 0 || w < 8 {
            return Err(Error::contract(format!(
                "recognizer width {w} must be a positive multiple of 4"
            )));
        }
        let slope = T::of(LEAKY_SLOPE);
        let c = self.conv1.forward(tape, live, patch)?;
        let c = tape.leaky_relu(&c, slope);
        let c = tape.avgpool2d(&c)?;
        let c = self.conv2.forward(tape, live, &c)?;
        let c = tape.leaky_relu(&c, slope);
        let c = tape.avgpool2d(&c)?;
        let c = self.conv3.forward(tape, live, &c)?;
        let c = tape.leaky_relu(&c, slope);
        let cols = tape.collapse_height_mean(&c)?;
        // 1-D convolution over frames: kernel (1, 3).
        let fc = tape.conv2d_spec(
            &cols,
            live.get(self.frame_w),
            live.get(self.frame_b),
            crate::tensor::ConvSpec {
                kh: 1,
                kw: 3,
                sh: 1,
                sw: 1,
                ph: 0,
                pw: 1,
            },
        )?;
        let fc = tape.leaky_relu(&fc, slope);
        let logits = self.head.forward(tape, live, &fc)?;
        let frames = tape.frames_from_map(&logits)?;
        tape.log_softmax_last(&frames)
    }
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks. Blank is the
/// last class. Returns one symbol sequence per batch item.
pub fn greedy_ctc_decode<T: Scalar>(logprobs: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    let (t_len, n, k) = match *logprobs.shape() {
        [t, n, k] => (t, n, k),
        _ => {
            return Err(Error::dim(format!(
                "greedy_ctc_decode expects [T,N,classes], got {:?}",
                logprobs.shape()
            )))
        }
    };
    let blank = k - 1;
    let data = logprobs.data();
    let mut out = vec![Vec::new(); n];
    for (ni, seq) in out.iter_mut().enumerate() {
        let mut prev = usize::MAX;
        for t in 0..t_len {
            let row = &data[(t * n + ni) * k..][..k];
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
                .map(|(i, _)| i)
                .expect("non-empty class axis");
            if arg != prev && arg != blank {
                seq.push(arg);
            }
            prev = arg;
        }
    }
    Ok(out)
}

// ── Inpainter and fusion head ───────────────────────────────────────

/// Masked-scene inpainter: stride-2 trunk to 1/fb_stride resolution, a
/// residual stack of Fourier-convolution blocks, and an upsampling decoder
/// back to a [-1,1] RGB canvas.
pub struct Inpainter {
    down: Vec<ConvLayer>,
    ffc: Vec<(ParamId, ParamId)>,
    up: Vec<ConvLayer>,
    to_rgb: ConvLayer,
}

impl Inpainter {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        cfg: &NetConfig,
    ) -> Self {
        let widths = &cfg.inpaint_widths;
        let mut down = Vec::new();
        let mut cin = 4;
        for (i, &w) in widths.iter().enumerate() {
            down.push(ConvLayer::init(
                params,
                rng,
                &format!("inpainter.down{i}"),
                cin,
                w,
                4,
                2,
                1,
            ));
            cin = w;
        }
        let c = *widths.last().expect("inpaint widths");
        let ffc = (0..cfg.ffc_depth)
            .map(|i| {
                let proto = FfcWeights::<T>::init(rng, c);
                let w = params.register(format!("inpainter.ffc{i}.w"), proto.weight, true);
                let b = params.register(format!("inpainter.ffc{i}.b"), proto.bias, true);
                (w, b)
            })
            .collect();
        let mut up = Vec::new();
        for i in (0..widths.len()).rev() {
            let cout = if i == 0 { widths[0] } else { widths[i - 1] };
            up.push(ConvLayer::init(
                params,
                rng,
                &format!("inpainter.up{i}"),
                widths[i],
                cout,
                3,
                1,
                1,
            ));
        }
        let to_rgb = ConvLayer::init(params, rng, "inpainter.to_rgb", widths[0], 3, 3, 1, 1);
        Inpainter {
            down,
            ffc,
            up,
            to_rgb,
        }
    }

    /// masked: [N, 4, H, W] (zeroed RGB plus mask channel) -> G_b [N,3,H,W].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        masked: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let mut cur = masked.clone();
        for layer in &self.down {
            cur = layer.forward(tape, live, &cur)?;
            cur = tape.leaky_relu(&cur, slope);
        }
        let weights: Vec<FfcWeights<T>> = self
            .ffc
            .iter()
            .map(|&(w, b)| FfcWeights {
                weight: live.get(w).clone(),
                bias: live.get(b).clone(),
                identity_activation: false,
            })
            .collect();
        cur = ffc_residual_stack(tape, &cur, &weights)?;
        for layer in &self.up {
            cur = tape.upsample_nearest2x(&cur)?;
            cur = layer.forward(tape, live, &cur)?;
            cur = tape.leaky_relu(&cur, slope);
        }
        let rgb = self.to_rgb.forward(tape, live, &cur)?;
        Ok(tape.tanh(&rgb))
    }
}

/// Blends the inpainted background with the warped foreground: residual
/// blocks over concat(G_b, warped, coverage) and a final tanh layer.
pub struct FusionHead {
    stem: ConvLayer,
    res: ResBlock,
    to_rgb: ConvLayer,
}

impl FusionHead {
    pub fn init<T: Scalar, R: rand::Rng>(
        params: &mut Params<T>,
        rng: &mut R,
        cfg: &NetConfig,
    ) -> Self {
        let f = cfg.fusion_width;
        let stem = ConvLayer::init(params, rng, "fusion.stem", 7, f, 3, 1, 1);
        let res = ResBlock::init(params, rng, "fusion.res", f, f);
        let to_rgb = ConvLayer::init(params, rng, "fusion.to_rgb", f, 3, 3, 1, 1);
        FusionHead { stem, res, to_rgb }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        live: &Live<T>,
        g_b: &Tensor<T>,
        warped: &Tensor<T>,
        coverage: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let cat = tape.concat_channels(&[g_b, warped, coverage])?;
        let h = self.stem.forward(tape, live, &cat)?;
        let h = tape.leaky_relu(&h, T::of(LEAKY_SLOPE));
        let h = self.res.forward(tape, live, &h)?;
        let rgb = self.to_rgb.forward(tape, live, &h)?;
        Ok(tape.tanh(&rgb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn live_all<T: Scalar>(params: &Params<T>, tape: &mut Tape<T>) -> Live<T> {
        params.live(tape, |_| false)
    }

    #[test]
    fn adain_standardizes_with_unit_style() {
        let mut rng = crate::rng(31);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![2, 3, 6, 6], 2.0);
        let ones = Tensor::full(vec![2, 3], 1.0);
        let zeros = Tensor::zeros(vec![2, 3]);
        let y = adain(&mut tape, &x, &ones, &zeros, 0.0).unwrap();
        let (mean, std) = tape.instance_stats(&y).unwrap();
        for &m in mean.data() {
            assert!(m.abs() < 1e-5);
        }
        for &s in std.data() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_forces_requested_moments() {
        let mut rng = crate::rng(32);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 2, 8, 8], 1.0);
        let zs = Tensor::full(vec![1, 2], 3.0);
        let zb = Tensor::full(vec![1, 2], -2.0);
        let y = adain(&mut tape, &x, &zs, &zb, 0.0).unwrap();
        let (mean, std) = tape.instance_stats(&y).unwrap();
        for &m in mean.data() {
            assert!((m + 2.0).abs() < 1e-5);
        }
        for &s in std.data() {
            assert!((s - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn style_project_initialization_contract() {
        // Zero weights with the (1, 0) bias initialization reduce AdaIN to
        // instance normalization.
        let mut params = Params::<f64>::new();
        let mut rng = crate::rng(33);
        let proj = StyleProjections::init(&mut params, &mut rng, 8, &[4, 6]);
        let wid = params.id_of("style_proj.site0.w").unwrap();
        params.set(wid, Tensor::zeros(vec![8, 8]));
        let mut tape = Tape::new();
        let live = live_all(&params, &mut tape);
        let z = Tensor::randn(&mut rng, vec![2, 8], 1.0);
        let (zs, zb) = proj.project(&mut tape, &live, &z, 0).unwrap();
        assert_eq!(zs.shape(), &[2, 4]);
        assert_eq!(zb.shape(), &[2, 4]);
        assert!(zs.data().iter().all(|&v| v == 1.0));
        assert!(zb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_project_sites_are_independent() {
        let mut params = Params::<f64>::new();
        let mut rng = crate::rng(34);
        let proj = StyleProjections::init(&mut params, &mut rng, 8, &[4, 6]);
        let z = Tensor::randn(&mut rng, vec![1, 8], 1.0);
        let site1_before = {
            let mut tape = Tape::new();
            let live = live_all(&params, &mut tape);
            proj.project(&mut tape, &live, &z, 0).unwrap().0
        };
        // Perturb site 2; site 1 output must not move.
        let w2 = params.id_of("style_proj.site1.w").unwrap();
        params.set(w2, Tensor::randn(&mut rng, vec![12, 8], 1.0));
        let mut tape = Tape::new();
        let live = live_all(&params, &mut tape);
        let site1_after = proj.project(&mut tape, &live, &z, 0).unwrap().0;
        assert_eq!(site1_before.data(), site1_after.data());
        assert!(matches!(
            proj.project(&mut tape, &live, &z, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn content_encoder_stage_extents() {
        let mut cfg = NetConfig::toy();
        cfg.content_h = 64;
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(35);
        let enc = ContentEncoder::init(&mut params, &mut rng, &cfg);
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let content = Tensor::zeros(vec![1, 3, 64, 128]);
        let maps = enc.encode(&mut tape, &live, &content).unwrap();
        let expect = [(32, 64), (16, 32), (8, 16), (4, 8), (2, 4)];
        for (map, (h, w)) in maps.iter().zip(expect) {
            assert_eq!(&map.shape()[2..], &[h, w]);
        }
        for (map, &c) in maps.iter().zip(cfg.content_widths.iter()) {
            assert_eq!(map.shape()[1], c);
        }
    }

    #[test]
    fn content_encoder_rejects_indivisible_extents() {
        let cfg = NetConfig::toy();
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(36);
        let enc = ContentEncoder::init(&mut params, &mut rng, &cfg);
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let content = Tensor::zeros(vec![1, 3, 32, 48]);
        assert!(matches!(
            enc.encode(&mut tape, &live, &content),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn content_encoder_deterministic_under_seed() {
        let cfg = NetConfig::toy();
        let build = || {
            let mut params = Params::<f32>::new();
            let mut rng = crate::rng(37);
            let enc = ContentEncoder::init(&mut params, &mut rng, &cfg);
            let mut tape = Tape::inference();
            let live = live_all(&params, &mut tape);
            let content = Tensor::randn(&mut crate::rng(38), vec![1, 3, 32, 64], 1.0);
            enc.encode(&mut tape, &live, &content).unwrap()[4].clone()
        };
        let a = build();
        let b = build();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn synthesizer_restores_content_extent_and_range() {
        let cfg = NetConfig::toy();
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(39);
        let enc = ContentEncoder::init(&mut params, &mut rng, &cfg);
        let mut proj = None;
        let synth = Synthesizer::init(&mut params, &mut rng, &cfg, &mut proj);
        let proj = proj.unwrap();
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let content = Tensor::randn(&mut rng, vec![1, 3, 32, 64], 0.5);
        let maps = enc.encode(&mut tape, &live, &content).unwrap();
        let z = Tensor::randn(&mut rng, vec![1, cfg.style_dim], 1.0);
        let out = synth.forward(&mut tape, &live, &proj, &maps, &z).unwrap();
        assert_eq!(out.shape(), &[1, 3, 32, 64]);
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn skip_ablation_drops_block_input_widths() {
        let with = NetConfig::toy();
        let mut without = NetConfig::toy();
        without.skip_connections = false;
        let ww = with.synth_input_widths();
        let wo = without.synth_input_widths();
        let cw = &with.content_widths;
        // Inputs of blocks 2..4 shrink by the concatenated encoder widths.
        assert_eq!(ww[1] - wo[1], cw[3]);
        assert_eq!(ww[2] - wo[2], cw[2]);
        assert_eq!(ww[3] - wo[3], cw[1]);
        assert_eq!(ww[0], wo[0]);
        assert_eq!(ww[4], wo[4]);
    }

    #[test]
    fn distinct_styles_produce_distinct_foregrounds() {
        let cfg = NetConfig::toy();
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(40);
        let enc = ContentEncoder::init(&mut params, &mut rng, &cfg);
        let mut proj = None;
        let synth = Synthesizer::init(&mut params, &mut rng, &cfg, &mut proj);
        let proj = proj.unwrap();
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let content = Tensor::randn(&mut rng, vec![1, 3, 32, 64], 0.5);
        let maps = enc.encode(&mut tape, &live, &content).unwrap();
        let z1 = Tensor::randn(&mut rng, vec![1, cfg.style_dim], 1.0);
        let z2 = Tensor::randn(&mut rng, vec![1, cfg.style_dim], 1.0);
        let o1 = synth.forward(&mut tape, &live, &proj, &maps, &z1).unwrap();
        let o2 = synth.forward(&mut tape, &live, &proj, &maps, &z2).unwrap();
        assert!(o1.max_abs_diff(&o2) > 0.0);
    }

    #[test]
    fn style_vector_length_is_box_independent() {
        let cfg = NetConfig::toy();
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(41);
        let enc = StyleEncoder::init(&mut params, &mut rng, &cfg);
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let scene = Tensor::randn(&mut rng, vec![1, 3, 64, 64], 0.5);
        for bx in [
            RotatedBox::new(30.0, 30.0, 10.0, 30.0, 0.2),
            RotatedBox::new(32.0, 20.0, 50.0, 20.0, -0.4),
        ] {
            let z = enc.encode(&mut tape, &live, &scene, &[bx]).unwrap();
            assert_eq!(z.shape(), &[1, cfg.style_dim]);
        }
    }

    #[test]
    fn patchgan_shape_chain_and_sigmoid_range() {
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(42);
        let d = PatchGan::init(&mut params, &mut rng, "d1", 8);
        assert_eq!(d.layers.len(), 5);
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let img = Tensor::randn(&mut rng, vec![2, 3, 64, 64], 0.5);
        let logits = d.forward(&mut tape, &live, &img).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 3, 3]);
        let probs = tape.sigmoid(&logits);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let small = Tensor::zeros(vec![1, 3, 16, 16]);
        assert!(matches!(
            d.forward(&mut tape, &live, &small),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn recognizer_frames_and_normalization() {
        let cfg = NetConfig::toy();
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(43);
        let rec = Recognizer::init(&mut params, &mut rng, &cfg);
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let patch = Tensor::randn(&mut rng, vec![2, 3, 32, 64], 0.5);
        let lp = rec.forward(&mut tape, &live, &patch).unwrap();
        assert_eq!(lp.shape(), &[16, 2, cfg.alphabet_size + 1]);
        for group in lp.data().chunks(cfg.alphabet_size + 1) {
            let total: f32 = group.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn greedy_decode_collapse_rules() {
        // Classes: 0 = a, 1 = b, blank = 2.
        let seq = |frames: &[usize]| {
            let k = 3;
            let t = frames.len();
            let mut data = vec![-10.0f64; t * k];
            for (ti, &c) in frames.iter().enumerate() {
                data[ti * k + c] = 0.0;
            }
            let lp = Tensor::from_vec(data, vec![t, 1, k]);
            greedy_ctc_decode(&lp).unwrap().remove(0)
        };
        assert_eq!(seq(&[0, 0, 2, 1]), vec![0, 1]);
        assert_eq!(seq(&[0, 2, 0]), vec![0, 0]);
        assert_eq!(seq(&[2, 2]), Vec::<usize>::new());
    }

    #[test]
    fn inpainter_roundtrip_shape_and_range() {
        let cfg = NetConfig::toy();
        let mut params = Params::<f32>::new();
        let mut rng = crate::rng(44);
        let inp = Inpainter::init(&mut params, &mut rng, &cfg);
        let mut tape = Tape::inference();
        let live = live_all(&params, &mut tape);
        let masked = Tensor::randn(&mut rng, vec![1, 4, 64, 64], 0.5);
        let g_b = inp.forward(&mut tape, &live, &masked).unwrap();
        assert_eq!(g_b.shape(), &[1, 3, 64, 64]);
        assert!(g_b.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        assert!(NetConfig::toy().validate().is_ok());
        assert!(NetConfig::paper_scale().validate().is_ok());
        let mut bad = NetConfig::toy();
        bad.content_h = 48;
        assert!(bad.validate().is_err());
        let mut bad = NetConfig::toy();
        bad.skip_stages = vec![4];
        assert!(bad.validate().is_err());
        let mut bad = NetConfig::toy();
        bad.canvas_h = 60;
        assert!(bad.validate().is_err());
    }
}
