//! Line-oriented key=value configuration files with typed keys.
//!
//! Unknown keys are hard errors; `schema()` prints every key with its type
//! and default. `#` starts a comment.

use std::path::PathBuf;

use glaste_core::losses::LossWeights;
use glaste_core::pipeline::TrainConfig;
use glaste_core::{Error, Result};

/// Parsed configuration file: the training configuration plus CLI-level
/// extras.
#[derive(Clone, Debug)]
pub struct FileConfig {
    pub train: TrainConfig,
    /// Checkpoint holding a pretrained, frozen recognizer.
    pub recognizer: Option<PathBuf>,
}

struct KeyDoc {
    key: &'static str,
    ty: &'static str,
    default: String,
    help: &'static str,
}

fn key_docs() -> Vec<KeyDoc> {
    let d = TrainConfig::toy();
    let w = LossWeights::default();
    let doc = |key, ty, default: String, help| KeyDoc {
        key,
        ty,
        default,
        help,
    };
    vec![
        doc("seed", "u64", d.seed.to_string(), "master RNG seed (GLASTE_SEED overrides)"),
        doc("canvas", "usize", d.net.canvas_h.to_string(), "square scene extent H_L = W_L"),
        doc("content_height", "usize", d.net.content_h.to_string(), "content image height H_c"),
        doc("style_dim", "usize", d.net.style_dim.to_string(), "style vector length"),
        doc("fs_stride", "usize", d.net.fs_stride.to_string(), "style backbone total stride"),
        doc("fb_stride", "usize", d.net.fb_stride.to_string(), "inpainter trunk total stride"),
        doc("roi_grid", "usize", d.net.roi_grid.to_string(), "rotated RoIAlign grid resolution"),
        doc("ffc_depth", "usize", d.net.ffc_depth.to_string(), "Fourier conv residual blocks"),
        doc(
            "blocks_per_stage",
            "usize",
            d.net.blocks_per_stage.to_string(),
            "residual blocks per encoder stage",
        ),
        doc("local_patch_h", "usize", d.net.local_h.to_string(), "local patch height"),
        doc("local_patch_w", "usize", d.net.local_w.to_string(), "local patch width"),
        doc(
            "content_widths",
            "usize,*5",
            join(&d.net.content_widths),
            "content encoder stage widths",
        ),
        doc(
            "style_widths",
            "usize,*3",
            join(&d.net.style_widths),
            "style encoder widths before the final style_dim stage",
        ),
        doc(
            "inpaint_widths",
            "usize,*3",
            join(&d.net.inpaint_widths),
            "inpainter trunk widths",
        ),
        doc("disc_width", "usize", d.net.disc_width.to_string(), "discriminator base width"),
        doc("fusion_width", "usize", d.net.fusion_width.to_string(), "fusion head width"),
        doc(
            "recognizer_widths",
            "usize,*3",
            join(&d.net.recognizer_widths),
            "recognizer stage widths",
        ),
        doc("feat_seed", "u64", d.net.feat_seed.to_string(), "frozen perceptual network seed"),
        doc("lr", "f64", format!("{}", d.lr), "Adam learning rate"),
        doc("batch_size", "usize", d.batch_size.to_string(), "samples per step"),
        doc("iterations", "u64", d.iterations.to_string(), "training steps"),
        doc("mix_ratio", "f64", format!("{}", d.mix_ratio), "paired-sample fraction"),
        doc("alpha", "f64", format!("{}", w.alpha), "local discriminator weight"),
        doc("beta", "f64", format!("{}", w.beta), "local reconstruction weight"),
        doc("lambda1", "f64", format!("{}", w.lambda1), "L1 weight"),
        doc("lambda2", "f64", format!("{}", w.lambda2), "perceptual weight"),
        doc("lambda3", "f64", format!("{}", w.lambda3), "recognition weight"),
        doc(
            "skip_connections",
            "bool",
            d.ablation.skip_connections.to_string(),
            "synthesizer skip connections",
        ),
        doc("local_loss", "bool", d.ablation.local_loss.to_string(), "local losses (alpha, beta, lambda3)"),
        doc("paired_data", "bool", d.ablation.paired_data.to_string(), "synthetic paired samples"),
        doc(
            "use_recognizer",
            "bool",
            d.ablation.use_recognizer.to_string(),
            "CTC recognition loss",
        ),
        doc(
            "checkpoint_every",
            "u64",
            d.checkpoint_every.to_string(),
            "checkpoint interval in steps (0 = final only)",
        ),
        doc("frozen_data", "bool", d.frozen_data.to_string(), "reuse one batch every step"),
        doc("recognizer", "path", String::new(), "checkpoint with a pretrained recognizer"),
    ]
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Human-readable schema of every key.
pub fn schema() -> String {
    let mut out = String::from("# key = value per line; '#' starts a comment\n");
    for doc in key_docs() {
        out.push_str(&format!(
            "{:<18} {:<9} default={:<18} {}\n",
            doc.key, doc.ty, doc.default, doc.help
        ));
    }
    out
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: expected usize, got '{v}' ({e})")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: expected u64, got '{v}' ({e})")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: expected float, got '{v}' ({e})")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected bool, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|t| parse_usize(key, t.trim()))
        .collect()
}

/// Parse configuration text over the toy defaults.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig {
        train: TrainConfig::toy(),
        recognizer: None,
    };
    let t = &mut cfg.train;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        let v = value.trim();
        match key {
            "seed" => t.seed = parse_u64(key, v)?,
            "canvas" => {
                let c = parse_usize(key, v)?;
                t.net.canvas_h = c;
                t.net.canvas_w = c;
            }
            "content_height" => t.net.content_h = parse_usize(key, v)?,
            "style_dim" => t.net.style_dim = parse_usize(key, v)?,
            "fs_stride" => t.net.fs_stride = parse_usize(key, v)?,
            "fb_stride" => t.net.fb_stride = parse_usize(key, v)?,
            "roi_grid" => t.net.roi_grid = parse_usize(key, v)?,
            "ffc_depth" => t.net.ffc_depth = parse_usize(key, v)?,
            "blocks_per_stage" => t.net.blocks_per_stage = parse_usize(key, v)?,
            "local_patch_h" => t.net.local_h = parse_usize(key, v)?,
            "local_patch_w" => t.net.local_w = parse_usize(key, v)?,
            "content_widths" => t.net.content_widths = parse_list(key, v)?,
            "style_widths" => t.net.style_widths = parse_list(key, v)?,
            "inpaint_widths" => t.net.inpaint_widths = parse_list(key, v)?,
            "disc_width" => t.net.disc_width = parse_usize(key, v)?,
            "fusion_width" => t.net.fusion_width = parse_usize(key, v)?,
            "recognizer_widths" => t.net.recognizer_widths = parse_list(key, v)?,
            "feat_seed" => t.net.feat_seed = parse_u64(key, v)?,
            "lr" => t.lr = parse_f64(key, v)?,
            "batch_size" => t.batch_size = parse_usize(key, v)?,
            "iterations" => t.iterations = parse_u64(key, v)?,
            "mix_ratio" => t.mix_ratio = parse_f64(key, v)?,
            "alpha" => t.weights.alpha = parse_f64(key, v)?,
            "beta" => t.weights.beta = parse_f64(key, v)?,
            "lambda1" => t.weights.lambda1 = parse_f64(key, v)?,
            "lambda2" => t.weights.lambda2 = parse_f64(key, v)?,
            "lambda3" => t.weights.lambda3 = parse_f64(key, v)?,
            "skip_connections" => t.ablation.skip_connections = parse_bool(key, v)?,
            "local_loss" => t.ablation.local_loss = parse_bool(key, v)?,
            "paired_data" => t.ablation.paired_data = parse_bool(key, v)?,
            "use_recognizer" => t.ablation.use_recognizer = parse_bool(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_u64(key, v)?,
            "frozen_data" => t.frozen_data = parse_bool(key, v)?,
            "recognizer" => cfg.recognizer = Some(PathBuf::from(v)),
            _ => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{key}'\n\n{}",
                    lineno + 1,
                    schema()
                )))
            }
        }
    }
    cfg.train.net.skip_connections = cfg.train.ablation.skip_connections;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Parse a config file, honoring the GLASTE_SEED environment override.
pub fn load_config(path: &std::path::Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Ok(seed) = std::env::var("GLASTE_SEED") {
        cfg.train.seed = seed
            .parse()
            .map_err(|e| Error::Config(format!("GLASTE_SEED: {e}")))?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.train.net.canvas_h, 64);
        assert_eq!(cfg.train.weights.lambda1, 10.0);
        assert!(cfg.recognizer.is_none());
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = parse_config("canvas=64\nbogus_key=3\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("unknown key 'bogus_key'"));
        assert!(msg.contains("canvas"), "schema should be printed");
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let cfg = parse_config("# comment\n\nseed = 11 # trailing\n").unwrap();
        assert_eq!(cfg.train.seed, 11);
    }

    #[test]
    fn typed_parse_errors() {
        assert!(parse_config("canvas=abc").is_err());
        assert!(parse_config("lr=fast").is_err());
        assert!(parse_config("use_recognizer=maybe").is_err());
        assert!(parse_config("canvas").is_err());
    }

    #[test]
    fn invalid_combination_rejected_by_validation() {
        // 48 is not divisible by 32 for the content stages.
        assert!(parse_config("content_height=48").is_err());
    }

    #[test]
    fn ablation_flags_affect_structure() {
        let cfg = parse_config("skip_connections=false").unwrap();
        assert!(!cfg.train.net.skip_connections);
        assert!(!cfg.train.ablation.skip_connections);
    }
}
