//! Flat `key = value` configuration files.
//!
//! UTF-8 text, `#` starts a comment, keys are dotted into sections
//! (`aug.*`, `train.*`, `data.*`, `model.*`). Unknown keys are errors;
//! duplicate keys take the last value and produce a warning. An empty file
//! yields all defaults.

use olivine::augment::AugmentConfig;
use olivine::dataset::SplitSpec;
use olivine::error::{Error, Result};
use olivine::preprocess::{OtsuSource, PreprocessOptions};
use olivine::train::{Monitor, TrainConfig};

/// One documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

/// Every recognized key with its default. The parser validates against this
/// table and `--help` prints it, so the two cannot drift apart.
pub const CONFIG_KEYS: &[KeyDoc] = &[
    KeyDoc { key: "train.learning_rate", default: "0.001", doc: "Adam learning rate" },
    KeyDoc { key: "train.max_epochs", default: "20", doc: "epoch cap (early stopping may end sooner)" },
    KeyDoc { key: "train.batch_size", default: "32", doc: "minibatch size" },
    KeyDoc { key: "train.early_stop_patience", default: "5", doc: "epochs without improvement before halting" },
    KeyDoc { key: "train.early_stop_monitor", default: "val_acc", doc: "val_acc or val_loss" },
    KeyDoc { key: "train.seed", default: "42", doc: "seed for init, shuffling, and augmentation" },
    KeyDoc { key: "aug.rotation_max_deg", default: "30", doc: "rotation drawn from [-max, +max] degrees" },
    KeyDoc { key: "aug.p_flip_h", default: "0.5", doc: "horizontal flip probability" },
    KeyDoc { key: "aug.p_flip_v", default: "0", doc: "vertical flip probability" },
    KeyDoc { key: "aug.brightness_max_delta", default: "40", doc: "brightness delta drawn from [-max, +max]" },
    KeyDoc { key: "data.f_train", default: "0.8", doc: "train fraction of the stratified split" },
    KeyDoc { key: "data.f_val", default: "0.1", doc: "validation fraction" },
    KeyDoc { key: "data.f_test", default: "0.1", doc: "test fraction" },
    KeyDoc { key: "data.image_size", default: "224", doc: "square size preprocessing resizes to" },
    KeyDoc { key: "data.blur_sigma", default: "1.0", doc: "Gaussian blur sigma before segmentation" },
    KeyDoc { key: "data.crop_margin", default: "0.05", doc: "bounding-box margin per side, as a fraction" },
    KeyDoc { key: "data.use_depth", default: "false", doc: "AND an intensity mask with a depth-band mask" },
    KeyDoc { key: "data.depth_near_mm", default: "200", doc: "near edge of the depth band" },
    KeyDoc { key: "data.depth_far_mm", default: "1500", doc: "far edge of the depth band" },
    KeyDoc { key: "data.otsu_source", default: "gray", doc: "plane Otsu runs on: gray, r, g, or b" },
    KeyDoc { key: "model.in_channels", default: "3", doc: "model input channels (1 or 3)" },
];

/// Parsed configuration with defaults filled in.
#[derive(Clone, Debug)]
pub struct Config {
    pub train: TrainConfig,
    pub aug: AugmentConfig,
    pub split: SplitSpec,
    pub preprocess: PreprocessOptions,
    pub in_channels: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            aug: AugmentConfig::default(),
            split: SplitSpec::default(),
            preprocess: PreprocessOptions::default(),
            in_channels: 3,
        }
    }
}

/// Lines like `key = value`, returning the config plus duplicate-key
/// warnings for the caller to print.
pub fn parse_config(bytes: &[u8]) -> Result<(Config, Vec<String>)> {
    let text =
        std::str::from_utf8(bytes).map_err(|_| Error::Format("config: not valid UTF-8".into()))?;
    let mut cfg = Config::default();
    let mut warnings = Vec::new();
    let mut seen: Vec<&str> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!("config line {lineno}: expected key = value")));
        };
        let key = key.trim();
        let value = value.trim();
        let known = CONFIG_KEYS.iter().find(|k| k.key == key);
        if known.is_none() {
            return Err(Error::Format(format!("config line {lineno}: unknown key \"{key}\"")));
        }
        if seen.contains(&key) {
            warnings.push(format!("config line {lineno}: duplicate key \"{key}\", last value wins"));
        } else {
            seen.push(known.unwrap().key);
        }
        apply_key(&mut cfg, key, value, lineno)?;
    }

    cfg.train.validate()?;
    cfg.aug.validate()?;
    cfg.split.validate()?;
    if !(cfg.preprocess.sigma > 0.0) {
        return Err(Error::InvalidArgument("config: data.blur_sigma must be > 0".into()));
    }
    if !(0.0..1.0).contains(&cfg.preprocess.crop_margin) {
        return Err(Error::InvalidArgument("config: data.crop_margin must be in [0, 1)".into()));
    }
    if cfg.preprocess.out_size < 16 {
        return Err(Error::InvalidArgument("config: data.image_size must be >= 16".into()));
    }
    if cfg.preprocess.depth_near_mm >= cfg.preprocess.depth_far_mm {
        return Err(Error::InvalidArgument(
            "config: data.depth_near_mm must be < data.depth_far_mm".into(),
        ));
    }
    if cfg.in_channels != 1 && cfg.in_channels != 3 {
        return Err(Error::InvalidArgument("config: model.in_channels must be 1 or 3".into()));
    }
    Ok((cfg, warnings))
}

fn apply_key(cfg: &mut Config, key: &str, value: &str, lineno: usize) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str, lineno: usize) -> Result<T> {
        value.parse::<T>().map_err(|_| {
            Error::Format(format!("config line {lineno}: cannot parse \"{value}\" for {key}"))
        })
    }
    match key {
        "train.learning_rate" => cfg.train.learning_rate = num(key, value, lineno)?,
        "train.max_epochs" => cfg.train.max_epochs = num(key, value, lineno)?,
        "train.batch_size" => cfg.train.batch_size = num(key, value, lineno)?,
        "train.early_stop_patience" => cfg.train.early_stop_patience = num(key, value, lineno)?,
        "train.early_stop_monitor" => {
            cfg.train.monitor = match value {
                "val_acc" => Monitor::ValAcc,
                "val_loss" => Monitor::ValLoss,
                other => {
                    return Err(Error::Format(format!(
                        "config line {lineno}: monitor must be val_acc or val_loss, got \"{other}\""
                    )))
                }
            }
        }
        "train.seed" => cfg.train.seed = num(key, value, lineno)?,
        "aug.rotation_max_deg" => cfg.aug.rotation_max_deg = num(key, value, lineno)?,
        "aug.p_flip_h" => cfg.aug.p_flip_h = num(key, value, lineno)?,
        "aug.p_flip_v" => cfg.aug.p_flip_v = num(key, value, lineno)?,
        "aug.brightness_max_delta" => cfg.aug.brightness_max_delta = num(key, value, lineno)?,
        "data.f_train" => cfg.split.f_train = num(key, value, lineno)?,
        "data.f_val" => cfg.split.f_val = num(key, value, lineno)?,
        "data.f_test" => cfg.split.f_test = num(key, value, lineno)?,
        "data.image_size" => cfg.preprocess.out_size = num(key, value, lineno)?,
        "data.blur_sigma" => cfg.preprocess.sigma = num(key, value, lineno)?,
        "data.crop_margin" => cfg.preprocess.crop_margin = num(key, value, lineno)?,
        "data.use_depth" => {
            cfg.preprocess.use_depth = match value {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Format(format!(
                        "config line {lineno}: expected true/false, got \"{other}\""
                    )))
                }
            }
        }
        "data.depth_near_mm" => cfg.preprocess.depth_near_mm = num(key, value, lineno)?,
        "data.depth_far_mm" => cfg.preprocess.depth_far_mm = num(key, value, lineno)?,
        "data.otsu_source" => {
            cfg.preprocess.otsu_source = match value {
                "gray" => OtsuSource::Gray,
                "r" => OtsuSource::Channel(0),
                "g" => OtsuSource::Channel(1),
                "b" => OtsuSource::Channel(2),
                other => {
                    return Err(Error::Format(format!(
                        "config line {lineno}: otsu source must be gray/r/g/b, got \"{other}\""
                    )))
                }
            }
        }
        "model.in_channels" => cfg.in_channels = num(key, value, lineno)?,
        _ => unreachable!("key validated against CONFIG_KEYS"),
    }
    Ok(())
}

/// The config-key table rendered for `--help`.
pub fn config_key_help() -> String {
    let width = CONFIG_KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config file keys (key = value, # comments; all optional):\n");
    for k in CONFIG_KEYS {
        out.push_str(&format!("  {:<width$}  default {:<7}  {}\n", k.key, k.default, k.doc));
    }
    out
}
