//! Plain-text run configuration: `key = value` lines, `#` comments, keys
//! namespaced by `net.`, `train.` and `data.`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, LEVELS};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub val_fraction: f64,
    pub augment: bool,
    pub cache: bool,
    /// Scene generator settings. The size and seed are taken from
    /// `net.input_size` and `train.seed` when scenes are synthesized.
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            augment: true,
            cache: true,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetworkConfig::default(),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<(T, T)> {
    match parse_list::<T>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two values, got {value:?}"))),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (net, train, data) = (&mut self.net, &mut self.train, &mut self.data);
        match key {
            "net.input_size" => net.input_size = parse_value(key, value)?,
            "net.width_factor" => {
                let f: f64 = parse_value(key, value)?;
                if !(f > 0.0 && f.is_finite()) {
                    return Err(Error::Config(format!("{key} must be positive")));
                }
                net.encoder_channels = NetworkConfig::widths(f);
            }
            "net.encoder_channels" => {
                let v: Vec<usize> = parse_list(key, value)?;
                net.encoder_channels = v.try_into().map_err(|v: Vec<usize>| {
                    Error::Config(format!("{key}: expected {LEVELS} widths, got {}", v.len()))
                })?;
            }
            "net.decoder_width" => net.decoder_width = parse_value(key, value)?,
            "net.dilation_rates" => net.dilation_rates = parse_list(key, value)?,
            "net.se_reduction" => net.se_reduction = parse_value(key, value)?,
            "net.enable_boundary_stream" => net.enable_boundary_stream = parse_value(key, value)?,
            "net.enable_interior_stream" => net.enable_interior_stream = parse_value(key, value)?,
            "net.enable_bfm" => net.enable_bfm = parse_value(key, value)?,
            "net.enable_mid" => net.enable_mid = parse_value(key, value)?,
            "train.base_lr" => train.base_lr = parse_value(key, value)?,
            "train.momentum" => train.momentum = parse_value(key, value)?,
            "train.weight_decay" => train.weight_decay = parse_value(key, value)?,
            "train.poly_power" => train.poly_power = parse_value(key, value)?,
            "train.batch_size" => train.batch_size = parse_value(key, value)?,
            "train.max_iters" => train.max_iters = parse_value(key, value)?,
            "train.eval_every" => train.eval_every = parse_value(key, value)?,
            "train.seed" => train.seed = parse_value(key, value)?,
            "train.precision" => train.precision = parse_value(key, value)?,
            "data.val_fraction" => data.val_fraction = parse_value(key, value)?,
            "data.augment" => data.augment = parse_value(key, value)?,
            "data.cache" => data.cache = parse_value(key, value)?,
            "data.glass_count" => data.scene.glass_count_range = parse_pair(key, value)?,
            "data.frame_width" => data.scene.frame_width_range = parse_pair(key, value)?,
            "data.tint_alpha" => data.scene.tint_alpha_range = parse_pair(key, value)?,
            "data.blur_radius" => data.scene.blur_radius_range = parse_pair(key, value)?,
            "data.highlight_probability" => {
                data.scene.highlight_probability = parse_value(key, value)?
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("data.val_fraction must lie in [0, 1)".into()));
        }
        self.scene().validate()
    }

    /// Scene settings with the size and seed shared with the rest of the run.
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            size: self.net.input_size,
            seed: self.train.seed,
            ..self.data.scene.clone()
        }
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (n, t, d) = (&self.net, &self.train, &self.data);
        let s = &d.scene;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("net.input_size", n.input_size.to_string());
        kv("net.encoder_channels", join(&n.encoder_channels));
        kv("net.decoder_width", n.decoder_width.to_string());
        kv("net.dilation_rates", join(&n.dilation_rates));
        kv("net.se_reduction", n.se_reduction.to_string());
        kv("net.enable_boundary_stream", n.enable_boundary_stream.to_string());
        kv("net.enable_interior_stream", n.enable_interior_stream.to_string());
        kv("net.enable_bfm", n.enable_bfm.to_string());
        kv("net.enable_mid", n.enable_mid.to_string());
        kv("train.base_lr", t.base_lr.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.poly_power", t.poly_power.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_iters", t.max_iters.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.precision", t.precision.to_string());
        kv("data.val_fraction", d.val_fraction.to_string());
        kv("data.augment", d.augment.to_string());
        kv("data.cache", d.cache.to_string());
        kv("data.glass_count", join(&[s.glass_count_range.0, s.glass_count_range.1]));
        kv("data.frame_width", join(&[s.frame_width_range.0, s.frame_width_range.1]));
        kv("data.tint_alpha", join(&[s.tint_alpha_range.0, s.tint_alpha_range.1]));
        kv("data.blur_radius", join(&[s.blur_radius_range.0, s.blur_radius_range.1]));
        kv("data.highlight_probability", s.highlight_probability.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.net.enable_bfm = false;
        cfg.net.dilation_rates = vec![1, 3];
        cfg.train.base_lr = 0.0125;
        cfg.data.scene.tint_alpha_range = (0.2, 0.3);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = RunConfig::parse("train.max_iters=30 # short\n  net.width_factor = 0.25\n").unwrap();
        assert_eq!(cfg.train.max_iters, 30);
        assert_eq!(cfg.net.encoder_channels, [4, 8, 16, 32, 64]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "net.unknown = 1",
            "train.base_lr",
            "train.batch_size = -1",
            "net.encoder_channels = 1, 2, 3",
            "net.input_size = 40",
            "data.glass_count = 3, 1",
            "data.val_fraction = 1.5",
            "train.precision = f16",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }
}
