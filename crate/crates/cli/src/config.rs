//! Run configuration: a flat `key = value` file merged with command-line
//! flags. Defaults are overridden by the file, which is overridden by flags.
//!
//! Every flag and config key share one namespace (`batch-size` and
//! `batch_size` are the same key), so precedence is a plain map overlay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use barcodemae::eval::{ratio_grid, RobustnessMode};
use barcodemae::model::{ModelConfig, Positional, Variant};
use barcodemae::seqdata::{Partition, RecordFormat};
use barcodemae::train::TrainConfig;
use barcodemae::LabelLevel;

pub const SEED_ENV: &str = "BARCODEMAE_SEED";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`, got `{text}`")]
    Syntax {
        path: String,
        line: usize,
        text: String,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("malformed architecture token `{token}` in `{arch}` (expected enc:L-H or dec:M-J)")]
    Arch { arch: String, token: String },
    #[error("malformed ratio range `{0}` (expected start:stop:step)")]
    Ratios(String),
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

const KEYS: &[&str] = &[
    "name",
    "out",
    "seed",
    "data",
    "format",
    "checkpoint",
    "variant",
    "k",
    "arch",
    "enc_layers",
    "enc_heads",
    "dec_layers",
    "dec_heads",
    "d_model",
    "d_ff",
    "max_tokens",
    "dropout",
    "positional",
    "tie_embeddings",
    "preset",
    "epochs",
    "batch_size",
    "max_lr",
    "weight_decay",
    "mask_ratio",
    "warmup_fraction",
    "grad_clip",
    "reference",
    "query",
    "level",
    "partitions",
    "ratios",
    "modes",
];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Layered key-value settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse_file_text(text: &str, path: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: path.to_string(),
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let key = normalize(k);
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse_file_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let key = normalize(key);
        debug_assert!(KEYS.contains(&key.as_str()), "unregistered key {key}");
        self.values.insert(key, value.into());
    }

    /// Later layers win.
    pub fn overlay(mut self, top: Settings) -> Settings {
        self.values.extend(top.values);
        self
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    msg: e.to_string(),
                })
            })
            .transpose()
    }

    fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some("true" | "yes" | "1") => Ok(Some(true)),
            Some("false" | "no" | "0") => Ok(Some(false)),
            Some(v) => Err(ConfigError::Value {
                key: key.to_string(),
                msg: format!("expected true or false, got `{v}`"),
            }),
        }
    }
}

/// Parses `enc:L-H dec:M-J` into `(enc_layers, enc_heads, dec_layers, dec_heads)`.
/// The decoder token may be omitted (no decoder).
pub fn parse_arch(arch: &str) -> Result<(usize, usize, usize, usize), ConfigError> {
    let bad = |token: &str| ConfigError::Arch {
        arch: arch.to_string(),
        token: token.to_string(),
    };
    let mut enc = None;
    let mut dec = None;
    for token in arch.split_whitespace() {
        let (side, spec) = token.split_once(':').ok_or_else(|| bad(token))?;
        let (l, h) = spec.split_once('-').ok_or_else(|| bad(token))?;
        let pair = (
            l.parse::<usize>().map_err(|_| bad(token))?,
            h.parse::<usize>().map_err(|_| bad(token))?,
        );
        let slot = match side {
            "enc" => &mut enc,
            "dec" => &mut dec,
            _ => return Err(bad(token)),
        };
        if slot.replace(pair).is_some() {
            return Err(bad(token));
        }
    }
    let (el, eh) = enc.ok_or_else(|| bad(arch))?;
    let (dl, dh) = dec.unwrap_or((0, 0));
    Ok((el, eh, dl, dh))
}

/// Parses `start:stop:step` or a comma-separated list of ratios.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>, ConfigError> {
    let bad = || ConfigError::Ratios(s.to_string());
    if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        let grid = ratio_grid(start, stop, step);
        if grid.is_empty() {
            return Err(bad());
        }
        Ok(grid)
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect()
    }
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim().parse::<T>().map_err(|e| ConfigError::Value {
                key: key.to_string(),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out: PathBuf,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub format: RecordFormat,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reference: Partition,
    pub query: Partition,
    pub level: LabelLevel,
    pub zsc_partitions: Vec<Partition>,
    pub ratios: Vec<f64>,
    pub modes: Vec<RobustnessMode>,
}

impl RunConfig {
    /// Resolves settings. `env_seed` is consulted only when neither the file
    /// nor the flags set a seed.
    pub fn resolve(s: &Settings, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let seed = match (s.get::<u64>("seed")?, env_seed) {
            (Some(v), _) => v,
            (None, Some(e)) => e.trim().parse().map_err(|_| ConfigError::Value {
                key: SEED_ENV.into(),
                msg: format!("not an integer: `{e}`"),
            })?,
            (None, None) => 0,
        };

        let variant = s.get::<Variant>("variant")?.unwrap_or(Variant::BarcodeMae);
        let mut model = ModelConfig::desk(variant);
        if let Some(arch) = s.raw("arch") {
            let (el, eh, dl, dh) = parse_arch(arch)?;
            (
                model.enc_layers,
                model.enc_heads,
                model.dec_layers,
                model.dec_heads,
            ) = (el, eh, dl, dh);
        }
        macro_rules! take {
            ($target:expr, $key:literal) => {
                if let Some(v) = s.get($key)? {
                    $target = v;
                }
            };
        }
        take!(model.k, "k");
        take!(model.enc_layers, "enc_layers");
        take!(model.enc_heads, "enc_heads");
        take!(model.dec_layers, "dec_layers");
        take!(model.dec_heads, "dec_heads");
        take!(model.d_model, "d_model");
        take!(model.d_ff, "d_ff");
        take!(model.max_tokens, "max_tokens");
        take!(model.dropout, "dropout");
        if let Some(p) = s.get::<Positional>("positional")? {
            model.positional = p;
        }
        if let Some(t) = s.get_bool("tie_embeddings")? {
            model.tie_output_embeddings = t;
        }

        let mut train = match s.raw("preset").unwrap_or("desk") {
            "desk" => TrainConfig::desk(),
            "method" => TrainConfig::method(),
            "appendix" => TrainConfig::appendix(),
            other => {
                return Err(ConfigError::Value {
                    key: "preset".into(),
                    msg: format!("unknown preset `{other}` (expected desk, method or appendix)"),
                })
            }
        };
        train.seed = seed;
        take!(train.epochs, "epochs");
        take!(train.batch_size, "batch_size");
        take!(train.max_lr, "max_lr");
        take!(train.weight_decay, "weight_decay");
        take!(train.mask_ratio, "mask_ratio");
        take!(train.warmup_fraction, "warmup_fraction");
        take!(train.grad_clip, "grad_clip");

        let zsc_partitions = match s.raw("partitions") {
            Some(list) => parse_list("partitions", list)?,
            None => vec![Partition::SeenTest, Partition::UnseenTest],
        };
        let modes = match s.raw("modes") {
            Some(list) => parse_list("modes", list)?,
            None => vec![RobustnessMode::MaskSubstitute, RobustnessMode::Delete],
        };
        let ratios = match s.raw("ratios") {
            Some(r) => parse_ratios(r)?,
            None => ratio_grid(0.1, 0.9, 0.1),
        };

        Ok(Self {
            name: s.raw("name").unwrap_or("default").to_string(),
            out: s
                .raw("out")
                .map_or_else(|| PathBuf::from("run"), PathBuf::from),
            seed,
            data: s.raw("data").map(PathBuf::from),
            format: s.get("format")?.unwrap_or(RecordFormat::Tsv),
            checkpoint: s.raw("checkpoint").map(PathBuf::from),
            model,
            train,
            reference: s.get("reference")?.unwrap_or(Partition::SeenTrain),
            query: s.get("query")?.unwrap_or(Partition::UnseenTest),
            level: s.get("level")?.unwrap_or(LabelLevel::Genus),
            zsc_partitions,
            ratios,
            modes,
        })
    }

    pub fn data_path(&self) -> Result<&Path, ConfigError> {
        self.data.as_deref().ok_or(ConfigError::Missing("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_round_trip_and_errors() {
        assert_eq!(parse_arch("enc:6-6 dec:6-6").unwrap(), (6, 6, 6, 6));
        assert_eq!(parse_arch("dec:1-2 enc:3-4").unwrap(), (3, 4, 1, 2));
        assert_eq!(parse_arch("enc:2-2").unwrap(), (2, 2, 0, 0));
        let err = parse_arch("enc:2 dec:2-2").unwrap_err();
        assert_eq!(
            err,
            ConfigError::Arch {
                arch: "enc:2 dec:2-2".into(),
                token: "enc:2".into()
            }
        );
        assert!(err.to_string().contains("`enc:2`"));
        assert!(
            matches!(parse_arch("enc:2-2 mid:1-1"), Err(ConfigError::Arch { token, .. }) if token == "mid:1-1")
        );
        assert!(parse_arch("enc:2-2 enc:1-1").is_err());
        assert!(parse_arch("dec:2-2").is_err());
    }

    #[test]
    fn ratio_ranges() {
        let r = parse_ratios("0.1:0.9:0.1").unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(r[2], 0.3);
        assert_eq!(parse_ratios("0, 0.5").unwrap(), vec![0.0, 0.5]);
        assert!(parse_ratios("0.1:0.9").is_err());
        assert!(parse_ratios("a:b:c").is_err());
    }

    #[test]
    fn file_parsing() {
        let s =
            Settings::parse_file_text("# comment\nepochs = 3 # trailing\n\nbatch-size=4\n", "f")
                .unwrap();
        assert_eq!(s.raw("epochs"), Some("3"));
        assert_eq!(s.raw("batch_size"), Some("4"));
        assert!(matches!(
            Settings::parse_file_text("epochs 3", "f"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert_eq!(
            Settings::parse_file_text("colour = red", "f"),
            Err(ConfigError::UnknownKey("colour".into()))
        );
    }

    #[test]
    fn precedence_is_default_then_file_then_flags() {
        let defaults = RunConfig::resolve(&Settings::default(), None).unwrap();
        assert_eq!(defaults.train, TrainConfig::desk());
        assert_eq!(defaults.seed, 0);

        let file = Settings::parse_file_text("epochs = 3\nbatch_size = 4\nseed = 5", "f").unwrap();
        let mut flags = Settings::default();
        flags.set("epochs", "7");
        let merged = RunConfig::resolve(&file.overlay(flags), Some("99")).unwrap();
        assert_eq!(merged.train.epochs, 7);
        assert_eq!(merged.train.batch_size, 4);
        assert_eq!(merged.seed, 5);
    }

    #[test]
    fn env_seed_is_a_fallback_only() {
        assert_eq!(
            RunConfig::resolve(&Settings::default(), Some("42"))
                .unwrap()
                .train
                .seed,
            42
        );
        let mut flags = Settings::default();
        flags.set("seed", "1");
        assert_eq!(RunConfig::resolve(&flags, Some("42")).unwrap().seed, 1);
        assert!(RunConfig::resolve(&Settings::default(), Some("x")).is_err());
    }

    #[test]
    fn presets_then_explicit_keys() {
        let mut s = Settings::default();
        s.set("preset", "appendix");
        let c = RunConfig::resolve(&s, None).unwrap();
        assert_eq!(
            (c.train.max_lr, c.train.batch_size, c.train.epochs),
            (2e-4, 128, 35)
        );
        s.set("epochs", "2");
        assert_eq!(RunConfig::resolve(&s, None).unwrap().train.epochs, 2);
        s.set("preset", "huge");
        assert!(RunConfig::resolve(&s, None).is_err());
    }

    #[test]
    fn arch_then_individual_layer_keys() {
        let mut s = Settings::default();
        s.set("arch", "enc:4-2 dec:1-1");
        s.set("dec_heads", "4");
        let m = RunConfig::resolve(&s, None).unwrap().model;
        assert_eq!(
            (m.enc_layers, m.enc_heads, m.dec_layers, m.dec_heads),
            (4, 2, 1, 4)
        );
    }
}
