//! Flat `dotted.key = value` configuration text.
//!
//! Nested structs become dotted keys; every leaf value is written as a JSON
//! literal (numbers, booleans, `null`, quoted strings, arrays). Bare words are
//! accepted as strings when reading. Lines starting with `#` are comments.
//!
//! ```text
//! seed = 7
//! model.d_model = 32
//! model.positional_mode = "conv"
//! model.decoder_conv = {"kernels":[3,3,5],"channels":32,"pool":null}
//! ```
//!
//! Reading always starts from a complete default value, so every key in a
//! file or override must already exist there; unknown keys and values of
//! the wrong kind are reported with the offending key.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::FeatureConfig;
use crate::error::{Error, Result};
use crate::model::{preset, ModelConfig};
use crate::optim::OptimConfig;
use crate::tensor::Precision;

/// Ordered `(key, value text)` pairs.
pub type Entries = Vec<(String, String)>;

pub fn parse_entries(text: &str) -> Result<Entries> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", n + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}", n + 1), "empty key"));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn render_entries(entries: &Entries) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Entries) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), value.to_string())),
    }
}

/// Flattens a serializable value into dotted entries.
pub fn to_entries<T: Serialize>(value: &T) -> Result<Entries> {
    let v = serde_json::to_value(value).map_err(|e| Error::config("<root>", e.to_string()))?;
    let mut out = Vec::new();
    flatten_into("", &v, &mut out);
    Ok(out)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "table",
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for seg in key.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(seg)
                .ok_or_else(|| Error::config(key, "unknown key"))?,
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| Error::config(key, format!("`{seg}` is not a list index")))?;
                let len = items.len();
                items.get_mut(i).ok_or_else(|| {
                    Error::config(key, format!("index {i} out of range (len {len})"))
                })?
            }
            _ => return Err(Error::config(key, "unknown key")),
        };
    }
    let new = parse_value(raw);
    let compatible = match (&*node, &new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (a, b) => kind(a) == kind(b),
    };
    if !compatible {
        return Err(Error::config(
            key,
            format!("expected a {}, got `{raw}`", kind(node)),
        ));
    }
    *node = new;
    Ok(())
}

/// Applies entries on top of `base` and deserializes the result.
pub fn apply_entries<T: Serialize + DeserializeOwned>(base: &T, entries: &Entries) -> Result<T> {
    let mut root =
        serde_json::to_value(base).map_err(|e| Error::config("<root>", e.to_string()))?;
    for (k, v) in entries {
        set_path(&mut root, k, v)?;
    }
    serde_json::from_value(root).map_err(|e| {
        let key = entries.last().map(|(k, _)| k.as_str()).unwrap_or("<root>");
        Error::config(key, format!("invalid configuration: {e}"))
    })
}

/// Keeps the entries under `prefix.` with the prefix stripped.
pub fn section(entries: &Entries, prefix: &str) -> Entries {
    let p = format!("{prefix}.");
    entries
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

pub fn prefixed(entries: Entries, prefix: &str) -> Entries {
    entries
        .into_iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training set container.
    pub train: String,
    /// Subword unit list.
    pub vocab: String,
}

/// Everything needed to reproduce a training run from its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub precision: Precision,
    pub checkpoint_dir: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            epochs: 80,
            precision: Precision::F32,
            checkpoint_dir: "checkpoints".into(),
            data: DataConfig {
                train: "train.data".into(),
                vocab: "vocab.txt".into(),
            },
            model: preset("toy").expect("toy preset"),
            features: FeatureConfig {
                mel_bins: 16,
                ..FeatureConfig::default()
            },
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_entries(entries: &Entries) -> Result<Self> {
        let cfg: RunConfig = apply_entries(&RunConfig::default(), entries)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_entries(&parse_entries(text)?)
    }

    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = parse_entries(&text)?;
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        Self::from_entries(&entries)
    }

    pub fn to_entries(&self) -> Entries {
        to_entries(self).expect("run config serializes")
    }

    pub fn to_text(&self) -> String {
        render_entries(&self.to_entries())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.features.validate()?;
        self.optim.validate()?;
        if self.model.feature_dim != self.features.mel_bins {
            return Err(Error::config(
                "model.feature_dim",
                format!(
                    "{} does not match features.mel_bins = {}",
                    self.model.feature_dim, self.features.mel_bins
                ),
            ));
        }
        Ok(())
    }

    /// Resolves a data path relative to `base` (usually the config file's
    /// directory) unless it is absolute.
    pub fn resolve(base: &Path, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// The part of the config that describes the trained artifact, echoed
    /// into checkpoint headers. Paths are left out so runs in different
    /// directories produce identical files.
    pub fn echo(&self) -> Entries {
        let mut e = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("precision".to_string(), to_json(&self.precision)),
        ];
        e.extend(prefixed(to_entries(&self.model).expect("model"), "model"));
        e.extend(prefixed(
            to_entries(&self.features).expect("features"),
            "features",
        ));
        e.extend(prefixed(to_entries(&self.optim).expect("optim"), "optim"));
        e
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::PositionalMode;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert!(text.contains("model.d_model = 32"));
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn overrides_edit_single_keys() {
        let mut entries = RunConfig::default().to_entries();
        entries.push(parse_override("model.dec_layers=4").unwrap());
        entries.push(parse_override("model.positional_mode=sinusoidal").unwrap());
        entries.push(parse_override("model.decoder_conv.kernels=[3,3,3,5]").unwrap());
        entries.push(parse_override("model.encoder_conv_blocks.1.channels=6").unwrap());
        let cfg = RunConfig::from_entries(&entries).unwrap();
        assert_eq!(cfg.model.dec_layers, 4);
        assert_eq!(cfg.model.positional_mode, PositionalMode::Sinusoidal);
        assert_eq!(cfg.model.decoder_conv.kernels, vec![3, 3, 3, 5]);
        assert_eq!(cfg.model.encoder_conv_blocks[1].channels, 6);
        assert_eq!(cfg.model.encoder_conv_blocks[0].channels, 4);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::from_text("model.d_modle = 3\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "model.d_modle"),
            "{err}"
        );
        let err = RunConfig::from_text("model.heads = \"many\"\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "model.heads"),
            "{err}"
        );
        let err = RunConfig::from_text("model.heads = 5\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "model.heads"),
            "{err}"
        );
        let err = RunConfig::from_text("no equals sign\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn comments_and_bare_strings() {
        let cfg = RunConfig::from_text(
            "# sweep\ncheckpoint_dir = runs/a\n\nmodel.positional_mode = both\n",
        )
        .unwrap();
        assert_eq!(cfg.checkpoint_dir, "runs/a");
        assert_eq!(cfg.model.positional_mode, PositionalMode::Both);
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(
            seed in 0u64..1_000_000,
            epochs in 0usize..200,
            dec in 0usize..5,
            kernels in prop::collection::vec(1usize..8, 1..5),
            dropout in 0.0f64..0.9,
            rho in 0.5f64..0.999,
        ) {
            let mut cfg = RunConfig { seed, epochs, ..RunConfig::default() };
            cfg.model.dec_layers = dec;
            cfg.model.decoder_conv.kernels = kernels;
            cfg.model.dropout = dropout;
            cfg.optim.rho = rho;
            let parsed = RunConfig::from_text(&cfg.to_text()).unwrap();
            prop_assert_eq!(&parsed, &cfg);
            let again = RunConfig::from_text(&parsed.to_text()).unwrap();
            prop_assert_eq!(again, parsed);
        }
    }
}
