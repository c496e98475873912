//! Flat `key = value` run configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys use the long flag names of `dygis train`:
//!
//! | key                   | value                                        |
//! |-----------------------|----------------------------------------------|
//! | `dataset`             | path to the snapshot edge list               |
//! | `feature-mode`        | `one-hot`, `learnable` or `file:<path>`      |
//! | `test-snapshots`      | count of trailing test snapshots             |
//! | `labels`              | path to a node label file                    |
//! | `task`                | `detect`, `predict`, `new-predict`, `classify` |
//! | `r`                   | informative ratio in (0, 1]                  |
//! | `lambda`              | weight of the mutual-information term        |
//! | `tau`                 | InfoNCE temperature                          |
//! | `dim`                 | embedding width                              |
//! | `hidden`              | hidden width (even)                          |
//! | `isg-epochs`          | stage-one epochs                             |
//! | `dgmae-epochs`        | stage-two epochs                             |
//! | `learning-rate`       | Adam step size for both stages               |
//! | `seeds`               | `0,1,2` or a half-open range `0..10`         |
//! | `ablation`            | `none`, `no-isg`, `no-mi`                    |
//! | `detection-average`   | `test-snapshots` or `all-snapshots`          |
//! | `dense-bce`           | `true` or `false`                            |
//! | `sampled-softmax`     | `true` or `false`                            |
//! | `probe-epochs`        | linear probe epochs                          |
//! | `probe-learning-rate` | linear probe step size                       |

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    "dataset",
    "feature-mode",
    "test-snapshots",
    "labels",
    "task",
    "r",
    "lambda",
    "tau",
    "dim",
    "hidden",
    "isg-epochs",
    "dgmae-epochs",
    "learning-rate",
    "seeds",
    "ablation",
    "detection-average",
    "dense-bce",
    "sampled-softmax",
    "probe-epochs",
    "probe-learning-rate",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", i + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: `{key}` given twice", i + 1)));
            }
        }
        Ok(FileConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The flag value if present, else the parsed file value.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }
}

/// Parses `0,1,2` or `a..b`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in `{text}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in `{text}`"))?;
        if a >= b {
            return Err(format!("empty seed range `{text}`"));
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| format!("bad seed `{s}`")))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

impl FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_seeds(s).map(Seeds)
    }
}
