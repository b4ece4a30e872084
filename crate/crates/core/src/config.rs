//! Flat structured-text configuration: `[section]` headers followed by
//! `key = value` lines. `#` starts a comment anywhere, `;` only at the start
//! of a line (inside values it separates matrix rows). Keys are unique within
//! a section; sections keep their file order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub name: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), entries: BTreeMap::new() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.1)
    }

    /// Parsed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Error::Parse {
                line: self.line(key),
                msg: format!("[{}] {key} = {v}: {e}", self.name),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::Spec(format!("[{}] is missing `{key}`", self.name)))
    }

    /// Whitespace- or comma-separated list of values.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e| Error::Parse {
                    line: self.line(key),
                    msg: format!("[{}] {key}: `{s}`: {e}", self.name),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Matrix written as rows separated by `;`.
    pub fn matrix(&self, key: &str) -> Result<Option<Vec<Vec<f64>>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(';')
            .map(|row| {
                row.split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f64>().map_err(|e| Error::Parse {
                            line: self.line(key),
                            msg: format!("[{}] {key}: `{s}`: {e}", self.name),
                        })
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<f64>>>>()
            .map(Some)
    }

    /// Fails on keys outside `allowed`, which catches typos.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Parse { line: *line, msg: format!("unknown key `{k}` in [{}]", self.name) });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub sections: Vec<Section>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            // `;` also separates matrix rows, so only a leading `;` is a comment
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse { line: line_no, msg: format!("unterminated section `{line}`") })?
                    .trim();
                if name.is_empty() || sections.iter().any(|s| s.name == name) {
                    return Err(Error::Parse { line: line_no, msg: format!("empty or repeated section `{name}`") });
                }
                sections.push(Section::new(name));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected `key = value`, got `{line}`") })?;
            let section = sections
                .last_mut()
                .ok_or_else(|| Error::Parse { line: line_no, msg: "key outside of any section".into() })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: line_no, msg: "empty key".into() });
            }
            if section.entries.insert(key.to_string(), (v.trim().to_string(), line_no)).is_some() {
                return Err(Error::Parse { line: line_no, msg: format!("duplicate key `{key}`") });
            }
        }
        Ok(Self { sections })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn push(&mut self, section: Section) {
        self.sections.retain(|s| s.name != section.name);
        self.sections.push(section);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for (k, (v, _)) in &s.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "max_epochs",
    "patience",
    "train_fraction",
    "batch_size",
    "knots",
    "flow_layers",
    "nn_width",
    "nn_depth",
    "clip_norm",
    "lr_decay_patience",
    "seed",
];

/// Reads a `[train]` section over the defaults.
pub fn train_config(section: Option<&Section>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let Some(s) = section else { return Ok(d) };
    s.check_keys(TRAIN_KEYS)?;
    let cfg = TrainConfig {
        learning_rate: s.get_or("learning_rate", d.learning_rate)?,
        max_epochs: s.get_or("max_epochs", d.max_epochs)?,
        patience: s.get_or("patience", d.patience)?,
        train_fraction: s.get_or("train_fraction", d.train_fraction)?,
        batch_size: s.get_or("batch_size", d.batch_size)?,
        knots: s.get_or("knots", d.knots)?,
        flow_layers: s.get_or("flow_layers", d.flow_layers)?,
        nn_width: s.get_or("nn_width", d.nn_width)?,
        nn_depth: s.get_or("nn_depth", d.nn_depth)?,
        clip_norm: s.get_or("clip_norm", d.clip_norm)?,
        lr_decay_patience: s.get_or("lr_decay_patience", d.lr_decay_patience)?,
        seed: s.get_or("seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_section(cfg: &TrainConfig) -> Section {
    let mut s = Section::new("train");
    s.set("learning_rate", cfg.learning_rate);
    s.set("max_epochs", cfg.max_epochs);
    s.set("patience", cfg.patience);
    s.set("train_fraction", cfg.train_fraction);
    s.set("batch_size", cfg.batch_size);
    s.set("knots", cfg.knots);
    s.set("flow_layers", cfg.flow_layers);
    s.set("nn_width", cfg.nn_width);
    s.set("nn_depth", cfg.nn_depth);
    s.set("clip_norm", cfg.clip_norm);
    s.set("lr_decay_patience", cfg.lr_decay_patience);
    s.set("seed", cfg.seed);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_matrices() {
        let text = "# header\n[train]\nlearning_rate = 0.01 # inline\nseed=7\n\n[dgp]\nspearman = 1 0.5; 0.5 1\n";
        let c = Config::parse(text).unwrap();
        let t = train_config(c.section("train")).unwrap();
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(t.seed, 7);
        assert_eq!(t.patience, TrainConfig::default().patience);
        let m = c.section("dgp").unwrap().matrix("spearman").unwrap().unwrap();
        assert_eq!(m, vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Config::parse("[a]\nx = 1\nx = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(Config::parse("x = 1").unwrap_err(), Error::Parse { line: 1, .. }));
        let c = Config::parse("[train]\n\nseed = abc\n").unwrap();
        assert!(matches!(train_config(c.section("train")).unwrap_err(), Error::Parse { line: 3, .. }));
        let c = Config::parse("[train]\nsede = 1\n").unwrap();
        assert!(matches!(train_config(c.section("train")).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::default();
        c.push(train_section(&TrainConfig { learning_rate: 0.1 + 0.2, seed: 11, ..Default::default() }));
        let back = Config::parse(&c.render()).unwrap();
        let t = train_config(back.section("train")).unwrap();
        assert_eq!(t.learning_rate, 0.1 + 0.2);
        assert_eq!(t.seed, 11);
    }
}
