//! Line-oriented `key = value` run configuration.
//!
//! Every model and curriculum field must be present; training keys are
//! optional. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{CurriculumSchedule, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub curriculum: CurriculumSchedule,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            curriculum: CurriculumSchedule::new(30),
            train: TrainOptions::default(),
        }
    }
}

fn fields<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value).expect("config types serialise") {
        Value::Object(m) => m,
        _ => unreachable!("config types are structs"),
    }
}

fn parse_like(template: &Value, raw: &str) -> Option<Value> {
    match template {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_f64() => raw.parse::<f64>().ok().and_then(|f| serde_json::Number::from_f64(f)).map(Value::Number),
        Value::Number(_) => raw.parse::<u64>().ok().map(|u| Value::Number(u.into())),
        Value::String(_) => Some(Value::String(raw.to_string())),
        _ => None,
    }
}

fn fill<T: Serialize + DeserializeOwned>(
    defaults: &T,
    given: &mut BTreeMap<String, (usize, String)>,
    required: bool,
    missing: &mut Vec<String>,
) -> Result<T> {
    let mut map = fields(defaults);
    for (key, template) in map.iter_mut() {
        match given.remove(key) {
            Some((line, raw)) => {
                *template = parse_like(template, &raw).ok_or_else(|| {
                    Error::Config(format!("line {line}: cannot read {key} = {raw:?}"))
                })?;
            }
            None if required => missing.push(key.clone()),
            None => {}
        }
    }
    Ok(serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut given = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
            let key = k.trim().to_string();
            if given.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {line_no}: {key} given twice")));
            }
        }
        let d = Self::default();
        let mut missing = Vec::new();
        let model = fill(&d.model, &mut given, true, &mut missing)?;
        let curriculum = fill(&d.curriculum, &mut given, true, &mut missing)?;
        let train = fill(&d.train, &mut given, false, &mut missing)?;
        if let Some(key) = given.keys().next() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing keys: {}. Defaults:\n{}",
                missing.join(", "),
                Self::default().render()
            )));
        }
        let cfg = Self { model, curriculum, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.curriculum.validate()?;
        self.train.validate()
    }

    /// The configuration in file form; `parse(render())` is the identity.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, map) in [
            ("model", fields(&self.model)),
            ("curriculum", fields(&self.curriculum)),
            ("training", fields(&self.train)),
        ] {
            out.push_str(&format!("# {section}\n"));
            for (k, v) in map {
                let v = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
