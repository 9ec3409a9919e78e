//! One JSON document configures a run: model fields at the top level plus
//! `training`, `sweep`, `ablate`, `quantcheck`, `out_dir` and `run_name`.

use std::path::{Path, PathBuf};

use expe_core::error::Error;
use expe_core::evaluation::ALLOWED_MULTIPLES;
use expe_core::positional::{default_theta, FloatFormat};
use expe_core::training::TrainConfig;
use expe_core::transformer::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Environment variable consulted for the default `out_dir`.
pub const OUT_DIR_ENV: &str = "EXPE_OUT_DIR";

const SECTIONS: [&str; 6] = ["training", "sweep", "ablate", "quantcheck", "out_dir", "run_name"];
const ENCODING_KINDS: [&str; 6] = ["expe", "exqpe", "rope", "sinusoidal", "learned_absolute", "none"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub multiples: Vec<usize>,
    pub scales: Vec<f64>,
    pub n_windows: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            multiples: ALLOWED_MULTIPLES.to_vec(),
            scales: vec![1.0],
            n_windows: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub multiples: Vec<usize>,
    pub n_windows: usize,
    /// Skip variants whose finished run matches the current configs.
    pub reuse: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            multiples: vec![1, 2, 4],
            n_windows: 64,
            reuse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub format: String,
    pub max_len: usize,
    /// ExPE θ and ExQPE θ1.
    pub theta: f64,
    pub theta2: f64,
    /// Override width; defaults to `d_model / 8`.
    pub l: usize,
}

impl QuantConfig {
    fn defaults(d_model: usize) -> Self {
        Self {
            format: "bf16-sim".into(),
            max_len: 16384,
            theta: 1.0 / 2048.0,
            theta2: 1.0 / 16.0,
            l: (d_model / 8).max(1),
        }
    }
}

/// A fully materialized run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
    pub quantcheck: QuantConfig,
    pub out_dir: PathBuf,
    pub run_name: String,
}

impl RunConfig {
    /// The normalized JSON form; feeding it back through
    /// [`normalize`] yields the same config.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.model).expect("model config serializes");
        let obj = v.as_object_mut().expect("model config is an object");
        obj.insert("training".into(), serde_json::to_value(&self.training).expect("serializes"));
        obj.insert("sweep".into(), serde_json::to_value(&self.sweep).expect("serializes"));
        obj.insert("ablate".into(), serde_json::to_value(&self.ablate).expect("serializes"));
        obj.insert("quantcheck".into(), serde_json::to_value(&self.quantcheck).expect("serializes"));
        obj.insert("out_dir".into(), json!(self.out_dir));
        obj.insert("run_name".into(), json!(self.run_name));
        v
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }
}

/// Reads `path` (when given), applies `overrides` in order and normalizes.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, Vec<Error>> {
    let mut raw = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| vec![Error::config("config", format!("cannot read {}: {e}", p.display()))])?;
            serde_json::from_str(&text)
                .map_err(|e| vec![Error::config("config", format!("{}: {e}", p.display()))])?
        }
        None => json!({}),
    };
    expand_shorthand(&mut raw);
    for (key, value) in overrides {
        set_dotted(&mut raw, key, value.clone()).map_err(|e| vec![e])?;
        expand_shorthand(&mut raw);
    }
    normalize(&raw)
}

/// Parses `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value), Error> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("expected key=value, got `{s}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config("--set", format!("malformed key `{key}`")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key, creating intermediate objects.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..i].join(".");
        let obj = match cur {
            Value::Object(o) => o,
            _ => {
                return Err(Error::config(
                    here,
                    format!("cannot set `{key}`: not an object"),
                ))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn expand_shorthand(raw: &mut Value) {
    if let Some(enc) = raw.get_mut("encoding") {
        if let Value::String(kind) = enc {
            *enc = json!({ "kind": kind.clone() });
        }
    }
}

/// Defaults for every field that does not depend on other fields.
fn static_defaults() -> Value {
    let mut v = serde_json::to_value(ModelConfig::default()).expect("serializes");
    let obj = v.as_object_mut().expect("object");
    obj.remove("encoding");
    let mut training = serde_json::to_value(TrainConfig::default()).expect("serializes");
    training["schedule"].as_object_mut().expect("object").remove("total_steps");
    obj.insert("training".into(), training);
    obj.insert("sweep".into(), serde_json::to_value(SweepConfig::default()).expect("serializes"));
    obj.insert("ablate".into(), serde_json::to_value(AblateConfig::default()).expect("serializes"));
    let mut quant = serde_json::to_value(QuantConfig::defaults(8)).expect("serializes");
    quant.as_object_mut().expect("object").remove("l");
    obj.insert("quantcheck".into(), quant);
    let out_dir = std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| "runs".into());
    obj.insert("out_dir".into(), json!(out_dir));
    v
}

/// Every key an encoding of `kind` accepts, with its default.
fn encoding_template(kind: &str, d_model: usize, seq_len: usize) -> Value {
    let theta = default_theta(seq_len);
    let l = (d_model / 8).max(1);
    match kind {
        "expe" => json!({"kind": "expe", "start": 0.0, "theta": theta, "l": l, "scale": 1.0}),
        "exqpe" => json!({"kind": "exqpe", "start": 0.0, "theta1": theta, "theta2": 1.0 / 16.0, "l": l, "scale": 1.0}),
        "rope" => json!({"kind": "rope", "theta_base": 10_000.0}),
        "learned_absolute" => json!({"kind": "learned_absolute", "max_len": seq_len}),
        other => json!({ "kind": other }),
    }
}

fn deep_merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Reports and removes every key of `user` that `template` does not have.
fn prune_unknown(user: &mut Value, template: &Value, prefix: &str, errs: &mut Vec<Error>) {
    let (Value::Object(u), Value::Object(t)) = (user, template) else {
        return;
    };
    u.retain(|k, v| {
        let path = join(prefix, k);
        match t.get(k) {
            None => {
                errs.push(Error::config(path, "unknown key"));
                false
            }
            Some(tv) => {
                prune_unknown(v, tv, &path, errs);
                true
            }
        }
    });
}

fn join(prefix: &str, key: &str) -> String {
    expe_core::error::key_path(prefix, key)
}

fn usize_at(v: &Value, key: &str, fallback: usize) -> usize {
    v.get(key).and_then(Value::as_u64).map(|x| x as usize).unwrap_or(fallback)
}

fn typed<T: DeserializeOwned>(v: Value, prefix: &str, errs: &mut Vec<Error>) -> Option<T> {
    match serde_path_to_error::deserialize::<_, T>(v) {
        Ok(t) => Some(t),
        Err(e) => {
            let path = e.path().to_string();
            let key = if path == "." { prefix.to_string() } else { join(prefix, &path) };
            errs.push(Error::config(key, e.into_inner().to_string()));
            None
        }
    }
}

/// Merges `raw` over the defaults, derives dependent defaults and checks
/// every invariant. All violations are returned, each with its key path.
pub fn normalize(raw: &Value) -> Result<RunConfig, Vec<Error>> {
    let mut errs = Vec::new();
    let mut user = raw.clone();
    if !user.is_object() {
        return Err(vec![Error::config("(root)", "config must be a JSON object")]);
    }
    expand_shorthand(&mut user);
    for path in ["/training", "/training/schedule", "/training/adamw", "/sweep", "/ablate", "/quantcheck", "/ablation"] {
        if let Some(v) = user.pointer(path) {
            if !v.is_object() {
                errs.push(Error::config(path[1..].replace('/', "."), "must be an object"));
            }
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    let defaults = ModelConfig::default();
    let d_model = usize_at(&user, "d_model", defaults.d_model);
    let seq_len = usize_at(&user, "seq_len", defaults.seq_len);

    let kind = match user.get("encoding") {
        None => Some("expe".to_string()),
        Some(enc) => match enc.get("kind") {
            Some(Value::String(k)) if ENCODING_KINDS.contains(&k.as_str()) => Some(k.clone()),
            Some(Value::String(k)) => {
                errs.push(Error::config(
                    "encoding.kind",
                    format!("unknown encoding `{k}`, expected one of {ENCODING_KINDS:?}"),
                ));
                None
            }
            None if enc.is_object() => Some("expe".to_string()),
            Some(_) => {
                errs.push(Error::config("encoding.kind", "must be a string"));
                None
            }
            None => {
                errs.push(Error::config("encoding", "must be a kind name or an object"));
                None
            }
        },
    };
    // a broken encoding is reported once; the rest is checked against the default
    if kind.is_none() {
        user.as_object_mut().expect("object").remove("encoding");
    }
    let kind = kind.unwrap_or_else(|| "expe".to_string());

    let mut template = static_defaults();
    template["encoding"] = encoding_template(&kind, d_model, seq_len);
    template["training"]["schedule"]["total_steps"] = json!(0);
    template["quantcheck"]["l"] = json!(0);
    template["run_name"] = json!("");
    prune_unknown(&mut user, &template, "", &mut errs);

    let mut merged = static_defaults();
    deep_merge(&mut merged, &user);
    let mut enc = encoding_template(&kind, d_model, seq_len);
    if let Some(u) = user.get("encoding") {
        deep_merge(&mut enc, u);
    }
    merged["encoding"] = enc;
    if merged["quantcheck"].get("l").is_none() {
        merged["quantcheck"]["l"] = json!((d_model / 8).max(1));
    }
    if merged["training"]["schedule"].get("total_steps").is_none() {
        let steps = merged["training"].get("total_steps").cloned().unwrap_or(json!(null));
        merged["training"]["schedule"]["total_steps"] = steps;
    }
    if merged.get("run_name").is_none() {
        let seed = merged["training"].get("seed").and_then(Value::as_u64).unwrap_or(0);
        merged["run_name"] = json!(format!("{kind}-s{seed}"));
    }

    let obj = merged.as_object().expect("object");
    let model_part: Map<String, Value> = obj
        .iter()
        .filter(|(k, _)| !SECTIONS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let model: Option<ModelConfig> = typed(Value::Object(model_part), "", &mut errs);
    let training: Option<TrainConfig> = typed(obj["training"].clone(), "training", &mut errs);
    let sweep: Option<SweepConfig> = typed(obj["sweep"].clone(), "sweep", &mut errs);
    let ablate: Option<AblateConfig> = typed(obj["ablate"].clone(), "ablate", &mut errs);
    let quantcheck: Option<QuantConfig> = typed(obj["quantcheck"].clone(), "quantcheck", &mut errs);
    let out_dir: Option<PathBuf> = typed(obj["out_dir"].clone(), "out_dir", &mut errs);
    let run_name: Option<String> = typed(obj["run_name"].clone(), "run_name", &mut errs);

    if let Some(m) = &model {
        errs.extend(m.validate(""));
    }
    if let Some(t) = &training {
        errs.extend(t.validate("training"));
    }
    if let Some(s) = &sweep {
        check_multiples(&s.multiples, "sweep.multiples", &mut errs);
        if s.scales.is_empty() {
            errs.push(Error::config("sweep.scales", "must not be empty"));
        }
        for (i, f) in s.scales.iter().enumerate() {
            if !(*f > 0.0 && f.is_finite()) {
                errs.push(Error::config(format!("sweep.scales.{i}"), format!("must be > 0, got {f}")));
            }
        }
        if s.n_windows == 0 {
            errs.push(Error::config("sweep.n_windows", "must be >= 1"));
        }
    }
    if let Some(a) = &ablate {
        check_multiples(&a.multiples, "ablate.multiples", &mut errs);
        if a.n_windows == 0 {
            errs.push(Error::config("ablate.n_windows", "must be >= 1"));
        }
    }
    if let Some(q) = &quantcheck {
        if let Err(e) = FloatFormat::parse(&q.format) {
            errs.push(Error::config("quantcheck.format", e.to_string()));
        }
        if q.max_len < 2 {
            errs.push(Error::config("quantcheck.max_len", "must be >= 2"));
        }
        for (name, v) in [("theta", q.theta), ("theta2", q.theta2)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(Error::config(format!("quantcheck.{name}"), format!("must be > 0, got {v}")));
            }
        }
        if q.l == 0 {
            errs.push(Error::config("quantcheck.l", "must be >= 1"));
        }
    }
    if let Some(name) = &run_name {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            errs.push(Error::config("run_name", format!("`{name}` is not a plain directory name")));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(RunConfig {
        model: model.expect("checked"),
        training: training.expect("checked"),
        sweep: sweep.expect("checked"),
        ablate: ablate.expect("checked"),
        quantcheck: quantcheck.expect("checked"),
        out_dir: out_dir.expect("checked"),
        run_name: run_name.expect("checked"),
    })
}

fn check_multiples(multiples: &[usize], key: &str, errs: &mut Vec<Error>) {
    if multiples.is_empty() {
        errs.push(Error::config(key, "must not be empty"));
    }
    for (i, m) in multiples.iter().enumerate() {
        if !ALLOWED_MULTIPLES.contains(m) {
            errs.push(Error::config(
                format!("{key}.{i}"),
                format!("{m} is not one of {ALLOWED_MULTIPLES:?}"),
            ));
        }
    }
}
