//! Plain-text checkpoints.
//!
//! ```text
//! rumor-adapt checkpoint v1
//! config <key> = <value>          one line per run setting
//! state <key> = <value>           step, epoch, counters, early-stopping state
//! history <json>                  one line per recorded step report
//! tensor <name> <dims...>         followed by one line of values
//! moment <m|v> <name>             optimizer moments, same layout
//! end
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so parameters load
//! back bit for bit.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::{Counters, StepReport, TrainState};

pub const HEADER: &str = "rumor-adapt checkpoint v1";

fn values_line(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 20);
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x:?}").unwrap();
    }
    s
}

pub fn to_text(config: &RunConfig, state: &TrainState) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for (k, v) in config.entries() {
        writeln!(out, "config {k} = {v}").unwrap();
    }
    let opt = &state.optimizer;
    for (k, v) in [
        ("step", state.step.to_string()),
        ("epoch", state.epoch.to_string()),
        ("optimizer_steps", opt.steps.to_string()),
        ("pseudo_label_calls", state.counters.pseudo_label_calls.to_string()),
        ("cam_calls", state.counters.cam_calls.to_string()),
        ("best_loss", format!("{:?}", state.best_loss)),
        ("stale_epochs", state.stale_epochs.to_string()),
        ("stopped_early", state.stopped_early.to_string()),
    ] {
        writeln!(out, "state {k} = {v}").unwrap();
    }
    for r in &state.history {
        writeln!(out, "history {}", serde_json::to_string(r).expect("report serializes")).unwrap();
    }
    let named = state.params.named();
    for (name, t) in &named {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
        writeln!(out, "{}", values_line(&t.data())).unwrap();
    }
    for (k, (name, _)) in named.iter().enumerate() {
        writeln!(out, "moment m {name}\n{}", values_line(&opt.m[k])).unwrap();
        writeln!(out, "moment v {name}\n{}", values_line(&opt.v[k])).unwrap();
    }
    out.push_str("end\n");
    out
}

pub fn save(path: &Path, config: &RunConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_text(config, state)).map_err(|e| Error::io(path, e))
}

fn parse_values(line: &str, expected: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = line
        .split_ascii_whitespace()
        .map(|x| x.parse::<f64>().map_err(|e| format!("{what}: bad number {x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != expected {
        return Err(format!("{what}: expected {expected} values, found {}", v.len()));
    }
    Ok(v)
}

/// Parses a checkpoint, rebuilding the model from its stored configuration.
pub fn from_text(text: &str) -> Result<(RunConfig, TrainState)> {
    let fail = |m: String| Error::Checkpoint(m);
    let mut lines = text.lines();
    match lines.next() {
        Some(HEADER) => {}
        Some(other) => return Err(fail(format!("unsupported header {other:?}, expected {HEADER:?}"))),
        None => return Err(fail("empty file".into())),
    }
    let mut config_text = String::new();
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut history = Vec::new();
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let mut moments: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut ended = false;

    while let Some(line) = lines.next() {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "config" => {
                config_text.push_str(rest);
                config_text.push('\n');
            }
            "state" => {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| fail(format!("malformed state line {line:?}")))?;
                fields.insert(k.to_string(), v.to_string());
            }
            "history" => {
                let r: StepReport =
                    serde_json::from_str(rest).map_err(|e| fail(format!("bad history line: {e}")))?;
                history.push(r);
            }
            "tensor" => {
                let mut parts = rest.split_ascii_whitespace();
                let name = parts.next().ok_or_else(|| fail("tensor line without name".into()))?.to_string();
                let dims: Vec<usize> = parts
                    .map(|d| d.parse().map_err(|_| fail(format!("bad dimension {d:?} for {name}"))))
                    .collect::<Result<_>>()?;
                let n = dims.iter().product();
                let data = parse_values(lines.next().unwrap_or(""), n, &name).map_err(fail)?;
                tensors.insert(name, (dims, data));
            }
            "moment" => {
                let (which, name) = rest
                    .split_once(' ')
                    .ok_or_else(|| fail(format!("malformed moment line {line:?}")))?;
                let data_line = lines.next().unwrap_or("");
                let data = data_line
                    .split_ascii_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|e| fail(format!("moment {name}: {e}"))))
                    .collect::<Result<Vec<f64>>>()?;
                moments.insert((which.to_string(), name.to_string()), data);
            }
            "end" => {
                ended = true;
                break;
            }
            "" => {}
            other => return Err(fail(format!("unknown record kind {other:?}"))),
        }
    }
    if !ended {
        return Err(fail("truncated checkpoint (no end marker)".into()));
    }

    let config = RunConfig::parse_str(&config_text)?;
    let mut state = TrainState::new(&config.train)?;
    let get = |k: &str| -> Result<&String> { fields.get(k).ok_or_else(|| fail(format!("missing state field {k}"))) };
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| fail(format!("bad state field {k}"))) };
    state.step = num("step")?;
    state.epoch = num("epoch")? as usize;
    state.optimizer.steps = num("optimizer_steps")?;
    state.counters = Counters {
        pseudo_label_calls: num("pseudo_label_calls")?,
        cam_calls: num("cam_calls")?,
    };
    state.best_loss = get("best_loss")?.parse().map_err(|_| fail("bad best_loss".into()))?;
    state.stale_epochs = num("stale_epochs")? as usize;
    state.stopped_early = get("stopped_early")? == "true";
    state.history = history;

    let named = state.params.named();
    for (k, (name, t)) in named.iter().enumerate() {
        let (dims, data) = tensors
            .remove(name)
            .ok_or_else(|| fail(format!("missing tensor {name}")))?;
        if dims != t.shape() {
            return Err(fail(format!("tensor {name} has shape {dims:?}, model expects {:?}", t.shape())));
        }
        t.update_data(|w| w.copy_from_slice(&data));
        for (which, slot) in [("m", &mut state.optimizer.m[k]), ("v", &mut state.optimizer.v[k])] {
            let data = moments
                .remove(&(which.to_string(), name.clone()))
                .ok_or_else(|| fail(format!("missing moment {which} for {name}")))?;
            if data.len() != slot.len() {
                return Err(fail(format!("moment {which} for {name} has {} values, expected {}", data.len(), slot.len())));
            }
            *slot = data;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(fail(format!("checkpoint holds tensor {extra} the model does not have")));
    }
    Ok((config, state))
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
