//! `key = value` run configuration with per-subcommand key tables.

use std::collections::HashMap;
use std::path::Path;

use depthlab::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
    }
}

const SEED: &[Key] = &[key("seed", "0", "master seed")];

const MODEL: &[Key] = &[
    key("width", "64", "width N"),
    key("depth", "8", "residual blocks L"),
    key("input_dim", "32", "input dimension D"),
    key("layers_per_block", "1", "matrices per residual block K"),
    key("scheme", "mup_sqrtl", "sp | mup | mup_sqrtl | mup_alpha"),
    key("alpha", "1", "depth exponent for mup_alpha"),
    key("act", "relu", "linear | relu | tanh"),
    key("gamma0", "1", "feature-learning strength"),
    key(
        "zero_block_readout",
        "false",
        "zero-initialize the last matrix of each block",
    ),
    key(
        "branch_multiplier",
        "1",
        "constant factor on every residual branch",
    ),
    key("train_readin", "true", "train the read-in layer"),
    key("train_readout", "true", "train the read-out layer"),
    key("readout_input", "activation", "activation | stream"),
];

const OPTIM: &[Key] = &[
    key("eta0", "1", "base learning rate"),
    key(
        "schedule",
        "constant",
        "constant | linear_warmup | warmup_cosine",
    ),
    key("warmup_steps", "0", "warmup length"),
    key("total_steps", "0", "cosine horizon; 0 means the run length"),
    key("momentum", "0", "heavy-ball coefficient in [0, 1)"),
    key("weight_decay", "0", "decoupled weight decay"),
];

const DATA: &[Key] = &[
    key("samples", "2048", "dataset size P"),
    key("teacher", "shallow-relu", "linear | shallow-relu"),
    key("noise", "0", "label noise standard deviation"),
    key("data_seed", "0", "dataset seed"),
];

const TRAIN: &[Key] = &[
    key("steps", "250", "SGD steps"),
    key("batch", "32", "minibatch size"),
    key("record_every", "10", "loss recording period"),
    key("eval_size", "256", "samples used for the recorded loss"),
    key("ntk_every", "0", "NTK checkpoint period, 0 disables"),
    key("ntk_probe", "8", "samples in the NTK checkpoints"),
];

const SWEEP: &[Key] = &[
    key("schemes", "mup_sqrtl,mup", "comma-separated schemes"),
    key("widths", "128", "comma-separated widths"),
    key("depths", "4,16,64", "comma-separated depths"),
    key("lr_log2_min", "-3", "smallest learning rate exponent"),
    key("lr_log2_max", "4", "largest learning rate exponent"),
    key("lr_points", "8", "log-spaced grid points"),
    key("seeds", "2", "seeds per grid point"),
];

const NTK_INIT: &[Key] = &[
    key("act", "relu", "linear | relu | tanh"),
    key("width", "256", "width N"),
    key("depths", "4,8,16,32", "comma-separated depths"),
    key("ensembles", "8", "networks per depth"),
    key("probe_points", "4", "probe inputs"),
    key("input_dim", "16", "input dimension D"),
    key("grid_steps", "512", "layer-time grid steps"),
];

const LIMIT: &[Key] = &[
    key("act", "relu", "linear | relu | tanh"),
    key("probe_points", "4", "probe inputs"),
    key("input_dim", "16", "input dimension D"),
    key("grid_steps", "512", "layer-time grid steps"),
];

const ONESTEP: &[Key] = &[
    key("width", "500", "width N"),
    key("depth", "32", "residual blocks L"),
    key("input_dim", "16", "input dimension D"),
    key("eta0", "1", "base learning rate"),
    key("gamma0", "1", "feature-learning strength"),
    key("target", "1", "label of the single sample"),
    key("train_readin", "false", "train the read-in layer"),
    key("seeds", "4", "independent networks"),
    key("taus", "0.25,0.5,0.75,1", "layer times to report"),
];

const CONVERGE: &[Key] = &[
    key("widths", "64,128", "comma-separated widths"),
    key("depths", "2,4,8,16", "comma-separated depths"),
    key("proxy_width", "256", "proxy width N*"),
    key("proxy_depth", "32", "proxy depth L*"),
    key("proxy_ensembles", "4", "proxy networks"),
    key("ensembles", "4", "networks per cell"),
    key("probe_points", "32", "held-out probe inputs"),
];

const GRADCHECK: &[Key] = &[
    key("width", "16", "width N"),
    key("depth", "8", "residual blocks L"),
    key("input_dim", "8", "input dimension D"),
    key("ks", "1,2", "comma-separated layers per block"),
    key("act", "tanh", "linear | relu | tanh"),
    key("eps", "3e-5", "finite-difference step"),
];

pub const SUBCOMMANDS: &[(&str, &str)] = &[
    ("train", "train one network on the synthetic task"),
    ("sweep", "learning-rate transfer sweep"),
    (
        "ntk-init",
        "initial NTK against the lazy limit across depth",
    ),
    ("limit-ode", "solve the lazy-limit layer-time equations"),
    (
        "linear-onestep",
        "one-step kernel update of deep linear networks",
    ),
    ("converge", "trained-predictor convergence in depth"),
    ("gradcheck", "backward pass against finite differences"),
];

/// Later tables override earlier ones.
fn merge(parts: &[&[Key]]) -> Vec<Key> {
    let mut out: Vec<Key> = Vec::new();
    for part in parts {
        for k in part.iter() {
            match out.iter_mut().find(|o| o.name == k.name) {
                Some(o) => *o = *k,
                None => out.push(*k),
            }
        }
    }
    out
}

pub fn keys(cmd: &str) -> Vec<Key> {
    match cmd {
        "train" => merge(&[SEED, MODEL, OPTIM, DATA, TRAIN]),
        "sweep" => merge(&[
            SEED,
            MODEL,
            OPTIM,
            DATA,
            TRAIN,
            SWEEP,
            &[
                key("steps", "400", "SGD steps"),
                key("record_every", "100", "loss recording period"),
            ],
        ]),
        "ntk-init" => merge(&[SEED, NTK_INIT]),
        "limit-ode" => merge(&[SEED, LIMIT]),
        "linear-onestep" => merge(&[SEED, ONESTEP]),
        "converge" => merge(&[
            SEED,
            MODEL,
            OPTIM,
            DATA,
            TRAIN,
            CONVERGE,
            &[key("record_every", "250", "loss recording period")],
        ]),
        "gradcheck" => merge(&[SEED, GRADCHECK]),
        _ => Vec::new(),
    }
}

fn config_error(msg: String) -> Error {
    Error::Config(msg)
}

/// Resolved values in key-table order.
#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: Vec<(&'static str, String)>,
    index: HashMap<&'static str, usize>,
}

impl RunConfig {
    pub fn defaults(cmd: &str) -> Self {
        let entries: Vec<(&'static str, String)> = keys(cmd)
            .into_iter()
            .map(|k| (k.name, k.default.to_string()))
            .collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (k, _))| (*k, i))
            .collect();
        Self { entries, index }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.index.get(key) {
            Some(&i) => {
                self.entries[i].1 = value.to_string();
                Ok(())
            }
            None => Err(config_error(format!("unknown key '{key}'"))),
        }
    }

    /// Apply a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_error(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            config_error(format!("key 'config': cannot read {}: {e}", path.display()))
        })?;
        self.apply_text(&text)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.index
            .get(key)
            .map(|&i| self.entries[i].1.as_str())
            .ok_or_else(|| config_error(format!("key '{key}' is not defined here")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| config_error(format!("key '{key}': '{v}' is not {what}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(config_error(format!("key '{key}': '{v}' is not a boolean"))),
        }
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.str(key)?;
        let items: std::result::Result<Vec<T>, _> =
            v.split(',').map(|s| s.trim().parse::<T>()).collect();
        match items {
            Ok(x) if !x.is_empty() => Ok(x),
            _ => Err(config_error(format!("key '{key}': '{v}' is not a list"))),
        }
    }
}
