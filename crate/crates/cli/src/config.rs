//! Run settings. Precedence: profile defaults, then the `key = value` file,
//! then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use light_yolo::data::Split;
use light_yolo::model::{Arch, ModelConfig, MAX_STRIDE};
use light_yolo::train::{Profile, TrainConfig};

/// Every key accepted in a config file; flags map onto the same names.
pub const KEYS: [&str; 22] = [
    "profile", "model", "nc", "img", "epochs", "batch", "lr", "lrf", "warmup", "iters", "momentum", "box", "act", "seed",
    "data", "weights", "threads", "width", "depth", "ws", "hflip", "n",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    weights: Option<PathBuf>,
    pub threads: usize,
    /// Images written by `synth`.
    pub synth_n: usize,
}

/// Splits `key = value` lines; `#` starts a comment anywhere on a line.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("{origin}:{}: expected `key = value`", i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(format!("{origin}:{}: unknown key {k:?}", i + 1));
        }
        if v.is_empty() {
            return Err(format!("{origin}:{}: empty value for {k}", i + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn positive(key: &str, v: &str) -> Result<usize, String> {
    match num::<usize>(key, v)? {
        0 => Err(format!("{key} must be positive")),
        n => Ok(n),
    }
}

fn positive_f(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(format!("{key} must be a positive number"))
    }
}

impl RunConfig {
    /// Builds the config from the file pairs then the flag pairs (flags win).
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self, String> {
        let all: Vec<&(String, String)> = file.iter().chain(flags).collect();
        let profile = match all.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => v.parse::<Profile>().map_err(|e| e.to_string())?,
            None => Profile::Paper,
        };
        let mut cfg = Self {
            profile,
            model: profile.model(Arch::Light, 2),
            train: profile.train(0),
            data: PathBuf::from("data"),
            weights: None,
            threads: 1,
            synth_n: profile.synth_count(),
        };
        for (k, v) in all {
            cfg.set(k, v)?;
        }
        cfg.model.img = cfg.train.img;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let err = |e: light_yolo::Error| e.to_string();
        match key {
            "profile" => {}
            "model" => self.model.arch = v.parse().map_err(err)?,
            "nc" => self.model.nc = positive(key, v)?,
            "img" => self.train.img = positive(key, v)?,
            "epochs" => self.train.epochs = positive(key, v)?,
            "batch" => self.train.batch = positive(key, v)?,
            "lr" => self.train.lr0 = positive_f(key, v)?,
            "lrf" => self.train.lrf = positive_f(key, v)?,
            "warmup" => self.train.warmup_iters = num(key, v)?,
            "iters" => self.train.max_iters = Some(positive(key, v)?),
            "momentum" => self.train.sgd.momentum = num(key, v)?,
            "box" => self.train.loss.kind = v.parse().map_err(err)?,
            "act" => self.model.act = v.parse().map_err(err)?,
            "seed" => self.train.seed = num(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "weights" => self.weights = Some(PathBuf::from(v)),
            "threads" => self.threads = positive(key, v)?,
            "width" => self.model.width_multiple = positive_f(key, v)?,
            "depth" => self.model.depth_multiple = positive_f(key, v)?,
            "ws" => self.model.ws = positive(key, v)?,
            "hflip" => self.train.hflip = num(key, v)?,
            "n" => self.synth_n = positive(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..1.0).contains(&self.train.sgd.momentum) {
            return Err("momentum must be in [0, 1)".into());
        }
        let p5 = self.train.img / MAX_STRIDE;
        if self.model.arch == Arch::Light && p5 % self.model.ws != 0 {
            return Err(format!("img/{MAX_STRIDE} = {p5} is not a multiple of the window size {}", self.model.ws));
        }
        Ok(())
    }

    /// Checkpoint path; defaults to `<data>/best.lyv5`.
    pub fn weights(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.data.join("best.lyv5"))
    }

    pub fn weights_given(&self) -> Option<&Path> {
        self.weights.as_deref()
    }
}

pub fn parse_split(v: &str) -> Result<Split, String> {
    v.parse::<Split>().map_err(|e| e.to_string())
}
