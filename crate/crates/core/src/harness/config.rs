use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dgsct::{DgSctHyper, ModalityDims};
use crate::encoder::StackDims;
use crate::error::{Error, Result};

/// Every knob of a harness run. Parsed from a flat `key = value` file and
/// then overridden by command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub l: usize,
    pub f: usize,
    pub p_v: usize,
    pub p_a: usize,
    pub c_v: usize,
    pub c_a: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta_mode: bool,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training clips drawn from the seeded generator.
    pub train_size: usize,
    /// Held-out clips used for accuracy.
    pub eval_size: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Amplitude of the planted class pattern.
    pub signal: f64,
    pub out_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            t: 4,
            h: 8,
            w: 8,
            l: 8,
            f: 8,
            p_v: 2,
            p_a: 2,
            c_v: 16,
            c_a: 16,
            d: 16,
            layers: 2,
            heads: 2,
            k: 4,
            alpha: 0.3,
            beta: 0.05,
            gamma: 0.1,
            delta_mode: false,
            steps: 200,
            lr: 3e-2,
            batch: 8,
            train_size: 256,
            eval_size: 64,
            noise: 0.5,
            signal: 3.0,
            out_path: None,
        }
    }
}

/// Upper bound on `T * N_v * C_v * N_a * C_a` for gradient checks.
pub const GRADCHECK_BUDGET: usize = 10_000;

const KEYS: &[&str] = &[
    "seed", "t", "h", "w", "l", "f", "p_v", "p_a", "c_v", "c_a", "d", "layers", "heads", "k",
    "alpha", "beta", "gamma", "delta_mode", "steps", "lr", "batch", "train_size", "eval_size",
    "noise", "signal", "out_path",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {value:?}")))
}

impl RunConfig {
    /// Small configuration for finite-difference checks: two layers, four
    /// tokens and four channels per modality, two timesteps, and a weaker
    /// planted pattern that keeps the attention maps off their saturated
    /// tails.
    pub fn grad_desk() -> Self {
        Self {
            t: 2,
            h: 4,
            w: 4,
            l: 4,
            f: 4,
            c_v: 4,
            c_a: 4,
            d: 4,
            k: 3,
            signal: 0.5,
            ..Self::default()
        }
    }

    /// Sets one field from its textual form. Keys are case-insensitive.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse_value(&key, value)?,
            "t" => self.t = parse_value(&key, value)?,
            "h" => self.h = parse_value(&key, value)?,
            "w" => self.w = parse_value(&key, value)?,
            "l" => self.l = parse_value(&key, value)?,
            "f" => self.f = parse_value(&key, value)?,
            "p_v" => self.p_v = parse_value(&key, value)?,
            "p_a" => self.p_a = parse_value(&key, value)?,
            "c_v" => self.c_v = parse_value(&key, value)?,
            "c_a" => self.c_a = parse_value(&key, value)?,
            "d" => self.d = parse_value(&key, value)?,
            "layers" => self.layers = parse_value(&key, value)?,
            "heads" => self.heads = parse_value(&key, value)?,
            "k" => self.k = parse_value(&key, value)?,
            "alpha" => self.alpha = parse_value(&key, value)?,
            "beta" => self.beta = parse_value(&key, value)?,
            "gamma" => self.gamma = parse_value(&key, value)?,
            "delta_mode" => self.delta_mode = parse_value(&key, value)?,
            "steps" => self.steps = parse_value(&key, value)?,
            "lr" => self.lr = parse_value(&key, value)?,
            "batch" => self.batch = parse_value(&key, value)?,
            "train_size" => self.train_size = parse_value(&key, value)?,
            "eval_size" => self.eval_size = parse_value(&key, value)?,
            "noise" => self.noise = parse_value(&key, value)?,
            "signal" => self.signal = parse_value(&key, value)?,
            "out_path" => self.out_path = Some(PathBuf::from(value)),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {key:?}; expected one of {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let extents = [
            ("t", self.t),
            ("h", self.h),
            ("w", self.w),
            ("l", self.l),
            ("f", self.f),
            ("p_v", self.p_v),
            ("p_a", self.p_a),
            ("c_v", self.c_v),
            ("c_a", self.c_a),
            ("d", self.d),
            ("heads", self.heads),
            ("batch", self.batch),
            ("eval_size", self.eval_size),
            ("train_size", self.train_size),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        for (name, extent, patch) in [
            ("h", self.h, self.p_v),
            ("w", self.w, self.p_v),
            ("l", self.l, self.p_a),
            ("f", self.f, self.p_a),
        ] {
            if extent % patch != 0 {
                return bad(format!("{name} = {extent} is not divisible by patch size {patch}"));
            }
        }
        for (name, c) in [("c_v", self.c_v), ("c_a", self.c_a)] {
            if c % self.heads != 0 {
                return bad(format!("{name} = {c} is not divisible by heads = {}", self.heads));
            }
        }
        if self.k < 2 {
            return bad(format!("k = {} must be at least 2", self.k));
        }
        let events = self.k - 1;
        let visual_tokens = (self.h / self.p_v) * (self.w / self.p_v);
        let bands = self.f / self.p_a;
        let (need_v, need_a) = (super::synthetic::visual_groups(events), super::synthetic::audio_groups(events));
        if need_v > visual_tokens || need_a > bands {
            return bad(format!(
                "{events} event classes need {need_v} visual patches (have {visual_tokens}) and {need_a} frequency bands (have {bands})"
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.signal.is_finite()) {
            return bad("noise must be non-negative and signal finite".into());
        }
        self.hyper().validate()
    }

    pub fn hyper(&self) -> DgSctHyper {
        DgSctHyper {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            d: self.d,
            delta_mode: self.delta_mode,
            a2v: true,
            v2a: true,
        }
    }

    pub fn visual_grid(&self) -> (usize, usize) {
        (self.h / self.p_v, self.w / self.p_v)
    }

    pub fn audio_grid(&self) -> (usize, usize) {
        (self.l / self.p_a, self.f / self.p_a)
    }

    pub fn stack_dims(&self) -> StackDims {
        StackDims {
            visual: ModalityDims {
                channels: self.c_v,
                grid: self.visual_grid(),
            },
            audio: ModalityDims {
                channels: self.c_a,
                grid: self.audio_grid(),
            },
            visual_patch: self.p_v * self.p_v * 3,
            audio_patch: self.p_a * self.p_a,
            layers: self.layers,
            heads: self.heads,
            classes: self.k,
            d: self.d,
        }
    }

    /// `T * N_v * C_v * N_a * C_a`.
    pub fn gradcheck_extent(&self) -> usize {
        let (vr, vc) = self.visual_grid();
        let (ar, ac) = self.audio_grid();
        self.t * vr * vc * self.c_v * ar * ac * self.c_a
    }

    /// Canonical `key = value` rendering, excluding the output path.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, value) in self.entries() {
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    /// Field names and values in declaration order, excluding the output
    /// path so that a run's artifacts do not depend on where they land.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("t", self.t.to_string()),
            ("h", self.h.to_string()),
            ("w", self.w.to_string()),
            ("l", self.l.to_string()),
            ("f", self.f.to_string()),
            ("p_v", self.p_v.to_string()),
            ("p_a", self.p_a.to_string()),
            ("c_v", self.c_v.to_string()),
            ("c_a", self.c_a.to_string()),
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("k", self.k.to_string()),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("gamma", format!("{:?}", self.gamma)),
            ("delta_mode", self.delta_mode.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch", self.batch.to_string()),
            ("train_size", self.train_size.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("signal", format!("{:?}", self.signal)),
        ]
    }
}
