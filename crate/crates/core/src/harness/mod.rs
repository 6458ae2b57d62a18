//! Command implementations behind the `dgsct` binary: seeded synthetic data,
//! attention dumps, gradient checks, training/ablation runs and parameter
//! accounting.

mod config;
mod gradcheck;
mod model;
pub mod report;
mod synthetic;
mod train;

use std::fmt::Write as _;
use std::path::Path;

pub use config::{RunConfig, GRADCHECK_BUDGET};
pub use gradcheck::{grad_check_cmd, grad_check_corrupted, GradCheckLine, GradCheckReport, GRADCHECK_TOLERANCE};
pub use model::{argmax_rows, build_stack, embed, forward, prepare, Prepared};
pub use synthetic::{
    audio_pattern, generate_pair, generate_range, generate_synthetic_pairs, sample_seed, visual_pattern,
    SyntheticPair, HELD_OUT_OFFSET,
};
pub use train::{evaluate, frozen_hash, snapshot, train_loop, Ablation, TrainOutcome, TrainReport};

use crate::error::{Error, Result};
use crate::param::{bind, count};
use crate::tensor::Tape;
use report::{json_array, json_dims, real};

/// Process exit status for an error: 1 invalid configuration, 2 numerical
/// failure, 3 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 3,
        Error::NonFinite(_)
        | Error::DivergenceDetected(_)
        | Error::Normalization(_)
        | Error::GradientCheckFailed(_) => 2,
        _ => 1,
    }
}

/// Writes `contents` in one call, after all computation has succeeded.
pub fn write_output(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn config_json(cfg: &RunConfig) -> String {
    let fields: Vec<String> = cfg
        .entries()
        .into_iter()
        .map(|(key, value)| {
            let rendered = match key {
                "alpha" | "beta" | "gamma" | "lr" | "noise" | "signal" => {
                    real(value.parse().expect("entries render reals losslessly"))
                }
                _ => value,
            };
            format!("\"{key}\":{rendered}")
        })
        .collect();
    format!("{{{}}}", fields.join(","))
}

/// One forward pass on the first synthetic clip, rendered as the attention
/// dump JSON.
pub fn run_demo(cfg: &RunConfig) -> Result<String> {
    let stack = build_stack(cfg)?;
    let sample = prepare(cfg, &generate_pair(cfg, 0)?)?;
    let tape = Tape::new();
    let frozen = bind(&stack.frozen, &tape, false);
    let trainable = bind(&stack.trainable, &tape, false);
    let (logits, out) = forward(&tape, &sample, &frozen, &trainable.dgsct, &trainable.head, &stack.hyper)?;

    let t = cfg.t;
    let (nv, na) = (stack.dims.visual.tokens(), stack.dims.audio.tokens());
    let (cv, ca) = (cfg.c_v, cfg.c_a);
    let mut s = String::new();
    s.push_str("{\n\"config\":");
    s.push_str(&config_json(cfg));
    let _ = write!(
        s,
        ",\n\"shapes\":{{\"visual_tokens\":{},\"audio_tokens\":{},\"logits\":{},\"m_vc\":{},\"m_ac\":{},\"m_vs\":{},\"m_af\":{},\"g_v\":{},\"g_a\":{}}}",
        json_dims(&out.v.tokens.shape()),
        json_dims(&out.a.tokens.shape()),
        json_dims(&logits.shape()),
        json_dims(&[t, cv]),
        json_dims(&[t, ca]),
        json_dims(&[t, nv]),
        json_dims(&[t, na]),
        json_dims(&[t]),
        json_dims(&[t]),
    );
    s.push_str(",\n\"layers\":[");
    for (i, b) in out.bundles.iter().enumerate() {
        let gate = |g: &Option<crate::tensor::Tensor>| match g {
            Some(g) => json_array(g, &[t]),
            None => "null".to_string(),
        };
        let _ = write!(
            s,
            "{}\n{{\"layer\":{i},\"m_vc\":{},\"m_ac\":{},\"m_vs\":{},\"m_af\":{},\"g_v\":{},\"g_a\":{}}}",
            if i > 0 { "," } else { "" },
            json_array(&b.m_vc, &[t, cv]),
            json_array(&b.m_ac, &[t, ca]),
            json_array(&b.m_vs, &[t, nv]),
            json_array(&b.m_af, &[t, na]),
            gate(&b.g_v),
            gate(&b.g_a),
        );
    }
    s.push_str("],\n\"factors\":[");
    for (i, f) in out.factors.iter().enumerate() {
        let _ = write!(
            s,
            "{}\n{{\"layer\":{i},\"visual\":{},\"audio\":{}}}",
            if i > 0 { "," } else { "" },
            json_array(&f.visual, &[t, nv]),
            json_array(&f.audio, &[t, na]),
        );
    }
    s.push_str("]\n}\n");
    Ok(s)
}

/// Trainable versus frozen parameter counts and the prompt-projection share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    pub head: usize,
    pub dgsct: usize,
    /// Prompt projections (conv + token map) of all layers, both directions.
    pub psi: usize,
    /// Prompt convolution into the visual channels (audio source).
    pub psi_conv_a2v: usize,
    /// Prompt convolution into the audio channels (visual source).
    pub psi_conv_v2a: usize,
    pub psi_tokens: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    pub fn trainable_pct(&self) -> f64 {
        100.0 * self.trainable as f64 / self.total() as f64
    }

    pub fn frozen_pct(&self) -> f64 {
        100.0 * self.frozen as f64 / self.total() as f64
    }

    /// Prompt-projection share of the trainable parameters.
    pub fn psi_pct(&self) -> f64 {
        100.0 * self.psi as f64 / self.trainable as f64
    }

    pub fn render(&self) -> String {
        format!(
            "total {}\ntrainable {} ({:.2}%)\nfrozen {} ({:.2}%)\nhead {}\ndgsct {}\npsi {} ({:.2}% of trainable)\npsi_conv_a2v {}\npsi_conv_v2a {}\npsi_tokens {}\n",
            self.total(),
            self.trainable,
            self.trainable_pct(),
            self.frozen,
            self.frozen_pct(),
            self.head,
            self.dgsct,
            self.psi,
            self.psi_pct(),
            self.psi_conv_a2v,
            self.psi_conv_v2a,
            self.psi_tokens,
        )
    }
}

pub fn count_params(cfg: &RunConfig) -> Result<ParamReport> {
    let stack = build_stack(cfg)?;
    let dg = &stack.trainable.dgsct;
    let sum = |f: &dyn Fn(&crate::dgsct::DgSctParams) -> usize| dg.iter().map(f).sum::<usize>();
    let psi_conv_a2v = sum(&|p| p.a2v.psi_conv.len());
    let psi_conv_v2a = sum(&|p| p.v2a.psi_conv.len());
    let psi_tokens = sum(&|p| p.a2v.psi_tokens.len() + p.v2a.psi_tokens.len());
    Ok(ParamReport {
        trainable: count(&stack.trainable),
        frozen: count(&stack.frozen),
        head: count(&stack.trainable.head),
        dgsct: count(&stack.trainable.dgsct),
        psi: psi_conv_a2v + psi_conv_v2a + psi_tokens,
        psi_conv_a2v,
        psi_conv_v2a,
        psi_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 1);
        assert_eq!(exit_code(&Error::DivergenceDetected(3)), 2);
        assert_eq!(exit_code(&Error::GradientCheckFailed(0.5)), 2);
        assert_eq!(exit_code(&Error::Io("x".into())), 3);
    }

    #[test]
    fn config_echo_is_valid_number_syntax() {
        let json = config_json(&RunConfig::default());
        assert!(json.contains("\"alpha\":2.9999999999999999e-1"), "{json}");
        assert!(json.contains("\"delta_mode\":false"));
    }
}
