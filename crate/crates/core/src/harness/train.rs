use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::model::{argmax_rows, build_stack, forward, prepare, Prepared};
use super::synthetic::{generate_range, HELD_OUT_OFFSET};
use crate::dgsct::DgSctHyper;
use crate::encoder::{cross_entropy, DualEncoderStack, FrozenParams};
use crate::error::{Error, Result};
use crate::param::{bind, collect_grads, named_tensors, Named};
use crate::tensor::{Tape, Tensor};

/// Which attention terms a training run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoSpatial,
    NoChannel,
    NoTemporal,
    A2vOnly,
    V2aOnly,
    None,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoSpatial,
        Ablation::NoChannel,
        Ablation::NoTemporal,
        Ablation::A2vOnly,
        Ablation::V2aOnly,
        Ablation::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSpatial => "no_s",
            Ablation::NoChannel => "no_c",
            Ablation::NoTemporal => "no_t",
            Ablation::A2vOnly => "a2v_only",
            Ablation::V2aOnly => "v2a_only",
            Ablation::None => "none",
        }
    }

    /// `hyper` with the ablated terms switched off.
    pub fn apply(self, hyper: DgSctHyper) -> DgSctHyper {
        match self {
            Ablation::Full => hyper,
            Ablation::NoSpatial => DgSctHyper { beta: 0.0, ..hyper },
            Ablation::NoChannel => DgSctHyper { alpha: 0.0, ..hyper },
            Ablation::NoTemporal => DgSctHyper { gamma: 0.0, ..hyper },
            Ablation::A2vOnly => DgSctHyper { v2a: false, ..hyper },
            Ablation::V2aOnly => DgSctHyper { a2v: false, ..hyper },
            Ablation::None => DgSctHyper {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
                ..hyper
            },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::InvalidConfig(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// SHA-256 over every frozen tensor, names included.
pub fn frozen_hash(frozen: &FrozenParams) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in named_tensors(frozen, "") {
        hasher.update(name.as_bytes());
        hasher.update(t.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub ablation: Ablation,
    pub steps: usize,
    /// Mean batch loss before each update.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses within each pass over the training split.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the training split after the last update.
    pub final_loss: f64,
    /// Per-timestep accuracy on the held-out split.
    pub accuracy: f64,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "ablation,steps,final_loss,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.ablation,
            self.steps,
            super::report::real(self.final_loss),
            super::report::real(self.accuracy)
        )
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub initial: DualEncoderStack,
    pub trained: DualEncoderStack,
}

fn mean_loss(stack: &DualEncoderStack, hyper: &DgSctHyper, samples: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let tape = Tape::new();
        let frozen = bind(&stack.frozen, &tape, false);
        let trainable = bind(&stack.trainable, &tape, false);
        let (logits, _) = forward(&tape, s, &frozen, &trainable.dgsct, &trainable.head, hyper)?;
        total += cross_entropy(&logits, &s.labels)?.item();
    }
    Ok(total / samples.len() as f64)
}

/// Per-timestep accuracy of `stack` on `samples`.
pub fn evaluate(stack: &DualEncoderStack, hyper: &DgSctHyper, samples: &[Prepared]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for s in samples {
        let tape = Tape::new();
        let frozen = bind(&stack.frozen, &tape, false);
        let trainable = bind(&stack.trainable, &tape, false);
        let (logits, _) = forward(&tape, s, &frozen, &trainable.dgsct, &trainable.head, hyper)?;
        let pred = argmax_rows(&logits.value());
        hits += pred.iter().zip(&s.labels).filter(|(p, l)| p == l).count();
        total += s.labels.len();
    }
    Ok(hits as f64 / total as f64)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::DivergenceDetected(step),
        other => other,
    }
}

/// Trains the DG-SCT modules and head with plain SGD on per-timestep
/// cross-entropy. Encoder weights are bound as constants and never change.
pub fn train_loop(cfg: &RunConfig, ablation: Ablation) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hyper = ablation.apply(cfg.hyper());
    let initial = build_stack(cfg)?;
    let mut stack = initial.clone();
    stack.hyper = hyper;
    let train: Vec<Prepared> = generate_range(cfg, 0, cfg.train_size)?
        .iter()
        .map(|p| prepare(cfg, p))
        .collect::<Result<_>>()?;
    let held_out: Vec<Prepared> = generate_range(cfg, HELD_OUT_OFFSET, cfg.eval_size)?
        .iter()
        .map(|p| prepare(cfg, p))
        .collect::<Result<_>>()?;
    let frozen_hash_before = frozen_hash(&stack.frozen);

    let steps_per_epoch = cfg.train_size.div_ceil(cfg.batch);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_len = 0usize;
    for step in 0..cfg.steps {
        let grads = {
            let tape = Tape::new();
            let frozen = bind(&stack.frozen, &tape, false);
            let trainable = bind(&stack.trainable, &tape, true);
            let mut total: Option<crate::tensor::Var<'_>> = None;
            for j in 0..cfg.batch {
                let sample = &train[(step * cfg.batch + j) % train.len()];
                let (logits, _) = forward(&tape, sample, &frozen, &trainable.dgsct, &trainable.head, &hyper)
                    .map_err(diverged(step))?;
                let loss = cross_entropy(&logits, &sample.labels).map_err(diverged(step))?;
                total = Some(match total {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let loss = total.expect("batch is positive").scale(1.0 / cfg.batch as f64)?;
            if !loss.item().is_finite() {
                return Err(Error::DivergenceDetected(step));
            }
            step_losses.push(loss.item());
            epoch_sum += loss.item();
            epoch_len += 1;
            let grads = tape.backward(loss).map_err(diverged(step))?;
            collect_grads(&trainable, "", &grads)
        };
        let lr = cfg.lr;
        let mut finite = true;
        stack.trainable.for_each_named_mut("", &mut |name, t| {
            t.axpy(-lr, &grads[name]);
            finite &= t.is_finite();
        });
        if !finite {
            return Err(Error::DivergenceDetected(step));
        }
        if epoch_len == steps_per_epoch || step + 1 == cfg.steps {
            epoch_losses.push(epoch_sum / epoch_len as f64);
            epoch_sum = 0.0;
            epoch_len = 0;
        }
    }

    let final_loss = mean_loss(&stack, &hyper, &train).map_err(diverged(cfg.steps))?;
    if !final_loss.is_finite() {
        return Err(Error::DivergenceDetected(cfg.steps));
    }
    let accuracy = evaluate(&stack, &hyper, &held_out)?;
    let report = TrainReport {
        ablation,
        steps: cfg.steps,
        step_losses,
        epoch_losses,
        final_loss,
        accuracy,
        frozen_hash_before,
        frozen_hash_after: frozen_hash(&stack.frozen),
    };
    Ok(TrainOutcome {
        report,
        initial,
        trained: stack,
    })
}

/// Tensors of `params` as a flat name-to-value list, for comparisons.
pub fn snapshot<T: Named<Tensor>>(params: &T) -> Vec<(String, Tensor)> {
    named_tensors(params, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("everything".parse::<Ablation>().is_err());
    }

    #[test]
    fn ablations_zero_the_right_terms() {
        let h = DgSctHyper::desk();
        assert_eq!(Ablation::NoSpatial.apply(h).beta, 0.0);
        assert_eq!(Ablation::NoChannel.apply(h).alpha, 0.0);
        assert_eq!(Ablation::NoTemporal.apply(h).gamma, 0.0);
        assert!(!Ablation::A2vOnly.apply(h).v2a);
        assert!(!Ablation::V2aOnly.apply(h).a2v);
        assert_eq!(Ablation::None.apply(h), DgSctHyper::zero());
        assert_eq!(Ablation::Full.apply(h), h);
    }

    #[test]
    fn short_run_keeps_frozen_weights() {
        let cfg = RunConfig {
            steps: 3,
            batch: 2,
            train_size: 4,
            eval_size: 2,
            ..RunConfig::grad_desk()
        };
        let out = train_loop(&cfg, Ablation::Full).unwrap();
        assert_eq!(out.report.frozen_hash_before, out.report.frozen_hash_after);
        assert_eq!(out.initial.frozen, out.trained.frozen);
        assert_ne!(out.initial.trainable, out.trained.trainable);
        assert_eq!(out.report.step_losses.len(), 3);
        assert_eq!(out.report.epoch_losses.len(), 2);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = RunConfig {
            steps: 50,
            batch: 2,
            train_size: 4,
            eval_size: 2,
            lr: 1e12,
            ..RunConfig::grad_desk()
        };
        assert!(matches!(
            train_loop(&cfg, Ablation::Full),
            Err(Error::DivergenceDetected(_))
        ));
    }
}
