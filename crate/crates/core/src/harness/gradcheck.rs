use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, GRADCHECK_BUDGET};
use super::model::{build_stack, forward, prepare, Prepared};
use super::report::real;
use super::synthetic::{generate_pair, SyntheticPair};
use crate::contrastive::{alignment_loss, embed_modalities, AlignmentMlps, ModalityWeights, Temperatures};
use crate::encoder::{cross_entropy, DualEncoderStack, HeadParams};
use crate::error::{Error, Result};
use crate::param::{bind, named_tensors, Named};
use crate::tensor::{gradcheck, Tape, Tensor, Var, DEFAULT_STEP};

/// Largest relative error a tensor may show before the check fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Width of the class-prototype text vectors.
pub const TEXT_DIM: usize = 6;
/// Hidden and output widths of the alignment projections.
pub const ALIGN_HIDDEN: usize = 8;
pub const ALIGN_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckLine {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub lines: Vec<GradCheckLine>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.max_rel_error < GRADCHECK_TOLERANCE)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    /// One line per tensor: `name numel max_rel_error ok|FAIL`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let verdict = if l.max_rel_error < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            out.push_str(&format!("{} {} {} {}\n", l.name, l.numel, real(l.max_rel_error), verdict));
        }
        out
    }
}

/// Everything the checked objective depends on.
struct Setup {
    stack: DualEncoderStack,
    align: AlignmentMlps,
    temps: Temperatures,
    sample: Prepared,
    text_v: Tensor,
    text_a: Tensor,
    weights: Option<ModalityWeights>,
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(&[rows, cols], 1.0, rng);
    for row in t.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

/// Per-timestep prototype rows picked by label.
fn pick_rows(table: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let cols = table.shape()[1];
    let data = labels
        .iter()
        .flat_map(|&l| table.data()[l * cols..(l + 1) * cols].iter().copied())
        .collect();
    Tensor::new(&[labels.len(), cols], data)
}

/// Clips searched for one whose timesteps all carry different labels.
const CLIP_SEARCH: u64 = 1024;

/// First generated clip whose timesteps all carry different labels. Repeated
/// labels give repeated text rows, which makes the contrastive softmax
/// invariant along some directions and leaves nothing but roundoff to compare.
fn distinct_label_clip(cfg: &RunConfig) -> Result<SyntheticPair> {
    for index in 0..CLIP_SEARCH {
        let pair = generate_pair(cfg, index)?;
        let mut labels = pair.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() == pair.labels.len() {
            return Ok(pair);
        }
    }
    generate_pair(cfg, 0)
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let mut stack = build_stack(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let align = AlignmentMlps::init(cfg.c_v, cfg.c_a, TEXT_DIM, ALIGN_HIDDEN, ALIGN_DIM, &mut rng);
        let table_v = unit_rows(cfg.k, TEXT_DIM, &mut rng);
        let table_a = unit_rows(cfg.k, TEXT_DIM, &mut rng);
        // A zero head would cut every classification gradient into DG-SCT.
        stack.trainable.head = HeadParams::init(cfg.c_v + cfg.c_a, cfg.k, &mut rng);
        let sample = prepare(cfg, &distinct_label_clip(cfg)?)?;
        let mut setup = Self {
            stack,
            align,
            // At the initial 0.07 the two-row softmax is saturated and most
            // alignment gradients sink below the difference quotient's
            // resolution.
            temps: Temperatures::uniform(1.0),
            text_v: pick_rows(&table_v, &sample.labels)?,
            text_a: pick_rows(&table_a, &sample.labels)?,
            sample,
            weights: None,
        };
        let tape = Tape::new();
        setup.weights = Some(setup.objective(&tape, None, Objective::Alignment)?.1);
        Ok(setup)
    }

    /// The loss `target` is checked against. Every tensor is a constant
    /// except `target`, which is substituted by name.
    fn objective<'t>(
        &self,
        tape: &'t Tape,
        target: Option<(&str, Var<'t>)>,
        loss: Objective,
    ) -> Result<(Var<'t>, ModalityWeights)> {
        let mut pick = |name: &str, t: &Tensor| match target {
            Some((n, v)) if n == name => v,
            _ => tape.constant(t),
        };
        let frozen = bind(&self.stack.frozen, tape, false);
        let trainable = self.stack.trainable.map_named("", &mut pick);
        let align = self.align.map_named("align", &mut pick);
        let temps = self.temps.map_named("temps", &mut pick);

        let (logits, out) = forward(
            tape,
            &self.sample,
            &frozen,
            &trainable.dgsct,
            &trainable.head,
            &self.stack.hyper,
        )?;
        let ce = cross_entropy(&logits, &self.sample.labels)?;
        let text_v = tape.constant(&self.text_v);
        let text_a = tape.constant(&self.text_a);
        let emb = embed_modalities(&out.v, &out.a, &text_v, &text_a, &align)?;
        let aligned = alignment_loss(&emb, &temps, self.weights)?;
        let value = match loss {
            Objective::Classification => ce,
            Objective::Alignment => aligned.loss,
        };
        Ok((value, aligned.weights))
    }

    fn checked_tensors(&self) -> Vec<(String, Tensor, Objective)> {
        let tag = |list: Vec<(String, Tensor)>, loss| list.into_iter().map(move |(n, t)| (n, t, loss));
        tag(named_tensors(&self.stack.trainable, ""), Objective::Classification)
            .chain(tag(named_tensors(&self.align, "align"), Objective::Alignment))
            .chain(tag(named_tensors(&self.temps, "temps"), Objective::Alignment))
            .collect()
    }
}

/// DG-SCT and head tensors are checked against the per-timestep
/// cross-entropy, the alignment projections and temperatures against the
/// alignment loss, which is the only loss they enter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Classification,
    Alignment,
}

fn check_config(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let extent = cfg.gradcheck_extent();
    if extent > GRADCHECK_BUDGET {
        return Err(Error::InvalidConfig(format!(
            "gradient check needs T*N_v*C_v*N_a*C_a <= {GRADCHECK_BUDGET}, got {extent}"
        )));
    }
    Ok(())
}

fn run(cfg: &RunConfig, corrupt: bool) -> Result<GradCheckReport> {
    check_config(cfg)?;
    let setup = Setup::new(cfg)?;
    let mut lines = Vec::new();
    for (i, (name, value, loss)) in setup.checked_tensors().into_iter().enumerate() {
        let result = gradcheck::check_with(
            &value,
            DEFAULT_STEP,
            |tape, x| Ok(setup.objective(tape, Some((name.as_str(), x)), loss)?.0),
            |g| {
                if corrupt && i == 0 {
                    g.data_mut()[0] = 2.0 * g.data()[0] + 1.0;
                }
            },
        )?;
        lines.push(GradCheckLine {
            numel: value.len(),
            name,
            max_rel_error: result.max_rel_error,
        });
    }
    Ok(GradCheckReport { lines })
}

/// Central-difference check of every DG-SCT tensor, the head, the alignment
/// projections and the temperatures against the tape gradients.
pub fn grad_check_cmd(cfg: &RunConfig) -> Result<GradCheckReport> {
    run(cfg, false)
}

/// Same as [`grad_check_cmd`] with the first analytic gradient deliberately
/// corrupted, to exercise the failure path.
#[doc(hidden)]
pub fn grad_check_corrupted(cfg: &RunConfig) -> Result<GradCheckReport> {
    run(cfg, true)
}
