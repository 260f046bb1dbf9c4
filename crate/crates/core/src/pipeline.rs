//! Glue between conversation files, the trainer and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::{render, render_pretrain, Conversation, SqPolicy, Stage, TurnSequence};
use crate::error::{Error, Result};
use crate::model::SqLlava;
use crate::trainer::{Sample, StepReport, Trainer};

/// Renders every conversation for `stage`. Turn kinds come from `policy`.
pub fn render_all(
    convs: &[Conversation],
    stage: Stage,
    policy: &SqPolicy,
    model: &SqLlava,
) -> Result<Vec<TurnSequence>> {
    policy.validate()?;
    let l_v = model.config.vision.num_tokens();
    let max = model.config.lm.max_seq_len;
    convs
        .iter()
        .map(|c| match stage {
            Stage::Pretrain => render_pretrain(c, &model.vocab, l_v, max),
            Stage::Finetune => render(c, &policy.assign(c), &model.vocab, l_v, max),
        })
        .collect()
}

/// Rendered records paired with their pixels.
pub fn samples(
    convs: &[Conversation],
    stage: Stage,
    policy: &SqPolicy,
    model: &SqLlava,
    image_base: Option<&Path>,
) -> Result<Vec<Sample>> {
    let seqs = render_all(convs, stage, policy, model)?;
    let want = [
        model.config.vision.image_size,
        model.config.vision.image_size,
        model.config.vision.channels,
    ];
    convs
        .iter()
        .zip(seqs)
        .map(|(c, seq)| {
            let pixels = c.image.load(image_base)?;
            if pixels.shape() != want {
                return Err(Error::Data(format!(
                    "conversation `{}`: image shape {:?}, model expects {:?}",
                    c.id,
                    pixels.shape(),
                    want
                )));
            }
            Ok(Sample { seq, pixels })
        })
        .collect()
}

/// Where a stage writes its outputs.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub checkpoint_dir: PathBuf,
    pub metrics: Option<PathBuf>,
    pub save_every: Option<usize>,
}

impl RunOutputs {
    pub fn final_checkpoint(&self, stage: Stage) -> PathBuf {
        self.checkpoint_dir
            .join(format!("{}.ckpt", stage_name(stage)))
    }

    pub fn step_checkpoint(&self, stage: Stage, step: usize) -> PathBuf {
        self.checkpoint_dir
            .join(format!("{}-step{step:06}.ckpt", stage_name(stage)))
    }
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

/// One JSON line per step report.
pub fn metrics_line(r: &StepReport) -> String {
    serde_json::to_string(r).expect("report serializes")
}

/// Runs the trainer to the end of its plan (or `until`), appending metrics,
/// writing intermediate checkpoints and a final one. Returns the final path.
pub fn run_stage(
    model: &mut SqLlava,
    trainer: &mut Trainer,
    samples: &[Sample],
    until: Option<usize>,
    out: &RunOutputs,
) -> Result<PathBuf> {
    let stage = trainer.plan.stage;
    let mut metrics = match &out.metrics {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let end = trainer.plan.total_steps(samples.len());
    let end = until.map_or(end, |u| u.min(end));
    while trainer.step < end {
        let r = trainer.step(model, samples)?;
        if r.step % 50 == 0 || r.step == end {
            log::info!(
                "{} step {}/{end} loss {:.5} (question {:.5}, answer {:.5}) lr {:.3e}",
                stage_name(stage),
                r.step,
                r.loss_total,
                r.loss_q,
                r.loss_a,
                r.lr
            );
        }
        if let Some((path, w)) = metrics.as_mut() {
            writeln!(w, "{}", metrics_line(&r)).map_err(|e| Error::io(&*path, e))?;
        }
        if out.save_every.is_some_and(|k| r.step % k == 0) && r.step < end {
            if let Some((path, w)) = metrics.as_mut() {
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            let p = out.step_checkpoint(stage, r.step);
            checkpoint::save(&p, model, Some(&trainer.plan), trainer.step, &trainer.state)?;
            log::info!("saved {}", p.display());
        }
    }
    if let Some((path, w)) = metrics.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    let p = out.final_checkpoint(stage);
    checkpoint::save(&p, model, Some(&trainer.plan), trainer.step, &trainer.state)?;
    log::info!("saved {}", p.display());
    Ok(p)
}
