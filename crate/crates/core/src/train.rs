//! Clip-level training with stochastic gradient descent.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::netpbm::{write_frame, write_mask};
use crate::data::{clip_at, Clip, ClipSampler, VideoSequence};
use crate::error::{Error, Result};
use crate::metrics::{ce_loss, segmentation_metrics};
use crate::model::Stpfnet;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Plain SGD with optional heavy-ball momentum and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, grad_clip: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            grad_clip,
            velocity: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.momentum, cfg.grad_clip)
    }

    /// Applies one update; `grads` are in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let scale = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
        }
        for ((p, g), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + scale * gi;
            }
            let updated = p.data().iter().zip(v.iter()).map(|(pi, vi)| pi - self.lr * vi).collect();
            *p = Tensor::new(p.shape().to_vec(), updated).expect("same shape");
        }
    }
}

/// Loss and gradients of one clip: frames 2 and 3 predicted from frame 1's
/// ground truth.
pub struct ClipLoss {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Frame 2 and 3 predictions.
    pub probs: [Tensor; 2],
}

/// Total loss of a clip on `ctx`'s tape, with the frame 2 and 3 predictions.
pub fn clip_forward<'t>(
    model: &Stpfnet,
    ctx: &Ctx<'t>,
    clip: &Clip,
    teacher_forcing: bool,
) -> Result<(Var<'t>, [Var<'t>; 2])> {
    let tape = ctx.tape();
    let [f1, f2, f3] = clip.frames.each_ref().map(|f| tape.constant(f.clone()));
    let [g1, g2, g3] = &clip.masks;
    let (mut memory, mut prior) = model.init_state(ctx, f1, tape.constant(g1.clone()))?;
    let out2 = model.frame_forward(ctx, &memory, &prior, f2)?;
    let mask2 = if teacher_forcing {
        tape.constant(g2.clone())
    } else {
        model.prior_mask(out2.prob)
    };
    model.advance(ctx, &mut memory, &mut prior, f2, mask2, out2.embedding.key)?;
    let out3 = model.frame_forward(ctx, &memory, &prior, f3)?;
    let loss = ce_loss(&[(out2.prob, g2), (out3.prob, g3)])?;
    Ok((loss, [out2.prob, out3.prob]))
}

pub fn clip_loss(model: &Stpfnet, clip: &Clip, teacher_forcing: bool) -> Result<ClipLoss> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let (loss, [p2, p3]) = clip_forward(model, &ctx, clip, teacher_forcing)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {value} on clip {}@{}",
            clip.sequence, clip.start
        )));
    }
    let grads = ctx.param_grads(&tape.backward(loss)?);
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} on clip {}@{}",
            model.params.iter().nth(bad).map_or("?", |(n, _)| n),
            clip.sequence,
            clip.start
        )));
    }
    Ok(ClipLoss {
        loss: value,
        grads,
        probs: [p2.value(), p3.value()],
    })
}

/// Writes the frames and masks of a clip for post-mortem inspection.
pub fn dump_clip(clip: &Clip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (f, m)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        write_frame(f, &dir.join(format!("frame{i}.pgm")))?;
        write_mask(m, &dir.join(format!("mask{i}.pgm")))?;
    }
    let info = format!("sequence = {}\nstart = {}\n", clip.sequence, clip.start);
    let path = dir.join("clip.txt");
    std::fs::write(&path, info).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every step, before its update.
    pub losses: Vec<f64>,
    /// Number of values the clip sampler drew, for resuming.
    pub rng_word_pos: u128,
}

impl TrainReport {
    /// Mean of the first `window` losses.
    pub fn initial_loss(&self, window: usize) -> f64 {
        mean(&self.losses[..window.min(self.losses.len())])
    }

    /// Mean of the last `window` losses.
    pub fn final_loss(&self, window: usize) -> f64 {
        mean(&self.losses[self.losses.len().saturating_sub(window)..])
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean Dice of frames 2 and 3 over every training clip of `sequences`, run
/// the way training runs them (no teacher forcing) at original resolution.
pub fn training_clip_dice(model: &Stpfnet, sequences: &[&VideoSequence], threshold: f64) -> Result<f64> {
    let mut dices = Vec::new();
    for seq in sequences {
        for start in 0..seq.len() {
            let Some(clip) = clip_at(seq, start) else { break };
            let tape = Tape::no_grad();
            let ctx = Ctx::frozen(&tape, &model.params);
            let (_, probs) = clip_forward(model, &ctx, &clip, false)?;
            for (prob, gt) in probs.iter().zip(&clip.masks[1..]) {
                let m = segmentation_metrics(&seq.unpad(&prob.value())?, &seq.unpad(gt)?, threshold)?;
                dices.push(m.dice);
            }
        }
    }
    if dices.is_empty() {
        return Err(Error::validation("no sequence has a full training clip"));
    }
    Ok(mean(&dices))
}

/// Clip-sampler seed for a run seed, kept apart from the stream that
/// initializes parameters.
pub fn sampler_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

/// Trains `model` in place on clips drawn from `sequences`. On a non-finite
/// loss the offending clip is written under `dump_dir` (if given) and the
/// error returned.
pub fn train(
    model: &mut Stpfnet,
    sequences: &[&VideoSequence],
    cfg: &TrainConfig,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let mut sampler = ClipSampler::new(sequences.iter().copied(), ChaCha8Rng::seed_from_u64(sampler_seed(seed)));
    if cfg.steps > 0 && sampler.is_empty() {
        return Err(Error::validation("no training sequence has three annotated frames"));
    }
    let mut opt = Sgd::from_config(cfg);
    for step in 0..cfg.steps {
        let clip = sampler.next().expect("non-empty sampler never ends");
        let out = match clip_loss(model, &clip, cfg.teacher_forcing) {
            Err(Error::NonFinite(msg)) => {
                let mut msg = format!("step {step}: {msg}");
                if let Some(dir) = dump_dir {
                    let target: PathBuf = dir.join(format!("nonfinite_step{step}"));
                    dump_clip(&clip, &target)?;
                    msg.push_str(&format!("; clip written to {}", target.display()));
                }
                return Err(Error::NonFinite(msg));
            }
            other => other?,
        };
        report.losses.push(out.loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!(
                "step {step:>5}  loss {:.5}  smoothed {:.5}",
                out.loss,
                report.final_loss(cfg.smoothing)
            );
        }
        opt.step(&mut model.params, &out.grads);
    }
    report.rng_word_pos = sampler.rng().get_word_pos();
    Ok(report)
}
