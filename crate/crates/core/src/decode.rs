//! Decoding strategies: greedy, temperature/top-p sampling, beam search.
//!
//! All decoders return only the newly generated tokens, excluding the
//! end-of-sequence token when one is produced. There is no KV cache; each
//! step reruns the full forward, which is cheap at this scale.

use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::model::{forward, DecoderModel};
use crate::rng::Rng;

fn next_logits(
    model: &DecoderModel,
    adapters: Option<&LoraSet>,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let (logits, _) = forward(model, &[tokens.to_vec()], adapters, None)?;
    let l = &logits[0];
    Ok(l.row(l.rows() - 1).to_vec())
}

/// Argmax with ties broken by lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Iterative argmax decoding; stops at `eos` or after `max_new` tokens.
pub fn greedy_decode(
    model: &DecoderModel,
    adapters: Option<&LoraSet>,
    prompt: &[usize],
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("greedy_decode: empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        if tokens.len() >= model.config.max_seq {
            break;
        }
        let row = next_logits(model, adapters, &tokens)?;
        let tok = argmax(&row);
        if Some(tok) == eos {
            break;
        }
        generated.push(tok);
        tokens.push(tok);
    }
    Ok(generated)
}

/// Nucleus sampling probabilities for one step: softmax(logits / temperature)
/// restricted to the smallest prefix (sorted descending, ties by index) whose
/// mass reaches `top_p`, renormalized. Exposed for the distribution tests.
pub fn nucleus_distribution(logits: &[f64], temperature: f64, top_p: f64) -> Result<Vec<f64>> {
    if top_p <= 0.0 || top_p > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "top_p must be in (0, 1], got {top_p}"
        )));
    }
    if temperature < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be >= 0, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let log_probs = log_softmax(&scaled);
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| {
        log_probs[b]
            .partial_cmp(&log_probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut dist = vec![0.0; log_probs.len()];
    let mut cum = 0.0;
    for &idx in &order {
        let p = log_probs[idx].exp();
        dist[idx] = p;
        cum += p;
        if cum >= top_p {
            break;
        }
    }
    // Renormalize the kept prefix.
    for v in dist.iter_mut() {
        *v /= cum;
    }
    Ok(dist)
}

fn sample_from(dist: &[f64], rng: &mut Rng) -> usize {
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_nonzero // rounding edge: u landed past the accumulated mass
}

/// Temperature + top-p sampling; temperature zero short-circuits to greedy.
#[allow(clippy::too_many_arguments)]
pub fn sample_decode(
    model: &DecoderModel,
    adapters: Option<&LoraSet>,
    prompt: &[usize],
    temperature: f64,
    top_p: f64,
    rng: &mut Rng,
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("sample_decode: empty prompt".into()));
    }
    if top_p <= 0.0 || top_p > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "top_p must be in (0, 1], got {top_p}"
        )));
    }
    if temperature == 0.0 {
        return greedy_decode(model, adapters, prompt, max_new, eos);
    }
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        if tokens.len() >= model.config.max_seq {
            break;
        }
        let row = next_logits(model, adapters, &tokens)?;
        let dist = nucleus_distribution(&row, temperature, top_p)?;
        let tok = sample_from(&dist, rng);
        if Some(tok) == eos {
            break;
        }
        generated.push(tok);
        tokens.push(tok);
    }
    Ok(generated)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    generated: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    fn normalized_score(&self) -> f64 {
        let len = self.generated.len().max(1);
        self.log_prob / len as f64
    }
}

/// Length-normalized beam search. Returns the best finished hypothesis, or
/// the best unfinished one when nothing finished within `max_new` steps.
pub fn beam_decode(
    model: &DecoderModel,
    adapters: Option<&LoraSet>,
    prompt: &[usize],
    beam_size: usize,
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("beam_decode: empty prompt".into()));
    }
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam_size must be >= 1".into()));
    }
    let mut live = vec![Hypothesis {
        generated: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_new {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut tokens = prompt.to_vec();
            tokens.extend_from_slice(&hyp.generated);
            if tokens.len() >= model.config.max_seq {
                finished.push(Hypothesis {
                    finished: true,
                    ..hyp.clone()
                });
                continue;
            }
            let row = next_logits(model, adapters, &tokens)?;
            let log_probs = log_softmax(&row);
            for (tok, &lp) in log_probs.iter().enumerate() {
                let mut generated = hyp.generated.clone();
                let is_eos = Some(tok) == eos;
                if !is_eos {
                    generated.push(tok);
                }
                candidates.push(Hypothesis {
                    generated,
                    log_prob: hyp.log_prob + lp,
                    finished: is_eos,
                });
            }
        }
        if candidates.is_empty() {
            break;
        }
        // Highest joint log-prob first; ties by shorter token sequence order
        // (which equals lowest-token-index order within one parent).
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then_with(|| a.generated.cmp(&b.generated))
        });
        candidates.truncate(beam_size);
        live = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            a.normalized_score()
                .partial_cmp(&b.normalized_score())
                .unwrap()
                .then_with(|| b.generated.cmp(&a.generated))
        })
        .expect("at least the root hypothesis exists");
    Ok(best.generated)
}
