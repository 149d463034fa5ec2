use crate::tensor::{Scalar, Var};

use super::reasoner::{argmax, Session};
use super::ModelError;

/// Unrolled GRU output.
#[derive(Debug, Clone)]
pub struct GruOutput {
    /// `1 × seq_vocab` logits per step.
    pub step_logits: Vec<Var>,
    /// `1 × gru_hidden` state after each step.
    pub hidden: Vec<Var>,
    /// Greedy tokens (inference), excluding the end marker.
    pub tokens: Vec<usize>,
}

/// One GRU cell update (reset, update, candidate gate layout).
///
/// `r = σ(x·Wr + h·Ur)`, `z = σ(x·Wz + h·Uz)`, `n = tanh(x·Wn + r ⊙ (h·Un))`,
/// `h' = (1 − z) ⊙ n + z ⊙ h`, computed as `n + z ⊙ (h − n)`.
pub fn gru_cell<T: Scalar>(s: &mut Session<'_, T>, h: Var, input_token: usize) -> Result<Var, ModelError> {
    let g = s.config.gru_hidden;
    let w_in = s.param("gru.input.weight", 0)?;
    let b_in = s.param("gru.input.bias", 0)?;
    let x = s.graph.select_row(w_in, input_token)?;
    let gi = s.graph.add_bias(x, b_in)?;
    let gh = s.linear(h, "gru.hidden", 0)?;

    let gate = |s: &mut Session<'_, T>, src: Var, k: usize| s.graph.slice_cols(src, k * g, g);
    let (ir, iz, inn) = (gate(s, gi, 0)?, gate(s, gi, 1)?, gate(s, gi, 2)?);
    let (hr, hz, hn) = (gate(s, gh, 0)?, gate(s, gh, 1)?, gate(s, gh, 2)?);

    let r = s.graph.add(ir, hr)?;
    let r = s.graph.sigmoid(r)?;
    let z = s.graph.add(iz, hz)?;
    let z = s.graph.sigmoid(z)?;
    let rh = s.graph.mul(r, hn)?;
    let n = s.graph.add(inn, rh)?;
    let n = s.graph.tanh(n)?;
    let diff = s.graph.sub(h, n)?;
    let zd = s.graph.mul(z, diff)?;
    Ok(s.graph.add(n, zd)?)
}

/// Decode a token sequence from the fused representation.
///
/// The initial state is a learned projection of `fused`. With `teacher`
/// (training), step inputs are the start marker followed by the target tokens
/// and one step per target plus the end marker is run. Without it, the argmax
/// token is fed back until the end marker or `max_steps`.
pub fn gru_decode<T: Scalar>(
    s: &mut Session<'_, T>,
    fused: Var,
    max_steps: usize,
    teacher: Option<&[usize]>,
) -> Result<GruOutput, ModelError> {
    if max_steps == 0 {
        return Err(ModelError::ZeroDecodeSteps);
    }
    let vocab = s.config.seq_vocab;
    let end = s.config.end_token();
    let mut h = s.linear(fused, "gru.init", 0)?;
    let mut out = GruOutput { step_logits: Vec::new(), hidden: Vec::new(), tokens: Vec::new() };
    let mut input = s.config.start_token();
    match teacher {
        Some(targets) => {
            if targets.len() + 1 > max_steps {
                return Err(ModelError::SequenceTooLong { len: targets.len() + 1, max: max_steps });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
                return Err(ModelError::TokenOutOfRange { token: bad, vocab });
            }
            for step in 0..=targets.len() {
                h = gru_cell(s, h, input)?;
                out.hidden.push(h);
                out.step_logits.push(s.linear(h, "gru.out", 0)?);
                if step < targets.len() {
                    input = targets[step];
                }
            }
        }
        None => {
            for _ in 0..max_steps {
                h = gru_cell(s, h, input)?;
                out.hidden.push(h);
                let logits = s.linear(h, "gru.out", 0)?;
                out.step_logits.push(logits);
                let token = argmax(s.graph.value(logits));
                if token == end {
                    break;
                }
                out.tokens.push(token);
                input = token;
            }
        }
    }
    Ok(out)
}

/// Map a decoded sequence onto one of the candidate options: an exact match
/// wins; otherwise the option with the highest position-wise agreement,
/// normalized by the longer length. Ties go to the lowest index.
pub fn map_sequence_to_option(decoded: &[usize], options: &[Vec<usize>]) -> usize {
    if let Some(i) = options.iter().position(|o| o.as_slice() == decoded) {
        return i;
    }
    let mut best = 0;
    let mut best_score = -1.0;
    for (i, option) in options.iter().enumerate() {
        let longer = decoded.len().max(option.len());
        let agree = decoded.iter().zip(option).filter(|(a, b)| a == b).count();
        let score = if longer == 0 { 0.0 } else { agree as f64 / longer as f64 };
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}
