//! Flip-flop language modeling: a write/read/ignore instruction stream where
//! every read must echo the most recently written bit.

use crate::error::TaskError;
use crate::tensor::RngStream;

#[derive(Debug, Clone)]
pub struct FlipFlopSample {
    pub tokens: Vec<String>,
    /// Positions of the `r` instruction tokens; the bit to predict follows
    /// at position + 1.
    pub read_positions: Vec<usize>,
    pub read_targets: Vec<u8>,
    /// The last read bit (the quantity scored by the headline metric).
    pub label: u8,
}

/// Linear scan recovering read positions and their last-write targets;
/// doubles as the oracle that re-checks generated sequences.
pub fn flipflop_scan<S: AsRef<str>>(tokens: &[S]) -> Result<(Vec<usize>, Vec<u8>), TaskError> {
    if tokens.len() % 2 != 0 || tokens.is_empty() {
        return Err(TaskError::Generation(format!(
            "flip-flop sequences are instruction/bit pairs; got {} tokens",
            tokens.len()
        )));
    }
    let mut last_write: Option<u8> = None;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for pair in 0..tokens.len() / 2 {
        let instr = tokens[2 * pair].as_ref();
        let bit_tok = tokens[2 * pair + 1].as_ref();
        let bit = match bit_tok {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(TaskError::Parse {
                    position: 2 * pair + 1,
                    message: format!("expected a bit, got `{other}`"),
                })
            }
        };
        match instr {
            "w" => last_write = Some(bit),
            "i" => {}
            "r" => {
                let expect = last_write.ok_or_else(|| TaskError::Parse {
                    position: 2 * pair,
                    message: "read before any write".into(),
                })?;
                if bit != expect {
                    return Err(TaskError::Parse {
                        position: 2 * pair + 1,
                        message: format!("read bit {bit} but last write was {expect}"),
                    });
                }
                positions.push(2 * pair);
                targets.push(bit);
            }
            other => {
                return Err(TaskError::Parse {
                    position: 2 * pair,
                    message: format!("unknown instruction `{other}`"),
                })
            }
        }
    }
    Ok((positions, targets))
}

/// Generate one sequence of `length` tokens. The first instruction is forced
/// to `w` so every read has a defined target; the rest draw `i` with
/// probability `p_i` and `w`/`r` with `(1 - p_i)/2` each. Sequences without
/// any read are redrawn so the headline last-read metric is defined.
pub fn gen_flipflop(length: usize, p_i: f64, rng: &mut RngStream) -> Result<FlipFlopSample, TaskError> {
    if length % 2 != 0 || length < 2 {
        return Err(TaskError::Generation(format!(
            "length must be even and >= 2, got {length}"
        )));
    }
    if !(0.0..=1.0).contains(&p_i) {
        return Err(TaskError::Generation(format!("p_i must be in [0,1], got {p_i}")));
    }
    if p_i >= 1.0 && length > 2 {
        return Err(TaskError::Generation(
            "p_i = 1 leaves no read or write instructions after the forced first write".into(),
        ));
    }
    let pairs = length / 2;
    'attempt: for _ in 0..4096 {
        let mut tokens = Vec::with_capacity(length);
        let mut last_write = 0u8;
        let mut reads = Vec::new();
        let mut targets = Vec::new();
        for pair in 0..pairs {
            let instr = if pair == 0 {
                "w"
            } else {
                let u = rng.next_f64();
                if u < p_i {
                    "i"
                } else if u < p_i + (1.0 - p_i) / 2.0 {
                    "w"
                } else {
                    "r"
                }
            };
            match instr {
                "w" => {
                    let bit = rng.below(2) as u8;
                    last_write = bit;
                    tokens.push("w".into());
                    tokens.push(bit.to_string());
                }
                "i" => {
                    let bit = rng.below(2) as u8;
                    tokens.push("i".into());
                    tokens.push(bit.to_string());
                }
                _ => {
                    reads.push(2 * pair);
                    targets.push(last_write);
                    tokens.push("r".into());
                    tokens.push(last_write.to_string());
                }
            }
        }
        if reads.is_empty() {
            continue 'attempt;
        }
        let label = *targets.last().expect("non-empty");
        debug_assert!({
            let (p, t) = flipflop_scan(&tokens).expect("generated sequence is valid");
            p == reads && t == targets
        });
        return Ok(FlipFlopSample { tokens, read_positions: reads, read_targets: targets, label });
    }
    Err(TaskError::Generation(format!(
        "no read instruction drawn in 4096 attempts (length {length}, p_i {p_i})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_write_then_read() {
        let toks: Vec<&str> = "w 0 r 0".split_whitespace().collect();
        let (pos, tgt) = flipflop_scan(&toks).unwrap();
        assert_eq!(pos, vec![2]);
        assert_eq!(tgt, vec![0]);
    }

    #[test]
    fn paper_example_sequence() {
        // "w 0 i 1 w 1 r 1": the read echoes the second write
        let toks: Vec<&str> = "w 0 i 1 w 1 r 1".split_whitespace().collect();
        let (pos, tgt) = flipflop_scan(&toks).unwrap();
        assert_eq!(pos, vec![6]);
        assert_eq!(tgt, vec![1]);
    }

    #[test]
    fn scan_rejects_wrong_read_bit() {
        let toks: Vec<&str> = "w 0 r 1".split_whitespace().collect();
        assert!(flipflop_scan(&toks).is_err());
    }

    #[test]
    fn generated_sequences_satisfy_last_write_invariant() {
        let mut rng = RngStream::new(12);
        for _ in 0..200 {
            let s = gen_flipflop(64, 0.8, &mut rng).unwrap();
            assert_eq!(s.tokens[0], "w");
            assert_eq!(s.tokens.len(), 64);
            let (pos, tgt) = flipflop_scan(&s.tokens).unwrap();
            assert_eq!(pos, s.read_positions);
            assert_eq!(tgt, s.read_targets);
            assert_eq!(s.label, *s.read_targets.last().unwrap());
        }
    }

    #[test]
    fn rejects_degenerate_parameters() {
        let mut rng = RngStream::new(1);
        assert!(gen_flipflop(7, 0.5, &mut rng).is_err());
        assert!(gen_flipflop(64, 1.0, &mut rng).is_err());
        assert!(gen_flipflop(64, -0.1, &mut rng).is_err());
    }

    #[test]
    fn instruction_frequencies_converge() {
        // chi-squared style sanity: counts over 10^6 non-forced draws stay
        // within +-0.01 of (p_i, (1-p_i)/2, (1-p_i)/2)
        let p_i = 0.6;
        let mut rng = RngStream::new(99);
        let mut counts = [0usize; 3]; // i, w, r
        let mut total = 0usize;
        while total < 1_000_000 {
            let s = gen_flipflop(256, p_i, &mut rng).unwrap();
            for pair in 1..s.tokens.len() / 2 {
                match s.tokens[2 * pair].as_str() {
                    "i" => counts[0] += 1,
                    "w" => counts[1] += 1,
                    "r" => counts[2] += 1,
                    _ => unreachable!(),
                }
                total += 1;
            }
        }
        let f = |c: usize| c as f64 / total as f64;
        assert!((f(counts[0]) - p_i).abs() < 0.01, "i freq {}", f(counts[0]));
        assert!((f(counts[1]) - (1.0 - p_i) / 2.0).abs() < 0.01);
        assert!((f(counts[2]) - (1.0 - p_i) / 2.0).abs() < 0.01);
    }
}
