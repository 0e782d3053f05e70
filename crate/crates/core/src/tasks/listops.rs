//! Nested prefix-operator arithmetic over digits 0-9. Tokens are
//! whitespace-separated; an operator opens with a single token like `[MAX`
//! and closes with `]`.

use crate::error::TaskError;
use crate::tensor::RngStream;

pub const OPS: [&str; 4] = ["[MAX", "[MIN", "[MED", "[SM"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Max,
    Min,
    Med,
    Sm,
}

impl OpKind {
    fn token(self) -> &'static str {
        OPS[self as usize]
    }

    fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "[MAX" => OpKind::Max,
            "[MIN" => OpKind::Min,
            "[MED" => OpKind::Med,
            "[SM" => OpKind::Sm,
            _ => return None,
        })
    }

    fn apply(self, args: &[u8]) -> u8 {
        match self {
            OpKind::Max => *args.iter().max().unwrap(),
            OpKind::Min => *args.iter().min().unwrap(),
            OpKind::Med => {
                let mut sorted = args.to_vec();
                sorted.sort_unstable();
                // ties on even arity resolve to the lower middle element
                sorted[(sorted.len() - 1) / 2]
            }
            OpKind::Sm => (args.iter().map(|&d| d as u32).sum::<u32>() % 10) as u8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ListOpsSample {
    pub tokens: Vec<String>,
    pub label: u8,
    pub depth: usize,
    pub max_arity: usize,
}

/// Recursive evaluation of a token stream. Malformed input reports the
/// offending token position.
pub fn eval_listops<S: AsRef<str>>(tokens: &[S]) -> Result<u8, TaskError> {
    let (value, next) = parse_expr(tokens, 0)?;
    if next != tokens.len() {
        return Err(TaskError::Parse {
            position: next,
            message: format!("trailing token `{}`", tokens[next].as_ref()),
        });
    }
    Ok(value)
}

fn parse_expr<S: AsRef<str>>(tokens: &[S], pos: usize) -> Result<(u8, usize), TaskError> {
    let tok = tokens
        .get(pos)
        .map(|t| t.as_ref())
        .ok_or_else(|| TaskError::Parse {
            position: pos,
            message: "unexpected end of expression".into(),
        })?;
    if let Some(op) = OpKind::from_token(tok) {
        let mut args = Vec::new();
        let mut cur = pos + 1;
        loop {
            let next_tok = tokens
                .get(cur)
                .map(|t| t.as_ref())
                .ok_or_else(|| TaskError::Parse {
                    position: cur,
                    message: "unclosed operator".into(),
                })?;
            if next_tok == "]" {
                if args.is_empty() {
                    return Err(TaskError::Parse {
                        position: cur,
                        message: "operator with no arguments".into(),
                    });
                }
                return Ok((op.apply(&args), cur + 1));
            }
            let (v, after) = parse_expr(tokens, cur)?;
            args.push(v);
            cur = after;
        }
    }
    match tok {
        d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => {
            Ok((d.as_bytes()[0] - b'0', pos + 1))
        }
        other => Err(TaskError::Parse {
            position: pos,
            message: format!("unexpected token `{other}`"),
        }),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ListOpsBounds {
    pub min_len: usize,
    pub max_len: usize,
    pub max_depth: usize,
    pub max_args: usize,
}

impl ListOpsBounds {
    fn validate(&self) -> Result<(), TaskError> {
        if self.max_depth < 1 || self.max_args < 1 {
            return Err(TaskError::Generation(
                "max_depth and max_args must be >= 1".into(),
            ));
        }
        if self.max_len < 3 {
            return Err(TaskError::Generation(format!(
                "max_len {} cannot fit one operator (needs 3 tokens)",
                self.max_len
            )));
        }
        if self.min_len > self.max_len {
            return Err(TaskError::Generation(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

enum Node {
    Digit(u8),
    Op(OpKind, Vec<Node>),
}

impl Node {
    fn token_len(&self) -> usize {
        match self {
            Node::Digit(_) => 1,
            Node::Op(_, args) => 2 + args.iter().map(Node::token_len).sum::<usize>(),
        }
    }

    fn write(&self, out: &mut Vec<String>) {
        match self {
            Node::Digit(d) => out.push(d.to_string()),
            Node::Op(op, args) => {
                out.push(op.token().to_string());
                for a in args {
                    a.write(out);
                }
                out.push("]".to_string());
            }
        }
    }

    fn depth(&self) -> usize {
        match self {
            Node::Digit(_) => 0,
            Node::Op(_, args) => 1 + args.iter().map(Node::depth).max().unwrap_or(0),
        }
    }

    fn max_arity(&self) -> usize {
        match self {
            Node::Digit(_) => 0,
            Node::Op(_, args) => args
                .len()
                .max(args.iter().map(Node::max_arity).max().unwrap_or(0)),
        }
    }

    /// Digit leaves that sit above `max_depth` operator nesting, counted in
    /// document order. Expanding the k-th one turns it into a fresh operator.
    fn expandable(&self, depth: usize, max_depth: usize, out: &mut Vec<usize>, counter: &mut usize) {
        match self {
            Node::Digit(_) => {
                if depth < max_depth {
                    out.push(*counter);
                }
                *counter += 1;
            }
            Node::Op(_, args) => {
                for a in args {
                    a.expandable(depth + 1, max_depth, out, counter);
                }
            }
        }
    }

}

fn expand_at(node: &mut Node, target: usize, counter: &mut usize, rng: &mut RngStream, arity: usize) -> bool {
    match node {
        Node::Digit(_) => {
            let here = *counter;
            *counter += 1;
            if here == target {
                let op = OpKind::from_token(OPS[rng.below(4)]).unwrap();
                let args = (0..arity).map(|_| Node::Digit(rng.below(10) as u8)).collect();
                *node = Node::Op(op, args);
                true
            } else {
                false
            }
        }
        Node::Op(_, args) => {
            for a in args {
                if expand_at(a, target, counter, rng, arity) {
                    return true;
                }
            }
            false
        }
    }
}

/// Draw one expression satisfying all three bounds. The tree grows by
/// expanding digit leaves until the token count reaches `min_len`, which
/// always lands inside `[min_len, max_len]` because the smallest expansion
/// adds two tokens and the budget is checked before each one.
pub fn gen_listops(bounds: &ListOpsBounds, rng: &mut RngStream) -> Result<ListOpsSample, TaskError> {
    bounds.validate()?;
    'attempt: for _ in 0..256 {
        let root_arity_cap = bounds.max_args.min(bounds.max_len.saturating_sub(2));
        if root_arity_cap < 1 {
            return Err(TaskError::Generation("bounds leave no room for arguments".into()));
        }
        let arity = 1 + rng.below(root_arity_cap);
        let op = OpKind::from_token(OPS[rng.below(4)]).unwrap();
        let args = (0..arity).map(|_| Node::Digit(rng.below(10) as u8)).collect();
        let mut root = Node::Op(op, args);

        let mut len = root.token_len();
        while len < bounds.min_len {
            let mut candidates = Vec::new();
            let mut counter = 0;
            root.expandable(1, bounds.max_depth, &mut candidates, &mut counter);
            let budget = bounds.max_len.saturating_sub(len + 1);
            if candidates.is_empty() || budget < 1 {
                continue 'attempt;
            }
            let arity = 1 + rng.below(bounds.max_args.min(budget));
            let target = candidates[rng.below(candidates.len())];
            let mut counter = 0;
            expand_at(&mut root, target, &mut counter, rng, arity);
            len = root.token_len();
        }

        let mut tokens = Vec::with_capacity(len);
        root.write(&mut tokens);
        debug_assert_eq!(tokens.len(), len);
        let label = eval_listops(&tokens)?;
        return Ok(ListOpsSample {
            tokens,
            label,
            depth: root.depth(),
            max_arity: root.max_arity(),
        });
    }
    Err(TaskError::Generation(format!(
        "could not satisfy bounds min_len={} max_len={} max_depth={} max_args={}",
        bounds.min_len, bounds.max_len, bounds.max_depth, bounds.max_args
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn eval_basics() {
        assert_eq!(eval_listops(&toks("[MIN 9 7 ]")).unwrap(), 7);
        assert_eq!(eval_listops(&toks("[MAX 3 ]")).unwrap(), 3);
        // the worked nested example: MIN = 7, SM = (4+5+7) mod 10 = 6,
        // MAX(1,3,6,4) = 6
        assert_eq!(
            eval_listops(&toks("[MAX 1 3 [SM 4 5 [MIN 9 7 ] ] 4 ]")).unwrap(),
            6
        );
    }

    #[test]
    fn med_uses_lower_middle() {
        assert_eq!(eval_listops(&toks("[MED 1 2 3 4 ]")).unwrap(), 2);
        assert_eq!(eval_listops(&toks("[MED 5 1 9 ]")).unwrap(), 5);
    }

    #[test]
    fn sm_is_modular() {
        assert_eq!(eval_listops(&toks("[SM 9 9 9 ]")).unwrap(), 7);
    }

    #[test]
    fn parse_errors_carry_positions() {
        match eval_listops(&toks("[MAX 1")) {
            Err(TaskError::Parse { position, .. }) => assert_eq!(position, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match eval_listops(&toks("[MAX x ]")) {
            Err(TaskError::Parse { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match eval_listops(&toks("7 7")) {
            Err(TaskError::Parse { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn generated_samples_respect_bounds() {
        let bounds = ListOpsBounds { min_len: 3, max_len: 30, max_depth: 3, max_args: 3 };
        let mut rng = RngStream::new(5);
        for _ in 0..500 {
            let s = gen_listops(&bounds, &mut rng).unwrap();
            assert!(s.tokens.len() >= 3 && s.tokens.len() <= 30, "len {}", s.tokens.len());
            assert!(s.depth >= 1 && s.depth <= 3, "depth {}", s.depth);
            assert!(s.max_arity >= 1 && s.max_arity <= 3);
            assert_eq!(eval_listops(&s.tokens).unwrap(), s.label);
        }
    }

    #[test]
    fn generated_length_window_is_hit() {
        let bounds = ListOpsBounds { min_len: 40, max_len: 60, max_depth: 8, max_args: 5 };
        let mut rng = RngStream::new(6);
        for _ in 0..100 {
            let s = gen_listops(&bounds, &mut rng).unwrap();
            assert!(s.tokens.len() >= 40 && s.tokens.len() <= 60, "len {}", s.tokens.len());
        }
    }

    #[test]
    fn minimal_expression_form() {
        let bounds = ListOpsBounds { min_len: 3, max_len: 3, max_depth: 1, max_args: 1 };
        let mut rng = RngStream::new(7);
        let s = gen_listops(&bounds, &mut rng).unwrap();
        assert_eq!(s.tokens.len(), 3);
        assert!(OPS.contains(&s.tokens[0].as_str()));
        assert_eq!(s.tokens[2], "]");
    }

    #[test]
    fn infeasible_bounds_are_rejected() {
        let bounds = ListOpsBounds { min_len: 1, max_len: 2, max_depth: 1, max_args: 1 };
        assert!(gen_listops(&bounds, &mut RngStream::new(1)).is_err());
    }
}
