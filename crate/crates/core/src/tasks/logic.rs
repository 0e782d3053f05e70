//! Propositional logical inference over six variables with `not`/`and`/`or`
//! in the bracketed surface syntax `( x ( and y ) )` / `( not x )`. The
//! relation label is derived by truth-table comparison over all 2^6
//! assignments.

use crate::error::TaskError;
use crate::tensor::RngStream;

pub const VAR_COUNT: usize = 6;
const VARS: [&str; VAR_COUNT] = ["a", "b", "c", "d", "e", "f"];

/// All 64 assignments as bitmasks: bit k of `VAR_PATTERNS[v]` is the value
/// of variable v in assignment k.
fn var_pattern(v: usize) -> u64 {
    let mut m = 0u64;
    for k in 0..64u64 {
        if (k >> v) & 1 == 1 {
            m |= 1 << k;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Var(u8),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn op_count(&self) -> usize {
        match self {
            Formula::Var(_) => 0,
            Formula::Not(x) => 1 + x.op_count(),
            Formula::And(a, b) | Formula::Or(a, b) => 1 + a.op_count() + b.op_count(),
        }
    }

    /// Truth vector over all 64 assignments.
    pub fn truth_table(&self) -> u64 {
        match self {
            Formula::Var(v) => var_pattern(*v as usize),
            Formula::Not(x) => !x.truth_table(),
            Formula::And(a, b) => a.truth_table() & b.truth_table(),
            Formula::Or(a, b) => a.truth_table() | b.truth_table(),
        }
    }

    pub fn to_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<String>) {
        match self {
            Formula::Var(v) => out.push(VARS[*v as usize].to_string()),
            Formula::Not(x) => {
                out.push("(".into());
                out.push("not".into());
                x.write(out);
                out.push(")".into());
            }
            Formula::And(a, b) | Formula::Or(a, b) => {
                let op = if matches!(self, Formula::And(..)) { "and" } else { "or" };
                out.push("(".into());
                a.write(out);
                out.push("(".into());
                out.push(op.into());
                b.write(out);
                out.push(")".into());
                out.push(")".into());
            }
        }
    }
}

/// Parse the bracketed surface syntax back into a formula.
pub fn parse_formula<S: AsRef<str>>(tokens: &[S]) -> Result<Formula, TaskError> {
    let (f, next) = parse_expr(tokens, 0)?;
    if next != tokens.len() {
        return Err(TaskError::Parse {
            position: next,
            message: format!("trailing token `{}`", tokens[next].as_ref()),
        });
    }
    Ok(f)
}

fn parse_expr<S: AsRef<str>>(tokens: &[S], pos: usize) -> Result<(Formula, usize), TaskError> {
    let tok = tok_at(tokens, pos)?;
    if let Some(v) = VARS.iter().position(|&x| x == tok) {
        return Ok((Formula::Var(v as u8), pos + 1));
    }
    if tok != "(" {
        return Err(TaskError::Parse {
            position: pos,
            message: format!("expected variable or `(`, got `{tok}`"),
        });
    }
    if tok_at(tokens, pos + 1)? == "not" {
        let (inner, next) = parse_expr(tokens, pos + 2)?;
        expect(tokens, next, ")")?;
        return Ok((Formula::Not(Box::new(inner)), next + 1));
    }
    let (lhs, after_lhs) = parse_expr(tokens, pos + 1)?;
    expect(tokens, after_lhs, "(")?;
    let op = tok_at(tokens, after_lhs + 1)?;
    let (rhs, after_rhs) = parse_expr(tokens, after_lhs + 2)?;
    expect(tokens, after_rhs, ")")?;
    expect(tokens, after_rhs + 1, ")")?;
    let node = match op {
        "and" => Formula::And(Box::new(lhs), Box::new(rhs)),
        "or" => Formula::Or(Box::new(lhs), Box::new(rhs)),
        other => {
            return Err(TaskError::Parse {
                position: after_lhs + 1,
                message: format!("expected `and` or `or`, got `{other}`"),
            })
        }
    };
    Ok((node, after_rhs + 2))
}

fn tok_at<'a, S: AsRef<str>>(tokens: &'a [S], pos: usize) -> Result<&'a str, TaskError> {
    tokens.get(pos).map(|t| t.as_ref()).ok_or_else(|| TaskError::Parse {
        position: pos,
        message: "unexpected end of formula".into(),
    })
}

fn expect<S: AsRef<str>>(tokens: &[S], pos: usize, want: &str) -> Result<(), TaskError> {
    let got = tok_at(tokens, pos)?;
    if got != want {
        return Err(TaskError::Parse {
            position: pos,
            message: format!("expected `{want}`, got `{got}`"),
        });
    }
    Ok(())
}

/// The seven-relation scheme over truth-vector pairs. Exhaustive and
/// mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Equivalence,
    ForwardEntailment,
    ReverseEntailment,
    Negation,
    Alternation,
    Cover,
    Independence,
}

pub const RELATIONS: [Relation; 7] = [
    Relation::Equivalence,
    Relation::ForwardEntailment,
    Relation::ReverseEntailment,
    Relation::Negation,
    Relation::Alternation,
    Relation::Cover,
    Relation::Independence,
];

impl Relation {
    pub fn name(&self) -> &'static str {
        match self {
            Relation::Equivalence => "equivalence",
            Relation::ForwardEntailment => "forward_entailment",
            Relation::ReverseEntailment => "reverse_entailment",
            Relation::Negation => "negation",
            Relation::Alternation => "alternation",
            Relation::Cover => "cover",
            Relation::Independence => "independence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        RELATIONS.iter().copied().find(|r| r.name() == s)
    }

    pub fn index(&self) -> usize {
        RELATIONS.iter().position(|r| r == self).unwrap()
    }
}

/// Classify the relation between premise and hypothesis truth vectors.
pub fn relation_of(premise: u64, hypothesis: u64) -> Relation {
    let disjoint = premise & hypothesis == 0;
    let covers = premise | hypothesis == u64::MAX;
    if premise == hypothesis {
        Relation::Equivalence
    } else if premise & hypothesis == premise {
        // premise strictly entails hypothesis
        Relation::ForwardEntailment
    } else if premise & hypothesis == hypothesis {
        Relation::ReverseEntailment
    } else if disjoint && covers {
        Relation::Negation
    } else if disjoint {
        Relation::Alternation
    } else if covers {
        Relation::Cover
    } else {
        Relation::Independence
    }
}

#[derive(Debug, Clone)]
pub struct LogicSample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub relation: Relation,
    pub ops_premise: usize,
    pub ops_hypothesis: usize,
}

fn gen_formula(ops: usize, rng: &mut RngStream) -> Formula {
    if ops == 0 {
        return Formula::Var(rng.below(VAR_COUNT) as u8);
    }
    match rng.below(3) {
        0 => Formula::Not(Box::new(gen_formula(ops - 1, rng))),
        1 => {
            let left = rng.below(ops);
            Formula::And(
                Box::new(gen_formula(left, rng)),
                Box::new(gen_formula(ops - 1 - left, rng)),
            )
        }
        _ => {
            let left = rng.below(ops);
            Formula::Or(
                Box::new(gen_formula(left, rng)),
                Box::new(gen_formula(ops - 1 - left, rng)),
            )
        }
    }
}

/// Generate a premise/hypothesis pair whose larger operator count lies in
/// `[ops_min, ops_max]`; one side is drawn in that window, the other
/// anywhere below the ceiling.
pub fn gen_logic(ops_min: usize, ops_max: usize, rng: &mut RngStream) -> Result<LogicSample, TaskError> {
    if ops_min > ops_max {
        return Err(TaskError::Generation(format!(
            "ops_min {ops_min} exceeds ops_max {ops_max}"
        )));
    }
    let anchored = ops_min + rng.below(ops_max - ops_min + 1);
    let other = rng.below(ops_max + 1);
    let (ops_p, ops_h) = if rng.bool_with(0.5) { (anchored, other) } else { (other, anchored) };
    let premise = gen_formula(ops_p, rng);
    let hypothesis = gen_formula(ops_h, rng);
    let relation = relation_of(premise.truth_table(), hypothesis.truth_table());
    Ok(LogicSample {
        premise: premise.to_tokens(),
        hypothesis: hypothesis.to_tokens(),
        relation,
        ops_premise: premise.op_count(),
        ops_hypothesis: hypothesis.op_count(),
    })
}
