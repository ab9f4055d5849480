//! Synthetic program-evaluation corpus: tiny stack-machine programs rendered
//! into two surface languages that share digit tokens but use disjoint
//! keyword and delimiter tokens. The task is result prediction: the prompt is
//! a rendered program followed by a query token, the target is the decimal
//! result followed by end-of-sequence.
//!
//! Programs are generated independently of any surface language, so the same
//! seed yields semantically identical corpora in both languages.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};

/// Token id layout. Digits first so both languages share them.
pub const DIGIT_BASE: usize = 0; // ids 0..=9 are the digits "0".."9"
pub const MINUS: usize = 10;
pub const QUERY: usize = 11;
pub const EOS: usize = 12;
const LANG_A_BASE: usize = 13;
const LANG_B_BASE: usize = 21;
pub const VOCAB_SIZE: usize = 29;

/// Human-readable token strings, indexed by token id.
pub const VOCAB: [&str; VOCAB_SIZE] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "-", "?", "<eos>", "push", "add", "sub",
    "mul", "dup", ";", "{", "}", "PUSH", "ADD", "SUB", "MUL", "DUP", "$", "[", "]",
];

/// FNV-1a digest over the vocabulary strings, written into dataset exports so
/// a reader can detect token-table drift.
pub fn vocab_hash() -> u64 {
    let mut joined = String::new();
    for s in VOCAB {
        joined.push_str(s);
        joined.push('\u{1f}');
    }
    fnv1a(joined.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Push a small literal (0..=9).
    Push(u8),
    /// Pop b, pop a, push a + b.
    Add,
    /// Pop b, pop a, push a - b.
    Sub,
    /// Pop b, pop a, push a * b.
    Mul,
    /// Duplicate the top of the stack.
    Dup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramSpec {
    pub ops: Vec<Op>,
}

impl ProgramSpec {
    /// Run the program on an empty stack and return the final top of stack.
    pub fn evaluate(&self) -> Result<i64> {
        let mut stack: Vec<i64> = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            match *op {
                Op::Push(lit) => {
                    if lit > 9 {
                        return Err(Error::InvalidArgument(format!(
                            "literal {lit} out of range at op {i}"
                        )));
                    }
                    stack.push(lit as i64);
                }
                Op::Add | Op::Sub | Op::Mul => {
                    let b = stack.pop().ok_or_else(|| underflow(i))?;
                    let a = stack.pop().ok_or_else(|| underflow(i))?;
                    stack.push(match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        _ => a * b,
                    });
                }
                Op::Dup => {
                    let &top = stack.last().ok_or_else(|| underflow(i))?;
                    stack.push(top);
                }
            }
        }
        stack
            .last()
            .copied()
            .ok_or_else(|| Error::InvalidArgument("program leaves an empty stack".into()))
    }
}

fn underflow(op_index: usize) -> Error {
    Error::InvalidArgument(format!("stack underflow at op {op_index}"))
}

/// Generate a stack-valid program with 1..=max_ops operations whose result
/// fits in i32 range (regenerates on overflow, which is rare at this scale).
pub fn gen_program(rng: &mut Rng, max_ops: usize) -> Result<ProgramSpec> {
    if max_ops == 0 {
        return Err(Error::InvalidArgument("max_ops must be >= 1".into()));
    }
    loop {
        let n_ops = 1 + rng.next_below(max_ops as u64) as usize;
        let mut ops = Vec::with_capacity(n_ops);
        let mut depth = 0usize;
        for _ in 0..n_ops {
            // Choose among the ops legal at the current stack depth.
            let op = match depth {
                0 => Op::Push(rng.next_below(10) as u8),
                1 => match rng.next_below(3) {
                    0 => Op::Push(rng.next_below(10) as u8),
                    1 => Op::Dup,
                    _ => Op::Push(rng.next_below(10) as u8),
                },
                _ => match rng.next_below(6) {
                    0 => Op::Push(rng.next_below(10) as u8),
                    1 => Op::Dup,
                    2 => Op::Add,
                    3 => Op::Sub,
                    4 => Op::Mul,
                    _ => Op::Add,
                },
            };
            depth = match op {
                Op::Push(_) | Op::Dup => depth + 1,
                _ => depth - 1,
            };
            ops.push(op);
        }
        let program = ProgramSpec { ops };
        let result = program.evaluate()?;
        if result >= i32::MIN as i64 && result <= i32::MAX as i64 {
            return Ok(program);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LanguageId {
    A,
    B,
}

impl LanguageId {
    pub fn name(self) -> &'static str {
        match self {
            LanguageId::A => "lang_a",
            LanguageId::B => "lang_b",
        }
    }

    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "lang_a" => Ok(LanguageId::A),
            "lang_b" => Ok(LanguageId::B),
            other => Err(Error::InvalidArgument(format!("unknown language {other:?}"))),
        }
    }

    /// First token id of this language's private block
    /// (push, add, sub, mul, dup, separator, open, close — in that order).
    fn base(self) -> usize {
        match self {
            LanguageId::A => LANG_A_BASE,
            LanguageId::B => LANG_B_BASE,
        }
    }

    fn tok_push(self) -> usize {
        self.base()
    }
    fn tok_add(self) -> usize {
        self.base() + 1
    }
    fn tok_sub(self) -> usize {
        self.base() + 2
    }
    fn tok_mul(self) -> usize {
        self.base() + 3
    }
    fn tok_dup(self) -> usize {
        self.base() + 4
    }
    fn tok_sep(self) -> usize {
        self.base() + 5
    }
    fn tok_open(self) -> usize {
        self.base() + 6
    }
    fn tok_close(self) -> usize {
        self.base() + 7
    }

    /// The eight token ids private to this language.
    pub fn keyword_tokens(self) -> Vec<usize> {
        (self.base()..self.base() + 8).collect()
    }
}

/// Render a program into a token sequence:
/// open { keyword [digit] separator }* close query.
pub fn render_program(program: &ProgramSpec, lang: LanguageId) -> Vec<usize> {
    let mut out = vec![lang.tok_open()];
    for op in &program.ops {
        match *op {
            Op::Push(lit) => {
                out.push(lang.tok_push());
                out.push(DIGIT_BASE + lit as usize);
            }
            Op::Add => out.push(lang.tok_add()),
            Op::Sub => out.push(lang.tok_sub()),
            Op::Mul => out.push(lang.tok_mul()),
            Op::Dup => out.push(lang.tok_dup()),
        }
        out.push(lang.tok_sep());
    }
    out.push(lang.tok_close());
    out.push(QUERY);
    out
}

/// Render a signed integer as minus-sign and digit tokens plus end-of-sequence.
pub fn render_value(value: i64) -> Vec<usize> {
    let mut out = Vec::new();
    if value < 0 {
        out.push(MINUS);
    }
    for ch in value.unsigned_abs().to_string().bytes() {
        out.push(DIGIT_BASE + (ch - b'0') as usize);
    }
    out.push(EOS);
    out
}

/// Inverse of [`render_program`]; rejects malformed sequences.
pub fn parse_program(tokens: &[usize], lang: LanguageId) -> Result<ProgramSpec> {
    let malformed = |msg: &str| Error::Format(format!("malformed program: {msg}"));
    let mut it = tokens.iter().copied().peekable();
    if it.next() != Some(lang.tok_open()) {
        return Err(malformed("missing opening delimiter"));
    }
    let mut ops = Vec::new();
    loop {
        let tok = it.next().ok_or_else(|| malformed("unterminated body"))?;
        if tok == lang.tok_close() {
            break;
        }
        let op = if tok == lang.tok_push() {
            let d = it.next().ok_or_else(|| malformed("push without literal"))?;
            if !(DIGIT_BASE..DIGIT_BASE + 10).contains(&d) {
                return Err(malformed("push literal is not a digit"));
            }
            Op::Push((d - DIGIT_BASE) as u8)
        } else if tok == lang.tok_add() {
            Op::Add
        } else if tok == lang.tok_sub() {
            Op::Sub
        } else if tok == lang.tok_mul() {
            Op::Mul
        } else if tok == lang.tok_dup() {
            Op::Dup
        } else {
            return Err(malformed("unexpected token in body"));
        };
        if it.next() != Some(lang.tok_sep()) {
            return Err(malformed("missing separator"));
        }
        ops.push(op);
    }
    if it.next() != Some(QUERY) {
        return Err(malformed("missing query token"));
    }
    if it.next().is_some() {
        return Err(malformed("trailing tokens"));
    }
    Ok(ProgramSpec { ops })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub program_id: u64,
    pub prompt: Vec<usize>,
    /// Result tokens including the trailing end-of-sequence token.
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub language: LanguageId,
    pub seed: u64,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Build a corpus of `n_programs` programs rendered in `language`.
///
/// Program content depends only on `seed` (stream label "programs"), not on
/// the language, so corpora built for both languages from one seed are
/// semantically aligned. The split is by program id: ids ending in 9 go to
/// test (a fixed 90/10 split).
pub fn build_dataset(
    seed: u64,
    n_programs: usize,
    max_ops: usize,
    language: LanguageId,
) -> Result<Dataset> {
    if n_programs == 0 {
        return Err(Error::InvalidArgument("n_programs must be >= 1".into()));
    }
    let mut rng = Rng::derive(seed, "programs");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for program_id in 0..n_programs as u64 {
        let program = gen_program(&mut rng, max_ops)?;
        let result = program.evaluate()?;
        let example = Example {
            program_id,
            prompt: render_program(&program, language),
            target: render_value(result),
        };
        if program_id % 10 == 9 {
            test.push(example);
        } else {
            train.push(example);
        }
    }
    Ok(Dataset {
        language,
        seed,
        train,
        test,
    })
}

/// Serialize one split as text: '#'-prefixed header lines carrying the
/// vocabulary hash, seed, and language, then one example per line with the
/// prompt and target token-id lists separated by a tab.
pub fn export_split(dataset: &Dataset, split: &str) -> Result<String> {
    let examples = match split {
        "train" => &dataset.train,
        "test" => &dataset.test,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train or test"
            )))
        }
    };
    let mut out = String::new();
    writeln!(out, "# vocab_hash={:016x}", vocab_hash()).unwrap();
    writeln!(out, "# seed={}", dataset.seed).unwrap();
    writeln!(out, "# language={}", dataset.language.name()).unwrap();
    writeln!(out, "# split={split}").unwrap();
    for ex in examples {
        let prompt: Vec<String> = ex.prompt.iter().map(|t| t.to_string()).collect();
        let target: Vec<String> = ex.target.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{}\t{}", prompt.join(" "), target.join(" ")).unwrap();
    }
    Ok(out)
}

/// Exact-match accuracy of a single decode per example. The decoder receives
/// the prompt and must return the target tokens without the trailing
/// end-of-sequence token.
pub fn pass_at_1<F>(examples: &[Example], mut decode: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<Vec<usize>>,
{
    if examples.is_empty() {
        return Err(Error::InvalidArgument("pass_at_1: no examples".into()));
    }
    let mut correct = 0usize;
    for ex in examples {
        let generated = decode(&ex.prompt)?;
        let want = &ex.target[..ex.target.len() - 1]; // strip eos
        if generated == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Unbiased pass@k estimate from n samples of which c are correct:
/// 1 - prod_{j=0}^{k-1} (n - c - j) / (n - j).
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::InvalidArgument(format!(
            "pass_at_k: c={c} exceeds n={n}"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "pass_at_k: k={k} must be in 1..={n}"
        )));
    }
    if n - c < k {
        return Ok(1.0); // every size-k draw contains a correct sample
    }
    let mut prod = 1.0;
    for j in 0..k {
        prod *= (n - c - j) as f64 / (n - j) as f64;
    }
    Ok(1.0 - prod)
}
