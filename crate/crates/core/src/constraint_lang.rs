//! Synthetic instruction language.
//!
//! An instruction is an ordered list of atomic constraints over a response,
//! which is a string of "letter" tokens terminated by an end marker. Every
//! constraint kind is decidable in one linear scan and has an exact
//! complement through its polarity flag, so both evaluation and the
//! negate transform are exact.
//!
//! Token layout (see `docs/constraint_catalog.md`):
//!
//! ```text
//! 0 PAD | 1 BOS | 2 SEP | 3 EOI | 4 EOS | 5..=10 kind codes | 11 POS | 12 NEG
//! 13..=13+max_len number tokens | letters
//! ```

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const SEP: Token = 2;
pub const EOI: Token = 3;
pub const EOS: Token = 4;
const KIND_BASE: Token = 5;
const POS: Token = 11;
const NEG: Token = 12;
const NUMBER_BASE: Token = 13;

/// Largest letter alphabet supported by the packed solver state.
pub const MAX_LETTERS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LangError {
    #[error("parse error at token {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("invalid constraint parameter: {0}")]
    InvalidParam(String),
    #[error("instruction must contain at least one constraint")]
    EmptyInstruction,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("could not sample a satisfiable constraint set after {0} attempts")]
    SamplingBudget(usize),
}

/// Vocabulary of the constraint language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_letters: u32,
    /// Largest response length expressible by a number token.
    pub max_len: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { n_letters: 8, max_len: 12 }
    }
}

impl Vocab {
    pub fn new(n_letters: u32, max_len: u32) -> Result<Self, LangError> {
        if !(2..=MAX_LETTERS).contains(&n_letters) {
            return Err(LangError::InvalidVocab(format!(
                "n_letters must be in [2, {MAX_LETTERS}], got {n_letters}"
            )));
        }
        if max_len == 0 || max_len > 64 {
            return Err(LangError::InvalidVocab(format!("max_len must be in [1, 64], got {max_len}")));
        }
        Ok(Self { n_letters, max_len })
    }

    pub fn size(&self) -> usize {
        (self.letter_base() + self.n_letters) as usize
    }

    fn letter_base(&self) -> Token {
        NUMBER_BASE + self.max_len + 1
    }

    pub fn letter(&self, index: u32) -> Token {
        debug_assert!(index < self.n_letters);
        self.letter_base() + index
    }

    pub fn letters(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.n_letters).map(move |i| self.letter(i))
    }

    pub fn is_letter(&self, token: Token) -> bool {
        token >= self.letter_base() && token < self.letter_base() + self.n_letters
    }

    pub fn letter_index(&self, token: Token) -> Option<u32> {
        self.is_letter(token).then(|| token - self.letter_base())
    }

    pub fn number(&self, value: u32) -> Token {
        debug_assert!(value <= self.max_len);
        NUMBER_BASE + value
    }

    pub fn number_value(&self, token: Token) -> Option<u32> {
        (NUMBER_BASE..=NUMBER_BASE + self.max_len).contains(&token).then(|| token - NUMBER_BASE)
    }

    /// Surface form of a token, used by the vocabulary sidecar and text views.
    pub fn surface(&self, token: Token) -> String {
        match token {
            PAD => "<pad>".into(),
            BOS => "<ins>".into(),
            SEP => "<sep>".into(),
            EOI => "</ins>".into(),
            EOS => "<eos>".into(),
            t if (KIND_BASE..KIND_BASE + 6).contains(&t) => {
                ConstraintKind::ALL[(t - KIND_BASE) as usize].name().into()
            }
            POS => "+".into(),
            NEG => "-".into(),
            t => {
                if let Some(v) = self.number_value(t) {
                    format!("#{v}")
                } else if let Some(i) = self.letter_index(t) {
                    // a, b, c, ...
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("<unk:{t}>")
                }
            }
        }
    }

    /// Tab-separated `id<TAB>surface` lines.
    pub fn sidecar(&self) -> String {
        (0..self.size() as Token).map(|t| format!("{t}\t{}\n", self.surface(t))).collect()
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.surface(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    Contains,
    StartsWith,
    EndsWith,
    LengthBetween,
    CountExact,
    NoAdjacentRepeat,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 6] = [
        ConstraintKind::Contains,
        ConstraintKind::StartsWith,
        ConstraintKind::EndsWith,
        ConstraintKind::LengthBetween,
        ConstraintKind::CountExact,
        ConstraintKind::NoAdjacentRepeat,
    ];

    pub fn code(self) -> Token {
        KIND_BASE + Self::ALL.iter().position(|&k| k == self).unwrap() as Token
    }

    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::Contains => "contains",
            ConstraintKind::StartsWith => "starts_with",
            ConstraintKind::EndsWith => "ends_with",
            ConstraintKind::LengthBetween => "length_between",
            ConstraintKind::CountExact => "count_exact",
            ConstraintKind::NoAdjacentRepeat => "no_adjacent_repeat",
        }
    }

    fn arity(self) -> usize {
        match self {
            ConstraintKind::Contains | ConstraintKind::StartsWith | ConstraintKind::EndsWith => 1,
            ConstraintKind::LengthBetween | ConstraintKind::CountExact => 2,
            ConstraintKind::NoAdjacentRepeat => 0,
        }
    }
}

/// What a constraint asks of a response, before polarity is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Requirement {
    Contains(Token),
    StartsWith(Token),
    EndsWith(Token),
    LengthBetween { lo: u32, hi: u32 },
    CountExact { token: Token, k: u32 },
    NoAdjacentRepeat,
}

impl Requirement {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            Requirement::Contains(_) => ConstraintKind::Contains,
            Requirement::StartsWith(_) => ConstraintKind::StartsWith,
            Requirement::EndsWith(_) => ConstraintKind::EndsWith,
            Requirement::LengthBetween { .. } => ConstraintKind::LengthBetween,
            Requirement::CountExact { .. } => ConstraintKind::CountExact,
            Requirement::NoAdjacentRepeat => ConstraintKind::NoAdjacentRepeat,
        }
    }

    fn holds(&self, content: &[Token]) -> bool {
        match *self {
            Requirement::Contains(t) => content.contains(&t),
            Requirement::StartsWith(t) => content.first() == Some(&t),
            Requirement::EndsWith(t) => content.last() == Some(&t),
            Requirement::LengthBetween { lo, hi } => {
                let n = content.len() as u32;
                lo <= n && n <= hi
            }
            Requirement::CountExact { token, k } => {
                content.iter().filter(|&&t| t == token).count() as u32 == k
            }
            Requirement::NoAdjacentRepeat => content.windows(2).all(|w| w[0] != w[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicConstraint {
    pub requirement: Requirement,
    pub polarity: Polarity,
}

impl AtomicConstraint {
    pub fn positive(requirement: Requirement) -> Self {
        Self { requirement, polarity: Polarity::Positive }
    }

    pub fn negative(requirement: Requirement) -> Self {
        Self { requirement, polarity: Polarity::Negative }
    }

    pub fn kind(&self) -> ConstraintKind {
        self.requirement.kind()
    }

    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<(), LangError> {
        let letter = |t: Token| {
            if vocab.is_letter(t) {
                Ok(())
            } else {
                Err(LangError::InvalidParam(format!("token {t} is not a letter")))
            }
        };
        match self.requirement {
            Requirement::Contains(t) | Requirement::StartsWith(t) | Requirement::EndsWith(t) => letter(t),
            Requirement::LengthBetween { lo, hi } => {
                if lo > hi {
                    Err(LangError::InvalidParam(format!("length bounds {lo} > {hi}")))
                } else if hi > vocab.max_len {
                    Err(LangError::InvalidParam(format!(
                        "length bound {hi} exceeds vocabulary maximum {}",
                        vocab.max_len
                    )))
                } else {
                    Ok(())
                }
            }
            Requirement::CountExact { token, k } => {
                letter(token)?;
                if k > vocab.max_len {
                    Err(LangError::InvalidParam(format!("count {k} not encodable")))
                } else {
                    Ok(())
                }
            }
            Requirement::NoAdjacentRepeat => Ok(()),
        }
    }

    pub fn describe(&self, vocab: &Vocab) -> String {
        let s = |t: Token| vocab.surface(t);
        let body = match self.requirement {
            Requirement::Contains(t) => format!("contains {}", s(t)),
            Requirement::StartsWith(t) => format!("starts with {}", s(t)),
            Requirement::EndsWith(t) => format!("ends with {}", s(t)),
            Requirement::LengthBetween { lo, hi } => format!("length in [{lo}, {hi}]"),
            Requirement::CountExact { token, k } => format!("exactly {k} x {}", s(token)),
            Requirement::NoAdjacentRepeat => "no adjacent repeats".to_string(),
        };
        match self.polarity {
            Polarity::Positive => body,
            Polarity::Negative => format!("NOT({body})"),
        }
    }
}

/// A response: letter tokens, optionally followed by a single end marker.
///
/// Responses truncated at the generation length limit carry no end marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Response {
    tokens: Vec<Token>,
}

impl Response {
    /// Letters followed by the end marker.
    pub fn from_content(content: &[Token]) -> Self {
        let mut tokens = content.to_vec();
        tokens.push(EOS);
        Self { tokens }
    }

    /// Validates a raw token list (letters, optionally terminated by EOS).
    pub fn from_tokens(tokens: Vec<Token>, vocab: &Vocab) -> Result<Self, LangError> {
        let body = match tokens.split_last() {
            Some((&EOS, body)) => body,
            _ => &tokens[..],
        };
        if let Some(pos) = body.iter().position(|&t| !vocab.is_letter(t)) {
            return Err(LangError::Parse {
                position: pos,
                reason: format!("token {} is not a response letter", body[pos]),
            });
        }
        Ok(Self { tokens })
    }

    /// Full token sequence as scored by the model, including EOS when present.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn content(&self) -> &[Token] {
        match self.tokens.split_last() {
            Some((&EOS, body)) => body,
            _ => &self.tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.content().len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Ordered, non-empty list of constraints. The id is a content hash, so it
/// survives serialization round trips.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    id: String,
    constraints: Vec<AtomicConstraint>,
}

impl Instruction {
    pub fn new(constraints: Vec<AtomicConstraint>) -> Result<Self, LangError> {
        if constraints.is_empty() {
            return Err(LangError::EmptyInstruction);
        }
        let id = content_id(&constraints);
        Ok(Self { id, constraints })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn constraints(&self) -> &[AtomicConstraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }
}

fn content_id(constraints: &[AtomicConstraint]) -> String {
    let mut hasher = Sha256::new();
    for c in constraints {
        hasher.update(format!("{c:?};").as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id)
    }
}

pub fn check(constraint: &AtomicConstraint, response: &Response) -> bool {
    let holds = constraint.requirement.holds(response.content());
    match constraint.polarity {
        Polarity::Positive => holds,
        Polarity::Negative => !holds,
    }
}

pub fn check_all(instruction: &Instruction, response: &Response) -> Vec<bool> {
    instruction.constraints().iter().map(|c| check(c, response)).collect()
}

fn encode_constraint(c: &AtomicConstraint, vocab: &Vocab, out: &mut Vec<Token>) {
    out.push(c.kind().code());
    out.push(match c.polarity {
        Polarity::Positive => POS,
        Polarity::Negative => NEG,
    });
    match c.requirement {
        Requirement::Contains(t) | Requirement::StartsWith(t) | Requirement::EndsWith(t) => out.push(t),
        Requirement::LengthBetween { lo, hi } => {
            out.push(vocab.number(lo));
            out.push(vocab.number(hi));
        }
        Requirement::CountExact { token, k } => {
            out.push(token);
            out.push(vocab.number(k));
        }
        Requirement::NoAdjacentRepeat => {}
    }
}

/// Canonical conditioning prefix: `BOS c1 SEP c2 ... EOI`.
pub fn serialize_instruction(instruction: &Instruction, vocab: &Vocab) -> Result<Vec<Token>, LangError> {
    let mut out = Vec::with_capacity(2 + instruction.len() * 5);
    out.push(BOS);
    for (i, c) in instruction.constraints().iter().enumerate() {
        c.validate(vocab)?;
        if i > 0 {
            out.push(SEP);
        }
        encode_constraint(c, vocab, &mut out);
    }
    out.push(EOI);
    Ok(out)
}

pub fn parse_instruction(tokens: &[Token], vocab: &Vocab) -> Result<Instruction, LangError> {
    let err = |position: usize, reason: &str| LangError::Parse { position, reason: reason.to_string() };
    let mut pos = 0;
    let next = |pos: &mut usize| -> Result<Token, LangError> {
        let t = *tokens.get(*pos).ok_or_else(|| err(*pos, "unexpected end of sequence"))?;
        *pos += 1;
        Ok(t)
    };

    if next(&mut pos)? != BOS {
        return Err(err(0, "expected begin marker"));
    }
    let mut constraints = Vec::new();
    loop {
        let at = pos;
        let code = next(&mut pos)?;
        let kind = code
            .checked_sub(KIND_BASE)
            .and_then(|i| ConstraintKind::ALL.get(i as usize).copied())
            .ok_or_else(|| err(at, "unknown constraint-kind code"))?;
        let polarity = match next(&mut pos)? {
            POS => Polarity::Positive,
            NEG => Polarity::Negative,
            _ => return Err(err(pos - 1, "expected polarity code")),
        };
        let mut params = [0 as Token; 2];
        for p in params.iter_mut().take(kind.arity()) {
            *p = next(&mut pos)?;
        }
        let letter = |t: Token, at: usize| {
            if vocab.is_letter(t) {
                Ok(t)
            } else {
                Err(err(at, "expected letter parameter"))
            }
        };
        let number =
            |t: Token, at: usize| vocab.number_value(t).ok_or_else(|| err(at, "expected number parameter"));
        let p0 = at + 2;
        let requirement = match kind {
            ConstraintKind::Contains => Requirement::Contains(letter(params[0], p0)?),
            ConstraintKind::StartsWith => Requirement::StartsWith(letter(params[0], p0)?),
            ConstraintKind::EndsWith => Requirement::EndsWith(letter(params[0], p0)?),
            ConstraintKind::LengthBetween => {
                let lo = number(params[0], p0)?;
                let hi = number(params[1], p0 + 1)?;
                if lo > hi {
                    return Err(err(p0, "length lower bound exceeds upper bound"));
                }
                Requirement::LengthBetween { lo, hi }
            }
            ConstraintKind::CountExact => {
                Requirement::CountExact { token: letter(params[0], p0)?, k: number(params[1], p0 + 1)? }
            }
            ConstraintKind::NoAdjacentRepeat => Requirement::NoAdjacentRepeat,
        };
        constraints.push(AtomicConstraint { requirement, polarity });
        let at = pos;
        match next(&mut pos)? {
            SEP => continue,
            EOI => break,
            _ => return Err(err(at, "expected separator or end marker")),
        }
    }
    if pos != tokens.len() {
        return Err(err(pos, "trailing tokens after end marker"));
    }
    Instruction::new(constraints)
}

pub fn negate(constraint: &AtomicConstraint) -> AtomicConstraint {
    AtomicConstraint { requirement: constraint.requirement, polarity: constraint.polarity.flipped() }
}

/// Every positive-polarity constraint expressible in `vocab`, with counts
/// limited to `max_count`.
pub fn catalog(vocab: &Vocab, max_count: u32) -> Vec<AtomicConstraint> {
    let mut out = Vec::new();
    for t in vocab.letters() {
        out.push(AtomicConstraint::positive(Requirement::Contains(t)));
        out.push(AtomicConstraint::positive(Requirement::StartsWith(t)));
        out.push(AtomicConstraint::positive(Requirement::EndsWith(t)));
        for k in 0..=max_count.min(vocab.max_len) {
            out.push(AtomicConstraint::positive(Requirement::CountExact { token: t, k }));
        }
    }
    for lo in 0..=vocab.max_len {
        for hi in lo..=vocab.max_len {
            out.push(AtomicConstraint::positive(Requirement::LengthBetween { lo, hi }));
        }
    }
    out.push(AtomicConstraint::positive(Requirement::NoAdjacentRepeat));
    out
}

/// Replaces a constraint with one drawn uniformly from the positive catalog,
/// excluding the input itself.
pub fn substitute<R: Rng + ?Sized>(
    constraint: &AtomicConstraint,
    vocab: &Vocab,
    rng: &mut R,
) -> AtomicConstraint {
    let candidates: Vec<_> =
        catalog(vocab, DEFAULT_MAX_COUNT).into_iter().filter(|c| c != constraint).collect();
    *candidates.choose(rng).expect("catalog has at least two entries")
}

/// Abstract solver state after emitting a prefix. `StartsWith` is settled
/// after the first token, `EndsWith` only needs the last one, and letter
/// counts saturate at the largest value any constraint distinguishes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct SearchState {
    len: u8,
    last: u8,
    counts: u64,
    repeated: bool,
}

struct Search<'a> {
    constraints: &'a [AtomicConstraint],
    vocab: Vocab,
    caps: [u8; MAX_LETTERS as usize],
    max_len: u32,
    track_repeat: bool,
    dead: HashSet<SearchState>,
}

const NO_LAST: u8 = u8::MAX;

impl<'a> Search<'a> {
    fn new(constraints: &'a [AtomicConstraint], vocab: Vocab, max_len: u32) -> Self {
        let mut caps = [0u8; MAX_LETTERS as usize];
        let mut bound = max_len.min(vocab.max_len);
        let mut track_repeat = false;
        for c in constraints {
            match c.requirement {
                Requirement::Contains(t) => {
                    if let Some(i) = vocab.letter_index(t) {
                        caps[i as usize] = caps[i as usize].max(1);
                    }
                }
                Requirement::CountExact { token, k } => {
                    if let Some(i) = vocab.letter_index(token) {
                        caps[i as usize] = caps[i as usize].max((k + 1).min(15) as u8);
                    }
                }
                Requirement::LengthBetween { hi, .. } if c.is_positive() => bound = bound.min(hi),
                Requirement::NoAdjacentRepeat => track_repeat = true,
                _ => {}
            }
        }
        Self { constraints, vocab, caps, max_len: bound, track_repeat, dead: HashSet::new() }
    }

    fn count(&self, state: &SearchState, letter: u32) -> u32 {
        ((state.counts >> (4 * letter)) & 0xF) as u32
    }

    fn letter(&self, t: Token) -> Option<u32> {
        self.vocab.letter_index(t)
    }

    /// Would the response end here satisfy everything? `first` is the first
    /// letter of the prefix, needed only for `StartsWith`.
    fn accepts(&self, s: &SearchState, first: Option<u32>) -> bool {
        self.constraints.iter().all(|c| {
            let holds = match c.requirement {
                Requirement::Contains(t) => self.letter(t).is_some_and(|i| self.count(s, i) >= 1),
                Requirement::StartsWith(t) => first.is_some() && first == self.letter(t),
                Requirement::EndsWith(t) => s.last != NO_LAST && Some(s.last as u32) == self.letter(t),
                Requirement::LengthBetween { lo, hi } => (lo..=hi).contains(&(s.len as u32)),
                Requirement::CountExact { token, k } => {
                    self.letter(token).is_some_and(|i| self.count(s, i) == k)
                        || (k == 0 && self.letter(token).is_none())
                }
                Requirement::NoAdjacentRepeat => !s.repeated,
            };
            holds == c.is_positive()
        })
    }

    /// Prunes prefixes that can never be extended into a witness.
    fn doomed(&self, s: &SearchState, first: Option<u32>) -> bool {
        self.constraints.iter().any(|c| match (c.requirement, c.polarity) {
            (Requirement::CountExact { token, k }, Polarity::Positive) => {
                self.letter(token).is_some_and(|i| self.count(s, i) > k)
            }
            (Requirement::NoAdjacentRepeat, Polarity::Positive) => s.repeated,
            (Requirement::Contains(t), Polarity::Negative) => {
                self.letter(t).is_some_and(|i| self.count(s, i) >= 1)
            }
            (Requirement::StartsWith(t), pol) if s.len >= 1 => {
                (first == self.letter(t)) != (pol == Polarity::Positive)
            }
            _ => false,
        })
    }

    fn step(&self, s: &SearchState, letter: u32) -> SearchState {
        let mut next = *s;
        next.len += 1;
        let cap = self.caps[letter as usize] as u32;
        let c = self.count(s, letter);
        if c < cap {
            next.counts += 1u64 << (4 * letter);
        }
        if s.last != NO_LAST && s.last as u32 == letter {
            next.repeated = self.track_repeat;
        }
        next.last = letter as u8;
        next
    }

    /// Depth-first search over abstract states; `order` gives the letter
    /// order tried at each depth.
    fn dfs(
        &mut self,
        s: SearchState,
        first: Option<u32>,
        path: &mut Vec<u32>,
        order: &mut dyn FnMut() -> Vec<u32>,
    ) -> bool {
        if self.accepts(&s, first) {
            return true;
        }
        if s.len as u32 >= self.max_len {
            return false;
        }
        // The first letter is not part of the memo key; only memoize once
        // StartsWith has been settled.
        if s.len >= 1 && self.dead.contains(&s) {
            return false;
        }
        for letter in order() {
            let next = self.step(&s, letter);
            let next_first = first.or(Some(letter));
            if self.doomed(&next, next_first) {
                continue;
            }
            path.push(letter);
            if self.dfs(next, next_first, path, order) {
                return true;
            }
            path.pop();
        }
        if s.len >= 1 {
            self.dead.insert(s);
        }
        false
    }

    fn run(&mut self, order: &mut dyn FnMut() -> Vec<u32>) -> Option<Vec<Token>> {
        let start = SearchState { len: 0, last: NO_LAST, counts: 0, repeated: false };
        let mut path = Vec::new();
        self.dfs(start, None, &mut path, order).then(|| path.iter().map(|&i| self.vocab.letter(i)).collect())
    }
}

/// Exhaustive decision procedure: is there a response of at most `max_len`
/// letters satisfying every constraint?
pub fn satisfiable(constraints: &[AtomicConstraint], vocab: &Vocab, max_len: u32) -> bool {
    let n = vocab.n_letters;
    Search::new(constraints, *vocab, max_len).run(&mut || (0..n).collect()).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_len: u32,
    pub max_attempts: usize,
    pub style: SolverStyle,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_len: 12, max_attempts: 200, style: SolverStyle::Random }
    }
}

/// How the constructive solver picks among valid responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverStyle {
    /// Uniform length among the allowed ones, random placement and filler.
    Random,
    /// Shortest workable length, required letters in the leftmost free
    /// slots, lowest-id filler. A deterministic function of the constraints.
    Compact,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("constraint set is unsatisfiable within {max_len} tokens")]
pub struct Unsatisfiable {
    pub max_len: u32,
}

/// Finds a response satisfying every constraint.
///
/// Tries constructive placement with random filler first, then falls back to
/// a randomized exhaustive search bounded by `cfg.max_len`. The compact style
/// instead walks lengths from zero upward, trying deterministic placement and
/// then a lowest-letter-first exhaustive search at each, so it returns a
/// shortest witness and ignores `rng`.
pub fn solve<R: Rng + ?Sized>(
    constraints: &[AtomicConstraint],
    vocab: &Vocab,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<Response, Unsatisfiable> {
    let instruction = Instruction::new(constraints.to_vec()).ok();
    let verify = |content: &[Token]| {
        let r = Response::from_content(content);
        let ok = match &instruction {
            Some(ins) => check_all(ins, &r).into_iter().all(|b| b),
            None => true,
        };
        ok.then_some(r)
    };
    if cfg.style == SolverStyle::Compact {
        for len in 0..=cfg.max_len.min(vocab.max_len) {
            if let Some(content) = construct(constraints, vocab, rng, cfg.max_len, Some(len as usize)) {
                if let Some(r) = verify(&content) {
                    return Ok(r);
                }
            }
            let n = vocab.n_letters;
            if let Some(r) = Search::new(constraints, *vocab, len)
                .run(&mut || (0..n).collect())
                .and_then(|content| verify(&content))
            {
                return Ok(r);
            }
        }
        return Err(Unsatisfiable { max_len: cfg.max_len });
    }
    for _ in 0..cfg.max_attempts.max(1) {
        if let Some(content) = construct(constraints, vocab, rng, cfg.max_len, None) {
            if let Some(r) = verify(&content) {
                return Ok(r);
            }
        }
    }
    let n = vocab.n_letters;
    let mut letters: Vec<u32> = (0..n).collect();
    let mut order = || {
        letters.shuffle(rng);
        letters.clone()
    };
    Search::new(constraints, *vocab, cfg.max_len)
        .run(&mut order)
        .and_then(|content| verify(&content))
        .ok_or(Unsatisfiable { max_len: cfg.max_len })
}

/// One constructive attempt: choose a length, pin positive
/// start/end/count/contains letters, fill the rest from the allowed letters.
///
/// With `fixed_len` the attempt is deterministic: that length, leftmost free
/// slots and lowest-id filler.
fn construct<R: Rng + ?Sized>(
    constraints: &[AtomicConstraint],
    vocab: &Vocab,
    rng: &mut R,
    max_len: u32,
    fixed_len: Option<usize>,
) -> Option<Vec<Token>> {
    let det = fixed_len.is_some();
    fn pick<T: Copy, R: Rng + ?Sized>(xs: &[T], det: bool, rng: &mut R) -> Option<T> {
        if det {
            xs.first().copied()
        } else {
            xs.choose(rng).copied()
        }
    }
    let max_len = max_len.min(vocab.max_len);
    let lengths: Vec<u32> = (0..=max_len)
        .filter(|&n| {
            constraints.iter().all(|c| match c.requirement {
                Requirement::LengthBetween { lo, hi } => ((lo..=hi).contains(&n)) == c.is_positive(),
                _ => true,
            })
        })
        .collect();
    let len = match fixed_len {
        Some(l) if lengths.contains(&(l as u32)) => l,
        Some(_) => return None,
        None => *lengths.choose(rng)? as usize,
    };
    let mut slots: Vec<Option<Token>> = vec![None; len];

    let mut forbidden: HashSet<Token> = HashSet::new();
    let mut exact: HashSet<Token> = HashSet::new();
    for c in constraints {
        match (c.requirement, c.polarity) {
            (Requirement::Contains(t), Polarity::Negative) => {
                forbidden.insert(t);
            }
            (Requirement::CountExact { token, .. }, Polarity::Positive) => {
                exact.insert(token);
            }
            _ => {}
        }
    }

    let place_at = |slots: &mut Vec<Option<Token>>, idx: usize, t: Token| -> bool {
        match slots.get(idx).copied() {
            Some(None) => {
                slots[idx] = Some(t);
                true
            }
            Some(Some(existing)) => existing == t,
            None => false,
        }
    };
    for c in constraints.iter().filter(|c| c.is_positive()) {
        match c.requirement {
            Requirement::StartsWith(t) if !place_at(&mut slots, 0, t) => return None,
            Requirement::EndsWith(t) if len == 0 || !place_at(&mut slots, len - 1, t) => return None,
            _ => {}
        }
    }
    for c in constraints.iter().filter(|c| c.is_positive()) {
        if let Requirement::CountExact { token, k } = c.requirement {
            let have = slots.iter().filter(|s| **s == Some(token)).count() as u32;
            for _ in have..k {
                let free: Vec<usize> = (0..len).filter(|&i| slots[i].is_none()).collect();
                let i = pick(&free, det, rng)?;
                slots[i] = Some(token);
            }
        }
    }
    for c in constraints.iter().filter(|c| c.is_positive()) {
        if let Requirement::Contains(t) = c.requirement {
            if !slots.contains(&Some(t)) {
                if exact.contains(&t) {
                    return None;
                }
                let free: Vec<usize> = (0..len).filter(|&i| slots[i].is_none()).collect();
                let i = pick(&free, det, rng)?;
                slots[i] = Some(t);
            }
        }
    }
    let no_repeat =
        constraints.iter().any(|c| c.is_positive() && c.requirement == Requirement::NoAdjacentRepeat);
    let filler: Vec<Token> =
        vocab.letters().filter(|t| !forbidden.contains(t) && !exact.contains(t)).collect();
    let edge = |want: fn(Requirement) -> Option<Token>| -> HashSet<Token> {
        constraints.iter().filter(|c| !c.is_positive()).filter_map(|c| want(c.requirement)).collect()
    };
    let not_first = edge(|r| match r {
        Requirement::StartsWith(t) => Some(t),
        _ => None,
    });
    let not_last = edge(|r| match r {
        Requirement::EndsWith(t) => Some(t),
        _ => None,
    });
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = match slots[i] {
            Some(t) => t,
            None => {
                let next_fixed = slots.get(i + 1).copied().flatten();
                let options: Vec<Token> = filler
                    .iter()
                    .copied()
                    .filter(|&t| !no_repeat || (out.last() != Some(&t) && next_fixed != Some(t)))
                    .filter(|&t| !(i == 0 && not_first.contains(&t)))
                    .filter(|&t| !(i + 1 == len && not_last.contains(&t)))
                    .collect();
                pick(&options, det, rng)?
            }
        };
        out.push(t);
    }
    Some(out)
}

/// Largest `CountExact` count the sampler and substitution catalog use.
pub const DEFAULT_MAX_COUNT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Probability that a non-first constraint is negated.
    pub negative_rate: f64,
    pub max_count: u32,
    /// Whole-set attempts before giving up.
    pub resample_budget: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { negative_rate: 0.25, max_count: DEFAULT_MAX_COUNT, resample_budget: 100 }
    }
}

fn random_requirement<R: Rng + ?Sized>(
    kind: ConstraintKind,
    vocab: &Vocab,
    max_len: u32,
    max_count: u32,
    rng: &mut R,
) -> Requirement {
    let letter = |rng: &mut R| vocab.letter(rng.gen_range(0..vocab.n_letters));
    match kind {
        ConstraintKind::Contains => Requirement::Contains(letter(rng)),
        ConstraintKind::StartsWith => Requirement::StartsWith(letter(rng)),
        ConstraintKind::EndsWith => Requirement::EndsWith(letter(rng)),
        ConstraintKind::LengthBetween => {
            let lo = rng.gen_range(1..=max_len.saturating_sub(2).max(1));
            let hi = (lo + rng.gen_range(1..=4)).min(max_len);
            Requirement::LengthBetween { lo, hi }
        }
        ConstraintKind::CountExact => {
            Requirement::CountExact { token: letter(rng), k: rng.gen_range(0..=max_count) }
        }
        ConstraintKind::NoAdjacentRepeat => Requirement::NoAdjacentRepeat,
    }
}

/// Samples a satisfiable constraint set of `n ~ U[n_min, n_max]` constraints.
///
/// The first constraint is always positive `StartsWith` or `LengthBetween`.
/// Later constraints are redrawn while they would make the set unsatisfiable
/// within `max_len` or duplicate an earlier one.
pub fn sample_constraint_set<R: Rng + ?Sized>(
    vocab: &Vocab,
    rng: &mut R,
    n_min: usize,
    n_max: usize,
    max_len: u32,
    cfg: &SamplerConfig,
) -> Result<Vec<AtomicConstraint>, LangError> {
    assert!(1 <= n_min && n_min <= n_max, "need 1 <= n_min <= n_max");
    let n = rng.gen_range(n_min..=n_max);
    let max_len = max_len.min(vocab.max_len);
    for _ in 0..cfg.resample_budget.max(1) {
        let anchor =
            if rng.gen_bool(0.5) { ConstraintKind::StartsWith } else { ConstraintKind::LengthBetween };
        let mut set =
            vec![AtomicConstraint::positive(random_requirement(anchor, vocab, max_len, cfg.max_count, rng))];
        let mut draws = 0;
        while set.len() < n && draws < 20 * n {
            draws += 1;
            let kind = *ConstraintKind::ALL.choose(rng).unwrap();
            let requirement = random_requirement(kind, vocab, max_len, cfg.max_count, rng);
            let c = if rng.gen_bool(cfg.negative_rate) {
                AtomicConstraint::negative(requirement)
            } else {
                AtomicConstraint::positive(requirement)
            };
            if set.iter().any(|e| e.requirement == c.requirement) {
                continue;
            }
            set.push(c);
            if !satisfiable(&set, vocab, max_len) {
                set.pop();
            }
        }
        if set.len() == n {
            return Ok(set);
        }
    }
    Err(LangError::SamplingBudget(cfg.resample_budget))
}
