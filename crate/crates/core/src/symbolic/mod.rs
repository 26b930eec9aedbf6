//! Symbolic equation modality: expression trees, a text grammar for writing
//! PDE systems, and a prefix ("Polish") token codec over a closed vocabulary.
//!
//! Equations enter as ASCII text (`dt(h) + div(h*u) = 0; ...`), become
//! [`Expr`] trees, and serialize to token-id sequences that the model embeds
//! as its second input modality. Every operator has a fixed arity, so the
//! prefix serialization is self-delimiting and decodes back to the identical
//! tree — a property the tests lean on heavily.

mod parser;
mod polish;
mod vocab;

pub use parser::{parse_equation, parse_system};
pub use polish::{encode_constant, from_polish, to_polish, MAX_SYMBOL_LEN};
pub use vocab::{intern, Vocabulary, BOS, EOS, OPERATORS, PAD, SYMBOLS};

use thiserror::Error;

/// One node of an equation tree. Operators come from the closed vocabulary
/// ([`vocab::OPERATORS`]) and carry exactly their declared arity; symbols
/// are the field/coefficient names of the equation systems.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Op(&'static str, Vec<Expr>),
    Sym(&'static str),
    Const(f64),
}

impl Expr {
    /// Number of nodes, counting a constant as one.
    pub fn node_count(&self) -> usize {
        match self {
            Expr::Op(_, args) => 1 + args.iter().map(Expr::node_count).sum::<usize>(),
            _ => 1,
        }
    }
}

impl std::fmt::Display for Expr {
    /// Prints in the function-call form of the surface grammar; parseable
    /// back to the same tree.
    fn fmt(&self, out: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expr::Sym(s) => write!(out, "{s}"),
            Expr::Const(v) => write!(out, "{v}"),
            Expr::Op(name, args) => {
                write!(out, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(out, ", ")?;
                    }
                    write!(out, "{a}")?;
                }
                write!(out, ")")
            }
        }
    }
}

/// Token ids plus a validity mask, padded to a fixed length at batch time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extends with PAD (masked out) up to `len`. Errors if already longer.
    pub fn pad_to(&mut self, len: usize) -> Result<(), SymbolicError> {
        if self.ids.len() > len {
            return Err(SymbolicError::TooLong { len: self.ids.len(), max: len });
        }
        self.ids.resize(len, PAD);
        self.mask.resize(len, false);
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SymbolicError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}; known operators: {operators}; known symbols: {symbols}")]
    UnknownIdentifier { offset: usize, name: String, operators: String, symbols: String },
    #[error("malformed token sequence at position {position}: {message}")]
    Malformed { position: usize, message: String },
    #[error("constant {value} is outside the encodable range (exponent must land in [-10, 10])")]
    ConstantOverflow { value: f64 },
    #[error("`{name}` is not in the vocabulary")]
    VocabularyMiss { name: String },
    #[error("token sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("vocabulary file is invalid: {0}")]
    BadVocabulary(String),
}
