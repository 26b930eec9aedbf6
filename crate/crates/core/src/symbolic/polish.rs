//! Prefix (Polish) serialization of equation trees.
//!
//! Every operator token carries a fixed arity, so a preorder walk is
//! self-delimiting: decoding consumes exactly one subtree per expected
//! operand and needs no brackets. Constants expand to a sign/mantissa/
//! exponent token triple with three significant digits:
//! `value = ±mantissa·10^exponent`, mantissa ∈ {100..999} (or the dedicated
//! zero token), exponent ∈ [-10, 10].

use super::vocab::{operator_arity, Vocabulary};
use super::{Expr, SymbolicError, TokenSequence, BOS, EOS, PAD};

/// Hard cap on symbolic sequence length; enforced when datasets are built.
pub const MAX_SYMBOL_LEN: usize = 256;

/// Encodes a finite value as `[sign, mantissa, exponent]` token ids.
pub fn encode_constant(value: f64, vocab: &Vocabulary) -> Result<[u32; 3], SymbolicError> {
    if !value.is_finite() {
        return Err(SymbolicError::ConstantOverflow { value });
    }
    let tok = |name: &str| vocab.id(name).expect("constant tokens are in the vocabulary");
    if value == 0.0 {
        return Ok([tok("<c+>"), tok("<c0>"), tok("<cE0>")]);
    }
    let sign = if value < 0.0 { tok("<c->") } else { tok("<c+>") };
    let a = value.abs();
    let mut exp = a.log10().floor() as i32 - 2;
    let mut mant = (a * 10f64.powi(-exp)).round() as i64;
    if mant == 1000 {
        mant = 100;
        exp += 1;
    }
    debug_assert!((100..=999).contains(&mant), "mantissa {mant} out of band for {value}");
    if !(-10..=10).contains(&exp) {
        return Err(SymbolicError::ConstantOverflow { value });
    }
    Ok([sign, tok(&format!("<m{mant}>")), tok(&format!("<cE{exp}>"))])
}

/// Reads back a sign/mantissa/exponent token triple.
fn decode_constant(names: [&str; 3], position: usize) -> Result<f64, SymbolicError> {
    let sign = match names[0] {
        "<c+>" => 1.0,
        "<c->" => -1.0,
        other => {
            return Err(SymbolicError::Malformed {
                position,
                message: format!("expected a constant sign token, found `{other}`"),
            })
        }
    };
    let mant: f64 = if names[1] == "<c0>" {
        0.0
    } else {
        names[1]
            .strip_prefix("<m")
            .and_then(|s| s.strip_suffix('>'))
            .and_then(|s| s.parse::<u32>().ok())
            .filter(|m| (100..=999).contains(m))
            .ok_or_else(|| SymbolicError::Malformed {
                position: position + 1,
                message: format!("expected a mantissa token, found `{}`", names[1]),
            })? as f64
    };
    let exp: i32 = names[2]
        .strip_prefix("<cE")
        .and_then(|s| s.strip_suffix('>'))
        .and_then(|s| s.parse::<i32>().ok())
        .filter(|e| (-10..=10).contains(e))
        .ok_or_else(|| SymbolicError::Malformed {
            position: position + 2,
            message: format!("expected an exponent token, found `{}`", names[2]),
        })?;
    Ok(sign * mant * 10f64.powi(exp))
}

fn emit(expr: &Expr, vocab: &Vocabulary, out: &mut Vec<u32>) -> Result<(), SymbolicError> {
    match expr {
        Expr::Op(name, args) => {
            out.push(
                vocab.id(name).ok_or_else(|| SymbolicError::VocabularyMiss { name: name.to_string() })?,
            );
            for a in args {
                emit(a, vocab, out)?;
            }
            Ok(())
        }
        Expr::Sym(name) => {
            out.push(
                vocab.id(name).ok_or_else(|| SymbolicError::VocabularyMiss { name: name.to_string() })?,
            );
            Ok(())
        }
        Expr::Const(v) => {
            out.extend(encode_constant(*v, vocab)?);
            Ok(())
        }
    }
}

/// Serializes a system (sequence of equation trees) to `BOS tree… EOS`.
pub fn to_polish(system: &[Expr], vocab: &Vocabulary) -> Result<TokenSequence, SymbolicError> {
    let mut ids = vec![BOS];
    for expr in system {
        emit(expr, vocab, &mut ids)?;
    }
    ids.push(EOS);
    Ok(TokenSequence::new(ids))
}

struct Reader<'a> {
    ids: &'a [u32],
    pos: usize,
    vocab: &'a Vocabulary,
}

impl<'a> Reader<'a> {
    fn name(&self, pos: usize) -> Result<&'a str, SymbolicError> {
        let id = *self.ids.get(pos).ok_or(SymbolicError::Malformed {
            position: pos,
            message: "sequence ended mid-expression (missing operand)".into(),
        })?;
        self.vocab.name(id).ok_or(SymbolicError::Malformed {
            position: pos,
            message: format!("id {id} is outside the vocabulary"),
        })
    }

    fn subtree(&mut self) -> Result<Expr, SymbolicError> {
        let position = self.pos;
        let name = self.name(position)?;
        match name {
            "<pad>" | "<bos>" => Err(SymbolicError::Malformed {
                position,
                message: format!("`{name}` inside an expression"),
            }),
            "<eos>" => Err(SymbolicError::Malformed {
                position,
                message: "sequence ended mid-expression (missing operand)".into(),
            }),
            "<c+>" | "<c->" => {
                let names = [name, self.name(position + 1)?, self.name(position + 2)?];
                let v = decode_constant(names, position)?;
                self.pos += 3;
                Ok(Expr::Const(v))
            }
            _ => {
                if let Some(arity) = operator_arity(name) {
                    let interned = super::vocab::intern(name).unwrap();
                    self.pos += 1;
                    let mut args = Vec::with_capacity(arity);
                    for _ in 0..arity {
                        args.push(self.subtree()?);
                    }
                    Ok(Expr::Op(interned, args))
                } else if let Some(interned) = super::vocab::intern(name) {
                    self.pos += 1;
                    Ok(Expr::Sym(interned))
                } else {
                    Err(SymbolicError::Malformed {
                        position,
                        message: format!("`{name}` cannot start an expression"),
                    })
                }
            }
        }
    }
}

/// Decodes `BOS tree… EOS [PAD…]` back into the system of equation trees.
pub fn from_polish(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<Expr>, SymbolicError> {
    if ids.first() != Some(&BOS) {
        return Err(SymbolicError::Malformed { position: 0, message: "sequence must start with BOS".into() });
    }
    let mut r = Reader { ids, pos: 1, vocab };
    let mut system = Vec::new();
    loop {
        match ids.get(r.pos) {
            None => {
                return Err(SymbolicError::Malformed {
                    position: r.pos,
                    message: "sequence ended without EOS".into(),
                })
            }
            Some(&EOS) => {
                r.pos += 1;
                break;
            }
            Some(_) => system.push(r.subtree()?),
        }
    }
    // Only padding may follow EOS.
    if let Some(extra) = ids[r.pos..].iter().position(|&id| id != PAD) {
        return Err(SymbolicError::Malformed {
            position: r.pos + extra,
            message: "non-padding token after EOS".into(),
        });
    }
    Ok(system)
}
