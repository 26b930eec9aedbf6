//! Text grammar for equation systems.
//!
//! ```text
//! system   := equation (';' equation)*
//! equation := expr ('=' expr)?          -- bare expr means expr = 0
//! expr     := term (('+' | '-') term)*
//! term     := factor (('*' | '/') factor)*
//! factor   := '-' factor | power
//! power    := atom ('^' factor)?        -- right-associative
//! atom     := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Implemented as a Pratt loop over a hand-rolled lexer so errors carry the
//! byte offset of the offending token. Identifiers must name a vocabulary
//! operator (call position) or symbol (atom position); anything else is an
//! unknown-identifier error that lists the legal names.

use super::vocab::{intern, is_symbol, operator_arity, OPERATORS, SYMBOLS};
use super::{Expr, SymbolicError};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Eq,
    LParen,
    RParen,
    Comma,
    Semi,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(v) => format!("number `{v}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::Eq => "`=`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Semi => "`;`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, SymbolicError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => toks.push((Tok::Plus, start)),
            b'-' => toks.push((Tok::Minus, start)),
            b'*' => toks.push((Tok::Star, start)),
            b'/' => toks.push((Tok::Slash, start)),
            b'^' => toks.push((Tok::Caret, start)),
            b'=' => toks.push((Tok::Eq, start)),
            b'(' => toks.push((Tok::LParen, start)),
            b')' => toks.push((Tok::RParen, start)),
            b',' => toks.push((Tok::Comma, start)),
            b';' => toks.push((Tok::Semi, start)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let value: f64 = lit.parse().map_err(|_| SymbolicError::Syntax {
                    offset: start,
                    message: format!("malformed number `{lit}`"),
                })?;
                toks.push((Tok::Number(value), start));
                continue;
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push((Tok::Ident(text[start..i].to_string()), start));
                continue;
            }
            other => {
                return Err(SymbolicError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{}`", other as char),
                })
            }
        }
        i += 1;
    }
    toks.push((Tok::End, text.len()));
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok, context: &str) -> Result<(), SymbolicError> {
        if self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(SymbolicError::Syntax {
                offset: self.offset(),
                message: format!("expected {} {context}, found {}", want.describe(), self.peek().describe()),
            })
        }
    }

    fn unknown(&self, name: &str, offset: usize) -> SymbolicError {
        SymbolicError::UnknownIdentifier {
            offset,
            name: name.to_string(),
            operators: OPERATORS.iter().map(|&(n, _)| n).collect::<Vec<_>>().join(", "),
            symbols: SYMBOLS.join(", "),
        }
    }

    /// Binding powers: additive 10, multiplicative 20, power 30 (right-assoc).
    fn expr(&mut self, min_bp: u8) -> Result<Expr, SymbolicError> {
        let mut lhs = self.atom()?;
        loop {
            let (op, lbp, rbp): (&str, u8, u8) = match self.peek() {
                Tok::Plus => ("add", 10, 11),
                Tok::Minus => ("sub", 10, 11),
                Tok::Star => ("mul", 20, 21),
                Tok::Slash => ("divide", 20, 21),
                Tok::Caret => ("pow", 30, 30), // rbp == lbp: right-associative
                _ => break,
            };
            if lbp < min_bp {
                break;
            }
            self.bump();
            let rhs = self.expr(rbp)?;
            lhs = Expr::Op(intern(op).unwrap(), vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, SymbolicError> {
        let offset = self.offset();
        match self.bump().0 {
            Tok::Number(v) => Ok(Expr::Const(v)),
            Tok::Minus => {
                // unary minus: tighter than * and /, looser than ^
                let inner = self.expr(25)?;
                Ok(Expr::Op("neg", vec![inner]))
            }
            Tok::LParen => {
                let e = self.expr(0)?;
                self.expect(&Tok::RParen, "to close the parenthesis")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    let Some(arity) = operator_arity(&name) else {
                        return Err(self.unknown(&name, offset));
                    };
                    self.bump();
                    let mut args = vec![self.expr(0)?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr(0)?);
                    }
                    self.expect(&Tok::RParen, "to close the argument list")?;
                    if args.len() != arity {
                        return Err(SymbolicError::Syntax {
                            offset,
                            message: format!(
                                "`{name}` takes {arity} argument(s), found {}",
                                args.len()
                            ),
                        });
                    }
                    Ok(Expr::Op(intern(&name).unwrap(), args))
                } else if is_symbol(&name) {
                    Ok(Expr::Sym(intern(&name).unwrap()))
                } else if operator_arity(&name).is_some() {
                    Err(SymbolicError::Syntax {
                        offset,
                        message: format!("operator `{name}` needs an argument list"),
                    })
                } else {
                    Err(self.unknown(&name, offset))
                }
            }
            other => Err(SymbolicError::Syntax {
                offset,
                message: format!(
                    "expected a number, symbol, function call, or `(`, found {}",
                    other.describe()
                ),
            }),
        }
    }

    fn equation(&mut self) -> Result<Expr, SymbolicError> {
        let lhs = self.expr(0)?;
        let rhs = if *self.peek() == Tok::Eq {
            self.bump();
            self.expr(0)?
        } else {
            Expr::Const(0.0)
        };
        Ok(Expr::Op("equals", vec![lhs, rhs]))
    }
}

/// Parses one equation (`lhs = rhs`, or a bare expression read as `expr = 0`).
pub fn parse_equation(text: &str) -> Result<Expr, SymbolicError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let eq = p.equation()?;
    match p.peek() {
        Tok::End => Ok(eq),
        other => Err(SymbolicError::Syntax {
            offset: p.offset(),
            message: format!("expected `;` or end of input, found {}", other.describe()),
        }),
    }
}

/// Parses a `;`-separated system of equations.
pub fn parse_system(text: &str) -> Result<Vec<Expr>, SymbolicError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let mut eqs = vec![p.equation()?];
    while *p.peek() == Tok::Semi {
        p.bump();
        eqs.push(p.equation()?);
    }
    match p.peek() {
        Tok::End => Ok(eqs),
        other => Err(SymbolicError::Syntax {
            offset: p.offset(),
            message: format!("expected `;` or end of input, found {}", other.describe()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(name: &'static str, args: Vec<Expr>) -> Expr {
        Expr::Op(name, args)
    }

    #[test]
    fn continuity_equation_tree() {
        let got = parse_equation("dt(h) + div(mul(h, u)) = 0").unwrap();
        let want = op(
            "equals",
            vec![
                op(
                    "add",
                    vec![
                        op("dt", vec![Expr::Sym("h")]),
                        op("div", vec![op("mul", vec![Expr::Sym("h"), Expr::Sym("u")])]),
                    ],
                ),
                Expr::Const(0.0),
            ],
        );
        assert_eq!(got, want);
    }

    #[test]
    fn infix_and_call_forms_agree() {
        assert_eq!(parse_equation("h*u = 0").unwrap(), parse_equation("mul(h, u) = 0").unwrap());
        assert_eq!(parse_equation("h/u = 0").unwrap(), parse_equation("divide(h, u) = 0").unwrap());
        assert_eq!(parse_equation("h - u = 0").unwrap(), parse_equation("sub(h, u) = 0").unwrap());
        assert_eq!(parse_equation("h^2 = 0").unwrap(), parse_equation("pow(h, 2) = 0").unwrap());
    }

    #[test]
    fn precedence_and_associativity() {
        // a + b*c parses as a + (b*c)
        assert_eq!(
            parse_equation("h + u*c").unwrap(),
            parse_equation("add(h, mul(u, c))").unwrap()
        );
        // power is right-associative: h^u^c = h^(u^c)
        assert_eq!(
            parse_equation("h^u^c").unwrap(),
            parse_equation("pow(h, pow(u, c))").unwrap()
        );
        // subtraction is left-associative: h - u - c = (h - u) - c
        assert_eq!(
            parse_equation("h - u - c").unwrap(),
            parse_equation("sub(sub(h, u), c)").unwrap()
        );
        // unary minus binds looser than ^ and tighter than *
        assert_eq!(parse_equation("-h^2").unwrap(), parse_equation("neg(pow(h, 2))").unwrap());
        assert_eq!(parse_equation("-h*u").unwrap(), parse_equation("mul(neg(h), u)").unwrap());
    }

    #[test]
    fn bare_expression_becomes_equals_zero() {
        let got = parse_equation("div(u)").unwrap();
        let want = op("equals", vec![op("div", vec![Expr::Sym("u")]), Expr::Const(0.0)]);
        assert_eq!(got, want);
    }

    #[test]
    fn truncated_input_reports_exact_offset() {
        match parse_equation("dt(h) + ") {
            Err(SymbolicError::Syntax { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_lists_vocabulary() {
        match parse_equation("dt(q) = 0") {
            Err(SymbolicError::UnknownIdentifier { offset, name, operators, symbols }) => {
                assert_eq!(offset, 3);
                assert_eq!(name, "q");
                assert!(operators.contains("grad"));
                assert!(symbols.contains("g_r"));
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
    }

    #[test]
    fn arity_mismatches_are_rejected() {
        assert!(matches!(parse_equation("dt(h, u) = 0"), Err(SymbolicError::Syntax { .. })));
        assert!(matches!(parse_equation("mul(h) = 0"), Err(SymbolicError::Syntax { .. })));
        assert!(matches!(parse_equation("dt = 0"), Err(SymbolicError::Syntax { .. })));
    }

    #[test]
    fn systems_split_on_semicolons() {
        let eqs = parse_system("div(u) = 0; dt(c) + div(c*u) = 0").unwrap();
        assert_eq!(eqs.len(), 2);
        assert_eq!(eqs[0], parse_equation("div(u) = 0").unwrap());
        assert_eq!(eqs[1], parse_equation("dt(c) + div(c*u) = 0").unwrap());
    }

    #[test]
    fn scientific_notation_constants() {
        let got = parse_equation("h = 2.5e-3").unwrap();
        assert_eq!(got, op("equals", vec![Expr::Sym("h"), Expr::Const(0.0025)]));
        let got = parse_equation("h = 1E4").unwrap();
        assert_eq!(got, op("equals", vec![Expr::Sym("h"), Expr::Const(10000.0)]));
    }

    #[test]
    fn whitespace_is_insignificant() {
        assert_eq!(
            parse_equation("dt( h )+div( h\t*u )\n= 0").unwrap(),
            parse_equation("dt(h)+div(h*u)=0").unwrap()
        );
    }

    #[test]
    fn stray_tokens_after_equation_are_rejected() {
        assert!(matches!(parse_equation("h = 0 )"), Err(SymbolicError::Syntax { .. })));
        assert!(matches!(parse_equation("h = 0 = 0"), Err(SymbolicError::Syntax { .. })));
    }
}
