//! The closed token vocabulary.
//!
//! The id bijection ships as a versioned JSON asset so that serialized
//! datasets stay decodable; arities live here in code because they define
//! the tree grammar, not the id assignment. Unknown names are hard errors
//! everywhere — there is no catch-all token.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::SymbolicError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Operators and named functions with their arities. `div` is divergence
/// (one argument); the binary `/` of the surface grammar is `divide`.
pub const OPERATORS: &[(&str, usize)] = &[
    ("equals", 2),
    ("add", 2),
    ("sub", 2),
    ("mul", 2),
    ("divide", 2),
    ("pow", 2),
    ("neg", 1),
    ("dt", 1),
    ("dx", 1),
    ("dy", 1),
    ("div", 1),
    ("grad", 1),
    ("lap", 1),
    ("sin", 1),
    ("cos", 1),
    ("tan", 1),
    ("exp", 1),
    ("log", 1),
    ("sqrt", 1),
    ("abs", 1),
];

/// Field and coefficient names appearing in the supported equation systems.
pub const SYMBOLS: &[&str] = &[
    "h", "u", "u_x", "u_y", "b", "g_r", "rho", "p", "mu", "F", "c", "eta", "zeta", "epsilon",
    "sigma", "f", "nu", "x", "y", "t",
];

pub fn operator_arity(name: &str) -> Option<usize> {
    OPERATORS.iter().find(|(n, _)| *n == name).map(|&(_, a)| a)
}

pub fn is_symbol(name: &str) -> bool {
    SYMBOLS.contains(&name)
}

/// Interns an identifier against the static tables so trees hold
/// `&'static str` names.
pub fn intern(name: &str) -> Option<&'static str> {
    OPERATORS
        .iter()
        .map(|&(n, _)| n)
        .chain(SYMBOLS.iter().copied())
        .find(|&n| n == name)
}

pub struct Vocabulary {
    version: u32,
    id_of: HashMap<String, u32>,
    name_of: Vec<String>,
}

impl Vocabulary {
    /// The vocabulary shipped with the crate.
    pub fn builtin() -> &'static Vocabulary {
        static BUILTIN: OnceLock<Vocabulary> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            Vocabulary::from_json(include_str!("../../assets/vocabulary.json"))
                .expect("shipped vocabulary must be valid")
        })
    }

    pub fn from_json(text: &str) -> Result<Self, SymbolicError> {
        #[derive(serde::Deserialize)]
        struct File {
            version: u32,
            tokens: HashMap<String, u32>,
        }
        let file: File =
            serde_json::from_str(text).map_err(|e| SymbolicError::BadVocabulary(e.to_string()))?;
        let n = file.tokens.len();
        let mut name_of = vec![String::new(); n];
        for (name, &id) in &file.tokens {
            if id as usize >= n {
                return Err(SymbolicError::BadVocabulary(format!(
                    "id {id} of `{name}` outside dense range 0..{n}"
                )));
            }
            if !name_of[id as usize].is_empty() {
                return Err(SymbolicError::BadVocabulary(format!(
                    "id {id} assigned to both `{}` and `{name}`",
                    name_of[id as usize]
                )));
            }
            name_of[id as usize] = name.clone();
        }
        for (fixed, want) in [(PAD, "<pad>"), (BOS, "<bos>"), (EOS, "<eos>")] {
            if name_of[fixed as usize] != want {
                return Err(SymbolicError::BadVocabulary(format!(
                    "id {fixed} must be `{want}`, found `{}`",
                    name_of[fixed as usize]
                )));
            }
        }
        for (op, _) in OPERATORS {
            if !file.tokens.contains_key(*op) {
                return Err(SymbolicError::BadVocabulary(format!("operator `{op}` missing")));
            }
        }
        for sym in SYMBOLS {
            if !file.tokens.contains_key(*sym) {
                return Err(SymbolicError::BadVocabulary(format!("symbol `{sym}` missing")));
            }
        }
        Ok(Self { version: file.version, id_of: file.tokens, name_of })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.name_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.name_of.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.id_of.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.name_of.get(id as usize).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_a_dense_bijection_with_reserved_specials() {
        let v = Vocabulary::builtin();
        assert_eq!(v.version(), 1);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        for id in 0..v.len() as u32 {
            let name = v.name(id).expect("dense ids");
            assert_eq!(v.id(name), Some(id), "bijection broken at {name}");
        }
        assert_eq!(v.name(v.len() as u32), None);
    }

    #[test]
    fn builtin_covers_operators_symbols_and_constant_tokens() {
        let v = Vocabulary::builtin();
        for (op, _) in OPERATORS {
            assert!(v.id(op).is_some(), "missing operator {op}");
        }
        for sym in SYMBOLS {
            assert!(v.id(sym).is_some(), "missing symbol {sym}");
        }
        for tok in ["<c+>", "<c->", "<c0>", "<m100>", "<m999>", "<cE-10>", "<cE0>", "<cE10>"] {
            assert!(v.id(tok).is_some(), "missing constant token {tok}");
        }
        // 3 specials + operators + symbols + 3 signs + 900 mantissas + 21 exponents
        assert_eq!(v.len(), 3 + OPERATORS.len() + SYMBOLS.len() + 3 + 900 + 21);
    }

    #[test]
    fn duplicate_or_sparse_ids_are_rejected() {
        let dup = r#"{"version":1,"tokens":{"<pad>":0,"<bos>":0}}"#;
        assert!(matches!(Vocabulary::from_json(dup), Err(SymbolicError::BadVocabulary(_))));
        let sparse = r#"{"version":1,"tokens":{"<pad>":0,"<bos>":5}}"#;
        assert!(matches!(Vocabulary::from_json(sparse), Err(SymbolicError::BadVocabulary(_))));
    }

    #[test]
    fn div_is_unary_divergence_and_divide_is_binary() {
        assert_eq!(operator_arity("div"), Some(1));
        assert_eq!(operator_arity("divide"), Some(2));
        assert_eq!(operator_arity("equals"), Some(2));
        assert_eq!(operator_arity("h"), None);
        assert!(is_symbol("g_r"));
        assert!(!is_symbol("div"));
    }
}
