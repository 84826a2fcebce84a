//! Guard expressions attached to conditional sequence flows.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! or      := and ( "||" and )*
//! and     := unary ( "&&" unary )*
//! unary   := "!" unary | compare
//! compare := primary ( ("==" | "!=" | "<" | "<=" | ">" | ">=") primary )?
//! primary := number | string | "true" | "false" | field | "(" or ")"
//! ```
//!
//! Strings use single or double quotes. A field is an identifier
//! (`[A-Za-z_][A-Za-z0-9_.]*`) looked up in the payload object.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Text(String),
    Bool(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Literal),
    Field(String),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
}

/// A parsed guard. Serializes as its canonical text form.
#[derive(Debug, Clone, PartialEq)]
pub struct Guard(pub Expr);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardError {
    #[error("guard syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("guard references missing payload field `{0}`")]
    MissingField(String),
    #[error("guard type error: {0}")]
    Type(String),
}

impl Guard {
    pub fn always() -> Self {
        Guard(Expr::Lit(Literal::Bool(true)))
    }

    pub fn parse(text: &str) -> Result<Self, GuardError> {
        let tokens = lex(text)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.or()?;
        if let Some((offset, tok)) = parser.tokens.get(parser.pos) {
            return Err(GuardError::Syntax {
                offset: *offset,
                message: format!("unexpected trailing token {tok:?}"),
            });
        }
        Ok(Guard(expr))
    }

    /// Payload field names the guard reads.
    pub fn fields(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        collect_fields(&self.0, &mut out);
        out
    }

    /// Evaluates against a JSON payload object. Missing fields are errors,
    /// never a silent `false`.
    pub fn eval(&self, payload: &Json) -> Result<bool, GuardError> {
        match eval(&self.0, payload)? {
            Literal::Bool(b) => Ok(b),
            other => Err(GuardError::Type(format!(
                "guard evaluated to non-boolean {other:?}"
            ))),
        }
    }
}

fn collect_fields(expr: &Expr, out: &mut BTreeSet<String>) {
    match expr {
        Expr::Lit(_) => {}
        Expr::Field(name) => {
            out.insert(name.clone());
        }
        Expr::Not(e) => collect_fields(e, out),
        Expr::And(a, b) | Expr::Or(a, b) | Expr::Cmp(_, a, b) => {
            collect_fields(a, out);
            collect_fields(b, out);
        }
    }
}

fn lookup<'a>(payload: &'a Json, path: &str) -> Option<&'a Json> {
    let mut cur = payload;
    for part in path.split('.') {
        cur = cur.as_object()?.get(part)?;
    }
    Some(cur)
}

fn eval(expr: &Expr, payload: &Json) -> Result<Literal, GuardError> {
    Ok(match expr {
        Expr::Lit(l) => l.clone(),
        Expr::Field(name) => {
            let v = lookup(payload, name).ok_or_else(|| GuardError::MissingField(name.clone()))?;
            match v {
                Json::Bool(b) => Literal::Bool(*b),
                Json::Number(n) => Literal::Number(n.as_f64().unwrap_or(f64::NAN)),
                Json::String(s) => Literal::Text(s.clone()),
                other => {
                    return Err(GuardError::Type(format!(
                        "field `{name}` has unsupported value {other}"
                    )))
                }
            }
        }
        Expr::Not(e) => Literal::Bool(!as_bool(eval(e, payload)?)?),
        Expr::And(a, b) => {
            // both sides are evaluated so a missing field is always reported
            let l = as_bool(eval(a, payload)?)?;
            let r = as_bool(eval(b, payload)?)?;
            Literal::Bool(l && r)
        }
        Expr::Or(a, b) => {
            let l = as_bool(eval(a, payload)?)?;
            let r = as_bool(eval(b, payload)?)?;
            Literal::Bool(l || r)
        }
        Expr::Cmp(op, a, b) => {
            let l = eval(a, payload)?;
            let r = eval(b, payload)?;
            Literal::Bool(compare(*op, &l, &r)?)
        }
    })
}

fn as_bool(l: Literal) -> Result<bool, GuardError> {
    match l {
        Literal::Bool(b) => Ok(b),
        other => Err(GuardError::Type(format!("expected boolean, found {other:?}"))),
    }
}

fn compare(op: CmpOp, l: &Literal, r: &Literal) -> Result<bool, GuardError> {
    use std::cmp::Ordering;
    let ord: Option<Ordering> = match (l, r) {
        (Literal::Number(a), Literal::Number(b)) => a.partial_cmp(b),
        (Literal::Text(a), Literal::Text(b)) => Some(a.cmp(b)),
        (Literal::Bool(a), Literal::Bool(b)) => {
            if matches!(op, CmpOp::Eq | CmpOp::Ne) {
                Some(a.cmp(b))
            } else {
                return Err(GuardError::Type("booleans only support == and !=".into()));
            }
        }
        _ => {
            return Err(GuardError::Type(format!(
                "cannot compare {l:?} with {r:?}"
            )))
        }
    };
    let Some(ord) = ord else {
        return Ok(matches!(op, CmpOp::Ne));
    };
    Ok(match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Str(String),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, GuardError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        match c {
            '(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            '\'' | '"' => {
                let quote = c;
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(&b) = bytes.get(i) else {
                        return Err(GuardError::Syntax {
                            offset: start,
                            message: "unterminated string".into(),
                        });
                    };
                    let ch = b as char;
                    if ch == quote {
                        i += 1;
                        break;
                    }
                    if ch == '\\' {
                        let Some(&n) = bytes.get(i + 1) else {
                            return Err(GuardError::Syntax {
                                offset: i,
                                message: "dangling escape".into(),
                            });
                        };
                        s.push(n as char);
                        i += 2;
                        continue;
                    }
                    // keep multi-byte UTF-8 sequences intact
                    let ch_len = text[i..].chars().next().map(char::len_utf8).unwrap_or(1);
                    s.push_str(&text[i..i + ch_len]);
                    i += ch_len;
                }
                out.push((start, Tok::Str(s)));
            }
            '0'..='9' | '-' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.' || bytes[i] == b'e' || bytes[i] == b'E') {
                    i += 1;
                }
                let lit = &text[start..i];
                let n: f64 = lit.parse().map_err(|_| GuardError::Syntax {
                    offset: start,
                    message: format!("bad number `{lit}`"),
                })?;
                out.push((start, Tok::Num(n)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                i += 1;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
                {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
            }
            _ => {
                const OPS: [&str; 9] = ["==", "!=", "<=", ">=", "&&", "||", "<", ">", "!"];
                let rest = &text[i..];
                let Some(op) = OPS.iter().find(|op| rest.starts_with(**op)) else {
                    return Err(GuardError::Syntax {
                        offset: start,
                        message: format!("unexpected character `{c}`"),
                    });
                };
                out.push((start, Tok::Op(op)));
                i += op.len();
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or_else(|| self.tokens.last().map(|(o, _)| *o + 1).unwrap_or(0))
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Op(o)) if *o == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Expr, GuardError> {
        let mut lhs = self.and()?;
        while self.eat_op("||") {
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, GuardError> {
        let mut lhs = self.unary()?;
        while self.eat_op("&&") {
            let rhs = self.unary()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, GuardError> {
        if self.eat_op("!") {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.compare()
    }

    fn compare(&mut self) -> Result<Expr, GuardError> {
        let lhs = self.primary()?;
        let op = match self.peek() {
            Some(Tok::Op("==")) => CmpOp::Eq,
            Some(Tok::Op("!=")) => CmpOp::Ne,
            Some(Tok::Op("<")) => CmpOp::Lt,
            Some(Tok::Op("<=")) => CmpOp::Le,
            Some(Tok::Op(">")) => CmpOp::Gt,
            Some(Tok::Op(">=")) => CmpOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.primary()?;
        Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)))
    }

    fn primary(&mut self) -> Result<Expr, GuardError> {
        let offset = self.offset();
        let Some(tok) = self.tokens.get(self.pos).map(|(_, t)| t.clone()) else {
            return Err(GuardError::Syntax {
                offset,
                message: "unexpected end of expression".into(),
            });
        };
        self.pos += 1;
        match tok {
            Tok::Num(n) => Ok(Expr::Lit(Literal::Number(n))),
            Tok::Str(s) => Ok(Expr::Lit(Literal::Text(s))),
            Tok::Ident(id) if id == "true" => Ok(Expr::Lit(Literal::Bool(true))),
            Tok::Ident(id) if id == "false" => Ok(Expr::Lit(Literal::Bool(false))),
            Tok::Ident(id) => Ok(Expr::Field(id)),
            Tok::LParen => {
                let inner = self.or()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(GuardError::Syntax {
                        offset: self.offset(),
                        message: "expected `)`".into(),
                    });
                }
                self.pos += 1;
                Ok(inner)
            }
            other => Err(GuardError::Syntax {
                offset,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Text(s) => {
                write!(f, "'")?;
                for ch in s.chars() {
                    if ch == '\'' || ch == '\\' {
                        write!(f, "\\")?;
                    }
                    write!(f, "{ch}")?;
                }
                write!(f, "'")
            }
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(l) => write!(f, "{l}"),
            Expr::Field(name) => write!(f, "{name}"),
            Expr::Not(e) => write!(f, "!({e})"),
            Expr::And(a, b) => write!(f, "({a} && {b})"),
            Expr::Or(a, b) => write!(f, "({a} || {b})"),
            Expr::Cmp(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Serialize for Guard {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Guard {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Guard::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn precedence_and_eval() {
        let g = Guard::parse("qty > 10 && express || region == 'EU'").unwrap();
        assert!(g.eval(&json!({"qty": 11, "express": true, "region": "US"})).unwrap());
        assert!(g.eval(&json!({"qty": 1, "express": true, "region": "EU"})).unwrap());
        assert!(!g.eval(&json!({"qty": 1, "express": true, "region": "US"})).unwrap());
    }

    #[test]
    fn missing_field_is_an_error() {
        let g = Guard::parse("qty >= 3").unwrap();
        assert_eq!(
            g.eval(&json!({})),
            Err(GuardError::MissingField("qty".into()))
        );
        // short-circuit does not hide a missing field
        let g = Guard::parse("false && qty > 1").unwrap();
        assert!(g.eval(&json!({})).is_err());
    }

    #[test]
    fn display_round_trips() {
        for text in [
            "true",
            "!(a == 'x\\'y')",
            "(a < 1.5) || (b != false)",
            "nested.field >= -3",
        ] {
            let g = Guard::parse(text).unwrap();
            let again = Guard::parse(&g.to_string()).unwrap();
            assert_eq!(g, again, "{text}");
        }
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(Guard::parse("a =="), Err(GuardError::Syntax { .. })));
        assert!(matches!(Guard::parse("(a"), Err(GuardError::Syntax { .. })));
        assert!(matches!(Guard::parse("a # b"), Err(GuardError::Syntax { .. })));
        assert!(matches!(Guard::parse("'open"), Err(GuardError::Syntax { .. })));
    }

    #[test]
    fn type_errors() {
        let g = Guard::parse("qty < 'x'").unwrap();
        assert!(matches!(g.eval(&json!({"qty": 1})), Err(GuardError::Type(_))));
        let g = Guard::parse("qty").unwrap();
        assert!(matches!(g.eval(&json!({"qty": 1})), Err(GuardError::Type(_))));
    }

    #[test]
    fn fields_collected() {
        let g = Guard::parse("a > 1 && !(b == c)").unwrap();
        let f: Vec<_> = g.fields().into_iter().collect();
        assert_eq!(f, vec!["a", "b", "c"]);
    }
}
