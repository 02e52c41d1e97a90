//! Arithmetic expressions over state variables `x1..xn`, for user-supplied
//! vector fields. Grammar: `+ - * / ^`, unary minus, parentheses, decimal
//! literals, and the functions `sin cos tanh sqrt exp`. `^` binds tightest
//! and is right-associative; `-x^2` is `-(x^2)`.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Exp,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "tanh" => Self::Tanh,
            "sqrt" => Self::Sqrt,
            "exp" => Self::Exp,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Sin => v.sin(),
            Self::Cos => v.cos(),
            Self::Tanh => v.tanh(),
            Self::Sqrt => v.sqrt(),
            Self::Exp => v.exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression in `dim` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    root: Node,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at character {}: {}", self.position + 1, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // Exponent part: e.g. 1e-3, 2.5E+4.
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| ParseError { position: start, message: format!("bad number `{text}`") })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start, Tok::Ident(chars[start..i].iter().collect())));
        } else if "+-*/^".contains(c) {
            out.push((start, Tok::Op(c)));
            i += 1;
        } else if c == '(' {
            out.push((start, Tok::LParen));
            i += 1;
        } else if c == ')' {
            out.push((start, Tok::RParen));
            i += 1;
        } else {
            return Err(ParseError { position: start, message: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { position: self.here(), message: message.into() })
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { Node::Add(lhs.into(), rhs.into()) } else { Node::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' { Node::Mul(lhs.into(), rhs.into()) } else { Node::Div(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(self.unary()?.into()))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            // Right-associative, and the exponent may carry a sign: 2^-1.
            let exp = self.unary()?;
            return Ok(Node::Pow(base.into(), exp.into()));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return self.err("unexpected end of expression");
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Tok::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    self.pos += 1;
                    if self.peek() != Some(&Tok::LParen) {
                        return self.err(format!("`{name}` must be followed by `(`"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Node::Call(func, arg.into()));
                }
                let index = name
                    .strip_prefix('x')
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1 && k <= self.dim);
                match index {
                    Some(k) => {
                        self.pos += 1;
                        Ok(Node::Var(k - 1))
                    }
                    None => self.err(format!(
                        "unknown name `{name}` (variables are x1..x{}, functions sin cos tanh sqrt exp)",
                        self.dim
                    )),
                }
            }
            Tok::RParen => self.err("unexpected `)`"),
            Tok::Op(c) => self.err(format!("unexpected `{c}`")),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if self.peek() == Some(&Tok::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.err("expected `)`")
        }
    }
}

impl Expr {
    pub fn parse(src: &str, dim: usize) -> Result<Self, ParseError> {
        let toks = tokenize(src)?;
        let mut p = Parser { toks, pos: 0, end: src.chars().count(), dim };
        let root = p.expr()?;
        if p.pos < p.toks.len() {
            return p.err("trailing input");
        }
        Ok(Self { root })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        eval(&self.root, x)
    }
}

fn eval(n: &Node, x: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(i) => x[*i],
        Node::Neg(a) => -eval(a, x),
        Node::Add(a, b) => eval(a, x) + eval(b, x),
        Node::Sub(a, b) => eval(a, x) - eval(b, x),
        Node::Mul(a, b) => eval(a, x) * eval(b, x),
        Node::Div(a, b) => eval(a, x) / eval(b, x),
        Node::Pow(a, b) => match **b {
            Node::Num(e) if e.fract() == 0.0 && e.abs() <= 64.0 => eval(a, x).powi(e as i32),
            _ => eval(a, x).powf(eval(b, x)),
        },
        Node::Call(f, a) => f.apply(eval(a, x)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, x: &[f64]) -> f64 {
        Expr::parse(src, x.len()).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", &[]), 7.0);
        assert_eq!(ev("(1 + 2) * 3", &[]), 9.0);
        assert_eq!(ev("2 ^ 3 ^ 2", &[]), 512.0);
        assert_eq!(ev("-x1^2", &[3.0]), -9.0);
        assert_eq!(ev("2^-1", &[]), 0.5);
        assert_eq!(ev("8 / 4 / 2", &[]), 1.0);
        assert_eq!(ev("7 - 2 - 1", &[]), 4.0);
        assert_eq!(ev("2*-x1", &[1.5]), -3.0);
        assert_eq!(ev("1e-3 * 2.5E2", &[]), 0.25);
    }

    #[test]
    fn saddle_field_matches_closed_form() {
        let x = [0.7, -1.3];
        assert_eq!(ev("-x1^3 - 0.5*x2", &x), -x[0] * x[0] * x[0] - 0.5 * x[1]);
        assert_eq!(ev("-2*x1 + 3*x1^2*x2", &x), -2.0 * x[0] + 3.0 * x[0] * x[0] * x[1]);
        assert_eq!(ev("sin(x1) + cos(x2) * tanh(x1) / sqrt(exp(x2))", &x), x[0].sin() + x[1].cos() * x[0].tanh() / x[1].exp().sqrt());
    }

    #[test]
    fn errors_point_at_the_problem() {
        let e = Expr::parse("3*(x1", 2).unwrap_err();
        assert_eq!(e.position, 5);
        assert!(Expr::parse("x3", 2).unwrap_err().message.contains("unknown name"));
        assert!(Expr::parse("log(x1)", 2).is_err());
        assert!(Expr::parse("x1 x2", 2).unwrap_err().message.contains("trailing"));
        assert!(Expr::parse("sin x1", 2).is_err());
        assert!(Expr::parse("", 2).is_err());
        assert!(Expr::parse("1 $ 2", 2).unwrap_err().message.contains('$'));
    }

    proptest! {
        #[test]
        fn polynomial_agrees_with_direct_evaluation(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -3.0f64..3.0) {
            let src = format!("{a} * x1^2 - {b} * x1 * x2 + ({c})^3");
            let x = [0.3, -1.7];
            let want = a * x[0] * x[0] - b * x[0] * x[1] + c * c * c;
            prop_assert!((ev(&src, &x) - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}
