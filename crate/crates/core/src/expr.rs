//! Minimal scalar expressions in the variable `t` for config-driven per-node
//! functions: numbers, `t`, `+ - * / ^`, parentheses, and the functions
//! `exp`, `sin`, `cos`, `sqrt`.

use crate::error::{Result, SvieError};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var,
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Fun(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
}

/// Parsed scalar expression, evaluated at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarExpr {
    source: String,
    root: Node,
}

impl ScalarExpr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(SvieError::Expr(format!(
                "trailing input at token {} in '{src}'",
                p.pos
            )));
        }
        Ok(Self {
            source: src.to_string(),
            root,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        eval(&self.root, t)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

fn eval(node: &Node, t: f64) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var => t,
        Node::Add(a, b) => eval(a, t) + eval(b, t),
        Node::Sub(a, b) => eval(a, t) - eval(b, t),
        Node::Mul(a, b) => eval(a, t) * eval(b, t),
        Node::Div(a, b) => eval(a, t) / eval(b, t),
        Node::Pow(a, b) => eval(a, t).powf(eval(b, t)),
        Node::Neg(a) => -eval(a, t),
        Node::Fun(f, a) => {
            let v = eval(a, t);
            match f {
                Func::Exp => v.exp(),
                Func::Sin => v.sin(),
                Func::Cos => v.cos(),
                Func::Sqrt => v.sqrt(),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '+' || chars[i] == '-')
                            && i > start
                            && (chars[i - 1] == 'e' || chars[i - 1] == 'E')))
                {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let v = s
                    .parse::<f64>()
                    .map_err(|_| SvieError::Expr(format!("bad number '{s}'")))?;
                out.push(Tok::Num(v));
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(SvieError::Expr(format!("unexpected character '{other}'"))),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<Node> {
        let mut node = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut node = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    node = Node::Mul(Box::new(node), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    node = Node::Div(Box::new(node), Box::new(self.factor()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.factor()?)))
            }
            _ => {
                let base = self.atom()?;
                if let Some(Tok::Caret) = self.peek() {
                    self.pos += 1;
                    let exp = self.factor()?;
                    Ok(Node::Pow(Box::new(base), Box::new(exp)))
                } else {
                    Ok(base)
                }
            }
        }
    }

    fn atom(&mut self) -> Result<Node> {
        match self.tokens.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if name == "t" {
                    return Ok(Node::Var);
                }
                let f = match name.as_str() {
                    "exp" => Func::Exp,
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "sqrt" => Func::Sqrt,
                    other => {
                        return Err(SvieError::Expr(format!("unknown identifier '{other}'")))
                    }
                };
                match self.peek() {
                    Some(Tok::LParen) => {
                        self.pos += 1;
                        let arg = self.expr()?;
                        match self.peek() {
                            Some(Tok::RParen) => {
                                self.pos += 1;
                                Ok(Node::Fun(f, Box::new(arg)))
                            }
                            _ => Err(SvieError::Expr("expected ')'".into())),
                        }
                    }
                    _ => Err(SvieError::Expr(format!("expected '(' after '{name}'"))),
                }
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(SvieError::Expr("expected ')'".into())),
                }
            }
            other => Err(SvieError::Expr(format!("unexpected token {other:?}"))),
        }
    }
}
