//! Arithmetic calculator: `+ - * /` (with `×`/`÷` accepted), parentheses,
//! decimal literals, unary minus. Standard precedence via recursive descent.

use super::{Tool, ToolError, ToolSpec};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalcError {
    #[error("parse error at char {position}: {detail}")]
    Parse { position: usize, detail: String },
    #[error("division by zero")]
    DivisionByZero,
}

/// Evaluates an arithmetic expression.
pub fn calculate(expression: &str) -> Result<f64, CalcError> {
    let chars: Vec<char> = expression.chars().collect();
    let mut p = Parser { chars, pos: 0 };
    let value = p.expr()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error("trailing input"));
    }
    Ok(value)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn error(&self, detail: &str) -> CalcError {
        CalcError::Parse {
            position: self.pos,
            detail: detail.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, options: &[char]) -> Option<char> {
        self.skip_ws();
        let c = self.peek()?;
        options.contains(&c).then(|| {
            self.pos += 1;
            c
        })
    }

    fn expr(&mut self) -> Result<f64, CalcError> {
        let mut value = self.term()?;
        while let Some(op) = self.eat(&['+', '-', '−']) {
            let rhs = self.term()?;
            if op == '+' {
                value += rhs;
            } else {
                value -= rhs;
            }
        }
        Ok(value)
    }

    fn term(&mut self) -> Result<f64, CalcError> {
        let mut value = self.factor()?;
        while let Some(op) = self.eat(&['*', '×', '/', '÷']) {
            let rhs = self.factor()?;
            if op == '*' || op == '×' {
                value *= rhs;
            } else {
                if rhs == 0.0 {
                    return Err(CalcError::DivisionByZero);
                }
                value /= rhs;
            }
        }
        Ok(value)
    }

    fn factor(&mut self) -> Result<f64, CalcError> {
        if self.eat(&['-', '−']).is_some() {
            return Ok(-self.factor()?);
        }
        if self.eat(&['(']).is_some() {
            let value = self.expr()?;
            if self.eat(&[')']).is_none() {
                return Err(self.error("expected `)`"));
            }
            return Ok(value);
        }
        self.number()
    }

    fn number(&mut self) -> Result<f64, CalcError> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some('.') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if self.pos == start {
            return Err(match self.peek() {
                Some(c) => self.error(&format!("unexpected `{c}`")),
                None => self.error("unexpected end of expression"),
            });
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse()
            .map_err(|_| self.error(&format!("bad number `{text}`")))
    }
}

/// The calculator as a registry tool. Results print without a trailing
/// fraction when they are whole.
pub struct CalcTool {
    spec: ToolSpec,
}

impl CalcTool {
    pub fn new() -> Self {
        CalcTool {
            spec: ToolSpec {
                name: "calculate".to_string(),
                description: "Evaluate an arithmetic expression".to_string(),
                concurrency_safe: true,
            },
        }
    }
}

impl Default for CalcTool {
    fn default() -> Self {
        CalcTool::new()
    }
}

impl Tool for CalcTool {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn invoke(&self, query: &str) -> Result<String, ToolError> {
        let value = calculate(query)?;
        if value.fract() == 0.0 && value.abs() < 1e15 {
            Ok(format!("{}", value as i64))
        } else {
            Ok(format!("{value}"))
        }
    }
}
