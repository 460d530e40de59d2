//! `metric OP bound` expressions for `--assert`.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Ge,
    Gt,
    Le,
    Lt,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Ge => ">=",
            Op::Gt => ">",
            Op::Le => "<=",
            Op::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub metric: String,
    pub op: Op,
    pub bound: f64,
}

impl Assertion {
    /// An undefined metric never satisfies a bound.
    pub fn holds(&self, value: Option<f64>) -> bool {
        let Some(v) = value else { return false };
        match self.op {
            Op::Ge => v >= self.bound,
            Op::Gt => v > self.bound,
            Op::Le => v <= self.bound,
            Op::Lt => v < self.bound,
        }
    }
}

impl FromStr for Assertion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        // two-character operators first so `>=` is not read as `>`
        for op in [Op::Ge, Op::Le, Op::Gt, Op::Lt] {
            if let Some((metric, bound)) = s.split_once(op.symbol()) {
                let metric = metric.trim();
                if metric.is_empty() {
                    return Err(format!("{s:?} names no metric"));
                }
                let bound = bound
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bound in {s:?} is not a number"))?;
                return Ok(Assertion {
                    metric: metric.to_string(),
                    op,
                    bound,
                });
            }
        }
        Err(format!("{s:?} has no comparison (>=, >, <=, <)"))
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.metric, self.op.symbol(), self.bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_checks() {
        let a: Assertion = "gap(full,binary) >= 0.02".parse().unwrap();
        assert_eq!(a.metric, "gap(full,binary)");
        assert_eq!(a.op, Op::Ge);
        assert!(a.holds(Some(0.02)));
        assert!(!a.holds(Some(0.01)));
        assert!(!a.holds(None));
        let b: Assertion = "auc<0.5".parse().unwrap();
        assert_eq!(b.op, Op::Lt);
        assert!("auc".parse::<Assertion>().is_err());
        assert!("auc>=x".parse::<Assertion>().is_err());
    }
}
