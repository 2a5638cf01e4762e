use serde::Serialize;

use crate::error::Result;

use super::{ElNet, ModelConfig, MAX_DEPTH};

/// Per-row trainable parameters as `a·K² + b·K + c`.
const ROWS: [(&str, [usize; 3]); 2 + 2 * MAX_DEPTH + 1] = [
    ("7x7 Conv, 4K", [0, 196, 0]),
    ("Normalization", [0, 8, 0]),
    ("Block [5x5] x2", [800, 16, 0]),
    ("5x5 Conv, 8K", [800, 0, 0]),
    ("Block [3x3] x2", [1152, 32, 0]),
    ("3x3 Conv, 16K", [1152, 0, 0]),
    ("Block [3x3]", [2304, 32, 0]),
    ("3x3 Conv, 16K", [2304, 0, 0]),
    ("Block [3x3]", [2304, 32, 0]),
    ("3x3 Conv, 16K", [2304, 0, 0]),
    ("Fully Connected", [0, 32, 2]),
];

/// One architecture row: the parameters actually allocated next to the
/// closed-form subtotal for that row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub layer: String,
    pub formula: String,
    pub expected: usize,
    pub enumerated: usize,
}

impl AuditRow {
    pub fn ok(&self) -> bool {
        self.expected == self.enumerated
    }
}

/// `13120 K² + 348 K + 2`.
pub fn closed_form_param_count(k: usize) -> usize {
    13120 * k * k + 348 * k + 2
}

fn formula([a, b, c]: [usize; 3]) -> String {
    let mut terms = Vec::new();
    if a > 0 {
        terms.push(format!("{a}K^2"));
    }
    if b > 0 {
        terms.push(format!("{b}K"));
    }
    if c > 0 {
        terms.push(c.to_string());
    }
    terms.join(" + ")
}

/// Enumerates the parameters of a full-depth network of width `k`, row by
/// row.
pub fn param_audit(k: usize) -> Result<Vec<AuditRow>> {
    let net = ElNet::new(ModelConfig::with_k(k))?;
    let mut enumerated = [0usize; ROWS.len()];
    for (info, p) in net.layout().iter().zip(net.params()) {
        enumerated[info.row] += p.numel();
    }
    Ok(ROWS
        .iter()
        .zip(enumerated)
        .map(|((layer, coef), n)| AuditRow {
            layer: layer.to_string(),
            formula: formula(*coef),
            expected: coef[0] * k * k + coef[1] * k + coef[2],
            enumerated: n,
        })
        .collect())
}
