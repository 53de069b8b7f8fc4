//! Can a passive party solve for the parameters of a masked layer from the
//! layer inputs and outputs it sees during one batch?
//!
//! For a fully connected layer the system `C = W·Aᵀ` has a unique solution
//! only when the batch has at least as many rows as the layer has inputs. For
//! a single-channel convolution the output map must have at least as many
//! positions as the kernel has weights.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::vertical_widths;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Secure,
    Reconstructible,
}

impl Verdict {
    pub fn is_secure(self) -> bool {
        self == Verdict::Secure
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcAuditInput {
    pub batch_size: usize,
    pub input_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAuditInput {
    pub input_size: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
}

/// Secure iff `B < n₁`.
pub fn check_fc(inp: FcAuditInput) -> Verdict {
    if inp.batch_size < inp.input_dim {
        Verdict::Secure
    } else {
        Verdict::Reconstructible
    }
}

/// Secure iff `n > (h + 2p + s) / (s + 1)`, compared without division.
pub fn check_conv(inp: ConvAuditInput) -> Verdict {
    let ConvAuditInput {
        input_size: h,
        kernel_size: n,
        padding: p,
        stride: s,
    } = inp;
    if n * (s + 1) > h + 2 * p + s {
        Verdict::Secure
    } else {
        Verdict::Reconstructible
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub party: u32,
    /// 1-based layer number within the bottom model.
    pub layer: usize,
    pub batch_size: usize,
    pub input_dim: usize,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub layers: Vec<LayerAudit>,
}

impl AuditReport {
    pub fn warnings(&self) -> impl Iterator<Item = &LayerAudit> {
        self.layers.iter().filter(|l| !l.verdict.is_secure())
    }

    pub fn is_secure(&self) -> bool {
        self.warnings().next().is_none()
    }
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.layers {
            writeln!(
                f,
                "party {} layer {}: B={} n1={} -> {:?}",
                l.party, l.layer, l.batch_size, l.input_dim, l.verdict
            )?;
        }
        let bad = self.warnings().count();
        write!(f, "{} layers checked, {} reconstructible", self.layers.len(), bad)
    }
}

/// FC verdicts for every layer of passive bottom models with the given input
/// widths (`dims[k]` is the full width chain of party `k`).
pub fn audit_layers(dims: &[Vec<usize>], batch_size: usize) -> AuditReport {
    let mut layers = Vec::new();
    for (k, chain) in dims.iter().enumerate() {
        for (j, &n1) in chain.iter().take(chain.len().saturating_sub(1)).enumerate() {
            let verdict = check_fc(FcAuditInput {
                batch_size,
                input_dim: n1,
            });
            layers.push(LayerAudit {
                party: k as u32,
                layer: j + 1,
                batch_size,
                input_dim: n1,
                verdict,
            });
        }
    }
    AuditReport { layers }
}

/// Audits every maskable layer of a run. `feature_dim` is the full feature
/// width before the vertical split.
pub fn audit_config(cfg: &RunConfig, feature_dim: usize) -> crate::error::Result<AuditReport> {
    let widths = vertical_widths(feature_dim, cfg.parties)?;
    let dims: Vec<Vec<usize>> = widths[..cfg.parties - 1]
        .iter()
        .map(|&w| std::iter::once(w).chain(cfg.bottom_widths.iter().copied()).collect())
        .collect();
    Ok(audit_layers(&dims, cfg.batch_size))
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(rows: &[Vec<f64>], tol: f64) -> usize {
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    let cols = m.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        let Some(pivot) = (rank..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())) else {
            break;
        };
        if m[pivot][c].abs() <= tol {
            continue;
        }
        m.swap(rank, pivot);
        let pivot_row = m[rank].clone();
        for (r, row) in m.iter_mut().enumerate() {
            let factor = row[c] / pivot_row[c];
            if r != rank && factor != 0.0 {
                for (x, p) in row[c..cols].iter_mut().zip(&pivot_row[c..cols]) {
                    *x -= factor * p;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Builds the linear system a passive party sees for one single-channel
/// convolution with input `x` (h×h, row-major) and reports whether the
/// kernel is uniquely determined by it.
pub fn conv_system_solvable(inp: ConvAuditInput, x: &[f64]) -> bool {
    let ConvAuditInput {
        input_size: h,
        kernel_size: n,
        padding: p,
        stride: s,
    } = inp;
    assert_eq!(x.len(), h * h);
    let padded = h + 2 * p;
    if n > padded {
        return false;
    }
    let out = (padded - n) / s + 1;
    let at = |r: usize, c: usize| -> f64 {
        if r < p || c < p || r >= h + p || c >= h + p {
            0.0
        } else {
            x[(r - p) * h + (c - p)]
        }
    };
    let mut rows = Vec::with_capacity(out * out);
    for oi in 0..out {
        for oj in 0..out {
            let mut row = Vec::with_capacity(n * n);
            for ki in 0..n {
                for kj in 0..n {
                    row.push(at(oi * s + ki, oj * s + kj));
                }
            }
            rows.push(row);
        }
    }
    matrix_rank(&rows, 1e-9) == n * n
}
