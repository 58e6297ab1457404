use lcdnet::handshake::{required_batch_naive, required_batch_optimized, HandshakeError};

use crate::report::Table;
use crate::row;

pub const COLUMNS: &[&str] =
    &["n", "p", "naive", "optimized_per_side_exact", "optimized_per_side", "optimized_total"];

/// One row per engine count: the naive batch, the optimized per-side
/// batch (exact and rounded up) and the floor of twice the exact value.
pub fn formula_table(ns: &[u32], p: f64) -> Result<Table, HandshakeError> {
    let mut t = Table::new(COLUMNS);
    for &n in ns {
        let naive = required_batch_naive(n, p)?;
        let opt = required_batch_optimized(n, p)?;
        let total = if n == 1 { 1 } else { opt.total_floor };
        t.push(row![n, p, naive, format!("{:.4}", opt.per_side_exact), opt.per_side, total]);
    }
    Ok(t)
}
