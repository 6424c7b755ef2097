//! Visual token counts and reduction ratios.

use std::fmt::Write;

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetRow {
    pub setting: &'static str,
    pub mode: String,
    pub dense: usize,
    pub tokens: usize,
    pub ratio: f64,
}

impl BudgetRow {
    fn new(setting: &'static str, mode: impl Into<String>, dense: usize, tokens: usize) -> Self {
        BudgetRow {
            setting,
            mode: mode.into(),
            dense,
            tokens,
            ratio: dense as f64 / tokens as f64,
        }
    }

    /// Nearest integer, halves rounded away from zero.
    pub fn rounded(&self) -> u64 {
        self.ratio.round() as u64
    }

    /// `"20 (13×)"` style cell.
    pub fn cell(&self) -> String {
        format!("{} ({}×)", self.tokens, self.rounded())
    }
}

/// Reference rows (256 dense tokens, 4 kept slots, 16 or 24 relation
/// tokens) followed by the configured setting.
pub fn token_budget(cfg: &RunConfig) -> Vec<BudgetRow> {
    let dense = (64 / cfg.patch) * (64 / cfg.patch);
    let kept = if cfg.filter_on { cfg.keep } else { cfg.num_slots };
    vec![
        BudgetRow::new("reference", "OC", 256, 4),
        BudgetRow::new("reference", "ORC goal", 256, 4 + 16),
        BudgetRow::new("reference", "ORC other", 256, 4 + 24),
        BudgetRow::new("configured", "OC", dense, kept),
        BudgetRow::new("configured", "ORC", dense, kept + cfg.num_relations),
    ]
}

pub fn render(rows: &[BudgetRow]) -> String {
    let mut s = format!("{:<11} {:<10} {:>6} {:>7} {:>9} {:>10}\n", "setting", "mode", "dense", "tokens", "ratio", "reported");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<11} {:<10} {:>6} {:>7} {:>9.4} {:>10}",
            r.setting,
            r.mode,
            r.dense,
            r.tokens,
            r.ratio,
            r.cell()
        );
    }
    s.push_str("ratios are dense/tokens, reported to the nearest integer (halves away from zero)\n");
    s
}

pub fn to_csv(rows: &[BudgetRow]) -> String {
    let mut s = String::from("setting,mode,dense,tokens,ratio,rounded\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.setting, r.mode, r.dense, r.tokens, r.ratio, r.rounded());
    }
    s
}
