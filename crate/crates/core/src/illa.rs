//! Inner-loop MCS selection for a given SINR estimate and instantaneous BLER target.

use serde::Serialize;

use crate::blermodel::{BlerTable, Mcs};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IllaDecision {
    pub mcs: Mcs,
    /// Unclipped table BLER of `mcs` at the estimate.
    pub predicted_bler: f64,
    /// False when no MCS meets the target and the lowest one was returned.
    pub feasible: bool,
}

/// Largest MCS whose predicted BLER does not exceed `target`.
///
/// Falls back to the lowest MCS with `feasible = false` when the set is empty.
pub fn select_mcs_illa(table: &BlerTable, gamma_est: f64, target: f64, tbs: u32) -> Result<IllaDecision> {
    let mut chosen = None;
    for u in table.mcs_table().indices() {
        let p = table.bler(u, gamma_est, tbs)?;
        if p <= target {
            chosen = Some((u, p));
        }
    }
    fallback(table, gamma_est, tbs, chosen)
}

/// MCS maximizing `SE(u) * (1 - BLER)` among those meeting `target`.
///
/// Ties go to the lower MCS.
pub fn select_mcs_maxse(table: &BlerTable, gamma_est: f64, target: f64, tbs: u32) -> Result<IllaDecision> {
    let mut chosen: Option<(Mcs, f64, f64)> = None;
    for e in table.mcs_table().entries() {
        let p = table.bler(e.index, gamma_est, tbs)?;
        if p > target {
            continue;
        }
        let expected = e.se * (1.0 - p);
        if chosen.is_none_or(|(_, _, best)| expected > best) {
            chosen = Some((e.index, p, expected));
        }
    }
    fallback(table, gamma_est, tbs, chosen.map(|(u, p, _)| (u, p)))
}

fn fallback(table: &BlerTable, gamma_est: f64, tbs: u32, chosen: Option<(Mcs, f64)>) -> Result<IllaDecision> {
    Ok(match chosen {
        Some((mcs, predicted_bler)) => IllaDecision { mcs, predicted_bler, feasible: true },
        None => {
            let mcs = table.mcs_table().lowest();
            IllaDecision { mcs, predicted_bler: table.bler(mcs, gamma_est, tbs)?, feasible: false }
        }
    })
}

/// Which inner-loop rule an adapter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    #[default]
    Illa,
    MaxSe,
}

impl Selector {
    pub fn select(self, table: &BlerTable, gamma_est: f64, target: f64, tbs: u32) -> Result<IllaDecision> {
        match self {
            Selector::Illa => select_mcs_illa(table, gamma_est, target, tbs),
            Selector::MaxSe => select_mcs_maxse(table, gamma_est, target, tbs),
        }
    }
}
