//! Brute-force ranking of every discrete tuning scheme.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::objective::PenaltyConfig;
use crate::search::{SearchConfig, Searcher, Supernet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub scheme: Vec<usize>,
    pub choices: Vec<String>,
    pub val_loss: f64,
}

/// Number of discrete schemes, or `None` on overflow.
pub fn scheme_space_size(supernet: &Supernet) -> Option<usize> {
    supernet.cells.iter().try_fold(1usize, |acc, c| acc.checked_mul(c.num_paths()))
}

/// All schemes in lexicographic order, refusing spaces above `cap`.
pub fn enumerate_schemes(supernet: &Supernet, cap: usize) -> Result<Vec<Vec<usize>>> {
    let size = scheme_space_size(supernet);
    if size.is_none_or(|n| n > cap) {
        return Err(Error::InvalidArgument(format!(
            "oracle space of {} schemes exceeds the cap of {cap}; use a cascade with fewer cells or fewer adapter candidates",
            size.map_or_else(|| "too many".to_string(), |n| n.to_string())
        )));
    }
    let radix: Vec<usize> = supernet.cells.iter().map(|c| c.num_paths()).collect();
    let mut out = Vec::with_capacity(size.unwrap_or(0));
    let mut cur = vec![0usize; radix.len()];
    loop {
        out.push(cur.clone());
        let mut pos = radix.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            cur[pos] += 1;
            if cur[pos] < radix[pos] {
                break;
            }
            cur[pos] = 0;
        }
    }
}

/// Trains network parameters of each scheme from the same starting point,
/// with the same seed and `epochs`, then ranks schemes by final validation
/// task loss (ties broken by scheme order).
pub fn enumerate_oracle(
    supernet: &Supernet,
    train: &Dataset,
    val: &Dataset,
    cfg: &SearchConfig,
    epochs: usize,
    cap: usize,
) -> Result<Vec<OracleEntry>> {
    let schemes = enumerate_schemes(supernet, cap)?;
    let mut entries = schemes
        .into_par_iter()
        .map(|scheme| {
            let mut s =
                Searcher::new(supernet.clone(), train.clone(), val.clone(), *cfg, PenaltyConfig::disabled())?;
            let val_loss = s.train_scheme(&scheme, epochs)?;
            let choices = scheme.iter().zip(&supernet.cells).map(|(&k, c)| c.path_label(c.paths()[k])).collect();
            Ok(OracleEntry { scheme, choices, val_loss })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then_with(|| a.scheme.cmp(&b.scheme)));
    Ok(entries)
}

/// 1-based rank of `scheme` in a ranked oracle list.
pub fn rank_of(entries: &[OracleEntry], scheme: &[usize]) -> Option<usize> {
    entries.iter().position(|e| e.scheme == scheme).map(|p| p + 1)
}
