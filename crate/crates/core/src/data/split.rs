use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synthetic::{IMG_CONF_SUFFIX, TXT_CONF_SUFFIX};
use super::{DataError, MemeRecord};

/// Id of the record a confounder was derived from (or the id itself).
pub fn group_key(id: &str) -> &str {
    id.strip_suffix(IMG_CONF_SUFFIX)
        .or_else(|| id.strip_suffix(TXT_CONF_SUFFIX))
        .unwrap_or(id)
}

/// Train, validation and test parts.
pub type Splits = (Vec<MemeRecord>, Vec<MemeRecord>, Vec<MemeRecord>);

/// Seeded shuffle of confounder groups, then a contiguous train/val/test split.
/// A record and its confounders always land in the same part.
pub fn split_dataset(records: &[MemeRecord], fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(DataError::InvalidSplit(format!(
            "fractions must be positive: {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSplit(format!("fractions sum to {total}, expected 1")));
    }

    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&MemeRecord>> = HashMap::new();
    for r in records {
        let key = group_key(&r.id);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = records.len() as f64;
    let b1 = (fractions[0] * n).round() as usize;
    let b2 = ((fractions[0] + fractions[1]) * n).round() as usize;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    for key in order {
        let members = &groups[key];
        let part = if start < b1 {
            &mut train
        } else if start < b2 {
            &mut val
        } else {
            &mut test
        };
        part.extend(members.iter().map(|r| (*r).clone()));
        start += members.len();
    }
    Ok((train, val, test))
}
