use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Train share of the default 4:1 split.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

fn train_len(n: usize, fraction: f64) -> usize {
    // guards against products such as 0.29 * 100 = 28.999999999999996
    ((n as f64 * fraction) + 1e-9).floor() as usize
}

pub fn validate_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("split ratio must lie in (0, 1), got {fraction}")))
    }
}

/// Seeded shuffle of `0..n`, first `floor(n·fraction)` indices train, the
/// rest test. With `stratify_by`, each class is shuffled and floored
/// separately, and classes are concatenated in ascending order.
pub fn split_indices(
    n: usize,
    fraction: f64,
    seed: u64,
    stratify_by: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    validate_fraction(fraction)?;
    if n == 0 {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    let mut rng = seeded(seed);
    match stratify_by {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let test = order.split_off(train_len(n, fraction));
            Ok((order, test))
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::shape("split_indices", &[n], &[labels.len()]));
            }
            let classes = labels.iter().max().map_or(0, |&m| m + 1);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for c in 0..classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                members.shuffle(&mut rng);
                let rest = members.split_off(train_len(members.len(), fraction));
                train.extend(members);
                test.extend(rest);
            }
            Ok((train, test))
        }
    }
}
