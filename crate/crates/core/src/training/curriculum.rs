//! Epoch-dependent mixing of back-translated and annotated data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear schedules for the back-translated (`bt`) keep ratio and the
/// annotated (`at`) replication factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub total_epochs: usize,
    pub bt_start: f64,
    pub bt_end: f64,
    /// Epoch at which `bt` reaches `bt_end`; defaults to half the run.
    pub bt_end_epoch: f64,
    pub at_start: f64,
    pub at_end: f64,
}

impl CurriculumSchedule {
    pub fn new(total_epochs: usize) -> Self {
        Self {
            total_epochs,
            bt_start: 1.0,
            bt_end: 0.01,
            bt_end_epoch: total_epochs as f64 / 2.0,
            at_start: 20.0,
            at_end: 5.0,
        }
    }

    /// Constant ratios, for runs without augmentation.
    pub fn flat(total_epochs: usize, bt: f64, at: f64) -> Self {
        Self {
            total_epochs,
            bt_start: bt,
            bt_end: bt,
            bt_end_epoch: total_epochs as f64 / 2.0,
            at_start: at,
            at_end: at,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        for (name, v) in [("bt_start", self.bt_start), ("bt_end", self.bt_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("at_start", self.at_start), ("at_end", self.at_end)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.bt_end > self.bt_start || self.at_end > self.at_start {
            return Err(Error::Config("curriculum ratios must not increase".into()));
        }
        if !(self.bt_end_epoch > 0.0 && self.bt_end_epoch <= self.total_epochs as f64) {
            return Err(Error::Config(format!("bt_end_epoch {} outside (0, total_epochs]", self.bt_end_epoch)));
        }
        Ok(())
    }
}

fn lerp(start: f64, end: f64, t: f64) -> f64 {
    start + (end - start) * t
}

/// `(bt_ratio, at_ratio)` at `epoch`; endpoints are returned exactly.
pub fn curriculum_ratios(epoch: usize, sched: &CurriculumSchedule) -> Result<(f64, f64)> {
    sched.validate()?;
    if epoch > sched.total_epochs {
        return Err(Error::Domain(format!("epoch {epoch} beyond total {}", sched.total_epochs)));
    }
    let e = epoch as f64;
    let bt = if e >= sched.bt_end_epoch {
        sched.bt_end
    } else {
        lerp(sched.bt_start, sched.bt_end, e / sched.bt_end_epoch)
    };
    let at = if epoch == sched.total_epochs {
        sched.at_end
    } else {
        lerp(sched.at_start, sched.at_end, e / sched.total_epochs as f64)
    };
    Ok((bt, at))
}

/// Builds one epoch: a `bt_ratio` share of `bt_pool` drawn without
/// replacement (rounded up), each annotated item repeated `floor(at_ratio)`
/// times plus once more with probability equal to the fractional part, all
/// shuffled by a generator seeded with `seed`.
pub fn sample_epoch<T: Clone>(bt_pool: &[T], at_pool: &[T], ratios: (f64, f64), seed: u64) -> Vec<T> {
    let (bt_ratio, at_ratio) = ratios;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_bt = ((bt_ratio * bt_pool.len() as f64) - 1e-9).ceil().clamp(0.0, bt_pool.len() as f64) as usize;
    let mut out: Vec<T> = rand::seq::index::sample(&mut rng, bt_pool.len(), n_bt)
        .into_iter()
        .map(|i| bt_pool[i].clone())
        .collect();
    let whole = at_ratio.floor() as usize;
    let frac = at_ratio - at_ratio.floor();
    for item in at_pool {
        let copies = whole + usize::from(frac > 0.0 && rng.gen_bool(frac));
        out.extend(std::iter::repeat(item).take(copies).cloned());
    }
    out.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        let s = CurriculumSchedule::new(30);
        assert_eq!(curriculum_ratios(0, &s).unwrap(), (1.0, 20.0));
        assert_eq!(curriculum_ratios(15, &s).unwrap().0, 0.01);
        assert_eq!(curriculum_ratios(30, &s).unwrap(), (0.01, 5.0));
        assert!(matches!(curriculum_ratios(31, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn odd_totals_reach_bt_floor_at_half() {
        let s = CurriculumSchedule::new(7);
        assert!(curriculum_ratios(3, &s).unwrap().0 > 0.01);
        assert_eq!(curriculum_ratios(4, &s).unwrap().0, 0.01);
    }

    #[test]
    fn unit_ratios_use_everything_once() {
        let bt: Vec<u32> = (0..10).collect();
        let at: Vec<u32> = (100..105).collect();
        let mut e = sample_epoch(&bt, &at, (1.0, 1.0), 3);
        e.sort();
        let mut want: Vec<u32> = bt.iter().chain(&at).copied().collect();
        want.sort();
        assert_eq!(e, want);
    }

    #[test]
    fn minimum_bt_ratio_keeps_one_of_a_hundred() {
        let bt: Vec<u32> = (0..100).collect();
        let e = sample_epoch(&bt, &[], (0.01, 1.0), 1);
        assert_eq!(e.len(), 1);
    }

    #[test]
    fn sampling_is_deterministic() {
        let bt: Vec<u32> = (0..50).collect();
        let at: Vec<u32> = (100..120).collect();
        assert_eq!(sample_epoch(&bt, &at, (0.3, 2.5), 9), sample_epoch(&bt, &at, (0.3, 2.5), 9));
        assert_ne!(sample_epoch(&bt, &at, (0.3, 2.5), 9), sample_epoch(&bt, &at, (0.3, 2.5), 10));
    }

    proptest! {
        #[test]
        fn ratios_never_increase(total in 1usize..60) {
            let s = CurriculumSchedule::new(total);
            let mut prev = curriculum_ratios(0, &s).unwrap();
            for e in 1..=total {
                let cur = curriculum_ratios(e, &s).unwrap();
                prop_assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
                prev = cur;
            }
        }

        #[test]
        fn fractional_replication_stays_between_bounds(at in 0.0f64..6.0, seed in any::<u64>()) {
            let pool: Vec<u32> = (0..40).collect();
            let n = sample_epoch(&[], &pool, (1.0, at), seed).len();
            prop_assert!(n >= 40 * at.floor() as usize && n <= 40 * at.ceil() as usize);
        }
    }
}
