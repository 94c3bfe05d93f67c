//! Seeded synthetic benchmark: advected-blob truth, 45% cloud gaps,
//! 200 training / 30 validation / 50 test days.

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{select_frames, DateInterval, FieldMeta, GappyField, SplitSpec, TimeAxis};
use crate::obs_sim::{simulate_observations, CloudMaskConfig, SyntheticTruthConfig, TruthMode};

pub const TRAIN_DAYS: usize = 200;
pub const VALID_DAYS: usize = 30;
pub const TEST_DAYS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub truth: SyntheticTruthConfig,
    pub clouds: CloudMaskConfig,
    pub split: SplitSpec,
    /// Base seed of the per-frame observation masks.
    pub obs_seed: u64,
}

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date")
}

fn interval(first: usize, days: usize) -> DateInterval {
    DateInterval::new(
        start() + Duration::days(first as i64),
        start() + Duration::days((first + days - 1) as i64),
    )
}

impl Benchmark {
    /// The reference dataset.
    pub fn standard(seed: u64) -> Self {
        let t = TRAIN_DAYS + VALID_DAYS + TEST_DAYS;
        Self {
            truth: SyntheticTruthConfig {
                t,
                h: 32,
                w: 32,
                mode: TruthMode::AdvectedBlobs,
                velocity: (0.5, 1.0),
                amplitude: 0.25,
                mean_log10: -2.5,
                seed,
                meta: FieldMeta {
                    var_name: "BBP443".into(),
                    units: "m-1".into(),
                    time: TimeAxis {
                        t0: start(),
                        dt_days: 1,
                    },
                    ..FieldMeta::default()
                },
                ..SyntheticTruthConfig::default()
            },
            clouds: CloudMaskConfig {
                target_missing_fraction: 0.45,
                seed: seed.wrapping_add(1),
                ..CloudMaskConfig::default()
            },
            split: SplitSpec {
                train: interval(0, TRAIN_DAYS),
                valid: interval(TRAIN_DAYS, VALID_DAYS),
                test: interval(TRAIN_DAYS + VALID_DAYS, TEST_DAYS),
            },
            obs_seed: seed.wrapping_add(2),
        }
    }

    /// A second dataset with faster advection, stronger anomalies and a
    /// different mean, for transfer experiments.
    pub fn shifted(seed: u64) -> Self {
        let mut b = Self::standard(seed);
        b.truth.velocity = (-0.8, 0.6);
        b.truth.amplitude = 0.4;
        b.truth.mean_log10 = 0.3;
        b.truth.meta.var_name = "CHL".into();
        b.truth.meta.units = "mg m-3".into();
        b
    }

    /// Truth and observations over the whole record.
    pub fn generate(&self) -> Result<(GappyField, GappyField)> {
        let truth = crate::obs_sim::gen_truth(&self.truth)?;
        let obs = simulate_observations(&truth, &self.clouds, self.obs_seed)?;
        self.split.validate(&truth)?;
        Ok((truth, obs))
    }
}

impl Default for Benchmark {
    fn default() -> Self {
        Self::standard(0)
    }
}

/// A field cut into the three periods of a [`SplitSpec`].
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: GappyField,
    pub valid: GappyField,
    pub test: GappyField,
}

impl Splits {
    pub fn new(field: &GappyField, split: &SplitSpec) -> Result<Self> {
        Ok(Self {
            train: select_frames(field, &split.train)?,
            valid: select_frames(field, &split.valid)?,
            test: select_frames(field, &split.test)?,
        })
    }
}
