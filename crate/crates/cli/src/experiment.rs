//! The ordering comparison: one initialisation, one dataset, one shuffle
//! seed, trained once per ordering.

use std::time::Instant;

use anyhow::Result;
use lapyr::metrics::MetricReport;
use lapyr::models::{ModelBundle, ModelConfig, Ordering};
use lapyr::pipeline::{enhance_image, EnhanceConfig};
use lapyr::training::{gamma_tone_curve, train, LossRecord, LossWeights, Phase, PhaseConfig, SampleTriplet};
use rayon::prelude::*;

/// Offset between the training seed and the held-out synthetic seed.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_000;

pub const ORDERINGS: [Ordering; 2] = [Ordering::Tfdl, Ordering::Dftl];

#[derive(Clone, Debug)]
pub struct OrderingRun {
    pub ordering: Ordering,
    pub bundle: ModelBundle,
    pub history: Vec<LossRecord>,
    pub untrained: MetricReport,
    pub trained: MetricReport,
    /// Wall time of this ordering's training including the shared prefix.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    /// Gamma-encoded noisy input against the tone-mapped target.
    pub gamma: MetricReport,
    pub runs: Vec<OrderingRun>,
}

impl Comparison {
    /// Rows `gamma`, `<ordering>_untrained` and `<ordering>` per ordering.
    pub fn rows(&self) -> Vec<&MetricReport> {
        let mut rows = vec![&self.gamma];
        rows.extend(self.runs.iter().map(|r| &r.untrained));
        rows.extend(self.runs.iter().map(|r| &r.trained));
        rows
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", MetricReport::CSV_HEADER);
        for r in self.rows() {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn run(&self, ordering: Ordering) -> Option<&OrderingRun> {
        self.runs.iter().find(|r| r.ordering == ordering)
    }
}

/// Mean metrics of `bundle` over the held-out set.
pub fn score(name: &str, bundle: &ModelBundle, held_out: &[SampleTriplet]) -> Result<MetricReport> {
    let config = EnhanceConfig::new(bundle.ordering, lapyr::pipeline::PATCH_SIZE)?;
    let reports = held_out
        .iter()
        .map(|s| {
            let out = enhance_image(&s.x_noisy, bundle, &config)?;
            Ok(MetricReport::compute(name, &out, &s.y_final, &s.y_merged)?)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(name, &reports).ok_or_else(|| anyhow::anyhow!("held-out set is empty"))
}

pub fn gamma_baseline(held_out: &[SampleTriplet]) -> Result<MetricReport> {
    let reports = held_out
        .par_iter()
        .map(|s| {
            let out = s.x_noisy.map(gamma_tone_curve);
            Ok(MetricReport::compute("gamma", &out, &s.y_final, &s.y_merged)?)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean("gamma", &reports).ok_or_else(|| anyhow::anyhow!("held-out set is empty"))
}

/// Trains both orderings from `ModelBundle::init(seed)`. Leading tone-map
/// phases never touch the denoisers, so they run once and are shared.
pub fn compare_orderings(
    data: &[SampleTriplet],
    held_out: &[SampleTriplet],
    phases: &[PhaseConfig],
    seed: u64,
) -> Result<Comparison> {
    let weights = LossWeights::default();
    let gamma = gamma_baseline(held_out)?;
    let init = ModelBundle::init(&ModelConfig::default(), Ordering::Tfdl, seed);

    let shared = phases.iter().take_while(|p| p.phase == Phase::ToneMap).count();
    let start = Instant::now();
    let mut prefix = init.clone();
    let prefix_history = train(&mut prefix, data, &phases[..shared], &weights, seed)?;
    let prefix_seconds = start.elapsed().as_secs_f64();
    log::info!("shared tone-map phase took {prefix_seconds:.1}s");

    let mut runs = Vec::with_capacity(ORDERINGS.len());
    for ordering in ORDERINGS {
        let mut fresh = init.clone();
        fresh.ordering = ordering;
        let untrained = score(&format!("{ordering}_untrained"), &fresh, held_out)?;

        let start = Instant::now();
        let mut bundle = prefix.clone();
        bundle.ordering = ordering;
        let mut history = prefix_history.clone();
        history.extend(train(&mut bundle, data, &phases[shared..], &weights, seed)?);
        let seconds = prefix_seconds + start.elapsed().as_secs_f64();
        log::info!("{ordering} trained in {seconds:.1}s");

        let trained = score(&ordering.to_string(), &bundle, held_out)?;
        runs.push(OrderingRun {
            ordering,
            bundle,
            history,
            untrained,
            trained,
            seconds,
        });
    }
    Ok(Comparison { gamma, runs })
}
