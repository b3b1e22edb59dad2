//! Lottery-ticket pruning: magnitude masks, rewind to the recorded
//! initialization, and the full search loop (train, mask, rewind, repeat).

use std::collections::BTreeMap;

use crate::dataset::DatasetView;
use crate::error::{Error, Result};
use crate::nn::{sgd_train, snapshot_params, ArchSpec, LossSpec, ModelGraph, ParamStore, TrainConfig, TrainReport};

/// Rule for scoring candidate weights at mask time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Per layer, prune the fraction `r` of survivors with smallest score.
    SmallWeights,
    /// Same criterion ranked across all prunable layers jointly.
    GlobalSmallWeights,
    /// Per layer, keep the top `1-r` fraction by score.
    LargeFinal,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small_weights" => Ok(MaskStrategy::SmallWeights),
            "global_small_weights" => Ok(MaskStrategy::GlobalSmallWeights),
            "large_final" => Ok(MaskStrategy::LargeFinal),
            other => Err(Error::Config(format!("unknown mask strategy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::SmallWeights => "small_weights",
            MaskStrategy::GlobalSmallWeights => "global_small_weights",
            MaskStrategy::LargeFinal => "large_final",
        }
    }
}

/// Which magnitude the mask strategies rank by. The per-layer reading of
/// "keep largest final" and "prune smallest final" coincide under the
/// default, so the alternatives are exposed for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreFn {
    /// |theta_t| (final magnitude)
    #[default]
    FinalMagnitude,
    /// |theta_0| (initial magnitude)
    InitMagnitude,
    /// |theta_t| - |theta_0| (magnitude increase)
    MagnitudeIncrease,
}

impl ScoreFn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "final_magnitude" => Ok(ScoreFn::FinalMagnitude),
            "init_magnitude" => Ok(ScoreFn::InitMagnitude),
            "magnitude_increase" => Ok(ScoreFn::MagnitudeIncrease),
            other => Err(Error::Config(format!("unknown score function '{other}'"))),
        }
    }
}

/// Biases and classifier heads are never pruned.
pub fn is_prunable(name: &str) -> bool {
    name.starts_with("block") && name.ends_with(".kernel")
}

/// Per-parameter binary masks, aligned with a [`ParamStore`] by name.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    masks: BTreeMap<String, Vec<u8>>,
    strategy: MaskStrategy,
    rate: f64,
}

impl PruneMask {
    /// Fresh all-ones mask over every parameter of `params`.
    pub fn all_ones(params: &ParamStore) -> Self {
        let masks = params
            .iter()
            .map(|(name, t)| (name.clone(), vec![1u8; t.numel()]))
            .collect();
        PruneMask {
            masks,
            strategy: MaskStrategy::SmallWeights,
            rate: 0.0,
        }
    }

    pub fn from_parts(masks: BTreeMap<String, Vec<u8>>, strategy: MaskStrategy, rate: f64) -> Self {
        PruneMask { masks, strategy, rate }
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.masks.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<u8>)> {
        self.masks.iter()
    }

    pub fn is_all_ones(&self, name: &str) -> bool {
        self.masks.get(name).is_none_or(|m| m.iter().all(|&b| b == 1))
    }

    /// Surviving / total over prunable parameters only.
    pub fn weights_remaining(&self) -> f64 {
        let mut surviving = 0usize;
        let mut total = 0usize;
        for (name, m) in &self.masks {
            if is_prunable(name) {
                total += m.len();
                surviving += m.iter().filter(|&&b| b == 1).count() ;
            }
        }
        if total == 0 {
            1.0
        } else {
            surviving as f64 / total as f64
        }
    }

    pub fn validate_against(&self, params: &ParamStore) -> Result<()> {
        for (name, t) in params.iter() {
            match self.masks.get(name) {
                Some(m) if m.len() == t.numel() => {}
                Some(m) => {
                    return Err(Error::shape(
                        "prune_mask",
                        format!("mask for '{name}' has {} entries, tensor has {}", m.len(), t.numel()),
                    ))
                }
                None => return Err(Error::Input(format!("mask missing parameter '{name}'"))),
            }
        }
        Ok(())
    }
}

/// Fraction of prunable weights still unmasked, in (0, 1].
pub fn weights_remaining(mask: &PruneMask) -> f64 {
    mask.weights_remaining()
}

fn score_values(name: &str, final_params: &ParamStore, theta0: Option<&ParamStore>, score: ScoreFn) -> Result<Vec<f32>> {
    let final_t = final_params.get(name)?;
    match score {
        ScoreFn::FinalMagnitude => Ok(final_t.data().iter().map(|v| v.abs()).collect()),
        ScoreFn::InitMagnitude => {
            let t0 = theta0
                .ok_or_else(|| Error::Input("init_magnitude score needs the theta0 snapshot".to_string()))?
                .get(name)?;
            Ok(t0.data().iter().map(|v| v.abs()).collect())
        }
        ScoreFn::MagnitudeIncrease => {
            let t0 = theta0
                .ok_or_else(|| Error::Input("magnitude_increase score needs the theta0 snapshot".to_string()))?
                .get(name)?;
            Ok(final_t
                .data()
                .iter()
                .zip(t0.data())
                .map(|(v, v0)| v.abs() - v0.abs())
                .collect())
        }
    }
}

/// Compute the next mask from trained weights. Monotone: only weights that
/// survived `prev` are candidates, so pruned weights never revive.
pub fn compute_mask(
    final_params: &ParamStore,
    theta0: Option<&ParamStore>,
    prev: &PruneMask,
    strategy: MaskStrategy,
    rate: f64,
    score: ScoreFn,
) -> Result<PruneMask> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::param("rate", format!("prune rate must be in (0,1), got {rate}")));
    }
    prev.validate_against(final_params)?;

    let mut masks: BTreeMap<String, Vec<u8>> = prev.iter().map(|(n, m)| (n.clone(), m.clone())).collect();

    match strategy {
        MaskStrategy::SmallWeights | MaskStrategy::LargeFinal => {
            for (name, mask) in masks.iter_mut() {
                if !is_prunable(name) {
                    continue;
                }
                let scores = score_values(name, final_params, theta0, score)?;
                let mut candidates: Vec<usize> =
                    (0..mask.len()).filter(|&i| mask[i] == 1).collect();
                if candidates.len() < 2 {
                    log::warn!("layer '{name}' has {} surviving weights; skipped", candidates.len());
                    continue;
                }
                candidates.sort_by(|&a, &b| {
                    scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b))
                });
                let survivors = candidates.len();
                let to_prune = match strategy {
                    MaskStrategy::SmallWeights => (rate * survivors as f64).round() as usize,
                    MaskStrategy::LargeFinal => {
                        survivors - (((1.0 - rate) * survivors as f64).round() as usize)
                    }
                    MaskStrategy::GlobalSmallWeights => unreachable!(),
                };
                for &i in candidates.iter().take(to_prune.min(survivors)) {
                    mask[i] = 0;
                }
            }
        }
        MaskStrategy::GlobalSmallWeights => {
            let mut candidates: Vec<(f32, &str, usize)> = Vec::new();
            for (name, mask) in &masks {
                if !is_prunable(name) {
                    continue;
                }
                let scores = score_values(name, final_params, theta0, score)?;
                for (i, &m) in mask.iter().enumerate() {
                    if m == 1 {
                        candidates.push((scores[i], name.as_str(), i));
                    }
                }
            }
            candidates.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap()
                    .then(a.1.cmp(b.1))
                    .then(a.2.cmp(&b.2))
            });
            let to_prune = (rate * candidates.len() as f64).round() as usize;
            let chosen: Vec<(String, usize)> = candidates
                .iter()
                .take(to_prune)
                .map(|&(_, n, i)| (n.to_string(), i))
                .collect();
            for (name, i) in chosen {
                masks.get_mut(&name).unwrap()[i] = 0;
            }
        }
    }

    Ok(PruneMask::from_parts(masks, strategy, rate))
}

/// Rebuild parameters for the next search iteration: surviving weights take
/// their theta0 bytes exactly, pruned weights become exactly 0.0.
pub fn rewind(params: &ParamStore, theta0: &ParamStore, mask: &PruneMask) -> Result<ParamStore> {
    mask.validate_against(params)?;
    mask.validate_against(theta0)?;
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        let init = theta0.get(name)?;
        if init.shape() != t.shape() {
            return Err(Error::shape(
                "rewind",
                format!("'{name}': {:?} vs theta0 {:?}", t.shape(), init.shape()),
            ));
        }
        let m = mask.get(name).unwrap();
        let data: Vec<f32> = init
            .data()
            .iter()
            .zip(m)
            .map(|(&v, &keep)| if keep == 1 { v } else { 0.0 })
            .collect();
        let mut rebuilt = crate::tensor::Tensor::from_vec(t.shape().to_vec(), data)?;
        if t.requires_grad() {
            rebuilt = rebuilt.with_grad();
        }
        out.insert(name.clone(), rebuilt);
    }
    Ok(out)
}

/// Per-layer surviving-weight histogram (32 bins over the nonzero range).
#[derive(Debug, Clone)]
pub struct LayerHistogram {
    pub name: String,
    pub total: usize,
    pub surviving: usize,
    /// (bin lower edge, count); empty when no nonzero values survive.
    pub bins: Vec<(f32, usize)>,
}

pub const HISTOGRAM_BINS: usize = 32;

/// Weight-distribution report per layer. Conv (block) layers are included
/// only when `include_conv` is set; head layers always appear.
pub fn layer_weight_histogram(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    include_conv: bool,
) -> Vec<LayerHistogram> {
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        let is_conv = name.starts_with("block") && name.ends_with(".kernel");
        if is_conv && !include_conv {
            continue;
        }
        let m = mask.and_then(|mm| mm.get(name));
        let values: Vec<f32> = t
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v != 0.0 && m.is_none_or(|mm| mm[i] == 1))
            .map(|(_, &v)| v)
            .collect();
        let surviving = values.len();
        let mut bins = Vec::new();
        if !values.is_empty() {
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let width = ((hi - lo) / HISTOGRAM_BINS as f32).max(f32::MIN_POSITIVE);
            let mut counts = vec![0usize; HISTOGRAM_BINS];
            for &v in &values {
                let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[b] += 1;
            }
            bins = counts
                .into_iter()
                .enumerate()
                .map(|(i, c)| (lo + i as f32 * width, c))
                .collect();
        }
        out.push(LayerHistogram {
            name: name.clone(),
            total: t.numel(),
            surviving,
            bins,
        });
    }
    out
}

/// Search loop configuration: `iterations` is the T of the outer loop,
/// `epochs` the E of each training phase.
#[derive(Debug, Clone)]
pub struct LthConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub rate: f64,
    pub strategy: MaskStrategy,
    pub score: ScoreFn,
}

#[derive(Debug, Clone)]
pub struct LthIterationReport {
    pub iteration: usize,
    pub weights_remaining: f64,
    pub train: TrainReport,
}

/// Outcome of a full search: final weights and mask plus the untouched
/// initialization snapshot.
#[derive(Debug, Clone)]
pub struct LthOutcome {
    pub params: ParamStore,
    pub mask: PruneMask,
    pub theta0: ParamStore,
    pub iterations: Vec<LthIterationReport>,
}

impl LthOutcome {
    /// Trained dense weights from the first iteration, before any pruning.
    pub fn dense_params(&self) -> Option<&ParamStore> {
        self.iterations.first().map(|it| &it.train.final_params)
    }
}

/// Full search: initialize, then per iteration train E epochs and, while
/// iterations remain, mask the trained weights and rewind the survivors to
/// their initial values.
pub fn lth_search(
    arch: &ArchSpec,
    data: &DatasetView,
    loss: &LossSpec,
    base_train: &TrainConfig,
    lth: &LthConfig,
    seed: u64,
) -> Result<LthOutcome> {
    if lth.iterations < 1 {
        return Err(Error::param("iterations", "search needs T >= 1"));
    }
    if lth.epochs < 1 {
        return Err(Error::param("epochs", "search needs E >= 1"));
    }

    let (model, mut params) = ModelGraph::build(arch.clone(), seed)?;
    let theta0 = snapshot_params(&params);
    let mut mask = PruneMask::all_ones(&params);
    let mut reports = Vec::new();

    let mut train_cfg = base_train.clone();
    train_cfg.epochs = lth.epochs;

    for t in 1..=lth.iterations {
        let report = sgd_train(&model, &mut params, data, loss, &train_cfg, Some(&mask))?;
        reports.push(LthIterationReport {
            iteration: t,
            weights_remaining: mask.weights_remaining(),
            train: report,
        });
        if t < lth.iterations {
            mask = compute_mask(&params, Some(&theta0), &mask, lth.strategy, lth.rate, lth.score)?;
            params = rewind(&params, &theta0, &mask)?;
        }
    }

    Ok(LthOutcome {
        params,
        mask,
        theta0,
        iterations: reports,
    })
}
