//! Weakly supervised calibration of the labeling function against citation
//! anchors.
//!
//! A patent's anchor distribution is the normalized histogram of the SDG tags
//! of the papers it cites. The loss only looks at SDGs that actually occur
//! among the anchors, so predicting additional SDGs is never penalized.

mod tpe;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{score_patent, CategorySet, HyperParams, PatentScores, SdgCorpus};
use crate::error::{Error, Result};
use crate::model::{PatentRecord, SdgId, SdgVector};

pub use tpe::TpeSettings;

/// Normalized anchor histogram of a patent and its support `S+`.
pub fn anchor_distribution(patent: &PatentRecord) -> Result<(SdgVector, BTreeSet<SdgId>)> {
    if patent.anchor_sdgs.is_empty() {
        return Err(Error::invalid(format!(
            "patent {} has no anchor SDGs and cannot be used for calibration",
            patent.patent_id
        )));
    }
    let total = patent.anchor_sdgs.len() as f64;
    let mut counts: BTreeMap<SdgId, usize> = BTreeMap::new();
    for &sdg in &patent.anchor_sdgs {
        *counts.entry(sdg).or_default() += 1;
    }
    let mut vector = SdgVector::zeros();
    for (&sdg, &count) in &counts {
        vector.set(sdg, count as f64 / total);
    }
    Ok((vector, counts.into_keys().collect()))
}

/// Mean squared error restricted to the anchor support.
pub fn positive_mse(pred: &SdgVector, anchor: &SdgVector, s_plus: &BTreeSet<SdgId>) -> Result<f64> {
    if s_plus.is_empty() {
        return Err(Error::invalid("positive set is empty"));
    }
    let sum: f64 = s_plus
        .iter()
        .map(|&j| (pred.get(j) - anchor.get(j)).powi(2))
        .sum();
    Ok(sum / s_plus.len() as f64)
}

/// Most frequent anchor SDG, ties to the lowest id.
pub fn dominant_anchor(patent: &PatentRecord) -> Option<SdgId> {
    let mut counts: BTreeMap<SdgId, usize> = BTreeMap::new();
    for &sdg in &patent.anchor_sdgs {
        *counts.entry(sdg).or_default() += 1;
    }
    // max_by_key keeps the last maximum; iterate in reverse so the lowest id wins.
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, c)| c)
        .map(|(sdg, _)| sdg)
}

/// Result of [`stratified_split`], as indices into the input slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub validation: Vec<usize>,
    pub remainder: Vec<usize>,
    /// Classes too small to stratify; their patents were pooled together.
    pub merged_classes: Vec<SdgId>,
}

/// Splits patents into a validation part of size `round(fraction * n)`,
/// stratified by each patent's dominant anchor SDG.
///
/// Patents without anchors always land in the remainder.
pub fn stratified_split(patents: &[PatentRecord], fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }

    let mut strata: BTreeMap<SdgId, Vec<usize>> = BTreeMap::new();
    let mut unanchored = Vec::new();
    for (i, p) in patents.iter().enumerate() {
        match dominant_anchor(p) {
            Some(sdg) => strata.entry(sdg).or_default().push(i),
            None => unanchored.push(i),
        }
    }

    let mut merged_classes = Vec::new();
    let mut pooled = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (sdg, members) in strata {
        if (members.len() as f64) * fraction < 1.0 {
            log::warn!(
                "SDG {sdg} has {} anchored patents, too few to stratify; pooling",
                members.len()
            );
            merged_classes.push(sdg);
            pooled.extend(members);
        } else {
            groups.push(members);
        }
    }
    if !pooled.is_empty() {
        groups.push(pooled);
    }

    let anchored: usize = groups.iter().map(Vec::len).sum();
    let target = (fraction * anchored as f64).round() as usize;

    // Largest-remainder apportionment of the validation quota.
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[g] < groups[g].len() {
            quotas[g] += 1;
            missing -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation = Vec::with_capacity(target);
    let mut remainder = unanchored;
    for (mut members, quota) in groups.into_iter().zip(quotas) {
        members.shuffle(&mut rng);
        remainder.extend_from_slice(&members[quota..]);
        members.truncate(quota);
        validation.extend(members);
    }
    validation.sort_unstable();
    remainder.sort_unstable();
    Ok(Split {
        validation,
        remainder,
        merged_classes,
    })
}

/// Validation patents with precomputed similarities, ready for repeated
/// objective evaluation.
pub struct Calibrator<'a> {
    corpus: &'a SdgCorpus,
    categories: CategorySet,
    items: Vec<CalibrationItem>,
}

struct CalibrationItem {
    scores: PatentScores,
    anchor: SdgVector,
    s_plus: BTreeSet<SdgId>,
}

impl<'a> Calibrator<'a> {
    /// Fails if `validation` is empty or any patent lacks anchors.
    pub fn new(
        validation: &[PatentRecord],
        corpus: &'a SdgCorpus,
        categories: CategorySet,
    ) -> Result<Self> {
        if validation.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        if corpus.is_empty() {
            return Err(Error::invalid("SDG corpus is empty"));
        }
        let items = validation
            .par_iter()
            .map(|p| {
                let (anchor, s_plus) = anchor_distribution(p)?;
                Ok(CalibrationItem {
                    scores: score_patent(p, corpus)?,
                    anchor,
                    s_plus,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Calibrator {
            corpus,
            categories,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Mean positive-only MSE of the labeling function over the validation set.
    pub fn objective(&self, params: &HyperParams) -> Result<f64> {
        let mut total = 0.0;
        for item in &self.items {
            let labeling = item.scores.label(self.corpus, params, self.categories)?;
            total += positive_mse(&labeling.vector, &item.anchor, &item.s_plus)?;
        }
        Ok(total / self.items.len() as f64)
    }
}

/// Mean positive-only MSE of `params` over `validation`.
pub fn objective(
    params: &HyperParams,
    validation: &[PatentRecord],
    corpus: &SdgCorpus,
    categories: CategorySet,
) -> Result<f64> {
    Calibrator::new(validation, corpus, categories)?.objective(params)
}

/// Hyperparameter search space. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub tau_function: [f64; 2],
    pub tau_solution: [f64; 2],
    pub tau_application: [f64; 2],
    pub top_n: Vec<usize>,
    pub budget: usize,
    pub seed: u64,
    /// Fusion constant; held fixed during the search.
    #[serde(default = "default_rrf_k")]
    pub rrf_k: f64,
}

fn default_rrf_k() -> f64 {
    60.0
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("tau_function", self.tau_function),
            ("tau_solution", self.tau_solution),
            ("tau_application", self.tau_application),
        ] {
            if !(lo < hi && lo >= -1.0 && hi <= 1.0) {
                return Err(Error::invalid(format!(
                    "{name} range [{lo}, {hi}] must satisfy -1 <= lo < hi <= 1"
                )));
            }
        }
        if self.top_n.is_empty() || self.top_n.contains(&0) {
            return Err(Error::invalid("top_n candidates must be non-empty and positive"));
        }
        if self.budget == 0 {
            return Err(Error::invalid("budget must be at least 1"));
        }
        if !(self.rrf_k > 0.0) {
            return Err(Error::invalid("rrf_k must be positive"));
        }
        Ok(())
    }

    pub(crate) fn ranges(&self) -> [[f64; 2]; 3] {
        [self.tau_function, self.tau_solution, self.tau_application]
    }

    pub(crate) fn params(&self, taus: [f64; 3], top_n: usize) -> HyperParams {
        HyperParams {
            tau_function: taus[0],
            tau_solution: taus[1],
            tau_application: taus[2],
            top_n,
            rrf_k: self.rrf_k,
        }
    }

    fn sample_uniform(&self, rng: &mut impl Rng) -> HyperParams {
        let taus = self.ranges().map(|[lo, hi]| rng.random_range(lo..hi));
        let top_n = self.top_n[rng.random_range(0..self.top_n.len())];
        self.params(taus, top_n)
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            tau_function: [0.0, 1.0],
            tau_solution: [0.0, 1.0],
            tau_application: [0.0, 1.0],
            top_n: vec![5, 10, 15, 20, 25, 30, 40, 50],
            budget: 200,
            seed: 0,
            rrf_k: default_rrf_k(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Tpe,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Strategy::Random),
            "tpe" => Ok(Strategy::Tpe),
            other => Err(Error::invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

/// One evaluated point of the search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub params: HyperParams,
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimization {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

/// Per-trial random stream, independent of evaluation order.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Searches `space` for the parameters minimizing `calibrator`'s objective.
pub fn optimize(space: &SearchSpace, strategy: Strategy, calibrator: &Calibrator) -> Result<Optimization> {
    optimize_with(space, strategy, |p| calibrator.objective(p))
}

/// Like [`optimize`] but over an arbitrary objective.
///
/// Ties between equally good trials go to the earliest one.
pub fn optimize_with<F>(space: &SearchSpace, strategy: Strategy, objective: F) -> Result<Optimization>
where
    F: Fn(&HyperParams) -> Result<f64> + Sync,
{
    space.validate()?;
    let evaluate = |trial: usize, params: HyperParams| match objective(&params) {
        Ok(v) if v.is_finite() => Trial {
            trial,
            params,
            value: Some(v),
            error: None,
        },
        Ok(v) => Trial {
            trial,
            params,
            value: None,
            error: Some(format!("objective returned {v}")),
        },
        Err(e) => Trial {
            trial,
            params,
            value: None,
            error: Some(e.to_string()),
        },
    };

    let trials: Vec<Trial> = match strategy {
        Strategy::Random => (0..space.budget)
            .into_par_iter()
            .map(|t| evaluate(t, space.sample_uniform(&mut trial_rng(space.seed, t))))
            .collect(),
        Strategy::Tpe => {
            let settings = TpeSettings::default();
            let mut trials = Vec::with_capacity(space.budget);
            for t in 0..space.budget {
                let mut rng = trial_rng(space.seed, t);
                let params = if t < settings.n_startup {
                    space.sample_uniform(&mut rng)
                } else {
                    let history: Vec<(HyperParams, f64)> = trials
                        .iter()
                        .filter_map(|tr: &Trial| tr.value.map(|v| (tr.params, v)))
                        .collect();
                    if history.is_empty() {
                        space.sample_uniform(&mut rng)
                    } else {
                        tpe::suggest(&settings, space, &history, &mut rng)
                    }
                };
                trials.push(evaluate(t, params));
            }
            trials
        }
    };

    let best = trials
        .iter()
        .filter_map(|t| t.value.map(|v| (v, t)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.trial.cmp(&b.1.trial)))
        .map(|(_, t)| t.clone());
    match best {
        Some(best) => Ok(Optimization { best, trials }),
        None => Err(Error::AllTrialsFailed {
            trials: trials.len(),
            last: trials
                .last()
                .and_then(|t| t.error.clone())
                .unwrap_or_default(),
        }),
    }
}

/// Append-only JSONL writer for trial logs.
pub struct TrialLog {
    out: BufWriter<File>,
}

impl TrialLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(TrialLog {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, trial: &Trial) -> Result<()> {
        serde_json::to_writer(&mut self.out, trial)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("writing trial log", e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("flushing trial log", e))
    }
}

pub fn read_trial_log(path: &Path) -> Result<Vec<Trial>> {
    crate::model::read_jsonl(path)
}
