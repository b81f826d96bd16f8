//! Weighted-sum configuration trade-off over subsystem module alternatives.

mod catalog;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use catalog::{load_catalog, load_weights, parse_catalog, parse_weights, CatalogError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TradeoffError {
    #[error("configuration invalid: {0}")]
    InvalidConfig(String),
    #[error("catalog incomplete: slot {0} has no alternatives")]
    CatalogIncomplete(Slot),
    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),
    #[error("invalid alternative `{code}`: {reason}")]
    InvalidAlternative { code: String, reason: String },
    #[error("infeasible configuration: slot {0} has no available alternative")]
    Infeasible(Slot),
    #[error("empty selection")]
    EmptySelection,
}

pub type Result<T> = std::result::Result<T, TradeoffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Slot {
    pub const ALL: [Slot; 6] = [Slot::A, Slot::B, Slot::C, Slot::D, Slot::E, Slot::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.letter() == c)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Cost,
    Accuracy,
    Weight,
    Speed,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Cost,
        Criterion::Accuracy,
        Criterion::Weight,
        Criterion::Speed,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Row key in the weight matrix file.
    pub fn key(self) -> &'static str {
        match self {
            Criterion::Cost => "c",
            Criterion::Accuracy => "a",
            Criterion::Weight => "w",
            Criterion::Speed => "s",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Cost => "cost",
            Criterion::Accuracy => "accuracy",
            Criterion::Weight => "weight",
            Criterion::Speed => "speed",
        }
    }
}

/// One candidate module for a slot. Scores are penalties in [0, 100]; lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub code: String,
    pub slot: Slot,
    pub attributes: BTreeMap<Criterion, f64>,
    pub available: bool,
}

impl Alternative {
    pub fn new(code: &str, slot: Slot, scores: [f64; 4], available: bool) -> Result<Self> {
        let alt = Alternative {
            code: code.to_string(),
            slot,
            attributes: Criterion::ALL.into_iter().zip(scores).collect(),
            available,
        };
        alt.validate()?;
        Ok(alt)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| TradeoffError::InvalidAlternative {
            code: self.code.clone(),
            reason,
        };
        if !self.code.starts_with(self.slot.letter()) {
            return Err(bad(format!("code prefix does not match slot {}", self.slot)));
        }
        for c in Criterion::ALL {
            match self.attributes.get(&c) {
                None => return Err(bad(format!("missing {} score", c.name()))),
                Some(v) if !v.is_finite() || !(0.0..=100.0).contains(v) => {
                    return Err(bad(format!("{} score {v} outside [0, 100]", c.name())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn score(&self, c: Criterion) -> Result<f64> {
        self.attributes.get(&c).copied().ok_or_else(|| {
            TradeoffError::InvalidConfig(format!("{} has no {} score", self.code, c.name()))
        })
    }
}

/// Per-criterion, per-slot weights in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub rows: [[f64; 6]; 4],
}

impl WeightMatrix {
    pub fn new(rows: [[f64; 6]; 4]) -> Result<Self> {
        let m = WeightMatrix { rows };
        m.validate()?;
        Ok(m)
    }

    /// Reference weights shipped in `data/weights.toml`.
    pub fn reference() -> Self {
        WeightMatrix {
            rows: [
                [10.0, 30.0, 0.0, 10.0, 40.0, 10.0],
                [20.0, 0.0, 40.0, 35.0, 5.0, 0.0],
                [0.0, 70.0, 0.0, 0.0, 0.0, 30.0],
                [30.0, 0.0, 30.0, 25.0, 15.0, 0.0],
            ],
        }
    }

    pub fn row(&self, c: Criterion) -> &[f64; 6] {
        &self.rows[c.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for c in Criterion::ALL {
            let row = self.row(c);
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(TradeoffError::InvalidWeights(format!(
                    "row {} has invalid entry {v}",
                    c.key()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 100.0).abs() > 1e-9 {
                return Err(TradeoffError::InvalidWeights(format!(
                    "row {} sums to {sum}, expected 100",
                    c.key()
                )));
            }
        }
        Ok(())
    }
}

/// A full configuration: one or two alternatives per slot plus its scored cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigCandidate {
    pub choices: BTreeMap<Slot, Vec<Alternative>>,
    pub breakdown: [f64; 4],
    pub total: f64,
}

impl ConfigCandidate {
    pub fn new(choices: BTreeMap<Slot, Vec<Alternative>>) -> Self {
        ConfigCandidate {
            choices,
            breakdown: [0.0; 4],
            total: 0.0,
        }
    }

    pub fn from_alternatives(alts: impl IntoIterator<Item = Alternative>) -> Self {
        let mut choices: BTreeMap<Slot, Vec<Alternative>> = BTreeMap::new();
        for a in alts {
            choices.entry(a.slot).or_default().push(a);
        }
        Self::new(choices)
    }

    /// Concatenated alternative codes in slot order, e.g. `A03B1B4C2D3E1F12`.
    pub fn code(&self) -> String {
        self.choices
            .values()
            .flat_map(|v| v.iter().map(|a| a.code.as_str()))
            .collect()
    }

    pub fn component(&self, c: Criterion) -> f64 {
        self.breakdown[c.index()]
    }

    fn check_complete(&self) -> Result<()> {
        for s in Slot::ALL {
            match self.choices.get(&s).map(Vec::len) {
                Some(1) | Some(2) => {}
                Some(0) | None => {
                    return Err(TradeoffError::InvalidConfig(format!("slot {s} has no choice")))
                }
                Some(n) => {
                    return Err(TradeoffError::InvalidConfig(format!(
                        "slot {s} holds {n} alternatives, at most 2 allowed"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Slot score for a criterion; merged slots use the mean.
    fn slot_score(&self, slot: Slot, c: Criterion) -> Result<f64> {
        let alts = &self.choices[&slot];
        let mut sum = 0.0;
        for a in alts {
            sum += a.score(c)?;
        }
        Ok(sum / alts.len() as f64)
    }
}

pub fn cost_component(
    weights_row: &[f64; 6],
    config: &ConfigCandidate,
    criterion: Criterion,
) -> Result<f64> {
    config.check_complete()?;
    let mut acc = 0.0;
    for s in Slot::ALL {
        let score = config.slot_score(s, criterion)?;
        acc += weights_row[s.index()] * score / 100.0;
    }
    Ok(acc)
}

pub fn total_cost(config: &ConfigCandidate, weights: &WeightMatrix) -> Result<ConfigCandidate> {
    let mut out = config.clone();
    for c in Criterion::ALL {
        out.breakdown[c.index()] = cost_component(weights.row(c), config, c)?;
    }
    out.total = out.breakdown.iter().sum();
    Ok(out)
}

fn slot_groups(catalog: &[Alternative]) -> Result<Vec<Vec<&Alternative>>> {
    let mut groups: Vec<Vec<&Alternative>> = vec![Vec::new(); 6];
    for a in catalog {
        a.validate()?;
        groups[a.slot.index()].push(a);
    }
    for (i, g) in groups.iter_mut().enumerate() {
        if g.is_empty() {
            return Err(TradeoffError::CatalogIncomplete(Slot::ALL[i]));
        }
        g.sort_by(|a, b| a.code.cmp(&b.code));
    }
    Ok(groups)
}

/// Every combination of one alternative per slot, scored, in lexicographic code order.
pub fn enumerate_configs(
    catalog: &[Alternative],
    weights: &WeightMatrix,
) -> Result<Vec<ConfigCandidate>> {
    let groups = slot_groups(catalog)?;
    let count: usize = groups.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(count);
    let mut idx = [0usize; 6];
    loop {
        let config = ConfigCandidate::from_alternatives(
            (0..6).map(|s| groups[s][idx[s]].clone()),
        );
        out.push(total_cost(&config, weights)?);

        let mut s = 6;
        loop {
            if s == 0 {
                return Ok(out);
            }
            s -= 1;
            idx[s] += 1;
            if idx[s] < groups[s].len() {
                break;
            }
            idx[s] = 0;
        }
    }
}

fn rank_order(a: &ConfigCandidate, b: &ConfigCandidate) -> std::cmp::Ordering {
    a.total
        .total_cmp(&b.total)
        .then_with(|| a.code().cmp(&b.code()))
}

/// The `k` cheapest candidates, ties broken by code.
pub fn select_optimal(candidates: &[ConfigCandidate], k: usize) -> Vec<ConfigCandidate> {
    let mut ranked: Vec<ConfigCandidate> = candidates.to_vec();
    ranked.sort_by(rank_order);
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    #[default]
    None,
    /// Fold a runner-up with equal total that differs in exactly one slot
    /// into the winner, holding both alternatives in that slot.
    TiedRunnerUp,
}

const TIE_EPS: f64 = 1e-9;

fn is_available(a: &Alternative, availability: &HashMap<String, bool>) -> bool {
    availability.get(&a.code).copied().unwrap_or(a.available)
}

/// Replace unavailable choices with the cheapest available alternative in the same slot.
fn substitute(
    config: &ConfigCandidate,
    catalog: &[Alternative],
    availability: &HashMap<String, bool>,
    weights: &WeightMatrix,
) -> Result<ConfigCandidate> {
    let mut choices = config.choices.clone();
    for (slot, alts) in choices.iter_mut() {
        if alts.iter().all(|a| is_available(a, availability)) {
            continue;
        }
        let slot_cost = |a: &Alternative| -> f64 {
            Criterion::ALL
                .into_iter()
                .map(|c| weights.row(c)[slot.index()] * a.attributes[&c] / 100.0)
                .sum()
        };
        let mut pool: Vec<&Alternative> = catalog
            .iter()
            .filter(|a| a.slot == *slot && is_available(a, availability))
            .collect();
        pool.sort_by(|a, b| {
            slot_cost(a)
                .total_cmp(&slot_cost(b))
                .then_with(|| a.code.cmp(&b.code))
        });
        let best = *pool.first().ok_or(TradeoffError::Infeasible(*slot))?;
        log::debug!("slot {slot}: substituting {} for unavailable choice", best.code);
        alts.retain(|a| is_available(a, availability));
        if !alts.iter().any(|a| a.code == best.code) {
            alts.push(best.clone());
        }
        alts.sort_by(|a, b| a.code.cmp(&b.code));
    }
    total_cost(&ConfigCandidate::new(choices), weights)
}

/// Refine the ranked selection against current supply.
///
/// Codes absent from `availability` fall back to the catalog flag.
pub fn apply_availability(
    selection: &[ConfigCandidate],
    availability: &HashMap<String, bool>,
    catalog: &[Alternative],
    weights: &WeightMatrix,
    merge: MergePolicy,
) -> Result<ConfigCandidate> {
    let first = selection.first().ok_or(TradeoffError::EmptySelection)?;
    for s in Slot::ALL {
        if !catalog
            .iter()
            .any(|a| a.slot == s && is_available(a, availability))
        {
            return Err(TradeoffError::Infeasible(s));
        }
    }
    let mut best = substitute(first, catalog, availability, weights)?;

    if merge == MergePolicy::TiedRunnerUp {
        if let Some(second) = selection.get(1) {
            if (second.total - first.total).abs() <= TIE_EPS {
                let second = substitute(second, catalog, availability, weights)?;
                let differing: Vec<Slot> = Slot::ALL
                    .into_iter()
                    .filter(|s| codes(&best, *s) != codes(&second, *s))
                    .collect();
                if let [slot] = differing[..] {
                    let mut merged = best.choices[&slot].clone();
                    merged.extend(second.choices[&slot].iter().cloned());
                    merged.sort_by(|a, b| a.code.cmp(&b.code));
                    merged.dedup_by(|a, b| a.code == b.code);
                    if merged.len() <= 2 {
                        let mut choices = best.choices.clone();
                        choices.insert(slot, merged);
                        best = total_cost(&ConfigCandidate::new(choices), weights)?;
                    }
                }
            }
        }
    }
    Ok(best)
}

fn codes(c: &ConfigCandidate, slot: Slot) -> Vec<&str> {
    c.choices
        .get(&slot)
        .map(|v| v.iter().map(|a| a.code.as_str()).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform_config(score: f64) -> ConfigCandidate {
        ConfigCandidate::from_alternatives(
            Slot::ALL
                .into_iter()
                .map(|s| Alternative::new(&format!("{s}1"), s, [score; 4], true).unwrap()),
        )
    }

    fn fixture() -> Vec<Alternative> {
        parse_catalog(include_str!("../../data/catalog.toml")).unwrap()
    }

    #[test]
    fn weight_component_hand_value() {
        let row = [0.0, 70.0, 0.0, 0.0, 0.0, 30.0];
        let mut cfg = uniform_config(13.0);
        cfg.choices.get_mut(&Slot::B).unwrap()[0]
            .attributes
            .insert(Criterion::Weight, 50.0);
        cfg.choices.get_mut(&Slot::F).unwrap()[0]
            .attributes
            .insert(Criterion::Weight, 40.0);
        let v = cost_component(&row, &cfg, Criterion::Weight).unwrap();
        assert_relative_eq!(v, 47.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_row_and_full_scores() {
        let cfg = uniform_config(77.0);
        assert_eq!(cost_component(&[0.0; 6], &cfg, Criterion::Cost).unwrap(), 0.0);
        let w = WeightMatrix::reference();
        let full = uniform_config(100.0);
        assert_relative_eq!(
            cost_component(w.row(Criterion::Cost), &full, Criterion::Cost).unwrap(),
            100.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(total_cost(&full, &w).unwrap().total, 400.0, epsilon = 1e-9);
        assert_eq!(total_cost(&uniform_config(0.0), &w).unwrap().total, 0.0);
    }

    #[test]
    fn missing_score_is_invalid() {
        let mut cfg = uniform_config(10.0);
        cfg.choices.get_mut(&Slot::C).unwrap()[0]
            .attributes
            .remove(&Criterion::Speed);
        let err = total_cost(&cfg, &WeightMatrix::reference()).unwrap_err();
        assert!(matches!(err, TradeoffError::InvalidConfig(_)));
    }

    #[test]
    fn reference_rows_sum_to_100() {
        WeightMatrix::reference().validate().unwrap();
        let mut bad = WeightMatrix::reference();
        bad.rows[2][4] = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enumeration_counts() {
        let w = WeightMatrix::reference();
        let single: Vec<_> = uniform_config(5.0).choices.into_values().flatten().collect();
        assert_eq!(enumerate_configs(&single, &w).unwrap().len(), 1);
        let mut two = single.clone();
        two.push(Alternative::new("A2", Slot::A, [1.0; 4], true).unwrap());
        assert_eq!(enumerate_configs(&two, &w).unwrap().len(), 2);
        let all = enumerate_configs(&fixture(), &w).unwrap();
        assert_eq!(all.len(), 1152);
        let codes: Vec<String> = all.iter().map(ConfigCandidate::code).collect();
        let mut sorted = codes.clone();
        sorted.sort();
        assert_eq!(codes, sorted);
    }

    #[test]
    fn empty_slot_is_incomplete() {
        let cat: Vec<_> = fixture().into_iter().filter(|a| a.slot != Slot::D).collect();
        assert_eq!(
            enumerate_configs(&cat, &WeightMatrix::reference()).unwrap_err(),
            TradeoffError::CatalogIncomplete(Slot::D)
        );
    }

    #[test]
    fn selection_order_and_ties() {
        let mut a = uniform_config(3.0);
        a.total = 3.0;
        let mut b = uniform_config(5.0);
        b.total = 5.0;
        let top = select_optimal(&[b.clone(), a.clone()], 1);
        assert_eq!(top[0].total, 3.0);
        assert_eq!(select_optimal(&[a.clone()], 10).len(), 1);

        let w = WeightMatrix::reference();
        let ranked = select_optimal(&enumerate_configs(&fixture(), &w).unwrap(), 3);
        assert_eq!(ranked[0].code(), "A03B1C2D3E1F11");
        assert_eq!(ranked[1].code(), "A03B4C2D3E1F11");
        assert_eq!(ranked[0].total, ranked[1].total);
        assert!(ranked[2].total > ranked[1].total);
    }

    #[test]
    fn availability_substitution_and_merge() {
        let w = WeightMatrix::reference();
        let cat = fixture();
        let ranked = select_optimal(&enumerate_configs(&cat, &w).unwrap(), 2);

        let all_on: HashMap<String, bool> = cat.iter().map(|a| (a.code.clone(), true)).collect();
        let same = apply_availability(&ranked, &all_on, &cat, &w, MergePolicy::None).unwrap();
        assert_eq!(same, ranked[0]);

        let f11_off = HashMap::from([("F11".to_string(), false)]);
        let sub = apply_availability(&ranked, &f11_off, &cat, &w, MergePolicy::None).unwrap();
        assert_eq!(sub.code(), "A03B1C2D3E1F12");
        assert_relative_eq!(sub.total, total_cost(&sub, &w).unwrap().total);

        let merged =
            apply_availability(&ranked, &f11_off, &cat, &w, MergePolicy::TiedRunnerUp).unwrap();
        assert_eq!(merged.code(), "A03B1B4C2D3E1F12");
        assert_eq!(merged.choices[&Slot::B].len(), 2);

        let f_off = HashMap::from([("F11".to_string(), false), ("F12".to_string(), false)]);
        assert_eq!(
            apply_availability(&ranked, &f_off, &cat, &w, MergePolicy::None).unwrap_err(),
            TradeoffError::Infeasible(Slot::F)
        );
    }

    #[test]
    fn alternative_validation() {
        assert!(Alternative::new("B1", Slot::A, [1.0; 4], true).is_err());
        assert!(Alternative::new("A1", Slot::A, [101.0, 1.0, 1.0, 1.0], true).is_err());
        assert!(Alternative::new("A1", Slot::A, [f64::NAN, 1.0, 1.0, 1.0], true).is_err());
    }
}
