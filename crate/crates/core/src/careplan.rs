//! Health classification, medication rules and three-cylinder dispensing.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::sensors::VitalSigns;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CareplanError {
    #[error("no rule covers health state {0:?}")]
    UnknownState(Vec<HealthFlag>),
    #[error("cylinder {0} is out of stock")]
    OutOfStock(u8),
    #[error("invalid care plan config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CareplanError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthFlag {
    Fever,
    Hypoxia,
    Tachycardia,
    Bradycardia,
    Normal,
}

impl HealthFlag {
    pub fn name(self) -> &'static str {
        match self {
            HealthFlag::Fever => "fever",
            HealthFlag::Hypoxia => "hypoxia",
            HealthFlag::Tachycardia => "tachycardia",
            HealthFlag::Bradycardia => "bradycardia",
            HealthFlag::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthState {
    pub flags: BTreeSet<HealthFlag>,
    pub source: VitalSigns,
}

impl HealthState {
    pub fn is_normal(&self) -> bool {
        self.flags.contains(&HealthFlag::Normal)
    }

    /// Comma-joined flag names, e.g. `fever,hypoxia`.
    pub fn label(&self) -> String {
        self.flags.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MedAction {
    M01,
    M02,
    M03,
    #[serde(rename = "fluid")]
    Fluid,
    #[serde(rename = "oxygen_mask")]
    OxygenMask,
    #[serde(rename = "none")]
    None,
}

impl MedAction {
    /// Cylinder number for medicine actions.
    pub fn cylinder(self) -> Option<u8> {
        match self {
            MedAction::M01 => Some(1),
            MedAction::M02 => Some(2),
            MedAction::M03 => Some(3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Medicine(u8);

impl Medicine {
    pub fn new(cylinder: u8) -> Result<Self> {
        if (1..=3).contains(&cylinder) {
            Ok(Medicine(cylinder))
        } else {
            Err(CareplanError::Config(format!("no cylinder {cylinder}")))
        }
    }

    pub fn cylinder(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Medicine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M0{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MedicationPlan {
    pub actions: BTreeSet<MedAction>,
}

impl MedicationPlan {
    pub fn none() -> Self {
        MedicationPlan {
            actions: BTreeSet::from([MedAction::None]),
        }
    }

    pub fn is_none(&self) -> bool {
        self.actions.iter().all(|a| *a == MedAction::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub fever_f: f64,
    pub hypoxia_spo2: f64,
    pub tachycardia_hr: f64,
    pub bradycardia_hr: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            fever_f: 100.4,
            hypoxia_spo2: 94.0,
            tachycardia_hr: 100.0,
            bradycardia_hr: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dosing {
    pub valve_seconds: f64,
    pub fluid_liters: f64,
    pub fluid_interval_h: f64,
    pub pump_liters_per_hour: f64,
}

impl Default for Dosing {
    fn default() -> Self {
        Dosing {
            valve_seconds: 2.88,
            fluid_liters: 0.05,
            fluid_interval_h: 6.0,
            pump_liters_per_hour: 96.42,
        }
    }
}

impl Dosing {
    pub fn pump_seconds(&self, liters: f64) -> f64 {
        liters / (self.pump_liters_per_hour / 3600.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub when: BTreeSet<HealthFlag>,
    pub give: BTreeSet<MedAction>,
}

/// Thresholds, rule table and dosing, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarePlanConfig {
    pub thresholds: Thresholds,
    pub dosing: Dosing,
    #[serde(rename = "rule")]
    pub rules: Vec<Rule>,
}

pub const DEFAULT_CAREPLAN: &str = include_str!("../data/careplan.toml");

impl Default for CarePlanConfig {
    fn default() -> Self {
        CarePlanConfig::parse(DEFAULT_CAREPLAN).expect("bundled care plan is valid")
    }
}

impl CarePlanConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: CarePlanConfig =
            toml::from_str(text).map_err(|e| CareplanError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CareplanError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CareplanError::Config(m) => CareplanError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        if ![t.fever_f, t.hypoxia_spo2, t.tachycardia_hr, t.bradycardia_hr]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(CareplanError::Config("thresholds must be finite".into()));
        }
        if t.bradycardia_hr >= t.tachycardia_hr {
            return Err(CareplanError::Config(
                "bradycardia bound must be below tachycardia bound".into(),
            ));
        }
        let d = &self.dosing;
        if !(d.valve_seconds > 0.0 && d.fluid_liters >= 0.0 && d.fluid_interval_h >= 0.0)
            || !(d.pump_liters_per_hour > 0.0)
        {
            return Err(CareplanError::Config("dosing values out of range".into()));
        }
        if 3.0 * d.valve_seconds > MAX_VALVE_TIME_S {
            return Err(CareplanError::Config(format!(
                "three valves at {} s exceed {MAX_VALVE_TIME_S} s",
                d.valve_seconds
            )));
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.when.is_empty() || r.give.is_empty() {
                return Err(CareplanError::Config(format!("rule {} is empty", i + 1)));
            }
            if r.when.contains(&HealthFlag::Normal) && r.when.len() > 1 {
                return Err(CareplanError::Config(format!(
                    "rule {} combines normal with other flags",
                    i + 1
                )));
            }
            if r.give.contains(&MedAction::None) && r.give.len() > 1 {
                return Err(CareplanError::Config(format!(
                    "rule {} combines none with other actions",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Upper bound on the summed valve-open time of one profile.
pub const MAX_VALVE_TIME_S: f64 = 10.0;

pub fn classify(v: &VitalSigns, t: &Thresholds) -> HealthState {
    let mut flags = BTreeSet::new();
    if v.temp_f >= t.fever_f {
        flags.insert(HealthFlag::Fever);
    }
    if v.spo2 < t.hypoxia_spo2 {
        flags.insert(HealthFlag::Hypoxia);
    }
    if v.heart_rate > t.tachycardia_hr {
        flags.insert(HealthFlag::Tachycardia);
    }
    if v.heart_rate < t.bradycardia_hr {
        flags.insert(HealthFlag::Bradycardia);
    }
    if flags.is_empty() {
        flags.insert(HealthFlag::Normal);
    }
    HealthState { flags, source: *v }
}

/// Union of all rules whose flags are present. `fluid_due` adds fluid for
/// any abnormal state.
pub fn prescribe(state: &HealthState, rules: &[Rule], fluid_due: bool) -> Result<MedicationPlan> {
    let mut actions = BTreeSet::new();
    let mut covered: BTreeSet<HealthFlag> = BTreeSet::new();
    for r in rules {
        if r.when.is_subset(&state.flags) {
            actions.extend(r.give.iter().copied());
            covered.extend(r.when.iter().copied());
        }
    }
    if covered != state.flags {
        return Err(CareplanError::UnknownState(
            state.flags.difference(&covered).copied().collect(),
        ));
    }
    if !state.is_normal() {
        actions.remove(&MedAction::None);
        if fluid_due {
            actions.insert(MedAction::Fluid);
        }
    }
    if actions.is_empty() {
        actions.insert(MedAction::None);
    }
    Ok(MedicationPlan { actions })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuationProfile {
    /// Seconds each cylinder valve stays open, cylinders 1..=3.
    pub valve_open: [f64; 3],
    pub pump_volume: f64,
    pub mask_flag: bool,
}

impl ActuationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.valve_open.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CareplanError::Config("valve durations must be >= 0".into()));
        }
        if !(self.pump_volume.is_finite() && self.pump_volume >= 0.0) {
            return Err(CareplanError::Config("pump volume must be >= 0".into()));
        }
        if self.valve_time() > MAX_VALVE_TIME_S {
            return Err(CareplanError::Config(format!(
                "valve time {:.2} s exceeds {MAX_VALVE_TIME_S} s",
                self.valve_time()
            )));
        }
        Ok(())
    }

    pub fn valve_time(&self) -> f64 {
        self.valve_open.iter().sum()
    }

    pub fn is_noop(&self) -> bool {
        self.valve_time() == 0.0 && self.pump_volume == 0.0 && !self.mask_flag
    }
}

pub fn actuation_profile(plan: &MedicationPlan, dosing: &Dosing) -> ActuationProfile {
    let mut p = ActuationProfile::default();
    for a in &plan.actions {
        match a {
            MedAction::Fluid => p.pump_volume += dosing.fluid_liters,
            MedAction::OxygenMask => p.mask_flag = true,
            MedAction::None => {}
            m => {
                let c = m.cylinder().expect("medicine action") as usize;
                p.valve_open[c - 1] = dosing.valve_seconds;
            }
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispenseMode {
    Routine,
    Supervisory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispenseRecord {
    pub patient: NodeId,
    pub medicine: Medicine,
    pub timestamp: f64,
    pub duration: f64,
    pub mode: DispenseMode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispenseOutcome {
    pub records: Vec<DispenseRecord>,
    pub stockouts: Vec<CareplanError>,
    /// Time at which the last valve closed.
    pub end_time: f64,
}

/// Opens commanded valves one after another in cylinder order, starting at
/// `start`. Each dispensed dose takes one unit from `stock`.
pub fn dispense(
    profile: &ActuationProfile,
    patient: NodeId,
    mode: DispenseMode,
    start: f64,
    stock: &mut [u32; 3],
) -> DispenseOutcome {
    let mut out = DispenseOutcome {
        end_time: start,
        ..Default::default()
    };
    for (i, &secs) in profile.valve_open.iter().enumerate() {
        if secs <= 0.0 {
            continue;
        }
        let cyl = i as u8 + 1;
        if stock[i] == 0 {
            out.stockouts.push(CareplanError::OutOfStock(cyl));
            continue;
        }
        stock[i] -= 1;
        out.records.push(DispenseRecord {
            patient,
            medicine: Medicine(cyl),
            timestamp: out.end_time,
            duration: secs,
            mode,
        });
        out.end_time += secs;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vitals(hr: f64, spo2: f64, t: f64) -> VitalSigns {
        VitalSigns::new(hr, spo2, t, 0.0).unwrap()
    }

    fn flags(fs: &[HealthFlag]) -> BTreeSet<HealthFlag> {
        fs.iter().copied().collect()
    }

    fn state(fs: &[HealthFlag]) -> HealthState {
        HealthState {
            flags: flags(fs),
            source: vitals(75.0, 98.0, 98.6),
        }
    }

    fn actions(a: &[MedAction]) -> BTreeSet<MedAction> {
        a.iter().copied().collect()
    }

    #[test]
    fn classification_table() {
        let t = Thresholds::default();
        assert_eq!(classify(&vitals(75.0, 98.0, 98.6), &t).flags, flags(&[HealthFlag::Normal]));
        assert_eq!(
            classify(&vitals(120.0, 91.0, 101.2), &t).flags,
            flags(&[HealthFlag::Fever, HealthFlag::Hypoxia, HealthFlag::Tachycardia])
        );
        assert_eq!(classify(&vitals(100.0, 98.0, 98.6), &t).flags, flags(&[HealthFlag::Normal]));
        assert_eq!(classify(&vitals(60.0, 94.0, 100.3), &t).flags, flags(&[HealthFlag::Normal]));
        assert_eq!(
            classify(&vitals(59.9, 98.0, 100.4), &t).flags,
            flags(&[HealthFlag::Fever, HealthFlag::Bradycardia])
        );
    }

    #[test]
    fn prescription_union() {
        let cfg = CarePlanConfig::default();
        let p = |fs: &[HealthFlag], fluid| prescribe(&state(fs), &cfg.rules, fluid).unwrap().actions;
        assert_eq!(p(&[HealthFlag::Normal], true), actions(&[MedAction::None]));
        assert_eq!(p(&[HealthFlag::Fever], false), actions(&[MedAction::M01]));
        assert_eq!(
            p(&[HealthFlag::Hypoxia, HealthFlag::Fever], false),
            actions(&[MedAction::M01, MedAction::M03, MedAction::OxygenMask])
        );
        assert_eq!(
            p(&[HealthFlag::Bradycardia], true),
            actions(&[MedAction::M02, MedAction::Fluid])
        );
    }

    #[test]
    fn uncovered_state_is_error() {
        let rules: Vec<Rule> = CarePlanConfig::default()
            .rules
            .into_iter()
            .filter(|r| !r.when.contains(&HealthFlag::Hypoxia))
            .collect();
        let err = prescribe(&state(&[HealthFlag::Hypoxia, HealthFlag::Fever]), &rules, false).unwrap_err();
        assert_eq!(err, CareplanError::UnknownState(vec![HealthFlag::Hypoxia]));
    }

    #[test]
    fn profiles() {
        let d = Dosing::default();
        assert!(actuation_profile(&MedicationPlan::none(), &d).is_noop());
        let p = actuation_profile(&MedicationPlan { actions: actions(&[MedAction::M02]) }, &d);
        assert_eq!(p.valve_open, [0.0, 2.88, 0.0]);
        let f = actuation_profile(&MedicationPlan { actions: actions(&[MedAction::Fluid]) }, &d);
        assert_relative_eq!(d.pump_seconds(f.pump_volume), 0.05 * 3600.0 / 96.42, epsilon = 1e-12);
        assert!((d.pump_seconds(f.pump_volume) - 1.87).abs() < 0.01);
    }

    #[test]
    fn sequential_dispense() {
        let node = NodeId::new(1).unwrap();
        let mut stock = [5, 5, 5];
        let none = dispense(&ActuationProfile::default(), node, DispenseMode::Routine, 3.0, &mut stock);
        assert!(none.records.is_empty());
        assert_eq!(none.end_time, 3.0);

        let prof = ActuationProfile {
            valve_open: [2.88, 0.0, 2.88],
            ..Default::default()
        };
        let out = dispense(&prof, node, DispenseMode::Routine, 10.0, &mut stock);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].medicine.cylinder(), 1);
        assert_eq!(out.records[1].medicine.cylinder(), 3);
        assert_relative_eq!(out.records[1].timestamp, 12.88);
        assert!(out.end_time - 10.0 >= 5.76 - 1e-12);
        assert_eq!(stock, [4, 5, 4]);
    }

    #[test]
    fn stockout() {
        let mut stock = [1, 0, 1];
        let prof = ActuationProfile {
            valve_open: [0.0, 2.88, 0.0],
            ..Default::default()
        };
        let out = dispense(&prof, NodeId::new(2).unwrap(), DispenseMode::Supervisory, 0.0, &mut stock);
        assert!(out.records.is_empty());
        assert_eq!(out.stockouts, vec![CareplanError::OutOfStock(2)]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CarePlanConfig::default();
        cfg.dosing.valve_seconds = 4.0;
        assert!(cfg.validate().is_err());
        let bad = DEFAULT_CAREPLAN.replace("give = [\"none\"]", "give = [\"none\", \"M01\"]");
        assert!(CarePlanConfig::parse(&bad).is_err());
        let typo = DEFAULT_CAREPLAN.replace("\"fever\"]", "\"feverish\"]");
        assert!(CarePlanConfig::parse(&typo).is_err());
    }
}
