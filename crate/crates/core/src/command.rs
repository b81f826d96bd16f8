//! Supervisory commands issued by an operator.

use serde::{Deserialize, Serialize};

use crate::careplan::ActuationProfile;
use crate::node::NodeId;

/// Camera pan limit either side of center, degrees.
pub const CAMERA_PAN_LIMIT_DEG: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub id: u64,
    #[serde(flatten)]
    pub kind: CommandKind,
    /// Sim time at which the operator issued it.
    pub issued_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CommandKind {
    PriorityCheckup { node: NodeId },
    ManualDispense { node: NodeId, profile: ActuationProfile },
    FluidSupply { node: NodeId, liters: f64 },
    CameraPan { degrees: f64 },
    ReturnToDock,
    SetSchedule { checkup_times: Vec<f64> },
    ReloadCareplan { path: String },
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::PriorityCheckup { .. } => "priority_checkup",
            CommandKind::ManualDispense { .. } => "manual_dispense",
            CommandKind::FluidSupply { .. } => "fluid_supply",
            CommandKind::CameraPan { .. } => "camera_pan",
            CommandKind::ReturnToDock => "return_to_dock",
            CommandKind::SetSchedule { .. } => "set_schedule",
            CommandKind::ReloadCareplan { .. } => "reload_careplan",
        }
    }

    pub fn is_priority(&self) -> bool {
        matches!(self, CommandKind::PriorityCheckup { .. })
    }

    pub fn node(&self) -> Option<NodeId> {
        match self {
            CommandKind::PriorityCheckup { node }
            | CommandKind::ManualDispense { node, .. }
            | CommandKind::FluidSupply { node, .. } => Some(*node),
            _ => None,
        }
    }

    /// Checks that do not depend on robot state.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            CommandKind::CameraPan { degrees } => {
                if !degrees.is_finite() || degrees.abs() > CAMERA_PAN_LIMIT_DEG {
                    return Err(format!(
                        "camera pan {degrees} deg outside limit of +/-{CAMERA_PAN_LIMIT_DEG} deg"
                    ));
                }
            }
            CommandKind::FluidSupply { liters, .. } => {
                if !(liters.is_finite() && *liters > 0.0 && *liters <= 1.0) {
                    return Err(format!("fluid volume {liters} L outside (0, 1]"));
                }
            }
            CommandKind::ManualDispense { profile, .. } => {
                profile.validate().map_err(|e| e.to_string())?;
                if profile.is_noop() {
                    return Err("dispense profile is empty".into());
                }
            }
            CommandKind::SetSchedule { checkup_times } => {
                let s = crate::simworld::Schedule {
                    checkup_times: checkup_times.clone(),
                    round_order: vec![NodeId::new(1).expect("valid id")],
                };
                s.validate()?;
            }
            _ => {}
        }
        Ok(())
    }
}
