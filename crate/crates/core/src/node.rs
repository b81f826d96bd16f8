use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Patient branch node, `B01` through `B08`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u8);

pub const MAX_NODES: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown node `{0}`")]
pub struct UnknownNode(pub String);

impl NodeId {
    pub fn new(index: u8) -> Result<Self, UnknownNode> {
        if (1..=MAX_NODES).contains(&index) {
            Ok(Self(index))
        } else {
            Err(UnknownNode(format!("B0{index}")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// All eight nodes in default round order.
    pub fn all() -> impl Iterator<Item = NodeId> {
        (1..=MAX_NODES).map(NodeId)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B0{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = UnknownNode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digit = s
            .strip_prefix("B0")
            .filter(|rest| rest.len() == 1)
            .and_then(|rest| rest.parse::<u8>().ok());
        match digit {
            Some(d) if (1..=MAX_NODES).contains(&d) => Ok(NodeId(d)),
            _ => Err(UnknownNode(s.to_string())),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_ids() {
        for i in 1..=8 {
            let id: NodeId = format!("B0{i}").parse().unwrap();
            assert_eq!(id.index(), i);
            assert_eq!(id.to_string(), format!("B0{i}"));
        }
    }

    #[test]
    fn rejects_out_of_pattern() {
        for bad in ["B00", "B09", "B99", "B1", "b01", "B010", "", "R01"] {
            assert!(bad.parse::<NodeId>().is_err(), "{bad}");
        }
    }
}
