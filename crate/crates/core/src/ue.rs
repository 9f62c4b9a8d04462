use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::qos::ServiceKind;
use crate::radio::{Position, PowerClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UeId(pub u32);

impl fmt::Display for UeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ue{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UeClass {
    #[serde(alias = "mc")]
    MissionCritical,
    Commercial,
}

impl UeClass {
    pub fn is_mc(self) -> bool {
        self == UeClass::MissionCritical
    }
}

impl fmt::Display for UeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UeClass::MissionCritical => "mc",
            UeClass::Commercial => "commercial",
        })
    }
}

/// Access identity carried by mission-critical subscriptions.
pub const MC_ACCESS_IDENTITY: u8 = 1;
/// Access category for ordinary mobile-originated data.
pub const CATEGORY_MO_DATA: u8 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeContext {
    pub id: UeId,
    pub class: UeClass,
    pub access_identities: BTreeSet<u8>,
    pub access_category: u8,
    pub position: Position,
    pub power_class: PowerClass,
    pub services: Vec<ServiceKind>,
}

impl UeContext {
    pub fn new(id: UeId, class: UeClass) -> Self {
        let access_identities = match class {
            UeClass::MissionCritical => BTreeSet::from([MC_ACCESS_IDENTITY]),
            UeClass::Commercial => BTreeSet::new(),
        };
        let services = match class {
            UeClass::MissionCritical => vec![ServiceKind::McpttVoice],
            UeClass::Commercial => vec![ServiceKind::Commercial],
        };
        UeContext {
            id,
            class,
            access_identities,
            access_category: CATEGORY_MO_DATA,
            position: Position::ORIGIN,
            power_class: PowerClass::default(),
            services,
        }
    }

    pub fn at(mut self, position: Position) -> Self {
        self.position = position;
        self
    }

    pub fn with_services(mut self, services: Vec<ServiceKind>) -> Self {
        self.services = services;
        self
    }
}
