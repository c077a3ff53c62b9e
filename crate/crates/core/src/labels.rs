//! The BIO2 label inventory.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityType {
    Per,
    Loc,
    Org,
    Misc,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Per, EntityType::Loc, EntityType::Org, EntityType::Misc];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
            EntityType::Misc => "MISC",
        }
    }

    /// Long name as used in corpus statistics tables.
    pub fn long_name(self) -> &'static str {
        match self {
            EntityType::Per => "Person",
            EntityType::Loc => "Location",
            EntityType::Org => "Organization",
            EntityType::Misc => "Misc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PER" => Ok(EntityType::Per),
            "LOC" => Ok(EntityType::Loc),
            "ORG" => Ok(EntityType::Org),
            "MISC" => Ok(EntityType::Misc),
            _ => Err(Error::Contract(format!("unknown entity type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(EntityType),
    I(EntityType),
}

/// Number of labels: O plus B-/I- for four types.
pub const NUM_LABELS: usize = 9;

impl Tag {
    /// All labels in their fixed index order.
    pub const ALL: [Tag; NUM_LABELS] = [
        Tag::O,
        Tag::B(EntityType::Per),
        Tag::I(EntityType::Per),
        Tag::B(EntityType::Loc),
        Tag::I(EntityType::Loc),
        Tag::B(EntityType::Org),
        Tag::I(EntityType::Org),
        Tag::B(EntityType::Misc),
        Tag::I(EntityType::Misc),
    ];

    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t.index(),
            Tag::I(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Tag::ALL.get(i).copied()
    }

    pub fn entity_type(self) -> Option<EntityType> {
        match self {
            Tag::O => None,
            Tag::B(t) | Tag::I(t) => Some(t),
        }
    }

    /// Whether `next` may follow `prev` (`None` = sequence start) under BIO2.
    pub fn can_follow(prev: Option<Tag>, next: Tag) -> bool {
        match next {
            Tag::O | Tag::B(_) => true,
            Tag::I(t) => matches!(prev, Some(Tag::B(p)) | Some(Tag::I(p)) if p == t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Tag::O);
        }
        match s.split_once('-') {
            Some(("B", t)) => Ok(Tag::B(t.parse()?)),
            Some(("I", t)) => Ok(Tag::I(t.parse()?)),
            _ => Err(Error::Contract(format!("unknown tag `{s}`"))),
        }
    }
}

/// True when no I-X appears at the start, after O, or after another type.
pub fn is_well_formed(tags: &[Tag]) -> bool {
    let mut prev = None;
    for &t in tags {
        if !Tag::can_follow(prev, t) {
            return false;
        }
        prev = Some(t);
    }
    true
}
