//! Naming and role tags shared by every parameter container.

use std::fmt;

/// Role tag stored next to each tensor in a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Encoder = 0,
    Adapter = 1,
    Scan = 2,
    Head = 3,
    Norm = 4,
    Variant = 5,
    AdamFirst = 6,
    AdamSecond = 7,
    AdamStep = 8,
}

impl Role {
    pub fn from_tag(tag: u8) -> Option<Role> {
        use Role::*;
        [Encoder, Adapter, Scan, Head, Norm, Variant, AdamFirst, AdamSecond, AdamStep]
            .into_iter()
            .find(|r| *r as u8 == tag)
    }

    /// Whether the optimizer updates tensors with this role.
    pub fn trainable(self) -> bool {
        matches!(
            self,
            Role::Encoder | Role::Adapter | Role::Scan | Role::Head | Role::Variant
        )
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Encoder => "encoder",
            Role::Adapter => "adapter",
            Role::Scan => "scan",
            Role::Head => "head",
            Role::Norm => "norm",
            Role::Variant => "variant",
            Role::AdamFirst => "adam_m",
            Role::AdamSecond => "adam_v",
            Role::AdamStep => "adam_step",
        };
        f.write_str(s)
    }
}

pub(crate) type Visit<'a, T> = Vec<(String, Role, &'a T)>;
pub(crate) type VisitMut<'a, T> = Vec<(String, Role, &'a mut T)>;
