//! Label-space declaration shared by tasks and guidelines.

use serde::{Deserialize, Serialize};

/// Label space of a moderation task: binary (0 = compliant, 1 = violating) or
/// a K-way scheme where class 0 is the none/safe class when one exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    MultiClass { classes: u32 },
}

impl LabelKind {
    /// Number of valid labels; labels run 0..count.
    pub fn class_count(self) -> u32 {
        match self {
            LabelKind::Binary => 2,
            LabelKind::MultiClass { classes } => classes,
        }
    }

    /// True when `label` is inside this label space.
    pub fn contains(self, label: u32) -> bool {
        label < self.class_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts() {
        assert_eq!(LabelKind::Binary.class_count(), 2);
        assert_eq!(LabelKind::MultiClass { classes: 14 }.class_count(), 14);
        assert!(LabelKind::Binary.contains(1));
        assert!(!LabelKind::Binary.contains(2));
    }

    #[test]
    fn serde_shape_is_tagged() {
        let j = serde_json::to_string(&LabelKind::MultiClass { classes: 4 }).unwrap();
        assert_eq!(j, r#"{"kind":"multi_class","classes":4}"#);
        let b: LabelKind = serde_json::from_str(r#"{"kind":"binary"}"#).unwrap();
        assert_eq!(b, LabelKind::Binary);
    }
}
