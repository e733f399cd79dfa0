//! Vertebra label codes.
//!
//! Codes follow the usual segmentation convention: 0 is background,
//! 1..=7 are C1..C7, 8..=19 are T1..T12 and 20..=24 are L1..L5.

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const MAX_CODE: u8 = 24;

/// Anatomic name for a vertebra code, e.g. `21 -> "L2"`.
pub fn name(code: u8) -> Option<String> {
    match code {
        1..=7 => Some(format!("C{code}")),
        8..=19 => Some(format!("T{}", code - 7)),
        20..=24 => Some(format!("L{}", code - 19)),
        _ => None,
    }
}

/// Parses `"L2"`, `"t12"` or a bare numeric code such as `"21"`.
pub fn parse(label: &str) -> Result<u8> {
    let s = label.trim();
    let bad = || Error::InvalidInput(format!("unknown vertebra label {label:?}"));
    if let Ok(code) = s.parse::<u8>() {
        return if (1..=MAX_CODE).contains(&code) {
            Ok(code)
        } else {
            Err(bad())
        };
    }
    let mut chars = s.chars();
    let region = chars.next().ok_or_else(bad)?.to_ascii_uppercase();
    let index: u8 = chars.as_str().parse().map_err(|_| bad())?;
    let (offset, count) = match region {
        'C' => (0, 7),
        'T' => (7, 12),
        'L' => (19, 5),
        _ => return Err(bad()),
    };
    if index == 0 || index > count {
        return Err(bad());
    }
    Ok(offset + index)
}

/// Display helper that falls back to the numeric code.
pub fn display(code: u8) -> String {
    name(code).unwrap_or_else(|| code.to_string())
}
