//! Versioned JSON envelopes for trained networks.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format: String,
    pub version: u32,
    pub body: T,
}

impl<'a, T: Serialize> Versioned<&'a T> {
    pub fn new(kind: &str, body: &'a T) -> Self {
        Self { format: format!("side-lab/{kind}"), version: CHECKPOINT_VERSION, body }
    }
}

impl<T: DeserializeOwned> Versioned<T> {
    pub fn parse(kind: &str, s: &str) -> Result<T> {
        let v: Versioned<serde_json::Value> = serde_json::from_str(s)?;
        let want = format!("side-lab/{kind}");
        if v.format != want {
            return Err(Error::Checkpoint(format!("expected format {want}, found {}", v.format)));
        }
        if v.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", v.version)));
        }
        Ok(serde_json::from_value(v.body)?)
    }
}
