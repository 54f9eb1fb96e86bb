//! Gateway time source. Lifetimes are measured in whole seconds, either from
//! the wall clock or from a logical clock that only moves when told to.

use crate::config::ClockMode;
use crate::error::{GvfError, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug)]
pub enum Clock {
    Wall,
    Logical(AtomicU64),
}

impl Clock {
    pub fn new(mode: ClockMode) -> Clock {
        match mode {
            ClockMode::Wall => Clock::Wall,
            ClockMode::Logical => Clock::logical(),
        }
    }

    pub fn logical() -> Clock {
        Clock::Logical(AtomicU64::new(0))
    }

    pub fn now(&self) -> u64 {
        match self {
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            Clock::Logical(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Moves a logical clock forward and returns the new time.
    pub fn advance(&self, secs: u64) -> Result<u64> {
        match self {
            Clock::Wall => Err(GvfError::badreq("the wall clock cannot be advanced")),
            Clock::Logical(t) => Ok(t.fetch_add(secs, Ordering::SeqCst) + secs),
        }
    }
}
