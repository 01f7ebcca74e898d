//! Output pacing: how many points are due at a given time since the start of a run.

use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::protocol::BLOCK_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Continuous output at 2272 points/s.
    Bench,
    /// Blocks of 300 points at 2000 points/s, each followed by a 100 ms pause: 1200 points/s on average.
    Console,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bench" => Ok(Profile::Bench),
            "console" => Ok(Profile::Console),
            other => Err(format!("unknown profile '{other}' (expected bench or console)")),
        }
    }
}

pub const BENCH_RATE: f64 = 2272.0;
pub const CONSOLE_BURST_RATE: f64 = 2000.0;
pub const CONSOLE_PAUSE: Duration = Duration::from_millis(100);

impl Profile {
    /// Long-run average points per second.
    pub fn average_rate(self) -> f64 {
        match self {
            Profile::Bench => BENCH_RATE,
            Profile::Console => {
                let block = BLOCK_SIZE as f64;
                block / (block / CONSOLE_BURST_RATE + CONSOLE_PAUSE.as_secs_f64())
            }
        }
    }

    /// Number of points whose emission time is at or before `elapsed`.
    pub fn due(self, elapsed: Duration) -> u64 {
        let t = elapsed.as_secs_f64();
        match self {
            Profile::Bench => (t * BENCH_RATE).floor() as u64,
            Profile::Console => {
                let block = BLOCK_SIZE as f64;
                let period = block / CONSOLE_BURST_RATE + CONSOLE_PAUSE.as_secs_f64();
                let full = (t / period).floor();
                let within = ((t - full * period) * CONSOLE_BURST_RATE).floor().min(block);
                (full * block + within) as u64
            }
        }
    }
}

/// Tracks emitted points against the profile schedule.
#[derive(Debug, Clone)]
pub struct Pacer {
    profile: Profile,
    emitted: u64,
    max_burst: u64,
}

impl Pacer {
    pub fn new(profile: Profile) -> Self {
        Self {
            profile,
            emitted: 0,
            max_burst: BLOCK_SIZE as u64,
        }
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn reset(&mut self) {
        self.emitted = 0;
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    /// Points to emit now; at most one block per call so a late tick cannot flood clients.
    pub fn take(&mut self, elapsed: Duration) -> u64 {
        let due = self.profile.due(elapsed).saturating_sub(self.emitted).min(self.max_burst);
        self.emitted += due;
        due
    }
}
