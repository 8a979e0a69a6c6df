//! Secret probe: does data from one request survive into the next?

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::workload::BenchEnv;
use crate::error::{Error, Result};
use crate::manager::{Mode, RequestEnvelope};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: String,
    pub trials: usize,
    /// Trials in which the second request found the first one's token.
    pub found: usize,
}

/// Stores a fresh token in one request and searches for it in the next,
/// `trials` times against one guest.
pub fn secret_probe(env: &BenchEnv, mode: Mode, trials: usize, mut token: impl FnMut() -> String) -> Result<ProbeResult> {
    let mut guest = env.start(mode, 64)?;
    let mut found = 0;
    for t in 0..trials {
        let secret = token();
        let mut ask = |id: String, value| -> Result<serde_json::Value> {
            let req = RequestEnvelope::new(id, value, None, Instant::now());
            let ex = guest.handle_request(&req, |_| {})?;
            ex.result.ok_or_else(|| Error::GuestError("probe request timed out".into()))
        };
        ask(format!("store-{t}"), json!({"op": "store_secret", "token": secret}))?;
        let r = ask(format!("find-{t}"), json!({"op": "find_secret", "token": secret}))?;
        match r["found"].as_bool() {
            Some(true) => found += 1,
            Some(false) => {}
            None => return Err(Error::GuestError(format!("unexpected probe result {r}"))),
        }
    }
    guest.shutdown()?;
    Ok(ProbeResult { mode: mode.to_string(), trials, found })
}
