//! Request loop: newline-delimited envelopes in, responses out, one request
//! in the guest at a time.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{debug, warn};
use serde::Serialize;

use super::guest::{Exchange, GuestHandle};
use super::protocol::{codes, error_envelope, RequestEnvelope};
use crate::error::Result;
use crate::restore::RestoreReport;

/// One line of `--stats-out`.
#[derive(Clone, Debug, Serialize)]
pub struct RequestStats {
    pub id: String,
    pub mode: String,
    pub domain: Option<String>,
    /// From arrival at the supervisor until forwarded to the guest.
    pub queue_us: u64,
    /// Rollback that ran in front of this request.
    pub pre_restore_us: u64,
    /// Forwarded until the response line arrived.
    pub latency_us: u64,
    pub restore_us: u64,
    pub timed_out: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restore: Option<RestoreReport>,
}

impl RequestStats {
    pub fn of(guest: &GuestHandle, req: &RequestEnvelope, ex: &Exchange) -> Self {
        let queue = ex.forwarded_at.saturating_duration_since(req.received_at);
        RequestStats {
            id: ex.id.clone(),
            mode: guest.mode().to_string(),
            domain: req.domain.clone(),
            queue_us: queue.as_micros() as u64,
            pre_restore_us: ex.pre_restore.as_ref().map_or(0, |r| r.total_us),
            latency_us: ex.latency().as_micros() as u64,
            restore_us: ex.restore.as_ref().map_or(0, |r| r.total_us),
            timed_out: ex.timed_out,
            restore: ex.restore.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServeSummary {
    pub served: u64,
    pub rejected: u64,
    pub timed_out: u64,
}

enum Item {
    Request(RequestEnvelope),
    Rejected,
}

type SharedOut = Arc<Mutex<Box<dyn Write + Send>>>;

fn emit(out: &SharedOut, line: &str) {
    let mut o = out.lock().unwrap_or_else(|p| p.into_inner());
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    if let Err(e) = o.write_all(&buf).and_then(|_| o.flush()) {
        warn!("cannot write response: {e}");
    }
}

/// Serves requests from `input` until EOF. Malformed lines, duplicate ids
/// and queue overflow are answered directly with error envelopes.
pub fn serve(
    guest: &mut GuestHandle,
    input: impl Read + Send + 'static,
    output: impl Write + Send + 'static,
    mut stats: Option<Box<dyn Write>>,
    max_queue: Option<usize>,
) -> Result<ServeSummary> {
    let out: SharedOut = Arc::new(Mutex::new(Box::new(output)));
    let queued = Arc::new(AtomicUsize::new(0));
    let (tx, rx) = mpsc::channel::<Item>();

    let reader = {
        let out = Arc::clone(&out);
        let queued = Arc::clone(&queued);
        std::thread::spawn(move || {
            let mut seen = HashSet::new();
            for line in BufReader::new(input).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                let now = Instant::now();
                let item = match RequestEnvelope::parse(&line, now) {
                    Err(msg) => {
                        emit(&out, &error_envelope("", codes::BAD_REQUEST, &msg));
                        Item::Rejected
                    }
                    Ok(req) if !seen.insert(req.activation_id.clone()) => {
                        emit(&out, &error_envelope(&req.activation_id, codes::BAD_REQUEST, "duplicate activation id"));
                        Item::Rejected
                    }
                    Ok(req) if max_queue.is_some_and(|m| queued.load(Ordering::SeqCst) >= m) => {
                        emit(&out, &error_envelope(&req.activation_id, codes::QUEUE_FULL, "request queue is full"));
                        Item::Rejected
                    }
                    Ok(req) => {
                        queued.fetch_add(1, Ordering::SeqCst);
                        Item::Request(req)
                    }
                };
                if tx.send(item).is_err() {
                    break;
                }
            }
        })
    };

    let mut summary = ServeSummary::default();
    let mut result = Ok(());
    for item in rx.iter() {
        let req = match item {
            Item::Rejected => {
                summary.rejected += 1;
                continue;
            }
            Item::Request(r) => r,
        };
        queued.fetch_sub(1, Ordering::SeqCst);
        let outcome = guest.handle_request(&req, |ex| emit(&out, &ex.response));
        match outcome {
            Ok(ex) => {
                summary.served += 1;
                summary.timed_out += u64::from(ex.timed_out);
                if let Some(s) = stats.as_mut() {
                    let rec = RequestStats::of(guest, &req, &ex);
                    let line = serde_json::to_string(&rec).expect("stats serialize");
                    if let Err(e) = writeln!(s, "{line}") {
                        warn!("cannot write stats: {e}");
                    }
                }
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    if let Err(e) = &result {
        // Requests already accepted still get a terminal answer.
        for item in rx.try_iter() {
            if let Item::Request(r) = item {
                emit(&out, &error_envelope(&r.activation_id, codes::CONTAINER_LOST, &e.to_string()));
            }
        }
    }
    if let Some(s) = stats.as_mut() {
        let _ = s.flush();
    }
    if result.is_ok() {
        // The reader has hit EOF (the channel closed), so this does not block.
        let _ = reader.join();
    }
    debug!("serve loop finished: {summary:?}");
    result.map(|_| summary)
}
