//! Line protocol between client, supervisor and guest.
//!
//! Guest request: `{"id": "<string>", "value": <any>}`; guest response:
//! `{"id": "<same>", "result": <any>}`, one line each. Client lines use the
//! request shape plus an optional `"domain"` string, which the supervisor
//! strips before forwarding.

use std::time::Instant;

use serde_json::{Map, Value};

pub const DONE_TOKEN: u8 = 0x06;

#[derive(Clone, Debug)]
pub struct RequestEnvelope {
    pub activation_id: String,
    /// Exactly the line sent to the guest, without the newline.
    pub payload: String,
    pub domain: Option<String>,
    pub received_at: Instant,
    pub responded_at: Option<Instant>,
}

impl RequestEnvelope {
    /// Parses one client line.
    pub fn parse(line: &str, received_at: Instant) -> Result<Self, String> {
        let mut obj: Map<String, Value> = match serde_json::from_str(line.trim_end()) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err("request is not a JSON object".into()),
            Err(e) => return Err(format!("request is not JSON: {e}")),
        };
        let id = match obj.remove("id") {
            Some(Value::String(s)) => s,
            _ => return Err("request id must be a string".into()),
        };
        let domain = match obj.remove("domain") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err("domain must be a string".into()),
        };
        let value = obj.remove("value").unwrap_or(Value::Null);
        Ok(Self::new(id, value, domain, received_at))
    }

    pub fn new(id: String, value: Value, domain: Option<String>, received_at: Instant) -> Self {
        let payload = serde_json::json!({"id": id, "value": value}).to_string();
        RequestEnvelope { activation_id: id, payload, domain, received_at, responded_at: None }
    }

    /// Reads a dummy request: a full request line, or a bare value that is
    /// wrapped with id `warmup`.
    pub fn dummy(text: &str) -> Result<Self, String> {
        let now = Instant::now();
        let text = text.trim();
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(m)) if m.get("id").is_some_and(Value::is_string) => Self::parse(text, now),
            Ok(v) => Ok(Self::new("warmup".into(), v, None, now)),
            Err(e) => Err(format!("dummy input is not JSON: {e}")),
        }
    }
}

/// Checks a guest response line and returns its `result`.
pub fn parse_response(line: &str, expected_id: &str) -> Result<Value, String> {
    let v: Value = serde_json::from_str(line.trim_end()).map_err(|e| format!("response is not JSON: {e}"))?;
    let Value::Object(mut m) = v else { return Err("response is not a JSON object".into()) };
    match m.get("id") {
        Some(Value::String(id)) if id == expected_id => {}
        other => return Err(format!("response id {other:?} does not match {expected_id:?}")),
    }
    m.remove("result").ok_or_else(|| "response has no result".into())
}

/// Whether a result reports failure (`{"error": ...}`).
pub fn is_error_result(result: &Value) -> bool {
    result.as_object().is_some_and(|m| m.contains_key("error"))
}

/// Error response produced by the supervisor itself.
pub fn error_envelope(id: &str, code: u16, message: &str) -> String {
    serde_json::json!({"id": id, "error": {"code": code, "message": message}}).to_string()
}

pub mod codes {
    pub const BAD_REQUEST: u16 = 400;
    pub const CONTAINER_LOST: u16 = 502;
    pub const QUEUE_FULL: u16 = 503;
    pub const TIMEOUT: u16 = 504;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_domain_and_keeps_value() {
        let e = RequestEnvelope::parse(r#"{"id":"a1","value":{"x":[1,2]},"domain":"alice"}"#, Instant::now()).unwrap();
        assert_eq!(e.activation_id, "a1");
        assert_eq!(e.domain.as_deref(), Some("alice"));
        let v: Value = serde_json::from_str(&e.payload).unwrap();
        assert_eq!(v, serde_json::json!({"id": "a1", "value": {"x": [1, 2]}}));
    }

    #[test]
    fn rejects_bad_requests() {
        let now = Instant::now();
        assert!(RequestEnvelope::parse("not json", now).is_err());
        assert!(RequestEnvelope::parse(r#"{"id":3,"value":1}"#, now).is_err());
        assert!(RequestEnvelope::parse(r#"[1]"#, now).is_err());
        assert!(RequestEnvelope::parse(r#"{"id":"x","domain":5}"#, now).is_err());
    }

    #[test]
    fn dummy_accepts_bare_values() {
        let d = RequestEnvelope::dummy(r#"{"op":"bench","dirty":0}"#).unwrap();
        assert_eq!(d.activation_id, "warmup");
        let d = RequestEnvelope::dummy(r#"{"id":"w","value":7}"#).unwrap();
        assert_eq!(d.activation_id, "w");
    }

    #[test]
    fn responses_must_match() {
        assert_eq!(parse_response(r#"{"id":"a","result":5}"#, "a").unwrap(), serde_json::json!(5));
        assert!(parse_response(r#"{"id":"b","result":5}"#, "a").is_err());
        assert!(parse_response(r#"{"id":"a"}"#, "a").is_err());
        assert!(parse_response("garbage", "a").is_err());
        assert!(is_error_result(&serde_json::json!({"error": "x"})));
        assert!(!is_error_result(&serde_json::json!([1])));
    }

    #[test]
    fn error_envelopes_are_single_lines() {
        let e = error_envelope("q\"1", codes::QUEUE_FULL, "queue full\nretry");
        assert!(!e.contains('\n'));
        let v: Value = serde_json::from_str(&e).unwrap();
        assert_eq!(v["error"]["code"], 503);
        assert_eq!(v["id"], "q\"1");
    }
}
