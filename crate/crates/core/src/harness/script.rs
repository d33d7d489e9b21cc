//! Line-oriented scenario scripts.
//!
//! ```text
//! # comment
//! GET      <client-ip> <path> => <status> [@<endpoint-id>]
//! HEAD     <client-ip> <path> => <status> [@<endpoint-id>]
//! PUT      <client-ip> <path> => <status> [@<endpoint-id>]
//! DELETE   <client-ip> <path> => <status> [@<endpoint-id>]
//! PROPFIND <client-ip> <path> => <status>
//! SET down <endpoint-id> true|false
//! SET latency <endpoint-id> <ms>
//! SLEEP <ms>
//! WAIT polls <n>
//! ```
//!
//! A 307 answer to PUT or DELETE is followed to the endpoint, PUT sending a
//! body derived from the path. A 302 answer to GET of a path written earlier
//! in the same script is followed and the bytes compared.

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;
use std::time::Duration;

use http::{Method, StatusCode};

use super::Federation;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("script line {line}: {reason}")]
pub struct ScriptError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Request {
        method: Method,
        client: IpAddr,
        path: String,
        status: u16,
        endpoint: Option<String>,
    },
    SetDown {
        endpoint: String,
        down: bool,
    },
    SetLatency {
        endpoint: String,
        latency: Duration,
    },
    Sleep(Duration),
    WaitPolls(u64),
}

#[derive(Debug, Clone)]
pub struct ParsedStep {
    pub line: usize,
    pub text: String,
    pub step: Step,
}

pub fn parse_script(text: &str) -> Result<Vec<ParsedStep>, ScriptError> {
    let mut steps = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |reason: String| ScriptError { line, reason };
        let words: Vec<&str> = body.split_whitespace().collect();
        let step = match words.as_slice() {
            ["SET", "down", id, flag] => Step::SetDown {
                endpoint: id.to_string(),
                down: flag
                    .parse()
                    .map_err(|_| err(format!("expected true|false, found {flag:?}")))?,
            },
            ["SET", "latency", id, ms] => Step::SetLatency {
                endpoint: id.to_string(),
                latency: Duration::from_millis(ms.parse().map_err(|_| err(format!("bad milliseconds {ms:?}")))?),
            },
            ["SLEEP", ms] => Step::Sleep(Duration::from_millis(
                ms.parse().map_err(|_| err(format!("bad milliseconds {ms:?}")))?,
            )),
            ["WAIT", "polls", n] => Step::WaitPolls(n.parse().map_err(|_| err(format!("bad count {n:?}")))?),
            [verb, ip, path, "=>", status, rest @ ..] => {
                let method = match *verb {
                    "GET" | "HEAD" | "PUT" | "DELETE" | "PROPFIND" => {
                        Method::from_bytes(verb.as_bytes()).expect("valid token")
                    }
                    other => return Err(err(format!("unknown verb {other:?}"))),
                };
                let endpoint = match rest {
                    [] => None,
                    [target] => Some(
                        target
                            .strip_prefix('@')
                            .ok_or_else(|| err(format!("expected @endpoint, found {target:?}")))?
                            .to_string(),
                    ),
                    _ => return Err(err("trailing words after expectation".into())),
                };
                if !path.starts_with('/') {
                    return Err(err(format!("path {path:?} must be absolute")));
                }
                Step::Request {
                    method,
                    client: ip.parse().map_err(|_| err(format!("bad client ip {ip:?}")))?,
                    path: path.to_string(),
                    status: status
                        .parse()
                        .ok()
                        .filter(|s| (100..600).contains(s))
                        .ok_or_else(|| err(format!("bad status {status:?}")))?,
                    endpoint,
                }
            }
            _ => return Err(err(format!("unrecognised step {body:?}"))),
        };
        steps.push(ParsedStep {
            line,
            text: body.to_string(),
            step,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// 1-based position among executable steps.
    pub index: usize,
    pub line: usize,
    pub text: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptReport {
    pub outcomes: Vec<StepOutcome>,
    /// Index of the step that aborted the run.
    pub aborted_at: Option<usize>,
    pub total_steps: usize,
}

impl ScriptReport {
    pub fn passed(&self) -> bool {
        self.aborted_at.is_none() && self.outcomes.len() == self.total_steps
    }

    pub fn passed_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.passed).count()
    }
}

impl fmt::Display for ScriptReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            let verdict = if o.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{verdict} step {} (line {}): {} [{}]",
                o.index, o.line, o.text, o.detail
            )?;
        }
        match self.aborted_at {
            Some(i) => writeln!(f, "aborted at step {i} of {}", self.total_steps),
            None => writeln!(f, "{} of {} steps passed", self.passed_count(), self.total_steps),
        }
    }
}

pub(crate) fn payload_for(path: &str) -> Vec<u8> {
    format!("scenario payload for {path}\n").into_bytes()
}

pub(super) async fn run(fed: &Federation, steps: &[ParsedStep]) -> ScriptReport {
    let mut report = ScriptReport {
        total_steps: steps.len(),
        ..Default::default()
    };
    let mut written: HashMap<String, Vec<u8>> = HashMap::new();
    for (i, s) in steps.iter().enumerate() {
        let index = i + 1;
        let result = execute(fed, &s.step, &mut written).await;
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        report.outcomes.push(StepOutcome {
            index,
            line: s.line,
            text: s.text.clone(),
            passed,
            detail,
        });
        if !passed {
            report.aborted_at = Some(index);
            break;
        }
    }
    report
}

async fn execute(fed: &Federation, step: &Step, written: &mut HashMap<String, Vec<u8>>) -> Result<String, String> {
    match step {
        Step::SetDown { endpoint, down } => {
            known(fed, endpoint)?;
            fed.set_down(endpoint, *down);
            Ok(format!("{endpoint} down={down}"))
        }
        Step::SetLatency { endpoint, latency } => {
            known(fed, endpoint)?;
            fed.set_latency(endpoint, *latency);
            Ok(format!("{endpoint} latency={latency:?}"))
        }
        Step::Sleep(d) => {
            tokio::time::sleep(*d).await;
            Ok(format!("slept {d:?}"))
        }
        Step::WaitPolls(n) => {
            tokio::time::timeout(Duration::from_secs(60), fed.wait_polls(*n))
                .await
                .map_err(|_| "poller made no progress".to_string())?;
            Ok(format!("{n} poll cycles"))
        }
        Step::Request {
            method,
            client,
            path,
            status,
            endpoint,
        } => {
            let spec = fed
                .client_by_ip(*client)
                .ok_or_else(|| format!("client {client} not in scenario"))?
                .clone();
            let mut req = fed.request(&spec, method.clone(), path);
            if method.as_str() == "PROPFIND" {
                req = req.header("Depth", "1");
            }
            let resp = req.send().await.map_err(|e| format!("gateway request failed: {e}"))?;
            let got = resp.status().as_u16();
            let location = resp
                .headers()
                .get(http::header::LOCATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| url::Url::parse(v).ok());
            let target = match (&location, method.as_str()) {
                (Some(url), _) => fed.endpoint_for_url(url).map(str::to_string),
                (None, "HEAD") => resp
                    .headers()
                    .get(crate::gateway::REPLICAS_HEADER)
                    .and_then(|v| v.to_str().ok())
                    .map(str::to_string),
                _ => None,
            };
            let mut detail = format!("status {got}");
            if let Some(t) = &target {
                detail.push_str(&format!(" @{t}"));
            }
            if got != *status {
                return Err(format!("{detail}, expected {status}"));
            }
            if let Some(want) = endpoint {
                if target.as_deref() != Some(want.as_str()) {
                    return Err(format!("{detail}, expected @{want}"));
                }
            }
            if let Some(url) = location {
                follow(fed, method, path, url, got, written).await?;
            }
            Ok(detail)
        }
    }
}

fn known(fed: &Federation, endpoint: &str) -> Result<(), String> {
    if fed.sims().any(|(id, _)| id == endpoint) {
        Ok(())
    } else {
        Err(format!("no endpoint {endpoint} in scenario"))
    }
}

async fn follow(
    fed: &Federation,
    method: &Method,
    path: &str,
    url: url::Url,
    status: u16,
    written: &mut HashMap<String, Vec<u8>>,
) -> Result<(), String> {
    let http = fed.http();
    match (method.as_str(), StatusCode::from_u16(status).ok()) {
        ("PUT", Some(StatusCode::TEMPORARY_REDIRECT)) => {
            let body = payload_for(path);
            let r = http
                .put(url)
                .body(body.clone())
                .send()
                .await
                .map_err(|e| format!("upload failed: {e}"))?;
            if !r.status().is_success() {
                return Err(format!("endpoint refused upload with {}", r.status()));
            }
            written.insert(path.to_string(), body);
        }
        ("DELETE", Some(StatusCode::TEMPORARY_REDIRECT)) => {
            let r = http
                .delete(url)
                .send()
                .await
                .map_err(|e| format!("delete failed: {e}"))?;
            if !r.status().is_success() {
                return Err(format!("endpoint refused delete with {}", r.status()));
            }
            written.remove(path);
        }
        ("GET", Some(StatusCode::FOUND)) => {
            if let Some(expected) = written.get(path) {
                let r = http
                    .get(url)
                    .send()
                    .await
                    .map_err(|e| format!("download failed: {e}"))?;
                if !r.status().is_success() {
                    return Err(format!("endpoint refused download with {}", r.status()));
                }
                let got = r.bytes().await.map_err(|e| format!("download failed: {e}"))?;
                if got.as_ref() != expected.as_slice() {
                    return Err(format!("downloaded {} bytes differing from the upload", got.len()));
                }
            }
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_form() {
        let steps = parse_script(
            "# header\n\
             GET 192.0.2.10 /data/f => 302 @cern\n\
             PROPFIND 192.0.2.10 /data => 207   # trailing comment\n\
             SET down cern true\n\
             SET latency uvic 250\n\
             SLEEP 10\n\
             WAIT polls 2\n",
        )
        .unwrap();
        assert_eq!(steps.len(), 6);
        assert_eq!(steps[0].line, 2);
        assert_eq!(
            steps[0].step,
            Step::Request {
                method: Method::GET,
                client: "192.0.2.10".parse().unwrap(),
                path: "/data/f".into(),
                status: 302,
                endpoint: Some("cern".into()),
            }
        );
        assert_eq!(
            steps[2].step,
            Step::SetDown {
                endpoint: "cern".into(),
                down: true
            }
        );
        assert_eq!(steps[5].step, Step::WaitPolls(2));
    }

    #[test]
    fn reports_line_of_bad_step() {
        let e = parse_script("SLEEP 1\nFETCH 1.2.3.4 /x => 200\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse_script("GET 1.2.3.4 /x => 999").is_err());
        assert!(parse_script("GET 1.2.3.4 /x => 200 cern").is_err());
        assert!(parse_script("SET down cern maybe").is_err());
        assert!(parse_script("GET nope /x => 200").is_err());
    }
}
