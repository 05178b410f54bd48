//! Slow reasoner interface: asynchronous start/poll queries, a scripted mock
//! with bounded latency, the decision-template parser and an optional HTTP
//! client.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, TryRecvError};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{HazardClass, Observation};

/// Environment variable holding the remote endpoint URL.
pub const ENDPOINT_ENV: &str = "FALLSAFE_REASONER_URL";
/// Environment variable holding an optional bearer token.
pub const TOKEN_ENV: &str = "FALLSAFE_REASONER_TOKEN";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no decision token found")]
    NoDecision,
    #[error("option {0} is not available")]
    InvalidOption(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonerError {
    #[error("a query is already pending")]
    AlreadyPending,
    #[error("unknown query handle {0}")]
    UnknownHandle(u64),
    #[error("option set must be nonempty")]
    EmptyOptions,
    #[error("scripted decision {y} is not in {{0}} ∪ {options:?}")]
    InvalidDecision { y: usize, options: Vec<usize> },
    #[error("invalid reasoner configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonerDecision {
    /// 0 continues nominal operation, `i ≥ 1` engages recovery set `i`.
    pub y: usize,
    pub latency_ticks: u64,
    pub raw_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReasonerHandle {
    pub id: u64,
    pub started_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReasonerPoll {
    Pending,
    Done(ReasonerDecision),
    /// The query finished without a usable decision; the caller treats it as
    /// undecided.
    Failed(String),
}

pub trait SlowReasoner {
    /// Starts a non-blocking query at control tick `tick`.
    fn start(&mut self, obs: &Observation, options: &[usize], tick: u64) -> Result<ReasonerHandle, ReasonerError>;
    /// Non-blocking; repeated polls after completion return the same result.
    fn poll(&mut self, handle: &ReasonerHandle, tick: u64) -> Result<ReasonerPoll, ReasonerError>;
}

/// Decision line appended to every response.
pub fn render_template(y: usize) -> String {
    if y == 0 {
        "Decision: CONTINUE".to_string()
    } else {
        format!("Decision: FALLBACK {y}")
    }
}

/// Extracts the last `Decision: CONTINUE | FALLBACK <i>` token
/// (case-insensitive); the decision must lie in `{0} ∪ options`.
pub fn parse_decision(text: &str, options: &[usize], d: usize) -> Result<usize, ParseError> {
    let re = Regex::new(r"(?i)decision\s*:\s*(?:(continue)|fallback\s+(\d+))").expect("valid pattern");
    let cap = re.captures_iter(text).last().ok_or(ParseError::NoDecision)?;
    if cap.get(1).is_some() {
        return Ok(0);
    }
    let digits = cap.get(2).ok_or(ParseError::NoDecision)?.as_str();
    let y: usize = digits.parse().map_err(|_| ParseError::InvalidOption(usize::MAX))?;
    if y == 0 || y > d || !options.contains(&y) {
        return Err(ParseError::InvalidOption(y));
    }
    Ok(y)
}

/// Prompt sent to a remote model.
pub fn render_prompt(obs: &Observation, options: &[usize], labels: &[String]) -> String {
    let mut p = String::from(
        "You are the safety monitor of an autonomous quadrotor. The onboard detector flagged the scene as unusual.\n",
    );
    p.push_str(&format!("Observed concepts: {}.\n", obs.concepts().join(", ")));
    p.push_str("Available interventions:\n");
    p.push_str("0: continue the nominal mission\n");
    for &i in options {
        let label = labels.get(i - 1).map_or("recovery region", String::as_str);
        p.push_str(&format!("{i}: land at {label}\n"));
    }
    p.push_str(
        "Think about whether the observation is hazardous, then end your answer with exactly one line of the form \
         'Decision: CONTINUE' or 'Decision: FALLBACK <i>'.\n",
    );
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    Fixed { ticks: u64 },
    Uniform { min: u64, max: u64 },
}

/// How the mock answers one hazard class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedChoice {
    Continue,
    /// The hazard's own target set if offered, else the first offered set.
    Target,
    /// Exactly this decision; an error if it is not offered.
    Fixed(usize),
    /// First offered entry of the list, else the first offered set.
    Prefer(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Hazard class name (`none`, `inconsequential`, `consequential`) to
    /// choice; missing classes continue, except `consequential` which
    /// defaults to its target.
    #[serde(default)]
    pub script: BTreeMap<String, ScriptedChoice>,
    pub latency: LatencyDist,
    pub k_max: u64,
}

struct Query {
    handle: ReasonerHandle,
    result: Result<usize, ReasonerError>,
    latency: u64,
}

/// Deterministic scripted reasoner; latency advances in control ticks.
pub struct MockReasoner {
    cfg: MockConfig,
    d: usize,
    rng: ChaCha8Rng,
    next_id: u64,
    current: Option<Query>,
}

impl MockReasoner {
    pub fn new(cfg: MockConfig, d: usize, seed: u64) -> Result<Self, ReasonerError> {
        for (class, choice) in &cfg.script {
            if !matches!(class.as_str(), "none" | "inconsequential" | "consequential") {
                return Err(ReasonerError::Config(format!("unknown hazard class '{class}'")));
            }
            let bad = match choice {
                ScriptedChoice::Fixed(y) => (*y > d).then_some(*y),
                ScriptedChoice::Prefer(list) => list.iter().copied().find(|&y| y == 0 || y > d),
                _ => None,
            };
            if let Some(y) = bad {
                return Err(ReasonerError::Config(format!("class '{class}' maps to {y}, outside 0..={d}")));
            }
        }
        if let LatencyDist::Uniform { min, max } = cfg.latency {
            if min > max {
                return Err(ReasonerError::Config(format!("latency range [{min}, {max}] is empty")));
            }
        }
        Ok(Self { cfg, d, rng: ChaCha8Rng::seed_from_u64(seed), next_id: 0, current: None })
    }

    pub fn k_max(&self) -> u64 {
        self.cfg.k_max
    }

    fn decide(&self, hazard: HazardClass, options: &[usize]) -> Result<usize, ReasonerError> {
        let default = match hazard {
            HazardClass::Consequential { .. } => ScriptedChoice::Target,
            _ => ScriptedChoice::Continue,
        };
        let choice = self.cfg.script.get(hazard.name()).unwrap_or(&default);
        let first = options[0];
        Ok(match choice {
            ScriptedChoice::Continue => 0,
            ScriptedChoice::Target => match hazard {
                HazardClass::Consequential { target } if options.contains(&target) => target,
                HazardClass::Consequential { .. } => first,
                _ => 0,
            },
            ScriptedChoice::Fixed(y) => {
                if *y != 0 && !options.contains(y) {
                    return Err(ReasonerError::InvalidDecision { y: *y, options: options.to_vec() });
                }
                *y
            }
            ScriptedChoice::Prefer(list) => list.iter().copied().find(|y| options.contains(y)).unwrap_or(first),
        })
    }

    fn sample_latency(&mut self) -> u64 {
        let l = match self.cfg.latency {
            LatencyDist::Fixed { ticks } => ticks,
            LatencyDist::Uniform { min, max } => self.rng.gen_range(min..=max),
        };
        l.min(self.cfg.k_max)
    }
}

impl SlowReasoner for MockReasoner {
    fn start(&mut self, obs: &Observation, options: &[usize], tick: u64) -> Result<ReasonerHandle, ReasonerError> {
        if options.is_empty() {
            return Err(ReasonerError::EmptyOptions);
        }
        if let Some(q) = &self.current {
            if tick < q.handle.started_at + q.latency {
                return Err(ReasonerError::AlreadyPending);
            }
        }
        if let Some(&bad) = options.iter().find(|&&i| i == 0 || i > self.d) {
            return Err(ReasonerError::Config(format!("option {bad} outside 1..={}", self.d)));
        }
        let result = self.decide(obs.hazard, options);
        if let Err(e) = &result {
            return Err(e.clone());
        }
        let latency = self.sample_latency();
        let handle = ReasonerHandle { id: self.next_id, started_at: tick };
        self.next_id += 1;
        self.current = Some(Query { handle, result, latency });
        Ok(handle)
    }

    fn poll(&mut self, handle: &ReasonerHandle, tick: u64) -> Result<ReasonerPoll, ReasonerError> {
        let q = match &self.current {
            Some(q) if q.handle == *handle => q,
            _ => return Err(ReasonerError::UnknownHandle(handle.id)),
        };
        if tick < q.handle.started_at + q.latency {
            return Ok(ReasonerPoll::Pending);
        }
        let y = q.result.clone()?;
        let text = format!("The scripted monitor evaluated the scene.\n{}", render_template(y));
        let options: Vec<usize> = (1..=self.d).collect();
        let parsed = parse_decision(&text, &options, self.d).expect("template round-trips");
        Ok(ReasonerPoll::Done(ReasonerDecision { y: parsed, latency_ticks: q.latency, raw_text: Some(text) }))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RemoteResponse {
    text: String,
}

struct RemoteQuery {
    handle: ReasonerHandle,
    options: Vec<usize>,
    rx: Option<Receiver<Result<String, String>>>,
    outcome: Option<ReasonerPoll>,
}

/// HTTP client for a text-completion endpoint. Each query runs on its own
/// thread; `poll` only checks a channel.
pub struct RemoteReasoner {
    endpoint: String,
    token: Option<String>,
    max_tokens: usize,
    labels: Vec<String>,
    d: usize,
    next_id: u64,
    current: Option<RemoteQuery>,
}

impl RemoteReasoner {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, labels: Vec<String>, max_tokens: usize) -> Self {
        let d = labels.len();
        Self { endpoint: endpoint.into(), token, max_tokens, labels, d, next_id: 0, current: None }
    }

    /// `None` unless the endpoint variable is set.
    pub fn from_env(labels: Vec<String>, max_tokens: usize) -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        let token = std::env::var(TOKEN_ENV).ok().filter(|s| !s.is_empty());
        Some(Self::new(endpoint, token, labels, max_tokens))
    }
}

impl SlowReasoner for RemoteReasoner {
    fn start(&mut self, obs: &Observation, options: &[usize], tick: u64) -> Result<ReasonerHandle, ReasonerError> {
        if options.is_empty() {
            return Err(ReasonerError::EmptyOptions);
        }
        if matches!(&self.current, Some(q) if q.outcome.is_none()) {
            return Err(ReasonerError::AlreadyPending);
        }
        let prompt = render_prompt(obs, options, &self.labels);
        let body = serde_json::to_value(RemoteRequest { prompt: &prompt, max_tokens: self.max_tokens })
            .map_err(|e| ReasonerError::Config(e.to_string()))?;
        let (tx, rx) = channel();
        let endpoint = self.endpoint.clone();
        let token = self.token.clone();
        thread::spawn(move || {
            let mut req = ureq::post(&endpoint);
            if let Some(t) = token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            let res = req
                .send_json(body)
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_json::<RemoteResponse>().map_err(|e| e.to_string()))
                .map(|r| r.text);
            let _ = tx.send(res);
        });
        let handle = ReasonerHandle { id: self.next_id, started_at: tick };
        self.next_id += 1;
        self.current = Some(RemoteQuery { handle, options: options.to_vec(), rx: Some(rx), outcome: None });
        Ok(handle)
    }

    fn poll(&mut self, handle: &ReasonerHandle, tick: u64) -> Result<ReasonerPoll, ReasonerError> {
        let d = self.d;
        let q = match &mut self.current {
            Some(q) if q.handle == *handle => q,
            _ => return Err(ReasonerError::UnknownHandle(handle.id)),
        };
        if let Some(done) = &q.outcome {
            return Ok(done.clone());
        }
        let rx = q.rx.as_ref().expect("receiver kept until completion");
        let outcome = match rx.try_recv() {
            Err(TryRecvError::Empty) => return Ok(ReasonerPoll::Pending),
            Err(TryRecvError::Disconnected) => ReasonerPoll::Failed("request thread exited".into()),
            Ok(Err(e)) => ReasonerPoll::Failed(e),
            Ok(Ok(text)) => match parse_decision(&text, &q.options, d) {
                Ok(y) => ReasonerPoll::Done(ReasonerDecision {
                    y,
                    latency_ticks: tick - q.handle.started_at,
                    raw_text: Some(text),
                }),
                Err(e) => ReasonerPoll::Failed(e.to_string()),
            },
        };
        q.rx = None;
        q.outcome = Some(outcome.clone());
        Ok(outcome)
    }
}
