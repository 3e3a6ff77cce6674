//! Line-oriented scenario files: a `[cluster]` section, an optional
//! `[latency]` matrix for custom profiles, and an ordered `[events]` list.
//! The format is deliberately flat so diffs stay reviewable and parsing needs
//! no dependencies.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::MsgKind;
use crate::types::{HostId, TimeoutConfig, TimeoutConfigError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: unknown section '[{name}]'")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: bad value '{value}' for '{key}'")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("missing required key '{key}' in [cluster]")]
    MissingKey { key: String },
    #[error("line {line}: process p{p} not declared before use")]
    UndeclaredProcess { line: usize, p: u32 },
    #[error("line {line}: process p{p} already exists")]
    DuplicateProcess { line: usize, p: u32 },
    #[error("line {line}: host '{host}' is not declared for this profile")]
    UndeclaredHost { line: usize, host: String },
    #[error("timeout configuration: {0}")]
    Timeouts(#[from] TimeoutConfigError),
    #[error("line {line}: [latency] requires profile=custom")]
    LatencyWithoutCustom { line: usize },
    #[error("line {line}: {msg}")]
    MalformedEvent { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Local,
    Gcp,
    Custom,
}

impl ProfileKind {
    fn as_str(&self) -> &'static str {
        match self {
            ProfileKind::Local => "local",
            ProfileKind::Gcp => "gcp",
            ProfileKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventSpec {
    Crash {
        p: u32,
    },
    Join {
        p: u32,
        host: String,
        wrong_measurement: bool,
    },
    Isolate {
        p: u32,
        until_us: Option<u64>,
    },
    Partition {
        a: Vec<u32>,
        b: Vec<u32>,
        until_us: Option<u64>,
    },
    Delay {
        a: u32,
        b: u32,
        extra_us: Option<u64>,
        until_us: Option<u64>,
    },
    Tamper {
        kind: Option<MsgKind>,
        until_us: Option<u64>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioEvent {
    pub at_us: u64,
    pub kind: EventSpec,
}

/// A fully validated experiment description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub n_initial: u32,
    pub sla_max: usize,
    pub heartbeat_min_us: u64,
    pub heartbeat_max_us: u64,
    pub candidature_factor: u32,
    pub delta_us: u64,
    pub seed: u64,
    pub profile: ProfileKind,
    pub had: bool,
    pub horizon_us: Option<u64>,
    pub send_overhead_us: Option<u64>,
    pub join_vote: bool,
    /// Custom-profile host pairs, microseconds.
    pub latency_pairs: Vec<(String, String, u64)>,
    pub events: Vec<ScenarioEvent>,
}

fn parse_ms_to_us(v: &str) -> Option<u64> {
    // Millisecond values with up to microsecond precision, e.g. "24.7",
    // "0.13", "50".
    let v = v.trim();
    let (int, frac) = match v.split_once('.') {
        None => (v, ""),
        Some((i, f)) => (i, f),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    if frac.len() > 3 || frac.chars().any(|c| !c.is_ascii_digit()) {
        return None;
    }
    let mut frac_us: u64 = 0;
    if !frac.is_empty() {
        let f: u64 = frac.parse().ok()?;
        frac_us = f * 10u64.pow(3 - frac.len() as u32);
    }
    Some(int * 1_000 + frac_us)
}

fn render_us_as_ms(us: u64) -> String {
    let int = us / 1_000;
    let frac = us % 1_000;
    if frac == 0 {
        return int.to_string();
    }
    let mut f = format!("{frac:03}");
    while f.ends_with('0') {
        f.pop();
    }
    format!("{int}.{f}")
}

fn parse_msg_kind(s: &str) -> Option<MsgKind> {
    Some(match s {
        "heartbeat" => MsgKind::Heartbeat,
        "ack" => MsgKind::HeartbeatAck,
        "request_vote" => MsgKind::RequestVote,
        "vote_grant" => MsgKind::VoteGrant,
        "candidate_info" => MsgKind::CandidateInfo,
        "fetch_entries" => MsgKind::FetchEntries,
        "join_request" => MsgKind::JoinRequest,
        "challenge" | "attest_challenge" => MsgKind::AttestChallenge,
        "quote" | "attest_quote" => MsgKind::AttestQuote,
        "provision" => MsgKind::Provision,
        "shutdown_request" => MsgKind::ShutdownRequest,
        "commit_shutdown" => MsgKind::CommitShutdown,
        _ => return None,
    })
}

fn render_msg_kind(k: MsgKind) -> &'static str {
    match k {
        MsgKind::Heartbeat => "heartbeat",
        MsgKind::HeartbeatAck => "ack",
        MsgKind::RequestVote => "request_vote",
        MsgKind::VoteGrant => "vote_grant",
        MsgKind::CandidateInfo => "candidate_info",
        MsgKind::FetchEntries => "fetch_entries",
        MsgKind::JoinRequest => "join_request",
        MsgKind::AttestChallenge => "challenge",
        MsgKind::AttestQuote => "quote",
        MsgKind::Provision => "provision",
        MsgKind::ShutdownRequest => "shutdown_request",
        MsgKind::CommitShutdown => "commit_shutdown",
    }
}

const GCP_REGIONS: [&str; 4] = ["us-west1", "us-west2", "us-east1", "us-east4"];

impl Scenario {
    pub fn timeout_config(&self) -> TimeoutConfig {
        TimeoutConfig {
            heartbeat_min_us: self.heartbeat_min_us,
            heartbeat_max_us: self.heartbeat_max_us,
            candidature_factor: self.candidature_factor,
            leader_send_interval_us: (self.heartbeat_min_us / 5).max(1),
            delta_us: self.delta_us,
        }
    }

    pub fn candidature_timeout_us(&self) -> u64 {
        self.heartbeat_max_us * u64::from(self.candidature_factor)
    }

    /// End of the simulated window: explicit, or derived from the last event
    /// with enough slack for elections and suicides to play out.
    pub fn horizon_us(&self) -> u64 {
        if let Some(h) = self.horizon_us {
            return h;
        }
        let last_event = self.events.iter().map(|e| e.at_us).max().unwrap_or(0);
        last_event + 2 * self.candidature_timeout_us() + 500_000
    }

    /// The hosts this scenario's profile declares, in id order.
    pub fn declared_hosts(&self) -> Vec<(String, HostId)> {
        match self.profile {
            ProfileKind::Local => (1..=64u16)
                .map(|i| (format!("h{i}"), HostId(i)))
                .collect(),
            ProfileKind::Gcp => GCP_REGIONS
                .iter()
                .enumerate()
                .map(|(i, r)| (r.to_string(), HostId(i as u16 + 1)))
                .collect(),
            ProfileKind::Custom => {
                let mut seen: Vec<String> = Vec::new();
                for (a, b, _) in &self.latency_pairs {
                    if !seen.contains(a) {
                        seen.push(a.clone());
                    }
                    if !seen.contains(b) {
                        seen.push(b.clone());
                    }
                }
                seen.into_iter()
                    .enumerate()
                    .map(|(i, h)| (h, HostId(i as u16 + 1)))
                    .collect()
            }
        }
    }

    pub fn host_id(&self, name: &str) -> Option<HostId> {
        self.declared_hosts()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| id)
    }

    /// Host of the i-th initial process (1-based).
    pub fn initial_host(&self, i: u32) -> HostId {
        match self.profile {
            ProfileKind::Local => HostId(i as u16),
            ProfileKind::Gcp => HostId(((i - 1) % 4) as u16 + 1),
            ProfileKind::Custom => {
                let hosts = self.declared_hosts();
                hosts[((i - 1) as usize) % hosts.len()].1
            }
        }
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Cluster,
            Latency,
            Events,
        }
        let mut section = Section::None;
        let mut cluster: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut latency_pairs: Vec<(String, String, u64)> = Vec::new();
        let mut raw_events: Vec<(usize, String)> = Vec::new();
        let mut latency_line = 0usize;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.split_once('#') {
                Some((body, _)) => body.trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name {
                    "cluster" => Section::Cluster,
                    "latency" => {
                        latency_line = line_no;
                        Section::Latency
                    }
                    "events" => Section::Events,
                    other => {
                        return Err(ScenarioError::UnknownSection {
                            line: line_no,
                            name: other.to_string(),
                        })
                    }
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(ScenarioError::MalformedEvent {
                        line: line_no,
                        msg: "content before any section header".to_string(),
                    })
                }
                Section::Cluster => {
                    let (k, v) = line.split_once('=').ok_or(ScenarioError::MalformedEvent {
                        line: line_no,
                        msg: "expected key=value".to_string(),
                    })?;
                    cluster.insert(k.trim().to_string(), (line_no, v.trim().to_string()));
                }
                Section::Latency => {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(ScenarioError::MalformedEvent {
                            line: line_no,
                            msg: "expected: <host> <host> <latency_ms>".to_string(),
                        });
                    }
                    let us = parse_ms_to_us(parts[2]).ok_or(ScenarioError::BadValue {
                        line: line_no,
                        key: "latency".to_string(),
                        value: parts[2].to_string(),
                    })?;
                    latency_pairs.push((parts[0].to_string(), parts[1].to_string(), us));
                }
                Section::Events => raw_events.push((line_no, line.to_string())),
            }
        }

        let take = |key: &str| -> Result<(usize, String), ScenarioError> {
            cluster
                .get(key)
                .cloned()
                .ok_or(ScenarioError::MissingKey {
                    key: key.to_string(),
                })
        };
        let known_keys = [
            "n_initial",
            "sla_max",
            "heartbeat_min_ms",
            "heartbeat_max_ms",
            "candidature_factor",
            "delta_ms",
            "seed",
            "profile",
            "had",
            "horizon_ms",
            "send_overhead_us",
            "join_vote",
        ];
        for (k, (line, _)) in &cluster {
            if !known_keys.contains(&k.as_str()) {
                return Err(ScenarioError::UnknownKey {
                    line: *line,
                    key: k.clone(),
                });
            }
        }

        let parse_u64 = |key: &str| -> Result<u64, ScenarioError> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| ScenarioError::BadValue {
                line,
                key: key.to_string(),
                value: v,
            })
        };
        let parse_ms = |key: &str| -> Result<u64, ScenarioError> {
            let (line, v) = take(key)?;
            parse_ms_to_us(&v).ok_or(ScenarioError::BadValue {
                line,
                key: key.to_string(),
                value: v,
            })
        };

        let n_initial = parse_u64("n_initial")? as u32;
        let sla_max = parse_u64("sla_max")? as usize;
        let heartbeat_min_us = parse_ms("heartbeat_min_ms")?;
        let heartbeat_max_us = parse_ms("heartbeat_max_ms")?;
        let candidature_factor = parse_u64("candidature_factor")? as u32;
        let delta_us = parse_ms("delta_ms")?;
        let seed = parse_u64("seed")?;
        let profile = {
            let (line, v) = take("profile")?;
            match v.as_str() {
                "local" => ProfileKind::Local,
                "gcp" => ProfileKind::Gcp,
                "custom" => ProfileKind::Custom,
                _ => {
                    return Err(ScenarioError::BadValue {
                        line,
                        key: "profile".to_string(),
                        value: v,
                    })
                }
            }
        };
        let had = {
            let (line, v) = take("had")?;
            match v.as_str() {
                "on" => true,
                "off" => false,
                _ => {
                    return Err(ScenarioError::BadValue {
                        line,
                        key: "had".to_string(),
                        value: v,
                    })
                }
            }
        };
        let horizon_us = match cluster.get("horizon_ms") {
            None => None,
            Some((line, v)) => Some(parse_ms_to_us(v).ok_or(ScenarioError::BadValue {
                line: *line,
                key: "horizon_ms".to_string(),
                value: v.clone(),
            })?),
        };
        let send_overhead_us = match cluster.get("send_overhead_us") {
            None => None,
            Some((line, v)) => Some(v.parse().map_err(|_| ScenarioError::BadValue {
                line: *line,
                key: "send_overhead_us".to_string(),
                value: v.clone(),
            })?),
        };
        let join_vote = match cluster.get("join_vote") {
            None => true,
            Some((line, v)) => match v.as_str() {
                "yes" => true,
                "no" => false,
                _ => {
                    return Err(ScenarioError::BadValue {
                        line: *line,
                        key: "join_vote".to_string(),
                        value: v.clone(),
                    })
                }
            },
        };

        if profile != ProfileKind::Custom && !latency_pairs.is_empty() {
            return Err(ScenarioError::LatencyWithoutCustom { line: latency_line });
        }

        let mut scenario = Scenario {
            n_initial,
            sla_max,
            heartbeat_min_us,
            heartbeat_max_us,
            candidature_factor,
            delta_us,
            seed,
            profile,
            had,
            horizon_us,
            send_overhead_us,
            join_vote,
            latency_pairs,
            events: Vec::new(),
        };
        scenario.timeout_config().validate()?;

        // Event validation needs the evolving process population.
        let mut known: Vec<u32> = (1..=n_initial).collect();
        for (line, ev) in raw_events {
            let event = parse_event(&scenario, &mut known, line, &ev)?;
            scenario.events.push(event);
        }
        Ok(scenario)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("[cluster]\n");
        out.push_str(&format!("n_initial={}\n", self.n_initial));
        out.push_str(&format!("sla_max={}\n", self.sla_max));
        out.push_str(&format!(
            "heartbeat_min_ms={}\n",
            render_us_as_ms(self.heartbeat_min_us)
        ));
        out.push_str(&format!(
            "heartbeat_max_ms={}\n",
            render_us_as_ms(self.heartbeat_max_us)
        ));
        out.push_str(&format!("candidature_factor={}\n", self.candidature_factor));
        out.push_str(&format!("delta_ms={}\n", render_us_as_ms(self.delta_us)));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("profile={}\n", self.profile.as_str()));
        out.push_str(&format!("had={}\n", if self.had { "on" } else { "off" }));
        if let Some(h) = self.horizon_us {
            out.push_str(&format!("horizon_ms={}\n", render_us_as_ms(h)));
        }
        if let Some(o) = self.send_overhead_us {
            out.push_str(&format!("send_overhead_us={o}\n"));
        }
        if !self.join_vote {
            out.push_str("join_vote=no\n");
        }
        if !self.latency_pairs.is_empty() {
            out.push_str("[latency]\n");
            for (a, b, us) in &self.latency_pairs {
                out.push_str(&format!("{a} {b} {}\n", render_us_as_ms(*us)));
            }
        }
        if !self.events.is_empty() {
            out.push_str("[events]\n");
            for e in &self.events {
                out.push_str(&render_event(e));
                out.push('\n');
            }
        }
        out
    }
}

fn parse_pid(tok: &str, line: usize) -> Result<u32, ScenarioError> {
    tok.strip_prefix('p')
        .and_then(|s| s.parse().ok())
        .ok_or(ScenarioError::MalformedEvent {
            line,
            msg: format!("expected process id like p3, got '{tok}'"),
        })
}

fn parse_event(
    scenario: &Scenario,
    known: &mut Vec<u32>,
    line: usize,
    text: &str,
) -> Result<ScenarioEvent, ScenarioError> {
    let mut toks = text.split_whitespace();
    let at_tok = toks.next().unwrap_or("");
    let at_ms = at_tok
        .strip_prefix("at=")
        .and_then(parse_ms_to_us_opt)
        .ok_or(ScenarioError::MalformedEvent {
            line,
            msg: format!("expected at=<ms>, got '{at_tok}'"),
        })?;
    let verb = toks.next().ok_or(ScenarioError::MalformedEvent {
        line,
        msg: "missing event verb".to_string(),
    })?;
    let rest: Vec<&str> = toks.collect();
    let until = |rest: &[&str]| -> Result<Option<u64>, ScenarioError> {
        for t in rest {
            if let Some(v) = t.strip_prefix("until=") {
                if v == "forever" {
                    return Ok(None);
                }
                return parse_ms_to_us(v).map(Some).ok_or(ScenarioError::BadValue {
                    line,
                    key: "until".to_string(),
                    value: v.to_string(),
                });
            }
        }
        Ok(None)
    };
    let has_until = rest.iter().any(|t| t.starts_with("until="));
    let require_known = |p: u32| -> Result<(), ScenarioError> {
        if known.contains(&p) {
            Ok(())
        } else {
            Err(ScenarioError::UndeclaredProcess { line, p })
        }
    };

    let kind = match verb {
        "crash" => {
            let p = parse_pid(rest.first().copied().unwrap_or(""), line)?;
            require_known(p)?;
            EventSpec::Crash { p }
        }
        "join" => {
            let p = parse_pid(rest.first().copied().unwrap_or(""), line)?;
            if known.contains(&p) {
                return Err(ScenarioError::DuplicateProcess { line, p });
            }
            let host = rest
                .iter()
                .find_map(|t| t.strip_prefix("host="))
                .ok_or(ScenarioError::MalformedEvent {
                    line,
                    msg: "join requires host=<host>".to_string(),
                })?
                .to_string();
            if scenario.host_id(&host).is_none() {
                return Err(ScenarioError::UndeclaredHost { line, host });
            }
            let wrong_measurement = rest.contains(&"measurement=wrong");
            known.push(p);
            EventSpec::Join {
                p,
                host,
                wrong_measurement,
            }
        }
        "isolate" => {
            let p = parse_pid(rest.first().copied().unwrap_or(""), line)?;
            require_known(p)?;
            EventSpec::Isolate {
                p,
                until_us: if has_until { until(&rest)? } else { None },
            }
        }
        "partition" => {
            let groups = rest.first().copied().unwrap_or("");
            let (a, b) = groups.split_once('|').ok_or(ScenarioError::MalformedEvent {
                line,
                msg: "partition expects pA,pB|pC,pD".to_string(),
            })?;
            let parse_group = |g: &str| -> Result<Vec<u32>, ScenarioError> {
                g.split(',')
                    .map(|t| {
                        let p = parse_pid(t, line)?;
                        require_known(p)?;
                        Ok(p)
                    })
                    .collect()
            };
            EventSpec::Partition {
                a: parse_group(a)?,
                b: parse_group(b)?,
                until_us: if has_until { until(&rest)? } else { None },
            }
        }
        "delay" => {
            let a = parse_pid(rest.first().copied().unwrap_or(""), line)?;
            let b = parse_pid(rest.get(1).copied().unwrap_or(""), line)?;
            require_known(a)?;
            require_known(b)?;
            let extra_us = match rest.iter().find_map(|t| t.strip_prefix("extra_ms=")) {
                Some("inf") => None,
                Some(v) => Some(parse_ms_to_us(v).ok_or(ScenarioError::BadValue {
                    line,
                    key: "extra_ms".to_string(),
                    value: v.to_string(),
                })?),
                None => {
                    return Err(ScenarioError::MalformedEvent {
                        line,
                        msg: "delay requires extra_ms=<ms|inf>".to_string(),
                    })
                }
            };
            EventSpec::Delay {
                a,
                b,
                extra_us,
                until_us: if has_until { until(&rest)? } else { None },
            }
        }
        "tamper" => {
            let kind = match rest.iter().find_map(|t| t.strip_prefix("kind=")) {
                None | Some("all") => None,
                Some(k) => Some(parse_msg_kind(k).ok_or(ScenarioError::BadValue {
                    line,
                    key: "kind".to_string(),
                    value: k.to_string(),
                })?),
            };
            EventSpec::Tamper {
                kind,
                until_us: if has_until { until(&rest)? } else { None },
            }
        }
        "shutdown" => EventSpec::Shutdown,
        other => {
            return Err(ScenarioError::MalformedEvent {
                line,
                msg: format!("unknown event verb '{other}'"),
            })
        }
    };
    Ok(ScenarioEvent { at_us: at_ms, kind })
}

fn parse_ms_to_us_opt(v: &str) -> Option<u64> {
    parse_ms_to_us(v)
}

fn render_event(e: &ScenarioEvent) -> String {
    let at = render_us_as_ms(e.at_us);
    match &e.kind {
        EventSpec::Crash { p } => format!("at={at} crash p{p}"),
        EventSpec::Join {
            p,
            host,
            wrong_measurement,
        } => {
            let mut s = format!("at={at} join p{p} host={host}");
            if *wrong_measurement {
                s.push_str(" measurement=wrong");
            }
            s
        }
        EventSpec::Isolate { p, until_us } => match until_us {
            Some(u) => format!("at={at} isolate p{p} until={}", render_us_as_ms(*u)),
            None => format!("at={at} isolate p{p}"),
        },
        EventSpec::Partition { a, b, until_us } => {
            let g = |v: &[u32]| {
                v.iter()
                    .map(|p| format!("p{p}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let mut s = format!("at={at} partition {}|{}", g(a), g(b));
            if let Some(u) = until_us {
                s.push_str(&format!(" until={}", render_us_as_ms(*u)));
            }
            s
        }
        EventSpec::Delay {
            a,
            b,
            extra_us,
            until_us,
        } => {
            let extra = match extra_us {
                Some(e) => render_us_as_ms(*e),
                None => "inf".to_string(),
            };
            let mut s = format!("at={at} delay p{a} p{b} extra_ms={extra}");
            if let Some(u) = until_us {
                s.push_str(&format!(" until={}", render_us_as_ms(*u)));
            }
            s
        }
        EventSpec::Tamper { kind, until_us } => {
            let mut s = format!(
                "at={at} tamper kind={}",
                kind.map(render_msg_kind).unwrap_or("all")
            );
            if let Some(u) = until_us {
                s.push_str(&format!(" until={}", render_us_as_ms(*u)));
            }
            s
        }
        EventSpec::Shutdown => format!("at={at} shutdown"),
    }
}
