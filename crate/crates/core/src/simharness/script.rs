//! Line-oriented scenario scripts.
//!
//! ```text
//! seed 7
//! net loss 0.1 latency 0 1
//! tick 0 start h1
//! tick 0 start h2 join h1 gateway
//! tick 1 add web1 h1 --name web --ip 10.1.1.1 --tag grp=1
//! tick 2 listen web1 80
//! tick 5 connect web1 10.1.1.1:80 expect allow via web1
//! tick 6 assert converged
//! ```

use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use thiserror::Error;

use super::net::NetProfile;
use crate::switch::select::SelectionMode;
use crate::trap::wire::TrapStatus;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

/// Outcome a connect is expected to have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Allow,
    Fail(TrapStatus),
}

impl FromStr for Expect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "allow" => Expect::Allow,
            "deny" => Expect::Fail(TrapStatus::Denied),
            "noservice" => Expect::Fail(TrapStatus::NoSuchService),
            "refused" => Expect::Fail(TrapStatus::ConnRefused),
            _ => return Err(format!("unknown expectation {s}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DnsExpect {
    A(Ipv4Addr),
    NxDomain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    /// Every running node holds the same table.
    Converged,
    /// Number of alive entries for a key, on one host or (`None`) all
    /// running hosts.
    Entries {
        host: Option<String>,
        key: SocketAddrV4,
        count: usize,
    },
    /// Every entry the app advertised is a tombstone on the given host(s).
    Tombstoned { host: Option<String>, app: String },
    Member {
        host: String,
        other: String,
        status: String,
    },
    /// The server app has accepted at least `min` connections.
    Served { app: String, min: u64 },
    /// No trap reply so far carried a host address.
    Clean,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Start {
        host: String,
        join: Option<String>,
        gateway: bool,
        strategy: Option<SelectionMode>,
    },
    Add {
        label: String,
        host: String,
        args: Vec<String>,
    },
    Listen {
        label: String,
        port: u16,
    },
    Bind {
        label: String,
        port: u16,
    },
    Connect {
        label: String,
        dest: SocketAddrV4,
        expect: Option<Expect>,
        via: Option<String>,
    },
    RawConnect {
        dest: SocketAddrV4,
    },
    Dns {
        label: String,
        name: String,
        expect: Option<DnsExpect>,
    },
    Udp {
        label: String,
        dest: SocketAddrV4,
        payload: String,
        expect_echo: Option<bool>,
    },
    External {
        host: String,
        port: u16,
        bytes: usize,
    },
    Crash {
        host: String,
    },
    Partition {
        a: Vec<String>,
        b: Vec<String>,
    },
    Heal,
    Remove {
        label: String,
    },
    Assert(Predicate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub tick: u64,
    pub line: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScript {
    pub seed: u64,
    pub net: NetProfile,
    pub events: Vec<Event>,
}

impl ClusterScript {
    pub fn last_tick(&self) -> u64 {
        self.events.last().map_or(0, |e| e.tick)
    }
}

fn host_scope(s: &str) -> Option<String> {
    (s != "*").then(|| s.to_string())
}

struct Words<'a> {
    it: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
    line: usize,
}

impl<'a> Words<'a> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn word(&mut self, what: &str) -> Result<&'a str, ParseError> {
        self.it.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn parse<T: FromStr>(&mut self, what: &str) -> Result<T, ParseError> {
        let w = self.word(what)?;
        w.parse().map_err(|_| self.err(format!("bad {what}: {w}")))
    }

    fn keyword(&mut self, k: &str) -> bool {
        if self.it.peek() == Some(&k) {
            self.it.next();
            true
        } else {
            false
        }
    }

    fn rest(&mut self) -> Vec<String> {
        self.it.by_ref().map(str::to_string).collect()
    }

    fn done(&mut self) -> Result<(), ParseError> {
        match self.it.next() {
            None => Ok(()),
            Some(w) => Err(self.err(format!("unexpected {w}"))),
        }
    }
}

fn parse_action(w: &mut Words) -> Result<Action, ParseError> {
    let verb = w.word("action")?;
    let action = match verb {
        "start" => {
            let host = w.word("host")?.to_string();
            let mut join = None;
            let mut gateway = false;
            let mut strategy = None;
            while let Some(k) = w.it.next() {
                match k {
                    "join" => join = Some(w.word("peer")?.to_string()),
                    "gateway" => gateway = true,
                    "strategy" => {
                        strategy = Some(match w.word("strategy")? {
                            "rr" => SelectionMode::RoundRobin,
                            "rendezvous" => SelectionMode::Rendezvous,
                            s => return Err(w.err(format!("unknown strategy {s}"))),
                        })
                    }
                    other => return Err(w.err(format!("unexpected {other}"))),
                }
            }
            Action::Start {
                host,
                join,
                gateway,
                strategy,
            }
        }
        "add" => Action::Add {
            label: w.word("label")?.to_string(),
            host: w.word("host")?.to_string(),
            args: w.rest(),
        },
        "listen" => Action::Listen {
            label: w.word("label")?.to_string(),
            port: w.parse("port")?,
        },
        "bind" => Action::Bind {
            label: w.word("label")?.to_string(),
            port: w.parse("port")?,
        },
        "connect" => {
            let label = w.word("label")?.to_string();
            let dest = w.parse("destination")?;
            let mut expect = None;
            let mut via = None;
            while let Some(k) = w.it.next() {
                match k {
                    "expect" => {
                        let e = w.word("expectation")?;
                        expect = Some(e.parse().map_err(|m: String| w.err(m))?);
                    }
                    "via" => via = Some(w.word("server label")?.to_string()),
                    other => return Err(w.err(format!("unexpected {other}"))),
                }
            }
            Action::Connect {
                label,
                dest,
                expect,
                via,
            }
        }
        "rawconnect" => Action::RawConnect {
            dest: w.parse("destination")?,
        },
        "dns" => {
            let label = w.word("label")?.to_string();
            let name = w.word("name")?.to_string();
            let expect = if w.keyword("expect") {
                Some(match w.word("answer")? {
                    "nxdomain" => DnsExpect::NxDomain,
                    a => DnsExpect::A(a.parse().map_err(|_| w.err(format!("bad address {a}")))?),
                })
            } else {
                None
            };
            Action::Dns { label, name, expect }
        }
        "udp" => {
            let label = w.word("label")?.to_string();
            let dest = w.parse("destination")?;
            let payload = w.word("payload")?.to_string();
            let expect_echo = if w.keyword("expect") {
                Some(match w.word("echo|none")? {
                    "echo" => true,
                    "none" => false,
                    s => return Err(w.err(format!("unknown expectation {s}"))),
                })
            } else {
                None
            };
            Action::Udp {
                label,
                dest,
                payload,
                expect_echo,
            }
        }
        "external" => Action::External {
            host: w.word("gateway host")?.to_string(),
            port: w.parse("port")?,
            bytes: w.parse("byte count")?,
        },
        "crash" => Action::Crash {
            host: w.word("host")?.to_string(),
        },
        "partition" => {
            let a = w.word("side")?;
            if !w.keyword("|") {
                return Err(w.err("expected |"));
            }
            let b = w.word("side")?;
            let split = |s: &str| s.split(',').map(str::to_string).collect();
            Action::Partition { a: split(a), b: split(b) }
        }
        "heal" => Action::Heal,
        "remove" => Action::Remove {
            label: w.word("label")?.to_string(),
        },
        "assert" => Action::Assert(match w.word("predicate")? {
            "converged" => Predicate::Converged,
            "clean" => Predicate::Clean,
            "entries" => Predicate::Entries {
                host: host_scope(w.word("host")?),
                key: w.parse("key")?,
                count: w.parse("count")?,
            },
            "tombstoned" => Predicate::Tombstoned {
                host: host_scope(w.word("host")?),
                app: w.word("label")?.to_string(),
            },
            "served" => Predicate::Served {
                app: w.word("label")?.to_string(),
                min: w.parse("count")?,
            },
            "member" => Predicate::Member {
                host: w.word("host")?.to_string(),
                other: w.word("member")?.to_string(),
                status: w.word("status")?.to_string(),
            },
            p => return Err(w.err(format!("unknown predicate {p}"))),
        }),
        other => return Err(w.err(format!("unknown action {other}"))),
    };
    w.done()?;
    Ok(action)
}

pub fn parse(text: &str) -> Result<ClusterScript, ParseError> {
    let mut script = ClusterScript {
        seed: 0,
        net: NetProfile::default(),
        events: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut w = Words {
            it: content.split_whitespace().peekable(),
            line: i + 1,
        };
        match w.word("directive")? {
            "seed" => {
                script.seed = w.parse("seed")?;
                w.done()?;
            }
            "net" => {
                while let Some(k) = w.it.next() {
                    match k {
                        "loss" => {
                            let p: f64 = w.parse("loss")?;
                            if !(0.0..=1.0).contains(&p) {
                                return Err(w.err("loss must be in [0, 1]"));
                            }
                            script.net.loss = p;
                        }
                        "latency" => {
                            let lo = w.parse("latency")?;
                            let hi = w.parse("latency")?;
                            if hi < lo {
                                return Err(w.err("latency bounds reversed"));
                            }
                            script.net.latency = (lo, hi);
                        }
                        other => return Err(w.err(format!("unexpected {other}"))),
                    }
                }
            }
            "tick" => {
                let tick: u64 = w.parse("tick")?;
                if script.events.last().is_some_and(|e| e.tick > tick) {
                    return Err(w.err("ticks must not decrease"));
                }
                let action = parse_action(&mut w)?;
                script.events.push(Event {
                    tick,
                    line: i + 1,
                    action,
                });
            }
            other => return Err(w.err(format!("unknown directive {other}"))),
        }
    }
    Ok(script)
}
