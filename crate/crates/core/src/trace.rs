//! Line-oriented event trace.
//!
//! `tick | kind | from | to | msg_type | trace_id`, with an optional
//! seventh `detail` field carrying reject reasons and notes.

use std::fmt;
use std::str::FromStr;

use crate::messaging::{MsgType, TraceId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Send,
    Relay,
    Deliver,
    Drop,
    Reject,
    State,
    Trust,
    Timeout,
    Adversary,
    Fail,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Send => "send",
            EventKind::Relay => "relay",
            EventKind::Deliver => "deliver",
            EventKind::Drop => "drop",
            EventKind::Reject => "reject",
            EventKind::State => "state",
            EventKind::Trust => "trust",
            EventKind::Timeout => "timeout",
            EventKind::Adversary => "adversary",
            EventKind::Fail => "fail",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "send" => EventKind::Send,
            "relay" => EventKind::Relay,
            "deliver" => EventKind::Deliver,
            "drop" => EventKind::Drop,
            "reject" => EventKind::Reject,
            "state" => EventKind::State,
            "trust" => EventKind::Trust,
            "timeout" => EventKind::Timeout,
            "adversary" => EventKind::Adversary,
            "fail" => EventKind::Fail,
            other => return Err(format!("unknown event kind {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLine {
    pub tick: u64,
    pub kind: EventKind,
    pub from: String,
    pub to: String,
    pub msg_type: Option<MsgType>,
    pub trace_id: Option<TraceId>,
    pub detail: Option<String>,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {} | {} | {} | ", self.tick, self.kind.as_str(), self.from, self.to)?;
        match self.msg_type {
            Some(m) => write!(f, "{m}")?,
            None => f.write_str("-")?,
        }
        f.write_str(" | ")?;
        match self.trace_id {
            Some(t) => write!(f, "{t}")?,
            None => f.write_str("-")?,
        }
        if let Some(d) = &self.detail {
            write!(f, " | {d}")?;
        }
        Ok(())
    }
}

impl FromStr for TraceLine {
    type Err = String;
    fn from_str(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.splitn(7, " | ").collect();
        if parts.len() < 6 {
            return Err(format!("expected at least 6 fields: {line:?}"));
        }
        let tick = parts[0].parse().map_err(|e| format!("tick: {e}"))?;
        let msg_type = match parts[4] {
            "-" => None,
            s => Some(MsgType::parse(s).ok_or_else(|| format!("msg type {s:?}"))?),
        };
        let trace_id = match parts[5] {
            "-" => None,
            s => Some(TraceId(u64::from_str_radix(s, 16).map_err(|e| format!("trace id: {e}"))?)),
        };
        Ok(TraceLine {
            tick,
            kind: parts[1].parse()?,
            from: parts[2].to_string(),
            to: parts[3].to_string(),
            msg_type,
            trace_id,
            detail: parts.get(6).map(|s| s.to_string()),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub lines: Vec<TraceLine>,
}

impl Trace {
    pub fn push(&mut self, line: TraceLine) {
        self.lines.push(line);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace, String> {
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| l.parse().map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<Result<_, _>>()?;
        Ok(Trace { lines })
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceLine> {
        self.lines.iter().filter(move |l| l.kind == kind)
    }

    /// Control-message sends belonging to one protocol run.
    pub fn sends_for(&self, trace_id: TraceId) -> usize {
        self.of_kind(EventKind::Send).filter(|l| l.trace_id == Some(trace_id)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip_with_and_without_detail() {
        let mut l = TraceLine {
            tick: 12,
            kind: EventKind::Reject,
            from: "m1".into(),
            to: "c".into(),
            msg_type: Some(MsgType::JoinReq),
            trace_id: Some(TraceId(0xabc)),
            detail: Some("ReplayRejected".into()),
        };
        let s = l.to_string();
        assert_eq!(s, "12 | reject | m1 | c | JoinReq | 0000000000000abc | ReplayRejected");
        assert_eq!(s.parse::<TraceLine>().unwrap(), l);
        l.detail = None;
        l.msg_type = None;
        l.trace_id = None;
        assert_eq!(l.to_string(), "12 | reject | m1 | c | - | -");
        assert_eq!(l.to_string().parse::<TraceLine>().unwrap(), l);
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!("1 | send | a".parse::<TraceLine>().is_err());
        assert!("x | send | a | b | - | -".parse::<TraceLine>().is_err());
        assert!("1 | teleport | a | b | - | -".parse::<TraceLine>().is_err());
        assert!(Trace::parse("1 | send | a | b | - | -\nbad").is_err());
    }
}
