//! Wire format and round barrier between the integration server and the
//! sites.
//!
//! Every message is one line of JSON with a leading `type` tag. Key order
//! is fixed per message type:
//!
//! ```text
//! {"type":"hello","site_id":S,"n_subjects":N,"n_features":P}
//! {"type":"weights","round":R,"penalty":[f64; P]}
//! {"type":"report","site_id":S,"round":R,"selected":[int],"accuracy":f64,"specificity":f64,"sensitivity":f64}
//! {"type":"terminate","round":R}
//! ```
//!
//! Reals are written with 17 significant digits. Two backends carry the
//! lines: in-process channels ([`in_process`]) and TCP ([`accept_tcp`],
//! [`TcpLink::connect`]). Both feed a single [`ServerHub`] inbox, so the
//! server logic is identical for either.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::consensus::{SiteRegistry, SiteReport};
use crate::real::JsonObject;
use crate::tabular::Metrics;
use crate::wlasso::{FeatureSet, PenaltyVector};

pub const DEFAULT_PORT: u16 = 7711;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot encode non-finite value in field `{0}`")]
    NonFinite(&'static str),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("penalty has {got} factors, negotiated {expected}")]
    PenaltyLength { got: usize, expected: usize },
    #[error("feature index {index} out of range for {n_features} features")]
    IndexOutOfRange { index: usize, n_features: usize },
    #[error("duplicate {what} from site `{site}`")]
    Duplicate { what: &'static str, site: String },
    #[error("report from site `{site}` is for round {got}, expected {expected}")]
    WrongRound { site: String, got: u32, expected: u32 },
    #[error("timed out after {timeout:?} waiting for {missing:?}")]
    Timeout { timeout: Duration, missing: Vec<String> },
    #[error("connection {0} closed")]
    Disconnected(String),
    #[error("unexpected `{got}` message from {from}")]
    Unexpected { got: &'static str, from: String },
    #[error("sites disagree on feature count: {0}")]
    FeatureCount(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        site_id: String,
        n_subjects: usize,
        n_features: usize,
    },
    Weights {
        round: u32,
        penalty: PenaltyVector,
    },
    Report(SiteReport),
    /// The null broadcast that ends the protocol.
    Terminate {
        round: u32,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Weights { .. } => "weights",
            Message::Report(_) => "report",
            Message::Terminate { .. } => "terminate",
        }
    }
}

fn check_finite(field: &'static str, values: &[f64]) -> Result<(), TransportError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TransportError::NonFinite(field))
    }
}

/// Serializes `msg` as one `\n`-terminated line.
pub fn encode_message(msg: &Message) -> Result<String, TransportError> {
    let body = match msg {
        Message::Hello {
            site_id,
            n_subjects,
            n_features,
        } => JsonObject::new()
            .string("type", "hello")
            .string("site_id", site_id)
            .uint("n_subjects", *n_subjects as u64)
            .uint("n_features", *n_features as u64),
        Message::Weights { round, penalty } => {
            check_finite("penalty", penalty.factors())?;
            JsonObject::new()
                .string("type", "weights")
                .uint("round", u64::from(*round))
                .reals("penalty", penalty.factors())
        }
        Message::Report(report) => {
            let m = report.metrics;
            check_finite("accuracy", &[m.accuracy])?;
            check_finite("specificity", &[m.specificity])?;
            check_finite("sensitivity", &[m.sensitivity])?;
            JsonObject::new()
                .string("type", "report")
                .string("site_id", &report.site_id)
                .uint("round", u64::from(report.round))
                .uints("selected", report.selected.indices().iter().map(|&i| i as u64))
                .real("accuracy", m.accuracy)
                .real("specificity", m.specificity)
                .real("sensitivity", m.sensitivity)
        }
        Message::Terminate { round } => JsonObject::new()
            .string("type", "terminate")
            .uint("round", u64::from(*round)),
    };
    let mut line = body.finish();
    line.push('\n');
    Ok(line)
}

struct Fields {
    map: Map<String, Value>,
}

impl Fields {
    fn expect_keys(&self, kind: &str, keys: &[&str]) -> Result<(), TransportError> {
        if let Some(extra) = self.map.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(TransportError::Malformed(format!("unexpected key `{extra}` in {kind}")));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Result<&Value, TransportError> {
        self.map
            .get(key)
            .ok_or_else(|| TransportError::Malformed(format!("missing key `{key}`")))
    }

    fn string(&self, key: &str) -> Result<String, TransportError> {
        self.get(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Malformed(format!("`{key}` is not a string")))
    }

    fn uint(&self, key: &str) -> Result<u64, TransportError> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| TransportError::Malformed(format!("`{key}` is not a non-negative integer")))
    }

    fn round(&self) -> Result<u32, TransportError> {
        u32::try_from(self.uint("round")?).map_err(|_| TransportError::Malformed("`round` overflows".into()))
    }

    fn real(&self, key: &str) -> Result<f64, TransportError> {
        self.get(key)?
            .as_f64()
            .ok_or_else(|| TransportError::Malformed(format!("`{key}` is not a number")))
    }

    fn array(&self, key: &str) -> Result<&Vec<Value>, TransportError> {
        self.get(key)?
            .as_array()
            .ok_or_else(|| TransportError::Malformed(format!("`{key}` is not an array")))
    }
}

/// Parses one framed line. `n_features` is the feature count negotiated at
/// handshake; when given, penalty lengths and feature indices are checked
/// against it.
pub fn decode_message(line: &str, n_features: Option<usize>) -> Result<Message, TransportError> {
    let body = line.strip_suffix('\n').unwrap_or(line);
    if body.contains('\n') {
        return Err(TransportError::Malformed("interior newline".into()));
    }
    let value: Value = serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(TransportError::Malformed("not a JSON object".into()));
    };
    let fields = Fields { map };
    let kind = fields.string("type")?;
    match kind.as_str() {
        "hello" => {
            fields.expect_keys("hello", &["type", "site_id", "n_subjects", "n_features"])?;
            Ok(Message::Hello {
                site_id: fields.string("site_id")?,
                n_subjects: fields.uint("n_subjects")? as usize,
                n_features: fields.uint("n_features")? as usize,
            })
        }
        "weights" => {
            fields.expect_keys("weights", &["type", "round", "penalty"])?;
            let factors = fields
                .array("penalty")?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| TransportError::Malformed("penalty entry is not a number".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(expected) = n_features {
                if factors.len() != expected {
                    return Err(TransportError::PenaltyLength {
                        got: factors.len(),
                        expected,
                    });
                }
            }
            let penalty = PenaltyVector::new(factors).map_err(|e| TransportError::Malformed(e.to_string()))?;
            Ok(Message::Weights {
                round: fields.round()?,
                penalty,
            })
        }
        "report" => {
            fields.expect_keys(
                "report",
                &["type", "site_id", "round", "selected", "accuracy", "specificity", "sensitivity"],
            )?;
            let indices = fields
                .array("selected")?
                .iter()
                .map(|v| {
                    v.as_u64()
                        .map(|i| i as usize)
                        .ok_or_else(|| TransportError::Malformed("selected entry is not an index".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let bound = n_features.unwrap_or(usize::MAX);
            if let Some(&index) = indices.iter().find(|&&i| i >= bound) {
                return Err(TransportError::IndexOutOfRange {
                    index,
                    n_features: bound,
                });
            }
            let selected = FeatureSet::new(indices, bound).map_err(|e| TransportError::Malformed(e.to_string()))?;
            let metrics = Metrics {
                accuracy: fields.real("accuracy")?,
                specificity: fields.real("specificity")?,
                sensitivity: fields.real("sensitivity")?,
            };
            if !metrics.is_valid() {
                return Err(TransportError::Malformed(format!("metrics {metrics:?} outside [0, 1]")));
            }
            Ok(Message::Report(SiteReport {
                site_id: fields.string("site_id")?,
                round: fields.round()?,
                selected,
                metrics,
            }))
        }
        "terminate" => {
            fields.expect_keys("terminate", &["type", "round"])?;
            Ok(Message::Terminate { round: fields.round()? })
        }
        other => Err(TransportError::UnknownType(other.to_string())),
    }
}

/// One event on the server inbox, tagged with its connection number.
#[derive(Debug)]
pub struct Inbound {
    pub conn: usize,
    pub event: InboundEvent,
}

#[derive(Debug)]
pub enum InboundEvent {
    Line(String),
    Closed,
}

/// Outgoing half of a server-side connection.
pub trait LineSink: Send {
    fn send_line(&mut self, line: &str) -> io::Result<()>;
}

struct ChannelSink(Sender<String>);

impl LineSink for ChannelSink {
    fn send_line(&mut self, line: &str) -> io::Result<()> {
        self.0
            .send(line.to_string())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "site channel closed"))
    }
}

struct TcpSink(TcpStream);

impl Drop for TcpSink {
    fn drop(&mut self) {
        // The reader thread holds a clone; shutting down closes both halves.
        let _ = self.0.shutdown(std::net::Shutdown::Both);
    }
}

impl LineSink for TcpSink {
    fn send_line(&mut self, line: &str) -> io::Result<()> {
        self.0.write_all(line.as_bytes())?;
        self.0.flush()
    }
}

/// Site-side endpoint of one connection.
pub trait SiteLink {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError>;
    /// Blocks for the next server message. `n_features` is the site's own
    /// feature count.
    fn recv(&mut self, n_features: usize) -> Result<Message, TransportError>;
}

/// In-process site endpoint. Dropping it reports the connection closed.
pub struct ChannelLink {
    conn: usize,
    inbox: Sender<Inbound>,
    from_server: Receiver<String>,
}

impl SiteLink for ChannelLink {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let line = encode_message(msg)?;
        self.inbox
            .send(Inbound {
                conn: self.conn,
                event: InboundEvent::Line(line),
            })
            .map_err(|_| TransportError::Disconnected("server".into()))
    }

    fn recv(&mut self, n_features: usize) -> Result<Message, TransportError> {
        let line = self
            .from_server
            .recv()
            .map_err(|_| TransportError::Disconnected("server".into()))?;
        decode_message(&line, Some(n_features))
    }
}

impl Drop for ChannelLink {
    fn drop(&mut self) {
        let _ = self.inbox.send(Inbound {
            conn: self.conn,
            event: InboundEvent::Closed,
        });
    }
}

/// TCP site endpoint.
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpLink {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }
}

impl SiteLink for TcpLink {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        let line = encode_message(msg)?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self, n_features: usize) -> Result<Message, TransportError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(TransportError::Disconnected("server".into()));
        }
        decode_message(&line, Some(n_features))
    }
}

/// Server side of all site connections.
pub struct ServerHub {
    inbox: Receiver<Inbound>,
    outboxes: Vec<Box<dyn LineSink>>,
    sites: Vec<Option<String>>,
    n_features: Option<usize>,
}

/// Builds an in-process hub with `m` connected site links.
pub fn in_process(m: usize) -> (ServerHub, Vec<ChannelLink>) {
    let (inbox_tx, inbox_rx) = mpsc::channel();
    let mut outboxes: Vec<Box<dyn LineSink>> = Vec::with_capacity(m);
    let mut links = Vec::with_capacity(m);
    for conn in 0..m {
        let (tx, rx) = mpsc::channel();
        outboxes.push(Box::new(ChannelSink(tx)));
        links.push(ChannelLink {
            conn,
            inbox: inbox_tx.clone(),
            from_server: rx,
        });
    }
    (ServerHub::new(inbox_rx, outboxes), links)
}

/// Accepts `m` TCP connections and starts one reader thread per connection.
pub fn accept_tcp(listener: &TcpListener, m: usize) -> Result<ServerHub, TransportError> {
    let (inbox_tx, inbox_rx) = mpsc::channel();
    let mut outboxes: Vec<Box<dyn LineSink>> = Vec::with_capacity(m);
    for conn in 0..m {
        let (stream, peer) = listener.accept()?;
        debug!("connection {conn} from {peer}");
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let tx = inbox_tx.clone();
        thread::spawn(move || {
            for line in reader.lines() {
                match line {
                    Ok(line) => {
                        if tx
                            .send(Inbound {
                                conn,
                                event: InboundEvent::Line(line),
                            })
                            .is_err()
                        {
                            return;
                        }
                    }
                    Err(e) => {
                        warn!("connection {conn}: {e}");
                        break;
                    }
                }
            }
            let _ = tx.send(Inbound {
                conn,
                event: InboundEvent::Closed,
            });
        });
        outboxes.push(Box::new(TcpSink(stream)));
    }
    Ok(ServerHub::new(inbox_rx, outboxes))
}

impl ServerHub {
    pub fn new(inbox: Receiver<Inbound>, outboxes: Vec<Box<dyn LineSink>>) -> Self {
        let sites = vec![None; outboxes.len()];
        Self {
            inbox,
            outboxes,
            sites,
            n_features: None,
        }
    }

    pub fn m(&self) -> usize {
        self.outboxes.len()
    }

    pub fn n_features(&self) -> Option<usize> {
        self.n_features
    }

    fn conn_name(&self, conn: usize) -> String {
        match &self.sites[conn] {
            Some(id) => format!("site `{id}`"),
            None => format!("connection {conn}"),
        }
    }

    fn next(&self, deadline: Instant, timeout: Duration, missing: impl Fn() -> Vec<String>) -> Result<Inbound, TransportError> {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match self.inbox.recv_timeout(remaining) {
            Ok(inbound) => Ok(inbound),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout {
                timeout,
                missing: missing(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Disconnected("all sites".into())),
        }
    }

    /// Collects one Hello per connection and builds the site registry.
    pub fn handshake(&mut self, timeout: Duration) -> Result<(SiteRegistry, usize), TransportError> {
        let deadline = Instant::now() + timeout;
        let mut hellos: BTreeMap<usize, (String, usize, usize)> = BTreeMap::new();
        while hellos.len() < self.m() {
            let missing = || {
                (0..self.m())
                    .filter(|c| !hellos.contains_key(c))
                    .map(|c| format!("connection {c}"))
                    .collect()
            };
            let Inbound { conn, event } = self.next(deadline, timeout, missing)?;
            let line = match event {
                InboundEvent::Line(line) => line,
                InboundEvent::Closed => return Err(TransportError::Disconnected(self.conn_name(conn))),
            };
            match decode_message(&line, None)? {
                Message::Hello {
                    site_id,
                    n_subjects,
                    n_features,
                } => {
                    if hellos.contains_key(&conn) || hellos.values().any(|h| h.0 == site_id) {
                        return Err(TransportError::Duplicate { what: "hello", site: site_id });
                    }
                    self.sites[conn] = Some(site_id.clone());
                    hellos.insert(conn, (site_id, n_subjects, n_features));
                }
                other => {
                    return Err(TransportError::Unexpected {
                        got: other.kind(),
                        from: self.conn_name(conn),
                    })
                }
            }
        }
        let n_features = hellos.values().next().map_or(0, |h| h.2);
        if hellos.values().any(|h| h.2 != n_features) {
            let counts: Vec<String> = hellos.values().map(|h| format!("{}={}", h.0, h.2)).collect();
            return Err(TransportError::FeatureCount(counts.join(", ")));
        }
        let registry = SiteRegistry::new(hellos.into_values().map(|(id, n, _)| (id, n)).collect())
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        self.n_features = Some(n_features);
        Ok((registry, n_features))
    }

    /// Sends `msg` to every site.
    pub fn broadcast(&mut self, msg: &Message) -> Result<(), TransportError> {
        let line = encode_message(msg)?;
        for conn in 0..self.outboxes.len() {
            let name = self.conn_name(conn);
            self.outboxes[conn]
                .send_line(&line)
                .map_err(|e| TransportError::Disconnected(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Waits for exactly one report per connected site for `round` and
    /// returns them ordered by site id.
    pub fn round_barrier(&mut self, round: u32, timeout: Duration) -> Result<Vec<SiteReport>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut received: BTreeMap<String, SiteReport> = BTreeMap::new();
        while received.len() < self.m() {
            let missing = || {
                self.sites
                    .iter()
                    .enumerate()
                    .map(|(c, s)| s.clone().unwrap_or_else(|| format!("connection {c}")))
                    .filter(|id| !received.contains_key(id))
                    .collect()
            };
            let Inbound { conn, event } = self.next(deadline, timeout, missing)?;
            let line = match event {
                InboundEvent::Line(line) => line,
                InboundEvent::Closed => return Err(TransportError::Disconnected(self.conn_name(conn))),
            };
            let report = match decode_message(&line, self.n_features)? {
                Message::Report(report) => report,
                other => {
                    return Err(TransportError::Unexpected {
                        got: other.kind(),
                        from: self.conn_name(conn),
                    })
                }
            };
            if let Some(expected) = &self.sites[conn] {
                if &report.site_id != expected {
                    return Err(TransportError::Malformed(format!(
                        "connection of site `{expected}` sent a report for `{}`",
                        report.site_id
                    )));
                }
            }
            if report.round != round {
                return Err(TransportError::WrongRound {
                    site: report.site_id,
                    got: report.round,
                    expected: round,
                });
            }
            if received.contains_key(&report.site_id) {
                return Err(TransportError::Duplicate {
                    what: "report",
                    site: report.site_id,
                });
            }
            received.insert(report.site_id.clone(), report);
        }
        Ok(received.into_values().collect())
    }
}
