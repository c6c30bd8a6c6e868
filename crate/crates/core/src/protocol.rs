//! Wire protocol: newline-delimited JSON messages over TCP, plus an
//! in-process loopback transport.
//!
//! Every request gets exactly one response carrying the request's `seq`.
//! Server pushes (`AssignNotice`, `CorrectionNotice`) use a separate
//! per-connection counter. Error payloads are `{code, detail}` with codes:
//!
//! | code | meaning |
//! |------|---------|
//! | Malformed | unparsable line or payload |
//! | BadSeq | seq not greater than the previous one on the connection |
//! | UnknownKind | kind is not a request kind |
//! | EmptyDescription, NoTerminationCondition, UnknownClassification | publish rejected |
//! | NoTopicFound, InsufficientParticipants | task parked in Feedback |
//! | NotAssignee, NotPublisher, WrongPhase, UnknownTask | submit / feedback rejected |
//! | InvalidEvaluation, UnknownShallowCause, MaxRoundsExceeded, LoopBusy | feedback rejected |
//! | IllegalTransition, Internal | kernel fault |

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{DeviceStatusReport, GeoPoint, UserAgent};
use crate::kernel::{FeedbackPayload, Kernel, KernelError, Notice, NoticeKind, Submission};
use crate::task::{RawTaskInput, Tid, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Publish,
    ListTasks,
    TaskList,
    SubmitResult,
    Feedback,
    AssignNotice,
    CorrectionNotice,
    Ack,
    Error,
}

impl Kind {
    pub fn is_push(self) -> bool {
        matches!(self, Kind::AssignNotice | Kind::CorrectionNotice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tid: Option<Tid>,
    #[serde(default)]
    pub payload: Value,
}

impl Message {
    pub fn new(seq: u64, kind: Kind, tid: Option<Tid>, payload: Value) -> Self {
        Message { seq, kind, tid, payload }
    }

    pub fn error(seq: u64, tid: Option<Tid>, code: &str, detail: impl Into<String>) -> Self {
        Message::new(seq, Kind::Error, tid, json!({"code": code, "detail": detail.into()}))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }

    /// Error code, if this is an error response.
    pub fn error_code(&self) -> Option<&str> {
        (self.kind == Kind::Error).then(|| self.payload["code"].as_str().unwrap_or(""))
    }
}

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub conn: ConnId,
    pub msg: Message,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct Profile {
    location: GeoPoint,
    #[serde(default)]
    interests: Vec<String>,
    #[serde(default = "default_credit")]
    credit: f64,
    #[serde(default)]
    devices: Vec<DeviceStatusReport>,
}

fn default_credit() -> f64 {
    60.0
}

#[derive(Debug, Deserialize)]
struct UserPayload {
    user: UserId,
    #[serde(default)]
    profile: Option<Profile>,
}

#[derive(Debug, Deserialize)]
struct SubmitPayload {
    user: UserId,
    #[serde(flatten)]
    submission: Submission,
}

#[derive(Debug, Deserialize)]
struct FeedbackWire {
    user: UserId,
    #[serde(flatten)]
    feedback: FeedbackPayload,
}

#[derive(Debug, Default)]
struct ConnState {
    last_seq: Option<u64>,
    push_seq: u64,
}

/// Single serialized entry point for all kernel mutations.
pub struct Coordinator {
    kernel: Kernel,
    conns: BTreeMap<ConnId, ConnState>,
    bindings: BTreeMap<UserId, ConnId>,
    mailbox: BTreeMap<UserId, Vec<Notice>>,
    auto_clock: bool,
}

impl Coordinator {
    pub fn new(kernel: Kernel) -> Self {
        Coordinator {
            kernel,
            conns: BTreeMap::new(),
            bindings: BTreeMap::new(),
            mailbox: BTreeMap::new(),
            auto_clock: true,
        }
    }

    /// With the auto clock on, each request advances kernel time by one
    /// tick. The simulator turns it off and drives time itself.
    pub fn set_auto_clock(&mut self, on: bool) {
        self.auto_clock = on;
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Kernel {
        &mut self.kernel
    }

    pub fn into_kernel(self) -> Kernel {
        self.kernel
    }

    pub fn connect(&mut self, conn: ConnId) {
        self.conns.entry(conn).or_default();
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        self.bindings.retain(|_, c| *c != conn);
    }

    /// Handles one raw line. The first outbound message is always the
    /// response to the sender.
    pub fn handle_line(&mut self, conn: ConnId, line: &str) -> Vec<Outbound> {
        match Message::from_line(line) {
            Ok(msg) => self.handle(conn, msg),
            Err(e) => {
                let seq = serde_json::from_str::<Value>(line).ok().and_then(|v| v["seq"].as_u64()).unwrap_or(0);
                vec![Outbound { conn, msg: Message::error(seq, None, "Malformed", e.to_string()) }]
            }
        }
    }

    pub fn handle(&mut self, conn: ConnId, msg: Message) -> Vec<Outbound> {
        let state = self.conns.entry(conn).or_default();
        if state.last_seq.is_some_and(|last| msg.seq <= last) {
            let detail = format!("seq {} after {}", msg.seq, state.last_seq.unwrap_or(0));
            return vec![Outbound { conn, msg: Message::error(msg.seq, msg.tid, "BadSeq", detail) }];
        }
        state.last_seq = Some(msg.seq);
        if self.auto_clock {
            let now = self.kernel.now() + 1;
            self.kernel.set_now(now);
        }

        let mut notices = Vec::new();
        let response = match self.dispatch(conn, &msg, &mut notices) {
            Ok((kind, tid, payload)) => Message::new(msg.seq, kind, tid, payload),
            Err(Failure::Kernel(e, tid)) => Message::error(msg.seq, tid.or(msg.tid), e.code(), e.to_string()),
            Err(Failure::Wire(code, detail)) => Message::error(msg.seq, msg.tid, code, detail),
        };
        let mut out = vec![Outbound { conn, msg: response }];
        for n in notices {
            self.mailbox.entry(n.user.clone()).or_default().push(n);
        }
        self.flush_mail(&mut out);
        out
    }

    fn flush_mail(&mut self, out: &mut Vec<Outbound>) {
        let ready: Vec<UserId> = self.mailbox.keys().filter(|u| self.bindings.contains_key(*u)).cloned().collect();
        for user in ready {
            let conn = self.bindings[&user];
            for n in self.mailbox.remove(&user).unwrap_or_default() {
                let state = self.conns.entry(conn).or_default();
                state.push_seq += 1;
                let kind = match n.kind {
                    NoticeKind::AssignNotice => Kind::AssignNotice,
                    NoticeKind::CorrectionNotice => Kind::CorrectionNotice,
                };
                let mut payload = n.payload;
                payload["user"] = json!(n.user);
                out.push(Outbound { conn, msg: Message::new(state.push_seq, kind, Some(n.tid), payload) });
            }
        }
    }

    fn bind(&mut self, user: &UserId, conn: ConnId) {
        self.bindings.insert(user.clone(), conn);
    }

    fn dispatch(
        &mut self,
        conn: ConnId,
        msg: &Message,
        notices: &mut Vec<Notice>,
    ) -> Result<(Kind, Option<Tid>, Value), Failure> {
        match msg.kind {
            Kind::Publish => {
                let raw: RawTaskInput = parse(&msg.payload)?;
                let publisher = raw.publisher.clone();
                self.bind(&publisher, conn);
                let out = self.kernel.publish(raw).map_err(|e| {
                    let tid = parked_tid(&e, &self.kernel);
                    Failure::Kernel(e, tid)
                })?;
                notices.extend(out.notices);
                Ok((
                    Kind::Ack,
                    Some(out.tid),
                    json!({"tid": out.tid, "strategy_id": out.strategy_id, "assignees": out.assignees}),
                ))
            }
            Kind::ListTasks => {
                let p: UserPayload = parse(&msg.payload)?;
                if let Some(profile) = p.profile {
                    self.register(&p.user, profile).map_err(|e| Failure::Kernel(e, None))?;
                }
                self.bind(&p.user, conn);
                let tasks = self.kernel.list_tasks(&p.user);
                Ok((Kind::TaskList, None, json!({"tasks": tasks})))
            }
            Kind::SubmitResult => {
                let tid = msg.tid.ok_or(Failure::Wire("Malformed", "missing tid".into()))?;
                let p: SubmitPayload = parse(&msg.payload)?;
                self.bind(&p.user, conn);
                let out = self.kernel.submit(tid, &p.user, p.submission).map_err(|e| Failure::Kernel(e, Some(tid)))?;
                Ok((
                    Kind::Ack,
                    Some(tid),
                    json!({"record_id": out.record_id, "results": out.results, "phase": out.phase}),
                ))
            }
            Kind::Feedback => {
                let tid = msg.tid.ok_or(Failure::Wire("Malformed", "missing tid".into()))?;
                let p: FeedbackWire = parse(&msg.payload)?;
                self.bind(&p.user, conn);
                let out = self.kernel.feedback(tid, &p.user, &p.feedback).map_err(|e| Failure::Kernel(e, Some(tid)))?;
                notices.extend(out.notices);
                Ok((
                    Kind::Ack,
                    Some(tid),
                    json!({
                        "q": out.report.q,
                        "verdict": out.report.verdict,
                        "phase": out.phase,
                        "reasons": out.reasons,
                        "correction": out.correction,
                    }),
                ))
            }
            other => Err(Failure::Wire("UnknownKind", format!("{other:?} is not a request"))),
        }
    }

    fn register(&mut self, user: &UserId, profile: Profile) -> Result<(), KernelError> {
        let mut agent = self
            .kernel
            .agents()
            .users
            .get(user)
            .cloned()
            .unwrap_or_else(|| UserAgent::new(user.0.clone(), profile.location, profile.credit));
        agent.location = profile.location;
        agent.credit = profile.credit;
        agent.interests = profile.interests.into_iter().collect();
        self.kernel.register_user(agent);
        for mut d in profile.devices {
            d.owner.get_or_insert_with(|| user.0.clone());
            self.kernel.register_device(&d)?;
        }
        Ok(())
    }
}

enum Failure {
    Kernel(KernelError, Option<Tid>),
    Wire(&'static str, String),
}

fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, Failure> {
    serde_json::from_value(v.clone()).map_err(|e| Failure::Wire("Malformed", e.to_string()))
}

/// The tid of a task that publish created before failing, if any.
fn parked_tid(e: &KernelError, kernel: &Kernel) -> Option<Tid> {
    match e.code() {
        "InsufficientParticipants" | "NoTopicFound" => kernel.tasks().iter().map(|(s, _)| s.tid).max(),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Loopback transport

/// In-process transport: messages are encoded to lines and decoded back, so
/// it exercises the same codec and coordinator as the socket server.
pub struct Loopback {
    coord: Coordinator,
    inboxes: BTreeMap<ConnId, VecDeque<Message>>,
    seqs: BTreeMap<ConnId, u64>,
    pub messages: u64,
}

impl Loopback {
    pub fn new(coord: Coordinator) -> Self {
        Loopback { coord, inboxes: BTreeMap::new(), seqs: BTreeMap::new(), messages: 0 }
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn coordinator_mut(&mut self) -> &mut Coordinator {
        &mut self.coord
    }

    pub fn into_coordinator(self) -> Coordinator {
        self.coord
    }

    pub fn connect(&mut self, conn: ConnId) {
        self.coord.connect(conn);
        self.inboxes.entry(conn).or_default();
    }

    /// Sends a request and returns its response; pushes are queued.
    pub fn request(&mut self, conn: ConnId, kind: Kind, tid: Option<Tid>, payload: Value) -> Message {
        let seq = self.seqs.entry(conn).or_insert(0);
        *seq += 1;
        let line = Message::new(*seq, kind, tid, payload).to_line();
        self.messages += 1;
        let mut out = self.coord.handle_line(conn, &line).into_iter();
        let response = out.next().expect("coordinator always responds");
        let response = Message::from_line(&response.msg.to_line()).expect("round trip");
        for o in out {
            self.messages += 1;
            let msg = Message::from_line(&o.msg.to_line()).expect("round trip");
            self.inboxes.entry(o.conn).or_default().push_back(msg);
        }
        response
    }

    pub fn next_push(&mut self, conn: ConnId) -> Option<Message> {
        self.inboxes.get_mut(&conn)?.pop_front()
    }

    pub fn has_pushes(&self) -> bool {
        self.inboxes.values().any(|q| !q.is_empty())
    }
}

// ---------------------------------------------------------------------------
// TCP server and client

enum Event {
    Open(ConnId, Sender<String>),
    Line(ConnId, String),
    Close(ConnId),
}

/// A running TCP server. Each connection has reader and writer threads; all
/// lines funnel through one coordinator thread.
pub struct Server {
    addr: SocketAddr,
    coordinator: JoinHandle<Coordinator>,
    events: Sender<Event>,
}

impl Server {
    pub fn start(addr: impl ToSocketAddrs, kernel: Kernel) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel::<Event>();
        let coordinator = thread::spawn(move || coordinator_loop(Coordinator::new(kernel), rx));
        let events = tx.clone();
        thread::spawn(move || {
            let mut next: ConnId = 1;
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let conn = next;
                next += 1;
                if spawn_connection(conn, stream, tx.clone()).is_err() {
                    continue;
                }
            }
        });
        Ok(Server { addr, coordinator, events })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks for the lifetime of the process.
    pub fn wait(self) {
        drop(self.events);
        let _ = self.coordinator.join();
    }
}

fn spawn_connection(conn: ConnId, stream: TcpStream, events: Sender<Event>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let (wtx, wrx) = mpsc::channel::<String>();
    events.send(Event::Open(conn, wtx)).map_err(|_| io::Error::other("coordinator gone"))?;
    thread::spawn(move || {
        for line in wrx {
            if writer.write_all(line.as_bytes()).and_then(|_| writer.write_all(b"\n")).is_err() {
                break;
            }
        }
    });
    thread::spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if events.send(Event::Line(conn, line)).is_err() {
                return;
            }
        }
        let _ = events.send(Event::Close(conn));
    });
    Ok(())
}

fn coordinator_loop(mut coord: Coordinator, rx: Receiver<Event>) -> Coordinator {
    let mut writers: BTreeMap<ConnId, Sender<String>> = BTreeMap::new();
    for event in rx {
        match event {
            Event::Open(conn, w) => {
                coord.connect(conn);
                writers.insert(conn, w);
            }
            Event::Line(conn, line) => {
                for o in coord.handle_line(conn, &line) {
                    if let Some(w) = writers.get(&o.conn) {
                        let _ = w.send(o.msg.to_line());
                    }
                }
            }
            Event::Close(conn) => {
                coord.disconnect(conn);
                writers.remove(&conn);
            }
        }
    }
    coord
}

/// Blocking client for the line protocol.
pub struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    partial: Vec<u8>,
    seq: u64,
    pushes: VecDeque<Message>,
    stray: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
            partial: Vec::new(),
            seq: 0,
            pushes: VecDeque::new(),
            stray: 0,
        })
    }

    /// Sends a request and waits for its response, stashing any pushes that
    /// arrive first.
    pub fn request(&mut self, kind: Kind, tid: Option<Tid>, payload: Value) -> io::Result<Message> {
        self.seq += 1;
        let msg = Message::new(self.seq, kind, tid, payload);
        let seq = self.seq;
        loop {
            let m = self.request_raw(&msg.to_line())?;
            if m.seq == seq {
                return Ok(m);
            }
            self.stray += 1;
        }
    }

    /// Responses received that answered no pending request.
    pub fn stray_responses(&self) -> u64 {
        self.stray
    }

    /// Sends an arbitrary line and returns the next response.
    pub fn request_raw(&mut self, line: &str) -> io::Result<Message> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.reader.get_ref().set_read_timeout(None)?;
        loop {
            let m = self.read_message()?.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "closed"))?;
            if m.kind.is_push() {
                self.pushes.push_back(m);
            } else {
                return Ok(m);
            }
        }
    }

    /// Next push, waiting at most `timeout`.
    pub fn next_push(&mut self, timeout: Duration) -> io::Result<Option<Message>> {
        if let Some(m) = self.pushes.pop_front() {
            return Ok(Some(m));
        }
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        match self.read_message() {
            Ok(Some(m)) if m.kind.is_push() => Ok(Some(m)),
            Ok(Some(m)) => Err(io::Error::new(io::ErrorKind::InvalidData, format!("unexpected response {m:?}"))),
            Ok(None) => Ok(None),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Reads one full line; a partial line survives a timeout.
    fn read_message(&mut self) -> io::Result<Option<Message>> {
        let n = self.reader.read_until(b'\n', &mut self.partial)?;
        if n == 0 && self.partial.is_empty() {
            return Ok(None);
        }
        let line = std::mem::take(&mut self.partial);
        let text = String::from_utf8(line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Message::from_line(&text).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KernelConfig;

    fn coord() -> Coordinator {
        Coordinator::new(Kernel::new(KernelConfig::default(), 1).unwrap())
    }

    fn profile(x: f64) -> Value {
        json!({"location": {"x": x, "y": 0.0}, "credit": 80.0})
    }

    #[test]
    fn message_round_trips() {
        let m = Message::new(3, Kind::SubmitResult, Some(Tid(9)), json!({"user": "a"}));
        let line = m.to_line();
        assert!(line.contains("\"kind\":\"SubmitResult\""));
        assert_eq!(Message::from_line(&line).unwrap(), m);
    }

    #[test]
    fn every_request_gets_one_response() {
        let mut c = coord();
        let r = c.handle_line(1, "not json");
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].msg.error_code(), Some("Malformed"));
        let r = c.handle_line(1, r#"{"seq":5,"kind":"Publish","payload":{}}"#);
        assert_eq!((r[0].msg.seq, r[0].msg.error_code()), (5, Some("Malformed")));
        let r = c.handle_line(1, r#"{"seq":5,"kind":"ListTasks","payload":{"user":"a"}}"#);
        assert_eq!(r[0].msg.error_code(), Some("BadSeq"));
        let r = c.handle_line(1, r#"{"seq":6,"kind":"Ack","payload":{}}"#);
        assert_eq!(r[0].msg.error_code(), Some("UnknownKind"));
    }

    #[test]
    fn publish_pushes_assign_notices() {
        let mut lb = Loopback::new(coord());
        for (i, conn) in [2u64, 3, 4].iter().enumerate() {
            lb.connect(*conn);
            let r = lb.request(
                *conn,
                Kind::ListTasks,
                None,
                json!({"user": format!("u{i}"), "profile": profile(10.0 * i as f64)}),
            );
            assert_eq!(r.kind, Kind::TaskList);
        }
        lb.connect(1);
        let r = lb.request(
            1,
            Kind::Publish,
            None,
            json!({"publisher": "p", "description": "collect photos of the lake", "classification": "sensing-collection",
                   "scale": 3, "discrete": {"location": {"x": 0.0, "y": 0.0}}}),
        );
        assert_eq!(r.kind, Kind::Ack, "{r:?}");
        let tid = r.tid.unwrap();
        for conn in [2u64, 3, 4] {
            let push = lb.next_push(conn).unwrap();
            assert_eq!((push.kind, push.tid, push.seq), (Kind::AssignNotice, Some(tid), 1));
        }
        let r = lb.request(
            1,
            Kind::Publish,
            None,
            json!({"publisher": "p", "description": "collect photos of the lake",
            "classification": "sensing-collection", "scale": 9}),
        );
        assert_eq!(r.error_code(), Some("InsufficientParticipants"));
        assert!(r.tid.is_some());
    }

    #[test]
    fn tcp_round_trip() {
        let server = Server::start("127.0.0.1:0", Kernel::new(KernelConfig::default(), 1).unwrap()).unwrap();
        let mut c = Client::connect(server.local_addr()).unwrap();
        let r = c.request(Kind::ListTasks, None, json!({"user": "a", "profile": profile(0.0)})).unwrap();
        assert_eq!((r.seq, r.kind), (1, Kind::TaskList));
        let r = c.request_raw("garbage").unwrap();
        assert_eq!(r.error_code(), Some("Malformed"));
        let r = c.request(Kind::ListTasks, None, json!({"user": "a"})).unwrap();
        assert_eq!((r.seq, r.kind), (2, Kind::TaskList));
        assert!(c.next_push(Duration::from_millis(20)).unwrap().is_none());
    }
}
