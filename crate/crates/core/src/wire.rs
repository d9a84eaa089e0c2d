//! Binary wire format for every inter-replica message.
//!
//! Frame: `u32` little-endian body length, then the body. The body starts
//! with a one-byte message tag. Integers are little-endian, strings are a
//! `u16` byte length plus UTF-8, lists are a `u32` count plus items, `f64`
//! values are their IEEE-754 bits. An update record is encoded as
//!
//! ```text
//! origin u16 | seq u64 | state str | op u8 | amount u64 | client u64 | timestamp u64 | request_id u64
//! ```
//!
//! The encoded frame length is the message size reported in overhead metrics.

use thiserror::Error;

use crate::crdt::{ClientId, Op, RequestId, StateId, UpdateId, UpdateRecord};
use crate::raft::{Command, LogEntry, LogIndex, RaftMessage};
use crate::sim::{ReplicaId, VirtualTime};

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("frame length {declared} does not match body length {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown tag {tag:#04x} for {what}")]
    BadTag { what: &'static str, tag: u8 },
    #[error("string is not valid UTF-8")]
    BadUtf8,
    #[error("empty state id")]
    EmptyState,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

/// What the leader did with a submitted request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnResult {
    Placed {
        server: u16,
    },
    Released {
        server: u16,
    },
    /// No server had room.
    Rejected,
    /// The release target was never placed.
    NoTarget,
}

/// Strong-consistency client traffic. Decisions are taken by the leader once
/// the request's read marker commits.
#[derive(Debug, Clone, PartialEq)]
pub enum TxnMessage {
    Submit {
        request_id: RequestId,
        cost: u64,
        release_of: Option<RequestId>,
    },
    /// `values` is the utilization view the decision was made against, read at `read_index`.
    Decided {
        request_id: RequestId,
        read_index: LogIndex,
        index: LogIndex,
        values: Vec<i64>,
        result: TxnResult,
    },
    /// The receiver is not the leader.
    Unavailable {
        request_id: RequestId,
        hint: Option<ReplicaId>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Distribute {
        state: StateId,
        updates: Vec<UpdateRecord>,
    },
    Ack {
        state: StateId,
        ids: Vec<UpdateId>,
    },
    UpdateFailed {
        state: StateId,
        ids: Vec<UpdateId>,
    },
    IneffReport {
        state: StateId,
        update: UpdateId,
        phi: f64,
        window_span: u32,
        computed_at: VirtualTime,
    },
    ClChange {
        state: StateId,
        level: u8,
        epoch: u64,
    },
    ClAck {
        state: StateId,
        epoch: u64,
    },
    SyncRequest,
    SyncResponse {
        updates: Vec<UpdateRecord>,
        levels: Vec<(StateId, u8, u64)>,
    },
    Raft(RaftMessage),
    Txn(TxnMessage),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Distribute { .. } => "distribute",
            Message::Ack { .. } => "ack",
            Message::UpdateFailed { .. } => "update_failed",
            Message::IneffReport { .. } => "ineff_report",
            Message::ClChange { .. } => "cl_change",
            Message::ClAck { .. } => "cl_ack",
            Message::SyncRequest => "sync_request",
            Message::SyncResponse { .. } => "sync_response",
            Message::Raft(RaftMessage::RequestVote { .. }) => "request_vote",
            Message::Raft(RaftMessage::Vote { .. }) => "vote",
            Message::Raft(RaftMessage::AppendEntries { .. }) => "append_entries",
            Message::Raft(RaftMessage::AppendResult { .. }) => "append_result",
            Message::Txn(TxnMessage::Submit { .. }) => "submit",
            Message::Txn(TxnMessage::Decided { .. }) => "decided",
            Message::Txn(TxnMessage::Unavailable { .. }) => "unavailable",
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        let len = u16::try_from(s.len()).expect("state ids are short");
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("list fits in u32"));
    }
    fn update_id(&mut self, id: &UpdateId) {
        self.u16(id.origin.0);
        self.u64(id.seq);
    }
    fn update(&mut self, u: &UpdateRecord) {
        self.update_id(&u.id);
        self.str(u.state.as_str());
        self.u8(match u.op {
            Op::Increment => 0,
            Op::Decrement => 1,
        });
        self.u64(u.amount);
        self.u64(u.client.0);
        self.u64(u.timestamp.as_micros());
        self.u64(u.request_id.0);
    }
    fn updates(&mut self, us: &[UpdateRecord]) {
        self.len(us.len());
        us.iter().for_each(|u| self.update(u));
    }
    fn opt_replica(&mut self, r: Option<ReplicaId>) {
        match r {
            None => self.u8(0),
            Some(r) => {
                self.u8(1);
                self.u16(r.0);
            }
        }
    }
    fn command(&mut self, c: &Command) {
        match c {
            Command::Noop => self.u8(0),
            Command::Update(u) => {
                self.u8(1);
                self.update(u);
            }
            Command::ReadMarker { request_id, origin } => {
                self.u8(2);
                self.u64(request_id.0);
                self.u16(origin.0);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn str(&mut self) -> Result<&'a str, WireError> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| WireError::BadUtf8)
    }
    fn state(&mut self) -> Result<StateId, WireError> {
        StateId::new(self.str()?).map_err(|_| WireError::EmptyState)
    }
    /// List length, sanity-checked against the bytes left (each item is at least one byte).
    fn len(&mut self) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }
    fn update_id(&mut self) -> Result<UpdateId, WireError> {
        Ok(UpdateId {
            origin: ReplicaId(self.u16()?),
            seq: self.u64()?,
        })
    }
    fn update(&mut self) -> Result<UpdateRecord, WireError> {
        let id = self.update_id()?;
        let state = self.state()?;
        let op = match self.u8()? {
            0 => Op::Increment,
            1 => Op::Decrement,
            tag => return Err(WireError::BadTag { what: "op", tag }),
        };
        Ok(UpdateRecord {
            id,
            state,
            op,
            amount: self.u64()?,
            client: ClientId(self.u64()?),
            timestamp: VirtualTime(self.u64()?),
            request_id: RequestId(self.u64()?),
        })
    }
    fn updates(&mut self) -> Result<Vec<UpdateRecord>, WireError> {
        let n = self.len()?;
        (0..n).map(|_| self.update()).collect()
    }
    fn ids(&mut self) -> Result<Vec<UpdateId>, WireError> {
        let n = self.len()?;
        (0..n).map(|_| self.update_id()).collect()
    }
    fn opt_replica(&mut self) -> Result<Option<ReplicaId>, WireError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(ReplicaId(self.u16()?))),
            tag => Err(WireError::BadTag {
                what: "option",
                tag,
            }),
        }
    }
    fn command(&mut self) -> Result<Command, WireError> {
        match self.u8()? {
            0 => Ok(Command::Noop),
            1 => Ok(Command::Update(self.update()?)),
            2 => Ok(Command::ReadMarker {
                request_id: RequestId(self.u64()?),
                origin: ReplicaId(self.u16()?),
            }),
            tag => Err(WireError::BadTag {
                what: "command",
                tag,
            }),
        }
    }
}

mod tag {
    pub const DISTRIBUTE: u8 = 0x01;
    pub const ACK: u8 = 0x02;
    pub const UPDATE_FAILED: u8 = 0x03;
    pub const INEFF_REPORT: u8 = 0x04;
    pub const CL_CHANGE: u8 = 0x05;
    pub const CL_ACK: u8 = 0x06;
    pub const SYNC_REQUEST: u8 = 0x07;
    pub const SYNC_RESPONSE: u8 = 0x08;
    pub const REQUEST_VOTE: u8 = 0x10;
    pub const VOTE: u8 = 0x11;
    pub const APPEND_ENTRIES: u8 = 0x12;
    pub const APPEND_RESULT: u8 = 0x13;
    pub const SUBMIT: u8 = 0x20;
    pub const DECIDED: u8 = 0x21;
    pub const UNAVAILABLE: u8 = 0x22;
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer { buf: vec![0; 4] };
    match msg {
        Message::Distribute { state, updates } => {
            w.u8(tag::DISTRIBUTE);
            w.str(state.as_str());
            w.updates(updates);
        }
        Message::Ack { state, ids } | Message::UpdateFailed { state, ids } => {
            w.u8(if matches!(msg, Message::Ack { .. }) {
                tag::ACK
            } else {
                tag::UPDATE_FAILED
            });
            w.str(state.as_str());
            w.len(ids.len());
            ids.iter().for_each(|id| w.update_id(id));
        }
        Message::IneffReport {
            state,
            update,
            phi,
            window_span,
            computed_at,
        } => {
            w.u8(tag::INEFF_REPORT);
            w.str(state.as_str());
            w.update_id(update);
            w.u64(phi.to_bits());
            w.u32(*window_span);
            w.u64(computed_at.as_micros());
        }
        Message::ClChange {
            state,
            level,
            epoch,
        } => {
            w.u8(tag::CL_CHANGE);
            w.str(state.as_str());
            w.u8(*level);
            w.u64(*epoch);
        }
        Message::ClAck { state, epoch } => {
            w.u8(tag::CL_ACK);
            w.str(state.as_str());
            w.u64(*epoch);
        }
        Message::SyncRequest => w.u8(tag::SYNC_REQUEST),
        Message::SyncResponse { updates, levels } => {
            w.u8(tag::SYNC_RESPONSE);
            w.updates(updates);
            w.len(levels.len());
            for (s, l, e) in levels {
                w.str(s.as_str());
                w.u8(*l);
                w.u64(*e);
            }
        }
        Message::Raft(m) => match m {
            RaftMessage::RequestVote {
                term,
                candidate,
                last_log_index,
                last_log_term,
            } => {
                w.u8(tag::REQUEST_VOTE);
                w.u64(*term);
                w.u16(candidate.0);
                w.u64(*last_log_index);
                w.u64(*last_log_term);
            }
            RaftMessage::Vote { term, granted } => {
                w.u8(tag::VOTE);
                w.u64(*term);
                w.u8(*granted as u8);
            }
            RaftMessage::AppendEntries {
                term,
                leader,
                prev_index,
                prev_term,
                entries,
                leader_commit,
            } => {
                w.u8(tag::APPEND_ENTRIES);
                w.u64(*term);
                w.u16(leader.0);
                w.u64(*prev_index);
                w.u64(*prev_term);
                w.u64(*leader_commit);
                w.len(entries.len());
                for e in entries {
                    w.u64(e.term);
                    w.u64(e.index);
                    w.command(&e.command);
                }
            }
            RaftMessage::AppendResult {
                term,
                success,
                match_index,
            } => {
                w.u8(tag::APPEND_RESULT);
                w.u64(*term);
                w.u8(*success as u8);
                w.u64(*match_index);
            }
        },
        Message::Txn(t) => match t {
            TxnMessage::Submit {
                request_id,
                cost,
                release_of,
            } => {
                w.u8(tag::SUBMIT);
                w.u64(request_id.0);
                w.u64(*cost);
                match release_of {
                    None => w.u8(0),
                    Some(t) => {
                        w.u8(1);
                        w.u64(t.0);
                    }
                }
            }
            TxnMessage::Decided {
                request_id,
                read_index,
                index,
                values,
                result,
            } => {
                w.u8(tag::DECIDED);
                w.u64(request_id.0);
                w.u64(*read_index);
                w.u64(*index);
                w.len(values.len());
                values.iter().for_each(|v| w.i64(*v));
                match result {
                    TxnResult::Placed { server } => {
                        w.u8(0);
                        w.u16(*server);
                    }
                    TxnResult::Released { server } => {
                        w.u8(1);
                        w.u16(*server);
                    }
                    TxnResult::Rejected => w.u8(2),
                    TxnResult::NoTarget => w.u8(3),
                }
            }
            TxnMessage::Unavailable { request_id, hint } => {
                w.u8(tag::UNAVAILABLE);
                w.u64(request_id.0);
                w.opt_replica(*hint);
            }
        },
    }
    let body = (w.buf.len() - 4) as u32;
    w.buf[..4].copy_from_slice(&body.to_le_bytes());
    w.buf
}

pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: frame };
    let declared = r.u32()? as usize;
    if declared != r.buf.len() {
        return Err(WireError::LengthMismatch {
            declared,
            actual: r.buf.len(),
        });
    }
    let msg = match r.u8()? {
        tag::DISTRIBUTE => Message::Distribute {
            state: r.state()?,
            updates: r.updates()?,
        },
        tag::ACK => Message::Ack {
            state: r.state()?,
            ids: r.ids()?,
        },
        tag::UPDATE_FAILED => Message::UpdateFailed {
            state: r.state()?,
            ids: r.ids()?,
        },
        tag::INEFF_REPORT => Message::IneffReport {
            state: r.state()?,
            update: r.update_id()?,
            phi: f64::from_bits(r.u64()?),
            window_span: r.u32()?,
            computed_at: VirtualTime(r.u64()?),
        },
        tag::CL_CHANGE => Message::ClChange {
            state: r.state()?,
            level: r.u8()?,
            epoch: r.u64()?,
        },
        tag::CL_ACK => Message::ClAck {
            state: r.state()?,
            epoch: r.u64()?,
        },
        tag::SYNC_REQUEST => Message::SyncRequest,
        tag::SYNC_RESPONSE => {
            let updates = r.updates()?;
            let n = r.len()?;
            let levels = (0..n)
                .map(|_| Ok((r.state()?, r.u8()?, r.u64()?)))
                .collect::<Result<_, WireError>>()?;
            Message::SyncResponse { updates, levels }
        }
        tag::REQUEST_VOTE => Message::Raft(RaftMessage::RequestVote {
            term: r.u64()?,
            candidate: ReplicaId(r.u16()?),
            last_log_index: r.u64()?,
            last_log_term: r.u64()?,
        }),
        tag::VOTE => Message::Raft(RaftMessage::Vote {
            term: r.u64()?,
            granted: r.u8()? != 0,
        }),
        tag::APPEND_ENTRIES => {
            let term = r.u64()?;
            let leader = ReplicaId(r.u16()?);
            let prev_index = r.u64()?;
            let prev_term = r.u64()?;
            let leader_commit = r.u64()?;
            let n = r.len()?;
            let entries = (0..n)
                .map(|_| {
                    Ok(LogEntry {
                        term: r.u64()?,
                        index: r.u64()?,
                        command: r.command()?,
                    })
                })
                .collect::<Result<_, WireError>>()?;
            Message::Raft(RaftMessage::AppendEntries {
                term,
                leader,
                prev_index,
                prev_term,
                entries,
                leader_commit,
            })
        }
        tag::APPEND_RESULT => Message::Raft(RaftMessage::AppendResult {
            term: r.u64()?,
            success: r.u8()? != 0,
            match_index: r.u64()?,
        }),
        tag::SUBMIT => {
            let request_id = RequestId(r.u64()?);
            let cost = r.u64()?;
            let release_of = match r.u8()? {
                0 => None,
                1 => Some(RequestId(r.u64()?)),
                tag => {
                    return Err(WireError::BadTag {
                        what: "option",
                        tag,
                    })
                }
            };
            Message::Txn(TxnMessage::Submit {
                request_id,
                cost,
                release_of,
            })
        }
        tag::DECIDED => {
            let request_id = RequestId(r.u64()?);
            let read_index = r.u64()?;
            let index = r.u64()?;
            let n = r.len()?;
            let values = (0..n).map(|_| r.i64()).collect::<Result<_, _>>()?;
            let result = match r.u8()? {
                0 => TxnResult::Placed { server: r.u16()? },
                1 => TxnResult::Released { server: r.u16()? },
                2 => TxnResult::Rejected,
                3 => TxnResult::NoTarget,
                tag => {
                    return Err(WireError::BadTag {
                        what: "txn result",
                        tag,
                    })
                }
            };
            Message::Txn(TxnMessage::Decided {
                request_id,
                read_index,
                index,
                values,
                result,
            })
        }
        tag::UNAVAILABLE => Message::Txn(TxnMessage::Unavailable {
            request_id: RequestId(r.u64()?),
            hint: r.opt_replica()?,
        }),
        tag => {
            return Err(WireError::BadTag {
                what: "message",
                tag,
            })
        }
    };
    if !r.buf.is_empty() {
        return Err(WireError::Trailing(r.buf.len()));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(seq: u64) -> UpdateRecord {
        UpdateRecord {
            id: UpdateId {
                origin: ReplicaId(3),
                seq,
            },
            state: StateId::new("server-1").unwrap(),
            op: if seq.is_multiple_of(2) {
                Op::Increment
            } else {
                Op::Decrement
            },
            amount: 512,
            client: ClientId(9),
            timestamp: VirtualTime(123_456),
            request_id: RequestId(77),
        }
    }

    fn samples() -> Vec<Message> {
        let s = StateId::new("server-0").unwrap();
        vec![
            Message::Distribute {
                state: s.clone(),
                updates: vec![upd(1), upd(2)],
            },
            Message::Ack {
                state: s.clone(),
                ids: vec![upd(1).id],
            },
            Message::UpdateFailed {
                state: s.clone(),
                ids: vec![],
            },
            Message::IneffReport {
                state: s.clone(),
                update: upd(4).id,
                phi: 2.75,
                window_span: 3,
                computed_at: VirtualTime(9),
            },
            Message::ClChange {
                state: s.clone(),
                level: 7,
                epoch: 12,
            },
            Message::ClAck {
                state: s.clone(),
                epoch: 12,
            },
            Message::SyncRequest,
            Message::SyncResponse {
                updates: vec![upd(5)],
                levels: vec![(s, 3, 1)],
            },
            Message::Raft(RaftMessage::RequestVote {
                term: 4,
                candidate: ReplicaId(1),
                last_log_index: 10,
                last_log_term: 3,
            }),
            Message::Raft(RaftMessage::Vote {
                term: 4,
                granted: true,
            }),
            Message::Raft(RaftMessage::AppendEntries {
                term: 4,
                leader: ReplicaId(1),
                prev_index: 9,
                prev_term: 3,
                entries: vec![
                    LogEntry {
                        term: 4,
                        index: 10,
                        command: Command::Noop,
                    },
                    LogEntry {
                        term: 4,
                        index: 11,
                        command: Command::Update(upd(6)),
                    },
                    LogEntry {
                        term: 4,
                        index: 12,
                        command: Command::ReadMarker {
                            request_id: RequestId(5),
                            origin: ReplicaId(2),
                        },
                    },
                ],
                leader_commit: 8,
            }),
            Message::Raft(RaftMessage::AppendResult {
                term: 4,
                success: false,
                match_index: 6,
            }),
            Message::Txn(TxnMessage::Submit {
                request_id: RequestId(1),
                cost: 550,
                release_of: None,
            }),
            Message::Txn(TxnMessage::Submit {
                request_id: RequestId(2),
                cost: 550,
                release_of: Some(RequestId(1)),
            }),
            Message::Txn(TxnMessage::Decided {
                request_id: RequestId(1),
                read_index: 3,
                index: 4,
                values: vec![-5, 1000],
                result: TxnResult::Placed { server: 1 },
            }),
            Message::Txn(TxnMessage::Decided {
                request_id: RequestId(2),
                read_index: 5,
                index: 6,
                values: vec![],
                result: TxnResult::Released { server: 0 },
            }),
            Message::Txn(TxnMessage::Decided {
                request_id: RequestId(3),
                read_index: 7,
                index: 0,
                values: vec![1],
                result: TxnResult::Rejected,
            }),
            Message::Txn(TxnMessage::Decided {
                request_id: RequestId(4),
                read_index: 8,
                index: 0,
                values: vec![],
                result: TxnResult::NoTarget,
            }),
            Message::Txn(TxnMessage::Unavailable {
                request_id: RequestId(1),
                hint: Some(ReplicaId(4)),
            }),
            Message::Txn(TxnMessage::Unavailable {
                request_id: RequestId(1),
                hint: None,
            }),
        ]
    }

    #[test]
    fn round_trips() {
        for m in samples() {
            let frame = encode(&m);
            assert_eq!(
                u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize,
                frame.len() - 4
            );
            assert_eq!(decode(&frame).unwrap(), m);
        }
    }

    #[test]
    fn update_record_size() {
        // 2+8 + (2+8) + 1 + 8*4 = 53 bytes per record with an 8-byte state name
        let one = encode(&Message::Distribute {
            state: upd(0).state,
            updates: vec![upd(0)],
        })
        .len();
        let two = encode(&Message::Distribute {
            state: upd(0).state,
            updates: vec![upd(0), upd(1)],
        })
        .len();
        assert_eq!(two - one, 53);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        for m in samples() {
            let frame = encode(&m);
            for cut in 0..frame.len() {
                assert!(decode(&frame[..cut]).is_err());
            }
        }
        assert_eq!(
            decode(&[1, 0, 0, 0, 0xee]),
            Err(WireError::BadTag {
                what: "message",
                tag: 0xee
            })
        );
        let mut f = encode(&Message::SyncRequest);
        f.push(0);
        assert!(matches!(decode(&f), Err(WireError::LengthMismatch { .. })));
    }
}
