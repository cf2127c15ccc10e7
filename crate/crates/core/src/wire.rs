//! Binary frame format shared by the simulator and the socket transport.
//!
//! Every frame is `len:u32` followed by `len` bytes of body. Integers are
//! little-endian, floats IEEE-754 binary32. The byte layout is documented in
//! `docs/wire-format.md`.

use crate::error::{Error, Result};
use crate::model::{Key, NodeId, RoundIndex, Version};

pub const TAG_REQUEST: u8 = 1;
pub const TAG_RESPONSE: u8 = 2;
pub const TAG_READ: u8 = 3;
pub const TAG_READ_REPLY: u8 = 4;

const SEC_INTENT_ENDS: u8 = 1;
const SEC_INTENT_STARTS: u8 = 2;
const SEC_REPLICA_UPDATES: u8 = 3;
const SEC_REMOTE_PUSHES: u8 = 4;
const SEC_GRANTS: u8 = 5;
const SEC_PAYLOADS: u8 = 6;
const SEC_REFRESHES: u8 = 7;
const SEC_DESTROYS: u8 = 8;
const SEC_LOCATIONS: u8 = 9;

/// Envelope flag: the sender's workers are done and it has nothing pending.
pub const FLAG_IDLE: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvelopeKind {
    Request,
    Response,
}

/// Intent start or end for one key from one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Announcement {
    pub key: Key,
    /// Node whose intent changed.
    pub origin: NodeId,
    /// Per-sender sequence number; later announcements win.
    pub seq: u64,
    /// Network transmissions so far, including the current one.
    pub hops: u8,
}

/// Local updates of a replica holder on their way to the owner.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaUpdate {
    pub key: Key,
    pub origin: NodeId,
    pub seq: u64,
    /// Version the holder last synchronized to.
    pub version: Version,
    pub hops: u8,
    pub delta: Vec<f32>,
}

/// Update for a key the sender neither owns nor replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct RemotePush {
    pub key: Key,
    pub hops: u8,
    pub delta: Vec<f32>,
}

/// Per-node intent bookkeeping carried along with the main copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntentEntry {
    pub node: NodeId,
    pub seq: u64,
    pub active: bool,
}

/// Transfer of a main copy.
#[derive(Clone, Debug, PartialEq)]
pub struct RelocationGrant {
    pub key: Key,
    pub version: Version,
    pub epoch: u64,
    /// Highest replica update sequence of the target already merged.
    pub acked_seq: u64,
    pub value: Vec<f32>,
    /// Active entries come first, in activation order.
    pub intents: Vec<IntentEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RefreshBody {
    Full(Vec<f32>),
    /// One summed delta per version step, oldest first.
    Deltas(Vec<Vec<f32>>),
}

/// Replica creation or refresh from the owner.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaRefresh {
    pub key: Key,
    pub version: Version,
    pub acked_seq: u64,
    pub body: RefreshBody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocationUpdate {
    pub key: Key,
    pub owner: NodeId,
    pub epoch: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sections {
    pub intent_ends: Vec<Announcement>,
    pub intent_starts: Vec<Announcement>,
    pub replica_updates: Vec<ReplicaUpdate>,
    pub remote_pushes: Vec<RemotePush>,
    pub relocation_grants: Vec<RelocationGrant>,
    pub replica_payloads: Vec<ReplicaRefresh>,
    pub refresh_deltas: Vec<ReplicaRefresh>,
    pub replica_destroys: Vec<Key>,
    pub location_updates: Vec<LocationUpdate>,
}

impl Sections {
    pub fn is_empty(&self) -> bool {
        self.intent_ends.is_empty()
            && self.intent_starts.is_empty()
            && self.replica_updates.is_empty()
            && self.remote_pushes.is_empty()
            && self.relocation_grants.is_empty()
            && self.replica_payloads.is_empty()
            && self.refresh_deltas.is_empty()
            && self.replica_destroys.is_empty()
            && self.location_updates.is_empty()
    }

    pub fn append(&mut self, mut other: Sections) {
        self.intent_ends.append(&mut other.intent_ends);
        self.intent_starts.append(&mut other.intent_starts);
        self.replica_updates.append(&mut other.replica_updates);
        self.remote_pushes.append(&mut other.remote_pushes);
        self.relocation_grants.append(&mut other.relocation_grants);
        self.replica_payloads.append(&mut other.replica_payloads);
        self.refresh_deltas.append(&mut other.refresh_deltas);
        self.replica_destroys.append(&mut other.replica_destroys);
        self.location_updates.append(&mut other.location_updates);
    }

    fn section_count(&self) -> u16 {
        [
            self.intent_ends.len(),
            self.intent_starts.len(),
            self.replica_updates.len(),
            self.remote_pushes.len(),
            self.relocation_grants.len(),
            self.replica_payloads.len(),
            self.refresh_deltas.len(),
            self.replica_destroys.len(),
            self.location_updates.len(),
        ]
        .iter()
        .filter(|&&n| n > 0)
        .count() as u16
    }
}

/// One grouped request or response between an ordered node pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    pub round: RoundIndex,
    pub kind: EnvelopeKind,
    pub flags: u8,
    pub sections: Sections,
}

impl Envelope {
    pub fn new(from: NodeId, to: NodeId, round: RoundIndex, kind: EnvelopeKind) -> Self {
        Envelope {
            from,
            to,
            round,
            kind,
            flags: 0,
            sections: Sections::default(),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.flags & FLAG_IDLE != 0
    }
}

/// Synchronous read of keys the origin holds no copy of.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadRequest {
    pub id: u64,
    pub origin: NodeId,
    pub hops: u8,
    pub keys: Vec<Key>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadEntry {
    pub key: Key,
    pub owner: NodeId,
    pub hops: u8,
    pub value: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadReply {
    pub id: u64,
    pub entries: Vec<ReadEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Envelope(Envelope),
    Read(ReadRequest),
    ReadReply(ReadReply),
}

// ---------------------------------------------------------------- encoding

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
    fn floats(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn section<T>(&mut self, tag: u8, items: &[T], mut each: impl FnMut(&mut Self, &T)) {
        if items.is_empty() {
            return;
        }
        self.u8(tag);
        self.u32(items.len() as u32);
        for it in items {
            each(self, it);
        }
    }
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
    };
    w.u32(0);
    match frame {
        Frame::Envelope(e) => encode_envelope(&mut w, e),
        Frame::Read(r) => {
            w.u8(TAG_READ);
            w.u64(r.id);
            w.u32(r.origin.0);
            w.u8(r.hops);
            w.u32(r.keys.len() as u32);
            for k in &r.keys {
                w.u64(k.0);
            }
        }
        Frame::ReadReply(r) => {
            w.u8(TAG_READ_REPLY);
            w.u64(r.id);
            w.u32(r.entries.len() as u32);
            for e in &r.entries {
                w.u64(e.key.0);
                w.u32(e.owner.0);
                w.u8(e.hops);
                w.floats(&e.value);
            }
        }
    }
    let len = (w.buf.len() - 4) as u32;
    w.buf[..4].copy_from_slice(&len.to_le_bytes());
    w.buf
}

fn encode_envelope(w: &mut Writer, e: &Envelope) {
    w.u8(match e.kind {
        EnvelopeKind::Request => TAG_REQUEST,
        EnvelopeKind::Response => TAG_RESPONSE,
    });
    w.u32(e.from.0);
    w.u32(e.to.0);
    w.u64(e.round);
    w.u8(e.flags);
    let s = &e.sections;
    w.u16(s.section_count());
    let announce = |w: &mut Writer, a: &Announcement| {
        w.u64(a.key.0);
        w.u32(a.origin.0);
        w.u64(a.seq);
        w.u8(a.hops);
    };
    w.section(SEC_INTENT_ENDS, &s.intent_ends, announce);
    w.section(SEC_INTENT_STARTS, &s.intent_starts, announce);
    w.section(SEC_REPLICA_UPDATES, &s.replica_updates, |w, u| {
        w.u64(u.key.0);
        w.u32(u.origin.0);
        w.u64(u.seq);
        w.u64(u.version.0);
        w.u8(u.hops);
        w.floats(&u.delta);
    });
    w.section(SEC_REMOTE_PUSHES, &s.remote_pushes, |w, p| {
        w.u64(p.key.0);
        w.u8(p.hops);
        w.floats(&p.delta);
    });
    w.section(SEC_GRANTS, &s.relocation_grants, |w, g| {
        w.u64(g.key.0);
        w.u64(g.version.0);
        w.u64(g.epoch);
        w.u64(g.acked_seq);
        w.floats(&g.value);
        w.u32(g.intents.len() as u32);
        for i in &g.intents {
            w.u32(i.node.0);
            w.u64(i.seq);
            w.u8(i.active as u8);
        }
    });
    let refresh = |w: &mut Writer, r: &ReplicaRefresh| {
        w.u64(r.key.0);
        w.u64(r.version.0);
        w.u64(r.acked_seq);
        match &r.body {
            RefreshBody::Full(v) => {
                w.u8(0);
                w.floats(v);
            }
            RefreshBody::Deltas(ds) => {
                w.u8(1);
                w.u32(ds.len() as u32);
                for d in ds {
                    w.floats(d);
                }
            }
        }
    };
    w.section(SEC_PAYLOADS, &s.replica_payloads, refresh);
    w.section(SEC_REFRESHES, &s.refresh_deltas, refresh);
    w.section(SEC_DESTROYS, &s.replica_destroys, |w, k| w.u64(k.0));
    w.section(SEC_LOCATIONS, &s.location_updates, |w, l| {
        w.u64(l.key.0);
        w.u32(l.owner.0);
        w.u64(l.epoch);
    });
}

// ---------------------------------------------------------------- decoding

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode(format!("truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Reads an item count, rejecting counts that cannot fit in the rest of
    /// the frame.
    fn count(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.len() - self.pos {
            return Err(Error::Decode(format!("count {n} exceeds frame")));
        }
        Ok(n)
    }
    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.count(4)?;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn items<T>(&mut self, min_item: usize, mut f: impl FnMut(&mut Self) -> Result<T>) -> Result<Vec<T>> {
        let n = self.count(min_item)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f(self)?);
        }
        Ok(out)
    }
}

/// Decodes one frame including its length prefix.
pub fn decode(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 4 {
        return Err(Error::Decode("missing length prefix".into()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() - 4 != len {
        return Err(Error::Decode(format!(
            "length prefix {len} but {} body bytes",
            bytes.len() - 4
        )));
    }
    decode_body(&bytes[4..])
}

/// Decodes a frame body (without the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Frame> {
    let mut r = Reader { buf: body, pos: 0 };
    let frame = match r.u8()? {
        TAG_REQUEST | TAG_RESPONSE => {
            let kind = if body[0] == TAG_REQUEST {
                EnvelopeKind::Request
            } else {
                EnvelopeKind::Response
            };
            Frame::Envelope(decode_envelope(&mut r, kind)?)
        }
        TAG_READ => {
            let id = r.u64()?;
            let origin = NodeId(r.u32()?);
            let hops = r.u8()?;
            let keys = r.items(8, |r| Ok(Key(r.u64()?)))?;
            Frame::Read(ReadRequest { id, origin, hops, keys })
        }
        TAG_READ_REPLY => {
            let id = r.u64()?;
            let entries = r.items(17, |r| {
                Ok(ReadEntry {
                    key: Key(r.u64()?),
                    owner: NodeId(r.u32()?),
                    hops: r.u8()?,
                    value: r.floats()?,
                })
            })?;
            Frame::ReadReply(ReadReply { id, entries })
        }
        t => return Err(Error::Decode(format!("unknown frame tag {t}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Decode(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(frame)
}

fn decode_envelope(r: &mut Reader<'_>, kind: EnvelopeKind) -> Result<Envelope> {
    let from = NodeId(r.u32()?);
    let to = NodeId(r.u32()?);
    let round = r.u64()?;
    let flags = r.u8()?;
    let count = r.u16()?;
    let mut s = Sections::default();
    let mut last_tag = 0u8;
    let announce = |r: &mut Reader<'_>| {
        Ok(Announcement {
            key: Key(r.u64()?),
            origin: NodeId(r.u32()?),
            seq: r.u64()?,
            hops: r.u8()?,
        })
    };
    let refresh = |r: &mut Reader<'_>| {
        let key = Key(r.u64()?);
        let version = Version(r.u64()?);
        let acked_seq = r.u64()?;
        let body = match r.u8()? {
            0 => RefreshBody::Full(r.floats()?),
            1 => RefreshBody::Deltas(r.items(4, |r| r.floats())?),
            b => return Err(Error::Decode(format!("unknown refresh body {b}"))),
        };
        Ok(ReplicaRefresh {
            key,
            version,
            acked_seq,
            body,
        })
    };
    for _ in 0..count {
        let tag = r.u8()?;
        if tag <= last_tag {
            return Err(Error::Decode(format!("section {tag} out of order")));
        }
        last_tag = tag;
        match tag {
            SEC_INTENT_ENDS => s.intent_ends = r.items(21, announce)?,
            SEC_INTENT_STARTS => s.intent_starts = r.items(21, announce)?,
            SEC_REPLICA_UPDATES => {
                s.replica_updates = r.items(33, |r| {
                    Ok(ReplicaUpdate {
                        key: Key(r.u64()?),
                        origin: NodeId(r.u32()?),
                        seq: r.u64()?,
                        version: Version(r.u64()?),
                        hops: r.u8()?,
                        delta: r.floats()?,
                    })
                })?
            }
            SEC_REMOTE_PUSHES => {
                s.remote_pushes = r.items(13, |r| {
                    Ok(RemotePush {
                        key: Key(r.u64()?),
                        hops: r.u8()?,
                        delta: r.floats()?,
                    })
                })?
            }
            SEC_GRANTS => {
                s.relocation_grants = r.items(40, |r| {
                    Ok(RelocationGrant {
                        key: Key(r.u64()?),
                        version: Version(r.u64()?),
                        epoch: r.u64()?,
                        acked_seq: r.u64()?,
                        value: r.floats()?,
                        intents: r.items(13, |r| {
                            Ok(IntentEntry {
                                node: NodeId(r.u32()?),
                                seq: r.u64()?,
                                active: match r.u8()? {
                                    0 => false,
                                    1 => true,
                                    b => return Err(Error::Decode(format!("bad flag {b}"))),
                                },
                            })
                        })?,
                    })
                })?
            }
            SEC_PAYLOADS => s.replica_payloads = r.items(29, refresh)?,
            SEC_REFRESHES => s.refresh_deltas = r.items(29, refresh)?,
            SEC_DESTROYS => s.replica_destroys = r.items(8, |r| Ok(Key(r.u64()?)))?,
            SEC_LOCATIONS => {
                s.location_updates = r.items(20, |r| {
                    Ok(LocationUpdate {
                        key: Key(r.u64()?),
                        owner: NodeId(r.u32()?),
                        epoch: r.u64()?,
                    })
                })?
            }
            t => return Err(Error::Decode(format!("unknown section tag {t}"))),
        }
    }
    Ok(Envelope {
        from,
        to,
        round,
        kind,
        flags,
        sections: s,
    })
}
