//! Binary wire protocol: message types and a bit-exact frame codec.
//!
//! Every inter-process channel (direct, SOCKS-tunneled, emulated) speaks this
//! framing. Layout of a frame:
//!
//! ```text
//! magic      2 bytes   0xA5 0x51
//! version    1 byte    0x01
//! msg_type   1 byte
//! body_len   4 bytes   u32 big-endian
//! body       body_len bytes
//! ```
//!
//! All multi-byte integers are big-endian; coordinates travel as IEEE-754
//! binary64 bits so a distributed run is bit-identical to a sequential one.

use std::fmt;

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0xA5, 0x51];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 8;
/// Frame cap: prevents unbounded allocation from a corrupted or hostile peer.
pub const MAX_BODY_LEN: u32 = 16 * 1024 * 1024;
/// Entity/pair lists are capped so a body length can never overflow the frame cap.
pub const MAX_LIST_LEN: usize = 1 << 16;

/// Transport scheme of an endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Direct,
    Socks,
    Emu,
}

impl Scheme {
    fn code(self) -> u8 {
        match self {
            Scheme::Direct => 0,
            Scheme::Socks => 1,
            Scheme::Emu => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scheme::Direct),
            1 => Some(Scheme::Socks),
            2 => Some(Scheme::Emu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::Socks => "socks",
            Scheme::Emu => "emu",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Scheme::Direct),
            "socks" => Ok(Scheme::Socks),
            "emu" => Ok(Scheme::Emu),
            other => Err(format!("unknown transport scheme '{other}'")),
        }
    }
}

/// Where a process can be reached. The host is whatever the owner chooses to
/// advertise: a DNS name, a dotted IPv4, a .onion name, or an "anon:<token>"
/// name on the emulated overlay. It must fit a SOCKS5 domain field.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub scheme: Scheme,
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(scheme: Scheme, host: impl Into<String>, port: u16) -> Result<Self, WireError> {
        let host = host.into();
        if host.is_empty() || host.len() > 255 {
            return Err(WireError::BadEndpoint(format!(
                "host length {} out of range 1..=255",
                host.len()
            )));
        }
        if port == 0 {
            return Err(WireError::BadEndpoint("port must be nonzero".into()));
        }
        Ok(Self { scheme, host, port })
    }

    /// Parse "scheme://host:port". The port is split off the last ':' so
    /// emulated hosts like "anon:lp3" survive.
    pub fn parse(s: &str) -> Result<Self, WireError> {
        let (scheme_str, rest) = s
            .split_once("://")
            .ok_or_else(|| WireError::BadEndpoint(format!("missing scheme:// in '{s}'")))?;
        let scheme: Scheme = scheme_str
            .parse()
            .map_err(WireError::BadEndpoint)?;
        let (host, port_str) = rest
            .rsplit_once(':')
            .ok_or_else(|| WireError::BadEndpoint(format!("missing :port in '{s}'")))?;
        let port: u16 = port_str
            .parse()
            .map_err(|_| WireError::BadEndpoint(format!("bad port in '{s}'")))?;
        Endpoint::new(scheme, host, port)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}:{}", self.scheme.as_str(), self.host, self.port)
    }
}

/// A registered LP: the pseudonym assigned by the coordinator plus the opaque
/// endpoint it self-reported. This pair is the unit of anonymity — nothing
/// else about an LP is ever carried on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LpIdentity {
    pub lp_id: u32,
    pub endpoint: Endpoint,
}

/// Every message the protocol can carry. The byte in parentheses is the
/// frame's msg_type.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// (0x01) LP -> SIMA: the endpoint other LPs should dial.
    Register { listen_endpoint: Endpoint },
    /// (0x02) SIMA -> LP: assigned pseudonym and the run's LP count.
    RegisterAck { lp_id: u32, total_lps: u32 },
    /// (0x03) SIMA -> all LPs: the complete run membership.
    Roster { entries: Vec<LpIdentity> },
    /// (0x04) mesh handshake: the dialer identifies itself.
    Hello { lp_id: u32 },
    /// (0x05) per-step positions of the sender's local entities.
    PositionDigest { step: u64, entries: Vec<(u32, f64, f64)> },
    /// (0x06) pings from local entities to entities hosted by the receiver.
    PingBatch { step: u64, pairs: Vec<(u32, u32)> },
    /// (0x07) barrier: sender finished the step; sent_count frames went to
    /// this receiver during it.
    StepEnd { step: u64, lp_id: u32, sent_count: u32 },
    /// (0x08) entity ownership transfer; blob is the model's serialization.
    Migrate { step: u64, entity_blob: Vec<u8> },
    /// (0x09) broadcast directory update after a migration.
    MigrateNotice { step: u64, entity_id: u32, new_lp: u32 },
    /// (0x0A) reliability layer cumulative acknowledgement.
    Ack { cumulative_seq: u32 },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Register { .. } => 0x01,
            Message::RegisterAck { .. } => 0x02,
            Message::Roster { .. } => 0x03,
            Message::Hello { .. } => 0x04,
            Message::PositionDigest { .. } => 0x05,
            Message::PingBatch { .. } => 0x06,
            Message::StepEnd { .. } => 0x07,
            Message::Migrate { .. } => 0x08,
            Message::MigrateNotice { .. } => 0x09,
            Message::Ack { .. } => 0x0A,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Register { .. } => "Register",
            Message::RegisterAck { .. } => "RegisterAck",
            Message::Roster { .. } => "Roster",
            Message::Hello { .. } => "Hello",
            Message::PositionDigest { .. } => "PositionDigest",
            Message::PingBatch { .. } => "PingBatch",
            Message::StepEnd { .. } => "StepEnd",
            Message::Migrate { .. } => "Migrate",
            Message::MigrateNotice { .. } => "MigrateNotice",
            Message::Ack { .. } => "Ack",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("body length {0} exceeds {MAX_BODY_LEN} byte cap")]
    BodyTooLarge(u32),
    #[error("list of {0} entries exceeds {MAX_LIST_LEN} entry cap")]
    ListTooLong(usize),
    #[error("malformed body for {msg}: {detail}")]
    MalformedBody { msg: &'static str, detail: String },
    #[error("invalid endpoint: {0}")]
    BadEndpoint(String),
}

/// Result of feeding bytes to the decoder.
#[derive(Debug, PartialEq)]
pub enum DecodeOutcome {
    /// A full frame was decoded, consuming this many bytes.
    Complete { message: Message, consumed: usize },
    /// Not enough bytes yet for the header or the declared body.
    NeedMoreBytes,
}

// -- body writers ------------------------------------------------------------

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

fn put_endpoint(out: &mut Vec<u8>, ep: &Endpoint) {
    out.push(ep.scheme.code());
    out.push(ep.host.len() as u8);
    out.extend_from_slice(ep.host.as_bytes());
    put_u16(out, ep.port);
}

fn check_list(len: usize) -> Result<(), WireError> {
    if len > MAX_LIST_LEN {
        return Err(WireError::ListTooLong(len));
    }
    Ok(())
}

/// Encode a message as one frame: magic ‖ version ‖ type ‖ body_len ‖ body.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::new();
    match msg {
        Message::Register { listen_endpoint } => put_endpoint(&mut body, listen_endpoint),
        Message::RegisterAck { lp_id, total_lps } => {
            put_u32(&mut body, *lp_id);
            put_u32(&mut body, *total_lps);
        }
        Message::Roster { entries } => {
            check_list(entries.len())?;
            put_u32(&mut body, entries.len() as u32);
            for e in entries {
                put_u32(&mut body, e.lp_id);
                put_endpoint(&mut body, &e.endpoint);
            }
        }
        Message::Hello { lp_id } => put_u32(&mut body, *lp_id),
        Message::PositionDigest { step, entries } => {
            check_list(entries.len())?;
            put_u64(&mut body, *step);
            put_u32(&mut body, entries.len() as u32);
            for (id, x, y) in entries {
                put_u32(&mut body, *id);
                put_f64(&mut body, *x);
                put_f64(&mut body, *y);
            }
        }
        Message::PingBatch { step, pairs } => {
            check_list(pairs.len())?;
            put_u64(&mut body, *step);
            put_u32(&mut body, pairs.len() as u32);
            for (src, dst) in pairs {
                put_u32(&mut body, *src);
                put_u32(&mut body, *dst);
            }
        }
        Message::StepEnd { step, lp_id, sent_count } => {
            put_u64(&mut body, *step);
            put_u32(&mut body, *lp_id);
            put_u32(&mut body, *sent_count);
        }
        Message::Migrate { step, entity_blob } => {
            put_u64(&mut body, *step);
            put_u32(&mut body, entity_blob.len() as u32);
            body.extend_from_slice(entity_blob);
        }
        Message::MigrateNotice { step, entity_id, new_lp } => {
            put_u64(&mut body, *step);
            put_u32(&mut body, *entity_id);
            put_u32(&mut body, *new_lp);
        }
        Message::Ack { cumulative_seq } => put_u32(&mut body, *cumulative_seq),
    }

    if body.len() > MAX_BODY_LEN as usize {
        return Err(WireError::BodyTooLarge(body.len() as u32));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(msg.msg_type());
    put_u32(&mut frame, body.len() as u32);
    frame.extend_from_slice(&body);
    Ok(frame)
}

// -- body readers ------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    msg: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], msg: &'static str) -> Self {
        Self { buf, pos: 0, msg }
    }

    fn short(&self, what: &str) -> WireError {
        WireError::MalformedBody { msg: self.msg, detail: format!("truncated {what}") }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(self.short(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, WireError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn endpoint(&mut self) -> Result<Endpoint, WireError> {
        let scheme = Scheme::from_code(self.u8("endpoint scheme")?).ok_or_else(|| {
            WireError::MalformedBody { msg: self.msg, detail: "bad scheme code".into() }
        })?;
        let host_len = self.u8("endpoint host length")? as usize;
        let host = std::str::from_utf8(self.take(host_len, "endpoint host")?)
            .map_err(|_| WireError::MalformedBody {
                msg: self.msg,
                detail: "host is not UTF-8".into(),
            })?
            .to_string();
        let port = self.u16("endpoint port")?;
        Endpoint::new(scheme, host, port).map_err(|e| WireError::MalformedBody {
            msg: self.msg,
            detail: e.to_string(),
        })
    }

    fn list_len(&mut self) -> Result<usize, WireError> {
        let n = self.u32("list length")? as usize;
        if n > MAX_LIST_LEN {
            return Err(WireError::ListTooLong(n));
        }
        Ok(n)
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::MalformedBody {
                msg: self.msg,
                detail: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn decode_body(msg_type: u8, body: &[u8]) -> Result<Message, WireError> {
    let msg = match msg_type {
        0x01 => {
            let mut r = Reader::new(body, "Register");
            let listen_endpoint = r.endpoint()?;
            r.finish()?;
            Message::Register { listen_endpoint }
        }
        0x02 => {
            let mut r = Reader::new(body, "RegisterAck");
            let lp_id = r.u32("lp_id")?;
            let total_lps = r.u32("total_lps")?;
            r.finish()?;
            Message::RegisterAck { lp_id, total_lps }
        }
        0x03 => {
            let mut r = Reader::new(body, "Roster");
            let n = r.list_len()?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let lp_id = r.u32("entry lp_id")?;
                let endpoint = r.endpoint()?;
                entries.push(LpIdentity { lp_id, endpoint });
            }
            r.finish()?;
            Message::Roster { entries }
        }
        0x04 => {
            let mut r = Reader::new(body, "Hello");
            let lp_id = r.u32("lp_id")?;
            r.finish()?;
            Message::Hello { lp_id }
        }
        0x05 => {
            let mut r = Reader::new(body, "PositionDigest");
            let step = r.u64("step")?;
            let n = r.list_len()?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u32("entity_id")?;
                let x = r.f64("x")?;
                let y = r.f64("y")?;
                entries.push((id, x, y));
            }
            r.finish()?;
            Message::PositionDigest { step, entries }
        }
        0x06 => {
            let mut r = Reader::new(body, "PingBatch");
            let step = r.u64("step")?;
            let n = r.list_len()?;
            let mut pairs = Vec::with_capacity(n);
            for _ in 0..n {
                let src = r.u32("src")?;
                let dst = r.u32("dst")?;
                pairs.push((src, dst));
            }
            r.finish()?;
            Message::PingBatch { step, pairs }
        }
        0x07 => {
            let mut r = Reader::new(body, "StepEnd");
            let step = r.u64("step")?;
            let lp_id = r.u32("lp_id")?;
            let sent_count = r.u32("sent_count")?;
            r.finish()?;
            Message::StepEnd { step, lp_id, sent_count }
        }
        0x08 => {
            let mut r = Reader::new(body, "Migrate");
            let step = r.u64("step")?;
            let len = r.u32("blob length")? as usize;
            let entity_blob = r.take(len, "entity blob")?.to_vec();
            r.finish()?;
            Message::Migrate { step, entity_blob }
        }
        0x09 => {
            let mut r = Reader::new(body, "MigrateNotice");
            let step = r.u64("step")?;
            let entity_id = r.u32("entity_id")?;
            let new_lp = r.u32("new_lp")?;
            r.finish()?;
            Message::MigrateNotice { step, entity_id, new_lp }
        }
        0x0A => {
            let mut r = Reader::new(body, "Ack");
            let cumulative_seq = r.u32("cumulative_seq")?;
            r.finish()?;
            Message::Ack { cumulative_seq }
        }
        other => return Err(WireError::UnknownMsgType(other)),
    };
    Ok(msg)
}

/// Decode one frame from the front of `bytes`. Returns `NeedMoreBytes` when
/// fewer than 8 header bytes or fewer than body_len body bytes are available.
pub fn decode_frame(bytes: &[u8]) -> Result<DecodeOutcome, WireError> {
    if bytes.len() < HEADER_LEN {
        return Ok(DecodeOutcome::NeedMoreBytes);
    }
    if bytes[0..2] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if bytes[2] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[2]));
    }
    let msg_type = bytes[3];
    let body_len = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(WireError::BodyTooLarge(body_len));
    }
    let total = HEADER_LEN + body_len as usize;
    if bytes.len() < total {
        return Ok(DecodeOutcome::NeedMoreBytes);
    }
    let message = decode_body(msg_type, &bytes[HEADER_LEN..total])?;
    Ok(DecodeOutcome::Complete { message, consumed: total })
}

/// Incremental decoder over an arbitrary byte stream. Feeding chunks in any
/// split yields the same message sequence as decoding the whole buffer.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) {
        self.buf.extend_from_slice(chunk);
    }

    /// Pop the next complete message, if any.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        match decode_frame(&self.buf)? {
            DecodeOutcome::Complete { message, consumed } => {
                self.buf.drain(..consumed);
                Ok(Some(message))
            }
            DecodeOutcome::NeedMoreBytes => Ok(None),
        }
    }

    pub fn pending_bytes(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn step_end_layout_is_bit_exact() {
        let frame = encode_frame(&Message::StepEnd { step: 1, lp_id: 2, sent_count: 3 }).unwrap();
        assert_eq!(
            hex(&frame),
            "A5 51 01 07 00 00 00 10 00 00 00 00 00 00 00 01 00 00 00 02 00 00 00 03"
        );
    }

    #[test]
    fn ack_layout_is_bit_exact() {
        let frame = encode_frame(&Message::Ack { cumulative_seq: 0 }).unwrap();
        assert_eq!(hex(&frame), "A5 51 01 0A 00 00 00 04 00 00 00 00");
    }

    #[test]
    fn empty_roster_body_is_a_zero_count() {
        let frame = encode_frame(&Message::Roster { entries: vec![] }).unwrap();
        assert_eq!(frame.len(), HEADER_LEN + 4);
        assert_eq!(&frame[4..8], &4u32.to_be_bytes());
        assert_eq!(&frame[8..12], &[0, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = decode_frame(&[0xFF; 12]).unwrap_err();
        assert_eq!(err, WireError::BadMagic);
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut frame = encode_frame(&Message::Hello { lp_id: 0 }).unwrap();
        frame[2] = 0x02;
        assert_eq!(decode_frame(&frame).unwrap_err(), WireError::UnsupportedVersion(0x02));
    }

    #[test]
    fn unknown_msg_type_is_rejected() {
        let mut frame = encode_frame(&Message::Hello { lp_id: 0 }).unwrap();
        frame[3] = 0x7F;
        assert_eq!(decode_frame(&frame).unwrap_err(), WireError::UnknownMsgType(0x7F));
    }

    #[test]
    fn oversized_body_len_is_rejected() {
        let mut frame = encode_frame(&Message::Hello { lp_id: 0 }).unwrap();
        frame[4..8].copy_from_slice(&(MAX_BODY_LEN + 1).to_be_bytes());
        assert_eq!(decode_frame(&frame).unwrap_err(), WireError::BodyTooLarge(MAX_BODY_LEN + 1));
    }

    #[test]
    fn truncated_header_needs_more_bytes() {
        let frame = encode_frame(&Message::StepEnd { step: 9, lp_id: 0, sent_count: 1 }).unwrap();
        assert_eq!(decode_frame(&frame[..7]).unwrap(), DecodeOutcome::NeedMoreBytes);
        assert_eq!(decode_frame(&frame[..frame.len() - 1]).unwrap(), DecodeOutcome::NeedMoreBytes);
    }

    #[test]
    fn trailing_body_bytes_are_rejected() {
        // A Hello body with an extra byte: body_len=5 but Hello only needs 4.
        let mut frame = vec![0xA5, 0x51, 0x01, 0x04, 0, 0, 0, 5];
        frame.extend_from_slice(&[0, 0, 0, 7, 0xEE]);
        assert!(matches!(
            decode_frame(&frame).unwrap_err(),
            WireError::MalformedBody { msg: "Hello", .. }
        ));
    }

    #[test]
    fn oversized_list_fails_to_encode() {
        let pairs = vec![(0u32, 0u32); MAX_LIST_LEN + 1];
        let err = encode_frame(&Message::PingBatch { step: 0, pairs }).unwrap_err();
        assert_eq!(err, WireError::ListTooLong(MAX_LIST_LEN + 1));
    }

    #[test]
    fn endpoint_parse_round_trip() {
        for s in ["direct://127.0.0.1:9000", "socks://abcdefghijklmnop.onion:9001", "emu://anon:lp3:1"] {
            let ep = Endpoint::parse(s).unwrap();
            assert_eq!(ep.to_string(), s);
        }
        assert!(Endpoint::parse("direct://nohost").is_err());
        assert!(Endpoint::parse("bogus://h:1").is_err());
        assert!(Endpoint::parse("direct://h:0").is_err());
    }

    #[test]
    fn concatenated_frames_stream_decode() {
        let msgs = vec![
            Message::Hello { lp_id: 1 },
            Message::StepEnd { step: 3, lp_id: 1, sent_count: 0 },
            Message::Ack { cumulative_seq: 17 },
        ];
        let mut wire = Vec::new();
        for m in &msgs {
            wire.extend_from_slice(&encode_frame(m).unwrap());
        }
        let mut fb = FrameBuffer::new();
        // Push one byte at a time: worst-case chunking.
        let mut out = Vec::new();
        for b in wire {
            fb.push(&[b]);
            while let Some(m) = fb.next_message().unwrap() {
                out.push(m);
            }
        }
        assert_eq!(out, msgs);
        assert_eq!(fb.pending_bytes(), 0);
    }
}
