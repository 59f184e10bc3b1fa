//! Minimal DNS wire format: A queries, and the responses the probe and the
//! emulator need (answers, NXDOMAIN, SERVFAIL, FORMERR).

use std::net::Ipv4Addr;

use thiserror::Error;

pub const TYPE_A: u16 = 1;
pub const CLASS_IN: u16 = 1;

const FLAG_QR: u16 = 0x8000;
const FLAG_AA: u16 = 0x0400;
const FLAG_RD: u16 = 0x0100;
const FLAG_RA: u16 = 0x0080;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rcode {
    NoError,
    FormErr,
    ServFail,
    NxDomain,
    Other(u8),
}

impl Rcode {
    fn from_bits(v: u8) -> Self {
        match v {
            0 => Rcode::NoError,
            1 => Rcode::FormErr,
            2 => Rcode::ServFail,
            3 => Rcode::NxDomain,
            o => Rcode::Other(o),
        }
    }

    fn bits(self) -> u16 {
        match self {
            Rcode::NoError => 0,
            Rcode::FormErr => 1,
            Rcode::ServFail => 2,
            Rcode::NxDomain => 3,
            Rcode::Other(o) => u16::from(o & 0x0f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("label too long")]
    LabelTooLong,
    #[error("name too long")]
    NameTooLong,
    #[error("compression pointer loop")]
    PointerLoop,
    #[error("unsupported label type")]
    BadLabel,
    #[error("not a query")]
    NotAQuery,
    #[error("expected exactly one question, got {0}")]
    QuestionCount(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: String,
    pub qtype: u16,
    pub qclass: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub rtype: u16,
    pub rclass: u16,
    pub ttl: u32,
    pub rdata: Vec<u8>,
}

impl Record {
    pub fn a(name: &str, addr: Ipv4Addr, ttl: u32) -> Self {
        Record {
            name: name.to_string(),
            rtype: TYPE_A,
            rclass: CLASS_IN,
            ttl,
            rdata: addr.octets().to_vec(),
        }
    }

    pub fn as_a(&self) -> Option<Ipv4Addr> {
        if self.rtype == TYPE_A && self.rclass == CLASS_IN && self.rdata.len() == 4 {
            Some(Ipv4Addr::new(self.rdata[0], self.rdata[1], self.rdata[2], self.rdata[3]))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub id: u16,
    pub flags: u16,
    pub questions: Vec<Question>,
    pub answers: Vec<Record>,
}

impl Message {
    pub fn query_a(id: u16, name: &str) -> Self {
        Message {
            id,
            flags: FLAG_RD,
            questions: vec![Question {
                name: name.to_string(),
                qtype: TYPE_A,
                qclass: CLASS_IN,
            }],
            answers: vec![],
        }
    }

    /// Response to `query` with the given code and answers.
    pub fn response_to(query: &Message, rcode: Rcode, answers: Vec<Record>, authoritative: bool) -> Self {
        let mut flags = FLAG_QR | FLAG_RA | (query.flags & FLAG_RD) | rcode.bits();
        if authoritative {
            flags |= FLAG_AA;
        }
        Message {
            id: query.id,
            flags,
            questions: query.questions.clone(),
            answers,
        }
    }

    /// FORMERR for a packet that could not be parsed; echoes the id if present.
    pub fn formerr(raw: &[u8]) -> Vec<u8> {
        let id = if raw.len() >= 2 { u16::from_be_bytes([raw[0], raw[1]]) } else { 0 };
        Message {
            id,
            flags: FLAG_QR | Rcode::FormErr.bits(),
            questions: vec![],
            answers: vec![],
        }
        .encode()
        .expect("empty message encodes")
    }

    pub fn is_response(&self) -> bool {
        self.flags & FLAG_QR != 0
    }

    pub fn rcode(&self) -> Rcode {
        Rcode::from_bits((self.flags & 0x000f) as u8)
    }

    pub fn a_records(&self) -> Vec<Ipv4Addr> {
        self.answers.iter().filter_map(Record::as_a).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(&self.id.to_be_bytes());
        out.extend_from_slice(&self.flags.to_be_bytes());
        out.extend_from_slice(&(self.questions.len() as u16).to_be_bytes());
        out.extend_from_slice(&(self.answers.len() as u16).to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        for q in &self.questions {
            encode_name(&q.name, &mut out)?;
            out.extend_from_slice(&q.qtype.to_be_bytes());
            out.extend_from_slice(&q.qclass.to_be_bytes());
        }
        for r in &self.answers {
            encode_name(&r.name, &mut out)?;
            out.extend_from_slice(&r.rtype.to_be_bytes());
            out.extend_from_slice(&r.rclass.to_be_bytes());
            out.extend_from_slice(&r.ttl.to_be_bytes());
            out.extend_from_slice(&(r.rdata.len() as u16).to_be_bytes());
            out.extend_from_slice(&r.rdata);
        }
        Ok(out)
    }

    /// Parses header, questions and the answer section. Authority and
    /// additional sections are ignored.
    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader { buf, pos: 0 };
        let id = r.u16()?;
        let flags = r.u16()?;
        let qd = r.u16()?;
        let an = r.u16()?;
        let _ns = r.u16()?;
        let _ar = r.u16()?;
        let mut questions = Vec::with_capacity(qd.min(8) as usize);
        for _ in 0..qd {
            let name = r.name()?;
            let qtype = r.u16()?;
            let qclass = r.u16()?;
            questions.push(Question { name, qtype, qclass });
        }
        let mut answers = Vec::with_capacity(an.min(32) as usize);
        for _ in 0..an {
            let name = r.name()?;
            let rtype = r.u16()?;
            let rclass = r.u16()?;
            let ttl = r.u32()?;
            let len = r.u16()? as usize;
            let rdata = r.take(len)?.to_vec();
            answers.push(Record { name, rtype, rclass, ttl, rdata });
        }
        Ok(Message { id, flags, questions, answers })
    }

    /// Decodes a packet that must be a single-question query.
    pub fn decode_query(buf: &[u8]) -> Result<Self, WireError> {
        let m = Message::decode(buf)?;
        if m.is_response() {
            return Err(WireError::NotAQuery);
        }
        if m.questions.len() != 1 {
            return Err(WireError::QuestionCount(m.questions.len() as u16));
        }
        Ok(m)
    }
}

fn encode_name(name: &str, out: &mut Vec<u8>) -> Result<(), WireError> {
    let name = name.strip_suffix('.').unwrap_or(name);
    let mut total = 1;
    if !name.is_empty() {
        for label in name.split('.') {
            if label.is_empty() || label.len() > 63 {
                return Err(WireError::LabelTooLong);
            }
            total += label.len() + 1;
            out.push(label.len() as u8);
            out.extend_from_slice(label.as_bytes());
        }
    }
    if total > 255 {
        return Err(WireError::NameTooLong);
    }
    out.push(0);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn name(&mut self) -> Result<String, WireError> {
        let mut labels: Vec<String> = Vec::new();
        let mut pos = self.pos;
        let mut jumped = false;
        let mut hops = 0;
        let mut len_total = 0usize;
        loop {
            let len = *self.buf.get(pos).ok_or(WireError::Truncated)?;
            match len & 0xc0 {
                0x00 => {
                    pos += 1;
                    if len == 0 {
                        break;
                    }
                    let label = self
                        .buf
                        .get(pos..pos + len as usize)
                        .ok_or(WireError::Truncated)?;
                    len_total += label.len() + 1;
                    if len_total > 255 {
                        return Err(WireError::NameTooLong);
                    }
                    labels.push(String::from_utf8_lossy(label).to_ascii_lowercase());
                    pos += len as usize;
                }
                0xc0 => {
                    let lo = *self.buf.get(pos + 1).ok_or(WireError::Truncated)?;
                    if !jumped {
                        self.pos = pos + 2;
                        jumped = true;
                    }
                    hops += 1;
                    if hops > 16 {
                        return Err(WireError::PointerLoop);
                    }
                    pos = (((len & 0x3f) as usize) << 8) | lo as usize;
                }
                _ => return Err(WireError::BadLabel),
            }
        }
        if !jumped {
            self.pos = pos;
        }
        Ok(labels.join("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn query_bytes_are_standard() {
        let q = Message::query_a(0xbeef, "youtube.com").encode().unwrap();
        let expected: Vec<u8> = [
            &[0xbe, 0xef, 0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0][..],
            &[7],
            b"youtube",
            &[3],
            b"com",
            &[0, 0, 1, 0, 1],
        ]
        .concat();
        assert_eq!(q, expected);
    }

    #[test]
    fn decodes_compressed_answer() {
        // Answer name is a pointer to the question name at offset 12.
        let mut pkt = Message::query_a(7, "a.example").encode().unwrap();
        pkt[2] = 0x81;
        pkt[3] = 0x80;
        pkt[7] = 1;
        pkt.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1, 0, 0, 0, 60, 0, 4, 10, 0, 0, 1]);
        let m = Message::decode(&pkt).unwrap();
        assert_eq!(m.answers[0].name, "a.example");
        assert_eq!(m.a_records(), vec![Ipv4Addr::new(10, 0, 0, 1)]);
        assert_eq!(m.rcode(), Rcode::NoError);
    }

    #[test]
    fn rejects_pointer_loop_and_truncation() {
        let mut pkt = vec![0, 1, 0x81, 0x80, 0, 1, 0, 0, 0, 0, 0, 0];
        pkt.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1]);
        assert_eq!(Message::decode(&pkt), Err(WireError::PointerLoop));
        assert_eq!(Message::decode(&[0, 1, 2]), Err(WireError::Truncated));
    }

    #[test]
    fn nxdomain_response_sets_rcode() {
        let q = Message::query_a(9, "blocked.test");
        let r = Message::response_to(&q, Rcode::NxDomain, vec![], false);
        let d = Message::decode(&r.encode().unwrap()).unwrap();
        assert!(d.is_response());
        assert_eq!(d.rcode(), Rcode::NxDomain);
        assert_eq!(d.id, 9);
        assert!(d.answers.is_empty());
    }

    #[test]
    fn formerr_echoes_id() {
        let bytes = Message::formerr(&[0x12, 0x34, 0xff]);
        let m = Message::decode(&bytes).unwrap();
        assert_eq!(m.id, 0x1234);
        assert_eq!(m.rcode(), Rcode::FormErr);
    }

    proptest! {
        #[test]
        fn message_round_trip(
            id in any::<u16>(),
            labels in prop::collection::vec("[a-z0-9-]{1,20}", 1..5),
            addrs in prop::collection::vec(any::<[u8; 4]>(), 0..4),
        ) {
            let name = labels.join(".");
            let q = Message::query_a(id, &name);
            let answers = addrs.iter().map(|a| Record::a(&name, Ipv4Addr::from(*a), 30)).collect();
            let r = Message::response_to(&q, Rcode::NoError, answers, true);
            let decoded = Message::decode(&r.encode().unwrap()).unwrap();
            prop_assert_eq!(&decoded, &r);
            prop_assert_eq!(decoded.a_records().len(), addrs.len());
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            let _ = Message::decode(&bytes);
        }
    }
}
