//! Minimal SIP-over-UDP codec.
//!
//! Only the headers needed to derive pinhole keys and drive the UA and proxy
//! models are interpreted: Via, Call-ID, From, To, CSeq (plus Contact,
//! Max-Forwards and Content-Length, which are accepted but never required).
//! Header names are case-insensitive and the compact forms `i`, `v`, `f`,
//! `t`, `m` and `l` are recognised. Lines must end in CRLF, a bare LF is
//! tolerated.

use std::fmt;
use std::net::Ipv4Addr;
use std::num::NonZeroU16;
use std::str::FromStr;

use thiserror::Error;

/// Default substrings that mark a request URI as an emergency request.
pub const DEFAULT_EMERGENCY_MARKERS: [&str; 3] = ["urn:service:sos", "sos@", ";sos"];

/// UDP transport address of a SIP element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: NonZeroU16,
}

impl Endpoint {
    /// Returns `None` for port 0.
    pub fn new(ip: Ipv4Addr, port: u16) -> Option<Self> {
        NonZeroU16::new(port).map(|port| Self { ip, port })
    }

    /// Endpoint on the default SIP port 5060.
    pub fn sip(ip: Ipv4Addr) -> Self {
        Self {
            ip,
            port: NonZeroU16::new(5060).unwrap(),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Request,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Register,
    Invite,
    Ack,
    Bye,
    Cancel,
    Other(String),
}

impl Method {
    pub fn as_str(&self) -> &str {
        match self {
            Method::Register => "REGISTER",
            Method::Invite => "INVITE",
            Method::Ack => "ACK",
            Method::Bye => "BYE",
            Method::Cancel => "CANCEL",
            Method::Other(token) => token,
        }
    }

    fn parse_token(token: &str) -> Option<Self> {
        if token.is_empty() || !token.bytes().all(is_token_byte) {
            return None;
        }
        Some(match token {
            "REGISTER" => Method::Register,
            "INVITE" => Method::Invite,
            "ACK" => Method::Ack,
            "BYE" => Method::Bye,
            "CANCEL" => Method::Cancel,
            other => Method::Other(other.to_string()),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::parse_token(s).ok_or(ParseError::NotSip)
    }
}

/// A parsed SIP datagram.
///
/// For responses `method` mirrors the CSeq method and `request_uri` is
/// `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipMessage {
    pub kind: MessageKind,
    pub method: Method,
    pub status_code: Option<u16>,
    pub call_id: String,
    pub via_branch: String,
    pub from_tag: String,
    pub to_tag: Option<String>,
    pub cseq_number: u32,
    pub cseq_method: Method,
    pub request_uri: Option<String>,
    pub is_emergency: bool,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub length_bytes: usize,
}

impl SipMessage {
    pub fn is_request(&self) -> bool {
        self.kind == MessageKind::Request
    }

    /// Builds a response to `request` travelling back towards its sender.
    pub fn response_to(request: &SipMessage, status_code: u16, to_tag: Option<String>) -> Self {
        let mut rsp = Self {
            kind: MessageKind::Response,
            method: request.cseq_method.clone(),
            status_code: Some(status_code),
            call_id: request.call_id.clone(),
            via_branch: request.via_branch.clone(),
            from_tag: request.from_tag.clone(),
            to_tag,
            cseq_number: request.cseq_number,
            cseq_method: request.cseq_method.clone(),
            request_uri: None,
            is_emergency: false,
            src: request.dst,
            dst: request.src,
            length_bytes: 0,
        };
        rsp.length_bytes = render_datagram(&rsp).len();
        rsp
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("not a SIP message")]
    NotSip,
    #[error("missing required header {0}")]
    MissingHeader(&'static str),
    #[error("malformed header {0}")]
    MalformedHeader(&'static str),
    #[error("datagram truncated")]
    Truncated,
}

/// Configurable list of emergency markers searched for in request URIs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmergencyMarkers(Vec<String>);

impl EmergencyMarkers {
    pub fn new<I, S>(markers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(markers.into_iter().map(Into::into).collect())
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

impl Default for EmergencyMarkers {
    fn default() -> Self {
        Self::new(DEFAULT_EMERGENCY_MARKERS)
    }
}

/// True iff `request_uri` contains any of the configured markers.
pub fn detect_emergency(request_uri: &str, markers: &EmergencyMarkers) -> bool {
    markers.0.iter().any(|m| request_uri.contains(m.as_str()))
}

/// Parser carrying the emergency-marker configuration.
#[derive(Debug, Clone, Default)]
pub struct SipParser {
    markers: EmergencyMarkers,
}

impl SipParser {
    pub fn new(markers: EmergencyMarkers) -> Self {
        Self { markers }
    }

    pub fn markers(&self) -> &EmergencyMarkers {
        &self.markers
    }

    pub fn parse(
        &self,
        payload: &[u8],
        src: Endpoint,
        dst: Endpoint,
    ) -> Result<SipMessage, ParseError> {
        let text = std::str::from_utf8(payload).map_err(|_| ParseError::NotSip)?;

        let (head, body) = split_head(text);
        let mut lines = head.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
        let start_line = lines.next().unwrap_or_default();
        let start = parse_start_line(start_line)?;
        // A SIP datagram needs its blank line, even with no body.
        let body = body.ok_or(ParseError::Truncated)?;

        let mut headers = Headers::default();
        for line in lines {
            if line.starts_with([' ', '\t']) {
                headers.fold(line.trim());
                continue;
            }
            let (name, value) = line.split_once(':').ok_or(ParseError::NotSip)?;
            headers.push(name.trim(), value.trim());
        }

        let via = headers.via.ok_or(ParseError::MissingHeader("Via"))?;
        let call_id = headers
            .call_id
            .ok_or(ParseError::MissingHeader("Call-ID"))?;
        let from = headers.from.ok_or(ParseError::MissingHeader("From"))?;
        let cseq = headers.cseq.ok_or(ParseError::MissingHeader("CSeq"))?;

        if call_id.is_empty() {
            return Err(ParseError::MalformedHeader("Call-ID"));
        }
        let top_via = via.split(',').next().unwrap_or_default();
        let via_branch = header_param(top_via, "branch", false)
            .filter(|b| !b.is_empty())
            .ok_or(ParseError::MalformedHeader("Via"))?;
        let from_tag = header_param(&from, "tag", true)
            .filter(|t| !t.is_empty())
            .ok_or(ParseError::MalformedHeader("From"))?;
        let to_tag = headers
            .to
            .as_deref()
            .and_then(|to| header_param(to, "tag", true))
            .filter(|t| !t.is_empty());

        let mut cseq_parts = cseq.split_whitespace();
        let cseq_number = cseq_parts
            .next()
            .and_then(|n| n.parse::<u32>().ok())
            .ok_or(ParseError::MalformedHeader("CSeq"))?;
        let cseq_method = cseq_parts
            .next()
            .and_then(Method::parse_token)
            .ok_or(ParseError::MalformedHeader("CSeq"))?;
        if cseq_parts.next().is_some() {
            return Err(ParseError::MalformedHeader("CSeq"));
        }

        if let Some(declared) = headers.content_length {
            let declared: usize = declared
                .parse()
                .map_err(|_| ParseError::MalformedHeader("Content-Length"))?;
            if body.len() < declared {
                return Err(ParseError::Truncated);
            }
        }

        let msg = match start {
            StartLine::Request { method, uri } => {
                if cseq_method != method {
                    return Err(ParseError::MalformedHeader("CSeq"));
                }
                SipMessage {
                    kind: MessageKind::Request,
                    is_emergency: detect_emergency(&uri, &self.markers),
                    method,
                    status_code: None,
                    request_uri: Some(uri),
                    call_id,
                    via_branch,
                    from_tag,
                    to_tag,
                    cseq_number,
                    cseq_method,
                    src,
                    dst,
                    length_bytes: payload.len(),
                }
            }
            StartLine::Status { code } => SipMessage {
                kind: MessageKind::Response,
                method: cseq_method.clone(),
                status_code: Some(code),
                request_uri: None,
                is_emergency: false,
                call_id,
                via_branch,
                from_tag,
                to_tag,
                cseq_number,
                cseq_method,
                src,
                dst,
                length_bytes: payload.len(),
            },
        };
        Ok(msg)
    }
}

/// Parses one UDP payload with the default emergency markers.
pub fn parse_datagram(
    payload: &[u8],
    src: Endpoint,
    dst: Endpoint,
) -> Result<SipMessage, ParseError> {
    SipParser::default().parse(payload, src, dst)
}

/// Renders `msg` as a SIP/2.0 datagram without a body.
pub fn render_datagram(msg: &SipMessage) -> Vec<u8> {
    use std::fmt::Write;

    let mut out = String::with_capacity(384);
    // The Via sent-by is the request originator: the sender of a request,
    // the receiver of a response.
    let (origin, target) = match msg.kind {
        MessageKind::Request => (msg.src, msg.dst),
        MessageKind::Response => (msg.dst, msg.src),
    };
    match msg.kind {
        MessageKind::Request => {
            let uri = msg.request_uri.as_deref().unwrap_or("sip:invalid");
            let _ = write!(out, "{} {} SIP/2.0\r\n", msg.method, uri);
        }
        MessageKind::Response => {
            let code = msg.status_code.unwrap_or(500);
            let _ = write!(out, "SIP/2.0 {} {}\r\n", code, reason_phrase(code));
        }
    }
    let _ = write!(
        out,
        "Via: SIP/2.0/UDP {origin};branch={}\r\n",
        msg.via_branch
    );
    if msg.kind == MessageKind::Request {
        out.push_str("Max-Forwards: 70\r\n");
    }
    let _ = write!(out, "From: <sip:ua@{}>;tag={}\r\n", origin.ip, msg.from_tag);
    let to_uri = match &msg.request_uri {
        Some(uri) => uri.clone(),
        None => format!("sip:{}", target.ip),
    };
    match &msg.to_tag {
        Some(tag) => {
            let _ = write!(out, "To: <{to_uri}>;tag={tag}\r\n");
        }
        None => {
            let _ = write!(out, "To: <{to_uri}>\r\n");
        }
    }
    let _ = write!(out, "Call-ID: {}\r\n", msg.call_id);
    let _ = write!(out, "CSeq: {} {}\r\n", msg.cseq_number, msg.cseq_method);
    if msg.kind == MessageKind::Request {
        let _ = write!(out, "Contact: <sip:ua@{origin}>\r\n");
    }
    out.push_str("Content-Length: 0\r\n\r\n");
    out.into_bytes()
}

fn reason_phrase(code: u16) -> &'static str {
    match code {
        100 => "Trying",
        180 => "Ringing",
        200 => "OK",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        408 => "Request Timeout",
        486 => "Busy Here",
        500 => "Server Internal Error",
        503 => "Service Unavailable",
        _ => match code / 100 {
            1 => "Provisional",
            2 => "Success",
            3 => "Redirection",
            4 => "Client Error",
            5 => "Server Error",
            _ => "Global Failure",
        },
    }
}

enum StartLine {
    Request { method: Method, uri: String },
    Status { code: u16 },
}

fn parse_start_line(line: &str) -> Result<StartLine, ParseError> {
    if let Some(rest) = line.strip_prefix("SIP/2.0 ") {
        let code = rest.split(' ').next().unwrap_or_default();
        if code.len() != 3 {
            return Err(ParseError::NotSip);
        }
        let code: u16 = code.parse().map_err(|_| ParseError::NotSip)?;
        if !(100..=699).contains(&code) {
            return Err(ParseError::NotSip);
        }
        return Ok(StartLine::Status { code });
    }
    let mut parts = line.split(' ');
    let (Some(method), Some(uri), Some("SIP/2.0"), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(ParseError::NotSip);
    };
    let method = Method::parse_token(method).ok_or(ParseError::NotSip)?;
    if uri.is_empty() {
        return Err(ParseError::NotSip);
    }
    Ok(StartLine::Request {
        method,
        uri: uri.to_string(),
    })
}

/// Splits at the first empty line. The second half is `None` when the
/// header section never terminates.
fn split_head(text: &str) -> (&str, Option<&str>) {
    let crlf = text.find("\r\n\r\n").map(|i| (i, 4));
    let lf = text.find("\n\n").map(|i| (i, 2));
    let end = match (crlf, lf) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
        (a, b) => a.or(b),
    };
    match end {
        Some((i, sep)) => (&text[..i], Some(&text[i + sep..])),
        None => (text.trim_end_matches(['\r', '\n']), None),
    }
}

#[derive(Default)]
struct Headers {
    via: Option<String>,
    call_id: Option<String>,
    from: Option<String>,
    to: Option<String>,
    cseq: Option<String>,
    content_length: Option<String>,
    last: Option<Slot>,
}

#[derive(Clone, Copy)]
enum Slot {
    Via,
    CallId,
    From,
    To,
    CSeq,
    Other,
}

impl Headers {
    fn push(&mut self, name: &str, value: &str) {
        let slot = match name.to_ascii_lowercase().as_str() {
            "via" | "v" => Slot::Via,
            "call-id" | "i" => Slot::CallId,
            "from" | "f" => Slot::From,
            "to" | "t" => Slot::To,
            "cseq" => Slot::CSeq,
            "content-length" | "l" => {
                self.content_length.get_or_insert_with(|| value.to_string());
                Slot::Other
            }
            _ => Slot::Other,
        };
        // Only the first occurrence counts; later Via headers belong to
        // downstream hops.
        let target = match slot {
            Slot::Via => &mut self.via,
            Slot::CallId => &mut self.call_id,
            Slot::From => &mut self.from,
            Slot::To => &mut self.to,
            Slot::CSeq => &mut self.cseq,
            Slot::Other => {
                self.last = Some(Slot::Other);
                return;
            }
        };
        if target.is_none() {
            *target = Some(value.to_string());
            self.last = Some(slot);
        } else {
            self.last = Some(Slot::Other);
        }
    }

    fn fold(&mut self, continuation: &str) {
        let target = match self.last {
            Some(Slot::Via) => &mut self.via,
            Some(Slot::CallId) => &mut self.call_id,
            Some(Slot::From) => &mut self.from,
            Some(Slot::To) => &mut self.to,
            Some(Slot::CSeq) => &mut self.cseq,
            _ => return,
        };
        if let Some(v) = target {
            v.push(' ');
            v.push_str(continuation);
        }
    }
}

/// Looks up a `;name=value` header parameter. Name-addr values keep their
/// parameters after the closing `>`.
fn header_param(value: &str, name: &str, name_addr: bool) -> Option<String> {
    let params = if name_addr {
        match value.rfind('>') {
            Some(i) => &value[i + 1..],
            None => value.split_once(';').map_or("", |(_, p)| p),
        }
    } else {
        value.split_once(';').map_or("", |(_, p)| p)
    };
    params.split(';').find_map(|p| {
        let (k, v) = p.split_once('=')?;
        k.trim()
            .eq_ignore_ascii_case(name)
            .then(|| v.trim().to_string())
    })
}

fn is_token_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"-.!%*_+`'~".contains(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ua() -> Endpoint {
        Endpoint::sip(Ipv4Addr::new(10, 0, 0, 5))
    }

    fn proxy() -> Endpoint {
        Endpoint::sip(Ipv4Addr::new(172, 16, 0, 1))
    }

    const MINIMAL_INVITE: &str = "INVITE sip:bob@example.org SIP/2.0\r\n\
        Via: SIP/2.0/UDP 10.0.0.5:5060;branch=z9hG4bKabc\r\n\
        Call-ID: c1@10.0.0.5\r\n\
        From: <sip:alice@example.org>;tag=1\r\n\
        CSeq: 1 INVITE\r\n\
        \r\n";

    #[test]
    fn minimal_invite() {
        let msg = parse_datagram(MINIMAL_INVITE.as_bytes(), ua(), proxy()).unwrap();
        assert_eq!(msg.kind, MessageKind::Request);
        assert_eq!(msg.method, Method::Invite);
        assert_eq!(msg.via_branch, "z9hG4bKabc");
        assert_eq!(msg.call_id, "c1@10.0.0.5");
        assert_eq!(msg.from_tag, "1");
        assert_eq!(msg.to_tag, None);
        assert_eq!(msg.cseq_number, 1);
        assert_eq!(msg.cseq_method, Method::Invite);
        assert_eq!(msg.request_uri.as_deref(), Some("sip:bob@example.org"));
        assert!(!msg.is_emergency);
        assert_eq!(msg.length_bytes, MINIMAL_INVITE.len());
    }

    #[test]
    fn sos_uri_is_emergency() {
        let raw = MINIMAL_INVITE.replace("sip:bob@example.org", "urn:service:sos");
        let msg = parse_datagram(raw.as_bytes(), ua(), proxy()).unwrap();
        assert!(msg.is_emergency);
    }

    #[test]
    fn http_is_not_sip() {
        let raw = b"GET / HTTP/1.1\r\nHost: example.org\r\n\r\n";
        assert_eq!(parse_datagram(raw, ua(), proxy()), Err(ParseError::NotSip));
    }

    #[test]
    fn compact_and_lowercase_headers() {
        let raw = "REGISTER sip:ims.example SIP/2.0\n\
            v: SIP/2.0/UDP 10.0.0.5;BRANCH=z9hG4bK1, SIP/2.0/UDP 10.9.9.9;branch=z9hG4bKlower\n\
            i: reg-1\n\
            f: \"Alice\" <sip:alice@ims.example;transport=udp>;tag=77\n\
            t: <sip:alice@ims.example>\n\
            cseq: 2 REGISTER\n\
            X-Unknown: whatever\n\
            \n";
        let msg = parse_datagram(raw.as_bytes(), ua(), proxy()).unwrap();
        assert_eq!(msg.method, Method::Register);
        assert_eq!(msg.via_branch, "z9hG4bK1");
        assert_eq!(msg.call_id, "reg-1");
        assert_eq!(msg.from_tag, "77");
        assert_eq!(msg.cseq_number, 2);
    }

    #[test]
    fn topmost_via_wins() {
        let raw = MINIMAL_INVITE.replace(
            "CSeq: 1 INVITE\r\n",
            "CSeq: 1 INVITE\r\nVia: SIP/2.0/UDP 1.2.3.4;branch=z9hG4bKdeeper\r\n",
        );
        let msg = parse_datagram(raw.as_bytes(), ua(), proxy()).unwrap();
        assert_eq!(msg.via_branch, "z9hG4bKabc");
    }

    #[test]
    fn missing_headers() {
        for (line, name) in [
            (
                "Via: SIP/2.0/UDP 10.0.0.5:5060;branch=z9hG4bKabc\r\n",
                "Via",
            ),
            ("Call-ID: c1@10.0.0.5\r\n", "Call-ID"),
            ("From: <sip:alice@example.org>;tag=1\r\n", "From"),
            ("CSeq: 1 INVITE\r\n", "CSeq"),
        ] {
            let raw = MINIMAL_INVITE.replace(line, "");
            assert_eq!(
                parse_datagram(raw.as_bytes(), ua(), proxy()),
                Err(ParseError::MissingHeader(name))
            );
        }
    }

    #[test]
    fn malformed_headers() {
        let no_branch = MINIMAL_INVITE.replace(";branch=z9hG4bKabc", "");
        assert_eq!(
            parse_datagram(no_branch.as_bytes(), ua(), proxy()),
            Err(ParseError::MalformedHeader("Via"))
        );
        let bad_cseq = MINIMAL_INVITE.replace("CSeq: 1 INVITE", "CSeq: INVITE");
        assert_eq!(
            parse_datagram(bad_cseq.as_bytes(), ua(), proxy()),
            Err(ParseError::MalformedHeader("CSeq"))
        );
        let mismatched = MINIMAL_INVITE.replace("CSeq: 1 INVITE", "CSeq: 1 BYE");
        assert_eq!(
            parse_datagram(mismatched.as_bytes(), ua(), proxy()),
            Err(ParseError::MalformedHeader("CSeq"))
        );
        let no_tag = MINIMAL_INVITE.replace(";tag=1", "");
        assert_eq!(
            parse_datagram(no_tag.as_bytes(), ua(), proxy()),
            Err(ParseError::MalformedHeader("From"))
        );
    }

    #[test]
    fn truncated() {
        let cut = &MINIMAL_INVITE[..MINIMAL_INVITE.len() - 2];
        assert_eq!(
            parse_datagram(cut.as_bytes(), ua(), proxy()),
            Err(ParseError::Truncated)
        );
        let short_body =
            MINIMAL_INVITE.replace("CSeq: 1 INVITE\r\n", "CSeq: 1 INVITE\r\nl: 10\r\n");
        assert_eq!(
            parse_datagram(short_body.as_bytes(), ua(), proxy()),
            Err(ParseError::Truncated)
        );
    }

    #[test]
    fn status_code_range() {
        let rsp = "SIP/2.0 700 Nope\r\nVia: SIP/2.0/UDP a;branch=b\r\ni: x\r\nf: <sip:a>;tag=1\r\nCSeq: 1 INVITE\r\n\r\n";
        assert_eq!(
            parse_datagram(rsp.as_bytes(), ua(), proxy()),
            Err(ParseError::NotSip)
        );
    }

    #[test]
    fn render_register_cseq_line() {
        let mut msg = parse_datagram(MINIMAL_INVITE.as_bytes(), ua(), proxy()).unwrap();
        msg.method = Method::Register;
        msg.cseq_method = Method::Register;
        msg.cseq_number = 2;
        let text = String::from_utf8(render_datagram(&msg)).unwrap();
        assert!(text.lines().any(|l| l == "CSeq: 2 REGISTER"));
        assert!(text.starts_with("REGISTER sip:bob@example.org SIP/2.0\r\n"));
    }

    #[test]
    fn render_response_status_line() {
        let req = parse_datagram(MINIMAL_INVITE.as_bytes(), ua(), proxy()).unwrap();
        let rsp = SipMessage::response_to(&req, 200, Some("srv".into()));
        let bytes = render_datagram(&rsp);
        assert!(bytes.starts_with(b"SIP/2.0 200 "));
        let back = parse_datagram(&bytes, rsp.src, rsp.dst).unwrap();
        assert_eq!(back, rsp);
    }

    #[test]
    fn emergency_markers() {
        let markers = EmergencyMarkers::default();
        assert!(detect_emergency("urn:service:sos", &markers));
        assert!(!detect_emergency("sip:alice@example.org", &markers));
        assert!(detect_emergency("sip:112@example.org;sos", &markers));
        let custom = EmergencyMarkers::new(["tel:112"]);
        assert!(detect_emergency("tel:112", &custom));
        assert!(!detect_emergency("urn:service:sos", &custom));
    }
}
