//! Allowlist decisions on the effective client address.

use std::net::IpAddr;

use axum::http::{HeaderMap, HeaderValue};
use ehr_gateway::gateway::{effective_client_ip, is_loopback_origin, security_gate, FORWARDED_FOR};

fn main() {
    let allowed: Vec<IpAddr> = vec!["10.20.0.5".parse().unwrap(), "127.0.0.1".parse().unwrap()];
    let cases: [(&str, Option<&str>); 5] = [
        ("10.20.0.5", None),
        ("10.20.0.6", None),
        ("127.0.0.1", Some("10.20.0.5, 192.168.1.1")),
        ("127.0.0.1", Some("192.168.1.1")),
        ("127.0.0.1", Some("not-an-address")),
    ];
    for (peer, forwarded) in cases {
        let peer: IpAddr = peer.parse().unwrap();
        let mut headers = HeaderMap::new();
        if let Some(v) = forwarded {
            headers.insert(FORWARDED_FOR, HeaderValue::from_static(v));
        }
        println!(
            "peer {peer:<10} forwarded {:<26} effective {:<15} -> {:?}  admin: {}",
            forwarded.unwrap_or("-"),
            effective_client_ip(peer, &headers).map_or("?".into(), |ip| ip.to_string()),
            security_gate(peer, &headers, &allowed),
            is_loopback_origin(peer, &headers),
        );
    }
}
