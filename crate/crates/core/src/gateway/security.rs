use std::net::IpAddr;

use axum::http::HeaderMap;

pub const FORWARDED_FOR: &str = "x-forwarded-for";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Allow,
    Deny403,
}

/// The client address the gate judges: the first `X-Forwarded-For` entry
/// when the header is present, else the transport peer. `None` when the
/// header is present but unusable.
pub fn effective_client_ip(peer: IpAddr, headers: &HeaderMap) -> Option<IpAddr> {
    let Some(value) = headers.get(FORWARDED_FOR) else {
        return Some(peer);
    };
    let first = value.to_str().ok()?.split(',').next()?.trim();
    first.parse::<IpAddr>().ok()
}

/// Allowlist check on the effective client IP. Malformed forwarding headers
/// are denied.
pub fn security_gate(peer: IpAddr, headers: &HeaderMap, allowed_ips: &[IpAddr]) -> GateDecision {
    match effective_client_ip(peer, headers) {
        Some(ip) if allowed_ips.contains(&ip) => GateDecision::Allow,
        _ => GateDecision::Deny403,
    }
}

/// Admin calls must come from loopback, and so must any forwarded origin.
pub fn is_loopback_origin(peer: IpAddr, headers: &HeaderMap) -> bool {
    peer.is_loopback() && effective_client_ip(peer, headers).is_some_and(|ip| ip.is_loopback())
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::http::HeaderValue;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn forwarded(v: &str) -> HeaderMap {
        let mut h = HeaderMap::new();
        h.insert(FORWARDED_FOR, HeaderValue::from_str(v).unwrap());
        h
    }

    #[test]
    fn peer_used_without_header() {
        let allowed = [ip("10.1.2.3")];
        assert_eq!(security_gate(ip("10.1.2.3"), &HeaderMap::new(), &allowed), GateDecision::Allow);
        assert_eq!(security_gate(ip("10.1.2.4"), &HeaderMap::new(), &allowed), GateDecision::Deny403);
    }

    #[test]
    fn first_forwarded_entry_wins() {
        let allowed = [ip("10.1.2.3")];
        let peer = ip("127.0.0.1");
        assert_eq!(security_gate(peer, &forwarded("10.1.2.3, 192.168.0.1"), &allowed), GateDecision::Allow);
        assert_eq!(security_gate(peer, &forwarded("192.168.0.1, 10.1.2.3"), &allowed), GateDecision::Deny403);
        // an allowed peer does not rescue an unlisted forwarded client
        let allowed = [ip("127.0.0.1")];
        assert_eq!(security_gate(peer, &forwarded("8.8.8.8"), &allowed), GateDecision::Deny403);
    }

    #[test]
    fn malformed_header_fails_closed() {
        let allowed = [ip("127.0.0.1")];
        for bad in ["not-an-ip", "", " , ", "127.0.0.1:8080"] {
            assert_eq!(security_gate(ip("127.0.0.1"), &forwarded(bad), &allowed), GateDecision::Deny403, "{bad}");
        }
    }

    #[test]
    fn ipv6_forwarded() {
        let allowed = [ip("2001:db8::1")];
        assert_eq!(security_gate(ip("::1"), &forwarded("2001:db8::1"), &allowed), GateDecision::Allow);
    }

    #[test]
    fn admin_origin() {
        assert!(is_loopback_origin(ip("127.0.0.1"), &HeaderMap::new()));
        assert!(is_loopback_origin(ip("::1"), &forwarded("127.0.0.1")));
        assert!(!is_loopback_origin(ip("127.0.0.1"), &forwarded("10.1.2.3")));
        assert!(!is_loopback_origin(ip("10.1.2.3"), &HeaderMap::new()));
    }
}
