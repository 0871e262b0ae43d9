#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>

namespace tsor {

using NodeId = uint32_t;
using TenantId = uint32_t;
using MrId = uint32_t;
using ChannelKey = uint32_t;  // 0 is reserved for the control channel

enum class Errc : uint16_t {
    ok = 0,
    conn_refused = 1,
    permission_denied = 2,
    net_unreachable = 3,
    timeout = 4,
    addr_in_use = 5,
    connection_closed = 6,
    queue_full = 7,
    no_backends = 8,
    cidr_exhausted = 9,
    node_not_found = 10,
    protocol = 11,
    invalid_argument = 12,
};

inline const char* errc_name(Errc e) {
    switch (e) {
        case Errc::ok: return "ok";
        case Errc::conn_refused: return "conn_refused";
        case Errc::permission_denied: return "permission_denied";
        case Errc::net_unreachable: return "net_unreachable";
        case Errc::timeout: return "timeout";
        case Errc::addr_in_use: return "addr_in_use";
        case Errc::connection_closed: return "connection_closed";
        case Errc::queue_full: return "queue_full";
        case Errc::no_backends: return "no_backends";
        case Errc::cidr_exhausted: return "cidr_exhausted";
        case Errc::node_not_found: return "node_not_found";
        case Errc::protocol: return "protocol";
        case Errc::invalid_argument: return "invalid_argument";
    }
    return "unknown";
}

// (tenant, ip, port) triple; the tenant participates in every lookup.
struct Endpoint {
    TenantId tenant = 0;
    uint32_t ip = 0;  // IPv4, host byte order
    uint16_t port = 0;

    auto operator<=>(const Endpoint&) const = default;
};

inline std::string format_ip(uint32_t ip) {
    return std::to_string((ip >> 24) & 0xff) + '.' + std::to_string((ip >> 16) & 0xff) + '.' +
           std::to_string((ip >> 8) & 0xff) + '.' + std::to_string(ip & 0xff);
}

inline std::optional<uint32_t> parse_ip(const std::string& s) {
    uint32_t parts[4];
    int idx = 0;
    uint64_t cur = 0;
    bool have_digit = false;
    for (char c : s) {
        if (c >= '0' && c <= '9') {
            cur = cur * 10 + static_cast<uint64_t>(c - '0');
            if (cur > 255) return std::nullopt;
            have_digit = true;
        } else if (c == '.') {
            if (!have_digit || idx >= 3) return std::nullopt;
            parts[idx++] = static_cast<uint32_t>(cur);
            cur = 0;
            have_digit = false;
        } else {
            return std::nullopt;
        }
    }
    if (!have_digit || idx != 3) return std::nullopt;
    parts[3] = static_cast<uint32_t>(cur);
    return (parts[0] << 24) | (parts[1] << 16) | (parts[2] << 8) | parts[3];
}

inline std::string format_ep(const Endpoint& ep) {
    return format_ip(ep.ip) + ':' + std::to_string(ep.port);
}

}  // namespace tsor
