#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tsor/types.hpp"

namespace tsor {

struct Cidr {
    uint32_t base = 0;
    uint8_t prefix = 0;

    uint32_t netmask() const { return prefix == 0 ? 0 : ~uint32_t{0} << (32 - prefix); }
    bool contains(uint32_t ip) const { return (ip & netmask()) == (base & netmask()); }
    bool overlaps(const Cidr& o) const {
        const uint8_t p = std::min(prefix, o.prefix);
        const uint32_t m = p == 0 ? 0 : ~uint32_t{0} << (32 - p);
        return (base & m) == (o.base & m);
    }
    auto operator<=>(const Cidr&) const = default;

    std::string str() const { return format_ip(base) + '/' + std::to_string(prefix); }
};

inline std::optional<Cidr> parse_cidr(const std::string& s) {
    const auto slash = s.find('/');
    if (slash == std::string::npos) return std::nullopt;
    auto ip = parse_ip(s.substr(0, slash));
    if (!ip) return std::nullopt;
    int prefix;
    try {
        prefix = std::stoi(s.substr(slash + 1));
    } catch (...) {
        return std::nullopt;
    }
    if (prefix < 0 || prefix > 32) return std::nullopt;
    Cidr c{*ip, static_cast<uint8_t>(prefix)};
    c.base &= c.netmask();
    return c;
}

enum class RouteKind : uint8_t { connection, service_handler, egress };

struct RouteTarget {
    RouteKind kind = RouteKind::egress;
    NodeId node = 0;  // valid for kind == connection

    bool operator==(const RouteTarget&) const = default;
};

// Subnet CIDR -> communication module, longest-prefix match. Mutates only on
// node join/leave; the mutation counter backs the route-stability checks.
class RouteTable {
public:
    void set(const Cidr& cidr, RouteTarget target) {
        auto it = entries_.find(cidr);
        if (it != entries_.end() && it->second == target) return;
        entries_[cidr] = target;
        ++mutations_;
    }

    void erase(const Cidr& cidr) {
        if (entries_.erase(cidr)) ++mutations_;
    }

    std::optional<RouteTarget> resolve(uint32_t ip) const {
        std::optional<RouteTarget> best;
        int best_prefix = -1;
        for (const auto& [cidr, target] : entries_) {
            if (cidr.contains(ip) && cidr.prefix > best_prefix) {
                best = target;
                best_prefix = cidr.prefix;
            }
        }
        return best;
    }

    uint64_t mutations() const { return mutations_; }
    size_t size() const { return entries_.size(); }
    const std::map<Cidr, RouteTarget>& entries() const { return entries_; }

private:
    std::map<Cidr, RouteTarget> entries_;
    uint64_t mutations_ = 0;
};

// Service EP -> member pod EPs with a round-robin cursor.
class ClusterEPTable {
public:
    void set_members(const Endpoint& svc, std::vector<Endpoint> members) {
        auto& e = entries_[svc];
        e.members = std::move(members);
        if (e.cursor >= e.members.size()) e.cursor = 0;
    }

    void erase(const Endpoint& svc) { entries_.erase(svc); }

    struct SelectResult {
        Errc err = Errc::ok;
        Endpoint pod{};
    };

    SelectResult select(const Endpoint& svc) {
        auto it = entries_.find(svc);
        if (it == entries_.end()) return {Errc::net_unreachable, {}};
        auto& e = it->second;
        if (e.members.empty()) return {Errc::no_backends, {}};
        const Endpoint pod = e.members[e.cursor];
        e.cursor = (e.cursor + 1) % e.members.size();
        return {Errc::ok, pod};
    }

    bool has(const Endpoint& svc) const { return entries_.count(svc) != 0; }

    struct Entry {
        std::vector<Endpoint> members;
        size_t cursor = 0;
    };
    const std::map<Endpoint, Entry>& entries() const { return entries_; }

private:
    std::map<Endpoint, Entry> entries_;
};

// External EP -> internal service EP, exact match.
class IngressGatewayTable {
public:
    bool set(const Endpoint& external, const Endpoint& service) {
        auto [it, inserted] = entries_.emplace(external, service);
        if (!inserted) it->second = service;
        return inserted;
    }

    std::optional<Endpoint> lookup(const Endpoint& external) const {
        auto it = entries_.find(external);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    const std::map<Endpoint, Endpoint>& entries() const { return entries_; }

private:
    std::map<Endpoint, Endpoint> entries_;
};

struct RouteTables {
    RouteTable routes;
    ClusterEPTable services;
    IngressGatewayTable ingress;
};

// Static per-node CIDR allocation: lowest free host address wins, released
// addresses are reused. With shared_tenant_ips two tenants may hold the same
// address; otherwise addresses are unique across tenants on the node.
class PodIpAllocator {
public:
    PodIpAllocator(Cidr node_cidr, bool shared_tenant_ips)
        : cidr_(node_cidr), shared_(shared_tenant_ips) {}

    struct AllocResult {
        Errc err = Errc::ok;
        uint32_t ip = 0;
    };

    AllocResult allocate(TenantId tenant) {
        const uint32_t lo = cidr_.base + 1;
        const uint32_t hi = (cidr_.base | ~cidr_.netmask()) - 1;  // skip network/broadcast
        auto& used = shared_ ? per_tenant_[tenant] : shared_pool_;
        for (uint32_t ip = lo; ip <= hi; ++ip) {
            if (!used.count(ip)) {
                used.insert(ip);
                return {Errc::ok, ip};
            }
        }
        return {Errc::cidr_exhausted, 0};
    }

    bool claim(TenantId tenant, uint32_t ip) {
        if (!cidr_.contains(ip)) return false;
        auto& used = shared_ ? per_tenant_[tenant] : shared_pool_;
        return used.insert(ip).second;
    }

    void release(TenantId tenant, uint32_t ip) {
        auto& used = shared_ ? per_tenant_[tenant] : shared_pool_;
        used.erase(ip);
    }

    const Cidr& cidr() const { return cidr_; }

private:
    Cidr cidr_;
    bool shared_;
    std::set<uint32_t> shared_pool_;
    std::map<TenantId, std::set<uint32_t>> per_tenant_;
};

struct PolicyRule {
    bool allow = false;
    std::optional<TenantId> tenant;  // nullopt matches any tenant
    Cidr src{0, 0};
    Cidr dst{0, 0};
    std::optional<uint16_t> dst_port;

    bool matches(const Endpoint& src_ep, const Endpoint& dst_ep) const {
        if (tenant && *tenant != src_ep.tenant) return false;
        if (!src.contains(src_ep.ip) || !dst.contains(dst_ep.ip)) return false;
        if (dst_port && *dst_port != dst_ep.port) return false;
        return true;
    }
};

// Tenant gate first, then first-match over the ordered rules, then default
// allow.
class PolicyTable {
public:
    void add(PolicyRule rule) { rules_.push_back(rule); }
    void clear() { rules_.clear(); }
    size_t size() const { return rules_.size(); }
    const std::vector<PolicyRule>& rules() const { return rules_; }

    struct Verdict {
        bool allow = true;
        Errc reason = Errc::ok;
    };

    Verdict evaluate(const Endpoint& src, const Endpoint& dst, bool src_privileged = false) const {
        if (!src_privileged && src.tenant != dst.tenant)
            return {false, Errc::permission_denied};
        for (const auto& r : rules_) {
            if (r.matches(src, dst))
                return {r.allow, r.allow ? Errc::ok : Errc::permission_denied};
        }
        return {true, Errc::ok};
    }

private:
    std::vector<PolicyRule> rules_;
};

}  // namespace tsor
