#pragma once

#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsor/routing.hpp"
#include "tsor/shmq.hpp"
#include "tsor/types.hpp"

namespace tsor {

struct ScenarioError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NodeInfo {
    NodeId id = 0;
    std::string name;
    Cidr pod_cidr{};
    uint64_t join_seq = 0;
};

struct PodInfo {
    std::string name;
    TenantId tenant = 0;
    NodeId node = 0;
    Endpoint ep{};  // port 0: pods own an address, listeners bind ports
};

struct ServiceInfo {
    std::string name;
    Endpoint ep{};
    std::vector<Endpoint> members;
};

struct IngressRule {
    Endpoint external{};
    Endpoint service{};
};

struct QosSpec {
    TenantId tenant = 0;
    uint64_t rate_bytes_per_sec = 0;
    uint64_t burst_bytes = 0;
};

struct ClusterConfig {
    size_t read_buf = 65536;
    size_t write_buf = 65536;
    size_t ctrl_buf = 65536;
    size_t sq_depth = 1024;
    uint64_t spin_budget = 10000;
    bool shared_tenant_ips = false;
    Cidr service_cidr{parse_ip("10.5.0.0").value(), 16};
    uint64_t conn_setup_delay_us = 0;
    uint64_t hop_cost_us = 1;
};

enum class EventKind : uint8_t {
    node_joined,
    node_left,
    pod_added,
    pod_removed,
    service_changed,
    policy_changed,
};

struct ChangeEvent {
    EventKind kind{};
    uint64_t seq = 0;
    NodeInfo node{};
    PodInfo pod{};
};

struct ClusterState {
    ClusterConfig config;
    std::vector<std::string> tenant_names;  // index == TenantId - 1; tenant 0 is system
    std::vector<NodeInfo> nodes;            // join_seq order
    std::vector<PodInfo> pods;
    std::vector<ServiceInfo> services;
    std::vector<IngressRule> ingress;
    std::vector<PolicyRule> policies;
    std::vector<QosSpec> qos;
    std::optional<NodeId> egress_node;
    std::optional<NodeId> ingress_node;

    std::optional<NodeId> node_id(const std::string& name) const {
        for (const auto& n : nodes)
            if (n.name == name) return n.id;
        return std::nullopt;
    }
    const NodeInfo* node(NodeId id) const {
        for (const auto& n : nodes)
            if (n.id == id) return &n;
        return nullptr;
    }
    std::string node_name(NodeId id) const {
        const NodeInfo* n = node(id);
        return n ? n->name : "node" + std::to_string(id);
    }
    std::optional<TenantId> tenant_id(const std::string& name) const {
        for (size_t i = 0; i < tenant_names.size(); ++i)
            if (tenant_names[i] == name) return static_cast<TenantId>(i + 1);
        return std::nullopt;
    }
    std::string tenant_name(TenantId t) const {
        if (t == 0) return "system";
        if (t <= tenant_names.size()) return tenant_names[t - 1];
        return "tenant" + std::to_string(t);
    }
    const PodInfo* pod(const std::string& name) const {
        for (const auto& p : pods)
            if (p.name == name) return &p;
        return nullptr;
    }
};

// Watch subscription: snapshot at subscribe time plus every later event,
// exactly once, in publication order.
class WatchStream {
public:
    void push(const ChangeEvent& e) {
        std::lock_guard lk(mu_);
        events_.push_back(e);
    }
    std::optional<ChangeEvent> poll() {
        std::lock_guard lk(mu_);
        if (events_.empty()) return std::nullopt;
        ChangeEvent e = events_.front();
        events_.pop_front();
        return e;
    }
    bool empty() const {
        std::lock_guard lk(mu_);
        return events_.empty();
    }
    void attach_gate(WakeGate* g) { gate_ = g; }
    WakeGate* gate() const { return gate_; }

private:
    mutable std::mutex mu_;
    std::deque<ChangeEvent> events_;
    WakeGate* gate_ = nullptr;
};

// Mock orchestration control plane: single source of truth for cluster
// objects, change feed to per-node services.
class ControlPlane {
public:
    ControlPlane() = default;
    explicit ControlPlane(ClusterState initial) : state_(std::move(initial)) {
        for (const auto& n : state_.nodes) next_join_seq_ = std::max(next_join_seq_, n.join_seq + 1);
        for (const auto& n : state_.nodes) allocators_.emplace(n.id, make_allocator(n));
        for (const auto& p : state_.pods) allocators_.at(p.node).claim(p.tenant, p.ep.ip);
    }

    ClusterState snapshot() const {
        std::lock_guard lk(mu_);
        return state_;
    }

    std::shared_ptr<WatchStream> watch(NodeId) {
        std::lock_guard lk(mu_);
        auto s = std::make_shared<WatchStream>();
        watchers_.push_back(s);
        return s;
    }

    struct JoinResult {
        Errc err = Errc::ok;
        NodeInfo node{};
        ClusterState snapshot{};
        std::shared_ptr<WatchStream> watch;
    };

    // Registers the node, notifies earlier nodes, and subscribes the joiner
    // in one step: the joiner gets the snapshot (which includes itself) plus
    // every event published afterwards.
    JoinResult join_node(const std::string& name, Cidr pod_cidr) {
        std::lock_guard lk(mu_);
        for (const auto& n : state_.nodes) {
            if (n.name == name) return {Errc::invalid_argument, {}, {}, nullptr};
            if (n.pod_cidr.overlaps(pod_cidr)) return {Errc::invalid_argument, {}, {}, nullptr};
        }
        NodeInfo n{next_node_id_++, name, pod_cidr, next_join_seq_++};
        state_.nodes.push_back(n);
        allocators_.emplace(n.id, make_allocator(n));
        publish({EventKind::node_joined, 0, n, {}});
        auto stream = std::make_shared<WatchStream>();
        watchers_.push_back(stream);
        return {Errc::ok, n, state_, stream};
    }

    void leave_node(NodeId id) {
        std::lock_guard lk(mu_);
        NodeInfo gone{};
        std::erase_if(state_.nodes, [&](const NodeInfo& n) {
            if (n.id == id) gone = n;
            return n.id == id;
        });
        std::erase_if(state_.pods, [&](const PodInfo& p) { return p.node == id; });
        allocators_.erase(id);
        publish({EventKind::node_left, 0, gone, {}});
    }

    struct PodResult {
        Errc err = Errc::ok;
        PodInfo pod{};
    };

    PodResult add_pod(const std::string& name, NodeId node, TenantId tenant,
                      std::optional<uint32_t> want_ip = std::nullopt) {
        std::lock_guard lk(mu_);
        auto it = allocators_.find(node);
        if (it == allocators_.end()) return {Errc::node_not_found, {}};
        for (const auto& p : state_.pods)
            if (p.name == name) return {Errc::invalid_argument, {}};
        uint32_t ip;
        if (want_ip) {
            if (!it->second.claim(tenant, *want_ip)) return {Errc::invalid_argument, {}};
            ip = *want_ip;
        } else {
            auto r = it->second.allocate(tenant);
            if (r.err != Errc::ok) return {r.err, {}};
            ip = r.ip;
        }
        PodInfo p{name, tenant, node, Endpoint{tenant, ip, 0}};
        state_.pods.push_back(p);
        publish({EventKind::pod_added, 0, {}, p});
        return {Errc::ok, p};
    }

    void remove_pod(const std::string& name) {
        std::lock_guard lk(mu_);
        PodInfo gone{};
        std::erase_if(state_.pods, [&](const PodInfo& p) {
            if (p.name == name) gone = p;
            return p.name == name;
        });
        if (!gone.name.empty()) {
            auto it = allocators_.find(gone.node);
            if (it != allocators_.end()) it->second.release(gone.tenant, gone.ep.ip);
            publish({EventKind::pod_removed, 0, {}, gone});
        }
    }

    void set_service(const ServiceInfo& svc) {
        std::lock_guard lk(mu_);
        bool replaced = false;
        for (auto& s : state_.services)
            if (s.ep == svc.ep) {
                s = svc;
                replaced = true;
            }
        if (!replaced) state_.services.push_back(svc);
        publish({EventKind::service_changed, 0, {}, {}});
    }

    void set_policies(std::vector<PolicyRule> rules) {
        std::lock_guard lk(mu_);
        state_.policies = std::move(rules);
        publish({EventKind::policy_changed, 0, {}, {}});
    }

private:
    static PodIpAllocator make_allocator(const NodeInfo& n) {
        return PodIpAllocator(n.pod_cidr, false);
    }

    void publish(ChangeEvent e) {
        e.seq = next_event_seq_++;
        for (auto& w : watchers_) {
            w->push(e);
            if (w->gate()) w->gate()->notify();
        }
    }

    mutable std::mutex mu_;
    ClusterState state_;
    std::map<NodeId, PodIpAllocator> allocators_;
    std::vector<std::shared_ptr<WatchStream>> watchers_;
    NodeId next_node_id_ = 1;
    uint64_t next_join_seq_ = 1;
    uint64_t next_event_seq_ = 1;
};

// ---------------------------------------------------------------------------
// Scenario files: line-oriented, versioned header "tsor-scenario v1",
// sections [config] [tenants] [nodes] [pods] [services] [ingress]
// [gateways] [policies] [qos]. '#' starts a comment.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string t;
    while (is >> t) out.push_back(t);
    return out;
}

inline std::optional<Endpoint> parse_ep(const std::string& s, TenantId tenant) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) return std::nullopt;
    auto ip = parse_ip(s.substr(0, colon));
    if (!ip) return std::nullopt;
    int port;
    try {
        port = std::stoi(s.substr(colon + 1));
    } catch (...) {
        return std::nullopt;
    }
    if (port < 0 || port > 65535) return std::nullopt;
    return Endpoint{tenant, *ip, static_cast<uint16_t>(port)};
}

}  // namespace detail

inline ClusterState load_scenario(const std::string& text) {
    ClusterState st;
    std::istringstream is(text);
    std::string line;
    std::string section;
    int lineno = 0;
    bool header_seen = false;

    auto fail = [&](const std::string& what) -> void {
        throw ScenarioError("scenario line " + std::to_string(lineno) + ": " + what);
    };

    auto intern_tenant = [&](const std::string& name) -> TenantId {
        if (auto t = st.tenant_id(name)) return *t;
        st.tenant_names.push_back(name);
        return static_cast<TenantId>(st.tenant_names.size());
    };

    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto toks = detail::tokens(line);
        if (toks.empty()) continue;

        if (!header_seen) {
            if (toks.size() != 2 || toks[0] != "tsor-scenario" || toks[1] != "v1")
                fail("expected header 'tsor-scenario v1'");
            header_seen = true;
            continue;
        }
        if (toks[0].front() == '[') {
            if (toks.size() != 1 || toks[0].back() != ']') fail("malformed section header");
            section = toks[0].substr(1, toks[0].size() - 2);
            continue;
        }

        if (section == "config") {
            if (toks.size() != 2) fail("config entries are 'key value'");
            const std::string& k = toks[0];
            const std::string& v = toks[1];
            auto num = [&]() -> uint64_t {
                try {
                    return std::stoull(v);
                } catch (...) {
                    fail("bad number for " + k);
                    return 0;
                }
            };
            if (k == "read_buf") st.config.read_buf = num();
            else if (k == "write_buf") st.config.write_buf = num();
            else if (k == "ctrl_buf") st.config.ctrl_buf = num();
            else if (k == "sq_depth") st.config.sq_depth = num();
            else if (k == "spin_budget") st.config.spin_budget = num();
            else if (k == "conn_setup_delay_us") st.config.conn_setup_delay_us = num();
            else if (k == "hop_cost_us") st.config.hop_cost_us = num();
            else if (k == "shared_tenant_ips") st.config.shared_tenant_ips = (v == "on" || v == "true");
            else if (k == "service_cidr") {
                auto c = parse_cidr(v);
                if (!c) fail("bad CIDR");
                st.config.service_cidr = *c;
            } else fail("unknown config key " + k);
        } else if (section == "tenants") {
            if (toks.size() != 1) fail("tenant entries are one name");
            if (st.tenant_id(toks[0])) fail("duplicate tenant " + toks[0]);
            intern_tenant(toks[0]);
        } else if (section == "nodes") {
            if (toks.size() != 2) fail("node entries are 'name cidr'");
            auto c = parse_cidr(toks[1]);
            if (!c) fail("bad CIDR " + toks[1]);
            if (st.node_id(toks[0])) fail("duplicate node " + toks[0]);
            for (const auto& n : st.nodes)
                if (n.pod_cidr.overlaps(*c)) fail("CIDR overlaps node " + n.name);
            if (st.config.service_cidr.overlaps(*c)) fail("CIDR overlaps service CIDR");
            NodeInfo n{static_cast<NodeId>(st.nodes.size() + 1), toks[0], *c,
                       static_cast<uint64_t>(st.nodes.size() + 1)};
            st.nodes.push_back(n);
        } else if (section == "pods") {
            if (toks.size() != 3 && toks.size() != 4) fail("pod entries are 'name node tenant [ip]'");
            if (st.pod(toks[0])) fail("duplicate pod " + toks[0]);
            auto node = st.node_id(toks[1]);
            if (!node) fail("unknown node " + toks[1]);
            const TenantId tenant = intern_tenant(toks[2]);
            const NodeInfo* ni = st.node(*node);
            uint32_t ip = 0;
            if (toks.size() == 4) {
                auto parsed = parse_ip(toks[3]);
                if (!parsed) fail("bad pod IP " + toks[3]);
                ip = *parsed;
                if (!ni->pod_cidr.contains(ip)) fail("pod IP outside node CIDR");
            } else {
                // lowest free host address for this node
                PodIpAllocator alloc(ni->pod_cidr, st.config.shared_tenant_ips);
                for (const auto& p : st.pods)
                    if (p.node == *node) alloc.claim(p.tenant, p.ep.ip);
                auto r = alloc.allocate(tenant);
                if (r.err != Errc::ok) fail("node CIDR exhausted");
                ip = r.ip;
            }
            for (const auto& p : st.pods)
                if (p.ep.ip == ip && (p.tenant == tenant || !st.config.shared_tenant_ips))
                    fail("duplicate pod IP " + format_ip(ip));
            st.pods.push_back({toks[0], tenant, *node, Endpoint{tenant, ip, 0}});
        } else if (section == "services") {
            // svc_name tenant ip:port -> member[,member...]   member: pod:port or ip:port
            if (toks.size() != 5 || toks[3] != "->") fail("service entries are 'name tenant ep -> members'");
            const TenantId tenant = intern_tenant(toks[1]);
            auto ep = detail::parse_ep(toks[2], tenant);
            if (!ep) fail("bad service endpoint " + toks[2]);
            if (!st.config.service_cidr.contains(ep->ip)) fail("service IP outside service CIDR");
            for (const auto& s : st.services)
                if (s.ep == *ep) fail("duplicate service endpoint");
            ServiceInfo svc{toks[0], *ep, {}};
            std::istringstream ms(toks[4]);
            std::string m;
            while (std::getline(ms, m, ',')) {
                auto lit = detail::parse_ep(m, tenant);
                if (lit) {
                    svc.members.push_back(*lit);
                    continue;
                }
                const auto colon = m.rfind(':');
                if (colon == std::string::npos) fail("bad member " + m);
                const PodInfo* p = st.pod(m.substr(0, colon));
                if (!p) fail("unknown member pod " + m);
                int port;
                try {
                    port = std::stoi(m.substr(colon + 1));
                } catch (...) {
                    fail("bad member port");
                    port = 0;
                }
                svc.members.push_back(Endpoint{p->tenant, p->ep.ip, static_cast<uint16_t>(port)});
            }
            if (svc.members.empty()) fail("service has no members");
            st.services.push_back(std::move(svc));
        } else if (section == "ingress") {
            if (toks.size() != 3 || toks[1] != "->") fail("ingress entries are 'ext_ep -> svc_ep'");
            auto ext = detail::parse_ep(toks[0], 0);
            if (!ext) fail("bad external endpoint");
            // the target tenant is the owning service's
            std::optional<Endpoint> svc;
            for (const auto& s : st.services) {
                auto cand = detail::parse_ep(toks[2], s.ep.tenant);
                if (cand && s.ep == *cand) svc = *cand;
            }
            if (!svc) fail("ingress target is not a declared service");
            for (const auto& r : st.ingress)
                if (r.external.ip == ext->ip && r.external.port == ext->port)
                    fail("duplicate external endpoint");
            st.ingress.push_back({*ext, *svc});
        } else if (section == "gateways") {
            if (toks.size() != 2) fail("gateway entries are 'ingress|egress node'");
            auto node = st.node_id(toks[1]);
            if (!node) fail("unknown node " + toks[1]);
            if (toks[0] == "ingress") st.ingress_node = *node;
            else if (toks[0] == "egress") st.egress_node = *node;
            else fail("gateway kind must be ingress or egress");
        } else if (section == "policies") {
            // allow|deny tenant|* src_cidr -> dst_cidr [port N]
            if (toks.size() != 5 && toks.size() != 7) fail("policy entries are 'allow|deny tenant src -> dst [port N]'");
            PolicyRule r;
            if (toks[0] == "allow") r.allow = true;
            else if (toks[0] == "deny") r.allow = false;
            else fail("policy starts with allow|deny");
            if (toks[1] != "*") r.tenant = intern_tenant(toks[1]);
            auto src = parse_cidr(toks[2]);
            auto dst = parse_cidr(toks[4]);
            if (!src || !dst || toks[3] != "->") fail("bad policy CIDRs");
            r.src = *src;
            r.dst = *dst;
            if (toks.size() == 7) {
                if (toks[5] != "port") fail("expected 'port'");
                try {
                    r.dst_port = static_cast<uint16_t>(std::stoi(toks[6]));
                } catch (...) {
                    fail("bad port");
                }
            }
            st.policies.push_back(r);
        } else if (section == "qos") {
            // tenant rate N burst M
            if (toks.size() != 5 || toks[1] != "rate" || toks[3] != "burst") fail("qos entries are 'tenant rate N burst M'");
            QosSpec q;
            q.tenant = intern_tenant(toks[0]);
            try {
                q.rate_bytes_per_sec = std::stoull(toks[2]);
                q.burst_bytes = std::stoull(toks[4]);
            } catch (...) {
                fail("bad qos numbers");
            }
            st.qos.push_back(q);
        } else if (section.empty()) {
            fail("entry outside any section");
        } else {
            fail("unknown section [" + section + "]");
        }
    }
    if (!header_seen) throw ScenarioError("scenario: missing 'tsor-scenario v1' header");
    return st;
}

// Per-node routing tables derived from cluster state. The route table is a
// function of the node set alone; pod churn leaves it untouched.
inline RouteTables materialize_tables(const ClusterState& st) {
    RouteTables t;
    t.routes.set(Cidr{0, 0}, RouteTarget{RouteKind::egress, st.egress_node.value_or(0)});
    t.routes.set(st.config.service_cidr, RouteTarget{RouteKind::service_handler, 0});
    for (const auto& n : st.nodes)
        t.routes.set(n.pod_cidr, RouteTarget{RouteKind::connection, n.id});
    for (const auto& s : st.services)
        t.services.set_members(s.ep, s.members);
    for (const auto& r : st.ingress)
        t.ingress.set(r.external, r.service);
    return t;
}

}  // namespace tsor
