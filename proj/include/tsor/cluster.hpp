#pragma once

#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tsor/client.hpp"
#include "tsor/controlplane.hpp"
#include "tsor/fabric.hpp"
#include "tsor/service.hpp"

namespace tsor {

// Hosts one fabric, the control plane and one service thread per node, built
// from a scenario. Nodes join in scenario order, so the file's node ids and
// the control plane's agree.
class Cluster {
public:
    explicit Cluster(const ClusterState& scenario)
        : fabric_(scenario.config.conn_setup_delay_us) {
        ClusterState initial = scenario;
        initial.nodes.clear();
        initial.pods.clear();
        cp_ = std::make_unique<ControlPlane>(initial);
        for (const auto& n : scenario.nodes) add_node(n.name, n.pod_cidr);
        for (const auto& p : scenario.pods) {
            auto r = cp_->add_pod(p.name, p.node, p.tenant, p.ep.ip);
            if (r.err != Errc::ok)
                throw ScenarioError("pod setup failed for " + p.name + ": " + errc_name(r.err));
        }
    }

    ~Cluster() {
        for (auto& s : services_) s->stop();
    }

    ServiceNode& add_node(const std::string& name, Cidr cidr) {
        auto join = cp_->join_node(name, cidr);
        if (join.err != Errc::ok) throw ScenarioError("node join failed for " + name);
        auto svc = std::make_unique<ServiceNode>(join.node, join.snapshot, join.watch, fabric_,
                                                 *cp_);
        svc->start();
        services_.push_back(std::move(svc));
        return *services_.back();
    }

    void remove_node(const std::string& name) {
        auto snap = cp_->snapshot();
        auto id = snap.node_id(name);
        if (!id) return;
        fabric_.drop_node(*id);
        cp_->leave_node(*id);
        for (auto it = services_.begin(); it != services_.end(); ++it) {
            if ((*it)->id() == *id) {
                (*it)->stop();
                services_.erase(it);
                break;
            }
        }
    }

    ServiceNode& node(NodeId id) {
        for (auto& s : services_)
            if (s->id() == id) return *s;
        throw std::out_of_range("no such node");
    }

    ServiceNode& node(const std::string& name) {
        for (auto& s : services_)
            if (s->name() == name) return *s;
        throw std::out_of_range("no such node: " + name);
    }

    std::vector<ServiceNode*> nodes() {
        std::vector<ServiceNode*> out;
        for (auto& s : services_) out.push_back(s.get());
        return out;
    }

    ControlPlane& controlplane() { return *cp_; }
    SimFabric& fabric() { return fabric_; }

    // Client bound to a pod's identity; cached per pod name.
    ClientSession& pod_client(const std::string& pod_name) {
        auto it = clients_.find(pod_name);
        if (it != clients_.end()) return *it->second;
        auto snap = cp_->snapshot();
        const PodInfo* p = snap.pod(pod_name);
        if (!p) throw std::out_of_range("no such pod: " + pod_name);
        auto cli = ClientSession::open(node(p->node), p->tenant, p->ep.ip);
        if (!cli) throw std::runtime_error("client registration failed");
        auto [pos, ok] = clients_.emplace(pod_name, std::move(cli));
        return *pos->second;
    }

    const PodInfo& pod(const std::string& name) {
        snap_ = cp_->snapshot();
        const PodInfo* p = snap_.pod(name);
        if (!p) throw std::out_of_range("no such pod: " + name);
        return *p;
    }

    // Waits until every service is idle with stable work counters.
    bool quiesce(std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        int stable_rounds = 0;
        std::vector<uint64_t> last_epochs;
        while (std::chrono::steady_clock::now() < deadline) {
            bool idle = true;
            for (auto& s : services_)
                if (!s->externally_idle()) idle = false;
            std::vector<uint64_t> epochs;
            for (auto& s : services_) epochs.push_back(s->work_epoch());
            if (idle && epochs == last_epochs) {
                if (++stable_rounds >= 3) return true;
            } else {
                stable_rounds = 0;
            }
            last_epochs = std::move(epochs);
            std::this_thread::sleep_for(std::chrono::microseconds(300));
        }
        return false;
    }

    // Runtime invariants; call at quiescence. Empty result means healthy.
    std::vector<std::string> check_invariants() {
        std::vector<std::string> problems;
        if (fabric_.stats().overwrite_violations.load() != 0)
            problems.push_back("ring overwrite violations: " +
                               std::to_string(fabric_.stats().overwrite_violations.load()));
        uint64_t total_tx = 0, total_rx = 0;
        for (auto& s : services_) {
            const auto& c = s->counters();
            if (c.sends_with_zero_credit.load() != 0)
                problems.push_back(s->name() + ": sends with zero credit");
            if (c.protocol_errors.load() != 0)
                problems.push_back(s->name() + ": protocol errors: " +
                                   std::to_string(c.protocol_errors.load()));
            total_tx += c.bytes_tx.load();
            total_rx += c.bytes_rx.load();
        }
        if (total_tx != total_rx)
            problems.push_back("byte totals unbalanced: tx " + std::to_string(total_tx) + " rx " +
                               std::to_string(total_rx));
        // per-channel balance across live channel pairs (key numbers are
        // per-node, so both ends of a pair may carry the same key value)
        std::map<std::tuple<uint64_t, ChannelKey, ChannelKey>,
                 std::vector<ServiceNode::ChannelFlow>>
            pairs;
        for (auto& s : services_) {
            for (const auto& f : s->channel_flows_unsafe()) {
                if (f.peer_key == 0) continue;  // handshake still pending
                const ChannelKey lo = std::min(f.local_key, f.peer_key);
                const ChannelKey hi = std::max(f.local_key, f.peer_key);
                pairs[{f.conn_id, lo, hi}].push_back(f);
            }
        }
        for (const auto& [key, flows] : pairs) {
            if (flows.size() != 2) continue;
            if (flows[0].bytes_tx != flows[1].bytes_rx || flows[1].bytes_tx != flows[0].bytes_rx)
                problems.push_back("channel flow unbalanced on conn " +
                                   std::to_string(std::get<0>(key)));
        }
        return problems;
    }

    struct Totals {
        uint64_t fabric_connections = 0;
        uint64_t mr_registrations = 0;
        uint64_t channels_created = 0;
        uint64_t control_channels_created = 0;
        uint64_t channels_live = 0;
        uint64_t handshake_conn_req = 0;
        uint64_t handshake_conn_resp = 0;
        uint64_t handshake_refuse = 0;
        uint64_t close_msgs = 0;
        uint64_t policy_denials = 0;
        uint64_t bytes_tx = 0;
        uint64_t bytes_rx = 0;
        uint64_t credit_msgs = 0;
        uint64_t credit_min_amount = ~uint64_t{0};
        uint64_t data_msgs = 0;
        uint64_t sq_write_req = 0;
        uint64_t cq_read_ready = 0;
        uint64_t read_ready_coalesced = 0;
        uint64_t sleeps = 0;
        uint64_t wakes = 0;
        uint64_t poll_iters = 0;
    };

    Totals totals() {
        Totals t;
        t.fabric_connections = fabric_.established_count();
        t.mr_registrations = fabric_.stats().mr_registrations.load();
        for (auto& s : services_) {
            const auto& c = s->counters();
            t.channels_created += c.channels_created.load();
            t.control_channels_created += c.control_channels_created.load();
            t.channels_live += c.channels_live.load();
            t.handshake_conn_req += c.handshake_conn_req_sent.load();
            t.handshake_conn_resp += c.handshake_conn_resp_sent.load();
            t.handshake_refuse += c.handshake_refuse_sent.load();
            t.close_msgs += c.close_msgs_sent.load();
            t.policy_denials += c.policy_denials.load();
            t.bytes_tx += c.bytes_tx.load();
            t.bytes_rx += c.bytes_rx.load();
            t.credit_msgs += c.credit_msgs_sent.load();
            t.credit_min_amount = std::min(t.credit_min_amount, c.credit_min_amount.load());
            t.data_msgs += c.data_msgs_sent.load();
            t.sq_write_req += c.sq_write_req.load();
            t.cq_read_ready += c.cq_read_ready.load();
            t.read_ready_coalesced += c.read_ready_coalesced.load();
            t.sleeps += c.wait.sleeps.load();
            t.poll_iters += c.wait.poll_iters.load();
        }
        for (auto& s : services_) t.wakes += s->wakes();
        return t;
    }

private:
    SimFabric fabric_;
    std::unique_ptr<ControlPlane> cp_;
    std::vector<std::unique_ptr<ServiceNode>> services_;
    std::map<std::string, std::unique_ptr<ClientSession>> clients_;
    ClusterState snap_;
};

// ---------------------------------------------------------------------------
// Canonical table dumps (golden-file friendly).
// ---------------------------------------------------------------------------

inline std::string dump_routes(const ClusterState& st) {
    RouteTables t = materialize_tables(st);
    std::ostringstream os;
    for (const auto& [cidr, target] : t.routes.entries()) {
        os << cidr.str() << " -> ";
        switch (target.kind) {
            case RouteKind::connection: os << "conn(" << st.node_name(target.node) << ")"; break;
            case RouteKind::service_handler: os << "service"; break;
            case RouteKind::egress: os << "egress"; break;
        }
        os << '\n';
    }
    return os.str();
}

inline std::string dump_services(const ClusterState& st) {
    RouteTables t = materialize_tables(st);
    std::ostringstream os;
    for (const auto& [ep, entry] : t.services.entries()) {
        os << st.tenant_name(ep.tenant) << ' ' << format_ep(ep) << " -> [";
        for (size_t i = 0; i < entry.members.size(); ++i) {
            if (i) os << ", ";
            os << format_ep(entry.members[i]);
        }
        os << "]\n";
    }
    return os.str();
}

inline std::string dump_ingress(const ClusterState& st) {
    RouteTables t = materialize_tables(st);
    std::ostringstream os;
    for (const auto& [ext, svc] : t.ingress.entries())
        os << format_ep(ext) << " -> " << format_ep(svc) << '\n';
    return os.str();
}

inline std::string dump_policies(const ClusterState& st) {
    std::ostringstream os;
    for (const auto& r : st.policies) {
        os << (r.allow ? "allow" : "deny") << ' '
           << (r.tenant ? st.tenant_name(*r.tenant) : std::string("*")) << ' ' << r.src.str()
           << " -> " << r.dst.str();
        if (r.dst_port) os << " port " << *r.dst_port;
        os << '\n';
    }
    return os.str();
}

}  // namespace tsor
