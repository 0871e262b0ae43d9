#pragma once

#include <atomic>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <thread>
#include <vector>

#include "tsor/ring_buffer.hpp"
#include "tsor/shmq.hpp"
#include "tsor/types.hpp"
#include "tsor/wire.hpp"

namespace tsor {

enum class ConnState : uint8_t { connecting, established, closed };

// Bootstrap metadata each side shares when a connection comes up: where the
// peer's control ring lives. 12 bytes little-endian for trace dumps.
struct RendezvousRecord {
    NodeId node_id = 0;
    MrId control_mr = 0;
    uint32_t control_capacity = 0;

    static constexpr size_t kWireSize = 12;
    void encode(uint8_t* out) const {
        wire::put_u32(out + 0, node_id);
        wire::put_u32(out + 4, control_mr);
        wire::put_u32(out + 8, control_capacity);
    }
    static RendezvousRecord decode(const uint8_t* in) {
        return {wire::get_u32(in + 0), wire::get_u32(in + 4), wire::get_u32(in + 8)};
    }
};

enum class CompletionKind : uint8_t {
    send_done,
    recv_imm,
    conn_up,     // connection created; allocate control resources and post meta
    ctrl_ready,  // both sides posted meta; peer_meta is valid
    conn_down,
};

struct Completion {
    CompletionKind kind = CompletionKind::send_done;
    uint64_t conn_id = 0;
    NodeId peer = 0;
    uint32_t imm = 0;
    MrId mr_id = 0;
    uint32_t offset = 0;
    uint32_t length = 0;
    RendezvousRecord peer_meta{};  // ctrl_ready only
    uint8_t side = 0;              // receiving side index (loopback disambiguation)
};

struct FabricConnection {
    uint64_t id = 0;
    NodeId node_a = 0;  // node_a <= node_b
    NodeId node_b = 0;
    ConnState state = ConnState::connecting;
    uint64_t send_seq[2] = {0, 0};
    uint64_t recv_seq[2] = {0, 0};

    bool loopback() const { return node_a == node_b; }
    NodeId other(NodeId n) const { return n == node_a ? node_b : node_a; }
    uint8_t side_of(NodeId n) const { return n == node_a ? 0 : 1; }
};

struct FabricStats {
    std::atomic<uint64_t> mr_registrations{0};
    std::atomic<uint64_t> connections_created{0};
    std::atomic<uint64_t> write_calls{0};
    std::atomic<uint64_t> write_imm_calls{0};
    std::atomic<uint64_t> bytes_written{0};
    std::atomic<uint64_t> recv_imm_delivered{0};
    std::atomic<uint64_t> send_done_delivered{0};
    std::atomic<uint64_t> overwrite_violations{0};
    std::atomic<uint64_t> delivery_errors{0};
};

// In-process stand-in for a reliable, ordered, connection-oriented transport
// with one-sided writes into registered memory regions. The copy executes on
// the sender's thread; the bytes are in the target ring before the matching
// RecvImm can be observed.
class SimFabric {
public:
    explicit SimFabric(uint64_t conn_setup_delay_us = 0) : setup_delay_us_(conn_setup_delay_us) {}

    void register_node(NodeId node, WakeGate* gate = nullptr) {
        std::lock_guard lk(mu_);
        nodes_.emplace(node, NodeState{});
        if (gate) nodes_.at(node).gate = gate;
    }

    bool known_node(NodeId node) const {
        std::lock_guard lk(mu_);
        return nodes_.count(node) != 0;
    }

    struct MrResult {
        Errc err = Errc::ok;
        MrId id = 0;
    };

    MrResult register_mr(NodeId node, RingBuffer& backing) {
        std::lock_guard lk(mu_);
        auto it = nodes_.find(node);
        if (it == nodes_.end()) return {Errc::node_not_found, 0};
        if (!it->second.registered.insert(&backing).second) return {Errc::invalid_argument, 0};
        const MrId id = next_mr_id_++;
        it->second.mrs.emplace(id, Mr{&backing, backing.capacity()});
        stats_.mr_registrations.fetch_add(1);
        return {Errc::ok, id};
    }

    struct ConnectResult {
        Errc err = Errc::ok;
        uint64_t conn_id = 0;
        bool created = false;
    };

    // Idempotent per unordered node pair. Newly created connections surface a
    // conn_up completion on both sides (once for loopback).
    ConnectResult connect(NodeId a, NodeId b) {
        std::unique_lock lk(mu_);
        if (!nodes_.count(a) || !nodes_.count(b)) return {Errc::node_not_found, 0, false};
        const auto key = std::minmax(a, b);
        auto it = pair_index_.find(key);
        if (it != pair_index_.end() && conns_.at(it->second).state != ConnState::closed)
            return {Errc::ok, it->second, false};
        const uint64_t id = next_conn_id_++;
        FabricConnection c;
        c.id = id;
        c.node_a = key.first;
        c.node_b = key.second;
        conns_.emplace(id, c);
        pair_index_[key] = id;
        stats_.connections_created.fetch_add(1);
        if (setup_delay_us_ > 0) {
            lk.unlock();
            std::this_thread::sleep_for(std::chrono::microseconds(setup_delay_us_));
            lk.lock();
        }
        Completion up;
        up.kind = CompletionKind::conn_up;
        up.conn_id = id;
        up.peer = key.second;
        deliver(key.first, up);
        if (key.first != key.second) {
            up.peer = key.first;
            up.side = 1;
            deliver(key.second, up);
        }
        return {Errc::ok, id, true};
    }

    // Rendezvous: each side posts its control-channel metadata; when both are
    // in, the connection is established and each side learns the peer record.
    void post_control_meta(uint64_t conn_id, uint8_t side, const RendezvousRecord& meta) {
        std::lock_guard lk(mu_);
        auto it = conns_.find(conn_id);
        if (it == conns_.end()) return;
        auto& mb = meta_box_[conn_id];
        mb.meta[side] = meta;
        mb.posted[side] = true;
        if (mb.posted[0] && mb.posted[1]) {
            it->second.state = ConnState::established;
            Completion r;
            r.kind = CompletionKind::ctrl_ready;
            r.conn_id = conn_id;
            r.peer = it->second.node_b;
            r.peer_meta = mb.meta[1];
            r.side = 0;
            deliver(it->second.node_a, r);
            r.peer = it->second.node_a;
            r.peer_meta = mb.meta[0];
            r.side = 1;
            deliver(it->second.node_b, r);
        }
    }

    std::optional<FabricConnection> conn_info(uint64_t conn_id) const {
        std::lock_guard lk(mu_);
        auto it = conns_.find(conn_id);
        if (it == conns_.end()) return std::nullopt;
        return it->second;
    }

    Errc write(NodeId from, uint64_t conn_id, MrId remote_mr, size_t offset,
               std::span<const uint8_t> data) {
        stats_.write_calls.fetch_add(1);
        return do_write(from, conn_id, remote_mr, offset, data, std::nullopt);
    }

    Errc write_imm(NodeId from, uint64_t conn_id, MrId remote_mr, size_t offset,
                   std::span<const uint8_t> data, uint32_t imm) {
        stats_.write_imm_calls.fetch_add(1);
        return do_write(from, conn_id, remote_mr, offset, data, imm);
    }

    std::vector<Completion> poll_completions(NodeId node, size_t max) {
        std::lock_guard lk(mu_);
        std::vector<Completion> out;
        auto it = nodes_.find(node);
        if (it == nodes_.end()) return out;
        auto& q = it->second.completions;
        while (!q.empty() && out.size() < max) {
            out.push_back(q.front());
            q.pop_front();
        }
        return out;
    }

    bool completions_pending(NodeId node) const {
        std::lock_guard lk(mu_);
        auto it = nodes_.find(node);
        return it != nodes_.end() && !it->second.completions.empty();
    }

    // Tears down every connection touching the node (node leave).
    void drop_node(NodeId node) {
        std::lock_guard lk(mu_);
        for (auto& [id, c] : conns_) {
            if (c.state != ConnState::established && c.state != ConnState::connecting) continue;
            if (c.node_a != node && c.node_b != node) continue;
            c.state = ConnState::closed;
            Completion down;
            down.kind = CompletionKind::conn_down;
            down.conn_id = id;
            down.peer = node;
            deliver(c.other(node), down);
        }
        nodes_.erase(node);
    }

    size_t established_count() const {
        std::lock_guard lk(mu_);
        size_t n = 0;
        for (const auto& [id, c] : conns_)
            if (c.state == ConnState::established) ++n;
        return n;
    }

    size_t established_count(NodeId node) const {
        std::lock_guard lk(mu_);
        size_t n = 0;
        for (const auto& [id, c] : conns_)
            if (c.state == ConnState::established && (c.node_a == node || c.node_b == node)) ++n;
        return n;
    }

    FabricStats& stats() { return stats_; }
    const FabricStats& stats() const { return stats_; }

private:
    struct Mr {
        RingBuffer* ring = nullptr;
        size_t capacity = 0;
    };

    struct NodeState {
        std::map<MrId, Mr> mrs;
        std::set<const RingBuffer*> registered;
        std::deque<Completion> completions;
        WakeGate* gate = nullptr;
    };

    struct MetaBox {
        RendezvousRecord meta[2];
        bool posted[2] = {false, false};
    };

    void deliver(NodeId node, const Completion& c) {
        auto it = nodes_.find(node);
        if (it == nodes_.end()) return;
        it->second.completions.push_back(c);
        if (c.kind == CompletionKind::recv_imm) stats_.recv_imm_delivered.fetch_add(1);
        if (c.kind == CompletionKind::send_done) stats_.send_done_delivered.fetch_add(1);
        if (it->second.gate) it->second.gate->notify();
    }

    Errc do_write(NodeId from, uint64_t conn_id, MrId remote_mr, size_t offset,
                  std::span<const uint8_t> data, std::optional<uint32_t> imm) {
        std::lock_guard lk(mu_);
        auto cit = conns_.find(conn_id);
        if (cit == conns_.end()) return Errc::invalid_argument;
        FabricConnection& conn = cit->second;
        if (conn.state != ConnState::established) return Errc::connection_closed;
        if (conn.node_a != from && conn.node_b != from) return Errc::invalid_argument;
        const NodeId to = conn.loopback() ? from : conn.other(from);
        auto nit = nodes_.find(to);
        if (nit == nodes_.end()) return Errc::node_not_found;
        auto mit = nit->second.mrs.find(remote_mr);
        if (mit == nit->second.mrs.end()) {
            stats_.delivery_errors.fetch_add(1);
            return Errc::invalid_argument;
        }
        Mr& mr = mit->second;
        if (offset + data.size() > mr.capacity) {
            stats_.delivery_errors.fetch_add(1);
            return Errc::invalid_argument;
        }
        if (!mr.ring->remote_write_check(offset, data.size())) {
            stats_.overwrite_violations.fetch_add(1);
            return Errc::protocol;
        }
        std::memcpy(mr.ring->data() + offset, data.data(), data.size());
        stats_.bytes_written.fetch_add(data.size());
        const uint8_t direction = conn.side_of(from);
        conn.send_seq[direction]++;
        Completion done;
        done.kind = CompletionKind::send_done;
        done.conn_id = conn_id;
        done.peer = to;
        done.mr_id = remote_mr;
        done.length = static_cast<uint32_t>(data.size());
        deliver(from, done);
        if (imm) {
            conn.recv_seq[direction]++;
            Completion recv;
            recv.kind = CompletionKind::recv_imm;
            recv.conn_id = conn_id;
            recv.peer = from;
            recv.imm = *imm;
            recv.mr_id = remote_mr;
            recv.offset = static_cast<uint32_t>(offset);
            recv.length = static_cast<uint32_t>(data.size());
            deliver(to, recv);
        }
        return Errc::ok;
    }

    mutable std::mutex mu_;
    std::map<NodeId, NodeState> nodes_;
    std::map<uint64_t, FabricConnection> conns_;
    std::map<std::pair<NodeId, NodeId>, uint64_t> pair_index_;
    std::map<uint64_t, MetaBox> meta_box_;
    MrId next_mr_id_ = 1;
    uint64_t next_conn_id_ = 1;
    FabricStats stats_;
    uint64_t setup_delay_us_ = 0;
};

}  // namespace tsor
