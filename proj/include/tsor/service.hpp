#pragma once

#include <array>
#include <condition_variable>
#include <chrono>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "tsor/controlplane.hpp"
#include "tsor/fabric.hpp"
#include "tsor/metrics.hpp"
#include "tsor/qos.hpp"
#include "tsor/ring_buffer.hpp"
#include "tsor/routing.hpp"
#include "tsor/shmq.hpp"
#include "tsor/types.hpp"

namespace tsor {

enum class CtrlKind : uint32_t {
    conn_req = 1,
    conn_resp = 2,
    credit = 3,
    close = 4,
    refuse = 5,
};

// Control-channel payload record, fixed 64 bytes little-endian. For credit
// and close, initiator_channel_key names the destination side's channel and
// responder_channel_key the sender's.
struct ControlMessage {
    CtrlKind kind = CtrlKind::conn_req;
    Endpoint src_ep{};
    Endpoint dst_ep{};
    ChannelKey initiator_channel_key = 0;
    ChannelKey responder_channel_key = 0;
    MrId read_mr = 0;
    uint32_t read_capacity = 0;
    uint32_t initial_credit = 0;
    uint16_t reason = 0;

    static constexpr size_t kWireSize = 64;

    void encode(uint8_t* out) const {
        std::memset(out, 0, kWireSize);
        wire::put_u32(out + 0, static_cast<uint32_t>(kind));
        wire::put_u32(out + 4, src_ep.tenant);
        wire::put_u32(out + 8, src_ep.ip);
        wire::put_u16(out + 12, src_ep.port);
        wire::put_u32(out + 16, dst_ep.tenant);
        wire::put_u32(out + 20, dst_ep.ip);
        wire::put_u16(out + 24, dst_ep.port);
        wire::put_u32(out + 28, initiator_channel_key);
        wire::put_u32(out + 32, responder_channel_key);
        wire::put_u32(out + 36, read_mr);
        wire::put_u32(out + 40, read_capacity);
        wire::put_u32(out + 44, initial_credit);
        wire::put_u16(out + 48, reason);
    }

    static ControlMessage decode(const uint8_t* in) {
        ControlMessage m;
        m.kind = static_cast<CtrlKind>(wire::get_u32(in + 0));
        m.src_ep = {wire::get_u32(in + 4), wire::get_u32(in + 8), wire::get_u16(in + 12)};
        m.dst_ep = {wire::get_u32(in + 16), wire::get_u32(in + 20), wire::get_u16(in + 24)};
        m.initiator_channel_key = wire::get_u32(in + 28);
        m.responder_channel_key = wire::get_u32(in + 32);
        m.read_mr = wire::get_u32(in + 36);
        m.read_capacity = wire::get_u32(in + 40);
        m.initial_credit = wire::get_u32(in + 44);
        m.reason = wire::get_u16(in + 48);
        return m;
    }
};

// Client-visible side of one channel. The service fills it, the client reads
// buffers directly; flags carry state transitions.
struct ChannelShared {
    std::shared_ptr<RingBuffer> read_buf;
    std::shared_ptr<RingBuffer> write_buf;
    std::atomic<bool> read_ready_pending{false};
    std::atomic<bool> remote_closed{false};
    std::atomic<bool> local_closed{false};
    std::atomic<uint16_t> error{0};  // Errc; nonzero means the channel died
    Endpoint local_ep{};
    Endpoint remote_ep{};
};

struct AcceptedChannel {
    uint32_t handle = 0;
    std::shared_ptr<ChannelShared> shared;
};

struct ConnectOutcome {
    Errc err = Errc::ok;
    uint32_t handle = 0;
    std::shared_ptr<ChannelShared> shared;
};

// Everything one client shares with its node service: the SQ/CQ pair plus
// the state maps the blocking client API waits on. State mutations happen
// under mu; the CQ is the wake/trace channel.
struct ClientDoor {
    uint32_t slot = 0;
    TenantId tenant = 0;
    uint32_t pod_ip = 0;
    bool privileged = false;

    WorkQueuePair queues;
    ReadinessBitmap* bitmap = nullptr;
    WakeGate* gate = nullptr;

    std::mutex mu;
    std::condition_variable cv;
    std::map<uint32_t, ConnectOutcome> connect_results;
    std::map<uint32_t, Errc> listen_results;
    std::map<uint32_t, std::deque<AcceptedChannel>> accept_queues;
    std::deque<AcceptedChannel> egress_queue;  // pending egress dials (gateway only)
    std::map<uint32_t, std::shared_ptr<ChannelShared>> channels;

    explicit ClientDoor(size_t depth) : queues(depth) {}

    // Client side: enqueue a request and wake the service.
    bool submit(const WorkMessage& m) {
        if (!queues.sq.push(m)) return false;
        bitmap->set(slot);
        gate->notify();
        return true;
    }

    // Client side, caller holds mu. Pops every CQ entry; ReadReady entries
    // re-arm the per-channel coalescing flag.
    size_t drain_cq_locked() {
        size_t n = 0;
        while (auto m = queues.cq.pop()) {
            ++n;
            if (m->msg_type == MsgType::read_ready) {
                auto it = channels.find(m->socket_id);
                if (it != channels.end()) it->second->read_ready_pending.store(false);
            }
        }
        return n;
    }
};

// The per-node TSoR service: client manager, pre-established connection
// mesh, control + data channels, the data pump, handshake handling, policy
// and QoS enforcement. One loop thread owns all state except the client
// doors' shared maps.
class ServiceNode {
public:
    static constexpr uint32_t kMaxClients = ReadinessBitmap::kMaxSlots;

    ServiceNode(NodeInfo info, ClusterState snapshot, std::shared_ptr<WatchStream> watch,
                SimFabric& fabric, ControlPlane& cp)
        : info_(info), cs_(std::move(snapshot)), watch_(std::move(watch)), fabric_(fabric), cp_(cp),
          cfg_(cs_.config) {
        fabric_.register_node(info_.id, &gate_);
        watch_->attach_gate(&gate_);
        routes_.set(Cidr{0, 0}, RouteTarget{RouteKind::egress, 0});
        routes_.set(cfg_.service_cidr, RouteTarget{RouteKind::service_handler, 0});
        for (const auto& n : cs_.nodes)
            routes_.set(n.pod_cidr, RouteTarget{RouteKind::connection, n.id});
        rebuild_service_tables();
        rebuild_policies();
        for (const auto& q : cs_.qos)
            buckets_[q.tenant] = TokenBucket(q.rate_bytes_per_sec, q.burst_bytes, now_ns());
    }

    ~ServiceNode() { stop(); }

    NodeId id() const { return info_.id; }
    const std::string& name() const { return info_.name; }
    const ClusterConfig& config() const { return cfg_; }

    void start() {
        thread_ = std::jthread([this](std::stop_token st) { run(st); });
        // mesh establishment toward every earlier peer
        for (const auto& n : cs_.nodes)
            if (n.join_seq < info_.join_seq) fabric_.connect(info_.id, n.id);
    }

    void stop() {
        if (thread_.joinable()) {
            thread_.request_stop();
            gate_.notify();
            thread_.join();
        }
    }

    struct RegisterResult {
        Errc err = Errc::ok;
        std::shared_ptr<ClientDoor> door;
    };

    // Called from client threads. Allocates the slot, SQ/CQ and the shared
    // state arena the per-socket buffers hang off.
    RegisterResult register_client(TenantId tenant, uint32_t pod_ip, bool privileged = false) {
        std::lock_guard lk(agents_mu_);
        if (next_slot_ >= kMaxClients) return {Errc::invalid_argument, nullptr};
        auto door = std::make_shared<ClientDoor>(cfg_.sq_depth);
        door->slot = next_slot_++;
        door->tenant = tenant;
        door->pod_ip = pod_ip;
        door->privileged = privileged;
        door->bitmap = &bitmap_;
        door->gate = &gate_;
        agents_[door->slot] = std::make_shared<ClientAgent>(door);
        return {Errc::ok, door};
    }

    // Marks a registered client as the node's egress handler.
    void register_egress_handler(const ClientDoor& door) {
        std::lock_guard lk(agents_mu_);
        egress_slot_ = door.slot;
    }

    ServiceCounters& counters() { return counters_; }
    const ServiceCounters& counters() const { return counters_; }
    uint64_t route_mutations() const { return routes_.mutations(); }
    uint64_t wakes() const { return gate_.wakes(); }
    uint64_t work_epoch() const { return work_epoch_.load(); }

    // Quiescence probe: nothing submitted and nothing parked. Only meaningful
    // when callers have stopped producing work.
    bool externally_idle() const {
        if (bitmap_.any() || fabric_.completions_pending(info_.id) || !watch_->empty()) return false;
        return pending_gauge_.load() == 0;
    }

    // Post-quiescence inspection for tests; not synchronized with the loop.
    const RouteTable& route_table_unsafe() const { return routes_; }
    ClusterEPTable& service_table_unsafe() { return services_; }
    size_t live_channel_count() const { return counters_.channels_live.load(); }

    struct ChannelFlow {
        uint64_t conn_id;
        ChannelKey local_key;
        ChannelKey peer_key;
        uint64_t bytes_tx;
        uint64_t bytes_rx;
    };
    // Snapshot of live channel flow counters (post-quiescence use).
    std::vector<ChannelFlow> channel_flows_unsafe() const {
        std::vector<ChannelFlow> out;
        for (const auto& [cid, ch] : channels_)
            out.push_back({cid.conn, cid.key, ch.peer_key, ch.bytes_tx, ch.bytes_rx});
        return out;
    }

private:
    struct ChanId {
        uint64_t conn = 0;
        ChannelKey key = 0;
        auto operator<=>(const ChanId&) const = default;
    };

    struct DataChannel {
        ChanId id{};
        ChannelKey peer_key = 0;
        uint8_t ctrl_side = 0;
        uint32_t owner_slot = 0;
        uint32_t owner_handle = 0;
        std::shared_ptr<ChannelShared> shared;
        MrId read_mr = 0;
        MrId write_mr = 0;
        MrId remote_read_mr = 0;
        size_t remote_cap = 0;
        uint64_t remote_shadow = 0;  // physical cursor into the peer read ring
        uint64_t remote_free = 0;    // conservative credits
        uint64_t freed_since_notify = 0;
        bool open = false;
        bool egress_pending = false;
        bool local_closed = false;
        bool close_sent = false;
        bool remote_closed = false;
        bool rate_stalled = false;
        uint32_t initiator_req = 0;  // initiator side: client req id
        Endpoint listener_ep{};      // acceptor side: backlog bookkeeping
        TenantId tenant = 0;
        uint64_t bytes_tx = 0;
        uint64_t bytes_rx = 0;
    };

    struct CtrlSide {
        bool in_use = false;
        std::shared_ptr<RingBuffer> read_ring;
        std::shared_ptr<RingBuffer> write_ring;
        MrId read_mr = 0;
        MrId write_mr = 0;
        MrId remote_mr = 0;
        size_t remote_cap = 0;
        uint64_t remote_shadow = 0;
        uint64_t remote_free = 0;
        uint64_t freed_since_notify = 0;
        std::deque<ControlMessage> overflow;  // waiting for write ring space
    };

    struct ConnRec {
        uint64_t conn_id = 0;
        NodeId peer = 0;
        bool loopback = false;
        bool ready = false;
        std::array<CtrlSide, 2> side{};
        ChannelKey next_key = 1;
        std::deque<std::pair<uint32_t, WorkMessage>> parked_connects;
    };

    struct Listener {
        uint32_t slot = 0;
        uint32_t req_id = 0;
        uint32_t backlog = 1;
        uint32_t pending = 0;
    };

    struct ClientAgent {
        explicit ClientAgent(std::shared_ptr<ClientDoor> d) : door(std::move(d)) {}
        std::shared_ptr<ClientDoor> door;
        uint32_t next_handle = 1;
        std::map<uint32_t, ChanId> by_handle;
    };

    static uint64_t now_ns() {
        return static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                         std::chrono::steady_clock::now().time_since_epoch())
                                         .count());
    }

    // ---- loop ---------------------------------------------------------

    void run(std::stop_token st) {
        while (!st.stop_requested()) {
            bool work = false;
            work |= process_completions();
            work |= process_watch();
            for (uint32_t slot : bitmap_.scan()) {
                drain_sq(slot);
                work = true;
            }
            work |= repump_stalled();
            if (work) {
                work_epoch_.fetch_add(1);
                continue;
            }
            auto extra = [&] {
                return fabric_.completions_pending(info_.id) || !watch_->empty() ||
                       st.stop_requested();
            };
            std::optional<std::chrono::nanoseconds> nap;
            if (!stalled_.empty()) nap = std::chrono::milliseconds(1);
            auto slots = service_wait(bitmap_, gate_, counters_.wait, cfg_.spin_budget, extra, nap);
            for (uint32_t slot : slots) drain_sq(slot);
            if (!slots.empty()) work_epoch_.fetch_add(1);
        }
    }

    std::shared_ptr<ClientAgent> agent(uint32_t slot) {
        std::lock_guard lk(agents_mu_);
        auto it = agents_.find(slot);
        return it == agents_.end() ? nullptr : it->second;
    }

    // ---- fabric events --------------------------------------------------

    bool process_completions() {
        auto batch = fabric_.poll_completions(info_.id, 256);
        for (const auto& c : batch) {
            switch (c.kind) {
                case CompletionKind::conn_up: on_conn_up(c); break;
                case CompletionKind::ctrl_ready: on_ctrl_ready(c); break;
                case CompletionKind::recv_imm: on_recv_imm(c); break;
                case CompletionKind::send_done: break;
                case CompletionKind::conn_down: on_conn_down(c); break;
            }
        }
        return !batch.empty();
    }

    void on_conn_up(const Completion& c) {
        auto info = fabric_.conn_info(c.conn_id);
        if (!info) return;
        ConnRec& cr = conns_[c.conn_id];
        cr.conn_id = c.conn_id;
        cr.loopback = info->loopback();
        cr.peer = info->other(info_.id);
        if (cr.loopback) {
            setup_ctrl_side(cr, 0);
            setup_ctrl_side(cr, 1);
        } else {
            setup_ctrl_side(cr, info->side_of(info_.id));
        }
        conn_by_peer_[cr.peer] = c.conn_id;
    }

    void setup_ctrl_side(ConnRec& cr, uint8_t s) {
        CtrlSide& cs = cr.side[s];
        if (cs.in_use) return;
        cs.in_use = true;
        cs.read_ring = std::make_shared<RingBuffer>(cfg_.ctrl_buf);
        cs.write_ring = std::make_shared<RingBuffer>(cfg_.ctrl_buf);
        cs.read_mr = fabric_.register_mr(info_.id, *cs.read_ring).id;
        cs.write_mr = fabric_.register_mr(info_.id, *cs.write_ring).id;
        counters_.control_channels_created.fetch_add(1);
        ctrl_mr_index_[cs.read_mr] = {cr.conn_id, s};
        fabric_.post_control_meta(cr.conn_id, s,
                                  {info_.id, cs.read_mr, static_cast<uint32_t>(cfg_.ctrl_buf)});
    }

    void on_ctrl_ready(const Completion& c) {
        auto it = conns_.find(c.conn_id);
        if (it == conns_.end()) return;
        ConnRec& cr = it->second;
        // the ready event tells side `c.side` what its peer ring looks like
        CtrlSide& cs = cr.side[c.side];
        cs.remote_mr = c.peer_meta.control_mr;
        cs.remote_cap = c.peer_meta.control_capacity;
        cs.remote_free = c.peer_meta.control_capacity;
        if (!cr.loopback || (cr.side[0].remote_mr && cr.side[1].remote_mr)) cr.ready = true;
        if (cr.ready) {
            auto parked = std::move(cr.parked_connects);
            cr.parked_connects.clear();
            pending_gauge_.fetch_sub(parked.size());
            for (auto& [slot, m] : parked) handle_connect_req(slot, m);
        }
    }

    void on_conn_down(const Completion& c) {
        auto it = conns_.find(c.conn_id);
        if (it == conns_.end()) return;
        std::vector<ChanId> doomed;
        for (auto& [cid, ch] : channels_)
            if (cid.conn == c.conn_id) doomed.push_back(cid);
        for (const ChanId& cid : doomed) fail_channel(cid, Errc::connection_closed);
        pending_gauge_.fetch_sub(it->second.parked_connects.size());
        conn_by_peer_.erase(it->second.peer);
        conns_.erase(it);
    }

    void on_recv_imm(const Completion& c) {
        if (c.imm == 0) {
            on_ctrl_bytes(c);
            return;
        }
        auto it = channels_.find(ChanId{c.conn_id, c.imm});
        if (it == channels_.end()) {
            counters_.protocol_errors.fetch_add(1);
            return;
        }
        DataChannel& ch = it->second;
        RingBuffer& ring = *ch.shared->read_buf;
        const size_t cap = ring.capacity();
        const size_t end = c.offset + c.length;
        const size_t advance = ((end - (ring.tail() & (cap - 1)) + cap - 1) & (cap - 1)) + 1;
        ring.advance_tail(advance);
        ch.bytes_rx += advance;
        counters_.bytes_rx.fetch_add(advance);
        push_read_ready(ch);
    }

    // ---- control channel -------------------------------------------------

    void on_ctrl_bytes(const Completion& c) {
        auto idx = ctrl_mr_index_.find(c.mr_id);
        if (idx == ctrl_mr_index_.end()) {
            counters_.protocol_errors.fetch_add(1);
            return;
        }
        const auto [conn_id, ring_side] = idx->second;
        auto it = conns_.find(conn_id);
        if (it == conns_.end()) return;
        ConnRec& cr = it->second;
        CtrlSide& cs = cr.side[ring_side];
        RingBuffer& ring = *cs.read_ring;
        const size_t cap = ring.capacity();
        const size_t end = c.offset + c.length;
        const size_t advance = ((end - (ring.tail() & (cap - 1)) + cap - 1) & (cap - 1)) + 1;
        ring.advance_tail(advance);
        uint8_t rec[ControlMessage::kWireSize];
        size_t consumed = 0;
        while (ring.available() >= ControlMessage::kWireSize) {
            ring.consume_into(rec);
            consumed += ControlMessage::kWireSize;
            dispatch_ctrl(cr, ring_side, ControlMessage::decode(rec));
        }
        // half-buffer rule for the control ring itself
        cs.freed_since_notify += consumed;
        if (cs.freed_since_notify > cap / 2) {
            ControlMessage credit;
            credit.kind = CtrlKind::credit;
            credit.initiator_channel_key = 0;
            credit.initial_credit = static_cast<uint32_t>(cs.freed_since_notify);
            cs.freed_since_notify = 0;
            send_ctrl(cr, ring_side, credit, false);
        }
    }

    void dispatch_ctrl(ConnRec& cr, uint8_t ring_side, const ControlMessage& m) {
        switch (m.kind) {
            case CtrlKind::conn_req: handle_conn_req_remote(cr, ring_side, m); break;
            case CtrlKind::conn_resp: handle_conn_resp(cr, m); break;
            case CtrlKind::refuse: handle_refuse(cr, m); break;
            case CtrlKind::credit:
                if (m.initiator_channel_key == 0) {
                    cr.side[ring_side].remote_free += m.initial_credit;
                    flush_ctrl(cr, ring_side);
                } else if (auto it = channels_.find(ChanId{cr.conn_id, m.initiator_channel_key});
                           it != channels_.end()) {
                    it->second.remote_free += m.initial_credit;
                    pump_channel(it->second);
                } else {
                    // a credit racing the peer's close teardown; nothing to do
                    counters_.late_credit_drops.fetch_add(1);
                }
                break;
            case CtrlKind::close: {
                auto it = channels_.find(ChanId{cr.conn_id, m.initiator_channel_key});
                if (it == channels_.end()) break;  // already gone
                DataChannel& ch = it->second;
                ch.remote_closed = true;
                ch.shared->remote_closed.store(true);
                notify_client(ch, MsgType::close_req, 0);
                maybe_destroy(it->first);
                break;
            }
        }
    }

    // Sends (or queues) a control message on the given side of a connection.
    void send_ctrl(ConnRec& cr, uint8_t side, const ControlMessage& m, bool count_kind = true) {
        if (count_kind) {
            switch (m.kind) {
                case CtrlKind::conn_req: counters_.handshake_conn_req_sent.fetch_add(1); break;
                case CtrlKind::conn_resp: counters_.handshake_conn_resp_sent.fetch_add(1); break;
                case CtrlKind::refuse: counters_.handshake_refuse_sent.fetch_add(1); break;
                case CtrlKind::close: counters_.close_msgs_sent.fetch_add(1); break;
                case CtrlKind::credit: break;
            }
        }
        CtrlSide& cs = cr.side[side];
        uint8_t rec[ControlMessage::kWireSize];
        if (cs.overflow.empty() && cs.write_ring->free_space() >= ControlMessage::kWireSize) {
            m.encode(rec);
            cs.write_ring->produce(rec);
        } else {
            cs.overflow.push_back(m);
            pending_gauge_.fetch_add(1);
        }
        flush_ctrl(cr, side);
    }

    void flush_ctrl(ConnRec& cr, uint8_t side) {
        CtrlSide& cs = cr.side[side];
        uint8_t rec[ControlMessage::kWireSize];
        while (!cs.overflow.empty() && cs.write_ring->free_space() >= ControlMessage::kWireSize) {
            cs.overflow.front().encode(rec);
            cs.write_ring->produce(rec);
            cs.overflow.pop_front();
            pending_gauge_.fetch_sub(1);
        }
        if (!cr.ready) return;
        RingBuffer& ring = *cs.write_ring;
        size_t n = std::min<uint64_t>(ring.available(), cs.remote_free);
        n -= n % ControlMessage::kWireSize;
        if (n == 0) return;
        std::vector<uint8_t> buf(n);
        ring.consume_into(buf);
        wire_write(cr.conn_id, cs.remote_mr, cs.remote_cap, cs.remote_shadow, buf, 0);
        cs.remote_shadow += n;
        cs.remote_free -= n;
    }

    // One logical message: split on the remote wrap boundary, immediate only
    // on the final segment.
    Errc wire_write(uint64_t conn_id, MrId remote_mr, size_t remote_cap, uint64_t shadow,
                    std::span<const uint8_t> data, uint32_t imm) {
        const RingRegions rs = RingBuffer::contiguous_regions(remote_cap, shadow, data.size());
        if (rs.second.len == 0)
            return fabric_.write_imm(info_.id, conn_id, remote_mr, rs.first.offset, data, imm);
        Errc e = fabric_.write(info_.id, conn_id, remote_mr, rs.first.offset,
                               data.first(rs.first.len));
        if (e != Errc::ok) return e;
        return fabric_.write_imm(info_.id, conn_id, remote_mr, rs.second.offset,
                                 data.subspan(rs.first.len), imm);
    }

    // ---- SQ handling ------------------------------------------------------

    void drain_sq(uint32_t slot) {
        auto ag = agent(slot);
        if (!ag) return;
        while (auto m = ag->door->queues.sq.pop()) {
            switch (m->msg_type) {
                case MsgType::connect_req:
                    counters_.sq_connect_req.fetch_add(1);
                    if (m->dst_ep.ip == 0 && m->dst_ep.port == 0) handle_listen(slot, *m);
                    else handle_connect_req(slot, *m);
                    break;
                case MsgType::connect_resp:
                    counters_.sq_connect_resp.fetch_add(1);
                    handle_client_connect_resp(slot, *m);
                    break;
                case MsgType::write_req:
                    counters_.sq_write_req.fetch_add(1);
                    if (auto* ch = channel_of(slot, m->socket_id)) pump_channel(*ch);
                    break;
                case MsgType::credit_hint:
                    counters_.sq_credit_hint.fetch_add(1);
                    if (auto* ch = channel_of(slot, m->socket_id))
                        post_read_credit(*ch, m->payload_u32);
                    break;
                case MsgType::close_req:
                    counters_.sq_close_req.fetch_add(1);
                    handle_close_req(slot, *m);
                    break;
                default:
                    counters_.protocol_errors.fetch_add(1);
                    break;
            }
        }
    }

    DataChannel* channel_of(uint32_t slot, uint32_t handle) {
        auto ag = agent(slot);
        if (!ag) return nullptr;
        auto it = ag->by_handle.find(handle);
        if (it == ag->by_handle.end()) return nullptr;
        auto ch = channels_.find(it->second);
        return ch == channels_.end() ? nullptr : &ch->second;
    }

    void handle_listen(uint32_t slot, const WorkMessage& m) {
        auto ag = agent(slot);
        const Endpoint ep = m.src_ep;
        Errc err = Errc::ok;
        if (listeners_.count(ep)) err = Errc::addr_in_use;
        else listeners_[ep] = Listener{slot, m.socket_id, std::max<uint32_t>(1, m.payload_u32), 0};
        {
            std::lock_guard lk(ag->door->mu);
            ag->door->listen_results[m.socket_id] = err;
            WorkMessage r{};
            r.msg_type = MsgType::connect_resp;
            r.socket_id = m.socket_id;
            r.payload_u32 = static_cast<uint32_t>(err);
            if (ag->door->queues.cq.push(r)) counters_.cq_connect_resp.fetch_add(1);
        }
        ag->door->cv.notify_all();
    }

    void fail_connect(uint32_t slot, uint32_t req_id, Errc err) {
        auto ag = agent(slot);
        if (!ag) return;
        {
            std::lock_guard lk(ag->door->mu);
            ag->door->connect_results[req_id] = {err, 0, nullptr};
            WorkMessage r{};
            r.msg_type = MsgType::error;
            r.socket_id = req_id;
            r.payload_u32 = static_cast<uint32_t>(err);
            if (ag->door->queues.cq.push(r)) counters_.cq_error.fetch_add(1);
        }
        ag->door->cv.notify_all();
    }

    // Initiator side of the two-way handshake.
    void handle_connect_req(uint32_t slot, const WorkMessage& m) {
        auto ag = agent(slot);
        if (!ag) return;
        Endpoint dst = m.dst_ep;
        const Endpoint src = m.src_ep;

        // tenant gate, then resolution (with service rewrite), then rules
        if (!ag->door->privileged && src.tenant != dst.tenant) {
            counters_.policy_denials.fetch_add(1);
            fail_connect(slot, m.socket_id, Errc::permission_denied);
            return;
        }
        auto target = routes_.resolve(dst.ip);
        if (target && target->kind == RouteKind::service_handler) {
            auto sel = services_.select(dst);
            if (sel.err != Errc::ok) {
                fail_connect(slot, m.socket_id, sel.err);
                return;
            }
            dst = sel.pod;
            target = routes_.resolve(dst.ip);
        }
        auto verdict = policies_.evaluate(src, dst, ag->door->privileged);
        if (!verdict.allow) {
            counters_.policy_denials.fetch_add(1);
            fail_connect(slot, m.socket_id, verdict.reason);
            return;
        }
        if (!target) {
            fail_connect(slot, m.socket_id, Errc::net_unreachable);
            return;
        }
        NodeId peer_node;
        if (target->kind == RouteKind::connection) {
            peer_node = target->node;
        } else {  // egress
            if (!cs_.egress_node) {
                fail_connect(slot, m.socket_id, Errc::net_unreachable);
                return;
            }
            peer_node = *cs_.egress_node;
        }
        auto conn = fabric_.connect(info_.id, peer_node);
        if (conn.err != Errc::ok) {
            fail_connect(slot, m.socket_id, Errc::net_unreachable);
            return;
        }
        auto cit = conns_.find(conn.conn_id);
        if (cit == conns_.end() || !cit->second.ready) {
            // control channel still coming up; retry when rendezvous completes,
            // keeping the already-rewritten destination so the round-robin
            // cursor moves once per connect
            WorkMessage parked = m;
            parked.dst_ep = dst;
            conns_[conn.conn_id].conn_id = conn.conn_id;
            conns_[conn.conn_id].parked_connects.emplace_back(slot, parked);
            pending_gauge_.fetch_add(1);
            return;
        }
        ConnRec& cr = cit->second;
        const uint8_t side = cr.loopback ? 0 : side_of_self(cr);
        DataChannel& ch = create_channel(cr, slot, src, dst, side);
        ch.initiator_req = m.socket_id;

        ControlMessage req;
        req.kind = CtrlKind::conn_req;
        req.src_ep = src;
        req.dst_ep = dst;
        req.initiator_channel_key = ch.id.key;
        req.read_mr = ch.read_mr;
        req.read_capacity = static_cast<uint32_t>(ch.shared->read_buf->capacity());
        req.initial_credit = req.read_capacity;
        send_ctrl(cr, side, req);
    }

    uint8_t side_of_self(const ConnRec& cr) const {
        auto info = fabric_.conn_info(cr.conn_id);
        return info ? info->side_of(info_.id) : 0;
    }

    DataChannel& create_channel(ConnRec& cr, uint32_t slot, Endpoint local, Endpoint remote,
                                uint8_t ctrl_side) {
        auto ag = agent(slot);
        DataChannel ch;
        ch.id = {cr.conn_id, cr.next_key++};
        ch.ctrl_side = ctrl_side;
        ch.owner_slot = slot;
        ch.tenant = ag->door->tenant;
        ch.shared = std::make_shared<ChannelShared>();
        ch.shared->read_buf = std::make_shared<RingBuffer>(cfg_.read_buf);
        ch.shared->write_buf = std::make_shared<RingBuffer>(cfg_.write_buf);
        ch.shared->local_ep = local;
        ch.shared->remote_ep = remote;
        ch.read_mr = fabric_.register_mr(info_.id, *ch.shared->read_buf).id;
        ch.write_mr = fabric_.register_mr(info_.id, *ch.shared->write_buf).id;
        ch.owner_handle = ag->next_handle++;
        ag->by_handle[ch.owner_handle] = ch.id;
        counters_.channels_created.fetch_add(1);
        counters_.channels_live.fetch_add(1);
        auto [it, ok] = channels_.emplace(ch.id, std::move(ch));
        return it->second;
    }

    // Acceptor side: listener lookup, responder channel, AcceptReady + resp.
    void handle_conn_req_remote(ConnRec& cr, uint8_t ring_side, const ControlMessage& m) {
        auto lit = listeners_.find(m.dst_ep);
        if (lit == listeners_.end()) {
            // not a listener; egress target?
            auto target = routes_.resolve(m.dst_ep.ip);
            if (target && target->kind == RouteKind::egress && egress_slot_) {
                accept_egress_pending(cr, ring_side, m);
                return;
            }
            refuse(cr, ring_side, m, Errc::conn_refused);
            return;
        }
        Listener& l = lit->second;
        if (l.pending >= l.backlog) {
            refuse(cr, ring_side, m, Errc::conn_refused);
            return;
        }
        auto ag = agent(l.slot);
        if (!ag) {
            refuse(cr, ring_side, m, Errc::conn_refused);
            return;
        }
        DataChannel& ch = create_channel(cr, l.slot, m.dst_ep, m.src_ep, ring_side);
        ch.peer_key = m.initiator_channel_key;
        ch.remote_read_mr = m.read_mr;
        ch.remote_cap = m.read_capacity;
        ch.remote_free = m.initial_credit;
        ch.open = true;
        ch.listener_ep = m.dst_ep;
        l.pending++;

        {
            std::lock_guard lk(ag->door->mu);
            ag->door->channels[ch.owner_handle] = ch.shared;
            ag->door->accept_queues[l.req_id].push_back({ch.owner_handle, ch.shared});
            WorkMessage r{};
            r.msg_type = MsgType::accept_ready;
            r.socket_id = l.req_id;
            r.channel_key = ch.id.key;
            r.src_ep = m.src_ep;
            r.dst_ep = m.dst_ep;
            r.payload_u32 = ch.owner_handle;
            if (ag->door->queues.cq.push(r)) counters_.cq_accept_ready.fetch_add(1);
        }
        ag->door->cv.notify_all();

        ControlMessage resp;
        resp.kind = CtrlKind::conn_resp;
        resp.src_ep = m.dst_ep;
        resp.dst_ep = m.src_ep;
        resp.initiator_channel_key = m.initiator_channel_key;
        resp.responder_channel_key = ch.id.key;
        resp.read_mr = ch.read_mr;
        resp.read_capacity = static_cast<uint32_t>(ch.shared->read_buf->capacity());
        resp.initial_credit = resp.read_capacity;
        send_ctrl(cr, ring_side, resp);
    }

    void accept_egress_pending(ConnRec& cr, uint8_t ring_side, const ControlMessage& m) {
        auto ag = agent(*egress_slot_);
        if (!ag) {
            refuse(cr, ring_side, m, Errc::conn_refused);
            return;
        }
        DataChannel& ch = create_channel(cr, *egress_slot_, m.dst_ep, m.src_ep, ring_side);
        ch.peer_key = m.initiator_channel_key;
        ch.remote_read_mr = m.read_mr;
        ch.remote_cap = m.read_capacity;
        ch.remote_free = m.initial_credit;
        ch.egress_pending = true;
        {
            std::lock_guard lk(ag->door->mu);
            ag->door->channels[ch.owner_handle] = ch.shared;
            ag->door->egress_queue.push_back({ch.owner_handle, ch.shared});
            WorkMessage r{};
            r.msg_type = MsgType::accept_ready;
            r.socket_id = 0;  // egress marker
            r.channel_key = ch.id.key;
            r.src_ep = m.src_ep;
            r.dst_ep = m.dst_ep;
            r.payload_u32 = ch.owner_handle;
            if (ag->door->queues.cq.push(r)) counters_.cq_accept_ready.fetch_add(1);
        }
        ag->door->cv.notify_all();
    }

    void refuse(ConnRec& cr, uint8_t ring_side, const ControlMessage& m, Errc reason) {
        ControlMessage r;
        r.kind = CtrlKind::refuse;
        r.src_ep = m.dst_ep;
        r.dst_ep = m.src_ep;
        r.initiator_channel_key = m.initiator_channel_key;
        r.reason = static_cast<uint16_t>(reason);
        send_ctrl(cr, ring_side, r);
    }

    // Gateway verdict on a pending egress channel, or a plain accept ack.
    void handle_client_connect_resp(uint32_t slot, const WorkMessage& m) {
        DataChannel* ch = channel_of(slot, m.socket_id);
        if (!ch) return;
        if (ch->egress_pending) {
            auto cit = conns_.find(ch->id.conn);
            if (cit == conns_.end()) return;
            ConnRec& cr = cit->second;
            if (m.payload_u32 == 0) {
                ch->egress_pending = false;
                ch->open = true;
                ControlMessage resp;
                resp.kind = CtrlKind::conn_resp;
                resp.src_ep = ch->shared->local_ep;
                resp.dst_ep = ch->shared->remote_ep;
                resp.initiator_channel_key = ch->peer_key;
                resp.responder_channel_key = ch->id.key;
                resp.read_mr = ch->read_mr;
                resp.read_capacity = static_cast<uint32_t>(ch->shared->read_buf->capacity());
                resp.initial_credit = resp.read_capacity;
                send_ctrl(cr, ch->ctrl_side, resp);
            } else {
                ControlMessage r;
                r.kind = CtrlKind::refuse;
                r.src_ep = ch->shared->local_ep;
                r.dst_ep = ch->shared->remote_ep;
                r.initiator_channel_key = ch->peer_key;
                r.reason = static_cast<uint16_t>(Errc::conn_refused);
                send_ctrl(cr, ch->ctrl_side, r);
                destroy_channel(ch->id);
            }
            return;
        }
        // accept ack: release one backlog slot
        auto lit = listeners_.find(ch->listener_ep);
        if (lit != listeners_.end() && lit->second.pending > 0) lit->second.pending--;
    }

    // Initiator receives the responder's ring info; the channel opens.
    void handle_conn_resp(ConnRec& cr, const ControlMessage& m) {
        auto it = channels_.find(ChanId{cr.conn_id, m.initiator_channel_key});
        if (it == channels_.end()) {
            counters_.protocol_errors.fetch_add(1);
            return;
        }
        DataChannel& ch = it->second;
        ch.peer_key = m.responder_channel_key;
        ch.remote_read_mr = m.read_mr;
        ch.remote_cap = m.read_capacity;
        ch.remote_free = m.initial_credit;
        ch.open = true;
        auto ag = agent(ch.owner_slot);
        if (!ag) return;
        {
            std::lock_guard lk(ag->door->mu);
            ag->door->channels[ch.owner_handle] = ch.shared;
            ag->door->connect_results[ch.initiator_req] = {Errc::ok, ch.owner_handle, ch.shared};
            WorkMessage r{};
            r.msg_type = MsgType::accept_ready;
            r.socket_id = ch.initiator_req;
            r.channel_key = ch.id.key;
            r.payload_u32 = ch.owner_handle;
            if (ag->door->queues.cq.push(r)) counters_.cq_accept_ready.fetch_add(1);
        }
        ag->door->cv.notify_all();
        pump_channel(ch);
    }

    void handle_refuse(ConnRec& cr, const ControlMessage& m) {
        auto it = channels_.find(ChanId{cr.conn_id, m.initiator_channel_key});
        if (it == channels_.end()) return;
        DataChannel& ch = it->second;
        const Errc reason = static_cast<Errc>(m.reason);
        fail_connect(ch.owner_slot, ch.initiator_req,
                     reason == Errc::ok ? Errc::conn_refused : reason);
        destroy_channel(it->first);
    }

    void handle_close_req(uint32_t slot, const WorkMessage& m) {
        DataChannel* ch = channel_of(slot, m.socket_id);
        if (!ch) return;
        ch->local_closed = true;
        ch->shared->local_closed.store(true);
        pump_channel(*ch);  // drain, then Close goes out
    }

    // ---- data pump ---------------------------------------------------------

    // Moves min(pending, credits) bytes per round as one logical fabric
    // write; loops until the write buffer is drained or credits run out, so
    // no further WriteReq is needed while data keeps arriving.
    void pump_channel(DataChannel& ch) {
        if (!ch.open) return;
        RingBuffer& wb = *ch.shared->write_buf;
        for (;;) {
            const size_t avail = wb.available();
            if (avail == 0) break;
            if (ch.remote_free == 0) {
                counters_.zero_credit_stalls.fetch_add(1);
                break;
            }
            size_t n = std::min<uint64_t>(avail, ch.remote_free);
            auto bit = buckets_.find(ch.tenant);
            if (bit != buckets_.end() && bit->second.limited()) {
                n = static_cast<size_t>(bit->second.grant(n, now_ns()));
                if (n == 0) {
                    if (!ch.rate_stalled) {
                        ch.rate_stalled = true;
                        stalled_.insert(ch.id);
                        pending_gauge_.fetch_add(1);
                    }
                    break;
                }
            }
            if (ch.remote_free == 0) counters_.sends_with_zero_credit.fetch_add(1);
            std::vector<uint8_t> buf(n);
            wb.consume_into(buf);  // advances the write head
            Errc e = wire_write(ch.id.conn, ch.remote_read_mr, ch.remote_cap, ch.remote_shadow,
                                buf, ch.peer_key);
            if (e != Errc::ok) {
                fail_channel(ch.id, e);
                return;
            }
            ch.remote_shadow += n;
            ch.remote_free -= n;
            ch.bytes_tx += n;
            counters_.bytes_tx.fetch_add(n);
            counters_.data_msgs_sent.fetch_add(1);
        }
        if (ch.local_closed && wb.available() == 0 && !ch.close_sent) {
            auto cit = conns_.find(ch.id.conn);
            if (cit != conns_.end()) {
                ControlMessage cm;
                cm.kind = CtrlKind::close;
                cm.initiator_channel_key = ch.peer_key;
                cm.responder_channel_key = ch.id.key;
                send_ctrl(cit->second, ch.ctrl_side, cm);
            }
            ch.close_sent = true;
            maybe_destroy(ch.id);
        }
    }

    bool repump_stalled() {
        if (stalled_.empty()) return false;
        bool any = false;
        auto ids = stalled_;
        for (const ChanId& cid : ids) {
            auto it = channels_.find(cid);
            if (it == channels_.end()) {
                stalled_.erase(cid);
                pending_gauge_.fetch_sub(1);
                continue;
            }
            it->second.rate_stalled = false;
            stalled_.erase(cid);
            pending_gauge_.fetch_sub(1);
            const uint64_t before = it->second.bytes_tx;
            pump_channel(it->second);
            any |= it->second.bytes_tx != before;
        }
        return any;
    }

    // ---- receiver-side credits ----------------------------------------------

    // Lazy notification: only when the freed run exceeds half the ring.
    void post_read_credit(DataChannel& ch, uint64_t freed) {
        ch.freed_since_notify += freed;
        const size_t cap = ch.shared->read_buf->capacity();
        if (ch.freed_since_notify > cap / 2) {
            auto cit = conns_.find(ch.id.conn);
            if (cit != conns_.end()) {
                ControlMessage cm;
                cm.kind = CtrlKind::credit;
                cm.initiator_channel_key = ch.peer_key;
                cm.responder_channel_key = ch.id.key;
                cm.initial_credit = static_cast<uint32_t>(ch.freed_since_notify);
                send_ctrl(cit->second, ch.ctrl_side, cm);
                counters_.credit_msgs_sent.fetch_add(1);
                uint64_t prev = counters_.credit_min_amount.load();
                while (ch.freed_since_notify < prev &&
                       !counters_.credit_min_amount.compare_exchange_weak(prev,
                                                                          ch.freed_since_notify)) {
                }
                ch.freed_since_notify = 0;
            }
        }
    }

    // ---- client notifications ------------------------------------------------

    void push_read_ready(DataChannel& ch) {
        if (ch.shared->read_ready_pending.exchange(true)) {
            counters_.read_ready_coalesced.fetch_add(1);
            auto ag = agent(ch.owner_slot);
            if (ag) ag->door->cv.notify_all();
            return;
        }
        notify_client(ch, MsgType::read_ready, 0);
    }

    void notify_client(DataChannel& ch, MsgType t, uint32_t payload) {
        auto ag = agent(ch.owner_slot);
        if (!ag) return;
        {
            std::lock_guard lk(ag->door->mu);
            WorkMessage r{};
            r.msg_type = t;
            r.socket_id = ch.owner_handle;
            r.channel_key = ch.id.key;
            r.payload_u32 = payload;
            if (ag->door->queues.cq.push(r)) {
                if (t == MsgType::read_ready) counters_.cq_read_ready.fetch_add(1);
                else if (t == MsgType::close_req) counters_.cq_close.fetch_add(1);
                else if (t == MsgType::error) counters_.cq_error.fetch_add(1);
            } else if (t == MsgType::read_ready) {
                // dropped signal: hand the coalescing token back
                ch.shared->read_ready_pending.store(false);
            }
        }
        ag->door->cv.notify_all();
    }

    void fail_channel(const ChanId& cid, Errc err) {
        auto it = channels_.find(cid);
        if (it == channels_.end()) return;
        DataChannel& ch = it->second;
        ch.shared->error.store(static_cast<uint16_t>(err));
        ch.shared->remote_closed.store(true);
        if (!ch.open && ch.initiator_req)
            fail_connect(ch.owner_slot, ch.initiator_req, err);
        else
            notify_client(ch, MsgType::error, static_cast<uint32_t>(err));
        destroy_channel(cid);
    }

    void maybe_destroy(const ChanId& cid) {
        auto it = channels_.find(cid);
        if (it == channels_.end()) return;
        if (it->second.close_sent && it->second.remote_closed) destroy_channel(cid);
    }

    void destroy_channel(const ChanId& cid) {
        auto it = channels_.find(cid);
        if (it == channels_.end()) return;
        DataChannel& ch = it->second;
        if (ch.rate_stalled) {
            stalled_.erase(cid);
            pending_gauge_.fetch_sub(1);
        }
        auto ag = agent(ch.owner_slot);
        if (ag) ag->by_handle.erase(ch.owner_handle);
        counters_.channels_live.fetch_sub(1);
        channels_.erase(it);
    }

    // ---- control plane -----------------------------------------------------

    bool process_watch() {
        bool any = false;
        while (auto e = watch_->poll()) {
            any = true;
            switch (e->kind) {
                case EventKind::node_joined:
                    if (e->node.id != info_.id)
                        routes_.set(e->node.pod_cidr, RouteTarget{RouteKind::connection, e->node.id});
                    cs_.nodes.push_back(e->node);
                    break;
                case EventKind::node_left:
                    routes_.erase(e->node.pod_cidr);
                    std::erase_if(cs_.nodes, [&](const NodeInfo& n) { return n.id == e->node.id; });
                    break;
                case EventKind::pod_added:
                    cs_.pods.push_back(e->pod);
                    break;
                case EventKind::pod_removed:
                    std::erase_if(cs_.pods, [&](const PodInfo& p) { return p.name == e->pod.name; });
                    break;
                case EventKind::service_changed:
                    cs_ = refresh_keeping_config();
                    rebuild_service_tables();
                    break;
                case EventKind::policy_changed:
                    cs_ = refresh_keeping_config();
                    rebuild_policies();
                    break;
            }
        }
        return any;
    }

    ClusterState refresh_keeping_config() {
        ClusterState fresh = cp_.snapshot();
        fresh.config = cfg_;
        return fresh;
    }

    void rebuild_service_tables() {
        for (const auto& s : cs_.services) services_.set_members(s.ep, s.members);
    }

    void rebuild_policies() {
        policies_.clear();
        for (const auto& r : cs_.policies) policies_.add(r);
    }

    // ---- members -------------------------------------------------------------

    NodeInfo info_;
    ClusterState cs_;
    std::shared_ptr<WatchStream> watch_;
    SimFabric& fabric_;
    ControlPlane& cp_;
    ClusterConfig cfg_;

    std::jthread thread_;
    ReadinessBitmap bitmap_;
    WakeGate gate_;
    ServiceCounters counters_;
    std::atomic<uint64_t> work_epoch_{0};
    std::atomic<int64_t> pending_gauge_{0};

    std::mutex agents_mu_;
    std::map<uint32_t, std::shared_ptr<ClientAgent>> agents_;
    uint32_t next_slot_ = 0;
    std::optional<uint32_t> egress_slot_;

    std::map<uint64_t, ConnRec> conns_;
    std::map<NodeId, uint64_t> conn_by_peer_;
    std::map<MrId, std::pair<uint64_t, uint8_t>> ctrl_mr_index_;
    std::map<ChanId, DataChannel> channels_;
    std::set<ChanId> stalled_;
    std::map<Endpoint, Listener> listeners_;

    RouteTable routes_;
    ClusterEPTable services_;
    IngressGatewayTable ingress_;
    PolicyTable policies_;
    std::map<TenantId, TokenBucket> buckets_;
};

}  // namespace tsor
