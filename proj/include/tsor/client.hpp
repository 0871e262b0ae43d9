#pragma once

#include <chrono>
#include <memory>
#include <mutex>
#include <span>
#include <thread>

#include "tsor/service.hpp"

namespace tsor {

using Deadline = std::chrono::steady_clock::time_point;

inline Deadline deadline_in(std::chrono::nanoseconds d) {
    return std::chrono::steady_clock::now() + d;
}
inline Deadline deadline_never() { return Deadline::max(); }

class TsorSocket;

// One client per pod (or gateway). Owns the door shared with the node
// service and hands out sockets. Socket data paths go straight to the shared
// rings; control paths block on the door's condition variable.
class ClientSession {
public:
    struct Stats {
        std::atomic<uint64_t> write_reqs{0};
        std::atomic<uint64_t> empty_to_nonempty{0};
        std::atomic<uint64_t> credit_hints{0};
        std::atomic<uint64_t> sq_full_retries{0};
    };

    static std::unique_ptr<ClientSession> open(ServiceNode& svc, TenantId tenant, uint32_t pod_ip,
                                               bool privileged = false) {
        auto r = svc.register_client(tenant, pod_ip, privileged);
        if (r.err != Errc::ok) return nullptr;
        return std::unique_ptr<ClientSession>(new ClientSession(r.door, tenant, pod_ip));
    }

    ClientDoor& door() { return *door_; }
    TenantId tenant() const { return tenant_; }
    uint32_t pod_ip() const { return pod_ip_; }
    Stats& stats() { return stats_; }

    std::unique_ptr<TsorSocket> socket();

    // Blocks until the SQ takes the message (QueueFull means backpressure,
    // not loss). Serializes producers: one session may serve many sockets.
    void submit(const WorkMessage& m) {
        for (;;) {
            {
                std::lock_guard lk(sq_mu_);
                if (door_->submit(m)) return;
            }
            stats_.sq_full_retries.fetch_add(1);
            std::this_thread::sleep_for(std::chrono::microseconds(20));
        }
    }

    template <class Pred>
    bool wait_on(Deadline deadline, Pred pred) {
        std::unique_lock lk(door_->mu);
        for (;;) {
            door_->drain_cq_locked();
            if (pred()) return true;
            if (std::chrono::steady_clock::now() >= deadline) {
                door_->drain_cq_locked();
                return pred();
            }
            door_->cv.wait_until(lk, deadline);
        }
    }

    uint32_t next_req_id() { return kReqBit | req_counter_.fetch_add(1); }

    uint16_t next_ephemeral_port() {
        uint16_t p = eph_port_.fetch_add(1);
        while (p < 32768 || p > 60999) {
            eph_port_.store(32768);
            p = eph_port_.fetch_add(1);
        }
        return p;
    }

    // Egress gateway hooks: take a pending dial, then report the verdict.
    struct EgressPendingResult {
        Errc err = Errc::ok;
        uint32_t handle = 0;
        std::shared_ptr<ChannelShared> shared;
    };

    EgressPendingResult accept_egress(Deadline deadline) {
        AcceptedChannel got{};
        bool ok = wait_on(deadline, [&] {
            std::deque<AcceptedChannel>& q = door_->egress_queue;
            if (q.empty()) return false;
            got = q.front();
            q.pop_front();
            return true;
        });
        if (!ok) return {Errc::timeout, 0, nullptr};
        return {Errc::ok, got.handle, got.shared};
    }

    void confirm_egress(uint32_t handle, Errc verdict) {
        WorkMessage m{};
        m.msg_type = MsgType::connect_resp;
        m.socket_id = handle;
        m.payload_u32 = static_cast<uint32_t>(verdict);
        submit(m);
    }

    std::unique_ptr<TsorSocket> adopt(uint32_t handle, std::shared_ptr<ChannelShared> shared);

private:
    static constexpr uint32_t kReqBit = 0x8000'0000u;

    ClientSession(std::shared_ptr<ClientDoor> door, TenantId tenant, uint32_t pod_ip)
        : door_(std::move(door)), tenant_(tenant), pod_ip_(pod_ip) {}

    std::shared_ptr<ClientDoor> door_;
    TenantId tenant_;
    uint32_t pod_ip_;
    std::mutex sq_mu_;
    std::atomic<uint32_t> req_counter_{1};
    std::atomic<uint16_t> eph_port_{32768};
    Stats stats_;
};

enum class SockState : uint8_t { fresh, listening, connecting, open, half_closed, closed };

struct IoResult {
    Errc err = Errc::ok;
    size_t n = 0;
    bool eos = false;
};

// Socket-style handle: control primitives block with deadlines, data
// primitives run against the shared rings. One reader and one writer thread
// per socket at most.
class TsorSocket {
public:
    explicit TsorSocket(ClientSession& cli) : cli_(&cli) {}

    SockState state() const { return state_; }
    const Endpoint& local_ep() const { return local_; }
    const Endpoint& remote_ep() const { return remote_; }
    uint32_t handle() const { return handle_; }

    Errc connect(Endpoint dst, Deadline deadline) {
        if (state_ != SockState::fresh) return Errc::invalid_argument;
        state_ = SockState::connecting;
        local_ = Endpoint{cli_->tenant(), cli_->pod_ip(), cli_->next_ephemeral_port()};
        const uint32_t req = cli_->next_req_id();
        WorkMessage m{};
        m.msg_type = MsgType::connect_req;
        m.socket_id = req;
        m.src_ep = local_;
        m.dst_ep = dst;
        cli_->submit(m);

        ConnectOutcome out{};
        bool got = cli_->wait_on(deadline, [&] {
            auto& results = cli_->door().connect_results;
            auto it = results.find(req);
            if (it == results.end()) return false;
            out = it->second;
            results.erase(it);
            return true;
        });
        if (!got) {
            state_ = SockState::closed;
            return Errc::timeout;
        }
        if (out.err != Errc::ok) {
            state_ = SockState::closed;
            return out.err;
        }
        handle_ = out.handle;
        ch_ = out.shared;
        remote_ = ch_->remote_ep;
        state_ = SockState::open;
        return Errc::ok;
    }

    Errc listen(Endpoint local, uint32_t backlog) {
        if (state_ != SockState::fresh) return Errc::invalid_argument;
        if (local.ip != cli_->pod_ip() || local.tenant != cli_->tenant())
            return Errc::invalid_argument;
        const uint32_t req = cli_->next_req_id();
        WorkMessage m{};
        m.msg_type = MsgType::connect_req;  // dst zero == listen registration
        m.socket_id = req;
        m.src_ep = local;
        m.payload_u32 = backlog;
        cli_->submit(m);

        Errc err = Errc::timeout;
        cli_->wait_on(deadline_in(std::chrono::seconds(5)), [&] {
            auto& results = cli_->door().listen_results;
            auto it = results.find(req);
            if (it == results.end()) return false;
            err = it->second;
            results.erase(it);
            return true;
        });
        if (err != Errc::ok) return err;
        listener_req_ = req;
        local_ = local;
        state_ = SockState::listening;
        return Errc::ok;
    }

    struct AcceptResult {
        Errc err = Errc::ok;
        std::unique_ptr<TsorSocket> sock;
    };

    AcceptResult accept(Deadline deadline) {
        if (state_ != SockState::listening) return {Errc::invalid_argument, nullptr};
        AcceptedChannel got{};
        bool ok = cli_->wait_on(deadline, [&] {
            auto& qs = cli_->door().accept_queues;
            auto it = qs.find(listener_req_);
            if (it == qs.end() || it->second.empty()) return false;
            got = it->second.front();
            it->second.pop_front();
            return true;
        });
        if (!ok) return {Errc::timeout, nullptr};
        // release the backlog slot
        WorkMessage ack{};
        ack.msg_type = MsgType::connect_resp;
        ack.socket_id = got.handle;
        cli_->submit(ack);
        return {Errc::ok, cli_->adopt(got.handle, got.shared)};
    }

    // Accepts min(len, buffer space) bytes; 0 means the write buffer is
    // full. Signals the service only on the empty->nonempty transition.
    IoResult write(std::span<const uint8_t> data) {
        if (state_ != SockState::open && state_ != SockState::half_closed)
            return {Errc::connection_closed, 0, false};
        if (local_closed_) return {Errc::connection_closed, 0, false};
        if (ch_->error.load()) return {static_cast<Errc>(ch_->error.load()), 0, false};
        RingBuffer& wb = *ch_->write_buf;
        const size_t n = wb.produce(data);
        if (n > 0 && wb.tail() - wb.head() == n) {
            cli_->stats().empty_to_nonempty.fetch_add(1);
            WorkMessage m{};
            m.msg_type = MsgType::write_req;
            m.socket_id = handle_;
            cli_->submit(m);
            cli_->stats().write_reqs.fetch_add(1);
        }
        return {Errc::ok, n, false};
    }

    // Convenience loop for bulk senders; polls for buffer space.
    IoResult write_all(std::span<const uint8_t> data, Deadline deadline) {
        size_t sent = 0;
        while (sent < data.size()) {
            IoResult r = write(data.subspan(sent));
            if (r.err != Errc::ok) return {r.err, sent, false};
            sent += r.n;
            if (sent == data.size()) break;
            if (std::chrono::steady_clock::now() >= deadline) return {Errc::timeout, sent, false};
            if (r.n == 0) std::this_thread::sleep_for(std::chrono::microseconds(20));
        }
        return {Errc::ok, sent, false};
    }

    IoResult read(std::span<uint8_t> out, Deadline deadline) {
        if (state_ != SockState::open && state_ != SockState::half_closed)
            return {Errc::connection_closed, 0, false};
        RingBuffer& rb = *ch_->read_buf;
        for (;;) {
            const size_t n = rb.consume_into(out);
            if (n > 0) {
                cli_->stats().credit_hints.fetch_add(1);
                WorkMessage m{};
                m.msg_type = MsgType::credit_hint;
                m.socket_id = handle_;
                m.payload_u32 = static_cast<uint32_t>(n);
                cli_->submit(m);
                return {Errc::ok, n, false};
            }
            if (ch_->remote_closed.load()) {
                if (rb.available() > 0) continue;  // drain first
                const uint16_t e = ch_->error.load();
                if (e != 0 && static_cast<Errc>(e) != Errc::connection_closed)
                    return {static_cast<Errc>(e), 0, false};
                return {Errc::ok, 0, true};
            }
            if (std::chrono::steady_clock::now() >= deadline)
                return {Errc::timeout, 0, false};  // poll-style read, no blocking
            bool got = cli_->wait_on(deadline, [&] {
                return rb.available() > 0 || ch_->remote_closed.load() || ch_->error.load() != 0;
            });
            if (!got) return {Errc::timeout, 0, false};
        }
    }

    IoResult read_exact(std::span<uint8_t> out, Deadline deadline) {
        size_t got = 0;
        while (got < out.size()) {
            IoResult r = read(out.subspan(got), deadline);
            if (r.err != Errc::ok || r.eos) return {r.err, got, r.eos};
            got += r.n;
        }
        return {Errc::ok, got, false};
    }

    // Close this direction; reads stay valid until end-of-stream.
    Errc shutdown_write() {
        if (state_ != SockState::open && state_ != SockState::half_closed)
            return Errc::connection_closed;
        if (local_closed_) return Errc::ok;
        local_closed_ = true;
        ch_->local_closed.store(true);
        WorkMessage m{};
        m.msg_type = MsgType::close_req;
        m.socket_id = handle_;
        cli_->submit(m);
        state_ = SockState::half_closed;
        return Errc::ok;
    }

    void close() {
        if (state_ == SockState::open || state_ == SockState::half_closed) shutdown_write();
        state_ = SockState::closed;
    }

    std::shared_ptr<ChannelShared> channel() { return ch_; }

private:
    friend class ClientSession;

    ClientSession* cli_;
    SockState state_ = SockState::fresh;
    uint32_t handle_ = 0;
    uint32_t listener_req_ = 0;
    std::shared_ptr<ChannelShared> ch_;
    Endpoint local_{};
    Endpoint remote_{};
    bool local_closed_ = false;
};

inline std::unique_ptr<TsorSocket> ClientSession::socket() {
    return std::make_unique<TsorSocket>(*this);
}

inline std::unique_ptr<TsorSocket> ClientSession::adopt(uint32_t handle,
                                                        std::shared_ptr<ChannelShared> shared) {
    auto s = std::make_unique<TsorSocket>(*this);
    s->handle_ = handle;
    s->ch_ = std::move(shared);
    s->local_ = s->ch_->local_ep;
    s->remote_ = s->ch_->remote_ep;
    s->state_ = SockState::open;
    return s;
}

}  // namespace tsor
