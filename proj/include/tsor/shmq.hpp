#pragma once

#include <array>
#include <atomic>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <optional>
#include <semaphore>
#include <stdexcept>
#include <vector>

#include "tsor/types.hpp"
#include "tsor/wire.hpp"

namespace tsor {

enum class MsgType : uint32_t {
    connect_req = 1,
    connect_resp = 2,
    write_req = 3,
    read_ready = 4,
    accept_ready = 5,
    credit_hint = 6,
    close_req = 7,
    error = 8,
};

inline const char* msg_type_name(MsgType t) {
    switch (t) {
        case MsgType::connect_req: return "ConnectReq";
        case MsgType::connect_resp: return "ConnectResp";
        case MsgType::write_req: return "WriteReq";
        case MsgType::read_ready: return "ReadReady";
        case MsgType::accept_ready: return "AcceptReady";
        case MsgType::credit_hint: return "CreditHint";
        case MsgType::close_req: return "CloseReq";
        case MsgType::error: return "Error";
    }
    return "?";
}

// Fixed 64-byte record exchanged on SQ/CQ. Unused fields stay zero.
struct WorkMessage {
    MsgType msg_type = MsgType::error;
    uint32_t socket_id = 0;   // client-scoped handle
    ChannelKey channel_key = 0;
    Endpoint src_ep{};
    Endpoint dst_ep{};
    uint32_t payload_u32 = 0;  // credit amount, error code, or backlog hint

    static constexpr size_t kWireSize = 64;

    // Little-endian fields in declared order; trailing bytes zero.
    void encode(uint8_t* out) const {
        std::memset(out, 0, kWireSize);
        wire::put_u32(out + 0, static_cast<uint32_t>(msg_type));
        wire::put_u32(out + 4, socket_id);
        wire::put_u32(out + 8, channel_key);
        wire::put_u32(out + 12, src_ep.tenant);
        wire::put_u32(out + 16, src_ep.ip);
        wire::put_u16(out + 20, src_ep.port);
        wire::put_u32(out + 24, dst_ep.tenant);
        wire::put_u32(out + 28, dst_ep.ip);
        wire::put_u16(out + 32, dst_ep.port);
        wire::put_u32(out + 36, payload_u32);
    }

    static WorkMessage decode(const uint8_t* in) {
        WorkMessage m;
        m.msg_type = static_cast<MsgType>(wire::get_u32(in + 0));
        m.socket_id = wire::get_u32(in + 4);
        m.channel_key = wire::get_u32(in + 8);
        m.src_ep = {wire::get_u32(in + 12), wire::get_u32(in + 16), wire::get_u16(in + 20)};
        m.dst_ep = {wire::get_u32(in + 24), wire::get_u32(in + 28), wire::get_u16(in + 32)};
        m.payload_u32 = wire::get_u32(in + 36);
        return m;
    }
};

// Bounded SPSC FIFO of WorkMessage. Push on a full queue fails without
// blocking; backpressure is the caller's problem.
class WorkQueue {
public:
    explicit WorkQueue(size_t depth) : mask_(depth - 1), slots_(depth) {
        if (depth == 0 || (depth & (depth - 1)) != 0)
            throw std::invalid_argument("queue depth must be a power of two");
    }

    bool push(const WorkMessage& m) {
        const uint64_t tail = tail_.load(std::memory_order_relaxed);
        if (tail - head_.load(std::memory_order_acquire) == slots_.size()) return false;
        slots_[tail & mask_] = m;
        tail_.store(tail + 1, std::memory_order_release);
        return true;
    }

    std::optional<WorkMessage> pop() {
        const uint64_t head = head_.load(std::memory_order_relaxed);
        if (head == tail_.load(std::memory_order_acquire)) return std::nullopt;
        WorkMessage m = slots_[head & mask_];
        head_.store(head + 1, std::memory_order_release);
        return m;
    }

    bool empty() const { return head_.load() == tail_.load(); }
    size_t size() const { return static_cast<size_t>(tail_.load() - head_.load()); }

private:
    const size_t mask_;
    std::vector<WorkMessage> slots_;
    alignas(64) std::atomic<uint64_t> head_{0};
    alignas(64) std::atomic<uint64_t> tail_{0};
};

// SQ client->service, CQ service->client.
struct WorkQueuePair {
    WorkQueue sq;
    WorkQueue cq;

    explicit WorkQueuePair(size_t depth) : sq(depth), cq(depth) {}
};

// Two-layer readiness index over up to 4096 client slots. Many setters, one
// scanner. Transiently l1 may lag l2; scan reconciles.
class ReadinessBitmap {
public:
    static constexpr uint32_t kMaxSlots = 4096;

    void set(uint32_t slot) {
        if (slot >= kMaxSlots) throw std::out_of_range("client slot out of range");
        l2_[slot >> 6].fetch_or(1ull << (slot & 63));
        l1_.fetch_or(1ull << (slot >> 6));
    }

    bool any() const { return l1_.load() != 0; }

    uint64_t l1() const { return l1_.load(); }
    uint64_t l2(size_t word) const { return l2_[word].load(); }

    // Slots set since the previous scan, ascending; clears both layers.
    std::vector<uint32_t> scan() {
        std::vector<uint32_t> out;
        uint64_t top = l1_.exchange(0);
        while (top) {
            const int i = std::countr_zero(top);
            top &= top - 1;
            uint64_t word = l2_[i].exchange(0);
            while (word) {
                const int j = std::countr_zero(word);
                word &= word - 1;
                out.push_back(static_cast<uint32_t>(i * 64 + j));
            }
        }
        return out;
    }

private:
    std::atomic<uint64_t> l1_{0};
    std::array<std::atomic<uint64_t>, 64> l2_{};
};

// Binary-semaphore wake event owned by one sleeper (the service loop).
// Posters publish their readiness state first, then post; the sleeper arms,
// re-checks readiness, then sleeps. exchange() keeps duplicate posts to one
// wake.
class WakeGate {
public:
    // Poster side: publish your readiness state, then notify.
    void notify() {
        if (sleeping_.exchange(false)) {
            wakes_.fetch_add(1);
            sem_.release();
        }
    }

    void arm() { sleeping_.store(true); }

    // After arm(): caller found work and will not sleep. Drains a racing post.
    void cancel_sleep() {
        if (!sleeping_.exchange(false)) sem_.try_acquire();
    }

    void sleep() { sem_.acquire(); }

    // Timed sleep; false on timeout. Cleans up the armed flag on timeout.
    bool sleep_for(std::chrono::nanoseconds d) {
        if (sem_.try_acquire_for(d)) return true;
        if (!sleeping_.exchange(false)) sem_.try_acquire();
        return false;
    }

    uint64_t wakes() const { return wakes_.load(); }

private:
    std::atomic<bool> sleeping_{false};
    std::atomic<uint64_t> wakes_{0};
    std::binary_semaphore sem_{0};
};

struct WaitCounters {
    std::atomic<uint64_t> poll_iters{0};
    std::atomic<uint64_t> sleeps{0};
};

// Busy-polls up to spin_budget iterations, then blocks on the gate. Returns
// ready slots (possibly empty when extra_ready fired or a timed sleep ran
// out). Never returns empty-handed while everything is idle and no wake or
// timeout occurred.
template <class ExtraReady>
std::vector<uint32_t> service_wait(ReadinessBitmap& bitmap, WakeGate& gate, WaitCounters& stats,
                                   uint64_t spin_budget, ExtraReady&& extra_ready,
                                   std::optional<std::chrono::nanoseconds> max_sleep = std::nullopt) {
    for (;;) {
        for (uint64_t spin = 0; spin < spin_budget; ++spin) {
            if (bitmap.any()) return bitmap.scan();
            if (extra_ready()) return {};
            stats.poll_iters.fetch_add(1, std::memory_order_relaxed);
        }
        gate.arm();
        if (bitmap.any() || extra_ready()) {
            gate.cancel_sleep();
            continue;
        }
        stats.sleeps.fetch_add(1);
        if (max_sleep) {
            if (!gate.sleep_for(*max_sleep)) return {};
        } else {
            gate.sleep();
        }
    }
}

}  // namespace tsor
