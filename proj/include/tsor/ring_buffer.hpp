#pragma once

#include <atomic>
#include <cassert>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <vector>

namespace tsor {

// One or two physical slices covering a logical range of a ring.
struct RingRegion {
    size_t offset = 0;
    size_t len = 0;
};

struct RingRegions {
    RingRegion first;
    RingRegion second;  // len == 0 unless the range wraps

    int count() const { return second.len ? 2 : 1; }
};

// Fixed-capacity SPSC circular byte buffer. Doubles as socket buffer and as
// the storage a remote fabric write lands in. Head/tail are free-running
// counters reduced by mask, so full/empty is unambiguous without losing a
// slot. Safe for exactly one producer thread and one consumer thread.
//
// Index loads/stores are seq_cst: the empty->nonempty signal protocol reads
// the opposite index right after publishing its own, and needs a total order
// to avoid a missed-signal stall.
class RingBuffer {
public:
    explicit RingBuffer(size_t capacity) : capacity_(capacity), mask_(capacity - 1) {
        if (capacity == 0 || (capacity & (capacity - 1)) != 0)
            throw std::invalid_argument("ring capacity must be a power of two");
        storage_.resize(capacity);
    }

    RingBuffer(const RingBuffer&) = delete;
    RingBuffer& operator=(const RingBuffer&) = delete;

    size_t capacity() const { return capacity_; }
    uint64_t head() const { return head_.load(); }
    uint64_t tail() const { return tail_.load(); }
    size_t available() const {
        return static_cast<size_t>(tail_.load() - head_.load());
    }
    size_t free_space() const { return capacity_ - available(); }

    // Producer side. Writes min(data.size(), free_space) bytes at tail.
    size_t produce(std::span<const uint8_t> data) {
        const uint64_t tail = tail_.load();
        const size_t n = std::min(data.size(), capacity_ - static_cast<size_t>(tail - head_.load()));
        if (n == 0) return 0;
        copy_in(tail, data.first(n));
        tail_.store(tail + n);
        return n;
    }

    // Consumer side. Returns up to max oldest bytes and advances head.
    std::vector<uint8_t> consume(size_t max) {
        std::vector<uint8_t> out(max);
        out.resize(consume_into(out));
        return out;
    }

    size_t consume_into(std::span<uint8_t> out) {
        const uint64_t head = head_.load();
        const size_t n = std::min(out.size(), static_cast<size_t>(tail_.load() - head));
        if (n == 0) return 0;
        const RingRegions rs = regions(head, n);
        std::memcpy(out.data(), storage_.data() + rs.first.offset, rs.first.len);
        if (rs.second.len)
            std::memcpy(out.data() + rs.first.len, storage_.data() + rs.second.offset, rs.second.len);
        head_.store(head + n);
        return n;
    }

    // Physical slice(s) covering [from, from+len) in ring order.
    static RingRegions contiguous_regions(size_t capacity, uint64_t from, size_t len) {
        if (len > capacity) throw std::out_of_range("region longer than ring capacity");
        RingRegions rs;
        const size_t off = static_cast<size_t>(from) & (capacity - 1);
        rs.first.offset = off;
        rs.first.len = std::min(len, capacity - off);
        if (len > rs.first.len) {
            rs.second.offset = 0;
            rs.second.len = len - rs.first.len;
        }
        return rs;
    }

    RingRegions regions(uint64_t from, size_t len) const {
        return contiguous_regions(capacity_, from, len);
    }

    // Raw storage plus index steps, for the roles where one side of the
    // buffer is driven by the fabric instead of a local producer/consumer.
    uint8_t* data() { return storage_.data(); }
    const uint8_t* data() const { return storage_.data(); }

    void advance_head(size_t n) {
        assert(n <= available());
        head_.store(head_.load() + n);
    }

    void advance_tail(size_t n) {
        assert(n <= free_space());
        tail_.store(tail_.load() + n);
    }

    // Remote-writer cursor: logical position the next fabric write must land
    // at (tail plus bytes written but not yet published by advance_tail).
    // Single writer: the peer connection's service thread.
    uint64_t remote_cursor() const { return remote_cursor_.load(); }

    // Validates a remote write against unconsumed data; advances the cursor
    // on success. Returns false on an overwrite attempt.
    bool remote_write_check(size_t offset, size_t len) {
        const uint64_t cur = remote_cursor_.load();
        if (len > capacity_ || offset != (static_cast<size_t>(cur) & mask_)) return false;
        if (cur + len - head_.load() > capacity_) return false;
        remote_cursor_.store(cur + len);
        return true;
    }

private:
    void copy_in(uint64_t at, std::span<const uint8_t> data) {
        const RingRegions rs = regions(at, data.size());
        std::memcpy(storage_.data() + rs.first.offset, data.data(), rs.first.len);
        if (rs.second.len)
            std::memcpy(storage_.data() + rs.second.offset, data.data() + rs.first.len, rs.second.len);
    }

    const size_t capacity_;
    const size_t mask_;
    std::vector<uint8_t> storage_;
    alignas(64) std::atomic<uint64_t> head_{0};
    alignas(64) std::atomic<uint64_t> tail_{0};
    alignas(64) std::atomic<uint64_t> remote_cursor_{0};
};

}  // namespace tsor
