#pragma once

#include <atomic>
#include <cstdint>

#include "tsor/shmq.hpp"

namespace tsor {

// Per-node protocol counters. The first group is invariant under thread
// scheduling for a quiesced workload; the second depends on timing and is
// reported outside the deterministic section.
struct ServiceCounters {
    // schedule-invariant at quiescence
    std::atomic<uint64_t> channels_created{0};
    std::atomic<uint64_t> control_channels_created{0};
    std::atomic<uint64_t> channels_live{0};
    std::atomic<uint64_t> handshake_conn_req_sent{0};
    std::atomic<uint64_t> handshake_conn_resp_sent{0};
    std::atomic<uint64_t> handshake_refuse_sent{0};
    std::atomic<uint64_t> close_msgs_sent{0};
    std::atomic<uint64_t> policy_denials{0};
    std::atomic<uint64_t> protocol_errors{0};
    std::atomic<uint64_t> bytes_tx{0};
    std::atomic<uint64_t> bytes_rx{0};
    std::atomic<uint64_t> sends_with_zero_credit{0};  // must stay 0

    // schedule-dependent
    std::atomic<uint64_t> data_msgs_sent{0};
    std::atomic<uint64_t> credit_msgs_sent{0};
    std::atomic<uint64_t> credit_min_amount{~uint64_t{0}};
    std::atomic<uint64_t> zero_credit_stalls{0};
    std::atomic<uint64_t> sq_connect_req{0};
    std::atomic<uint64_t> sq_connect_resp{0};
    std::atomic<uint64_t> sq_write_req{0};
    std::atomic<uint64_t> sq_credit_hint{0};
    std::atomic<uint64_t> sq_close_req{0};
    std::atomic<uint64_t> cq_accept_ready{0};
    std::atomic<uint64_t> cq_connect_resp{0};
    std::atomic<uint64_t> cq_read_ready{0};
    std::atomic<uint64_t> cq_close{0};
    std::atomic<uint64_t> cq_error{0};
    std::atomic<uint64_t> read_ready_coalesced{0};
    std::atomic<uint64_t> late_credit_drops{0};
    WaitCounters wait;

    uint64_t handshake_msgs_sent() const {
        return handshake_conn_req_sent.load() + handshake_conn_resp_sent.load() +
               handshake_refuse_sent.load();
    }
    uint64_t control_msgs_sent() const {
        return handshake_msgs_sent() + close_msgs_sent.load() + credit_msgs_sent.load();
    }
    uint64_t sq_total() const {
        return sq_connect_req.load() + sq_connect_resp.load() + sq_write_req.load() +
               sq_credit_hint.load() + sq_close_req.load();
    }
    uint64_t cq_total() const {
        return cq_accept_ready.load() + cq_connect_resp.load() + cq_read_ready.load() +
               cq_close.load() + cq_error.load();
    }
};

}  // namespace tsor
