#include <catch_amalgamated.hpp>

#include "tsor/fabric.hpp"

using namespace tsor;

namespace {

// Drives both ends of the rendezvous so a connection becomes usable without
// a service loop.
uint64_t establish(SimFabric& f, NodeId a, NodeId b, MrId ctrl_a, MrId ctrl_b) {
    auto c = f.connect(a, b);
    REQUIRE(c.err == Errc::ok);
    f.poll_completions(a, 64);
    f.poll_completions(b, 64);
    f.post_control_meta(c.conn_id, 0, {a, ctrl_a, 1024});
    f.post_control_meta(c.conn_id, 1, {b, ctrl_b, 1024});
    f.poll_completions(a, 64);
    f.poll_completions(b, 64);
    return c.conn_id;
}

}  // namespace

TEST_CASE("mr registration is node-unique; duplicates are rejected") {
    SimFabric f;
    f.register_node(1);
    RingBuffer r1(64), r2(64);
    auto m1 = f.register_mr(1, r1);
    auto m2 = f.register_mr(1, r2);
    REQUIRE(m1.err == Errc::ok);
    REQUIRE(m2.err == Errc::ok);
    REQUIRE(m1.id != m2.id);
    REQUIRE(f.register_mr(1, r1).err != Errc::ok);
    REQUIRE(f.register_mr(99, r2).err == Errc::node_not_found);
    REQUIRE(f.stats().mr_registrations.load() == 2);
}

TEST_CASE("three-node mesh has three connections, two per node") {
    SimFabric f;
    for (NodeId n : {1u, 2u, 3u}) f.register_node(n);
    std::vector<RingBuffer*> rings;
    auto ring = [&] {
        rings.push_back(new RingBuffer(256));
        return rings.back();
    };
    for (auto [a, b] : std::vector<std::pair<NodeId, NodeId>>{{1, 2}, {1, 3}, {2, 3}})
        establish(f, a, b, f.register_mr(a, *ring()).id, f.register_mr(b, *ring()).id);
    REQUIRE(f.established_count() == 3);
    REQUIRE(f.established_count(1) == 2);
    REQUIRE(f.established_count(2) == 2);
    REQUIRE(f.established_count(3) == 2);
    // idempotence: both directions return the same connection
    auto c1 = f.connect(1, 2);
    auto c2 = f.connect(2, 1);
    REQUIRE(c1.conn_id == c2.conn_id);
    REQUIRE_FALSE(c1.created);
    REQUIRE(f.established_count() == 3);
    for (auto* r : rings) delete r;
}

TEST_CASE("unknown peer is an error") {
    SimFabric f;
    f.register_node(1);
    REQUIRE(f.connect(1, 9).err == Errc::node_not_found);
}

TEST_CASE("write_imm copies into the target ring and delivers completions") {
    SimFabric f;
    f.register_node(1);
    f.register_node(2);
    RingBuffer ctrl1(1024), ctrl2(1024), target(256);
    auto cm1 = f.register_mr(1, ctrl1).id;
    auto cm2 = f.register_mr(2, ctrl2).id;
    auto conn = establish(f, 1, 2, cm1, cm2);
    auto mr = f.register_mr(2, target).id;

    std::vector<uint8_t> payload(100);
    for (size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<uint8_t>(i);
    REQUIRE(f.write_imm(1, conn, mr, 0, payload, 7) == Errc::ok);

    auto rx = f.poll_completions(2, 16);
    REQUIRE(rx.size() == 1);
    REQUIRE(rx[0].kind == CompletionKind::recv_imm);
    REQUIRE(rx[0].imm == 7);
    REQUIRE(rx[0].mr_id == mr);
    REQUIRE(rx[0].offset == 0);
    REQUIRE(rx[0].length == 100);
    REQUIRE(std::memcmp(target.data(), payload.data(), 100) == 0);

    auto tx = f.poll_completions(1, 16);
    REQUIRE(tx.size() == 1);
    REQUIRE(tx[0].kind == CompletionKind::send_done);

    // write to an unregistered mr surfaces an error at the sender
    REQUIRE(f.write_imm(1, conn, 4242, 0, payload, 1) != Errc::ok);
    // bounds violation
    REQUIRE(f.write_imm(1, conn, mr, 250, payload, 1) != Errc::ok);
}

TEST_CASE("immediates arrive in send order; counts balance") {
    SimFabric f;
    f.register_node(1);
    f.register_node(2);
    RingBuffer ctrl1(1024), ctrl2(1024), target(1 << 12);
    auto conn = establish(f, 1, 2, f.register_mr(1, ctrl1).id, f.register_mr(2, ctrl2).id);
    auto mr = f.register_mr(2, target).id;

    constexpr int kWrites = 50;
    size_t off = 0;
    for (int i = 0; i < kWrites; ++i) {
        std::vector<uint8_t> b(8, static_cast<uint8_t>(i));
        REQUIRE(f.write_imm(1, conn, mr, off, b, static_cast<uint32_t>(i + 1)) == Errc::ok);
        off += 8;
    }
    std::vector<uint32_t> imms;
    for (;;) {
        auto got = f.poll_completions(2, 7);  // across several polls
        if (got.empty()) break;
        for (auto& c : got) imms.push_back(c.imm);
    }
    REQUIRE(imms.size() == kWrites);
    for (int i = 0; i < kWrites; ++i) REQUIRE(imms[i] == static_cast<uint32_t>(i + 1));
    REQUIRE(f.poll_completions(2, 1).empty());
}

TEST_CASE("remote write cursor rejects overwrites of unconsumed data") {
    SimFabric f;
    f.register_node(1);
    f.register_node(2);
    RingBuffer ctrl1(1024), ctrl2(1024), target(128);
    auto conn = establish(f, 1, 2, f.register_mr(1, ctrl1).id, f.register_mr(2, ctrl2).id);
    auto mr = f.register_mr(2, target).id;

    std::vector<uint8_t> chunk(128, 1);
    REQUIRE(f.write_imm(1, conn, mr, 0, chunk, 1) == Errc::ok);  // fills the ring
    // nothing consumed: any further write must be refused
    REQUIRE(f.write_imm(1, conn, mr, 0, chunk, 2) == Errc::protocol);
    REQUIRE(f.stats().overwrite_violations.load() == 1);

    // receiver publishes and consumes, then the writer may continue
    target.advance_tail(128);
    target.consume(64);
    std::vector<uint8_t> half(64, 2);
    REQUIRE(f.write_imm(1, conn, mr, 0, half, 3) == Errc::ok);  // wrapped to offset 0
}

TEST_CASE("drop_node closes connections and notifies peers") {
    SimFabric f;
    f.register_node(1);
    f.register_node(2);
    RingBuffer ctrl1(1024), ctrl2(1024);
    auto conn = establish(f, 1, 2, f.register_mr(1, ctrl1).id, f.register_mr(2, ctrl2).id);
    f.drop_node(2);
    REQUIRE(f.established_count() == 0);
    auto got = f.poll_completions(1, 16);
    REQUIRE(got.size() == 1);
    REQUIRE(got[0].kind == CompletionKind::conn_down);
    RingBuffer t(64);
    std::vector<uint8_t> b(8, 0);
    REQUIRE(f.write_imm(1, conn, 1, 0, b, 1) == Errc::connection_closed);
}

TEST_CASE("loopback connection: single conn_up, two ctrl_ready sides") {
    SimFabric f;
    f.register_node(1);
    auto c = f.connect(1, 1);
    REQUIRE(c.err == Errc::ok);
    auto ups = f.poll_completions(1, 16);
    REQUIRE(ups.size() == 1);
    REQUIRE(ups[0].kind == CompletionKind::conn_up);
    RingBuffer r0(256), r1(256);
    f.post_control_meta(c.conn_id, 0, {1, f.register_mr(1, r0).id, 256});
    f.post_control_meta(c.conn_id, 1, {1, f.register_mr(1, r1).id, 256});
    auto readies = f.poll_completions(1, 16);
    REQUIRE(readies.size() == 2);
    REQUIRE(readies[0].kind == CompletionKind::ctrl_ready);
    REQUIRE(readies[0].side == 0);
    REQUIRE(readies[1].side == 1);
    REQUIRE(f.established_count() == 1);
}
