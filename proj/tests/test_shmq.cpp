#include <catch_amalgamated.hpp>

#include <random>
#include <thread>

#include "tsor/shmq.hpp"

using namespace tsor;

TEST_CASE("queue push/pop identity and capacity") {
    WorkQueue q(4);
    WorkMessage m;
    m.msg_type = MsgType::connect_req;
    m.socket_id = 11;
    m.payload_u32 = 22;
    REQUIRE(q.push(m));
    auto got = q.pop();
    REQUIRE(got.has_value());
    REQUIRE(got->socket_id == 11);
    REQUIRE(got->payload_u32 == 22);
    REQUIRE(got->msg_type == MsgType::connect_req);

    for (int i = 0; i < 4; ++i) REQUIRE(q.push(m));
    REQUIRE_FALSE(q.push(m));  // fifth push on depth 4
    REQUIRE(q.size() == 4);
}

TEST_CASE("queue preserves order") {
    WorkQueue q(8);
    for (uint32_t i = 0; i < 6; ++i) {
        WorkMessage m;
        m.socket_id = i;
        q.push(m);
    }
    for (uint32_t i = 0; i < 6; ++i) REQUIRE(q.pop()->socket_id == i);
    REQUIRE_FALSE(q.pop().has_value());
}

TEST_CASE("bitmap layering") {
    ReadinessBitmap b;
    b.set(130);  // 130 = 2*64 + 2
    REQUIRE((b.l1() & (1ull << 2)) != 0);
    REQUIRE((b.l2(2) & (1ull << 2)) != 0);
    REQUIRE(b.scan() == std::vector<uint32_t>{130});
    REQUIRE(b.l1() == 0);
    REQUIRE(b.l2(2) == 0);
}

TEST_CASE("bitmap scan order and reset") {
    ReadinessBitmap b;
    b.set(0);
    b.set(63);
    b.set(64);
    REQUIRE(b.scan() == std::vector<uint32_t>{0, 63, 64});
    REQUIRE(b.scan().empty());
    REQUIRE_THROWS_AS(b.set(4096), std::out_of_range);
}

TEST_CASE("push during spin returns without sleeping") {
    ReadinessBitmap b;
    WakeGate g;
    WaitCounters wc;
    std::thread pusher([&] {
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
        b.set(5);
        g.notify();
    });
    auto slots = service_wait(b, g, wc, 1'000'000'000ull, [] { return false; });
    pusher.join();
    REQUIRE(slots == std::vector<uint32_t>{5});
    REQUIRE(wc.sleeps.load() == 0);
}

TEST_CASE("idle run sleeps once, push wakes exactly once") {
    ReadinessBitmap b;
    WakeGate g;
    WaitCounters wc;
    std::atomic<bool> returned{false};
    std::thread svc([&] {
        auto slots = service_wait(b, g, wc, 1000, [] { return false; });
        REQUIRE(slots == std::vector<uint32_t>{9});
        returned = true;
    });
    while (wc.sleeps.load() == 0) std::this_thread::sleep_for(std::chrono::microseconds(50));
    REQUIRE_FALSE(returned.load());
    b.set(9);
    g.notify();
    svc.join();
    REQUIRE(wc.sleeps.load() == 1);
    REQUIRE(g.wakes() == 1);
}

TEST_CASE("two pushes while sleeping produce one wake and both slots") {
    ReadinessBitmap b;
    WakeGate g;
    WaitCounters wc;
    std::thread svc([&] {
        auto slots = service_wait(b, g, wc, 100, [] { return false; });
        REQUIRE(slots == std::vector<uint32_t>{3, 8});
    });
    while (wc.sleeps.load() == 0) std::this_thread::sleep_for(std::chrono::microseconds(50));
    b.set(3);
    b.set(8);
    g.notify();
    g.notify();
    svc.join();
    REQUIRE(g.wakes() == 1);
}

TEST_CASE("no lost wakeups under randomized interleavings") {
    // one consumer loops service_wait with a tiny spin budget; producers
    // push with random delays; every set slot must eventually be returned
    ReadinessBitmap b;
    WakeGate g;
    WaitCounters wc;
    constexpr int kPushes = 20000;
    std::atomic<int> collected{0};
    std::atomic<bool> stop{false};
    std::thread consumer([&] {
        while (!stop.load()) {
            auto slots =
                service_wait(b, g, wc, 32, [&] { return stop.load(); },
                             std::chrono::milliseconds(50));
            collected.fetch_add(static_cast<int>(slots.size() ? slots.size() : 0));
            // count multi-slot scans as the number of distinct pushes seen
        }
    });
    std::mt19937_64 rng(123);
    int produced = 0;
    for (int i = 0; i < kPushes; ++i) {
        b.set(static_cast<uint32_t>(i % 64));
        g.notify();
        ++produced;
        if (rng() % 16 == 0)
            std::this_thread::sleep_for(std::chrono::nanoseconds(rng() % 20000));
        if (rng() % 128 == 0) std::this_thread::yield();
    }
    // Wait for the consumer to observe everything that is still pending.
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
    while (b.any() && std::chrono::steady_clock::now() < deadline)
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
    REQUIRE_FALSE(b.any());
    stop = true;
    g.notify();
    consumer.join();
    REQUIRE(produced == kPushes);
}
