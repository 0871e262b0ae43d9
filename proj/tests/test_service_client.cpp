#include <catch_amalgamated.hpp>

#include <random>
#include <thread>

#include "tsor/client.hpp"
#include "tsor/cluster.hpp"

using namespace tsor;

namespace {

const char* kTwoNode = R"(tsor-scenario v1
[tenants]
acme
globex
[nodes]
Node1 10.244.1.0/24
Node2 10.244.2.0/24
[pods]
pod1 Node1 acme
pod2 Node1 acme
pod3 Node2 acme 10.244.2.5
podx Node2 globex
[services]
svc1 acme 10.5.6.7:546 -> pod3:546
)";

Endpoint ep(const PodInfo& pod, uint16_t port) { return {pod.tenant, pod.ep.ip, port}; }

std::vector<uint8_t> to_bytes(const std::string& s) {
    return std::vector<uint8_t>(s.begin(), s.end());
}

}  // namespace

TEST_CASE("cross-node echo round trip with a two-message handshake") {
    Cluster cluster(load_scenario(kTwoNode));
    REQUIRE(cluster.quiesce());
    REQUIRE(cluster.fabric().established_count() == 1);

    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    REQUIRE(listener->listen(ep(pod3, 7000), 4) == Errc::ok);

    const uint64_t req_before = cluster.totals().handshake_conn_req;
    const uint64_t resp_before = cluster.totals().handshake_conn_resp;

    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    REQUIRE(sock->remote_ep() == ep(pod3, 7000));

    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));
    REQUIRE(acc.err == Errc::ok);
    REQUIRE(acc.sock->remote_ep() == sock->local_ep());
    REQUIRE(acc.sock->local_ep() == ep(pod3, 7000));

    cluster.quiesce();
    REQUIRE(cluster.totals().handshake_conn_req - req_before == 1);
    REQUIRE(cluster.totals().handshake_conn_resp - resp_before == 1);
    REQUIRE(cluster.totals().handshake_refuse == 0);

    auto ping = to_bytes("ping");
    REQUIRE(sock->write_all(ping, deadline_in(std::chrono::seconds(5))).err == Errc::ok);
    std::vector<uint8_t> buf(4);
    REQUIRE(acc.sock->read_exact(buf, deadline_in(std::chrono::seconds(5))).n == 4);
    REQUIRE(buf == ping);
    auto pong = to_bytes("pong");
    REQUIRE(acc.sock->write_all(pong, deadline_in(std::chrono::seconds(5))).err == Errc::ok);
    REQUIRE(sock->read_exact(buf, deadline_in(std::chrono::seconds(5))).n == 4);
    REQUIRE(buf == pong);

    // one fabric connection regardless of socket count
    REQUIRE(cluster.fabric().established_count() == 1);
    sock->close();
    acc.sock->close();
    REQUIRE(cluster.quiesce());
    REQUIRE(cluster.check_invariants().empty());
}

TEST_CASE("connect to a non-listening endpoint is refused with ConnReq + Refuse") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    const PodInfo pod3 = cluster.pod("pod3");

    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7999), deadline_in(std::chrono::seconds(5))) ==
            Errc::conn_refused);
    cluster.quiesce();
    REQUIRE(cluster.totals().handshake_conn_req == 1);
    REQUIRE(cluster.totals().handshake_refuse == 1);
    REQUIRE(cluster.totals().handshake_conn_resp == 0);
    REQUIRE(cluster.totals().channels_live == 0);
}

TEST_CASE("cross-tenant connects are denied before any control traffic") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    const PodInfo podx = cluster.pod("podx");

    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(podx, 7000), deadline_in(std::chrono::seconds(5))) ==
            Errc::permission_denied);
    cluster.quiesce();
    REQUIRE(cluster.node("Node1").counters().policy_denials.load() == 1);
    REQUIRE(cluster.totals().handshake_conn_req == 0);
    REQUIRE(cluster.totals().handshake_refuse == 0);
}

TEST_CASE("policy rule denies a destination port") {
    std::string scen = std::string(kTwoNode) +
                       "[policies]\ndeny acme 10.244.1.0/24 -> 0.0.0.0/0 port 6379\n";
    Cluster cluster(load_scenario(scen));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    const PodInfo pod3 = cluster.pod("pod3");

    auto a = c1.socket();
    REQUIRE(a->connect(ep(pod3, 6379), deadline_in(std::chrono::seconds(5))) ==
            Errc::permission_denied);
    // a different port on the same path is refused (no listener), not denied
    auto b = c1.socket();
    REQUIRE(b->connect(ep(pod3, 6380), deadline_in(std::chrono::seconds(5))) ==
            Errc::conn_refused);
}

TEST_CASE("connect to a service cluster IP lands on the member pod") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    REQUIRE(listener->listen(ep(pod3, 546), 1) == Errc::ok);

    auto sock = c1.socket();
    const Endpoint svc{pod3.tenant, parse_ip("10.5.6.7").value(), 546};
    REQUIRE(sock->connect(svc, deadline_in(std::chrono::seconds(5))) == Errc::ok);
    REQUIRE(sock->remote_ep() == ep(pod3, 546));  // rewritten before the handshake
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));
    REQUIRE(acc.err == Errc::ok);
}

TEST_CASE("same-node pods use a loopback connection through the same path") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c2 = cluster.pod_client("pod2");
    const PodInfo pod2 = cluster.pod("pod2");

    auto listener = c2.socket();
    REQUIRE(listener->listen(ep(pod2, 8080), 1) == Errc::ok);
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod2, 8080), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));
    REQUIRE(acc.err == Errc::ok);

    auto msg = to_bytes("hello-loopback");
    sock->write_all(msg, deadline_in(std::chrono::seconds(5)));
    std::vector<uint8_t> buf(msg.size());
    REQUIRE(acc.sock->read_exact(buf, deadline_in(std::chrono::seconds(5))).n == msg.size());
    REQUIRE(buf == msg);

    cluster.quiesce();
    // cross-node mesh (1) plus the lazily created loopback on Node1 (1)
    REQUIRE(cluster.fabric().established_count() == 2);
    REQUIRE(cluster.check_invariants().empty());
}

TEST_CASE("remote close delivers buffered bytes then end-of-stream") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 1);
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));

    sock->write_all(to_bytes("12345"), deadline_in(std::chrono::seconds(5)));
    sock->close();
    cluster.quiesce();

    std::vector<uint8_t> buf(16);
    auto r1 = acc.sock->read(buf, deadline_in(std::chrono::seconds(5)));
    REQUIRE(r1.err == Errc::ok);
    REQUIRE(r1.n == 5);
    auto r2 = acc.sock->read(buf, deadline_in(std::chrono::seconds(5)));
    REQUIRE(r2.eos);
    auto r3 = acc.sock->read(buf, deadline_in(std::chrono::seconds(5)));
    REQUIRE(r3.eos);

    acc.sock->close();
    cluster.quiesce();
    REQUIRE(cluster.totals().channels_live == 0);
    REQUIRE(cluster.totals().close_msgs == 2);  // one per direction
}

TEST_CASE("write on a closed socket fails; timeouts surface") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 1);
    REQUIRE(listener->accept(deadline_in(std::chrono::milliseconds(10))).err == Errc::timeout);

    auto& c1 = cluster.pod_client("pod1");
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(1)));
    REQUIRE(acc.err == Errc::ok);

    std::vector<uint8_t> buf(8);
    REQUIRE(acc.sock->read(buf, deadline_in(std::chrono::milliseconds(10))).err == Errc::timeout);

    sock->close();
    REQUIRE(sock->write(to_bytes("x")).err == Errc::connection_closed);
}

TEST_CASE("backlog 1 with two simultaneous initiators: one accepted, one refused") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c2 = cluster.pod_client("pod2");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    REQUIRE(listener->listen(ep(pod3, 9000), 1) == Errc::ok);

    Errc e1 = Errc::ok, e2 = Errc::ok;
    auto s1 = c1.socket();
    auto s2 = c2.socket();
    {
        std::jthread t1(
            [&] { e1 = s1->connect(ep(pod3, 9000), deadline_in(std::chrono::seconds(5))); });
        std::jthread t2(
            [&] { e2 = s2->connect(ep(pod3, 9000), deadline_in(std::chrono::seconds(5))); });
    }
    const int ok_count = (e1 == Errc::ok) + (e2 == Errc::ok);
    const int refused = (e1 == Errc::conn_refused) + (e2 == Errc::conn_refused);
    REQUIRE(ok_count == 1);
    REQUIRE(refused == 1);

    auto acc = listener->accept(deadline_in(std::chrono::seconds(1)));
    REQUIRE(acc.err == Errc::ok);
    // the backlog slot was released by the accept: a third connect succeeds
    auto s3 = c1.socket();
    REQUIRE(s3->connect(ep(pod3, 9000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
}

TEST_CASE("listen conflicts and identity checks") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto l1 = c3.socket();
    REQUIRE(l1->listen(ep(pod3, 7000), 1) == Errc::ok);
    auto l2 = c3.socket();
    REQUIRE(l2->listen(ep(pod3, 7000), 1) == Errc::addr_in_use);
    auto l3 = c3.socket();
    REQUIRE(l3->listen({pod3.tenant, parse_ip("10.244.2.99").value(), 7000}, 1) ==
            Errc::invalid_argument);  // not this pod's address
}

TEST_CASE("credit is lazy: nothing at half the buffer, one message just past it") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 1);
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));

    std::vector<uint8_t> payload(40000, 0x42);
    REQUIRE(sock->write_all(payload, deadline_in(std::chrono::seconds(5))).err == Errc::ok);
    cluster.quiesce();

    std::vector<uint8_t> half(32768);
    REQUIRE(acc.sock->read_exact(half, deadline_in(std::chrono::seconds(5))).n == 32768);
    cluster.quiesce();
    REQUIRE(cluster.totals().credit_msgs == 0);  // exactly half is not "more than half"

    std::vector<uint8_t> one(1);
    REQUIRE(acc.sock->read_exact(one, deadline_in(std::chrono::seconds(5))).n == 1);
    cluster.quiesce();
    REQUIRE(cluster.totals().credit_msgs == 1);
    REQUIRE(cluster.totals().credit_min_amount == 32769);
}

TEST_CASE("read-ready signals coalesce while the client does not drain") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 1);
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));
    cluster.quiesce();

    auto& rx = cluster.node("Node2").counters();
    const uint64_t ready_before = rx.cq_read_ready.load();

    for (int i = 0; i < 3; ++i) {
        sock->write(to_bytes("abc"));
        cluster.quiesce();  // three separate fabric deliveries
    }
    REQUIRE(rx.cq_read_ready.load() - ready_before <= 2);
    REQUIRE(rx.read_ready_coalesced.load() >= 1);

    std::vector<uint8_t> buf(9);
    REQUIRE(acc.sock->read_exact(buf, deadline_in(std::chrono::seconds(5))).n == 9);
}

TEST_CASE("a single burst write raises exactly one WriteReq") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 1);
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));
    cluster.quiesce();

    const uint64_t before = cluster.node("Node1").counters().sq_write_req.load();
    std::vector<uint8_t> burst(32768, 0x7);
    auto w = sock->write(burst);
    REQUIRE(w.n == burst.size());
    cluster.quiesce();
    REQUIRE(cluster.node("Node1").counters().sq_write_req.load() - before == 1);

    std::vector<uint8_t> buf(32768);
    REQUIRE(acc.sock->read_exact(buf, deadline_in(std::chrono::seconds(10))).n == 32768);
}

TEST_CASE("flow control under a slow reader: stalls, never overruns") {
    std::string scen = std::string(kTwoNode) + "[config]\nread_buf 8192\nwrite_buf 8192\n";
    Cluster cluster(load_scenario(scen));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 1);
    auto sock = c1.socket();
    REQUIRE(sock->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) == Errc::ok);
    auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));

    constexpr size_t kTotal = 1 << 20;
    std::vector<uint8_t> sent(kTotal);
    std::mt19937_64 rng(5);
    for (auto& b : sent) b = static_cast<uint8_t>(rng());

    std::jthread writer([&] { sock->write_all(sent, deadline_in(std::chrono::seconds(60))); });
    std::vector<uint8_t> got;
    got.reserve(kTotal);
    std::mt19937_64 rrng(6);
    std::vector<uint8_t> rbuf(3000);
    while (got.size() < kTotal) {
        const size_t want = 1 + rrng() % 3000;
        auto r = acc.sock->read({rbuf.data(), want}, deadline_in(std::chrono::seconds(30)));
        REQUIRE(r.err == Errc::ok);
        got.insert(got.end(), rbuf.data(), rbuf.data() + r.n);
        if (rrng() % 7 == 0) std::this_thread::sleep_for(std::chrono::microseconds(200));
    }
    writer.join();
    REQUIRE(got == sent);
    cluster.quiesce();
    REQUIRE(cluster.fabric().stats().overwrite_violations.load() == 0);
    REQUIRE(cluster.node("Node1").counters().sends_with_zero_credit.load() == 0);
    REQUIRE(cluster.node("Node1").counters().zero_credit_stalls.load() > 0);
    REQUIRE(cluster.check_invariants().empty());
}

TEST_CASE("mesh sizes: sequential starts and a runtime join") {
    const char* scen = R"(tsor-scenario v1
[nodes]
Node1 10.244.1.0/24
Node2 10.244.2.0/24
Node3 10.244.3.0/24
Node4 10.244.4.0/24
)";
    Cluster cluster(load_scenario(scen));
    REQUIRE(cluster.quiesce());
    REQUIRE(cluster.fabric().established_count() == 6);  // K4
    for (auto* n : cluster.nodes()) REQUIRE(cluster.fabric().established_count(n->id()) == 3);

    const uint64_t muts_before = cluster.node("Node1").route_mutations();
    cluster.add_node("Node5", parse_cidr("10.244.5.0/24").value());
    REQUIRE(cluster.quiesce());
    REQUIRE(cluster.fabric().established_count() == 10);  // K5: four new links
    REQUIRE(cluster.node("Node1").route_mutations() - muts_before == 1);
}

TEST_CASE("single-node cluster idles and sleeps") {
    const char* scen =
        "tsor-scenario v1\n[config]\nspin_budget 200\n[nodes]\nNode1 10.244.1.0/24\n";
    Cluster cluster(load_scenario(scen));
    REQUIRE(cluster.quiesce());
    REQUIRE(cluster.fabric().established_count() == 0);
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    REQUIRE(cluster.node("Node1").counters().wait.sleeps.load() >= 1);
}

TEST_CASE("route table ignores pod churn") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    const uint64_t before = cluster.node("Node1").route_mutations();
    for (int i = 0; i < 50; ++i) {
        auto r = cluster.controlplane().add_pod("churn", 1, 1);
        REQUIRE(r.err == Errc::ok);
        cluster.controlplane().remove_pod("churn");
    }
    cluster.quiesce();
    REQUIRE(cluster.node("Node1").route_mutations() == before);
}

TEST_CASE("mr registrations track channels") {
    Cluster cluster(load_scenario(kTwoNode));
    cluster.quiesce();
    auto& c1 = cluster.pod_client("pod1");
    auto& c3 = cluster.pod_client("pod3");
    const PodInfo pod3 = cluster.pod("pod3");

    auto listener = c3.socket();
    listener->listen(ep(pod3, 7000), 8);
    std::vector<std::unique_ptr<TsorSocket>> socks;
    for (int i = 0; i < 5; ++i) {
        socks.push_back(c1.socket());
        REQUIRE(socks.back()->connect(ep(pod3, 7000), deadline_in(std::chrono::seconds(5))) ==
                Errc::ok);
        auto acc = listener->accept(deadline_in(std::chrono::seconds(5)));
        REQUIRE(acc.err == Errc::ok);
    }
    cluster.quiesce();
    auto t = cluster.totals();
    REQUIRE(t.channels_created == 10);  // five sockets, both ends
    REQUIRE(t.mr_registrations == 2 * t.channels_created + 2 * t.control_channels_created);
}

TEST_CASE("client slots are bounded at 4096") {
    const char* scen = "tsor-scenario v1\n[config]\nsq_depth 2\n[nodes]\nNode1 10.244.1.0/24\n";
    Cluster cluster(load_scenario(scen));
    auto& svc = cluster.node("Node1");
    std::vector<std::shared_ptr<ClientDoor>> doors;
    for (int i = 0; i < 4096; ++i) {
        auto r = svc.register_client(1, 0x0af40101 + i);
        REQUIRE(r.err == Errc::ok);
        doors.push_back(r.door);
    }
    REQUIRE(svc.register_client(1, 1).err != Errc::ok);  // the 4097th
}
