#pragma once

#include <json.hpp>

#include <algorithm>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "tsor/cluster.hpp"
#include "tsor/gateway.hpp"

namespace tsor {

using Json = nlohmann::ordered_json;

struct RunParams {
    std::string workload;
    uint64_t seed = 1;
    std::map<std::string, std::string> params;

    uint64_t num(const std::string& key, uint64_t fallback) const {
        auto it = params.find(key);
        if (it == params.end()) return fallback;
        return std::stoull(it->second);
    }
    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = params.find(key);
        return it == params.end() ? fallback : it->second;
    }
};

struct RunOutput {
    Json report;
    bool ok = true;
    std::vector<std::string> problems;
};

// Polling echo server: accepts up to `expect` sockets on one listener and
// echoes until each peer half-closes.
class EchoServer {
public:
    EchoServer(ClientSession& cli, Endpoint ep, uint32_t backlog, size_t expect, size_t workers = 2)
        : cli_(cli), expect_(expect) {
        listener_ = cli_.socket();
        if (Errc e = listener_->listen(ep, backlog); e != Errc::ok)
            throw std::runtime_error(std::string("echo listen failed: ") + errc_name(e));
        accept_thread_ = std::jthread([this](std::stop_token st) { accept_loop(st); });
        for (size_t i = 0; i < workers; ++i)
            workers_.emplace_back([this](std::stop_token st) { echo_loop(st); });
    }

    ~EchoServer() { stop(); }

    void stop() {
        accept_thread_.request_stop();
        if (accept_thread_.joinable()) accept_thread_.join();
        for (auto& w : workers_) w.request_stop();
        for (auto& w : workers_) {
            if (w.joinable()) w.join();
        }
    }

    // Blocks until every expected connection was accepted and fully echoed.
    bool wait_done(Deadline deadline) {
        while (std::chrono::steady_clock::now() < deadline) {
            if (done_.load() >= expect_) return true;
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        return done_.load() >= expect_;
    }

    size_t accepted() const { return accepted_.load(); }

private:
    void accept_loop(std::stop_token st) {
        while (!st.stop_requested() && accepted_.load() < expect_) {
            auto r = listener_->accept(deadline_in(std::chrono::milliseconds(20)));
            if (r.err != Errc::ok) continue;
            accepted_.fetch_add(1);
            std::lock_guard lk(mu_);
            socks_.push_back(ConnEntry{std::move(r.sock), false, false});
        }
    }

    void echo_loop(std::stop_token st) {
        std::vector<uint8_t> buf(16384);
        size_t idx = 0;
        while (!st.stop_requested()) {
            TsorSocket* s = nullptr;
            {
                std::lock_guard lk(mu_);
                if (!socks_.empty()) {
                    idx = (idx + 1) % socks_.size();
                    ConnEntry& c = socks_[idx];
                    if (!c.finished && !c.claimed) {
                        c.claimed = true;
                        s = c.sock.get();
                    }
                }
            }
            if (!s) {
                std::this_thread::sleep_for(std::chrono::microseconds(50));
                continue;
            }
            auto r = s->read(buf, deadline_in(std::chrono::milliseconds(0)));
            bool finished = false;
            if (r.err == Errc::ok && r.n > 0) {
                auto w = s->write_all({buf.data(), r.n}, deadline_in(std::chrono::seconds(30)));
                if (w.err != Errc::ok) finished = true;
            } else if (r.eos || (r.err != Errc::ok && r.err != Errc::timeout)) {
                s->shutdown_write();
                finished = true;
            }
            std::lock_guard lk(mu_);
            for (auto& c : socks_) {
                if (c.sock.get() == s) {
                    c.claimed = false;
                    if (finished && !c.finished) {
                        c.finished = true;
                        done_.fetch_add(1);
                    }
                }
            }
        }
    }

    ClientSession& cli_;
    size_t expect_;
    std::unique_ptr<TsorSocket> listener_;
    std::mutex mu_;
    struct ConnEntry {
        std::unique_ptr<TsorSocket> sock;
        bool finished = false;
        bool claimed = false;
    };
    std::vector<ConnEntry> socks_;
    std::atomic<size_t> accepted_{0};
    std::atomic<size_t> done_{0};
    std::jthread accept_thread_;
    std::vector<std::jthread> workers_;
};

namespace detail {

inline std::vector<uint8_t> deterministic_payload(uint64_t seed, size_t n) {
    std::vector<uint8_t> out(n);
    std::mt19937_64 rng(seed);
    size_t i = 0;
    while (i + 8 <= n) {
        uint64_t v = rng();
        std::memcpy(out.data() + i, &v, 8);
        i += 8;
    }
    while (i < n) out[i++] = static_cast<uint8_t>(rng());
    return out;
}

inline Json totals_json(Cluster::Totals t) {
    Json j;
    j["fabric_connections"] = t.fabric_connections;
    j["mr_registrations"] = t.mr_registrations;
    j["channels_created"] = t.channels_created;
    j["control_channels_created"] = t.control_channels_created;
    j["channels_live"] = t.channels_live;
    j["handshake_conn_req"] = t.handshake_conn_req;
    j["handshake_conn_resp"] = t.handshake_conn_resp;
    j["handshake_refuse"] = t.handshake_refuse;
    j["handshake_msgs"] = t.handshake_conn_req + t.handshake_conn_resp + t.handshake_refuse;
    j["close_msgs"] = t.close_msgs;
    j["policy_denials"] = t.policy_denials;
    j["bytes_tx"] = t.bytes_tx;
    j["bytes_rx"] = t.bytes_rx;
    return j;
}

inline Json runtime_json(const Cluster::Totals& t) {
    Json j;
    j["credit_msgs"] = t.credit_msgs;
    j["credit_min_amount"] =
        t.credit_min_amount == ~uint64_t{0} ? 0 : t.credit_min_amount;
    j["data_msgs"] = t.data_msgs;
    j["sq_write_req"] = t.sq_write_req;
    j["cq_read_ready"] = t.cq_read_ready;
    j["read_ready_coalesced"] = t.read_ready_coalesced;
    j["sleeps"] = t.sleeps;
    j["wakes"] = t.wakes;
    j["poll_iters"] = t.poll_iters;
    return j;
}

struct PodPick {
    std::string client;
    std::string server;
};

inline PodPick pick_pods(const ClusterState& st, const RunParams& p) {
    PodPick pick;
    pick.client = p.str("client", st.pods.empty() ? "" : st.pods.front().name);
    pick.server = p.str("server", st.pods.size() < 2 ? pick.client : st.pods[1].name);
    if (pick.client.empty() || pick.server.empty())
        throw ScenarioError("workload needs at least one pod in the scenario");
    return pick;
}

}  // namespace detail

// Runs one named workload against a scenario and builds the report. The
// `deterministic` section must be byte-identical across runs for a fixed
// seed; wall-clock and scheduling measurements live under `runtime`.
inline RunOutput run_workload(const std::string& scenario_text, const RunParams& p) {
    const auto t0 = std::chrono::steady_clock::now();
    ClusterState st = load_scenario(scenario_text);
    RunOutput out;
    Json det;
    Json runtime;

    Cluster cluster(st);
    if (!cluster.quiesce()) {
        out.ok = false;
        out.problems.push_back("cluster failed to settle after startup");
        return out;
    }

    if (p.workload == "echo") {
        const auto pods = detail::pick_pods(st, p);
        const uint64_t sockets = p.num("sockets", 4);
        const uint64_t bytes = p.num("bytes", 65536);
        const uint64_t chunk = std::max<uint64_t>(1, p.num("chunk", 4096));
        const uint16_t port = static_cast<uint16_t>(p.num("port", 7777));
        const uint64_t workers = std::max<uint64_t>(1, p.num("workers", 4));

        auto& server_cli = cluster.pod_client(pods.server);
        auto& client_cli = cluster.pod_client(pods.client);
        const PodInfo server_pod = cluster.pod(pods.server);
        EchoServer server(server_cli, Endpoint{server_pod.tenant, server_pod.ep.ip, port},
                          static_cast<uint32_t>(sockets), sockets, 2);

        std::atomic<uint64_t> failures{0};
        std::atomic<uint64_t> echoed{0};
        std::vector<std::unique_ptr<TsorSocket>> socks(sockets);
        for (uint64_t i = 0; i < sockets; ++i) {
            socks[i] = client_cli.socket();
            Errc e = socks[i]->connect(Endpoint{server_pod.tenant, server_pod.ep.ip, port},
                                       deadline_in(std::chrono::seconds(10)));
            if (e != Errc::ok) failures.fetch_add(1);
        }
        std::vector<std::jthread> pool;
        std::atomic<uint64_t> next{0};
        for (uint64_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                std::vector<uint8_t> got(chunk);
                for (;;) {
                    const uint64_t i = next.fetch_add(1);
                    if (i >= sockets) return;
                    auto payload = detail::deterministic_payload(p.seed * 1315423911u + i, bytes);
                    size_t off = 0;
                    bool bad = false;
                    while (off < payload.size() && !bad) {
                        const size_t n = std::min<size_t>(chunk, payload.size() - off);
                        auto wr = socks[i]->write_all({payload.data() + off, n},
                                                      deadline_in(std::chrono::seconds(30)));
                        if (wr.err != Errc::ok) bad = true;
                        auto rd = socks[i]->read_exact({got.data(), n},
                                                       deadline_in(std::chrono::seconds(30)));
                        if (rd.err != Errc::ok || rd.eos ||
                            std::memcmp(got.data(), payload.data() + off, n) != 0)
                            bad = true;
                        off += n;
                    }
                    if (bad) failures.fetch_add(1);
                    else echoed.fetch_add(bytes);
                    socks[i]->shutdown_write();
                    // drain to end-of-stream so the server side closes too
                    while (true) {
                        auto r = socks[i]->read(got, deadline_in(std::chrono::seconds(5)));
                        if (r.err != Errc::ok || r.eos) break;
                    }
                    socks[i]->close();
                }
            });
        }
        pool.clear();  // join
        server.wait_done(deadline_in(std::chrono::seconds(30)));
        server.stop();
        cluster.quiesce();
        det["workload"] = {{"sockets", sockets},
                           {"bytes_per_socket", bytes},
                           {"chunk", chunk},
                           {"echoed_bytes", echoed.load()},
                           {"failures", failures.load()}};
        if (failures.load()) {
            out.ok = false;
            out.problems.push_back("echo failures: " + std::to_string(failures.load()));
        }
    } else if (p.workload == "stream") {
        const auto pods = detail::pick_pods(st, p);
        const uint64_t bytes = p.num("bytes", 16 * 1024 * 1024);
        const uint64_t chunk = std::max<uint64_t>(1, p.num("chunk", 4096));
        const uint64_t read_chunk = std::max<uint64_t>(1, p.num("read_chunk", 65536));
        const uint16_t port = static_cast<uint16_t>(p.num("port", 7001));

        auto& server_cli = cluster.pod_client(pods.server);
        auto& client_cli = cluster.pod_client(pods.client);
        const PodInfo server_pod = cluster.pod(pods.server);

        auto listener = server_cli.socket();
        if (listener->listen(Endpoint{server_pod.tenant, server_pod.ep.ip, port}, 1) != Errc::ok)
            throw std::runtime_error("stream listen failed");

        std::atomic<uint64_t> rx_hash{0};
        std::atomic<uint64_t> rx_bytes{0};
        std::jthread rx([&] {
            auto ar = listener->accept(deadline_in(std::chrono::seconds(10)));
            if (ar.err != Errc::ok) return;
            std::vector<uint8_t> buf(read_chunk);
            uint64_t h = 0xcbf29ce484222325ull;
            for (;;) {
                auto r = ar.sock->read(buf, deadline_in(std::chrono::seconds(30)));
                if (r.err != Errc::ok || r.eos) break;
                h = wire::fnv1a64({buf.data(), r.n}, h);
                rx_bytes.fetch_add(r.n);
            }
            rx_hash.store(h);
            ar.sock->close();
        });

        auto payload = detail::deterministic_payload(p.seed, bytes);
        const uint64_t tx_hash = wire::fnv1a64(payload);
        auto sock = client_cli.socket();
        Errc e = sock->connect(Endpoint{server_pod.tenant, server_pod.ep.ip, port},
                               deadline_in(std::chrono::seconds(10)));
        if (e != Errc::ok) throw std::runtime_error("stream connect failed");
        const uint64_t transitions_before = client_cli.stats().empty_to_nonempty.load();
        for (size_t off = 0; off < payload.size(); off += chunk) {
            const size_t n = std::min<size_t>(chunk, payload.size() - off);
            sock->write_all({payload.data() + off, n}, deadline_in(std::chrono::seconds(60)));
        }
        sock->shutdown_write();
        rx.join();
        sock->close();
        cluster.quiesce();
        const uint64_t transitions =
            client_cli.stats().empty_to_nonempty.load() - transitions_before;
        const bool match = rx_hash.load() == tx_hash && rx_bytes.load() == bytes;
        det["workload"] = {{"bytes", bytes},
                           {"chunk", chunk},
                           {"chunks", (bytes + chunk - 1) / chunk},
                           {"checksum_ok", match}};
        runtime["write_buf_transitions"] = transitions;
        if (!match) {
            out.ok = false;
            out.problems.push_back("stream checksum mismatch");
        }
    } else if (p.workload == "pingpong") {
        const auto pods = detail::pick_pods(st, p);
        const uint64_t rounds = p.num("rounds", 200);
        const uint64_t payload_len = std::max<uint64_t>(1, p.num("payload", 64));
        const uint64_t idle_ms = p.num("idle_ms", 0);
        const uint16_t port = static_cast<uint16_t>(p.num("port", 7002));

        auto& server_cli = cluster.pod_client(pods.server);
        auto& client_cli = cluster.pod_client(pods.client);
        const PodInfo server_pod = cluster.pod(pods.server);
        EchoServer server(server_cli, Endpoint{server_pod.tenant, server_pod.ep.ip, port}, 1, 1,
                          1);
        auto sock = client_cli.socket();
        if (sock->connect(Endpoint{server_pod.tenant, server_pod.ep.ip, port},
                          deadline_in(std::chrono::seconds(10))) != Errc::ok)
            throw std::runtime_error("pingpong connect failed");
        // settle the accept traffic so round deltas cover data messages only
        while (server.accepted() < 1) std::this_thread::sleep_for(std::chrono::milliseconds(1));
        cluster.quiesce(std::chrono::seconds(5));

        std::map<uint64_t, uint64_t> hop_hist;
        std::vector<uint8_t> ping = detail::deterministic_payload(p.seed, payload_len);
        std::vector<uint8_t> pong(payload_len);
        auto msg_count = [&] {
            const auto& fs = cluster.fabric().stats();
            uint64_t sqcq = 0;
            for (auto* n : cluster.nodes()) sqcq += n->counters().sq_total() + n->counters().cq_total();
            return sqcq + fs.write_calls.load() + fs.write_imm_calls.load();
        };
        for (uint64_t r = 0; r < rounds; ++r) {
            const uint64_t before = msg_count();
            sock->write_all(ping, deadline_in(std::chrono::seconds(10)));
            sock->read_exact(pong, deadline_in(std::chrono::seconds(10)));
            cluster.quiesce(std::chrono::seconds(5));
            hop_hist[msg_count() - before]++;
        }
        const uint64_t sleeps_before_idle =
            cluster.totals().sleeps;
        if (idle_ms) std::this_thread::sleep_for(std::chrono::milliseconds(idle_ms));
        runtime["idle_sleep_delta"] = cluster.totals().sleeps - sleeps_before_idle;
        sock->close();
        server.stop();
        cluster.quiesce();
        Json hist = Json::array();
        uint64_t hop_cost = st.config.hop_cost_us;
        for (auto& [hops, count] : hop_hist)
            hist.push_back({{"hops", hops}, {"count", count}, {"simulated_us", hops * hop_cost}});
        det["workload"] = {{"rounds", rounds}, {"payload", payload_len}, {"hop_histogram", hist}};
    } else if (p.workload == "connsetup") {
        const auto pods = detail::pick_pods(st, p);
        const uint64_t count = p.num("count", 1000);
        const bool refuse = p.num("refuse", 0) != 0;
        const uint16_t port = static_cast<uint16_t>(p.num("port", 7003));

        auto& client_cli = cluster.pod_client(pods.client);
        const PodInfo server_pod = cluster.pod(pods.server);
        std::unique_ptr<EchoServer> server;
        if (!refuse) {
            auto& server_cli = cluster.pod_client(pods.server);
            server = std::make_unique<EchoServer>(
                server_cli, Endpoint{server_pod.tenant, server_pod.ep.ip, port},
                static_cast<uint32_t>(count), count, 1);
        }
        uint64_t ok_count = 0, refused = 0, other = 0;
        std::vector<std::unique_ptr<TsorSocket>> socks;
        for (uint64_t i = 0; i < count; ++i) {
            auto s = client_cli.socket();
            Errc e = s->connect(Endpoint{server_pod.tenant, server_pod.ep.ip, port},
                                deadline_in(std::chrono::seconds(10)));
            if (e == Errc::ok) {
                ok_count++;
                socks.push_back(std::move(s));
            } else if (e == Errc::conn_refused) {
                refused++;
            } else {
                other++;
            }
        }
        for (auto& s : socks) s->close();
        if (server) {
            server->wait_done(deadline_in(std::chrono::seconds(30)));
            server->stop();
        }
        cluster.quiesce();
        det["workload"] = {{"connects", count},
                           {"established", ok_count},
                           {"refused", refused},
                           {"errors", other}};
        if (other) {
            out.ok = false;
            out.problems.push_back("unexpected connect errors");
        }
    } else if (p.workload == "ingress-echo") {
        if (st.ingress.empty() || !st.ingress_node)
            throw ScenarioError("ingress-echo needs an [ingress] rule and an ingress gateway");
        const uint64_t sessions = p.num("sessions", 8);
        const uint64_t bytes = p.num("bytes", 1024 * 1024);
        const IngressRule rule = st.ingress.front();
        // echo behind the service: find the pod owning the first member EP
        const Endpoint member = [&] {
            RouteTables t = materialize_tables(st);
            auto sel = t.services.select(rule.service);
            if (sel.err != Errc::ok) throw ScenarioError("ingress service has no members");
            return sel.pod;
        }();
        std::string server_pod_name;
        for (const auto& pod : st.pods)
            if (pod.ep.ip == member.ip && pod.tenant == member.tenant) server_pod_name = pod.name;
        if (server_pod_name.empty()) throw ScenarioError("no pod backs the ingress service");

        auto& server_cli = cluster.pod_client(server_pod_name);
        EchoServer server(server_cli, member, static_cast<uint32_t>(sessions), sessions, 2);

        GatewayHost gw(cluster, cluster.controlplane().snapshot().node_name(*st.ingress_node));
        const uint16_t port = gw.ingress_serve(rule.external, "127.0.0.1", 0);

        std::atomic<uint64_t> failures{0};
        std::vector<double> session_ms(sessions, 0.0);
        {
            std::vector<std::jthread> ext;
            for (uint64_t i = 0; i < sessions; ++i) {
                ext.emplace_back([&, i] {
                    const auto s0 = std::chrono::steady_clock::now();
                    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
                    sockaddr_in sa{};
                    sa.sin_family = AF_INET;
                    sa.sin_port = htons(port);
                    ::inet_pton(AF_INET, "127.0.0.1", &sa.sin_addr);
                    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
                        failures.fetch_add(1);
                        ::close(fd);
                        return;
                    }
                    auto payload = detail::deterministic_payload(p.seed * 77 + i, bytes);
                    std::vector<uint8_t> got;
                    got.reserve(bytes);
                    size_t sent = 0;
                    std::vector<uint8_t> buf(16384);
                    while (got.size() < bytes) {
                        if (sent < bytes) {
                            const size_t n = std::min<size_t>(buf.size(), bytes - sent);
                            ssize_t k = ::send(fd, payload.data() + sent, n, MSG_NOSIGNAL);
                            if (k > 0) sent += static_cast<size_t>(k);
                            if (sent == bytes) ::shutdown(fd, SHUT_WR);
                        }
                        ssize_t k = ::recv(fd, buf.data(), buf.size(), 0);
                        if (k <= 0) break;
                        got.insert(got.end(), buf.data(), buf.data() + k);
                    }
                    if (got.size() != bytes ||
                        std::memcmp(got.data(), payload.data(), bytes) != 0)
                        failures.fetch_add(1);
                    ::close(fd);
                    session_ms[i] = std::chrono::duration<double, std::milli>(
                                        std::chrono::steady_clock::now() - s0)
                                        .count();
                });
            }
        }
        server.wait_done(deadline_in(std::chrono::seconds(60)));
        gw.reap(true);
        server.stop();
        cluster.quiesce();
        det["workload"] = {{"sessions", sessions},
                           {"bytes_per_session", bytes},
                           {"failures", failures.load()},
                           {"leaked_sessions", gw.counters().sessions_live.load()}};
        Json lat = Json::array();
        for (double ms : session_ms) lat.push_back(ms);
        runtime["session_wall_ms"] = lat;
        if (failures.load() || gw.counters().sessions_live.load()) {
            out.ok = false;
            out.problems.push_back("ingress-echo failures or leaked sessions");
        }
        gw.stop();
    } else {
        throw ScenarioError("unknown workload: " + p.workload);
    }

    auto problems = cluster.check_invariants();
    for (auto& s : problems) out.problems.push_back(s);
    if (!problems.empty()) out.ok = false;

    Json meta;
    meta["schema"] = "tsor-report v1";
    meta["scenario_hash"] = wire::fnv1a64(
        {reinterpret_cast<const uint8_t*>(scenario_text.data()), scenario_text.size()});
    meta["seed"] = p.seed;
    meta["workload"] = p.workload;
    Json pj = Json::object();
    for (const auto& [k, v] : p.params) pj[k] = v;
    meta["params"] = pj;

    det["cluster"] = detail::totals_json(cluster.totals());
    det["invariants_ok"] = out.problems.empty();

    runtime.update(detail::runtime_json(cluster.totals()));
    runtime["wall_ms"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    out.report["meta"] = meta;
    out.report["deterministic"] = det;
    out.report["runtime"] = runtime;
    return out;
}

}  // namespace tsor
