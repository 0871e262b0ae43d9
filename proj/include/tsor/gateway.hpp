#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "tsor/cluster.hpp"

namespace tsor {

// Ingress/egress protocol transformation between real TCP sockets on the
// host and cluster channels. Runs as a privileged client of one node.
class GatewayHost {
public:
    static constexpr size_t kRelayChunk = 16 * 1024;

    struct Counters {
        std::atomic<uint64_t> sessions_opened{0};
        std::atomic<uint64_t> sessions_live{0};
        std::atomic<uint64_t> ingress_accepts{0};
        std::atomic<uint64_t> egress_dials{0};
        std::atomic<uint64_t> resets{0};
        std::atomic<uint64_t> bytes_ext_to_int{0};
        std::atomic<uint64_t> bytes_int_to_ext{0};
    };

    GatewayHost(Cluster& cluster, const std::string& node_name)
        : cluster_(cluster), node_(&cluster.node(node_name)) {
        auto snap = cluster_.controlplane().snapshot();
        auto pod = cluster_.controlplane().add_pod("gw-" + node_name, node_->id(), 0);
        if (pod.err != Errc::ok) throw std::runtime_error("gateway pod allocation failed");
        ip_ = pod.pod.ep.ip;
        session_ = ClientSession::open(*node_, 0, ip_, /*privileged=*/true);
        if (!session_) throw std::runtime_error("gateway client registration failed");
        tables_ = materialize_tables(snap);
    }

    ~GatewayHost() { stop(); }

    Counters& counters() { return counters_; }
    ClientSession& session() { return *session_; }

    // Binds a real TCP listener for one ingress rule. bind_ip lets tests
    // listen on loopback while the table key stays the rule's external EP.
    // Returns the bound port (rules may use port 0 for ephemeral).
    uint16_t ingress_serve(const Endpoint& external_key, const std::string& bind_ip,
                           uint16_t bind_port) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw std::runtime_error("ingress socket failed");
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_port = htons(bind_port);
        if (::inet_pton(AF_INET, bind_ip.c_str(), &sa.sin_addr) <= 0) {
            ::close(fd);
            throw std::runtime_error("bad ingress bind address");
        }
        if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0 ||
            ::listen(fd, 128) != 0) {
            ::close(fd);
            throw std::runtime_error("ingress bind/listen failed");
        }
        socklen_t len = sizeof(sa);
        ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
        const uint16_t port = ntohs(sa.sin_port);
        listeners_.emplace_back(std::make_unique<Listener>());
        Listener& l = *listeners_.back();
        l.fd = fd;
        l.key = external_key;
        l.thread = std::jthread([this, &l](std::stop_token st) { accept_loop(l, st); });
        return port;
    }

    // Starts the egress leg: accepts pending dials from the service, opens
    // the real TCP connection, then completes or refuses the handshake.
    void start_egress() {
        node_->register_egress_handler(session_->door());
        egress_thread_ = std::jthread([this](std::stop_token st) { egress_loop(st); });
    }

    void stop() {
        for (auto& l : listeners_) {
            l->thread.request_stop();
            if (l->thread.joinable()) l->thread.join();
            if (l->fd >= 0) ::close(l->fd);
            l->fd = -1;
        }
        if (egress_thread_.joinable()) {
            egress_thread_.request_stop();
            egress_thread_.join();
        }
        reap(true);
    }

    // Drops finished sessions; with wait, blocks until all sessions end.
    void reap(bool wait = false) {
        for (;;) {
            {
                std::lock_guard lk(sessions_mu_);
                sessions_.remove_if([](const std::unique_ptr<Bridge>& b) { return b->done(); });
                if (!wait || sessions_.empty()) return;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
    }

private:
    struct Listener {
        int fd = -1;
        Endpoint key{};
        std::jthread thread;
    };

    // One bridged connection: two relay threads, one per direction.
    struct Bridge {
        int ext_fd = -1;
        std::unique_ptr<TsorSocket> internal;
        std::jthread ext_to_int;
        std::jthread int_to_ext;
        std::atomic<int> running{0};
        Counters* counters = nullptr;

        bool done() const { return running.load() == 0; }

        ~Bridge() {
            if (ext_to_int.joinable()) ext_to_int.join();
            if (int_to_ext.joinable()) int_to_ext.join();
            if (ext_fd >= 0) ::close(ext_fd);
        }
    };

    void accept_loop(Listener& l, std::stop_token st) {
        pollfd pfd{l.fd, POLLIN, 0};
        while (!st.stop_requested()) {
            pfd.revents = 0;
            if (::poll(&pfd, 1, 50) <= 0) continue;
            int fd = ::accept(l.fd, nullptr, nullptr);
            if (fd < 0) continue;
            counters_.ingress_accepts.fetch_add(1);
            auto svc_ep = tables_.ingress.lookup(l.key);
            if (!svc_ep) {
                counters_.resets.fetch_add(1);
                hard_reset(fd);
                continue;
            }
            auto sock = session_->socket();
            Errc e = sock->connect(*svc_ep, deadline_in(std::chrono::seconds(5)));
            if (e != Errc::ok) {
                counters_.resets.fetch_add(1);
                hard_reset(fd);
                continue;
            }
            start_bridge(fd, std::move(sock));
        }
    }

    void egress_loop(std::stop_token st) {
        while (!st.stop_requested()) {
            auto p = session_->accept_egress(deadline_in(std::chrono::milliseconds(50)));
            if (p.err != Errc::ok) continue;
            counters_.egress_dials.fetch_add(1);
            const Endpoint target = p.shared->local_ep;  // the external destination
            int fd = dial(target);
            if (fd < 0) {
                session_->confirm_egress(p.handle, Errc::conn_refused);
                continue;
            }
            session_->confirm_egress(p.handle, Errc::ok);
            start_bridge(fd, session_->adopt(p.handle, p.shared));
        }
    }

    static int dial(const Endpoint& ep) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) return -1;
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_port = htons(ep.port);
        sa.sin_addr.s_addr = htonl(ep.ip);
        if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
            ::close(fd);
            return -1;
        }
        return fd;
    }

    static void hard_reset(int fd) {
        linger lg{1, 0};
        ::setsockopt(fd, SOL_SOCKET, SO_LINGER, &lg, sizeof(lg));
        ::close(fd);
    }

    void start_bridge(int ext_fd, std::unique_ptr<TsorSocket> internal) {
        timeval tv{0, 100000};  // relay threads wake to observe peer state
        ::setsockopt(ext_fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
        counters_.sessions_opened.fetch_add(1);
        counters_.sessions_live.fetch_add(1);
        auto b = std::make_unique<Bridge>();
        b->ext_fd = ext_fd;
        b->internal = std::move(internal);
        b->counters = &counters_;
        b->running.store(2);
        Bridge* bp = b.get();
        b->ext_to_int = std::jthread([this, bp](std::stop_token) { relay_ext_to_int(*bp); });
        b->int_to_ext = std::jthread([this, bp](std::stop_token) { relay_int_to_ext(*bp); });
        std::lock_guard lk(sessions_mu_);
        sessions_.push_back(std::move(b));
    }

    void relay_ext_to_int(Bridge& b) {
        std::vector<uint8_t> buf(kRelayChunk);
        for (;;) {
            ssize_t n = ::recv(b.ext_fd, buf.data(), buf.size(), 0);
            if (n == 0) {  // external half-closed: propagate
                b.internal->shutdown_write();
                break;
            }
            if (n < 0) {
                if (errno == EAGAIN || errno == EWOULDBLOCK) {
                    if (b.internal->channel() && b.internal->channel()->error.load()) break;
                    continue;
                }
                b.internal->shutdown_write();
                break;
            }
            auto r = b.internal->write_all({buf.data(), static_cast<size_t>(n)},
                                           deadline_in(std::chrono::seconds(30)));
            counters_.bytes_ext_to_int.fetch_add(r.n);
            if (r.err != Errc::ok) {
                ::shutdown(b.ext_fd, SHUT_RD);
                break;
            }
        }
        finish_leg(b);
    }

    void relay_int_to_ext(Bridge& b) {
        std::vector<uint8_t> buf(kRelayChunk);
        for (;;) {
            auto r = b.internal->read(buf, deadline_in(std::chrono::milliseconds(100)));
            if (r.err == Errc::timeout) continue;
            if (r.err != Errc::ok) {
                ::shutdown(b.ext_fd, SHUT_WR);
                break;
            }
            if (r.eos) {  // internal half-closed: propagate
                ::shutdown(b.ext_fd, SHUT_WR);
                break;
            }
            size_t sent = 0;
            bool fail = false;
            while (sent < r.n) {
                ssize_t k = ::send(b.ext_fd, buf.data() + sent, r.n - sent, MSG_NOSIGNAL);
                if (k <= 0) {
                    fail = true;
                    break;
                }
                sent += static_cast<size_t>(k);
            }
            counters_.bytes_int_to_ext.fetch_add(sent);
            if (fail) {
                b.internal->close();
                break;
            }
        }
        finish_leg(b);
    }

    void finish_leg(Bridge& b) {
        if (b.running.fetch_sub(1) == 1) {
            b.internal->close();
            counters_.sessions_live.fetch_sub(1);
        }
    }

    Cluster& cluster_;
    ServiceNode* node_;
    uint32_t ip_ = 0;
    std::unique_ptr<ClientSession> session_;
    RouteTables tables_;
    Counters counters_;
    std::vector<std::unique_ptr<Listener>> listeners_;
    std::jthread egress_thread_;
    std::mutex sessions_mu_;
    std::list<std::unique_ptr<Bridge>> sessions_;
};

}  // namespace tsor
