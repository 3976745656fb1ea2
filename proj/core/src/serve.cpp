#include "prm/serve.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>

#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/log.hpp"

namespace prm {

using detail::json;

PrmScorer::PrmScorer(PrmParams params, std::optional<PvTable> pv)
    : params_(std::move(params)), pv_(std::move(pv)) {
    params_.config.validate();
    if (params_.config.use_pv && !pv_.has_value()) {
        throw ConfigError("scorer: checkpoint uses PV but no PV table given");
    }
}

ScoredList PrmScorer::score(const RerankRecord& record) const {
    const PrmConfig& cfg = params_.config;
    const int n = static_cast<int>(record.items.size());
    if (n == 0) {
        throw ParseError("request '" + record.request_id + "' has no items");
    }
    if (n > cfg.n_max) {
        throw ConfigError("request '" + record.request_id + "' has " + std::to_string(n) +
                          " items, checkpoint allows n_max=" + std::to_string(cfg.n_max));
    }
    Tensor2 features(n, cfg.d_feature);
    Tensor2 pv_block(n, cfg.use_pv ? cfg.d_pv : 0);
    for (int i = 0; i < n; ++i) {
        const ItemEntry& item = record.items[static_cast<std::size_t>(i)];
        if (static_cast<int>(item.features.size()) != cfg.d_feature) {
            throw ConfigError("item '" + item.item_id + "' has " +
                              std::to_string(item.features.size()) +
                              " features, checkpoint expects " + std::to_string(cfg.d_feature));
        }
        for (int j = 0; j < cfg.d_feature; ++j) {
            features.at(i, j) = item.features[static_cast<std::size_t>(j)];
        }
        if (cfg.use_pv) {
            const std::vector<double>& vec = pv_->get(record.request_id, item.item_id);
            for (int j = 0; j < cfg.d_pv; ++j) {
                pv_block.at(i, j) = vec[static_cast<std::size_t>(j)];
            }
        }
    }
    const std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
    Tape tape;
    PrmBound bound = PrmBound::bind(tape, params_);
    PrmForwardResult fwd = prm_forward(tape, bound, cfg, features,
                                       cfg.use_pv ? &pv_block : nullptr, mask,
                                       /*training=*/false, 0, 0);
    forward_count_.fetch_add(1);
    return make_scored_list(record.request_id, fwd.scores->value, mask);
}

ReRankServer::ReRankServer(const PrmScorer& scorer, std::uint16_t port) : scorer_(scorer) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) {
        throw Error("serve: socket() failed: " + std::string(std::strerror(errno)));
    }
    int reuse = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &reuse, sizeof(reuse));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(listen_fd_);
        throw Error("serve: cannot bind port " + std::to_string(port) + ": " +
                    std::strerror(errno));
    }
    if (::listen(listen_fd_, 16) != 0) {
        ::close(listen_fd_);
        throw Error("serve: listen() failed: " + std::string(std::strerror(errno)));
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

ReRankServer::~ReRankServer() { stop(); }

void ReRankServer::start() {
    running_.store(true);
    acceptor_ = std::thread([this] { accept_loop(); });
}

void ReRankServer::run() {
    running_.store(true);
    accept_loop();
}

void ReRankServer::stop() {
    if (!running_.exchange(false)) {
        if (listen_fd_ >= 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        return;
    }
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
    {
        std::lock_guard<std::mutex> lock(conn_mutex_);
        for (int fd : conn_fds_) {
            ::shutdown(fd, SHUT_RDWR);
        }
    }
    if (acceptor_.joinable()) {
        acceptor_.join();
    }
    std::vector<std::thread> threads;
    {
        std::lock_guard<std::mutex> lock(conn_mutex_);
        threads.swap(conn_threads_);
    }
    for (std::thread& t : threads) {
        if (t.joinable()) {
            t.join();
        }
    }
}

void ReRankServer::accept_loop() {
    log_info("serving on 127.0.0.1:" + std::to_string(port_));
    while (running_.load()) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (running_.load()) {
                log_debug("accept failed: " + std::string(std::strerror(errno)));
            }
            break;
        }
        std::lock_guard<std::mutex> lock(conn_mutex_);
        conn_fds_.insert(fd);
        conn_threads_.emplace_back([this, fd] { serve_connection(fd); });
    }
}

std::string ReRankServer::handle_line(const std::string& line) const {
    json request;
    try {
        request = json::parse(line);
    } catch (const json::exception& e) {
        return json{{"request_id", nullptr}, {"error", std::string(e.what())}}.dump();
    }
    if (request.contains("cmd")) {
        if (request.at("cmd") == "stats") {
            return json{{"forward_passes", scorer_.forward_count()}}.dump();
        }
        return json{{"request_id", nullptr}, {"error", "unknown cmd"}}.dump();
    }
    try {
        const RerankRecord record = detail::rerank_from_json(request);
        const auto started = std::chrono::steady_clock::now();
        const ScoredList scored = scorer_.score(record);
        const auto elapsed = std::chrono::duration<double, std::micro>(
                                 std::chrono::steady_clock::now() - started)
                                 .count();
        log_debug("request '" + record.request_id + "' scored in " +
                  std::to_string(elapsed) + " us");
        json order = json::array();
        for (int idx : scored.order) {
            order.push_back(record.items[static_cast<std::size_t>(idx)].item_id);
        }
        return json{{"request_id", scored.request_id},
                    {"order", std::move(order)},
                    {"scores", scored.scores}}
            .dump();
    } catch (const json::exception& e) {
        return json{{"request_id", nullptr}, {"error", std::string(e.what())}}.dump();
    } catch (const Error& e) {
        return json{{"request_id", nullptr}, {"error", std::string(e.what())}}.dump();
    }
}

void ReRankServer::serve_connection(int fd) {
    std::string buffer;
    char chunk[4096];
    while (true) {
        const ssize_t got = ::recv(fd, chunk, sizeof(chunk), 0);
        if (got <= 0) {
            break;
        }
        buffer.append(chunk, static_cast<std::size_t>(got));
        std::size_t start = 0;
        std::size_t newline;
        while ((newline = buffer.find('\n', start)) != std::string::npos) {
            const std::string line = buffer.substr(start, newline - start);
            start = newline + 1;
            if (line.empty()) {
                continue;
            }
            const std::string reply = handle_line(line) + "\n";
            std::size_t sent = 0;
            while (sent < reply.size()) {
                const ssize_t wrote = ::send(fd, reply.data() + sent, reply.size() - sent, 0);
                if (wrote <= 0) {
                    ::close(fd);
                    std::lock_guard<std::mutex> lock(conn_mutex_);
                    conn_fds_.erase(fd);
                    return;
                }
                sent += static_cast<std::size_t>(wrote);
            }
        }
        buffer.erase(0, start);
    }
    ::close(fd);
    std::lock_guard<std::mutex> lock(conn_mutex_);
    conn_fds_.erase(fd);
}

}  // namespace prm
