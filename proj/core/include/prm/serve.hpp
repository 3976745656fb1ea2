#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "prm/pretrain.hpp"
#include "prm/prm_model.hpp"

namespace prm {

/// Frozen checkpoint plus optional PV table. score() runs exactly one
/// forward pass per call and counts them, so callers can assert the
/// one-pass-per-request property.
class PrmScorer {
public:
    PrmScorer(PrmParams params, std::optional<PvTable> pv);

    ScoredList score(const RerankRecord& record) const;
    long forward_count() const { return forward_count_.load(); }
    const PrmConfig& config() const { return params_.config; }

private:
    mutable PrmParams params_;  // tensors are read-only after construction
    std::optional<PvTable> pv_;
    mutable std::atomic<long> forward_count_{0};
};

/// Newline-delimited JSON over a plain TCP socket. One rerank record per
/// request line (labels optional); one reply line per request:
///   {"order": [item_id...], "request_id": s, "scores": [f...]}
/// where scores are in initial-list order. A malformed line gets
///   {"error": s, "request_id": null}
/// and the connection stays open. {"cmd": "stats"} reports
///   {"forward_passes": n}.
class ReRankServer {
public:
    /// Binds and listens on 127.0.0.1:port; port 0 picks an ephemeral port.
    ReRankServer(const PrmScorer& scorer, std::uint16_t port);
    ~ReRankServer();

    ReRankServer(const ReRankServer&) = delete;
    ReRankServer& operator=(const ReRankServer&) = delete;

    std::uint16_t port() const { return port_; }

    /// Accept loop on a background thread.
    void start();
    /// Blocking accept loop on the calling thread.
    void run();
    void stop();

    /// One reply line (without trailing newline) for one request line.
    std::string handle_line(const std::string& line) const;

private:
    void accept_loop();
    void serve_connection(int fd);

    const PrmScorer& scorer_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    std::mutex conn_mutex_;
    std::set<int> conn_fds_;
    std::vector<std::thread> conn_threads_;
};

}  // namespace prm
