#pragma once

#include "cbforge/session.hpp"

#include <chrono>
#include <filesystem>
#include <memory>
#include <string>

namespace cbforge {

struct ServiceOptions {
    std::filesystem::path run_root;  // one subdirectory per run
    std::string default_corpus_path;  // used when POST /runs names no corpus
    ModelFactory models = default_models;
    std::chrono::milliseconds max_wait{30000};  // long-poll ceiling
};

/// HTTP front end for human-in-the-loop runs.
///
///   GET  /health
///   POST /runs                      create (paused), 201 {run_id}
///   GET  /runs
///   GET  /runs/{id}
///   POST /runs/{id}/start
///   GET  /runs/{id}/pending?wait=30s
///   POST /runs/{id}/feedback        idempotent per feedback_id
///   GET  /runs/{id}/codebook?version=t
///   GET  /runs/{id}/metrics
///   GET  /runs/{id}/narratives/{nid}
///
/// Errors are {"error": {"code", "message", "field"}} with 400, 404, 409 or
/// 422. Each run has one worker thread; it is the only code that mutates
/// the run, so request handlers only read snapshots or enqueue commands.
class Service {
public:
    explicit Service(ServiceOptions options);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Reopens every run found under run_root; unreadable ones are skipped
    /// and reported through the return value.
    std::vector<std::string> load_existing_runs();

    /// Binds and serves on a background thread. Port 0 picks a free port.
    /// Returns the bound port; throws TransportError when binding fails.
    int start(const std::string& host, int port);
    /// Blocks until stop() is called from another thread or a signal handler.
    void wait();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cbforge
