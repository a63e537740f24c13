#pragma once

#include "cbforge/codebook.hpp"
#include "cbforge/loop_engine.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cbforge {

struct RunManifest {
    std::string run_id;
    std::string created_at;
    std::string config_digest;
    std::string corpus_digest;
    std::string corpus_path;
    std::string status = "paused";
    int latest_iteration = -1;
    int latest_codebook_version = 0;
    std::string log_digest;  // SHA-256 of iterations.jsonl through latest_iteration
};

Json to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const Json& record);

/// One run directory:
///   manifest.json, config.json, state.json, iterations.jsonl,
///   codebook/v<version>.json, annotations.jsonl, pending.json, lock
///
/// Writers hold an exclusive advisory lock for the lifetime of the object.
/// Whole-file writes go through a temp file and rename; the iteration log
/// is appended and fsync'd before the manifest is rewritten.
class RunStore {
public:
    enum class Access { read_only, writer };

    /// Throws Conflict when `dir` exists and is not empty.
    static RunStore create(const std::filesystem::path& dir, const std::string& run_id, const Json& config,
                           const std::string& corpus_path);

    /// Verifies digests, truncates a torn final log line and reconciles a
    /// manifest that lags the log. Throws CorruptionError on mismatch.
    static RunStore open(const std::filesystem::path& dir, Access access = Access::writer);

    RunStore(RunStore&& other) noexcept;
    RunStore& operator=(RunStore&& other) noexcept;
    RunStore(const RunStore&) = delete;
    RunStore& operator=(const RunStore&) = delete;
    ~RunStore();

    const std::filesystem::path& dir() const { return dir_; }
    const RunManifest& manifest() const { return manifest_; }
    Json config() const;

    /// Throws SequencingError unless record["t"] == latest_iteration + 1.
    void append_iteration(const Json& record);
    std::vector<Json> iterations() const;

    void write_codebook(const Codebook& codebook);
    /// Throws CorruptionError naming the file when it is missing or unreadable.
    Codebook read_codebook(int version) const;
    std::vector<int> codebook_versions() const;

    void write_state(const Json& state);
    std::optional<Json> read_state() const;

    void write_pending(const Json& pending);
    std::optional<Json> read_pending() const;
    void clear_pending();

    void write_annotations(const std::vector<Json>& records);
    std::vector<Json> read_annotations() const;

    void set_status(const std::string& status);

    /// CSV with a header row, one row per logged iteration.
    std::string export_metrics_timeline() const;

private:
    RunStore(std::filesystem::path dir, RunManifest manifest, int lock_fd);
    void write_manifest();
    void require_writer() const;

    std::filesystem::path dir_;
    RunManifest manifest_;
    int lock_fd_ = -1;
};

/// Writes `content` to `path` through a sibling temp file, fsync and rename.
void atomic_write(const std::filesystem::path& path, const std::string& content);

/// UTC, second precision, ISO 8601.
std::string utc_timestamp();

}  // namespace cbforge
