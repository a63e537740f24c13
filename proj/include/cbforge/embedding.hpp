#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cbforge {

using Vector = std::vector<double>;

enum class EmbedderMode { remote, deterministic_test };

struct EmbedderConfig {
    std::string endpoint_url;
    std::string model_name = "all-MiniLM-L6-v2";
    std::size_t dimension = 384;
    std::size_t batch_size = 32;
    EmbedderMode mode = EmbedderMode::deterministic_test;
    std::size_t parallelism = 4;
    int max_retries = 3;
    std::chrono::milliseconds timeout{60000};
};

void validate(const EmbedderConfig& cfg);

/// Scales `v` to unit L2 norm. Throws ValidationError on a zero vector.
void l2_normalize(Vector& v);

/// Lowercased alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);

/// Token-bucket embedding: each lowercased token is hashed into one of
/// `dimension` buckets, counts are L2-normalized. Offline and deterministic.
Vector hashing_embedding(std::string_view text, std::size_t dimension);

/// Embeds `texts` in input order; every result has cfg.dimension entries and
/// unit norm. Remote mode speaks POST {endpoint}/v1/embeddings.
std::vector<Vector> embed_batch(const std::vector<std::string>& texts, const EmbedderConfig& cfg);

/// Vectors keyed by "<model>:<sha256(text)>". Reads are concurrent, inserts
/// serialized; a file-backed cache appends one JSON line per insert.
class EmbeddingCache {
public:
    EmbeddingCache() = default;
    explicit EmbeddingCache(std::filesystem::path file);

    static std::string key(const std::string& model, std::string_view text);

    std::optional<Vector> find(const std::string& key) const;
    void insert(const std::string& key, const Vector& vector);
    std::size_t size() const;

private:
    mutable std::mutex mutex_;
    std::unordered_map<std::string, Vector> entries_;
    std::optional<std::filesystem::path> file_;
};

/// Model part of cache keys; the offline embedder is keyed by its dimension.
std::string cache_model_id(const EmbedderConfig& cfg);

/// embed_batch with cache lookups; only misses reach the embedder.
std::vector<Vector> embed_cached(const std::vector<std::string>& texts, const EmbedderConfig& cfg,
                                 EmbeddingCache& cache);

}  // namespace cbforge
