#include "cbforge/embedding.hpp"

#include "cbforge/digest.hpp"
#include "cbforge/error.hpp"
#include "cbforge/http.hpp"
#include "cbforge/parallel.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <fstream>
#include <thread>

namespace cbforge {

using Json = nlohmann::json;

void validate(const EmbedderConfig& cfg) {
    if (cfg.dimension == 0) {
        throw ValidationError("embedder dimension must be positive", "dimension");
    }
    if (cfg.batch_size == 0) {
        throw ValidationError("embedder batch_size must be at least 1", "batch_size");
    }
    if (cfg.mode == EmbedderMode::remote && cfg.endpoint_url.empty()) {
        throw ValidationError("remote embedder needs an endpoint url", "endpoint_url");
    }
}

void l2_normalize(Vector& v) {
    double norm = 0.0;
    for (double x : v) {
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0 || !std::isfinite(norm)) {
        throw ValidationError("cannot normalize a zero vector");
    }
    for (double& x : v) {
        x /= norm;
    }
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        tokens.push_back(std::move(current));
    }
    return tokens;
}

Vector hashing_embedding(std::string_view text, std::size_t dimension) {
    Vector v(dimension, 0.0);
    auto tokens = tokenize(text);
    if (tokens.empty()) {
        // punctuation-only input still needs a defined direction
        tokens.emplace_back(text);
    }
    for (const auto& token : tokens) {
        v[fnv1a64(token) % dimension] += 1.0;
    }
    l2_normalize(v);
    return v;
}

namespace {

std::vector<Vector> remote_batch(const std::vector<std::string>& texts, const EmbedderConfig& cfg) {
    HttpRequest request;
    request.base_url = cfg.endpoint_url;
    request.path = "/v1/embeddings";
    request.timeout = cfg.timeout;
    request.body = Json{{"model", cfg.model_name}, {"input", texts}}.dump();
    if (const char* key = std::getenv("CODEBOOK_FORGE_API_KEY"); key && *key) {
        request.headers.emplace_back("Authorization", std::string("Bearer ") + key);
    }

    HttpReply reply;
    for (int attempt = 0;; ++attempt) {
        reply = http_post_json(request);
        const bool retryable = reply.transport_failed() || reply.status == 429 || reply.status >= 500;
        if (!retryable || attempt >= cfg.max_retries) {
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(200) * (1 << attempt));
    }
    if (reply.transport_failed()) {
        throw TransportError("embedding endpoint unreachable: " + reply.error);
    }
    if (reply.status < 200 || reply.status >= 300) {
        throw ProtocolError(reply.status, "embedding endpoint returned HTTP " + std::to_string(reply.status));
    }
    Json body;
    try {
        body = Json::parse(reply.body);
    } catch (const Json::parse_error&) {
        throw ProtocolError(reply.status, "embedding reply is not JSON");
    }
    if (!body.contains("data") || !body["data"].is_array() || body["data"].size() != texts.size()) {
        throw ProtocolError(reply.status, "embedding reply has wrong number of vectors");
    }
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (const auto& item : body["data"]) {
        auto v = item.at("embedding").get<Vector>();
        if (v.size() != cfg.dimension) {
            throw ValidationError("embedding dimension " + std::to_string(v.size()) + " != configured " +
                                      std::to_string(cfg.dimension),
                                  "dimension");
        }
        l2_normalize(v);
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace

std::vector<Vector> embed_batch(const std::vector<std::string>& texts, const EmbedderConfig& cfg) {
    validate(cfg);
    if (texts.empty()) {
        throw ValidationError("embed_batch needs at least one text");
    }
    std::vector<Vector> out(texts.size());
    if (cfg.mode == EmbedderMode::deterministic_test) {
        for (std::size_t i = 0; i < texts.size(); ++i) {
            out[i] = hashing_embedding(texts[i], cfg.dimension);
        }
        return out;
    }
    const std::size_t batches = (texts.size() + cfg.batch_size - 1) / cfg.batch_size;
    parallel_for(batches, cfg.parallelism, [&](std::size_t b) {
        const std::size_t begin = b * cfg.batch_size;
        const std::size_t end = std::min(texts.size(), begin + cfg.batch_size);
        std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(begin),
                                       texts.begin() + static_cast<std::ptrdiff_t>(end));
        auto vectors = remote_batch(chunk, cfg);
        for (std::size_t i = 0; i < vectors.size(); ++i) {
            out[begin + i] = std::move(vectors[i]);
        }
    });
    return out;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path file) : file_(std::move(file)) {
    std::ifstream in(*file_);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            auto record = Json::parse(line);
            entries_[record.at("key").get<std::string>()] = record.at("vector").get<Vector>();
        } catch (const std::exception&) {
            // a torn final line from an interrupted append is ignored
        }
    }
}

std::string EmbeddingCache::key(const std::string& model, std::string_view text) {
    return model + ":" + sha256_hex(text);
}

std::optional<Vector> EmbeddingCache::find(const std::string& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        return std::nullopt;
    }
    return it->second;
}

void EmbeddingCache::insert(const std::string& key, const Vector& vector) {
    std::lock_guard lock(mutex_);
    if (!entries_.emplace(key, vector).second) {
        return;
    }
    if (file_) {
        std::ofstream out(*file_, std::ios::app);
        out << Json{{"key", key}, {"vector", vector}}.dump() << '\n';
    }
}

std::size_t EmbeddingCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::string cache_model_id(const EmbedderConfig& cfg) {
    if (cfg.mode == EmbedderMode::deterministic_test) {
        return "hashing-" + std::to_string(cfg.dimension);
    }
    return cfg.model_name;
}

std::vector<Vector> embed_cached(const std::vector<std::string>& texts, const EmbedderConfig& cfg,
                                 EmbeddingCache& cache) {
    const std::string model = cache_model_id(cfg);
    std::vector<Vector> out(texts.size());
    std::vector<std::string> missing;
    std::vector<std::size_t> missing_at;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (auto hit = cache.find(EmbeddingCache::key(model, texts[i]))) {
            out[i] = std::move(*hit);
        } else {
            missing.push_back(texts[i]);
            missing_at.push_back(i);
        }
    }
    if (!missing.empty()) {
        auto fresh = embed_batch(missing, cfg);
        for (std::size_t i = 0; i < fresh.size(); ++i) {
            cache.insert(EmbeddingCache::key(model, missing[i]), fresh[i]);
            out[missing_at[i]] = std::move(fresh[i]);
        }
    }
    return out;
}

}  // namespace cbforge
