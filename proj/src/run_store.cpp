#include "cbforge/run_store.hpp"

#include "cbforge/digest.hpp"
#include "cbforge/error.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace cbforge {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_all(int fd, const std::string& content, const fs::path& path) {
    std::size_t done = 0;
    while (done < content.size()) {
        const auto n = ::write(fd, content.data() + done, content.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error("write failed for " + path.string() + ": " + std::strerror(errno));
        }
        done += static_cast<std::size_t>(n);
    }
}

void fsync_dir(const fs::path& dir) {
    const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
}

std::vector<std::string> split_lines(const std::string& content) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    for (auto nl = content.find('\n'); nl != std::string::npos; nl = content.find('\n', start)) {
        lines.push_back(content.substr(start, nl - start));
        start = nl + 1;
    }
    return lines;
}

std::string format_number(double v) {
    std::ostringstream out;
    out << std::setprecision(6) << v;
    return out.str();
}

int lock_dir(const fs::path& dir) {
    const auto path = dir / "lock";
    const int fd = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd < 0) {
        throw Error("cannot open lock file " + path.string() + ": " + std::strerror(errno));
    }
    if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd);
        throw Conflict("run " + dir.string() + " is locked by another writer");
    }
    return fd;
}

}  // namespace

void atomic_write(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_CREAT | O_TRUNC | O_WRONLY | O_CLOEXEC, 0644);
    if (fd < 0) {
        throw Error("cannot write " + tmp.string() + ": " + std::strerror(errno));
    }
    try {
        write_all(fd, content, tmp);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::fsync(fd);
    ::close(fd);
    fs::rename(tmp, path);
    fsync_dir(path.parent_path());
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

Json to_json(const RunManifest& m) {
    return {{"run_id", m.run_id},
            {"created_at", m.created_at},
            {"config_digest", m.config_digest},
            {"corpus_digest", m.corpus_digest},
            {"corpus_path", m.corpus_path},
            {"status", m.status},
            {"latest_iteration", m.latest_iteration},
            {"latest_codebook_version", m.latest_codebook_version},
            {"log_digest", m.log_digest}};
}

RunManifest manifest_from_json(const Json& j) {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.created_at = j.value("created_at", std::string());
    m.config_digest = j.at("config_digest").get<std::string>();
    m.corpus_digest = j.value("corpus_digest", std::string());
    m.corpus_path = j.value("corpus_path", std::string());
    m.status = j.value("status", std::string("paused"));
    m.latest_iteration = j.at("latest_iteration").get<int>();
    m.latest_codebook_version = j.value("latest_codebook_version", 0);
    m.log_digest = j.at("log_digest").get<std::string>();
    return m;
}

RunStore::RunStore(fs::path dir, RunManifest manifest, int lock_fd)
    : dir_(std::move(dir)), manifest_(std::move(manifest)), lock_fd_(lock_fd) {}

RunStore::RunStore(RunStore&& other) noexcept
    : dir_(std::move(other.dir_)), manifest_(std::move(other.manifest_)), lock_fd_(other.lock_fd_) {
    other.lock_fd_ = -1;
}

RunStore& RunStore::operator=(RunStore&& other) noexcept {
    if (this != &other) {
        if (lock_fd_ >= 0) ::close(lock_fd_);
        dir_ = std::move(other.dir_);
        manifest_ = std::move(other.manifest_);
        lock_fd_ = other.lock_fd_;
        other.lock_fd_ = -1;
    }
    return *this;
}

RunStore::~RunStore() {
    if (lock_fd_ >= 0) ::close(lock_fd_);
}

RunStore RunStore::create(const fs::path& dir, const std::string& run_id, const Json& config,
                          const std::string& corpus_path) {
    if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
        throw Conflict("run directory " + dir.string() + " exists and is not empty");
    }
    const fs::path target = fs::absolute(dir);
    const fs::path parent = target.parent_path();
    fs::create_directories(parent);
    const fs::path tmp = parent / (".tmp-" + target.filename().string() + "-" + std::to_string(::getpid()));
    fs::remove_all(tmp);
    fs::create_directories(tmp / "codebook");

    const std::string config_text = config.dump(2) + "\n";
    atomic_write(tmp / "config.json", config_text);
    atomic_write(tmp / "iterations.jsonl", "");

    RunManifest m;
    m.run_id = run_id;
    m.created_at = utc_timestamp();
    m.config_digest = sha256_hex(config_text);
    if (!corpus_path.empty()) {
        m.corpus_path = fs::absolute(corpus_path).string();
        m.corpus_digest = sha256_file(m.corpus_path);
    }
    m.log_digest = sha256_hex("");
    atomic_write(tmp / "manifest.json", to_json(m).dump(2) + "\n");

    if (fs::exists(target)) fs::remove(target);
    fs::rename(tmp, target);
    fsync_dir(parent);
    return RunStore(target, std::move(m), lock_dir(target));
}

RunStore RunStore::open(const fs::path& dir, Access access) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw NotFound("no run at " + dir.string());
    }
    const int fd = access == Access::writer ? lock_dir(dir) : -1;
    RunStore store(dir, {}, fd);
    try {
        store.manifest_ = manifest_from_json(Json::parse(read_file(manifest_path)));
    } catch (const Json::exception& e) {
        throw CorruptionError("manifest.json is unreadable: " + std::string(e.what()));
    }
    auto& m = store.manifest_;

    if (sha256_file(dir / "config.json") != m.config_digest) {
        throw CorruptionError("config.json does not match the digest recorded in manifest.json");
    }
    if (!m.corpus_path.empty()) {
        if (!fs::exists(m.corpus_path)) {
            throw CorruptionError("corpus file " + m.corpus_path + " referenced by the run is missing");
        }
        if (sha256_file(m.corpus_path) != m.corpus_digest) {
            throw CorruptionError("corpus file " + m.corpus_path + " changed since the run was created");
        }
    }

    const fs::path log_path = dir / "iterations.jsonl";
    std::string content = fs::exists(log_path) ? read_file(log_path) : std::string();
    if (!content.empty() && content.back() != '\n') {
        const auto keep = content.rfind('\n') == std::string::npos ? 0 : content.rfind('\n') + 1;
        content.resize(keep);
        if (access == Access::writer) {
            fs::resize_file(log_path, keep);
        }
    }
    const auto lines = split_lines(content);
    int last_version = 0;
    std::string last_status;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            const auto record = Json::parse(lines[i]);
            if (record.at("t").get<int>() != static_cast<int>(i)) {
                throw CorruptionError("iterations.jsonl line " + std::to_string(i + 1) + " carries t=" +
                                      std::to_string(record.at("t").get<int>()));
            }
            last_version = record.value("codebook_version", last_version);
            last_status = record.value("status", std::string());
        } catch (const Json::exception& e) {
            throw CorruptionError("iterations.jsonl line " + std::to_string(i + 1) + " is unreadable: " + e.what());
        }
    }
    const auto expected = static_cast<std::size_t>(m.latest_iteration + 1);
    if (lines.size() < expected) {
        throw CorruptionError("iterations.jsonl holds " + std::to_string(lines.size()) +
                              " records but manifest.json expects " + std::to_string(expected));
    }
    std::string prefix;
    for (std::size_t i = 0; i < expected; ++i) prefix += lines[i] + "\n";
    if (sha256_hex(prefix) != m.log_digest) {
        throw CorruptionError("iterations.jsonl does not match the digest recorded in manifest.json");
    }
    if (lines.size() > expected) {
        m.latest_iteration = static_cast<int>(lines.size()) - 1;
        m.latest_codebook_version = last_version;
        if (!last_status.empty()) m.status = last_status;
        m.log_digest = sha256_hex(content);
        if (access == Access::writer) store.write_manifest();
    }
    return store;
}

void RunStore::require_writer() const {
    if (lock_fd_ < 0) {
        throw SequencingError("run store at " + dir_.string() + " was opened read-only");
    }
}

void RunStore::write_manifest() { atomic_write(dir_ / "manifest.json", to_json(manifest_).dump(2) + "\n"); }

Json RunStore::config() const { return Json::parse(read_file(dir_ / "config.json")); }

void RunStore::append_iteration(const Json& record) {
    require_writer();
    const int t = record.at("t").get<int>();
    if (t != manifest_.latest_iteration + 1) {
        throw SequencingError("iteration t=" + std::to_string(t) + " cannot follow t=" +
                              std::to_string(manifest_.latest_iteration));
    }
    const fs::path log_path = dir_ / "iterations.jsonl";
    const std::string line = record.dump() + "\n";
    const int fd = ::open(log_path.c_str(), O_CREAT | O_APPEND | O_WRONLY | O_CLOEXEC, 0644);
    if (fd < 0) {
        throw Error("cannot append to " + log_path.string() + ": " + std::strerror(errno));
    }
    try {
        write_all(fd, line, log_path);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::fsync(fd);
    ::close(fd);

    manifest_.latest_iteration = t;
    manifest_.latest_codebook_version = record.value("codebook_version", manifest_.latest_codebook_version);
    manifest_.status = record.value("status", manifest_.status);
    manifest_.log_digest = sha256_file(log_path);
    write_manifest();
}

std::vector<Json> RunStore::iterations() const {
    const fs::path log_path = dir_ / "iterations.jsonl";
    if (!fs::exists(log_path)) return {};
    std::vector<Json> out;
    const auto lines = split_lines(read_file(log_path));
    for (std::size_t i = 0; i < lines.size() && static_cast<int>(i) <= manifest_.latest_iteration; ++i) {
        out.push_back(Json::parse(lines[i]));
    }
    return out;
}

void RunStore::write_codebook(const Codebook& codebook) {
    require_writer();
    atomic_write(dir_ / "codebook" / ("v" + std::to_string(codebook.version) + ".json"),
                 to_json(codebook).dump(2) + "\n");
}

Codebook RunStore::read_codebook(int version) const {
    const std::string name = "codebook/v" + std::to_string(version) + ".json";
    const fs::path path = dir_ / name;
    if (!fs::exists(path)) {
        throw CorruptionError("missing codebook file " + name);
    }
    try {
        auto codebook = codebook_from_json(Json::parse(read_file(path)));
        if (codebook.version != version) {
            throw CorruptionError(name + " holds version " + std::to_string(codebook.version));
        }
        return codebook;
    } catch (const Json::exception& e) {
        throw CorruptionError("codebook file " + name + " is unreadable: " + e.what());
    } catch (const ValidationError& e) {
        throw CorruptionError("codebook file " + name + " is invalid: " + e.what());
    }
}

std::vector<int> RunStore::codebook_versions() const {
    std::vector<int> versions;
    const fs::path dir = dir_ / "codebook";
    if (!fs::exists(dir)) return versions;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (name.size() > 6 && name[0] == 'v' && name.ends_with(".json")) {
            try {
                versions.push_back(std::stoi(name.substr(1, name.size() - 6)));
            } catch (const std::exception&) {
            }
        }
    }
    std::sort(versions.begin(), versions.end());
    return versions;
}

void RunStore::write_state(const Json& state) {
    require_writer();
    atomic_write(dir_ / "state.json", state.dump(2) + "\n");
}

std::optional<Json> RunStore::read_state() const {
    const fs::path path = dir_ / "state.json";
    if (!fs::exists(path)) return std::nullopt;
    try {
        return Json::parse(read_file(path));
    } catch (const Json::exception& e) {
        throw CorruptionError("state.json is unreadable: " + std::string(e.what()));
    }
}

void RunStore::write_pending(const Json& pending) {
    require_writer();
    atomic_write(dir_ / "pending.json", pending.dump(2) + "\n");
}

std::optional<Json> RunStore::read_pending() const {
    const fs::path path = dir_ / "pending.json";
    if (!fs::exists(path)) return std::nullopt;
    try {
        return Json::parse(read_file(path));
    } catch (const Json::exception& e) {
        throw CorruptionError("pending.json is unreadable: " + std::string(e.what()));
    }
}

void RunStore::clear_pending() {
    require_writer();
    fs::remove(dir_ / "pending.json");
}

void RunStore::write_annotations(const std::vector<Json>& records) {
    require_writer();
    std::string content;
    for (const auto& r : records) content += r.dump() + "\n";
    atomic_write(dir_ / "annotations.jsonl", content);
}

std::vector<Json> RunStore::read_annotations() const {
    const fs::path path = dir_ / "annotations.jsonl";
    if (!fs::exists(path)) return {};
    std::vector<Json> out;
    for (const auto& line : split_lines(read_file(path))) {
        if (!line.empty()) out.push_back(Json::parse(line));
    }
    return out;
}

void RunStore::set_status(const std::string& status) {
    require_writer();
    manifest_.status = status;
    write_manifest();
}

std::string RunStore::export_metrics_timeline() const {
    const auto records = iterations();
    std::set<std::string> classes;
    for (const auto& r : records) {
        const auto& m = r.at("metrics");
        for (const char* key : {"f1_guide", "f1_val"}) {
            const Json per_class = m.value(key, Json::object());
            for (const auto& [k, v] : per_class.items()) classes.insert(k);
        }
    }
    std::ostringstream out;
    out << "t,acc_guide,acc_val,val_carried,macro_f1_guide,macro_f1_val,guide_size,codebook_version";
    for (const auto& c : classes) out << ",f1_guide_" << c;
    for (const auto& c : classes) out << ",f1_val_" << c;
    out << "\n";
    for (const auto& r : records) {
        const auto& m = r.at("metrics");
        out << m.at("t").get<int>() << ',' << format_number(m.at("acc_guide").get<double>()) << ','
            << format_number(m.at("acc_val").get<double>()) << ',' << (m.value("val_carried", false) ? 1 : 0)
            << ',' << format_number(m.value("macro_f1_guide", 0.0)) << ','
            << format_number(m.value("macro_f1_val", 0.0)) << ',' << m.at("guide_size").get<std::size_t>() << ','
            << m.at("codebook_version").get<int>();
        const auto g = m.value("f1_guide", Json::object());
        const auto v = m.value("f1_val", Json::object());
        for (const auto& c : classes) out << ',' << (g.contains(c) ? format_number(g[c].get<double>()) : "");
        for (const auto& c : classes) out << ',' << (v.contains(c) ? format_number(v[c].get<double>()) : "");
        out << "\n";
    }
    return out.str();
}

}  // namespace cbforge
