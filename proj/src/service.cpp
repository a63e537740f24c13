#include "cbforge/service.hpp"

#include "cbforge/error.hpp"

#include <httplib.h>

#include <condition_variable>
#include <deque>
#include <future>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <thread>

namespace cbforge {

namespace fs = std::filesystem;

namespace {

struct HttpError {
    int status;
    std::string code;
    std::string message;
    std::string field;
};

void send_json(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const std::string& field = {}) {
    Json error = {{"code", code}, {"message", message}, {"field", field.empty() ? Json(nullptr) : Json(field)}};
    send_json(res, status, {{"error", error}});
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const HttpError& e) {
            send_error(res, e.status, e.code, e.message, e.field);
        } catch (const ValidationError& e) {
            send_error(res, 422, "validation_error", e.what(), e.field());
        } catch (const NotFound& e) {
            send_error(res, 404, "not_found", e.what());
        } catch (const Conflict& e) {
            send_error(res, 409, "conflict", e.what());
        } catch (const SequencingError& e) {
            send_error(res, 409, "sequencing", e.what());
        } catch (const Json::exception& e) {
            send_error(res, 400, "bad_request", e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        }
    };
}

Json parse_body(const httplib::Request& req) {
    try {
        return Json::parse(req.body);
    } catch (const Json::parse_error& e) {
        throw HttpError{400, "bad_request", std::string("request body is not valid JSON: ") + e.what(), ""};
    }
}

std::chrono::milliseconds parse_wait(const std::string& text) {
    static const std::regex pattern(R"(^(\d+)(ms|s)?$)");
    std::smatch m;
    if (!std::regex_match(text, m, pattern)) {
        throw ValidationError("wait must look like 30s, 500ms or 30", "wait");
    }
    const long long value = std::stoll(m[1].str());
    return m[2].str() == "ms" ? std::chrono::milliseconds(value) : std::chrono::milliseconds(value * 1000);
}

struct Command {
    enum class Kind { start, advance, feedback };
    Kind kind = Kind::advance;
    FeedbackSubmission submission;
    std::shared_ptr<std::promise<Json>> reply;
};

Json submission_content(const FeedbackSubmission& s) {
    return {{"correct_label", s.correct_label},
            {"rationale", s.rationale},
            {"error_kind", s.error_kind ? Json(to_string(*s.error_kind)) : Json(nullptr)}};
}

}  // namespace

struct RunHandle {
    std::string run_id;
    std::unique_ptr<RunSession> session;  // worker thread only, after construction
    const Corpus* corpus = nullptr;

    std::mutex mutex;
    std::condition_variable changed;
    Json summary;
    Json config;
    std::vector<Json> pending;
    std::set<std::string> pending_ids;
    std::set<std::string> answered_ids;  // in the open batch, already answered
    std::set<std::string> visible_ids;
    std::vector<std::string> options;
    Json metrics = Json::array();
    std::map<int, Codebook> codebooks;
    std::map<std::string, std::pair<Json, Json>> acks;  // feedback id -> (content, ack)
    bool computing = false;
    std::string last_error;

    std::deque<Command> queue;
    bool stopping = false;
    std::thread worker;

    /// Rebuilds the read-side snapshot from the session. Worker thread only.
    void refresh() {
        const auto& state = session->state();
        const auto& cfg = session->config();
        Json s = {{"run_id", run_id},
                  {"status", to_string(state.status)},
                  {"t", state.t},
                  {"guide_size", state.guide.size()},
                  {"budget", cfg.budget},
                  {"budget_remaining", cfg.budget > state.guide.size() ? cfg.budget - state.guide.size() : 0},
                  {"batch_size", cfg.batch_size},
                  {"min_guide", cfg.min_guide},
                  {"target_accuracy", cfg.target_accuracy},
                  {"variable", cfg.variable.name},
                  {"response_options", cfg.variable.response_options},
                  {"codebook_version", state.codebook.version},
                  {"stop_reason", state.stop_reason}};
        std::vector<Json> views;
        std::set<std::string> ids;
        std::set<std::string> answered;
        std::set<std::string> visible;
        if (state.pending) {
            for (const auto& item : state.pending->items) {
                visible.insert(item.narrative_id);
                if (item.answer) {
                    answered.insert(item.feedback_id);
                    continue;
                }
                ids.insert(item.feedback_id);
                views.push_back({{"feedback_id", item.feedback_id},
                                 {"narrative_id", item.narrative_id},
                                 {"narrative_text", concat_narrative(corpus->at(item.narrative_id))},
                                 {"model_label", item.prediction.label},
                                 {"model_reason", item.prediction.reason},
                                 {"model_span", item.prediction.span},
                                 {"span_verbatim", item.prediction.span_verbatim},
                                 {"unparseable", item.unparseable},
                                 {"response_options", cfg.variable.response_options},
                                 {"codebook_version", state.codebook.version}});
            }
        }
        for (const auto& g : state.guide) visible.insert(g.narrative_id);
        Json history = to_json(state)["history"];

        std::lock_guard lock(mutex);
        summary = std::move(s);
        pending = std::move(views);
        pending_ids = std::move(ids);
        answered_ids = std::move(answered);
        visible_ids = std::move(visible);
        metrics = std::move(history);
        options = cfg.variable.response_options;
        codebooks[state.codebook.version] = state.codebook;
    }

    void advance() {
        auto& state = session->state();
        if (state.pending) {
            const bool answered = std::all_of(state.pending->items.begin(), state.pending->items.end(),
                                              [](const PendingItem& p) { return p.answer.has_value(); });
            if (!answered) return;
            set_computing(true);
            session->complete();
        }
        if (session->state().status == RunStatus::running && !session->state().pending) {
            set_computing(true);
            refresh();
            session->begin();
        }
    }

    void set_computing(bool value) {
        std::lock_guard lock(mutex);
        computing = value;
        summary["computing"] = value;
    }

    void handle(Command& cmd) {
        switch (cmd.kind) {
            case Command::Kind::start: {
                session->start();
                refresh();
                cmd.reply->set_value({{"run_id", run_id}, {"status", to_string(session->state().status)}});
                advance();
                break;
            }
            case Command::Kind::advance:
                advance();
                break;
            case Command::Kind::feedback: {
                FeedbackAck ack;
                try {
                    ack = session->submit(cmd.submission);
                } catch (...) {
                    cmd.reply->set_exception(std::current_exception());
                    return;
                }
                Json reply;
                {
                    std::lock_guard lock(mutex);
                    auto it = acks.find(ack.feedback_id);
                    if (ack.replayed && it != acks.end()) {
                        reply = it->second.second;
                    } else {
                        reply = {{"feedback_id", ack.feedback_id},
                                 {"accepted", true},
                                 {"remaining", ack.remaining},
                                 {"batch_complete", ack.batch_complete},
                                 {"t", session->state().t}};
                        acks[ack.feedback_id] = {submission_content(cmd.submission), reply};
                    }
                }
                refresh();
                cmd.reply->set_value(reply);
                if (ack.batch_complete && !ack.replayed) advance();
                break;
            }
        }
    }

    void run_worker() {
        for (;;) {
            Command cmd;
            {
                std::unique_lock lock(mutex);
                changed.wait(lock, [&] { return stopping || !queue.empty(); });
                if (queue.empty()) return;
                cmd = std::move(queue.front());
                queue.pop_front();
            }
            try {
                handle(cmd);
                std::lock_guard lock(mutex);
                last_error.clear();
            } catch (const std::exception& e) {
                std::lock_guard lock(mutex);
                last_error = e.what();
            }
            refresh();
            set_computing(false);
            changed.notify_all();
        }
    }

    void enqueue(Command cmd) {
        {
            std::lock_guard lock(mutex);
            queue.push_back(std::move(cmd));
        }
        changed.notify_all();
    }

    void launch() {
        refresh();
        set_computing(false);
        worker = std::thread([this] { run_worker(); });
    }

    void shutdown() {
        {
            std::lock_guard lock(mutex);
            stopping = true;
        }
        changed.notify_all();
        if (worker.joinable()) worker.join();
    }
};

struct Service::Impl {
    ServiceOptions options;
    httplib::Server server;
    std::thread listener;

    std::mutex runs_mutex;
    std::map<std::string, std::shared_ptr<RunHandle>> runs;
    std::map<std::string, std::shared_ptr<const Corpus>> corpora;
    std::size_t created = 0;

    std::shared_ptr<RunHandle> find(const std::string& id) {
        std::lock_guard lock(runs_mutex);
        auto it = runs.find(id);
        if (it == runs.end()) throw NotFound("unknown run " + id);
        return it->second;
    }

    std::shared_ptr<const Corpus> corpus_for(const std::string& path) {
        std::lock_guard lock(runs_mutex);
        if (auto it = corpora.find(path); it != corpora.end()) return it->second;
        auto corpus = std::make_shared<const Corpus>(ingest_corpus_file(path).corpus);
        corpora[path] = corpus;
        return corpus;
    }

    std::shared_ptr<RunHandle> adopt(std::unique_ptr<RunSession> session) {
        auto handle = std::make_shared<RunHandle>();
        handle->run_id = session->state().run_id;
        handle->corpus = &session->corpus();
        handle->config = to_json(session->config());
        handle->session = std::move(session);
        handle->launch();
        return handle;
    }

    void create_run(const httplib::Request& req, httplib::Response& res) {
        const Json body = parse_body(req);
        if (!body.is_object()) throw ValidationError("run config must be an object");
        std::string run_id;
        if (body.contains("run_id")) {
            if (!body["run_id"].is_string()) throw ValidationError("run_id must be a string", "run_id");
            run_id = body["run_id"].get<std::string>();
            static const std::regex id_pattern(R"(^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$)");
            if (!std::regex_match(run_id, id_pattern)) {
                throw ValidationError("run_id may hold letters, digits, '.', '_' and '-'", "run_id");
            }
        }
        const RunConfig config = run_config_from_json(body);
        std::string corpus_path = body.value("corpus_path", options.default_corpus_path);
        if (corpus_path.empty()) throw ValidationError("no corpus_path given and no default corpus", "corpus_path");
        if (!fs::exists(corpus_path)) throw ValidationError("corpus file " + corpus_path + " not found", "corpus_path");
        auto corpus = corpus_for(corpus_path);

        {
            std::lock_guard lock(runs_mutex);
            if (run_id.empty()) {
                do {
                    char buf[32];
                    std::snprintf(buf, sizeof buf, "run-%04zu", ++created);
                    run_id = buf;
                } while (runs.count(run_id) || fs::exists(options.run_root / run_id));
            }
            if (runs.count(run_id)) throw Conflict("run " + run_id + " already exists");
            runs[run_id] = nullptr;  // reserve
        }
        try {
            auto session = RunSession::create(options.run_root / run_id, run_id, config, corpus_path, corpus,
                                              corpus->labels_for(config.variable.name), options.models, true);
            auto handle = adopt(std::move(session));
            std::lock_guard lock(runs_mutex);
            runs[run_id] = handle;
        } catch (...) {
            std::lock_guard lock(runs_mutex);
            runs.erase(run_id);
            throw;
        }
        send_json(res, 201, {{"run_id", run_id}, {"status", "paused"}});
    }

    void install_routes() {
        server.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
                       send_json(res, 200, {{"status", "ok"}});
                   }));

        server.Post("/runs", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        create_run(req, res);
                    }));

        server.Get("/runs", guarded([this](const httplib::Request&, httplib::Response& res) {
                       Json list = Json::array();
                       std::lock_guard lock(runs_mutex);
                       for (const auto& [id, handle] : runs) {
                           if (!handle) continue;
                           std::lock_guard inner(handle->mutex);
                           list.push_back({{"run_id", id},
                                           {"status", handle->summary.value("status", "")},
                                           {"t", handle->summary.value("t", 0)}});
                       }
                       send_json(res, 200, {{"runs", list}});
                   }));

        server.Get(R"(/runs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                       auto h = find(req.matches[1]);
                       std::lock_guard lock(h->mutex);
                       Json body = h->summary;
                       body["config"] = h->config;
                       body["last_error"] = h->last_error.empty() ? Json(nullptr) : Json(h->last_error);
                       send_json(res, 200, body);
                   }));

        server.Post(R"(/runs/([^/]+)/start)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        auto h = find(req.matches[1]);
                        Command cmd;
                        cmd.kind = Command::Kind::start;
                        cmd.reply = std::make_shared<std::promise<Json>>();
                        auto reply = cmd.reply->get_future();
                        h->enqueue(std::move(cmd));
                        send_json(res, 200, reply.get());
                    }));

        server.Get(R"(/runs/([^/]+)/pending)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                       auto h = find(req.matches[1]);
                       auto wait = std::chrono::milliseconds(0);
                       if (req.has_param("wait")) wait = std::min(parse_wait(req.get_param_value("wait")), options.max_wait);
                       std::unique_lock lock(h->mutex);
                       auto ready = [&] {
                           return !h->pending.empty() ||
                                  is_terminal(run_status_from_string(h->summary.value("status", "running")));
                       };
                       if (wait.count() > 0) h->changed.wait_for(lock, wait, ready);
                       const bool terminal = is_terminal(run_status_from_string(h->summary.value("status", "running")));
                       send_json(res, 200,
                                 {{"run_id", h->run_id},
                                  {"status", h->summary["status"]},
                                  {"t", h->summary["t"]},
                                  {"codebook_version", h->summary["codebook_version"]},
                                  {"computing", h->computing},
                                  {"items", h->pending},
                                  {"heartbeat", h->pending.empty() && !terminal}});
                   }));

        server.Post(R"(/runs/([^/]+)/feedback)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        auto h = find(req.matches[1]);
                        const Json body = parse_body(req);
                        if (!body.is_object()) throw ValidationError("feedback must be an object");
                        FeedbackSubmission s;
                        if (!body.contains("feedback_id") || !body["feedback_id"].is_string()) {
                            throw ValidationError("feedback_id is required", "feedback_id");
                        }
                        if (!body.contains("correct_label") || !body["correct_label"].is_string()) {
                            throw ValidationError("correct_label is required", "correct_label");
                        }
                        s.feedback_id = body["feedback_id"].get<std::string>();
                        s.correct_label = body["correct_label"].get<std::string>();
                        if (body.contains("rationale") && !body["rationale"].is_null()) {
                            if (!body["rationale"].is_string()) {
                                throw ValidationError("rationale must be text", "rationale");
                            }
                            s.rationale = body["rationale"].get<std::string>();
                        }
                        if (body.contains("error_kind") && !body["error_kind"].is_null()) {
                            s.error_kind = error_kind_from_string(body["error_kind"].get<std::string>());
                        }
                        s.timestamp = utc_timestamp();
                        {
                            std::lock_guard lock(h->mutex);
                            if (auto it = h->acks.find(s.feedback_id); it != h->acks.end()) {
                                if (it->second.first != submission_content(s)) {
                                    throw Conflict("feedback " + s.feedback_id +
                                                   " was already submitted with different content");
                                }
                                send_json(res, 200, it->second.second);
                                return;
                            }
                            if (!h->pending_ids.count(s.feedback_id) && !h->answered_ids.count(s.feedback_id)) {
                                throw NotFound("no pending feedback item " + s.feedback_id);
                            }
                            if (std::find(h->options.begin(), h->options.end(), s.correct_label) == h->options.end()) {
                                throw ValidationError("label " + s.correct_label + " is not a response option",
                                                      "correct_label");
                            }
                        }
                        Command cmd;
                        cmd.kind = Command::Kind::feedback;
                        cmd.submission = s;
                        cmd.reply = std::make_shared<std::promise<Json>>();
                        auto reply = cmd.reply->get_future();
                        h->enqueue(std::move(cmd));
                        send_json(res, 200, reply.get());
                    }));

        server.Get(R"(/runs/([^/]+)/codebook)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                       auto h = find(req.matches[1]);
                       std::lock_guard lock(h->mutex);
                       int version = h->summary.value("codebook_version", 0);
                       if (req.has_param("version")) {
                           const auto text = req.get_param_value("version");
                           if (text.empty() || !std::all_of(text.begin(), text.end(), ::isdigit) || text.size() > 9) {
                               throw ValidationError("version must be a non-negative integer", "version");
                           }
                           version = std::stoi(text);
                       }
                       auto it = h->codebooks.find(version);
                       if (it == h->codebooks.end() || version > h->summary.value("codebook_version", 0)) {
                           throw NotFound("codebook version " + std::to_string(version) + " does not exist");
                       }
                       Json body = {{"run_id", h->run_id}, {"version", version}, {"codebook", to_json(it->second)}};
                       CodebookDiff d;
                       if (auto prev = h->codebooks.find(version - 1); prev != h->codebooks.end()) {
                           d = diff(prev->second, it->second);
                           body["previous_version"] = version - 1;
                       } else {
                           body["previous_version"] = nullptr;
                       }
                       body["diff"] = {{"added", d.added}, {"removed", d.removed}};
                       send_json(res, 200, body);
                   }));

        server.Get(R"(/runs/([^/]+)/metrics)", guarded([this](const httplib::Request& req, httplib::Response& res) {
                       auto h = find(req.matches[1]);
                       std::lock_guard lock(h->mutex);
                       send_json(res, 200,
                                 {{"run_id", h->run_id},
                                  {"target_accuracy", h->summary["target_accuracy"]},
                                  {"rows", h->metrics}});
                   }));

        server.Get(R"(/runs/([^/]+)/narratives/([^/]+))",
                   guarded([this](const httplib::Request& req, httplib::Response& res) {
                       auto h = find(req.matches[1]);
                       const std::string nid = req.matches[2];
                       {
                           std::lock_guard lock(h->mutex);
                           if (!h->visible_ids.count(nid)) {
                               throw NotFound("narrative " + nid + " is not under review in this run");
                           }
                       }
                       const auto& n = h->corpus->at(nid);
                       send_json(res, 200,
                                 {{"id", n.id},
                                  {"text", concat_narrative(n)},
                                  {"cme_text", n.cme_text},
                                  {"le_text", n.le_text}});
                   }));
    }
};

Service::Service(ServiceOptions options) : impl_(std::make_unique<Impl>()) {
    impl_->options = std::move(options);
    if (impl_->options.run_root.empty()) {
        throw ValidationError("service needs a run directory", "run_dir");
    }
    fs::create_directories(impl_->options.run_root);
    // SO_REUSEADDR only: the library default also sets SO_REUSEPORT, which
    // lets a second server share a port that is already taken.
    impl_->server.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    impl_->install_routes();
}

Service::~Service() { stop(); }

std::vector<std::string> Service::load_existing_runs() {
    std::vector<std::string> problems;
    for (const auto& entry : fs::directory_iterator(impl_->options.run_root)) {
        if (!entry.is_directory() || !fs::exists(entry.path() / "manifest.json")) continue;
        try {
            auto session = RunSession::resume(entry.path(), impl_->options.models);
            const auto id = session->state().run_id;
            const bool needs_work = session->state().status == RunStatus::running ||
                                    session->state().status == RunStatus::awaiting_feedback;
            auto handle = impl_->adopt(std::move(session));
            if (needs_work) handle->enqueue({Command::Kind::advance, {}, nullptr});
            std::lock_guard lock(impl_->runs_mutex);
            impl_->runs[id] = handle;
        } catch (const std::exception& e) {
            problems.push_back(entry.path().string() + ": " + e.what());
        }
    }
    return problems;
}

int Service::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw TransportError("cannot bind " + host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        throw TransportError("cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void Service::wait() {
    if (impl_->listener.joinable()) impl_->listener.join();
}

void Service::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
    std::vector<std::shared_ptr<RunHandle>> handles;
    {
        std::lock_guard lock(impl_->runs_mutex);
        for (auto& [id, h] : impl_->runs) {
            if (h) handles.push_back(h);
        }
    }
    for (auto& h : handles) h->shutdown();
}

}  // namespace cbforge
