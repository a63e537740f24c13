// cbforge: command-line entry points.
//
// Exit codes: 0 success, 1 operational failure, 2 usage error.

#include "cbforge/error.hpp"
#include "cbforge/metrics.hpp"
#include "cbforge/parallel.hpp"
#include "cbforge/service.hpp"
#include "cbforge/session.hpp"
#include "cbforge/synth.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace cbforge;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Shared {
    std::string corpus;
    std::string variable_spec;
    std::string variable;
    std::string out;
    std::uint64_t seed = 0;
    std::string format = "text";
    std::string endpoint_url;
    std::string model;
    std::string embed_url;
    std::string embed_model;
    std::string config;
};

void add_shared(CLI::App* cmd, Shared& s) {
    cmd->add_option("--corpus", s.corpus, "Corpus file, one JSON record per line");
    cmd->add_option("--variable-spec", s.variable_spec, "Variable definition file");
    cmd->add_option("--variable", s.variable, "Variable name (binary 0.0/1.0 unless --variable-spec is given)");
    cmd->add_option("--out", s.out, "Output path");
    cmd->add_option("--seed", s.seed, "Seed for every random draw");
    cmd->add_option("--format", s.format, "text or jsonl")->check(CLI::IsMember({"text", "jsonl"}));
    cmd->add_option("--endpoint-url", s.endpoint_url, "Chat endpoint base URL (stub:// for the offline stub)");
    cmd->add_option("--model", s.model, "Chat model id");
    cmd->add_option("--embed-url", s.embed_url, "Embedding endpoint base URL");
    cmd->add_option("--embed-model", s.embed_model, "Embedding model id");
    cmd->add_option("--config", s.config, "Run configuration file");
}

std::string env_or(const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
}

// flag > environment > config file
std::string pick(const std::string& flag, const char* env, const std::string& file_value) {
    if (!flag.empty()) return flag;
    if (auto e = env_or(env); !e.empty()) return e;
    return file_value;
}

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    return Json::parse(in);
}

std::vector<Json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::vector<Json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const Json::parse_error& e) {
            throw Error(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

void write_text(const std::string& path, const std::string& content) {
    if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << content;
}

std::string jsonl(const std::vector<Json>& records) {
    std::string s;
    for (const auto& r : records) s += r.dump() + "\n";
    return s;
}

std::optional<Variable> load_variable(const Shared& s) {
    if (!s.variable_spec.empty()) {
        auto v = load_variable_file(s.variable_spec);
        if (!s.variable.empty() && s.variable != v.name) {
            throw UsageError("--variable " + s.variable + " does not match the spec's name " + v.name);
        }
        return v;
    }
    if (!s.variable.empty()) return binary_variable(s.variable);
    return std::nullopt;
}

Variable require_variable(const Shared& s) {
    auto v = load_variable(s);
    if (!v) throw UsageError("--variable or --variable-spec is required");
    return *v;
}

std::shared_ptr<const Corpus> require_corpus(const Shared& s) {
    if (s.corpus.empty()) throw UsageError("--corpus is required");
    auto result = ingest_corpus_file(s.corpus);
    for (const auto& r : result.rejects) {
        std::cerr << "warning: " << s.corpus << ":" << r.line << ": " << r.reason << "\n";
    }
    return std::make_shared<const Corpus>(std::move(result.corpus));
}

/// Config file, then flags and environment layered on top.
Json run_spec(const Shared& s, const std::optional<Variable>& variable) {
    Json spec = s.config.empty() ? Json::object() : read_json_file(s.config);
    if (variable) spec["variable"] = to_json(*variable);
    Json annotator = spec.value("annotator", Json::object());
    const std::string file_url = annotator.value("base_url", annotator.value("url", std::string()));
    const std::string file_model = annotator.value("model", annotator.value("model_id", std::string()));
    annotator["base_url"] = pick(s.endpoint_url, "CODEBOOK_FORGE_ENDPOINT_URL", file_url);
    annotator["model"] = pick(s.model, "CODEBOOK_FORGE_MODEL", file_model);
    annotator.erase("url");
    annotator.erase("model_id");
    if (annotator["base_url"].get<std::string>().empty()) {
        throw UsageError("no chat endpoint: pass --endpoint-url or set CODEBOOK_FORGE_ENDPOINT_URL");
    }
    spec["annotator"] = annotator;
    if (spec.contains("synthesizer")) {
        auto& synth = spec["synthesizer"];
        if (!s.endpoint_url.empty()) synth["base_url"] = s.endpoint_url;
        if (!s.model.empty()) synth["model"] = s.model;
    }
    Json embedder = spec.value("embedder", Json::object());
    const std::string embed_url = pick(s.embed_url, "CODEBOOK_FORGE_EMBED_URL", embedder.value("url", std::string()));
    const std::string embed_model = pick(s.embed_model, "CODEBOOK_FORGE_EMBED_MODEL", embedder.value("model", std::string()));
    if (!embed_url.empty()) {
        embedder["url"] = embed_url;
        embedder["mode"] = "remote";
    }
    if (!embed_model.empty()) embedder["model"] = embed_model;
    spec["embedder"] = embedder;
    if (!spec.contains("seed") || s.seed != 0) spec["seed"] = s.seed;
    return spec;
}

void report(const Shared& s, const Json& record, const std::string& human) {
    if (s.format == "jsonl") {
        std::cout << record.dump() << "\n";
    } else {
        std::cout << human << "\n";
    }
}

std::string fixed(double v, int digits = 3) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

// ---- ingest ---------------------------------------------------------------

struct IngestArgs {
    std::string synthetic;
    std::string cot_out;
    std::string variable_out;
};

int cmd_ingest(const Shared& s, const IngestArgs& a) {
    if (!a.synthetic.empty()) {
        if (s.out.empty()) throw UsageError("--synthetic needs --out");
        auto spec = a.synthetic == "legal" ? legal_interaction_spec(s.seed) : load_synth_spec(a.synthetic);
        if (a.synthetic == "legal") spec.seed = s.seed;
        const auto world = generate_corpus(spec);
        std::vector<Json> lines;
        for (const auto& n : world.corpus.narratives()) lines.push_back(to_json(n));
        write_text(s.out, jsonl(lines));
        if (!a.cot_out.empty()) {
            std::vector<Json> cot;
            for (const auto& [id, text] : world.cot_cache) cot.push_back({{"id", id}, {"rationale", text}});
            write_text(a.cot_out, jsonl(cot));
        }
        if (!a.variable_out.empty()) write_text(a.variable_out, to_json(synthetic_variable(spec)).dump(2) + "\n");
        report(s, {{"narratives", world.corpus.size()}, {"variable", spec.variable}, {"out", s.out}},
               "wrote " + std::to_string(world.corpus.size()) + " synthetic narratives to " + s.out);
        return 0;
    }
    if (s.corpus.empty()) throw UsageError("--corpus or --synthetic is required");
    auto result = ingest_corpus_file(s.corpus);
    for (const auto& r : result.rejects) {
        std::cerr << s.corpus << ":" << r.line << ": rejected: " << r.reason << "\n";
    }
    if (!s.out.empty()) {
        std::vector<Json> lines;
        for (const auto& n : result.corpus.narratives()) lines.push_back(to_json(n));
        write_text(s.out, jsonl(lines));
    }
    std::map<std::string, std::size_t> labelled;
    for (const auto& n : result.corpus.narratives()) {
        for (const auto& [var, label] : n.labels) labelled[var]++;
    }
    Json rec = {{"accepted", result.corpus.size()}, {"rejected", result.rejects.size()}, {"labelled", labelled}};
    std::string human = std::to_string(result.corpus.size()) + " accepted, " +
                        std::to_string(result.rejects.size()) + " rejected";
    for (const auto& [var, count] : labelled) human += "\n  " + var + ": " + std::to_string(count) + " labelled";
    report(s, rec, human);
    return 0;
}

// ---- annotate -------------------------------------------------------------

struct AnnotateArgs {
    std::vector<double> temperatures;
    std::string templates;
    std::size_t bootstrap_iterations = 10000;
};

std::vector<Json> annotate_once(const Corpus& corpus, const RunConfig& config, ChatModel& model,
                                const ModelEndpoint& endpoint, const PromptTemplates& templates) {
    const Codebook codebook = init_codebook(config.variable, templates);
    const auto& items = corpus.narratives();
    std::vector<Json> out(items.size());
    parallel_for(items.size(), endpoint.parallelism_cap, [&](std::size_t i) {
        const auto& n = items[i];
        const auto text = concat_narrative(n);
        try {
            auto p = predict(model, endpoint, n.id, text, render_annotation_prompt(codebook, text),
                             config.variable.response_options);
            out[i] = {{"id", n.id},        {"variable", config.variable.name}, {"label", p.label},
                      {"reason", p.reason}, {"span", p.span},                   {"parse_path", to_string(p.parse_path)}};
        } catch (const Error& e) {
            out[i] = {{"id", n.id}, {"variable", config.variable.name}, {"label", kUnparseableLabel},
                      {"error", e.what()}};
        }
        out[i]["temperature"] = endpoint.temperature;
    });
    return out;
}

Json agreement_record(const std::string& variable, const std::vector<LabelPair>& pairs, const Variable* spec,
                      std::size_t iterations, std::uint64_t seed) {
    const auto a = bootstrap_agreement(pairs, iterations, 0.95, seed);
    std::optional<ConfusionCounts> counts;
    std::vector<std::string> options;
    if (spec) {
        options = spec->response_options;
    } else {
        std::set<std::string> seen;
        for (const auto& p : pairs) seen.insert(p.reference);
        if (std::all_of(seen.begin(), seen.end(), [](const std::string& l) { return l == "0.0" || l == "1.0"; })) {
            options = {"0.0", "1.0"};
        }
    }
    if (options.size() == 2) {
        std::vector<LabelPair> binary;
        for (const auto& p : pairs) {
            if (std::find(options.begin(), options.end(), p.predicted) != options.end()) binary.push_back(p);
        }
        const std::string positive = spec ? spec->positive_label() : "1.0";
        if (!binary.empty()) counts = confusion(binary, positive, options);
    }
    return variable_report(variable, a, counts);
}

std::string describe(const Json& r) {
    auto rate = [&](const char* key) { return r[key].is_null() ? std::string("n/a") : fixed(r[key].get<double>()); };
    return r["variable"].get<std::string>() + ": agreement " + fixed(r["agreement"].get<double>()) + " [" +
           fixed(r["ci"][0].get<double>()) + ", " + fixed(r["ci"][1].get<double>()) + "] n=" +
           std::to_string(r["n"].get<std::size_t>()) + " TPR " + rate("tpr") + " FPR " + rate("fpr") + " FNR " +
           rate("fnr");
}

int cmd_annotate(const Shared& s, const AnnotateArgs& a) {
    const Variable variable = require_variable(s);
    auto corpus = require_corpus(s);
    const RunConfig config = run_config_from_json(run_spec(s, variable));
    PromptTemplates templates = config.effective_templates();
    if (!a.templates.empty()) templates = load_templates(a.templates);
    auto models = default_models(config);

    std::vector<double> temps = a.temperatures;
    if (temps.empty()) temps.push_back(config.annotator.temperature);
    std::vector<std::vector<Json>> runs;
    for (double t : temps) {
        ModelEndpoint endpoint = config.annotator;
        endpoint.temperature = t;
        validate(endpoint);
        runs.push_back(annotate_once(*corpus, config, *models.annotator, endpoint, templates));
    }

    std::vector<Json> all;
    for (const auto& run : runs) all.insert(all.end(), run.begin(), run.end());
    if (!s.out.empty()) {
        write_text(s.out, jsonl(all));
    } else if (s.format == "jsonl") {
        std::cout << jsonl(all);
    }
    std::size_t failed = 0;
    for (const auto& r : all) failed += r.contains("error");
    std::cerr << "annotated " << corpus->size() << " narratives x " << temps.size() << " temperature(s), " << failed
              << " unparseable\n";

    const auto reference = corpus->labels_for(variable.name);
    if (!reference.labels.empty()) {
        for (std::size_t r = 0; r < runs.size(); ++r) {
            std::vector<LabelPair> pairs;
            for (const auto& rec : runs[r]) {
                auto it = reference.labels.find(rec["id"].get<std::string>());
                if (it != reference.labels.end()) pairs.push_back({it->first, rec["label"].get<std::string>(), it->second});
            }
            Json rep = agreement_record(variable.name, pairs, &variable, a.bootstrap_iterations, s.seed);
            rep["temperature"] = temps[r];
            if (s.format == "jsonl" && !s.out.empty()) std::cout << rep.dump() << "\n";
            else if (s.format == "text") std::cout << describe(rep) << " (T=" << fixed(temps[r], 1) << ")\n";
        }
    }
    if (runs.size() > 1) {
        std::vector<std::vector<std::string>> labels;
        for (const auto& run : runs) {
            std::vector<std::string> l;
            for (const auto& rec : run) l.push_back(rec["label"].get<std::string>());
            labels.push_back(std::move(l));
        }
        const double sc = self_consistency(labels);
        if (s.format == "jsonl" && !s.out.empty()) {
            std::cout << Json{{"variable", variable.name}, {"self_consistency", sc}, {"temperatures", temps}}.dump()
                      << "\n";
        } else if (s.format == "text") {
            std::cout << "self-consistency " << fixed(sc) << " across " << runs.size() << " temperatures\n";
        }
    }
    return 0;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
    std::string predictions;
    std::string compare;
    std::size_t bootstrap_iterations = 10000;
    double level = 0.95;
    std::size_t comparisons = 1;
    double alpha = 0.05;
};

/// variable -> id -> label, from a predictions file.
std::map<std::string, std::map<std::string, std::string>> load_predictions(const std::string& path,
                                                                           const std::string& fallback_variable) {
    std::map<std::string, std::map<std::string, std::string>> out;
    for (const auto& r : read_jsonl(path)) {
        const std::string var = r.value("variable", fallback_variable);
        if (var.empty()) throw Error(path + ": record without a variable and no --variable given");
        out[var][r.at("id").get<std::string>()] = r.at("label").get<std::string>();
    }
    return out;
}

std::vector<LabelPair> pair_with_reference(const Corpus& corpus, const std::string& variable,
                                           const std::map<std::string, std::string>& predicted) {
    std::vector<LabelPair> pairs;
    for (const auto& [id, label] : predicted) {
        if (!corpus.contains(id)) continue;
        const auto& labels = corpus.at(id).labels;
        if (auto it = labels.find(variable); it != labels.end()) pairs.push_back({id, label, it->second});
    }
    return pairs;
}

int cmd_evaluate(const Shared& s, const EvaluateArgs& a) {
    if (a.predictions.empty()) throw UsageError("--predictions is required");
    auto corpus = require_corpus(s);
    const auto variable = load_variable(s);
    const std::string fallback = variable ? variable->name : std::string();
    const auto first = load_predictions(a.predictions, fallback);

    std::vector<std::string> names;
    std::vector<double> agree_a;
    for (const auto& [var, predicted] : first) {
        if (variable && var != variable->name) continue;
        auto pairs = pair_with_reference(*corpus, var, predicted);
        if (pairs.empty()) {
            std::cerr << "warning: no reference labels for " << var << "\n";
            continue;
        }
        const Variable* spec = variable && variable->name == var ? &*variable : nullptr;
        Json rep = agreement_record(var, pairs, spec, a.bootstrap_iterations, s.seed);
        rep["bootstrap_iterations"] = a.bootstrap_iterations;
        rep["level"] = a.level;
        report(s, rep, describe(rep));
        names.push_back(var);
        agree_a.push_back(rep["agreement"].get<double>());
    }
    if (names.empty()) throw Error("nothing to evaluate");

    if (!a.compare.empty()) {
        const auto second = load_predictions(a.compare, fallback);
        std::vector<double> x, y;
        for (std::size_t i = 0; i < names.size(); ++i) {
            auto it = second.find(names[i]);
            if (it == second.end()) {
                std::cerr << "warning: " << a.compare << " has no predictions for " << names[i] << "\n";
                continue;
            }
            auto pairs = pair_with_reference(*corpus, names[i], it->second);
            if (pairs.empty()) continue;
            x.push_back(agree_a[i]);
            y.push_back(agreement(pairs));
        }
        const double threshold = bonferroni_alpha(a.alpha, a.comparisons);
        const auto t = paired_t_test(x, y);
        Json rec = {{"test", "paired_t"},
                    {"variables", x.size()},
                    {"t", t.t},
                    {"df", t.df},
                    {"p", t.p_two_sided},
                    {"mean_difference", t.mean_difference},
                    {"alpha", a.alpha},
                    {"comparisons", a.comparisons},
                    {"threshold", threshold},
                    {"significant", t.p_two_sided < threshold}};
        report(s, rec,
               "paired t over " + std::to_string(x.size()) + " variables: t=" + fixed(t.t) + " df=" +
                   std::to_string(t.df) + " p=" + fixed(t.p_two_sided, 4) + " (Bonferroni threshold " +
                   fixed(threshold, 4) + (t.p_two_sided < threshold ? ", significant)" : ", not significant)"));
    }
    return 0;
}

// ---- develop --------------------------------------------------------------

struct DevelopArgs {
    std::string mode = "simulated";
    std::string run_dir;
    std::string run_id;
    bool resume = false;
    std::string sampling;
    std::string cot_cache;
    std::optional<std::size_t> budget, batch_size, min_guide, max_iterations;
    std::optional<double> target;
    std::vector<std::string> keywords;
    std::string host = "127.0.0.1";
    int port = 8080;
};

std::map<std::string, std::string> load_cot_cache(const std::string& path) {
    std::map<std::string, std::string> out;
    if (path.empty()) return out;
    for (const auto& r : read_jsonl(path)) {
        out[r.at("id").get<std::string>()] = r.value("rationale", r.value("reason", std::string()));
    }
    return out;
}

void print_summary(const Shared& s, const RunSession& session) {
    const auto& st = session.state();
    Json rec = {{"run_id", st.run_id},
                {"status", to_string(st.status)},
                {"stop_reason", st.stop_reason},
                {"t", st.t},
                {"guide_size", st.guide.size()},
                {"codebook_version", st.codebook.version},
                {"acc_val", st.history.empty() ? Json(nullptr) : Json(st.history.back().acc_val)}};
    std::string human = st.run_id + ": " + to_string(st.status) + " (" + st.stop_reason + ") after " +
                        std::to_string(st.t) + " iterations, |guide|=" + std::to_string(st.guide.size()) +
                        ", codebook v" + std::to_string(st.codebook.version);
    if (!st.history.empty()) human += ", validation accuracy " + fixed(st.history.back().acc_val);
    report(s, rec, human);
}

int cmd_serve_with(const fs::path& run_root, const std::string& corpus_path, const std::string& host, int port);

int cmd_develop(const Shared& s, const DevelopArgs& a) {
    if (a.run_dir.empty()) throw UsageError("--run-dir is required");
    if (a.mode != "simulated" && a.mode != "interactive") throw UsageError("--mode must be simulated or interactive");

    std::unique_ptr<RunSession> session;
    if (a.resume) {
        if (a.run_id.empty()) throw UsageError("--resume needs --run-id");
        std::shared_ptr<const Corpus> corpus;
        if (!s.corpus.empty()) corpus = require_corpus(s);
        session = RunSession::resume(fs::path(a.run_dir) / a.run_id, default_models, corpus);
        std::cerr << "resumed " << a.run_id << " at t=" << session->state().t << "\n";
    } else {
        const Variable variable = require_variable(s);
        auto corpus = require_corpus(s);
        Json spec = run_spec(s, variable);
        if (a.budget) spec["b"] = *a.budget;
        if (a.batch_size) spec["n"] = *a.batch_size;
        if (a.min_guide) spec["k"] = *a.min_guide;
        if (a.target) spec["m"] = *a.target;
        if (a.max_iterations) spec["max_iterations"] = *a.max_iterations;
        if (!a.sampling.empty()) spec["sampling"] = a.sampling;
        if (!a.keywords.empty()) spec["keywords"] = a.keywords;
        const RunConfig config = run_config_from_json(spec);
        const std::string run_id =
            a.run_id.empty() ? "dev-" + variable.name + "-" + std::to_string(s.seed) : a.run_id;
        session = RunSession::create(fs::path(a.run_dir) / run_id, run_id, config, s.corpus, corpus,
                                     corpus->labels_for(variable.name), default_models, a.mode == "interactive");
        std::cerr << "created " << run_id << " in " << a.run_dir << "\n";
    }

    if (a.mode == "interactive") {
        const std::string corpus_path = s.corpus;
        session.reset();
        return cmd_serve_with(a.run_dir, corpus_path, a.host, a.port);
    }

    const auto& config = session->config();
    const auto& st = session->state();
    std::vector<std::string> required = st.pool;
    SimulatedProvider provider(session->corpus().labels_for(config.variable.name), load_cot_cache(a.cot_cache),
                               required);
    session->run(provider);
    session->finalize();
    print_summary(s, *session);
    return 0;
}

// ---- serve ----------------------------------------------------------------

int cmd_serve_with(const fs::path& run_root, const std::string& corpus_path, const std::string& host, int port) {
    // Signals are taken synchronously by this thread; every other thread
    // inherits the blocked mask.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    ServiceOptions options;
    options.run_root = run_root;
    options.default_corpus_path = corpus_path;
    Service service(options);
    for (const auto& problem : service.load_existing_runs()) std::cerr << "skipped run: " << problem << "\n";
    int bound = 0;
    try {
        bound = service.start(host, port);
    } catch (const TransportError& e) {
        std::cerr << "error: " << e.what() << " (port in use?)\n";
        return 1;
    }
    std::cerr << "listening on http://" << host << ":" << bound << "\n" << std::flush;
    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "shutting down\n";
    service.stop();
    return 0;
}

struct ServeArgs {
    std::string run_dir;
    std::string host = "127.0.0.1";
    int port = 8080;
};

int cmd_serve(const Shared& s, const ServeArgs& a) {
    if (a.run_dir.empty()) throw UsageError("--run-dir is required");
    return cmd_serve_with(a.run_dir, s.corpus, a.host, a.port);
}

// ---- export ---------------------------------------------------------------

struct ExportArgs {
    std::string run_dir;
    bool timeline = false;
    std::optional<std::size_t> disagreements, agreements;
    std::string predictions;
};

int cmd_export(const Shared& s, const ExportArgs& a) {
    if (!a.timeline && !a.disagreements && !a.agreements) {
        throw UsageError("nothing to export: pass --timeline or --disagreements/--agreements");
    }
    if (a.timeline) {
        if (a.run_dir.empty()) throw UsageError("--timeline needs --run-dir");
        auto store = RunStore::open(a.run_dir, RunStore::Access::read_only);
        const auto csv = store.export_metrics_timeline();
        if (s.out.empty()) std::cout << csv;
        else write_text(s.out, csv);
    }
    if (a.disagreements || a.agreements) {
        if (a.predictions.empty()) throw UsageError("queues need --predictions");
        const Variable variable = require_variable(s);
        auto corpus = require_corpus(s);
        const auto predicted = load_predictions(a.predictions, variable.name);
        auto it = predicted.find(variable.name);
        if (it == predicted.end()) throw Error("no predictions for " + variable.name);
        const auto pairs = pair_with_reference(*corpus, variable.name, it->second);
        const std::size_t want_d = a.disagreements.value_or(0);
        const std::size_t want_a = a.agreements.value_or(0);
        auto q = disagreement_queue(pairs, std::max(want_d, want_a), s.seed);
        if (q.disagree.size() > want_d) q.disagree.resize(want_d);
        if (q.agree.size() > want_a) q.agree.resize(want_a);
        if (q.disagree.size() < want_d) {
            std::cerr << "warning: only " << q.disagree.size() << " disagreements available, " << want_d
                      << " requested\n";
        }
        if (q.agree.size() < want_a) {
            std::cerr << "warning: only " << q.agree.size() << " agreements available, " << want_a << " requested\n";
        }
        Json rec = {{"variable", variable.name}, {"seed", s.seed}, {"disagree", q.disagree}, {"agree", q.agree}};
        if (!s.out.empty()) {
            write_text(s.out, rec.dump(2) + "\n");
        } else if (s.format == "jsonl") {
            for (const auto& id : q.disagree) std::cout << Json{{"queue", "disagree"}, {"id", id}}.dump() << "\n";
            for (const auto& id : q.agree) std::cout << Json{{"queue", "agree"}, {"id", id}}.dump() << "\n";
        } else {
            std::cout << "disagree (" << q.disagree.size() << "): " << join(q.disagree, " ") << "\n";
            std::cout << "agree (" << q.agree.size() << "): " << join(q.agree, " ") << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Codebook development and LM annotation for narrative corpora"};
    app.require_subcommand(1);
    Shared shared;

    auto* ingest = app.add_subcommand("ingest", "Validate a corpus or write a synthetic one");
    add_shared(ingest, shared);
    IngestArgs ingest_args;
    ingest->add_option("--synthetic", ingest_args.synthetic, "Synthetic corpus spec file, or 'legal'");
    ingest->add_option("--cot-out", ingest_args.cot_out, "Where to write cached reasoning for the synthetic corpus");
    ingest->add_option("--variable-out", ingest_args.variable_out, "Where to write the synthetic variable spec");

    auto* annotate = app.add_subcommand("annotate", "Label every narrative with the current guidelines");
    add_shared(annotate, shared);
    AnnotateArgs annotate_args;
    annotate->add_option("--temperatures", annotate_args.temperatures, "Comma-separated sampling temperatures")
        ->delimiter(',');
    annotate->add_option("--templates", annotate_args.templates, "Prompt template file");
    annotate->add_option("--bootstrap-iterations", annotate_args.bootstrap_iterations);

    auto* evaluate = app.add_subcommand("evaluate", "Agreement with reference labels");
    add_shared(evaluate, shared);
    EvaluateArgs evaluate_args;
    evaluate->add_option("--predictions", evaluate_args.predictions, "Predictions file (id, label[, variable])");
    evaluate->add_option("--compare", evaluate_args.compare, "Second predictions file for a paired t test");
    evaluate->add_option("--bootstrap-iterations", evaluate_args.bootstrap_iterations);
    evaluate->add_option("--comparisons", evaluate_args.comparisons, "Number of comparisons for Bonferroni");
    evaluate->add_option("--alpha", evaluate_args.alpha);

    auto* develop = app.add_subcommand("develop", "Iterative codebook development");
    add_shared(develop, shared);
    DevelopArgs develop_args;
    develop->add_option("--mode", develop_args.mode, "simulated or interactive");
    develop->add_option("--run-dir", develop_args.run_dir, "Directory holding runs");
    develop->add_option("--run-id", develop_args.run_id);
    develop->add_flag("--resume", develop_args.resume, "Continue an existing run");
    develop->add_option("--sampling", develop_args.sampling, "random or coverage");
    develop->add_option("--cot-cache", develop_args.cot_cache, "Cached reasoning file (id, rationale)");
    develop->add_option("--budget", develop_args.budget);
    develop->add_option("--batch-size", develop_args.batch_size);
    develop->add_option("--min-guide", develop_args.min_guide);
    develop->add_option("--target", develop_args.target, "Validation accuracy that ends the run");
    develop->add_option("--max-iterations", develop_args.max_iterations);
    develop->add_option("--keywords", develop_args.keywords)->delimiter(',');
    develop->add_option("--host", develop_args.host);
    develop->add_option("--port", develop_args.port);

    auto* serve = app.add_subcommand("serve", "Serve runs over HTTP");
    add_shared(serve, shared);
    ServeArgs serve_args;
    serve->add_option("--run-dir", serve_args.run_dir, "Directory holding runs")->required();
    serve->add_option("--host", serve_args.host);
    serve->add_option("--port", serve_args.port);

    auto* exp = app.add_subcommand("export", "Review queues and metric timelines");
    add_shared(exp, shared);
    ExportArgs export_args;
    exp->add_option("--run-dir", export_args.run_dir, "A single run directory");
    exp->add_flag("--timeline", export_args.timeline, "Per-iteration metrics as CSV");
    exp->add_option("--disagreements", export_args.disagreements);
    exp->add_option("--agreements", export_args.agreements);
    exp->add_option("--predictions", export_args.predictions);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*ingest) return cmd_ingest(shared, ingest_args);
        if (*annotate) return cmd_annotate(shared, annotate_args);
        if (*evaluate) return cmd_evaluate(shared, evaluate_args);
        if (*develop) return cmd_develop(shared, develop_args);
        if (*serve) return cmd_serve(shared, serve_args);
        if (*exp) return cmd_export(shared, export_args);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        for (auto* sub : app.get_subcommands()) std::cerr << sub->help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
