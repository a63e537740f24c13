#include "cbforge/corpus.hpp"

#include "cbforge/error.hpp"
#include "cbforge/rng.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>

namespace cbforge {

namespace {

std::string label_value(const Json& value) {
    if (value.is_string()) {
        return value.get<std::string>();
    }
    if (value.is_number()) {
        // binary exports sometimes carry 0/1 as numbers; keep the "1.0" form
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(1);
        os << value.get<double>();
        return os.str();
    }
    throw ValidationError("label values must be strings");
}

std::vector<std::string> classes_of(const LabelSet& labels, const std::vector<std::string>& classes) {
    if (!classes.empty()) {
        return classes;
    }
    std::set<std::string> seen;
    for (const auto& [id, label] : labels.labels) {
        seen.insert(label);
    }
    return {seen.begin(), seen.end()};
}

}  // namespace

bool Variable::has_option(const std::string& label) const {
    return std::find(response_options.begin(), response_options.end(), label) != response_options.end();
}

std::string Variable::positive_label() const {
    return kind == VariableKind::binary ? std::string("1.0") : std::string();
}

void validate(const Variable& variable) {
    if (variable.name.empty()) {
        throw ValidationError("variable name is empty", "name");
    }
    if (variable.response_options.size() < 2) {
        throw ValidationError("variable " + variable.name + " needs at least 2 response options",
                              "response_options");
    }
    std::set<std::string> distinct(variable.response_options.begin(), variable.response_options.end());
    if (distinct.size() != variable.response_options.size()) {
        throw ValidationError("variable " + variable.name + " has duplicate response options",
                              "response_options");
    }
}

Variable binary_variable(std::string name) {
    Variable v;
    v.name = std::move(name);
    v.kind = VariableKind::binary;
    v.response_options = {"0.0", "1.0"};
    return v;
}

void validate(const LabelSet& labels, const Variable& variable) {
    for (const auto& [id, label] : labels.labels) {
        if (!variable.has_option(label)) {
            throw ValidationError("label '" + label + "' for " + id + " is not a response option of " +
                                  variable.name);
        }
    }
}

std::string to_string(SplitRole role) {
    switch (role) {
        case SplitRole::full: return "full";
        case SplitRole::balanced_eval: return "balanced_eval";
        case SplitRole::random_eval: return "random_eval";
        case SplitRole::validation: return "validation";
        case SplitRole::guide: return "guide";
    }
    return "full";
}

SplitRole split_role_from_string(const std::string& text) {
    for (auto role : {SplitRole::full, SplitRole::balanced_eval, SplitRole::random_eval, SplitRole::validation,
                      SplitRole::guide}) {
        if (to_string(role) == text) {
            return role;
        }
    }
    throw ValidationError("unknown split role '" + text + "'", "role");
}

Corpus::Corpus(std::vector<Narrative> narratives) : narratives_(std::move(narratives)) {
    for (std::size_t i = 0; i < narratives_.size(); ++i) {
        const auto& n = narratives_[i];
        if (n.id.empty()) {
            throw ValidationError("narrative id is empty");
        }
        if (n.cme_text.empty() && n.le_text.empty()) {
            throw ValidationError("narrative " + n.id + " has no text");
        }
        if (!index_.emplace(n.id, i).second) {
            throw ValidationError("duplicate narrative id " + n.id);
        }
    }
}

std::vector<std::string> Corpus::ids() const {
    std::vector<std::string> out;
    out.reserve(narratives_.size());
    for (const auto& n : narratives_) {
        out.push_back(n.id);
    }
    return out;
}

const Narrative& Corpus::at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) {
        throw NotFound("unknown narrative " + id);
    }
    return narratives_[it->second];
}

LabelSet Corpus::labels_for(const std::string& variable, const std::string& annotator) const {
    LabelSet out;
    out.variable = variable;
    out.annotator = annotator;
    for (const auto& n : narratives_) {
        if (auto it = n.labels.find(variable); it != n.labels.end()) {
            out.labels.emplace(n.id, it->second);
        }
    }
    return out;
}

Narrative narrative_from_json(const Json& record) {
    if (!record.is_object()) {
        throw ValidationError("record is not an object");
    }
    Narrative n;
    if (!record.contains("id") || !record["id"].is_string() || record["id"].get<std::string>().empty()) {
        throw ValidationError("missing id", "id");
    }
    n.id = record["id"].get<std::string>();
    auto text_field = [&](const char* key) -> std::string {
        if (!record.contains(key) || record[key].is_null()) {
            return {};
        }
        if (!record[key].is_string()) {
            throw ValidationError(std::string("field ") + key + " must be a string", key);
        }
        return record[key].get<std::string>();
    };
    n.cme_text = text_field("cme");
    n.le_text = text_field("le");
    if (n.cme_text.empty() && n.le_text.empty()) {
        throw ValidationError("both cme and le are empty", "cme");
    }
    if (record.contains("labels") && !record["labels"].is_null()) {
        if (!record["labels"].is_object()) {
            throw ValidationError("labels must be an object", "labels");
        }
        for (const auto& [key, value] : record["labels"].items()) {
            n.labels[key] = label_value(value);
        }
    }
    if (record.contains("meta") && !record["meta"].is_null()) {
        if (!record["meta"].is_object()) {
            throw ValidationError("meta must be an object", "meta");
        }
        for (const auto& [key, value] : record["meta"].items()) {
            n.meta[key] = value.is_string() ? value.get<std::string>() : value.dump();
        }
    }
    return n;
}

Json to_json(const Narrative& narrative) {
    Json j = {{"id", narrative.id}, {"cme", narrative.cme_text}, {"le", narrative.le_text}};
    if (!narrative.labels.empty()) {
        j["labels"] = narrative.labels;
    }
    if (!narrative.meta.empty()) {
        j["meta"] = narrative.meta;
    }
    return j;
}

IngestResult ingest_corpus(std::istream& source) {
    IngestResult result;
    std::vector<Narrative> accepted;
    std::unordered_map<std::string, std::size_t> first_line;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        try {
            auto n = narrative_from_json(Json::parse(line));
            auto [it, inserted] = first_line.emplace(n.id, line_no);
            if (!inserted) {
                result.rejects.push_back(
                    {line_no, "duplicate id " + n.id + " (first seen on line " + std::to_string(it->second) + ")"});
                continue;
            }
            accepted.push_back(std::move(n));
        } catch (const Json::parse_error& e) {
            result.rejects.push_back({line_no, std::string("malformed record: ") + e.what()});
        } catch (const ValidationError& e) {
            result.rejects.push_back({line_no, e.what()});
        }
    }
    if (accepted.empty()) {
        throw ValidationError("no parseable records in corpus (" + std::to_string(result.rejects.size()) +
                              " rejected lines)");
    }
    result.corpus = Corpus(std::move(accepted));
    return result;
}

IngestResult ingest_corpus_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open corpus " + path);
    }
    return ingest_corpus(in);
}

std::string concat_narrative(const Narrative& narrative) {
    if (narrative.cme_text.empty() && narrative.le_text.empty()) {
        throw ValidationError("narrative " + narrative.id + " has neither CME nor LE text");
    }
    std::string out;
    if (!narrative.cme_text.empty()) {
        out += "CME Report: " + narrative.cme_text;
    }
    if (!narrative.le_text.empty()) {
        if (!out.empty()) {
            out += "\n\n";
        }
        out += "LE Report: " + narrative.le_text;
    }
    return out;
}

DatasetSplit build_balanced_split(const Corpus& corpus, const LabelSet& labels, std::size_t per_class,
                                  std::uint64_t seed, const std::vector<std::string>& classes) {
    std::map<std::string, std::vector<std::string>> members;
    for (const auto& cls : classes_of(labels, classes)) {
        members[cls];
    }
    for (const auto& [id, label] : labels.labels) {
        if (corpus.contains(id)) {
            if (auto it = members.find(label); it != members.end()) {
                it->second.push_back(id);
            }
        }
    }
    for (const auto& [cls, ids] : members) {
        if (ids.size() < per_class) {
            throw ValidationError("class " + cls + " has " + std::to_string(ids.size()) + " < " +
                                  std::to_string(per_class));
        }
    }
    Rng rng(seed);
    DatasetSplit split{SplitRole::balanced_eval, {}, seed};
    for (auto& [cls, ids] : members) {
        rng.shuffle(ids);
        split.ids.insert(split.ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(per_class));
    }
    rng.shuffle(split.ids);
    return split;
}

DatasetSplit build_random_split(const Corpus& corpus, std::size_t count, std::uint64_t seed) {
    if (count > corpus.size()) {
        throw ValidationError("random split of " + std::to_string(count) + " exceeds corpus size " +
                              std::to_string(corpus.size()));
    }
    auto ids = corpus.ids();
    Rng rng(seed);
    rng.shuffle(ids);
    ids.resize(count);
    return {SplitRole::random_eval, std::move(ids), seed};
}

DatasetSplit build_validation_split(const LabelSet& labels, std::size_t per_class, std::uint64_t seed,
                                    const std::vector<std::string>& classes) {
    std::map<std::string, std::vector<std::string>> members;
    for (const auto& cls : classes_of(labels, classes)) {
        members[cls];
    }
    for (const auto& [id, label] : labels.labels) {
        if (auto it = members.find(label); it != members.end()) {
            it->second.push_back(id);
        }
    }
    std::string deficits;
    for (const auto& [cls, ids] : members) {
        if (ids.size() < per_class) {
            if (!deficits.empty()) {
                deficits += "; ";
            }
            deficits += cls + ": " + std::to_string(ids.size()) + " < " + std::to_string(per_class);
        }
    }
    if (!deficits.empty()) {
        throw ValidationError("validation split deficit: " + deficits, "j");
    }
    Rng rng(seed);
    DatasetSplit split{SplitRole::validation, {}, seed};
    for (auto& [cls, ids] : members) {
        rng.shuffle(ids);
        split.ids.insert(split.ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(per_class));
    }
    std::sort(split.ids.begin(), split.ids.end());
    return split;
}

Json to_json(const Variable& variable) {
    Json j = {{"name", variable.name},
              {"kind", variable.kind == VariableKind::binary ? "binary" : "multiclass"},
              {"response_options", variable.response_options}};
    if (variable.reference_codebook_text) {
        j["reference_codebook_text"] = *variable.reference_codebook_text;
    }
    if (!variable.option_definitions.empty()) {
        j["option_definitions"] = variable.option_definitions;
    }
    return j;
}

Variable variable_from_json(const Json& spec) {
    Variable v;
    if (!spec.is_object() || !spec.contains("name") || !spec["name"].is_string()) {
        throw ValidationError("variable spec needs a string 'name'", "name");
    }
    v.name = spec["name"].get<std::string>();
    const std::string kind = spec.value("kind", std::string("binary"));
    if (kind == "binary") {
        v.kind = VariableKind::binary;
    } else if (kind == "multiclass") {
        v.kind = VariableKind::multiclass;
    } else {
        throw ValidationError("variable kind must be binary or multiclass", "kind");
    }
    if (spec.contains("response_options")) {
        v.response_options = spec["response_options"].get<std::vector<std::string>>();
    } else if (v.kind == VariableKind::binary) {
        v.response_options = {"0.0", "1.0"};
    }
    if (spec.contains("reference_codebook_text") && spec["reference_codebook_text"].is_string()) {
        v.reference_codebook_text = spec["reference_codebook_text"].get<std::string>();
    }
    if (spec.contains("option_definitions")) {
        v.option_definitions = spec["option_definitions"].get<std::map<std::string, std::string>>();
    }
    validate(v);
    return v;
}

Variable load_variable_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open variable spec " + path);
    }
    return variable_from_json(Json::parse(in));
}

Json to_json(const DatasetSplit& split) {
    return {{"role", to_string(split.role)}, {"seed", split.seed}, {"ids", split.ids}};
}

DatasetSplit split_from_json(const Json& record) {
    DatasetSplit split;
    split.role = split_role_from_string(record.at("role").get<std::string>());
    split.seed = record.value("seed", std::uint64_t{0});
    split.ids = record.at("ids").get<std::vector<std::string>>();
    std::set<std::string> distinct(split.ids.begin(), split.ids.end());
    if (distinct.size() != split.ids.size()) {
        throw ValidationError("split ids contain duplicates", "ids");
    }
    return split;
}

}  // namespace cbforge
