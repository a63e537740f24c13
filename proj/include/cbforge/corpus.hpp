#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace cbforge {

using Json = nlohmann::json;

/// One case record: two free-text narrative fields plus optional reference labels.
struct Narrative {
    std::string id;
    std::string cme_text;
    std::string le_text;
    std::map<std::string, std::string> labels;  // variable name -> label
    std::map<std::string, std::string> meta;

    bool operator==(const Narrative&) const = default;
};

enum class VariableKind { binary, multiclass };

struct Variable {
    std::string name;
    VariableKind kind = VariableKind::binary;
    std::vector<std::string> response_options;
    std::optional<std::string> reference_codebook_text;
    std::map<std::string, std::string> option_definitions;  // label -> one-line definition

    bool has_option(const std::string& label) const;
    /// "1.0" for binary variables; empty for multiclass.
    std::string positive_label() const;

    bool operator==(const Variable&) const = default;
};

/// Throws ValidationError unless the variable has >= 2 distinct options.
void validate(const Variable& variable);

Variable binary_variable(std::string name);

struct LabelSet {
    std::string variable;
    std::map<std::string, std::string> labels;  // narrative id -> label
    std::string annotator;
    std::map<std::string, std::string> rationale;
};

/// Throws ValidationError if any label lies outside the variable's options.
void validate(const LabelSet& labels, const Variable& variable);

enum class SplitRole { full, balanced_eval, random_eval, validation, guide };

std::string to_string(SplitRole role);
SplitRole split_role_from_string(const std::string& text);

struct DatasetSplit {
    SplitRole role = SplitRole::full;
    std::vector<std::string> ids;
    std::uint64_t seed = 0;

    bool operator==(const DatasetSplit&) const = default;
};

/// Immutable after construction; safe for concurrent reads.
class Corpus {
public:
    Corpus() = default;
    explicit Corpus(std::vector<Narrative> narratives);

    std::size_t size() const { return narratives_.size(); }
    bool empty() const { return narratives_.empty(); }
    const std::vector<Narrative>& narratives() const { return narratives_; }
    std::vector<std::string> ids() const;

    bool contains(const std::string& id) const { return index_.count(id) != 0; }
    /// Throws NotFound.
    const Narrative& at(const std::string& id) const;

    /// Reference labels for one variable, taken from the records' label maps.
    LabelSet labels_for(const std::string& variable, const std::string& annotator = "reference") const;

private:
    std::vector<Narrative> narratives_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct IngestReject {
    std::size_t line = 0;  // 1-based
    std::string reason;
};

struct IngestResult {
    Corpus corpus;
    std::vector<IngestReject> rejects;
};

/// Reads one JSON record per line. Bad lines are reported, not fatal; a
/// stream with no valid record throws ValidationError.
IngestResult ingest_corpus(std::istream& source);
IngestResult ingest_corpus_file(const std::string& path);

/// "CME Report: <cme>\n\nLE Report: <le>", omitting an empty section.
std::string concat_narrative(const Narrative& narrative);

DatasetSplit build_balanced_split(const Corpus& corpus, const LabelSet& labels, std::size_t per_class,
                                  std::uint64_t seed, const std::vector<std::string>& classes = {});

DatasetSplit build_random_split(const Corpus& corpus, std::size_t count, std::uint64_t seed);

/// Exactly `per_class` ids per class: seeded shuffle, first `per_class` of
/// each class, result sorted by id.
DatasetSplit build_validation_split(const LabelSet& labels, std::size_t per_class, std::uint64_t seed = 0,
                                    const std::vector<std::string>& classes = {});

Json to_json(const Narrative& narrative);
Narrative narrative_from_json(const Json& record);
Json to_json(const Variable& variable);
Variable variable_from_json(const Json& spec);
Variable load_variable_file(const std::string& path);
Json to_json(const DatasetSplit& split);
DatasetSplit split_from_json(const Json& record);

}  // namespace cbforge
