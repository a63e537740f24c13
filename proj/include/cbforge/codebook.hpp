#pragma once

#include "cbforge/corpus.hpp"

#include <string>
#include <vector>

namespace cbforge {

struct GuidelineBullet {
    std::string text;
    int origin_iteration = 0;
    std::vector<std::string> origin_feedback_ids;  // empty for seed bullets

    bool operator==(const GuidelineBullet&) const = default;
};

/// A versioned guideline set for one variable. `preamble` is the annotation
/// template the codebook renders with; version 0 carries no bullets.
struct Codebook {
    std::string variable;
    int version = 0;
    std::string preamble;
    std::string response_options_block;
    std::vector<std::string> response_options;
    std::vector<GuidelineBullet> bullets;

    std::vector<std::string> bullet_texts() const;
    bool operator==(const Codebook&) const = default;
};

/// Annotation and guideline-update prompt texts.
///
/// Annotation placeholders: {options}, {guidelines}, {narrative} exactly once,
/// {variable} and {option_list} optional. Everything before {narrative}
/// becomes the system message; {narrative} and what follows it the user
/// message. Update placeholders: {guidelines} and {errors} exactly once,
/// {variable}, {options} and {option_list} any number of times; the split
/// happens at {errors}.
struct PromptTemplates {
    std::string annotation_template;
    std::string update_template;

    static PromptTemplates defaults_for(VariableKind kind);
};

/// Throws ValidationError naming the first missing or repeated placeholder.
void validate(const PromptTemplates& templates);

/// Reads "=== annotation ===" / "=== update ===" sections from a file.
PromptTemplates load_templates(const std::string& path);

struct PromptPair {
    std::string system;
    std::string user;
};

Codebook init_codebook(const Variable& variable, const PromptTemplates& templates);
Codebook init_codebook(const Variable& variable);

std::string render_options_block(const Variable& variable);

/// "\n\nGuidelines:\n* a\n* b", or empty when there are no bullets.
std::string render_guidelines_section(const Codebook& codebook);

PromptPair render_annotation_prompt(const Codebook& codebook, const std::string& narrative_text);

/// Strips an optional "Guidelines:" prefix and splits on "*" markers (or
/// line-leading "-"; plain lines when no marker exists). Throws ParseError
/// when nothing is recovered.
std::vector<std::string> parse_guideline_list(const std::string& text);

/// "Guidelines: * a * b", the shape the synthesis prompt asks for.
std::string render_guideline_list(const std::vector<std::string>& bullets);

enum class UpdateMode { append, replace };

std::string to_string(UpdateMode mode);
UpdateMode update_mode_from_string(const std::string& text);

/// Version + 1. Append: previous bullets followed by unseen new ones.
/// Replace: exactly the new list. Exact-string dedup either way; bullets
/// carried over keep their provenance, fresh ones get (iteration, feedback_ids).
Codebook apply_update(const Codebook& codebook, const std::vector<std::string>& new_bullets, int iteration,
                      const std::vector<std::string>& feedback_ids, UpdateMode mode = UpdateMode::append);

struct CodebookDiff {
    std::vector<std::string> added;
    std::vector<std::string> removed;
};

CodebookDiff diff(const Codebook& from, const Codebook& to);

/// One LM error as shown to the guideline-synthesis call.
struct GuidelineError {
    std::string feedback_id;
    std::string narrative_text;
    std::string model_label;
    std::string correct_label;
    std::string rationale;
    std::string span;
};

PromptPair render_update_prompt(const Codebook& codebook, const std::vector<GuidelineError>& errors,
                                const std::string& update_template);

Json to_json(const Codebook& codebook);
Codebook codebook_from_json(const Json& record);

}  // namespace cbforge
