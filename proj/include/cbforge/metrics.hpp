#pragma once

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cbforge {

using Json = nlohmann::json;

struct LabelPair {
    std::string narrative_id;
    std::string predicted;
    std::string reference;
};

double agreement(const std::vector<LabelPair>& pairs);

/// Rates are nullopt when their denominator is zero.
struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;
    std::string positive_label;
    std::optional<double> tpr;
    std::optional<double> fpr;
    std::optional<double> fnr;

    std::size_t total() const { return tp + fp + tn + fn; }
};

/// Binary confusion. `options` is the response-option set; it must hold
/// exactly two labels and contain `positive_label`.
ConfusionCounts confusion(const std::vector<LabelPair>& pairs, const std::string& positive_label,
                          const std::vector<std::string>& options);

struct F1Report {
    double macro = 0.0;
    std::map<std::string, double> per_class;
};

F1Report macro_f1(const std::vector<LabelPair>& pairs, const std::vector<std::string>& classes);

struct AgreementReport {
    double point = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t n = 0;
    std::size_t bootstrap_iterations = 0;
    std::uint64_t seed = 0;
    double level = 0.95;
};

/// Percentile bootstrap of the mean of `values`. The interval is widened
/// to contain the point estimate if resampling left it outside.
AgreementReport bootstrap_ci(const std::vector<double>& values, std::size_t iterations = 10000,
                             double level = 0.95, std::uint64_t seed = 0);

AgreementReport bootstrap_agreement(const std::vector<LabelPair>& pairs, std::size_t iterations = 10000,
                                    double level = 0.95, std::uint64_t seed = 0);

/// CDF of Student's t with `df` degrees of freedom.
double student_t_cdf(double t, double df);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double x, double a, double b);

struct TTestResult {
    double t = 0.0;
    double p_two_sided = 1.0;
    std::size_t df = 0;
    double mean_difference = 0.0;
};

/// Throws ValidationError on length mismatch or n < 2, DegenerateInput when
/// the differences have zero variance.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

double bonferroni_alpha(double base, std::size_t comparisons);

/// Two-sided p for equal means: both samples are shifted to the pooled mean,
/// resampled independently, and p is the share of resampled differences at
/// least as extreme as the observed one.
double bootstrap_mean_equality_test(const std::vector<double>& a, const std::vector<double>& b,
                                    std::size_t iterations = 10000, std::uint64_t seed = 0);

/// units x annotators; nullopt marks a missing label. Nominal metric.
double krippendorff_alpha(const std::vector<std::vector<std::optional<std::string>>>& matrix);

/// Fraction of positions where every run carries the same label.
double self_consistency(const std::vector<std::vector<std::string>>& runs);

struct DisagreementQueue {
    std::vector<std::string> disagree;
    std::vector<std::string> agree;
    std::optional<std::string> shortfall;
};

/// Seeded uniform samples of up to `limit` disagreeing and agreeing ids.
DisagreementQueue disagreement_queue(const std::vector<LabelPair>& pairs, std::size_t limit, std::uint64_t seed);

/// One exported line: {"variable","agreement","ci","tpr","fpr","fnr","n","seed"}.
Json variable_report(const std::string& variable, const AgreementReport& agreement,
                     const std::optional<ConfusionCounts>& counts);

}  // namespace cbforge
