#include "cbforge/metrics.hpp"

#include "cbforge/error.hpp"
#include "cbforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace cbforge {

namespace {

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Linear interpolation between order statistics.
double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double resampled_mean(const std::vector<double>& v, Rng& rng) {
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        sum += v[rng.index(v.size())];
    }
    return sum / static_cast<double>(v.size());
}

// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double x, double a, double b) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < eps) break;
    }
    return h;
}

}  // namespace

double agreement(const std::vector<LabelPair>& pairs) {
    if (pairs.empty()) {
        throw ValidationError("agreement needs at least one pair", "pairs");
    }
    const auto matches = std::count_if(pairs.begin(), pairs.end(),
                                       [](const LabelPair& p) { return p.predicted == p.reference; });
    return static_cast<double>(matches) / static_cast<double>(pairs.size());
}

ConfusionCounts confusion(const std::vector<LabelPair>& pairs, const std::string& positive_label,
                          const std::vector<std::string>& options) {
    if (options.size() != 2) {
        throw ValidationError("confusion rates need a binary option set", "options");
    }
    if (std::find(options.begin(), options.end(), positive_label) == options.end()) {
        throw ValidationError("positive label " + positive_label + " is not a response option", "positive_label");
    }
    ConfusionCounts c;
    c.positive_label = positive_label;
    for (const auto& p : pairs) {
        const bool pred = p.predicted == positive_label;
        const bool ref = p.reference == positive_label;
        if (pred && ref) ++c.tp;
        else if (pred) ++c.fp;
        else if (ref) ++c.fn;
        else ++c.tn;
    }
    if (c.tp + c.fn > 0) {
        c.tpr = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
        c.fnr = static_cast<double>(c.fn) / static_cast<double>(c.tp + c.fn);
    }
    if (c.fp + c.tn > 0) {
        c.fpr = static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
    }
    return c;
}

F1Report macro_f1(const std::vector<LabelPair>& pairs, const std::vector<std::string>& classes) {
    if (pairs.empty()) {
        throw ValidationError("macro F1 needs at least one pair", "pairs");
    }
    if (classes.empty()) {
        throw ValidationError("macro F1 needs at least one class", "classes");
    }
    F1Report report;
    double total = 0.0;
    for (const auto& cls : classes) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (const auto& p : pairs) {
            const bool pred = p.predicted == cls;
            const bool ref = p.reference == cls;
            if (pred && ref) ++tp;
            else if (pred) ++fp;
            else if (ref) ++fn;
        }
        const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        report.per_class[cls] = f1;
        total += f1;
    }
    report.macro = total / static_cast<double>(classes.size());
    return report;
}

AgreementReport bootstrap_ci(const std::vector<double>& values, std::size_t iterations, double level,
                             std::uint64_t seed) {
    if (values.empty()) {
        throw ValidationError("bootstrap needs at least one value", "values");
    }
    if (iterations == 0) {
        throw ValidationError("bootstrap needs at least one iteration", "iterations");
    }
    if (!(level > 0.0 && level < 1.0)) {
        throw ValidationError("confidence level must lie in (0, 1)", "level");
    }
    AgreementReport report;
    report.point = mean_of(values);
    report.n = values.size();
    report.bootstrap_iterations = iterations;
    report.seed = seed;
    report.level = level;

    Rng rng(seed);
    std::vector<double> means(iterations);
    for (auto& m : means) {
        m = resampled_mean(values, rng);
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    report.ci_low = std::min(quantile_sorted(means, tail), report.point);
    report.ci_high = std::max(quantile_sorted(means, 1.0 - tail), report.point);
    return report;
}

AgreementReport bootstrap_agreement(const std::vector<LabelPair>& pairs, std::size_t iterations, double level,
                                    std::uint64_t seed) {
    if (pairs.empty()) {
        throw ValidationError("agreement needs at least one pair", "pairs");
    }
    std::vector<double> indicators;
    indicators.reserve(pairs.size());
    for (const auto& p : pairs) {
        indicators.push_back(p.predicted == p.reference ? 1.0 : 0.0);
    }
    return bootstrap_ci(indicators, iterations, level, seed);
}

double incomplete_beta(double x, double a, double b) {
    if (!(a > 0.0 && b > 0.0)) {
        throw ValidationError("incomplete beta needs positive shape parameters");
    }
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_continued_fraction(x, a, b) / a;
    }
    return 1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b;
}

double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) {
        throw ValidationError("degrees of freedom must be positive", "df");
    }
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double x = df / (df + t * t);
    const double tail = 0.5 * incomplete_beta(x, df / 2.0, 0.5);
    return t >= 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw ValidationError("paired samples differ in length", "b");
    }
    if (a.size() < 2) {
        throw ValidationError("paired t-test needs at least two units", "a");
    }
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double mean = mean_of(d);
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double n = static_cast<double>(d.size());
    const double sd = std::sqrt(ss / (n - 1.0));
    if (sd == 0.0) {
        throw DegenerateInput("paired differences have zero variance");
    }
    TTestResult r;
    r.df = d.size() - 1;
    r.mean_difference = mean;
    r.t = mean / (sd / std::sqrt(n));
    const double tail = 1.0 - student_t_cdf(std::fabs(r.t), static_cast<double>(r.df));
    r.p_two_sided = std::min(1.0, 2.0 * tail);
    return r;
}

double bonferroni_alpha(double base, std::size_t comparisons) {
    if (comparisons == 0) {
        throw ValidationError("Bonferroni correction needs at least one comparison", "comparisons");
    }
    return base / static_cast<double>(comparisons);
}

double bootstrap_mean_equality_test(const std::vector<double>& a, const std::vector<double>& b,
                                    std::size_t iterations, std::uint64_t seed) {
    if (a.empty() || b.empty()) {
        throw ValidationError("both samples must be non-empty", a.empty() ? "a" : "b");
    }
    if (iterations == 0) {
        throw ValidationError("bootstrap needs at least one iteration", "iterations");
    }
    const double mean_a = mean_of(a);
    const double mean_b = mean_of(b);
    const double observed = std::fabs(mean_a - mean_b);
    const double pooled = (mean_a * static_cast<double>(a.size()) + mean_b * static_cast<double>(b.size())) /
                          static_cast<double>(a.size() + b.size());
    std::vector<double> shifted_a(a), shifted_b(b);
    for (auto& x : shifted_a) x += pooled - mean_a;
    for (auto& x : shifted_b) x += pooled - mean_b;

    // Absorbs rounding from the shift so identical samples count as extreme.
    const double slack = 1e-12;
    Rng rng(seed);
    std::size_t extreme = 0;
    for (std::size_t i = 0; i < iterations; ++i) {
        const double diff = resampled_mean(shifted_a, rng) - resampled_mean(shifted_b, rng);
        if (std::fabs(diff) >= observed - slack) ++extreme;
    }
    return static_cast<double>(extreme) / static_cast<double>(iterations);
}

double krippendorff_alpha(const std::vector<std::vector<std::optional<std::string>>>& matrix) {
    std::map<std::pair<std::string, std::string>, double> coincidence;
    std::map<std::string, double> marginal;
    double n = 0.0;
    std::size_t annotators = 0;
    for (const auto& unit : matrix) {
        annotators = std::max(annotators, unit.size());
        std::vector<std::string> values;
        for (const auto& v : unit) {
            if (v) values.push_back(*v);
        }
        if (values.size() < 2) continue;
        const double weight = 1.0 / static_cast<double>(values.size() - 1);
        for (std::size_t i = 0; i < values.size(); ++i) {
            for (std::size_t j = 0; j < values.size(); ++j) {
                if (i == j) continue;
                coincidence[{values[i], values[j]}] += weight;
                marginal[values[i]] += weight;
                n += weight;
            }
        }
    }
    if (annotators < 2) {
        throw ValidationError("Krippendorff's alpha needs at least two annotators", "matrix");
    }
    if (n == 0.0) {
        throw ValidationError("no unit carries two or more labels", "matrix");
    }
    double observed = 0.0;
    for (const auto& [key, count] : coincidence) {
        if (key.first != key.second) observed += count;
    }
    if (observed == 0.0) {
        return 1.0;
    }
    double expected = 0.0;
    for (const auto& [c, nc] : marginal) {
        for (const auto& [k, nk] : marginal) {
            if (c != k) expected += nc * nk;
        }
    }
    return 1.0 - (n - 1.0) * observed / expected;
}

double self_consistency(const std::vector<std::vector<std::string>>& runs) {
    if (runs.size() < 2) {
        throw ValidationError("self-consistency needs at least two runs", "runs");
    }
    const std::size_t length = runs.front().size();
    for (const auto& run : runs) {
        if (run.size() != length) {
            throw ValidationError("runs differ in length", "runs");
        }
    }
    if (length == 0) {
        throw ValidationError("runs are empty", "runs");
    }
    std::size_t consistent = 0;
    for (std::size_t i = 0; i < length; ++i) {
        bool same = true;
        for (const auto& run : runs) {
            if (run[i] != runs.front()[i]) {
                same = false;
                break;
            }
        }
        if (same) ++consistent;
    }
    return static_cast<double>(consistent) / static_cast<double>(length);
}

DisagreementQueue disagreement_queue(const std::vector<LabelPair>& pairs, std::size_t limit, std::uint64_t seed) {
    std::vector<std::string> disagree, agree;
    std::set<std::string> seen;
    for (const auto& p : pairs) {
        if (!seen.insert(p.narrative_id).second) continue;
        (p.predicted == p.reference ? agree : disagree).push_back(p.narrative_id);
    }
    Rng rng(seed);
    rng.shuffle(disagree);
    rng.shuffle(agree);
    DisagreementQueue q;
    std::string note;
    if (disagree.size() < limit) {
        note = "only " + std::to_string(disagree.size()) + " disagreeing ids for a limit of " + std::to_string(limit);
    }
    if (agree.size() < limit) {
        if (!note.empty()) note += "; ";
        note += "only " + std::to_string(agree.size()) + " agreeing ids for a limit of " + std::to_string(limit);
    }
    if (!note.empty()) q.shortfall = note;
    disagree.resize(std::min(limit, disagree.size()));
    agree.resize(std::min(limit, agree.size()));
    q.disagree = std::move(disagree);
    q.agree = std::move(agree);
    return q;
}

Json variable_report(const std::string& variable, const AgreementReport& agreement,
                     const std::optional<ConfusionCounts>& counts) {
    auto rate = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    Json out = {{"variable", variable},
                {"agreement", agreement.point},
                {"ci", Json::array({agreement.ci_low, agreement.ci_high})},
                {"tpr", nullptr},
                {"fpr", nullptr},
                {"fnr", nullptr},
                {"n", agreement.n},
                {"seed", agreement.seed}};
    if (counts) {
        out["tpr"] = rate(counts->tpr);
        out["fpr"] = rate(counts->fpr);
        out["fnr"] = rate(counts->fnr);
    }
    return out;
}

}  // namespace cbforge
