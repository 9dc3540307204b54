#pragma once

// Ranking metrics over scored candidate lists: MAP, MRR and P@1.

#include "qmwf/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qmwf {

struct ScoredCandidate {
    double score = 0.0;
    int label = 0;
};

/// Candidates of one question in rank order: descending score, ties kept in
/// input order.
class RankedCandidates {
public:
    RankedCandidates() = default;

    RankedCandidates(std::string question_id, std::span<const double> scores,
                     std::span<const int> labels)
        : question_id_(std::move(question_id)) {
        if (scores.size() != labels.size()) {
            throw DimensionError("scores and labels differ in length");
        }
        if (scores.empty()) throw DimensionError("a ranked group needs at least one candidate");
        items_.reserve(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (labels[i] != 0 && labels[i] != 1) throw ValidationError("labels must be 0 or 1");
            items_.push_back({scores[i], labels[i]});
        }
        std::stable_sort(items_.begin(), items_.end(),
                         [](const ScoredCandidate& a, const ScoredCandidate& b) {
                             return a.score > b.score;
                         });
    }

    [[nodiscard]] const std::string& question_id() const { return question_id_; }
    [[nodiscard]] std::span<const ScoredCandidate> items() const { return items_; }
    [[nodiscard]] std::size_t positives() const {
        return static_cast<std::size_t>(std::count_if(
            items_.begin(), items_.end(), [](const ScoredCandidate& c) { return c.label == 1; }));
    }

private:
    std::string question_id_;
    std::vector<ScoredCandidate> items_;
};

/// Mean over positives of the precision at each positive's rank. Groups
/// without positives score 0.
inline double average_precision(const RankedCandidates& r) {
    double sum = 0.0;
    std::size_t hits = 0;
    const auto items = r.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].label == 1) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

inline double reciprocal_rank(const RankedCandidates& r) {
    const auto items = r.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].label == 1) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

namespace detail {

template <class F>
double mean_over(std::span<const RankedCandidates> groups, F&& per_group) {
    if (groups.empty()) throw DimensionError("metric needs at least one group");
    double sum = 0.0;
    for (const auto& g : groups) sum += per_group(g);
    return sum / static_cast<double>(groups.size());
}

}  // namespace detail

inline double mean_average_precision(std::span<const RankedCandidates> groups) {
    return detail::mean_over(groups, [](const RankedCandidates& g) { return average_precision(g); });
}

inline double mean_reciprocal_rank(std::span<const RankedCandidates> groups) {
    return detail::mean_over(groups, [](const RankedCandidates& g) { return reciprocal_rank(g); });
}

inline double p_at_1(std::span<const RankedCandidates> groups) {
    return detail::mean_over(
        groups, [](const RankedCandidates& g) { return g.items().front().label == 1 ? 1.0 : 0.0; });
}

struct MetricReport {
    std::string split;
    std::uint64_t seed = 0;
    double map = 0.0;
    double mrr = 0.0;
    double p1 = 0.0;
    std::size_t questions = 0;
};

inline MetricReport evaluate_groups(std::span<const RankedCandidates> groups, std::string split,
                                    std::uint64_t seed) {
    MetricReport r;
    r.split = std::move(split);
    r.seed = seed;
    r.map = mean_average_precision(groups);
    r.mrr = mean_reciprocal_rank(groups);
    r.p1 = p_at_1(groups);
    r.questions = groups.size();
    return r;
}

inline void write_metric_table(std::ostream& os, std::span<const MetricReport> reports) {
    os << std::left << std::setw(10) << "split" << std::right << std::setw(10) << "MAP"
       << std::setw(10) << "MRR" << std::setw(10) << "P@1" << std::setw(12) << "questions\n";
    for (const auto& r : reports) {
        os << std::left << std::setw(10) << r.split << std::right << std::fixed
           << std::setprecision(4) << std::setw(10) << r.map << std::setw(10) << r.mrr
           << std::setw(10) << r.p1 << std::setw(11) << r.questions << '\n';
    }
    os.unsetf(std::ios::floatfield);
}

/// One JSON object per (metric, split) line.
inline void write_metric_records(std::ostream& os, const MetricReport& r) {
    const std::pair<const char*, double> metrics[] = {{"MAP", r.map}, {"MRR", r.mrr}, {"P@1", r.p1}};
    for (const auto& [name, value] : metrics) {
        nlohmann::json j{{"metric", name}, {"split", r.split}, {"value", value}, {"seed", r.seed}};
        os << j.dump() << '\n';
    }
}

}  // namespace qmwf
