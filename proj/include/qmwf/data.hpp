#pragma once

// QA corpora in one normalized TSV schema:
//     question_id <TAB> question <TAB> answer <TAB> label
// one record per line, UTF-8, label 0 or 1.

#include "qmwf/error.hpp"
#include "qmwf/random.hpp"
#include "qmwf/text.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace qmwf {

/// Structured diagnostic stream: one JSON object per line. A default
/// constructed sink discards everything.
class Diagnostics {
public:
    Diagnostics() = default;
    explicit Diagnostics(std::ostream& os) : os_(&os) {}

    void emit(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
        if (os_ == nullptr) return;
        fields["event"] = event;
        *os_ << fields.dump() << '\n';
    }

private:
    std::ostream* os_ = nullptr;
};

struct QAPair {
    std::string question_id;
    std::string question_text;
    std::string answer_text;
    int label = 0;

    friend bool operator==(const QAPair&, const QAPair&) = default;
};

struct QuestionGroup {
    std::string question_id;
    std::string question_text;
    std::vector<QAPair> candidates;

    [[nodiscard]] std::size_t positives() const {
        std::size_t n = 0;
        for (const auto& c : candidates) n += c.label == 1 ? 1 : 0;
        return n;
    }
    [[nodiscard]] std::size_t negatives() const { return candidates.size() - positives(); }

    friend bool operator==(const QuestionGroup&, const QuestionGroup&) = default;
};

struct Dataset {
    std::string split;
    std::vector<QuestionGroup> groups;

    [[nodiscard]] std::size_t pair_count() const {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.candidates.size();
        return n;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct TsvLoadResult {
    Dataset dataset;
    std::size_t lines = 0;
    std::size_t accepted = 0;
    std::size_t malformed = 0;
    std::size_t empty_text = 0;
    std::size_t duplicates = 0;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

inline std::string collapse_whitespace(std::string_view s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += c;
    }
    return out;
}

}  // namespace detail

/// Parses a normalized TSV file. Malformed lines are skipped and counted;
/// more than 10% malformed lines is fatal. Pairs whose question or answer has
/// no tokens are dropped, and repeated (question, answer) pairs within a group
/// are kept once (first occurrence wins).
inline TsvLoadResult load_tsv(const std::string& path, std::string split = {},
                              const Diagnostics& diag = {}) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open TSV file '" + path + "'");
    TsvLoadResult result;
    result.dataset.split = split.empty() ? path : std::move(split);
    std::unordered_map<std::string, std::size_t> group_index;
    std::vector<std::unordered_set<std::string>> seen;
    std::vector<std::string> samples;
    std::string line;
    while (std::getline(in, line)) {
        ++result.lines;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            --result.lines;
            continue;
        }
        const auto fields = detail::split_tabs(line);
        const bool label_ok = fields.size() == 4 && (fields[3] == "0" || fields[3] == "1");
        if (!label_ok || fields[0].empty()) {
            ++result.malformed;
            if (samples.size() < 3) samples.push_back(std::to_string(result.lines) + ": " + line.substr(0, 120));
            diag.emit("tsv_malformed_line", {{"file", path}, {"line", result.lines},
                                             {"fields", fields.size()}});
            continue;
        }
        QAPair pair{std::string(fields[0]), detail::collapse_whitespace(fields[1]),
                    detail::collapse_whitespace(fields[2]), fields[3] == "1" ? 1 : 0};
        if (tokenize(pair.question_text).empty() || tokenize(pair.answer_text).empty()) {
            ++result.empty_text;
            diag.emit("tsv_empty_text", {{"file", path}, {"line", result.lines}});
            continue;
        }
        auto [it, inserted] = group_index.try_emplace(pair.question_id, result.dataset.groups.size());
        if (inserted) {
            result.dataset.groups.push_back({pair.question_id, pair.question_text, {}});
            seen.emplace_back();
        }
        const std::size_t g = it->second;
        if (!seen[g].insert(pair.question_text + '\t' + pair.answer_text).second) {
            ++result.duplicates;
            diag.emit("tsv_duplicate_pair", {{"file", path}, {"line", result.lines},
                                             {"question_id", pair.question_id}});
            continue;
        }
        result.dataset.groups[g].candidates.push_back(std::move(pair));
        ++result.accepted;
    }
    if (result.lines > 0 && result.malformed * 10 > result.lines) {
        std::string msg = "too many malformed lines in '" + path + "': " +
                          std::to_string(result.malformed) + " of " + std::to_string(result.lines);
        for (const auto& s : samples) msg += "\n  line " + s;
        throw LoadError(msg);
    }
    diag.emit("tsv_loaded", {{"file", path}, {"lines", result.lines}, {"accepted", result.accepted},
                             {"malformed", result.malformed}, {"empty_text", result.empty_text},
                             {"duplicates", result.duplicates},
                             {"groups", result.dataset.groups.size()}});
    return result;
}

inline void write_tsv(std::ostream& os, const Dataset& d) {
    for (const auto& g : d.groups) {
        for (const auto& c : g.candidates) {
            os << c.question_id << '\t' << c.question_text << '\t' << c.answer_text << '\t'
               << c.label << '\n';
        }
    }
}

struct FilterResult {
    Dataset dataset;
    std::size_t removed = 0;
};

/// Drops question groups that have no correct candidate.
inline FilterResult filter_no_positive(const Dataset& d, const Diagnostics& diag = {}) {
    FilterResult out;
    out.dataset.split = d.split;
    for (const auto& g : d.groups) {
        if (g.positives() == 0) {
            ++out.removed;
        } else {
            out.dataset.groups.push_back(g);
        }
    }
    diag.emit("filter_no_positive", {{"split", d.split}, {"removed", out.removed},
                                     {"kept", out.dataset.groups.size()}});
    return out;
}

/// Keeps only candidates whose answer has between `min_tokens` and
/// `max_tokens` tokens; groups left empty are dropped.
inline FilterResult filter_answer_length(const Dataset& d, std::size_t min_tokens,
                                         std::size_t max_tokens, const Diagnostics& diag = {}) {
    FilterResult out;
    out.dataset.split = d.split;
    for (const auto& g : d.groups) {
        QuestionGroup kept{g.question_id, g.question_text, {}};
        for (const auto& c : g.candidates) {
            const auto n = tokenize(c.answer_text).size();
            if (n >= min_tokens && n <= max_tokens) kept.candidates.push_back(c);
        }
        if (kept.candidates.empty()) {
            ++out.removed;
        } else {
            out.dataset.groups.push_back(std::move(kept));
        }
    }
    diag.emit("filter_answer_length", {{"split", d.split}, {"removed", out.removed}});
    return out;
}

/// Rebuilds every group as its positives plus exactly `k` negatives drawn
/// without replacement from other questions' answers. A sampled answer never
/// repeats the text of one of the group's positives. Deterministic per seed.
inline Dataset negative_sample(const Dataset& d, std::size_t k, std::uint64_t seed,
                               const Diagnostics& diag = {}) {
    // Distinct answer texts, each tagged with the first question that owns it.
    std::vector<std::string> pool;
    std::unordered_map<std::string, std::set<std::string>> owners;
    for (const auto& g : d.groups) {
        for (const auto& c : g.candidates) {
            auto [it, inserted] = owners.try_emplace(c.answer_text);
            if (inserted) pool.push_back(c.answer_text);
            it->second.insert(g.question_id);
        }
    }
    if (pool.size() <= k) {
        throw ValidationError("answer pool of " + std::to_string(pool.size()) +
                              " sentences is too small to sample " + std::to_string(k) +
                              " negatives");
    }
    auto rng = substream(seed, "sampling");
    Dataset out;
    out.split = d.split;
    for (const auto& g : d.groups) {
        QuestionGroup ng{g.question_id, g.question_text, {}};
        std::unordered_set<std::string> excluded;
        for (const auto& c : g.candidates) {
            if (c.label == 1) {
                ng.candidates.push_back(c);
                excluded.insert(c.answer_text);
            }
        }
        auto eligible = [&](const std::string& text) {
            return excluded.count(text) == 0 && owners.at(text).count(g.question_id) == 0;
        };
        std::vector<std::size_t> chosen;
        std::unordered_set<std::size_t> taken;
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        std::size_t attempts = 0;
        while (chosen.size() < k && attempts < 64 * (k + 1)) {
            ++attempts;
            const std::size_t idx = pick(rng);
            if (taken.count(idx) != 0 || !eligible(pool[idx])) continue;
            taken.insert(idx);
            chosen.push_back(idx);
        }
        if (chosen.size() < k) {
            // Dense fallback: shuffle the remaining eligible indices.
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                if (taken.count(i) == 0 && eligible(pool[i])) rest.push_back(i);
            }
            if (rest.size() < k - chosen.size()) {
                throw ValidationError("not enough eligible negatives for question '" +
                                      g.question_id + "'");
            }
            std::shuffle(rest.begin(), rest.end(), rng);
            rest.resize(k - chosen.size());
            chosen.insert(chosen.end(), rest.begin(), rest.end());
        }
        for (std::size_t idx : chosen) {
            ng.candidates.push_back({g.question_id, g.question_text, pool[idx], 0});
        }
        out.groups.push_back(std::move(ng));
    }
    diag.emit("negative_sample", {{"split", d.split}, {"k", k}, {"seed", seed},
                                  {"groups", out.groups.size()}});
    return out;
}

}  // namespace qmwf
