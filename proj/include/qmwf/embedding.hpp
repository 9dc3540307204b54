#pragma once

// Text front ends producing sentence matrices.
//
// Word path: tokens -> embedding rows -> L2-normalized amplitude rows.
// Char path: characters -> k-char windows of char embeddings -> M kernels ->
// max pooling over segments -> L2-normalized amplitude rows.

#include "qmwf/data.hpp"
#include "qmwf/error.hpp"
#include "qmwf/text.hpp"
#include "qmwf/wavefunction.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace qmwf {

inline constexpr std::size_t kDefaultMaxTokens = 40;

class Vocabulary {
public:
    static constexpr std::size_t kUnk = 0;
    static constexpr std::size_t kPad = 1;

    Vocabulary() : tokens_{"<unk>", "<pad>"} {
        index_[tokens_[kUnk]] = kUnk;
        index_[tokens_[kPad]] = kPad;
    }

    /// Adds `token` if new; returns its index.
    std::size_t add(const std::string& token) {
        auto [it, inserted] = index_.try_emplace(token, tokens_.size());
        if (inserted) tokens_.push_back(token);
        return it->second;
    }

    [[nodiscard]] bool contains(const std::string& token) const { return index_.count(token) != 0; }

    /// Index of `token`, or kUnk when absent.
    [[nodiscard]] std::size_t index(const std::string& token) const {
        const auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    [[nodiscard]] const std::string& token(std::size_t i) const {
        if (i >= tokens_.size()) throw IndexError("vocabulary index out of range");
        return tokens_[i];
    }

    [[nodiscard]] std::size_t size() const { return tokens_.size(); }
    [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct EmbeddingTable {
    Vocabulary vocab;
    std::size_t dim = 0;
    /// vocab.size() x dim, row-major.
    std::vector<double> matrix;
    bool trainable = true;

    [[nodiscard]] std::span<const double> row(std::size_t i) const {
        return {matrix.data() + i * dim, dim};
    }
    [[nodiscard]] std::span<double> row(std::size_t i) { return {matrix.data() + i * dim, dim}; }
};

struct EmbeddingLoadResult {
    EmbeddingTable table;
    std::size_t loaded = 0;
    std::size_t malformed = 0;
    std::size_t duplicates = 0;
    std::size_t filtered = 0;
};

namespace detail {

inline bool parse_double(std::string_view s, double& out) {
    // std::from_chars for double is available in libstdc++ 11.
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last && std::isfinite(out);
}

inline std::vector<std::string_view> split_spaces(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace detail

/// Reads a text embedding file: one token followed by `expected_dim` decimals
/// per line. `expected_dim == 0` takes the dimension from the first row. A
/// two-integer header line ("count dim") is skipped. When `keep` is given,
/// only tokens in it are loaded. UNK is the mean of the loaded rows; PAD is zero.
inline EmbeddingLoadResult load_embeddings(const std::string& path, std::size_t expected_dim,
                                           const std::unordered_set<std::string>* keep = nullptr,
                                           const Diagnostics& diag = {}) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open embedding file '" + path + "'");
    EmbeddingLoadResult result;
    auto& table = result.table;
    table.dim = expected_dim;
    std::vector<double> rows;
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> values;
    while (std::getline(in, line)) {
        ++line_no;
        const auto fields = detail::split_spaces(line);
        if (fields.empty()) continue;
        if (line_no == 1 && fields.size() == 2) {
            double a = 0.0;
            double b = 0.0;
            if (detail::parse_double(fields[0], a) && detail::parse_double(fields[1], b)) continue;
        }
        if (table.dim == 0) table.dim = fields.size() - 1;
        bool ok = table.dim > 0 && fields.size() == table.dim + 1;
        values.assign(table.dim, 0.0);
        for (std::size_t h = 0; ok && h < table.dim; ++h) ok = detail::parse_double(fields[h + 1], values[h]);
        if (!ok) {
            ++result.malformed;
            diag.emit("embedding_malformed_line",
                      {{"file", path}, {"line", line_no}, {"fields", fields.size()},
                       {"expected_dim", table.dim}});
            continue;
        }
        const std::string token(fields[0]);
        if (keep != nullptr && keep->count(token) == 0) {
            ++result.filtered;
            continue;
        }
        if (token == table.vocab.token(Vocabulary::kUnk) || token == table.vocab.token(Vocabulary::kPad) ||
            table.vocab.contains(token)) {
            ++result.duplicates;
            continue;
        }
        table.vocab.add(token);
        rows.insert(rows.end(), values.begin(), values.end());
        ++result.loaded;
    }
    if (result.loaded == 0) throw LoadError("no usable embedding rows in '" + path + "'");
    table.matrix.assign(2 * table.dim, 0.0);
    for (std::size_t r = 0; r < result.loaded; ++r) {
        for (std::size_t h = 0; h < table.dim; ++h) table.matrix[h] += rows[r * table.dim + h];
    }
    for (std::size_t h = 0; h < table.dim; ++h) table.matrix[h] /= static_cast<double>(result.loaded);
    table.matrix.insert(table.matrix.end(), rows.begin(), rows.end());
    diag.emit("embeddings_loaded", {{"file", path}, {"loaded", result.loaded},
                                    {"malformed", result.malformed}, {"dim", table.dim},
                                    {"filtered", result.filtered}, {"duplicates", result.duplicates}});
    return result;
}

/// Table over `tokens` with rows drawn from N(0, 1/dim); UNK is their mean.
template <class Rng>
EmbeddingTable random_embeddings(const std::vector<std::string>& tokens, std::size_t dim, Rng& rng) {
    if (dim == 0) throw ValidationError("embedding dim must be positive");
    EmbeddingTable t;
    t.dim = dim;
    for (const auto& tok : tokens) t.vocab.add(tok);
    t.matrix.assign(t.vocab.size() * dim, 0.0);
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    for (std::size_t i = 2; i < t.vocab.size(); ++i)
        for (double& x : t.row(i)) x = g(rng);
    if (t.vocab.size() > 2) {
        for (std::size_t i = 2; i < t.vocab.size(); ++i)
            for (std::size_t h = 0; h < dim; ++h) t.row(Vocabulary::kUnk)[h] += t.row(i)[h];
        for (double& x : t.row(Vocabulary::kUnk)) x /= static_cast<double>(t.vocab.size() - 2);
    }
    return t;
}

namespace detail {

/// Normalizes `row` in place; a zero row becomes the uniform 1/sqrt(M) vector.
/// Returns the pre-normalization norm (0 for replaced rows).
inline double normalize_row(std::span<double> row) {
    double s = 0.0;
    for (double x : row) s += x * x;
    if (s == 0.0) {
        const double u = 1.0 / std::sqrt(static_cast<double>(row.size()));
        std::fill(row.begin(), row.end(), u);
        return 0.0;
    }
    const double n = std::sqrt(s);
    for (double& x : row) x /= n;
    return n;
}

/// d(loss)/d(raw row) given d(loss)/d(normalized row) `g`, normalized row `x`
/// and raw norm `norm`. Replaced zero rows pass no gradient.
inline void normalize_backward(std::span<const double> g, std::span<const double> x, double norm,
                               std::span<double> out) {
    if (norm == 0.0) return;
    double dot = 0.0;
    for (std::size_t h = 0; h < g.size(); ++h) dot += g[h] * x[h];
    for (std::size_t h = 0; h < g.size(); ++h) out[h] += (g[h] - x[h] * dot) / norm;
}

}  // namespace detail

/// A word-path sentence with what the backward pass needs.
struct WordEncoding {
    SentenceMatrix matrix;
    std::vector<std::size_t> token_ids;
    std::vector<double> norms;
};

inline WordEncoding encode_words(const std::vector<std::string>& tokens, const EmbeddingTable& table,
                                 std::size_t max_tokens = kDefaultMaxTokens) {
    if (tokens.empty()) throw DegenerateInputError("cannot build a sentence matrix from no tokens");
    const std::size_t n = max_tokens == 0 ? tokens.size() : std::min(tokens.size(), max_tokens);
    WordEncoding out{SentenceMatrix(n, table.dim), std::vector<std::size_t>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t id = table.vocab.index(tokens[i]);
        out.token_ids[i] = id;
        const auto src = table.row(id);
        auto dst = out.matrix.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
        out.norms[i] = detail::normalize_row(dst);
    }
    return out;
}

/// Row i is the normalized embedding of token i; unknown tokens use UNK.
inline SentenceMatrix sentence_matrix_word(const std::vector<std::string>& tokens,
                                           const EmbeddingTable& table,
                                           std::size_t max_tokens = kDefaultMaxTokens) {
    return encode_words(tokens, table, max_tokens).matrix;
}

/// Accumulates embedding-row gradients from sentence-row gradients.
inline void word_backward(const WordEncoding& enc, const SentenceMatrix& row_grads,
                          std::size_t dim, std::span<double> table_grad) {
    for (std::size_t i = 0; i < enc.matrix.rows(); ++i) {
        const std::size_t id = enc.token_ids[i];
        detail::normalize_backward(row_grads.row(i), enc.matrix.row(i), enc.norms[i],
                                   table_grad.subspan(id * dim, dim));
    }
}

// ---------------------------------------------------------------------------
// Character path

/// Ordered character inventory. Index 0 is the pad character, 1 the unknown
/// character, 2 the space.
class CharSet {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;
    static constexpr std::size_t kSpace = 2;

    CharSet() : chars_{U'\0', char32_t{0xFFFD}, U' '} {
        for (std::size_t i = 0; i < chars_.size(); ++i) index_[chars_[i]] = i;
    }

    /// Lowercase ASCII letters, digits and common punctuation.
    static CharSet default_set() {
        CharSet c;
        for (char32_t ch = U'a'; ch <= U'z'; ++ch) c.add(ch);
        for (char32_t ch = U'0'; ch <= U'9'; ++ch) c.add(ch);
        for (char ch : std::string_view("-,;.!?:'\"/\\|_@#$%^&*~`+=<>()[]{}")) c.add(static_cast<char32_t>(ch));
        return c;
    }

    /// One character per line (UTF-8). Blank lines are ignored; lines with
    /// more than one code point are an error.
    static CharSet load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("cannot open char-set file '" + path + "'");
        CharSet c;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            const auto cps = utf8_decode(line);
            if (cps.size() != 1) {
                throw LoadError("char-set file '" + path + "' line " + std::to_string(line_no) +
                                " must hold exactly one character");
            }
            c.add(cps[0]);
        }
        return c;
    }

    std::size_t add(char32_t ch) {
        auto [it, inserted] = index_.try_emplace(ch, chars_.size());
        if (inserted) chars_.push_back(ch);
        return it->second;
    }

    [[nodiscard]] std::size_t index(char32_t ch) const {
        const auto it = index_.find(ch);
        return it == index_.end() ? kUnk : it->second;
    }

    [[nodiscard]] std::size_t size() const { return chars_.size(); }
    [[nodiscard]] const std::vector<char32_t>& chars() const { return chars_; }

private:
    std::vector<char32_t> chars_;
    std::unordered_map<char32_t, std::size_t> index_;
};

struct CharInput {
    CharSet charset;
    /// Char embedding dim d.
    std::size_t char_dim = 0;
    /// Window k: each z_m concatenates k char embeddings.
    std::size_t window = 3;
    /// Max pooling segment length; 0 pools once per word.
    std::size_t pool_stride = 0;
    /// charset.size() x char_dim. The one-hot (identity) table by default.
    std::vector<double> char_table;
    std::size_t max_rows = kDefaultMaxTokens;

    static CharInput one_hot(CharSet charset, std::size_t window, std::size_t pool_stride = 0) {
        CharInput ci;
        ci.char_dim = charset.size();
        ci.window = window;
        ci.pool_stride = pool_stride;
        ci.char_table.assign(ci.char_dim * ci.char_dim, 0.0);
        for (std::size_t i = 0; i < ci.char_dim; ++i) ci.char_table[i * ci.char_dim + i] = 1.0;
        ci.charset = std::move(charset);
        return ci;
    }

    [[nodiscard]] std::size_t window_size() const { return char_dim * window; }

    void validate() const {
        if (window < 1) throw ValidationError("char window must be at least 1");
        if (char_dim < 1) throw ValidationError("char embedding dim must be positive");
        if (char_table.size() != charset.size() * char_dim) {
            throw DimensionError("char table does not match char set and dim");
        }
    }
};

/// Char-path sentence with the max-pooling routing kept for backprop.
struct CharEncoding {
    SentenceMatrix matrix;
    /// Window vectors z_m, one row each (N-bar - k + 1 of them).
    SentenceMatrix windows;
    /// argmax[j * M + h]: window index that won output row j, unit h.
    std::vector<std::size_t> argmax;
    std::vector<double> norms;
};

namespace detail {

/// Pooling segments as [begin, end) ranges over window indices.
inline std::vector<std::pair<std::size_t, std::size_t>> char_segments(
    const std::vector<char32_t>& chars, std::size_t windows, std::size_t stride) {
    std::vector<std::pair<std::size_t, std::size_t>> segs;
    if (stride > 0) {
        for (std::size_t b = 0; b < windows; b += stride) segs.emplace_back(b, std::min(windows, b + stride));
        return segs;
    }
    std::size_t i = 0;
    while (i < chars.size()) {
        while (i < chars.size() && chars[i] == U' ') ++i;
        std::size_t j = i;
        while (j < chars.size() && chars[j] != U' ') ++j;
        if (j > i && i < windows) segs.emplace_back(i, std::min(j, windows));
        i = j;
    }
    if (segs.empty()) segs.emplace_back(0, windows);
    return segs;
}

inline std::vector<char32_t> char_stream(std::string_view text) {
    std::vector<char32_t> out;
    for (char32_t c : utf8_decode(text)) {
        if (is_unicode_space(c)) {
            if (!out.empty() && out.back() != U' ') out.push_back(U' ');
        } else {
            out.push_back(ascii_lower(c));
        }
    }
    if (!out.empty() && out.back() == U' ') out.pop_back();
    return out;
}

}  // namespace detail

/// Builds the char-level sentence matrix. `kernels` holds M rows of length
/// d * k (row-major). Text shorter than k is padded with the pad character.
inline CharEncoding encode_chars(std::string_view text, const CharInput& ci,
                                 std::span<const double> kernels, std::size_t m) {
    ci.validate();
    const std::size_t w = ci.window_size();
    if (m == 0 || kernels.size() != m * w) throw DimensionError("char kernels must be M x (d * k)");
    auto chars = detail::char_stream(text);
    std::vector<std::size_t> ids;
    for (char32_t c : chars) ids.push_back(ci.charset.index(c));
    while (ids.size() < ci.window) {
        ids.push_back(CharSet::kPad);
        chars.push_back(U'\0');
    }
    const std::size_t n_windows = ids.size() - ci.window + 1;
    CharEncoding enc;
    enc.windows = SentenceMatrix(n_windows, w);
    for (std::size_t t = 0; t < n_windows; ++t) {
        auto z = enc.windows.row(t);
        for (std::size_t k = 0; k < ci.window; ++k) {
            const std::size_t id = ids[t + k];
            std::copy_n(ci.char_table.begin() + static_cast<std::ptrdiff_t>(id * ci.char_dim), ci.char_dim,
                        z.begin() + static_cast<std::ptrdiff_t>(k * ci.char_dim));
        }
    }
    // Convolution outputs y_t = K z_t.
    std::vector<double> y(n_windows * m, 0.0);
    for (std::size_t t = 0; t < n_windows; ++t) {
        const auto z = enc.windows.row(t);
        for (std::size_t h = 0; h < m; ++h) {
            double s = 0.0;
            const double* k = kernels.data() + h * w;
            for (std::size_t q = 0; q < w; ++q) s += k[q] * z[q];
            y[t * m + h] = s;
        }
    }
    auto segs = detail::char_segments(chars, n_windows, ci.pool_stride);
    if (ci.max_rows != 0 && segs.size() > ci.max_rows) segs.resize(ci.max_rows);
    enc.matrix = SentenceMatrix(segs.size(), m);
    enc.argmax.assign(segs.size() * m, 0);
    enc.norms.assign(segs.size(), 0.0);
    for (std::size_t j = 0; j < segs.size(); ++j) {
        auto row = enc.matrix.row(j);
        for (std::size_t h = 0; h < m; ++h) {
            std::size_t best = segs[j].first;
            for (std::size_t t = segs[j].first + 1; t < segs[j].second; ++t) {
                if (y[t * m + h] > y[best * m + h]) best = t;
            }
            row[h] = y[best * m + h];
            enc.argmax[j * m + h] = best;
        }
        enc.norms[j] = detail::normalize_row(row);
    }
    return enc;
}

inline SentenceMatrix char_sentence_matrix(std::string_view text, const CharInput& ci,
                                           std::span<const double> kernels, std::size_t m) {
    return encode_chars(text, ci, kernels, m).matrix;
}

/// Accumulates char-kernel gradients (M x (d * k)) from sentence-row gradients.
inline void char_backward(const CharEncoding& enc, const SentenceMatrix& row_grads,
                          std::span<double> kernel_grad) {
    const std::size_t m = enc.matrix.cols();
    const std::size_t w = enc.windows.cols();
    std::vector<double> graw(m);
    for (std::size_t j = 0; j < enc.matrix.rows(); ++j) {
        std::fill(graw.begin(), graw.end(), 0.0);
        detail::normalize_backward(row_grads.row(j), enc.matrix.row(j), enc.norms[j], graw);
        for (std::size_t h = 0; h < m; ++h) {
            if (graw[h] == 0.0) continue;
            const auto z = enc.windows.row(enc.argmax[j * m + h]);
            double* g = kernel_grad.data() + h * w;
            for (std::size_t q = 0; q < w; ++q) g[q] += graw[h] * z[q];
        }
    }
}

}  // namespace qmwf
