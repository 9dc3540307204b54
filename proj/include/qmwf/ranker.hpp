#pragma once

// A QMWF model bundled with the text front end that feeds it.

#include "qmwf/embedding.hpp"
#include "qmwf/error.hpp"
#include "qmwf/network.hpp"
#include "qmwf/text.hpp"

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

namespace qmwf {

struct WordEncoder {
    EmbeddingTable table;
    std::size_t max_tokens = kDefaultMaxTokens;
};

struct CharEncoder {
    CharInput input;
    /// Output amplitude dim M.
    std::size_t dim = 0;
    /// M x (d * k) convolution kernels.
    std::vector<double> kernels;
    bool trainable = true;

    template <class Rng>
    static CharEncoder random(CharInput input, std::size_t dim, Rng& rng) {
        CharEncoder e;
        e.dim = dim;
        const std::size_t w = input.window_size();
        e.kernels.resize(dim * w);
        const double bound = 1.0 / std::sqrt(static_cast<double>(input.window));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& k : e.kernels) k = u(rng);
        e.input = std::move(input);
        return e;
    }
};

using InputEncoder = std::variant<WordEncoder, CharEncoder>;
using EncodedSentence = std::variant<WordEncoding, CharEncoding>;

inline const SentenceMatrix& sentence_of(const EncodedSentence& e) {
    return std::visit([](const auto& x) -> const SentenceMatrix& { return x.matrix; }, e);
}

inline std::size_t encoder_dim(const InputEncoder& enc) {
    return std::visit(
        [](const auto& e) -> std::size_t {
            if constexpr (std::is_same_v<std::decay_t<decltype(e)>, WordEncoder>) {
                return e.table.dim;
            } else {
                return e.dim;
            }
        },
        enc);
}

inline bool encoder_trainable(const InputEncoder& enc) {
    return std::visit(
        [](const auto& e) {
            if constexpr (std::is_same_v<std::decay_t<decltype(e)>, WordEncoder>) {
                return e.table.trainable;
            } else {
                return e.trainable;
            }
        },
        enc);
}

/// The encoder's trainable array: the embedding matrix or the char kernels.
inline std::span<double> encoder_parameters(InputEncoder& enc) {
    return std::visit(
        [](auto& e) -> std::span<double> {
            if constexpr (std::is_same_v<std::decay_t<decltype(e)>, WordEncoder>) {
                return e.table.matrix;
            } else {
                return e.kernels;
            }
        },
        enc);
}

inline std::span<const double> encoder_parameters(const InputEncoder& enc) {
    return encoder_parameters(const_cast<InputEncoder&>(enc));
}

inline const char* encoder_block_name(const InputEncoder& enc) {
    return std::holds_alternative<WordEncoder>(enc) ? "embedding" : "char_kernels";
}

inline EncodedSentence encode(const InputEncoder& enc, std::string_view text) {
    return std::visit(
        [&](const auto& e) -> EncodedSentence {
            if constexpr (std::is_same_v<std::decay_t<decltype(e)>, WordEncoder>) {
                return encode_words(tokenize(text), e.table, e.max_tokens);
            } else {
                return encode_chars(text, e.input, e.kernels, e.dim);
            }
        },
        enc);
}

/// Adds d(loss)/d(encoder parameters) for one encoded sentence.
inline void encoder_backward(const InputEncoder& enc, const EncodedSentence& encoded,
                             const SentenceMatrix& row_grads, std::span<double> grad) {
    if (std::holds_alternative<WordEncoder>(enc)) {
        word_backward(std::get<WordEncoding>(encoded), row_grads, std::get<WordEncoder>(enc).table.dim,
                      grad);
    } else {
        char_backward(std::get<CharEncoding>(encoded), row_grads, grad);
    }
}

struct Ranker {
    QmwfModel model;
    InputEncoder encoder;

    void validate() const {
        if (encoder_dim(encoder) != model.config().embed_dim) {
            throw DimensionError("encoder dim " + std::to_string(encoder_dim(encoder)) +
                                 " does not match model embed_dim " +
                                 std::to_string(model.config().embed_dim));
        }
    }

    [[nodiscard]] Representation represent(std::string_view text) const {
        return forward(sentence_of(encode(encoder, text)), model);
    }

    [[nodiscard]] double score(std::string_view question, std::string_view answer) const {
        return match_score(represent(question), represent(answer));
    }
};

}  // namespace qmwf
