#pragma once

// Central finite differences of the batch loss against the analytic
// gradients, block by block.

#include "qmwf/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace qmwf::testing {

struct BlockError {
    std::string block;
    double max_abs = 0.0;
    double scale = 0.0;
    /// max |analytic - numeric| / max(max |numeric|, 1e-8).
    double relative = 0.0;
};

inline BlockError compare_block(std::string name, std::span<const double> analytic,
                                std::span<const double> numeric) {
    BlockError e{std::move(name)};
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        e.max_abs = std::max(e.max_abs, std::abs(analytic[i] - numeric[i]));
        e.scale = std::max(e.scale, std::abs(numeric[i]));
    }
    e.relative = e.max_abs / std::max(e.scale, 1e-8);
    return e;
}

inline std::vector<double> numeric_gradient(Ranker& r, std::span<double> params, const Dataset& d,
                                            std::span<const Triple> batch, const HyperParams& hp,
                                            double h = 1e-5) {
    std::vector<double> g(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = params[i];
        params[i] = orig + h;
        const double up = batch_backward(r, d, batch, hp).loss;
        params[i] = orig - h;
        const double down = batch_backward(r, d, batch, hp).loss;
        params[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline std::vector<BlockError> gradient_check(Ranker r, const Dataset& d, std::span<const Triple> batch,
                                              const HyperParams& hp) {
    const auto analytic = batch_backward(r, d, batch, hp).grads;
    std::vector<BlockError> out;
    out.push_back(compare_block("kernels", analytic.kernels,
                                numeric_gradient(r, r.model.kernels(), d, batch, hp)));
    out.push_back(compare_block("out_weights", analytic.out_weights,
                                numeric_gradient(r, r.model.out_weights(), d, batch, hp)));
    if (encoder_trainable(r.encoder)) {
        out.push_back(compare_block(encoder_block_name(r.encoder), analytic.encoder,
                                    numeric_gradient(r, encoder_parameters(r.encoder), d, batch, hp)));
    }
    return out;
}

struct GradCase {
    Ranker ranker;
    Dataset data;
    std::vector<Triple> triples;
    HyperParams hp;
    std::string label;
};

/// Random small problem: N <= 4 tokens, M <= 5, R <= 4, covering patch sizes,
/// kernel sharing, log pooling and both input paths.
inline GradCase random_grad_case(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    QmwfConfig c;
    c.embed_dim = pick(2, 5);
    c.channels = pick(1, 4);
    c.patch_size = pick(1, 2);
    c.shared_kernels = seed % 3 == 1;
    c.log_domain = seed % 2 == 1;
    c.max_positions = 4;
    const bool char_mode = seed % 4 == 3;

    std::vector<std::string> words;
    for (int i = 0; i < 6; ++i) words.push_back(std::string(1, static_cast<char>('a' + i)) + "x" + std::string(1, static_cast<char>('k' + i)));
    auto sentence = [&] {
        std::string s;
        const std::size_t n = pick(1, 4);
        for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + words[pick(0, words.size() - 1)];
        return s;
    };
    Dataset d;
    d.split = "grad";
    for (int q = 0; q < 2; ++q) {
        QuestionGroup g{"q" + std::to_string(q), sentence(), {}};
        g.candidates.push_back({g.question_id, g.question_text, sentence(), 1});
        g.candidates.push_back({g.question_id, g.question_text, sentence(), 0});
        g.candidates.push_back({g.question_id, g.question_text, sentence(), 0});
        d.groups.push_back(std::move(g));
    }

    // Redraw until every convolution response is well away from zero, where
    // the log-domain derivative 1/(|x| + eps) defeats finite differences.
    QmwfModel model(c);
    InputEncoder enc;
    for (int attempt = 0;; ++attempt) {
        model = QmwfModel::random(c, rng);
        std::uniform_real_distribution<double> tw(0.5, 1.5);
        for (double& t : model.out_weights()) t = tw(rng);
        if (char_mode) {
            CharSet cs;
            for (char ch = 'a'; ch <= 'z'; ++ch) cs.add(static_cast<char32_t>(ch));
            auto ci = CharInput::one_hot(cs, 2, 0);
            ci.max_rows = 4;
            enc = CharEncoder::random(std::move(ci), c.embed_dim, rng);
        } else {
            enc = WordEncoder{random_embeddings(words, c.embed_dim, rng), 4};
        }
        double smallest = 1e300;
        for (const auto& g : d.groups) {
            for (const std::string* text : {&g.question_text, &g.candidates[0].answer_text,
                                            &g.candidates[1].answer_text, &g.candidates[2].answer_text}) {
                const auto t = forward_trace(sentence_of(encode(enc, *text)), model);
                for (double x : t.sigma.data) smallest = std::min(smallest, std::abs(x));
            }
        }
        if (smallest >= 0.05 || attempt > 1000) break;
    }
    HyperParams hp;
    hp.l2_lambda = 1e-3;
    GradCase gc{Ranker{std::move(model), std::move(enc)}, std::move(d), {}, hp, {}};
    gc.triples = make_triples(gc.data);
    // Margin just past the largest score gap keeps every hinge active while
    // the loss stays O(1).
    double gap = 0.0;
    for (const auto& t : gc.triples) {
        const auto& g = gc.data.groups[t.group];
        const auto vq = gc.ranker.represent(g.question_text);
        const double diff = match_score(vq, gc.ranker.represent(g.candidates[t.positive].answer_text)) -
                            match_score(vq, gc.ranker.represent(g.candidates[t.negative].answer_text));
        gap = std::max(gap, diff);
    }
    gc.hp.margin = gap + 1.0;
    gc.label = "M=" + std::to_string(c.embed_dim) + " R=" + std::to_string(c.channels) +
               " patch=" + std::to_string(c.patch_size) + (c.shared_kernels ? " shared" : "") +
               (c.log_domain ? " log" : "") + (char_mode ? " char" : " word");
    return gc;
}

}  // namespace qmwf::testing
