#pragma once

// Pairwise max-margin training of a Ranker on (question, positive, negative)
// triples with Adam updates and best-dev-MAP model selection.

#include "qmwf/data.hpp"
#include "qmwf/error.hpp"
#include "qmwf/metrics.hpp"
#include "qmwf/network.hpp"
#include "qmwf/random.hpp"
#include "qmwf/ranker.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qmwf {

struct HyperParams {
    double learning_rate = 1e-3;
    std::size_t batch_size = 100;
    double l2_lambda = 1e-5;
    int epochs = 50;
    double margin = 0.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
        if (batch_size < 1) throw ValidationError("batch size must be positive");
        if (!(l2_lambda >= 0.0)) throw ValidationError("L2 lambda must be non-negative");
        if (epochs < 1) throw ValidationError("epochs must be at least 1");
        if (!(margin > 0.0)) throw ValidationError("margin must be positive");
    }
};

inline double pairwise_hinge_loss(double s_pos, double s_neg, double margin) {
    return std::max(0.0, margin - s_pos + s_neg);
}

/// Gradient arrays mirroring a Ranker's trainable parameters. `encoder` is
/// empty when the encoder is frozen.
struct Gradients {
    std::vector<double> kernels;
    std::vector<double> out_weights;
    std::vector<double> encoder;

    static Gradients zeros_like(const Ranker& r) {
        Gradients g;
        g.kernels.assign(r.model.kernels().size(), 0.0);
        g.out_weights.assign(r.model.out_weights().size(), 0.0);
        if (encoder_trainable(r.encoder)) g.encoder.assign(encoder_parameters(r.encoder).size(), 0.0);
        return g;
    }
};

/// Model-parameter gradients plus the gradients of the three input sentences.
struct TripleBackward {
    double loss = 0.0;
    std::vector<double> kernels;
    std::vector<double> out_weights;
    SentenceMatrix d_question;
    SentenceMatrix d_positive;
    SentenceMatrix d_negative;
};

namespace detail {

/// Backpropagates d(loss)/d(v) through one forward pass, accumulating kernel
/// and output-weight gradients and returning d(loss)/d(sentence rows).
inline SentenceMatrix sentence_backward(const QmwfModel& m, const ForwardTrace& t,
                                        std::span<const double> d_values, std::size_t sentence_rows,
                                        std::span<double> d_kernels, std::span<double> d_out) {
    const auto& c = m.config();
    const std::size_t positions = t.sigma.positions;
    const std::size_t w = c.window_size();
    const std::size_t dim = c.embed_dim;
    SentenceMatrix d_rows(sentence_rows, dim);
    std::vector<double> prefix(positions + 1);
    std::vector<double> suffix(positions + 1);
    for (std::size_t r = 0; r < c.channels; ++r) {
        const double dv = d_values[r];
        if (dv == 0.0) continue;
        d_out[r] += dv * t.pooled[r];
        const double d_pooled = dv * m.out_weights()[r];
        const auto sig = t.sigma.channel(r);
        if (!c.log_domain) {
            prefix[0] = 1.0;
            for (std::size_t i = 0; i < positions; ++i) prefix[i + 1] = prefix[i] * sig[i];
            suffix[positions] = 1.0;
            for (std::size_t i = positions; i-- > 0;) suffix[i] = suffix[i + 1] * sig[i];
        }
        for (std::size_t i = 0; i < positions; ++i) {
            double d_sigma = 0.0;
            if (c.log_domain) {
                const double s = sig[i];
                const double sgn = s > 0.0 ? 1.0 : (s < 0.0 ? -1.0 : 0.0);
                d_sigma = d_pooled * sgn / (std::abs(s) + c.epsilon);
            } else {
                d_sigma = d_pooled * prefix[i] * suffix[i + 1];
            }
            if (d_sigma == 0.0) continue;
            const std::size_t off = m.kernel_offset(r, i);
            const auto window = t.windows.row(i);
            const auto kernel = m.kernel(r, i);
            for (std::size_t q = 0; q < w; ++q) d_kernels[off + q] += d_sigma * window[q];
            for (std::size_t q = 0; q < w; ++q) {
                const std::size_t row = i + q / dim;
                if (row < sentence_rows) d_rows.row(row)[q % dim] += d_sigma * kernel[q];
            }
        }
    }
    return d_rows;
}

/// d(score)/d(v_q) and d(score)/d(v_a) for score = sum_r q_r a_r (sq_r sa_r).
inline void score_grads(const Representation& q, const Representation& a, std::vector<double>& dq,
                        std::vector<double>& da) {
    const std::size_t n = q.values.size();
    dq.assign(n, 0.0);
    da.assign(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const double s = q.signs.empty() ? 1.0 : q.signs[r] * a.signs[r];
        dq[r] = a.values[r] * s;
        da[r] = q.values[r] * s;
    }
}

inline void check_finite(std::span<const double> v, const char* block) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite gradient in block '") + block + "'");
    }
}

}  // namespace detail

/// Hinge loss of one triple and its analytic gradients (no L2 term). The hinge
/// is inactive, with zero gradient, when margin - s_pos + s_neg <= 0.
inline TripleBackward triple_backward(const QmwfModel& m, const SentenceMatrix& q,
                                      const SentenceMatrix& a_pos, const SentenceMatrix& a_neg,
                                      double margin) {
    const auto tq = forward_trace(q, m);
    const auto tp = forward_trace(a_pos, m);
    const auto tn = forward_trace(a_neg, m);
    const double s_pos = match_score(tq.output, tp.output);
    const double s_neg = match_score(tq.output, tn.output);
    TripleBackward out;
    out.kernels.assign(m.kernels().size(), 0.0);
    out.out_weights.assign(m.out_weights().size(), 0.0);
    out.loss = pairwise_hinge_loss(s_pos, s_neg, margin);
    if (!(margin - s_pos + s_neg > 0.0)) {
        out.d_question = SentenceMatrix(q.rows(), q.cols());
        out.d_positive = SentenceMatrix(a_pos.rows(), a_pos.cols());
        out.d_negative = SentenceMatrix(a_neg.rows(), a_neg.cols());
        return out;
    }
    // loss = margin - s_pos + s_neg.
    std::vector<double> dq_pos, da_pos, dq_neg, da_neg;
    detail::score_grads(tq.output, tp.output, dq_pos, da_pos);
    detail::score_grads(tq.output, tn.output, dq_neg, da_neg);
    const std::size_t r = dq_pos.size();
    std::vector<double> dvq(r), dvp(r), dvn(r);
    for (std::size_t k = 0; k < r; ++k) {
        dvq[k] = dq_neg[k] - dq_pos[k];
        dvp[k] = -da_pos[k];
        dvn[k] = da_neg[k];
    }
    out.d_question = detail::sentence_backward(m, tq, dvq, q.rows(), out.kernels, out.out_weights);
    out.d_positive = detail::sentence_backward(m, tp, dvp, a_pos.rows(), out.kernels, out.out_weights);
    out.d_negative = detail::sentence_backward(m, tn, dvn, a_neg.rows(), out.kernels, out.out_weights);
    return out;
}

/// Single-triple loss with L2 regularization over kernels and output weights:
///     max(0, margin - s_pos + s_neg) + l2/2 * (|K|^2 + |t|^2).
inline std::pair<double, Gradients> backward(const QmwfModel& m, const SentenceMatrix& q,
                                             const SentenceMatrix& a_pos, const SentenceMatrix& a_neg,
                                             const HyperParams& hp) {
    auto tb = triple_backward(m, q, a_pos, a_neg, hp.margin);
    Gradients g;
    g.kernels = std::move(tb.kernels);
    g.out_weights = std::move(tb.out_weights);
    double reg = 0.0;
    for (std::size_t i = 0; i < g.kernels.size(); ++i) {
        reg += m.kernels()[i] * m.kernels()[i];
        g.kernels[i] += hp.l2_lambda * m.kernels()[i];
    }
    for (std::size_t i = 0; i < g.out_weights.size(); ++i) {
        reg += m.out_weights()[i] * m.out_weights()[i];
        g.out_weights[i] += hp.l2_lambda * m.out_weights()[i];
    }
    detail::check_finite(g.kernels, "kernels");
    detail::check_finite(g.out_weights, "out_weights");
    return {tb.loss + 0.5 * hp.l2_lambda * reg, std::move(g)};
}

/// Indices of one training example inside a Dataset.
struct Triple {
    std::size_t group = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
};

struct BatchResult {
    /// Mean hinge loss plus the L2 term.
    double loss = 0.0;
    double mean_hinge = 0.0;
    Gradients grads;
};

/// Mean loss and gradients of a batch: sentences are encoded once per batch
/// and gradients accumulate in triple order.
inline BatchResult batch_backward(const Ranker& ranker, const Dataset& data,
                                  std::span<const Triple> batch, const HyperParams& hp) {
    if (batch.empty()) throw DimensionError("empty batch");
    BatchResult out;
    out.grads = Gradients::zeros_like(ranker);
    const bool train_encoder = !out.grads.encoder.empty();
    std::map<std::pair<std::size_t, std::size_t>, EncodedSentence> cache;
    constexpr std::size_t kQuestion = static_cast<std::size_t>(-1);
    auto encoded = [&](std::size_t g, std::size_t c) -> const EncodedSentence& {
        auto it = cache.find({g, c});
        if (it == cache.end()) {
            const auto& grp = data.groups[g];
            const std::string& text = c == kQuestion ? grp.question_text : grp.candidates[c].answer_text;
            it = cache.emplace(std::make_pair(g, c), encode(ranker.encoder, text)).first;
        }
        return it->second;
    };
    const double scale = 1.0 / static_cast<double>(batch.size());
    double hinge = 0.0;
    for (const auto& t : batch) {
        const auto& eq = encoded(t.group, kQuestion);
        const auto& ep = encoded(t.group, t.positive);
        const auto& en = encoded(t.group, t.negative);
        auto tb = triple_backward(ranker.model, sentence_of(eq), sentence_of(ep), sentence_of(en), hp.margin);
        hinge += tb.loss;
        if (tb.loss == 0.0) continue;
        for (std::size_t i = 0; i < tb.kernels.size(); ++i) out.grads.kernels[i] += scale * tb.kernels[i];
        for (std::size_t i = 0; i < tb.out_weights.size(); ++i) out.grads.out_weights[i] += scale * tb.out_weights[i];
        if (train_encoder) {
            for (auto* d : {&tb.d_question, &tb.d_positive, &tb.d_negative}) {
                for (double& x : d->data()) x *= scale;
            }
            encoder_backward(ranker.encoder, eq, tb.d_question, out.grads.encoder);
            encoder_backward(ranker.encoder, ep, tb.d_positive, out.grads.encoder);
            encoder_backward(ranker.encoder, en, tb.d_negative, out.grads.encoder);
        }
    }
    out.mean_hinge = hinge * scale;
    double reg = 0.0;
    const auto k = ranker.model.kernels();
    const auto w = ranker.model.out_weights();
    for (std::size_t i = 0; i < k.size(); ++i) {
        reg += k[i] * k[i];
        out.grads.kernels[i] += hp.l2_lambda * k[i];
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        reg += w[i] * w[i];
        out.grads.out_weights[i] += hp.l2_lambda * w[i];
    }
    out.loss = out.mean_hinge + 0.5 * hp.l2_lambda * reg;
    detail::check_finite(out.grads.kernels, "kernels");
    detail::check_finite(out.grads.out_weights, "out_weights");
    detail::check_finite(out.grads.encoder, encoder_block_name(ranker.encoder));
    return out;
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
};

/// One bias-corrected Adam update over parallel parameter/gradient blocks.
/// Moment arrays are created on first use.
inline void adam_step(AdamState& state, std::span<const std::span<double>> params,
                      std::span<const std::span<const double>> grads, double learning_rate) {
    if (params.size() != grads.size()) throw DimensionError("parameter and gradient block counts differ");
    if (state.first.empty()) {
        for (const auto& p : params) {
            state.first.emplace_back(p.size(), 0.0);
            state.second.emplace_back(p.size(), 0.0);
        }
    }
    if (state.first.size() != params.size()) throw DimensionError("Adam state does not match parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t b = 0; b < params.size(); ++b) {
        auto& m = state.first[b];
        auto& v = state.second[b];
        if (m.size() != params[b].size() || grads[b].size() != params[b].size()) {
            throw DimensionError("Adam block shapes differ");
        }
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double g = grads[b][i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            params[b][i] -= learning_rate * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

/// Adam update of every trainable block of a ranker.
inline void adam_step(AdamState& state, Ranker& ranker, const Gradients& grads, const HyperParams& hp) {
    std::vector<std::span<double>> params{ranker.model.kernels(), ranker.model.out_weights()};
    std::vector<std::span<const double>> g{grads.kernels, grads.out_weights};
    if (!grads.encoder.empty()) {
        params.push_back(encoder_parameters(ranker.encoder));
        g.emplace_back(grads.encoder);
    }
    adam_step(state, params, g, hp.learning_rate);
}

/// Scores every candidate and ranks each group.
inline std::vector<RankedCandidates> rank_dataset(const Ranker& ranker, const Dataset& d) {
    std::vector<RankedCandidates> out;
    out.reserve(d.groups.size());
    for (const auto& g : d.groups) {
        const auto q = ranker.represent(g.question_text);
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& c : g.candidates) {
            scores.push_back(match_score(q, ranker.represent(c.answer_text)));
            labels.push_back(c.label);
        }
        out.emplace_back(g.question_id, scores, labels);
    }
    return out;
}

inline MetricReport evaluate(const Ranker& ranker, const Dataset& d, std::uint64_t seed = 0) {
    const auto groups = rank_dataset(ranker, d);
    return evaluate_groups(groups, d.split, seed);
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double dev_map = 0.0;
    double dev_mrr = 0.0;
    double dev_p1 = 0.0;
    std::size_t steps = 0;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"epoch", epoch}, {"train_loss", train_loss}, {"dev_map", dev_map},
                {"dev_mrr", dev_mrr}, {"dev_p1", dev_p1}, {"steps", steps}};
    }
};

struct TrainResult {
    Ranker best;
    int best_epoch = 0;
    double best_dev_map = 0.0;
    /// Epoch 0 is the untrained model.
    std::vector<EpochRecord> history;
    std::size_t skipped_questions = 0;
    std::size_t triples = 0;
};

struct TrainOptions {
    Diagnostics diag;
    /// When set, each epoch record is written here as one JSON line.
    std::ostream* history = nullptr;
};

/// All (positive, negative) pairs per question, in dataset order.
inline std::vector<Triple> make_triples(const Dataset& d, std::size_t* skipped = nullptr) {
    std::vector<Triple> out;
    std::size_t skip = 0;
    for (std::size_t g = 0; g < d.groups.size(); ++g) {
        const auto& cands = d.groups[g].candidates;
        const std::size_t before = out.size();
        for (std::size_t p = 0; p < cands.size(); ++p) {
            if (cands[p].label != 1) continue;
            for (std::size_t n = 0; n < cands.size(); ++n) {
                if (cands[n].label == 0) out.push_back({g, p, n});
            }
        }
        if (out.size() == before) ++skip;
    }
    if (skipped != nullptr) *skipped = skip;
    return out;
}

/// Trains for hp.epochs epochs of shuffled triple batches and returns the
/// ranker with the best dev MAP (ties keep the earlier epoch, including the
/// untrained starting point).
inline TrainResult train(const Dataset& train_set, const Dataset& dev_set, Ranker ranker,
                         const HyperParams& hp, const TrainOptions& opts = {}) {
    hp.validate();
    ranker.validate();
    if (train_set.groups.empty() || dev_set.groups.empty()) {
        throw ValidationError("training needs nonempty train and dev splits");
    }
    TrainResult result;
    auto triples = make_triples(train_set, &result.skipped_questions);
    if (result.skipped_questions > 0) {
        opts.diag.emit("train_skipped_questions", {{"count", result.skipped_questions}});
    }
    if (triples.empty()) throw ValidationError("training split has no (positive, negative) pairs");
    result.triples = triples.size();

    auto record = [&](const EpochRecord& rec) {
        result.history.push_back(rec);
        if (opts.history != nullptr) *opts.history << rec.to_json().dump() << '\n';
    };

    EpochRecord initial;
    {
        double hinge = 0.0;
        for (std::size_t b = 0; b < triples.size(); b += hp.batch_size) {
            const std::size_t e = std::min(triples.size(), b + hp.batch_size);
            const std::span<const Triple> batch(triples.data() + b, e - b);
            hinge += batch_backward(ranker, train_set, batch, hp).mean_hinge * static_cast<double>(batch.size());
        }
        initial.train_loss = hinge / static_cast<double>(triples.size());
        const auto m = evaluate(ranker, dev_set, hp.seed);
        initial.dev_map = m.map;
        initial.dev_mrr = m.mrr;
        initial.dev_p1 = m.p1;
    }
    record(initial);
    result.best = ranker;
    result.best_dev_map = initial.dev_map;

    auto shuffle_rng = substream(hp.seed, "shuffle");
    AdamState adam;
    for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
        std::shuffle(triples.begin(), triples.end(), shuffle_rng);
        EpochRecord rec;
        rec.epoch = epoch;
        double hinge = 0.0;
        for (std::size_t b = 0; b < triples.size(); b += hp.batch_size) {
            const std::size_t e = std::min(triples.size(), b + hp.batch_size);
            const std::span<const Triple> batch(triples.data() + b, e - b);
            const auto br = batch_backward(ranker, train_set, batch, hp);
            hinge += br.mean_hinge * static_cast<double>(batch.size());
            adam_step(adam, ranker, br.grads, hp);
            ++rec.steps;
        }
        rec.train_loss = hinge / static_cast<double>(triples.size());
        const auto m = evaluate(ranker, dev_set, hp.seed);
        rec.dev_map = m.map;
        rec.dev_mrr = m.mrr;
        rec.dev_p1 = m.p1;
        record(rec);
        if (rec.dev_map > result.best_dev_map) {
            result.best_dev_map = rec.dev_map;
            result.best_epoch = epoch;
            result.best = ranker;
        }
    }
    return result;
}

}  // namespace qmwf
