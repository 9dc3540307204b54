#pragma once

// Command-line front end: verify, train, eval, repr and decompose.

#include "qmwf/checkpoint.hpp"
#include "qmwf/data.hpp"
#include "qmwf/embedding.hpp"
#include "qmwf/metrics.hpp"
#include "qmwf/random.hpp"
#include "qmwf/ranker.hpp"
#include "qmwf/tensor.hpp"
#include "qmwf/training.hpp"
#include "qmwf/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace qmwf::cli {

enum ExitCode : int { kOk = 0, kValidationFailure = 1, kRuntimeFailure = 2, kVerifyFailure = 3 };

struct RunConfig {
    std::string command;

    std::string train_path;
    std::string dev_path;
    std::string test_path;
    std::string embeddings_path;
    std::string checkpoint_path;
    std::string history_path;
    std::string charset_path;

    HyperParams hp;
    QmwfConfig model;
    bool embed_dim_set = false;

    std::string input_mode = "word";
    std::size_t max_tokens = kDefaultMaxTokens;
    std::size_t char_window = 3;
    std::size_t char_pool_stride = 0;
    bool freeze_embeddings = false;
    std::size_t neg_k = 0;
    int verbosity = 0;

    // verify
    bool inject_fault = false;
    std::string report_path;
    // eval
    std::string score_mode = "model";
    int trials = 50;
    std::string records_path;
    // repr
    std::string input_path;
    std::string output_path;
    // decompose
    std::string tensor_path;
    std::size_t rank = 0;
    int max_iters = 500;
    double tol = 1e-9;

    /// Checks that the flags a command needs are present, before any file is read.
    void validate() const {
        std::vector<std::string> missing;
        auto need = [&](const std::string& value, const char* flag) {
            if (value.empty()) missing.emplace_back(flag);
        };
        if (command == "train") {
            need(train_path, "--train");
            need(dev_path, "--dev");
            need(checkpoint_path, "--checkpoint");
        } else if (command == "eval") {
            if (test_path.empty() && dev_path.empty()) missing.emplace_back("--test or --dev");
            if (score_mode == "model") need(checkpoint_path, "--checkpoint");
            if (trials < 1) throw ValidationError("--trials must be at least 1");
        } else if (command == "repr") {
            need(checkpoint_path, "--checkpoint");
            need(input_path, "--input");
        } else if (command == "decompose") {
            need(tensor_path, "--tensor");
            if (rank < 1) throw ValidationError("decompose needs --rank >= 1");
            if (max_iters < 1) throw ValidationError("--max-iters must be at least 1");
        }
        if (!missing.empty()) {
            std::string msg = command + " needs";
            for (std::size_t i = 0; i < missing.size(); ++i) msg += (i ? ", " : " ") + missing[i];
            throw ValidationError(msg);
        }
        if (command == "train") {
            hp.validate();
            model.validate();
            if (max_tokens < 1) throw ValidationError("--max-tokens must be at least 1");
            if (char_window < 1) throw ValidationError("--char-window must be at least 1");
        }
    }
};

namespace detail {

template <class E>
[[noreturn]] void rethrow_as(const E&, const std::string& msg) {
    throw E(msg);
}

/// Runs `f`, prefixing any library error with the flag and file it came from.
template <class F>
auto flagged(const std::string& flag, const std::string& path, F&& f) -> decltype(f()) {
    const std::string prefix = flag + " '" + path + "': ";
    try {
        return f();
    } catch (const LoadError& e) {
        rethrow_as(e, prefix + e.what());
    } catch (const FormatError& e) {
        rethrow_as(e, prefix + e.what());
    } catch (const ValidationError& e) {
        rethrow_as(e, prefix + e.what());
    } catch (const DimensionError& e) {
        rethrow_as(e, prefix + e.what());
    } catch (const DegenerateInputError& e) {
        rethrow_as(e, prefix + e.what());
    } catch (const NumericError& e) {
        rethrow_as(e, prefix + e.what());
    }
}

inline std::ofstream open_output(const std::string& flag, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw LoadError(flag + " '" + path + "': cannot open for writing");
    return f;
}

inline Diagnostics diagnostics(const RunConfig& cfg, std::ostream& err) {
    return cfg.verbosity > 0 ? Diagnostics(err) : Diagnostics();
}

inline Dataset load_split(const RunConfig& cfg, const std::string& flag, const std::string& path,
                          const std::string& name, const Diagnostics& diag) {
    auto d = flagged(flag, path, [&] { return load_tsv(path, name, diag).dataset; });
    d = filter_no_positive(d, diag).dataset;
    if (cfg.neg_k > 0) d = flagged(flag, path, [&] { return negative_sample(d, cfg.neg_k, cfg.hp.seed, diag); });
    if (d.groups.empty()) throw ValidationError(flag + " '" + path + "': no question has a correct answer");
    return d;
}

inline void collect_tokens(const Dataset& d, std::set<std::string>& out) {
    for (const auto& g : d.groups) {
        for (auto& t : tokenize(g.question_text)) out.insert(std::move(t));
        for (const auto& c : g.candidates)
            for (auto& t : tokenize(c.answer_text)) out.insert(std::move(t));
    }
}

/// Fresh ranker for training. All draws come from the "init" substream.
inline Ranker build_ranker(const RunConfig& cfg, const Dataset& train_set,
                           const std::vector<const Dataset*>& all_splits, const Diagnostics& diag) {
    auto init = substream(cfg.hp.seed, "init");
    QmwfConfig mc = cfg.model;
    mc.max_positions = cfg.max_tokens;
    InputEncoder enc;
    if (cfg.input_mode == "word") {
        EmbeddingTable table;
        if (!cfg.embeddings_path.empty()) {
            std::set<std::string> vocab;
            for (const auto* d : all_splits) collect_tokens(*d, vocab);
            const std::unordered_set<std::string> keep(vocab.begin(), vocab.end());
            table = flagged("--embeddings", cfg.embeddings_path, [&] {
                        return load_embeddings(cfg.embeddings_path, 0, &keep, diag);
                    }).table;
            if (cfg.embed_dim_set && table.dim != mc.embed_dim) {
                throw DimensionError("--embed-dim " + std::to_string(mc.embed_dim) + " does not match --embeddings '" +
                                     cfg.embeddings_path + "' dim " + std::to_string(table.dim));
            }
        } else {
            std::set<std::string> vocab;
            collect_tokens(train_set, vocab);
            table = random_embeddings(std::vector<std::string>(vocab.begin(), vocab.end()), mc.embed_dim, init);
        }
        table.trainable = !cfg.freeze_embeddings;
        mc.embed_dim = table.dim;
        enc = WordEncoder{std::move(table), cfg.max_tokens};
    } else {
        CharSet cs = cfg.charset_path.empty()
                         ? CharSet::default_set()
                         : flagged("--charset", cfg.charset_path, [&] { return CharSet::load(cfg.charset_path); });
        auto ci = CharInput::one_hot(std::move(cs), cfg.char_window, cfg.char_pool_stride);
        ci.max_rows = cfg.max_tokens;
        auto ce = CharEncoder::random(std::move(ci), mc.embed_dim, init);
        ce.trainable = !cfg.freeze_embeddings;
        enc = std::move(ce);
    }
    mc.validate();
    return Ranker{QmwfModel::random(mc, init), std::move(enc)};
}

inline Ranker load_ranker(const RunConfig& cfg) {
    auto r = flagged("--checkpoint", cfg.checkpoint_path, [&] { return load_checkpoint(cfg.checkpoint_path); });
    flagged("--checkpoint", cfg.checkpoint_path, [&] { r.validate(); });
    return r;
}

inline void write_values(std::ostream& os, std::span<const double> v) {
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
}

inline DenseTensor read_tensor(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open tensor file");
    std::size_t order = 0, dim = 0;
    if (!(in >> order >> dim) || order == 0 || dim == 0) {
        throw LoadError("tensor file must start with positive 'order dim'");
    }
    const auto n = checked_element_count(order, dim, kDefaultElementCap);
    std::vector<double> values;
    values.reserve(n);
    double x = 0.0;
    while (values.size() < n && in >> x) values.push_back(x);
    if (values.size() != n) {
        throw LoadError("expected " + std::to_string(n) + " tensor entries, read " + std::to_string(values.size()));
    }
    std::string extra;
    if (in >> extra) throw LoadError("trailing data after " + std::to_string(n) + " tensor entries");
    return DenseTensor(order, dim, std::move(values));
}

}  // namespace detail

inline int cmd_verify(const RunConfig& cfg, std::ostream& out) {
    VerifyOptions opts;
    opts.seed = cfg.hp.seed;
    opts.inject_fault = cfg.inject_fault;
    const auto rep = run_verify(opts);
    write_verify_report(out, rep);
    if (!cfg.report_path.empty()) {
        auto f = detail::open_output("--report", cfg.report_path);
        write_verify_report(f, rep);
    }
    return rep.passed() ? kOk : kVerifyFailure;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    const auto diag = detail::diagnostics(cfg, err);
    const auto train_set = detail::load_split(cfg, "--train", cfg.train_path, "train", diag);
    const auto dev_set = detail::load_split(cfg, "--dev", cfg.dev_path, "dev", diag);
    Dataset test_set;
    std::vector<const Dataset*> splits{&train_set, &dev_set};
    if (!cfg.test_path.empty()) {
        test_set = detail::load_split(cfg, "--test", cfg.test_path, "test", diag);
        splits.push_back(&test_set);
    }
    auto ranker = detail::build_ranker(cfg, train_set, splits, diag);

    std::ofstream history;
    TrainOptions opts;
    opts.diag = diag;
    if (!cfg.history_path.empty()) {
        history = detail::open_output("--history", cfg.history_path);
        opts.history = &history;
    }
    const auto res = train(train_set, dev_set, std::move(ranker), cfg.hp, opts);
    detail::flagged("--checkpoint", cfg.checkpoint_path, [&] { save_checkpoint(res.best, cfg.checkpoint_path); });

    std::vector<MetricReport> reports{evaluate(res.best, dev_set, cfg.hp.seed)};
    if (!cfg.test_path.empty()) reports.push_back(evaluate(res.best, test_set, cfg.hp.seed));
    out << "best_epoch " << res.best_epoch << " of " << cfg.hp.epochs << '\n';
    write_metric_table(out, reports);
    return kOk;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    const auto diag = detail::diagnostics(cfg, err);
    const bool use_test = !cfg.test_path.empty();
    const std::string flag = use_test ? "--test" : "--dev";
    const auto& path = use_test ? cfg.test_path : cfg.dev_path;
    const auto d = detail::load_split(cfg, flag, path, use_test ? "test" : "dev", diag);

    MetricReport rep;
    if (cfg.score_mode == "model") {
        rep = evaluate(detail::load_ranker(cfg), d, cfg.hp.seed);
    } else if (cfg.score_mode == "oracle") {
        std::vector<RankedCandidates> groups;
        for (const auto& g : d.groups) {
            std::vector<double> s;
            std::vector<int> labels;
            for (const auto& c : g.candidates) {
                s.push_back(c.label);
                labels.push_back(c.label);
            }
            groups.emplace_back(g.question_id, s, labels);
        }
        rep = evaluate_groups(groups, d.split, cfg.hp.seed);
    } else {
        // Uniform random scores, averaged over independent trials.
        auto rng = substream(cfg.hp.seed, "eval");
        std::uniform_real_distribution<double> u(0.0, 1.0);
        rep.split = d.split;
        rep.seed = cfg.hp.seed;
        rep.questions = d.groups.size();
        for (int t = 0; t < cfg.trials; ++t) {
            std::vector<RankedCandidates> groups;
            for (const auto& g : d.groups) {
                std::vector<double> s;
                std::vector<int> labels;
                for (const auto& c : g.candidates) {
                    s.push_back(u(rng));
                    labels.push_back(c.label);
                }
                groups.emplace_back(g.question_id, s, labels);
            }
            const auto m = evaluate_groups(groups, d.split, cfg.hp.seed);
            rep.map += m.map / cfg.trials;
            rep.mrr += m.mrr / cfg.trials;
            rep.p1 += m.p1 / cfg.trials;
        }
    }
    write_metric_table(out, std::vector<MetricReport>{rep});
    if (!cfg.records_path.empty()) {
        auto f = detail::open_output("--records", cfg.records_path);
        write_metric_records(f, rep);
    }
    return kOk;
}

inline int cmd_repr(const RunConfig& cfg, std::ostream& out) {
    const auto ranker = detail::load_ranker(cfg);
    std::ifstream in(cfg.input_path);
    if (!in) throw LoadError("--input '" + cfg.input_path + "': cannot open");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (tokenize(line).empty()) {
            throw ValidationError("--input '" + cfg.input_path + "' line " + std::to_string(lines.size() + 1) +
                                  ": sentence has no tokens");
        }
        lines.push_back(std::move(line));
    }
    std::ofstream file;
    std::ostream* os = &out;
    if (!cfg.output_path.empty()) {
        file = detail::open_output("--output", cfg.output_path);
        os = &file;
    }
    *os << std::setprecision(17);
    for (const auto& line : lines) {
        const auto r = ranker.represent(line);
        detail::write_values(*os, r.values);
        if (ranker.model.config().log_domain) {
            *os << '\t';
            detail::write_values(*os, r.signs);
        }
        *os << '\n';
    }
    return kOk;
}

inline int cmd_decompose(const RunConfig& cfg, std::ostream& out) {
    const auto t = detail::flagged("--tensor", cfg.tensor_path, [&] { return detail::read_tensor(cfg.tensor_path); });
    const auto res = cp_als(t, cfg.rank, cfg.max_iters, cfg.tol, cfg.hp.seed);
    nlohmann::json j{{"order", t.order()},
                     {"dim", t.dim()},
                     {"rank", cfg.rank},
                     {"relative_error", res.relative_error},
                     {"iterations", res.iterations},
                     {"regularized", res.regularized}};
    out << j.dump() << '\n';
    if (!cfg.output_path.empty()) {
        const auto& f = res.factors;
        nlohmann::json factors = nlohmann::json::array();
        for (std::size_t r = 0; r < f.rank(); ++r) {
            nlohmann::json modes = nlohmann::json::array();
            for (std::size_t n = 0; n < f.order(); ++n) {
                const auto e = f.factor(r, n);
                modes.push_back(std::vector<double>(e.begin(), e.end()));
            }
            factors.push_back(std::move(modes));
        }
        auto file = detail::open_output("--output", cfg.output_path);
        file << nlohmann::json{{"weights", std::vector<double>(f.weights().begin(), f.weights().end())},
                               {"factors", std::move(factors)}}
                    .dump()
             << '\n';
    }
    return kOk;
}

inline int dispatch(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    cfg.validate();
    if (cfg.command == "verify") return cmd_verify(cfg, out);
    if (cfg.command == "train") return cmd_train(cfg, out, err);
    if (cfg.command == "eval") return cmd_eval(cfg, out, err);
    if (cfg.command == "repr") return cmd_repr(cfg, out);
    if (cfg.command == "decompose") return cmd_decompose(cfg, out);
    throw ValidationError("unknown command '" + cfg.command + "'");
}

/// Parses flags (and an optional --config file of flag=value lines; explicit
/// flags win) and runs the chosen command. Returns the process exit code.
/// learning_rate, batch_size and l2_lambda are accepted as aliases of lr,
/// batch and l2.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    CLI::App app{"Quantum many-body wave function answer selection", "qmwf"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read flag defaults from a key=value file");

    app.add_option("--train", cfg.train_path, "Training split (TSV)");
    app.add_option("--dev", cfg.dev_path, "Dev split (TSV)");
    app.add_option("--test", cfg.test_path, "Test split (TSV)");
    app.add_option("--embeddings", cfg.embeddings_path, "Word embedding text file");
    app.add_option("--checkpoint", cfg.checkpoint_path, "Model checkpoint path");
    app.add_option("--history", cfg.history_path, "Per-epoch JSONL history output");
    app.add_option("--charset", cfg.charset_path, "Char set file, one character per line");
    app.add_option("--input-mode", cfg.input_mode, "word or char")->check(CLI::IsMember({"word", "char"}));
    auto* embed_dim = app.add_option("--embed-dim", cfg.model.embed_dim, "Amplitude dim M");
    app.add_option("--channels", cfg.model.channels, "Convolution channels R");
    app.add_option("--patch-size", cfg.model.patch_size, "Tokens per convolution window");
    app.add_flag("--shared-kernels", cfg.model.shared_kernels, "One kernel per channel for all positions");
    app.add_flag("--log-pool", cfg.model.log_domain, "Log-domain product pooling");
    app.add_option("--epsilon", cfg.model.epsilon, "Log-domain stabilizer");
    app.add_option("--max-tokens", cfg.max_tokens, "Rows kept per sentence");
    app.add_option("--char-window", cfg.char_window, "Chars per char-convolution window");
    app.add_option("--char-pool-stride", cfg.char_pool_stride, "Char max-pool segment length, 0 per word");
    app.add_flag("--freeze-embeddings", cfg.freeze_embeddings, "Keep the input layer fixed");
    app.add_option("--lr,--learning_rate", cfg.hp.learning_rate, "Adam learning rate");
    app.add_option("--batch,--batch_size", cfg.hp.batch_size, "Triples per batch");
    app.add_option("--l2,--l2_lambda", cfg.hp.l2_lambda, "L2 regularization strength");
    app.add_option("--epochs", cfg.hp.epochs, "Training epochs");
    app.add_option("--margin", cfg.hp.margin, "Hinge margin");
    app.add_option("--seed", cfg.hp.seed, "Root seed");
    app.add_option("--neg-k", cfg.neg_k, "Resample k negatives per question, 0 keeps the file's");
    app.add_flag("-v,--verbose", cfg.verbosity, "JSON diagnostics on stderr");

    auto* verify = app.add_subcommand("verify", "Run the built-in property checks");
    verify->add_flag("--inject-fault", cfg.inject_fault, "Perturb kernels so the oracle check must fail");
    verify->add_option("--report", cfg.report_path, "Also write the report here");
    auto* train_cmd = app.add_subcommand("train", "Train and save the best-dev checkpoint");
    auto* eval = app.add_subcommand("eval", "MAP/MRR/P@1 on a split");
    eval->add_option("--score-mode", cfg.score_mode, "model, oracle or random")
        ->check(CLI::IsMember({"model", "oracle", "random"}));
    eval->add_option("--trials", cfg.trials, "Random-score trials");
    eval->add_option("--records", cfg.records_path, "JSONL metric records output");
    auto* repr = app.add_subcommand("repr", "Write the length-R vector of each input sentence");
    repr->add_option("--input", cfg.input_path, "One sentence per line");
    repr->add_option("--output", cfg.output_path, "Output file (default stdout)");
    auto* decompose = app.add_subcommand("decompose", "CP-ALS fit of a dense tensor file");
    decompose->add_option("--tensor", cfg.tensor_path, "'order dim' then the entries, row-major");
    decompose->add_option("--rank", cfg.rank, "CP rank");
    decompose->add_option("--max-iters", cfg.max_iters, "ALS sweep limit");
    decompose->add_option("--tol", cfg.tol, "Relative-error target");
    decompose->add_option("--output", cfg.output_path, "Factors as JSON");
    for (auto* sub : {verify, train_cmd, eval, repr, decompose}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kValidationFailure;
    }
    for (auto* sub : app.get_subcommands()) cfg.command = sub->get_name();
    cfg.embed_dim_set = embed_dim->count() > 0;

    try {
        return dispatch(cfg, out, err);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kValidationFailure;
    } catch (const DimensionError& e) {
        err << "error: " << e.what() << '\n';
        return kValidationFailure;
    } catch (const DegenerateInputError& e) {
        err << "error: " << e.what() << '\n';
        return kValidationFailure;
    } catch (const CapacityError& e) {
        err << "error: " << e.what() << '\n';
        return kValidationFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntimeFailure;
    }
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"qmwf"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace qmwf::cli
