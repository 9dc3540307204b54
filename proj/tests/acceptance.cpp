// Acceptance harness: one PASS/FAIL/SKIP line per criterion.

#include "qmwf/cli.hpp"

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "planted.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace {

using namespace qmwf;
namespace fs = std::filesystem;

enum class Status { kPass, kFail, kSkip };

struct Outcome {
    Status status = Status::kFail;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

class Stopwatch {
public:
    [[nodiscard]] double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::kPass : Status::kFail, std::move(detail)}; }

std::vector<std::vector<double>> unit_rows(std::mt19937_64& rng, std::size_t n, std::size_t m) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(testing::unit_vector(rng, m));
    return rows;
}

// 1. Network sum equals the projection onto the dense global tensor, built
// entry by entry from the kernels.
Outcome projection_identity() {
    Stopwatch clock;
    std::mt19937_64 rng(101);
    const std::size_t ns[] = {1, 2, 3, 4};
    const std::size_t ms[] = {2, 3, 5};
    const std::size_t rs[] = {1, 3, 6};
    double worst = 0.0;
    int cases = 0;
    for (int k = 0; k < 1000; ++k) {
        QmwfConfig c;
        c.embed_dim = ms[(k / 4) % 3];
        c.channels = rs[(k / 12) % 3];
        c.max_positions = 4;
        const std::size_t n = ns[k % 4];
        auto model = QmwfModel::random(c, rng);
        std::normal_distribution<double> g(0.0, 1.0);
        for (double& t : model.out_weights()) t = g(rng);
        const auto rows = unit_rows(rng, n, c.embed_dim);

        std::vector<double> tensor;
        testing::for_each_coordinate(n, c.embed_dim, [&](const std::vector<std::size_t>& h) {
            double entry = 0.0;
            for (std::size_t r = 0; r < c.channels; ++r) {
                double p = model.out_weights()[r];
                for (std::size_t i = 0; i < n; ++i) p *= model.kernel(r, i)[h[i]];
                entry += p;
            }
            tensor.push_back(entry);
        });
        double oracle = 0.0;
        std::size_t flat = 0;
        testing::for_each_coordinate(n, c.embed_dim, [&](const std::vector<std::size_t>& h) {
            double amp = 1.0;
            for (std::size_t i = 0; i < n; ++i) amp *= rows[i][h[i]];
            oracle += tensor[flat++] * amp;
        });
        const auto v = forward(SentenceMatrix::from_rows(rows), model).values;
        const double net = std::accumulate(v.begin(), v.end(), 0.0);
        worst = std::max(worst, testing::relative_diff(net, oracle));
        ++cases;
    }
    const double t = clock.seconds();
    return verdict(worst <= 1e-9 && t < 5.0, "cases=" + std::to_string(cases) + " max_error=" + fmt("%.3e", worst) +
                                                 " tolerance=1e-9 seconds=" + fmt("%.2f", t) + " limit=5");
}

// 2. Analytic gradients against central differences, every parameter block.
Outcome gradient_correctness() {
    Stopwatch clock;
    double worst = 0.0;
    std::string worst_at;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto gc = testing::random_grad_case(seed);
        for (const auto& e : testing::gradient_check(gc.ranker, gc.data, gc.triples, gc.hp)) {
            if (e.relative >= worst) {
                worst = e.relative;
                worst_at = gc.label + " " + e.block;
            }
        }
    }
    const double t = clock.seconds();
    return verdict(worst <= 1e-4 && t < 10.0, "configs=10 max_rel_error=" + fmt("%.3e", worst) + " (" + worst_at +
                                                  ") tolerance=1e-4 seconds=" + fmt("%.2f", t) + " limit=10");
}

// 3. ALS recovers synthetic rank-3 tensors; the error is recomputed here from
// the returned factors.
Outcome cp_round_trip() {
    Stopwatch clock;
    int recovered = 0;
    double worst = 0.0;
    int max_sweeps = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed * 7919);
        std::vector<std::vector<std::vector<double>>> f(3);
        for (auto& r : f)
            for (int n = 0; n < 3; ++n) r.push_back(testing::random_vector(rng, 4));
        std::vector<double> data;
        testing::for_each_coordinate(3, 4, [&](const std::vector<std::size_t>& h) {
            double x = 0.0;
            for (const auto& r : f) x += r[0][h[0]] * r[1][h[1]] * r[2][h[2]];
            data.push_back(x);
        });
        const auto res = cp_als(DenseTensor(3, 4, data), 3, 500, 1e-9, seed);
        double diff = 0.0, norm = 0.0;
        std::size_t flat = 0;
        testing::for_each_coordinate(3, 4, [&](const std::vector<std::size_t>& h) {
            double x = 0.0;
            for (std::size_t r = 0; r < res.factors.rank(); ++r) {
                double p = res.factors.weights()[r];
                for (std::size_t n = 0; n < 3; ++n) p *= res.factors.factor(r, n)[h[n]];
                x += p;
            }
            diff += (x - data[flat]) * (x - data[flat]);
            norm += data[flat] * data[flat];
            ++flat;
        });
        const double err = std::sqrt(diff / norm);
        worst = std::max(worst, err);
        max_sweeps = std::max(max_sweeps, res.iterations);
        if (err <= 1e-6 && res.iterations <= 500) ++recovered;
    }
    return verdict(recovered == 20, "recovered=" + std::to_string(recovered) + "/20 max_rel_error=" +
                                        fmt("%.3e", worst) + " tolerance=1e-6 max_sweeps=" +
                                        std::to_string(max_sweeps) + " limit=500 seconds=" +
                                        fmt("%.2f", clock.seconds()));
}

// 4. Shared kernels with one-token patches make the output order-free.
Outcome permutation_invariance() {
    std::mt19937_64 rng(404);
    double worst = 0.0;
    int cases = 0;
    for (int inst = 0; inst < 10; ++inst) {
        QmwfConfig c;
        c.embed_dim = 2 + inst % 4;
        c.channels = 1 + inst % 5;
        c.shared_kernels = true;
        c.log_domain = inst % 2 == 1;
        const std::size_t n = 2 + inst % 5;
        const auto model = QmwfModel::random(c, rng);
        auto rows = unit_rows(rng, n, c.embed_dim);
        const auto base = forward(SentenceMatrix::from_rows(rows), model);
        for (int p = 0; p < 100; ++p) {
            std::shuffle(rows.begin(), rows.end(), rng);
            const auto v = forward(SentenceMatrix::from_rows(rows), model);
            for (std::size_t r = 0; r < c.channels; ++r) {
                worst = std::max(worst, testing::relative_diff(v.values[r], base.values[r]));
                if (c.log_domain) worst = std::max(worst, std::abs(v.signs[r] - base.signs[r]));
            }
            ++cases;
        }
    }
    return verdict(worst <= 1e-12, "instances=10 permutations=" + std::to_string(cases) + " max_error=" +
                                       fmt("%.3e", worst) + " tolerance=1e-12");
}

// 5. Metrics equal brute-force pairwise-rank references; random guessing on
// five candidates gives P@1 near 1/5.
Outcome metric_oracles() {
    std::mt19937_64 rng(505);
    std::uniform_int_distribution<int> size(1, 8);
    std::uniform_int_distribution<int> coarse(0, 4);
    std::bernoulli_distribution label(0.35);
    std::vector<RankedCandidates> groups;
    double ref_map = 0.0, ref_mrr = 0.0, ref_p1 = 0.0;
    int mismatches = 0;
    for (int q = 0; q < 1000; ++q) {
        const int n = size(rng);
        std::vector<double> s(n);
        std::vector<int> l(n);
        for (int i = 0; i < n; ++i) {
            s[i] = coarse(rng);
            l[i] = label(rng) ? 1 : 0;
        }
        l[std::uniform_int_distribution<int>(0, n - 1)(rng)] = 1;
        groups.emplace_back("q" + std::to_string(q), s, l);
        const double ap = testing::reference_ap(s, l), rr = testing::reference_rr(s, l),
                     p1 = testing::reference_p1(s, l);
        const std::vector<RankedCandidates> one{groups.back()};
        if (average_precision(groups.back()) != ap || reciprocal_rank(groups.back()) != rr || p_at_1(one) != p1) {
            ++mismatches;
        }
        ref_map += ap;
        ref_mrr += rr;
        ref_p1 += p1;
    }
    const double nq = static_cast<double>(groups.size());
    if (mean_average_precision(groups) != ref_map / nq || mean_reciprocal_rank(groups) != ref_mrr / nq ||
        p_at_1(groups) != ref_p1 / nq) {
        ++mismatches;
    }

    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<RankedCandidates> sim;
    for (int q = 0; q < 10000; ++q) {
        std::vector<double> s(5);
        for (double& x : s) x = u(rng);
        sim.emplace_back("sim", s, std::vector<int>{1, 0, 0, 0, 0});
    }
    const double p1 = p_at_1(sim);
    const bool guess_ok = std::abs(p1 - 0.2) <= 0.01;
    return verdict(mismatches == 0 && guess_ok, "groups=1000 mismatches=" + std::to_string(mismatches) +
                                                    " random_guess_p1=" + fmt("%.4f", p1) + " target=0.200+-0.01");
}

Ranker planted_ranker(const testing::PlantedData& p, std::uint64_t seed) {
    QmwfConfig c;
    c.embed_dim = p.table.dim;
    c.channels = 10;
    auto rng = substream(seed, "init");
    return Ranker{QmwfModel::random(c, rng), WordEncoder{p.table, 40}};
}

// 6. Planted separable data is learned to dev MAP >= 0.99 in 20 epochs.
Outcome planted_learnability() {
    Stopwatch clock;
    std::string detail;
    int ok = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto p = testing::make_planted(seed);
        HyperParams hp;
        hp.learning_rate = 0.01;
        hp.batch_size = 20;
        hp.epochs = 20;
        hp.seed = seed;
        const auto res = train(p.train, p.dev, planted_ranker(p, seed), hp);
        if (res.best_dev_map >= 0.99) ++ok;
        detail += " seed" + std::to_string(seed) + "_dev_map=" + fmt("%.4f", res.best_dev_map);
    }
    const double t = clock.seconds();
    return verdict(ok == 3 && t < 120.0, "seeds_ok=" + std::to_string(ok) + "/3" + detail +
                                             " threshold=0.99 seconds=" + fmt("%.2f", t) + " limit=120");
}

MetricReport random_baseline(const Dataset& d, std::uint64_t seed, int trials) {
    auto rng = substream(seed, "eval");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    MetricReport out;
    for (int t = 0; t < trials; ++t) {
        std::vector<RankedCandidates> groups;
        for (const auto& g : d.groups) {
            std::vector<double> s;
            std::vector<int> l;
            for (const auto& c : g.candidates) {
                s.push_back(u(rng));
                l.push_back(c.label);
            }
            groups.emplace_back(g.question_id, s, l);
        }
        out.map += mean_average_precision(groups) / trials;
    }
    return out;
}

// 7. Real WikiQA with pretrained vectors beats random and untrained scoring.
Outcome wikiqa() {
    const char* dir = std::getenv("QMWF_WIKIQA_DIR");
    const char* glove = std::getenv("QMWF_GLOVE_PATH");
    if (dir == nullptr || glove == nullptr) {
        return {Status::kSkip, "set QMWF_WIKIQA_DIR (train.tsv, dev.tsv, test.tsv) and QMWF_GLOVE_PATH (300-d)"};
    }
    Stopwatch clock;
    cli::RunConfig cfg;
    cfg.embeddings_path = glove;
    cfg.model.embed_dim = 300;
    cfg.embed_dim_set = true;
    cfg.model.channels = 150;
    cfg.model.patch_size = 2;
    cfg.model.log_domain = true;
    if (const char* e = std::getenv("QMWF_WIKIQA_EPOCHS")) cfg.hp.epochs = std::atoi(e);
    if (const char* e = std::getenv("QMWF_WIKIQA_POOL")) cfg.model.log_domain = std::string(e) != "linear";
    if (const char* e = std::getenv("QMWF_WIKIQA_PATCH")) cfg.model.patch_size = static_cast<std::size_t>(std::atoi(e));
    const Diagnostics diag;
    const auto split = [&](const char* name) {
        const std::string path = (fs::path(dir) / (std::string(name) + ".tsv")).string();
        return cli::detail::load_split(cfg, "QMWF_WIKIQA_DIR", path, name, diag);
    };
    const auto train_set = split("train");
    const auto dev_set = split("dev");
    const auto test_set = split("test");
    const std::vector<const Dataset*> splits{&train_set, &dev_set, &test_set};

    // Grid chosen on seed 1 by dev MAP, then reused for all seeds.
    std::vector<double> lrs{1e-3, 1e-4, 1e-5};
    std::vector<std::size_t> batches{80, 100, 120, 140};
    std::vector<double> l2s{1e-4, 1e-5, 1e-6};
    if (const char* g = std::getenv("QMWF_WIKIQA_GRID"); g != nullptr && std::string(g) == "default") {
        lrs = {1e-3};
        batches = {100};
        l2s = {1e-5};
    }
    HyperParams best_hp = cfg.hp;
    double best_dev = -1.0;
    for (double lr : lrs)
        for (std::size_t b : batches)
            for (double l2 : l2s) {
                auto c = cfg;
                c.hp.learning_rate = lr;
                c.hp.batch_size = b;
                c.hp.l2_lambda = l2;
                c.hp.seed = 1;
                const auto res = train(train_set, dev_set, cli::detail::build_ranker(c, train_set, splits, diag), c.hp);
                if (res.best_dev_map > best_dev) {
                    best_dev = res.best_dev_map;
                    best_hp = c.hp;
                }
            }

    std::string detail = std::string(cfg.model.log_domain ? "log" : "linear") + " patch=" +
                         std::to_string(cfg.model.patch_size) + " lr=" + fmt("%g", best_hp.learning_rate) + " batch=" + std::to_string(best_hp.batch_size) +
                         " l2=" + fmt("%g", best_hp.l2_lambda);
    int ok = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        auto c = cfg;
        c.hp = best_hp;
        c.hp.seed = seed;
        const auto untrained = cli::detail::build_ranker(c, train_set, splits, diag);
        const double untrained_map = evaluate(untrained, test_set).map;
        const auto res = train(train_set, dev_set, untrained, c.hp);
        const double trained_map = evaluate(res.best, test_set).map;
        const double random_map = random_baseline(test_set, seed, 50).map;
        if (trained_map - random_map >= 0.10 && trained_map - untrained_map >= 0.05) ++ok;
        detail += " seed" + std::to_string(seed) + ":test_map=" + fmt("%.4f", trained_map) +
                  ",random=" + fmt("%.4f", random_map) + ",untrained=" + fmt("%.4f", untrained_map);
    }
    return verdict(ok == 3, "seeds_ok=" + std::to_string(ok) + "/3 " + detail + " seconds=" + fmt("%.0f", clock.seconds()));
}

// 8. Two identical train invocations write byte-identical histories.
Outcome determinism() {
    const fs::path dir = fs::temp_directory_path() / ("qmwf_accept_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const auto p = testing::make_planted(8, {.questions = 60, .dev_questions = 30});
    testing::write_split(p.train, (dir / "train.tsv").string());
    testing::write_split(p.dev, (dir / "dev.tsv").string());
    testing::write_embeddings(p.table, (dir / "emb.txt").string());
    std::string histories[2];
    int codes[2];
    for (int k = 0; k < 2; ++k) {
        const std::string tag = std::to_string(k);
        std::ostringstream out, err;
        codes[k] = cli::run_cli({"train", "--train", (dir / "train.tsv").string(), "--dev", (dir / "dev.tsv").string(),
                                 "--embeddings", (dir / "emb.txt").string(), "--checkpoint",
                                 (dir / ("m" + tag + ".ckpt")).string(), "--history",
                                 (dir / ("h" + tag + ".jsonl")).string(), "--channels", "6", "--lr", "0.01",
                                 "--batch", "20", "--epochs", "5", "--seed", "42"},
                                out, err);
        std::ifstream in(dir / ("h" + tag + ".jsonl"), std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        histories[k] = ss.str();
    }
    fs::remove_all(dir);
    const bool same = codes[0] == 0 && codes[1] == 0 && !histories[0].empty() && histories[0] == histories[1];
    return verdict(same, "exit_codes=" + std::to_string(codes[0]) + "," + std::to_string(codes[1]) +
                             " history_bytes=" + std::to_string(histories[0].size()) +
                             (same ? " identical" : " differ"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only, exclude;
    app.add_option("--only", only, "Run just these criteria");
    app.add_option("--exclude", exclude, "Skip these criteria");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {1, "projection_cnn_identity", projection_identity},
        {2, "gradient_correctness", gradient_correctness},
        {3, "cp_als_round_trip", cp_round_trip},
        {4, "permutation_invariance", permutation_invariance},
        {5, "metric_oracles", metric_oracles},
        {6, "planted_learnability", planted_learnability},
        {7, "wikiqa_desk_scale", wikiqa},
        {8, "train_determinism", determinism},
    };
    int ran = 0, failed = 0;
    for (const auto& c : criteria) {
        const auto has = [&](const std::vector<int>& v) { return std::find(v.begin(), v.end(), c.id) != v.end(); };
        Outcome o;
        if ((!only.empty() && !has(only)) || has(exclude)) {
            o = {Status::kSkip, "not selected"};
        } else {
            try {
                o = c.run();
            } catch (const std::exception& e) {
                o = {Status::kFail, std::string("error: ") + e.what()};
            }
        }
        const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kFail ? "FAIL" : "SKIP";
        std::cout << tag << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
        if (o.status != Status::kSkip) ++ran;
        if (o.status == Status::kFail) ++failed;
    }
    if (failed > 0) return 1;
    return ran == 0 ? 77 : 0;
}
