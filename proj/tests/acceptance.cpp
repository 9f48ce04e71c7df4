// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "aircache/budget.hpp"
#include "aircache/harness.hpp"
#include "aircache/importance.hpp"
#include "aircache/kv_cache.hpp"
#include "aircache/toy_model.hpp"
#include "oracles.hpp"

using namespace aircache;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& measured) {
    std::printf("%s criterion %d: %s [%s]\n", ok ? "PASS" : "FAIL", id, what.c_str(), measured.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

void guarded(int id, const std::string& what, const std::function<std::pair<bool, std::string>()>& body) {
    try {
        const auto [ok, measured] = body();
        report(id, ok, what, measured);
    } catch (const std::exception& e) {
        report(id, false, what, std::string("exception: ") + e.what());
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c);
    return buf;
}

const char* yes(bool b) { return b ? "yes" : "no"; }

PolicySpec policy(std::string name, ScorerPolicy scorer, AllocationMode mode) {
    PolicySpec p;
    p.name = std::move(name);
    p.scorer = scorer;
    p.allocation = mode;
    return p;
}

const SummaryRow& row_of(const RunReport& r, const std::string& name, double ratio) {
    for (const SummaryRow& s : r.summary)
        if (s.policy == name && s.ratio == ratio) return s;
    throw std::runtime_error("no summary row for " + name);
}

// 1. r = 1 through score / allocate / compress leaves decoding bit-identical.
std::pair<bool, std::string> identity_compression() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t mismatches = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ToyModelConfig mc;
        mc.seed = seed;
        const ToyModel model = ToyModel::build(mc);
        const NeedlePrompt prompt = generate_needle_prompt(model, NeedleScenario{}, seed, 0);
        const PrefillResult pre = model.prefill(prompt.embeddings, prompt.layout);

        std::vector<LayerStats> stats;
        std::vector<std::vector<std::size_t>> rankings;
        for (std::size_t l = 0; l < pre.layers.size(); ++l) {
            const LayerAttentionInputs in{l, &pre.layers[l].q, &pre.layers[l].k, &pre.layers[l].attention};
            const ImportanceProfile p = score_layer(ScorerPolicy::elite(0.9), in, prompt.layout);
            stats.push_back({l, p.strength, p.skewness});
            rankings.push_back(rank_visual_tokens(p));
        }
        CompressionConfig cc;
        const LayerBudgetPlan plan = allocate(stats, 1.0, prompt.layout.n_visual, AllocationMode::AirCache);
        std::vector<LayerCache> compressed, plain = pre.caches;
        for (std::size_t l = 0; l < pre.caches.size(); ++l)
            compressed.push_back(compress(pre.caches[l], rankings[l], plan.per_layer_keep[l], cc));

        int ta = pre.first_token, tb = pre.first_token;
        for (int s = 0; s < 64; ++s) {
            const StepResult a = model.step(plain, ta);
            const StepResult b = model.step(compressed, tb);
            if (a.logits != b.logits) ++mismatches;
            ta = argmax(a.logits);
            tb = argmax(b.logits);
            if (ta != tb) ++mismatches;
        }
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 10.0, fmt("mismatched steps %.0f, %.2f s", double(mismatches), secs)};
}

// 2. Elite profile against a dense recomputation with its own key selection.
std::pair<bool, std::string> scoring_oracle() {
    Rng rng(2024);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t heads = 1 + rng.below(4);
        TokenLayout l{rng.below(4), 1 + rng.below(32), 1 + rng.below(8), 4 * heads, 1, heads};
        const Matrix q = oracle::random_matrix(rng, l.total(), l.hidden_dim, 1.5);
        const Matrix k = oracle::random_matrix(rng, l.total(), l.hidden_dim, 1.5);
        const double alpha = rng.uniform();
        const double scale = 1.0 / std::sqrt(static_cast<double>(l.hidden_dim));

        Matrix qt(0, l.hidden_dim), kt(0, l.hidden_dim);
        for (std::size_t i = l.text_begin(); i < l.total(); ++i) {
            qt.append_row(q.row(i));
            kt.append_row(k.row(i));
        }
        const Matrix att = oracle::dense_attention(qt, kt, heads, scale, [](std::size_t i, std::size_t j) { return j <= i; });
        double peak = 0.0;
        for (std::size_t j = 0; j < l.n_text; ++j) peak = std::max(peak, att(l.n_text - 1, j));
        std::vector<std::size_t> key;
        for (std::size_t j = 0; j < l.n_text; ++j)
            if (att(l.n_text - 1, j) >= alpha * peak) key.push_back(j);
        const auto want = oracle::elite_scores(q, k, l.n_system, l.n_visual, key, heads, scale);

        const Matrix map = causal_attention_map(q, k, l);
        const LayerAttentionInputs in{0, &q, &k, &map};
        const ImportanceProfile got = score_layer(ScorerPolicy::elite(alpha), in, l);
        for (std::size_t v = 0; v < l.n_visual; ++v) worst = std::max(worst, std::abs(got.scores[v] - want[v]));
    }
    return {worst <= 1e-9, fmt("max abs diff %.3g", worst)};
}

// 3. Skewness against population-moment G1.
std::pair<bool, std::string> skewness_oracle() {
    Rng rng(77);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> x(3 + rng.below(510));
        const int shape = t % 3;
        for (double& v : x) v = shape == 0 ? rng.uniform() : shape == 1 ? std::exp(rng.normal()) : rng.normal();
        const double want = oracle::fisher_pearson(x);
        const double got = skewness(x).value;
        const double rel = std::abs(got - want) / std::max(std::abs(want), 1e-300);
        worst = std::max(worst, want == 0.0 ? std::abs(got) : rel);
    }
    const std::vector<double> sym{1, 2, 3}, tail{0, 0, 1};
    const double e1 = std::abs(skewness(sym).value);
    const double e2 = std::abs(skewness(tail).value - std::sqrt(3.0));
    return {worst <= 1e-9 && e1 <= 1e-12 && e2 <= 1e-12,
            fmt("max rel err %.3g, |[1,2,3]| %.3g, |[0,0,1]-sqrt3| %.3g", worst, e1, e2)};
}

// 4. Threshold semantics of the key-text selection.
std::pair<bool, std::string> threshold_semantics() {
    Rng rng(4);
    bool ok = true;
    double worst = 0.0;
    for (int t = 0; t < 500; ++t) {
        std::vector<double> row(1 + rng.below(16));
        double z = 0.0;
        for (double& v : row) {
            v = rng.uniform() < 0.2 ? 1.0 : std::exp(2.0 * rng.normal());
            z += v;
        }
        for (double& v : row) v /= z;
        ok = ok && select_key_text_tokens(row, 0.0).size() == row.size();
        const double peak = *std::max_element(row.begin(), row.end());
        std::vector<std::size_t> argmax_set;
        for (std::size_t j = 0; j < row.size(); ++j)
            if (row[j] == peak) argmax_set.push_back(j);
        ok = ok && select_key_text_tokens(row, 1.0) == argmax_set;
        double a1 = rng.uniform(), a2 = rng.uniform();
        if (a1 > a2) std::swap(a1, a2);
        const auto k1 = select_key_text_tokens(row, a1), k2 = select_key_text_tokens(row, a2);
        ok = ok && std::includes(k1.begin(), k1.end(), k2.begin(), k2.end());
    }
    for (int t = 0; t < 50; ++t) {
        const std::size_t heads = 1 + rng.below(3);
        TokenLayout l{rng.below(3), 1 + rng.below(24), 1 + rng.below(8), 4 * heads, 1, heads};
        const Matrix q = oracle::random_matrix(rng, l.total(), l.hidden_dim);
        const Matrix k = oracle::random_matrix(rng, l.total(), l.hidden_dim);
        const Matrix map = causal_attention_map(q, k, l);
        const LayerAttentionInputs in{0, &q, &k, &map};
        const auto e = score_layer(ScorerPolicy::elite(0.0), in, l);
        const auto b = score_layer(ScorerPolicy::all_text_tokens(true), in, l);
        for (std::size_t v = 0; v < l.n_visual; ++v) worst = std::max(worst, std::abs(e.scores[v] - b.scores[v]));
    }
    return {ok && worst <= 1e-12, std::string("set checks ") + yes(ok) + fmt(", alpha=0 vs all-text max diff %.3g", worst)};
}

// 5. Budget conservation within L tokens and the uniform fixed point.
std::pair<bool, std::string> budget_conservation() {
    Rng rng(5);
    double worst_slack = 0.0;
    bool fixed_point = true;
    for (int t = 0; t < 200; ++t) {
        const std::size_t L = 2 + rng.below(31), nv = 16 + rng.below(497);
        std::vector<LayerStats> stats;
        for (std::size_t l = 0; l < L; ++l) stats.push_back({l, rng.uniform(0.01, 1.0), rng.uniform(-2.0, 10.0)});
        std::vector<LayerStats> flat(L, LayerStats{0, stats[0].strength, stats[0].skewness});
        for (double r : {0.5, 0.1, 0.05, 0.01}) {
            const LayerBudgetPlan plan = allocate(stats, r, nv, AllocationMode::AirCache);
            const double target = std::round(r * static_cast<double>(L * nv));
            worst_slack = std::max(worst_slack, std::abs(static_cast<double>(plan.total_keep()) - target) /
                                                    static_cast<double>(L));
            fixed_point = fixed_point && allocate(flat, r, nv, AllocationMode::AirCache).per_layer_keep ==
                                             allocate(flat, r, nv, AllocationMode::Uniform).per_layer_keep;
        }
    }
    return {worst_slack <= 1.0 && fixed_point,
            fmt("worst |sum - target| / L %.3f", worst_slack) + ", uniform fixed point " + yes(fixed_point)};
}

// 6. Integer memory identity and FLOPs decreasing in r.
std::pair<bool, std::string> memory_accounting() {
    RunConfig cfg;
    cfg.policies = {aircache_policy()};
    cfg.ratios = {1.0, 0.5, 0.1, 0.05, 0.01};
    cfg.repeats = 10;
    cfg.decode_steps = 1;
    const RunReport r = run(cfg);
    const std::uint64_t L = cfg.model.n_layers, D = cfg.model.hidden_dim;
    bool identity = true, decreasing = true;
    for (const RunRecord& rec : r.records) {
        std::uint64_t keep = 0;
        for (std::size_t k : rec.per_layer_keep) keep += k;
        identity = identity &&
                   rec.kv_scalars_kept == (keep + L * cfg.scenario.n_text + L * cfg.scenario.n_system) * 2 * D;
    }
    for (std::size_t s = 0; s < cfg.repeats; ++s)
        for (std::size_t i = 1; i < cfg.ratios.size(); ++i)
            decreasing = decreasing && r.records[i * cfg.repeats + s].flops_per_step_kept <
                                           r.records[(i - 1) * cfg.repeats + s].flops_per_step_kept;
    return {identity && decreasing, std::string("identity ") + yes(identity) + ", strictly decreasing " + yes(decreasing)};
}

RunConfig needle_config(std::vector<PolicySpec> policies, double ratio, int steps) {
    RunConfig cfg;
    cfg.policies = std::move(policies);
    cfg.ratios = {ratio};
    cfg.repeats = 50;
    cfg.decode_steps = steps;
    return cfg;
}

// 7. Needle recall at 10% retention.
std::pair<bool, std::string> needle_retention() {
    const auto t0 = std::chrono::steady_clock::now();
    const RunReport r = run(needle_config({aircache_policy(),
                                           policy("random", ScorerPolicy::random(0), AllocationMode::Uniform),
                                           policy("visual_window_32", ScorerPolicy::visual_window(32),
                                                  AllocationMode::AirCache)},
                                          0.1, 1));
    const double secs = seconds_since(t0);
    const double air = row_of(r, "aircache", 0.1).recall_mean;
    const double rnd = row_of(r, "random", 0.1).recall_mean;
    const double vw = row_of(r, "visual_window_32", 0.1).recall_mean;
    return {air >= 0.9 && air > rnd && air > vw && secs < 60.0,
            fmt("aircache %.3f, random %.3f, visual window %.3f", air, rnd, vw) + fmt(", %.2f s", secs)};
}

// 8. Agreement ordering of the window ablations at r = 0.05.
std::pair<bool, std::string> ablation_ordering() {
    const RunReport r = run(needle_config(
        {aircache_policy(), policy("all_text", ScorerPolicy::all_text_tokens(), AllocationMode::AirCache),
         policy("visual_window_32", ScorerPolicy::visual_window(32), AllocationMode::AirCache)},
        0.05, 16));
    const double air = row_of(r, "aircache", 0.05).agreement_mean;
    const double all = row_of(r, "all_text", 0.05).agreement_mean;
    const double vw = row_of(r, "visual_window_32", 0.05).agreement_mean;
    return {air >= all && all >= vw && air > vw, fmt("aircache %.3f, all text %.3f, visual window %.3f", air, all, vw)};
}

// 9. Drop against merge(1.0) at r = 0.1.
std::pair<bool, std::string> drop_vs_merge() {
    PolicySpec merge = aircache_policy();
    merge.name = "merge";
    merge.eviction = EvictionMode::Merge;
    merge.merge_fraction = 1.0;
    const RunReport r = run(needle_config({aircache_policy(), merge}, 0.1, 16));
    const double drop = row_of(r, "aircache", 0.1).agreement_mean;
    const double mrg = row_of(r, "merge", 0.1).agreement_mean;
    return {drop >= mrg, fmt("drop %.3f, merge %.3f", drop, mrg)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// 10. Two CLI invocations with one config give identical bytes.
std::pair<bool, std::string> reproducibility(const std::string& bench) {
    const fs::path dir = fs::temp_directory_path() / "aircache_acceptance";
    fs::create_directories(dir);
    const fs::path cfg = dir / "config.json";
    {
        std::ofstream out(cfg);
        out << R"({"policies": [{"name": "full", "scorer": "full"}, {"name": "aircache"},
                                {"name": "random", "scorer": "random", "allocation": "uniform"}],
                   "ratios": [0.5, 0.1, 0.05], "alphas": [0.9, 0.6], "repeats": 4, "decode_steps": 8, "seed": 3})";
    }
    bool same = true;
    std::size_t bytes = 0;
    for (const char* format : {"json", "csv"}) {
        std::string text[2];
        for (int i = 0; i < 2; ++i) {
            const fs::path out = dir / ("report" + std::to_string(i) + "." + format);
            const std::string threads = i == 0 ? "1" : "3";
            const std::string cmd = "AIRCACHE_THREADS=" + threads + " " + bench + " run --config " + cfg.string() +
                                    " --out " + out.string() + " --format " + format;
            const int status = std::system(cmd.c_str());
            if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, "bench exited with failure"};
            text[i] = slurp(out);
        }
        same = same && !text[0].empty() && text[0] == text[1];
        bytes += text[0].size();
    }
    return {same, std::string("identical ") + yes(same) + fmt(", %.0f bytes compared", double(bytes))};
}

}  // namespace

int main(int argc, char** argv) {
    const std::string bench = argc > 1 ? argv[1] : "aircache_bench";
    guarded(1, "identity compression at r = 1 over 20 seeds x 64 steps, exact, < 10 s", identity_compression);
    guarded(2, "elite scores vs dense oracle on 100 instances, <= 1e-9", scoring_oracle);
    guarded(3, "skewness vs Fisher-Pearson on 1000 vectors, rel <= 1e-9; hand cases <= 1e-12", skewness_oracle);
    guarded(4, "threshold semantics: alpha = 0 all, alpha = 1 argmax, nesting over 500 rows", threshold_semantics);
    guarded(5, "budget conservation within L on 200 stat sets; uniform fixed point", budget_conservation);
    guarded(6, "kv scalar identity exact in vision_only; FLOPs strictly decreasing in r", memory_accounting);
    guarded(7, "needle recall at r = 0.1 >= 0.9 and above random and visual window, < 60 s", needle_retention);
    guarded(8, "agreement aircache >= all_text >= visual_window at r = 0.05, strict vs visual window",
            ablation_ordering);
    guarded(9, "agreement drop >= merge(1.0) at r = 0.1 over 50 seeds", drop_vs_merge);
    guarded(10, "two run invocations give byte-identical reports", [&] { return reproducibility(bench); });
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
