#include "aircache/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "aircache/error.hpp"
#include "aircache/rng.hpp"

namespace aircache {

using nlohmann::json;

PolicySpec full_cache_policy() {
    PolicySpec p;
    p.name = "full_cache";
    p.full_cache = true;
    return p;
}

PolicySpec aircache_policy() {
    PolicySpec p;
    p.name = "aircache";
    return p;
}

std::vector<PolicySpec> ablation_policies() {
    std::vector<PolicySpec> out{full_cache_policy(), aircache_policy()};
    auto with_scorer = [](std::string name, ScorerPolicy scorer, AllocationMode mode) {
        PolicySpec p;
        p.name = std::move(name);
        p.scorer = scorer;
        p.allocation = mode;
        return p;
    };
    out.push_back(with_scorer("continuous_window_16", ScorerPolicy::continuous_text_window(16), AllocationMode::AirCache));
    out.push_back(with_scorer("all_text", ScorerPolicy::all_text_tokens(), AllocationMode::AirCache));
    out.push_back(with_scorer("visual_window_32", ScorerPolicy::visual_window(32), AllocationMode::AirCache));
    out.push_back(with_scorer("h2o", ScorerPolicy::h2o_cumulative(), AllocationMode::Uniform));
    out.push_back(with_scorer("random", ScorerPolicy::random(0), AllocationMode::Uniform));
    out.push_back(with_scorer("average_allocation", ScorerPolicy::elite(0.9), AllocationMode::Uniform));
    out.push_back(with_scorer("pyramid_allocation", ScorerPolicy::elite(0.9), AllocationMode::Pyramid));
    out.push_back(with_scorer("strength_only", ScorerPolicy::elite(0.9), AllocationMode::StrengthOnly));
    out.push_back(with_scorer("skewness_only", ScorerPolicy::elite(0.9), AllocationMode::SkewnessOnly));
    PolicySpec merge = aircache_policy();
    merge.name = "aircache_merge";
    merge.eviction = EvictionMode::Merge;
    merge.merge_fraction = 1.0;
    out.push_back(merge);
    PolicySpec unified = aircache_policy();
    unified.name = "aircache_unified";
    unified.audience = Audience::Unified;
    out.push_back(unified);
    return out;
}

ReportFormat parse_report_format(std::string_view name) {
    if (name == "json") return ReportFormat::Json;
    if (name == "csv") return ReportFormat::Csv;
    throw Error(ErrorKind::Config, "unknown report format '" + std::string(name) + "'");
}

void RunConfig::validate() const {
    model.validate();
    scenario.validate();
    if (repeats < 1) throw Error(ErrorKind::Config, "repeats must be >= 1");
    if (decode_steps < 1) throw Error(ErrorKind::Config, "decode_steps must be >= 1");
    if (ratios.empty()) throw Error(ErrorKind::Config, "ratios must not be empty");
    if (alphas.empty()) throw Error(ErrorKind::Config, "alphas must not be empty");
    for (double r : ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw Error(ErrorKind::Config, "ratios must lie in (0, 1]");
    }
    for (double a : alphas) {
        if (!(a >= 0.0 && a <= 1.0)) throw Error(ErrorKind::Config, "alphas must lie in [0, 1]");
    }
    std::set<std::string> names;
    for (const PolicySpec& p : policies) {
        if (p.name.empty()) throw Error(ErrorKind::Config, "policy name must not be empty");
        if (!names.insert(p.name).second) throw Error(ErrorKind::Config, "duplicate policy name '" + p.name + "'");
        p.scorer.validate();
        if (!(p.merge_fraction >= 0.0 && p.merge_fraction <= 1.0)) {
            throw Error(ErrorKind::Config, "merge_fraction must lie in [0, 1]");
        }
    }
}

namespace {

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
    auto it = obj.find(key);
    if (it == obj.end()) return fallback;
    return it->get<T>();
}

void reject_unknown_keys(const json& obj, std::initializer_list<std::string_view> known, std::string_view where) {
    if (!obj.is_object()) throw Error(ErrorKind::Config, std::string(where) + " must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw Error(ErrorKind::Config, "unknown key '" + it.key() + "' in " + std::string(where));
        }
    }
}

PolicySpec parse_policy(const json& obj) {
    reject_unknown_keys(obj,
                        {"name", "scorer", "alpha", "window", "renormalized", "seed", "allocation", "eviction",
                         "merge_fraction", "audience"},
                        "policy");
    PolicySpec p;
    const std::string scorer = get_or<std::string>(obj, "scorer", "elite_window");
    p.name = get_or<std::string>(obj, "name", scorer);
    if (scorer == "full") {
        p.full_cache = true;
    } else {
        p.scorer.kind = parse_scorer_kind(scorer);
    }
    p.scorer.alpha = get_or<double>(obj, "alpha", p.scorer.alpha);
    p.scorer.window = get_or<std::size_t>(obj, "window", p.scorer.window);
    p.scorer.renormalized = get_or<bool>(obj, "renormalized", false);
    p.scorer.seed = get_or<std::uint64_t>(obj, "seed", 0);
    p.allocation = parse_allocation_mode(get_or<std::string>(obj, "allocation", "aircache"));
    p.eviction = parse_eviction_mode(get_or<std::string>(obj, "eviction", "drop"));
    p.merge_fraction = get_or<double>(obj, "merge_fraction", 1.0);
    p.audience = parse_audience(get_or<std::string>(obj, "audience", "vision_only"));
    return p;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
    try {
        reject_unknown_keys(doc,
                            {"model", "scenario", "policies", "ratios", "alphas", "decode_steps", "repeats", "seed",
                             "out_path", "format"},
                            "config");
        RunConfig cfg;
        if (auto it = doc.find("model"); it != doc.end()) {
            reject_unknown_keys(*it, {"n_layers", "n_heads", "hidden_dim", "vocab", "seed", "per_head_scale"}, "model");
            cfg.model.n_layers = get_or<std::size_t>(*it, "n_layers", cfg.model.n_layers);
            cfg.model.n_heads = get_or<std::size_t>(*it, "n_heads", cfg.model.n_heads);
            cfg.model.hidden_dim = get_or<std::size_t>(*it, "hidden_dim", cfg.model.hidden_dim);
            cfg.model.vocab = get_or<std::size_t>(*it, "vocab", cfg.model.vocab);
            cfg.model.seed = get_or<std::uint64_t>(*it, "seed", cfg.model.seed);
            cfg.model.attention.per_head_scale = get_or<bool>(*it, "per_head_scale", false);
        }
        if (auto it = doc.find("scenario"); it != doc.end()) {
            reject_unknown_keys(*it,
                                {"n_system", "n_visual", "n_text", "n_needles", "n_key_text", "n_distractors",
                                 "needle_indices", "needle_payload"},
                                "scenario");
            NeedleScenario& s = cfg.scenario;
            s.n_system = get_or<std::size_t>(*it, "n_system", s.n_system);
            s.n_visual = get_or<std::size_t>(*it, "n_visual", s.n_visual);
            s.n_text = get_or<std::size_t>(*it, "n_text", s.n_text);
            s.n_needles = get_or<std::size_t>(*it, "n_needles", s.n_needles);
            s.n_key_text = get_or<std::size_t>(*it, "n_key_text", s.n_key_text);
            s.n_distractors = get_or<std::size_t>(*it, "n_distractors", s.n_distractors);
            s.needle_indices = get_or<std::vector<std::size_t>>(*it, "needle_indices", {});
            s.needle_payload = get_or<std::vector<int>>(*it, "needle_payload", {});
        }
        if (auto it = doc.find("policies"); it != doc.end()) {
            for (const json& p : *it) cfg.policies.push_back(parse_policy(p));
        } else {
            cfg.policies = {full_cache_policy(), aircache_policy()};
        }
        cfg.ratios = get_or<std::vector<double>>(doc, "ratios", cfg.ratios);
        cfg.alphas = get_or<std::vector<double>>(doc, "alphas", cfg.alphas);
        cfg.decode_steps = get_or<int>(doc, "decode_steps", cfg.decode_steps);
        cfg.repeats = get_or<std::size_t>(doc, "repeats", cfg.repeats);
        cfg.seed = get_or<std::uint64_t>(doc, "seed", cfg.seed);
        cfg.out_path = get_or<std::string>(doc, "out_path", "");
        cfg.format = parse_report_format(get_or<std::string>(doc, "format", "json"));
        cfg.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Config, e.what());
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot read config '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Config, "config '" + path + "': " + e.what());
    }
    return parse_run_config(doc);
}

std::size_t worker_threads() {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("AIRCACHE_THREADS")) {
        std::size_t cap = 0;
        const std::string_view sv(env);
        auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), cap);
        if (ec == std::errc{} && ptr == sv.data() + sv.size() && cap >= 1) n = cap;
    }
    return n;
}

namespace {

struct SeedContext {
    std::uint64_t seed = 0;
    ToyModel model;
    NeedlePrompt prompt;
    PrefillResult prefill;
    std::vector<int> reference;  // full-cache decode
};

SeedContext prepare_seed(const RunConfig& cfg, std::uint64_t seed) {
    ToyModelConfig mc = cfg.model;
    mc.seed = mix_seed(cfg.model.seed, seed);
    SeedContext ctx{seed, ToyModel::build(mc), {}, {}, {}};
    ctx.prompt = generate_needle_prompt(ctx.model, cfg.scenario, seed, 0);
    ctx.prefill = ctx.model.prefill(ctx.prompt.embeddings, ctx.prompt.layout);
    std::vector<LayerCache> caches = ctx.prefill.caches;
    ctx.reference = decode(ctx.model, caches, ctx.prefill.first_token, cfg.decode_steps);
    return ctx;
}

double needle_recall(const std::vector<LayerCache>& caches, const NeedlePrompt& prompt) {
    if (prompt.needle_indices.empty()) return 1.0;
    double total = 0.0;
    for (const LayerCache& cache : caches) {
        std::size_t hits = 0;
        for (std::size_t idx : prompt.needle_indices) {
            const std::size_t id = prompt.layout.visual_begin() + idx;
            if (std::binary_search(cache.token_ids().begin(), cache.token_ids().end(), id)) ++hits;
        }
        total += static_cast<double>(hits) / static_cast<double>(prompt.needle_indices.size());
    }
    return total / static_cast<double>(caches.size());
}

RunRecord run_record(const RunConfig& cfg, const SeedContext& ctx, const PolicySpec& policy, double ratio,
                     double alpha) {
    const TokenLayout& layout = ctx.prompt.layout;
    RunRecord rec;
    rec.policy = policy.name;
    rec.ratio = ratio;
    rec.alpha = alpha;
    rec.seed = ctx.seed;

    std::vector<LayerCache> caches;
    if (policy.full_cache) {
        caches = ctx.prefill.caches;
        rec.per_layer_keep.assign(layout.n_layers, compressible_rows(layout, policy.audience));
    } else {
        CompressionConfig cc;
        cc.ratio = ratio;
        cc.alpha = alpha;
        cc.eviction = policy.eviction;
        cc.merge_fraction = policy.merge_fraction;
        cc.audience = policy.audience;
        cc.allocation = policy.allocation;
        cc.scorer = policy.scorer;
        if (cc.scorer.kind == ScorerKind::EliteWindow) cc.scorer.alpha = alpha;
        if (cc.scorer.kind == ScorerKind::Random) cc.scorer.seed = mix_seed(ctx.seed, 7 + policy.scorer.seed);
        cc.validate();

        std::vector<std::vector<double>> scores(layout.n_layers);
        std::vector<LayerStats> stats(layout.n_layers);
        for (std::size_t l = 0; l < layout.n_layers; ++l) {
            const LayerPrefill& lp = ctx.prefill.layers[l];
            const LayerAttentionInputs inputs{l, &lp.q, &lp.k, &lp.attention};
            if (cc.audience == Audience::VisionOnly) {
                ImportanceProfile prof = score_layer(cc.scorer, inputs, layout, cfg.model.attention);
                stats[l] = {l, prof.strength, prof.skewness};
                scores[l] = std::move(prof.scores);
            } else {
                scores[l] = score_unified(cc.scorer, inputs, layout, cfg.model.attention);
                stats[l] = {l, strength(scores[l]), skewness(scores[l]).value};
            }
        }
        const LayerBudgetPlan plan = allocate(stats, ratio, compressible_rows(layout, cc.audience), cc.allocation);
        rec.per_layer_keep = plan.per_layer_keep;
        for (std::size_t l = 0; l < layout.n_layers; ++l) {
            const std::vector<std::size_t> ranking = rank_scores(scores[l]);
            caches.push_back(compress(ctx.prefill.caches[l], ranking, plan.per_layer_keep[l], cc));
        }
    }

    const MemoryReport mem = accounting(caches, layout);
    rec.kv_scalars_full = mem.kv_scalars_full;
    rec.kv_scalars_kept = mem.kv_scalars_kept;
    rec.flops_per_step_full = mem.flops_per_step_full;
    rec.flops_per_step_kept = mem.flops_per_step_kept;
    rec.needle_recall = needle_recall(caches, ctx.prompt);

    const std::vector<int> tokens = decode(ctx.model, caches, ctx.prefill.first_token, cfg.decode_steps);
    std::size_t same = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) same += tokens[i] == ctx.reference[i] ? 1 : 0;
    rec.output_agreement = static_cast<double>(same) / static_cast<double>(tokens.size());
    return rec;
}

double sample_std(const std::vector<double>& v, double m) {
    if (v.size() < 2) return 0.0;
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records, std::size_t repeats) {
    std::vector<SummaryRow> rows;
    for (std::size_t begin = 0; begin < records.size(); begin += repeats) {
        const RunRecord& first = records[begin];
        SummaryRow row{first.policy, first.ratio, first.alpha, repeats, 0, 0, 0, 0, 0};
        std::vector<double> agree, recall;
        double kv = 0.0;
        for (std::size_t i = begin; i < begin + repeats; ++i) {
            agree.push_back(records[i].output_agreement);
            recall.push_back(records[i].needle_recall);
            kv += static_cast<double>(records[i].kv_scalars_kept) / static_cast<double>(records[i].kv_scalars_full);
        }
        row.agreement_mean = mean(agree);
        row.agreement_std = sample_std(agree, row.agreement_mean);
        row.recall_mean = mean(recall);
        row.recall_std = sample_std(recall, row.recall_mean);
        row.kv_fraction_mean = kv / static_cast<double>(repeats);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

RunReport run(const RunConfig& config) {
    config.validate();
    if (!config.out_path.empty()) check_writable(config.out_path);
    const std::size_t n_grid = config.policies.size() * config.ratios.size() * config.alphas.size();
    const std::size_t repeats = config.repeats;
    // Slot (grid, repeat) is filled by whichever worker handles that repeat.
    std::vector<RunRecord> records(n_grid * repeats);

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&]() {
        for (std::size_t r = next++; r < repeats; r = next++) {
            try {
                const SeedContext ctx = prepare_seed(config, config.seed + r);
                std::size_t g = 0;
                for (const PolicySpec& policy : config.policies) {
                    for (double ratio : config.ratios) {
                        for (double alpha : config.alphas) {
                            records[g * repeats + r] = run_record(config, ctx, policy, ratio, alpha);
                            ++g;
                        }
                    }
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::min(worker_threads(), repeats);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);

    RunReport report;
    report.records = std::move(records);
    report.summary = summarize(report.records, repeats);
    return report;
}

RunReport sweep_alpha(const RunConfig& config) {
    RunConfig cfg = config;
    std::vector<std::string> warnings;
    std::vector<double> unique;
    for (double a : config.alphas) {
        if (std::find(unique.begin(), unique.end(), a) != unique.end()) {
            std::ostringstream w;
            w << "duplicate alpha " << a << " ignored";
            warnings.push_back(w.str());
        } else {
            unique.push_back(a);
        }
    }
    cfg.alphas = unique;
    cfg.policies = {aircache_policy()};
    RunReport report = run(cfg);
    report.warnings = std::move(warnings);
    return report;
}

RunReport compare_policies(const RunConfig& config) {
    RunConfig cfg = config;
    cfg.policies = ablation_policies();
    return run(cfg);
}

json report_to_json(const RunReport& report) {
    json records = json::array();
    for (const RunRecord& r : report.records) {
        records.push_back({{"policy", r.policy},
                           {"ratio", r.ratio},
                           {"alpha", r.alpha},
                           {"seed", r.seed},
                           {"per_layer_keep", r.per_layer_keep},
                           {"output_agreement", r.output_agreement},
                           {"needle_recall", r.needle_recall},
                           {"kv_scalars_full", r.kv_scalars_full},
                           {"kv_scalars_kept", r.kv_scalars_kept},
                           {"flops_per_step_full", r.flops_per_step_full},
                           {"flops_per_step_kept", r.flops_per_step_kept}});
    }
    json summary = json::array();
    for (const SummaryRow& s : report.summary) {
        summary.push_back({{"policy", s.policy},
                           {"ratio", s.ratio},
                           {"alpha", s.alpha},
                           {"repeats", s.repeats},
                           {"agreement_mean", s.agreement_mean},
                           {"agreement_std", s.agreement_std},
                           {"recall_mean", s.recall_mean},
                           {"recall_std", s.recall_std},
                           {"kv_fraction_mean", s.kv_fraction_mean}});
    }
    return {{"schema_version", kReportSchemaVersion},
            {"records", records},
            {"summary", summary},
            {"warnings", report.warnings}};
}

RunReport report_from_json(const json& doc) {
    try {
        if (doc.at("schema_version").get<int>() != kReportSchemaVersion) {
            throw Error(ErrorKind::Config, "unsupported report schema version");
        }
        RunReport report;
        for (const json& r : doc.at("records")) {
            RunRecord rec;
            rec.policy = r.at("policy").get<std::string>();
            rec.ratio = r.at("ratio").get<double>();
            rec.alpha = r.at("alpha").get<double>();
            rec.seed = r.at("seed").get<std::uint64_t>();
            rec.per_layer_keep = r.at("per_layer_keep").get<std::vector<std::size_t>>();
            rec.output_agreement = r.at("output_agreement").get<double>();
            rec.needle_recall = r.at("needle_recall").get<double>();
            rec.kv_scalars_full = r.at("kv_scalars_full").get<std::uint64_t>();
            rec.kv_scalars_kept = r.at("kv_scalars_kept").get<std::uint64_t>();
            rec.flops_per_step_full = r.at("flops_per_step_full").get<std::uint64_t>();
            rec.flops_per_step_kept = r.at("flops_per_step_kept").get<std::uint64_t>();
            report.records.push_back(std::move(rec));
        }
        for (const json& s : doc.at("summary")) {
            SummaryRow row;
            row.policy = s.at("policy").get<std::string>();
            row.ratio = s.at("ratio").get<double>();
            row.alpha = s.at("alpha").get<double>();
            row.repeats = s.at("repeats").get<std::size_t>();
            row.agreement_mean = s.at("agreement_mean").get<double>();
            row.agreement_std = s.at("agreement_std").get<double>();
            row.recall_mean = s.at("recall_mean").get<double>();
            row.recall_std = s.at("recall_std").get<double>();
            row.kv_fraction_mean = s.at("kv_fraction_mean").get<double>();
            report.summary.push_back(std::move(row));
        }
        report.warnings = doc.at("warnings").get<std::vector<std::string>>();
        return report;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Config, std::string("malformed report: ") + e.what());
    }
}

namespace {

// Shortest decimal that round-trips.
std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

std::string render_report(const RunReport& report, ReportFormat format) {
    if (format == ReportFormat::Json) return report_to_json(report).dump(2) + "\n";
    std::ostringstream out;
    out << "policy,ratio,alpha,seed,per_layer_keep,output_agreement,needle_recall,kv_scalars_full,kv_scalars_kept,"
           "flops_per_step_full,flops_per_step_kept\n";
    for (const RunRecord& r : report.records) {
        std::string keep;
        for (std::size_t i = 0; i < r.per_layer_keep.size(); ++i) {
            if (i > 0) keep += ';';
            keep += std::to_string(r.per_layer_keep[i]);
        }
        out << csv_field(r.policy) << ',' << format_double(r.ratio) << ',' << format_double(r.alpha) << ','
            << r.seed << ',' << keep << ',' << format_double(r.output_agreement) << ','
            << format_double(r.needle_recall) << ',' << r.kv_scalars_full << ',' << r.kv_scalars_kept << ','
            << r.flops_per_step_full << ',' << r.flops_per_step_kept << '\n';
    }
    return out.str();
}

void check_writable(const std::string& path) {
    if (path.empty()) throw Error(ErrorKind::Io, "no output path given");
    const std::string probe = path + ".tmp";
    {
        std::ofstream out(probe, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::Io, "cannot write '" + path + "'");
    }
    std::error_code ec;
    std::filesystem::remove(probe, ec);
}

void emit_report(const RunReport& report, ReportFormat format, const std::string& path) {
    const std::string body = render_report(report, format);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::Io, "cannot write '" + tmp + "'");
        out << body;
        out.flush();
        if (!out) throw Error(ErrorKind::Io, "short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error(ErrorKind::Io, "cannot move report into '" + path + "'");
    }
}

}  // namespace aircache
