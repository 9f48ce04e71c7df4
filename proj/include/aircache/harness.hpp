#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "aircache/budget.hpp"
#include "aircache/importance.hpp"
#include "aircache/kv_cache.hpp"
#include "aircache/toy_model.hpp"

namespace aircache {

// One row of a comparison: how to score, allocate and evict.
struct PolicySpec {
    std::string name;
    bool full_cache = false;  // reference pipeline, never compressed
    ScorerPolicy scorer = ScorerPolicy::elite(0.9);
    AllocationMode allocation = AllocationMode::AirCache;
    EvictionMode eviction = EvictionMode::Drop;
    double merge_fraction = 1.0;
    Audience audience = Audience::VisionOnly;
};

PolicySpec full_cache_policy();
PolicySpec aircache_policy();
// Full cache, AirCache and the window/allocation ablations and comparators.
std::vector<PolicySpec> ablation_policies();

enum class ReportFormat { Json, Csv };

ReportFormat parse_report_format(std::string_view name);

struct RunConfig {
    ToyModelConfig model;
    NeedleScenario scenario;
    std::vector<PolicySpec> policies;
    std::vector<double> ratios{1.0};
    std::vector<double> alphas{0.9};
    int decode_steps = 16;
    std::size_t repeats = 1;
    std::uint64_t seed = 0;
    std::string out_path;
    ReportFormat format = ReportFormat::Json;

    void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
// Throws ErrorKind::Io when unreadable, ErrorKind::Config when malformed.
RunConfig load_run_config(const std::string& path);

struct RunRecord {
    std::string policy;
    double ratio = 1.0;
    double alpha = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> per_layer_keep;
    double output_agreement = 0.0;
    double needle_recall = 0.0;
    std::uint64_t kv_scalars_full = 0;
    std::uint64_t kv_scalars_kept = 0;
    std::uint64_t flops_per_step_full = 0;
    std::uint64_t flops_per_step_kept = 0;

    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

struct SummaryRow {
    std::string policy;
    double ratio = 1.0;
    double alpha = 0.0;
    std::size_t repeats = 0;
    double agreement_mean = 0.0;
    double agreement_std = 0.0;
    double recall_mean = 0.0;
    double recall_std = 0.0;
    double kv_fraction_mean = 0.0;

    friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

struct RunReport {
    std::vector<RunRecord> records;
    std::vector<SummaryRow> summary;
    std::vector<std::string> warnings;

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

// Every (policy, ratio, alpha, repeat) on seed = config.seed + repeat.
// Records are ordered by policy, ratio and alpha as listed, then seed.
RunReport run(const RunConfig& config);

// AirCache only, over alphas x ratios. Duplicate alphas are dropped with a warning.
RunReport sweep_alpha(const RunConfig& config);

// Replaces the configured policies with ablation_policies().
RunReport compare_policies(const RunConfig& config);

// Worker count from AIRCACHE_THREADS, else hardware concurrency.
std::size_t worker_threads();

nlohmann::json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& doc);
std::string render_report(const RunReport& report, ReportFormat format);

// Writes through a temporary file and rename. Throws ErrorKind::Io.
void emit_report(const RunReport& report, ReportFormat format, const std::string& path);

// Throws ErrorKind::Io when `path` cannot be created.
void check_writable(const std::string& path);

inline constexpr int kReportSchemaVersion = 1;

}  // namespace aircache
