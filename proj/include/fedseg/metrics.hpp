#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedseg/data.hpp"
#include "fedseg/model.hpp"

namespace fedseg {

enum class Method { FedAvg, FedProx, FedBn, FedAvgDp, Centralized, LocalOnly };

Method parse_method(const std::string& s);
std::string method_name(Method m);

struct RoundRecord {
    int round = 0;  // 1-based; centralized maps epoch/5 onto this axis
    double dice = 0.0;
    double ce = 0.0;
    std::optional<double> mia_auc;
    double wall_ms = 0.0;
};

struct ExperimentHistory {
    Method method = Method::FedAvg;
    std::uint64_t seed = 0;
    std::vector<RoundRecord> records;         // strictly increasing round indices
    std::optional<double> epsilon;            // DP accountant output
    std::vector<double> per_client_final_dice;  // local-only baseline

    double final_dice() const;
    double final_ce() const;
    std::optional<double> final_auc() const;
};

// A model under evaluation, reduced to its eval-mode forward map. This is the
// only view the metrics and attack code get (black-box contract), and it lets
// tests swap in oracle predictors.
using Predictor = std::function<Tensor(const Tensor& images)>;

Predictor make_predictor(const ModelConfig& cfg, ParamSet params);

struct EvalResult {
    double dice = 0.0;
    double ce = 0.0;
};

// Mean per-image Dice (threshold 0.5) and BCE over the test set (f64 means).
EvalResult evaluate(const Predictor& model, const std::vector<const SliceSample*>& test_set,
                    int batch_size = 16, int threads = 0);

struct MetricStat {
    double mean = 0.0;
    double std_dev = 0.0;  // sample std (n-1); 0 for a single seed
};

struct SeedAggregate {
    Method method = Method::FedAvg;
    int n_seeds = 0;
    MetricStat dice, ce;
    std::optional<MetricStat> auc;      // present when every history tracked it
    std::optional<MetricStat> epsilon;  // present when every history carried it
};

SeedAggregate aggregate_seeds(const std::vector<ExperimentHistory>& histories);

// CSV with the exact header `round,dice,ce_loss,mia_auc,wall_ms`, all floats
// %.6f, mia_auc left empty when untracked.
void write_history_csv(const ExperimentHistory& history, const std::string& path);
ExperimentHistory read_history_csv(const std::string& path);

// Structured key-value run report; `config_echo` must list every configuration
// field of the run. Wall-clock values are deliberately absent.
void write_summary(const ExperimentHistory& history,
                   const std::vector<std::pair<std::string, std::string>>& config_echo,
                   const std::string& path);

struct CurveSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;  // (round, value)
};

// Self-contained SVG line chart: one polyline per series, labeled axes.
void emit_curves_svg(const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<CurveSeries>& series,
                     double y_min, double y_max, const std::string& path);

}  // namespace fedseg
