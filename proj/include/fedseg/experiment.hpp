#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedseg/data.hpp"
#include "fedseg/dp.hpp"
#include "fedseg/fl.hpp"
#include "fedseg/metrics.hpp"
#include "fedseg/mia.hpp"
#include "fedseg/model.hpp"

namespace fedseg {

// One declarative description of a benchmark: which dataset, which methods,
// which seeds, and every hyperparameter. Negative sentinels resolve to
// scale-dependent presets in resolve_config.
struct ExperimentConfig {
    Scale scale = Scale::Desk;
    std::uint64_t data_seed = 7;
    std::string data_path;  // manifest path or dataset dir; empty -> in-memory build

    int base_channels = -1;  // -1 -> 8 desk / 52 paper
    TrainConfig train;       // rounds/lr_decay_at_round < 0 -> scale preset
    DpConfig dp;

    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<Method> methods = {Method::FedAvg};
    std::string out_dir = "runs";

    bool track_mia = true;
    int mia_cadence = 1;
    int mia_members = -1;     // -1 -> 100 desk / 500 paper
    int mia_nonmembers = -1;  // -1 -> 100 desk / 500 paper
    int eval_batch = 16;
    int threads = 0;  // 0 -> FEDSEG_THREADS or hardware
};

// Scale presets.
int scaled_base_channels(Scale scale);  // 8 / 52
int scaled_rounds(Scale scale);         // 25 / 100
int scaled_decay_round(Scale scale);    // 18 / 70
int scaled_mia_count(Scale scale);      // 100 / 500

// Replaces negative sentinels with the scale presets and validates the rest
// (distinct non-empty seeds, non-empty methods, positive counts).
ExperimentConfig resolve_config(ExperimentConfig cfg);

// The per-job training config: `method` is stamped in and prox_mu applies
// only to FedProx jobs (other methods run with mu = 0).
TrainConfig train_for(const ExperimentConfig& cfg, Method method);

// Per-seed attack kit: one shadow model's attack classifier plus the fixed
// member/nonmember evaluation sets (pointers into the FederationData).
struct SeedAttack {
    AttackModel attack;
    std::vector<const SliceSample*> members, nonmembers;
};

// Deterministic derivation shared by the experiment runner and the standalone
// attack command: shadow training, attack fitting, and member/nonmember
// sampling all come from substreams of `seed`.
SeedAttack derive_seed_attack(const FederationData& data, const ModelConfig& mc,
                              const TrainConfig& shadow_cfg, std::uint64_t seed, int n_members,
                              int n_nonmembers, int eval_batch, int threads);

struct RunArtifacts {
    Method method = Method::FedAvg;
    std::uint64_t seed = 0;
    std::string csv_path, summary_path, checkpoint_path;
    ExperimentHistory history;
};

struct ExperimentOutput {
    std::vector<RunArtifacts> runs;  // method-major, config order
    std::string index_path;          // runs_index.txt
};

// Runs every (method, seed) job: per-seed shadow/attack models are trained
// once and shared across methods; each job writes `<method>_seed<k>.csv`,
// `<method>_seed<k>_summary.txt`, and `<method>_seed<k>.fobp` under out_dir,
// plus a runs_index.txt manifest of all jobs.
ExperimentOutput run_experiments(const ExperimentConfig& cfg);

struct ReportPaths {
    std::string table;     // table.txt: per-method mean +- std over seeds
    std::string dice_svg;  // dice_curves.svg: seed-mean Dice per round
    std::string auc_svg;   // auc_curves.svg: seed-mean attack AUC per round
};

// Aggregates a runs directory (via its runs_index.txt) into a summary table
// and the two curve charts.
ReportPaths write_report(const std::string& runs_dir, const std::string& out_dir);

}  // namespace fedseg
