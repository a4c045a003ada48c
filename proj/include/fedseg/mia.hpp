#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fedseg/data.hpp"
#include "fedseg/metrics.hpp"
#include "fedseg/model.hpp"

namespace fedseg {

// Black-box per-image attack features: everything is computed from the
// eval-mode probability map and the ground-truth mask only.
struct AttackFeatures {
    double loss = 0.0;        // mean pixel BCE vs ground truth
    double entropy = 0.0;     // mean -p ln p - (1-p) ln(1-p), in [0, ln 2]
    double confidence = 0.0;  // mean max(p, 1-p), in [0.5, 1]
    double dice = 0.0;        // vs ground truth at threshold 0.5

    std::array<double, 4> as_array() const { return {loss, entropy, confidence, dice}; }
};

AttackFeatures extract_features(const Tensor& prob_map, const SliceSample& sample);
AttackFeatures extract_features(const ModelConfig& cfg, const ParamSet& params,
                                const SliceSample& sample);
std::vector<AttackFeatures> extract_features_batch(const Predictor& model,
                                                   const std::vector<const SliceSample*>& samples,
                                                   int batch_size = 16, int threads = 0);

// Logistic regression over standardized features (member = 1). Features with
// zero variance on the shadow data are frozen out (weight 0).
struct AttackModel {
    std::array<double, 4> feat_mean{};
    std::array<double, 4> feat_std{};  // 0 marks a frozen feature
    std::array<double, 4> weights{};
    double bias = 0.0;
    std::uint64_t shadow_seed = 0;
    int iterations = 0;

    double score(const AttackFeatures& f) const;  // in (0, 1)
};

// Full-batch gradient descent (lr 0.1, 500 iterations by default) on the
// shadow member/nonmember features.
AttackModel train_attack(const std::vector<AttackFeatures>& shadow_members,
                         const std::vector<AttackFeatures>& shadow_nonmembers,
                         int iterations = 500, double lr = 0.1);

// Mann-Whitney AUC with ties counted 1/2.
double attack_auc(const std::vector<double>& member_scores,
                  const std::vector<double>& nonmember_scores);

// Scores both sets under `target` and returns the AUC.
double attack_auc(const AttackModel& attack, const Predictor& target,
                  const std::vector<const SliceSample*>& members,
                  const std::vector<const SliceSample*>& nonmembers, int batch_size = 16,
                  int threads = 0);

}  // namespace fedseg
