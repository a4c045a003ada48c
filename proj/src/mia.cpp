#include "fedseg/mia.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fedseg/common.hpp"
#include "fedseg/parallel.hpp"

namespace fedseg {

namespace {

constexpr double kProbClamp = 1e-7;

double clamp_prob(double p) {
    return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

}  // namespace

AttackFeatures extract_features(const Tensor& prob_map, const SliceSample& sample) {
    const std::size_t n = prob_map.shape.numel();
    if (n != sample.image.size() || n != sample.mask.size())
        throw UsageError("probability map does not match the sample resolution");
    const float* p = prob_map.data();

    double loss = 0.0, entropy = 0.0, confidence = 0.0;
    std::uint64_t inter = 0, pred_sum = 0, mask_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pi = clamp_prob(static_cast<double>(p[i]));
        const double yi = sample.mask[i] ? 1.0 : 0.0;
        loss += -(yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
        entropy += -(pi * std::log(pi) + (1.0 - pi) * std::log(1.0 - pi));
        confidence += std::max(pi, 1.0 - pi);
        const bool pred = p[i] >= 0.5f;
        pred_sum += pred ? 1u : 0u;
        mask_sum += sample.mask[i] ? 1u : 0u;
        inter += (pred && sample.mask[i]) ? 1u : 0u;
    }

    AttackFeatures f;
    const double inv = 1.0 / static_cast<double>(n);
    f.loss = loss * inv;
    f.entropy = entropy * inv;
    f.confidence = confidence * inv;
    const std::uint64_t denom = pred_sum + mask_sum;
    f.dice = denom == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(denom);
    return f;
}

AttackFeatures extract_features(const ModelConfig& cfg, const ParamSet& params,
                                const SliceSample& sample) {
    SegBatch batch = make_batch({&sample});
    Tensor prob = model_predict(cfg, params, batch.images);
    return extract_features(prob, sample);
}

std::vector<AttackFeatures> extract_features_batch(const Predictor& model,
                                                   const std::vector<const SliceSample*>& samples,
                                                   int batch_size, int threads) {
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    const std::size_t n = samples.size();
    std::vector<AttackFeatures> out(n);
    if (n == 0) return out;
    const std::size_t n_batches = (n + batch_size - 1) / batch_size;
    parallel_for(n_batches, threads, [&](std::size_t b) {
        const std::size_t lo = b * static_cast<std::size_t>(batch_size);
        const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(batch_size));
        std::vector<const SliceSample*> chunk(samples.begin() + lo, samples.begin() + hi);
        SegBatch batch = make_batch(chunk);
        Tensor prob = model(batch.images);
        if (!(prob.shape == batch.images.shape))
            throw UsageError("predictor output shape does not match its input");
        const std::size_t plane =
            static_cast<std::size_t>(prob.shape.h) * static_cast<std::size_t>(prob.shape.w);
        for (std::size_t i = lo; i < hi; ++i) {
            const float* base = prob.data() + (i - lo) * plane;
            Tensor one = Tensor::from_data({1, 1, prob.shape.h, prob.shape.w},
                                           std::vector<float>(base, base + plane));
            out[i] = extract_features(one, *samples[i]);
        }
    });
    return out;
}

double AttackModel::score(const AttackFeatures& f) const {
    const std::array<double, 4> x = f.as_array();
    double z = bias;
    for (int j = 0; j < 4; ++j) {
        if (feat_std[j] <= 0.0) continue;
        z += weights[j] * ((x[j] - feat_mean[j]) / feat_std[j]);
    }
    return 1.0 / (1.0 + std::exp(-z));
}

AttackModel train_attack(const std::vector<AttackFeatures>& shadow_members,
                         const std::vector<AttackFeatures>& shadow_nonmembers,
                         int iterations, double lr) {
    if (shadow_members.empty() || shadow_nonmembers.empty())
        throw UsageError("attack training needs both member and nonmember examples");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");

    const std::size_t n = shadow_members.size() + shadow_nonmembers.size();
    std::vector<std::array<double, 4>> feats;
    std::vector<double> labels;
    feats.reserve(n);
    labels.reserve(n);
    for (const AttackFeatures& f : shadow_members) {
        feats.push_back(f.as_array());
        labels.push_back(1.0);
    }
    for (const AttackFeatures& f : shadow_nonmembers) {
        feats.push_back(f.as_array());
        labels.push_back(0.0);
    }

    AttackModel m;
    m.iterations = iterations;
    // Pooled standardization; population std so a two-example shadow set works.
    for (int j = 0; j < 4; ++j) {
        double mean = 0.0;
        for (const auto& x : feats) mean += x[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (const auto& x : feats) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<double>(n);
        m.feat_mean[j] = mean;
        m.feat_std[j] = var < 1e-24 ? 0.0 : std::sqrt(var);
    }

    std::vector<std::array<double, 4>> z(n);
    for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < 4; ++j)
            z[i][j] = m.feat_std[j] <= 0.0 ? 0.0 : (feats[i][j] - m.feat_mean[j]) / m.feat_std[j];

    const double inv_n = 1.0 / static_cast<double>(n);
    for (int it = 0; it < iterations; ++it) {
        std::array<double, 4> gw{};
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double a = m.bias;
            for (int j = 0; j < 4; ++j) a += m.weights[j] * z[i][j];
            const double p = 1.0 / (1.0 + std::exp(-a));
            const double err = p - labels[i];
            for (int j = 0; j < 4; ++j) gw[j] += err * z[i][j];
            gb += err;
        }
        for (int j = 0; j < 4; ++j) {
            if (m.feat_std[j] <= 0.0) continue;  // frozen feature stays at 0
            m.weights[j] -= lr * gw[j] * inv_n;
        }
        m.bias -= lr * gb * inv_n;
    }
    return m;
}

double attack_auc(const std::vector<double>& member_scores,
                  const std::vector<double>& nonmember_scores) {
    if (member_scores.empty() || nonmember_scores.empty())
        throw UsageError("AUC needs at least one score on each side");
    double wins = 0.0;
    for (double s : member_scores) {
        for (double t : nonmember_scores) {
            if (s > t)
                wins += 1.0;
            else if (s == t)
                wins += 0.5;
        }
    }
    return wins /
           (static_cast<double>(member_scores.size()) * static_cast<double>(nonmember_scores.size()));
}

double attack_auc(const AttackModel& attack, const Predictor& target,
                  const std::vector<const SliceSample*>& members,
                  const std::vector<const SliceSample*>& nonmembers, int batch_size, int threads) {
    std::vector<AttackFeatures> mf = extract_features_batch(target, members, batch_size, threads);
    std::vector<AttackFeatures> nf = extract_features_batch(target, nonmembers, batch_size, threads);
    std::vector<double> ms(mf.size()), ns(nf.size());
    for (std::size_t i = 0; i < mf.size(); ++i) ms[i] = attack.score(mf[i]);
    for (std::size_t i = 0; i < nf.size(); ++i) ns[i] = attack.score(nf[i]);
    return attack_auc(ms, ns);
}

}  // namespace fedseg
