#include "fedseg/dp.hpp"

#include <cmath>
#include <limits>

#include "fedseg/common.hpp"

namespace fedseg {

std::vector<float> clip_update(const std::vector<float>& delta, float clip_norm) {
    if (!(clip_norm > 0.0f)) throw ConfigError("clip norm must be positive");
    double sq = 0.0;
    for (float v : delta) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    std::vector<float> out = delta;
    if (norm > static_cast<double>(clip_norm)) {
        const float f = static_cast<float>(static_cast<double>(clip_norm) / norm);
        for (auto& v : out) v *= f;
    }
    return out;
}

std::vector<float> add_noise(const std::vector<float>& delta, float sigma, float clip_norm,
                             RngStream& rng) {
    if (sigma < 0.0f) throw ConfigError("noise sigma must be >= 0");
    std::vector<float> out = delta;
    if (sigma == 0.0f) return out;
    const float std_dev = sigma * clip_norm;
    for (auto& v : out) v += std_dev * static_cast<float>(rng.next_gaussian());
    return out;
}

double account_privacy(double sigma, int rounds, double delta) {
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must be in (0, 1)");
    if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
    if (sigma == 0.0) return std::numeric_limits<double>::infinity();
    const double log_inv_delta = std::log(1.0 / delta);
    double best = std::numeric_limits<double>::infinity();
    for (double alpha = 1.25; alpha <= 512.0; alpha += 0.25) {
        const double eps = rounds * alpha / (2.0 * sigma * sigma) + log_inv_delta / (alpha - 1.0);
        if (eps < best) best = eps;
    }
    return best;
}

}  // namespace fedseg
