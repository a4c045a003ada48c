#pragma once

#include <vector>

#include "fedseg/rng.hpp"

namespace fedseg {

// Client-level differential privacy knobs. delta feeds only the accountant.
struct DpConfig {
    float clip_norm = 1.0f;
    float noise_sigma = 1.2f;
    double delta = 1e-5;
};

// delta * min(1, C / ||delta||_2); the norm is accumulated in f64.
std::vector<float> clip_update(const std::vector<float>& delta, float clip_norm);

// Adds i.i.d. N(0, (sigma*C)^2) per coordinate; identity when sigma == 0
// (the rng is left untouched so sigma = 0 runs match noise-free runs bit for
// bit).
std::vector<float> add_noise(const std::vector<float>& delta, float sigma, float clip_norm,
                             RngStream& rng);

// Renyi composition of the Gaussian mechanism over `rounds` full-participation
// releases, converted at the best alpha on the grid {1.25, 1.5, ..., 512}:
// eps = min_alpha rounds*alpha/(2 sigma^2) + ln(1/delta)/(alpha-1).
// sigma = 0 -> +infinity.
double account_privacy(double sigma, int rounds, double delta);

}  // namespace fedseg
