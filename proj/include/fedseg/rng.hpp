#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace fedseg {

// Counter-based SplitMix64 stream. Output i is finalize(key + (i+1)*GOLDEN), so
// the sequence is a pure function of (key, counter): seekable, splittable, and
// byte-reproducible across platforms, unlike std:: distributions. Substreams are
// derived by hashing a tag into the key; every (client, round, purpose) tuple in
// the simulator gets its own stream so results never depend on execution order.
class RngStream {
public:
    RngStream() : key_(0) {}
    explicit RngStream(std::uint64_t key) : key_(key) {}

    static RngStream from_seed(std::uint64_t seed) { return RngStream(mix(seed ^ kSeedSalt)); }

    // Child stream; independent of draws made on the parent.
    RngStream split(std::uint64_t tag) const {
        return RngStream(mix(key_ ^ mix(tag + kSplitSalt)));
    }
    RngStream split(std::string_view tag) const { return split(fnv1a(tag)); }
    RngStream split(std::string_view tag, std::uint64_t index) const {
        return split(tag).split(index + kIndexSalt);
    }

    std::uint64_t next_u64() {
        counter_ += kGolden;
        return mix(key_ + counter_);
    }

    std::uint32_t next_u32() { return static_cast<std::uint32_t>(next_u64() >> 32); }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float next_float() { return static_cast<float>(next_double()); }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). n must be > 0. Rejection-free modulo-bias trim.
    std::uint64_t next_below(std::uint64_t n) {
        std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            std::uint64_t v = next_u64();
            if (v >= threshold) return v % n;
        }
    }

    // Standard normal via Box-Muller; two fresh uniforms per call (no caching),
    // keeping the draw count a pure function of the call count.
    double next_gaussian() {
        double u1 = 0.0;
        do { u1 = next_double(); } while (u1 <= 0.0);
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    std::uint64_t key() const { return key_; }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 14695981039346656037ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return h;
    }

private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
    static constexpr std::uint64_t kSeedSalt = 0x5A17AB1E5EEDull;
    static constexpr std::uint64_t kSplitSalt = 0xB5297A4D3C1E5ull;
    static constexpr std::uint64_t kIndexSalt = 0x1DA7A57A2Eull;
    static constexpr double kPi = 3.14159265358979323846;

    // SplitMix64 finalizer (Stafford mix13).
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace fedseg
