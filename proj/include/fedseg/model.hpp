#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fedseg/rng.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

// Miniature U-Net: two down-blocks, bottleneck, two up-blocks with skip
// connections, 1x1 sigmoid head. Widths base / 2*base / 4*base.
struct ModelConfig {
    int base_channels = 8;  // desk preset; paper preset below
    int in_channels = 1;
    int out_channels = 1;
};

ModelConfig desk_model_config();   // base 8
ModelConfig paper_model_config();  // base 52 (~1.24M trainable parameters)

enum class SegmentKind : std::uint8_t {
    ConvWeight = 0,
    ConvBias = 1,
    BnGamma = 2,
    BnBeta = 3,
    BnRunningMean = 4,
    BnRunningVar = 5,
};

inline bool is_bn_kind(SegmentKind k) { return k >= SegmentKind::BnGamma; }
inline bool is_trainable_kind(SegmentKind k) { return k <= SegmentKind::BnBeta; }

struct ParamSegment {
    std::string name;  // e.g. "enc1.conv1.weight"
    std::size_t offset = 0;
    std::size_t length = 0;
    SegmentKind kind = SegmentKind::ConvWeight;
};

// Flat model state: one contiguous f32 vector tiled exactly by named segments.
struct ParamSet {
    std::vector<float> values;
    std::vector<ParamSegment> segments;

    int index_of(std::string_view name) const;  // -1 when absent
    const ParamSegment& seg(std::string_view name) const;
    float* span(std::size_t segment_index);
    const float* span(std::size_t segment_index) const;

    bool same_layout(const ParamSet& other) const;  // names, kinds, offsets, lengths
    void validate_tiling() const;  // segments must tile values with no gaps

    std::size_t trainable_count() const;  // excludes BN running stats
};

// Default-valued layout for a config: conv weights/biases zero, gamma 1,
// beta 0, running mean 0, running var 1.
ParamSet make_layout(const ModelConfig& cfg);

// He-normal initialization (std = sqrt(2 / fan_in)) of conv weights, driven by
// a per-segment substream of `seed`; everything else as in make_layout.
ParamSet build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ModelForward {
    Tensor prob;                // (N, out_channels, H, W), values in (0, 1)
    std::vector<int> leaf_ids;  // tape id per segment; -1 where untracked
};

// Forward pass. Train mode updates the BN running-stat segments in `params`
// (EMA with `bn_momentum`); eval mode reads them and never writes. When `tape`
// is given, trainable segments become tracked leaves (ids in the result).
// Throws NumericError naming the block on non-finite activations.
ModelForward model_forward(const ModelConfig& cfg, ParamSet& params, const Tensor& images,
                           BnMode mode, Tape* tape, float bn_momentum = 0.1f);

// Eval-mode forward; pure function of (params, images).
Tensor model_predict(const ModelConfig& cfg, const ParamSet& params, const Tensor& images);

// pixel >= threshold -> 1 else 0. threshold must be in (0, 1).
Tensor binarize(const Tensor& prob_map, float threshold = 0.5f);

// 2|A∩B| / (|A| + |B|) over {0,1} tensors of equal shape; both empty -> 1.0.
double dice_coefficient(const Tensor& pred_mask, const Tensor& true_mask);

// Checkpoint file: magic "FOBP", version u32, segment count u32, per-segment
// table (name u16-length + bytes, offset u64, length u64, kind u8), then all
// values as little-endian f32.
void save_checkpoint(const ParamSet& params, const std::string& path);
ParamSet load_checkpoint(const std::string& path);
// Load with layout validation against `like`; mismatch -> FormatError.
ParamSet load_checkpoint_as(const std::string& path, const ParamSet& like);

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace fedseg
