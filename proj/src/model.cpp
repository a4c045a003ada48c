#include "fedseg/model.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "fedseg/binio.hpp"

namespace fedseg {
namespace {

struct ConvDef {
    std::string prefix;  // "enc1.conv1"
    int cin, cout, k;
};
struct BnDef {
    std::string prefix;  // "enc1.bn1"
    int channels;
};

struct Arch {
    std::vector<ConvDef> convs;
    std::vector<BnDef> bns;  // parallel to convs except the head (no BN)
};

// Block structure: down = [conv3x3 -> BN -> ReLU] x2 + pool, bottleneck = x2,
// up = upsample x2 -> concat skip -> [conv -> BN -> ReLU] x2, head = 1x1 conv.
Arch architecture(const ModelConfig& cfg) {
    const int b = cfg.base_channels;
    Arch a;
    auto block = [&a](const std::string& name, int cin, int cmid) {
        a.convs.push_back({name + ".conv1", cin, cmid, 3});
        a.bns.push_back({name + ".bn1", cmid});
        a.convs.push_back({name + ".conv2", cmid, cmid, 3});
        a.bns.push_back({name + ".bn2", cmid});
    };
    block("enc1", cfg.in_channels, b);
    block("enc2", b, 2 * b);
    block("bottleneck", 2 * b, 4 * b);
    block("dec2", 4 * b + 2 * b, 2 * b);
    block("dec1", 2 * b + b, b);
    a.convs.push_back({"head", b, cfg.out_channels, 1});
    return a;
}

void check_config(const ModelConfig& cfg) {
    if (cfg.base_channels < 2 || cfg.base_channels % 2 != 0)
        throw ConfigError("base_channels must be even and >= 2, got " +
                          std::to_string(cfg.base_channels));
    if (cfg.in_channels < 1 || cfg.out_channels < 1)
        throw ConfigError("channel counts must be positive");
}

void append_segment(ParamSet& ps, std::string name, SegmentKind kind, std::size_t length,
                    float fill) {
    ParamSegment s;
    s.name = std::move(name);
    s.kind = kind;
    s.offset = ps.values.size();
    s.length = length;
    ps.values.insert(ps.values.end(), length, fill);
    ps.segments.push_back(std::move(s));
}

}  // namespace

ModelConfig desk_model_config() { return ModelConfig{8, 1, 1}; }
ModelConfig paper_model_config() { return ModelConfig{52, 1, 1}; }

int ParamSet::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < segments.size(); ++i)
        if (segments[i].name == name) return static_cast<int>(i);
    return -1;
}

const ParamSegment& ParamSet::seg(std::string_view name) const {
    const int i = index_of(name);
    if (i < 0) throw UsageError("unknown parameter segment " + std::string(name));
    return segments[static_cast<std::size_t>(i)];
}

float* ParamSet::span(std::size_t segment_index) {
    return values.data() + segments.at(segment_index).offset;
}
const float* ParamSet::span(std::size_t segment_index) const {
    return values.data() + segments.at(segment_index).offset;
}

bool ParamSet::same_layout(const ParamSet& other) const {
    if (segments.size() != other.segments.size()) return false;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        const auto& a = segments[i];
        const auto& b = other.segments[i];
        if (a.name != b.name || a.offset != b.offset || a.length != b.length || a.kind != b.kind)
            return false;
    }
    return values.size() == other.values.size();
}

void ParamSet::validate_tiling() const {
    std::size_t at = 0;
    for (const auto& s : segments) {
        if (s.offset != at)
            throw FormatError("segment " + s.name + " does not tile the value vector", s.offset);
        if (s.length == 0) throw FormatError("segment " + s.name + " is empty", s.offset);
        at += s.length;
    }
    if (at != values.size())
        throw FormatError("segments cover " + std::to_string(at) + " of " +
                              std::to_string(values.size()) + " values",
                          at);
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& s : segments)
        if (is_trainable_kind(s.kind)) n += s.length;
    return n;
}

ParamSet make_layout(const ModelConfig& cfg) {
    check_config(cfg);
    const Arch a = architecture(cfg);
    ParamSet ps;
    std::size_t bn_at = 0;
    for (std::size_t ci = 0; ci < a.convs.size(); ++ci) {
        const auto& c = a.convs[ci];
        append_segment(ps, c.prefix + ".weight", SegmentKind::ConvWeight,
                       static_cast<std::size_t>(c.cout) * c.cin * c.k * c.k, 0.0f);
        append_segment(ps, c.prefix + ".bias", SegmentKind::ConvBias,
                       static_cast<std::size_t>(c.cout), 0.0f);
        if (bn_at < a.bns.size() && c.prefix != "head") {
            const auto& bn = a.bns[bn_at++];
            const auto n = static_cast<std::size_t>(bn.channels);
            append_segment(ps, bn.prefix + ".gamma", SegmentKind::BnGamma, n, 1.0f);
            append_segment(ps, bn.prefix + ".beta", SegmentKind::BnBeta, n, 0.0f);
            append_segment(ps, bn.prefix + ".running_mean", SegmentKind::BnRunningMean, n, 0.0f);
            append_segment(ps, bn.prefix + ".running_var", SegmentKind::BnRunningVar, n, 1.0f);
        }
    }
    ps.validate_tiling();
    return ps;
}

ParamSet build_model(const ModelConfig& cfg, std::uint64_t seed) {
    ParamSet ps = make_layout(cfg);
    const Arch a = architecture(cfg);
    RngStream root = RngStream::from_seed(seed);
    for (const auto& c : a.convs) {
        const int idx = ps.index_of(c.prefix + ".weight");
        const auto& s = ps.segments[static_cast<std::size_t>(idx)];
        const float std_dev = std::sqrt(2.0f / (static_cast<float>(c.cin) * c.k * c.k));
        RngStream rs = root.split(s.name);
        float* p = ps.values.data() + s.offset;
        for (std::size_t i = 0; i < s.length; ++i)
            p[i] = std_dev * static_cast<float>(rs.next_gaussian());
    }
    return ps;
}

namespace {

// One forward pass over the fixed graph; owns the segment->tensor plumbing.
class ForwardPass {
public:
    ForwardPass(const ModelConfig& cfg, ParamSet& params, BnMode mode, Tape* tape,
                float bn_momentum)
        : cfg_(cfg), params_(params), mode_(mode), tape_(tape), momentum_(bn_momentum) {
        leaf_ids_.assign(params_.segments.size(), -1);
    }

    ModelForward run(const Tensor& images) {
        if (images.shape.c != cfg_.in_channels)
            throw ConfigError("model expects " + std::to_string(cfg_.in_channels) +
                              " input channels, got " + std::to_string(images.shape.c));
        if (images.shape.h % 4 != 0 || images.shape.w % 4 != 0)
            throw ConfigError("input spatial dims must be divisible by 4, got " +
                              images.shape.str());
        check_finite(images, "input");

        Tensor e1 = block("enc1", images);
        Tensor p1 = max_pool2(e1, tape_);
        Tensor e2 = block("enc2", p1);
        Tensor p2 = max_pool2(e2, tape_);
        Tensor bt = block("bottleneck", p2);
        Tensor d2 = block("dec2", concat_channels(upsample_nearest2(bt, tape_), e2, tape_));
        Tensor d1 = block("dec1", concat_channels(upsample_nearest2(d2, tape_), e1, tape_));
        Tensor logits = conv2d(d1, param("head.weight", {cfg_.out_channels, cfg_.base_channels,
                                                         1, 1}),
                               param("head.bias", {1, cfg_.out_channels, 1, 1}), tape_);
        Tensor prob = sigmoid(logits, tape_);
        check_finite(prob, "head");

        ModelForward out;
        out.prob = std::move(prob);
        out.leaf_ids = std::move(leaf_ids_);
        return out;
    }

private:
    void check_finite(const Tensor& t, const char* where) {
        if (!t.all_finite())
            throw NumericError(std::string("non-finite activations after ") + where);
    }

    // Parameter tensor for a segment, tracked on the tape when training.
    Tensor param(const std::string& name, Shape shape) {
        const int idx = params_.index_of(name);
        if (idx < 0) throw UsageError("missing segment " + name);
        const auto& s = params_.segments[static_cast<std::size_t>(idx)];
        if (s.length != shape.numel())
            throw FormatError("segment " + name + " length " + std::to_string(s.length) +
                                  " does not match shape " + shape.str(),
                              s.offset);
        std::vector<float> vals(params_.values.begin() + static_cast<std::ptrdiff_t>(s.offset),
                                params_.values.begin() +
                                    static_cast<std::ptrdiff_t>(s.offset + s.length));
        const bool track = tape_ != nullptr && is_trainable_kind(s.kind);
        Tensor t = Tensor::from_data(shape, std::move(vals), track);
        if (track) {
            tape_->track_leaf(t);
            leaf_ids_[static_cast<std::size_t>(idx)] = t.id;
        }
        return t;
    }

    Tensor conv_bn_relu(const std::string& conv_name, const std::string& bn_name, int cin,
                        int cout, int k, const Tensor& x) {
        Tensor y = conv2d(x, param(conv_name + ".weight", {cout, cin, k, k}),
                          param(conv_name + ".bias", {1, cout, 1, 1}), tape_);
        const auto& mean_seg = params_.seg(bn_name + ".running_mean");
        const auto& var_seg = params_.seg(bn_name + ".running_var");
        BnStats stats;
        stats.mean.assign(params_.values.begin() + static_cast<std::ptrdiff_t>(mean_seg.offset),
                          params_.values.begin() +
                              static_cast<std::ptrdiff_t>(mean_seg.offset + mean_seg.length));
        stats.var.assign(params_.values.begin() + static_cast<std::ptrdiff_t>(var_seg.offset),
                         params_.values.begin() +
                             static_cast<std::ptrdiff_t>(var_seg.offset + var_seg.length));
        y = batch_norm(y, param(bn_name + ".gamma", {1, cout, 1, 1}),
                       param(bn_name + ".beta", {1, cout, 1, 1}), stats, mode_, momentum_,
                       kBnEps, tape_);
        if (mode_ == BnMode::Train) {
            std::memcpy(params_.values.data() + mean_seg.offset, stats.mean.data(),
                        sizeof(float) * mean_seg.length);
            std::memcpy(params_.values.data() + var_seg.offset, stats.var.data(),
                        sizeof(float) * var_seg.length);
        }
        // Pre-relu check: relu maps NaN to 0, which would mask the poisoned layer.
        check_finite(y, conv_name.c_str());
        return relu(y, tape_);
    }

    Tensor block(const std::string& name, const Tensor& x) {
        const int cin = x.shape.c;
        int cout;
        const int b = cfg_.base_channels;
        if (name == "enc1")
            cout = b;
        else if (name == "enc2")
            cout = 2 * b;
        else if (name == "bottleneck")
            cout = 4 * b;
        else if (name == "dec2")
            cout = 2 * b;
        else
            cout = b;
        Tensor y = conv_bn_relu(name + ".conv1", name + ".bn1", cin, cout, 3, x);
        y = conv_bn_relu(name + ".conv2", name + ".bn2", cout, cout, 3, y);
        check_finite(y, name.c_str());
        return y;
    }

    static constexpr float kBnEps = 1e-5f;

    const ModelConfig& cfg_;
    ParamSet& params_;
    BnMode mode_;
    Tape* tape_;
    float momentum_;
    std::vector<int> leaf_ids_;
};

}  // namespace

ModelForward model_forward(const ModelConfig& cfg, ParamSet& params, const Tensor& images,
                           BnMode mode, Tape* tape, float bn_momentum) {
    check_config(cfg);
    return ForwardPass(cfg, params, mode, tape, bn_momentum).run(images);
}

Tensor model_predict(const ModelConfig& cfg, const ParamSet& params, const Tensor& images) {
    // Eval mode never writes to params; the cast keeps one forward implementation.
    auto& mutable_params = const_cast<ParamSet&>(params);
    return model_forward(cfg, mutable_params, images, BnMode::Eval, nullptr).prob;
}

Tensor binarize(const Tensor& prob_map, float threshold) {
    if (!(threshold > 0.0f && threshold < 1.0f))
        throw ConfigError("binarize threshold must be in (0, 1), got " +
                          std::to_string(threshold));
    Tensor out = Tensor::zeros(prob_map.shape);
    float* op = out.mutable_data();
    const float* ip = prob_map.data();
    const std::size_t n = prob_map.numel();
    for (std::size_t i = 0; i < n; ++i) op[i] = ip[i] >= threshold ? 1.0f : 0.0f;
    return out;
}

double dice_coefficient(const Tensor& pred_mask, const Tensor& true_mask) {
    if (!(pred_mask.shape == true_mask.shape))
        throw UsageError("dice on mismatched shapes " + pred_mask.shape.str() + " vs " +
                         true_mask.shape.str());
    const float* a = pred_mask.data();
    const float* b = true_mask.data();
    const std::size_t n = pred_mask.numel();
    std::uint64_t ca = 0, cb = 0, inter = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (a[i] != 0.0f && a[i] != 1.0f)
            throw UsageError("dice input is not binary at index " + std::to_string(i));
        if (b[i] != 0.0f && b[i] != 1.0f)
            throw UsageError("dice input is not binary at index " + std::to_string(i));
        const bool pa = a[i] == 1.0f, pb = b[i] == 1.0f;
        ca += pa;
        cb += pb;
        inter += pa && pb;
    }
    if (ca + cb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

void save_checkpoint(const ParamSet& params, const std::string& path) {
    params.validate_tiling();
    binio::Writer w;
    w.bytes("FOBP", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(params.segments.size()));
    for (const auto& s : params.segments) {
        if (s.name.size() > 0xFFFF) throw UsageError("segment name too long: " + s.name);
        w.u16(static_cast<std::uint16_t>(s.name.size()));
        w.bytes(s.name.data(), s.name.size());
        w.u64(s.offset);
        w.u64(s.length);
        w.u8(static_cast<std::uint8_t>(s.kind));
    }
    w.f32_array(params.values.data(), params.values.size());
    binio::write_file(path, w.str());
}

ParamSet load_checkpoint(const std::string& path) {
    binio::Reader r(binio::read_file(path));
    if (r.bytes(4) != "FOBP") throw FormatError("bad checkpoint magic in " + path, 0);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    const std::uint32_t n_seg = r.u32();
    ParamSet ps;
    std::size_t total = 0;
    for (std::uint32_t i = 0; i < n_seg; ++i) {
        ParamSegment s;
        const std::uint16_t name_len = r.u16();
        s.name = r.bytes(name_len);
        s.offset = r.u64();
        s.length = r.u64();
        const std::uint8_t kind = r.u8();
        if (kind > static_cast<std::uint8_t>(SegmentKind::BnRunningVar))
            throw FormatError("bad segment kind " + std::to_string(kind) + " for " + s.name,
                              r.pos());
        s.kind = static_cast<SegmentKind>(kind);
        total += s.length;
        ps.segments.push_back(std::move(s));
    }
    ps.values = r.f32_array(total);
    if (!r.at_end()) throw FormatError("trailing bytes in checkpoint " + path, r.pos());
    ps.validate_tiling();
    return ps;
}

ParamSet load_checkpoint_as(const std::string& path, const ParamSet& like) {
    ParamSet ps = load_checkpoint(path);
    if (!ps.same_layout(like))
        throw FormatError("checkpoint " + path + " does not match the current model layout", 0);
    return ps;
}

}  // namespace fedseg
