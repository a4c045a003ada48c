#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fedseg/common.hpp"

namespace fedseg {

// Dense rank-4 layout: (batch N, channels C, height H, width W), row-major.
// Convolution weights reuse the same rank as (Cout, Cin, kh, kw); per-channel
// vectors (bias, BN gamma/beta) as (1, C, 1, 1); scalars as (1, 1, 1, 1).
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    bool operator==(const Shape& o) const = default;
    std::string str() const;
};

// Value-semantic tensor. Copies share immutable storage; mutation is only legal
// through mutable_data() while storage is uniquely owned (builders, optimizer).
// Ops never write through an input's storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false);
    static Tensor full(Shape s, float value, bool requires_grad = false);
    static Tensor from_data(Shape s, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value);

    Shape shape;
    bool requires_grad = false;
    int id = -1;  // tape value id; -1 while untracked

    std::size_t numel() const { return shape.numel(); }
    bool empty() const { return !data_; }

    const float* data() const { return data_->data(); }
    const std::vector<float>& vec() const { return *data_; }

    // Unique-ownership write access; throws if the storage is shared.
    float* mutable_data();

    float item() const;  // scalar tensors only
    bool all_finite() const;

private:
    std::shared_ptr<std::vector<float>> data_;
};

// Per-id gradient buffers produced by Tape::backward. Absent ids have no
// gradient (their tensors were not on a path to the loss).
class GradientStore {
public:
    explicit GradientStore(std::size_t id_count) : grads_(id_count) {}

    const std::vector<float>* find(int id) const;
    // Gradient of a tracked tensor (zeros if off-path). Throws on untracked id.
    std::vector<float> get(int id, std::size_t numel) const;

    std::vector<float>& ensure(int id, std::size_t numel);
    void add(int id, std::size_t numel, const float* src, float scale = 1.0f);

private:
    std::vector<std::vector<float>> grads_;
};

// Reverse-mode tape. Ops append nodes in execution order (inputs always precede
// consumers); backward walks the list in reverse once per requested root.
// Single-threaded value; one tape per forward pass.
class Tape {
public:
    // Registers a requires_grad leaf, assigning its id.
    void track_leaf(Tensor& t);

    // Gradients of `loss` (a tracked scalar on this tape) for every tracked
    // tensor on a path to it. Deterministic: fixed node order, fixed
    // accumulation order. May be called for several roots on the same tape.
    GradientStore backward(const Tensor& loss) const;

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t id_count() const { return static_cast<std::size_t>(next_id_); }

    // Op-recording interface (used by the ops below).
    int alloc_id() { return next_id_++; }
    using BackFn = std::function<void(const std::vector<float>& gout, GradientStore& gs)>;
    void record(const char* op, int out_id, BackFn back) {
        nodes_.push_back(Node{op, out_id, std::move(back)});
    }

private:
    struct Node {
        const char* op;
        int out_id;
        BackFn back;
    };
    std::vector<Node> nodes_;
    int next_id_ = 0;
};

// ---- Ops -------------------------------------------------------------------
// Every op reads its inputs, allocates a fresh output, and (when `tape` is
// non-null and a differentiable input requires grad) records a backward node.
// Differentiable inputs passed with requires_grad must already be tracked.

// Cross-correlation, stride 1, zero padding preserving spatial size.
// weight: (Cout, Cin, kh, kw) with kh, kw in {1, 3}; bias: (1, Cout, 1, 1).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Tape* tape);

struct BnStats {
    std::vector<float> mean;
    std::vector<float> var;
};
enum class BnMode { Train, Eval };

// Train mode normalizes by batch statistics over (N, H, W) and updates `stats`
// in place with an exponential moving average (unbiased variance); eval mode
// normalizes by `stats` (variance clamped at >= 0) and leaves them untouched.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BnStats& stats, BnMode mode, float momentum, float eps, Tape* tape);

Tensor relu(const Tensor& input, Tape* tape);

// 2x2 max pooling, stride 2; even H, W required. Backward routes to the argmax,
// ties broken by the first index in row-major window scan.
Tensor max_pool2(const Tensor& input, Tape* tape);

// Nearest-neighbour x2 upsampling.
Tensor upsample_nearest2(const Tensor& input, Tape* tape);

// Channel concatenation; equal N, H, W required.
Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape);

Tensor sigmoid(const Tensor& input, Tape* tape);

// Mean over all pixels of -[y log p + (1-y) log(1-p)], p clamped to
// [1e-7, 1 - 1e-7] before the logs. Targets must be exactly 0 or 1.
Tensor bce_loss(const Tensor& prob_map, const Tensor& target_mask, Tape* tape);

// Elementwise helpers (equal shapes).
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& input, float factor, Tape* tape);
// Sum of all elements as a scalar tensor.
Tensor sum_all(const Tensor& input, Tape* tape);

constexpr float kBceClamp = 1e-7f;

}  // namespace fedseg
