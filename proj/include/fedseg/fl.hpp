#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fedseg/data.hpp"
#include "fedseg/dp.hpp"
#include "fedseg/metrics.hpp"
#include "fedseg/model.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

struct TrainConfig {
    float lr = 0.01f;
    float lr_decay_factor = 0.1f;
    int lr_decay_at_round = 70;  // desk preset: 18
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    int batch_size = 16;
    int local_epochs = 1;  // E
    int rounds = 100;      // R; desk preset: 25
    float prox_mu = 0.0f;  // proximal coefficient; 0 disables the term entirely
    Method method = Method::FedAvg;
    bool bn_reset = false;  // FedBN: discard client BN state between rounds
};

void validate_train_config(const TrainConfig& cfg);  // ConfigError on bad fields

// Step-decay schedule on the 1-based round index (centralized runs map epoch
// blocks of 5 onto this axis, shadow/local-only map epoch blocks of E).
float lr_at_round(const TrainConfig& cfg, int round);

// Segment indices the active method aggregates: every segment for most
// methods, only non-BN segments under FedBN.
std::vector<std::size_t> aggregation_segments(const ParamSet& params, Method method);
std::size_t aggregation_length(const ParamSet& params, Method method);
std::vector<float> extract_segments(const ParamSet& params,
                                    const std::vector<std::size_t>& segs);
void add_to_segments(ParamSet& params, const std::vector<std::size_t>& segs,
                     const std::vector<float>& delta);

struct RoundUpdate {
    int client_id = 0;
    std::vector<float> delta;  // w_local - w_global over the aggregated segments
    std::uint32_t n_samples = 0;
    std::optional<std::vector<float>> bn_payload;  // BN values; absent under FedBN
};

// FedBN: a client's own BN segment values, carried across rounds.
struct ClientBnState {
    bool initialized = false;
    std::vector<float> values;  // concatenated BN segments in layout order
};

struct SgdContext {
    int round = 1;
    int client_id = -1;  // -1 for pooled (non-federated) training
};

// One epoch of mini-batch SGD with momentum over `params` in place. The
// gradient of each trainable segment is BCE backprop + weight_decay * w
// (+ prox_mu * (w - anchor) when prox_mu > 0). Returns the mean batch loss.
// Non-finite loss -> NumericError naming round/client/batch.
double run_sgd_epoch(const ModelConfig& mc, ParamSet& params,
                     const std::vector<const SliceSample*>& samples, const TrainConfig& cfg,
                     float lr, const ParamSet* prox_anchor, std::vector<float>& velocity,
                     RngStream shuffle_rng, const SgdContext& ctx);

// E local epochs from the broadcast global model, momentum buffer reset at
// round start. Under FedAvgDp the whole delta is clipped then noised (noise
// stream rng.split("dp_noise")). Under FedBN `bn_state` is restored before
// training (unless bn_reset) and captured after; the delta then spans only
// non-BN segments and bn_payload is absent.
RoundUpdate local_train(const ParamSet& global_params, const ModelConfig& mc,
                        const ClientData& client, const TrainConfig& cfg, const DpConfig& dp,
                        int round, RngStream rng, ClientBnState* bn_state = nullptr);

// w_global + sum_k (n_k / sum n) * delta_k over the aggregated segments,
// accumulated in f64 in ascending client-id order. Layout mismatch ->
// ProtocolError.
ParamSet aggregate(const std::vector<RoundUpdate>& updates, const ParamSet& global_params,
                   Method method);

// ---- simulated secure aggregation ------------------------------------------
// Fixed-point two's-complement encoding at scale 2^24 in u64 with wrapping
// arithmetic, plus exactly-canceling pairwise PRG masks.

constexpr int kFixedPointBits = 24;
constexpr double kFixedPointScale = 16777216.0;  // 2^24
constexpr float kFixedPointLimit = 32768.0f;     // 2^39 / 2^24

std::vector<std::uint64_t> encode_fixed(const std::vector<float>& values);
std::vector<float> decode_fixed_sum(const std::vector<std::uint64_t>& wrapped_sum);

// Symmetric matrix of per-pair PRG seeds; the diagonal is unused.
struct PairwiseSeeds {
    int n_clients = 0;
    std::vector<std::uint64_t> seeds;  // row-major n x n

    static PairwiseSeeds derive(const RngStream& rng, int n_clients);
    std::uint64_t at(int i, int j) const;
};

struct MaskedUpdate {
    int client_id = 0;
    std::vector<std::uint64_t> masked_fixed;
    std::uint32_t n_samples = 0;
};

// Client-side: encode the delta and add sum_{j != i} +-PRG(seed_ij), the sign
// positive for the lower index of the pair. `index` is the client's rank in
// the round's roster (0-based).
MaskedUpdate mask_update(const RoundUpdate& update, int index, const PairwiseSeeds& seeds);

// Masks every update, sums the masked vectors mod 2^64 in ascending client-id
// order, and decodes the (exactly unmasked) fixed-point sum. The summation
// never touches an unmasked delta.
std::vector<float> secure_aggregate(const std::vector<RoundUpdate>& updates,
                                    const PairwiseSeeds& seeds);

// ---- experiment drivers ------------------------------------------------------

using AucProbe = std::function<double(const Predictor&)>;

struct RunHooks {
    AucProbe mia_probe;   // empty -> no MIA column in the history
    int mia_cadence = 1;  // probe every k-th round (the final round always)
    int eval_batch = 16;
    int threads = 0;
};

struct RunResult {
    ExperimentHistory history;
    ParamSet model;  // eval-ready final model (FedBN: test-estimated BN stats)
};

// R rounds of broadcast -> local_train (clients in parallel) -> mask ->
// secure-sum -> apply, with a global-test evaluation per round. Deterministic
// given (data, cfg, seed) regardless of scheduling.
RunResult run_federated(const FederationData& data, const ModelConfig& mc,
                        const TrainConfig& cfg, const DpConfig& dp, std::uint64_t seed,
                        const RunHooks& hooks = {});

// Pools all client train sets and runs 5*R epochs of plain SGD (persistent
// momentum), evaluating every 5 epochs so record round indices align with
// federated rounds.
RunResult train_centralized(const FederationData& data, const ModelConfig& mc,
                            const TrainConfig& cfg, std::uint64_t seed,
                            const RunHooks& hooks = {});

// Each client trains alone for R*E epochs; the history carries the per-round
// mean of the clients' global-test Dice/CE and the final per-client Dice list.
RunResult train_local_only(const FederationData& data, const ModelConfig& mc,
                           const TrainConfig& cfg, std::uint64_t seed,
                           const RunHooks& hooks = {});

// Attacker surrogate: same architecture, plain SGD on the shadow-member half
// for R*E epochs with the local-training optimizer settings.
ParamSet train_shadow(const FederationData& data, const ModelConfig& mc, const TrainConfig& cfg,
                      const RngStream& rng, int threads = 0);

// Server-side view of a FedBN model: aggregated weights with BN statistics
// freshly estimated on the first two test batches (cumulative average).
ParamSet fedbn_eval_params(const ModelConfig& mc, const ParamSet& global,
                           const std::vector<const SliceSample*>& test, int batch_size);

// ---- pools and sampling helpers ----------------------------------------------

std::vector<const SliceSample*> sample_pointers(const std::vector<SliceSample>& samples);
std::vector<const SliceSample*> pooled_train(const FederationData& data);  // client-id order
std::vector<const SliceSample*> sample_without_replacement(
    const std::vector<const SliceSample*>& pool, int count, RngStream rng);

}  // namespace fedseg
