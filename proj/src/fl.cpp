#include "fedseg/fl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "fedseg/common.hpp"
#include "fedseg/parallel.hpp"

namespace fedseg {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<std::size_t> bn_segment_indices(const ParamSet& params) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < params.segments.size(); ++i)
        if (is_bn_kind(params.segments[i].kind)) out.push_back(i);
    return out;
}

void set_segments(ParamSet& params, const std::vector<std::size_t>& segs,
                  const std::vector<float>& values) {
    std::size_t pos = 0;
    for (std::size_t si : segs) {
        const ParamSegment& s = params.segments[si];
        if (pos + s.length > values.size()) throw ProtocolError("segment payload too short");
        std::memcpy(params.values.data() + s.offset, values.data() + pos,
                    s.length * sizeof(float));
        pos += s.length;
    }
    if (pos != values.size()) throw ProtocolError("segment payload too long");
}

// Ranks of the updates in ascending client-id order; duplicate ids rejected.
std::vector<std::size_t> client_order(const std::vector<RoundUpdate>& updates) {
    std::vector<std::size_t> order(updates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return updates[a].client_id < updates[b].client_id;
    });
    for (std::size_t i = 1; i < order.size(); ++i)
        if (updates[order[i - 1]].client_id == updates[order[i]].client_id)
            throw ProtocolError("duplicate client_id in round updates");
    return order;
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.lr < 0 || cfg.lr_decay_factor < 0 || cfg.momentum < 0 || cfg.weight_decay < 0 ||
        cfg.prox_mu < 0)
        throw ConfigError("training rates must be non-negative");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.local_epochs < 0) throw ConfigError("local_epochs must be >= 0");
    if (cfg.rounds < 0) throw ConfigError("rounds must be >= 0");
    if (cfg.lr_decay_at_round < 1) throw ConfigError("lr_decay_at_round must be >= 1");
}

float lr_at_round(const TrainConfig& cfg, int round) {
    return round >= cfg.lr_decay_at_round ? cfg.lr * cfg.lr_decay_factor : cfg.lr;
}

std::vector<std::size_t> aggregation_segments(const ParamSet& params, Method method) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < params.segments.size(); ++i) {
        if (method == Method::FedBn && is_bn_kind(params.segments[i].kind)) continue;
        out.push_back(i);
    }
    return out;
}

std::size_t aggregation_length(const ParamSet& params, Method method) {
    std::size_t n = 0;
    for (std::size_t si : aggregation_segments(params, method)) n += params.segments[si].length;
    return n;
}

std::vector<float> extract_segments(const ParamSet& params,
                                    const std::vector<std::size_t>& segs) {
    std::size_t total = 0;
    for (std::size_t si : segs) total += params.segments[si].length;
    std::vector<float> out(total);
    std::size_t pos = 0;
    for (std::size_t si : segs) {
        const ParamSegment& s = params.segments[si];
        std::memcpy(out.data() + pos, params.values.data() + s.offset, s.length * sizeof(float));
        pos += s.length;
    }
    return out;
}

void add_to_segments(ParamSet& params, const std::vector<std::size_t>& segs,
                     const std::vector<float>& delta) {
    std::size_t pos = 0;
    for (std::size_t si : segs) {
        const ParamSegment& s = params.segments[si];
        if (pos + s.length > delta.size()) throw ProtocolError("delta shorter than segment span");
        float* w = params.values.data() + s.offset;
        const float* d = delta.data() + pos;
        for (std::size_t c = 0; c < s.length; ++c) w[c] += d[c];
        pos += s.length;
    }
    if (pos != delta.size()) throw ProtocolError("delta longer than segment span");
}

double run_sgd_epoch(const ModelConfig& mc, ParamSet& params,
                     const std::vector<const SliceSample*>& samples, const TrainConfig& cfg,
                     float lr, const ParamSet* prox_anchor, std::vector<float>& velocity,
                     RngStream shuffle_rng, const SgdContext& ctx) {
    if (samples.empty()) throw UsageError("cannot run an SGD epoch on an empty sample set");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (velocity.size() != params.values.size())
        throw UsageError("velocity buffer does not match the parameter count");
    if (prox_anchor && !prox_anchor->same_layout(params))
        throw UsageError("proximal anchor layout differs from the trained parameters");

    const std::size_t n = samples.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = shuffle_rng.next_below(i + 1);
        std::swap(perm[i], perm[j]);
    }

    const std::size_t bsz = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t n_batches = (n + bsz - 1) / bsz;
    const bool use_prox = cfg.prox_mu > 0.0f && prox_anchor != nullptr;
    double total_loss = 0.0;

    for (std::size_t b = 0; b < n_batches; ++b) {
        const std::size_t lo = b * bsz, hi = std::min(n, lo + bsz);
        std::vector<const SliceSample*> chunk(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) chunk[i - lo] = samples[perm[i]];
        SegBatch batch = make_batch(chunk);

        Tape tape;
        ModelForward fwd = model_forward(mc, params, batch.images, BnMode::Train, &tape);
        Tensor loss = bce_loss(fwd.prob, batch.masks, &tape);
        const double lv = loss.item();
        if (!std::isfinite(lv))
            throw NumericError("non-finite loss at round " + std::to_string(ctx.round) +
                               ", client " + std::to_string(ctx.client_id) + ", batch " +
                               std::to_string(b));
        GradientStore grads = tape.backward(loss);

        for (std::size_t si = 0; si < params.segments.size(); ++si) {
            const int id = fwd.leaf_ids[si];
            if (id < 0) continue;  // BN running stats: not SGD-updated
            const ParamSegment& s = params.segments[si];
            float* w = params.values.data() + s.offset;
            float* v = velocity.data() + s.offset;
            const std::vector<float>* gp = grads.find(id);
            const float* g = gp ? gp->data() : nullptr;
            const float* a = use_prox ? prox_anchor->values.data() + s.offset : nullptr;
            for (std::size_t c = 0; c < s.length; ++c) {
                float gc = g ? g[c] : 0.0f;
                gc += cfg.weight_decay * w[c];
                if (use_prox) gc += cfg.prox_mu * (w[c] - a[c]);
                v[c] = cfg.momentum * v[c] + gc;
                w[c] -= lr * v[c];
            }
        }
        total_loss += lv;
    }
    return total_loss / static_cast<double>(n_batches);
}

RoundUpdate local_train(const ParamSet& global_params, const ModelConfig& mc,
                        const ClientData& client, const TrainConfig& cfg, const DpConfig& dp,
                        int round, RngStream rng, ClientBnState* bn_state) {
    validate_train_config(cfg);
    if (client.train.empty()) throw UsageError("client has no training data");

    ParamSet local = global_params;
    const std::vector<std::size_t> bn_segs = bn_segment_indices(local);
    const bool fedbn = cfg.method == Method::FedBn;
    if (fedbn && bn_state && bn_state->initialized && !cfg.bn_reset)
        set_segments(local, bn_segs, bn_state->values);

    const float lr = lr_at_round(cfg, round);
    const ParamSet* anchor = cfg.prox_mu > 0.0f ? &global_params : nullptr;
    std::vector<float> velocity(local.values.size(), 0.0f);  // reset every round
    std::vector<const SliceSample*> ptrs = sample_pointers(client.train);

    for (int e = 1; e <= cfg.local_epochs; ++e)
        run_sgd_epoch(mc, local, ptrs, cfg, lr, anchor, velocity,
                      rng.split("shuffle", static_cast<std::uint64_t>(e)),
                      SgdContext{round, client.spec.client_id});

    if (fedbn && bn_state) {
        bn_state->values = extract_segments(local, bn_segs);
        bn_state->initialized = true;
    }

    const std::vector<std::size_t> segs = aggregation_segments(local, cfg.method);
    std::vector<float> delta = extract_segments(local, segs);
    const std::vector<float> base = extract_segments(global_params, segs);
    for (std::size_t c = 0; c < delta.size(); ++c) delta[c] -= base[c];

    if (cfg.method == Method::FedAvgDp) {
        delta = clip_update(delta, dp.clip_norm);
        double nsq = 0.0;
        for (float v : delta) nsq += static_cast<double>(v) * static_cast<double>(v);
        if (std::isfinite(static_cast<double>(dp.clip_norm)) &&
            std::sqrt(nsq) > static_cast<double>(dp.clip_norm) * (1.0 + 1e-6))
            throw NumericError("post-clip norm exceeds the clip bound");
        RngStream noise_rng = rng.split("dp_noise");
        delta = add_noise(delta, dp.noise_sigma, dp.clip_norm, noise_rng);
    }

    RoundUpdate u;
    u.client_id = client.spec.client_id;
    u.delta = std::move(delta);
    u.n_samples = static_cast<std::uint32_t>(client.train.size());
    if (!fedbn) u.bn_payload = extract_segments(local, bn_segs);
    return u;
}

ParamSet aggregate(const std::vector<RoundUpdate>& updates, const ParamSet& global_params,
                   Method method) {
    if (updates.empty()) throw UsageError("aggregate needs at least one update");
    const std::vector<std::size_t> segs = aggregation_segments(global_params, method);
    std::size_t expect = 0;
    for (std::size_t si : segs) expect += global_params.segments[si].length;

    std::uint64_t total = 0;
    for (const RoundUpdate& u : updates) {
        if (u.delta.size() != expect)
            throw ProtocolError("update delta length does not match the aggregation layout");
        total += u.n_samples;
    }
    if (total == 0) throw ProtocolError("aggregate got zero total samples");

    const std::vector<std::size_t> order = client_order(updates);
    std::vector<double> acc(expect, 0.0);
    for (std::size_t idx : order) {
        const RoundUpdate& u = updates[idx];
        const double w = static_cast<double>(u.n_samples) / static_cast<double>(total);
        for (std::size_t c = 0; c < expect; ++c) acc[c] += w * static_cast<double>(u.delta[c]);
    }

    ParamSet out = global_params;
    std::vector<float> delta(expect);
    for (std::size_t c = 0; c < expect; ++c) delta[c] = static_cast<float>(acc[c]);
    add_to_segments(out, segs, delta);
    return out;
}

// ---- secure aggregation -------------------------------------------------------

std::vector<std::uint64_t> encode_fixed(const std::vector<float>& values) {
    std::vector<std::uint64_t> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float v = values[i];
        if (!std::isfinite(v)) throw RangeError("non-finite value in fixed-point encoding");
        if (std::fabs(v) >= kFixedPointLimit)
            throw RangeError("fixed-point overflow: |value| >= 2^15");
        const long long q = std::llround(static_cast<double>(v) * kFixedPointScale);
        out[i] = static_cast<std::uint64_t>(q);
    }
    return out;
}

std::vector<float> decode_fixed_sum(const std::vector<std::uint64_t>& wrapped_sum) {
    std::vector<float> out(wrapped_sum.size());
    for (std::size_t i = 0; i < wrapped_sum.size(); ++i) {
        const std::int64_t q = static_cast<std::int64_t>(wrapped_sum[i]);
        out[i] = static_cast<float>(static_cast<double>(q) / kFixedPointScale);
    }
    return out;
}

PairwiseSeeds PairwiseSeeds::derive(const RngStream& rng, int n_clients) {
    if (n_clients < 1) throw UsageError("pairwise seeds need at least one client");
    PairwiseSeeds ps;
    ps.n_clients = n_clients;
    ps.seeds.assign(static_cast<std::size_t>(n_clients) * n_clients, 0);
    for (int i = 0; i < n_clients; ++i) {
        for (int j = i + 1; j < n_clients; ++j) {
            const std::uint64_t s =
                rng.split("pair", static_cast<std::uint64_t>(i) * n_clients + j).key();
            ps.seeds[static_cast<std::size_t>(i) * n_clients + j] = s;
            ps.seeds[static_cast<std::size_t>(j) * n_clients + i] = s;
        }
    }
    return ps;
}

std::uint64_t PairwiseSeeds::at(int i, int j) const {
    if (i < 0 || j < 0 || i >= n_clients || j >= n_clients || i == j)
        throw UsageError("pairwise seed index out of range");
    return seeds[static_cast<std::size_t>(i) * n_clients + j];
}

MaskedUpdate mask_update(const RoundUpdate& update, int index, const PairwiseSeeds& seeds) {
    if (index < 0 || index >= seeds.n_clients)
        throw UsageError("mask index outside the client roster");
    MaskedUpdate m;
    m.client_id = update.client_id;
    m.n_samples = update.n_samples;
    m.masked_fixed = encode_fixed(update.delta);
    for (int j = 0; j < seeds.n_clients; ++j) {
        if (j == index) continue;
        RngStream prg = RngStream::from_seed(seeds.at(index, j));
        const bool positive = index < j;
        for (std::uint64_t& x : m.masked_fixed) {
            const std::uint64_t mask = prg.next_u64();
            x = positive ? x + mask : x - mask;  // u64 wrap-around by design
        }
    }
    return m;
}

std::vector<float> secure_aggregate(const std::vector<RoundUpdate>& updates,
                                    const PairwiseSeeds& seeds) {
    if (updates.empty()) throw UsageError("secure_aggregate needs at least one update");
    if (static_cast<int>(updates.size()) != seeds.n_clients)
        throw ProtocolError("seed matrix size does not match the update roster");
    const std::size_t len = updates.front().delta.size();
    for (const RoundUpdate& u : updates)
        if (u.delta.size() != len) throw ProtocolError("update delta lengths differ");

    const std::vector<std::size_t> order = client_order(updates);
    // Server side: only masked vectors are summed from here on.
    std::vector<std::uint64_t> sum(len, 0);
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const MaskedUpdate m = mask_update(updates[order[rank]], static_cast<int>(rank), seeds);
        for (std::size_t c = 0; c < len; ++c) sum[c] += m.masked_fixed[c];
    }
    return decode_fixed_sum(sum);
}

// ---- experiment drivers -------------------------------------------------------

std::vector<const SliceSample*> sample_pointers(const std::vector<SliceSample>& samples) {
    std::vector<const SliceSample*> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) out[i] = &samples[i];
    return out;
}

std::vector<const SliceSample*> pooled_train(const FederationData& data) {
    std::vector<const SliceSample*> out;
    for (const ClientData& c : data.clients)
        for (const SliceSample& s : c.train) out.push_back(&s);
    return out;
}

std::vector<const SliceSample*> sample_without_replacement(
    const std::vector<const SliceSample*>& pool, int count, RngStream rng) {
    if (count < 0 || static_cast<std::size_t>(count) > pool.size())
        throw UsageError("sample count exceeds the pool size");
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<const SliceSample*> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const std::size_t j =
            static_cast<std::size_t>(i) + rng.next_below(idx.size() - static_cast<std::size_t>(i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
        out.push_back(pool[idx[static_cast<std::size_t>(i)]]);
    }
    return out;
}

ParamSet fedbn_eval_params(const ModelConfig& mc, const ParamSet& global,
                           const std::vector<const SliceSample*>& test, int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    ParamSet p = global;
    const std::size_t bsz = static_cast<std::size_t>(batch_size);
    for (int t = 1; t <= 2; ++t) {
        const std::size_t lo = static_cast<std::size_t>(t - 1) * bsz;
        if (lo >= test.size()) break;
        const std::size_t hi = std::min(test.size(), lo + bsz);
        std::vector<const SliceSample*> chunk(test.begin() + lo, test.begin() + hi);
        SegBatch batch = make_batch(chunk);
        // Momentum 1/t turns the EMA into a cumulative average of batch stats.
        model_forward(mc, p, batch.images, BnMode::Train, nullptr, 1.0f / static_cast<float>(t));
    }
    return p;
}

namespace {

bool federated_method(Method m) {
    return m == Method::FedAvg || m == Method::FedProx || m == Method::FedBn ||
           m == Method::FedAvgDp;
}

bool probe_due(const RunHooks& hooks, int round, int total_rounds) {
    if (!hooks.mia_probe) return false;
    const int cadence = std::max(1, hooks.mia_cadence);
    return round % cadence == 0 || round == total_rounds;
}

// Shared epoch loop for centralized / local-only / shadow training: round
// analog r covers epochs (r-1)*epr+1 .. r*epr, and `on_round` fires after each
// full block.
void train_isolated(const ModelConfig& mc, ParamSet& params,
                    const std::vector<const SliceSample*>& samples, const TrainConfig& cfg,
                    int total_epochs, int epochs_per_round, const RngStream& stream, int owner_id,
                    const std::function<void(int)>& on_round) {
    std::vector<float> velocity(params.values.size(), 0.0f);  // persists across epochs
    for (int e = 1; e <= total_epochs; ++e) {
        const int round = (e + epochs_per_round - 1) / epochs_per_round;
        const float lr = lr_at_round(cfg, round);
        run_sgd_epoch(mc, params, samples, cfg, lr, nullptr, velocity,
                      stream.split("shuffle", static_cast<std::uint64_t>(e)),
                      SgdContext{round, owner_id});
        if (e % epochs_per_round == 0 && on_round) on_round(round);
    }
}

}  // namespace

RunResult run_federated(const FederationData& data, const ModelConfig& mc,
                        const TrainConfig& cfg, const DpConfig& dp, std::uint64_t seed,
                        const RunHooks& hooks) {
    validate_train_config(cfg);
    if (!federated_method(cfg.method))
        throw ConfigError("run_federated requires a federated method");
    const std::size_t n_clients = data.clients.size();
    if (n_clients == 0) throw DataError("federation has no clients");
    for (const ClientData& c : data.clients)
        if (c.train.empty()) throw DataError("client without training data");
    if (data.test.empty()) throw DataError("federation has no test set");

    const RngStream root = RngStream::from_seed(seed);
    ParamSet global = build_model(mc, root.split("model_init").key());
    const std::vector<std::size_t> segs = aggregation_segments(global, cfg.method);
    const std::vector<const SliceSample*> test = sample_pointers(data.test);

    std::uint64_t total_samples = 0;
    for (const ClientData& c : data.clients) total_samples += c.train.size();

    std::vector<ClientBnState> bn_states(n_clients);

    ExperimentHistory hist;
    hist.method = cfg.method;
    hist.seed = seed;

    ParamSet eval_params = global;
    for (int r = 1; r <= cfg.rounds; ++r) {
        const auto t0 = Clock::now();
        const RngStream round_rng = root.split("round", static_cast<std::uint64_t>(r));

        std::vector<RoundUpdate> updates(n_clients);
        parallel_for(n_clients, hooks.threads, [&](std::size_t i) {
            const ClientData& client = data.clients[i];
            const RngStream crng =
                round_rng.split("client", static_cast<std::uint64_t>(client.spec.client_id));
            updates[i] = local_train(global, mc, client, cfg, dp, r, crng,
                                     cfg.method == Method::FedBn ? &bn_states[i] : nullptr);
        });

        // Clients pre-scale by their public weight so the masked sum decodes
        // straight to the weighted average.
        for (RoundUpdate& u : updates) {
            const double w =
                static_cast<double>(u.n_samples) / static_cast<double>(total_samples);
            for (float& v : u.delta) v = static_cast<float>(static_cast<double>(v) * w);
        }

        const PairwiseSeeds seeds =
            PairwiseSeeds::derive(round_rng.split("secagg"), static_cast<int>(n_clients));
        const std::vector<float> summed = secure_aggregate(updates, seeds);
        add_to_segments(global, segs, summed);

        eval_params = cfg.method == Method::FedBn
                          ? fedbn_eval_params(mc, global, test, cfg.batch_size)
                          : global;
        Predictor pred = make_predictor(mc, eval_params);
        const EvalResult ev = evaluate(pred, test, hooks.eval_batch, hooks.threads);

        RoundRecord rec;
        rec.round = r;
        rec.dice = ev.dice;
        rec.ce = ev.ce;
        if (probe_due(hooks, r, cfg.rounds)) rec.mia_auc = hooks.mia_probe(pred);
        rec.wall_ms = ms_since(t0);
        hist.records.push_back(std::move(rec));
    }

    if (cfg.method == Method::FedAvgDp)
        hist.epsilon = account_privacy(dp.noise_sigma, cfg.rounds, dp.delta);

    return RunResult{std::move(hist), cfg.rounds == 0 ? std::move(global) : std::move(eval_params)};
}

RunResult train_centralized(const FederationData& data, const ModelConfig& mc,
                            const TrainConfig& cfg, std::uint64_t seed, const RunHooks& hooks) {
    validate_train_config(cfg);
    if (data.clients.empty()) throw DataError("federation has no clients");
    if (data.test.empty()) throw DataError("federation has no test set");
    const std::vector<const SliceSample*> pool = pooled_train(data);
    if (pool.empty()) throw DataError("pooled training set is empty");
    const std::vector<const SliceSample*> test = sample_pointers(data.test);

    const RngStream root = RngStream::from_seed(seed);
    ParamSet params = build_model(mc, root.split("model_init").key());

    ExperimentHistory hist;
    hist.method = cfg.method;
    hist.seed = seed;

    constexpr int kEpochsPerRound = 5;  // 5 pooled epochs stand in for one round
    auto t0 = Clock::now();
    train_isolated(mc, params, pool, cfg, kEpochsPerRound * cfg.rounds, kEpochsPerRound,
                   root.split("sgd", 0), -1, [&](int round) {
                       Predictor pred = make_predictor(mc, params);
                       const EvalResult ev = evaluate(pred, test, hooks.eval_batch, hooks.threads);
                       RoundRecord rec;
                       rec.round = round;
                       rec.dice = ev.dice;
                       rec.ce = ev.ce;
                       if (probe_due(hooks, round, cfg.rounds)) rec.mia_auc = hooks.mia_probe(pred);
                       rec.wall_ms = ms_since(t0);
                       hist.records.push_back(std::move(rec));
                       t0 = Clock::now();
                   });

    return RunResult{std::move(hist), std::move(params)};
}

RunResult train_local_only(const FederationData& data, const ModelConfig& mc,
                           const TrainConfig& cfg, std::uint64_t seed, const RunHooks& hooks) {
    validate_train_config(cfg);
    const std::size_t n_clients = data.clients.size();
    if (n_clients == 0) throw DataError("federation has no clients");
    if (data.test.empty()) throw DataError("federation has no test set");
    const std::vector<const SliceSample*> test = sample_pointers(data.test);
    const RngStream root = RngStream::from_seed(seed);
    const ParamSet init = build_model(mc, root.split("model_init").key());

    const int rounds = cfg.rounds;
    std::vector<std::vector<EvalResult>> per_round(n_clients);
    std::vector<double> wall(static_cast<std::size_t>(rounds), 0.0);
    std::vector<double> final_dice(n_clients, 0.0);
    ParamSet first_model = init;

    for (std::size_t i = 0; i < n_clients; ++i) {
        const ClientData& client = data.clients[i];
        if (client.train.empty()) throw DataError("client without training data");
        ParamSet params = init;
        per_round[i].reserve(static_cast<std::size_t>(rounds));
        auto t0 = Clock::now();
        train_isolated(mc, params, sample_pointers(client.train), cfg,
                       rounds * cfg.local_epochs, cfg.local_epochs,
                       root.split("sgd", static_cast<std::uint64_t>(client.spec.client_id)),
                       client.spec.client_id, [&](int round) {
                           Predictor pred = make_predictor(mc, params);
                           per_round[i].push_back(
                               evaluate(pred, test, hooks.eval_batch, hooks.threads));
                           wall[static_cast<std::size_t>(round - 1)] += ms_since(t0);
                           t0 = Clock::now();
                       });
        final_dice[i] = per_round[i].empty() ? 0.0 : per_round[i].back().dice;
        if (i == 0) first_model = std::move(params);
    }

    ExperimentHistory hist;
    hist.method = cfg.method;
    hist.seed = seed;
    hist.per_client_final_dice = std::move(final_dice);
    if (cfg.local_epochs > 0) {
        for (int r = 1; r <= rounds; ++r) {
            RoundRecord rec;
            rec.round = r;
            double d = 0.0, c = 0.0;
            for (std::size_t i = 0; i < n_clients; ++i) {
                d += per_round[i][static_cast<std::size_t>(r - 1)].dice;
                c += per_round[i][static_cast<std::size_t>(r - 1)].ce;
            }
            rec.dice = d / static_cast<double>(n_clients);
            rec.ce = c / static_cast<double>(n_clients);
            rec.wall_ms = wall[static_cast<std::size_t>(r - 1)];
            hist.records.push_back(std::move(rec));
        }
    }
    return RunResult{std::move(hist), std::move(first_model)};
}

ParamSet train_shadow(const FederationData& data, const ModelConfig& mc, const TrainConfig& cfg,
                      const RngStream& rng, int threads) {
    validate_train_config(cfg);
    (void)threads;  // single training stream; batches are already vectorized
    if (data.shadow_members.empty()) throw DataError("no shadow member pool");
    ParamSet params = build_model(mc, rng.split("model_init").key());
    train_isolated(mc, params, sample_pointers(data.shadow_members), cfg,
                   cfg.rounds * cfg.local_epochs, std::max(1, cfg.local_epochs), rng.split("sgd"),
                   -2, nullptr);
    return params;
}

}  // namespace fedseg
