#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "fedseg/common.hpp"
#include "fedseg/data.hpp"
#include "fedseg/fl.hpp"
#include "fedseg/model.hpp"
#include "fedseg/rng.hpp"

using namespace fedseg;

namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

// Small federation on 16x16 slices so federated runs finish in milliseconds.
FederationData tiny_fed(std::uint64_t seed, int n_clients = 2, int per_client = 12,
                        int n_test = 10) {
    FederationData fd;
    const RngStream root = RngStream::from_seed(seed);
    for (int c = 1; c <= n_clients; ++c) {
        ClientData cd;
        cd.spec.client_id = c;
        cd.spec.n_train = per_client;
        cd.spec.radius_mode = c % 2 == 1 ? RadiusMode::LargeSkew : RadiusMode::SmallSkew;
        for (int i = 0; i < per_client; ++i)
            cd.train.push_back(generate_slice(
                root.split("train", static_cast<std::uint64_t>(c * 1000 + i)), cd.spec, 16, 16));
        fd.clients.push_back(std::move(cd));
    }
    for (int i = 0; i < n_test; ++i)
        fd.test.push_back(generate_slice(root.split("test", static_cast<std::uint64_t>(i)),
                                         fd.clients[i % n_clients].spec, 16, 16));
    for (int i = 0; i < 8; ++i) {
        fd.shadow_members.push_back(generate_slice(
            root.split("shadow_m", static_cast<std::uint64_t>(i)), fd.clients[0].spec, 16, 16));
        fd.shadow_nonmembers.push_back(
            generate_slice(root.split("shadow_n", static_cast<std::uint64_t>(i)),
                           fd.clients[(n_clients > 1) ? 1 : 0].spec, 16, 16));
    }
    return fd;
}

TrainConfig tiny_cfg(Method m = Method::FedAvg, int rounds = 3) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.rounds = rounds;
    cfg.batch_size = 8;
    cfg.lr_decay_at_round = 1000;  // keep lr flat unless a test wants the step
    return cfg;
}

// Two-segment toy layout so aggregation arithmetic is checkable by hand.
ParamSet toy_params(std::vector<float> w, std::vector<float> stats) {
    ParamSet p;
    p.segments.push_back({"w", 0, w.size(), SegmentKind::ConvWeight});
    p.segments.push_back({"bn.running_mean", w.size(), stats.size(), SegmentKind::BnRunningMean});
    p.values = std::move(w);
    p.values.insert(p.values.end(), stats.begin(), stats.end());
    p.validate_tiling();
    return p;
}

RoundUpdate make_update(int id, std::vector<float> delta, std::uint32_t n) {
    RoundUpdate u;
    u.client_id = id;
    u.delta = std::move(delta);
    u.n_samples = n;
    return u;
}

std::vector<double> dice_series(const ExperimentHistory& h) {
    std::vector<double> out;
    for (const auto& r : h.records) out.push_back(r.dice);
    return out;
}

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(validate_train_config(cfg));
    TrainConfig bad = cfg;
    bad.lr = -0.1f;
    CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
    bad = cfg;
    bad.local_epochs = -1;
    CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
    bad = cfg;
    bad.rounds = -1;
    CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
    bad = cfg;
    bad.prox_mu = -1e-3f;
    CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
    bad = cfg;
    bad.lr_decay_at_round = 0;
    CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
}

TEST_CASE("lr schedule steps once at the decay round") {
    TrainConfig cfg;
    cfg.lr = 0.01f;
    cfg.lr_decay_factor = 0.1f;
    cfg.lr_decay_at_round = 18;
    for (int r = 1; r < 18; ++r) CHECK(lr_at_round(cfg, r) == 0.01f);
    for (int r = 18; r <= 30; ++r) CHECK(lr_at_round(cfg, r) == doctest::Approx(0.001f));
}

TEST_CASE("aggregation segments cover everything except BN under FedBN") {
    const ParamSet p = make_layout(desk_model_config());
    const auto all = aggregation_segments(p, Method::FedAvg);
    CHECK(all.size() == p.segments.size());
    CHECK(aggregation_length(p, Method::FedAvg) == p.values.size());

    const auto non_bn = aggregation_segments(p, Method::FedBn);
    CHECK(non_bn.size() < all.size());
    for (std::size_t si : non_bn) CHECK_FALSE(is_bn_kind(p.segments[si].kind));
    std::size_t bn_total = 0;
    for (const auto& s : p.segments)
        if (is_bn_kind(s.kind)) bn_total += s.length;
    CHECK(aggregation_length(p, Method::FedBn) == p.values.size() - bn_total);

    // extract/add round-trip: w + (x - w) == x over the chosen segments
    ParamSet q = p;
    std::vector<float> delta = extract_segments(p, non_bn);
    for (float& v : delta) v = 1.5f - v;
    add_to_segments(q, non_bn, delta);
    for (std::size_t si : non_bn) {
        const auto& s = q.segments[si];
        for (std::size_t c = 0; c < s.length; ++c)
            CHECK(q.values[s.offset + c] == doctest::Approx(1.5f));
    }
    CHECK_THROWS_AS(add_to_segments(q, non_bn, std::vector<float>(delta.size() + 1, 0.0f)),
                    ProtocolError);
    CHECK_THROWS_AS(add_to_segments(q, non_bn, std::vector<float>(delta.size() - 1, 0.0f)),
                    ProtocolError);
}

TEST_CASE("one SGD step matches the hand-computed update") {
    const ModelConfig mc = desk_model_config();
    const FederationData fd = tiny_fed(11, 1, 1, 2);
    const SliceSample& s = fd.clients[0].train[0];
    TrainConfig cfg = tiny_cfg();
    const float lr = 0.01f;

    const ParamSet p0 = build_model(mc, 77);

    // Manual step: same forward, same gradient, same f32 update arithmetic.
    ParamSet pm = p0;
    SegBatch batch = make_batch({&s});
    Tape tape;
    ModelForward fwd = model_forward(mc, pm, batch.images, BnMode::Train, &tape);
    Tensor loss = bce_loss(fwd.prob, batch.masks, &tape);
    GradientStore grads = tape.backward(loss);
    for (std::size_t si = 0; si < pm.segments.size(); ++si) {
        const int id = fwd.leaf_ids[si];
        if (id < 0) continue;
        const ParamSegment& seg = pm.segments[si];
        const std::vector<float>* gp = grads.find(id);
        REQUIRE(gp != nullptr);
        float* w = pm.values.data() + seg.offset;
        for (std::size_t c = 0; c < seg.length; ++c) {
            float gc = (*gp)[c];
            gc += cfg.weight_decay * w[c];
            const float v = gc;  // first step: velocity starts at zero
            w[c] -= lr * v;
        }
    }

    ParamSet pe = p0;
    std::vector<float> velocity(pe.values.size(), 0.0f);
    const double mean_loss = run_sgd_epoch(mc, pe, {&s}, cfg, lr, nullptr, velocity,
                                           RngStream::from_seed(5), SgdContext{1, 1});
    CHECK(mean_loss == doctest::Approx(loss.item()).epsilon(1e-12));
    REQUIRE(pe.values.size() == pm.values.size());
    for (std::size_t i = 0; i < pe.values.size(); ++i) CHECK(pe.values[i] == pm.values[i]);
}

TEST_CASE("momentum accumulates across epochs inside local_train") {
    const ModelConfig mc = desk_model_config();
    const FederationData fd = tiny_fed(12, 1, 3, 2);
    TrainConfig cfg = tiny_cfg();
    cfg.local_epochs = 2;

    const ParamSet p0 = build_model(mc, 78);
    const RngStream rng = RngStream::from_seed(123);

    // Manual: two epochs sharing one velocity buffer, streams as local_train derives them.
    ParamSet pm = p0;
    std::vector<float> velocity(pm.values.size(), 0.0f);
    const auto ptrs = sample_pointers(fd.clients[0].train);
    for (int e = 1; e <= 2; ++e)
        run_sgd_epoch(mc, pm, ptrs, cfg, lr_at_round(cfg, 1), nullptr, velocity,
                      rng.split("shuffle", static_cast<std::uint64_t>(e)),
                      SgdContext{1, fd.clients[0].spec.client_id});

    const RoundUpdate u = local_train(p0, mc, fd.clients[0], cfg, DpConfig{}, 1, rng);
    CHECK(u.client_id == 1);
    CHECK(u.n_samples == 3);
    const auto segs = aggregation_segments(p0, cfg.method);
    const std::vector<float> manual_delta = [&] {
        std::vector<float> d = extract_segments(pm, segs);
        const std::vector<float> base = extract_segments(p0, segs);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= base[i];
        return d;
    }();
    REQUIRE(u.delta.size() == manual_delta.size());
    for (std::size_t i = 0; i < u.delta.size(); ++i) CHECK(u.delta[i] == manual_delta[i]);

    // A fresh-velocity second epoch must differ from the accumulated one.
    ParamSet pf = p0;
    for (int e = 1; e <= 2; ++e) {
        std::vector<float> fresh(pf.values.size(), 0.0f);
        run_sgd_epoch(mc, pf, ptrs, cfg, lr_at_round(cfg, 1), nullptr, fresh,
                      rng.split("shuffle", static_cast<std::uint64_t>(e)),
                      SgdContext{1, fd.clients[0].spec.client_id});
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < pf.values.size() && !any_diff; ++i)
        any_diff = pf.values[i] != pm.values[i];
    CHECK(any_diff);
}

TEST_CASE("proximal term pulls the step toward the anchor") {
    const ModelConfig mc = desk_model_config();
    const FederationData fd = tiny_fed(13, 1, 1, 2);
    const SliceSample& s = fd.clients[0].train[0];
    TrainConfig cfg = tiny_cfg(Method::FedProx);
    cfg.prox_mu = 0.5f;

    const ParamSet p0 = build_model(mc, 79);
    ParamSet anchor = p0;
    for (float& v : anchor.values) v += 0.01f;  // anchor away from the start point

    ParamSet pm = p0;
    SegBatch batch = make_batch({&s});
    Tape tape;
    ModelForward fwd = model_forward(mc, pm, batch.images, BnMode::Train, &tape);
    Tensor loss = bce_loss(fwd.prob, batch.masks, &tape);
    GradientStore grads = tape.backward(loss);
    for (std::size_t si = 0; si < pm.segments.size(); ++si) {
        const int id = fwd.leaf_ids[si];
        if (id < 0) continue;
        const ParamSegment& seg = pm.segments[si];
        const std::vector<float>* gp = grads.find(id);
        float* w = pm.values.data() + seg.offset;
        const float* a = anchor.values.data() + seg.offset;
        for (std::size_t c = 0; c < seg.length; ++c) {
            float gc = (*gp)[c];
            gc += cfg.weight_decay * w[c];
            gc += cfg.prox_mu * (w[c] - a[c]);
            w[c] -= 0.01f * gc;
        }
    }

    ParamSet pe = p0;
    std::vector<float> velocity(pe.values.size(), 0.0f);
    run_sgd_epoch(mc, pe, {&s}, cfg, 0.01f, &anchor, velocity, RngStream::from_seed(5),
                  SgdContext{1, 1});
    for (std::size_t i = 0; i < pe.values.size(); ++i) CHECK(pe.values[i] == pm.values[i]);

    ParamSet mismatched = toy_params({0.0f}, {0.0f});
    std::vector<float> vel2(pe.values.size(), 0.0f);
    CHECK_THROWS_AS(run_sgd_epoch(mc, pe, {&s}, cfg, 0.01f, &mismatched, vel2,
                                  RngStream::from_seed(5), SgdContext{1, 1}),
                    UsageError);
}

TEST_CASE("sgd epoch rejects bad inputs") {
    const ModelConfig mc = desk_model_config();
    ParamSet p = build_model(mc, 80);
    std::vector<float> velocity(p.values.size(), 0.0f);
    CHECK_THROWS_AS(run_sgd_epoch(mc, p, {}, tiny_cfg(), 0.01f, nullptr, velocity,
                                  RngStream::from_seed(1), SgdContext{}),
                    UsageError);
    const FederationData fd = tiny_fed(14, 1, 1, 2);
    const SliceSample& s = fd.clients[0].train[0];
    std::vector<float> short_vel(3, 0.0f);
    CHECK_THROWS_AS(run_sgd_epoch(mc, p, {&s}, tiny_cfg(), 0.01f, nullptr, short_vel,
                                  RngStream::from_seed(1), SgdContext{}),
                    UsageError);
}

TEST_CASE("zero local epochs produce an all-zero delta") {
    const ModelConfig mc = desk_model_config();
    const FederationData fd = tiny_fed(15, 1, 4, 2);
    TrainConfig cfg = tiny_cfg();
    cfg.local_epochs = 0;
    const ParamSet p0 = build_model(mc, 81);
    const RoundUpdate u = local_train(p0, mc, fd.clients[0], cfg, DpConfig{}, 1,
                                      RngStream::from_seed(9));
    CHECK(u.n_samples == 4);
    for (float v : u.delta) CHECK(v == 0.0f);
    REQUIRE(u.bn_payload.has_value());
}

TEST_CASE("aggregate averages deltas by sample weight") {
    const ParamSet g = toy_params({0.0f, 0.0f}, {0.0f});

    SUBCASE("equal weights take the plain mean") {
        const ParamSet out = aggregate(
            {make_update(1, {1.0f, 3.0f, 0.0f}, 1), make_update(2, {3.0f, 5.0f, 0.0f}, 1)}, g,
            Method::FedAvg);
        CHECK(out.values[0] == doctest::Approx(2.0));
        CHECK(out.values[1] == doctest::Approx(4.0));
    }
    SUBCASE("weights follow sample counts") {
        const ParamSet out = aggregate(
            {make_update(1, {0.0f, 0.0f, 0.0f}, 1), make_update(2, {4.0f, 8.0f, 0.0f}, 3)}, g,
            Method::FedAvg);
        CHECK(out.values[0] == doctest::Approx(3.0));
        CHECK(out.values[1] == doctest::Approx(6.0));
    }
    SUBCASE("base model is added back") {
        const ParamSet g2 = toy_params({10.0f, -10.0f}, {1.0f});
        const ParamSet out =
            aggregate({make_update(1, {1.0f, 1.0f, 0.5f}, 2)}, g2, Method::FedAvg);
        CHECK(out.values[0] == doctest::Approx(11.0));
        CHECK(out.values[1] == doctest::Approx(-9.0));
        CHECK(out.values[2] == doctest::Approx(1.5));
    }
    SUBCASE("client order does not change the result") {
        const auto a = aggregate({make_update(2, {0.25f, 0.5f, 0.0f}, 3),
                                  make_update(1, {0.125f, 0.0625f, 0.0f}, 5)},
                                 g, Method::FedAvg);
        const auto b = aggregate({make_update(1, {0.125f, 0.0625f, 0.0f}, 5),
                                  make_update(2, {0.25f, 0.5f, 0.0f}, 3)},
                                 g, Method::FedAvg);
        for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);
    }
    SUBCASE("protocol violations are rejected") {
        CHECK_THROWS_AS(aggregate({}, g, Method::FedAvg), UsageError);
        CHECK_THROWS_AS(aggregate({make_update(1, {1.0f}, 1)}, g, Method::FedAvg),
                        ProtocolError);  // wrong length
        CHECK_THROWS_AS(aggregate({make_update(1, {1.0f, 2.0f, 0.0f}, 1),
                                   make_update(1, {0.0f, 0.0f, 0.0f}, 1)},
                                  g, Method::FedAvg),
                        ProtocolError);  // duplicate id
        CHECK_THROWS_AS(aggregate({make_update(1, {1.0f, 2.0f, 0.0f}, 0)}, g, Method::FedAvg),
                        ProtocolError);  // zero samples
    }
    SUBCASE("FedBN skips the BN tail") {
        const ParamSet g2 = toy_params({1.0f, 2.0f}, {5.0f});
        const ParamSet out = aggregate({make_update(1, {1.0f, 1.0f}, 1)}, g2, Method::FedBn);
        CHECK(out.values[0] == doctest::Approx(2.0));
        CHECK(out.values[1] == doctest::Approx(3.0));
        CHECK(out.values[2] == doctest::Approx(5.0));  // untouched
    }
}

TEST_CASE("fixed-point encoding round-trips exact quarter values") {
    const std::vector<float> vals = {0.5f, 0.25f, -0.75f, 0.0f};
    const auto enc = encode_fixed(vals);
    const auto dec = decode_fixed_sum(enc);
    for (std::size_t i = 0; i < vals.size(); ++i) CHECK(dec[i] == vals[i]);

    CHECK_THROWS_AS(encode_fixed({kFixedPointLimit}), RangeError);
    CHECK_THROWS_AS(encode_fixed({-kFixedPointLimit}), RangeError);
    CHECK_THROWS_AS(encode_fixed({std::numeric_limits<float>::quiet_NaN()}), RangeError);
    CHECK_NOTHROW(encode_fixed({kFixedPointLimit - 1.0f}));
}

TEST_CASE("secure aggregation equals the quantized sum exactly") {
    const RngStream rng = RngStream::from_seed(404);
    const PairwiseSeeds seeds = PairwiseSeeds::derive(rng.split("secagg"), 5);
    CHECK(seeds.at(0, 3) == seeds.at(3, 0));
    CHECK_THROWS_AS(seeds.at(2, 2), UsageError);
    CHECK_THROWS_AS(seeds.at(-1, 0), UsageError);
    CHECK_THROWS_AS(seeds.at(0, 5), UsageError);

    const std::size_t dim = 257;
    std::vector<RoundUpdate> updates;
    RngStream vals = rng.split("vals");
    for (int c = 0; c < 5; ++c) {
        std::vector<float> d(dim);
        for (float& v : d) v = static_cast<float>(vals.next_double() * 2.0 - 1.0);
        updates.push_back(make_update(c + 1, std::move(d), 10));
    }

    const std::vector<float> sum = secure_aggregate(updates, seeds);
    REQUIRE(sum.size() == dim);

    // Oracle 1: the unmasked fixed-point pipeline (masks must cancel exactly).
    std::vector<std::uint64_t> plain(dim, 0);
    for (const auto& u : updates) {
        const auto enc = encode_fixed(u.delta);
        for (std::size_t i = 0; i < dim; ++i) plain[i] += enc[i];
    }
    const std::vector<float> unmasked = decode_fixed_sum(plain);
    for (std::size_t i = 0; i < dim; ++i) CHECK(sum[i] == unmasked[i]);

    // Oracle 2: the f64 float sum, within the quantization budget (5 clients,
    // half an lsb each, plus the final f32 cast).
    for (std::size_t i = 0; i < dim; ++i) {
        double exact = 0.0;
        for (const auto& u : updates) exact += static_cast<double>(u.delta[i]);
        CHECK(std::fabs(static_cast<double>(sum[i]) - exact) <= 5.0 / kFixedPointScale);
    }

    SUBCASE("exact quarters survive untouched") {
        std::vector<RoundUpdate> q = {make_update(1, {0.5f}, 1), make_update(2, {0.25f}, 1)};
        const PairwiseSeeds s2 = PairwiseSeeds::derive(rng.split("two"), 2);
        const auto r = secure_aggregate(q, s2);
        CHECK(r[0] == 0.75f);
    }
    SUBCASE("roster mismatches are protocol errors") {
        CHECK_THROWS_AS(secure_aggregate(updates, PairwiseSeeds::derive(rng.split("x"), 3)),
                        ProtocolError);
        auto bad = updates;
        bad[1].delta.pop_back();
        CHECK_THROWS_AS(secure_aggregate(bad, seeds), ProtocolError);
        CHECK_THROWS_AS(secure_aggregate({}, seeds), UsageError);
        CHECK_THROWS_AS(mask_update(updates[0], 7, seeds), UsageError);
    }
}

TEST_CASE("masking changes every coordinate before the wire") {
    const PairwiseSeeds seeds = PairwiseSeeds::derive(RngStream::from_seed(5), 3);
    const RoundUpdate u = make_update(1, std::vector<float>(64, 0.125f), 4);
    const MaskedUpdate m = mask_update(u, 0, seeds);
    const auto enc = encode_fixed(u.delta);
    int unchanged = 0;
    for (std::size_t i = 0; i < enc.size(); ++i) unchanged += (m.masked_fixed[i] == enc[i]);
    CHECK(unchanged == 0);  // 64 u64 draws all landing on zero is impossible in practice
    CHECK(m.client_id == 1);
    CHECK(m.n_samples == 4);
}

TEST_CASE("FedProx at mu zero reproduces FedAvg bit for bit") {
    const FederationData fd = tiny_fed(21);
    const ModelConfig mc = desk_model_config();
    const TrainConfig avg = tiny_cfg(Method::FedAvg, 5);
    TrainConfig prox = tiny_cfg(Method::FedProx, 5);
    prox.prox_mu = 0.0f;

    const RunResult ra = run_federated(fd, mc, avg, DpConfig{}, 31);
    const RunResult rp = run_federated(fd, mc, prox, DpConfig{}, 31);
    REQUIRE(ra.history.records.size() == 5);
    REQUIRE(rp.history.records.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(ra.history.records[i].dice == rp.history.records[i].dice);
        CHECK(ra.history.records[i].ce == rp.history.records[i].ce);
    }
    REQUIRE(ra.model.values.size() == rp.model.values.size());
    for (std::size_t i = 0; i < ra.model.values.size(); ++i)
        CHECK(ra.model.values[i] == rp.model.values[i]);

    // And a positive mu must actually change the trajectory.
    TrainConfig prox2 = prox;
    prox2.prox_mu = 0.1f;
    const RunResult rq = run_federated(fd, mc, prox2, DpConfig{}, 31);
    bool any_diff = false;
    for (std::size_t i = 0; i < rq.model.values.size() && !any_diff; ++i)
        any_diff = rq.model.values[i] != ra.model.values[i];
    CHECK(any_diff);
}

TEST_CASE("DP with zero noise and infinite clip reproduces FedAvg") {
    const FederationData fd = tiny_fed(22);
    const ModelConfig mc = desk_model_config();
    const TrainConfig avg = tiny_cfg(Method::FedAvg, 3);
    const TrainConfig dp_cfg = tiny_cfg(Method::FedAvgDp, 3);
    DpConfig dp;
    dp.clip_norm = kInf;
    dp.noise_sigma = 0.0f;
    dp.delta = 1e-5;

    const RunResult ra = run_federated(fd, mc, avg, DpConfig{}, 32);
    const RunResult rd = run_federated(fd, mc, dp_cfg, dp, 32);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(ra.history.records[i].dice == rd.history.records[i].dice);
        CHECK(ra.history.records[i].ce == rd.history.records[i].ce);
    }
    for (std::size_t i = 0; i < ra.model.values.size(); ++i)
        CHECK(ra.model.values[i] == rd.model.values[i]);
    REQUIRE(rd.history.epsilon.has_value());
    CHECK(std::isinf(*rd.history.epsilon));
    CHECK_FALSE(ra.history.epsilon.has_value());

    // Real DP noise must perturb the run.
    DpConfig dp2;
    dp2.clip_norm = 1.0f;
    dp2.noise_sigma = 0.5f;
    const RunResult rn = run_federated(fd, mc, dp_cfg, dp2, 32);
    CHECK(rn.history.records.back().dice != ra.history.records.back().dice);
    REQUIRE(rn.history.epsilon.has_value());
    CHECK(std::isfinite(*rn.history.epsilon));
}

TEST_CASE("federated runs are deterministic and thread invariant") {
    const FederationData fd = tiny_fed(23, 3, 10, 9);
    const ModelConfig mc = desk_model_config();
    const TrainConfig cfg = tiny_cfg(Method::FedAvg, 3);

    RunHooks h1;
    h1.threads = 1;
    RunHooks h4;
    h4.threads = 4;
    const RunResult a = run_federated(fd, mc, cfg, DpConfig{}, 7, h1);
    const RunResult b = run_federated(fd, mc, cfg, DpConfig{}, 7, h4);
    const RunResult c = run_federated(fd, mc, cfg, DpConfig{}, 8, h1);

    for (std::size_t i = 0; i < a.history.records.size(); ++i) {
        CHECK(a.history.records[i].dice == b.history.records[i].dice);
        CHECK(a.history.records[i].ce == b.history.records[i].ce);
    }
    for (std::size_t i = 0; i < a.model.values.size(); ++i)
        CHECK(a.model.values[i] == b.model.values[i]);
    CHECK(dice_series(a.history) != dice_series(c.history));
}

TEST_CASE("round loop edge cases and probe cadence") {
    const FederationData fd = tiny_fed(24);
    const ModelConfig mc = desk_model_config();

    SUBCASE("zero rounds returns the untouched init") {
        const TrainConfig cfg = tiny_cfg(Method::FedAvg, 0);
        const RunResult r = run_federated(fd, mc, cfg, DpConfig{}, 9);
        CHECK(r.history.records.empty());
        const ParamSet init =
            build_model(mc, RngStream::from_seed(9).split("model_init").key());
        REQUIRE(r.model.values.size() == init.values.size());
        for (std::size_t i = 0; i < init.values.size(); ++i)
            CHECK(r.model.values[i] == init.values[i]);
    }
    SUBCASE("probe fires on the cadence and always on the last round") {
        TrainConfig cfg = tiny_cfg(Method::FedAvg, 3);
        RunHooks hooks;
        int calls = 0;
        hooks.mia_probe = [&](const Predictor&) {
            ++calls;
            return 0.5;
        };
        hooks.mia_cadence = 2;
        const RunResult r = run_federated(fd, mc, cfg, DpConfig{}, 10, hooks);
        CHECK(calls == 2);  // rounds 2 and 3
        CHECK_FALSE(r.history.records[0].mia_auc.has_value());
        CHECK(r.history.records[1].mia_auc.has_value());
        CHECK(r.history.records[2].mia_auc.has_value());
    }
    SUBCASE("non-federated methods are rejected") {
        CHECK_THROWS_AS(
            run_federated(fd, mc, tiny_cfg(Method::Centralized, 1), DpConfig{}, 1),
            ConfigError);
        CHECK_THROWS_AS(run_federated(fd, mc, tiny_cfg(Method::LocalOnly, 1), DpConfig{}, 1),
                        ConfigError);
    }
    SUBCASE("empty federation pieces are data errors") {
        FederationData empty;
        CHECK_THROWS_AS(run_federated(empty, mc, tiny_cfg(), DpConfig{}, 1), DataError);
        FederationData no_test = fd;
        no_test.test.clear();
        CHECK_THROWS_AS(run_federated(no_test, mc, tiny_cfg(), DpConfig{}, 1), DataError);
    }
}

TEST_CASE("FedBN keeps BN local and estimates eval stats from test batches") {
    const FederationData fd = tiny_fed(25);
    const ModelConfig mc = desk_model_config();
    TrainConfig cfg = tiny_cfg(Method::FedBn, 2);

    const ParamSet init = build_model(mc, RngStream::from_seed(41).split("model_init").key());

    // Client-side: FedBN deltas span only non-BN segments and omit the payload.
    const RoundUpdate u =
        local_train(init, mc, fd.clients[0], cfg, DpConfig{}, 1, RngStream::from_seed(3));
    CHECK(u.delta.size() == aggregation_length(init, Method::FedBn));
    CHECK_FALSE(u.bn_payload.has_value());
    const RoundUpdate ua = local_train(init, mc, fd.clients[0], tiny_cfg(Method::FedAvg, 2),
                                       DpConfig{}, 1, RngStream::from_seed(3));
    CHECK(ua.delta.size() == init.values.size());
    REQUIRE(ua.bn_payload.has_value());

    // BN state round-trips through the carried ClientBnState.
    ClientBnState state;
    local_train(init, mc, fd.clients[0], cfg, DpConfig{}, 1, RngStream::from_seed(3), &state);
    CHECK(state.initialized);
    const auto bn_segs = [&] {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < init.segments.size(); ++i)
            if (is_bn_kind(init.segments[i].kind)) out.push_back(i);
        return out;
    }();
    std::size_t bn_len = 0;
    for (std::size_t si : bn_segs) bn_len += init.segments[si].length;
    CHECK(state.values.size() == bn_len);

    // Eval-side: fedbn_eval_params refreshes BN stats, leaves weights alone.
    const auto test_ptrs = sample_pointers(fd.test);
    const ParamSet ev = fedbn_eval_params(mc, init, test_ptrs, 4);
    bool stats_changed = false;
    for (std::size_t si : bn_segs) {
        const auto& s = init.segments[si];
        if (s.kind != SegmentKind::BnRunningMean && s.kind != SegmentKind::BnRunningVar) continue;
        for (std::size_t c = 0; c < s.length; ++c)
            if (ev.values[s.offset + c] != init.values[s.offset + c]) stats_changed = true;
    }
    CHECK(stats_changed);
    for (std::size_t si = 0; si < init.segments.size(); ++si) {
        const auto& s = init.segments[si];
        if (is_bn_kind(s.kind)) continue;
        for (std::size_t c = 0; c < s.length; ++c)
            CHECK(ev.values[s.offset + c] == init.values[s.offset + c]);
    }
    CHECK_THROWS_AS(fedbn_eval_params(mc, init, test_ptrs, 0), ConfigError);

    // Full run: the global model's BN segments never leave their init values.
    const RunResult r = run_federated(fd, mc, cfg, DpConfig{}, 41);
    REQUIRE(r.history.records.size() == 2);
    for (const auto& rec : r.history.records) CHECK(std::isfinite(rec.dice));
}

TEST_CASE("centralized training pools every client and evaluates per round block") {
    const FederationData fd = tiny_fed(26);
    const ModelConfig mc = desk_model_config();
    TrainConfig cfg = tiny_cfg(Method::Centralized, 2);

    const RunResult r = train_centralized(fd, mc, cfg, 55);
    REQUIRE(r.history.records.size() == 2);  // one record per 5-epoch block
    CHECK(r.history.records[0].round == 1);
    CHECK(r.history.records[1].round == 2);
    CHECK(r.history.method == Method::Centralized);
    for (const auto& rec : r.history.records) {
        CHECK(std::isfinite(rec.dice));
        CHECK(rec.dice >= 0.0);
        CHECK(rec.dice <= 1.0);
        CHECK(rec.wall_ms > 0.0);
    }

    const RunResult r2 = train_centralized(fd, mc, cfg, 55);
    for (std::size_t i = 0; i < r.model.values.size(); ++i)
        CHECK(r.model.values[i] == r2.model.values[i]);
}

TEST_CASE("local-only training isolates each client") {
    const FederationData fd = tiny_fed(27, 2, 8, 8);
    const ModelConfig mc = desk_model_config();
    TrainConfig cfg = tiny_cfg(Method::LocalOnly, 2);

    const RunResult r = train_local_only(fd, mc, cfg, 66);
    REQUIRE(r.history.records.size() == 2);
    REQUIRE(r.history.per_client_final_dice.size() == 2);
    for (double d : r.history.per_client_final_dice) {
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
    }
    // History rows carry the across-client mean of the per-round evals.
    const double mean_final =
        (r.history.per_client_final_dice[0] + r.history.per_client_final_dice[1]) / 2.0;
    CHECK(r.history.records.back().dice == doctest::Approx(mean_final).epsilon(1e-12));

    // Single-client federation: the mean collapses onto that client's own dice.
    const FederationData solo = tiny_fed(28, 1, 8, 6);
    const RunResult rs = train_local_only(solo, mc, cfg, 67);
    REQUIRE(rs.history.per_client_final_dice.size() == 1);
    CHECK(rs.history.records.back().dice ==
          doctest::Approx(rs.history.per_client_final_dice[0]).epsilon(1e-12));
}

TEST_CASE("shadow training is deterministic and actually trains") {
    const FederationData fd = tiny_fed(29);
    const ModelConfig mc = desk_model_config();
    TrainConfig cfg = tiny_cfg(Method::FedAvg, 2);

    const RngStream rng = RngStream::from_seed(88).split("mia").split("shadow");
    const ParamSet a = train_shadow(fd, mc, cfg, rng);
    const ParamSet b = train_shadow(fd, mc, cfg, rng);
    REQUIRE(a.values.size() == b.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);

    const ParamSet init = build_model(mc, rng.split("model_init").key());
    bool moved = false;
    for (std::size_t i = 0; i < a.values.size() && !moved; ++i)
        moved = a.values[i] != init.values[i];
    CHECK(moved);

    FederationData no_shadow = fd;
    no_shadow.shadow_members.clear();
    CHECK_THROWS_AS(train_shadow(no_shadow, mc, cfg, rng), DataError);
}

TEST_CASE("sampling helpers") {
    const FederationData fd = tiny_fed(30, 2, 5, 4);
    const auto pool = pooled_train(fd);
    CHECK(pool.size() == 10);
    CHECK(pool[0]->meta.client_id == 1);
    CHECK(pool[9]->meta.client_id == 2);

    const auto picked = sample_without_replacement(pool, 6, RngStream::from_seed(3));
    CHECK(picked.size() == 6);
    for (std::size_t i = 0; i < picked.size(); ++i)
        for (std::size_t j = i + 1; j < picked.size(); ++j) CHECK(picked[i] != picked[j]);
    const auto again = sample_without_replacement(pool, 6, RngStream::from_seed(3));
    for (std::size_t i = 0; i < picked.size(); ++i) CHECK(picked[i] == again[i]);

    CHECK_THROWS_AS(sample_without_replacement(pool, 11, RngStream::from_seed(3)), UsageError);
    CHECK_THROWS_AS(sample_without_replacement(pool, -1, RngStream::from_seed(3)), UsageError);
    CHECK(sample_without_replacement(pool, 0, RngStream::from_seed(3)).empty());
}
