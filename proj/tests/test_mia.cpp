#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <vector>

#include "fedseg/common.hpp"
#include "fedseg/data.hpp"
#include "fedseg/fl.hpp"
#include "fedseg/mia.hpp"
#include "fedseg/model.hpp"
#include "fedseg/rng.hpp"

using namespace fedseg;

namespace {

constexpr double kLn2 = 0.6931471805599453;

SliceSample tiny_sample(std::uint64_t seed = 7) {
    ClientSpec spec;
    spec.client_id = 1;
    return generate_slice(RngStream::from_seed(seed), spec, 16, 16);
}

Tensor const_prob(const SliceSample& s, float p) {
    return Tensor::full({1, 1, s.h, s.w}, p);
}

// Probability map that echoes the mask at confidence 1 - eps.
Tensor oracle_prob(const SliceSample& s, float eps = 1e-6f) {
    Tensor t = Tensor::zeros({1, 1, s.h, s.w});
    float* v = t.mutable_data();
    for (std::size_t i = 0; i < s.mask.size(); ++i) v[i] = s.mask[i] ? 1.0f - eps : eps;
    return t;
}

AttackFeatures feat(double loss, double entropy, double conf, double dice) {
    AttackFeatures f;
    f.loss = loss;
    f.entropy = entropy;
    f.confidence = conf;
    f.dice = dice;
    return f;
}

// Gaussian-ish feature clouds with a mean shift on the loss axis.
void fill_clouds(std::vector<AttackFeatures>& members, std::vector<AttackFeatures>& nonmembers,
                 int n, double gap, std::uint64_t seed) {
    RngStream rng = RngStream::from_seed(seed);
    auto noise = [&] { return rng.next_double() - 0.5; };
    for (int i = 0; i < n; ++i) {
        members.push_back(
            feat(0.1 + 0.02 * noise(), 0.2 + 0.02 * noise(), 0.9 + 0.02 * noise(), 0.8));
        nonmembers.push_back(feat(0.1 + gap + 0.02 * noise(), 0.2 + 0.02 * noise(),
                                  0.9 + 0.02 * noise(), 0.8));
    }
}

}  // namespace

TEST_CASE("feature hand cases on constant and oracle maps") {
    const SliceSample s = tiny_sample();

    SUBCASE("uniform half probability") {
        const AttackFeatures f = extract_features(const_prob(s, 0.5f), s);
        CHECK(f.entropy == doctest::Approx(kLn2).epsilon(1e-9));
        CHECK(f.confidence == doctest::Approx(0.5).epsilon(1e-9));
        CHECK(f.loss == doctest::Approx(kLn2).epsilon(1e-9));
        // p = 0.5 binarizes to all-foreground at the inclusive threshold.
        double mask_px = 0;
        for (auto m : s.mask) mask_px += m;
        const double npx = static_cast<double>(s.mask.size());
        CHECK(f.dice == doctest::Approx(2.0 * mask_px / (npx + mask_px)).epsilon(1e-12));
    }
    SUBCASE("oracle prediction") {
        const AttackFeatures f = extract_features(oracle_prob(s), s);
        CHECK(f.dice == doctest::Approx(1.0));
        CHECK(f.loss < 1e-5);
        CHECK(f.entropy < 1e-4);
        CHECK(f.confidence == doctest::Approx(1.0).epsilon(1e-5));
    }
    SUBCASE("inverted oracle tanks dice and loss") {
        Tensor inv = oracle_prob(s);
        float* v = inv.mutable_data();
        for (std::size_t i = 0; i < s.mask.size(); ++i) v[i] = 1.0f - v[i];
        const AttackFeatures f = extract_features(inv, s);
        CHECK(f.dice == doctest::Approx(0.0));
        CHECK(f.loss > 10.0);
    }
    SUBCASE("shape mismatch is rejected") {
        CHECK_THROWS_AS(extract_features(Tensor::zeros({1, 1, 8, 8}), s), UsageError);
    }
}

TEST_CASE("feature extraction is deterministic and batch invariant") {
    const ModelConfig mc = desk_model_config();
    const ParamSet params = build_model(mc, 42);
    std::vector<SliceSample> samples;
    for (int i = 0; i < 9; ++i) samples.push_back(tiny_sample(100 + i));
    std::vector<const SliceSample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);

    const Predictor pred = make_predictor(mc, params);
    const auto a = extract_features_batch(pred, ptrs, 4, 1);
    const auto b = extract_features_batch(pred, ptrs, 9, 4);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].loss == b[i].loss);
        CHECK(a[i].entropy == b[i].entropy);
        CHECK(a[i].confidence == b[i].confidence);
        CHECK(a[i].dice == b[i].dice);
        const AttackFeatures one = extract_features(mc, params, samples[i]);
        CHECK(a[i].loss == doctest::Approx(one.loss).epsilon(1e-12));
        CHECK(a[i].dice == one.dice);
    }
    CHECK_THROWS_AS(extract_features_batch(pred, ptrs, 0, 1), ConfigError);
    CHECK(extract_features_batch(pred, {}, 4, 1).empty());
}

TEST_CASE("AUC hand cases") {
    CHECK(attack_auc({0.9, 0.8}, {0.1, 0.2}) == doctest::Approx(1.0));
    CHECK(attack_auc({0.1, 0.2}, {0.9, 0.8}) == doctest::Approx(0.0));
    CHECK(attack_auc({0.5, 0.5}, {0.5, 0.5}) == doctest::Approx(0.5));  // all ties
    CHECK(attack_auc({0.9, 0.4}, {0.6, 0.1}) == doctest::Approx(0.75));  // 3 of 4 pairs
    CHECK(attack_auc({0.7}, {0.7}) == doctest::Approx(0.5));

    SUBCASE("symmetry") {
        const std::vector<double> m = {0.9, 0.55, 0.3, 0.8};
        const std::vector<double> n = {0.6, 0.2, 0.7};
        CHECK(attack_auc(m, n) == doctest::Approx(1.0 - attack_auc(n, m)).epsilon(1e-12));
    }
    SUBCASE("straddling swap moves AUC by exactly one pair") {
        std::vector<double> m = {0.8, 0.4};
        std::vector<double> n = {0.6, 0.1};
        const double before = attack_auc(m, n);
        std::swap(m[1], n[0]);  // 0.4 and 0.6 straddle each other
        const double after = attack_auc(m, n);
        CHECK(after - before == doctest::Approx(1.0 / 4.0).epsilon(1e-12));
    }
    SUBCASE("empty classes are usage errors") {
        CHECK_THROWS_AS(attack_auc({}, {0.5}), UsageError);
        CHECK_THROWS_AS(attack_auc({0.5}, {}), UsageError);
    }
}

TEST_CASE("attack training separates separable clouds") {
    std::vector<AttackFeatures> members, nonmembers;
    fill_clouds(members, nonmembers, 200, 0.2, 31);  // gap 10x the noise
    const AttackModel a = train_attack(members, nonmembers);

    std::vector<double> ms, ns;
    for (const auto& f : members) ms.push_back(a.score(f));
    for (const auto& f : nonmembers) ns.push_back(a.score(f));
    CHECK(attack_auc(ms, ns) >= 0.99);
    CHECK(a.weights[0] < 0.0);  // members sit at lower loss
    CHECK(a.iterations == 500);
    for (double s : ms) {
        CHECK(s > 0.0);
        CHECK(s < 1.0);
    }
}

TEST_CASE("attack training on permuted labels stays near chance") {
    std::vector<AttackFeatures> members, nonmembers;
    fill_clouds(members, nonmembers, 150, 0.0, 32);  // identical distributions
    const AttackModel a = train_attack(members, nonmembers);
    std::vector<double> ms, ns;
    for (const auto& f : members) ms.push_back(a.score(f));
    for (const auto& f : nonmembers) ns.push_back(a.score(f));
    const double auc = attack_auc(ms, ns);
    CHECK(auc >= 0.4);
    CHECK(auc <= 0.65);  // in-sample fit on pure noise stays weak
}

TEST_CASE("zero-variance features are frozen out") {
    std::vector<AttackFeatures> members, nonmembers;
    for (int i = 0; i < 50; ++i) {
        // dice identical everywhere; loss separates.
        members.push_back(feat(0.05 + 1e-4 * i, 0.2, 0.9, 0.75));
        nonmembers.push_back(feat(0.15 + 1e-4 * i, 0.2, 0.9, 0.75));
    }
    const AttackModel a = train_attack(members, nonmembers);
    CHECK(a.feat_std[3] == 0.0);
    CHECK(a.weights[3] == 0.0);
    CHECK(a.feat_std[1] == 0.0);
    CHECK(a.weights[1] == 0.0);
    CHECK(a.weights[0] != 0.0);

    // Scoring still works and separates on the live feature.
    CHECK(a.score(members[0]) > a.score(nonmembers[0]));

    SUBCASE("degenerate inputs are usage errors") {
        CHECK_THROWS_AS(train_attack({}, nonmembers), UsageError);
        CHECK_THROWS_AS(train_attack(members, {}), UsageError);
        CHECK_THROWS_AS(train_attack(members, nonmembers, -1), ConfigError);
        CHECK_THROWS_AS(train_attack(members, nonmembers, 100, 0.0), ConfigError);
    }
    SUBCASE("zero iterations leave an indifferent scorer") {
        const AttackModel z = train_attack(members, nonmembers, 0);
        CHECK(z.score(members[0]) == doctest::Approx(0.5));
        CHECK(z.score(nonmembers[0]) == doctest::Approx(0.5));
    }
}

TEST_CASE("attack model scoring is monotone in the member direction") {
    std::vector<AttackFeatures> members, nonmembers;
    fill_clouds(members, nonmembers, 100, 0.1, 33);
    const AttackModel a = train_attack(members, nonmembers);
    // Moving a feature vector along -loss (the member direction) raises the score.
    AttackFeatures f = nonmembers[0];
    const double s0 = a.score(f);
    f.loss -= 0.05;
    CHECK(a.score(f) > s0);
}

TEST_CASE("end-to-end attack pipeline on a tiny federation") {
    // 16x16 federation keeps shadow training fast while exercising the full path.
    FederationData fd;
    const RngStream root = RngStream::from_seed(90);
    for (int c = 1; c <= 2; ++c) {
        ClientData cd;
        cd.spec.client_id = c;
        cd.spec.n_train = 10;
        for (int i = 0; i < 10; ++i)
            cd.train.push_back(generate_slice(
                root.split("train", static_cast<std::uint64_t>(c * 100 + i)), cd.spec, 16, 16));
        fd.clients.push_back(std::move(cd));
    }
    ClientSpec tspec;
    tspec.client_id = 1;
    for (int i = 0; i < 12; ++i)
        fd.test.push_back(
            generate_slice(root.split("test", static_cast<std::uint64_t>(i)), tspec, 16, 16));
    for (int i = 0; i < 10; ++i) {
        fd.shadow_members.push_back(
            generate_slice(root.split("sm", static_cast<std::uint64_t>(i)), tspec, 16, 16));
        fd.shadow_nonmembers.push_back(
            generate_slice(root.split("sn", static_cast<std::uint64_t>(i)), tspec, 16, 16));
    }

    // Shadow pools must be disjoint by construction (distinct generator streams).
    for (const auto& m : fd.shadow_members)
        for (const auto& n : fd.shadow_nonmembers) CHECK(m.meta.seed_used != n.meta.seed_used);

    const ModelConfig mc = desk_model_config();
    TrainConfig cfg;
    cfg.rounds = 3;
    cfg.batch_size = 8;

    const RngStream mia_rng = RngStream::from_seed(90).split("mia");
    const ParamSet shadow = train_shadow(fd, mc, cfg, mia_rng.split("shadow"));
    const ParamSet shadow2 = train_shadow(fd, mc, cfg, mia_rng.split("shadow"));
    for (std::size_t i = 0; i < shadow.values.size(); ++i)
        CHECK(shadow.values[i] == shadow2.values[i]);

    const Predictor spred = make_predictor(mc, shadow);
    const auto sm = extract_features_batch(spred, sample_pointers(fd.shadow_members), 8, 0);
    const auto sn = extract_features_batch(spred, sample_pointers(fd.shadow_nonmembers), 8, 0);
    const AttackModel attack = train_attack(sm, sn);

    // Untrained target: no membership signal to find.
    const ParamSet untrained = build_model(mc, 555);
    const Predictor upred = make_predictor(mc, untrained);
    const auto members = pooled_train(fd);
    const auto nonmembers = sample_pointers(fd.test);
    const double auc0 = attack_auc(attack, upred, members, nonmembers);
    CHECK(auc0 >= 0.25);
    CHECK(auc0 <= 0.75);  // wide band: tiny pools are noisy

    // The overload agrees with manual scoring.
    const auto fm = extract_features_batch(upred, members, 8, 0);
    const auto fn = extract_features_batch(upred, nonmembers, 8, 0);
    std::vector<double> ms, ns;
    for (const auto& f : fm) ms.push_back(attack.score(f));
    for (const auto& f : fn) ns.push_back(attack.score(f));
    CHECK(auc0 == doctest::Approx(attack_auc(ms, ns)).epsilon(1e-12));
}

TEST_CASE("shadow overfit gap is positive in the small-sample regime") {
    // 16 shadow members, long training: the shadow must fit its members harder
    // than the unseen nonmembers, giving the attack a signed signal to learn.
    FederationData fd;
    const RngStream root = RngStream::from_seed(91);
    ClientSpec spec;
    spec.client_id = 1;
    ClientData cd;
    cd.spec = spec;
    for (int i = 0; i < 8; ++i)
        cd.train.push_back(
            generate_slice(root.split("train", static_cast<std::uint64_t>(i)), spec, 16, 16));
    fd.clients.push_back(std::move(cd));
    for (int i = 0; i < 8; ++i)
        fd.test.push_back(
            generate_slice(root.split("test", static_cast<std::uint64_t>(i)), spec, 16, 16));
    for (int i = 0; i < 16; ++i) {
        fd.shadow_members.push_back(
            generate_slice(root.split("sm", static_cast<std::uint64_t>(i)), spec, 16, 16));
        fd.shadow_nonmembers.push_back(
            generate_slice(root.split("sn", static_cast<std::uint64_t>(i)), spec, 16, 16));
    }

    const ModelConfig mc = desk_model_config();
    TrainConfig cfg;
    cfg.rounds = 40;  // 40 epochs over 16 samples
    cfg.batch_size = 8;
    cfg.lr_decay_at_round = 30;

    const ParamSet shadow = train_shadow(fd, mc, cfg, RngStream::from_seed(91).split("shadow"));
    const Predictor spred = make_predictor(mc, shadow);
    const auto sm = extract_features_batch(spred, sample_pointers(fd.shadow_members), 8, 0);
    const auto sn = extract_features_batch(spred, sample_pointers(fd.shadow_nonmembers), 8, 0);
    double lm = 0.0, ln = 0.0;
    for (const auto& f : sm) lm += f.loss;
    for (const auto& f : sn) ln += f.loss;
    CHECK(lm / sm.size() < ln / sn.size());
}
