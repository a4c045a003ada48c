#include "fedseg/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "fedseg/binio.hpp"
#include "fedseg/common.hpp"
#include "fedseg/mia.hpp"

namespace fedseg {

namespace {

namespace fs = std::filesystem;

std::string fnum(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.8g", v);
    return buf;
}

std::string resolve_manifest_path(const std::string& data_path) {
    if (data_path.size() >= 4 && data_path.substr(data_path.size() - 4) == ".txt")
        return data_path;
    return (fs::path(data_path) / "manifest.txt").string();
}

}  // namespace

int scaled_base_channels(Scale scale) { return scale == Scale::Desk ? 8 : 52; }
int scaled_rounds(Scale scale) { return scale == Scale::Desk ? 25 : 100; }
int scaled_decay_round(Scale scale) { return scale == Scale::Desk ? 18 : 70; }
int scaled_mia_count(Scale scale) { return scale == Scale::Desk ? 100 : 500; }

ExperimentConfig resolve_config(ExperimentConfig cfg) {
    if (cfg.base_channels < 0) cfg.base_channels = scaled_base_channels(cfg.scale);
    if (cfg.train.rounds < 0) cfg.train.rounds = scaled_rounds(cfg.scale);
    if (cfg.train.lr_decay_at_round < 0) cfg.train.lr_decay_at_round = scaled_decay_round(cfg.scale);
    if (cfg.mia_members < 0) cfg.mia_members = scaled_mia_count(cfg.scale);
    if (cfg.mia_nonmembers < 0) cfg.mia_nonmembers = scaled_mia_count(cfg.scale);

    if (cfg.seeds.empty()) throw ConfigError("seeds must be non-empty");
    std::set<std::uint64_t> uniq(cfg.seeds.begin(), cfg.seeds.end());
    if (uniq.size() != cfg.seeds.size()) throw ConfigError("seeds must be distinct");
    if (cfg.methods.empty()) throw ConfigError("methods must be non-empty");
    if (cfg.mia_cadence < 1) throw ConfigError("mia_cadence must be >= 1");
    if (cfg.eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
    if (cfg.base_channels < 2 || cfg.base_channels % 2 != 0)
        throw ConfigError("base_channels must be even and >= 2");
    validate_train_config(cfg.train);
    return cfg;
}

TrainConfig train_for(const ExperimentConfig& cfg, Method method) {
    TrainConfig t = cfg.train;
    t.method = method;
    if (method != Method::FedProx) t.prox_mu = 0.0f;
    return t;
}

namespace {

std::vector<std::pair<std::string, std::string>> config_echo(const ExperimentConfig& cfg,
                                                             const TrainConfig& t,
                                                             const ModelConfig& mc) {
    std::vector<std::pair<std::string, std::string>> e;
    e.emplace_back("scale", scale_name(cfg.scale));
    e.emplace_back("data_seed", std::to_string(cfg.data_seed));
    e.emplace_back("base_channels", std::to_string(mc.base_channels));
    e.emplace_back("in_channels", std::to_string(mc.in_channels));
    e.emplace_back("out_channels", std::to_string(mc.out_channels));
    e.emplace_back("lr", fnum(t.lr));
    e.emplace_back("lr_decay_factor", fnum(t.lr_decay_factor));
    e.emplace_back("lr_decay_at_round", std::to_string(t.lr_decay_at_round));
    e.emplace_back("momentum", fnum(t.momentum));
    e.emplace_back("weight_decay", fnum(t.weight_decay));
    e.emplace_back("batch_size", std::to_string(t.batch_size));
    e.emplace_back("local_epochs", std::to_string(t.local_epochs));
    e.emplace_back("rounds", std::to_string(t.rounds));
    e.emplace_back("prox_mu", fnum(t.prox_mu));
    e.emplace_back("bn_reset", t.bn_reset ? "true" : "false");
    e.emplace_back("clip_norm", fnum(cfg.dp.clip_norm));
    e.emplace_back("noise_sigma", fnum(cfg.dp.noise_sigma));
    e.emplace_back("delta", fnum(cfg.dp.delta));
    e.emplace_back("track_mia", cfg.track_mia ? "true" : "false");
    e.emplace_back("mia_cadence", std::to_string(cfg.mia_cadence));
    e.emplace_back("mia_members", std::to_string(cfg.mia_members));
    e.emplace_back("mia_nonmembers", std::to_string(cfg.mia_nonmembers));
    e.emplace_back("eval_batch", std::to_string(cfg.eval_batch));
    return e;
}

void append_attack_echo(std::vector<std::pair<std::string, std::string>>& echo,
                        const AttackModel& a) {
    echo.emplace_back("attack_iterations", std::to_string(a.iterations));
    echo.emplace_back("attack_w_loss", fnum(a.weights[0]));
    echo.emplace_back("attack_w_entropy", fnum(a.weights[1]));
    echo.emplace_back("attack_w_confidence", fnum(a.weights[2]));
    echo.emplace_back("attack_w_dice", fnum(a.weights[3]));
    echo.emplace_back("attack_bias", fnum(a.bias));
}

}  // namespace

SeedAttack derive_seed_attack(const FederationData& data, const ModelConfig& mc,
                              const TrainConfig& shadow_cfg, std::uint64_t seed, int n_members,
                              int n_nonmembers, int eval_batch, int threads) {
    const RngStream mia_rng = RngStream::from_seed(seed).split("mia");
    TrainConfig sc = shadow_cfg;
    sc.method = Method::FedAvg;
    sc.prox_mu = 0.0f;
    const ParamSet shadow = train_shadow(data, mc, sc, mia_rng.split("shadow"), threads);
    const Predictor shadow_pred = make_predictor(mc, shadow);

    const std::vector<AttackFeatures> member_feats = extract_features_batch(
        shadow_pred, sample_pointers(data.shadow_members), eval_batch, threads);
    const std::vector<AttackFeatures> nonmember_feats = extract_features_batch(
        shadow_pred, sample_pointers(data.shadow_nonmembers), eval_batch, threads);

    SeedAttack sa;
    sa.attack = train_attack(member_feats, nonmember_feats);
    sa.attack.shadow_seed = seed;
    sa.members =
        sample_without_replacement(pooled_train(data), n_members, mia_rng.split("members"));
    sa.nonmembers = sample_without_replacement(sample_pointers(data.test), n_nonmembers,
                                               mia_rng.split("nonmembers"));
    return sa;
}

ExperimentOutput run_experiments(const ExperimentConfig& raw) {
    const ExperimentConfig cfg = resolve_config(raw);

    FederationData data;
    if (cfg.data_path.empty()) {
        data = build_federation(cfg.data_seed, cfg.scale, cfg.threads);
    } else {
        data = load_federation(resolve_manifest_path(cfg.data_path));
        if (data.manifest.scale != scale_name(cfg.scale))
            throw ConfigError("dataset scale '" + data.manifest.scale +
                              "' does not match the configured scale '" +
                              scale_name(cfg.scale) + "'");
    }

    ModelConfig mc;
    mc.base_channels = cfg.base_channels;

    fs::create_directories(cfg.out_dir);

    ExperimentOutput out;
    std::ostringstream index;

    for (std::uint64_t seed : cfg.seeds) {
        SeedAttack sa;
        if (cfg.track_mia)
            sa = derive_seed_attack(data, mc, cfg.train, seed, cfg.mia_members,
                                    cfg.mia_nonmembers, cfg.eval_batch, cfg.threads);

        for (Method m : cfg.methods) {
            const TrainConfig t = train_for(cfg, m);
            RunHooks hooks;
            hooks.eval_batch = cfg.eval_batch;
            hooks.threads = cfg.threads;
            hooks.mia_cadence = cfg.mia_cadence;
            if (cfg.track_mia && m != Method::LocalOnly) {
                const AttackModel attack = sa.attack;
                const std::vector<const SliceSample*> members = sa.members;
                const std::vector<const SliceSample*> nonmembers = sa.nonmembers;
                const int batch = cfg.eval_batch;
                const int threads = cfg.threads;
                hooks.mia_probe = [attack, members, nonmembers, batch,
                                   threads](const Predictor& p) {
                    return attack_auc(attack, p, members, nonmembers, batch, threads);
                };
            }

            RunResult res;
            switch (m) {
                case Method::Centralized:
                    res = train_centralized(data, mc, t, seed, hooks);
                    break;
                case Method::LocalOnly:
                    res = train_local_only(data, mc, t, seed, hooks);
                    break;
                default:
                    res = run_federated(data, mc, t, cfg.dp, seed, hooks);
                    break;
            }

            const std::string stem = method_name(m) + "_seed" + std::to_string(seed);
            RunArtifacts art;
            art.method = m;
            art.seed = seed;
            art.csv_path = (fs::path(cfg.out_dir) / (stem + ".csv")).string();
            art.summary_path = (fs::path(cfg.out_dir) / (stem + "_summary.txt")).string();
            art.checkpoint_path = (fs::path(cfg.out_dir) / (stem + ".fobp")).string();

            write_history_csv(res.history, art.csv_path);
            std::vector<std::pair<std::string, std::string>> echo = config_echo(cfg, t, mc);
            if (cfg.track_mia && m != Method::LocalOnly) append_attack_echo(echo, sa.attack);
            write_summary(res.history, echo, art.summary_path);
            save_checkpoint(res.model, art.checkpoint_path);

            index << method_name(m) << " " << seed << " " << stem << ".csv " << stem
                  << "_summary.txt " << stem << ".fobp\n";
            art.history = std::move(res.history);
            out.runs.push_back(std::move(art));
        }
    }

    // Method-major ordering in the index and artifact list so reports follow
    // the configured method order.
    std::stable_sort(out.runs.begin(), out.runs.end(),
                     [&](const RunArtifacts& a, const RunArtifacts& b) {
                         const auto rank = [&](Method m) {
                             return std::find(cfg.methods.begin(), cfg.methods.end(), m) -
                                    cfg.methods.begin();
                         };
                         return rank(a.method) < rank(b.method);
                     });
    std::ostringstream index_sorted;
    for (const RunArtifacts& art : out.runs) {
        const std::string stem = method_name(art.method) + "_seed" + std::to_string(art.seed);
        index_sorted << method_name(art.method) << " " << art.seed << " " << stem << ".csv "
                     << stem << "_summary.txt " << stem << ".fobp\n";
    }
    out.index_path = (fs::path(cfg.out_dir) / "runs_index.txt").string();
    binio::write_file(out.index_path, index_sorted.str());
    return out;
}

ReportPaths write_report(const std::string& runs_dir, const std::string& out_dir) {
    const fs::path runs(runs_dir);
    const std::string index_path = (runs / "runs_index.txt").string();
    std::istringstream index(binio::read_file(index_path));

    struct Row {
        Method method;
        std::uint64_t seed;
        ExperimentHistory history;
    };
    std::vector<Row> rows;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string method_s, csv, summary, ckpt;
        std::uint64_t seed = 0;
        if (!(ls >> method_s >> seed >> csv >> summary >> ckpt))
            throw FormatError("malformed runs_index line: " + line, 0);
        Row r;
        r.method = parse_method(method_s);
        r.seed = seed;
        r.history = read_history_csv((runs / csv).string());
        r.history.method = r.method;
        r.history.seed = seed;
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw DataError("runs index lists no runs: " + index_path);

    // Group by method, preserving first-appearance order.
    std::vector<Method> order;
    for (const Row& r : rows)
        if (std::find(order.begin(), order.end(), r.method) == order.end())
            order.push_back(r.method);

    fs::create_directories(out_dir);
    ReportPaths paths;
    paths.table = (fs::path(out_dir) / "table.txt").string();
    paths.dice_svg = (fs::path(out_dir) / "dice_curves.svg").string();
    paths.auc_svg = (fs::path(out_dir) / "auc_curves.svg").string();

    std::ostringstream table;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-12s %7s %17s %17s %17s\n", "method", "seeds",
                  "dice (mean+-std)", "ce (mean+-std)", "auc (mean+-std)");
    table << buf;
    table << std::string(73, '-') << "\n";

    std::vector<CurveSeries> dice_series, auc_series;
    for (Method m : order) {
        std::vector<ExperimentHistory> hs;
        for (const Row& r : rows)
            if (r.method == m) hs.push_back(r.history);
        const SeedAggregate agg = aggregate_seeds(hs);

        std::string auc_cell = "-";
        if (agg.auc) {
            std::snprintf(buf, sizeof(buf), "%.4f +- %.4f", agg.auc->mean, agg.auc->std_dev);
            auc_cell = buf;
        }
        char dice_cell[48], ce_cell[48];
        std::snprintf(dice_cell, sizeof(dice_cell), "%.4f +- %.4f", agg.dice.mean,
                      agg.dice.std_dev);
        std::snprintf(ce_cell, sizeof(ce_cell), "%.4f +- %.4f", agg.ce.mean, agg.ce.std_dev);
        std::snprintf(buf, sizeof(buf), "%-12s %7d %17s %17s %17s\n", method_name(m).c_str(),
                      agg.n_seeds, dice_cell, ce_cell, auc_cell.c_str());
        table << buf;

        // Seed-mean curves per round (rounds present in every seed's history).
        std::map<int, std::pair<double, int>> dice_acc;
        std::map<int, std::pair<double, int>> auc_acc;
        for (const ExperimentHistory& h : hs) {
            for (const RoundRecord& rec : h.records) {
                auto& d = dice_acc[rec.round];
                d.first += rec.dice;
                d.second += 1;
                if (rec.mia_auc) {
                    auto& a = auc_acc[rec.round];
                    a.first += *rec.mia_auc;
                    a.second += 1;
                }
            }
        }
        CurveSeries ds;
        ds.name = method_name(m);
        for (const auto& [round, acc] : dice_acc)
            if (acc.second == static_cast<int>(hs.size()))
                ds.points.emplace_back(round, acc.first / acc.second);
        if (!ds.points.empty()) dice_series.push_back(std::move(ds));

        CurveSeries as;
        as.name = method_name(m);
        for (const auto& [round, acc] : auc_acc)
            if (acc.second == static_cast<int>(hs.size()))
                as.points.emplace_back(round, acc.first / acc.second);
        if (!as.points.empty()) auc_series.push_back(std::move(as));
    }

    binio::write_file(paths.table, table.str());
    emit_curves_svg("Dice vs round", "round", "dice", dice_series, 0.0, 1.0, paths.dice_svg);
    emit_curves_svg("Attack AUC vs round", "round", "auc", auc_series, 0.0, 1.0, paths.auc_svg);
    return paths;
}

}  // namespace fedseg
