// fedseg: reproducible federated tumor-segmentation benchmark.
//
// Subcommands: gen-data (build a synthetic dataset), run (train and evaluate
// methods), attack (membership-inference report for a checkpoint), report
// (aggregate a runs directory). Exit codes: 0 success, 1 runtime failure,
// 2 usage error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedseg/binio.hpp"
#include "fedseg/common.hpp"
#include "fedseg/experiment.hpp"
#include "fedseg/mia.hpp"
#include "fedseg/parallel.hpp"

namespace fs = std::filesystem;
using namespace fedseg;

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

struct GenDataArgs {
    std::string scale = "desk";
    std::uint64_t seed = 7;
    std::string out;
    bool force = false;
    int threads = 0;
};

void cmd_gen_data(const GenDataArgs& a) {
    const Scale scale = parse_scale(a.scale);
    if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.force)
        throw IoError("output directory '" + a.out + "' already exists; pass --force to rewrite");
    const FederationData data = build_federation(a.seed, scale, a.threads);
    fs::create_directories(a.out);
    const DatasetManifest m = write_federation(data, a.out);
    std::cout << (fs::path(a.out) / "manifest.txt").string() << "\n";
    (void)m;
}

struct RunArgs {
    ExperimentConfig cfg;
    std::vector<std::string> methods = {"fedavg"};
};

void cmd_run(RunArgs& a) {
    a.cfg.methods.clear();
    for (const std::string& m : a.methods) a.cfg.methods.push_back(parse_method(m));
    const ExperimentOutput out = run_experiments(a.cfg);
    for (const RunArtifacts& r : out.runs)
        std::cout << method_name(r.method) << " seed " << r.seed << ": dice "
                  << (r.history.records.empty() ? std::string("-")
                                                : fmt6(r.history.final_dice()))
                  << " -> " << r.csv_path << "\n";
    std::cout << out.index_path << "\n";
}

struct AttackArgs {
    std::string checkpoint;
    std::string manifest;
    std::uint64_t seed = 1;
    int base_channels = -1;
    int rounds = -1;
    int local_epochs = 1;
    std::string out = "attack_report.txt";
    int threads = 0;
};

void cmd_attack(const AttackArgs& a) {
    const FederationData data = load_federation(a.manifest);
    const Scale scale = parse_scale(data.manifest.scale);

    ModelConfig mc;
    mc.base_channels = a.base_channels > 0 ? a.base_channels : scaled_base_channels(scale);
    const ParamSet target = load_checkpoint_as(a.checkpoint, make_layout(mc));

    TrainConfig shadow_cfg;
    shadow_cfg.rounds = a.rounds > 0 ? a.rounds : scaled_rounds(scale);
    shadow_cfg.lr_decay_at_round = scaled_decay_round(scale);
    shadow_cfg.local_epochs = a.local_epochs;

    const int n = scaled_mia_count(scale);
    const SeedAttack sa =
        derive_seed_attack(data, mc, shadow_cfg, a.seed, n, n, 16, a.threads);
    const double auc =
        attack_auc(sa.attack, make_predictor(mc, target), sa.members, sa.nonmembers, 16,
                   a.threads);

    std::ostringstream os;
    os << "scale = " << data.manifest.scale << "\n";
    os << "seed = " << a.seed << "\n";
    os << "base_channels = " << mc.base_channels << "\n";
    os << "shadow_rounds = " << shadow_cfg.rounds << "\n";
    os << "shadow_epochs_per_round = " << shadow_cfg.local_epochs << "\n";
    os << "members = " << sa.members.size() << "\n";
    os << "nonmembers = " << sa.nonmembers.size() << "\n";
    os << "attack_iterations = " << sa.attack.iterations << "\n";
    char buf[64];
    const char* names[4] = {"loss", "entropy", "confidence", "dice"};
    for (int j = 0; j < 4; ++j) {
        std::snprintf(buf, sizeof(buf), "%.8g", sa.attack.weights[j]);
        os << "attack_w_" << names[j] << " = " << buf << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%.8g", sa.attack.bias);
    os << "attack_bias = " << buf << "\n";
    os << "mia_auc = " << fmt6(auc) << "\n";

    binio::write_file(a.out, os.str());
    std::cout << os.str();
}

struct ReportArgs {
    std::string runs;
    std::string out = "report";
};

void cmd_report(const ReportArgs& a) {
    const ReportPaths p = write_report(a.runs, a.out);
    std::cout << binio::read_file(p.table);
    std::cout << p.table << "\n" << p.dice_svg << "\n" << p.auc_svg << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Privacy-aware federated tumor-segmentation benchmark"};
    app.require_subcommand(1);

    // gen-data ----------------------------------------------------------------
    GenDataArgs gd;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic federated dataset");
    gen->add_option("--scale", gd.scale, "Dataset scale: desk or paper")
        ->capture_default_str();
    gen->add_option("--seed", gd.seed, "Global generation seed")->capture_default_str();
    gen->add_option("--out", gd.out, "Output directory")->required();
    gen->add_flag("--force", gd.force, "Rewrite an existing non-empty output directory");
    gen->add_option("--threads", gd.threads, "Worker threads (0 = auto)");
    gen->callback([&] { cmd_gen_data(gd); });

    // run ----------------------------------------------------------------------
    RunArgs ra;
    ra.cfg.train.rounds = -1;             // resolved from scale unless set
    ra.cfg.train.lr_decay_at_round = -1;  // resolved from scale unless set
    ra.cfg.train.prox_mu = 0.01f;         // applies to fedprox jobs only
    CLI::App* run = app.add_subcommand("run", "Run federated training experiments");
    run->set_config("--config", "", "Key-value config file (flags take precedence)");
    run->add_option("--scale", ra.cfg.scale, "Experiment scale: desk or paper")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, Scale>{{"desk", Scale::Desk}, {"paper", Scale::Paper}}))
        ->default_str("desk");
    run->add_option("--data_seed,--data-seed", ra.cfg.data_seed, "Dataset generation seed")
        ->capture_default_str();
    run->add_option("--data_path,--data", ra.cfg.data_path,
                    "Dataset directory or manifest (default: generate in memory)");
    run->add_option("--base_channels,--base-channels", ra.cfg.base_channels,
                    "U-Net base width (-1 = scale preset)");
    run->add_option("--lr", ra.cfg.train.lr, "SGD learning rate")->capture_default_str();
    run->add_option("--lr_decay_factor,--lr-decay-factor", ra.cfg.train.lr_decay_factor,
                    "Multiplicative lr decay")
        ->capture_default_str();
    run->add_option("--lr_decay_at_round,--lr-decay-at-round", ra.cfg.train.lr_decay_at_round,
                    "Round the decay kicks in (-1 = scale preset)");
    run->add_option("--momentum", ra.cfg.train.momentum, "SGD momentum")->capture_default_str();
    run->add_option("--weight_decay,--weight-decay", ra.cfg.train.weight_decay, "L2 coefficient")
        ->capture_default_str();
    run->add_option("--batch_size,--batch-size", ra.cfg.train.batch_size, "Mini-batch size")
        ->capture_default_str();
    run->add_option("--local_epochs,--local-epochs", ra.cfg.train.local_epochs,
                    "Local epochs per round")
        ->capture_default_str();
    run->add_option("--rounds", ra.cfg.train.rounds, "Federated rounds (-1 = scale preset)");
    run->add_option("--prox_mu,--prox-mu", ra.cfg.train.prox_mu,
                    "Proximal coefficient for fedprox runs")
        ->capture_default_str();
    run->add_flag("--bn_reset,--bn-reset", ra.cfg.train.bn_reset,
                  "FedBN: reset client BN state every round");
    run->add_option("--clip_norm,--clip-norm", ra.cfg.dp.clip_norm, "DP clip norm")
        ->capture_default_str();
    run->add_option("--noise_sigma,--noise-sigma", ra.cfg.dp.noise_sigma, "DP noise multiplier")
        ->capture_default_str();
    run->add_option("--delta", ra.cfg.dp.delta, "DP accountant delta")->capture_default_str();
    run->add_option("--seeds", ra.cfg.seeds, "Run seeds")->capture_default_str();
    run->add_option("--methods", ra.methods,
                    "Methods: fedavg fedprox fedbn fedavg_dp centralized local_only")
        ->capture_default_str();
    run->add_option("--out_dir,--out", ra.cfg.out_dir, "Output directory")
        ->capture_default_str();
    run->add_flag("!--no_mia,!--no-mia", ra.cfg.track_mia,
                  "Disable membership-inference tracking");
    run->add_option("--mia_cadence,--mia-cadence", ra.cfg.mia_cadence,
                    "Probe the attack every k rounds")
        ->capture_default_str();
    run->add_option("--mia_members,--mia-members", ra.cfg.mia_members,
                    "Member eval samples (-1 = scale preset)");
    run->add_option("--mia_nonmembers,--mia-nonmembers", ra.cfg.mia_nonmembers,
                    "Nonmember eval samples (-1 = scale preset)");
    run->add_option("--eval_batch,--eval-batch", ra.cfg.eval_batch, "Evaluation batch size")
        ->capture_default_str();
    run->add_option("--threads", ra.cfg.threads, "Worker threads (0 = auto)");
    run->callback([&] { cmd_run(ra); });

    // attack --------------------------------------------------------------------
    AttackArgs at;
    CLI::App* atk = app.add_subcommand("attack", "Membership-inference report for a checkpoint");
    atk->add_option("--checkpoint", at.checkpoint, "Model checkpoint (.fobp)")
        ->required()
        ->check(CLI::ExistingFile);
    atk->add_option("--manifest", at.manifest, "Dataset manifest.txt")
        ->required()
        ->check(CLI::ExistingFile);
    atk->add_option("--seed", at.seed, "Attack derivation seed")->capture_default_str();
    atk->add_option("--base_channels,--base-channels", at.base_channels,
                    "U-Net base width of the checkpoint (-1 = scale preset)");
    atk->add_option("--rounds", at.rounds, "Shadow training rounds (-1 = scale preset)");
    atk->add_option("--local_epochs,--local-epochs", at.local_epochs,
                    "Shadow epochs per round")
        ->capture_default_str();
    atk->add_option("--out", at.out, "Report file")->capture_default_str();
    atk->add_option("--threads", at.threads, "Worker threads (0 = auto)");
    atk->callback([&] { cmd_attack(at); });

    // report ---------------------------------------------------------------------
    ReportArgs rp;
    CLI::App* rep = app.add_subcommand("report", "Aggregate a runs directory");
    rep->add_option("--runs", rp.runs, "Runs directory (with runs_index.txt)")
        ->required()
        ->check(CLI::ExistingDirectory);
    rep->add_option("--out", rp.out, "Report output directory")->capture_default_str();
    rep->callback([&] { cmd_report(rp); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
