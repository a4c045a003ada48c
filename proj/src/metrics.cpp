#include "fedseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "fedseg/binio.hpp"
#include "fedseg/parallel.hpp"

namespace fedseg {
namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

double require_final(const ExperimentHistory& h, const char* what) {
    if (h.records.empty())
        throw UsageError(std::string("history has no rounds; no final ") + what);
    return 0.0;
}

MetricStat stat_of(const std::vector<double>& xs) {
    MetricStat s;
    const auto n = static_cast<double>(xs.size());
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / n;
    if (xs.size() > 1) {
        double sq = 0.0;
        for (double x : xs) sq += (x - s.mean) * (x - s.mean);
        s.std_dev = std::sqrt(sq / (n - 1.0));
    }
    return s;
}

// Per-image BCE with the training clamp, in f64.
double image_bce(const float* p, const float* y, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), static_cast<double>(kBceClamp),
                                     1.0 - static_cast<double>(kBceClamp));
        acc -= y[i] != 0.0f ? std::log(pc) : std::log(1.0 - pc);
    }
    return acc / static_cast<double>(n);
}

}  // namespace

Method parse_method(const std::string& s) {
    if (s == "fedavg") return Method::FedAvg;
    if (s == "fedprox") return Method::FedProx;
    if (s == "fedbn") return Method::FedBn;
    if (s == "fedavg_dp") return Method::FedAvgDp;
    if (s == "centralized") return Method::Centralized;
    if (s == "local_only") return Method::LocalOnly;
    throw ConfigError("unknown method '" + s + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::FedAvg: return "fedavg";
        case Method::FedProx: return "fedprox";
        case Method::FedBn: return "fedbn";
        case Method::FedAvgDp: return "fedavg_dp";
        case Method::Centralized: return "centralized";
        case Method::LocalOnly: return "local_only";
    }
    throw UsageError("bad method value");
}

double ExperimentHistory::final_dice() const {
    require_final(*this, "dice");
    return records.back().dice;
}
double ExperimentHistory::final_ce() const {
    require_final(*this, "ce");
    return records.back().ce;
}
std::optional<double> ExperimentHistory::final_auc() const {
    if (records.empty()) return std::nullopt;
    return records.back().mia_auc;
}

Predictor make_predictor(const ModelConfig& cfg, ParamSet params) {
    return [cfg, params = std::move(params)](const Tensor& images) {
        return model_predict(cfg, params, images);
    };
}

EvalResult evaluate(const Predictor& model, const std::vector<const SliceSample*>& test_set,
                    int batch_size, int threads) {
    if (test_set.empty()) throw UsageError("evaluate on empty test set");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (threads <= 0) threads = default_threads();

    const std::size_t n = test_set.size();
    const std::size_t n_batches = (n + static_cast<std::size_t>(batch_size) - 1) /
                                  static_cast<std::size_t>(batch_size);
    std::vector<double> dices(n), ces(n);
    parallel_for(n_batches, threads, [&](std::size_t bi) {
        const std::size_t lo = bi * static_cast<std::size_t>(batch_size);
        const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(batch_size));
        std::vector<const SliceSample*> chunk(test_set.begin() + static_cast<std::ptrdiff_t>(lo),
                                              test_set.begin() + static_cast<std::ptrdiff_t>(hi));
        const SegBatch batch = make_batch(chunk);
        const Tensor prob = model(batch.images);
        if (!(prob.shape == batch.masks.shape))
            throw UsageError("predictor output shape " + prob.shape.str() +
                             " does not match masks " + batch.masks.shape.str());
        const Tensor bin = binarize(prob, 0.5f);
        const std::size_t npx = static_cast<std::size_t>(prob.shape.h) * prob.shape.w;
        for (std::size_t k = 0; k < chunk.size(); ++k) {
            const Shape s1{1, 1, prob.shape.h, prob.shape.w};
            std::vector<float> pv(prob.data() + k * npx, prob.data() + (k + 1) * npx);
            std::vector<float> bv(bin.data() + k * npx, bin.data() + (k + 1) * npx);
            std::vector<float> mv(batch.masks.data() + k * npx,
                                  batch.masks.data() + (k + 1) * npx);
            const Tensor bt = Tensor::from_data(s1, std::move(bv));
            const Tensor mt = Tensor::from_data(s1, std::move(mv));
            dices[lo + k] = dice_coefficient(bt, mt);
            ces[lo + k] = image_bce(pv.data(), mt.data(), npx);
        }
    });
    double dsum = 0.0, csum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dsum += dices[i];
        csum += ces[i];
    }
    return EvalResult{dsum / static_cast<double>(n), csum / static_cast<double>(n)};
}

SeedAggregate aggregate_seeds(const std::vector<ExperimentHistory>& histories) {
    if (histories.empty()) throw UsageError("aggregate_seeds on empty history list");
    SeedAggregate agg;
    agg.method = histories.front().method;
    agg.n_seeds = static_cast<int>(histories.size());
    std::vector<double> dice, ce, auc, eps;
    bool all_auc = true, all_eps = true;
    for (const auto& h : histories) {
        if (h.method != agg.method)
            throw UsageError("aggregate_seeds mixes methods " + method_name(agg.method) +
                             " and " + method_name(h.method));
        dice.push_back(h.final_dice());
        ce.push_back(h.final_ce());
        if (h.final_auc())
            auc.push_back(*h.final_auc());
        else
            all_auc = false;
        if (h.epsilon)
            eps.push_back(*h.epsilon);
        else
            all_eps = false;
    }
    agg.dice = stat_of(dice);
    agg.ce = stat_of(ce);
    if (all_auc) agg.auc = stat_of(auc);
    if (all_eps) agg.epsilon = stat_of(eps);
    return agg;
}

void write_history_csv(const ExperimentHistory& history, const std::string& path) {
    std::ostringstream os;
    os << "round,dice,ce_loss,mia_auc,wall_ms\n";
    int prev_round = 0;
    bool first = true;
    for (const auto& r : history.records) {
        if (!first && r.round <= prev_round)
            throw UsageError("history rounds not strictly increasing at round " +
                             std::to_string(r.round));
        prev_round = r.round;
        first = false;
        os << r.round << "," << fmt6(r.dice) << "," << fmt6(r.ce) << ",";
        if (r.mia_auc) os << fmt6(*r.mia_auc);
        os << "," << fmt6(r.wall_ms) << "\n";
    }
    binio::write_file(path, os.str());
}

ExperimentHistory read_history_csv(const std::string& path) {
    const std::string text = binio::read_file(path);
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "round,dice,ce_loss,mia_auc,wall_ms")
        throw FormatError("bad history CSV header in " + path, 0);
    ExperimentHistory h;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i)
            if (i == line.size() || line[i] == ',') {
                cells.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        if (cells.size() != 5)
            throw FormatError("history CSV row " + std::to_string(line_no) + " has " +
                                  std::to_string(cells.size()) + " cells",
                              line_no);
        RoundRecord r;
        try {
            r.round = std::stoi(cells[0]);
            r.dice = std::stod(cells[1]);
            r.ce = std::stod(cells[2]);
            if (!cells[3].empty()) r.mia_auc = std::stod(cells[3]);
            r.wall_ms = std::stod(cells[4]);
        } catch (const std::exception&) {
            throw FormatError("unparsable history CSV row " + std::to_string(line_no), line_no);
        }
        if (!h.records.empty() && r.round <= h.records.back().round)
            throw FormatError("history CSV rounds not strictly increasing", line_no);
        h.records.push_back(r);
    }
    return h;
}

void write_summary(const ExperimentHistory& history,
                   const std::vector<std::pair<std::string, std::string>>& config_echo,
                   const std::string& path) {
    std::ostringstream os;
    os << "method = " << method_name(history.method) << "\n";
    os << "seed = " << history.seed << "\n";
    for (const auto& [k, v] : config_echo) os << k << " = " << v << "\n";
    os << "rounds_recorded = " << history.records.size() << "\n";
    if (!history.records.empty()) {
        os << "final_dice = " << fmt6(history.final_dice()) << "\n";
        os << "final_ce = " << fmt6(history.final_ce()) << "\n";
        if (history.final_auc()) os << "final_mia_auc = " << fmt6(*history.final_auc()) << "\n";
    }
    if (history.epsilon) {
        os << "epsilon = ";
        if (std::isinf(*history.epsilon))
            os << "inf";
        else
            os << fmt6(*history.epsilon);
        os << "\n";
    }
    for (std::size_t i = 0; i < history.per_client_final_dice.size(); ++i)
        os << "client" << (i + 1) << "_final_dice = " << fmt6(history.per_client_final_dice[i])
           << "\n";
    binio::write_file(path, os.str());
}

void emit_curves_svg(const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<CurveSeries>& series,
                     double y_min, double y_max, const std::string& path) {
    if (!(y_max > y_min)) throw UsageError("svg y range is empty");
    const double W = 720, H = 440, ml = 64, mr = 160, mt = 40, mb = 56;
    const double pw = W - ml - mr, ph = H - mt - mb;
    double x_min = 0.0, x_max = 1.0;
    bool have_x = false;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (!have_x) {
                x_min = x_max = x;
                have_x = true;
            }
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
        }
    if (!have_x || x_max == x_min) x_max = x_min + 1.0;
    auto sx = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * pw; };
    auto sy = [&](double y) { return mt + (y_max - y) / (y_max - y_min) * ph; };

    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
       << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << fmt2(ml + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" "
          "font-size=\"16\">"
       << title << "</text>\n";
    // axes
    os << "<line x1=\"" << fmt2(ml) << "\" y1=\"" << fmt2(mt + ph) << "\" x2=\"" << fmt2(ml + pw)
       << "\" y2=\"" << fmt2(mt + ph) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << fmt2(ml) << "\" y1=\"" << fmt2(mt) << "\" x2=\"" << fmt2(ml)
       << "\" y2=\"" << fmt2(mt + ph) << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = y_min + (y_max - y_min) * i / 4.0;
        os << "<line x1=\"" << fmt2(ml - 4) << "\" y1=\"" << fmt2(sy(y)) << "\" x2=\""
           << fmt2(ml + pw) << "\" y2=\"" << fmt2(sy(y))
           << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        os << "<text x=\"" << fmt2(ml - 8) << "\" y=\"" << fmt2(sy(y) + 4)
           << "\" text-anchor=\"end\">" << fmt2(y) << "</text>\n";
    }
    for (int i = 0; i <= 5; ++i) {
        const double x = x_min + (x_max - x_min) * i / 5.0;
        os << "<text x=\"" << fmt2(sx(x)) << "\" y=\"" << fmt2(mt + ph + 20)
           << "\" text-anchor=\"middle\">" << fmt2(x) << "</text>\n";
    }
    os << "<text x=\"" << fmt2(ml + pw / 2) << "\" y=\"" << fmt2(H - 12)
       << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
    os << "<text x=\"18\" y=\"" << fmt2(mt + ph / 2)
       << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << fmt2(mt + ph / 2) << ")\">"
       << y_label << "</text>\n";
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kColors[si % (sizeof(kColors) / sizeof(kColors[0]))];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : s.points) {
            const double yc = std::clamp(y, y_min, y_max);
            os << fmt2(sx(x)) << "," << fmt2(sy(yc)) << " ";
        }
        os << "\"/>\n";
        const double ly = mt + 16 + 18 * static_cast<double>(si);
        os << "<line x1=\"" << fmt2(ml + pw + 12) << "\" y1=\"" << fmt2(ly - 4) << "\" x2=\""
           << fmt2(ml + pw + 34) << "\" y2=\"" << fmt2(ly - 4) << "\" stroke=\"" << color
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << fmt2(ml + pw + 40) << "\" y=\"" << fmt2(ly) << "\">" << s.name
           << "</text>\n";
    }
    os << "</svg>\n";
    binio::write_file(path, os.str());
}

}  // namespace fedseg
