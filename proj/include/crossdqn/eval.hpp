#pragma once

// Evaluation harness: rolls policies through the simulator, recounts the
// headline metrics from raw episode logs, calibrates ad-exposure knobs so
// policies can be compared at the same ad ratio, and runs the ablation and
// hyperparameter sweep grids. Also owns the report file formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crossdqn/config.hpp"
#include "crossdqn/model.hpp"
#include "crossdqn/params.hpp"
#include "crossdqn/policies.hpp"
#include "crossdqn/rng.hpp"
#include "crossdqn/sim.hpp"
#include "crossdqn/training.hpp"

namespace crossdqn::eval {

/// Headline metrics for one evaluation seed. Revenue fields are sums over
/// every screen served; r_cxr, r_ex and mean_reward are per-request
/// averages (orders per request, summed experience score per request,
/// summed reward per request).
struct SeedMetrics {
    std::uint64_t seed = 0;
    std::size_t requests = 0;
    std::size_t screens = 0;
    std::uint64_t clicks = 0;
    std::uint64_t orders = 0;
    double r_ad = 0.0;
    double r_fee = 0.0;
    double r_cxr = 0.0;
    double r_ex = 0.0;
    double pae = 0.0;
    double mean_reward = 0.0;

    bool operator==(const SeedMetrics&) const = default;
};

inline SeedMetrics metrics_from_logs(const std::vector<sim::RequestLog>& logs) {
    if (logs.empty()) throw std::invalid_argument("metrics_from_logs: no requests");
    SeedMetrics m;
    m.requests = logs.size();
    double ex_sum = 0.0, reward_sum = 0.0;
    for (const auto& log : logs) {
        m.screens += log.transitions.size();
        for (const auto& tr : log.transitions) {
            m.clicks += static_cast<std::uint64_t>(std::popcount(tr.clicks));
            m.orders += static_cast<std::uint64_t>(std::popcount(tr.orders));
            m.r_ad += tr.r_ad;
            m.r_fee += tr.r_fee;
            ex_sum += static_cast<double>(tr.r_ex);
            reward_sum += tr.reward;
        }
    }
    if (m.r_ad < 0.0 || m.r_fee < 0.0) throw std::logic_error("metrics: negative revenue sum");
    const auto n = static_cast<double>(m.requests);
    m.r_cxr = static_cast<double>(m.orders) / n;
    m.r_ex = ex_sum / n;
    m.mean_reward = reward_sum / n;
    m.pae = sim::period_pae(logs);
    return m;
}

struct MetricAggregate {
    double mean = 0.0;
    // Sample standard deviation; NaN with fewer than two seeds, and report
    // writers leave it out in that case.
    double stddev = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
    std::string label;
    std::vector<SeedMetrics> per_seed;

    bool operator==(const MetricsReport&) const = default;

    std::vector<std::uint64_t> seeds() const {
        std::vector<std::uint64_t> out;
        out.reserve(per_seed.size());
        for (const auto& m : per_seed) out.push_back(m.seed);
        return out;
    }

    MetricAggregate aggregate(double SeedMetrics::* field) const {
        if (per_seed.empty()) throw std::logic_error("report '" + label + "' has no seeds");
        MetricAggregate a;
        for (const auto& m : per_seed) a.mean += m.*field;
        a.mean /= static_cast<double>(per_seed.size());
        if (per_seed.size() >= 2) {
            double ss = 0.0;
            for (const auto& m : per_seed) {
                const double d = m.*field - a.mean;
                ss += d * d;
            }
            a.stddev = std::sqrt(ss / static_cast<double>(per_seed.size() - 1));
        }
        return a;
    }

    double mean_pae() const { return aggregate(&SeedMetrics::pae).mean; }
    double mean_reward() const { return aggregate(&SeedMetrics::mean_reward).mean; }
};

struct MetricField {
    const char* name;
    double SeedMetrics::* field;
};

inline constexpr std::array<MetricField, 6> kMetricFields = {{
    {"r_ad", &SeedMetrics::r_ad},
    {"r_fee", &SeedMetrics::r_fee},
    {"r_cxr", &SeedMetrics::r_cxr},
    {"r_ex", &SeedMetrics::r_ex},
    {"pae", &SeedMetrics::pae},
    {"mean_reward", &SeedMetrics::mean_reward},
}};

/// Rolls the policy for n_requests sessions per seed and recounts metrics
/// from the logs. Deterministic in (env, policy, seed).
inline MetricsReport evaluate_policy(const sim::Env& env, const sim::PolicyFn& policy,
                                     std::string label, std::size_t n_requests,
                                     const std::vector<std::uint64_t>& seeds) {
    if (n_requests == 0) throw std::invalid_argument("evaluate_policy: zero requests");
    if (seeds.empty()) throw std::invalid_argument("evaluate_policy: no seeds");
    MetricsReport rep;
    rep.label = std::move(label);
    for (const auto seed : seeds) {
        Rng rng(derive_seed(seed, 0xE7A10A7Eull));
        std::vector<sim::RequestLog> logs;
        logs.reserve(n_requests);
        for (std::size_t i = 0; i < n_requests; ++i)
            logs.push_back(env.rollout_request(policy, rng, i));
        SeedMetrics m = metrics_from_logs(logs);
        m.seed = seed;
        rep.per_seed.push_back(m);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Exposure matching

struct Calibration {
    double knob = 0.0;
    double achieved_pae = 0.0;
    std::size_t probes = 0;
    bool matched = false;
};

/// Bisects a monotone nondecreasing knob -> period-PAE map until the
/// measurement falls within `band` of `target`. Returns the best knob seen
/// if the band cannot be hit within the probe budget or the bracket.
inline Calibration calibrate_pae(const std::function<double(double)>& pae_of_knob, double target,
                                 double lo, double hi, double band, std::size_t max_probes = 16) {
    if (!(lo < hi)) throw std::invalid_argument("calibrate_pae: empty bracket");
    if (!(band > 0.0)) throw std::invalid_argument("calibrate_pae: band must be > 0");
    if (max_probes < 2) throw std::invalid_argument("calibrate_pae: need at least 2 probes");
    Calibration best;
    auto probe = [&](double knob) {
        const double p = pae_of_knob(knob);
        ++best.probes;
        if (best.probes == 1 || std::abs(p - target) < std::abs(best.achieved_pae - target)) {
            best.knob = knob;
            best.achieved_pae = p;
        }
        return p;
    };
    double f_lo = probe(lo);
    if (std::abs(f_lo - target) <= band || f_lo > target) {
        best.matched = std::abs(best.achieved_pae - target) <= band;
        return best;
    }
    double f_hi = probe(hi);
    if (std::abs(f_hi - target) <= band || f_hi < target) {
        best.matched = std::abs(best.achieved_pae - target) <= band;
        return best;
    }
    while (best.probes < max_probes) {
        const double mid = 0.5 * (lo + hi);
        const double f = probe(mid);
        if (std::abs(f - target) <= band) break;
        if (f < target)
            lo = mid;
        else
            hi = mid;
    }
    best.matched = std::abs(best.achieved_pae - target) <= band;
    return best;
}

// ---------------------------------------------------------------------------
// Train-and-evaluate cells shared by ablations and sweeps

struct TrainedEval {
    SeedMetrics metrics;
    std::uint64_t offset_builds = 0;  // instrumentation over training + evaluation
    double final_soft_pae = 0.0;
};

/// Trains one model on the shared dataset and evaluates its greedy policy.
/// Fully determined by (configs, seed): the model is initialized from the
/// seed, the trainer samples with it, and evaluation derives its own
/// stream from it.
inline TrainedEval train_and_evaluate(const sim::TransitionLogFile& data, const sim::Env& env,
                                      const model::ModelConfig& mc, const train::TrainConfig& tc,
                                      std::uint64_t seed, std::size_t n_eval_requests) {
    model::CrossDqnModel m(mc, seed);
    train::TrainConfig tc_run = tc;
    tc_run.seed = seed;
    train::Trainer trainer(std::move(m), train::ReplayDataset(data.requests), env, tc_run);
    trainer.run();

    TrainedEval out;
    out.final_soft_pae = trainer.history().empty() ? 0.0
                                                   : trainer.history().back().loss.soft_pae_mean;
    const MetricsReport rep = evaluate_policy(env, policy::greedy_model(trainer.model()),
                                              "cell", n_eval_requests, {seed});
    out.metrics = rep.per_seed.front();
    out.offset_builds = trainer.model().counters().offset_builds;
    return out;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationCell {
    std::string label;
    model::Variant variant = model::Variant::full;
    double alpha = 0.0;
    double lambda_ad = 1.0;
    std::uint64_t offset_builds = 0;
    bool pae_matched = true;
    MetricsReport report;
};

struct AblationConfig {
    std::vector<std::uint64_t> seeds;
    std::size_t n_eval_requests = 300;
    double pae_band = 0.01;
    double lambda_lo = 0.25;
    double lambda_hi = 4.0;
    std::size_t max_probes = 8;
};

inline std::string ablation_label(model::Variant variant, bool with_aux) {
    if (with_aux) return "full";
    switch (variant) {
        case model::Variant::full: return "no_aux";
        case model::Variant::no_mcau: return "no_aux_no_mcau";
        case model::Variant::no_sacu: return "no_aux_no_mcau_no_sacu";
    }
    throw std::logic_error("unknown variant");
}

/// Trains and evaluates one ablation row across all seeds.
inline AblationCell run_ablation_cell(const sim::TransitionLogFile& data, const sim::Env& env,
                                      const model::ModelConfig& mc_base,
                                      const train::TrainConfig& tc_base, model::Variant variant,
                                      bool with_aux, double lambda_ad,
                                      const std::vector<std::uint64_t>& seeds,
                                      std::size_t n_eval_requests) {
    if (seeds.empty()) throw std::invalid_argument("ablation cell: no seeds");
    AblationCell cell;
    cell.label = ablation_label(variant, with_aux);
    cell.variant = variant;
    cell.alpha = with_aux ? tc_base.alpha : 0.0;
    cell.lambda_ad = lambda_ad;
    cell.report.label = cell.label;

    model::ModelConfig mc = mc_base;
    mc.variant = variant;
    train::TrainConfig tc = tc_base;
    tc.alpha = cell.alpha;
    tc.lambda_ad = lambda_ad;
    for (const auto seed : seeds) {
        const TrainedEval te = train_and_evaluate(data, env, mc, tc, seed, n_eval_requests);
        SeedMetrics m = te.metrics;
        m.seed = seed;
        cell.report.per_seed.push_back(m);
        cell.offset_builds += te.offset_builds;
    }
    return cell;
}

/// The four-variant ablation table: the full model, then the auxiliary
/// loss removed (with the ad-revenue weight retuned so exposure stays
/// comparable), then the channel enumeration collapsed to one attention
/// pass, then the crossing removed entirely. Rows two to four are matched
/// to the full model's measured exposure within pae_band by bisecting
/// lambda_ad on the first seed.
inline std::vector<AblationCell> ablation_suite(const sim::TransitionLogFile& data,
                                                const sim::Env& env,
                                                const model::ModelConfig& mc_base,
                                                const train::TrainConfig& tc_base,
                                                const AblationConfig& cfg) {
    if (cfg.seeds.empty()) throw std::invalid_argument("ablation_suite: no seeds");
    std::vector<AblationCell> cells;
    cells.push_back(run_ablation_cell(data, env, mc_base, tc_base, model::Variant::full, true, 1.0,
                                      cfg.seeds, cfg.n_eval_requests));
    const double target_pae = cells.front().report.mean_pae();

    const model::Variant ablated[] = {model::Variant::full, model::Variant::no_mcau,
                                      model::Variant::no_sacu};
    for (const auto variant : ablated) {
        model::ModelConfig mc = mc_base;
        mc.variant = variant;
        train::TrainConfig tc = tc_base;
        tc.alpha = 0.0;
        auto pae_of = [&](double lambda) {
            train::TrainConfig probe = tc;
            probe.lambda_ad = lambda;
            return train_and_evaluate(data, env, mc, probe, cfg.seeds.front(),
                                      cfg.n_eval_requests)
                .metrics.pae;
        };
        const Calibration cal = calibrate_pae(pae_of, target_pae, cfg.lambda_lo, cfg.lambda_hi,
                                              cfg.pae_band, cfg.max_probes);
        AblationCell cell = run_ablation_cell(data, env, mc_base, tc_base, variant, false,
                                              cal.knob, cfg.seeds, cfg.n_eval_requests);
        cell.pae_matched = std::abs(cell.report.mean_pae() - target_pae) <= cfg.pae_band;
        cells.push_back(std::move(cell));
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweeps

enum class SweepParam { eta, alpha, beta };

inline const char* sweep_param_name(SweepParam p) {
    switch (p) {
        case SweepParam::eta: return "eta";
        case SweepParam::alpha: return "alpha";
        case SweepParam::beta: return "beta";
    }
    throw std::logic_error("unknown sweep parameter");
}

inline SweepParam sweep_param_from_name(const std::string& s) {
    if (s == "eta") return SweepParam::eta;
    if (s == "alpha") return SweepParam::alpha;
    if (s == "beta") return SweepParam::beta;
    throw std::invalid_argument("unknown sweep parameter '" + s + "' (want eta, alpha or beta)");
}

struct SweepCell {
    double value = 0.0;
    MetricsReport report;
};

/// One train+evaluate per (value, seed), rows ordered by value ascending.
inline std::vector<SweepCell> sweep(SweepParam param, std::vector<double> values,
                                    const sim::TransitionLogFile& data, const sim::Env& env,
                                    const model::ModelConfig& mc, const train::TrainConfig& tc_base,
                                    const std::vector<std::uint64_t>& seeds,
                                    std::size_t n_eval_requests) {
    if (values.size() < 2) throw std::invalid_argument("sweep: need at least 2 values");
    if (seeds.empty()) throw std::invalid_argument("sweep: no seeds");
    std::sort(values.begin(), values.end());
    if (std::adjacent_find(values.begin(), values.end()) != values.end())
        throw std::invalid_argument("sweep: duplicate values");

    std::vector<SweepCell> cells;
    for (const double v : values) {
        train::TrainConfig tc = tc_base;
        switch (param) {
            case SweepParam::eta: tc.eta = v; break;
            case SweepParam::alpha: tc.alpha = v; break;
            case SweepParam::beta: tc.beta = v; break;
        }
        tc.validate();
        SweepCell cell;
        cell.value = v;
        cell.report.label = std::string(sweep_param_name(param)) + "=" + Config::format_double(v);
        for (const auto seed : seeds) {
            SeedMetrics m = train_and_evaluate(data, env, mc, tc, seed, n_eval_requests).metrics;
            m.seed = seed;
            cell.report.per_seed.push_back(m);
        }
        cells.push_back(std::move(cell));
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Report files

// Per-seed rows, exact values.
//   # crossdqn-report-v1
//   label,seed,requests,screens,clicks,orders,r_ad,r_fee,r_cxr,r_ex,pae,mean_reward
//   fixed,1,500,2315,...
constexpr const char* kReportCsvHeader = "# crossdqn-report-v1";

inline void write_reports_csv(std::ostream& os, const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("write_reports_csv: no reports");
    os << kReportCsvHeader << "\n";
    os << "label,seed,requests,screens,clicks,orders,r_ad,r_fee,r_cxr,r_ex,pae,mean_reward\n";
    for (const auto& rep : reports) {
        if (rep.label.empty() || rep.label.find_first_of(",\n\r ") != std::string::npos)
            throw std::invalid_argument("report label unusable in CSV: '" + rep.label + "'");
        if (rep.per_seed.empty()) throw std::invalid_argument("report '" + rep.label + "' is empty");
        for (const auto& m : rep.per_seed)
            os << rep.label << "," << m.seed << "," << m.requests << "," << m.screens << ","
               << m.clicks << "," << m.orders << "," << hexfloat::format(m.r_ad) << ","
               << hexfloat::format(m.r_fee) << "," << hexfloat::format(m.r_cxr) << ","
               << hexfloat::format(m.r_ex) << "," << hexfloat::format(m.pae) << ","
               << hexfloat::format(m.mean_reward) << "\n";
    }
}

inline std::vector<MetricsReport> read_reports_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kReportCsvHeader)
        throw std::runtime_error("report csv: bad header");
    if (!std::getline(is, line) ||
        line != "label,seed,requests,screens,clicks,orders,r_ad,r_fee,r_cxr,r_ex,pae,mean_reward")
        throw std::runtime_error("report csv: bad column header");
    std::vector<MetricsReport> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() != 12)
            throw std::runtime_error("report csv: expected 12 cells in '" + line + "'");
        SeedMetrics m;
        m.seed = std::stoull(cells[1]);
        m.requests = std::stoull(cells[2]);
        m.screens = std::stoull(cells[3]);
        m.clicks = std::stoull(cells[4]);
        m.orders = std::stoull(cells[5]);
        m.r_ad = hexfloat::parse(cells[6]);
        m.r_fee = hexfloat::parse(cells[7]);
        m.r_cxr = hexfloat::parse(cells[8]);
        m.r_ex = hexfloat::parse(cells[9]);
        m.pae = hexfloat::parse(cells[10]);
        m.mean_reward = hexfloat::parse(cells[11]);
        if (out.empty() || out.back().label != cells[0]) {
            for (const auto& rep : out)
                if (rep.label == cells[0])
                    throw std::runtime_error("report csv: rows for label '" + cells[0] +
                                             "' are not contiguous");
            out.push_back(MetricsReport{cells[0], {}});
        }
        out.back().per_seed.push_back(m);
    }
    if (out.empty()) throw std::runtime_error("report csv: no data rows");
    return out;
}

inline void write_reports_csv_file(const std::string& path,
                                   const std::vector<MetricsReport>& reports) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write report csv '" + path + "'");
    write_reports_csv(os, reports);
}

inline std::vector<MetricsReport> read_reports_csv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open report csv '" + path + "'");
    return read_reports_csv(is);
}

// Mean and spread per metric at each x, one block per metric, for external
// plotting. stddev is written as nan when only one seed contributed.
//   # crossdqn-plotdata-v1
//   series r_ad
//   0 12.5 0.31
constexpr const char* kPlotDataHeader = "# crossdqn-plotdata-v1";

inline void write_plot_data(std::ostream& os,
                            const std::vector<std::pair<double, MetricsReport>>& points) {
    if (points.empty()) throw std::invalid_argument("write_plot_data: no points");
    os << kPlotDataHeader << "\n";
    for (const auto& f : kMetricFields) {
        os << "series " << f.name << "\n";
        for (const auto& [x, rep] : points) {
            const MetricAggregate a = rep.aggregate(f.field);
            os << Config::format_double(x) << " " << Config::format_double(a.mean) << " "
               << Config::format_double(a.stddev) << "\n";
        }
    }
}

inline void write_plot_data_file(const std::string& path,
                                 const std::vector<std::pair<double, MetricsReport>>& points) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write plot data '" + path + "'");
    write_plot_data(os, points);
}

}  // namespace crossdqn::eval
