// Command-line harness around the library: synthetic data generation,
// offline training, policy evaluation, ablations, hyperparameter sweeps and
// the cached-serving simulation. Every flag mirrors a config key (shown in
// the flag help), so whole runs can live in config files; precedence is
// config file < --set overrides < explicit flags.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "crossdqn/eval.hpp"
#include "crossdqn/serving.hpp"

namespace sim = crossdqn::sim;
namespace model = crossdqn::model;
namespace train = crossdqn::train;
namespace eval = crossdqn::eval;
namespace policy = crossdqn::policy;
namespace serve = crossdqn::serve;
using crossdqn::Config;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ','))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& s, const std::string& what) {
    std::vector<std::uint64_t> out;
    for (const auto& tok : split_commas(s)) out.push_back(std::stoull(tok));
    if (out.empty()) throw std::runtime_error(what + ": empty list '" + s + "'");
    return out;
}

std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
    std::vector<double> out;
    for (const auto& tok : split_commas(s)) out.push_back(std::stod(tok));
    if (out.empty()) throw std::runtime_error(what + ": empty list '" + s + "'");
    return out;
}

std::set<std::size_t> parse_slots(const std::string& s) {
    std::set<std::size_t> out;
    for (const auto& tok : split_commas(s)) out.insert(std::stoull(tok));
    return out;
}

/// The effective run configuration: file first, then --set overrides, then
/// whatever explicit flags wrote into `flags`.
struct RunConfig {
    std::string config_path;
    std::vector<std::string> overrides;
    Config flags;

    Config resolve() const {
        Config out;
        if (!config_path.empty()) out = Config::parse_file(config_path);
        for (const auto& o : overrides) out.set_assignment(o);
        out.merge(flags);
        return out;
    }
};

void add_common(CLI::App* sc, RunConfig& rc) {
    sc->add_option("--config", rc.config_path, "config file holding any of the keys below");
    sc->add_option("--set", rc.overrides, "override a config key, key=value (repeatable)");
}

template <typename T>
void mirror(CLI::App* sc, RunConfig& rc, const std::string& flag, const std::string& key,
            const std::string& help) {
    sc->add_option_function<T>(
        flag, [&rc, key](const T& v) { rc.flags.set(key, v); }, help + " [" + key + "]");
}

void mirror_flag(CLI::App* sc, RunConfig& rc, const std::string& flag, const std::string& key,
                 const std::string& help) {
    sc->add_flag_callback(
        flag, [&rc, key] { rc.flags.set(key, true); }, help + " [" + key + "]");
}

struct World {
    sim::EnvConfig cfg;
    sim::Catalog catalog;
};

World load_world(const std::string& path) {
    const Config c = Config::parse_file(path);
    World w;
    w.cfg = sim::EnvConfig::from_config(c);
    w.cfg.validate();
    w.catalog = sim::Catalog::from_config(c);
    if (w.catalog.users.empty()) throw std::runtime_error("world '" + path + "' has no users");
    return w;
}

/// Architecture comes from model.* keys; the data-determined dimensions
/// always follow the environment.
model::ModelConfig model_config_for(const Config& c, const sim::EnvConfig& env_cfg) {
    model::ModelConfig mc = model::ModelConfig::from_config(c);
    mc.k = env_cfg.k;
    mc.f_item = env_cfg.f_item;
    mc.f_user = env_cfg.f_user;
    mc.f_ctx = env_cfg.f_ctx;
    mc.n_b = env_cfg.n_b;
    mc.validate();
    return mc;
}

model::CrossDqnModel load_model(const std::string& path, const sim::EnvConfig& env_cfg) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    model::CrossDqnModel m = model::CrossDqnModel::load_checkpoint(is);
    if (m.config().k != env_cfg.k)
        throw std::runtime_error("checkpoint k=" + std::to_string(m.config().k) +
                                 " does not match environment k=" + std::to_string(env_cfg.k));
    return m;
}

void print_report(const eval::MetricsReport& rep) {
    std::cout << "report " << rep.label << " (" << rep.per_seed.size() << " seeds)\n";
    for (const auto& f : eval::kMetricFields) {
        const auto a = rep.aggregate(f.field);
        std::cout << "  " << f.name << " " << a.mean;
        if (!std::isnan(a.stddev)) std::cout << " +- " << a.stddev;
        std::cout << "\n";
    }
}

int cmd_generate(const Config& c) {
    sim::EnvConfig env_cfg = sim::EnvConfig::from_config(c);
    env_cfg.validate();
    const auto seed = static_cast<std::uint64_t>(c.get_int("run.seed", 1));
    const auto n = static_cast<std::size_t>(c.get_int("run.requests", 2000));
    const std::string out_world = c.require_str("run.out_world");
    const std::string out_data = c.require_str("run.out_data");

    const auto cat = sim::generate_catalog(seed, env_cfg);
    const sim::Env env(env_cfg, cat);
    const auto data = train::collect_exploratory_data(env, policy::uniform_random(), n, seed);

    Config world;
    env_cfg.to_config(world);
    world.merge(cat.to_config());
    world.write_file(out_world);
    sim::write_transition_log_file(out_data, data);

    std::size_t transitions = 0;
    for (const auto& r : data.requests) transitions += r.transitions.size();
    std::cout << "world " << out_world << ": " << cat.ad_ids.size() << " ads, "
              << cat.oi_ids.size() << " organics, " << cat.users.size() << " users\n";
    std::cout << "data " << out_data << ": " << n << " requests, " << transitions
              << " transitions, pae " << sim::period_pae(data.requests) << "\n";
    return 0;
}

int cmd_train(const Config& c) {
    const World w = load_world(c.require_str("run.world"));
    const auto data = sim::read_transition_log_file(c.require_str("run.data"));
    if (data.k != w.cfg.k)
        throw std::runtime_error("data k=" + std::to_string(data.k) +
                                 " does not match world k=" + std::to_string(w.cfg.k));
    const train::TrainConfig tc = train::TrainConfig::from_config(c);
    const model::ModelConfig mc = model_config_for(c, w.cfg);
    const std::string out_ck = c.require_str("run.out_checkpoint");
    const std::string out_log = c.get_str("run.out_log", "");

    model::CrossDqnModel m(mc, tc.seed);
    train::Trainer trainer(std::move(m), train::ReplayDataset(data.requests),
                           sim::Env(w.cfg, w.catalog), tc);

    std::ofstream log_os;
    std::ostream* logp = nullptr;
    if (!out_log.empty()) {
        log_os.open(out_log);
        if (!log_os) throw std::runtime_error("cannot write training log '" + out_log + "'");
        logp = &log_os;
    }
    auto save = [&](std::size_t step, const model::CrossDqnModel& mm) {
        const std::string path =
            step == tc.iterations ? out_ck : out_ck + ".step" + std::to_string(step);
        std::ofstream os(path);
        if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
        mm.save_checkpoint(os);
    };
    trainer.run(logp, save);

    std::cout << "trained " << tc.iterations << " steps on " << data.requests.size()
              << " logged requests\n";
    if (!trainer.history().empty()) {
        const auto& last = trainer.history().back();
        std::cout << "final l_dqn " << last.loss.l_dqn << " l_pae " << last.loss.l_pae
                  << " total " << last.loss.total << " soft_pae " << last.loss.soft_pae_mean
                  << "\n";
    }
    std::cout << "checkpoint " << out_ck << "\n";
    return 0;
}

int cmd_evaluate(const Config& c) {
    const World w = load_world(c.require_str("run.world"));
    const sim::Env env(w.cfg, w.catalog);
    const std::string kind = c.get_str("run.policy", "uniform");
    const auto seeds = parse_u64_list(c.get_str("run.seeds", "1"), "run.seeds");
    const auto requests = static_cast<std::size_t>(c.get_int("run.requests", 500));

    std::optional<model::CrossDqnModel> m;  // keeps the greedy policy's model alive
    sim::PolicyFn pol;
    if (kind == "uniform") {
        pol = policy::uniform_random();
    } else if (kind == "fixed") {
        pol = policy::fixed_slots(parse_slots(c.get_str("run.fixed_slots", "3")),
                                  c.get_double("run.ad_shift", 0.0));
    } else if (kind == "gea") {
        pol = policy::gea(c.get_double("run.beta_prime", 0.0), c.get_double("run.theta", 0.0));
    } else if (kind == "crossdqn") {
        m.emplace(load_model(c.require_str("run.checkpoint"), w.cfg));
        pol = policy::greedy_model(*m);
    } else {
        throw std::runtime_error("unknown policy '" + kind +
                                 "' (want uniform, fixed, gea or crossdqn)");
    }

    const auto rep =
        eval::evaluate_policy(env, pol, c.get_str("run.label", kind), requests, seeds);
    print_report(rep);
    const std::string out = c.get_str("run.out_report", "");
    if (!out.empty()) {
        eval::write_reports_csv_file(out, {rep});
        std::cout << "report " << out << "\n";
    }
    return 0;
}

int cmd_ablate(const Config& c) {
    const World w = load_world(c.require_str("run.world"));
    const auto data = sim::read_transition_log_file(c.require_str("run.data"));
    const sim::Env env(w.cfg, w.catalog);
    const train::TrainConfig tc = train::TrainConfig::from_config(c);
    const model::ModelConfig mc = model_config_for(c, w.cfg);

    eval::AblationConfig acfg;
    acfg.seeds = parse_u64_list(c.get_str("run.seeds", "1,2,3,4,5"), "run.seeds");
    acfg.n_eval_requests = static_cast<std::size_t>(c.get_int("run.requests", 300));
    acfg.pae_band = c.get_double("run.band", acfg.pae_band);
    acfg.lambda_lo = c.get_double("run.lambda_lo", acfg.lambda_lo);
    acfg.lambda_hi = c.get_double("run.lambda_hi", acfg.lambda_hi);
    acfg.max_probes = static_cast<std::size_t>(
        c.get_int("run.probes", static_cast<std::int64_t>(acfg.max_probes)));

    const auto cells = eval::ablation_suite(data, env, mc, tc, acfg);
    std::vector<eval::MetricsReport> reports;
    std::vector<std::string> unmatched;
    for (const auto& cell : cells) {
        std::cout << cell.label << ": mean_reward " << cell.report.mean_reward() << " pae "
                  << cell.report.mean_pae() << " lambda_ad " << cell.lambda_ad << " offsets "
                  << cell.offset_builds << (cell.pae_matched ? "" : "  [exposure not matched]")
                  << "\n";
        reports.push_back(cell.report);
        if (!cell.pae_matched) unmatched.push_back(cell.label);
    }
    if (!unmatched.empty() && !c.get_bool("run.allow_unmatched", false)) {
        std::string who;
        for (const auto& s : unmatched) who += (who.empty() ? "" : ", ") + s;
        throw std::runtime_error("exposure not matched within band for: " + who +
                                 " (no comparative table emitted; use --allow-unmatched, widen "
                                 "run.band or raise run.probes)");
    }
    const std::string out = c.get_str("run.out_report", "");
    if (!out.empty()) {
        eval::write_reports_csv_file(out, reports);
        std::cout << "report " << out << "\n";
    }
    return 0;
}

int cmd_sweep(const Config& c) {
    const World w = load_world(c.require_str("run.world"));
    const auto data = sim::read_transition_log_file(c.require_str("run.data"));
    const sim::Env env(w.cfg, w.catalog);
    const train::TrainConfig tc = train::TrainConfig::from_config(c);
    const model::ModelConfig mc = model_config_for(c, w.cfg);

    const auto param = eval::sweep_param_from_name(c.get_str("run.param", "eta"));
    const auto values = parse_double_list(c.require_str("run.values"), "run.values");
    const auto seeds = parse_u64_list(c.get_str("run.seeds", "1,2,3,4,5"), "run.seeds");
    const auto requests = static_cast<std::size_t>(c.get_int("run.requests", 300));

    const auto cells = eval::sweep(param, values, data, env, mc, tc, seeds, requests);

    std::vector<eval::MetricsReport> reports;
    std::vector<std::pair<double, eval::MetricsReport>> points;
    for (const auto& cell : cells) {
        std::cout << cell.report.label << ": mean_reward " << cell.report.mean_reward()
                  << " r_ad " << cell.report.aggregate(&eval::SeedMetrics::r_ad).mean << " r_ex "
                  << cell.report.aggregate(&eval::SeedMetrics::r_ex).mean << " pae "
                  << cell.report.mean_pae() << "\n";
        reports.push_back(cell.report);
        points.emplace_back(cell.value, cell.report);
    }
    const std::string out = c.get_str("run.out_report", "");
    if (!out.empty()) {
        eval::write_reports_csv_file(out, reports);
        std::cout << "report " << out << "\n";
    }
    const std::string plot = c.get_str("run.out_plot", "");
    if (!plot.empty()) {
        eval::write_plot_data_file(plot, points);
        std::cout << "plot data " << plot << "\n";
    }
    return 0;
}

int cmd_serve(const Config& c) {
    const World w = load_world(c.require_str("run.world"));
    const sim::Env env(w.cfg, w.catalog);
    const model::CrossDqnModel m = load_model(c.require_str("run.checkpoint"), w.cfg);
    const auto t_cache = static_cast<std::size_t>(c.get_int("run.t_cache", 5));
    const auto sessions = static_cast<std::size_t>(c.get_int("run.sessions", 100));
    const auto seed = static_cast<std::uint64_t>(c.get_int("run.seed", 1));

    serve::CachedServer server(m, env, t_cache);
    const auto episodes = server.serve_many(sessions, seed);
    const auto r = serve::reuse_report(episodes);
    std::cout << "served " << r.sessions << " sessions, " << r.screens << " screens, "
              << r.irm_calls << " irm calls, " << r.sdm_calls << " sdm calls, "
              << r.invalidations << " invalidations\n";
    std::cout << "irm savings " << r.irm_savings() << " at t_cache " << t_cache << "\n";

    const std::string out_log = c.get_str("run.out_log", "");
    if (!out_log.empty()) {
        sim::write_transition_log_file(out_log, serve::episode_transitions(episodes, w.cfg));
        std::cout << "episode log " << out_log << "\n";
    }
    const std::string out_report = c.get_str("run.out_report", "");
    if (!out_report.empty()) {
        serve::write_serve_report_file(out_report, episodes, t_cache);
        std::cout << "serve report " << out_report << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross DQN feed allocation: simulator, training and evaluation harness"};
    app.require_subcommand(1);

    RunConfig rc_gen, rc_train, rc_eval, rc_ablate, rc_sweep, rc_serve;

    auto* gen = app.add_subcommand("generate-data",
                                   "generate a synthetic world and an exploratory episode log");
    add_common(gen, rc_gen);
    mirror<std::uint64_t>(gen, rc_gen, "--requests", "run.requests", "requests to roll out");
    mirror<std::uint64_t>(gen, rc_gen, "--seed", "run.seed", "catalog and rollout seed");
    mirror<std::string>(gen, rc_gen, "--out-world", "run.out_world", "world config to write");
    mirror<std::string>(gen, rc_gen, "--out-data", "run.out_data", "transition log to write");

    auto* tr = app.add_subcommand("train", "train a model offline on a logged dataset");
    add_common(tr, rc_train);
    mirror<std::string>(tr, rc_train, "--world", "run.world", "world config from generate-data");
    mirror<std::string>(tr, rc_train, "--data", "run.data", "transition log to train on");
    mirror<std::string>(tr, rc_train, "--out-checkpoint", "run.out_checkpoint",
                        "checkpoint to write");
    mirror<std::string>(tr, rc_train, "--out-log", "run.out_log", "training log to write");
    mirror<std::uint64_t>(tr, rc_train, "--iterations", "train.iterations", "optimizer steps");
    mirror<std::uint64_t>(tr, rc_train, "--batch-size", "train.batch_size", "transitions per step");
    mirror<double>(tr, rc_train, "--alpha", "train.alpha", "ad-ratio penalty weight");
    mirror<double>(tr, rc_train, "--beta", "train.beta", "soft-argmax sharpness");
    mirror<double>(tr, rc_train, "--gamma", "train.gamma", "discount");
    mirror<double>(tr, rc_train, "--eta", "train.eta", "experience reward weight");
    mirror<double>(tr, rc_train, "--lambda-ad", "train.lambda_ad", "ad revenue weight");
    mirror<double>(tr, rc_train, "--lr", "train.lr", "learning rate");
    mirror<std::uint64_t>(tr, rc_train, "--target-sync", "train.target_sync",
                          "steps between target refreshes");
    mirror<std::uint64_t>(tr, rc_train, "--checkpoint-interval", "train.checkpoint_interval",
                          "steps between intermediate checkpoints");
    mirror<std::uint64_t>(tr, rc_train, "--log-every", "train.log_every", "steps between log lines");
    mirror<std::uint64_t>(tr, rc_train, "--seed", "train.seed", "init and sampling seed");
    mirror<std::string>(tr, rc_train, "--variant", "model.variant",
                        "model variant: full, no_mcau or no_sacu");
    mirror<std::uint64_t>(tr, rc_train, "--d-emb", "model.d_emb", "embedding width");

    auto* ev = app.add_subcommand("evaluate", "roll a policy through the simulator and report");
    add_common(ev, rc_eval);
    mirror<std::string>(ev, rc_eval, "--world", "run.world", "world config from generate-data");
    mirror<std::string>(ev, rc_eval, "--policy", "run.policy",
                        "uniform, fixed, gea or crossdqn");
    mirror<std::string>(ev, rc_eval, "--checkpoint", "run.checkpoint",
                        "checkpoint (policy crossdqn)");
    mirror<std::string>(ev, rc_eval, "--fixed-slots", "run.fixed_slots",
                        "1-based ad slots, e.g. 3 or 2,4 (policy fixed)");
    mirror<double>(ev, rc_eval, "--ad-shift", "run.ad_shift",
                   "exposure knob in [-1,1] (policy fixed)");
    mirror<double>(ev, rc_eval, "--beta-prime", "run.beta_prime",
                   "ad spacing exponent (policy gea)");
    mirror<double>(ev, rc_eval, "--theta", "run.theta", "exposure knob (policy gea)");
    mirror<std::uint64_t>(ev, rc_eval, "--requests", "run.requests", "requests per seed");
    mirror<std::string>(ev, rc_eval, "--seeds", "run.seeds", "comma-separated seed list");
    mirror<std::string>(ev, rc_eval, "--label", "run.label", "report label");
    mirror<std::string>(ev, rc_eval, "--out-report", "run.out_report", "report csv to write");

    auto* ab = app.add_subcommand("ablate",
                                  "train and evaluate the four model variants at matched exposure");
    add_common(ab, rc_ablate);
    mirror<std::string>(ab, rc_ablate, "--world", "run.world", "world config from generate-data");
    mirror<std::string>(ab, rc_ablate, "--data", "run.data", "transition log to train on");
    mirror<std::string>(ab, rc_ablate, "--seeds", "run.seeds", "comma-separated seed list");
    mirror<std::uint64_t>(ab, rc_ablate, "--requests", "run.requests", "eval requests per seed");
    mirror<double>(ab, rc_ablate, "--band", "run.band", "exposure matching band");
    mirror<double>(ab, rc_ablate, "--lambda-lo", "run.lambda_lo", "revenue weight bracket low end");
    mirror<double>(ab, rc_ablate, "--lambda-hi", "run.lambda_hi", "revenue weight bracket high end");
    mirror<std::uint64_t>(ab, rc_ablate, "--probes", "run.probes", "calibration probe budget");
    mirror<std::uint64_t>(ab, rc_ablate, "--iterations", "train.iterations", "optimizer steps");
    mirror<std::uint64_t>(ab, rc_ablate, "--batch-size", "train.batch_size",
                          "transitions per step");
    mirror_flag(ab, rc_ablate, "--allow-unmatched", "run.allow_unmatched",
                "emit the table even when exposure matching failed");
    mirror<std::string>(ab, rc_ablate, "--out-report", "run.out_report", "report csv to write");

    auto* sw = app.add_subcommand("sweep", "train and evaluate across one hyperparameter grid");
    add_common(sw, rc_sweep);
    mirror<std::string>(sw, rc_sweep, "--world", "run.world", "world config from generate-data");
    mirror<std::string>(sw, rc_sweep, "--data", "run.data", "transition log to train on");
    mirror<std::string>(sw, rc_sweep, "--param", "run.param", "eta, alpha or beta");
    mirror<std::string>(sw, rc_sweep, "--values", "run.values", "comma-separated grid values");
    mirror<std::string>(sw, rc_sweep, "--seeds", "run.seeds", "comma-separated seed list");
    mirror<std::uint64_t>(sw, rc_sweep, "--requests", "run.requests", "eval requests per seed");
    mirror<std::uint64_t>(sw, rc_sweep, "--iterations", "train.iterations", "optimizer steps");
    mirror<std::uint64_t>(sw, rc_sweep, "--batch-size", "train.batch_size",
                          "transitions per step");
    mirror<std::string>(sw, rc_sweep, "--out-report", "run.out_report", "report csv to write");
    mirror<std::string>(sw, rc_sweep, "--out-plot", "run.out_plot", "plot data file to write");

    auto* sv = app.add_subcommand("serve-sim",
                                  "serve sessions with the multi-screen decision cache");
    add_common(sv, rc_serve);
    mirror<std::string>(sv, rc_serve, "--world", "run.world", "world config from generate-data");
    mirror<std::string>(sv, rc_serve, "--checkpoint", "run.checkpoint", "model checkpoint");
    mirror<std::uint64_t>(sv, rc_serve, "--t-cache", "run.t_cache", "screens planned per refill");
    mirror<std::uint64_t>(sv, rc_serve, "--sessions", "run.sessions", "sessions to serve");
    mirror<std::uint64_t>(sv, rc_serve, "--seed", "run.seed", "session stream seed");
    mirror<std::string>(sv, rc_serve, "--out-log", "run.out_log", "episode log to write");
    mirror<std::string>(sv, rc_serve, "--out-report", "run.out_report", "reuse report to write");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return cmd_generate(rc_gen.resolve());
        if (tr->parsed()) return cmd_train(rc_train.resolve());
        if (ev->parsed()) return cmd_evaluate(rc_eval.resolve());
        if (ab->parsed()) return cmd_ablate(rc_ablate.resolve());
        if (sw->parsed()) return cmd_sweep(rc_sweep.resolve());
        if (sv->parsed()) return cmd_serve(rc_serve.resolve());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 1;
}
