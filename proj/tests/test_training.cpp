#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "crossdqn/training.hpp"
#include "support/gradcheck.hpp"

namespace ad = crossdqn::ad;
namespace sim = crossdqn::sim;
namespace model = crossdqn::model;
namespace train = crossdqn::train;
using crossdqn::Binding;
using crossdqn::Rng;

namespace {

sim::PolicyFn uniform_policy() {
    return [](const sim::RequestState&, const std::vector<sim::ScreenAction>& feas, Rng& rng) {
        return feas[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(feas.size()) - 1))];
    };
}

// Small-footprint environment and model pair for training tests.
sim::EnvConfig small_env_config() {
    sim::EnvConfig e;
    e.k = 3;
    e.ad_queue_len = 3;
    e.oi_queue_len = 6;
    e.max_screens = 3;
    e.catalog.n_ads = 8;
    e.catalog.n_organics = 12;
    e.catalog.n_users = 4;
    return e;
}

model::ModelConfig small_model_config() {
    model::ModelConfig m;
    m.k = 3;
    m.d_emb = 3;
    m.att_dmodel = 3;
    m.irm_widths = {8, 2};
    m.self_att_dmodel = 3;
    m.v_widths = {8, 1};
    m.a_widths = {8, 1};
    return m;
}

sim::Env small_env(std::uint64_t seed) {
    const auto cfg = small_env_config();
    return sim::Env(cfg, sim::generate_catalog(seed, cfg));
}

std::vector<train::ReplayDataset::Ref> all_refs(const train::ReplayDataset& data) {
    std::vector<train::ReplayDataset::Ref> refs;
    for (std::size_t i = 0; i < data.size(); ++i) refs.push_back(data.ref(i));
    return refs;
}

double soft_pae_of_state(const model::CrossDqnModel& m, const sim::Env& env,
                         const sim::RequestState& s, double beta) {
    const auto candidates = sim::feasible_actions(s, env.config().k);
    std::vector<double> paes(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) paes[i] = candidates[i].pae();
    return train::soft_pae_value(m.q_values(s, candidates), paes, beta);
}

}  // namespace

TEST_CASE("train config validates and round trips through the config format") {
    train::TrainConfig t;
    t.alpha = 2.5;
    t.beta = 50.0;
    t.gamma = 0.9;
    t.batch_size = 32;
    t.iterations = 0;  // explicitly allowed: train nothing, keep the init
    t.seed = 99;
    REQUIRE_NOTHROW(t.validate());

    crossdqn::Config c;
    t.to_config(c);
    std::ostringstream os;
    c.write(os);
    const auto back = train::TrainConfig::from_config(crossdqn::Config::parse_string(os.str()));
    REQUIRE(back.alpha == t.alpha);
    REQUIRE(back.beta == t.beta);
    REQUIRE(back.gamma == t.gamma);
    REQUIRE(back.batch_size == t.batch_size);
    REQUIRE(back.iterations == 0);
    REQUIRE(back.seed == t.seed);

    auto bad = t;
    bad.alpha = -1.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = t;
    bad.beta = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = t;
    bad.delta = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = t;
    bad.batch_size = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("replay dataset enforces the transition chain invariant") {
    const auto env = small_env(1);
    Rng rng(2);
    auto good = env.rollout_request(uniform_policy(), rng, 0);
    REQUIRE_NOTHROW(train::ReplayDataset({good}));

    auto gap = good;
    if (gap.transitions.size() < 2) {
        // Force a two-step request so the chain checks have something to bite.
        while (gap.transitions.size() < 2) gap = env.rollout_request(uniform_policy(), rng, 0);
    }
    auto bad = gap;
    bad.transitions[1].t = 5;
    REQUIRE_THROWS_WITH(train::ReplayDataset({bad}),
                        Catch::Matchers::ContainsSubstring("non-consecutive"));
    bad = gap;
    bad.transitions[0].terminal = true;
    REQUIRE_THROWS_WITH(train::ReplayDataset({bad}),
                        Catch::Matchers::ContainsSubstring("past a terminal"));
    bad = gap;
    bad.transitions.back().terminal = false;
    REQUIRE_THROWS_WITH(train::ReplayDataset({bad}),
                        Catch::Matchers::ContainsSubstring("non-terminal"));
    REQUIRE_THROWS_AS(train::ReplayDataset({}), std::invalid_argument);

    const train::ReplayDataset data({gap});
    REQUIRE(data.size() == gap.transitions.size());
    REQUIRE(data.transition(data.ref(1)).t == 1);
}

TEST_CASE("exploratory collection is reproducible and bounded") {
    const auto env = small_env(3);
    const auto a = train::collect_exploratory_data(env, uniform_policy(), 40, 7);
    const auto b = train::collect_exploratory_data(env, uniform_policy(), 40, 7);
    std::ostringstream sa, sb;
    sim::write_transition_log(sa, a);
    sim::write_transition_log(sb, b);
    REQUIRE(sa.str() == sb.str());
    REQUIRE(a.k == env.config().k);
    REQUIRE(a.eta == env.config().eta);

    const auto c = train::collect_exploratory_data(env, uniform_policy(), 40, 8);
    std::ostringstream sc;
    sim::write_transition_log(sc, c);
    REQUIRE(sa.str() != sc.str());

    const auto one = train::collect_exploratory_data(env, uniform_policy(), 1, 7);
    REQUIRE(one.requests.size() == 1);
    REQUIRE(one.requests[0].transitions.size() >= 1);
    REQUIRE(one.requests[0].transitions.size() <= env.config().max_screens);
    REQUIRE_THROWS_AS(train::collect_exploratory_data(env, uniform_policy(), 0, 7),
                      std::invalid_argument);
}

TEST_CASE("uniform behavior policy visits first-screen actions uniformly") {
    const auto env = small_env(5);
    const std::size_t n = 8000;
    const auto data = train::collect_exploratory_data(env, uniform_policy(), n, 11);
    std::vector<std::size_t> counts(8, 0);  // k=3, full queues on screen 0
    for (const auto& log : data.requests) counts[log.transitions[0].action.bits]++;
    const double expect = static_cast<double>(n) / 8.0;
    const double sd = std::sqrt(static_cast<double>(n) * (1.0 / 8.0) * (7.0 / 8.0));
    for (std::size_t bits = 0; bits < 8; ++bits) {
        REQUIRE(std::abs(static_cast<double>(counts[bits]) - expect) < 5.0 * sd);
    }
}

TEST_CASE("soft ad-ratio matches closed forms") {
    SECTION("equal Q values average the candidate ratios") {
        REQUIRE(train::soft_pae_value({1.0, 1.0}, {0.2, 0.4}, 10.0) ==
                Catch::Approx(0.3).margin(1e-12));
        REQUIRE(train::soft_pae_value({-3.0, -3.0, -3.0}, {0.0, 0.3, 0.6}, 7.0) ==
                Catch::Approx(0.3).margin(1e-12));
    }
    SECTION("beta near zero forgets the Q values") {
        REQUIRE(train::soft_pae_value({5.0, -2.0, 0.5}, {0.2, 0.4, 0.6}, 1e-12) ==
                Catch::Approx(0.4).margin(1e-9));
    }
    SECTION("large beta with a clear gap picks the argmax ratio") {
        const double v = train::soft_pae_value({1.0, 0.9, 0.0}, {0.6, 0.2, 0.4}, 100.0);
        REQUIRE(std::abs(v - 0.6) < 1e-3);
        const double w = train::soft_pae_value({-0.5, -0.4}, {0.8, 0.2}, 100.0);
        REQUIRE(std::abs(w - 0.2) < 1e-3);
    }
    SECTION("shifting all Q values changes nothing") {
        const std::vector<double> paes{0.2, 0.4, 0.8};
        const double base = train::soft_pae_value({0.3, -0.1, 0.2}, paes, 10.0);
        const double shifted = train::soft_pae_value({10.3, 9.9, 10.2}, paes, 10.0);
        REQUIRE(base == Catch::Approx(shifted).margin(1e-12));
    }
    SECTION("the result is a convex combination of the ratios") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> q(5), paes(5);
            for (auto& x : q) x = rng.normal(0.0, 2.0);
            for (auto& x : paes) x = rng.uniform01();
            const double v = train::soft_pae_value(q, paes, 3.0);
            REQUIRE(v >= *std::min_element(paes.begin(), paes.end()) - 1e-12);
            REQUIRE(v <= *std::max_element(paes.begin(), paes.end()) + 1e-12);
        }
    }
    SECTION("shape mismatches are rejected") {
        ad::Tensor q(1, 2);
        REQUIRE_THROWS_AS(train::soft_pae(q, {0.2}, 10.0), std::invalid_argument);
        REQUIRE_THROWS_AS(train::soft_pae(q, {}, 10.0), std::invalid_argument);
    }
}

TEST_CASE("loss terms recount from eager Q values") {
    const auto env = small_env(9);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 30, 13);
    const train::ReplayDataset data(data_file.requests);
    model::CrossDqnModel m(small_model_config(), 5);
    const model::CrossDqnModel target(small_model_config(), 6);  // distinct bootstrap net

    train::TrainConfig cfg;
    cfg.alpha = 0.7;
    cfg.beta = 10.0;
    cfg.gamma = 0.9;
    cfg.eta = 2.0;        // differs from the env's collection eta on purpose
    cfg.lambda_ad = 0.5;  // reward is rebuilt from parts
    const auto batch = all_refs(data);

    // Independent recount with the eager inference path.
    double sq_sum = 0.0, spae_sum = 0.0;
    for (const auto& ref : batch) {
        const auto& log = data.request_of(ref);
        const auto& tr = data.transition(ref);
        const auto s = env.materialize_state(log, tr.t);
        const auto candidates = sim::feasible_actions(s, env.config().k);
        const auto q = m.q_values(s, candidates);
        std::size_t ai = candidates.size();
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (candidates[i] == tr.action) ai = i;
        REQUIRE(ai < candidates.size());

        double y = cfg.lambda_ad * tr.r_ad + tr.r_fee + cfg.eta * tr.r_ex;
        if (!tr.terminal) {
            const auto next = env.materialize_state(log, tr.t + 1);
            const auto next_candidates = sim::feasible_actions(next, env.config().k);
            const auto qn = target.q_values(next, next_candidates);
            y += cfg.gamma * *std::max_element(qn.begin(), qn.end());
        }
        const double resid = q[ai] - y;
        sq_sum += resid * resid;

        std::vector<double> paes(candidates.size());
        for (std::size_t i = 0; i < candidates.size(); ++i) paes[i] = candidates[i].pae();
        spae_sum += train::soft_pae_value(q, paes, cfg.beta);
    }
    const double n = static_cast<double>(batch.size());
    const double want_dqn = sq_sum / n;
    const double spae_mean = spae_sum / n;
    const double want_pae = (cfg.delta - spae_mean) * (cfg.delta - spae_mean);

    Binding p(m.params(), nullptr);
    const auto loss = train::batch_loss(p, m, target, env, data, batch, cfg).breakdown();
    REQUIRE(loss.l_dqn == Catch::Approx(want_dqn).epsilon(1e-10));
    REQUIRE(loss.soft_pae_mean == Catch::Approx(spae_mean).epsilon(1e-10));
    REQUIRE(loss.l_pae == Catch::Approx(want_pae).epsilon(1e-10));
    REQUIRE(loss.total == Catch::Approx(loss.l_dqn + cfg.alpha * loss.l_pae).epsilon(1e-12));

    REQUIRE(train::td_loss(m, target, env, data, batch, cfg) ==
            Catch::Approx(want_dqn).epsilon(1e-10));
    REQUIRE(train::pae_aux_loss(m, env, data, batch, cfg) > 0.0);

    // With the penalty switched off the total is the TD loss alone.
    auto plain = cfg;
    plain.alpha = 0.0;
    const auto loss0 = train::batch_loss(p, m, target, env, data, batch, plain).breakdown();
    REQUIRE(loss0.total == loss0.l_dqn);

    // Discount zero reduces the target to the rebuilt reward.
    auto myopic = cfg;
    myopic.gamma = 0.0;
    double sq0 = 0.0;
    for (const auto& ref : batch) {
        const auto& log = data.request_of(ref);
        const auto& tr = data.transition(ref);
        const auto s = env.materialize_state(log, tr.t);
        const auto candidates = sim::feasible_actions(s, env.config().k);
        const auto q = m.q_values(s, candidates);
        std::size_t ai = 0;
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (candidates[i] == tr.action) ai = i;
        const double resid =
            q[ai] - (myopic.lambda_ad * tr.r_ad + tr.r_fee + myopic.eta * tr.r_ex);
        sq0 += resid * resid;
    }
    REQUIRE(train::td_loss(m, target, env, data, batch, myopic) ==
            Catch::Approx(sq0 / n).epsilon(1e-10));
}

TEST_CASE("bootstrap is zero at terminals and maximal over successors") {
    const auto env = small_env(15);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 20, 3);
    const model::CrossDqnModel target(small_model_config(), 8);
    for (const auto& log : data_file.requests) {
        for (const auto& tr : log.transitions) {
            const double b = train::td_bootstrap(target, env, log, tr);
            if (tr.terminal) {
                REQUIRE(b == 0.0);
            } else {
                const auto next = env.materialize_state(log, tr.t + 1);
                const auto candidates = sim::feasible_actions(next, env.config().k);
                const auto q = target.q_values(next, candidates);
                REQUIRE(b == *std::max_element(q.begin(), q.end()));
            }
        }
    }
}

TEST_CASE("logged actions that are infeasible in their own state are an error") {
    const auto env = small_env(21);
    auto data_file = train::collect_exploratory_data(env, uniform_policy(), 5, 3);
    auto& log = data_file.requests[0];
    log.ad_ids.resize(1);  // pretend only one ad was queued
    log.transitions.resize(1);
    log.transitions[0].action = sim::ScreenAction::from_string("110");
    log.transitions[0].terminal = true;

    const train::ReplayDataset data(data_file.requests);
    const model::CrossDqnModel m(small_model_config(), 2);
    train::TrainConfig cfg;
    REQUIRE_THROWS_WITH(train::td_loss(m, m, env, data, {data.ref(0)}, cfg),
                        Catch::Matchers::ContainsSubstring("infeasible"));
}

TEST_CASE("batch loss gradients agree with finite differences end to end") {
    const auto env = small_env(33);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 6, 5);
    const train::ReplayDataset data(data_file.requests);
    model::CrossDqnModel m(small_model_config(), 4);
    const model::CrossDqnModel target(small_model_config(), 9);  // fixed bootstrap

    train::TrainConfig cfg;
    cfg.alpha = 1.5;
    cfg.beta = 8.0;
    cfg.gamma = 0.95;
    const std::vector<train::ReplayDataset::Ref> batch{data.ref(0), data.ref(1), data.ref(2)};

    const auto res = testsupport::check_params(
        m.params(),
        [&](Binding& p) { return train::batch_loss(p, m, target, env, data, batch, cfg).total; },
        1e-6, 3);
    INFO(res.worst);
    REQUIRE(res.checked > 150);
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("training keeps the bootstrap network frozen between syncs") {
    const auto env = small_env(41);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 30, 7);
    train::TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.iterations = 0;
    cfg.target_sync = 3;
    cfg.lr = 0.01;
    train::Trainer trainer(model::CrossDqnModel(small_model_config(), 10),
                           train::ReplayDataset(data_file.requests), env, cfg);

    auto snapshot = [](const model::CrossDqnModel& m) {
        std::ostringstream os;
        m.save_checkpoint(os);
        return os.str();
    };
    const std::string init = snapshot(trainer.model());
    REQUIRE(snapshot(trainer.target()) == init);

    trainer.step();
    trainer.step();
    REQUIRE(snapshot(trainer.model()) != init);       // live net moved
    REQUIRE(snapshot(trainer.target()) == init);       // bootstrap net did not
    trainer.step();                                    // third step syncs
    REQUIRE(snapshot(trainer.target()) == snapshot(trainer.model()));
}

TEST_CASE("zero iterations leave the parameters at their initialization") {
    const auto env = small_env(43);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 10, 7);
    train::TrainConfig cfg;
    cfg.iterations = 0;
    const model::CrossDqnModel init(small_model_config(), 77);
    std::ostringstream want;
    init.save_checkpoint(want);

    train::Trainer trainer(model::CrossDqnModel(small_model_config(), 77),
                           train::ReplayDataset(data_file.requests), env, cfg);
    std::ostringstream log;
    trainer.run(&log);
    std::ostringstream got;
    trainer.model().save_checkpoint(got);
    REQUIRE(got.str() == want.str());
    REQUIRE(trainer.history().empty());

    std::istringstream back(log.str());
    REQUIRE(train::read_train_log(back).empty());
}

TEST_CASE("training log round trips and rejects corruption") {
    std::ostringstream os;
    os << train::kTrainLogHeader << "\n";
    train::TrainLogEntry e1{1, {0.5, 0.01, 0.51, 0.3}, 12.375};
    train::TrainLogEntry e2{2, {0.25, 0.0025, 0.2525, 0.27}, 8.5};
    train::write_train_log_entry(os, e1);
    train::write_train_log_entry(os, e2);
    os << "end\n";

    std::istringstream is(os.str());
    const auto entries = train::read_train_log(is);
    REQUIRE(entries.size() == 2);
    REQUIRE(entries[0].step == 1);
    REQUIRE(entries[0].loss.l_dqn == 0.5);
    REQUIRE(entries[0].loss.l_pae == 0.01);
    REQUIRE(entries[0].loss.total == 0.51);
    REQUIRE(entries[0].loss.soft_pae_mean == 0.3);
    REQUIRE(entries[0].wall_ms == 12.375);
    REQUIRE(entries[1].step == 2);
    REQUIRE(entries[1].loss.total == 0.2525);

    auto reject = [](const std::string& text) {
        std::istringstream bad(text);
        REQUIRE_THROWS_AS(train::read_train_log(bad), std::runtime_error);
    };
    reject("not-a-log\n");
    reject(std::string(train::kTrainLogHeader) + "\nstep 1 l_dqn oops\nend\n");
    reject(std::string(train::kTrainLogHeader) + "\n");  // missing end
}

TEST_CASE("a short run reduces the TD loss and logs every step") {
    const auto env = small_env(47);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 60, 17);
    train::TrainConfig cfg;
    cfg.alpha = 0.0;
    cfg.batch_size = 16;
    cfg.iterations = 40;
    cfg.target_sync = 10;
    cfg.lr = 3e-3;
    cfg.seed = 5;
    train::Trainer trainer(model::CrossDqnModel(small_model_config(), 1),
                           train::ReplayDataset(data_file.requests), env, cfg);
    std::ostringstream log;
    std::size_t checkpoints = 0;
    trainer.run(&log, [&](std::size_t, const model::CrossDqnModel&) { ++checkpoints; });
    REQUIRE(checkpoints == 1);  // interval 0 means final checkpoint only

    std::istringstream back(log.str());
    const auto entries = train::read_train_log(back);
    REQUIRE(entries.size() == 40);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        head += entries[i].loss.l_dqn;
        tail += entries[entries.size() - 1 - i].loss.l_dqn;
    }
    REQUIRE(tail < head);  // five-step averages, start vs end
    REQUIRE(trainer.history().size() == 40);
}

TEST_CASE("the ad-ratio penalty pulls the soft ratio toward the target") {
    // Same data, same seeds, one run with the penalty and one without; the
    // penalized run must land its mean soft ad ratio closer to delta.
    const auto env = small_env(53);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 80, 23);

    double dev_with = 0.0, dev_without = 0.0;
    const std::uint64_t seeds[] = {1, 2, 3, 4, 5};
    for (const auto seed : seeds) {
        auto run = [&](double alpha) {
            train::TrainConfig cfg;
            cfg.alpha = alpha;
            cfg.beta = 10.0;
            cfg.batch_size = 16;
            cfg.iterations = 50;
            cfg.target_sync = 10;
            cfg.lr = 5e-3;
            cfg.seed = seed;
            train::Trainer trainer(model::CrossDqnModel(small_model_config(), seed),
                                   train::ReplayDataset(data_file.requests), env, cfg);
            trainer.run();

            // Evaluate the mean soft ratio on fresh states.
            Rng rng(crossdqn::derive_seed(seed, 0xEEAAull));
            double spae = 0.0;
            const int n_states = 20;
            for (int i = 0; i < n_states; ++i)
                spae += soft_pae_of_state(trainer.model(), env, env.new_request(rng), cfg.beta);
            return spae / n_states;
        };
        dev_with += std::abs(run(10.0) - 0.25);
        dev_without += std::abs(run(0.0) - 0.25);
    }
    REQUIRE(dev_with < dev_without);
}

TEST_CASE("divergence aborts with a step-stamped error") {
    const auto env = small_env(59);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 20, 29);
    train::TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.iterations = 10;
    cfg.lr = 1e30;  // guarantees an overflow on the second pass
    train::Trainer trainer(model::CrossDqnModel(small_model_config(), 3),
                           train::ReplayDataset(data_file.requests), env, cfg);
    REQUIRE_THROWS_WITH(trainer.run(), Catch::Matchers::ContainsSubstring("training diverged"));
}

TEST_CASE("trainer rejects a model that disagrees with the environment") {
    const auto env = small_env(61);
    const auto data_file = train::collect_exploratory_data(env, uniform_policy(), 5, 31);
    model::ModelConfig wrong = small_model_config();
    wrong.k = 5;
    REQUIRE_THROWS_AS(train::Trainer(model::CrossDqnModel(wrong, 1),
                                     train::ReplayDataset(data_file.requests), env,
                                     train::TrainConfig{}),
                      std::invalid_argument);
}
