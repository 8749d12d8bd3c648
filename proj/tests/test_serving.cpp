#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "crossdqn/policies.hpp"
#include "crossdqn/serving.hpp"

namespace sim = crossdqn::sim;
namespace model = crossdqn::model;
namespace serve = crossdqn::serve;
namespace policy = crossdqn::policy;
using crossdqn::Binding;
using crossdqn::Rng;

namespace {

model::ModelConfig serving_model_config() {
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

// Queues deep enough that a plan is never cut short by exhaustion, and a
// user that always keeps scrolling, so sessions run the full screen cap.
sim::EnvConfig uniform_session_env_config() {
    sim::EnvConfig e;
    e.k = 3;
    e.ad_queue_len = 18;
    e.oi_queue_len = 18;
    e.max_screens = 5;
    e.behavior.pulldown_base = 1.0;
    e.behavior.pulldown_screen_decay = 1.0;
    e.behavior.pulldown_per_ad = 1.0;
    e.catalog.n_ads = 10;
    e.catalog.n_organics = 14;
    e.catalog.n_users = 4;
    return e;
}

sim::EnvConfig mixed_session_env_config() {
    sim::EnvConfig e = uniform_session_env_config();
    e.behavior.pulldown_base = 0.8;  // sessions now end at random lengths
    e.behavior.pulldown_screen_decay = 0.9;
    e.behavior.pulldown_per_ad = 0.95;
    return e;
}

std::string log_text(const std::vector<serve::EpisodeRecord>& eps, const sim::EnvConfig& cfg) {
    std::ostringstream os;
    sim::write_transition_log(os, serve::episode_transitions(eps, cfg));
    return os.str();
}

}  // namespace

TEST_CASE("cached server validates its construction and inputs") {
    const auto ecfg = uniform_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(1, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 1);
    REQUIRE_THROWS_AS(serve::CachedServer(m, env, 0), std::invalid_argument);

    auto wrong = serving_model_config();
    wrong.k = 5;
    const model::CrossDqnModel mk(wrong, 1);
    REQUIRE_THROWS_AS(serve::CachedServer(mk, env, 3), std::invalid_argument);

    serve::CachedServer server(m, env, 3);
    REQUIRE_THROWS_AS(server.serve_many(0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(serve::reuse_report({}), std::invalid_argument);
    serve::ReuseReport empty;
    REQUIRE_THROWS_AS(empty.irm_savings(), std::logic_error);
}

TEST_CASE("sliced embeddings answer exactly like a fresh forward pass") {
    const auto ecfg = uniform_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(5, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 7);
    Rng rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        sim::RequestState s = env.new_request(rng);
        Binding p(m.params(), nullptr);
        const model::IrmOutput irm = m.irm_forward(p, s);

        std::size_t used_ads = 0, used_ois = 0;
        for (int screen = 0; screen < 3; ++screen) {
            const auto cands = sim::feasible_actions(s.ad_queue.size() - used_ads,
                                                     s.oi_queue.size() - used_ois, ecfg.k);
            REQUIRE(!cands.empty());
            const auto sliced = m.q_values_from_irm(irm.slice(used_ads, used_ois), cands);

            sim::RequestState fresh = s;
            fresh.ad_queue.erase(fresh.ad_queue.begin(),
                                 fresh.ad_queue.begin() + static_cast<long>(used_ads));
            fresh.oi_queue.erase(fresh.oi_queue.begin(),
                                 fresh.oi_queue.begin() + static_cast<long>(used_ois));
            const auto full = m.q_values(fresh, cands);
            REQUIRE(sliced == full);  // bitwise, not approximately

            const auto a = cands[model::argmax_index(sliced)];
            used_ads += static_cast<std::size_t>(a.num_ads());
            used_ois += static_cast<std::size_t>(a.num_organics());
        }
    }
}

TEST_CASE("uniform full-length sessions hit the expected reuse ratios") {
    const auto ecfg = uniform_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(9, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 2);

    SECTION("cache depth 5 embeds once per session") {
        serve::CachedServer server(m, env, 5);
        const auto eps = server.serve_many(20, 11);
        for (const auto& e : eps) {
            REQUIRE(e.counters.screens == 5);
            REQUIRE(e.log.transitions.size() == 5);
            REQUIRE(e.counters.irm_calls == 1);
            REQUIRE(e.counters.sdm_calls == 5);
            REQUIRE(e.counters.invalidations == 0);
        }
        const auto r = serve::reuse_report(eps);
        REQUIRE(r.sessions == 20);
        REQUIRE(r.screens == 100);
        REQUIRE(r.irm_calls == 20);
        REQUIRE(r.irm_savings() == 0.8);
    }
    SECTION("cache depth 1 embeds every screen, saving nothing") {
        serve::CachedServer server(m, env, 1);
        const auto eps = server.serve_many(10, 11);
        for (const auto& e : eps) {
            REQUIRE(e.counters.irm_calls == e.counters.screens);
            REQUIRE(e.counters.sdm_calls == e.counters.screens);
        }
        REQUIRE(serve::reuse_report(eps).irm_savings() == 0.0);
    }
    SECTION("cache depth 2 refills mid-session") {
        serve::CachedServer server(m, env, 2);
        const auto eps = server.serve_many(10, 11);
        for (const auto& e : eps) {
            REQUIRE(e.counters.screens == 5);
            REQUIRE(e.counters.irm_calls == 3);  // plans of 2, 2, 2 for 5 screens
            REQUIRE(e.counters.sdm_calls == 6);
        }
    }
}

TEST_CASE("cache depth changes work done but not the actions taken") {
    const auto ecfg = mixed_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(13, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 4);

    serve::CachedServer shallow(m, env, 1);
    serve::CachedServer deep(m, env, 5);
    const auto eps1 = shallow.serve_many(60, 21);
    const auto eps5 = deep.serve_many(60, 21);
    REQUIRE(log_text(eps1, ecfg) == log_text(eps5, ecfg));

    const auto r1 = serve::reuse_report(eps1);
    const auto r5 = serve::reuse_report(eps5);
    REQUIRE(r1.screens == r5.screens);
    REQUIRE(r5.irm_calls < r1.irm_calls);

    // Repeatability in the seed.
    REQUIRE(log_text(deep.serve_many(60, 21), ecfg) == log_text(eps5, ecfg));
    REQUIRE(log_text(deep.serve_many(60, 22), ecfg) != log_text(eps5, ecfg));
}

TEST_CASE("serving a session equals rolling out the greedy policy") {
    const auto ecfg = mixed_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(17, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 6);

    serve::CachedServer server(m, env, 1);
    const std::uint64_t seed = 31;
    const auto eps = server.serve_many(40, seed);

    sim::TransitionLogFile rolled;
    rolled.k = ecfg.k;
    rolled.eta = ecfg.eta;
    Rng rng(crossdqn::derive_seed(seed, 0x5EEE7411ull));  // the server's stream
    const auto greedy = policy::greedy_model(m);
    for (std::uint64_t i = 0; i < 40; ++i)
        rolled.requests.push_back(env.rollout_request(greedy, rng, i));

    std::ostringstream os;
    sim::write_transition_log(os, rolled);
    REQUIRE(os.str() == log_text(eps, ecfg));
}

TEST_CASE("mixed-length sessions recount refills from the logs") {
    const auto ecfg = mixed_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(23, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 8);
    const std::size_t t_cache = 3;
    serve::CachedServer server(m, env, t_cache);
    const auto eps = server.serve_many(120, 41);

    std::uint64_t irm_recount = 0, screens = 0;
    bool saw_short = false, saw_full = false;
    for (const auto& e : eps) {
        const std::size_t s = e.log.transitions.size();
        REQUIRE(e.counters.screens == s);
        REQUIRE(e.counters.invalidations == 0);
        // Deep queues mean every plan has t_cache entries, so refills are
        // just how many plan windows the session touched.
        const std::uint64_t want = (s + t_cache - 1) / t_cache;
        REQUIRE(e.counters.irm_calls == want);
        REQUIRE(e.counters.sdm_calls == want * t_cache);
        irm_recount += want;
        screens += s;
        (s < ecfg.max_screens ? saw_short : saw_full) = true;
    }
    REQUIRE(saw_short);  // the mix actually mixed
    REQUIRE(saw_full);

    const auto r = serve::reuse_report(eps);
    REQUIRE(r.irm_calls == irm_recount);
    REQUIRE(r.irm_savings() ==
            1.0 - static_cast<double>(irm_recount) / static_cast<double>(screens));
}

TEST_CASE("serve reports and episode logs round trip") {
    const auto ecfg = uniform_session_env_config();
    const sim::Env env(ecfg, sim::generate_catalog(29, ecfg));
    const model::CrossDqnModel m(serving_model_config(), 10);
    serve::CachedServer server(m, env, 5);
    const auto eps = server.serve_many(8, 51);

    std::ostringstream os;
    serve::write_serve_report(os, eps, 5);
    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    REQUIRE(line == serve::kServeReportHeader);
    REQUIRE(std::getline(is, line));
    REQUIRE(line == "t_cache 5");
    std::size_t session_lines = 0;
    bool saw_total = false, saw_savings = false, saw_end = false;
    while (std::getline(is, line)) {
        if (line.rfind("session ", 0) == 0) ++session_lines;
        if (line.rfind("total ", 0) == 0) {
            saw_total = true;
            std::istringstream ls(line);
            std::string kw;
            std::uint64_t sessions, screens, irm, sdm, inval;
            ls >> kw >> kw >> sessions >> kw >> screens >> kw >> irm >> kw >> sdm >> kw >> inval;
            const auto r = serve::reuse_report(eps);
            REQUIRE(sessions == r.sessions);
            REQUIRE(screens == r.screens);
            REQUIRE(irm == r.irm_calls);
            REQUIRE(sdm == r.sdm_calls);
        }
        if (line.rfind("irm_savings ", 0) == 0) {
            saw_savings = true;
            REQUIRE(crossdqn::hexfloat::parse(line.substr(12)) ==
                    serve::reuse_report(eps).irm_savings());
        }
        if (line == "end") saw_end = true;
    }
    REQUIRE(session_lines == 8);
    REQUIRE(saw_total);
    REQUIRE(saw_savings);
    REQUIRE(saw_end);

    // The transition view of the same sessions uses the shared format.
    const auto file = serve::episode_transitions(eps, ecfg);
    std::ostringstream to;
    sim::write_transition_log(to, file);
    std::istringstream ti(to.str());
    const auto back = sim::read_transition_log(ti);
    REQUIRE(back.requests.size() == eps.size());
    std::ostringstream to2;
    sim::write_transition_log(to2, back);
    REQUIRE(to2.str() == to.str());
}
