#pragma once

// Cached greedy serving. Item embeddings are precomputed once per cache
// refill and sliced per screen; because every embedding op treats queue
// rows independently, sliced Q values are bit-identical to a fresh full
// forward pass. With T_cache > 1 the greedy actions for the next T_cache
// screens are decided at refill time by rolling the deterministic item
// consumption forward, so intermediate screens cost no embedding work.

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crossdqn/model.hpp"
#include "crossdqn/rng.hpp"
#include "crossdqn/sim.hpp"

namespace crossdqn::serve {

struct SessionCounters {
    std::uint64_t screens = 0;
    std::uint64_t irm_calls = 0;  // one per cache refill
    std::uint64_t sdm_calls = 0;  // one per planned screen decision
    std::uint64_t invalidations = 0;  // cached action infeasible at execution time
};

struct EpisodeRecord {
    sim::RequestLog log;
    SessionCounters counters;
};

struct ReuseReport {
    std::uint64_t sessions = 0;
    std::uint64_t screens = 0;
    std::uint64_t irm_calls = 0;
    std::uint64_t sdm_calls = 0;
    std::uint64_t invalidations = 0;

    /// Fraction of per-screen embedding work avoided, relative to running
    /// the full model once per screen.
    double irm_savings() const {
        if (screens == 0) throw std::logic_error("reuse report: no screens served");
        return 1.0 - static_cast<double>(irm_calls) / static_cast<double>(screens);
    }
};

inline ReuseReport reuse_report(const std::vector<EpisodeRecord>& episodes) {
    if (episodes.empty()) throw std::invalid_argument("reuse_report: no sessions");
    ReuseReport r;
    r.sessions = episodes.size();
    for (const auto& e : episodes) {
        r.screens += e.counters.screens;
        r.irm_calls += e.counters.irm_calls;
        r.sdm_calls += e.counters.sdm_calls;
        r.invalidations += e.counters.invalidations;
    }
    return r;
}

class CachedServer {
  public:
    CachedServer(const model::CrossDqnModel& m, const sim::Env& env, std::size_t t_cache)
        : model_(&m), env_(&env), t_cache_(t_cache) {
        if (t_cache_ == 0) throw std::invalid_argument("CachedServer: t_cache must be >= 1");
        if (m.config().k != env.config().k)
            throw std::invalid_argument("CachedServer: model and environment disagree on slot count");
    }

    /// Serves one session end to end: greedy action, user reaction, next
    /// screen, until the user leaves or a queue can no longer fill a screen.
    EpisodeRecord serve_request(Rng& rng, std::uint64_t request_id) {
        sim::RequestState s = env_->new_request(rng);
        EpisodeRecord ep;
        ep.log.request_id = request_id;
        ep.log.user_id = s.user_id;
        ep.log.context = s.context;
        ep.log.ad_ids = s.ad_queue;
        ep.log.oi_ids = s.oi_queue;

        std::vector<sim::ScreenAction> plan;
        std::size_t plan_pos = 0;
        while (true) {
            if (sim::feasible_actions(s, env_->config().k).empty()) break;
            if (plan_pos == plan.size()) {
                plan = plan_screens(s, ep.counters);
                plan_pos = 0;
                if (plan.empty()) break;
            }
            sim::ScreenAction a = plan[plan_pos++];
            if (static_cast<std::size_t>(a.num_ads()) > s.ad_queue.size() ||
                static_cast<std::size_t>(a.num_organics()) > s.oi_queue.size()) {
                // The deterministic consumption path no longer matches the
                // live queues; drop the stale tail and replan from here.
                ++ep.counters.invalidations;
                plan = plan_screens(s, ep.counters);
                plan_pos = 0;
                if (plan.empty()) break;
                a = plan[plan_pos++];
            }
            auto [tr, next] = env_->step(s, a, rng);
            ep.log.transitions.push_back(tr);
            ++ep.counters.screens;
            if (tr.terminal) break;
            s = std::move(next);
        }
        return ep;
    }

    std::vector<EpisodeRecord> serve_many(std::size_t n_sessions, std::uint64_t seed) {
        if (n_sessions == 0) throw std::invalid_argument("serve_many: zero sessions");
        Rng rng(derive_seed(seed, 0x5EEE7411ull));
        std::vector<EpisodeRecord> out;
        out.reserve(n_sessions);
        for (std::size_t i = 0; i < n_sessions; ++i) out.push_back(serve_request(rng, i));
        return out;
    }

  private:
    /// One embedding pass on the live queues, then greedy decisions for up
    /// to t_cache screens against sliced views of that single computation.
    std::vector<sim::ScreenAction> plan_screens(const sim::RequestState& s,
                                                SessionCounters& counters) const {
        Binding p(model_->params(), nullptr);
        const model::IrmOutput irm = model_->irm_forward(p, s);
        ++counters.irm_calls;

        std::vector<sim::ScreenAction> plan;
        std::size_t used_ads = 0, used_ois = 0;
        for (std::size_t j = 0; j < t_cache_; ++j) {
            const auto cands = sim::feasible_actions(s.ad_queue.size() - used_ads,
                                                     s.oi_queue.size() - used_ois,
                                                     env_->config().k);
            if (cands.empty()) break;
            const auto q = model_->q_values_from_irm(irm.slice(used_ads, used_ois), cands);
            ++counters.sdm_calls;
            const sim::ScreenAction a = cands[model::argmax_index(q)];
            plan.push_back(a);
            used_ads += static_cast<std::size_t>(a.num_ads());
            used_ois += static_cast<std::size_t>(a.num_organics());
        }
        return plan;
    }

    const model::CrossDqnModel* model_;
    const sim::Env* env_;
    std::size_t t_cache_;
};

// Reuse report, one session per line.
//   crossdqn-servereport-v1
//   t_cache 5
//   session 0 screens 5 irm 1 sdm 5 invalidations 0
//   total sessions 100 screens 500 irm 100 sdm 500 invalidations 0
//   irm_savings 0x1.999999999999ap-1
//   end
constexpr const char* kServeReportHeader = "crossdqn-servereport-v1";

inline void write_serve_report(std::ostream& os, const std::vector<EpisodeRecord>& episodes,
                               std::size_t t_cache) {
    const ReuseReport r = reuse_report(episodes);
    os << kServeReportHeader << "\n";
    os << "t_cache " << t_cache << "\n";
    for (const auto& e : episodes)
        os << "session " << e.log.request_id << " screens " << e.counters.screens << " irm "
           << e.counters.irm_calls << " sdm " << e.counters.sdm_calls << " invalidations "
           << e.counters.invalidations << "\n";
    os << "total sessions " << r.sessions << " screens " << r.screens << " irm " << r.irm_calls
       << " sdm " << r.sdm_calls << " invalidations " << r.invalidations << "\n";
    os << "irm_savings " << hexfloat::format(r.irm_savings()) << "\n";
    os << "end\n";
}

inline void write_serve_report_file(const std::string& path,
                                    const std::vector<EpisodeRecord>& episodes,
                                    std::size_t t_cache) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write serve report '" + path + "'");
    write_serve_report(os, episodes, t_cache);
}

/// The episode transitions alone, in the shared transition log format.
inline sim::TransitionLogFile episode_transitions(const std::vector<EpisodeRecord>& episodes,
                                                  const sim::EnvConfig& env_cfg) {
    sim::TransitionLogFile f;
    f.k = env_cfg.k;
    f.eta = env_cfg.eta;
    f.requests.reserve(episodes.size());
    for (const auto& e : episodes) f.requests.push_back(e.log);
    return f;
}

}  // namespace crossdqn::serve
