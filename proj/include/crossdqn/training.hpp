#pragma once

// Offline Q-learning on logged feed transitions. The TD target bootstraps
// over the *feasible* actions of the successor state, and a batch-level
// soft-argmax ad-ratio penalty steers the learned policy toward the
// configured exposure target without per-step reward shaping.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crossdqn/config.hpp"
#include "crossdqn/model.hpp"
#include "crossdqn/params.hpp"
#include "crossdqn/rng.hpp"
#include "crossdqn/sim.hpp"
#include "crossdqn/tensor.hpp"

namespace crossdqn::train {

struct TrainConfig {
    double alpha = 1.0;       // weight of the ad-ratio penalty
    double beta = 10.0;       // soft-argmax sharpness
    double gamma = 1.0;       // discount
    double delta = 0.25;      // target ad ratio
    double eta = 1.0;         // exposure reward weight (reward is rebuilt from logged parts)
    double lambda_ad = 1.0;   // ad revenue weight, used when tuning constraint-matched ablations
    double lr = 1e-3;
    std::size_t batch_size = 256;
    std::size_t iterations = 2000;
    std::size_t target_sync = 500;  // steps between target refreshes; 0 = bootstrap on live params
    std::size_t log_every = 1;
    std::size_t checkpoint_interval = 0;  // 0 = only the final checkpoint
    std::uint64_t seed = 1;

    void validate() const {
        if (!(alpha >= 0.0)) throw std::invalid_argument("train: alpha must be >= 0");
        if (!(beta > 0.0)) throw std::invalid_argument("train: beta must be > 0");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("train: gamma outside [0,1]");
        if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("train: delta outside (0,1)");
        if (!(eta >= 0.0)) throw std::invalid_argument("train: eta must be >= 0");
        if (!(lambda_ad >= 0.0)) throw std::invalid_argument("train: lambda_ad must be >= 0");
        if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be > 0");
        if (batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
        if (log_every == 0) throw std::invalid_argument("train: log_every must be >= 1");
    }

    void to_config(Config& c, const std::string& prefix = "train") const {
        c.set(prefix + ".alpha", alpha);
        c.set(prefix + ".beta", beta);
        c.set(prefix + ".gamma", gamma);
        c.set(prefix + ".delta", delta);
        c.set(prefix + ".eta", eta);
        c.set(prefix + ".lambda_ad", lambda_ad);
        c.set(prefix + ".lr", lr);
        c.set(prefix + ".batch_size", static_cast<std::uint64_t>(batch_size));
        c.set(prefix + ".iterations", static_cast<std::uint64_t>(iterations));
        c.set(prefix + ".target_sync", static_cast<std::uint64_t>(target_sync));
        c.set(prefix + ".log_every", static_cast<std::uint64_t>(log_every));
        c.set(prefix + ".checkpoint_interval", static_cast<std::uint64_t>(checkpoint_interval));
        c.set(prefix + ".seed", seed);
    }

    static TrainConfig from_config(const Config& c, const std::string& prefix = "train") {
        TrainConfig t;
        t.alpha = c.get_double(prefix + ".alpha", t.alpha);
        t.beta = c.get_double(prefix + ".beta", t.beta);
        t.gamma = c.get_double(prefix + ".gamma", t.gamma);
        t.delta = c.get_double(prefix + ".delta", t.delta);
        t.eta = c.get_double(prefix + ".eta", t.eta);
        t.lambda_ad = c.get_double(prefix + ".lambda_ad", t.lambda_ad);
        t.lr = c.get_double(prefix + ".lr", t.lr);
        t.batch_size = static_cast<std::size_t>(c.get_int(prefix + ".batch_size",
                                                          static_cast<std::int64_t>(t.batch_size)));
        t.iterations = static_cast<std::size_t>(c.get_int(prefix + ".iterations",
                                                          static_cast<std::int64_t>(t.iterations)));
        t.target_sync = static_cast<std::size_t>(c.get_int(prefix + ".target_sync",
                                                           static_cast<std::int64_t>(t.target_sync)));
        t.log_every = static_cast<std::size_t>(c.get_int(prefix + ".log_every",
                                                         static_cast<std::int64_t>(t.log_every)));
        t.checkpoint_interval = static_cast<std::size_t>(c.get_int(
            prefix + ".checkpoint_interval", static_cast<std::int64_t>(t.checkpoint_interval)));
        t.seed = static_cast<std::uint64_t>(c.get_int(prefix + ".seed",
                                                      static_cast<std::int64_t>(t.seed)));
        t.validate();
        return t;
    }
};

/// Flat view over logged requests. Checks the chain invariant up front:
/// inside a request, every transition except the last is non-terminal and
/// the screen indices are consecutive from zero, so any non-terminal
/// sample has exactly one successor to bootstrap from.
class ReplayDataset {
  public:
    struct Ref {
        std::uint32_t request = 0;
        std::uint32_t index = 0;
    };

    explicit ReplayDataset(std::vector<sim::RequestLog> requests) : requests_(std::move(requests)) {
        for (std::size_t r = 0; r < requests_.size(); ++r) {
            const auto& trs = requests_[r].transitions;
            for (std::size_t i = 0; i < trs.size(); ++i) {
                if (trs[i].t != i)
                    throw std::runtime_error("replay data error: request " +
                                             std::to_string(requests_[r].request_id) +
                                             " has non-consecutive screen indices");
                if (i + 1 < trs.size() && trs[i].terminal)
                    throw std::runtime_error("replay data error: request " +
                                             std::to_string(requests_[r].request_id) +
                                             " continues past a terminal transition");
                if (i + 1 == trs.size() && !trs[i].terminal)
                    throw std::runtime_error("replay data error: request " +
                                             std::to_string(requests_[r].request_id) +
                                             " ends on a non-terminal transition");
                index_.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(i)});
            }
        }
        if (index_.empty()) throw std::invalid_argument("replay dataset has no transitions");
    }

    std::size_t size() const { return index_.size(); }
    Ref ref(std::size_t flat) const { return index_.at(flat); }
    const sim::RequestLog& request_of(Ref r) const { return requests_.at(r.request); }
    const sim::Transition& transition(Ref r) const {
        return requests_.at(r.request).transitions.at(r.index);
    }
    const std::vector<sim::RequestLog>& requests() const { return requests_; }

  private:
    std::vector<sim::RequestLog> requests_;
    std::vector<Ref> index_;
};

/// Rolls out `n_requests` full sessions under `policy` and packages them as
/// a transition log. Behavior draws are independent of the reward weights,
/// so one dataset can be retrained under any (eta, lambda_ad) pair.
inline sim::TransitionLogFile collect_exploratory_data(const sim::Env& env,
                                                       const sim::PolicyFn& policy,
                                                       std::size_t n_requests, std::uint64_t seed) {
    if (n_requests == 0) throw std::invalid_argument("collect_exploratory_data: zero requests");
    Rng rng(derive_seed(seed, 0xC011EC7Dull));
    sim::TransitionLogFile f;
    f.k = env.config().k;
    f.eta = env.config().eta;
    f.requests.reserve(n_requests);
    for (std::size_t i = 0; i < n_requests; ++i)
        f.requests.push_back(env.rollout_request(policy, rng, i));
    return f;
}

/// Expected ad ratio under the soft-argmax distribution over one state's
/// candidate actions. `q` is the 1 x N row of Q values, `paes[i]` the ad
/// ratio of candidate i. Differentiable through `q`.
inline ad::Tensor soft_pae(const ad::Tensor& q, const std::vector<double>& paes, double beta) {
    if (q.rows != 1 || q.cols != paes.size() || paes.empty())
        throw std::invalid_argument("soft_pae: shape mismatch");
    const ad::Tensor weights = ad::softmax_rows(ad::scale(q, beta));
    ad::Tensor pae_row(1, paes.size());
    pae_row.data = paes;
    return ad::sum_all(ad::hadamard(weights, pae_row));
}

inline double soft_pae_value(const std::vector<double>& q, const std::vector<double>& paes,
                             double beta) {
    ad::Tensor row(1, q.size());
    row.data = q;
    return soft_pae(row, paes, beta).item();
}

struct LossBreakdown {
    double l_dqn = 0.0;
    double l_pae = 0.0;
    double total = 0.0;
    double soft_pae_mean = 0.0;
};

/// Loss terms still attached to the tape, so callers can differentiate the
/// total or inspect the parts.
struct LossTensors {
    ad::Tensor l_dqn;
    ad::Tensor l_pae;
    ad::Tensor total;
    ad::Tensor soft_pae_mean;

    LossBreakdown breakdown() const {
        return LossBreakdown{l_dqn.item(), l_pae.item(), total.item(), soft_pae_mean.item()};
    }
};

namespace detail {

inline std::size_t locate_action(const std::vector<sim::ScreenAction>& candidates,
                                 const sim::ScreenAction& a, std::uint64_t request_id) {
    // Candidates are in ascending bit order, so binary search works.
    const auto it = std::lower_bound(
        candidates.begin(), candidates.end(), a.bits,
        [](const sim::ScreenAction& c, std::uint32_t bits) { return c.bits < bits; });
    if (it == candidates.end() || it->bits != a.bits)
        throw std::runtime_error("replay data error: request " + std::to_string(request_id) +
                                 " logged action " + a.to_string() +
                                 " is infeasible in its own state");
    return static_cast<std::size_t>(it - candidates.begin());
}

}  // namespace detail

/// Bootstrap value for one transition: the best Q value among the
/// successor's feasible actions under `boot`, computed off-tape so no
/// gradient ever reaches the target parameters. Terminal transitions
/// contribute zero.
inline double td_bootstrap(const model::CrossDqnModel& boot, const sim::Env& env,
                           const sim::RequestLog& log, const sim::Transition& tr) {
    if (tr.terminal) return 0.0;
    const sim::RequestState next = env.materialize_state(log, tr.t + 1);
    const auto candidates = sim::feasible_actions(next, env.config().k);
    if (candidates.empty())
        throw std::runtime_error("replay data error: request " + std::to_string(log.request_id) +
                                 " non-terminal transition has no feasible successor action");
    const std::vector<double> q = boot.q_values(next, candidates);
    return *std::max_element(q.begin(), q.end());
}

/// TD, auxiliary and combined losses for one batch of transition
/// references. `target` supplies the bootstrap Q values; pass the live
/// model itself to train without a target network. The reward is rebuilt
/// from logged components as lambda_ad*r_ad + r_fee + eta*r_ex, so the
/// reward weights may differ from the ones used when collecting the data.
inline LossTensors batch_loss(Binding& p, const model::CrossDqnModel& m,
                              const model::CrossDqnModel& target, const sim::Env& env,
                              const ReplayDataset& data,
                              const std::vector<ReplayDataset::Ref>& batch,
                              const TrainConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    std::vector<ad::Tensor> residuals, spaes;
    residuals.reserve(batch.size());
    spaes.reserve(batch.size());
    for (const auto& ref : batch) {
        const auto& log = data.request_of(ref);
        const auto& tr = data.transition(ref);

        const sim::RequestState s = env.materialize_state(log, tr.t);
        const auto candidates = sim::feasible_actions(s, env.config().k);
        const std::size_t ai = detail::locate_action(candidates, tr.action, log.request_id);

        const model::IrmOutput irm = m.irm_forward(p, s);
        const ad::Tensor q = m.q_row(p, irm, candidates);
        const ad::Tensor q_sa = ad::slice_cols(q, ai, ai + 1);

        const double r = cfg.lambda_ad * tr.r_ad + tr.r_fee + cfg.eta * static_cast<double>(tr.r_ex);
        const double y = r + cfg.gamma * td_bootstrap(target, env, log, tr);
        residuals.push_back(ad::sub(q_sa, ad::Tensor::scalar(y)));

        std::vector<double> paes(candidates.size());
        for (std::size_t i = 0; i < candidates.size(); ++i) paes[i] = candidates[i].pae();
        spaes.push_back(soft_pae(q, paes, cfg.beta));
    }

    LossTensors out;
    out.l_dqn = ad::mean_all(ad::square(ad::concat_rows(residuals)));
    out.soft_pae_mean = ad::mean_all(ad::concat_rows(spaes));
    out.l_pae = ad::square(ad::sub(ad::Tensor::scalar(cfg.delta), out.soft_pae_mean));
    out.total = ad::add(out.l_dqn, ad::scale(out.l_pae, cfg.alpha));
    return out;
}

/// Eager TD loss alone, for inspection and oracle tests.
inline double td_loss(const model::CrossDqnModel& m, const model::CrossDqnModel& target,
                      const sim::Env& env, const ReplayDataset& data,
                      const std::vector<ReplayDataset::Ref>& batch, const TrainConfig& cfg) {
    Binding p(m.params(), nullptr);
    return batch_loss(p, m, target, env, data, batch, cfg).l_dqn.item();
}

/// Eager batch-level ad-ratio penalty alone: (delta - mean soft PAE)^2.
inline double pae_aux_loss(const model::CrossDqnModel& m, const sim::Env& env,
                           const ReplayDataset& data,
                           const std::vector<ReplayDataset::Ref>& batch, const TrainConfig& cfg) {
    Binding p(m.params(), nullptr);
    return batch_loss(p, m, m, env, data, batch, cfg).l_pae.item();
}

// Training log, one line per step.
//   crossdqn-trainlog-v1
//   step 1 l_dqn <hex> l_pae <hex> total <hex> soft_pae <hex> wall_ms 12.375
//   end
constexpr const char* kTrainLogHeader = "crossdqn-trainlog-v1";

struct TrainLogEntry {
    std::size_t step = 0;
    LossBreakdown loss;
    double wall_ms = 0.0;
};

inline void write_train_log_entry(std::ostream& os, const TrainLogEntry& e) {
    os << "step " << e.step << " l_dqn " << hexfloat::format(e.loss.l_dqn) << " l_pae "
       << hexfloat::format(e.loss.l_pae) << " total " << hexfloat::format(e.loss.total)
       << " soft_pae " << hexfloat::format(e.loss.soft_pae_mean) << " wall_ms " << e.wall_ms
       << "\n";
}

inline std::vector<TrainLogEntry> read_train_log(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kTrainLogHeader)
        throw std::runtime_error("training log: bad header");
    std::vector<TrainLogEntry> out;
    bool closed = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line == "end") {
            closed = true;
            break;
        }
        std::istringstream ls(line);
        std::string kw, v;
        TrainLogEntry e;
        auto expect = [&](const char* want) {
            if (!(ls >> kw >> v) || kw != want)
                throw std::runtime_error("training log: malformed line '" + line + "'");
            return v;
        };
        e.step = std::stoull(expect("step"));
        e.loss.l_dqn = hexfloat::parse(expect("l_dqn"));
        e.loss.l_pae = hexfloat::parse(expect("l_pae"));
        e.loss.total = hexfloat::parse(expect("total"));
        e.loss.soft_pae_mean = hexfloat::parse(expect("soft_pae"));
        e.wall_ms = std::stod(expect("wall_ms"));
        out.push_back(e);
    }
    if (!closed) throw std::runtime_error("training log: missing end marker");
    return out;
}

inline std::vector<TrainLogEntry> read_train_log_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open training log: " + path);
    return read_train_log(is);
}

class Trainer {
  public:
    using CheckpointFn = std::function<void(std::size_t step, const model::CrossDqnModel&)>;

    Trainer(model::CrossDqnModel m, ReplayDataset dataset, sim::Env env, TrainConfig cfg)
        : model_(std::move(m)),
          target_(model_),
          dataset_(std::move(dataset)),
          env_(std::move(env)),
          cfg_(cfg),
          rng_(derive_seed(cfg.seed, 0x7D10BA7Cull)) {
        cfg_.validate();
        if (model_.config().k != env_.config().k)
            throw std::invalid_argument("trainer: model and environment disagree on slot count");
    }

    const model::CrossDqnModel& model() const { return model_; }
    model::CrossDqnModel& model() { return model_; }
    const model::CrossDqnModel& target() const { return target_; }
    const std::vector<TrainLogEntry>& history() const { return history_; }
    const TrainConfig& config() const { return cfg_; }

    /// One optimizer step on a uniformly sampled batch.
    LossBreakdown step() {
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<ReplayDataset::Ref> batch;
        batch.reserve(cfg_.batch_size);
        for (std::size_t b = 0; b < cfg_.batch_size; ++b)
            batch.push_back(dataset_.ref(static_cast<std::size_t>(
                rng_.uniform_int(0, static_cast<std::int64_t>(dataset_.size()) - 1))));

        ad::Tape tape;
        Binding p(model_.params(), &tape);
        const model::CrossDqnModel& boot = cfg_.target_sync > 0 ? target_ : model_;
        const LossTensors loss = batch_loss(p, model_, boot, env_, dataset_, batch, cfg_);

        const LossBreakdown out = loss.breakdown();
        if (std::abs(out.total - (out.l_dqn + cfg_.alpha * out.l_pae)) >
            1e-9 * std::max(1.0, std::abs(out.total)))
            throw std::logic_error("loss breakdown does not add up");
        if (!std::isfinite(out.total))
            throw std::runtime_error("training diverged at step " + std::to_string(step_ + 1) +
                                     ": non-finite loss");

        tape.backward(loss.total);
        AdamConfig adam;
        adam.lr = cfg_.lr;
        model_.params().adam_step(tape, p, adam);

        ++step_;
        if (cfg_.target_sync > 0 && step_ % cfg_.target_sync == 0) target_ = model_;

        const auto t1 = std::chrono::steady_clock::now();
        last_wall_ms_ = std::chrono::duration<double, std::milli>(t1 - t0).count();
        return out;
    }

    /// Full run. Writes one log line per `log_every` steps plus always the
    /// final step; invokes `checkpoint` at the configured interval.
    void run(std::ostream* log_stream = nullptr, const CheckpointFn& checkpoint = {}) {
        if (log_stream) *log_stream << kTrainLogHeader << "\n";
        for (std::size_t i = 1; i <= cfg_.iterations; ++i) {
            TrainLogEntry e;
            e.loss = step();
            e.step = i;
            e.wall_ms = last_wall_ms_;
            history_.push_back(e);
            if (log_stream && (i % cfg_.log_every == 0 || i == cfg_.iterations)) {
                write_train_log_entry(*log_stream, e);
                log_stream->flush();
            }
            if (checkpoint && cfg_.checkpoint_interval > 0 && i % cfg_.checkpoint_interval == 0 &&
                i != cfg_.iterations)
                checkpoint(i, model_);
        }
        if (log_stream) {
            *log_stream << "end\n";
            log_stream->flush();
        }
        if (checkpoint) checkpoint(cfg_.iterations, model_);
    }

  private:
    model::CrossDqnModel model_;
    model::CrossDqnModel target_;
    ReplayDataset dataset_;
    sim::Env env_;
    TrainConfig cfg_;
    Rng rng_;
    std::size_t step_ = 0;
    double last_wall_ms_ = 0.0;
    std::vector<TrainLogEntry> history_;
};

}  // namespace crossdqn::train
