#pragma once

// Allocation policies used for data collection and as evaluation baselines.
// All of them speak sim::PolicyFn: candidates arrive in ascending bit
// order and are already filtered for queue feasibility.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "crossdqn/model.hpp"
#include "crossdqn/rng.hpp"
#include "crossdqn/sim.hpp"

namespace crossdqn::policy {

inline sim::PolicyFn uniform_random() {
    return [](const sim::RequestState&, const std::vector<sim::ScreenAction>& candidates,
              Rng& rng) {
        return candidates[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
    };
}

inline sim::PolicyFn greedy_model(const model::CrossDqnModel& m) {
    return [&m](const sim::RequestState& s, const std::vector<sim::ScreenAction>& candidates,
                Rng&) {
        return candidates[model::argmax_index(m.q_values(s, candidates))];
    };
}

inline sim::PolicyFn epsilon_greedy(const model::CrossDqnModel& m, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0))
        throw std::invalid_argument("epsilon_greedy: epsilon outside [0,1]");
    return [&m, epsilon](const sim::RequestState& s,
                         const std::vector<sim::ScreenAction>& candidates, Rng& rng) {
        if (rng.bernoulli(epsilon))
            return candidates[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
        return candidates[model::argmax_index(m.q_values(s, candidates))];
    };
}

namespace detail {

/// Clamps a desired slot assignment to the queues: surplus ads are dropped
/// from the highest slots first; if organics cannot fill the rest, ads are
/// added at the lowest free slots.
inline sim::ScreenAction clamp_to_queues(std::uint32_t bits, std::size_t k, std::size_t n_ad,
                                         std::size_t n_oi) {
    auto ones = [](std::uint32_t v) { return static_cast<std::size_t>(std::popcount(v)); };
    for (std::size_t i = k; i-- > 0 && ones(bits) > n_ad;) bits &= ~(1u << i);
    for (std::size_t i = 0; i < k && k - ones(bits) > n_oi; ++i) bits |= 1u << i;
    if (ones(bits) > n_ad || k - ones(bits) > n_oi)
        throw std::logic_error("fixed policy: screen cannot be filled");
    return sim::ScreenAction{bits, static_cast<std::uint8_t>(k)};
}

}  // namespace detail

/// Ads at a fixed set of 1-based slot positions on every screen. The
/// signed `ad_shift` knob exists for exposure matching in comparisons:
/// with probability |ad_shift| one extra ad is added at the lowest free
/// slot (knob > 0) or one pattern ad is dropped from the highest slot
/// (knob < 0).
inline sim::PolicyFn fixed_slots(std::set<std::size_t> pattern, double ad_shift = 0.0) {
    if (!(ad_shift >= -1.0 && ad_shift <= 1.0))
        throw std::invalid_argument("fixed_slots: ad_shift outside [-1,1]");
    return [pattern = std::move(pattern), ad_shift](const sim::RequestState& s,
                                                    const std::vector<sim::ScreenAction>& candidates,
                                                    Rng& rng) {
        const std::size_t k = candidates.front().k;
        std::uint32_t bits = 0;
        for (std::size_t slot : pattern) {
            if (slot < 1 || slot > k) throw std::invalid_argument("fixed_slots: slot outside 1..K");
            bits |= 1u << (slot - 1);
        }
        if (ad_shift > 0.0 && rng.bernoulli(ad_shift)) {
            for (std::size_t i = 0; i < k; ++i)
                if (!(bits & (1u << i))) {
                    bits |= 1u << i;
                    break;
                }
        } else if (ad_shift < 0.0 && rng.bernoulli(-ad_shift)) {
            for (std::size_t i = k; i-- > 0;)
                if (bits & (1u << i)) {
                    bits &= ~(1u << i);
                    break;
                }
        }
        return detail::clamp_to_queues(bits, k, s.ad_queue.size(), s.oi_queue.size());
    };
}

/// Greedy joint ranking: each slot takes whichever queue front has the
/// higher rank score, ads first on ties, queue order preserved within each
/// type. An ad's score is (CTR x charge + price x takerate) scaled by
/// exp(beta_prime x d), where d counts slots since the previous ad on this
/// screen (the screen top acts as the previous ad for the first slot).
/// Organic items score CTR x charge + price x takerate = price x takerate
/// since organics carry no charge. `theta` is the exposure-matching knob:
/// ad scores are additionally scaled by exp(theta). The simulator's latent
/// base CTR stands in for a learned CTR estimate.
inline sim::PolicyFn gea(double beta_prime, double theta = 0.0) {
    return [beta_prime, theta](const sim::RequestState& s,
                               const std::vector<sim::ScreenAction>& candidates, Rng&) {
        const std::size_t k = candidates.front().k;
        std::uint32_t bits = 0;
        std::size_t next_ad = 0, next_oi = 0;
        std::size_t last_ad_pos = 0;  // 1-based; 0 = virtual ad above the screen
        for (std::size_t i = 1; i <= k; ++i) {
            const bool ad_left = next_ad < s.ad_queue.size();
            const bool oi_left = next_oi < s.oi_queue.size();
            bool place_ad;
            if (!ad_left && !oi_left) throw std::logic_error("gea: both queues exhausted");
            if (!ad_left) {
                place_ad = false;
            } else if (!oi_left) {
                place_ad = true;
            } else {
                const sim::Item& ad = s.ad(next_ad);
                const sim::Item& oi = s.oi(next_oi);
                const double d = static_cast<double>(i - last_ad_pos);
                const double rs_ad = (ad.base_ctr * ad.charge + ad.price * ad.takerate) *
                                     std::exp(beta_prime * d) * std::exp(theta);
                const double rs_oi = oi.base_ctr * oi.charge + oi.price * oi.takerate;
                place_ad = rs_ad >= rs_oi;
            }
            if (place_ad) {
                bits |= 1u << (i - 1);
                ++next_ad;
                last_ad_pos = i;
            } else {
                ++next_oi;
            }
        }
        return sim::ScreenAction{bits, static_cast<std::uint8_t>(k)};
    };
}

}  // namespace crossdqn::policy
