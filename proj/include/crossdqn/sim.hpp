#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crossdqn/config.hpp"
#include "crossdqn/params.hpp"
#include "crossdqn/rng.hpp"

namespace crossdqn::sim {

constexpr std::size_t kStrongFeatures = 7;

/// One ad or organic listing. `features` feeds the learned representation;
/// the strong features (price, charge, takerate, discount, delivery fee,
/// delivery time, comment score) bypass it. base_ctr/base_cvr are the
/// simulator's latent ground truth, never shown to policies except where a
/// baseline is documented to receive them.
struct Item {
    std::uint32_t id = 0;
    bool is_ad = false;
    std::uint32_t category = 0;
    std::vector<double> features;
    double price = 0, charge = 0, takerate = 0, discount = 0;
    double delivery_fee = 0, delivery_time = 0, comment_score = 0;
    double base_ctr = 0, base_cvr = 0;

    std::vector<double> strong_features() const {
        return {price, charge, takerate, discount, delivery_fee, delivery_time, comment_score};
    }

    bool operator==(const Item&) const = default;
};

struct UserProfile {
    std::uint32_t id = 0;
    std::vector<double> features;
    std::vector<std::uint32_t> behavior;  // item ids, length n_b >= 1
    double ad_tolerance = 0.5;            // latent, in [0,1]

    bool operator==(const UserProfile&) const = default;
};

struct Catalog {
    std::vector<Item> items;  // item.id == index; ads first, then organics
    std::vector<std::uint32_t> ad_ids;
    std::vector<std::uint32_t> oi_ids;
    std::vector<UserProfile> users;

    bool operator==(const Catalog&) const = default;

    Config to_config() const {
        Config c;
        c.set("catalog.n_items", static_cast<std::uint64_t>(items.size()));
        c.set("catalog.n_ads", static_cast<std::uint64_t>(ad_ids.size()));
        c.set("catalog.n_users", static_cast<std::uint64_t>(users.size()));
        for (const auto& it : items) {
            const std::string p = "item." + std::to_string(it.id);
            c.set(p + ".kind", std::string(it.is_ad ? "ad" : "organic"));
            c.set(p + ".category", static_cast<std::uint64_t>(it.category));
            c.set(p + ".features", join_hex(it.features));
            c.set(p + ".strong", join_hex(it.strong_features()));
            c.set(p + ".base_ctr", hexfloat::format(it.base_ctr));
            c.set(p + ".base_cvr", hexfloat::format(it.base_cvr));
        }
        for (const auto& u : users) {
            const std::string p = "user." + std::to_string(u.id);
            c.set(p + ".features", join_hex(u.features));
            c.set(p + ".behavior", join_ids(u.behavior));
            c.set(p + ".ad_tolerance", hexfloat::format(u.ad_tolerance));
        }
        return c;
    }

    static Catalog from_config(const Config& c) {
        Catalog cat;
        const auto n_items = static_cast<std::size_t>(c.get_int("catalog.n_items", -1));
        const auto n_users = static_cast<std::size_t>(c.get_int("catalog.n_users", -1));
        if (n_items == static_cast<std::size_t>(-1) || n_users == static_cast<std::size_t>(-1))
            throw std::runtime_error("catalog config: missing item/user counts");
        for (std::size_t i = 0; i < n_items; ++i) {
            const std::string p = "item." + std::to_string(i);
            Item it;
            it.id = static_cast<std::uint32_t>(i);
            const std::string kind = c.require_str(p + ".kind");
            if (kind != "ad" && kind != "organic")
                throw std::runtime_error("catalog config: bad kind '" + kind + "'");
            it.is_ad = kind == "ad";
            it.category = static_cast<std::uint32_t>(c.get_int(p + ".category", 0));
            it.features = c.get_double_list(p + ".features", {});
            const auto strong = c.get_double_list(p + ".strong", {});
            if (strong.size() != kStrongFeatures)
                throw std::runtime_error("catalog config: bad strong feature count");
            it.price = strong[0];
            it.charge = strong[1];
            it.takerate = strong[2];
            it.discount = strong[3];
            it.delivery_fee = strong[4];
            it.delivery_time = strong[5];
            it.comment_score = strong[6];
            it.base_ctr = c.get_double(p + ".base_ctr", 0);
            it.base_cvr = c.get_double(p + ".base_cvr", 0);
            (it.is_ad ? cat.ad_ids : cat.oi_ids).push_back(it.id);
            cat.items.push_back(std::move(it));
        }
        for (std::size_t i = 0; i < n_users; ++i) {
            const std::string p = "user." + std::to_string(i);
            UserProfile u;
            u.id = static_cast<std::uint32_t>(i);
            u.features = c.get_double_list(p + ".features", {});
            for (double v : c.get_double_list(p + ".behavior", {}))
                u.behavior.push_back(static_cast<std::uint32_t>(v));
            u.ad_tolerance = c.get_double(p + ".ad_tolerance", 0.5);
            cat.users.push_back(std::move(u));
        }
        return cat;
    }

  private:
    static std::string join_hex(const std::vector<double>& xs) {
        std::string s;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (i) s += ",";
            s += hexfloat::format(xs[i]);
        }
        return s;
    }
    static std::string join_ids(const std::vector<std::uint32_t>& xs) {
        std::string s;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(xs[i]);
        }
        return s;
    }
};

/// Knobs of the generative user model. Click probability is
///   base_ctr * position_decay^slot * arrangement_multiplier
/// where the arrangement multiplier penalizes ads next to ads and boosts
/// organics next to ads, matching the qualitative shape the network is
/// supposed to detect. Continue-to-next-screen probability is log-linear
/// in screen index and ads shown.
struct BehaviorModelConfig {
    double ad_adjacency_penalty = 0.65;   // ad-slot CTR multiplier per adjacent ad
    double organic_contrast_boost = 1.25; // organic-slot CTR multiplier per adjacent ad
    double position_decay = 0.92;         // CTR multiplier per slot index
    double pulldown_base = 0.85;          // continue probability at screen 0, no ads
    double pulldown_screen_decay = 0.93;  // continue multiplier per screen index
    double pulldown_per_ad = 0.90;        // continue multiplier per ad shown (tolerance-scaled)

    void validate() const {
        for (double v : {ad_adjacency_penalty, organic_contrast_boost, position_decay,
                         pulldown_base, pulldown_screen_decay, pulldown_per_ad})
            if (!(v > 0.0)) throw std::invalid_argument("behavior config: multipliers must be > 0");
    }
};

struct CatalogGenConfig {
    std::size_t n_ads = 60;
    std::size_t n_organics = 120;
    std::size_t n_users = 40;
    std::size_t n_categories = 8;
    double ctr_mean_ad = 0.14;
    double ctr_mean_oi = 0.18;
    double ctr_spread = 0.08;
    double cvr_mean = 0.30;
    double cvr_spread = 0.15;
    double price_lo = 0.5, price_hi = 4.0;
    double charge_lo = 0.2, charge_hi = 1.2;
    double takerate_lo = 0.05, takerate_hi = 0.20;
};

struct EnvConfig {
    std::size_t k = 5;
    std::size_t ad_queue_len = 6;
    std::size_t oi_queue_len = 20;
    std::size_t f_item = 4;
    std::size_t f_user = 3;
    std::size_t f_ctx = 2;
    std::size_t n_b = 6;
    std::size_t max_screens = 5;
    double eta = 1.0;
    double gamma = 1.0;
    BehaviorModelConfig behavior;
    CatalogGenConfig catalog;

    void validate() const {
        if (k < 1 || k > 20) throw std::invalid_argument("env config: k out of range [1,20]");
        if (n_b < 1) throw std::invalid_argument("env config: n_b must be >= 1");
        if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("env config: gamma outside [0,1]");
        behavior.validate();
    }

    void to_config(Config& c) const {
        c.set("env.k", static_cast<std::uint64_t>(k));
        c.set("env.ad_queue_len", static_cast<std::uint64_t>(ad_queue_len));
        c.set("env.oi_queue_len", static_cast<std::uint64_t>(oi_queue_len));
        c.set("env.f_item", static_cast<std::uint64_t>(f_item));
        c.set("env.f_user", static_cast<std::uint64_t>(f_user));
        c.set("env.f_ctx", static_cast<std::uint64_t>(f_ctx));
        c.set("env.n_b", static_cast<std::uint64_t>(n_b));
        c.set("env.max_screens", static_cast<std::uint64_t>(max_screens));
        c.set("env.eta", eta);
        c.set("env.gamma", gamma);
        c.set("env.behavior.ad_adjacency_penalty", behavior.ad_adjacency_penalty);
        c.set("env.behavior.organic_contrast_boost", behavior.organic_contrast_boost);
        c.set("env.behavior.position_decay", behavior.position_decay);
        c.set("env.behavior.pulldown_base", behavior.pulldown_base);
        c.set("env.behavior.pulldown_screen_decay", behavior.pulldown_screen_decay);
        c.set("env.behavior.pulldown_per_ad", behavior.pulldown_per_ad);
        c.set("env.catalog.n_ads", static_cast<std::uint64_t>(catalog.n_ads));
        c.set("env.catalog.n_organics", static_cast<std::uint64_t>(catalog.n_organics));
        c.set("env.catalog.n_users", static_cast<std::uint64_t>(catalog.n_users));
        c.set("env.catalog.n_categories", static_cast<std::uint64_t>(catalog.n_categories));
        c.set("env.catalog.ctr_mean_ad", catalog.ctr_mean_ad);
        c.set("env.catalog.ctr_mean_oi", catalog.ctr_mean_oi);
        c.set("env.catalog.ctr_spread", catalog.ctr_spread);
        c.set("env.catalog.cvr_mean", catalog.cvr_mean);
        c.set("env.catalog.cvr_spread", catalog.cvr_spread);
        c.set("env.catalog.price_lo", catalog.price_lo);
        c.set("env.catalog.price_hi", catalog.price_hi);
        c.set("env.catalog.charge_lo", catalog.charge_lo);
        c.set("env.catalog.charge_hi", catalog.charge_hi);
        c.set("env.catalog.takerate_lo", catalog.takerate_lo);
        c.set("env.catalog.takerate_hi", catalog.takerate_hi);
    }

    static EnvConfig from_config(const Config& c) {
        EnvConfig e;
        e.k = static_cast<std::size_t>(c.get_int("env.k", static_cast<std::int64_t>(e.k)));
        e.ad_queue_len = static_cast<std::size_t>(
            c.get_int("env.ad_queue_len", static_cast<std::int64_t>(e.ad_queue_len)));
        e.oi_queue_len = static_cast<std::size_t>(
            c.get_int("env.oi_queue_len", static_cast<std::int64_t>(e.oi_queue_len)));
        e.f_item = static_cast<std::size_t>(c.get_int("env.f_item", static_cast<std::int64_t>(e.f_item)));
        e.f_user = static_cast<std::size_t>(c.get_int("env.f_user", static_cast<std::int64_t>(e.f_user)));
        e.f_ctx = static_cast<std::size_t>(c.get_int("env.f_ctx", static_cast<std::int64_t>(e.f_ctx)));
        e.n_b = static_cast<std::size_t>(c.get_int("env.n_b", static_cast<std::int64_t>(e.n_b)));
        e.max_screens = static_cast<std::size_t>(
            c.get_int("env.max_screens", static_cast<std::int64_t>(e.max_screens)));
        e.eta = c.get_double("env.eta", e.eta);
        e.gamma = c.get_double("env.gamma", e.gamma);
        auto& b = e.behavior;
        b.ad_adjacency_penalty = c.get_double("env.behavior.ad_adjacency_penalty", b.ad_adjacency_penalty);
        b.organic_contrast_boost =
            c.get_double("env.behavior.organic_contrast_boost", b.organic_contrast_boost);
        b.position_decay = c.get_double("env.behavior.position_decay", b.position_decay);
        b.pulldown_base = c.get_double("env.behavior.pulldown_base", b.pulldown_base);
        b.pulldown_screen_decay = c.get_double("env.behavior.pulldown_screen_decay", b.pulldown_screen_decay);
        b.pulldown_per_ad = c.get_double("env.behavior.pulldown_per_ad", b.pulldown_per_ad);
        auto& g = e.catalog;
        g.n_ads = static_cast<std::size_t>(c.get_int("env.catalog.n_ads", static_cast<std::int64_t>(g.n_ads)));
        g.n_organics = static_cast<std::size_t>(
            c.get_int("env.catalog.n_organics", static_cast<std::int64_t>(g.n_organics)));
        g.n_users = static_cast<std::size_t>(
            c.get_int("env.catalog.n_users", static_cast<std::int64_t>(g.n_users)));
        g.n_categories = static_cast<std::size_t>(
            c.get_int("env.catalog.n_categories", static_cast<std::int64_t>(g.n_categories)));
        g.ctr_mean_ad = c.get_double("env.catalog.ctr_mean_ad", g.ctr_mean_ad);
        g.ctr_mean_oi = c.get_double("env.catalog.ctr_mean_oi", g.ctr_mean_oi);
        g.ctr_spread = c.get_double("env.catalog.ctr_spread", g.ctr_spread);
        g.cvr_mean = c.get_double("env.catalog.cvr_mean", g.cvr_mean);
        g.cvr_spread = c.get_double("env.catalog.cvr_spread", g.cvr_spread);
        g.price_lo = c.get_double("env.catalog.price_lo", g.price_lo);
        g.price_hi = c.get_double("env.catalog.price_hi", g.price_hi);
        g.charge_lo = c.get_double("env.catalog.charge_lo", g.charge_lo);
        g.charge_hi = c.get_double("env.catalog.charge_hi", g.charge_hi);
        g.takerate_lo = c.get_double("env.catalog.takerate_lo", g.takerate_lo);
        g.takerate_hi = c.get_double("env.catalog.takerate_hi", g.takerate_hi);
        e.validate();
        return e;
    }
};

/// K-bit slot assignment: bit i set means slot i (top of the screen is
/// slot 0) shows an ad. The numeric value of `bits` orders actions for
/// enumeration and tie-breaking. Rendered as a string, slot 0 is the
/// leftmost character: (0,1,0,0,1) <-> "01001".
struct ScreenAction {
    std::uint32_t bits = 0;
    std::uint8_t k = 0;

    bool ad_at(std::size_t slot) const { return (bits >> slot) & 1u; }
    int num_ads() const { return std::popcount(bits); }
    int num_organics() const { return static_cast<int>(k) - num_ads(); }
    double pae() const { return static_cast<double>(num_ads()) / static_cast<double>(k); }

    std::string to_string() const {
        std::string s(k, '0');
        for (std::size_t i = 0; i < k; ++i)
            if (ad_at(i)) s[i] = '1';
        return s;
    }

    static ScreenAction from_string(const std::string& s) {
        if (s.empty() || s.size() > 20) throw std::invalid_argument("ScreenAction: bad bit string");
        ScreenAction a;
        a.k = static_cast<std::uint8_t>(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '1')
                a.bits |= 1u << i;
            else if (s[i] != '0')
                throw std::invalid_argument("ScreenAction: bad bit character");
        }
        return a;
    }

    bool operator==(const ScreenAction&) const = default;
};

inline double pae_of_action(const ScreenAction& a) { return a.pae(); }

/// MDP state: remaining queues (item ids, front first), the user, request
/// context and screen index. Queue order is never permuted; consumption
/// only pops from the front.
struct RequestState {
    const Catalog* catalog = nullptr;
    std::vector<std::uint32_t> ad_queue;
    std::vector<std::uint32_t> oi_queue;
    std::uint32_t user_id = 0;
    std::vector<double> context;
    std::size_t screen_index = 0;

    const Item& ad(std::size_t j) const { return catalog->items[ad_queue[j]]; }
    const Item& oi(std::size_t j) const { return catalog->items[oi_queue[j]]; }
    const UserProfile& user() const { return catalog->users[user_id]; }
};

/// Every K-bit pattern the remaining queues can realize, in ascending
/// numeric order. Empty result means the request is terminal.
inline std::vector<ScreenAction> feasible_actions(std::size_t n_ad, std::size_t n_oi,
                                                  std::size_t k) {
    std::vector<ScreenAction> out;
    if (n_ad + n_oi < k) return out;
    for (std::uint32_t v = 0; v < (1u << k); ++v) {
        const auto ones = static_cast<std::size_t>(std::popcount(v));
        if (ones <= n_ad && (k - ones) <= n_oi)
            out.push_back(ScreenAction{v, static_cast<std::uint8_t>(k)});
    }
    return out;
}

inline std::vector<ScreenAction> feasible_actions(const RequestState& s, std::size_t k) {
    return feasible_actions(s.ad_queue.size(), s.oi_queue.size(), k);
}

struct ScreenOutcome {
    std::uint32_t clicks = 0;  // bit i: slot i clicked
    std::uint32_t orders = 0;  // bit i: slot i ordered (implies clicked)
    bool pulled_down = false;
};

/// One logged step. Queues are reconstructed from the request header plus
/// the consumption implied by earlier actions, so states are not stored.
struct Transition {
    std::size_t t = 0;
    ScreenAction action;
    std::uint32_t clicks = 0;
    std::uint32_t orders = 0;
    double r_ad = 0, r_fee = 0;
    int r_ex = 0;
    double reward = 0;
    bool terminal = false;
};

struct RequestLog {
    std::uint64_t request_id = 0;
    std::uint32_t user_id = 0;
    std::vector<double> context;
    std::vector<std::uint32_t> ad_ids;  // initial ad queue
    std::vector<std::uint32_t> oi_ids;  // initial organic queue
    std::vector<Transition> transitions;
};

using PolicyFn =
    std::function<ScreenAction(const RequestState&, const std::vector<ScreenAction>&, Rng&)>;

class Env {
  public:
    Env(EnvConfig cfg, Catalog catalog) : cfg_(std::move(cfg)), catalog_(std::move(catalog)) {
        cfg_.validate();
        if (catalog_.users.empty()) throw std::invalid_argument("Env: catalog has no users");
    }

    const EnvConfig& config() const { return cfg_; }
    const Catalog& catalog() const { return catalog_; }

    /// Items occupying each slot under `a`: ads from the queue front fill
    /// the 1-slots in order, organics fill the 0-slots in order.
    std::vector<const Item*> screen_items(const RequestState& s, const ScreenAction& a) const {
        require_feasible(s, a);
        std::vector<const Item*> out(cfg_.k);
        std::size_t next_ad = 0, next_oi = 0;
        for (std::size_t i = 0; i < cfg_.k; ++i)
            out[i] = a.ad_at(i) ? &s.ad(next_ad++) : &s.oi(next_oi++);
        return out;
    }

    /// Closed-form per-slot click probabilities for action `a` in state
    /// `s`. simulate_screen draws Bernoullis against exactly these values,
    /// which is what makes Monte Carlo checks against them meaningful.
    std::vector<double> screen_click_probs(const RequestState& s, const ScreenAction& a) const {
        const auto items = screen_items(s, a);
        std::vector<double> p(cfg_.k);
        for (std::size_t i = 0; i < cfg_.k; ++i) {
            int adj = 0;
            if (i > 0 && a.ad_at(i - 1)) ++adj;
            if (i + 1 < cfg_.k && a.ad_at(i + 1)) ++adj;
            const auto& b = cfg_.behavior;
            const double mult = items[i]->is_ad ? std::pow(b.ad_adjacency_penalty, adj)
                                                : std::pow(b.organic_contrast_boost, adj);
            p[i] = clamp01(items[i]->base_ctr * std::pow(b.position_decay, static_cast<double>(i)) *
                           mult);
        }
        return p;
    }

    /// Probability the user continues past this screen. Log-linear in the
    /// screen index and the number of ads shown; the per-ad exponent is
    /// scaled by (1.5 - tolerance) so ad-tolerant users keep scrolling.
    double continue_prob(const RequestState& s, const ScreenAction& a) const {
        const auto& b = cfg_.behavior;
        const double tol = s.user().ad_tolerance;
        const double ad_exp = static_cast<double>(a.num_ads()) * (1.5 - tol);
        return clamp01(b.pulldown_base *
                       std::pow(b.pulldown_screen_decay, static_cast<double>(s.screen_index)) *
                       std::pow(b.pulldown_per_ad, ad_exp));
    }

    /// Draw order: slot 0..K-1 click, then (only if clicked) its order,
    /// then the pull-down draw. Fixed so identical seeds give identical
    /// logs byte for byte.
    ScreenOutcome simulate_screen(const RequestState& s, const ScreenAction& a, Rng& rng) const {
        const auto probs = screen_click_probs(s, a);
        const auto items = screen_items(s, a);
        ScreenOutcome o;
        for (std::size_t i = 0; i < cfg_.k; ++i) {
            if (rng.bernoulli(probs[i])) {
                o.clicks |= 1u << i;
                if (rng.bernoulli(items[i]->base_cvr)) o.orders |= 1u << i;
            }
        }
        o.pulled_down = rng.bernoulli(continue_prob(s, a));
        return o;
    }

    struct StepResult {
        Transition transition;
        RequestState next;
    };

    StepResult step(const RequestState& s, const ScreenAction& a, Rng& rng) const {
        const ScreenOutcome o = simulate_screen(s, a, rng);
        const auto items = screen_items(s, a);

        Transition tr;
        tr.t = s.screen_index;
        tr.action = a;
        tr.clicks = o.clicks;
        tr.orders = o.orders;
        for (std::size_t i = 0; i < cfg_.k; ++i) {
            if ((o.clicks >> i) & 1u) {
                if (items[i]->is_ad) tr.r_ad += items[i]->charge;
            }
            if ((o.orders >> i) & 1u) tr.r_fee += items[i]->price * items[i]->takerate;
        }
        tr.r_ex = o.orders != 0 ? 2 : (o.clicks != 0 ? 1 : 0);
        tr.reward = tr.r_ad + tr.r_fee + cfg_.eta * tr.r_ex;

        RequestState next = s;
        next.ad_queue.erase(next.ad_queue.begin(),
                            next.ad_queue.begin() + static_cast<long>(a.num_ads()));
        next.oi_queue.erase(next.oi_queue.begin(),
                            next.oi_queue.begin() + static_cast<long>(a.num_organics()));
        next.screen_index = s.screen_index + 1;

        tr.terminal = !o.pulled_down || next.screen_index >= cfg_.max_screens ||
                      feasible_actions(next, cfg_.k).empty();
        return StepResult{tr, std::move(next)};
    }

    /// Fresh request: uniform user, queues drawn with replacement from the
    /// catalog (duplicates allowed), context from a centered normal.
    RequestState new_request(Rng& rng) const {
        if (catalog_.ad_ids.empty() && cfg_.ad_queue_len > 0)
            throw std::logic_error("Env: ad queue requested but catalog has no ads");
        if (catalog_.oi_ids.empty() && cfg_.oi_queue_len > 0)
            throw std::logic_error("Env: organic queue requested but catalog has no organics");
        RequestState s;
        s.catalog = &catalog_;
        s.user_id = static_cast<std::uint32_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(catalog_.users.size()) - 1));
        s.ad_queue.reserve(cfg_.ad_queue_len);
        for (std::size_t i = 0; i < cfg_.ad_queue_len; ++i)
            s.ad_queue.push_back(catalog_.ad_ids[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(catalog_.ad_ids.size()) - 1))]);
        s.oi_queue.reserve(cfg_.oi_queue_len);
        for (std::size_t i = 0; i < cfg_.oi_queue_len; ++i)
            s.oi_queue.push_back(catalog_.oi_ids[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(catalog_.oi_ids.size()) - 1))]);
        s.context.reserve(cfg_.f_ctx);
        for (std::size_t i = 0; i < cfg_.f_ctx; ++i) s.context.push_back(rng.normal(0.0, 0.5));
        return s;
    }

    RequestLog rollout_request(const PolicyFn& policy, Rng& rng, std::uint64_t request_id) const {
        RequestState s = new_request(rng);
        RequestLog log;
        log.request_id = request_id;
        log.user_id = s.user_id;
        log.context = s.context;
        log.ad_ids = s.ad_queue;
        log.oi_ids = s.oi_queue;
        while (true) {
            const auto feas = feasible_actions(s, cfg_.k);
            if (feas.empty()) break;
            const ScreenAction a = policy(s, feas, rng);
            auto [tr, next] = step(s, a, rng);
            log.transitions.push_back(tr);
            if (tr.terminal) break;
            s = std::move(next);
        }
        return log;
    }

    /// State at screen `t` of a logged request, reconstructed by replaying
    /// the consumption of earlier actions.
    RequestState materialize_state(const RequestLog& log, std::size_t t) const {
        RequestState s;
        s.catalog = &catalog_;
        s.user_id = log.user_id;
        s.context = log.context;
        s.screen_index = t;
        std::size_t ads_used = 0, ois_used = 0;
        for (std::size_t i = 0; i < log.transitions.size() && log.transitions[i].t < t; ++i) {
            ads_used += static_cast<std::size_t>(log.transitions[i].action.num_ads());
            ois_used += static_cast<std::size_t>(log.transitions[i].action.num_organics());
        }
        if (ads_used > log.ad_ids.size() || ois_used > log.oi_ids.size())
            throw std::logic_error("materialize_state: log consumes more items than queued");
        s.ad_queue.assign(log.ad_ids.begin() + static_cast<long>(ads_used), log.ad_ids.end());
        s.oi_queue.assign(log.oi_ids.begin() + static_cast<long>(ois_used), log.oi_ids.end());
        return s;
    }

  private:
    static double clamp01(double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); }

    void require_feasible(const RequestState& s, const ScreenAction& a) const {
        if (a.k != cfg_.k) throw std::invalid_argument("action has wrong slot count");
        if (static_cast<std::size_t>(a.num_ads()) > s.ad_queue.size() ||
            static_cast<std::size_t>(a.num_organics()) > s.oi_queue.size())
            throw std::invalid_argument("action infeasible: queue too short");
    }

    EnvConfig cfg_;
    Catalog catalog_;
};

/// Deterministic synthetic catalog. Latent base-CTR/CVR are uniform around
/// their configured means, so empirical means converge to the config
/// values. Observable features leak noisy views of the latents (and the
/// user's ad tolerance), giving the learned representation something real
/// to pick up.
inline Catalog generate_catalog(std::uint64_t seed, const EnvConfig& env) {
    const auto& g = env.catalog;
    if (g.n_ads + g.n_organics == 0 || g.n_users == 0)
        throw std::invalid_argument("generate_catalog: counts must be positive");
    Rng rng(derive_seed(seed, 0xCA7A7061ull));
    Catalog cat;

    auto gen_item = [&](std::uint32_t id, bool is_ad) {
        Item it;
        it.id = id;
        it.is_ad = is_ad;
        it.category = static_cast<std::uint32_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(g.n_categories) - 1));
        const double ctr_mean = is_ad ? g.ctr_mean_ad : g.ctr_mean_oi;
        it.base_ctr = std::clamp(rng.uniform(ctr_mean - g.ctr_spread, ctr_mean + g.ctr_spread),
                                 1e-4, 1.0 - 1e-4);
        it.base_cvr = std::clamp(rng.uniform(g.cvr_mean - g.cvr_spread, g.cvr_mean + g.cvr_spread),
                                 1e-4, 1.0 - 1e-4);
        it.price = rng.uniform(g.price_lo, g.price_hi);
        it.charge = is_ad ? rng.uniform(g.charge_lo, g.charge_hi) : 0.0;
        it.takerate = rng.uniform(g.takerate_lo, g.takerate_hi);
        it.discount = rng.uniform(0.0, 0.5);
        it.delivery_fee = rng.uniform(0.0, 1.0);
        it.delivery_time = rng.uniform(0.25, 1.5);
        const double ctr_z = (it.base_ctr - ctr_mean) / std::max(g.ctr_spread, 1e-9);
        const double cvr_z = (it.base_cvr - g.cvr_mean) / std::max(g.cvr_spread, 1e-9);
        it.comment_score = std::clamp(3.5 + 1.2 * ctr_z + rng.normal(0.0, 0.3), 1.0, 5.0);
        it.features.resize(env.f_item, 0.0);
        if (env.f_item > 0) it.features[0] = 0.5 * ctr_z + rng.normal(0.0, 0.05);
        if (env.f_item > 1) it.features[1] = 0.5 * cvr_z + rng.normal(0.0, 0.05);
        if (env.f_item > 2) it.features[2] = is_ad ? 1.0 : 0.0;
        if (env.f_item > 3)
            it.features[3] = (it.price - 0.5 * (g.price_lo + g.price_hi)) /
                             std::max(g.price_hi - g.price_lo, 1e-9);
        for (std::size_t f = 4; f < env.f_item; ++f) it.features[f] = rng.normal(0.0, 0.3);
        return it;
    };

    for (std::size_t i = 0; i < g.n_ads; ++i) {
        cat.items.push_back(gen_item(static_cast<std::uint32_t>(i), true));
        cat.ad_ids.push_back(static_cast<std::uint32_t>(i));
    }
    for (std::size_t i = 0; i < g.n_organics; ++i) {
        const auto id = static_cast<std::uint32_t>(g.n_ads + i);
        cat.items.push_back(gen_item(id, false));
        cat.oi_ids.push_back(id);
    }

    for (std::size_t i = 0; i < g.n_users; ++i) {
        UserProfile u;
        u.id = static_cast<std::uint32_t>(i);
        u.ad_tolerance = rng.uniform01();
        u.features.resize(env.f_user, 0.0);
        if (env.f_user > 0) u.features[0] = u.ad_tolerance + rng.normal(0.0, 0.05);
        for (std::size_t f = 1; f < env.f_user; ++f) u.features[f] = rng.normal(0.0, 0.5);
        u.behavior.reserve(env.n_b);
        for (std::size_t b = 0; b < env.n_b; ++b)
            u.behavior.push_back(static_cast<std::uint32_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(cat.items.size()) - 1)));
        cat.users.push_back(std::move(u));
    }
    return cat;
}

/// Ads shown over everything shown, across all logged screens.
inline double period_pae(const std::vector<RequestLog>& logs) {
    std::uint64_t ads = 0, total = 0;
    for (const auto& log : logs)
        for (const auto& tr : log.transitions) {
            ads += static_cast<std::uint64_t>(tr.action.num_ads());
            total += tr.action.k;
        }
    if (total == 0) throw std::invalid_argument("period_pae: no items shown");
    return static_cast<double>(ads) / static_cast<double>(total);
}

inline bool check_constraint(double pae, double delta, double eps) {
    if (delta <= 0.0 || delta >= 1.0 || eps <= 0.0 || eps >= 1.0)
        throw std::invalid_argument("check_constraint: delta, eps must lie in (0,1)");
    return std::abs(pae - delta) < eps;
}

// Transition log IO. Line-delimited, versioned, hexfloat for reals:
//   crossdqn-transitions-v1
//   k 5 eta 0x1p+0
//   request 0 user 3
//   ctx <hex>...
//   ads <id>...
//   ois <id>...
//   t 0 a 01001 clicks 00001 orders 00000 r_ad <hex> r_fee <hex> r_ex 1 r <hex> done 0
//   end

constexpr const char* kTransitionLogHeader = "crossdqn-transitions-v1";

struct TransitionLogFile {
    std::size_t k = 0;
    double eta = 0;
    std::vector<RequestLog> requests;
};

inline void write_transition_log(std::ostream& os, const TransitionLogFile& f) {
    os << kTransitionLogHeader << "\n";
    os << "k " << f.k << " eta " << hexfloat::format(f.eta) << "\n";
    for (const auto& log : f.requests) {
        os << "request " << log.request_id << " user " << log.user_id << "\n";
        os << "ctx";
        for (double v : log.context) os << " " << hexfloat::format(v);
        os << "\n";
        os << "ads";
        for (auto id : log.ad_ids) os << " " << id;
        os << "\n";
        os << "ois";
        for (auto id : log.oi_ids) os << " " << id;
        os << "\n";
        for (const auto& tr : log.transitions) {
            ScreenAction clicks{tr.clicks, tr.action.k}, orders{tr.orders, tr.action.k};
            os << "t " << tr.t << " a " << tr.action.to_string() << " clicks "
               << clicks.to_string() << " orders " << orders.to_string() << " r_ad "
               << hexfloat::format(tr.r_ad) << " r_fee " << hexfloat::format(tr.r_fee) << " r_ex "
               << tr.r_ex << " r " << hexfloat::format(tr.reward) << " done "
               << (tr.terminal ? 1 : 0) << "\n";
        }
    }
    os << "end\n";
}

inline TransitionLogFile read_transition_log(std::istream& is) {
    auto fail = [](const std::string& why) -> std::runtime_error {
        return std::runtime_error("transition log: " + why);
    };
    std::string line;
    if (!std::getline(is, line) || line != kTransitionLogHeader) throw fail("bad header");
    TransitionLogFile f;
    {
        if (!std::getline(is, line)) throw fail("missing k/eta line");
        std::istringstream ls(line);
        std::string kw1, kw2, eta_tok;
        if (!(ls >> kw1 >> f.k >> kw2 >> eta_tok) || kw1 != "k" || kw2 != "eta")
            throw fail("bad k/eta line '" + line + "'");
        f.eta = hexfloat::parse(eta_tok);
    }
    RequestLog* cur = nullptr;
    bool saw_end = false;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "end") {
            saw_end = true;
            break;
        } else if (tag == "request") {
            RequestLog log;
            std::string kw;
            if (!(ls >> log.request_id >> kw >> log.user_id) || kw != "user")
                throw fail("bad request line '" + line + "'");
            f.requests.push_back(std::move(log));
            cur = &f.requests.back();
        } else if (tag == "ctx" || tag == "ads" || tag == "ois") {
            if (!cur) throw fail("'" + tag + "' before any request");
            std::string tok;
            while (ls >> tok) {
                if (tag == "ctx")
                    cur->context.push_back(hexfloat::parse(tok));
                else if (tag == "ads")
                    cur->ad_ids.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
                else
                    cur->oi_ids.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
            }
        } else if (tag == "t") {
            if (!cur) throw fail("'t' before any request");
            Transition tr;
            std::string kw, a_s, clicks_s, orders_s, r_ad_s, r_fee_s, r_s;
            int done = 0;
            if (!(ls >> tr.t >> kw >> a_s) || kw != "a") throw fail("bad transition line '" + line + "'");
            if (!(ls >> kw >> clicks_s) || kw != "clicks") throw fail("bad clicks in '" + line + "'");
            if (!(ls >> kw >> orders_s) || kw != "orders") throw fail("bad orders in '" + line + "'");
            if (!(ls >> kw >> r_ad_s) || kw != "r_ad") throw fail("bad r_ad in '" + line + "'");
            if (!(ls >> kw >> r_fee_s) || kw != "r_fee") throw fail("bad r_fee in '" + line + "'");
            if (!(ls >> kw >> tr.r_ex) || kw != "r_ex") throw fail("bad r_ex in '" + line + "'");
            if (!(ls >> kw >> r_s) || kw != "r") throw fail("bad r in '" + line + "'");
            if (!(ls >> kw >> done) || kw != "done") throw fail("bad done in '" + line + "'");
            tr.action = ScreenAction::from_string(a_s);
            tr.clicks = ScreenAction::from_string(clicks_s).bits;
            tr.orders = ScreenAction::from_string(orders_s).bits;
            tr.r_ad = hexfloat::parse(r_ad_s);
            tr.r_fee = hexfloat::parse(r_fee_s);
            tr.reward = hexfloat::parse(r_s);
            tr.terminal = done != 0;
            cur->transitions.push_back(tr);
        } else if (tag.empty()) {
            continue;
        } else {
            throw fail("unknown tag '" + tag + "'");
        }
    }
    if (!saw_end) throw fail("missing 'end' trailer");
    return f;
}

inline void write_transition_log_file(const std::string& path, const TransitionLogFile& f) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write transition log '" + path + "'");
    write_transition_log(os, f);
}

inline TransitionLogFile read_transition_log_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open transition log '" + path + "'");
    return read_transition_log(is);
}

}  // namespace crossdqn::sim
