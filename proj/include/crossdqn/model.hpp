#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crossdqn/config.hpp"
#include "crossdqn/nn.hpp"
#include "crossdqn/params.hpp"
#include "crossdqn/rng.hpp"
#include "crossdqn/sim.hpp"
#include "crossdqn/tensor.hpp"

namespace crossdqn::model {

/// Channel-subset enumeration is exponential in the embedding width, so
/// the final representation width is capped.
constexpr std::size_t kMaxChannels = 6;

enum class Variant {
    full,     // crossing + per-combination attention
    no_mcau,  // crossing + a single attention over the cross matrix
    no_sacu,  // no crossing: state and action embeddings concatenated directly
};

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_mcau: return "no_mcau";
        case Variant::no_sacu: return "no_sacu";
    }
    throw std::logic_error("variant_name: bad variant");
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "no_mcau") return Variant::no_mcau;
    if (s == "no_sacu") return Variant::no_sacu;
    throw std::invalid_argument("unknown model variant '" + s + "'");
}

struct ModelConfig {
    std::size_t k = 5;
    std::size_t f_item = 4;
    std::size_t f_user = 3;
    std::size_t f_ctx = 2;
    std::size_t n_b = 6;
    std::size_t d_emb = 4;
    std::size_t att_dmodel = 4;                    // item/behavior attention projection width
    std::vector<std::size_t> irm_widths = {16, 8, 2};
    std::size_t self_att_dmodel = 4;               // slot self-attention projection width
    std::vector<std::size_t> v_widths = {16, 8, 1};
    std::vector<std::size_t> a_widths = {16, 8, 1};
    Variant variant = Variant::full;

    std::size_t n_e() const { return irm_widths.back(); }
    std::size_t n_c() const { return (std::size_t{1} << n_e()) - 1; }

    void validate() const {
        if (k < 1 || k > 20) throw std::invalid_argument("model config: k out of range [1,20]");
        if (irm_widths.empty() || v_widths.empty() || a_widths.empty())
            throw std::invalid_argument("model config: empty layer list");
        for (auto w : irm_widths)
            if (w == 0) throw std::invalid_argument("model config: zero layer width");
        if (n_e() > kMaxChannels)
            throw std::invalid_argument("model config: final representation width " +
                                        std::to_string(n_e()) + " exceeds channel cap " +
                                        std::to_string(kMaxChannels));
        if (v_widths.back() != 1 || a_widths.back() != 1)
            throw std::invalid_argument("model config: V and A heads must end in width 1");
        if (f_item == 0 || d_emb == 0 || att_dmodel == 0 || self_att_dmodel == 0 || n_b == 0)
            throw std::invalid_argument("model config: widths must be positive");
    }

    bool operator==(const ModelConfig&) const = default;

    std::vector<std::pair<std::string, std::string>> to_meta() const {
        auto join = [](const std::vector<std::size_t>& xs) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                if (i) s += ",";
                s += std::to_string(xs[i]);
            }
            return s;
        };
        return {
            {"model.k", std::to_string(k)},
            {"model.f_item", std::to_string(f_item)},
            {"model.f_user", std::to_string(f_user)},
            {"model.f_ctx", std::to_string(f_ctx)},
            {"model.n_b", std::to_string(n_b)},
            {"model.d_emb", std::to_string(d_emb)},
            {"model.att_dmodel", std::to_string(att_dmodel)},
            {"model.irm_widths", join(irm_widths)},
            {"model.self_att_dmodel", std::to_string(self_att_dmodel)},
            {"model.v_widths", join(v_widths)},
            {"model.a_widths", join(a_widths)},
            {"model.variant", variant_name(variant)},
        };
    }

    static ModelConfig from_meta(const std::vector<std::pair<std::string, std::string>>& meta) {
        auto find = [&](const std::string& key) -> const std::string& {
            for (const auto& [k_, v] : meta)
                if (k_ == key) return v;
            throw std::runtime_error("checkpoint meta: missing key '" + key + "'");
        };
        auto num = [&](const std::string& key) {
            return static_cast<std::size_t>(std::stoull(find(key)));
        };
        auto list = [&](const std::string& key) {
            std::vector<std::size_t> out;
            std::istringstream ss(find(key));
            std::string tok;
            while (std::getline(ss, tok, ',')) out.push_back(std::stoull(tok));
            return out;
        };
        ModelConfig c;
        c.k = num("model.k");
        c.f_item = num("model.f_item");
        c.f_user = num("model.f_user");
        c.f_ctx = num("model.f_ctx");
        c.n_b = num("model.n_b");
        c.d_emb = num("model.d_emb");
        c.att_dmodel = num("model.att_dmodel");
        c.irm_widths = list("model.irm_widths");
        c.self_att_dmodel = num("model.self_att_dmodel");
        c.v_widths = list("model.v_widths");
        c.a_widths = list("model.a_widths");
        c.variant = variant_from_name(find("model.variant"));
        c.validate();
        return c;
    }

    void to_config(Config& c) const {
        for (const auto& [key, value] : to_meta()) c.set(key, value);
    }

    static ModelConfig from_config(const Config& c) {
        ModelConfig def;
        auto num = [&](const char* key, std::size_t d) {
            return static_cast<std::size_t>(c.get_int(key, static_cast<std::int64_t>(d)));
        };
        ModelConfig m;
        m.k = num("model.k", def.k);
        m.f_item = num("model.f_item", def.f_item);
        m.f_user = num("model.f_user", def.f_user);
        m.f_ctx = num("model.f_ctx", def.f_ctx);
        m.n_b = num("model.n_b", def.n_b);
        m.d_emb = num("model.d_emb", def.d_emb);
        m.att_dmodel = num("model.att_dmodel", def.att_dmodel);
        m.irm_widths = c.get_size_list("model.irm_widths", def.irm_widths);
        m.self_att_dmodel = num("model.self_att_dmodel", def.self_att_dmodel);
        m.v_widths = c.get_size_list("model.v_widths", def.v_widths);
        m.a_widths = c.get_size_list("model.a_widths", def.a_widths);
        m.variant = variant_from_name(c.get_str("model.variant", variant_name(def.variant)));
        m.validate();
        return m;
    }
};

/// Slot-assignment matrices: m_ad[i][j] = 1 iff the j-th remaining ad sits
/// in slot i, and likewise m_oi for organics. Ads fill the 1-slots in
/// queue order, organics the 0-slots.
struct OffsetMatrices {
    ad::Tensor m_ad;  // K x N_ad
    ad::Tensor m_oi;  // K x N_oi
};

inline OffsetMatrices build_offset_matrices(const sim::ScreenAction& a, std::size_t n_ad,
                                            std::size_t n_oi) {
    if (static_cast<std::size_t>(a.num_ads()) > n_ad ||
        static_cast<std::size_t>(a.num_organics()) > n_oi)
        throw std::invalid_argument("build_offset_matrices: action infeasible for queue sizes");
    OffsetMatrices o{ad::Tensor(a.k, n_ad), ad::Tensor(a.k, n_oi)};
    std::size_t next_ad = 0, next_oi = 0;
    for (std::size_t i = 0; i < a.k; ++i) {
        if (a.ad_at(i))
            o.m_ad.at(i, next_ad++) = 1.0;
        else
            o.m_oi.at(i, next_oi++) = 1.0;
    }
    return o;
}

/// All 2^n_e - 1 nonempty channel subsets as K x n_e masks with constant
/// columns, ascending by subset bit pattern (channel j <-> bit j).
inline std::vector<ad::Tensor> mcau_masks(std::size_t n_e, std::size_t k) {
    if (n_e < 1 || n_e > kMaxChannels)
        throw std::invalid_argument("mcau_masks: channel count " + std::to_string(n_e) +
                                    " outside [1," + std::to_string(kMaxChannels) + "]");
    std::vector<ad::Tensor> masks;
    masks.reserve((std::size_t{1} << n_e) - 1);
    for (std::uint32_t subset = 1; subset < (1u << n_e); ++subset) {
        ad::Tensor m(k, n_e);
        for (std::size_t j = 0; j < n_e; ++j)
            if ((subset >> j) & 1u)
                for (std::size_t r = 0; r < k; ++r) m.at(r, j) = 1.0;
        masks.push_back(std::move(m));
    }
    return masks;
}

/// Per-item embeddings for the remaining queues plus their untouched
/// strong features. Rows follow queue order; each row depends only on its
/// own item (and the shared user/context), which is what makes cached
/// rows interchangeable with freshly computed ones.
struct IrmOutput {
    ad::Tensor e_ad;  // N_ad x N_e
    ad::Tensor e_oi;  // N_oi x N_e
    ad::Tensor s_ad;  // N_ad x 7, constants
    ad::Tensor s_oi;  // N_oi x 7, constants

    IrmOutput slice(std::size_t ads_consumed, std::size_t ois_consumed) const {
        IrmOutput out;
        out.e_ad = ads_consumed < e_ad.rows ? ad::slice_rows(e_ad, ads_consumed, e_ad.rows)
                                            : ad::Tensor(0, e_ad.cols);
        out.e_oi = ois_consumed < e_oi.rows ? ad::slice_rows(e_oi, ois_consumed, e_oi.rows)
                                            : ad::Tensor(0, e_oi.cols);
        out.s_ad = ads_consumed < s_ad.rows ? ad::slice_rows(s_ad, ads_consumed, s_ad.rows)
                                            : ad::Tensor(0, s_ad.cols);
        out.s_oi = ois_consumed < s_oi.rows ? ad::slice_rows(s_oi, ois_consumed, s_oi.rows)
                                            : ad::Tensor(0, s_oi.cols);
        return out;
    }
};

inline ad::Tensor item_feature_matrix(const sim::Catalog& cat,
                                      const std::vector<std::uint32_t>& ids, std::size_t f_item) {
    ad::Tensor t(ids.size(), f_item);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto& f = cat.items.at(ids[r]).features;
        if (f.size() != f_item)
            throw std::invalid_argument("item feature width mismatch: have " +
                                        std::to_string(f.size()) + ", model wants " +
                                        std::to_string(f_item));
        for (std::size_t c = 0; c < f_item; ++c) t.at(r, c) = f[c];
    }
    return t;
}

inline ad::Tensor strong_feature_matrix(const sim::Catalog& cat,
                                        const std::vector<std::uint32_t>& ids) {
    ad::Tensor t(ids.size(), sim::kStrongFeatures);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto sf = cat.items.at(ids[r]).strong_features();
        for (std::size_t c = 0; c < sim::kStrongFeatures; ++c) t.at(r, c) = sf[c];
    }
    return t;
}

/// First index holding the maximum, by strict comparison. With candidates
/// enumerated in ascending bit order this implements the lowest-bit-pattern
/// tie break.
inline std::size_t argmax_index(const std::vector<double>& q) {
    if (q.empty()) throw std::invalid_argument("argmax_index: empty");
    std::size_t best = 0;
    for (std::size_t i = 1; i < q.size(); ++i)
        if (q[i] > q[best]) best = i;
    return best;
}

class CrossDqnModel {
  public:
    struct Counters {
        std::uint64_t irm_calls = 0;
        std::uint64_t sdm_calls = 0;
        std::uint64_t offset_builds = 0;
    };

    CrossDqnModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        declare_params(seed);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const Counters& counters() const { return counters_; }
    void reset_counters() const { counters_ = Counters{}; }

    /// Embeds every remaining queue item: target attention of the item over
    /// the user's behavior history, then an MLP over attention output,
    /// user embedding and context embedding, all sharing one parameter set.
    IrmOutput irm_forward(Binding& p, const sim::RequestState& s) const {
        ++counters_.irm_calls;
        if (!s.catalog) throw std::invalid_argument("irm_forward: state has no catalog");
        const auto& user = s.user();
        if (user.behavior.empty()) throw std::invalid_argument("irm_forward: empty behavior history");
        if (user.features.size() != cfg_.f_user || s.context.size() != cfg_.f_ctx)
            throw std::invalid_argument("irm_forward: user/context width mismatch");

        const ad::Tensor beh_emb =
            ad::matmul(item_feature_matrix(*s.catalog, user.behavior, cfg_.f_item), p("emb.item"));
        const ad::Tensor user_emb = ad::matmul(ad::Tensor::row(user.features), p("emb.user"));
        const ad::Tensor ctx_emb = ad::matmul(ad::Tensor::row(s.context), p("emb.ctx"));

        auto embed_queue = [&](const std::vector<std::uint32_t>& ids) {
            if (ids.empty()) return ad::Tensor(0, cfg_.n_e());
            const ad::Tensor item_emb =
                ad::matmul(item_feature_matrix(*s.catalog, ids, cfg_.f_item), p("emb.item"));
            const ad::Tensor att = nn::attention_forward(p, "irm.att", item_emb, beh_emb);
            const ad::Tensor in = ad::concat_cols(
                {att, ad::repeat_rows(user_emb, ids.size()), ad::repeat_rows(ctx_emb, ids.size())});
            return nn::mlp_forward(p, "irm.mlp", in, cfg_.irm_widths.size());
        };

        IrmOutput out;
        out.e_ad = embed_queue(s.ad_queue);
        out.e_oi = embed_queue(s.oi_queue);
        out.s_ad = strong_feature_matrix(*s.catalog, s.ad_queue);
        out.s_oi = strong_feature_matrix(*s.catalog, s.oi_queue);
        return out;
    }

    /// Q values for the candidate actions, in candidate order. The V head
    /// sees only the state; each action's advantage comes from its own
    /// per-slot representation; the advantage mean is subtracted per the
    /// dueling decomposition.
    ad::Tensor q_row(Binding& p, const IrmOutput& irm, const std::vector<sim::ScreenAction>& actions) const {
        ++counters_.sdm_calls;
        if (actions.empty()) throw std::invalid_argument("q_row: empty candidate set");
        if (irm.e_ad.rows == 0 && irm.e_oi.rows == 0)
            throw std::invalid_argument("q_row: both queues empty");

        const ad::Tensor pool_ad = pool_or_zero(irm.e_ad);
        const ad::Tensor pool_oi = pool_or_zero(irm.e_oi);
        const ad::Tensor v =
            nn::mlp_forward(p, "v", ad::concat_cols(pool_ad, pool_oi), cfg_.v_widths.size());

        // One A-head pass over all candidates: the MLP treats rows
        // independently, so stacking is exact, not an approximation.
        std::vector<ad::Tensor> reps;
        reps.reserve(actions.size());
        for (const auto& a : actions) reps.push_back(action_representation(p, irm, a, pool_ad, pool_oi));
        const ad::Tensor stacked = ad::concat_rows(reps);
        const ad::Tensor a_row =
            ad::transpose(nn::mlp_forward(p, "a", stacked, cfg_.a_widths.size()));
        const ad::Tensor centered = ad::add_scalar(a_row, ad::scale(ad::mean_all(a_row), -1.0));
        return ad::add_scalar(centered, v);
    }

    /// Inference path: no tape, fresh parameter binding.
    std::vector<double> q_values(const sim::RequestState& s,
                                 const std::vector<sim::ScreenAction>& actions) const {
        Binding p(store_, nullptr);
        const IrmOutput irm = irm_forward(p, s);
        return q_row(p, irm, actions).data;
    }

    /// Inference from a precomputed (possibly sliced) IrmOutput.
    std::vector<double> q_values_from_irm(const IrmOutput& irm,
                                          const std::vector<sim::ScreenAction>& actions) const {
        Binding p(store_, nullptr);
        return q_row(p, irm, actions).data;
    }

    void save_checkpoint(std::ostream& os) const { store_.save(os, cfg_.to_meta()); }

    static CrossDqnModel load_checkpoint(std::istream& is) {
        std::vector<std::pair<std::string, std::string>> meta;
        ParamStore loaded = ParamStore::load(is, &meta);
        const ModelConfig cfg = ModelConfig::from_meta(meta);
        CrossDqnModel m(cfg, 0);
        if (loaded.count() != m.store_.count())
            throw std::runtime_error("checkpoint: parameter count mismatch for config");
        for (std::size_t i = 0; i < loaded.count(); ++i) {
            const std::string& name = m.store_.name_at(i);
            if (loaded.name_at(i) != name)
                throw std::runtime_error("checkpoint: unexpected parameter '" + loaded.name_at(i) +
                                         "', wanted '" + name + "'");
            const auto& a = loaded.value(name);
            const auto& b = m.store_.value(name);
            if (a.rows != b.rows || a.cols != b.cols)
                throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        }
        m.store_ = std::move(loaded);
        return m;
    }

    /// Load with a required config; mismatches are an error naming the key.
    static CrossDqnModel load_checkpoint(std::istream& is, const ModelConfig& expected) {
        CrossDqnModel m = load_checkpoint(is);
        if (!(m.cfg_ == expected)) {
            const auto got = m.cfg_.to_meta(), want = expected.to_meta();
            for (std::size_t i = 0; i < got.size(); ++i)
                if (got[i] != want[i])
                    throw std::runtime_error("checkpoint config mismatch: " + got[i].first +
                                             " is '" + got[i].second + "', expected '" +
                                             want[i].second + "'");
            throw std::runtime_error("checkpoint config mismatch");
        }
        return m;
    }

  private:
    ad::Tensor pool_or_zero(const ad::Tensor& e) const {
        return e.rows > 0 ? ad::mean_pool_rows(e) : ad::Tensor(1, cfg_.n_e());
    }

    /// Mean strong features of the items the action displays. Order inside
    /// the screen does not matter for a mean, so this reads queue prefixes
    /// directly and never touches offset matrices (important for the
    /// variant that must not build them).
    ad::Tensor displayed_strong_mean(const IrmOutput& irm, const sim::ScreenAction& a) const {
        ad::Tensor out(1, sim::kStrongFeatures);
        const auto n_ad = static_cast<std::size_t>(a.num_ads());
        const auto n_oi = static_cast<std::size_t>(a.num_organics());
        for (std::size_t r = 0; r < n_ad; ++r)
            for (std::size_t c = 0; c < sim::kStrongFeatures; ++c) out.data[c] += irm.s_ad.at(r, c);
        for (std::size_t r = 0; r < n_oi; ++r)
            for (std::size_t c = 0; c < sim::kStrongFeatures; ++c) out.data[c] += irm.s_oi.at(r, c);
        for (auto& v : out.data) v /= static_cast<double>(cfg_.k);
        return out;
    }

    ad::Tensor action_representation(Binding& p, const IrmOutput& irm, const sim::ScreenAction& a,
                                     const ad::Tensor& pool_ad, const ad::Tensor& pool_oi) const {
        if (a.k != cfg_.k) throw std::invalid_argument("action has wrong slot count for model");
        const ad::Tensor strong = displayed_strong_mean(irm, a);

        if (cfg_.variant == Variant::no_sacu) {
            ad::Tensor bits(1, cfg_.k);
            for (std::size_t i = 0; i < cfg_.k; ++i) bits.data[i] = a.ad_at(i) ? 1.0 : 0.0;
            return ad::concat_cols({pool_ad, pool_oi, bits, strong});
        }

        ++counters_.offset_builds;
        const OffsetMatrices off = build_offset_matrices(a, irm.e_ad.rows, irm.e_oi.rows);
        const ad::Tensor mcross =
            ad::add(ad::matmul(off.m_ad, irm.e_ad), ad::matmul(off.m_oi, irm.e_oi));

        if (cfg_.variant == Variant::no_mcau) {
            const ad::Tensor e_signal =
                ad::flatten_row(nn::attention_forward(p, "mcau.att0", mcross, mcross));
            return ad::concat_cols(e_signal, strong);
        }

        std::vector<ad::Tensor> signals;
        signals.reserve(masks_.size());
        for (std::size_t i = 0; i < masks_.size(); ++i) {
            const ad::Tensor m_signal = ad::hadamard(mcross, masks_[i]);
            signals.push_back(ad::flatten_row(nn::attention_forward(
                p, "mcau.att" + std::to_string(i + 1), m_signal, m_signal)));
        }
        signals.push_back(strong);
        return ad::concat_cols(signals);
    }

    void declare_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x0DE1C0DEULL));
        store_ = ParamStore();
        store_.add_weight("emb.item", cfg_.f_item, cfg_.d_emb, rng);
        store_.add_weight("emb.user", cfg_.f_user, cfg_.d_emb, rng);
        store_.add_weight("emb.ctx", cfg_.f_ctx, cfg_.d_emb, rng);
        nn::declare_attention(store_, "irm.att", cfg_.d_emb, cfg_.d_emb, cfg_.att_dmodel,
                              cfg_.d_emb, rng);
        nn::declare_mlp(store_, "irm.mlp", 3 * cfg_.d_emb, cfg_.irm_widths, rng);
        nn::declare_mlp(store_, "v", 2 * cfg_.n_e(), cfg_.v_widths, rng);

        std::size_t signal_width = 0;
        if (cfg_.variant == Variant::full) {
            masks_ = mcau_masks(cfg_.n_e(), cfg_.k);
            for (std::size_t i = 1; i <= cfg_.n_c(); ++i)
                nn::declare_attention(store_, "mcau.att" + std::to_string(i), cfg_.n_e(),
                                      cfg_.n_e(), cfg_.self_att_dmodel, cfg_.n_e(), rng);
            signal_width = cfg_.n_c() * cfg_.k * cfg_.n_e();
        } else if (cfg_.variant == Variant::no_mcau) {
            nn::declare_attention(store_, "mcau.att0", cfg_.n_e(), cfg_.n_e(),
                                  cfg_.self_att_dmodel, cfg_.n_e(), rng);
            signal_width = cfg_.k * cfg_.n_e();
        } else {
            signal_width = 2 * cfg_.n_e() + cfg_.k;  // pooled state + raw action bits
        }
        nn::declare_mlp(store_, "a", signal_width + sim::kStrongFeatures, cfg_.a_widths, rng);
    }

    ModelConfig cfg_;
    ParamStore store_;
    std::vector<ad::Tensor> masks_;
    mutable Counters counters_;
};

}  // namespace crossdqn::model
