#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crossdqn/rng.hpp"
#include "crossdqn/tensor.hpp"

namespace crossdqn {

namespace hexfloat {

/// %a formatting round-trips doubles exactly through text, including
/// negative zero and subnormals. Decimal formatting would need 17 digits
/// and careful parsing; hex is unambiguous.
inline std::string format(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

inline double parse(const std::string& s) {
    const char* begin = s.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0')
        throw std::runtime_error("hexfloat::parse: bad value '" + s + "'");
    return v;
}

}  // namespace hexfloat

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Binding;

/// Named parameter tensors plus Adam state. Parameters keep insertion order
/// so checkpoints and gradient reports are stable.
class ParamStore {
  public:
    /// He-style uniform init, U(-sqrt(6/rows), sqrt(6/rows)): these weights
    /// sit on the right of x*W, so rows is the fan-in. The sqrt(6) gain keeps
    /// activation scale roughly constant through relu stacks; with a plain
    /// 1/sqrt(rows) bound the stacked blocks here shrink activations a few
    /// fold per layer, which starves the attention logits downstream.
    ad::Tensor& add_weight(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
        ad::Tensor t(rows, cols);
        const double bound = std::sqrt(6.0 / static_cast<double>(rows));
        for (auto& v : t.data) v = rng.uniform(-bound, bound);
        return add(name, std::move(t));
    }

    ad::Tensor& add_zeros(const std::string& name, std::size_t rows, std::size_t cols) {
        return add(name, ad::Tensor(rows, cols));
    }

    ad::Tensor& add(const std::string& name, ad::Tensor t) {
        if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
            throw std::invalid_argument("ParamStore::add: bad parameter name '" + name + "'");
        if (index_.count(name)) throw std::invalid_argument("ParamStore::add: duplicate '" + name + "'");
        index_[name] = entries_.size();
        entries_.push_back(Entry{name, std::move(t), {}, {}});
        auto& e = entries_.back();
        e.m.assign(e.value.size(), 0.0);
        e.v.assign(e.value.size(), 0.0);
        return e.value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    ad::Tensor& value(const std::string& name) { return entries_[index_at(name)].value; }
    const ad::Tensor& value(const std::string& name) const { return entries_[index_at(name)].value; }

    std::size_t count() const { return entries_.size(); }
    const std::string& name_at(std::size_t i) const { return entries_[i].name; }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    std::uint64_t step() const { return step_; }

    /// One Adam step over every parameter, reading gradients off the tape
    /// through `bound`. Parameters never touched this pass see a zero
    /// gradient (their momentum still decays, as usual for dense Adam).
    /// Throws if any gradient is non-finite, naming the parameter.
    void adam_step(const ad::Tape& tape, const Binding& bound, const AdamConfig& cfg);

    /// Versioned text checkpoint: metadata, Adam step, then per parameter
    /// the value, first moment, and second moment in hexfloat. Round-trips
    /// bit for bit.
    void save(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& meta) const {
        os << "crossdqn-checkpoint-v1\n";
        os << "meta " << meta.size() << "\n";
        for (const auto& [k, v] : meta) {
            if (k.find_first_of(" \t\n") != std::string::npos ||
                v.find_first_of("\t\n") != std::string::npos)
                throw std::invalid_argument("checkpoint meta keys must be single tokens");
            os << k << " " << v << "\n";
        }
        os << "step " << step_ << "\n";
        os << "params " << entries_.size() << "\n";
        for (const auto& e : entries_) {
            os << e.name << " " << e.value.rows << " " << e.value.cols << "\n";
            write_block(os, "v", e.value.data);
            write_block(os, "m", e.m);
            write_block(os, "u", e.v);
        }
        os << "end\n";
    }

    static ParamStore load(std::istream& is, std::vector<std::pair<std::string, std::string>>* meta) {
        std::string line;
        require_line(is, line, "crossdqn-checkpoint-v1", "header");
        ParamStore store;

        std::size_t nmeta = read_counted(is, "meta");
        for (std::size_t i = 0; i < nmeta; ++i) {
            if (!std::getline(is, line)) throw std::runtime_error("checkpoint: truncated meta");
            const auto sp = line.find(' ');
            if (sp == std::string::npos) throw std::runtime_error("checkpoint: bad meta line '" + line + "'");
            if (meta) meta->emplace_back(line.substr(0, sp), line.substr(sp + 1));
        }

        store.step_ = read_counted(is, "step");

        const std::size_t nparams = read_counted(is, "params");
        for (std::size_t i = 0; i < nparams; ++i) {
            if (!std::getline(is, line)) throw std::runtime_error("checkpoint: truncated params");
            std::istringstream hs(line);
            std::string name;
            std::size_t rows = 0, cols = 0;
            if (!(hs >> name >> rows >> cols))
                throw std::runtime_error("checkpoint: bad param header '" + line + "'");
            ad::Tensor t(rows, cols);
            read_block(is, "v", t.data);
            ad::Tensor& added = store.add(name, std::move(t));
            auto& e = store.entries_.back();
            (void)added;
            read_block(is, "m", e.m);
            read_block(is, "u", e.v);
        }
        require_line(is, line, "end", "trailer");
        return store;
    }

  private:
    friend class Binding;

    struct Entry {
        std::string name;
        ad::Tensor value;
        std::vector<double> m;
        std::vector<double> v;
    };

    std::size_t index_at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }

    static void write_block(std::ostream& os, const char* tag, const std::vector<double>& xs) {
        os << tag;
        for (double x : xs) os << " " << hexfloat::format(x);
        os << "\n";
    }

    static void read_block(std::istream& is, const std::string& tag, std::vector<double>& out) {
        std::string line;
        if (!std::getline(is, line)) throw std::runtime_error("checkpoint: truncated block " + tag);
        std::istringstream ls(line);
        std::string got;
        ls >> got;
        if (got != tag) throw std::runtime_error("checkpoint: expected block '" + tag + "', got '" + got + "'");
        std::string tok;
        std::size_t i = 0;
        while (ls >> tok) {
            if (i >= out.size()) throw std::runtime_error("checkpoint: too many values in block " + tag);
            out[i++] = hexfloat::parse(tok);
        }
        if (i != out.size()) throw std::runtime_error("checkpoint: short block " + tag);
    }

    static void require_line(std::istream& is, std::string& line, const std::string& want,
                             const char* what) {
        if (!std::getline(is, line) || line != want)
            throw std::runtime_error(std::string("checkpoint: bad ") + what + " (want '" + want + "')");
    }

    static std::uint64_t read_counted(std::istream& is, const std::string& tag) {
        std::string line;
        if (!std::getline(is, line)) throw std::runtime_error("checkpoint: missing '" + tag + "' line");
        std::istringstream ls(line);
        std::string got;
        std::uint64_t n = 0;
        if (!(ls >> got >> n) || got != tag)
            throw std::runtime_error("checkpoint: bad '" + tag + "' line: '" + line + "'");
        return n;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::uint64_t step_ = 0;
};

/// Binds parameters onto one tape for one forward pass. Each parameter is
/// registered as a leaf at most once, so every use site shares the node and
/// gradients from all uses accumulate. With a null tape this just hands out
/// untaped copies, which is the inference path.
class Binding {
  public:
    Binding(const ParamStore& store, ad::Tape* tape)
        : store_(&store), tape_(tape), cache_(store.count()) {}

    const ad::Tensor& operator()(const std::string& name) {
        const std::size_t i = store_->index_at(name);
        auto& slot = cache_[i];
        if (!slot) {
            if (tape_)
                slot = ad::make_leaf(*tape_, store_->entries_[i].value);
            else
                slot = store_->entries_[i].value;
        }
        return *slot;
    }

    ad::Tape* tape() const { return tape_; }

    /// Tape node for parameter index i, or -1 if it was never bound.
    int node_of(std::size_t i) const { return cache_[i] ? cache_[i]->node : -1; }

  private:
    const ParamStore* store_;
    ad::Tape* tape_;
    std::vector<std::optional<ad::Tensor>> cache_;
};

inline void ParamStore::adam_step(const ad::Tape& tape, const Binding& bound, const AdamConfig& cfg) {
    step_ += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    static const std::vector<double> kNoGrad;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto& e = entries_[i];
        const int node = bound.node_of(i);
        const std::vector<double>& g = node >= 0 ? tape.grad(node) : kNoGrad;
        if (!g.empty() && g.size() != e.value.size())
            throw std::logic_error("adam_step: gradient size mismatch for '" + e.name + "'");
        for (std::size_t j = 0; j < e.value.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            if (!std::isfinite(gj))
                throw std::runtime_error("adam_step: non-finite gradient for parameter '" + e.name + "'");
            e.m[j] = cfg.beta1 * e.m[j] + (1.0 - cfg.beta1) * gj;
            e.v[j] = cfg.beta2 * e.v[j] + (1.0 - cfg.beta2) * gj * gj;
            const double mhat = e.m[j] / bc1;
            const double vhat = e.v[j] / bc2;
            e.value.data[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace crossdqn
