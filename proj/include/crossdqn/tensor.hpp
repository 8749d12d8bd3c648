#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossdqn::ad {

class Tape;

/// Dense row-major matrix of doubles, optionally attached to a tape node.
/// Scalars are 1x1, row vectors 1xN. A tensor with tape == nullptr is a
/// constant: ops accept it but record no gradient for it, so the same
/// forward code serves both training (taped) and inference (untaped).
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data[0] = v;
        return t;
    }

    static Tensor row(std::initializer_list<double> vs) {
        Tensor t(1, vs.size());
        std::size_t i = 0;
        for (double v : vs) t.data[i++] = v;
        return t;
    }

    static Tensor row(const std::vector<double>& vs) {
        Tensor t(1, vs.size());
        t.data = vs;
        return t;
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rws) {
        Tensor t(rws.size(), rws.begin()->size());
        std::size_t i = 0;
        for (const auto& r : rws) {
            if (r.size() != t.cols) throw std::invalid_argument("Tensor::from_rows: ragged rows");
            for (double v : r) t.data[i++] = v;
        }
        return t;
    }

    std::size_t size() const { return rows * cols; }
    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    double item() const {
        if (size() != 1) throw std::logic_error("Tensor::item: not a scalar");
        return data[0];
    }
    bool on_tape() const { return tape != nullptr && node >= 0; }
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// C += A(m,k) * B(k,n)
inline void mm_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                   double* c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = b + p * n;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
}

// C += A(m,k) * B(n,k)^T
inline void mm_bt_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                      double* c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double* arow = a + i * k;
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
}

// C += A(k,m)^T * B(k,n)
inline void mm_at_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                      double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = arow[i];
            if (api == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace detail

/// Reverse-mode tape over matrix-valued operations. Nodes are appended in
/// forward order, so descending node id is a valid reverse topological
/// order. One tape per forward/backward pass; not shared across threads.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

    /// Records a node and returns its id. `size` is the element count of the
    /// node's output; the backward closure receives the output gradient.
    int push(std::size_t size, BackwardFn back) {
        nodes_.push_back(std::move(back));
        grads_.emplace_back(size, 0.0);
        touched_.push_back(0);
        return static_cast<int>(nodes_.size()) - 1;
    }

    /// Records a leaf (no parents, no backward work).
    int leaf(std::size_t size) { return push(size, BackwardFn()); }

    /// Adds `g` into the gradient accumulator of `node`. No-op for constants
    /// (node < 0).
    void acc(int node, const std::vector<double>& g) {
        if (node < 0) return;
        auto& buf = grads_[static_cast<std::size_t>(node)];
        if (g.size() != buf.size()) throw std::logic_error("Tape::acc: gradient size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
        touched_[static_cast<std::size_t>(node)] = 1;
    }

    const std::vector<double>& grad(int node) const {
        if (node < 0 || static_cast<std::size_t>(node) >= grads_.size())
            throw std::logic_error("Tape::grad: bad node id");
        return grads_[static_cast<std::size_t>(node)];
    }

    const std::vector<double>& grad(const Tensor& t) const {
        if (t.tape != this) throw std::logic_error("Tape::grad: tensor not on this tape");
        return grad(t.node);
    }

    /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. The root
    /// must be a scalar recorded on this tape. Nodes that received no
    /// gradient are skipped; their inputs get zero contribution anyway.
    void backward(const Tensor& root) {
        if (root.tape != this || root.node < 0)
            throw std::logic_error("Tape::backward: root not on this tape");
        if (root.size() != 1) throw std::logic_error("Tape::backward: root must be scalar");
        grads_[static_cast<std::size_t>(root.node)][0] += 1.0;
        touched_[static_cast<std::size_t>(root.node)] = 1;
        for (int id = root.node; id >= 0; --id) {
            const auto& back = nodes_[static_cast<std::size_t>(id)];
            if (!back || !touched_[static_cast<std::size_t>(id)]) continue;
            back(*this, grads_[static_cast<std::size_t>(id)]);
        }
    }

    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    std::vector<BackwardFn> nodes_;
    std::vector<std::vector<double>> grads_;
    std::vector<char> touched_;
};

namespace detail {

inline Tape* result_tape(const Tensor& a) { return a.tape; }

inline Tape* result_tape(const Tensor& a, const Tensor& b) {
    if (a.tape && b.tape && a.tape != b.tape)
        throw std::logic_error("operands recorded on different tapes");
    return a.tape ? a.tape : b.tape;
}

}  // namespace detail

/// Registers an existing value as a leaf on `tape` so its gradient can be
/// read back after the sweep. Returns a copy bound to the tape.
inline Tensor make_leaf(Tape& tape, const Tensor& value) {
    Tensor out = value;
    out.tape = &tape;
    out.node = tape.leaf(value.size());
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.cols == b.rows, "matmul: inner dims disagree (" + std::to_string(a.cols) +
                                          " vs " + std::to_string(b.rows) + ")");
    Tensor out(a.rows, b.cols);
    detail::mm_acc(a.rows, a.cols, b.cols, a.data.data(), b.data.data(), out.data.data());
    if (Tape* tape = detail::result_tape(a, b)) {
        out.tape = tape;
        const std::size_t m = a.rows, k = a.cols, n = b.cols;
        const int an = a.tape ? a.node : -1;
        const int bn = b.tape ? b.node : -1;
        out.node = tape->push(out.size(), [m, k, n, an, bn, ad = a.data,
                                           bd = b.data](Tape& t, const std::vector<double>& g) {
            if (an >= 0) {
                std::vector<double> da(m * k, 0.0);
                detail::mm_bt_acc(m, n, k, g.data(), bd.data(), da.data());
                t.acc(an, da);
            }
            if (bn >= 0) {
                std::vector<double> db(k * n, 0.0);
                detail::mm_at_acc(k, m, n, ad.data(), g.data(), db.data());
                t.acc(bn, db);
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.rows == b.rows && a.cols == b.cols, "add: shape mismatch");
    Tensor out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    if (Tape* tape = detail::result_tape(a, b)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int bn = b.tape ? b.node : -1;
        out.node = tape->push(out.size(), [an, bn](Tape& t, const std::vector<double>& g) {
            t.acc(an, g);
            t.acc(bn, g);
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require(a.rows == b.rows && a.cols == b.cols, "sub: shape mismatch");
    Tensor out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    if (Tape* tape = detail::result_tape(a, b)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int bn = b.tape ? b.node : -1;
        out.node = tape->push(out.size(), [an, bn](Tape& t, const std::vector<double>& g) {
            t.acc(an, g);
            if (bn >= 0) {
                std::vector<double> ng(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                t.acc(bn, ng);
            }
        });
    }
    return out;
}

/// a(m,n) + v(1,n), v broadcast over rows. The usual bias-add.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    detail::require(v.rows == 1 && v.cols == a.cols, "add_rowvec: want 1x" + std::to_string(a.cols));
    Tensor out(a.rows, a.cols);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) out.at(r, c) = a.at(r, c) + v.data[c];
    if (Tape* tape = detail::result_tape(a, v)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int vn = v.tape ? v.node : -1;
        const std::size_t m = a.rows, n = a.cols;
        out.node = tape->push(out.size(), [an, vn, m, n](Tape& t, const std::vector<double>& g) {
            t.acc(an, g);
            if (vn >= 0) {
                std::vector<double> dv(n, 0.0);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) dv[c] += g[r * n + c];
                t.acc(vn, dv);
            }
        });
    }
    return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::require(a.rows == b.rows && a.cols == b.cols, "hadamard: shape mismatch");
    Tensor out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    if (Tape* tape = detail::result_tape(a, b)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int bn = b.tape ? b.node : -1;
        out.node = tape->push(out.size(), [an, bn, ad = a.data,
                                           bd = b.data](Tape& t, const std::vector<double>& g) {
            if (an >= 0) {
                std::vector<double> da(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bd[i];
                t.acc(an, da);
            }
            if (bn >= 0) {
                std::vector<double> db(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * ad[i];
                t.acc(bn, db);
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] * s;
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        out.node = a.tape->push(out.size(), [an, s](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * s;
            t.acc(an, da);
        });
    }
    return out;
}

/// a + s with s a 1x1 tensor broadcast over every element of a.
inline Tensor add_scalar(const Tensor& a, const Tensor& s) {
    detail::require(s.size() == 1, "add_scalar: s must be 1x1");
    Tensor out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] + s.data[0];
    if (Tape* tape = detail::result_tape(a, s)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int sn = s.tape ? s.node : -1;
        out.node = tape->push(out.size(), [an, sn](Tape& t, const std::vector<double>& g) {
            t.acc(an, g);
            if (sn >= 0) {
                double sum = 0.0;
                for (double v : g) sum += v;
                t.acc(sn, {sum});
            }
        });
    }
    return out;
}

inline Tensor sub_scalar(const Tensor& a, const Tensor& s) { return add_scalar(a, scale(s, -1.0)); }

inline Tensor relu(const Tensor& a) {
    Tensor out(a.rows, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        out.node = a.tape->push(out.size(), [an, ad = a.data](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = ad[i] > 0.0 ? g[i] : 0.0;
            t.acc(an, da);
        });
    }
    return out;
}

/// Row-wise softmax with max subtraction for stability.
/// d x_i = y_i * (g_i - sum_j g_j y_j) per row.
inline Tensor softmax_rows(const Tensor& a) {
    Tensor out(a.rows, a.cols);
    for (std::size_t r = 0; r < a.rows; ++r) {
        double mx = a.at(r, 0);
        for (std::size_t c = 1; c < a.cols; ++c) mx = std::max(mx, a.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < a.cols; ++c) {
            out.at(r, c) = std::exp(a.at(r, c) - mx);
            z += out.at(r, c);
        }
        for (std::size_t c = 0; c < a.cols; ++c) out.at(r, c) /= z;
    }
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t m = a.rows, n = a.cols;
        out.node =
            a.tape->push(out.size(), [an, m, n, y = out.data](Tape& t, const std::vector<double>& g) {
                std::vector<double> da(m * n);
                for (std::size_t r = 0; r < m; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
                    for (std::size_t c = 0; c < n; ++c)
                        da[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                }
                t.acc(an, da);
            });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out(a.cols, a.rows);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) out.at(c, r) = a.at(r, c);
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t m = a.rows, n = a.cols;
        out.node = a.tape->push(out.size(), [an, m, n](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(m * n);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) da[r * n + c] = g[c * m + r];
            t.acc(an, da);
        });
    }
    return out;
}

/// [a | b] side by side. Rows must match.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require(a.rows == b.rows, "concat_cols: row counts differ");
    Tensor out(a.rows, a.cols + b.cols);
    for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t c = 0; c < a.cols; ++c) out.at(r, c) = a.at(r, c);
        for (std::size_t c = 0; c < b.cols; ++c) out.at(r, a.cols + c) = b.at(r, c);
    }
    if (Tape* tape = detail::result_tape(a, b)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int bn = b.tape ? b.node : -1;
        const std::size_t m = a.rows, na = a.cols, nb = b.cols;
        out.node = tape->push(out.size(), [an, bn, m, na, nb](Tape& t, const std::vector<double>& g) {
            if (an >= 0) {
                std::vector<double> da(m * na);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < na; ++c) da[r * na + c] = g[r * (na + nb) + c];
                t.acc(an, da);
            }
            if (bn >= 0) {
                std::vector<double> db(m * nb);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < nb; ++c) db[r * nb + c] = g[r * (na + nb) + na + c];
                t.acc(bn, db);
            }
        });
    }
    return out;
}

/// a stacked on top of b. Columns must match.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require(a.cols == b.cols, "concat_rows: column counts differ");
    Tensor out(a.rows + b.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i];
    for (std::size_t i = 0; i < b.size(); ++i) out.data[a.size() + i] = b.data[i];
    if (Tape* tape = detail::result_tape(a, b)) {
        out.tape = tape;
        const int an = a.tape ? a.node : -1;
        const int bn = b.tape ? b.node : -1;
        const std::size_t sa = a.size(), sb = b.size();
        out.node = tape->push(out.size(), [an, bn, sa, sb](Tape& t, const std::vector<double>& g) {
            if (an >= 0) t.acc(an, std::vector<double>(g.begin(), g.begin() + static_cast<long>(sa)));
            if (bn >= 0)
                t.acc(bn, std::vector<double>(g.begin() + static_cast<long>(sa),
                                              g.begin() + static_cast<long>(sa + sb)));
        });
    }
    return out;
}

/// Stacks parts vertically in one tape node. Column counts must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat_rows: no parts");
    std::size_t total_rows = 0;
    Tape* tape = nullptr;
    for (const auto& p : parts) {
        detail::require(p.cols == parts[0].cols, "concat_rows: column counts differ");
        total_rows += p.rows;
        if (p.tape) {
            if (tape && tape != p.tape)
                throw std::logic_error("operands recorded on different tapes");
            tape = p.tape;
        }
    }
    Tensor out(total_rows, parts[0].cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.size(); ++i) out.data[off + i] = p.data[i];
        off += p.size();
    }
    if (tape) {
        out.tape = tape;
        std::vector<int> nodes(parts.size());
        std::vector<std::size_t> sizes(parts.size());
        for (std::size_t i = 0; i < parts.size(); ++i) {
            nodes[i] = parts[i].tape ? parts[i].node : -1;
            sizes[i] = parts[i].size();
        }
        out.node = tape->push(out.size(), [nodes, sizes](Tape& t, const std::vector<double>& g) {
            std::size_t at = 0;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i] >= 0)
                    t.acc(nodes[i], std::vector<double>(g.begin() + static_cast<long>(at),
                                                        g.begin() + static_cast<long>(at + sizes[i])));
                at += sizes[i];
            }
        });
    }
    return out;
}

/// Places parts side by side in one tape node. Row counts must agree.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat_cols: no parts");
    std::size_t total_cols = 0;
    Tape* tape = nullptr;
    for (const auto& p : parts) {
        detail::require(p.rows == parts[0].rows, "concat_cols: row counts differ");
        total_cols += p.cols;
        if (p.tape) {
            if (tape && tape != p.tape)
                throw std::logic_error("operands recorded on different tapes");
            tape = p.tape;
        }
    }
    const std::size_t m = parts[0].rows;
    Tensor out(m, total_cols);
    std::size_t coff = 0;
    for (const auto& p : parts) {
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < p.cols; ++c) out.at(r, coff + c) = p.at(r, c);
        coff += p.cols;
    }
    if (tape) {
        out.tape = tape;
        std::vector<int> nodes(parts.size());
        std::vector<std::size_t> widths(parts.size());
        for (std::size_t i = 0; i < parts.size(); ++i) {
            nodes[i] = parts[i].tape ? parts[i].node : -1;
            widths[i] = parts[i].cols;
        }
        out.node =
            tape->push(out.size(), [nodes, widths, m, total_cols](Tape& t, const std::vector<double>& g) {
                std::size_t at = 0;
                for (std::size_t i = 0; i < nodes.size(); ++i) {
                    if (nodes[i] >= 0) {
                        std::vector<double> dp(m * widths[i]);
                        for (std::size_t r = 0; r < m; ++r)
                            for (std::size_t c = 0; c < widths[i]; ++c)
                                dp[r * widths[i] + c] = g[r * total_cols + at + c];
                        t.acc(nodes[i], dp);
                    }
                    at += widths[i];
                }
            });
    }
    return out;
}

/// Tiles a single row n times: (1,c) -> (n,c). Backward sums over copies.
inline Tensor repeat_rows(const Tensor& a, std::size_t n) {
    detail::require(a.rows == 1, "repeat_rows: input must be a single row");
    detail::require(n > 0, "repeat_rows: n must be positive");
    Tensor out(n, a.cols);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) out.at(r, c) = a.data[c];
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t w = a.cols;
        out.node = a.tape->push(out.size(), [an, n, w](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(w, 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < w; ++c) da[c] += g[r * w + c];
            t.acc(an, da);
        });
    }
    return out;
}

/// Reshape to a single row, row-major order. Pure relabeling.
inline Tensor flatten_row(const Tensor& a) {
    Tensor out(1, a.size());
    out.data = a.data;
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        out.node = a.tape->push(out.size(),
                                [an](Tape& t, const std::vector<double>& g) { t.acc(an, g); });
    }
    return out;
}

/// Rows [r0, r1) of a.
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    detail::require(r0 < r1 && r1 <= a.rows, "slice_rows: bad range");
    Tensor out(r1 - r0, a.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[r0 * a.cols + i];
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t m = a.rows, n = a.cols;
        out.node = a.tape->push(out.size(), [an, m, n, r0, r1](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(m * n, 0.0);
            for (std::size_t i = 0; i < (r1 - r0) * n; ++i) da[r0 * n + i] = g[i];
            t.acc(an, da);
        });
    }
    return out;
}

/// Columns [c0, c1) of a.
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    detail::require(c0 < c1 && c1 <= a.cols, "slice_cols: bad range");
    Tensor out(a.rows, c1 - c0);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = c0; c < c1; ++c) out.at(r, c - c0) = a.at(r, c);
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t m = a.rows, n = a.cols;
        out.node = a.tape->push(out.size(), [an, m, n, c0, c1](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(m * n, 0.0);
            const std::size_t w = c1 - c0;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < w; ++c) da[r * n + c0 + c] = g[r * w + c];
            t.acc(an, da);
        });
    }
    return out;
}

/// Column mean over rows: (m,n) -> (1,n). Errors on zero rows; callers that
/// pool a possibly-empty set substitute an explicit zero vector instead.
inline Tensor mean_pool_rows(const Tensor& a) {
    detail::require(a.rows > 0, "mean_pool_rows: empty input");
    Tensor out(1, a.cols);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) out.data[c] += a.at(r, c);
    for (std::size_t c = 0; c < a.cols; ++c) out.data[c] /= static_cast<double>(a.rows);
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t m = a.rows, n = a.cols;
        out.node = a.tape->push(out.size(), [an, m, n](Tape& t, const std::vector<double>& g) {
            std::vector<double> da(m * n);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) da[r * n + c] = g[c] / static_cast<double>(m);
            t.acc(an, da);
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& a) {
    Tensor out(1, 1);
    for (double v : a.data) out.data[0] += v;
    if (a.tape) {
        out.tape = a.tape;
        const int an = a.node;
        const std::size_t sz = a.size();
        out.node = a.tape->push(1, [an, sz](Tape& t, const std::vector<double>& g) {
            t.acc(an, std::vector<double>(sz, g[0]));
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    detail::require(a.size() > 0, "mean_all: empty input");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor square(const Tensor& a) { return hadamard(a, a); }

/// Single-head scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
/// q is (nq,d), k and v are (nk,d) and (nk,dv). Errors when there are no
/// keys; attention over nothing has no sensible output.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    detail::require(k.rows > 0, "attention: no keys");
    detail::require(q.cols == k.cols, "attention: q/k width mismatch");
    detail::require(k.rows == v.rows, "attention: k/v row mismatch");
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols)));
    return matmul(softmax_rows(scores), v);
}

}  // namespace crossdqn::ad
