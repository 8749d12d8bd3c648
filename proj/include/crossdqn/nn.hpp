#pragma once

#include <string>
#include <vector>

#include "crossdqn/params.hpp"
#include "crossdqn/rng.hpp"
#include "crossdqn/tensor.hpp"

namespace crossdqn::nn {

/// Declares weights and biases for an MLP under `prefix` (prefix.w0,
/// prefix.b0, ...). Weights get fan-in uniform init, biases start at zero.
inline void declare_mlp(ParamStore& s, const std::string& prefix, std::size_t in_dim,
                        const std::vector<std::size_t>& widths, Rng& rng) {
    std::size_t d = in_dim;
    for (std::size_t l = 0; l < widths.size(); ++l) {
        s.add_weight(prefix + ".w" + std::to_string(l), d, widths[l], rng);
        s.add_zeros(prefix + ".b" + std::to_string(l), 1, widths[l]);
        d = widths[l];
    }
}

/// ReLU on hidden layers, linear final layer.
inline ad::Tensor mlp_forward(Binding& p, const std::string& prefix, const ad::Tensor& x,
                              std::size_t nlayers) {
    ad::Tensor h = x;
    for (std::size_t l = 0; l < nlayers; ++l) {
        const std::string i = std::to_string(l);
        h = ad::add_rowvec(ad::matmul(h, p(prefix + ".w" + i)), p(prefix + ".b" + i));
        if (l + 1 < nlayers) h = ad::relu(h);
    }
    return h;
}

/// Declares the q/k/v projections for one single-head attention unit.
/// dq and dkv are the raw query/key input widths, dmodel the projected
/// width the dot products run in, dout the value (output) width.
inline void declare_attention(ParamStore& s, const std::string& prefix, std::size_t dq,
                              std::size_t dkv, std::size_t dmodel, std::size_t dout, Rng& rng) {
    s.add_weight(prefix + ".wq", dq, dmodel, rng);
    s.add_weight(prefix + ".wk", dkv, dmodel, rng);
    s.add_weight(prefix + ".wv", dkv, dout, rng);
}

/// Attention with learned projections; `kv` supplies both keys and values.
/// With q == kv this is self-attention.
inline ad::Tensor attention_forward(Binding& p, const std::string& prefix, const ad::Tensor& q,
                                    const ad::Tensor& kv) {
    return ad::attention(ad::matmul(q, p(prefix + ".wq")), ad::matmul(kv, p(prefix + ".wk")),
                         ad::matmul(kv, p(prefix + ".wv")));
}

}  // namespace crossdqn::nn
