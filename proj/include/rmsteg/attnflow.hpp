#pragma once

// AttnFlow: ViT tokenizers/detokenizers around a stack of attention affine coupling
// blocks (AACBs). One AACB maps (T_h, T_q) given frozen conditioning tokens T_h0:
//
//   T_h <- T_h + phi(T_q) + alpha * C(T_q, T_h0)
//   T_q <- eta(T_h) + T_q * exp(rho(T_h))
//
// and the inverse walks the same equations backwards. Layer norms live only inside the
// sub-networks, never around the coupling sums, so inversion stays exact.

#include <cmath>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmsteg/error.hpp"
#include "rmsteg/itf.hpp"

namespace rmsteg::attnflow {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

struct TokenizerConfig {
    int image_side = 224;
    int patch_size = 16;
    int depth = 2;
    int token_dim = 768;
    int mlp_dim = 2048;
    int heads = 8;
    int detok_channels = 16;

    int grid() const { return image_side / patch_size; }
    int tokens() const { return grid() * grid(); }

    void validate() const {
        if (patch_size <= 0 || image_side % patch_size != 0) {
            throw ShapeMismatch("image side " + std::to_string(image_side) + " not divisible by patch " +
                                std::to_string(patch_size));
        }
        if (token_dim % heads != 0) throw ShapeMismatch("token_dim must be divisible by heads");
    }
};

struct FlowConfig {
    TokenizerConfig tokenizer;
    int aacb_count = 4;
    double alpha_init = 0.01;
    double rho_clamp = 2.0;
    bool cross_attention = true;
};

// Scaled dot-product attention probabilities Softmax(QK^T / sqrt(d)), [B, H, Nq, Nk].
inline torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
    return torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
}

struct MultiHeadAttentionImpl : nn::Module {
    nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, proj{nullptr};
    int heads;

    MultiHeadAttentionImpl(int dim, int heads_) : heads(heads_) {
        q = register_module("q", nn::Linear(dim, dim));
        k = register_module("k", nn::Linear(dim, dim));
        v = register_module("v", nn::Linear(dim, dim));
        proj = register_module("proj", nn::Linear(dim, dim));
    }

    torch::Tensor split(const torch::Tensor& x) const {
        const auto b = x.size(0);
        const auto n = x.size(1);
        return x.view({b, n, heads, -1}).transpose(1, 2);
    }

    torch::Tensor weights(const torch::Tensor& query, const torch::Tensor& kv) {
        return attention_weights(split(q->forward(query)), split(k->forward(kv)));
    }

    torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& kv) {
        auto attn = weights(query, kv);
        auto out = torch::matmul(attn, split(v->forward(kv)));
        out = out.transpose(1, 2).reshape({query.size(0), query.size(1), -1});
        return proj->forward(out);
    }
};
TORCH_MODULE(MultiHeadAttention);

struct FeedForwardImpl : nn::Module {
    nn::Linear fc1{nullptr}, fc2{nullptr};

    FeedForwardImpl(int dim, int hidden, bool zero_out) {
        fc1 = register_module("fc1", nn::Linear(dim, hidden));
        fc2 = register_module("fc2", nn::Linear(hidden, dim));
        if (zero_out) {
            torch::NoGradGuard guard;
            fc2->weight.zero_();
            fc2->bias.zero_();
        }
    }

    torch::Tensor forward(const torch::Tensor& x) { return fc2->forward(F::gelu(fc1->forward(x))); }
};
TORCH_MODULE(FeedForward);

// Pre-norm ViT encoder block used inside the tokenizers.
struct TransformerBlockImpl : nn::Module {
    nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    MultiHeadAttention attn{nullptr};
    FeedForward mlp{nullptr};

    TransformerBlockImpl(int dim, int mlp_dim, int heads) {
        norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
        attn = register_module("attn", MultiHeadAttention(dim, heads));
        norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
        mlp = register_module("mlp", FeedForward(dim, mlp_dim, false));
    }

    torch::Tensor forward(torch::Tensor x) {
        auto h = norm1->forward(x);
        x = x + attn->forward(h, h);
        return x + mlp->forward(norm2->forward(x));
    }
};
TORCH_MODULE(TransformerBlock);

// phi / eta / rho: self-attention block followed by an MLP whose last layer starts at zero.
struct SelfAttentionSubnetImpl : nn::Module {
    nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    MultiHeadAttention attn{nullptr};
    FeedForward mlp{nullptr};

    SelfAttentionSubnetImpl(int dim, int mlp_dim, int heads) {
        norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
        attn = register_module("attn", MultiHeadAttention(dim, heads));
        norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
        mlp = register_module("mlp", FeedForward(dim, mlp_dim, true));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = norm1->forward(x);
        auto a = x + attn->forward(h, h);
        return mlp->forward(norm2->forward(a));
    }
};
TORCH_MODULE(SelfAttentionSubnet);

// C(q, kv): queries from the QR tokens, keys/values from the conditioning tokens.
struct CrossAttentionSubnetImpl : nn::Module {
    nn::LayerNorm norm_q{nullptr}, norm_kv{nullptr}, norm2{nullptr};
    MultiHeadAttention attn{nullptr};
    FeedForward mlp{nullptr};

    CrossAttentionSubnetImpl(int dim, int mlp_dim, int heads) {
        norm_q = register_module("norm_q", nn::LayerNorm(nn::LayerNormOptions({dim})));
        norm_kv = register_module("norm_kv", nn::LayerNorm(nn::LayerNormOptions({dim})));
        attn = register_module("attn", MultiHeadAttention(dim, heads));
        norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
        mlp = register_module("mlp", FeedForward(dim, mlp_dim, true));
    }

    torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& kv) {
        auto a = query + attn->forward(norm_q->forward(query), norm_kv->forward(kv));
        return mlp->forward(norm2->forward(a));
    }
};
TORCH_MODULE(CrossAttentionSubnet);

struct FlowState {
    torch::Tensor t_h;
    torch::Tensor t_q;
    torch::Tensor t_h0;
    int depth = 0;
};

inline void check_state(const FlowState& s) {
    if (s.t_h.sizes() != s.t_q.sizes() || s.t_h.sizes() != s.t_h0.sizes() || s.t_h.dim() != 3) {
        throw ShapeMismatch("flow state grids must share [B, N, D]");
    }
}

inline void check_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) throw NonFiniteValue(std::string(what) + " contains NaN/Inf");
}

struct AACBImpl : nn::Module {
    SelfAttentionSubnet phi{nullptr}, eta{nullptr}, rho{nullptr};
    CrossAttentionSubnet cross{nullptr};
    torch::Tensor alpha;
    double rho_clamp;
    bool use_cross;

    AACBImpl(int dim, int mlp_dim, int heads, double alpha_init, double clamp, bool cross_attention)
        : rho_clamp(clamp), use_cross(cross_attention) {
        phi = register_module("phi", SelfAttentionSubnet(dim, mlp_dim, heads));
        eta = register_module("eta", SelfAttentionSubnet(dim, mlp_dim, heads));
        rho = register_module("rho", SelfAttentionSubnet(dim, mlp_dim, heads));
        if (use_cross) {
            cross = register_module("cross", CrossAttentionSubnet(dim, mlp_dim, heads));
            alpha = register_parameter("alpha", torch::full({1}, alpha_init));
        } else {
            alpha = register_buffer("alpha", torch::zeros({1}));
        }
    }

    torch::Tensor log_scale(const torch::Tensor& t_h) { return rho_clamp * torch::tanh(rho->forward(t_h)); }

    torch::Tensor host_update(const torch::Tensor& t_q, const torch::Tensor& t_h0) {
        auto u = phi->forward(t_q);
        if (use_cross) u = u + alpha * cross->forward(t_q, t_h0);
        return u;
    }

    FlowState forward(const FlowState& s) {
        check_state(s);
        auto t_h = s.t_h + host_update(s.t_q, s.t_h0);
        auto t_q = eta->forward(t_h) + s.t_q * torch::exp(log_scale(t_h));
        check_finite(t_h, "AACB host tokens");
        check_finite(t_q, "AACB QR tokens");
        return {t_h, t_q, s.t_h0, s.depth + 1};
    }

    FlowState inverse(const FlowState& s) {
        check_state(s);
        auto t_q = (s.t_q - eta->forward(s.t_h)) * torch::exp(-log_scale(s.t_h));
        auto t_h = s.t_h - host_update(t_q, s.t_h0);
        check_finite(t_h, "AACB host tokens");
        check_finite(t_q, "AACB QR tokens");
        return {t_h, t_q, s.t_h0, s.depth - 1};
    }
};
TORCH_MODULE(AACB);

inline FlowState aacb_forward(const FlowState& state, AACB& block) { return block->forward(state); }
inline FlowState aacb_inverse(const FlowState& state, AACB& block) { return block->inverse(state); }

struct TokenizerImpl : nn::Module {
    TokenizerConfig cfg;
    nn::Conv2d patch{nullptr};
    torch::Tensor pos;
    std::vector<TransformerBlock> blocks;

    explicit TokenizerImpl(const TokenizerConfig& c) : cfg(c) {
        cfg.validate();
        patch = register_module(
            "patch", nn::Conv2d(nn::Conv2dOptions(3, cfg.token_dim, cfg.patch_size).stride(cfg.patch_size)));
        pos = register_parameter("pos", torch::randn({1, cfg.tokens(), cfg.token_dim}) * 0.02);
        for (int i = 0; i < cfg.depth; ++i) {
            blocks.push_back(register_module("block" + std::to_string(i),
                                             TransformerBlock(cfg.token_dim, cfg.mlp_dim, cfg.heads)));
        }
    }

    torch::Tensor forward(const torch::Tensor& img) {
        if (img.dim() != 4 || img.size(1) != 3 || img.size(2) != cfg.image_side || img.size(3) != cfg.image_side) {
            throw ShapeMismatch("tokenizer expects [B, 3, " + std::to_string(cfg.image_side) + ", " +
                                std::to_string(cfg.image_side) + "]");
        }
        auto x = patch->forward(img).flatten(2).transpose(1, 2) + pos;
        for (auto& b : blocks) x = b->forward(x);
        return x;
    }
};
TORCH_MODULE(Tokenizer);

// Bias-free MLP projection to per-patch feature maps, reshape, then two 3x3 convolutions
// with GELU. Replicate padding keeps a constant feature map constant.
struct DetokenizerImpl : nn::Module {
    TokenizerConfig cfg;
    nn::Linear fc1{nullptr}, fc2{nullptr};
    nn::Conv2d conv1{nullptr}, conv2{nullptr};

    explicit DetokenizerImpl(const TokenizerConfig& c) : cfg(c) {
        cfg.validate();
        const int p = cfg.patch_size;
        const int ch = cfg.detok_channels;
        fc1 = register_module("fc1", nn::Linear(nn::LinearOptions(cfg.token_dim, cfg.mlp_dim).bias(false)));
        fc2 = register_module("fc2", nn::Linear(nn::LinearOptions(cfg.mlp_dim, ch * p * p).bias(false)));
        auto conv = [](int i, int o) {
            return nn::Conv2dOptions(i, o, 3).padding(1).padding_mode(torch::kReplicate);
        };
        conv1 = register_module("conv1", nn::Conv2d(conv(ch, ch)));
        conv2 = register_module("conv2", nn::Conv2d(conv(ch, 3)));
    }

    torch::Tensor forward(const torch::Tensor& tokens) {
        if (tokens.dim() != 3 || tokens.size(1) != cfg.tokens() || tokens.size(2) != cfg.token_dim) {
            throw ShapeMismatch("detokenizer expects [B, N, D]");
        }
        const auto b = tokens.size(0);
        const int g = cfg.grid();
        const int p = cfg.patch_size;
        const int ch = cfg.detok_channels;
        auto x = fc2->forward(F::gelu(fc1->forward(tokens)));
        x = x.view({b, g, g, ch, p, p}).permute({0, 3, 1, 4, 2, 5}).reshape({b, ch, g * p, g * p});
        return conv2->forward(F::gelu(conv1->forward(x)));
    }
};
TORCH_MODULE(Detokenizer);

struct AttnFlowImpl : nn::Module {
    FlowConfig cfg;
    Tokenizer host_tok{nullptr}, qr_tok{nullptr}, stego_tok{nullptr};
    Detokenizer stego_detok{nullptr}, qr_detok{nullptr};
    std::vector<AACB> blocks;

    explicit AttnFlowImpl(const FlowConfig& c) : cfg(c) {
        const auto& t = cfg.tokenizer;
        host_tok = register_module("host_tok", Tokenizer(t));
        qr_tok = register_module("qr_tok", Tokenizer(t));
        stego_tok = register_module("stego_tok", Tokenizer(t));
        stego_detok = register_module("stego_detok", Detokenizer(t));
        qr_detok = register_module("qr_detok", Detokenizer(t));
        for (int i = 0; i < cfg.aacb_count; ++i) {
            blocks.push_back(register_module(
                "aacb" + std::to_string(i),
                AACB(t.token_dim, t.mlp_dim, t.heads, cfg.alpha_init, cfg.rho_clamp, cfg.cross_attention)));
        }
    }

    FlowState run_forward(FlowState s) {
        for (auto& b : blocks) s = b->forward(s);
        return s;
    }

    FlowState run_inverse(FlowState s) {
        for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) s = (*it)->inverse(s);
        return s;
    }

    std::vector<double> alphas() const {
        std::vector<double> out;
        for (const auto& b : blocks) out.push_back(b->alpha.item<double>());
        return out;
    }
};
TORCH_MODULE(AttnFlow);

struct Concealed {
    torch::Tensor stego;
    torch::Tensor residual;  // T_q^(n)
};

inline void check_image(const torch::Tensor& img, int side, const char* what) {
    if (img.dim() != 4 || img.size(1) != 3 || img.size(2) != side || img.size(3) != side) {
        throw ShapeMismatch(std::string(what) + " must be [B, 3, " + std::to_string(side) + ", " +
                            std::to_string(side) + "]");
    }
}

inline Concealed conceal(AttnFlow& flow, itf::TokenFusion& fusion, const torch::Tensor& host,
                         const torch::Tensor& qr_star) {
    const int side = flow->cfg.tokenizer.image_side;
    check_image(host, side, "host");
    check_image(qr_star, side, "transformed QR");
    auto t_h0 = flow->host_tok->forward(host);
    auto t_q = fusion->fuse(flow->qr_tok->forward(qr_star));
    auto s = flow->run_forward({t_h0, t_q, t_h0, 0});
    return {flow->stego_detok->forward(s.t_h), s.t_q};
}

// Samples the residual tokens from N(0, I) with the given seed; the same seed always
// yields the same restored image.
inline torch::Tensor reveal(AttnFlow& flow, itf::TokenFusion& fusion, const torch::Tensor& stego_distorted,
                            uint64_t rng_seed) {
    const int side = flow->cfg.tokenizer.image_side;
    check_image(stego_distorted, side, "stego");
    auto t_h = flow->stego_tok->forward(stego_distorted);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(rng_seed);
    auto z = torch::randn(t_h.sizes(), gen, t_h.options().requires_grad(false));
    auto s = flow->run_inverse({t_h, z, t_h, flow->cfg.aacb_count});
    return flow->qr_detok->forward(fusion->unfuse(s.t_q));
}

}  // namespace rmsteg::attnflow
