#pragma once

// Invertible token fusion: a learnable N x N matrix mixing QR tokens across patches.

#include <cstdint>

#include <torch/torch.h>

#include "rmsteg/error.hpp"

namespace rmsteg::itf {

namespace nn = torch::nn;

inline constexpr double kMaxCondition = 1e6;

// Orthogonal factor of a Gaussian matrix, sign-corrected so diag(R) > 0 and det = +1.
inline torch::Tensor random_orthogonal(int64_t n, uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto g = torch::randn({n, n}, gen, torch::kFloat64);
    auto [q, r] = torch::linalg_qr(g);
    q = q * torch::sign(torch::diagonal(r)).unsqueeze(0);
    if (torch::linalg_det(q).item<double>() < 0) q.select(1, 0).neg_();
    return q.to(torch::kFloat32);
}

struct TokenFusionImpl : nn::Module {
    torch::Tensor M;
    bool learnable;

    // learnable = false freezes M at the identity (the "without ITF" variant).
    TokenFusionImpl(int64_t tokens, bool learnable_ = true, uint64_t seed = 0) : learnable(learnable_) {
        auto init = learnable ? random_orthogonal(tokens, seed) : torch::eye(tokens, torch::kFloat32);
        M = register_parameter("M", init, learnable);
    }

    int64_t tokens() const { return M.size(0); }

    void check(const torch::Tensor& t) const {
        if (t.dim() < 2 || t.size(-2) != M.size(0)) throw ShapeMismatch("token grid does not have N rows");
    }

    // T_q' = M * T_q for [N, D] or [B, N, D].
    torch::Tensor fuse(const torch::Tensor& tokens) {
        check(tokens);
        return torch::matmul(M.to(tokens.scalar_type()), tokens);
    }

    // T_q = M^-1 * T_q' by a fresh linear solve against the current M.
    torch::Tensor unfuse(const torch::Tensor& tokens) {
        check(tokens);
        auto m = M.to(tokens.scalar_type());
        auto [lu, pivots, info] = torch::linalg_lu_factor_ex(m);
        if (info.item<int64_t>() != 0 || condition() > 1e12) throw SingularMatrix("fusion matrix is not invertible");
        return torch::linalg_lu_solve(lu, pivots, tokens.dim() == 3 ? tokens : tokens.unsqueeze(0))
            .reshape(tokens.sizes());
    }

    double condition() const { return torch::linalg_cond(M.detach().to(torch::kFloat64)).item<double>(); }
};
TORCH_MODULE(TokenFusion);

}  // namespace rmsteg::itf
