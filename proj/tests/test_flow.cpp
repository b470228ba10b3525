#include <gtest/gtest.h>

#include <torch/torch.h>

#include "rmsteg/attnflow.hpp"
#include "rmsteg/iqrt.hpp"
#include "rmsteg/itf.hpp"
#include "rmsteg/qr/codec.hpp"
#include "rmsteg/qr/scan.hpp"

using namespace rmsteg;

namespace {

// Zero-initialised output layers make every coupling the identity; jitter all weights so
// the round trips below exercise non-trivial maps.
void jitter(torch::nn::Module& m, double scale, uint64_t seed) {
    torch::NoGradGuard guard;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (auto& p : m.parameters()) p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

attnflow::FlowConfig tiny_flow() {
    attnflow::FlowConfig cfg;
    cfg.tokenizer = {32, 8, 1, 32, 64, 4, 8};
    cfg.aacb_count = 2;
    return cfg;
}

}  // namespace

TEST(Transition, InitialisedBlocksOnlyRollChannels) {
    torch::manual_seed(1);
    iqrt::TransitionNet net(iqrt::TransitionConfig{3, 8, 2.0});
    auto x = torch::rand({2, 3, 16, 16});
    auto h = torch::rand({2, 3, 16, 16});
    EXPECT_TRUE(torch::allclose(net->forward(x, h), x.roll(3, 1)));
}

TEST(Transition, InverseRecoversInputWithMatchedConditioning) {
    torch::manual_seed(2);
    iqrt::TransitionNet net(iqrt::TransitionConfig{2, 16, 2.0});
    jitter(*net, 0.1, 7);
    auto x = torch::rand({2, 3, 24, 24});
    auto h = torch::rand({2, 3, 24, 24});
    auto y = net->forward(x, h);
    EXPECT_GT((y - x).abs().max().item<double>(), 1e-2);
    EXPECT_LT((net->inverse(y, h) - x).abs().max().item<double>(), 1e-5);
}

TEST(Transition, MismatchedConditioningDoesNotInvert) {
    torch::manual_seed(3);
    iqrt::TransitionNet net(iqrt::TransitionConfig{2, 16, 2.0});
    jitter(*net, 0.1, 8);
    auto x = torch::rand({1, 3, 24, 24});
    auto h = torch::rand({1, 3, 24, 24});
    auto other = torch::rand({1, 3, 24, 24});
    EXPECT_GT((net->inverse(net->forward(x, h), other) - x).abs().max().item<double>(), 1e-3);
}

TEST(Transition, ShapeMismatchThrows) {
    iqrt::TransitionNet net;
    EXPECT_THROW(net->forward(torch::rand({1, 3, 8, 8}), torch::rand({1, 3, 8, 9})), ShapeMismatch);
    EXPECT_THROW(net->forward(torch::rand({1, 1, 8, 8}), torch::rand({1, 1, 8, 8})), ShapeMismatch);
}

TEST(Transition, GradientMatchesFiniteDifferences) {
    torch::manual_seed(4);
    iqrt::TransitionNet net(iqrt::TransitionConfig{1, 4, 2.0});
    jitter(*net, 0.2, 9);
    net->to(torch::kFloat64);
    auto h = torch::rand({1, 3, 6, 6}, torch::kFloat64);
    auto x = torch::rand({1, 3, 6, 6}, torch::kFloat64).requires_grad_(true);
    auto w = torch::rand({1, 3, 6, 6}, torch::kFloat64);
    auto f = [&](const torch::Tensor& in) { return (net->forward(in, h) * w).sum(); };
    f(x).backward();
    auto grad = x.grad().clone();
    torch::NoGradGuard guard;
    const double eps = 1e-6;
    for (int64_t i : {0, 17, 40, 77, 100}) {
        auto d = torch::zeros_like(x).view(-1);
        d[i] = eps;
        auto dv = d.view_as(x);
        const double fd = (f(x + dv) - f(x - dv)).item<double>() / (2 * eps);
        EXPECT_NEAR(fd, grad.view(-1)[i].item<double>(), 1e-6);
    }
}

TEST(TransitionLoss, ZeroForExactRenderAndPositiveForWrongModule) {
    auto mm = qr::encode_message("HELLO", 5);
    auto img = qr::render(mm, 5, mm.n * 5).unsqueeze(0);
    EXPECT_DOUBLE_EQ(iqrt::transition_loss(img, {mm}).item<double>(), 0.0);

    // Turn one white module black: xi marks it and the loss is its deviation / n^2.
    int r = -1, c = -1;
    for (int i = 0; i < mm.n && r < 0; ++i)
        for (int j = 0; j < mm.n; ++j)
            if (mm.at(i, j)) { r = i; c = j; break; }
    auto bad = img.clone();
    bad.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(r * 5, r * 5 + 5),
                    torch::indexing::Slice(c * 5, c * 5 + 5)},
                   0.0);
    const double expected = 1.0 / (mm.n * mm.n);
    EXPECT_NEAR(iqrt::transition_loss(bad, {mm}).item<double>(), expected, 1e-7);
}

TEST(TransitionLoss, BatchSizeMismatchThrows) {
    auto mm = qr::encode_message("A", 5);
    EXPECT_THROW(iqrt::transition_loss(torch::rand({2, 3, 185, 185}), {mm}), ShapeMismatch);
}

TEST(TokenFusion, InitialMatrixIsOrthogonalWithUnitDeterminant) {
    for (uint64_t seed : {0, 1, 2, 3}) {
        itf::TokenFusion f(49, true, seed);
        auto m = f->M.detach().to(torch::kFloat64);
        EXPECT_TRUE(torch::allclose(torch::matmul(m.t(), m), torch::eye(49, torch::kFloat64), 1e-5, 1e-5));
        EXPECT_NEAR(torch::linalg_det(m).item<double>(), 1.0, 1e-5);
        EXPECT_NEAR(f->condition(), 1.0, 1e-4);
    }
}

TEST(TokenFusion, SameSeedSameMatrix) {
    itf::TokenFusion a(16, true, 5), b(16, true, 5), c(16, true, 6);
    EXPECT_TRUE(torch::equal(a->M, b->M));
    EXPECT_FALSE(torch::equal(a->M, c->M));
}

TEST(TokenFusion, UnfuseInvertsFuse) {
    itf::TokenFusion f(16, true, 3);
    {
        torch::NoGradGuard g;
        f->M.add_(torch::randn({16, 16}) * 0.1);  // not orthogonal any more
    }
    auto t = torch::randn({3, 16, 8});
    EXPECT_LT((f->unfuse(f->fuse(t)) - t).abs().max().item<double>(), 1e-4);
    auto t2 = torch::randn({16, 8});
    EXPECT_LT((f->unfuse(f->fuse(t2)) - t2).abs().max().item<double>(), 1e-4);
}

TEST(TokenFusion, FrozenVariantIsIdentity) {
    itf::TokenFusion f(9, false);
    EXPECT_FALSE(f->M.requires_grad());
    auto t = torch::randn({2, 9, 4});
    EXPECT_TRUE(torch::equal(f->fuse(t), t));
}

TEST(TokenFusion, SingularMatrixThrows) {
    itf::TokenFusion f(8, true, 1);
    {
        torch::NoGradGuard g;
        f->M.select(0, 3).copy_(f->M.select(0, 2));
    }
    EXPECT_THROW(f->unfuse(torch::randn({1, 8, 4})), SingularMatrix);
}

TEST(TokenFusion, WrongTokenCountThrows) {
    itf::TokenFusion f(8);
    EXPECT_THROW(f->fuse(torch::randn({1, 9, 4})), ShapeMismatch);
}

TEST(Attention, WeightsAreRowStochastic) {
    attnflow::MultiHeadAttention mha(16, 4);
    auto x = torch::randn({2, 10, 16});
    auto w = mha->weights(x, x);
    EXPECT_EQ(w.sizes(), (std::vector<int64_t>{2, 4, 10, 10}));
    EXPECT_TRUE(torch::allclose(w.sum(-1), torch::ones({2, 4, 10}), 1e-5, 1e-5));
    EXPECT_GE(w.min().item<double>(), 0.0);
}

TEST(AACB, IdentityAtInitialisationExceptConditioningTerm) {
    torch::manual_seed(5);
    attnflow::AACB block(32, 64, 4, 0.01, 2.0, true);
    attnflow::FlowState s{torch::randn({2, 16, 32}), torch::randn({2, 16, 32}), torch::randn({2, 16, 32})};
    auto out = block->forward(s);
    EXPECT_TRUE(torch::allclose(out.t_h, s.t_h));
    EXPECT_TRUE(torch::allclose(out.t_q, s.t_q));
    EXPECT_EQ(out.depth, 1);
}

TEST(AACB, InverseRecoversState) {
    torch::manual_seed(6);
    for (bool cross : {true, false}) {
        attnflow::AACB block(32, 64, 4, 0.5, 2.0, cross);
        jitter(*block, 0.05, 11);
        attnflow::FlowState s{torch::randn({2, 16, 32}), torch::randn({2, 16, 32}), torch::randn({2, 16, 32})};
        auto fwd = block->forward(s);
        EXPECT_GT((fwd.t_h - s.t_h).abs().max().item<double>(), 1e-2);
        auto back = block->inverse(fwd);
        EXPECT_LT((back.t_h - s.t_h).abs().max().item<double>(), 1e-4);
        EXPECT_LT((back.t_q - s.t_q).abs().max().item<double>(), 1e-4);
        EXPECT_EQ(back.depth, 0);
    }
}

TEST(AACB, CrossTermUsesConditioning) {
    torch::manual_seed(7);
    attnflow::AACB block(32, 64, 4, 1.0, 2.0, true);
    jitter(*block, 0.05, 12);
    auto th = torch::randn({1, 16, 32}), tq = torch::randn({1, 16, 32});
    auto a = block->forward({th, tq, torch::randn({1, 16, 32})});
    auto b = block->forward({th, tq, torch::randn({1, 16, 32})});
    EXPECT_GT((a.t_h - b.t_h).abs().max().item<double>(), 1e-4);
}

TEST(AACB, NonFiniteRaises) {
    attnflow::AACB block(32, 64, 4, 0.01, 2.0, true);
    auto th = torch::randn({1, 16, 32});
    th[0][0][0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(block->forward({th, torch::randn({1, 16, 32}), torch::randn({1, 16, 32})}), NonFiniteValue);
}

TEST(AACB, MismatchedStateThrows) {
    attnflow::AACB block(32, 64, 4, 0.01, 2.0, true);
    EXPECT_THROW(block->forward({torch::randn({1, 16, 32}), torch::randn({1, 15, 32}), torch::randn({1, 16, 32})}),
                 ShapeMismatch);
}

TEST(Detokenizer, ZeroTokensGiveConstantImage) {
    torch::manual_seed(8);
    auto cfg = tiny_flow().tokenizer;
    attnflow::Detokenizer d(cfg);
    auto img = d->forward(torch::zeros({1, cfg.tokens(), cfg.token_dim}));
    for (int ch = 0; ch < 3; ++ch) {
        auto plane = img[0][ch];
        EXPECT_NEAR((plane.max() - plane.min()).item<double>(), 0.0, 1e-6);
    }
}

TEST(AttnFlow, ConcealAndRevealShapes) {
    torch::manual_seed(9);
    auto cfg = tiny_flow();
    attnflow::AttnFlow flow(cfg);
    itf::TokenFusion fusion(cfg.tokenizer.tokens(), true, 0);
    auto host = torch::rand({2, 3, 32, 32}), qr = torch::rand({2, 3, 32, 32});
    auto c = attnflow::conceal(flow, fusion, host, qr);
    EXPECT_EQ(c.stego.sizes(), host.sizes());
    EXPECT_EQ(c.residual.sizes(), (std::vector<int64_t>{2, 16, 32}));
    auto r = attnflow::reveal(flow, fusion, c.stego, 42);
    EXPECT_EQ(r.sizes(), host.sizes());
    EXPECT_THROW(attnflow::conceal(flow, fusion, torch::rand({2, 3, 31, 31}), qr), ShapeMismatch);
}

TEST(AttnFlow, RevealIsDeterministicPerSeed) {
    torch::manual_seed(10);
    auto cfg = tiny_flow();
    attnflow::AttnFlow flow(cfg);
    jitter(*flow, 0.02, 13);
    itf::TokenFusion fusion(cfg.tokenizer.tokens(), true, 0);
    auto stego = torch::rand({1, 3, 32, 32});
    torch::NoGradGuard g;
    EXPECT_TRUE(torch::equal(attnflow::reveal(flow, fusion, stego, 1), attnflow::reveal(flow, fusion, stego, 1)));
    EXPECT_FALSE(torch::equal(attnflow::reveal(flow, fusion, stego, 1), attnflow::reveal(flow, fusion, stego, 2)));
}

TEST(AttnFlow, TokenChainInvertsWithTrueResidual) {
    // Flow-level invertibility: feeding the exact forward outputs back through the inverse
    // recovers the fused QR tokens.
    torch::manual_seed(11);
    auto cfg = tiny_flow();
    attnflow::AttnFlow flow(cfg);
    jitter(*flow, 0.02, 14);
    auto th0 = torch::randn({1, 16, 32}), tq = torch::randn({1, 16, 32});
    auto out = flow->run_forward({th0, tq, th0, 0});
    auto back = flow->run_inverse({out.t_h, out.t_q, th0, cfg.aacb_count});
    EXPECT_LT((back.t_q - tq).abs().max().item<double>(), 1e-4);
    EXPECT_LT((back.t_h - th0).abs().max().item<double>(), 1e-4);
}

TEST(AttnFlow, AlphaStartsAtConfiguredValue) {
    attnflow::AttnFlow flow(tiny_flow());
    for (double a : flow->alphas()) EXPECT_NEAR(a, 0.01, 1e-7);
}
