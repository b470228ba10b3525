#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <torch/torch.h>

#include "rmsteg/checkpoint.hpp"
#include "rmsteg/config.hpp"
#include "rmsteg/image_io.hpp"
#include "rmsteg/model.hpp"
#include "rmsteg/trainer.hpp"

using namespace rmsteg;
namespace fs = std::filesystem;

namespace {

Config tiny_config() {
    Config c = desk_profile();
    c.seed = 3;
    c.flow.tokenizer = {40, 8, 1, 32, 64, 4, 8};
    c.iqrt.hidden = 8;
    c.train.batch_size = 2;
    c.train.iterations = 4;
    c.train.eval_codes = 2;
    return c;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("rmsteg_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path host_folder(int count, int side, const std::string& name = "hosts") {
    auto dir = temp_dir(name);
    torch::manual_seed(99);
    for (int i = 0; i < count; ++i) io::save_image(torch::rand({3, side, side}), (dir / ("h" + std::to_string(i) + ".png")).string());
    return dir;
}

std::map<std::string, torch::Tensor> snapshot(torch::nn::Module& m) {
    std::map<std::string, torch::Tensor> out;
    for (const auto& p : m.named_parameters()) out[p.key()] = p.value().detach().clone();
    return out;
}

bool changed(const std::map<std::string, torch::Tensor>& before, torch::nn::Module& m, const std::string& prefix) {
    bool any = false;
    for (const auto& p : m.named_parameters()) {
        if (p.key().rfind(prefix, 0) != 0) continue;
        any = any || !torch::equal(before.at(p.key()), p.value());
    }
    return any;
}

}  // namespace

TEST(Config, DeskProfileAndOverrides) {
    auto c = parse_config("[run]\nprofile = desk\nseed = 9 # comment\n[attnflow]\naacb_count = 3\n");
    EXPECT_EQ(c.image_side(), 64);
    EXPECT_EQ(c.flow.tokenizer.patch_size, 8);
    EXPECT_EQ(c.flow.tokenizer.token_dim, 192);
    EXPECT_EQ(c.flow.tokenizer.mlp_dim, 512);
    EXPECT_EQ(c.flow.aacb_count, 3);
    EXPECT_EQ(c.seed, 9U);
    EXPECT_EQ(c.tokens(), 64);
}

TEST(Config, PaperDefaults) {
    auto c = parse_config("");
    EXPECT_EQ(c.image_side(), 224);
    EXPECT_EQ(c.tokens(), 196);
    EXPECT_EQ(c.flow.aacb_count, 4);
    EXPECT_DOUBLE_EQ(c.train.lr_initial, 1e-4);
    EXPECT_DOUBLE_EQ(c.train.lr_floor, 1e-5);
    EXPECT_DOUBLE_EQ(c.train.beta1, 0.9);
    EXPECT_DOUBLE_EQ(c.train.beta2, 0.999);
    EXPECT_DOUBLE_EQ(c.loss.alpha, 5.0);
    EXPECT_DOUBLE_EQ(c.loss.delta, 16.0);
    EXPECT_DOUBLE_EQ(c.flow.alpha_init, 0.01);
    EXPECT_EQ(c.iqrt.blocks, 2);
}

TEST(Config, Errors) {
    EXPECT_THROW(parse_config("[run]\nbogus = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[run]\nseed = x\n"), ConfigError);
    EXPECT_THROW(parse_config("[run]\nprofile = huge\n"), ConfigError);
    EXPECT_THROW(parse_config("[attnflow]\npatch_size = 15\n"), ShapeMismatch);
    EXPECT_THROW(parse_config("[train]\nlr_floor = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[qr]\nversion = 9\n"), UnsupportedVersion);
    EXPECT_THROW(load_config("/nonexistent.cfg"), ConfigError);
}

TEST(Config, SnapshotRoundTrip) {
    auto c = tiny_config();
    c.train.lr_initial = 3.3e-4;
    c.itf_on = false;
    EXPECT_EQ(to_text(parse_config(to_text(c))), to_text(c));
}

TEST(Trainer, LearningRateSchedule) {
    TrainConfig t;
    EXPECT_DOUBLE_EQ(trainer::lr_schedule(0, t), 1e-4);
    EXPECT_NEAR(trainer::lr_schedule(1, t), 9e-5, 1e-18);
    EXPECT_DOUBLE_EQ(trainer::lr_schedule(50, t), 1e-5);
}

TEST(Trainer, QrBatchIsDistinctReplayableAndDecodable) {
    auto a = trainer::generate_qr_batch(4, 5, 11, 64);
    auto b = trainer::generate_qr_batch(4, 5, 11, 64);
    ASSERT_EQ(a.size(), 4U);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].matrix.n, 37);
        EXPECT_EQ(a[i].message, b[i].message);
        EXPECT_TRUE(torch::equal(a[i].image, b[i].image));
        EXPECT_EQ(a[i].message.size(), static_cast<std::size_t>(qr::max_chars(5, qr::Mode::Alphanumeric)));
        for (std::size_t j = 0; j < i; ++j) EXPECT_FALSE(a[i].matrix == a[j].matrix);
        auto read = qr::read_modules(a[i].image, 5, 0.5);
        EXPECT_EQ(qr::decode_matrix(read), a[i].message);
    }
}

TEST(Trainer, IngestHosts) {
    auto dir = host_folder(3, 48);
    io::save_image(torch::rand({3, 20, 20}), (dir / "small.png").string());
    std::ofstream(dir / "broken.png") << "not an image";
    auto ds = trainer::ingest_hosts(dir.string(), 40, 5);
    EXPECT_EQ(ds.size(), 3U);
    EXPECT_EQ(ds.skipped, 2);
    auto batch = ds.batch(0, 5);
    EXPECT_EQ(batch.sizes(), (std::vector<int64_t>{5, 3, 40, 40}));
    EXPECT_GE(batch.min().item<double>(), 0.0);
    EXPECT_LE(batch.max().item<double>(), 1.0);
    auto again = trainer::ingest_hosts(dir.string(), 40, 5);
    EXPECT_TRUE(torch::equal(again.batch(3, 5), ds.batch(3, 5)));

    // an image exactly the crop size is returned unchanged
    auto exact = trainer::ingest_hosts(dir.string(), 48, 5);
    EXPECT_TRUE(torch::equal(exact.crop(0, 123), exact.images[0]));
    fs::remove_all(dir);

    auto empty = temp_dir("empty");
    EXPECT_THROW(trainer::ingest_hosts(empty.string(), 40, 0), EmptyDataset);
    EXPECT_THROW(trainer::ingest_hosts("/nonexistent/dir", 40, 0), EmptyDataset);
}

TEST(Trainer, EpochVisitsEveryHostOnce) {
    auto dir = host_folder(4, 40, "epoch");
    auto ds = trainer::ingest_hosts(dir.string(), 40, 1);
    auto order = ds.epoch_order(0);
    std::sort(order.begin(), order.end());
    EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2, 3}));
    fs::remove_all(dir);
}

TEST(Model, InitialStegoIsAutoencodedHost) {
    auto cfg = tiny_config();
    RMSteg model(cfg);
    torch::NoGradGuard g;
    auto host = torch::rand({1, 3, 40, 40});
    auto code = trainer::generate_qr_batch(1, 5, 1, 40)[0].image.unsqueeze(0);
    auto enc = model->encode(host, code);
    EXPECT_TRUE(torch::equal(enc.qr_star, code));  // identity transition at init
    auto baseline = model->attnflow->stego_detok->forward(model->attnflow->host_tok->forward(host));
    EXPECT_LT((enc.stego - baseline).abs().max().item<double>(), 1e-6);
}

TEST(Checkpoint, BitIdenticalRoundTripAndErrors) {
    auto dir = host_folder(2, 40, "ckpt");
    trainer::Trainer t(tiny_config(), trainer::ingest_hosts(dir.string(), 40, 3));
    t.step();
    const auto path = (dir / "c.bin").string();
    t.save(path);
    auto loaded = checkpoint::load_model(path);
    EXPECT_EQ(loaded.iteration, 1);
    auto a = t.model->named_parameters();
    auto b = loaded.model->named_parameters();
    ASSERT_EQ(a.size(), b.size());
    for (const auto& p : a) EXPECT_TRUE(torch::equal(p.value(), *b.find(p.key()))) << p.key();
    EXPECT_NE(b.find("itf.M"), nullptr);

    // flipping one payload byte breaks the checksum
    std::string bytes;
    {
        std::ifstream f(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(f), {});
    }
    auto corrupt = bytes;
    corrupt[corrupt.size() - 20] ^= 0x5A;
    std::ofstream(dir / "bad.bin", std::ios::binary) << corrupt;
    EXPECT_THROW(checkpoint::read((dir / "bad.bin").string()), FormatError);

    auto wrong_version = bytes;
    wrong_version[8] = 7;
    std::ofstream(dir / "v.bin", std::ios::binary) << wrong_version;
    EXPECT_THROW(checkpoint::read((dir / "v.bin").string()), FormatError);

    std::ofstream(dir / "trunc.bin", std::ios::binary) << bytes.substr(0, 30);
    EXPECT_THROW(checkpoint::read((dir / "trunc.bin").string()), FormatError);
    EXPECT_THROW(checkpoint::read((dir / "missing.bin").string()), FormatError);
    fs::remove_all(dir);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
    auto dir = host_folder(2, 40, "zero_lr");
    auto cfg = tiny_config();
    cfg.train.lr_initial = 0;
    cfg.train.lr_floor = 0;
    cfg.train.weight_decay = 0.01;
    trainer::Trainer t(cfg, trainer::ingest_hosts(dir.string(), 40, 3));
    auto before = snapshot(*t.model);
    t.step();
    t.step();
    EXPECT_FALSE(changed(before, *t.model, ""));
    fs::remove_all(dir);
}

TEST(Trainer, NonFiniteLossAborts) {
    auto dir = host_folder(2, 40, "nan");
    trainer::Trainer t(tiny_config(), trainer::ingest_hosts(dir.string(), 40, 3));
    {
        torch::NoGradGuard g;
        t.model->attnflow->stego_detok->conv2->bias.fill_(std::numeric_limits<float>::quiet_NaN());
    }
    EXPECT_THROW(t.step(), NonFiniteLoss);
    fs::remove_all(dir);
}

TEST(Trainer, AblationsFreezeDisabledComponents) {
    auto dir = host_folder(2, 40, "ablation");
    auto hosts = trainer::ingest_hosts(dir.string(), 40, 3);

    auto run = [&](Config cfg) {
        trainer::Trainer t(cfg, hosts);
        auto before = snapshot(*t.model);
        t.step();
        t.step();
        return std::make_pair(std::move(t), before);
    };

    {
        auto cfg = tiny_config();
        cfg.iqrt_on = false;
        auto [t, before] = run(cfg);
        EXPECT_FALSE(changed(before, *t.model, "iqrt."));
        EXPECT_TRUE(changed(before, *t.model, "attnflow."));
        EXPECT_TRUE(changed(before, *t.model, "itf."));
    }
    {
        auto cfg = tiny_config();
        cfg.itf_on = false;
        auto [t, before] = run(cfg);
        EXPECT_FALSE(changed(before, *t.model, "itf."));
        EXPECT_TRUE(torch::equal(t.model->itf->M, torch::eye(t.model->itf->tokens())));
        EXPECT_TRUE(changed(before, *t.model, "iqrt."));
    }
    {
        auto cfg = tiny_config();
        cfg.flow.cross_attention = false;
        auto [t, before] = run(cfg);
        for (const auto& p : t.model->named_parameters()) EXPECT_EQ(p.key().find("cross"), std::string::npos);
        for (double a : t.model->attnflow->alphas()) EXPECT_EQ(a, 0.0);
        EXPECT_TRUE(changed(before, *t.model, "attnflow."));
    }
    for (int n : {1, 2, 3, 4}) {
        auto cfg = tiny_config();
        cfg.flow.aacb_count = n;
        auto [t, before] = run(cfg);
        EXPECT_EQ(t.model->attnflow->blocks.size(), static_cast<std::size_t>(n));
        EXPECT_TRUE(changed(before, *t.model, "attnflow.aacb" + std::to_string(n - 1)));
    }
    fs::remove_all(dir);
}

TEST(Trainer, DeterministicRunsAndResume) {
    auto dir = host_folder(3, 48, "determinism");
    auto cfg = tiny_config();
    cfg.train.iterations = 6;

    auto losses = [](const trainer::RunSummary& s) {
        std::vector<double> v;
        for (const auto& r : s.steps) v.push_back(r.total);
        return v;
    };
    trainer::RunOptions a{dir.string(), (dir / "a").string(), "", -1, true};
    trainer::RunOptions b{dir.string(), (dir / "b").string(), "", -1, true};
    auto ra = trainer::run_training(cfg, a);
    auto rb = trainer::run_training(cfg, b);
    EXPECT_EQ(losses(ra), losses(rb));

    trainer::RunOptions first{dir.string(), (dir / "c").string(), "", 3, true};
    auto r1 = trainer::run_training(cfg, first);
    ASSERT_EQ(r1.steps.size(), 3U);
    trainer::RunOptions second{dir.string(), (dir / "d").string(), r1.checkpoint_path, -1, true};
    auto r2 = trainer::run_training(cfg, second);
    ASSERT_EQ(r2.steps.size(), 3U);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r2.steps[i].iteration, static_cast<int64_t>(i + 3));
        EXPECT_NEAR(r2.steps[i].total, ra.steps[i + 3].total, 1e-6);
    }
    fs::remove_all(dir);
}

TEST(Trainer, CleanEvaluationRuns) {
    auto dir = host_folder(2, 40, "eval");
    auto hosts = trainer::ingest_hosts(dir.string(), 40, 3);
    RMSteg model(tiny_config());
    auto ev = trainer::evaluate_clean(model, hosts, 2, 5);
    EXPECT_EQ(ev.psnr.size(), 2U);
    EXPECT_EQ(ev.success.size(), 2U);
    fs::remove_all(dir);
}
