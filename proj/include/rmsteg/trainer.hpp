#pragma once

// Joint training of IQRT + ITF + AttnFlow with distortion in the loop.
//
// Every random draw is keyed by (seed, stream, index) so a run is a pure function of its
// config; resuming only needs the weights, the AdamW moments and the iteration counter.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rmsteg/checkpoint.hpp"
#include "rmsteg/config.hpp"
#include "rmsteg/distortion.hpp"
#include "rmsteg/error.hpp"
#include "rmsteg/image_io.hpp"
#include "rmsteg/model.hpp"
#include "rmsteg/objectives.hpp"
#include "rmsteg/qr/codec.hpp"
#include "rmsteg/qr/scan.hpp"

namespace rmsteg::trainer {

namespace fs = std::filesystem;

enum class Stream : std::uint64_t { Crop = 1, Order, Qr, Distortion, Reveal, EvalQr, EvalReveal, EvalDistortion };

inline std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    return splitmix(splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(stream)) ^ index);
}

struct HostDataset {
    std::vector<torch::Tensor> images;  // full-resolution [3, H, W]
    std::vector<std::string> names;
    int side = 0;
    std::uint64_t seed = 0;
    int skipped = 0;

    std::size_t size() const { return images.size(); }

    torch::Tensor crop(std::size_t idx, std::uint64_t crop_seed) const {
        const auto& img = images.at(idx);
        std::mt19937_64 rng(crop_seed);
        const auto y = std::uniform_int_distribution<std::int64_t>(0, img.size(1) - side)(rng);
        const auto x = std::uniform_int_distribution<std::int64_t>(0, img.size(2) - side)(rng);
        return img.slice(1, y, y + side).slice(2, x, x + side).contiguous();
    }

    std::vector<std::size_t> epoch_order(std::int64_t epoch) const {
        std::vector<std::size_t> order(size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(seed, Stream::Order, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        return order;
    }

    // Sample j of the endless stream: epoch j / n, shuffled position j % n.
    torch::Tensor sample(std::int64_t j) const {
        const auto n = static_cast<std::int64_t>(size());
        const auto order = epoch_order(j / n);
        return crop(order[static_cast<std::size_t>(j % n)], derive_seed(seed, Stream::Crop, static_cast<std::uint64_t>(j)));
    }

    torch::Tensor batch(std::int64_t iteration, int batch_size) const {
        std::vector<torch::Tensor> out;
        for (int b = 0; b < batch_size; ++b) out.push_back(sample(iteration * batch_size + b));
        return torch::stack(out);
    }
};

// Directory of PNG/JPEG files; unreadable or too-small files are skipped and counted.
inline HostDataset ingest_hosts(const std::string& dir, int image_side, std::uint64_t seed) {
    if (!fs::is_directory(dir)) throw EmptyDataset("host directory " + dir + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    HostDataset ds;
    ds.side = image_side;
    ds.seed = seed;
    for (const auto& f : files) {
        try {
            auto img = io::load_image(f.string());
            if (img.size(1) < image_side || img.size(2) < image_side) {
                ++ds.skipped;
                continue;
            }
            ds.images.push_back(img);
            ds.names.push_back(f.stem().string());
        } catch (const FormatError&) {
            ++ds.skipped;
        }
    }
    if (ds.skipped > 0) std::cerr << "warning: skipped " << ds.skipped << " unreadable or undersized images\n";
    if (ds.images.empty()) throw EmptyDataset("no usable images in " + dir);
    return ds;
}

struct QrSample {
    std::string message;
    qr::ModuleMatrix matrix;
    torch::Tensor image;  // [3, side, side]
};

// Random alphanumeric messages at the full alphanumeric payload of the version.
inline std::vector<QrSample> generate_qr_batch(int count, int version, std::uint64_t seed, int side) {
    const int len = qr::max_chars(version, qr::Mode::Alphanumeric);
    const std::string_view charset = qr::kAlphanumericCharset;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, charset.size() - 1);
    std::vector<QrSample> out;
    for (int i = 0; i < count; ++i) {
        std::string msg(static_cast<std::size_t>(len), ' ');
        for (auto& ch : msg) ch = charset[pick(rng)];
        auto mm = qr::encode_message(msg, version);
        auto img = render_code(mm, side);
        out.push_back({std::move(msg), std::move(mm), std::move(img)});
    }
    return out;
}

inline double lr_schedule(std::int64_t epoch, const TrainConfig& t) {
    return std::max(t.lr_initial * std::pow(t.lr_decay, static_cast<double>(epoch)), t.lr_floor);
}

struct StepResult {
    std::int64_t iteration = 0;
    std::int64_t epoch = 0;
    double lr = 0;
    double l1 = 0, ssim = 0, lpips = 0, qr = 0, transition = 0, total = 0;
};

inline nlohmann::json to_json(const StepResult& r, double wall) {
    return {{"iteration", r.iteration}, {"epoch", r.epoch}, {"lr", r.lr},   {"l1", r.l1},
            {"ssim", r.ssim},           {"lpips", r.lpips}, {"qr", r.qr},   {"transition", r.transition},
            {"total", r.total},         {"wall_time", wall}};
}

// Rounds to 8 bits in the forward pass and passes gradients straight through.
inline torch::Tensor quantize_ste(const torch::Tensor& x) {
    auto q = torch::round(x.clamp(0, 1) * 255.0) / 255.0;
    return x + (q - x).detach();
}

class Trainer {
public:
    Config cfg;
    RMSteg model{nullptr};
    std::unique_ptr<torch::optim::AdamW> opt;
    HostDataset data;
    std::int64_t iteration = 0;

    Trainer(const Config& c, HostDataset hosts) : cfg(c), data(std::move(hosts)) {
        torch::set_num_threads(cfg.threads);
        model = RMSteg(cfg);
        model->train();
        opt = std::make_unique<torch::optim::AdamW>(
            model->trainable_parameters(), torch::optim::AdamWOptions(cfg.train.lr_initial)
                                               .betas({cfg.train.beta1, cfg.train.beta2})
                                               .weight_decay(cfg.train.weight_decay));
    }

    std::int64_t epoch_of(std::int64_t it) const {
        if (cfg.train.epoch_iterations > 0) return it / cfg.train.epoch_iterations;
        return it * cfg.train.batch_size / static_cast<std::int64_t>(data.size());
    }

    distortion::DistortionSpec spec_for(std::int64_t it, int b) const {
        if (!cfg.distortion_on) return {};
        return distortion::sample_spec(
            cfg.distortion, derive_seed(cfg.seed, Stream::Distortion,
                                        static_cast<std::uint64_t>(it * cfg.train.batch_size + b)));
    }

    StepResult step() {
        const int bsz = cfg.train.batch_size;
        const int side = cfg.image_side();
        StepResult r;
        r.iteration = iteration;
        r.epoch = epoch_of(iteration);
        r.lr = lr_schedule(r.epoch, cfg.train);
        for (auto& g : opt->param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(r.lr);

        auto hosts = data.batch(iteration, bsz);
        auto codes = generate_qr_batch(bsz, cfg.qr_version,
                                       derive_seed(cfg.seed, Stream::Qr, static_cast<std::uint64_t>(iteration)), side);
        std::vector<torch::Tensor> qr_imgs;
        std::vector<qr::ModuleMatrix> matrices;
        for (auto& s : codes) {
            qr_imgs.push_back(s.image);
            matrices.push_back(s.matrix);
        }
        auto qr_img = torch::stack(qr_imgs);

        std::vector<distortion::DistortionSpec> specs;
        for (int b = 0; b < bsz; ++b) specs.push_back(spec_for(iteration, b));
        auto diagnose = [&](const std::string& why) {
            std::string dump = why + " at iteration " + std::to_string(iteration) + " (seed " +
                               std::to_string(cfg.seed) + ")\n";
            for (std::size_t b = 0; b < specs.size(); ++b) {
                dump += "[spec " + std::to_string(b) + "]\n" + distortion::to_text(specs[b]);
            }
            return NonFiniteLoss(dump);
        };

        torch::Tensor total;
        try {
            auto enc = model->encode(hosts, qr_img);
            auto stego = cfg.train.quantize_stego ? quantize_ste(enc.stego) : enc.stego;
            std::vector<torch::Tensor> distorted;
            for (int b = 0; b < bsz; ++b) distorted.push_back(distortion::apply(stego[b], specs[b]));
            auto restored = model->decode(torch::stack(distorted),
                                          derive_seed(cfg.seed, Stream::Reveal, static_cast<std::uint64_t>(iteration)));

            objectives::LossComponents lc;
            lc.l1 = objectives::l1_loss(enc.stego, hosts);
            lc.ssim = objectives::ssim_loss(enc.stego, hosts);
            lc.lpips = objectives::lpips_loss(enc.stego, hosts);
            lc.qr = objectives::qr_loss(restored, qr_img);
            lc.transition = cfg.iqrt_on ? iqrt::transition_loss(enc.qr_star, matrices, qr::kTransitionThreshold,
                                                                cfg.scan_kernel)
                                        : torch::zeros({});
            total = objectives::total_loss(lc, cfg.loss);

            r.l1 = lc.l1.item<double>();
            r.ssim = lc.ssim.item<double>();
            r.lpips = lc.lpips.item<double>();
            r.qr = lc.qr.item<double>();
            r.transition = lc.transition.item<double>();
            r.total = total.item<double>();
        } catch (const NonFiniteValue& e) {
            throw diagnose(std::string("non-finite activation: ") + e.what());
        }
        if (!std::isfinite(r.total)) throw diagnose("non-finite loss");

        opt->zero_grad();
        total.backward();
        if (cfg.train.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->trainable_parameters(), cfg.train.grad_clip);
        opt->step();
        if (cfg.itf_on && model->itf->condition() > itf::kMaxCondition) {
            throw SingularMatrix("fusion matrix condition number exceeded 1e6 at iteration " +
                                 std::to_string(iteration));
        }
        ++iteration;
        return r;
    }

    void save(const std::string& path) { checkpoint::save(path, model, opt.get(), iteration); }

    void resume(const std::string& path) {
        auto c = checkpoint::read(path);
        auto a = c.config, b = cfg;
        a.train.iterations = b.train.iterations;  // extending a run is allowed
        if (to_text(a) != to_text(b)) {
            throw ConfigError("checkpoint was written with a different configuration");
        }
        checkpoint::restore(model, c);
        checkpoint::restore_optimizer(*opt, model, c);
        iteration = c.iteration;
    }
};

struct CleanEval {
    std::vector<double> psnr;
    std::vector<double> emr;
    std::vector<bool> success;
    double tra() const { return qr::tra(success); }
    double median_psnr() const {
        auto v = psnr;
        std::sort(v.begin(), v.end());
        return v.empty() ? 0.0 : v[v.size() / 2];
    }
    double mean_psnr() const {
        double s = 0;
        for (double p : psnr) s += p;
        return psnr.empty() ? 0.0 : s / static_cast<double>(psnr.size());
    }
};

// Held-out codes over the clean channel: encode, export to 8 bits, decode, read, compare.
inline CleanEval evaluate_clean(RMSteg& model, const HostDataset& hosts, int codes, std::uint64_t seed) {
    torch::NoGradGuard guard;
    model->eval();
    const auto& cfg = model->cfg;
    auto samples = generate_qr_batch(codes, cfg.qr_version, derive_seed(seed, Stream::EvalQr), cfg.image_side());
    CleanEval out;
    for (int i = 0; i < codes; ++i) {
        auto host = hosts.crop(static_cast<std::size_t>(i) % hosts.size(),
                               derive_seed(seed, Stream::Crop, 1000000 + static_cast<std::uint64_t>(i)))
                        .unsqueeze(0);
        auto enc = model->encode(host, samples[i].image.unsqueeze(0));
        auto stego = io::quantize(enc.stego[0]).unsqueeze(0);
        out.psnr.push_back(objectives::psnr(stego, host));
        auto restored = model->decode(stego, derive_seed(seed, Stream::EvalReveal, static_cast<std::uint64_t>(i)));
        auto read = read_code(restored, cfg);
        out.emr.push_back(qr::emr(read.modules, samples[i].matrix));
        out.success.push_back(qr::recovered(read.message, samples[i].message));
    }
    model->train();
    return out;
}

struct RunOptions {
    std::string data_dir;
    std::string out_dir;
    std::string resume;        // checkpoint to continue from
    std::int64_t stop_after = -1;  // stop early (for resume tests); -1 runs to cfg.train.iterations
    bool quiet = false;
};

struct RunSummary {
    std::vector<StepResult> steps;
    std::string checkpoint_path;
    std::string log_path;
    double seconds = 0;
};

inline RunSummary run_training(const Config& cfg, const RunOptions& o) {
    fs::create_directories(o.out_dir);
    Trainer t(cfg, ingest_hosts(o.data_dir, cfg.image_side(), cfg.seed));
    if (!o.resume.empty()) t.resume(o.resume);
    RunSummary s;
    s.log_path = (fs::path(o.out_dir) / "train_log.ndjson").string();
    s.checkpoint_path = (fs::path(o.out_dir) / "checkpoint.bin").string();
    {
        std::ofstream snap(fs::path(o.out_dir) / "config.resolved.cfg");
        snap << to_text(cfg);
    }
    std::ofstream log(s.log_path, o.resume.empty() ? std::ios::trunc : std::ios::app);
    const auto start = std::chrono::steady_clock::now();
    const std::int64_t end = o.stop_after >= 0 ? std::min<std::int64_t>(o.stop_after, cfg.train.iterations)
                                               : cfg.train.iterations;
    while (t.iteration < end) {
        auto r = t.step();
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        s.steps.push_back(r);
        if (cfg.train.log_every > 0 && (r.iteration % cfg.train.log_every == 0 || t.iteration == end)) {
            log << to_json(r, wall).dump() << "\n";
            log.flush();
        }
        if (!o.quiet && r.iteration % 10 == 0) {
            std::cerr << "iter " << r.iteration << " lr " << r.lr << " total " << r.total << " l1 " << r.l1 << " qr "
                      << r.qr << " t " << wall << "s\n";
        }
        if (cfg.train.checkpoint_every > 0 && t.iteration % cfg.train.checkpoint_every == 0) t.save(s.checkpoint_path);
    }
    t.save(s.checkpoint_path);
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return s;
}

}  // namespace rmsteg::trainer
