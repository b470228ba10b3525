#pragma once

// Evaluation protocol: for every host x channel, embed a fresh random code, export the
// stego to 8 bits, corrupt it through the channel, restore, read and score.
//
// Channel syntax (comma-separated lists accepted by parse_channels):
//   none | gauss:<sigma> | jpeg:<quality> | blur:<sigma> | bright:<shift> | tamper:<rate>
//   | mixed (one draw from the training distortion config) | sigma-grid (gauss 0.02..0.20)

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rmsteg/distortion.hpp"
#include "rmsteg/error.hpp"
#include "rmsteg/image_io.hpp"
#include "rmsteg/model.hpp"
#include "rmsteg/objectives.hpp"
#include "rmsteg/trainer.hpp"

namespace rmsteg::evaluate {

enum class Kind { None, Gauss, Jpeg, Blur, Bright, Tamper, Mixed };

struct Channel {
    Kind kind = Kind::None;
    double level = 0;
    std::string id;

    // Corrupts an image [3, S, S] in [0, 1]; `seed` picks the noise / tamper layout.
    torch::Tensor apply(const torch::Tensor& img, const distortion::DistortionConfig& mixed_cfg,
                        std::uint64_t seed) const {
        distortion::DistortionSpec s;
        switch (kind) {
            case Kind::None: return img;
            case Kind::Gauss:
                s.noise_sigma = level;
                s.noise_seed = seed;
                break;
            case Kind::Jpeg:
                s.apply_jpeg = true;
                s.jpeg_quality = static_cast<int>(level);
                break;
            case Kind::Blur: s.blur_sigma = level; break;
            case Kind::Bright: s.brightness_shift = level; break;
            case Kind::Tamper: return distortion::apply_tamper(img, level, seed);
            case Kind::Mixed: s = distortion::sample_spec(mixed_cfg, seed); break;
        }
        return distortion::apply(img, s);
    }
};

inline std::string format_level(double v) {
    std::ostringstream o;
    o << v;
    return o.str();
}

inline std::vector<Channel> parse_channels(const std::string& list) {
    std::vector<Channel> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "none") {
            out.push_back({Kind::None, 0, "none"});
            continue;
        }
        if (item == "mixed") {
            out.push_back({Kind::Mixed, 0, "mixed"});
            continue;
        }
        if (item == "sigma-grid") {
            for (int i = 1; i <= 10; ++i) {
                const double s = 0.02 * i;
                out.push_back({Kind::Gauss, s, "gauss:" + format_level(s)});
            }
            continue;
        }
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("unknown channel " + item);
        const auto name = item.substr(0, colon);
        double level = 0;
        try {
            level = std::stod(item.substr(colon + 1));
        } catch (const std::logic_error&) {
            throw ConfigError("bad channel level in " + item);
        }
        static const std::map<std::string, Kind> kinds = {{"gauss", Kind::Gauss}, {"jpeg", Kind::Jpeg},
                                                          {"blur", Kind::Blur},   {"bright", Kind::Bright},
                                                          {"tamper", Kind::Tamper}};
        auto it = kinds.find(name);
        if (it == kinds.end()) throw ConfigError("unknown channel " + item);
        if (level < 0) throw ConfigError("channel level must be non-negative: " + item);
        if (it->second == Kind::Jpeg && (level < 1 || level > 100)) throw ConfigError("jpeg quality out of range");
        if (it->second == Kind::Tamper && level > 1) throw ConfigError("tamper rate out of range");
        out.push_back({it->second, level, name + ":" + format_level(level)});
    }
    if (out.empty()) throw ConfigError("no channels given");
    return out;
}

struct Report {
    std::vector<objectives::MetricRow> rows;
    std::vector<std::string> channel_order;
};

inline Report run(RMSteg& model, const trainer::HostDataset& hosts, const std::vector<Channel>& channels,
                  std::uint64_t seed) {
    torch::NoGradGuard guard;
    model->eval();
    const auto& cfg = model->cfg;
    Report rep;
    for (const auto& ch : channels) rep.channel_order.push_back(ch.id);
    for (std::size_t h = 0; h < hosts.size(); ++h) {
        auto host = io::resize(hosts.images[h], cfg.image_side()).unsqueeze(0);
        auto code = trainer::generate_qr_batch(1, cfg.qr_version,
                                               trainer::derive_seed(seed, trainer::Stream::EvalQr, h), cfg.image_side())
                        .front();
        auto enc = model->encode(host, code.image.unsqueeze(0));
        auto stego = io::quantize(enc.stego[0]);
        const double p = objectives::psnr(stego, host[0]);
        const double s = objectives::ssim_metric(stego, host[0]).item<double>();
        const double l = objectives::lpips_loss(stego, host[0]).item<double>();
        for (std::size_t c = 0; c < channels.size(); ++c) {
            const auto key = h * channels.size() + c;
            auto distorted = io::quantize(
                channels[c].apply(stego, cfg.distortion, trainer::derive_seed(seed, trainer::Stream::EvalDistortion, key)));
            auto restored = model->decode(distorted.unsqueeze(0),
                                          trainer::derive_seed(seed, trainer::Stream::EvalReveal, key));
            auto read = read_code(restored, cfg);
            rep.rows.push_back({hosts.names[h], p, s, l, qr::emr(read.modules, code.matrix),
                                qr::recovered(read.message, code.message), channels[c].id});
        }
    }
    return rep;
}

struct Aggregate {
    std::string channel;
    double psnr = 0, ssim = 0, lpips = 0, emr = 0, tra = 0;
    int count = 0;
};

inline std::vector<Aggregate> aggregate(const Report& rep) {
    std::vector<Aggregate> out;
    for (const auto& id : rep.channel_order) {
        Aggregate a;
        a.channel = id;
        int finite_psnr = 0;
        for (const auto& r : rep.rows) {
            if (r.distortion_spec_id != id) continue;
            ++a.count;
            if (std::isfinite(r.psnr)) {
                a.psnr += r.psnr;
                ++finite_psnr;
            }
            a.ssim += r.ssim;
            a.lpips += r.lpips;
            a.emr += r.emr;
            a.tra += r.tra_flag ? 1 : 0;
        }
        if (a.count > 0) {
            a.psnr = finite_psnr > 0 ? a.psnr / finite_psnr : std::numeric_limits<double>::infinity();
            a.ssim /= a.count;
            a.lpips /= a.count;
            a.emr /= a.count;
            a.tra /= a.count;
        }
        out.push_back(a);
    }
    return out;
}

inline void write_csv(const Report& rep, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path);
    f << objectives::kCsvHeader << "\n";
    for (const auto& r : rep.rows) f << objectives::csv_row(r) << "\n";
}

// Image quality columns followed by one TRA/EMR pair per channel.
inline std::string summary_table(const std::vector<Aggregate>& agg) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(4);
    o << std::left << std::setw(16) << "channel" << std::right << std::setw(10) << "PSNR" << std::setw(10) << "SSIM"
      << std::setw(10) << "LPIPS" << std::setw(10) << "TRA" << std::setw(10) << "EMR(%)" << std::setw(6) << "n"
      << "\n";
    for (const auto& a : agg) {
        o << std::left << std::setw(16) << a.channel << std::right << std::setw(10) << a.psnr << std::setw(10) << a.ssim
          << std::setw(10) << a.lpips << std::setw(10) << a.tra << std::setw(10) << a.emr << std::setw(6) << a.count
          << "\n";
    }
    return o.str();
}

// TRA and EMR/100 against channel index, as a dependency-free SVG.
inline std::string plot_svg(const std::vector<Aggregate>& agg) {
    const double w = 640, h = 360, m = 50;
    const auto n = std::max<std::size_t>(agg.size(), 2);
    auto x = [&](std::size_t i) { return m + (w - 2 * m) * static_cast<double>(i) / static_cast<double>(n - 1); };
    auto y = [&](double v) { return h - m - (h - 2 * m) * std::clamp(v, 0.0, 1.0); };
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m
      << "\" stroke=\"black\"/>\n<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m
      << "\" stroke=\"black\"/>\n";
    auto series = [&](const char* colour, auto value) {
        o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < agg.size(); ++i) o << x(i) << "," << y(value(agg[i])) << " ";
        o << "\"/>\n";
    };
    series("steelblue", [](const Aggregate& a) { return a.tra; });
    series("firebrick", [](const Aggregate& a) { return a.emr / 100.0; });
    for (std::size_t i = 0; i < agg.size(); ++i) {
        o << "<text x=\"" << x(i) << "\" y=\"" << h - m + 16 << "\" font-size=\"9\" text-anchor=\"middle\">"
          << agg[i].channel << "</text>\n";
    }
    o << "<text x=\"" << m << "\" y=\"" << m - 10 << "\" font-size=\"12\" fill=\"steelblue\">TRA</text>\n";
    o << "<text x=\"" << m + 40 << "\" y=\"" << m - 10 << "\" font-size=\"12\" fill=\"firebrick\">EMR/100</text>\n";
    o << "</svg>\n";
    return o.str();
}

}  // namespace rmsteg::evaluate
