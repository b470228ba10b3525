#pragma once

// Flat key-value configuration with sections:
//
//   [run]
//   profile = desk        # selects the defaults every other key overrides
//   seed = 7
//   [attnflow]
//   aacb_count = 3
//
// Comments start with '#'. Unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rmsteg/attnflow.hpp"
#include "rmsteg/distortion.hpp"
#include "rmsteg/error.hpp"
#include "rmsteg/iqrt.hpp"
#include "rmsteg/objectives.hpp"

namespace rmsteg {

struct TrainConfig {
    int batch_size = 8;
    int iterations = 50000;
    double lr_initial = 1e-4;
    double lr_decay = 0.9;
    double lr_floor = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double grad_clip = 5.0;
    int epoch_iterations = 0;  // 0: one pass over the host folder
    int log_every = 1;
    int checkpoint_every = 0;  // 0: only at the end
    bool quantize_stego = true;  // straight-through 8-bit rounding of the stego in the loop
    int eval_codes = 16;

    void validate() const {
        if (iterations <= 0) throw ConfigError("iterations must be positive");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (lr_floor > lr_initial) throw ConfigError("lr_floor must not exceed lr_initial");
        if (lr_decay <= 0 || lr_decay > 1) throw ConfigError("lr_decay must be in (0, 1]");
    }
};

struct Config {
    std::string profile = "paper";
    std::uint64_t seed = 0;
    int threads = 1;
    int qr_version = 5;
    int scan_kernel = qr::kDefaultKernel;
    double read_threshold = 0.5;
    bool iqrt_on = true;
    bool itf_on = true;
    bool distortion_on = true;
    iqrt::TransitionConfig iqrt;
    attnflow::FlowConfig flow;
    distortion::DistortionConfig distortion;
    objectives::LossWeights loss;
    TrainConfig train;

    int image_side() const { return flow.tokenizer.image_side; }
    int tokens() const { return flow.tokenizer.tokens(); }

    void validate() const {
        qr::check_version(qr_version);
        flow.tokenizer.validate();
        if (flow.aacb_count < 1) throw ConfigError("aacb_count must be >= 1");
        if (image_side() < qr::side_for_version(qr_version)) throw ConfigError("image smaller than the QR module grid");
        distortion.validate();
        loss.validate();
        train.validate();
    }
};

// Paper profile: 224 px, patch 16, D 768, MLP 2048, 4 AACBs.
inline Config paper_profile() { return Config{}; }

// Desk profile: 64 px, patch 8, D 192, MLP 512, 2 AACBs, 500 iterations.
inline Config desk_profile() {
    Config c;
    c.profile = "desk";
    c.flow.tokenizer = {64, 8, 2, 192, 512, 8, 16};
    c.flow.aacb_count = 2;
    c.train.iterations = 500;
    return c;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_value(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    T out{};
    if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "off" || v == "no") return false;
        throw ConfigError("bad boolean for " + key + ": " + v);
    } else {
        if (!(in >> out) || !(in >> std::ws).eof()) throw ConfigError("bad value for " + key + ": " + v);
        return out;
    }
}

using Setter = std::function<void(Config&, const std::string&)>;

#define RMSTEG_KEYS(X)                                                   \
    X("run.seed", seed)                                                  \
    X("run.threads", threads)                                            \
    X("qr.version", qr_version)                                          \
    X("qr.scan_kernel", scan_kernel)                                     \
    X("qr.read_threshold", read_threshold)                               \
    X("iqrt.enabled", iqrt_on)                                           \
    X("iqrt.blocks", iqrt.blocks)                                        \
    X("iqrt.hidden", iqrt.hidden)                                        \
    X("iqrt.scale_clamp", iqrt.scale_clamp)                              \
    X("itf.enabled", itf_on)                                             \
    X("attnflow.image_side", flow.tokenizer.image_side)                  \
    X("attnflow.patch_size", flow.tokenizer.patch_size)                  \
    X("attnflow.depth", flow.tokenizer.depth)                            \
    X("attnflow.token_dim", flow.tokenizer.token_dim)                    \
    X("attnflow.mlp_dim", flow.tokenizer.mlp_dim)                        \
    X("attnflow.heads", flow.tokenizer.heads)                            \
    X("attnflow.detok_channels", flow.tokenizer.detok_channels)          \
    X("attnflow.aacb_count", flow.aacb_count)                            \
    X("attnflow.alpha_init", flow.alpha_init)                            \
    X("attnflow.rho_clamp", flow.rho_clamp)                              \
    X("attnflow.cross_attention", flow.cross_attention)                  \
    X("distortion.enabled", distortion_on)                               \
    X("distortion.brightness_max", distortion.brightness_max)            \
    X("distortion.hue_max", distortion.hue_max)                          \
    X("distortion.saturation_max", distortion.saturation_max)            \
    X("distortion.contrast_low", distortion.contrast_range.first)        \
    X("distortion.contrast_high", distortion.contrast_range.second)      \
    X("distortion.jpeg_quality", distortion.jpeg_quality)                \
    X("distortion.noise_sigma", distortion.noise_sigma)                  \
    X("distortion.blur_kernel", distortion.blur_kernel)                  \
    X("distortion.warp_frac", distortion.warp_frac)                      \
    X("distortion.stage_probability", distortion.stage_probability)      \
    X("loss.alpha", loss.alpha)                                          \
    X("loss.beta", loss.beta)                                            \
    X("loss.gamma", loss.gamma)                                          \
    X("loss.delta", loss.delta)                                          \
    X("loss.epsilon", loss.epsilon)                                      \
    X("train.batch_size", train.batch_size)                              \
    X("train.iterations", train.iterations)                              \
    X("train.lr_initial", train.lr_initial)                              \
    X("train.lr_decay", train.lr_decay)                                  \
    X("train.lr_floor", train.lr_floor)                                  \
    X("train.beta1", train.beta1)                                        \
    X("train.beta2", train.beta2)                                        \
    X("train.weight_decay", train.weight_decay)                          \
    X("train.grad_clip", train.grad_clip)                                \
    X("train.epoch_iterations", train.epoch_iterations)                  \
    X("train.log_every", train.log_every)                                \
    X("train.checkpoint_every", train.checkpoint_every)                  \
    X("train.quantize_stego", train.quantize_stego)                      \
    X("train.eval_codes", train.eval_codes)

inline const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> m = [] {
        std::map<std::string, Setter> out;
#define X(key, member)                                                                      \
    out[key] = [](Config& c, const std::string& v) {                                        \
        c.member = parse_value<std::decay_t<decltype(c.member)>>(key, v);                   \
    };
        RMSTEG_KEYS(X)
#undef X
        return out;
    }();
    return m;
}

template <class T>
std::string format_value(const T& v) {
    std::ostringstream o;
    if constexpr (std::is_same_v<T, bool>) {
        o << (v ? "true" : "false");
    } else {
        o.precision(17);
        o << v;
    }
    return o.str();
}

}  // namespace detail

// Ordered (section.key, value) pairs as written in the text.
inline std::vector<std::pair<std::string, std::string>> parse_config_entries(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
        out.emplace_back(section + "." + detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return out;
}

inline void apply_override(Config& c, const std::string& key, const std::string& value) {
    if (key == "run.profile") return;
    const auto& s = detail::setters();
    auto it = s.find(key);
    if (it == s.end()) throw ConfigError("unknown config key " + key);
    it->second(c, value);
}

inline Config parse_config(const std::string& text) {
    auto entries = parse_config_entries(text);
    std::string profile = "paper";
    for (const auto& [k, v] : entries) {
        if (k == "run.profile") profile = v;
    }
    Config c;
    if (profile == "desk") c = desk_profile();
    else if (profile == "paper") c = paper_profile();
    else throw ConfigError("unknown profile " + profile);
    for (const auto& [k, v] : entries) apply_override(c, k, v);
    c.validate();
    return c;
}

inline Config load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

// Fully resolved snapshot; parse_config(to_text(c)) == c.
inline std::string to_text(const Config& c) {
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
    sections["run"].emplace_back("profile", c.profile);
#define X(key, member)                                                                       \
    {                                                                                        \
        const std::string k = key;                                                           \
        const auto dot = k.find('.');                                                        \
        sections[k.substr(0, dot)].emplace_back(k.substr(dot + 1), detail::format_value(c.member)); \
    }
    RMSTEG_KEYS(X)
#undef X
    std::ostringstream o;
    for (const char* name : {"run", "qr", "iqrt", "itf", "attnflow", "distortion", "loss", "train"}) {
        o << "[" << name << "]\n";
        for (const auto& [k, v] : sections[name]) o << k << " = " << v << "\n";
    }
    return o.str();
}

}  // namespace rmsteg
