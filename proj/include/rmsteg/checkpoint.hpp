#pragma once

// Checkpoint container:
//
//   "RMSTEGCK"  8-byte magic
//   u32         format version
//   u64         header length, then a JSON header (config snapshot, iteration, tensor table)
//   payload     little-endian float32 tensors back to back
//   u64         FNV-1a checksum over header + payload
//
// All randomness in training is derived from (seed, iteration), so the iteration counter
// is the whole RNG state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rmsteg/config.hpp"
#include "rmsteg/error.hpp"
#include "rmsteg/model.hpp"

namespace rmsteg::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in native order");

inline constexpr char kMagic[8] = {'R', 'M', 'S', 'T', 'E', 'G', 'C', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct Container {
    Config config;
    std::int64_t iteration = 0;
    std::map<std::string, torch::Tensor> tensors;      // model parameters and buffers
    std::map<std::string, torch::Tensor> optimizer;    // "<param>.exp_avg" / "<param>.exp_avg_sq"
    std::map<std::string, std::int64_t> optimizer_steps;
};

inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::map<void*, std::string> parameter_names(RMSteg& model) {
    std::map<void*, std::string> names;
    for (const auto& item : model->named_parameters()) names[item.value().unsafeGetTensorImpl()] = item.key();
    return names;
}

inline Container capture(RMSteg& model, torch::optim::AdamW* opt, std::int64_t iteration) {
    Container c;
    c.config = model->cfg;
    c.iteration = iteration;
    for (const auto& item : model->named_parameters()) c.tensors[item.key()] = item.value().detach().clone();
    for (const auto& item : model->named_buffers()) c.tensors[item.key()] = item.value().detach().clone();
    if (opt != nullptr) {
        auto names = parameter_names(model);
        for (auto& [key, state] : opt->state()) {
            auto it = names.find(key);
            if (it == names.end()) continue;
            auto& s = static_cast<torch::optim::AdamWParamState&>(*state);
            c.optimizer[it->second + ".exp_avg"] = s.exp_avg().detach().clone();
            c.optimizer[it->second + ".exp_avg_sq"] = s.exp_avg_sq().detach().clone();
            c.optimizer_steps[it->second] = s.step();
        }
    }
    return c;
}

inline void write(const std::string& path, const Container& c) {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["config"] = to_text(c.config);
    header["iteration"] = c.iteration;
    std::vector<const torch::Tensor*> order;
    std::int64_t offset = 0;
    auto table = [&](const std::map<std::string, torch::Tensor>& m) {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [name, t] : m) {
            entries.push_back({{"name", name}, {"shape", t.sizes().vec()}, {"dtype", "float32"}, {"offset", offset}});
            offset += t.numel();
            order.push_back(&t);
        }
        return entries;
    };
    header["tensors"] = table(c.tensors);
    header["optimizer"] = table(c.optimizer);
    header["optimizer_steps"] = c.optimizer_steps;
    const std::string h = header.dump();

    std::string payload;
    payload.reserve(static_cast<std::size_t>(offset) * 4);
    for (const auto* t : order) {
        auto f = t->to(torch::kFloat32).contiguous();
        payload.append(reinterpret_cast<const char*>(f.data_ptr<float>()), static_cast<std::size_t>(f.numel()) * 4);
    }
    const std::uint64_t hlen = h.size();
    const std::uint64_t sum = fnv1a(payload.data(), payload.size(), fnv1a(h.data(), h.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("cannot write checkpoint " + path);
        f.write(kMagic, 8);
        f.write(reinterpret_cast<const char*>(&kFormatVersion), 4);
        f.write(reinterpret_cast<const char*>(&hlen), 8);
        f.write(h.data(), static_cast<std::streamsize>(h.size()));
        f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        f.write(reinterpret_cast<const char*>(&sum), 8);
        if (!f) throw FormatError("short write on checkpoint " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move checkpoint into " + path);
}

inline Container read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 28 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("not a checkpoint: " + path);
    std::uint32_t version = 0;
    std::uint64_t hlen = 0;
    std::memcpy(&version, bytes.data() + 8, 4);
    if (version != kFormatVersion) {
        throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported");
    }
    std::memcpy(&hlen, bytes.data() + 12, 8);
    if (hlen > bytes.size() - 28) throw FormatError("truncated checkpoint header");
    const char* h = bytes.data() + 20;
    const char* payload = h + hlen;
    const std::size_t plen = bytes.size() - 28 - hlen;
    std::uint64_t sum = 0;
    std::memcpy(&sum, bytes.data() + bytes.size() - 8, 8);
    if (sum != fnv1a(payload, plen, fnv1a(h, hlen))) throw FormatError("checkpoint checksum mismatch");

    Container c;
    try {
        auto header = nlohmann::json::parse(h, h + hlen);
        c.config = parse_config(header.at("config").get<std::string>());
        c.iteration = header.at("iteration").get<std::int64_t>();
        auto load = [&](const nlohmann::json& entries, std::map<std::string, torch::Tensor>& out) {
            for (const auto& e : entries) {
                auto shape = e.at("shape").get<std::vector<std::int64_t>>();
                const auto off = e.at("offset").get<std::int64_t>();
                std::int64_t numel = 1;
                for (auto s : shape) numel *= s;
                if (off < 0 || static_cast<std::size_t>(off + numel) * 4 > plen) throw FormatError("tensor out of range");
                auto t = torch::empty(shape, torch::kFloat32);
                std::memcpy(t.data_ptr<float>(), payload + off * 4, static_cast<std::size_t>(numel) * 4);
                out[e.at("name").get<std::string>()] = t;
            }
        };
        load(header.at("tensors"), c.tensors);
        load(header.at("optimizer"), c.optimizer);
        c.optimizer_steps = header.at("optimizer_steps").get<std::map<std::string, std::int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what());
    }
    return c;
}

inline void restore(RMSteg& model, const Container& c) {
    torch::NoGradGuard guard;
    auto assign = [&](const std::string& name, torch::Tensor& dst) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) throw FormatError("checkpoint lacks " + name);
        if (it->second.sizes() != dst.sizes()) throw ShapeMismatch("checkpoint shape mismatch for " + name);
        dst.copy_(it->second);
    };
    for (auto& item : model->named_parameters()) assign(item.key(), item.value());
    for (auto& item : model->named_buffers()) assign(item.key(), item.value());
}

inline void restore_optimizer(torch::optim::AdamW& opt, RMSteg& model, const Container& c) {
    auto params = model->named_parameters();
    for (const auto& [name, step] : c.optimizer_steps) {
        auto* p = params.find(name);
        if (p == nullptr) throw FormatError("optimizer state for unknown parameter " + name);
        auto st = std::make_unique<torch::optim::AdamWParamState>();
        st->step(step);
        st->exp_avg(c.optimizer.at(name + ".exp_avg").clone());
        st->exp_avg_sq(c.optimizer.at(name + ".exp_avg_sq").clone());
        opt.state()[p->unsafeGetTensorImpl()] = std::move(st);
    }
}

inline void save(const std::string& path, RMSteg& model, torch::optim::AdamW* opt, std::int64_t iteration) {
    write(path, capture(model, opt, iteration));
}

struct Loaded {
    RMSteg model{nullptr};
    std::int64_t iteration = 0;
};

inline Loaded load_model(const std::string& path) {
    auto c = read(path);
    RMSteg model(c.config);
    restore(model, c);
    model->eval();
    return {model, c.iteration};
}

}  // namespace rmsteg::checkpoint
