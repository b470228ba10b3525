// rmsteg: encode / decode / simulate / train / eval / qr.
// Exit codes: 0 success, 1 decode failure, 2 usage or input error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rmsteg/checkpoint.hpp"
#include "rmsteg/config.hpp"
#include "rmsteg/distortion.hpp"
#include "rmsteg/evaluate.hpp"
#include "rmsteg/image_io.hpp"
#include "rmsteg/model.hpp"
#include "rmsteg/objectives.hpp"
#include "rmsteg/qr/codec.hpp"
#include "rmsteg/qr/module_matrix.hpp"
#include "rmsteg/qr/scan.hpp"
#include "rmsteg/trainer.hpp"

namespace fs = std::filesystem;
using namespace rmsteg;

namespace {

constexpr int kOk = 0;
constexpr int kDecodeFailure = 1;
constexpr int kUsage = 2;
constexpr int kManifestSchema = 1;

struct DecodeFailed {};

void write_manifest(const std::string& path, const std::string& command, const nlohmann::json& fields,
                    const std::optional<Config>& cfg) {
    nlohmann::json m = fields;
    m["schema_version"] = kManifestSchema;
    m["command"] = command;
    if (cfg) m["resolved_config"] = to_text(*cfg);
    std::ofstream f(path);
    f << m.dump(2) << "\n";
}

std::string manifest_path_for(const std::string& out) { return out + ".manifest.json"; }

int cmd_encode(const std::string& host_path, const std::string& message, const std::string& ckpt,
               const std::string& out) {
    auto loaded = checkpoint::load_model(ckpt);
    auto& model = loaded.model;
    const auto& cfg = model->cfg;
    torch::NoGradGuard guard;
    auto mm = qr::encode_message(message, cfg.qr_version);
    auto host = io::resize(io::load_image(host_path), cfg.image_side()).unsqueeze(0);
    auto enc = model->encode(host, render_code(mm, cfg.image_side()).unsqueeze(0));
    io::save_image(enc.stego[0], out);
    auto stego = io::quantize(enc.stego[0]);
    const double psnr = objectives::psnr(stego, host[0]);
    const double ssim = objectives::ssim_metric(stego, host[0]).item<double>();
    std::cout << "wrote " << out << "\n"
              << "psnr " << psnr << " dB\nssim " << ssim << "\n"
              << "residual mean " << enc.residual.mean().item<double>() << " std " << enc.residual.std().item<double>()
              << "\n";
    write_manifest(manifest_path_for(out), "encode",
                   {{"checkpoint", ckpt}, {"inputs", {host_path}}, {"outputs", {out}}, {"message", message},
                    {"seed", cfg.seed}, {"psnr", psnr}, {"ssim", ssim}},
                   cfg);
    return kOk;
}

int cmd_decode(const std::string& stego_path, const std::string& ckpt, std::uint64_t seed,
               const std::string& truth, std::string restored_out) {
    auto loaded = checkpoint::load_model(ckpt);
    auto& model = loaded.model;
    const auto& cfg = model->cfg;
    torch::NoGradGuard guard;
    auto stego = io::resize(io::load_image(stego_path), cfg.image_side()).unsqueeze(0);
    auto restored = model->decode(stego, seed);
    auto read = read_code(restored, cfg);
    if (read.message) {
        std::cout << *read.message << "\n";
        return kOk;
    }
    if (restored_out.empty()) restored_out = stego_path + ".restored.png";
    io::save_image(restored[0], restored_out);
    std::cerr << "decode failed; restored code saved to " << restored_out << "\n";
    if (!truth.empty()) {
        try {
            auto expected = qr::encode_message(truth, cfg.qr_version);
            std::cerr << "emr " << qr::emr(read.modules, expected) << " %\n";
        } catch (const Error& e) {
            std::cerr << "cannot compare against the given message: " << e.what() << "\n";
        }
    }
    throw DecodeFailed{};
}

distortion::DistortionSpec resolve_spec(const std::string& arg, std::uint64_t seed) {
    if (arg == "none") return {};
    if (arg == "default") return distortion::sample_spec(distortion::DistortionConfig{}, seed);
    std::ifstream f(arg);
    if (!f) throw ConfigError("cannot open distortion file " + arg);
    std::stringstream ss;
    ss << f.rdbuf();
    const auto text = ss.str();
    if (text.find("brightness_shift") != std::string::npos) return distortion::from_text(text);
    return distortion::sample_spec(parse_config(text).distortion, seed);
}

int cmd_simulate(const std::string& in, const std::string& dist, std::uint64_t seed, const std::string& out) {
    auto spec = resolve_spec(dist, seed);
    auto img = io::load_image(in);
    io::save_image(distortion::apply(img, spec), out);
    std::cout << distortion::to_text(spec);
    write_manifest(manifest_path_for(out), "simulate",
                   {{"inputs", {in}}, {"outputs", {out}}, {"distortion", dist}, {"seed", seed},
                    {"spec", distortion::to_text(spec)}},
                   std::nullopt);
    return kOk;
}

struct TrainArgs {
    std::string config, data, out, resume;
    std::optional<std::uint64_t> seed;
    std::optional<int> iterations, aacb_count, threads;
    std::int64_t stop_after = -1;
    bool no_iqrt = false, no_itf = false, no_cross = false, no_distortion = false, skip_eval = false;
};

int cmd_train(const TrainArgs& a) {
    Config cfg = load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (a.iterations) cfg.train.iterations = *a.iterations;
    if (a.aacb_count) cfg.flow.aacb_count = *a.aacb_count;
    if (a.threads) cfg.threads = *a.threads;
    if (a.no_iqrt) cfg.iqrt_on = false;
    if (a.no_itf) cfg.itf_on = false;
    if (a.no_cross) cfg.flow.cross_attention = false;
    if (a.no_distortion) cfg.distortion_on = false;
    cfg.validate();

    trainer::RunOptions opts{a.data, a.out, a.resume, a.stop_after, false};
    auto summary = trainer::run_training(cfg, opts);
    std::cout << "trained " << summary.steps.size() << " steps in " << summary.seconds << " s\n"
              << "checkpoint " << summary.checkpoint_path << "\nlog " << summary.log_path << "\n";
    nlohmann::json fields = {{"config_path", a.config},
                             {"seed", cfg.seed},
                             {"checkpoint", summary.checkpoint_path},
                             {"inputs", {a.data}},
                             {"outputs", {summary.checkpoint_path, summary.log_path}},
                             {"resume", a.resume},
                             {"seconds", summary.seconds}};
    if (!a.skip_eval && a.stop_after < 0) {
        auto loaded = checkpoint::load_model(summary.checkpoint_path);
        auto hosts = trainer::ingest_hosts(a.data, cfg.image_side(), cfg.seed);
        auto ev = trainer::evaluate_clean(loaded.model, hosts, cfg.train.eval_codes, cfg.seed + 1);
        std::cout << "clean-channel TRA " << ev.tra() << " on " << cfg.train.eval_codes << " held-out codes, "
                  << "mean PSNR " << ev.mean_psnr() << " dB\n";
        fields["eval"] = {{"tra", ev.tra()}, {"mean_psnr", ev.mean_psnr()}, {"codes", cfg.train.eval_codes}};
    }
    write_manifest((fs::path(a.out) / "manifest.json").string(), "train", fields, cfg);
    return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& hosts_dir, const std::string& channels,
             const std::string& out, std::uint64_t seed) {
    auto loaded = checkpoint::load_model(ckpt);
    const auto& cfg = loaded.model->cfg;
    auto hosts = trainer::ingest_hosts(hosts_dir, cfg.image_side(), seed);
    auto ch = evaluate::parse_channels(channels);
    auto rep = evaluate::run(loaded.model, hosts, ch, seed);
    evaluate::write_csv(rep, out);
    auto agg = evaluate::aggregate(rep);
    const auto table = evaluate::summary_table(agg);
    std::cout << table;
    const auto stem = fs::path(out).replace_extension("").string();
    std::ofstream(stem + ".summary.txt") << table;
    std::ofstream(stem + ".plot.svg") << evaluate::plot_svg(agg);
    write_manifest(manifest_path_for(out), "eval",
                   {{"checkpoint", ckpt}, {"inputs", {hosts_dir}}, {"channels", channels}, {"seed", seed},
                    {"outputs", {out, stem + ".summary.txt", stem + ".plot.svg"}}},
                   cfg);
    return kOk;
}

// Writes a code as PNG (with a 4-module quiet zone) or as module text.
int cmd_qr(const std::string& message, int version, const std::string& out, int module_px) {
    auto mm = qr::encode_message(message, version);
    if (fs::path(out).extension() == ".txt") {
        qr::save_text(mm, out);
        return kOk;
    }
    auto img = qr::render(mm, module_px, mm.n * module_px);
    const int q = 4 * module_px;
    img = torch::constant_pad_nd(img, {q, q, q, q}, 1.0);
    io::save_image(img, out);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Robust QR code steganography"};
    app.require_subcommand(1);

    std::string host, message, ckpt, out, stego, truth, restored_out, in, dist = "none", data, hosts_dir,
                                                                          channels = "none";
    std::uint64_t seed = 0;
    int version = 5, module_px = 4;
    TrainArgs ta;

    auto* enc = app.add_subcommand("encode", "hide a message in a host image");
    enc->add_option("--host", host, "host image")->required()->check(CLI::ExistingFile);
    enc->add_option("--message", message, "text to hide")->required();
    enc->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
    enc->add_option("--out", out, "stego PNG")->required();

    auto* dec = app.add_subcommand("decode", "recover the message from a stego image");
    dec->add_option("--stego", stego, "stego image")->required()->check(CLI::ExistingFile);
    dec->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
    dec->add_option("--seed", seed, "residual sampling seed");
    dec->add_option("--truth", truth, "expected message, for EMR on failure");
    dec->add_option("--restored-out", restored_out, "where to save the restored code on failure");

    auto* sim = app.add_subcommand("simulate", "apply a distortion to an image");
    sim->add_option("--in", in, "input image")->required()->check(CLI::ExistingFile);
    sim->add_option("--distortion", dist, "spec file, config file, 'default' or 'none'");
    sim->add_option("--seed", seed, "sampling seed");
    sim->add_option("--out", out, "output PNG")->required();

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", ta.config, "config file")->required()->check(CLI::ExistingFile);
    tr->add_option("--data", ta.data, "host image folder")->required();
    tr->add_option("--out", ta.out, "output directory")->required();
    tr->add_option("--resume", ta.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
    tr->add_option("--seed", ta.seed, "override run.seed");
    tr->add_option("--iterations", ta.iterations, "override train.iterations");
    tr->add_option("--aacb-count", ta.aacb_count, "override attnflow.aacb_count");
    tr->add_option("--threads", ta.threads, "override run.threads");
    tr->add_option("--stop-after", ta.stop_after, "stop once this many iterations are done");
    tr->add_flag("--no-iqrt", ta.no_iqrt, "disable the QR transition");
    tr->add_flag("--no-itf", ta.no_itf, "freeze token fusion at the identity");
    tr->add_flag("--no-cross-attn", ta.no_cross, "remove cross-attention from every AACB");
    tr->add_flag("--no-distortion", ta.no_distortion, "train on the clean channel");
    tr->add_flag("--skip-eval", ta.skip_eval, "do not evaluate held-out codes after training");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint over distortion channels");
    ev->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
    ev->add_option("--hosts", hosts_dir, "host image folder")->required();
    ev->add_option("--channels", channels, "comma-separated channels");
    ev->add_option("--out", out, "report CSV")->required();
    ev->add_option("--seed", seed, "evaluation seed");

    auto* qrc = app.add_subcommand("qr", "write a QR code as PNG or module text");
    qrc->add_option("--message", message, "text")->required();
    qrc->add_option("--version", version, "QR version (5-8)");
    qrc->add_option("--out", out, "output .png or .txt")->required();
    qrc->add_option("--module-px", module_px, "pixels per module")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*enc) return cmd_encode(host, message, ckpt, out);
        if (*dec) return cmd_decode(stego, ckpt, seed, truth, restored_out);
        if (*sim) return cmd_simulate(in, dist, seed, out);
        if (*tr) return cmd_train(ta);
        if (*ev) return cmd_eval(ckpt, hosts_dir, channels, out, seed);
        if (*qrc) return cmd_qr(message, version, out, module_px);
    } catch (const DecodeFailed&) {
        return kDecodeFailure;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const c10::Error& e) {
        std::cerr << "error: " << e.what_without_backtrace() << "\n";
        return kUsage;
    }
    return kUsage;
}
