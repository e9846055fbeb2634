// gcut3r: corpus generation, training, evaluation, inference and point-cloud export.
//
// Exit codes: 0 success, 2 usage / config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gcut3r/errors.hpp"
#include "gcut3r/io.hpp"
#include "gcut3r/trainer.hpp"

namespace fs = std::filesystem;
using namespace gcut3r;

namespace {

int exit_code(Errc code) {
    switch (code) {
        case Errc::usage:
        case Errc::config: return 2;
        case Errc::non_finite_loss: return 4;
        default: return 3;
    }
}

std::string now_utc() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct Manifest {
    std::string command;
    std::string config;
    std::uint64_t seed = 0;
    fs::path out;
    std::string checkpoint_hash;
    nlohmann::json extra = nlohmann::json::object();

    void write(const fs::path& path) const {
        nlohmann::json j{{"command", command},   {"config", config},
                         {"seed", seed},         {"output", out.string()},
                         {"checkpoint_hash", checkpoint_hash}, {"written_at", now_utc()}};
        for (const auto& [k, v] : extra.items()) j[k] = v;
        io::write_text(path, j.dump(2) + "\n");
    }
};

std::string hash_file(const fs::path& path) { return io::git_blob_hash(io::read_bytes(path)); }

std::vector<ModalitySubset> parse_subsets(const std::string& spec) {
    if (spec == "all") {
        const auto all = all_subsets();
        return {all.begin(), all.end()};
    }
    std::vector<ModalitySubset> out;
    std::stringstream ss(spec);
    std::string token;
    while (std::getline(ss, token, ',')) {
        if (token == "-" || token == "none") {
            out.push_back(ModalitySubset::none());
        } else {
            out.push_back(ModalitySubset::parse(token));
        }
    }
    if (out.empty()) fail(Errc::usage, "--subsets selects nothing");
    return out;
}

// ---- commands ----

int cmd_gen_data(const fs::path& out, std::size_t count, std::uint64_t seed, const std::string& noise, double frac,
                 std::size_t image_size) {
    if (!NoiseConfig::is_profile(noise)) fail(Errc::usage, "unknown noise profile '" + noise + "'");
    const auto corpus = io::generate_corpus(out, count, seed, noise, frac, image_size);
    Manifest m{"gen-data", "", seed, out, ""};
    m.extra["count"] = count;
    m.extra["noise"] = noise;
    m.extra["split_frac"] = frac;
    m.extra["holdout"] = corpus.split("holdout").size();
    m.write(out / "run_manifest.json");
    std::cout << "wrote " << corpus.entries.size() << " samples (" << corpus.split("train").size() << " train, "
              << corpus.split("holdout").size() << " holdout) to " << out.string() << "\n";
    return 0;
}

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out, const std::string& ablation,
              bool resume, bool quiet) {
    ModelConfig mc;
    TrainConfig tc;
    apply_config(io::read_config(config), mc, tc, config.string());
    if (ablation == "no-zeroconv") {
        mc.fusion = nn::Init::standard;
    } else if (!ablation.empty()) {
        fail(Errc::usage, "--ablation accepts only no-zeroconv");
    }
    const auto corpus = io::load_corpus(data);
    Model model(mc);
    RunOptions opts;
    opts.resume = resume;
    opts.echo = quiet ? nullptr : &std::cout;
    const auto result = run(model, corpus, tc, out, opts);
    Manifest m{"train", config.string(), tc.seed, out, hash_file(result.checkpoint)};
    m.extra["ablation"] = mc.fusion == nn::Init::zero ? "zeroconv" : "no-zeroconv";
    m.extra["steps"] = result.step;
    m.extra["data"] = data.string();
    m.write(out / "run_manifest.json");
    return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, const fs::path& report, const std::string& subsets_spec,
             bool align, const std::string& depth_align) {
    const auto subsets = parse_subsets(subsets_spec);
    EvalOptions opts;
    opts.align_sim3 = align;
    if (depth_align == "median") {
        opts.depth_align = DepthAlign::median;
    } else if (depth_align != "none") {
        fail(Errc::usage, "--depth-align must be none or median");
    }
    const auto model = load_model(ckpt);
    const auto corpus = io::load_corpus(data);
    if (corpus.image_size != model->config().image_size) {
        fail(Errc::config, "corpus image size does not match the checkpoint");
    }
    const auto holdout = corpus.split("holdout");
    if (holdout.empty()) fail(Errc::io, "corpus " + data.string() + " has no holdout split");
    std::string text = "# " + report_header() + "\n";
    for (const auto& entry : holdout) {
        const SceneSample sample = corpus.sample(entry);
        for (const auto& s : subsets) text += format_report_row(evaluate_sample(*model, sample, s, entry.id(), opts)) + "\n";
    }
    if (report.has_parent_path()) fs::create_directories(report.parent_path());
    io::write_text(report, text);
    Manifest m{"eval", "", model->config().seed, report.parent_path(), hash_file(ckpt)};
    m.extra["report"] = report.string();
    m.extra["subsets"] = subsets_spec;
    m.write(report.string() + ".manifest.json");
    return 0;
}

/// Least-squares focal length from camera-frame points with the principal point at the centre.
Intrinsics estimate_intrinsics(const Array& points_cam, std::size_t h, std::size_t w) {
    const double cx = 0.5 * static_cast<double>(w - 1), cy = 0.5 * static_cast<double>(h - 1);
    const std::size_t plane = h * w;
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n < h; ++n) {
        for (std::size_t mcol = 0; mcol < w; ++mcol) {
            const std::size_t i = n * w + mcol;
            const double z = points_cam[2 * plane + i];
            if (!(z > 1e-6)) continue;
            const double a = points_cam[i] / z, b = points_cam[plane + i] / z;
            num += (static_cast<double>(mcol) - cx) * a + (static_cast<double>(n) - cy) * b;
            den += a * a + b * b;
        }
    }
    const double f = den > 0.0 && num > 0.0 ? num / den : static_cast<double>(w);
    return {f, f, cx, cy};
}

int cmd_infer(const fs::path& ckpt, const fs::path& frames_dir, const std::string& guidance, const fs::path& out) {
    const ModalitySubset subset = ModalitySubset::parse(guidance);
    const auto model = load_model(ckpt);
    const std::size_t size = model->config().image_size;

    std::vector<Frame> frames;
    for (std::size_t k = 0;; ++k) {
        const fs::path img = frames_dir / ("image_" + std::to_string(k) + ".bin");
        if (!fs::exists(img)) break;
        const auto r = io::read_raster(img);
        if (r.data.shape != Shape{3, size, size}) {
            fail(Errc::shape, img.string() + " is " + shape_str(r.data.shape) + ", model expects 3x" +
                                  std::to_string(size) + "x" + std::to_string(size));
        }
        frames.push_back({r.data, {}});
    }
    if (frames.empty()) fail(Errc::io, "no image_0.bin in " + frames_dir.string());

    if (subset.k || subset.p) {
        const fs::path cam_path = frames_dir / "guidance_cameras.txt";
        if (!fs::exists(cam_path)) {
            fail(Errc::missing_prior, "guidance " + subset.letters() + " requested but " + cam_path.string() + " is missing");
        }
        const auto cams = io::read_cameras(cam_path);
        if (cams.size() != frames.size()) {
            fail(Errc::missing_prior, cam_path.string() + " has " + std::to_string(cams.size()) + " lines for " +
                                          std::to_string(frames.size()) + " frames");
        }
        for (std::size_t k = 0; k < frames.size(); ++k) {
            if (subset.k) frames[k].guidance.intrinsics = cams[k].k;
            if (subset.p) frames[k].guidance.pose = cams[k].pose;
        }
    }
    if (subset.d) {
        for (std::size_t k = 0; k < frames.size(); ++k) {
            const fs::path dp = frames_dir / ("guidance_depth_" + std::to_string(k) + ".bin");
            if (!fs::exists(dp)) fail(Errc::missing_prior, "depth guidance requested but " + dp.string() + " is missing");
            frames[k].guidance.depth = io::read_depth(dp);
        }
    }

    ad::NoGradGuard guard;
    const auto result = model->forward_sequence(frames);
    fs::create_directories(out);
    std::vector<io::Camera> trajectory;
    for (std::size_t k = 0; k < frames.size(); ++k) {
        const Prediction& p = result.predictions[k];
        io::write_raster(out / ("pointmap_" + std::to_string(k) + ".bin"), p.pointmap.value());
        io::write_raster(out / ("confidence_" + std::to_string(k) + ".bin"), p.confidence.value());
        const Pose pose = p.pose();
        Intrinsics kk;
        if (frames[k].guidance.intrinsics) {
            kk = *frames[k].guidance.intrinsics;
        } else {
            const Array& x = p.pointmap.value();
            const Mat3 rt = pose.rotation().transpose();
            Array cam(x.shape);
            const std::size_t plane = size * size;
            for (std::size_t i = 0; i < plane; ++i) {
                const Vec3 c = rt * (Vec3(x[i], x[plane + i], x[2 * plane + i]) - pose.t);
                for (std::size_t ch = 0; ch < 3; ++ch) cam[ch * plane + i] = c[static_cast<Eigen::Index>(ch)];
            }
            kk = estimate_intrinsics(cam, size, size);
        }
        trajectory.push_back({kk, pose});
    }
    io::write_cameras(out / "trajectory.txt", trajectory);
    Manifest m{"infer", "", model->config().seed, out, hash_file(ckpt)};
    m.extra["guidance"] = subset.letters();
    m.extra["frames"] = frames.size();
    m.write(out / "run_manifest.json");
    return 0;
}

int cmd_export_ply(const fs::path& dir, double cmin, const fs::path& out) {
    std::vector<std::array<double, 4>> vertices;
    std::size_t k = 0;
    for (;; ++k) {
        const fs::path pp = dir / ("pointmap_" + std::to_string(k) + ".bin");
        if (!fs::exists(pp)) break;
        const auto pts = io::read_raster(pp);
        const auto conf = io::read_raster(dir / ("confidence_" + std::to_string(k) + ".bin"));
        if (pts.data.dim(0) != 3 || conf.data.dim(0) != 1 || pts.data.dim(1) != conf.data.dim(1) ||
            pts.data.dim(2) != conf.data.dim(2)) {
            fail(Errc::malformed_file, "pointmap/confidence pair " + std::to_string(k) + " has mismatched rasters");
        }
        const std::size_t plane = conf.data.size();
        for (std::size_t i = 0; i < plane; ++i) {
            const double c = conf.data[i];
            if (c < cmin) continue;
            vertices.push_back({pts.data[i], pts.data[plane + i], pts.data[2 * plane + i], c});
        }
    }
    if (k == 0) fail(Errc::io, "no pointmap_0.bin in " + dir.string());
    std::string text = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(vertices.size()) +
                       "\nproperty float x\nproperty float y\nproperty float z\nproperty float confidence\nend_header\n";
    char buf[128];
    for (const auto& v : vertices) {
        std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %.9g\n", v[0], v[1], v[2], v[3]);
        text += buf;
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_text(out, text);
    Manifest m{"export-ply", "", 0, out.parent_path(), ""};
    m.extra["vertices"] = vertices.size();
    m.extra["confidence_min"] = cmin;
    m.write(out.string() + ".manifest.json");
    std::cout << "wrote " << vertices.size() << " vertices to " << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"guided recurrent 3D reconstruction at desk scale"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    std::string gen_out, noise = "clean";
    std::size_t count = 0, image_size = 32;
    std::uint64_t seed = 0;
    double frac = 0.1;
    gen->add_option("--out", gen_out, "corpus directory")->required();
    gen->add_option("--count", count, "number of sequences")->required();
    gen->add_option("--seed", seed, "corpus seed");
    gen->add_option("--noise", noise, "clean | noisy | sparse | lidar");
    gen->add_option("--split-frac", frac, "holdout fraction");
    gen->add_option("--image-size", image_size, "square image size");

    auto* train = app.add_subcommand("train", "train a model");
    std::string config, data, train_out, ablation;
    bool resume = false, quiet = false;
    train->add_option("--config", config, "key = value config file")->required();
    train->add_option("--data", data, "corpus directory")->required();
    train->add_option("--out", train_out, "run directory")->required();
    train->add_option("--ablation", ablation, "no-zeroconv selects standard-init fusion layers");
    train->add_flag("--resume", resume, "continue from the run directory's last checkpoint");
    train->add_flag("--quiet", quiet, "do not echo the training log");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the holdout split");
    std::string ckpt, eval_data, report, subsets = "all", depth_align = "none";
    bool no_align = false;
    eval->add_option("--checkpoint", ckpt)->required();
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--out", report, "report file")->required();
    eval->add_option("--subsets", subsets, "all, or comma-separated letter sets such as D,KP,-");
    eval->add_option("--depth-align", depth_align, "none | median");
    eval->add_flag("--no-align", no_align, "skip Sim(3) alignment before Acc / Comp / NC");

    auto* infer = app.add_subcommand("infer", "run a checkpoint on one sequence");
    std::string infer_ckpt, frames_dir, guidance, infer_out;
    infer->add_option("--checkpoint", infer_ckpt)->required();
    infer->add_option("--frames", frames_dir, "directory with image_<k>.bin and guidance files")->required();
    infer->add_option("--guidance", guidance, "letters from K, P, D; empty for none");
    infer->add_option("--out", infer_out)->required();

    auto* ply = app.add_subcommand("export-ply", "write predicted pointmaps as an ASCII PLY");
    std::string ply_dir, ply_out;
    double cmin = 0.0;
    ply->add_option("--pointmaps", ply_dir)->required();
    ply->add_option("--confidence-min", cmin);
    ply->add_option("--out", ply_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen_data(gen_out, count, seed, noise, frac, image_size);
        if (*train) return cmd_train(config, data, train_out, ablation, resume, quiet);
        if (*eval) return cmd_eval(ckpt, eval_data, report, subsets, !no_align, depth_align);
        if (*infer) return cmd_infer(infer_ckpt, frames_dir, guidance, infer_out);
        if (*ply) return cmd_export_ply(ply_dir, cmin, ply_out);
    } catch (const Error& e) {
        std::cerr << "gcut3r: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "gcut3r: io error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
