#include "gcut3r/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "gcut3r/errors.hpp"
#include "gcut3r/rng.hpp"

namespace gcut3r {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (total_steps > 0 && !(warmup_steps > 0 && warmup_steps < total_steps)) {
        fail(Errc::config, "need 0 < warmup_steps < total_steps (got " + std::to_string(warmup_steps) + " and " +
                               std::to_string(total_steps) + ")");
    }
    if (!(lr_peak >= 0.0) || !std::isfinite(lr_peak)) fail(Errc::config, "lr_peak must be a finite non-negative number");
    if (!(weight_decay >= 0.0)) fail(Errc::config, "weight_decay must be non-negative");
    if (batch_size == 0) fail(Errc::config, "batch_size must be >= 1");
    if (!(clip_norm > 0.0)) fail(Errc::config, "clip_norm must be positive");
    for (double p : modality_probs) {
        if (!(p >= 0.0 && p <= 1.0)) fail(Errc::config, "modality probabilities must lie in [0, 1]");
    }
    loss.validate();
}

namespace {

std::uint64_t parse_uint(const std::string& key, const io::ConfigEntry& e, const std::string& origin) {
    std::uint64_t v = 0;
    const char* end = e.value.data() + e.value.size();
    const auto r = std::from_chars(e.value.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end) {
        fail(Errc::config, origin + ":" + std::to_string(e.line) + ": '" + key + "' expects a non-negative integer, got '" +
                               e.value + "'");
    }
    return v;
}

double parse_double(const std::string& key, const io::ConfigEntry& e, const std::string& origin) {
    char* end = nullptr;
    const double v = std::strtod(e.value.c_str(), &end);
    if (end != e.value.c_str() + e.value.size() || !std::isfinite(v)) {
        fail(Errc::config, origin + ":" + std::to_string(e.line) + ": '" + key + "' expects a number, got '" + e.value + "'");
    }
    return v;
}

}  // namespace

void apply_config(const std::map<std::string, io::ConfigEntry>& entries, ModelConfig& model, TrainConfig& train,
                  const std::string& origin) {
    if (auto it = entries.find("preset"); it != entries.end()) {
        if (it->second.value == "tiny") {
            model = ModelConfig::tiny();
        } else if (it->second.value == "paper") {
            model = ModelConfig::paper();
            train.lr_peak = 1e-5;
        } else {
            fail(Errc::config, origin + ":" + std::to_string(it->second.line) + ": preset must be tiny or paper");
        }
    }
    for (const auto& [key, e] : entries) {
        auto u = [&] { return parse_uint(key, e, origin); };
        auto d = [&] { return parse_double(key, e, origin); };
        auto all_blocks = [&](auto setter) {
            setter(model.encoder);
            setter(model.decoder);
            setter(model.modality_encoder);
        };
        if (key == "preset") {
        } else if (key == "image_size") {
            model.image_size = u();
        } else if (key == "patch") {
            model.patch = u();
        } else if (key == "embed_dim") {
            model.embed_dim = u();
            all_blocks([&](nn::BlockConfig& b) { b.embed_dim = model.embed_dim; });
        } else if (key == "heads") {
            const auto h = u();
            all_blocks([&](nn::BlockConfig& b) { b.heads = h; });
        } else if (key == "mlp_ratio") {
            const auto r = u();
            all_blocks([&](nn::BlockConfig& b) { b.mlp_ratio = r; });
        } else if (key == "encoder_layers") {
            model.encoder.layers = u();
        } else if (key == "decoder_layers") {
            model.decoder.layers = u();
        } else if (key == "state_tokens") {
            model.state_tokens = u();
        } else if (key == "rays") {
            if (e.value == "rotation") {
                model.rays = RayEncoding::rotation_only;
            } else if (e.value == "homogeneous") {
                model.rays = RayEncoding::homogeneous;
            } else {
                fail(Errc::config, origin + ":" + std::to_string(e.line) + ": rays must be rotation or homogeneous");
            }
        } else if (key == "fusion_init") {
            if (e.value == "zero") {
                model.fusion = nn::Init::zero;
            } else if (e.value == "standard") {
                model.fusion = nn::Init::standard;
            } else {
                fail(Errc::config, origin + ":" + std::to_string(e.line) + ": fusion_init must be zero or standard");
            }
        } else if (key == "seed") {
            train.seed = model.seed = u();
        } else if (key == "lr_peak") {
            train.lr_peak = d();
        } else if (key == "warmup_steps") {
            train.warmup_steps = u();
        } else if (key == "total_steps") {
            train.total_steps = u();
        } else if (key == "weight_decay") {
            train.weight_decay = d();
        } else if (key == "batch_size") {
            train.batch_size = u();
        } else if (key == "prob_k") {
            train.modality_probs[0] = d();
        } else if (key == "prob_p") {
            train.modality_probs[1] = d();
        } else if (key == "prob_d") {
            train.modality_probs[2] = d();
        } else if (key == "clip_norm") {
            train.clip_norm = d();
        } else if (key == "alpha") {
            train.loss.alpha = d();
        } else if (key == "pose_weight") {
            train.loss.pose_weight = d();
        } else if (key == "eval_every") {
            train.eval_every = u();
        } else if (key == "eval_samples") {
            train.eval_samples = u();
        } else if (key == "checkpoint_every") {
            train.checkpoint_every = u();
        } else {
            fail(Errc::config, origin + ":" + std::to_string(e.line) + ": unknown key '" + key + "'");
        }
    }
    try {
        model.validate();
        train.validate();
    } catch (const Error& e) {
        const std::string what = e.what(), prefix = std::string(errc_name(e.code())) + " error: ";
        fail(e.code(), origin + ": " + (what.rfind(prefix, 0) == 0 ? what.substr(prefix.size()) : what));
    }
}

ModalitySubset sample_modality_subset(std::mt19937_64& rng, const std::array<double, 3>& probs) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool k = u(rng) < probs[0];
    const bool p = u(rng) < probs[1];
    const bool d = u(rng) < probs[2];
    return {k, p, d};
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step >= cfg.total_steps) return 0.0;
    if (step < cfg.warmup_steps) return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const double progress =
        static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainState TrainState::fresh(const Model& model) {
    TrainState s;
    for (const auto& p : model.params().params()) {
        s.m.emplace_back(p.var.shape());
        s.v.emplace_back(p.var.shape());
    }
    return s;
}

std::vector<FrameTarget> targets_of(const SceneSample& sample) {
    std::vector<FrameTarget> out;
    for (const auto& f : sample.frames) out.push_back({f.gt_pointmap, f.valid, f.relative_pose});
    return out;
}

ModalitySubset subset_for(const TrainConfig& cfg, std::size_t step, std::size_t slot) {
    std::mt19937_64 rng(derive_seed(cfg.seed, "subset", step * cfg.batch_size + slot));
    return sample_modality_subset(rng, cfg.modality_probs);
}

LossReport train_step(Model& model, std::span<const SceneSample> batch, std::span<const ModalitySubset> subsets,
                      TrainState& state, const TrainConfig& cfg) {
    if (batch.empty()) fail(Errc::usage, "train_step needs a nonempty batch");
    if (subsets.size() != batch.size()) fail(Errc::shape, "train_step: one guidance subset per sample required");
    auto& params = model.params().params();
    if (state.m.size() != params.size()) fail(Errc::config, "train state does not match the model");

    model.params().zero_grad();
    LossReport report;
    Var total;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto frames = batch[b].model_frames(subsets[b]);
        const auto out = model.forward_sequence(frames);
        const auto targets = targets_of(batch[b]);
        LossReport r = total_loss(out.predictions, targets, cfg.loss);
        report.l_point += r.l_point;
        report.l_pose += r.l_pose;
        report.frames.insert(report.frames.end(), r.frames.begin(), r.frames.end());
        total = total.defined() ? ad::add(total, r.total_var) : r.total_var;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    report.total_var = ad::scale(total, inv);
    report.total = report.total_var.item();
    report.l_point *= inv;
    report.l_pose *= inv;
    const std::string last_good = state.last_checkpoint.empty() ? "none written yet" : state.last_checkpoint;
    if (!std::isfinite(report.total)) {
        fail(Errc::non_finite_loss, "loss is " + std::to_string(report.total) + " at step " +
                                        std::to_string(state.step + 1) + "; last good checkpoint: " + last_good);
    }
    report.total_var.backward();

    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.var.grad().data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        fail(Errc::non_finite_loss, "gradient norm is not finite at step " + std::to_string(state.step + 1) +
                                        "; last good checkpoint: " + last_good);
    }
    const double coef = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double lr = lr_at(state.step + 1, cfg);
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const bool decay = p.name.size() > 7 && p.name.compare(p.name.size() - 7, 7, ".weight") == 0;
        const Array& grad = p.var.grad();
        Array& value = p.var.mutable_value();
        Array& m = state.m[i];
        Array& v = state.v[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = grad[j] * coef;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps) + (decay ? cfg.weight_decay * value[j] : 0.0);
            value[j] -= lr * update;
        }
    }
    ++state.step;
    return report;
}

// ---- checkpoints ----

namespace {

Array scalar(double v) { return Array({1}, {v}); }

Array block(const nn::BlockConfig& b) {
    return Array({4}, {static_cast<double>(b.embed_dim), static_cast<double>(b.heads), static_cast<double>(b.mlp_ratio),
                       static_cast<double>(b.layers)});
}

std::vector<io::Record> config_records(const ModelConfig& c) {
    return {
        {"meta.image_size", scalar(static_cast<double>(c.image_size))},
        {"meta.patch", scalar(static_cast<double>(c.patch))},
        {"meta.embed_dim", scalar(static_cast<double>(c.embed_dim))},
        {"meta.encoder", block(c.encoder)},
        {"meta.decoder", block(c.decoder)},
        {"meta.modality_encoder", block(c.modality_encoder)},
        {"meta.state_tokens", scalar(static_cast<double>(c.state_tokens))},
        {"meta.fusion", scalar(c.fusion == nn::Init::zero ? 0.0 : 1.0)},
        {"meta.rays", scalar(c.rays == RayEncoding::rotation_only ? 0.0 : 1.0)},
        {"meta.seed", Array({2}, {static_cast<double>(c.seed >> 32), static_cast<double>(c.seed & 0xffffffffu)})},
    };
}

const io::Record& find_record(const std::vector<io::Record>& records, const std::string& name, const Shape& shape) {
    for (const auto& r : records) {
        if (r.name != name) continue;
        if (r.value.shape != shape) {
            fail(Errc::corrupt_checkpoint, "record " + name + " has shape " + shape_str(r.value.shape) + ", expected " +
                                               shape_str(shape));
        }
        return r;
    }
    fail(Errc::corrupt_checkpoint, "missing record " + name);
}

std::size_t as_size(double v) { return static_cast<std::size_t>(v); }

nn::BlockConfig as_block(const Array& a) {
    return {as_size(a[0]), as_size(a[1]), as_size(a[2]), as_size(a[3])};
}

void write_atomic(const fs::path& path, const std::vector<io::Record>& records) {
    const fs::path tmp = path.string() + ".tmp";
    io::write_container(tmp, records);
    fs::rename(tmp, path);
}

}  // namespace

std::vector<io::Record> model_records(const Model& model) {
    auto out = config_records(model.config());
    for (const auto& p : model.params().params()) out.push_back({p.name, p.var.value()});
    return out;
}

void save_model(const fs::path& path, const Model& model) { write_atomic(path, model_records(model)); }

ModelConfig checkpoint_config(const std::vector<io::Record>& records) {
    ModelConfig c;
    c.image_size = as_size(find_record(records, "meta.image_size", {1}).value[0]);
    c.patch = as_size(find_record(records, "meta.patch", {1}).value[0]);
    c.embed_dim = as_size(find_record(records, "meta.embed_dim", {1}).value[0]);
    c.encoder = as_block(find_record(records, "meta.encoder", {4}).value);
    c.decoder = as_block(find_record(records, "meta.decoder", {4}).value);
    c.modality_encoder = as_block(find_record(records, "meta.modality_encoder", {4}).value);
    c.state_tokens = as_size(find_record(records, "meta.state_tokens", {1}).value[0]);
    c.fusion = find_record(records, "meta.fusion", {1}).value[0] == 0.0 ? nn::Init::zero : nn::Init::standard;
    c.rays = find_record(records, "meta.rays", {1}).value[0] == 0.0 ? RayEncoding::rotation_only : RayEncoding::homogeneous;
    const Array& s = find_record(records, "meta.seed", {2}).value;
    c.seed = (static_cast<std::uint64_t>(s[0]) << 32) | static_cast<std::uint64_t>(s[1]);
    try {
        c.validate();
    } catch (const Error& e) {
        fail(Errc::corrupt_checkpoint, std::string("stored model config is invalid: ") + e.what());
    }
    return c;
}

namespace {

void load_params(Model& model, const std::vector<io::Record>& records) {
    for (auto& p : model.params().params()) {
        const auto& r = find_record(records, p.name, p.var.shape());
        p.var.mutable_value() = r.value;
    }
}

bool same_config(const ModelConfig& a, const ModelConfig& b) {
    const auto ra = config_records(a), rb = config_records(b);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        if (!(ra[i].value == rb[i].value)) return false;
    }
    return true;
}

}  // namespace

std::unique_ptr<Model> load_model(const fs::path& path) {
    const auto records = io::read_container(path);
    auto model = std::make_unique<Model>(checkpoint_config(records));
    load_params(*model, records);
    return model;
}

void save_state(const fs::path& path, const Model& model, const TrainState& state) {
    std::vector<io::Record> out{{"step", scalar(static_cast<double>(state.step))},
                                {"best_eval", Array({2}, {state.best_eval, static_cast<double>(state.best_step)})}};
    const auto& params = model.params().params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back({"opt.m." + params[i].name, state.m[i]});
        out.push_back({"opt.v." + params[i].name, state.v[i]});
    }
    write_atomic(path, out);
}

TrainState load_state(const fs::path& path, const Model& model) {
    const auto records = io::read_container(path);
    TrainState s;
    s.step = as_size(find_record(records, "step", {1}).value[0]);
    const Array& best = find_record(records, "best_eval", {2}).value;
    s.best_eval = best[0];
    s.best_step = as_size(best[1]);
    for (const auto& p : model.params().params()) {
        s.m.push_back(find_record(records, "opt.m." + p.name, p.var.shape()).value);
        s.v.push_back(find_record(records, "opt.v." + p.name, p.var.shape()).value);
    }
    return s;
}

// ---- evaluation ----

ReportRow evaluate_sample(const Model& model, const SceneSample& sample, ModalitySubset subset,
                          const std::string& scene_id, const EvalOptions& opts) {
    ad::NoGradGuard guard;
    const auto frames = sample.model_frames(subset);
    const auto out = model.forward_sequence(frames);

    ReportRow row;
    row.scene_id = scene_id;
    row.k = subset.k;
    row.p = subset.p;
    row.d = subset.d;

    std::vector<Array> pred, gt, masks;
    PointCloud pred_cloud, gt_cloud;
    std::vector<double> pred_depth, gt_depth;
    std::vector<Pose> pred_poses, gt_poses;
    for (std::size_t k = 0; k < sample.frames.size(); ++k) {
        const auto& f = sample.frames[k];
        const Prediction& p = out.predictions[k];
        const Array& x = p.pointmap.value();
        pred.push_back(x);
        gt.push_back(f.gt_pointmap);
        masks.push_back(f.valid);
        const Pose pose = p.pose();
        const Mat3 rt = pose.rotation().transpose();
        const std::size_t plane = f.valid.size();
        for (std::size_t i = 0; i < plane; ++i) {
            if (f.valid[i] == 0.0) continue;
            const Vec3 xp(x[i], x[plane + i], x[2 * plane + i]);
            pred_cloud.push_back(xp);
            gt_cloud.emplace_back(f.gt_pointmap[i], f.gt_pointmap[plane + i], f.gt_pointmap[2 * plane + i]);
            pred_depth.push_back((rt * (xp - pose.t)).z());
            gt_depth.push_back(f.gt_depth.values[i]);
        }
        pred_poses.push_back(pose);
        gt_poses.push_back(f.relative_pose);
    }
    row.l2 = l2_per_frame(pred, gt, masks);

    if (opts.align_sim3) {
        try {
            const Sim3 sim = umeyama_sim3(pred_cloud, gt_cloud, true);
            for (auto& pt : pred_cloud) pt = sim.apply(pt);
        } catch (const Error& e) {
            if (e.code() != Errc::degenerate_configuration) throw;
        }
    }
    row.acc = acc_comp(pred_cloud, gt_cloud);
    row.nc = normal_consistency(pred_cloud, gt_cloud, opts.nc_k);
    const std::vector<std::uint8_t> all(pred_depth.size(), 1);
    row.depth = depth_metrics(pred_depth, gt_depth, all, opts.depth_align);
    row.pose = pose_metrics(pred_poses, gt_poses);
    return row;
}

ReportRow mean_row(std::span<const ReportRow> rows, const std::string& scene_id) {
    if (rows.empty()) fail(Errc::evaluation, "mean_row of no rows");
    ReportRow m;
    m.scene_id = scene_id;
    m.k = rows[0].k;
    m.p = rows[0].p;
    m.d = rows[0].d;
    m.l2.assign(rows[0].l2.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (const auto& r : rows) {
        m.acc.acc_mean += r.acc.acc_mean * inv;
        m.acc.acc_median += r.acc.acc_median * inv;
        m.acc.comp_mean += r.acc.comp_mean * inv;
        m.acc.comp_median += r.acc.comp_median * inv;
        m.nc.nc_mean += r.nc.nc_mean * inv;
        m.nc.nc_median += r.nc.nc_median * inv;
        m.depth.abs_rel += r.depth.abs_rel * inv;
        m.depth.delta_125 += r.depth.delta_125 * inv;
        m.pose.ate += r.pose.ate * inv;
        m.pose.rpe_trans += r.pose.rpe_trans * inv;
        m.pose.rpe_rot_deg += r.pose.rpe_rot_deg * inv;
        m.pose.degenerate = m.pose.degenerate || r.pose.degenerate;
        for (std::size_t i = 0; i < m.l2.size(); ++i) m.l2[i] += r.l2.at(i) * inv;
    }
    return m;
}

double mean_l2(const ReportRow& row) {
    return std::accumulate(row.l2.begin(), row.l2.end(), 0.0) / static_cast<double>(row.l2.size());
}

// ---- runs ----

namespace {

std::string fmt_line(const char* format, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

/// Keeps log lines belonging to steps <= `step`.
std::string truncated_log(const fs::path& path, std::size_t step) {
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string first;
        ls >> first;
        std::size_t s = 0;
        if (first == "EVAL") ls >> s;
        else s = std::strtoull(first.c_str(), nullptr, 10);
        if (s <= step) kept += line + "\n";
    }
    return kept;
}

}  // namespace

RunResult run(Model& model, const io::Corpus& corpus, const TrainConfig& cfg, const fs::path& out_dir,
              const RunOptions& opts) {
    cfg.validate();
    if (corpus.image_size != model.config().image_size) {
        fail(Errc::config, "corpus image size " + std::to_string(corpus.image_size) + " does not match model image size " +
                               std::to_string(model.config().image_size));
    }
    const auto train = corpus.split("train");
    if (train.empty() && cfg.total_steps > 0) fail(Errc::config, "corpus has no training split");
    std::vector<SceneSample> holdout;
    if (cfg.eval_every > 0) {
        const auto entries = corpus.split("holdout");
        if (entries.empty()) fail(Errc::config, "periodic evaluation requested but the corpus has no holdout split");
        for (std::size_t i = 0; i < entries.size() && i < cfg.eval_samples; ++i) holdout.push_back(corpus.sample(entries[i]));
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) fail(Errc::io, "cannot create " + out_dir.string());
    const fs::path model_path = out_dir / "model.ckpt", state_path = out_dir / "state.ckpt", log_path = out_dir / "train.log";

    TrainState state = TrainState::fresh(model);
    std::string log_text;
    if (opts.resume && fs::exists(state_path)) {
        const auto records = io::read_container(model_path);
        if (!same_config(checkpoint_config(records), model.config())) {
            fail(Errc::config, "checkpoint in " + out_dir.string() + " was written by a different model config");
        }
        load_params(model, records);
        state = load_state(state_path, model);
        state.last_checkpoint = model_path.string();
        log_text = truncated_log(log_path, state.step);
    }
    io::write_text(log_path, log_text);
    std::ofstream log(log_path, std::ios::app);
    auto emit = [&](const std::string& line) {
        log << line << '\n';
        log.flush();
        if (opts.echo) *opts.echo << line << '\n';
    };
    auto checkpoint = [&] {
        save_model(model_path, model);
        save_state(state_path, model, state);
        state.last_checkpoint = model_path.string();
    };

    std::vector<std::size_t> order;
    std::size_t order_epoch = SIZE_MAX;
    auto sample_index = [&](std::size_t global) {
        const std::size_t epoch = global / train.size();
        if (epoch != order_epoch) {
            order.resize(train.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::mt19937_64 rng(derive_seed(cfg.seed, "epoch", epoch));
            std::shuffle(order.begin(), order.end(), rng);
            order_epoch = epoch;
        }
        return order[global % train.size()];
    };

    const std::size_t stop = std::min(cfg.total_steps, opts.stop_at.value_or(cfg.total_steps));
    while (state.step < stop) {
        std::vector<SceneSample> batch;
        std::vector<ModalitySubset> subsets;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(corpus.sample(train[sample_index(state.step * cfg.batch_size + b)]));
            subsets.push_back(subset_for(cfg, state.step, b));
        }
        const double lr = lr_at(state.step + 1, cfg);
        const LossReport r = train_step(model, batch, subsets, state, cfg);
        emit(fmt_line("%zu %.9g %.9g %.9g %.9g", state.step, lr, r.l_point, r.l_pose, r.total));

        if (cfg.eval_every > 0 && state.step % cfg.eval_every == 0) {
            double score = 0.0;
            for (const auto subset : all_subsets()) {
                std::vector<ReportRow> rows;
                for (std::size_t i = 0; i < holdout.size(); ++i) {
                    rows.push_back(evaluate_sample(model, holdout[i], subset, std::to_string(i)));
                }
                const ReportRow m = mean_row(rows, "holdout");
                score += mean_l2(m) / 8.0;
                emit("EVAL " + std::to_string(state.step) + " " + format_report_row(m));
            }
            if (score < state.best_eval) {
                state.best_eval = score;
                state.best_step = state.step;
            }
        }
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) checkpoint();
    }
    checkpoint();
    return {model_path, state.step};
}

}  // namespace gcut3r
