#pragma once

// Training loop: random guidance subsets per sequence, warmup + cosine learning rate,
// AdamW with decoupled decay and global-norm clipping, checkpoints, resumable runs and
// the held-out evaluation over all guidance subsets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gcut3r/io.hpp"
#include "gcut3r/losses.hpp"
#include "gcut3r/metrics.hpp"
#include "gcut3r/model.hpp"
#include "gcut3r/synthdata.hpp"

namespace gcut3r {

struct TrainConfig {
    double lr_peak = 1e-3;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 1000;
    double weight_decay = 0.01;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    std::array<double, 3> modality_probs{0.5, 0.5, 0.5};  // K, P, D
    double clip_norm = 1.0;
    LossConfig loss;
    std::size_t eval_every = 0;        // 0 disables periodic evaluation
    std::size_t eval_samples = 8;      // holdout sequences per evaluation event
    std::size_t checkpoint_every = 0;  // 0 checkpoints only at the end

    /// total_steps = 0 is allowed (the run only checkpoints the initialisation).
    void validate() const;
};

/// Reads every recognised key; unknown keys are config errors carrying their line number.
void apply_config(const std::map<std::string, io::ConfigEntry>& entries, ModelConfig& model, TrainConfig& train,
                  const std::string& origin = "<config>");

/// Each modality present independently with its probability.
ModalitySubset sample_modality_subset(std::mt19937_64& rng, const std::array<double, 3>& probs);

/// Linear ramp to lr_peak over the warmup, then half-cosine decay to zero at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct TrainState {
    std::size_t step = 0;
    std::vector<Array> m;  // first moments, in parameter order
    std::vector<Array> v;  // second moments
    double best_eval = std::numeric_limits<double>::infinity();
    std::size_t best_step = 0;
    std::string last_checkpoint;  // not serialised

    static TrainState fresh(const Model& model);
};

std::vector<FrameTarget> targets_of(const SceneSample& sample);

/// The subset for slot b of step s is drawn from a generator keyed on (seed, s * batch + b).
ModalitySubset subset_for(const TrainConfig& cfg, std::size_t step, std::size_t slot);

/// One optimisation step over the batch (mean of per-sequence losses). Throws
/// non-finite-loss, naming the last good checkpoint, before touching any parameter.
LossReport train_step(Model& model, std::span<const SceneSample> batch, std::span<const ModalitySubset> subsets,
                      TrainState& state, const TrainConfig& cfg);

// ---- checkpoints ----

std::vector<io::Record> model_records(const Model& model);
void save_model(const std::filesystem::path& path, const Model& model);
ModelConfig checkpoint_config(const std::vector<io::Record>& records);
std::unique_ptr<Model> load_model(const std::filesystem::path& path);
void save_state(const std::filesystem::path& path, const Model& model, const TrainState& state);
TrainState load_state(const std::filesystem::path& path, const Model& model);

// ---- evaluation ----

struct EvalOptions {
    bool align_sim3 = true;  // Sim(3)-align the predicted cloud before Acc / Comp / NC
    DepthAlign depth_align = DepthAlign::none;
    std::size_t nc_k = 10;
};

ReportRow evaluate_sample(const Model& model, const SceneSample& sample, ModalitySubset subset,
                          const std::string& scene_id, const EvalOptions& opts = {});
/// Field-wise mean of rows sharing one subset.
ReportRow mean_row(std::span<const ReportRow> rows, const std::string& scene_id);
double mean_l2(const ReportRow& row);

// ---- runs ----

struct RunOptions {
    bool resume = true;                   // continue from DIR/state.ckpt when present
    std::optional<std::size_t> stop_at;   // stop early (for interrupted-run tests)
    std::ostream* echo = nullptr;         // mirror of the log
};

struct RunResult {
    std::filesystem::path checkpoint;
    std::size_t step = 0;
};

/// Writes DIR/train.log, DIR/model.ckpt and DIR/state.ckpt.
RunResult run(Model& model, const io::Corpus& corpus, const TrainConfig& cfg, const std::filesystem::path& out_dir,
              const RunOptions& opts = {});

}  // namespace gcut3r
