#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "xlab/mixer.hpp"
#include "xlab/model.hpp"

namespace xlab::trainer {

struct TrainConfig {
    std::int64_t total_steps = 0;
    std::int64_t batch_size = 16;
    std::int64_t seq_len = 128;
    double lr_max = 6e-4;
    double lr_min = 6e-6;
    std::int64_t warmup_steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 1.0;   // <= 0 disables clipping
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 0;   // 0: only the final checkpoint

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Linear warmup from 0 to lr_max over warmup_steps, then cosine decay that
/// would reach lr_min at step total_steps.
double lr_at(const TrainConfig& config, std::int64_t step);

struct EvalSnapshot {
    std::int64_t step;
    std::vector<double> ppl;   // per language
    friend bool operator==(const EvalSnapshot&, const EvalSnapshot&) = default;
};

struct RunRecord {
    std::int64_t steps = 0;
    std::vector<double> losses;                          // one per step
    std::vector<std::vector<std::uint64_t>> step_counts;  // tokens per language, per step
    std::vector<std::uint64_t> tokens;                   // t_n, summed over steps
    std::vector<EvalSnapshot> evals;
    std::string config_digest;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
    /// "step,loss,tokens_lang0,..." with per-step counts.
    std::string losses_csv() const;
    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

struct Adam {
    std::vector<float> m, v;
};

using EvalHook = std::function<std::vector<double>(const model::ModelState<float>&, std::int64_t step)>;

struct TrainHooks {
    /// Steps (counted as completed steps) after which `eval` runs.
    std::vector<std::int64_t> eval_steps;
    EvalHook eval;
    /// Directory for checkpoints; none are written when empty.
    std::filesystem::path checkpoint_dir;
    /// Stop (after checkpointing) once this many steps are complete.
    std::optional<std::int64_t> stop_after;
};

struct TrainResult {
    model::ModelState<float> state;
    RunRecord record;
    Adam adam;
    std::optional<std::filesystem::path> last_checkpoint;
};

/// Digest identifying a (model config, train config) pair; callers may
/// substitute a digest covering more of the experiment.
std::string default_config_digest(const model::ModelConfig& model_config, const TrainConfig& config);

/// Adam with global-norm clipping over batches drawn from `source`. Sequences
/// are seq_len + 1 ids; every target token is credited to its language.
TrainResult train(model::ModelState<float> state, mixer::SequenceSource& source, const TrainConfig& config,
                  const TrainHooks& hooks = {}, std::string config_digest = {});

/// Continues a checkpointed run. The checkpoint's config digest must equal
/// `config_digest` (DigestError otherwise); the source is restored to the
/// checkpointed position.
TrainResult resume(const std::filesystem::path& checkpoint, mixer::SequenceSource& source, const TrainConfig& config,
                   const TrainHooks& hooks = {}, std::string config_digest = {});

struct Checkpoint {
    model::ModelState<float> state;
    Adam adam;
    TrainConfig train_config;
    std::string config_digest;
    std::int64_t step = 0;
    nlohmann::json source_state;
    RunRecord record;
};

/// Layout: "XLCK", u8 version, u64 header length, JSON header, SHA-256 of
/// the header, then parameters (canonical group order), Adam m and v as
/// little-endian f32. The header carries the payload digest.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Verifies both digests before returning anything; DigestError on mismatch.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters only, for evaluation and diagnostics.
model::ModelState<float> load_model(const std::filesystem::path& checkpoint);

}  // namespace xlab::trainer
