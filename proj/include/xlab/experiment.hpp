#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "xlab/mixer.hpp"
#include "xlab/model.hpp"
#include "xlab/tokenizer.hpp"
#include "xlab/trainer.hpp"

namespace xlab::experiment {

namespace fs = std::filesystem;

struct LanguageCorpus {
    std::string name;
    std::vector<fs::path> paths;
};

struct CorpusConfig {
    std::vector<fs::path> paths;             // cloned mode: one base corpus
    std::vector<LanguageCorpus> languages;   // real mode: one corpus per language
    double test_fraction = 0.05;
    std::uint64_t split_seed = 0;
};

enum class VocabMode { cloned, real };

struct TokenizerConfig {
    VocabMode mode = VocabMode::cloned;
    std::size_t vocab_size = 2048;   // per language in real mode
    int languages = 2;               // clone count (cloned mode)
    double anchor_fraction = 0.0;
    tokenizer::AnchorSelection anchor_selection = tokenizer::AnchorSelection::uniform;
    std::uint64_t anchor_seed = 0;
    tokenizer::JointVocabulary::Mode joint = tokenizer::JointVocabulary::Mode::disjoint;
    /// Pre-built base vocabulary (cloned mode) to load instead of training.
    fs::path vocab_path;
};

struct EvalConfig {
    std::vector<std::int64_t> steps;   // extra eval points during training
    std::size_t window = 128;
    std::size_t stride = 32;
    std::size_t max_tokens = 0;        // 0: whole test split
};

struct AlignConfig {
    bool enabled = true;
    std::size_t pairs = 32;            // hidden-state pairs
    std::size_t pair_len = 64;
    std::size_t gradient_pairs = 8;
    std::vector<fs::path> parallel;    // real mode: two line-aligned files
};

struct ScalingConfig {
    fs::path fit;                          // fit JSON
    std::vector<fs::path> reference_runs;  // or monolingual run directories
};

struct ExperimentConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    CorpusConfig corpus;
    TokenizerConfig tokenizer;
    mixer::MixPolicy policy = mixer::MixPolicy::parse_shorthand("50/50");
    mixer::Granularity granularity = mixer::Granularity::sequence;
    model::ModelConfig model;   // vocab_size and segments are filled in by the pipeline
    trainer::TrainConfig train;
    EvalConfig eval;
    AlignConfig align;
    ScalingConfig scaling;
    nlohmann::json sweep;       // null unless this is a sweep

    int n_languages() const;
    std::vector<std::string> language_names() const;

    /// ValidationError naming the offending fields.
    void validate() const;

    /// Relative paths are resolved against `base_dir`. Unknown keys are
    /// rejected; shorthand policies are expanded.
    static ExperimentConfig from_json(const nlohmann::json& j, const fs::path& base_dir = {});
    static ExperimentConfig load(const fs::path& path);
    nlohmann::json to_json() const;

    /// SHA-256 hex of the canonical JSON.
    std::string digest() const;

    std::uint64_t init_seed() const { return seed; }
    std::uint64_t source_seed() const { return seed * 0x9E3779B97F4A7C15ULL + 1; }
};

}  // namespace xlab::experiment
