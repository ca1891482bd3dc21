#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "xlab/alignment.hpp"
#include "xlab/corpus.hpp"
#include "xlab/evaluator.hpp"
#include "xlab/experiment.hpp"
#include "xlab/scaling.hpp"
#include "xlab/tokenizer.hpp"
#include "xlab/trainer.hpp"

namespace xlab::pipeline {

namespace fs = std::filesystem;
using experiment::ExperimentConfig;

// ---------------------------------------------------------------------------
// Run directory bookkeeping.
// ---------------------------------------------------------------------------

/// Single-writer guard: creates `<dir>/.lock` exclusively, removes it on
/// destruction. Throws Error if another writer holds it.
class RunLock {
public:
    explicit RunLock(const fs::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

/// "<sha256>  <relative path>" for every file under dir except MANIFEST and
/// the lock, sorted by path.
void write_manifest(const fs::path& dir);
std::map<std::string, std::string> read_manifest(const fs::path& dir);
/// DigestError if a listed file is missing or changed, or an unlisted file
/// is present.
void verify_manifest(const fs::path& dir);
std::string file_sha256(const fs::path& path);

// ---------------------------------------------------------------------------
// A prepared run: config, vocabularies and encoded splits.
// ---------------------------------------------------------------------------

struct RunContext {
    fs::path dir;
    ExperimentConfig config;
    model::ModelConfig model_config;   // with vocab size and segments filled in
    std::optional<tokenizer::ClonedVocabulary> cv;
    std::vector<tokenizer::Vocabulary> vocabs;   // real mode, one per language
    std::optional<tokenizer::JointVocabulary> joint;
    std::vector<corpus::TokenStream> train;   // cloned: one base stream; real: one per language
    std::vector<corpus::TokenStream> test;

    std::unique_ptr<mixer::SequenceSource> make_source() const;
    evaluator::EvalResult evaluate(const model::ModelState<float>& state) const;
};

/// Ingest, split, train or load the BPE vocabulary, build the cloned or
/// joint vocabulary and encode both splits into `dir`. Existing outputs are
/// reused.
void tokenize_stage(const ExperimentConfig& config, const fs::path& dir);
RunContext load_context(const fs::path& dir);

struct StageOptions {
    std::optional<std::int64_t> stop_after;   // interrupt training (checkpointed)
};

/// Trains (or resumes from the newest checkpoint) and writes record.json and
/// losses.csv. Returns false if interrupted by stop_after.
bool train_stage(const RunContext& ctx, const StageOptions& options = {});
fs::path final_checkpoint(const fs::path& dir);
std::optional<fs::path> latest_checkpoint(const fs::path& dir);

evaluator::EvalResult eval_stage(const RunContext& ctx, std::optional<fs::path> checkpoint = {});
scaling::EfficiencyReport efficiency_stage(const RunContext& ctx);
/// Writes alignment.json and hidden.csv. With show_pairs > 0, `text` gets a
/// token alignment view of the first pairs.
nlohmann::json align_stage(const RunContext& ctx, std::size_t show_pairs = 0, std::string* text = nullptr);

// ---------------------------------------------------------------------------
// Whole runs.
// ---------------------------------------------------------------------------

struct RunOptions {
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> stop_after;
};

enum class RunStatus { completed, up_to_date, interrupted };

/// Validates before any compute. A directory holding a different
/// configuration is refused unless forced; the same configuration resumes or,
/// if complete and intact, is left untouched.
RunStatus run(ExperimentConfig config, const fs::path& out, const RunOptions& options = {});

/// Covers every field that affects training; the run name, the alignment
/// and scaling sections and (without eval.steps) the eval section are left
/// out, so changing those only redoes the analysis stages.
std::string training_digest(const ExperimentConfig& config);

/// Applies the overwrite policy to `out` and writes config.json. Returns
/// true when the directory already holds this exact, complete run.
bool prepare_run_dir(const ExperimentConfig& config, const fs::path& out, bool force);
bool run_complete(const fs::path& dir);

/// Completed run as read back from disk (MANIFEST verified first).
struct RunSummary {
    fs::path dir;
    ExperimentConfig config;
    trainer::RunRecord record;
    evaluator::EvalResult eval;
    nlohmann::json alignment;   // null when absent
    std::string manifest_digest;

    std::vector<std::string> languages() const;
    std::vector<double> marginal() const;
};
RunSummary load_run(const fs::path& dir);

/// Needs at least three monolingual reference runs (distinct token counts).
scaling::ScalingFit fit_from_runs(std::span<const RunSummary> references);

// ---------------------------------------------------------------------------
// Reports and sweeps.
// ---------------------------------------------------------------------------

enum class TeffMode { auto_, on, off };

struct ReportOptions {
    std::vector<fs::path> references;
    TeffMode teff = TeffMode::auto_;
};

struct ReportRow {
    std::string run;
    double tokens = 0;
    std::vector<std::string> languages;
    std::vector<double> probs, ppl;
    std::vector<std::optional<double>> teff;
    nlohmann::json alignment;
};

struct Report {
    std::vector<ReportRow> rows;
    /// "" for the shared cloned-mode fit, else the language name.
    std::map<std::string, scaling::ScalingFit> fits;

    std::string csv() const;
    nlohmann::json to_json() const;
};

Report build_report(std::span<const RunSummary> runs, std::span<const RunSummary> references, TeffMode teff);
/// report.csv, report.json, ppl.svg and teff.svg in `out`.
Report report(std::span<const fs::path> run_dirs, const fs::path& out, const ReportOptions& options = {});

struct SweepMember {
    std::string name;
    ExperimentConfig config;
};

/// Expands config.sweep: {"grids": [{"<dotted key>": [values...], ...}, ...]}
/// into one config per grid point.
std::vector<SweepMember> expand_sweep(const ExperimentConfig& config);

/// Runs every member under out/<name> (sharing one base vocabulary in
/// cloned mode), then writes the report into out.
Report sweep(const ExperimentConfig& config, const fs::path& out, const RunOptions& options = {});

}  // namespace xlab::pipeline
