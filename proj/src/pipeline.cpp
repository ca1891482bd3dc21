#include "xlab/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "xlab/svg.hpp"

namespace xlab::pipeline {

namespace {

constexpr const char* kManifest = "MANIFEST";
constexpr const char* kLock = ".lock";

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// Write-then-rename so an interrupted run never leaves a half-written file.
void write_text(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

bool dir_is_empty(const fs::path& dir) {
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().filename() != kLock) return false;
    }
    return true;
}

void clear_dir(const fs::path& dir) {
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().filename() != kLock) fs::remove_all(e.path());
    }
}

void check_stream(const corpus::TokenStream& s, const tokenizer::Vocabulary& v, const fs::path& path) {
    if (s.vocab_digest != v.digest()) {
        throw DigestError(path.string() + " was encoded with a different vocabulary");
    }
    s.validate(v.size());
}

// Cuts the stream after max_tokens ids; the last kept document may be partial.
void truncate_stream(corpus::TokenStream& s, std::size_t max_tokens) {
    if (max_tokens == 0 || s.size() <= max_tokens) return;
    std::size_t keep = 0;
    while (keep < s.n_documents() && s.doc_boundaries[keep] < max_tokens) ++keep;
    s.doc_boundaries.resize(keep);
    s.doc_boundaries.push_back(max_tokens);
    s.ids.resize(max_tokens);
}

std::vector<std::string> sorted_checkpoints(const fs::path& dir) {
    std::vector<std::string> names;
    const auto ck = dir / "checkpoints";
    if (!fs::exists(ck)) return names;
    for (const auto& e : fs::directory_iterator(ck)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && name.rfind("step-", 0) == 0 && e.path().extension() == ".xlck") {
            names.push_back(name);
        }
    }
    std::sort(names.begin(), names.end());   // zero-padded step numbers
    return names;
}

void prune_checkpoints(const fs::path& dir) {
    auto names = sorted_checkpoints(dir);
    if (names.size() < 2) return;
    names.pop_back();
    for (const auto& n : names) fs::remove(dir / "checkpoints" / n);
}

bool needs_alignment(const ExperimentConfig& c) { return c.align.enabled && c.n_languages() >= 2; }

// Training-relevant config fields; see training_digest.
nlohmann::json training_view(const ExperimentConfig& config) {
    auto j = config.to_json();
    j.erase("name");
    j.erase("align");
    j.erase("scaling");
    j.erase("sweep");
    if (config.eval.steps.empty()) j.erase("eval");   // eval settings only matter for in-training snapshots
    return j;
}

// Per-(i, j) mean cosine over hidden layers, row-major.
std::vector<double> hidden_weights(const model::ModelState<float>& state, std::span<const TokenId> a,
                                   std::span<const TokenId> b) {
    const auto ta = model::forward(state, a);
    const auto tb = model::forward(state, b);
    const auto d = static_cast<std::size_t>(state.config.d_model);
    std::vector<double> w(a.size() * b.size(), 0.0);
    for (std::size_t l = 0; l < ta.hidden.size(); ++l) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::span<const float> ra(ta.hidden[l].data() + i * d, d);
            for (std::size_t j = 0; j < b.size(); ++j) {
                const std::span<const float> rb(tb.hidden[l].data() + j * d, d);
                const double c = alignment::cosine(ra, rb);
                w[i * b.size() + j] += std::isnan(c) ? 0.0 : c / static_cast<double>(ta.hidden.size());
            }
        }
    }
    return w;
}

std::vector<scaling::ScalingFit> fits_from_file(const fs::path& path, const std::vector<std::string>& names,
                                                bool cloned) {
    const auto j = read_json(path);
    if (j.contains("a")) return {scaling::ScalingFit::from_json(j)};
    const auto& fits = j.contains("fits") ? j.at("fits") : j;
    if (cloned && fits.contains("")) return {scaling::ScalingFit::from_json(fits.at(""))};
    std::vector<scaling::ScalingFit> out;
    for (const auto& n : names) {
        if (!fits.contains(n)) throw ValidationError(path.string() + " has no scaling fit for language " + n);
        out.push_back(scaling::ScalingFit::from_json(fits.at(n)));
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bookkeeping.
// ---------------------------------------------------------------------------

RunLock::RunLock(const fs::path& dir) : path_(dir / kLock) {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) {
            throw Error(dir.string() + " is locked by another writer (" + path_.string() +
                        "); remove the lock file if no other process is running");
        }
        throw Error("cannot create " + path_.string() + ": " + std::strerror(errno));
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto got = static_cast<std::size_t>(in.gcount());
        if (got > 0) h.update(std::string_view(buf.data(), got));
    }
    return to_hex(h.finish());
}

namespace {

std::map<std::string, std::string> scan_files(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir).generic_string();
        if (rel == kManifest || rel == kLock) continue;
        out[rel] = file_sha256(e.path());
    }
    return out;
}

}  // namespace

void write_manifest(const fs::path& dir) {
    std::string text;
    for (const auto& [rel, digest] : scan_files(dir)) text += digest + "  " + rel + "\n";
    write_text(dir / kManifest, text);
}

std::map<std::string, std::string> read_manifest(const fs::path& dir) {
    std::ifstream in(dir / kManifest);
    if (!in) throw std::invalid_argument(dir.string() + " has no MANIFEST");
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.size() < 67 || line.compare(64, 2, "  ") != 0) {
            throw FormatError("malformed MANIFEST line in " + dir.string() + ": " + line);
        }
        out[line.substr(66)] = line.substr(0, 64);
    }
    return out;
}

void verify_manifest(const fs::path& dir) {
    const auto listed = read_manifest(dir);
    const auto present = scan_files(dir);
    for (const auto& [rel, digest] : listed) {
        const auto it = present.find(rel);
        if (it == present.end()) throw DigestError(dir.string() + ": " + rel + " is listed in MANIFEST but missing");
        if (it->second != digest) throw DigestError(dir.string() + ": " + rel + " does not match its MANIFEST digest");
    }
    for (const auto& [rel, _] : present) {
        if (!listed.count(rel)) throw DigestError(dir.string() + ": " + rel + " is not listed in MANIFEST");
    }
}

// ---------------------------------------------------------------------------
// Context.
// ---------------------------------------------------------------------------

std::unique_ptr<mixer::SequenceSource> RunContext::make_source() const {
    if (cv) {
        return std::make_unique<mixer::ClonedSource>(train.at(0), *cv, config.policy, config.source_seed(),
                                                     config.granularity);
    }
    std::vector<const corpus::TokenStream*> streams;
    for (const auto& s : train) streams.push_back(&s);
    return std::make_unique<mixer::BilingualSource>(std::move(streams), *joint, config.policy, config.source_seed());
}

evaluator::EvalResult RunContext::evaluate(const model::ModelState<float>& state) const {
    const evaluator::WindowParams p{config.eval.window, config.eval.stride};
    auto result = cv ? evaluator::per_language_eval(state, *cv, test.at(0), p)
                     : evaluator::per_language_eval(state, *joint, std::span<const corpus::TokenStream>(test), p);
    const auto names = config.language_names();
    for (std::size_t i = 0; i < result.languages.size(); ++i) result.languages[i].language = names.at(i);
    return result;
}

void tokenize_stage(const ExperimentConfig& config, const fs::path& dir) {
    const auto& tc = config.tokenizer;
    if (tc.mode == experiment::VocabMode::cloned) {
        const auto vocab_file = dir / "vocab" / "base.vocab";
        const auto cloned_file = dir / "vocab" / "cloned.json";
        const auto train_file = dir / "data" / "train.xlts", test_file = dir / "data" / "test.xlts";
        if (fs::exists(vocab_file) && fs::exists(cloned_file) && fs::exists(train_file) && fs::exists(test_file)) return;

        log_info("ingesting " + std::to_string(config.corpus.paths.size()) + " corpus path(s)");
        const auto store = corpus::ingest(config.corpus.paths);
        auto [train, test] = corpus::split(store, config.corpus.test_fraction, config.corpus.split_seed);
        tokenizer::Vocabulary vocab;
        if (!tc.vocab_path.empty()) {
            vocab = tokenizer::load_vocabulary(tc.vocab_path);
            if (vocab.size() != tc.vocab_size) {
                throw ValidationError("tokenizer.vocab_path holds " + std::to_string(vocab.size()) +
                                      " pieces but tokenizer.vocab_size is " + std::to_string(tc.vocab_size));
            }
        } else {
            log_info("training BPE vocabulary of " + std::to_string(tc.vocab_size));
            vocab = tokenizer::train_bpe(train, tc.vocab_size);
        }
        const auto train_ids = tokenizer::encode_store(vocab, train);
        const auto test_ids = tokenizer::encode_store(vocab, test);
        const auto freqs = tokenizer::id_counts(train_ids, vocab.size());
        const auto cv = tokenizer::clone_vocab(vocab, tc.languages, tc.anchor_fraction, tc.anchor_seed,
                                               tc.anchor_selection, freqs);
        fs::create_directories(dir / "vocab");
        fs::create_directories(dir / "data");
        tokenizer::save_vocabulary(vocab_file, vocab);
        write_json(cloned_file, {{"n_languages", cv.n_languages()},
                                 {"anchors", cv.anchors()},
                                 {"base_digest", to_hex(vocab.digest())},
                                 {"size", cv.size()}});
        corpus::write_token_stream(train_file, train_ids);
        corpus::write_token_stream(test_file, test_ids);
        log_info("encoded " + std::to_string(train_ids.size()) + " train and " + std::to_string(test_ids.size()) +
                 " test tokens");
        return;
    }

    bool done = fs::exists(dir / "vocab" / "joint.json");
    for (const auto& l : config.corpus.languages) {
        done = done && fs::exists(dir / "vocab" / (l.name + ".vocab")) &&
               fs::exists(dir / "data" / ("train_" + l.name + ".xlts")) &&
               fs::exists(dir / "data" / ("test_" + l.name + ".xlts"));
    }
    if (done) return;
    fs::create_directories(dir / "vocab");
    fs::create_directories(dir / "data");
    for (const auto& l : config.corpus.languages) {
        log_info("language " + l.name + ": ingesting and training BPE");
        const auto store = corpus::ingest(l.paths);
        auto [train, test] = corpus::split(store, config.corpus.test_fraction, config.corpus.split_seed);
        const auto vocab = tokenizer::train_bpe(train, tc.vocab_size);
        tokenizer::save_vocabulary(dir / "vocab" / (l.name + ".vocab"), vocab);
        corpus::write_token_stream(dir / "data" / ("train_" + l.name + ".xlts"), tokenizer::encode_store(vocab, train));
        corpus::write_token_stream(dir / "data" / ("test_" + l.name + ".xlts"), tokenizer::encode_store(vocab, test));
    }
    write_json(dir / "vocab" / "joint.json",
               {{"mode", tc.joint == tokenizer::JointVocabulary::Mode::anchored ? "anchored" : "disjoint"}});
}

RunContext load_context(const fs::path& dir) {
    RunContext ctx;
    ctx.dir = dir;
    ctx.config = ExperimentConfig::from_json(read_json(dir / "config.json"));
    ctx.model_config = ctx.config.model;
    if (ctx.config.tokenizer.mode == experiment::VocabMode::cloned) {
        auto base = tokenizer::load_vocabulary(dir / "vocab" / "base.vocab");
        const auto cj = read_json(dir / "vocab" / "cloned.json");
        for (const char* split : {"train", "test"}) {
            const auto path = dir / "data" / (std::string(split) + ".xlts");
            auto s = corpus::read_token_stream(path);
            check_stream(s, base, path);
            (split[1] == 'r' ? ctx.train : ctx.test).push_back(std::move(s));
        }
        ctx.cv.emplace(std::move(base), cj.at("n_languages").get<int>(), cj.at("anchors").get<std::vector<TokenId>>());
        ctx.model_config.vocab_size = static_cast<int>(ctx.cv->size());
        ctx.model_config.vocab_segments = ctx.cv->segments();
    } else {
        for (const auto& l : ctx.config.corpus.languages) {
            ctx.vocabs.push_back(tokenizer::load_vocabulary(dir / "vocab" / (l.name + ".vocab")));
            for (const char* split : {"train_", "test_"}) {
                const auto path = dir / "data" / (split + l.name + ".xlts");
                auto s = corpus::read_token_stream(path);
                check_stream(s, ctx.vocabs.back(), path);
                (split[1] == 'r' ? ctx.train : ctx.test).push_back(std::move(s));
            }
        }
        if (ctx.config.tokenizer.joint == tokenizer::JointVocabulary::Mode::anchored) {
            ctx.joint = tokenizer::anchored_joint(tokenizer::merge_vocabs(ctx.vocabs.at(0), ctx.vocabs.at(1)));
        } else {
            ctx.joint = tokenizer::disjoint_joint(std::span<const tokenizer::Vocabulary>(ctx.vocabs));
        }
        ctx.model_config.vocab_size = static_cast<int>(ctx.joint->size);
    }
    for (auto& s : ctx.test) truncate_stream(s, ctx.config.eval.max_tokens);
    return ctx;
}

// ---------------------------------------------------------------------------
// Stages.
// ---------------------------------------------------------------------------

std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
    const auto names = sorted_checkpoints(dir);
    if (names.empty()) return std::nullopt;
    return dir / "checkpoints" / names.back();
}

fs::path final_checkpoint(const fs::path& dir) {
    const auto latest = latest_checkpoint(dir);
    if (!latest) throw std::invalid_argument(dir.string() + " has no checkpoint; run training first");
    return *latest;
}

bool train_stage(const RunContext& ctx, const StageOptions& options) {
    const auto& cfg = ctx.config;
    const auto ckdir = ctx.dir / "checkpoints";
    fs::create_directories(ckdir);
    auto source = ctx.make_source();
    trainer::TrainHooks hooks;
    hooks.checkpoint_dir = ckdir;
    hooks.stop_after = options.stop_after;
    hooks.eval_steps = cfg.eval.steps;
    hooks.eval = [&ctx](const model::ModelState<float>& state, std::int64_t) { return ctx.evaluate(state).ppl(); };
    const auto digest = training_digest(cfg);

    const auto latest = latest_checkpoint(ctx.dir);
    if (latest) log_info("resuming from " + latest->filename().string());
    const auto result = latest ? trainer::resume(*latest, *source, cfg.train, hooks, digest)
                               : trainer::train(model::init<float>(ctx.model_config, cfg.init_seed()), *source,
                                                cfg.train, hooks, digest);
    if (result.record.steps < cfg.train.total_steps) return false;
    write_json(ctx.dir / "record.json", result.record.to_json());
    write_text(ctx.dir / "losses.csv", result.record.losses_csv());
    return true;
}

evaluator::EvalResult eval_stage(const RunContext& ctx, std::optional<fs::path> checkpoint) {
    const auto path = checkpoint ? *checkpoint : final_checkpoint(ctx.dir);
    const auto state = trainer::load_model(path);
    if (state.config != ctx.model_config) {
        throw ValidationError(path.string() + " does not match the run's model configuration");
    }
    auto result = ctx.evaluate(state);
    write_json(ctx.dir / "eval.json", result.to_json());
    write_text(ctx.dir / "eval.csv", result.csv());
    return result;
}

scaling::EfficiencyReport efficiency_stage(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    const auto record = trainer::RunRecord::from_json(read_json(ctx.dir / "record.json"));
    const auto eval = evaluator::EvalResult::from_json(read_json(ctx.dir / "eval.json"));
    const auto names = cfg.language_names();
    const bool cloned = cfg.tokenizer.mode == experiment::VocabMode::cloned;
    std::vector<double> tokens(record.tokens.begin(), record.tokens.end());
    const auto ppl = eval.ppl();

    std::vector<scaling::ScalingFit> fits;
    std::string source = "none";
    if (!cfg.scaling.fit.empty()) {
        fits = fits_from_file(cfg.scaling.fit, names, cloned);
        source = "fit";
    } else if (!cfg.scaling.reference_runs.empty()) {
        std::vector<RunSummary> refs;
        for (const auto& d : cfg.scaling.reference_runs) refs.push_back(load_run(d));
        if (cloned) {
            fits.push_back(fit_from_runs(refs));
        } else {
            for (const auto& n : names) {
                std::vector<RunSummary> mine;
                for (const auto& r : refs) {
                    if (r.languages() == std::vector<std::string>{n}) mine.push_back(r);
                }
                fits.push_back(fit_from_runs(mine));
            }
        }
        source = "reference_runs";
    }

    scaling::EfficiencyReport report;
    if (!fits.empty()) {
        report = scaling::efficiency_report(cfg.name, fits, tokens, ppl, names);
    } else {
        // Without a fit only a monolingual run has a defined TEff: it is its
        // own reference, so TEff is 1.
        report.run = cfg.name;
        for (double t : tokens) report.total_tokens += t;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        for (std::size_t i = 0; i < names.size(); ++i) {
            report.probs.push_back(report.total_tokens > 0 ? tokens[i] / report.total_tokens : 0.0);
            scaling::LanguageEfficiency e;
            e.language = names[i];
            e.tokens = tokens[i];
            e.ppl = ppl[i];
            const bool self = names.size() == 1;
            e.mlte = self ? tokens[i] : nan;
            e.mlpe = self ? ppl[i] : nan;
            e.teff = self ? 1.0 : nan;
            report.languages.push_back(e);
        }
        if (names.size() == 1) source = "self";
    }
    nlohmann::json fj = nlohmann::json::array();
    for (const auto& f : fits) fj.push_back(f.to_json());
    write_json(ctx.dir / "efficiency.json", {{"report", report.to_json()}, {"fit_source", source}, {"fits", fj}});
    write_text(ctx.dir / "efficiency.csv", scaling::efficiency_csv(std::span<const scaling::EfficiencyReport>(&report, 1)));
    return report;
}

nlohmann::json align_stage(const RunContext& ctx, std::size_t show_pairs, std::string* text) {
    const auto& cfg = ctx.config;
    if (cfg.n_languages() < 2) throw ValidationError("alignment needs at least two languages");
    const auto state = trainer::load_model(final_checkpoint(ctx.dir));
    const auto names = cfg.language_names();
    nlohmann::json out;
    out["languages"] = {names[0], names[1]};

    std::vector<alignment::ParallelPair> pairs;
    std::vector<std::vector<std::string>> pieces_a, pieces_b;
    alignment::Matching matching = alignment::Matching::positional;
    if (ctx.cv) {
        const auto& cv = *ctx.cv;
        const auto freqs = tokenizer::id_counts(ctx.train.at(0), cv.base().size());
        if (cv.n_duplicated() > 0) {
            out["embedding"] = alignment::embedding_similarity(state, cv, freqs, cfg.seed).to_json();
        } else {
            out["embedding"] = nullptr;
        }
        const auto& test = ctx.test.at(0);
        for (std::size_t d = 0; d < test.n_documents() && pairs.size() < cfg.align.pairs; ++d) {
            const auto doc = test.document(d);
            for (std::size_t at = 0; at + 2 <= doc.size() && pairs.size() < cfg.align.pairs; at += cfg.align.pair_len) {
                const auto slice = doc.subspan(at, std::min(cfg.align.pair_len, doc.size() - at));
                pairs.push_back(alignment::cloned_pair(cv, slice, 0, 1));
                std::vector<std::string> p;
                for (TokenId id : slice) p.push_back(cv.base().piece(id));
                pieces_a.push_back(p);
                pieces_b.push_back(std::move(p));
            }
        }
    } else {
        out["embedding"] = nullptr;
        matching = alignment::Matching::max_weight;
        std::ifstream fa(cfg.align.parallel.at(0)), fb(cfg.align.parallel.at(1));
        if (!fa || !fb) throw std::invalid_argument("cannot open align.parallel files");
        std::string la, lb;
        while (pairs.size() < cfg.align.pairs && std::getline(fa, la) && std::getline(fb, lb)) {
            auto ia = tokenizer::encode(ctx.vocabs.at(0), la);
            auto ib = tokenizer::encode(ctx.vocabs.at(1), lb);
            ia.resize(std::min(ia.size(), cfg.align.pair_len));
            ib.resize(std::min(ib.size(), cfg.align.pair_len));
            if (ia.size() < 2 || ib.size() < 2) continue;
            std::vector<std::string> pa, pb;
            for (TokenId id : ia) pa.push_back(ctx.vocabs[0].piece(id));
            for (TokenId id : ib) pb.push_back(ctx.vocabs[1].piece(id));
            pairs.push_back({ctx.joint->to_joint(0, ia), ctx.joint->to_joint(1, ib), alignment::ParallelPair::Mode::real});
            pieces_a.push_back(std::move(pa));
            pieces_b.push_back(std::move(pb));
        }
    }
    if (pairs.empty()) throw ValidationError("no parallel pairs available for alignment");

    const std::span<const alignment::ParallelPair> ps(pairs);
    const auto table = alignment::hidden_similarity(state, ps, matching);
    out["hidden"] = table.to_json();
    out["hidden"]["matching"] = matching == alignment::Matching::positional ? "positional" : "max_weight";
    const auto n_grad = std::min(cfg.align.gradient_pairs, pairs.size());
    out["gradient"] = n_grad > 0 ? alignment::gradient_similarity(state, ps.first(n_grad)).to_json() : nlohmann::json();
    write_json(ctx.dir / "alignment.json", out);
    const std::vector<std::pair<std::string, alignment::HiddenTable>> rows = {{cfg.name, table}};
    write_text(ctx.dir / "hidden.csv", alignment::hidden_csv(rows));

    if (text != nullptr) {
        text->clear();
        for (std::size_t k = 0; k < std::min(show_pairs, pairs.size()); ++k) {
            const auto& p = pairs[k];
            const auto w = hidden_weights(state, p.seq_a, p.seq_b);
            const auto m = alignment::max_weight_matching(w, p.seq_a.size(), p.seq_b.size());
            *text += "# pair " + std::to_string(k) + "\n";
            *text += alignment::alignment_text(pieces_a[k], pieces_b[k], m, w, p.seq_b.size());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Runs.
// ---------------------------------------------------------------------------

std::string training_digest(const ExperimentConfig& config) { return to_hex(sha256(training_view(config).dump())); }

bool run_complete(const fs::path& dir) {
    if (!fs::exists(dir / "config.json")) return false;
    const auto cfg = ExperimentConfig::from_json(read_json(dir / "config.json"));
    for (const char* f : {"record.json", "eval.json", "efficiency.json", kManifest}) {
        if (!fs::exists(dir / f)) return false;
    }
    if (needs_alignment(cfg) && !fs::exists(dir / "alignment.json")) return false;
    return latest_checkpoint(dir).has_value();
}

bool prepare_run_dir(const ExperimentConfig& config, const fs::path& out, bool force) {
    const auto cfg_path = out / "config.json";
    if (fs::exists(cfg_path)) {
        const auto existing = ExperimentConfig::from_json(read_json(cfg_path));
        if (!force) {
            if (existing.digest() == config.digest() && run_complete(out)) {
                verify_manifest(out);
                return true;
            }
            if (training_digest(existing) != training_digest(config)) {
                throw ValidationError(out.string() +
                                      " holds a run with a different configuration; use --force to replace it");
            }
            // Same training setup: keep vocab, data and checkpoints, redo the rest.
            for (const char* f : {kManifest, "eval.json", "eval.csv", "efficiency.json", "efficiency.csv",
                                  "alignment.json", "hidden.csv"}) {
                fs::remove(out / f);
            }
        } else {
            clear_dir(out);
        }
    } else if (!dir_is_empty(out)) {
        throw ValidationError(out.string() + " is not empty and holds no run; refusing to write into it");
    }
    write_json(cfg_path, config.to_json());
    return false;
}

RunStatus run(ExperimentConfig config, const fs::path& out, const RunOptions& options) {
    if (options.seed) {
        config.seed = *options.seed;
        config.train.seed = *options.seed;
    }
    config.validate();
    RunLock lock(out);
    if (prepare_run_dir(config, out, options.force)) {
        log_info(out.string() + " is up to date");
        return RunStatus::up_to_date;
    }
    tokenize_stage(config, out);
    const auto ctx = load_context(out);
    if (!train_stage(ctx, {options.stop_after})) {
        log_info("stopped after " + std::to_string(*options.stop_after) + " steps");
        return RunStatus::interrupted;
    }
    eval_stage(ctx);
    efficiency_stage(ctx);
    if (needs_alignment(config)) align_stage(ctx);
    prune_checkpoints(out);
    write_manifest(out);
    return RunStatus::completed;
}

std::vector<std::string> RunSummary::languages() const {
    std::vector<std::string> out;
    for (const auto& l : eval.languages) out.push_back(l.language);
    return out;
}

std::vector<double> RunSummary::marginal() const { return mixer::marginal(config.policy); }

RunSummary load_run(const fs::path& dir) {
    verify_manifest(dir);
    RunSummary r;
    r.dir = dir;
    r.config = ExperimentConfig::from_json(read_json(dir / "config.json"));
    r.record = trainer::RunRecord::from_json(read_json(dir / "record.json"));
    r.eval = evaluator::EvalResult::from_json(read_json(dir / "eval.json"));
    if (fs::exists(dir / "alignment.json")) r.alignment = read_json(dir / "alignment.json");
    r.manifest_digest = file_sha256(dir / kManifest);
    return r;
}

scaling::ScalingFit fit_from_runs(std::span<const RunSummary> references) {
    std::vector<scaling::ScalingPoint> points;
    for (const auto& r : references) {
        if (r.eval.languages.size() != 1) {
            throw ValidationError(r.dir.string() + " is not a monolingual run and cannot serve as a scaling reference");
        }
        double t = 0;
        for (auto n : r.record.tokens) t += static_cast<double>(n);
        points.push_back({t, r.eval.languages[0].ppl});
    }
    std::set<double> distinct;
    for (const auto& p : points) distinct.insert(p.tokens);
    if (distinct.size() < 3) {
        throw ValidationError("TEff needs at least 3 monolingual reference runs with distinct token counts to fit "
                              "the scaling law; got " + std::to_string(distinct.size()));
    }
    return scaling::fit_power_law(points);
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> column_languages(const std::vector<ReportRow>& rows) {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        for (const auto& l : r.languages) {
            if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
        }
    }
    return out;
}

std::string fit_key(const RunSummary& r, std::size_t language) {
    return r.config.tokenizer.mode == experiment::VocabMode::cloned ? std::string() : r.languages().at(language);
}

double main_probability(const ReportRow& r) { return *std::max_element(r.probs.begin(), r.probs.end()); }

}  // namespace

std::string Report::csv() const {
    const auto langs = column_languages(rows);
    std::string out = "run,tokens";
    for (const char* prefix : {"p_", "ppl_", "teff_"}) {
        for (const auto& l : langs) out += std::string(",") + prefix + l;
    }
    out += "\n";
    for (const auto& r : rows) {
        out += r.run + "," + num(r.tokens);
        std::vector<std::string> p(langs.size()), ppl(langs.size()), teff(langs.size());
        for (std::size_t i = 0; i < r.languages.size(); ++i) {
            const auto k = static_cast<std::size_t>(std::find(langs.begin(), langs.end(), r.languages[i]) - langs.begin());
            p[k] = num(r.probs[i]);
            ppl[k] = num(r.ppl[i]);
            if (r.teff[i]) teff[k] = num(*r.teff[i]);
        }
        for (const auto* col : {&p, &ppl, &teff}) {
            for (const auto& v : *col) out += "," + v;
        }
        out += "\n";
    }
    return out;
}

nlohmann::json Report::to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json langs = nlohmann::json::array();
        for (std::size_t i = 0; i < r.languages.size(); ++i) {
            nlohmann::json teff = nullptr;
            if (r.teff[i] && std::isfinite(*r.teff[i])) teff = *r.teff[i];
            langs.push_back({{"language", r.languages[i]}, {"p", r.probs[i]}, {"ppl", r.ppl[i]}, {"teff", teff}});
        }
        rj.push_back({{"run", r.run}, {"tokens", r.tokens}, {"languages", langs}, {"alignment", r.alignment}});
    }
    nlohmann::json fj = nlohmann::json::object();
    for (const auto& [k, f] : fits) fj[k] = f.to_json();
    return {{"rows", rj}, {"fits", fj}};
}

Report build_report(std::span<const RunSummary> runs, std::span<const RunSummary> references, TeffMode teff) {
    Report report;

    if (teff != TeffMode::off) {
        // Reference pool: explicit references plus monolingual runs in the report.
        std::map<std::string, std::vector<RunSummary>> pool;
        std::set<std::string> seen;
        const auto add = [&](const RunSummary& r) {
            if (r.eval.languages.size() != 1) return;
            if (!seen.insert(fs::weakly_canonical(r.dir).string()).second) return;
            pool[fit_key(r, 0)].push_back(r);
        };
        for (const auto& r : references) {
            if (r.eval.languages.size() != 1) {
                throw ValidationError(r.dir.string() + " is not a monolingual run and cannot serve as a reference");
            }
            add(r);
        }
        for (const auto& r : runs) add(r);
        std::set<std::string> wanted;
        for (const auto& r : runs) {
            if (r.eval.languages.size() < 2) continue;
            for (std::size_t i = 0; i < r.eval.languages.size(); ++i) wanted.insert(fit_key(r, i));
        }
        for (const auto& key : wanted) {
            const auto it = pool.find(key);
            const std::span<const RunSummary> refs =
                it == pool.end() ? std::span<const RunSummary>() : std::span<const RunSummary>(it->second);
            try {
                report.fits.emplace(key, fit_from_runs(refs));
            } catch (const Error& e) {
                if (teff == TeffMode::on) throw;
                log_warning(std::string("TEff left blank: ") + e.what());
            }
        }
    }

    for (const auto& r : runs) {
        ReportRow row;
        row.run = r.config.name;
        row.languages = r.languages();
        row.probs = r.marginal();
        row.ppl = r.eval.ppl();
        for (auto t : r.record.tokens) row.tokens += static_cast<double>(t);
        row.alignment = r.alignment;
        for (std::size_t i = 0; i < row.languages.size(); ++i) {
            if (teff == TeffMode::off) {
                row.teff.emplace_back();
            } else if (row.languages.size() == 1) {
                row.teff.emplace_back(1.0);
            } else if (const auto it = report.fits.find(fit_key(r, i)); it != report.fits.end()) {
                const double t = static_cast<double>(r.record.tokens[i]);
                const double m = row.ppl[i] > it->second.c ? scaling::mlte(it->second, row.ppl[i]).tokens
                                                           : std::numeric_limits<double>::infinity();
                row.teff.emplace_back(scaling::teff(m, t));
            } else {
                row.teff.emplace_back();
            }
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

Report report(std::span<const fs::path> run_dirs, const fs::path& out, const ReportOptions& options) {
    if (run_dirs.empty()) throw std::invalid_argument("report needs at least one run directory");
    std::vector<RunSummary> runs, refs;
    for (const auto& d : run_dirs) runs.push_back(load_run(d));
    for (const auto& d : options.references) refs.push_back(load_run(d));
    auto rep = build_report(runs, refs, options.teff);

    fs::create_directories(out);
    write_text(out / "report.csv", rep.csv());
    write_json(out / "report.json", rep.to_json());

    const auto langs = column_languages(rep.rows);
    std::vector<svg::Series> ppl_series, teff_series;
    for (const auto& l : langs) {
        svg::Series sp{l, {}}, st{l, {}};
        for (const auto& r : rep.rows) {
            if (r.languages.size() < 2) continue;
            const auto it = std::find(r.languages.begin(), r.languages.end(), l);
            if (it == r.languages.end()) continue;
            const auto i = static_cast<std::size_t>(it - r.languages.begin());
            const double x = main_probability(r);
            sp.points.emplace_back(x, r.ppl[i]);
            if (r.teff[i] && std::isfinite(*r.teff[i])) st.points.emplace_back(x, *r.teff[i]);
        }
        ppl_series.push_back(std::move(sp));
        teff_series.push_back(std::move(st));
    }
    write_text(out / "ppl.svg", svg::line_chart("Perplexity by imbalance", "main-language probability", "PPL",
                                                ppl_series));
    write_text(out / "teff.svg", svg::line_chart("Token efficiency by imbalance", "main-language probability", "TEff",
                                                 teff_series));
    return rep;
}

// ---------------------------------------------------------------------------
// Sweeps.
// ---------------------------------------------------------------------------

namespace {

std::string name_part(const std::string& key, const nlohmann::json& value) {
    const auto dot = key.rfind('.');
    std::string label = key.substr(dot == std::string::npos ? 0 : dot + 1) + "-";
    const std::string v = value.is_string() ? value.get<std::string>() : value.dump();
    for (char c : v) {
        const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-';
        if (keep) {
            label += c;
        } else if (label.back() != '-') {
            label += '-';
        }
    }
    while (label.size() > 1 && label.back() == '-') label.pop_back();
    return label;
}

void set_dotted(nlohmann::json& j, const std::string& key, const nlohmann::json& value) {
    nlohmann::json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i])) {
            throw ValidationError("sweep key '" + key + "' does not name a config field");
        }
        node = &(*node)[parts[i]];
    }
    *node = value;
}

}  // namespace

std::vector<SweepMember> expand_sweep(const ExperimentConfig& config) {
    if (!config.sweep.is_object() || !config.sweep.contains("grids") || !config.sweep.at("grids").is_array()) {
        throw ValidationError("sweep must be an object with a \"grids\" list");
    }
    for (const auto& [k, _] : config.sweep.items()) {
        if (k != "grids") throw ValidationError("unknown key '" + k + "' in sweep");
    }
    auto base = config.to_json();
    base.erase("sweep");
    std::vector<SweepMember> members;
    std::set<std::string> names;
    for (const auto& grid : config.sweep.at("grids")) {
        if (!grid.is_object() || grid.empty()) throw ValidationError("each sweep grid must be a non-empty object");
        std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;
        for (const auto& [k, values] : grid.items()) {
            if (!values.is_array() || values.empty()) throw ValidationError("sweep values for '" + k + "' must be a list");
            axes.emplace_back(k, std::vector<nlohmann::json>(values.begin(), values.end()));
        }
        std::vector<std::size_t> idx(axes.size(), 0);
        while (true) {
            auto j = base;
            std::string name;
            for (std::size_t a = 0; a < axes.size(); ++a) {
                set_dotted(j, axes[a].first, axes[a].second[idx[a]]);
                name += (name.empty() ? "" : "_") + name_part(axes[a].first, axes[a].second[idx[a]]);
            }
            j["name"] = name;
            if (!names.insert(name).second) throw ValidationError("sweep produces the run name '" + name + "' twice");
            members.push_back({name, ExperimentConfig::from_json(j)});
            std::size_t a = 0;
            while (a < axes.size() && ++idx[a] == axes[a].second.size()) idx[a++] = 0;
            if (a == axes.size()) break;
        }
    }
    return members;
}

Report sweep(const ExperimentConfig& config, const fs::path& out_arg, const RunOptions& options) {
    // Member configs record the shared vocabulary path; keep it independent of the working directory.
    const auto out = fs::absolute(out_arg).lexically_normal();
    auto base = config;
    if (options.seed) {
        base.seed = *options.seed;
        base.train.seed = *options.seed;
    }
    auto members = expand_sweep(base);
    for (const auto& m : members) {
        try {
            m.config.validate();
        } catch (const ValidationError& e) {
            throw ValidationError("sweep run " + m.name + ": " + e.what());
        }
    }
    RunLock lock(out);

    // Cloned runs over the same corpus share one base vocabulary.
    for (auto& m : members) {
        auto& tc = m.config.tokenizer;
        if (tc.mode != experiment::VocabMode::cloned || !tc.vocab_path.empty()) continue;
        const nlohmann::json key = {{"corpus", m.config.to_json().at("corpus")}, {"vocab_size", tc.vocab_size}};
        const auto dir = out / "_tokenizer" / to_hex(sha256(key.dump())).substr(0, 16);
        const auto path = dir / "base.vocab";
        if (!fs::exists(path)) {
            log_info("training shared BPE vocabulary in " + dir.string());
            const auto store = corpus::ingest(m.config.corpus.paths);
            const auto [train, test] = corpus::split(store, m.config.corpus.test_fraction, m.config.corpus.split_seed);
            const auto vocab = tokenizer::train_bpe(train, tc.vocab_size);
            write_json(dir / "key.json", key);
            tokenizer::save_vocabulary(path, vocab);
        }
        tc.vocab_path = path;
    }

    std::vector<fs::path> dirs;
    RunOptions sub;
    sub.force = options.force;
    for (std::size_t i = 0; i < members.size(); ++i) {
        log_info("sweep run " + std::to_string(i + 1) + "/" + std::to_string(members.size()) + ": " + members[i].name);
        dirs.push_back(out / members[i].name);
        run(members[i].config, dirs.back(), sub);
    }
    return report(dirs, out, {});
}

}  // namespace xlab::pipeline
