#include "xlab/experiment.hpp"

#include <fstream>
#include <set>

namespace xlab::experiment {

namespace {

void check_keys(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ValidationError(section + " must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError("unknown key '" + key + "' in " + section);
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && !base.empty()) path = base / path;
    return path.lexically_normal();
}

std::vector<fs::path> resolve_all(const fs::path& base, const nlohmann::json& j, const std::string& field) {
    if (!j.is_array()) throw ValidationError(field + " must be a list of paths");
    std::vector<fs::path> out;
    for (const auto& p : j) out.push_back(resolve(base, p.get<std::string>()));
    return out;
}

nlohmann::json path_list(const std::vector<fs::path>& ps) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : ps) out.push_back(p.string());
    return out;
}

template <typename F>
auto wrap(const std::string& section, F&& f) {
    try {
        return f();
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception& e) {
        throw ValidationError(section + ": " + e.what());
    }
}

}  // namespace

int ExperimentConfig::n_languages() const {
    return tokenizer.mode == VocabMode::cloned ? tokenizer.languages : static_cast<int>(corpus.languages.size());
}

std::vector<std::string> ExperimentConfig::language_names() const {
    std::vector<std::string> out;
    if (tokenizer.mode == VocabMode::real) {
        for (const auto& l : corpus.languages) out.push_back(l.name);
    } else {
        for (int n = 0; n < tokenizer.languages; ++n) out.push_back("lang" + std::to_string(n));
    }
    return out;
}

void ExperimentConfig::validate() const {
    if (name.empty() || name.find_first_of("/\\") != std::string::npos) {
        throw ValidationError("name must be a non-empty string without path separators");
    }
    const bool cloned = tokenizer.mode == VocabMode::cloned;
    if (cloned) {
        if (corpus.paths.empty()) throw ValidationError("corpus.paths is empty");
        if (!corpus.languages.empty()) throw ValidationError("corpus.languages is only used with tokenizer.mode \"real\"");
        if (tokenizer.languages < 1) throw ValidationError("tokenizer.languages must be at least 1");
    } else {
        if (corpus.languages.empty()) throw ValidationError("tokenizer.mode \"real\" needs corpus.languages");
        if (!corpus.paths.empty()) throw ValidationError("corpus.paths is only used in cloned mode");
        std::set<std::string> names;
        for (const auto& l : corpus.languages) {
            if (l.name.empty() || !names.insert(l.name).second) {
                throw ValidationError("corpus.languages names must be unique and non-empty");
            }
            if (l.paths.empty()) throw ValidationError("corpus.languages." + l.name + ".paths is empty");
        }
        if (tokenizer.joint == tokenizer::JointVocabulary::Mode::anchored && corpus.languages.size() != 2) {
            throw ValidationError("tokenizer.joint \"anchored\" needs exactly two corpus.languages");
        }
    }
    const auto check_exists = [](const std::vector<fs::path>& ps, const std::string& field) {
        for (const auto& p : ps) {
            if (!fs::exists(p)) throw ValidationError(field + ": path does not exist: " + p.string());
        }
    };
    check_exists(corpus.paths, "corpus.paths");
    for (const auto& l : corpus.languages) check_exists(l.paths, "corpus.languages." + l.name + ".paths");
    if (!tokenizer.vocab_path.empty() && !fs::exists(tokenizer.vocab_path)) {
        throw ValidationError("tokenizer.vocab_path does not exist: " + tokenizer.vocab_path.string());
    }
    if (!(corpus.test_fraction > 0 && corpus.test_fraction < 1)) {
        throw ValidationError("corpus.test_fraction must be in (0, 1)");
    }

    if (policy.n_languages() != n_languages()) {
        throw ValidationError("policy has " + std::to_string(policy.n_languages()) + " languages but " +
                              (cloned ? "tokenizer.languages is " : "corpus.languages has ") +
                              std::to_string(n_languages()));
    }
    if (!(tokenizer.anchor_fraction >= 0 && tokenizer.anchor_fraction <= 1)) {
        throw ValidationError("tokenizer.anchor_fraction must be in [0, 1]");
    }
    if (!cloned && tokenizer.anchor_fraction != 0) {
        throw ValidationError("tokenizer.anchor_fraction applies to cloned mode; use tokenizer.joint for real languages");
    }
    if (tokenizer.vocab_size < 2) throw ValidationError("tokenizer.vocab_size must be at least 2");

    if (model.vocab_size != 0) {
        throw ValidationError("model.vocab_size is derived from tokenizer.vocab_size and must be left out");
    }
    if (!model.vocab_segments.empty()) throw ValidationError("model.vocab_segments is derived and must be left out");
    wrap("model", [&] {
        auto m = model;
        m.vocab_size = static_cast<int>(tokenizer.vocab_size);
        m.validate();
        return 0;
    });
    wrap("train", [&] {
        train.validate();
        return 0;
    });
    if (train.total_steps <= 0) throw ValidationError("train.total_steps must be positive");
    if (train.seq_len > model.max_seq_len) {
        throw ValidationError("train.seq_len (" + std::to_string(train.seq_len) + ") exceeds model.max_seq_len (" +
                              std::to_string(model.max_seq_len) + ")");
    }
    if (eval.window > static_cast<std::size_t>(model.max_seq_len)) {
        throw ValidationError("eval.window (" + std::to_string(eval.window) + ") exceeds model.max_seq_len (" +
                              std::to_string(model.max_seq_len) + ")");
    }
    if (eval.stride == 0 || eval.stride > eval.window) throw ValidationError("eval.stride must be in [1, eval.window]");
    for (auto s : eval.steps) {
        if (s < 0 || s > train.total_steps) throw ValidationError("eval.steps entries must be in [0, train.total_steps]");
    }
    if (align.enabled) {
        if (align.pair_len < 2 || align.pair_len > static_cast<std::size_t>(model.max_seq_len)) {
            throw ValidationError("align.pair_len must be in [2, model.max_seq_len]");
        }
        if (!cloned && align.parallel.size() != 2) {
            throw ValidationError("align.parallel needs two line-aligned files in real mode (or set align.enabled false)");
        }
        check_exists(align.parallel, "align.parallel");
    }
    if (!scaling.fit.empty() && !scaling.reference_runs.empty()) {
        throw ValidationError("give either scaling.fit or scaling.reference_runs, not both");
    }
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const fs::path& base) {
    check_keys(j, "config",
               {"name", "seed", "corpus", "tokenizer", "policy", "granularity", "model", "train", "eval", "align",
                "scaling", "sweep"});
    ExperimentConfig c;
    wrap("config", [&] {
        c.name = j.value("name", c.name);
        c.seed = j.value("seed", c.seed);

        if (j.contains("corpus")) {
            const auto& cj = j.at("corpus");
            check_keys(cj, "corpus", {"paths", "languages", "test_fraction", "split_seed"});
            if (cj.contains("paths")) c.corpus.paths = resolve_all(base, cj.at("paths"), "corpus.paths");
            if (cj.contains("languages")) {
                for (const auto& l : cj.at("languages")) {
                    check_keys(l, "corpus.languages", {"name", "paths"});
                    c.corpus.languages.push_back(
                        {l.at("name").get<std::string>(), resolve_all(base, l.at("paths"), "corpus.languages.paths")});
                }
            }
            c.corpus.test_fraction = cj.value("test_fraction", c.corpus.test_fraction);
            c.corpus.split_seed = cj.value("split_seed", c.corpus.split_seed);
        }

        if (j.contains("tokenizer")) {
            const auto& tj = j.at("tokenizer");
            check_keys(tj, "tokenizer",
                       {"mode", "vocab_size", "languages", "anchor_fraction", "anchor_selection", "anchor_seed", "joint",
                        "vocab_path"});
            const auto mode = tj.value("mode", std::string("cloned"));
            if (mode != "cloned" && mode != "real") throw ValidationError("tokenizer.mode must be cloned or real");
            c.tokenizer.mode = mode == "real" ? VocabMode::real : VocabMode::cloned;
            c.tokenizer.vocab_size = tj.value("vocab_size", c.tokenizer.vocab_size);
            c.tokenizer.languages = tj.value("languages", c.tokenizer.languages);
            c.tokenizer.anchor_fraction = tj.value("anchor_fraction", c.tokenizer.anchor_fraction);
            const auto sel = tj.value("anchor_selection", std::string("uniform"));
            if (sel != "uniform" && sel != "frequency_stratified") {
                throw ValidationError("tokenizer.anchor_selection must be uniform or frequency_stratified");
            }
            c.tokenizer.anchor_selection = sel == "uniform" ? tokenizer::AnchorSelection::uniform
                                                            : tokenizer::AnchorSelection::frequency_stratified;
            c.tokenizer.anchor_seed = tj.value("anchor_seed", c.tokenizer.anchor_seed);
            const auto joint = tj.value("joint", std::string("disjoint"));
            if (joint != "disjoint" && joint != "anchored") {
                throw ValidationError("tokenizer.joint must be disjoint or anchored");
            }
            c.tokenizer.joint = joint == "anchored" ? tokenizer::JointVocabulary::Mode::anchored
                                                    : tokenizer::JointVocabulary::Mode::disjoint;
            if (tj.contains("vocab_path") && !tj.at("vocab_path").get<std::string>().empty()) {
                c.tokenizer.vocab_path = resolve(base, tj.at("vocab_path").get<std::string>());
            }
        }

        if (j.contains("policy")) c.policy = wrap("policy", [&] { return mixer::MixPolicy::from_json(j.at("policy")); });
        const auto gran = j.value("granularity", std::string("sequence"));
        if (gran != "sequence" && gran != "document") throw ValidationError("granularity must be sequence or document");
        c.granularity = gran == "document" ? mixer::Granularity::document : mixer::Granularity::sequence;

        if (j.contains("model")) c.model = wrap("model", [&] { return model::ModelConfig::from_json(j.at("model")); });
        if (j.contains("train")) {
            if (j.at("train").contains("seed")) throw ValidationError("train.seed is set from the top-level seed");
            c.train = wrap("train", [&] { return trainer::TrainConfig::from_json(j.at("train")); });
        }

        if (j.contains("eval")) {
            const auto& ej = j.at("eval");
            check_keys(ej, "eval", {"steps", "window", "stride", "max_tokens"});
            c.eval.steps = ej.value("steps", c.eval.steps);
            c.eval.window = ej.value("window", c.eval.window);
            c.eval.stride = ej.value("stride", c.eval.stride);
            c.eval.max_tokens = ej.value("max_tokens", c.eval.max_tokens);
        }
        if (j.contains("align")) {
            const auto& aj = j.at("align");
            check_keys(aj, "align", {"enabled", "pairs", "pair_len", "gradient_pairs", "parallel"});
            c.align.enabled = aj.value("enabled", c.align.enabled);
            c.align.pairs = aj.value("pairs", c.align.pairs);
            c.align.pair_len = aj.value("pair_len", c.align.pair_len);
            c.align.gradient_pairs = aj.value("gradient_pairs", c.align.gradient_pairs);
            if (aj.contains("parallel")) c.align.parallel = resolve_all(base, aj.at("parallel"), "align.parallel");
        }
        if (j.contains("scaling")) {
            const auto& sj = j.at("scaling");
            check_keys(sj, "scaling", {"fit", "reference_runs"});
            if (sj.contains("fit") && !sj.at("fit").get<std::string>().empty()) {
                c.scaling.fit = resolve(base, sj.at("fit").get<std::string>());
            }
            if (sj.contains("reference_runs")) {
                c.scaling.reference_runs = resolve_all(base, sj.at("reference_runs"), "scaling.reference_runs");
            }
        }
        if (j.contains("sweep")) c.sweep = j.at("sweep");
        return 0;
    });
    c.train.seed = c.seed;
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j, fs::absolute(path).parent_path());
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : corpus.languages) langs.push_back({{"name", l.name}, {"paths", path_list(l.paths)}});
    auto train_j = train.to_json();
    train_j.erase("seed");
    nlohmann::json j = {
        {"name", name},
        {"seed", seed},
        {"corpus",
         {{"paths", path_list(corpus.paths)},
          {"languages", langs},
          {"test_fraction", corpus.test_fraction},
          {"split_seed", corpus.split_seed}}},
        {"tokenizer",
         {{"mode", tokenizer.mode == VocabMode::real ? "real" : "cloned"},
          {"vocab_size", tokenizer.vocab_size},
          {"languages", tokenizer.languages},
          {"anchor_fraction", tokenizer.anchor_fraction},
          {"anchor_selection",
           tokenizer.anchor_selection == tokenizer::AnchorSelection::uniform ? "uniform" : "frequency_stratified"},
          {"anchor_seed", tokenizer.anchor_seed},
          {"joint", tokenizer.joint == tokenizer::JointVocabulary::Mode::anchored ? "anchored" : "disjoint"},
          {"vocab_path", tokenizer.vocab_path.string()}}},
        {"policy", policy.to_json()},
        {"granularity", granularity == mixer::Granularity::document ? "document" : "sequence"},
        {"model", model.to_json()},
        {"train", train_j},
        {"eval",
         {{"steps", eval.steps}, {"window", eval.window}, {"stride", eval.stride}, {"max_tokens", eval.max_tokens}}},
        {"align",
         {{"enabled", align.enabled},
          {"pairs", align.pairs},
          {"pair_len", align.pair_len},
          {"gradient_pairs", align.gradient_pairs},
          {"parallel", path_list(align.parallel)}}},
        {"scaling", {{"fit", scaling.fit.string()}, {"reference_runs", path_list(scaling.reference_runs)}}},
    };
    if (!sweep.is_null()) j["sweep"] = sweep;
    return j;
}

std::string ExperimentConfig::digest() const { return to_hex(sha256(to_json().dump())); }

}  // namespace xlab::experiment
