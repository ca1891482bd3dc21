// xlab: tokenize, train, evaluate, fit, align, report and sweep experiment runs.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "xlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace xlab;

namespace {

std::vector<scaling::ScalingPoint> read_points(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open " + path.string());
    std::vector<scaling::ScalingPoint> points;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        double t = 0, p = 0;
        if (!(ss >> t >> p)) {
            if (points.empty()) continue;   // header
            throw FormatError(path.string() + ": expected 'tokens,ppl' in line: " + line);
        }
        points.push_back({t, p});
    }
    return points;
}

void print_fit(const std::string& label, const scaling::ScalingFit& f) {
    std::printf("%sppl = %.6g * t^-%.6g + %.6g   (rms log residual %.3g, t in [%.4g, %.4g])\n", label.c_str(), f.a,
                f.b, f.c, f.residual, f.t_min, f.t_max);
}

pipeline::RunOptions run_options(bool force, const std::optional<std::uint64_t>& seed,
                                 const std::optional<std::int64_t>& stop_after) {
    pipeline::RunOptions o;
    o.force = force;
    o.seed = seed;
    o.stop_after = stop_after;
    return o;
}

experiment::ExperimentConfig load_validated(const fs::path& config_path, const std::optional<std::uint64_t>& seed) {
    auto config = experiment::ExperimentConfig::load(config_path);
    if (seed) {
        config.seed = *seed;
        config.train.seed = *seed;
    }
    config.validate();
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Controlled multilingual language-model experiments"};
    app.require_subcommand(1);

    fs::path config_path, out;
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> stop_after;

    const auto add_common = [&](CLI::App* sub, bool with_config) {
        if (with_config) sub->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "Output directory")->required();
    };

    auto* run_cmd = app.add_subcommand("run", "Full pipeline: tokenize, train, eval, efficiency, align");
    add_common(run_cmd, true);
    run_cmd->add_option("--seed", seed, "Override the config seed");
    run_cmd->add_flag("--force", force, "Replace a run with a different configuration");
    run_cmd->add_option("--stop-after", stop_after, "Checkpoint and stop after this many steps");

    auto* tok_cmd = app.add_subcommand("tokenize", "Ingest, split, train the vocabulary and encode");
    add_common(tok_cmd, true);
    tok_cmd->add_flag("--force", force, "Replace a run with a different configuration");

    auto* train_cmd = app.add_subcommand("train", "Tokenize if needed, then train (resumes from checkpoints)");
    add_common(train_cmd, true);
    train_cmd->add_option("--seed", seed, "Override the config seed");
    train_cmd->add_flag("--force", force, "Replace a run with a different configuration");
    train_cmd->add_option("--stop-after", stop_after, "Checkpoint and stop after this many steps");

    fs::path checkpoint;
    auto* eval_cmd = app.add_subcommand("eval", "Per-language sliding-window perplexity of a trained run");
    eval_cmd->add_option("--out", out, "Run directory")->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate (default: latest)");

    std::vector<fs::path> fit_runs;
    fs::path points_path;
    auto* fit_cmd = app.add_subcommand("fit-scaling", "Fit ppl = a t^-b + c to monolingual runs or a points file");
    auto* fit_runs_opt = fit_cmd->add_option("--runs", fit_runs, "Monolingual run directories")->check(CLI::ExistingDirectory);
    auto* points_opt = fit_cmd->add_option("--points", points_path, "CSV of tokens,ppl")->check(CLI::ExistingFile);
    fit_runs_opt->excludes(points_opt);
    fit_cmd->add_option("--out", out, "Directory for fit.json")->required();

    std::size_t show = 0;
    auto* align_cmd = app.add_subcommand("align", "Embedding, hidden-state and gradient similarity of a trained run");
    align_cmd->add_option("--out", out, "Run directory")->required()->check(CLI::ExistingDirectory);
    align_cmd->add_option("--show", show, "Print token alignments for the first N pairs");

    std::vector<fs::path> report_runs, references;
    bool teff_on = false, teff_off = false;
    auto* report_cmd = app.add_subcommand("report", "Tables and charts over run directories");
    report_cmd->add_option("runs", report_runs, "Run directories")->required()->check(CLI::ExistingDirectory);
    report_cmd->add_option("--out", out, "Report directory")->required();
    report_cmd->add_option("--reference", references, "Monolingual reference runs for TEff")
        ->check(CLI::ExistingDirectory);
    auto* teff_flag = report_cmd->add_flag("--teff", teff_on, "Require TEff (fails without enough references)");
    report_cmd->add_flag("--no-teff", teff_off, "Leave TEff out")->excludes(teff_flag);

    auto* sweep_cmd = app.add_subcommand("sweep", "Expand the config's sweep grids, run each point, then report");
    add_common(sweep_cmd, true);
    sweep_cmd->add_option("--seed", seed, "Base seed (grids may override it)");
    sweep_cmd->add_flag("--force", force, "Replace runs with a different configuration");
    bool list_only = false;
    sweep_cmd->add_flag("--list", list_only, "Print the expanded run names and exit");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            const auto status = pipeline::run(experiment::ExperimentConfig::load(config_path), out,
                                              run_options(force, seed, stop_after));
            std::cout << (status == pipeline::RunStatus::completed    ? "completed"
                          : status == pipeline::RunStatus::up_to_date ? "up to date"
                                                                      : "interrupted")
                      << ": " << out.string() << "\n";
        } else if (tok_cmd->parsed() || train_cmd->parsed()) {
            const auto config = load_validated(config_path, seed);
            pipeline::RunLock lock(out);
            if (pipeline::prepare_run_dir(config, out, force)) {
                std::cout << "up to date: " << out.string() << "\n";
                return 0;
            }
            pipeline::tokenize_stage(config, out);
            if (train_cmd->parsed()) {
                const auto ctx = pipeline::load_context(out);
                const bool done = pipeline::train_stage(ctx, {stop_after});
                std::cout << (done ? "trained: " : "interrupted: ") << out.string() << "\n";
            }
        } else if (eval_cmd->parsed()) {
            pipeline::RunLock lock(out);
            const auto ctx = pipeline::load_context(out);
            const auto result =
                pipeline::eval_stage(ctx, checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint));
            if (fs::exists(out / "MANIFEST")) pipeline::write_manifest(out);
            std::cout << result.csv();
        } else if (fit_cmd->parsed()) {
            nlohmann::json j;
            if (!points_path.empty()) {
                const auto fit = scaling::fit_power_law(read_points(points_path));
                print_fit("", fit);
                j = fit.to_json();
            } else {
                if (fit_runs.empty()) throw ValidationError("give --runs or --points");
                std::map<std::string, std::vector<pipeline::RunSummary>> groups;
                for (const auto& d : fit_runs) {
                    auto r = pipeline::load_run(d);
                    const bool cloned = r.config.tokenizer.mode == experiment::VocabMode::cloned;
                    const auto key = cloned ? std::string() : r.languages().at(0);
                    groups[key].push_back(std::move(r));
                }
                if (groups.size() == 1 && groups.begin()->first.empty()) {
                    const auto fit = pipeline::fit_from_runs(groups.begin()->second);
                    print_fit("", fit);
                    j = fit.to_json();
                } else {
                    for (const auto& [name, runs] : groups) {
                        const auto fit = pipeline::fit_from_runs(runs);
                        print_fit(name + ": ", fit);
                        j["fits"][name] = fit.to_json();
                    }
                }
            }
            fs::create_directories(out);
            std::ofstream(out / "fit.json") << j.dump(2) << "\n";
        } else if (align_cmd->parsed()) {
            pipeline::RunLock lock(out);
            const auto ctx = pipeline::load_context(out);
            std::string text;
            const auto j = pipeline::align_stage(ctx, show, &text);
            if (fs::exists(out / "MANIFEST")) pipeline::write_manifest(out);
            std::ifstream csv(out / "hidden.csv");
            std::cout << csv.rdbuf();
            if (!j.at("embedding").is_null()) {
                std::printf("embedding cosine %.4f (baseline %.4f)\n", j["embedding"]["mean"].get<double>(),
                            j["embedding"]["baseline"].get<double>());
            }
            std::cout << text;
        } else if (report_cmd->parsed()) {
            pipeline::ReportOptions opts;
            opts.references = references;
            opts.teff = teff_on ? pipeline::TeffMode::on : teff_off ? pipeline::TeffMode::off : pipeline::TeffMode::auto_;
            const auto rep = pipeline::report(report_runs, out, opts);
            std::cout << rep.csv();
        } else if (sweep_cmd->parsed() && list_only) {
            for (const auto& m : pipeline::expand_sweep(experiment::ExperimentConfig::load(config_path))) {
                m.config.validate();
                std::cout << m.name << "\n";
            }
        } else if (sweep_cmd->parsed()) {
            const auto rep =
                pipeline::sweep(experiment::ExperimentConfig::load(config_path), out, run_options(force, seed, {}));
            std::cout << rep.csv();
        }
    } catch (const ValidationError& e) {
        std::cerr << "xlab: invalid configuration: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "xlab: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
