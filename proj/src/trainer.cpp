#include "xlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"

namespace xlab::trainer {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    auto bad = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
    if (total_steps < 0) bad("total_steps must be >= 0");
    if (batch_size <= 0) bad("batch_size must be positive");
    if (seq_len <= 0) bad("seq_len must be positive");
    if (!(lr_max > 0.0)) bad("lr_max must be positive");
    if (!(lr_min >= 0.0 && lr_min <= lr_max)) bad("lr_min must lie in [0, lr_max]");
    if (warmup_steps < 0) bad("warmup_steps must be >= 0");
    if (total_steps > 0 && warmup_steps >= total_steps) bad("warmup_steps must be smaller than total_steps");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad("Adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) bad("epsilon must be positive");
    if (checkpoint_every < 0) bad("checkpoint_every must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"total_steps", total_steps}, {"batch_size", batch_size}, {"seq_len", seq_len},
            {"lr_max", lr_max},           {"lr_min", lr_min},         {"warmup_steps", warmup_steps},
            {"beta1", beta1},             {"beta2", beta2},           {"epsilon", epsilon},
            {"clip_norm", clip_norm},     {"seed", seed},             {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    const auto keys = c.to_json();
    for (const auto& [key, _] : j.items()) {
        if (!keys.contains(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
    }
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.lr_max = j.value("lr_max", c.lr_max);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    return c;
}

double lr_at(const TrainConfig& config, std::int64_t step) {
    if (step < 0 || step >= config.total_steps) {
        throw std::invalid_argument("step " + std::to_string(step) + " outside [0, " +
                                    std::to_string(config.total_steps) + ")");
    }
    if (step < config.warmup_steps) {
        return config.lr_max * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
    }
    const double progress = static_cast<double>(step - config.warmup_steps) /
                            static_cast<double>(config.total_steps - config.warmup_steps);
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// RunRecord

nlohmann::json RunRecord::to_json() const {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : evals) ev.push_back({{"step", e.step}, {"ppl", e.ppl}});
    return {{"steps", steps},   {"losses", losses},        {"step_counts", step_counts}, {"tokens", tokens},
            {"evals", ev},      {"config_digest", config_digest}, {"seed", seed}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    r.steps = j.at("steps").get<std::int64_t>();
    r.losses = j.at("losses").get<std::vector<double>>();
    r.step_counts = j.at("step_counts").get<std::vector<std::vector<std::uint64_t>>>();
    r.tokens = j.at("tokens").get<std::vector<std::uint64_t>>();
    for (const auto& e : j.at("evals")) {
        r.evals.push_back({e.at("step").get<std::int64_t>(), e.at("ppl").get<std::vector<double>>()});
    }
    r.config_digest = j.at("config_digest").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

std::string RunRecord::losses_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss";
    for (std::size_t n = 0; n < tokens.size(); ++n) os << ",tokens_lang" << n;
    os << '\n';
    for (std::size_t s = 0; s < losses.size(); ++s) {
        os << s << ',' << losses[s];
        for (auto c : step_counts[s]) os << ',' << c;
        os << '\n';
    }
    return os.str();
}

std::string default_config_digest(const model::ModelConfig& model_config, const TrainConfig& config) {
    const nlohmann::json j = {{"model", model_config.to_json()}, {"train", config.to_json()}};
    return to_hex(sha256(j.dump()));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

std::string encode_floats(std::span<const float> values) {
    std::ostringstream os;
    if constexpr (std::endian::native == std::endian::little) {
        detail::put_bytes(os, values.data(), values.size() * sizeof(float));
    } else {
        for (float v : values) detail::put_f32(os, v);
    }
    return std::move(os).str();
}

void decode_floats(std::string_view bytes, std::size_t offset, std::span<float> out) {
    if (offset + out.size() * 4 > bytes.size()) throw FormatError("checkpoint payload is truncated");
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), bytes.data() + offset, out.size() * 4);
    } else {
        std::istringstream is(std::string(bytes.substr(offset, out.size() * 4)));
        for (auto& v : out) v = detail::get_f32(is);
    }
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
    std::string payload = encode_floats(ck.state.params);
    payload += encode_floats(ck.adam.m);
    payload += encode_floats(ck.adam.v);

    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : ck.state.layout.groups) groups.push_back({{"name", g.name}, {"offset", g.offset}, {"size", g.size}});
    const nlohmann::json header = {{"model_config", ck.state.config.to_json()},
                                   {"train_config", ck.train_config.to_json()},
                                   {"config_digest", ck.config_digest},
                                   {"step", ck.step},
                                   {"source_state", ck.source_state},
                                   {"record", ck.record.to_json()},
                                   {"groups", groups},
                                   {"n_params", ck.state.params.size()},
                                   {"has_adam", !ck.adam.m.empty()},
                                   {"payload_sha256", to_hex(sha256(payload))}};
    const std::string text = header.dump();
    const Digest header_digest = sha256(text);

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::invalid_argument("cannot write '" + tmp.string() + "'");
        out.write("XLCK", 4);
        detail::put_le<std::uint8_t>(out, kCheckpointVersion);
        detail::put_le<std::uint64_t>(out, text.size());
        detail::put_bytes(out, text.data(), text.size());
        detail::put_bytes(out, header_digest.data(), header_digest.size());
        detail::put_bytes(out, payload.data(), payload.size());
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open checkpoint '" + path.string() + "'");
    const auto file_size = fs::file_size(path);
    char magic[4];
    detail::get_bytes(in, magic, 4);
    if (std::string_view(magic, 4) != "XLCK") throw FormatError("'" + path.string() + "' is not a checkpoint");
    if (detail::get_le<std::uint8_t>(in) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
    const auto header_len = detail::get_le<std::uint64_t>(in);
    if (header_len > file_size) throw DigestError("checkpoint header length is corrupt in '" + path.string() + "'");
    std::string text(header_len, '\0');
    detail::get_bytes(in, text.data(), text.size());
    Digest stored{};
    detail::get_bytes(in, stored.data(), stored.size());
    if (sha256(text) != stored) throw DigestError("checkpoint header digest mismatch in '" + path.string() + "'");
    const auto header = nlohmann::json::parse(text);

    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (to_hex(sha256(payload)) != header.at("payload_sha256").get<std::string>()) {
        throw DigestError("checkpoint payload digest mismatch in '" + path.string() + "'");
    }

    Checkpoint ck{model::ModelState<float>(model::ModelConfig::from_json(header.at("model_config"))),
                  {},
                  TrainConfig::from_json(header.at("train_config")),
                  header.at("config_digest").get<std::string>(),
                  header.at("step").get<std::int64_t>(),
                  header.at("source_state"),
                  RunRecord::from_json(header.at("record"))};
    const std::size_t n = ck.state.params.size();
    if (header.at("n_params").get<std::size_t>() != n) throw FormatError("checkpoint parameter count mismatch");
    decode_floats(payload, 0, ck.state.params);
    std::size_t expected = n * 4;
    if (header.at("has_adam").get<bool>()) {
        ck.adam.m.resize(n);
        ck.adam.v.resize(n);
        decode_floats(payload, n * 4, ck.adam.m);
        decode_floats(payload, n * 8, ck.adam.v);
        expected = n * 12;
    }
    if (payload.size() != expected) throw FormatError("checkpoint payload size mismatch");
    return ck;
}

model::ModelState<float> load_model(const fs::path& checkpoint) { return read_checkpoint(checkpoint).state; }

// ---------------------------------------------------------------------------
// Training loop

namespace {

fs::path checkpoint_path(const fs::path& dir, std::int64_t step) {
    char name[32];
    std::snprintf(name, sizeof name, "step-%08lld.xlck", static_cast<long long>(step));
    return dir / name;
}

TrainResult run(model::ModelState<float> state, Adam adam, RunRecord record, std::int64_t start_step,
                mixer::SequenceSource& source, const TrainConfig& config, const TrainHooks& hooks,
                std::optional<fs::path> last_checkpoint) {
    const std::size_t P = state.params.size();
    if (adam.m.empty()) {
        adam.m.assign(P, 0.0f);
        adam.v.assign(P, 0.0f);
    }
    if (source.vocab_size() != static_cast<std::size_t>(state.config.vocab_size)) {
        throw std::invalid_argument("source vocabulary has " + std::to_string(source.vocab_size()) +
                                    " ids but the model expects " + std::to_string(state.config.vocab_size));
    }
    if (config.seq_len > state.config.max_seq_len) {
        throw std::invalid_argument("seq_len " + std::to_string(config.seq_len) + " exceeds the model's max_seq_len " +
                                    std::to_string(state.config.max_seq_len));
    }
    const auto n_lang = static_cast<std::size_t>(source.n_languages());
    if (record.tokens.empty()) record.tokens.assign(n_lang, 0);

    auto wants_eval = [&](std::int64_t done) {
        return hooks.eval && std::find(hooks.eval_steps.begin(), hooks.eval_steps.end(), done) != hooks.eval_steps.end();
    };
    auto checkpoint = [&](std::int64_t done) {
        if (hooks.checkpoint_dir.empty()) return;
        const auto path = checkpoint_path(hooks.checkpoint_dir, done);
        write_checkpoint(path, {state, adam, config, record.config_digest, done, source.save_state(), record});
        last_checkpoint = path;
    };
    if (start_step == 0 && wants_eval(0) && record.evals.empty()) record.evals.push_back({0, hooks.eval(state, 0)});
    if (hooks.stop_after && *hooks.stop_after <= start_step) {
        checkpoint(start_step);
        return {std::move(state), std::move(record), std::move(adam), last_checkpoint};
    }

    const auto seq_len = static_cast<std::size_t>(config.seq_len);
    std::vector<std::vector<TokenId>> seqs(static_cast<std::size_t>(config.batch_size));
    std::vector<model::SequenceRef> batch(seqs.size());
    std::vector<float> grads;
    for (std::int64_t step = start_step; step < config.total_steps; ++step) {
        if (hooks.stop_after && step >= *hooks.stop_after) break;
        std::vector<std::uint64_t> counts(n_lang, 0);
        for (std::size_t b = 0; b < seqs.size(); ++b) {
            auto tagged = source.next(step, config.total_steps, seq_len);
            seqs[b] = std::move(tagged.ids);
            counts.at(static_cast<std::size_t>(tagged.language)) += seq_len;
            batch[b] = {std::span<const TokenId>(seqs[b]).first(seq_len), std::span<const TokenId>(seqs[b]).subspan(1)};
        }

        double loss = 0.0;
        try {
            loss = model::batch_loss_and_grads(state, std::span<const model::SequenceRef>(batch), grads);
        } catch (const NumericError&) {
            loss = std::numeric_limits<double>::quiet_NaN();
        }
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " +
                               (last_checkpoint ? last_checkpoint->string() : std::string("none")));
        }

        const double norm = std::sqrt(model::squared_norm(state, std::span<const float>(grads)));
        const float clip = config.clip_norm > 0.0 && norm > config.clip_norm
                               ? static_cast<float>(config.clip_norm / norm)
                               : 1.0f;
        const double t = static_cast<double>(step + 1);
        const auto lr = static_cast<float>(lr_at(config, step));
        const auto b1 = static_cast<float>(config.beta1);
        const auto b2 = static_cast<float>(config.beta2);
        const auto c1 = static_cast<float>(1.0 - std::pow(config.beta1, t));
        const auto c2 = static_cast<float>(1.0 - std::pow(config.beta2, t));
        const auto eps = static_cast<float>(config.epsilon);
        for (std::size_t i = 0; i < P; ++i) {
            const float g = grads[i] * clip;
            adam.m[i] = b1 * adam.m[i] + (1.0f - b1) * g;
            adam.v[i] = b2 * adam.v[i] + (1.0f - b2) * g * g;
            const float mhat = adam.m[i] / c1;
            const float vhat = adam.v[i] / c2;
            state.params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }

        record.losses.push_back(loss);
        for (std::size_t n = 0; n < n_lang; ++n) record.tokens[n] += counts[n];
        record.step_counts.push_back(std::move(counts));
        record.steps = step + 1;

        const std::int64_t done = step + 1;
        if (wants_eval(done)) record.evals.push_back({done, hooks.eval(state, done)});
        const bool scheduled = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        const bool stopping = hooks.stop_after && done == *hooks.stop_after;
        if (scheduled || done == config.total_steps || stopping) checkpoint(done);
        if (done % 100 == 0) log_info("step " + std::to_string(done) + "/" + std::to_string(config.total_steps) +
                                      " loss " + std::to_string(loss));
    }
    return {std::move(state), std::move(record), std::move(adam), last_checkpoint};
}

}  // namespace

TrainResult train(model::ModelState<float> state, mixer::SequenceSource& source, const TrainConfig& config,
                  const TrainHooks& hooks, std::string config_digest) {
    config.validate();
    RunRecord record;
    record.config_digest = config_digest.empty() ? default_config_digest(state.config, config) : std::move(config_digest);
    record.seed = config.seed;
    return run(std::move(state), {}, std::move(record), 0, source, config, hooks, std::nullopt);
}

TrainResult resume(const fs::path& checkpoint, mixer::SequenceSource& source, const TrainConfig& config,
                   const TrainHooks& hooks, std::string config_digest) {
    config.validate();
    Checkpoint ck = read_checkpoint(checkpoint);
    const std::string expected =
        config_digest.empty() ? default_config_digest(ck.state.config, config) : std::move(config_digest);
    if (ck.config_digest != expected) {
        throw DigestError("checkpoint '" + checkpoint.string() + "' was written for configuration " + ck.config_digest +
                          ", not " + expected);
    }
    source.restore_state(ck.source_state);
    return run(std::move(ck.state), std::move(ck.adam), std::move(ck.record), ck.step, source, config, hooks, checkpoint);
}

}  // namespace xlab::trainer
