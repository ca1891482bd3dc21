#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "xlab/common.hpp"

namespace xlab::model {

/// GPT-2-style decoder: learned absolute positions, pre-norm blocks
/// (LayerNorm -> causal multi-head attention, LayerNorm -> GELU MLP), final
/// LayerNorm, and an output head that is tied to the token embedding by
/// default.
struct ModelConfig {
    int n_layers = 2;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 512;
    int vocab_size = 0;
    int max_seq_len = 128;
    bool tie_embeddings = true;
    double init_std = 0.02;
    /// Partition of the vocabulary into consecutive id ranges (e.g. anchors,
    /// then one block per cloned language). Reductions over the vocabulary
    /// are accumulated per segment and the partials combined independently
    /// of segment order, so permuting equal-sized segments permutes results
    /// exactly. Empty means one segment.
    std::vector<std::size_t> vocab_segments;

    void validate() const;
    std::vector<std::size_t> segments() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSlot {
    std::string name;
    std::size_t offset;
    std::size_t rows;
    std::size_t cols;
    std::size_t size() const noexcept { return rows * cols; }
};

/// Named component; its tensors are contiguous in the flat parameter buffer.
struct ParamGroup {
    std::string name;
    std::size_t offset;
    std::size_t size;
    std::vector<TensorSlot> tensors;
};

struct LayerOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Flat parameter layout in canonical group order: token_embedding,
/// position_embedding, layer<i>.{ln1, attn_qkv, attn_proj, ln2, mlp_fc1,
/// mlp_fc2}, final_ln, output_head (untied only). Weights are stored
/// [in][out]; embedding and head matrices are [vocab][d_model].
struct Layout {
    explicit Layout(const ModelConfig& config);

    std::size_t wte, wpe, lnf_g, lnf_b, head;
    std::vector<LayerOffsets> layers;
    std::vector<ParamGroup> groups;
    std::size_t total = 0;

    const ParamGroup& group(std::string_view name) const;
};

template <typename T>
struct ModelState {
    ModelConfig config;
    Layout layout;
    std::vector<T> params;

    explicit ModelState(ModelConfig cfg) : config(std::move(cfg)), layout(config), params(layout.total, T{0}) {}

    std::span<T> group(std::string_view name) {
        const auto& g = layout.group(name);
        return std::span<T>(params).subspan(g.offset, g.size);
    }
    std::span<const T> group(std::string_view name) const {
        const auto& g = layout.group(name);
        return std::span<const T>(params).subspan(g.offset, g.size);
    }
    /// Row `id` of the token embedding.
    std::span<const T> embedding_row(TokenId id) const {
        return std::span<const T>(params).subspan(layout.wte + static_cast<std::size_t>(id) * config.d_model,
                                                  static_cast<std::size_t>(config.d_model));
    }

    template <typename U>
    ModelState<U> cast() const {
        ModelState<U> out(config);
        for (std::size_t i = 0; i < params.size(); ++i) out.params[i] = static_cast<U>(params[i]);
        return out;
    }
};

/// Deterministic initialisation: N(0, init_std) for embeddings and weights,
/// scaled by 1/sqrt(2 * n_layers) for the two residual projections
/// (attn_proj, mlp_fc2); zero biases and LayerNorm offsets, unit gains.
template <typename T>
ModelState<T> init(const ModelConfig& config, std::uint64_t seed);

template <typename T>
struct ForwardTrace {
    std::size_t seq_len = 0;
    std::size_t vocab_size = 0;
    std::vector<T> logits;                  // seq_len x vocab
    std::vector<std::vector<T>> hidden;     // n_layers + 1 entries of seq_len x d_model

    std::span<const T> logits_at(std::size_t t) const {
        return std::span<const T>(logits).subspan(t * vocab_size, vocab_size);
    }
};

/// Causal forward pass. Hidden state 0 is the embedding output; hidden state
/// l is the residual stream after block l. Throws std::invalid_argument for
/// oversized sequences or out-of-range ids.
template <typename T>
ForwardTrace<T> forward(const ModelState<T>& state, std::span<const TokenId> ids);

/// Natural-log probability of targets[t] given ids[0..t], for every t.
template <typename T>
std::vector<double> target_log_probs(const ModelState<T>& state, std::span<const TokenId> ids,
                                     std::span<const TokenId> targets);

struct SequenceRef {
    std::span<const TokenId> ids;
    std::span<const TokenId> targets;
};

/// Mean token-level cross-entropy over one sequence and its gradient (grads
/// is resized and overwritten). Throws NumericError if the loss is not
/// finite.
template <typename T>
double loss_and_grads(const ModelState<T>& state, std::span<const TokenId> ids, std::span<const TokenId> targets,
                      std::vector<T>& grads);

/// Mean cross-entropy over every target token of the batch. Sequences are
/// dealt round-robin into min(batch, 8) fixed shards whose gradients are
/// summed in shard order, so results do not depend on the thread count.
template <typename T>
double batch_loss_and_grads(const ModelState<T>& state, std::span<const SequenceRef> batch, std::vector<T>& grads);

template <typename T>
double loss_only(const ModelState<T>& state, std::span<const TokenId> ids, std::span<const TokenId> targets);

/// Squared L2 norm of a full gradient (or parameter) vector, with
/// vocabulary-indexed matrices reduced segment-wise.
template <typename T>
double squared_norm(const ModelState<T>& state, std::span<const T> values);

/// Moves vocabulary row `id` of the embedding (and untied head) to
/// `new_of_old[id]`.
template <typename T>
void permute_vocab_rows(ModelState<T>& state, std::span<const TokenId> new_of_old);

/// Threads used for sharded work; XLAB_THREADS caps it (default: hardware).
int thread_count();

}  // namespace xlab::model
