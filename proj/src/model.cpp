#include "xlab/model.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xlab::model {

// ---------------------------------------------------------------------------
// Config and layout

void ModelConfig::validate() const {
    auto bad = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
    if (n_layers < 0) bad("n_layers must be >= 0");
    if (d_model <= 0) bad("d_model must be positive");
    if (n_heads <= 0 || d_model % n_heads != 0) bad("n_heads must divide d_model");
    if (d_ff <= 0) bad("d_ff must be positive");
    if (vocab_size <= 0) bad("vocab_size must be positive");
    if (max_seq_len <= 0) bad("max_seq_len must be positive");
    if (!(init_std > 0.0)) bad("init_std must be positive");
    if (!vocab_segments.empty()) {
        std::size_t sum = 0;
        for (auto s : vocab_segments) sum += s;
        if (sum != static_cast<std::size_t>(vocab_size)) {
            bad("vocab_segments sum to " + std::to_string(sum) + " but vocab_size is " + std::to_string(vocab_size));
        }
    }
}

std::vector<std::size_t> ModelConfig::segments() const {
    std::vector<std::size_t> out;
    for (auto s : vocab_segments) {
        if (s > 0) out.push_back(s);
    }
    if (out.empty()) out.push_back(static_cast<std::size_t>(vocab_size));
    return out;
}

nlohmann::json ModelConfig::to_json() const {
    return {{"n_layers", n_layers},       {"d_model", d_model},       {"n_heads", n_heads},
            {"d_ff", d_ff},               {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
            {"tie_embeddings", tie_embeddings}, {"init_std", init_std}, {"vocab_segments", vocab_segments}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"n_layers",   "d_model",        "n_heads",  "d_ff",
                                                   "vocab_size", "max_seq_len",    "tie_embeddings",
                                                   "init_std",   "vocab_segments"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw std::invalid_argument("model config: unknown key '" + key + "'");
        }
    }
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.init_std = j.value("init_std", c.init_std);
    c.vocab_segments = j.value("vocab_segments", c.vocab_segments);
    return c;
}

Layout::Layout(const ModelConfig& config) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const auto V = static_cast<std::size_t>(config.vocab_size);
    const auto S = static_cast<std::size_t>(config.max_seq_len);

    std::size_t cursor = 0;
    auto begin_group = [&](std::string name) { groups.push_back({std::move(name), cursor, 0, {}}); };
    auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
        auto& g = groups.back();
        g.tensors.push_back({g.name + "." + std::move(name), cursor, rows, cols});
        const std::size_t at = cursor;
        cursor += rows * cols;
        g.size += rows * cols;
        return at;
    };

    begin_group("token_embedding");
    wte = add("weight", V, d);
    begin_group("position_embedding");
    wpe = add("weight", S, d);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerOffsets o{};
        begin_group(p + "ln1");
        o.ln1_g = add("gain", 1, d);
        o.ln1_b = add("bias", 1, d);
        begin_group(p + "attn_qkv");
        o.qkv_w = add("weight", d, 3 * d);
        o.qkv_b = add("bias", 1, 3 * d);
        begin_group(p + "attn_proj");
        o.proj_w = add("weight", d, d);
        o.proj_b = add("bias", 1, d);
        begin_group(p + "ln2");
        o.ln2_g = add("gain", 1, d);
        o.ln2_b = add("bias", 1, d);
        begin_group(p + "mlp_fc1");
        o.fc1_w = add("weight", d, ff);
        o.fc1_b = add("bias", 1, ff);
        begin_group(p + "mlp_fc2");
        o.fc2_w = add("weight", ff, d);
        o.fc2_b = add("bias", 1, d);
        layers.push_back(o);
    }
    begin_group("final_ln");
    lnf_g = add("gain", 1, d);
    lnf_b = add("bias", 1, d);
    if (config.tie_embeddings) {
        head = wte;
    } else {
        begin_group("output_head");
        head = add("weight", V, d);
    }
    total = cursor;
}

const ParamGroup& Layout::group(std::string_view name) const {
    for (const auto& g : groups) {
        if (g.name == name) return g;
    }
    throw std::invalid_argument("no parameter group named '" + std::string(name) + "'");
}

int thread_count() {
#ifdef _OPENMP
    int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* v = std::getenv("XLAB_THREADS"); v != nullptr && *v != '\0') {
        char* end = nullptr;
        const long cap = std::strtol(v, &end, 10);
        if (end == v || *end != '\0' || cap < 1) throw std::invalid_argument("XLAB_THREADS must be a positive integer");
        n = std::min<long>(n, cap);
    }
    return n;
#else
    return 1;
#endif
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
    }
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[t] = b + x[t] W for t < n; W is [in][out].
template <typename T>
void linear(const T* x, const T* W, const T* b, T* y, std::size_t n, std::size_t in, std::size_t out) {
    for (std::size_t t = 0; t < n; ++t) std::copy(b, b + out, y + t * out);
    detail::gemm(n, out, in, x, in, W, out, y, out);
}

// dx = dy W^T (overwritten), dW += x^T dy, db += sum_t dy. WT is W
// transposed, [out][in].
template <typename T>
void linear_backward(const T* x, const T* WT, const T* dy, T* dx, T* dW, T* db, std::size_t n, std::size_t in,
                     std::size_t out) {
    std::fill(dx, dx + n * in, T{0});
    detail::gemm(n, in, out, dy, out, WT, in, dx, in);
    detail::gemm<true>(in, out, n, x, in, dy, out, dW, out);
    for (std::size_t t = 0; t < n; ++t) axpy(T{1}, dy + t * out, db, out);
}

constexpr double kLnEps = 1e-5;

template <typename T>
void layernorm(const T* x, const T* g, const T* b, T* y, T* mean, T* rstd, std::size_t n, std::size_t d) {
    for (std::size_t t = 0; t < n; ++t) {
        const T* xt = x + t * d;
        T m = 0;
        for (std::size_t i = 0; i < d; ++i) m += xt[i];
        m /= static_cast<T>(d);
        T v = 0;
        for (std::size_t i = 0; i < d; ++i) v += (xt[i] - m) * (xt[i] - m);
        v /= static_cast<T>(d);
        const T r = T{1} / std::sqrt(v + static_cast<T>(kLnEps));
        for (std::size_t i = 0; i < d; ++i) y[t * d + i] = (xt[i] - m) * r * g[i] + b[i];
        mean[t] = m;
        rstd[t] = r;
    }
}

// dx += dLN/dx applied to dy; dg, db accumulate.
template <typename T>
void layernorm_backward(const T* x, const T* g, const T* mean, const T* rstd, const T* dy, T* dx, T* dg, T* db,
                        std::size_t n, std::size_t d) {
    for (std::size_t t = 0; t < n; ++t) {
        const T* xt = x + t * d;
        const T* dyt = dy + t * d;
        T sum_dxhat = 0;
        T sum_dxhat_xhat = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const T xhat = (xt[i] - mean[t]) * rstd[t];
            const T dxhat = dyt[i] * g[i];
            dg[i] += dyt[i] * xhat;
            db[i] += dyt[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const T inv_d = T{1} / static_cast<T>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const T xhat = (xt[i] - mean[t]) * rstd[t];
            const T dxhat = dyt[i] * g[i];
            dx[t * d + i] += rstd[t] * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
}

template <typename T>
inline T gelu(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T{0.5} * x * (T{1} + std::tanh(c * (x + T{0.044715} * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T th = std::tanh(c * (x + T{0.044715} * x * x * x));
    return T{0.5} * (T{1} + th) + T{0.5} * x * (T{1} - th * th) * c * (T{1} + T{3} * T{0.044715} * x * x);
}

template <typename T>
struct LayerActs {
    std::vector<T> ln1, ln1_mean, ln1_rstd, qkv, att, attv, mid, ln2, ln2_mean, ln2_rstd, fc1, act;
};

template <typename T>
struct Acts {
    std::size_t n = 0;
    std::vector<std::vector<T>> x;   // n_layers + 1 residual streams
    std::vector<LayerActs<T>> layers;
    std::vector<T> lnf, lnf_mean, lnf_rstd, logits;
};

// Transposed copies of weights, built once per batch and shared read-only.
template <typename T>
struct Prepared {
    std::vector<T> head_t;                                  // d x V
    std::vector<std::vector<T>> qkv_t, proj_t, fc1_t, fc2_t;   // backward only

    Prepared(const ModelState<T>& s, bool backward) {
        const auto& c = s.config;
        const auto& L = s.layout;
        const T* P = s.params.data();
        const auto d = static_cast<std::size_t>(c.d_model);
        const auto ff = static_cast<std::size_t>(c.d_ff);
        const auto V = static_cast<std::size_t>(c.vocab_size);
        head_t.resize(V * d);
        detail::transpose(P + L.head, V, d, head_t.data());
        if (!backward) return;
        auto tr = [&](std::size_t off, std::size_t rows, std::size_t cols) {
            std::vector<T> out(rows * cols);
            detail::transpose(P + off, rows, cols, out.data());
            return out;
        };
        for (const auto& o : L.layers) {
            qkv_t.push_back(tr(o.qkv_w, d, 3 * d));
            proj_t.push_back(tr(o.proj_w, d, d));
            fc1_t.push_back(tr(o.fc1_w, d, ff));
            fc2_t.push_back(tr(o.fc2_w, ff, d));
        }
    }
};

void check_inputs(const ModelConfig& c, std::span<const TokenId> ids) {
    if (ids.empty()) throw std::invalid_argument("empty input sequence");
    if (ids.size() > static_cast<std::size_t>(c.max_seq_len)) {
        throw std::invalid_argument("sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                                    std::to_string(c.max_seq_len));
    }
    for (auto id : ids) {
        if (id >= static_cast<TokenId>(c.vocab_size)) {
            throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(c.vocab_size));
        }
    }
}

void check_targets(const ModelConfig& c, std::span<const TokenId> ids, std::span<const TokenId> targets) {
    check_inputs(c, ids);
    if (targets.size() != ids.size()) throw std::invalid_argument("targets and inputs differ in length");
    for (auto id : targets) {
        if (id >= static_cast<TokenId>(c.vocab_size)) {
            throw std::invalid_argument("target id " + std::to_string(id) + " outside vocabulary");
        }
    }
}

template <typename T>
Acts<T> run_forward(const ModelState<T>& s, std::span<const TokenId> ids, const Prepared<T>& prep) {
    const auto& c = s.config;
    const auto& L = s.layout;
    const T* P = s.params.data();
    const std::size_t n = ids.size();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto H = static_cast<std::size_t>(c.n_heads);
    const std::size_t hd = d / H;
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const T scale = T{1} / std::sqrt(static_cast<T>(hd));

    Acts<T> a;
    a.n = n;
    a.x.assign(static_cast<std::size_t>(c.n_layers) + 1, std::vector<T>(n * d));
    for (std::size_t t = 0; t < n; ++t) {
        const T* e = P + L.wte + static_cast<std::size_t>(ids[t]) * d;
        const T* p = P + L.wpe + t * d;
        for (std::size_t i = 0; i < d; ++i) a.x[0][t * d + i] = e[i] + p[i];
    }

    a.layers.resize(static_cast<std::size_t>(c.n_layers));
    std::vector<T> scores(n);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const auto& o = L.layers[l];
        auto& la = a.layers[l];
        const auto& xin = a.x[l];
        la.ln1.resize(n * d);
        la.ln1_mean.resize(n);
        la.ln1_rstd.resize(n);
        layernorm(xin.data(), P + o.ln1_g, P + o.ln1_b, la.ln1.data(), la.ln1_mean.data(), la.ln1_rstd.data(), n, d);
        la.qkv.resize(n * 3 * d);
        linear(la.ln1.data(), P + o.qkv_w, P + o.qkv_b, la.qkv.data(), n, d, 3 * d);

        la.att.assign(H * n * n, T{0});
        la.attv.assign(n * d, T{0});
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < n; ++t) {
                const T* q = la.qkv.data() + t * 3 * d + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j <= t; ++j) {
                    const T* k = la.qkv.data() + j * 3 * d + d + h * hd;
                    scores[j] = dot(q, k, hd) * scale;
                    mx = std::max(mx, scores[j]);
                }
                T sum = 0;
                for (std::size_t j = 0; j <= t; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    sum += scores[j];
                }
                T* prow = la.att.data() + (h * n + t) * n;
                T* out = la.attv.data() + t * d + h * hd;
                for (std::size_t j = 0; j <= t; ++j) {
                    prow[j] = scores[j] / sum;
                    axpy(prow[j], la.qkv.data() + j * 3 * d + 2 * d + h * hd, out, hd);
                }
            }
        }
        la.mid.resize(n * d);
        linear(la.attv.data(), P + o.proj_w, P + o.proj_b, la.mid.data(), n, d, d);
        for (std::size_t i = 0; i < n * d; ++i) la.mid[i] += xin[i];

        la.ln2.resize(n * d);
        la.ln2_mean.resize(n);
        la.ln2_rstd.resize(n);
        layernorm(la.mid.data(), P + o.ln2_g, P + o.ln2_b, la.ln2.data(), la.ln2_mean.data(), la.ln2_rstd.data(), n, d);
        la.fc1.resize(n * ff);
        linear(la.ln2.data(), P + o.fc1_w, P + o.fc1_b, la.fc1.data(), n, d, ff);
        la.act.resize(n * ff);
        for (std::size_t i = 0; i < n * ff; ++i) la.act[i] = gelu(la.fc1[i]);
        auto& xout = a.x[l + 1];
        linear(la.act.data(), P + o.fc2_w, P + o.fc2_b, xout.data(), n, ff, d);
        for (std::size_t i = 0; i < n * d; ++i) xout[i] += la.mid[i];
    }

    a.lnf.resize(n * d);
    a.lnf_mean.resize(n);
    a.lnf_rstd.resize(n);
    layernorm(a.x.back().data(), P + L.lnf_g, P + L.lnf_b, a.lnf.data(), a.lnf_mean.data(), a.lnf_rstd.data(), n, d);

    // Logits are computed one vocabulary segment at a time so equal-sized
    // segments always go through identical kernel paths.
    a.logits.assign(n * V, T{0});
    std::size_t v0 = 0;
    for (std::size_t seg : c.segments()) {
        detail::gemm(n, seg, d, a.lnf.data(), d, prep.head_t.data() + v0, V, a.logits.data() + v0, V);
        v0 += seg;
    }
    return a;
}

// Replaces a row of logits by exp(logit - max) and returns log-sum-exp. The
// exponentials are summed per segment and the partials combined without
// regard to segment order.
template <typename T>
double exp_row(T* row, std::span<const std::size_t> segments, std::vector<double>& partial) {
    std::size_t V = 0;
    for (auto s : segments) V += s;
    const T mx = *std::max_element(row, row + V);
    partial.assign(segments.size(), 0.0);
    std::size_t v = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        double acc = 0.0;
        for (std::size_t k = 0; k < segments[s]; ++k, ++v) {
            row[v] = std::exp(row[v] - mx);
            acc += static_cast<double>(row[v]);
        }
        partial[s] = acc;
    }
    return static_cast<double>(mx) + std::log(order_free_sum(std::span<double>(partial)));
}

// Accumulates this sequence's gradient (scaled by `scale`) into grads and
// returns scale * summed cross-entropy.
template <typename T>
double accumulate_sequence(const ModelState<T>& s, std::span<const TokenId> ids, std::span<const TokenId> targets,
                           double scale, const Prepared<T>& prep, T* grads) {
    const auto& c = s.config;
    const auto& L = s.layout;
    const T* P = s.params.data();
    const std::size_t n = ids.size();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto H = static_cast<std::size_t>(c.n_heads);
    const std::size_t hd = d / H;
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const T att_scale = T{1} / std::sqrt(static_cast<T>(hd));
    const auto segments = c.segments();

    Acts<T> a = run_forward(s, ids, prep);

    // Softmax cross-entropy; logits are turned into dlogits in place.
    double loss = 0.0;
    std::vector<double> partial;
    for (std::size_t t = 0; t < n; ++t) {
        T* row = a.logits.data() + t * V;
        const double target_logit = static_cast<double>(row[targets[t]]);
        const double lse = exp_row(row, segments, partial);
        loss += lse - target_logit;
        const double z = order_free_sum(std::span<double>(partial));
        const T inv = static_cast<T>(scale / z);
        for (std::size_t v = 0; v < V; ++v) row[v] *= inv;
        row[targets[t]] -= static_cast<T>(scale);
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite loss in forward pass");

    // Output head, per vocabulary segment: dE += dlogits^T lnf, and d(lnf)
    // partials that are combined order-free across segments.
    T* dE = grads + L.head;
    std::vector<T> dlnf(n * d, T{0});
    {
        std::vector<std::vector<T>> seg_acc(segments.size() > 1 ? segments.size() : 0, std::vector<T>(n * d, T{0}));
        std::size_t v0 = 0;
        for (std::size_t sidx = 0; sidx < segments.size(); ++sidx) {
            const std::size_t seg = segments[sidx];
            T* acc = segments.size() > 1 ? seg_acc[sidx].data() : dlnf.data();
            detail::gemm<true>(seg, d, n, a.logits.data() + v0, V, a.lnf.data(), d, dE + v0 * d, d);
            detail::gemm(n, d, seg, a.logits.data() + v0, V, P + L.head + v0 * d, d, acc, d);
            v0 += seg;
        }
        if (segments.size() > 1) {
            std::vector<T> vals(segments.size());
            for (std::size_t i = 0; i < n * d; ++i) {
                for (std::size_t sidx = 0; sidx < segments.size(); ++sidx) vals[sidx] = seg_acc[sidx][i];
                dlnf[i] = order_free_sum(std::span<T>(vals));
            }
        }
    }

    std::vector<T> dres(n * d, T{0});
    layernorm_backward(a.x.back().data(), P + L.lnf_g, a.lnf_mean.data(), a.lnf_rstd.data(), dlnf.data(), dres.data(),
                       grads + L.lnf_g, grads + L.lnf_b, n, d);

    std::vector<T> dmid(n * d), dact(n * ff), dln(n * d), dattv(n * d), dqkv(n * 3 * d), dx(n * d), dp(n);
    for (std::size_t l = a.layers.size(); l-- > 0;) {
        const auto& o = L.layers[l];
        const auto& la = a.layers[l];

        dmid = dres;
        linear_backward(la.act.data(), prep.fc2_t[l].data(), dres.data(), dact.data(), grads + o.fc2_w, grads + o.fc2_b, n,
                        ff, d);
        for (std::size_t i = 0; i < n * ff; ++i) dact[i] *= gelu_grad(la.fc1[i]);
        linear_backward(la.ln2.data(), prep.fc1_t[l].data(), dact.data(), dln.data(), grads + o.fc1_w, grads + o.fc1_b, n,
                        d, ff);
        layernorm_backward(la.mid.data(), P + o.ln2_g, la.ln2_mean.data(), la.ln2_rstd.data(), dln.data(), dmid.data(),
                           grads + o.ln2_g, grads + o.ln2_b, n, d);

        dx = dmid;
        linear_backward(la.attv.data(), prep.proj_t[l].data(), dmid.data(), dattv.data(), grads + o.proj_w,
                        grads + o.proj_b, n, d, d);
        std::fill(dqkv.begin(), dqkv.end(), T{0});
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < n; ++t) {
                const T* prow = la.att.data() + (h * n + t) * n;
                const T* dout = dattv.data() + t * d + h * hd;
                T wsum = 0;
                for (std::size_t j = 0; j <= t; ++j) {
                    const std::size_t vo = j * 3 * d + 2 * d + h * hd;
                    dp[j] = dot(dout, la.qkv.data() + vo, hd);
                    axpy(prow[j], dout, dqkv.data() + vo, hd);
                    wsum += prow[j] * dp[j];
                }
                const T* q = la.qkv.data() + t * 3 * d + h * hd;
                T* dq = dqkv.data() + t * 3 * d + h * hd;
                for (std::size_t j = 0; j <= t; ++j) {
                    const T ds = prow[j] * (dp[j] - wsum) * att_scale;
                    const std::size_t ko = j * 3 * d + d + h * hd;
                    axpy(ds, la.qkv.data() + ko, dq, hd);
                    axpy(ds, q, dqkv.data() + ko, hd);
                }
            }
        }
        linear_backward(la.ln1.data(), prep.qkv_t[l].data(), dqkv.data(), dln.data(), grads + o.qkv_w, grads + o.qkv_b,
                        n, d, 3 * d);
        layernorm_backward(a.x[l].data(), P + o.ln1_g, la.ln1_mean.data(), la.ln1_rstd.data(), dln.data(), dx.data(),
                           grads + o.ln1_g, grads + o.ln1_b, n, d);
        dres = dx;
    }

    for (std::size_t t = 0; t < n; ++t) {
        axpy(T{1}, dres.data() + t * d, grads + L.wte + static_cast<std::size_t>(ids[t]) * d, d);
        axpy(T{1}, dres.data() + t * d, grads + L.wpe + t * d, d);
    }
    return loss * scale;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points

template <typename T>
ModelState<T> init(const ModelConfig& config, std::uint64_t seed) {
    ModelState<T> s(config);
    Rng rng(seed);
    T* P = s.params.data();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const auto V = static_cast<std::size_t>(config.vocab_size);
    const auto S = static_cast<std::size_t>(config.max_seq_len);
    const double std0 = config.init_std;
    const double std_res = config.n_layers > 0 ? std0 / std::sqrt(2.0 * config.n_layers) : std0;
    auto fill = [&](std::size_t off, std::size_t count, double sd) {
        for (std::size_t i = 0; i < count; ++i) P[off + i] = static_cast<T>(rng.normal() * sd);
    };
    fill(s.layout.wte, V * d, std0);
    fill(s.layout.wpe, S * d, std0);
    for (const auto& o : s.layout.layers) {
        std::fill(P + o.ln1_g, P + o.ln1_g + d, T{1});
        std::fill(P + o.ln2_g, P + o.ln2_g + d, T{1});
        fill(o.qkv_w, d * 3 * d, std0);
        fill(o.proj_w, d * d, std_res);
        fill(o.fc1_w, d * ff, std0);
        fill(o.fc2_w, ff * d, std_res);
    }
    std::fill(P + s.layout.lnf_g, P + s.layout.lnf_g + d, T{1});
    if (!config.tie_embeddings) fill(s.layout.head, V * d, std0);
    return s;
}

template <typename T>
ForwardTrace<T> forward(const ModelState<T>& state, std::span<const TokenId> ids) {
    check_inputs(state.config, ids);
    auto a = run_forward(state, ids, Prepared<T>(state, false));
    ForwardTrace<T> out;
    out.seq_len = ids.size();
    out.vocab_size = static_cast<std::size_t>(state.config.vocab_size);
    out.logits = std::move(a.logits);
    out.hidden = std::move(a.x);
    return out;
}

template <typename T>
std::vector<double> target_log_probs(const ModelState<T>& state, std::span<const TokenId> ids,
                                     std::span<const TokenId> targets) {
    check_targets(state.config, ids, targets);
    auto a = run_forward(state, ids, Prepared<T>(state, false));
    const auto V = static_cast<std::size_t>(state.config.vocab_size);
    const auto segments = state.config.segments();
    std::vector<double> out(ids.size());
    std::vector<double> partial;
    std::vector<T> row(V);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        std::copy_n(a.logits.begin() + static_cast<std::ptrdiff_t>(t * V), V, row.begin());
        const double target_logit = static_cast<double>(row[targets[t]]);
        out[t] = target_logit - exp_row(row.data(), segments, partial);
    }
    return out;
}

template <typename T>
double loss_only(const ModelState<T>& state, std::span<const TokenId> ids, std::span<const TokenId> targets) {
    const auto lp = target_log_probs(state, ids, targets);
    double sum = 0.0;
    for (double v : lp) sum -= v;
    return sum / static_cast<double>(lp.size());
}

template <typename T>
double loss_and_grads(const ModelState<T>& state, std::span<const TokenId> ids, std::span<const TokenId> targets,
                      std::vector<T>& grads) {
    const SequenceRef one{ids, targets};
    return batch_loss_and_grads(state, std::span<const SequenceRef>(&one, 1), grads);
}

template <typename T>
double batch_loss_and_grads(const ModelState<T>& state, std::span<const SequenceRef> batch, std::vector<T>& grads) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    std::size_t total_targets = 0;
    for (const auto& seq : batch) {
        check_targets(state.config, seq.ids, seq.targets);
        total_targets += seq.targets.size();
    }
    const double scale = 1.0 / static_cast<double>(total_targets);
    const std::size_t P = state.params.size();
    const std::size_t shards = std::min<std::size_t>(batch.size(), 8);
    const Prepared<T> prep(state, true);

    grads.assign(P, T{0});
    std::vector<std::vector<T>> extra(shards - 1, std::vector<T>(P, T{0}));
    std::vector<double> shard_loss(shards, 0.0);
    std::vector<std::exception_ptr> errors(shards);

    const auto work = [&](std::size_t k) {
        try {
            T* g = k == 0 ? grads.data() : extra[k - 1].data();
            for (std::size_t i = k; i < batch.size(); i += shards) {
                shard_loss[k] += accumulate_sequence(state, batch[i].ids, batch[i].targets, scale, prep, g);
            }
        } catch (...) {
            errors[k] = std::current_exception();
        }
    };
#ifdef _OPENMP
    const int threads = std::min<int>(thread_count(), static_cast<int>(shards));
#pragma omp parallel for num_threads(threads) schedule(static, 1)
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(shards); ++k) work(static_cast<std::size_t>(k));
#else
    for (std::size_t k = 0; k < shards; ++k) work(k);
#endif
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    for (const auto& g : extra) {
        for (std::size_t i = 0; i < P; ++i) grads[i] += g[i];
    }
    double loss = 0.0;
    for (double l : shard_loss) loss += l;
    if (!std::isfinite(loss)) throw NumericError("non-finite loss");
    return loss;
}

template <typename T>
double squared_norm(const ModelState<T>& state, std::span<const T> values) {
    if (values.size() != state.params.size()) throw std::invalid_argument("vector size differs from parameter count");
    const auto segments = state.config.segments();
    const auto d = static_cast<std::size_t>(state.config.d_model);
    double total = 0.0;
    for (const auto& g : state.layout.groups) {
        const T* v = values.data() + g.offset;
        if (g.name == "token_embedding" || g.name == "output_head") {
            std::vector<double> partial(segments.size(), 0.0);
            std::size_t i = 0;
            for (std::size_t s = 0; s < segments.size(); ++s) {
                for (std::size_t k = 0; k < segments[s] * d; ++k, ++i) {
                    partial[s] += static_cast<double>(v[i]) * static_cast<double>(v[i]);
                }
            }
            total += order_free_sum(std::span<double>(partial));
        } else {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size; ++i) acc += static_cast<double>(v[i]) * static_cast<double>(v[i]);
            total += acc;
        }
    }
    return total;
}

template <typename T>
void permute_vocab_rows(ModelState<T>& state, std::span<const TokenId> new_of_old) {
    const auto V = static_cast<std::size_t>(state.config.vocab_size);
    const auto d = static_cast<std::size_t>(state.config.d_model);
    if (new_of_old.size() != V) throw std::invalid_argument("vocabulary permutation has the wrong size");
    std::vector<bool> seen(V, false);
    for (auto x : new_of_old) {
        if (x >= V || seen[x]) throw std::invalid_argument("vocabulary permutation is not a bijection");
        seen[x] = true;
    }
    auto apply = [&](std::size_t off) {
        std::vector<T> copy(state.params.begin() + static_cast<std::ptrdiff_t>(off),
                            state.params.begin() + static_cast<std::ptrdiff_t>(off + V * d));
        for (std::size_t v = 0; v < V; ++v) {
            std::copy_n(copy.begin() + static_cast<std::ptrdiff_t>(v * d), d,
                        state.params.begin() + static_cast<std::ptrdiff_t>(off + new_of_old[v] * d));
        }
    };
    apply(state.layout.wte);
    if (!state.config.tie_embeddings) apply(state.layout.head);
}

#define XLAB_INSTANTIATE(T)                                                                                      \
    template ModelState<T> init<T>(const ModelConfig&, std::uint64_t);                                          \
    template ForwardTrace<T> forward<T>(const ModelState<T>&, std::span<const TokenId>);                        \
    template std::vector<double> target_log_probs<T>(const ModelState<T>&, std::span<const TokenId>,            \
                                                     std::span<const TokenId>);                                 \
    template double loss_only<T>(const ModelState<T>&, std::span<const TokenId>, std::span<const TokenId>);     \
    template double loss_and_grads<T>(const ModelState<T>&, std::span<const TokenId>, std::span<const TokenId>, \
                                      std::vector<T>&);                                                         \
    template double batch_loss_and_grads<T>(const ModelState<T>&, std::span<const SequenceRef>, std::vector<T>&); \
    template double squared_norm<T>(const ModelState<T>&, std::span<const T>);                                  \
    template void permute_vocab_rows<T>(ModelState<T>&, std::span<const TokenId>);

XLAB_INSTANTIATE(float)
XLAB_INSTANTIATE(double)

#undef XLAB_INSTANTIATE

}  // namespace xlab::model
