#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flashmem/common.hpp"
#include "flashmem/tensor.hpp"

namespace flashmem {

struct BackboneConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_head = 16;
    std::size_t vocab_size = 256;
    std::size_t max_positions = 8192;
    double rope_base = 10000.0;

    std::size_t d_ff() const { return 2 * d_model; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1)
            throw config_error("backbone config: all sizes must be positive");
        if (n_heads * d_head != d_model)
            throw config_error("backbone config: n_heads*d_head (" + std::to_string(n_heads * d_head) +
                               ") != d_model (" + std::to_string(d_model) + ")");
        if (d_head % 2 != 0) throw config_error("backbone config: d_head must be even for rotary embedding");
        if (max_positions < 1) throw config_error("backbone config: max_positions must be >= 1");
    }
};

/// Per-layer key/value stores plus per-position latent flags. Rows appended
/// by differentiable decode steps carry tape node ids so gradients can flow
/// back into injected latent embeddings.
template <typename T>
struct KvCache {
    struct Layer {
        std::vector<T> keys;    // len * width, row-major
        std::vector<T> values;  // len * width
        std::vector<int> key_nodes;
        std::vector<int> value_nodes;
    };

    std::vector<Layer> layers;
    std::vector<bool> is_latent;
    std::vector<int> position_ids;
    std::size_t width = 0;  // n_heads * d_head
    std::size_t max_positions = 0;

    KvCache() = default;
    KvCache(std::size_t n_layers, std::size_t w, std::size_t max_pos)
        : layers(n_layers), width(w), max_positions(max_pos) {}

    std::size_t len() const { return is_latent.size(); }

    std::size_t byte_count() const { return layers.size() * len() * width * 2 * sizeof(T); }

    int next_position() const { return position_ids.empty() ? 0 : position_ids.back() + 1; }

    void append_layer_row(std::size_t layer, const Tensor<T>& k, const Tensor<T>& v) {
        Layer& L = layers[layer];
        L.keys.insert(L.keys.end(), k.data.begin(), k.data.end());
        L.values.insert(L.values.end(), v.data.begin(), v.data.end());
        L.key_nodes.push_back(k.node);
        L.value_nodes.push_back(v.node);
    }

    void mark_position(bool latent) {
        if (len() + 1 > max_positions) throw capacity_error("kv cache: max_positions exceeded");
        position_ids.push_back(next_position());
        is_latent.push_back(latent);
    }
};

/// Output of one decoding position: next-token logits, the current query's
/// last-layer attention over the whole cache, and the post-final-norm state.
template <typename T>
struct StepOutput {
    Tensor<T> logits;                // [1, vocab]
    Tensor<T> last_layer_attention;  // [n_heads, cache_len], untracked
    Tensor<T> last_hidden;           // [1, d_model]
};

namespace detail {

/// Multi-head attention of query rows against a cache layer. Query row i may
/// attend to cache rows [0, start+i]. Streams the cache row-major with all
/// heads in the inner loop. When tracked, gradients scatter back into the
/// per-row key/value nodes (injected latents) and the query.
template <typename T>
Tensor<T> attend_cache(Tape<T>* tape, const Tensor<T>& Q, const typename KvCache<T>::Layer& L, std::size_t n_heads,
                       std::size_t start, std::vector<T>* last_probs /* n_heads * cache_len, optional */) {
    const std::size_t width = Q.cols();
    const std::size_t m = Q.rows();
    const std::size_t dh = width / n_heads;
    const std::size_t clen = L.key_nodes.size();
    if (clen == 0) throw contract_error("attend_cache: empty cache");
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> out = Tensor<T>::zeros({m, width});
    bool track_kv = false;
    if (tape)
        for (std::size_t j = 0; j < clen; ++j)
            if (L.key_nodes[j] >= 0 || L.value_nodes[j] >= 0) {
                track_kv = true;
                break;
            }
    const bool track = tape && (Q.tracked() || track_kv);
    // probs kept only for the backward pass or the last query's snapshot
    std::vector<T> all_probs;
    if (track) all_probs.assign(m * n_heads * clen, T(0));

    std::vector<T> scores(n_heads * clen);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t valid = std::min(clen, start + i + 1);
        const T* qrow = &Q.data[i * width];
        for (std::size_t j = 0; j < valid; ++j) {
            const T* krow = &L.keys[j * width];
            for (std::size_t h = 0; h < n_heads; ++h) {
                T acc = T(0);
                const T* qh = qrow + h * dh;
                const T* kh = krow + h * dh;
                for (std::size_t t = 0; t < dh; ++t) acc += qh[t] * kh[t];
                scores[h * clen + j] = acc * inv_sqrt;
            }
        }
        // per-head softmax over the valid prefix
        for (std::size_t h = 0; h < n_heads; ++h) {
            T* s = &scores[h * clen];
            T mx = s[0];
            for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, s[j]);
            T sum = T(0);
            for (std::size_t j = 0; j < valid; ++j) {
                s[j] = std::exp(s[j] - mx);
                sum += s[j];
            }
            const T inv = T(1) / sum;
            for (std::size_t j = 0; j < valid; ++j) s[j] *= inv;
            for (std::size_t j = valid; j < clen; ++j) s[j] = T(0);
        }
        T* orow = &out.data[i * width];
        for (std::size_t j = 0; j < valid; ++j) {
            const T* vrow = &L.values[j * width];
            for (std::size_t h = 0; h < n_heads; ++h) {
                const T p = scores[h * clen + j];
                const T* vh = vrow + h * dh;
                T* oh = orow + h * dh;
                for (std::size_t t = 0; t < dh; ++t) oh[t] += p * vh[t];
            }
        }
        if (track) std::copy(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(n_heads * clen),
                             &all_probs[i * n_heads * clen]);
        if (last_probs && i == m - 1)
            last_probs->assign(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(n_heads * clen));
    }
    ensure_finite(out, "attend_cache");

    if (track) {
        const int id = tape->alloc(out.size());
        out.node = id;
        // snapshot of the cache rows this op read; rows are append-only
        std::vector<T> kd(L.keys.begin(), L.keys.begin() + static_cast<std::ptrdiff_t>(clen * width));
        std::vector<T> vd(L.values.begin(), L.values.begin() + static_cast<std::ptrdiff_t>(clen * width));
        std::vector<int> kn(L.key_nodes.begin(), L.key_nodes.begin() + static_cast<std::ptrdiff_t>(clen));
        std::vector<int> vn(L.value_nodes.begin(), L.value_nodes.begin() + static_cast<std::ptrdiff_t>(clen));
        tape->set_pull(id, [id, qn = Q.node, qd = Q.data, kd = std::move(kd), vd = std::move(vd), kn = std::move(kn),
                            vn = std::move(vn), probs = std::move(all_probs), m, n_heads, dh, width, clen, start,
                            inv_sqrt](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T> ds(clen);
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t valid = std::min(clen, start + i + 1);
                const T* grow = &g[i * width];
                const T* prow = &probs[i * n_heads * clen];
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const T* p = prow + h * clen;
                    const T* gh = grow + h * dh;
                    // dv_j += p_j * g_h ; dp_j = g_h . v_j
                    T pdot = T(0);
                    for (std::size_t j = 0; j < valid; ++j) {
                        T dp = T(0);
                        const T* vh = &vd[j * width + h * dh];
                        for (std::size_t t = 0; t < dh; ++t) dp += gh[t] * vh[t];
                        ds[j] = dp;
                        pdot += p[j] * dp;
                        if (vn[j] >= 0) {
                            std::vector<T>& gv = tp.grad(vn[j]);
                            for (std::size_t t = 0; t < dh; ++t) gv[h * dh + t] += p[j] * gh[t];
                        }
                    }
                    // dscore_j = p_j (dp_j - sum_k p_k dp_k); chain to q and k
                    for (std::size_t j = 0; j < valid; ++j) {
                        const T dsc = p[j] * (ds[j] - pdot) * inv_sqrt;
                        if (dsc == T(0)) continue;
                        if (qn >= 0) {
                            std::vector<T>& gq = tp.grad(qn);
                            const T* kh = &kd[j * width + h * dh];
                            for (std::size_t t = 0; t < dh; ++t) gq[i * width + h * dh + t] += dsc * kh[t];
                        }
                        if (kn[j] >= 0) {
                            std::vector<T>& gk = tp.grad(kn[j]);
                            const T* qh = &qd[i * width + h * dh];
                            for (std::size_t t = 0; t < dh; ++t) gk[h * dh + t] += dsc * qh[t];
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
struct LayerWeights {
    Parameter<T> attn_norm;  // [d]
    Parameter<T> wq, wk, wv, wo;  // [d, d]
    Parameter<T> mlp_norm;        // [d]
    Parameter<T> w_gate, w_up;    // [d, ff]
    Parameter<T> w_down;          // [ff, d]

    void collect(std::vector<Parameter<T>*>& out) {
        for (Parameter<T>* p : {&attn_norm, &wq, &wk, &wv, &wo, &mlp_norm, &w_gate, &w_up, &w_down}) out.push_back(p);
    }
};

namespace detail {

template <typename T>
Tensor<T> random_normal(Rng& rng, Shape shape, T std_dev) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(std_dev));
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (T& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace detail

/// Frozen decoder-only transformer: pre-norm blocks, rotary positions,
/// SiLU-gated MLP, untied output head.
template <typename T>
class Backbone {
public:
    BackboneConfig cfg;
    Parameter<T> tok_emb;     // [vocab, d]
    std::vector<LayerWeights<T>> layers;
    Parameter<T> final_norm;  // [d]
    Parameter<T> out_proj;    // [d, vocab]
    mutable std::uint64_t forward_calls = 0;

    static Backbone init(const BackboneConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Backbone b;
        b.cfg = cfg;
        Rng rng = make_rng(seed);
        const T std_dev = T(0.02);
        const std::size_t d = cfg.d_model, ff = cfg.d_ff();
        b.tok_emb = Parameter<T>("backbone/tok_emb", detail::random_normal<T>(rng, {cfg.vocab_size, d}, std_dev), false);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            LayerWeights<T> lw;
            const std::string pre = "backbone/layers." + std::to_string(l) + ".";
            lw.attn_norm = Parameter<T>(pre + "attn_norm", Tensor<T>::full({d}, T(1)), false);
            lw.wq = Parameter<T>(pre + "wq", detail::random_normal<T>(rng, {d, d}, std_dev), false);
            lw.wk = Parameter<T>(pre + "wk", detail::random_normal<T>(rng, {d, d}, std_dev), false);
            lw.wv = Parameter<T>(pre + "wv", detail::random_normal<T>(rng, {d, d}, std_dev), false);
            lw.wo = Parameter<T>(pre + "wo", detail::random_normal<T>(rng, {d, d}, std_dev), false);
            lw.mlp_norm = Parameter<T>(pre + "mlp_norm", Tensor<T>::full({d}, T(1)), false);
            lw.w_gate = Parameter<T>(pre + "w_gate", detail::random_normal<T>(rng, {d, ff}, std_dev), false);
            lw.w_up = Parameter<T>(pre + "w_up", detail::random_normal<T>(rng, {d, ff}, std_dev), false);
            lw.w_down = Parameter<T>(pre + "w_down", detail::random_normal<T>(rng, {ff, d}, std_dev), false);
            b.layers.push_back(std::move(lw));
        }
        b.final_norm = Parameter<T>("backbone/final_norm", Tensor<T>::full({d}, T(1)), false);
        // The output head uses a larger scale than the body: the final norm
        // pins the hidden norm to sqrt(d), so a 0.02-scale head would cap
        // logit gaps near zero and no input could ever be predicted
        // confidently. 0.5 mimics the O(1) column norms of a trained head.
        b.out_proj = Parameter<T>("backbone/out_proj", detail::random_normal<T>(rng, {d, cfg.vocab_size}, T(0.5)), false);
        return b;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out{&tok_emb};
        for (auto& l : layers) l.collect(out);
        out.push_back(&final_norm);
        out.push_back(&out_proj);
        return out;
    }

    KvCache<T> make_cache() const { return KvCache<T>(cfg.n_layers, cfg.d_model, cfg.max_positions); }

    /// One decoding position over an input embedding row. Appends exactly one
    /// position to the cache. Differentiable when a tape is supplied.
    StepOutput<T> step_embedding(Tape<T>* tape, const Tensor<T>& x_emb, bool latent, KvCache<T>& cache) const {
        if (x_emb.size() != cfg.d_model)
            throw contract_error("decode_step: input embedding has " + std::to_string(x_emb.size()) +
                                 " dims, expected " + std::to_string(cfg.d_model));
        ++forward_calls;
        cache.mark_position(latent);
        const int pos = cache.position_ids.back();
        Tensor<T> h = x_emb;
        if (h.shape.size() != 2) h.shape = {1, cfg.d_model};
        StepOutput<T> out;
        auto* self = const_cast<Backbone*>(this);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            auto& lw = self->layers[l];
            Tensor<T> a = rmsnorm(tape, h, wt(tape, lw.attn_norm));
            Tensor<T> q = rope(tape, matmul(tape, a, wt(tape, lw.wq)), {pos}, T(cfg.rope_base), cfg.n_heads);
            Tensor<T> k = rope(tape, matmul(tape, a, wt(tape, lw.wk)), {pos}, T(cfg.rope_base), cfg.n_heads);
            Tensor<T> v = matmul(tape, a, wt(tape, lw.wv));
            cache.append_layer_row(l, k, v);
            std::vector<T> probs;
            const bool want_probs = (l + 1 == cfg.n_layers);
            Tensor<T> att = detail::attend_cache(tape, q, cache.layers[l], cfg.n_heads, cache.len() - 1,
                                                 want_probs ? &probs : nullptr);
            h = add(tape, h, matmul(tape, att, wt(tape, lw.wo)));
            Tensor<T> mlp_in = rmsnorm(tape, h, wt(tape, lw.mlp_norm));
            Tensor<T> gated = mul(tape, silu(tape, matmul(tape, mlp_in, wt(tape, lw.w_gate))),
                                  matmul(tape, mlp_in, wt(tape, lw.w_up)));
            h = add(tape, h, matmul(tape, gated, wt(tape, lw.w_down)));
            if (want_probs) out.last_layer_attention = Tensor<T>({cfg.n_heads, cache.len()}, std::move(probs));
        }
        out.last_hidden = rmsnorm(tape, h, wt(tape, self->final_norm));
        out.logits = matmul(tape, out.last_hidden, wt(tape, self->out_proj));
        return out;
    }

    /// Batched causal forward over raw embedding rows (untracked fast path).
    /// Appends one cache position per row. Returns the final row's output and
    /// optionally all per-position logits.
    StepOutput<T> forward_batch(const Tensor<T>& X, const std::vector<bool>& latent_flags, KvCache<T>& cache,
                                Tensor<T>* all_logits = nullptr) const {
        const std::size_t m = X.rows();
        if (m == 0) throw contract_error("forward_batch: empty input");
        if (X.cols() != cfg.d_model) throw contract_error("forward_batch: embedding width mismatch");
        ++forward_calls;
        const std::size_t start = cache.len();
        std::vector<int> positions(m);
        for (std::size_t i = 0; i < m; ++i) {
            cache.mark_position(latent_flags[i]);
            positions[i] = cache.position_ids[start + i];
        }
        auto* self = const_cast<Backbone*>(this);
        Tensor<T> h = X;
        StepOutput<T> out;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            auto& lw = self->layers[l];
            Tensor<T> a = rmsnorm<T>(nullptr, h, lw.attn_norm.value);
            Tensor<T> q = rope<T>(nullptr, matmul<T>(nullptr, a, lw.wq.value), positions, T(cfg.rope_base), cfg.n_heads);
            Tensor<T> k = rope<T>(nullptr, matmul<T>(nullptr, a, lw.wk.value), positions, T(cfg.rope_base), cfg.n_heads);
            Tensor<T> v = matmul<T>(nullptr, a, lw.wv.value);
            auto& L = cache.layers[l];
            L.keys.insert(L.keys.end(), k.data.begin(), k.data.end());
            L.values.insert(L.values.end(), v.data.begin(), v.data.end());
            L.key_nodes.insert(L.key_nodes.end(), m, -1);
            L.value_nodes.insert(L.value_nodes.end(), m, -1);
            std::vector<T> probs;
            const bool want_probs = (l + 1 == cfg.n_layers);
            Tensor<T> att = detail::attend_cache<T>(nullptr, q, L, cfg.n_heads, start, want_probs ? &probs : nullptr);
            h = add<T>(nullptr, h, matmul<T>(nullptr, att, lw.wo.value));
            Tensor<T> mlp_in = rmsnorm<T>(nullptr, h, lw.mlp_norm.value);
            Tensor<T> gated = mul<T>(nullptr, silu<T>(nullptr, matmul<T>(nullptr, mlp_in, lw.w_gate.value)),
                                     matmul<T>(nullptr, mlp_in, lw.w_up.value));
            h = add<T>(nullptr, h, matmul<T>(nullptr, gated, lw.w_down.value));
            if (want_probs) out.last_layer_attention = Tensor<T>({cfg.n_heads, cache.len()}, std::move(probs));
        }
        Tensor<T> normed = rmsnorm<T>(nullptr, h, self->final_norm.value);
        if (all_logits) *all_logits = matmul<T>(nullptr, normed, self->out_proj.value);
        out.last_hidden = take_rows<T>(nullptr, normed, m - 1, 1);
        out.logits = all_logits ? take_rows<T>(nullptr, *all_logits, m - 1, 1)
                                : matmul<T>(nullptr, out.last_hidden, self->out_proj.value);
        return out;
    }

private:
    Tensor<T> wt(Tape<T>* tape, Parameter<T>& p) const { return tape ? tape->watch(p) : p.value; }
};

/// Fills a fresh cache from a token prompt; StepOutput is the final position's.
template <typename T>
std::pair<KvCache<T>, StepOutput<T>> prefill(const Backbone<T>& backbone, const std::vector<int>& tokens) {
    if (tokens.empty()) throw contract_error("prefill: empty token sequence");
    if (tokens.size() > backbone.cfg.max_positions) throw capacity_error("prefill: prompt exceeds max_positions");
    KvCache<T> cache = backbone.make_cache();
    Tensor<T> X = embedding<T>(nullptr, const_cast<Backbone<T>&>(backbone).tok_emb.value, tokens);
    StepOutput<T> out = backbone.forward_batch(X, std::vector<bool>(tokens.size(), false), cache);
    return {std::move(cache), std::move(out)};
}

/// One incremental decoding step from a token id.
template <typename T>
StepOutput<T> decode_step(Tape<T>* tape, const Backbone<T>& backbone, int token, KvCache<T>& cache) {
    Tensor<T> emb = embedding<T>(tape, tape ? tape->watch(const_cast<Backbone<T>&>(backbone).tok_emb)
                                            : const_cast<Backbone<T>&>(backbone).tok_emb.value,
                                 {token});
    return backbone.step_embedding(tape, emb, false, cache);
}

/// One incremental decoding step from a latent embedding (soft injection).
template <typename T>
StepOutput<T> decode_step(Tape<T>* tape, const Backbone<T>& backbone, const Tensor<T>& latent, KvCache<T>& cache) {
    return backbone.step_embedding(tape, latent, true, cache);
}

/// Standard causal forward with no incremental reuse; the oracle for cache
/// fidelity checks. Returns per-position logits [len, vocab].
template <typename T>
Tensor<T> forward_full(const Backbone<T>& backbone, const std::vector<int>& tokens) {
    if (tokens.empty()) throw contract_error("forward_full: empty token sequence");
    if (tokens.size() > backbone.cfg.max_positions) throw capacity_error("forward_full: prompt exceeds max_positions");
    KvCache<T> scratch = backbone.make_cache();
    Tensor<T> X = embedding<T>(nullptr, const_cast<Backbone<T>&>(backbone).tok_emb.value, tokens);
    Tensor<T> logits;
    backbone.forward_batch(X, std::vector<bool>(tokens.size(), false), scratch, &logits);
    return logits;
}

}  // namespace flashmem
