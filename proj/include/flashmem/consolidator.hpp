#pragma once

#include <string>
#include <vector>

#include "flashmem/backbone.hpp"
#include "flashmem/common.hpp"
#include "flashmem/tensor.hpp"

namespace flashmem {

struct ConsolidatorConfig {
    std::size_t n_layers = 1;        // L
    std::size_t n_memory_tokens = 8; // K
    std::size_t d_model = 64;

    void validate(std::size_t backbone_layers) const {
        if (n_layers < 1) throw config_error("consolidator config: n_layers must be >= 1");
        if (n_layers >= backbone_layers)
            throw config_error("consolidator config: n_layers (" + std::to_string(n_layers) +
                               ") must be < backbone layers (" + std::to_string(backbone_layers) + ")");
        if (n_memory_tokens < 1) throw config_error("consolidator config: n_memory_tokens must be >= 1");
    }
};

/// Two-layer MLP mapping the backbone's last hidden state to the seed latent.
template <typename T>
struct ProjectionMlp {
    Parameter<T> w1, b1, w2, b2;

    void collect(std::vector<Parameter<T>*>& out) {
        for (Parameter<T>* p : {&w1, &b1, &w2, &b2}) out.push_back(p);
    }
};

/// One consolidator block: self-attention over the latent prefix,
/// projection-free cross-attention into the backbone cache (query projection
/// only), and a gated MLP. All weights start as copies of a backbone layer
/// except that no cross-attention key/value projections exist at all.
template <typename T>
struct ConsolidatorLayer {
    Parameter<T> self_norm;
    Parameter<T> self_wq, self_wk, self_wv, self_wo;
    Parameter<T> cross_norm;
    Parameter<T> cross_wq, cross_wo;
    Parameter<T> mlp_norm;
    Parameter<T> w_gate, w_up, w_down;

    void collect(std::vector<Parameter<T>*>& out) {
        for (Parameter<T>* p : {&self_norm, &self_wq, &self_wk, &self_wv, &self_wo, &cross_norm, &cross_wq,
                                &cross_wo, &mlp_norm, &w_gate, &w_up, &w_down})
            out.push_back(p);
    }
};

/// K consolidated embeddings plus generation metadata.
template <typename T>
struct LatentMemory {
    Tensor<T> embeddings;  // [K, d_model]
    Tensor<T> seed;        // [1, d_model]
    int trigger_step = -1;
    T trigger_entropy = T(0);
};

template <typename T>
class Consolidator {
public:
    ConsolidatorConfig cfg;
    ProjectionMlp<T> mlp;
    std::vector<ConsolidatorLayer<T>> layers;
    std::size_t backbone_n_layers = 0;
    std::size_t n_heads = 0;
    T rope_base = T(10000);

    /// Layer i copies backbone layer (N - L + i); the cross-attention query
    /// projection copies that layer's query projection and no key/value
    /// projections are instantiated. The projection MLP is freshly seeded.
    static Consolidator inherit_weights(const Backbone<T>& backbone, const ConsolidatorConfig& cfg,
                                        std::uint64_t seed) {
        cfg.validate(backbone.cfg.n_layers);
        if (cfg.d_model != backbone.cfg.d_model)
            throw config_error("consolidator config: d_model must match backbone");
        Consolidator c;
        c.cfg = cfg;
        c.backbone_n_layers = backbone.cfg.n_layers;
        c.n_heads = backbone.cfg.n_heads;
        c.rope_base = T(backbone.cfg.rope_base);
        const std::size_t d = cfg.d_model;
        Rng rng = make_rng(seed);
        c.mlp.w1 = Parameter<T>("consolidator/mlp.w1", detail::random_normal<T>(rng, {d, d}, T(0.02)), true);
        c.mlp.b1 = Parameter<T>("consolidator/mlp.b1", Tensor<T>::zeros({d}), true);
        c.mlp.w2 = Parameter<T>("consolidator/mlp.w2", detail::random_normal<T>(rng, {d, d}, T(0.02)), true);
        c.mlp.b2 = Parameter<T>("consolidator/mlp.b2", Tensor<T>::zeros({d}), true);
        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
            const auto& src = backbone.layers[backbone.cfg.n_layers - cfg.n_layers + i];
            const std::string pre = "consolidator/layers." + std::to_string(i) + ".";
            ConsolidatorLayer<T> lw;
            lw.self_norm = Parameter<T>(pre + "self_norm", src.attn_norm.value, true);
            lw.self_wq = Parameter<T>(pre + "self_wq", src.wq.value, true);
            lw.self_wk = Parameter<T>(pre + "self_wk", src.wk.value, true);
            lw.self_wv = Parameter<T>(pre + "self_wv", src.wv.value, true);
            lw.self_wo = Parameter<T>(pre + "self_wo", src.wo.value, true);
            lw.cross_norm = Parameter<T>(pre + "cross_norm", src.attn_norm.value, true);
            lw.cross_wq = Parameter<T>(pre + "cross_wq", src.wq.value, true);
            lw.cross_wo = Parameter<T>(pre + "cross_wo", src.wo.value, true);
            lw.mlp_norm = Parameter<T>(pre + "mlp_norm", src.mlp_norm.value, true);
            lw.w_gate = Parameter<T>(pre + "w_gate", src.w_gate.value, true);
            lw.w_up = Parameter<T>(pre + "w_up", src.w_up.value, true);
            lw.w_down = Parameter<T>(pre + "w_down", src.w_down.value, true);
            c.layers.push_back(std::move(lw));
        }
        return c;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        mlp.collect(out);
        for (auto& l : layers) l.collect(out);
        return out;
    }

    /// Exact trainable scalar count; linear in the layer count.
    std::size_t param_count() {
        std::size_t n = 0;
        for (const Parameter<T>* p : parameters())
            if (p->trainable) n += p->value.size();
        return n;
    }

    /// m_0 = W2 * silu(W1 * h_t + b1) + b2
    Tensor<T> project_state(Tape<T>* tape, const Tensor<T>& h_t) {
        Tensor<T> x = h_t;
        if (x.size() != cfg.d_model) throw contract_error("project_state: h_t width mismatch");
        if (x.shape.size() != 2) x.shape = {1, cfg.d_model};
        Tensor<T> hidden = silu(tape, add_rowvec(tape, matmul(tape, x, wt(tape, mlp.w1)), wt(tape, mlp.b1)));
        return add_rowvec(tape, matmul(tape, hidden, wt(tape, mlp.w2)), wt(tape, mlp.b2));
    }

    /// Index of the backbone layer whose cache consolidator layer i reads.
    std::size_t cache_layer_index(std::size_t i) const { return backbone_n_layers - cfg.n_layers + i; }

    /// Projection-free cross-attention (query projection only) into a
    /// backbone cache layer. Queries are not rotary-rotated. Output passes
    /// through the inherited output projection.
    Tensor<T> cross_attend(Tape<T>* tape, const Tensor<T>& x, const KvCache<T>& cache, std::size_t layer_index) {
        if (layer_index >= cfg.n_layers) throw contract_error("cross_attend: layer index out of range");
        if (cache.len() == 0) throw contract_error("cross_attend: empty cache");
        Tensor<T> xin = x;
        if (xin.shape.size() != 2) xin.shape = {xin.size() / cfg.d_model, cfg.d_model};
        auto& lw = layers[layer_index];
        Tensor<T> q = matmul(tape, xin, wt(tape, lw.cross_wq));
        // start = clen-1 gives every query row the full cache
        Tensor<T> att = detail::attend_cache<T>(tape, q, cache.layers[cache_layer_index(layer_index)], n_heads,
                                             cache.len() - 1, nullptr);
        return matmul(tape, att, wt(tape, lw.cross_wo));
    }

    /// Autoregressive latent synthesis: step i runs the L-layer stack over the
    /// latent prefix and emits the last position. Reads the backbone cache
    /// only; never runs the backbone.
    std::vector<Tensor<T>> generate_latents(Tape<T>* tape, const Tensor<T>& m0, const KvCache<T>& cache) {
        if (cache.len() == 0) throw contract_error("generate_latents: empty cache");
        std::vector<Tensor<T>> latents;
        Tensor<T> seed = m0;
        if (seed.shape.size() != 2) seed.shape = {1, cfg.d_model};
        std::vector<Tensor<T>> prefix{seed};
        for (std::size_t step = 0; step < cfg.n_memory_tokens; ++step) {
            Tensor<T> X = prefix[0];
            for (std::size_t i = 1; i < prefix.size(); ++i) X = concat_rows(tape, X, prefix[i]);
            Tensor<T> out = run_stack(tape, X, cache);
            Tensor<T> mi = take_rows(tape, out, out.rows() - 1, 1);
            latents.push_back(mi);
            prefix.push_back(mi);
        }
        return latents;
    }

    /// Untracked convenience path used by the inference engine.
    LatentMemory<T> generate(const Tensor<T>& h_t, const KvCache<T>& cache, int trigger_step, T trigger_entropy) {
        LatentMemory<T> mem;
        mem.seed = project_state(nullptr, h_t);
        std::vector<Tensor<T>> latents = generate_latents(nullptr, mem.seed, cache);
        mem.embeddings = latents[0];
        for (std::size_t i = 1; i < latents.size(); ++i)
            mem.embeddings = concat_rows<T>(nullptr, mem.embeddings, latents[i]);
        mem.trigger_step = trigger_step;
        mem.trigger_entropy = trigger_entropy;
        return mem;
    }

private:
    Tensor<T> wt(Tape<T>* tape, Parameter<T>& p) { return tape ? tape->watch(p) : p.value; }

    /// Pre-norm [latent self-attention] -> pre-norm [cross-attention into the
    /// backbone cache] -> pre-norm [gated MLP], each with a residual.
    Tensor<T> run_stack(Tape<T>* tape, const Tensor<T>& X0, const KvCache<T>& cache) {
        const std::size_t m = X0.rows();
        const std::size_t dh = cfg.d_model / n_heads;
        std::vector<int> positions(m);
        for (std::size_t i = 0; i < m; ++i) positions[i] = static_cast<int>(i);  // local latent positions
        Tensor<T> X = X0;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            auto& lw = layers[l];
            // causal self-attention among latents
            Tensor<T> a = rmsnorm(tape, X, wt(tape, lw.self_norm));
            Tensor<T> q = rope(tape, matmul(tape, a, wt(tape, lw.self_wq)), positions, rope_base, n_heads);
            Tensor<T> k = rope(tape, matmul(tape, a, wt(tape, lw.self_wk)), positions, rope_base, n_heads);
            Tensor<T> v = matmul(tape, a, wt(tape, lw.self_wv));
            std::vector<Tensor<T>> heads;
            const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
            for (std::size_t h = 0; h < n_heads; ++h) {
                Tensor<T> qh = slice_cols(tape, q, h * dh, dh);
                Tensor<T> kh = slice_cols(tape, k, h * dh, dh);
                Tensor<T> vh = slice_cols(tape, v, h * dh, dh);
                Tensor<T> p = causal_softmax(tape, scale(tape, matmul_nt(tape, qh, kh), inv_sqrt), 0);
                heads.push_back(matmul(tape, p, vh));
            }
            X = add(tape, X, matmul(tape, concat_cols(tape, heads), wt(tape, lw.self_wo)));
            // projection-free cross-attention into the backbone cache
            Tensor<T> c = rmsnorm(tape, X, wt(tape, lw.cross_norm));
            Tensor<T> cq = matmul(tape, c, wt(tape, lw.cross_wq));
            Tensor<T> catt = detail::attend_cache<T>(tape, cq, cache.layers[cache_layer_index(l)], n_heads,
                                                  cache.len() - 1, nullptr);
            X = add(tape, X, matmul(tape, catt, wt(tape, lw.cross_wo)));
            // gated MLP
            Tensor<T> mlp_in = rmsnorm(tape, X, wt(tape, lw.mlp_norm));
            Tensor<T> gated = mul(tape, silu(tape, matmul(tape, mlp_in, wt(tape, lw.w_gate))),
                                  matmul(tape, mlp_in, wt(tape, lw.w_up)));
            X = add(tape, X, matmul(tape, gated, wt(tape, lw.w_down)));
        }
        return X;
    }
};

}  // namespace flashmem
