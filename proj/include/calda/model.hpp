#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "calda/ops.hpp"
#include "calda/rng.hpp"
#include "calda/tensor.hpp"

namespace calda {

// Architecture knobs for the four networks F, C, D, Z.
struct ModelConfig {
    std::size_t in_channels = 9;
    std::vector<std::size_t> conv_filters{64, 128, 64};
    std::vector<std::size_t> conv_widths{8, 5, 3};
    std::size_t n_classes = 3;
    std::size_t n_domains = 7;    // adversary outputs: n sources + target (n when DG)
    std::size_t domain_hidden = 128;
    std::size_t proj_dim = 128;
};

struct Dense {
    Tensor w, b;
};

struct ConvBlock {
    Tensor kernels, bias;
};

// All trainable weights: conv stack for F, affine heads for C and Z, and a
// two-layer MLP for D.
struct ModelParams {
    ModelConfig config;
    std::vector<ConvBlock> conv;
    Dense task_head;
    std::vector<Dense> domain_head;
    Dense contrastive_head;

    std::size_t feature_dim() const { return config.conv_filters.back(); }
};

// Visits every parameter tensor with a stable name; the same order is used
// for gradients, Adam moments, and checkpoints.
template <typename Params, typename Fn>
void for_each_param(Params& p, Fn&& fn) {
    for (std::size_t i = 0; i < p.conv.size(); ++i) {
        fn("f.conv" + std::to_string(i) + ".kernels", p.conv[i].kernels);
        fn("f.conv" + std::to_string(i) + ".bias", p.conv[i].bias);
    }
    fn("c.w", p.task_head.w);
    fn("c.b", p.task_head.b);
    for (std::size_t i = 0; i < p.domain_head.size(); ++i) {
        fn("d.layer" + std::to_string(i) + ".w", p.domain_head[i].w);
        fn("d.layer" + std::to_string(i) + ".b", p.domain_head[i].b);
    }
    fn("z.w", p.contrastive_head.w);
    fn("z.b", p.contrastive_head.b);
}

inline void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.data) v = rng.normal(0.0, stddev);
}

inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    ModelParams p;
    p.config = cfg;
    std::size_t ch = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.conv_filters.size(); ++i) {
        const std::size_t out = cfg.conv_filters[i], width = cfg.conv_widths[i];
        ConvBlock blk{Tensor({out, ch, width}), Tensor({out})};
        fill_normal(blk.kernels, rng, std::sqrt(2.0 / static_cast<double>(ch * width)));
        p.conv.push_back(std::move(blk));
        ch = out;
    }
    const std::size_t feat = ch;
    auto make_dense = [&](std::size_t in, std::size_t out) {
        Dense d{Tensor({in, out}), Tensor({out})};
        fill_normal(d.w, rng, std::sqrt(2.0 / static_cast<double>(in)));
        return d;
    };
    p.task_head = make_dense(feat, cfg.n_classes);
    p.domain_head.push_back(make_dense(feat, cfg.domain_hidden));
    p.domain_head.push_back(make_dense(cfg.domain_hidden, cfg.n_domains));
    p.contrastive_head = make_dense(feat, cfg.proj_dim);
    return p;
}

// Gradient container with the same layout as ModelParams.
inline ModelParams zeros_like(const ModelParams& p) {
    ModelParams g;
    g.config = p.config;
    for (const auto& blk : p.conv)
        g.conv.push_back({Tensor(blk.kernels.shape), Tensor(blk.bias.shape)});
    g.task_head = {Tensor(p.task_head.w.shape), Tensor(p.task_head.b.shape)};
    for (const auto& d : p.domain_head)
        g.domain_head.push_back({Tensor(d.w.shape), Tensor(d.b.shape)});
    g.contrastive_head = {Tensor(p.contrastive_head.w.shape),
                          Tensor(p.contrastive_head.b.shape)};
    return g;
}

// Intermediate activations of one forward pass, kept for the backward pass.
struct FeatureCache {
    Tensor input;
    std::vector<Tensor> conv_out;   // pre-activation per block
    std::vector<Tensor> relu_out;   // post-activation per block
    Tensor features;                // after global average pooling
};

// Stacked conv -> relu blocks followed by global average pooling.
inline Tensor feature_extract(const ModelParams& p, const Tensor& x,
                              FeatureCache* cache = nullptr) {
    check(x.rank() == 3, "feature_extract: expected [batch, ch, time]");
    check(x.shape[1] == p.config.in_channels, "feature_extract: channel mismatch");
    if (cache) cache->input = x;
    Tensor cur = x;
    for (const auto& blk : p.conv) {
        Tensor pre = conv1d_forward(cur, blk.kernels, blk.bias, Padding::Same);
        Tensor post = relu_forward(pre);
        if (cache) {
            cache->conv_out.push_back(pre);
            cache->relu_out.push_back(post);
        }
        cur = std::move(post);
    }
    Tensor f = global_avg_pool(cur);
    if (cache) cache->features = f;
    return f;
}

// Backpropagate d(loss)/d(features) through the conv stack, accumulating
// kernel/bias gradients into `grads`.
inline void feature_backward(const ModelParams& p, const FeatureCache& cache,
                             const Tensor& dfeatures, ModelParams& grads) {
    Tensor g = gap_backward(cache.relu_out.back().shape, dfeatures);
    for (std::size_t i = p.conv.size(); i-- > 0;) {
        g = relu_backward(cache.conv_out[i], g);
        const Tensor& in = i == 0 ? cache.input : cache.relu_out[i - 1];
        Conv1dGrads cg = conv1d_backward(in, p.conv[i].kernels, g, Padding::Same);
        for (std::size_t k = 0; k < cg.dkernels.size(); ++k)
            grads.conv[i].kernels.data[k] += cg.dkernels.data[k];
        for (std::size_t k = 0; k < cg.dbias.size(); ++k)
            grads.conv[i].bias.data[k] += cg.dbias.data[k];
        g = std::move(cg.dx);
    }
}

struct HeadsCache {
    Tensor features;
    Tensor task_logits, task_log_probs;
    Tensor domain_hidden_pre, domain_hidden;   // first MLP layer
    Tensor domain_logits, domain_log_probs;
    Tensor z;
};

// Three independent maps from the shared features; no activation on z
// (cosine similarity normalizes).
inline void heads_forward(const ModelParams& p, const Tensor& features, HeadsCache& cache) {
    cache.features = features;
    cache.task_logits = affine_forward(features, p.task_head.w, p.task_head.b);
    cache.task_log_probs = log_softmax(cache.task_logits);
    cache.domain_hidden_pre =
        affine_forward(features, p.domain_head[0].w, p.domain_head[0].b);
    cache.domain_hidden = relu_forward(cache.domain_hidden_pre);
    cache.domain_logits =
        affine_forward(cache.domain_hidden, p.domain_head[1].w, p.domain_head[1].b);
    cache.domain_log_probs = log_softmax(cache.domain_logits);
    cache.z = affine_forward(features, p.contrastive_head.w, p.contrastive_head.b);
}

// Gradient reversal: identity forward, -lambda_d scaling backward.
inline Tensor grl_backward(const Tensor& output_grad, double lambda_d) {
    check(lambda_d >= 0.0, "grl_backward: lambda_d must be >= 0");
    Tensor g(output_grad.shape);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = -lambda_d * output_grad.data[i];
    return g;
}

struct GrlSchedule {
    double gamma = 10.0;
};

// lambda_d(progress) = 2 / (1 + exp(-gamma * progress)) - 1, in [0, 1).
inline double lambda_schedule(const GrlSchedule& s, double progress) {
    check(progress >= 0.0 && progress <= 1.0, "lambda_schedule: progress out of [0,1]");
    return 2.0 / (1.0 + std::exp(-s.gamma * progress)) - 1.0;
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
};

struct AdamState {
    ModelParams m, v;
    std::int64_t step = 0;
};

inline AdamState init_adam(const ModelParams& p) {
    return AdamState{zeros_like(p), zeros_like(p), 0};
}

// Bias-corrected Adam update, in place. One step-counter increment per call.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                      const AdamConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::vector<Tensor*> ps, gs, ms, vs;
    std::vector<std::string> names;
    for_each_param(params, [&](const std::string& n, Tensor& t) {
        ps.push_back(&t);
        names.push_back(n);
    });
    for_each_param(const_cast<ModelParams&>(grads),
                   [&](const std::string&, Tensor& t) { gs.push_back(&t); });
    for_each_param(state.m, [&](const std::string&, Tensor& t) { ms.push_back(&t); });
    for_each_param(state.v, [&](const std::string&, Tensor& t) { vs.push_back(&t); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
        check(gs[i]->same_shape(*ps[i]), "adam_step: gradient shape mismatch for " + names[i]);
        check(gs[i]->all_finite(), "adam_step: non-finite gradient for " + names[i]);
        for (std::size_t k = 0; k < ps[i]->size(); ++k) {
            const double g = gs[i]->data[k];
            double& m = ms[i]->data[k];
            double& v = vs[i]->data[k];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            ps[i]->data[k] -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon);
        }
    }
}

// --- Checkpoint format ------------------------------------------------------
// magic "CALDACKPT1", u64 LE tensor count, then per tensor:
// u64 name length, UTF-8 name, u64 rank, u64 extents, raw f64 LE data.
// The Adam step counter is stored as a 1-element tensor named "adam.step".

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    check(static_cast<bool>(is), "checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_u64(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, t.rank());
    for (std::size_t e : t.shape) write_u64(os, e);
    for (double v : t.data) write_f64(os, v);
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "CALDACKPT1";

inline void checkpoint_save(const ModelParams& params, const AdamState& state,
                            const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "checkpoint_save: cannot open " + path);
    os.write(kCheckpointMagic, 10);
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for_each_param(const_cast<ModelParams&>(params),
                   [&](const std::string& n, Tensor& t) { tensors.emplace_back(n, &t); });
    for_each_param(const_cast<ModelParams&>(state.m), [&](const std::string& n, Tensor& t) {
        tensors.emplace_back("adam.m." + n, &t);
    });
    for_each_param(const_cast<ModelParams&>(state.v), [&](const std::string& n, Tensor& t) {
        tensors.emplace_back("adam.v." + n, &t);
    });
    Tensor step({1});
    step.data[0] = static_cast<double>(state.step);
    detail::write_u64(os, tensors.size() + 1);
    for (const auto& [name, t] : tensors) detail::write_tensor(os, name, *t);
    detail::write_tensor(os, "adam.step", step);
    check(static_cast<bool>(os), "checkpoint_save: write failed for " + path);
}

// Loads into an existing params/state pair (shapes define the expected layout).
inline void checkpoint_load(ModelParams& params, AdamState& state, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(static_cast<bool>(is), "checkpoint_load: cannot open " + path);
    char magic[10];
    is.read(magic, 10);
    check(static_cast<bool>(is) && std::memcmp(magic, kCheckpointMagic, 10) == 0,
          "checkpoint_load: bad magic (format-version mismatch)");
    const std::uint64_t count = detail::read_u64(is);

    std::vector<std::pair<std::string, Tensor*>> slots;
    for_each_param(params, [&](const std::string& n, Tensor& t) { slots.emplace_back(n, &t); });
    for_each_param(state.m, [&](const std::string& n, Tensor& t) {
        slots.emplace_back("adam.m." + n, &t);
    });
    for_each_param(state.v, [&](const std::string& n, Tensor& t) {
        slots.emplace_back("adam.v." + n, &t);
    });

    bool saw_step = false;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = detail::read_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        check(static_cast<bool>(is), "checkpoint_load: truncated file");
        const std::uint64_t rank = detail::read_u64(is);
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = detail::read_u64(is);
        Tensor t(shape);
        for (double& v : t.data) v = detail::read_f64(is);
        if (name == "adam.step") {
            state.step = static_cast<std::int64_t>(t.data[0]);
            saw_step = true;
            continue;
        }
        bool found = false;
        for (auto& [slot_name, slot] : slots)
            if (slot_name == name) {
                check(slot->shape == t.shape,
                      "checkpoint_load: shape mismatch for tensor " + name);
                *slot = std::move(t);
                found = true;
                break;
            }
        check(found, "checkpoint_load: unexpected tensor " + name);
    }
    check(saw_step, "checkpoint_load: missing adam.step");
}

}  // namespace calda
