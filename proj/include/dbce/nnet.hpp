#ifndef DBCE_NNET_HPP
#define DBCE_NNET_HPP

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dbce/grid.hpp"
#include "dbce/io.hpp"
#include "dbce/rng.hpp"

namespace dbce {

// Minimal fully convolutional head: `depth` 3x3 conv+ReLU blocks at constant
// width, then a 1x1 conv to class logits. No downsampling, so the receptive
// field stays local and backprop stays hand-checkable.
struct ModelConfig {
    int in_channels = 1;
    int hidden = 16;
    int depth = 2; // number of 3x3 blocks
    int classes = 2;
    std::uint64_t seed = 0;

    void validate() const {
        if (in_channels < 1) throw std::invalid_argument("ModelConfig: in_channels must be >= 1");
        if (hidden < 1) throw std::invalid_argument("ModelConfig: hidden must be >= 1");
        if (depth < 1 || depth > 8) throw std::invalid_argument("ModelConfig: depth must be in [1, 8]");
        if (classes < 2) throw std::invalid_argument("ModelConfig: classes must be >= 2");
    }
};

struct ConvLayer {
    int in_ch = 0, out_ch = 0, ksize = 0;
    std::vector<double> weights; // [out][in][ky][kx]
    std::vector<double> bias;    // [out]
};

struct Model {
    ModelConfig config;
    std::vector<ConvLayer> layers; // depth 3x3 layers then the 1x1 head
};

namespace detail {

// channel-major stack of H x W planes
struct Tensor3 {
    int ch = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor3() = default;
    Tensor3(int ch_, int h_, int w_)
        : ch(ch_), h(h_), w(w_), v(static_cast<std::size_t>(ch_) * h_ * w_, 0.0) {}

    void ensure_shape(int ch_, int h_, int w_) {
        ch = ch_;
        h = h_;
        w = w_;
        v.resize(static_cast<std::size_t>(ch_) * h_ * w_);
    }

    double* plane(int c) { return v.data() + static_cast<std::size_t>(c) * h * w; }
    const double* plane(int c) const { return v.data() + static_cast<std::size_t>(c) * h * w; }
};

// out += conv3x3(in) with zero same-padding; `out` rows must already hold the
// bias. Row-resident accumulation, three taps unrolled, two output channels
// per input-row pass.
inline void conv3x3_accumulate(const Tensor3& in, const double* weights, Tensor3& out) {
    const int H = in.h, W = in.w;
    const int in_ch = in.ch;
    for (int y = 0; y < H; ++y) {
        for (int ic = 0; ic < in_ch; ++ic) {
            for (int ky = 0; ky < 3; ++ky) {
                const int yy = y + ky - 1;
                if (yy < 0 || yy >= H) continue;
                const double* __restrict irow =
                    in.plane(ic) + static_cast<std::size_t>(yy) * W;
                int oc = 0;
                for (; oc + 1 < out.ch; oc += 2) {
                    const double* wk0 =
                        weights + ((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + ky) * 3;
                    const double* wk1 =
                        weights +
                        ((static_cast<std::size_t>(oc + 1) * in_ch + ic) * 3 + ky) * 3;
                    double* __restrict o0 = out.plane(oc) + static_cast<std::size_t>(y) * W;
                    double* __restrict o1 =
                        out.plane(oc + 1) + static_cast<std::size_t>(y) * W;
                    const double a0 = wk0[0], a1 = wk0[1], a2 = wk0[2];
                    const double b0 = wk1[0], b1 = wk1[1], b2 = wk1[2];
                    o0[0] += a1 * irow[0] + a2 * irow[1];
                    o1[0] += b1 * irow[0] + b2 * irow[1];
                    for (int x = 1; x < W - 1; ++x) {
                        const double l = irow[x - 1], m = irow[x], r = irow[x + 1];
                        o0[x] += a0 * l + a1 * m + a2 * r;
                        o1[x] += b0 * l + b1 * m + b2 * r;
                    }
                    o0[W - 1] += a0 * irow[W - 2] + a1 * irow[W - 1];
                    o1[W - 1] += b0 * irow[W - 2] + b1 * irow[W - 1];
                }
                for (; oc < out.ch; ++oc) {
                    const double* wk =
                        weights + ((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + ky) * 3;
                    double* __restrict orow = out.plane(oc) + static_cast<std::size_t>(y) * W;
                    const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
                    orow[0] += w1 * irow[0] + w2 * irow[1];
                    for (int x = 1; x < W - 1; ++x)
                        orow[x] += w0 * irow[x - 1] + w1 * irow[x] + w2 * irow[x + 1];
                    orow[W - 1] += w0 * irow[W - 2] + w1 * irow[W - 1];
                }
            }
        }
    }
}

inline void conv_forward(const Tensor3& in, const ConvLayer& layer, Tensor3& out) {
    out.ensure_shape(layer.out_ch, in.h, in.w);
    const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;
    for (int oc = 0; oc < layer.out_ch; ++oc)
        std::fill(out.plane(oc), out.plane(oc) + plane, layer.bias[oc]);
    if (layer.ksize == 3) {
        conv3x3_accumulate(in, layer.weights.data(), out);
    } else { // 1x1
        for (int oc = 0; oc < layer.out_ch; ++oc) {
            double* __restrict op = out.plane(oc);
            for (int ic = 0; ic < layer.in_ch; ++ic) {
                const double w = layer.weights[static_cast<std::size_t>(oc) * layer.in_ch + ic];
                const double* __restrict ip = in.plane(ic);
                for (std::size_t i = 0; i < plane; ++i) op[i] += w * ip[i];
            }
        }
    }
}

} // namespace detail

struct LayerGrads {
    std::vector<double> weights;
    std::vector<double> bias;
};
using ParamGrads = std::vector<LayerGrads>;

// Holds the activations backward() needs plus reusable scratch; reuse one
// cache across samples to keep the hot loop allocation-free.
struct ForwardCache {
    detail::Tensor3 input;
    std::vector<detail::Tensor3> post; // relu(conv(.)) per 3x3 block
    // scratch
    detail::Tensor3 logits_scratch;
    detail::Tensor3 delta, delta_next;
};

// He-style init: kernel entries ~ N(0, 2/fan_in), biases zero, deterministic
// for the seed.
inline Model init_model(const ModelConfig& cfg) {
    cfg.validate();
    Model model;
    model.config = cfg;
    Rng rng(cfg.seed);
    const auto make_layer = [&](int in_ch, int out_ch, int ksize) {
        ConvLayer layer;
        layer.in_ch = in_ch;
        layer.out_ch = out_ch;
        layer.ksize = ksize;
        layer.weights.resize(static_cast<std::size_t>(out_ch) * in_ch * ksize * ksize);
        layer.bias.assign(out_ch, 0.0);
        const double scale = std::sqrt(2.0 / (static_cast<double>(in_ch) * ksize * ksize));
        for (double& w : layer.weights) w = scale * rng.normal();
        return layer;
    };
    int in_ch = cfg.in_channels;
    for (int d = 0; d < cfg.depth; ++d) {
        model.layers.push_back(make_layer(in_ch, cfg.hidden, 3));
        in_ch = cfg.hidden;
    }
    model.layers.push_back(make_layer(in_ch, cfg.classes, 1));
    return model;
}

// Same-padded forward pass; fills `cache` for backward() when given.
inline LogitMap forward(const Model& model, const FloatGrid& image,
                        ForwardCache* cache = nullptr) {
    const int H = image.height(), W = image.width();
    if (H < 3 || W < 3)
        throw std::invalid_argument("forward: image dims smaller than the kernel extent");
    if (model.config.in_channels != 1)
        throw std::invalid_argument("forward: FloatGrid input requires in_channels == 1");

    ForwardCache local;
    ForwardCache& buf = cache ? *cache : local;
    const int depth = model.config.depth;
    buf.input.ensure_shape(1, H, W);
    std::copy(image.data(), image.data() + image.size(), buf.input.v.begin());
    buf.post.resize(depth);

    const detail::Tensor3* src = &buf.input;
    for (int d = 0; d < depth; ++d) {
        detail::conv_forward(*src, model.layers[d], buf.post[d]);
        for (double& v : buf.post[d].v) v = v > 0.0 ? v : 0.0;
        src = &buf.post[d];
    }
    detail::conv_forward(*src, model.layers.back(), buf.logits_scratch);

    LogitMap logits(Dims{H, W, model.config.classes});
    std::copy(buf.logits_scratch.v.begin(), buf.logits_scratch.v.end(), logits.data());
    return logits;
}

// Exact gradients of sum(logits . grad_logits) with respect to every
// parameter, via the cache of the matching forward pass. The relu masks come
// from the cached activations (post > 0 iff pre > 0).
inline ParamGrads backward(const Model& model, ForwardCache& cache,
                           const GradMap& grad_logits) {
    const int depth = model.config.depth;
    if (static_cast<int>(cache.post.size()) != depth || cache.input.v.empty())
        throw std::invalid_argument("backward: cache does not match the model");
    const int H = cache.input.h, W = cache.input.w;
    const Dims gdims = grad_logits.dims();
    if (gdims.height != H || gdims.width != W || gdims.classes != model.config.classes)
        throw std::invalid_argument("backward: grad_logits shape mismatch");
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    ParamGrads grads(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        grads[l].weights.assign(model.layers[l].weights.size(), 0.0);
        grads[l].bias.assign(model.layers[l].bias.size(), 0.0);
    }

    // 1x1 head
    const ConvLayer& head = model.layers.back();
    LayerGrads& head_grads = grads.back();
    const detail::Tensor3& head_in = cache.post.back();
    detail::Tensor3& delta = cache.delta; // gradient flowing into the last block
    delta.ensure_shape(head.in_ch, H, W);
    std::fill(delta.v.begin(), delta.v.end(), 0.0);
    for (int oc = 0; oc < head.out_ch; ++oc) {
        const double* __restrict g = grad_logits.plane(oc);
        double bsum = 0.0;
#pragma omp simd reduction(+ : bsum)
        for (std::size_t i = 0; i < plane; ++i) bsum += g[i];
        head_grads.bias[oc] = bsum;
        for (int ic = 0; ic < head.in_ch; ++ic) {
            const double* __restrict a = head_in.plane(ic);
            double wsum = 0.0;
#pragma omp simd reduction(+ : wsum)
            for (std::size_t i = 0; i < plane; ++i) wsum += g[i] * a[i];
            head_grads.weights[static_cast<std::size_t>(oc) * head.in_ch + ic] = wsum;
            const double w = head.weights[static_cast<std::size_t>(oc) * head.in_ch + ic];
            double* __restrict dp = delta.plane(ic);
            for (std::size_t i = 0; i < plane; ++i) dp[i] += w * g[i];
        }
    }

    // 3x3 blocks, last to first
    for (int d = depth - 1; d >= 0; --d) {
        const ConvLayer& layer = model.layers[d];
        LayerGrads& lg = grads[d];
        // through the relu of block d
        const detail::Tensor3& act = cache.post[d];
        for (std::size_t i = 0; i < delta.v.size(); ++i)
            if (act.v[i] <= 0.0) delta.v[i] = 0.0;
        const detail::Tensor3& in_act = d == 0 ? cache.input : cache.post[d - 1];

        for (int oc = 0; oc < layer.out_ch; ++oc) {
            const double* __restrict g = delta.plane(oc);
            double bsum = 0.0;
#pragma omp simd reduction(+ : bsum)
            for (std::size_t i = 0; i < plane; ++i) bsum += g[i];
            lg.bias[oc] = bsum;
        }
        // dW[oc][ic][ky][kx] = sum_{y,x} delta[oc](y,x) * in[ic](y+ky-1, x+kx-1)
        for (int y = 0; y < H; ++y) {
            for (int ic = 0; ic < layer.in_ch; ++ic) {
                for (int ky = 0; ky < 3; ++ky) {
                    const int yy = y + ky - 1;
                    if (yy < 0 || yy >= H) continue;
                    const double* __restrict irow =
                        in_act.plane(ic) + static_cast<std::size_t>(yy) * W;
                    for (int oc = 0; oc < layer.out_ch; ++oc) {
                        const double* __restrict grow =
                            delta.plane(oc) + static_cast<std::size_t>(y) * W;
                        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
                        s1 += grow[0] * irow[0];
                        s2 += grow[0] * irow[1];
#pragma omp simd reduction(+ : s0, s1, s2)
                        for (int x = 1; x < W - 1; ++x) {
                            const double gx = grow[x];
                            s0 += gx * irow[x - 1];
                            s1 += gx * irow[x];
                            s2 += gx * irow[x + 1];
                        }
                        s0 += grow[W - 1] * irow[W - 2];
                        s1 += grow[W - 1] * irow[W - 1];
                        double* wg =
                            lg.weights.data() +
                            ((static_cast<std::size_t>(oc) * layer.in_ch + ic) * 3 + ky) * 3;
                        wg[0] += s0;
                        wg[1] += s1;
                        wg[2] += s2;
                    }
                }
            }
        }
        if (d == 0) break; // no input gradient needed below the first layer

        // d_in[ic](y,x) = sum_{oc,ky,kx} w[oc][ic][ky][kx] * delta[oc](y-ky+1, x-kx+1)
        detail::Tensor3& din = cache.delta_next;
        din.ensure_shape(layer.in_ch, H, W);
        std::fill(din.v.begin(), din.v.end(), 0.0);
        for (int y = 0; y < H; ++y) {
            for (int oc = 0; oc < layer.out_ch; ++oc) {
                for (int ky = 0; ky < 3; ++ky) {
                    const int yy = y - (ky - 1);
                    if (yy < 0 || yy >= H) continue;
                    const double* __restrict grow =
                        delta.plane(oc) + static_cast<std::size_t>(yy) * W;
                    for (int ic = 0; ic < layer.in_ch; ++ic) {
                        const double* wk =
                            layer.weights.data() +
                            ((static_cast<std::size_t>(oc) * layer.in_ch + ic) * 3 + ky) * 3;
                        double* __restrict drow =
                            din.plane(ic) + static_cast<std::size_t>(y) * W;
                        const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
                        // tap kx shifts by -(kx-1) here
                        drow[0] += w1 * grow[0] + w0 * grow[1];
                        for (int x = 1; x < W - 1; ++x)
                            drow[x] += w2 * grow[x - 1] + w1 * grow[x] + w0 * grow[x + 1];
                        drow[W - 1] += w2 * grow[W - 2] + w1 * grow[W - 1];
                    }
                }
            }
        }
        std::swap(delta, din);
    }
    return grads;
}

// Adam with bias correction; decoupled weight decay applied as
// p <- p - lr*wd*p before the moment update.
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
    long long step = 0;
    std::vector<LayerGrads> m, v; // first/second moments, shaped like the params
};

inline AdamState init_adam_state(const Model& model) {
    AdamState state;
    state.m.resize(model.layers.size());
    state.v.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        state.m[l].weights.assign(model.layers[l].weights.size(), 0.0);
        state.m[l].bias.assign(model.layers[l].bias.size(), 0.0);
        state.v[l].weights.assign(model.layers[l].weights.size(), 0.0);
        state.v[l].bias.assign(model.layers[l].bias.size(), 0.0);
    }
    return state;
}

inline void adam_step(Model& model, const ParamGrads& grads, AdamState& state, double lr,
                      double weight_decay) {
    if (grads.size() != model.layers.size() || state.m.size() != model.layers.size())
        throw std::invalid_argument("adam_step: gradient/state shape mismatch");
    for (const LayerGrads& lg : grads)
        for (const auto* vec : {&lg.weights, &lg.bias})
            for (double g : *vec)
                if (!std::isfinite(g))
                    throw std::runtime_error("adam_step: non-finite gradient");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                            std::vector<double>& m, std::vector<double>& v) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] -= lr * weight_decay * p[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    };
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        update(model.layers[l].weights, grads[l].weights, state.m[l].weights,
               state.v[l].weights);
        update(model.layers[l].bias, grads[l].bias, state.m[l].bias, state.v[l].bias);
    }
}

// ---- checkpoint: magic, config block, then parameter tensors in declared
// order as little-endian 8-byte floats; bit-exact round trip ----

namespace detail {

constexpr char kCheckpointMagic[8] = {'D', 'B', 'C', 'E', 'M', 'D', 'L', '1'};

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

} // namespace detail

inline void save_model(const Model& model, const std::string& path) {
    std::string out(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.in_channels));
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.hidden));
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.depth));
    detail::put_u32(out, static_cast<std::uint32_t>(model.config.classes));
    detail::put_u64(out, model.config.seed);
    for (const ConvLayer& layer : model.layers) {
        for (double w : layer.weights) detail::put_u64(out, std::bit_cast<std::uint64_t>(w));
        for (double b : layer.bias) detail::put_u64(out, std::bit_cast<std::uint64_t>(b));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error(path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error(path + ": write failed");
}

inline Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(path + ": cannot open for reading");
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::size_t header = sizeof detail::kCheckpointMagic + 4 * 4 + 8;
    if (raw.size() < header ||
        std::memcmp(raw.data(), detail::kCheckpointMagic, sizeof detail::kCheckpointMagic) != 0)
        throw io_error(path + ": not a model checkpoint (bad magic)");
    const unsigned char* p = reinterpret_cast<const unsigned char*>(raw.data()) +
                             sizeof detail::kCheckpointMagic;
    ModelConfig cfg;
    cfg.in_channels = static_cast<int>(detail::get_u32(p)); p += 4;
    cfg.hidden = static_cast<int>(detail::get_u32(p)); p += 4;
    cfg.depth = static_cast<int>(detail::get_u32(p)); p += 4;
    cfg.classes = static_cast<int>(detail::get_u32(p)); p += 4;
    cfg.seed = detail::get_u64(p); p += 8;
    cfg.validate();

    Model model = init_model(cfg); // shapes; parameters overwritten below
    std::size_t need = 0;
    for (const ConvLayer& layer : model.layers)
        need += (layer.weights.size() + layer.bias.size()) * 8;
    if (raw.size() != header + need)
        throw io_error(path + ": truncated or oversized checkpoint payload");
    for (ConvLayer& layer : model.layers) {
        for (double& w : layer.weights) {
            w = std::bit_cast<double>(detail::get_u64(p));
            p += 8;
        }
        for (double& b : layer.bias) {
            b = std::bit_cast<double>(detail::get_u64(p));
            p += 8;
        }
    }
    return model;
}

} // namespace dbce

#endif // DBCE_NNET_HPP
