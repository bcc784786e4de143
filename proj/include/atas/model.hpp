#pragma once

// Miniature pre-norm vision transformer. One architecture, two roles:
// a frozen teacher and a trainable student initialized as its exact copy.
// Both class token and patch tokens are projected into one shared space.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "atas/error.hpp"
#include "atas/rng.hpp"
#include "atas/tensor.hpp"

namespace atas {

struct ModelConfig {
    std::size_t image_side = 32; // pretraining resolution; mosaics may be larger
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    double mlp_ratio = 4.0;
    std::size_t channels = 3;

    std::size_t grid_side() const { return image_side / patch_size; }
    std::size_t num_patches() const { return grid_side() * grid_side(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim))); }

    void validate() const {
        if (patch_size == 0 || image_side == 0 || image_side % patch_size != 0) {
            throw ConfigError("image_side " + std::to_string(image_side) +
                              " must be a positive multiple of patch_size " + std::to_string(patch_size));
        }
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
            throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                              " must be divisible by num_heads " + std::to_string(num_heads));
        }
        if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
        if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be > 0");
        if (channels != 3) throw ConfigError("channels must be 3");
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class Role { teacher, student };

struct EncoderOutput {
    Tensor cls;     // [d]
    Tensor patches; // [n x d]
    Role source_role = Role::teacher;
};

struct ModelParams {
    ModelConfig config;
    std::map<std::string, Tensor> tensors; // name -> value, canonical order

    bool trainable() const {
        for (const auto& [name, t] : tensors)
            if (t.requires_grad()) return true;
        return false;
    }

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ContractError("missing parameter: " + name);
        return it->second;
    }
};

// Rows are flattened patches in row-major patch order; concatenating them
// back reconstructs the image (channel, then y, then x within a patch).
inline Tensor patchify(const Tensor& image, const ModelConfig& config) {
    if (image.rank() != 3 || image.dim(0) != config.channels) {
        throw DimensionError("patchify: expected a [3 x H x W] image, got shape " + shape_str(image.shape()));
    }
    std::size_t h = image.dim(1), w = image.dim(2);
    std::size_t p = config.patch_size;
    if (h != w || h % p != 0) {
        throw ConfigError("patchify: image side " + std::to_string(h) + "x" + std::to_string(w) +
                          " must be square and divisible by patch_size " + std::to_string(p));
    }
    std::size_t g = h / p;
    std::size_t n = g * g;
    std::size_t pd = config.channels * p * p;
    std::vector<double> out(n * pd);
    const auto& img = image.data();
    for (std::size_t pr = 0; pr < g; ++pr)
        for (std::size_t pc = 0; pc < g; ++pc) {
            std::size_t rowbase = (pr * g + pc) * pd;
            std::size_t k = 0;
            for (std::size_t c = 0; c < config.channels; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        out[rowbase + k++] = img[c * h * w + (pr * p + y) * w + (pc * p + x)];
        }
    return Tensor::from({n, pd}, std::move(out), false);
}

// Inverse of patchify; used by tests and the mosaic crop check.
inline Tensor unpatchify(const Tensor& patches, const ModelConfig& config, std::size_t image_side) {
    std::size_t p = config.patch_size;
    std::size_t g = image_side / p;
    std::size_t pd = config.patch_dim();
    if (patches.rank() != 2 || patches.rows() != g * g || patches.cols() != pd) {
        throw DimensionError("unpatchify: patches shape " + shape_str(patches.shape()) +
                             " does not match side " + std::to_string(image_side));
    }
    std::vector<double> img(config.channels * image_side * image_side);
    for (std::size_t pr = 0; pr < g; ++pr)
        for (std::size_t pc = 0; pc < g; ++pc) {
            std::size_t k = 0;
            for (std::size_t c = 0; c < config.channels; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        img[c * image_side * image_side + (pr * p + y) * image_side + (pc * p + x)] =
                            patches.at(pr * g + pc, k++);
        }
    return Tensor::from({config.channels, image_side, image_side}, std::move(img), false);
}

inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams params;
    params.config = config;
    std::size_t d = config.embed_dim;
    std::size_t n = config.num_patches();
    std::size_t hidden = config.mlp_hidden();
    Rng rng(derive_seed(seed, 0x90de1));

    auto tn = [&](Shape shape) {
        std::vector<double> v(detail::numel(shape));
        for (double& x : v) x = rng.trunc_normal(0.02);
        return Tensor::from(std::move(shape), std::move(v), false);
    };
    auto zeros = [&](Shape shape) { return Tensor::zeros(std::move(shape), false); };
    auto ones = [&](Shape shape) { return Tensor::full(std::move(shape), 1.0, false); };

    params.tensors["patch_embed.w"] = tn({config.patch_dim(), d});
    params.tensors["patch_embed.b"] = zeros({d});
    params.tensors["cls"] = tn({d});
    params.tensors["pos"] = tn({1 + n, d});
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        std::string p = "blocks." + std::to_string(i) + ".";
        params.tensors[p + "ln1.g"] = ones({d});
        params.tensors[p + "ln1.b"] = zeros({d});
        params.tensors[p + "attn.wq"] = tn({d, d});
        params.tensors[p + "attn.bq"] = zeros({d});
        params.tensors[p + "attn.wk"] = tn({d, d});
        params.tensors[p + "attn.bk"] = zeros({d});
        params.tensors[p + "attn.wv"] = tn({d, d});
        params.tensors[p + "attn.bv"] = zeros({d});
        params.tensors[p + "attn.wo"] = tn({d, d});
        params.tensors[p + "attn.bo"] = zeros({d});
        params.tensors[p + "ln2.g"] = ones({d});
        params.tensors[p + "ln2.b"] = zeros({d});
        params.tensors[p + "mlp.w1"] = tn({d, hidden});
        params.tensors[p + "mlp.b1"] = zeros({hidden});
        params.tensors[p + "mlp.w2"] = tn({hidden, d});
        params.tensors[p + "mlp.b2"] = zeros({d});
    }
    params.tensors["head.ln.g"] = ones({d});
    params.tensors["head.ln.b"] = zeros({d});
    params.tensors["head.proj"] = tn({d, d});
    return params;
}

// Detached copy; frozen parameters never receive gradients.
inline ModelParams freeze(const ModelParams& params) {
    ModelParams out;
    out.config = params.config;
    for (const auto& [name, t] : params.tensors) out.tensors[name] = t.clone(false);
    return out;
}

// Fresh gradient-tracking leaves with identical values; the student starts
// as an exact copy of the teacher.
inline ModelParams trainable_copy(const ModelParams& params) {
    ModelParams out;
    out.config = params.config;
    for (const auto& [name, t] : params.tensors) out.tensors[name] = t.clone(true);
    return out;
}

// Bilinear resampling matrix mapping an s x s position grid onto t x t,
// half-pixel centers. Returned as a constant [t^2 x s^2] tensor so position
// gradients flow through a plain matmul.
inline Tensor pos_interp_matrix(std::size_t s, std::size_t t) {
    std::vector<double> w(t * t * s * s, 0.0);
    double ratio = static_cast<double>(s) / static_cast<double>(t);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < t; ++c) {
            double v = (static_cast<double>(r) + 0.5) * ratio - 0.5;
            double u = (static_cast<double>(c) + 0.5) * ratio - 0.5;
            v = std::min(std::max(v, 0.0), static_cast<double>(s - 1));
            u = std::min(std::max(u, 0.0), static_cast<double>(s - 1));
            std::size_t v0 = static_cast<std::size_t>(v);
            std::size_t u0 = static_cast<std::size_t>(u);
            std::size_t v1 = std::min(v0 + 1, s - 1);
            std::size_t u1 = std::min(u0 + 1, s - 1);
            double fv = v - static_cast<double>(v0);
            double fu = u - static_cast<double>(u0);
            std::size_t rowbase = (r * t + c) * s * s;
            w[rowbase + v0 * s + u0] += (1 - fv) * (1 - fu);
            w[rowbase + v0 * s + u1] += (1 - fv) * fu;
            w[rowbase + v1 * s + u0] += fv * (1 - fu);
            w[rowbase + v1 * s + u1] += fv * fu;
        }
    return Tensor::from({t * t, s * s}, std::move(w), false);
}

namespace detail {

inline Tensor attention_block(const Tensor& x, const ModelParams& params, const std::string& prefix,
                              const ModelConfig& config) {
    std::size_t d = config.embed_dim;
    std::size_t heads = config.num_heads;
    std::size_t dh = d / heads;
    Tensor h = layer_norm(x, params.at(prefix + "ln1.g"), params.at(prefix + "ln1.b"));
    Tensor q = add_rowvec(matmul(h, params.at(prefix + "attn.wq")), params.at(prefix + "attn.bq"));
    Tensor k = add_rowvec(matmul(h, params.at(prefix + "attn.wk")), params.at(prefix + "attn.bk"));
    Tensor v = add_rowvec(matmul(h, params.at(prefix + "attn.wv")), params.at(prefix + "attn.bv"));
    std::vector<Tensor> ctx;
    ctx.reserve(heads);
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t hi = 0; hi < heads; ++hi) {
        Tensor qh = slice_cols(q, hi * dh, dh);
        Tensor kh = slice_cols(k, hi * dh, dh);
        Tensor vh = slice_cols(v, hi * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor attn = softmax_rows(scores, 1.0);
        ctx.push_back(matmul(attn, vh));
    }
    Tensor merged = heads == 1 ? ctx[0] : concat_cols(ctx);
    Tensor out = add_rowvec(matmul(merged, params.at(prefix + "attn.wo")), params.at(prefix + "attn.bo"));
    Tensor x1 = add(x, out);

    Tensor h2 = layer_norm(x1, params.at(prefix + "ln2.g"), params.at(prefix + "ln2.b"));
    Tensor m1 = gelu(add_rowvec(matmul(h2, params.at(prefix + "mlp.w1")), params.at(prefix + "mlp.b1")));
    Tensor m2 = add_rowvec(matmul(m1, params.at(prefix + "mlp.w2")), params.at(prefix + "mlp.b2"));
    return add(x1, m2);
}

} // namespace detail

// Deterministic function of (image, params). Images larger than the
// pretraining resolution get bilinearly interpolated patch positions.
inline EncoderOutput encode(const Tensor& image, const ModelParams& params) {
    const ModelConfig& config = params.config;
    config.validate();
    if (image.rank() != 3 || image.dim(0) != config.channels || image.dim(1) != image.dim(2) ||
        image.dim(1) % config.patch_size != 0) {
        throw DimensionError("encode: expected a square [3 x S x S] image with S divisible by " +
                             std::to_string(config.patch_size) + ", got shape " + shape_str(image.shape()));
    }
    std::size_t side = image.dim(1);
    std::size_t grid = side / config.patch_size;
    std::size_t n = grid * grid;
    std::size_t n_pre = config.num_patches();

    Tensor px = patchify(image, config);
    Tensor tok = add_rowvec(matmul(px, params.at("patch_embed.w")), params.at("patch_embed.b"));
    Tensor tokens = concat_rows({params.at("cls"), tok});

    const Tensor& pos = params.at("pos");
    Tensor pos_patch = slice_rows(pos, 1, n_pre);
    if (n != n_pre) {
        pos_patch = matmul(pos_interp_matrix(config.grid_side(), grid), pos_patch);
    }
    Tensor pos_all = concat_rows({row(pos, 0), pos_patch});
    Tensor x = add(tokens, pos_all);

    for (std::size_t i = 0; i < config.num_layers; ++i) {
        x = detail::attention_block(x, params, "blocks." + std::to_string(i) + ".", config);
    }
    Tensor h = layer_norm(x, params.at("head.ln.g"), params.at("head.ln.b"));
    Tensor out = matmul(h, params.at("head.proj"));

    EncoderOutput result;
    result.cls = row(out, 0);
    result.patches = slice_rows(out, 1, n);
    result.source_role = params.trainable() ? Role::student : Role::teacher;
    return result;
}

} // namespace atas
