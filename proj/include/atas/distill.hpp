#pragma once

// The distillation objective: similarity-weighted pooling of student patches,
// a global-to-local contrastive term, a local-to-local pairwise-similarity
// matching term, a global-to-global contrastive term, and their weighted sum.
// Teacher-side tensors are constants; only student tensors carry gradients.

#include <cstdint>
#include <string>
#include <vector>

#include "atas/error.hpp"
#include "atas/tensor.hpp"

namespace atas {

enum class GldObjective { contrastive, cosine };
enum class GldPooling { weighted, mean };
enum class GldAnchor { per_tile, whole_mosaic };

struct DistillConfig {
    double lambda_gld = 1.0;
    double lambda_lld = 0.01;
    double lambda_ggd = 1.0;
    double tau = 1.0;
    bool symmetric_contrastive = false;
    GldObjective gld_objective = GldObjective::contrastive;
    GldPooling gld_pooling = GldPooling::weighted;
    GldAnchor gld_anchor = GldAnchor::per_tile;

    void validate() const {
        if (tau <= 0.0) throw ParameterError("tau must be > 0, got " + std::to_string(tau));
        if (lambda_gld < 0.0 || lambda_lld < 0.0 || lambda_ggd < 0.0) {
            throw ParameterError("loss weights must be >= 0");
        }
    }
};

// One mosaic as both models saw it, plus the teacher's per-tile class tokens.
struct MosaicView {
    Tensor student_patches;                // [n x d], grad-carrying
    Tensor student_cls;                    // [d]
    Tensor teacher_patches;                // [n x d], constant
    Tensor teacher_cls;                    // [d], constant (mosaic-level)
    std::vector<Tensor> teacher_tile_cls;  // K x [d], constant (single-tile encodes)
    std::vector<std::vector<std::size_t>> tile_patch_map;
    std::vector<int> tile_class_ids;
};

struct BatchViews {
    std::vector<MosaicView> mosaics;

    void validate() const {
        if (mosaics.empty()) throw ContractError("BatchViews: empty batch");
        for (const MosaicView& m : mosaics) {
            if (m.teacher_patches.requires_grad() || m.teacher_cls.requires_grad()) {
                throw ContractError("BatchViews: teacher tensors must not carry gradients");
            }
            for (const Tensor& t : m.teacher_tile_cls) {
                if (t.requires_grad()) throw ContractError("BatchViews: teacher tile cls must not carry gradients");
            }
            std::size_t mapped = 0;
            for (const auto& s : m.tile_patch_map) mapped += s.size();
            if (mapped != m.student_patches.rows() || mapped != m.teacher_patches.rows()) {
                throw ContractError("BatchViews: tile_patch_map covers " + std::to_string(mapped) +
                                    " patches but encoders produced " + std::to_string(m.student_patches.rows()));
            }
            if (m.teacher_tile_cls.size() != m.tile_patch_map.size()) {
                throw ContractError("BatchViews: tile cls count does not match tile map");
            }
        }
    }

    BatchViews detached() const {
        BatchViews out = *this;
        for (MosaicView& m : out.mosaics) {
            m.student_patches = m.student_patches.detach();
            m.student_cls = m.student_cls.detach();
        }
        return out;
    }
};

struct LossBreakdown {
    Tensor gld;
    Tensor lld;
    Tensor ggd;
    Tensor total;
    Tensor aggregated_locals; // [M x d] pooled anchors, detached, for inspection
};

// softmax(phi(patch_j, cls)/tau)-weighted sum of the patches (m >= 1 rows).
inline Tensor weighted_pool(const Tensor& student_patches, const Tensor& teacher_cls, double tau) {
    if (tau <= 0.0) throw ParameterError("weighted_pool: tau must be > 0");
    if (student_patches.rank() != 2 || student_patches.rows() == 0 ||
        student_patches.cols() != teacher_cls.size()) {
        throw DimensionError("weighted_pool: patches " + shape_str(student_patches.shape()) +
                             " incompatible with cls " + shape_str(teacher_cls.shape()));
    }
    std::size_t m = student_patches.rows();
    std::vector<Tensor> sims;
    sims.reserve(m);
    for (std::size_t j = 0; j < m; ++j) {
        sims.push_back(cosine_sim(row(student_patches, j), teacher_cls));
    }
    Tensor weights = softmax(stack_scalars(sims), tau);
    return reshape(matmul(reshape(weights, {1, m}), student_patches), {student_patches.cols()});
}

inline Tensor mean_pool(const Tensor& patches) {
    if (patches.rank() != 2 || patches.rows() == 0) {
        throw DimensionError("mean_pool: expected a nonempty matrix, got " + shape_str(patches.shape()));
    }
    Tensor ones = Tensor::full({1, patches.rows()}, 1.0 / static_cast<double>(patches.rows()));
    return reshape(matmul(ones, patches), {patches.cols()});
}

// -log softmax over cosine logits, anchors against targets, row direction as
// printed; the symmetric variant averages in the column direction.
inline Tensor contrastive_nll(const Tensor& anchors, const Tensor& targets, double tau, bool symmetric = false) {
    if (anchors.rank() != 2 || targets.rank() != 2 || anchors.rows() != targets.rows() ||
        anchors.cols() != targets.cols()) {
        throw DimensionError("contrastive_nll: anchors " + shape_str(anchors.shape()) +
                             " vs targets " + shape_str(targets.shape()));
    }
    if (tau <= 0.0) throw ParameterError("contrastive_nll: tau must be > 0");
    std::size_t m = anchors.rows();
    Tensor logits = scale(cosine_sim_matrix(anchors, targets), 1.0 / tau);
    auto direction = [m](const Tensor& lg) {
        std::vector<Tensor> terms;
        terms.reserve(m);
        for (std::size_t a = 0; a < m; ++a) {
            Tensor r = row(lg, a);
            terms.push_back(sub(log_sum_exp(r), index(r, a)));
        }
        return mean(stack_scalars(terms));
    };
    Tensor fwd = direction(logits);
    if (!symmetric) return fwd;
    Tensor bwd = direction(transpose(logits));
    return scale(add(fwd, bwd), 0.5);
}

namespace detail {

struct GldAnchors {
    std::vector<Tensor> anchors; // pooled student vectors
    std::vector<Tensor> targets; // matching teacher cls
};

inline GldAnchors build_gld_anchors(const BatchViews& views, const DistillConfig& config) {
    GldAnchors out;
    for (const MosaicView& m : views.mosaics) {
        if (config.gld_anchor == GldAnchor::whole_mosaic) {
            Tensor pooled = config.gld_pooling == GldPooling::weighted
                                ? weighted_pool(m.student_patches, m.teacher_cls, config.tau)
                                : mean_pool(m.student_patches);
            out.anchors.push_back(pooled);
            out.targets.push_back(m.teacher_cls);
            continue;
        }
        for (std::size_t t = 0; t < m.tile_patch_map.size(); ++t) {
            Tensor tile_patches = gather_rows(m.student_patches, m.tile_patch_map[t]);
            Tensor pooled = config.gld_pooling == GldPooling::weighted
                                ? weighted_pool(tile_patches, m.teacher_tile_cls[t], config.tau)
                                : mean_pool(tile_patches);
            out.anchors.push_back(pooled);
            out.targets.push_back(m.teacher_tile_cls[t]);
        }
    }
    return out;
}

inline Tensor gld_from_anchors(const GldAnchors& a, const DistillConfig& config) {
    Tensor anchors = concat_rows(a.anchors);
    Tensor targets = concat_rows(a.targets);
    if (config.gld_objective == GldObjective::cosine) {
        std::vector<Tensor> terms;
        terms.reserve(a.anchors.size());
        for (std::size_t i = 0; i < a.anchors.size(); ++i) {
            terms.push_back(add_scalar(neg(cosine_sim(a.anchors[i], a.targets[i])), 1.0));
        }
        return mean(stack_scalars(terms));
    }
    return contrastive_nll(anchors, targets, config.tau, config.symmetric_contrastive);
}

} // namespace detail

// Each (mosaic, tile) contributes one pooled anchor paired with that tile's
// teacher class token; the denominator runs over every anchor in the batch.
inline Tensor gld_loss(const BatchViews& views, const DistillConfig& config) {
    config.validate();
    views.validate();
    return detail::gld_from_anchors(detail::build_gld_anchors(views, config), config);
}

// Mean squared difference between the student's and teacher's pairwise patch
// cosine matrices, diagonal included (it contributes zero).
inline Tensor lld_loss(const Tensor& student_patches, const Tensor& teacher_patches) {
    if (student_patches.rank() != 2 || student_patches.shape() != teacher_patches.shape()) {
        throw DimensionError("lld_loss: shape mismatch: " + shape_str(student_patches.shape()) + " vs " +
                             shape_str(teacher_patches.shape()));
    }
    std::size_t n = student_patches.rows();
    Tensor diff = sub(cosine_sim_matrix(student_patches, student_patches),
                      cosine_sim_matrix(teacher_patches, teacher_patches).detach());
    return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(n * n));
}

// Contrastive agreement between student and teacher class tokens of the same
// composites; rows are the batch.
inline Tensor ggd_loss(const Tensor& student_cls, const Tensor& teacher_cls, double tau) {
    return contrastive_nll(student_cls, teacher_cls, tau, false);
}

// total = lambda1 * gld + lambda2 * lld + lambda3 * ggd. A zero lambda skips
// that component's gradient work but its value is still reported.
inline LossBreakdown total_loss(const BatchViews& views, const DistillConfig& config) {
    config.validate();
    views.validate();
    BatchViews frozen = views.detached();

    LossBreakdown out;

    detail::GldAnchors anchors =
        detail::build_gld_anchors(config.lambda_gld > 0.0 ? views : frozen, config);
    out.gld = detail::gld_from_anchors(anchors, config);
    out.aggregated_locals = concat_rows(anchors.anchors).detach();

    {
        const BatchViews& src = config.lambda_lld > 0.0 ? views : frozen;
        std::vector<Tensor> terms;
        terms.reserve(src.mosaics.size());
        for (const MosaicView& m : src.mosaics) terms.push_back(lld_loss(m.student_patches, m.teacher_patches));
        out.lld = mean(stack_scalars(terms));
    }

    {
        const BatchViews& src = config.lambda_ggd > 0.0 ? views : frozen;
        std::vector<Tensor> s_rows, t_rows;
        for (const MosaicView& m : src.mosaics) {
            s_rows.push_back(m.student_cls);
            t_rows.push_back(m.teacher_cls);
        }
        out.ggd = ggd_loss(concat_rows(s_rows), concat_rows(t_rows), config.tau);
    }

    out.total = add(add(scale(out.gld, config.lambda_gld), scale(out.lld, config.lambda_lld)),
                    scale(out.ggd, config.lambda_ggd));
    return out;
}

} // namespace atas
