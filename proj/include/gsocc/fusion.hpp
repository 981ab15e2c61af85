#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "gsocc/attention.hpp"
#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/graph.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Adaptive fusion
// ---------------------------------------------------------------------------

struct FusionResult {
    MatrixXd fused;                // N x D
    std::vector<MatrixXd> weights; // per branch, N x D; simplex per coordinate
};

/// Elementwise softmax-of-values fusion across branches: at each coordinate,
/// w_n = exp(g_n) / sum_j exp(g_j) and fused = sum_n g_n * w_n. The branch
/// values act as their own logits, so the fused value is a convex combination
/// biased toward the larger branch.
inline FusionResult adaptive_fuse(const std::vector<MatrixXd>& branches) {
    if (branches.size() < 2) throw InvalidInputError("adaptive_fuse needs at least 2 branches");
    const Eigen::Index rows = branches[0].rows();
    const Eigen::Index cols = branches[0].cols();
    for (const auto& b : branches) {
        if (b.rows() != rows || b.cols() != cols)
            throw InvalidInputError("adaptive_fuse branch shapes differ");
        if (!b.allFinite()) throw InvalidInputError("adaptive_fuse branch has non-finite values");
    }
    const int nb = static_cast<int>(branches.size());

    FusionResult r;
    r.fused.setZero(rows, cols);
    r.weights.assign(static_cast<size_t>(nb), MatrixXd(rows, cols));

    parallel_for(rows, [&](std::int64_t i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            double mx = branches[0](i, j);
            for (int b = 1; b < nb; ++b) mx = std::max(mx, branches[static_cast<size_t>(b)](i, j));
            double sum = 0.0;
            for (int b = 0; b < nb; ++b) {
                const double e = std::exp(branches[static_cast<size_t>(b)](i, j) - mx);
                r.weights[static_cast<size_t>(b)](i, j) = e;
                sum += e;
            }
            double fused = 0.0;
            for (int b = 0; b < nb; ++b) {
                r.weights[static_cast<size_t>(b)](i, j) /= sum;
                fused += branches[static_cast<size_t>(b)](i, j) * r.weights[static_cast<size_t>(b)](i, j);
            }
            r.fused(i, j) = fused;
        }
    }, 16);
    return r;
}

/// Gradients of adaptive_fuse. With w = softmax(g) per coordinate and
/// fused = <g, w>:  d fused / d g_m = w_m * (1 + g_m - fused).
inline std::vector<MatrixXd> adaptive_fuse_vjp(const std::vector<MatrixXd>& branches,
                                               const MatrixXd& grad_fused) {
    const FusionResult r = adaptive_fuse(branches);
    std::vector<MatrixXd> grads(branches.size());
    for (size_t b = 0; b < branches.size(); ++b) {
        grads[b] = grad_fused.cwiseProduct(r.weights[b]).cwiseProduct(
            (branches[b].array() + 1.0 - r.fused.array()).matrix());
    }
    return grads;
}

// ---------------------------------------------------------------------------
// DGGA layer
// ---------------------------------------------------------------------------

enum class FuseMode { adaptive, average, concat_project };

enum class GraphMode { plain_knn, adaptive_radius };

struct GraphConfig {
    GraphMode mode = GraphMode::plain_knn;
    double rho = 3.0; // adaptive radius = rho * mean(scale)
    int k_min = 4;
};

/// Parameters for one dual-graph attention layer: independent projection and
/// decode weights per branch, plus an optional concat projection used only by
/// FuseMode::concat_project.
struct DggaParams {
    LayerParams geo;
    LayerParams sem;
    MatrixXd concat_proj; // (2 D_tok) x D_tok; empty unless concat fusion
};

struct DggaConfig {
    int k = 16;
    int m = 16;
    GraphConfig graph;
    FuseMode fuse = FuseMode::adaptive;
};

inline NeighborIndex build_geometric_graph(const GaussianSet& set, const DggaConfig& cfg) {
    if (cfg.graph.mode == GraphMode::adaptive_radius)
        return knn_adaptive_radius(set, cfg.k, cfg.graph.rho, cfg.graph.k_min);
    return knn_geometric(set.means(), cfg.k);
}

inline MatrixXd fuse_branch_tokens(const std::vector<MatrixXd>& branches, FuseMode mode,
                                   const MatrixXd& concat_proj) {
    switch (mode) {
        case FuseMode::adaptive:
            return adaptive_fuse(branches).fused;
        case FuseMode::average: {
            MatrixXd sum = branches[0];
            for (size_t b = 1; b < branches.size(); ++b) sum += branches[b];
            return sum / static_cast<double>(branches.size());
        }
        case FuseMode::concat_project: {
            const Eigen::Index dim = branches[0].cols();
            if (concat_proj.rows() != dim * static_cast<Eigen::Index>(branches.size()) ||
                concat_proj.cols() != dim)
                throw InvalidParameterError("concat projection shape mismatch");
            MatrixXd cat(branches[0].rows(), dim * static_cast<Eigen::Index>(branches.size()));
            for (size_t b = 0; b < branches.size(); ++b)
                cat.middleCols(static_cast<Eigen::Index>(b) * dim, dim) = branches[b];
            return cat * concat_proj;
        }
    }
    throw InvalidParameterError("unknown fuse mode");
}

/// One dual-graph attention layer: rebuild both graphs from the current set,
/// refine along each, fuse the branch token matrices, and project back onto
/// valid Gaussians.
inline GaussianSet dgga_layer(const GaussianSet& set, const DggaConfig& cfg,
                              const DggaParams& params) {
    if (cfg.k > set.size() || cfg.m > set.size())
        throw InvalidParameterError("K and M must not exceed N");
    const NeighborIndex idx_geo = build_geometric_graph(set, cfg);
    const NeighborIndex idx_sem = cosine_topM(set.features(), cfg.m);

    const MatrixXd tokens = tokenize(set);
    const AttentionOutput att_geo = neighbor_attention(tokens, idx_geo, params.geo);
    const GaussianSet set_geo = gaussian_refine(set, att_geo.hidden, params.geo);
    const AttentionOutput att_sem = neighbor_attention(tokens, idx_sem, params.sem);
    const GaussianSet set_sem = gaussian_refine(set, att_sem.hidden, params.sem);

    const MatrixXd fused = fuse_branch_tokens({set_geo.props(), set_sem.props()}, cfg.fuse,
                                              params.concat_proj);
    return project_tokens_to_gaussians(fused, set.num_classes(), set.feature_dim());
}

// ---------------------------------------------------------------------------
// Multi-scale graph attention
// ---------------------------------------------------------------------------

struct MgaConfig {
    std::vector<int> topk_schedule = {100, 75, 50, 20};
    std::vector<int> topm_schedule = {100, 75, 50, 20};
    GraphConfig graph;
    FuseMode fuse = FuseMode::adaptive;

    int num_scales() const { return static_cast<int>(topk_schedule.size()); }

    void validate(int n) const {
        if (topk_schedule.empty() || topk_schedule.size() != topm_schedule.size())
            throw InvalidParameterError("top-K/top-M schedules must be non-empty and equal length");
        for (size_t s = 0; s < topk_schedule.size(); ++s) {
            if (topk_schedule[s] < 1 || topm_schedule[s] < 1)
                throw InvalidParameterError("schedule entries must be >= 1");
            if (topk_schedule[s] > n || topm_schedule[s] > n)
                throw InvalidParameterError("schedule entry exceeds N");
        }
    }
};

/// Runs one DGGA branch per scale on the same input set (scales differ only
/// in their neighbor budgets), then fuses the branch outputs. A length-1
/// schedule degenerates to a single dgga_layer.
inline GaussianSet mga(const GaussianSet& set, const MgaConfig& cfg,
                       const std::vector<DggaParams>& scale_params,
                       const MatrixXd& scale_concat_proj = MatrixXd()) {
    cfg.validate(set.size());
    if (scale_params.size() != static_cast<size_t>(cfg.num_scales()))
        throw InvalidParameterError("one DggaParams required per scale");

    std::vector<MatrixXd> branch_tokens(static_cast<size_t>(cfg.num_scales()));
    for (int s = 0; s < cfg.num_scales(); ++s) {
        DggaConfig layer_cfg;
        layer_cfg.k = cfg.topk_schedule[static_cast<size_t>(s)];
        layer_cfg.m = cfg.topm_schedule[static_cast<size_t>(s)];
        layer_cfg.graph = cfg.graph;
        layer_cfg.fuse = cfg.fuse;
        branch_tokens[static_cast<size_t>(s)] =
            dgga_layer(set, layer_cfg, scale_params[static_cast<size_t>(s)]).props();
    }
    if (cfg.num_scales() == 1)
        return GaussianSet(branch_tokens[0], set.num_classes(), set.feature_dim());
    const MatrixXd fused = fuse_branch_tokens(branch_tokens, cfg.fuse, scale_concat_proj);
    return project_tokens_to_gaussians(fused, set.num_classes(), set.feature_dim());
}

} // namespace gsocc
