#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <limits>

#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/graph.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Layer parameters
// ---------------------------------------------------------------------------

/// Projection and decode weights for one attention block (single head).
/// w_q/w_k/w_v are D_tok x d_k; decode maps d_k back to a per-Gaussian delta
/// vector in the token layout: [dmean(3) | dlogscale(3) | drot(4) |
/// dopacity(1) | dsem(d) | new feature(F)].
struct LayerParams {
    MatrixXd w_q, w_k, w_v;  // D_tok x d_k
    MatrixXd decode;         // d_k x D_delta
    VectorXd decode_bias;    // D_delta

    int d_k() const { return static_cast<int>(w_q.cols()); }
    int token_dim() const { return static_cast<int>(w_q.rows()); }

    void validate(int expect_token_dim) const {
        if (w_q.cols() < 1) throw InvalidParameterError("d_k must be >= 1");
        if (w_q.rows() != expect_token_dim || w_k.rows() != expect_token_dim ||
            w_v.rows() != expect_token_dim)
            throw InvalidParameterError("projection rows must match token dimension");
        if (w_k.cols() != w_q.cols() || w_v.cols() != w_q.cols())
            throw InvalidParameterError("projection widths must agree");
        if (!w_q.allFinite() || !w_k.allFinite() || !w_v.allFinite() || !decode.allFinite() ||
            !decode_bias.allFinite())
            throw NumericError("layer parameters must be finite");
    }
};

struct AttentionOutput {
    MatrixXd hidden;   // queries x d_k
    MatrixXd weights;  // queries x width (row-stochastic; padded entries 0)
};

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

/// The token of a Gaussian is its flat property vector.
inline MatrixXd tokenize(const GaussianSet& set) { return set.props(); }

/// Inverse of tokenize; bit-exact, no constraint projection.
inline GaussianSet detokenize(const MatrixXd& tokens, int d, int f) {
    return GaussianSet(tokens, d, f);
}

inline constexpr double kScaleFloor = 1e-4; // meters

/// Projects a token matrix onto the Gaussian constraint set: rotation rows
/// are renormalized, opacity is clamped to [0,1] and scale is floored at a
/// small positive length. Convex fusions of valid sets never hit the floor;
/// learned (concat) fusions may.
inline GaussianSet project_tokens_to_gaussians(const MatrixXd& tokens, int d, int f) {
    if (!tokens.allFinite()) throw NumericError("token matrix has non-finite values");
    MatrixXd out = tokens;
    const int n = static_cast<int>(out.rows());
    constexpr int so = GaussianSet::scale_offset();
    constexpr int ro = GaussianSet::rotation_offset();
    constexpr int oo = GaussianSet::opacity_offset();
    for (int i = 0; i < n; ++i) {
        const double norm = out.row(i).segment<4>(ro).norm();
        if (norm < 1e-12) throw NumericError("rotation collapsed to zero during projection");
        out.row(i).segment<4>(ro) /= norm;
        out(i, oo) = std::clamp(out(i, oo), 0.0, 1.0);
        for (int a = 0; a < 3; ++a) out(i, so + a) = std::max(out(i, so + a), kScaleFloor);
    }
    return GaussianSet(std::move(out), d, f);
}

namespace detail {

/// Numerically stabilized softmax over the valid entries of a logit row.
/// Invalid entries receive weight 0.
inline void masked_softmax_row(const double* logits, const char* valid, int width, double* w_out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < width; ++j)
        if (valid[j] && logits[j] > mx) mx = logits[j];
    double sum = 0.0;
    for (int j = 0; j < width; ++j) {
        w_out[j] = valid[j] ? std::exp(logits[j] - mx) : 0.0;
        sum += w_out[j];
    }
    for (int j = 0; j < width; ++j) w_out[j] /= sum;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Neighbor-gathered attention
// ---------------------------------------------------------------------------

/// Single-head scaled dot-product attention restricted to the neighbor rows
/// of `idx`. For each query i, keys/values are gathered at idx[i]; padded
/// entries are excluded from the softmax.
inline AttentionOutput neighbor_attention(const MatrixXd& tokens, const NeighborIndex& idx,
                                          const LayerParams& params) {
    const int n = static_cast<int>(tokens.rows());
    params.validate(static_cast<int>(tokens.cols()));
    if (!tokens.allFinite()) throw NumericError("token matrix has non-finite values");
    if (idx.size() != n) throw InvalidParameterError("neighbor index size mismatch");
    if (idx.width < 1) throw InvalidParameterError("neighbor width must be >= 1");

    const int dk = params.d_k();
    const int width = idx.width;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    // dk x N with contiguous per-node columns
    const MatrixXd qt = (tokens * params.w_q).transpose();
    const MatrixXd kt = (tokens * params.w_k).transpose();
    const MatrixXd vt = (tokens * params.w_v).transpose();

    AttentionOutput out;
    out.hidden.setZero(n, dk);
    out.weights.setZero(n, width);

    parallel_blocks(n, [&](std::int64_t begin, std::int64_t end) {
        std::vector<double> logits(static_cast<size_t>(width));
        std::vector<double> w(static_cast<size_t>(width));
        std::vector<char> valid(static_cast<size_t>(width));
        VectorXd acc(dk);
        for (std::int64_t i = begin; i < end; ++i) {
            const int ii = static_cast<int>(i);
            for (int j = 0; j < width; ++j) {
                const int id = idx.idx(ii, j);
                valid[static_cast<size_t>(j)] = idx.is_padded(ii, j) ? 0 : 1;
                logits[static_cast<size_t>(j)] =
                    valid[static_cast<size_t>(j)] ? qt.col(ii).dot(kt.col(id)) * inv_sqrt_dk : 0.0;
            }
            detail::masked_softmax_row(logits.data(), valid.data(), width, w.data());
            acc.setZero();
            for (int j = 0; j < width; ++j) {
                out.weights(ii, j) = w[static_cast<size_t>(j)];
                if (w[static_cast<size_t>(j)] != 0.0)
                    acc += w[static_cast<size_t>(j)] * vt.col(idx.idx(ii, j));
            }
            out.hidden.row(ii) = acc.transpose();
            assert(std::abs(out.weights.row(ii).sum() - 1.0) < 1e-6);
        }
    }, 16);
    return out;
}

struct NeighborAttentionGrads {
    MatrixXd tokens;  // N x D_tok
    MatrixXd w_q, w_k, w_v;
};

/// Reverse-mode gradients of neighbor_attention. Per-query work runs in
/// parallel; the scatter into gathered key/value rows and the weight GEMMs
/// run in a fixed order, so results do not depend on the worker count.
inline NeighborAttentionGrads neighbor_attention_vjp(const MatrixXd& tokens,
                                                     const NeighborIndex& idx,
                                                     const LayerParams& params,
                                                     const MatrixXd& grad_hidden) {
    const int n = static_cast<int>(tokens.rows());
    const int dk = params.d_k();
    const int width = idx.width;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    // dk x N transposed layouts keep all inner loops contiguous.
    const MatrixXd qt = (tokens * params.w_q).transpose();
    const MatrixXd kt = (tokens * params.w_k).transpose();
    const MatrixXd vt = (tokens * params.w_v).transpose();
    const MatrixXd ght = grad_hidden.transpose();

    MatrixXd weights = MatrixXd::Zero(n, width);
    MatrixXd grad_logits = MatrixXd::Zero(n, width);
    MatrixXd gqt = MatrixXd::Zero(dk, n);

    parallel_blocks(n, [&](std::int64_t begin, std::int64_t end) {
        std::vector<double> logits(static_cast<size_t>(width));
        std::vector<double> w(static_cast<size_t>(width));
        std::vector<char> valid(static_cast<size_t>(width));
        std::vector<double> gw(static_cast<size_t>(width));
        for (std::int64_t i = begin; i < end; ++i) {
            const int ii = static_cast<int>(i);
            for (int j = 0; j < width; ++j) {
                const int id = idx.idx(ii, j);
                valid[static_cast<size_t>(j)] = idx.is_padded(ii, j) ? 0 : 1;
                logits[static_cast<size_t>(j)] =
                    valid[static_cast<size_t>(j)] ? qt.col(ii).dot(kt.col(id)) * inv_sqrt_dk : 0.0;
            }
            detail::masked_softmax_row(logits.data(), valid.data(), width, w.data());
            // softmax vjp: g_logit = w .* (g_w - <g_w, w>)
            double dot = 0.0;
            for (int j = 0; j < width; ++j) {
                weights(ii, j) = w[static_cast<size_t>(j)];
                gw[static_cast<size_t>(j)] = 0.0;
                if (!valid[static_cast<size_t>(j)]) continue;
                gw[static_cast<size_t>(j)] = ght.col(ii).dot(vt.col(idx.idx(ii, j)));
                dot += gw[static_cast<size_t>(j)] * w[static_cast<size_t>(j)];
            }
            for (int j = 0; j < width; ++j) {
                if (!valid[static_cast<size_t>(j)]) continue;
                grad_logits(ii, j) = w[static_cast<size_t>(j)] * (gw[static_cast<size_t>(j)] - dot);
                gqt.col(ii) += grad_logits(ii, j) * inv_sqrt_dk * kt.col(idx.idx(ii, j));
            }
        }
    }, 16);

    // Fixed-order scatter into gathered columns.
    MatrixXd gkt = MatrixXd::Zero(dk, n);
    MatrixXd gvt = MatrixXd::Zero(dk, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < width; ++j) {
            if (idx.is_padded(i, j)) continue;
            const int id = idx.idx(i, j);
            gkt.col(id) += grad_logits(i, j) * inv_sqrt_dk * qt.col(i);
            gvt.col(id) += weights(i, j) * ght.col(i);
        }
    }

    NeighborAttentionGrads g;
    g.tokens = gqt.transpose() * params.w_q.transpose() + gkt.transpose() * params.w_k.transpose() +
               gvt.transpose() * params.w_v.transpose();
    g.w_q = tokens.transpose() * gqt.transpose();
    g.w_k = tokens.transpose() * gkt.transpose();
    g.w_v = tokens.transpose() * gvt.transpose();
    return g;
}

// ---------------------------------------------------------------------------
// Set-to-set cross attention
// ---------------------------------------------------------------------------

/// Full attention of every query token over all key/value tokens.
inline AttentionOutput cross_attention(const MatrixXd& q_tokens, const MatrixXd& kv_tokens,
                                       const LayerParams& params) {
    const int a = static_cast<int>(q_tokens.rows());
    const int b = static_cast<int>(kv_tokens.rows());
    if (b < 1) throw EmptyContextError("cross attention requires a non-empty key/value set");
    if (a < 1) throw InvalidParameterError("cross attention requires at least one query");
    params.validate(static_cast<int>(q_tokens.cols()));
    if (q_tokens.cols() != kv_tokens.cols())
        throw InvalidParameterError("query and key/value token dims differ");
    if (!q_tokens.allFinite() || !kv_tokens.allFinite())
        throw NumericError("token matrix has non-finite values");

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(params.d_k()));
    const MatrixXd q = q_tokens * params.w_q;
    const MatrixXd k = kv_tokens * params.w_k;
    const MatrixXd v = kv_tokens * params.w_v;

    MatrixXd logits = q * k.transpose() * inv_sqrt_dk; // A x B
    AttentionOutput out;
    out.weights.resize(a, b);
    parallel_for(a, [&](std::int64_t i) {
        const double mx = logits.row(i).maxCoeff();
        out.weights.row(i) = (logits.row(i).array() - mx).exp();
        out.weights.row(i) /= out.weights.row(i).sum();
        assert(std::abs(out.weights.row(i).sum() - 1.0) < 1e-6);
    }, 32);
    out.hidden = out.weights * v;
    return out;
}

struct CrossAttentionGrads {
    MatrixXd q_tokens;   // A x D_tok
    MatrixXd kv_tokens;  // B x D_tok
    MatrixXd w_q, w_k, w_v;
};

inline CrossAttentionGrads cross_attention_vjp(const MatrixXd& q_tokens,
                                               const MatrixXd& kv_tokens,
                                               const LayerParams& params,
                                               const MatrixXd& grad_hidden) {
    const int a = static_cast<int>(q_tokens.rows());
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(params.d_k()));
    const MatrixXd q = q_tokens * params.w_q;
    const MatrixXd k = kv_tokens * params.w_k;
    const MatrixXd v = kv_tokens * params.w_v;

    MatrixXd logits = q * k.transpose() * inv_sqrt_dk;
    MatrixXd weights(logits.rows(), logits.cols());
    for (int i = 0; i < a; ++i) {
        const double mx = logits.row(i).maxCoeff();
        weights.row(i) = (logits.row(i).array() - mx).exp();
        weights.row(i) /= weights.row(i).sum();
    }

    MatrixXd grad_w = grad_hidden * v.transpose(); // A x B
    MatrixXd grad_logits(weights.rows(), weights.cols());
    for (int i = 0; i < a; ++i) {
        const double dot = grad_w.row(i).dot(weights.row(i));
        grad_logits.row(i) =
            (weights.row(i).array() * (grad_w.row(i).array() - dot)).matrix();
    }

    const MatrixXd grad_q = grad_logits * k * inv_sqrt_dk;
    const MatrixXd grad_k = grad_logits.transpose() * q * inv_sqrt_dk;
    const MatrixXd grad_v = weights.transpose() * grad_hidden;

    CrossAttentionGrads g;
    g.q_tokens = grad_q * params.w_q.transpose();
    g.kv_tokens = grad_k * params.w_k.transpose() + grad_v * params.w_v.transpose();
    g.w_q = q_tokens.transpose() * grad_q;
    g.w_k = kv_tokens.transpose() * grad_k;
    g.w_v = kv_tokens.transpose() * grad_v;
    return g;
}

// ---------------------------------------------------------------------------
// Refinement decode head
// ---------------------------------------------------------------------------

/// Applies the decoded delta vector to each Gaussian:
///   mean += dmean, scale *= exp(dlogscale), rotation = normalize(rot + drot),
///   opacity = clamp01(opacity + dopacity), semantics += dsem,
///   feature = decoded feature (replacement).
inline GaussianSet gaussian_refine(const GaussianSet& set, const MatrixXd& hidden,
                                   const LayerParams& params) {
    const int n = set.size();
    if (hidden.rows() != n) throw InvalidParameterError("hidden row count mismatch");
    if (!hidden.allFinite()) throw NumericError("hidden matrix has non-finite values");
    if (params.decode.rows() != hidden.cols() || params.decode.cols() != set.dim() ||
        params.decode_bias.size() != set.dim())
        throw InvalidParameterError("decode head shape mismatch");

    MatrixXd delta = hidden * params.decode;
    delta.rowwise() += params.decode_bias.transpose();
    if (!delta.allFinite()) throw NumericError("decode produced non-finite values");

    constexpr int mo = GaussianSet::mean_offset();
    constexpr int so = GaussianSet::scale_offset();
    constexpr int ro = GaussianSet::rotation_offset();
    constexpr int oo = GaussianSet::opacity_offset();
    const int se = GaussianSet::semantics_offset();
    const int fo = set.feature_offset();
    const int d = set.num_classes();
    const int f = set.feature_dim();

    MatrixXd out = set.props();
    for (int i = 0; i < n; ++i) {
        out.row(i).segment<3>(mo) += delta.row(i).segment<3>(mo);
        out.row(i).segment<3>(so) =
            out.row(i).segment<3>(so).cwiseProduct(delta.row(i).segment<3>(so).array().exp().matrix());
        if (!out.row(i).segment<3>(so).allFinite() ||
            !(out.row(i).segment<3>(so).array() > 0.0).all())
            throw NumericError("scale left the positive range during refine");
        Eigen::Vector4d rot =
            (out.row(i).segment<4>(ro) + delta.row(i).segment<4>(ro)).transpose();
        const double norm = rot.norm();
        if (norm < 1e-12) throw NumericError("rotation collapsed to zero during refine");
        out.row(i).segment<4>(ro) = (rot / norm).transpose();
        out(i, oo) = std::clamp(out(i, oo) + delta(i, oo), 0.0, 1.0);
        out.row(i).segment(se, d) += delta.row(i).segment(se, d);
        out.row(i).segment(fo, f) = delta.row(i).segment(fo, f);
    }
    return GaussianSet(std::move(out), d, f);
}

struct RefineGrads {
    MatrixXd in_props;  // gradient wrt the input property matrix
    MatrixXd hidden;
    MatrixXd decode;
    VectorXd decode_bias;
};

inline RefineGrads gaussian_refine_vjp(const GaussianSet& set, const MatrixXd& hidden,
                                       const LayerParams& params, const MatrixXd& grad_out) {
    const int n = set.size();
    const int dim = set.dim();
    MatrixXd delta = hidden * params.decode;
    delta.rowwise() += params.decode_bias.transpose();

    constexpr int mo = GaussianSet::mean_offset();
    constexpr int so = GaussianSet::scale_offset();
    constexpr int ro = GaussianSet::rotation_offset();
    constexpr int oo = GaussianSet::opacity_offset();
    const int se = GaussianSet::semantics_offset();
    const int fo = set.feature_offset();
    const int d = set.num_classes();
    const int f = set.feature_dim();

    MatrixXd grad_in = MatrixXd::Zero(n, dim);
    MatrixXd grad_delta = MatrixXd::Zero(n, dim);
    const MatrixXd& in = set.props();

    parallel_for(n, [&](std::int64_t i) {
        // mean: out = in + delta
        grad_in.row(i).segment<3>(mo) = grad_out.row(i).segment<3>(mo);
        grad_delta.row(i).segment<3>(mo) = grad_out.row(i).segment<3>(mo);
        // scale: out = in .* exp(delta)
        const Eigen::Array3d e = delta.row(i).segment<3>(so).transpose().array().exp();
        const Eigen::Array3d gscale = grad_out.row(i).segment<3>(so).transpose().array();
        const Eigen::Array3d in_scale = in.row(i).segment<3>(so).transpose().array();
        grad_in.row(i).segment<3>(so) = (gscale * e).matrix().transpose();
        grad_delta.row(i).segment<3>(so) = (gscale * in_scale * e).matrix().transpose();
        // rotation: out = v / |v|, v = in + delta
        const Eigen::Vector4d v =
            (in.row(i).segment<4>(ro) + delta.row(i).segment<4>(ro)).transpose();
        const double norm = v.norm();
        const Eigen::Vector4d u = v / norm;
        const Eigen::Vector4d gu = grad_out.row(i).segment<4>(ro).transpose();
        const Eigen::Vector4d gv = (gu - u * u.dot(gu)) / norm;
        grad_in.row(i).segment<4>(ro) = gv.transpose();
        grad_delta.row(i).segment<4>(ro) = gv.transpose();
        // opacity: clamp01(in + delta); zero slope when saturated
        const double pre = in(i, oo) + delta(i, oo);
        const double slope = (pre >= 0.0 && pre <= 1.0) ? 1.0 : 0.0;
        grad_in(i, oo) = grad_out(i, oo) * slope;
        grad_delta(i, oo) = grad_out(i, oo) * slope;
        // semantics: out = in + delta
        grad_in.row(i).segment(se, d) = grad_out.row(i).segment(se, d);
        grad_delta.row(i).segment(se, d) = grad_out.row(i).segment(se, d);
        // feature: out = delta (replacement; no flow into the old feature)
        grad_delta.row(i).segment(fo, f) = grad_out.row(i).segment(fo, f);
    }, 32);

    RefineGrads g;
    g.in_props = std::move(grad_in);
    g.hidden = grad_delta * params.decode.transpose();
    g.decode = hidden.transpose() * grad_delta;
    g.decode_bias = grad_delta.colwise().sum().transpose();
    return g;
}

/// VJP of project_tokens_to_gaussians.
inline MatrixXd project_tokens_vjp(const MatrixXd& tokens, const MatrixXd& grad_out) {
    MatrixXd grad_in = grad_out;
    const int n = static_cast<int>(tokens.rows());
    constexpr int so = GaussianSet::scale_offset();
    constexpr int ro = GaussianSet::rotation_offset();
    constexpr int oo = GaussianSet::opacity_offset();
    parallel_for(n, [&](std::int64_t i) {
        const Eigen::Vector4d v = tokens.row(i).segment<4>(ro).transpose();
        const double norm = v.norm();
        const Eigen::Vector4d u = v / norm;
        const Eigen::Vector4d gu = grad_out.row(i).segment<4>(ro).transpose();
        grad_in.row(i).segment<4>(ro) = ((gu - u * u.dot(gu)) / norm).transpose();
        const double pre = tokens(i, oo);
        grad_in(i, oo) = grad_out(i, oo) * ((pre >= 0.0 && pre <= 1.0) ? 1.0 : 0.0);
        for (int a = 0; a < 3; ++a)
            if (tokens(i, so + a) < kScaleFloor) grad_in(i, so + a) = 0.0;
    }, 64);
    return grad_in;
}

} // namespace gsocc
