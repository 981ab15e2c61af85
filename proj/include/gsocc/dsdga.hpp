#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "gsocc/attention.hpp"
#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Semantic scores and dynamic/static masks
// ---------------------------------------------------------------------------

/// Overflow-safe softplus: ln(1 + e^x) = max(x, 0) + log1p(e^-|x|).
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Softplus of every semantic logit; the nonnegative score matrix behind the
/// dynamic/static split.
inline MatrixXd semantic_scores(const GaussianSet& set) {
    const int n = set.size();
    const int d = set.num_classes();
    MatrixXd s(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) s(i, j) = softplus(set.semantics()(i, j));
    return s;
}

struct DecoupleMasks {
    std::vector<bool> dynamic; // exact partition with `statik`
    std::vector<bool> statik;
    std::vector<int> argmax_class;
    MatrixXd scores; // N x d, nonnegative
};

/// Argmax class per row (ties to the lowest id); a node is static iff its
/// argmax class index is at or beyond the taxonomy's static boundary.
inline DecoupleMasks split_masks(const MatrixXd& scores, const SemanticTaxonomy& taxonomy) {
    if (scores.cols() != taxonomy.num_classes())
        throw InvalidInputError("score width does not match taxonomy");
    const int n = static_cast<int>(scores.rows());
    DecoupleMasks m;
    m.dynamic.resize(static_cast<size_t>(n));
    m.statik.resize(static_cast<size_t>(n));
    m.argmax_class.resize(static_cast<size_t>(n));
    m.scores = scores;
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int j = 1; j < scores.cols(); ++j)
            if (scores(i, j) > scores(i, best)) best = j;
        m.argmax_class[static_cast<size_t>(i)] = best;
        const bool is_static = best >= taxonomy.static_boundary;
        m.statik[static_cast<size_t>(i)] = is_static;
        m.dynamic[static_cast<size_t>(i)] = !is_static;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Decoupled sub-sets
// ---------------------------------------------------------------------------

/// A sub-set of Gaussians that remembers where each member sits in the
/// original set, so refined members can be scattered back in order.
struct IndexedSubset {
    GaussianSet set;
    std::vector<int> original_index;

    int size() const { return set.size(); }
    bool empty() const { return set.size() == 0; }
};

inline IndexedSubset select_subset(const GaussianSet& set, const std::vector<bool>& keep) {
    std::vector<int> ids;
    for (int i = 0; i < set.size(); ++i)
        if (keep[static_cast<size_t>(i)]) ids.push_back(i);
    MatrixXd props(static_cast<Eigen::Index>(ids.size()), set.dim());
    for (size_t r = 0; r < ids.size(); ++r) props.row(static_cast<Eigen::Index>(r)) = set.props().row(ids[r]);
    IndexedSubset s{GaussianSet(std::move(props), set.num_classes(), set.feature_dim()),
                    std::move(ids)};
    return s;
}

/// Splits a set into its dynamic and static groups. Every Gaussian lands in
/// exactly one group and keeps its original index.
inline std::pair<IndexedSubset, IndexedSubset> decouple(const GaussianSet& set,
                                                        const DecoupleMasks& masks) {
    if (static_cast<int>(masks.dynamic.size()) != set.size())
        throw InvalidInputError("mask length does not match set size");
    return {select_subset(set, masks.dynamic), select_subset(set, masks.statik)};
}

// ---------------------------------------------------------------------------
// DSDGA block
// ---------------------------------------------------------------------------

struct DsdgaParams {
    LayerParams dca; // dynamic queries attend to static context
    LayerParams sca; // static queries attend to refined dynamic context
};

struct DsdgaOptions {
    bool enable_dca = true;
    bool enable_sca = true;
};

/// Dynamic/static decoupled refinement: dynamics cross-attend to statics
/// (DCA), then statics cross-attend to the refined dynamics (SCA), and both
/// groups scatter back to their original slots. An empty side skips the
/// attention that needs it and passes through unchanged.
inline GaussianSet dsdga(const GaussianSet& set, const SemanticTaxonomy& taxonomy,
                         const DsdgaParams& params, const DsdgaOptions& options = {}) {
    const DecoupleMasks masks = split_masks(semantic_scores(set), taxonomy);
    auto [dyn, sta] = decouple(set, masks);

    GaussianSet dyn_refined = dyn.set;
    if (options.enable_dca && !dyn.empty() && !sta.empty()) {
        const AttentionOutput att =
            cross_attention(tokenize(dyn.set), tokenize(sta.set), params.dca);
        dyn_refined = gaussian_refine(dyn.set, att.hidden, params.dca);
    }

    GaussianSet sta_refined = sta.set;
    if (options.enable_sca && !sta.empty() && dyn_refined.size() > 0) {
        const AttentionOutput att =
            cross_attention(tokenize(sta.set), tokenize(dyn_refined), params.sca);
        sta_refined = gaussian_refine(sta.set, att.hidden, params.sca);
    }

    MatrixXd out(set.size(), set.dim());
    for (int r = 0; r < dyn_refined.size(); ++r)
        out.row(dyn.original_index[static_cast<size_t>(r)]) = dyn_refined.props().row(r);
    for (int r = 0; r < sta_refined.size(); ++r)
        out.row(sta.original_index[static_cast<size_t>(r)]) = sta_refined.props().row(r);
    return GaussianSet(std::move(out), set.num_classes(), set.feature_dim());
}

} // namespace gsocc
