#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Config and grid spec
// ---------------------------------------------------------------------------

struct GridSpec {
    Vector3d origin = Vector3d::Zero();
    double voxel_size = 0.4;
    Eigen::Vector3i dims = Eigen::Vector3i(32, 32, 32);

    std::int64_t num_voxels() const {
        return static_cast<std::int64_t>(dims.x()) * dims.y() * dims.z();
    }
    void validate() const {
        if ((dims.array() <= 0).any()) throw InvalidParameterError("grid dims must be positive");
        if (voxel_size <= 0) throw InvalidParameterError("voxel size must be positive");
    }
    Vector3d voxel_center(int ix, int iy, int iz) const {
        return origin + voxel_size * Vector3d(ix + 0.5, iy + 0.5, iz + 0.5);
    }
    std::int64_t flat(int ix, int iy, int iz) const {
        return ix + static_cast<std::int64_t>(dims.x()) *
                        (iy + static_cast<std::int64_t>(dims.y()) * iz);
    }
};

inline GridSpec spec_of(const VoxelGrid& grid) {
    return GridSpec{grid.origin, grid.voxel_size, grid.dims};
}

struct SplatConfig {
    double cutoff_sigmas = 3.0;   // hard Mahalanobis cutoff
    double tau_occ = 0.1;         // min accumulated density for a non-empty call
    double max_condition = 1e12;  // covariance condition bound; worse => skip

    void validate() const {
        if (cutoff_sigmas <= 0) throw InvalidParameterError("cutoff_sigmas must be positive");
        if (!(tau_occ > 0 && tau_occ < 1)) throw InvalidParameterError("tau_occ must be in (0,1)");
    }
};

// ---------------------------------------------------------------------------
// Accumulation (the differentiable part of the head)
// ---------------------------------------------------------------------------

/// Per-voxel, per-class accumulated density:
///   acc(v, c) = sum_i opacity_i * softmax(semantics_i)[c] * exp(-m_i(v)/2)
/// over Gaussians whose Mahalanobis distance to the voxel center is within
/// the cutoff. The per-voxel sum runs in ascending Gaussian id.
struct SplatAccumulation {
    GridSpec spec;
    MatrixXd acc;    // num_voxels x d
    int skipped = 0; // Gaussians dropped for ill-conditioned covariance
};

namespace detail {

struct SplatPrimitive {
    Vector3d mean;
    Matrix3d precision; // Sigma^{-1}
    VectorXd class_prob;
    double opacity;
    Eigen::Vector3i lo, hi; // inclusive voxel bbox
    bool active;            // contributes to this grid
    bool degenerate = false;
};

inline VectorXd stable_softmax(const VectorXd& logits) {
    const double mx = logits.maxCoeff();
    VectorXd e = (logits.array() - mx).exp();
    return e / e.sum();
}

inline SplatPrimitive prepare_primitive(const GaussianSet& set, int i, const GridSpec& spec,
                                        const SplatConfig& cfg) {
    SplatPrimitive p;
    const auto row = set.props().row(i);
    p.mean = row.segment<3>(GaussianSet::mean_offset()).transpose();
    const Vector3d scale = row.segment<3>(GaussianSet::scale_offset()).transpose();
    Vector4d quat = row.segment<4>(GaussianSet::rotation_offset()).transpose();
    p.opacity = row[GaussianSet::opacity_offset()];
    p.class_prob = stable_softmax(
        row.segment(GaussianSet::semantics_offset(), set.num_classes()).transpose());

    const double ratio = scale.maxCoeff() / scale.minCoeff();
    if (!(ratio * ratio <= cfg.max_condition)) {
        p.active = false;
        p.degenerate = true;
        return p;
    }
    quat /= quat.norm();
    const Matrix3d r = quat_to_rotation(quat);
    p.precision = r * scale.array().square().inverse().matrix().asDiagonal() * r.transpose();

    const Matrix3d sigma = r * scale.array().square().matrix().asDiagonal() * r.transpose();
    p.active = true;
    for (int a = 0; a < 3; ++a) {
        const double half = cfg.cutoff_sigmas * std::sqrt(std::max(sigma(a, a), 0.0));
        const double flo = (p.mean[a] - half - spec.origin[a]) / spec.voxel_size - 0.5;
        const double fhi = (p.mean[a] + half - spec.origin[a]) / spec.voxel_size - 0.5;
        p.lo[a] = std::max(0, static_cast<int>(std::ceil(flo)));
        p.hi[a] = std::min(spec.dims[a] - 1, static_cast<int>(std::floor(fhi)));
        if (p.lo[a] > p.hi[a]) p.active = false;
    }
    return p;
}

} // namespace detail

inline SplatAccumulation splat_accumulate(const GaussianSet& set, const GridSpec& spec,
                                          const SplatConfig& cfg) {
    spec.validate();
    cfg.validate();
    const int n = set.size();
    const int d = set.num_classes();
    const double cutoff_sq = cfg.cutoff_sigmas * cfg.cutoff_sigmas;

    SplatAccumulation result;
    result.spec = spec;
    result.acc.setZero(spec.num_voxels(), d);

    std::vector<detail::SplatPrimitive> prims(static_cast<size_t>(n));
    parallel_for(n, [&](std::int64_t i) {
        prims[static_cast<size_t>(i)] =
            detail::prepare_primitive(set, static_cast<int>(i), spec, cfg);
    }, 32);
    for (const auto& p : prims)
        if (p.degenerate) ++result.skipped;

    // Tile binning in ascending Gaussian id keeps every voxel's summation
    // order fixed no matter how tiles are scheduled.
    constexpr int kTile = 8;
    const Eigen::Vector3i tiles((spec.dims.x() + kTile - 1) / kTile,
                                (spec.dims.y() + kTile - 1) / kTile,
                                (spec.dims.z() + kTile - 1) / kTile);
    const std::int64_t num_tiles = static_cast<std::int64_t>(tiles.x()) * tiles.y() * tiles.z();
    std::vector<std::vector<int>> tile_gaussians(static_cast<size_t>(num_tiles));
    for (int g = 0; g < n; ++g) {
        const auto& p = prims[static_cast<size_t>(g)];
        if (!p.active) continue;
        for (int tz = p.lo.z() / kTile; tz <= p.hi.z() / kTile; ++tz)
            for (int ty = p.lo.y() / kTile; ty <= p.hi.y() / kTile; ++ty)
                for (int tx = p.lo.x() / kTile; tx <= p.hi.x() / kTile; ++tx)
                    tile_gaussians[static_cast<size_t>(
                                       tx + static_cast<std::int64_t>(tiles.x()) *
                                                (ty + static_cast<std::int64_t>(tiles.y()) * tz))]
                        .push_back(g);
    }

    parallel_for(num_tiles, [&](std::int64_t t) {
        const auto& list = tile_gaussians[static_cast<size_t>(t)];
        if (list.empty()) return;
        const int tx = static_cast<int>(t % tiles.x());
        const int ty = static_cast<int>((t / tiles.x()) % tiles.y());
        const int tz = static_cast<int>(t / (static_cast<std::int64_t>(tiles.x()) * tiles.y()));
        const int x0 = tx * kTile, x1 = std::min(spec.dims.x(), x0 + kTile);
        const int y0 = ty * kTile, y1 = std::min(spec.dims.y(), y0 + kTile);
        const int z0 = tz * kTile, z1 = std::min(spec.dims.z(), z0 + kTile);
        for (int iz = z0; iz < z1; ++iz)
            for (int iy = y0; iy < y1; ++iy)
                for (int ix = x0; ix < x1; ++ix) {
                    const std::int64_t v = spec.flat(ix, iy, iz);
                    const Vector3d center = spec.voxel_center(ix, iy, iz);
                    for (int g : list) {
                        const auto& p = prims[static_cast<size_t>(g)];
                        if (ix < p.lo.x() || ix > p.hi.x() || iy < p.lo.y() || iy > p.hi.y() ||
                            iz < p.lo.z() || iz > p.hi.z())
                            continue;
                        const Vector3d delta = center - p.mean;
                        const double m = delta.dot(p.precision * delta);
                        if (m > cutoff_sq) continue;
                        result.acc.row(v) +=
                            p.opacity * std::exp(-0.5 * m) * p.class_prob.transpose();
                    }
                }
    }, 1);
    return result;
}

// ---------------------------------------------------------------------------
// Discretization to a class grid
// ---------------------------------------------------------------------------

struct SplatResult {
    VoxelGrid grid;
    int skipped = 0;
};

/// Full head: accumulate, then call each voxel as the best non-empty class if
/// its accumulated density clears tau_occ, otherwise the empty class.
inline SplatResult splat(const GaussianSet& set, const GridSpec& spec, const SplatConfig& cfg,
                         const SemanticTaxonomy& taxonomy) {
    const SplatAccumulation acc = splat_accumulate(set, spec, cfg);
    SplatResult out{VoxelGrid(spec.origin, spec.voxel_size, spec.dims,
                              taxonomy.empty_class),
                    acc.skipped};
    const int d = set.num_classes();
    parallel_for(acc.spec.num_voxels(), [&](std::int64_t v) {
        int best = -1;
        double best_val = 0.0;
        for (int c = 0; c < d; ++c) {
            if (c == taxonomy.empty_class) continue;
            const double val = acc.acc(v, c);
            if (best < 0 || val > best_val) {
                best = c;
                best_val = val;
            }
        }
        out.grid.classes[static_cast<size_t>(v)] =
            (best >= 0 && best_val >= cfg.tau_occ) ? best : taxonomy.empty_class;
    }, 512);
    return out;
}

// ---------------------------------------------------------------------------
// Accumulation gradients
// ---------------------------------------------------------------------------

/// Gradient of sum(grad_acc .* acc) with respect to every Gaussian property.
/// Grid geometry and the Gaussian-voxel pairing (cutoff, bboxes, skips) are
/// treated as fixed. Runs in parallel over Gaussians: each Gaussian owns its
/// own gradient row and scans its own voxel box.
inline MatrixXd splat_accumulate_vjp(const GaussianSet& set, const GridSpec& spec,
                                     const SplatConfig& cfg, const MatrixXd& grad_acc) {
    spec.validate();
    cfg.validate();
    const int n = set.size();
    const int d = set.num_classes();
    const double cutoff_sq = cfg.cutoff_sigmas * cfg.cutoff_sigmas;
    MatrixXd grad = MatrixXd::Zero(n, set.dim());

    parallel_for(n, [&](std::int64_t gi) {
        const int i = static_cast<int>(gi);
        const auto prim = detail::prepare_primitive(set, i, spec, cfg);
        if (!prim.active) return;
        const auto row = set.props().row(i);
        const Vector3d scale = row.segment<3>(GaussianSet::scale_offset()).transpose();
        Vector4d quat_raw = row.segment<4>(GaussianSet::rotation_offset()).transpose();
        const double quat_norm = quat_raw.norm();
        const Vector4d quat = quat_raw / quat_norm;
        const Matrix3d rot = quat_to_rotation(quat);

        Vector3d g_mean = Vector3d::Zero();
        Matrix3d g_precision = Matrix3d::Zero();
        VectorXd g_prob = VectorXd::Zero(d);
        double g_opacity = 0.0;

        for (int iz = prim.lo.z(); iz <= prim.hi.z(); ++iz)
            for (int iy = prim.lo.y(); iy <= prim.hi.y(); ++iy)
                for (int ix = prim.lo.x(); ix <= prim.hi.x(); ++ix) {
                    const std::int64_t v = spec.flat(ix, iy, iz);
                    const Vector3d delta = spec.voxel_center(ix, iy, iz) - prim.mean;
                    const double m = delta.dot(prim.precision * delta);
                    if (m > cutoff_sq) continue;
                    const double density = std::exp(-0.5 * m);
                    const double weighted = grad_acc.row(v).dot(prim.class_prob); // sum_c A p_c
                    g_opacity += density * weighted;
                    g_prob += prim.opacity * density * grad_acc.row(v).transpose();
                    const double g_m = -0.5 * prim.opacity * density * weighted;
                    const Vector3d pd = prim.precision * delta;
                    g_mean += -2.0 * g_m * pd;       // dm/dmean = -2 P delta
                    g_precision += g_m * (delta * delta.transpose());
                }

        // semantics via softmax
        const VectorXd g_sem = prim.class_prob.cwiseProduct(
            g_prob - VectorXd::Constant(d, g_prob.dot(prim.class_prob)));
        // precision P = R diag(s^-2) R^T
        const Vector3d inv_sq = scale.array().square().inverse();
        const Matrix3d g_rot = 2.0 * g_precision * rot * inv_sq.asDiagonal();
        Vector3d g_scale;
        const Matrix3d rt_gp_r = rot.transpose() * g_precision * rot;
        for (int a = 0; a < 3; ++a)
            g_scale[a] = rt_gp_r(a, a) * (-2.0 / (scale[a] * scale[a] * scale[a]));
        Vector4d g_quat_unit;
        for (int c = 0; c < 4; ++c)
            g_quat_unit[c] = (quat_rotation_derivative(quat, c).cwiseProduct(g_rot)).sum();
        const Vector4d g_quat_raw =
            (g_quat_unit - quat * quat.dot(g_quat_unit)) / quat_norm;

        grad.row(gi).segment<3>(GaussianSet::mean_offset()) = g_mean.transpose();
        grad.row(gi).segment<3>(GaussianSet::scale_offset()) = g_scale.transpose();
        grad.row(gi).segment<4>(GaussianSet::rotation_offset()) = g_quat_raw.transpose();
        grad(gi, GaussianSet::opacity_offset()) = g_opacity;
        grad.row(gi).segment(GaussianSet::semantics_offset(), d) = g_sem.transpose();
    }, 8);
    return grad;
}

// ---------------------------------------------------------------------------
// Confusion counting and IoU metrics
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    std::vector<std::int64_t> tp, fp, fn; // per class, empty class included
    std::int64_t occupied_tp = 0;         // binary occupied-vs-empty pooling
    std::int64_t occupied_fp = 0;
    std::int64_t occupied_fn = 0;
    std::int64_t total_voxels = 0;
};

inline ConfusionCounts confusion(const VoxelGrid& pred, const VoxelGrid& gt,
                                 const SemanticTaxonomy& taxonomy) {
    if (!pred.same_spec(gt)) throw InvalidInputError("prediction and GT grid specs differ");
    const int d = taxonomy.num_classes();
    ConfusionCounts c;
    c.tp.assign(static_cast<size_t>(d), 0);
    c.fp.assign(static_cast<size_t>(d), 0);
    c.fn.assign(static_cast<size_t>(d), 0);
    c.total_voxels = pred.num_voxels();
    for (std::int64_t v = 0; v < c.total_voxels; ++v) {
        const int p = pred.classes[static_cast<size_t>(v)];
        const int g = gt.classes[static_cast<size_t>(v)];
        if (p < 0 || p >= d || g < 0 || g >= d)
            throw InvalidInputError("class id out of taxonomy range");
        if (p == g) {
            ++c.tp[static_cast<size_t>(p)];
        } else {
            ++c.fp[static_cast<size_t>(p)];
            ++c.fn[static_cast<size_t>(g)];
        }
        const bool p_occ = p != taxonomy.empty_class;
        const bool g_occ = g != taxonomy.empty_class;
        if (p_occ && g_occ) ++c.occupied_tp;
        if (p_occ && !g_occ) ++c.occupied_fp;
        if (!p_occ && g_occ) ++c.occupied_fn;
    }
    return c;
}

struct IoUMetrics {
    double iou = 0.0;                // occupied-vs-empty, classes pooled
    double miou = 0.0;               // mean over non-empty classes with support
    std::vector<double> per_class;   // NaN where the denominator is zero
};

inline IoUMetrics iou_miou(const ConfusionCounts& counts, const SemanticTaxonomy& taxonomy) {
    const int d = taxonomy.num_classes();
    IoUMetrics m;
    m.per_class.assign(static_cast<size_t>(d), std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int included = 0;
    for (int c = 0; c < d; ++c) {
        const std::int64_t denom = counts.tp[static_cast<size_t>(c)] +
                                   counts.fp[static_cast<size_t>(c)] +
                                   counts.fn[static_cast<size_t>(c)];
        if (denom > 0)
            m.per_class[static_cast<size_t>(c)] =
                static_cast<double>(counts.tp[static_cast<size_t>(c)]) / static_cast<double>(denom);
        if (c == taxonomy.empty_class) continue;
        if (denom > 0) {
            sum += m.per_class[static_cast<size_t>(c)];
            ++included;
        }
    }
    m.miou = included > 0 ? sum / included : 0.0;
    const std::int64_t occ_denom = counts.occupied_tp + counts.occupied_fp + counts.occupied_fn;
    m.iou = occ_denom > 0 ? static_cast<double>(counts.occupied_tp) / static_cast<double>(occ_denom)
                          : 1.0;
    return m;
}

/// Mean per-class IoU over a taxonomy subset (dynamic or static non-empty
/// classes); classes without support are excluded.
inline double subset_miou(const IoUMetrics& metrics, const SemanticTaxonomy& taxonomy,
                          bool dynamic_subset) {
    double sum = 0.0;
    int included = 0;
    for (int c = 0; c < taxonomy.num_classes(); ++c) {
        if (c == taxonomy.empty_class) continue;
        if (taxonomy.is_dynamic(c) != dynamic_subset) continue;
        const double v = metrics.per_class[static_cast<size_t>(c)];
        if (!std::isnan(v)) {
            sum += v;
            ++included;
        }
    }
    return included > 0 ? sum / included : 0.0;
}

} // namespace gsocc
