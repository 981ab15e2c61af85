#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/parallel.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Neighbor index tables
// ---------------------------------------------------------------------------

/// Per-node ordered neighbor lists. Row i always starts with i itself.
/// Geometric rows are sorted by (squared distance asc, id asc); semantic rows
/// by (cosine similarity desc, id asc). Padded entries (adaptive-radius mode
/// only) repeat the last valid neighbor and are flagged in `pad`.
struct NeighborIndex {
    enum class Kind { geometric, semantic };

    Kind kind = Kind::geometric;
    int width = 0;
    Eigen::MatrixXi idx;                                            // N x width
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> pad; // 1 = padded
    bool has_padding = false;

    int size() const { return static_cast<int>(idx.rows()); }
    bool is_padded(int i, int j) const { return has_padding && pad(i, j) != 0; }
};

namespace detail {

/// The one squared-distance expression used by every geometric path, so the
/// accelerated search and any caller agree bit-for-bit.
inline double sq_dist3(const double* a, const double* b) {
    const double dx = a[0] - b[0];
    const double dy = a[1] - b[1];
    const double dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

struct ScoredId {
    double key; // squared distance (asc) or negated similarity (asc)
    int id;
    bool operator<(const ScoredId& o) const {
        return key < o.key || (key == o.key && id < o.id);
    }
};

/// Keeps the `keep` best-scoring candidates of `cands` in sorted order.
inline void select_best(std::vector<ScoredId>& cands, int keep) {
    if (static_cast<int>(cands.size()) > keep) {
        std::nth_element(cands.begin(), cands.begin() + keep - 1, cands.end());
        cands.resize(static_cast<size_t>(keep));
    }
    std::sort(cands.begin(), cands.end());
}

} // namespace detail

// ---------------------------------------------------------------------------
// Pairwise squared distances
// ---------------------------------------------------------------------------

/// Dense N x N squared Euclidean distances between rows of `means`.
/// Each unordered pair is computed once and mirrored, so the matrix is
/// exactly symmetric and the diagonal exactly zero.
inline MatrixXd pairwise_sq_dist(const MatrixXd& means) {
    if (means.rows() < 1 || means.cols() != 3)
        throw InvalidParameterError("pairwise_sq_dist expects an N x 3 matrix, N >= 1");
    const int n = static_cast<int>(means.rows());
    MatrixXd out = MatrixXd::Zero(n, n);
    std::vector<Eigen::Vector3d> pts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pts[static_cast<size_t>(i)] = means.row(i).transpose();
    parallel_for(n, [&](std::int64_t i) {
        for (int j = static_cast<int>(i) + 1; j < n; ++j) {
            const double d = detail::sq_dist3(pts[static_cast<size_t>(i)].data(),
                                              pts[static_cast<size_t>(j)].data());
            out(i, j) = d;
            out(j, i) = d;
        }
    }, 8);
    return out;
}

// ---------------------------------------------------------------------------
// Geometric KNN (uniform-grid accelerated, oracle-exact)
// ---------------------------------------------------------------------------

namespace detail {

struct PointGrid {
    Eigen::Vector3d lo;
    double h = 1.0;
    Eigen::Vector3i cells = Eigen::Vector3i::Ones();
    std::vector<std::vector<int>> bins; // node ids in ascending order per cell

    int cell_of(double v, int axis) const {
        int c = static_cast<int>(std::floor((v - lo[axis]) / h));
        return std::clamp(c, 0, cells[axis] - 1);
    }
    std::size_t flat(int cx, int cy, int cz) const {
        return static_cast<std::size_t>(cx) +
               static_cast<std::size_t>(cells.x()) *
                   (static_cast<std::size_t>(cy) + static_cast<std::size_t>(cells.y()) * cz);
    }
};

inline PointGrid build_point_grid(const std::vector<Eigen::Vector3d>& pts) {
    PointGrid g;
    const int n = static_cast<int>(pts.size());
    Eigen::Vector3d lo = pts[0], hi = pts[0];
    for (const auto& p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const Eigen::Vector3d extent = hi - lo;
    const double volume = std::max(extent.prod(), 1e-30);
    // aim for ~2 points per occupied cell
    double h = std::cbrt(volume * 2.0 / n);
    h = std::max(h, extent.maxCoeff() / 128.0); // cap the cell count
    if (h <= 0.0) h = 1.0;
    g.lo = lo;
    g.h = h;
    for (int a = 0; a < 3; ++a)
        g.cells[a] = std::max(1, static_cast<int>(std::floor(extent[a] / h)) + 1);
    g.bins.resize(static_cast<std::size_t>(g.cells.x()) * g.cells.y() * g.cells.z());
    for (int i = 0; i < n; ++i) {
        const auto& p = pts[static_cast<size_t>(i)];
        g.bins[g.flat(g.cell_of(p.x(), 0), g.cell_of(p.y(), 1), g.cell_of(p.z(), 2))].push_back(i);
    }
    return g;
}

/// Exact K-1 nearest non-self neighbors of query i via expanding cell rings.
/// Ring r is scanned whenever ((r-1)*h)^2 could still beat the current k-th
/// best (ties included), so the candidate set provably covers the true result
/// under the (distance, id) ordering.
inline void grid_query(const PointGrid& g, const std::vector<Eigen::Vector3d>& pts, int i,
                       int keep, std::vector<ScoredId>& out) {
    out.clear();
    if (keep <= 0) return;
    const auto& q = pts[static_cast<size_t>(i)];
    const int cx = g.cell_of(q.x(), 0), cy = g.cell_of(q.y(), 1), cz = g.cell_of(q.z(), 2);
    const int max_ring = std::max({g.cells.x(), g.cells.y(), g.cells.z()});
    double kth = std::numeric_limits<double>::infinity();

    auto scan_cell = [&](int x, int y, int z) {
        if (x < 0 || y < 0 || z < 0 || x >= g.cells.x() || y >= g.cells.y() || z >= g.cells.z())
            return;
        for (int id : g.bins[g.flat(x, y, z)]) {
            if (id == i) continue;
            out.push_back({sq_dist3(q.data(), pts[static_cast<size_t>(id)].data()), id});
        }
    };

    for (int r = 0; r <= max_ring; ++r) {
        if (static_cast<int>(out.size()) >= keep) {
            const double lower = (r - 1) > 0 ? (r - 1) * g.h : 0.0;
            if (lower * lower > kth) break;
        }
        if (r == 0) {
            scan_cell(cx, cy, cz);
        } else {
            for (int z = cz - r; z <= cz + r; ++z)
                for (int y = cy - r; y <= cy + r; ++y)
                    for (int x = cx - r; x <= cx + r; ++x) {
                        const int cheb = std::max({std::abs(x - cx), std::abs(y - cy), std::abs(z - cz)});
                        if (cheb == r) scan_cell(x, y, z);
                    }
        }
        if (static_cast<int>(out.size()) >= keep) {
            std::nth_element(out.begin(), out.begin() + keep - 1, out.end());
            out.resize(static_cast<size_t>(keep));
            kth = out[static_cast<size_t>(keep - 1)].key;
        }
    }
    select_best(out, keep);
}

} // namespace detail

/// K nearest neighbors per node under squared Euclidean distance between
/// means. Row i = [i, then the K-1 nearest others], ascending by distance
/// with ties broken by ascending id.
inline NeighborIndex knn_geometric(const MatrixXd& means, int k) {
    const int n = static_cast<int>(means.rows());
    if (means.cols() != 3) throw InvalidParameterError("knn_geometric expects N x 3 means");
    if (k < 1 || k > n) throw InvalidParameterError("knn_geometric requires 1 <= K <= N");

    NeighborIndex ni;
    ni.kind = NeighborIndex::Kind::geometric;
    ni.width = k;
    ni.idx.resize(n, k);

    std::vector<Eigen::Vector3d> pts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pts[static_cast<size_t>(i)] = means.row(i).transpose();

    const bool use_grid = n > 256;
    const detail::PointGrid grid = use_grid ? detail::build_point_grid(pts) : detail::PointGrid{};

    parallel_blocks(n, [&](std::int64_t begin, std::int64_t end) {
        std::vector<detail::ScoredId> cands;
        for (std::int64_t i = begin; i < end; ++i) {
            const int ii = static_cast<int>(i);
            if (use_grid) {
                detail::grid_query(grid, pts, ii, k - 1, cands);
            } else {
                cands.clear();
                for (int j = 0; j < n; ++j) {
                    if (j == ii) continue;
                    cands.push_back({detail::sq_dist3(pts[static_cast<size_t>(ii)].data(),
                                                      pts[static_cast<size_t>(j)].data()),
                                     j});
                }
                detail::select_best(cands, k - 1);
            }
            ni.idx(ii, 0) = ii;
            for (int j = 0; j < k - 1; ++j) ni.idx(ii, j + 1) = cands[static_cast<size_t>(j)].id;
        }
    }, 4);
    return ni;
}

/// Adaptive-radius KNN: the plain K nearest of each node are filtered to the
/// radius r_i = rho * mean(scale_i). Rows that would drop below K_min
/// survivors fall back to the plain row; surviving rows are padded to width K
/// by repeating the last kept neighbor, with padding flagged.
inline NeighborIndex knn_adaptive_radius(const GaussianSet& set, int k, double rho, int k_min) {
    const int n = set.size();
    if (k < 1 || k > n) throw InvalidParameterError("knn_adaptive_radius requires 1 <= K <= N");
    if (k_min < 1 || k_min > k) throw InvalidParameterError("requires 1 <= K_min <= K");
    if (rho <= 0) throw InvalidParameterError("rho must be positive");

    const MatrixXd means = set.means();
    NeighborIndex plain = knn_geometric(means, k);

    NeighborIndex ni;
    ni.kind = NeighborIndex::Kind::geometric;
    ni.width = k;
    ni.idx.resize(n, k);
    ni.pad.setZero(n, k);
    ni.has_padding = true;

    std::vector<Eigen::Vector3d> pts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pts[static_cast<size_t>(i)] = means.row(i).transpose();

    parallel_for(n, [&](std::int64_t i) {
        const int ii = static_cast<int>(i);
        const double radius = rho * set.scales().row(ii).mean();
        const double r2 = radius * radius;
        std::vector<int> kept;
        kept.reserve(static_cast<size_t>(k));
        for (int j = 0; j < k; ++j) {
            const int id = plain.idx(ii, j);
            const double d = detail::sq_dist3(pts[static_cast<size_t>(ii)].data(),
                                              pts[static_cast<size_t>(id)].data());
            if (d <= r2) kept.push_back(id);
        }
        if (static_cast<int>(kept.size()) < k_min) {
            ni.idx.row(ii) = plain.idx.row(ii); // fall back to plain KNN
            return;
        }
        for (int j = 0; j < k; ++j) {
            if (j < static_cast<int>(kept.size())) {
                ni.idx(ii, j) = kept[static_cast<size_t>(j)];
            } else {
                ni.idx(ii, j) = kept.back();
                ni.pad(ii, j) = 1;
            }
        }
    }, 16);
    return ni;
}

// ---------------------------------------------------------------------------
// Semantic top-M graph
// ---------------------------------------------------------------------------

inline constexpr double kCosineNormFloor = 1e-12;

/// Top-M most-similar nodes per feature row under cosine similarity with a
/// norm floor. Row i = [i, then the M-1 most similar others], descending by
/// similarity with ties broken by ascending id. Self holds rank 0 regardless
/// of its similarity value (a zero feature row has sim 0 against everything).
inline NeighborIndex cosine_topM(const MatrixXd& features, int m,
                                 double eps = kCosineNormFloor) {
    const int n = static_cast<int>(features.rows());
    if (n < 1) throw InvalidParameterError("cosine_topM requires N >= 1");
    if (m < 1 || m > n) throw InvalidParameterError("cosine_topM requires 1 <= M <= N");
    if (eps <= 0) throw InvalidParameterError("eps must be positive");

    // contiguous per-node feature columns (rows of a column-major matrix stride)
    const MatrixXd ft = features.transpose();

    VectorXd floored_norm(n);
    for (int i = 0; i < n; ++i) floored_norm[i] = std::max(ft.col(i).norm(), eps);

    NeighborIndex ni;
    ni.kind = NeighborIndex::Kind::semantic;
    ni.width = m;
    ni.idx.resize(n, m);

    parallel_blocks(n, [&](std::int64_t begin, std::int64_t end) {
        std::vector<detail::ScoredId> cands;
        cands.reserve(static_cast<size_t>(n));
        for (std::int64_t i = begin; i < end; ++i) {
            const int ii = static_cast<int>(i);
            cands.clear();
            for (int j = 0; j < n; ++j) {
                if (j == ii) continue;
                const double sim = ft.col(ii).dot(ft.col(j)) / (floored_norm[ii] * floored_norm[j]);
                cands.push_back({-sim, j}); // negate: best = smallest key
            }
            detail::select_best(cands, m - 1);
            ni.idx(ii, 0) = ii;
            for (int j = 0; j < m - 1; ++j) ni.idx(ii, j + 1) = cands[static_cast<size_t>(j)].id;
        }
    }, 4);
    return ni;
}

} // namespace gsocc
