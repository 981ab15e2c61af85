#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gsocc/errors.hpp"

namespace gsocc {

using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::Vector4d;
using Eigen::VectorXd;

inline constexpr double kQuatNormTolerance = 1e-6;

// ---------------------------------------------------------------------------
// Semantic taxonomy
// ---------------------------------------------------------------------------

/// Ordered class list for a scene. Non-empty classes are ordered dynamic
/// first: indices [0, static_boundary) are dynamic, [static_boundary, ...)
/// are static. The empty class sits last.
struct SemanticTaxonomy {
    std::vector<std::string> class_names;
    int empty_class = -1;                 // index of the empty class
    int static_boundary = 0;              // first static class index
    std::vector<bool> dynamic_flags;      // per class; empty class is false

    int num_classes() const { return static_cast<int>(class_names.size()); }

    bool is_dynamic(int c) const { return dynamic_flags[static_cast<size_t>(c)]; }
    bool is_empty(int c) const { return c == empty_class; }

    void validate() const {
        const int d = num_classes();
        if (d < 2) throw InvalidInputError("taxonomy needs at least 2 classes");
        if (empty_class < 0 || empty_class >= d)
            throw InvalidInputError("taxonomy empty class out of range");
        if (dynamic_flags.size() != class_names.size())
            throw InvalidInputError("taxonomy dynamic_flags size mismatch");
        if (dynamic_flags[static_cast<size_t>(empty_class)])
            throw InvalidInputError("empty class cannot be dynamic");
        for (int c = 0; c < d; ++c) {
            if (c == empty_class) continue;
            const bool want_dynamic = c < static_boundary;
            if (dynamic_flags[static_cast<size_t>(c)] != want_dynamic)
                throw InvalidInputError("taxonomy classes must be ordered dynamic-first");
        }
    }

    /// Convenience constructor: dynamic names, then static names, then one
    /// trailing empty class.
    static SemanticTaxonomy make(std::vector<std::string> dynamic_names,
                                 std::vector<std::string> static_names,
                                 std::string empty_name = "empty") {
        SemanticTaxonomy t;
        t.static_boundary = static_cast<int>(dynamic_names.size());
        for (auto& n : dynamic_names) {
            t.class_names.push_back(std::move(n));
            t.dynamic_flags.push_back(true);
        }
        for (auto& n : static_names) {
            t.class_names.push_back(std::move(n));
            t.dynamic_flags.push_back(false);
        }
        t.class_names.push_back(std::move(empty_name));
        t.dynamic_flags.push_back(false);
        t.empty_class = static_cast<int>(t.class_names.size()) - 1;
        t.validate();
        return t;
    }
};

// ---------------------------------------------------------------------------
// Quaternion helpers (w, x, y, z; identity = (1,0,0,0))
// ---------------------------------------------------------------------------

inline Matrix3d quat_to_rotation(const Vector4d& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// dR/dq_k for a unit quaternion, k in {w,x,y,z}.
inline Matrix3d quat_rotation_derivative(const Vector4d& q, int k) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Matrix3d d;
    switch (k) {
        case 0: d << 0, -z, y, z, 0, -x, -y, x, 0; break;
        case 1: d << 0, y, z, y, -2 * x, -w, z, w, -2 * x; break;
        case 2: d << -2 * y, x, w, x, 0, z, -w, z, -2 * y; break;
        default: d << -2 * z, -w, x, w, -2 * z, y, x, y, 0; break;
    }
    return 2.0 * d;
}

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

/// One anisotropic 3D Gaussian with semantic logits and a feature vector.
struct Gaussian {
    Vector3d mean = Vector3d::Zero();            // meters
    Vector3d scale = Vector3d::Ones();           // positive lengths, meters
    Vector4d rotation = Vector4d(1, 0, 0, 0);    // unit quaternion (w,x,y,z)
    double opacity = 1.0;                        // in [0,1]
    VectorXd semantics;                          // d logits
    VectorXd feature;                            // F values

    bool scale_positive() const { return (scale.array() > 0.0).all(); }
    bool rotation_unit() const { return std::abs(rotation.norm() - 1.0) <= kQuatNormTolerance; }
    bool opacity_in_range() const { return opacity >= 0.0 && opacity <= 1.0; }
};

/// Covariance Sigma = R * diag(scale^2) * R^T. The quaternion is normalized
/// before use; beyond-tolerance quaternions are rejected.
inline Matrix3d covariance(const Gaussian& g) {
    if (!g.rotation_unit())
        throw InvalidGaussianError("rotation quaternion norm deviates from 1 beyond 1e-6");
    if (!g.scale_positive())
        throw InvalidGaussianError("scale components must be positive");
    const Vector4d q = g.rotation / g.rotation.norm();
    const Matrix3d r = quat_to_rotation(q);
    return r * g.scale.array().square().matrix().asDiagonal() * r.transpose();
}

// ---------------------------------------------------------------------------
// GaussianSet: N Gaussians stored as flat property vectors
// ---------------------------------------------------------------------------

/// Flat per-Gaussian layout: [mean(3) | scale(3) | rotation(4) | opacity(1) |
/// semantics(d) | feature(F)]. The matrix of property vectors doubles as the
/// attention token matrix.
class GaussianSet {
public:
    GaussianSet() = default;
    GaussianSet(int n, int d, int f)
        : d_(d), f_(f), props_(MatrixXd::Zero(n, 11 + d + f)) {
        if (n < 0 || d < 2 || f < 0)
            throw InvalidParameterError("GaussianSet needs n >= 0, d >= 2, f >= 0");
        for (int i = 0; i < n; ++i) props_(i, 6) = 1.0;  // identity rotation
        props_.col(10).setOnes();                        // opacity 1
        props_.middleCols(3, 3).setOnes();               // unit scale
    }
    GaussianSet(MatrixXd props, int d, int f) : d_(d), f_(f), props_(std::move(props)) {
        if (props_.cols() != 11 + d + f)
            throw InvalidParameterError("property matrix width inconsistent with d and F");
    }

    int size() const { return static_cast<int>(props_.rows()); }
    int num_classes() const { return d_; }
    int feature_dim() const { return f_; }
    int dim() const { return 11 + d_ + f_; }

    static constexpr int mean_offset() { return 0; }
    static constexpr int scale_offset() { return 3; }
    static constexpr int rotation_offset() { return 6; }
    static constexpr int opacity_offset() { return 10; }
    static constexpr int semantics_offset() { return 11; }
    int feature_offset() const { return 11 + d_; }

    const MatrixXd& props() const { return props_; }
    MatrixXd& props() { return props_; }

    auto means() const { return props_.middleCols(mean_offset(), 3); }
    auto scales() const { return props_.middleCols(scale_offset(), 3); }
    auto rotations() const { return props_.middleCols(rotation_offset(), 4); }
    auto opacities() const { return props_.col(opacity_offset()); }
    auto semantics() const { return props_.middleCols(semantics_offset(), d_); }
    auto features() const { return props_.middleCols(feature_offset(), f_); }

    Gaussian get(int i) const {
        Gaussian g;
        g.mean = props_.row(i).segment<3>(mean_offset()).transpose();
        g.scale = props_.row(i).segment<3>(scale_offset()).transpose();
        g.rotation = props_.row(i).segment<4>(rotation_offset()).transpose();
        g.opacity = props_(i, opacity_offset());
        g.semantics = props_.row(i).segment(semantics_offset(), d_).transpose();
        g.feature = props_.row(i).segment(feature_offset(), f_).transpose();
        return g;
    }

    void set(int i, const Gaussian& g) {
        props_.row(i).segment<3>(mean_offset()) = g.mean.transpose();
        props_.row(i).segment<3>(scale_offset()) = g.scale.transpose();
        props_.row(i).segment<4>(rotation_offset()) = g.rotation.transpose();
        props_(i, opacity_offset()) = g.opacity;
        props_.row(i).segment(semantics_offset(), d_) = g.semantics.transpose();
        props_.row(i).segment(feature_offset(), f_) = g.feature.transpose();
    }

private:
    int d_ = 2;
    int f_ = 0;
    MatrixXd props_;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct InvariantViolation {
    int index;
    std::string invariant;
};

/// Checks every member against the Gaussian invariants. Never throws; an
/// empty report means the set is valid.
inline std::vector<InvariantViolation> validate_set(const GaussianSet& set) {
    std::vector<InvariantViolation> report;
    for (int i = 0; i < set.size(); ++i) {
        const auto row = set.props().row(i);
        const Eigen::Vector3d scale = row.segment<3>(GaussianSet::scale_offset()).transpose();
        const Eigen::Vector4d rot = row.segment<4>(GaussianSet::rotation_offset()).transpose();
        const double opacity = row[GaussianSet::opacity_offset()];
        if (!(scale.array() > 0.0).all()) report.push_back({i, "scale>0"});
        if (std::abs(rot.norm() - 1.0) > kQuatNormTolerance) report.push_back({i, "unit rotation"});
        if (!(opacity >= 0.0 && opacity <= 1.0)) report.push_back({i, "opacity in [0,1]"});
        if (!row.allFinite()) report.push_back({i, "finite"});
    }
    return report;
}

// ---------------------------------------------------------------------------
// VoxelGrid
// ---------------------------------------------------------------------------

/// Discretized semantic occupancy over a metric volume. Class ids are stored
/// x-fastest: flat index = ix + dims.x * (iy + dims.y * iz).
struct VoxelGrid {
    Vector3d origin = Vector3d::Zero();   // meters; corner of voxel (0,0,0)
    double voxel_size = 0.4;              // meters
    Eigen::Vector3i dims = Eigen::Vector3i::Zero();
    std::vector<int32_t> classes;

    VoxelGrid() = default;
    VoxelGrid(const Vector3d& origin_, double voxel_size_, const Eigen::Vector3i& dims_,
              int32_t fill = 0)
        : origin(origin_), voxel_size(voxel_size_), dims(dims_) {
        if ((dims.array() <= 0).any()) throw InvalidParameterError("grid dims must be positive");
        if (voxel_size <= 0) throw InvalidParameterError("voxel size must be positive");
        classes.assign(static_cast<size_t>(dims.x()) * dims.y() * dims.z(), fill);
    }

    std::int64_t num_voxels() const {
        return static_cast<std::int64_t>(dims.x()) * dims.y() * dims.z();
    }
    std::int64_t flat(int ix, int iy, int iz) const {
        return ix + static_cast<std::int64_t>(dims.x()) * (iy + static_cast<std::int64_t>(dims.y()) * iz);
    }
    int32_t at(int ix, int iy, int iz) const { return classes[static_cast<size_t>(flat(ix, iy, iz))]; }
    int32_t& at(int ix, int iy, int iz) { return classes[static_cast<size_t>(flat(ix, iy, iz))]; }

    Vector3d voxel_center(int ix, int iy, int iz) const {
        return origin + voxel_size * Vector3d(ix + 0.5, iy + 0.5, iz + 0.5);
    }

    bool same_spec(const VoxelGrid& other) const {
        return dims == other.dims && voxel_size == other.voxel_size &&
               (origin - other.origin).norm() == 0.0;
    }
};

} // namespace gsocc
