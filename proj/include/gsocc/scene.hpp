#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/rng.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Synthetic desk-scale scenes
// ---------------------------------------------------------------------------

/// Desk-scale taxonomy: three dynamic object classes, two static classes,
/// empty last.
inline SemanticTaxonomy default_taxonomy() {
    return SemanticTaxonomy::make({"car", "pedestrian", "cyclist"}, {"road", "building"});
}

struct SceneSpec {
    std::uint64_t seed = 0;
    int init_draw = 0;      // which noisy Gaussian sampling of the same GT
    double extent_xy = 8.0; // scene content spans [-extent_xy, extent_xy]
    double extent_z = 3.2;

    bool ground_plane = true;          // first static class
    int boxes_per_dynamic_class = 2;   // per dynamic class
    int walls_per_static_class = 2;    // per static class after the ground class
    int posts_per_static_class = 3;

    int num_gaussians = 512;
    double position_noise = 0.35;  // sigma (m) on initial Gaussian means
    double logit_noise = 2.0;      // sigma on initial semantic logits
    double true_class_logit = 2.5; // logit handed to the sampled class
    double feature_noise = 0.35;   // sigma around the instance feature anchor
    int feature_dim = 32;

    SemanticTaxonomy taxonomy = default_taxonomy();
    GridSpec grid{Vector3d(-8.0, -8.0, 0.0), 0.5, Eigen::Vector3i(32, 32, 32)};

    int total_objects() const {
        int dynamic_classes = 0, static_classes = 0;
        for (int c = 0; c < taxonomy.num_classes(); ++c) {
            if (c == taxonomy.empty_class) continue;
            (taxonomy.is_dynamic(c) ? dynamic_classes : static_classes)++;
        }
        const int later_static = std::max(0, static_classes - (ground_plane ? 1 : 0));
        return dynamic_classes * boxes_per_dynamic_class +
               later_static * (walls_per_static_class + posts_per_static_class) +
               (ground_plane ? 1 : 0);
    }
};

struct ScenePrimitive {
    int class_id;
    Vector3d lo, hi; // axis-aligned box, meters
};

struct Scene {
    GaussianSet init;
    VoxelGrid gt;
    SemanticTaxonomy taxonomy;
    std::vector<ScenePrimitive> primitives;
};

namespace detail {

inline bool box_contains(const ScenePrimitive& b, const Vector3d& p) {
    return (p.array() >= b.lo.array()).all() && (p.array() <= b.hi.array()).all();
}

/// Box side ranges per dynamic slot; cycled when a taxonomy has more dynamic
/// classes than presets.
inline Vector3d dynamic_box_size(int slot, Rng& rng) {
    switch (slot % 3) {
        case 0: return {rng.uniform(1.8, 2.6), rng.uniform(1.0, 1.4), rng.uniform(0.8, 1.2)};
        case 1: return {rng.uniform(0.6, 0.9), rng.uniform(0.6, 0.9), rng.uniform(1.4, 1.8)};
        default: return {rng.uniform(1.4, 1.9), rng.uniform(0.6, 0.9), rng.uniform(1.3, 1.7)};
    }
}

} // namespace detail

/// Places ground/wall/post/box primitives, voxelizes them into the GT grid
/// (later primitives paint over earlier ones), and samples noisy initial
/// Gaussians from the occupied voxels. Deterministic per seed.
inline Scene gen_scene(const SceneSpec& spec) {
    spec.taxonomy.validate();
    spec.grid.validate();
    if (spec.extent_xy <= 0 || spec.extent_z <= 0)
        throw InvalidParameterError("scene extent must be positive");
    if (spec.boxes_per_dynamic_class < 0 || spec.walls_per_static_class < 0 ||
        spec.posts_per_static_class < 0)
        throw InvalidParameterError("object counts must be nonnegative");
    if (spec.total_objects() <= 0)
        throw DegenerateSceneError("scene spec places no objects");
    if (spec.num_gaussians < 1) throw DegenerateSceneError("scene spec places no Gaussians");

    Rng rng(spec.seed);
    const auto& tax = spec.taxonomy;
    Scene scene;
    scene.taxonomy = tax;

    const double ground_top = 0.4;
    // statics first, dynamics painted over them
    bool ground_assigned = false;
    for (int c = tax.static_boundary; c < tax.num_classes(); ++c) {
        if (c == tax.empty_class) continue;
        if (spec.ground_plane && !ground_assigned) {
            scene.primitives.push_back({c,
                                        Vector3d(-spec.extent_xy, -spec.extent_xy, 0.0),
                                        Vector3d(spec.extent_xy, spec.extent_xy, ground_top)});
            ground_assigned = true;
            continue;
        }
        for (int w = 0; w < spec.walls_per_static_class; ++w) {
            const bool along_x = rng.uniform() < 0.5;
            const double len = rng.uniform(3.0, 6.0);
            const double thick = rng.uniform(0.7, 1.0);
            const double height = rng.uniform(1.8, 2.8);
            const double cx = rng.uniform(-spec.extent_xy + 3, spec.extent_xy - 3);
            const double cy = rng.uniform(-spec.extent_xy + 3, spec.extent_xy - 3);
            const Vector3d half = along_x ? Vector3d(len / 2, thick / 2, 0)
                                          : Vector3d(thick / 2, len / 2, 0);
            scene.primitives.push_back({c, Vector3d(cx - half.x(), cy - half.y(), ground_top),
                                        Vector3d(cx + half.x(), cy + half.y(), ground_top + height)});
        }
        for (int p = 0; p < spec.posts_per_static_class; ++p) {
            const double side = rng.uniform(0.7, 1.0);
            const double height = rng.uniform(1.5, std::max(1.6, spec.extent_z - 0.6));
            const double cx = rng.uniform(-spec.extent_xy + 2, spec.extent_xy - 2);
            const double cy = rng.uniform(-spec.extent_xy + 2, spec.extent_xy - 2);
            scene.primitives.push_back({c, Vector3d(cx - side / 2, cy - side / 2, ground_top),
                                        Vector3d(cx + side / 2, cy + side / 2, ground_top + height)});
        }
    }
    int dynamic_slot = 0;
    for (int c = 0; c < tax.static_boundary; ++c) {
        for (int b = 0; b < spec.boxes_per_dynamic_class; ++b) {
            const Vector3d size = detail::dynamic_box_size(dynamic_slot, rng);
            const double cx = rng.uniform(-spec.extent_xy + 2, spec.extent_xy - 2);
            const double cy = rng.uniform(-spec.extent_xy + 2, spec.extent_xy - 2);
            scene.primitives.push_back(
                {c, Vector3d(cx - size.x() / 2, cy - size.y() / 2, ground_top),
                 Vector3d(cx + size.x() / 2, cy + size.y() / 2, ground_top + size.z())});
        }
        ++dynamic_slot;
    }

    // GT voxelization: last containing primitive wins. The owning primitive
    // is kept per voxel so sampled Gaussians inherit instance identity.
    scene.gt = VoxelGrid(spec.grid.origin, spec.grid.voxel_size, spec.grid.dims, tax.empty_class);
    std::vector<std::int64_t> occupied;
    std::vector<int> occupied_primitive;
    for (int iz = 0; iz < spec.grid.dims.z(); ++iz)
        for (int iy = 0; iy < spec.grid.dims.y(); ++iy)
            for (int ix = 0; ix < spec.grid.dims.x(); ++ix) {
                const Vector3d center = spec.grid.voxel_center(ix, iy, iz);
                int cls = tax.empty_class;
                int owner = -1;
                for (size_t pidx = 0; pidx < scene.primitives.size(); ++pidx)
                    if (detail::box_contains(scene.primitives[pidx], center)) {
                        cls = scene.primitives[pidx].class_id;
                        owner = static_cast<int>(pidx);
                    }
                if (cls != tax.empty_class) {
                    scene.gt.at(ix, iy, iz) = cls;
                    occupied.push_back(spec.grid.flat(ix, iy, iz));
                    occupied_primitive.push_back(owner);
                }
            }
    if (occupied.empty())
        throw DegenerateSceneError("no primitive covered any voxel center");

    // Fresh stream per init draw: another draw is a held-out re-sampling of
    // the same GT for validation-style evaluation.
    Rng init_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL *
                 static_cast<std::uint64_t>(spec.init_draw + 1));

    // Per-instance feature anchors: Gaussians of the same object share a
    // feature direction (appearance identity), so the similarity graph groups
    // instance-mates. Anchors are re-drawn per init draw - the similarity
    // STRUCTURE is stable scene to scene, the directions are not, so features
    // carry relational signal but no pointwise class signal.
    const int d = tax.num_classes();
    const int num_prims = static_cast<int>(scene.primitives.size());
    MatrixXd anchors(num_prims, spec.feature_dim);
    for (int pidx = 0; pidx < num_prims; ++pidx) {
        for (int j = 0; j < spec.feature_dim; ++j) anchors(pidx, j) = init_rng.normal();
        anchors.row(pidx) /= anchors.row(pidx).norm();
    }

    scene.init = GaussianSet(spec.num_gaussians, d, spec.feature_dim);
    for (int i = 0; i < spec.num_gaussians; ++i) {
        const std::int64_t pick =
            init_rng.uniform_int(0, static_cast<std::int64_t>(occupied.size()) - 1);
        const std::int64_t flat = occupied[static_cast<size_t>(pick)];
        const int owner = occupied_primitive[static_cast<size_t>(pick)];
        const int ix = static_cast<int>(flat % spec.grid.dims.x());
        const int iy = static_cast<int>((flat / spec.grid.dims.x()) % spec.grid.dims.y());
        const int iz = static_cast<int>(flat / (static_cast<std::int64_t>(spec.grid.dims.x()) *
                                                spec.grid.dims.y()));
        const int cls = scene.gt.at(ix, iy, iz);

        Gaussian g;
        Vector3d pos = spec.grid.voxel_center(ix, iy, iz);
        for (int a = 0; a < 3; ++a)
            pos[a] += init_rng.uniform(-0.5, 0.5) * spec.grid.voxel_size +
                      init_rng.normal(0.0, spec.position_noise);
        g.mean = pos;
        for (int a = 0; a < 3; ++a)
            g.scale[a] = spec.grid.voxel_size * init_rng.uniform(0.4, 0.9);
        Vector4d q;
        for (int a = 0; a < 4; ++a) q[a] = init_rng.normal();
        g.rotation = q / q.norm();
        g.opacity = init_rng.uniform(0.6, 1.0);
        g.semantics = VectorXd::Zero(d);
        for (int cidx = 0; cidx < d; ++cidx)
            g.semantics[cidx] = (cidx == cls ? spec.true_class_logit : 0.0) +
                                init_rng.normal(0.0, spec.logit_noise);
        g.feature = VectorXd(spec.feature_dim);
        for (int j = 0; j < spec.feature_dim; ++j)
            g.feature[j] = anchors(owner, j) + init_rng.normal(0.0, spec.feature_noise);
        scene.init.set(i, g);
    }
    return scene;
}

} // namespace gsocc
