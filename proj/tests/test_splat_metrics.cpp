#include <gtest/gtest.h>

#include <cmath>

#include "gsocc/rng.hpp"
#include "gsocc/splat.hpp"
#include "support/oracles.hpp"

using namespace gsocc;

namespace {

SemanticTaxonomy tax3() { return SemanticTaxonomy::make({"car"}, {"road"}); } // 3 classes

/// One Gaussian with dominant class 0, centered at `mean`.
GaussianSet single_gaussian(const Vector3d& mean, double scale, double opacity = 1.0,
                            double dominant_logit = 12.0) {
    GaussianSet set(1, 3, 2);
    Gaussian g = set.get(0);
    g.mean = mean;
    g.scale = Vector3d::Constant(scale);
    g.opacity = opacity;
    g.semantics = VectorXd::Zero(3);
    g.semantics[0] = dominant_logit;
    set.set(0, g);
    return set;
}

TEST(Splat, CenteredIsotropicGaussianHitsExpOfZero) {
    // voxel center exactly at the mean: acc = opacity * p(c) * exp(0)
    const GridSpec spec{Vector3d(-0.5, -0.5, -0.5), 1.0, Eigen::Vector3i(1, 1, 1)};
    const GaussianSet set = single_gaussian(Vector3d::Zero(), 1.0);
    const SplatAccumulation acc = splat_accumulate(set, spec, SplatConfig{});
    const VectorXd p = detail::stable_softmax(set.get(0).semantics);
    EXPECT_NEAR(acc.acc(0, 0), p[0], 1e-12);
    EXPECT_GT(p[0], 0.99);
    const SplatResult res = splat(set, spec, SplatConfig{}, tax3());
    EXPECT_EQ(res.grid.classes[0], 0);
}

TEST(Splat, MahalanobisTwoGivesExpMinusOne) {
    // voxel center at distance sqrt(2) from an isotropic unit Gaussian
    const double r = std::sqrt(2.0);
    const GridSpec spec{Vector3d(r - 0.5, -0.5, -0.5), 1.0, Eigen::Vector3i(1, 1, 1)};
    const GaussianSet set = single_gaussian(Vector3d::Zero(), 1.0);
    const SplatAccumulation acc = splat_accumulate(set, spec, SplatConfig{});
    const VectorXd p = detail::stable_softmax(set.get(0).semantics);
    EXPECT_NEAR(acc.acc(0, 0), std::exp(-1.0) * p[0], 1e-9);
    EXPECT_NEAR(acc.acc(0, 0) / p[0], 0.36787944117144233, 1e-9);
}

TEST(Splat, BeyondCutoffContributesExactlyZero) {
    // voxel center at 4 sigma with a 3 sigma cutoff
    const GridSpec spec{Vector3d(4.0 - 0.5, -0.5, -0.5), 1.0, Eigen::Vector3i(1, 1, 1)};
    const GaussianSet set = single_gaussian(Vector3d::Zero(), 1.0);
    const SplatAccumulation acc = splat_accumulate(set, spec, SplatConfig{});
    EXPECT_EQ(acc.acc.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Splat, TiledMatchesAllPairsOracle) {
    Rng rng(3);
    const GridSpec spec{Vector3d(-4, -4, -4), 0.5, Eigen::Vector3i(16, 16, 16)};
    SplatConfig cfg;
    for (int trial = 0; trial < 3; ++trial) {
        const GaussianSet set = oracle::random_set(rng, 60, 4, 2, 3.0);
        const SplatAccumulation acc = splat_accumulate(set, spec, cfg);
        const MatrixXd expected = oracle::splat_all_pairs(set, spec, cfg);
        EXPECT_LT((acc.acc - expected).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_GE(acc.acc.minCoeff(), 0.0); // densities never go negative
    }
}

TEST(Splat, DegenerateCovarianceSkippedWithCount) {
    GaussianSet set(2, 3, 2);
    Gaussian g = set.get(0);
    g.scale = Vector3d(1.0, 1.0, 1e-7); // condition (1e7)^2 > 1e12
    g.semantics = VectorXd::Zero(3);
    set.set(0, g);
    const GridSpec spec{Vector3d(-2, -2, -2), 1.0, Eigen::Vector3i(4, 4, 4)};
    const SplatAccumulation acc = splat_accumulate(set, spec, SplatConfig{});
    EXPECT_EQ(acc.skipped, 1);
}

TEST(Splat, OpacityScalingScalesAccExactlyAndKeepsArgmax) {
    Rng rng(5);
    GaussianSet set = oracle::random_set(rng, 30, 4, 2, 3.0);
    const GridSpec spec{Vector3d(-4, -4, -4), 0.5, Eigen::Vector3i(16, 16, 16)};
    SplatConfig cfg;
    const SemanticTaxonomy tax = SemanticTaxonomy::make({"a", "b"}, {"c"});
    const SplatAccumulation base = splat_accumulate(set, spec, cfg);
    const SplatResult base_grid = splat(set, spec, cfg, tax);

    const double alpha = 0.5; // keeps opacity within [0,1]
    GaussianSet scaled = set;
    for (int i = 0; i < set.size(); ++i)
        scaled.props()(i, GaussianSet::opacity_offset()) *= alpha;
    const SplatAccumulation after = splat_accumulate(scaled, spec, cfg);
    EXPECT_LT((after.acc - alpha * base.acc).cwiseAbs().maxCoeff(), 1e-15);

    // argmax class is invariant wherever both clear the threshold
    const SplatResult scaled_grid = splat(scaled, spec, cfg, tax);
    for (std::int64_t v = 0; v < spec.num_voxels(); ++v) {
        if (base_grid.grid.classes[static_cast<size_t>(v)] == tax.empty_class) continue;
        if (scaled_grid.grid.classes[static_cast<size_t>(v)] == tax.empty_class) continue;
        EXPECT_EQ(base_grid.grid.classes[static_cast<size_t>(v)],
                  scaled_grid.grid.classes[static_cast<size_t>(v)]);
    }
}

TEST(Splat, TranslationEquivariant) {
    Rng rng(7);
    const GaussianSet set = oracle::random_set(rng, 40, 3, 2, 3.0);
    const Vector3d shift(11.25, -4.5, 3.0);
    GaussianSet moved = set;
    for (int i = 0; i < set.size(); ++i)
        moved.props().row(i).segment<3>(GaussianSet::mean_offset()) += shift.transpose();
    const GridSpec spec{Vector3d(-4, -4, -4), 0.5, Eigen::Vector3i(16, 16, 16)};
    GridSpec moved_spec = spec;
    moved_spec.origin += shift;
    const SemanticTaxonomy tax = tax3();
    const SplatResult a = splat(set, spec, SplatConfig{}, tax);
    const SplatResult b = splat(moved, moved_spec, SplatConfig{}, tax);
    EXPECT_EQ(a.grid.classes, b.grid.classes);
}

TEST(Confusion, PerfectPredictionHasNoErrors) {
    const SemanticTaxonomy tax = tax3();
    VoxelGrid g(Vector3d::Zero(), 1.0, Eigen::Vector3i(3, 3, 1), tax.empty_class);
    g.classes = {0, 1, 2, 0, 1, 2, 0, 1, 2};
    const ConfusionCounts c = confusion(g, g, tax);
    for (int cls = 0; cls < 3; ++cls) {
        EXPECT_EQ(c.fp[static_cast<size_t>(cls)], 0);
        EXPECT_EQ(c.fn[static_cast<size_t>(cls)], 0);
    }
    EXPECT_EQ(c.tp[0], 3);
}

TEST(Confusion, AllEmptyPredictionCountsFalseNegatives) {
    const SemanticTaxonomy tax = tax3();
    VoxelGrid gt(Vector3d::Zero(), 1.0, Eigen::Vector3i(4, 1, 1), 1);
    VoxelGrid pred(Vector3d::Zero(), 1.0, Eigen::Vector3i(4, 1, 1), tax.empty_class);
    const ConfusionCounts c = confusion(pred, gt, tax);
    EXPECT_EQ(c.fn[1], 4);
    EXPECT_EQ(c.tp[1], 0);
    EXPECT_EQ(c.occupied_fn, 4);
}

TEST(Confusion, HandEnumeratedExample) {
    // gt [c1, c1, c2, empty], pred [c1, c2, c2, empty]
    const SemanticTaxonomy tax = SemanticTaxonomy::make({"c1", "c2"}, {"s"});
    VoxelGrid gt(Vector3d::Zero(), 1.0, Eigen::Vector3i(4, 1, 1), tax.empty_class);
    VoxelGrid pred = gt;
    gt.classes = {0, 0, 1, tax.empty_class};
    pred.classes = {0, 1, 1, tax.empty_class};
    const ConfusionCounts c = confusion(pred, gt, tax);
    EXPECT_EQ(c.tp[0], 1);
    EXPECT_EQ(c.fp[0], 0);
    EXPECT_EQ(c.fn[0], 1);
    EXPECT_EQ(c.tp[1], 1);
    EXPECT_EQ(c.fp[1], 1);
    EXPECT_EQ(c.fn[1], 0);

    const IoUMetrics m = iou_miou(c, tax);
    EXPECT_NEAR(m.per_class[0], 0.5, 1e-12);
    EXPECT_NEAR(m.per_class[1], 0.5, 1e-12);
    EXPECT_NEAR(m.miou, 0.5, 1e-12);
    EXPECT_NEAR(m.iou, 1.0, 1e-12); // all three occupied voxels predicted occupied
}

TEST(Confusion, MismatchedSpecsThrow) {
    const SemanticTaxonomy tax = tax3();
    VoxelGrid a(Vector3d::Zero(), 1.0, Eigen::Vector3i(2, 2, 2), tax.empty_class);
    VoxelGrid b(Vector3d::Zero(), 0.5, Eigen::Vector3i(2, 2, 2), tax.empty_class);
    EXPECT_THROW(confusion(a, b, tax), InvalidInputError);
}

TEST(Confusion, CountsConsistentWithGtTotals) {
    Rng rng(11);
    const SemanticTaxonomy tax = SemanticTaxonomy::make({"a", "b"}, {"c", "d"});
    const int d = tax.num_classes();
    VoxelGrid gt(Vector3d::Zero(), 1.0, Eigen::Vector3i(6, 6, 6), tax.empty_class);
    VoxelGrid pred = gt;
    std::vector<std::int64_t> gt_count(static_cast<size_t>(d), 0);
    for (auto& c : gt.classes) {
        c = static_cast<int32_t>(rng.uniform_int(0, d - 1));
        ++gt_count[static_cast<size_t>(c)];
    }
    for (auto& c : pred.classes) c = static_cast<int32_t>(rng.uniform_int(0, d - 1));
    const ConfusionCounts counts = confusion(pred, gt, tax);
    std::int64_t covered = 0;
    for (int c = 0; c < d; ++c) {
        EXPECT_EQ(counts.tp[static_cast<size_t>(c)] + counts.fn[static_cast<size_t>(c)],
                  gt_count[static_cast<size_t>(c)]);
        if (c != tax.empty_class)
            covered += counts.tp[static_cast<size_t>(c)] + counts.fn[static_cast<size_t>(c)];
    }
    EXPECT_EQ(covered + gt_count[static_cast<size_t>(tax.empty_class)], gt.num_voxels());
}

TEST(IouMiou, PerfectAndDisjointEdgeCases) {
    const SemanticTaxonomy tax = tax3();
    ConfusionCounts perfect;
    perfect.tp = {5, 7, 100};
    perfect.fp = {0, 0, 0};
    perfect.fn = {0, 0, 0};
    perfect.occupied_tp = 12;
    const IoUMetrics p = iou_miou(perfect, tax);
    EXPECT_DOUBLE_EQ(p.miou, 1.0);
    EXPECT_DOUBLE_EQ(p.iou, 1.0);

    ConfusionCounts disjoint;
    disjoint.tp = {0, 0, 0};
    disjoint.fp = {3, 4, 0};
    disjoint.fn = {4, 3, 0};
    disjoint.occupied_tp = 7; // wrong classes but occupied space overlaps
    disjoint.occupied_fp = 0;
    disjoint.occupied_fn = 0;
    const IoUMetrics q = iou_miou(disjoint, tax);
    EXPECT_DOUBLE_EQ(q.per_class[0], 0.0);
    EXPECT_DOUBLE_EQ(q.per_class[1], 0.0);
    EXPECT_DOUBLE_EQ(q.miou, 0.0);
}

TEST(IouMiou, ZeroDenominatorClassesExcludedFromMean) {
    const SemanticTaxonomy tax = SemanticTaxonomy::make({"a", "b"}, {"c"});
    ConfusionCounts counts;
    counts.tp = {3, 0, 0, 0};
    counts.fp = {1, 0, 0, 0};
    counts.fn = {0, 0, 0, 0}; // classes b and c never appear
    const IoUMetrics m = iou_miou(counts, tax);
    EXPECT_TRUE(std::isnan(m.per_class[1]));
    EXPECT_NEAR(m.miou, 0.75, 1e-12); // only class a participates
    EXPECT_GE(m.miou, 0.0);
    EXPECT_LE(m.miou, 1.0);
}

TEST(SubsetMiou, SplitsByDynamicFlag) {
    const SemanticTaxonomy tax = SemanticTaxonomy::make({"a", "b"}, {"c"});
    IoUMetrics m;
    m.per_class = {0.2, 0.4, 0.9, std::numeric_limits<double>::quiet_NaN()};
    EXPECT_NEAR(subset_miou(m, tax, true), 0.3, 1e-12);
    EXPECT_NEAR(subset_miou(m, tax, false), 0.9, 1e-12);
}

} // namespace
