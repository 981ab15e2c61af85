#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "gsocc/errors.hpp"
#include "gsocc/pipeline.hpp"
#include "gsocc/report.hpp"
#include "gsocc/scene.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Ablation suites
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    PipelineConfig cfg;
};

struct AblationRow {
    std::string variant;
    double miou = 0.0; // means across seeds
    double iou = 0.0;
    double miou_dynamic = 0.0;
    double miou_static = 0.0;
    double final_loss = 0.0;
    std::vector<double> per_seed_miou;
};

struct AblationTable {
    std::string suite;
    std::vector<std::uint64_t> seeds;
    int steps = 0;
    std::vector<AblationRow> rows;
    double wall_time_s = 0.0;
};

/// Variant lists mirroring the refinement, fusion, neighbor-budget and
/// decoupling comparisons.
inline std::vector<AblationVariant> ablation_variants(const std::string& suite,
                                                      const PipelineConfig& base) {
    std::vector<AblationVariant> v;
    auto with = [&](const std::string& name, auto&& mutate) {
        PipelineConfig c = base;
        mutate(c);
        v.push_back({name, c});
    };
    if (suite == "dgga") {
        with("baseline", [](PipelineConfig& c) { c.refine = RefineKind::none; c.dsdga_on = false; });
        with("mlp", [](PipelineConfig& c) { c.refine = RefineKind::mlp; c.dsdga_on = false; });
        with("gga", [](PipelineConfig& c) { c.refine = RefineKind::gga_only; c.dsdga_on = false; });
        with("sga", [](PipelineConfig& c) { c.refine = RefineKind::sga_only; c.dsdga_on = false; });
        with("dgga", [](PipelineConfig& c) { c.refine = RefineKind::dgga; c.dsdga_on = false; });
    } else if (suite == "fusion") {
        with("add", [](PipelineConfig& c) {
            c.refine = RefineKind::dgga;
            c.fuse = FuseMode::average;
            c.dsdga_on = false;
        });
        with("concat", [](PipelineConfig& c) {
            c.refine = RefineKind::dgga;
            c.fuse = FuseMode::concat_project;
            c.dsdga_on = false;
        });
        with("adaptive", [](PipelineConfig& c) {
            c.refine = RefineKind::dgga;
            c.fuse = FuseMode::adaptive;
            c.dsdga_on = false;
        });
    } else if (suite == "topkm") {
        auto schedule_variant = [&](const std::string& name, std::vector<int> schedule) {
            with(name, [schedule](PipelineConfig& c) {
                c.refine = RefineKind::mga;
                c.num_layers = 1;
                c.topk_schedule = schedule;
                c.topm_schedule = schedule;
                c.dsdga_on = false;
            });
        };
        schedule_variant("A", {100, 100, 100, 100});
        schedule_variant("B", {200, 150, 100, 50});
        schedule_variant("C", {50, 25, 10, 5});
        schedule_variant("D", {100, 75, 50, 20});
    } else if (suite == "dsdga") {
        with("baseline", [](PipelineConfig& c) { c.refine = RefineKind::none; c.dsdga_on = false; });
        with("dca", [](PipelineConfig& c) {
            c.refine = RefineKind::none;
            c.dsdga_on = true;
            c.dca_on = true;
            c.sca_on = false;
        });
        with("sca", [](PipelineConfig& c) {
            c.refine = RefineKind::none;
            c.dsdga_on = true;
            c.dca_on = false;
            c.sca_on = true;
        });
        with("dsdga", [](PipelineConfig& c) {
            c.refine = RefineKind::none;
            c.dsdga_on = true;
            c.dca_on = true;
            c.sca_on = true;
        });
    } else {
        throw InvalidParameterError("unknown ablation suite: " + suite);
    }
    return v;
}

/// Trains every variant on the same per-seed scenes with the same optimizer
/// settings and reports mean metrics per variant. Training cycles over a few
/// init draws of each seed's scene; evaluation refines a held-out
/// re-sampling of the same GT, so a variant scores by what its refinement
/// transfers, not by memorizing one noise realization.
inline AblationTable ablation_run_variants(const std::string& name,
                                           const std::vector<AblationVariant>& variants,
                                           const std::vector<std::uint64_t>& seeds,
                                           const SceneSpec& base_spec,
                                           const TrainConfig& train_cfg) {
    if (seeds.empty()) throw InvalidParameterError("ablation needs at least one seed");
    const auto t0 = std::chrono::steady_clock::now();
    AblationTable table;
    table.suite = name;
    table.seeds = seeds;
    table.steps = train_cfg.steps;

    for (const auto& variant : variants) {
        AblationRow row;
        row.variant = variant.name;
        for (const std::uint64_t seed : seeds) {
            constexpr int kTrainDraws = 4;
            constexpr int kEvalDraw = 1000;
            SceneSpec spec = base_spec;
            spec.seed = seed;
            TrainData data;
            for (int draw = 0; draw < kTrainDraws; ++draw) {
                spec.init_draw = draw;
                Scene s = gen_scene(spec);
                if (draw == 0) {
                    data.gt = s.gt;
                    data.taxonomy = s.taxonomy;
                }
                data.inits.push_back(std::move(s.init));
            }
            spec.init_draw = kEvalDraw;
            const Scene eval_scene = gen_scene(spec);
            PipelineConfig cfg = variant.cfg;
            cfg.param_seed = seed;
            const TrainOutcome trained = train_pipeline(data, cfg, train_cfg);
            const PipelineResult result = run_pipeline(eval_scene.init, cfg, trained.params,
                                                       data.taxonomy, spec_of(data.gt));
            const EvalReport rep = eval_report(result.pred, eval_scene.gt, data.taxonomy);
            row.miou += rep.miou;
            row.iou += rep.iou;
            row.miou_dynamic += rep.miou_dynamic;
            row.miou_static += rep.miou_static;
            row.final_loss += trained.loss_history.empty() ? 0.0 : trained.loss_history.back();
            row.per_seed_miou.push_back(rep.miou);
        }
        const double inv = 1.0 / static_cast<double>(seeds.size());
        row.miou *= inv;
        row.iou *= inv;
        row.miou_dynamic *= inv;
        row.miou_static *= inv;
        row.final_loss *= inv;
        table.rows.push_back(std::move(row));
    }
    table.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return table;
}

inline AblationTable ablation_run(const std::string& suite, const std::vector<std::uint64_t>& seeds,
                                  const SceneSpec& base_spec, const PipelineConfig& base_cfg,
                                  const TrainConfig& train_cfg) {
    return ablation_run_variants(suite, ablation_variants(suite, base_cfg), seeds, base_spec,
                                 train_cfg);
}

} // namespace gsocc
