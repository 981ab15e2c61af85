// gsocc: synthetic scene generation, graph-attention Gaussian refinement,
// Gaussian-to-voxel splatting, metrics and ablation runs.
//
// File formats are JSON with base64 little-endian payloads; see README.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gsocc/gsocc.hpp"

using namespace gsocc;
using Clock = std::chrono::steady_clock;

namespace {

SceneSpec load_scene_spec(const std::string& path) {
    if (path.empty()) return SceneSpec{};
    return scene_spec_from_json(read_json_file(path));
}

PipelineConfig load_pipeline_config(const std::string& path) {
    if (path.empty()) return PipelineConfig{};
    return pipeline_config_from_json(read_json_file(path));
}

void export_grid(const VoxelGrid& grid, const SemanticTaxonomy& tax, const std::string& csv_path,
                 const std::string& pgm_dir) {
    if (!csv_path.empty()) write_text_file(csv_path, grid_to_csv(grid, tax));
    if (!pgm_dir.empty()) {
        std::filesystem::create_directories(pgm_dir);
        for (int iz = 0; iz < grid.dims.z(); ++iz) {
            char name[64];
            std::snprintf(name, sizeof(name), "slice_z%03d.pgm", iz);
            write_text_file(pgm_dir + "/" + name, grid_slice_to_pgm(grid, tax, iz));
        }
    }
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::string token;
    for (char c : csv + ",") {
        if (c == ',') {
            if (!token.empty()) seeds.push_back(std::stoull(token));
            token.clear();
        } else {
            token.push_back(c);
        }
    }
    return seeds;
}

int run(int argc, char** argv) {
    CLI::App app{"graph-attention refinement of 3D Gaussian scenes with a semantic occupancy head"};
    app.require_subcommand(1);

    // ---- generate ----------------------------------------------------------
    auto* generate = app.add_subcommand("generate", "generate a synthetic scene and its GT grid");
    std::string gen_spec, gen_out, gen_out_gt;
    generate->add_option("--spec", gen_spec, "scene spec JSON (defaults when omitted)");
    generate->add_option("--out", gen_out, "output scene file")->required();
    generate->add_option("--out-gt", gen_out_gt, "output GT grid file");
    std::uint64_t gen_seed = 0;
    int gen_draw = 0;
    generate->add_option("--seed", gen_seed, "override spec seed");
    generate->add_option("--draw", gen_draw, "init draw index (same GT, fresh sampling)");

    // ---- refine ------------------------------------------------------------
    auto* refine = app.add_subcommand("refine", "run the refinement stack on a scene");
    std::string ref_scene, ref_config, ref_params, ref_out;
    refine->add_option("--scene", ref_scene)->required();
    refine->add_option("--config", ref_config, "pipeline config JSON");
    refine->add_option("--params", ref_params, "parameter file")->required();
    refine->add_option("--out", ref_out, "output refined scene file")->required();

    // ---- splat -------------------------------------------------------------
    auto* splat_cmd = app.add_subcommand("splat", "splat a scene into a semantic occupancy grid");
    std::string sp_scene, sp_config, sp_out, sp_csv, sp_pgm, sp_grid_like;
    splat_cmd->add_option("--scene", sp_scene)->required();
    splat_cmd->add_option("--config", sp_config, "pipeline config JSON (for the splat block)");
    splat_cmd->add_option("--grid-like", sp_grid_like, "grid file supplying origin/size/dims");
    splat_cmd->add_option("--out", sp_out, "output grid file")->required();
    splat_cmd->add_option("--export-csv", sp_csv, "also export the grid as CSV");
    splat_cmd->add_option("--export-pgm", sp_pgm, "also export per-slice PGM heatmaps into DIR");

    // ---- eval --------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "IoU/mIoU report for prediction vs GT");
    std::string ev_pred, ev_gt, ev_json;
    eval_cmd->add_option("--pred", ev_pred)->required();
    eval_cmd->add_option("--gt", ev_gt)->required();
    eval_cmd->add_option("--json", ev_json, "write the report JSON here");

    // ---- train -------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "optimize pipeline parameters on a scene");
    std::string tr_scene, tr_gt, tr_config, tr_out;
    int tr_steps = 200;
    train_cmd->add_option("--scene", tr_scene)->required();
    train_cmd->add_option("--gt", tr_gt, "GT grid file")->required();
    train_cmd->add_option("--config", tr_config, "pipeline config JSON");
    train_cmd->add_option("--steps", tr_steps, "optimizer steps (0 emits the initialization)");
    train_cmd->add_option("--out-params", tr_out, "output parameter file")->required();

    // ---- ablate ------------------------------------------------------------
    auto* ablate_cmd = app.add_subcommand("ablate", "train and score a suite of variants");
    std::string ab_suite, ab_seeds = "1,2,3,4,5", ab_json, ab_spec, ab_config;
    int ab_steps = 200;
    ablate_cmd->add_option("--suite", ab_suite, "dgga | fusion | topkm | dsdga")->required();
    ablate_cmd->add_option("--seeds", ab_seeds, "comma-separated seed list");
    ablate_cmd->add_option("--steps", ab_steps);
    ablate_cmd->add_option("--spec", ab_spec, "scene spec JSON");
    ablate_cmd->add_option("--config", ab_config, "base pipeline config JSON");
    ablate_cmd->add_option("--json", ab_json, "write the table JSON here");

    // ---- bench -------------------------------------------------------------
    auto* bench_cmd = app.add_subcommand(
        "bench", "CPU wall times of the pipeline stages (not comparable to GPU batch latencies)");
    int bench_n = 512;
    bench_cmd->add_option("--gaussians", bench_n);

    CLI11_PARSE(app, argc, argv);

    if (generate->parsed()) {
        SceneSpec spec = load_scene_spec(gen_spec);
        if (generate->count("--seed")) spec.seed = gen_seed;
        if (generate->count("--draw")) spec.init_draw = gen_draw;
        const Scene scene = gen_scene(spec);
        write_json_file(gen_out, scene_to_json(scene.init, scene.taxonomy));
        if (!gen_out_gt.empty())
            write_json_file(gen_out_gt, grid_to_json(scene.gt, scene.taxonomy));
        std::printf("scene: %d Gaussians, %lld voxels, seed %llu draw %d -> %s\n",
                    scene.init.size(), static_cast<long long>(scene.gt.num_voxels()),
                    static_cast<unsigned long long>(spec.seed), spec.init_draw, gen_out.c_str());
        return 0;
    }

    if (refine->parsed()) {
        auto [set, tax] = scene_from_json(read_json_file(ref_scene));
        const PipelineConfig cfg = load_pipeline_config(ref_config);
        const PipelineParams params = params_from_json(read_json_file(ref_params));
        // the grid spec only matters for splatting; refinement needs none
        GridSpec grid;
        RecordedPipeline rec = record_pipeline(set, cfg, params, tax, grid, nullptr);
        const GaussianSet refined(rec.tape.value(rec.final_props), set.num_classes(),
                                  set.feature_dim());
        write_json_file(ref_out, scene_to_json(refined, tax));
        std::printf("refined %d Gaussians -> %s\n", refined.size(), ref_out.c_str());
        return 0;
    }

    if (splat_cmd->parsed()) {
        auto [set, tax] = scene_from_json(read_json_file(sp_scene));
        const PipelineConfig cfg = load_pipeline_config(sp_config);
        GridSpec grid; // default desk-scale grid
        grid.origin = Vector3d(-8, -8, 0);
        grid.voxel_size = 0.5;
        grid.dims = Eigen::Vector3i(32, 32, 32);
        if (!sp_grid_like.empty()) grid = spec_of(grid_from_json(read_json_file(sp_grid_like)).first);
        const SplatResult res = splat(set, grid, cfg.splat, tax);
        write_json_file(sp_out, grid_to_json(res.grid, tax));
        export_grid(res.grid, tax, sp_csv, sp_pgm);
        std::printf("splatted %d Gaussians (%d skipped) -> %s\n", set.size(), res.skipped,
                    sp_out.c_str());
        return 0;
    }

    if (eval_cmd->parsed()) {
        const auto t0 = Clock::now();
        auto [pred, tax] = grid_from_json(read_json_file(ev_pred));
        auto [gt, tax2] = grid_from_json(read_json_file(ev_gt));
        const EvalReport rep = eval_report(pred, gt, tax,
                                           std::chrono::duration<double>(Clock::now() - t0).count());
        std::printf("%s", report_to_text(rep).c_str());
        if (!ev_json.empty()) write_json_file(ev_json, report_to_json(rep));
        return 0;
    }

    if (train_cmd->parsed()) {
        auto [set, tax] = scene_from_json(read_json_file(tr_scene));
        auto [gt, tax2] = grid_from_json(read_json_file(tr_gt));
        const PipelineConfig cfg = load_pipeline_config(tr_config);
        TrainConfig tc;
        tc.steps = tr_steps;
        const TrainOutcome out = train_pipeline(TrainData{{set}, gt, tax}, cfg, tc);
        write_json_file(tr_out, params_to_json(out.params));
        if (out.loss_history.empty()) {
            std::printf("emitted initialization (%lld parameters) -> %s\n",
                        static_cast<long long>(out.params.parameter_count()), tr_out.c_str());
        } else {
            std::printf("trained %d steps, loss %.5f -> %.5f (%lld parameters) -> %s\n",
                        tr_steps, out.loss_history.front(), out.loss_history.back(),
                        static_cast<long long>(out.params.parameter_count()), tr_out.c_str());
        }
        return 0;
    }

    if (ablate_cmd->parsed()) {
        const SceneSpec spec = load_scene_spec(ab_spec);
        const PipelineConfig cfg = load_pipeline_config(ab_config);
        TrainConfig tc;
        tc.steps = ab_steps;
        const AblationTable table = ablation_run(ab_suite, parse_seeds(ab_seeds), spec, cfg, tc);
        std::printf("%s", ablation_to_text(table).c_str());
        if (!ab_json.empty()) write_json_file(ab_json, ablation_to_json(table));
        return 0;
    }

    if (bench_cmd->parsed()) {
        SceneSpec spec;
        spec.num_gaussians = bench_n;
        const Scene scene = gen_scene(spec);
        PipelineConfig cfg;
        const PipelineParams params =
            init_params(cfg, scene.init.dim(), scene.init.feature_dim());
        auto time_ms = [](auto&& fn) {
            const auto t0 = Clock::now();
            fn();
            return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        };
        const MatrixXd tokens = tokenize(scene.init);
        const double t_knn = time_ms([&] { knn_geometric(scene.init.means(), cfg.k); });
        const double t_sem = time_ms([&] { cosine_topM(scene.init.features(), cfg.m); });
        const NeighborIndex idx = knn_geometric(scene.init.means(), cfg.k);
        const LayerParams lp = params.layer(params.geo_blocks[0]);
        const double t_att = time_ms([&] { neighbor_attention(tokens, idx, lp); });
        const double t_splat =
            time_ms([&] { splat_accumulate(scene.init, spec_of(scene.gt), cfg.splat); });
        const double t_pipe = time_ms([&] {
            run_pipeline(scene.init, cfg, params, scene.taxonomy, spec_of(scene.gt));
        });
        std::printf("single-core CPU wall times at N=%d (not comparable to GPU batch latency):\n",
                    bench_n);
        std::printf("  knn graph          %8.2f ms\n", t_knn);
        std::printf("  similarity graph   %8.2f ms\n", t_sem);
        std::printf("  neighbor attention %8.2f ms\n", t_att);
        std::printf("  splat accumulate   %8.2f ms\n", t_splat);
        std::printf("  full pipeline      %8.2f ms\n", t_pipe);
        std::printf("  peak rss           %8.1f MB\n",
                    static_cast<double>(peak_rss_bytes()) / (1024.0 * 1024.0));
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        nlohmann::json err{{"error", {{"type", e.kind()}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        nlohmann::json err{{"error", {{"type", "internal"}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
