#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "gsocc/autodiff.hpp"
#include "gsocc/core.hpp"
#include "gsocc/dsdga.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/fusion.hpp"
#include "gsocc/optim.hpp"
#include "gsocc/rng.hpp"
#include "gsocc/scene.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

enum class RefineKind { none, mlp, gga_only, sga_only, dgga, mga };

inline const char* refine_kind_name(RefineKind k) {
    switch (k) {
        case RefineKind::none: return "none";
        case RefineKind::mlp: return "mlp";
        case RefineKind::gga_only: return "gga";
        case RefineKind::sga_only: return "sga";
        case RefineKind::dgga: return "dgga";
        case RefineKind::mga: return "mga";
    }
    return "?";
}

struct PipelineConfig {
    RefineKind refine = RefineKind::dgga;
    int num_layers = 4;
    int k = 10;
    int m = 10;
    std::vector<int> topk_schedule = {100, 75, 50, 20}; // mga scales
    std::vector<int> topm_schedule = {100, 75, 50, 20};
    GraphConfig graph;
    FuseMode fuse = FuseMode::adaptive;
    bool dsdga_on = false;
    bool dca_on = true;
    bool sca_on = true;
    int d_k = 32;
    int mlp_hidden_factor = 4; // MLP width = factor * d_k (parameter parity)
    SplatConfig splat;
    double loss_sharpness = 30.0; // logit temperature of the training loss
    double loss_balance = 0.35;   // class-weight exponent of the training loss
    std::uint64_t param_seed = 0;

    void validate(int n) const {
        if (num_layers < 0) throw InvalidParameterError("num_layers must be >= 0");
        if (d_k < 1) throw InvalidParameterError("d_k must be >= 1");
        const bool needs_km = refine == RefineKind::gga_only || refine == RefineKind::sga_only ||
                              refine == RefineKind::dgga;
        if (needs_km && (k > n || m > n || k < 1 || m < 1))
            throw InvalidParameterError("K and M must satisfy 1 <= K,M <= N");
        if (refine == RefineKind::mga) {
            if (topk_schedule.empty() || topk_schedule.size() != topm_schedule.size())
                throw InvalidParameterError("mga schedules must be non-empty and equal length");
            for (size_t s = 0; s < topk_schedule.size(); ++s)
                if (topk_schedule[s] < 1 || topk_schedule[s] > n || topm_schedule[s] < 1 ||
                    topm_schedule[s] > n)
                    throw InvalidParameterError("mga schedule entry out of range");
            if (fuse == FuseMode::concat_project)
                throw InvalidParameterError("concat fusion is only supported for dgga stacks");
        }
    }
};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

struct AttnBlockIds {
    int wq = -1, wk = -1, wv = -1, decode = -1, bias = -1;
};

struct MlpBlockIds {
    int w1 = -1, b1 = -1, decode = -1, bias = -1;
};

/// Flat list of named tensors plus the structural indices the pipeline needs.
/// Biases are stored as single-column matrices.
struct PipelineParams {
    std::vector<std::string> names;
    std::vector<MatrixXd> tensors;

    std::vector<AttnBlockIds> geo_blocks; // per layer, or per (layer, scale) for mga
    std::vector<AttnBlockIds> sem_blocks;
    std::vector<int> branch_concat;       // per layer; -1 unless concat fusion
    AttnBlockIds dca, sca;
    std::vector<MlpBlockIds> mlp_blocks;
    bool has_dsdga = false;

    int add(std::string name, MatrixXd t) {
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
        return static_cast<int>(tensors.size()) - 1;
    }

    LayerParams layer(const AttnBlockIds& ids) const {
        LayerParams p;
        p.w_q = tensors[static_cast<size_t>(ids.wq)];
        p.w_k = tensors[static_cast<size_t>(ids.wk)];
        p.w_v = tensors[static_cast<size_t>(ids.wv)];
        p.decode = tensors[static_cast<size_t>(ids.decode)];
        p.decode_bias = tensors[static_cast<size_t>(ids.bias)].col(0);
        return p;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }

    void zero_decode_heads() {
        for (size_t i = 0; i < tensors.size(); ++i)
            if (names[i].find("decode") != std::string::npos ||
                names[i].find("bias") != std::string::npos)
                tensors[i].setZero();
    }
};

namespace detail {

// Initialization: query/key projections are small random (near-uniform
// attention at the start), the value/decode pair routes the token feature
// block through the attention so each layer starts as "geometry unchanged,
// feature = neighborhood-averaged feature". Training grows the rest.
inline constexpr double kInitWq = 0.05;
inline constexpr double kInitWk = 0.05;
inline constexpr double kInitWv = 0.02;
inline constexpr double kInitDecode = 0.0;

inline MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sigma) {
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, sigma);
    return m;
}

inline AttnBlockIds add_attention_block(PipelineParams& p, Rng& rng, const std::string& prefix,
                                        int token_dim, int dk, int feature_offset,
                                        int feature_dim) {
    AttnBlockIds ids;
    ids.wq = p.add(prefix + ".wq", random_matrix(rng, token_dim, dk, kInitWq));
    ids.wk = p.add(prefix + ".wk", random_matrix(rng, token_dim, dk, kInitWk));
    MatrixXd wv = random_matrix(rng, token_dim, dk, kInitWv);
    MatrixXd decode = MatrixXd::Zero(dk, token_dim);
    for (int r = 0; r < std::min(feature_dim, dk); ++r) {
        wv(feature_offset + r, r) += 1.0;
        decode(r, feature_offset + r) = 1.0;
    }
    ids.wv = p.add(prefix + ".wv", std::move(wv));
    ids.decode = p.add(prefix + ".decode", std::move(decode));
    ids.bias = p.add(prefix + ".bias", MatrixXd::Zero(token_dim, 1));
    return ids;
}

inline MatrixXd averaging_concat_proj(Rng& rng, int token_dim, int branches) {
    MatrixXd proj = MatrixXd::Zero(static_cast<Eigen::Index>(branches) * token_dim, token_dim);
    for (int b = 0; b < branches; ++b)
        proj.middleRows(static_cast<Eigen::Index>(b) * token_dim, token_dim) =
            MatrixXd::Identity(token_dim, token_dim) / static_cast<double>(branches);
    proj += random_matrix(rng, proj.rows(), proj.cols(), 0.005);
    return proj;
}

} // namespace detail

/// Fresh parameters for a pipeline config, drawn from cfg.param_seed.
/// `token_dim` is the Gaussian property width; the feature block sits at the
/// tail of the token.
inline PipelineParams init_params(const PipelineConfig& cfg, int token_dim, int feature_dim) {
    Rng rng(cfg.param_seed);
    PipelineParams p;
    const int dk = cfg.d_k;
    const int fo = token_dim - feature_dim;

    auto attn = [&](const std::string& prefix) {
        return detail::add_attention_block(p, rng, prefix, token_dim, dk, fo, feature_dim);
    };

    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string lp = "layer" + std::to_string(l);
        switch (cfg.refine) {
            case RefineKind::none:
                break;
            case RefineKind::mlp: {
                MlpBlockIds ids;
                const int h = cfg.mlp_hidden_factor * dk;
                // tanh(0.5 x) ~ 0.46 x near 0; the 2.17 decode restores scale,
                // so the layer starts as a per-Gaussian feature pass-through.
                MatrixXd w1 = detail::random_matrix(rng, token_dim, h, detail::kInitWv);
                MatrixXd decode = MatrixXd::Zero(h, token_dim);
                for (int r = 0; r < std::min(feature_dim, h); ++r) {
                    w1(fo + r, r) += 0.5;
                    decode(r, fo + r) = 2.17;
                }
                ids.w1 = p.add(lp + ".w1", std::move(w1));
                ids.b1 = p.add(lp + ".b1", MatrixXd::Zero(h, 1));
                ids.decode = p.add(lp + ".decode", std::move(decode));
                ids.bias = p.add(lp + ".bias", MatrixXd::Zero(token_dim, 1));
                p.mlp_blocks.push_back(ids);
                break;
            }
            case RefineKind::gga_only:
                p.geo_blocks.push_back(attn(lp + ".geo"));
                break;
            case RefineKind::sga_only:
                p.sem_blocks.push_back(attn(lp + ".sem"));
                break;
            case RefineKind::dgga: {
                p.geo_blocks.push_back(attn(lp + ".geo"));
                p.sem_blocks.push_back(attn(lp + ".sem"));
                p.branch_concat.push_back(
                    cfg.fuse == FuseMode::concat_project
                        ? p.add(lp + ".concat", detail::averaging_concat_proj(rng, token_dim, 2))
                        : -1);
                break;
            }
            case RefineKind::mga: {
                for (size_t s = 0; s < cfg.topk_schedule.size(); ++s) {
                    const std::string sp = lp + ".scale" + std::to_string(s);
                    p.geo_blocks.push_back(attn(sp + ".geo"));
                    p.sem_blocks.push_back(attn(sp + ".sem"));
                }
                break;
            }
        }
    }
    if (cfg.dsdga_on) {
        p.has_dsdga = true;
        if (cfg.dca_on) p.dca = attn("dsdga.dca");
        if (cfg.sca_on) p.sca = attn("dsdga.sca");
    }
    return p;
}

// ---------------------------------------------------------------------------
// Recorded differentiable pipeline
// ---------------------------------------------------------------------------

struct RecordedPipeline {
    GradientTape tape;
    std::vector<GradientTape::Slot> param_slots; // aligned with PipelineParams.tensors
    GradientTape::Slot init_props = -1;
    GradientTape::Slot final_props = -1;
    GradientTape::Slot acc = -1;
    GradientTape::Slot loss = -1;
};

namespace detail {

struct AttnSlots {
    GradientTape::Slot wq, wk, wv, decode, bias;
};

inline AttnSlots slots_of(const RecordedPipeline& rec, const AttnBlockIds& ids) {
    return {rec.param_slots[static_cast<size_t>(ids.wq)],
            rec.param_slots[static_cast<size_t>(ids.wk)],
            rec.param_slots[static_cast<size_t>(ids.wv)],
            rec.param_slots[static_cast<size_t>(ids.decode)],
            rec.param_slots[static_cast<size_t>(ids.bias)]};
}

/// One attention branch: graph from current values (constant), attention,
/// refine. Returns the refined property slot.
inline GradientTape::Slot record_branch(RecordedPipeline& rec, GradientTape::Slot cur,
                                        const NeighborIndex& idx, const AttnSlots& s, int d,
                                        int f) {
    GradientTape& t = rec.tape;
    const GradientTape::Slot hidden =
        tape_ops::neighbor_attention(t, cur, idx, s.wq, s.wk, s.wv);
    return tape_ops::gaussian_refine(t, cur, hidden, s.decode, s.bias, d, f);
}

} // namespace detail

/// Records the full differentiable forward pass: refinement stack, optional
/// DSDGA, splat accumulation and (when gt is given) the training loss. Graph
/// topology and the dynamic/static partition are rebuilt from the running
/// values at record time and differentiated through as constants.
inline RecordedPipeline record_pipeline(const GaussianSet& init, const PipelineConfig& cfg,
                                        const PipelineParams& params,
                                        const SemanticTaxonomy& taxonomy, const GridSpec& grid,
                                        const VoxelGrid* gt) {
    cfg.validate(init.size());
    const int d = init.num_classes();
    const int f = init.feature_dim();

    RecordedPipeline rec;
    GradientTape& t = rec.tape;
    rec.param_slots.reserve(params.tensors.size());
    for (const auto& tensor : params.tensors) rec.param_slots.push_back(t.push_value(tensor));
    rec.init_props = t.push_value(init.props());

    GradientTape::Slot cur = rec.init_props;
    auto current_set = [&]() { return GaussianSet(t.value(cur), d, f); };

    const int scales =
        cfg.refine == RefineKind::mga ? static_cast<int>(cfg.topk_schedule.size()) : 1;

    for (int l = 0; l < cfg.num_layers; ++l) {
        switch (cfg.refine) {
            case RefineKind::none:
                break;
            case RefineKind::mlp: {
                const auto& ids = params.mlp_blocks[static_cast<size_t>(l)];
                const GradientTape::Slot hidden = tape_ops::mlp_hidden(
                    t, cur, rec.param_slots[static_cast<size_t>(ids.w1)],
                    rec.param_slots[static_cast<size_t>(ids.b1)]);
                cur = tape_ops::gaussian_refine(
                    t, cur, hidden, rec.param_slots[static_cast<size_t>(ids.decode)],
                    rec.param_slots[static_cast<size_t>(ids.bias)], d, f);
                break;
            }
            case RefineKind::gga_only: {
                DggaConfig layer_cfg{cfg.k, cfg.m, cfg.graph, cfg.fuse};
                const NeighborIndex idx = build_geometric_graph(current_set(), layer_cfg);
                cur = detail::record_branch(rec, cur, idx,
                                            detail::slots_of(rec, params.geo_blocks[static_cast<size_t>(l)]),
                                            d, f);
                break;
            }
            case RefineKind::sga_only: {
                const NeighborIndex idx = cosine_topM(current_set().features(), cfg.m);
                cur = detail::record_branch(rec, cur, idx,
                                            detail::slots_of(rec, params.sem_blocks[static_cast<size_t>(l)]),
                                            d, f);
                break;
            }
            case RefineKind::dgga: {
                DggaConfig layer_cfg{cfg.k, cfg.m, cfg.graph, cfg.fuse};
                const GaussianSet snapshot = current_set();
                const NeighborIndex idx_geo = build_geometric_graph(snapshot, layer_cfg);
                const NeighborIndex idx_sem = cosine_topM(snapshot.features(), cfg.m);
                const GradientTape::Slot geo = detail::record_branch(
                    rec, cur, idx_geo, detail::slots_of(rec, params.geo_blocks[static_cast<size_t>(l)]),
                    d, f);
                const GradientTape::Slot sem = detail::record_branch(
                    rec, cur, idx_sem, detail::slots_of(rec, params.sem_blocks[static_cast<size_t>(l)]),
                    d, f);
                GradientTape::Slot fused;
                if (cfg.fuse == FuseMode::adaptive) {
                    fused = tape_ops::adaptive_fuse(t, {geo, sem});
                } else if (cfg.fuse == FuseMode::average) {
                    fused = tape_ops::average_fuse(t, {geo, sem});
                } else {
                    fused = tape_ops::concat_project_fuse(
                        t, {geo, sem},
                        rec.param_slots[static_cast<size_t>(
                            params.branch_concat[static_cast<size_t>(l)])]);
                }
                cur = tape_ops::project_tokens(t, fused, d, f);
                break;
            }
            case RefineKind::mga: {
                const GaussianSet snapshot = current_set();
                std::vector<GradientTape::Slot> branch_slots;
                for (int s = 0; s < scales; ++s) {
                    DggaConfig layer_cfg{cfg.topk_schedule[static_cast<size_t>(s)],
                                         cfg.topm_schedule[static_cast<size_t>(s)], cfg.graph,
                                         cfg.fuse};
                    const NeighborIndex idx_geo = build_geometric_graph(snapshot, layer_cfg);
                    const NeighborIndex idx_sem =
                        cosine_topM(snapshot.features(), layer_cfg.m);
                    const size_t block = static_cast<size_t>(l * scales + s);
                    const GradientTape::Slot geo = detail::record_branch(
                        rec, cur, idx_geo, detail::slots_of(rec, params.geo_blocks[block]), d, f);
                    const GradientTape::Slot sem = detail::record_branch(
                        rec, cur, idx_sem, detail::slots_of(rec, params.sem_blocks[block]), d, f);
                    GradientTape::Slot fused = cfg.fuse == FuseMode::adaptive
                                                   ? tape_ops::adaptive_fuse(t, {geo, sem})
                                                   : tape_ops::average_fuse(t, {geo, sem});
                    branch_slots.push_back(tape_ops::project_tokens(t, fused, d, f));
                }
                if (scales == 1) {
                    cur = branch_slots[0];
                } else {
                    GradientTape::Slot fused = cfg.fuse == FuseMode::adaptive
                                                   ? tape_ops::adaptive_fuse(t, branch_slots)
                                                   : tape_ops::average_fuse(t, branch_slots);
                    cur = tape_ops::project_tokens(t, fused, d, f);
                }
                break;
            }
        }
    }

    if (cfg.dsdga_on) {
        const GaussianSet snapshot = current_set();
        const DecoupleMasks masks = split_masks(semantic_scores(snapshot), taxonomy);
        std::vector<int> dyn_ids, sta_ids;
        for (int i = 0; i < snapshot.size(); ++i)
            (masks.dynamic[static_cast<size_t>(i)] ? dyn_ids : sta_ids).push_back(i);

        if (!dyn_ids.empty() && !sta_ids.empty()) {
            GradientTape::Slot dyn = tape_ops::gather_rows(t, cur, dyn_ids);
            GradientTape::Slot sta = tape_ops::gather_rows(t, cur, sta_ids);
            GradientTape::Slot dyn_out = dyn;
            if (cfg.dca_on) {
                const auto s = detail::slots_of(rec, params.dca);
                const GradientTape::Slot hidden =
                    tape_ops::cross_attention(t, dyn, sta, s.wq, s.wk, s.wv);
                dyn_out = tape_ops::gaussian_refine(t, dyn, hidden, s.decode, s.bias, d, f);
            }
            GradientTape::Slot sta_out = sta;
            if (cfg.sca_on) {
                const auto s = detail::slots_of(rec, params.sca);
                const GradientTape::Slot hidden =
                    tape_ops::cross_attention(t, sta, dyn_out, s.wq, s.wk, s.wv);
                sta_out = tape_ops::gaussian_refine(t, sta, hidden, s.decode, s.bias, d, f);
            }
            cur = tape_ops::scatter_merge(t, dyn_out, dyn_ids, sta_out, sta_ids, snapshot.size());
        }
        // one side empty: both cross attentions lack context; pass through
    }

    rec.final_props = cur;
    if (gt != nullptr) {
        rec.acc = tape_ops::splat_accumulate(t, cur, d, f, grid, cfg.splat);
        rec.loss = tape_ops::occupancy_loss(t, rec.acc, *gt, taxonomy, cfg.splat.tau_occ,
                                            cfg.loss_sharpness, cfg.loss_balance);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Forward-only pipeline and training
// ---------------------------------------------------------------------------

struct PipelineResult {
    GaussianSet refined;
    VoxelGrid pred;
    int skipped = 0;
};

inline PipelineResult run_pipeline(const GaussianSet& init, const PipelineConfig& cfg,
                                   const PipelineParams& params, const SemanticTaxonomy& taxonomy,
                                   const GridSpec& grid) {
    RecordedPipeline rec = record_pipeline(init, cfg, params, taxonomy, grid, nullptr);
    GaussianSet refined(rec.tape.value(rec.final_props), init.num_classes(), init.feature_dim());
    SplatResult sp = splat(refined, grid, cfg.splat, taxonomy);
    return {std::move(refined), std::move(sp.grid), sp.skipped};
}

struct TrainConfig {
    int steps = 200;
    AdamWConfig optim;
};

struct TrainOutcome {
    PipelineParams params;
    std::vector<double> loss_history;
};

/// Training data: one or more noisy init samplings of the same GT grid.
/// Several draws act as data augmentation over the sampling noise.
struct TrainData {
    std::vector<GaussianSet> inits;
    VoxelGrid gt;
    SemanticTaxonomy taxonomy;
};

inline TrainData train_data_from(const Scene& scene) {
    return {{scene.init}, scene.gt, scene.taxonomy};
}

/// Optimizes all pipeline parameters against the GT grid, cycling through the
/// init draws one per step.
inline TrainOutcome train_pipeline(const TrainData& data, const PipelineConfig& cfg,
                                   const TrainConfig& train_cfg = {}) {
    if (data.inits.empty()) throw InvalidParameterError("training needs at least one init draw");
    TrainOutcome out;
    out.params = init_params(cfg, data.inits[0].dim(), data.inits[0].feature_dim());
    AdamW opt(train_cfg.optim);
    const GridSpec grid = spec_of(data.gt);

    std::vector<MatrixXd*> param_ptrs;
    for (auto& tensor : out.params.tensors) param_ptrs.push_back(&tensor);

    for (int step = 0; step < train_cfg.steps; ++step) {
        const GaussianSet& init = data.inits[static_cast<size_t>(step) % data.inits.size()];
        RecordedPipeline rec =
            record_pipeline(init, cfg, out.params, data.taxonomy, grid, &data.gt);
        out.loss_history.push_back(rec.tape.value(rec.loss)(0, 0));
        if (param_ptrs.empty()) continue;
        rec.tape.backward(rec.loss, MatrixXd::Ones(1, 1));
        std::vector<MatrixXd> grads;
        grads.reserve(param_ptrs.size());
        for (size_t i = 0; i < rec.param_slots.size(); ++i)
            grads.push_back(rec.tape.grad(rec.param_slots[i]));
        std::vector<const MatrixXd*> grad_ptrs;
        for (auto& g : grads) grad_ptrs.push_back(&g);
        opt.step(param_ptrs, grad_ptrs);
    }
    return out;
}

inline TrainOutcome train_pipeline(const Scene& scene, const PipelineConfig& cfg,
                                   const TrainConfig& train_cfg = {}) {
    return train_pipeline(train_data_from(scene), cfg, train_cfg);
}

} // namespace gsocc
