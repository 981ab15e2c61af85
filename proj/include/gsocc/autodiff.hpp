#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gsocc/attention.hpp"
#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/fusion.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

/// Ordered record of executed differentiable ops. Values live in append-only
/// slots; each node closure reads output gradients and accumulates into input
/// slots. Index selection (neighbor rows, argmax masks, cutoff pairings) is
/// captured by value at record time and treated as constant.
class GradientTape {
public:
    using Slot = int;

    Slot push_value(MatrixXd v) {
        values_.push_back(std::move(v));
        grads_.emplace_back();
        return static_cast<Slot>(values_.size()) - 1;
    }

    const MatrixXd& value(Slot s) const { return values_.at(static_cast<size_t>(s)); }

    bool has_grad(Slot s) const { return grads_.at(static_cast<size_t>(s)).size() != 0; }

    const MatrixXd& grad(Slot s) const {
        const MatrixXd& g = grads_.at(static_cast<size_t>(s));
        if (g.size() == 0) {
            zero_like_.setZero(values_[static_cast<size_t>(s)].rows(),
                               values_[static_cast<size_t>(s)].cols());
            return zero_like_;
        }
        return g;
    }

    void add_grad(Slot s, const MatrixXd& g) {
        MatrixXd& dst = grads_.at(static_cast<size_t>(s));
        if (dst.size() == 0) {
            dst = g;
        } else {
            dst += g;
        }
    }

    void push_node(std::string name, std::function<void(GradientTape&)> backward,
                   std::function<bool(GradientTape&)> replay) {
        nodes_.push_back({std::move(name), std::move(backward), std::move(replay)});
    }

    /// Reverse sweep from `loss_slot` seeded with `seed` (shape must match).
    void backward(Slot loss_slot, const MatrixXd& seed) {
        if (loss_slot < 0 || loss_slot >= static_cast<Slot>(values_.size()))
            throw InvalidTapeError("loss slot is not on this tape");
        const MatrixXd& loss_val = value(loss_slot);
        if (seed.rows() != loss_val.rows() || seed.cols() != loss_val.cols())
            throw InvalidTapeError("loss gradient shape does not match the recorded loss");
        for (auto& g : grads_) g.resize(0, 0);
        add_grad(loss_slot, seed);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward(*this);
    }

    /// Re-executes every recorded op on the stored input values and checks
    /// the recorded outputs are reproduced bit-exactly.
    bool replay_check() {
        for (auto& node : nodes_)
            if (!node.replay(*this)) return false;
        return true;
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        std::string name;
        std::function<void(GradientTape&)> backward;
        std::function<bool(GradientTape&)> replay;
    };
    std::vector<MatrixXd> values_;
    std::vector<MatrixXd> grads_;
    std::vector<Node> nodes_;
    mutable MatrixXd zero_like_;
};

namespace tape_ops {

inline bool bit_equal(const MatrixXd& a, const MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

inline LayerParams params_from_slots(const GradientTape& t, GradientTape::Slot wq,
                                     GradientTape::Slot wk, GradientTape::Slot wv) {
    LayerParams p;
    p.w_q = t.value(wq);
    p.w_k = t.value(wk);
    p.w_v = t.value(wv);
    return p;
}

/// tokens -> attention hidden over fixed neighbor rows.
inline GradientTape::Slot neighbor_attention(GradientTape& t, GradientTape::Slot tokens,
                                             const NeighborIndex& idx, GradientTape::Slot wq,
                                             GradientTape::Slot wk, GradientTape::Slot wv) {
    LayerParams p = params_from_slots(t, wq, wk, wv);
    const AttentionOutput out = gsocc::neighbor_attention(t.value(tokens), idx, p);
    const GradientTape::Slot hidden = t.push_value(out.hidden);
    t.push_node(
        "neighbor_attention",
        [tokens, wq, wk, wv, hidden, idx](GradientTape& tp) {
            if (!tp.has_grad(hidden)) return;
            LayerParams p2 = params_from_slots(tp, wq, wk, wv);
            NeighborAttentionGrads g =
                neighbor_attention_vjp(tp.value(tokens), idx, p2, tp.grad(hidden));
            tp.add_grad(tokens, g.tokens);
            tp.add_grad(wq, g.w_q);
            tp.add_grad(wk, g.w_k);
            tp.add_grad(wv, g.w_v);
        },
        [tokens, wq, wk, wv, hidden, idx](GradientTape& tp) {
            LayerParams p2 = params_from_slots(tp, wq, wk, wv);
            return bit_equal(gsocc::neighbor_attention(tp.value(tokens), idx, p2).hidden,
                             tp.value(hidden));
        });
    return hidden;
}

inline GradientTape::Slot cross_attention(GradientTape& t, GradientTape::Slot q_tokens,
                                          GradientTape::Slot kv_tokens, GradientTape::Slot wq,
                                          GradientTape::Slot wk, GradientTape::Slot wv) {
    LayerParams p = params_from_slots(t, wq, wk, wv);
    const AttentionOutput out = gsocc::cross_attention(t.value(q_tokens), t.value(kv_tokens), p);
    const GradientTape::Slot hidden = t.push_value(out.hidden);
    t.push_node(
        "cross_attention",
        [q_tokens, kv_tokens, wq, wk, wv, hidden](GradientTape& tp) {
            if (!tp.has_grad(hidden)) return;
            LayerParams p2 = params_from_slots(tp, wq, wk, wv);
            CrossAttentionGrads g = cross_attention_vjp(tp.value(q_tokens), tp.value(kv_tokens),
                                                        p2, tp.grad(hidden));
            tp.add_grad(q_tokens, g.q_tokens);
            tp.add_grad(kv_tokens, g.kv_tokens);
            tp.add_grad(wq, g.w_q);
            tp.add_grad(wk, g.w_k);
            tp.add_grad(wv, g.w_v);
        },
        [q_tokens, kv_tokens, wq, wk, wv, hidden](GradientTape& tp) {
            LayerParams p2 = params_from_slots(tp, wq, wk, wv);
            return bit_equal(
                gsocc::cross_attention(tp.value(q_tokens), tp.value(kv_tokens), p2).hidden,
                tp.value(hidden));
        });
    return hidden;
}

inline LayerParams decode_params_from_slots(const GradientTape& t, GradientTape::Slot decode,
                                            GradientTape::Slot bias) {
    LayerParams p;
    p.decode = t.value(decode);
    p.decode_bias = t.value(bias).col(0);
    return p;
}

inline GradientTape::Slot gaussian_refine(GradientTape& t, GradientTape::Slot in_props,
                                          GradientTape::Slot hidden, GradientTape::Slot decode,
                                          GradientTape::Slot bias, int d, int f) {
    const GaussianSet out =
        gsocc::gaussian_refine(GaussianSet(t.value(in_props), d, f), t.value(hidden),
                               decode_params_from_slots(t, decode, bias));
    const GradientTape::Slot out_slot = t.push_value(out.props());
    t.push_node(
        "gaussian_refine",
        [in_props, hidden, decode, bias, out_slot, d, f](GradientTape& tp) {
            if (!tp.has_grad(out_slot)) return;
            RefineGrads g = gaussian_refine_vjp(GaussianSet(tp.value(in_props), d, f),
                                                tp.value(hidden),
                                                decode_params_from_slots(tp, decode, bias),
                                                tp.grad(out_slot));
            tp.add_grad(in_props, g.in_props);
            tp.add_grad(hidden, g.hidden);
            tp.add_grad(decode, g.decode);
            tp.add_grad(bias, g.decode_bias);
        },
        [in_props, hidden, decode, bias, out_slot, d, f](GradientTape& tp) {
            return bit_equal(
                gsocc::gaussian_refine(GaussianSet(tp.value(in_props), d, f), tp.value(hidden),
                                       decode_params_from_slots(tp, decode, bias))
                    .props(),
                tp.value(out_slot));
        });
    return out_slot;
}

inline GradientTape::Slot adaptive_fuse(GradientTape& t,
                                        const std::vector<GradientTape::Slot>& branches) {
    std::vector<MatrixXd> vals;
    vals.reserve(branches.size());
    for (auto s : branches) vals.push_back(t.value(s));
    const GradientTape::Slot out = t.push_value(gsocc::adaptive_fuse(vals).fused);
    t.push_node(
        "adaptive_fuse",
        [branches, out](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            std::vector<MatrixXd> vals2;
            vals2.reserve(branches.size());
            for (auto s : branches) vals2.push_back(tp.value(s));
            const std::vector<MatrixXd> grads = adaptive_fuse_vjp(vals2, tp.grad(out));
            for (size_t b = 0; b < branches.size(); ++b) tp.add_grad(branches[b], grads[b]);
        },
        [branches, out](GradientTape& tp) {
            std::vector<MatrixXd> vals2;
            vals2.reserve(branches.size());
            for (auto s : branches) vals2.push_back(tp.value(s));
            return bit_equal(gsocc::adaptive_fuse(vals2).fused, tp.value(out));
        });
    return out;
}

inline GradientTape::Slot average_fuse(GradientTape& t,
                                       const std::vector<GradientTape::Slot>& branches) {
    MatrixXd sum = t.value(branches[0]);
    for (size_t b = 1; b < branches.size(); ++b) sum += t.value(branches[b]);
    sum /= static_cast<double>(branches.size());
    const GradientTape::Slot out = t.push_value(std::move(sum));
    const double inv = 1.0 / static_cast<double>(branches.size());
    t.push_node(
        "average_fuse",
        [branches, out, inv](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            for (auto s : branches) tp.add_grad(s, inv * tp.grad(out));
        },
        [branches, out, inv](GradientTape& tp) {
            MatrixXd sum2 = tp.value(branches[0]);
            for (size_t b = 1; b < branches.size(); ++b) sum2 += tp.value(branches[b]);
            sum2 *= inv;
            return bit_equal(sum2, tp.value(out));
        });
    return out;
}

inline GradientTape::Slot concat_project_fuse(GradientTape& t,
                                              const std::vector<GradientTape::Slot>& branches,
                                              GradientTape::Slot proj) {
    auto concat = [branches](GradientTape& tp) {
        const Eigen::Index dim = tp.value(branches[0]).cols();
        MatrixXd cat(tp.value(branches[0]).rows(),
                     dim * static_cast<Eigen::Index>(branches.size()));
        for (size_t b = 0; b < branches.size(); ++b)
            cat.middleCols(static_cast<Eigen::Index>(b) * dim, dim) = tp.value(branches[b]);
        return cat;
    };
    const GradientTape::Slot out = t.push_value(concat(t) * t.value(proj));
    t.push_node(
        "concat_project_fuse",
        [branches, proj, out, concat](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            const MatrixXd cat = concat(tp);
            const MatrixXd g_cat = tp.grad(out) * tp.value(proj).transpose();
            const Eigen::Index dim = tp.value(branches[0]).cols();
            for (size_t b = 0; b < branches.size(); ++b)
                tp.add_grad(branches[b],
                            g_cat.middleCols(static_cast<Eigen::Index>(b) * dim, dim));
            tp.add_grad(proj, cat.transpose() * tp.grad(out));
        },
        [branches, proj, out, concat](GradientTape& tp) {
            return bit_equal(concat(tp) * tp.value(proj), tp.value(out));
        });
    return out;
}

inline GradientTape::Slot project_tokens(GradientTape& t, GradientTape::Slot tokens, int d, int f) {
    const GradientTape::Slot out =
        t.push_value(project_tokens_to_gaussians(t.value(tokens), d, f).props());
    t.push_node(
        "project_tokens",
        [tokens, out](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            tp.add_grad(tokens, project_tokens_vjp(tp.value(tokens), tp.grad(out)));
        },
        [tokens, out, d, f](GradientTape& tp) {
            return bit_equal(project_tokens_to_gaussians(tp.value(tokens), d, f).props(),
                             tp.value(out));
        });
    return out;
}

/// Gathers rows `ids` of a matrix; the VJP scatter-adds back.
inline GradientTape::Slot gather_rows(GradientTape& t, GradientTape::Slot src,
                                      std::vector<int> ids) {
    const MatrixXd& v = t.value(src);
    MatrixXd picked(static_cast<Eigen::Index>(ids.size()), v.cols());
    for (size_t r = 0; r < ids.size(); ++r)
        picked.row(static_cast<Eigen::Index>(r)) = v.row(ids[r]);
    const GradientTape::Slot out = t.push_value(std::move(picked));
    t.push_node(
        "gather_rows",
        [src, out, ids](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            MatrixXd g = MatrixXd::Zero(tp.value(src).rows(), tp.value(src).cols());
            for (size_t r = 0; r < ids.size(); ++r)
                g.row(ids[r]) += tp.grad(out).row(static_cast<Eigen::Index>(r));
            tp.add_grad(src, g);
        },
        [src, out, ids](GradientTape& tp) {
            MatrixXd picked2(static_cast<Eigen::Index>(ids.size()), tp.value(src).cols());
            for (size_t r = 0; r < ids.size(); ++r)
                picked2.row(static_cast<Eigen::Index>(r)) = tp.value(src).row(ids[r]);
            return bit_equal(picked2, tp.value(out));
        });
    return out;
}

/// Scatters two disjoint row groups back into an n-row matrix.
inline GradientTape::Slot scatter_merge(GradientTape& t, GradientTape::Slot a,
                                        std::vector<int> a_ids, GradientTape::Slot b,
                                        std::vector<int> b_ids, int n) {
    auto run = [a, a_ids, b, b_ids, n](GradientTape& tp) {
        MatrixXd out(n, tp.value(a).cols());
        for (size_t r = 0; r < a_ids.size(); ++r)
            out.row(a_ids[r]) = tp.value(a).row(static_cast<Eigen::Index>(r));
        for (size_t r = 0; r < b_ids.size(); ++r)
            out.row(b_ids[r]) = tp.value(b).row(static_cast<Eigen::Index>(r));
        return out;
    };
    const GradientTape::Slot out = t.push_value(run(t));
    t.push_node(
        "scatter_merge",
        [a, a_ids, b, b_ids, out](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            const MatrixXd& g = tp.grad(out);
            MatrixXd ga(static_cast<Eigen::Index>(a_ids.size()), g.cols());
            for (size_t r = 0; r < a_ids.size(); ++r)
                ga.row(static_cast<Eigen::Index>(r)) = g.row(a_ids[r]);
            MatrixXd gb(static_cast<Eigen::Index>(b_ids.size()), g.cols());
            for (size_t r = 0; r < b_ids.size(); ++r)
                gb.row(static_cast<Eigen::Index>(r)) = g.row(b_ids[r]);
            if (ga.rows() > 0) tp.add_grad(a, ga);
            if (gb.rows() > 0) tp.add_grad(b, gb);
        },
        [run, out](GradientTape& tp) { return bit_equal(run(tp), tp.value(out)); });
    return out;
}

/// hidden = tanh(tokens * w1 + b1^T); the per-Gaussian feedforward used by
/// the MLP refinement baseline.
inline GradientTape::Slot mlp_hidden(GradientTape& t, GradientTape::Slot tokens,
                                     GradientTape::Slot w1, GradientTape::Slot b1) {
    auto run = [tokens, w1, b1](const GradientTape& tp) {
        MatrixXd h = tp.value(tokens) * tp.value(w1);
        h.rowwise() += tp.value(b1).col(0).transpose();
        return MatrixXd(h.array().tanh().matrix());
    };
    const GradientTape::Slot out = t.push_value(run(t));
    t.push_node(
        "mlp_hidden",
        [tokens, w1, b1, out](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            const MatrixXd& h = tp.value(out);
            const MatrixXd g_pre =
                tp.grad(out).cwiseProduct((1.0 - h.array().square()).matrix());
            tp.add_grad(tokens, g_pre * tp.value(w1).transpose());
            tp.add_grad(w1, tp.value(tokens).transpose() * g_pre);
            tp.add_grad(b1, g_pre.colwise().sum().transpose());
        },
        [run, out](GradientTape& tp) { return bit_equal(run(tp), tp.value(out)); });
    return out;
}

inline GradientTape::Slot splat_accumulate(GradientTape& t, GradientTape::Slot props, int d, int f,
                                           const GridSpec& spec, const SplatConfig& cfg) {
    const GradientTape::Slot out = t.push_value(
        gsocc::splat_accumulate(GaussianSet(t.value(props), d, f), spec, cfg).acc);
    t.push_node(
        "splat_accumulate",
        [props, out, d, f, spec, cfg](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            tp.add_grad(props, splat_accumulate_vjp(GaussianSet(tp.value(props), d, f), spec, cfg,
                                                    tp.grad(out)));
        },
        [props, out, d, f, spec, cfg](GradientTape& tp) {
            return bit_equal(
                gsocc::splat_accumulate(GaussianSet(tp.value(props), d, f), spec, cfg).acc,
                tp.value(out));
        });
    return out;
}

} // namespace tape_ops

// ---------------------------------------------------------------------------
// Occupancy cross-entropy loss
// ---------------------------------------------------------------------------

/// Per-voxel softmax cross entropy on accumulated densities. Voxel weights
/// are count^-balance per GT class (normalized to sum 1), trading off recall
/// on rare classes against precision on the bulk empty region. Logits are
/// sharpness-scaled acc values for the non-empty classes and the constant
/// sharpness * tau_occ for the empty class, so the soft argmax agrees with
/// the splat call rule ("best class if its density clears tau_occ") while the
/// sharpness sets how confident a zero-density voxel is about being empty.
inline double occupancy_cross_entropy(const MatrixXd& acc, const VoxelGrid& gt,
                                      const SemanticTaxonomy& taxonomy, double tau_occ,
                                      double sharpness = 30.0, double balance = 0.35,
                                      MatrixXd* grad_acc = nullptr) {
    const int d = taxonomy.num_classes();
    const std::int64_t v_count = gt.num_voxels();
    if (acc.rows() != v_count || acc.cols() != d)
        throw InvalidInputError("acc shape does not match grid/taxonomy");
    if (sharpness <= 0) throw InvalidParameterError("loss sharpness must be positive");
    if (grad_acc) grad_acc->setZero(acc.rows(), acc.cols());

    std::vector<std::int64_t> class_count(static_cast<size_t>(d), 0);
    for (std::int64_t v = 0; v < v_count; ++v)
        ++class_count[static_cast<size_t>(gt.classes[static_cast<size_t>(v)])];
    std::vector<double> class_weight(static_cast<size_t>(d), 0.0);
    double weight_total = 0.0;
    for (int c = 0; c < d; ++c) {
        if (class_count[static_cast<size_t>(c)] == 0) continue;
        class_weight[static_cast<size_t>(c)] =
            std::pow(static_cast<double>(class_count[static_cast<size_t>(c)]), -balance);
        weight_total += class_weight[static_cast<size_t>(c)] *
                        static_cast<double>(class_count[static_cast<size_t>(c)]);
    }
    for (auto& w : class_weight) w /= weight_total;

    const double z_empty = sharpness * tau_occ;
    double total = 0.0;
    for (std::int64_t v = 0; v < v_count; ++v) {
        double mx = z_empty;
        for (int c = 0; c < d; ++c)
            if (c != taxonomy.empty_class) mx = std::max(mx, sharpness * acc(v, c));
        double sum = std::exp(z_empty - mx);
        for (int c = 0; c < d; ++c)
            if (c != taxonomy.empty_class) sum += std::exp(sharpness * acc(v, c) - mx);
        const double lse = mx + std::log(sum);
        const int g = gt.classes[static_cast<size_t>(v)];
        const double weight = class_weight[static_cast<size_t>(g)];
        const double z_g = g == taxonomy.empty_class ? z_empty : sharpness * acc(v, g);
        total += weight * (lse - z_g);
        if (grad_acc) {
            for (int c = 0; c < d; ++c) {
                if (c == taxonomy.empty_class) continue;
                const double p = std::exp(sharpness * acc(v, c) - lse);
                (*grad_acc)(v, c) = weight * sharpness * (p - (c == g ? 1.0 : 0.0));
            }
        }
    }
    return total;
}

namespace tape_ops {

inline GradientTape::Slot occupancy_loss(GradientTape& t, GradientTape::Slot acc,
                                         const VoxelGrid& gt, const SemanticTaxonomy& taxonomy,
                                         double tau_occ, double sharpness = 30.0,
                                         double balance = 0.35) {
    MatrixXd loss(1, 1);
    loss(0, 0) = occupancy_cross_entropy(t.value(acc), gt, taxonomy, tau_occ, sharpness, balance);
    const GradientTape::Slot out = t.push_value(std::move(loss));
    t.push_node(
        "occupancy_loss",
        [acc, out, gt, taxonomy, tau_occ, sharpness, balance](GradientTape& tp) {
            if (!tp.has_grad(out)) return;
            MatrixXd g;
            occupancy_cross_entropy(tp.value(acc), gt, taxonomy, tau_occ, sharpness, balance, &g);
            tp.add_grad(acc, tp.grad(out)(0, 0) * g);
        },
        [acc, out, gt, taxonomy, tau_occ, sharpness, balance](GradientTape& tp) {
            MatrixXd loss2(1, 1);
            loss2(0, 0) =
                occupancy_cross_entropy(tp.value(acc), gt, taxonomy, tau_occ, sharpness, balance);
            return bit_equal(loss2, tp.value(out));
        });
    return out;
}

} // namespace tape_ops

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename F>
VectorXd fd_gradient(F&& f, const VectorXd& x, double eps) {
    VectorXd g(x.size());
    VectorXd xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + eps;
        const double up = f(xp);
        xp[i] = x[i] - eps;
        const double down = f(xp);
        xp[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("non-finite evaluation during finite differencing");
        g[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

/// Max relative error between an analytic gradient and central differences;
/// denominators are floored at 1e-8.
template <typename F>
double fd_check(F&& f, const VectorXd& x, const VectorXd& analytic, double eps) {
    const VectorXd numeric = fd_gradient(std::forward<F>(f), x, eps);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double denom = std::max({std::abs(numeric[i]), std::abs(analytic[i]), 1e-8});
        worst = std::max(worst, std::abs(numeric[i] - analytic[i]) / denom);
    }
    return worst;
}

} // namespace gsocc
