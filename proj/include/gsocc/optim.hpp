#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"

namespace gsocc {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2; // decoupled
};

/// Decoupled-weight-decay adaptive-moment optimizer over a fixed list of
/// tensors. Moment buffers are created lazily on the first step.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    long step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

    void step(const std::vector<MatrixXd*>& params, const std::vector<const MatrixXd*>& grads) {
        if (params.size() != grads.size())
            throw InvalidParameterError("optimizer param/grad list mismatch");
        if (moments_.empty()) {
            moments_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                moments_[i].m.setZero(params[i]->rows(), params[i]->cols());
                moments_[i].v.setZero(params[i]->rows(), params[i]->cols());
            }
        }
        if (moments_.size() != params.size())
            throw InvalidParameterError("optimizer param count changed between steps");
        ++step_;
        const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            MatrixXd& p = *params[i];
            const MatrixXd& g = *grads[i];
            if (g.rows() != p.rows() || g.cols() != p.cols())
                throw InvalidParameterError("gradient shape does not match parameter");
            Moments& mo = moments_[i];
            mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * g;
            mo.v = cfg_.beta2 * mo.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            const MatrixXd m_hat = mo.m / bias1;
            const MatrixXd v_hat = mo.v / bias2;
            p -= cfg_.lr * (m_hat.array() / (v_hat.array().sqrt() + cfg_.eps)).matrix();
            p -= cfg_.lr * cfg_.weight_decay * p;
        }
    }

private:
    struct Moments {
        MatrixXd m, v;
    };
    AdamWConfig cfg_;
    std::vector<Moments> moments_;
    long step_ = 0;
};

} // namespace gsocc
