#pragma once

#include <cmath>
#include <vector>

#include "todynet/tape.hpp"

namespace todynet {

// Adam with bias correction. Moment buffers live on the Parameters and
// persist across steps.
template <typename R>
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Parameter<R>*>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (Parameter<R>* p : params) {
            if (!p->trainable) continue;
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = static_cast<double>(p->grad[i]);
                const double m = beta1_ * static_cast<double>(p->moment1[i]) + (1.0 - beta1_) * g;
                const double v =
                    beta2_ * static_cast<double>(p->moment2[i]) + (1.0 - beta2_) * g * g;
                p->moment1[i] = static_cast<R>(m);
                p->moment2[i] = static_cast<R>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                p->value[i] = static_cast<R>(static_cast<double>(p->value[i]) -
                                             lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    void zero_grad(const std::vector<Parameter<R>*>& params) {
        for (Parameter<R>* p : params) p->zero_grad();
    }

    long step_count() const { return t_; }

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    long t_ = 0;
};

}  // namespace todynet
