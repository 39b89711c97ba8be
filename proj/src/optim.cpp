#include "genplugin/optim.hpp"

#include <cmath>
#include <numbers>

namespace genplugin::optim {

AdamW::AdamW(std::vector<ag::Var> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        if (!p.grad.same_shape(p.value)) continue;
        Matrix& m = m_[k];
        Matrix& v = v_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.value[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p->grad = Matrix();
}

double cosine_lr(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr) {
    if (total_steps == 0) return base_lr;
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step < warm) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double progress =
        static_cast<double>(step - warm) / static_cast<double>(std::max<std::size_t>(1, total_steps - warm));
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace genplugin::optim
