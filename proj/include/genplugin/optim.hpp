#pragma once

#include <cstddef>
#include <vector>

#include "genplugin/autograd.hpp"

namespace genplugin::optim {

struct AdamWConfig {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Parameters without a gradient buffer in
/// a step are left untouched.
class AdamW {
public:
    AdamW(std::vector<ag::Var> params, AdamWConfig cfg);
    void step(double lr);
    void zero_grad();
    const AdamWConfig& config() const { return cfg_; }

private:
    std::vector<ag::Var> params_;
    std::vector<Matrix> m_, v_;
    AdamWConfig cfg_;
    std::size_t t_ = 0;
};

/// Linear warm-up over ceil(warmup_ratio·total) steps, then cosine decay to 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr);

}  // namespace genplugin::optim
