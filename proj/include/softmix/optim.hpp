#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "softmix/tensor.hpp"

namespace softmix {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over a fixed set of externally-owned tensors. Parameter order is
// fixed at construction; step() consumes gradients in the same order.
class Adam {
public:
    Adam(std::vector<Tensor*> params, AdamConfig cfg);

    // grads[i] matches params[i] in shape. One global step count is shared
    // by all tensors (bias correction).
    void step(const std::vector<Tensor>& grads);

    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor*> params_;
    std::vector<Tensor> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

// Early stopping on dev loss: stop after `patience` consecutive epochs
// without strict improvement. Epochs are 1-based.
struct EarlyStopper {
    int patience = 4;
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int since_best = 0;

    explicit EarlyStopper(int patience_) : patience(patience_) {}

    // Returns true when training should stop after this epoch.
    bool record(int epoch, double dev_loss) {
        if (dev_loss < best) {
            best = dev_loss;
            best_epoch = epoch;
            since_best = 0;
            return false;
        }
        ++since_best;
        return since_best >= patience;
    }

    bool improved_at(int epoch) const { return best_epoch == epoch; }
};

}  // namespace softmix
