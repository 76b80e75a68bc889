#pragma once

#include <vector>

#include "perpcs/data.hpp"
#include "perpcs/model.hpp"

namespace perpcs {

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  int batch_size = 8;
  int epochs = 1;
  int max_steps = 0;  // > 0 overrides epochs
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double clip_norm = 1.0;  // global norm; <= 0 disables
  std::uint64_t seed = 0;

  void validate() const;
  int total_steps(std::size_t dataset_size) const;
};

struct TrainResult {
  std::vector<double> losses;  // one per step
  int steps = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Adam with fixed betas 0.9/0.999 and eps 1e-8, or plain SGD.
template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<Parameter<T>*> params, OptimizerKind kind, double lr);
  void step();
  void zero_grad();
  double clip_global_norm(double max_norm);

 private:
  std::vector<Parameter<T>*> params_;
  OptimizerKind kind_;
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Trains only `trainable`; every other model parameter is frozen for the
// duration and left bit-identical. `attach` may carry trainable tensors too.
template <typename T>
TrainResult train_lm(Transformer<T>& model, const std::vector<Example>& data, const TrainConfig& cfg,
                     const std::vector<Parameter<T>*>& trainable, SlotAttachment<T>* attach = nullptr);

// Mean masked cross-entropy over the dataset (no gradients).
template <typename T>
double eval_loss(Transformer<T>& model, const std::vector<Example>& data, SlotAttachment<T>* attach = nullptr,
                 int batch_size = 16);

}  // namespace perpcs
