#include "perpcs/train.hpp"

#include <cmath>
#include <numeric>
#include <set>

namespace perpcs {

void TrainConfig::validate() const {
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (epochs < 0 || max_steps < 0) throw std::invalid_argument("epochs/steps must be non-negative");
  if (lr < 0) throw std::invalid_argument("learning rate must be non-negative");
}

int TrainConfig::total_steps(std::size_t dataset_size) const {
  if (max_steps > 0) return max_steps;
  if (dataset_size == 0) return 0;
  const auto per_epoch = (dataset_size + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
  return static_cast<int>(per_epoch) * epochs;
}

template <typename T>
Optimizer<T>::Optimizer(std::vector<Parameter<T>*> params, OptimizerKind kind, double lr)
    : params_(std::move(params)), kind_(kind), lr_(lr) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.numel(), 0.0);
    v_.emplace_back(p->value.numel(), 0.0);
    p->zero_grad();
  }
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
double Optimizer<T>::clip_global_norm(double max_norm) {
  double sq = 0;
  for (auto* p : params_)
    for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<T>(max_norm / norm);
    for (auto* p : params_)
      for (T& g : p->grad) g *= s;
  }
  return norm;
}

template <typename T>
void Optimizer<T>::step() {
  ++autodiff_counters().optimizer_steps;
  ++t_;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      if (kind_ == OptimizerKind::kSgd) {
        p.value.data[i] -= static_cast<T>(lr_ * g);
        continue;
      }
      m_[k][i] = b1 * m_[k][i] + (1 - b1) * g;
      v_[k][i] = b2 * v_[k][i] + (1 - b2) * g * g;
      p.value.data[i] -= static_cast<T>(lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps));
    }
  }
}

template <typename T>
TrainResult train_lm(Transformer<T>& model, const std::vector<Example>& data, const TrainConfig& cfg,
                     const std::vector<Parameter<T>*>& trainable, SlotAttachment<T>* attach) {
  cfg.validate();
  if (trainable.empty()) throw std::invalid_argument("train_lm: trainable set is empty");
  TrainResult result;
  const int steps = cfg.total_steps(data.size());
  if (steps == 0 || data.empty()) return result;

  auto model_params = model.parameters();
  std::set<Parameter<T>*> train_set(trainable.begin(), trainable.end());
  for (auto* p : model_params) p->trainable = train_set.contains(p);
  for (auto* p : trainable) p->trainable = true;

  Optimizer<T> opt(trainable, cfg.optimizer, cfg.lr);
  Rng rng(derive_seed(cfg.seed, "train-order"));
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  try {
    for (int step = 0; step < steps; ++step) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      std::vector<const Example*> batch;
      while (batch.size() < static_cast<std::size_t>(cfg.batch_size) && cursor < order.size())
        batch.push_back(&data[order[cursor++]]);
      const auto lm = make_lm_batch(batch);
      Tape<T> tape;
      Var logits = model.forward(tape, lm.tokens, attach);
      Var loss = tape.cross_entropy(logits, lm.targets, lm.mask);
      const double lv = tape.value(loss).data[0];
      if (!std::isfinite(lv)) throw NonFiniteError("loss is " + std::to_string(lv));
      result.losses.push_back(lv);
      opt.zero_grad();
      tape.backward(loss);
      opt.clip_global_norm(cfg.clip_norm);
      if (cfg.lr > 0) opt.step();
      ++result.steps;
    }
  } catch (const NonFiniteError& e) {
    for (auto* p : model_params) p->trainable = false;
    for (auto* p : trainable) p->trainable = false;
    throw TrainingError("training diverged at step " + std::to_string(result.steps) + ": " + e.what());
  }
  for (auto* p : model_params) p->trainable = false;
  for (auto* p : trainable) p->trainable = false;
  return result;
}

template <typename T>
double eval_loss(Transformer<T>& model, const std::vector<Example>& data, SlotAttachment<T>* attach, int batch_size) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const Example*> batch;
    for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      batch.push_back(&data[j]);
    const auto lm = make_lm_batch(batch);
    std::size_t n = 0;
    for (auto m : lm.mask) n += m;
    if (n == 0) continue;
    Tape<T> tape(false);
    Var loss = tape.cross_entropy(model.forward(tape, lm.tokens, attach), lm.targets, lm.mask);
    total += tape.value(loss).data[0] * static_cast<double>(n);
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

template class Optimizer<float>;
template class Optimizer<double>;
template TrainResult train_lm(Transformer<float>&, const std::vector<Example>&, const TrainConfig&,
                              const std::vector<Parameter<float>*>&, SlotAttachment<float>*);
template TrainResult train_lm(Transformer<double>&, const std::vector<Example>&, const TrainConfig&,
                              const std::vector<Parameter<double>*>&, SlotAttachment<double>*);
template double eval_loss(Transformer<float>&, const std::vector<Example>&, SlotAttachment<float>*, int);
template double eval_loss(Transformer<double>&, const std::vector<Example>&, SlotAttachment<double>*, int);

}  // namespace perpcs
