#include "apaseg/losses.hpp"

#include <cmath>
#include <vector>

#include "apaseg/errors.hpp"
#include "apaseg/ops.hpp"

namespace apaseg {

namespace {

struct Layout {
  Index batch, classes, voxels;
};

template <typename T>
Layout check_pair(const Var<T>& probs, const Tensor<T>& onehot, const char* what) {
  require_rank(probs.shape(), 5, what);
  if (probs.shape() != onehot.shape()) {
    throw ContractError(std::string(what) + ": prediction " + shape_str(probs.shape()) +
                        " and target " + shape_str(onehot.shape()) + " differ");
  }
  const auto& s = probs.shape();
  return {s[0], s[1], s[2] * s[3] * s[4]};
}

}  // namespace

template <typename T>
Tensor<T> one_hot(const Tensor<std::uint8_t>& labels, Index num_classes) {
  Shape s = labels.shape();
  if (s.size() == 3) s.insert(s.begin(), 1);
  if (s.size() != 4) throw ContractError("one_hot: labels must have rank 3 or 4, got " + shape_str(s));
  const Index N = s[0], vol = s[1] * s[2] * s[3];
  Tensor<T> out({N, num_classes, s[1], s[2], s[3]}, T{0});
  for (Index n = 0; n < N; ++n)
    for (Index v = 0; v < vol; ++v) {
      const Index k = labels[n * vol + v];
      if (k >= num_classes) {
        throw ContractError("one_hot: label " + std::to_string(k) + " outside [0, " +
                            std::to_string(num_classes) + ")");
      }
      out[(n * num_classes + k) * vol + v] = T{1};
    }
  return out;
}

template <typename T>
Var<T> class_probabilities(const Var<T>& logits) {
  require_rank(logits.shape(), 5, "class_probabilities");
  return ops::softmax_channels(logits, logits.shape()[1]);
}

template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& onehot, const DiceOptions& opt) {
  const auto [N, K, vol] = check_pair(probs, onehot, "dice_loss");
  const Index first = opt.include_background ? 0 : 1;
  if (first >= K) throw ContractError("dice_loss: no classes selected");
  const Index count = K - first;

  std::vector<double> inter(K, 0.0), denom(K, 0.0);
  const auto& X = probs.value();
  for (Index n = 0; n < N; ++n)
    for (Index k = first; k < K; ++k) {
      const Index base = (n * K + k) * vol;
      for (Index v = 0; v < vol; ++v) {
        const double x = X[base + v], y = onehot[base + v];
        inter[k] += x * y;
        denom[k] += x + y;
      }
    }
  double ratio = 0.0;
  for (Index k = first; k < K; ++k) ratio += inter[k] / (denom[k] + opt.eps);
  const double loss = 1.0 - 2.0 / static_cast<double>(count) * ratio;

  return make_result<T>(
      Tensor<T>({1}, static_cast<T>(loss)), {probs},
      [=, onehot = onehot](Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        const double g = self.grad[0];
        auto& dx = in.grad_buffer();
        for (Index k = first; k < K; ++k) {
          const double d = denom[k] + opt.eps;
          const double a = -2.0 / static_cast<double>(count) / d;
          const double b = inter[k] / d;
          for (Index n = 0; n < N; ++n) {
            const Index base = (n * K + k) * vol;
            for (Index v = 0; v < vol; ++v) {
              dx[base + v] += static_cast<T>(g * a * (onehot[base + v] - b));
            }
          }
        }
      });
}

template <typename T>
Var<T> ce_loss(const Var<T>& probs, const Tensor<T>& onehot) {
  const auto [N, K, vol] = check_pair(probs, onehot, "ce_loss");
  const double M = static_cast<double>(N * vol);
  const auto& X = probs.value();
  double sum = 0.0;
  for (Index i = 0; i < X.numel(); ++i) {
    if (onehot[i] != T{0}) sum -= onehot[i] * std::log(std::max<double>(X[i], kProbFloor));
  }
  return make_result<T>(Tensor<T>({1}, static_cast<T>(sum / M)), {probs},
                        [M, onehot = onehot](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          if (!in.requires_grad) return;
                          const double g = self.grad[0];
                          auto& dx = in.grad_buffer();
                          for (Index i = 0; i < dx.numel(); ++i) {
                            const double x = in.value[i];
                            if (onehot[i] != T{0} && x > kProbFloor) {
                              dx[i] += static_cast<T>(-g * onehot[i] / (M * x));
                            }
                          }
                        });
}

template <typename T>
Var<T> total_loss(const Var<T>& probs, const Tensor<T>& onehot, const DiceOptions& opt) {
  return ops::add(dice_loss(probs, onehot, opt), ce_loss(probs, onehot));
}

#define APASEG_INSTANTIATE(T)                                                        \
  template Tensor<T> one_hot<T>(const Tensor<std::uint8_t>&, Index);                 \
  template Var<T> class_probabilities(const Var<T>&);                                \
  template Var<T> dice_loss(const Var<T>&, const Tensor<T>&, const DiceOptions&);    \
  template Var<T> ce_loss(const Var<T>&, const Tensor<T>&);                          \
  template Var<T> total_loss(const Var<T>&, const Tensor<T>&, const DiceOptions&);

APASEG_INSTANTIATE(float)
APASEG_INSTANTIATE(double)
#undef APASEG_INSTANTIATE

}  // namespace apaseg
