#pragma once

#include <cstdint>

#include "apaseg/autograd.hpp"

namespace apaseg {

inline constexpr double kDiceEps = 1e-6;
inline constexpr double kProbFloor = 1e-12;

struct DiceOptions {
  bool include_background = false;
  double eps = kDiceEps;
};

/// Labels (N, H, W, D) or (H, W, D) -> one-hot (N, K, H, W, D).
/// Throws ContractError for labels outside [0, K).
template <typename T>
Tensor<T> one_hot(const Tensor<std::uint8_t>& labels, Index num_classes);

/// Per-voxel softmax over the class axis of (N, K, H, W, D) logits.
template <typename T>
Var<T> class_probabilities(const Var<T>& logits);

/// 1 - (2/|S|) sum_j I_j / (P_j + G_j + eps) with sums over batch and voxels;
/// S is the foreground classes unless include_background is set.
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& onehot, const DiceOptions& opt = {});

/// Mean over voxels of -sum_j y_j log(max(p_j, 1e-12)).
template <typename T>
Var<T> ce_loss(const Var<T>& probs, const Tensor<T>& onehot);

template <typename T>
Var<T> total_loss(const Var<T>& probs, const Tensor<T>& onehot, const DiceOptions& opt = {});

}  // namespace apaseg
