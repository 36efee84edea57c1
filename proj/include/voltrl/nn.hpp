#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace voltrl::nn {

using Rng = std::mt19937_64;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Backward pass against a tape recorded before the parameters last changed.
class StaleTapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Mlp;

/// Activations recorded by Mlp::forward, enough for exact reverse mode.
struct GradientTape {
  std::vector<Eigen::MatrixXd> activations;  // a_0 = input, ..., a_L = output
  const Mlp* owner = nullptr;
  std::uint64_t version = 0;
};

/// Feed-forward network: tanh on hidden layers, identity on the output layer.
///
/// Parameters live in one flat vector, layer by layer: the weight matrix
/// (out x in, column-major) followed by the bias. Inputs and outputs are
/// column-batched: an `in x batch` matrix maps to `out x batch`.
class Mlp {
 public:
  Mlp() = default;
  /// Zero-initialized network. `layer_sizes` includes input and output widths.
  explicit Mlp(std::vector<int> layer_sizes);

  /// Orthogonal weights, zero biases. Hidden layers use `hidden_gain`, the last layer `output_gain`.
  static Mlp orthogonal(std::vector<int> layer_sizes, double hidden_gain, double output_gain, Rng& rng);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  std::size_t num_layers() const { return sizes_.size() - 1; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }

  const Eigen::VectorXd& parameters() const { return params_; }
  /// Mutable access invalidates outstanding tapes.
  Eigen::VectorXd& mutable_parameters() {
    ++version_;
    return params_;
  }
  void set_parameters(const Eigen::VectorXd& params);
  std::uint64_t version() const { return version_; }

  Eigen::Map<const Eigen::MatrixXd> weight(std::size_t layer) const;
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const;
  Eigen::Map<Eigen::MatrixXd> mutable_weight(std::size_t layer);
  Eigen::Map<Eigen::VectorXd> mutable_bias(std::size_t layer);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& input) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& input, GradientTape& tape) const;

  /// Gradient of a loss w.r.t. the flat parameters given dLoss/dOutput.
  /// Optionally writes dLoss/dInput.
  Eigen::VectorXd backward(const GradientTape& tape, const Eigen::MatrixXd& output_grad,
                           Eigen::MatrixXd* input_grad = nullptr) const;

  friend bool operator==(const Mlp& a, const Mlp& b) {
    return a.sizes_ == b.sizes_ && a.params_.size() == b.params_.size() && a.params_ == b.params_;
  }

 private:
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + static_cast<std::size_t>(sizes_[layer]) * sizes_[layer + 1];
  }

  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  Eigen::VectorXd params_;
  std::uint64_t version_ = 0;
};

/// Σ (in·out + out) over layers.
std::size_t count_parameters(const std::vector<int>& layer_sizes);
inline std::size_t count_parameters(const Mlp& mlp) { return mlp.parameter_count(); }

/// rows x cols matrix with orthonormal rows (rows <= cols) or columns, scaled by `gain`.
Eigen::MatrixXd init_orthogonal(int rows, int cols, double gain, Rng& rng);

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t size, AdamConfig cfg)
      : config(cfg), m(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size))),
        v(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size))) {}
};

/// Bias-corrected Adam update in place.
void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads, AdamState& state);

// Checkpoint pieces. Doubles are written in shortest round-trip form, so
// save/load is bit-exact.
nlohmann::json to_json(const Mlp& mlp);
Mlp mlp_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AdamState& state);
AdamState adam_from_json(const nlohmann::json& j);
nlohmann::json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const nlohmann::json& j);

}  // namespace voltrl::nn
