#include "voltrl/nn.hpp"

#include <cmath>
#include <string>

namespace voltrl::nn {

namespace {

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace

std::size_t count_parameters(const std::vector<int>& sizes) {
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    total += static_cast<std::size_t>(sizes[l]) * sizes[l + 1] + sizes[l + 1];
  }
  return total;
}

Mlp::Mlp(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
  if (sizes_.size() < 2) throw ShapeError("an MLP needs at least input and output sizes");
  for (int s : sizes_) {
    if (s <= 0) throw ShapeError("layer sizes must be positive");
  }
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(offset);
    offset += static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1] + sizes_[l + 1];
  }
  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
}

Mlp Mlp::orthogonal(std::vector<int> layer_sizes, double hidden_gain, double output_gain, Rng& rng) {
  Mlp mlp(std::move(layer_sizes));
  for (std::size_t l = 0; l < mlp.num_layers(); ++l) {
    const double gain = l + 1 == mlp.num_layers() ? output_gain : hidden_gain;
    mlp.mutable_weight(l) = init_orthogonal(mlp.sizes_[l + 1], mlp.sizes_[l], gain, rng);
  }
  return mlp;
}

void Mlp::set_parameters(const Eigen::VectorXd& params) {
  if (params.size() != params_.size()) {
    throw ShapeError("parameter vector has " + std::to_string(params.size()) + " entries, expected " +
                     std::to_string(params_.size()));
  }
  mutable_parameters() = params;
}

Eigen::Map<const Eigen::MatrixXd> Mlp::weight(std::size_t layer) const {
  return {params_.data() + weight_offset(layer), sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<const Eigen::VectorXd> Mlp::bias(std::size_t layer) const {
  return {params_.data() + bias_offset(layer), sizes_[layer + 1]};
}

Eigen::Map<Eigen::MatrixXd> Mlp::mutable_weight(std::size_t layer) {
  ++version_;
  return {params_.data() + weight_offset(layer), sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<Eigen::VectorXd> Mlp::mutable_bias(std::size_t layer) {
  ++version_;
  return {params_.data() + bias_offset(layer), sizes_[layer + 1]};
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& input) const {
  if (input.rows() != input_size()) {
    throw ShapeError("MLP input is " + shape_str(input.rows(), input.cols()) + ", expected " +
                     std::to_string(input_size()) + " rows");
  }
  Eigen::MatrixXd a = input;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Eigen::MatrixXd z = weight(l) * a;
    z.colwise() += bias(l);
    if (l + 1 < num_layers()) z = z.array().tanh().matrix();
    a = std::move(z);
  }
  return a;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& input, GradientTape& tape) const {
  if (input.rows() != input_size()) {
    throw ShapeError("MLP input is " + shape_str(input.rows(), input.cols()) + ", expected " +
                     std::to_string(input_size()) + " rows");
  }
  tape.owner = this;
  tape.version = version_;
  tape.activations.resize(num_layers() + 1);
  tape.activations[0] = input;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Eigen::MatrixXd z = weight(l) * tape.activations[l];
    z.colwise() += bias(l);
    if (l + 1 < num_layers()) z = z.array().tanh().matrix();
    tape.activations[l + 1] = std::move(z);
  }
  return tape.activations.back();
}

Eigen::VectorXd Mlp::backward(const GradientTape& tape, const Eigen::MatrixXd& output_grad,
                              Eigen::MatrixXd* input_grad) const {
  if (tape.owner != this || tape.version != version_ || tape.activations.size() != num_layers() + 1) {
    throw StaleTapeError("gradient tape does not match the network's current parameters");
  }
  const auto batch = tape.activations[0].cols();
  if (output_grad.rows() != output_size() || output_grad.cols() != batch) {
    throw ShapeError("output gradient is " + shape_str(output_grad.rows(), output_grad.cols()) + ", expected " +
                     shape_str(output_size(), batch));
  }
  Eigen::VectorXd grads = Eigen::VectorXd::Zero(params_.size());
  Eigen::MatrixXd g = output_grad;
  for (std::size_t l = num_layers(); l-- > 0;) {
    const auto& a = tape.activations[l];
    Eigen::Map<Eigen::MatrixXd>(grads.data() + weight_offset(l), sizes_[l + 1], sizes_[l]).noalias() =
        g * a.transpose();
    Eigen::Map<Eigen::VectorXd>(grads.data() + bias_offset(l), sizes_[l + 1]) = g.rowwise().sum();
    if (l == 0 && input_grad == nullptr) break;
    Eigen::MatrixXd upstream = weight(l).transpose() * g;
    if (l > 0) upstream.array() *= 1.0 - a.array().square();
    g = std::move(upstream);
  }
  if (input_grad != nullptr) *input_grad = std::move(g);
  return grads;
}

Eigen::MatrixXd init_orthogonal(int rows, int cols, double gain, Rng& rng) {
  if (rows <= 0 || cols <= 0) throw ShapeError("orthogonal init needs a positive shape");
  const bool wide = rows < cols;
  const int tall_rows = wide ? cols : rows;
  const int tall_cols = wide ? rows : cols;
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(tall_rows, tall_cols);
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, c) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall_rows, tall_cols);
  // Fix the sign ambiguity of QR so the draw is uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(tall_cols).triangularView<Eigen::Upper>();
  for (int c = 0; c < tall_cols; ++c) {
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  }
  q *= gain;
  if (wide) return q.transpose();
  return q;
}

void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adam_step: parameters (" + std::to_string(params.size()) + "), gradients (" +
                     std::to_string(grads.size()) + ") and moments (" + std::to_string(state.m.size()) +
                     ") disagree");
  }
  const auto& c = state.config;
  ++state.step;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * grads.cwiseProduct(grads);
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  params.array() -= c.learning_rate * (state.m.array() / bias1) / ((state.v.array() / bias2).sqrt() + c.epsilon);
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

nlohmann::json to_json(const Mlp& mlp) {
  return {{"sizes", mlp.sizes()}, {"parameters", vector_to_json(mlp.parameters())}};
}

Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp mlp(j.at("sizes").get<std::vector<int>>());
  mlp.set_parameters(vector_from_json(j.at("parameters")));
  return mlp;
}

nlohmann::json to_json(const AdamState& s) {
  return {{"learning_rate", s.config.learning_rate},
          {"beta1", s.config.beta1},
          {"beta2", s.config.beta2},
          {"epsilon", s.config.epsilon},
          {"step", s.step},
          {"m", vector_to_json(s.m)},
          {"v", vector_to_json(s.v)}};
}

AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.config.learning_rate = j.at("learning_rate").get<double>();
  s.config.beta1 = j.at("beta1").get<double>();
  s.config.beta2 = j.at("beta2").get<double>();
  s.config.epsilon = j.at("epsilon").get<double>();
  s.step = j.at("step").get<std::int64_t>();
  s.m = vector_from_json(j.at("m"));
  s.v = vector_from_json(j.at("v"));
  if (s.m.size() != s.v.size()) throw ShapeError("adam moments have mismatched sizes");
  return s;
}

}  // namespace voltrl::nn
