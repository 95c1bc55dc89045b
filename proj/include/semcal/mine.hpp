#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "semcal/binary_io.hpp"
#include "semcal/error.hpp"

namespace semcal {

/// Feed-forward critic F(x, y) over concatenated class vectors.
///
/// Layer sizes run input -> hidden... -> 1 with ReLU on hidden layers and a
/// linear output. All weights and biases live in one flat parameter vector,
/// layer by layer, weight (column-major, out x in) before bias; gradients use
/// the same layout.
class StatisticsNetwork {
 public:
  StatisticsNetwork(int num_classes, std::vector<int> hidden = {128, 128}, std::uint64_t seed = 0)
      : num_classes_(num_classes), seed_(seed) {
    SEMCAL_CHECK(num_classes > 0, ErrorCode::invalid_argument, "class count must be positive");
    sizes_.push_back(2 * num_classes);
    for (int h : hidden) {
      SEMCAL_CHECK(h > 0, ErrorCode::invalid_argument, "hidden layer width must be positive");
      sizes_.push_back(h);
    }
    sizes_.push_back(1);
    Eigen::Index total = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(total);
      total += static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1);
    }
    theta_.setZero(total);
    std::mt19937_64 rng(seed);
    for (int l = 0; l < num_layers(); ++l) {
      // uniform(+-1/sqrt(fan_in)) for weights and biases
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      auto w = weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
      auto b = bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = dist(rng);
    }
  }

  static StatisticsNetwork zeros(int num_classes, std::vector<int> hidden = {128, 128}) {
    StatisticsNetwork net(num_classes, std::move(hidden), 0);
    net.theta_.setZero();
    return net;
  }

  int num_classes() const { return num_classes_; }
  int input_size() const { return sizes_.front(); }
  int num_layers() const { return static_cast<int>(sizes_.size()) - 1; }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  std::uint64_t seed() const { return seed_; }
  Eigen::Index num_parameters() const { return theta_.size(); }

  const Eigen::VectorXd& parameters() const { return theta_; }
  Eigen::VectorXd& parameters() { return theta_; }

  Eigen::Map<const Eigen::MatrixXd> weight(int l) const {
    return {theta_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<Eigen::MatrixXd> weight(int l) { return {theta_.data() + offsets_[l], sizes_[l + 1], sizes_[l]}; }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const {
    return {theta_.data() + offsets_[l] + weight_size(l), sizes_[l + 1]};
  }
  Eigen::Map<Eigen::VectorXd> bias(int l) { return {theta_.data() + offsets_[l] + weight_size(l), sizes_[l + 1]}; }

  Eigen::Index layer_offset(int l) const { return offsets_[l]; }
  Eigen::Index weight_size(int l) const { return static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l]; }

 private:
  int num_classes_;
  std::uint64_t seed_;
  std::vector<int> sizes_;
  std::vector<Eigen::Index> offsets_;
  Eigen::VectorXd theta_;
};

/// Activations cached by a batched forward pass. activations[0] is the input
/// (one column per sample), activations[l] the post-ReLU output of hidden
/// layer l, and output the critic values.
struct CriticTape {
  std::vector<Eigen::MatrixXd> activations;
  Eigen::RowVectorXd output;
};

inline CriticTape critic_forward(const StatisticsNetwork& net, const Eigen::MatrixXd& inputs) {
  SEMCAL_CHECK(inputs.rows() == net.input_size(), ErrorCode::invalid_argument,
               "critic input has " + std::to_string(inputs.rows()) + " rows, expected " +
                   std::to_string(net.input_size()));
  CriticTape tape;
  tape.activations.reserve(net.num_layers());
  tape.activations.push_back(inputs);
  for (int l = 0; l < net.num_layers(); ++l) {
    Eigen::MatrixXd z = net.weight(l) * tape.activations.back();
    z.colwise() += net.bias(l);
    if (l + 1 < net.num_layers()) {
      tape.activations.push_back(z.cwiseMax(0.0));
    } else {
      tape.output = z.row(0);
    }
  }
  return tape;
}

inline double critic_forward(const StatisticsNetwork& net, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  SEMCAL_CHECK(x.size() == net.num_classes() && y.size() == net.num_classes(), ErrorCode::invalid_argument,
               "critic inputs must both have one entry per class");
  Eigen::MatrixXd in(net.input_size(), 1);
  in.col(0) << x, y;
  return critic_forward(net, in).output[0];
}

/// Reverse pass for sum_i seed_i * F(input_i). Accumulates into grad_theta;
/// writes d/d(input) into grad_input when it is non-null.
inline void critic_backward(const StatisticsNetwork& net, const CriticTape& tape, const Eigen::RowVectorXd& seed,
                            Eigen::VectorXd& grad_theta, Eigen::MatrixXd* grad_input = nullptr) {
  SEMCAL_CHECK(seed.size() == tape.output.size(), ErrorCode::invalid_argument, "seed length mismatch");
  if (grad_theta.size() != net.num_parameters()) grad_theta.setZero(net.num_parameters());
  Eigen::MatrixXd delta = seed;
  for (int l = net.num_layers() - 1; l >= 0; --l) {
    const Eigen::MatrixXd& a = tape.activations[l];
    Eigen::Map<Eigen::MatrixXd> gw(grad_theta.data() + net.layer_offset(l), net.layer_sizes()[l + 1],
                                   net.layer_sizes()[l]);
    Eigen::Map<Eigen::VectorXd> gb(grad_theta.data() + net.layer_offset(l) + net.weight_size(l),
                                   net.layer_sizes()[l + 1]);
    gw.noalias() += delta * a.transpose();
    gb += delta.rowwise().sum();
    if (l == 0 && grad_input == nullptr) break;
    Eigen::MatrixXd prev = net.weight(l).transpose() * delta;
    if (l > 0) {
      prev = prev.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
      delta = std::move(prev);
    } else {
      *grad_input = std::move(prev);
    }
  }
}

/// Paired class vectors, one column per sample.
struct SampleBatch {
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;

  Eigen::Index size() const { return x.cols(); }
  Eigen::MatrixXd stacked() const {
    Eigen::MatrixXd s(x.rows() + y.rows(), x.cols());
    s << x, y;
    return s;
  }
};

/// Product-of-marginals batch: same x columns, y columns shuffled.
template <class Rng>
SampleBatch shuffle_marginal(const SampleBatch& joint, Rng& rng) {
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(joint.size()));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  SampleBatch m;
  m.x = joint.x;
  m.y.resize(joint.y.rows(), joint.y.cols());
  for (Eigen::Index i = 0; i < joint.size(); ++i) m.y.col(i) = joint.y.col(perm[static_cast<std::size_t>(i)]);
  return m;
}

/// Donsker-Varadhan estimate in nats.
struct MiEstimate {
  double value = 0.0;
  double joint_mean = 0.0;
  double log_marginal_mean_exp = 0.0;
  Eigen::Index batch_size = 0;
};

namespace detail {

inline void check_batches(const StatisticsNetwork& net, const SampleBatch& joint, const SampleBatch& marginal) {
  SEMCAL_CHECK(joint.size() >= 2 && marginal.size() >= 2, ErrorCode::invalid_argument,
               "DV bound needs at least two samples per batch");
  SEMCAL_CHECK(joint.x.rows() == net.num_classes() && joint.y.rows() == net.num_classes() &&
                   marginal.x.rows() == net.num_classes() && marginal.y.rows() == net.num_classes() &&
                   joint.y.cols() == joint.x.cols() && marginal.y.cols() == marginal.x.cols(),
               ErrorCode::invalid_argument, "batch shape does not match the critic");
}

/// log(mean(exp(f))) with max-shift stabilisation.
inline double log_mean_exp(const Eigen::RowVectorXd& f) {
  const double m = f.maxCoeff();
  return m + std::log((f.array() - m).exp().sum()) - std::log(static_cast<double>(f.size()));
}

}  // namespace detail

inline MiEstimate dv_bound(const StatisticsNetwork& net, const SampleBatch& joint, const SampleBatch& marginal) {
  detail::check_batches(net, joint, marginal);
  const auto fj = critic_forward(net, joint.stacked()).output;
  const auto fm = critic_forward(net, marginal.stacked()).output;
  MiEstimate est;
  est.joint_mean = fj.mean();
  est.log_marginal_mean_exp = detail::log_mean_exp(fm);
  est.value = est.joint_mean - est.log_marginal_mean_exp;
  est.batch_size = joint.size();
  return est;
}

struct DvGradients {
  MiEstimate estimate;
  Eigen::VectorXd theta;    ///< d(value)/d(parameters)
  Eigen::MatrixXd joint_y;  ///< d(value)/d(joint.y), C x n
};

/// Exact reverse-mode gradients of dv_bound. The marginal batch is treated
/// as a constant with respect to its inputs: only joint.y receives an input
/// gradient.
inline DvGradients dv_pullback(const StatisticsNetwork& net, const SampleBatch& joint, const SampleBatch& marginal) {
  detail::check_batches(net, joint, marginal);
  const auto tj = critic_forward(net, joint.stacked());
  const auto tm = critic_forward(net, marginal.stacked());

  DvGradients g;
  g.estimate.joint_mean = tj.output.mean();
  g.estimate.log_marginal_mean_exp = detail::log_mean_exp(tm.output);
  g.estimate.value = g.estimate.joint_mean - g.estimate.log_marginal_mean_exp;
  g.estimate.batch_size = joint.size();

  const Eigen::RowVectorXd seed_j =
      Eigen::RowVectorXd::Constant(tj.output.size(), 1.0 / static_cast<double>(tj.output.size()));
  // d/dF_i of -log mean exp F is -softmax(F)_i.
  Eigen::RowVectorXd seed_m = (tm.output.array() - tm.output.maxCoeff()).exp();
  seed_m /= -seed_m.sum();

  g.theta.setZero(net.num_parameters());
  Eigen::MatrixXd grad_in;
  critic_backward(net, tj, seed_j, g.theta, &grad_in);
  critic_backward(net, tm, seed_m, g.theta, nullptr);
  g.joint_y = grad_in.bottomRows(net.num_classes());
  return g;
}

/// Adaptive-moment state for one parameter group, used for gradient ascent.
struct OptimizerState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  OptimizerState() = default;
  OptimizerState(Eigen::Index n, double lr) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)), learning_rate(lr) {}
};

/// One bias-corrected adaptive-moment ascent step. Returns false and leaves
/// everything untouched if the gradient has a non-finite entry; the caller
/// should abandon the iteration.
inline bool ascent_step(Eigen::Ref<Eigen::VectorXd> params, OptimizerState& opt, const Eigen::VectorXd& grad) {
  SEMCAL_CHECK(params.size() == grad.size() && opt.m.size() == grad.size(), ErrorCode::invalid_argument,
               "optimizer state does not match parameter count");
  if (!grad.allFinite()) return false;
  ++opt.step;
  opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad;
  opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  params.array() += opt.learning_rate * (opt.m.array() / c1) / ((opt.v.array() / c2).sqrt() + opt.epsilon);
  return true;
}

// Network file: "SEMCALNN" magic, uint32 LE header length, JSON header
// {"format", "num_classes", "layer_sizes", "seed", "num_parameters"}, then
// num_parameters float64 LE values in flat-parameter order.

inline void save_network(std::ostream& os, const StatisticsNetwork& net) {
  nlohmann::json header = {{"format", "semcal-critic-v1"},
                           {"num_classes", net.num_classes()},
                           {"layer_sizes", net.layer_sizes()},
                           {"seed", net.seed()},
                           {"num_parameters", net.num_parameters()}};
  const std::string text = header.dump();
  os.write("SEMCALNN", 8);
  binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (Eigen::Index i = 0; i < net.num_parameters(); ++i) binary::put<double>(os, net.parameters()[i]);
  SEMCAL_CHECK(os.good(), ErrorCode::io, "failed writing critic parameters");
}

inline StatisticsNetwork load_network(std::istream& is) {
  char magic[8] = {};
  is.read(magic, 8);
  SEMCAL_CHECK(is.gcount() == 8 && std::string(magic, 8) == "SEMCALNN", ErrorCode::io, "not a critic file");
  const auto len = binary::get<std::uint32_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  SEMCAL_CHECK(is.gcount() == static_cast<std::streamsize>(len), ErrorCode::io, "truncated critic header");
  const auto header = nlohmann::json::parse(text);
  const auto sizes = header.at("layer_sizes").get<std::vector<int>>();
  SEMCAL_CHECK(sizes.size() >= 2 && sizes.back() == 1, ErrorCode::io, "bad critic topology");
  StatisticsNetwork net(header.at("num_classes").get<int>(), std::vector<int>(sizes.begin() + 1, sizes.end() - 1),
                        header.at("seed").get<std::uint64_t>());
  SEMCAL_CHECK(net.layer_sizes() == sizes, ErrorCode::io, "critic topology does not match class count");
  SEMCAL_CHECK(header.at("num_parameters").get<Eigen::Index>() == net.num_parameters(), ErrorCode::io,
               "critic parameter count mismatch");
  for (Eigen::Index i = 0; i < net.num_parameters(); ++i) net.parameters()[i] = binary::get<double>(is);
  return net;
}

}  // namespace semcal
