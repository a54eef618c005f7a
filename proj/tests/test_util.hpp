#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "comal/ndgrad/ops.hpp"
#include "comal/ndgrad/random.hpp"
#include "comal/ndgrad/tensor.hpp"

namespace testutil {

using comal::Rng;
using comal::nd::Shape;
using comal::nd::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = false,
                            double scale = 2.0) {
  std::vector<double> v(comal::nd::numel_of(shape));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from(shape, std::move(v), requires_grad);
}

/// Random point on the probability simplex along the last axis, bounded away from 0.
inline Tensor random_simplex(const Shape& shape, Rng& rng) {
  std::vector<double> v(comal::nd::numel_of(shape));
  const std::size_t C = shape.back();
  for (std::size_t i = 0; i < v.size(); i += C) {
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) total += v[i + c] = rng.uniform(0.05, 1.0);
    for (std::size_t c = 0; c < C; ++c) v[i + c] /= total;
  }
  return Tensor::from(shape, std::move(v));
}

/// Scalar reduction with fixed pseudo-random weights so that every output
/// entry influences the gradient differently.
inline Tensor weighted_sum(const Tensor& t) {
  Rng rng(0x5eed);
  return comal::nd::sum(t * random_tensor(t.shape(), rng, false, 1.0));
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("comal_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

struct PrimitiveCase {
  std::string name;
  Shape shape;
  std::function<Tensor(const Tensor&)> fn;
};

/// One differentiable probe per registered primitive. Inputs are drawn in
/// [-2, 2]; functions with restricted domains map them first.
inline std::vector<PrimitiveCase> primitive_cases() {
  namespace nd = comal::nd;
  Rng rng(0xc0ffee);
  const Tensor b23 = random_tensor({2, 3}, rng);
  const Tensor row3 = random_tensor({3}, rng);
  const Tensor m34 = random_tensor({3, 4}, rng);
  const Tensor cw = random_tensor({2, 2, 3, 3}, rng, false, 0.5);
  const Tensor cb = random_tensor({2}, rng);
  const Tensor kk = random_tensor({1, 4, 4}, rng);
  const Tensor vv = random_tensor({1, 4, 4}, rng);
  nd::AttentionGate gate{4, {std::vector<std::uint8_t>(16, 1)}};
  gate.allowed[0][0 * 4 + 2] = 0;
  gate.allowed[0][3 * 4 + 1] = 0;
  auto positive = [](const Tensor& x) { return x * x + 0.5; };
  return {
      {"add", {2, 3}, [=](const Tensor& x) { return weighted_sum(x + row3); }},
      {"sub", {2, 3}, [=](const Tensor& x) { return weighted_sum(b23 - x); }},
      {"mul", {2, 3}, [=](const Tensor& x) { return weighted_sum(x * b23 * x); }},
      {"div", {2, 3}, [=](const Tensor& x) { return weighted_sum(b23 / positive(x)); }},
      {"neg", {4}, [](const Tensor& x) { return weighted_sum(-x); }},
      {"add_scalar", {4}, [](const Tensor& x) { return weighted_sum((x + 1.5) * x); }},
      {"mul_scalar", {4}, [](const Tensor& x) { return weighted_sum(x * -2.5); }},
      {"exp", {2, 3}, [](const Tensor& x) { return weighted_sum(nd::exp(x)); }},
      {"log", {2, 3}, [=](const Tensor& x) { return weighted_sum(nd::log(positive(x))); }},
      {"tanh", {2, 3}, [](const Tensor& x) { return weighted_sum(nd::tanh(x)); }},
      {"pow", {2, 3}, [=](const Tensor& x) { return weighted_sum(nd::pow(positive(x), 1.7)); }},
      {"matmul", {2, 3}, [=](const Tensor& x) { return weighted_sum(nd::matmul(x, m34)); }},
      {"conv2d", {1, 2, 4, 4}, [=](const Tensor& x) { return weighted_sum(nd::conv2d(x, cw, cb, 1)); }},
      {"sum", {2, 3}, [](const Tensor& x) { return weighted_sum(nd::sum(x * x, 1)); }},
      {"mean", {2, 3}, [](const Tensor& x) { return weighted_sum(nd::mean(x * x, 0)); }},
      {"max", {2, 5}, [](const Tensor& x) { return weighted_sum(nd::max(x, 1)); }},
      {"reshape", {2, 3}, [](const Tensor& x) { return weighted_sum(nd::reshape(x * x, {3, 2})); }},
      {"permute", {2, 3, 2}, [](const Tensor& x) { return weighted_sum(nd::permute(x, {2, 0, 1}) * 1.0); }},
      {"transpose", {2, 3}, [=](const Tensor& x) { return weighted_sum(nd::matmul(nd::transpose(x), b23)); }},
      {"slice", {4, 3}, [](const Tensor& x) { return weighted_sum(nd::slice(x * x, 0, 1, 3)); }},
      {"concat", {2, 3}, [=](const Tensor& x) { return weighted_sum(nd::concat({x * x, b23, x}, 0)); }},
      {"index_select", {4, 2}, [](const Tensor& x) { return weighted_sum(nd::index_select(x * x, 0, {3, 0, 3})); }},
      {"gather", {3, 4}, [](const Tensor& x) { return weighted_sum(nd::gather(x * x, {1, 3, 1})); }},
      {"softmax", {2, 4}, [](const Tensor& x) { return weighted_sum(nd::softmax(x, 1)); }},
      {"log_softmax", {2, 4}, [](const Tensor& x) { return weighted_sum(nd::log_softmax(x, 0)); }},
      {"gated_attention", {1, 4, 4},
       [=](const Tensor& x) { return weighted_sum(nd::gated_attention(x, kk + x, vv * x, 2, gate)); }},
  };
}

}  // namespace testutil
