// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "mtel/autograd.hpp"
#include "mtel/nn.hpp"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace mtel::testing {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix random_probs(Index rows, Index cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.02, 0.98);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Matrix random_binary(Index rows, Index cols, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution b(p);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = b(rng) ? 1.0 : 0.0;
  return m;
}

// Largest relative error between analytic and central-difference gradients
// of `loss` with respect to each matrix in `inputs`. `loss` must rebuild its
// graph from the current input values every call.
struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

inline GradCheck check_gradients(std::vector<Matrix*> inputs,
                                 const std::function<ag::Var(const std::vector<ag::Var>&)>& loss,
                                 double step = 1e-5, double floor = 1e-5) {
  std::vector<Matrix> grads(inputs.size());
  {
    std::vector<ag::Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      grads[i] = Matrix::Zero(inputs[i]->rows(), inputs[i]->cols());
      vars.push_back(ag::parameter(*inputs[i], grads[i]));
    }
    ag::backward(loss(vars));
  }
  auto eval = [&] {
    ag::NoGradGuard guard;
    std::vector<ag::Var> vars;
    for (Matrix* m : inputs) vars.push_back(ag::constant(*m));
    return loss(vars).item();
  };
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix& m = *inputs[i];
    for (Index k = 0; k < m.size(); ++k) {
      const double orig = m.data()[k];
      m.data()[k] = orig + step;
      const double up = eval();
      m.data()[k] = orig - step;
      const double down = eval();
      m.data()[k] = orig;
      const double numeric = (up - down) / (2 * step);
      const double analytic = grads[i].data()[k];
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
      out.max_rel_error = std::max(out.max_rel_error, rel);
      out.max_abs_grad = std::max(out.max_abs_grad, std::abs(analytic));
    }
  }
  return out;
}

// Gradient check over every parameter of a store; `loss` builds the graph
// from the store's current values.
inline GradCheck check_parameter_gradients(nn::ParameterStore& store, const std::function<ag::Var()>& loss,
                                           double step = 1e-5, double floor = 1e-5) {
  store.zero_grad();
  ag::backward(loss());
  std::vector<Matrix> grads;
  for (auto& p : store.params())
    grads.push_back(p->grad.size() ? p->grad : Matrix::Zero(p->value.rows(), p->value.cols()));
  auto eval = [&] {
    ag::NoGradGuard guard;
    return loss().item();
  };
  GradCheck out;
  std::size_t idx = 0;
  for (auto& p : store.params()) {
    Matrix& m = p->value;
    for (Index k = 0; k < m.size(); ++k) {
      const double orig = m.data()[k];
      m.data()[k] = orig + step;
      const double up = eval();
      m.data()[k] = orig - step;
      const double down = eval();
      m.data()[k] = orig;
      const double numeric = (up - down) / (2 * step);
      const double analytic = grads[idx].data()[k];
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
      out.max_rel_error = std::max(out.max_rel_error, rel);
      out.max_abs_grad = std::max(out.max_abs_grad, std::abs(analytic));
    }
    ++idx;
  }
  store.zero_grad();
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mtel_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mtel::testing
