// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "graft/common.hpp"

namespace graft {

// dense row-major float32 tensor; rank 1 or 2 everywhere in this codebase
struct tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  tensor() = default;

  static tensor zeros(std::vector<std::size_t> shape_in) {
    tensor t;
    t.shape = std::move(shape_in);
    std::size_t n = 1;
    for (std::size_t s : t.shape) n *= s;
    t.data.assign(n, 0.0f);
    return t;
  }

  std::size_t numel() const { return data.size(); }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  bool is_vector() const { return shape.size() == 1; }
  bool is_matrix() const { return shape.size() == 2; }

  // invariant: callers index matrices as [row][col], vectors as [i]
  float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const tensor& other) const { return shape == other.shape; }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

// fills with gaussian noise, fixed draw order so results are seed-stable
inline void fill_gaussian(tensor& t, rng& gen, double sigma) {
  for (float& v : t.data) v = static_cast<float>(gen.next_gaussian() * sigma);
}

inline void fill_constant(tensor& t, float value) {
  for (float& v : t.data) v = value;
}

}  // namespace graft
