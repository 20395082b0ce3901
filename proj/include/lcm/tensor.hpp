#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lcm/common.hpp"

namespace lcm {

// Dense row-major tensor, rank 1..3. Rank-2 (tokens x channels) is the
// workhorse; rank-3 exists for (window, token, channel) staging buffers.
template <typename S>
struct TensorT {
  int rank = 0;
  std::array<int, 3> dim{1, 1, 1};
  std::vector<S> v;

  TensorT() = default;
  static TensorT zeros1(int a) { return shaped(1, a, 1, 1); }
  static TensorT zeros2(int a, int b) { return shaped(2, a, b, 1); }
  static TensorT zeros3(int a, int b, int c) { return shaped(3, a, b, c); }

  static TensorT shaped(int rank, int a, int b, int c) {
    TensorT t;
    t.rank = rank;
    t.dim = {a, b, c};
    if (a < 0 || b < 0 || c < 0) throw InvariantError("tensor: negative dim");
    t.v.assign(size_t(a) * size_t(b) * size_t(c), S(0));
    return t;
  }

  size_t numel() const { return v.size(); }
  int rows() const { return dim[0]; }
  int cols() const { return rank >= 2 ? dim[1] : 1; }

  S& at(int i, int j) { return v[size_t(i) * size_t(dim[1]) + size_t(j)]; }
  S at(int i, int j) const { return v[size_t(i) * size_t(dim[1]) + size_t(j)]; }
  S& at1(int i) { return v[size_t(i)]; }
  S at1(int i) const { return v[size_t(i)]; }

  bool same_shape(const TensorT& o) const {
    return rank == o.rank && dim == o.dim;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (int i = 0; i < rank; ++i) s += std::to_string(dim[i]) + (i + 1 < rank ? "," : "");
    return s + ")";
  }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> o;
    o.rank = rank;
    o.dim = dim;
    o.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) o.v[i] = T(v[i]);
    return o;
  }
};

using Tensor = TensorT<float>;

template <typename S>
bool all_finite(const TensorT<S>& t) {
  for (S x : t.v)
    if (!std::isfinite(double(x))) return false;
  return true;
}

}  // namespace lcm
