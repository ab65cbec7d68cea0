#pragma once

// Line-by-line transcription of the representative patch selection, kept on
// plain nested vectors so it shares no code with the library.

#include <cstddef>
#include <vector>

namespace oracle {

template <typename T>
using Matrix = std::vector<std::vector<T>>;

template <typename T>
struct Alg1Output {
  std::vector<std::size_t> indices;
  Matrix<T> rows;
};

// Repeatedly takes the largest remaining score; a strict comparison keeps the
// lowest index among equals.
template <typename T>
std::vector<std::size_t> topk(const std::vector<T>& s, std::size_t k) {
  std::vector<bool> taken(s.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < k; ++r) {
    std::size_t best = s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!taken[i] && (best == s.size() || s[i] > s[best])) best = i;
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

template <typename T>
std::vector<T> similarity(const std::vector<T>& c, const Matrix<T>& x) {
  std::vector<T> s;
  for (const auto& row : x) {
    T acc = 0;
    for (std::size_t j = 0; j < c.size(); ++j) acc += c[j] * row[j];
    s.push_back(acc);
  }
  return s;
}

// xc is [N][P][d].
template <typename T>
Alg1Output<T> algorithm1(const std::vector<Matrix<T>>& xc, std::size_t K, std::size_t T_steps) {
  Matrix<T> x;
  for (const auto& patch : xc) {
    std::vector<T> m = patch[0];
    for (const auto& pixel : patch)
      for (std::size_t j = 0; j < m.size(); ++j)
        if (pixel[j] > m[j]) m[j] = pixel[j];
    x.push_back(m);
  }
  std::vector<T> c = x[0];
  for (const auto& row : x)
    for (std::size_t j = 0; j < c.size(); ++j)
      if (row[j] > c[j]) c[j] = row[j];

  std::vector<std::size_t> ti = topk(similarity(c, x), K);
  for (std::size_t t = 0; t < T_steps; ++t) {
    // The mean is a set operation; members are summed in row order.
    std::vector<bool> member(x.size(), false);
    for (std::size_t i : ti) member[i] = true;
    std::vector<T> sum(c.size(), T(0));
    for (std::size_t i = 0; i < x.size(); ++i)
      if (member[i])
        for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += x[i][j];
    for (std::size_t j = 0; j < c.size(); ++j) c[j] = sum[j] / T(K);
    ti = topk(similarity(c, x), K);
  }
  Alg1Output<T> out{ti, {}};
  for (std::size_t i : ti) out.rows.push_back(x[i]);
  return out;
}

}  // namespace oracle
