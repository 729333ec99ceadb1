#pragma once

// Brute-force scan written without any of the library's scan helpers: a
// plain double loop over (layer, kind, row) in long double, sorted with a
// tuple comparator.

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>
#include <vector>

#include "tars/model.hpp"

namespace tars::testing {

struct OracleHit {
  int layer;
  int kind;  // 0 gate, 1 up
  int row;
  double score;
};

inline std::vector<OracleHit> brute_force_scan(const ModelWeights& w, std::span<const float> v) {
  std::vector<OracleHit> out;
  long double vv = 0;
  for (float x : v) vv += static_cast<long double>(x) * x;
  for (int l = 0; l < static_cast<int>(w.layers.size()); ++l) {
    for (int kind = 0; kind < 2; ++kind) {
      const Matrix& m = kind == 0 ? w.layers[l].ffn_gate : w.layers[l].ffn_up;
      for (int r = 0; r < static_cast<int>(m.rows()); ++r) {
        long double dotp = 0, rr = 0;
        for (std::size_t c = 0; c < m.cols(); ++c) {
          dotp += static_cast<long double>(m(r, c)) * v[c];
          rr += static_cast<long double>(m(r, c)) * m(r, c);
        }
        double s = rr == 0 ? -std::numeric_limits<double>::infinity()
                           : static_cast<double>(dotp / (std::sqrt(rr) * std::sqrt(vv)));
        if (s > 1) s = 1;
        if (s < -1 && rr != 0) s = -1;
        out.push_back({l, kind, r, s});
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const OracleHit& a, const OracleHit& b) {
    return std::make_tuple(-a.score, a.layer, a.kind, a.row) <
           std::make_tuple(-b.score, b.layer, b.kind, b.row);
  });
  return out;
}

}  // namespace tars::testing
