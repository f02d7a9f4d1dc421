#include "core/attention.hpp"

#include <algorithm>

namespace lfsum {

AttentionPattern::AttentionPattern(int n, int w, std::vector<int> globals)
    : n_(n), w_(w), globals_(std::move(globals)) {
  if (n < 1) fail(ErrorCode::invalid_argument, "pattern: n must be >= 1, got " + std::to_string(n));
  if (w < 0) fail(ErrorCode::invalid_argument, "pattern: window must be >= 0, got " + std::to_string(w));
  std::sort(globals_.begin(), globals_.end());
  globals_.erase(std::unique(globals_.begin(), globals_.end()), globals_.end());
  for (int g : globals_)
    if (g < 0 || g >= n)
      fail(ErrorCode::invalid_argument, "pattern: global index " + std::to_string(g) +
                                            " outside [0, " + std::to_string(n) + ")");
  global_mask_.assign(n, 0);
  for (int g : globals_) global_mask_[g] = 1;

  offsets_.assign(n + 1, 0);
  for (int i = 0; i < n; ++i) {
    long long count;
    if (global_mask_[i]) {
      count = n;
    } else {
      const int lo = std::max(0, i - w_);
      const int hi = std::min(n - 1, i + w_);
      count = hi - lo + 1;
      for (int g : globals_)
        if (g < lo || g > hi) ++count;
    }
    offsets_[i + 1] = offsets_[i] + count;
  }
  cols_.resize(offsets_[n]);
  for (int i = 0; i < n; ++i) {
    int* dst = cols_.data() + offsets_[i];
    if (global_mask_[i]) {
      for (int j = 0; j < n; ++j) *dst++ = j;
    } else {
      const int lo = std::max(0, i - w_);
      const int hi = std::min(n - 1, i + w_);
      // merge the window [lo, hi] with the sorted global list
      size_t g = 0;
      while (g < globals_.size() && globals_[g] < lo) *dst++ = globals_[g++];
      for (int j = lo; j <= hi; ++j) *dst++ = j;
      while (g < globals_.size() && globals_[g] <= hi) ++g;
      while (g < globals_.size()) *dst++ = globals_[g++];
    }
  }
}

BoolMat AttentionPattern::to_mask() const {
  BoolMat m(n_, n_, false);
  for (int i = 0; i < n_; ++i)
    for (int j : neighbors(i)) m.at(i, j) = 1;
  return m;
}

std::string AttentionPattern::debug_grid() const {
  std::string out;
  out.reserve(static_cast<size_t>(n_) * (n_ + 1));
  for (int i = 0; i < n_; ++i) {
    size_t line_start = out.size();
    out.append(n_, '.');
    for (int j : neighbors(i)) out[line_start + j] = '#';
    out += '\n';
  }
  return out;
}

PatternPtr build_pattern(int n, int w, std::vector<int> globals) {
  return std::make_shared<const AttentionPattern>(n, w, std::move(globals));
}

AttentionStats& AttentionStats::local() {
  thread_local AttentionStats stats;
  return stats;
}

}  // namespace lfsum
