#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dks {

/// Configuration mistakes: bad shapes, invalid specs, malformed configs.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// API misuse (e.g. backward on a non-scalar).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad data content (e.g. label out of range).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File-level problems: missing files, corrupt manifests, short reads.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training diverged; carries the offending location.
struct TrainingAbort : std::runtime_error {
  int epoch;
  int batch;
  TrainingAbort(int epoch_, int batch_, const std::string& what_)
      : std::runtime_error(what_), epoch(epoch_), batch(batch_) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// splitmix64 finalizer; used to derive independent sub-seeds from
/// (seed, stream tag) pairs so that e.g. shuffling and init never share
/// a stream.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace seed_tag {
constexpr uint64_t init = 1;
constexpr uint64_t shuffle = 2;
constexpr uint64_t corrupt = 3;
constexpr uint64_t synthetic = 4;
constexpr uint64_t dropout = 5;
constexpr uint64_t augment = 6;
constexpr uint64_t verify = 7;
}  // namespace seed_tag

}  // namespace dks
