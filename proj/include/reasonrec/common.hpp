#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace reasonrec {

using TokenId = std::int32_t;
using ItemId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using VecMap = Eigen::Map<Vec<T>>;
template <class T>
using ConstVecMap = Eigen::Map<const Vec<T>>;

// Rejected configuration or argument. The CLI maps this to exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContextOverflowError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class TokenizerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training produced NaN/Inf. `state` carries a JSON dump for diagnosis.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, std::string state)
      : std::runtime_error(what), state_(std::move(state)) {}
  const std::string& state() const { return state_; }

 private:
  std::string state_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// A named random stream. Children are derived by hashing, so the stream a
// consumer sees depends only on its path (seed, tags...) and never on how
// many draws other consumers made.
class Stream {
 public:
  explicit Stream(std::uint64_t key = 0) : key_(key) {}

  Stream child(std::uint64_t tag) const {
    return Stream(splitmix64(key_ ^ splitmix64(tag + 0x632be59bd9b4e019ULL)));
  }
  template <class... Tags>
  Stream child(std::uint64_t tag, Tags... rest) const {
    return child(tag).child(static_cast<std::uint64_t>(rest)...);
  }

  std::mt19937_64 engine() const { return std::mt19937_64(splitmix64(key_)); }
  std::uint64_t key() const { return key_; }

  bool operator==(const Stream&) const = default;

 private:
  std::uint64_t key_;
};

// Stable tags for the top-level streams.
enum class StreamTag : std::uint64_t {
  kWorld = 1,
  kInit = 2,
  kEpoch = 3,
  kTrajectory = 4,
  kLatency = 5,
  kInspect = 6,
};

inline Stream root_stream(std::uint64_t seed, StreamTag tag) {
  return Stream(seed).child(static_cast<std::uint64_t>(tag));
}

// Runs fn(i) for i in [0, n). Work items must write to disjoint outputs; the
// result is then independent of the thread count.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline int default_thread_count() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace reasonrec
