#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "pfeed/autodiff.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("pfeed-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

using DTensor = pfeed::ad::Tensor<double>;

inline DTensor random_tensor(pfeed::ad::Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(pfeed::ad::numel_of(shape));
  for (auto& x : v) x = u(rng);
  return DTensor::from(std::move(shape), std::move(v), true);
}

/// Largest ||analytic - numeric|| / max(||analytic||, ||numeric||) over the
/// inputs, with central differences of step 1e-5.
inline double fd_relative_error(const std::function<DTensor()>& f, std::vector<DTensor> inputs) {
  for (auto& x : inputs) x.zero_grad();
  f().backward();
  double worst = 0;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto v = x.mutable_data();
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      pfeed::ad::NoGradGuard guard;
      v[i] = keep + 1e-5;
      const double up = f().item();
      v[i] = keep - 1e-5;
      const double down = f().item();
      v[i] = keep;
      const double num = (up - down) / 2e-5;
      diff += (num - analytic[i]) * (num - analytic[i]);
      na += analytic[i] * analytic[i];
      nn += num * num;
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nn));
    if (denom > 1e-12) worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

}  // namespace testing
