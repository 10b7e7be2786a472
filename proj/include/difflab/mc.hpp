// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "difflab/rng.hpp"

namespace difflab {

/// Monte-Carlo mean with its standard error.
struct Estimate {
  double value = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// Standard error of a difference of two independent estimates.
inline double joint_se(double a, double b) { return std::sqrt(a * a + b * b); }
inline double joint_se(double a, double b, double c) { return std::sqrt(a * a + b * b + c * c); }

/// Streaming mean/variance (Welford), mergeable with Chan's update.
class RunningStats {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }

  void merge(const RunningStats& other) {
    if (other.n_ == 0) return;
    if (n_ == 0) {
      *this = other;
      return;
    }
    const double n = static_cast<double>(n_ + other.n_);
    const double delta = other.mean_ - mean_;
    mean_ += delta * static_cast<double>(other.n_) / n;
    m2_ += other.m2_ + delta * delta * static_cast<double>(n_) * static_cast<double>(other.n_) / n;
    n_ += other.n_;
  }

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double se() const { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }
  Estimate estimate() const { return {mean_, se(), n_}; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

/// Vector of RunningStats sharing one draw index, e.g. one curve per draw.
class RunningStatsVec {
 public:
  RunningStatsVec() = default;
  explicit RunningStatsVec(std::size_t size) : stats_(size) {}
  void add(std::size_t i, double x) { stats_[i].add(x); }
  void merge(const RunningStatsVec& other) {
    for (std::size_t i = 0; i < stats_.size(); ++i) stats_[i].merge(other.stats_[i]);
  }
  std::size_t size() const { return stats_.size(); }
  const RunningStats& operator[](std::size_t i) const { return stats_[i]; }

 private:
  std::vector<RunningStats> stats_;
};

/// Monte-Carlo plan: draw j uses Stream(seed, tag, j).
///
/// Shards are fixed-size blocks of draw indices merged in index order, so the
/// result does not depend on the number of workers.
struct McPlan {
  std::uint64_t seed = 0;
  std::string tag = "mc";
  std::size_t n = 1000;
  unsigned workers = 1;
  std::size_t shard_size = 4096;

  McPlan with_tag(std::string t) const {
    McPlan p = *this;
    p.tag = std::move(t);
    return p;
  }
  McPlan with_n(std::size_t count) const {
    McPlan p = *this;
    p.n = count;
    return p;
  }
  McPlan with_seed(std::uint64_t s) const {
    McPlan p = *this;
    p.seed = s;
    return p;
  }
};

/// Runs `body(acc, j, stream)` for every draw j of the plan.
///
/// `make_acc()` builds an empty accumulator; accumulators expose `merge`.
template <class MakeAcc, class Body>
auto run_sharded(const McPlan& plan, MakeAcc make_acc, Body body) {
  using Acc = decltype(make_acc());
  const std::size_t shard = std::max<std::size_t>(plan.shard_size, 1);
  const std::size_t n_shards = (plan.n + shard - 1) / shard;
  std::vector<Acc> partial;
  partial.reserve(n_shards);
  for (std::size_t s = 0; s < n_shards; ++s) partial.push_back(make_acc());

  auto run_shard = [&](std::size_t s) {
    const std::size_t begin = s * shard;
    const std::size_t end = std::min(plan.n, begin + shard);
    for (std::size_t j = begin; j < end; ++j) {
      Stream stream(plan.seed, plan.tag, j);
      body(partial[s], j, stream);
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(plan.workers, static_cast<unsigned>(n_shards)));
  if (workers <= 1) {
    for (std::size_t s = 0; s < n_shards; ++s) run_shard(s);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t s = w; s < n_shards; s += workers) run_shard(s);
      });
    }
    for (auto& t : pool) t.join();
  }

  Acc total = make_acc();
  for (auto& p : partial) total.merge(p);
  return total;
}

/// Monte-Carlo mean of a scalar draw `f(j, stream)`.
template <class F>
Estimate mc_mean(const McPlan& plan, F&& f) {
  if (plan.n < 2) throw std::invalid_argument("Monte-Carlo sample count must be at least 2");
  auto acc = run_sharded(plan, [] { return RunningStats{}; },
                         [&](RunningStats& a, std::size_t j, Stream& s) { a.add(f(j, s)); });
  return acc.estimate();
}

}  // namespace difflab
