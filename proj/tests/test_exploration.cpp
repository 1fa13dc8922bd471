#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "repdib/exploration.hpp"

using namespace repdib;
using repdib::testing::random_tensor;

namespace {

// Full-sort oracle for the k-th nearest neighbour distance.
double brute_knn(const std::vector<double>& query,
                 const std::vector<std::vector<double>>& entries, int k) {
  std::vector<double> d;
  for (const auto& e : entries) {
    double acc = 0;
    for (std::size_t c = 0; c < query.size(); ++c)
      acc += (query[c] - e[c]) * (query[c] - e[c]);
    d.push_back(std::sqrt(acc));
  }
  std::sort(d.begin(), d.end());
  return d[k - 1];
}

}  // namespace

TEST_CASE("queue evicts strictly FIFO at capacity") {
  CandidateQueue<double> q(4, 2);
  CHECK(q.fill() == 0);
  q.push({1, 1});
  CHECK(q.fill() == 1);

  for (int i = 2; i <= 7; ++i) q.push({double(i), double(i)});
  CHECK(q.fill() == 4);
  // contents equal the last four inserts, oldest first
  for (int i = 0; i < 4; ++i) {
    CHECK(q.entry(i)[0] == double(4 + i));
    CHECK(q.entry(i)[1] == double(4 + i));
  }
}

TEST_CASE("queue replays an insert log exactly") {
  Rng rng(3);
  const int cap = 8;
  CandidateQueue<double> q(cap, 3);
  std::vector<std::vector<double>> log;
  for (int i = 0; i < cap + 3; ++i) {
    std::vector<double> v{rng.uniform(), rng.uniform(), rng.uniform()};
    log.push_back(v);
    q.push(v);
  }
  CHECK(q.fill() == cap);
  for (int i = 0; i < cap; ++i)
    for (int c = 0; c < 3; ++c)
      CHECK(q.entry(i)[c] == log[log.size() - cap + i][c]);
}

TEST_CASE("duplicate queue entries give zero reward") {
  CandidateQueue<double> q(8, 2);
  for (int i = 0; i < 5; ++i) q.push({0.5, -1.5});
  auto r = intrinsic_reward<double>({0.5, -1.5}, q, 1);
  CHECK(r.value == 0.0);
  CHECK_FALSE(r.warm_up);
}

TEST_CASE("two-point queue geometry") {
  CandidateQueue<double> q(4, 2);
  q.push({0, 0});
  q.push({3, 4});
  auto r = intrinsic_reward<double>({0, 0}, q, 2);
  CHECK(r.value == doctest::Approx(5.0));  // distances {0, 5}, second is 5
}

TEST_CASE("warm-up returns zero instead of raising") {
  CandidateQueue<double> q(8, 2);
  q.push({1, 2});
  auto r = intrinsic_reward<double>({0, 0}, q, 3);
  CHECK(r.value == 0.0);
  CHECK(r.warm_up);
}

TEST_CASE("reward matches the full-sort oracle on random cases") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1000, dim = 4;
    CandidateQueue<double> q(n, dim);
    std::vector<std::vector<double>> entries;
    for (int i = 0; i < n; ++i) {
      std::vector<double> v(dim);
      for (auto& x : v) x = rng.uniform(-1, 1);
      entries.push_back(v);
      q.push(v);
    }
    std::vector<double> query(dim);
    for (auto& x : query) x = rng.uniform(-1, 1);
    for (int k : {1, 3, 10}) {
      auto r = intrinsic_reward(query, q, k);
      CHECK(r.value == brute_knn(query, entries, k));
    }
  }
}

TEST_CASE("reward is permutation invariant over queue contents") {
  Rng rng(5);
  const int n = 50, dim = 3;
  std::vector<std::vector<double>> entries;
  for (int i = 0; i < n; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.uniform(-1, 1);
    entries.push_back(v);
  }
  std::vector<double> query{0.1, -0.2, 0.4};

  CandidateQueue<double> a(n, dim), b(n, dim);
  for (const auto& e : entries) a.push(e);
  std::vector<std::vector<double>> shuffled = entries;
  for (int i = n - 1; i > 0; --i)
    std::swap(shuffled[i], shuffled[rng.uniform_int(i + 1)]);
  for (const auto& e : shuffled) b.push(e);

  for (int k : {1, 2, 7}) {
    CHECK(intrinsic_reward(query, a, k).value ==
          doctest::Approx(intrinsic_reward(query, b, k).value).epsilon(1e-12));
  }
}

TEST_CASE("reward is monotone in k and non-negative") {
  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 40, dim = 3;
    CandidateQueue<double> q(n, dim);
    for (int i = 0; i < n; ++i) {
      std::vector<double> v(dim);
      for (auto& x : v) x = rng.uniform(-2, 2);
      q.push(v);
    }
    std::vector<double> query(dim);
    for (auto& x : query) x = rng.uniform(-2, 2);
    double prev = -1.0;
    for (int k = 1; k <= 10; ++k) {
      auto r = intrinsic_reward(query, q, k);
      CHECK(r.value >= 0.0);
      CHECK(r.value >= prev);
      prev = r.value;
    }
  }
}

TEST_CASE("identity exclusion skips one slot, not equal values") {
  CandidateQueue<double> q(4, 1);
  q.push({2.0});
  q.push({2.0});
  q.push({7.0});
  // excluding slot 0 still leaves the equal-valued slot 1 as nearest
  auto r = intrinsic_reward<double>({2.0}, q, 1, 0);
  CHECK(r.value == 0.0);
  auto r2 = intrinsic_reward<double>({2.0}, q, 2, 0);
  CHECK(r2.value == doctest::Approx(5.0));
}

TEST_CASE("collapsed codebook gives zero reward after warm-up") {
  Rng rng(7);
  Codebook<double> cb("cb", 2, 3, 4, rng);
  // collapse: every code identical
  for (auto& p : cb.tables)
    for (auto& v : p.value.v) v = 0.25;
  CandidateQueue<double> q(16, 4);
  Rng data(11);
  for (int step = 0; step < 10; ++step) {
    Tensor<double> z = random_tensor(1, 4, data);
    auto out = reward_pipeline<double>(z, nullptr, &cb, q, 1);
    if (step == 0) {
      CHECK(out.reward.warm_up);
    } else {
      CHECK(out.reward.value == 0.0);
      CHECK_FALSE(out.reward.warm_up);
    }
  }
}

TEST_CASE("two codes and alternating states alternate reward values") {
  Rng rng(7);
  Codebook<double> cb("cb", 1, 2, 2, rng);
  cb.tables[0].value = Tensor<double>(2, 2, {0, 0, 1, 1});
  CandidateQueue<double> q(8, 2);
  const double gap = std::sqrt(2.0);  // distance between the two codes

  Tensor<double> near_a(1, 2, {0.1, -0.1});
  Tensor<double> near_b(1, 2, {0.9, 1.1});
  // first visit warms up; afterwards with k=1 the reward alternates between
  // the inter-code distance (new code) and 0 (revisited code)
  auto r0 = reward_pipeline<double>(near_a, nullptr, &cb, q, 1);
  CHECK(r0.reward.warm_up);
  auto r1 = reward_pipeline<double>(near_b, nullptr, &cb, q, 1);
  CHECK(r1.reward.value == doctest::Approx(gap));
  auto r2 = reward_pipeline<double>(near_a, nullptr, &cb, q, 1);
  CHECK(r2.reward.value == 0.0);
  auto r3 = reward_pipeline<double>(near_b, nullptr, &cb, q, 1);
  CHECK(r3.reward.value == 0.0);
}

TEST_CASE("pipeline equals composing the three components independently") {
  Rng rng(23);
  VibLayer<double> vib("vib", 4, rng);
  Codebook<double> cb("cb", 2, 5, 4, rng);
  for (auto& p : cb.tables)
    for (auto& v : p.value.v) v = rng.uniform(-1, 1);
  Codebook<double> cb_copy = cb;

  CandidateQueue<double> q(32, 4), q_oracle(32, 4);
  Rng data(41);
  for (int step = 0; step < 20; ++step) {
    Tensor<double> z = random_tensor(1, 8, data);
    auto got = reward_pipeline<double>(z, &vib, &cb, q, 3);

    // independent composition on the copies
    Tensor<double> z_hat = vib.deterministic(z);
    Tensor<double> z_tilde = cb_copy.quantize(z_hat);
    std::vector<double> emb(z_tilde.v.begin(), z_tilde.v.end());
    auto want = intrinsic_reward(emb, q_oracle, 3);
    q_oracle.push(emb);

    CHECK(got.reward.value == want.value);
    CHECK(got.reward.warm_up == want.warm_up);
    CHECK(got.embedding == emb);
  }
}

TEST_CASE("discretization bounds the set of distinct reward values") {
  Rng rng(3);
  Codebook<double> cb("cb", 1, 3, 2, rng);
  cb.tables[0].value = Tensor<double>(3, 2, {0, 0, 1, 0, 0, 2});
  CandidateQueue<double> q(64, 2);
  Rng data(9);
  std::set<double> distinct;
  for (int step = 0; step < 60; ++step) {
    Tensor<double> z = random_tensor(1, 2, data, -1.5, 2.5);
    auto out = reward_pipeline<double>(z, nullptr, &cb, q, 1);
    if (!out.reward.warm_up) distinct.insert(out.reward.value);
  }
  // 3 codewords admit at most C(3,2) + 1 = 4 pairwise distances (incl. 0)
  CHECK(distinct.size() <= 4);
}

TEST_CASE("queue snapshot restores contents in order") {
  Rng rng(13);
  CandidateQueue<double> q(6, 2);
  for (int i = 0; i < 9; ++i) q.push({rng.uniform(), rng.uniform()});
  auto snap = q.snapshot();
  CandidateQueue<double> r(6, 2);
  r.restore(snap);
  CHECK(r.fill() == q.fill());
  for (int i = 0; i < q.fill(); ++i)
    for (int c = 0; c < 2; ++c) CHECK(r.entry(i)[c] == q.entry(i)[c]);
}
