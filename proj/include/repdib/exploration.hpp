#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "repdib/codebook.hpp"
#include "repdib/tensor.hpp"
#include "repdib/vib.hpp"

namespace repdib {

// Fixed-capacity FIFO of embeddings used as the candidate set for the
// nearest-neighbour entropy estimate. Entries are immutable once stored.
//
// A value-count index is maintained next to the ring: discretized embeddings
// repeat heavily, and equal vectors have equal distances, so the k-NN search
// walks distinct values with multiplicities instead of every slot. This is a
// memoization, not an approximation.
template <typename S>
class CandidateQueue {
 public:
  CandidateQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
    if (capacity <= 0 || dim <= 0)
      throw ContractError("candidate_queue: capacity and dim must be positive");
    data_.resize(static_cast<std::size_t>(capacity) * dim);
  }

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int fill() const { return fill_; }

  void push(const std::vector<S>& v) {
    if (static_cast<int>(v.size()) != dim_)
      throw ContractError("candidate_queue: wrong embedding width");
    if (fill_ == capacity_) decrement(slot_vector(head_));
    std::copy(v.begin(), v.end(),
              data_.begin() + static_cast<std::size_t>(head_) * dim_);
    ++counts_[v];
    head_ = (head_ + 1) % capacity_;
    if (fill_ < capacity_) ++fill_;
  }

  // Slot i in FIFO order: 0 is the oldest stored entry.
  const S* entry(int i) const {
    const int slot = fill_ < capacity_ ? i : (head_ + i) % capacity_;
    return data_.data() + static_cast<std::size_t>(slot) * dim_;
  }

  const std::map<std::vector<S>, int>& distinct() const { return counts_; }

  void clear() {
    head_ = 0;
    fill_ = 0;
    counts_.clear();
  }

  // Checkpoint access: raw contents in FIFO order.
  std::vector<S> snapshot() const {
    std::vector<S> out;
    out.reserve(static_cast<std::size_t>(fill_) * dim_);
    for (int i = 0; i < fill_; ++i)
      out.insert(out.end(), entry(i), entry(i) + dim_);
    return out;
  }

  void restore(const std::vector<S>& flat) {
    clear();
    if (flat.size() % dim_ != 0)
      throw ContractError("candidate_queue: bad snapshot size");
    std::vector<S> v(dim_);
    for (std::size_t off = 0; off < flat.size(); off += dim_) {
      std::copy(flat.begin() + off, flat.begin() + off + dim_, v.begin());
      push(v);
    }
  }

 private:
  std::vector<S> slot_vector(int slot) const {
    const S* p = data_.data() + static_cast<std::size_t>(slot) * dim_;
    return std::vector<S>(p, p + dim_);
  }

  void decrement(const std::vector<S>& v) {
    auto it = counts_.find(v);
    if (it == counts_.end()) return;
    if (--it->second == 0) counts_.erase(it);
  }

  int capacity_;
  int dim_;
  int head_ = 0;
  int fill_ = 0;
  std::vector<S> data_;
  std::map<std::vector<S>, int> counts_;
};

struct IntrinsicReward {
  double value = 0.0;
  bool warm_up = false;  // set while the queue holds fewer than k entries
};

// Distance from the query to its k-th nearest neighbour in the queue.
// exclude_slot removes one entry by identity (slot), never by value, so a
// query that happens to equal stored entries still sees them as neighbours.
// While the queue holds fewer than k candidates the reward is 0 with the
// warm-up flag set rather than an error, so fresh rollouts proceed.
template <typename S>
IntrinsicReward intrinsic_reward(const std::vector<S>& query,
                                 const CandidateQueue<S>& queue, int k,
                                 int exclude_slot = -1) {
  if (k <= 0) throw ContractError("intrinsic_reward: k must be positive");
  if (static_cast<int>(query.size()) != queue.dim())
    throw ContractError("intrinsic_reward: query width mismatch");
  const int fill = queue.fill();
  const bool excluding = exclude_slot >= 0 && exclude_slot < fill;
  if (fill - (excluding ? 1 : 0) < k) return {0.0, true};

  const int dim = queue.dim();
  const S* excluded = excluding ? queue.entry(exclude_slot) : nullptr;
  std::vector<std::pair<double, int>> dists;  // (squared distance, count)
  dists.reserve(queue.distinct().size());
  for (const auto& [vec, count] : queue.distinct()) {
    int c = count;
    if (excluded && std::equal(vec.begin(), vec.end(), excluded)) --c;
    if (c == 0) continue;
    double d = 0.0;
    const S* e = vec.data();
    for (int i = 0; i < dim; ++i) {
      const double diff = static_cast<double>(query[i]) - e[i];
      d += diff * diff;
    }
    dists.emplace_back(d, c);
  }
  std::sort(dists.begin(), dists.end());
  int cum = 0;
  for (const auto& [d, count] : dists) {
    cum += count;
    if (cum >= k) return {std::sqrt(d), false};
  }
  return {0.0, true};  // unreachable given the fill check
}

template <typename S>
struct PipelineReward {
  IntrinsicReward reward;
  std::vector<S> embedding;  // the discretized embedding that was enqueued
  std::vector<int> codes;
};

// Full Algorithm-2 chain: deterministic bottleneck embedding, k-th-NN reward
// against the queue, then enqueue. The state is enqueued strictly after the
// reward so it never counts itself.
template <typename S>
PipelineReward<S> reward_pipeline(const Tensor<S>& z_raw,
                                  const VibLayer<S>* vib, Codebook<S>* cb,
                                  CandidateQueue<S>& queue, int k,
                                  bool store_prequantized = false) {
  if (z_raw.rows != 1)
    throw ContractError("reward_pipeline: expects a single state row");
  Tensor<S> z_hat = vib ? vib->deterministic(z_raw) : z_raw;
  PipelineReward<S> out;
  if (cb) {
    QuantizeInfo info;
    Tensor<S> z_tilde = cb->quantize(z_hat, &info);
    out.codes.assign(info.codes.begin(), info.codes.end());
    const Tensor<S>& stored = store_prequantized ? z_hat : z_tilde;
    out.embedding.assign(stored.v.begin(), stored.v.end());
  } else {
    out.embedding.assign(z_hat.v.begin(), z_hat.v.end());
  }
  out.reward = intrinsic_reward(out.embedding, queue, k);
  queue.push(out.embedding);
  return out;
}

}  // namespace repdib
