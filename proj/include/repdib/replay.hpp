#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "repdib/maze.hpp"
#include "repdib/rng.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

// One environment transition. States are stored compactly; observations are
// re-rendered on demand, which rendering determinism makes exact.
template <typename S>
struct Transition {
  MazeState state;
  MazeState next_state;
  int action = 0;
  S reward = S(0);
  bool reached_goal = false;
  bool truncated = false;
  S intrinsic = S(0);  // filled when rewards are computed at collection time

  bool episode_end() const { return reached_goal || truncated; }
};

// Ring buffer of transitions with episode bookkeeping so sampled (t, t+k)
// pairs never cross an episode boundary.
template <typename S>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity <= 0) throw ContractError("replay: capacity must be positive");
    data_.resize(capacity);
  }

  int capacity() const { return capacity_; }
  int size() const { return size_; }

  void push(const Transition<S>& t) {
    const std::int64_t serial = next_serial_++;
    data_[slot_of(serial)] = t;
    if (size_ < capacity_) ++size_;

    // evict the head segment entry that this slot overwrote
    if (serial >= capacity_ && !segments_.empty()) {
      Segment& head = segments_.front();
      ++head.start;
      --head.length;
      if (head.length == 0) segments_.pop_front();
    }

    if (open_segment_) {
      ++segments_.back().length;
    } else {
      segments_.push_back({serial, 1});
      open_segment_ = true;
    }
    if (t.episode_end()) open_segment_ = false;
  }

  // Logical index: 0 is the oldest stored transition.
  const Transition<S>& at(int i) const {
    return data_[slot_of(oldest_serial() + i)];
  }

  // Uniform over every stored transition (DQN batches).
  std::vector<int> sample_indices(int batch, Rng& rng) const {
    if (size_ == 0) throw ContractError("replay: sampling from an empty buffer");
    std::vector<int> out(batch);
    for (int i = 0; i < batch; ++i)
      out[i] = static_cast<int>(rng.uniform_int(size_));
    return out;
  }

  struct Pair {
    int index;  // logical index of the anchor transition t
    int k;      // pair partner is the next_state of transition t + k - 1
  };

  // Uniform over valid (t, k) with k in [1, max_k] and the whole span inside
  // one episode. The pair may end on the episode's terminal state.
  std::vector<Pair> sample_pairs(int batch, int max_k, Rng& rng) const {
    if (max_k < 1) throw ContractError("replay: max_k must be >= 1");
    std::vector<std::uint64_t> cumulative;
    cumulative.reserve(segments_.size());
    std::uint64_t total = 0;
    for (const Segment& seg : segments_) {
      total += pair_count(seg.length, max_k);
      cumulative.push_back(total);
    }
    if (total == 0)
      throw ContractError("replay: no valid (t, k) pair to sample");

    std::vector<Pair> out;
    out.reserve(batch);
    for (int b = 0; b < batch; ++b) {
      std::uint64_t u = rng.uniform_int(total);
      std::size_t si = 0;
      while (cumulative[si] <= u) ++si;
      const Segment& seg = segments_[si];
      u -= si == 0 ? 0 : cumulative[si - 1];

      // within the segment: offsets 0..L-1 admit min(max_k, L - i) choices
      const std::int64_t L = seg.length;
      std::int64_t i, k;
      const std::int64_t full = L > max_k ? (L - max_k) : 0;
      if (u < static_cast<std::uint64_t>(full) * max_k) {
        i = static_cast<std::int64_t>(u) / max_k;
        k = static_cast<std::int64_t>(u) % max_k + 1;
      } else {
        std::int64_t rem = static_cast<std::int64_t>(u) - full * max_k;
        i = full;
        std::int64_t avail = std::min<std::int64_t>(max_k, L - i);
        while (rem >= avail) {
          rem -= avail;
          ++i;
          avail = std::min<std::int64_t>(max_k, L - i);
        }
        k = rem + 1;
      }
      out.push_back(
          {static_cast<int>(seg.start + i - oldest_serial()), static_cast<int>(k)});
    }
    return out;
  }

  // --- checkpoint support -----------------------------------------------
  // Whether the trailing episode is still open follows from the last stored
  // transition, so the transition list is the whole state.

  std::vector<Transition<S>> snapshot() const {
    std::vector<Transition<S>> out;
    out.reserve(size_);
    for (int i = 0; i < size_; ++i) out.push_back(at(i));
    return out;
  }

  void restore(const std::vector<Transition<S>>& transitions) {
    data_.assign(capacity_, Transition<S>{});
    segments_.clear();
    size_ = 0;
    next_serial_ = 0;
    open_segment_ = false;
    for (const auto& t : transitions) push(t);
  }

 private:
  struct Segment {
    std::int64_t start;   // serial of the first transition
    std::int64_t length;  // number of stored transitions
  };

  std::int64_t oldest_serial() const {
    return next_serial_ > capacity_ ? next_serial_ - capacity_ : 0;
  }
  int slot_of(std::int64_t serial) const {
    return static_cast<int>(serial % capacity_);
  }

  static std::uint64_t pair_count(std::int64_t len, int max_k) {
    if (len <= 0) return 0;
    const std::int64_t k = max_k;
    if (len <= k) return static_cast<std::uint64_t>(len) * (len + 1) / 2;
    return static_cast<std::uint64_t>(k) * (k + 1) / 2 +
           static_cast<std::uint64_t>(len - k) * k;
  }

  int capacity_;
  int size_ = 0;
  std::int64_t next_serial_ = 0;
  bool open_segment_ = false;
  std::vector<Transition<S>> data_;
  std::deque<Segment> segments_;
};

}  // namespace repdib
