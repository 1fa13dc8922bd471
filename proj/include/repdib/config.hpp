#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "repdib/codebook.hpp"
#include "repdib/maze.hpp"
#include "repdib/objectives.hpp"

namespace repdib {

// Every knob of the three-stage pipeline. Serialized as flat JSON whose keys
// match the field names one-to-one, so CLI overrides are plain key=value.
struct RunConfig {
  // task
  std::string env = "grid";            // grid | spiral | loop
  std::string obs = "onehot";          // onehot | frame
  std::string noise = "none";          // none | image | video
  bool noise_in_pretrain = false;      // exogenous block active in stages 1-2
  std::string objective = "contrastive";  // proto | inverse1 | inversek | contrastive
  std::uint64_t seed = 1;

  // stage lengths in frames (stage 1 + stage 2 = pretraining budget)
  std::int64_t stage1_frames = 2000;
  std::int64_t stage2_frames = 8000;
  std::int64_t stage3_frames = 10000;

  // optimization
  std::int64_t batch_size = 128;
  double gamma = 0.99;
  double lr = 3e-3;
  double tau_q = 0.01;
  std::int64_t feature_dim = 128;
  std::int64_t hidden_dim = 128;

  // bottleneck
  bool use_vib = true;
  bool use_vq = true;
  std::int64_t groups = 8;
  std::int64_t codes = 50;
  double beta_vib = 0.01;
  double beta_commit = 0.25;
  std::string codebook_update = "gradient";  // gradient | ema
  double ema_decay = 0.99;
  std::int64_t dead_code_window = 1000;

  // objectives
  std::int64_t prototypes = 16;
  std::int64_t sinkhorn_iters = 3;
  double proto_temp = 0.1;
  bool proto_ema_target = false;
  double contrastive_temp = 0.1;
  std::int64_t max_k = 8;
  std::int64_t k_samples = 8;

  // exploration
  std::int64_t knn_k = 3;
  std::int64_t queue_capacity = 2048;
  std::string queue_store = "quantized";  // quantized | prequantized
  bool reward_at_collect = false;

  // rollouts
  std::int64_t horizon = 200;
  std::int64_t replay_capacity = 50000;
  std::int64_t seed_frames = 500;
  std::int64_t eval_episodes = 4;
  std::int64_t eval_every = 2000;

  // freezing
  bool freeze_encoder_stage1 = false;
  bool freeze_encoder_stage3 = false;

  // logging
  bool trace_intrinsic = false;

  // --- helpers ------------------------------------------------------------
  MazeKind maze_kind() const;
  ObsMode obs_mode() const;
  NoiseMode noise_mode() const;
  ObjectiveKind objective_kind() const;
  CodebookUpdate codebook_update_mode() const;

  std::int64_t stage1_end() const { return stage1_frames; }
  std::int64_t stage2_end() const { return stage1_frames + stage2_frames; }
  std::int64_t stage3_end() const {
    return stage1_frames + stage2_frames + stage3_frames;
  }

  // `{env}_{objective}_{G}g{L}c_seed{n}`
  std::string run_name() const;

  // Throws ContractError describing the first violated constraint.
  void validate() const;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);

  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;

  // Applies a `key=value` override; unknown keys raise an error listing every
  // valid key.
  void set(const std::string& key, const std::string& value);

  static std::vector<std::string> valid_keys();

  bool operator==(const RunConfig&) const = default;
};

}  // namespace repdib
