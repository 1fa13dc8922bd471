#include "repdib/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace repdib {

using nlohmann::json;

namespace {

// Single table driving serialization, parsing and overrides.
template <typename F>
void for_each_field(RunConfig& c, F&& f) {
  f("env", c.env);
  f("obs", c.obs);
  f("noise", c.noise);
  f("noise_in_pretrain", c.noise_in_pretrain);
  f("objective", c.objective);
  f("seed", c.seed);
  f("stage1_frames", c.stage1_frames);
  f("stage2_frames", c.stage2_frames);
  f("stage3_frames", c.stage3_frames);
  f("batch_size", c.batch_size);
  f("gamma", c.gamma);
  f("lr", c.lr);
  f("tau_q", c.tau_q);
  f("feature_dim", c.feature_dim);
  f("hidden_dim", c.hidden_dim);
  f("use_vib", c.use_vib);
  f("use_vq", c.use_vq);
  f("groups", c.groups);
  f("codes", c.codes);
  f("beta_vib", c.beta_vib);
  f("beta_commit", c.beta_commit);
  f("codebook_update", c.codebook_update);
  f("ema_decay", c.ema_decay);
  f("dead_code_window", c.dead_code_window);
  f("prototypes", c.prototypes);
  f("sinkhorn_iters", c.sinkhorn_iters);
  f("proto_temp", c.proto_temp);
  f("proto_ema_target", c.proto_ema_target);
  f("contrastive_temp", c.contrastive_temp);
  f("max_k", c.max_k);
  f("k_samples", c.k_samples);
  f("knn_k", c.knn_k);
  f("queue_capacity", c.queue_capacity);
  f("queue_store", c.queue_store);
  f("reward_at_collect", c.reward_at_collect);
  f("horizon", c.horizon);
  f("replay_capacity", c.replay_capacity);
  f("seed_frames", c.seed_frames);
  f("eval_episodes", c.eval_episodes);
  f("eval_every", c.eval_every);
  f("freeze_encoder_stage1", c.freeze_encoder_stage1);
  f("freeze_encoder_stage3", c.freeze_encoder_stage3);
  f("trace_intrinsic", c.trace_intrinsic);
}

template <typename T>
void assign_from_json(const json& j, const std::string& key, T& out) {
  try {
    out = j.get<T>();
  } catch (const json::exception&) {
    throw ContractError("config: bad value for key '" + key + "'");
  }
}

}  // namespace

MazeKind RunConfig::maze_kind() const {
  if (env == "grid") return MazeKind::grid;
  if (env == "spiral") return MazeKind::spiral;
  if (env == "loop") return MazeKind::loop;
  throw ContractError("config: env must be grid, spiral or loop");
}

ObsMode RunConfig::obs_mode() const {
  if (obs == "onehot") return ObsMode::onehot;
  if (obs == "frame") return ObsMode::frame;
  throw ContractError("config: obs must be onehot or frame");
}

NoiseMode RunConfig::noise_mode() const {
  if (noise == "none") return NoiseMode::none;
  if (noise == "image") return NoiseMode::image;
  if (noise == "video") return NoiseMode::video;
  throw ContractError("config: noise must be none, image or video");
}

ObjectiveKind RunConfig::objective_kind() const {
  if (objective == "proto") return ObjectiveKind::proto;
  if (objective == "inverse1") return ObjectiveKind::inverse1;
  if (objective == "inversek") return ObjectiveKind::inversek;
  if (objective == "contrastive") return ObjectiveKind::contrastive;
  throw ContractError(
      "config: objective must be proto, inverse1, inversek or contrastive");
}

CodebookUpdate RunConfig::codebook_update_mode() const {
  if (codebook_update == "gradient") return CodebookUpdate::gradient;
  if (codebook_update == "ema") return CodebookUpdate::ema;
  throw ContractError("config: codebook_update must be gradient or ema");
}

std::string RunConfig::run_name() const {
  std::ostringstream os;
  os << env << "_" << objective << "_" << groups << "g" << codes << "c_seed"
     << seed;
  return os.str();
}

void RunConfig::validate() const {
  maze_kind();
  obs_mode();
  noise_mode();
  objective_kind();
  codebook_update_mode();
  if (queue_store != "quantized" && queue_store != "prequantized")
    throw ContractError("config: queue_store must be quantized or prequantized");
  auto positive = [](std::int64_t v, const char* name) {
    if (v <= 0)
      throw ContractError(std::string("config: ") + name + " must be positive");
  };
  auto non_negative = [](std::int64_t v, const char* name) {
    if (v < 0)
      throw ContractError(std::string("config: ") + name +
                          " must be non-negative");
  };
  non_negative(stage1_frames, "stage1_frames");
  non_negative(stage2_frames, "stage2_frames");
  non_negative(stage3_frames, "stage3_frames");
  non_negative(dead_code_window, "dead_code_window");
  non_negative(seed_frames, "seed_frames");
  positive(batch_size, "batch_size");
  positive(feature_dim, "feature_dim");
  positive(hidden_dim, "hidden_dim");
  positive(groups, "groups");
  positive(codes, "codes");
  positive(prototypes, "prototypes");
  positive(max_k, "max_k");
  positive(k_samples, "k_samples");
  positive(knn_k, "knn_k");
  positive(queue_capacity, "queue_capacity");
  positive(horizon, "horizon");
  positive(replay_capacity, "replay_capacity");
  positive(eval_episodes, "eval_episodes");
  positive(eval_every, "eval_every");
  if (gamma < 0.0 || gamma >= 1.0)
    throw ContractError("config: gamma must lie in [0, 1)");
  if (lr <= 0.0) throw ContractError("config: lr must be positive");
  if (tau_q <= 0.0 || tau_q > 1.0)
    throw ContractError("config: tau_q must lie in (0, 1]");
  if (ema_decay < 0.0 || ema_decay >= 1.0)
    throw ContractError("config: ema_decay must lie in [0, 1)");
  if (beta_vib < 0.0 || beta_commit < 0.0)
    throw ContractError("config: loss weights must be non-negative");
  if (proto_temp <= 0.0 || contrastive_temp <= 0.0)
    throw ContractError("config: temperatures must be positive");
  if (sinkhorn_iters < 0)
    throw ContractError("config: sinkhorn_iters must be non-negative");
  if (prototypes < 2) throw ContractError("config: prototypes must be >= 2");
  if (use_vq && feature_dim % groups != 0)
    throw ContractError("config: feature_dim must divide by groups");
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for_each_field(const_cast<RunConfig&>(*this),
                 [&](const char* key, auto& field) { j[key] = field; });
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: parse error: ") + e.what());
  }
  if (!j.is_object()) throw ContractError("config: expected a JSON object");

  RunConfig c;
  json seen = json::object();
  for_each_field(c, [&](const char* key, auto& field) {
    seen[key] = true;
    if (j.contains(key)) assign_from_json(j.at(key), key, field);
  });
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!seen.contains(it.key())) {
      std::ostringstream os;
      os << "config: unknown key '" << it.key() << "'. Valid keys:";
      for (const auto& k : valid_keys()) os << " " << k;
      throw ContractError(os.str());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("config: cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return from_json(os.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ContractError("config: cannot write " + path);
  os << to_json();
}

void RunConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  for_each_field(*this, [&](const char* k, auto& field) {
    if (key != k) return;
    found = true;
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::string>) {
      field = value;
    } else {
      json v;
      try {
        v = json::parse(value);
      } catch (const json::exception&) {
        throw ContractError("config: cannot parse value '" + value +
                            "' for key '" + key + "'");
      }
      assign_from_json(v, key, field);
    }
  });
  if (!found) {
    std::ostringstream os;
    os << "config: unknown key '" << key << "'. Valid keys:";
    for (const auto& k : valid_keys()) os << " " << k;
    throw ContractError(os.str());
  }
}

std::vector<std::string> RunConfig::valid_keys() {
  std::vector<std::string> keys;
  RunConfig c;
  for_each_field(c, [&](const char* key, auto&) { keys.emplace_back(key); });
  return keys;
}

}  // namespace repdib
