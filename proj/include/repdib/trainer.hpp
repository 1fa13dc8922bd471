#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "repdib/checkpoint.hpp"
#include "repdib/codebook.hpp"
#include "repdib/config.hpp"
#include "repdib/exploration.hpp"
#include "repdib/maze.hpp"
#include "repdib/nn.hpp"
#include "repdib/objectives.hpp"
#include "repdib/prototypes.hpp"
#include "repdib/replay.hpp"
#include "repdib/rng.hpp"
#include "repdib/vib.hpp"

namespace repdib {

inline std::string format_g(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

struct EvalEpisode {
  int start_row = 0, start_col = 0;
  double ret = 0.0;
  int steps = 0;
  bool reached = false;
};

// Three-stage training pipeline on one maze task:
//   stage 1 pretrains the bottleneck (VQ + VIB losses only),
//   stage 2 pretrains the representation with the self-supervised objective
//           while a DQN explores on the k-NN intrinsic reward,
//   stage 3 fine-tunes a task DQN on external reward with the bottleneck
//           frozen.
// All state needed to resume bit-exactly lives in the checkpoint.
template <typename S = float>
class Trainer {
 public:
  explicit Trainer(RunConfig cfg, std::string run_dir = "")
      : cfg_(std::move(cfg)),
        run_dir_(std::move(run_dir)),
        rng_(cfg_.seed),
        explore_buf_(static_cast<int>(cfg_.replay_capacity)),
        task_buf_(static_cast<int>(cfg_.replay_capacity)),
        queue_(static_cast<int>(cfg_.queue_capacity),
               static_cast<int>(cfg_.feature_dim)) {
    cfg_.validate();

    ObsSpec pretrain_obs{cfg_.obs_mode(), cfg_.noise_mode(),
                         cfg_.noise_in_pretrain &&
                             cfg_.noise_mode() != NoiseMode::none};
    ObsSpec task_obs{cfg_.obs_mode(), cfg_.noise_mode(),
                     cfg_.noise_mode() != NoiseMode::none};
    pretrain_env_ = MazeEnv(cfg_.maze_kind(), pretrain_obs,
                            static_cast<int>(cfg_.horizon));
    task_env_ =
        MazeEnv(cfg_.maze_kind(), task_obs, static_cast<int>(cfg_.horizon));

    const int obs_dim = task_obs.dim();
    const int feat = static_cast<int>(cfg_.feature_dim);
    const int hidden = static_cast<int>(cfg_.hidden_dim);
    const int repr_in = cfg_.use_vib ? 2 * feat : feat;

    encoder_ = Mlp<S>("enc", {obs_dim, hidden, feat}, Activation::relu, rng_);
    predictor_ = Mlp<S>("pred", {feat, repr_in}, Activation::identity, rng_);
    if (cfg_.use_vib) vib_.emplace("vib", feat, rng_);
    if (cfg_.use_vq) {
      cb_.emplace("cb", static_cast<int>(cfg_.groups),
                  static_cast<int>(cfg_.codes), feat, rng_);
      cb_->beta_commit = cfg_.beta_commit;
      cb_->update_mode = cfg_.codebook_update_mode();
      cb_->ema_decay = cfg_.ema_decay;
    }
    if (cfg_.objective_kind() == ObjectiveKind::proto) {
      protos_.emplace("protos", static_cast<int>(cfg_.prototypes), feat, rng_);
      protos_->temp = cfg_.proto_temp;
      protos_->sinkhorn_iters = static_cast<int>(cfg_.sinkhorn_iters);
      protos_->ema_target = cfg_.proto_ema_target;
    }
    const auto kind = cfg_.objective_kind();
    if (kind == ObjectiveKind::inverse1 || kind == ObjectiveKind::inversek)
      inverse_head_.emplace("inv", std::vector<int>{2 * feat, hidden, kNumActions},
                            Activation::relu, rng_);
    q_int_ = QNetwork<S>("qi", {feat, hidden, kNumActions}, rng_);
    q_task_ = QNetwork<S>("qt", {feat, hidden, kNumActions}, rng_);

    if (!run_dir_.empty()) open_writers();
  }

  static constexpr int kNumActions = 4;

  const RunConfig& config() const { return cfg_; }
  std::int64_t frame() const { return frame_; }
  int stages_done() const { return stages_done_; }
  Codebook<S>* codebook() { return cb_ ? &*cb_ : nullptr; }
  const Codebook<S>* codebook() const { return cb_ ? &*cb_ : nullptr; }

  // ---------------------------------------------------------------------
  // Stage drivers. Each advances the frame counter to its stage boundary and
  // is a no-op when already past it, which is what resuming needs.

  void stage1() { run_until(cfg_.stage1_end()); }

  void stage2() {
    require_bottleneck_trained("pretrain-encoder");
    run_until(cfg_.stage2_end());
  }

  void stage3() {
    require_bottleneck_trained("finetune");
    run_until(cfg_.stage3_end());
  }

  void run_all() {
    stage1();
    stage2();
    stage3();
  }

  // Advances training to the given global frame (clamped to the schedule),
  // crossing stage boundaries as needed.
  void run_until(std::int64_t target_frame) {
    target_frame = std::min(target_frame, cfg_.stage3_end());
    while (true) {
      maybe_complete_stages();
      if (frame_ >= target_frame) break;
      const int stage = stage_of(frame_);
      if (active_stage_ != stage) init_stage(stage);
      step_frame(stage);
    }
    maybe_complete_stages();
  }

  // ---------------------------------------------------------------------
  // Greedy evaluation: fixed center goal, corner starts cycled in order.

  std::vector<EvalEpisode> evaluate(const char* phase = "manual") {
    static constexpr std::array<std::pair<int, int>, 4> kCorners{
        {{0, 0}, {0, 5}, {5, 0}, {5, 5}}};
    std::vector<EvalEpisode> out;
    for (int e = 0; e < cfg_.eval_episodes; ++e) {
      const auto [r0, c0] = kCorners[e % kCorners.size()];
      MazeState s = task_env_.reset_at(r0, c0);
      s.noise_seed = mix_seed(cfg_.seed, 1000 + static_cast<std::uint64_t>(e));
      EvalEpisode ep;
      ep.start_row = r0;
      ep.start_col = c0;
      while (!s.finished()) {
        Tensor<S> obs = row_tensor(task_env_.observe(s));
        const Action a = static_cast<Action>(q_task_.greedy_action(embed(obs)));
        StepResult res = task_env_.step(s, a);
        ep.ret += res.reward;
        ++ep.steps;
        ep.reached = res.reached_goal;
      }
      out.push_back(ep);
      if (eval_csv_.is_open()) {
        eval_csv_ << frame_ << "," << phase << "," << e << "," << ep.start_row
                  << "," << ep.start_col << "," << format_g(ep.ret) << ","
                  << ep.steps << "," << (ep.reached ? 1 : 0) << "\n";
        eval_csv_.flush();
      }
    }
    return out;
  }

  // Deterministic full pipeline embedding of a single cell rendered clean
  // (goal at the center, no exogenous noise content).
  struct CellEmbedding {
    std::vector<S> z;
    std::vector<int> codes;
  };

  CellEmbedding embed_cell(int row, int col, bool prequantized = false) {
    MazeState s = pretrain_env_.reset_at(row, col);
    ObsSpec clean = pretrain_env_.obs;
    clean.active = false;
    Tensor<S> obs = row_tensor(render(s, pretrain_env_.layout, clean));
    Tensor<S> e = predictor_.forward(encoder_.forward(obs));
    Tensor<S> z_hat = vib_ ? vib_->deterministic(e) : e;
    CellEmbedding out;
    if (cb_ && !prequantized) {
      QuantizeInfo info;
      Tensor<S> z_tilde = cb_->quantize(z_hat, &info);
      out.z.assign(z_tilde.v.begin(), z_tilde.v.end());
      out.codes.assign(info.codes.begin(), info.codes.end());
    } else if (cb_) {
      QuantizeInfo info = cb_->lookup(z_hat);
      out.z.assign(z_hat.v.begin(), z_hat.v.end());
      out.codes.assign(info.codes.begin(), info.codes.end());
    } else {
      out.z.assign(z_hat.v.begin(), z_hat.v.end());
    }
    return out;
  }

  // ---------------------------------------------------------------------
  // Checkpointing: parameters, optimizer, counters, rng, buffers, queue and
  // the live episode, so training resumes bit-exactly.

  void save_checkpoint(const std::string& path) {
    std::vector<TensorRecord> recs;
    std::vector<float> meta;
    push_u64(meta, static_cast<std::uint64_t>(frame_));
    push_u64(meta, static_cast<std::uint64_t>(stages_done_));
    push_u64(meta, static_cast<std::uint64_t>(active_stage_));
    push_u64(meta, static_cast<std::uint64_t>(episode_count_));
    push_u64(meta, episode_active_ ? 1 : 0);
    push_u64(meta, static_cast<std::uint64_t>(opt_ ? opt_->steps() : 0));
    recs.push_back({"meta", {static_cast<std::uint32_t>(meta.size())}, meta});
    recs.push_back(string_record("rng", rng_.serialize()));

    for (Param<S>* p : all_params()) recs.push_back(to_record(p->name, p->value));
    save_target(recs, "qi.target", q_int_);
    save_target(recs, "qt.target", q_task_);
    if (protos_)
      recs.push_back(to_record("protos.target", protos_->target_protos));

    if (opt_) {
      const auto& ps = opt_->params();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        recs.push_back(to_record("adam.m." + ps[i]->name, opt_->moment1(i)));
        recs.push_back(to_record("adam.v." + ps[i]->name, opt_->moment2(i)));
      }
    }

    if (cb_) {
      std::vector<float> usage, stamps;
      for (int g = 0; g < cb_->groups; ++g)
        for (int j = 0; j < cb_->codes_per_group; ++j) {
          push_u64(usage, cb_->usage[g][j]);
          push_u64(stamps, static_cast<std::uint64_t>(cb_->last_used[g][j]));
        }
      recs.push_back({"cb.usage", {static_cast<std::uint32_t>(usage.size())}, usage});
      recs.push_back(
          {"cb.last_used", {static_cast<std::uint32_t>(stamps.size())}, stamps});
    }

    recs.push_back(encode_buffer("explore", explore_buf_));
    recs.push_back(encode_buffer("task", task_buf_));
    {
      std::vector<float> vis;
      for (auto v : visits_) push_u64(vis, static_cast<std::uint64_t>(v));
      recs.push_back({"visits", {static_cast<std::uint32_t>(vis.size())}, vis});
    }

    {
      auto snap = queue_.snapshot();
      std::vector<float> q(snap.begin(), snap.end());
      recs.push_back({"queue", {static_cast<std::uint32_t>(q.size())}, q});
    }
    {
      std::vector<float> cur;
      encode_state(cur, cur_);
      recs.push_back({"episode", {static_cast<std::uint32_t>(cur.size())}, cur});
    }
    write_checkpoint(path, recs);
  }

  void load_checkpoint(const std::string& path) {
    CheckpointReader reader(path);
    const auto& meta = reader.get("meta").data;
    std::size_t pos = 0;
    frame_ = static_cast<std::int64_t>(pull_u64(meta, pos));
    stages_done_ = static_cast<int>(pull_u64(meta, pos));
    active_stage_ = static_cast<int>(pull_u64(meta, pos));
    episode_count_ = static_cast<std::int64_t>(pull_u64(meta, pos));
    episode_active_ = pull_u64(meta, pos) != 0;
    const long opt_steps = static_cast<long>(pull_u64(meta, pos));
    rng_.deserialize(record_string(reader.get("rng")));

    for (Param<S>* p : all_params()) {
      from_record(reader.get(p->name), p->value);
      p->zero_grad();
    }
    load_target(reader, "qi.target", q_int_);
    load_target(reader, "qt.target", q_task_);
    if (protos_)
      from_record(reader.get("protos.target"), protos_->target_protos);

    if (active_stage_ > 0) {
      init_stage_modules(active_stage_);
      build_optimizer(active_stage_);
      opt_->set_steps(opt_steps);
      const auto& ps = opt_->params();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        from_record(reader.get("adam.m." + ps[i]->name), opt_->moment1(i));
        from_record(reader.get("adam.v." + ps[i]->name), opt_->moment2(i));
      }
    }

    if (cb_) {
      const auto& usage = reader.get("cb.usage").data;
      const auto& stamps = reader.get("cb.last_used").data;
      std::size_t up = 0, sp = 0;
      for (int g = 0; g < cb_->groups; ++g)
        for (int j = 0; j < cb_->codes_per_group; ++j) {
          cb_->usage[g][j] = pull_u64(usage, up);
          cb_->last_used[g][j] =
              static_cast<std::int64_t>(pull_u64(stamps, sp));
        }
    }

    decode_buffer(reader.get("explore"), explore_buf_);
    decode_buffer(reader.get("task"), task_buf_);
    {
      const auto& vis = reader.get("visits").data;
      std::size_t p = 0;
      for (auto& v : visits_)
        v = static_cast<std::int64_t>(pull_u64(vis, p));
    }
    {
      const auto& q = reader.get("queue").data;
      std::vector<S> flat(q.begin(), q.end());
      queue_.restore(flat);
    }
    {
      const auto& cur = reader.get("episode").data;
      std::size_t p = 0;
      cur_ = decode_state(cur, p);
    }
  }

  // Writes the codebook dump for analysis alongside the other artifacts.
  void write_codebook_csv() {
    if (!cb_ || run_dir_.empty()) return;
    std::ofstream os(run_dir_ + "/codebook.csv", std::ios::trunc);
    cb_->dump_csv(os);
  }

 private:
  // --- stage machinery ---------------------------------------------------

  int stage_of(std::int64_t f) const {
    if (f < cfg_.stage1_end()) return 1;
    if (f < cfg_.stage2_end()) return 2;
    return 3;
  }

  std::int64_t stage_start(int stage) const {
    return stage == 1 ? 0 : stage == 2 ? cfg_.stage1_end() : cfg_.stage2_end();
  }
  std::int64_t stage_end(int stage) const {
    return stage == 1   ? cfg_.stage1_end()
           : stage == 2 ? cfg_.stage2_end()
                        : cfg_.stage3_end();
  }

  void require_bottleneck_trained(const char* command) const {
    if (cfg_.use_vq && frame_ >= cfg_.stage1_end() && stages_done_ < 1)
      throw ContractError(std::string(command) +
                          ": codebook is untrained; run pretrain-bottleneck "
                          "first or disable the bottleneck (use_vq=false)");
  }

  void init_stage_modules(int stage) {
    const bool enc_trainable = stage == 1   ? !cfg_.freeze_encoder_stage1
                               : stage == 2 ? true
                                            : !cfg_.freeze_encoder_stage3;
    encoder_.trainable = enc_trainable;
    predictor_.trainable = enc_trainable;
    if (vib_) vib_->trainable = stage != 3;
    if (cb_) cb_->trainable = stage != 3;
  }

  void build_optimizer(int stage) {
    opt_.emplace(cfg_.lr);
    for (Param<S>* p : trainable_params(stage)) opt_->add(*p);
  }

  void init_stage(int stage) {
    init_stage_modules(stage);
    build_optimizer(stage);
    active_stage_ = stage;
    episode_active_ = false;  // fresh episode per stage
  }

  void maybe_complete_stages() {
    for (int s = 1; s <= 3; ++s) {
      if (frame_ >= stage_end(s) && stages_done_ < s) {
        stages_done_ = s;
        if (!run_dir_.empty()) {
          save_checkpoint(run_dir_ + "/checkpoint.bin");
          write_codebook_csv();
          write_coverage_row(s);
          if (s == 3) evaluate("final");
        }
      }
    }
  }

  void write_coverage_row(int stage) {
    namespace fs = std::filesystem;
    const std::string path = run_dir_ + "/coverage.csv";
    const bool fresh = !fs::exists(path);
    std::ofstream os(path, std::ios::app);
    if (fresh) os << "stage,frame,visited_cells,fraction\n";
    os << stage << "," << frame_ << "," << visited_cells() << ","
       << format_g(static_cast<double>(visited_cells()) / MazeLayout::kCells)
       << "\n";
  }

 public:
  int visited_cells() const {
    int n = 0;
    for (auto v : visits_)
      if (v > 0) ++n;
    return n;
  }

 private:

  // --- per-frame work ------------------------------------------------------

  // Frames pushed into the stage's buffer so far; derived from the schedule
  // so it survives checkpoint resume without extra state.
  std::int64_t buffer_pushes(int stage) const {
    return stage == 3 ? frame_ - cfg_.stage2_end() + 1 : frame_ + 1;
  }

  void step_frame(int stage) {
    collect(stage);
    if (buffer_pushes(stage) >= std::max<std::int64_t>(cfg_.seed_frames, 1)) {
      try {
        update(stage);
      } catch (const NumericError&) {
        if (!run_dir_.empty())
          save_checkpoint(run_dir_ + "/checkpoint_abort.bin");
        throw;
      }
    }
    ++frame_;
    if (stage == 3 && eval_csv_.is_open()) {
      const std::int64_t in_stage = frame_ - stage_start(3);
      if (in_stage % cfg_.eval_every == 0 && frame_ < stage_end(3))
        evaluate("train");
    }
  }

  void collect(int stage) {
    const bool task_phase = stage == 3;
    MazeEnv& env = task_phase ? task_env_ : pretrain_env_;
    auto& buf = task_phase ? task_buf_ : explore_buf_;

    if (!episode_active_) {
      cur_ = env.reset(GoalRule::training_set, rng_);
      episode_active_ = true;
      ++episode_count_;
      ++visits_[cur_.cell()];
      write_traj(-1, 0.0);
    }

    Tensor<S> obs = row_tensor(env.observe(cur_));
    const double eps = epsilon(stage);
    Action a;
    if (rng_.uniform() < eps) {
      a = static_cast<Action>(rng_.uniform_int(kNumActions));
    } else {
      QNetwork<S>& q = task_phase ? q_task_ : q_int_;
      a = static_cast<Action>(q.greedy_action(embed(obs)));
    }

    MazeState prev = cur_;
    StepResult res = env.step(cur_, a);
    Transition<S> tr;
    tr.state = prev;
    tr.next_state = cur_;
    tr.action = static_cast<int>(a);
    tr.reward = static_cast<S>(res.reward);
    tr.reached_goal = res.reached_goal;
    tr.truncated = res.truncated;
    if (stage == 2 && cfg_.reward_at_collect) {
      Tensor<S> next_obs = row_tensor(env.observe(cur_));
      auto rp = pipeline_reward(next_obs);
      tr.intrinsic = static_cast<S>(rp.reward.value);
      write_trace(rp);
    }
    buf.push(tr);
    ++visits_[cur_.cell()];
    write_traj(static_cast<int>(a), res.reward);
    if (cur_.finished()) episode_active_ = false;
  }

  double epsilon(int stage) const {
    const std::int64_t a = stage_start(stage), b = stage_end(stage);
    const double half = static_cast<double>(b - a) / 2.0;
    if (half <= 0) return 0.1;
    const double progress = static_cast<double>(frame_ - a) / half;
    return std::max(0.1, 1.0 - 0.9 * std::min(1.0, progress));
  }

  void update(int stage) {
    Tape<S> tape;
    MetricsRow row;
    row.stage = stage;

    Var<S> loss = tape.constant(Tensor<S>::scalar(S(0)));
    ReprBatch rb;
    if (stage == 1 || stage == 2) {
      rb = repr_update_terms(tape, stage, row);
      loss = add(loss, rb.total);
    }
    if (stage == 2) loss = add(loss, intrinsic_dqn_term(tape, row));
    if (stage == 3) loss = add(loss, task_dqn_term(tape, row));

    row.loss_total = static_cast<double>(loss.value().item());
    tape.backward(loss);
    opt_->step();
    post_update(stage, rb);
    write_metrics(row);
  }

  struct ReprBatch {
    Var<S> total;                 // objective + vq + beta * kl
    Tensor<S> prequant_s;         // pre-quantization embeddings of s
    QuantizeInfo info_s;
    bool present = false;
  };

  struct MetricsRow {
    int stage = 0;
    double loss_total = 0, objective = 0, vq = 0, kl = 0, dqn = 0;
    double r_int_mean = 0;
  };

  // Representation terms shared by stages 1 and 2. Stage 1 runs only the
  // bottleneck losses on (s, s') pairs; stage 2 adds the self-supervised
  // objective.
  ReprBatch repr_update_terms(Tape<S>& tape, int stage, MetricsRow& row) {
    const auto kind = cfg_.objective_kind();
    const int max_k =
        (stage == 2 && kind == ObjectiveKind::inversek)
            ? static_cast<int>(cfg_.max_k)
            : 1;
    const int batch = static_cast<int>(cfg_.batch_size);
    auto pairs = explore_buf_.sample_pairs(batch, max_k, rng_);

    Tensor<S> obs_s(batch, pretrain_env_.obs.dim());
    Tensor<S> obs_k(batch, pretrain_env_.obs.dim());
    std::vector<int> actions(batch), ks(batch);
    for (int i = 0; i < batch; ++i) {
      const auto& anchor = explore_buf_.at(pairs[i].index);
      const auto& partner = explore_buf_.at(pairs[i].index + pairs[i].k - 1);
      fill_row(obs_s, i, pretrain_env_.observe(anchor.state));
      fill_row(obs_k, i, pretrain_env_.observe(partner.next_state));
      actions[i] = anchor.action;
      ks[i] = pairs[i].k;
    }

    ReprVars rs = repr_forward(tape, obs_s, /*stochastic=*/true);
    ReprVars rk = repr_forward(tape, obs_k, /*stochastic=*/true);
    Var<S> vq = add(rs.vq, rk.vq);
    Var<S> kl = add(rs.kl, rk.kl);

    Var<S> objective = tape.constant(Tensor<S>::scalar(S(0)));
    if (stage == 2) {
      switch (kind) {
        case ObjectiveKind::proto:
          objective = protos_->loss(tape, rs.z, rk.z.value());
          break;
        case ObjectiveKind::contrastive:
          objective =
              contrastive_loss(tape, rs.z, rk.z, cfg_.contrastive_temp);
          break;
        case ObjectiveKind::inverse1:
          objective = inverse_loss(tape, *inverse_head_, rs.z, rk.z, actions);
          break;
        case ObjectiveKind::inversek: {
          // one cross-entropy term per sampled k value, summed
          for (int k = 1; k <= max_k; ++k) {
            std::vector<int> rows, acts;
            for (int i = 0; i < batch; ++i)
              if (ks[i] == k) {
                rows.push_back(i);
                acts.push_back(actions[i]);
              }
            if (rows.empty()) continue;
            Var<S> z_s = gather_rows(rs.z, rows);
            Var<S> z_k = gather_rows(rk.z, rows);
            objective = add(objective,
                            inverse_loss(tape, *inverse_head_, z_s, z_k, acts));
          }
          break;
        }
      }
    }

    row.objective = static_cast<double>(objective.value().item());
    row.vq = static_cast<double>(vq.value().item());
    row.kl = static_cast<double>(kl.value().item());

    ReprBatch rb;
    rb.total = total_loss(tape, {objective, vq, kl}, cfg_.beta_vib);
    rb.prequant_s = rs.prequant;
    rb.info_s = rs.info;
    rb.present = true;
    return rb;
  }

  // Stage-2 critic trained on the intrinsic reward only; the representation
  // is held fixed under this term. In the default relabel mode rewards are
  // recomputed from the current bottleneck, feeding the queue sample by
  // sample so no state counts itself.
  Var<S> intrinsic_dqn_term(Tape<S>& tape, MetricsRow& row) {
    const int batch = static_cast<int>(cfg_.batch_size);
    auto idx = explore_buf_.sample_indices(batch, rng_);

    Tensor<S> obs_s(batch, pretrain_env_.obs.dim());
    Tensor<S> obs_n(batch, pretrain_env_.obs.dim());
    std::vector<int> actions(batch);
    std::vector<S> rewards(batch);
    std::vector<bool> terminal(batch);
    for (int i = 0; i < batch; ++i) {
      const auto& tr = explore_buf_.at(idx[i]);
      fill_row(obs_s, i, pretrain_env_.observe(tr.state));
      fill_row(obs_n, i, pretrain_env_.observe(tr.next_state));
      actions[i] = tr.action;
      terminal[i] = tr.reached_goal;
    }
    Tensor<S> z = embed(obs_s);
    Tensor<S> prequant_next;
    QuantizeInfo info_next;
    Tensor<S> z_next = embed(obs_n, &prequant_next, &info_next);

    double r_sum = 0.0;
    const bool store_prequant = cfg_.queue_store == "prequantized";
    for (int i = 0; i < batch; ++i) {
      if (cfg_.reward_at_collect) {
        rewards[i] = explore_buf_.at(idx[i]).intrinsic;
      } else {
        const Tensor<S>& stored = store_prequant ? prequant_next : z_next;
        std::vector<S> emb(stored.row(i), stored.row(i) + stored.cols);
        auto r = intrinsic_reward(emb, queue_, static_cast<int>(cfg_.knn_k));
        queue_.push(emb);
        rewards[i] = static_cast<S>(r.value);
        if (trace_csv_.is_open()) {
          PipelineReward<S> rp;
          rp.reward = r;
          if (cb_)
            rp.codes.assign(info_next.codes.begin() + i * cb_->groups,
                            info_next.codes.begin() + (i + 1) * cb_->groups);
          write_trace(rp);
        }
      }
      r_sum += static_cast<double>(rewards[i]);
    }
    row.r_int_mean = r_sum / batch;

    Var<S> z_const = tape.constant(std::move(z));
    Var<S> loss = dqn_loss(tape, q_int_, z_const, actions, rewards, z_next,
                           terminal, cfg_.gamma);
    row.dqn = static_cast<double>(loss.value().item());
    return loss;
  }

  // Stage-3 critic on external reward; gradients flow into the encoder
  // through the frozen bottleneck unless the encoder is frozen too.
  Var<S> task_dqn_term(Tape<S>& tape, MetricsRow& row) {
    const int batch = static_cast<int>(cfg_.batch_size);
    auto idx = task_buf_.sample_indices(batch, rng_);

    Tensor<S> obs_s(batch, task_env_.obs.dim());
    Tensor<S> obs_n(batch, task_env_.obs.dim());
    std::vector<int> actions(batch);
    std::vector<S> rewards(batch);
    std::vector<bool> terminal(batch);
    for (int i = 0; i < batch; ++i) {
      const auto& tr = task_buf_.at(idx[i]);
      fill_row(obs_s, i, task_env_.observe(tr.state));
      fill_row(obs_n, i, task_env_.observe(tr.next_state));
      actions[i] = tr.action;
      rewards[i] = tr.reward;
      terminal[i] = tr.reached_goal;
    }
    Tensor<S> z_next = embed(obs_n);

    ReprVars rs = repr_forward(tape, obs_s, /*stochastic=*/false);
    Var<S> loss = dqn_loss(tape, q_task_, rs.z, actions, rewards, z_next,
                           terminal, cfg_.gamma);
    row.dqn = static_cast<double>(loss.value().item());
    return loss;
  }

  void post_update(int stage, const ReprBatch& rb) {
    if (stage == 2) q_int_.ema_target(cfg_.tau_q);
    if (stage == 3) q_task_.ema_target(cfg_.tau_q);
    if (protos_ && stage == 2) protos_->after_update();
    if (cb_ && rb.present && stage != 3) {
      if (cb_->update_mode == CodebookUpdate::ema)
        cb_->apply_ema(rb.prequant_s, rb.info_s);
      cb_->stamp_usage(frame_, rb.info_s);
      if (cfg_.dead_code_window > 0)
        cb_->reseed_dead(frame_, cfg_.dead_code_window, rb.prequant_s, rng_);
    }
  }

  // --- representation ------------------------------------------------------

  struct ReprVars {
    Var<S> z;            // final embedding (quantized when VQ is on)
    Var<S> kl;
    Var<S> vq;
    Tensor<S> prequant;  // value entering the quantizer
    QuantizeInfo info;
  };

  ReprVars repr_forward(Tape<S>& tape, const Tensor<S>& obs, bool stochastic) {
    Var<S> x = tape.constant(obs);
    Var<S> e = predictor_.forward(tape, encoder_.forward(tape, x));
    Var<S> zero = tape.constant(Tensor<S>::scalar(S(0)));

    ReprVars out{e, zero, zero, {}, {}};
    if (vib_) {
      if (stochastic) {
        auto vf = vib_->forward(tape, e, rng_);
        out.z = vf.z_hat;
        out.kl = vf.kl;
      } else {
        out.z = vib_->deterministic(tape, e);
      }
    }
    out.prequant = out.z.value();
    if (cb_) {
      auto q = cb_->quantize(tape, out.z);
      out.z = q.z_q;
      out.vq = q.vq_loss;
      out.info = std::move(q.info);
    }
    return out;
  }

  // Raw deterministic embedding used for acting, targets and rewards.
  Tensor<S> embed(const Tensor<S>& obs, Tensor<S>* prequant_out = nullptr,
                  QuantizeInfo* info_out = nullptr) {
    Tensor<S> e = predictor_.forward(encoder_.forward(obs));
    Tensor<S> z = vib_ ? vib_->deterministic(e) : std::move(e);
    if (prequant_out) *prequant_out = z;
    return cb_ ? cb_->quantize(z, info_out) : z;
  }

  PipelineReward<S> pipeline_reward(const Tensor<S>& obs) {
    Tensor<S> e = predictor_.forward(encoder_.forward(obs));
    return reward_pipeline<S>(e, vib_ ? &*vib_ : nullptr,
                              cb_ ? &*cb_ : nullptr, queue_,
                              static_cast<int>(cfg_.knn_k),
                              cfg_.queue_store == "prequantized");
  }

  // --- parameter registry ----------------------------------------------------

  std::vector<Param<S>*> all_params() {
    std::vector<Param<S>*> out;
    encoder_.collect(out);
    predictor_.collect(out);
    if (vib_) vib_->collect(out);
    if (cb_) cb_->collect(out);
    if (protos_) protos_->collect(out);
    if (inverse_head_) inverse_head_->collect(out);
    q_int_.collect(out);
    q_task_.collect(out);
    return out;
  }

  std::vector<Param<S>*> trainable_params(int stage) {
    std::vector<Param<S>*> out;
    const bool enc = stage == 1   ? !cfg_.freeze_encoder_stage1
                     : stage == 2 ? true
                                  : !cfg_.freeze_encoder_stage3;
    if (enc) {
      encoder_.collect(out);
      predictor_.collect(out);
    }
    if (stage != 3) {
      if (vib_) vib_->collect(out);
      if (cb_ && cb_->update_mode == CodebookUpdate::gradient)
        cb_->collect(out);
    }
    if (stage == 2) {
      if (protos_) protos_->collect(out);
      if (inverse_head_) inverse_head_->collect(out);
      q_int_.collect(out);
    }
    if (stage == 3) q_task_.collect(out);
    return out;
  }

  // --- encoding helpers ------------------------------------------------------

  static void encode_state(std::vector<float>& out, const MazeState& s) {
    out.push_back(static_cast<float>(s.row));
    out.push_back(static_cast<float>(s.col));
    out.push_back(static_cast<float>(s.goal_row));
    out.push_back(static_cast<float>(s.goal_col));
    out.push_back(static_cast<float>(s.step));
    out.push_back(s.reached_goal ? 1.f : 0.f);
    out.push_back(s.truncated ? 1.f : 0.f);
    push_u64(out, s.noise_seed);
  }

  static MazeState decode_state(const std::vector<float>& in, std::size_t& pos) {
    MazeState s;
    s.row = static_cast<int>(in[pos++]);
    s.col = static_cast<int>(in[pos++]);
    s.goal_row = static_cast<int>(in[pos++]);
    s.goal_col = static_cast<int>(in[pos++]);
    s.step = static_cast<int>(in[pos++]);
    s.reached_goal = in[pos++] != 0.f;
    s.truncated = in[pos++] != 0.f;
    s.noise_seed = pull_u64(in, pos);
    return s;
  }

  TensorRecord encode_buffer(const std::string& name,
                             const ReplayBuffer<S>& buf) {
    std::vector<float> out;
    auto snap = buf.snapshot();
    push_u64(out, snap.size());
    for (const auto& tr : snap) {
      encode_state(out, tr.state);
      encode_state(out, tr.next_state);
      out.push_back(static_cast<float>(tr.action));
      out.push_back(static_cast<float>(tr.reward));
      out.push_back(tr.reached_goal ? 1.f : 0.f);
      out.push_back(tr.truncated ? 1.f : 0.f);
      out.push_back(static_cast<float>(tr.intrinsic));
    }
    return {"buf." + name, {static_cast<std::uint32_t>(out.size())}, out};
  }

  void decode_buffer(const TensorRecord& rec, ReplayBuffer<S>& buf) {
    std::size_t pos = 0;
    const std::uint64_t n = pull_u64(rec.data, pos);
    std::vector<Transition<S>> snap;
    snap.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      Transition<S> tr;
      tr.state = decode_state(rec.data, pos);
      tr.next_state = decode_state(rec.data, pos);
      tr.action = static_cast<int>(rec.data[pos++]);
      tr.reward = static_cast<S>(rec.data[pos++]);
      tr.reached_goal = rec.data[pos++] != 0.f;
      tr.truncated = rec.data[pos++] != 0.f;
      tr.intrinsic = static_cast<S>(rec.data[pos++]);
      snap.push_back(tr);
    }
    buf.restore(snap);
  }

  void save_target(std::vector<TensorRecord>& recs, const std::string& prefix,
                   const QNetwork<S>& q) {
    for (std::size_t l = 0; l < q.target_w.size(); ++l) {
      recs.push_back(to_record(prefix + ".w" + std::to_string(l), q.target_w[l]));
      recs.push_back(to_record(prefix + ".b" + std::to_string(l), q.target_b[l]));
    }
  }

  void load_target(const CheckpointReader& reader, const std::string& prefix,
                   QNetwork<S>& q) {
    for (std::size_t l = 0; l < q.target_w.size(); ++l) {
      from_record(reader.get(prefix + ".w" + std::to_string(l)), q.target_w[l]);
      from_record(reader.get(prefix + ".b" + std::to_string(l)), q.target_b[l]);
    }
  }

  // --- io ---------------------------------------------------------------------

  Tensor<S> row_tensor(const std::vector<double>& obs) const {
    Tensor<S> t(1, static_cast<int>(obs.size()));
    for (std::size_t i = 0; i < obs.size(); ++i)
      t.v[i] = static_cast<S>(obs[i]);
    return t;
  }

  static void fill_row(Tensor<S>& m, int row, const std::vector<double>& obs) {
    S* dst = m.row(row);
    for (std::size_t i = 0; i < obs.size(); ++i)
      dst[i] = static_cast<S>(obs[i]);
  }

  void open_writers() {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir_);
    const bool fresh = !fs::exists(run_dir_ + "/metrics.csv");
    metrics_csv_.open(run_dir_ + "/metrics.csv", std::ios::app);
    eval_csv_.open(run_dir_ + "/eval.csv", std::ios::app);
    traj_csv_.open(run_dir_ + "/trajectory.csv", std::ios::app);
    if (cfg_.trace_intrinsic)
      trace_csv_.open(run_dir_ + "/reward_trace.csv", std::ios::app);
    if (fresh) {
      metrics_csv_ << "step,stage,loss_total,loss_objective,loss_vq,loss_kl,"
                      "loss_dqn,r_int_mean,codebook_perplexity,epsilon\n";
      eval_csv_ << "frame,phase,episode,start_row,start_col,return,steps,"
                   "reached\n";
      traj_csv_ << "episode,step,row,col,action,reward\n";
      if (trace_csv_.is_open())
        trace_csv_ << "step,reward,queue_fill,codes\n";
    }
  }

  double min_group_perplexity() const {
    if (!cb_) return 0.0;
    double worst = static_cast<double>(cb_->codes_per_group);
    for (int g = 0; g < cb_->groups; ++g) {
      double total = 0;
      for (auto u : cb_->usage[g]) total += static_cast<double>(u);
      if (total == 0) return 1.0;
      double h = 0;
      for (auto u : cb_->usage[g]) {
        if (u == 0) continue;
        const double p = static_cast<double>(u) / total;
        h -= p * std::log(p);
      }
      worst = std::min(worst, std::exp(h));
    }
    return worst;
  }

  void write_metrics(const MetricsRow& row) {
    if (!metrics_csv_.is_open()) return;
    metrics_csv_ << frame_ << "," << row.stage << ","
                 << format_g(row.loss_total) << "," << format_g(row.objective)
                 << "," << format_g(row.vq) << "," << format_g(row.kl) << ","
                 << format_g(row.dqn) << "," << format_g(row.r_int_mean) << ","
                 << format_g(min_group_perplexity()) << ","
                 << format_g(epsilon(row.stage)) << "\n";
  }

  void write_traj(int action, double reward) {
    if (!traj_csv_.is_open()) return;
    traj_csv_ << episode_count_ << "," << cur_.step << "," << cur_.row << ","
              << cur_.col << "," << action << "," << format_g(reward) << "\n";
  }

  void write_trace(const PipelineReward<S>& rp) {
    if (!trace_csv_.is_open()) return;
    trace_csv_ << frame_ << "," << format_g(rp.reward.value) << ","
               << queue_.fill() << ",";
    for (std::size_t i = 0; i < rp.codes.size(); ++i) {
      if (i) trace_csv_ << ";";
      trace_csv_ << rp.codes[i];
    }
    trace_csv_ << "\n";
  }

  // --- members -----------------------------------------------------------------

  RunConfig cfg_;
  std::string run_dir_;
  Rng rng_;

  MazeEnv pretrain_env_, task_env_;
  Mlp<S> encoder_, predictor_;
  std::optional<VibLayer<S>> vib_;
  std::optional<Codebook<S>> cb_;
  std::optional<PrototypeBank<S>> protos_;
  std::optional<Mlp<S>> inverse_head_;
  QNetwork<S> q_int_, q_task_;
  std::optional<Adam<S>> opt_;

  ReplayBuffer<S> explore_buf_, task_buf_;
  CandidateQueue<S> queue_;
  MazeState cur_;
  bool episode_active_ = false;
  std::vector<std::int64_t> visits_ = std::vector<std::int64_t>(MazeLayout::kCells, 0);

  std::int64_t frame_ = 0;
  std::int64_t episode_count_ = 0;
  int stages_done_ = 0;
  int active_stage_ = 0;

  std::ofstream metrics_csv_, eval_csv_, traj_csv_, trace_csv_;
};

}  // namespace repdib
