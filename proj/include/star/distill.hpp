// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training: diffusion pretraining for the two teachers, causal
// initialization of the student on its own rollouts, distribution matching
// against a frozen teacher, and the joint two-task objective that shares one
// student between a control task (reference + warp, synthetic teacher) and a
// fidelity task (tag only, real teacher).
//
// Scores use the x0 parameterization: s(x_t, σ) = (D(x_t, σ) − x_t) / σ².

#pragma once

#include "star/denoiser.hpp"
#include "star/engine.hpp"
#include "star/microworld.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace star {

enum class ScoreRole { real, synthetic, fake };
enum class Task { v2v, t2v };
enum class Stage { teacher, init, jdmd };
/// alternate: V2V and T2V take turns every alternation_period iterations.
/// joint: both tasks every iteration, summed with lambda_ctrl.
enum class TaskSchedule { alternate, joint, v2v_only, t2v_only };

std::string_view to_string(ScoreRole r);
std::string_view to_string(Task t);
std::string_view to_string(Stage s);
std::string_view to_string(TaskSchedule s);
Stage parse_stage(std::string_view s);
TaskSchedule parse_task_schedule(std::string_view s);

/// Stages only move forward: teacher -> init -> jdmd (repeating a stage is
/// allowed).
bool stage_transition_ok(Stage from, Stage to);

struct TrainPlan {
  Stage stage = Stage::teacher;
  /// Teacher pretraining and causal initialization.
  double teacher_lr = 2e-5;
  double student_lr = 4.0e-6;
  double fake_lr = 8.0e-7;
  int alternation_period = 1;
  TaskSchedule tasks = TaskSchedule::alternate;
  double lambda_ctrl = 1.0;
  long iterations = 1000;
  std::uint64_t seed = 0;
  /// Chunks per autoregressive rollout (init and jdmd).
  int rollout_chunks = 2;
  NoiseSchedule student_schedule = NoiseSchedule::student_default();
  NoiseSchedule teacher_schedule = NoiseSchedule::teacher_default();

  bool valid() const;
  /// Task run at an iteration under the alternate, v2v_only and t2v_only
  /// schedules. V2V goes first.
  Task task_at(long iteration) const;
};

void to_json(nlohmann::json& j, const TrainPlan& p);
void from_json(const nlohmann::json& j, TrainPlan& p);

/// Clean conditioning a score model encodes itself. Pointers must outlive
/// the call.
struct ScoreCondition {
  const ag::Mat* reference = nullptr;
  /// Most recent first.
  std::vector<const ag::Mat*> history;
  const ag::Mat* geometry = nullptr;
  int tag = 0;
};

class ScoreModel {
 public:
  ScoreModel(ScoreRole role, NoiseSchedule schedule);
  virtual ~ScoreModel() = default;

  ScoreRole role() const { return role_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  /// True when sigma lies in [min, max] of the schedule.
  bool covers(double sigma) const;

  /// x0 estimate. Records a graph into the model's parameters when grad
  /// mode is on and the model is trainable.
  virtual ag::Var predict_x0(const ag::Var& x_t, double sigma, const ScoreCondition& c) const = 0;
  /// Trainable parameters; empty for frozen teachers.
  virtual std::vector<ag::Parameter*> parameters() = 0;

  /// (x0 − x_t)/σ², without a graph.
  ag::Mat score(const ag::Mat& x_t, double sigma, const ScoreCondition& c) const;

 private:
  ScoreRole role_;
  NoiseSchedule schedule_;
};

/// A denoiser as a score network. Teachers are held const; only the fake
/// role exposes parameters. Conditions are encoded without a graph.
class DenoiserScore final : public ScoreModel {
 public:
  DenoiserScore(ScoreRole role, const Denoiser& model, NoiseSchedule schedule = NoiseSchedule::teacher_default());
  DenoiserScore(Denoiser& fake, NoiseSchedule schedule = NoiseSchedule::teacher_default());

  ag::Var predict_x0(const ag::Var& x_t, double sigma, const ScoreCondition& c) const override;
  std::vector<ag::Parameter*> parameters() override;
  const Denoiser& model() const { return *model_; }

 private:
  const Denoiser* model_;
  Denoiser* trainable_ = nullptr;
};

/// Score of N(mean, variance·I) data, noised: D(x_t, σ) = a·x_t + (1−a)·mean
/// with a = v/(v+σ²). Rows are samples. The fake role learns the mean.
class GaussianScore final : public ScoreModel {
 public:
  GaussianScore(ScoreRole role, const ag::RowVec& mean, double variance = 1.0,
                NoiseSchedule schedule = NoiseSchedule::teacher_default());

  ag::Var predict_x0(const ag::Var& x_t, double sigma, const ScoreCondition& c) const override;
  std::vector<ag::Parameter*> parameters() override;
  ag::RowVec mean() const { return mean_->value; }
  double variance() const { return variance_; }

 private:
  std::unique_ptr<ag::Parameter> mean_;
  double variance_;
};

struct DmdTerms {
  /// −(s_real − s_fake) at x_t = x̂ + σε.
  ag::Mat gradient;
  ag::Mat real_x0;
  ag::Mat fake_x0;
};

/// Distribution-matching gradient w.r.t. the student output x̂. eps is the
/// recorded noise draw. Throws std::invalid_argument for sigma outside either
/// schedule or non-finite x̂, std::runtime_error for non-finite scores.
DmdTerms dmd_terms(const ag::Mat& x_hat, double sigma, const ag::Mat& eps, const ScoreModel& real,
                   const ScoreModel& fake, const ScoreCondition& real_cond, const ScoreCondition& fake_cond);
ag::Mat dmd_gradient(const ag::Mat& x_hat, double sigma, const ag::Mat& eps, const ScoreModel& real,
                     const ScoreModel& fake, const ScoreCondition& cond = {});

struct FakeSample {
  ag::Mat x;
  ScoreCondition cond;
};

/// One denoising score matching step on student samples: each sample gets
/// σ uniform over the fake's schedule and loss ‖D(x + σε, σ) − x‖² (mean);
/// the reported loss is the mean over samples. The optimizer carries the
/// learning rate. Throws on an empty batch or a non-fake model.
double fake_score_update(ScoreModel& fake, std::span<const FakeSample> samples, ag::Adam& opt, NoiseStream& rng);

struct DistillLoss {
  double vis = 0.0;
  double ctrl = 0.0;
  double lambda_ctrl = 1.0;
  double total = 0.0;
};

/// total = vis + lambda_ctrl·ctrl.
DistillLoss make_distill_loss(double vis, double ctrl, double lambda_ctrl);

/// Metrics records (one JSON object per call).
using MetricsSink = std::function<void(const nlohmann::json&)>;

struct TrainReport {
  std::vector<double> losses;
  double seconds = 0.0;
};

/// Throws std::invalid_argument unless every pair matches the config (size,
/// chunk length, at least one chunk) and is internally consistent.
void validate_dataset(std::span<const EpisodePair> data, const DenoiserConfig& config);

/// Diffusion pretraining on single chunks at lr teacher_lr. The synthetic
/// teacher sees the full conditions (index-aligned reference chunk, previous
/// clean chunk, warp); the real teacher sees the scene tag only.
TrainReport train_teacher(Denoiser& model, std::span<const EpisodePair> data, const TrainPlan& plan, ScoreRole role,
                          const MetricsSink& sink = {});

/// Autoregressive rehearsal: each iteration rolls the teacher schedule over
/// rollout_chunks chunks of one pair, caching each chunk's own output for
/// the next, with x0 MSE against the ground truth per chunk. Gradients come
/// from chunk-wise replay.
TrainReport causal_init(Denoiser& student, std::span<const EpisodePair> data, const TrainPlan& plan,
                        const MetricsSink& sink = {});

struct DistillModels {
  Denoiser* student = nullptr;
  const Denoiser* real = nullptr;
  const Denoiser* synthetic = nullptr;
  /// Tracks the student on the T2V task.
  Denoiser* fake_vis = nullptr;
  /// Tracks the student on the V2V task.
  Denoiser* fake_ctrl = nullptr;
};

/// V2V batches carry a pair (reference episode, target poses); T2V batches
/// carry only a scene tag.
struct JdmdBatch {
  Task task = Task::v2v;
  const EpisodePair* pair = nullptr;
  int tag = 0;
  /// Keys rollout noise and DMD noise draws.
  std::uint64_t seed = 0;
};

class JdmdTrainer {
 public:
  JdmdTrainer(DistillModels models, const TrainPlan& plan);

  /// One student update from one task, then one fake update for that task.
  DistillLoss step(const JdmdBatch& batch);
  /// Joint update: both tasks' gradients summed with lambda_ctrl into one
  /// student step, then both fake updates.
  DistillLoss joint_step(const JdmdBatch& v2v, const JdmdBatch& t2v);

  const TrainPlan& plan() const { return plan_; }
  long steps() const { return student_opt_.steps(); }

 private:
  struct Rollout;
  Rollout run(const JdmdBatch& batch, double weight);
  void update_fake(const Rollout& r);

  DistillModels m_;
  TrainPlan plan_;
  ag::Adam student_opt_;
  ag::Adam fake_vis_opt_;
  ag::Adam fake_ctrl_opt_;
};

DistillLoss jdmd_step(JdmdTrainer& trainer, const JdmdBatch& batch);

/// Full jdmd stage: V2V batches draw pairs from data, T2V batches draw tags
/// from tags; the schedule follows plan.tasks.
TrainReport train_jdmd(DistillModels models, std::span<const EpisodePair> data, std::span<const int> tags,
                       const TrainPlan& plan, const MetricsSink& sink = {});

/// Mean squared difference between frames and their 3x3 box blur over
/// interior pixels.
double high_frequency_energy(std::span<const Image> frames);

struct GaussianRegressionOptions {
  ag::RowVec real_mean;
  ag::RowVec student_init;
  double variance = 1.0;
  int steps = 2000;
  int batch = 64;
  double student_lr = 1e-2;
  double fake_lr = 5e-2;
  /// Fake-score updates per student update.
  int fake_steps = 1;
  /// Cosine decay of both learning rates to zero over the run.
  bool cosine_decay = true;
  std::uint64_t seed = 0;
};

struct GaussianRegressionResult {
  /// ‖student mean − real mean‖ after each step.
  std::vector<double> distance;
  ag::RowVec student_mean;
  ag::RowVec fake_mean;
};

/// Distills a N(m, v·I) generator toward a Gaussian real score with a
/// trainable Gaussian fake score (initialized at the real mean).
GaussianRegressionResult gaussian_regression(const GaussianRegressionOptions& options);

}  // namespace star
