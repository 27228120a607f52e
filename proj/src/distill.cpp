// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace star {

using ag::Mat;
using ag::Var;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool finite_positive(double x) { return std::isfinite(x) && x > 0.0; }

std::span<const Pose> chunk_poses(const Episode& ep, int chunk) {
  return std::span<const Pose>(ep.poses).subspan(static_cast<std::size_t>(chunk * ep.chunk_frames),
                                                 static_cast<std::size_t>(ep.chunk_frames));
}

}  // namespace

std::string_view to_string(ScoreRole r) {
  switch (r) {
    case ScoreRole::real: return "real";
    case ScoreRole::synthetic: return "synthetic";
    case ScoreRole::fake: return "fake";
  }
  return "?";
}

std::string_view to_string(Task t) { return t == Task::v2v ? "v2v" : "t2v"; }

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::teacher: return "teacher";
    case Stage::init: return "init";
    case Stage::jdmd: return "jdmd";
  }
  return "?";
}

std::string_view to_string(TaskSchedule s) {
  switch (s) {
    case TaskSchedule::alternate: return "alternate";
    case TaskSchedule::joint: return "joint";
    case TaskSchedule::v2v_only: return "v2v_only";
    case TaskSchedule::t2v_only: return "t2v_only";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (Stage v : {Stage::teacher, Stage::init, Stage::jdmd}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown stage: " + std::string(s));
}

TaskSchedule parse_task_schedule(std::string_view s) {
  for (TaskSchedule v : {TaskSchedule::alternate, TaskSchedule::joint, TaskSchedule::v2v_only, TaskSchedule::t2v_only}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown task schedule: " + std::string(s));
}

bool stage_transition_ok(Stage from, Stage to) {
  const int a = static_cast<int>(from), b = static_cast<int>(to);
  return b == a || b == a + 1;
}

bool TrainPlan::valid() const {
  return finite_positive(teacher_lr) && finite_positive(student_lr) && finite_positive(fake_lr) &&
         alternation_period >= 1 && std::isfinite(lambda_ctrl) && lambda_ctrl >= 0.0 && iterations >= 0 &&
         rollout_chunks >= 1 && student_schedule.valid() && teacher_schedule.valid();
}

Task TrainPlan::task_at(long iteration) const {
  switch (tasks) {
    case TaskSchedule::v2v_only: return Task::v2v;
    case TaskSchedule::t2v_only: return Task::t2v;
    case TaskSchedule::alternate:
    case TaskSchedule::joint: break;
  }
  return (iteration / alternation_period) % 2 == 0 ? Task::v2v : Task::t2v;
}

void to_json(nlohmann::json& j, const TrainPlan& p) {
  j = {{"stage", to_string(p.stage)},
       {"teacher_lr", p.teacher_lr},
       {"student_lr", p.student_lr},
       {"fake_lr", p.fake_lr},
       {"alternation_period", p.alternation_period},
       {"tasks", to_string(p.tasks)},
       {"lambda_ctrl", p.lambda_ctrl},
       {"iterations", p.iterations},
       {"seed", p.seed},
       {"rollout_chunks", p.rollout_chunks},
       {"student_sigmas", p.student_schedule.sigmas},
       {"teacher_sigmas", p.teacher_schedule.sigmas}};
}

void from_json(const nlohmann::json& j, TrainPlan& p) {
  const TrainPlan d;
  p.stage = parse_stage(j.value("stage", std::string(to_string(d.stage))));
  p.teacher_lr = j.value("teacher_lr", d.teacher_lr);
  p.student_lr = j.value("student_lr", d.student_lr);
  p.fake_lr = j.value("fake_lr", d.fake_lr);
  p.alternation_period = j.value("alternation_period", d.alternation_period);
  p.tasks = parse_task_schedule(j.value("tasks", std::string(to_string(d.tasks))));
  p.lambda_ctrl = j.value("lambda_ctrl", d.lambda_ctrl);
  p.iterations = j.value("iterations", d.iterations);
  p.seed = j.value("seed", d.seed);
  p.rollout_chunks = j.value("rollout_chunks", d.rollout_chunks);
  p.student_schedule.sigmas = j.value("student_sigmas", d.student_schedule.sigmas);
  p.teacher_schedule.sigmas = j.value("teacher_sigmas", d.teacher_schedule.sigmas);
  if (!p.valid()) throw std::invalid_argument("TrainPlan: invalid values");
}

// ---------------------------------------------------------------------------
// Score models

ScoreModel::ScoreModel(ScoreRole role, NoiseSchedule schedule) : role_(role), schedule_(std::move(schedule)) {
  if (!schedule_.valid()) throw std::invalid_argument("ScoreModel: invalid schedule");
}

bool ScoreModel::covers(double sigma) const {
  const double hi = schedule_.sigmas.front(), lo = schedule_.sigmas.back();
  return sigma >= lo * (1.0 - 1e-12) && sigma <= hi * (1.0 + 1e-12);
}

Mat ScoreModel::score(const Mat& x_t, double sigma, const ScoreCondition& c) const {
  ag::NoGradGuard no_grad;
  const Mat x0 = predict_x0(ag::constant(x_t), sigma, c).value();
  return (x0 - x_t) / (sigma * sigma);
}

DenoiserScore::DenoiserScore(ScoreRole role, const Denoiser& model, NoiseSchedule schedule)
    : ScoreModel(role, std::move(schedule)), model_(&model) {}

DenoiserScore::DenoiserScore(Denoiser& fake, NoiseSchedule schedule)
    : ScoreModel(ScoreRole::fake, std::move(schedule)), model_(&fake), trainable_(&fake) {}

Var DenoiserScore::predict_x0(const Var& x_t, double sigma, const ScoreCondition& c) const {
  const DenoiserConfig& cfg = model_->config();
  std::optional<BlockKV> ref;
  std::vector<BlockKV> hist;
  {
    ag::NoGradGuard no_grad;
    if (c.reference) ref = model_->encode(ag::constant(*c.reference), BlockKind::reference, c.tag);
    const std::size_t n = std::min(c.history.size(), static_cast<std::size_t>(cfg.history_window));
    for (std::size_t i = 0; i < n; ++i) hist.push_back(model_->encode(ag::constant(*c.history[i]), BlockKind::history, c.tag));
  }
  CacheView view;
  if (ref) view.reference = &*ref;
  for (const BlockKV& h : hist) view.history.push_back(&h);
  std::optional<ag::NoGradGuard> frozen;
  if (!trainable_) frozen.emplace();
  return model_->denoise(x_t, sigma, view, c.geometry, c.tag);
}

std::vector<ag::Parameter*> DenoiserScore::parameters() {
  return trainable_ ? trainable_->parameters() : std::vector<ag::Parameter*>{};
}

GaussianScore::GaussianScore(ScoreRole role, const ag::RowVec& mean, double variance, NoiseSchedule schedule)
    : ScoreModel(role, std::move(schedule)),
      mean_(std::make_unique<ag::Parameter>("mean", Mat(mean))),
      variance_(variance) {
  if (mean.size() == 0 || !finite_positive(variance)) throw std::invalid_argument("GaussianScore: bad mean or variance");
}

Var GaussianScore::predict_x0(const Var& x_t, double sigma, const ScoreCondition&) const {
  if (x_t.cols() != mean_->value.cols()) throw std::invalid_argument("GaussianScore: dimension mismatch");
  const double a = variance_ / (variance_ + sigma * sigma);
  const Var m = role() == ScoreRole::fake ? ag::param(*mean_) : ag::constant(mean_->value);
  return ag::add_row(ag::scale(x_t, a), ag::scale(m, 1.0 - a));
}

std::vector<ag::Parameter*> GaussianScore::parameters() {
  return role() == ScoreRole::fake ? std::vector<ag::Parameter*>{mean_.get()} : std::vector<ag::Parameter*>{};
}

// ---------------------------------------------------------------------------
// Distribution matching

DmdTerms dmd_terms(const Mat& x_hat, double sigma, const Mat& eps, const ScoreModel& real, const ScoreModel& fake,
                   const ScoreCondition& real_cond, const ScoreCondition& fake_cond) {
  if (!x_hat.allFinite()) throw std::invalid_argument("dmd_gradient: non-finite student output");
  if (eps.rows() != x_hat.rows() || eps.cols() != x_hat.cols()) throw std::invalid_argument("dmd_gradient: noise shape");
  if (!finite_positive(sigma) || !real.covers(sigma) || !fake.covers(sigma)) {
    throw std::invalid_argument("dmd_gradient: sigma outside the score schedules");
  }
  const Mat x_t = x_hat + sigma * eps;
  DmdTerms t;
  {
    ag::NoGradGuard no_grad;
    t.real_x0 = real.predict_x0(ag::constant(x_t), sigma, real_cond).value();
    t.fake_x0 = fake.predict_x0(ag::constant(x_t), sigma, fake_cond).value();
  }
  const double s2 = sigma * sigma;
  const Mat s_real = (t.real_x0 - x_t) / s2;
  const Mat s_fake = (t.fake_x0 - x_t) / s2;
  if (!s_real.allFinite() || !s_fake.allFinite()) throw std::runtime_error("dmd_gradient: non-finite score");
  t.gradient = -(s_real - s_fake);
  return t;
}

Mat dmd_gradient(const Mat& x_hat, double sigma, const Mat& eps, const ScoreModel& real, const ScoreModel& fake,
                 const ScoreCondition& cond) {
  return dmd_terms(x_hat, sigma, eps, real, fake, cond, cond).gradient;
}

double fake_score_update(ScoreModel& fake, std::span<const FakeSample> samples, ag::Adam& opt, NoiseStream& rng) {
  if (fake.role() != ScoreRole::fake) throw std::invalid_argument("fake_score_update: model is not a fake score");
  if (samples.empty()) throw std::invalid_argument("fake_score_update: empty batch");
  const auto& sigmas = fake.schedule().sigmas;
  opt.zero_grad();
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (const FakeSample& s : samples) {
    const double sigma = sigmas[rng.below(sigmas.size())];
    Mat eps(s.x.rows(), s.x.cols());
    rng.fill_normal(eps);
    const Var loss = ag::mse(fake.predict_x0(ag::constant(s.x + sigma * eps), sigma, s.cond), s.x);
    total += loss.value()(0, 0);
    ag::backward(ag::scale(loss, inv));
  }
  opt.step();
  return total * inv;
}

DistillLoss make_distill_loss(double vis, double ctrl, double lambda_ctrl) {
  return {vis, ctrl, lambda_ctrl, vis + lambda_ctrl * ctrl};
}

// ---------------------------------------------------------------------------
// Teachers and causal initialization

void validate_dataset(std::span<const EpisodePair> data, const DenoiserConfig& config) {
  if (data.empty()) throw std::invalid_argument("dataset is empty");
  for (const EpisodePair& p : data) {
    for (const Episode* e : {&p.reference, &p.target}) {
      if (!e->consistent() || e->chunk_frames != config.frames || e->chunk_count() < 1 || e->frames.empty() ||
          e->frames[0].width != config.image_width || e->frames[0].height != config.image_height ||
          e->frames[0].channels != config.channels) {
        throw std::invalid_argument("dataset episode does not match the model config");
      }
    }
    if (p.target.scene_tag < 0 || p.target.scene_tag >= config.tags) throw std::invalid_argument("scene tag out of range");
  }
}

namespace {

void check_plan(const TrainPlan& plan, Stage stage) {
  if (!plan.valid()) throw std::invalid_argument("TrainPlan: invalid");
  if (plan.stage != stage) throw std::invalid_argument("TrainPlan: wrong stage for this trainer");
}

const TrainPlan& checked(const TrainPlan& plan, Stage stage) {
  check_plan(plan, stage);
  return plan;
}

// Log-normal noise level clipped to the schedule range.
double teacher_sigma(NoiseStream& rng, const NoiseSchedule& s) {
  return std::clamp(std::exp(-0.8 + 1.2 * rng.normal()), s.sigmas.back(), s.sigmas.front());
}

}  // namespace

TrainReport train_teacher(Denoiser& model, std::span<const EpisodePair> data, const TrainPlan& plan, ScoreRole role,
                          const MetricsSink& sink) {
  check_plan(plan, Stage::teacher);
  if (role == ScoreRole::fake) throw std::invalid_argument("train_teacher: role must be real or synthetic");
  const DenoiserConfig& cfg = model.config();
  validate_dataset(data, cfg);
  ag::Adam opt(model.parameters(), {.lr = plan.teacher_lr});
  TrainReport report;
  const auto t0 = Clock::now();
  for (long it = 0; it < plan.iterations; ++it) {
    NoiseStream rng(plan.seed, it, 0, "teacher");
    const EpisodePair& pair = data[rng.below(data.size())];
    const int chunk = static_cast<int>(rng.below(static_cast<std::uint64_t>(pair.target.chunk_count())));
    const int tag = pair.target.scene_tag;
    const Mat x0 = chunk_tokens(pair.target, chunk, cfg.patch);
    const double sigma = teacher_sigma(rng, plan.teacher_schedule);
    Mat eps(x0.rows(), x0.cols());
    rng.fill_normal(eps);

    opt.zero_grad();
    std::optional<BlockKV> ref, hist;
    ChunkCondition cond;
    CacheView view;
    if (role == ScoreRole::synthetic) {
      cond = build_condition(cfg, pair.reference, chunk, chunk_poses(pair.target, chunk), {});
      ref = model.encode(ag::constant(cond.reference_tokens), BlockKind::reference, tag);
      view.reference = &*ref;
      if (chunk > 0 && cfg.history_window > 0) {
        hist = model.encode(ag::constant(chunk_tokens(pair.target, chunk - 1, cfg.patch)), BlockKind::history, tag);
        view.history.push_back(&*hist);
      }
    }
    const Mat* geometry = role == ScoreRole::synthetic ? &cond.geometry : nullptr;
    const Var loss = ag::mse(model.denoise(ag::constant(x0 + sigma * eps), sigma, view, geometry, tag), x0);
    ag::backward(loss);
    opt.step();
    report.losses.push_back(loss.value()(0, 0));
    if (sink) {
      sink({{"iteration", it},
            {"stage", "teacher"},
            {"role", to_string(role)},
            {"loss", report.losses.back()},
            {"sigma", sigma},
            {"lr", plan.teacher_lr},
            {"wall", since(t0)}});
    }
  }
  report.seconds = since(t0);
  model.info = {"teacher-" + std::string(to_string(role)), plan.seed, plan.iterations};
  return report;
}

TrainReport causal_init(Denoiser& student, std::span<const EpisodePair> data, const TrainPlan& plan,
                        const MetricsSink& sink) {
  check_plan(plan, Stage::init);
  const DenoiserConfig& cfg = student.config();
  validate_dataset(data, cfg);
  ag::Adam opt(student.parameters(), {.lr = plan.teacher_lr});
  TrainReport report;
  const auto t0 = Clock::now();
  for (long it = 0; it < plan.iterations; ++it) {
    NoiseStream rng(plan.seed, it, 0, "init/pick");
    const EpisodePair& pair = data[rng.below(data.size())];
    const int chunks = std::min(plan.rollout_chunks, pair.target.chunk_count());
    const int tag = pair.target.scene_tag;
    const std::uint64_t rollout_seed = stream_key(plan.seed, it, 0, "init/rollout");

    std::vector<ChunkCondition> conds;
    std::vector<Mat> truth;
    std::vector<BlockKV> refs;
    {
      ag::NoGradGuard no_grad;
      for (int j = 0; j < chunks; ++j) {
        conds.push_back(build_condition(cfg, pair.reference, j, chunk_poses(pair.target, j), {}));
        truth.push_back(chunk_tokens(pair.target, j, cfg.patch));
        refs.push_back(student.encode(ag::constant(conds.back().reference_tokens), BlockKind::reference, tag));
      }
    }
    std::vector<Mat> prefix(static_cast<std::size_t>(chunks));
    const double last_sigma = plan.teacher_schedule.sigmas.back();

    ChunkProgram program;
    program.chunks = chunks;
    program.generate = [&](int j, const CacheView& cache) {
      const auto i = static_cast<std::size_t>(j);
      CacheView view = cache;
      view.reference = &refs[i];
      // The planning pass runs the schedule once; the replay reuses its
      // final noisy input.
      if (!ag::GradMode::enabled()) {
        prefix[i] = sample_prefix(student, view, &conds[i].geometry, tag, plan.teacher_schedule, rollout_seed, j);
      }
      return student.denoise(ag::constant(prefix[i]), last_sigma, view, &conds[i].geometry, tag);
    };
    program.loss = [&](int j, const Var& out) {
      return ag::scale(ag::mse(out, truth[static_cast<std::size_t>(j)]), 1.0 / chunks);
    };
    program.commit = [&](int, const Var& out) { return student.encode(out, BlockKind::history, tag); };
    program.rng_cursor = [&](int j) { return stream_key(rollout_seed, j, 0, "sample"); };

    opt.zero_grad();
    STCache cache(cfg);
    const ReplayResult r = plan_and_replay(cache, program);
    opt.step();
    double loss = 0.0;
    for (double l : r.losses) loss += l;
    report.losses.push_back(loss);
    if (sink) {
      sink({{"iteration", it},
            {"stage", "init"},
            {"loss", loss},
            {"chunks", chunks},
            {"lr", plan.teacher_lr},
            {"peak_activations", r.peak_activations},
            {"wall", since(t0)}});
    }
  }
  report.seconds = since(t0);
  student.info = {"init", plan.seed, plan.iterations};
  return report;
}

// ---------------------------------------------------------------------------
// Joint distribution matching

struct JdmdTrainer::Rollout {
  Task task = Task::v2v;
  int tag = 0;
  std::uint64_t seed = 0;
  std::vector<ChunkCondition> conds;
  std::vector<Mat> outputs;
  double loss = 0.0;

  ScoreCondition condition(int j, int window) const {
    ScoreCondition c;
    c.tag = tag;
    const auto i = static_cast<std::size_t>(j);
    if (task == Task::v2v) {
      c.reference = &conds[i].reference_tokens;
      c.geometry = &conds[i].geometry;
    }
    for (int h = j - 1; h >= 0 && j - h <= window; --h) c.history.push_back(&outputs[static_cast<std::size_t>(h)]);
    return c;
  }
};

JdmdTrainer::JdmdTrainer(DistillModels models, const TrainPlan& plan)
    : m_(models),
      plan_(checked(plan, Stage::jdmd)),
      student_opt_(models.student ? models.student->parameters() : std::vector<ag::Parameter*>{},
                   {.lr = plan.student_lr}),
      fake_vis_opt_(models.fake_vis ? models.fake_vis->parameters() : std::vector<ag::Parameter*>{},
                    {.lr = plan.fake_lr}),
      fake_ctrl_opt_(models.fake_ctrl ? models.fake_ctrl->parameters() : std::vector<ag::Parameter*>{},
                     {.lr = plan.fake_lr}) {
  if (!m_.student || !m_.real || !m_.synthetic || !m_.fake_vis || !m_.fake_ctrl) {
    throw std::invalid_argument("JdmdTrainer: all five models are required");
  }
  const DenoiserConfig& c = m_.student->config();
  for (const Denoiser* d : {m_.real, m_.synthetic, static_cast<const Denoiser*>(m_.fake_vis),
                            static_cast<const Denoiser*>(m_.fake_ctrl)}) {
    if (!(d->config() == c)) throw std::invalid_argument("JdmdTrainer: model configs differ");
  }
}

JdmdTrainer::Rollout JdmdTrainer::run(const JdmdBatch& batch, double weight) {
  const DenoiserConfig& cfg = m_.student->config();
  if ((batch.task == Task::v2v) != (batch.pair != nullptr)) {
    throw std::invalid_argument("jdmd_step: V2V needs a reference pair and T2V must not carry one");
  }
  Rollout r;
  r.task = batch.task;
  r.seed = batch.seed;
  int chunks = plan_.rollout_chunks;
  if (batch.pair) {
    validate_dataset(std::span<const EpisodePair>(batch.pair, 1), cfg);
    r.tag = batch.pair->target.scene_tag;
    chunks = std::min(chunks, batch.pair->target.chunk_count());
  } else {
    if (batch.tag < 0 || batch.tag >= cfg.tags) throw std::invalid_argument("jdmd_step: tag out of range");
    r.tag = batch.tag;
  }
  r.outputs.resize(static_cast<std::size_t>(chunks));

  std::vector<BlockKV> refs;
  if (batch.pair) {
    ag::NoGradGuard no_grad;
    for (int j = 0; j < chunks; ++j) {
      r.conds.push_back(build_condition(cfg, batch.pair->reference, j, chunk_poses(batch.pair->target, j), {}));
      refs.push_back(m_.student->encode(ag::constant(r.conds.back().reference_tokens), BlockKind::reference, r.tag));
    }
  }
  const bool v2v = batch.task == Task::v2v;
  const DenoiserScore teacher(v2v ? ScoreRole::synthetic : ScoreRole::real, v2v ? *m_.synthetic : *m_.real,
                              plan_.teacher_schedule);
  const DenoiserScore fake(ScoreRole::fake, v2v ? *m_.fake_ctrl : *m_.fake_vis, plan_.teacher_schedule);

  const std::uint64_t rollout_seed = stream_key(batch.seed, 0, 0, "jdmd/rollout");
  const double last_sigma = plan_.student_schedule.sigmas.back();
  std::vector<Mat> prefix(static_cast<std::size_t>(chunks));
  std::vector<double> raw(static_cast<std::size_t>(chunks), 0.0);
  auto geometry = [&](std::size_t i) { return v2v ? &r.conds[i].geometry : nullptr; };

  ChunkProgram program;
  program.chunks = chunks;
  program.generate = [&](int j, const CacheView& cache) {
    const auto i = static_cast<std::size_t>(j);
    CacheView view = cache;
    view.reference = v2v ? &refs[i] : nullptr;
    if (!ag::GradMode::enabled()) {
      prefix[i] = sample_prefix(*m_.student, view, geometry(i), r.tag, plan_.student_schedule, rollout_seed, j);
    }
    return m_.student->denoise(ag::constant(prefix[i]), last_sigma, view, geometry(i), r.tag);
  };
  program.commit = [&](int j, const Var& out) {
    r.outputs[static_cast<std::size_t>(j)] = out.value();
    return m_.student->encode(out, BlockKind::history, r.tag);
  };
  program.loss = [&](int j, const Var& out) {
    const Mat& x_hat = out.value();
    NoiseStream ns(batch.seed, j, 0, "jdmd/dmd");
    const auto& sigmas = plan_.teacher_schedule.sigmas;
    const double sigma = sigmas[ns.below(sigmas.size())];
    Mat eps(x_hat.rows(), x_hat.cols());
    ns.fill_normal(eps);
    const ScoreCondition cond = r.condition(j, cfg.history_window);
    const DmdTerms t = dmd_terms(x_hat, sigma, eps, teacher, fake, cond, cond);
    // Per-sample normalization by the teacher's mean absolute x0 error keeps
    // the step size comparable across noise levels.
    const double denom = std::max((x_hat - t.real_x0).cwiseAbs().mean(), 1e-8);
    const Mat g = t.gradient * (sigma * sigma / denom);
    raw[static_cast<std::size_t>(j)] = 0.5 * g.squaredNorm() / static_cast<double>(g.size());
    return ag::scale(ag::mse(out, x_hat - g), 0.5 * weight / chunks);
  };
  program.rng_cursor = [&](int j) { return stream_key(rollout_seed, j, 0, "sample"); };

  STCache cache(cfg);
  plan_and_replay(cache, program);
  for (double v : raw) r.loss += v / chunks;
  return r;
}

void JdmdTrainer::update_fake(const Rollout& r) {
  const bool v2v = r.task == Task::v2v;
  DenoiserScore fake(v2v ? *m_.fake_ctrl : *m_.fake_vis, plan_.teacher_schedule);
  std::vector<FakeSample> samples;
  for (std::size_t j = 0; j < r.outputs.size(); ++j) {
    samples.push_back({r.outputs[j], r.condition(static_cast<int>(j), m_.student->config().history_window)});
  }
  NoiseStream rng(r.seed, 0, 0, "jdmd/fake");
  fake_score_update(fake, samples, v2v ? fake_ctrl_opt_ : fake_vis_opt_, rng);
}

DistillLoss JdmdTrainer::step(const JdmdBatch& batch) {
  student_opt_.zero_grad();
  const double weight = batch.task == Task::v2v ? plan_.lambda_ctrl : 1.0;
  const Rollout r = run(batch, weight);
  student_opt_.step();
  update_fake(r);
  return batch.task == Task::v2v ? make_distill_loss(0.0, r.loss, plan_.lambda_ctrl)
                                 : make_distill_loss(r.loss, 0.0, plan_.lambda_ctrl);
}

DistillLoss JdmdTrainer::joint_step(const JdmdBatch& v2v, const JdmdBatch& t2v) {
  if (v2v.task != Task::v2v || t2v.task != Task::t2v) throw std::invalid_argument("joint_step: task order is V2V, T2V");
  student_opt_.zero_grad();
  const Rollout rc = run(v2v, plan_.lambda_ctrl);
  const Rollout rv = run(t2v, 1.0);
  student_opt_.step();
  update_fake(rc);
  update_fake(rv);
  return make_distill_loss(rv.loss, rc.loss, plan_.lambda_ctrl);
}

DistillLoss jdmd_step(JdmdTrainer& trainer, const JdmdBatch& batch) { return trainer.step(batch); }

TrainReport train_jdmd(DistillModels models, std::span<const EpisodePair> data, std::span<const int> tags,
                       const TrainPlan& plan, const MetricsSink& sink) {
  JdmdTrainer trainer(models, plan);
  const bool needs_pairs = plan.tasks != TaskSchedule::t2v_only;
  const bool needs_tags = plan.tasks != TaskSchedule::v2v_only;
  if (needs_pairs) validate_dataset(data, models.student->config());
  if (needs_tags && tags.empty()) throw std::invalid_argument("train_jdmd: no scene tags for the T2V task");
  TrainReport report;
  const auto t0 = Clock::now();
  for (long it = 0; it < plan.iterations; ++it) {
    // Both draws happen every iteration so that each task sees the same
    // batches whatever the schedule.
    NoiseStream pick(plan.seed, it, 0, "jdmd/pick");
    const std::uint64_t pair_index = data.empty() ? 0 : pick.below(data.size());
    const std::uint64_t tag_index = tags.empty() ? 0 : pick.below(tags.size());
    JdmdBatch v2v{Task::v2v, data.empty() ? nullptr : &data[pair_index], 0, stream_key(plan.seed, it, 1, "jdmd/batch")};
    JdmdBatch t2v{Task::t2v, nullptr, tags.empty() ? 0 : tags[tag_index], stream_key(plan.seed, it, 2, "jdmd/batch")};
    DistillLoss loss;
    std::string task;
    if (plan.tasks == TaskSchedule::joint) {
      loss = trainer.joint_step(v2v, t2v);
      task = "joint";
    } else {
      const Task t = plan.task_at(it);
      loss = trainer.step(t == Task::v2v ? v2v : t2v);
      task = to_string(t);
    }
    report.losses.push_back(loss.total);
    if (sink) {
      sink({{"iteration", it},
            {"stage", "jdmd"},
            {"task", task},
            {"vis", loss.vis},
            {"ctrl", loss.ctrl},
            {"lambda_ctrl", loss.lambda_ctrl},
            {"total", loss.total},
            {"student_lr", plan.student_lr},
            {"fake_lr", plan.fake_lr},
            {"wall", since(t0)}});
    }
  }
  report.seconds = since(t0);
  models.student->info = {"jdmd", plan.seed, plan.iterations};
  return report;
}

double high_frequency_energy(std::span<const Image> frames) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Image& im : frames) {
    for (int y = 1; y + 1 < im.height; ++y) {
      for (int x = 1; x + 1 < im.width; ++x) {
        for (int c = 0; c < im.channels; ++c) {
          double blur = 0.0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) blur += im.at(x + dx, y + dy, c);
          }
          const double d = im.at(x, y, c) - blur / 9.0;
          sum += d * d;
          ++n;
        }
      }
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

GaussianRegressionResult gaussian_regression(const GaussianRegressionOptions& o) {
  const Eigen::Index d = o.real_mean.size();
  if (d == 0 || o.student_init.size() != d || o.batch <= 0 || o.steps < 0) {
    throw std::invalid_argument("gaussian_regression: bad options");
  }
  const GaussianScore real(ScoreRole::real, o.real_mean, o.variance);
  GaussianScore fake(ScoreRole::fake, o.real_mean, o.variance);
  ag::Parameter student("student.mean", Mat(o.student_init));
  ag::Adam student_opt({&student}, {.lr = o.student_lr});
  ag::Adam fake_opt(fake.parameters(), {.lr = o.fake_lr});
  const auto& sigmas = real.schedule().sigmas;
  const double sd = std::sqrt(o.variance);

  GaussianRegressionResult res;
  for (int step = 0; step < o.steps; ++step) {
    NoiseStream rng(o.seed, step, 0, "gaussian");
    std::vector<FakeSample> samples;
    Mat grad = Mat::Zero(1, d);
    for (int b = 0; b < o.batch; ++b) {
      Mat z(1, d), eps(1, d);
      rng.fill_normal(z);
      rng.fill_normal(eps);
      const Mat x_hat = student.value + sd * z;
      const double sigma = sigmas[rng.below(sigmas.size())];
      grad += dmd_gradient(x_hat, sigma, eps, real, fake);
      samples.push_back({x_hat, {}});
    }
    if (o.cosine_decay) {
      const double f = 0.5 * (1.0 + std::cos(M_PI * step / std::max(o.steps, 1)));
      student_opt.set_lr(o.student_lr * f);
      fake_opt.set_lr(o.fake_lr * f);
    }
    student_opt.zero_grad();
    student.grad = grad / o.batch;
    student_opt.step();
    for (int k = 0; k < o.fake_steps; ++k) fake_score_update(fake, samples, fake_opt, rng);
    res.distance.push_back((student.value - Mat(o.real_mean)).norm());
  }
  res.student_mean = student.value;
  res.fake_mean = fake.mean();
  return res;
}

}  // namespace star
