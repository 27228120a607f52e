// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// star: dataset generation, training stages, scripted roaming, evaluation
// and the interactive server.

#include "star/distill.hpp"
#include "star/engine.hpp"
#include "star/io.hpp"
#include "star/server.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace star;

namespace {

struct RunConfig {
  DenoiserConfig model;
  TrainPlan plan;
};

RunConfig read_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  const nlohmann::json j = nlohmann::json::parse(read_text(path));
  if (j.contains("model")) rc.model = j.at("model").get<DenoiserConfig>();
  if (j.contains("plan")) rc.plan = j.at("plan").get<TrainPlan>();
  if (!rc.model.valid()) throw std::invalid_argument("config: invalid model section");
  return rc;
}

// Stage recorded in a checkpoint, mapped onto the training order.
Stage checkpoint_stage(const Denoiser& d) {
  if (d.info.stage.starts_with("teacher")) return Stage::teacher;
  return parse_stage(d.info.stage);
}

std::unique_ptr<Denoiser> load_checked(const std::string& path, Stage next) {
  auto d = Denoiser::load(path);
  if (d->info.stage == "none" || !stage_transition_ok(checkpoint_stage(*d), next)) {
    throw std::invalid_argument(path + ": stage '" + d->info.stage + "' cannot feed stage " +
                                std::string(to_string(next)));
  }
  return d;
}

int cmd_mkdata(const std::string& out, DatasetOptions o, const std::string& style, const std::string& difficulty,
               std::uint64_t seed) {
  o.style = parse_texture_style(style);
  o.difficulty = parse_difficulty(difficulty);
  write_dataset(seed, o, out);
  std::printf("wrote %d pairs to %s\n", o.count, out.c_str());
  return 0;
}

struct TrainArgs {
  std::string stage = "teacher";
  std::string role = "synthetic";
  std::string config;
  std::string data;
  std::string out;
  std::string init;
  std::string real;
  std::string synthetic;
  std::string metrics;
  std::uint64_t seed = 0;
  long iterations = -1;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = read_config(a.config);
  TrainPlan plan = rc.plan;
  plan.stage = parse_stage(a.stage);
  plan.seed = a.seed;
  if (a.iterations >= 0) plan.iterations = a.iterations;
  if (!plan.valid()) throw std::invalid_argument("train: invalid plan");

  std::ofstream metrics_file;
  if (!a.metrics.empty()) metrics_file.open(a.metrics);
  std::ostream& metrics = a.metrics.empty() ? std::cout : metrics_file;
  const MetricsSink sink = [&](const nlohmann::json& j) { metrics << j.dump() << '\n' << std::flush; };

  const std::vector<EpisodePair> data = load_dataset(a.data);
  std::unique_ptr<Denoiser> model;
  switch (plan.stage) {
    case Stage::teacher: {
      model = a.init.empty() ? std::make_unique<Denoiser>(rc.model, a.seed) : load_checked(a.init, Stage::teacher);
      const ScoreRole role = a.role == "real" ? ScoreRole::real : ScoreRole::synthetic;
      if (a.role != "real" && a.role != "synthetic") throw std::invalid_argument("--role must be real or synthetic");
      train_teacher(*model, data, plan, role, sink);
      break;
    }
    case Stage::init: {
      if (a.init.empty()) throw std::invalid_argument("init stage needs --init (a teacher checkpoint)");
      model = load_checked(a.init, Stage::init);
      causal_init(*model, data, plan, sink);
      break;
    }
    case Stage::jdmd: {
      if (a.init.empty() || a.real.empty() || a.synthetic.empty()) {
        throw std::invalid_argument("jdmd stage needs --init, --real and --synthetic checkpoints");
      }
      model = load_checked(a.init, Stage::jdmd);
      const auto real = Denoiser::load(a.real);
      const auto synthetic = Denoiser::load(a.synthetic);
      // Both fakes start as the student, the best available model of its own
      // output distribution.
      Denoiser fake_vis(model->config(), 0), fake_ctrl(model->config(), 0);
      fake_vis.copy_from(*model);
      fake_ctrl.copy_from(*model);
      std::vector<int> tags(static_cast<std::size_t>(model->config().tags));
      for (std::size_t i = 0; i < tags.size(); ++i) tags[i] = static_cast<int>(i);
      train_jdmd({model.get(), real.get(), synthetic.get(), &fake_vis, &fake_ctrl}, data, tags, plan, sink);
      break;
    }
  }
  model->save(a.out);
  std::fprintf(stderr, "saved %s checkpoint to %s\n", model->info.stage.c_str(), a.out.c_str());
  return 0;
}

struct RoamArgs {
  std::string model;
  std::string reference;
  std::string script;
  std::string out;
  std::uint64_t seed = 0;
  bool point_memory = false;
};

int cmd_roam(const RoamArgs& a) {
  const auto model = Denoiser::load(a.model);
  Episode ref = load_episode(a.reference);
  SessionOptions o;
  o.seed = a.seed;
  if (a.point_memory) {
    o.point_memory = true;
    o.depth = oracle_depth(build_scene(ref.scene_seed, ref.difficulty, ref.style), ref.intrinsics);
  }
  Session session(*model, std::move(ref), o);
  const auto script = load_commands(a.script);
  const RunRecord run = roam(session, script);
  save_run(run, a.out);
  std::printf("roamed %d chunks in %.3f s -> %s\n", run.chunks(), run.seconds, a.out.c_str());
  return 0;
}

int cmd_eval(const std::string& dir) {
  const RunRecord run = load_run(dir);
  const SceneSpec scene = build_scene(run.scene_seed, run.difficulty, run.style);
  const RunMetrics m = evaluate_run(run, scene);
  nlohmann::json j = to_json(m);
  const auto truth = oracle_frames(run, scene);
  j["copy_last_frame_psnr"] = masked_psnr(copy_last_frame_baseline(run, scene), truth, run.masks);
  j["high_frequency_energy"] = high_frequency_energy(run.frames);
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"star: interactive world generation"};
  app.require_subcommand(1);

  auto* mk = app.add_subcommand("mkdata", "Render a micro-world dataset of episode pairs");
  std::string mk_out, mk_style = "sharp", mk_difficulty = "static";
  DatasetOptions mk_opts;
  int mk_size = 64;
  std::uint64_t mk_seed = 0;
  mk->add_option("--out", mk_out, "Output directory")->required();
  mk->add_option("--count", mk_opts.count, "Episode pairs");
  mk->add_option("--chunks", mk_opts.chunks, "Chunks per episode");
  mk->add_option("--frames", mk_opts.chunk_frames, "Frames per chunk");
  mk->add_option("--size", mk_size, "Frame width and height");
  mk->add_option("--style", mk_style, "sharp or blurred");
  mk->add_option("--difficulty", mk_difficulty, "static or dynamic");
  mk->add_option("--seed", mk_seed, "Base scene seed");

  auto* tr = app.add_subcommand("train", "Run one training stage");
  TrainArgs ta;
  tr->add_option("--stage", ta.stage, "teacher, init or jdmd")->required();
  tr->add_option("--role", ta.role, "Teacher role: real or synthetic");
  tr->add_option("--config", ta.config, "JSON with optional model and plan sections");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Checkpoint directory")->required();
  tr->add_option("--seed", ta.seed, "Seed");
  tr->add_option("--init", ta.init, "Starting checkpoint");
  tr->add_option("--real", ta.real, "Real (perceptual) teacher checkpoint");
  tr->add_option("--synthetic", ta.synthetic, "Synthetic (motion) teacher checkpoint");
  tr->add_option("--iterations", ta.iterations, "Override plan iterations");
  tr->add_option("--metrics", ta.metrics, "NDJSON metrics file (default stdout)");

  auto* ro = app.add_subcommand("roam", "Run a scripted roam headlessly");
  RoamArgs ra;
  ro->add_option("--model", ra.model, "Student checkpoint")->required();
  ro->add_option("--reference", ra.reference, "Reference episode directory")->required();
  ro->add_option("--script", ra.script, "Command script JSON")->required();
  ro->add_option("--out", ra.out, "Run directory")->required();
  ro->add_option("--seed", ra.seed, "Sampling seed");
  ro->add_flag("--point-memory", ra.point_memory, "Splat generated content back into the warp");

  auto* ev = app.add_subcommand("eval", "Evaluate a run against oracle renders");
  std::string ev_run;
  ev->add_option("--run", ev_run, "Run directory")->required();

  auto* sv = app.add_subcommand("serve", "Serve interactive sessions over WebSocket");
  ServerOptions so;
  std::string sv_ckpt, sv_bind = "127.0.0.1:8080";
  sv->add_option("--ckpt", sv_ckpt, "Student checkpoint")->required();
  sv->add_option("--bind", sv_bind, "host:port (port 0 picks a free one)");
  sv->add_option("--episodes", so.episodes, "Directory of reference episodes addressed by id");
  sv->add_option("--ui", so.ui_dir, "Static files to serve over HTTP");
  sv->add_option("--seed", so.session.seed, "Sampling seed");
  sv->add_flag("--png", so.png_frames, "Send frames as PNG instead of raw float32");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*mk) {
      mk_opts.width = mk_opts.height = mk_size;
      return cmd_mkdata(mk_out, mk_opts, mk_style, mk_difficulty, mk_seed);
    }
    if (*tr) return cmd_train(ta);
    if (*ro) return cmd_roam(ra);
    if (*ev) return cmd_eval(ev_run);
    if (*sv) {
      const auto colon = sv_bind.rfind(':');
      if (colon == std::string::npos) throw std::invalid_argument("--bind must be host:port");
      so.host = sv_bind.substr(0, colon);
      so.port = static_cast<unsigned short>(std::stoi(sv_bind.substr(colon + 1)));
      const auto model = Denoiser::load(sv_ckpt);
      Server server(*model, so);
      std::fprintf(stderr, "listening on %s:%d\n", so.host.c_str(), server.port());
      server.run();
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "star: %s\n", e.what());
    return 1;
  }
  return 0;
}
