#include "fusionformer/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusionformer/checkpoint.hpp"
#include "fusionformer/data.hpp"
#include "fusionformer/error.hpp"
#include "fusionformer/gradcheck.hpp"
#include "fusionformer/metrics.hpp"
#include "fusionformer/model.hpp"
#include "fusionformer/train.hpp"

namespace fs = std::filesystem;

namespace ff {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw Error("failed writing '" + path.string() + "'");
}

std::uint64_t env_seed() {
  const char* s = std::getenv("FUSIONFORMER_SEED");
  if (!s || !*s) return 0;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("FUSIONFORMER_SEED is not an unsigned integer: '") + s + "'");
  }
}

// Model and training configuration merged from an optional JSON file of the
// form {"model": {...}, "train": {...}}. `joints_set` reports whether the file
// fixed the joint count.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool joints_set = false;
  bool seed_set = false;
};

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config", e.what());
  }
  if (!j.is_object()) throw FormatError("config", "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      rc.model = value.get<ModelConfig>();
      rc.joints_set = value.contains("joints");
    } else if (key == "train") {
      rc.train = value.get<TrainConfig>();
      rc.seed_set = value.contains("seed");
    } else {
      throw FormatError("config." + key, "unknown key");
    }
  }
  return rc;
}

Dataset load_windows(const std::string& path, std::size_t frames, std::size_t stride) {
  const Dataset ds = load_pose_file(path);
  return window_dataset(ds, frames, stride);
}

void check_joints(const ModelConfig& cfg, const Dataset& ds) {
  if (cfg.joints != ds.skeleton.size()) {
    throw ConfigError("model expects " + std::to_string(cfg.joints) + " joints, data has " +
                      std::to_string(ds.skeleton.size()));
  }
}

RefineSource parse_refine_source(const std::string& s) {
  if (s == "input") return RefineSource::input;
  if (s == "gt") return RefineSource::gt;
  throw ConfigError("--refine-source must be 'input' or 'gt'");
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  bool seed_given = false;
  SynthOptions opt;
  std::string out;
};

void cmd_synth(const SynthArgs& a) {
  if (a.opt.frames % 2 == 0) {
    throw ConfigError("--frames must be odd so that a centre frame exists, got " +
                      std::to_string(a.opt.frames));
  }
  const std::uint64_t seed = a.seed_given ? a.seed : env_seed();
  save_pose_file(a.out, synth_dataset(seed, a.opt));
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string val_data;
  std::string out_dir;
  std::string refine_source;
  std::string resume;
  bool flip_augment = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::size_t stride = 1;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  if (a.seed) {
    rc.train.seed = *a.seed;
  } else if (!rc.seed_set) {
    rc.train.seed = env_seed();
  }
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.flip_augment) rc.train.flip_augment = true;
  if (!a.refine_source.empty()) rc.train.refine_source = parse_refine_source(a.refine_source);

  const Dataset raw = load_pose_file(a.data);
  if (!rc.joints_set) rc.model.joints = raw.skeleton.size();
  rc.model.validate();
  rc.train.validate();
  const Dataset data = window_dataset(raw, rc.model.frames, a.stride);
  check_joints(rc.model, data);
  std::optional<Dataset> val;
  if (!a.val_data.empty()) {
    val = load_windows(a.val_data, rc.model.frames, a.stride);
    check_joints(rc.model, *val);
  }

  TrainSession session;
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    if (!(ck.model == rc.model)) throw ConfigError("resume checkpoint has a different model config");
    session = restore_session(ck);
  } else {
    session.params = init_params(rc.model, rc.train.seed);
  }

  const fs::path dir(a.out_dir);
  fs::create_directories(dir / "checkpoints");
  nlohmann::json echo;
  echo["model"] = rc.model;
  echo["train"] = rc.train;
  echo["data"] = a.data;
  if (!a.val_data.empty()) echo["val_data"] = a.val_data;
  echo["window_stride"] = a.stride;
  write_text(dir / "config.json", echo.dump(2) + "\n");

  // A resumed run appends to the existing log.
  std::ofstream log(dir / "loss_log.txt", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("cannot write loss log in '" + dir.string() + "'");

  auto on_epoch = [&](const EpochLog& e) {
    log << e.epoch << ' ' << fmt(e.lr) << ' ' << fmt(e.train_loss) << ' ' << fmt(e.val_mpjpe) << '\n';
    log.flush();
    out << "epoch " << e.epoch << " lr " << fmt(e.lr) << " train_loss " << fmt(e.train_loss)
        << " val_mpjpe " << fmt(e.val_mpjpe) << '\n';
    const bool milestone = rc.train.checkpoint_every && (e.epoch + 1) % rc.train.checkpoint_every == 0;
    if (milestone || e.epoch + 1 == rc.train.epochs) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.ffkt", e.epoch + 1);
      save_checkpoint(dir / "checkpoints" / name, make_checkpoint(rc.model, rc.train, session));
    }
  };
  train(session, rc.model, data, rc.train, val ? &*val : nullptr, on_epoch);

  save_checkpoint(dir / "model.ffkt", make_checkpoint(rc.model, rc.train, session));
  const MetricReport report = evaluate(session.params, rc.model, val ? *val : data, {});
  write_text(dir / "report.json", nlohmann::json(report).dump(2) + "\n");
}

// ---- eval / infer -----------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string report = "report.json";
  bool flip_ensemble = false;
  std::size_t stride = 1;
  double mm_per_unit = 1000.0;
  double pck_threshold_mm = 150.0;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainSession s = restore_session(ck);
  const Dataset data = load_windows(a.data, ck.model.frames, a.stride);
  check_joints(ck.model, data);
  EvalOptions opt;
  opt.flip_ensemble = a.flip_ensemble;
  opt.metrics.mm_per_unit = a.mm_per_unit;
  opt.metrics.pck_threshold_mm = a.pck_threshold_mm;
  const MetricReport r = evaluate(s.params, ck.model, data, opt);
  out << to_key_value(r);
  write_text(a.report, nlohmann::json(r).dump(2) + "\n");
}

struct InferArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::size_t stride = 1;
};

void cmd_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainSession s = restore_session(ck);
  const Dataset data = load_windows(a.data, ck.model.frames, a.stride);
  check_joints(ck.model, data);
  Dataset result;
  result.skeleton = data.skeleton;
  result.split = "prediction";
  result.clips.resize(data.clips.size());
  const std::size_t c = ck.model.center();
  const std::size_t row = ck.model.joints * 3;
  for (std::size_t i = 0; i < data.clips.size(); ++i) {
    NoGradGuard guard;
    const ForwardResult r = model_forward(data.clips[i].frames_2d, s.params, ck.model);
    // The sequence with its centre frame replaced by the refined pose.
    std::vector<double> seq(r.sequence.data().begin(), r.sequence.data().end());
    std::copy(r.center.data().begin(), r.center.data().end(), seq.begin() + c * row);
    PoseClip& clip = result.clips[i];
    clip.frames_2d = data.clips[i].frames_2d;
    clip.frames_3d = Tensor::from(r.sequence.shape(), std::move(seq));
    clip.fps = data.clips[i].fps;
  }
  save_pose_file(a.out, result);
}

// ---- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
  std::string config;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::optional<std::uint64_t> seed;
  std::string inject_fault;
  double fault_factor = 1.5;
};

ModelConfig toy_config() {
  ModelConfig c;
  c.frames = 3;
  c.joints = 3;
  c.dim = 4;
  c.heads = 2;
  c.cte_heads = 2;
  c.spatial_layers = c.temporal_layers = c.ste_layers = c.cte_layers = 1;
  c.refine_hidden = 4;
  return c;
}

bool cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  ModelConfig cfg = toy_config();
  std::uint64_t seed = 0;
  if (!a.config.empty()) {
    const RunConfig rc = load_run_config(a.config);
    cfg = rc.model;
    seed = rc.seed_set ? rc.train.seed : env_seed();
  } else {
    seed = env_seed();
  }
  if (a.seed) seed = *a.seed;
  if (!(a.step > 0.0)) throw ConfigError("--step must be positive");

  struct FaultScope {
    explicit FaultScope(const std::string& op, double f) {
      if (!op.empty()) debug::inject_gradient_fault(op, f);
    }
    ~FaultScope() { debug::clear_gradient_fault(); }
  } fault(a.inject_fault, a.fault_factor);

  std::vector<std::pair<std::string, GradCheckResult>> rows;
  for (const auto& r : check_primitive_ops(seed, a.step)) rows.emplace_back("op:" + r.worst, r);
  const GradCheckResult model = check_model_gradients(cfg, seed, a.step);
  rows.emplace_back("model:" + model.worst, model);

  // A failing primitive names the broken backward rule directly, so it is
  // reported ahead of the end-to-end result it contaminates.
  const std::pair<std::string, GradCheckResult>* worst_op = nullptr;
  const std::pair<std::string, GradCheckResult>* worst = nullptr;
  for (const auto& row : rows) {
    out << row.first << " max_rel_error=" << fmt(row.second.max_rel_error) << '\n';
    if (!worst || row.second.max_rel_error > worst->second.max_rel_error) worst = &row;
    if (&row != &rows.back() &&
        (!worst_op || row.second.max_rel_error > worst_op->second.max_rel_error)) {
      worst_op = &row;
    }
  }
  if (worst_op && !(worst_op->second.max_rel_error < a.tolerance)) worst = worst_op;
  const bool pass = worst->second.max_rel_error < a.tolerance;
  out << (pass ? "PASS" : "FAIL") << " worst=" << worst->first
      << " index=" << worst->second.worst_index
      << " max_rel_error=" << fmt(worst->second.max_rel_error) << " tolerance=" << fmt(a.tolerance)
      << '\n';
  return pass;
}

// ---- export-attention ----------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t clip = 0;
  std::size_t stride = 1;
};

void cmd_export_attention(const ExportArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TrainSession s = restore_session(ck);
  const ModelConfig& cfg = ck.model;
  if (!cfg.lim_enabled) throw ConfigError("model has no cross-trajectory encoder (lim_enabled=false)");
  if (a.layer >= cfg.cte_layers) {
    throw ConfigError("--layer " + std::to_string(a.layer) + " out of range (model has " +
                      std::to_string(cfg.cte_layers) + " cross-trajectory layers)");
  }
  if (a.head >= cfg.cte_heads) {
    throw ConfigError("--head " + std::to_string(a.head) + " out of range (model has " +
                      std::to_string(cfg.cte_heads) + " cross-trajectory heads)");
  }
  const Dataset data = load_windows(a.data, cfg.frames, a.stride);
  check_joints(cfg, data);
  if (a.clip >= data.clips.size()) {
    throw ConfigError("--clip " + std::to_string(a.clip) + " out of range (" +
                      std::to_string(data.clips.size()) + " windows)");
  }
  NoGradGuard guard;
  const ForwardResult r = model_forward(data.clips[a.clip].frames_2d, s.params, cfg);
  const AttentionMap* map = r.trace.find("cte", a.layer);
  if (!map) throw Error("cross-trajectory attention was not recorded");
  const std::size_t J = cfg.joints;
  const auto w = map->weights.data();
  const std::size_t base = a.head * J * J;

  std::ostringstream csv;
  csv << "query";
  for (const auto& name : data.skeleton.joints) csv << ',' << name;
  csv << '\n';
  for (std::size_t q = 0; q < J; ++q) {
    csv << data.skeleton.joints[q];
    for (std::size_t k = 0; k < J; ++k) csv << ',' << fmt(w[base + q * J + k]);
    csv << '\n';
  }
  write_text(a.out, csv.str());
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fusionformer 2D-to-3D pose lifting"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  SynthArgs synth;
  auto* sc = app.add_subcommand("synth", "Generate a synthetic pose file");
  sc->add_option("--seed", synth.seed, "Random seed (falls back to FUSIONFORMER_SEED)")
      ->each([&](const std::string&) { synth.seed_given = true; });
  sc->add_option("--clips", synth.opt.clips, "Number of clips")->capture_default_str();
  sc->add_option("--frames", synth.opt.frames, "Frames per clip (odd)")->capture_default_str();
  sc->add_option("--skeleton", synth.opt.skeleton, "Skeleton preset")
      ->capture_default_str()
      ->check(CLI::IsMember({"synthetic9", "h36m17"}));
  sc->add_option("--fps", synth.opt.fps, "Frame rate")->capture_default_str();
  sc->add_option("--noise", synth.opt.noise_sigma, "Std-dev of 2D noise")->capture_default_str();
  sc->add_option("--out", synth.out, "Output pose file")->required();

  TrainArgs targs;
  auto* tc = app.add_subcommand("train", "Train a model");
  tc->add_option("--config", targs.config, "Config JSON {\"model\":{...},\"train\":{...}}");
  tc->add_option("--data", targs.data, "Training pose file")->required();
  tc->add_option("--val-data", targs.val_data, "Validation pose file (default: training data)");
  tc->add_option("--out-dir", targs.out_dir, "Run directory")->required();
  tc->add_option("--refine-source", targs.refine_source, "Refinement reference: input or gt")
      ->check(CLI::IsMember({"input", "gt"}));
  tc->add_flag("--flip-augment", targs.flip_augment, "Add mirrored copies of every clip");
  tc->add_option("--seed", targs.seed, "Seed (falls back to config, then FUSIONFORMER_SEED)");
  tc->add_option("--epochs", targs.epochs, "Override the epoch count");
  tc->add_option("--stride", targs.stride, "Window stride")->capture_default_str();
  tc->add_option("--resume", targs.resume, "Continue from a checkpoint");

  EvalArgs eargs;
  auto* ec = app.add_subcommand("eval", "Evaluate a checkpoint");
  ec->add_option("--checkpoint", eargs.checkpoint, "Checkpoint file")->required();
  ec->add_option("--data", eargs.data, "Pose file with 3D ground truth")->required();
  ec->add_flag("--flip-ensemble", eargs.flip_ensemble, "Average with the mirrored prediction");
  ec->add_option("--report", eargs.report, "Report JSON path")->capture_default_str();
  ec->add_option("--stride", eargs.stride, "Window stride")->capture_default_str();
  ec->add_option("--mm-per-unit", eargs.mm_per_unit, "Millimetres per data unit")->capture_default_str();
  ec->add_option("--pck-threshold", eargs.pck_threshold_mm, "PCK threshold in mm")->capture_default_str();

  InferArgs iargs;
  auto* ic = app.add_subcommand("infer", "Predict 3D poses");
  ic->add_option("--checkpoint", iargs.checkpoint, "Checkpoint file")->required();
  ic->add_option("--data", iargs.data, "Input pose file")->required();
  ic->add_option("--out", iargs.out, "Output pose file")->required();
  ic->add_option("--stride", iargs.stride, "Window stride")->capture_default_str();

  GradcheckArgs gargs;
  auto* gc = app.add_subcommand("gradcheck", "Compare gradients with finite differences");
  gc->add_option("--config", gargs.config, "Config JSON (default: T=3, J=3, D=4, one layer each)");
  gc->add_option("--tolerance", gargs.tolerance, "Maximum relative error")->capture_default_str();
  gc->add_option("--step", gargs.step, "Finite-difference step")->capture_default_str();
  gc->add_option("--seed", gargs.seed, "Seed (falls back to FUSIONFORMER_SEED)");
  gc->add_option("--inject-fault", gargs.inject_fault, "Corrupt the backward rule of this op (testing)");
  gc->add_option("--fault-factor", gargs.fault_factor, "Gradient scale of the injected fault")
      ->capture_default_str();

  ExportArgs xargs;
  auto* xc = app.add_subcommand("export-attention", "Write cross-trajectory attention as CSV");
  xc->add_option("--checkpoint", xargs.checkpoint, "Checkpoint file")->required();
  xc->add_option("--data", xargs.data, "Input pose file")->required();
  xc->add_option("--layer", xargs.layer, "Cross-trajectory layer (0-based)")->capture_default_str();
  xc->add_option("--head", xargs.head, "Attention head (0-based)")->capture_default_str();
  xc->add_option("--clip", xargs.clip, "Window index")->capture_default_str();
  xc->add_option("--stride", xargs.stride, "Window stride")->capture_default_str();
  xc->add_option("--out", xargs.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    err << "error: " << msg << '\n';
    return 2;
  }

  try {
    if (sc->parsed()) cmd_synth(synth);
    if (tc->parsed()) cmd_train(targs, out);
    if (ec->parsed()) cmd_eval(eargs, out);
    if (ic->parsed()) cmd_infer(iargs);
    if (gc->parsed() && !cmd_gradcheck(gargs, out)) return 1;
    if (xc->parsed()) cmd_export_attention(xargs);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    err << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ff
