// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `transcrowd` executable. Each returns a
// process exit status; failures print one `error\t<kind>\t<message>` line.

#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "transcrowd/checkpoint.hpp"
#include "transcrowd/eval.hpp"
#include "transcrowd/gradcheck.hpp"
#include "transcrowd/model.hpp"
#include "transcrowd/optim.hpp"
#include "transcrowd/run_config.hpp"
#include "transcrowd/synth.hpp"

namespace transcrowd {

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"synth", "train", "eval", "infer", "gradcheck", "attnmap"};
  return names;
}

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Gradient check of the full model (embed, encoder, head, L1 loss) on a
// one-image synthetic batch.
inline GradCheckResult model_grad_check(const ModelConfig& config, std::uint64_t seed, const GradCheckOptions& options) {
  Model model = init_model(config, seed);
  SynthSpec spec;
  spec.canvas = config.image;
  spec.count_min = 12;
  spec.count_max = 24;
  spec.radius = std::max(1.0, static_cast<double>(config.image) / 32.0);
  spec.seed = seed;
  const Sample sample = synth_one(spec, 0);
  const PatchBatch batch = make_patch_batch(to_tiles(sample.image, config.image), {sample.count}, config.patch,
                                            Normalization{}, {to_tiles(sample.image, config.image).size()});
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  auto loss = [&] {
    return l1_loss(sum_tiles(forward(model, batch.data).predictions, batch.tile_counts), batch.labels);
  };
  return grad_check(loss, params, options);
}

namespace detail {

inline const std::string& require(const std::string& value, const char* key) {
  if (value.empty()) throw UsageError(std::string("missing required option --") + key);
  return value;
}

inline std::uint64_t require_seed(const RunConfig& cfg) {
  if (!cfg.seed) throw UsageError("missing required option --seed (no implicit entropy)");
  return *cfg.seed;
}

// Normalisation recorded with the checkpoint wins over the current config.
inline Normalization normalization_for(const Checkpoint& ck, const RunConfig& cfg) {
  Normalization n = cfg.train.normalization;
  if (ck.run.is_object() && ck.run.contains("normalize") && ck.run["normalize"].is_boolean()) {
    n.enabled = ck.run["normalize"].get<bool>();
  }
  return n;
}

inline std::optional<Quadrant> parse_quadrant(const std::string& q) {
  if (q.empty()) return std::nullopt;
  if (q == "tl") return Quadrant::TopLeft;
  if (q == "tr") return Quadrant::TopRight;
  if (q == "bl") return Quadrant::BottomLeft;
  return Quadrant::BottomRight;
}

inline int run_synth(const RunConfig& cfg, std::ostream& out) {
  SynthSpec spec;
  spec.canvas = cfg.canvas ? cfg.canvas : cfg.model().image;
  spec.count_min = cfg.count_min;
  spec.count_max = cfg.count_max;
  spec.radius = cfg.radius;
  spec.noise = cfg.noise;
  spec.seed = require_seed(cfg);
  spec.region = parse_quadrant(cfg.quadrant);
  const auto& dir = require(cfg.out, "out");
  const auto files = write_dataset(dir, synth_generate(spec, cfg.n));
  out << "wrote\t" << files.size() << '\t' << dir << '\n';
  return 0;
}

inline int run_train(const RunConfig& cfg, std::ostream& out) {
  TrainConfig tc = cfg.train;
  tc.seed = require_seed(cfg);
  const std::filesystem::path ckpt = require(cfg.checkpoint, "checkpoint");
  const auto data = read_dataset(require(cfg.data, "data"));
  const auto held_out = cfg.eval_data.empty() ? std::vector<Sample>{} : read_dataset(cfg.eval_data);
  const auto& eval_set = held_out.empty() ? data : held_out;

  Model model;
  AdamState state;
  if (!cfg.resume.empty()) {
    Checkpoint ck = load_checkpoint(cfg.resume, tc.model);
    model = std::move(ck.model);
    state = std::move(ck.optimizer);
  } else {
    model = init_model(tc.model, tc.seed);
  }
  const nlohmann::json provenance = to_json(cfg);
  std::optional<ConvergenceLog> log;
  if (!cfg.log.empty()) log.emplace(cfg.log);

  out << "epoch\ttrain_loss\teval_mae\n";
  train_epochs(model, state, data, tc, [&](const EpochSummary& s) {
    const double mae = evaluate(model, eval_set, tc.normalization).metrics.mae;
    out << s.epoch << '\t' << s.train_loss << '\t' << mae << '\n' << std::flush;
    if (log) log->append(s.epoch, s.train_loss, mae);
    if (tc.checkpoint_every && s.epoch % tc.checkpoint_every == 0) {
      save_checkpoint(ckpt, model, state, tc.adam, provenance);
    }
    return true;
  });
  save_checkpoint(ckpt, model, state, tc.adam, provenance);
  return 0;
}

inline int run_eval(const RunConfig& cfg, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const auto& dir = require(cfg.data, "data");
  std::vector<Sample> samples;
  std::vector<std::string> names;
  for (const auto& f : read_labels(dir)) {
    samples.push_back({load_ppm(std::filesystem::path(dir) / f.filename), f.count});
    names.push_back(f.filename);
  }
  const EvalReport report = evaluate(ck.model, samples, normalization_for(ck, cfg), names);
  if (cfg.out.empty()) {
    write_report_tsv(report, out);
  } else {
    std::ofstream file(cfg.out);
    if (!file) throw std::runtime_error("cannot write " + cfg.out);
    write_report_tsv(report, file);
    out << "MAE\t" << report.metrics.mae << "\nMSE\t" << report.metrics.mse << '\n';
  }
  return 0;
}

inline int run_infer(const RunConfig& cfg, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const Image img = load_ppm(require(cfg.image_path, "image"));
  out << "count\t" << std::setprecision(9) << predict_image(ck.model, img, normalization_for(ck, cfg)) << '\n';
  return 0;
}

inline int run_attnmap(const RunConfig& cfg, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const Image img = load_ppm(require(cfg.image_path, "image"));
  const AttentionMap map = image_attention_map(ck.model, img, normalization_for(ck, cfg));
  export_pgm(map, require(cfg.out, "out"));
  out << "attnmap\t" << map.rows << 'x' << map.cols << '\t' << map.provenance << '\t' << cfg.out << '\n';
  return 0;
}

inline int run_gradcheck(const RunConfig& cfg, std::ostream& out) {
  std::vector<HeadVariant> heads;
  if (cfg.gc_heads != "gap") heads.push_back(HeadVariant::Token);
  if (cfg.gc_heads != "token") heads.push_back(HeadVariant::Gap);
  double worst = 0.0;
  for (HeadVariant h : heads) {
    ModelConfig mc = cfg.model();
    mc.head = h;
    const GradCheckResult r = model_grad_check(mc, cfg.seed.value_or(0), {cfg.gc_step, cfg.gc_coords, cfg.seed.value_or(0)});
    out << "gradcheck\t" << to_string(h) << "\tmax_rel_error\t" << r.max_rel_error << "\tcoords\t" << r.coordinates
        << "\tworst\t" << r.worst << '\n';
    worst = std::max(worst, r.max_rel_error);
  }
  const bool pass = worst < cfg.gc_threshold;
  out << "max_rel_error\t" << worst << '\t' << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? 0 : 3;
}

inline const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const PnmError*>(&e)) return "image";
  if (dynamic_cast<const TrainingDiverged*>(&e)) return "diverged";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  return "runtime";
}

}  // namespace detail

inline int dispatch(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    if (command == "synth") return detail::run_synth(cfg, out);
    if (command == "train") return detail::run_train(cfg, out);
    if (command == "eval") return detail::run_eval(cfg, out);
    if (command == "infer") return detail::run_infer(cfg, out);
    if (command == "gradcheck") return detail::run_gradcheck(cfg, out);
    if (command == "attnmap") return detail::run_attnmap(cfg, out);
    throw UsageError("unknown command '" + command + "'");
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n' || c == '\t') c = ' ';
    err << "error\t" << detail::error_kind(e) << '\t' << msg << '\n';
    return dynamic_cast<const UsageError*>(&e) ? 2 : 1;
  }
}

}  // namespace transcrowd
