// SPDX-License-Identifier: Apache-2.0
#include "percept/experiments.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace percept {

namespace fs = std::filesystem;

std::vector<TrainExample> class_examples(const std::vector<ClassSample>& samples, const CodecSpec& codec) {
  std::vector<TrainExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({{}, encode(s.rgb, codec), s.label, 0});
  return out;
}

std::vector<TrainExample> class_examples(int count, int resolution, std::uint64_t seed, const CodecSpec& codec) {
  std::vector<ClassSample> samples;
  for (int i = 0; i < count; ++i) samples.push_back(gen_class_image(seed * 1000003ull + std::uint64_t(i), resolution));
  return class_examples(samples, codec);
}

std::vector<PerceptionSample> perception_samples(Task task, int count, int resolution, std::uint64_t seed, int u_max) {
  std::vector<PerceptionSample> out;
  for (int i = 0; i < count; ++i) out.push_back(make_sample(task, seed * 1000003ull + std::uint64_t(i), resolution, u_max));
  return out;
}

std::vector<TrainExample> task_examples(const ModelParameters<float>& params, const std::vector<PerceptionSample>& samples,
                                        const CodecSpec& codec) {
  std::vector<TrainExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    TrainExample ex;
    ex.conditions = condition_latents<float>(s, codec);
    ex.target = encode(encode_target(s.target, {s.u_max}), codec);
    ex.label = task_id(s.task);
    ex.route = route_patch_embed(params, to_string(s.task));
    out.push_back(std::move(ex));
  }
  return out;
}

ModelParameters<float> prepare_for_tasks(const ModelParameters<float>& params, const std::vector<Task>& tasks) {
  if (tasks.empty()) throw ConfigError("prepare_for_tasks: no tasks");
  const auto& inputs = params.spec.inputs;
  if (tasks.size() == 1) {
    const int k = task_encoding(tasks[0]).num_latents;
    if (inputs.size() == 1 && inputs[0].num_latents == k) return params;
    if (inputs.size() > 1) {
      const int r = params.route_index(to_string(tasks[0]));
      if (inputs[r].num_latents != k) throw ConfigError("prepare_for_tasks: route latent count does not match task");
      return params;
    }
    return convert_input_layer(params, k);
  }
  std::vector<InputProjection> routes;
  for (Task t : tasks) routes.push_back({to_string(t), task_encoding(t).num_latents});
  if (inputs == routes) return params;
  return make_routed(params, routes);
}

std::map<std::string, double> EvalScores::as_map() const {
  std::map<std::string, double> m;
  if (absrel) m["absrel"] = *absrel;
  if (delta1) m["delta1"] = *delta1;
  if (epe) m["epe"] = *epe;
  if (miou) m["miou"] = *miou;
  return m;
}

EvalScores evaluate(const ModelParameters<float>& params, const std::vector<PerceptionSample>& samples, const CodecSpec& codec,
                    const InferenceConfig& cfg, bool raw) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  EvalScores out;
  double absrel_sum = 0, delta_sum = 0, epe_sum = 0;
  std::vector<Map2> masks, gts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PerceptionSample& s = samples[i];
    if (s.task != samples[0].task) throw ConfigError("evaluate: mixed tasks");
    InferenceConfig c = cfg;
    c.ensemble.seed = member_seed(cfg.ensemble.seed, int(i) + 7919);
    const Prediction p = predict_scaled(params, condition_latents<float>(s, codec), s.task, codec, c, {s.u_max});
    out.infer_macs += p.cost.total();
    if (!p.objective.empty()) out.traces.push_back(p.objective);
    switch (s.task) {
      case Task::depth: {
        const Map2& gt = s.target.planes[0];
        DepthScores ds;
        if (raw) {
          const double span = s.depth_range.log_max - s.depth_range.log_min;
          const Eigen::ArrayXXd d = (s.depth_range.log_min + (p.merged.planes[0].cast<double>() + 1.0) * 0.5 * span).exp();
          ds = depth_scores(d, gt, false);
        } else {
          ds = depth_scores(p.merged.planes[0], gt, true);
        }
        absrel_sum += ds.absrel;
        delta_sum += ds.delta1;
        break;
      }
      case Task::flow:
        epe_sum += epe(p.merged.planes[0], p.merged.planes[1], s.target.planes[0], s.target.planes[1]);
        break;
      case Task::amodal:
        masks.push_back(binarize(p.merged.planes[0]));
        gts.push_back(s.target.planes[0]);
        break;
    }
  }
  const double n = double(samples.size());
  switch (samples[0].task) {
    case Task::depth:
      out.absrel = absrel_sum / n;
      out.delta1 = delta_sum / n;
      break;
    case Task::flow: out.epe = epe_sum / n; break;
    case Task::amodal: out.miou = miou(masks, gts); break;
  }
  return out;
}

double smoothed_loss(const std::vector<RunRecord>& records, std::size_t window) {
  if (records.empty()) throw ConfigError("smoothed_loss: no records");
  window = std::max<std::size_t>(1, std::min(window, records.size()));
  double s = 0;
  for (std::size_t i = records.size() - window; i < records.size(); ++i) s += records[i].train_loss;
  return s / double(window);
}

// --- CSV ----------------------------------------------------------------------

namespace {

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", *v);
  return buf;
}

std::optional<double> opt_parse(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string format_row(const SweepRow& r) {
  char macs[64];
  std::snprintf(macs, sizeof macs, "%.0f,%.0f", r.compute_macs_train, r.compute_macs_infer);
  std::ostringstream os;
  os << r.plan << ',' << r.setting << ',' << r.step << ',' << macs << ',' << opt_str(r.loss) << ',' << opt_str(r.absrel) << ','
     << opt_str(r.delta1) << ',' << opt_str(r.epe) << ',' << opt_str(r.miou) << ',' << r.seed;
  return os.str();
}

std::vector<SweepRow> read_sweep_csv(const fs::path& csv) {
  std::vector<SweepRow> rows;
  std::ifstream is(csv);
  if (!is) return rows;
  std::string line;
  if (!std::getline(is, line)) return rows;
  if (line != kSweepHeader) throw ValidationError("sweep CSV " + csv.string() + " has an unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 11) throw ValidationError("sweep CSV " + csv.string() + ": malformed row '" + line + "'");
    SweepRow r;
    r.plan = c[0];
    r.setting = c[1];
    r.step = std::stol(c[2]);
    r.compute_macs_train = std::stod(c[3]);
    r.compute_macs_infer = std::stod(c[4]);
    r.loss = opt_parse(c[5]);
    r.absrel = opt_parse(c[6]);
    r.delta1 = opt_parse(c[7]);
    r.epe = opt_parse(c[8]);
    r.miou = opt_parse(c[9]);
    r.seed = std::stoull(c[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// --- plans --------------------------------------------------------------------

std::vector<ExperimentPlan> all_plans() {
  return {
      {"fig2_model_size", "model_size", {"b1", "b2", "b3", "b4"}, "class-conditional pre-training loss vs model size"},
      {"fig3_finetune_size", "model_size", {"b1", "b2", "b3", "b4"}, "depth fine-tuning quality vs model size"},
      {"fig4_pretrain_steps", "pretrain_steps", {"0", "150", "300", "600"}, "depth quality vs pre-training steps"},
      {"fig5_resolution", "resolution", {"8", "16", "24"}, "depth quality vs fine-tuning resolution"},
      {"fig6_upcycle", "upcycling", {"dense", "moe-4e2a", "moe-8e2a"}, "continued fine-tuning, dense vs upcycled MoE"},
      {"fig7_steps", "inference_steps", {"1", "2", "5", "10", "20", "50", "100"}, "depth quality vs denoising steps"},
      {"fig8_ensemble", "ensemble_N", {"1", "2", "5", "10", "15", "20"}, "depth quality vs ensemble size (median compilation)"},
      {"fig9_beta", "beta_schedule", {"linear", "scaled_linear", "cosine"}, "depth quality vs noise schedule"},
  };
}

ExperimentPlan plan_by_name(const std::string& name) {
  for (const auto& p : all_plans())
    if (p.name == name) return p;
  if (name == "inference_steps") return plan_by_name("fig7_steps");
  if (name == "ensemble_N") return plan_by_name("fig8_ensemble");
  if (name == "beta_schedule") return plan_by_name("fig9_beta");
  if (name == "model_size") return plan_by_name("fig2_model_size");
  if (name == "pretrain_steps") return plan_by_name("fig4_pretrain_steps");
  if (name == "resolution") return plan_by_name("fig5_resolution");
  if (name == "upcycling") return plan_by_name("fig6_upcycle");
  std::string known;
  for (const auto& p : all_plans()) known += " " + p.name;
  throw ConfigError("unknown plan '" + name + "' (known:" + known + ")");
}

namespace {

struct Trained {
  ModelParameters<float> params;
  ComputeMeter meter;
  std::vector<RunRecord> records;
};

TrainConfig train_config(const SweepOptions& opt, int steps, std::uint64_t seed, Phase phase) {
  TrainConfig c;
  c.phase = phase;
  c.steps = steps;
  c.batch_size = opt.batch_size;
  c.lr_start = opt.lr;
  c.lr_end = opt.lr_end;
  c.resolution = opt.resolution;
  c.seed = seed;
  c.log_interval = std::max(1, steps / 20);
  return c;
}

Trained pretrain_spec(const ModelSpec& spec, const SweepOptions& opt, int steps, ScheduleKind kind, const CodecSpec& codec) {
  Trained t{build_model<float>(spec, opt.seed + 1), {}, {}};
  if (steps == 0) return t;
  TrainState<float> st(std::move(t.params));
  const auto data = class_examples(opt.train_samples, opt.resolution, opt.seed + 2, codec);
  const NoiseSchedule sched = make_schedule(kind, opt.timesteps);
  t.records = pretrain(st, data, train_config(opt, steps, opt.seed + 3, Phase::pretrain), sched);
  t.params = std::move(st.params);
  t.meter = st.meter;
  return t;
}

Trained finetune_depth(Trained base, const SweepOptions& opt, int steps, int resolution, ScheduleKind kind, const CodecSpec& codec) {
  TrainState<float> st(prepare_for_tasks(base.params, {Task::depth}));
  st.meter = base.meter;
  const auto samples = perception_samples(Task::depth, opt.train_samples, resolution, opt.seed + 4);
  const auto data = task_examples(st.params, samples, codec);
  const NoiseSchedule sched = make_schedule(kind, opt.timesteps);
  TrainConfig cfg = train_config(opt, steps, opt.seed + 5, Phase::finetune);
  cfg.resolution = resolution;
  auto recs = finetune(st, data, cfg, sched);
  return {std::move(st.params), st.meter, std::move(recs)};
}

/// Caches an expensive stage as a checkpoint keyed by `key` under out/_cache.
Trained cached(const SweepOptions& opt, const std::string& key, const CodecSpec& codec, ScheduleKind kind,
               const std::function<Trained()>& build) {
  const fs::path dir = opt.out / "_cache" / key;
  if (fs::exists(dir / "manifest.json")) {
    Checkpoint ck = load_checkpoint(dir);
    Trained t{std::move(ck.params), {}, {}};
    std::ifstream is(dir / "compute.txt");
    double macs = 0;
    is >> macs;
    t.meter.cumulative_train_macs = std::uint64_t(macs);
    return t;
  }
  Trained t = build();
  CheckpointMeta meta;
  meta.codec = codec;
  meta.schedule = kind;
  meta.timesteps = opt.timesteps;
  save_checkpoint(dir, t.params, meta);
  std::ofstream(dir / "compute.txt") << t.meter.cumulative_train_macs << "\n";
  return t;
}

std::string key_of(const SweepOptions& opt, const std::string& model, int pre, int ft, int res, ScheduleKind kind) {
  return model + "_p" + std::to_string(pre) + "_f" + std::to_string(ft) + "_r" + std::to_string(res) + "_" + to_string(kind) + "_s" +
         std::to_string(opt.seed) + "_b" + std::to_string(opt.batch_size);
}

Trained base_depth(const SweepOptions& opt, const std::string& model, int pre, ScheduleKind kind, const CodecSpec& codec) {
  const ModelSpec spec = toy_ladder(model);
  return cached(opt, "depth_" + key_of(opt, model, pre, opt.finetune_steps, opt.resolution, kind), codec, kind, [&] {
    Trained p = cached(opt, "pre_" + key_of(opt, model, pre, 0, opt.resolution, kind), codec, kind,
                       [&] { return pretrain_spec(spec, opt, pre, kind, codec); });
    return finetune_depth(std::move(p), opt, opt.finetune_steps, opt.resolution, kind, codec);
  });
}

InferenceConfig infer_config(const NoiseSchedule& sched, int steps, int n, EnsembleMode mode, std::uint64_t seed) {
  InferenceConfig c;
  c.steps = steps;
  c.schedule = &sched;
  c.ensemble.n = n;
  c.ensemble.mode = mode;
  c.ensemble.seed = seed;
  return c;
}

void fill_scores(SweepRow& row, const EvalScores& s, std::size_t n) {
  row.absrel = s.absrel;
  row.delta1 = s.delta1;
  row.epe = s.epe;
  row.miou = s.miou;
  row.compute_macs_infer = double(s.infer_macs) / double(n);
}

SweepRow run_setting(const ExperimentPlan& plan, const std::string& value, const SweepOptions& opt) {
  const CodecSpec codec = toy_codec(opt.seed);
  SweepRow row;
  row.plan = plan.name;
  row.setting = value;
  row.seed = opt.seed;
  const auto eval_set = [&](int res) { return perception_samples(Task::depth, opt.eval_samples, res, opt.seed + 777); };
  const NoiseSchedule default_sched = make_schedule(opt.schedule, opt.timesteps);
  const auto score = [&](const Trained& t, const std::vector<PerceptionSample>& ev, const NoiseSchedule& sched, int steps, int n,
                         EnsembleMode mode) {
    fill_scores(row, evaluate(t.params, ev, codec, infer_config(sched, steps, n, mode, opt.seed + 9)), ev.size());
    row.compute_macs_train = double(t.meter.cumulative_train_macs);
    if (!t.records.empty()) row.loss = smoothed_loss(t.records, 5);
  };

  if (plan.axis == "model_size" && plan.name == "fig2_model_size") {
    const Trained t = pretrain_spec(toy_ladder(value), opt, opt.pretrain_steps, opt.schedule, codec);
    row.step = opt.pretrain_steps;
    row.compute_macs_train = double(t.meter.cumulative_train_macs);
    row.loss = smoothed_loss(t.records, 5);
  } else if (plan.axis == "model_size") {
    const Trained t = base_depth(opt, value, opt.pretrain_steps, opt.schedule, codec);
    row.step = opt.finetune_steps;
    score(t, eval_set(opt.resolution), default_sched, opt.infer_steps, 1, EnsembleMode::naive);
  } else if (plan.axis == "pretrain_steps") {
    const int pre = std::stoi(value);
    const Trained t = base_depth(opt, opt.model, pre, opt.schedule, codec);
    row.step = pre;
    score(t, eval_set(opt.resolution), default_sched, opt.infer_steps, 1, EnsembleMode::naive);
  } else if (plan.axis == "resolution") {
    const int res = std::stoi(value);
    const ModelSpec spec = toy_ladder(opt.model);
    Trained p = cached(opt, "pre_" + key_of(opt, opt.model, opt.pretrain_steps, 0, opt.resolution, opt.schedule), codec, opt.schedule,
                       [&] { return pretrain_spec(spec, opt, opt.pretrain_steps, opt.schedule, codec); });
    const Trained t = finetune_depth(std::move(p), opt, opt.finetune_steps, res, opt.schedule, codec);
    row.step = opt.finetune_steps;
    score(t, eval_set(res), default_sched, opt.infer_steps, 1, EnsembleMode::naive);
  } else if (plan.axis == "upcycling") {
    Trained t = base_depth(opt, opt.model, opt.pretrain_steps, opt.schedule, codec);
    if (value != "dense") {
      MoESpec m;
      m.num_experts = value == "moe-4e2a" ? 4 : 8;
      m.active_k = 2;
      t.params = upcycle(t.params, m, opt.seed + 11);
    }
    const int extra = std::max(1, opt.finetune_steps / 2);
    TrainState<float> st(std::move(t.params));
    st.meter = t.meter;
    const auto data = task_examples(st.params, perception_samples(Task::depth, opt.train_samples, opt.resolution, opt.seed + 4), codec);
    t.records = finetune(st, data, train_config(opt, extra, opt.seed + 12, Phase::finetune), default_sched);
    t.params = std::move(st.params);
    t.meter = st.meter;
    row.step = opt.finetune_steps + extra;
    score(t, eval_set(opt.resolution), default_sched, opt.infer_steps, 1, EnsembleMode::naive);
  } else if (plan.axis == "inference_steps") {
    const Trained t = base_depth(opt, opt.model, opt.pretrain_steps, opt.schedule, codec);
    row.step = opt.finetune_steps;
    score(t, eval_set(opt.resolution), default_sched, std::stoi(value), 1, EnsembleMode::naive);
  } else if (plan.axis == "ensemble_N") {
    const Trained t = base_depth(opt, opt.model, opt.pretrain_steps, opt.schedule, codec);
    row.step = opt.finetune_steps;
    score(t, eval_set(opt.resolution), default_sched, opt.infer_steps, std::stoi(value), EnsembleMode::median_compilation);
  } else if (plan.axis == "beta_schedule") {
    const ScheduleKind kind = parse_schedule_kind(value);
    const Trained t = base_depth(opt, opt.model, opt.pretrain_steps, kind, codec);
    row.step = opt.finetune_steps;
    score(t, eval_set(opt.resolution), make_schedule(kind, opt.timesteps), opt.infer_steps, 1, EnsembleMode::naive);
  } else {
    throw ConfigError("plan '" + plan.name + "': unsupported axis '" + plan.axis + "'");
  }
  return row;
}

}  // namespace

std::vector<SweepRow> run_sweep(const ExperimentPlan& plan, const SweepOptions& opt, const fs::path& csv) {
  std::set<std::string> done;
  for (const auto& r : read_sweep_csv(csv))
    if (r.plan == plan.name) done.insert(r.setting);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  const bool fresh = !fs::exists(csv) || fs::file_size(csv) == 0;
  std::ofstream os(csv, std::ios::app);
  if (!os) throw Error("sweep: cannot open " + csv.string());
  if (fresh) os << kSweepHeader << "\n" << std::flush;
  std::vector<SweepRow> rows;
  for (const auto& v : plan.values) {
    if (done.count(v)) continue;
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), v) == opt.only.end()) continue;
    SweepRow r = run_setting(plan, v, opt);
    os << format_row(r) << "\n" << std::flush;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace percept
