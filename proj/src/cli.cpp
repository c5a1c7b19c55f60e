// SPDX-License-Identifier: Apache-2.0
#include "percept/cli.hpp"

#include "percept/experiments.hpp"
#include "percept/image_io.hpp"
#include "percept/report.hpp"
#include "serialize.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace percept {

namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

struct OptDef {
  std::string key, def, help;
  bool flag = false;
};

std::string normalize_key(std::string k) {
  for (char& c : k)
    if (c == '_') c = '-';
  return k;
}

std::string env_seed() {
  const char* s = std::getenv("PERCEPT_SEED");
  return s && *s ? s : "0";
}

/// Layered configuration: defaults < --config file < --preset < flags.
class Options {
 public:
  Options(CLI::App* app, std::vector<OptDef> defs) : app_(app), defs_(std::move(defs)) {
    defs_.push_back({"seed", env_seed(), "global seed (default: $PERCEPT_SEED or 0)"});
    defs_.push_back({"out", "", "output directory"});
    defs_.push_back({"config", "", "JSON config file; flags override its values"});
    for (const auto& d : defs_) {
      if (d.flag)
        opts_[d.key] = app_->add_flag("--" + d.key, flags_[d.key], d.help);
      else
        opts_[d.key] = app_->add_option("--" + d.key, values_[d.key], d.help + (d.def.empty() ? "" : " [" + d.def + "]"));
    }
  }

  void resolve() {
    for (const auto& d : defs_) eff_[d.key] = d.flag ? json(false) : json(d.def);
    if (given("config")) {
      std::ifstream is(values_["config"]);
      if (!is) throw UsageError("cannot open config file " + values_["config"]);
      json file;
      try {
        file = json::parse(is);
      } catch (const json::exception& e) {
        throw UsageError("config file " + values_["config"] + " is not valid JSON: " + e.what());
      }
      if (!file.is_object()) throw UsageError("config file must hold a JSON object");
      for (auto& [k, v] : file.items()) {
        const std::string key = normalize_key(k);
        if (!eff_.contains(key)) throw UsageError("config file: unknown key '" + k + "' for this command");
        eff_[key] = v;
      }
    }
    if (given("preset") || (eff_.contains("preset") && !str("preset").empty())) {
      const std::string name = given("preset") ? values_["preset"] : str("preset");
      const Preset p = preset_by_name(name);
      eff_["steps"] = p.steps;
      eff_["ensemble"] = p.ensemble;
      eff_["ensemble-mode"] = to_string(p.mode);
      eff_["schedule"] = to_string(p.schedule);
      eff_["preset"] = name;
    }
    for (const auto& d : defs_) {
      if (!given(d.key)) continue;
      eff_[d.key] = d.flag ? json(flags_[d.key]) : json(values_[d.key]);
    }
  }

  bool given(const std::string& k) const {
    auto it = opts_.find(k);
    return it != opts_.end() && it->second->count() > 0;
  }
  bool has(const std::string& k) const { return eff_.contains(k) && !(eff_[k].is_string() && eff_[k].get<std::string>().empty()); }

  std::string str(const std::string& k) const {
    const json& v = eff_.at(k);
    return v.is_string() ? v.get<std::string>() : v.dump();
  }
  long integer(const std::string& k) const {
    const json& v = eff_.at(k);
    if (v.is_number_integer()) return v.get<long>();
    try {
      std::size_t pos = 0;
      const std::string s = str(k);
      const long r = std::stol(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return r;
    } catch (const std::exception&) {
      throw UsageError("--" + k + " expects an integer, got '" + str(k) + "'");
    }
  }
  std::uint64_t u64(const std::string& k) const {
    const json& v = eff_.at(k);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    try {
      return std::stoull(str(k));
    } catch (const std::exception&) {
      throw UsageError("--" + k + " expects a nonnegative integer, got '" + str(k) + "'");
    }
  }
  double real(const std::string& k) const {
    const json& v = eff_.at(k);
    if (v.is_number()) return v.get<double>();
    try {
      return std::stod(str(k));
    } catch (const std::exception&) {
      throw UsageError("--" + k + " expects a number, got '" + str(k) + "'");
    }
  }
  bool boolean(const std::string& k) const {
    const json& v = eff_.at(k);
    if (v.is_boolean()) return v.get<bool>();
    const std::string s = str(k);
    return s == "1" || s == "true" || s == "yes";
  }

  fs::path out_dir() const {
    if (!has("out")) throw UsageError("--out is required");
    return fs::path(str("out"));
  }

  /// Writes the merged configuration next to the command's outputs.
  void echo(const fs::path& dir, const std::string& command) const {
    fs::create_directories(dir);
    json j = eff_;
    j.erase("config");
    j["command"] = command;
    std::ofstream(dir / "config.json") << j.dump(2) << "\n";
  }

 private:
  CLI::App* app_;
  std::vector<OptDef> defs_;
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> flags_;
  std::map<std::string, CLI::Option*> opts_;
  json eff_ = json::object();
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

CodecSpec codec_for(const ModelSpec& s, std::uint64_t seed) {
  if (s.latent_channels == 12) return toy_codec(seed);
  if (s.latent_channels == 4) return default_codec(seed);
  throw UsageError("no codec preset with " + std::to_string(s.latent_channels) + " latent channels");
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "manifest.json")) return p;
  if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  throw Error("no checkpoint at " + p.string());
}

constexpr const char* kRunHeader = "step,compute_macs,loss,absrel,delta1,epe,miou,model_id,batch_size";

void append_runs(const fs::path& csv, const std::vector<RunRecord>& records) {
  const bool fresh = !fs::exists(csv);
  std::ofstream os(csv, std::ios::app);
  if (fresh) os << kRunHeader << "\n";
  for (const auto& r : records) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%ld,%.0f,%.10g", r.step, r.compute, r.train_loss);
    os << buf;
    for (const char* m : {"absrel", "delta1", "epe", "miou"}) {
      os << ',';
      auto it = r.metrics.find(m);
      if (it != r.metrics.end()) {
        std::snprintf(buf, sizeof buf, "%.10g", it->second);
        os << buf;
      }
    }
    os << ',' << r.model_id << ',' << r.batch_size << "\n";
  }
}

std::vector<PerceptionSample> load_split(const fs::path& root, const std::string& split, Task task) {
  const DatasetManifest man = read_manifest(root);
  if (man.task != to_string(task)) throw UsageError("dataset " + root.string() + " holds '" + man.task + "', expected " + to_string(task));
  std::vector<PerceptionSample> out;
  for (const auto& e : man.samples)
    if (split.empty() || e.split == split) out.push_back(load_sample(root / e.dir));
  if (out.empty())
    for (const auto& e : man.samples) out.push_back(load_sample(root / e.dir));
  return out;
}

TrainConfig train_config_from(const Options& o, Phase phase) {
  TrainConfig c;
  c.phase = phase;
  c.steps = int(o.integer("steps"));
  c.batch_size = int(o.integer("batch"));
  c.lr_start = o.real("lr");
  c.lr_end = o.has("lr-end") ? o.real("lr-end") : c.lr_start;
  c.resolution = int(o.integer("resolution"));
  c.seed = o.u64("seed");
  c.log_interval = int(o.integer("log-interval"));
  c.validate();
  return c;
}

std::vector<OptDef> train_defs(const std::string& steps, const std::string& lr, const std::string& lr_end) {
  return {{"steps", steps, "total optimizer steps"},
          {"batch", "16", "batch size"},
          {"lr", lr, "initial learning rate"},
          {"lr-end", lr_end, "final learning rate (geometric decay)"},
          {"resolution", "16", "image resolution in pixels"},
          {"schedule", "linear", "noise schedule: linear, scaled_linear, cosine"},
          {"timesteps", "1000", "diffusion timesteps T"},
          {"log-interval", "50", "steps per logged record"},
          {"count", "512", "generated training samples when --data is absent"},
          {"codec-seed", "0", "seed of the frozen codec projection"}};
}

// --- commands -------------------------------------------------------------------

int cmd_gen_data(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  const DatasetManifest man = write_dataset(dir, o.str("task"), int(o.integer("count")), int(o.integer("resolution")), o.u64("seed"),
                                            o.real("val-fraction"), int(o.integer("u-max")));
  o.echo(dir, "gen-data");
  out << "wrote " << man.samples.size() << " " << man.task << " samples to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  const TrainConfig cfg = train_config_from(o, Phase::pretrain);
  const ScheduleKind kind = parse_schedule_kind(o.str("schedule"));
  const int T = int(o.integer("timesteps"));
  std::optional<Checkpoint> init;
  if (o.has("init")) init = load_checkpoint(resolve_checkpoint(o.str("init")));
  ModelSpec spec = init ? init->params.spec : named_model(o.str("model"));
  const CodecSpec codec = init ? init->meta.codec : codec_for(spec, o.u64("codec-seed"));

  std::vector<TrainExample> data;
  if (o.has("data")) {
    const DatasetManifest man = read_manifest(o.str("data"));
    if (man.task != "classes") throw UsageError("pretrain needs a 'classes' dataset, got '" + man.task + "'");
    std::vector<ClassSample> samples;
    for (const auto& e : man.samples)
      if (e.split == "train") samples.push_back(load_class_sample(fs::path(o.str("data")) / e.dir));
    data = class_examples(samples, codec);
  } else {
    data = class_examples(int(o.integer("count")), cfg.resolution, cfg.seed + 2, codec);
  }
  TrainState<float> st(init ? init->params : build_model<float>(spec, cfg.seed + 1));
  if (init && init->adam_m) {
    st.adam_m = *init->adam_m;
    st.adam_v = *init->adam_v;
    st.adam_step = init->meta.adam_step;
    st.step = init->meta.step;
  }
  const NoiseSchedule sched = make_schedule(kind, T);
  o.echo(dir, "pretrain");
  const auto records = pretrain(st, data, cfg, sched, [&](const RunRecord& r) {
    out << "step " << r.step << " loss " << r.train_loss << " macs " << r.compute << "\n";
  });
  append_runs(dir / "runs.csv", records);
  CheckpointMeta meta{codec, kind, T, st.step, st.adam_step, init ? init->hash : "", "pretrain"};
  const std::string hash = save_checkpoint(dir / "checkpoint", st.params, meta, &st.adam_m, &st.adam_v);
  out << "checkpoint " << (dir / "checkpoint").string() << " hash " << hash << "\n";
  return kExitOk;
}

InferenceConfig inference_from(const Options& o, const NoiseSchedule& sched, const std::string& steps_key = "steps") {
  InferenceConfig c;
  c.steps = int(o.integer(steps_key));
  c.schedule = &sched;
  c.eta = o.real("eta");
  c.ensemble.n = int(o.integer("ensemble"));
  c.ensemble.mode = parse_ensemble_mode(o.str("ensemble-mode"));
  c.ensemble.iters = int(o.integer("iters"));
  c.ensemble.tol = o.real("tol");
  c.ensemble.seed = o.u64("seed");
  c.ensemble.validate();
  return c;
}

int cmd_finetune(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  const TrainConfig cfg = train_config_from(o, Phase::finetune);
  const int T = int(o.integer("timesteps"));
  std::optional<Checkpoint> init;
  if (o.has("init")) init = load_checkpoint(resolve_checkpoint(o.str("init")));
  const ScheduleKind kind = o.given("schedule") || !init ? parse_schedule_kind(o.str("schedule")) : init->meta.schedule;
  std::vector<Task> tasks;
  for (const auto& t : split_list(o.str("task"))) tasks.push_back(parse_task(t));
  if (tasks.empty()) throw UsageError("--task is required");
  const ModelSpec base_spec = init ? init->params.spec : named_model(o.str("model"));
  const CodecSpec codec = init ? init->meta.codec : codec_for(base_spec, o.u64("codec-seed"));
  ModelParameters<float> params = prepare_for_tasks(init ? init->params : build_model<float>(base_spec, cfg.seed + 1), tasks);
  const bool resume = o.boolean("resume") && init && init->adam_m && init->params.spec == params.spec;
  TrainState<float> st(std::move(params));
  if (resume) {
    st.adam_m = *init->adam_m;
    st.adam_v = *init->adam_v;
    st.adam_step = init->meta.adam_step;
    st.step = init->meta.step;
  }

  const auto data_dirs = split_list(o.has("data") ? o.str("data") : "");
  if (!data_dirs.empty() && data_dirs.size() != tasks.size()) throw UsageError("--data needs one dataset per task");
  std::vector<TrainExample> data;
  std::vector<std::vector<PerceptionSample>> eval_sets;
  const int u_max = int(o.integer("u-max"));
  const int n_eval = int(o.integer("eval-samples"));
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    std::vector<PerceptionSample> samples, ev;
    if (!data_dirs.empty()) {
      samples = load_split(data_dirs[i], "train", tasks[i]);
      ev = load_split(data_dirs[i], "val", tasks[i]);
    } else {
      samples = perception_samples(tasks[i], int(o.integer("count")), cfg.resolution, cfg.seed + 4 + 101 * std::uint64_t(task_id(tasks[i])), u_max);
      ev = perception_samples(tasks[i], std::max(1, n_eval), cfg.resolution, cfg.seed + 777 + std::uint64_t(task_id(tasks[i])), u_max);
    }
    auto ex = task_examples(st.params, samples, codec);
    data.insert(data.end(), std::make_move_iterator(ex.begin()), std::make_move_iterator(ex.end()));
    if (n_eval > 0 && int(ev.size()) > n_eval) ev.resize(std::size_t(n_eval));
    eval_sets.push_back(std::move(ev));
  }
  o.echo(dir, "finetune");
  const NoiseSchedule sched = make_schedule(kind, T);
  auto records = finetune(st, data, cfg, sched, [&](const RunRecord& r) {
    out << "step " << r.step << " loss " << r.train_loss << " macs " << r.compute << "\n";
  });
  if (n_eval > 0 && !records.empty()) {
    InferenceConfig ic = inference_from(o, sched, "eval-steps");
    for (const auto& ev : eval_sets) {
      const EvalScores s = evaluate(st.params, ev, codec, ic);
      for (const auto& [k, v] : s.as_map()) {
        records.back().metrics[k] = v;
        out << "eval " << to_string(ev[0].task) << " " << k << " " << v << "\n";
      }
    }
  }
  append_runs(dir / "runs.csv", records);
  CheckpointMeta meta{codec, kind, T, st.step, st.adam_step, init ? init->hash : "", "finetune " + o.str("task")};
  const std::string hash = save_checkpoint(dir / "checkpoint", st.params, meta, &st.adam_m, &st.adam_v);
  out << "checkpoint " << (dir / "checkpoint").string() << " hash " << hash << "\n";
  return kExitOk;
}

int cmd_upcycle(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  if (!o.has("init")) throw UsageError("upcycle needs --init <dense checkpoint>");
  const Checkpoint ck = load_checkpoint(resolve_checkpoint(o.str("init")));
  MoESpec m;
  m.num_experts = int(o.integer("experts"));
  m.active_k = int(o.integer("active"));
  m.shared_experts = int(o.integer("shared"));
  m.balance_weight = o.real("balance-weight");
  m.validate();
  const ModelParameters<float> moe = upcycle(ck.params, m, o.u64("seed"));
  CheckpointMeta meta = ck.meta;
  meta.parent_hash = ck.hash;
  meta.adam_step = 0;
  meta.note = "upcycle";
  o.echo(dir, "upcycle");
  const std::string hash = save_checkpoint(dir / "checkpoint", moe, meta);
  out << "upcycled " << ck.params.spec.id << " -> " << moe.spec.id << " (" << ck.params.param_count() << " -> " << moe.param_count()
      << " parameters), parent " << ck.hash << ", hash " << hash << "\n";
  return kExitOk;
}

struct InferSetup {
  Checkpoint ck;
  Task task;
  std::vector<PerceptionSample> samples;
  NoiseSchedule sched;
};

InferSetup infer_setup(const Options& o) {
  if (!o.has("ckpt")) throw UsageError("--ckpt is required");
  Checkpoint ck = load_checkpoint(resolve_checkpoint(o.str("ckpt")));
  const Task task = parse_task(o.str("task"));
  const ScheduleKind kind = o.has("schedule") ? parse_schedule_kind(o.str("schedule")) : ck.meta.schedule;
  std::vector<PerceptionSample> samples;
  if (o.has("data"))
    samples = load_split(o.str("data"), "val", task);
  else
    samples = perception_samples(task, int(o.integer("count")), int(o.integer("resolution")), o.u64("seed") + 777, int(o.integer("u-max")));
  NoiseSchedule sched = make_schedule(kind, ck.meta.timesteps);
  return {std::move(ck), task, std::move(samples), std::move(sched)};
}

std::vector<OptDef> infer_defs() {
  return {{"ckpt", "", "checkpoint directory"},
          {"task", "depth", "task: depth, flow, amodal"},
          {"data", "", "dataset root (val split); generated samples otherwise"},
          {"count", "8", "generated samples when --data is absent"},
          {"resolution", "16", "generated sample resolution"},
          {"u-max", "8", "flow normalization bound"},
          {"steps", "50", "denoising steps"},
          {"ensemble", "1", "ensemble size N"},
          {"ensemble-mode", "naive", "naive or median"},
          {"iters", "10", "median compilation rounds"},
          {"tol", "1e-4", "median compilation relative tolerance"},
          {"eta", "0", "DDIM stochasticity"},
          {"schedule", "", "override the checkpoint's noise schedule"},
          {"preset", "", "named preset (paper-optimal)"}};
}

int cmd_infer(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  InferSetup s = infer_setup(o);
  const InferenceConfig ic = inference_from(o, s.sched);
  o.echo(dir, "infer");
  json cost = json::array();
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < s.samples.size(); ++i) {
    const PerceptionSample& smp = s.samples[i];
    InferenceConfig c = ic;
    c.ensemble.seed = member_seed(ic.ensemble.seed, int(i) + 7919);
    const Prediction p = predict_scaled(s.ck.params, condition_latents<float>(smp, s.ck.meta.codec), s.task, s.ck.meta.codec, c, {smp.u_max});
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu", i);
    const fs::path pd = dir / "predictions" / name;
    fs::create_directories(pd);
    write_target_bin(pd / "pred.bin", p.merged);
    ImageTensor vis(int(p.merged.planes[0].rows()), int(p.merged.planes[0].cols()), 3);
    for (int y = 0; y < vis.height; ++y)
      for (int x = 0; x < vis.width; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          const float v = s.task == Task::amodal ? 2.0f * p.merged.planes[0](y, x) - 1.0f
                          : s.task == Task::flow ? p.merged.planes[std::min<std::size_t>(ch, 1)](y, x) / float(smp.u_max)
                                                 : p.merged.planes[0](y, x);
          vis.at(y, x, ch) = v;
        }
    write_png(pd / "pred.png", vis);
    cost.push_back({{"sample", name},
                    {"macs_per_forward", p.cost.macs_per_forward},
                    {"denoise", p.cost.denoise},
                    {"encode", p.cost.encode},
                    {"decode", p.cost.decode},
                    {"merge", p.cost.merge},
                    {"total", p.cost.total()},
                    {"objective", p.objective}});
    total += p.cost.total();
  }
  std::ofstream(dir / "cost.json") << json{{"samples", cost}, {"total_macs", total}}.dump(2) << "\n";
  out << "predicted " << s.samples.size() << " " << to_string(s.task) << " samples: steps=" << ic.steps << " N=" << ic.ensemble.n
      << " mode=" << to_string(ic.ensemble.mode) << " schedule=" << to_string(s.sched.kind()) << " inference MACs=" << total << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  InferSetup s = infer_setup(o);
  const InferenceConfig ic = inference_from(o, s.sched);
  const EvalScores e = evaluate(s.ck.params, s.samples, s.ck.meta.codec, ic, o.boolean("raw"));
  json j = e.as_map();
  j["samples"] = s.samples.size();
  j["infer_macs_per_sample"] = double(e.infer_macs) / double(s.samples.size());
  j["aligned"] = !o.boolean("raw");
  if (o.has("out")) {
    o.echo(o.out_dir(), "eval");
    std::ofstream(o.out_dir() / "metrics.json") << j.dump(2) << "\n";
  }
  out << j.dump() << "\n";
  return kExitOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  const ExperimentPlan plan = plan_by_name(o.str("plan"));
  SweepOptions so;
  so.out = dir;
  so.seed = o.u64("seed");
  so.resolution = int(o.integer("resolution"));
  so.pretrain_steps = int(o.integer("pretrain-steps"));
  so.finetune_steps = int(o.integer("finetune-steps"));
  so.batch_size = int(o.integer("batch"));
  so.lr = o.real("lr");
  so.lr_end = o.real("lr-end");
  so.train_samples = int(o.integer("train-samples"));
  so.eval_samples = int(o.integer("eval-samples"));
  so.infer_steps = int(o.integer("infer-steps"));
  so.model = o.str("model");
  so.schedule = parse_schedule_kind(o.str("schedule"));
  so.timesteps = int(o.integer("timesteps"));
  so.only = split_list(o.has("only") ? o.str("only") : "");
  const fs::path csv = o.has("csv") ? fs::path(o.str("csv")) : dir / (plan.name + ".csv");
  o.echo(dir, "sweep");
  const auto rows = run_sweep(plan, so, csv);
  for (const auto& r : rows) out << format_row(r) << "\n";
  out << plan.name << ": " << rows.size() << " new rows in " << csv.string() << "\n";
  return kExitOk;
}

int cmd_fit_law(const Options& o, std::ostream& out, std::ostream& err) {
  if (!o.has("csv")) throw UsageError("--csv is required");
  const CsvTable t = read_csv(o.str("csv"));
  const int xc = t.column(o.str("x")), yc = t.column(o.str("y"));
  if (xc < 0 || yc < 0) throw UsageError("columns '" + o.str("x") + "'/'" + o.str("y") + "' not found in " + o.str("csv"));
  const int gc = o.has("group") ? t.column(o.str("group")) : -1;
  if (o.has("group") && gc < 0) throw UsageError("group column '" + o.str("group") + "' not found");
  std::vector<std::pair<double, double>> pts;
  std::map<std::string, std::pair<double, double>> last;
  std::vector<std::string> order;
  for (const auto& r : t.rows) {
    if (r[xc].empty() || r[yc].empty()) continue;
    const std::pair<double, double> p{std::stod(r[xc]), std::stod(r[yc])};
    if (gc >= 0) {
      if (!last.count(r[gc])) order.push_back(r[gc]);
      last[r[gc]] = p;
    } else {
      pts.push_back(p);
    }
  }
  for (const auto& g : order) pts.push_back(last[g]);
  const PowerLawFit fit = fit_power_law(pts);
  char buf[128];
  std::snprintf(buf, sizeof buf, "a=%.6g b=%.6g r2=%.6g n=%zu", fit.a, fit.b, fit.r2, fit.n);
  out << buf << "\n";
  if (fit.warning) err << "warning: " << *fit.warning << "\n";
  if (o.has("out")) {
    o.echo(o.out_dir(), "fit-law");
    json j{{"a", fit.a}, {"b", fit.b}, {"r2", fit.r2}, {"n", fit.n}, {"x", o.str("x")}, {"y", o.str("y")}};
    if (fit.warning) j["warning"] = *fit.warning;
    std::ofstream(o.out_dir() / "fit.json") << j.dump(2) << "\n";
  }
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir();
  const auto csvs = split_list(o.has("csv") ? o.str("csv") : "");
  if (csvs.empty()) throw UsageError("--csv is required");
  o.echo(dir, "report");
  for (const auto& c : csvs)
    for (const auto& p : render_report(c, dir)) out << p.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"percept: diffusion-based perception scaling toolkit"};
  app.require_subcommand(1);
  std::map<std::string, std::unique_ptr<Options>> opts;
  auto add = [&](const std::string& name, const std::string& help, std::vector<OptDef> defs) {
    opts[name] = std::make_unique<Options>(app.add_subcommand(name, help), std::move(defs));
  };
  const std::vector<OptDef> sweep_defs = {{"plan", "", "plan name (see README)"},
                                          {"csv", "", "output CSV (default <out>/<plan>.csv)"},
                                          {"model", "b2", "toy model for fixed-size plans"},
                                          {"resolution", "16", "image resolution"},
                                          {"pretrain-steps", "600", "pre-training steps"},
                                          {"finetune-steps", "600", "fine-tuning steps"},
                                          {"batch", "16", "batch size"},
                                          {"lr", "1e-3", "initial learning rate"},
                                          {"lr-end", "1e-4", "final learning rate"},
                                          {"train-samples", "512", "generated training samples"},
                                          {"eval-samples", "24", "generated evaluation samples"},
                                          {"infer-steps", "20", "denoising steps for evaluation"},
                                          {"schedule", "linear", "noise schedule"},
                                          {"timesteps", "1000", "diffusion timesteps T"},
                                          {"only", "", "comma-separated subset of settings"}};
  add("gen-data", "write a synthetic dataset",
      {{"task", "depth", "classes, depth, flow or amodal"},
       {"count", "64", "number of samples"},
       {"resolution", "16", "image resolution"},
       {"val-fraction", "0.2", "fraction held out as val"},
       {"u-max", "8", "flow normalization bound"}});
  {
    auto d = train_defs("500", "1e-3", "1e-3");
    d.push_back({"model", "b1", "model name: a1..a6, b1..b4, S/2-8E2A, S/2-16E2A, L/2-8E2A"});
    d.push_back({"data", "", "classes dataset root"});
    d.push_back({"init", "", "checkpoint to resume"});
    add("pretrain", "class-conditional pre-training", d);
  }
  {
    auto d = train_defs("500", "1e-3", "1e-4");
    for (const auto& e : infer_defs())
      if (e.key != "ckpt" && e.key != "task" && e.key != "data" && e.key != "count" && e.key != "resolution" && e.key != "schedule" &&
          e.key != "steps" && e.key != "preset")
        d.push_back(e);
    d.push_back({"model", "b1", "model to build when --init is absent"});
    d.push_back({"task", "depth", "task or comma-separated tasks (generalist)"});
    d.push_back({"data", "", "dataset root(s), one per task"});
    d.push_back({"init", "", "pre-trained checkpoint"});
    d.push_back({"resume", "", "restore optimizer state and step from --init", true});
    d.push_back({"eval-samples", "8", "evaluation samples after training (0 disables)"});
    d.push_back({"eval-steps", "10", "denoising steps for the final evaluation"});
    add("finetune", "fine-tune on perception tasks", d);
  }
  add("upcycle", "convert a dense checkpoint to MoE",
      {{"init", "", "dense checkpoint"},
       {"experts", "8", "routed experts E"},
       {"active", "2", "active experts k"},
       {"shared", "1", "shared experts"},
       {"balance-weight", "0.01", "balance loss weight"}});
  add("infer", "predict with test-time scaling", infer_defs());
  {
    auto d = infer_defs();
    d.push_back({"raw", "", "score depth without affine alignment", true});
    add("eval", "evaluate predictions against ground truth", d);
  }
  add("sweep", "run a named scaling plan", sweep_defs);
  add("fit-law", "fit L = a * C^b to CSV columns",
      {{"csv", "", "input CSV"}, {"x", "compute_macs", "compute column"}, {"y", "loss", "loss column"},
       {"group", "", "use the last row of each group in this column"}});
  add("report", "render CSVs into SVG plots", {{"csv", "", "comma-separated CSV files"}});

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    for (auto* sub : app.get_subcommands())
      if (sub) err << sub->help();
    if (app.get_subcommands().empty()) err << app.help();
    return kExitUsage;
  }
  CLI::App* sub = app.get_subcommands().front();
  Options& o = *opts.at(sub->get_name());
  const std::string name = sub->get_name();
  try {
    o.resolve();
    if (name == "gen-data") return cmd_gen_data(o, out);
    if (name == "pretrain") return cmd_pretrain(o, out);
    if (name == "finetune") return cmd_finetune(o, out);
    if (name == "upcycle") return cmd_upcycle(o, out);
    if (name == "infer") return cmd_infer(o, out);
    if (name == "eval") return cmd_eval(o, out);
    if (name == "sweep") return cmd_sweep(o, out);
    if (name == "fit-law") return cmd_fit_law(o, out, err);
    if (name == "report") return cmd_report(o, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << "usage error: unknown command " << name << "\n";
  return kExitUsage;
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace percept
