// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end toy pipelines (data -> latents -> training -> evaluation) and
// the named sweep plans built on them.

#include "percept/checkpoint.hpp"
#include "percept/inference.hpp"
#include "percept/metrics.hpp"
#include "percept/tasks_data.hpp"
#include "percept/train.hpp"
#include "percept/upcycle.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace percept {

/// Class-conditional pre-training examples generated in memory.
std::vector<TrainExample> class_examples(int count, int resolution, std::uint64_t seed, const CodecSpec& codec);
std::vector<TrainExample> class_examples(const std::vector<ClassSample>& samples, const CodecSpec& codec);

/// Perception samples generated in memory; seeds are seed*1000003 + i, as
/// in write_dataset.
std::vector<PerceptionSample> perception_samples(Task task, int count, int resolution, std::uint64_t seed, int u_max = 8);

/// One example per sample, routed by task name when the model has several
/// input projections.
std::vector<TrainExample> task_examples(const ModelParameters<float>& params, const std::vector<PerceptionSample>& samples,
                                        const CodecSpec& codec);

/// Adapts a class-conditional model to the given tasks: a single task
/// widens the lone input layer; several tasks build one route per task.
/// A model already matching the tasks is returned unchanged.
ModelParameters<float> prepare_for_tasks(const ModelParameters<float>& params, const std::vector<Task>& tasks);

struct EvalScores {
  std::optional<double> absrel, delta1, epe, miou;
  std::uint64_t infer_macs = 0;  // summed over samples
  /// Median-compilation traces, one per sample.
  std::vector<std::vector<double>> traces;
  std::map<std::string, double> as_map() const;
};

/// Runs predict_scaled on every sample and averages the task metric. Depth
/// scores are aligned unless `raw`, which instead restores metric depth
/// from each sample's stored log-depth range.
EvalScores evaluate(const ModelParameters<float>& params, const std::vector<PerceptionSample>& samples, const CodecSpec& codec,
                    const InferenceConfig& cfg, bool raw = false);

/// Mean of the last `window` records' losses.
double smoothed_loss(const std::vector<RunRecord>& records, std::size_t window);

// --- sweeps -----------------------------------------------------------------

struct SweepOptions {
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int resolution = 16;
  int pretrain_steps = 600;
  int finetune_steps = 600;
  int batch_size = 16;
  double lr = 1e-3;
  double lr_end = 1e-4;
  int train_samples = 512;
  int eval_samples = 24;
  int infer_steps = 20;
  std::string model = "b2";
  ScheduleKind schedule = ScheduleKind::linear;
  int timesteps = 1000;
  /// Optional subset of the plan's settings.
  std::vector<std::string> only;
};

struct SweepRow {
  std::string plan, setting;
  long step = 0;
  double compute_macs_train = 0, compute_macs_infer = 0;
  std::optional<double> loss, absrel, delta1, epe, miou;
  std::uint64_t seed = 0;
};

inline constexpr const char* kSweepHeader = "plan,setting,step,compute_macs_train,compute_macs_infer,loss,absrel,delta1,epe,miou,seed";

std::string format_row(const SweepRow& r);
std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& csv);

struct ExperimentPlan {
  std::string name;
  std::string axis;  // model_size, pretrain_steps, resolution, upcycling, inference_steps, ensemble_N, beta_schedule
  std::vector<std::string> values;
  std::string description;
};

/// Accepts plan names (fig2_model_size ...) and axis aliases
/// (inference_steps, ensemble_N, beta_schedule).
ExperimentPlan plan_by_name(const std::string& name);
std::vector<ExperimentPlan> all_plans();

/// Runs every setting not already present in `csv` and appends one row per
/// setting. Returns the rows produced by this call.
std::vector<SweepRow> run_sweep(const ExperimentPlan& plan, const SweepOptions& opt, const std::filesystem::path& csv);

}  // namespace percept
