// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic desk-scale datasets for class-conditional pre-training and the
// three perception tasks, target <-> image encodings, and on-disk layout.

#include "percept/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace percept {

enum class Task { depth = 0, flow = 1, amodal = 2 };

Task parse_task(const std::string& name);
std::string to_string(Task task);
inline int task_id(Task t) { return static_cast<int>(t); }

enum class ShapeKind { circle, rect, triangle };

struct Shape {
  ShapeKind kind = ShapeKind::circle;
  double cx = 0, cy = 0;  // center, pixels
  double size = 4;        // radius (circle), half-side (rect), circumradius (triangle)
  double aspect = 1.0;    // rect half-height = size * aspect
  double angle = 0.0;     // triangle rotation, radians
  std::array<double, 3> color{1, 1, 1};  // linear [0, 1]
  double depth = 10.0;

  /// Coverage test at a pixel center.
  bool covers(int x, int y) const;
};

Map2 rasterize(const Shape& s, int resolution);

struct ClassSample {
  ImageTensor rgb;
  int label = 0;
};

struct DepthSample {
  ImageTensor rgb;
  Map2 depth;               // > 0, background 10
  std::vector<Shape> shapes;  // drawn far to near
};

struct FlowSample {
  ImageTensor frame1, frame2;
  Map2 u, v;  // per frame-1 pixel displacement, zero on background
  Map2 sprite_mask;  // frame-1 sprite pixels
  int u_max = 8;
};

struct AmodalSample {
  ImageTensor rgb;
  Map2 modal, amodal, occluder;  // {0, 1}
};

inline constexpr int kNumClasses = 10;
inline constexpr double kBackgroundDepth = 10.0;

/// Ten classes: five silhouettes (circle, square, triangle, wide bar, tall
/// bar) times two color families (warm, cool).
ClassSample gen_class_image(std::uint64_t seed, int resolution, std::optional<int> label = std::nullopt);
DepthSample gen_depth(std::uint64_t seed, int resolution, int num_shapes);
FlowSample gen_flow(std::uint64_t seed, int resolution, int num_sprites, int u_max);
AmodalSample gen_amodal(std::uint64_t seed, int resolution);
/// Deterministic composition used by gen_amodal; exposed for edge cases.
AmodalSample compose_amodal(int resolution, const Shape& target, const Shape& occluder, std::uint64_t seed);

// --- target encodings -----------------------------------------------------

struct DepthRange {
  double log_min = 0, log_max = 0;
};

/// Task ground truth as planes: depth {depth}, flow {u, v}, amodal {mask}.
struct TargetMap {
  Task task = Task::depth;
  std::vector<Map2> planes;
};

struct TaskEncoding {
  Task task;
  int num_latents;  // condition latents + noisy target
  int num_conditions() const { return num_latents - 1; }
};

TaskEncoding task_encoding(Task task);

struct EncodeOptions {
  int u_max = 8;
};

/// depth: per-image affine normalization of log-depth to [-1, 1], replicated
///        to 3 channels (constant depth maps to all zeros);
/// flow:  (u / u_max, v / u_max, 0);
/// amodal: mask to {-1, +1} replicated to 3 channels.
ImageTensor encode_target(const TargetMap& gt, const EncodeOptions& opt = {}, DepthRange* range_out = nullptr);

/// Inverse of encode_target. Depth decodes to the normalized relative
/// log-depth unless `range` is given, in which case metric depth is
/// restored. Amodal decodes to the soft mask value (channel mean mapped to
/// [0, 1]); threshold with binarize().
TargetMap decode_target(Task task, const ImageTensor& img, const EncodeOptions& opt = {},
                        const std::optional<DepthRange>& range = std::nullopt);

Map2 binarize(const Map2& soft, float threshold = 0.5f);

// --- samples and datasets ---------------------------------------------------

/// A perception example with its raw images, ground truth and metadata.
struct PerceptionSample {
  Task task = Task::depth;
  ImageTensor rgb;                  // depth/amodal scene, flow frame 1
  std::optional<ImageTensor> cond;  // flow frame 2, amodal modal mask image
  TargetMap target;
  std::uint64_t seed = 0;
  int u_max = 8;
  DepthRange depth_range;
};

PerceptionSample make_sample(Task task, std::uint64_t seed, int resolution, int u_max = 8);

/// Condition images fed to the codec, in model input order:
/// depth {rgb}; flow {packed(luma1, luma2, luma2 - luma1)}; amodal {rgb, modal mask}.
std::vector<ImageTensor> condition_images(const PerceptionSample& s);

ImageTensor mask_image(const Map2& mask);

struct DatasetEntry {
  std::string dir;
  std::string split;  // train | val
};

struct DatasetManifest {
  std::string task;  // depth | flow | amodal | classes
  int resolution = 16;
  std::vector<DatasetEntry> samples;
};

/// Writes `count` generated samples under `root` (one directory each, written
/// to a temporary name and renamed) plus manifest.json. The last
/// round(count * val_fraction) samples form the val split.
DatasetManifest write_dataset(const std::filesystem::path& root, const std::string& task, int count, int resolution,
                              std::uint64_t seed, double val_fraction = 0.2, int u_max = 8);

DatasetManifest read_manifest(const std::filesystem::path& root);
PerceptionSample load_sample(const std::filesystem::path& dir);
ClassSample load_class_sample(const std::filesystem::path& dir);

void write_target_bin(const std::filesystem::path& path, const TargetMap& t);
TargetMap read_target_bin(const std::filesystem::path& path, Task task, int height, int width);

}  // namespace percept
