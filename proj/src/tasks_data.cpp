// SPDX-License-Identifier: Apache-2.0
#include "percept/tasks_data.hpp"

#include "percept/image_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace percept {

namespace fs = std::filesystem;
using nlohmann::json;

Task parse_task(const std::string& name) {
  if (name == "depth") return Task::depth;
  if (name == "flow") return Task::flow;
  if (name == "amodal") return Task::amodal;
  throw ConfigError("unknown task '" + name + "' (expected depth, flow or amodal)");
}

std::string to_string(Task task) {
  switch (task) {
    case Task::depth: return "depth";
    case Task::flow: return "flow";
    case Task::amodal: return "amodal";
  }
  return "unknown";
}

bool Shape::covers(int x, int y) const {
  const double px = x + 0.5, py = y + 0.5;
  switch (kind) {
    case ShapeKind::circle: return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= size * size;
    case ShapeKind::rect: return std::abs(px - cx) <= size && std::abs(py - cy) <= size * aspect;
    case ShapeKind::triangle: {
      std::array<double, 3> vx, vy;
      for (int i = 0; i < 3; ++i) {
        const double a = angle + i * 2.0 * std::numbers::pi / 3.0;
        vx[i] = cx + size * std::cos(a);
        vy[i] = cy + size * std::sin(a);
      }
      auto edge = [&](int i, int j) { return (vx[j] - vx[i]) * (py - vy[i]) - (vy[j] - vy[i]) * (px - vx[i]); };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

Map2 rasterize(const Shape& s, int resolution) {
  Map2 m = Map2::Zero(resolution, resolution);
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x)
      if (s.covers(x, y)) m(y, x) = 1.0f;
  return m;
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

void put(ImageTensor& img, int x, int y, const std::array<double, 3>& rgb01) {
  for (int c = 0; c < 3; ++c) img.at(y, x, c) = float(2.0 * std::clamp(rgb01[c], 0.0, 1.0) - 1.0);
}

std::array<double, 3> random_hue(Rng& rng) {
  // Saturated color with max channel 1.
  const double h = uniform(rng, 0.0, 6.0);
  const double f = h - std::floor(h);
  const int sector = int(h) % 6;
  const double lo = uniform(rng, 0.0, 0.35);
  const double up = lo + (1.0 - lo) * f, down = 1.0 - (1.0 - lo) * f;
  switch (sector) {
    case 0: return {1.0, up, lo};
    case 1: return {down, 1.0, lo};
    case 2: return {lo, 1.0, up};
    case 3: return {lo, down, 1.0};
    case 4: return {up, lo, 1.0};
    default: return {1.0, lo, down};
  }
}

Shape random_shape(Rng& rng, int res, double min_size, double max_size) {
  Shape s;
  s.kind = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
  s.size = uniform(rng, min_size, max_size);
  s.cx = uniform(rng, 0.15 * res, 0.85 * res);
  s.cy = uniform(rng, 0.15 * res, 0.85 * res);
  s.aspect = uniform(rng, 0.6, 1.4);
  s.angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  s.color = random_hue(rng);
  return s;
}

// Brightness falls off with distance: 1 at depth 1, 0.25 at depth 10.
double shade(double depth) { return 1.0 - 0.75 * (depth - 1.0) / 9.0; }

void fill_background(ImageTensor& img, Rng& rng, double level) {
  const double tint = uniform(rng, -0.05, 0.05);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double g = level * (0.9 + 0.2 * double(y) / std::max(1, img.height - 1));
      put(img, x, y, {g + tint, g, g - tint});
    }
}

}  // namespace

ClassSample gen_class_image(std::uint64_t seed, int resolution, std::optional<int> label) {
  Rng rng(seed * 0x9E3779B97F4A7C15ull + 11);
  ClassSample out;
  out.label = label ? *label : uniform_int(rng, 0, kNumClasses - 1);
  if (out.label < 0 || out.label >= kNumClasses) throw ConfigError("gen_class_image: label out of range");
  out.rgb = ImageTensor(resolution, resolution, 3);
  fill_background(out.rgb, rng, uniform(rng, 0.15, 0.3));
  Shape s;
  const int silhouette = out.label % 5;
  s.cx = uniform(rng, 0.35 * resolution, 0.65 * resolution);
  s.cy = uniform(rng, 0.35 * resolution, 0.65 * resolution);
  s.size = uniform(rng, 0.2 * resolution, 0.32 * resolution);
  s.angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  switch (silhouette) {
    case 0: s.kind = ShapeKind::circle; break;
    case 1: s.kind = ShapeKind::rect; break;
    case 2: s.kind = ShapeKind::triangle; break;
    case 3: s.kind = ShapeKind::rect; s.aspect = 0.35; break;
    default: s.kind = ShapeKind::rect; s.size *= 0.4; s.aspect = 2.5; break;
  }
  if (out.label < 5)
    s.color = {uniform(rng, 0.75, 1.0), uniform(rng, 0.15, 0.6), uniform(rng, 0.0, 0.2)};
  else
    s.color = {uniform(rng, 0.0, 0.2), uniform(rng, 0.25, 0.7), uniform(rng, 0.7, 1.0)};
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x)
      if (s.covers(x, y)) put(out.rgb, x, y, s.color);
  return out;
}

DepthSample gen_depth(std::uint64_t seed, int resolution, int num_shapes) {
  if (num_shapes < 0) throw ConfigError("gen_depth: num_shapes must be >= 0");
  Rng rng(seed * 0xD1B54A32D192ED03ull + 23);
  DepthSample out;
  out.rgb = ImageTensor(resolution, resolution, 3);
  out.depth = Map2::Constant(resolution, resolution, float(kBackgroundDepth));
  fill_background(out.rgb, rng, 0.5 * shade(kBackgroundDepth));
  for (int i = 0; i < num_shapes; ++i) {
    Shape s = random_shape(rng, resolution, std::max(1.5, resolution / 8.0), resolution / 3.0);
    s.depth = uniform(rng, 1.0, kBackgroundDepth);
    out.shapes.push_back(s);
  }
  std::stable_sort(out.shapes.begin(), out.shapes.end(), [](const Shape& a, const Shape& b) { return a.depth > b.depth; });
  for (const Shape& s : out.shapes) {
    const double b = shade(s.depth);
    for (int y = 0; y < resolution; ++y)
      for (int x = 0; x < resolution; ++x)
        if (s.covers(x, y)) {
          out.depth(y, x) = float(s.depth);
          put(out.rgb, x, y, {s.color[0] * b, s.color[1] * b, s.color[2] * b});
        }
  }
  return out;
}

FlowSample gen_flow(std::uint64_t seed, int resolution, int num_sprites, int u_max) {
  if (u_max < 0) throw ConfigError("gen_flow: u_max must be >= 0");
  Rng rng(seed * 0x94D049BB133111EBull + 37);
  FlowSample out;
  out.u_max = u_max;
  out.frame1 = ImageTensor(resolution, resolution, 3);
  out.u = Map2::Zero(resolution, resolution);
  out.v = Map2::Zero(resolution, resolution);
  out.sprite_mask = Map2::Zero(resolution, resolution);
  // Static blocky background texture.
  const int block = std::max(2, resolution / 8);
  for (int by = 0; by < resolution; by += block)
    for (int bx = 0; bx < resolution; bx += block) {
      const double g = uniform(rng, 0.1, 0.5);
      for (int y = by; y < std::min(resolution, by + block); ++y)
        for (int x = bx; x < std::min(resolution, bx + block); ++x) put(out.frame1, x, y, {g, g * 0.9, g * 1.1});
    }
  out.frame2 = out.frame1;

  struct Sprite {
    int x0, y0, side, du, dv;
    std::array<double, 3> c1, c2;
  };
  std::vector<Sprite> sprites;
  auto overlaps = [](int ax, int ay, int as, int bx, int by, int bs) {
    return ax < bx + bs && bx < ax + as && ay < by + bs && by < ay + as;
  };
  const int min_side = std::max(2, resolution / 8), max_side = std::max(min_side, resolution / 3);
  for (int i = 0; i < num_sprites; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Sprite s;
      s.side = uniform_int(rng, min_side, max_side);
      s.du = uniform_int(rng, -u_max, u_max);
      s.dv = uniform_int(rng, -u_max, u_max);
      const int lo_x = std::max(0, -s.du), hi_x = std::min(resolution - s.side, resolution - s.side - s.du);
      const int lo_y = std::max(0, -s.dv), hi_y = std::min(resolution - s.side, resolution - s.side - s.dv);
      if (lo_x > hi_x || lo_y > hi_y) continue;
      s.x0 = uniform_int(rng, lo_x, hi_x);
      s.y0 = uniform_int(rng, lo_y, hi_y);
      bool ok = true;
      for (const Sprite& o : sprites) {
        for (int fa = 0; fa < 2 && ok; ++fa)
          for (int fb = 0; fb < 2 && ok; ++fb)
            if (overlaps(s.x0 + fa * s.du, s.y0 + fa * s.dv, s.side, o.x0 + fb * o.du, o.y0 + fb * o.dv, o.side)) ok = false;
      }
      if (!ok) continue;
      s.c1 = random_hue(rng);
      s.c2 = {s.c1[0] * 0.4, s.c1[1] * 0.4, s.c1[2] * 0.4};
      sprites.push_back(s);
      break;
    }
  }
  for (const Sprite& s : sprites)
    for (int y = 0; y < s.side; ++y)
      for (int x = 0; x < s.side; ++x) {
        const auto& c = ((x / 2 + y / 2) % 2 == 0) ? s.c1 : s.c2;
        put(out.frame1, s.x0 + x, s.y0 + y, c);
        out.u(s.y0 + y, s.x0 + x) = float(s.du);
        out.v(s.y0 + y, s.x0 + x) = float(s.dv);
        out.sprite_mask(s.y0 + y, s.x0 + x) = 1.0f;
      }
  // Reveal background behind moved sprites, then draw them at the new spot.
  for (const Sprite& s : sprites)
    for (int y = 0; y < s.side; ++y)
      for (int x = 0; x < s.side; ++x) {
        const auto& c = ((x / 2 + y / 2) % 2 == 0) ? s.c1 : s.c2;
        put(out.frame2, s.x0 + s.du + x, s.y0 + s.dv + y, c);
      }
  return out;
}

AmodalSample compose_amodal(int resolution, const Shape& target, const Shape& occluder, std::uint64_t seed) {
  Rng rng(seed * 0xBF58476D1CE4E5B9ull + 41);
  AmodalSample out;
  out.rgb = ImageTensor(resolution, resolution, 3);
  fill_background(out.rgb, rng, uniform(rng, 0.1, 0.3));
  out.amodal = rasterize(target, resolution);
  out.occluder = rasterize(occluder, resolution);
  out.modal = out.amodal * (1.0f - out.occluder);
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      if (out.amodal(y, x) > 0) put(out.rgb, x, y, target.color);
      if (out.occluder(y, x) > 0) put(out.rgb, x, y, occluder.color);
    }
  return out;
}

AmodalSample gen_amodal(std::uint64_t seed, int resolution) {
  Rng rng(seed * 0xE7037ED1A0B428DBull + 53);
  Shape target = random_shape(rng, resolution, resolution / 5.0, resolution / 3.0);
  target.cx = uniform(rng, 0.35 * resolution, 0.65 * resolution);
  target.cy = uniform(rng, 0.35 * resolution, 0.65 * resolution);
  Shape occ;
  occ.kind = uniform_int(rng, 0, 1) ? ShapeKind::rect : ShapeKind::circle;
  occ.size = uniform(rng, resolution / 8.0, resolution / 4.0);
  occ.aspect = uniform(rng, 0.7, 1.6);
  const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double dist = uniform(rng, 0.3, 1.2) * target.size;
  occ.cx = target.cx + dist * std::cos(ang);
  occ.cy = target.cy + dist * std::sin(ang);
  occ.color = random_hue(rng);
  // Keep the occluder distinguishable from the target.
  if (std::abs(occ.color[0] - target.color[0]) + std::abs(occ.color[1] - target.color[1]) + std::abs(occ.color[2] - target.color[2]) < 0.6)
    occ.color = {1.0 - target.color[0], 1.0 - target.color[1], 1.0 - target.color[2]};
  return compose_amodal(resolution, target, occ, seed);
}

TaskEncoding task_encoding(Task task) {
  switch (task) {
    case Task::depth: return {task, 2};
    case Task::flow: return {task, 2};
    case Task::amodal: return {task, 3};
  }
  throw ConfigError("task_encoding: unknown task");
}

ImageTensor encode_target(const TargetMap& gt, const EncodeOptions& opt, DepthRange* range_out) {
  const std::size_t want = gt.task == Task::flow ? 2 : 1;
  if (gt.planes.size() != want) throw ShapeError("encode_target: " + to_string(gt.task) + " expects " + std::to_string(want) + " planes");
  const int h = int(gt.planes[0].rows()), w = int(gt.planes[0].cols());
  ImageTensor img(h, w, 3);
  switch (gt.task) {
    case Task::depth: {
      const Map2& d = gt.planes[0];
      if ((d <= 0).any()) throw ValidationError("encode_target: depth must be positive");
      const Eigen::ArrayXXd ld = d.cast<double>().log();
      const double lo = ld.minCoeff(), hi = ld.maxCoeff();
      if (range_out) *range_out = {lo, hi};
      if (hi - lo < 1e-12) return img;  // constant depth: all-zero image
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float e = float(2.0 * (ld(y, x) - lo) / (hi - lo) - 1.0);
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = e;
        }
      return img;
    }
    case Task::flow: {
      if (opt.u_max <= 0) throw ConfigError("encode_target: u_max must be > 0");
      const Map2& u = gt.planes[0];
      const Map2& v = gt.planes[1];
      if (u.abs().maxCoeff() > opt.u_max || v.abs().maxCoeff() > opt.u_max)
        throw ValidationError("encode_target: flow exceeds u_max=" + std::to_string(opt.u_max));
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          img.at(y, x, 0) = u(y, x) / float(opt.u_max);
          img.at(y, x, 1) = v(y, x) / float(opt.u_max);
        }
      return img;
    }
    case Task::amodal: {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float e = gt.planes[0](y, x) > 0.5f ? 1.0f : -1.0f;
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = e;
        }
      return img;
    }
  }
  return img;
}

TargetMap decode_target(Task task, const ImageTensor& img, const EncodeOptions& opt, const std::optional<DepthRange>& range) {
  if (img.channels != 3) throw ShapeError("decode_target: expected 3-channel image");
  const int h = img.height, w = img.width;
  TargetMap out;
  out.task = task;
  switch (task) {
    case Task::depth: {
      Map2 rel(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) rel(y, x) = (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0f;
      if (range) {
        const double span = range->log_max - range->log_min;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) rel(y, x) = float(std::exp(range->log_min + (rel(y, x) + 1.0) * 0.5 * span));
      }
      out.planes.push_back(std::move(rel));
      break;
    }
    case Task::flow: {
      Map2 u(h, w), v(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          u(y, x) = img.at(y, x, 0) * float(opt.u_max);
          v(y, x) = img.at(y, x, 1) * float(opt.u_max);
        }
      out.planes.push_back(std::move(u));
      out.planes.push_back(std::move(v));
      break;
    }
    case Task::amodal: {
      Map2 m(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float mean = (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0f;
          m(y, x) = std::clamp(0.5f * (mean + 1.0f), 0.0f, 1.0f);
        }
      out.planes.push_back(std::move(m));
      break;
    }
  }
  return out;
}

Map2 binarize(const Map2& soft, float threshold) { return (soft > threshold).cast<float>(); }

ImageTensor mask_image(const Map2& mask) {
  ImageTensor img(int(mask.rows()), int(mask.cols()), 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = mask(y, x) > 0.5f ? 1.0f : -1.0f;
  return img;
}

PerceptionSample make_sample(Task task, std::uint64_t seed, int resolution, int u_max) {
  PerceptionSample s;
  s.task = task;
  s.seed = seed;
  s.u_max = u_max;
  s.target.task = task;
  Rng rng(seed ^ 0x5851F42D4C957F2Dull);
  switch (task) {
    case Task::depth: {
      DepthSample d = gen_depth(seed, resolution, uniform_int(rng, 1, 4));
      s.rgb = std::move(d.rgb);
      s.target.planes.push_back(std::move(d.depth));
      encode_target(s.target, {}, &s.depth_range);
      break;
    }
    case Task::flow: {
      FlowSample f = gen_flow(seed, resolution, uniform_int(rng, 1, 3), u_max);
      s.rgb = std::move(f.frame1);
      s.cond = std::move(f.frame2);
      s.target.planes.push_back(std::move(f.u));
      s.target.planes.push_back(std::move(f.v));
      break;
    }
    case Task::amodal: {
      AmodalSample a = gen_amodal(seed, resolution);
      s.rgb = std::move(a.rgb);
      s.cond = mask_image(a.modal);
      s.target.planes.push_back(std::move(a.amodal));
      break;
    }
  }
  return s;
}

std::vector<ImageTensor> condition_images(const PerceptionSample& s) {
  switch (s.task) {
    case Task::depth: return {s.rgb};
    case Task::flow: {
      if (!s.cond) throw ConfigError("flow sample without second frame");
      ImageTensor packed(s.rgb.height, s.rgb.width, 3);
      for (int y = 0; y < packed.height; ++y)
        for (int x = 0; x < packed.width; ++x) {
          float l1 = 0, l2 = 0;
          for (int c = 0; c < 3; ++c) {
            l1 += s.rgb.at(y, x, c) / 3.0f;
            l2 += s.cond->at(y, x, c) / 3.0f;
          }
          packed.at(y, x, 0) = l1;
          packed.at(y, x, 1) = l2;
          packed.at(y, x, 2) = std::clamp(l2 - l1, -1.0f, 1.0f);
        }
      return {packed};
    }
    case Task::amodal:
      if (!s.cond) throw ConfigError("amodal sample without modal mask");
      return {s.rgb, *s.cond};
  }
  return {};
}

// --- disk layout ------------------------------------------------------------

void write_target_bin(const fs::path& path, const TargetMap& t) {
  if (t.planes.empty()) throw ShapeError("write_target_bin: no planes");
  const int h = int(t.planes[0].rows()), w = int(t.planes[0].cols()), c = int(t.planes.size());
  std::vector<std::uint32_t> words(std::size_t(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) {
        std::uint32_t u = std::bit_cast<std::uint32_t>(t.planes[k](y, x));
        if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
        words[(std::size_t(y) * w + x) * c + k] = u;
      }
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(words.data()), std::streamsize(words.size() * 4));
  if (!os) throw Error("write_target_bin: failed writing " + path.string());
}

TargetMap read_target_bin(const fs::path& path, Task task, int height, int width) {
  const int c = task == Task::flow ? 2 : 1;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("read_target_bin: cannot open " + path.string());
  std::vector<std::uint32_t> words(std::size_t(height) * width * c);
  is.read(reinterpret_cast<char*>(words.data()), std::streamsize(words.size() * 4));
  if (is.gcount() != std::streamsize(words.size() * 4)) throw Error("read_target_bin: truncated " + path.string());
  TargetMap t;
  t.task = task;
  t.planes.assign(c, Map2(height, width));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int k = 0; k < c; ++k) {
        std::uint32_t u = words[(std::size_t(y) * width + x) * c + k];
        if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
        t.planes[k](y, x) = std::bit_cast<float>(u);
      }
  return t;
}

DatasetManifest write_dataset(const fs::path& root, const std::string& task, int count, int resolution, std::uint64_t seed,
                              double val_fraction, int u_max) {
  if (count < 1) throw ConfigError("write_dataset: count must be >= 1");
  const bool classes = task == "classes";
  const Task t = classes ? Task::depth : parse_task(task);
  fs::create_directories(root);
  DatasetManifest man;
  man.task = task;
  man.resolution = resolution;
  const int n_val = int(std::lround(count * val_fraction));
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05d", i);
    const fs::path final_dir = root / name;
    const fs::path tmp = root / (std::string(name) + ".tmp");
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    const std::uint64_t sseed = seed * 1000003ull + std::uint64_t(i);
    json meta;
    meta["task"] = task;
    meta["height"] = resolution;
    meta["width"] = resolution;
    meta["seed"] = sseed;
    if (classes) {
      ClassSample cs = gen_class_image(sseed, resolution);
      write_png(tmp / "rgb.png", cs.rgb);
      meta["label"] = cs.label;
    } else {
      PerceptionSample s = make_sample(t, sseed, resolution, u_max);
      write_png(tmp / "rgb.png", s.rgb);
      if (s.cond) write_png(tmp / "cond.png", *s.cond);
      write_target_bin(tmp / "target.bin", s.target);
      if (t == Task::flow) meta["u_max"] = u_max;
      if (t == Task::depth) meta["depth_range"] = {{"log_min", s.depth_range.log_min}, {"log_max", s.depth_range.log_max}};
    }
    std::ofstream(tmp / "meta.json") << meta.dump(2) << "\n";
    fs::remove_all(final_dir);
    fs::rename(tmp, final_dir);
    man.samples.push_back({name, i >= count - n_val ? "val" : "train"});
  }
  json j;
  j["task"] = man.task;
  j["resolution"] = man.resolution;
  j["samples"] = json::array();
  for (const auto& e : man.samples) j["samples"].push_back({{"dir", e.dir}, {"split", e.split}});
  const fs::path tmp = root / "manifest.json.tmp";
  std::ofstream(tmp) << j.dump(2) << "\n";
  fs::rename(tmp, root / "manifest.json");
  return man;
}

DatasetManifest read_manifest(const fs::path& root) {
  std::ifstream is(root / "manifest.json");
  if (!is) throw Error("read_manifest: no manifest.json in " + root.string());
  const json j = json::parse(is);
  DatasetManifest man;
  man.task = j.at("task").get<std::string>();
  man.resolution = j.at("resolution").get<int>();
  for (const auto& e : j.at("samples")) man.samples.push_back({e.at("dir").get<std::string>(), e.at("split").get<std::string>()});
  return man;
}

PerceptionSample load_sample(const fs::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw Error("load_sample: no meta.json in " + dir.string());
  const json meta = json::parse(is);
  PerceptionSample s;
  s.task = parse_task(meta.at("task").get<std::string>());
  s.seed = meta.at("seed").get<std::uint64_t>();
  const int h = meta.at("height").get<int>(), w = meta.at("width").get<int>();
  s.rgb = read_png(dir / "rgb.png");
  if (fs::exists(dir / "cond.png")) s.cond = read_png(dir / "cond.png");
  s.target = read_target_bin(dir / "target.bin", s.task, h, w);
  if (meta.contains("u_max")) s.u_max = meta["u_max"].get<int>();
  if (meta.contains("depth_range"))
    s.depth_range = {meta["depth_range"].at("log_min").get<double>(), meta["depth_range"].at("log_max").get<double>()};
  return s;
}

ClassSample load_class_sample(const fs::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw Error("load_class_sample: no meta.json in " + dir.string());
  const json meta = json::parse(is);
  return {read_png(dir / "rgb.png"), meta.at("label").get<int>()};
}

}  // namespace percept
