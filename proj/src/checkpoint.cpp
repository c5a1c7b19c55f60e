// SPDX-License-Identifier: Apache-2.0
#include "percept/checkpoint.hpp"

#include "serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace percept {

namespace fs = std::filesystem;

namespace {

void append_tensor(std::string& blob, json& index, const std::string& name, const Mat<float>& m) {
  index.push_back({{"name", name}, {"dtype", "f32"}, {"shape", {m.rows(), m.cols()}}, {"offset", blob.size()}});
  const std::size_t at = blob.size();
  blob.resize(at + std::size_t(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(m.data()[i]);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(&blob[at + std::size_t(i) * 4], &u, 4);
  }
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string weights_hash(const fs::path& dir) { return fnv1a64_hex(read_file(dir / "weights.bin")); }

std::string save_checkpoint(const fs::path& dir, const ModelParameters<float>& params, const CheckpointMeta& meta,
                            const ModelParameters<float>* adam_m, const ModelParameters<float>* adam_v) {
  if ((adam_m == nullptr) != (adam_v == nullptr)) throw CheckpointError("save_checkpoint: optimizer moments must be given together");
  std::string blob;
  json tensors = json::array();
  params.visit([&](const std::string& name, const Mat<float>& m) { append_tensor(blob, tensors, name, m); });
  json optim = nullptr;
  if (adam_m) {
    json names = json::array();
    adam_m->visit([&](const std::string& name, const Mat<float>& m) {
      append_tensor(blob, tensors, "optim.m." + name, m);
      names.push_back("optim.m." + name);
    });
    adam_v->visit([&](const std::string& name, const Mat<float>& m) {
      append_tensor(blob, tensors, "optim.v." + name, m);
      names.push_back("optim.v." + name);
    });
    optim = {{"kind", "adam"}, {"step", meta.adam_step}, {"tensors", names}};
  }
  json man;
  man["format_version"] = kCheckpointVersion;
  man["model"] = params.spec;
  man["moe"] = params.spec.moe ? json(*params.spec.moe) : json(nullptr);
  man["codec"] = codec_json(meta.codec);
  man["schedule"] = {{"kind", to_string(meta.schedule)}, {"timesteps", meta.timesteps}};
  man["step"] = meta.step;
  man["optimizer"] = optim;
  man["tensors"] = tensors;
  man["weights_bytes"] = blob.size();
  man["parent_hash"] = meta.parent_hash.empty() ? json(nullptr) : json(meta.parent_hash);
  if (!meta.note.empty()) man["note"] = meta.note;
  const std::string hash = fnv1a64_hex(blob);
  man["weights_hash"] = hash;

  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream os(tmp / "weights.bin", std::ios::binary);
    os.write(blob.data(), std::streamsize(blob.size()));
    std::ofstream ms(tmp / "manifest.json");
    ms << man.dump(2) << "\n";
    if (!os || !ms) throw CheckpointError("save_checkpoint: write failed under " + tmp.string());
  }
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
  return hash;
}

Checkpoint load_checkpoint(const fs::path& dir) {
  json man;
  try {
    man = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw CheckpointError("load_checkpoint: malformed manifest in " + dir.string() + ": " + e.what());
  }
  const int version = man.value("format_version", -1);
  if (version != kCheckpointVersion)
    throw CheckpointError("load_checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::string blob = read_file(dir / "weights.bin");
  const std::size_t declared = man.value("weights_bytes", std::size_t(0));
  if (blob.size() < declared)
    throw CheckpointError("load_checkpoint: weights.bin truncated (" + std::to_string(blob.size()) + " of " +
                          std::to_string(declared) + " bytes)");

  Checkpoint ck;
  const ModelSpec spec = man.at("model").get<ModelSpec>();
  ck.params = allocate_model<float>(spec);
  ck.meta.codec = codec_from_json(man.at("codec"));
  ck.meta.schedule = parse_schedule_kind(man.at("schedule").at("kind").get<std::string>());
  ck.meta.timesteps = man.at("schedule").at("timesteps").get<int>();
  ck.meta.step = man.value("step", 0L);
  if (man.contains("parent_hash") && !man["parent_hash"].is_null()) ck.meta.parent_hash = man["parent_hash"].get<std::string>();
  ck.meta.note = man.value("note", std::string());

  std::map<std::string, json> index;
  for (const auto& t : man.at("tensors")) index[t.at("name").get<std::string>()] = t;
  auto fill = [&](const std::string& name, Mat<float>& m) {
    auto it = index.find(name);
    if (it == index.end()) throw CheckpointError("load_checkpoint: tensor '" + name + "' missing from index");
    const json& e = it->second;
    if (e.value("dtype", std::string()) != "f32") throw CheckpointError("load_checkpoint: tensor '" + name + "' has unsupported dtype");
    const auto shape = e.at("shape").get<std::vector<long>>();
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols())
      throw CheckpointError("load_checkpoint: tensor '" + name + "' shape does not match the model spec");
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t bytes = std::size_t(m.size()) * 4;
    if (off % 4 != 0 || off > blob.size() || blob.size() - off < bytes)
      throw CheckpointError("load_checkpoint: tensor '" + name + "' offset " + std::to_string(off) + " lies outside weights.bin");
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      std::uint32_t u;
      std::memcpy(&u, &blob[off + std::size_t(i) * 4], 4);
      if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
      m.data()[i] = std::bit_cast<float>(u);
    }
  };
  ck.params.visit(fill);
  if (man.contains("optimizer") && !man["optimizer"].is_null()) {
    ck.meta.adam_step = man["optimizer"].value("step", 0L);
    ck.adam_m = ck.params.shape_like();
    ck.adam_v = ck.params.shape_like();
    ck.adam_m->visit([&](const std::string& name, Mat<float>& m) { fill("optim.m." + name, m); });
    ck.adam_v->visit([&](const std::string& name, Mat<float>& m) { fill("optim.v." + name, m); });
  }
  ck.hash = fnv1a64_hex(blob);
  if (man.contains("weights_hash") && man["weights_hash"].get<std::string>() != ck.hash)
    throw CheckpointError("load_checkpoint: weights.bin content hash " + ck.hash + " differs from manifest " +
                          man["weights_hash"].get<std::string>());
  return ck;
}

}  // namespace percept
