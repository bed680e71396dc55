#include "lift3d/io.hpp"

#include "lift3d/error.hpp"
#include "lift3d/masking.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace lift3d::io {

using nlohmann::json;

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_floats(std::vector<unsigned char>& out, const std::vector<float>& values) {
  out.reserve(out.size() + values.size() * 4);
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> get_floats(const unsigned char* p, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + 4 * i, 4)));
  }
  return out;
}

std::string record_file(std::size_t i, const char* prefix, const char* ext) {
  std::ostringstream name;
  name << prefix << std::setw(6) << std::setfill('0') << i << ext;
  return name.str();
}

void push(std::vector<float>& out, double v) { out.push_back(static_cast<float>(v)); }

// Populates a fresh temp directory, then swaps it in place of `dir`.
template <typename Fill>
void write_directory_atomic(const fs::path& dir, Fill&& fill) {
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  if (!fs::create_directories(tmp, ec) && ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
  fs::remove_all(dir, ec);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path(), ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw IoError("cannot move dataset into " + dir.string() + ": " + ec.message());
}

void write_plain(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

std::vector<unsigned char> to_bytes(const std::string& s) { return {s.begin(), s.end()}; }

void check_manifest(const json& m, const char* kind, const fs::path& dir) {
  if (m.value("schema_version", -1) != kDatasetSchemaVersion) {
    throw FormatError(dir.string() + ": unsupported dataset schema version " + m.value("schema_version", json()).dump());
  }
  if (m.value("kind", std::string()) != kind) {
    throw FormatError(dir.string() + ": expected a '" + std::string(kind) + "' dataset");
  }
  const auto& records = m.at("records");
  if (!records.is_array() || m.at("count").get<std::size_t>() != records.size()) {
    throw FormatError(dir.string() + ": manifest count " + m.at("count").dump() + " disagrees with " +
                      std::to_string(records.size()) + " record entries");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].at("file").get<std::string>() != record_file(i, "record_", ".bin")) {
      throw FormatError(dir.string() + ": record " + std::to_string(i) + " has an unexpected file name");
    }
  }
}

std::vector<float> load_record(const fs::path& dir, const json& entry, std::size_t index) {
  const std::string name = "record " + std::to_string(index) + " (" + entry.at("file").get<std::string>() + ")";
  const auto bytes = read_file(dir / entry.at("file").get<std::string>());
  auto values = decode_blob(bytes, name);
  std::vector<unsigned char> payload(bytes.begin() + 16, bytes.end());
  if (crc32(payload) != entry.at("crc32").get<std::uint32_t>()) throw FormatError(name + ": CRC32 mismatch");
  if (values.size() != entry.at("floats").get<std::size_t>()) {
    throw FormatError(name + ": holds " + std::to_string(values.size()) + " floats, manifest says " +
                      entry.at("floats").dump());
  }
  return values;
}

}  // namespace

std::uint32_t crc32(const std::vector<unsigned char>& bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<unsigned char> encode_blob(const std::vector<float>& values) {
  std::vector<unsigned char> out(kBlobMagic, kBlobMagic + 8);
  put_u64(out, values.size() * 4);
  put_floats(out, values);
  return out;
}

std::vector<float> decode_blob(const std::vector<unsigned char>& bytes, const std::string& record) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kBlobMagic, 8) != 0) {
    throw FormatError(record + ": missing blob magic");
  }
  const std::uint64_t length = get_le(bytes.data() + 8, 8);
  const std::size_t present = bytes.size() - 16;
  if (length != present || length % 4 != 0) {
    throw FormatError(record + ": length prefix says " + std::to_string(length) + " bytes but " +
                      std::to_string(present) + " are present");
  }
  return get_floats(bytes.data() + 16, present / 4);
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  write_plain(tmp, bytes);
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

json read_manifest(const fs::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + ": manifest is not valid JSON: " + e.what());
  }
}

void write_episodes(const std::vector<EpisodeRecord>& records, const fs::path& dir) {
  if (records.empty()) throw InvalidArgument("refusing to write an empty dataset");
  const int points = static_cast<int>(records.front().steps.front().cloud.size());
  const int joints = static_cast<int>(records.front().steps.front().state.joint_positions.size());
  json m{{"schema_version", kDatasetSchemaVersion},
         {"kind", "episodes"},
         {"count", records.size()},
         {"shapes", {{"points", points}, {"joints", joints}, {"action", 7}}},
         {"records", json::array()}};
  write_directory_atomic(dir, [&](const fs::path& tmp) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& rec = records[i];
      if (rec.steps.empty()) throw InvalidArgument("episode " + std::to_string(i) + " has no steps");
      std::vector<float> values;
      for (const auto& step : rec.steps) {
        if (step.cloud.size() != points || static_cast<int>(step.state.joint_positions.size()) != joints ||
            static_cast<int>(step.state.joint_velocities.size()) != joints) {
          throw InvalidArgument("episode " + std::to_string(i) + " has inconsistent shapes");
        }
        for (Eigen::Index r = 0; r < points; ++r) {
          for (int c = 0; c < 3; ++c) push(values, step.cloud.points(r, c));
        }
        for (Eigen::Index r = 0; r < points; ++r) {
          for (int c = 0; c < 3; ++c) push(values, step.cloud.colors(r, c));
        }
        const Eigen::VectorXd s = step.state.vector();
        for (Eigen::Index k = 0; k < s.size(); ++k) push(values, s(k));
        const auto a = step.action.vector();
        for (int k = 0; k < 7; ++k) push(values, a(k));
      }
      const auto blob = encode_blob(values);
      const std::string file = record_file(i, "record_", ".bin");
      write_plain(tmp / file, blob);
      m["records"].push_back({{"file", file},
                              {"crc32", crc32(std::vector<unsigned char>(blob.begin() + 16, blob.end()))},
                              {"floats", values.size()},
                              {"steps", rec.steps.size()},
                              {"seed", rec.scene_seed},
                              {"task", rec.task}});
    }
    write_plain(tmp / "manifest.json", to_bytes(m.dump(2) + "\n"));
  });
}

std::vector<EpisodeRecord> read_episodes(const fs::path& dir) {
  const json m = read_manifest(dir);
  check_manifest(m, "episodes", dir);
  const int points = m.at("shapes").at("points").get<int>();
  const int joints = m.at("shapes").at("joints").get<int>();
  const std::size_t per_step = static_cast<std::size_t>(points) * 6 + 7 + 2 * static_cast<std::size_t>(joints) + 7;
  std::vector<EpisodeRecord> out;
  const auto& entries = m.at("records");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto steps = e.at("steps").get<std::size_t>();
    if (e.at("floats").get<std::size_t>() != steps * per_step) {
      throw FormatError("record " + std::to_string(i) + ": float count does not match its step count");
    }
    const auto values = load_record(dir, e, i);
    EpisodeRecord rec;
    rec.task = e.at("task").get<std::string>();
    rec.scene_seed = e.at("seed").get<std::uint64_t>();
    std::size_t at = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      EpisodeStep step;
      step.cloud.points.resize(points, 3);
      step.cloud.colors.resize(points, 3);
      for (Eigen::Index r = 0; r < points; ++r) {
        for (int c = 0; c < 3; ++c) step.cloud.points(r, c) = values[at++];
      }
      for (Eigen::Index r = 0; r < points; ++r) {
        for (int c = 0; c < 3; ++c) step.cloud.colors(r, c) = values[at++];
      }
      Eigen::VectorXd pose(7);
      for (int k = 0; k < 7; ++k) pose(k) = values[at++];
      step.state.end_effector = Pose7DoF::from_vector(pose);
      for (int j = 0; j < joints; ++j) step.state.joint_positions.push_back(values[at++]);
      for (int j = 0; j < joints; ++j) step.state.joint_velocities.push_back(values[at++]);
      for (int k = 0; k < 7; ++k) pose(k) = values[at++];
      step.action = Pose7DoF::from_vector(pose);
      rec.steps.push_back(std::move(step));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_pretrain(const std::vector<PretrainRecord>& records, const fs::path& dir) {
  if (records.empty()) throw InvalidArgument("refusing to write an empty dataset");
  const int h = records.front().height;
  const int w = records.front().width;
  json m{{"schema_version", kDatasetSchemaVersion},
         {"kind", "pretrain"},
         {"count", records.size()},
         {"shapes", {{"height", h}, {"width", w}}},
         {"records", json::array()}};
  const auto pixels = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  write_directory_atomic(dir, [&](const fs::path& tmp) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& rec = records[i];
      if (rec.height != h || rec.width != w || rec.image.size() != 3 * pixels || rec.depth.size() != pixels ||
          rec.attention.size() != pixels) {
        throw InvalidArgument("pretrain record " + std::to_string(i) + " has inconsistent shapes");
      }
      std::vector<float> values;
      values.reserve(5 * pixels);
      for (double v : rec.image) push(values, v);
      for (double v : rec.depth) push(values, v);
      for (double v : rec.attention) push(values, v);
      const auto blob = encode_blob(values);
      const std::string file = record_file(i, "record_", ".bin");
      write_plain(tmp / file, blob);
      write_plain(tmp / record_file(i, "attention_", ".pgm"),
                  masking::encode_pgm({rec.height, rec.width, rec.attention, rec.text}));
      m["records"].push_back({{"file", file},
                              {"crc32", crc32(std::vector<unsigned char>(blob.begin() + 16, blob.end()))},
                              {"floats", values.size()},
                              {"seed", rec.seed},
                              {"text", rec.text}});
    }
    write_plain(tmp / "manifest.json", to_bytes(m.dump(2) + "\n"));
  });
}

std::vector<PretrainRecord> read_pretrain(const fs::path& dir) {
  const json m = read_manifest(dir);
  check_manifest(m, "pretrain", dir);
  const int h = m.at("shapes").at("height").get<int>();
  const int w = m.at("shapes").at("width").get<int>();
  const auto pixels = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<PretrainRecord> out;
  const auto& entries = m.at("records");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("floats").get<std::size_t>() != 5 * pixels) {
      throw FormatError("record " + std::to_string(i) + ": float count does not match the image shape");
    }
    const auto values = load_record(dir, e, i);
    PretrainRecord rec;
    rec.height = h;
    rec.width = w;
    rec.text = e.at("text").get<std::string>();
    rec.seed = e.at("seed").get<std::uint64_t>();
    rec.image.assign(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(3 * pixels));
    rec.depth.assign(values.begin() + static_cast<std::ptrdiff_t>(3 * pixels),
                     values.begin() + static_cast<std::ptrdiff_t>(4 * pixels));
    rec.attention.assign(values.begin() + static_cast<std::ptrdiff_t>(4 * pixels), values.end());
    out.push_back(std::move(rec));
  }
  return out;
}

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> payload;
  json table = json::array();
  for (const auto& a : ckpt.arrays) {
    if (a.data.size() != static_cast<std::size_t>(a.rows) * static_cast<std::size_t>(a.cols)) {
      throw InvalidArgument("checkpoint array " + a.name + " has inconsistent shape");
    }
    table.push_back({{"name", a.name}, {"shape", {a.rows, a.cols}}, {"offset", payload.size()}});
    put_floats(payload, a.data);
  }
  const json header{{"stage", ckpt.stage}, {"config", ckpt.config}, {"tensors", table}, {"crc32", crc32(payload)}};
  const std::string text = header.dump();
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = static_cast<int>(get_le(bytes.data() + 8, 4));
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t header_len = get_le(bytes.data() + 12, 8);
  if (header_len > bytes.size() - 20) throw FormatError("checkpoint header is truncated");
  json header;
  try {
    header = json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t base = 20 + header_len;
  const std::vector<unsigned char> payload(bytes.begin() + static_cast<std::ptrdiff_t>(base), bytes.end());
  if (crc32(payload) != header.at("crc32").get<std::uint32_t>()) throw FormatError("checkpoint payload CRC32 mismatch");

  Checkpoint ckpt;
  ckpt.stage = header.at("stage").get<std::string>();
  ckpt.config = header.at("config");
  for (const auto& t : header.at("tensors")) {
    NamedArray a;
    a.name = t.at("name").get<std::string>();
    a.rows = t.at("shape").at(0).get<int>();
    a.cols = t.at("shape").at(1).get<int>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = static_cast<std::size_t>(a.rows) * static_cast<std::size_t>(a.cols);
    if (offset + 4 * count > payload.size()) throw FormatError("checkpoint tensor " + a.name + " is truncated");
    a.data = get_floats(payload.data() + offset, count);
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const fs::path& path) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

void append_matrix(Checkpoint& ckpt, const std::string& name, const nn::Matrix& m) {
  NamedArray a{name, static_cast<int>(m.rows()), static_cast<int>(m.cols()), {}};
  a.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) a.data.push_back(static_cast<float>(m.data()[i]));
  ckpt.arrays.push_back(std::move(a));
}

void append_params(Checkpoint& ckpt, const nn::ParamList& params) {
  for (const auto& p : params) append_matrix(ckpt, p.name, p.tensor.value());
}

nn::Matrix load_matrix(const Checkpoint& ckpt, const std::string& name) {
  const NamedArray* a = ckpt.find(name);
  if (a == nullptr) throw CheckpointMismatchError("checkpoint has no array named " + name);
  nn::Matrix m(a->rows, a->cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = a->data[static_cast<std::size_t>(i)];
  return m;
}

void load_params(const Checkpoint& ckpt, nn::ParamList& params) {
  for (auto& p : params) {
    nn::Matrix m = load_matrix(ckpt, p.name);
    if (m.rows() != p.tensor.rows() || m.cols() != p.tensor.cols()) {
      throw CheckpointMismatchError("checkpoint array " + p.name + " is " + std::to_string(m.rows()) + "x" +
                                    std::to_string(m.cols()) + ", model expects " + std::to_string(p.tensor.rows()) +
                                    "x" + std::to_string(p.tensor.cols()));
    }
    p.tensor.mutable_value() = std::move(m);
  }
}

}  // namespace lift3d::io
