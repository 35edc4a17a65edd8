/*
 * Copyright 2026 The pinf Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "pinf/model.hpp"
#include "pinf/optim.hpp"
#include "pinf/stopping.hpp"

// Checkpoint file layout (all integers little-endian):
//
//   "PINF" | u32 version | u32 len | config record (UTF-8 key=value lines)
//   u32 entry count | per entry: u32 len | name | u32 rank | u64 dims... |
//   float32 values | u32 CRC32 of every preceding byte
//
// Entries hold the model parameters ("<group>/<tensor>") followed by the Adam
// moments ("adam.m:<name>", "adam.v:<name>").
namespace pinf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  int stage = 1;
  std::size_t epoch = 0;
  ModelParams params;
  AdamState adam;
  std::string rng_state;
  bool stop_seen = false;
  double stop_best = 0.0;
  std::size_t stop_strikes = 0;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& b, std::size_t end) : b_(b), end_(end) {}
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > end_) throw FormatError("checkpoint: record extends past end of data");
  }
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_entry(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double x : t.data()) {
    const float f = static_cast<float>(x);
    w.raw(&f, 4);
  }
}

}  // namespace detail

inline std::string checkpoint_config_record(const Checkpoint& c) {
  const ModelConfig& m = c.params.config();
  std::ostringstream os;
  os << "stage=" << c.stage << '\n' << "epoch=" << c.epoch << '\n';
  os << "image_size=" << m.image_size << '\n' << "channels=";
  for (std::size_t i = 0; i < m.channels.size(); ++i) os << (i ? "," : "") << m.channels[i];
  os << '\n'
     << "latent_dim=" << m.latent_dim << '\n'
     << "num_labels=" << m.num_labels << '\n'
     << "hidden=" << m.hidden << '\n';
  os << "frozen=";
  bool first = true;
  for (const auto& g : c.params.groups()) {
    if (!g.frozen) continue;
    os << (first ? "" : ",") << group_name(g.id);
    first = false;
  }
  os << '\n'
     << "adam_step=" << c.adam.step << '\n'
     << "rng=" << c.rng_state << '\n'
     << "stop_seen=" << (c.stop_seen ? 1 : 0) << '\n'
     << "stop_best=" << detail::fmt_double(c.stop_best) << '\n'
     << "stop_strikes=" << c.stop_strikes << '\n'
     << "best_metric=" << detail::fmt_double(c.best_metric) << '\n'
     << "best_epoch=" << c.best_epoch << '\n';
  return os.str();
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw("PINF", 4);
  w.u32(kCheckpointVersion);
  w.str(checkpoint_config_record(c));
  std::uint32_t count = 0;
  for (const auto& g : c.params.groups()) count += static_cast<std::uint32_t>(g.tensors.size());
  count += static_cast<std::uint32_t>(c.adam.m.size() + c.adam.v.size());
  w.u32(count);
  for (const auto& g : c.params.groups())
    for (const auto& t : g.tensors) detail::write_entry(w, t.name, t.value);
  for (const auto& [k, t] : c.adam.m) detail::write_entry(w, "adam.m:" + k, t);
  for (const auto& [k, t] : c.adam.v) detail::write_entry(w, "adam.v:" + k, t);
  const std::uint32_t crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return std::move(w.bytes());
}

namespace detail {

inline std::map<std::string, std::string> parse_record(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed config line \"" + line + "\"");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16) throw ChecksumError("checkpoint: file too short");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (detail::crc32_of(bytes.data(), body) != stored) throw ChecksumError("checkpoint: CRC32 mismatch");
  if (bytes.compare(0, 4, "PINF") != 0) throw FormatError("checkpoint: bad magic");
  detail::ByteReader r(bytes, body);
  char magic[4];
  r.raw(magic, 4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  auto kv = detail::parse_record(r.str());
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(std::string("checkpoint: missing config key ") + k);
    return it->second;
  };
  try {
    ModelConfig mc;
    mc.image_size = std::stoul(get("image_size"));
    mc.channels.clear();
    for (const auto& s : detail::split(get("channels"), ',')) mc.channels.push_back(std::stoul(s));
    mc.latent_dim = std::stoul(get("latent_dim"));
    mc.num_labels = std::stoul(get("num_labels"));
    mc.hidden = std::stoul(get("hidden"));

    Checkpoint c;
    c.params = ModelParams(mc);
    c.stage = std::stoi(get("stage"));
    c.epoch = std::stoul(get("epoch"));
    for (const auto& s : detail::split(get("frozen"), ',')) {
      auto g = group_from_name(s);
      if (!g) throw FormatError("checkpoint: unknown group " + s);
      c.params.group(*g).frozen = true;
    }
    c.adam.step = std::stoull(get("adam_step"));
    c.rng_state = get("rng");
    c.stop_seen = get("stop_seen") == "1";
    c.stop_best = std::stod(get("stop_best"));
    c.stop_strikes = std::stoul(get("stop_strikes"));
    c.best_metric = std::stod(get("best_metric"));
    c.best_epoch = std::stoul(get("best_epoch"));

    const std::uint32_t count = r.u32();
    for (std::uint32_t e = 0; e < count; ++e) {
      const std::string name = r.str();
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
      Shape shape(rank);
      for (auto& d : shape) d = r.u64();
      Tensor t(shape);
      for (double& x : t.data()) {
        float f;
        r.raw(&f, 4);
        x = static_cast<double>(f);
      }
      if (name.starts_with("adam.m:")) {
        c.adam.m[name.substr(7)] = std::move(t);
      } else if (name.starts_with("adam.v:")) {
        c.adam.v[name.substr(7)] = std::move(t);
      } else {
        Tensor& dst = c.params.at(name);
        if (dst.shape() != t.shape()) throw FormatError("checkpoint: shape mismatch for " + name);
        dst = std::move(t);
      }
    }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes");
    return c;
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("checkpoint: malformed config value: ") + e.what());
  } catch (const UsageError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace pinf
