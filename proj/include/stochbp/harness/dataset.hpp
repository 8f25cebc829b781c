// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic temporal-motif clips. Every clip contains the same m motif
// frames at random positions on a noise background; the class is the order
// in which the motifs appear. A model that sees frames independently
// cannot tell classes apart.
//
// File format (all integers u64, all reals f64, little-endian):
//   "SBPDATA1"
//   samples channels frames height width classes motifs
//   noise seed motif_seed
//   motifs x frame_size values
//   per sample: label, then channels*frames*height*width values
// in (c, t, h, w) order.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "stochbp/errors.hpp"
#include "stochbp/models/common.hpp"
#include "stochbp/rng.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp {

struct DatasetSpec {
  std::size_t samples = 2000;
  VideoShape video;
  std::size_t classes = 4;
  double noise = 0.5;
  /// Draws labels, positions and noise.
  std::uint64_t seed = 0;
  /// Draws the motif frames; splits of one task share it.
  std::uint64_t motif_seed = 0;
};

struct Dataset {
  DatasetSpec spec;
  /// One row per motif frame.
  Tensor motifs;
  std::vector<Tensor> clips;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return clips.size(); }
};

/// Smallest m with m! >= classes (at least 2).
inline std::size_t motif_count(std::size_t classes) {
  std::size_t m = 2, f = 2;
  while (f < classes) f *= ++m;
  return m;
}

/// Motif order of class `label`: the label-th permutation of 0..m-1 in
/// lexicographic order.
inline std::vector<std::size_t> class_order(std::size_t label, std::size_t m) {
  std::vector<std::size_t> pool(m);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::size_t f = 1;
  for (std::size_t i = 2; i < m; ++i) f *= i;
  std::vector<std::size_t> out;
  for (std::size_t k = m; k > 0; --k) {
    const std::size_t idx = label / f;
    label %= f;
    out.push_back(pool[idx]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(idx));
    if (k > 1) f /= (k - 1);
  }
  return out;
}

inline Dataset gen_synthetic_dataset(const DatasetSpec& spec) {
  const VideoShape& v = spec.video;
  if (spec.classes < 2) throw ConfigError("dataset: need at least 2 classes");
  if (v.frames < 4) throw ConfigError("dataset: need at least 4 frames");
  if (spec.samples == 0 || v.channels == 0 || v.height == 0 || v.width == 0) {
    throw ConfigError("dataset: empty sizes");
  }
  if (!(spec.noise >= 0.0)) throw ConfigError("dataset: noise must be non-negative");
  const std::size_t m = motif_count(spec.classes);
  if (m > v.frames) {
    throw ConfigError("dataset: " + std::to_string(spec.classes) + " classes need " + std::to_string(m) +
                      " motif frames but clips have " + std::to_string(v.frames));
  }
  Rng motif_rng(spec.motif_seed);
  Rng rng(spec.seed);
  Dataset d;
  d.spec = spec;
  d.motifs = motif_rng.normal_tensor({m, v.frame_size()});

  std::vector<std::size_t> labels(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) labels[i] = i % spec.classes;
  for (std::size_t i = spec.samples; i > 1; --i) std::swap(labels[i - 1], labels[rng.index(i)]);

  const std::size_t hw = v.height * v.width;
  std::vector<std::size_t> frames(v.frames);
  for (std::size_t s = 0; s < spec.samples; ++s) {
    Tensor clip = rng.normal_tensor(v.shape(), spec.noise);
    std::iota(frames.begin(), frames.end(), std::size_t{0});
    for (std::size_t i = 0; i < m; ++i) std::swap(frames[i], frames[i + rng.index(v.frames - i)]);
    std::vector<std::size_t> pos(frames.begin(), frames.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(pos.begin(), pos.end());
    const std::vector<std::size_t> order = class_order(labels[s], m);
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t t = pos[j];
      const auto motif = d.motifs.row(order[j]);
      for (std::size_t c = 0; c < v.channels; ++c)
        for (std::size_t p = 0; p < hw; ++p) clip[(c * v.frames + t) * hw + p] += motif[c * hw + p];
    }
    d.clips.push_back(std::move(clip));
  }
  d.labels = std::move(labels);
  return d;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double x) { put_u64(out, std::bit_cast<std::uint64_t>(x)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  std::uint64_t u64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return x;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw ConfigError("dataset file is truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kDatasetMagic[] = "SBPDATA1";

inline std::string serialize_dataset(const Dataset& d) {
  const VideoShape& v = d.spec.video;
  std::string out(kDatasetMagic, 8);
  for (std::uint64_t x : {std::uint64_t{d.size()}, std::uint64_t{v.channels}, std::uint64_t{v.frames},
                          std::uint64_t{v.height}, std::uint64_t{v.width}, std::uint64_t{d.spec.classes},
                          std::uint64_t{d.motifs.rows()}})
    detail::put_u64(out, x);
  detail::put_f64(out, d.spec.noise);
  detail::put_u64(out, d.spec.seed);
  detail::put_u64(out, d.spec.motif_seed);
  for (double x : d.motifs.data()) detail::put_f64(out, x);
  for (std::size_t s = 0; s < d.size(); ++s) {
    detail::put_u64(out, d.labels[s]);
    for (double x : d.clips[s].data()) detail::put_f64(out, x);
  }
  return out;
}

inline Dataset deserialize_dataset(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.raw(8) != std::string(kDatasetMagic, 8)) throw ConfigError("not a dataset file (bad magic)");
  Dataset d;
  d.spec.samples = r.u64();
  VideoShape& v = d.spec.video;
  v.channels = r.u64();
  v.frames = r.u64();
  v.height = r.u64();
  v.width = r.u64();
  d.spec.classes = r.u64();
  const std::size_t m = r.u64();
  d.spec.noise = r.f64();
  d.spec.seed = r.u64();
  d.spec.motif_seed = r.u64();
  d.motifs = Tensor(Shape{m, v.frame_size()});
  for (double& x : d.motifs.data()) x = r.f64();
  for (std::size_t s = 0; s < d.spec.samples; ++s) {
    const std::size_t label = r.u64();
    if (label >= d.spec.classes) throw ConfigError("dataset file: label out of range");
    d.labels.push_back(label);
    Tensor clip(v.shape());
    for (double& x : clip.data()) x = r.f64();
    d.clips.push_back(std::move(clip));
  }
  if (!r.done()) throw ConfigError("dataset file has trailing bytes");
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  const std::string bytes = serialize_dataset(d);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_dataset(bytes);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t dataset_hash(const Dataset& d) { return fnv1a(serialize_dataset(d)); }

}  // namespace stochbp
