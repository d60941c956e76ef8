#pragma once

#include <json.hpp>

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bsdg/random.hpp"
#include "bsdg/tensor.hpp"
#include "bsdg/transforms.hpp"

namespace bsdg {

// CRC-32 (IEEE 802.3, reflected), the same polynomial zip and png use.
inline std::uint32_t crc32_ieee(const unsigned char* data, std::size_t n,
                                std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = seed ^ 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i)
    crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

// In-memory labeled image dataset. Pixels live in [0,1], float32, [N,C,H,W].
struct LabeledDataset {
  std::size_t channels = 1, height = 0, width = 0, num_classes = 0;
  Tensor<float> images;  // [N,C,H,W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

namespace detail_ds {

inline void put_u16le(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32le(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const unsigned char* p;
  std::size_t n;
  std::size_t off = 0;
  explicit ByteReader(const std::string& s)
      : p(reinterpret_cast<const unsigned char*>(s.data())), n(s.size()) {}
  void need(std::size_t k, const char* what) const {
    if (off + k > n)
      throw parse_error(std::string("unexpected end of file while reading ") + what, off);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return p[off++];
  }
  std::uint16_t u16le(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(p[off] | (p[off + 1] << 8));
    off += 2;
    return v;
  }
  std::uint32_t u32le(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  std::uint32_t u32be(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | p[off + i];
    off += 4;
    return v;
  }
};

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "'");
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void spew(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw io_error("short write to '" + path + "'");
}

}  // namespace detail_ds

// Dataset container format, little-endian:
//   "BSDG" | version u16 | dtype u8 (0 = f32) | num_classes u32 | N u32 |
//   C u16 | H u16 | W u16 | labels N x u16 | pixels N*C*H*W f32 | crc32 u32
// The trailing crc covers every byte before it.
inline std::string serialize_dataset(const LabeledDataset& ds) {
  detail::require(ds.images.rank() == 4 && ds.images.shape()[0] == ds.size(),
                  "serialize_dataset: image/label count mismatch");
  std::string s;
  s.reserve(17 + ds.size() * 2 + ds.images.size() * 4 + 4);
  s += "BSDG";
  detail_ds::put_u16le(s, 1);
  s.push_back(0);  // dtype f32
  detail_ds::put_u32le(s, static_cast<std::uint32_t>(ds.num_classes));
  detail_ds::put_u32le(s, static_cast<std::uint32_t>(ds.size()));
  detail_ds::put_u16le(s, static_cast<std::uint16_t>(ds.channels));
  detail_ds::put_u16le(s, static_cast<std::uint16_t>(ds.height));
  detail_ds::put_u16le(s, static_cast<std::uint16_t>(ds.width));
  for (int lab : ds.labels)
    detail_ds::put_u16le(s, static_cast<std::uint16_t>(lab));
  for (float v : ds.images.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail_ds::put_u32le(s, bits);
  }
  detail_ds::put_u32le(s, crc32_ieee(reinterpret_cast<const unsigned char*>(s.data()),
                                     s.size()));
  return s;
}

inline void save_dataset(const LabeledDataset& ds, const std::string& path) {
  detail_ds::spew(path, serialize_dataset(ds));
}

inline LabeledDataset parse_dataset(const std::string& bytes) {
  detail_ds::ByteReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(r.p, "BSDG", 4) != 0)
    throw parse_error("bad magic, expected \"BSDG\"", 0);
  r.off = 4;
  const auto version = r.u16le("version");
  if (version != 1)
    throw parse_error("unsupported version " + std::to_string(version), 4);
  const auto dtype = r.u8("dtype");
  if (dtype != 0)
    throw parse_error("unsupported dtype " + std::to_string(dtype), 6);
  LabeledDataset ds;
  ds.num_classes = r.u32le("num_classes");
  const std::size_t N = r.u32le("sample count");
  ds.channels = r.u16le("channels");
  ds.height = r.u16le("height");
  ds.width = r.u16le("width");
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0 || ds.num_classes == 0)
    throw parse_error("zero-sized geometry field", 7);
  ds.labels.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const auto lab = r.u16le("label");
    if (lab >= ds.num_classes)
      throw parse_error("label " + std::to_string(lab) + " out of range", r.off - 2);
    ds.labels[i] = lab;
  }
  const std::size_t count = N * ds.channels * ds.height * ds.width;
  std::vector<float> px(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto bits = r.u32le("pixels");
    std::memcpy(&px[i], &bits, 4);
  }
  const std::size_t body_end = r.off;
  const auto stored = r.u32le("crc32");
  const auto actual = crc32_ieee(r.p, body_end);
  if (stored != actual)
    throw parse_error("crc mismatch, file is corrupt", body_end);
  if (r.off != r.n)
    throw parse_error("trailing bytes after crc", r.off);
  ds.images = Tensor<float>(ad::Shape{N, ds.channels, ds.height, ds.width},
                            std::move(px));
  return ds;
}

inline LabeledDataset load_dataset(const std::string& path) {
  return parse_dataset(detail_ds::slurp(path));
}

// IDX (big-endian) image/label pair reader, the format the classic digit
// corpora ship in. Pixels are u8 and get scaled to [0,1].
inline LabeledDataset load_idx_pair(const std::string& images_path,
                                    const std::string& labels_path,
                                    std::size_t num_classes = 10) {
  const std::string ib = detail_ds::slurp(images_path);
  const std::string lb = detail_ds::slurp(labels_path);

  detail_ds::ByteReader ir(ib);
  const auto imagic = ir.u32be("image magic");
  if (imagic != 0x00000803u)
    throw parse_error("bad image magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", imagic);
      return std::string(buf);
    }(), 0);
  const std::size_t n = ir.u32be("image count");
  const std::size_t h = ir.u32be("rows");
  const std::size_t w = ir.u32be("cols");
  ir.need(n * h * w, "image pixels");

  detail_ds::ByteReader lr(lb);
  const auto lmagic = lr.u32be("label magic");
  if (lmagic != 0x00000801u)
    throw parse_error("bad label magic", 0);
  const std::size_t ln = lr.u32be("label count");
  if (ln != n)
    throw parse_error("label count " + std::to_string(ln) + " does not match image count " +
                      std::to_string(n), 4);
  lr.need(n, "labels");

  LabeledDataset ds;
  ds.channels = 1;
  ds.height = h;
  ds.width = w;
  ds.num_classes = num_classes;
  ds.labels.resize(n);
  std::vector<float> px(n * h * w);
  for (std::size_t i = 0; i < n * h * w; ++i)
    px[i] = static_cast<float>(ir.p[ir.off + i]) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const auto lab = lr.p[lr.off + i];
    if (lab >= num_classes)
      throw parse_error("label " + std::to_string(int(lab)) + " out of range",
                        lr.off + i);
    ds.labels[i] = lab;
  }
  ds.images = Tensor<float>(ad::Shape{n, 1, h, w}, std::move(px));
  return ds;
}

namespace detail_ds {

// Seven-segment style stroke fonts for the ten glyph classes, in unit
// coordinates with (0,0) top-left. Each stroke is a segment from a to b.
struct Seg {
  float ax, ay, bx, by;
};

inline const std::vector<Seg>& glyph_strokes(int cls) {
  // Segment endpoints of a standard display: corners at x in {0.25, 0.75},
  // y in {0.15, 0.5, 0.85}.
  constexpr float L = 0.25f, R = 0.75f, T = 0.15f, M = 0.5f, B = 0.85f;
  const Seg A{L, T, R, T}, Bseg{R, T, R, M}, Cseg{R, M, R, B}, D{L, B, R, B},
      E{L, M, L, B}, F{L, T, L, M}, G{L, M, R, M};
  static const std::vector<std::vector<Seg>> table = {
      {A, Bseg, Cseg, D, E, F},     // 0
      {Bseg, Cseg},                 // 1
      {A, Bseg, G, E, D},           // 2
      {A, Bseg, G, Cseg, D},        // 3
      {F, G, Bseg, Cseg},           // 4
      {A, F, G, Cseg, D},           // 5
      {A, F, G, E, D, Cseg},        // 6
      {A, Bseg, Cseg},              // 7
      {A, Bseg, Cseg, D, E, F, G},  // 8
      {A, Bseg, Cseg, D, F, G},     // 9
  };
  return table[static_cast<std::size_t>(cls)];
}

inline float dist_to_seg(float px, float py, const Seg& s) {
  const float vx = s.bx - s.ax, vy = s.by - s.ay;
  const float wx = px - s.ax, wy = py - s.ay;
  const float vv = vx * vx + vy * vy;
  float t = vv > 0.0f ? (wx * vx + wy * vy) / vv : 0.0f;
  t = std::min(1.0f, std::max(0.0f, t));
  const float dx = px - (s.ax + t * vx), dy = py - (s.ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail_ds

// Synthetic stroke-glyph classification data: digit-like seven-segment
// shapes rendered through a soft distance field, with per-sample pose jitter
// and pixel noise. Deterministic in (n, num_classes, resolution, seed).
inline LabeledDataset make_glyphs(std::size_t n, std::size_t num_classes,
                                  std::size_t resolution, std::uint64_t seed) {
  if (num_classes < 2 || num_classes > 10)
    throw config_error("glyphs: num_classes must be in [2,10]");
  if (resolution != 16 && resolution != 32)
    throw config_error("glyphs: resolution must be 16 or 32");
  LabeledDataset ds;
  ds.channels = 1;
  ds.height = resolution;
  ds.width = resolution;
  ds.num_classes = num_classes;
  ds.labels.resize(n);
  std::vector<float> px(n * resolution * resolution);

  RngStream root(mix_seed(seed, stream_tag::data));
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % num_classes);
    ds.labels[i] = cls;
    RngStream rng = root.derive(i);

    const float rot = static_cast<float>(rng.uniform(-0.14, 0.14));  // radians
    const float sc = static_cast<float>(rng.uniform(0.9, 1.1));
    const float tx = static_cast<float>(rng.uniform(-0.06, 0.06));
    const float ty = static_cast<float>(rng.uniform(-0.06, 0.06));
    const float width = static_cast<float>(rng.uniform(0.045, 0.065));

    std::vector<detail_ds::Seg> segs = detail_ds::glyph_strokes(cls);
    const float cr = std::cos(rot), sr = std::sin(rot);
    for (auto& s : segs) {
      auto warp = [&](float& x, float& y) {
        const float ux = (x - 0.5f) * sc, uy = (y - 0.5f) * sc;
        x = cr * ux - sr * uy + 0.5f + tx;
        y = sr * ux + cr * uy + 0.5f + ty;
      };
      warp(s.ax, s.ay);
      warp(s.bx, s.by);
    }

    float* out = &px[i * resolution * resolution];
    const float inv = 1.0f / static_cast<float>(resolution);
    for (std::size_t y = 0; y < resolution; ++y)
      for (std::size_t x = 0; x < resolution; ++x) {
        const float cxp = (static_cast<float>(x) + 0.5f) * inv;
        const float cyp = (static_cast<float>(y) + 0.5f) * inv;
        float d = 1e9f;
        for (const auto& s : segs) d = std::min(d, detail_ds::dist_to_seg(cxp, cyp, s));
        float v = (width + 0.035f - d) / 0.035f;
        v = std::min(1.0f, std::max(0.0f, v));
        v += static_cast<float>(rng.normal() * 0.02);
        out[y * resolution + x] = img::clamp01(v);
      }
  }
  ds.images = Tensor<float>(ad::Shape{n, 1, resolution, resolution}, std::move(px));
  return ds;
}

// Dataset with every image pushed through `pipe`; labels are untouched.
// Sample i keeps substream (seed, i) regardless of batching.
inline LabeledDataset materialize(const LabeledDataset& ds, const Pipeline& pipe,
                                  std::uint64_t seed, bool stochastic = true) {
  LabeledDataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.num_classes = ds.num_classes;
  out.labels = ds.labels;
  out.images = apply_pipeline(ds.images, pipe, seed, 0, stochastic);
  return out;
}

// Writes one container file per pipeline plus a manifest describing what was
// generated and from which seed.
inline void export_surrogate_corpus(const LabeledDataset& ds,
                                    const std::vector<Pipeline>& pipes,
                                    std::uint64_t seed, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["seed"] = seed;
  manifest["num_samples"] = ds.size();
  manifest["files"] = nlohmann::json::array();
  for (const auto& p : pipes) {
    const std::string fname = "surrogate_" + p.name + ".bsdg";
    save_dataset(materialize(ds, p, mix_seed(seed, std::hash<std::string>{}(p.name))),
                 dir + "/" + fname);
    nlohmann::json entry = to_json(p);
    entry["file"] = fname;
    manifest["files"].push_back(entry);
  }
  std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
  if (!mf) throw io_error("cannot write manifest in '" + dir + "'");
  mf << manifest.dump(2) << "\n";
}

// Deterministic epoch batching: indices shuffled once per epoch from
// (seed, epoch), then cut into fixed-size batches (last short batch kept).
struct Batcher {
  std::size_t dataset_size = 0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;

  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t epoch) const {
    detail::require(batch_size > 0, "batcher: batch_size must be positive");
    std::vector<std::size_t> idx(dataset_size);
    for (std::size_t i = 0; i < dataset_size; ++i) idx[i] = i;
    RngStream rng(mix_seed(mix_seed(seed, stream_tag::shuffle), epoch));
    rng.shuffle(idx.begin(), idx.end());
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t at = 0; at < idx.size(); at += batch_size) {
      const std::size_t end = std::min(idx.size(), at + batch_size);
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                       idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
  }
};

// Gathers rows of a dataset into a float batch tensor plus labels.
inline std::pair<Tensor<float>, std::vector<int>> gather_batch(
    const LabeledDataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t stride = ds.channels * ds.height * ds.width;
  std::vector<float> px(indices.size() * stride);
  std::vector<int> labels(indices.size());
  const auto& src = ds.images.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    detail::require(indices[r] < ds.size(), "gather_batch: index out of range");
    std::copy_n(&src[indices[r] * stride], stride, &px[r * stride]);
    labels[r] = ds.labels[indices[r]];
  }
  return {Tensor<float>(ad::Shape{indices.size(), ds.channels, ds.height, ds.width},
                        std::move(px)),
          labels};
}

}  // namespace bsdg
