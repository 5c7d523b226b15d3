// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-domain identity images.
//
// Every identity has a fixed signature (body colour, marker colour, two
// marker positions, stripe frequency and phase). Image k of identity i is the
// same "base" picture in every domain; a domain only applies its style map
//   v -> gain_c * v^contrast + offset  (+ gaussian noise, clipped to [0, 1]).
// The last domain is held out as the unseen test domain.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cfd/ops.hpp"

namespace cfd {

struct DomainStyle {
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  double offset = 0.0;
  double contrast = 1.0;  // exponent
  double noise = 0.0;     // gaussian stddev

  /// Inverse of the noiseless style map for one channel value.
  double invert(std::size_t channel, double v) const {
    const double base = (v - offset) / gain[channel];
    return std::pow(std::max(base, 0.0), 1.0 / contrast);
  }
};

inline double style_distance(const DomainStyle& a, const DomainStyle& b) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) s += (a.gain[c] - b.gain[c]) * (a.gain[c] - b.gain[c]);
  s += (a.offset - b.offset) * (a.offset - b.offset);
  const double lc = std::log(a.contrast) - std::log(b.contrast);
  return std::sqrt(s + lc * lc);
}

inline std::vector<DomainStyle> default_styles() {
  return {
      {{0.95, 0.70, 0.55}, 0.02, 1.00, 0.02},
      {{0.60, 0.95, 0.70}, 0.05, 0.80, 0.02},
      {{0.65, 0.60, 0.95}, 0.00, 1.25, 0.02},
      {{0.45, 0.40, 0.50}, 0.35, 1.50, 0.03},  // unseen
  };
}

struct SyntheticSpec {
  std::size_t identities = 20;
  std::size_t images_per_identity = 8;  // per domain
  std::size_t train_domains = 3;
  std::size_t channels = 3, height = 32, width = 16;
  std::vector<DomainStyle> styles = default_styles();  // train_domains + 1, unseen last
  double min_style_distance = 0.25;
  std::uint64_t seed = 7;

  std::size_t total_domains() const { return train_domains + 1; }

  void validate() const {
    if (identities == 0 || images_per_identity == 0 || train_domains == 0)
      throw DataError("identity, image and domain counts must be positive");
    if (channels != 3) throw DataError("synthetic images have exactly three channels");
    if (height < 8 || width < 8) throw DataError("image extents must be at least 8 x 8");
    if (styles.size() != total_domains())
      throw DataError("need " + std::to_string(total_domains()) + " domain styles, got " + std::to_string(styles.size()));
    for (const auto& s : styles) {
      for (double g : s.gain)
        if (!(g > 0)) throw DataError("style gains must be positive");
      if (!(s.contrast > 0) || s.noise < 0) throw DataError("style contrast must be positive and noise nonnegative");
    }
    const auto& unseen = styles.back();
    for (std::size_t d = 0; d < train_domains; ++d)
      if (style_distance(unseen, styles[d]) < min_style_distance)
        throw DataError("unseen style is within " + std::to_string(style_distance(unseen, styles[d])) +
                        " of training domain " + std::to_string(d) + " (minimum " + std::to_string(min_style_distance) + ")");
  }
};

struct Sample {
  std::vector<float> image;  // c x h x w
  std::size_t identity = 0;
  std::size_t domain = 0;
  std::size_t index = 0;  // image index within (identity, domain)
};

struct Dataset {
  std::size_t channels = 3, height = 0, width = 0;
  std::size_t identities = 0;
  std::size_t train_domains = 0;
  std::vector<Sample> samples;  // ordered by domain, identity, index

  std::size_t unseen_domain() const { return train_domains; }
  std::size_t image_size() const { return channels * height * width; }

  /// Sample indices for (domain, identity).
  std::vector<std::vector<std::vector<std::size_t>>> lookup() const {
    std::vector<std::vector<std::vector<std::size_t>>> t(train_domains + 1, std::vector<std::vector<std::size_t>>(identities));
    for (std::size_t i = 0; i < samples.size(); ++i) t.at(samples[i].domain).at(samples[i].identity).push_back(i);
    return t;
  }
};

struct IdentitySignature {
  std::array<double, 3> color;
  std::array<double, 3> marker_color;
  std::array<std::size_t, 2> marker_y, marker_x;  // relative to the body box
  double frequency;
  double phase;
};

/// The shared pre-style picture of image k of an identity.
inline std::vector<double> render_base(const IdentitySignature& sig, const SyntheticSpec& spec, int dy, int dx,
                                       double illum) {
  const std::size_t h = spec.height, w = spec.width;
  std::vector<double> img(3 * h * w);
  const long top = static_cast<long>(h / 8) + dy, bottom = static_cast<long>(h - h / 8) + dy;
  const long left = static_cast<long>(w / 5) + dx, right = static_cast<long>(w - w / 5) + dx;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const long ly = static_cast<long>(y), lx = static_cast<long>(x);
      const bool body = ly >= top && ly < bottom && lx >= left && lx < right;
      bool marker = false;
      for (int m = 0; m < 2 && body; ++m) {
        const long my = top + static_cast<long>(sig.marker_y[m]), mx = left + static_cast<long>(sig.marker_x[m]);
        marker = marker || (ly >= my && ly < my + 3 && lx >= mx && lx < mx + 3);
      }
      const double stripe =
          0.7 + 0.3 * std::sin(2.0 * std::numbers::pi * sig.frequency * static_cast<double>(ly - top) / static_cast<double>(h) + sig.phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = 0.2 + 0.15 * static_cast<double>(y) / static_cast<double>(h);
        if (marker) v = sig.marker_color[c];
        else if (body) v = sig.color[c] * stripe;
        img[(c * h + y) * w + x] = v * illum;
      }
    }
  return img;
}

/// Deterministic under spec.seed.
inline Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t h = spec.height, w = spec.width;
  const std::size_t body_h = h - 2 * (h / 8), body_w = w - 2 * (w / 5);

  std::vector<IdentitySignature> sigs(spec.identities);
  for (auto& s : sigs) {
    for (auto& c : s.color) c = 0.3 + 0.65 * u01(rng);
    for (auto& c : s.marker_color) c = 0.05 + 0.9 * u01(rng);
    for (int m = 0; m < 2; ++m) {
      s.marker_y[m] = static_cast<std::size_t>(u01(rng) * static_cast<double>(body_h - 3));
      s.marker_x[m] = static_cast<std::size_t>(u01(rng) * static_cast<double>(body_w - 3));
    }
    s.frequency = 1.0 + 3.0 * u01(rng);
    s.phase = 2.0 * std::numbers::pi * u01(rng);
  }
  struct Jitter {
    int dy, dx;
    double illum;
  };
  std::vector<Jitter> jit(spec.identities * spec.images_per_identity);
  std::uniform_int_distribution<int> sy(-2, 2), sx(-1, 1);
  for (auto& j : jit) j = {sy(rng), sx(rng), 0.85 + 0.15 * u01(rng)};

  std::vector<std::vector<double>> bases(jit.size());
  for (std::size_t i = 0; i < spec.identities; ++i)
    for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
      const auto& j = jit[i * spec.images_per_identity + k];
      bases[i * spec.images_per_identity + k] = render_base(sigs[i], spec, j.dy, j.dx, j.illum);
    }

  Dataset ds;
  ds.channels = 3;
  ds.height = h;
  ds.width = w;
  ds.identities = spec.identities;
  ds.train_domains = spec.train_domains;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t d = 0; d < spec.total_domains(); ++d) {
    const auto& st = spec.styles[d];
    for (std::size_t i = 0; i < spec.identities; ++i)
      for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
        const auto& base = bases[i * spec.images_per_identity + k];
        Sample s;
        s.identity = i;
        s.domain = d;
        s.index = k;
        s.image.resize(base.size());
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t p = 0; p < h * w; ++p) {
            double v = st.gain[c] * std::pow(base[c * h * w + p], st.contrast) + st.offset;
            if (st.noise > 0) v += st.noise * gauss(rng);
            s.image[c * h * w + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        ds.samples.push_back(std::move(s));
      }
  }
  return ds;
}

// ---------------------------------------------------------------- persistence

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "index.txt");
  if (!idx) throw IoError("cannot write " + (dir / "index.txt").string());
  idx << "# cfd-dataset 1 " << ds.channels << ' ' << ds.height << ' ' << ds.width << ' ' << ds.identities << ' '
      << ds.train_domains << '\n';
  for (std::size_t n = 0; n < ds.samples.size(); ++n) {
    const auto& s = ds.samples[n];
    const std::string name = "img_" + std::to_string(n) + ".bin";
    std::string bytes;
    bytes.reserve(s.image.size() * 4);
    for (float v : s.image) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    idx << name << ' ' << s.identity << ' ' << s.domain << '\n';
  }
}

/// Records may appear in any order; image indices are recovered from the
/// order of appearance within each (identity, domain).
inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream idx(dir / "index.txt");
  if (!idx) throw IoError("cannot read " + (dir / "index.txt").string());
  Dataset ds;
  std::string line;
  if (!std::getline(idx, line)) throw DataError("empty dataset index");
  {
    std::istringstream hs(line);
    std::string hash, tag;
    int version = 0;
    hs >> hash >> tag >> version >> ds.channels >> ds.height >> ds.width >> ds.identities >> ds.train_domains;
    if (!hs || tag != "cfd-dataset" || version != 1) throw DataError("unrecognized dataset index header");
  }
  std::vector<std::size_t> counts((ds.train_domains + 1) * ds.identities, 0);
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string file;
    Sample s;
    ls >> file >> s.identity >> s.domain;
    if (!ls || s.identity >= ds.identities || s.domain > ds.train_domains) throw DataError("bad index record: " + line);
    std::ifstream f(dir / file, std::ios::binary);
    if (!f) throw IoError("missing image file " + file);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() != ds.image_size() * 4) throw DataError("image file " + file + " has wrong size");
    s.image.resize(ds.image_size());
    for (std::size_t p = 0; p < s.image.size(); ++p) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[p * 4 + b])) << (8 * b);
      std::memcpy(&s.image[p], &u, 4);
    }
    s.index = counts[s.domain * ds.identities + s.identity]++;
    ds.samples.push_back(std::move(s));
  }
  std::stable_sort(ds.samples.begin(), ds.samples.end(), [](const Sample& a, const Sample& b) {
    return std::tie(a.domain, a.identity, a.index) < std::tie(b.domain, b.identity, b.index);
  });
  return ds;
}

// ---------------------------------------------------------------- sampling

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<std::size_t> identities;
  std::vector<std::size_t> domains;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("empty batch");
  const std::size_t sz = ds.image_size();
  std::vector<T> data(indices.size() * sz);
  Batch<T> b;
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& s = ds.samples.at(indices[r]);
    std::copy(s.image.begin(), s.image.end(), data.begin() + r * sz);
    b.identities.push_back(s.identity);
    b.domains.push_back(s.domain);
  }
  b.images = Tensor<T>({indices.size(), ds.channels, ds.height, ds.width}, std::move(data));
  return b;
}

/// P identities x K images from every training domain, concatenated in
/// domain order.
class PKSampler {
 public:
  PKSampler(const Dataset& ds, std::size_t p, std::size_t k, std::uint64_t seed)
      : table_(ds.lookup()), train_domains_(ds.train_domains), p_(p), k_(k), rng_(seed) {
    if (p == 0 || k == 0) throw DataError("P and K must be positive");
    for (std::size_t d = 0; d < train_domains_; ++d) {
      std::size_t eligible = 0;
      for (const auto& imgs : table_[d]) eligible += imgs.size() >= k ? 1 : 0;
      if (eligible < p)
        throw DataError("domain " + std::to_string(d) + " has only " + std::to_string(eligible) + " identities with " +
                        std::to_string(k) + " images; need " + std::to_string(p));
    }
  }

  std::size_t batch_size() const { return p_ * k_ * train_domains_; }

  /// Batches per epoch: enough to visit each domain's images about once.
  std::size_t iterations_per_epoch() const {
    std::size_t smallest = SIZE_MAX;
    for (std::size_t d = 0; d < train_domains_; ++d) {
      std::size_t n = 0;
      for (const auto& imgs : table_[d]) n += imgs.size();
      smallest = std::min(smallest, n);
    }
    return std::max<std::size_t>(1, smallest / (p_ * k_));
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_size());
    for (std::size_t d = 0; d < train_domains_; ++d) {
      std::vector<std::size_t> ids;
      for (std::size_t i = 0; i < table_[d].size(); ++i)
        if (table_[d][i].size() >= k_) ids.push_back(i);
      partial_shuffle(ids, p_);
      for (std::size_t a = 0; a < p_; ++a) {
        auto imgs = table_[d][ids[a]];
        partial_shuffle(imgs, k_);
        out.insert(out.end(), imgs.begin(), imgs.begin() + static_cast<long>(k_));
      }
    }
    return out;
  }

 private:
  // Fisher-Yates on the first m positions with explicit index draws, so the
  // sequence does not depend on std::shuffle's implementation.
  void partial_shuffle(std::vector<std::size_t>& v, std::size_t m) {
    for (std::size_t i = 0; i < m && i + 1 < v.size(); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng_() % (v.size() - i));
      std::swap(v[i], v[j]);
    }
  }

  std::vector<std::vector<std::vector<std::size_t>>> table_;
  std::size_t train_domains_, p_, k_;
  std::mt19937_64 rng_;
};

}  // namespace cfd
