// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "cfd/data.hpp"

namespace {

cfd::SyntheticSpec small_spec() {
  cfd::SyntheticSpec s;
  s.identities = 10;
  s.images_per_identity = 4;
  return s;
}

bool same_dataset(const cfd::Dataset& a, const cfd::Dataset& b) {
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto &x = a.samples[i], &y = b.samples[i];
    if (x.identity != y.identity || x.domain != y.domain || x.index != y.index || x.image != y.image) return false;
  }
  return true;
}

}  // namespace

TEST(Generate, SameSeedIsBitwiseIdentical) {
  EXPECT_TRUE(same_dataset(cfd::generate(small_spec()), cfd::generate(small_spec())));
  auto other = small_spec();
  other.seed = 8;
  EXPECT_FALSE(same_dataset(cfd::generate(small_spec()), cfd::generate(other)));
}

TEST(Generate, SampleCount) {
  auto spec = small_spec();
  spec.train_domains = 2;
  spec.styles.erase(spec.styles.begin() + 2);
  const auto ds = cfd::generate(spec);
  EXPECT_EQ(ds.samples.size(), 10u * 4u * 3u);
  for (const auto& s : ds.samples)
    for (float v : s.image) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Generate, InverseStyleRecoversSharedContent) {
  auto spec = small_spec();
  for (auto& st : spec.styles) st.noise = 0.0;
  const auto ds = cfd::generate(spec);
  const auto table = ds.lookup();
  std::size_t compared = 0, total = 0;
  double worst = 0.0;
  for (std::size_t d1 = 0; d1 < spec.total_domains(); ++d1)
    for (std::size_t d2 = d1 + 1; d2 < spec.total_domains(); ++d2)
      for (std::size_t id = 0; id < spec.identities; ++id)
        for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
          const auto& a = ds.samples[table[d1][id][k]].image;
          const auto& b = ds.samples[table[d2][id][k]].image;
          const std::size_t plane = ds.height * ds.width;
          total += a.size();
          for (std::size_t p = 0; p < a.size(); ++p) {
            // Clipped pixels carry no recoverable content.
            if (a[p] <= 0.0f || a[p] >= 1.0f || b[p] <= 0.0f || b[p] >= 1.0f) continue;
            const double ra = spec.styles[d1].invert(p / plane, a[p]);
            const double rb = spec.styles[d2].invert(p / plane, b[p]);
            worst = std::max(worst, std::abs(ra - rb));
            ++compared;
          }
        }
  EXPECT_GT(compared, total / 2);
  EXPECT_LT(worst, 1e-5);
}

TEST(Generate, UnseenStyleTooCloseIsRejected) {
  auto spec = small_spec();
  spec.styles.back() = spec.styles.front();
  EXPECT_THROW(cfd::generate(spec), cfd::DataError);
}

TEST(Persistence, WriteReadRoundTrip) {
  const auto ds = cfd::generate(small_spec());
  const auto dir = std::filesystem::temp_directory_path() / "cfd_data_roundtrip";
  std::filesystem::remove_all(dir);
  cfd::write_dataset(ds, dir);
  EXPECT_TRUE(same_dataset(ds, cfd::read_dataset(dir)));
  std::filesystem::remove_all(dir);
}

TEST(Sampler, BatchGeometry) {
  const auto ds = cfd::generate(small_spec());
  cfd::PKSampler s(ds, 2, 2, 1);
  for (int t = 0; t < 20; ++t) {
    const auto idx = s.next();
    ASSERT_EQ(idx.size(), 12u);
    for (std::size_t d = 0; d < 3; ++d) {
      std::map<std::size_t, int> per_id;
      for (std::size_t r = d * 4; r < d * 4 + 4; ++r) {
        EXPECT_EQ(ds.samples[idx[r]].domain, d);
        ++per_id[ds.samples[idx[r]].identity];
      }
      ASSERT_EQ(per_id.size(), 2u);
      for (const auto& [id, n] : per_id) EXPECT_EQ(n, 2);
    }
  }
}

TEST(Sampler, InsufficientImagesIsDataError) {
  const auto ds = cfd::generate(small_spec());
  EXPECT_THROW(cfd::PKSampler(ds, 2, 5, 1), cfd::DataError);
  EXPECT_THROW(cfd::PKSampler(ds, 11, 2, 1), cfd::DataError);
}

TEST(Sampler, IdentityFrequencyIsUniform) {
  const auto ds = cfd::generate(small_spec());
  cfd::PKSampler s(ds, 2, 2, 99);
  const int draws = 10000;
  std::map<std::pair<std::size_t, std::size_t>, int> hits;
  for (int t = 0; t < draws; ++t) {
    const auto idx = s.next();
    for (std::size_t r = 0; r < idx.size(); r += 2) ++hits[{ds.samples[idx[r]].domain, ds.samples[idx[r]].identity}];
  }
  const double p = 2.0 / 10.0, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  ASSERT_EQ(hits.size(), 30u);
  for (const auto& [key, n] : hits) EXPECT_LE(std::abs(n - mean), 3 * sigma) << "domain " << key.first << " id " << key.second;
}
