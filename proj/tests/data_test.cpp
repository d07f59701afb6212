// Copyright 2026 The ctxasr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "ctxasr/data.h"
#include "ctxasr/nn.h"

namespace ctxasr {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ctxasr_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor<float> random_feats(std::int64_t t, std::int64_t d, std::uint64_t seed, float lo = -2, float hi = 2) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(static_cast<std::size_t>(t * d));
  for (auto& x : v) x = u(rng);
  return Tensor<float>({t, d}, v);
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

TEST(FeatureIoTest, RoundTripIsBitExact) {
  auto dir = scratch("io");
  auto f = random_feats(10, 4, 1);
  write_features(dir / "a.cxf", f);
  auto g = read_features(dir / "a.cxf");
  EXPECT_EQ(g.shape(), f.shape());
  EXPECT_EQ(std::memcmp(f.data().data(), g.data().data(), 40 * sizeof(float)), 0);
  EXPECT_EQ(fs::file_size(dir / "a.cxf"), 12u + 160u);

  write_features(dir / "empty.cxf", Tensor<float>::zeros({0, 4}));
  EXPECT_EQ(read_features(dir / "empty.cxf").rows(), 0);
}

TEST(FeatureIoTest, CorruptFilesReportOffsets) {
  auto dir = scratch("bad");
  write_features(dir / "a.cxf", random_feats(3, 2, 2));
  auto bytes = file_bytes(dir / "a.cxf");

  auto write = [&](const std::string& name, std::vector<char> b) {
    std::ofstream(dir / name, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
    return dir / name;
  };
  auto magic = bytes;
  magic[0] = 'X';
  try {
    read_features(write("m.cxf", magic));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  try {
    read_features(write("t.cxf", std::vector<char>(bytes.begin(), bytes.begin() + 7)));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 7u);
  }
  try {
    read_features(write("s.cxf", std::vector<char>(bytes.begin(), bytes.end() - 4)));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size() - 4);
  }
  EXPECT_THROW(read_features(dir / "missing.cxf"), FileNotFoundError);
}

TEST(ManifestTest, GroupsSortsAndValidates) {
  auto dir = scratch("manifest");
  write_features(dir / "x.cxf", random_feats(9, 2, 3));
  {
    std::ofstream m(dir / "m.tsv");
    m << "# header\n"
      << "b\t1\ts\tx.cxf\t9\t1 2\n"
      << "a\t0\ts\tx.cxf\t9\t3\n"
      << "b\t0\ts\tx.cxf\t9\t\n";
  }
  auto convs = load_manifest(dir / "m.tsv");
  ASSERT_EQ(convs.size(), 2u);
  EXPECT_EQ(convs[0].id, "a");
  EXPECT_EQ(convs[1].records[0].utterance_index, 0);
  EXPECT_TRUE(convs[1].records[0].transcript.empty());
  EXPECT_EQ(convs[1].records[1].transcript, (std::vector<int>{1, 2}));

  std::ofstream(dir / "empty.tsv").flush();
  EXPECT_TRUE(load_manifest(dir / "empty.tsv").empty());

  auto expect_line = [&](const std::string& body, int line) {
    std::ofstream(dir / "bad.tsv") << body;
    try {
      load_manifest(dir / "bad.tsv");
      FAIL() << body;
    } catch (const ValidationError& e) {
      EXPECT_EQ(e.line(), line) << e.what();
    }
  };
  expect_line("a\t0\ts\tx.cxf\t9\t1\na\t0\ts\tx.cxf\t9\t1\n", 2);
  expect_line("a\t0\ts\tx.cxf\t9\t1\n# c\na\t1\ts\tnope.cxf\t9\t1\n", 3);
  expect_line("a\t0\ts\tx.cxf\t8\t1\n", 1);
  expect_line("a\tzero\ts\tx.cxf\t9\t1\n", 1);
  expect_line("a\t0\ts\n", 1);
}

GeneratorSpec small_spec() {
  GeneratorSpec s;
  s.n_conversations = 6;
  s.utterances_per_conversation = 3;
  s.noise_std = 0.0;
  return s;
}

TEST(GeneratorTest, InventoryPartitionsRealTokens) {
  auto inv = token_inventory(small_spec());
  std::vector<int> all = inv.regular;
  for (auto [a, b] : inv.ambiguous_pairs) all.insert(all.end(), {a, b});
  all.insert(all.end(), inv.disambiguators.begin(), inv.disambiguators.end());
  std::sort(all.begin(), all.end());
  std::vector<int> expected(14);
  std::iota(expected.begin(), expected.end(), 1);
  EXPECT_EQ(all, expected);
  EXPECT_EQ(inv.ambiguous_pairs.size(), 2u);
  EXPECT_EQ(inv.disambiguators.size(), 2u);

  auto bad = small_spec();
  bad.ambiguous_fraction = 1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = small_spec();
  bad.vocab_size = 4;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(GeneratorTest, NoiselessFramesMatchTemplates) {
  auto spec = small_spec();
  auto inv = token_inventory(spec);
  auto convs = generate_conversations(spec, 11);
  // Find a block for every (template row, speaker) pairing and check that
  // equal template rows give identical frames regardless of token identity.
  std::map<int, std::vector<float>> by_row;
  for (const auto& conv : convs) {
    const int spk = conv.records[0].speaker_id == "spk0" ? 0 : 1;
    for (std::size_t u = 0; u < conv.records.size(); ++u) {
      const auto& r = conv.records[u];
      const auto& f = conv.features[u];
      EXPECT_EQ(f.rows(), r.num_frames);
      EXPECT_EQ(r.num_frames, 2 * spec.silence_frames + spec.frames_per_token * static_cast<int>(r.transcript.size()));
      for (std::size_t i = 0; i < r.transcript.size(); ++i) {
        const int row = inv.template_of(r.transcript[i], spk);
        const auto first = (spec.silence_frames + static_cast<std::int64_t>(i) * spec.frames_per_token) * spec.feature_dim;
        std::vector<float> block(f.data().begin() + first, f.data().begin() + first + spec.feature_dim);
        for (int k = 1; k < spec.frames_per_token; ++k)
          EXPECT_TRUE(std::equal(block.begin(), block.end(), f.data().begin() + first + k * spec.feature_dim));
        auto [it, inserted] = by_row.emplace(row, block);
        if (!inserted) EXPECT_EQ(it->second, block);
      }
      for (int d = 0; d < spec.feature_dim; ++d) EXPECT_EQ(f.at(0, d), 0.0f);
    }
  }
  auto [a, b] = inv.ambiguous_pairs[0];
  EXPECT_EQ(inv.template_of(a, 0), inv.template_of(b, 1));
  EXPECT_EQ(inv.template_of(b, 0), inv.template_of(a, 1));
  EXPECT_NE(inv.template_of(a, 0), inv.template_of(b, 0));
}

TEST(GeneratorTest, DisambiguatorOnlyInFirstUtteranceOfItsSpeaker) {
  auto spec = small_spec();
  spec.n_conversations = 30;
  auto inv = token_inventory(spec);
  for (const auto& conv : generate_conversations(spec, 5)) {
    const int spk = conv.records[0].speaker_id == "spk0" ? 0 : 1;
    for (std::size_t u = 0; u < conv.records.size(); ++u) {
      const auto& t = conv.records[u].transcript;
      const auto count_own = std::count(t.begin(), t.end(), inv.disambiguators[static_cast<std::size_t>(spk)]);
      const auto count_other = std::count(t.begin(), t.end(), inv.disambiguators[static_cast<std::size_t>(1 - spk)]);
      EXPECT_EQ(count_other, 0);
      EXPECT_EQ(count_own, u == 0 ? 1 : 0);
    }
  }
}

TEST(GeneratorTest, SpeakerBlindClassifierErrsOnHalfOfAmbiguousTokens) {
  // The Bayes-optimal speaker-blind guess for an ambiguous template picks one
  // member of the pair; with both speakers and both members equally likely it
  // is wrong half the time. Check the empirical counts support that bound.
  auto spec = small_spec();
  spec.n_conversations = 400;
  auto inv = token_inventory(spec);
  std::map<std::pair<int, int>, int> counts;  // (template row, token) -> count
  int ambiguous = 0, total = 0;
  for (const auto& conv : generate_conversations(spec, 9)) {
    const int spk = conv.records[0].speaker_id == "spk0" ? 0 : 1;
    for (const auto& r : conv.records)
      for (int tok : r.transcript) {
        ++counts[{inv.template_of(tok, spk), tok}];
        ++total;
        if (inv.is_ambiguous(tok)) ++ambiguous;
      }
  }
  std::map<int, std::pair<int, int>> best;  // row -> (max count, sum)
  for (auto [key, n] : counts) {
    auto& b = best[key.first];
    b.first = std::max(b.first, n);
    b.second += n;
  }
  int blind_errors = 0;
  for (auto [row, b] : best) blind_errors += b.second - b.first;
  const double freq = static_cast<double>(ambiguous) / total;
  EXPECT_NEAR(freq, 4.0 / 12.0, 0.03);
  EXPECT_NEAR(static_cast<double>(blind_errors) / total, freq / 2, 0.03);
}

TEST(GeneratorTest, FixedSeedIsByteIdentical) {
  auto spec = small_spec();
  spec.noise_std = 0.2;
  auto a = generate_conversations(spec, 3), b = generate_conversations(spec, 3);
  auto da = scratch("gen_a"), db = scratch("gen_b");
  write_dataset(da, a);
  write_dataset(db, b);
  EXPECT_EQ(file_bytes(da / "manifest.tsv"), file_bytes(db / "manifest.tsv"));
  for (const auto& r : a[2].records) EXPECT_EQ(file_bytes(da / r.feature_path), file_bytes(db / r.feature_path));
  auto loaded = load_dataset(da / "manifest.tsv");
  ASSERT_EQ(loaded.size(), a.size());
  EXPECT_EQ(loaded[1].records[2].transcript, a[1].records[2].transcript);
  EXPECT_TRUE(std::equal(loaded[1].features[2].data().begin(), loaded[1].features[2].data().end(),
                         a[1].features[2].data().begin()));
}

Conversation conversation_with_frames(const std::vector<std::int64_t>& frames, const std::vector<std::string>& speakers) {
  Conversation c;
  c.id = "c";
  for (std::size_t i = 0; i < frames.size(); ++i) {
    UtteranceRecord r;
    r.conversation_id = "c";
    r.utterance_index = static_cast<int>(i);
    r.speaker_id = speakers[i];
    r.num_frames = frames[i];
    r.transcript = {static_cast<int>(i) + 1};
    c.records.push_back(r);
    c.features.push_back(Tensor<float>::full({frames[i], 2}, static_cast<float>(i)));
  }
  return c;
}

TEST(SegmentTest, GreedyWholeUtteranceSuffix) {
  auto c = conversation_with_frames({800, 700, 600}, {"A", "A", "A"});
  auto s = assemble_segment(c, 2, 2000, false);
  EXPECT_EQ(s.utterance_indices, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.context_transcripts, (std::vector<std::vector<int>>{{2}}));
  EXPECT_EQ(s.total_frames(), 1300);
  EXPECT_FALSE(s.over_budget);
  EXPECT_EQ(assemble_segment(c, 2, 2100, false).utterance_indices, (std::vector<int>{0, 1, 2}));
  auto alone = assemble_segment(c, 0, 100, false);
  EXPECT_TRUE(alone.over_budget);
  EXPECT_EQ(alone.total_frames(), 800);
  auto layout = s.layout();
  EXPECT_EQ(layout.utt_frame_lens, (std::vector<std::int64_t>{subsampled_length(700), subsampled_length(600)}));
  EXPECT_EQ(layout.utt_token_lens, (std::vector<std::int64_t>{2, 2}));
  EXPECT_EQ(s.features().at(699, 0), 1.0f);
  EXPECT_EQ(s.features().at(700, 0), 2.0f);
}

TEST(SegmentTest, SpeakerDependentSkipsOtherSpeakers) {
  auto c = conversation_with_frames({100, 100, 100}, {"A", "B", "A"});
  auto s = assemble_segment(c, 2, 200, true);
  EXPECT_EQ(s.utterance_indices, (std::vector<int>{0, 2}));
  EXPECT_TRUE(s.speaker_filtered);
  EXPECT_EQ(assemble_segment(c, 2, 200, false).utterance_indices, (std::vector<int>{1, 2}));
  // Deterministic and idempotent.
  EXPECT_EQ(assemble_segment(c, 2, 200, true).utterance_indices, s.utterance_indices);
}

TEST(SegmentTest, RandomizedSuffixProperty) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 1 + static_cast<int>(rng() % 6);
    std::vector<std::int64_t> frames;
    std::vector<std::string> spk;
    for (int i = 0; i < n; ++i) {
      frames.push_back(10 + static_cast<std::int64_t>(rng() % 40));
      spk.push_back(rng() % 2 ? "A" : "B");
    }
    auto c = conversation_with_frames(frames, spk);
    const int cur = static_cast<int>(rng() % static_cast<unsigned>(n));
    const bool dep = rng() % 2;
    const std::int64_t budget = static_cast<std::int64_t>(rng() % 150);
    auto s = assemble_segment(c, cur, budget, dep);
    // Brute force: eligible utterances before cur, newest first, longest prefix within budget.
    std::vector<int> eligible;
    for (int j = cur - 1; j >= 0; --j)
      if (!dep || spk[static_cast<std::size_t>(j)] == spk[static_cast<std::size_t>(cur)]) eligible.push_back(j);
    std::int64_t total = frames[static_cast<std::size_t>(cur)];
    std::vector<int> expect;
    for (int j : eligible) {
      if (total + frames[static_cast<std::size_t>(j)] > budget) break;
      total += frames[static_cast<std::size_t>(j)];
      expect.insert(expect.begin(), j);
    }
    expect.push_back(cur);
    EXPECT_EQ(s.utterance_indices, expect);
    EXPECT_EQ(s.over_budget, frames[static_cast<std::size_t>(cur)] > budget);
  }
}

TEST(SpecAugmentTest, ZeroMasksAndCounts) {
  auto f = random_feats(30, 8, 7, 0.5f, 1.5f);
  auto id = spec_augment(f, {0, 5, 0, 2}, 1);
  EXPECT_TRUE(std::equal(f.data().begin(), f.data().end(), id.features.data().begin()));

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto r = spec_augment(f, {1, 6, 1, 3}, seed);
    ASSERT_EQ(r.time_masks.size(), 1u);
    const auto tw = r.time_masks[0].width, fw = r.freq_masks[0].width;
    const auto zeros = std::count(r.features.data().begin(), r.features.data().end(), 0.0f);
    EXPECT_EQ(zeros, tw * 8 + fw * 30 - tw * fw);
    EXPECT_EQ(spec_augment(f, {1, 6, 1, 3}, seed).features.data()[0], r.features.data()[0]);
  }
  bool saw_full = false;
  for (std::uint64_t seed = 0; seed < 200 && !saw_full; ++seed) {
    auto r = spec_augment(f, {1, 30, 0, 0}, seed);
    if (r.time_masks[0].width != 30) continue;
    saw_full = true;
    EXPECT_EQ(std::count(r.features.data().begin(), r.features.data().end(), 0.0f), 240);
  }
  EXPECT_TRUE(saw_full);
  EXPECT_THROW(spec_augment(f, {1, 31, 0, 0}, 0), ContractError);
}

}  // namespace
}  // namespace ctxasr
