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

#include "ctxasr/data.h"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "ctxasr/nn.h"

namespace ctxasr {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 4> kFeatureMagic = {'C', 'X', 'F', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

struct FeatureHeader {
  std::uint32_t frames = 0;
  std::uint32_t dim = 0;
};

FeatureHeader parse_header(const std::vector<unsigned char>& bytes, const fs::path& path) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kFeatureMagic.data(), 4) != 0)
    throw FormatError(path.string() + ": bad feature magic", 0);
  if (bytes.size() < 12) throw FormatError(path.string() + ": truncated feature header", bytes.size());
  return {get_u32(bytes.data() + 4), get_u32(bytes.data() + 8)};
}

FeatureHeader read_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open " + path.string());
  std::vector<unsigned char> head(12);
  in.read(reinterpret_cast<char*>(head.data()), 12);
  head.resize(static_cast<std::size_t>(in.gcount()));
  return parse_header(head, path);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

long long parse_int(const std::string& s, const std::string& what, int line) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("bad " + what + " '" + s + "'", line);
  }
}

std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

}  // namespace

void write_features(const fs::path& path, const Tensor<float>& features) {
  if (features.ndim() != 2) throw DimensionError("features must be 2-D, got " + shape_string(features.shape()));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileNotFoundError("cannot write " + path.string());
  out.write(kFeatureMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(features.rows()));
  put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (float v : features.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw Error("write failed: " + path.string());
}

Tensor<float> read_features(const fs::path& path) {
  auto bytes = slurp(path);
  auto header = parse_header(bytes, path);
  const std::uint64_t expected = 12 + 4ull * header.frames * header.dim;
  if (bytes.size() != expected) {
    throw FormatError(path.string() + ": body has " + std::to_string(bytes.size() - 12) + " bytes, header implies " +
                          std::to_string(expected - 12),
                      std::min<std::uint64_t>(bytes.size(), expected));
  }
  std::vector<float> data(static_cast<std::size_t>(header.frames) * header.dim);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(get_u32(bytes.data() + 12 + 4 * i));
  return Tensor<float>({header.frames, header.dim}, std::move(data));
}

std::vector<Conversation> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::map<std::string, std::vector<std::pair<UtteranceRecord, int>>> grouped;
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty() || text[0] == '#') continue;
    auto fields = split(text, '\t');
    if (fields.size() == 5) fields.emplace_back();
    if (fields.size() != 6) throw ValidationError("expected 6 tab-separated fields, got " + std::to_string(fields.size()), line);
    UtteranceRecord r;
    r.conversation_id = fields[0];
    if (r.conversation_id.empty()) throw ValidationError("empty conversation id", line);
    r.utterance_index = static_cast<int>(parse_int(fields[1], "utterance index", line));
    r.speaker_id = fields[2];
    fs::path feat = fields[3];
    if (feat.is_relative()) feat = base / feat;
    r.feature_path = feat.lexically_normal().string();
    r.num_frames = parse_int(fields[4], "frame count", line);
    std::istringstream tokens(fields[5]);
    std::string tok;
    while (tokens >> tok) r.transcript.push_back(static_cast<int>(parse_int(tok, "token id", line)));
    if (!fs::exists(r.feature_path)) throw ValidationError("missing feature file " + r.feature_path, line);
    FeatureHeader header;
    try {
      header = read_header(r.feature_path);
    } catch (const Error& e) {
      throw ValidationError(e.what(), line);
    }
    if (header.frames != r.num_frames)
      throw ValidationError("num_frames " + std::to_string(r.num_frames) + " but feature file has " +
                                std::to_string(header.frames),
                            line);
    grouped[r.conversation_id].emplace_back(std::move(r), line);
  }
  std::vector<Conversation> out;
  for (auto& [id, recs] : grouped) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const auto& a, const auto& b) { return a.first.utterance_index < b.first.utterance_index; });
    Conversation conv;
    conv.id = id;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (recs[i].first.utterance_index != static_cast<int>(i)) {
        const bool dup = i > 0 && recs[i].first.utterance_index == recs[i - 1].first.utterance_index;
        throw ValidationError((dup ? "duplicate utterance index " : "non-contiguous utterance index ") +
                                  std::to_string(recs[i].first.utterance_index) + " in conversation " + id,
                              recs[i].second);
      }
      conv.records.push_back(std::move(recs[i].first));
    }
    out.push_back(std::move(conv));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<Conversation>& conversations) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileNotFoundError("cannot write " + path.string());
  out << "# conversation\tutterance\tspeaker\tfeatures\tframes\ttokens\n";
  for (const auto& conv : conversations) {
    for (const auto& r : conv.records) {
      out << r.conversation_id << '\t' << r.utterance_index << '\t' << r.speaker_id << '\t' << r.feature_path << '\t'
          << r.num_frames << '\t';
      for (std::size_t i = 0; i < r.transcript.size(); ++i) out << (i ? " " : "") << r.transcript[i];
      out << '\n';
    }
  }
}

void load_features(Conversation& conversation) {
  conversation.features.clear();
  for (const auto& r : conversation.records) {
    auto f = read_features(r.feature_path);
    if (f.rows() != r.num_frames) throw FormatError(r.feature_path + ": frame count changed since manifest load", 4);
    conversation.features.push_back(std::move(f));
  }
}

std::vector<Conversation> load_dataset(const fs::path& manifest) {
  auto convs = load_manifest(manifest);
  for (auto& c : convs) load_features(c);
  return convs;
}

void GeneratorSpec::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("generator: " + m); };
  if (n_conversations < 0) fail("n_conversations must be >= 0");
  if (utterances_per_conversation < 1) fail("utterances_per_conversation must be >= 1");
  if (n_speakers < 1) fail("n_speakers must be >= 1");
  if (vocab_size < 3) fail("vocab_size must be >= 3");
  if (ambiguous_fraction < 0 || ambiguous_fraction > 1) fail("ambiguous_fraction must be in [0, 1]");
  if (min_tokens < 1 || max_tokens < min_tokens) fail("need 1 <= min_tokens <= max_tokens");
  if (frames_per_token < 1 || silence_frames < 0 || feature_dim < 1) fail("bad frame geometry");
  if (noise_std < 0) fail("noise_std must be >= 0");
  if (silence_frames * 2 + min_tokens * frames_per_token < kMinSubsampleInput)
    fail("shortest utterance has fewer than " + std::to_string(kMinSubsampleInput) + " frames");
  const int real = vocab_size - 2;
  const int pairs = static_cast<int>(std::lround(ambiguous_fraction * real / 2.0));
  const int disamb = n_speakers > 1 ? n_speakers : 0;
  if (2 * pairs + disamb > real)
    fail("ambiguous set (" + std::to_string(2 * pairs) + ") plus " + std::to_string(disamb) +
         " disambiguators exceeds the " + std::to_string(real) + " real tokens");
  if (2 * pairs + disamb == real && pairs == 0) fail("no speakable tokens");
}

bool TokenInventory::is_ambiguous(int token) const {
  return std::any_of(ambiguous_pairs.begin(), ambiguous_pairs.end(),
                     [&](const auto& p) { return p.first == token || p.second == token; });
}

int TokenInventory::template_of(int token, int speaker) const {
  // Rows: 0 silence, then one row per real token in id order.
  for (const auto& [a, b] : ambiguous_pairs) {
    if (speaker % 2 == 1) {
      if (token == a) return b;
      if (token == b) return a;
    }
  }
  return token;
}

void to_json(nlohmann::json& j, const GeneratorSpec& g) {
  j = {{"n_conversations", g.n_conversations},
       {"utterances_per_conversation", g.utterances_per_conversation},
       {"n_speakers", g.n_speakers},
       {"vocab_size", g.vocab_size},
       {"ambiguous_fraction", g.ambiguous_fraction},
       {"min_tokens", g.min_tokens},
       {"max_tokens", g.max_tokens},
       {"frames_per_token", g.frames_per_token},
       {"silence_frames", g.silence_frames},
       {"feature_dim", g.feature_dim},
       {"noise_std", g.noise_std}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& g) {
  reject_unknown_keys(j,
                      {"n_conversations", "utterances_per_conversation", "n_speakers", "vocab_size",
                       "ambiguous_fraction", "min_tokens", "max_tokens", "frames_per_token", "silence_frames",
                       "feature_dim", "noise_std"},
                      "generator");
  g.n_conversations = j.value("n_conversations", g.n_conversations);
  g.utterances_per_conversation = j.value("utterances_per_conversation", g.utterances_per_conversation);
  g.n_speakers = j.value("n_speakers", g.n_speakers);
  g.vocab_size = j.value("vocab_size", g.vocab_size);
  g.ambiguous_fraction = j.value("ambiguous_fraction", g.ambiguous_fraction);
  g.min_tokens = j.value("min_tokens", g.min_tokens);
  g.max_tokens = j.value("max_tokens", g.max_tokens);
  g.frames_per_token = j.value("frames_per_token", g.frames_per_token);
  g.silence_frames = j.value("silence_frames", g.silence_frames);
  g.feature_dim = j.value("feature_dim", g.feature_dim);
  g.noise_std = j.value("noise_std", g.noise_std);
}

TokenInventory token_inventory(const GeneratorSpec& spec) {
  spec.validate();
  TokenInventory inv;
  const int real = spec.vocab_size - 2;
  const int pairs = static_cast<int>(std::lround(spec.ambiguous_fraction * real / 2.0));
  int next = 1;
  for (int p = 0; p < pairs; ++p, next += 2) inv.ambiguous_pairs.emplace_back(next, next + 1);
  const int disamb = spec.n_speakers > 1 ? spec.n_speakers : 0;
  for (; next <= real - disamb; ++next) inv.regular.push_back(next);
  for (; next <= real; ++next) inv.disambiguators.push_back(next);
  return inv;
}

std::vector<Conversation> generate_conversations(const GeneratorSpec& spec, std::uint64_t seed,
                                                 const std::string& id_prefix) {
  auto inv = token_inventory(spec);
  std::vector<int> speakable = inv.regular;
  for (const auto& [a, b] : inv.ambiguous_pairs) {
    speakable.push_back(a);
    speakable.push_back(b);
  }
  std::sort(speakable.begin(), speakable.end());

  // Templates depend only on the vocabulary geometry, so train and test
  // sets drawn with different seeds share the same acoustics.
  std::mt19937_64 template_rng(0x5eed0000ull + static_cast<std::uint64_t>(spec.vocab_size) * 131 +
                               static_cast<std::uint64_t>(spec.feature_dim));
  std::normal_distribution<double> unit(0.0, 1.0);
  const int rows = spec.vocab_size - 1;
  std::vector<float> templates(static_cast<std::size_t>(rows * spec.feature_dim), 0.0f);
  for (int r = 1; r < rows; ++r)
    for (int d = 0; d < spec.feature_dim; ++d)
      templates[static_cast<std::size_t>(r * spec.feature_dim + d)] = static_cast<float>(unit(template_rng));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Conversation> out;
  for (int c = 0; c < spec.n_conversations; ++c) {
    Conversation conv;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d", c);
    conv.id = id_prefix + buf;
    const int speaker = static_cast<int>(uniform_int(rng, 0, spec.n_speakers - 1));
    for (int u = 0; u < spec.utterances_per_conversation; ++u) {
      UtteranceRecord r;
      r.conversation_id = conv.id;
      r.utterance_index = u;
      r.speaker_id = "spk" + std::to_string(speaker);
      const auto n = uniform_int(rng, spec.min_tokens, spec.max_tokens);
      for (std::int64_t i = 0; i < n; ++i)
        r.transcript.push_back(speakable[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(speakable.size()) - 1))]);
      if (u == 0 && !inv.disambiguators.empty())
        r.transcript[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))] = inv.disambiguators[static_cast<std::size_t>(speaker)];

      std::vector<int> frame_rows(static_cast<std::size_t>(spec.silence_frames), 0);
      for (int tok : r.transcript) frame_rows.insert(frame_rows.end(), static_cast<std::size_t>(spec.frames_per_token), inv.template_of(tok, speaker));
      frame_rows.insert(frame_rows.end(), static_cast<std::size_t>(spec.silence_frames), 0);
      r.num_frames = static_cast<std::int64_t>(frame_rows.size());
      std::vector<float> feats(frame_rows.size() * static_cast<std::size_t>(spec.feature_dim));
      for (std::size_t t = 0; t < frame_rows.size(); ++t) {
        for (int d = 0; d < spec.feature_dim; ++d) {
          float v = templates[static_cast<std::size_t>(frame_rows[t] * spec.feature_dim + d)];
          if (spec.noise_std > 0) v += static_cast<float>(spec.noise_std * noise(rng));
          feats[t * static_cast<std::size_t>(spec.feature_dim) + static_cast<std::size_t>(d)] = v;
        }
      }
      conv.features.emplace_back(Shape{r.num_frames, spec.feature_dim}, std::move(feats));
      conv.records.push_back(std::move(r));
    }
    out.push_back(std::move(conv));
  }
  return out;
}

void write_dataset(const fs::path& dir, std::vector<Conversation>& conversations) {
  fs::create_directories(dir / "feats");
  for (auto& conv : conversations) {
    if (conv.features.size() != conv.records.size()) throw ContractError("conversation " + conv.id + " has no features loaded");
    for (std::size_t i = 0; i < conv.records.size(); ++i) {
      auto& r = conv.records[i];
      const std::string rel = "feats/" + conv.id + "_" + std::to_string(r.utterance_index) + ".cxf";
      write_features(dir / rel, conv.features[i]);
      r.feature_path = rel;
    }
  }
  write_manifest(dir / "manifest.tsv", conversations);
}

std::int64_t Segment::total_frames() const {
  std::int64_t t = 0;
  for (const auto& f : utterance_features) t += f.rows();
  return t;
}

Tensor<float> Segment::features() const {
  NoGradGuard guard;
  return concat_rows(utterance_features);
}

SegmentLayout Segment::layout() const {
  SegmentLayout l;
  for (const auto& f : utterance_features) l.utt_frame_lens.push_back(subsampled_length(f.rows()));
  for (const auto& t : context_transcripts) l.utt_token_lens.push_back(static_cast<std::int64_t>(t.size()) + 1);
  l.utt_token_lens.push_back(static_cast<std::int64_t>(current_transcript.size()) + 1);
  return l;
}

Segment assemble_segment(const Conversation& conversation, int current, std::int64_t budget_frames,
                         bool speaker_dependent) {
  const auto n = static_cast<int>(conversation.records.size());
  if (current < 0 || current >= n)
    throw ContractError("utterance " + std::to_string(current) + " outside conversation " + conversation.id);
  if (conversation.features.size() != conversation.records.size())
    throw ContractError("features of conversation " + conversation.id + " not loaded");
  const auto& cur = conversation.records[static_cast<std::size_t>(current)];
  Segment seg;
  seg.speaker_filtered = speaker_dependent;
  std::int64_t total = conversation.features[static_cast<std::size_t>(current)].rows();
  seg.over_budget = total > budget_frames;
  std::vector<int> picked;
  for (int j = current - 1; j >= 0; --j) {
    const auto& r = conversation.records[static_cast<std::size_t>(j)];
    if (speaker_dependent && r.speaker_id != cur.speaker_id) continue;
    const auto frames = conversation.features[static_cast<std::size_t>(j)].rows();
    if (total + frames > budget_frames) break;
    total += frames;
    picked.push_back(j);
  }
  std::reverse(picked.begin(), picked.end());
  for (int j : picked) {
    seg.utterance_features.push_back(conversation.features[static_cast<std::size_t>(j)]);
    seg.utterance_indices.push_back(j);
    seg.context_transcripts.push_back(conversation.records[static_cast<std::size_t>(j)].transcript);
  }
  seg.utterance_features.push_back(conversation.features[static_cast<std::size_t>(current)]);
  seg.utterance_indices.push_back(current);
  seg.current_transcript = cur.transcript;
  return seg;
}

SpecAugmentResult spec_augment(const Tensor<float>& features, const SpecAugmentOptions& options, std::uint64_t seed) {
  const auto T = features.rows(), D = features.cols();
  if (options.max_time_width > T || options.max_freq_width > D || options.max_time_width < 0 ||
      options.max_freq_width < 0 || options.n_time_masks < 0 || options.n_freq_masks < 0)
    throw ContractError("spec_augment widths must lie in [0, dim]");
  std::mt19937_64 rng(seed);
  SpecAugmentResult res;
  std::vector<float> data(features.data().begin(), features.data().end());
  for (int m = 0; m < options.n_time_masks; ++m) {
    const auto w = uniform_int(rng, 0, options.max_time_width);
    const auto b = uniform_int(rng, 0, T - w);
    res.time_masks.push_back({b, w});
    for (auto t = b; t < b + w; ++t) std::fill_n(data.begin() + t * D, D, 0.0f);
  }
  for (int m = 0; m < options.n_freq_masks; ++m) {
    const auto w = uniform_int(rng, 0, options.max_freq_width);
    const auto b = uniform_int(rng, 0, D - w);
    res.freq_masks.push_back({b, w});
    for (std::int64_t t = 0; t < T; ++t) std::fill_n(data.begin() + t * D + b, w, 0.0f);
  }
  res.features = Tensor<float>(features.shape(), std::move(data));
  return res;
}

}  // namespace ctxasr
