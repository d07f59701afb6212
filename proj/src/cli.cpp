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

#include "ctxasr/cli.h"

#include <filesystem>
#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "ctxasr/bench.h"
#include "ctxasr/checkpoint.h"
#include "ctxasr/streaming.h"
#include "ctxasr/training.h"

namespace ctxasr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> beam;
  std::optional<double> lambda, gamma;
  std::optional<std::int64_t> budget_frames;
  std::optional<std::string> recycle;
  std::optional<std::int64_t> enc_lookahead, src_lookahead;
  std::optional<std::string> prefix;
  std::optional<int> k;
  std::vector<std::string> inputs;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("config not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + " must hold a JSON object");
  return j;
}

template <typename V>
void set_if(json& j, const char* key, const std::optional<V>& v) {
  if (v) j[key] = *v;
}

void log_resolved(const std::string& sub, const json& resolved, std::ostream& err) {
  err << "[" << sub << "] resolved config: " << resolved.dump() << "\n";
  if (resolved.contains("out") && resolved["out"].is_string() && !resolved["out"].get<std::string>().empty()) {
    fs::path dir = resolved["out"].get<std::string>();
    if (sub == "average") dir = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
    fs::create_directories(dir);
    auto stored = resolved;
    stored.erase("out");  // the file sits in that directory
    std::ofstream(dir / (sub + ".config.json")) << stored.dump(2) << "\n";
  }
}

fs::path require_path(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty())
    throw ConfigError(std::string("missing required key '") + key + "'");
  fs::path p = j[key].get<std::string>();
  if (!fs::exists(p)) throw FileNotFoundError(std::string(key) + " not found: " + p.string());
  return p;
}

std::vector<Conversation> load_conversations(const fs::path& manifest) { return load_dataset(manifest); }

std::unique_ptr<NgramLm> maybe_lm(const json& cfg, int vocab) {
  const int order = cfg.value("lm_order", 0);
  if (order <= 0) return nullptr;
  auto lm = std::make_unique<NgramLm>(order, vocab);
  std::vector<std::vector<std::vector<int>>> corpus;
  for (const auto& c : load_manifest(require_path(cfg, "lm_manifest"))) {
    std::vector<std::vector<int>> conv;
    for (const auto& r : c.records) conv.push_back(r.transcript);
    corpus.push_back(std::move(conv));
  }
  lm->train(corpus);
  return lm;
}

int cmd_gen_data(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg, {"generator", "seed", "prefix", "out"}, "gen-data");
  set_if(cfg, "seed", o.seed);
  set_if(cfg, "out", o.out);
  set_if(cfg, "prefix", o.prefix);
  GeneratorSpec spec = cfg.value("generator", json::object()).get<GeneratorSpec>();
  spec.validate();
  const auto seed = cfg.value("seed", std::uint64_t{1});
  const auto prefix = cfg.value("prefix", std::string("conv"));
  if (!cfg.contains("out")) throw ConfigError("gen-data needs --out");
  json resolved = {{"generator", spec}, {"seed", seed}, {"prefix", prefix}, {"out", cfg["out"]}};
  log_resolved("gen-data", resolved, err);
  auto convs = generate_conversations(spec, seed, prefix);
  write_dataset(cfg["out"].get<std::string>(), convs);
  std::size_t utts = 0;
  for (const auto& c : convs) utts += c.records.size();
  out << "wrote " << convs.size() << " conversations, " << utts << " utterances to " << cfg["out"].get<std::string>()
      << "\n";
  return 0;
}

int cmd_train(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg, {"model", "train", "train_manifest", "val_manifest", "init", "pe_migration", "out"}, "train");
  set_if(cfg, "out", o.out);
  ModelConfig mc = cfg.value("model", json::object()).get<ModelConfig>();
  mc.validate();
  TrainConfig tc = cfg.value("train", json::object()).get<TrainConfig>();
  if (o.seed) tc.seed = *o.seed;
  if (o.budget_frames) tc.budget_frames = *o.budget_frames;
  if (o.enc_lookahead) tc.enc_lookahead = *o.enc_lookahead;
  if (o.src_lookahead) tc.src_lookahead = *o.src_lookahead;
  tc.validate();
  const auto train_path = require_path(cfg, "train_manifest");
  const auto val_path = require_path(cfg, "val_manifest");
  const std::string init = cfg.value("init", std::string());
  const bool migrate = cfg.value("pe_migration", false);
  if (!cfg.contains("out")) throw ConfigError("train needs --out");
  json resolved = {{"model", mc},
                   {"train", tc},
                   {"train_manifest", train_path.string()},
                   {"val_manifest", val_path.string()},
                   {"init", init},
                   {"pe_migration", migrate},
                   {"out", cfg["out"]}};
  log_resolved("train", resolved, err);
  auto train = load_conversations(train_path);
  auto val = load_conversations(val_path);
  Model<float> model = init.empty() ? Model<float>(mc, tc.seed)
                                    : load_for_fine_tune(init, mc, FineTuneOptions{migrate}, tc.seed);
  auto result = train_loop(model, tc, train, val, cfg["out"].get<std::string>(), [&](const Metrics& m) {
    out << json(m).dump() << "\n";
    out.flush();
  });
  out << "checkpoints: " << result.checkpoints.size() << " in " << cfg["out"].get<std::string>() << "\n";
  return 0;
}

Model<float> model_from(const json& cfg, std::uint64_t seed) {
  if (cfg.contains("model")) return load_checkpoint(require_path(cfg, "model"));
  if (cfg.contains("model_config")) {
    auto mc = cfg["model_config"].get<ModelConfig>();
    mc.validate();
    return Model<float>(mc, seed);
  }
  throw ConfigError("missing required key 'model'");
}

int cmd_decode(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg,
                      {"model", "manifest", "search", "budget_frames", "recycle", "source_span", "speaker_dependent",
                       "lm_order", "lm_manifest", "out"},
                      "decode");
  set_if(cfg, "out", o.out);
  ConversationDecodeOptions d;
  if (cfg.contains("search")) d.search = cfg["search"].get<DecodeOptions>();
  d.budget_frames = cfg.value("budget_frames", d.budget_frames);
  d.recycle = cfg.value("recycle", d.recycle);
  if (cfg.contains("source_span")) d.span = parse_source_span(cfg["source_span"].get<std::string>());
  d.speaker_dependent = cfg.value("speaker_dependent", d.speaker_dependent);
  if (o.beam) d.search.beam_size = *o.beam;
  if (o.lambda) d.search.lambda = *o.lambda;
  if (o.gamma) d.search.gamma = *o.gamma;
  if (o.budget_frames) d.budget_frames = *o.budget_frames;
  if (o.recycle) d.recycle = *o.recycle == "on";
  d.search.validate();
  const auto model_path = require_path(cfg, "model");
  const auto manifest = require_path(cfg, "manifest");
  json resolved = {{"model", model_path.string()},
                   {"manifest", manifest.string()},
                   {"search", d.search},
                   {"budget_frames", d.budget_frames},
                   {"recycle", d.recycle},
                   {"source_span", to_string(d.span)},
                   {"speaker_dependent", d.speaker_dependent},
                   {"lm_order", cfg.value("lm_order", 0)},
                   {"lm_manifest", cfg.value("lm_manifest", std::string())},
                   {"out", cfg.value("out", std::string())}};
  log_resolved("decode", resolved, err);
  const auto model = load_checkpoint(model_path);
  auto lm = maybe_lm(cfg, model.config.vocab_size);
  const auto convs = load_conversations(manifest);
  std::ofstream file;
  const std::string out_dir = cfg.value("out", std::string());
  if (!out_dir.empty()) file.open(fs::path(out_dir) / "decode.jsonl");
  std::ostream& sink = out_dir.empty() ? out : static_cast<std::ostream&>(file);
  std::int64_t errors = 0, ref_tokens = 0;
  for (const auto& c : convs) {
    for (const auto& r : decode_conversation(model, c, d, lm.get())) {
      sink << json(r).dump() << "\n";
      const auto& ref = c.records[static_cast<std::size_t>(r.utterance_index)].transcript;
      errors += edit_distance(ref, r.tokens);
      ref_tokens += static_cast<std::int64_t>(ref.size());
    }
  }
  if (ref_tokens > 0)
    err << "[decode] token error rate " << static_cast<double>(errors) / static_cast<double>(ref_tokens) << " ("
        << errors << " / " << ref_tokens << ")\n";
  return 0;
}

int cmd_stream(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg, {"model", "manifest", "stream", "budget_frames", "lm_order", "lm_manifest", "out"},
                      "stream");
  set_if(cfg, "out", o.out);
  StreamOptions s;
  if (cfg.contains("stream")) s = cfg["stream"].get<StreamOptions>();
  std::int64_t budget = cfg.value("budget_frames", std::int64_t{2500});
  if (o.beam) s.beam_size = *o.beam;
  if (o.lambda) s.lambda = *o.lambda;
  if (o.gamma) s.gamma = *o.gamma;
  if (o.enc_lookahead) s.enc_lookahead = *o.enc_lookahead;
  if (o.src_lookahead) s.src_lookahead = *o.src_lookahead;
  if (o.budget_frames) budget = *o.budget_frames;
  s.validate();
  const auto model_path = require_path(cfg, "model");
  const auto manifest = require_path(cfg, "manifest");
  json resolved = {{"model", model_path.string()}, {"manifest", manifest.string()}, {"stream", s},
                   {"budget_frames", budget},      {"lm_order", cfg.value("lm_order", 0)},
                   {"lm_manifest", cfg.value("lm_manifest", std::string())},
                   {"out", cfg.value("out", std::string())}};
  log_resolved("stream", resolved, err);
  const auto model = load_checkpoint(model_path);
  auto lm = maybe_lm(cfg, model.config.vocab_size);
  const auto delay = theoretical_delay(static_cast<int>(model.encoder.size()), s.enc_lookahead, s.src_lookahead,
                                       s.frame_ms);
  err << "[stream] theoretical delay " << delay.encoder_ms << " ms encoder + " << delay.decoder_ms << " ms decoder\n";
  std::ofstream file;
  const std::string out_dir = cfg.value("out", std::string());
  if (!out_dir.empty()) file.open(fs::path(out_dir) / "stream.jsonl");
  std::ostream& sink = out_dir.empty() ? out : static_cast<std::ostream&>(file);
  for (const auto& c : load_conversations(manifest)) {
    StreamSession<float> session(model, s, budget, lm.get());
    for (std::size_t u = 0; u < c.records.size(); ++u) {
      json j = session.decode(c.features[u], static_cast<int>(u));
      j["conversation_id"] = c.id;
      j["utterance_index"] = u;
      sink << j.dump() << "\n";
    }
  }
  return 0;
}

int cmd_bench(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg, {"model", "model_config", "seed", "manifest", "bench", "out"}, "bench");
  set_if(cfg, "out", o.out);
  set_if(cfg, "seed", o.seed);
  BenchOptions b;
  if (cfg.contains("bench")) b = cfg["bench"].get<BenchOptions>();
  if (o.beam) b.decode.search.beam_size = *o.beam;
  if (o.lambda) b.decode.search.lambda = *o.lambda;
  if (o.gamma) b.decode.search.gamma = *o.gamma;
  if (o.budget_frames) b.decode.budget_frames = *o.budget_frames;
  b.validate();
  const auto manifest = require_path(cfg, "manifest");
  const auto seed = cfg.value("seed", std::uint64_t{1});
  json resolved = {{"manifest", manifest.string()}, {"bench", b}, {"seed", seed}, {"out", cfg.value("out", std::string())}};
  if (cfg.contains("model")) resolved["model"] = cfg["model"];
  if (cfg.contains("model_config")) resolved["model_config"] = cfg["model_config"];
  log_resolved("bench", resolved, err);
  const auto model = model_from(cfg, seed);
  const auto report = bench_decode(model, load_conversations(manifest), b);
  const std::string out_dir = cfg.value("out", std::string());
  if (!out_dir.empty()) {
    std::ofstream rows(fs::path(out_dir) / "bench.jsonl");
    for (const auto& r : report.rows) rows << json(r).dump() << "\n";
    std::ofstream(fs::path(out_dir) / "bench_summary.json") << json(report).dump(2) << "\n";
  }
  out << report.summary_table();
  return 0;
}

int cmd_average(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg, {"inputs", "k", "out"}, "average");
  set_if(cfg, "out", o.out);
  set_if(cfg, "k", o.k);
  if (!o.inputs.empty()) cfg["inputs"] = o.inputs;
  if (!cfg.contains("out")) throw ConfigError("average needs --out");
  const auto inputs = cfg.value("inputs", std::vector<std::string>{});
  if (inputs.empty()) throw ConfigError("average needs input checkpoints");
  const int k = cfg.value("k", static_cast<int>(inputs.size()));
  json resolved = {{"inputs", inputs}, {"k", k}, {"out", cfg["out"]}};
  log_resolved("average", resolved, err);
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  for (const auto& p : paths)
    if (!fs::exists(p)) throw FileNotFoundError("checkpoint not found: " + p.string());
  const auto chosen = average_checkpoints(paths, k, cfg["out"].get<std::string>());
  out << "averaged " << chosen.size() << " checkpoints into " << cfg["out"].get<std::string>() << ":";
  for (const auto& p : chosen) out << " " << p.string();
  out << "\n";
  return 0;
}

int cmd_grad_check(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto cfg = load_config(o.config_path);
  reject_unknown_keys(cfg, {"model", "generator", "train", "utterance", "training", "eps", "tol", "seed"}, "grad-check");
  set_if(cfg, "seed", o.seed);
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.d_ffn = 12;
  mc.vocab_size = 8;
  mc.feature_dim = 8;
  mc.subsample_channels = 2;
  mc.conv_kernel = 3;
  mc.max_segment_frames = 64;
  mc.max_lookahead = 8;
  mc.max_context_tokens = 32;
  if (cfg.contains("model")) mc = cfg["model"].get<ModelConfig>();
  mc.validate();
  GeneratorSpec g;
  g.n_conversations = 1;
  g.utterances_per_conversation = 2;
  g.vocab_size = mc.vocab_size;
  g.feature_dim = mc.feature_dim;
  g.min_tokens = 2;
  g.max_tokens = 3;
  if (cfg.contains("generator")) g = cfg["generator"].get<GeneratorSpec>();
  TrainConfig tc = cfg.value("train", json::object()).get<TrainConfig>();
  const auto seed = cfg.value("seed", std::uint64_t{1});
  const int utt = cfg.value("utterance", g.utterances_per_conversation - 1);
  const bool training = cfg.value("training", false);
  const double eps = cfg.value("eps", 1e-4), tol = cfg.value("tol", 1e-3);
  json resolved = {{"model", mc}, {"generator", g}, {"train", tc}, {"utterance", utt},
                   {"training", training}, {"eps", eps}, {"tol", tol}, {"seed", seed}};
  log_resolved("grad-check", resolved, err);
  const auto convs = generate_conversations(g, seed);
  const Model<float> model(mc, seed);
  const auto seg = assemble_segment(convs.front(), utt, tc.mode == TrainMode::kBaseline ? 0 : tc.budget_frames,
                                    tc.speaker_dependent);
  const auto report = model_grad_check(model, seg, LossOptions::from(tc), training, eps, tol);
  out << "checked " << report.entries.size() << " parameters; worst relative error " << report.worst_rel_error
      << " (" << report.worst_name << ")\n";
  if (!report.passed) throw NumericalError("gradient check failed at " + report.worst_name);
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Context-expanded Transformer/Conformer speech recognition toolkit", "ctxasr"};
  app.require_subcommand(1);
  Overrides o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--out", o.out, "output directory");
  };
  auto search = [&](CLI::App* sub) {
    sub->add_option("--beam", o.beam, "beam size");
    sub->add_option("--lambda", o.lambda, "attention weight in the joint score");
    sub->add_option("--gamma", o.gamma, "LM weight");
    sub->add_option("--budget-frames", o.budget_frames, "context budget in feature frames");
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic conversational dataset");
  common(gen);
  gen->add_option("--prefix", o.prefix, "conversation id prefix");
  auto* train = app.add_subcommand("train", "train or fine-tune a model");
  common(train);
  train->add_option("--budget-frames", o.budget_frames, "context budget in feature frames");
  train->add_option("--enc-lookahead", o.enc_lookahead, "streaming encoder look-ahead per layer");
  train->add_option("--src-lookahead", o.src_lookahead, "streaming source look-ahead");
  auto* decode = app.add_subcommand("decode", "decode conversations with joint CTC-attention search");
  common(decode);
  search(decode);
  decode->add_option("--recycle", o.recycle, "activation recycling")->check(CLI::IsMember({"on", "off"}));
  auto* stream = app.add_subcommand("stream", "streaming decode with triggered attention");
  common(stream);
  search(stream);
  stream->add_option("--enc-lookahead", o.enc_lookahead, "encoder look-ahead frames per layer");
  stream->add_option("--src-lookahead", o.src_lookahead, "source look-ahead frames past the trigger");
  auto* bench = app.add_subcommand("bench", "time decoding with recycling off and on");
  common(bench);
  search(bench);
  auto* average = app.add_subcommand("average", "average the best checkpoints by validation accuracy");
  common(average);
  average->add_option("--k", o.k, "number of checkpoints to average");
  average->add_option("inputs", o.inputs, "checkpoint files");
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient check of a toy model");
  common(grad);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out, err);
    if (train->parsed()) return cmd_train(o, out, err);
    if (decode->parsed()) return cmd_decode(o, out, err);
    if (stream->parsed()) return cmd_stream(o, out, err);
    if (bench->parsed()) return cmd_bench(o, out, err);
    if (average->parsed()) return cmd_average(o, out, err);
    if (grad->parsed()) return cmd_grad_check(o, out, err);
  } catch (const Error& e) {
    err << "error [" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    err << "error [config]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error [internal]: " << e.what() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace ctxasr
