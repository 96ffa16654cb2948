#include "aq/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "aq/attacks.hpp"
#include "aq/error.hpp"
#include "aq/finetune.hpp"
#include "aq/nn.hpp"
#include "aq/parallel.hpp"
#include "aq/rng.hpp"

namespace aq {
namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

// ---------------------------------------------------------------- decoding

std::string anchor(const RawConfig& raw, const ConfigEntry& e) {
  if (e.line == 0) return "<command line>";
  return raw.path + ":" + std::to_string(e.line);
}

[[noreturn]] void fail_entry(const RawConfig& raw, const ConfigEntry& e,
                             const std::string& why) {
  std::string where = e.section.empty() ? e.key : "[" + e.section + "] " + e.key;
  throw InputError(anchor(raw, e) + ": " + where + ": " + why);
}

double to_double(const RawConfig& raw, const ConfigEntry& e) {
  const std::string& v = e.value;
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail_entry(raw, e, "expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const RawConfig& raw, const ConfigEntry& e) {
  const std::string& v = e.value;
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail_entry(raw, e, "expected an unsigned integer, got '" + v + "'");
  return out;
}

std::size_t to_size(const RawConfig& raw, const ConfigEntry& e) {
  return static_cast<std::size_t>(to_u64(raw, e));
}

bool to_bool(const RawConfig& raw, const ConfigEntry& e) {
  const std::string& v = e.value;
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail_entry(raw, e, "expected true/false, got '" + v + "'");
}

// [attack]-family keys shared by the train, evaluation and fine-tune attacks.
bool decode_attack_key(const RawConfig& raw, const ConfigEntry& e,
                       AttackConfig& a) {
  if (e.key == "eps") a.eps = to_double(raw, e);
  else if (e.key == "step") a.step = to_double(raw, e);
  else if (e.key == "steps") a.steps = to_size(raw, e);
  else if (e.key == "restarts") a.restarts = to_size(raw, e);
  else if (e.key == "norm") {
    if (e.value == "linf") a.norm = AttackNorm::kLinf;
    else if (e.value == "l2") a.norm = AttackNorm::kL2;
    else fail_entry(raw, e, "expected linf or l2, got '" + e.value + "'");
  } else if (e.key == "random_start") a.random_start = to_bool(raw, e);
  else if (e.key == "early_stop") a.early_stop = to_bool(raw, e);
  else if (e.key == "clip") a.clip = to_bool(raw, e);
  else if (e.key == "clip_lo") a.clip_lo = to_double(raw, e);
  else if (e.key == "clip_hi") a.clip_hi = to_double(raw, e);
  else return false;
  return true;
}

bool decode_finetune_key(const RawConfig& raw, const ConfigEntry& e,
                         FineTuneSpec& f) {
  if (e.key == "kind") {
    try {
      f.kind = finetune_kind_from(e.value);
    } catch (const InputError& err) {
      fail_entry(raw, e, err.what());
    }
  } else if (e.key == "inner_steps") f.inner_steps = to_size(raw, e);
  else if (e.key == "inner_lr") f.inner_lr = to_double(raw, e);
  else if (e.key == "scope") {
    if (e.value == "all") f.scope = AdaptScope::kAll;
    else if (e.value == "last_layer") f.scope = AdaptScope::kLastLayer;
    else fail_entry(raw, e, "expected all or last_layer, got '" + e.value + "'");
  } else if (e.key == "ridge_lambda") f.ridge_lambda = to_double(raw, e);
  else return false;
  return true;
}

Shape parse_input_shape(const RawConfig& raw, const ConfigEntry& e) {
  Shape shape;
  for (const std::string& part : split(e.value, 'x')) {
    ConfigEntry dim = e;
    dim.value = trim(part);
    shape.push_back(to_size(raw, dim));
  }
  if (shape.empty()) fail_entry(raw, e, "empty input shape");
  return shape;
}

LayerSpec parse_layer(const RawConfig& raw, const ConfigEntry& e) {
  std::vector<std::string> parts = split(e.value, ':');
  bool relu = true;
  if (!parts.empty() && parts.back() == "linear") {
    relu = false;
    parts.pop_back();
  }
  auto num = [&](const std::string& s) {
    ConfigEntry sub = e;
    sub.value = trim(s);
    return to_size(raw, sub);
  };
  if (parts.size() == 2 && parts[0] == "dense")
    return DenseSpec{num(parts[1]), relu};
  if (parts.size() == 4 && parts[0] == "conv")
    return Conv2dSpec{num(parts[1]), num(parts[2]), num(parts[3]), relu};
  fail_entry(raw, e,
             "expected dense:<out>[:linear] or conv:<out>:<k>:<stride>[:linear], "
             "got '" + e.value + "'");
}

std::vector<std::pair<std::size_t, double>> parse_schedule(
    const RawConfig& raw, const ConfigEntry& e) {
  std::vector<std::pair<std::size_t, double>> sched;
  if (e.value == "none" || e.value.empty()) return sched;
  for (const std::string& pair : split(e.value, ',')) {
    std::vector<std::string> kv = split(pair, ':');
    if (kv.size() != 2)
      fail_entry(raw, e, "expected epoch:lr pairs, got '" + pair + "'");
    ConfigEntry ep = e, lr = e;
    ep.value = trim(kv[0]);
    lr.value = trim(kv[1]);
    sched.emplace_back(to_size(raw, ep), to_double(raw, lr));
  }
  return sched;
}

// A [model] block's keys, applied onto a copy of the shared [finetune]
// settings once the whole file is read (so block order never matters).
struct PendingModel {
  std::string name;
  std::string checkpoint;
  std::vector<ConfigEntry> tuning;
};

// ----------------------------------------------------------------- output

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw InputError("cannot create output directory '" + dir +
                     "': " + ec.message());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  f << content;
  if (!f) throw InputError("write to '" + path + "' failed");
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += csv_field(fields[i]);
  }
  line += '\n';
  return line;
}

json base_manifest(const char* command, const ExperimentConfig& cfg,
                   double wall_seconds, const std::vector<std::string>& outs) {
  return json{{"command", command},
              {"config_hash", cfg.hash},
              {"seed", cfg.seed},
              {"tool_version", kToolVersion},
              {"created_unix", static_cast<std::int64_t>(std::time(nullptr))},
              {"wall_seconds", wall_seconds},
              {"outputs", outs}};
}

double elapsed(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// Fixed column layout shared by the eval metrics table and every comparison
// table; the adversarial-fine-tune columns stay empty when that protocol
// was not requested.
const char* kMetricsHeader =
    "model,a_nat,a_adv,a_nat_at,a_adv_at,stderr_bound,n_samples,"
    "config_hash,seed";

std::vector<std::string> metrics_row(const ModelReport& r,
                                     const ExperimentConfig& cfg) {
  return {r.model,
          format_double(r.plain.a_nat),
          format_double(r.plain.a_adv),
          r.has_at ? format_double(r.at.a_nat) : "",
          r.has_at ? format_double(r.at.a_adv) : "",
          format_double(r.plain.stderr_bound),
          std::to_string(r.plain.n_samples),
          cfg.hash,
          std::to_string(cfg.seed)};
}

json metrics_obj(const ModelReport& r, const ExperimentConfig& cfg) {
  json j{{"model", r.model},
         {"a_nat", r.plain.a_nat},
         {"a_adv", r.plain.a_adv},
         {"stderr_bound", r.plain.stderr_bound},
         {"n_samples", r.plain.n_samples},
         {"config_hash", cfg.hash},
         {"seed", cfg.seed}};
  if (r.has_at) {
    j["a_nat_at"] = r.at.a_nat;
    j["a_adv_at"] = r.at.a_adv;
  } else {
    j["a_nat_at"] = nullptr;
    j["a_adv_at"] = nullptr;
  }
  return j;
}

std::string stem_of(const std::string& path) {
  std::string stem = std::filesystem::path(path).stem().string();
  return stem.empty() ? path : stem;
}

ParameterSet load_model(const Architecture& arch, const std::string& path,
                        FineTuneKind kind) {
  ParameterSet ps = load_checkpoint(path);
  check_checkpoint_fits(arch, ps, kind);
  return ps;
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& y) {
  const std::vector<double> v = logits.value();
  const Shape s = logits.shape();
  const std::size_t rows = s[0], cols = s[1];
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    if (static_cast<int>(best) == y[r]) ++correct;
  }
  return correct;
}

std::size_t surviving(const AttackOutcome& out) {
  std::size_t n = 0;
  for (std::uint8_t s : out.success)
    if (!s) ++n;
  return n;
}

}  // namespace

// ------------------------------------------------------------- raw config

RawConfig parse_config_text(const std::string& text, const std::string& path) {
  RawConfig rc;
  rc.path = path;
  std::map<std::string, std::size_t> header_count;
  std::string section;
  std::size_t instance = 0;
  std::istringstream in(text);
  std::string raw_line;
  std::size_t line = 0;
  while (std::getline(in, raw_line)) {
    ++line;
    std::string s = trim(raw_line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s[0] == '[') {
      if (s.back() != ']')
        throw InputError(path + ":" + std::to_string(line) +
                         ": unterminated section header '" + s + "'");
      std::string name = trim(s.substr(1, s.size() - 2));
      if (name.empty())
        throw InputError(path + ":" + std::to_string(line) +
                         ": empty section name");
      section = name;
      instance = header_count[name]++;
      continue;
    }
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw InputError(path + ":" + std::to_string(line) +
                       ": expected key=value or [section], got '" + s + "'");
    std::string key = trim(s.substr(0, eq));
    if (key.empty())
      throw InputError(path + ":" + std::to_string(line) + ": empty key");
    rc.entries.push_back(
        {section, key, trim(s.substr(eq + 1)), line, instance});
  }
  return rc;
}

RawConfig parse_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str(), path);
}

void override_entry(RawConfig& cfg, const std::string& section,
                    const std::string& key, const std::string& value) {
  for (auto it = cfg.entries.rbegin(); it != cfg.entries.rend(); ++it) {
    if (it->section == section && it->key == key) {
      it->value = value;
      it->line = 0;
      return;
    }
  }
  std::size_t instance = 0;
  for (const ConfigEntry& e : cfg.entries)
    if (e.section == section) instance = e.instance;
  cfg.entries.push_back({section, key, value, 0, instance});
}

std::string canonical_config(const RawConfig& cfg) {
  std::string out;
  for (const ConfigEntry& e : cfg.entries) {
    // Where artifacts land is not part of what was computed: two runs of one
    // experiment into different directories must embed the same hash.
    if (e.section.empty() && e.key == "out_dir") continue;
    out += e.section;
    out += '#';
    out += std::to_string(e.instance);
    out += '.';
    out += e.key;
    out += '=';
    out += e.value;
    out += '\n';
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string config_hash(const RawConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_config(cfg))));
  return buf;
}

// ------------------------------------------------------------ experiment

std::pair<Dataset, Dataset> load_datasets(const DatasetSpec& spec) {
  switch (spec.source) {
    case DataSource::kSynthetic:
      return gen_synthetic(spec.synth, spec.synth_seed);
    case DataSource::kFsds:
      return {load_fsds(spec.train_path), load_fsds(spec.test_path)};
    case DataSource::kCsv:
      return {load_csv(spec.train_path), load_csv(spec.test_path)};
  }
  throw InputError("unknown dataset source");
}

ExperimentConfig build_experiment(const RawConfig& raw) {
  ExperimentConfig cfg;
  std::vector<PendingModel> pending;
  bool global_seed_set = false, threads_set = false;
  bool train_seed_set = false, eval_seed_set = false, data_seed_set = false;
  int threads = 1;

  for (const ConfigEntry& e : raw.entries) {
    const std::string& sec = e.section;
    if (sec.empty()) {
      if (e.key == "seed") {
        cfg.seed = to_u64(raw, e);
        global_seed_set = true;
      } else if (e.key == "threads") {
        threads = static_cast<int>(to_u64(raw, e));
        threads_set = true;
      } else if (e.key == "out_dir") {
        cfg.out_dir = e.value;
      } else {
        fail_entry(raw, e, "unknown top-level key");
      }
    } else if (sec == "dataset") {
      if (e.key == "source") {
        if (e.value == "synthetic") cfg.data.source = DataSource::kSynthetic;
        else if (e.value == "fsds") cfg.data.source = DataSource::kFsds;
        else if (e.value == "csv") cfg.data.source = DataSource::kCsv;
        else
          fail_entry(raw, e,
                     "expected synthetic, fsds or csv, got '" + e.value + "'");
      } else if (e.key == "train_classes") cfg.data.synth.n_train_classes = to_size(raw, e);
      else if (e.key == "test_classes") cfg.data.synth.n_test_classes = to_size(raw, e);
      else if (e.key == "dim") cfg.data.synth.dim = to_size(raw, e);
      else if (e.key == "radius") cfg.data.synth.radius = to_double(raw, e);
      else if (e.key == "sigma") cfg.data.synth.sigma = to_double(raw, e);
      else if (e.key == "per_class") cfg.data.synth.per_class = to_size(raw, e);
      else if (e.key == "seed") {
        cfg.data.synth_seed = to_u64(raw, e);
        data_seed_set = true;
      } else if (e.key == "train_path") cfg.data.train_path = e.value;
      else if (e.key == "test_path") cfg.data.test_path = e.value;
      else fail_entry(raw, e, "unknown key in [dataset]");
    } else if (sec == "architecture") {
      if (e.key == "input") cfg.arch.input_shape = parse_input_shape(raw, e);
      else if (e.key == "layer") cfg.arch.layers.push_back(parse_layer(raw, e));
      else if (e.key == "embedding_dim") cfg.arch.embedding_dim = to_size(raw, e);
      else if (e.key == "embed_relu") cfg.arch.embed_relu = to_bool(raw, e);
      else if (e.key == "n_way") cfg.arch.n_way = to_size(raw, e);
      else fail_entry(raw, e, "unknown key in [architecture]");
    } else if (sec == "episode") {
      if (e.key == "n_way") {
        cfg.train.episode.n_way = to_size(raw, e);
        cfg.eval.episode.n_way = cfg.train.episode.n_way;
      } else if (e.key == "k_shot") {
        cfg.train.episode.k_shot = to_size(raw, e);
        cfg.eval.episode.k_shot = cfg.train.episode.k_shot;
      } else if (e.key == "q_query") {
        cfg.train.episode.q_query = to_size(raw, e);
        cfg.eval.episode.q_query = cfg.train.episode.q_query;
      } else fail_entry(raw, e, "unknown key in [episode]");
    } else if (sec == "finetune") {
      FineTuneSpec f = cfg.train.finetune;
      if (!decode_finetune_key(raw, e, f))
        fail_entry(raw, e, "unknown key in [finetune]");
      cfg.train.finetune = f;
      cfg.eval.finetune = f;
    } else if (sec == "train") {
      if (e.key == "regime") {
        if (e.value == "transfer") {
          cfg.transfer_baseline = true;
        } else {
          cfg.transfer_baseline = false;
          try {
            cfg.train.regime = regime_from(e.value);
          } catch (const InputError& err) {
            fail_entry(raw, e, err.what());
          }
        }
      } else if (e.key == "epochs") cfg.train.epochs = to_size(raw, e);
      else if (e.key == "episodes_per_epoch") cfg.train.episodes_per_epoch = to_size(raw, e);
      else if (e.key == "meta_batch") cfg.train.meta_batch = to_size(raw, e);
      else if (e.key == "trades_inv_lambda") cfg.train.trades_inv_lambda = to_double(raw, e);
      else if (e.key == "support_attack_pre_adapt") cfg.train.support_attack_pre_adapt = to_bool(raw, e);
      else if (e.key == "lr") cfg.train.outer.lr = to_double(raw, e);
      else if (e.key == "momentum") cfg.train.outer.momentum = to_double(raw, e);
      else if (e.key == "weight_decay") cfg.train.outer.weight_decay = to_double(raw, e);
      else if (e.key == "lr_schedule") cfg.train.outer.schedule = parse_schedule(raw, e);
      else if (e.key == "seed") {
        cfg.train.seed = to_u64(raw, e);
        train_seed_set = true;
      } else fail_entry(raw, e, "unknown key in [train]");
    } else if (sec == "attack") {
      if (!decode_attack_key(raw, e, cfg.train.attack))
        fail_entry(raw, e, "unknown key in [attack]");
    } else if (sec == "eval") {
      if (e.key == "n_episodes") cfg.eval.n_episodes = to_size(raw, e);
      else if (e.key == "adv_finetune") cfg.eval.adv_finetune = to_bool(raw, e);
      else if (e.key == "seed") {
        cfg.eval.seed = to_u64(raw, e);
        eval_seed_set = true;
      } else fail_entry(raw, e, "unknown key in [eval]");
    } else if (sec == "eval_attack") {
      if (!decode_attack_key(raw, e, cfg.eval.attack))
        fail_entry(raw, e, "unknown key in [eval_attack]");
    } else if (sec == "finetune_attack") {
      if (!decode_attack_key(raw, e, cfg.eval.finetune_attack))
        fail_entry(raw, e, "unknown key in [finetune_attack]");
    } else if (sec == "attack_report") {
      if (e.key == "transfer_source") cfg.transfer_source = e.value;
      else fail_entry(raw, e, "unknown key in [attack_report]");
    } else if (sec == "model") {
      if (pending.size() <= e.instance) pending.resize(e.instance + 1);
      PendingModel& m = pending[e.instance];
      if (e.key == "name") m.name = e.value;
      else if (e.key == "checkpoint") m.checkpoint = e.value;
      else m.tuning.push_back(e);
    } else {
      throw InputError(anchor(raw, e) + ": unknown section [" + sec + "]");
    }
  }

  if (global_seed_set) {
    if (!train_seed_set) cfg.train.seed = cfg.seed;
    if (!eval_seed_set) cfg.eval.seed = cfg.seed;
    if (!data_seed_set) cfg.data.synth_seed = cfg.seed;
  }
  if (threads_set) {
    cfg.train.threads = threads;
    cfg.eval.threads = threads;
  }

  for (std::size_t i = 0; i < pending.size(); ++i) {
    const PendingModel& pm = pending[i];
    ModelRef ref;
    ref.checkpoint = pm.checkpoint;
    ref.finetune = cfg.eval.finetune;
    for (const ConfigEntry& e : pm.tuning)
      if (!decode_finetune_key(raw, e, ref.finetune))
        fail_entry(raw, e, "unknown key in [model]");
    if (ref.checkpoint.empty())
      throw InputError(raw.path + ": [model] block " + std::to_string(i + 1) +
                       " has no checkpoint");
    ref.name = pm.name.empty() ? stem_of(ref.checkpoint) : pm.name;
    cfg.models.push_back(std::move(ref));
  }

  cfg.hash = config_hash(raw);
  return cfg;
}

// ------------------------------------------------------------- formatting

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n\r") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void check_checkpoint_fits(const Architecture& arch, const ParameterSet& ps,
                           FineTuneKind kind) {
  Rng rng(0);
  ParameterSet want = init_params(arch, rng);
  const bool need_head = kind == FineTuneKind::kMamlSgd;
  for (const ParamEntry& w : want.entries()) {
    if (w.scope == ParamScope::kHead && !need_head) continue;
    if (!ps.has(w.name))
      throw InputError("checkpoint/architecture mismatch: parameter '" +
                       w.name + "' missing from checkpoint");
    const Shape got = ps.get(w.name).shape();
    if (got != w.value.shape())
      throw InputError("checkpoint/architecture mismatch: '" + w.name +
                       "' is " + shape_str(got) + ", architecture wants " +
                       shape_str(w.value.shape()));
  }
}

// --------------------------------------------------------------- commands

int cmd_train(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.train.validate();
  auto [train_ds, test_ds] = load_datasets(cfg.data);
  (void)test_ds;
  auto [params, log] = cfg.transfer_baseline
                           ? adv_train_transfer(cfg.arch, cfg.train, train_ds)
                           : meta_train(cfg.arch, cfg.train, train_ds);

  ensure_dir(cfg.out_dir);
  save_checkpoint(cfg.out_dir + "/checkpoint.aqcp", params);

  std::string csv =
      "epoch,mean_query_loss,clean_acc,attack_success,attack_invocations,"
      "config_hash,seed\n";
  json seconds = json::array();
  for (const EpochRecord& r : log.epochs) {
    csv += csv_line({std::to_string(r.epoch),
                     format_double(r.mean_query_loss),
                     format_double(r.clean_acc),
                     format_double(r.attack_success),
                     std::to_string(r.attack_invocations),
                     cfg.hash,
                     std::to_string(cfg.seed)});
    seconds.push_back(r.seconds);
  }
  write_file(cfg.out_dir + "/train_log.csv", csv);

  json manifest = base_manifest("train", cfg, elapsed(t0),
                                {"checkpoint.aqcp", "train_log.csv"});
  manifest["per_epoch_seconds"] = seconds;
  write_file(cfg.out_dir + "/manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.eval.validate();
  ParameterSet ps = load_model(cfg.arch, checkpoint, cfg.eval.finetune.kind);
  auto [train_ds, test_ds] = load_datasets(cfg.data);
  (void)train_ds;

  ModelReport report;
  report.model = stem_of(checkpoint);
  EvalConfig plain = cfg.eval;
  plain.adv_finetune = false;
  report.plain = evaluate(cfg.arch, ps, test_ds, plain);
  if (cfg.eval.adv_finetune) {
    report.has_at = true;
    report.at = evaluate(cfg.arch, ps, test_ds, cfg.eval);
  }

  ensure_dir(cfg.out_dir);
  std::string csv = std::string(kMetricsHeader) + "\n" +
                    csv_line(metrics_row(report, cfg));
  write_file(cfg.out_dir + "/metrics.csv", csv);
  write_file(cfg.out_dir + "/metrics.json",
             metrics_obj(report, cfg).dump(2) + "\n");
  write_file(cfg.out_dir + "/manifest.json",
             base_manifest("eval", cfg, elapsed(t0),
                           {"metrics.csv", "metrics.json"})
                 .dump(2) + "\n");
  return 0;
}

int cmd_compare(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.eval.validate();
  if (cfg.models.size() < 2)
    throw InputError("compare needs at least two [model] blocks, got " +
                     std::to_string(cfg.models.size()));

  auto [train_ds, test_ds] = load_datasets(cfg.data);
  (void)train_ds;
  std::vector<CompareEntry> entries;
  for (const ModelRef& m : cfg.models) {
    CompareEntry e;
    e.name = m.name;
    e.params = load_model(cfg.arch, m.checkpoint, m.finetune.kind);
    e.finetune = m.finetune;
    entries.push_back(std::move(e));
  }
  std::vector<ModelReport> rows = compare(cfg.arch, entries, test_ds, cfg.eval);

  ensure_dir(cfg.out_dir);
  std::string csv = std::string(kMetricsHeader) + "\n";
  json arr = json::array();
  for (const ModelReport& r : rows) {
    csv += csv_line(metrics_row(r, cfg));
    arr.push_back(metrics_obj(r, cfg));
  }
  write_file(cfg.out_dir + "/comparison.csv", csv);
  write_file(cfg.out_dir + "/comparison.json", arr.dump(2) + "\n");
  write_file(cfg.out_dir + "/manifest.json",
             base_manifest("compare", cfg, elapsed(t0),
                           {"comparison.csv", "comparison.json"})
                 .dump(2) + "\n");
  return 0;
}

namespace {

struct AttackCounts {
  std::size_t queries = 0;
  std::size_t clean = 0, pgd = 0, pgd_restarts = 0, mi = 0, df = 0,
              transfer = 0;
  double df_linf_sum = 0.0;
  std::size_t df_flipped = 0;
};

}  // namespace

int cmd_attack(const ExperimentConfig& cfg, const std::string& checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.eval.validate();
  ParameterSet target = load_model(cfg.arch, checkpoint, cfg.eval.finetune.kind);
  const std::string source_path =
      cfg.transfer_source.empty() ? checkpoint : cfg.transfer_source;
  ParameterSet source =
      load_model(cfg.arch, source_path, cfg.eval.finetune.kind);
  auto [train_ds, test_ds] = load_datasets(cfg.data);
  (void)train_ds;

  const EvalConfig& ev = cfg.eval;
  AttackConfig restarts20 = ev.attack;
  restarts20.restarts = 20;

  std::vector<AttackCounts> slots(ev.n_episodes);
  parallel_for(ev.n_episodes, ev.threads, [&](std::size_t i) {
    Rng erng(derive_seed(ev.seed, SeedTag::kSeedEval, i));
    Episode ep = sample_episode(test_ds, ev.episode, erng);

    Graph g;
    ParamMap m = attach_constants(g, target);
    AdaptedModel am = adapt(g, cfg.arch, ev.finetune, m,
                            g.constant(ep.support_x), ep.support_y, ep.n_way);
    Graph gs;
    ParamMap ms = attach_constants(gs, source);
    AdaptedModel sm = adapt(gs, cfg.arch, ev.finetune, ms,
                            gs.constant(ep.support_x), ep.support_y, ep.n_way);

    AttackCounts& c = slots[i];
    c.queries = ep.query_y.size();
    {
      Graph gq;
      c.clean = count_correct(am.frozen(gq, gq.constant(ep.query_x)),
                              ep.query_y);
    }
    const std::uint64_t base = derive_seed(ev.seed, SeedTag::kSeedAttack, i);
    c.pgd = surviving(
        pgd_attack(am.frozen, ep.query_x, ep.query_y, ev.attack, base));
    c.pgd_restarts = surviving(pgd_attack(am.frozen, ep.query_x, ep.query_y,
                                          restarts20, derive_seed(base, 1)));
    c.mi = surviving(mi_fgsm_attack(am.frozen, ep.query_x, ep.query_y,
                                    ev.attack, 1.0, derive_seed(base, 2)));
    AttackOutcome df =
        deepfool_linf(am.frozen, ep.query_x, ep.query_y, 50, 0.02);
    c.df = surviving(df);
    for (std::size_t e = 0; e < df.success.size(); ++e) {
      if (df.success[e]) {
        c.df_linf_sum += df.perturbation_linf[e];
        ++c.df_flipped;
      }
    }
    const double tacc =
        transfer_attack(sm.frozen, am.frozen, ep.query_x, ep.query_y,
                        ev.attack, derive_seed(base, 3));
    c.transfer = static_cast<std::size_t>(
        std::llround(tacc * static_cast<double>(ep.query_y.size())));
  });

  AttackCounts total;
  for (const AttackCounts& c : slots) {
    total.queries += c.queries;
    total.clean += c.clean;
    total.pgd += c.pgd;
    total.pgd_restarts += c.pgd_restarts;
    total.mi += c.mi;
    total.df += c.df;
    total.transfer += c.transfer;
    total.df_linf_sum += c.df_linf_sum;
    total.df_flipped += c.df_flipped;
  }
  const double n = static_cast<double>(total.queries);
  const double a_clean = static_cast<double>(total.clean) / n;
  const double a_pgd = static_cast<double>(total.pgd) / n;
  const double a_pgd20 = static_cast<double>(total.pgd_restarts) / n;
  const double a_mi = static_cast<double>(total.mi) / n;
  const double a_df = static_cast<double>(total.df) / n;
  const double a_tr = static_cast<double>(total.transfer) / n;
  const double df_mean =
      total.df_flipped ? total.df_linf_sum / static_cast<double>(total.df_flipped)
                       : 0.0;

  ensure_dir(cfg.out_dir);
  const std::string model = stem_of(checkpoint);
  std::string csv =
      "model,a_clean,a_pgd,a_pgd_restarts,a_mi_fgsm,a_deepfool,df_mean_linf,"
      "a_transfer,config_hash,seed\n";
  csv += csv_line({model, format_double(a_clean), format_double(a_pgd),
                   format_double(a_pgd20), format_double(a_mi),
                   format_double(a_df), format_double(df_mean),
                   format_double(a_tr), cfg.hash, std::to_string(cfg.seed)});
  write_file(cfg.out_dir + "/attack_report.csv", csv);

  json j{{"model", model},
         {"a_clean", a_clean},
         {"a_pgd", a_pgd},
         {"a_pgd_restarts", a_pgd20},
         {"a_mi_fgsm", a_mi},
         {"a_deepfool", a_df},
         {"df_mean_linf", df_mean},
         {"a_transfer", a_tr},
         {"transfer_source", source_path},
         {"n_samples", total.queries},
         {"config_hash", cfg.hash},
         {"seed", cfg.seed}};
  write_file(cfg.out_dir + "/attack_report.json", j.dump(2) + "\n");
  write_file(cfg.out_dir + "/manifest.json",
             base_manifest("attack", cfg, elapsed(t0),
                           {"attack_report.csv", "attack_report.json"})
                 .dump(2) + "\n");
  return 0;
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.data.source != DataSource::kSynthetic)
    throw InputError("gen-data requires [dataset] source=synthetic");
  auto [train_ds, test_ds] = load_datasets(cfg.data);
  ensure_dir(cfg.out_dir);
  save_fsds(cfg.out_dir + "/train.fsds", train_ds);
  save_fsds(cfg.out_dir + "/test.fsds", test_ds);
  json manifest = base_manifest("gen-data", cfg, elapsed(t0),
                                {"train.fsds", "test.fsds"});
  manifest["train_classes"] = train_ds.n_classes();
  manifest["test_classes"] = test_ds.n_classes();
  manifest["examples_per_class"] = cfg.data.synth.per_class;
  write_file(cfg.out_dir + "/manifest.json", manifest.dump(2) + "\n");
  return 0;
}

}  // namespace aq
