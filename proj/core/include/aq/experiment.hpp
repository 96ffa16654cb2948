#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aq/eval.hpp"
#include "aq/metatrain.hpp"
#include "aq/tasks.hpp"

namespace aq {

inline constexpr const char* kToolVersion = "0.1.0";

// One `key=value` line of a config file, tagged with the [section] it sits
// under. `instance` counts repeated headers of the same section name, which
// is how the repeatable [model] blocks stay distinct.
struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;  // 1-based; 0 marks a command-line override
  std::size_t instance = 0;
};

// A config in file order. Parsing keeps every entry verbatim so the hash
// covers exactly what a rerun would read back.
struct RawConfig {
  std::string path;  // anchors error messages
  std::vector<ConfigEntry> entries;
};

// Flat `key=value` lines under `[section]` headers; '#' and ';' start
// comments; blank lines ignored. Errors cite "<path>:<line>: <why>".
RawConfig parse_config_text(const std::string& text, const std::string& path);
RawConfig parse_config_file(const std::string& path);

// Command-line override: replaces the last entry matching (section, key), or
// appends one (line = 0) when the file never set it.
void override_entry(RawConfig& cfg, const std::string& section,
                    const std::string& key, const std::string& value);

// Canonical serialization of the effective config — the hash input. One
// "section#instance.key=value" line per entry, in order. The output
// directory is skipped: it names where artifacts land, not what was run.
std::string canonical_config(const RawConfig& cfg);

std::uint64_t fnv1a64(std::string_view bytes);

// 16 lowercase hex digits of fnv1a64(canonical_config). Embedded in every
// output file so artifacts name the exact effective config that made them.
std::string config_hash(const RawConfig& cfg);

enum class DataSource : std::uint8_t { kSynthetic = 0, kFsds = 1, kCsv = 2 };

struct DatasetSpec {
  DataSource source = DataSource::kSynthetic;
  SyntheticSpec synth;
  std::uint64_t synth_seed = 0;
  std::string train_path;
  std::string test_path;
};

// Generates the synthetic pair or loads both splits from disk.
std::pair<Dataset, Dataset> load_datasets(const DatasetSpec& spec);

// One row of a comparison table: a named checkpoint plus the fine-tuning
// protocol to score it under.
struct ModelRef {
  std::string name;
  std::string checkpoint;
  FineTuneSpec finetune;
};

// Everything a command needs, decoded and validated from a RawConfig.
struct ExperimentConfig {
  DatasetSpec data;
  Architecture arch;
  MetaTrainConfig train;
  bool transfer_baseline = false;  // [train] regime=transfer
  EvalConfig eval;
  std::vector<ModelRef> models;  // [model] blocks; compare requires >= 2
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  std::string transfer_source;  // attack report's surrogate checkpoint
  std::string hash;             // config_hash of the source RawConfig
};

// Decodes sections/keys with line-anchored errors; unknown sections and keys
// are errors, not warnings. The global seed fills every per-stage seed that
// the file does not set explicitly.
ExperimentConfig build_experiment(const RawConfig& raw);

// Shortest round-trip decimal for doubles (std::to_chars); integers as-is.
std::string format_double(double v);
// RFC-4180 quoting: wraps fields containing comma, quote or newline.
std::string csv_field(const std::string& v);

// Verifies that checkpoint parameters fit the architecture: backbone shapes
// always, head shapes only when the fine-tuning kind adapts the head
// (gradient fine-tuning). Throws InputError naming the first mismatch.
void check_checkpoint_fits(const Architecture& arch, const ParameterSet& ps,
                           FineTuneKind kind);

// Commands. Each writes its artifacts under cfg.out_dir and returns 0;
// contract violations throw InputError (exit 2 at the CLI), numeric
// failures throw NumericError (exit 3).
int cmd_train(const ExperimentConfig& cfg);
int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint);
int cmd_compare(const ExperimentConfig& cfg);
int cmd_attack(const ExperimentConfig& cfg, const std::string& checkpoint);
int cmd_gen_data(const ExperimentConfig& cfg);

}  // namespace aq
