#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "posh/corpus.hpp"
#include "posh/dyck.hpp"
#include "posh/model.hpp"
#include "posh/tokenizer.hpp"

namespace posh::trainer {

enum class Scheduler { linear, constant };
enum class Mode { steps, epochs };

struct PretrainSpec {
  int steps = 0;  // 0 disables the Dyck phase
  dyck::DyckConfig dyck;
  std::size_t n_strings = 10000;  // generated once, then cycled
};

struct TrainConfig {
  Mode mode = Mode::steps;
  double learning_rate = 1e-4;
  int batch_size = 32;
  int context_len = 512;
  int warmup_steps = 4000;
  int max_steps = 100000;  // step mode budget; in epoch mode 0 means unlimited
  int patience_steps = 6000;
  int eval_interval = 500;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  Scheduler scheduler = Scheduler::linear;
  int epochs = 0;       // epoch mode only
  int epoch_start = 0;  // t of the first epoch
  bool pack = true;     // step mode: concatenate sentences into context-length chunks
  double dev_fraction = 0.01;
  std::uint64_t seed = 0;
  model::AttentionBiasMode bias;
  PretrainSpec pretrain;

  void validate() const;  // throws std::invalid_argument

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

std::string bias_to_json(const model::AttentionBiasMode& m);
model::AttentionBiasMode bias_from_json(const std::string& text);

// Linear warmup from 0 to lr, then linear decay to 0 at `total_steps`.
// Constant scheduler: warmup then flat.
double lr_at(int step, const TrainConfig& cfg, int total_steps);
inline double lr_at(int step, const TrainConfig& cfg) { return lr_at(step, cfg, cfg.max_steps); }

// One tokenized training item. Trees are shared because packing drops them.
struct Example {
  std::vector<int> ids;
  std::vector<int> word_of_position;  // -1 for BOS/EOS and packed items
  std::shared_ptr<const model::TreeDistanceMatrix> tree;
};

// BOS + subword ids + EOS, truncated to `context_len`.
std::vector<Example> encode_records(const tokenizer::BpeModel& tok,
                                    const std::vector<corpus::SentenceRecord>& records,
                                    int context_len, bool with_trees);
std::vector<Example> encode_lines(const tokenizer::BpeModel& tok,
                                  const std::vector<std::string>& lines, int context_len);

// Concatenates the items and cuts the stream into chunks of `context_len`.
std::vector<Example> pack(const std::vector<Example>& items, int context_len);

// Deterministic hash split; the dev side always gets at least one item.
struct Split {
  std::vector<corpus::SentenceRecord> train, dev;
};
Split split_dev(const std::vector<corpus::SentenceRecord>& records, double fraction);

// Encodes Dyck strings; throws when a bracket token is missing from the vocabulary.
std::vector<Example> encode_dyck(const tokenizer::BpeModel& tok,
                                 const std::vector<std::string>& strings, int k);
std::vector<std::string> dyck_reserved_tokens(int k);

// Early stopping on dev loss with patience measured in steps.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience_steps) : patience_(patience_steps) {}
  // Returns true when training should stop.
  bool update(int step, double dev_loss);
  bool improved() const { return improved_; }
  double best_loss() const { return best_; }
  int best_step() const { return best_step_; }

 private:
  int patience_;
  double best_ = 0.0;
  int best_step_ = -1;
  bool improved_ = false;
};

struct PhaseRecord {
  std::string name;     // "dyck" or "main"
  int first_step = 0;   // global step index of the phase's first update
  int steps = 0;
  std::string stopping_reason;
};

struct RunManifest {
  std::string config_json;
  std::string model_config_json;
  std::vector<double> train_loss;  // per global step, LM part
  std::vector<double> tree_loss;   // per global step, tree-planted only
  std::vector<int> eval_steps;     // main phase, global step after which dev was evaluated
  std::vector<double> dev_loss;
  std::vector<double> eval_epochs;  // bias epoch t in effect at each eval
  std::vector<PhaseRecord> phases;
  std::string stopping_reason;  // max_steps, early_stop, epochs_done
  double best_dev_loss = 0.0;
  int best_step = -1;
  double final_train_loss = 0.0;  // full pass over the training items, no dropout
  double final_epoch = 0.0;       // bias epoch of the last update
  double wall_clock_seconds = 0.0;
  std::string best_checkpoint;
  std::string final_checkpoint;

  // Timing varies between identical runs; leave it out to compare replays.
  std::string to_json(bool with_timing = true) const;
  static RunManifest from_json(const std::string& text);
};

struct TrainInputs {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> dyck;  // required when pretrain.steps > 0
  const tokenizer::BpeModel* tokenizer = nullptr;  // embedded into checkpoints when set
  std::string output_dir;     // empty: keep everything in memory
};

struct TrainResult {
  RunManifest manifest;
  model::Transformer<float> best;
  model::Transformer<float> final_model;
};

// Mean LM loss (nats/token) over the items, no dropout.
double evaluate_loss(const model::Transformer<float>& m, const std::vector<Example>& items,
                     const model::AttentionBiasMode& bias, double epoch, int batch_size = 32);

TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& cfg, const TrainInputs& in);

// Checkpoint metadata keys written by train(): "bias", "eval_epoch", "step", "train_config".
struct CheckpointInfo {
  model::AttentionBiasMode bias;
  double eval_epoch = 0.0;
};
CheckpointInfo checkpoint_info(const model::Checkpoint& ck);

// Reads a TOML or JSON file (by extension) into JSON text.
std::string read_config_json(const std::string& path);

// A complete `posh train` job: model, hyperparameters and data locations.
struct TrainJob {
  model::ModelConfig model;
  TrainConfig train;
  std::string train_path;      // .conllu / .jsonl records or plain text lines
  std::string dev_path;        // empty: hash split of train_path
  std::string tokenizer_vocab;
  std::string tokenizer_merges;
  std::string output_dir;

  static TrainJob from_json(const std::string& text, const std::string& base_dir = ".");
  static TrainJob from_file(const std::string& path);
};

RunManifest run_job(const TrainJob& job);

}  // namespace posh::trainer
