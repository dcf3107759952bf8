#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "co4/data.hpp"
#include "co4/models.hpp"

namespace co4 {

struct OptConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double warmup_frac = 0.1;
  double clip_norm = 1.0;  // global-norm clip, 0 disables
  size_t epochs = 5;
  size_t batch_size = 64;
  uint64_t seed = 0;
  bool deterministic = false;  // zero wall-clock fields in outputs
};

struct EpochStats {
  size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double wall_ms = 0.0;
};

struct RunManifest {
  std::string run_id;
  std::string model;  // "co4" | "vit"
  std::string config_json;
  uint64_t seed = 0;
  bool deterministic = false;
  std::string environment;
  std::vector<EpochStats> epochs;

  double final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
  // CSV rows: epoch,split,loss,acc,wall_ms (two rows per epoch).
  std::string csv() const;
  std::string json() const;
  void save(const std::string& dir) const;  // {dir}/{run_id}.csv + .manifest.json
};

enum class ModelKind { kCo4, kVit };

struct TrainJob {
  ModelKind kind = ModelKind::kCo4;
  Co4Config co4;
  size_t co4_layers = 1;
  VitConfig vit;
  OptConfig opt;
  DatasetSpec data;
  std::string run_id = "run";
  std::string out_dir;  // empty = no files written
};

// Deterministic batch plan for an epoch; model-independent so comparison
// pairs see bitwise-identical token streams.
std::vector<std::vector<size_t>> make_epoch_batches(size_t count, size_t batch,
                                                    uint64_t seed, size_t epoch);

// AdamW with decoupled weight decay and optional global-norm clipping.
class AdamW {
 public:
  explicit AdamW(const OptConfig& cfg) : cfg_(cfg) {}
  // Applies one update using grads recorded on `tape`; `lr` is the absolute
  // learning rate for this step. Returns the pre-clip global grad norm.
  double step(ParamRefs& params, Tape& tape, double lr);

 private:
  OptConfig cfg_;
  size_t t_ = 0;
};

double cosine_lr(size_t step, size_t total_steps, double base_lr, double warmup_frac);

RunManifest train(const TrainJob& job);
RunManifest train(const TrainJob& job, const DataBundle& bundle);

// Regime-collapse ablation: trains one job per modulation-equation set
// (normal-init Co4) per seed under one shared config. Returns accuracy rows
// and a CSV keyed by variant id.
struct AblateResult {
  std::vector<std::string> variants;               // size 5
  std::vector<std::vector<double>> val_acc;        // [variant][seed]
  std::string csv() const;                         // variant_id,variant,seed,val_acc
};

AblateResult ablate(const TrainJob& base, const std::vector<uint64_t>& seeds);

// Checkpointing: one CO4T blob per parameter plus a JSON manifest.
void save_checkpoint(const std::string& dir, ParamRefs params, const std::string& config_json,
                     uint64_t seed, size_t step);
void load_checkpoint(const std::string& dir, ParamRefs params);

std::string environment_fingerprint();

}  // namespace co4
