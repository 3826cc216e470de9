#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gfem/core.hpp"
#include "gfem/dataset.hpp"
#include "gfem/gnn.hpp"
#include "gfem/mesh.hpp"

namespace gfem {

// Mean Euclidean error in mm and its gradient with respect to the prediction.
// The per-node gradient is the unit error vector divided by the node count;
// nodes with error norm below 1e-12 contribute a zero gradient.
struct MeeResult {
    double value_mm = 0.0;
    MatN3 grad;
};

MeeResult mee_loss(const MatN3& pred, const MatN3& target);

struct TrainConfig {
    double initial_lr = 0.005;
    double plateau_factor = 0.1;
    int plateau_patience = 5;
    double min_lr = 1e-8;
    int early_stop_patience = 15;
    int n_batches = 8;
    double dropout = 0.1;
    int max_epochs = 500;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
};

// Throws ConfigError listing every violated field.
void validate_config(const TrainConfig& config);

// A validation loss must beat the running best by at least this much to
// count as an improvement for the LR schedule and early stopping.
inline constexpr double kImprovementDelta = 1e-12;

struct OptimizerState {
    Gradients m;
    Gradients v;
    std::uint64_t step = 0;
    double lr = 0.005;
};

OptimizerState init_optimizer(const SurrogateModel& model, double lr);

// One decoupled-weight-decay Adam update at state->lr. Throws DataError if
// any gradient entry is non-finite.
void adamw_step(SurrogateModel* model, const Gradients& grads, OptimizerState* state,
                double weight_decay);

// Reduce-on-plateau: after `patience` consecutive non-improving observations
// the rate is multiplied by `factor`, floored at `min_lr`; the counter resets
// on improvement or reduction.
class PlateauSchedule {
  public:
    PlateauSchedule(double initial_lr, double factor, int patience, double min_lr);

    double observe(double val_loss);
    double lr() const { return lr_; }

  private:
    double lr_;
    double factor_;
    int patience_;
    double min_lr_;
    double best_;
    int wait_ = 0;
};

// Contiguous chunks of ceil(n / n_batches) indices; the tail batch may be
// shorter and trailing batches may be empty (they are omitted).
std::vector<std::vector<int>> make_batches(int n, int n_batches);

struct EpochRecord {
    int epoch = 0;
    double train_mee_mm = 0.0;
    double val_mee_mm = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct FitResult {
    SurrogateModel model;  // best-validation checkpoint
    std::vector<EpochRecord> log;
    int best_epoch = 0;
    double best_val_mee = 0.0;
};

// Computes z-score statistics over the training features and stores them in
// the model; exposed separately so tools can normalize consistently.
void set_normalization_stats(SurrogateModel* model,
                             const std::vector<DeformationSample>& train_set);

// Full training loop: shuffled mini-batches of whole graphs, batch loss =
// mean per-sample MEE, AdamW updates, plateau schedule on validation MEE,
// best-checkpoint tracking, early stop after early_stop_patience epochs
// without improvement. Deterministic for a fixed seed and any worker count.
FitResult fit(const SurrogateModel& initial, const MeshGraph& graph,
              const std::vector<DeformationSample>& train_set,
              const std::vector<DeformationSample>& val_set, const TrainConfig& config,
              int workers = 1);

// CSV training log, header `epoch,train_mee_mm,val_mee_mm,lr,seconds`.
void write_training_log(const std::vector<EpochRecord>& log, const std::string& path);
std::vector<EpochRecord> read_training_log(const std::string& path);

}  // namespace gfem
