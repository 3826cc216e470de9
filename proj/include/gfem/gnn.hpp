#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gfem/core.hpp"
#include "gfem/dataset.hpp"
#include "gfem/mesh.hpp"

namespace gfem {

enum class LayerKind { GraphSage, GraphConv, Dense };
enum class Activation { None, Relu };

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    int in_dim = 0;
    int out_dim = 0;
    Activation activation = Activation::None;
};

// Message-passing layers feed forward in sequence; their outputs are then
// concatenated (jumping knowledge) and consumed by the dense head. Dropout
// applies on the penultimate layer only, in training mode only.
std::vector<LayerSpec> default_architecture(int feature_dim = 7, int hidden = 64,
                                            int n_sage = 3, int n_gconv = 2);

void validate_architecture(const std::vector<LayerSpec>& specs, int feature_dim);

struct LayerParams {
    MatX w_self;   // out x in; the weight of a dense layer
    MatX w_neigh;  // out x in; empty for dense layers
    VecX bias;     // out
};

using Gradients = std::vector<LayerParams>;

struct SurrogateModel {
    std::vector<LayerSpec> specs;
    std::vector<LayerParams> params;
    double dropout_rate = 0.1;
    VecX feature_mean;  // per input column z-score statistics
    VecX feature_std;

    int feature_dim() const { return specs.empty() ? 0 : specs.front().in_dim; }
    std::int64_t parameter_count() const;
};

SurrogateModel init_params(const std::vector<LayerSpec>& specs, std::uint64_t seed,
                           double dropout_rate = 0.1);

Gradients zero_gradients(const SurrogateModel& model);

// Standalone layer rules. w_* are out x in, bias is out.
// GraphSAGE aggregates the edge-weight-weighted mean of the neighbours,
// GraphConv the edge-weighted sum.
MatX graphsage_forward(const MatX& h, const MeshGraph& graph, const MatX& w_self,
                       const MatX& w_neigh, const VecX& bias, Activation activation);
MatX graphconv_forward(const MatX& h, const MeshGraph& graph, const MatX& w_self,
                       const MatX& w_neigh, const VecX& bias, Activation activation);

struct LayerCache {
    MatX input;
    MatX aggregate;  // message-passing layers
    VecX weight_sum;  // GraphSAGE mean denominators
    MatX pre;        // pre-activation
    MatX mask;       // inverted-dropout mask, empty when inactive
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    int n_nodes = 0;
    bool training = false;
};

// Features are raw; the model's z-score statistics are applied internally.
MatN3 forward(const SurrogateModel& model, const MeshGraph& graph, const MatN7& features);
MatN3 forward_train(const SurrogateModel& model, const MeshGraph& graph,
                    const MatN7& features, Rng& rng, ForwardCache* cache);

// Exact reverse-mode gradients of a scalar loss given d(loss)/d(output).
// frozen_layers, when given, zeroes the gradient of the flagged layers.
Gradients backward(const SurrogateModel& model, const MeshGraph& graph,
                   const ForwardCache& cache, const MatN3& loss_grad,
                   const std::vector<char>* frozen_layers = nullptr);

struct TrainingState {
    std::uint64_t adam_step = 0;
    std::uint32_t epoch = 0;
    double best_val = 0.0;
    double lr = 0.0;
    std::uint32_t plateau_wait = 0;
    std::uint32_t stop_wait = 0;
    Gradients m;  // first and second AdamW moments, parameter-shaped
    Gradients v;
};

void write_checkpoint(const SurrogateModel& model, const std::string& path,
                      const TrainingState* state = nullptr);

struct Checkpoint {
    SurrogateModel model;
    bool has_state = false;
    TrainingState state;
};

Checkpoint read_checkpoint(const std::string& path);

}  // namespace gfem
