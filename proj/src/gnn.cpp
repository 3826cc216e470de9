#include "gfem/gnn.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "gfem/binary_io.hpp"

namespace gfem {

namespace {

bool is_mp(LayerKind kind) { return kind != LayerKind::Dense; }

// Neighbour aggregation iterates the edge list in storage order, so a model
// evaluated on a relabeled graph accumulates the same floating-point sums.
MatX aggregate_sum(const MeshGraph& graph, const MatX& h) {
    MatX acc = MatX::Zero(h.rows(), h.cols());
    for (std::size_t k = 0; k < graph.edges.size(); ++k) {
        const auto [u, v] = graph.edges[k];
        const double w = graph.edge_weight[k];
        acc.row(u) += w * h.row(v);
        acc.row(v) += w * h.row(u);
    }
    return acc;
}

MatX aggregate_mean(const MeshGraph& graph, const MatX& h, VecX* weight_sum) {
    MatX acc = MatX::Zero(h.rows(), h.cols());
    VecX wsum = VecX::Zero(h.rows());
    for (std::size_t k = 0; k < graph.edges.size(); ++k) {
        const auto [u, v] = graph.edges[k];
        const double w = graph.edge_weight[k];
        acc.row(u) += w * h.row(v);
        acc.row(v) += w * h.row(u);
        wsum[u] += w;
        wsum[v] += w;
    }
    for (Eigen::Index i = 0; i < acc.rows(); ++i) {
        if (wsum[i] > 0.0)
            acc.row(i) /= wsum[i];
        else
            acc.row(i).setZero();
    }
    if (weight_sum) *weight_sum = std::move(wsum);
    return acc;
}

// h * w^T evaluated one row at a time. Blocked matrix products round remainder
// row-panels differently, which would break exact permutation equivariance;
// a per-row product applies the identical operation sequence to every node.
MatX rows_times_wt(const MatX& h, const MatX& w) {
    MatX out(h.rows(), w.rows());
    VecX x(h.cols());
    VecX y(w.rows());
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
        x = h.row(r).transpose();
        y.noalias() = w * x;
        out.row(r) = y.transpose();
    }
    return out;
}

void check_mp_shapes(const MatX& h, const MeshGraph& graph, const MatX& w_self,
                     const MatX& w_neigh, const VecX& bias) {
    if (h.rows() != graph.n_nodes)
        throw ShapeError("feature rows do not match graph node count");
    if (w_self.cols() != h.cols()) throw ShapeError("w_self columns do not match features");
    if (w_neigh.rows() != w_self.rows() || w_neigh.cols() != h.cols())
        throw ShapeError("w_neigh shape does not match w_self");
    if (bias.size() != w_self.rows()) throw ShapeError("bias size does not match w_self");
}

MatX mp_forward(LayerKind kind, const MatX& h, const MeshGraph& graph, const MatX& w_self,
                const MatX& w_neigh, const VecX& bias, Activation activation,
                LayerCache* cache) {
    check_mp_shapes(h, graph, w_self, w_neigh, bias);
    VecX wsum;
    const MatX m = kind == LayerKind::GraphSage ? aggregate_mean(graph, h, &wsum)
                                                : aggregate_sum(graph, h);
    MatX z = rows_times_wt(h, w_self) + rows_times_wt(m, w_neigh);
    z.rowwise() += bias.transpose();
    if (cache) {
        cache->input = h;
        cache->aggregate = m;
        cache->weight_sum = std::move(wsum);
        cache->pre = z;
    }
    if (activation == Activation::Relu) return z.cwiseMax(0.0);
    return z;
}

MatX aggregate_backward(LayerKind kind, const MeshGraph& graph, const MatX& grad_aggregate,
                        const VecX& weight_sum) {
    MatX dx = MatX::Zero(grad_aggregate.rows(), grad_aggregate.cols());
    if (kind == LayerKind::GraphConv) {
        for (std::size_t k = 0; k < graph.edges.size(); ++k) {
            const auto [u, v] = graph.edges[k];
            const double w = graph.edge_weight[k];
            dx.row(v) += w * grad_aggregate.row(u);
            dx.row(u) += w * grad_aggregate.row(v);
        }
    } else {
        for (std::size_t k = 0; k < graph.edges.size(); ++k) {
            const auto [u, v] = graph.edges[k];
            const double w = graph.edge_weight[k];
            if (weight_sum[u] > 0.0) dx.row(v) += (w / weight_sum[u]) * grad_aggregate.row(u);
            if (weight_sum[v] > 0.0) dx.row(u) += (w / weight_sum[v]) * grad_aggregate.row(v);
        }
    }
    return dx;
}

MatX relu_backward(const MatX& pre, const MatX& grad_out) {
    return ((pre.array() > 0.0).cast<double>() * grad_out.array()).matrix();
}

MatX normalize_features(const SurrogateModel& model, const MatN7& features) {
    MatX h = features;
    for (Eigen::Index c = 0; c < h.cols(); ++c) {
        const double sd = model.feature_std[c];
        h.col(c) =
            (h.col(c).array() - model.feature_mean[c]) / (sd > 1e-12 ? sd : 1.0);
    }
    return h;
}

MatX run_forward(const SurrogateModel& model, const MeshGraph& graph,
                 const MatN7& features, bool training, Rng* rng, ForwardCache* cache) {
    if (model.specs.empty()) throw ShapeError("model has no layers");
    if (features.cols() != model.feature_dim())
        throw ShapeError("feature columns do not match the model input dimension");
    if (features.rows() != graph.n_nodes)
        throw ShapeError("feature rows do not match graph node count");

    MatX h = normalize_features(model, features);
    if (cache) {
        cache->layers.clear();
        cache->layers.reserve(model.specs.size());
        cache->n_nodes = graph.n_nodes;
        cache->training = training;
    }

    std::vector<MatX> mp_outputs;
    bool jk_consumed = false;
    for (std::size_t l = 0; l < model.specs.size(); ++l) {
        const LayerSpec& spec = model.specs[l];
        const LayerParams& p = model.params[l];
        LayerCache lc;
        if (is_mp(spec.kind)) {
            h = mp_forward(spec.kind, h, graph, p.w_self, p.w_neigh, p.bias,
                           spec.activation, cache ? &lc : nullptr);
            mp_outputs.push_back(h);
        } else {
            if (!jk_consumed && !mp_outputs.empty()) {
                Eigen::Index total = 0;
                for (const auto& o : mp_outputs) total += o.cols();
                MatX jk(graph.n_nodes, total);
                Eigen::Index at = 0;
                for (const auto& o : mp_outputs) {
                    jk.middleCols(at, o.cols()) = o;
                    at += o.cols();
                }
                h = std::move(jk);
                jk_consumed = true;
            }
            if (h.cols() != spec.in_dim)
                throw ShapeError("dense layer input dimension mismatch");
            MatX z = rows_times_wt(h, p.w_self);
            z.rowwise() += p.bias.transpose();
            if (cache) {
                lc.input = h;
                lc.pre = z;
            }
            MatX a;
            if (spec.activation == Activation::Relu)
                a = z.cwiseMax(0.0);
            else
                a = std::move(z);
            const bool penultimate = l + 2 == model.specs.size();
            if (training && penultimate && model.dropout_rate > 0.0) {
                const double keep = 1.0 - model.dropout_rate;
                MatX mask(a.rows(), a.cols());
                for (Eigen::Index r = 0; r < mask.rows(); ++r)
                    for (Eigen::Index c = 0; c < mask.cols(); ++c)
                        mask(r, c) = rng->uniform() < keep ? 1.0 / keep : 0.0;
                a = a.cwiseProduct(mask);
                if (cache) lc.mask = std::move(mask);
            }
            h = std::move(a);
        }
        if (cache) cache->layers.push_back(std::move(lc));
    }
    return h;
}

}  // namespace

std::vector<LayerSpec> default_architecture(int feature_dim, int hidden, int n_sage,
                                            int n_gconv) {
    if (feature_dim < 1 || hidden < 1)
        throw InvalidParameterError("feature_dim and hidden must be positive");
    if (n_sage < 0 || n_gconv < 0 || n_sage + n_gconv < 1)
        throw InvalidParameterError("need at least one message-passing layer");
    std::vector<LayerSpec> specs;
    int in = feature_dim;
    for (int i = 0; i < n_sage; ++i) {
        specs.push_back({LayerKind::GraphSage, in, hidden, Activation::Relu});
        in = hidden;
    }
    for (int i = 0; i < n_gconv; ++i) {
        specs.push_back({LayerKind::GraphConv, in, hidden, Activation::Relu});
        in = hidden;
    }
    const int jk = hidden * (n_sage + n_gconv);
    specs.push_back({LayerKind::Dense, jk, hidden, Activation::Relu});
    specs.push_back({LayerKind::Dense, hidden, 3, Activation::None});
    return specs;
}

void validate_architecture(const std::vector<LayerSpec>& specs, int feature_dim) {
    std::vector<std::string> violations;
    if (specs.empty()) {
        throw ConfigError({"architecture has no layers"});
    }
    for (std::size_t l = 0; l < specs.size(); ++l)
        if (specs[l].in_dim < 1 || specs[l].out_dim < 1)
            violations.push_back("layer " + std::to_string(l) + " has non-positive dims");
    if (specs.front().in_dim != feature_dim)
        violations.push_back("first layer input dimension must equal the feature dimension");
    if (specs.back().kind != LayerKind::Dense)
        violations.push_back("model must end with a dense head");
    if (specs.back().out_dim != 3)
        violations.push_back("final layer must output 3 values per node");

    int jk_width = 0;
    bool seen_dense = false;
    int prev_out = feature_dim;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        const LayerSpec& spec = specs[l];
        if (is_mp(spec.kind)) {
            if (seen_dense) {
                violations.push_back("message-passing layer after a dense layer");
                break;
            }
            if (spec.in_dim != prev_out)
                violations.push_back("layer " + std::to_string(l) +
                                     " input dimension mismatch");
            jk_width += spec.out_dim;
            prev_out = spec.out_dim;
        } else {
            const int expected = seen_dense ? prev_out : (jk_width > 0 ? jk_width : feature_dim);
            if (spec.in_dim != expected)
                violations.push_back("layer " + std::to_string(l) + " expects input " +
                                     std::to_string(expected) + ", spec says " +
                                     std::to_string(spec.in_dim));
            seen_dense = true;
            prev_out = spec.out_dim;
        }
    }
    if (!violations.empty()) throw ConfigError(violations);
}

std::int64_t SurrogateModel::parameter_count() const {
    std::int64_t count = 0;
    for (const auto& p : params)
        count += p.w_self.size() + p.w_neigh.size() + p.bias.size();
    return count;
}

SurrogateModel init_params(const std::vector<LayerSpec>& specs, std::uint64_t seed,
                           double dropout_rate) {
    if (specs.empty()) throw ConfigError({"architecture has no layers"});
    validate_architecture(specs, specs.front().in_dim);
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw InvalidParameterError("dropout_rate must lie in [0, 1)");

    SurrogateModel model;
    model.specs = specs;
    model.dropout_rate = dropout_rate;
    model.feature_mean = VecX::Zero(specs.front().in_dim);
    model.feature_std = VecX::Ones(specs.front().in_dim);

    Rng rng(seed);
    for (const LayerSpec& spec : specs) {
        LayerParams p;
        const double bound = std::sqrt(6.0 / (spec.in_dim + spec.out_dim));
        p.w_self.resize(spec.out_dim, spec.in_dim);
        for (Eigen::Index r = 0; r < p.w_self.rows(); ++r)
            for (Eigen::Index c = 0; c < p.w_self.cols(); ++c)
                p.w_self(r, c) = rng.uniform(-bound, bound);
        if (is_mp(spec.kind)) {
            p.w_neigh.resize(spec.out_dim, spec.in_dim);
            for (Eigen::Index r = 0; r < p.w_neigh.rows(); ++r)
                for (Eigen::Index c = 0; c < p.w_neigh.cols(); ++c)
                    p.w_neigh(r, c) = rng.uniform(-bound, bound);
        }
        p.bias = VecX::Zero(spec.out_dim);
        model.params.push_back(std::move(p));
    }
    return model;
}

Gradients zero_gradients(const SurrogateModel& model) {
    Gradients grads;
    grads.reserve(model.params.size());
    for (const auto& p : model.params) {
        LayerParams g;
        g.w_self = MatX::Zero(p.w_self.rows(), p.w_self.cols());
        g.w_neigh = MatX::Zero(p.w_neigh.rows(), p.w_neigh.cols());
        g.bias = VecX::Zero(p.bias.size());
        grads.push_back(std::move(g));
    }
    return grads;
}

MatX graphsage_forward(const MatX& h, const MeshGraph& graph, const MatX& w_self,
                       const MatX& w_neigh, const VecX& bias, Activation activation) {
    return mp_forward(LayerKind::GraphSage, h, graph, w_self, w_neigh, bias, activation,
                      nullptr);
}

MatX graphconv_forward(const MatX& h, const MeshGraph& graph, const MatX& w_self,
                       const MatX& w_neigh, const VecX& bias, Activation activation) {
    return mp_forward(LayerKind::GraphConv, h, graph, w_self, w_neigh, bias, activation,
                      nullptr);
}

MatN3 forward(const SurrogateModel& model, const MeshGraph& graph, const MatN7& features) {
    const MatX out = run_forward(model, graph, features, false, nullptr, nullptr);
    if (out.cols() != 3) throw ShapeError("model output is not 3 values per node");
    return out;
}

MatN3 forward_train(const SurrogateModel& model, const MeshGraph& graph,
                    const MatN7& features, Rng& rng, ForwardCache* cache) {
    const MatX out = run_forward(model, graph, features, true, &rng, cache);
    if (out.cols() != 3) throw ShapeError("model output is not 3 values per node");
    return out;
}

Gradients backward(const SurrogateModel& model, const MeshGraph& graph,
                   const ForwardCache& cache, const MatN3& loss_grad,
                   const std::vector<char>* frozen_layers) {
    const int n_layers = static_cast<int>(model.specs.size());
    if (static_cast<int>(cache.layers.size()) != n_layers)
        throw DataError("stale forward cache: layer count mismatch");
    if (cache.n_nodes != graph.n_nodes)
        throw ShapeError("forward cache node count does not match graph");
    if (loss_grad.rows() != graph.n_nodes)
        throw ShapeError("loss gradient rows do not match graph node count");
    if (frozen_layers && static_cast<int>(frozen_layers->size()) != n_layers)
        throw ShapeError("frozen layer mask size mismatch");

    std::vector<int> mp_layers;
    int first_dense = -1;
    for (int l = 0; l < n_layers; ++l) {
        if (is_mp(model.specs[l].kind))
            mp_layers.push_back(l);
        else if (first_dense < 0)
            first_dense = l;
    }
    if (first_dense < 0) throw DataError("model has no dense head");

    Gradients grads = zero_gradients(model);
    const auto frozen = [&](int l) { return frozen_layers && (*frozen_layers)[l] != 0; };

    MatX d = loss_grad;
    for (int l = n_layers - 1; l >= first_dense; --l) {
        const LayerSpec& spec = model.specs[l];
        const LayerCache& lc = cache.layers[l];
        const LayerParams& p = model.params[l];
        if (lc.pre.rows() != graph.n_nodes || lc.input.cols() != spec.in_dim)
            throw DataError("stale forward cache: layer " + std::to_string(l) +
                            " shape mismatch");
        MatX da = std::move(d);
        if (lc.mask.size() > 0) da = da.cwiseProduct(lc.mask);
        const MatX dz =
            spec.activation == Activation::Relu ? relu_backward(lc.pre, da) : std::move(da);
        if (!frozen(l)) {
            grads[l].w_self = dz.transpose() * lc.input;
            grads[l].bias = dz.colwise().sum().transpose();
        }
        d = dz * p.w_self;
    }

    if (mp_layers.empty()) return grads;

    // d now holds the gradient with respect to the JK concatenation.
    std::vector<MatX> d_mp(mp_layers.size());
    Eigen::Index at = 0;
    for (std::size_t k = 0; k < mp_layers.size(); ++k) {
        const int width = model.specs[mp_layers[k]].out_dim;
        d_mp[k] = d.middleCols(at, width);
        at += width;
    }
    if (at != d.cols()) throw DataError("stale forward cache: JK width mismatch");

    for (int k = static_cast<int>(mp_layers.size()) - 1; k >= 0; --k) {
        const int l = mp_layers[k];
        const LayerSpec& spec = model.specs[l];
        const LayerCache& lc = cache.layers[l];
        const LayerParams& p = model.params[l];
        if (lc.pre.rows() != graph.n_nodes || lc.input.cols() != spec.in_dim)
            throw DataError("stale forward cache: layer " + std::to_string(l) +
                            " shape mismatch");
        const MatX dz = spec.activation == Activation::Relu
                            ? relu_backward(lc.pre, d_mp[k])
                            : std::move(d_mp[k]);
        if (!frozen(l)) {
            grads[l].w_self = dz.transpose() * lc.input;
            grads[l].w_neigh = dz.transpose() * lc.aggregate;
            grads[l].bias = dz.colwise().sum().transpose();
        }
        if (k > 0) {
            const MatX grad_aggregate = dz * p.w_neigh;
            d_mp[k - 1] += dz * p.w_self;
            d_mp[k - 1] +=
                aggregate_backward(spec.kind, graph, grad_aggregate, lc.weight_sum);
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints: binary little-endian.
//   magic 'PGNM', version u32, layer table (kind, in, out, activation as u32),
//   dropout f64, feature statistics, parameter tensors row-major f64,
//   then a has-training-state byte and the optional state block.

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t encode_kind(LayerKind k) { return static_cast<std::uint32_t>(k); }

LayerKind decode_kind(std::uint32_t v) {
    if (v > 2) throw DataError("checkpoint: unknown layer kind " + std::to_string(v));
    return static_cast<LayerKind>(v);
}

Activation decode_activation(std::uint32_t v) {
    if (v > 1) throw DataError("checkpoint: unknown activation " + std::to_string(v));
    return static_cast<Activation>(v);
}

void write_matrix(std::ostream& out, const MatX& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) bin::write_f64(out, m(r, c));
}

void read_matrix(std::istream& in, MatX* m, const std::string& what) {
    for (Eigen::Index r = 0; r < m->rows(); ++r)
        for (Eigen::Index c = 0; c < m->cols(); ++c) (*m)(r, c) = bin::read_f64(in, what);
}

void write_vector(std::ostream& out, const VecX& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) bin::write_f64(out, v[i]);
}

void read_vector(std::istream& in, VecX* v, const std::string& what) {
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = bin::read_f64(in, what);
}

void write_tensors(std::ostream& out, const Gradients& tensors) {
    for (const auto& p : tensors) {
        write_matrix(out, p.w_self);
        write_matrix(out, p.w_neigh);
        write_vector(out, p.bias);
    }
}

void read_tensors(std::istream& in, Gradients* tensors, const std::string& what) {
    for (auto& p : *tensors) {
        read_matrix(in, &p.w_self, what);
        read_matrix(in, &p.w_neigh, what);
        read_vector(in, &p.bias, what);
    }
}

}  // namespace

void write_checkpoint(const SurrogateModel& model, const std::string& path,
                      const TrainingState* state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");

    bin::write_magic(out, "PGNM");
    bin::write_u32(out, kCheckpointVersion);
    bin::write_u32(out, static_cast<std::uint32_t>(model.specs.size()));
    for (const auto& spec : model.specs) {
        bin::write_u32(out, encode_kind(spec.kind));
        bin::write_u32(out, static_cast<std::uint32_t>(spec.in_dim));
        bin::write_u32(out, static_cast<std::uint32_t>(spec.out_dim));
        bin::write_u32(out, static_cast<std::uint32_t>(spec.activation));
    }
    bin::write_f64(out, model.dropout_rate);
    bin::write_u32(out, static_cast<std::uint32_t>(model.feature_mean.size()));
    write_vector(out, model.feature_mean);
    write_vector(out, model.feature_std);
    write_tensors(out, model.params);
    out.put(state ? 1 : 0);
    if (state) {
        bin::write_u64(out, state->adam_step);
        bin::write_u32(out, state->epoch);
        bin::write_f64(out, state->best_val);
        bin::write_f64(out, state->lr);
        bin::write_u32(out, state->plateau_wait);
        bin::write_u32(out, state->stop_wait);
        write_tensors(out, state->m);
        write_tensors(out, state->v);
    }
    if (!out) throw IoError("failed writing " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);

    bin::expect_magic(in, "PGNM", "checkpoint");
    const std::uint32_t version = bin::read_u32(in, "checkpoint version");
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint cp;
    const std::uint32_t n_layers = bin::read_u32(in, "layer count");
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        LayerSpec spec;
        spec.kind = decode_kind(bin::read_u32(in, "layer kind"));
        spec.in_dim = static_cast<int>(bin::read_u32(in, "layer in_dim"));
        spec.out_dim = static_cast<int>(bin::read_u32(in, "layer out_dim"));
        spec.activation = decode_activation(bin::read_u32(in, "layer activation"));
        cp.model.specs.push_back(spec);
    }
    if (cp.model.specs.empty()) throw DataError("checkpoint has no layers");
    validate_architecture(cp.model.specs, cp.model.specs.front().in_dim);

    cp.model.dropout_rate = bin::read_f64(in, "dropout");
    const std::uint32_t feat = bin::read_u32(in, "feature dim");
    if (feat != static_cast<std::uint32_t>(cp.model.specs.front().in_dim))
        throw DataError("checkpoint feature statistics do not match the first layer");
    cp.model.feature_mean.resize(feat);
    cp.model.feature_std.resize(feat);
    read_vector(in, &cp.model.feature_mean, "feature mean");
    read_vector(in, &cp.model.feature_std, "feature std");

    for (const auto& spec : cp.model.specs) {
        LayerParams p;
        p.w_self.resize(spec.out_dim, spec.in_dim);
        if (is_mp(spec.kind)) p.w_neigh.resize(spec.out_dim, spec.in_dim);
        p.bias.resize(spec.out_dim);
        cp.model.params.push_back(std::move(p));
    }
    read_tensors(in, &cp.model.params, "parameters");

    const int flag = in.get();
    if (flag == std::istream::traits_type::eof())
        throw DataError("truncated file while reading training-state flag");
    cp.has_state = flag != 0;
    if (cp.has_state) {
        cp.state.adam_step = bin::read_u64(in, "adam step");
        cp.state.epoch = bin::read_u32(in, "epoch");
        cp.state.best_val = bin::read_f64(in, "best validation loss");
        cp.state.lr = bin::read_f64(in, "learning rate");
        cp.state.plateau_wait = bin::read_u32(in, "plateau wait");
        cp.state.stop_wait = bin::read_u32(in, "stop wait");
        cp.state.m = zero_gradients(cp.model);
        cp.state.v = zero_gradients(cp.model);
        read_tensors(in, &cp.state.m, "first moments");
        read_tensors(in, &cp.state.v, "second moments");
    }
    return cp;
}

}  // namespace gfem
