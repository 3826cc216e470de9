#include "gfem/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace gfem {

MeeResult mee_loss(const MatN3& pred, const MatN3& target) {
    if (pred.rows() != target.rows())
        throw ShapeError("prediction and target node counts differ");
    const Eigen::Index n = pred.rows();
    if (n == 0) throw ShapeError("empty displacement fields");

    MeeResult out;
    out.grad = MatN3::Zero(n, 3);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::RowVector3d e = pred.row(i) - target.row(i);
        const double norm = e.norm();
        sum += norm;
        if (norm >= 1e-12) out.grad.row(i) = e / (norm * static_cast<double>(n));
    }
    out.value_mm = sum / static_cast<double>(n);
    return out;
}

void validate_config(const TrainConfig& config) {
    std::vector<std::string> violations;
    if (!(config.initial_lr > 0.0)) violations.push_back("initial_lr must be positive");
    if (!(config.plateau_factor > 0.0 && config.plateau_factor < 1.0))
        violations.push_back("plateau_factor must lie in (0, 1)");
    if (config.plateau_patience < 1) violations.push_back("plateau_patience must be >= 1");
    if (!(config.min_lr > 0.0)) violations.push_back("min_lr must be positive");
    if (config.early_stop_patience < 1)
        violations.push_back("early_stop_patience must be >= 1");
    if (config.n_batches < 1) violations.push_back("n_batches must be >= 1");
    if (!(config.dropout >= 0.0 && config.dropout < 1.0))
        violations.push_back("dropout must lie in [0, 1)");
    if (config.max_epochs < 0) violations.push_back("max_epochs must be >= 0");
    if (config.weight_decay < 0.0) violations.push_back("weight_decay must be >= 0");
    if (!violations.empty()) throw ConfigError(violations);
}

OptimizerState init_optimizer(const SurrogateModel& model, double lr) {
    OptimizerState state;
    state.m = zero_gradients(model);
    state.v = zero_gradients(model);
    state.lr = lr;
    return state;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adamw_tensor(Eigen::Ref<MatX> param, const MatX& grad, Eigen::Ref<MatX> m,
                  Eigen::Ref<MatX> v, double lr, double weight_decay, double bc1,
                  double bc2, const char* what, std::size_t layer) {
    if (!grad.allFinite())
        throw DataError("non-finite gradient in " + std::string(what) + " of layer " +
                        std::to_string(layer));
    m = kBeta1 * m + (1.0 - kBeta1) * grad;
    v = (kBeta2 * v.array() + (1.0 - kBeta2) * grad.array().square()).matrix();
    param = param * (1.0 - lr * weight_decay) -
            lr * ((m / bc1).array() / ((v / bc2).array().sqrt() + kAdamEps)).matrix();
}

}  // namespace

void adamw_step(SurrogateModel* model, const Gradients& grads, OptimizerState* state,
                double weight_decay) {
    if (grads.size() != model->params.size() || state->m.size() != model->params.size())
        throw ShapeError("gradient and optimizer shapes do not match the model");
    state->step += 1;
    const double t = static_cast<double>(state->step);
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);
    for (std::size_t l = 0; l < model->params.size(); ++l) {
        LayerParams& p = model->params[l];
        adamw_tensor(p.w_self, grads[l].w_self, state->m[l].w_self, state->v[l].w_self,
                     state->lr, weight_decay, bc1, bc2, "w_self", l);
        if (p.w_neigh.size() > 0)
            adamw_tensor(p.w_neigh, grads[l].w_neigh, state->m[l].w_neigh,
                         state->v[l].w_neigh, state->lr, weight_decay, bc1, bc2, "w_neigh",
                         l);
        MatX bias = p.bias, gb = grads[l].bias, mb = state->m[l].bias, vb = state->v[l].bias;
        adamw_tensor(bias, gb, mb, vb, state->lr, weight_decay, bc1, bc2, "bias", l);
        p.bias = bias;
        state->m[l].bias = mb;
        state->v[l].bias = vb;
    }
}

PlateauSchedule::PlateauSchedule(double initial_lr, double factor, int patience,
                                 double min_lr)
    : lr_(initial_lr),
      factor_(factor),
      patience_(patience),
      min_lr_(min_lr),
      best_(std::numeric_limits<double>::infinity()) {
    if (!(initial_lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience < 1 ||
        !(min_lr > 0.0))
        throw InvalidParameterError("invalid plateau schedule parameters");
}

double PlateauSchedule::observe(double val_loss) {
    if (val_loss < best_ - kImprovementDelta) {
        best_ = val_loss;
        wait_ = 0;
    } else if (++wait_ >= patience_) {
        lr_ = std::max(lr_ * factor_, min_lr_);
        wait_ = 0;
    }
    return lr_;
}

std::vector<std::vector<int>> make_batches(int n, int n_batches) {
    if (n < 1 || n_batches < 1)
        throw InvalidParameterError("batching needs positive sample and batch counts");
    const int size = (n + n_batches - 1) / n_batches;
    std::vector<std::vector<int>> batches;
    for (int at = 0; at < n; at += size) {
        std::vector<int> batch;
        for (int i = at; i < std::min(at + size, n); ++i) batch.push_back(i);
        batches.push_back(std::move(batch));
    }
    return batches;
}

void set_normalization_stats(SurrogateModel* model,
                             const std::vector<DeformationSample>& train_set) {
    if (train_set.empty()) throw ConfigError({"training split is empty"});
    const Eigen::Index dim = train_set.front().features.cols();
    if (model->feature_dim() != dim)
        throw ShapeError("model feature dimension does not match the samples");

    VecX mean = VecX::Zero(dim);
    double count = 0.0;
    for (const auto& s : train_set) {
        mean += s.features.colwise().sum().transpose();
        count += static_cast<double>(s.features.rows());
    }
    mean /= count;

    VecX var = VecX::Zero(dim);
    for (const auto& s : train_set)
        for (Eigen::Index c = 0; c < dim; ++c)
            var[c] += (s.features.col(c).array() - mean[c]).square().sum();
    var /= count;

    model->feature_mean = mean;
    model->feature_std = var.array().sqrt();
}

namespace {

double validation_mee(const SurrogateModel& model, const MeshGraph& graph,
                      const std::vector<DeformationSample>& val_set) {
    double sum = 0.0;
    for (const auto& s : val_set)
        sum += mee_loss(forward(model, graph, s.features), s.target).value_mm;
    return sum / static_cast<double>(val_set.size());
}

}  // namespace

FitResult fit(const SurrogateModel& initial, const MeshGraph& graph,
              const std::vector<DeformationSample>& train_set,
              const std::vector<DeformationSample>& val_set, const TrainConfig& config,
              int workers) {
    validate_config(config);
    {
        std::vector<std::string> violations;
        if (train_set.empty()) violations.push_back("training split is empty");
        if (val_set.empty()) violations.push_back("validation split is empty");
        if (!violations.empty()) throw ConfigError(violations);
    }

    FitResult result;
    result.model = initial;
    if (config.max_epochs == 0) return result;

    SurrogateModel model = initial;
    model.dropout_rate = config.dropout;
    set_normalization_stats(&model, train_set);

    OptimizerState opt = init_optimizer(model, config.initial_lr);
    PlateauSchedule schedule(config.initial_lr, config.plateau_factor,
                             config.plateau_patience, config.min_lr);
    Rng shuffle_rng(config.seed);

    const int n = static_cast<int>(train_set.size());
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;

    result.best_val_mee = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double epoch_lr = opt.lr;
        shuffle_in_place(order, shuffle_rng);

        double train_sum = 0.0;
        int position = 0;
        const std::uint64_t epoch_seed =
            derive_seed(config.seed, static_cast<std::uint64_t>(epoch));
        for (const auto& batch : make_batches(n, config.n_batches)) {
            struct Slot {
                Gradients grads;
                double mee = 0.0;
            };
            std::vector<Slot> slots(batch.size());
            parallel_for(batch.size(), workers, [&](std::size_t b) {
                const DeformationSample& s = train_set[order[batch[b]]];
                Rng drop_rng(derive_seed(
                    epoch_seed, static_cast<std::uint64_t>(position + static_cast<int>(b))));
                ForwardCache cache;
                const MatN3 pred = forward_train(model, graph, s.features, drop_rng, &cache);
                const MeeResult mee = mee_loss(pred, s.target);
                slots[b].mee = mee.value_mm;
                slots[b].grads = backward(model, graph, cache, mee.grad);
            });
            position += static_cast<int>(batch.size());

            Gradients acc = zero_gradients(model);
            const double inv = 1.0 / static_cast<double>(batch.size());
            for (const Slot& slot : slots) {
                train_sum += slot.mee;
                for (std::size_t l = 0; l < acc.size(); ++l) {
                    acc[l].w_self += inv * slot.grads[l].w_self;
                    if (acc[l].w_neigh.size() > 0)
                        acc[l].w_neigh += inv * slot.grads[l].w_neigh;
                    acc[l].bias += inv * slot.grads[l].bias;
                }
            }
            adamw_step(&model, acc, &opt, config.weight_decay);
        }

        const double train_mee = train_sum / static_cast<double>(n);
        const double val_mee = validation_mee(model, graph, val_set);
        if (!std::isfinite(train_mee) || !std::isfinite(val_mee))
            throw DataError("non-finite loss at epoch " + std::to_string(epoch));

        if (val_mee < result.best_val_mee - kImprovementDelta) {
            result.best_val_mee = val_mee;
            result.best_epoch = epoch;
            result.model = model;
            since_best = 0;
        } else {
            ++since_best;
        }
        opt.lr = schedule.observe(val_mee);

        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back({epoch, train_mee, val_mee, epoch_lr, seconds});

        if (since_best >= config.early_stop_patience) break;
    }
    return result;
}

void write_training_log(const std::vector<EpochRecord>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "epoch,train_mee_mm,val_mee_mm,lr,seconds\n";
    out << std::setprecision(17);
    for (const auto& r : log)
        out << r.epoch << ',' << r.train_mee_mm << ',' << r.val_mee_mm << ',' << r.lr << ','
            << r.seconds << '\n';
    if (!out) throw IoError("failed writing " + path);
}

std::vector<EpochRecord> read_training_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "epoch,train_mee_mm,val_mee_mm,lr,seconds")
        throw ParseError("bad training log header", 1);

    std::vector<EpochRecord> log;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        EpochRecord r;
        char c1, c2, c3, c4;
        if (!(row >> r.epoch >> c1 >> r.train_mee_mm >> c2 >> r.val_mee_mm >> c3 >> r.lr >>
              c4 >> r.seconds) ||
            c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
            throw ParseError("bad training log row", lineno);
        log.push_back(r);
    }
    return log;
}

}  // namespace gfem
