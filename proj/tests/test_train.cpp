#include "gfem/train.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "helpers.hpp"

using namespace gfem;
using namespace gfem::test;

namespace {

bool tensors_equal(const SurrogateModel& a, const SurrogateModel& b) {
    for (std::size_t l = 0; l < a.params.size(); ++l) {
        if ((a.params[l].w_self - b.params[l].w_self).cwiseAbs().maxCoeff() != 0.0)
            return false;
        if (a.params[l].w_neigh.size() > 0 &&
            (a.params[l].w_neigh - b.params[l].w_neigh).cwiseAbs().maxCoeff() != 0.0)
            return false;
        if ((a.params[l].bias - b.params[l].bias).cwiseAbs().maxCoeff() != 0.0) return false;
    }
    return true;
}

MatN7 random_features(int n, Rng& rng) {
    MatN7 f(n, 7);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < 7; ++c) f(r, c) = rng.uniform(-1.0, 1.0);
    return f;
}

// Targets are a fixed linear map of the raw features, so a single affine
// layer can reach zero error.
Eigen::Matrix<double, 3, 7> target_map() {
    Eigen::Matrix<double, 3, 7> a;
    a << 0.3, -0.1, 0.2, 0.05, -0.25, 0.15, 0.1,
        -0.2, 0.25, -0.05, 0.1, 0.3, -0.15, 0.05,
        0.1, 0.05, -0.3, 0.2, -0.1, 0.25, -0.2;
    return a;
}

std::vector<DeformationSample> linear_samples(int count, const MeshGraph& g,
                                              std::uint64_t seed) {
    const auto a = target_map();
    Rng rng(seed);
    std::vector<DeformationSample> samples;
    for (int k = 0; k < count; ++k) {
        DeformationSample s;
        s.features = random_features(g.n_nodes, rng);
        s.target = s.features * a.transpose();
        s.direction_id = k;
        s.step_id = 1;
        samples.push_back(std::move(s));
    }
    return samples;
}

std::vector<DeformationSample> noise_samples(int count, const MeshGraph& g,
                                             std::uint64_t seed) {
    Rng rng(seed);
    std::vector<DeformationSample> samples;
    for (int k = 0; k < count; ++k) {
        DeformationSample s;
        s.features = random_features(g.n_nodes, rng);
        s.target = MatN3(g.n_nodes, 3);
        for (int r = 0; r < g.n_nodes; ++r)
            for (int c = 0; c < 3; ++c) s.target(r, c) = rng.uniform(-1.0, 1.0);
        s.direction_id = k;
        s.step_id = 1;
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("mee loss matches hand-evaluated cases") {
    MatN3 target(2, 3);
    target << 1.0, 2.0, 3.0, -1.0, 0.5, 0.0;

    const MeeResult zero = mee_loss(target, target);
    CHECK(zero.value_mm == 0.0);
    CHECK((zero.grad.array() == 0.0).all());

    MatN3 offset = target;
    offset.col(0).array() += 1.0;
    const MeeResult one = mee_loss(offset, target);
    CHECK(one.value_mm == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(one.grad(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(one.grad(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(one.grad(0, 1) == 0.0);

    // Errors (3,4,0) and (0,0,0): MEE = (5 + 0)/2 = 2.5.
    MatN3 pred = target;
    pred(0, 0) += 3.0;
    pred(0, 1) += 4.0;
    const MeeResult hand = mee_loss(pred, target);
    CHECK(hand.value_mm == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(hand.grad(0, 0) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(hand.grad(0, 1) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(hand.grad(1, 0) == 0.0);

    CHECK_THROWS_AS(mee_loss(MatN3::Zero(2, 3), MatN3::Zero(3, 3)), ShapeError);
}

TEST_CASE("mee gradient matches finite differences away from the singularity") {
    Rng rng(31);
    MatN3 pred(10, 3), target(10, 3);
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < 3; ++c) {
            pred(r, c) = rng.uniform(-2.0, 2.0);
            target(r, c) = rng.uniform(2.5, 4.0);  // keeps every node error > 0.5
        }

    const MeeResult mee = mee_loss(pred, target);
    const double h = 1e-7;
    double max_rel = 0.0;
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < 3; ++c) {
            const double keep = pred(r, c);
            pred(r, c) = keep + h;
            const double lp = mee_loss(pred, target).value_mm;
            pred(r, c) = keep - h;
            const double lm = mee_loss(pred, target).value_mm;
            pred(r, c) = keep;
            const double fd = (lp - lm) / (2.0 * h);
            max_rel = std::max(max_rel, rel_err(fd, mee.grad(r, c), 1e-8));
        }
    CHECK(max_rel <= 1e-6);
}

TEST_CASE("adamw reproduces a hand-stepped scalar update") {
    // One step from zero moments, g = 0.5, lr = 0.005:
    //   m_hat = 0.5, v_hat = 0.25, step = lr * 0.5/(0.5 + 1e-8) = 0.0025/0.50000001
    const std::vector<LayerSpec> specs = {{LayerKind::Dense, 1, 3, Activation::None}};
    SurrogateModel model = init_params(specs, 1);
    model.params[0].w_self.setZero();
    model.params[0].w_self(0, 0) = 1.0;

    Gradients grads = zero_gradients(model);
    grads[0].w_self(0, 0) = 0.5;
    OptimizerState state = init_optimizer(model, 0.005);
    adamw_step(&model, grads, &state, 0.0);

    CHECK(state.step == 1);
    CHECK(model.params[0].w_self(0, 0) ==
          doctest::Approx(1.0 - 0.0025 / 0.50000001).epsilon(1e-14));
    // untouched entries keep their exact values under zero gradient + zero decay
    CHECK(model.params[0].w_self(1, 0) == 0.0);
    CHECK((model.params[0].bias.array() == 0.0).all());
}

TEST_CASE("weight decay alone shrinks parameters multiplicatively") {
    SurrogateModel model = init_params({{LayerKind::Dense, 1, 3, Activation::None}}, 2);
    const MatX before = model.params[0].w_self;
    OptimizerState state = init_optimizer(model, 0.005);
    adamw_step(&model, zero_gradients(model), &state, 0.01);
    const MatX want = before * (1.0 - 0.005 * 0.01);
    CHECK((model.params[0].w_self - want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("non-finite gradients abort the update") {
    SurrogateModel model = init_params({{LayerKind::Dense, 1, 3, Activation::None}}, 3);
    Gradients grads = zero_gradients(model);
    grads[0].w_self(0, 0) = std::numeric_limits<double>::quiet_NaN();
    OptimizerState state = init_optimizer(model, 0.005);
    CHECK_THROWS_AS(adamw_step(&model, grads, &state, 0.0), DataError);
}

TEST_CASE("plateau schedule reduces by 0.1 after five flat epochs") {
    PlateauSchedule s(0.005, 0.1, 5, 1e-8);
    CHECK(s.observe(1.0) == 0.005);
    for (int i = 0; i < 4; ++i) CHECK(s.observe(1.0) == 0.005);
    CHECK(s.observe(1.0) == 0.005 * 0.1);

    // counter restarted by the reduction: four more flats keep the new rate
    for (int i = 0; i < 4; ++i) CHECK(s.observe(1.0) == 0.005 * 0.1);
    CHECK(s.observe(1.0) == doctest::Approx(5e-5).epsilon(1e-12));
}

TEST_CASE("plateau schedule resets on improvement and floors at the minimum") {
    PlateauSchedule s(0.005, 0.1, 5, 1e-8);
    s.observe(1.0);
    for (int i = 0; i < 4; ++i) s.observe(1.0);
    CHECK(s.observe(0.5) == 0.005);  // improvement just before reduction
    for (int i = 0; i < 4; ++i) CHECK(s.observe(0.5) == 0.005);

    PlateauSchedule tiny(3e-8, 0.1, 2, 1e-8);
    tiny.observe(1.0);
    tiny.observe(1.0);
    CHECK(tiny.observe(1.0) == 1e-8);  // 3e-9 clamps up to the floor
    tiny.observe(1.0);
    CHECK(tiny.observe(1.0) == 1e-8);

    PlateauSchedule steady(0.005, 0.1, 3, 1e-8);
    double v = 10.0;
    for (int i = 0; i < 20; ++i) CHECK(steady.observe(v -= 0.5) == 0.005);
}

TEST_CASE("batching partitions the epoch") {
    const auto check_batches = [](int n, int k) {
        const auto batches = make_batches(n, k);
        const int size = (n + k - 1) / k;
        CHECK(static_cast<int>(batches.size()) <= k);
        std::set<int> seen;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            if (b + 1 < batches.size())
                CHECK(static_cast<int>(batches[b].size()) == size);
            for (int i : batches[b]) {
                CHECK(seen.insert(i).second);
                CHECK(i >= 0);
                CHECK(i < n);
            }
        }
        CHECK(static_cast<int>(seen.size()) == n);
    };
    check_batches(16, 8);
    check_batches(13, 8);
    check_batches(5, 8);
    check_batches(3, 2);
    check_batches(1, 8);
    CHECK_THROWS_AS(make_batches(0, 8), InvalidParameterError);
}

TEST_CASE("config validation lists every violation") {
    CHECK_NOTHROW(validate_config(TrainConfig{}));
    TrainConfig bad;
    bad.initial_lr = 0.0;
    bad.plateau_factor = 1.0;
    bad.plateau_patience = 0;
    bad.min_lr = 0.0;
    bad.dropout = 1.0;
    try {
        validate_config(bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.violations().size() == 5);
    }
}

TEST_CASE("normalization statistics are the population moments of the train split") {
    const MeshGraph g = ten_node_graph();
    std::vector<DeformationSample> samples(2);
    samples[0].features = MatN7::Constant(10, 7, 2.0);
    samples[1].features = MatN7::Constant(10, 7, 6.0);
    samples[0].features.col(3).setConstant(1.0);
    samples[1].features.col(3).setConstant(1.0);
    for (auto& s : samples) s.target = MatN3::Zero(10, 3);

    SurrogateModel model = init_params({{LayerKind::Dense, 7, 3, Activation::None}}, 4);
    set_normalization_stats(&model, samples);
    CHECK(model.feature_mean[0] == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(model.feature_std[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(model.feature_mean[3] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(model.feature_std[3] == 0.0);  // constant channel, forward treats as 1
}

TEST_CASE("zero max_epochs returns the initial model untouched") {
    const MeshGraph g = ten_node_graph();
    const SurrogateModel initial = init_params({{LayerKind::Dense, 7, 3, Activation::None}}, 5);
    TrainConfig config;
    config.max_epochs = 0;
    const FitResult r =
        fit(initial, g, linear_samples(4, g, 1), linear_samples(2, g, 2), config);
    CHECK(r.log.empty());
    CHECK(tensors_equal(r.model, initial));
}

TEST_CASE("empty splits are rejected") {
    const MeshGraph g = ten_node_graph();
    const SurrogateModel initial = init_params({{LayerKind::Dense, 7, 3, Activation::None}}, 5);
    try {
        fit(initial, g, {}, {}, TrainConfig{});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.violations().size() == 2);
    }
}

TEST_CASE("training is deterministic for a fixed seed and any worker count") {
    const MeshGraph g = ten_node_graph();
    const std::vector<LayerSpec> specs = {{LayerKind::GraphSage, 7, 8, Activation::Relu},
                                          {LayerKind::Dense, 8, 3, Activation::None}};
    const SurrogateModel initial = init_params(specs, 6);
    const auto train = linear_samples(8, g, 3);
    const auto val = linear_samples(3, g, 4);
    TrainConfig config;
    config.max_epochs = 5;
    config.seed = 42;

    const FitResult a = fit(initial, g, train, val, config, 1);
    const FitResult b = fit(initial, g, train, val, config, 1);
    const FitResult c = fit(initial, g, train, val, config, 3);

    REQUIRE(a.log.size() == b.log.size());
    REQUIRE(a.log.size() == c.log.size());
    for (std::size_t e = 0; e < a.log.size(); ++e) {
        CHECK(a.log[e].train_mee_mm == b.log[e].train_mee_mm);
        CHECK(a.log[e].val_mee_mm == b.log[e].val_mee_mm);
        CHECK(a.log[e].lr == b.log[e].lr);
        CHECK(a.log[e].train_mee_mm == c.log[e].train_mee_mm);
        CHECK(a.log[e].val_mee_mm == c.log[e].val_mee_mm);
    }
    CHECK(tensors_equal(a.model, b.model));
    CHECK(tensors_equal(a.model, c.model));
}

TEST_CASE("a linear target is learned to well under a thousandth of its scale") {
    const MeshGraph g = ten_node_graph();
    const SurrogateModel initial = init_params({{LayerKind::Dense, 7, 3, Activation::None}}, 7);
    const auto train = linear_samples(48, g, 5);
    const auto val = linear_samples(12, g, 6);

    double scale = 0.0;
    for (const auto& s : val) scale += s.target.rowwise().norm().mean();
    scale /= static_cast<double>(val.size());

    TrainConfig config;
    config.max_epochs = 200;
    config.seed = 7;
    config.weight_decay = 0.0;
    config.dropout = 0.0;
    const FitResult r = fit(initial, g, train, val, config);

    REQUIRE(!r.log.empty());
    CHECK(r.best_val_mee < 1e-3 * scale);

    // returned model really is the best checkpoint
    double recomputed = 0.0;
    for (const auto& s : val)
        recomputed += mee_loss(forward(r.model, g, s.features), s.target).value_mm;
    recomputed /= static_cast<double>(val.size());
    CHECK(recomputed == doctest::Approx(r.best_val_mee).epsilon(1e-12));

    double running_min = std::numeric_limits<double>::infinity();
    for (const auto& rec : r.log) running_min = std::min(running_min, rec.val_mee_mm);
    CHECK(r.best_val_mee >= running_min);
    CHECK(r.best_val_mee <= running_min + kImprovementDelta);
}

TEST_CASE("early stopping fires exactly at the patience limit") {
    const MeshGraph g = ten_node_graph();
    const SurrogateModel initial = init_params({{LayerKind::Dense, 7, 3, Activation::None}}, 8);
    TrainConfig config;
    config.max_epochs = 100;
    config.early_stop_patience = 4;
    config.initial_lr = 1e-300;  // updates too small to move the validation loss
    config.min_lr = 1e-300;
    config.dropout = 0.0;
    const FitResult r =
        fit(initial, g, noise_samples(6, g, 9), noise_samples(3, g, 10), config);

    REQUIRE(r.log.size() == 5);  // best at epoch 1, then exactly `patience` flat epochs
    CHECK(r.best_epoch == 1);
    CHECK(r.log.back().epoch - r.best_epoch == 4);

    int since_best = 0;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& rec : r.log) {
        if (rec.val_mee_mm < best - kImprovementDelta) {
            best = rec.val_mee_mm;
            since_best = 0;
        } else {
            ++since_best;
        }
        CHECK(since_best <= config.early_stop_patience);
    }
    CHECK(since_best == config.early_stop_patience);
}

TEST_CASE("training log round trips through csv") {
    const std::vector<EpochRecord> log = {{1, 0.5, 0.75, 0.005, 0.125},
                                          {2, 0.25, 0.5, 0.005, 0.03125},
                                          {3, 0.1234567890123456, 0.4, 0.0005, 1.5}};
    const std::string path = "test_train_log.csv";
    write_training_log(log, path);
    const auto back = read_training_log(path);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].epoch == log[i].epoch);
        CHECK(back[i].train_mee_mm == log[i].train_mee_mm);
        CHECK(back[i].val_mee_mm == log[i].val_mee_mm);
        CHECK(back[i].lr == log[i].lr);
        CHECK(back[i].seconds == log[i].seconds);
    }

    std::ofstream bad(path);
    bad << "epoch,train,val\n1,2,3\n";
    bad.close();
    CHECK_THROWS_AS(read_training_log(path), ParseError);
    std::filesystem::remove(path);
}

TEST_SUITE_END();
