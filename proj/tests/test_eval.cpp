#include "gfem/eval.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using namespace gfem;
using namespace gfem::test;

namespace {

MatN3 rows_of(std::initializer_list<Vec3> rows) {
    MatN3 m(static_cast<int>(rows.size()), 3);
    int r = 0;
    for (const Vec3& v : rows) m.row(r++) = v.transpose();
    return m;
}

VoxelPhantom flat_phantom(std::vector<std::uint8_t> labels) {
    VoxelPhantom p;
    p.dims = {static_cast<int>(labels.size()), 1, 1};
    p.spacing = Vec3(0.5, 0.5, 0.5);
    p.labels = std::move(labels);
    return p;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::istringstream in(line);
    std::string field;
    while (std::getline(in, field, ',')) fields.push_back(field);
    return fields;
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("zero error gives a zero report") {
    Rng rng(3);
    std::vector<MatN3> targets(2);
    for (auto& t : targets) {
        t = MatN3(4, 3);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 3; ++c) t(r, c) = rng.uniform(-5.0, 5.0);
    }
    const MetricsReport r = compute_metrics(targets, targets);
    for (const Stat& s : {r.mae_x, r.mae_y, r.mae_z, r.mee, r.mean_abs_position_error}) {
        CHECK(s.mean == 0.0);
        CHECK(s.sd == 0.0);
    }
    CHECK(r.pct_euclidean_le_threshold == 100.0);
    CHECK(r.pct_abs_position_le_threshold == 100.0);
    CHECK(r.threshold == 1.0);
}

TEST_CASE("uniform unit offset along x") {
    const MatN3 target = MatN3::Zero(4, 3);
    MatN3 pred = target;
    pred.col(0).array() += 1.0;

    const MetricsReport r = compute_metrics({pred}, {target});
    CHECK(r.mae_x.mean == 1.0);
    CHECK(r.mae_x.sd == 0.0);
    CHECK(r.mae_y.mean == 0.0);
    CHECK(r.mae_z.mean == 0.0);
    CHECK(r.mee.mean == 1.0);
    CHECK(r.mee.sd == 0.0);
    CHECK(r.mean_abs_position_error.mean == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(r.pct_euclidean_le_threshold == 100.0);  // inclusive at the boundary
    CHECK(r.pct_abs_position_le_threshold == 100.0);
}

TEST_CASE("mean euclidean error hand case") {
    // one node 5 mm off and one exact: per-sample mee 2.5; second sample exact
    const MatN3 target = MatN3::Zero(2, 3);
    const MatN3 pred = rows_of({Vec3(3.0, 4.0, 0.0), Vec3(0.0, 0.0, 0.0)});

    const MetricsReport r = compute_metrics({pred, target}, {target, target});
    CHECK(r.mee.mean == 1.25);
    CHECK(r.mee.sd == 1.25);
}

TEST_CASE("per sample stats average over samples") {
    const MatN3 target = MatN3::Zero(3, 3);
    MatN3 off2 = target, off4 = target;
    off2.col(0).array() += 2.0;
    off4.col(0).array() += 4.0;

    const MetricsReport r = compute_metrics({off2, off4}, {target, target});
    CHECK(r.mae_x.mean == 3.0);
    CHECK(r.mae_x.sd == 1.0);  // population sd of {2, 4}
    CHECK(r.mee.mean == 3.0);
    CHECK(r.mee.sd == 1.0);
}

TEST_CASE("pooled percentages use inclusive thresholds") {
    const MatN3 target = MatN3::Zero(3, 3);
    const MatN3 pred =
        rows_of({Vec3(0.5, 0.0, 0.0), Vec3(1.0, 0.0, 0.0), Vec3(1.5, 0.0, 0.0)});

    const MetricsReport r = compute_metrics({pred}, {target});
    CHECK(r.pct_euclidean_le_threshold == doctest::Approx(200.0 / 3.0).epsilon(1e-15));

    // abs position errors are {1/6, 1/3, 1/2}; threshold 1/3 keeps two of three
    const MetricsReport tight = compute_metrics({pred}, {target}, 1.0 / 3.0);
    CHECK(tight.pct_abs_position_le_threshold == doctest::Approx(200.0 / 3.0).epsilon(1e-15));
    CHECK(tight.pct_euclidean_le_threshold == 0.0);
    CHECK(tight.threshold == 1.0 / 3.0);
}

TEST_CASE("sample order does not change the report") {
    Rng rng(11);
    std::vector<MatN3> preds, targets;
    for (int s = 0; s < 3; ++s) {
        MatN3 t(5, 3), p(5, 3);
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 3; ++c) {
                t(r, c) = rng.uniform(-2.0, 2.0);
                p(r, c) = t(r, c) + rng.uniform(-1.0, 1.0);
            }
        targets.push_back(t);
        preds.push_back(p);
    }
    const MetricsReport a = compute_metrics(preds, targets);
    std::swap(preds[0], preds[2]);
    std::swap(targets[0], targets[2]);
    const MetricsReport b = compute_metrics(preds, targets);
    CHECK(a.pct_euclidean_le_threshold == b.pct_euclidean_le_threshold);
    CHECK(a.pct_abs_position_le_threshold == b.pct_abs_position_le_threshold);
    CHECK(a.mee.mean == b.mee.mean);
    CHECK(a.mee.sd == b.mee.sd);
}

TEST_CASE("metric inputs are validated") {
    const MatN3 a = MatN3::Zero(2, 3);
    const MatN3 b = MatN3::Zero(3, 3);
    CHECK_THROWS_AS(compute_metrics({a}, {a, a}), ShapeError);
    CHECK_THROWS_AS(compute_metrics({a}, {b}), ShapeError);
    CHECK_THROWS_AS(compute_metrics({}, {}), DataError);
    CHECK_THROWS_AS(compute_metrics({a}, {a}, 0.0), InvalidParameterError);
    CHECK_THROWS_AS(compute_test_statistics({a}, {b}), ShapeError);
    CHECK_THROWS_AS(compute_test_statistics({}, {}), DataError);
}

TEST_CASE("test set statistics summarize maxima") {
    const MatN3 target1 = rows_of({Vec3(3.0, 0.0, 0.0), Vec3(1.0, 0.0, 0.0)});
    const MatN3 target2 = rows_of({Vec3(0.0, 5.0, 0.0), Vec3(0.0, 2.0, 0.0)});
    MatN3 pred1 = target1, pred2 = target2;
    pred1(0, 2) += 2.0;
    pred2(1, 2) += 4.0;

    const TestSetStatistics s = compute_test_statistics({target1, target2}, {pred1, pred2});
    CHECK(s.delta_y_max == 5.0);
    CHECK(s.delta_y.mean == 4.0);
    CHECK(s.delta_y.sd == 1.0);
    CHECK(s.max_euclidean_error.mean == 3.0);
    CHECK(s.max_euclidean_error.sd == 1.0);
    CHECK(s.delta_y_max >= s.delta_y.mean);

    const TestSetStatistics exact = compute_test_statistics({target1}, {target1});
    CHECK(exact.max_euclidean_error.mean == 0.0);
    CHECK(exact.max_euclidean_error.sd == 0.0);
    CHECK(exact.delta_y.sd == 0.0);
}

TEST_CASE("dice overlap") {
    const VoxelPhantom a = flat_phantom({1, 1, 0, 2});
    CHECK(dice(a, a, 1) == 1.0);
    CHECK(dice(a, a, 0) == 1.0);
    CHECK(dice(a, a, 2) == 1.0);

    const VoxelPhantom b = flat_phantom({0, 1, 1, 2});
    CHECK(dice(a, b, 1) == 0.5);  // one shared of two each
    CHECK(dice(b, a, 1) == 0.5);

    const VoxelPhantom c = flat_phantom({0, 0, 1, 1});
    const VoxelPhantom d = flat_phantom({1, 1, 0, 0});
    CHECK(dice(c, d, 1) == 0.0);

    CHECK(dice(a, b, 3) == 1.0);  // label absent from both

    VoxelPhantom e = a;
    e.dims = {2, 2, 1};
    CHECK_THROWS_AS(dice(a, e, 1), ShapeError);
}

TEST_CASE("volume loss") {
    const VoxelPhantom before = flat_phantom({1, 1, 1, 1, 2, 2});
    CHECK(volume_loss(before, before, 1) == 0.0);
    CHECK(volume_loss(before, before, kTotalTissue) == 0.0);

    const VoxelPhantom after = flat_phantom({1, 1, 0, 0, 2, 0});
    CHECK(volume_loss(before, after, 1) == 50.0);
    CHECK(volume_loss(before, after, 2) == 50.0);
    CHECK(volume_loss(before, after, kTotalTissue) == 50.0);

    CHECK(volume_loss(after, before, 1) == -100.0);  // gain is negative

    CHECK_THROWS_AS(volume_loss(before, after, 3), DataError);

    VoxelPhantom stretched = after;
    stretched.spacing.x() = 1.0;
    CHECK_THROWS_AS(volume_loss(before, stretched, 1), ShapeError);
}

TEST_CASE("timing relations on a tiny fixture") {
    const TetMesh mesh = box_mesh(Vec3(10, 10, 10), 1, 1, 2);
    const std::vector<LayerSpec> specs = {
        {LayerKind::GraphSage, 7, 8, Activation::Relu},
        {LayerKind::Dense, 8, 3, Activation::None},
    };
    const SurrogateModel model = init_params(specs, 1);

    Rng rng(7);
    std::vector<DeformationSample> samples(2);
    for (auto& s : samples) {
        s.features = MatN7(mesh.node_count(), 7);
        for (int r = 0; r < mesh.node_count(); ++r)
            for (int c = 0; c < 7; ++c) s.features(r, c) = rng.uniform(-1.0, 1.0);
        s.target = MatN3::Zero(mesh.node_count(), 3);
    }

    MatN3 direction = MatN3::Zero(mesh.node_count(), 3);
    direction(1, 2) = -1.0;  // free corner node
    const MaterialSet materials = MaterialSet::soft_tissue_defaults();

    const TimingReport r =
        time_inference_vs_fe(model, mesh, samples, materials, direction, 0.01, 2, 5);
    CHECK(r.inference_seconds.mean > 0.0);
    CHECK(r.fe_seconds > 0.0);
    CHECK(r.speedup == r.fe_seconds / r.inference_seconds.mean);

    const TimingReport again =
        time_inference_vs_fe(model, mesh, samples, materials, direction, 0.01, 2, 5);
    CHECK(again.fe_seconds / r.fe_seconds < 3.0);
    CHECK(r.fe_seconds / again.fe_seconds < 3.0);

    CHECK_THROWS_AS(
        time_inference_vs_fe(model, mesh, samples, materials, direction, 0.01, 2, 4),
        InvalidParameterError);
    CHECK_THROWS_AS(
        time_inference_vs_fe(model, mesh, {}, materials, direction, 0.01, 2, 5),
        DataError);
}

TEST_CASE("metrics csv round trips through text") {
    const std::string dir = "eval_csv_tmp";
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/metrics.csv";

    MetricsReport r;
    r.mae_x = {1.0 / 3.0, 0.25};
    r.mae_y = {0.5, 0.0};
    r.mae_z = {2.0, 0.125};
    r.mee = {1.0 / 7.0, 1e-300};
    r.mean_abs_position_error = {0.1, 0.2};
    r.pct_euclidean_le_threshold = 200.0 / 3.0;
    r.pct_abs_position_le_threshold = 100.0;
    r.threshold = 1.0;
    write_metrics_csv({{"holdout", r}, {"step-extrapolation", r}}, path);

    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line ==
          "experiment,mae_x_mm,mae_x_sd_mm,mae_y_mm,mae_y_sd_mm,mae_z_mm,mae_z_sd_mm,"
          "mee_mm,mee_sd_mm,pct_euclidean_le_threshold,mean_abs_position_error_mm,"
          "mean_abs_position_error_sd_mm,pct_abs_position_le_threshold,threshold_mm");

    REQUIRE(std::getline(in, line));
    const auto fields = split_csv_line(line);
    REQUIRE(fields.size() == 14);
    CHECK(fields[0] == "holdout");
    CHECK(std::stod(fields[1]) == r.mae_x.mean);  // full precision round trip
    CHECK(std::stod(fields[7]) == r.mee.mean);
    CHECK(std::stod(fields[8]) == r.mee.sd);
    CHECK(std::stod(fields[9]) == r.pct_euclidean_le_threshold);

    REQUIRE(std::getline(in, line));
    CHECK(split_csv_line(line)[0] == "step-extrapolation");
    CHECK_FALSE(std::getline(in, line));

    std::filesystem::remove_all(dir);
}

TEST_CASE("timing csv and overlap json have stable layouts") {
    const std::string dir = "eval_report_tmp";
    std::filesystem::create_directories(dir);

    TimingReport t;
    t.inference_seconds = {1.0 / 3000.0, 1e-6};
    t.fe_seconds = 2.5;
    t.speedup = t.fe_seconds / t.inference_seconds.mean;
    const std::string tpath = dir + "/timing.csv";
    write_timing_csv(t, tpath);

    std::ifstream in(tpath);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "inference_mean_s,inference_sd_s,fe_seconds,speedup");
    REQUIRE(std::getline(in, line));
    const auto fields = split_csv_line(line);
    REQUIRE(fields.size() == 4);
    CHECK(std::stod(fields[0]) == t.inference_seconds.mean);
    CHECK(std::stod(fields[3]) == t.speedup);

    const std::string jpath = dir + "/overlap.json";
    write_overlap_json({{"fat", 0.97}, {"gland", 0.92}}, {{"total", -1.5}}, jpath);
    std::ifstream jin(jpath);
    nlohmann::json j;
    jin >> j;
    CHECK(j.at("dice").at("fat").get<double>() == 0.97);
    CHECK(j.at("dice").at("gland").get<double>() == 0.92);
    CHECK(j.at("volume_loss_pct").at("total").get<double>() == -1.5);

    std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
