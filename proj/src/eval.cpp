#include "gfem/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace gfem {

namespace {

Stat stat_of(const std::vector<double>& values) {
    Stat s;
    const double n = static_cast<double>(values.size());
    for (double v : values) s.mean += v;
    s.mean /= n;
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(var / n);
    return s;
}

void check_congruent(const std::vector<MatN3>& preds, const std::vector<MatN3>& targets) {
    if (preds.empty() || targets.empty()) throw DataError("no samples to evaluate");
    if (preds.size() != targets.size())
        throw ShapeError("prediction and target sample counts differ");
    for (std::size_t s = 0; s < preds.size(); ++s)
        if (preds[s].rows() != targets[s].rows() || preds[s].rows() == 0)
            throw ShapeError("sample " + std::to_string(s) + " node counts differ");
}

double median_of(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

MetricsReport compute_metrics(const std::vector<MatN3>& preds,
                              const std::vector<MatN3>& targets, double threshold) {
    check_congruent(preds, targets);
    if (!(threshold > 0.0)) throw InvalidParameterError("threshold must be positive");

    const std::size_t n_samples = preds.size();
    std::vector<double> mae_x(n_samples), mae_y(n_samples), mae_z(n_samples);
    std::vector<double> mee(n_samples), mape(n_samples);
    std::int64_t pooled_nodes = 0, euclid_ok = 0, abs_ok = 0;

    for (std::size_t s = 0; s < n_samples; ++s) {
        const MatN3 err = preds[s] - targets[s];
        const Eigen::ArrayXd norms = err.rowwise().norm().array();
        const Eigen::ArrayXd abs_pos = err.cwiseAbs().rowwise().mean().array();
        mae_x[s] = err.col(0).cwiseAbs().mean();
        mae_y[s] = err.col(1).cwiseAbs().mean();
        mae_z[s] = err.col(2).cwiseAbs().mean();
        mee[s] = norms.mean();
        mape[s] = abs_pos.mean();
        pooled_nodes += err.rows();
        euclid_ok += (norms <= threshold).count();
        abs_ok += (abs_pos <= threshold).count();
    }

    MetricsReport report;
    report.mae_x = stat_of(mae_x);
    report.mae_y = stat_of(mae_y);
    report.mae_z = stat_of(mae_z);
    report.mee = stat_of(mee);
    report.mean_abs_position_error = stat_of(mape);
    report.pct_euclidean_le_threshold =
        100.0 * static_cast<double>(euclid_ok) / static_cast<double>(pooled_nodes);
    report.pct_abs_position_le_threshold =
        100.0 * static_cast<double>(abs_ok) / static_cast<double>(pooled_nodes);
    report.threshold = threshold;
    return report;
}

TestSetStatistics compute_test_statistics(const std::vector<MatN3>& targets,
                                          const std::vector<MatN3>& preds) {
    check_congruent(preds, targets);

    std::vector<double> target_max(targets.size()), error_max(targets.size());
    for (std::size_t s = 0; s < targets.size(); ++s) {
        target_max[s] = targets[s].rowwise().norm().maxCoeff();
        error_max[s] = (preds[s] - targets[s]).rowwise().norm().maxCoeff();
    }

    TestSetStatistics stats;
    stats.delta_y_max = *std::max_element(target_max.begin(), target_max.end());
    stats.delta_y = stat_of(target_max);
    stats.max_euclidean_error = stat_of(error_max);
    return stats;
}

double dice(const VoxelPhantom& a, const VoxelPhantom& b, std::uint8_t label) {
    if (a.dims != b.dims) throw ShapeError("phantom grids have different dims");
    std::int64_t in_a = 0, in_b = 0, in_both = 0;
    for (std::size_t v = 0; v < a.labels.size(); ++v) {
        const bool pa = a.labels[v] == label;
        const bool pb = b.labels[v] == label;
        in_a += pa;
        in_b += pb;
        in_both += pa && pb;
    }
    if (in_a + in_b == 0) return 1.0;
    return 2.0 * static_cast<double>(in_both) / static_cast<double>(in_a + in_b);
}

double volume_loss(const VoxelPhantom& before, const VoxelPhantom& after, int label) {
    if ((before.spacing - after.spacing).cwiseAbs().maxCoeff() != 0.0)
        throw ShapeError("phantom voxel spacings differ");
    const auto matches = [label](std::uint8_t l) {
        return label == kTotalTissue ? l != kAirLabel : l == label;
    };
    std::int64_t n_before = 0, n_after = 0;
    for (std::uint8_t l : before.labels) n_before += matches(l);
    for (std::uint8_t l : after.labels) n_after += matches(l);

    const double v_before = static_cast<double>(n_before) * before.voxel_volume();
    const double v_after = static_cast<double>(n_after) * after.voxel_volume();
    if (v_before == 0.0)
        throw DataError("no voxels of the requested class in the reference phantom");
    return 100.0 * (v_before - v_after) / v_before;
}

TimingReport time_inference_vs_fe(const SurrogateModel& model, const TetMesh& mesh,
                                  const std::vector<DeformationSample>& test_samples,
                                  const MaterialSet& materials, const MatN3& direction,
                                  double max_force, int n_steps, int repetitions,
                                  const SolverOptions& options) {
    if (repetitions < 5)
        throw InvalidParameterError("timing needs at least 5 repetitions");
    if (test_samples.empty()) throw DataError("no samples to time");

    const MeshGraph graph = build_graph(mesh);
    std::vector<double> per_sample(test_samples.size());
    for (std::size_t s = 0; s < test_samples.size(); ++s) {
        forward(model, graph, test_samples[s].features);  // warm caches untimed
        std::vector<double> reps(repetitions);
        for (int r = 0; r < repetitions; ++r) {
            const double t0 = now_seconds();
            forward(model, graph, test_samples[s].features);
            reps[r] = now_seconds() - t0;
        }
        per_sample[s] = median_of(reps);
    }

    std::vector<double> fe_reps(repetitions);
    for (int r = 0; r < repetitions; ++r) {
        const double t0 = now_seconds();
        incremental_solve(mesh, materials, direction, max_force, n_steps, options);
        fe_reps[r] = now_seconds() - t0;
    }

    TimingReport report;
    report.inference_seconds = stat_of(per_sample);
    report.fe_seconds = median_of(fe_reps);
    report.speedup = report.fe_seconds / report.inference_seconds.mean;
    return report;
}

void write_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "experiment,mae_x_mm,mae_x_sd_mm,mae_y_mm,mae_y_sd_mm,mae_z_mm,mae_z_sd_mm,"
           "mee_mm,mee_sd_mm,pct_euclidean_le_threshold,mean_abs_position_error_mm,"
           "mean_abs_position_error_sd_mm,pct_abs_position_le_threshold,threshold_mm\n";
    out << std::setprecision(17);
    for (const auto& [name, r] : rows)
        out << name << ',' << r.mae_x.mean << ',' << r.mae_x.sd << ',' << r.mae_y.mean
            << ',' << r.mae_y.sd << ',' << r.mae_z.mean << ',' << r.mae_z.sd << ','
            << r.mee.mean << ',' << r.mee.sd << ',' << r.pct_euclidean_le_threshold << ','
            << r.mean_abs_position_error.mean << ',' << r.mean_abs_position_error.sd << ','
            << r.pct_abs_position_le_threshold << ',' << r.threshold << '\n';
    if (!out) throw IoError("failed writing " + path);
}

void write_timing_csv(const TimingReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "inference_mean_s,inference_sd_s,fe_seconds,speedup\n";
    out << std::setprecision(17) << report.inference_seconds.mean << ','
        << report.inference_seconds.sd << ',' << report.fe_seconds << ',' << report.speedup
        << '\n';
    if (!out) throw IoError("failed writing " + path);
}

void write_overlap_json(const std::map<std::string, double>& dice_by_class,
                        const std::map<std::string, double>& volume_loss_by_class,
                        const std::string& path) {
    nlohmann::json j;
    j["dice"] = dice_by_class;
    j["volume_loss_pct"] = volume_loss_by_class;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace gfem
