#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gfem/core.hpp"
#include "gfem/dataset.hpp"
#include "gfem/fem.hpp"
#include "gfem/gnn.hpp"
#include "gfem/mesh.hpp"
#include "gfem/voxel.hpp"

namespace gfem {

// Mean and population standard deviation over samples.
struct Stat {
    double mean = 0.0;
    double sd = 0.0;
};

struct MetricsReport {
    Stat mae_x;
    Stat mae_y;
    Stat mae_z;
    Stat mee;
    double pct_euclidean_le_threshold = 0.0;
    Stat mean_abs_position_error;
    double pct_abs_position_le_threshold = 0.0;
    double threshold = 1.0;  // mm
};

// Per-sample statistics are averaged over samples; the percentage columns
// pool every node of every sample and use inclusive thresholds.
MetricsReport compute_metrics(const std::vector<MatN3>& preds,
                              const std::vector<MatN3>& targets, double threshold = 1.0);

struct TestSetStatistics {
    double delta_y_max = 0.0;    // largest target displacement magnitude, mm
    Stat delta_y;                // per-sample max target magnitude
    Stat max_euclidean_error;    // per-sample max nodal prediction error
};

TestSetStatistics compute_test_statistics(const std::vector<MatN3>& targets,
                                          const std::vector<MatN3>& preds);

// 2|A∩B| / (|A|+|B|) for one label; 1.0 when both masks are empty.
double dice(const VoxelPhantom& a, const VoxelPhantom& b, std::uint8_t label);

// Pass as the label to aggregate every non-air voxel.
inline constexpr int kTotalTissue = -1;

// 100 * (V_before - V_after) / V_before; negative values mean volume gain.
double volume_loss(const VoxelPhantom& before, const VoxelPhantom& after, int label);

struct TimingReport {
    Stat inference_seconds;    // per test sample, median over repetitions
    double fe_seconds = 0.0;   // one full incremental solve, median over repetitions
    double speedup = 0.0;
};

TimingReport time_inference_vs_fe(const SurrogateModel& model, const TetMesh& mesh,
                                  const std::vector<DeformationSample>& test_samples,
                                  const MaterialSet& materials, const MatN3& direction,
                                  double max_force, int n_steps, int repetitions = 5,
                                  const SolverOptions& options = {});

// One CSV row per named experiment, columns in MetricsReport field order.
void write_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                       const std::string& path);

void write_timing_csv(const TimingReport& report, const std::string& path);

// {"dice": {class: value}, "volume_loss_pct": {class: value}}
void write_overlap_json(const std::map<std::string, double>& dice_by_class,
                        const std::map<std::string, double>& volume_loss_by_class,
                        const std::string& path);

}  // namespace gfem
