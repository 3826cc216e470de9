#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <tuple>
#include <vector>

#include "gfem/core.hpp"
#include "gfem/fem.hpp"
#include "gfem/mesh.hpp"

namespace gfem {

using MatN7 = Eigen::Matrix<double, Eigen::Dynamic, 7>;

enum class DirectionKind { SurfaceNormal, RandomHemisphere };

// Entry 0 stands for per-node inward surface normals; the stored vector is
// the hemisphere axis. Remaining entries are shared random hemisphere vectors.
struct DirectionSet {
    Vec3 axis = Vec3(0, 0, -1);
    std::vector<Vec3> vectors;
    std::vector<DirectionKind> kinds;
    std::uint64_t seed = 0;

    int count() const { return static_cast<int>(vectors.size()); }
};

DirectionSet sample_directions(const Vec3& surface_normal_axis, int n_total,
                               std::uint64_t seed);

std::vector<LoadCase> build_load_cases(const TetMesh& mesh, const DirectionSet& directions,
                                       double max_force = 90.0, int n_steps = 30);

// rho = |F|, theta = arccos(Fz/rho) in [0, pi], phi = atan2(Fy, Fx) in (-pi, pi].
// The zero vector maps to (0, 0, 0).
std::tuple<double, double, double> cartesian_to_spherical(const Vec3& f);

// Columns: Fx, Fy, Fz (N), Frho (N), Ftheta, Fphi (rad), phys_prop.
// phys_prop: 0 fixed, 1 fat, 0.6 gland, 0.1 skin.
MatN7 assemble_features(const TetMesh& mesh, const LoadCase& load);

struct DeformationSample {
    MatN7 features;
    MatN3 target;  // mm
    int direction_id = 0;
    int step_id = 1;
};

struct GenerationFailure {
    int direction_id = 0;
    int step_id = 1;
    std::string message;
};

struct GenerationResult {
    std::vector<DeformationSample> samples;
    std::vector<GenerationFailure> failures;
};

// One sample per load case, targets from warm-started incremental statics.
// A failed step fails the remaining steps of its direction (they depend on
// its warm start); failures are recorded and excluded from the samples.
// Directions are independent and may be solved by several workers; the
// output ordering (direction-major, then step) does not depend on workers.
GenerationResult generate_dataset(const TetMesh& mesh, const MaterialSet& materials,
                                  const DirectionSet& directions, double max_force,
                                  int n_steps, int workers = 1,
                                  const SolverOptions& options = {});

struct SplitFractions {
    double train = 0.7;
    double val = 0.2;
    double test = 0.1;
};

struct SplitIndices {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
};

// Floor-rounded val/test sizes, remainder to train.
SplitIndices split_holdout(int n_samples, const SplitFractions& fractions,
                           std::uint64_t seed);

// Test = every sample at the held-out step; the rest split 80/20.
SplitIndices split_lodo(const std::vector<DeformationSample>& samples, int held_out_step,
                        std::uint64_t seed);

void write_sample(const DeformationSample& sample, std::ostream& out);
void write_sample(const DeformationSample& sample, const std::string& path);
DeformationSample read_sample(std::istream& in);
DeformationSample read_sample(const std::string& path);

struct DatasetManifest {
    std::string mesh_path;
    std::uint64_t seed = 0;
    double max_force = 90.0;
    int n_steps = 30;
    int n_directions = 40;
    Vec3 axis = Vec3(0, 0, -1);

    struct Entry {
        std::string file;
        int direction_id = 0;
        int step_id = 1;
        std::string status;  // "ok" or "failed"
        std::string error;
    };
    std::vector<Entry> entries;
};

void write_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Writes one .pgns file per sample plus manifest.json into the directory.
DatasetManifest write_dataset(const std::string& directory, const std::string& mesh_path,
                              const GenerationResult& result,
                              const DirectionSet& directions, double max_force,
                              int n_steps);

// Loads every "ok" entry, in manifest order.
std::vector<DeformationSample> load_dataset(const std::string& directory,
                                            const DatasetManifest& manifest);

}  // namespace gfem
