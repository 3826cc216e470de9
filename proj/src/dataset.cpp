#include "gfem/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <utility>

#include "gfem/binary_io.hpp"

namespace gfem {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Orthonormal frame with w as the third axis.
void hemisphere_frame(const Vec3& w, Vec3* t1, Vec3* t2) {
    int smallest = 0;
    for (int a = 1; a < 3; ++a)
        if (std::abs(w[a]) < std::abs(w[smallest])) smallest = a;
    Vec3 e = Vec3::Zero();
    e[smallest] = 1.0;
    *t1 = w.cross(e).normalized();
    *t2 = w.cross(*t1);
}

std::vector<int> free_surface_nodes(const TetMesh& mesh, const SurfaceInfo& surface) {
    std::vector<int> out;
    for (int i : surface.nodes)
        if (mesh.node_bc[i] == NodeBc::Free) out.push_back(i);
    return out;
}

}  // namespace

DirectionSet sample_directions(const Vec3& surface_normal_axis, int n_total,
                               std::uint64_t seed) {
    if (n_total < 1) throw InvalidParameterError("n_total must be >= 1");
    const double axis_norm = surface_normal_axis.norm();
    if (!(axis_norm > 1e-12)) throw InvalidParameterError("hemisphere axis is zero");

    DirectionSet set;
    set.axis = surface_normal_axis / axis_norm;
    set.seed = seed;
    set.vectors.reserve(n_total);
    set.kinds.reserve(n_total);

    set.vectors.push_back(set.axis);
    set.kinds.push_back(DirectionKind::SurfaceNormal);

    Vec3 t1, t2;
    hemisphere_frame(set.axis, &t1, &t2);
    Rng rng(seed);
    for (int i = 1; i < n_total; ++i) {
        const double cos_theta = rng.uniform();  // area-uniform on the hemisphere
        const double sin_theta = std::sqrt(std::max(0.0, 1.0 - cos_theta * cos_theta));
        const double phi = rng.uniform(0.0, 2.0 * kPi);
        const Vec3 d =
            cos_theta * set.axis + sin_theta * (std::cos(phi) * t1 + std::sin(phi) * t2);
        set.vectors.push_back(d.normalized());
        set.kinds.push_back(DirectionKind::RandomHemisphere);
    }
    return set;
}

std::vector<LoadCase> build_load_cases(const TetMesh& mesh, const DirectionSet& directions,
                                       double max_force, int n_steps) {
    if (n_steps < 1) throw InvalidParameterError("n_steps must be >= 1");
    if (!(max_force > 0.0)) throw InvalidParameterError("max_force must be positive");
    if (directions.count() < 1) throw InvalidParameterError("empty direction set");

    const SurfaceInfo surface = extract_surface(mesh);
    const std::vector<int> loaded = free_surface_nodes(mesh, surface);
    if (loaded.empty()) throw InvalidMeshError("mesh has no free surface nodes to load");

    std::vector<LoadCase> cases;
    cases.reserve(static_cast<std::size_t>(directions.count()) * n_steps);
    for (int d = 0; d < directions.count(); ++d) {
        for (int t = 1; t <= n_steps; ++t) {
            LoadCase lc;
            lc.direction_id = d;
            lc.step_id = t;
            lc.force = MatN3::Zero(mesh.node_count(), 3);
            const double per_node =
                max_force / loaded.size() * (static_cast<double>(t) / n_steps);
            for (int i : loaded) {
                const Vec3 dir = directions.kinds[d] == DirectionKind::SurfaceNormal
                                     ? Vec3(-surface.normal_of(i))
                                     : directions.vectors[d];
                lc.force.row(i) = per_node * dir;
            }
            cases.push_back(std::move(lc));
        }
    }
    return cases;
}

std::tuple<double, double, double> cartesian_to_spherical(const Vec3& f) {
    const double rho = f.norm();
    if (rho == 0.0) return {0.0, 0.0, 0.0};
    const double theta = std::acos(std::clamp(f.z() / rho, -1.0, 1.0));
    double phi = std::atan2(f.y(), f.x());
    if (phi == -kPi) phi = kPi;
    return {rho, theta, phi};
}

MatN7 assemble_features(const TetMesh& mesh, const LoadCase& load) {
    validate_load_case(mesh, load);
    MatN7 features(mesh.node_count(), 7);
    for (int i = 0; i < mesh.node_count(); ++i) {
        const Vec3 f = load.force.row(i);
        const auto [rho, theta, phi] = cartesian_to_spherical(f);
        double phys = 0.0;
        if (mesh.node_bc[i] == NodeBc::Fixed) {
            phys = 0.0;
        } else {
            switch (mesh.node_tissue[i]) {
                case Tissue::Fat: phys = 1.0; break;
                case Tissue::Gland: phys = 0.6; break;
                case Tissue::Skin: phys = 0.1; break;
                default: throw DataError("unknown tissue label at node " + std::to_string(i));
            }
        }
        features.row(i) << f.x(), f.y(), f.z(), rho, theta, phi, phys;
    }
    return features;
}

GenerationResult generate_dataset(const TetMesh& mesh, const MaterialSet& materials,
                                  const DirectionSet& directions, double max_force,
                                  int n_steps, int workers, const SolverOptions& options) {
    const std::vector<LoadCase> cases = build_load_cases(mesh, directions, max_force, n_steps);
    const FemSystem system(mesh, materials);
    const int n_dirs = directions.count();

    std::vector<GenerationResult> per_direction(n_dirs);
    parallel_for(static_cast<std::size_t>(n_dirs), workers, [&](std::size_t d) {
        GenerationResult& slot = per_direction[d];
        DisplacementField prev = DisplacementField::zero(mesh.node_count());
        for (int t = 1; t <= n_steps; ++t) {
            const LoadCase& lc = cases[d * n_steps + (t - 1)];
            try {
                prev = system.solve(lc.force, {}, options, &prev);
            } catch (const ConvergenceError& e) {
                slot.failures.push_back({lc.direction_id, t, e.what()});
                for (int rest = t + 1; rest <= n_steps; ++rest)
                    slot.failures.push_back({lc.direction_id, rest,
                                             "skipped: step " + std::to_string(t) +
                                                 " of this direction failed"});
                break;
            } catch (const ElementInversionError& e) {
                slot.failures.push_back({lc.direction_id, t, e.what()});
                for (int rest = t + 1; rest <= n_steps; ++rest)
                    slot.failures.push_back({lc.direction_id, rest,
                                             "skipped: step " + std::to_string(t) +
                                                 " of this direction failed"});
                break;
            }
            DeformationSample sample;
            sample.features = assemble_features(mesh, lc);
            sample.target = prev.u;
            sample.direction_id = lc.direction_id;
            sample.step_id = t;
            slot.samples.push_back(std::move(sample));
        }
    });

    GenerationResult merged;
    for (auto& slot : per_direction) {
        for (auto& s : slot.samples) merged.samples.push_back(std::move(s));
        for (auto& f : slot.failures) merged.failures.push_back(std::move(f));
    }
    return merged;
}

SplitIndices split_holdout(int n_samples, const SplitFractions& fractions,
                           std::uint64_t seed) {
    std::vector<std::string> violations;
    if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0)
        violations.push_back("split fractions must be non-negative");
    const double sum = fractions.train + fractions.val + fractions.test;
    if (std::abs(sum - 1.0) > 1e-9)
        violations.push_back("split fractions must sum to 1 (got " + std::to_string(sum) +
                             ")");
    if (!violations.empty()) throw ConfigError(violations);

    const int n_val = static_cast<int>(std::floor(fractions.val * n_samples));
    const int n_test = static_cast<int>(std::floor(fractions.test * n_samples));
    const int n_train = n_samples - n_val - n_test;
    if (fractions.train > 0 && n_train == 0)
        violations.push_back("train split is empty; dataset too small");
    if (fractions.val > 0 && n_val == 0)
        violations.push_back("validation split is empty; dataset too small");
    if (fractions.test > 0 && n_test == 0)
        violations.push_back("test split is empty; dataset too small");
    if (!violations.empty()) throw ConfigError(violations);

    std::vector<int> order(n_samples);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    shuffle_in_place(order, rng);

    SplitIndices out;
    out.train.assign(order.begin(), order.begin() + n_train);
    out.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    out.test.assign(order.begin() + n_train + n_val, order.end());
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

SplitIndices split_lodo(const std::vector<DeformationSample>& samples, int held_out_step,
                        std::uint64_t seed) {
    SplitIndices out;
    std::vector<int> rest;
    for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
        if (samples[i].step_id == held_out_step)
            out.test.push_back(i);
        else
            rest.push_back(i);
    }
    if (out.test.empty())
        throw ConfigError({"no samples with step_id " + std::to_string(held_out_step)});

    Rng rng(seed);
    shuffle_in_place(rest, rng);
    const int n_val = static_cast<int>(std::floor(0.2 * rest.size()));
    const int n_train = static_cast<int>(rest.size()) - n_val;
    out.train.assign(rest.begin(), rest.begin() + n_train);
    out.val.assign(rest.begin() + n_train, rest.end());
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    return out;
}

// ---------------------------------------------------------------------------
// Sample files: binary little-endian.
//   magic 'PGNS', version u32, node count u32,
//   N*7 f64 features (node-major), N*3 f64 targets (node-major),
//   direction_id u32, step_id u32.

namespace {
constexpr std::uint32_t kSampleVersion = 1;
}

void write_sample(const DeformationSample& sample, std::ostream& out) {
    if (sample.features.rows() != sample.target.rows())
        throw ShapeError("sample feature rows do not match target rows");
    bin::write_magic(out, "PGNS");
    bin::write_u32(out, kSampleVersion);
    bin::write_u32(out, static_cast<std::uint32_t>(sample.features.rows()));
    for (Eigen::Index i = 0; i < sample.features.rows(); ++i)
        for (int c = 0; c < 7; ++c) bin::write_f64(out, sample.features(i, c));
    for (Eigen::Index i = 0; i < sample.target.rows(); ++i)
        for (int c = 0; c < 3; ++c) bin::write_f64(out, sample.target(i, c));
    bin::write_u32(out, static_cast<std::uint32_t>(sample.direction_id));
    bin::write_u32(out, static_cast<std::uint32_t>(sample.step_id));
    if (!out) throw IoError("failed writing sample");
}

void write_sample(const DeformationSample& sample, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_sample(sample, out);
    if (!out) throw IoError("failed writing " + path);
}

DeformationSample read_sample(std::istream& in) {
    bin::expect_magic(in, "PGNS", "sample");
    const std::uint32_t version = bin::read_u32(in, "sample version");
    if (version != kSampleVersion)
        throw DataError("unsupported sample version " + std::to_string(version));
    const std::uint32_t n = bin::read_u32(in, "sample node count");
    DeformationSample sample;
    sample.features.resize(n, 7);
    sample.target.resize(n, 3);
    for (std::uint32_t i = 0; i < n; ++i)
        for (int c = 0; c < 7; ++c) sample.features(i, c) = bin::read_f64(in, "features");
    for (std::uint32_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) sample.target(i, c) = bin::read_f64(in, "targets");
    sample.direction_id = static_cast<int>(bin::read_u32(in, "direction_id"));
    sample.step_id = static_cast<int>(bin::read_u32(in, "step_id"));
    return sample;
}

DeformationSample read_sample(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_sample(in);
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
    nlohmann::json j;
    j["mesh"] = manifest.mesh_path;
    j["seed"] = manifest.seed;
    j["max_force_n"] = manifest.max_force;
    j["n_steps"] = manifest.n_steps;
    j["n_directions"] = manifest.n_directions;
    j["axis"] = {manifest.axis.x(), manifest.axis.y(), manifest.axis.z()};
    j["samples"] = nlohmann::json::array();
    for (const auto& e : manifest.entries) {
        nlohmann::json je;
        je["file"] = e.file;
        je["direction_id"] = e.direction_id;
        je["step_id"] = e.step_id;
        je["status"] = e.status;
        if (!e.error.empty()) je["error"] = e.error;
        j["samples"].push_back(je);
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + path);
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.mesh_path = j.at("mesh").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.max_force = j.at("max_force_n").get<double>();
        m.n_steps = j.at("n_steps").get<int>();
        m.n_directions = j.at("n_directions").get<int>();
        const auto axis = j.at("axis");
        m.axis = Vec3(axis.at(0).get<double>(), axis.at(1).get<double>(),
                      axis.at(2).get<double>());
        for (const auto& je : j.at("samples")) {
            DatasetManifest::Entry e;
            e.file = je.at("file").get<std::string>();
            e.direction_id = je.at("direction_id").get<int>();
            e.step_id = je.at("step_id").get<int>();
            e.status = je.at("status").get<std::string>();
            if (je.contains("error")) e.error = je.at("error").get<std::string>();
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path + ": " + e.what());
    }
    return m;
}

namespace {

std::string sample_file_name(int direction_id, int step_id) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "sample_d%03d_s%03d.pgns", direction_id, step_id);
    return buf;
}

}  // namespace

DatasetManifest write_dataset(const std::string& directory, const std::string& mesh_path,
                              const GenerationResult& result,
                              const DirectionSet& directions, double max_force,
                              int n_steps) {
    std::error_code ec;
    std::filesystem::create_directories(directory, ec);
    if (ec) throw IoError("cannot create directory " + directory + ": " + ec.message());

    DatasetManifest manifest;
    manifest.mesh_path = mesh_path;
    manifest.seed = directions.seed;
    manifest.max_force = max_force;
    manifest.n_steps = n_steps;
    manifest.n_directions = directions.count();
    manifest.axis = directions.axis;

    struct Slot {
        bool failed = false;
        const DeformationSample* sample = nullptr;
        const GenerationFailure* failure = nullptr;
    };
    std::map<std::pair<int, int>, Slot> slots;
    for (const auto& s : result.samples) slots[{s.direction_id, s.step_id}].sample = &s;
    for (const auto& f : result.failures) {
        Slot& slot = slots[{f.direction_id, f.step_id}];
        slot.failed = true;
        slot.failure = &f;
    }

    for (const auto& [key, slot] : slots) {
        DatasetManifest::Entry entry;
        entry.direction_id = key.first;
        entry.step_id = key.second;
        if (slot.failed) {
            entry.status = "failed";
            entry.error = slot.failure->message;
        } else {
            entry.status = "ok";
            entry.file = sample_file_name(key.first, key.second);
            write_sample(*slot.sample,
                         (std::filesystem::path(directory) / entry.file).string());
        }
        manifest.entries.push_back(std::move(entry));
    }

    write_manifest(manifest, (std::filesystem::path(directory) / "manifest.json").string());
    return manifest;
}

std::vector<DeformationSample> load_dataset(const std::string& directory,
                                            const DatasetManifest& manifest) {
    std::vector<DeformationSample> samples;
    for (const auto& e : manifest.entries) {
        if (e.status != "ok") continue;
        samples.push_back(
            read_sample((std::filesystem::path(directory) / e.file).string()));
    }
    return samples;
}

}  // namespace gfem
