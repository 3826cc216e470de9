#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gfem/dataset.hpp"
#include "gfem/eval.hpp"
#include "gfem/fem.hpp"
#include "gfem/gnn.hpp"
#include "gfem/mesh.hpp"
#include "gfem/train.hpp"
#include "gfem/voxel.hpp"

using namespace gfem;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion =
    "graphfem 1.0.0\n"
    "artifact formats:\n"
    "  tetmesh v1        mesh (text)\n"
    "  dispfield v1      displacement field (text)\n"
    "  PGNS v1           deformation sample (binary)\n"
    "  PGNM v1           model checkpoint (binary)\n"
    "  PGVX v1           voxel phantom (binary)\n"
    "  manifest v1       dataset manifest (JSON)\n"
    "  csv v1            training log / metrics / timing tables";

void log_line(const std::string& message) { std::cerr << "graphfem: " << message << "\n"; }

void ensure_parent(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

// Collects every violation before throwing, so a bad config reports all of
// its problems in one pass.
class ConfigReader {
public:
    explicit ConfigReader(json j) : j_(std::move(j)) {}

    void add_problem(const std::string& message) { problems_.push_back(message); }

    void finish() const {
        if (!problems_.empty()) throw ConfigError(problems_);
    }

    bool has(const char* key) const { return j_.contains(key); }

    std::string output_file(const char* key) { return str(key); }

    std::string output_file(const char* key, const std::string& fallback) {
        return j_.contains(key) ? str(key) : fallback;
    }

    std::string input_file(const char* key) {
        const std::string path = str(key);
        if (!path.empty() && !fs::exists(path))
            add_problem(std::string(key) + ": file does not exist: " + path);
        return path;
    }

    std::string input_dir(const char* key) {
        const std::string path = str(key);
        if (!path.empty() && !fs::is_directory(path))
            add_problem(std::string(key) + ": directory does not exist: " + path);
        return path;
    }

    std::uint64_t seed() {
        if (!j_.contains("seed")) {
            add_problem("seed: required (runs are never seeded from the clock)");
            return 0;
        }
        if (!j_["seed"].is_number_integer() && !j_["seed"].is_number_unsigned()) {
            add_problem("seed: must be an integer");
            return 0;
        }
        return j_["seed"].get<std::uint64_t>();
    }

    int workers() {
        const int n = integer("workers", 1);
        if (n < 1) add_problem("workers: must be at least 1");
        return std::max(n, 1);
    }

    double number(const char* key) {
        if (!j_.contains(key)) {
            add_problem(std::string(key) + ": required");
            return 0.0;
        }
        return number(key, 0.0);
    }

    double number(const char* key, double fallback) {
        if (!j_.contains(key)) return fallback;
        if (!j_[key].is_number()) {
            add_problem(std::string(key) + ": must be a number");
            return fallback;
        }
        return j_[key].get<double>();
    }

    int integer(const char* key) {
        if (!j_.contains(key)) {
            add_problem(std::string(key) + ": required");
            return 0;
        }
        return integer(key, 0);
    }

    int integer(const char* key, int fallback) {
        if (!j_.contains(key)) return fallback;
        if (!j_[key].is_number_integer()) {
            add_problem(std::string(key) + ": must be an integer");
            return fallback;
        }
        return j_[key].get<int>();
    }

    Vec3 axis() {
        if (!j_.contains("axis")) return Vec3(0, 0, -1);
        const json& a = j_["axis"];
        if (!a.is_array() || a.size() != 3 || !a[0].is_number() || !a[1].is_number() ||
            !a[2].is_number()) {
            add_problem("axis: must be an array of 3 numbers");
            return Vec3(0, 0, -1);
        }
        const Vec3 v(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
        if (v.norm() == 0.0) add_problem("axis: must be nonzero");
        return v;
    }

    json section(const char* key) {
        if (!j_.contains(key)) return json::object();
        if (!j_[key].is_object()) {
            add_problem(std::string(key) + ": must be an object");
            return json::object();
        }
        return j_[key];
    }

    double nested_number(const json& s, const char* name, const char* key, double fallback) {
        if (!s.contains(key)) return fallback;
        if (!s[key].is_number()) {
            add_problem(std::string(name) + "." + key + ": must be a number");
            return fallback;
        }
        return s[key].get<double>();
    }

    int nested_integer(const json& s, const char* name, const char* key, int fallback) {
        if (!s.contains(key)) return fallback;
        if (!s[key].is_number_integer()) {
            add_problem(std::string(name) + "." + key + ": must be an integer");
            return fallback;
        }
        return s[key].get<int>();
    }

    std::string nested_string(const json& s, const char* name, const char* key,
                              const std::string& fallback) {
        if (!s.contains(key)) return fallback;
        if (!s[key].is_string()) {
            add_problem(std::string(name) + "." + key + ": must be a string");
            return fallback;
        }
        return s[key].get<std::string>();
    }

    std::array<int, 3> grid_dims(const json& s, const char* name,
                                 const std::array<int, 3>& fallback) {
        if (!s.contains("grid_dims")) return fallback;
        const json& d = s["grid_dims"];
        if (!d.is_array() || d.size() != 3 || !d[0].is_number_integer() ||
            !d[1].is_number_integer() || !d[2].is_number_integer()) {
            add_problem(std::string(name) + ".grid_dims: must be an array of 3 integers");
            return fallback;
        }
        std::array<int, 3> dims{d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
        if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
            add_problem(std::string(name) + ".grid_dims: entries must be positive");
        return dims;
    }

private:
    std::string str(const char* key) {
        if (!j_.contains(key)) {
            add_problem(std::string(key) + ": required");
            return "";
        }
        if (!j_[key].is_string()) {
            add_problem(std::string(key) + ": must be a string path");
            return "";
        }
        return j_[key].get<std::string>();
    }

    json j_;
    std::vector<std::string> problems_;
};

// ---------------------------------------------------------------------------
// Nested config sections

struct ModelSpec {
    std::vector<LayerSpec> layers;
    double dropout = 0.1;
};

ModelSpec parse_model(ConfigReader& cfg, const json& m) {
    ModelSpec spec;
    spec.dropout = cfg.nested_number(m, "model", "dropout", 0.1);

    if (!m.contains("layers")) {
        const int hidden = cfg.nested_integer(m, "model", "hidden_dim", 64);
        const int n_sage = cfg.nested_integer(m, "model", "n_sage", 3);
        const int n_gconv = cfg.nested_integer(m, "model", "n_gconv", 2);
        if (hidden < 1 || n_sage < 0 || n_gconv < 0 || n_sage + n_gconv < 1) {
            cfg.add_problem("model: hidden_dim must be positive and at least one "
                            "message-passing layer is required");
            return spec;
        }
        spec.layers = default_architecture(7, hidden, n_sage, n_gconv);
        return spec;
    }

    const json& layers = m["layers"];
    if (!layers.is_array() || layers.empty()) {
        cfg.add_problem("model.layers: must be a non-empty array");
        return spec;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string where = "model.layers[" + std::to_string(i) + "]";
        const json& l = layers[i];
        if (!l.is_object()) {
            cfg.add_problem(where + ": must be an object");
            continue;
        }
        LayerSpec ls;
        const std::string kind = cfg.nested_string(l, where.c_str(), "kind", "");
        if (kind == "sage" || kind == "graphsage")
            ls.kind = LayerKind::GraphSage;
        else if (kind == "gconv" || kind == "graphconv")
            ls.kind = LayerKind::GraphConv;
        else if (kind == "dense")
            ls.kind = LayerKind::Dense;
        else
            cfg.add_problem(where + ".kind: expected sage, gconv, or dense");
        ls.in_dim = cfg.nested_integer(l, where.c_str(), "in", 0);
        ls.out_dim = cfg.nested_integer(l, where.c_str(), "out", 0);
        const std::string act = cfg.nested_string(l, where.c_str(), "activation", "none");
        if (act == "relu")
            ls.activation = Activation::Relu;
        else if (act != "none")
            cfg.add_problem(where + ".activation: expected relu or none");
        spec.layers.push_back(ls);
    }
    return spec;
}

struct SplitSpec {
    std::string mode = "holdout";
    SplitFractions fractions;
    int held_out_step = 0;
};

SplitSpec parse_split(ConfigReader& cfg, const json& s) {
    SplitSpec spec;
    spec.mode = cfg.nested_string(s, "split", "mode", "holdout");
    if (spec.mode != "holdout" && spec.mode != "lodo")
        cfg.add_problem("split.mode: expected holdout or lodo");
    spec.fractions.train = cfg.nested_number(s, "split", "train", spec.fractions.train);
    spec.fractions.val = cfg.nested_number(s, "split", "val", spec.fractions.val);
    spec.fractions.test = cfg.nested_number(s, "split", "test", spec.fractions.test);
    spec.held_out_step = cfg.nested_integer(s, "split", "held_out_step", 0);
    if (spec.mode == "lodo" && spec.held_out_step < 1)
        cfg.add_problem("split.held_out_step: required and positive in lodo mode");
    return spec;
}

SplitIndices make_split(const SplitSpec& spec, const std::vector<DeformationSample>& samples,
                        std::uint64_t seed) {
    if (spec.mode == "lodo") return split_lodo(samples, spec.held_out_step, seed);
    return split_holdout(static_cast<int>(samples.size()), spec.fractions, seed);
}

TrainConfig parse_train(ConfigReader& cfg, const json& t) {
    TrainConfig c;
    c.initial_lr = cfg.nested_number(t, "train", "initial_lr", c.initial_lr);
    c.plateau_factor = cfg.nested_number(t, "train", "plateau_factor", c.plateau_factor);
    c.plateau_patience = cfg.nested_integer(t, "train", "plateau_patience", c.plateau_patience);
    c.min_lr = cfg.nested_number(t, "train", "min_lr", c.min_lr);
    c.early_stop_patience =
        cfg.nested_integer(t, "train", "early_stop_patience", c.early_stop_patience);
    c.n_batches = cfg.nested_integer(t, "train", "n_batches", c.n_batches);
    c.max_epochs = cfg.nested_integer(t, "train", "max_epochs", c.max_epochs);
    c.weight_decay = cfg.nested_number(t, "train", "weight_decay", c.weight_decay);
    return c;
}

// ---------------------------------------------------------------------------
// Shared loading steps

TetMesh load_mesh_checked(const std::string& path) {
    const TetMesh mesh = read_mesh(path);
    log_line("mesh: " + std::to_string(mesh.node_count()) + " nodes, " +
             std::to_string(mesh.tet_count()) + " tets (" + path + ")");
    return mesh;
}

std::vector<DeformationSample> load_samples_checked(const std::string& dir,
                                                    const TetMesh& mesh) {
    const DatasetManifest manifest = read_manifest(dir + "/manifest.json");
    std::vector<DeformationSample> samples = load_dataset(dir, manifest);
    if (samples.empty()) throw DataError("dataset has no usable samples: " + dir);
    if (samples.front().features.rows() != mesh.node_count())
        throw ShapeError("dataset samples have " +
                         std::to_string(samples.front().features.rows()) +
                         " nodes but the mesh has " + std::to_string(mesh.node_count()));
    log_line("dataset: " + std::to_string(samples.size()) + " samples (" + dir + ")");
    return samples;
}

std::string sample_file_name(const char* prefix, int direction_id, int step_id) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_d%03d_s%03d.dispfield", prefix, direction_id, step_id);
    return buf;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_phantom(ConfigReader& cfg) {
    const std::string mesh_path = cfg.output_file("mesh");
    const std::string phantom_path = cfg.output_file("phantom_file");
    const std::uint64_t seed = cfg.seed();
    const int workers = cfg.workers();
    const json ph = cfg.section("phantom");

    HemisphereSpec spec;
    spec.radius_mm = cfg.nested_number(ph, "phantom", "radius_mm", spec.radius_mm);
    spec.target_edge_mm = cfg.nested_number(ph, "phantom", "target_edge_mm", spec.target_edge_mm);
    spec.skin_thickness_mm =
        cfg.nested_number(ph, "phantom", "skin_thickness_mm", spec.skin_thickness_mm);
    spec.gland_radius_mm =
        cfg.nested_number(ph, "phantom", "gland_radius_mm", spec.gland_radius_mm);
    const std::array<int, 3> dims = cfg.grid_dims(ph, "phantom", {64, 64, 64});
    cfg.finish();

    spec.seed = seed;
    const TetMesh mesh = generate_hemisphere_phantom(spec);
    ensure_parent(mesh_path);
    write_mesh(mesh, mesh_path);

    Vec3 lo, hi;
    mesh.bounding_box(lo, hi);
    const VoxelPhantom raster = rasterize(mesh, grid_covering(lo, hi, dims), workers);
    ensure_parent(phantom_path);
    write_phantom(raster, phantom_path);

    log_line("phantom: " + std::to_string(mesh.node_count()) + " nodes, " +
             std::to_string(mesh.tet_count()) + " tets -> " + mesh_path);
    log_line("phantom: " + std::to_string(raster.voxel_count()) + " voxels -> " +
             phantom_path);
    return 0;
}

int cmd_dataset(ConfigReader& cfg) {
    const std::string mesh_path = cfg.input_file("mesh");
    const std::string out_dir = cfg.output_file("dataset_dir");
    const std::uint64_t seed = cfg.seed();
    const int workers = cfg.workers();
    const double max_force = cfg.number("max_force");
    const int n_steps = cfg.integer("n_steps");
    const int n_directions = cfg.integer("n_directions");
    const Vec3 axis = cfg.axis();
    if (cfg.has("max_force") && !(max_force > 0.0))
        cfg.add_problem("max_force: must be positive");
    if (cfg.has("n_steps") && n_steps < 1) cfg.add_problem("n_steps: must be at least 1");
    if (cfg.has("n_directions") && n_directions < 1)
        cfg.add_problem("n_directions: must be at least 1");
    cfg.finish();

    const TetMesh mesh = load_mesh_checked(mesh_path);
    const DirectionSet directions = sample_directions(axis, n_directions, seed);
    const GenerationResult result =
        generate_dataset(mesh, MaterialSet::soft_tissue_defaults(), directions, max_force,
                         n_steps, workers);
    fs::create_directories(out_dir);
    write_dataset(out_dir, mesh_path, result, directions, max_force, n_steps);

    log_line("dataset: " + std::to_string(result.samples.size()) + " samples, " +
             std::to_string(result.failures.size()) + " failed steps -> " + out_dir);
    for (const GenerationFailure& f : result.failures)
        log_line("dataset: direction " + std::to_string(f.direction_id) + " step " +
                 std::to_string(f.step_id) + " failed: " + f.message);
    return 0;
}

int cmd_train(ConfigReader& cfg) {
    const std::string mesh_path = cfg.input_file("mesh");
    const std::string data_dir = cfg.input_dir("dataset_dir");
    const std::string checkpoint_path = cfg.output_file("checkpoint");
    const std::string out_dir = cfg.output_file("output_dir");
    const std::uint64_t seed = cfg.seed();
    const int workers = cfg.workers();
    const ModelSpec model_spec = parse_model(cfg, cfg.section("model"));
    const SplitSpec split_spec = parse_split(cfg, cfg.section("split"));
    TrainConfig train_config = parse_train(cfg, cfg.section("train"));
    cfg.finish();

    train_config.seed = seed;
    train_config.dropout = model_spec.dropout;
    validate_architecture(model_spec.layers, 7);
    validate_config(train_config);

    const TetMesh mesh = load_mesh_checked(mesh_path);
    const std::vector<DeformationSample> samples = load_samples_checked(data_dir, mesh);
    const SplitIndices split = make_split(split_spec, samples, seed);
    if (split.train.empty() || split.val.empty())
        throw DataError("split leaves the train or validation set empty");

    std::vector<DeformationSample> train_set, val_set;
    for (int i : split.train) train_set.push_back(samples[static_cast<std::size_t>(i)]);
    for (int i : split.val) val_set.push_back(samples[static_cast<std::size_t>(i)]);
    log_line("split (" + split_spec.mode + "): " + std::to_string(split.train.size()) +
             " train / " + std::to_string(split.val.size()) + " val / " +
             std::to_string(split.test.size()) + " test");

    const MeshGraph graph = build_graph(mesh);
    const SurrogateModel initial = init_params(model_spec.layers, seed, model_spec.dropout);
    log_line("model: " + std::to_string(initial.parameter_count()) + " parameters");

    const FitResult result = fit(initial, graph, train_set, val_set, train_config, workers);

    ensure_parent(checkpoint_path);
    write_checkpoint(result.model, checkpoint_path);
    fs::create_directories(out_dir);
    const std::string log_path = out_dir + "/training_log.csv";
    write_training_log(result.log, log_path);

    log_line("train: " + std::to_string(result.log.size()) + " epochs, best epoch " +
             std::to_string(result.best_epoch) + " (val mee " +
             std::to_string(result.best_val_mee) + " mm) -> " + checkpoint_path);
    return 0;
}

int cmd_predict(ConfigReader& cfg) {
    const std::string mesh_path = cfg.input_file("mesh");
    const std::string data_dir = cfg.input_dir("dataset_dir");
    const std::string checkpoint_path = cfg.input_file("checkpoint");
    const std::string out_dir = cfg.output_file("output_dir");
    cfg.finish();

    const TetMesh mesh = load_mesh_checked(mesh_path);
    const std::vector<DeformationSample> samples = load_samples_checked(data_dir, mesh);
    const Checkpoint checkpoint = read_checkpoint(checkpoint_path);
    const MeshGraph graph = build_graph(mesh);

    fs::create_directories(out_dir);
    for (const DeformationSample& sample : samples) {
        DisplacementField field;
        field.u = forward(checkpoint.model, graph, sample.features);
        write_displacement_field(
            field, out_dir + "/" + sample_file_name("pred", sample.direction_id, sample.step_id));
    }
    log_line("predict: " + std::to_string(samples.size()) + " displacement fields -> " +
             out_dir);
    return 0;
}

int cmd_evaluate(ConfigReader& cfg) {
    const std::string mesh_path = cfg.input_file("mesh");
    const std::string data_dir = cfg.input_dir("dataset_dir");
    const std::string checkpoint_path = cfg.input_file("checkpoint");
    const std::string out_dir = cfg.output_file("output_dir");
    const std::string phantom_path = cfg.has("phantom_file") ? cfg.input_file("phantom_file") : "";
    const std::uint64_t seed = cfg.seed();
    const int workers = cfg.workers();
    const double threshold = cfg.number("threshold_mm", 1.0);
    const SplitSpec split_spec = parse_split(cfg, cfg.section("split"));
    cfg.finish();

    const TetMesh mesh = load_mesh_checked(mesh_path);
    const std::vector<DeformationSample> samples = load_samples_checked(data_dir, mesh);
    const Checkpoint checkpoint = read_checkpoint(checkpoint_path);
    const MeshGraph graph = build_graph(mesh);

    const SplitIndices split = make_split(split_spec, samples, seed);
    if (split.test.empty()) throw DataError("split leaves the test set empty");

    std::vector<MatN3> preds, targets;
    for (int i : split.test) {
        const DeformationSample& s = samples[static_cast<std::size_t>(i)];
        preds.push_back(forward(checkpoint.model, graph, s.features));
        targets.push_back(s.target);
    }

    const MetricsReport report = compute_metrics(preds, targets, threshold);
    const TestSetStatistics stats = compute_test_statistics(targets, preds);
    const std::string row_name = split_spec.mode == "lodo"
                                     ? "lodo-step-" + std::to_string(split_spec.held_out_step)
                                     : "holdout";
    fs::create_directories(out_dir);
    write_metrics_csv({{row_name, report}}, out_dir + "/metrics.csv");

    log_line("evaluate (" + row_name + "): " + std::to_string(split.test.size()) +
             " test samples, mee " + std::to_string(report.mee.mean) + " +- " +
             std::to_string(report.mee.sd) + " mm, " +
             std::to_string(report.pct_euclidean_le_threshold) + "% <= " +
             std::to_string(threshold) + " mm");
    log_line("evaluate: target magnitude max " + std::to_string(stats.delta_y_max) +
             " mm, per-sample max " + std::to_string(stats.delta_y.mean) + " +- " +
             std::to_string(stats.delta_y.sd) + " mm");

    if (!phantom_path.empty()) {
        const VoxelPhantom uncompressed = read_phantom(phantom_path);

        // reconstruct the deformation with the largest target displacement
        std::size_t pick = 0;
        double best = -1.0;
        for (std::size_t k = 0; k < targets.size(); ++k) {
            const double magnitude = targets[k].rowwise().norm().maxCoeff();
            if (magnitude > best) {
                best = magnitude;
                pick = k;
            }
        }
        DisplacementField fe_field, pred_field;
        fe_field.u = targets[pick];
        pred_field.u = preds[pick];

        const GridSpec out_grid = default_output_grid(uncompressed, mesh, fe_field);
        const VoxelPhantom fe_recon =
            reconstruct_compressed(uncompressed, mesh, fe_field, out_grid, workers);
        const VoxelPhantom pred_recon =
            reconstruct_compressed(uncompressed, mesh, pred_field, out_grid, workers);

        std::map<std::string, double> dice_by_class, loss_by_class;
        for (std::uint8_t label : {std::uint8_t{1}, std::uint8_t{2}, std::uint8_t{3}}) {
            dice_by_class[label_name(label)] = dice(fe_recon, pred_recon, label);
            loss_by_class[label_name(label)] = volume_loss(uncompressed, pred_recon, label);
        }
        loss_by_class["total"] = volume_loss(uncompressed, pred_recon, kTotalTissue);
        write_overlap_json(dice_by_class, loss_by_class, out_dir + "/overlap.json");
        log_line("evaluate: overlap for test sample " + std::to_string(pick) + " (|u|max " +
                 std::to_string(best) + " mm) -> " + out_dir + "/overlap.json");
    }
    return 0;
}

int cmd_reconstruct(ConfigReader& cfg) {
    const std::string mesh_path = cfg.input_file("mesh");
    const std::string phantom_path = cfg.input_file("phantom_file");
    const std::string field_path = cfg.input_file("displacement");
    const std::string out_dir = cfg.output_file("output_dir");
    const std::string out_path = cfg.output_file("compressed_file", out_dir + "/compressed.pgvx");
    const int workers = cfg.workers();
    cfg.finish();

    const TetMesh mesh = load_mesh_checked(mesh_path);
    const VoxelPhantom uncompressed = read_phantom(phantom_path);
    const DisplacementField field = read_displacement_field(field_path);

    const GridSpec out_grid = default_output_grid(uncompressed, mesh, field);
    const VoxelPhantom compressed =
        reconstruct_compressed(uncompressed, mesh, field, out_grid, workers);
    ensure_parent(out_path);
    write_phantom(compressed, out_path);

    std::size_t before = 0, after = 0;
    for (std::uint8_t l : uncompressed.labels) before += l != kAirLabel;
    for (std::uint8_t l : compressed.labels) after += l != kAirLabel;
    log_line("reconstruct: " + std::to_string(before) + " -> " + std::to_string(after) +
             " tissue voxels -> " + out_path);
    return 0;
}

int cmd_bench(ConfigReader& cfg) {
    const std::string mesh_path = cfg.input_file("mesh");
    const std::string data_dir = cfg.input_dir("dataset_dir");
    const std::string checkpoint_path = cfg.input_file("checkpoint");
    const std::string out_dir = cfg.output_file("output_dir");
    const std::uint64_t seed = cfg.seed();
    const double max_force = cfg.number("max_force");
    const int n_steps = cfg.integer("n_steps");
    const int repetitions = cfg.integer("repetitions", 5);
    const Vec3 axis = cfg.axis();
    if (cfg.has("max_force") && !(max_force > 0.0))
        cfg.add_problem("max_force: must be positive");
    if (cfg.has("n_steps") && n_steps < 1) cfg.add_problem("n_steps: must be at least 1");
    cfg.finish();

    const TetMesh mesh = load_mesh_checked(mesh_path);
    const std::vector<DeformationSample> samples = load_samples_checked(data_dir, mesh);
    const Checkpoint checkpoint = read_checkpoint(checkpoint_path);

    // the surface-normal pattern at full load is the benchmark load case
    const DirectionSet directions = sample_directions(axis, 1, seed);
    const std::vector<LoadCase> cases = build_load_cases(mesh, directions, max_force, 1);

    const TimingReport report = time_inference_vs_fe(
        checkpoint.model, mesh, samples, MaterialSet::soft_tissue_defaults(),
        cases.front().force, max_force, n_steps, repetitions);
    fs::create_directories(out_dir);
    write_timing_csv(report, out_dir + "/timing.csv");

    log_line("bench: inference " + std::to_string(report.inference_seconds.mean) +
             " s/sample, one FE solve " + std::to_string(report.fe_seconds) +
             " s, speedup " + std::to_string(report.speedup) + "x -> " + out_dir +
             "/timing.csv");
    return 0;
}

// ---------------------------------------------------------------------------
// Entry point

struct Overrides {
    std::optional<std::string> config, mesh, dataset_dir, checkpoint, phantom_file,
        displacement, compressed_file, output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers, n_steps, n_directions, repetitions;
    std::optional<double> max_force, threshold_mm;
};

json effective_config(const Overrides& o) {
    json j = json::object();
    if (o.config) {
        std::ifstream in(*o.config);
        if (!in) throw IoError("cannot open config: " + *o.config);
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
        }
        if (!j.is_object()) throw ConfigError({"config root must be a JSON object"});
    }
    if (o.mesh) j["mesh"] = *o.mesh;
    if (o.dataset_dir) j["dataset_dir"] = *o.dataset_dir;
    if (o.checkpoint) j["checkpoint"] = *o.checkpoint;
    if (o.phantom_file) j["phantom_file"] = *o.phantom_file;
    if (o.displacement) j["displacement"] = *o.displacement;
    if (o.compressed_file) j["compressed_file"] = *o.compressed_file;
    if (o.output_dir) j["output_dir"] = *o.output_dir;
    if (o.seed) j["seed"] = *o.seed;
    if (o.workers) j["workers"] = *o.workers;
    if (o.n_steps) j["n_steps"] = *o.n_steps;
    if (o.n_directions) j["n_directions"] = *o.n_directions;
    if (o.repetitions) j["repetitions"] = *o.repetitions;
    if (o.max_force) j["max_force"] = *o.max_force;
    if (o.threshold_mm) j["threshold_mm"] = *o.threshold_mm;
    return j;
}

void add_common_options(CLI::App* sub, Overrides* o) {
    sub->add_option("--config", o->config, "JSON run configuration");
    sub->add_option("--mesh", o->mesh, "tetmesh file");
    sub->add_option("--dataset-dir", o->dataset_dir, "dataset directory");
    sub->add_option("--checkpoint", o->checkpoint, "model checkpoint file");
    sub->add_option("--phantom-file", o->phantom_file, "voxel phantom file");
    sub->add_option("--displacement", o->displacement, "displacement field file");
    sub->add_option("--compressed-file", o->compressed_file, "reconstruction output file");
    sub->add_option("--output-dir", o->output_dir, "directory for derived artifacts");
    sub->add_option("--seed", o->seed, "master random seed");
    sub->add_option("--workers", o->workers, "worker thread count");
    sub->add_option("--n-steps", o->n_steps, "incremental load steps");
    sub->add_option("--n-directions", o->n_directions, "force directions");
    sub->add_option("--repetitions", o->repetitions, "timing repetitions");
    sub->add_option("--max-force", o->max_force, "total applied force in N");
    sub->add_option("--threshold", o->threshold_mm, "error threshold in mm");
}

struct Failure {
    int code;
    const char* type;
};

Failure classify(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return {2, "config"};
    if (dynamic_cast<const InvalidParameterError*>(&e)) return {2, "config"};
    if (dynamic_cast<const ShapeError*>(&e)) return {2, "config"};
    if (dynamic_cast<const ConvergenceError*>(&e)) return {3, "numerical"};
    if (dynamic_cast<const ElementInversionError*>(&e)) return {3, "numerical"};
    if (dynamic_cast<const IoError*>(&e)) return {4, "io"};
    if (dynamic_cast<const ParseError*>(&e)) return {4, "io"};
    if (dynamic_cast<const DataError*>(&e)) return {4, "io"};
    if (dynamic_cast<const InvalidMeshError*>(&e)) return {4, "io"};
    return {1, "internal"};
}

void emit_json_error(const char* type, const std::string& message, int code,
                     const std::vector<std::string>* violations) {
    json err;
    err["error"]["type"] = type;
    err["error"]["message"] = message;
    if (violations) err["error"]["violations"] = *violations;
    err["exit_code"] = code;
    std::cerr << err.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FE-trained graph network surrogate for soft-tissue compression"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    Overrides o;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"phantom", "generate a synthetic mesh and its rasterized voxel phantom"},
        {"dataset", "run FE simulations and write a training dataset"},
        {"train", "fit the surrogate and write checkpoint + training log"},
        {"predict", "write surrogate displacement fields for dataset load cases"},
        {"evaluate", "metrics CSV and overlap JSON for a checkpoint"},
        {"reconstruct", "compressed voxel phantom from a displacement field"},
        {"bench", "time surrogate inference against one FE solve"},
    };
    for (const auto& [name, description] : commands)
        add_common_options(app.add_subcommand(name, description), &o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        emit_json_error("config", e.what(), 2, nullptr);
        return 2;
    }

    try {
        ConfigReader cfg(effective_config(o));
        if (app.got_subcommand("phantom")) return cmd_phantom(cfg);
        if (app.got_subcommand("dataset")) return cmd_dataset(cfg);
        if (app.got_subcommand("train")) return cmd_train(cfg);
        if (app.got_subcommand("predict")) return cmd_predict(cfg);
        if (app.got_subcommand("evaluate")) return cmd_evaluate(cfg);
        if (app.got_subcommand("reconstruct")) return cmd_reconstruct(cfg);
        if (app.got_subcommand("bench")) return cmd_bench(cfg);
        emit_json_error("config", "unknown subcommand", 2, nullptr);
        return 2;
    } catch (const ConfigError& e) {
        emit_json_error("config", e.what(), 2, &e.violations());
        return 2;
    } catch (const std::exception& e) {
        const Failure f = classify(e);
        emit_json_error(f.type, e.what(), f.code, nullptr);
        return f.code;
    }
}
