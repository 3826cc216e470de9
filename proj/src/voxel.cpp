#include "gfem/voxel.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

#include "gfem/binary_io.hpp"

namespace gfem {

std::uint8_t tissue_label(Tissue t) { return static_cast<std::uint8_t>(t) + 1; }

const char* label_name(std::uint8_t label) {
    switch (label) {
        case 0: return "air";
        case 1: return "fat";
        case 2: return "gland";
        case 3: return "skin";
        default: throw DataError("unknown voxel label " + std::to_string(label));
    }
}

GridSpec grid_covering(const Vec3& lo, const Vec3& hi, const std::array<int, 3>& dims) {
    GridSpec grid;
    grid.dims = dims;
    grid.origin = lo;
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw InvalidParameterError("grid dims must be positive");
        if (!(hi[a] > lo[a])) throw InvalidParameterError("grid extent must be positive");
        grid.spacing[a] = (hi[a] - lo[a]) / dims[a];
    }
    return grid;
}

void VoxelPhantom::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw InvalidParameterError("phantom dims must be positive");
    if (!(spacing.minCoeff() > 0.0))
        throw InvalidParameterError("phantom spacing must be positive");
    if (labels.size() != voxel_count())
        throw DataError("phantom label count does not match dims");
    for (std::uint8_t l : labels)
        if (l > 3) throw DataError("invalid voxel label " + std::to_string(l));
}

namespace {

void check_grid(const GridSpec& grid) {
    if (grid.dims[0] < 1 || grid.dims[1] < 1 || grid.dims[2] < 1)
        throw InvalidParameterError("grid is empty");
    if (!(grid.spacing.minCoeff() > 0.0))
        throw InvalidParameterError("grid spacing must be positive");
}

VoxelPhantom empty_phantom(const GridSpec& grid) {
    VoxelPhantom out;
    out.dims = grid.dims;
    out.spacing = grid.spacing;
    out.origin = grid.origin;
    out.labels.assign(out.voxel_count(), kAirLabel);
    return out;
}

std::uint8_t nearest_label(const VoxelPhantom& phantom, const Vec3& p) {
    int idx[3];
    for (int a = 0; a < 3; ++a) {
        const double t = (p[a] - phantom.origin[a]) / phantom.spacing[a];
        idx[a] = static_cast<int>(std::floor(t));
        if (idx[a] < 0 || idx[a] >= phantom.dims[a]) return kAirLabel;
    }
    return phantom.at(idx[0], idx[1], idx[2]);
}

}  // namespace

VoxelPhantom rasterize(const TetMesh& mesh, const GridSpec& grid, int workers) {
    check_grid(grid);
    VoxelPhantom out = empty_phantom(grid);
    const PointLocator locator(mesh);

    parallel_for(static_cast<std::size_t>(grid.dims[2]), workers, [&](std::size_t kz) {
        const int k = static_cast<int>(kz);
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) {
                const auto loc = locator.locate(out.center(i, j, k));
                if (loc)
                    out.labels[out.index(i, j, k)] =
                        tissue_label(mesh.element_tissue(loc->tet));
            }
    });
    return out;
}

GridSpec default_output_grid(const VoxelPhantom& input, const TetMesh& mesh,
                             const DisplacementField& displacement) {
    if (displacement.node_count() != mesh.node_count())
        throw ShapeError("displacement node count does not match the mesh");
    Vec3 lo = mesh.nodes[0] + displacement.u.row(0).transpose();
    for (int i = 1; i < mesh.node_count(); ++i)
        lo = lo.cwiseMin(mesh.nodes[i] + displacement.u.row(i).transpose());
    GridSpec grid;
    grid.dims = input.dims;
    grid.spacing = input.spacing;
    grid.origin = lo;
    return grid;
}

VoxelPhantom reconstruct_compressed(const VoxelPhantom& uncompressed, const TetMesh& mesh,
                                    const DisplacementField& displacement,
                                    const GridSpec& output_grid, int workers) {
    check_grid(output_grid);
    uncompressed.validate();
    if (displacement.node_count() != mesh.node_count())
        throw ShapeError("displacement node count does not match the mesh");

    std::vector<Vec3> deformed(mesh.nodes.size());
    for (int i = 0; i < mesh.node_count(); ++i)
        deformed[i] = mesh.nodes[i] + displacement.u.row(i).transpose();

    for (int t = 0; t < mesh.tet_count(); ++t) {
        const auto& tet = mesh.tets[t];
        const Vec3& a = deformed[tet[0]];
        const double vol6 = (deformed[tet[1]] - a)
                                .cross(deformed[tet[2]] - a)
                                .dot(deformed[tet[3]] - a);
        if (vol6 <= 0.0) throw ElementInversionError(t, vol6 / (6.0 * mesh.tet_volume(t)));
    }

    VoxelPhantom out = empty_phantom(output_grid);
    const PointLocator locator(mesh, deformed);

    parallel_for(static_cast<std::size_t>(output_grid.dims[2]), workers, [&](std::size_t kz) {
        const int k = static_cast<int>(kz);
        for (int j = 0; j < output_grid.dims[1]; ++j)
            for (int i = 0; i < output_grid.dims[0]; ++i) {
                const auto loc = locator.locate(out.center(i, j, k));
                if (!loc) continue;
                const auto& tet = mesh.tets[loc->tet];
                Vec3 p0 = Vec3::Zero();
                for (int v = 0; v < 4; ++v) p0 += loc->bary[v] * mesh.nodes[tet[v]];
                out.labels[out.index(i, j, k)] = nearest_label(uncompressed, p0);
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// I/O

namespace {
constexpr std::uint32_t kPhantomVersion = 1;
}

void write_phantom(const VoxelPhantom& phantom, const std::string& path) {
    phantom.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");

    bin::write_magic(out, "PGVX");
    bin::write_u32(out, kPhantomVersion);
    for (int a = 0; a < 3; ++a)
        bin::write_u32(out, static_cast<std::uint32_t>(phantom.dims[a]));
    for (int a = 0; a < 3; ++a) bin::write_f64(out, phantom.spacing[a]);
    for (int a = 0; a < 3; ++a) bin::write_f64(out, phantom.origin[a]);
    out.write(reinterpret_cast<const char*>(phantom.labels.data()),
              static_cast<std::streamsize>(phantom.labels.size()));
    if (!out) throw IoError("failed writing " + path);
}

VoxelPhantom read_phantom(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);

    bin::expect_magic(in, "PGVX", "phantom");
    const std::uint32_t version = bin::read_u32(in, "phantom version");
    if (version != kPhantomVersion)
        throw DataError("unsupported phantom version " + std::to_string(version));

    VoxelPhantom phantom;
    for (int a = 0; a < 3; ++a)
        phantom.dims[a] = static_cast<int>(bin::read_u32(in, "phantom dims"));
    for (int a = 0; a < 3; ++a) phantom.spacing[a] = bin::read_f64(in, "phantom spacing");
    for (int a = 0; a < 3; ++a) phantom.origin[a] = bin::read_f64(in, "phantom origin");
    if (phantom.dims[0] < 1 || phantom.dims[1] < 1 || phantom.dims[2] < 1)
        throw DataError("phantom dims must be positive");

    phantom.labels.resize(phantom.voxel_count());
    in.read(reinterpret_cast<char*>(phantom.labels.data()),
            static_cast<std::streamsize>(phantom.labels.size()));
    if (static_cast<std::size_t>(in.gcount()) != phantom.labels.size())
        throw DataError("truncated file while reading phantom labels");
    phantom.validate();
    return phantom;
}

VoxelPhantom import_raw_phantom(const std::string& raw_path,
                                const std::string& sidecar_path) {
    std::ifstream side(sidecar_path);
    if (!side) throw IoError("cannot open " + sidecar_path);
    nlohmann::json j;
    try {
        side >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad phantom sidecar: " + std::string(e.what()));
    }

    VoxelPhantom phantom;
    try {
        for (int a = 0; a < 3; ++a) {
            phantom.dims[a] = j.at("dims").at(a).get<int>();
            phantom.spacing[a] = j.at("spacing_mm").at(a).get<double>();
            phantom.origin[a] = j.at("origin_mm").at(a).get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad phantom sidecar: " + std::string(e.what()));
    }

    std::ifstream raw(raw_path, std::ios::binary);
    if (!raw) throw IoError("cannot open " + raw_path);
    phantom.labels.resize(phantom.voxel_count());
    raw.read(reinterpret_cast<char*>(phantom.labels.data()),
             static_cast<std::streamsize>(phantom.labels.size()));
    if (static_cast<std::size_t>(raw.gcount()) != phantom.labels.size())
        throw DataError("raw phantom smaller than dims imply");
    char extra;
    if (raw.read(&extra, 1).gcount() != 0)
        throw DataError("raw phantom larger than dims imply");
    phantom.validate();
    return phantom;
}

}  // namespace gfem
