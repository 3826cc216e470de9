#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gfem/core.hpp"
#include "gfem/fem.hpp"
#include "gfem/mesh.hpp"

namespace gfem {

// Voxel class codes: 0 air, then tissue codes offset by one.
inline constexpr std::uint8_t kAirLabel = 0;
std::uint8_t tissue_label(Tissue t);
const char* label_name(std::uint8_t label);

// `origin` is the corner of voxel (0,0,0); centers sit half a spacing in.
struct GridSpec {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing = Vec3::Ones();
    Vec3 origin = Vec3::Zero();
};

// Spacing chosen so dims voxels exactly span [lo, hi].
GridSpec grid_covering(const Vec3& lo, const Vec3& hi, const std::array<int, 3>& dims);

struct VoxelPhantom {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing = Vec3::Ones();
    Vec3 origin = Vec3::Zero();
    std::vector<std::uint8_t> labels;  // x-fastest, then y, then z

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims[1]) +
                static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(dims[0]) +
               static_cast<std::size_t>(i);
    }
    std::uint8_t at(int i, int j, int k) const { return labels[index(i, j, k)]; }
    Vec3 center(int i, int j, int k) const {
        return origin + Vec3((i + 0.5) * spacing.x(), (j + 0.5) * spacing.y(),
                             (k + 0.5) * spacing.z());
    }
    double voxel_volume() const { return spacing.x() * spacing.y() * spacing.z(); }

    void validate() const;
};

// Labels each voxel center by the tissue of its containing tet; air outside.
VoxelPhantom rasterize(const TetMesh& mesh, const GridSpec& grid, int workers = 1);

// Output grid for a compressed reconstruction: the input grid translated so
// its corner sits at the deformed bounding-box corner.
GridSpec default_output_grid(const VoxelPhantom& input, const TetMesh& mesh,
                             const DisplacementField& displacement);

// Back-maps each output voxel center through the deformed mesh: barycentric
// coordinates in the containing deformed tet are evaluated on the rest nodes,
// and the resulting point is looked up (nearest neighbour) in the
// uncompressed phantom. Centers outside the deformed mesh become air.
VoxelPhantom reconstruct_compressed(const VoxelPhantom& uncompressed, const TetMesh& mesh,
                                    const DisplacementField& displacement,
                                    const GridSpec& output_grid, int workers = 1);

// Binary phantom file, magic `PGVX`.
void write_phantom(const VoxelPhantom& phantom, const std::string& path);
VoxelPhantom read_phantom(const std::string& path);

// Raw label bytes plus a JSON sidecar holding dims/spacing_mm/origin_mm.
VoxelPhantom import_raw_phantom(const std::string& raw_path,
                                const std::string& sidecar_path);

}  // namespace gfem
