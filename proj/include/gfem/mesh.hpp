#ifndef GFEM_MESH_HPP
#define GFEM_MESH_HPP

#include "gfem/core.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gfem {

enum class Tissue : std::uint8_t { Fat = 0, Gland = 1, Skin = 2 };
enum class NodeBc : std::uint8_t { Free = 0, Fixed = 1 };

const char* to_string(Tissue t);
const char* to_string(NodeBc bc);
std::optional<Tissue> tissue_from_string(std::string_view s);
std::optional<NodeBc> bc_from_string(std::string_view s);

// ---------------------------------------------------------------------------
// Tetrahedral mesh with per-node tissue labels and boundary flags.
// Units: millimetres.

struct TetMesh {
    std::vector<Vec3> nodes;
    std::vector<std::array<int, 4>> tets;
    std::vector<Tissue> node_tissue;
    std::vector<NodeBc> node_bc;

    int node_count() const { return static_cast<int>(nodes.size()); }
    int tet_count() const { return static_cast<int>(tets.size()); }
    int fixed_node_count() const;

    // Signed volume; positive under the orientation convention enforced by validate().
    double tet_volume(int t) const;
    double total_volume() const;

    // Majority label of the element's four nodes; ties resolve to the stiffer
    // tissue (skin > gland > fat).
    Tissue element_tissue(int t) const;

    Vec3 centroid() const;
    void bounding_box(Vec3& lo, Vec3& hi) const;

    // Throws InvalidMeshError on any violated structural invariant.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Undirected node graph induced by tet edges; weights are inverse distances.

struct MeshGraph {
    int n_nodes = 0;
    std::vector<std::pair<int, int>> edges;  // u < v, deduplicated
    std::vector<double> edge_weight;         // 1/d(u,v), mm^-1
};

MeshGraph build_graph(const TetMesh& mesh);

// ---------------------------------------------------------------------------
// Boundary surface with outward node normals.

struct SurfaceInfo {
    std::vector<std::array<int, 3>> faces;  // outward-wound boundary triangles
    std::vector<int> nodes;                 // sorted surface node indices
    std::vector<Vec3> node_normal;          // unit outward normal per `nodes` entry

    bool is_surface_node(int node) const;
    // Normal of a surface node; throws DataError for interior nodes.
    const Vec3& normal_of(int node) const;

    std::vector<int> normal_index;  // node id -> index into node_normal, -1 if interior
};

SurfaceInfo extract_surface(const TetMesh& mesh);

// ---------------------------------------------------------------------------
// Point location via a uniform spatial hash over tet bounding boxes.

struct PointLocation {
    int tet = -1;
    Eigen::Vector4d bary = Eigen::Vector4d::Zero();
};

// Barycentric coordinates of p in tet (a,b,c,d); no containment check.
Eigen::Vector4d barycentric_coordinates(const Vec3& a, const Vec3& b, const Vec3& c,
                                        const Vec3& d, const Vec3& p);

class PointLocator {
public:
    // Locates against the mesh's rest positions.
    explicit PointLocator(const TetMesh& mesh);
    // Locates against displaced positions (same connectivity).
    PointLocator(const TetMesh& mesh, std::vector<Vec3> positions);

    // Containment tolerance is relative; ties on shared faces resolve to the
    // lowest tet index.
    std::optional<PointLocation> locate(const Vec3& p) const;

    const std::vector<Vec3>& positions() const { return positions_; }

private:
    void build();
    std::array<long, 3> cell_of(const Vec3& p) const;

    const TetMesh& mesh_;
    std::vector<Vec3> positions_;
    double cell_size_ = 1.0;
    Vec3 grid_origin_ = Vec3::Zero();
    std::unordered_map<std::uint64_t, std::vector<int>> cells_;
};

// One-off convenience; builds a locator internally.
std::optional<PointLocation> locate_point(const TetMesh& mesh, const Vec3& p);

// ---------------------------------------------------------------------------
// Synthetic phantom: a hemispherical dome over a flat base. The base plane
// (z = 0) is the fixed posterior surface; the dome extends along +z. The
// outer shell is skin, an inner ball centred at the base is glandular, and
// the remainder is fat.

struct HemisphereSpec {
    double radius_mm = 20.0;
    double target_edge_mm = 4.0;
    double skin_thickness_mm = 2.5;
    double gland_radius_mm = 8.0;
    std::uint64_t seed = 0;
};

TetMesh generate_hemisphere_phantom(const HemisphereSpec& spec);

// ---------------------------------------------------------------------------
// Mesh I/O, line-oriented text format "tetmesh v1".

TetMesh read_mesh(const std::string& path);
TetMesh read_mesh(std::istream& in);
void write_mesh(const TetMesh& mesh, const std::string& path);
void write_mesh(const TetMesh& mesh, std::ostream& out);

}  // namespace gfem

#endif
