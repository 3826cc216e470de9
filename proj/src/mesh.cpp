#include "gfem/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace gfem {

const char* to_string(Tissue t) {
    switch (t) {
        case Tissue::Fat: return "fat";
        case Tissue::Gland: return "gland";
        case Tissue::Skin: return "skin";
    }
    return "?";
}

const char* to_string(NodeBc bc) {
    return bc == NodeBc::Fixed ? "fixed" : "free";
}

std::optional<Tissue> tissue_from_string(std::string_view s) {
    if (s == "fat") return Tissue::Fat;
    if (s == "gland") return Tissue::Gland;
    if (s == "skin") return Tissue::Skin;
    return std::nullopt;
}

std::optional<NodeBc> bc_from_string(std::string_view s) {
    if (s == "free") return NodeBc::Free;
    if (s == "fixed") return NodeBc::Fixed;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// TetMesh

int TetMesh::fixed_node_count() const {
    int n = 0;
    for (NodeBc bc : node_bc)
        if (bc == NodeBc::Fixed) ++n;
    return n;
}

double TetMesh::tet_volume(int t) const {
    const auto& tet = tets[static_cast<std::size_t>(t)];
    const Vec3& a = nodes[tet[0]];
    return (nodes[tet[1]] - a).cross(nodes[tet[2]] - a).dot(nodes[tet[3]] - a) / 6.0;
}

double TetMesh::total_volume() const {
    double v = 0.0;
    for (int t = 0; t < tet_count(); ++t) v += tet_volume(t);
    return v;
}

Tissue TetMesh::element_tissue(int t) const {
    const auto& tet = tets[static_cast<std::size_t>(t)];
    int count[3] = {0, 0, 0};
    for (int i = 0; i < 4; ++i) count[static_cast<int>(node_tissue[tet[i]])]++;
    // majority; ties resolve to the stiffer tissue (skin > gland > fat)
    int best = static_cast<int>(Tissue::Skin);
    for (int c = 2; c >= 0; --c)
        if (count[c] > count[best]) best = c;
    return static_cast<Tissue>(best);
}

Vec3 TetMesh::centroid() const {
    Vec3 c = Vec3::Zero();
    for (const Vec3& p : nodes) c += p;
    return nodes.empty() ? c : Vec3(c / static_cast<double>(nodes.size()));
}

void TetMesh::bounding_box(Vec3& lo, Vec3& hi) const {
    lo = Vec3::Constant(std::numeric_limits<double>::max());
    hi = Vec3::Constant(std::numeric_limits<double>::lowest());
    for (const Vec3& p : nodes) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
}

void TetMesh::validate() const {
    const int n = node_count();
    if (node_tissue.size() != nodes.size() || node_bc.size() != nodes.size())
        throw InvalidMeshError("per-node attribute arrays do not match node count");
    for (int t = 0; t < tet_count(); ++t) {
        const auto& tet = tets[static_cast<std::size_t>(t)];
        for (int i = 0; i < 4; ++i) {
            if (tet[i] < 0 || tet[i] >= n)
                throw InvalidMeshError("tet " + std::to_string(t) + " references node " +
                                       std::to_string(tet[i]) + " out of range");
            for (int j = i + 1; j < 4; ++j)
                if (tet[i] == tet[j])
                    throw InvalidMeshError("tet " + std::to_string(t) + " has repeated node " +
                                           std::to_string(tet[i]));
        }
        if (tet_volume(t) <= 0.0)
            throw InvalidMeshError("tet " + std::to_string(t) + " has non-positive volume");
    }
    if (fixed_node_count() == 0)
        throw InvalidMeshError("mesh has no fixed node; rigid motion is unconstrained");
}

// ---------------------------------------------------------------------------
// Graph extraction

MeshGraph build_graph(const TetMesh& mesh) {
    MeshGraph g;
    g.n_nodes = mesh.node_count();

    std::vector<std::pair<int, int>> edges;
    edges.reserve(mesh.tets.size() * 6);
    for (const auto& tet : mesh.tets) {
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j) {
                int u = tet[i], v = tet[j];
                if (u > v) std::swap(u, v);
                edges.emplace_back(u, v);
            }
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    g.edges = std::move(edges);
    g.edge_weight.reserve(g.edges.size());
    for (const auto& [u, v] : g.edges) {
        const double d = (mesh.nodes[u] - mesh.nodes[v]).norm();
        if (d < 1e-12)
            throw InvalidMeshError("degenerate edge between coincident nodes " +
                                   std::to_string(u) + " and " + std::to_string(v));
        g.edge_weight.push_back(1.0 / d);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Surface extraction

namespace {

// Outward-wound faces of a positively oriented tet, opposite vertices 0..3.
constexpr int kTetFace[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};

}  // namespace

SurfaceInfo extract_surface(const TetMesh& mesh) {
    // key: sorted node triple -> (count, oriented face)
    std::map<std::array<int, 3>, std::pair<int, std::array<int, 3>>> face_count;
    for (const auto& tet : mesh.tets) {
        for (const auto& f : kTetFace) {
            std::array<int, 3> oriented = {tet[f[0]], tet[f[1]], tet[f[2]]};
            std::array<int, 3> key = oriented;
            std::sort(key.begin(), key.end());
            auto [it, inserted] = face_count.try_emplace(key, 0, oriented);
            it->second.first++;
            if (it->second.first >= 3)
                throw InvalidMeshError("non-manifold face shared by 3 or more tets");
        }
    }

    SurfaceInfo info;
    info.normal_index.assign(mesh.nodes.size(), -1);
    std::vector<Vec3> accum(mesh.nodes.size(), Vec3::Zero());

    for (const auto& [key, entry] : face_count) {
        if (entry.first != 1) continue;
        const auto& f = entry.second;
        info.faces.push_back(f);
        // cross product carries twice the face area; summing it per node gives
        // the area-weighted normal directly
        const Vec3 n = (mesh.nodes[f[1]] - mesh.nodes[f[0]])
                           .cross(mesh.nodes[f[2]] - mesh.nodes[f[0]]);
        for (int v : f) {
            if (info.normal_index[v] < 0) {
                info.normal_index[v] = 0;  // mark, renumber below
                info.nodes.push_back(v);
            }
            accum[v] += n;
        }
    }

    std::sort(info.nodes.begin(), info.nodes.end());
    info.node_normal.resize(info.nodes.size());
    for (std::size_t i = 0; i < info.nodes.size(); ++i) {
        const int v = info.nodes[i];
        info.normal_index[v] = static_cast<int>(i);
        const double len = accum[v].norm();
        if (len < 1e-12)
            throw InvalidMeshError("surface node " + std::to_string(v) +
                                   " has a degenerate normal");
        info.node_normal[i] = accum[v] / len;
    }
    return info;
}

bool SurfaceInfo::is_surface_node(int node) const {
    return node >= 0 && node < static_cast<int>(normal_index.size()) && normal_index[node] >= 0;
}

const Vec3& SurfaceInfo::normal_of(int node) const {
    if (!is_surface_node(node))
        throw DataError("node " + std::to_string(node) + " is not a surface node");
    return node_normal[static_cast<std::size_t>(normal_index[node])];
}

// ---------------------------------------------------------------------------
// Point location

Eigen::Vector4d barycentric_coordinates(const Vec3& a, const Vec3& b, const Vec3& c,
                                        const Vec3& d, const Vec3& p) {
    Mat3 t;
    t.col(0) = b - a;
    t.col(1) = c - a;
    t.col(2) = d - a;
    const Vec3 beta = t.partialPivLu().solve(p - a);
    return {1.0 - beta.sum(), beta[0], beta[1], beta[2]};
}

PointLocator::PointLocator(const TetMesh& mesh) : PointLocator(mesh, mesh.nodes) {}

PointLocator::PointLocator(const TetMesh& mesh, std::vector<Vec3> positions)
    : mesh_(mesh), positions_(std::move(positions)) {
    if (positions_.size() != mesh.nodes.size())
        throw ShapeError("position count does not match mesh node count");
    build();
}

void PointLocator::build() {
    double edge_sum = 0.0;
    for (const auto& tet : mesh_.tets)
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j)
                edge_sum += (positions_[tet[i]] - positions_[tet[j]]).norm();
    const std::size_t n_edges = mesh_.tets.size() * 6;
    cell_size_ = n_edges > 0 ? std::max(edge_sum / static_cast<double>(n_edges), 1e-9) : 1.0;

    grid_origin_ = Vec3::Constant(std::numeric_limits<double>::max());
    for (const Vec3& p : positions_) grid_origin_ = grid_origin_.cwiseMin(p);
    grid_origin_ -= Vec3::Constant(cell_size_);

    for (int t = 0; t < mesh_.tet_count(); ++t) {
        const auto& tet = mesh_.tets[static_cast<std::size_t>(t)];
        Vec3 lo = positions_[tet[0]], hi = positions_[tet[0]];
        for (int i = 1; i < 4; ++i) {
            lo = lo.cwiseMin(positions_[tet[i]]);
            hi = hi.cwiseMax(positions_[tet[i]]);
        }
        const auto clo = cell_of(lo), chi = cell_of(hi);
        for (long x = clo[0]; x <= chi[0]; ++x)
            for (long y = clo[1]; y <= chi[1]; ++y)
                for (long z = clo[2]; z <= chi[2]; ++z) {
                    const std::uint64_t key = (static_cast<std::uint64_t>(x) << 42) |
                                              (static_cast<std::uint64_t>(y) << 21) |
                                              static_cast<std::uint64_t>(z);
                    cells_[key].push_back(t);
                }
    }
}

std::array<long, 3> PointLocator::cell_of(const Vec3& p) const {
    std::array<long, 3> c;
    for (int i = 0; i < 3; ++i) {
        const long v = static_cast<long>(std::floor((p[i] - grid_origin_[i]) / cell_size_));
        c[i] = std::clamp(v, 0L, (1L << 21) - 1);
    }
    return c;
}

std::optional<PointLocation> PointLocator::locate(const Vec3& p) const {
    constexpr double kBaryTol = 1e-9;
    const auto c = cell_of(p);
    const std::uint64_t key = (static_cast<std::uint64_t>(c[0]) << 42) |
                              (static_cast<std::uint64_t>(c[1]) << 21) |
                              static_cast<std::uint64_t>(c[2]);
    auto it = cells_.find(key);
    if (it == cells_.end()) return std::nullopt;
    // candidates were inserted in ascending tet order, so the first hit is the
    // lowest tet index (deterministic tie-break on shared faces)
    for (int t : it->second) {
        const auto& tet = mesh_.tets[static_cast<std::size_t>(t)];
        const Eigen::Vector4d bary = barycentric_coordinates(
            positions_[tet[0]], positions_[tet[1]], positions_[tet[2]], positions_[tet[3]], p);
        if (bary.minCoeff() >= -kBaryTol && bary.maxCoeff() <= 1.0 + kBaryTol)
            return PointLocation{t, bary};
    }
    return std::nullopt;
}

std::optional<PointLocation> locate_point(const TetMesh& mesh, const Vec3& p) {
    return PointLocator(mesh).locate(p);
}

// ---------------------------------------------------------------------------
// Hemisphere phantom
//
// A structured lattice on the half-cube [-1,1]^2 x [0,1] is warped onto the
// half-ball of the requested radius: a lattice point q moves to
// radius * ||q||_inf * q/||q||_2, which carries cube shells onto sphere
// shells and keeps the z = 0 base plane flat. Cells are split into six
// tetrahedra each (Freudenthal), which conforms across neighbouring cells.

namespace {

// axis permutations walking from cube corner (0,0,0) to (1,1,1)
constexpr int kCubePath[6][3] = {
    {0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0},
};

Vec3 half_ball_map(const Vec3& q, double radius) {
    const double s = q.cwiseAbs().maxCoeff();
    const double len = q.norm();
    if (len < 1e-300) return Vec3::Zero();
    return (radius * s / len) * q;
}

}  // namespace

TetMesh generate_hemisphere_phantom(const HemisphereSpec& spec) {
    if (spec.radius_mm <= 0.0 || spec.target_edge_mm <= 0.0)
        throw InvalidParameterError("radius and target edge must be positive");
    if (spec.skin_thickness_mm <= 0.0 || spec.skin_thickness_mm >= spec.radius_mm)
        throw InvalidParameterError("skin thickness must lie in (0, radius)");
    if (spec.gland_radius_mm <= 0.0 ||
        spec.gland_radius_mm >= spec.radius_mm - spec.skin_thickness_mm)
        throw InvalidParameterError("gland radius must lie in (0, radius - skin thickness)");

    const int n = std::max(1, static_cast<int>(std::lround(spec.radius_mm / spec.target_edge_mm)));
    const int nx = 2 * n + 1;  // lattice extent in x and y: [-n, n]

    auto lattice_id = [&](int i, int j, int k) {
        return (static_cast<long>(k) * nx + (j + n)) * nx + (i + n);
    };

    Rng rng(spec.seed);
    std::vector<Vec3> lattice(static_cast<std::size_t>(nx) * nx * (n + 1));
    for (int k = 0; k <= n; ++k)
        for (int j = -n; j <= n; ++j)
            for (int i = -n; i <= n; ++i) {
                Vec3 q(static_cast<double>(i) / n, static_cast<double>(j) / n,
                       static_cast<double>(k) / n);
                const bool interior =
                    k > 0 && std::max({std::abs(i), std::abs(j), k}) < n;
                if (interior) {
                    // small lattice-space jitter; keeps tets well away from
                    // inversion while varying interior node placement per seed
                    for (int a = 0; a < 3; ++a) q[a] += rng.uniform(-0.05, 0.05) / n;
                }
                lattice[static_cast<std::size_t>(lattice_id(i, j, k))] =
                    half_ball_map(q, spec.radius_mm);
            }

    TetMesh mesh;
    mesh.nodes.reserve(lattice.size());
    std::vector<int> node_of(lattice.size(), -1);
    auto node_index = [&](int i, int j, int k) {
        const long id = lattice_id(i, j, k);
        if (node_of[static_cast<std::size_t>(id)] < 0) {
            node_of[static_cast<std::size_t>(id)] = mesh.node_count();
            mesh.nodes.push_back(lattice[static_cast<std::size_t>(id)]);
        }
        return node_of[static_cast<std::size_t>(id)];
    };

    for (int k = 0; k < n; ++k)
        for (int j = -n; j < n; ++j)
            for (int i = -n; i < n; ++i) {
                int corner[2][2][2];
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            corner[dx][dy][dz] = node_index(i + dx, j + dy, k + dz);
                for (const auto& path : kCubePath) {
                    std::array<int, 3> at = {0, 0, 0};
                    std::array<int, 4> tet;
                    tet[0] = corner[0][0][0];
                    for (int step = 0; step < 3; ++step) {
                        at[path[step]] = 1;
                        tet[step + 1] = corner[at[0]][at[1]][at[2]];
                    }
                    const Vec3& a = mesh.nodes[tet[0]];
                    const double vol = (mesh.nodes[tet[1]] - a)
                                           .cross(mesh.nodes[tet[2]] - a)
                                           .dot(mesh.nodes[tet[3]] - a);
                    if (std::abs(vol) < 1e-12)
                        throw InvalidMeshError("warp collapsed a lattice tet; use a finer edge");
                    if (vol < 0.0) std::swap(tet[2], tet[3]);
                    mesh.tets.push_back(tet);
                }
            }

    if (mesh.node_count() < 4)
        throw InvalidParameterError("phantom parameters yield fewer than 4 nodes");

    mesh.node_tissue.resize(mesh.nodes.size());
    mesh.node_bc.resize(mesh.nodes.size());
    for (int v = 0; v < mesh.node_count(); ++v) {
        const Vec3& p = mesh.nodes[static_cast<std::size_t>(v)];
        const double r = p.norm();
        Tissue tissue = Tissue::Fat;
        if (r >= spec.radius_mm - spec.skin_thickness_mm)
            tissue = Tissue::Skin;
        else if (r <= spec.gland_radius_mm)
            tissue = Tissue::Gland;
        mesh.node_tissue[static_cast<std::size_t>(v)] = tissue;
        mesh.node_bc[static_cast<std::size_t>(v)] =
            p.z() == 0.0 ? NodeBc::Fixed : NodeBc::Free;
    }

    mesh.validate();
    return mesh;
}

// ---------------------------------------------------------------------------
// Mesh I/O: "tetmesh v1" line format

namespace {

struct LineReader {
    std::istream& in;
    int line_no = 0;

    // next non-empty line with comments stripped; false on EOF
    bool next(std::string& out) {
        std::string raw;
        while (std::getline(in, raw)) {
            ++line_no;
            const auto hash = raw.find('#');
            if (hash != std::string::npos) raw.erase(hash);
            // keep only lines with any non-space content
            if (raw.find_first_not_of(" \t\r\n") != std::string::npos) {
                out = raw;
                return true;
            }
        }
        return false;
    }
};

std::vector<std::string> tokens_of(const std::string& line) {
    std::istringstream ss(line);
    std::vector<std::string> toks;
    std::string t;
    while (ss >> t) toks.push_back(t);
    return toks;
}

double parse_double(const std::string& s, int line) {
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ParseError("expected a number, got '" + s + "'", line);
    }
    if (pos != s.size()) throw ParseError("trailing characters in number '" + s + "'", line);
    return v;
}

int parse_int(const std::string& s, int line) {
    std::size_t pos = 0;
    long v;
    try {
        v = std::stol(s, &pos);
    } catch (const std::exception&) {
        throw ParseError("expected an integer, got '" + s + "'", line);
    }
    if (pos != s.size()) throw ParseError("trailing characters in integer '" + s + "'", line);
    return static_cast<int>(v);
}

}  // namespace

TetMesh read_mesh(std::istream& in) {
    LineReader reader{in};
    std::string line;

    if (!reader.next(line)) throw ParseError("empty mesh file", reader.line_no);
    if (tokens_of(line) != std::vector<std::string>{"tetmesh", "v1"})
        throw ParseError("expected header 'tetmesh v1'", reader.line_no);

    if (!reader.next(line)) throw ParseError("missing 'nodes N'", reader.line_no);
    auto toks = tokens_of(line);
    if (toks.size() != 2 || toks[0] != "nodes")
        throw ParseError("expected 'nodes N'", reader.line_no);
    const int n_nodes = parse_int(toks[1], reader.line_no);
    if (n_nodes < 0) throw ParseError("negative node count", reader.line_no);

    TetMesh mesh;
    mesh.nodes.reserve(static_cast<std::size_t>(n_nodes));
    for (int i = 0; i < n_nodes; ++i) {
        if (!reader.next(line))
            throw ParseError("unexpected end of file in node list", reader.line_no);
        toks = tokens_of(line);
        if (toks.size() != 5)
            throw ParseError("node line needs 'x y z tissue bc'", reader.line_no);
        mesh.nodes.emplace_back(parse_double(toks[0], reader.line_no),
                                parse_double(toks[1], reader.line_no),
                                parse_double(toks[2], reader.line_no));
        const auto tissue = tissue_from_string(toks[3]);
        if (!tissue) throw ParseError("unknown tissue '" + toks[3] + "'", reader.line_no);
        const auto bc = bc_from_string(toks[4]);
        if (!bc) throw ParseError("unknown boundary flag '" + toks[4] + "'", reader.line_no);
        mesh.node_tissue.push_back(*tissue);
        mesh.node_bc.push_back(*bc);
    }

    if (!reader.next(line)) throw ParseError("missing 'tets M'", reader.line_no);
    toks = tokens_of(line);
    if (toks.size() != 2 || toks[0] != "tets")
        throw ParseError("expected 'tets M'", reader.line_no);
    const int n_tets = parse_int(toks[1], reader.line_no);
    if (n_tets < 0) throw ParseError("negative tet count", reader.line_no);

    mesh.tets.reserve(static_cast<std::size_t>(n_tets));
    for (int t = 0; t < n_tets; ++t) {
        if (!reader.next(line))
            throw ParseError("unexpected end of file in tet list", reader.line_no);
        toks = tokens_of(line);
        if (toks.size() != 4)
            throw ParseError("tet line needs exactly 4 node indices", reader.line_no);
        std::array<int, 4> tet;
        for (int i = 0; i < 4; ++i) tet[i] = parse_int(toks[i], reader.line_no);
        mesh.tets.push_back(tet);
    }

    mesh.validate();
    return mesh;
}

TetMesh read_mesh(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mesh file '" + path + "'");
    return read_mesh(in);
}

void write_mesh(const TetMesh& mesh, std::ostream& out) {
    out << "tetmesh v1\n";
    out << "nodes " << mesh.node_count() << "\n";
    out << std::setprecision(17);
    for (int i = 0; i < mesh.node_count(); ++i) {
        const Vec3& p = mesh.nodes[static_cast<std::size_t>(i)];
        out << p.x() << ' ' << p.y() << ' ' << p.z() << ' '
            << to_string(mesh.node_tissue[static_cast<std::size_t>(i)]) << ' '
            << to_string(mesh.node_bc[static_cast<std::size_t>(i)]) << '\n';
    }
    out << "tets " << mesh.tet_count() << "\n";
    for (const auto& tet : mesh.tets)
        out << tet[0] << ' ' << tet[1] << ' ' << tet[2] << ' ' << tet[3] << '\n';
}

void write_mesh(const TetMesh& mesh, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_mesh(mesh, out);
    if (!out) throw IoError("failed writing mesh to '" + path + "'");
}

}  // namespace gfem
