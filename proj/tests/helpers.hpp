#ifndef GFEM_TEST_HELPERS_HPP
#define GFEM_TEST_HELPERS_HPP

#include "gfem/core.hpp"
#include "gfem/mesh.hpp"

#include <array>
#include <functional>
#include <set>
#include <utility>
#include <vector>

namespace gfem::test {

// Flips tet orientation where needed so every signed volume is positive.
inline void orient_positive(TetMesh& mesh) {
    for (auto& tet : mesh.tets) {
        const Vec3& a = mesh.nodes[tet[0]];
        const double vol = (mesh.nodes[tet[1]] - a)
                               .cross(mesh.nodes[tet[2]] - a)
                               .dot(mesh.nodes[tet[3]] - a);
        if (vol < 0.0) std::swap(tet[2], tet[3]);
    }
}

inline TetMesh finish_mesh(std::vector<Vec3> nodes, std::vector<std::array<int, 4>> tets,
                           Tissue tissue = Tissue::Fat) {
    TetMesh mesh;
    mesh.nodes = std::move(nodes);
    mesh.tets = std::move(tets);
    mesh.node_tissue.assign(mesh.nodes.size(), tissue);
    mesh.node_bc.assign(mesh.nodes.size(), NodeBc::Free);
    mesh.node_bc[0] = NodeBc::Fixed;
    orient_positive(mesh);
    mesh.validate();
    return mesh;
}

// Regular tetrahedron with the requested edge length, centred at the origin.
inline TetMesh regular_tet(double edge) {
    const double s = edge / (2.0 * std::sqrt(2.0));
    return finish_mesh({Vec3(1, 1, 1) * s, Vec3(1, -1, -1) * s, Vec3(-1, 1, -1) * s,
                        Vec3(-1, -1, 1) * s},
                       {{{0, 1, 2, 3}}});
}

// Two tets sharing face (0,1,2).
inline TetMesh two_tets() {
    return finish_mesh({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1),
                        Vec3(0.4, 0.4, -1)},
                       {{{0, 1, 2, 3}}, {{0, 1, 2, 4}}});
}

// Unit cube split into 5 tets (central tet on even corners).
inline TetMesh cube5() {
    std::vector<Vec3> nodes;
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) nodes.emplace_back(x, y, z);
    // bit order: x + 2y + 4z
    return finish_mesh(std::move(nodes), {{{0, 3, 5, 6}},
                                          {{1, 0, 3, 5}},
                                          {{2, 3, 0, 6}},
                                          {{4, 5, 6, 0}},
                                          {{7, 6, 5, 3}}});
}

// Structured box of cells split into 6 tets each; nodes on the x = 0 face are fixed.
inline TetMesh box_mesh(const Vec3& size, int nx, int ny, int nz,
                        Tissue tissue = Tissue::Fat) {
    std::vector<Vec3> nodes;
    auto id = [&](int i, int j, int k) { return (k * (ny + 1) + j) * (nx + 1) + i; };
    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i <= nx; ++i)
                nodes.emplace_back(size.x() * i / nx, size.y() * j / ny, size.z() * k / nz);

    static constexpr int kPath[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                        {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    std::vector<std::array<int, 4>> tets;
    for (int k = 0; k < nz; ++k)
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                for (const auto& path : kPath) {
                    std::array<int, 3> at = {i, j, k};
                    std::array<int, 4> tet;
                    tet[0] = id(at[0], at[1], at[2]);
                    for (int step = 0; step < 3; ++step) {
                        at[path[step]] += 1;
                        tet[step + 1] = id(at[0], at[1], at[2]);
                    }
                    tets.push_back(tet);
                }

    TetMesh mesh;
    mesh.nodes = std::move(nodes);
    mesh.tets = std::move(tets);
    mesh.node_tissue.assign(mesh.nodes.size(), tissue);
    mesh.node_bc.assign(mesh.nodes.size(), NodeBc::Free);
    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j)
            mesh.node_bc[static_cast<std::size_t>(id(0, j, k))] = NodeBc::Fixed;
    orient_positive(mesh);
    mesh.validate();
    return mesh;
}

// Chain 0-1-...-9 with three chords; every node has a neighbour.
inline MeshGraph ten_node_graph() {
    MeshGraph g;
    g.n_nodes = 10;
    for (int i = 0; i + 1 < 10; ++i) {
        g.edges.emplace_back(i, i + 1);
        g.edge_weight.push_back(1.0 + 0.1 * i);
    }
    g.edges.emplace_back(0, 9);
    g.edge_weight.push_back(0.5);
    g.edges.emplace_back(2, 7);
    g.edge_weight.push_back(0.8);
    g.edges.emplace_back(3, 8);
    g.edge_weight.push_back(1.7);
    return g;
}

// Independent oracle: the distinct unordered node pairs co-occurring in a tet.
inline std::set<std::pair<int, int>> brute_force_edges(const TetMesh& mesh) {
    std::set<std::pair<int, int>> edges;
    for (const auto& tet : mesh.tets)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                if (tet[i] < tet[j]) edges.emplace(tet[i], tet[j]);
    return edges;
}

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor_scale = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_scale});
}

}  // namespace gfem::test

#endif
