#pragma once

#include <Eigen/Sparse>

#include <array>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "gfem/core.hpp"
#include "gfem/mesh.hpp"

namespace gfem {

// Units throughout: mm, N, MPa (N/mm^2).

std::pair<double, double> lame_from_young_poisson(double young_modulus, double poisson_ratio);

struct Material {
    double young_modulus = 0.0;  // MPa
    double poisson_ratio = 0.0;
    double mu = 0.0;      // MPa
    double lambda = 0.0;  // MPa

    static Material from_young_poisson(double young_modulus, double poisson_ratio);
};

struct MaterialSet {
    Material fat;
    Material gland;
    Material skin;

    static MaterialSet soft_tissue_defaults();
    const Material& of(Tissue tissue) const;
};

struct LoadCase {
    MatN3 force;  // N, one row per node
    int direction_id = 0;
    int step_id = 1;
};

void validate_load_case(const TetMesh& mesh, const LoadCase& load);

struct DisplacementField {
    MatN3 u;  // mm, one row per node

    static DisplacementField zero(int n_nodes);
    int node_count() const { return static_cast<int>(u.rows()); }
};

struct ElementResult {
    double energy = 0.0;                    // N*mm
    Eigen::Matrix<double, 4, 3> forces;     // N, one row per node
    Eigen::Matrix<double, 12, 12> tangent;  // N/mm, dof index = 3*node + axis
};

ElementResult element_energy_and_forces(const std::array<Vec3, 4>& rest,
                                        const std::array<Vec3, 4>& displacement, double mu,
                                        double lambda, int tet_index = -1);

// Single-axis displacement constraint applied on top of the mesh's fixed nodes.
struct PrescribedDof {
    int node = 0;
    int axis = 0;
    double value = 0.0;  // mm
};

struct SolverOptions {
    double residual_tol = 1e-8;  // N, infinity norm over free dofs
    int max_iterations = 50;
    int max_halvings = 20;
};

class FemSystem {
public:
    // The mesh must outlive the system.
    FemSystem(const TetMesh& mesh, const MaterialSet& materials);

    const TetMesh& mesh() const { return *mesh_; }

    DisplacementField solve(const MatN3& external_force,
                            const std::vector<PrescribedDof>& prescribed = {},
                            const SolverOptions& options = {},
                            const DisplacementField* warm_start = nullptr) const;

    double strain_energy(const DisplacementField& field) const;
    MatN3 internal_forces(const DisplacementField& field) const;

private:
    struct Element {
        Mat3 bm;  // inverse rest edge matrix
        double volume = 0.0;
        double mu = 0.0;
        double lambda = 0.0;
    };

    double assemble(const VecX& u, VecX* grad,
                    std::vector<Eigen::Triplet<double>>* triplets) const;
    bool try_total_energy(const VecX& u, const VecX& f_ext, double* energy) const;

    const TetMesh* mesh_;
    std::vector<Element> elements_;
};

DisplacementField solve_static(const TetMesh& mesh, const MaterialSet& materials,
                               const LoadCase& load, const SolverOptions& options = {});

// Step t applies t/n_steps of max_force along the per-node direction pattern,
// warm-started from step t-1. The pattern is scaled so the summed per-node
// force magnitudes at full load equal max_force.
std::vector<DisplacementField> incremental_solve(const TetMesh& mesh,
                                                 const MaterialSet& materials,
                                                 const MatN3& direction, double max_force,
                                                 int n_steps,
                                                 const SolverOptions& options = {});

// Squeezes the mesh between two planes normal to the given axis: the lower
// plane stays at the rest bounding box minimum, the upper one travels inward
// by compression_fraction of the rest extent. Nodes beyond a plane are pinned
// onto it along the axis only (frictionless approximation).
DisplacementField prescribed_compression(const TetMesh& mesh, const MaterialSet& materials,
                                         int axis, double compression_fraction,
                                         int n_substeps = 10,
                                         const SolverOptions& options = {});

DisplacementField read_displacement_field(std::istream& in);
DisplacementField read_displacement_field(const std::string& path);
void write_displacement_field(const DisplacementField& field, std::ostream& out);
void write_displacement_field(const DisplacementField& field, const std::string& path);

}  // namespace gfem
