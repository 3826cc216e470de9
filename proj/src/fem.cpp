#include "gfem/fem.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace gfem {

namespace {

Mat3 edge_matrix(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3) {
    Mat3 d;
    d.col(0) = p1 - p0;
    d.col(1) = p2 - p0;
    d.col(2) = p3 - p0;
    return d;
}

VecX flatten(const MatN3& rows) {
    VecX v(rows.rows() * 3);
    for (Eigen::Index i = 0; i < rows.rows(); ++i) v.segment<3>(3 * i) = rows.row(i);
    return v;
}

MatN3 unflatten(const VecX& v) {
    MatN3 rows(v.size() / 3, 3);
    for (Eigen::Index i = 0; i < rows.rows(); ++i) rows.row(i) = v.segment<3>(3 * i);
    return rows;
}

// Neo-Hookean energy density at deformation gradient f, or false if inverted.
bool energy_density(const Mat3& f, double mu, double lambda, double* psi) {
    const double j = f.determinant();
    if (!(j > 0.0)) return false;
    const double log_j = std::log(j);
    *psi = 0.5 * mu * (f.squaredNorm() - 3.0) - mu * log_j + 0.5 * lambda * log_j * log_j;
    return std::isfinite(*psi);
}

}  // namespace

std::pair<double, double> lame_from_young_poisson(double young_modulus,
                                                  double poisson_ratio) {
    if (!(young_modulus > 0.0))
        throw InvalidParameterError("young_modulus must be positive");
    if (!(poisson_ratio >= 0.0 && poisson_ratio < 0.5))
        throw InvalidParameterError(
            "poisson_ratio must lie in [0, 0.5); 0.5 is incompressible");
    const double mu = young_modulus / (2.0 * (1.0 + poisson_ratio));
    const double lambda = young_modulus * poisson_ratio /
                          ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
    return {mu, lambda};
}

Material Material::from_young_poisson(double young_modulus, double poisson_ratio) {
    Material m;
    m.young_modulus = young_modulus;
    m.poisson_ratio = poisson_ratio;
    std::tie(m.mu, m.lambda) = lame_from_young_poisson(young_modulus, poisson_ratio);
    return m;
}

MaterialSet MaterialSet::soft_tissue_defaults() {
    MaterialSet set;
    set.fat = Material::from_young_poisson(4.46e-3, 0.49);
    set.gland = Material::from_young_poisson(15.1e-3, 0.49);
    set.skin = Material::from_young_poisson(20.0e-3, 0.49);
    return set;
}

const Material& MaterialSet::of(Tissue tissue) const {
    switch (tissue) {
        case Tissue::Fat: return fat;
        case Tissue::Gland: return gland;
        case Tissue::Skin: return skin;
    }
    throw InvalidParameterError("unknown tissue");
}

void validate_load_case(const TetMesh& mesh, const LoadCase& load) {
    if (load.force.rows() != mesh.node_count())
        throw ShapeError("load case force rows do not match mesh node count");
    for (int i = 0; i < mesh.node_count(); ++i)
        if (mesh.node_bc[i] == NodeBc::Fixed && load.force.row(i).norm() != 0.0)
            throw InvalidParameterError("load case applies force at fixed node " +
                                        std::to_string(i));
    if (load.step_id < 1) throw InvalidParameterError("load case step_id must be >= 1");
}

DisplacementField DisplacementField::zero(int n_nodes) {
    DisplacementField f;
    f.u = MatN3::Zero(n_nodes, 3);
    return f;
}

ElementResult element_energy_and_forces(const std::array<Vec3, 4>& rest,
                                        const std::array<Vec3, 4>& displacement, double mu,
                                        double lambda, int tet_index) {
    const Mat3 dm = edge_matrix(rest[0], rest[1], rest[2], rest[3]);
    const double volume = dm.determinant() / 6.0;
    if (!(volume > 1e-12))
        throw InvalidMeshError("degenerate rest tetrahedron (volume <= 1e-12 mm^3)");
    const Mat3 bm = dm.inverse();

    const Mat3 ds = edge_matrix(rest[0] + displacement[0], rest[1] + displacement[1],
                                rest[2] + displacement[2], rest[3] + displacement[3]);
    const Mat3 f = ds * bm;
    const double j = f.determinant();
    if (!(j > 0.0)) throw ElementInversionError(tet_index, j);

    const double log_j = std::log(j);
    const Mat3 f_inv = f.inverse();
    const Mat3 f_inv_t = f_inv.transpose();

    ElementResult out;
    out.energy =
        volume * (0.5 * mu * (f.squaredNorm() - 3.0) - mu * log_j + 0.5 * lambda * log_j * log_j);

    const Mat3 p = mu * (f - f_inv_t) + lambda * log_j * f_inv_t;
    const Mat3 h = -volume * p * bm.transpose();
    out.forces.row(1) = h.col(0).transpose();
    out.forces.row(2) = h.col(1).transpose();
    out.forces.row(3) = h.col(2).transpose();
    out.forces.row(0) = -(h.col(0) + h.col(1) + h.col(2)).transpose();

    for (int node = 0; node < 4; ++node) {
        for (int axis = 0; axis < 3; ++axis) {
            Mat3 dds = Mat3::Zero();
            if (node == 0)
                dds.row(axis).setConstant(-1.0);
            else
                dds(axis, node - 1) = 1.0;
            const Mat3 df = dds * bm;
            const Mat3 dp = mu * df +
                            (mu - lambda * log_j) * (f_inv_t * df.transpose() * f_inv_t) +
                            lambda * (f_inv * df).trace() * f_inv_t;
            const Mat3 dh = -volume * dp * bm.transpose();
            Eigen::Matrix<double, 4, 3> dforce;
            dforce.row(1) = dh.col(0).transpose();
            dforce.row(2) = dh.col(1).transpose();
            dforce.row(3) = dh.col(2).transpose();
            dforce.row(0) = -(dh.col(0) + dh.col(1) + dh.col(2)).transpose();
            const int col = 3 * node + axis;
            for (int r = 0; r < 4; ++r)
                for (int a = 0; a < 3; ++a) out.tangent(3 * r + a, col) = -dforce(r, a);
        }
    }
    return out;
}

FemSystem::FemSystem(const TetMesh& mesh, const MaterialSet& materials) : mesh_(&mesh) {
    mesh.validate();
    elements_.reserve(mesh.tet_count());
    for (int t = 0; t < mesh.tet_count(); ++t) {
        const auto& tet = mesh.tets[t];
        const Mat3 dm = edge_matrix(mesh.nodes[tet[0]], mesh.nodes[tet[1]],
                                    mesh.nodes[tet[2]], mesh.nodes[tet[3]]);
        const double volume = dm.determinant() / 6.0;
        if (!(volume > 1e-12))
            throw InvalidMeshError("degenerate tetrahedron " + std::to_string(t));
        const Material& m = materials.of(mesh.element_tissue(t));
        elements_.push_back({dm.inverse(), volume, m.mu, m.lambda});
    }
}

double FemSystem::assemble(const VecX& u, VecX* grad,
                           std::vector<Eigen::Triplet<double>>* triplets) const {
    double energy = 0.0;
    if (grad) grad->setZero();
    if (triplets) {
        triplets->clear();
        triplets->reserve(elements_.size() * 144);
    }
    for (std::size_t t = 0; t < elements_.size(); ++t) {
        const Element& el = elements_[t];
        const auto& tet = mesh_->tets[t];
        Mat3 ds;
        for (int c = 0; c < 3; ++c) {
            const int a = tet[c + 1];
            const int b = tet[0];
            ds.col(c) = (mesh_->nodes[a] + u.segment<3>(3 * a)) -
                        (mesh_->nodes[b] + u.segment<3>(3 * b));
        }
        const Mat3 f = ds * el.bm;
        const double j = f.determinant();
        if (!(j > 0.0)) throw ElementInversionError(static_cast<int>(t), j);
        const double log_j = std::log(j);
        const Mat3 f_inv = f.inverse();
        const Mat3 f_inv_t = f_inv.transpose();
        energy += el.volume * (0.5 * el.mu * (f.squaredNorm() - 3.0) - el.mu * log_j +
                               0.5 * el.lambda * log_j * log_j);
        if (!grad && !triplets) continue;

        const Mat3 p = el.mu * (f - f_inv_t) + el.lambda * log_j * f_inv_t;
        if (grad) {
            const Mat3 g = el.volume * p * el.bm.transpose();
            for (int c = 0; c < 3; ++c) {
                grad->segment<3>(3 * tet[c + 1]) += g.col(c);
                grad->segment<3>(3 * tet[0]) -= g.col(c);
            }
        }
        if (triplets) {
            Eigen::Matrix<double, 12, 12> k;
            for (int node = 0; node < 4; ++node) {
                for (int axis = 0; axis < 3; ++axis) {
                    Mat3 dds = Mat3::Zero();
                    if (node == 0)
                        dds.row(axis).setConstant(-1.0);
                    else
                        dds(axis, node - 1) = 1.0;
                    const Mat3 df = dds * el.bm;
                    const Mat3 dp =
                        el.mu * df +
                        (el.mu - el.lambda * log_j) * (f_inv_t * df.transpose() * f_inv_t) +
                        el.lambda * (f_inv * df).trace() * f_inv_t;
                    const Mat3 dg = el.volume * dp * el.bm.transpose();
                    const int col = 3 * node + axis;
                    for (int c = 0; c < 3; ++c)
                        for (int a = 0; a < 3; ++a) k(3 * (c + 1) + a, col) = dg(a, c);
                    for (int a = 0; a < 3; ++a)
                        k(a, col) = -(dg(a, 0) + dg(a, 1) + dg(a, 2));
                }
            }
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c)
                    for (int ra = 0; ra < 3; ++ra)
                        for (int ca = 0; ca < 3; ++ca)
                            triplets->emplace_back(3 * tet[r] + ra, 3 * tet[c] + ca,
                                                   k(3 * r + ra, 3 * c + ca));
        }
    }
    return energy;
}

bool FemSystem::try_total_energy(const VecX& u, const VecX& f_ext, double* energy) const {
    double strain = 0.0;
    for (std::size_t t = 0; t < elements_.size(); ++t) {
        const Element& el = elements_[t];
        const auto& tet = mesh_->tets[t];
        Mat3 ds;
        for (int c = 0; c < 3; ++c) {
            const int a = tet[c + 1];
            const int b = tet[0];
            ds.col(c) = (mesh_->nodes[a] + u.segment<3>(3 * a)) -
                        (mesh_->nodes[b] + u.segment<3>(3 * b));
        }
        double psi = 0.0;
        if (!energy_density(ds * el.bm, el.mu, el.lambda, &psi)) return false;
        strain += el.volume * psi;
    }
    *energy = strain - f_ext.dot(u);
    return std::isfinite(*energy);
}

double FemSystem::strain_energy(const DisplacementField& field) const {
    if (field.node_count() != mesh_->node_count())
        throw ShapeError("displacement field does not match mesh node count");
    const VecX u = flatten(field.u);
    return assemble(u, nullptr, nullptr);
}

MatN3 FemSystem::internal_forces(const DisplacementField& field) const {
    if (field.node_count() != mesh_->node_count())
        throw ShapeError("displacement field does not match mesh node count");
    const VecX u = flatten(field.u);
    VecX grad(u.size());
    assemble(u, &grad, nullptr);
    return unflatten(-grad);
}

namespace {

using SpMat = Eigen::SparseMatrix<double>;

// Newton direction with LDLT, escalating diagonal shifts if the factorization
// fails or yields a non-descent direction; steepest descent as a last resort.
VecX newton_direction(const std::vector<Eigen::Triplet<double>>& triplets, int n_free,
                      const VecX& g_free) {
    double diag_max = 1e-30;
    for (const auto& tr : triplets)
        if (tr.row() == tr.col()) diag_max = std::max(diag_max, std::abs(tr.value()));
    double shift = 0.0;
    for (int attempt = 0; attempt < 10; ++attempt) {
        std::vector<Eigen::Triplet<double>> shifted = triplets;
        if (shift > 0.0)
            for (int i = 0; i < n_free; ++i) shifted.emplace_back(i, i, shift);
        SpMat k(n_free, n_free);
        k.setFromTriplets(shifted.begin(), shifted.end());
        Eigen::SimplicialLDLT<SpMat> ldlt(k);
        if (ldlt.info() == Eigen::Success) {
            const VecX d = ldlt.solve(-g_free);
            if (d.allFinite() && g_free.dot(d) < 0.0) return d;
        }
        shift = shift == 0.0 ? 1e-10 * diag_max : shift * 100.0;
    }
    return -g_free;
}

}  // namespace

DisplacementField FemSystem::solve(const MatN3& external_force,
                                   const std::vector<PrescribedDof>& prescribed,
                                   const SolverOptions& options,
                                   const DisplacementField* warm_start) const {
    const int n = mesh_->node_count();
    if (external_force.rows() != n)
        throw ShapeError("external force rows do not match mesh node count");
    const int ndof = 3 * n;

    VecX u = VecX::Zero(ndof);
    if (warm_start) {
        if (warm_start->node_count() != n)
            throw ShapeError("warm start does not match mesh node count");
        u = flatten(warm_start->u);
    }

    std::vector<char> constrained(ndof, 0);
    for (int i = 0; i < n; ++i)
        if (mesh_->node_bc[i] == NodeBc::Fixed)
            for (int a = 0; a < 3; ++a) {
                constrained[3 * i + a] = 1;
                u[3 * i + a] = 0.0;
            }
    for (const auto& pd : prescribed) {
        if (pd.node < 0 || pd.node >= n || pd.axis < 0 || pd.axis > 2)
            throw InvalidParameterError("prescribed dof out of range");
        const int d = 3 * pd.node + pd.axis;
        if (constrained[d] && u[d] != pd.value)
            throw InvalidParameterError("conflicting constraints at node " +
                                        std::to_string(pd.node));
        constrained[d] = 1;
        u[d] = pd.value;
    }

    std::vector<int> free_index(ndof, -1);
    int n_free = 0;
    for (int d = 0; d < ndof; ++d)
        if (!constrained[d]) free_index[d] = n_free++;

    const VecX f_ext = flatten(external_force);

    VecX grad(ndof);
    std::vector<Eigen::Triplet<double>> triplets;
    std::vector<Eigen::Triplet<double>> free_triplets;
    VecX g_free(n_free);
    double residual = std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < options.max_iterations; ++iter) {
        const double strain = assemble(u, &grad, &triplets);
        const double energy_now = strain - f_ext.dot(u);
        grad -= f_ext;

        residual = 0.0;
        for (int d = 0; d < ndof; ++d)
            if (!constrained[d]) residual = std::max(residual, std::abs(grad[d]));
        if (residual < options.residual_tol) return {unflatten(u)};
        if (n_free == 0)
            throw ConvergenceError("all dofs constrained but residual above tolerance",
                                   residual);

        free_triplets.clear();
        free_triplets.reserve(triplets.size());
        for (const auto& tr : triplets) {
            const int r = free_index[tr.row()];
            const int c = free_index[tr.col()];
            if (r >= 0 && c >= 0) free_triplets.emplace_back(r, c, tr.value());
        }
        for (int d = 0; d < ndof; ++d)
            if (!constrained[d]) g_free[free_index[d]] = grad[d];

        const VecX direction = newton_direction(free_triplets, n_free, g_free);

        double alpha = 1.0;
        int halvings = 0;
        VecX u_try = u;
        while (true) {
            for (int d = 0; d < ndof; ++d)
                if (!constrained[d]) u_try[d] = u[d] + alpha * direction[free_index[d]];
            double energy_try = 0.0;
            if (try_total_energy(u_try, f_ext, &energy_try) && energy_try < energy_now)
                break;
            if (++halvings > options.max_halvings)
                throw ConvergenceError("line search failed to decrease energy", residual);
            alpha *= 0.5;
        }
        u = u_try;
    }
    throw ConvergenceError("Newton did not converge within " +
                               std::to_string(options.max_iterations) + " iterations",
                           residual);
}

DisplacementField solve_static(const TetMesh& mesh, const MaterialSet& materials,
                               const LoadCase& load, const SolverOptions& options) {
    validate_load_case(mesh, load);
    return FemSystem(mesh, materials).solve(load.force, {}, options);
}

std::vector<DisplacementField> incremental_solve(const TetMesh& mesh,
                                                 const MaterialSet& materials,
                                                 const MatN3& direction, double max_force,
                                                 int n_steps, const SolverOptions& options) {
    if (n_steps < 1) throw InvalidParameterError("n_steps must be >= 1");
    if (!(max_force >= 0.0)) throw InvalidParameterError("max_force must be >= 0");
    if (direction.rows() != mesh.node_count())
        throw ShapeError("direction rows do not match mesh node count");
    double total = 0.0;
    for (Eigen::Index i = 0; i < direction.rows(); ++i) {
        const double mag = direction.row(i).norm();
        if (mag > 0.0 && mesh.node_bc[i] == NodeBc::Fixed)
            throw InvalidParameterError("direction pattern loads fixed node " +
                                        std::to_string(i));
        total += mag;
    }
    if (!(total > 0.0)) throw InvalidParameterError("direction pattern is zero");

    const FemSystem system(mesh, materials);
    const MatN3 full_force = direction * (max_force / total);
    std::vector<DisplacementField> fields;
    fields.reserve(n_steps);
    DisplacementField prev = DisplacementField::zero(mesh.node_count());
    for (int t = 1; t <= n_steps; ++t) {
        const MatN3 f = full_force * (static_cast<double>(t) / n_steps);
        prev = system.solve(f, {}, options, &prev);
        fields.push_back(prev);
    }
    return fields;
}

DisplacementField prescribed_compression(const TetMesh& mesh, const MaterialSet& materials,
                                         int axis, double compression_fraction,
                                         int n_substeps, const SolverOptions& options) {
    if (axis < 0 || axis > 2) throw InvalidParameterError("axis must be 0, 1 or 2");
    if (!(compression_fraction >= 0.0 && compression_fraction < 0.5))
        throw InvalidParameterError("compression_fraction must lie in [0, 0.5)");
    if (n_substeps < 1) throw InvalidParameterError("n_substeps must be >= 1");
    const int n = mesh.node_count();
    if (compression_fraction == 0.0) return DisplacementField::zero(n);

    Vec3 lo, hi;
    mesh.bounding_box(lo, hi);
    const double extent = hi[axis] - lo[axis];
    if (!(extent > 0.0)) throw InvalidMeshError("mesh has zero extent along the axis");
    const double travel = compression_fraction * extent;

    const FemSystem system(mesh, materials);
    const MatN3 zero_force = MatN3::Zero(n, 3);
    DisplacementField field = DisplacementField::zero(n);
    for (int s = 1; s <= n_substeps; ++s) {
        const double top = hi[axis] - travel * (static_cast<double>(s) / n_substeps);
        std::vector<PrescribedDof> pinned;
        for (int i = 0; i < n; ++i) {
            if (mesh.node_bc[i] == NodeBc::Fixed) continue;
            const double c = mesh.nodes[i][axis];
            if (c > top)
                pinned.push_back({i, axis, top - c});
            else if (c < lo[axis])
                pinned.push_back({i, axis, lo[axis] - c});
        }
        field = system.solve(zero_force, pinned, options, &field);
    }
    return field;
}

namespace {

// Line-oriented reader that strips '#' comments and tracks line numbers.
class FieldReader {
public:
    explicit FieldReader(std::istream& in) : in_(in) {}

    bool next(std::string* out) {
        std::string raw;
        while (std::getline(in_, raw)) {
            ++line_;
            const auto hash = raw.find('#');
            if (hash != std::string::npos) raw.erase(hash);
            bool blank = true;
            for (char ch : raw)
                if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
            if (blank) continue;
            *out = raw;
            return true;
        }
        return false;
    }

    int line() const { return line_; }

private:
    std::istream& in_;
    int line_ = 0;
};

}  // namespace

DisplacementField read_displacement_field(std::istream& in) {
    FieldReader reader(in);
    std::string line;
    if (!reader.next(&line)) throw ParseError("empty displacement file", reader.line());
    {
        std::istringstream ss(line);
        std::string magic, version;
        ss >> magic >> version;
        if (magic != "dispfield" || version != "v1")
            throw ParseError("expected header 'dispfield v1'", reader.line());
    }
    if (!reader.next(&line)) throw ParseError("missing node count", reader.line());
    long long n = 0;
    {
        std::istringstream ss(line);
        std::string key;
        ss >> key >> n;
        if (ss.fail() || key != "nodes" || n < 0)
            throw ParseError("expected 'nodes N'", reader.line());
    }
    DisplacementField field = DisplacementField::zero(static_cast<int>(n));
    for (long long i = 0; i < n; ++i) {
        if (!reader.next(&line))
            throw ParseError("expected " + std::to_string(n) + " displacement rows, got " +
                                 std::to_string(i),
                             reader.line());
        std::istringstream ss(line);
        double dx, dy, dz;
        ss >> dx >> dy >> dz;
        std::string extra;
        if (ss.fail() || (ss >> extra))
            throw ParseError("displacement row must have exactly 3 values", reader.line());
        field.u.row(i) << dx, dy, dz;
    }
    return field;
}

DisplacementField read_displacement_field(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return read_displacement_field(in);
}

void write_displacement_field(const DisplacementField& field, std::ostream& out) {
    out << "dispfield v1\n";
    out << "nodes " << field.node_count() << "\n";
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < field.u.rows(); ++i)
        out << field.u(i, 0) << " " << field.u(i, 1) << " " << field.u(i, 2) << "\n";
    if (!out) throw IoError("failed writing displacement field");
}

void write_displacement_field(const DisplacementField& field, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_displacement_field(field, out);
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace gfem
