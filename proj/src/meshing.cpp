#include "dt/meshing.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace dt {

namespace {

TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("mesh file not found: " + path);
  TriMesh mesh;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno++;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ss >> p.x >> p.y >> p.z))
        throw MeshError(path + ":" + std::to_string(lineno) + ": bad vertex");
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        // "i", "i/j", "i/j/k" forms; only the position index matters
        int v = std::stoi(tok.substr(0, tok.find('/')));
        if (v < 0) v = static_cast<int>(mesh.vertices.size()) + v + 1;
        if (v < 1 || v > static_cast<int>(mesh.vertices.size()))
          throw MeshError(path + ":" + std::to_string(lineno) + ": face index out of range");
        idx.push_back(v - 1);
      }
      if (idx.size() < 3)
        throw MeshError(path + ":" + std::to_string(lineno) + ": face with < 3 vertices");
      for (size_t k = 2; k < idx.size(); k++)  // fan triangulation
        mesh.triangles.push_back({idx[0], idx[static_cast<int>(k) - 1], idx[k]});
    }
  }
  return mesh;
}

TriMesh load_stl_ascii(const std::string& path) {
  std::ifstream in(path);
  TriMesh mesh;
  std::string tok;
  std::vector<Vec3> tri;
  std::map<std::array<real, 3>, int> dedup;
  while (in >> tok) {
    if (tok == "vertex") {
      Vec3 p;
      if (!(in >> p.x >> p.y >> p.z)) throw MeshError(path + ": truncated vertex");
      tri.push_back(p);
      if (tri.size() == 3) {
        std::array<int, 3> f;
        for (int k = 0; k < 3; k++) {
          std::array<real, 3> key{tri[k].x, tri[k].y, tri[k].z};
          auto it = dedup.find(key);
          if (it == dedup.end()) {
            it = dedup.emplace(key, static_cast<int>(mesh.vertices.size())).first;
            mesh.vertices.push_back(tri[k]);
          }
          f[k] = it->second;
        }
        mesh.triangles.push_back(f);
        tri.clear();
      }
    }
  }
  return mesh;
}

TriMesh load_stl_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char header[80];
  if (!in.read(header, 80)) throw MeshError(path + ": truncated STL header at byte 0");
  uint32_t count = 0;
  if (!in.read(reinterpret_cast<char*>(&count), 4))
    throw MeshError(path + ": truncated STL triangle count at byte 80");
  TriMesh mesh;
  std::map<std::array<float, 3>, int> dedup;
  for (uint32_t t = 0; t < count; t++) {
    char rec[50];
    if (!in.read(rec, 50))
      throw MeshError(path + ": truncated STL record at byte " +
                      std::to_string(84 + static_cast<size_t>(t) * 50));
    std::array<int, 3> f;
    for (int k = 0; k < 3; k++) {
      float xyz[3];
      std::memcpy(xyz, rec + 12 + 12 * k, 12);
      std::array<float, 3> key{xyz[0], xyz[1], xyz[2]};
      auto it = dedup.find(key);
      if (it == dedup.end()) {
        it = dedup.emplace(key, static_cast<int>(mesh.vertices.size())).first;
        mesh.vertices.push_back({xyz[0], xyz[1], xyz[2]});
      }
      f[k] = it->second;
    }
    mesh.triangles.push_back(f);
  }
  return mesh;
}

bool stl_is_ascii(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char buf[512] = {};
  in.read(buf, sizeof(buf) - 1);
  std::string head(buf, static_cast<size_t>(in.gcount()));
  return head.rfind("solid", 0) == 0 && head.find("facet") != std::string::npos;
}

// Möller–Trumbore, returns t or a negative value on miss.
real ray_triangle(const Vec3& orig, const Vec3& dir, const Vec3& a, const Vec3& b,
                  const Vec3& c) {
  Vec3 e1 = b - a, e2 = c - a;
  Vec3 p = cross(dir, e2);
  real det_ = dot(e1, p);
  if (std::abs(det_) < 1e-14) return -1;
  real inv = 1 / det_;
  Vec3 tv = orig - a;
  real u = dot(tv, p) * inv;
  if (u < 0 || u > 1) return -1;
  Vec3 q = cross(tv, e1);
  real v = dot(dir, q) * inv;
  if (v < 0 || u + v > 1) return -1;
  return dot(e2, q) * inv;
}

}  // namespace

TriMesh load_surface_mesh(const std::string& path) {
  std::ifstream probe(path);
  if (!probe) throw MeshError("mesh file not found: " + path);
  probe.close();
  auto dotpos = path.find_last_of('.');
  std::string ext = dotpos == std::string::npos ? "" : path.substr(dotpos + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  TriMesh mesh;
  if (ext == "obj")
    mesh = load_obj(path);
  else if (ext == "stl")
    mesh = stl_is_ascii(path) ? load_stl_ascii(path) : load_stl_binary(path);
  else
    throw MeshError("unsupported mesh format: " + path);
  if (mesh.triangles.empty()) throw MeshError("mesh has no triangles: " + path);
  return mesh;
}

bool point_inside_mesh(const TriMesh& mesh, const Vec3& p) {
  // Slightly irrational direction avoids edge-grazing parity errors.
  const Vec3 dir = normalized(Vec3{0.577215, 0.301029, 0.693147});
  int hits = 0;
  for (const auto& tri : mesh.triangles) {
    real t = ray_triangle(p, dir, mesh.vertices[tri[0]], mesh.vertices[tri[1]],
                          mesh.vertices[tri[2]]);
    if (t >= -1e-12 && t < 1e-12) return true;  // on the surface: inside
    if (t > 0) hits++;
  }
  return hits % 2 == 1;
}

void check_watertight(const TriMesh& mesh) {
  std::map<std::pair<int, int>, int> edges;
  for (const auto& tri : mesh.triangles)
    for (int k = 0; k < 3; k++) {
      int a = tri[k], b = tri[(k + 1) % 3];
      edges[{std::min(a, b), std::max(a, b)}]++;
    }
  for (const auto& [e, c] : edges)
    if (c != 2)
      throw MeshError("mesh is not watertight (edge " + std::to_string(e.first) + "-" +
                      std::to_string(e.second) + " shared by " + std::to_string(c) +
                      " faces)");
}

int VoxelLattice::inside_count() const {
  int c = 0;
  for (uint8_t b : inside) c += b;
  return c;
}

VoxelLattice voxelize(const TriMesh& mesh, int resolution) {
  check_watertight(mesh);
  Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
  for (const auto& v : mesh.vertices)
    for (int k = 0; k < 3; k++) {
      lo[k] = std::min(lo[k], v[k]);
      hi[k] = std::max(hi[k], v[k]);
    }
  Vec3 ext = hi - lo;
  real longest = std::max({ext.x, ext.y, ext.z});
  VoxelLattice lat;
  lat.cell = longest / resolution;
  lat.origin = lo;
  lat.nx = std::max(1, static_cast<int>(std::ceil(ext.x / lat.cell - 1e-9)));
  lat.ny = std::max(1, static_cast<int>(std::ceil(ext.y / lat.cell - 1e-9)));
  lat.nz = std::max(1, static_cast<int>(std::ceil(ext.z / lat.cell - 1e-9)));
  lat.inside.assign(static_cast<size_t>(lat.nx) * lat.ny * lat.nz, 0);
  for (int k = 0; k < lat.nz; k++)
    for (int j = 0; j < lat.ny; j++)
      for (int i = 0; i < lat.nx; i++)
        lat.inside[lat.idx(i, j, k)] = point_inside_mesh(mesh, lat.cell_center(i, j, k));
  if (lat.inside_count() == 0) throw MeshError("voxelization produced no interior cells");
  return lat;
}

namespace {

void split_cell(int n[8], bool odd, std::vector<std::array<int, 4>>& out) {
  const int v0 = n[0], v1 = n[1], v3 = n[2], v2 = n[3];
  const int v4 = n[4], v5 = n[5], v7 = n[6], v6 = n[7];
  if (!odd) {
    out.push_back({v0, v1, v2, v5});
    out.push_back({v0, v2, v3, v7});
    out.push_back({v4, v0, v5, v7});
    out.push_back({v2, v5, v6, v7});
    out.push_back({v0, v2, v5, v7});
  } else {
    out.push_back({v0, v1, v3, v4});
    out.push_back({v2, v1, v3, v6});
    out.push_back({v5, v1, v6, v4});
    out.push_back({v7, v3, v4, v6});
    out.push_back({v1, v3, v4, v6});
  }
}

}  // namespace

SensorMesh tetrahedralize_lattice(const VoxelLattice& lat) {
  if (lat.inside_count() == 0) throw MeshError("empty lattice");
  std::vector<int> remap(static_cast<size_t>(lat.nx + 1) * (lat.ny + 1) * (lat.nz + 1), -1);
  auto corner_id = [&](int i, int j, int k) {
    return (k * (lat.ny + 1) + j) * (lat.nx + 1) + i;
  };
  std::vector<Vec3> positions;
  std::vector<std::array<int, 4>> elements;
  auto get_node = [&](int i, int j, int k) {
    int& id = remap[corner_id(i, j, k)];
    if (id < 0) {
      id = static_cast<int>(positions.size());
      positions.push_back(lat.origin + Vec3{i * lat.cell, j * lat.cell, k * lat.cell});
    }
    return id;
  };
  for (int k = 0; k < lat.nz; k++)
    for (int j = 0; j < lat.ny; j++)
      for (int i = 0; i < lat.nx; i++) {
        if (!lat.inside[lat.idx(i, j, k)]) continue;
        int n[8];
        for (int dk = 0; dk < 2; dk++)
          for (int dj = 0; dj < 2; dj++)
            for (int di = 0; di < 2; di++)
              n[di + 2 * dj + 4 * dk] = get_node(i + di, j + dj, k + dk);
        split_cell(n, (i + j + k) % 2 == 1, elements);
      }
  SensorMesh mesh;
  mesh.rest_positions = positions;
  mesh.topology = finalize_topology(elements, positions);
  return mesh;
}

TriMesh make_box_mesh(const Vec3& h) {
  TriMesh m;
  for (int k = 0; k < 8; k++)
    m.vertices.push_back({(k & 1 ? h.x : -h.x), (k & 2 ? h.y : -h.y), (k & 4 ? h.z : -h.z)});
  const int quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4},
                           {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
  for (const auto& q : quads) {
    m.triangles.push_back({q[0], q[1], q[2]});
    m.triangles.push_back({q[0], q[2], q[3]});
  }
  return m;
}

TriMesh make_sphere_mesh(real radius, int subdiv) {
  // octahedron refined by midpoint subdivision
  TriMesh m;
  m.vertices = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  m.triangles = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4},
                 {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
  for (int s = 0; s < subdiv; s++) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      int id = static_cast<int>(m.vertices.size());
      m.vertices.push_back(normalized(m.vertices[a] + m.vertices[b]));
      midpoint[key] = id;
      return id;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& t : m.triangles) {
      int ab = mid(t[0], t[1]), bc = mid(t[1], t[2]), ca = mid(t[2], t[0]);
      next.push_back({t[0], ab, ca});
      next.push_back({t[1], bc, ab});
      next.push_back({t[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    m.triangles = next;
  }
  for (auto& v : m.vertices) v *= radius;
  return m;
}

}  // namespace dt
