#include <cstdint>
#include <vector>

#include <hdf5.h>

#include "priorecon/io.hpp"

namespace priorecon {
namespace {

// Closes an HDF5 handle on scope exit.
class Handle {
public:
  Handle(hid_t id, herr_t (*close)(hid_t)) : id_(id), close_(close) {}
  Handle(const Handle &) = delete;
  Handle &operator=(const Handle &) = delete;
  ~Handle() {
    if (id_ >= 0) close_(id_);
  }
  hid_t get() const { return id_; }
  bool ok() const { return id_ >= 0; }

private:
  hid_t id_;
  herr_t (*close_)(hid_t);
};

struct C64 {
  float r, i;
};
struct C128 {
  double r, i;
};

hid_t complex_type(bool dbl) {
  const std::size_t sz = dbl ? sizeof(C128) : sizeof(C64);
  hid_t t = H5Tcreate(H5T_COMPOUND, sz);
  H5Tinsert(t, "r", 0, dbl ? H5T_NATIVE_DOUBLE : H5T_NATIVE_FLOAT);
  H5Tinsert(t, "i", sz / 2, dbl ? H5T_NATIVE_DOUBLE : H5T_NATIVE_FLOAT);
  return t;
}

void check(herr_t rc, const std::string &what) { require(rc >= 0, ErrorKind::Data, "HDF5: " + what); }

void write_dataset(hid_t file, const char *name, hid_t mem_type, hid_t file_type, const std::vector<hsize_t> &shape,
                   const void *data) {
  Handle space(H5Screate_simple(static_cast<int>(shape.size()), shape.data(), nullptr), H5Sclose);
  Handle ds(H5Dcreate2(file, name, file_type, space.get(), H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT), H5Dclose);
  require(ds.ok(), ErrorKind::Data, std::string("HDF5: cannot create dataset ") + name);
  check(H5Dwrite(ds.get(), mem_type, H5S_ALL, H5S_ALL, H5P_DEFAULT, data), std::string("write ") + name);
}

template <class Grid> void write_complex(hid_t file, const char *name, const std::vector<Grid> &grids, const std::vector<hsize_t> &shape) {
  std::vector<C64> buf;
  for (const auto &g : grids)
    for (auto v : g.values()) buf.push_back({static_cast<float>(v.real()), static_cast<float>(v.imag())});
  Handle t(complex_type(false), H5Tclose);
  write_dataset(file, name, t.get(), t.get(), shape, buf.data());
}

template <class T> void write_attr(hid_t obj, const char *name, hid_t type, T value) {
  Handle space(H5Screate(H5S_SCALAR), H5Sclose);
  Handle a(H5Acreate2(obj, name, type, space.get(), H5P_DEFAULT, H5P_DEFAULT), H5Aclose);
  check(H5Awrite(a.get(), type, &value), std::string("write attribute ") + name);
}

template <class T> T read_attr(hid_t obj, const char *name, hid_t type, const std::string &file) {
  require(H5Aexists(obj, name) > 0, ErrorKind::Data, file + ": missing attribute '" + name + "'");
  Handle a(H5Aopen(obj, name, H5P_DEFAULT), H5Aclose);
  T v{};
  check(H5Aread(a.get(), type, &v), std::string("read attribute ") + name);
  return v;
}

std::vector<hsize_t> dataset_shape(hid_t ds) {
  Handle space(H5Dget_space(ds), H5Sclose);
  const int rank = H5Sget_simple_extent_ndims(space.get());
  std::vector<hsize_t> dims(std::max(rank, 0));
  H5Sget_simple_extent_dims(space.get(), dims.data(), nullptr);
  return dims;
}

// Reads a complex dataset of shape [slice, coil, y, z] or [coil, y, z].
std::vector<std::vector<cplx>> read_complex(hid_t file, const char *name, const std::string &path, int &n_slices,
                                            int &n_coils, Dims &dims) {
  Handle ds(H5Dopen2(file, name, H5P_DEFAULT), H5Dclose);
  require(ds.ok(), ErrorKind::Data, path + ": missing dataset '" + name + "'");
  Handle ftype(H5Dget_type(ds.get()), H5Tclose);
  require(H5Tget_class(ftype.get()) == H5T_COMPOUND && H5Tget_nmembers(ftype.get()) == 2 &&
              H5Tget_member_index(ftype.get(), "r") >= 0 && H5Tget_member_index(ftype.get(), "i") >= 0,
          ErrorKind::Data, path + ": dataset '" + name + "' must be a complex compound {r, i}");
  auto shape = dataset_shape(ds.get());
  require(shape.size() == 3 || shape.size() == 4, ErrorKind::Data,
          path + ": dataset '" + name + "' must have shape [coil, ky, kz] or [slice, coil, ky, kz]");
  if (shape.size() == 3) shape.insert(shape.begin(), 1);
  n_slices = static_cast<int>(shape[0]);
  n_coils = static_cast<int>(shape[1]);
  dims = {static_cast<int>(shape[2]), static_cast<int>(shape[3])};
  require(n_slices > 0 && n_coils > 0 && dims.ny > 0 && dims.nz > 0, ErrorKind::Data, path + ": empty dataset " + name);
  std::vector<C128> buf(shape[0] * shape[1] * shape[2] * shape[3]);
  Handle mt(complex_type(true), H5Tclose);
  check(H5Dread(ds.get(), mt.get(), H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data()), std::string("read ") + name);
  const std::size_t per = static_cast<std::size_t>(n_coils) * dims.size();
  std::vector<std::vector<cplx>> out(n_slices);
  for (int s = 0; s < n_slices; ++s) {
    out[s].resize(per);
    for (std::size_t i = 0; i < per; ++i) out[s][i] = cplx(buf[s * per + i].r, buf[s * per + i].i);
  }
  return out;
}

} // namespace

void write_container(const std::filesystem::path &path, const KSpaceContainer &c) {
  require(!c.kspace.empty(), ErrorKind::InvalidInput, "write_container: no k-space slices");
  const int nc = c.kspace.front().n_coils();
  const Dims d = c.kspace.front().dims();
  for (const auto &k : c.kspace) require(k.same_shape(nc, d), ErrorKind::InvalidInput, "write_container: slice shapes differ");
  require(c.mask.dims() == d, ErrorKind::InvalidInput, "write_container: mask dims do not match k-space");
  H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
  Handle file(H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT), H5Fclose);
  require(file.ok(), ErrorKind::Data, "cannot create " + path.string());
  const std::vector<hsize_t> shape{c.kspace.size(), static_cast<hsize_t>(nc), static_cast<hsize_t>(d.ny),
                                   static_cast<hsize_t>(d.nz)};
  write_complex(file.get(), "kspace", c.kspace, shape);
  write_dataset(file.get(), "mask", H5T_NATIVE_UINT8, H5T_STD_U8LE, {static_cast<hsize_t>(d.ny), static_cast<hsize_t>(d.nz)},
                c.mask.mask.storage().data());
  if (!c.sens_maps.empty()) {
    require(c.sens_maps.size() == c.kspace.size(), ErrorKind::InvalidInput, "write_container: sens_maps slice count mismatch");
    for (const auto &m : c.sens_maps) require(m.same_shape(nc, d), ErrorKind::InvalidInput, "write_container: sens_maps shape mismatch");
    write_complex(file.get(), "sens_maps", c.sens_maps, shape);
  }
  if (!c.reference.empty()) {
    require(c.reference.size() == c.kspace.size(), ErrorKind::InvalidInput, "write_container: reference slice count mismatch");
    std::vector<float> buf;
    for (const auto &r : c.reference) {
      require(r.dims() == d, ErrorKind::InvalidInput, "write_container: reference dims mismatch");
      for (double v : r.values()) buf.push_back(static_cast<float>(v));
    }
    write_dataset(file.get(), "reference", H5T_NATIVE_FLOAT, H5T_IEEE_F32LE,
                  {c.reference.size(), static_cast<hsize_t>(d.ny), static_cast<hsize_t>(d.nz)}, buf.data());
  }
  Handle root(H5Gopen2(file.get(), "/", H5P_DEFAULT), H5Gclose);
  write_attr(root.get(), "target_R", H5T_NATIVE_DOUBLE, c.mask.target_R);
  write_attr(root.get(), "center_radius", H5T_NATIVE_INT, c.mask.center_radius);
  write_attr(root.get(), "seed", H5T_NATIVE_UINT64, c.mask.seed);
  if (!c.subject_id.empty()) {
    Handle st(H5Tcopy(H5T_C_S1), H5Tclose);
    H5Tset_size(st.get(), c.subject_id.size());
    Handle space(H5Screate(H5S_SCALAR), H5Sclose);
    Handle a(H5Acreate2(root.get(), "subject_id", st.get(), space.get(), H5P_DEFAULT, H5P_DEFAULT), H5Aclose);
    check(H5Awrite(a.get(), st.get(), c.subject_id.data()), "write subject_id");
  }
}

KSpaceContainer read_container(const std::filesystem::path &path) {
  H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
  const std::string ps = path.string();
  require(std::filesystem::exists(path), ErrorKind::Data, ps + ": no such file");
  require(H5Fis_hdf5(path.c_str()) > 0, ErrorKind::Data, ps + ": not an HDF5 file");
  Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  require(file.ok(), ErrorKind::Data, "cannot open " + ps);
  KSpaceContainer c;
  int ns, nc;
  Dims d;
  auto k = read_complex(file.get(), "kspace", ps, ns, nc, d);
  for (auto &s : k) {
    KSpaceTensor t(nc, d, std::move(s));
    require(t.all_finite(), ErrorKind::Data, ps + ": k-space contains non-finite values");
    c.kspace.push_back(std::move(t));
  }

  require(H5Lexists(file.get(), "mask", H5P_DEFAULT) > 0, ErrorKind::Data, ps + ": missing dataset 'mask'");
  Handle mds(H5Dopen2(file.get(), "mask", H5P_DEFAULT), H5Dclose);
  require(mds.ok(), ErrorKind::Data, ps + ": cannot open dataset 'mask'");
  auto mshape = dataset_shape(mds.get());
  require(mshape.size() == 2 && static_cast<int>(mshape[0]) == d.ny && static_cast<int>(mshape[1]) == d.nz, ErrorKind::Data,
          ps + ": mask shape must be [ky, kz] = " + to_string(d));
  c.mask.mask = Plane<std::uint8_t>(d, 0);
  check(H5Dread(mds.get(), H5T_NATIVE_UINT8, H5S_ALL, H5S_ALL, H5P_DEFAULT, c.mask.mask.storage().data()), "read mask");
  for (auto v : c.mask.mask.values()) require(v <= 1, ErrorKind::Data, ps + ": mask entries must be 0 or 1");

  Handle root(H5Gopen2(file.get(), "/", H5P_DEFAULT), H5Gclose);
  c.mask.target_R = read_attr<double>(root.get(), "target_R", H5T_NATIVE_DOUBLE, ps);
  c.mask.center_radius = read_attr<int>(root.get(), "center_radius", H5T_NATIVE_INT, ps);
  c.mask.seed = read_attr<std::uint64_t>(root.get(), "seed", H5T_NATIVE_UINT64, ps);
  require(c.mask.target_R >= 1.0 && c.mask.center_radius >= 0, ErrorKind::Data, ps + ": invalid mask attributes");

  if (H5Lexists(file.get(), "sens_maps", H5P_DEFAULT) > 0) {
    int ms, mc;
    Dims md;
    auto m = read_complex(file.get(), "sens_maps", ps, ms, mc, md);
    require(ms == ns && mc == nc && md == d, ErrorKind::Data, ps + ": sens_maps shape does not match kspace");
    for (auto &s : m) c.sens_maps.emplace_back(nc, d, std::move(s));
  }
  if (H5Lexists(file.get(), "reference", H5P_DEFAULT) > 0) {
    Handle rds(H5Dopen2(file.get(), "reference", H5P_DEFAULT), H5Dclose);
    auto rshape = dataset_shape(rds.get());
    require(rshape.size() == 3 && static_cast<int>(rshape[0]) == ns && static_cast<int>(rshape[1]) == d.ny &&
                static_cast<int>(rshape[2]) == d.nz,
            ErrorKind::Data, ps + ": reference shape must be [slice, ky, kz]");
    std::vector<double> buf(rshape[0] * rshape[1] * rshape[2]);
    check(H5Dread(rds.get(), H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.data()), "read reference");
    for (int s = 0; s < ns; ++s)
      c.reference.emplace_back(d, std::vector<double>(buf.begin() + s * d.size(), buf.begin() + (s + 1) * d.size()));
  }
  if (H5Aexists(root.get(), "subject_id") > 0) {
    Handle a(H5Aopen(root.get(), "subject_id", H5P_DEFAULT), H5Aclose);
    Handle t(H5Aget_type(a.get()), H5Tclose);
    std::string s(H5Tget_size(t.get()), '\0');
    Handle mt(H5Tcopy(H5T_C_S1), H5Tclose);
    H5Tset_size(mt.get(), s.size());
    if (H5Aread(a.get(), mt.get(), s.data()) >= 0) c.subject_id = s.c_str();
  }
  return c;
}

} // namespace priorecon
