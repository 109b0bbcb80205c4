#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include <zlib.h>

#include "priorecon/io.hpp"

namespace priorecon {
namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

constexpr std::int16_t kUint8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64;

bool is_gz(const std::filesystem::path &p) { return p.extension() == ".gz"; }

std::vector<char> read_all(const std::filesystem::path &path) {
  gzFile f = gzopen(path.c_str(), "rb");
  require(f != nullptr, ErrorKind::Data, "cannot open " + path.string());
  std::vector<char> out;
  std::vector<char> buf(1 << 16);
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
  const bool err = n < 0;
  gzclose(f);
  require(!err, ErrorKind::Data, "read error in " + path.string());
  return out;
}

} // namespace

void write_nifti(const std::filesystem::path &path, const Volume &vol) {
  require(!vol.slices.empty(), ErrorKind::InvalidInput, "write_nifti: empty volume");
  const Dims d = vol.dims();
  for (const auto &s : vol.slices) require(s.dims() == d, ErrorKind::InvalidInput, "write_nifti: slices differ in dims");
  require(d.ny < 32768 && d.nz < 32768 && vol.n_slices() < 32768, ErrorKind::InvalidInput, "write_nifti: volume too large");
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(d.nz);
  h.dim[2] = static_cast<std::int16_t>(d.ny);
  h.dim[3] = static_cast<std::int16_t>(vol.n_slices());
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = kFloat32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = static_cast<float>(vol.spacing[2]);
  h.pixdim[2] = static_cast<float>(vol.spacing[1]);
  h.pixdim[3] = static_cast<float>(vol.spacing[0]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2; // mm
  h.sform_code = 1;
  h.srow_x[0] = h.pixdim[1];
  h.srow_y[1] = h.pixdim[2];
  h.srow_z[2] = h.pixdim[3];
  std::memcpy(h.magic, "n+1\0", 4);

  std::vector<char> bytes(352, 0);
  std::memcpy(bytes.data(), &h, sizeof h);
  const std::size_t n = d.size() * vol.slices.size();
  std::vector<float> data;
  data.reserve(n);
  for (const auto &s : vol.slices)
    for (double v : s.values()) data.push_back(static_cast<float>(v));
  const auto *raw = reinterpret_cast<const char *>(data.data());
  bytes.insert(bytes.end(), raw, raw + n * sizeof(float));

  gzFile f = gzopen(path.c_str(), is_gz(path) ? "wb6" : "wbT");
  require(f != nullptr, ErrorKind::Data, "cannot write " + path.string());
  const int w = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  const int rc = gzclose(f);
  require(w == static_cast<int>(bytes.size()) && rc == Z_OK, ErrorKind::Data, "write error in " + path.string());
}

Volume read_nifti(const std::filesystem::path &path) {
  const auto bytes = read_all(path);
  require(bytes.size() >= 348, ErrorKind::Data, path.string() + ": truncated NIfTI header");
  Nifti1Header h;
  std::memcpy(&h, bytes.data(), sizeof h);
  require(h.sizeof_hdr == 348, ErrorKind::Data, path.string() + ": not a NIfTI-1 file (big-endian files are not supported)");
  require(std::memcmp(h.magic, "n+1", 3) == 0, ErrorKind::Data, path.string() + ": only single-file NIfTI (n+1) is supported");
  require(h.dim[0] >= 2 && h.dim[0] <= 7, ErrorKind::Data, path.string() + ": bad dim[0]");
  const int nz = h.dim[1], ny = h.dim[2];
  const int ns = h.dim[0] >= 3 ? h.dim[3] : 1;
  for (int i = 4; i <= h.dim[0]; ++i)
    require(h.dim[i] <= 1, ErrorKind::Data, path.string() + ": only 2D/3D magnitude volumes are supported");
  require(nz > 0 && ny > 0 && ns > 0, ErrorKind::Data, path.string() + ": non-positive dims");
  const std::size_t n = static_cast<std::size_t>(nz) * ny * ns;
  const std::size_t off = static_cast<std::size_t>(h.vox_offset);
  std::size_t bpv = 0;
  switch (h.datatype) {
  case kUint8:
    bpv = 1;
    break;
  case kInt16:
    bpv = 2;
    break;
  case kInt32:
  case kFloat32:
    bpv = 4;
    break;
  case kFloat64:
    bpv = 8;
    break;
  default:
    fail(ErrorKind::Data, path.string() + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  require(bytes.size() >= off + n * bpv, ErrorKind::Data, path.string() + ": truncated voxel data");
  const double slope = (h.scl_slope == 0.0f || !std::isfinite(h.scl_slope)) ? 1.0 : h.scl_slope;
  const double inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  const char *p = bytes.data() + off;
  auto voxel = [&](std::size_t i) -> double {
    switch (h.datatype) {
    case kUint8:
      return static_cast<unsigned char>(p[i]);
    case kInt16: {
      std::int16_t v;
      std::memcpy(&v, p + 2 * i, 2);
      return v;
    }
    case kInt32: {
      std::int32_t v;
      std::memcpy(&v, p + 4 * i, 4);
      return v;
    }
    case kFloat32: {
      float v;
      std::memcpy(&v, p + 4 * i, 4);
      return v;
    }
    default: {
      double v;
      std::memcpy(&v, p + 8 * i, 8);
      return v;
    }
    }
  };
  Volume vol;
  vol.spacing = {h.pixdim[3] > 0 ? h.pixdim[3] : 1.0, h.pixdim[2] > 0 ? h.pixdim[2] : 1.0, h.pixdim[1] > 0 ? h.pixdim[1] : 1.0};
  for (int s = 0; s < ns; ++s) {
    ImageSlice img({ny, nz});
    for (std::size_t i = 0; i < img.size(); ++i) {
      const double v = slope * voxel(s * img.size() + i) + inter;
      require(std::isfinite(v), ErrorKind::Data, path.string() + ": non-finite voxel");
      img[i] = v;
    }
    vol.slices.push_back(std::move(img));
  }
  return vol;
}

} // namespace priorecon
