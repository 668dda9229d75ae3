#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "cordseg/error.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

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

constexpr std::int16_t kUint8 = 2;
constexpr std::int16_t kInt16 = 4;
constexpr std::int16_t kFloat32 = 16;

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> buf;
  unsigned char chunk[1 << 16];
  for (;;) {
    const int n = gzread(f, chunk, sizeof(chunk));
    if (n < 0) {
      gzclose(f);
      throw FormatError("corrupt compressed stream in '" + path.string() + "'");
    }
    if (n == 0) break;
    buf.insert(buf.end(), chunk, chunk + n);
  }
  gzclose(f);
  return buf;
}

bool ends_with_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

Affine quatern_to_affine(const Nifti1Header& h) {
  double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    a = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= a; c *= a; d *= a;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  const double xd = std::abs(h.pixdim[1]) > 0 ? std::abs(h.pixdim[1]) : 1.0;
  const double yd = std::abs(h.pixdim[2]) > 0 ? std::abs(h.pixdim[2]) : 1.0;
  double zd = std::abs(h.pixdim[3]) > 0 ? std::abs(h.pixdim[3]) : 1.0;
  if (h.pixdim[0] < 0) zd = -zd;
  Affine m{};
  m[0][0] = (a * a + b * b - c * c - d * d) * xd;
  m[0][1] = 2.0 * (b * c - a * d) * yd;
  m[0][2] = 2.0 * (b * d + a * c) * zd;
  m[1][0] = 2.0 * (b * c + a * d) * xd;
  m[1][1] = (a * a + c * c - b * b - d * d) * yd;
  m[1][2] = 2.0 * (c * d - a * b) * zd;
  m[2][0] = 2.0 * (b * d - a * c) * xd;
  m[2][1] = 2.0 * (c * d + a * b) * yd;
  m[2][2] = (a * a + d * d - c * c - b * b) * zd;
  m[0][3] = h.qoffset_x;
  m[1][3] = h.qoffset_y;
  m[2][3] = h.qoffset_z;
  m[3][3] = 1.0;
  return m;
}

// Quaternion representation of an affine whose 3x3 block is orthogonal up to
// column scaling; qfac goes into pixdim[0].
void affine_to_quatern(const Affine& m, Nifti1Header& h) {
  double r[3][3];
  for (int j = 0; j < 3; ++j) {
    double n = std::sqrt(m[0][j] * m[0][j] + m[1][j] * m[1][j] + m[2][j] * m[2][j]);
    if (n == 0.0) n = 1.0;
    for (int i = 0; i < 3; ++i) r[i][j] = m[i][j] / n;
  }
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  double qfac = 1.0;
  if (det < 0) {
    qfac = -1.0;
    for (int i = 0; i < 3; ++i) r[i][2] = -r[i][2];
  }
  double a = r[0][0] + r[1][1] + r[2][2] + 1.0;
  double b, c, d;
  if (a > 0.5) {
    a = 0.5 * std::sqrt(a);
    b = 0.25 * (r[2][1] - r[1][2]) / a;
    c = 0.25 * (r[0][2] - r[2][0]) / a;
    d = 0.25 * (r[1][0] - r[0][1]) / a;
  } else {
    const double xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
    const double yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
    const double zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (r[0][1] + r[1][0]) / b;
      d = 0.25 * (r[0][2] + r[2][0]) / b;
      a = 0.25 * (r[2][1] - r[1][2]) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (r[0][1] + r[1][0]) / c;
      d = 0.25 * (r[1][2] + r[2][1]) / c;
      a = 0.25 * (r[0][2] - r[2][0]) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (r[0][2] + r[2][0]) / d;
      c = 0.25 * (r[1][2] + r[2][1]) / d;
      a = 0.25 * (r[1][0] - r[0][1]) / d;
    }
    if (a < 0.0) {
      b = -b; c = -c; d = -d;
    }
  }
  h.quatern_b = static_cast<float>(b);
  h.quatern_c = static_cast<float>(c);
  h.quatern_d = static_cast<float>(d);
  h.pixdim[0] = static_cast<float>(qfac);
  h.qoffset_x = static_cast<float>(m[0][3]);
  h.qoffset_y = static_cast<float>(m[1][3]);
  h.qoffset_z = static_cast<float>(m[2][3]);
}

template <class T>
T load_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

Volume decode(const std::vector<unsigned char>& buf, const std::filesystem::path& path) {
  if (buf.size() < sizeof(Nifti1Header)) throw FormatError("'" + path.string() + "' is too short for a NIfTI-1 header");
  Nifti1Header h;
  std::memcpy(&h, buf.data(), sizeof(h));
  if (h.sizeof_hdr != 348) {
    throw FormatError("'" + path.string() + "' is not a little-endian NIfTI-1 file");
  }
  if (std::memcmp(h.magic, "n+1\0", 4) != 0)
    throw FormatError("'" + path.string() + "' lacks the single-file NIfTI-1 magic \"n+1\"");
  const int ndim = h.dim[0];
  if (ndim < 1 || ndim > 7) throw FormatError("invalid dim[0] in '" + path.string() + "'");
  for (int i = 4; i <= ndim; ++i)
    if (h.dim[i] > 1)
      throw FormatError("non-3D image: '" + path.string() + "' has " + std::to_string(ndim) + " dimensions");

  Geometry g;
  for (int i = 0; i < 3; ++i) {
    const int n = (i < ndim) ? h.dim[i + 1] : 1;
    if (n < 1) throw FormatError("invalid dimension size in '" + path.string() + "'");
    g.dims[i] = static_cast<std::size_t>(n);
    const double p = (i < ndim) ? std::abs(static_cast<double>(h.pixdim[i + 1])) : 1.0;
    g.spacing[i] = p > 0.0 ? p : 1.0;
  }

  Affine a;
  if (h.sform_code > 0) {
    a = Affine{};
    for (int j = 0; j < 4; ++j) {
      a[0][j] = h.srow_x[j];
      a[1][j] = h.srow_y[j];
      a[2][j] = h.srow_z[j];
    }
    a[3][3] = 1.0;
  } else if (h.qform_code > 0) {
    a = quatern_to_affine(h);
  } else {
    a = Affine{};
    for (int i = 0; i < 3; ++i) a[i][i] = g.spacing[i];
    a[3][3] = 1.0;
  }
  g.affine = a;
  g.orientation = orientation_from_affine(a);

  std::size_t bytes_per = 0;
  switch (h.datatype) {
    case kUint8: bytes_per = 1; break;
    case kInt16: bytes_per = 2; break;
    case kFloat32: bytes_per = 4; break;
    default:
      throw FormatError("unsupported NIfTI datatype " + std::to_string(h.datatype) + " in '" + path.string() +
                        "' (supported: uint8, int16, float32)");
  }
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  const std::size_t n = g.voxel_count();
  if (offset < sizeof(Nifti1Header) || buf.size() < offset + n * bytes_per)
    throw FormatError("'" + path.string() + "' is truncated");

  const double slope = (h.scl_slope == 0.0f || !std::isfinite(h.scl_slope)) ? 1.0 : h.scl_slope;
  const double inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  Volume v(g);
  const unsigned char* p = buf.data() + offset;
  for (std::size_t i = 0; i < n; ++i) {
    double raw = 0.0;
    switch (h.datatype) {
      case kUint8: raw = p[i]; break;
      case kInt16: raw = load_le<std::int16_t>(p + 2 * i); break;
      default: raw = load_le<float>(p + 4 * i); break;
    }
    v.data[i] = (slope == 1.0 && inter == 0.0) ? static_cast<float>(raw) : static_cast<float>(raw * slope + inter);
  }
  return v;
}

void write_payload(const Geometry& g, std::int16_t datatype, const void* data, std::size_t bytes,
                   const std::filesystem::path& path) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int i = 0; i < 3; ++i) {
    if (g.dims[i] > 32767) throw ConfigError("dimension too large for NIfTI-1");
    h.dim[i + 1] = static_cast<std::int16_t>(g.dims[i]);
    h.pixdim[i + 1] = static_cast<float>(g.spacing[i]);
  }
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = datatype;
  h.bitpix = static_cast<std::int16_t>(datatype == kUint8 ? 8 : 32);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  const Affine a = affine_or_default(g);
  h.qform_code = 1;
  h.sform_code = 1;
  affine_to_quatern(a, h);
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = static_cast<float>(a[0][j]);
    h.srow_y[j] = static_cast<float>(a[1][j]);
    h.srow_z[j] = static_cast<float>(a[2][j]);
  }
  std::memcpy(h.magic, "n+1\0", 4);

  std::vector<unsigned char> out(352 + bytes, 0);
  std::memcpy(out.data(), &h, sizeof(h));
  std::memcpy(out.data() + 352, data, bytes);

  if (ends_with_gz(path)) {
    gzFile f = gzopen(path.c_str(), "wb6");
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    std::size_t done = 0;
    while (done < out.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(out.size() - done, 1u << 30));
      if (gzwrite(f, out.data() + done, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw IoError("write failed for '" + path.string() + "'");
      }
      done += chunk;
    }
    if (gzclose(f) != Z_OK) throw IoError("write failed for '" + path.string() + "'");
  } else {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    const bool ok = std::fwrite(out.data(), 1, out.size(), f) == out.size();
    if (std::fclose(f) != 0 || !ok) throw IoError("write failed for '" + path.string() + "'");
  }
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) { return decode(slurp(path), path); }

Mask read_mask(const std::filesystem::path& path) {
  const Volume v = read_volume(path);
  Mask m(v.geom);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const float x = v.data[i];
    if (x != 0.0f && x != 1.0f) throw FormatError("'" + path.string() + "' is not a binary mask");
    m.data[i] = x == 1.0f ? 1 : 0;
  }
  return m;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  validate(v);
  write_payload(v.geom, kFloat32, v.data.data(), v.data.size() * sizeof(float), path);
}

void write_volume(const Mask& m, const std::filesystem::path& path) {
  validate(m);
  write_payload(m.geom, kUint8, m.data.data(), m.data.size(), path);
}

}  // namespace cordseg
