#include "priorecon/registration.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <signal.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <unistd.h>

#include "priorecon/io.hpp"

namespace priorecon {

std::string to_string(RegistrationBackend b) {
  switch (b) {
  case RegistrationBackend::Identity:
    return "identity";
  case RegistrationBackend::Affine:
    return "affine";
  case RegistrationBackend::External:
    return "external";
  }
  return "identity";
}

RegistrationBackend registration_backend_from_string(const std::string &s) {
  if (s == "identity") return RegistrationBackend::Identity;
  if (s == "affine") return RegistrationBackend::Affine;
  if (s == "external") return RegistrationBackend::External;
  fail(ErrorKind::Configuration, "unknown registration backend '" + s + "' (expected identity, affine or external)");
}

RegistrationTransform RegistrationTransform::identity() { return {}; }

RegistrationTransform RegistrationTransform::translation(double dy, double dz) {
  RegistrationTransform t;
  t.affine[2] = dy;
  t.affine[5] = dz;
  t.backend = RegistrationBackend::Affine;
  return t;
}

RegistrationTransform RegistrationTransform::rotation(double degrees, Dims dims) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cy = (dims.ny - 1) / 2.0, cz = (dims.nz - 1) / 2.0;
  RegistrationTransform t;
  t.affine = {c, -s, cy - c * cy + s * cz, s, c, cz - s * cy - c * cz, 0, 0, 1};
  t.backend = RegistrationBackend::Affine;
  return t;
}

double RegistrationTransform::determinant() const { return affine[0] * affine[4] - affine[1] * affine[3]; }

bool RegistrationTransform::is_identity() const {
  return affine == RegistrationTransform{}.affine && !displacement_field.has_value();
}

RegistrationTransform RegistrationTransform::inverse() const {
  require(!displacement_field.has_value(), ErrorKind::InvalidInput, "inverse: displacement fields are not invertible here");
  const double det = determinant();
  require(std::abs(det) > 1e-8, ErrorKind::InvalidInput, "inverse: singular transform");
  const double a = affine[0], b = affine[1], c = affine[3], d = affine[4];
  RegistrationTransform t;
  t.backend = backend;
  t.affine = {d / det, -b / det, 0, -c / det, a / det, 0, 0, 0, 1};
  t.affine[2] = -(t.affine[0] * affine[2] + t.affine[1] * affine[5]);
  t.affine[5] = -(t.affine[3] * affine[2] + t.affine[4] * affine[5]);
  return t;
}

double RegistrationTransform::rotation_degrees() const { return std::atan2(affine[3], affine[0]) * 180.0 / std::numbers::pi; }

std::array<double, 2> RegistrationTransform::apply(double y, double z) const {
  return {affine[0] * y + affine[1] * z + affine[2], affine[3] * y + affine[4] * z + affine[5]};
}

RegistrationTransform compose(const RegistrationTransform &a, const RegistrationTransform &b) {
  require(!a.displacement_field && !b.displacement_field, ErrorKind::InvalidInput, "compose: affine transforms only");
  RegistrationTransform t;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += b.affine[i * 3 + k] * a.affine[k * 3 + j];
      t.affine[i * 3 + j] = s;
    }
  t.backend = b.backend;
  return t;
}

namespace {

// Bilinear sample with zero fill; optional partial derivatives.
double sample(const ImageSlice &img, double y, double z, double *dy = nullptr, double *dz = nullptr) {
  const double fy = std::floor(y), fz = std::floor(z);
  const int y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
  const double ay = y - fy, az = z - fz;
  auto at = [&](int yy, int zz) { return (yy < 0 || zz < 0 || yy >= img.ny() || zz >= img.nz()) ? 0.0 : img(yy, zz); };
  if (y0 < -1 || z0 < -1 || y0 >= img.ny() || z0 >= img.nz()) {
    if (dy) *dy = 0.0;
    if (dz) *dz = 0.0;
    return 0.0;
  }
  const double m00 = at(y0, z0), m01 = at(y0, z0 + 1), m10 = at(y0 + 1, z0), m11 = at(y0 + 1, z0 + 1);
  if (dy) *dy = (1 - az) * (m10 - m00) + az * (m11 - m01);
  if (dz) *dz = (1 - ay) * (m01 - m00) + ay * (m11 - m10);
  return (1 - ay) * ((1 - az) * m00 + az * m01) + ay * ((1 - az) * m10 + az * m11);
}

ImageSlice downsample(const ImageSlice &img, int f) {
  if (f == 1) return img;
  const Dims d{std::max(1, img.ny() / f), std::max(1, img.nz() / f)};
  ImageSlice out(d);
  for (int y = 0; y < d.ny; ++y)
    for (int z = 0; z < d.nz; ++z) {
      double s = 0.0;
      int n = 0;
      for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b)
          if (y * f + a < img.ny() && z * f + b < img.nz()) {
            s += img(y * f + a, z * f + b);
            ++n;
          }
      out(y, z) = s / n;
    }
  return out;
}

// Affine parameterization about the image center: linear entries are scaled
// by the half-size so every parameter is a displacement in pixels.
struct AffineParams {
  std::array<double, 6> p{}; // l00, l01, l10, l11, ty, tz

  RegistrationTransform to_transform(Dims d) const {
    const double s = std::max(d.ny, d.nz) / 2.0;
    const double cy = (d.ny - 1) / 2.0, cz = (d.nz - 1) / 2.0;
    const double a = 1 + p[0] / s, b = p[1] / s, c = p[2] / s, e = 1 + p[3] / s;
    RegistrationTransform t;
    t.affine = {a, b, cy - a * cy - b * cz + p[4], c, e, cz - c * cy - e * cz + p[5], 0, 0, 1};
    t.backend = RegistrationBackend::Affine;
    return t;
  }
};

struct LevelData {
  int factor;
  ImageSlice fixed;
  ImageSlice moving;
};

// NCC between the fixed level image and the moving level image warped by the
// full-resolution transform; fills d NCC / d params when `grad` is set.
double level_ncc(const LevelData &lv, Dims full, const AffineParams &ap, std::array<double, 6> *grad) {
  const auto t = ap.to_transform(full);
  const double f = lv.factor, off = (f - 1) / 2.0;
  const double s = std::max(full.ny, full.nz) / 2.0;
  const double cy = (full.ny - 1) / 2.0, cz = (full.nz - 1) / 2.0;
  const Dims d = lv.fixed.dims();
  const std::size_t n = d.size();
  std::vector<double> w(n), gy(n), gz(n);
  std::vector<double> xs(n), zs(n);
  for (int y = 0; y < d.ny; ++y)
    for (int z = 0; z < d.nz; ++z) {
      const std::size_t i = static_cast<std::size_t>(y) * d.nz + z;
      const double X = f * y + off, Z = f * z + off;
      const auto u = t.apply(X, Z);
      w[i] = sample(lv.moving, (u[0] - off) / f, (u[1] - off) / f, grad ? &gy[i] : nullptr, grad ? &gz[i] : nullptr);
      xs[i] = X;
      zs[i] = Z;
    }
  double mf = 0, mw = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mf += lv.fixed[i];
    mw += w[i];
  }
  mf /= n;
  mw /= n;
  double sfw = 0, sff = 0, sww = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = lv.fixed[i] - mf, b = w[i] - mw;
    sfw += a * b;
    sff += a * a;
    sww += b * b;
  }
  if (sff <= 0 || sww <= 0) {
    if (grad) grad->fill(0.0);
    return 0.0;
  }
  const double nf = std::sqrt(sff), nw = std::sqrt(sww);
  const double r = sfw / (nf * nw);
  if (grad) {
    grad->fill(0.0);
    for (std::size_t i = 0; i < n; ++i) {
      // dr/dw_i, then chain through the sample position (moving level units = full / f)
      const double dr = (lv.fixed[i] - mf) / (nf * nw) - r * (w[i] - mw) / sww;
      const double ey = dr * gy[i] / f, ez = dr * gz[i] / f;
      const double ry = (xs[i] - cy) / s, rz = (zs[i] - cz) / s;
      (*grad)[0] += ey * ry;
      (*grad)[1] += ey * rz;
      (*grad)[2] += ez * ry;
      (*grad)[3] += ez * rz;
      (*grad)[4] += ey;
      (*grad)[5] += ez;
    }
  }
  return r;
}

RegistrationResult affine_register(const ImageSlice &prior, const ImageSlice &target, const RegistrationOptions &o) {
  const Dims full = target.dims();
  RegistrationResult res;
  AffineParams best;
  const LevelData full_level{1, target, prior};
  double best_full = level_ncc(full_level, full, best, nullptr);
  res.similarity_before = best_full;
  bool all_converged = true;
  for (int f : o.levels) {
    require(f >= 1, ErrorKind::Configuration, "registration level factors must be >= 1");
    const LevelData lv{f, downsample(target, f), downsample(prior, f)};
    AffineParams p = best;
    std::array<double, 6> g;
    double cur = level_ncc(lv, full, p, &g);
    double step = o.initial_step * f;
    bool converged = false;
    for (int it = 0; it < o.iterations_per_level; ++it) {
      double gn = 0;
      for (double v : g) gn += v * v;
      gn = std::sqrt(gn);
      if (gn == 0.0) {
        converged = true;
        break;
      }
      AffineParams cand = p;
      for (int k = 0; k < 6; ++k) cand.p[k] += step * g[k] / gn;
      std::array<double, 6> cg;
      const double v = level_ncc(lv, full, cand, &cg);
      if (v > cur) {
        const double gain = v - cur;
        p = cand;
        cur = v;
        g = cg;
        if (gain < o.tolerance * 1e-3 && step <= o.min_step * f) {
          converged = true;
          break;
        }
      } else {
        step *= 0.5;
        if (step < o.min_step * f) {
          converged = true;
          break;
        }
      }
    }
    all_converged = all_converged && converged;
    const double full_val = level_ncc(full_level, full, p, nullptr);
    if (full_val >= best_full) {
      best_full = full_val;
      best = p;
    }
    res.level_similarity.push_back(best_full);
  }
  res.transform = best.to_transform(full);
  res.registered = warp(prior, res.transform);
  res.similarity_after = ncc(res.registered, target);
  res.converged = all_converged;
  if (!all_converged) res.warning = "affine registration did not converge within the iteration budget; best-so-far returned";
  return res;
}

std::string shell_quote(const std::string &s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

std::string substitute(std::string cmd, const std::string &key, const std::string &value) {
  std::size_t pos;
  while ((pos = cmd.find(key)) != std::string::npos) cmd.replace(pos, key.size(), value);
  return cmd;
}

std::string read_text(const std::filesystem::path &p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

ImageSlice warp(const ImageSlice &img, const RegistrationTransform &t) {
  require(std::abs(t.determinant()) > 1e-8, ErrorKind::InvalidInput, "warp: singular transform");
  if (t.is_identity()) return img;
  if (t.displacement_field)
    require(t.displacement_field->size() == img.size(), ErrorKind::InvalidInput, "warp: displacement field size mismatch");
  ImageSlice out(img.dims());
  out.intensity_max = img.intensity_max;
  for (int y = 0; y < img.ny(); ++y)
    for (int z = 0; z < img.nz(); ++z) {
      auto u = t.apply(y, z);
      if (t.displacement_field) {
        const auto &dv = (*t.displacement_field)[static_cast<std::size_t>(y) * img.nz() + z];
        require(std::isfinite(dv[0]) && std::isfinite(dv[1]), ErrorKind::InvalidInput, "warp: non-finite displacement");
        u[0] += dv[0];
        u[1] += dv[1];
      }
      out(y, z) = sample(img, u[0], u[1]);
    }
  return out;
}

double ncc(const ImageSlice &a, const ImageSlice &b) {
  require(a.dims() == b.dims(), ErrorKind::InvalidInput, "ncc: dims mismatch");
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

ImageSlice run_external_registration(const ImageSlice &moving, const ImageSlice &fixed, const ExternalAdapterOptions &o) {
  require(!o.command_template.empty(), ErrorKind::Configuration, "external registration: empty command template");
  require(o.timeout_seconds > 0, ErrorKind::Configuration, "external registration: timeout must be positive");
  namespace fs = std::filesystem;
  const fs::path dir = o.work_dir.empty() ? fs::temp_directory_path() / "priorecon_reg" : o.work_dir;
  fs::create_directories(dir);

  // Serialize per working directory.
  const std::string lock_path = (dir / ".priorecon.lock").string();
  const int lock_fd = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
  require(lock_fd >= 0, ErrorKind::Adapter, "external registration: cannot open lock " + lock_path);
  struct Unlock {
    int fd;
    ~Unlock() {
      ::flock(fd, LOCK_UN);
      ::close(fd);
    }
  } unlock{lock_fd};
  ::flock(lock_fd, LOCK_EX);

  static std::atomic<unsigned> counter{0};
  const std::string tag = std::to_string(::getpid()) + "_" + std::to_string(counter++);
  const fs::path mv = dir / ("moving_" + tag + ".nii"), fx = dir / ("fixed_" + tag + ".nii"),
                 out = dir / ("out_" + tag + ".nii"), err = dir / ("stderr_" + tag + ".txt");
  write_nifti(mv, Volume{{moving}});
  write_nifti(fx, Volume{{fixed}});
  std::string cmd = o.command_template;
  cmd = substitute(cmd, "{moving}", shell_quote(mv.string()));
  cmd = substitute(cmd, "{fixed}", shell_quote(fx.string()));
  cmd = substitute(cmd, "{out}", shell_quote(out.string()));

  auto cleanup = [&] {
    std::error_code ec;
    for (const auto &p : {mv, fx, out, err}) fs::remove(p, ec);
  };

  const pid_t pid = ::fork();
  require(pid >= 0, ErrorKind::Adapter, "external registration: fork failed");
  if (pid == 0) {
    ::setpgid(0, 0);
    const int fd = ::open(err.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
    if (fd >= 0) {
      ::dup2(fd, STDERR_FILENO);
      ::dup2(fd, STDOUT_FILENO);
      ::close(fd);
    }
    ::execl("/bin/sh", "sh", "-c", cmd.c_str(), static_cast<char *>(nullptr));
    ::_exit(127);
  }
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(o.timeout_seconds);
  int status = 0;
  while (true) {
    const pid_t r = ::waitpid(pid, &status, WNOHANG);
    if (r == pid) break;
    if (std::chrono::steady_clock::now() > deadline) {
      ::kill(-pid, SIGKILL);
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      const std::string diag = read_text(err);
      cleanup();
      fail(ErrorKind::Adapter, "external registration timed out after " + std::to_string(o.timeout_seconds) + " s; stderr: " + diag);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const std::string diag = read_text(err);
    cleanup();
    fail(ErrorKind::Adapter, "external registration command failed (status " +
                                 std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) + "): " + diag);
  }
  if (!fs::exists(out)) {
    const std::string diag = read_text(err);
    cleanup();
    fail(ErrorKind::Adapter, "external registration produced no output file; stderr: " + diag);
  }
  Volume v;
  try {
    v = read_nifti(out);
  } catch (const Error &e) {
    cleanup();
    fail(ErrorKind::Adapter, std::string("external registration output unreadable: ") + e.what());
  }
  cleanup();
  require(v.n_slices() == 1 && v.dims() == moving.dims(), ErrorKind::Adapter,
          "external registration output has dims " + to_string(v.dims()) + ", expected " + to_string(moving.dims()));
  return v.slices.front();
}

RegistrationResult register_prior(const ImageSlice &prior, const ImageSlice &target, const RegistrationOptions &options) {
  require(prior.dims() == target.dims(), ErrorKind::InvalidInput,
          "register: prior dims " + to_string(prior.dims()) + " differ from target " + to_string(target.dims()));
  const auto t0 = std::chrono::steady_clock::now();
  RegistrationResult res;
  switch (options.backend) {
  case RegistrationBackend::Identity:
    res.registered = prior;
    res.transform = RegistrationTransform::identity();
    res.similarity_before = res.similarity_after = ncc(prior, target);
    res.level_similarity = {res.similarity_after};
    break;
  case RegistrationBackend::Affine:
    res = affine_register(prior, target, options);
    break;
  case RegistrationBackend::External:
    res.registered = run_external_registration(prior, target, options.external);
    res.transform = RegistrationTransform::identity();
    res.transform.backend = RegistrationBackend::External;
    res.similarity_before = ncc(prior, target);
    res.similarity_after = ncc(res.registered, target);
    res.level_similarity = {res.similarity_after};
    break;
  }
  res.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

} // namespace priorecon
