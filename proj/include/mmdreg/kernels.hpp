#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mmdreg/errors.hpp"

namespace mmdreg {

enum class KernelFamily { Exponential, Gaussian, MaternHalfInt, PsiMatern, AffineShift, Product };

/// Description of a bounded kernel. Base families (Exponential, Gaussian,
/// MaternHalfInt, PsiMatern) are radial profiles of a Euclidean distance,
/// multiplied by `c`. AffineShift wraps children[0] as beta*K + (1-beta).
/// Product multiplies children[0] on x with children[1] on y.
struct KernelSpec {
  KernelFamily family = KernelFamily::Exponential;
  double gamma = 1.0;
  int m = 1;
  double beta = 1.0;
  double c = 1.0;
  // Product only: leading coordinates routed to the x kernel when the kernel is
  // evaluated on flat (x, y) vectors.
  std::size_t x_dim = 0;
  std::vector<KernelSpec> children;

  static KernelSpec exponential(double gamma) { return base(KernelFamily::Exponential, gamma, 1); }
  static KernelSpec gaussian(double gamma) { return base(KernelFamily::Gaussian, gamma, 1); }
  static KernelSpec matern(double gamma, int m) { return base(KernelFamily::MaternHalfInt, gamma, m); }
  static KernelSpec psi_matern(double gamma, int m = 1, double c = 1.0) {
    KernelSpec k = base(KernelFamily::PsiMatern, gamma, m);
    k.c = c;
    return k;
  }
  static KernelSpec affine_shift(KernelSpec inner, double beta) {
    KernelSpec k;
    k.family = KernelFamily::AffineShift;
    k.beta = beta;
    k.children.push_back(std::move(inner));
    return k;
  }
  static KernelSpec product(KernelSpec kx, KernelSpec ky, std::size_t x_dim = 0) {
    KernelSpec k;
    k.family = KernelFamily::Product;
    k.x_dim = x_dim;
    k.children.push_back(std::move(kx));
    k.children.push_back(std::move(ky));
    return k;
  }

  bool is_product() const { return family == KernelFamily::Product; }
  const KernelSpec& x_kernel() const {
    if (!is_product()) throw ConfigError("x_kernel requested from a non-product kernel");
    return children[0];
  }
  const KernelSpec& y_kernel() const {
    if (!is_product()) throw ConfigError("y_kernel requested from a non-product kernel");
    return children[1];
  }

  void validate() const {
    switch (family) {
      case KernelFamily::Exponential:
      case KernelFamily::Gaussian:
      case KernelFamily::MaternHalfInt:
      case KernelFamily::PsiMatern:
        if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("kernel bandwidth gamma must be > 0");
        if (!(c > 0.0 && c <= 1.0)) throw ConfigError("kernel scale c must lie in (0,1]");
        if (family == KernelFamily::MaternHalfInt || family == KernelFamily::PsiMatern) {
          if (m != 1 && m != 3 && m != 5)
            throw ConfigError("Matern smoothness m must be 1, 3 or 5, got " + std::to_string(m));
        }
        break;
      case KernelFamily::AffineShift:
        if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("affine shift beta must lie in (0,1]");
        if (children.size() != 1) throw ConfigError("affine shift kernel needs exactly one base kernel");
        children[0].validate();
        break;
      case KernelFamily::Product:
        if (children.size() != 2) throw ConfigError("product kernel needs an x kernel and a y kernel");
        children[0].validate();
        children[1].validate();
        break;
    }
  }

 private:
  static KernelSpec base(KernelFamily f, double gamma, int m) {
    KernelSpec k;
    k.family = f;
    k.gamma = gamma;
    k.m = m;
    return k;
  }
};

/// Bijection R -> (0,1) with psi(0) = 1/2 and psi(-v) = 1 - psi(v).
/// Written as 1/2 + v / (2 (sqrt(v^2+4) + 2)), which equals
/// 1/2 + (sqrt(v^2+4) - 2) / (2v) without the cancellation near 0.
inline double psi(double v) {
  if (!std::isfinite(v)) throw DomainError("psi: non-finite input");
  return 0.5 + v / (2.0 * (std::sqrt(v * v + 4.0) + 2.0));
}

/// Closed-form inverse: v = (2u - 1) / (u (1 - u)).
inline double psi_inverse(double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("psi_inverse: argument must lie in (0,1)");
  return (2.0 * u - 1.0) / (u * (1.0 - u));
}

inline std::vector<double> psi_transform(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = psi(x[i]);
  return out;
}

/// Half-integer Matern profile K_{m/2,gamma}(r) for m in {1,3,5}.
inline double matern_halfint(double r, double gamma, int m) {
  if (!(r >= 0.0)) throw DomainError("matern_halfint: distance must be >= 0");
  if (!(gamma > 0.0)) throw DomainError("matern_halfint: gamma must be > 0");
  const double t = r / gamma;
  switch (m) {
    case 1:
      return std::exp(-t);
    case 3: {
      const double s = std::sqrt(3.0) * t;
      return (1.0 + s) * std::exp(-s);
    }
    case 5: {
      const double s = std::sqrt(5.0) * t;
      return (1.0 + s + 5.0 * t * t / 3.0) * std::exp(-s);
    }
    default:
      throw ConfigError("matern_halfint: unsupported smoothness m=" + std::to_string(m));
  }
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DomainError("kernel: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Radial profile of a base family at distance r (PsiMatern: r measured
/// between psi-transformed points).
inline double radial_profile(const KernelSpec& k, double r) {
  switch (k.family) {
    case KernelFamily::Exponential:
      return k.c * std::exp(-r / k.gamma);
    case KernelFamily::Gaussian:
      return k.c * std::exp(-0.5 * r * r / (k.gamma * k.gamma));
    case KernelFamily::MaternHalfInt:
    case KernelFamily::PsiMatern:
      return k.c * matern_halfint(r, k.gamma, k.m);
    default:
      throw ConfigError("radial_profile: composite kernel has no radial profile");
  }
}

double eval(const KernelSpec& k, std::span<const double> z, std::span<const double> zp);

/// Product kernel on (x, y) pairs.
inline double eval_joint(const KernelSpec& k, std::span<const double> x, std::span<const double> y,
                         std::span<const double> xp, std::span<const double> yp) {
  if (!k.is_product()) throw ConfigError("eval_joint requires a product kernel");
  return eval(k.children[0], x, xp) * eval(k.children[1], y, yp);
}

inline double eval(const KernelSpec& k, std::span<const double> z, std::span<const double> zp) {
  switch (k.family) {
    case KernelFamily::Exponential:
    case KernelFamily::Gaussian:
    case KernelFamily::MaternHalfInt:
      return radial_profile(k, euclidean_distance(z, zp));
    case KernelFamily::PsiMatern: {
      if (z.size() != zp.size()) throw DomainError("kernel: dimension mismatch");
      double s = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = psi(z[i]) - psi(zp[i]);
        s += d * d;
      }
      return radial_profile(k, std::sqrt(s));
    }
    case KernelFamily::AffineShift:
      return k.beta * eval(k.children[0], z, zp) + (1.0 - k.beta);
    case KernelFamily::Product: {
      if (z.size() != zp.size()) throw DomainError("kernel: dimension mismatch");
      if (k.x_dim == 0 || k.x_dim >= z.size())
        throw DomainError("product kernel on flat points needs 0 < x_dim < point dimension");
      return eval_joint(k, z.first(k.x_dim), z.subspan(k.x_dim), zp.first(k.x_dim), zp.subspan(k.x_dim));
    }
  }
  throw ConfigError("kernel: unknown family");
}

/// Scalar convenience for one-dimensional responses.
inline double eval_scalar(const KernelSpec& k, double a, double b) {
  return eval(k, std::span<const double>(&a, 1), std::span<const double>(&b, 1));
}

}  // namespace mmdreg
