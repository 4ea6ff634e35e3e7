#pragma once

// Sample-quality metrics over a pluggable feature extractor: FID, IS, mIS,
// AM, NDB, per-class FID and classifier accuracy.
//
// Feature sets are row-major matrices, one sample per row. Probability
// matrices hold one distribution per row.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "diffwave/error.hpp"
#include "diffwave/rng.hpp"

namespace diffwave {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kProbClamp = 1e-12;

struct ExtractedFeatures {
  std::vector<double> features;
  std::vector<double> probs;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual ExtractedFeatures extract(const std::vector<double>& wave) const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual std::size_t num_classes() const = 0;
};

/// Runs the extractor over every waveform.
inline void extract_all(const FeatureExtractor& fx, const std::vector<std::vector<double>>& waves, Matrix& feats,
                        Matrix& probs) {
  feats.resize(static_cast<Eigen::Index>(waves.size()), static_cast<Eigen::Index>(fx.feature_dim()));
  probs.resize(static_cast<Eigen::Index>(waves.size()), static_cast<Eigen::Index>(fx.num_classes()));
  for (std::size_t i = 0; i < waves.size(); ++i) {
    const auto e = fx.extract(waves[i]);
    require(e.features.size() == fx.feature_dim() && e.probs.size() == fx.num_classes(),
            "extractor: output dimensions do not match its declared sizes");
    const auto r = static_cast<Eigen::Index>(i);
    feats.row(r) = Eigen::Map<const Eigen::RowVectorXd>(e.features.data(), feats.cols());
    probs.row(r) = Eigen::Map<const Eigen::RowVectorXd>(e.probs.data(), probs.cols());
  }
}

struct GaussianFit {
  Vector mean;
  Matrix cov;
};

/// Sample mean and unbiased (n - 1) covariance.
inline GaussianFit fit_gaussian(const Matrix& x) {
  require(x.rows() >= 2, "fit_gaussian: need at least 2 samples, got " + std::to_string(x.rows()));
  GaussianFit g;
  g.mean = x.colwise().mean().transpose();
  const Matrix c = x.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  return g;
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
inline Matrix sqrt_psd(const Matrix& a) {
  const Matrix s = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  const Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), using
/// Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)).
inline double fid(const GaussianFit& a, const GaussianFit& b) {
  require(a.mean.size() == b.mean.size(), "fid: feature dimensions differ");
  const Matrix ra = sqrt_psd(a.cov);
  const Matrix m = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

inline double fid(const Matrix& feats_a, const Matrix& feats_b) {
  require(feats_a.cols() == feats_b.cols(), "fid: feature dimensions differ");
  return fid(fit_gaussian(feats_a), fit_gaussian(feats_b));
}

inline void validate_probs(const Matrix& p, const char* who) {
  require(p.rows() >= 1 && p.cols() >= 1, std::string(who) + ": empty probability matrix");
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    require((p.row(i).array() >= 0.0).all() && p.row(i).allFinite(),
            std::string(who) + ": row " + std::to_string(i) + " has negative or non-finite entries");
    require(std::abs(p.row(i).sum() - 1.0) <= 1e-6,
            std::string(who) + ": row " + std::to_string(i) + " does not sum to 1");
  }
}

/// KL(p || q) with both sides clamped at `clamp`.
inline double kl(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& q, double clamp = kProbClamp) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double a = std::max(p[k], clamp), b = std::max(q[k], clamp);
    s += a * std::log(a / b);
  }
  return s;
}

inline double entropy(const Eigen::RowVectorXd& p, double clamp = kProbClamp) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double a = std::max(p[k], clamp);
    s -= a * std::log(a);
  }
  return s;
}

/// exp(E_i KL(p_i || mean_j p_j)).
inline double inception_score(const Matrix& probs, double clamp = kProbClamp) {
  validate_probs(probs, "inception_score");
  const Eigen::RowVectorXd marginal = probs.colwise().mean();
  double s = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) s += kl(probs.row(i), marginal, clamp);
  return std::exp(s / static_cast<double>(probs.rows()));
}

/// exp(E_{i,j} KL(p_i || p_j)) over all n^2 ordered pairs, i = j included.
inline double modified_inception_score(const Matrix& probs, double clamp = kProbClamp) {
  validate_probs(probs, "modified_inception_score");
  require(probs.rows() >= 2, "modified_inception_score: need at least 2 rows");
  const auto n = probs.rows();
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) s += kl(probs.row(i), probs.row(j), clamp);
  return std::exp(s / static_cast<double>(n * n));
}

/// KL(mean train probs || mean generated probs) + mean entropy of generated rows.
inline double am_score(const Matrix& probs_train, const Matrix& probs_gen, double clamp = kProbClamp) {
  validate_probs(probs_train, "am_score");
  validate_probs(probs_gen, "am_score");
  require(probs_train.cols() == probs_gen.cols(), "am_score: class counts differ");
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs_gen.rows(); ++i) h += entropy(probs_gen.row(i), clamp);
  return kl(probs_train.colwise().mean(), probs_gen.colwise().mean(), clamp) + h / static_cast<double>(probs_gen.rows());
}

// ---------------------------------------------------------------------------
// NDB

struct KMeansResult {
  Matrix centroids;  // K x D
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
};

inline std::size_t nearest_centroid(const Matrix& centroids, const Eigen::RowVectorXd& x) {
  Eigen::Index best = 0;
  (centroids.rowwise() - x).rowwise().squaredNorm().minCoeff(&best);
  return static_cast<std::size_t>(best);
}

/// k-means++ seeding followed by Lloyd iterations until no centroid moves more than tol.
inline KMeansResult kmeans(const Matrix& x, std::size_t K, std::uint64_t seed, std::size_t max_iter = 300,
                           double tol = 1e-10) {
  const auto n = static_cast<std::size_t>(x.rows());
  require(K >= 1 && K <= n, "kmeans: K=" + std::to_string(K) + " exceeds the number of points " + std::to_string(n));
  Rng rng(seed);
  KMeansResult r;
  r.centroids.resize(static_cast<Eigen::Index>(K), x.cols());
  r.centroids.row(0) = x.row(rng.uniform_int(0, static_cast<std::int64_t>(n - 1)));
  Vector d2 = (x.rowwise() - r.centroids.row(0)).rowwise().squaredNorm();
  for (std::size_t k = 1; k < K; ++k) {
    const double total = d2.sum();
    std::size_t pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[static_cast<Eigen::Index>(pick)];
        if (u < 0) break;
      }
    } else {
      pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 1)));
    }
    r.centroids.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(pick));
    d2 = d2.cwiseMin((x.rowwise() - r.centroids.row(static_cast<Eigen::Index>(k))).rowwise().squaredNorm());
  }

  r.assignment.assign(n, 0);
  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) r.assignment[i] = nearest_centroid(r.centroids, x.row(static_cast<Eigen::Index>(i)));
    Matrix next = Matrix::Zero(r.centroids.rows(), r.centroids.cols());
    std::vector<std::size_t> count(K, 0);
    for (std::size_t i = 0; i < n; ++i) {
      next.row(static_cast<Eigen::Index>(r.assignment[i])) += x.row(static_cast<Eigen::Index>(i));
      ++count[r.assignment[i]];
    }
    double shift = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      if (count[k] == 0) {
        next.row(kk) = r.centroids.row(kk);  // empty cluster keeps its centroid
      } else {
        next.row(kk) /= static_cast<double>(count[k]);
      }
      shift = std::max(shift, (next.row(kk) - r.centroids.row(kk)).squaredNorm());
    }
    r.centroids = std::move(next);
    if (shift <= tol) {
      ++r.iterations;
      break;
    }
  }
  for (std::size_t i = 0; i < n; ++i) r.assignment[i] = nearest_centroid(r.centroids, x.row(static_cast<Eigen::Index>(i)));
  return r;
}

/// z with P(|Z| > z) = alpha for a standard normal Z.
inline double two_sided_z_critical(double alpha) {
  require(alpha > 0 && alpha < 1, "ndb: significance must lie in (0, 1)");
  double lo = 0.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (std::erfc(mid / std::sqrt(2.0)) > alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct NdbResult {
  std::size_t ndb = 0;
  double ndb_over_k = 0.0;
  std::vector<std::size_t> train_counts, gen_counts;
  std::vector<bool> different;
};

/// Bins the training features by k-means, assigns generated features to the nearest bin,
/// and counts bins whose proportions differ under a pooled two-proportion z-test.
inline NdbResult ndb(const Matrix& feats_train, const Matrix& feats_gen, std::size_t K = 50,
                     double significance = 0.05, std::uint64_t seed = 0) {
  require(feats_train.cols() == feats_gen.cols(), "ndb: feature dimensions differ");
  require(feats_gen.rows() >= 1, "ndb: no generated samples");
  require(static_cast<std::size_t>(feats_train.rows()) >= K,
          "ndb: K=" + std::to_string(K) + " larger than the training set (" + std::to_string(feats_train.rows()) + ")");
  const auto km = kmeans(feats_train, K, seed);
  NdbResult r;
  r.train_counts.assign(K, 0);
  r.gen_counts.assign(K, 0);
  r.different.assign(K, false);
  for (auto a : km.assignment) ++r.train_counts[a];
  for (Eigen::Index i = 0; i < feats_gen.rows(); ++i) ++r.gen_counts[nearest_centroid(km.centroids, feats_gen.row(i))];
  const double nt = static_cast<double>(feats_train.rows()), ng = static_cast<double>(feats_gen.rows());
  const double zc = two_sided_z_critical(significance);
  for (std::size_t k = 0; k < K; ++k) {
    const double pt = r.train_counts[k] / nt, pg = r.gen_counts[k] / ng;
    const double p = (r.train_counts[k] + r.gen_counts[k]) / (nt + ng);
    const double se = std::sqrt(p * (1.0 - p) * (1.0 / nt + 1.0 / ng));
    r.different[k] = se > 0 && std::abs(pg - pt) / se > zc;
    r.ndb += r.different[k];
  }
  r.ndb_over_k = static_cast<double>(r.ndb) / static_cast<double>(K);
  return r;
}

// ---------------------------------------------------------------------------
// Class-conditional

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Per-label FID between generated and training features; population std over labels.
inline MeanStd fid_class(const std::map<int, Matrix>& gen_by_label, const std::map<int, Matrix>& train_by_label) {
  require(!gen_by_label.empty(), "fid_class: no labels");
  std::vector<double> v;
  for (const auto& [label, g] : gen_by_label) {
    const auto it = train_by_label.find(label);
    require(it != train_by_label.end(), "fid_class: label " + std::to_string(label) + " missing from training features");
    v.push_back(fid(g, it->second));
  }
  for (const auto& [label, t] : train_by_label)
    require(gen_by_label.count(label), "fid_class: label " + std::to_string(label) + " missing from generated features");
  MeanStd r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(v.size()));
  return r;
}

inline std::map<int, Matrix> group_by_label(const Matrix& feats, const std::vector<int>& labels) {
  require(static_cast<std::size_t>(feats.rows()) == labels.size(), "group_by_label: one label per row required");
  std::map<int, std::vector<Eigen::Index>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) rows[labels[i]].push_back(static_cast<Eigen::Index>(i));
  std::map<int, Matrix> out;
  for (const auto& [label, idx] : rows) out.emplace(label, feats(idx, Eigen::all));
  return out;
}

inline std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Fraction of waveforms whose argmax class equals the label.
inline double classifier_accuracy(const FeatureExtractor& fx, const std::vector<std::vector<double>>& waves,
                                  const std::vector<int>& labels) {
  require(waves.size() == labels.size() && !waves.empty(), "classifier_accuracy: need one label per waveform");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < waves.size(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < fx.num_classes(), "classifier_accuracy: label out of range");
    hits += argmax(fx.extract(waves[i]).probs) == static_cast<std::size_t>(labels[i]);
  }
  return static_cast<double>(hits) / static_cast<double>(waves.size());
}

struct MetricReport {
  double fid = 0, is = 0, mis = 0, am = 0;
  std::size_t ndb = 0;
  double ndb_over_k = 0;
  std::optional<double> fid_class_mean, fid_class_std, accuracy;
  nlohmann::json config;

  nlohmann::json to_json() const {
    nlohmann::json j{{"fid", fid}, {"is", is}, {"mis", mis}, {"am", am}, {"ndb", ndb}, {"ndb_over_k", ndb_over_k}};
    j["fid_class_mean"] = fid_class_mean ? nlohmann::json(*fid_class_mean) : nlohmann::json();
    j["fid_class_std"] = fid_class_std ? nlohmann::json(*fid_class_std) : nlohmann::json();
    j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json();
    j["config"] = config;
    return j;
  }
};

}  // namespace diffwave
