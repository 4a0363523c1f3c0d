#pragma once
// Independent reference computations used by the unit and acceptance
// tests. Nothing here calls into the library under test.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <vector>

namespace oracle {

// Count-based clustering comparison, the textbook way: contingency table,
// entropies from counts, hypergeometric expected MI, max normalization.
struct Contingency {
  std::vector<std::vector<double>> n;
  std::vector<double> a, b;
  double total = 0;
};

inline Contingency contingency(const std::vector<int>& u, const std::vector<int>& v) {
  std::map<int, int> iu, iv;
  for (int x : u) iu.emplace(x, 0);
  for (int x : v) iv.emplace(x, 0);
  int k = 0;
  for (auto& [key, idx] : iu) idx = k++;
  k = 0;
  for (auto& [key, idx] : iv) idx = k++;
  Contingency c;
  c.n.assign(iu.size(), std::vector<double>(iv.size(), 0.0));
  c.a.assign(iu.size(), 0.0);
  c.b.assign(iv.size(), 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    c.n[iu[u[i]]][iv[v[i]]] += 1;
    c.a[iu[u[i]]] += 1;
    c.b[iv[v[i]]] += 1;
  }
  c.total = static_cast<double>(u.size());
  return c;
}

inline double entropy_counts(const std::vector<double>& a, double total) {
  double h = 0;
  for (double x : a) {
    if (x > 0) h -= (x / total) * std::log(x / total);
  }
  return h;
}

inline double mi_counts(const Contingency& c) {
  double mi = 0;
  for (std::size_t i = 0; i < c.a.size(); ++i) {
    for (std::size_t j = 0; j < c.b.size(); ++j) {
      const double nij = c.n[i][j];
      if (nij > 0) mi += (nij / c.total) * std::log(c.total * nij / (c.a[i] * c.b[j]));
    }
  }
  return mi;
}

inline double expected_mi_counts(const Contingency& c) {
  const int N = static_cast<int>(c.total);
  std::vector<double> lfact(static_cast<std::size_t>(N) + 1, 0.0);
  for (int i = 1; i <= N; ++i) lfact[static_cast<std::size_t>(i)] = lfact[static_cast<std::size_t>(i - 1)] + std::log(static_cast<double>(i));
  auto lf = [&](int x) { return lfact[static_cast<std::size_t>(x)]; };
  double emi = 0;
  for (double ad : c.a) {
    for (double bd : c.b) {
      const int a = static_cast<int>(ad), b = static_cast<int>(bd);
      for (int nij = std::max(1, a + b - N); nij <= std::min(a, b); ++nij) {
        const double logp = lf(a) + lf(b) + lf(N - a) + lf(N - b) - lf(N) - lf(nij) - lf(a - nij) - lf(b - nij) -
                            lf(N - a - b + nij);
        emi += (static_cast<double>(nij) / N) * std::log(static_cast<double>(N) * nij / (ad * bd)) * std::exp(logp);
      }
    }
  }
  return emi;
}

inline double ami_counts(const std::vector<int>& u, const std::vector<int>& v) {
  const auto c = contingency(u, v);
  const double hu = entropy_counts(c.a, c.total), hv = entropy_counts(c.b, c.total);
  if (c.a.size() == 1 && c.b.size() == 1) return 1.0;
  if (c.a.size() == 1 || c.b.size() == 1) return 0.0;
  const double emi = expected_mi_counts(c);
  return (mi_counts(c) - emi) / (std::max(hu, hv) - emi);
}

// Area-weighted entropy and MI by a plain double loop over regions.
inline double weighted_entropy_brute(const std::vector<int>& u, const std::vector<double>& w) {
  double total = 0;
  for (double x : w) total += x;
  int k = *std::max_element(u.begin(), u.end()) + 1;
  double h = 0;
  for (int c = 0; c < k; ++c) {
    double m = 0;
    for (std::size_t r = 0; r < u.size(); ++r) {
      if (u[r] == c) m += w[r];
    }
    if (m > 0) h -= (m / total) * std::log(m / total);
  }
  return h;
}

inline double weighted_mi_brute(const std::vector<int>& u, const std::vector<int>& v, const std::vector<double>& w) {
  double total = 0;
  for (double x : w) total += x;
  const int ku = *std::max_element(u.begin(), u.end()) + 1, kv = *std::max_element(v.begin(), v.end()) + 1;
  double mi = 0;
  for (int i = 0; i < ku; ++i) {
    for (int j = 0; j < kv; ++j) {
      double pij = 0, pi = 0, pj = 0;
      for (std::size_t r = 0; r < u.size(); ++r) {
        if (u[r] == i && v[r] == j) pij += w[r] / total;
        if (u[r] == i) pi += w[r] / total;
        if (v[r] == j) pj += w[r] / total;
      }
      if (pij > 0) mi += pij * std::log(pij / (pi * pj));
    }
  }
  return mi;
}

// Ward by exhaustive search: every step recomputes every pairwise merge
// cost from member lists. Returns labels after cutting to k clusters,
// numbered by each cluster's lowest row.
inline std::vector<int> ward_brute(const Eigen::MatrixXd& x, int k) {
  const int n = static_cast<int>(x.rows());
  std::vector<std::vector<int>> members(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) members[static_cast<std::size_t>(i)] = {i};
  auto centroid = [&](const std::vector<int>& m) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(x.cols());
    for (int r : m) c += x.row(r).transpose();
    return Eigen::VectorXd(c / static_cast<double>(m.size()));
  };
  for (int clusters = n; clusters > k; --clusters) {
    double best = INFINITY;
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < members.size(); ++a) {
      if (members[a].empty()) continue;
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        if (members[b].empty()) continue;
        const double na = static_cast<double>(members[a].size()), nb = static_cast<double>(members[b].size());
        const double cost = na * nb / (na + nb) * (centroid(members[a]) - centroid(members[b])).squaredNorm();
        if (cost < best) {
          best = cost;
          ba = a;
          bb = b;
        }
      }
    }
    members[ba].insert(members[ba].end(), members[bb].begin(), members[bb].end());
    members[bb].clear();
  }
  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  int next = 0;
  for (int r = 0; r < n; ++r) {
    if (labels[static_cast<std::size_t>(r)] >= 0) continue;
    for (const auto& m : members) {
      if (std::find(m.begin(), m.end(), r) != m.end()) {
        for (int q : m) labels[static_cast<std::size_t>(q)] = next;
      }
    }
    ++next;
  }
  return labels;
}

// Mean silhouette on squared Euclidean dissimilarities, singletons 0.
inline double silhouette_brute(const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  const int n = static_cast<int>(x.rows());
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  double total = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0), cnt(static_cast<std::size_t>(k), 0.0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      sum[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += (x.row(i) - x.row(j)).squaredNorm();
      cnt[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += 1;
    }
    const auto own = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    if (cnt[own] == 0) continue;
    const double a = sum[own] / cnt[own];
    double b = INFINITY;
    for (std::size_t c = 0; c < sum.size(); ++c) {
      if (c != own && cnt[c] > 0) b = std::min(b, sum[c] / cnt[c]);
    }
    total += (b - a) / std::max(a, b);
  }
  return total / n;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

}  // namespace oracle
