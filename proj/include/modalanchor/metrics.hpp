#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/regularize.hpp"
#include "modalanchor/rng.hpp"

namespace modalanchor {

// R[k][i] = accuracy on task i's eval split after finishing task k, plus the
// random-init baseline per task (the forward-transfer reference).
struct AccuracyMatrix {
    std::vector<std::vector<double>> r;
    std::vector<double> baseline;

    std::size_t tasks() const { return r.empty() ? baseline.size() : r[0].size(); }
    std::size_t completed() const { return r.size(); }
};

// ---------------------------------------------------------------------------
// Retrieval accuracy
// ---------------------------------------------------------------------------

// Fraction of images whose own caption has the highest cosine within the
// batch; ties break toward the lower caption index. V and T are row-major
// n×d unit embeddings with matching pair order.
inline double batch_retrieval_fraction(const std::vector<double>& v, const std::vector<double>& t,
                                       std::size_t n, std::size_t d) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* vi = v.data() + i * d;
        std::size_t best = 0;
        double best_score = -2.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double* tj = t.data() + j * d;
            double score = 0.0;
            for (std::size_t k = 0; k < d; ++k) score += vi[k] * tj[k];
            if (score > best_score) {
                best_score = score;
                best = j;
            }
        }
        if (best == i) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

struct RetrievalResult {
    double value = 0.0;
    double chance = 0.0;       // 1 / batch size actually used
    std::size_t batches = 0;
    bool undersized = false;   // eval set smaller than the requested batch
};

// Mean over consecutive eval batches of within-batch image→text top-1
// retrieval. An eval set smaller than the batch size is scored as one
// smaller batch with its chance level reported alongside.
inline RetrievalResult retrieval_accuracy(const DualEncoder& model, const std::vector<Pair>& pairs,
                                          std::size_t batch_size = 32) {
    if (pairs.empty()) throw ParameterError("retrieval_accuracy: empty eval set");
    if (batch_size < 1) throw ParameterError("retrieval_accuracy: batch size must be >= 1");

    RetrievalResult res;
    const std::size_t d = model.config().d_e;
    std::size_t effective = batch_size;
    if (pairs.size() < batch_size) {
        effective = pairs.size();
        res.undersized = true;
    }
    res.chance = 1.0 / static_cast<double>(effective);

    const std::size_t n_batches = pairs.size() / effective;
    double acc = 0.0;
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<const Pair*> batch;
        batch.reserve(effective);
        for (std::size_t i = 0; i < effective; ++i) batch.push_back(&pairs[b * effective + i]);
        const Tensor v = model.embed_visual(batch);
        const Tensor t = model.embed_text(batch);
        acc += batch_retrieval_fraction(v.values(), t.values(), effective, d);
    }
    res.batches = n_batches;
    res.value = acc / static_cast<double>(n_batches);
    return res;
}

// ---------------------------------------------------------------------------
// Sequence metrics (GEM-lineage definitions)
// ---------------------------------------------------------------------------

namespace detail {

inline void require_complete(const AccuracyMatrix& m, const char* op) {
    if (m.r.size() < 2) throw ContractError(std::string(op) + ": need at least 2 completed tasks");
    for (const auto& row : m.r) {
        if (row.size() != m.r.size()) {
            throw ContractError(std::string(op) + ": accuracy matrix must be square");
        }
    }
}

}  // namespace detail

// BWT = (1/(n−1)) Σ_{i<n} (R[n][i] − R[i][i]).
inline double backward_transfer(const AccuracyMatrix& m) {
    detail::require_complete(m, "backward_transfer");
    const std::size_t n = m.r.size();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) acc += m.r[n - 1][i] - m.r[i][i];
    return acc / static_cast<double>(n - 1);
}

// FWT = (1/(n−1)) Σ_{i≥2} (R[i−1][i] − b[i]).
inline double forward_transfer(const AccuracyMatrix& m) {
    detail::require_complete(m, "forward_transfer");
    const std::size_t n = m.r.size();
    if (m.baseline.size() != n) throw ContractError("forward_transfer: baseline not populated");
    double acc = 0.0;
    for (std::size_t i = 1; i < n; ++i) acc += m.r[i - 1][i] - m.baseline[i];
    return acc / static_cast<double>(n - 1);
}

// F = (1/(n−1)) Σ_{i<n} (max_{k≥i} R[k][i] − R[n][i]); always ≥ 0.
inline double forgetting_rate(const AccuracyMatrix& m) {
    detail::require_complete(m, "forgetting_rate");
    const std::size_t n = m.r.size();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        double peak = m.r[i][i];
        for (std::size_t k = i; k < n; ++k) peak = std::max(peak, m.r[k][i]);
        acc += peak - m.r[n - 1][i];
    }
    return acc / static_cast<double>(n - 1);
}

inline double average_accuracy(const AccuracyMatrix& m) {
    if (m.r.empty()) throw ContractError("average_accuracy: empty matrix");
    const auto& last = m.r.back();
    double acc = 0.0;
    for (double v : last) acc += v;
    return acc / static_cast<double>(last.size());
}

// ---------------------------------------------------------------------------
// Alignment drift
// ---------------------------------------------------------------------------

struct DriftReport {
    double mean_cos_decrease = 0.0;          // old-pair cosine minus current-pair cosine
    std::optional<double> retention;         // current / snapshot task-1 retrieval
};

// Δcos on the snapshot's probe pairs plus retrieval retention on the task-1
// eval split. Retention is absent when the snapshot model itself scores zero.
inline DriftReport alignment_drift(const EncoderSnapshot& snapshot0, const DualEncoder& model,
                                   const std::vector<Pair>& task1_eval,
                                   std::size_t eval_batch = 32) {
    DriftReport report;
    std::vector<const Pair*> probe;
    probe.reserve(snapshot0.probe.size());
    for (const Pair& p : snapshot0.probe) probe.push_back(&p);

    const Tensor v_old = snapshot0.frozen.embed_visual(probe);
    const Tensor t_old = snapshot0.frozen.embed_text(probe);
    const Tensor v_cur = model.embed_visual(probe);
    const Tensor t_cur = model.embed_text(probe);
    const std::size_t n = probe.size(), d = model.config().d_e;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double old_cos = 0.0, cur_cos = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            old_cos += v_old.values()[i * d + k] * t_old.values()[i * d + k];
            cur_cos += v_cur.values()[i * d + k] * t_cur.values()[i * d + k];
        }
        acc += old_cos - cur_cos;
    }
    report.mean_cos_decrease = acc / static_cast<double>(n);

    const double snap_acc = retrieval_accuracy(snapshot0.frozen, task1_eval, eval_batch).value;
    if (snap_acc > 0.0) {
        report.retention = retrieval_accuracy(model, task1_eval, eval_batch).value / snap_acc;
    }
    return report;
}

// ---------------------------------------------------------------------------
// PCA via power iteration with deflation
// ---------------------------------------------------------------------------

struct PcaResult {
    std::vector<std::vector<double>> coords;      // N×k
    std::vector<double> explained;                // variance fraction per component
    std::vector<std::vector<double>> components;  // k×d eigenvectors
};

// Centers the data, extracts the top-k covariance eigenvectors by power
// iteration (tolerance 1e-10) with deflation. Sign convention: each
// component's largest-magnitude loading is positive. Rank-deficient inputs
// yield zero components with zero variance.
inline PcaResult pca_project(const std::vector<std::vector<double>>& rows, std::size_t k = 2) {
    if (rows.empty()) throw ParameterError("pca_project: empty input");
    const std::size_t n = rows.size(), d = rows[0].size();
    if (n < k) throw ParameterError("pca_project: need at least k rows");
    for (const auto& r : rows) {
        if (r.size() != d) throw ShapeError("pca_project: ragged input rows");
    }

    std::vector<double> mean_vec(d, 0.0);
    for (const auto& r : rows)
        for (std::size_t j = 0; j < d; ++j) mean_vec[j] += r[j];
    for (double& m : mean_vec) m /= static_cast<double>(n);

    std::vector<double> centered(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered[i * d + j] = rows[i][j] - mean_vec[j];

    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = centered.data() + i * d;
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = x[a];
            if (xa == 0.0) continue;
            double* row = cov.data() + a * d;
            for (std::size_t b = 0; b < d; ++b) row[b] += xa * x[b];
        }
    }
    for (double& c : cov) c /= static_cast<double>(n);
    double total_var = 0.0;
    for (std::size_t j = 0; j < d; ++j) total_var += cov[j * d + j];

    PcaResult res;
    res.components.assign(k, std::vector<double>(d, 0.0));
    res.explained.assign(k, 0.0);

    constexpr double kTol = 1e-10;
    constexpr std::size_t kMaxIters = 20000;
    Rng rng(0x70636149746572ULL);  // fixed: PCA must be deterministic

    for (std::size_t comp = 0; comp < k; ++comp) {
        std::vector<double> v(d);
        double norm = 0.0;
        for (double& x : v) {
            x = rng.normal();
        }
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;

        double eigenvalue = 0.0;
        for (std::size_t iter = 0; iter < kMaxIters; ++iter) {
            std::vector<double> w(d, 0.0);
            for (std::size_t a = 0; a < d; ++a) {
                const double* row = cov.data() + a * d;
                double acc = 0.0;
                for (std::size_t b = 0; b < d; ++b) acc += row[b] * v[b];
                w[a] = acc;
            }
            double wn = 0.0;
            for (double x : w) wn += x * x;
            wn = std::sqrt(wn);
            if (wn < 1e-14) {  // deflated to (near) zero: rank exhausted
                eigenvalue = 0.0;
                break;
            }
            double delta = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double next = w[j] / wn;
                delta = std::max(delta, std::fabs(next - v[j]));
                v[j] = next;
            }
            eigenvalue = wn;
            if (delta < kTol) break;
        }
        if (eigenvalue <= total_var * 1e-12 || eigenvalue < 1e-14) {
            // remaining components are zero
            break;
        }
        // Sign: largest-magnitude loading positive.
        std::size_t arg = 0;
        for (std::size_t j = 1; j < d; ++j) {
            if (std::fabs(v[j]) > std::fabs(v[arg])) arg = j;
        }
        if (v[arg] < 0.0) {
            for (double& x : v) x = -x;
        }
        res.components[comp] = v;
        res.explained[comp] = total_var > 0.0 ? eigenvalue / total_var : 0.0;
        // Deflate: C ← C − λ v vᵀ.
        for (std::size_t a = 0; a < d; ++a) {
            const double va = eigenvalue * v[a];
            double* row = cov.data() + a * d;
            for (std::size_t b = 0; b < d; ++b) row[b] -= va * v[b];
        }
    }

    res.coords.assign(n, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = centered.data() + i * d;
        for (std::size_t comp = 0; comp < k; ++comp) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += x[j] * res.components[comp][j];
            res.coords[i][comp] = acc;
        }
    }
    return res;
}

}  // namespace modalanchor
