#ifndef OTFE_STYLE_HPP
#define OTFE_STYLE_HPP

#include <cmath>
#include <vector>

#include "otfe/encoders.hpp"
#include "otfe/graph.hpp"

namespace otfe {

// Number of style clusters for n tokens at ratio k: max(floor(k*n), 1).
inline int cluster_count(int n, double ratio) {
    if (n < 1) throw ShapeError("cluster_count: token count must be >= 1");
    if (ratio <= 0 || ratio > 1) throw ShapeError("cluster_count: ratio must be in (0, 1]");
    const int c = static_cast<int>(std::floor(ratio * n));
    return c < 1 ? 1 : c;
}

template <typename T>
struct ClusterResult {
    Matrix<T> centroids;          // c x D
    std::vector<int> assignments; // per row of X
    int iterations = 0;
};

namespace detail {

template <typename T>
double sq_dist(const T* a, const T* b, int d) {
    double s = 0;
    for (int i = 0; i < d; ++i) {
        const double t = static_cast<double>(a[i]) - b[i];
        s += t * t;
    }
    return s;
}

}  // namespace detail

// Greedy centroid seeding: the first seed maximizes total distance to every
// other point; each next seed maximizes the minimum distance to seeds chosen
// so far. Ties resolve to the lowest row index; already-chosen rows are
// excluded, so seeds are distinct even on degenerate (all-identical) input.
template <typename T>
std::vector<int> greedy_init_indices(const Matrix<T>& x, int c) {
    const int n = x.rows();
    if (c < 1 || c > n)
        throw ShapeError("greedy_init: cluster count " + std::to_string(c) + " out of range for " +
                         std::to_string(n) + " points");
    std::vector<char> chosen(static_cast<std::size_t>(n), 0);
    std::vector<int> picks;
    picks.reserve(static_cast<std::size_t>(c));

    int first = 0;
    double best_total = -1;
    for (int i = 0; i < n; ++i) {
        double total = 0;
        for (int j = 0; j < n; ++j)
            if (j != i) total += std::sqrt(detail::sq_dist(x.row(i), x.row(j), x.cols()));
        if (total > best_total) {
            best_total = total;
            first = i;
        }
    }
    picks.push_back(first);
    chosen[static_cast<std::size_t>(first)] = 1;

    std::vector<double> min_d(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        min_d[static_cast<std::size_t>(i)] = detail::sq_dist(x.row(i), x.row(first), x.cols());

    while (static_cast<int>(picks.size()) < c) {
        int next = -1;
        double best = -1;
        for (int i = 0; i < n; ++i) {
            if (chosen[static_cast<std::size_t>(i)]) continue;
            if (min_d[static_cast<std::size_t>(i)] > best) {
                best = min_d[static_cast<std::size_t>(i)];
                next = i;
            }
        }
        picks.push_back(next);
        chosen[static_cast<std::size_t>(next)] = 1;
        for (int i = 0; i < n; ++i) {
            const double d = detail::sq_dist(x.row(i), x.row(next), x.cols());
            if (d < min_d[static_cast<std::size_t>(i)]) min_d[static_cast<std::size_t>(i)] = d;
        }
    }
    return picks;
}

template <typename T>
Matrix<T> greedy_init(const Matrix<T>& x, int c) {
    const std::vector<int> picks = greedy_init_indices(x, c);
    Matrix<T> init(c, x.cols());
    for (int k = 0; k < c; ++k)
        for (int d = 0; d < x.cols(); ++d) init(k, d) = x(picks[static_cast<std::size_t>(k)], d);
    return init;
}

// Seeded random init (distinct rows) for the no-greedy ablation.
template <typename T>
Matrix<T> random_init(const Matrix<T>& x, int c, Rng& rng) {
    const int n = x.rows();
    if (c < 1 || c > n) throw ShapeError("random_init: cluster count out of range");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx.begin(), idx.end());
    Matrix<T> init(c, x.cols());
    for (int k = 0; k < c; ++k)
        for (int d = 0; d < x.cols(); ++d) init(k, d) = x(idx[static_cast<std::size_t>(k)], d);
    return init;
}

// Lloyd iterations from a given init. Stops when the largest centroid
// displacement drops below tol or max_iter is reached. Empty clusters seize
// the point globally farthest from its assigned centroid. A final assign +
// mean pass guarantees centroids are exact means of their members.
template <typename T>
ClusterResult<T> kmeans(const Matrix<T>& x, const Matrix<T>& init, int max_iter = 100,
                        double tol = 1e-6) {
    const int n = x.rows();
    const int dim = x.cols();
    const int c = init.rows();
    if (c < 1 || c > n) throw ShapeError("kmeans: cluster count out of range");
    if (init.cols() != dim) throw ShapeError("kmeans: init width mismatch");

    Matrix<T> cent = init;
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    std::vector<int> counts(static_cast<std::size_t>(c), 0);

    auto assign_all = [&]() {
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = detail::sq_dist(x.row(i), cent.row(0), dim);
            for (int k = 1; k < c; ++k) {
                const double d = detail::sq_dist(x.row(i), cent.row(k), dim);
                if (d < bd) {
                    bd = d;
                    best = k;
                }
            }
            assign[static_cast<std::size_t>(i)] = best;
            ++counts[static_cast<std::size_t>(best)];
        }
        // Empty-cluster repair: give each empty cluster the point farthest
        // from its current centroid (skipping singleton donors).
        for (int k = 0; k < c; ++k) {
            while (counts[static_cast<std::size_t>(k)] == 0) {
                int steal = -1;
                double far = -1;
                for (int i = 0; i < n; ++i) {
                    const int owner = assign[static_cast<std::size_t>(i)];
                    if (counts[static_cast<std::size_t>(owner)] <= 1) continue;
                    const double d = detail::sq_dist(x.row(i), cent.row(owner), dim);
                    if (d > far) {
                        far = d;
                        steal = i;
                    }
                }
                if (steal < 0) break;  // cannot repair (n == c pathological ties)
                --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(steal)])];
                assign[static_cast<std::size_t>(steal)] = k;
                ++counts[static_cast<std::size_t>(k)];
            }
        }
    };

    auto update_means = [&](Matrix<T>& out) {
        out = Matrix<T>(c, dim);
        for (int i = 0; i < n; ++i) {
            const int k = assign[static_cast<std::size_t>(i)];
            for (int d = 0; d < dim; ++d) out(k, d) += x(i, d);
        }
        for (int k = 0; k < c; ++k) {
            const T m = static_cast<T>(counts[static_cast<std::size_t>(k)]);
            for (int d = 0; d < dim; ++d) out(k, d) /= m;
        }
    };

    int it = 0;
    for (; it < max_iter; ++it) {
        assign_all();
        Matrix<T> next;
        update_means(next);
        double shift = 0;
        for (int k = 0; k < c; ++k)
            shift = std::max(shift, std::sqrt(detail::sq_dist(next.row(k), cent.row(k), dim)));
        cent = std::move(next);
        if (shift < tol) {
            ++it;
            break;
        }
    }
    assign_all();
    update_means(cent);
    return {std::move(cent), std::move(assign), it};
}

// K-means objective: sum of squared distances to assigned centroids.
template <typename T>
double kmeans_objective(const Matrix<T>& x, const Matrix<T>& cent, const std::vector<int>& assign) {
    double s = 0;
    for (int i = 0; i < x.rows(); ++i)
        s += detail::sq_dist(x.row(i), cent.row(assign[static_cast<std::size_t>(i)]), x.cols());
    return s;
}

// Style extraction on the tape: encode, l2-normalize, cluster the current
// values, then rebuild centroids as differentiable means of their assigned
// rows. Assignment indices are constants; gradients flow through the mean.
template <typename T>
struct StyleTokens {
    NodeId centroids;              // c x D tape node
    std::vector<int> assignments;  // over active rows (input row index -> cluster, -1 if masked)
    int count = 0;                 // c
    Mask mask;                     // all-active mask of length c
};

struct StyleExtractOptions {
    double ratio = 1.0 / 3.0;
    bool greedy = true;
    int max_iter = 100;
    double tol = 1e-6;
    std::uint64_t random_init_seed = 0;  // used when greedy == false
    bool strict_norm = false;
};

template <typename T>
StyleTokens<T> style_tokens(Graph<T>& g, NodeId item_level, const TransformerLayerNodes& enc,
                            const Mask& mask, const StyleExtractOptions& opt) {
    mask.require_nonempty("style-tokens");
    NodeId encoded = transformer_layer_forward(g, item_level, enc, mask);
    NodeId normalized = g.row_l2_normalize(encoded, opt.strict_norm);

    const Matrix<T>& full = g.value(normalized);
    const int n_total = full.rows();
    const int n_active = mask.active_count();
    std::vector<int> active_rows;
    active_rows.reserve(static_cast<std::size_t>(n_active));
    for (int i = 0; i < n_total; ++i)
        if (mask.active(i)) active_rows.push_back(i);

    Matrix<T> pts(n_active, full.cols());
    for (int i = 0; i < n_active; ++i)
        for (int d = 0; d < full.cols(); ++d) pts(i, d) = full(active_rows[static_cast<std::size_t>(i)], d);

    const int c = cluster_count(n_active, opt.ratio);
    Matrix<T> init;
    if (opt.greedy) {
        init = greedy_init(pts, c);
    } else {
        Rng rng(mix64(opt.random_init_seed));
        init = random_init(pts, c, rng);
    }
    ClusterResult<T> km = kmeans(pts, init, opt.max_iter, opt.tol);

    // Averaging matrix over the original (possibly padded) row space.
    Matrix<T> avg(c, n_total);
    std::vector<int> counts(static_cast<std::size_t>(c), 0);
    for (int i = 0; i < n_active; ++i) ++counts[static_cast<std::size_t>(km.assignments[static_cast<std::size_t>(i)])];
    for (int i = 0; i < n_active; ++i) {
        const int k = km.assignments[static_cast<std::size_t>(i)];
        avg(k, active_rows[static_cast<std::size_t>(i)]) =
            T(1) / static_cast<T>(counts[static_cast<std::size_t>(k)]);
    }

    StyleTokens<T> out;
    out.centroids = g.matmul(g.constant(std::move(avg)), normalized);
    out.assignments.assign(static_cast<std::size_t>(n_total), -1);
    for (int i = 0; i < n_active; ++i)
        out.assignments[static_cast<std::size_t>(active_rows[static_cast<std::size_t>(i)])] =
            km.assignments[static_cast<std::size_t>(i)];
    out.count = c;
    out.mask = Mask::all(c);
    return out;
}

}  // namespace otfe

#endif
