#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pwc/graph.hpp"
#include "pwc/probmap.hpp"

namespace pwc {

// ---- visibility estimation ---------------------------------------------------

// Which source cells count towards the consistency loss. Flags cover the
// spatial columns only; the selection is a value-side decision, gradients do
// not flow through it.
struct VisibilityMask {
    std::vector<std::uint8_t> flags;
    int selected = 0;
    double gamma = 1.0;
    bool empty_warning = false;
};

// Scores each eligible source column by the predicted mass at its true target
// cell and keeps the top ceil(gamma * n_eligible), ties resolved towards the
// lower column index.
template <typename T>
VisibilityMask estimate_visibility(const ProbMapping<T>& predicted,
                                   const ProbMapping<T>& gt, double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0))
        throw std::invalid_argument("estimate_visibility: gamma must be in (0, 1]");
    if (!(predicted.tgt == gt.tgt) || !(predicted.src == gt.src))
        throw std::invalid_argument("estimate_visibility: grid mismatch");
    VisibilityMask mask;
    mask.gamma = gamma;
    mask.flags.assign(static_cast<std::size_t>(gt.spatial_cols()), 0);
    std::vector<int> targets = gt_target_indices(gt);
    std::vector<int> cand;
    for (int j = 0; j < gt.spatial_cols(); ++j)
        if (targets[j] >= 0) cand.push_back(j);
    if (cand.empty()) {
        mask.empty_warning = true;
        return mask;
    }
    int keep = static_cast<int>(std::ceil(gamma * static_cast<double>(cand.size())));
    keep = std::min<int>(keep, static_cast<int>(cand.size()));
    std::vector<double> score(cand.size());
    for (std::size_t c = 0; c < cand.size(); ++c)
        score[c] = static_cast<double>(predicted.probs.at(targets[cand[c]], cand[c]));
    std::vector<int> order(cand.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return cand[a] < cand[b];
    });
    for (int r = 0; r < keep; ++r) mask.flags[cand[order[r]]] = 1;
    mask.selected = keep;
    return mask;
}

// ---- loss terms --------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> target_tensor(const ProbMapping<T>& gt, int rows, int cols) {
    if (gt.probs.shape != std::vector<int>{rows, cols})
        throw std::invalid_argument("loss target shape does not match the prediction");
    return gt.probs;
}

}  // namespace detail

// Cross entropy against the given target mapping, averaged over the flagged
// columns. Columns with a cleared flag contribute nothing, so their gradient
// is exactly zero. An empty mask yields a constant zero loss.
template <typename T>
Var<T> visibility_weighted_ce(Graph<T>& g, const MappingVar<T>& pred,
                              const ProbMapping<T>& gt, const VisibilityMask& mask) {
    const Tensor<T>& P = g.value(pred.probs);
    int rows = P.shape[0], cols = P.shape[1];
    int spatial = pred.src.cells();
    if (static_cast<int>(mask.flags.size()) != spatial)
        throw std::invalid_argument("visibility mask length does not match the source grid");
    int count = 0;
    for (std::uint8_t f : mask.flags) count += f ? 1 : 0;
    if (count == 0) return g.constant(Tensor<T>({1}, {T{0}}));
    std::vector<T> w(static_cast<std::size_t>(cols), T{0});
    for (int j = 0; j < spatial; ++j)
        if (mask.flags[j]) w[j] = T{1} / static_cast<T>(count);
    return g.ce_with_target(pred.probs, detail::target_tensor(gt, rows, cols), w);
}

// Composed consistency loss: chains the two mappings, estimates visibility
// from the composed values against the one-hot target, then applies the
// masked cross entropy to the composed mapping.
template <typename T>
struct BipathResult {
    MappingVar<T> composed;
    VisibilityMask mask;
    Var<T> loss;
};

template <typename T>
BipathResult<T> pw_bipath_loss(Graph<T>& g, const MappingVar<T>& left,
                               const MappingVar<T>& right, const ProbMapping<T>& gt,
                               double gamma) {
    BipathResult<T> out;
    out.composed = compose(g, left, right);
    ProbMapping<T> snapshot = mapping_value(g, out.composed);
    out.mask = estimate_visibility(snapshot, gt, gamma);
    out.loss = visibility_weighted_ce(g, out.composed, gt, out.mask);
    return out;
}

// Direct supervision of a single mapping by the smooth target. With an
// unmatched state every spatial column carries a target (invalid cells point
// at the extra state); without one only the eligible columns are averaged.
template <typename T>
Var<T> pwarp_sup_loss(Graph<T>& g, const MappingVar<T>& pred, const ProbMapping<T>& gt) {
    const Tensor<T>& P = g.value(pred.probs);
    int rows = P.shape[0], cols = P.shape[1];
    int spatial = pred.src.cells();
    if (pred.has_unmatched_state != gt.has_unmatched_state)
        throw std::invalid_argument("pwarp_sup_loss: unmatched-state flags differ");
    std::vector<T> w(static_cast<std::size_t>(cols), T{0});
    if (gt.has_unmatched_state) {
        for (int j = 0; j < spatial; ++j) w[j] = T{1} / static_cast<T>(spatial);
    } else {
        int count = 0;
        for (int j = 0; j < spatial; ++j) count += gt.column_eligible(j) ? 1 : 0;
        if (count == 0) return g.constant(Tensor<T>({1}, {T{0}}));
        for (int j = 0; j < spatial; ++j)
            if (gt.column_eligible(j)) w[j] = T{1} / static_cast<T>(count);
    }
    return g.ce_with_target(pred.probs, detail::target_tensor(gt, rows, cols), w);
}

// Negative-pair loss: pushes the unmatched-state row towards p_neg on every
// spatial column.
template <typename T>
Var<T> pneg_loss(Graph<T>& g, const MappingVar<T>& pred, double p_neg) {
    if (!pred.has_unmatched_state)
        throw std::invalid_argument("pneg_loss: mapping has no unmatched state");
    if (!(p_neg > 0.0 && p_neg < 1.0))
        throw std::invalid_argument("pneg_loss: p_neg must be in (0, 1)");
    return g.bce_last_row(pred.probs, static_cast<T>(p_neg), pred.src.cells());
}

// ---- keypoint supervision ------------------------------------------------------

enum class KeypointLossKind { ce, epe };

// One annotated correspondence in grid coordinates: the source point picks
// the predicted column (nearest cell), the target point is the regression or
// classification target.
struct KeypointPair {
    double sx = 0.0, sy = 0.0;
    double tx = 0.0, ty = 0.0;
};

template <typename T>
Var<T> keypoint_loss(Graph<T>& g, const MappingVar<T>& pred,
                     const std::vector<KeypointPair>& kps, KeypointLossKind kind) {
    if (kps.empty()) throw std::invalid_argument("keypoint_loss: no keypoints given");
    if (pred.has_unmatched_state)
        throw std::invalid_argument("keypoint_loss: mapping must not carry an unmatched state");
    const Tensor<T>& P = g.value(pred.probs);
    int rows = P.shape[0], cols = P.shape[1];
    Grid tg = pred.tgt, sg = pred.src;
    auto col_of = [&](const KeypointPair& kp) {
        int cx = static_cast<int>(std::lround(kp.sx)), cy = static_cast<int>(std::lround(kp.sy));
        if (cx < 0 || cx >= sg.w || cy < 0 || cy >= sg.h)
            throw std::invalid_argument("keypoint_loss: source keypoint outside the grid");
        return cy * sg.w + cx;
    };
    T per = T{1} / static_cast<T>(kps.size());
    if (kind == KeypointLossKind::ce) {
        Tensor<T> target({rows, cols}, T{0});
        std::vector<T> w(static_cast<std::size_t>(cols), T{0});
        for (const KeypointPair& kp : kps) {
            int j = col_of(kp);
            std::vector<double> plane = detail::smooth_plane(tg.h, tg.w, kp.tx, kp.ty);
            for (int i = 0; i < tg.cells(); ++i)
                target.at(i, j) += per * static_cast<T>(plane[i]);
            w[j] = T{1};
        }
        return g.ce_with_target(pred.probs, target, w);
    }
    // epe: soft-argmax coordinates per column, penalised by euclidean distance
    Tensor<T> coords({2, rows});
    for (int i = 0; i < rows; ++i) {
        coords.at(0, i) = static_cast<T>(i % tg.w);
        coords.at(1, i) = static_cast<T>(i / tg.w);
    }
    Var<T> xy = g.matmul_const_left(coords, pred.probs);
    Var<T> total = g.constant(Tensor<T>({1}, {T{0}}));
    for (const KeypointPair& kp : kps) {
        int j = col_of(kp);
        Tensor<T> tgt({2, cols}, T{0});
        tgt.at(0, j) = static_cast<T>(kp.tx);
        tgt.at(1, j) = static_cast<T>(kp.ty);
        std::vector<T> w(static_cast<std::size_t>(cols), T{0});
        w[j] = per;
        total = g.add(total, g.euclid_to_const(xy, tgt, w));
    }
    return total;
}

// ---- composite objectives ------------------------------------------------------

struct LossReport {
    double vis_pw_bi = 0.0;
    double pwarp_sup = 0.0;
    double pneg = 0.0;
    double kp = 0.0;
    double lambda_psup = 1.0;
    double lambda_pneg = 1.0;
    double lambda_kp = 1.0;
    double total = 0.0;
};

struct LambdaCaps {
    double lo = 1e-3;
    double hi = 1e3;
};

// Ratio of two detached loss values, clamped into the caps. 0/0 keeps the
// neutral weight 1.
inline double balance_lambda(double numer, double denom, const LambdaCaps& caps = {}) {
    double v;
    if (denom == 0.0)
        v = (numer == 0.0) ? 1.0 : caps.hi;
    else
        v = numer / denom;
    return std::clamp(v, caps.lo, caps.hi);
}

// Totals with the weights supplied by the caller. The ratio-balanced
// objectives below snapshot their weights from the current values, so the
// weights act as detached constants in the gradient.
template <typename T>
Var<T> weak_total(Graph<T>& g, Var<T> vis, Var<T> psup, Var<T> pneg,
                  double lambda_psup, double lambda_pneg) {
    Var<T> t = g.add(vis, g.scale(psup, static_cast<T>(lambda_psup)));
    return g.add(t, g.scale(pneg, static_cast<T>(lambda_pneg)));
}

template <typename T>
Var<T> strong_total(Graph<T>& g, Var<T> vis, Var<T> psup, Var<T> kp,
                    double lambda_psup, double lambda_kp) {
    Var<T> t = g.add(vis, g.scale(psup, static_cast<T>(lambda_psup)));
    return g.add(t, g.scale(kp, static_cast<T>(lambda_kp)));
}

template <typename T>
std::pair<Var<T>, LossReport> weak_objective(Graph<T>& g, Var<T> vis, Var<T> psup,
                                             Var<T> pneg, double lambda_pneg = 1.0,
                                             const LambdaCaps& caps = {}) {
    LossReport rep;
    rep.vis_pw_bi = static_cast<double>(g.value(vis).data[0]);
    rep.pwarp_sup = static_cast<double>(g.value(psup).data[0]);
    rep.pneg = static_cast<double>(g.value(pneg).data[0]);
    rep.lambda_psup = balance_lambda(rep.vis_pw_bi, rep.pwarp_sup, caps);
    rep.lambda_pneg = lambda_pneg;
    Var<T> total = weak_total(g, vis, psup, pneg, rep.lambda_psup, rep.lambda_pneg);
    rep.total = static_cast<double>(g.value(total).data[0]);
    return {total, rep};
}

template <typename T>
std::pair<Var<T>, LossReport> strong_objective(Graph<T>& g, Var<T> vis, Var<T> psup,
                                               Var<T> kp, const LambdaCaps& caps = {}) {
    LossReport rep;
    rep.vis_pw_bi = static_cast<double>(g.value(vis).data[0]);
    rep.pwarp_sup = static_cast<double>(g.value(psup).data[0]);
    rep.kp = static_cast<double>(g.value(kp).data[0]);
    rep.lambda_psup = balance_lambda(rep.vis_pw_bi, rep.pwarp_sup, caps);
    rep.lambda_kp = balance_lambda(rep.pwarp_sup * rep.lambda_psup + rep.vis_pw_bi, rep.kp, caps);
    Var<T> total = strong_total(g, vis, psup, kp, rep.lambda_psup, rep.lambda_kp);
    rep.total = static_cast<double>(g.value(total).data[0]);
    return {total, rep};
}

// ---- ablation baselines ---------------------------------------------------------

enum class BaselineKind { max_score, min_entropy };

// Unsupervised scores over the spatial columns. sign is +1 for positive
// pairs and -1 for negatives, flipping the direction of the preference.
template <typename T>
Var<T> baseline_loss(Graph<T>& g, const MappingVar<T>& pred, BaselineKind kind, int sign) {
    if (sign != 1 && sign != -1) throw std::invalid_argument("baseline_loss: sign must be +-1");
    int spatial = pred.src.cells();
    if (kind == BaselineKind::max_score)
        return g.scale(g.col_max_mean(pred.probs, spatial), static_cast<T>(-sign));
    return g.scale(g.col_entropy_mean(pred.probs, spatial), static_cast<T>(sign));
}

}  // namespace pwc
