#pragma once

#include "rmarn/num/ops.hpp"

namespace rmarn::objective {

// Bidirectional temperature-scaled contrastive loss over an in-batch
// similarity matrix. tau1/alpha1 weight the text->point direction (softmax
// over rows), tau2/alpha2 the point->text direction (softmax over columns).
struct LossConfig {
    double tau1 = 0.07;
    double tau2 = 0.07;
    double alpha1 = 0.5;
    double alpha2 = 0.5;

    void validate() const {
        require(tau1 > 0.0 && tau2 > 0.0, ErrorKind::config, "loss: temperatures must be positive");
        require(alpha1 >= 0.0 && alpha2 >= 0.0, ErrorKind::config,
                "loss: direction weights must be nonnegative");
    }
};

// L = -mean_i [ alpha1 log softmax_row(S/tau1)[i,i] + alpha2 log softmax_col(S/tau2)[i,i] ]
// Matched pairs sit on the diagonal; off-diagonal entries act as in-batch
// negatives.
template <typename T>
num::VarT<T> contrastive_loss(const num::VarT<T>& s, const LossConfig& cfg) {
    using namespace num;
    cfg.validate();
    require(s.value().rank() == 2 && s.value().dim(0) == s.value().dim(1), ErrorKind::argument,
            "contrastive_loss: similarity matrix must be square");
    require(s.value().dim(0) >= 2, ErrorKind::argument,
            "contrastive_loss: batch must contain at least 2 pairs");
    require(s.value().all_finite(), ErrorKind::numeric,
            "contrastive_loss: non-finite similarity matrix");
    auto row_term = mean_all(diag(row_log_softmax(scale(s, 1.0 / cfg.tau1))));
    auto col_term = mean_all(diag(row_log_softmax(scale(transpose(s), 1.0 / cfg.tau2))));
    auto weighted = add(scale(row_term, cfg.alpha1), scale(col_term, cfg.alpha2));
    return scale(weighted, -1.0);
}

}  // namespace rmarn::objective
