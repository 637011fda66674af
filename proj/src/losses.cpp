#include "jem/losses.hpp"

#include <cmath>

namespace jem {

double center_loss(const std::vector<Vec>& img_embs,
                   const std::vector<Vec>& txt_embs,
                   const std::vector<std::size_t>& subset_labels,
                   const CenterBank& bank, double delta) {
    if (bank.quantized)
        throw std::invalid_argument("center_loss needs an unquantized bank");
    double loss = 0.0;
    for (std::size_t i = 0; i < subset_labels.size(); ++i) {
        std::size_t n = subset_labels[i];
        if (n >= bank.centers.rows)
            throw LabelOutOfRangeError("subset label " + std::to_string(n) +
                                       " out of center bank");
        Vec c = bank.centers.row_vec(n);
        loss += hinge(sq_euclidean(img_embs[i], c) - delta);
        loss += hinge(sq_euclidean(txt_embs[i], c) - delta);
    }
    return loss;
}

double quantized_center_loss(const std::vector<Vec>& img_embs,
                             const std::vector<Vec>& txt_embs,
                             const std::vector<Vec>& w_img,
                             const std::vector<Vec>& w_txt,
                             const CenterBank& bank, double delta,
                             double alpha) {
    if (!bank.quantized)
        throw std::invalid_argument(
            "quantized_center_loss needs a quantized bank");
    std::size_t nq = bank.centers.rows;
    auto check_weights = [nq](const std::vector<Vec>& ws) {
        for (const Vec& w : ws) {
            if (w.size() != nq)
                throw DimMismatchError("assignment weight length != N_q");
            double s = 0.0;
            for (double x : w) s += x;
            if (std::abs(s - 1.0) > 1e-6)
                throw WeightsNotNormalizedError(
                    "soft assignment weights sum to " + std::to_string(s));
        }
    };
    check_weights(w_img);
    check_weights(w_txt);

    double loss = 0.0;
    auto data_term = [&](const std::vector<Vec>& embs,
                         const std::vector<Vec>& ws) {
        for (std::size_t i = 0; i < embs.size(); ++i)
            for (std::size_t j = 0; j < nq; ++j)
                loss += ws[i][j] *
                        hinge(sq_euclidean(embs[i], bank.centers.row_vec(j)) -
                              delta);
    };
    data_term(img_embs, w_img);
    data_term(txt_embs, w_txt);

    // Repulsion over unordered center pairs.
    for (std::size_t k1 = 0; k1 < nq; ++k1)
        for (std::size_t k2 = k1 + 1; k2 < nq; ++k2)
            loss += alpha * hinge(2.0 * delta -
                                  sq_euclidean(bank.centers.row_vec(k1),
                                               bank.centers.row_vec(k2)));
    return loss;
}

double triplet_adaptive(const std::vector<Vec>& img_embs,
                        const std::vector<Vec>& pos_txt,
                        const std::vector<Vec>& neg_txt,
                        const std::vector<Vec>& txt_embs,
                        const std::vector<Vec>& pos_img,
                        const std::vector<Vec>& neg_img, double m_x,
                        double m_y) {
    double loss = 0.0;
    for (std::size_t i = 0; i < img_embs.size(); ++i)
        loss += hinge(sq_euclidean(img_embs[i], pos_txt[i]) -
                      sq_euclidean(img_embs[i], neg_txt[i]) + m_x);
    for (std::size_t i = 0; i < txt_embs.size(); ++i)
        loss += hinge(sq_euclidean(txt_embs[i], pos_img[i]) -
                      sq_euclidean(txt_embs[i], neg_img[i]) + m_y);
    return loss;
}

double contrastive_baseline(const std::vector<std::pair<Vec, Vec>>& pos_pairs,
                            const std::vector<std::pair<Vec, Vec>>& neg_pairs,
                            double margin) {
    double loss = 0.0;
    for (const auto& [a, b] : pos_pairs) loss += sq_euclidean(a, b);
    for (const auto& [a, b] : neg_pairs)
        loss += hinge(margin - sq_euclidean(a, b));
    return loss;
}

double cross_entropy(const Vec& logits, std::size_t label) {
    if (label >= logits.size())
        throw LabelOutOfRangeError("CE label " + std::to_string(label) +
                                   " out of range");
    return log_sum_exp(logits) - logits[label];
}

LossBreakdown total_loss(double l_center, double l_triplet, double l_ce_img,
                         double l_ce_txt) {
    for (double v : {l_center, l_triplet, l_ce_img, l_ce_txt})
        if (!std::isfinite(v))
            throw NonFinitePartError("non-finite loss part");
    LossBreakdown out;
    out.l_center = l_center;
    out.l_triplet = l_triplet;
    out.l_ce_img = l_ce_img;
    out.l_ce_txt = l_ce_txt;
    out.total = l_center + l_triplet + l_ce_img + l_ce_txt;
    return out;
}

std::pair<double, double> margin_ratios(const std::vector<double>& img_args,
                                        const std::vector<double>& txt_args) {
    if (img_args.empty() || txt_args.empty())
        throw EmptyBatchError("margin_ratios needs a nonempty batch");
    auto ratio = [](const std::vector<double>& args) {
        std::size_t count = 0;
        for (double a : args)
            if (a > 0.0) ++count;
        return double(count) / double(args.size());
    };
    return {ratio(img_args), ratio(txt_args)};
}

}  // namespace jem
