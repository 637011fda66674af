#include "jem/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

namespace jem {

std::vector<std::size_t> rank_items(const Vec& query, const Mat& corpus) {
    if (query.size() != corpus.cols)
        throw DimMismatchError("rank_items: query dim != corpus dim");
    std::vector<double> dist(corpus.rows);
    for (std::size_t i = 0; i < corpus.rows; ++i)
        dist[i] = sq_euclidean(query, corpus.row_vec(i));
    std::vector<std::size_t> order(corpus.rows);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&dist](std::size_t a, std::size_t b) {
                         return dist[a] < dist[b];
                     });
    return order;
}

double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                   const std::vector<std::vector<std::size_t>>& ground_truth,
                   std::size_t k) {
    if (k < 1) throw std::invalid_argument("K must be >= 1");
    if (rankings.size() != ground_truth.size())
        throw DimMismatchError("rankings / ground truth count mismatch");
    std::size_t hits = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        if (ground_truth[q].empty())
            throw EmptyGroundTruthError("query " + std::to_string(q) +
                                        " has no ground truth");
        std::size_t top = std::min(k, rankings[q].size());
        bool hit = false;
        for (std::size_t i = 0; i < top && !hit; ++i)
            hit = std::find(ground_truth[q].begin(), ground_truth[q].end(),
                            rankings[q][i]) != ground_truth[q].end();
        if (hit) ++hits;
    }
    return double(hits) / double(rankings.size());
}

namespace {

std::size_t best_rank(const std::vector<std::size_t>& ranking,
                      const std::vector<std::size_t>& gt) {
    for (std::size_t i = 0; i < ranking.size(); ++i)
        if (std::find(gt.begin(), gt.end(), ranking[i]) != gt.end())
            return i + 1;
    return ranking.size();
}

std::size_t median_of(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

std::pair<RetrievalReport, RetrievalReport> evaluate_retrieval(
    const ModelParams& params, const Dataset& test,
    const std::vector<std::size_t>& ks) {
    std::size_t n = test.size();
    std::size_t d = params.dims.embed_dim;

    Mat img_embs(n, d);
    for (std::size_t i = 0; i < n; ++i)
        img_embs.set_row(i, embed_image(params, test.records[i].image_feat));

    // Caption corpus: all captions of all subsets, grouped by subset.
    std::vector<std::vector<std::size_t>> caption_ids(n);
    std::size_t total_caps = 0;
    for (std::size_t i = 0; i < n; ++i) total_caps += test.records[i].captions.size();
    Mat cap_embs(total_caps, d);
    std::vector<std::size_t> cap_owner(total_caps);
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (const Tokens& cap : test.records[i].captions) {
            cap_embs.set_row(c, embed_caption(params, cap));
            caption_ids[i].push_back(c);
            cap_owner[c] = i;
            ++c;
        }
    }

    // Annotation: image queries against the caption corpus.
    RetrievalReport ann;
    ann.direction = "annotation";
    ann.ks = ks;
    {
        std::vector<std::vector<std::size_t>> rankings(n), gt(n);
        std::vector<std::size_t> ranks;
        for (std::size_t i = 0; i < n; ++i) {
            rankings[i] = rank_items(img_embs.row_vec(i), cap_embs);
            gt[i] = caption_ids[i];
            ranks.push_back(best_rank(rankings[i], gt[i]));
        }
        for (std::size_t k : ks) ann.recalls[k] = recall_at_k(rankings, gt, k);
        ann.median_rank = median_of(ranks);
    }

    // Search: caption queries against the image corpus.
    RetrievalReport srch;
    srch.direction = "search";
    srch.ks = ks;
    {
        std::vector<std::vector<std::size_t>> rankings(total_caps),
            gt(total_caps);
        std::vector<std::size_t> ranks;
        for (std::size_t q = 0; q < total_caps; ++q) {
            rankings[q] = rank_items(cap_embs.row_vec(q), img_embs);
            gt[q] = {cap_owner[q]};
            ranks.push_back(best_rank(rankings[q], gt[q]));
        }
        for (std::size_t k : ks) srch.recalls[k] = recall_at_k(rankings, gt, k);
        srch.median_rank = median_of(ranks);
    }
    return {std::move(ann), std::move(srch)};
}

void write_report_csv(const std::string& path, const RetrievalReport& ann,
                      const RetrievalReport& search) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    out << "direction,K,recall\n";
    for (const auto& rep : {ann, search})
        for (std::size_t k : rep.ks)
            out << rep.direction << ',' << k << ',' << rep.recalls.at(k)
                << '\n';
}

void print_report(std::ostream& out, const RetrievalReport& ann,
                  const RetrievalReport& search) {
    out << "direction   ";
    for (std::size_t k : ann.ks) out << "  r@" << k;
    out << "  med_rank\n";
    for (const auto& rep : {ann, search}) {
        out << rep.direction;
        for (std::size_t i = rep.direction.size(); i < 12; ++i) out << ' ';
        for (std::size_t k : rep.ks) {
            char buf[16];
            std::snprintf(buf, sizeof buf, " %5.3f", rep.recalls.at(k));
            out << buf;
        }
        out << "  " << rep.median_rank << '\n';
    }
}

double assignment_purity(const ModelParams& params, const Dataset& dataset,
                         const std::vector<std::size_t>& concept_labels) {
    if (dataset.size() != concept_labels.size())
        throw DimMismatchError("concept label count != dataset size");
    std::size_t nq = params.dims.n_quant;
    // cluster -> concept histogram
    std::vector<std::map<std::size_t, std::size_t>> hist(nq);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        Vec emb = embed_image(params, dataset.records[i].image_feat);
        Vec w = assign_soft(params, emb);
        std::size_t argmax =
            std::max_element(w.begin(), w.end()) - w.begin();
        ++hist[argmax][concept_labels[i]];
    }
    std::size_t agree = 0;
    for (const auto& h : hist) {
        std::size_t best = 0;
        for (const auto& [g, count] : h) best = std::max(best, count);
        agree += best;
    }
    return double(agree) / double(dataset.size());
}

}  // namespace jem
