#pragma once

#include <map>
#include <string>
#include <vector>

#include "jem/core.hpp"
#include "jem/data.hpp"
#include "jem/model.hpp"

namespace jem {

struct EmptyGroundTruthError : std::runtime_error {
    explicit EmptyGroundTruthError(const std::string& m)
        : std::runtime_error(m) {}
};

struct RetrievalReport {
    std::string direction;  // "annotation" (img->txt) or "search" (txt->img)
    std::vector<std::size_t> ks;
    std::map<std::size_t, double> recalls;
    std::size_t median_rank = 0;
};

// Corpus indices sorted by ascending squared distance to the query; ties
// broken by ascending index.
std::vector<std::size_t> rank_items(const Vec& query, const Mat& corpus);

// Fraction of queries whose top-K ranked list hits its ground-truth set.
double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                   const std::vector<std::vector<std::size_t>>& ground_truth,
                   std::size_t k);

std::pair<RetrievalReport, RetrievalReport> evaluate_retrieval(
    const ModelParams& params, const Dataset& test,
    const std::vector<std::size_t>& ks);

void write_report_csv(const std::string& path, const RetrievalReport& ann,
                      const RetrievalReport& search);
void print_report(std::ostream& out, const RetrievalReport& ann,
                  const RetrievalReport& search);

// Fraction of subsets whose argmax soft assignment lands in its concept's
// majority cluster (agreement with planted concept labels).
double assignment_purity(const ModelParams& params, const Dataset& dataset,
                         const std::vector<std::size_t>& concept_labels);

}  // namespace jem
