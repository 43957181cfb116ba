#pragma once

// Caption metrics: corpus BLEU, METEOR (exact and stem stages) and token
// precision/recall/F1.

#include <filesystem>
#include <string>
#include <vector>

#include "caplab/data.hpp"

namespace caplab {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Tokens = std::vector<std::string>;

struct BleuResult {
  std::vector<double> bleu;              // bleu[n-1] = BLEU-n
  std::vector<std::size_t> matches;      // clipped n-gram matches per order
  std::vector<std::size_t> totals;       // candidate n-grams per order
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  double precision(std::size_t n) const;  // p_n, 1-based
};

// Corpus-level: clipped counts summed over the corpus, closest reference
// length (shorter on ties) for the brevity penalty.
BleuResult bleu_n(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                  std::size_t n_max = 4);
BleuResult sentence_bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t n_max = 4);

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

struct MeteorDetail {
  double score = 0.0;
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0.0;
  double recall = 0.0;
  double fmean = 0.0;
  double penalty = 0.0;
};

// Suffix-stripping stemmer used by the METEOR stem stage.
std::string simple_stem(const std::string& word);

MeteorDetail meteor_single(const Tokens& candidate, const Tokens& reference, const MeteorParams& params = {});
// Max over references.
double meteor(const Tokens& candidate, const std::vector<Tokens>& references, const MeteorParams& params = {});

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Unigram-multiset overlap against the reference with the highest F1.
PrfScore token_prf(const Tokens& candidate, const std::vector<Tokens>& references);

struct ExampleMetrics {
  std::string id;
  double bleu[4] = {0, 0, 0, 0};  // sentence level
  double meteor = 0.0;
  PrfScore prf;
};

struct CorpusReport {
  std::vector<ExampleMetrics> examples;
  std::vector<Tokens> candidates;
  double bleu[4] = {0, 0, 0, 0};  // corpus level
  double meteor = 0.0;            // mean
  PrfScore prf;                   // means
};

// Aggregates are independent of example order.
CorpusReport evaluate_captions(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references);

// Header example_id,bleu1,bleu2,bleu3,bleu4,meteor,precision,recall,f1; the
// last row carries example_id CORPUS.
void write_metrics_csv(const CorpusReport& report, const std::filesystem::path& path);
std::string metrics_csv(const CorpusReport& report);

}  // namespace caplab
