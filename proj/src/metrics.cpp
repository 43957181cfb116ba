#include "caplab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace caplab {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::size_t closest_ref_length(std::size_t cand, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > cand ? len - cand : cand - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

// Sorted before summing so the mean does not depend on example order.
double ordered_mean(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

bool has_vowel(const std::string& s) { return s.find_first_of("aeiouy") != std::string::npos; }

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

double BleuResult::precision(std::size_t n) const {
  if (n == 0 || n > totals.size()) throw MetricError("precision order out of range");
  return totals[n - 1] == 0 ? 0.0 : static_cast<double>(matches[n - 1]) / static_cast<double>(totals[n - 1]);
}

BleuResult bleu_n(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                  std::size_t n_max) {
  if (candidates.empty()) throw MetricError("bleu: empty candidate set");
  if (candidates.size() != references.size()) throw MetricError("bleu: candidates and reference sets differ in count");
  if (n_max == 0) throw MetricError("bleu: n_max must be positive");
  BleuResult out;
  out.matches.assign(n_max, 0);
  out.totals.assign(n_max, 0);
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto& cand = candidates[k];
    const auto& refs = references[k];
    if (refs.empty()) throw MetricError("bleu: candidate " + std::to_string(k) + " has no reference");
    out.candidate_length += cand.size();
    out.reference_length += closest_ref_length(cand.size(), refs);
    for (std::size_t n = 1; n <= n_max; ++n) {
      const NgramCounts cc = ngrams(cand, n);
      NgramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : cc) {
        const auto it = max_ref.find(g);
        out.matches[n - 1] += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
        out.totals[n - 1] += c;
      }
    }
  }
  const double c = static_cast<double>(out.candidate_length);
  const double r = static_cast<double>(out.reference_length);
  out.brevity_penalty = out.candidate_length == 0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - r / c));
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= n_max; ++n) {
    const double p = out.precision(n);
    if (p == 0.0) zero = true;
    if (!zero) log_sum += std::log(p);
    out.bleu.push_back(zero ? 0.0 : out.brevity_penalty * std::exp(log_sum / static_cast<double>(n)));
  }
  return out;
}

BleuResult sentence_bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t n_max) {
  return bleu_n({candidate}, {references}, n_max);
}

std::string simple_stem(const std::string& word) {
  std::string w = word;
  if (w.size() <= 3) return w;
  if (ends_with(w, "sses")) {
    w.erase(w.size() - 2);
  } else if (ends_with(w, "ies")) {
    w.erase(w.size() - 2);
  } else if (!ends_with(w, "ss") && ends_with(w, "s")) {
    w.pop_back();
  }
  for (std::string_view suffix : {"ing", "ed", "ly"}) {
    if (ends_with(w, suffix) && w.size() - suffix.size() >= 3 && has_vowel(w.substr(0, w.size() - suffix.size()))) {
      w.erase(w.size() - suffix.size());
      break;
    }
  }
  return w;
}

MeteorDetail meteor_single(const Tokens& candidate, const Tokens& reference, const MeteorParams& params) {
  if (reference.empty()) throw MetricError("meteor: empty reference");
  MeteorDetail d;
  if (candidate.empty()) return d;

  // Alignment: exact stage, then stem stage over what is left. Each stage
  // scans candidate words in order and prefers the reference position that
  // extends the previous alignment, else the first free one.
  std::vector<long> cand_to_ref(candidate.size(), -1);
  std::vector<bool> ref_used(reference.size(), false);
  auto run_stage = [&](auto&& key) {
    std::vector<std::string> ref_keys;
    for (const auto& r : reference) ref_keys.push_back(key(r));
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (cand_to_ref[i] >= 0) continue;
      const std::string k = key(candidate[i]);
      long choice = -1;
      if (i > 0 && cand_to_ref[i - 1] >= 0) {
        const auto next = static_cast<std::size_t>(cand_to_ref[i - 1] + 1);
        if (next < reference.size() && !ref_used[next] && ref_keys[next] == k) choice = static_cast<long>(next);
      }
      for (std::size_t j = 0; choice < 0 && j < reference.size(); ++j) {
        if (!ref_used[j] && ref_keys[j] == k) choice = static_cast<long>(j);
      }
      if (choice >= 0) {
        cand_to_ref[i] = choice;
        ref_used[static_cast<std::size_t>(choice)] = true;
      }
    }
  };
  run_stage([](const std::string& w) { return w; });
  run_stage([](const std::string& w) { return simple_stem(w); });

  long prev_ref = -2;
  bool prev_matched = false;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (cand_to_ref[i] < 0) {
      prev_matched = false;
      continue;
    }
    ++d.matches;
    if (!prev_matched || cand_to_ref[i] != prev_ref + 1) ++d.chunks;
    prev_ref = cand_to_ref[i];
    prev_matched = true;
  }
  if (d.matches == 0) return d;
  const double m = static_cast<double>(d.matches);
  d.precision = m / static_cast<double>(candidate.size());
  d.recall = m / static_cast<double>(reference.size());
  d.fmean = d.precision * d.recall / (params.alpha * d.precision + (1.0 - params.alpha) * d.recall);
  d.penalty = params.gamma * std::pow(static_cast<double>(d.chunks) / m, params.beta);
  d.score = d.fmean * (1.0 - d.penalty);
  return d;
}

double meteor(const Tokens& candidate, const std::vector<Tokens>& references, const MeteorParams& params) {
  if (references.empty()) throw MetricError("meteor: no references");
  double best = 0.0;
  for (const auto& r : references) best = std::max(best, meteor_single(candidate, r, params).score);
  return best;
}

PrfScore token_prf(const Tokens& candidate, const std::vector<Tokens>& references) {
  if (references.empty()) throw MetricError("token_prf: no references");
  PrfScore best;
  bool first = true;
  for (const auto& ref : references) {
    if (ref.empty()) throw MetricError("token_prf: empty reference");
    std::map<std::string, std::size_t> pool;
    for (const auto& w : ref) ++pool[w];
    std::size_t overlap = 0;
    for (const auto& w : candidate) {
      auto it = pool.find(w);
      if (it != pool.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    PrfScore s;
    s.precision = candidate.empty() ? 0.0 : static_cast<double>(overlap) / static_cast<double>(candidate.size());
    s.recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    if (first || s.f1 > best.f1) best = s;
    first = false;
  }
  return best;
}

CorpusReport evaluate_captions(const std::vector<Tokens>& candidates,
                               const std::vector<std::vector<Tokens>>& references) {
  if (candidates.empty()) throw MetricError("evaluate: empty corpus");
  CorpusReport report;
  report.candidates = candidates;
  std::vector<double> meteors, ps, rs, fs;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    ExampleMetrics row;
    row.id = std::to_string(k);
    const BleuResult b = sentence_bleu(candidates[k], references[k]);
    for (std::size_t n = 0; n < 4; ++n) row.bleu[n] = b.bleu[n];
    row.meteor = meteor(candidates[k], references[k]);
    row.prf = token_prf(candidates[k], references[k]);
    meteors.push_back(row.meteor);
    ps.push_back(row.prf.precision);
    rs.push_back(row.prf.recall);
    fs.push_back(row.prf.f1);
    report.examples.push_back(std::move(row));
  }
  const BleuResult corpus = bleu_n(candidates, references);
  for (std::size_t n = 0; n < 4; ++n) report.bleu[n] = corpus.bleu[n];
  report.meteor = ordered_mean(meteors);
  report.prf = {ordered_mean(ps), ordered_mean(rs), ordered_mean(fs)};
  return report;
}

std::string metrics_csv(const CorpusReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(6);
  out << "example_id,bleu1,bleu2,bleu3,bleu4,meteor,precision,recall,f1\n";
  auto row = [&](const std::string& id, const double* bleu, double met, const PrfScore& prf) {
    out << id;
    for (std::size_t n = 0; n < 4; ++n) out << ',' << bleu[n];
    out << ',' << met << ',' << prf.precision << ',' << prf.recall << ',' << prf.f1 << '\n';
  };
  for (const auto& e : report.examples) row(e.id, e.bleu, e.meteor, e.prf);
  row("CORPUS", report.bleu, report.meteor, report.prf);
  return out.str();
}

void write_metrics_csv(const CorpusReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write metrics file " + path.string());
  out << metrics_csv(report);
}

}  // namespace caplab
