// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gerlab/errors.hpp"
#include "gerlab/hash.hpp"
#include "gerlab/io.hpp"
#include "gerlab/metrics.hpp"
#include "gerlab/rng.hpp"

namespace gerlab {

using UnitSeq = std::vector<std::size_t>;

// Word vocabulary over fine-unit spellings. Unit 0 is the separator; spelling
// units are drawn from [1, U). Each word's unit form is its spelling followed
// by one separator, which makes the word <-> unit conversion exactly
// invertible on clean sequences.
struct Lexicon {
  static constexpr std::size_t kSeparator = 0;

  std::size_t unit_alphabet = 0;  // U
  std::vector<UnitSeq> spellings;

  std::size_t vocab_size() const { return spellings.size(); }
  std::size_t unknown_word() const { return vocab_size(); }

  void rebuild_index() {
    index_.clear();
    for (std::size_t w = 0; w < spellings.size(); ++w)
      index_[spelling_key(spellings[w])] = w;
  }

  // Exact spelling lookup; vocab_size() when no word matches.
  std::size_t lookup(const UnitSeq& spelling) const {
    auto it = index_.find(spelling_key(spelling));
    return it == index_.end() ? unknown_word() : it->second;
  }

 private:
  static std::string spelling_key(const UnitSeq& s) {
    std::string key;
    for (std::size_t u : s) {
      key += std::to_string(u);
      key += ',';
    }
    return key;
  }
  std::unordered_map<std::string, std::size_t> index_;
};

inline Lexicon build_lexicon(std::size_t vocab_size, std::size_t unit_alphabet,
                             std::size_t spelling_min, std::size_t spelling_max,
                             std::uint64_t seed, double unit_skew = 0.7) {
  if (unit_alphabet < 8)
    throw ConfigError("build_lexicon: unit alphabet must be >= 8");
  if (vocab_size < 50)
    throw ConfigError("build_lexicon: vocabulary must be >= 50 words");
  if (spelling_min < 1 || spelling_min > spelling_max)
    throw ConfigError("build_lexicon: bad spelling length range");

  // Pigeonhole: the alphabet must be able to spell the vocabulary.
  double capacity = 0.0;
  for (std::size_t len = spelling_min; len <= spelling_max; ++len)
    capacity += std::pow(static_cast<double>(unit_alphabet - 1),
                         static_cast<double>(len));
  if (capacity < static_cast<double>(vocab_size))
    throw ConfigError("build_lexicon: only " + std::to_string(capacity) +
                      " possible spellings for " + std::to_string(vocab_size) +
                      " words");

  // Skewed unit frequencies keep the corrupted-unit statistics informative
  // about which permutation acted on them.
  std::vector<double> weights(unit_alphabet - 1);
  for (std::size_t u = 0; u < weights.size(); ++u)
    weights[u] = 1.0 / std::pow(static_cast<double>(u + 1), unit_skew);

  Rng rng(seed, "lexicon");
  Lexicon lex;
  lex.unit_alphabet = unit_alphabet;
  std::unordered_map<std::string, bool> seen;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 1000 * vocab_size;
  while (lex.spellings.size() < vocab_size) {
    if (++attempts > max_attempts)
      throw ConfigError("build_lexicon: could not generate " +
                        std::to_string(vocab_size) + " unique spellings");
    const std::size_t len =
        spelling_min + rng.uniform_int(spelling_max - spelling_min + 1);
    UnitSeq s(len);
    std::string key;
    for (auto& u : s) {
      u = 1 + rng.weighted_index(weights);
      key += std::to_string(u);
      key += ',';
    }
    if (seen.emplace(key, true).second) lex.spellings.push_back(std::move(s));
  }
  lex.rebuild_index();
  return lex;
}

// ---------------------------------------------------------------------------
// Word <-> unit conversion
// ---------------------------------------------------------------------------

inline UnitSeq words_to_units(const WordSeq& words, const Lexicon& lex) {
  UnitSeq out;
  for (std::size_t w : words) {
    if (w >= lex.vocab_size())
      throw VocabularyError("words_to_units: word " + std::to_string(w) +
                            " not in lexicon of " +
                            std::to_string(lex.vocab_size()));
    out.insert(out.end(), lex.spellings[w].begin(), lex.spellings[w].end());
    out.push_back(Lexicon::kSeparator);
  }
  return out;
}

// Exact lookup decode; unit runs that match no spelling map to the
// unknown-word token.
inline WordSeq units_to_words(const UnitSeq& units, const Lexicon& lex) {
  WordSeq out;
  UnitSeq run;
  for (std::size_t u : units) {
    if (u == Lexicon::kSeparator) {
      if (!run.empty()) {
        out.push_back(lex.lookup(run));
        run.clear();
      }
    } else {
      run.push_back(u);
    }
  }
  if (!run.empty()) out.push_back(lex.lookup(run));
  return out;
}

// Word segments of a unit stream: row ranges covering each word's spelling
// plus its separator. Used to pool unit rows back to word positions.
inline std::vector<std::pair<std::size_t, std::size_t>> word_segments(
    const UnitSeq& units) {
  std::vector<std::pair<std::size_t, std::size_t>> segs;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (units[i] == Lexicon::kSeparator) {
      if (i + 1 > begin) segs.emplace_back(begin, i + 1);
      begin = i + 1;
    }
  }
  if (begin < units.size()) segs.emplace_back(begin, units.size());
  return segs;
}

// ---------------------------------------------------------------------------
// Domain channels
// ---------------------------------------------------------------------------

// Substitution-only corruption process standing in for one accent. The
// confusion matrix is identity mixed with a domain-specific permutation of
// the non-separator units; the separator is never substituted, so channels
// are length- and word-boundary-preserving.
struct DomainChannel {
  std::string domain_tag;
  std::size_t unit_alphabet = 0;
  std::vector<std::size_t> permutation;  // over [0, U); fixes 0
  double confusion_strength = 0.0;       // mixing weight of the permutation
  double substitution_rate = 0.0;        // P(unit passes through the matrix)
  std::uint64_t seed = 0;

  double confusion(std::size_t u, std::size_t v) const {
    if (u == Lexicon::kSeparator) return v == u ? 1.0 : 0.0;
    double p = 0.0;
    if (v == u) p += 1.0 - confusion_strength;
    if (permutation[u] == v) p += confusion_strength;
    return p;
  }

  // Effective per-unit kernel including the substitution rate.
  double effective(std::size_t u, std::size_t v) const {
    return (u == v ? 1.0 - substitution_rate : 0.0) +
           substitution_rate * confusion(u, v);
  }

  UnitSeq corrupt(const UnitSeq& units, Rng& rng) const {
    UnitSeq out(units.size());
    for (std::size_t i = 0; i < units.size(); ++i) {
      const std::size_t u = units[i];
      if (u == Lexicon::kSeparator || rng.uniform() >= substitution_rate) {
        out[i] = u;
        continue;
      }
      out[i] = rng.uniform() < confusion_strength ? permutation[u] : u;
    }
    return out;
  }

  // Matrix distance to another channel: fraction of non-separator units the
  // two permutations disagree on, weighted by strength difference.
  double distance(const DomainChannel& other) const {
    std::size_t diff = 0;
    for (std::size_t u = 1; u < unit_alphabet; ++u)
      if (permutation[u] != other.permutation[u]) ++diff;
    return static_cast<double>(diff) /
               static_cast<double>(unit_alphabet - 1) +
           std::abs(confusion_strength - other.confusion_strength);
  }
};

inline DomainChannel make_channel(const std::string& domain_tag,
                                  std::size_t unit_alphabet, double strength,
                                  double rate, std::uint64_t seed) {
  DomainChannel ch;
  ch.domain_tag = domain_tag;
  ch.unit_alphabet = unit_alphabet;
  ch.confusion_strength = strength;
  ch.substitution_rate = rate;
  ch.seed = seed;
  ch.permutation.resize(unit_alphabet);
  std::iota(ch.permutation.begin(), ch.permutation.end(), 0);
  // Random permutation of [1, U) leaving the separator fixed.
  Rng rng(seed, "channel:" + domain_tag);
  for (std::size_t i = unit_alphabet - 1; i > 1; --i) {
    const std::size_t j = 1 + rng.uniform_int(i);
    std::swap(ch.permutation[i], ch.permutation[j]);
  }
  return ch;
}

// A near-duplicate of `base`: the same permutation with a few extra
// transpositions. Mirrors accent pairs that blur in routing space.
inline DomainChannel make_near_duplicate(const DomainChannel& base,
                                         const std::string& domain_tag,
                                         std::size_t transpositions,
                                         std::uint64_t seed) {
  DomainChannel ch = base;
  ch.domain_tag = domain_tag;
  ch.seed = seed;
  Rng rng(seed, "neardup:" + domain_tag);
  for (std::size_t k = 0; k < transpositions; ++k) {
    const std::size_t a = 1 + rng.uniform_int(ch.unit_alphabet - 1);
    const std::size_t b = 1 + rng.uniform_int(ch.unit_alphabet - 1);
    std::swap(ch.permutation[a], ch.permutation[b]);
  }
  return ch;
}

// Per-word maximum-likelihood decode of a corrupted unit stream under the
// channel's effective kernel. Ties break toward the lowest word id. The true
// word always has positive likelihood, so every segment decodes to some word.
inline WordSeq decode_ml(const UnitSeq& corrupted, const Lexicon& lex,
                         const DomainChannel& channel) {
  WordSeq out;
  UnitSeq run;
  auto flush = [&]() {
    if (run.empty()) return;
    std::size_t best = lex.unknown_word();
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < lex.vocab_size(); ++w) {
      const UnitSeq& sp = lex.spellings[w];
      if (sp.size() != run.size()) continue;
      double score = 0.0;
      for (std::size_t i = 0; i < run.size(); ++i) {
        const double p = channel.effective(sp[i], run[i]);
        if (p <= 0.0) {
          score = -std::numeric_limits<double>::infinity();
          break;
        }
        score += std::log(p);
      }
      if (score > best_score) {
        best_score = score;
        best = w;
      }
    }
    out.push_back(best);
    run.clear();
  };
  for (std::size_t u : corrupted) {
    if (u == Lexicon::kSeparator)
      flush();
    else
      run.push_back(u);
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct Utterance {
  std::string id;
  std::string domain_tag;
  std::size_t domain_index = 0;
  WordSeq clean_words;
  UnitSeq clean_units;
  UnitSeq corrupted_units;
  WordSeq hyp_words;  // 1-best from noisy lexicon decoding
};

struct CorpusConfig {
  std::size_t num_domains = 5;
  std::size_t vocab_size = 200;
  std::size_t unit_alphabet = 30;
  std::size_t spelling_min = 2, spelling_max = 6;
  std::size_t sentence_min = 3, sentence_max = 8;
  std::size_t train_per_domain = 1200;
  std::size_t dev_per_domain = 300;
  std::size_t test_per_domain = 500;
  double substitution_rate = 0.30;
  double confusion_strength = 0.9;
  std::size_t near_duplicate_transpositions = 3;  // 0 disables the pair
  double unit_skew = 0.7;
  std::uint64_t seed = 1;
};

struct Corpus {
  CorpusConfig config;
  Lexicon lexicon;
  std::vector<DomainChannel> channels;
  std::vector<Utterance> train, dev, test;
  nlohmann::json metadata;

  std::vector<std::string> domain_tags() const {
    std::vector<std::string> tags;
    for (const auto& ch : channels) tags.push_back(ch.domain_tag);
    return tags;
  }

  const std::vector<Utterance>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "dev") return dev;
    if (name == "test") return test;
    throw ConfigError("corpus: unknown split " + name);
  }

  // The deliberately-similar pair is the last two domains.
  std::pair<std::size_t, std::size_t> near_duplicate_pair() const {
    return {config.num_domains - 2, config.num_domains - 1};
  }
};

namespace detail {

// Generation-time separability oracle: nearest-centroid over pooled unigram
// plus bigram frequency features of the corrupted units. Independent of the
// neural models; its dev accuracy is stored with the corpus.
inline double bigram_centroid_accuracy(const Corpus& corpus) {
  const std::size_t u = corpus.lexicon.unit_alphabet;
  const std::size_t n = corpus.channels.size();
  const std::size_t dim = u + u * u;
  std::vector<std::vector<double>> centroids(n, std::vector<double>(dim, 0.0));
  std::vector<double> counts(n, 0.0);
  auto features = [&](const Utterance& utt) {
    std::vector<double> f(dim, 0.0);
    for (std::size_t i = 0; i < utt.corrupted_units.size(); ++i) {
      f[utt.corrupted_units[i]] += 1.0;
      if (i > 0)
        f[u + utt.corrupted_units[i - 1] * u + utt.corrupted_units[i]] += 1.0;
    }
    double norm = 0.0;
    for (double v : f) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : f) v /= norm;
    return f;
  };
  for (const auto& utt : corpus.train) {
    auto f = features(utt);
    for (std::size_t k = 0; k < dim; ++k)
      centroids[utt.domain_index][k] += f[k];
    counts[utt.domain_index] += 1.0;
  }
  for (std::size_t d = 0; d < n; ++d)
    if (counts[d] > 0.0)
      for (double& v : centroids[d]) v /= counts[d];
  // Mean-center against the global centroid: the shared clean-text signature
  // dominates the raw features, the domain signal lives in the residual.
  std::vector<double> global(dim, 0.0);
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t k = 0; k < dim; ++k)
      global[k] += centroids[d][k] / static_cast<double>(n);
  for (std::size_t d = 0; d < n; ++d) {
    double norm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      centroids[d][k] -= global[k];
      norm += centroids[d][k] * centroids[d][k];
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : centroids[d]) v /= norm;
  }
  std::size_t correct = 0;
  for (const auto& utt : corpus.dev) {
    auto f = features(utt);
    std::size_t best = 0;
    double best_dot = -std::numeric_limits<double>::infinity();
    for (std::size_t d = 0; d < n; ++d) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k)
        dot += centroids[d][k] * (f[k] - global[k]);
      if (dot > best_dot) {
        best_dot = dot;
        best = d;
      }
    }
    if (best == utt.domain_index) ++correct;
  }
  return corpus.dev.empty()
             ? 0.0
             : static_cast<double>(correct) /
                   static_cast<double>(corpus.dev.size());
}

}  // namespace detail

inline Corpus sample_corpus(const CorpusConfig& config) {
  if (config.num_domains < 2)
    throw ConfigError("sample_corpus: need at least 2 domains");
  if (config.sentence_min < 1 || config.sentence_min > config.sentence_max)
    throw ConfigError("sample_corpus: bad sentence length range");

  Corpus corpus;
  corpus.config = config;
  corpus.lexicon =
      build_lexicon(config.vocab_size, config.unit_alphabet,
                    config.spelling_min, config.spelling_max, config.seed,
                    config.unit_skew);

  for (std::size_t d = 0; d < config.num_domains; ++d) {
    const std::string tag = "d" + std::to_string(d);
    if (config.near_duplicate_transpositions > 0 &&
        d + 1 == config.num_domains)
      corpus.channels.push_back(make_near_duplicate(
          corpus.channels[d - 1], tag, config.near_duplicate_transpositions,
          config.seed + d));
    else
      corpus.channels.push_back(make_channel(
          tag, config.unit_alphabet, config.confusion_strength,
          config.substitution_rate, config.seed + d));
  }

  auto fill_split = [&](const char* split_name, std::size_t count,
                        std::vector<Utterance>& split) {
    for (std::size_t d = 0; d < config.num_domains; ++d) {
      const DomainChannel& channel = corpus.channels[d];
      for (std::size_t k = 0; k < count; ++k) {
        Utterance utt;
        utt.id = channel.domain_tag + "-" + split_name + "-" +
                 std::to_string(k);
        utt.domain_tag = channel.domain_tag;
        utt.domain_index = d;
        Rng rng(config.seed, "utt:" + utt.id);
        const std::size_t len =
            config.sentence_min +
            rng.uniform_int(config.sentence_max - config.sentence_min + 1);
        utt.clean_words.resize(len);
        for (auto& w : utt.clean_words)
          w = rng.uniform_int(config.vocab_size);
        utt.clean_units = words_to_units(utt.clean_words, corpus.lexicon);
        utt.corrupted_units = channel.corrupt(utt.clean_units, rng);
        utt.hyp_words = decode_ml(utt.corrupted_units, corpus.lexicon, channel);
        split.push_back(std::move(utt));
      }
    }
  };
  fill_split("train", config.train_per_domain, corpus.train);
  fill_split("dev", config.dev_per_domain, corpus.dev);
  fill_split("test", config.test_per_domain, corpus.test);

  // Generation-time oracle measurements, stored with the corpus.
  nlohmann::json meta;
  meta["seed"] = config.seed;
  meta["num_domains"] = config.num_domains;
  meta["vocab_size"] = config.vocab_size;
  meta["unit_alphabet"] = config.unit_alphabet;
  meta["substitution_rate"] = config.substitution_rate;
  meta["confusion_strength"] = config.confusion_strength;
  nlohmann::json wer_by_domain;
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    std::vector<std::pair<WordSeq, WordSeq>> pairs;
    for (const auto& utt : corpus.dev)
      if (utt.domain_index == d)
        pairs.emplace_back(utt.clean_words, utt.hyp_words);
    wer_by_domain[corpus.channels[d].domain_tag] = wer_corpus(pairs).wer;
  }
  meta["dev_hypothesis_wer"] = wer_by_domain;
  meta["dev_separability"] = detail::bigram_centroid_accuracy(corpus);
  nlohmann::json dists;
  for (std::size_t a = 0; a < config.num_domains; ++a)
    for (std::size_t b = a + 1; b < config.num_domains; ++b)
      dists[corpus.channels[a].domain_tag + ":" +
            corpus.channels[b].domain_tag] =
          corpus.channels[a].distance(corpus.channels[b]);
  meta["channel_distances"] = dists;
  corpus.metadata = std::move(meta);
  return corpus;
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

namespace detail {

inline std::string seq_str(const std::vector<std::size_t>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ' ';
    os << xs[i];
  }
  return os.str();
}

inline std::vector<std::size_t> parse_seq(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream is(s);
  std::size_t v;
  while (is >> v) out.push_back(v);
  return out;
}

}  // namespace detail

inline void save_split(const std::vector<Utterance>& split,
                       const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  for (const auto& u : split) {
    os << u.id << '\t' << u.domain_tag << '\t'
       << detail::seq_str(u.clean_words) << '\t'
       << detail::seq_str(u.clean_units) << '\t'
       << detail::seq_str(u.corrupted_units) << '\t'
       << detail::seq_str(u.hyp_words) << '\n';
  }
}

inline std::vector<Utterance> load_split(
    const std::filesystem::path& path,
    const std::vector<std::string>& domain_tags) {
  std::ifstream is = open_in(path);
  std::vector<Utterance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() != 6)
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected 6 fields, got " +
                      std::to_string(fields.size()));
    Utterance u;
    u.id = fields[0];
    u.domain_tag = fields[1];
    auto it = std::find(domain_tags.begin(), domain_tags.end(), u.domain_tag);
    if (it == domain_tags.end())
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": unknown domain " + u.domain_tag);
    u.domain_index = static_cast<std::size_t>(it - domain_tags.begin());
    u.clean_words = detail::parse_seq(fields[2]);
    u.clean_units = detail::parse_seq(fields[3]);
    u.corrupted_units = detail::parse_seq(fields[4]);
    u.hyp_words = detail::parse_seq(fields[5]);
    if (u.corrupted_units.size() != u.clean_units.size())
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": corrupted/clean unit length mismatch");
    out.push_back(std::move(u));
  }
  return out;
}

inline void save_corpus(const Corpus& corpus,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_split(corpus.train, dir / "train.tsv");
  save_split(corpus.dev, dir / "dev.tsv");
  save_split(corpus.test, dir / "test.tsv");

  nlohmann::json j;
  j["config"] = {{"num_domains", corpus.config.num_domains},
                 {"vocab_size", corpus.config.vocab_size},
                 {"unit_alphabet", corpus.config.unit_alphabet},
                 {"spelling_min", corpus.config.spelling_min},
                 {"spelling_max", corpus.config.spelling_max},
                 {"sentence_min", corpus.config.sentence_min},
                 {"sentence_max", corpus.config.sentence_max},
                 {"train_per_domain", corpus.config.train_per_domain},
                 {"dev_per_domain", corpus.config.dev_per_domain},
                 {"test_per_domain", corpus.config.test_per_domain},
                 {"substitution_rate", corpus.config.substitution_rate},
                 {"confusion_strength", corpus.config.confusion_strength},
                 {"near_duplicate_transpositions",
                  corpus.config.near_duplicate_transpositions},
                 {"unit_skew", corpus.config.unit_skew},
                 {"seed", corpus.config.seed}};
  j["lexicon"] = {{"unit_alphabet", corpus.lexicon.unit_alphabet},
                  {"spellings", corpus.lexicon.spellings}};
  nlohmann::json channels = nlohmann::json::array();
  for (const auto& ch : corpus.channels)
    channels.push_back({{"domain_tag", ch.domain_tag},
                        {"unit_alphabet", ch.unit_alphabet},
                        {"permutation", ch.permutation},
                        {"confusion_strength", ch.confusion_strength},
                        {"substitution_rate", ch.substitution_rate},
                        {"seed", ch.seed}});
  j["channels"] = channels;
  j["measurements"] = corpus.metadata;
  write_file(dir / "meta.json", j.dump(2) + "\n");
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  nlohmann::json j = nlohmann::json::parse(read_file(dir / "meta.json"));
  Corpus corpus;
  const auto& c = j.at("config");
  corpus.config.num_domains = c.at("num_domains").get<std::size_t>();
  corpus.config.vocab_size = c.at("vocab_size").get<std::size_t>();
  corpus.config.unit_alphabet = c.at("unit_alphabet").get<std::size_t>();
  corpus.config.spelling_min = c.at("spelling_min").get<std::size_t>();
  corpus.config.spelling_max = c.at("spelling_max").get<std::size_t>();
  corpus.config.sentence_min = c.at("sentence_min").get<std::size_t>();
  corpus.config.sentence_max = c.at("sentence_max").get<std::size_t>();
  corpus.config.train_per_domain = c.at("train_per_domain").get<std::size_t>();
  corpus.config.dev_per_domain = c.at("dev_per_domain").get<std::size_t>();
  corpus.config.test_per_domain = c.at("test_per_domain").get<std::size_t>();
  corpus.config.substitution_rate = c.at("substitution_rate").get<double>();
  corpus.config.confusion_strength = c.at("confusion_strength").get<double>();
  corpus.config.near_duplicate_transpositions =
      c.at("near_duplicate_transpositions").get<std::size_t>();
  corpus.config.unit_skew = c.at("unit_skew").get<double>();
  corpus.config.seed = c.at("seed").get<std::uint64_t>();

  corpus.lexicon.unit_alphabet =
      j.at("lexicon").at("unit_alphabet").get<std::size_t>();
  corpus.lexicon.spellings =
      j.at("lexicon").at("spellings").get<std::vector<UnitSeq>>();
  corpus.lexicon.rebuild_index();

  for (const auto& cj : j.at("channels")) {
    DomainChannel ch;
    ch.domain_tag = cj.at("domain_tag").get<std::string>();
    ch.unit_alphabet = cj.at("unit_alphabet").get<std::size_t>();
    ch.permutation = cj.at("permutation").get<std::vector<std::size_t>>();
    ch.confusion_strength = cj.at("confusion_strength").get<double>();
    ch.substitution_rate = cj.at("substitution_rate").get<double>();
    ch.seed = cj.at("seed").get<std::uint64_t>();
    corpus.channels.push_back(std::move(ch));
  }
  corpus.metadata = j.at("measurements");

  const auto tags = corpus.domain_tags();
  corpus.train = load_split(dir / "train.tsv", tags);
  corpus.dev = load_split(dir / "dev.tsv", tags);
  corpus.test = load_split(dir / "test.tsv", tags);
  return corpus;
}

inline std::uint64_t corpus_content_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char* name : {"train.tsv", "dev.tsv", "test.tsv", "meta.json"})
    h = fnv1a64(read_file(dir / name), h);
  return h;
}

}  // namespace gerlab
