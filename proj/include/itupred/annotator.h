#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "itupred/annotation.h"
#include "itupred/corpus.h"

namespace itupred {

// ---------------------------------------------------------------------------
// Tokenization

/// A maximal run of letters/digits. Offsets are bytes into the source text;
/// `norm` is the lowercased token.
struct Token {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string norm;
};

/// Tokens plus access to the separator runs between them.
class TokenizedText {
 public:
  explicit TokenizedText(std::string_view text);

  std::string_view text() const { return text_; }
  const std::vector<Token>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

  /// Separator characters before token i (i == size() gives the tail).
  std::string_view gap_before(std::size_t i) const;
  /// True when the gap before token i contains a sentence terminator.
  bool boundary_before(std::size_t i) const;

 private:
  std::string_view text_;
  std::vector<Token> tokens_;
};

/// Characters that end a sentence for context scoping and matching.
bool is_sentence_terminator(char c);

// ---------------------------------------------------------------------------
// Lexicon

struct LexiconEntry {
  std::string concept_id;
  std::string canonical_name;
  std::vector<std::string> synonyms;
};

/// Token-level trie over every surface form (canonical name + synonyms),
/// matched case-insensitively at token boundaries.
class ConceptLexicon {
 public:
  /// Throws LexiconError on an empty entry list, duplicate concept ids, empty
  /// or token-less surface forms, and surfaces shared by two concepts.
  static ConceptLexicon compile(std::vector<LexiconEntry> entries);

  struct Match {
    std::size_t first_token = 0;
    std::size_t last_token = 0;  // exclusive
    std::uint32_t entry = 0;
  };

  /// Every (start, length) pair whose token sequence is a surface form.
  /// Matches never span a sentence terminator.
  std::vector<Match> find_all(const TokenizedText& tokens) const;

  const std::vector<LexiconEntry>& entries() const { return entries_; }
  const LexiconEntry* find(std::string_view concept_id) const;
  std::size_t surface_count() const { return surface_count_; }

 private:
  struct Node {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> children;  // sorted
    std::int32_t entry = -1;
  };
  std::uint32_t child(std::uint32_t node, std::uint32_t token_id) const;

  std::vector<LexiconEntry> entries_;
  std::unordered_map<std::string, std::uint32_t> token_ids_;
  std::map<std::string, std::uint32_t, std::less<>> by_id_;
  std::vector<Node> nodes_;
  std::size_t surface_count_ = 0;
};

/// Reads `concept_id<TAB>canonical_name<TAB>syn1|syn2|...`. Blank lines,
/// `#` comments and a leading `concept_id` header row are skipped.
std::vector<LexiconEntry> load_lexicon_entries(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Context rules

struct ContextRuleSet {
  std::vector<std::string> negation_triggers;
  std::vector<std::string> experiencer_triggers;
  std::vector<std::string> certainty_triggers;
  int scope_window = 5;
};

/// Reads a sectioned trigger file:
///
///     [settings]
///     scope_window = 5
///     [negation]
///     no evidence of
///     -negative
///     [experiencer]
///     ...
ContextRuleSet load_context_rules(const std::filesystem::path& path);

/// Compiled triggers. A trigger is one of
///   - a word phrase ("no evidence of"): fires when it ends within the
///     scope window before the mention, inside the same sentence;
///   - pure punctuation ("?"): fires when the separator directly before the
///     mention ends with it;
///   - punctuation followed by words ("-negative"): an enclitic that fires
///     when it directly follows the mention.
class ContextRules {
 public:
  explicit ContextRules(const ContextRuleSet& set);

  int scope_window() const { return scope_window_; }

  struct Pattern {
    std::string punct;
    std::vector<std::string> words;
  };
  struct Category {
    std::vector<Pattern> pre;
    std::vector<std::string> punct;
    std::vector<Pattern> post;
  };
  const Category& negation() const { return negation_; }
  const Category& experiencer() const { return experiencer_; }
  const Category& certainty() const { return certainty_; }

 private:
  Category negation_;
  Category experiencer_;
  Category certainty_;
  int scope_window_;
};

struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;  // exclusive
};

MetaFlags classify_context(const TokenizedText& tokens, TokenSpan match,
                           const ContextRules& rules);

// ---------------------------------------------------------------------------
// Annotation

/// All concept mentions in the note. Overlaps resolve longest-first, then
/// leftmost; output is sorted by start offset.
std::vector<Annotation> annotate(const Note& note, const ConceptLexicon& lexicon,
                                 const ContextRules& rules);

/// Annotates every note of the corpus.
AnnotationIndex annotate_corpus(const Corpus& corpus,
                                const ConceptLexicon& lexicon,
                                const ContextRules& rules);

/// Keeps mentions with Negation=No, Experiencer=Patient, Certainty=Confirmed.
std::vector<Annotation> filter_annotations(const std::vector<Annotation>& in);
AnnotationIndex filter_annotations(const AnnotationIndex& in);

struct ConceptScore {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct GoldEvaluation {
  /// Micro-averaged over all mentions.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// Unweighted mean of per-concept F1 over concepts in gold or prediction.
  double macro_f1 = 0.0;
  /// Set when no mention was predicted; precision is then reported as 0.
  bool precision_undefined = false;
  std::map<std::string, ConceptScore> per_concept;
};

/// Exact span + exact concept matching, keyed by note id.
GoldEvaluation evaluate_against_gold(const AnnotationIndex& predicted,
                                     const AnnotationIndex& gold);

}  // namespace itupred
