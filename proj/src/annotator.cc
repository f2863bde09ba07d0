#include "itupred/annotator.h"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "itupred/error.h"

namespace itupred {

namespace {

// ---------------------------------------------------------------------------
// UTF-8 helpers. Classification covers ASCII exactly; above ASCII, known
// punctuation/symbol blocks are separators and everything else is a letter.

struct Decoded {
  char32_t cp;
  std::size_t len;
};

Decoded decode_utf8(std::string_view s, std::size_t i) {
  auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) return {b0, 1};
  std::size_t len = b0 >= 0xF0 ? 4 : b0 >= 0xE0 ? 3 : b0 >= 0xC0 ? 2 : 0;
  if (len == 0 || i + len > s.size()) return {0xFFFD, 1};
  char32_t cp = b0 & (0x7F >> len);
  for (std::size_t k = 1; k < len; ++k) {
    auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return {0xFFFD, 1};
    cp = (cp << 6) | (b & 0x3F);
  }
  return {cp, len};
}

void encode_utf8(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool in(char32_t cp, char32_t lo, char32_t hi) { return cp >= lo && cp <= hi; }

bool is_word_cp(char32_t cp) {
  if (cp < 0x80) {
    return in(cp, '0', '9') || in(cp, 'a', 'z') || in(cp, 'A', 'Z');
  }
  if (in(cp, 0x80, 0xBF)) return cp == 0xAA || cp == 0xB5 || cp == 0xBA;
  if (cp == 0xD7 || cp == 0xF7 || cp == 0xFFFD || cp == 0xFEFF) return false;
  if (in(cp, 0x2000, 0x2BFF) || in(cp, 0x2E00, 0x2E7F) ||
      in(cp, 0x3000, 0x303F) || in(cp, 0xFE30, 0xFE4F) ||
      in(cp, 0xFF00, 0xFF0F) || in(cp, 0xFF1A, 0xFF20) ||
      in(cp, 0xFF3B, 0xFF40) || in(cp, 0xFF5B, 0xFF65) ||
      in(cp, 0x1F000, 0x1FAFF))
    return false;
  return true;
}

char32_t to_lower_cp(char32_t cp) {
  if (in(cp, 'A', 'Z')) return cp + 32;
  if (in(cp, 0xC0, 0xDE) && cp != 0xD7) return cp + 32;
  if (in(cp, 0x391, 0x3A9) && cp != 0x3A2) return cp + 32;
  if (in(cp, 0x410, 0x42F)) return cp + 32;
  if (in(cp, 0x400, 0x40F)) return cp + 80;
  return cp;
}

std::vector<std::string> tokenize_phrase(std::string_view phrase) {
  TokenizedText t(phrase);
  std::vector<std::string> out;
  for (const auto& tok : t.tokens()) out.push_back(tok.norm);
  return out;
}

std::string_view trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

bool is_sentence_terminator(char c) {
  return c == '.' || c == ',' || c == ';' || c == ':' || c == '?';
}

// ---------------------------------------------------------------------------
// TokenizedText

TokenizedText::TokenizedText(std::string_view text) : text_(text) {
  std::size_t i = 0;
  while (i < text.size()) {
    auto d = decode_utf8(text, i);
    if (!is_word_cp(d.cp)) {
      i += d.len;
      continue;
    }
    Token tok;
    tok.start = i;
    while (i < text.size()) {
      d = decode_utf8(text, i);
      if (!is_word_cp(d.cp)) break;
      encode_utf8(to_lower_cp(d.cp), tok.norm);
      i += d.len;
    }
    tok.end = i;
    tokens_.push_back(std::move(tok));
  }
}

std::string_view TokenizedText::gap_before(std::size_t i) const {
  std::size_t from = i == 0 ? 0 : tokens_[i - 1].end;
  std::size_t to = i < tokens_.size() ? tokens_[i].start : text_.size();
  return text_.substr(from, to - from);
}

bool TokenizedText::boundary_before(std::size_t i) const {
  auto gap = gap_before(i);
  return std::any_of(gap.begin(), gap.end(), is_sentence_terminator);
}

// ---------------------------------------------------------------------------
// ConceptLexicon

ConceptLexicon ConceptLexicon::compile(std::vector<LexiconEntry> entries) {
  if (entries.empty()) throw LexiconError("lexicon has no entries");
  ConceptLexicon lex;
  lex.nodes_.emplace_back();
  // Build with ordered maps, then flatten into sorted child vectors.
  std::vector<std::map<std::uint32_t, std::uint32_t>> building(1);
  std::vector<std::int32_t> terminal(1, -1);

  for (std::uint32_t e = 0; e < entries.size(); ++e) {
    const auto& entry = entries[e];
    if (entry.concept_id.empty())
      throw LexiconError(fmt::format("entry {} has an empty concept_id", e));
    if (!lex.by_id_.emplace(entry.concept_id, e).second)
      throw LexiconError("duplicate concept_id " + entry.concept_id);
    std::vector<std::string> surfaces;
    surfaces.push_back(entry.canonical_name);
    surfaces.insert(surfaces.end(), entry.synonyms.begin(), entry.synonyms.end());
    for (const auto& surface : surfaces) {
      auto toks = tokenize_phrase(surface);
      if (trim(surface).empty() || toks.empty())
        throw LexiconError("empty surface form for concept " + entry.concept_id);
      std::uint32_t node = 0;
      for (const auto& t : toks) {
        auto [it, fresh] = lex.token_ids_.emplace(
            t, static_cast<std::uint32_t>(lex.token_ids_.size()));
        auto& kids = building[node];
        auto found = kids.find(it->second);
        if (found == kids.end()) {
          auto next = static_cast<std::uint32_t>(building.size());
          kids.emplace(it->second, next);
          building.emplace_back();
          terminal.push_back(-1);
          node = next;
        } else {
          node = found->second;
        }
      }
      if (terminal[node] >= 0 && terminal[node] != static_cast<std::int32_t>(e))
        throw LexiconError(fmt::format(
            "surface '{}' is shared by concepts {} and {}", surface,
            entries[terminal[node]].concept_id, entry.concept_id));
      if (terminal[node] < 0) ++lex.surface_count_;
      terminal[node] = static_cast<std::int32_t>(e);
    }
  }
  lex.nodes_.resize(building.size());
  for (std::size_t n = 0; n < building.size(); ++n) {
    lex.nodes_[n].children.assign(building[n].begin(), building[n].end());
    lex.nodes_[n].entry = terminal[n];
  }
  lex.entries_ = std::move(entries);
  return lex;
}

std::uint32_t ConceptLexicon::child(std::uint32_t node,
                                    std::uint32_t token_id) const {
  const auto& kids = nodes_[node].children;
  auto it = std::lower_bound(
      kids.begin(), kids.end(), token_id,
      [](const auto& kv, std::uint32_t key) { return kv.first < key; });
  if (it == kids.end() || it->first != token_id) return 0;
  return it->second;
}

std::vector<ConceptLexicon::Match> ConceptLexicon::find_all(
    const TokenizedText& text) const {
  std::vector<Match> out;
  const auto& toks = text.tokens();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    std::uint32_t node = 0;
    for (std::size_t j = i; j < toks.size(); ++j) {
      if (j > i && text.boundary_before(j)) break;
      auto id = token_ids_.find(toks[j].norm);
      if (id == token_ids_.end()) break;
      node = child(node, id->second);
      if (node == 0) break;
      if (nodes_[node].entry >= 0)
        out.push_back({i, j + 1, static_cast<std::uint32_t>(nodes_[node].entry)});
    }
  }
  return out;
}

const LexiconEntry* ConceptLexicon::find(std::string_view concept_id) const {
  auto it = by_id_.find(concept_id);
  return it == by_id_.end() ? nullptr : &entries_[it->second];
}

std::vector<LexiconEntry> load_lexicon_entries(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open lexicon " + path.string());
  std::vector<LexiconEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, '\t');) cols.push_back(col);
    if (lineno == 1 && !cols.empty() && cols[0] == "concept_id") continue;
    if (cols.size() < 2)
      throw ParseError(path.string(), lineno, "canonical_name", "missing column");
    LexiconEntry e;
    e.concept_id = std::string(trim(cols[0]));
    e.canonical_name = std::string(trim(cols[1]));
    if (cols.size() > 2 && !trim(cols[2]).empty()) {
      std::stringstream syn(cols[2]);
      for (std::string s; std::getline(syn, s, '|');)
        e.synonyms.emplace_back(trim(s));
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Context rules

ContextRuleSet load_context_rules(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open trigger file " + path.string());
  ContextRuleSet set;
  std::vector<std::string>* section = nullptr;
  bool settings = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      auto name = t.substr(1, t.size() - 2);
      settings = false;
      section = nullptr;
      if (name == "negation") section = &set.negation_triggers;
      else if (name == "experiencer") section = &set.experiencer_triggers;
      else if (name == "certainty") section = &set.certainty_triggers;
      else if (name == "settings") settings = true;
      else
        throw ParseError(path.string(), lineno, "section",
                         "unknown section " + std::string(name));
      continue;
    }
    if (settings) {
      auto eq = t.find('=');
      if (eq == std::string_view::npos || trim(t.substr(0, eq)) != "scope_window")
        throw ParseError(path.string(), lineno, "settings",
                         "expected scope_window = <int>");
      try {
        set.scope_window = std::stoi(std::string(trim(t.substr(eq + 1))));
      } catch (const std::exception&) {
        throw ParseError(path.string(), lineno, "scope_window", "not an integer");
      }
      continue;
    }
    if (!section)
      throw ParseError(path.string(), lineno, "section",
                       "trigger outside a section");
    section->emplace_back(t);
  }
  return set;
}

namespace {

ContextRules::Category compile_category(const std::vector<std::string>& phrases) {
  ContextRules::Category cat;
  for (const auto& raw : phrases) {
    auto phrase = trim(raw);
    if (phrase.empty()) continue;
    auto words = tokenize_phrase(phrase);
    std::size_t lead = 0;
    while (lead < phrase.size() && !is_word_cp(decode_utf8(phrase, lead).cp))
      lead += decode_utf8(phrase, lead).len;
    std::string punct(trim(phrase.substr(0, lead)));
    if (words.empty()) {
      cat.punct.push_back(std::string(phrase));
    } else if (!punct.empty()) {
      cat.post.push_back({punct, std::move(words)});
    } else {
      cat.pre.push_back({{}, std::move(words)});
    }
  }
  return cat;
}

bool words_at(const TokenizedText& t, std::size_t pos,
              const std::vector<std::string>& words) {
  if (pos + words.size() > t.size()) return false;
  for (std::size_t k = 0; k < words.size(); ++k) {
    if (t.tokens()[pos + k].norm != words[k]) return false;
    if (k > 0 && t.boundary_before(pos + k)) return false;
  }
  return true;
}

bool category_fires(const TokenizedText& t, TokenSpan match,
                    const ContextRules::Category& cat, int window) {
  // Pre-mention phrases inside the sentence whose last token lies within
  // `window` tokens of the mention.
  std::size_t sent_start = match.first;
  while (sent_start > 0 && !t.boundary_before(sent_start)) --sent_start;
  std::size_t w = static_cast<std::size_t>(window);
  std::size_t low = match.first > w ? match.first - w : 0;
  low = std::max(low, sent_start);
  for (const auto& p : cat.pre) {
    for (std::size_t end = low + 1; end <= match.first; ++end) {
      if (end < p.words.size()) continue;
      std::size_t begin = end - p.words.size();
      if (begin < sent_start) continue;
      if (words_at(t, begin, p.words)) return true;
    }
  }
  // Punctuation directly before the mention.
  auto before = trim(t.gap_before(match.first));
  for (const auto& p : cat.punct)
    if (before.size() >= p.size() && before.substr(before.size() - p.size()) == p)
      return true;
  // Enclitics directly after the mention.
  auto after = trim(t.gap_before(match.last));
  for (const auto& p : cat.post)
    if (match.last < t.size() && after == p.punct &&
        words_at(t, match.last, p.words))
      return true;
  return false;
}

}  // namespace

ContextRules::ContextRules(const ContextRuleSet& set)
    : negation_(compile_category(set.negation_triggers)),
      experiencer_(compile_category(set.experiencer_triggers)),
      certainty_(compile_category(set.certainty_triggers)),
      scope_window_(set.scope_window) {
  if (scope_window_ < 1)
    throw ConfigError(fmt::format("scope_window must be >= 1 (got {})",
                                  scope_window_));
}

MetaFlags classify_context(const TokenizedText& tokens, TokenSpan match,
                           const ContextRules& rules) {
  MetaFlags flags;
  int w = rules.scope_window();
  if (category_fires(tokens, match, rules.negation(), w))
    flags.negation = Negation::Yes;
  if (category_fires(tokens, match, rules.experiencer(), w))
    flags.experiencer = Experiencer::Other;
  if (category_fires(tokens, match, rules.certainty(), w))
    flags.certainty = Certainty::Suspected;
  return flags;
}

// ---------------------------------------------------------------------------
// Annotation

std::vector<Annotation> annotate(const Note& note, const ConceptLexicon& lexicon,
                                 const ContextRules& rules) {
  TokenizedText text(note.text);
  auto matches = lexicon.find_all(text);
  std::sort(matches.begin(), matches.end(), [](const auto& a, const auto& b) {
    auto la = a.last_token - a.first_token, lb = b.last_token - b.first_token;
    if (la != lb) return la > lb;
    return a.first_token < b.first_token;
  });
  std::vector<bool> taken(text.size(), false);
  std::vector<ConceptLexicon::Match> chosen;
  for (const auto& m : matches) {
    bool free = true;
    for (auto k = m.first_token; k < m.last_token && free; ++k) free = !taken[k];
    if (!free) continue;
    for (auto k = m.first_token; k < m.last_token; ++k) taken[k] = true;
    chosen.push_back(m);
  }
  std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) {
    return a.first_token < b.first_token;
  });

  std::vector<Annotation> out;
  out.reserve(chosen.size());
  for (const auto& m : chosen) {
    Annotation a;
    a.note_id = note.note_id;
    a.concept_id = lexicon.entries()[m.entry].concept_id;
    a.start = text.tokens()[m.first_token].start;
    a.end = text.tokens()[m.last_token - 1].end;
    a.surface = note.text.substr(a.start, a.end - a.start);
    a.meta = classify_context(text, {m.first_token, m.last_token}, rules);
    out.push_back(std::move(a));
  }
  return out;
}

AnnotationIndex annotate_corpus(const Corpus& corpus,
                                const ConceptLexicon& lexicon,
                                const ContextRules& rules) {
  AnnotationIndex index;
  for (const auto& p : corpus.patients)
    for (const auto& n : p.notes) index[n.note_id] = annotate(n, lexicon, rules);
  return index;
}

std::vector<Annotation> filter_annotations(const std::vector<Annotation>& in) {
  std::vector<Annotation> out;
  std::copy_if(in.begin(), in.end(), std::back_inserter(out),
               [](const Annotation& a) { return a.meta.relevant(); });
  return out;
}

AnnotationIndex filter_annotations(const AnnotationIndex& in) {
  AnnotationIndex out;
  for (const auto& [id, anns] : in) out[id] = filter_annotations(anns);
  return out;
}

GoldEvaluation evaluate_against_gold(const AnnotationIndex& predicted,
                                     const AnnotationIndex& gold) {
  using Key = std::tuple<std::string, std::size_t, std::size_t, std::string>;
  std::set<Key> gold_keys, pred_keys;
  for (const auto& [id, anns] : gold)
    for (const auto& a : anns) gold_keys.emplace(id, a.start, a.end, a.concept_id);
  for (const auto& [id, anns] : predicted)
    for (const auto& a : anns) pred_keys.emplace(id, a.start, a.end, a.concept_id);

  GoldEvaluation ev;
  std::size_t tp = 0;
  for (const auto& k : pred_keys) {
    auto& s = ev.per_concept[std::get<3>(k)];
    if (gold_keys.count(k)) {
      ++tp;
      ++s.true_positive;
    } else {
      ++s.false_positive;
    }
  }
  for (const auto& k : gold_keys)
    if (!pred_keys.count(k)) ++ev.per_concept[std::get<3>(k)].false_negative;

  auto prf = [](std::size_t tp, std::size_t fp, std::size_t fn, double& p,
                double& r, double& f) {
    p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  };
  std::size_t fp = pred_keys.size() - tp;
  std::size_t fn = gold_keys.size() - tp;
  ev.precision_undefined = pred_keys.empty();
  prf(tp, fp, fn, ev.precision, ev.recall, ev.f1);
  if (pred_keys.empty() && gold_keys.empty()) {
    ev.precision = ev.recall = ev.f1 = ev.macro_f1 = 1.0;
    return ev;
  }
  double sum = 0.0;
  for (auto& [cid, s] : ev.per_concept) {
    prf(s.true_positive, s.false_positive, s.false_negative, s.precision,
        s.recall, s.f1);
    sum += s.f1;
  }
  ev.macro_f1 = ev.per_concept.empty() ? 0.0 : sum / ev.per_concept.size();
  return ev;
}

}  // namespace itupred
