#include "fedspike/sequences.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fedspike/common.hpp"

namespace fedspike {

const std::array<int, 256>& Alphabet::table() {
  static const std::array<int, 256> t = [] {
    std::array<int, 256> out{};
    out.fill(-1);
    for (std::size_t i = 0; i < kSymbols.size(); ++i) {
      out[static_cast<unsigned char>(kSymbols[i])] = static_cast<int>(i);
    }
    return out;
  }();
  return t;
}

Corpus::Corpus(std::vector<ProteinSequence> sequences, std::size_t pad_len)
    : sequences_(std::move(sequences)), pad_len_(pad_len) {
  std::set<std::string> seen;
  for (const auto& s : sequences_) {
    if (s.residues.empty()) fail(ErrorKind::kData, "sequence '" + s.id + "' is empty");
    max_len_ = std::max(max_len_, s.residues.size());
    if (s.label && seen.insert(*s.label).second) label_vocab_.push_back(*s.label);
  }
  // Vocabulary is ordered by first appearance.
  if (pad_len_ != 0 && pad_len_ < max_len_) {
    fail(ErrorKind::kData, "pad length " + std::to_string(pad_len_) + " below max length " +
                               std::to_string(max_len_));
  }
}

char Corpus::residue_at(std::size_t s, std::size_t i) const {
  const auto& r = sequences_[s].residues;
  return i < r.size() ? r[i] : Alphabet::kPad;
}

int Corpus::label_index(std::size_t s) const {
  const auto& label = sequences_[s].label;
  if (!label) return -1;
  auto it = std::find(label_vocab_.begin(), label_vocab_.end(), *label);
  return static_cast<int>(it - label_vocab_.begin());
}

Mutation parse_mutation(std::string_view text) {
  if (text.size() < 3) fail(ErrorKind::kConfig, "bad mutation '" + std::string(text) + "'");
  Mutation m;
  m.from = text.front();
  m.to = text.back();
  auto digits = text.substr(1, text.size() - 2);
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit) ||
      !Alphabet::contains(m.from) || !Alphabet::contains(m.to)) {
    fail(ErrorKind::kConfig, "bad mutation '" + std::string(text) + "'");
  }
  m.position = std::stoul(std::string(digits));
  if (m.position == 0) fail(ErrorKind::kConfig, "mutation positions are 1-based: " + std::string(text));
  return m;
}

std::string to_string(const Mutation& m) {
  return std::string(1, m.from) + std::to_string(m.position) + std::string(1, m.to);
}

void MutationSignature::validate() const {
  std::set<std::size_t> positions;
  for (const auto& e : edits) {
    if (e.from == e.to) fail(ErrorKind::kConfig, lineage + ": identity edit " + to_string(e));
    if (!positions.insert(e.position).second) {
      fail(ErrorKind::kConfig, lineage + ": repeated position " + std::to_string(e.position));
    }
  }
}

namespace {

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

void finish_record(std::vector<ProteinSequence>& out, ProteinSequence& rec) {
  if (rec.residues.empty()) fail(ErrorKind::kData, "record '" + rec.id + "' has an empty sequence");
  for (std::size_t i = 0; i < rec.residues.size(); ++i) {
    if (!Alphabet::contains(rec.residues[i])) {
      fail(ErrorKind::kData, "record '" + rec.id + "' offset " + std::to_string(i) +
                                 ": residue '" + std::string(1, rec.residues[i]) +
                                 "' not in alphabet");
    }
  }
  out.push_back(std::move(rec));
}

}  // namespace

Corpus parse_fasta(std::istream& in) {
  std::vector<ProteinSequence> records;
  std::optional<ProteinSequence> current;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    if (line.front() == '>') {
      if (current) finish_record(records, *current);
      current.emplace();
      std::string header = line.substr(1);
      auto first_ws = header.find_first_of(" \t");
      if (first_ws != std::string::npos) header.resize(first_ws);
      auto bar = header.find('|');
      if (bar == std::string::npos) {
        current->id = header;
      } else {
        current->id = header.substr(0, bar);
        auto label = header.substr(bar + 1);
        if (!label.empty()) current->label = label;
      }
      if (current->id.empty()) {
        fail(ErrorKind::kData, "line " + std::to_string(line_no) + ": header without an id");
      }
      continue;
    }
    if (!current) {
      fail(ErrorKind::kData,
           "line " + std::to_string(line_no) + ": sequence data before the first '>' header");
    }
    for (char c : line) {
      if (c != ' ' && c != '\t') current->residues.push_back(c);
    }
  }
  if (current) finish_record(records, *current);
  return Corpus(std::move(records));
}

Corpus parse_fasta_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_fasta(in);
}

Corpus read_fasta_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot open FASTA file " + path);
  return parse_fasta(in);
}

void write_fasta(std::ostream& out, const Corpus& corpus, std::size_t line_width) {
  for (const auto& s : corpus.sequences()) {
    out << '>' << s.id;
    if (s.label) out << '|' << *s.label;
    out << '\n';
    for (std::size_t i = 0; i < s.residues.size(); i += line_width) {
      out << s.residues.substr(i, line_width) << '\n';
    }
  }
}

void write_fasta_file(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "cannot write " + path);
  write_fasta(out, corpus);
}

Corpus apply_label_csv(const Corpus& corpus, std::istream& csv) {
  std::map<std::string, std::string> labels;
  std::string line;
  bool header = true;
  while (std::getline(csv, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line != "id,label") fail(ErrorKind::kData, "label CSV must start with 'id,label'");
      continue;
    }
    auto comma = line.find(',');
    if (comma == std::string::npos) fail(ErrorKind::kData, "label CSV row without comma: " + line);
    labels[line.substr(0, comma)] = line.substr(comma + 1);
  }
  std::vector<ProteinSequence> out = corpus.sequences();
  for (auto& s : out) {
    if (auto it = labels.find(s.id); it != labels.end()) s.label = it->second;
  }
  return Corpus(std::move(out), corpus.pad_len());
}

Corpus pad_corpus(const Corpus& corpus, std::size_t target_len) {
  if (target_len < corpus.max_len()) {
    fail(ErrorKind::kData, "pad target " + std::to_string(target_len) +
                               " shorter than longest sequence (" +
                               std::to_string(corpus.max_len()) + ")");
  }
  return Corpus(corpus.sequences(), target_len);
}

namespace {

struct LengthAccumulator {
  LengthStats stats;
  double sum = 0.0;

  void add(std::size_t n) {
    if (stats.count == 0) {
      stats.min_len = stats.max_len = n;
    } else {
      stats.min_len = std::min(stats.min_len, n);
      stats.max_len = std::max(stats.max_len, n);
    }
    ++stats.count;
    sum += static_cast<double>(n);
  }

  LengthStats result() const {
    LengthStats out = stats;
    out.mean_len = sum / static_cast<double>(stats.count);
    return out;
  }
};

}  // namespace

CorpusStats corpus_stats(const Corpus& corpus) {
  if (corpus.empty()) fail(ErrorKind::kData, "corpus_stats on an empty corpus");
  LengthAccumulator all;
  std::vector<LengthAccumulator> per(corpus.label_vocab().size());
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto n = corpus[s].length();
    all.add(n);
    if (int li = corpus.label_index(s); li >= 0) per[static_cast<std::size_t>(li)].add(n);
  }
  CorpusStats out;
  out.overall = all.result();
  for (std::size_t i = 0; i < per.size(); ++i) {
    out.per_label.emplace_back(corpus.label_vocab()[i], per[i].result());
  }
  return out;
}

Corpus synth_lineages(const ProteinSequence& reference,
                      const std::vector<MutationSignature>& signatures, int per_class,
                      double noise_rate, std::uint64_t seed) {
  if (per_class < 0) fail(ErrorKind::kConfig, "per_class must be non-negative");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) {
    fail(ErrorKind::kConfig, "noise_rate must lie in [0, 1)");
  }
  for (const auto& sig : signatures) {
    sig.validate();
    for (const auto& e : sig.edits) {
      if (e.position > reference.length()) {
        fail(ErrorKind::kConfig, sig.lineage + ": position " + std::to_string(e.position) +
                                     " beyond reference length " +
                                     std::to_string(reference.length()));
      }
      const char actual = reference.residues[e.position - 1];
      if (actual != e.from) {
        fail(ErrorKind::kConfig, sig.lineage + ": position " + std::to_string(e.position) +
                                     " is '" + std::string(1, actual) + "' in the reference, not '" +
                                     std::string(1, e.from) + "'");
      }
    }
  }

  Rng rng(seed);
  std::vector<ProteinSequence> out;
  out.reserve(signatures.size() * static_cast<std::size_t>(per_class));
  for (const auto& sig : signatures) {
    std::string variant = reference.residues;
    for (const auto& e : sig.edits) variant[e.position - 1] = e.to;
    for (int i = 0; i < per_class; ++i) {
      ProteinSequence s{sig.lineage + "_" + std::to_string(i), variant, sig.lineage};
      if (noise_rate > 0.0) {
        for (char& c : s.residues) {
          if (rng.uniform() < noise_rate) {
            // Uniform over the 20 symbols other than the current one.
            const int cur = Alphabet::index_of(c);
            int pick = static_cast<int>(rng.below(Alphabet::kSize - 1));
            if (pick >= cur) ++pick;
            c = Alphabet::symbol(pick);
          }
        }
      }
      out.push_back(std::move(s));
    }
  }
  return Corpus(std::move(out));
}

namespace {

struct LineageSpec {
  const char* lineage;
  std::vector<const char*> edits;
};

const std::vector<LineageSpec>& published_lineages() {
  static const std::vector<LineageSpec> specs = {
      {"B.1.351", {"D80A", "D215G", "K417N", "E484K", "N501Y", "A701V"}},
      {"B.1.427", {"S13I", "W152C", "L452R"}},
      {"B.1.429", {"S13I", "W152C", "L452R"}},
      {"B.1.525", {"Q52R", "A67V", "Q677H", "F888L"}},
      {"B.1.526", {"L5F", "T95I", "D253G", "S477N", "E484K"}},
      {"B.1.617.2", {"T19R", "L452R", "T478K", "P681R", "D950N"}},
      {"B.1.621", {"Y144S", "Y145N", "R346K", "N501Y", "P681H"}},
      {"C.37", {"G75V", "T76I", "L452Q", "F490S", "D614G", "T859N"}},
      {"P.1", {"L18F", "T20N", "P26S", "D138Y", "R190S", "K417T", "H655Y"}},
  };
  return specs;
}

}  // namespace

SyntheticPanel lineage_panel(std::size_t length, std::uint64_t seed, bool twins) {
  if (length < 20) fail(ErrorKind::kConfig, "panel reference length must be at least 20");
  Rng rng(seed);
  std::string ref(length, 'A');
  // Background residues avoid the ambiguity code.
  for (char& c : ref) {
    int pick = static_cast<int>(rng.below(Alphabet::kSize - 1));
    if (Alphabet::symbol(pick) == 'X') pick = Alphabet::kSize - 1;
    c = Alphabet::symbol(pick);
  }

  // Fold positions onto the reference; the first lineage to claim a position
  // fixes its reference residue, conflicting later edits are dropped.
  std::map<std::size_t, char> claimed;
  SyntheticPanel panel;
  for (const auto& spec : published_lineages()) {
    MutationSignature sig{spec.lineage, {}};
    std::set<std::size_t> used;
    for (const char* text : spec.edits) {
      Mutation m = parse_mutation(text);
      m.position = (m.position - 1) % length + 1;
      if (used.count(m.position)) continue;
      auto [it, inserted] = claimed.emplace(m.position, m.from);
      if (!inserted && it->second != m.from) continue;
      used.insert(m.position);
      sig.edits.push_back(m);
    }
    panel.signatures.push_back(std::move(sig));
  }
  for (auto [pos, from] : claimed) ref[pos - 1] = from;

  if (!twins) {
    // Give B.1.429 a private edit at the first unclaimed position.
    for (std::size_t pos = 1; pos <= length; ++pos) {
      if (claimed.count(pos)) continue;
      const char from = ref[pos - 1];
      const char to = from == 'G' ? 'A' : 'G';
      panel.signatures[2].edits.push_back({pos, from, to});
      break;
    }
  }
  panel.reference = {"reference", ref, std::nullopt};
  return panel;
}

Corpus synth_from_config(const nlohmann::json& config, const std::string& base_dir) {
  try {
    const int per_class = config.at("per_class").get<int>();
    const double noise = config.at("noise_rate").get<double>();
    const auto seed = config.at("seed").get<std::uint64_t>();
    if (config.contains("panel")) {
      const auto& p = config.at("panel");
      auto panel = lineage_panel(p.at("length").get<std::size_t>(),
                                 p.value("seed", seed), p.value("twins", false));
      return synth_lineages(panel.reference, panel.signatures, per_class, noise, seed);
    }
    std::string ref_path = config.at("reference").get<std::string>();
    if (!base_dir.empty() && !ref_path.empty() && ref_path.front() != '/') {
      ref_path = base_dir + "/" + ref_path;
    }
    Corpus ref = read_fasta_file(ref_path);
    if (ref.size() != 1) fail(ErrorKind::kConfig, "reference FASTA must hold exactly one record");
    std::vector<MutationSignature> sigs;
    for (const auto& s : config.at("signatures")) {
      MutationSignature sig{s.at("lineage").get<std::string>(), {}};
      for (const auto& e : s.at("edits")) sig.edits.push_back(parse_mutation(e.get<std::string>()));
      sigs.push_back(std::move(sig));
    }
    return synth_lineages(ref[0], sigs, per_class, noise, seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("synth config: ") + e.what());
  }
}

}  // namespace fedspike
