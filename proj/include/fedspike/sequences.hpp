#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace fedspike {

// The 20 standard amino acids plus the ambiguity code X, in index order.
class Alphabet {
 public:
  static constexpr int kSize = 21;
  static constexpr std::string_view kSymbols = "ACDEFGHIKLMNPQRSTVWXY";
  // Marker for positions beyond a sequence's end once padded.
  static constexpr char kPad = '-';

  // -1 for characters outside the alphabet (including kPad).
  static int index_of(char c) { return table()[static_cast<unsigned char>(c)]; }
  static bool contains(char c) { return index_of(c) >= 0; }
  static char symbol(int i) { return kSymbols[static_cast<std::size_t>(i)]; }

 private:
  static const std::array<int, 256>& table();
};

struct ProteinSequence {
  std::string id;
  std::string residues;
  std::optional<std::string> label;

  std::size_t length() const { return residues.size(); }
  bool operator==(const ProteinSequence&) const = default;
};

// An immutable collection of sequences. pad_len == 0 means unpadded;
// otherwise every sequence is treated as extended with PAD up to pad_len.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<ProteinSequence> sequences, std::size_t pad_len = 0);

  const std::vector<ProteinSequence>& sequences() const { return sequences_; }
  const std::vector<std::string>& label_vocab() const { return label_vocab_; }
  std::size_t max_len() const { return max_len_; }
  std::size_t pad_len() const { return pad_len_; }
  std::size_t size() const { return sequences_.size(); }
  bool empty() const { return sequences_.empty(); }
  const ProteinSequence& operator[](std::size_t i) const { return sequences_[i]; }

  // Residue at position i of sequence s, or Alphabet::kPad past its end.
  char residue_at(std::size_t s, std::size_t i) const;
  // Index into label_vocab, or -1 for an unlabeled sequence.
  int label_index(std::size_t s) const;

  bool operator==(const Corpus&) const = default;

 private:
  std::vector<ProteinSequence> sequences_;
  std::vector<std::string> label_vocab_;
  std::size_t max_len_ = 0;
  std::size_t pad_len_ = 0;
};

struct Mutation {
  std::size_t position = 0;  // 1-based
  char from = 0;
  char to = 0;

  bool operator==(const Mutation&) const = default;
};

// Parses "S13I" style notation.
Mutation parse_mutation(std::string_view text);
std::string to_string(const Mutation& m);

struct MutationSignature {
  std::string lineage;
  std::vector<Mutation> edits;

  // Throws on repeated positions or identity substitutions.
  void validate() const;
};

Corpus parse_fasta(std::istream& in);
Corpus parse_fasta_string(std::string_view text);
Corpus read_fasta_file(const std::string& path);
void write_fasta(std::ostream& out, const Corpus& corpus, std::size_t line_width = 60);
void write_fasta_file(const std::string& path, const Corpus& corpus);

// Replaces labels from an `id,label` CSV. Sequences missing from the CSV keep
// whatever label they carried in their header.
Corpus apply_label_csv(const Corpus& corpus, std::istream& csv);

Corpus pad_corpus(const Corpus& corpus, std::size_t target_len);

struct LengthStats {
  std::size_t min_len = 0;
  std::size_t max_len = 0;
  double mean_len = 0.0;
  std::size_t count = 0;
};

struct CorpusStats {
  LengthStats overall;
  // Parallel to label_vocab.
  std::vector<std::pair<std::string, LengthStats>> per_label;
};

CorpusStats corpus_stats(const Corpus& corpus);

Corpus synth_lineages(const ProteinSequence& reference,
                      const std::vector<MutationSignature>& signatures, int per_class,
                      double noise_rate, std::uint64_t seed);

// A reference plus nine lineage signatures derived from the published spike
// mutations of the nine studied lineages, folded onto a reference of the
// requested length. With twins the two Epsilon lineages share one signature;
// otherwise B.1.429 carries one extra edit so all nine are distinct.
struct SyntheticPanel {
  ProteinSequence reference;
  std::vector<MutationSignature> signatures;
};

SyntheticPanel lineage_panel(std::size_t length, std::uint64_t seed, bool twins);

// JSON generator config: {"reference": path, "signatures": [...], "per_class",
// "noise_rate", "seed"}, or {"panel": {"length", "twins", "seed"}, ...} for
// the built-in panel.
Corpus synth_from_config(const nlohmann::json& config, const std::string& base_dir = "");

}  // namespace fedspike
