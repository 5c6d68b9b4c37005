#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedspike/common.hpp"
#include "fedspike/sequences.hpp"

namespace fedspike {

enum class EmbeddingMethod { kOneHot, kSpike2Vec, kPwm2Vec, kStringKernelPca };

std::string to_string(EmbeddingMethod method);
// Accepts ohe | spike2vec | pwm2vec | stringkernel; errors list valid names.
EmbeddingMethod parse_embedding_method(const std::string& name);

struct FeatureVector {
  std::vector<double> values;
  EmbeddingMethod method = EmbeddingMethod::kOneHot;

  std::size_t dim() const { return values.size(); }
};

// Lexicographic (alphabet-order) numbering of k-mers: base-21 digits.
class KmerIndex {
 public:
  explicit KmerIndex(int k);

  int k() const { return k_; }
  std::size_t size() const { return size_; }
  // -1 if the window contains a symbol outside the alphabet.
  std::int64_t index_of(std::string_view kmer) const;
  std::string kmer_at(std::size_t index) const;

 private:
  int k_;
  std::size_t size_;
};

FeatureVector one_hot_encode(const ProteinSequence& seq, std::size_t padded_len);
FeatureVector spike2vec(const ProteinSequence& seq, int k = 3);

// Number of sense codons coding each alphabet symbol in the standard genetic
// code; X has no codons.
const std::array<int, Alphabet::kSize>& sense_codon_counts();
// n(c)/61, with X floored to 1/61.
double background_probability(char residue);

struct PwmModel {
  static constexpr double kLaplace = 0.1;

  int k = 0;
  // 21 x k, rows indexed by alphabet position, columns by k-mer offset.
  Matrix pfm;
  // Column-normalised PFM before the Laplace term.
  Matrix ppm_raw;
  Matrix ppm;
  Matrix pwm;
  std::array<double, Alphabet::kSize> background{};
};

PwmModel build_pwm(const ProteinSequence& seq, int k = 9);
FeatureVector pwm2vec(const ProteinSequence& seq, const PwmModel& model, std::size_t padded_len);

// Symmetric match-count kernel: number of k-mer pairs within Hamming
// distance max_mismatch.
struct GramMatrix {
  Matrix values;
  std::size_t n() const { return static_cast<std::size_t>(values.rows()); }
};

GramMatrix string_kernel_gram(const Corpus& corpus, int k = 3, int max_mismatch = 0);

struct KernelPcaResult {
  Matrix projections;  // n x retained
  std::vector<double> eigenvalues;  // retained, descending
  std::vector<double> explained_variance_ratio;
  std::size_t dropped = 0;  // near-null or negative components skipped
};

KernelPcaResult kernel_pca(const GramMatrix& gram, std::size_t components);

struct EmbeddingDescriptor {
  EmbeddingMethod method = EmbeddingMethod::kOneHot;
  int k = 0;
  std::size_t dim = 0;
  std::size_t pad_len = 0;

  bool operator==(const EmbeddingDescriptor&) const = default;
};

struct EmbeddedDataset {
  std::vector<std::string> ids;
  Matrix x;
  std::vector<int> y;  // -1 for unlabeled rows
  std::vector<std::string> label_vocab;
  EmbeddingDescriptor descriptor;

  std::size_t size() const { return ids.size(); }
};

struct EmbedOptions {
  EmbeddingMethod method = EmbeddingMethod::kOneHot;
  int k = 0;            // 0 picks the method default (3, 3, 9, 3)
  int max_mismatch = 0;  // string kernel only
  std::size_t components = 500;  // kernel PCA only
};

int default_k(EmbeddingMethod method);

// Pads to the corpus maximum when the corpus is not already padded.
EmbeddedDataset embed_corpus(const Corpus& corpus, const EmbedOptions& options);

// CSV with header id,label,f0..f{dim-1} plus a JSON descriptor sidecar.
void write_embedded_csv(const std::string& csv_path, const EmbeddedDataset& data);
EmbeddedDataset read_embedded_csv(const std::string& csv_path);
std::string descriptor_path_for(const std::string& csv_path);

}  // namespace fedspike
