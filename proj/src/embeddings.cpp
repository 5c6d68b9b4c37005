#include "fedspike/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fedspike {

std::string to_string(EmbeddingMethod method) {
  switch (method) {
    case EmbeddingMethod::kOneHot: return "ohe";
    case EmbeddingMethod::kSpike2Vec: return "spike2vec";
    case EmbeddingMethod::kPwm2Vec: return "pwm2vec";
    case EmbeddingMethod::kStringKernelPca: return "stringkernel";
  }
  return "?";
}

EmbeddingMethod parse_embedding_method(const std::string& name) {
  for (auto m : {EmbeddingMethod::kOneHot, EmbeddingMethod::kSpike2Vec, EmbeddingMethod::kPwm2Vec,
                 EmbeddingMethod::kStringKernelPca}) {
    if (to_string(m) == name) return m;
  }
  fail(ErrorKind::kConfig,
       "unknown embedding '" + name + "' (valid: ohe, spike2vec, pwm2vec, stringkernel)");
}

int default_k(EmbeddingMethod method) {
  switch (method) {
    case EmbeddingMethod::kPwm2Vec: return 9;
    case EmbeddingMethod::kOneHot: return 0;
    default: return 3;
  }
}

KmerIndex::KmerIndex(int k) : k_(k), size_(1) {
  if (k < 1 || k > 6) fail(ErrorKind::kConfig, "k-mer length must be in [1, 6]");
  for (int i = 0; i < k; ++i) size_ *= Alphabet::kSize;
}

std::int64_t KmerIndex::index_of(std::string_view kmer) const {
  if (static_cast<int>(kmer.size()) != k_) return -1;
  std::int64_t idx = 0;
  for (char c : kmer) {
    const int a = Alphabet::index_of(c);
    if (a < 0) return -1;
    idx = idx * Alphabet::kSize + a;
  }
  return idx;
}

std::string KmerIndex::kmer_at(std::size_t index) const {
  std::string out(static_cast<std::size_t>(k_), 'A');
  for (int i = k_ - 1; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = Alphabet::symbol(static_cast<int>(index % Alphabet::kSize));
    index /= Alphabet::kSize;
  }
  return out;
}

FeatureVector one_hot_encode(const ProteinSequence& seq, std::size_t padded_len) {
  if (seq.length() > padded_len) {
    fail(ErrorKind::kData, "sequence '" + seq.id + "' (length " + std::to_string(seq.length()) +
                               ") exceeds padded length " + std::to_string(padded_len));
  }
  FeatureVector fv{std::vector<double>(Alphabet::kSize * padded_len, 0.0),
                   EmbeddingMethod::kOneHot};
  for (std::size_t i = 0; i < seq.length(); ++i) {
    const int a = Alphabet::index_of(seq.residues[i]);
    if (a >= 0) fv.values[i * Alphabet::kSize + static_cast<std::size_t>(a)] = 1.0;
  }
  return fv;
}

namespace {

// Integer codes of every k-mer window; windows with foreign symbols get -1.
std::vector<std::int64_t> kmer_codes(const std::string& residues, const KmerIndex& index) {
  const std::size_t k = static_cast<std::size_t>(index.k());
  std::vector<std::int64_t> codes;
  if (residues.size() < k) return codes;
  codes.reserve(residues.size() - k + 1);
  std::string_view view(residues);
  for (std::size_t i = 0; i + k <= residues.size(); ++i) codes.push_back(index.index_of(view.substr(i, k)));
  return codes;
}

void require_length(const ProteinSequence& seq, int k) {
  if (seq.length() < static_cast<std::size_t>(k)) {
    fail(ErrorKind::kData, "sequence '" + seq.id + "' shorter than k=" + std::to_string(k));
  }
}

}  // namespace

FeatureVector spike2vec(const ProteinSequence& seq, int k) {
  KmerIndex index(k);
  require_length(seq, k);
  FeatureVector fv{std::vector<double>(index.size(), 0.0), EmbeddingMethod::kSpike2Vec};
  for (auto code : kmer_codes(seq.residues, index)) {
    if (code >= 0) fv.values[static_cast<std::size_t>(code)] += 1.0;
  }
  return fv;
}

const std::array<int, Alphabet::kSize>& sense_codon_counts() {
  //                                           A  C  D  E  F  G  H  I  K  L  M  N  P  Q  R  S  T  V  W  X  Y
  static const std::array<int, Alphabet::kSize> counts = {4, 2, 2, 2, 2, 4, 2, 3, 2, 6, 1,
                                                          2, 4, 2, 6, 6, 4, 4, 1, 0, 2};
  return counts;
}

double background_probability(char residue) {
  const int a = Alphabet::index_of(residue);
  if (a < 0) fail(ErrorKind::kData, "no background probability for '" + std::string(1, residue) + "'");
  const int n = sense_codon_counts()[static_cast<std::size_t>(a)];
  return static_cast<double>(std::max(n, 1)) / 61.0;
}

PwmModel build_pwm(const ProteinSequence& seq, int k) {
  if (k < 1) fail(ErrorKind::kConfig, "PWM k must be positive");
  require_length(seq, k);
  PwmModel m;
  m.k = k;
  m.pfm = Matrix::Zero(Alphabet::kSize, k);
  const std::size_t windows = seq.length() - static_cast<std::size_t>(k) + 1;
  for (std::size_t w = 0; w < windows; ++w) {
    for (int i = 0; i < k; ++i) {
      const int a = Alphabet::index_of(seq.residues[w + static_cast<std::size_t>(i)]);
      if (a >= 0) m.pfm(a, i) += 1.0;
    }
  }
  m.ppm_raw = m.pfm;
  for (int i = 0; i < k; ++i) {
    const double total = m.pfm.col(i).sum();
    if (total > 0) m.ppm_raw.col(i) /= total;
  }
  m.ppm = m.ppm_raw.array() + PwmModel::kLaplace;
  m.pwm.resize(Alphabet::kSize, k);
  for (int c = 0; c < Alphabet::kSize; ++c) {
    m.background[static_cast<std::size_t>(c)] = background_probability(Alphabet::symbol(c));
    for (int i = 0; i < k; ++i) {
      m.pwm(c, i) = std::log2(m.ppm(c, i) / m.background[static_cast<std::size_t>(c)]);
    }
  }
  return m;
}

FeatureVector pwm2vec(const ProteinSequence& seq, const PwmModel& model, std::size_t padded_len) {
  const auto k = static_cast<std::size_t>(model.k);
  if (seq.length() > padded_len || padded_len < k) {
    fail(ErrorKind::kData, "pwm2vec: sequence '" + seq.id + "' does not fit padded length " +
                               std::to_string(padded_len));
  }
  if (model.pwm.rows() != Alphabet::kSize || static_cast<std::size_t>(model.pwm.cols()) != k) {
    fail(ErrorKind::kData, "pwm2vec: PWM shape does not match k");
  }
  FeatureVector fv{std::vector<double>(padded_len - k + 1, 0.0), EmbeddingMethod::kPwm2Vec};
  for (std::size_t j = 0; j < fv.values.size(); ++j) {
    double score = 0.0;
    for (std::size_t i = 0; i < k && j + i < seq.length(); ++i) {
      const int a = Alphabet::index_of(seq.residues[j + i]);
      if (a >= 0) score += model.pwm(a, static_cast<Eigen::Index>(i));
    }
    fv.values[j] = score;
  }
  return fv;
}

GramMatrix string_kernel_gram(const Corpus& corpus, int k, int max_mismatch) {
  if (max_mismatch < 0) fail(ErrorKind::kConfig, "mismatch budget must be non-negative");
  KmerIndex index(k);
  const std::size_t n = corpus.size();
  std::vector<std::vector<std::int64_t>> codes(n);
  for (std::size_t s = 0; s < n; ++s) {
    require_length(corpus[s], k);
    codes[s] = kmer_codes(corpus[s].residues, index);
  }

  GramMatrix g{Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n))};
  if (max_mismatch == 0) {
    // Exact matches: merge the sorted code lists.
    for (auto& c : codes) std::sort(c.begin(), c.end());
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a; b < n; ++b) {
        const auto& ca = codes[a];
        const auto& cb = codes[b];
        double total = 0.0;
        std::size_t i = 0, j = 0;
        while (i < ca.size() && j < cb.size()) {
          if (ca[i] < cb[j]) {
            ++i;
          } else if (cb[j] < ca[i]) {
            ++j;
          } else {
            const auto v = ca[i];
            std::size_t ni = 0, nj = 0;
            while (i < ca.size() && ca[i] == v) ++i, ++ni;
            while (j < cb.size() && cb[j] == v) ++j, ++nj;
            if (v >= 0) total += static_cast<double>(ni * nj);
          }
        }
        g.values(a, b) = g.values(b, a) = total;
      }
    }
    return g;
  }

  const auto kk = static_cast<std::size_t>(k);
  for (std::size_t a = 0; a < n; ++a) {
    const auto& ra = corpus[a].residues;
    for (std::size_t b = a; b < n; ++b) {
      const auto& rb = corpus[b].residues;
      double total = 0.0;
      for (std::size_t i = 0; i + kk <= ra.size(); ++i) {
        for (std::size_t j = 0; j + kk <= rb.size(); ++j) {
          int mismatches = 0;
          for (std::size_t t = 0; t < kk && mismatches <= max_mismatch; ++t) {
            mismatches += ra[i + t] != rb[j + t];
          }
          if (mismatches <= max_mismatch) total += 1.0;
        }
      }
      g.values(a, b) = g.values(b, a) = total;
    }
  }
  return g;
}

KernelPcaResult kernel_pca(const GramMatrix& gram, std::size_t components) {
  const auto& k = gram.values;
  const Eigen::Index n = k.rows();
  if (n == 0 || k.cols() != n) fail(ErrorKind::kData, "kernel_pca needs a square, non-empty gram");
  if (components > static_cast<std::size_t>(n)) {
    fail(ErrorKind::kConfig, "kernel_pca: components exceed sample count");
  }
  const double scale = std::max(1.0, k.cwiseAbs().maxCoeff());
  if ((k - k.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    fail(ErrorKind::kData, "kernel_pca: gram matrix is not symmetric");
  }

  const Eigen::MatrixXd kd = k;
  const Eigen::VectorXd row_mean = kd.rowwise().mean();
  const double all_mean = kd.mean();
  Eigen::MatrixXd centered = kd;
  centered.colwise() -= row_mean;
  centered.rowwise() -= row_mean.transpose();
  centered.array() += all_mean;
  centered = 0.5 * (centered + centered.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(centered);
  if (solver.info() != Eigen::Success) fail(ErrorKind::kTraining, "kernel_pca: eigensolver failed");
  const Eigen::VectorXd& vals = solver.eigenvalues();  // ascending
  const Eigen::MatrixXd& vecs = solver.eigenvectors();

  const double largest = vals(n - 1);
  const double eps = 1e-10 * std::max(largest, 0.0);
  KernelPcaResult out;
  double positive_total = 0.0;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    if (vals(i) > eps) {
      positive_total += vals(i);
      keep.push_back(i);
    }
  }
  out.dropped = static_cast<std::size_t>(n) - keep.size();
  if (components > keep.size()) {
    warn("kernel_pca: requested " + std::to_string(components) + " components but only " +
         std::to_string(keep.size()) + " eigenvalues are positive");
    components = keep.size();
  }
  out.projections.resize(n, static_cast<Eigen::Index>(components));
  for (std::size_t c = 0; c < components; ++c) {
    const double lambda = vals(keep[c]);
    out.eigenvalues.push_back(lambda);
    out.explained_variance_ratio.push_back(lambda / positive_total);
    // Kc v / sqrt(lambda) == sqrt(lambda) v for the training points.
    out.projections.col(static_cast<Eigen::Index>(c)) = vecs.col(keep[c]) * std::sqrt(lambda);
  }
  return out;
}

EmbeddedDataset embed_corpus(const Corpus& corpus, const EmbedOptions& options) {
  if (corpus.empty()) fail(ErrorKind::kData, "cannot embed an empty corpus");
  const std::size_t pad_len = corpus.pad_len() ? corpus.pad_len() : corpus.max_len();
  const int k = options.k > 0 ? options.k : default_k(options.method);

  EmbeddedDataset out;
  out.label_vocab = corpus.label_vocab();
  out.descriptor = {options.method, k, 0, pad_len};
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    out.ids.push_back(corpus[s].id);
    out.y.push_back(corpus.label_index(s));
  }
  const auto rows = static_cast<Eigen::Index>(corpus.size());

  auto fill = [&](auto&& encode) {
    for (std::size_t s = 0; s < corpus.size(); ++s) {
      FeatureVector fv = encode(corpus[s]);
      if (s == 0) out.x.resize(rows, static_cast<Eigen::Index>(fv.dim()));
      out.x.row(static_cast<Eigen::Index>(s)) =
          Eigen::Map<const Eigen::RowVectorXd>(fv.values.data(), static_cast<Eigen::Index>(fv.dim()));
    }
  };

  switch (options.method) {
    case EmbeddingMethod::kOneHot:
      fill([&](const ProteinSequence& s) { return one_hot_encode(s, pad_len); });
      break;
    case EmbeddingMethod::kSpike2Vec:
      fill([&](const ProteinSequence& s) { return spike2vec(s, k); });
      break;
    case EmbeddingMethod::kPwm2Vec:
      fill([&](const ProteinSequence& s) { return pwm2vec(s, build_pwm(s, k), pad_len); });
      break;
    case EmbeddingMethod::kStringKernelPca: {
      auto gram = string_kernel_gram(corpus, k, options.max_mismatch);
      auto pca = kernel_pca(gram, std::min(options.components, corpus.size()));
      out.x = pca.projections;
      break;
    }
  }
  out.descriptor.dim = static_cast<std::size_t>(out.x.cols());
  return out;
}

std::string descriptor_path_for(const std::string& csv_path) {
  auto dot = csv_path.rfind(".csv");
  std::string stem = dot == std::string::npos ? csv_path : csv_path.substr(0, dot);
  return stem + ".json";
}

namespace {

std::string format_value(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    std::ostringstream s;
    s << static_cast<long long>(v);
    return s.str();
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_embedded_csv(const std::string& csv_path, const EmbeddedDataset& data) {
  std::ofstream out(csv_path);
  if (!out) fail(ErrorKind::kData, "cannot write " + csv_path);
  out << "id,label";
  for (Eigen::Index j = 0; j < data.x.cols(); ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.ids[i] << ',';
    if (data.y[i] >= 0) out << data.label_vocab[static_cast<std::size_t>(data.y[i])];
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) {
      out << ',' << format_value(data.x(static_cast<Eigen::Index>(i), j));
    }
    out << '\n';
  }
  nlohmann::json desc = {{"method", to_string(data.descriptor.method)},
                         {"k", data.descriptor.k},
                         {"dim", data.descriptor.dim},
                         {"pad_len", data.descriptor.pad_len},
                         {"labels", data.label_vocab}};
  std::ofstream dout(descriptor_path_for(csv_path));
  dout << desc.dump(2) << '\n';
}

EmbeddedDataset read_embedded_csv(const std::string& csv_path) {
  std::ifstream din(descriptor_path_for(csv_path));
  if (!din) fail(ErrorKind::kData, "missing descriptor " + descriptor_path_for(csv_path));
  EmbeddedDataset data;
  try {
    auto desc = nlohmann::json::parse(din);
    data.descriptor.method = parse_embedding_method(desc.at("method").get<std::string>());
    data.descriptor.k = desc.at("k").get<int>();
    data.descriptor.dim = desc.at("dim").get<std::size_t>();
    data.descriptor.pad_len = desc.at("pad_len").get<std::size_t>();
    if (desc.contains("labels")) data.label_vocab = desc.at("labels").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("bad embedding descriptor: ") + e.what());
  }

  std::ifstream in(csv_path);
  if (!in) fail(ErrorKind::kData, "cannot open " + csv_path);
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(data.descriptor.dim);
    std::size_t pos = line.find(',');
    std::size_t next = line.find(',', pos + 1);
    data.ids.push_back(line.substr(0, pos));
    labels.push_back(line.substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1));
    const char* p = next == std::string::npos ? nullptr : line.c_str() + next + 1;
    while (p) {
      char* end = nullptr;
      row.push_back(std::strtod(p, &end));
      p = (*end == ',') ? end + 1 : nullptr;
    }
    if (row.size() != data.descriptor.dim) {
      fail(ErrorKind::kData, csv_path + ": row '" + data.ids.back() + "' has " +
                                 std::to_string(row.size()) + " features, descriptor says " +
                                 std::to_string(data.descriptor.dim));
    }
    rows.push_back(std::move(row));
  }
  data.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(data.descriptor.dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      data.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  for (const auto& l : labels) {
    if (l.empty()) {
      data.y.push_back(-1);
      continue;
    }
    auto it = std::find(data.label_vocab.begin(), data.label_vocab.end(), l);
    if (it == data.label_vocab.end()) {
      data.label_vocab.push_back(l);
      it = data.label_vocab.end() - 1;
    }
    data.y.push_back(static_cast<int>(it - data.label_vocab.begin()));
  }
  return data;
}

}  // namespace fedspike
