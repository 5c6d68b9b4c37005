#include <doctest.h>

#include <set>
#include <sstream>

#include "fedspike/sequences.hpp"
#include "test_util.hpp"

using namespace fedspike;
using fedspike::test::error_kind_of;
using fedspike::test::error_text_of;
using fedspike::test::random_residues;

TEST_CASE("alphabet has 21 distinct symbols indexed in order") {
  std::set<char> seen(Alphabet::kSymbols.begin(), Alphabet::kSymbols.end());
  CHECK(seen.size() == 21);
  CHECK(Alphabet::kSymbols.size() == 21);
  for (int i = 0; i < Alphabet::kSize; ++i) CHECK(Alphabet::index_of(Alphabet::symbol(i)) == i);
  CHECK(Alphabet::index_of('X') >= 0);
  CHECK(Alphabet::index_of('B') == -1);
  CHECK(Alphabet::index_of(Alphabet::kPad) == -1);
}

TEST_CASE("parse_fasta reads a minimal labelled record") {
  auto c = parse_fasta_string(">s1|B.1.351\nMFVFL");
  REQUIRE(c.size() == 1);
  CHECK(c[0].id == "s1");
  CHECK(c[0].residues == "MFVFL");
  CHECK(c[0].label == "B.1.351");
  CHECK(c.max_len() == 5);
  CHECK(c.label_vocab() == std::vector<std::string>{"B.1.351"});
}

TEST_CASE("parse_fasta joins folded lines and tolerates CRLF") {
  CHECK(parse_fasta_string(">s1\nMFV\nFL")[0].residues == "MFVFL");
  auto c = parse_fasta_string(">s1|A\r\nMFV\r\nFL\r\n>s2|B\r\nW\r\n");
  REQUIRE(c.size() == 2);
  CHECK(c[0].residues == "MFVFL");
  CHECK(c[1].label == "B");
  CHECK_FALSE(parse_fasta_string(">s1\nMFV")[0].label.has_value());
}

TEST_CASE("parse_fasta reports record and offset of an invalid residue") {
  const auto text = error_text_of([] { parse_fasta_string(">s1|X\nMFB"); });
  CHECK(text.find("s1") != std::string::npos);
  CHECK(text.find("offset 2") != std::string::npos);
  CHECK(error_kind_of([] { parse_fasta_string(">s1|X\nMFB"); }) == ErrorKind::kData);
  CHECK(error_kind_of([] { parse_fasta_string("MFV\n>s1\nA"); }) == ErrorKind::kData);
  CHECK(error_kind_of([] { parse_fasta_string(">s1\n"); }) == ErrorKind::kData);
}

TEST_CASE("FASTA write/parse round trip on random corpora") {
  Rng rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<ProteinSequence> seqs;
    const auto n = 1 + rng.below(8);
    for (std::size_t i = 0; i < n; ++i) {
      ProteinSequence s{"seq" + std::to_string(i), random_residues(rng, 1 + rng.below(200)), std::nullopt};
      if (rng.below(3) != 0) s.label = "L" + std::to_string(rng.below(4));
      seqs.push_back(s);
    }
    Corpus original(seqs);
    std::ostringstream out;
    write_fasta(out, original, 1 + rng.below(70));
    CHECK(parse_fasta_string(out.str()) == original);
  }
}

TEST_CASE("label CSV overrides header labels") {
  auto c = parse_fasta_string(">a|old\nMF\n>b\nVF\n>c|keep\nLL\n");
  std::istringstream csv("id,label\na,Alpha\nb,Beta\n");
  auto labelled = apply_label_csv(c, csv);
  CHECK(labelled[0].label == "Alpha");
  CHECK(labelled[1].label == "Beta");
  CHECK(labelled[2].label == "keep");
  for (std::size_t i = 0; i < labelled.size(); ++i) {
    const auto idx = labelled.label_index(i);
    REQUIRE(idx >= 0);
    CHECK(labelled.label_vocab()[static_cast<std::size_t>(idx)] == *labelled[i].label);
  }
  std::istringstream bad("name,label\na,x\n");
  CHECK(error_kind_of([&] { apply_label_csv(c, bad); }) == ErrorKind::kData);
}

TEST_CASE("pad_corpus extends with PAD and never alters residues") {
  auto c = pad_corpus(parse_fasta_string(">s\nMFV"), 5);
  CHECK(c.pad_len() == 5);
  CHECK(c.residue_at(0, 0) == 'M');
  CHECK(c.residue_at(0, 2) == 'V');
  CHECK(c.residue_at(0, 3) == Alphabet::kPad);
  CHECK(c.residue_at(0, 4) == Alphabet::kPad);
  CHECK(c[0].residues == "MFV");

  Rng rng(3);
  const std::string full = random_residues(rng, 1277);
  auto same = pad_corpus(Corpus({{"x", full, std::nullopt}}), 1277);
  CHECK(same[0].residues == full);
  for (std::size_t i = 0; i < 1277; ++i) CHECK(same.residue_at(0, i) == full[i]);

  CHECK(error_kind_of([] { pad_corpus(parse_fasta_string(">s\nMFV"), 2); }) == ErrorKind::kData);
}

TEST_CASE("corpus_stats overall and per label") {
  Rng rng(11);
  Corpus c({{"a", random_residues(rng, 9), "P"}, {"b", random_residues(rng, 1277), "Q"},
            {"c", random_residues(rng, 1263), "P"}});
  auto s = corpus_stats(c);
  CHECK(s.overall.min_len == 9);
  CHECK(s.overall.max_len == 1277);
  CHECK(s.overall.mean_len == doctest::Approx((9.0 + 1277.0 + 1263.0) / 3.0).epsilon(1e-12));
  CHECK(s.overall.mean_len == doctest::Approx(849.667).epsilon(1e-6));
  REQUIRE(s.per_label.size() == 2);
  CHECK(s.per_label[0].first == "P");
  CHECK(s.per_label[0].second.mean_len == doctest::Approx(636.0));
  CHECK(s.per_label[1].second.count == 1);

  auto one = corpus_stats(parse_fasta_string(">s\nMFVFL"));
  CHECK(one.overall.min_len == 5);
  CHECK(one.overall.max_len == 5);
  CHECK(one.overall.mean_len == 5.0);
}

TEST_CASE("mutation notation parses and validates") {
  auto m = parse_mutation("S13I");
  CHECK(m.position == 13);
  CHECK(m.from == 'S');
  CHECK(m.to == 'I');
  CHECK(to_string(m) == "S13I");
  CHECK(error_kind_of([] { parse_mutation("13I"); }) == ErrorKind::kConfig);
  CHECK(error_kind_of([] { parse_mutation("S0I"); }) == ErrorKind::kConfig);
  CHECK(error_kind_of([] { MutationSignature{"L", {parse_mutation("S13S")}}.validate(); }) == ErrorKind::kConfig);
  CHECK(error_kind_of([] {
          MutationSignature{"L", {parse_mutation("S13I"), parse_mutation("S13A")}}.validate();
        }) == ErrorKind::kConfig);
}

namespace {

ProteinSequence epsilon_reference() {
  Rng rng(5);
  std::string r = "MFVFLS" + random_residues(rng, 494);
  r[12] = 'S';
  r[151] = 'W';
  r[451] = 'L';
  return {"ref", r, std::nullopt};
}

std::set<std::string> edits_vs(const std::string& ref, const std::string& seq) {
  std::set<std::string> out;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (ref[i] != seq[i]) out.insert(to_string(Mutation{i + 1, ref[i], seq[i]}));
  }
  return out;
}

}  // namespace

TEST_CASE("synth_lineages applies exactly the signature at zero noise") {
  const auto ref = epsilon_reference();
  MutationSignature eps{"Epsilon", {parse_mutation("S13I"), parse_mutation("W152C"), parse_mutation("L452R")}};
  auto c = synth_lineages(ref, {eps}, 1, 0.0, 1);
  REQUIRE(c.size() == 1);
  CHECK(c[0].label == "Epsilon");
  CHECK(edits_vs(ref.residues, c[0].residues) == std::set<std::string>{"S13I", "W152C", "L452R"});

  CHECK(synth_lineages(ref, {}, 5, 0.1, 1).empty());
  CHECK(synth_lineages(ref, {eps}, 3, 0.0, 9) == synth_lineages(ref, {eps}, 3, 0.0, 9));
  CHECK(synth_lineages(ref, {eps}, 3, 0.05, 9) == synth_lineages(ref, {eps}, 3, 0.05, 9));

  MutationSignature wrong{"Bad", {parse_mutation("A13I")}};
  CHECK(error_kind_of([&] { synth_lineages(ref, {wrong}, 1, 0.0, 1); }) == ErrorKind::kConfig);
}

TEST_CASE("identical signatures give byte-identical populations at zero noise") {
  const auto ref = epsilon_reference();
  MutationSignature a{"B.1.427", {parse_mutation("S13I"), parse_mutation("L452R")}};
  MutationSignature b{"B.1.429", a.edits};
  auto c = synth_lineages(ref, {a, b}, 4, 0.0, 2);
  REQUIRE(c.size() == 8);
  std::multiset<std::string> pa, pb;
  for (const auto& s : c.sequences()) (s.label == "B.1.427" ? pa : pb).insert(s.residues);
  CHECK(pa == pb);
}

TEST_CASE("noise substitutes residues at the requested rate") {
  const auto ref = epsilon_reference();
  auto c = synth_lineages(ref, {{"plain", {}}}, 200, 0.05, 4);
  std::size_t diffs = 0, total = 0;
  for (const auto& s : c.sequences()) {
    CHECK(s.residues.size() == ref.residues.size());
    for (std::size_t i = 0; i < s.residues.size(); ++i) diffs += s.residues[i] != ref.residues[i];
    total += s.residues.size();
  }
  const double rate = static_cast<double>(diffs) / static_cast<double>(total);
  CHECK(rate == doctest::Approx(0.05).epsilon(0.1));
}

TEST_CASE("lineage panel gives nine distinct signatures unless twinned") {
  auto panel = lineage_panel(200, 3, false);
  REQUIRE(panel.signatures.size() == 9);
  CHECK(panel.reference.residues.size() == 200);
  std::set<std::vector<std::string>> distinct;
  for (const auto& sig : panel.signatures) {
    sig.validate();
    std::vector<std::string> e;
    for (const auto& m : sig.edits) {
      CHECK(m.position <= 200);
      CHECK(panel.reference.residues[m.position - 1] == m.from);
      e.push_back(to_string(m));
    }
    std::sort(e.begin(), e.end());
    distinct.insert(e);
  }
  CHECK(distinct.size() == 9);

  auto twins = lineage_panel(200, 3, true);
  const MutationSignature* a = nullptr;
  const MutationSignature* b = nullptr;
  for (const auto& s : twins.signatures) {
    if (s.lineage == "B.1.427") a = &s;
    if (s.lineage == "B.1.429") b = &s;
  }
  REQUIRE(a != nullptr);
  REQUIRE(b != nullptr);
  CHECK(a->edits == b->edits);
}

TEST_CASE("synth_from_config reads the panel form") {
  nlohmann::json j{{"panel", {{"length", 120}, {"twins", false}}}, {"per_class", 3}, {"noise_rate", 0.0}, {"seed", 8}};
  auto c = synth_from_config(j);
  CHECK(c.size() == 27);
  CHECK(c.label_vocab().size() == 9);
  CHECK(error_kind_of([] { synth_from_config(nlohmann::json{{"per_class", 3}}); }) == ErrorKind::kConfig);
}
