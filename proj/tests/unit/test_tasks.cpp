#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "mtdlab/errors.hpp"
#include "mtdlab/tasks.hpp"

using namespace mtdlab;

namespace {

Pfa SingleState(std::vector<double> probs, int alphabet = vocab::kNumSymbols) {
  Pfa p;
  p.n_states = 1;
  p.alphabet_size = alphabet;
  p.transitions.resize(1);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    p.transitions[0].push_back({static_cast<int>(i), 0, probs[i]});
  }
  return p;
}

}  // namespace

TEST_CASE("description length matches hand evaluation of the code") {
  // Values from mpmath at 30 digits.
  CHECK(DescriptionLength(SingleState({1.0}, 4)) == doctest::Approx(7.58496250072115618).epsilon(1e-14));

  Pfa two;
  two.n_states = 2;
  two.transitions = {{{0, 0, 0.5}, {3, 1, 0.5}}, {{7, 0, 1.0}}};
  CHECK(DescriptionLength(two) == doctest::Approx(26.4918530963296747).epsilon(1e-14));

  Pfa three;
  three.n_states = 3;
  three.transitions = {{{0, 0, 0.25}, {1, 1, 0.25}, {2, 2, 0.25}, {3, 0, 0.25}},
                       {{0, 1, 0.25}, {1, 2, 0.25}, {2, 0, 0.25}, {3, 1, 0.25}},
                       {{5, 0, 1.0}}};
  CHECK(DescriptionLength(three) == doctest::Approx(77.5090704773836790).epsilon(1e-14));
}

TEST_CASE("property: adding an edge never decreases description length") {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 500; ++rep) {
    Pfa p = SampleRandomPfa(rng);
    const int s = static_cast<int>(rng() % p.n_states);
    std::set<int> used;
    for (const auto& e : p.transitions[s]) used.insert(e.symbol);
    int sym = 0;
    while (used.contains(sym)) ++sym;
    if (sym >= p.alphabet_size) continue;
    const double before = DescriptionLength(p);
    p.transitions[s].push_back({sym, 0, 0.0});
    CHECK(DescriptionLength(p) > before);
  }
}

TEST_CASE("complexity bins") {
  const auto& edges = ComplexityBinEdges();
  for (std::size_t i = 1; i < edges.size(); ++i) CHECK(edges[i] > edges[i - 1]);
  // The frozen constants are exactly the reference computation.
  const auto fresh = ComputeComplexityBinEdges(kBinEdgeReferenceSeed, kBinEdgeReferenceSamples);
  for (std::size_t i = 0; i < edges.size(); ++i) CHECK(fresh[i] == edges[i]);
  CHECK(ComplexityLevel(0.0) == 1);
  CHECK(ComplexityLevel(1e6) == 10);
  CHECK(ComplexityLevel(edges[4]) == 5);
}

TEST_CASE("generate_pfa") {
  std::mt19937_64 rng(2);
  for (int level = 1; level <= 10; ++level) {
    for (int rep = 0; rep < 10; ++rep) {
      const Pfa p = GeneratePfa(level, rng);
      CHECK_NOTHROW(p.Validate());
      CHECK(ComplexityLevel(DescriptionLength(p)) == level);
      if (level == 1) CHECK(p.n_states <= 3);
    }
  }
  std::mt19937_64 a(3);
  std::mt19937_64 b(3);
  CHECK(GeneratePfa(6, a) == GeneratePfa(6, b));
  CHECK_THROWS_AS(GeneratePfa(0, rng), InputError);
  CHECK_THROWS_AS(GeneratePfa(11, rng), InputError);
}

TEST_CASE("pfa validation") {
  Pfa p = SingleState({0.5, 0.4});
  CHECK_THROWS_AS(p.Validate(), InputError);
  Pfa q;
  q.n_states = 2;
  q.transitions = {{{0, 0, 1.0}}, {{1, 0, 1.0}}};
  CHECK_THROWS_AS(q.Validate(), InputError);  // state 1 unreachable
}

TEST_CASE("sample_sequence") {
  std::mt19937_64 rng(4);
  const auto constant = SamplePfaSequence(SingleState({1.0}), 50, rng);
  CHECK(std::all_of(constant.begin(), constant.end(), [](int t) { return t == vocab::Symbol(0); }));

  SUBCASE("empirical frequencies within 3 sigma") {
    const std::vector<double> probs{0.5, 0.25, 0.15, 0.1};
    const int n = 10000;
    const auto seq = SamplePfaSequence(SingleState(probs), n, rng);
    for (std::size_t k = 0; k < probs.size(); ++k) {
      const double count = std::count(seq.begin(), seq.end(), vocab::Symbol(static_cast<int>(k)));
      const double sigma = std::sqrt(n * probs[k] * (1 - probs[k]));
      CHECK(std::abs(count - n * probs[k]) <= 3 * sigma);
    }
  }
  SUBCASE("two-state transition frequencies within 3 sigma") {
    Pfa p;
    p.n_states = 2;
    p.transitions = {{{0, 0, 0.7}, {1, 1, 0.3}}, {{2, 0, 0.4}, {3, 1, 0.6}}};
    const auto seq = SamplePfaSequence(p, 10000, rng);
    std::map<int, std::map<int, int>> counts;
    int state = 0;
    for (int t : seq) {
      const int sym = t - vocab::kSymbolBase;
      ++counts[state][sym];
      state = (sym == 1 || sym == 3) ? 1 : 0;
    }
    for (int s = 0; s < 2; ++s) {
      int total = 0;
      for (auto& [sym, c] : counts[s]) total += c;
      for (const auto& e : p.transitions[s]) {
        const double sigma = std::sqrt(total * e.prob * (1 - e.prob));
        CHECK(std::abs(counts[s][e.symbol] - total * e.prob) <= 3 * sigma);
      }
    }
  }
  std::mt19937_64 a(5);
  const Pfa p = GeneratePfa(4, a);
  std::mt19937_64 c(6);
  std::mt19937_64 d(6);
  CHECK(SamplePfaSequence(p, 40, c) == SamplePfaSequence(p, 40, d));
}

TEST_CASE("task streams") {
  const TaskAssets assets = MakeTaskAssets(7, 48);
  CHECK(assets.memorized_sequences.size() == 10);
  CHECK(assets.memorized_pfas.size() == 10);
  const std::set<std::vector<int>> stored(assets.memorized_sequences.begin(),
                                          assets.memorized_sequences.end());
  for (Task task : kAllTasks) {
    TaskStream stream(task, assets, 11);
    for (int i = 0; i < 50; ++i) {
      const TaskSample s = stream.Next();
      CHECK(s.task == task);
      REQUIRE(s.tokens.size() == 48);
      CHECK(s.tokens[0] == vocab::kBegin);
      for (std::size_t j = 1; j < s.tokens.size(); ++j) {
        CHECK(s.tokens[j] >= vocab::kSymbolBase);
        CHECK(s.tokens[j] < vocab::kNodeBase);
      }
      CHECK(s.complexity_level.has_value() == (task == Task::kIcll));
      if (task == Task::kMemorizedSeq) {
        CHECK(stored.contains(std::vector<int>(s.tokens.begin() + 1, s.tokens.end())));
      }
      if (task == Task::kIcll) {
        REQUIRE(s.source_pfa_dl.has_value());
        CHECK(ComplexityLevel(*s.source_pfa_dl) == *s.complexity_level);
      }
      if (task == Task::kCopy) {
        // Some window of length >= 8 appears twice without overlap.
        const auto& t = s.tokens;
        bool found = false;
        for (std::size_t a = 1; a < t.size() && !found; ++a) {
          for (std::size_t b = a + kCopyMinWindow; b + kCopyMinWindow <= t.size() && !found; ++b) {
            found = std::equal(t.begin() + a, t.begin() + a + kCopyMinWindow, t.begin() + b);
          }
        }
        CHECK(found);
      }
      const TaskSample again = stream.At(static_cast<std::uint64_t>(i));
      CHECK(again.tokens == s.tokens);
    }
  }
  CHECK(MakeMixtureSample(assets, 3, 9).tokens == MakeMixtureSample(assets, 3, 9).tokens);
  CHECK(MakeTaskAssets(7, 48).memorized_sequences == assets.memorized_sequences);
}

TEST_CASE("memorized PFA sample dl matches its generator") {
  const TaskAssets assets = MakeTaskAssets(8, 32);
  std::set<double> dls;
  for (const auto& p : assets.memorized_pfas) dls.insert(DescriptionLength(p));
  for (int i = 0; i < 20; ++i) {
    const TaskSample s = MakeTaskSample(Task::kMemorizedProg, assets, 1, i);
    REQUIRE(s.source_pfa_dl.has_value());
    CHECK(dls.contains(*s.source_pfa_dl));
  }
}

TEST_CASE("property: icll description length is level-monotone in expectation") {
  const TaskAssets assets = MakeTaskAssets(9, 24);
  std::map<int, std::pair<double, int>> acc;
  for (int i = 0; i < 1000; ++i) {
    const TaskSample s = MakeTaskSample(Task::kIcll, assets, 10, i);
    auto& [sum, n] = acc[*s.complexity_level];
    sum += *s.source_pfa_dl;
    ++n;
  }
  double prev = -1.0;
  for (auto& [level, v] : acc) {
    const double mean = v.first / v.second;
    CHECK(mean > prev);
    prev = mean;
  }
  CHECK(acc.size() == 10);
}

TEST_CASE("assets json round trip") {
  const TaskAssets a = MakeTaskAssets(12, 40);
  const std::string dumped = AssetsToJson(a).dump();
  const TaskAssets b = AssetsFromJson(nlohmann::json::parse(dumped));
  CHECK(b.memorized_sequences == a.memorized_sequences);
  CHECK(b.memorized_pfas == a.memorized_pfas);
  CHECK(b.bin_edges == a.bin_edges);
  CHECK(AssetsToJson(b).dump() == dumped);
}

TEST_CASE("creative worlds") {
  CreativeSizeParams size;
  SUBCASE("sibling discovery") {
    const CreativeSpec s = MakeCreativeWorld(CreativeTask::kSiblingDiscovery, size, 1);
    CHECK(s.ValidItemCount() == 16 * 6);
    CHECK(s.train_set.size() == 48);
    std::map<int, int> per_parent;
    for (int p : s.parent_of) ++per_parent[p];
    for (auto& [p, n] : per_parent) CHECK(n == 4);
  }
  SUBCASE("triangle discovery") {
    const CreativeSpec s = MakeCreativeWorld(CreativeTask::kTriangleDiscovery, size, 2);
    const auto items = EnumerateValidItems(s);
    // Brute force over all triples.
    std::size_t count = 0;
    for (int a = 0; a < 24; ++a)
      for (int b = a + 1; b < 24; ++b)
        for (int c = b + 1; c < 24; ++c)
          count += s.graph.Adjacent(a, b) && s.graph.Adjacent(b, c) && s.graph.Adjacent(a, c);
    CHECK(items.size() == count);
    CHECK(count > 10);
  }
  for (CreativeTask task : kAllCreativeTasks) {
    const CreativeSpec s = MakeCreativeWorld(task, size, 3);
    for (const auto& item : s.train_set) CHECK(CheckItem(s, item).valid);
    const auto dumped = CreativeSpecToJson(s).dump();
    const CreativeSpec back = CreativeSpecFromJson(nlohmann::json::parse(dumped));
    CHECK(back.train_set == s.train_set);
    CHECK(CreativeSpecToJson(back).dump() == dumped);
    CHECK(CreativeSpecToJson(MakeCreativeWorld(task, size, 3)).dump() == dumped);
    for (std::uint64_t i = 0; i < 30; ++i) {
      const auto ex = MakeCreativeExample(s, 4, i);
      CHECK(static_cast<int>(ex.tokens.size()) <= CreativeMaxItemLen(s));
      if (task == CreativeTask::kTriangleDiscovery && ex.tokens[1] == vocab::kEdge) continue;
      const auto check = CheckItem(s, ex.tokens);
      CHECK(check.valid);
      CHECK(s.train_set.contains(check.canonical));
      if (IsConstruction(task)) {
        CHECK(CreativePrompt(s, i).back() == vocab::kSep);
        CHECK(ex.loss_mask.size() == ex.tokens.size());
        CHECK(ex.loss_mask.back() == 1);
        CHECK(ex.loss_mask[0] == 0);
      }
    }
  }
}

TEST_CASE("construction generation prompts are fresh graphs") {
  CreativeSizeParams size;
  size.prompt_edge_prob = 0.6;
  for (CreativeTask task : {CreativeTask::kCircleConstruction, CreativeTask::kLineConstruction}) {
    const CreativeSpec s = MakeCreativeWorld(task, size, 8);
    std::set<std::vector<int>> pool;
    for (const auto& g : s.prompts) {
      CHECK(static_cast<int>(g.edges.size()) <= size.max_prompt_edges);
      pool.insert(SerializePromptGraph(g));
    }
    for (std::uint64_t i = 0; i < 50; ++i) {
      const auto prompt = CreativePrompt(s, i);
      CHECK(prompt == CreativePrompt(s, i));
      CHECK_FALSE(pool.contains(prompt));
      CHECK(static_cast<int>(prompt.size()) + size.answer_len + 1 <= CreativeMaxItemLen(s));
    }
    CHECK(CreativePrompt(s, 0) != CreativePrompt(s, 1));
  }
}

TEST_CASE("construction validity uses the item's own prompt graph") {
  CreativeSizeParams size;
  const CreativeSpec s = MakeCreativeWorld(CreativeTask::kCircleConstruction, size, 5);
  Graph g;
  g.nodes = {1, 2, 3, 4};
  g.edges = {{1, 2}, {2, 3}, {3, 4}, {1, 4}};
  auto item = SerializePromptGraph(g);
  for (int n : {3, 2, 1, 4}) item.push_back(vocab::Node(n));
  item.push_back(vocab::kEnd);
  const auto c = CheckItem(s, item);
  CHECK(c.valid);
  CHECK(c.canonical.back() == vocab::kEnd);
  CHECK(c.canonical[c.canonical.size() - 5] == vocab::Node(1));
  item[item.size() - 2] = vocab::Node(3);  // repeated node
  CHECK_FALSE(CheckItem(s, item).valid);
  CHECK_FALSE(CheckItem(s, {vocab::kBegin, vocab::kSep, vocab::kEnd}).valid);
  CHECK_FALSE(CheckItem(s, {}).valid);
}

TEST_CASE("score_items") {
  CreativeSizeParams size;
  const CreativeSpec s = MakeCreativeWorld(CreativeTask::kSiblingDiscovery, size, 6);
  SUBCASE("empty list") {
    const auto r = ScoreItems(s, {});
    CHECK(r.validity == 0.0);
    CHECK(r.creativity == 0.0);
  }
  SUBCASE("identical valid items from the training set") {
    const auto item = *s.train_set.begin();
    const auto r = ScoreItems(s, std::vector<std::vector<int>>(7, item));
    CHECK(r.validity == 1.0);
    CHECK(r.uniqueness == doctest::Approx(1.0 / 7));
    CHECK(r.novelty == 0.0);
    CHECK(r.creativity == 0.0);
  }
  SUBCASE("random batches match brute-force predicate counts") {
    std::mt19937_64 rng(7);
    std::set<std::vector<int>> valid_set;
    for (const auto& v : EnumerateValidItems(s)) valid_set.insert(v);
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<std::vector<int>> items;
      for (int i = 0; i < 40; ++i) {
        const int a = static_cast<int>(rng() % 64);
        const int b = static_cast<int>(rng() % 64);
        if (rng() % 4 == 0) {
          items.push_back({vocab::kBegin, vocab::Node(a), vocab::kEnd});
        } else if (rng() % 2 == 0) {
          // Force a sibling pair.
          int c = 0;
          while (c == a || s.parent_of[c] != s.parent_of[a]) ++c;
          items.push_back({vocab::kBegin, vocab::Node(c), vocab::Node(a), vocab::kEnd});
        } else {
          items.push_back({vocab::kBegin, vocab::Node(a), vocab::Node(b), vocab::kEnd});
        }
      }
      // Oracle: classify by explicit predicates.
      std::set<std::vector<int>> seen;
      std::size_t n_valid = 0;
      std::size_t n_all_three = 0;
      for (const auto& it : items) {
        if (it.size() != 4) continue;
        std::vector<int> c{it[0], std::min(it[1], it[2]), std::max(it[1], it[2]), it[3]};
        if (!valid_set.contains(c)) continue;
        ++n_valid;
        if (seen.insert(c).second && !s.train_set.contains(c)) ++n_all_three;
      }
      const auto r = ScoreItems(s, items);
      CHECK(r.n_valid == n_valid);
      CHECK(r.n_novel == n_all_three);
      CHECK(r.creativity * items.size() == doctest::Approx(static_cast<double>(n_all_three)));
      CHECK(r.creativity <= r.validity);
    }
  }
}
