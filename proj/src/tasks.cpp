#include "mtdlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <queue>

#include "mtdlab/errors.hpp"
#include "mtdlab/rng.hpp"

namespace mtdlab {

using nlohmann::json;

namespace {

int UniformInt(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::vector<bool> Reachable(const Pfa& pfa) {
  std::vector<bool> seen(pfa.n_states, false);
  std::queue<int> q;
  seen[pfa.start_state] = true;
  q.push(pfa.start_state);
  while (!q.empty()) {
    const int s = q.front();
    q.pop();
    for (const auto& e : pfa.transitions[s]) {
      if (!seen[e.next_state]) {
        seen[e.next_state] = true;
        q.push(e.next_state);
      }
    }
  }
  return seen;
}

double Log2Binomial(int n, int k) {
  return (std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0)) / std::log(2.0);
}

}  // namespace

void Pfa::Validate() const {
  if (n_states <= 0 || alphabet_size <= 0) throw InputError("PFA needs states and symbols");
  if (start_state < 0 || start_state >= n_states) throw InputError("PFA start state out of range");
  if (transitions.size() != static_cast<std::size_t>(n_states)) {
    throw InputError("PFA transition table size differs from n_states");
  }
  for (int s = 0; s < n_states; ++s) {
    const auto& out = transitions[s];
    if (out.empty()) throw InputError("PFA state " + std::to_string(s) + " has no edges");
    double sum = 0.0;
    std::set<int> symbols;
    for (const auto& e : out) {
      if (e.symbol < 0 || e.symbol >= alphabet_size) throw InputError("PFA symbol out of range");
      if (e.next_state < 0 || e.next_state >= n_states) throw InputError("PFA target out of range");
      if (!(e.prob > 0.0)) throw InputError("PFA edge probability must be positive");
      if (!symbols.insert(e.symbol).second) throw InputError("PFA state repeats a symbol");
      sum += e.prob;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw InputError("PFA state " + std::to_string(s) + " probabilities sum to " +
                       std::to_string(sum));
    }
  }
  const auto seen = Reachable(*this);
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw InputError("PFA has states unreachable from the start state");
  }
}

double DescriptionLength(const Pfa& pfa) {
  const int n = pfa.n_states;
  std::size_t max_degree = 0;
  for (const auto& out : pfa.transitions) max_degree = std::max(max_degree, out.size());
  const double degree_bits = std::log2(std::max<double>(kPfaMaxOutDegree, max_degree));
  const double edge_bits = std::log2(pfa.alphabet_size) + std::log2(n);
  double bits = std::log2(std::max(kPfaMaxStates, n));
  for (const auto& out : pfa.transitions) {
    const int d = static_cast<int>(out.size());
    const int grid = std::max(16, d);
    bits += degree_bits + d * edge_bits + Log2Binomial(grid - 1, d - 1);
  }
  return bits;
}

Pfa SampleRandomPfa(std::mt19937_64& rng, int alphabet_size) {
  if (alphabet_size < kPfaMaxOutDegree) throw InputError("alphabet smaller than max out-degree");
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::vector<int> symbols(alphabet_size);
  std::iota(symbols.begin(), symbols.end(), 0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Pfa pfa;
    pfa.n_states = UniformInt(rng, kPfaMinStates, kPfaMaxStates);
    pfa.alphabet_size = alphabet_size;
    pfa.transitions.resize(pfa.n_states);
    for (auto& out : pfa.transitions) {
      const int d = UniformInt(rng, 1, kPfaMaxOutDegree);
      std::shuffle(symbols.begin(), symbols.end(), rng);
      std::vector<double> w(d);
      double sum = 0.0;
      for (double& v : w) {
        v = std::max(gamma(rng), 1e-300);
        sum += v;
      }
      for (int i = 0; i < d; ++i) {
        out.push_back({symbols[i], UniformInt(rng, 0, pfa.n_states - 1), w[i] / sum});
      }
      std::sort(out.begin(), out.end(),
                [](const PfaEdge& a, const PfaEdge& b) { return a.symbol < b.symbol; });
    }
    const auto seen = Reachable(pfa);
    if (std::find(seen.begin(), seen.end(), false) == seen.end()) return pfa;
  }
  throw GenerationError("no connected PFA after 10000 draws");
}

std::array<double, kComplexityLevels - 1> ComputeComplexityBinEdges(std::uint64_t seed,
                                                                    int samples) {
  if (samples < kComplexityLevels * 2) throw InputError("too few samples for decile edges");
  std::mt19937_64 rng(seed);
  std::vector<double> dl(samples);
  for (double& v : dl) v = DescriptionLength(SampleRandomPfa(rng));
  std::sort(dl.begin(), dl.end());
  std::array<double, kComplexityLevels - 1> edges{};
  for (int i = 0; i < kComplexityLevels - 1; ++i) {
    const std::size_t k = static_cast<std::size_t>(samples) * (i + 1) / kComplexityLevels;
    edges[i] = 0.5 * (dl[k - 1] + dl[k]);
  }
  return edges;
}

const std::array<double, kComplexityLevels - 1>& ComplexityBinEdges() {
  // ComputeComplexityBinEdges(kBinEdgeReferenceSeed, kBinEdgeReferenceSamples).
  static const std::array<double, kComplexityLevels - 1> edges{
      50.321575831415728, 64.206098613995806, 87.692801278351027,
      112.53490353144292, 139.50182042953594, 171.22459183223478,
      205.46350137368069, 246.71861337059397, 292.74498772449408};
  return edges;
}

int ComplexityLevel(double description_length) {
  const auto& edges = ComplexityBinEdges();
  return 1 + static_cast<int>(std::count_if(edges.begin(), edges.end(),
                                            [&](double e) { return description_length > e; }));
}

Pfa GeneratePfa(int level, std::mt19937_64& rng) {
  if (level < 1 || level > kComplexityLevels) {
    throw InputError("complexity level " + std::to_string(level) + " outside [1, 10]");
  }
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Pfa pfa = SampleRandomPfa(rng);
    if (ComplexityLevel(DescriptionLength(pfa)) == level) return pfa;
  }
  throw GenerationError("no PFA in complexity level " + std::to_string(level) +
                        " after 1000 draws");
}

std::vector<int> SamplePfaSequence(const Pfa& pfa, int length, std::mt19937_64& rng) {
  if (length < 0) throw InputError("negative sequence length");
  std::vector<std::discrete_distribution<int>> pick;
  for (const auto& out : pfa.transitions) {
    std::vector<double> w;
    for (const auto& e : out) w.push_back(e.prob);
    pick.emplace_back(w.begin(), w.end());
  }
  std::vector<int> tokens;
  tokens.reserve(length);
  int state = pfa.start_state;
  for (int i = 0; i < length; ++i) {
    const PfaEdge& e = pfa.transitions[state][pick[state](rng)];
    tokens.push_back(vocab::Symbol(e.symbol));
    state = e.next_state;
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Sequence tasks

const char* TaskName(Task task) {
  switch (task) {
    case Task::kMemorizedSeq: return "memorized_seq";
    case Task::kMemorizedProg: return "memorized_prog";
    case Task::kIcll: return "icll";
    case Task::kRandom: return "random";
    case Task::kCopy: return "copy";
  }
  return "?";
}

Task ParseTask(const std::string& name) {
  for (Task t : kAllTasks) {
    if (name == TaskName(t)) return t;
  }
  throw InputError("unknown task '" + name + "'");
}

TaskAssets MakeTaskAssets(std::uint64_t seed, int seq_len, int n_sequences, int n_pfas) {
  if (seq_len < 2 * kCopyMinWindow + 1) {
    throw InputError("seq_len must leave room for two copy windows");
  }
  TaskAssets a;
  a.seq_len = seq_len;
  a.bin_edges = ComplexityBinEdges();
  std::mt19937_64 rng = DeriveRng({seed, 0xA55E7});
  for (int i = 0; i < n_sequences; ++i) {
    std::vector<int> s(seq_len - 1);
    for (int& t : s) t = vocab::Symbol(UniformInt(rng, 0, vocab::kNumSymbols - 1));
    a.memorized_sequences.push_back(std::move(s));
  }
  for (int i = 0; i < n_pfas; ++i) a.memorized_pfas.push_back(GeneratePfa(1 + i % kComplexityLevels, rng));
  return a;
}

TaskSample MakeTaskSample(Task task, const TaskAssets& assets, std::uint64_t seed,
                          std::uint64_t index) {
  std::mt19937_64 rng = DeriveRng({seed, static_cast<std::uint64_t>(task) + 1, index});
  const int n = assets.seq_len - 1;
  TaskSample s;
  s.task = task;
  s.tokens.push_back(vocab::kBegin);
  auto append = [&](const std::vector<int>& v) { s.tokens.insert(s.tokens.end(), v.begin(), v.end()); };
  auto uniform_symbols = [&](int len) {
    std::vector<int> v(len);
    for (int& t : v) t = vocab::Symbol(UniformInt(rng, 0, vocab::kNumSymbols - 1));
    return v;
  };
  switch (task) {
    case Task::kMemorizedSeq: {
      if (assets.memorized_sequences.empty()) throw ConfigError("no memorized sequences");
      append(assets.memorized_sequences[UniformInt(
          rng, 0, static_cast<int>(assets.memorized_sequences.size()) - 1)]);
      break;
    }
    case Task::kMemorizedProg: {
      if (assets.memorized_pfas.empty()) throw ConfigError("no memorized PFAs");
      const Pfa& pfa = assets.memorized_pfas[UniformInt(
          rng, 0, static_cast<int>(assets.memorized_pfas.size()) - 1)];
      append(SamplePfaSequence(pfa, n, rng));
      s.source_pfa_dl = DescriptionLength(pfa);
      break;
    }
    case Task::kIcll: {
      const int level = UniformInt(rng, 1, kComplexityLevels);
      const Pfa pfa = GeneratePfa(level, rng);
      append(SamplePfaSequence(pfa, n, rng));
      s.complexity_level = level;
      s.source_pfa_dl = DescriptionLength(pfa);
      break;
    }
    case Task::kRandom: append(uniform_symbols(n)); break;
    case Task::kCopy: {
      std::vector<int> v = uniform_symbols(n);
      const int w = UniformInt(rng, kCopyMinWindow, std::min(kCopyMaxWindow, n / 2));
      const int a = UniformInt(rng, 0, n - 2 * w);
      const int b = UniformInt(rng, a + w, n - w);
      std::copy(v.begin() + a, v.begin() + a + w, v.begin() + b);
      append(v);
      break;
    }
  }
  return s;
}

TaskSample MakeMixtureSample(const TaskAssets& assets, std::uint64_t seed, std::uint64_t index) {
  std::mt19937_64 rng = DeriveRng({seed, 0x313, index});
  const Task task = kAllTasks[UniformInt(rng, 0, static_cast<int>(kAllTasks.size()) - 1)];
  return MakeTaskSample(task, assets, seed, index);
}

// ---------------------------------------------------------------------------
// Creativity tasks

const char* CreativeTaskName(CreativeTask task) {
  switch (task) {
    case CreativeTask::kSiblingDiscovery: return "sibling_discovery";
    case CreativeTask::kTriangleDiscovery: return "triangle_discovery";
    case CreativeTask::kCircleConstruction: return "circle_construction";
    case CreativeTask::kLineConstruction: return "line_construction";
  }
  return "?";
}

CreativeTask ParseCreativeTask(const std::string& name) {
  for (CreativeTask t : kAllCreativeTasks) {
    if (name == CreativeTaskName(t)) return t;
  }
  throw InputError("unknown creative task '" + name + "'");
}

bool IsConstruction(CreativeTask task) {
  return task == CreativeTask::kCircleConstruction || task == CreativeTask::kLineConstruction;
}

bool Graph::HasNode(int n) const { return std::find(nodes.begin(), nodes.end(), n) != nodes.end(); }

namespace {

std::vector<int> Wrap(const std::vector<int>& nodes) {
  std::vector<int> t{vocab::kBegin};
  for (int n : nodes) t.push_back(vocab::Node(n));
  t.push_back(vocab::kEnd);
  return t;
}

// Smallest rotation/reflection of a cycle.
std::vector<int> CanonicalCycle(std::vector<int> c) {
  const auto it = std::min_element(c.begin(), c.end());
  std::rotate(c.begin(), it, c.end());
  if (c.size() > 2 && c.back() < c[1]) std::reverse(c.begin() + 1, c.end());
  return c;
}

std::vector<int> CanonicalPath(std::vector<int> p) {
  if (p.front() > p.back()) std::reverse(p.begin(), p.end());
  return p;
}

bool IsSimpleWalk(const Graph& g, const std::vector<int>& v, bool closed) {
  std::set<int> seen(v.begin(), v.end());
  if (seen.size() != v.size()) return false;
  for (int n : v) {
    if (!g.HasNode(n)) return false;
  }
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    if (!g.Adjacent(v[i], v[i + 1])) return false;
  }
  return !closed || g.Adjacent(v.back(), v.front());
}

// Canonical answers (node ids) of a construction prompt.
std::vector<std::vector<int>> EnumerateAnswers(const Graph& g, int len, bool cycle) {
  std::set<std::vector<int>> out;
  std::vector<int> cur;
  std::function<void()> rec = [&]() {
    if (static_cast<int>(cur.size()) == len) {
      if (IsSimpleWalk(g, cur, cycle)) out.insert(cycle ? CanonicalCycle(cur) : CanonicalPath(cur));
      return;
    }
    for (int n : g.nodes) {
      if (std::find(cur.begin(), cur.end(), n) != cur.end()) continue;
      if (!cur.empty() && !g.Adjacent(cur.back(), n)) continue;
      cur.push_back(n);
      rec();
      cur.pop_back();
    }
  };
  rec();
  return {out.begin(), out.end()};
}

std::vector<int> ConstructionItem(const Graph& g, const std::vector<int>& answer) {
  std::vector<int> t = SerializePromptGraph(g);
  for (int n : answer) t.push_back(vocab::Node(n));
  t.push_back(vocab::kEnd);
  return t;
}

}  // namespace

std::vector<int> SerializePromptGraph(const Graph& g) {
  std::vector<int> t{vocab::kBegin};
  for (const auto& [a, b] : g.edges) {
    t.push_back(vocab::kEdge);
    t.push_back(vocab::Node(a));
    t.push_back(vocab::Node(b));
  }
  t.push_back(vocab::kSep);
  return t;
}

std::vector<std::vector<int>> EnumerateValidItems(const CreativeSpec& spec) {
  std::vector<std::vector<int>> items;
  switch (spec.task) {
    case CreativeTask::kSiblingDiscovery: {
      const int n = static_cast<int>(spec.parent_of.size());
      for (int a = 0; a < n; ++a) {
        for (int b = a + 1; b < n; ++b) {
          if (spec.parent_of[a] == spec.parent_of[b]) items.push_back(Wrap({a, b}));
        }
      }
      break;
    }
    case CreativeTask::kTriangleDiscovery: {
      const auto& nodes = spec.graph.nodes;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (std::size_t j = i + 1; j < nodes.size(); ++j) {
          if (!spec.graph.Adjacent(nodes[i], nodes[j])) continue;
          for (std::size_t k = j + 1; k < nodes.size(); ++k) {
            if (spec.graph.Adjacent(nodes[i], nodes[k]) && spec.graph.Adjacent(nodes[j], nodes[k])) {
              items.push_back(Wrap({nodes[i], nodes[j], nodes[k]}));
            }
          }
        }
      }
      break;
    }
    case CreativeTask::kCircleConstruction:
    case CreativeTask::kLineConstruction: {
      const bool cycle = spec.task == CreativeTask::kCircleConstruction;
      std::set<std::vector<int>> seen;
      for (const auto& g : spec.prompts) {
        for (const auto& ans : EnumerateAnswers(g, spec.size.answer_len, cycle)) {
          auto item = ConstructionItem(g, ans);
          if (seen.insert(item).second) items.push_back(std::move(item));
        }
      }
      break;
    }
  }
  return items;
}

std::size_t CreativeSpec::ValidItemCount() const { return EnumerateValidItems(*this).size(); }

Graph SamplePromptGraph(CreativeTask task, const CreativeSizeParams& size, std::mt19937_64& rng) {
  if (!IsConstruction(task)) throw InputError("prompt graphs belong to construction tasks");
  if (size.answer_len < 3 || size.prompt_nodes < size.answer_len || size.prompt_nodes > vocab::kNumNodes) {
    throw InputError("construction world needs 3 <= answer_len <= prompt_nodes <= 64");
  }
  if (size.max_prompt_edges < size.answer_len) throw InputError("max_prompt_edges must be at least answer_len");
  std::bernoulli_distribution edge(size.prompt_edge_prob);
  std::vector<int> labels(vocab::kNumNodes);
  std::iota(labels.begin(), labels.end(), 0);
  while (true) {
    std::shuffle(labels.begin(), labels.end(), rng);
    Graph g;
    g.nodes.assign(labels.begin(), labels.begin() + size.prompt_nodes);
    std::sort(g.nodes.begin(), g.nodes.end());
    std::vector<int> planted(labels.begin(), labels.begin() + size.answer_len);
    auto add = [&](int a, int b) { g.edges.insert({std::min(a, b), std::max(a, b)}); };
    for (int i = 0; i + 1 < size.answer_len; ++i) add(planted[i], planted[i + 1]);
    if (task == CreativeTask::kCircleConstruction) add(planted.back(), planted.front());
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      for (std::size_t j = i + 1; j < g.nodes.size(); ++j) {
        if (edge(rng)) add(g.nodes[i], g.nodes[j]);
      }
    }
    if (static_cast<int>(g.edges.size()) <= size.max_prompt_edges) return g;
  }
}

CreativeSpec MakeCreativeWorld(CreativeTask task, const CreativeSizeParams& size, std::uint64_t seed) {
  std::mt19937_64 rng = DeriveRng({seed, 0xC2EA7, static_cast<std::uint64_t>(task)});
  CreativeSpec spec;
  spec.task = task;
  spec.size = size;
  spec.seed = seed;
  switch (task) {
    case CreativeTask::kSiblingDiscovery: {
      if (size.n_leaves < 2 || size.n_leaves > vocab::kNumNodes || size.n_parents < 1 ||
          size.n_parents > size.n_leaves) {
        throw InputError("sibling world needs 2 <= leaves <= 64 and 1 <= parents <= leaves");
      }
      std::vector<int> leaves(size.n_leaves);
      std::iota(leaves.begin(), leaves.end(), 0);
      std::shuffle(leaves.begin(), leaves.end(), rng);
      spec.parent_of.assign(size.n_leaves, 0);
      for (int i = 0; i < size.n_leaves; ++i) spec.parent_of[leaves[i]] = i % size.n_parents;
      break;
    }
    case CreativeTask::kTriangleDiscovery: {
      if (size.n_graph_nodes < 3 || size.n_graph_nodes > vocab::kNumNodes) {
        throw InputError("triangle world needs 3..64 nodes");
      }
      std::bernoulli_distribution edge(size.edge_prob);
      for (int i = 0; i < size.n_graph_nodes; ++i) spec.graph.nodes.push_back(i);
      for (int a = 0; a < size.n_graph_nodes; ++a) {
        for (int b = a + 1; b < size.n_graph_nodes; ++b) {
          if (edge(rng)) spec.graph.edges.insert({a, b});
        }
      }
      break;
    }
    case CreativeTask::kCircleConstruction:
    case CreativeTask::kLineConstruction: {
      std::set<std::vector<int>> unique_prompts;
      while (static_cast<int>(spec.prompts.size()) < size.n_prompts) {
        Graph g = SamplePromptGraph(task, size, rng);
        if (unique_prompts.insert(SerializePromptGraph(g)).second) spec.prompts.push_back(std::move(g));
      }
      break;
    }
  }
  auto valid = EnumerateValidItems(spec);
  if (valid.empty()) throw GenerationError("creative world has no valid items");
  std::shuffle(valid.begin(), valid.end(), rng);
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(size.train_fraction * valid.size())), 1, valid.size());
  spec.train_set.insert(valid.begin(), valid.begin() + n_train);
  return spec;
}

ItemCheck CheckItem(const CreativeSpec& spec, const std::vector<int>& t) {
  ItemCheck r;
  if (t.size() < 3 || t.front() != vocab::kBegin || t.back() != vocab::kEnd) return r;
  if (std::find(t.begin() + 1, t.end() - 1, vocab::kEnd) != t.end() - 1) return r;
  auto nodes_between = [&](std::size_t from, std::size_t to, std::vector<int>& out) {
    for (std::size_t i = from; i < to; ++i) {
      if (!vocab::IsNode(t[i])) return false;
      out.push_back(t[i] - vocab::kNodeBase);
    }
    return true;
  };
  switch (spec.task) {
    case CreativeTask::kSiblingDiscovery: {
      std::vector<int> v;
      if (t.size() != 4 || !nodes_between(1, 3, v)) return r;
      const int n = static_cast<int>(spec.parent_of.size());
      if (v[0] == v[1] || v[0] >= n || v[1] >= n) return r;
      if (spec.parent_of[v[0]] != spec.parent_of[v[1]]) return r;
      std::sort(v.begin(), v.end());
      r.canonical = Wrap(v);
      break;
    }
    case CreativeTask::kTriangleDiscovery: {
      std::vector<int> v;
      if (t.size() != 5 || !nodes_between(1, 4, v)) return r;
      if (!IsSimpleWalk(spec.graph, v, true)) return r;
      std::sort(v.begin(), v.end());
      r.canonical = Wrap(v);
      break;
    }
    case CreativeTask::kCircleConstruction:
    case CreativeTask::kLineConstruction: {
      const auto sep = std::find(t.begin(), t.end(), vocab::kSep);
      if (sep == t.end()) return r;
      const std::size_t s = static_cast<std::size_t>(sep - t.begin());
      if ((s - 1) % 3 != 0) return r;
      Graph g;
      std::set<int> nodes;
      for (std::size_t i = 1; i < s; i += 3) {
        if (t[i] != vocab::kEdge || !vocab::IsNode(t[i + 1]) || !vocab::IsNode(t[i + 2])) return r;
        const int a = t[i + 1] - vocab::kNodeBase;
        const int b = t[i + 2] - vocab::kNodeBase;
        if (a == b) return r;
        g.edges.insert({std::min(a, b), std::max(a, b)});
        nodes.insert(a);
        nodes.insert(b);
      }
      g.nodes.assign(nodes.begin(), nodes.end());
      std::vector<int> ans;
      if (t.size() - 1 - (s + 1) != static_cast<std::size_t>(spec.size.answer_len)) return r;
      if (!nodes_between(s + 1, t.size() - 1, ans)) return r;
      const bool cycle = spec.task == CreativeTask::kCircleConstruction;
      if (!IsSimpleWalk(g, ans, cycle)) return r;
      r.canonical.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(s) + 1);
      for (int n : cycle ? CanonicalCycle(ans) : CanonicalPath(ans)) r.canonical.push_back(vocab::Node(n));
      r.canonical.push_back(vocab::kEnd);
      break;
    }
  }
  r.valid = true;
  return r;
}

std::vector<int> CreativePrompt(const CreativeSpec& spec, std::uint64_t index) {
  if (!IsConstruction(spec.task)) return {vocab::kBegin};
  std::mt19937_64 rng = DeriveRng({spec.seed, 0xF2E5, index});
  return SerializePromptGraph(SamplePromptGraph(spec.task, spec.size, rng));
}

CreativeExample MakeCreativeExample(const CreativeSpec& spec, std::uint64_t seed,
                                    std::uint64_t index) {
  std::mt19937_64 rng = DeriveRng({seed, 0xC4EA, index});
  std::bernoulli_distribution coin;
  CreativeExample ex;
  if (spec.task == CreativeTask::kTriangleDiscovery && coin(rng)) {
    auto it = spec.graph.edges.begin();
    std::advance(it, UniformInt(rng, 0, static_cast<int>(spec.graph.edges.size()) - 1));
    auto [a, b] = *it;
    if (coin(rng)) std::swap(a, b);
    ex.tokens = {vocab::kBegin, vocab::kEdge, vocab::Node(a), vocab::Node(b), vocab::kEnd};
    return ex;
  }
  auto it = spec.train_set.begin();
  std::advance(it, UniformInt(rng, 0, static_cast<int>(spec.train_set.size()) - 1));
  std::vector<int> item = *it;
  if (!IsConstruction(spec.task)) {
    std::shuffle(item.begin() + 1, item.end() - 1, rng);
    ex.tokens = std::move(item);
    return ex;
  }
  const auto sep = static_cast<std::size_t>(std::find(item.begin(), item.end(), vocab::kSep) - item.begin());
  auto first = item.begin() + static_cast<std::ptrdiff_t>(sep) + 1;
  auto last = item.end() - 1;
  if (spec.task == CreativeTask::kCircleConstruction) {
    std::rotate(first, first + UniformInt(rng, 0, static_cast<int>(last - first) - 1), last);
  }
  if (coin(rng)) std::reverse(first, last);
  ex.tokens = std::move(item);
  ex.loss_mask.assign(ex.tokens.size(), 0);
  std::fill(ex.loss_mask.begin() + static_cast<std::ptrdiff_t>(sep) + 1, ex.loss_mask.end(), 1);
  return ex;
}

int CreativeMaxItemLen(const CreativeSpec& spec) {
  switch (spec.task) {
    case CreativeTask::kSiblingDiscovery: return 4;
    case CreativeTask::kTriangleDiscovery: return 5;
    default: break;
  }
  // BEGIN, three tokens per edge, SEP, answer, END.
  return 3 * spec.size.max_prompt_edges + 2 + spec.size.answer_len + 1;
}

CreativityScores ScoreItems(const CreativeSpec& spec, const std::vector<std::vector<int>>& items) {
  CreativityScores s;
  s.n_items = items.size();
  std::set<std::vector<int>> unique;
  for (const auto& item : items) {
    ItemCheck c = CheckItem(spec, item);
    if (!c.valid) continue;
    ++s.n_valid;
    unique.insert(std::move(c.canonical));
  }
  s.n_unique = unique.size();
  for (const auto& u : unique) {
    if (!spec.train_set.contains(u)) ++s.n_novel;
  }
  auto frac = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / b; };
  s.validity = frac(s.n_valid, s.n_items);
  s.uniqueness = frac(s.n_unique, s.n_valid);
  s.novelty = frac(s.n_novel, s.n_unique);
  s.creativity = frac(s.n_novel, s.n_items);
  return s;
}

// ---------------------------------------------------------------------------
// JSON

json PfaToJson(const Pfa& pfa) {
  json t = json::array();
  for (const auto& out : pfa.transitions) {
    json row = json::array();
    for (const auto& e : out) row.push_back({{"symbol", e.symbol}, {"next", e.next_state}, {"prob", e.prob}});
    t.push_back(std::move(row));
  }
  return {{"n_states", pfa.n_states},
          {"start_state", pfa.start_state},
          {"alphabet_size", pfa.alphabet_size},
          {"transitions", std::move(t)}};
}

Pfa PfaFromJson(const json& j) {
  Pfa pfa;
  pfa.n_states = j.at("n_states").get<int>();
  pfa.start_state = j.at("start_state").get<int>();
  pfa.alphabet_size = j.at("alphabet_size").get<int>();
  for (const auto& row : j.at("transitions")) {
    std::vector<PfaEdge> out;
    for (const auto& e : row) {
      out.push_back({e.at("symbol").get<int>(), e.at("next").get<int>(), e.at("prob").get<double>()});
    }
    pfa.transitions.push_back(std::move(out));
  }
  pfa.Validate();
  return pfa;
}

json AssetsToJson(const TaskAssets& a) {
  json pfas = json::array();
  for (const auto& p : a.memorized_pfas) pfas.push_back(PfaToJson(p));
  return {{"seq_len", a.seq_len},
          {"memorized_sequences", a.memorized_sequences},
          {"memorized_pfas", std::move(pfas)},
          {"bin_edges", a.bin_edges}};
}

TaskAssets AssetsFromJson(const json& j) {
  TaskAssets a;
  a.seq_len = j.at("seq_len").get<int>();
  a.memorized_sequences = j.at("memorized_sequences").get<std::vector<std::vector<int>>>();
  for (const auto& p : j.at("memorized_pfas")) a.memorized_pfas.push_back(PfaFromJson(p));
  a.bin_edges = j.at("bin_edges").get<std::array<double, kComplexityLevels - 1>>();
  return a;
}

namespace {

json GraphToJson(const Graph& g) {
  json edges = json::array();
  for (const auto& [a, b] : g.edges) edges.push_back({a, b});
  return {{"nodes", g.nodes}, {"edges", std::move(edges)}};
}

Graph GraphFromJson(const json& j) {
  Graph g;
  g.nodes = j.at("nodes").get<std::vector<int>>();
  for (const auto& e : j.at("edges")) g.edges.insert({e.at(0).get<int>(), e.at(1).get<int>()});
  return g;
}

}  // namespace

json CreativeSpecToJson(const CreativeSpec& spec) {
  const auto& s = spec.size;
  json prompts = json::array();
  for (const auto& g : spec.prompts) prompts.push_back(GraphToJson(g));
  return {{"task", CreativeTaskName(spec.task)},
          {"size",
           {{"n_leaves", s.n_leaves},
            {"n_parents", s.n_parents},
            {"n_graph_nodes", s.n_graph_nodes},
            {"edge_prob", s.edge_prob},
            {"n_prompts", s.n_prompts},
            {"prompt_nodes", s.prompt_nodes},
            {"prompt_edge_prob", s.prompt_edge_prob},
            {"max_prompt_edges", s.max_prompt_edges},
            {"answer_len", s.answer_len},
            {"train_fraction", s.train_fraction}}},
          {"seed", spec.seed},
          {"parent_of", spec.parent_of},
          {"graph", GraphToJson(spec.graph)},
          {"prompts", std::move(prompts)},
          {"train_set", spec.train_set}};
}

CreativeSpec CreativeSpecFromJson(const json& j) {
  CreativeSpec spec;
  spec.task = ParseCreativeTask(j.at("task").get<std::string>());
  const auto& s = j.at("size");
  spec.size.n_leaves = s.at("n_leaves").get<int>();
  spec.size.n_parents = s.at("n_parents").get<int>();
  spec.size.n_graph_nodes = s.at("n_graph_nodes").get<int>();
  spec.size.edge_prob = s.at("edge_prob").get<double>();
  spec.size.n_prompts = s.at("n_prompts").get<int>();
  spec.size.prompt_nodes = s.at("prompt_nodes").get<int>();
  spec.size.prompt_edge_prob = s.at("prompt_edge_prob").get<double>();
  spec.size.max_prompt_edges = s.at("max_prompt_edges").get<int>();
  spec.size.answer_len = s.at("answer_len").get<int>();
  spec.size.train_fraction = s.at("train_fraction").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.parent_of = j.at("parent_of").get<std::vector<int>>();
  spec.graph = GraphFromJson(j.at("graph"));
  for (const auto& g : j.at("prompts")) spec.prompts.push_back(GraphFromJson(g));
  for (const auto& item : j.at("train_set")) spec.train_set.insert(item.get<std::vector<int>>());
  return spec;
}

}  // namespace mtdlab
