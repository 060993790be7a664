#pragma once

// Synthetic data: probabilistic finite automata, the five sequence tasks and
// the four creativity tasks, all sharing one frozen vocabulary.
//
// Vocabulary (84 tokens):
//   0 BEGIN, 1 SEP, 2 END, 3 EDGE,
//   4..19  PFA symbols 0..15,
//   20..83 node ids 0..63.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace mtdlab {

namespace vocab {
inline constexpr int kBegin = 0;
inline constexpr int kSep = 1;
inline constexpr int kEnd = 2;
inline constexpr int kEdge = 3;
inline constexpr int kSymbolBase = 4;
inline constexpr int kNumSymbols = 16;
inline constexpr int kNodeBase = kSymbolBase + kNumSymbols;
inline constexpr int kNumNodes = 64;
inline constexpr int kSize = kNodeBase + kNumNodes;

inline int Symbol(int s) { return kSymbolBase + s; }
inline int Node(int n) { return kNodeBase + n; }
inline bool IsNode(int tok) { return tok >= kNodeBase && tok < kSize; }
}  // namespace vocab

// ---------------------------------------------------------------------------
// Probabilistic finite automata

struct PfaEdge {
  int symbol = 0;
  int next_state = 0;
  double prob = 0.0;

  bool operator==(const PfaEdge&) const = default;
};

struct Pfa {
  int n_states = 0;
  int start_state = 0;
  int alphabet_size = vocab::kNumSymbols;
  std::vector<std::vector<PfaEdge>> transitions;

  // Throws InputError on a broken invariant (probabilities, ranges,
  // reachability, repeated symbols within a state).
  void Validate() const;
  bool operator==(const Pfa&) const = default;
};

inline constexpr int kPfaMinStates = 2;
inline constexpr int kPfaMaxStates = 12;
inline constexpr int kPfaMaxOutDegree = 4;
inline constexpr int kComplexityLevels = 10;

// Bits under a fixed two-part code:
//   log2(max(12, n))                                   number of states
//   + sum over states [ log2(max(4, D))                out-degree, D = max out-degree
//                       + d * (log2 A + log2 n)        symbol and target per edge
//                       + log2 C(G - 1, d - 1) ]       probabilities on a 1/G grid, G = max(16, d)
double DescriptionLength(const Pfa& pfa);

// Unconditioned draw: n ~ U[2, 12], out-degree ~ U[1, 4] with distinct
// symbols, uniform targets, Dirichlet(1) probabilities; redrawn until every
// state is reachable from state 0.
Pfa SampleRandomPfa(std::mt19937_64& rng, int alphabet_size = vocab::kNumSymbols);

// Upper edges of complexity levels 1..9 (level 10 is open): deciles of
// DescriptionLength over 10k SampleRandomPfa draws from a reference seed.
const std::array<double, kComplexityLevels - 1>& ComplexityBinEdges();
inline constexpr std::uint64_t kBinEdgeReferenceSeed = 20240611;
inline constexpr int kBinEdgeReferenceSamples = 10000;
// Recomputes the edges from scratch (used to freeze and to test them).
std::array<double, kComplexityLevels - 1> ComputeComplexityBinEdges(std::uint64_t seed,
                                                                    int samples);
int ComplexityLevel(double description_length);

// A PFA whose description length falls in the level's bin; throws
// GenerationError after 1000 rejected draws.
Pfa GeneratePfa(int level, std::mt19937_64& rng);

// `length` emitted symbols (as vocabulary tokens) of a random walk from the
// start state.
std::vector<int> SamplePfaSequence(const Pfa& pfa, int length, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Sequence tasks

enum class Task { kMemorizedSeq, kMemorizedProg, kIcll, kRandom, kCopy };
inline constexpr std::array<Task, 5> kAllTasks{Task::kMemorizedSeq, Task::kMemorizedProg,
                                               Task::kIcll, Task::kRandom, Task::kCopy};
const char* TaskName(Task task);
Task ParseTask(const std::string& name);

struct TaskSample {
  std::vector<int> tokens;
  Task task = Task::kRandom;
  std::optional<int> complexity_level;  // ICLL only
  std::optional<double> source_pfa_dl;  // PFA-backed tasks
};

struct TaskAssets {
  int seq_len = 64;  // tokens per sample, BEGIN included
  std::vector<std::vector<int>> memorized_sequences;
  std::vector<Pfa> memorized_pfas;
  std::array<double, kComplexityLevels - 1> bin_edges{};
};

// Ten memorized sequences and ten memorized PFAs (one per complexity level).
TaskAssets MakeTaskAssets(std::uint64_t seed, int seq_len, int n_sequences = 10, int n_pfas = 10);

// Deterministic in (task, assets, seed, index).
TaskSample MakeTaskSample(Task task, const TaskAssets& assets, std::uint64_t seed,
                          std::uint64_t index);
// Uniform mixture over the five tasks.
TaskSample MakeMixtureSample(const TaskAssets& assets, std::uint64_t seed, std::uint64_t index);

// Infinite stream view over MakeTaskSample.
class TaskStream {
 public:
  TaskStream(Task task, const TaskAssets& assets, std::uint64_t seed)
      : task_(task), assets_(&assets), seed_(seed) {}
  TaskSample Next() { return At(next_++); }
  TaskSample At(std::uint64_t index) const { return MakeTaskSample(task_, *assets_, seed_, index); }

 private:
  Task task_;
  const TaskAssets* assets_;
  std::uint64_t seed_;
  std::uint64_t next_ = 0;
};

// Copy-task window bounds.
inline constexpr int kCopyMinWindow = 8;
inline constexpr int kCopyMaxWindow = 16;

// ---------------------------------------------------------------------------
// Creativity tasks

enum class CreativeTask { kSiblingDiscovery, kTriangleDiscovery, kCircleConstruction, kLineConstruction };
inline constexpr std::array<CreativeTask, 4> kAllCreativeTasks{
    CreativeTask::kSiblingDiscovery, CreativeTask::kTriangleDiscovery,
    CreativeTask::kCircleConstruction, CreativeTask::kLineConstruction};
const char* CreativeTaskName(CreativeTask task);
CreativeTask ParseCreativeTask(const std::string& name);
bool IsConstruction(CreativeTask task);

// Undirected simple graph over node ids.
struct Graph {
  std::vector<int> nodes;
  std::set<std::pair<int, int>> edges;  // (min, max)

  bool Adjacent(int a, int b) const { return edges.contains({std::min(a, b), std::max(a, b)}); }
  bool HasNode(int n) const;
  bool operator==(const Graph&) const = default;
};

struct CreativeSizeParams {
  // Discovery.
  int n_leaves = 64;
  int n_parents = 16;
  int n_graph_nodes = 24;
  double edge_prob = 0.3;
  // Construction.
  int n_prompts = 48;
  int prompt_nodes = 8;
  double prompt_edge_prob = 0.2;
  int max_prompt_edges = 16;  // denser prompt graphs are redrawn
  int answer_len = 4;
  // Fraction of valid items placed in the training set.
  double train_fraction = 0.5;
};

struct CreativeSpec {
  CreativeTask task = CreativeTask::kSiblingDiscovery;
  CreativeSizeParams size;
  std::uint64_t seed = 0;
  std::vector<int> parent_of;  // sibling discovery
  Graph graph;                 // triangle discovery
  std::vector<Graph> prompts;  // construction training pool
  std::set<std::vector<int>> train_set;  // canonical token sequences

  std::size_t ValidItemCount() const;
};

CreativeSpec MakeCreativeWorld(CreativeTask task, const CreativeSizeParams& size, std::uint64_t seed);

// Every valid item in canonical form.
std::vector<std::vector<int>> EnumerateValidItems(const CreativeSpec& spec);

struct ItemCheck {
  bool valid = false;
  std::vector<int> canonical;  // set when valid
};
// Parses a full item (BEGIN ... END). Malformed items are invalid.
ItemCheck CheckItem(const CreativeSpec& spec, const std::vector<int>& tokens);

// Generation prompt for item `index`: BEGIN for discovery; for construction a
// fresh prompt graph drawn from (spec.seed, index), serialized and followed by
// SEP. Training uses the pool in spec.prompts.
std::vector<int> CreativePrompt(const CreativeSpec& spec, std::uint64_t index);
Graph SamplePromptGraph(CreativeTask task, const CreativeSizeParams& size, std::mt19937_64& rng);
std::vector<int> SerializePromptGraph(const Graph& g);

// Training sequence at a global index: a training-set item with its node
// order randomized (triangle discovery also mixes in edge facts
// BEGIN EDGE u v END). Construction masks the loss to the answer and END.
struct CreativeExample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;
};
CreativeExample MakeCreativeExample(const CreativeSpec& spec, std::uint64_t seed, std::uint64_t index);
// Longest item any example or generation can produce.
int CreativeMaxItemLen(const CreativeSpec& spec);

struct CreativityScores {
  double validity = 0.0;
  double uniqueness = 0.0;
  double novelty = 0.0;
  double creativity = 0.0;
  std::size_t n_items = 0;
  std::size_t n_valid = 0;
  std::size_t n_unique = 0;
  std::size_t n_novel = 0;
};
// validity = valid / n; uniqueness = distinct valid / valid;
// novelty = distinct valid outside train_set / distinct valid;
// creativity = distinct valid novel / n. Empty denominators give 0.
CreativityScores ScoreItems(const CreativeSpec& spec, const std::vector<std::vector<int>>& items);

// ---------------------------------------------------------------------------
// JSON

nlohmann::json PfaToJson(const Pfa& pfa);
Pfa PfaFromJson(const nlohmann::json& j);
nlohmann::json AssetsToJson(const TaskAssets& assets);
TaskAssets AssetsFromJson(const nlohmann::json& j);
nlohmann::json CreativeSpecToJson(const CreativeSpec& spec);
CreativeSpec CreativeSpecFromJson(const nlohmann::json& j);

}  // namespace mtdlab
