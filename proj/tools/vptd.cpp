// vptd: command-line front end for the token-clustering and decontamination
// pipeline. Every subcommand prints one JSON summary line on stdout.

#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "vptd/vptd.hpp"

namespace {

using nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- flag / config / preset binding ------------------------------------------

template <class T>
std::optional<T> from_node(const toml::node& n) {
  if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = n.value<std::string>()) return *v;
    return std::nullopt;
  } else if constexpr (std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<std::uint32_t>>) {
    const auto* arr = n.as_array();
    if (!arr) return std::nullopt;
    T out;
    for (const auto& el : *arr) {
      auto v = from_node<typename T::value_type>(el);
      if (!v) return std::nullopt;
      out.push_back(*v);
    }
    return out;
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = n.value<double>()) return static_cast<T>(*v);
    return std::nullopt;
  } else {
    auto v = n.value<std::int64_t>();
    if (!v || *v < 0 || static_cast<std::uint64_t>(*v) > std::numeric_limits<T>::max()) return std::nullopt;
    return static_cast<T>(*v);
  }
}

struct Binding {
  CLI::App* app;
  CLI::Option* opt;
  std::string section;
  std::string key;
  std::function<bool(const toml::node&)> from_config;
  std::function<void(const vptd::ModelPreset&)> from_preset;
};

class Cli {
 public:
  template <class T>
  CLI::Option* bind(CLI::App* app, const std::string& flag, T& var, std::string section, std::string key,
                    const std::string& help, std::function<T(const vptd::ModelPreset&)> preset = {}) {
    CLI::Option* opt = app->add_option(flag, var, help);
    if constexpr (!std::is_same_v<T, std::vector<std::string>> && !std::is_same_v<T, std::vector<std::uint32_t>>) {
      opt->capture_default_str();
    }
    Binding b{app, opt, std::move(section), std::move(key), [&var](const toml::node& n) {
                if (auto v = from_node<T>(n)) {
                  var = *v;
                  return true;
                }
                return false;
              }, {}};
    if (preset) b.from_preset = [&var, preset](const vptd::ModelPreset& p) { var = preset(p); };
    bindings_.push_back(std::move(b));
    return opt;
  }

  /// Fills every flag of `app` that was not given on the command line, first
  /// from the preset and then from the config file.
  void resolve(CLI::App* app, const std::string& config_path, const std::string& preset_name) {
    toml::table config;
    if (!config_path.empty()) {
      try {
        config = toml::parse_file(config_path);
      } catch (const toml::parse_error& e) {
        throw vptd::Error(vptd::ErrorKind::InvalidConfig,
                          config_path + ": " + std::string(e.description()));
      }
      check_known_keys(config, config_path);
    }
    std::string preset = preset_name;
    if (preset.empty()) {
      if (auto v = config["vtd"]["preset"].value<std::string>()) preset = *v;
    }
    std::optional<vptd::ModelPreset> p;
    if (!preset.empty()) {
      p = vptd::find_preset(preset);
      if (!p) throw UsageError("--preset: unknown preset '" + preset + "'");
    }
    for (auto& b : bindings_) {
      if (b.app != app || b.opt->count() > 0) continue;
      if (p && b.from_preset) b.from_preset(*p);
      const toml::node* n = b.section.empty() ? config.get(b.key) : config[b.section][b.key].node();
      if (n && !b.from_config(*n)) {
        throw vptd::Error(vptd::ErrorKind::InvalidConfig,
                          config_path + ": " + qualified(b) + " has the wrong type or range");
      }
    }
  }

 private:
  static std::string qualified(const Binding& b) { return b.section.empty() ? b.key : b.section + "." + b.key; }

  void check_known_keys(const toml::table& config, const std::string& path) const {
    auto known = [&](const std::string& section, const std::string& key) {
      if (section == "vtd" && key == "preset") return true;
      for (const auto& b : bindings_)
        if (b.section == section && b.key == key) return true;
      return false;
    };
    for (const auto& [k, v] : config) {
      const std::string key(k.str());
      if (const auto* sub = v.as_table()) {
        for (const auto& [k2, _] : *sub) {
          if (!known(key, std::string(k2.str())))
            throw vptd::Error(vptd::ErrorKind::InvalidConfig, path + ": unknown key " + key + "." + std::string(k2.str()));
        }
      } else if (!known("", key)) {
        throw vptd::Error(vptd::ErrorKind::InvalidConfig, path + ": unknown key " + key);
      }
    }
  }

  std::vector<Binding> bindings_;
};

void require(const std::string& value, const std::string& flag, const std::string& config_key) {
  if (value.empty()) throw UsageError(flag + " is required (or set " + config_key + " in the config file)");
}

void emit(const ordered_json& summary) { std::cout << summary.dump() << std::endl; }

void setup_logging() {
  auto logger = spdlog::stderr_color_st("vptd");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("VPTD_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
  if (env && level != "error" && level != "info" && level != "debug") {
    spdlog::warn("VPTD_LOG={} not recognized, using info", level);
  }
}

vptd::Corpus load_corpus_for(const std::string& path, std::uint32_t vocab_size, const std::string& codebook_path) {
  std::optional<std::uint32_t> declared;
  if (vocab_size) declared = vocab_size;
  else if (!codebook_path.empty()) declared = vptd::load_codebook(codebook_path).size();
  return vptd::load_corpus(path, declared);
}

const vptd::TokenGrid& find_grid(const vptd::Corpus& corpus, const std::string& image_id) {
  if (corpus.records.empty()) throw vptd::Error(vptd::ErrorKind::MalformedRecord, "corpus is empty");
  if (image_id.empty()) return corpus.records.front();
  for (const auto& g : corpus.records)
    if (g.image_id == image_id) return g;
  throw vptd::Error(vptd::ErrorKind::MalformedRecord, "no record with image_id " + image_id);
}

std::set<std::string> read_label_list(const std::string& path) {
  std::set<std::string> out;
  std::istringstream in(vptd::io::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"vptd: visual-prior token clustering, hallucination analysis and decontamination"};
  app.require_subcommand(1);
  Cli cli;

  struct Common {
    std::string config;
    std::string preset;
    std::uint64_t seed = 0;
    unsigned threads = 1;
  };
  std::map<CLI::App*, Common> common;
  auto add_common = [&](CLI::App* sub) {
    Common& c = common[sub];
    sub->add_option("--config", c.config, "TOML config file; flags override its values");
    cli.bind(sub, "--seed", c.seed, "", "seed", "Top-level seed");
    cli.bind(sub, "--threads", c.threads, "", "threads", "Worker threads (results do not depend on it)");
    sub->add_option("--preset", c.preset, "Model preset: chameleon-7b, janus-pro-7b or emu3-13b");
  };

  // gen-corpus
  vptd::SyntheticSpec spec;
  vptd::HallucinationSimSpec sim;
  std::string gen_corpus, gen_codebook, gen_truth, gen_records;
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus with planted token groups");
  add_common(gen);
  cli.bind(gen, "--out-corpus", gen_corpus, "paths", "corpus", "Output corpus (JSONL)");
  cli.bind(gen, "--out-codebook", gen_codebook, "paths", "codebook", "Output codebook (CGCB)");
  cli.bind(gen, "--out-truth", gen_truth, "paths", "truth", "Output planted truth (JSON)");
  cli.bind(gen, "--out-records", gen_records, "paths", "records", "Optional simulated hallucination records (JSONL)");
  cli.bind(gen, "--vocab-size", spec.vocab_size, "corpus", "vocab_size", "Vocabulary size");
  cli.bind(gen, "--groups", spec.n_groups, "corpus", "n_groups", "Planted groups (the last is background)");
  cli.bind(gen, "--images", spec.n_images, "corpus", "n_images", "Number of images");
  cli.bind(gen, "--grid-h", spec.grid_h, "corpus", "grid_h", "Grid height");
  cli.bind(gen, "--grid-w", spec.grid_w, "corpus", "grid_w", "Grid width");
  cli.bind(gen, "--objects", spec.objects_per_image, "corpus", "objects_per_image", "Objects per image");
  cli.bind(gen, "--noise", spec.noise_rate, "corpus", "noise_rate", "Background noise rate");
  cli.bind(gen, "--codebook-dim", spec.codebook_dim, "corpus", "codebook_dim", "Codebook dimension");
  cli.bind(gen, "--labels-per-group", spec.labels_per_group, "corpus", "labels_per_group", "Object labels per group");
  cli.bind(gen, "--min-object", spec.min_object_size, "corpus", "min_object_size", "Min object side (0 = auto)");
  cli.bind(gen, "--max-object", spec.max_object_size, "corpus", "max_object_size", "Max object side (0 = auto)");
  cli.bind(gen, "--object-token-fraction", spec.object_token_fraction, "corpus", "object_token_fraction",
           "Fraction of a group's tokens one object draws from");
  cli.bind(gen, "--prior-rate", sim.prior_rate, "corpus", "prior_rate", "Co-occurrence hallucination rate");
  cli.bind(gen, "--random-rate", sim.random_rate, "corpus", "random_rate", "Random hallucination rate");

  // build-graph
  std::string bg_corpus, bg_codebook, bg_out;
  std::uint32_t bg_vocab = 0;
  double retention = 0.1;
  vptd::GraphBuildOptions graph_opt;
  std::vector<std::string> excluded;
  auto* bg = app.add_subcommand("build-graph", "Count token co-occurrences and keep the strongest pairs");
  add_common(bg);
  cli.bind(bg, "--corpus", bg_corpus, "paths", "corpus", "Input corpus (JSONL)");
  cli.bind(bg, "--codebook", bg_codebook, "paths", "codebook", "Codebook whose row count fixes |V|");
  cli.bind(bg, "--vocab-size", bg_vocab, "graph", "vocab_size", "|V| (0 = codebook rows or max token + 1)");
  cli.bind(bg, "--out", bg_out, "paths", "graph", "Output graph (CGCG)");
  cli.bind(bg, "--block-h", graph_opt.block_h, "graph", "block_h", "Block height");
  cli.bind(bg, "--block-w", graph_opt.block_w, "graph", "block_w", "Block width");
  cli.bind(bg, "--retention", retention, "graph", "retention", "Fraction of pairs kept as edges");
  cli.bind(bg, "--exclude", excluded, "graph", "excluded_labels", "Segment labels ignored for segment pairs");

  // train
  vptd::GnnConfig gnn;
  std::string tr_graph, tr_codebook, tr_out;
  auto* tr = app.add_subcommand("train", "Train GNN node embeddings on the co-occurrence graph");
  add_common(tr);
  cli.bind(tr, "--graph", tr_graph, "paths", "graph", "Input graph (CGCG)");
  cli.bind(tr, "--codebook", tr_codebook, "paths", "codebook", "Input codebook (CGCB)");
  cli.bind(tr, "--out", tr_out, "paths", "embeddings", "Output embeddings (CGCE)");
  cli.bind<std::uint32_t>(tr, "--d-codebook", gnn.d_codebook, "train", "d_codebook", "Codebook dimension",
                          [](const auto& p) { return p.d_codebook; });
  cli.bind<std::uint32_t>(tr, "--d-hidden", gnn.d_hidden, "train", "d_hidden", "Hidden dimension",
                          [](const auto& p) { return p.d_hidden; });
  cli.bind<std::uint32_t>(tr, "--d-out", gnn.d_out, "train", "d_out", "Output dimension",
                          [](const auto& p) { return p.d_out; });
  cli.bind(tr, "--layers", gnn.n_layers, "train", "n_layers", "GNN layers");
  cli.bind(tr, "--heads", gnn.n_heads, "train", "n_heads", "Attention heads");
  cli.bind(tr, "--dropout", gnn.dropout, "train", "dropout", "Feature dropout");
  cli.bind(tr, "--edge-dropout", gnn.edge_dropout, "train", "edge_dropout", "Edge dropout");
  cli.bind(tr, "--lr", gnn.lr, "train", "lr", "Peak learning rate");
  cli.bind(tr, "--weight-decay", gnn.weight_decay, "train", "weight_decay", "AdamW weight decay");
  cli.bind(tr, "--max-grad-norm", gnn.max_grad_norm, "train", "max_grad_norm", "Gradient clipping norm");
  cli.bind(tr, "--batch-size", gnn.batch_size, "train", "batch_size", "Nodes per batch");
  cli.bind(tr, "--neighbors", gnn.neighbor_sizes, "train", "neighbor_sizes", "Neighbors sampled per hop");
  cli.bind(tr, "--epochs", gnn.epochs, "train", "epochs", "Maximum epochs");
  cli.bind(tr, "--patience", gnn.patience, "train", "patience", "Early-stopping patience");
  cli.bind(tr, "--min-improvement", gnn.min_improvement, "train", "min_improvement", "Early-stopping threshold");
  cli.bind(tr, "--warmup", gnn.warmup_fraction, "train", "warmup_fraction", "Warmup fraction of steps");
  cli.bind(tr, "--tau0", gnn.tau0, "train", "tau0", "Initial temperature");
  cli.bind(tr, "--beta", gnn.beta, "train", "beta", "Positive-pair similarity scale");

  // cluster
  std::string cl_emb, cl_out, cl_truth;
  std::uint32_t cluster_size = 10, max_iter = 100;
  auto* cl = app.add_subcommand("cluster", "Balanced K-means over node embeddings");
  add_common(cl);
  cli.bind(cl, "--embeddings", cl_emb, "paths", "embeddings", "Input embeddings (CGCE or CGCB)");
  cli.bind(cl, "--out", cl_out, "paths", "clustering", "Output assignment CSV");
  cli.bind(cl, "--truth", cl_truth, "paths", "truth", "Optional planted truth for ARI");
  cli.bind<std::uint32_t>(cl, "--cluster-size", cluster_size, "cluster", "cluster_size", "Tokens per cluster",
                          [](const auto& p) { return p.cluster_size; });
  cli.bind(cl, "--max-iter", max_iter, "cluster", "max_iter", "Maximum K-means iterations");

  // analyze-hitrate
  std::string hr_records, hr_grids, hr_masks, hr_clustering, hr_group;
  std::uint32_t hr_k = 5, hr_vocab = 0;
  std::vector<std::string> hr_excluded;
  auto* hr = app.add_subcommand("analyze-hitrate", "HitRate@K of hallucinated objects per token group");
  add_common(hr);
  cli.bind(hr, "--records", hr_records, "paths", "records", "Hallucination records (JSONL)");
  cli.bind(hr, "--grids", hr_grids, "paths", "corpus", "Token grids of the evaluated images (JSONL)");
  cli.bind(hr, "--masks", hr_masks, "paths", "masks", "Segmented corpus for associations (default: --grids)");
  cli.bind(hr, "--clustering", hr_clustering, "paths", "clustering", "Cluster assignment CSV");
  cli.bind(hr, "--vocab-size", hr_vocab, "analysis", "vocab_size", "|V| (0 = cluster assignment length)");
  cli.bind(hr, "--k", hr_k, "analysis", "k", "Top-K objects");
  cli.bind(hr, "--group", hr_group, "analysis", "group", "C1, C2 or C3 (default: all three)")
      ->check(CLI::IsMember({"", "C1", "C2", "C3"}));
  cli.bind(hr, "--exclude", hr_excluded, "analysis", "excluded_labels", "Labels ignored in associations");

  // metrics
  std::string mt_records, mt_targets;
  double mt_f1 = -1.0;
  auto* mt = app.add_subcommand("metrics", "CHAIR, Cover, Hal, Cog, AMBER score, CHAIR-s and CHAIR-i");
  add_common(mt);
  cli.bind(mt, "--records", mt_records, "paths", "records", "Hallucination records (JSONL)");
  cli.bind(mt, "--targets", mt_targets, "paths", "targets", "Hallucinatory target labels, one per line");
  cli.bind(mt, "--f1", mt_f1, "metrics", "f1", "External F1 fraction for the AMBER score (< 0 = omit)");

  // plan-edit
  std::string pe_corpus, pe_clustering, pe_image, pe_out, pe_tag;
  std::uint32_t pe_layer = 0, pe_n = 1;
  double pe_gamma = 0.0;
  auto* pe = app.add_subcommand("plan-edit", "Write the decontamination plan for one image");
  add_common(pe);
  cli.bind(pe, "--corpus", pe_corpus, "paths", "corpus", "Token grids (JSONL)");
  cli.bind(pe, "--clustering", pe_clustering, "paths", "clustering", "Cluster assignment CSV");
  cli.bind(pe, "--image-id", pe_image, "vtd", "image_id", "Image to plan for (default: first record)");
  cli.bind(pe, "--out", pe_out, "paths", "plan", "Output plan (JSON)");
  cli.bind(pe, "--model-tag", pe_tag, "vtd", "model_tag", "Tag recorded in the plan (default: preset name)");
  cli.bind<std::uint32_t>(pe, "--layer", pe_layer, "vtd", "layer", "Target layer",
                          [](const auto& p) { return p.layer; });
  cli.bind<double>(pe, "--gamma", pe_gamma, "vtd", "gamma", "Edit strength", [](const auto& p) { return p.gamma; });
  cli.bind<std::uint32_t>(pe, "--n-dominant", pe_n, "vtd", "n_dominant", "Dominant clusters used",
                          [](const auto& p) { return p.n_dominant; });

  // apply-edit
  std::string ae_plan, ae_hidden, ae_table, ae_out;
  auto* ae = app.add_subcommand("apply-edit", "Apply a plan to a hidden-state matrix");
  add_common(ae);
  cli.bind(ae, "--plan", ae_plan, "paths", "plan", "Edit plan (JSON)");
  cli.bind(ae, "--hidden", ae_hidden, "paths", "hidden", "Hidden states (CGCH)");
  cli.bind(ae, "--table", ae_table, "paths", "table", "Embedding table (CGCB or CGCE)");
  cli.bind(ae, "--out", ae_out, "paths", "edited", "Output hidden states (CGCH)");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    bool known = false;
    for (const auto* s : app.get_subcommands({})) known |= s->get_name() == name;
    if (!known) {
      std::cerr << "unknown subcommand '" << name << "'\nRun with --help for more information.\n";
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const Common& c = common[sub];
  try {
    cli.resolve(sub, c.config, c.preset);

    if (sub == gen) {
      require(gen_corpus, "--out-corpus", "paths.corpus");
      require(gen_codebook, "--out-codebook", "paths.codebook");
      auto data = vptd::generate_synthetic_corpus(spec, c.seed);
      vptd::save_corpus(gen_corpus, data.corpus);
      vptd::save_codebook(gen_codebook, data.codebook);
      if (!gen_truth.empty()) vptd::io::write_file(gen_truth, vptd::truth_to_json(data.truth).dump(2) + "\n");
      ordered_json s{{"images", data.corpus.records.size()}, {"vocab_size", spec.vocab_size}, {"groups", spec.n_groups}};
      if (!gen_records.empty()) {
        const auto records = vptd::simulate_hallucinations(data.corpus, data.truth, sim, c.seed);
        vptd::io::write_file(gen_records, vptd::serialize_records(records));
        s["records"] = records.size();
      }
      emit(s);
    } else if (sub == bg) {
      require(bg_corpus, "--corpus", "paths.corpus");
      require(bg_out, "--out", "paths.graph");
      const auto corpus = load_corpus_for(bg_corpus, bg_vocab, bg_codebook);
      graph_opt.excluded_labels = {excluded.begin(), excluded.end()};
      graph_opt.threads = c.threads;
      const auto counts = vptd::count_cooccurrences(corpus, graph_opt);
      const auto graph = vptd::build_graph(counts, retention);
      vptd::save_graph(bg_out, graph);
      spdlog::info("{} images, |V| = {}, {} edges", corpus.records.size(), corpus.codebook_size, graph.edges.size());
      emit({{"edges", graph.edges.size()}, {"nnz", counts.nnz()}});
    } else if (sub == tr) {
      require(tr_graph, "--graph", "paths.graph");
      require(tr_codebook, "--codebook", "paths.codebook");
      require(tr_out, "--out", "paths.embeddings");
      const auto graph = vptd::load_graph(tr_graph);
      const auto codebook = vptd::load_codebook(tr_codebook);
      gnn.seed = c.seed;
      const auto result = vptd::train(graph, codebook, gnn, [](std::uint32_t epoch, double loss, double tau) {
        spdlog::debug("epoch {} loss {:.6f} tau {:.4f}", epoch, loss, tau);
      });
      vptd::save_embeddings(tr_out, result.embeddings);
      ordered_json s{{"epochs_run", result.epochs_run}, {"config_hash", result.embeddings.config_hash}};
      s["final_loss"] = result.epoch_losses.empty() ? ordered_json(nullptr) : ordered_json(result.epoch_losses.back());
      emit(s);
    } else if (sub == cl) {
      require(cl_emb, "--embeddings", "paths.embeddings");
      require(cl_out, "--out", "paths.clustering");
      const auto emb = vptd::load_embedding_table(cl_emb);
      const auto clustering = vptd::balanced_kmeans(emb, cluster_size, max_iter, c.seed);
      vptd::save_clustering(cl_out, clustering, c.seed);
      std::size_t lo = emb.rows(), hi = 0;
      for (const auto& m : clustering.members) {
        lo = std::min(lo, m.size());
        hi = std::max(hi, m.size());
      }
      ordered_json s{{"k", clustering.k}, {"iterations", clustering.iterations}, {"min_size", lo}, {"max_size", hi}};
      if (!cl_truth.empty()) {
        const auto truth = vptd::load_truth(cl_truth);
        s["ari"] = vptd::adjusted_rand_index(clustering.assignment, truth.group_of);
      }
      emit(s);
    } else if (sub == hr) {
      require(hr_records, "--records", "paths.records");
      require(hr_grids, "--grids", "paths.corpus");
      require(hr_clustering, "--clustering", "paths.clustering");
      const auto clustering = vptd::load_clustering(hr_clustering);
      const std::optional<std::uint32_t> vocab = hr_vocab ? hr_vocab : clustering.vocab_size();
      const auto records = vptd::load_records(hr_records);
      const auto grids = vptd::load_corpus(hr_grids, vocab);
      const auto masks = hr_masks.empty() ? grids : vptd::load_corpus(hr_masks, vocab);
      const std::set<std::string> excl(hr_excluded.begin(), hr_excluded.end());
      ordered_json s{{"k", hr_k}};
      std::vector<std::pair<std::string, vptd::GroupSelector>> groups{
          {"C1", vptd::GroupSelector::C1}, {"C2", vptd::GroupSelector::C2}, {"C3", vptd::GroupSelector::C3}};
      for (const auto& [name, sel] : groups) {
        if (!hr_group.empty() && hr_group != name) continue;
        const auto h = vptd::hitrate_at_k(records, grids, masks, clustering, hr_k, sel, excl);
        s["hallucinated"] = h.hallucinated;
        s[name] = h.rate();
      }
      emit(s);
    } else if (sub == mt) {
      require(mt_records, "--records", "paths.records");
      const auto records = vptd::load_records(mt_records);
      const auto targets = mt_targets.empty() ? std::set<std::string>{} : read_label_list(mt_targets);
      const std::optional<double> f1 = mt_f1 >= 0.0 ? std::optional<double>(mt_f1) : std::nullopt;
      const auto amber = vptd::amber_generative_metrics(records, targets, f1);
      emit(vptd::report_json(amber, vptd::halbench_metrics(records)));
    } else if (sub == pe) {
      require(pe_corpus, "--corpus", "paths.corpus");
      require(pe_clustering, "--clustering", "paths.clustering");
      require(pe_out, "--out", "paths.plan");
      const auto clustering = vptd::load_clustering(pe_clustering);
      const auto corpus = vptd::load_corpus(pe_corpus, clustering.vocab_size());
      const auto& grid = find_grid(corpus, pe_image);
      const std::string tag = pe_tag.empty() ? c.preset : pe_tag;
      const auto plan = vptd::plan_edit(grid, clustering, pe_n, pe_layer, pe_gamma, tag);
      vptd::io::write_file(pe_out, vptd::plan_to_json(plan).dump(2) + "\n");
      emit({{"image_id", grid.image_id},
            {"layer", plan.layer},
            {"gamma", plan.gamma},
            {"n_dominant", plan.n_dominant},
            {"n_hallucinative", plan.hallucinative_token_ids.size()}});
    } else if (sub == ae) {
      require(ae_plan, "--plan", "paths.plan");
      require(ae_hidden, "--hidden", "paths.hidden");
      require(ae_table, "--table", "paths.table");
      require(ae_out, "--out", "paths.edited");
      const auto summary = vptd::apply_edit(ae_hidden, ae_table, vptd::load_plan(ae_plan), ae_out);
      emit({{"n_edits", summary.n_edits}, {"max_row_delta_norm", summary.max_row_delta_norm}});
    }
  } catch (const UsageError& e) {
    std::cerr << sub->get_name() << ": " << e.what() << "\nRun with --help for more information.\n";
    return 2;
  } catch (const vptd::Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("IoError: {}", e.what());
    return 1;
  }
  return 0;
}
