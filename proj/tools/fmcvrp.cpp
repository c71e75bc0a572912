// fmcvrp command-line driver.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "fmcvrp/eval.hpp"
#include "fmcvrp/pipeline.hpp"

using namespace fmcvrp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::string config_path, profile, out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool json_errors = false;
};

config::RunConfig load_config(const Globals& g) {
  json file;
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw io_error("cannot open config " + g.config_path);
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw validation_error("config " + g.config_path + ": " + e.what());
    }
  }
  auto env = config::process_environment();
  if (g.seed) env.emplace_back("FMCVRP_SEED", std::to_string(*g.seed));
  if (g.workers) env.emplace_back("FMCVRP_WORKERS", std::to_string(*g.workers));
  return config::resolve(g.profile, file, env);
}

fs::path out_dir(const Globals& g) {
  fs::path p(g.out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw io_error("cannot create output directory " + g.out + ": " + ec.message());
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

class Manifest {
 public:
  Manifest(std::string command, const config::RunConfig& c) : command_(std::move(command)), cfg_(c) {}
  void input(const std::string& path) { inputs_[path] = config::file_hash(path); }
  void output(const fs::path& path) { outputs_[path.filename().string()] = config::file_hash(path.string()); }
  void extra(const std::string& k, json v) { extra_[k] = std::move(v); }
  void write(const fs::path& dir) const {
    json j{{"command", command_},   {"version", kVersion},   {"config", cfg_.to_json()},
           {"config_hash", config::config_hash(cfg_)}, {"inputs", inputs_}, {"outputs", outputs_}};
    for (auto it = extra_.begin(); it != extra_.end(); ++it) j[it.key()] = it.value();
    write_json(dir / "manifest.json", j);
  }

 private:
  std::string command_;
  config::RunConfig cfg_;
  json inputs_ = json::object(), outputs_ = json::object(), extra_ = json::object();
};

std::vector<datagen::DatasetRecord> read_records(const std::string& path) {
  if (!fs::exists(path)) throw io_error("missing input " + path);
  return datagen::read_jsonl(path);
}

// ---------------------------------------------------------------------------

void cmd_graph_build(const Globals& g) {
  auto c = load_config(g);
  auto dir = out_dir(g);
  auto graph = pipeline::build_graph(c);
  write_json(dir / "graph.json", graph->to_json());
  Manifest m("graph build", c);
  m.output(dir / "graph.json");
  m.write(dir);
  std::cout << json{{"graph", (dir / "graph.json").string()}, {"nodes", graph->size()}}.dump() << '\n';
}

void cmd_data_gen(const Globals& g) {
  auto c = load_config(g);
  auto dir = out_dir(g);
  auto graph = pipeline::build_graph(c);
  std::size_t skipped = 0;
  auto d = pipeline::generate_data(c, graph, [&](const std::string& id, const std::string& why) {
    ++skipped;
    std::cerr << "skipped " << id << ": " << why << '\n';
  });
  write_json(dir / "graph.json", graph->to_json());
  datagen::write_jsonl((dir / "train.jsonl").string(), d.train);
  datagen::write_jsonl((dir / "heldout.jsonl").string(), d.heldout);
  datagen::write_jsonl((dir / "generalization.jsonl").string(), d.generalization);
  Manifest m("data gen", c);
  for (const char* f : {"graph.json", "train.jsonl", "heldout.jsonl", "generalization.jsonl"}) m.output(dir / f);
  json hashes{{"train", pipeline::records_hash(d.train)},
              {"heldout", pipeline::records_hash(d.heldout)},
              {"generalization", pipeline::records_hash(d.generalization)}};
  m.extra("dataset_hashes", hashes);
  m.extra("skipped", skipped);
  m.write(dir);
  std::cout << json{{"train", d.train.size()}, {"heldout", d.heldout.size()},
                    {"generalization", d.generalization.size()}, {"skipped", skipped}, {"hashes", hashes}}
                   .dump()
            << '\n';
}

void cmd_teacher_solve(const Globals& g, const std::string& input, bool construction_only) {
  auto c = load_config(g);
  auto dir = out_dir(g);
  auto graph = pipeline::build_graph(c);
  auto recs = read_records(input);
  auto tc = c.data.teacher;
  if (construction_only) {
    tc.mode = teacher::BudgetMode::moves;
    tc.max_moves = 0;
    tc.time_budget_s = 0.0;
  }
  double total = 0.0;
  for (auto& r : recs) {
    auto inst = r.instance(graph);
    tc.seed = derive_seed(pipeline::seeds(c).data, {tensor::fnv1a64(r.instance_id.data(), r.instance_id.size())});
    auto res = teacher::solve(inst, tc);
    r.tokens = res.solution.tokens;
    r.teacher_cost = res.cost;
    r.teacher_wall_time_s = res.wall_time_s;
    total += res.cost;
  }
  const auto out = dir / "solutions.jsonl";
  datagen::write_jsonl(out.string(), recs);
  Manifest m("teacher solve", c);
  m.input(input);
  m.output(out);
  m.extra("construction_only", construction_only);
  m.write(dir);
  std::cout << json{{"solved", recs.size()}, {"mean_cost", recs.empty() ? 0.0 : total / recs.size()}}.dump() << '\n';
}

void cmd_train_run(const Globals& g, const std::string& data, const std::string& init, const std::string& phase) {
  auto c = load_config(g);
  auto dir = out_dir(g);
  auto graph = pipeline::build_graph(c);
  auto recs = read_records(data);
  auto m = pipeline::fresh_model(c);
  Manifest man("train run", c);
  man.input(data);
  if (!init.empty()) {
    train::load_checkpoint_into(m, init);
    man.input(init);
  }
  train::TrainLog log;
  const auto ckpt = (dir / "model.ckpt").string();
  try {
    pipeline::train_all(m, c, graph, recs, log, ckpt,
                        [](const train::LogRow& r) {
                          if (r.step % 100 == 0)
                            std::cerr << r.phase << " step " << r.step << " problem " << r.problem_loss << " solution "
                                      << r.solution_loss << '\n';
                        },
                        phase);
  } catch (...) {
    log.write_csv((dir / "train_log.csv").string());
    throw;
  }
  log.write_csv((dir / "train_log.csv").string());
  man.output(dir / "model.ckpt");
  man.output(dir / "train_log.csv");
  man.write(dir);
  const auto& last = log.rows().empty() ? train::LogRow{} : log.rows().back();
  std::cout << json{{"steps", log.size()}, {"problem_loss", last.problem_loss},
                    {"solution_loss", std::isnan(last.solution_loss) ? json(nullptr) : json(last.solution_loss)}}
                   .dump()
            << '\n';
}

void cmd_decode_run(const Globals& g, const std::string& model_path, const std::string& data,
                    const std::string& strategy, std::optional<int> samples, std::optional<double> top_p) {
  auto c = load_config(g);
  auto dir = out_dir(g);
  auto graph = pipeline::build_graph(c);
  auto recs = read_records(data);
  auto m = train::load_checkpoint(model_path);
  m.config().validate_for(*graph);
  auto policy = c.decode;
  if (!strategy.empty()) {
    if (strategy != "greedy" && strategy != "nucleus") throw validation_error("strategy must be greedy or nucleus");
    policy.strategy = strategy == "greedy" ? decode::Strategy::greedy : decode::Strategy::nucleus;
  }
  if (samples) policy.samples = *samples;
  if (top_p) policy.top_p = *top_p;
  if (policy.strategy == decode::Strategy::greedy) policy.samples = 1;
  policy.validate();
  auto out = pipeline::decode_all(m, c, graph, recs, policy);
  const auto path = dir / "decode.jsonl";
  decode::write_jsonl(path.string(), out);
  Manifest man("decode run", c);
  man.input(model_path);
  man.input(data);
  man.output(path);
  man.extra("policy", policy.to_json());
  man.write(dir);
  double total = 0.0;
  for (auto& r : out) total += r.cost;
  std::cout << json{{"decoded", out.size()}, {"mean_cost", out.empty() ? 0.0 : total / out.size()},
                    {"hash", pipeline::decodes_hash(out)}}
                   .dump()
            << '\n';
}

void cmd_eval_report(const Globals& g, const std::string& data, const std::vector<std::string>& decodes,
                     const std::string& geometry_id) {
  auto c = load_config(g);
  auto dir = out_dir(g);
  auto graph = pipeline::build_graph(c);
  auto recs = read_records(data);
  eval::EvalReport rep;
  rep.baseline_method = c.eval.baseline;
  std::map<std::string, double> base;
  for (const auto& r : recs) {
    rep.rows.push_back({r.instance_id, r.n_customers(), c.eval.baseline, "none", 1, r.teacher_cost, r.teacher_wall_time_s});
    base[r.instance_id] = r.teacher_cost;
  }
  Manifest man("eval report", c);
  man.input(data);
  json tests = json::array();
  for (const auto& path : decodes) {
    if (!fs::exists(path)) throw io_error("missing input " + path);
    man.input(path);
    std::vector<double> x, y;
    std::string label;
    for (const auto& d : decode::read_jsonl(path)) {
      auto it = base.find(d.instance_id);
      if (it == base.end()) throw validation_error("decode record " + d.instance_id + " has no baseline instance");
      const auto rec = std::find_if(recs.begin(), recs.end(), [&](auto& r) { return r.instance_id == d.instance_id; });
      const auto inst = rec->instance(graph);
      const auto v = validate_solution(inst, Solution{d.tokens});
      if (!v.ok()) throw validation_error("infeasible decoded solution for " + d.instance_id + ": " + v.summary());
      rep.rows.push_back({d.instance_id, rec->n_customers(), "model", d.strategy, d.s, d.cost, d.wall_time_s});
      x.push_back(d.cost);
      y.push_back(it->second);
      label = d.strategy + "/s=" + std::to_string(d.s);
    }
    if (x.size() >= 2) {
      try {
        auto t = eval::paired_t_test(x, y);
        tests.push_back({{"decode", path},      {"label", label},       {"t", t.t},
                         {"dof", t.dof},        {"p", t.p},             {"underflow", t.underflow},
                         {"mean_model", t.mean_x}, {"mean_baseline", t.mean_y}, {"ci95", {t.ci95_lo, t.ci95_hi}}});
      } catch (const Error& e) {
        tests.push_back({{"decode", path}, {"label", label}, {"error", e.what()}});
      }
    }
    if (!geometry_id.empty()) {
      for (const auto& d : decode::read_jsonl(path))
        if (d.instance_id == geometry_id) {
          const auto rec = std::find_if(recs.begin(), recs.end(), [&](auto& r) { return r.instance_id == geometry_id; });
          const auto stem = geometry_id + "_" + d.strategy + "_s" + std::to_string(d.s);
          eval::export_geometry(rec->instance(graph), Solution{d.tokens}, (dir / (stem + ".svg")).string(),
                                (dir / (stem + ".csv")).string());
        }
    }
  }
  eval::export_report(rep, (dir / "report.csv").string());
  write_json(dir / "ttest.json", tests);
  man.output(dir / "report.csv");
  man.output(dir / "ttest.json");
  man.write(dir);
  std::ifstream in(dir / "report.csv");
  std::cout << in.rdbuf();
}

int cmd_check_grad(const Globals& g, int points, std::size_t coords) {
  auto c = load_config(g);
  auto graph = pipeline::build_graph(c);
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
  const auto t0 = std::chrono::steady_clock::now();
  for (int k = 0; k < points; ++k) {
    auto r = pipeline::grad_check_point(c.model, graph, derive_seed(c.seed, {0x6763, static_cast<std::uint64_t>(k)}),
                                        coords);
    checked += r.checked;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = r.worst;
    }
  }
  const bool ok = worst < 1e-4;
  std::cout << json{{"max_rel_error", worst}, {"worst", where},        {"points", points},
                    {"checked", checked},     {"tolerance", 1e-4},     {"ok", ok},
                    {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}}
                   .dump()
            << '\n';
  return ok ? 0 : 3;
}

int cmd_check_invariants(const Globals& g, int count) {
  auto c = load_config(g);
  auto graph = pipeline::build_graph(c);
  auto mc = c.model;
  mc.dropout = 0.0;
  model::Model<float> m(mc, derive_seed(c.seed, {0x6976}));
  int infeasible = 0, budget_errors = 0, teacher_bad = 0;
  for (int k = 0; k < count; ++k) {
    const int n = 5 + k % 26;
    if (n >= c.graph.size) continue;
    auto inst = datagen::sample_instance(graph, n, derive_seed(c.seed, {0x6976, static_cast<std::uint64_t>(k)}),
                                         c.data.capacity_table());
    try {
      if (!validate_solution(inst, decode::greedy_decode(m, inst)).ok()) ++infeasible;
    } catch (const Error&) {
      ++budget_errors;
    }
    teacher::TeacherConfig tc = c.data.teacher;
    tc.seed = static_cast<std::uint64_t>(k);
    if (!validate_solution(inst, teacher::solve(inst, tc).solution).ok()) ++teacher_bad;
  }
  const bool ok = infeasible == 0 && budget_errors == 0 && teacher_bad == 0;
  std::cout << json{{"decodes", count},       {"infeasible", infeasible}, {"budget_errors", budget_errors},
                    {"teacher_infeasible", teacher_bad}, {"ok", ok}}
                   .dump()
            << '\n';
  return ok ? 0 : 2;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation: return 2;
    case ErrorKind::divergence: return 3;
    case ErrorKind::io: return 4;
  }
  return 1;
}

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fixed-graph CVRP: data generation, transformer training and decoding"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option("--profile", g.profile, "desk | paper | custom");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--workers", g.workers, "worker threads");
  app.add_option("--out", g.out, "run directory");
  app.add_flag("--json-errors", g.json_errors, "print errors as JSON on stderr");

  std::function<int()> action;
  auto group = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->require_subcommand(1);
    s->fallthrough();
    return s;
  };

  auto* graph = group("graph", "fixed graph");
  graph->add_subcommand("build", "build the fixed graph")->fallthrough()->callback([&] {
    action = [&] { cmd_graph_build(g); return 0; };
  });

  auto* data = group("data", "datasets");
  data->add_subcommand("gen", "generate training, held-out and generalization sets")->fallthrough()->callback([&] {
    action = [&] { cmd_data_gen(g); return 0; };
  });

  std::string input;
  bool construction_only = false;
  auto* teach = group("teacher", "reference solver");
  auto* solve = teach->add_subcommand("solve", "solve every instance of a dataset file")->fallthrough();
  solve->add_option("--input", input, "dataset JSONL")->required();
  solve->add_flag("--construction-only", construction_only, "savings construction without local search");
  solve->callback([&] { action = [&] { cmd_teacher_solve(g, input, construction_only); return 0; }; });

  std::string data_path, init, phase;
  auto* tr = group("train", "training");
  auto* run = tr->add_subcommand("run", "run the configured phases")->fallthrough();
  run->add_option("--data", data_path, "training JSONL")->required();
  run->add_option("--init", init, "checkpoint to start from");
  run->add_option("--phase", phase, "run only this phase");
  run->callback([&] { action = [&] { cmd_train_run(g, data_path, init, phase); return 0; }; });

  std::string model_path, strategy;
  std::optional<int> samples;
  std::optional<double> top_p;
  auto* dec = group("decode", "decoding");
  auto* drun = dec->add_subcommand("run", "decode every instance of a dataset file")->fallthrough();
  drun->add_option("--model", model_path, "checkpoint")->required();
  drun->add_option("--data", data_path, "dataset JSONL")->required();
  drun->add_option("--strategy", strategy, "greedy | nucleus");
  drun->add_option("--samples", samples, "samples per instance");
  drun->add_option("--top-p", top_p, "nucleus threshold");
  drun->callback([&] { action = [&] { cmd_decode_run(g, model_path, data_path, strategy, samples, top_p); return 0; }; });

  std::vector<std::string> decodes;
  std::string geometry_id;
  auto* ev = group("eval", "evaluation");
  auto* rep = ev->add_subcommand("report", "aggregate decodes against the teacher")->fallthrough();
  rep->add_option("--data", data_path, "dataset JSONL with teacher solutions")->required();
  rep->add_option("--decode", decodes, "decode JSONL files")->required();
  rep->add_option("--geometry", geometry_id, "export SVG/CSV geometry for this instance id");
  rep->callback([&] { action = [&] { cmd_eval_report(g, data_path, decodes, geometry_id); return 0; }; });

  int points = 5, count = 1000;
  std::size_t coords = 4;
  auto* chk = group("check", "self checks");
  auto* cg = chk->add_subcommand("grad", "finite-difference gradient check")->fallthrough();
  cg->add_option("--points", points, "random parameter points");
  cg->add_option("--coords", coords, "coordinates probed per parameter tensor");
  cg->callback([&] { action = [&] { return cmd_check_grad(g, points, coords); }; });
  auto* ci = chk->add_subcommand("invariants", "mask soundness and teacher feasibility")->fallthrough();
  ci->add_option("--count", count, "random instances");
  ci->callback([&] { action = [&] { return cmd_check_invariants(g, count); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    return action ? action() : 2;
  } catch (const Error& e) {
    if (g.json_errors)
      std::cerr << json{{"error", kind_name(e.kind())}, {"message", e.what()}}.dump() << '\n';
    else
      std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    if (g.json_errors)
      std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    else
      std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
