// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.

#include "mtcr/aggregator.hpp"
#include "mtcr/evaluation.hpp"
#include "mtcr/io.hpp"
#include "mtcr/pipeline.hpp"
#include "mtcr/synth_city.hpp"
#include "mtcr/tcn_autoencoder.hpp"
#include "mtcr/traffic.hpp"

#include "oracles.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

using namespace mtcr;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeed = 7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return buf;
}

// ---- 1: gradient checks ----------------------------------------------------

struct FdResult {
  int coords = 0;
  double max_rel = 0;
};

// Central differences on `count` distinct random coordinates of `params`.
FdResult finite_difference_check(nn::ParamStore& params, const nn::ParamStore& analytic,
                                 const std::function<double()>& loss, int count, std::uint64_t seed) {
  Rng rng = make_rng(seed, "fd-coords");
  std::vector<std::size_t> all(params.numel());
  std::iota(all.begin(), all.end(), std::size_t{0});
  shuffle(all.begin(), all.end(), rng);
  FdResult r;
  for (int k = 0; k < count && k < static_cast<int>(all.size()); ++k) {
    const std::size_t i = all[static_cast<std::size_t>(k)];
    const double h = 1e-5, orig = params.flat(i);
    params.flat(i) = orig + h;
    const double up = loss();
    params.flat(i) = orig - h;
    const double down = loss();
    params.flat(i) = orig;
    r.max_rel = std::max(r.max_rel, oracle::relative_error(analytic.flat(i), (up - down) / (2 * h)));
    ++r.coords;
  }
  return r;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  return x;
}

Outcome gradient_checks() {
  std::ostringstream detail;
  bool pass = true;

  TcnConfig tc;
  tc.input_channels = 2;
  tc.length = 32;
  tc.bottleneck = 4;
  tc.channels = {4, 4, 4};
  tc.pool = 4;
  tc.seed = kSeed;
  TcnAutoencoder ae(tc);
  Rng rng = make_rng(kSeed, "gradcheck-data");
  const Eigen::MatrixXd x = gaussian(2, 32, rng);
  auto g = ae.params().zeros_like();
  ae.accumulate_gradient(x, g, 1.0);
  const auto r_ae = finite_difference_check(
      ae.params(), g, [&] { return (ae.reconstruct(x) - x).squaredNorm(); }, 100, 1);
  pass = pass && r_ae.coords >= 100 && r_ae.max_rel < 1e-4;
  detail << "tcn max_rel=" << fmt(r_ae.max_rel) << " over " << r_ae.coords;

  // The weighted sum at 4->8 has only 60 parameters, so it is checked on
  // fresh input triplets until at least 100 coordinates have been compared.
  for (AggregatorKind kind : {AggregatorKind::WeightedSum, AggregatorKind::Transformer}) {
    AggregatorConfig ac;
    ac.kind = kind;
    ac.input_dim = 4;
    ac.output_dim = 8;
    ac.ff_width = 16;
    ac.cap = 8;
    ac.margin = 10.0;  // keeps the hinge active
    ac.seed = kSeed;
    AggregatorModel model(ac);
    FdResult total;
    for (std::uint64_t round = 0; total.coords < 100; ++round) {
      const Eigen::MatrixXd xa = gaussian(5, 4, rng), xp = gaussian(3, 4, rng), xn = gaussian(8, 4, rng);
      auto ta = model.make_trace(), tp = model.make_trace(), tn = model.make_trace();
      const auto lg = triplet_loss_grad(model.forward(xa, *ta), model.forward(xp, *tp), model.forward(xn, *tn),
                                        ac.margin);
      auto grads = model.params().zeros_like();
      model.backward(*ta, lg.da, grads);
      model.backward(*tp, lg.dp, grads);
      model.backward(*tn, lg.dn, grads);
      const auto loss = [&] {
        return triplet_loss(model.aggregate_rows(xa), model.aggregate_rows(xp), model.aggregate_rows(xn), ac.margin);
      };
      const auto r = finite_difference_check(model.params(), grads, loss, 100 - total.coords, 2 + round);
      pass = pass && lg.loss > 0;
      total.coords += r.coords;
      total.max_rel = std::max(total.max_rel, r.max_rel);
    }
    pass = pass && total.max_rel < 1e-4;
    detail << "; " << to_string(kind) << " max_rel=" << fmt(total.max_rel) << " over " << total.coords;
  }
  return {pass, detail.str()};
}

// ---- 2: autoencoder memorization ------------------------------------------

std::vector<MultivariateSeries> normalized_cells(const SyntheticCity& city) {
  TrafficTable table{city.metadata, city.traffic};
  auto cells = build_multivariate(table, city.category_map, 3600);
  const auto stats = compute_normalization_stats(cells);
  for (auto& c : cells) c = normalize(c, stats);
  return cells;
}

Outcome ae_memorization() {
  CitySpec spec;
  spec.seed = kSeed;
  const auto city = generate_city(spec);
  const auto cells = normalized_cells(city);
  TcnConfig cfg;
  cfg.epochs = 100;
  cfg.learning_rate = 1e-3;
  cfg.seed = kSeed;
  const auto model = train_autoencoder(cfg, {cells[37]});
  const double first = model.training_log.front(), last = model.training_log.back();
  return {last < 0.1 * first, "epoch1 mse=" + fmt(first) + " final mse=" + fmt(last) + " ratio=" + fmt(last / first)};
}

// ---- 3: aggregator invariances ----------------------------------------------

Outcome aggregator_invariances() {
  Rng rng = make_rng(kSeed, "invariance-data");
  double worst_perm = 0, worst_pad = 0;
  for (AggregatorKind kind : {AggregatorKind::WeightedSum, AggregatorKind::Transformer}) {
    AggregatorConfig cfg;
    cfg.kind = kind;
    cfg.seed = kSeed;
    const AggregatorModel model(cfg);
    for (int t = 0; t < 100; ++t) {
      const int n = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.cap)));
      const Eigen::MatrixXd rows = gaussian(n, cfg.input_dim, rng);
      std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      shuffle(perm.begin(), perm.end(), rng);
      Eigen::MatrixXd permuted(n, cfg.input_dim);
      for (int i = 0; i < n; ++i) permuted.row(i) = rows.row(perm[static_cast<std::size_t>(i)]);

      RegionFeatureMatrix fm;
      fm.x = Eigen::MatrixXd::Zero(cfg.cap, cfg.input_dim);
      fm.x.topRows(n) = rows;
      fm.mask.assign(static_cast<std::size_t>(cfg.cap), 0);
      std::fill(fm.mask.begin(), fm.mask.begin() + n, 1);
      fm.count = fm.total_cells = n;

      const Eigen::VectorXd y = model.aggregate_rows(rows);
      worst_perm = std::max(worst_perm, (model.aggregate_rows(permuted) - y).cwiseAbs().maxCoeff());
      worst_pad = std::max(worst_pad, (model.aggregate(fm) - y).cwiseAbs().maxCoeff());
    }
  }
  return {worst_perm < 1e-6 && worst_pad < 1e-6,
          "max |perm diff|=" + fmt(worst_perm) + " max |pad diff|=" + fmt(worst_pad) + " over 2x100 matrices"};
}

// ---- 4, 5, 8, 10: synthetic city pipeline runs --------------------------------

const char* kCityConfig = R"(seed = 7
synth.rows = 16
synth.cols = 16
synth.regions = 32
synth.days = 14
synth.noise = 0.2
synth.density_sigma = 0.2
ae.epochs = 100
ae.learning_rate = 0.001
agg.epochs = 60
agg.learning_rate = 0.0001
agg.hops = 2
agg.margin = 1
slots = full
eval.landuse.repeats = 30
eval.landuse.train = 0.7
eval.landuse.val = 0.1
eval.density.repeats = 30
eval.density.train = 0.8
eval.cluster.k = 4
)";

struct CityRuns {
  fs::path workdir;
  fs::path transformer, weighted_sum;
  double seconds = 0;
  bool ok = false;
  std::string error;
};

PipelineConfig city_config(const fs::path& out, const std::string& extra = {}) {
  auto c = PipelineConfig::parse(std::string(kCityConfig) + extra, out.parent_path());
  c.output_dir = out;
  return c;
}

void run_city(CityRuns& runs) {
  const auto t0 = Clock::now();
  runs.transformer = runs.workdir / "city_transformer";
  runs.weighted_sum = runs.workdir / "city_weighted_sum";
  fs::remove_all(runs.transformer);
  fs::remove_all(runs.weighted_sum);
  try {
    Pipeline(city_config(runs.transformer, "agg.kind = transformer\n")).run("all");
    // Same data and autoencoder: upstream stages are reused as up to date.
    fs::copy(runs.transformer, runs.weighted_sum, fs::copy_options::recursive);
    Pipeline(city_config(runs.weighted_sum, "agg.kind = weighted_sum\n")).run("all");
    runs.ok = true;
  } catch (const std::exception& e) {
    runs.error = e.what();
  }
  runs.seconds = seconds_since(t0);
}

struct Separation {
  double ap = 0, an = 0;
};

Separation fresh_triplet_separation(const fs::path& run) {
  const auto emb = region_embeddings_from_csv(io::read_file(run / "slots/full/region_embeddings.csv"));
  const auto tess = read_geojson_regions(run / "data/regions.geojson");
  const auto adj = build_adjacency(tess);
  std::unordered_map<std::string, Eigen::VectorXd> by_id;
  for (const auto& e : emb) by_id[e.region_id] = e.e;
  require(by_id.size() == adj.size(), ErrorCode::Data, "embedding set differs from the region set");
  const auto anchors = eligible_anchors(adj, 2);
  Rng rng = make_rng(kSeed, "acceptance-fresh-triplets");
  Separation s;
  for (int t = 0; t < 200; ++t) {
    const std::size_t a = anchors[uniform_index(rng, anchors.size())];
    const auto tri = sample_triplet(adj, a, 2, rng);
    require(tri.has_value(), ErrorCode::Data, "eligible anchor without a triplet");
    const auto& ea = by_id.at(adj.ids()[tri->anchor]);
    s.ap += (ea - by_id.at(adj.ids()[tri->positive])).norm() / 200.0;
    s.an += (ea - by_id.at(adj.ids()[tri->negative])).norm() / 200.0;
  }
  return s;
}

Outcome triplet_separation(const CityRuns& runs) {
  if (!runs.ok) return {false, "pipeline failed: " + runs.error};
  std::ostringstream d;
  bool pass = runs.seconds < 15 * 60;
  for (const auto& [name, dir] : {std::pair{"transformer", runs.transformer}, {"weighted_sum", runs.weighted_sum}}) {
    const auto s = fresh_triplet_separation(dir);
    pass = pass && s.ap < s.an;
    d << name << " mean|a-p|=" << fmt(s.ap) << " mean|a-n|=" << fmt(s.an) << "; ";
  }
  d << "pipeline " << fmt(runs.seconds, 3) << " s";
  return {pass, d.str()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(io::read_file(p)); }

Outcome archetype_recovery(const CityRuns& runs) {
  if (!runs.ok) return {false, "pipeline failed: " + runs.error};
  const double t = read_json(runs.transformer / "ami.json")["slots"]["full"]["k4"]["archetype"].get<double>();
  const double w = read_json(runs.weighted_sum / "ami.json")["slots"]["full"]["k4"]["archetype"].get<double>();
  return {std::max(t, w) >= 0.7, "area-weighted AMI transformer=" + fmt(t) + " weighted_sum=" + fmt(w)};
}

Outcome downstream_sanity(const CityRuns& runs) {
  if (!runs.ok) return {false, "pipeline failed: " + runs.error};
  std::ostringstream d;
  bool pass = true;
  for (const auto& [name, dir] : {std::pair{"transformer", runs.transformer}, {"weighted_sum", runs.weighted_sum}}) {
    const auto lu = read_json(dir / "slots/full/eval_landuse.json")["metrics"];
    const auto de = read_json(dir / "slots/full/eval_density.json")["metrics"];
    const double cos = lu["cosine"]["mean"].get<double>(), base = lu["baseline_cosine"]["mean"].get<double>();
    const double r2 = de["r2"]["mean"].is_null() ? -INFINITY : de["r2"]["mean"].get<double>();
    pass = pass && cos - base >= 0.05 && r2 > 0.3 && lu["cosine"]["per_repeat"].size() == 30 &&
           de["r2"]["per_repeat"].size() == 30;
    if (d.tellp() > 0) d << "; ";
    d << name << " cosine=" << fmt(cos) << " baseline=" << fmt(base) << " r2=" << fmt(r2);
  }
  return {pass, d.str()};
}

// Every file of two run trees, apart from wall-clock timings.
Outcome determinism(const CityRuns& runs) {
  if (!runs.ok) return {false, "pipeline failed: " + runs.error};
  const auto repeat = runs.workdir / "city_transformer_repeat";
  fs::remove_all(repeat);
  Pipeline(city_config(repeat, "agg.kind = transformer\n")).run("all");
  std::set<fs::path> files;
  for (const auto& root : {runs.transformer, repeat}) {
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().filename() != "timings.json") files.insert(fs::relative(e.path(), root));
    }
  }
  int compared = 0, csv_json = 0;
  for (const auto& rel : files) {
    const auto a = runs.transformer / rel, b = repeat / rel;
    if (!fs::exists(a) || !fs::exists(b)) return {false, "only one run has " + rel.string()};
    if (io::read_file(a) != io::read_file(b)) return {false, rel.string() + " differs"};
    ++compared;
    const auto ext = rel.extension();
    csv_json += ext == ".csv" || ext == ".json";
  }
  const bool has_core = fs::exists(repeat / "slots/full/region_embeddings.csv") &&
                        fs::exists(repeat / "slots/full/eval_landuse.json") &&
                        fs::exists(repeat / "slots/full/eval_density.json");
  return {has_core, std::to_string(compared) + " files identical (" + std::to_string(csv_json) + " csv/json)"};
}

// ---- 6: AMI oracle equivalence ----------------------------------------------

std::vector<std::string> region_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("r" + std::to_string(i));
  return ids;
}

std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
  std::vector<int> l(n);
  for (auto& x : l) x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(k)));
  return l;
}

Outcome ami_oracle() {
  Rng rng = make_rng(kSeed, "ami-acceptance");
  const AmiOptions analytic{AmiMode::Analytic, 0, 0};
  const auto ids = region_ids(40);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const auto lu = random_labels(40, 2 + static_cast<int>(uniform_index(rng, 5)), rng);
    const auto lv = random_labels(40, 2 + static_cast<int>(uniform_index(rng, 5)), rng);
    const double ours = adjusted_mutual_information(WeightedClustering::uniform(ids, lu),
                                                    WeightedClustering::uniform(ids, lv), analytic);
    worst = std::max(worst, std::abs(ours - oracle::ami_counts(lu, lv)));
  }
  bool self_one = true;
  for (int t = 0; t < 20; ++t) {
    const auto u = WeightedClustering::uniform(ids, random_labels(40, 2 + static_cast<int>(uniform_index(rng, 5)), rng));
    self_one = self_one && adjusted_mutual_information(u, u, analytic) == 1.0;
  }
  double sum = 0;
  for (int t = 0; t < 200; ++t) {
    const auto lu = random_labels(40, 2 + static_cast<int>(uniform_index(rng, 5)), rng);
    const auto lv = random_labels(40, 2 + static_cast<int>(uniform_index(rng, 5)), rng);
    sum += adjusted_mutual_information(WeightedClustering::uniform(ids, lu), WeightedClustering::uniform(ids, lv),
                                       analytic);
  }
  const double mean = sum / 200;
  return {worst < 1e-9 && self_one && std::abs(mean) <= 0.05,
          "max |ours-oracle|=" + fmt(worst) + " AMI(U,U)==1: " + (self_one ? "yes" : "no") +
              " mean random AMI=" + fmt(mean)};
}

// ---- 7: entropy / MI brute force -------------------------------------------

Outcome entropy_brute_force() {
  Rng rng = make_rng(kSeed, "entropy-acceptance");
  double worst_h = 0, worst_mi = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 10);
    const auto lu = random_labels(n, 1 + static_cast<int>(uniform_index(rng, 5)), rng);
    const auto lv = random_labels(n, 1 + static_cast<int>(uniform_index(rng, 5)), rng);
    std::vector<double> w(n);
    for (auto& x : w) x = std::exp(4.0 * standard_normal(rng));  // areas spanning orders of magnitude
    WeightedClustering u, v;
    u.region_ids = v.region_ids = region_ids(n);
    u.weights = v.weights = w;
    u.labels = lu;
    v.labels = lv;
    u.k = *std::max_element(lu.begin(), lu.end()) + 1;
    v.k = *std::max_element(lv.begin(), lv.end()) + 1;
    worst_h = std::max(worst_h, std::abs(weighted_entropy(u) - oracle::weighted_entropy_brute(lu, w)));
    worst_mi = std::max(worst_mi, std::abs(weighted_mutual_information(u, v) - oracle::weighted_mi_brute(lu, lv, w)));
  }
  return {worst_h < 1e-12 && worst_mi < 1e-12, "max |dH|=" + fmt(worst_h) + " max |dMI|=" + fmt(worst_mi)};
}

// ---- 9: slot discrimination -------------------------------------------------

Outcome slot_discrimination(const fs::path& workdir) {
  const auto out = workdir / "city_slot_dependent";
  fs::remove_all(out);
  auto cfg = city_config(out, "synth.slot_dependent = true\nslots = night,morning\n");
  Pipeline(cfg).run("all");
  const auto ami = read_json(out / "ami.json");
  const double between = ami["between_slots"]["k4"]["night|morning"].get<double>();
  const double night = ami["slots"]["night"]["k4"]["archetype"].get<double>();
  const double morning = ami["slots"]["morning"]["k4"]["archetype"].get<double>();
  return {between < 0.8 && night >= 0.6 && morning >= 0.6,
          "AMI(night, morning)=" + fmt(between) + " night vs truth=" + fmt(night) + " morning vs truth=" + fmt(morning)};
}

// ---- 11: preprocessing conservation ----------------------------------------

Outcome preprocessing_conservation() {
  Rng rng = make_rng(kSeed, "conservation");
  int exact = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::int64_t step = 900;
    const std::int64_t factor = 1 + static_cast<std::int64_t>(uniform_index(rng, 8));
    const std::size_t buckets = 1 + uniform_index(rng, 200);
    CellularTimeSeries ts{t, "svc", 1552694400, step, std::vector<double>(buckets * static_cast<std::size_t>(factor))};
    double total = 0;
    for (auto& v : ts.values) total += (v = static_cast<double>(uniform_index(rng, 1000000)));
    const auto down = downsample_sum(ts, step * factor);
    const double after = std::accumulate(down.values.begin(), down.values.end(), 0.0);
    exact += after == total && down.values.size() == buckets;
  }

  // Slot slices partition every hour of the timeline, for several offsets.
  bool partition = true;
  for (std::int64_t offset : {0, 3600, 7200, -18000}) {
    MultivariateSeries mv;
    mv.cell_id = 0;
    mv.categories = {"a"};
    mv.axis = {1552694400 - offset, 3600, offset};
    mv.values = Eigen::MatrixXd(1, 24 * 14);
    for (Eigen::Index i = 0; i < mv.values.cols(); ++i) mv.values(0, i) = static_cast<double>(i);
    std::vector<int> seen(static_cast<std::size_t>(mv.values.cols()), 0);
    for (TimeSlot s : {TimeSlot::Night, TimeSlot::Morning, TimeSlot::Afternoon}) {
      const auto slice = slice_time_slot(mv, s);
      for (Eigen::Index i = 0; i < slice.values.cols(); ++i) seen[static_cast<std::size_t>(slice.values(0, i))]++;
    }
    for (int c : seen) partition = partition && c == 1;
  }
  return {exact == 1000 && partition,
          std::to_string(exact) + "/1000 series conserved exactly; slots partition timeline: " +
              (partition ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory for pipeline runs");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  CityRuns runs;
  runs.workdir = fs::absolute(workdir);
  bool city_done = false;
  auto need_city = [&] {
    if (!city_done) run_city(runs);
    city_done = true;
    return std::cref(runs);
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient checks", gradient_checks},
      {"autoencoder memorization", ae_memorization},
      {"aggregator invariances", aggregator_invariances},
      {"triplet separation", [&] { return triplet_separation(need_city()); }},
      {"archetype recovery", [&] { return archetype_recovery(need_city()); }},
      {"AMI oracle equivalence", ami_oracle},
      {"entropy/MI brute force", entropy_brute_force},
      {"downstream harness sanity", [&] { return downstream_sanity(need_city()); }},
      {"temporal slot discrimination", [&] { return slot_discrimination(runs.workdir); }},
      {"determinism", [&] { return determinism(need_city()); }},
      {"preprocessing conservation", preprocessing_conservation},
  };
  const double limits[] = {60, 120, 0, 0, 0, 0, 0, 0, 0, 0, 0};

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (limits[i] > 0 && secs >= limits[i]) {
      o.pass = false;
      o.detail += "; over the " + fmt(limits[i], 3) + " s budget";
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
