#include "slf/cox.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

namespace slf {

namespace {

double log_add_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

// Cohort sorted by observed time ascending, with tie groups (Breslow
// convention: tied events share the full risk set, which is the suffix
// starting at the first member of the tie group).
struct SortedCohort {
  std::vector<std::size_t> order;        // original indices, time-ascending
  std::vector<std::size_t> group_start;  // per sorted position
  std::size_t n_events = 0;
};

SortedCohort sort_cohort(std::span<const SurvivalRecord> records) {
  SortedCohort s;
  s.order.resize(records.size());
  std::iota(s.order.begin(), s.order.end(), std::size_t{0});
  std::stable_sort(s.order.begin(), s.order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return records[a].time_at_risk < records[b].time_at_risk;
                   });
  s.group_start.resize(records.size());
  for (std::size_t p = 0; p < s.order.size(); ++p) {
    if (p > 0 && records[s.order[p]].time_at_risk ==
                     records[s.order[p - 1]].time_at_risk)
      s.group_start[p] = s.group_start[p - 1];
    else
      s.group_start[p] = p;
    s.n_events += static_cast<std::size_t>(records[s.order[p]].event);
  }
  return s;
}

void check_cohort(std::span<const double> risks,
                  std::span<const SurvivalRecord> records) {
  if (risks.size() != records.size())
    throw ShapeError("cox: risks/records length mismatch");
  if (records.empty())
    throw InsufficientDataError("cox: empty cohort");
  for (double r : risks)
    if (!std::isfinite(r)) throw NumericError("cox: non-finite risk score");
}

}  // namespace

double neg_log_partial_likelihood(std::span<const double> risks,
                                  std::span<const SurvivalRecord> records) {
  check_cohort(risks, records);
  const SortedCohort s = sort_cohort(records);
  if (s.n_events == 0)
    throw InsufficientDataError(
        "neg_log_partial_likelihood: no events in cohort");

  const std::size_t n = records.size();
  // Suffix log-sum-exp of risks in time order.
  std::vector<double> suffix_lse(n);
  for (std::size_t p = n; p-- > 0;) {
    const double r = risks[s.order[p]];
    suffix_lse[p] = (p + 1 < n) ? log_add_exp(r, suffix_lse[p + 1]) : r;
  }
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t i = s.order[p];
    if (records[i].event)
      total += suffix_lse[s.group_start[p]] - risks[i];
  }
  return total / static_cast<double>(s.n_events);
}

std::vector<double> partial_likelihood_risk_gradient(
    std::span<const double> risks, std::span<const SurvivalRecord> records) {
  check_cohort(risks, records);
  const SortedCohort s = sort_cohort(records);
  if (s.n_events == 0)
    throw InsufficientDataError(
        "partial_likelihood_risk_gradient: no events in cohort");

  const std::size_t n = records.size();
  const double shift = *std::max_element(risks.begin(), risks.end());
  std::vector<double> suffix_exp(n);
  for (std::size_t p = n; p-- > 0;) {
    suffix_exp[p] = std::exp(risks[s.order[p]] - shift) +
                    ((p + 1 < n) ? suffix_exp[p + 1] : 0.0);
  }
  // Running sum over event groups of d_g / S_g (shifted), in time order.
  std::vector<double> grad(n, 0.0);
  double group_accum = 0.0;
  std::size_t p = 0;
  while (p < n) {
    const std::size_t start = s.group_start[p];
    std::size_t end = p;
    double events_here = 0.0;
    while (end < n && s.group_start[end] == start) {
      events_here += records[s.order[end]].event;
      ++end;
    }
    if (events_here > 0.0) group_accum += events_here / suffix_exp[start];
    for (std::size_t q = start; q < end; ++q) {
      const std::size_t i = s.order[q];
      grad[i] = (std::exp(risks[i] - shift) * group_accum -
                 static_cast<double>(records[i].event)) /
                static_cast<double>(s.n_events);
    }
    p = end;
  }
  return grad;
}

bool is_penalized_parameter(const std::string& name) {
  static const char* const kSuffixes[] = {".wq",     ".wk",     ".wv",
                                          ".attn_out", ".ffn_w1", ".ffn_w2"};
  for (const char* suf : kSuffixes) {
    const std::size_t len = std::strlen(suf);
    if (name.size() >= len && name.compare(name.size() - len, len, suf) == 0)
      return true;
  }
  return name == "vision.patch_proj" || name == "surv.w1" ||
         name == "surv.w2";
}

double elastic_net_penalty(const ParameterStore& params, double lambda,
                           double alpha) {
  if (lambda < 0.0) throw InputError("elastic_net_penalty: lambda must be >= 0");
  if (alpha < 0.0 || alpha > 1.0)
    throw InputError("elastic_net_penalty: alpha must be in [0,1]");
  if (lambda == 0.0) return 0.0;
  double l1 = 0.0, l2 = 0.0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!is_penalized_parameter(params.name(i))) continue;
    const Tensor& t = params.tensor(i);
    for (std::size_t k = 0; k < t.size(); ++k) {
      l1 += std::abs(t[k]);
      l2 += t[k] * t[k];
    }
  }
  return lambda * (alpha * l1 + (1.0 - alpha) * l2);
}

void add_elastic_net_gradient(const ParameterStore& params, double lambda,
                              double alpha, std::span<double> grad) {
  if (grad.size() != params.total_size())
    throw ShapeError("add_elastic_net_gradient: buffer size mismatch");
  if (lambda == 0.0) return;
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor& t = params.tensor(i);
    if (is_penalized_parameter(params.name(i))) {
      for (std::size_t k = 0; k < t.size(); ++k) {
        const double w = t[k];
        const double sign = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
        grad[off + k] += lambda * (alpha * sign + (1.0 - alpha) * 2.0 * w);
      }
    }
    off += t.size();
  }
}

BaselineHazardTable breslow_baseline(std::span<const double> risks,
                                     std::span<const SurvivalRecord> records) {
  check_cohort(risks, records);
  const SortedCohort s = sort_cohort(records);
  if (s.n_events == 0)
    throw InsufficientDataError("breslow_baseline: no events in cohort");

  const std::size_t n = records.size();
  const double shift = *std::max_element(risks.begin(), risks.end());
  std::vector<double> suffix_exp(n);
  for (std::size_t p = n; p-- > 0;)
    suffix_exp[p] = std::exp(risks[s.order[p]] - shift) +
                    ((p + 1 < n) ? suffix_exp[p + 1] : 0.0);

  BaselineHazardTable table;
  double cum = 0.0;
  std::size_t p = 0;
  while (p < n) {
    const std::size_t start = s.group_start[p];
    std::size_t end = p;
    double events_here = 0.0;
    while (end < n && s.group_start[end] == start) {
      events_here += records[s.order[end]].event;
      ++end;
    }
    if (events_here > 0.0) {
      const double increment =
          std::exp(std::log(events_here) - shift - std::log(suffix_exp[start]));
      cum += increment;
      table.times.push_back(records[s.order[start]].time_at_risk);
      table.event_counts.push_back(events_here);
      table.increments.push_back(increment);
      table.cumulative.push_back(cum);
    }
    p = end;
  }
  return table;
}

double BaselineHazardTable::cumulative_at(double t) const {
  // Right-continuous: H0(t) = sum of increments at event times <= t.
  auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 0.0;
  return cumulative[static_cast<std::size_t>(it - times.begin()) - 1];
}

double BaselineHazardTable::baseline_survival(double t) const {
  return std::exp(-cumulative_at(t));
}

double survival_probability(double risk, double t,
                            const BaselineHazardTable& table) {
  if (t < 0.0) throw InputError("survival_probability: t must be >= 0");
  const double h = table.cumulative_at(t);
  if (h == 0.0) return 1.0;
  return std::exp(-h * std::exp(risk));
}

double dynamic_survival(double risk, double t_star, double dt,
                        const BaselineHazardTable& table) {
  if (dt < 0.0) throw InputError("dynamic_survival: dt must be >= 0");
  const double h_star = table.cumulative_at(t_star);
  if (std::exp(-h_star) == 0.0)
    throw NumericError("dynamic_survival: S0(t*) underflows to zero");
  const double dh = table.cumulative_at(t_star + dt) - h_star;
  if (dh == 0.0) return 1.0;
  return std::exp(-dh * std::exp(risk));
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw InputError("TrainConfig: lambda must be >= 0");
  if (alpha < 0.0 || alpha > 1.0)
    throw InputError("TrainConfig: alpha must be in [0,1]");
  if (!(learning_rate > 0.0))
    throw InputError("TrainConfig: learning rate must be > 0");
  if (!(pos_embed_lr_scale > 0.0))
    throw InputError("TrainConfig: positional lr scale must be > 0");
  if (!(content_lr_scale > 0.0))
    throw InputError("TrainConfig: content lr scale must be > 0");
  if (epochs < 1) throw InputError("TrainConfig: epochs must be >= 1");
  if (patience < 0) throw InputError("TrainConfig: patience must be >= 0");
  if (landmark < 0.0 || landmark > 1.0)
    throw InputError("TrainConfig: landmark must be in [0,1]");
  if (val_fraction < 0.0 || val_fraction > 0.5)
    throw InputError("TrainConfig: val fraction must be in [0,0.5]");
  if (threads < 1) throw InputError("TrainConfig: threads must be >= 1");
}

LandmarkCohort landmark_filter(std::span<const Patient> patients,
                               double t_star) {
  LandmarkCohort cohort;
  for (const Patient& p : patients) {
    if (p.rec.time_at_risk < t_star) continue;
    const std::size_t jstar = p.seq.visits_at_or_before(t_star);
    if (jstar == 0) continue;
    cohort.patients.push_back(&p);
    cohort.landmark_visits.push_back(jstar);
  }
  return cohort;
}

LandmarkCohort landmark_filter(std::span<const Patient* const> patients,
                               double t_star) {
  LandmarkCohort cohort;
  for (const Patient* p : patients) {
    if (p->rec.time_at_risk < t_star) continue;
    const std::size_t jstar = p->seq.visits_at_or_before(t_star);
    if (jstar == 0) continue;
    cohort.patients.push_back(p);
    cohort.landmark_visits.push_back(jstar);
  }
  return cohort;
}

namespace {

std::uint64_t dropout_seed(std::uint64_t seed, int epoch, std::size_t idx) {
  return mix_seed(seed, 0xD407ULL,
                  (static_cast<std::uint64_t>(epoch) << 24) ^ idx);
}

// Harrell concordance over usable pairs (event i with T_i < T_j); returns
// -1 when no pair is usable.
double harrell_concordance(std::span<const double> risks,
                           std::span<const SurvivalRecord> records) {
  double concordant = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].event) continue;
    for (std::size_t j = 0; j < records.size(); ++j) {
      if (!(records[j].time_at_risk > records[i].time_at_risk)) continue;
      ++pairs;
      if (risks[i] > risks[j])
        concordant += 1.0;
      else if (risks[i] == risks[j])
        concordant += 0.5;
    }
  }
  return pairs == 0 ? -1.0 : concordant / static_cast<double>(pairs);
}

// Evaluation-mode risks for a subset of the cohort.
std::vector<double> eval_risks(const LandmarkCohort& cohort,
                               std::span<const std::size_t> subset,
                               const ParameterStore& store,
                               const ModelConfig& mc, int threads) {
  std::vector<double> risks(subset.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) {
      const std::size_t i = subset[k];
      risks[k] = risk_score(cohort.patients[i]->seq,
                            cohort.landmark_visits[i], store, mc);
    }
  };
  if (threads <= 1 || subset.size() < 2) {
    work(0, subset.size());
  } else {
    const std::size_t t =
        std::min<std::size_t>(static_cast<std::size_t>(threads), subset.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < t; ++w)
      pool.emplace_back(work, subset.size() * w / t,
                        subset.size() * (w + 1) / t);
    for (auto& th : pool) th.join();
  }
  return risks;
}

}  // namespace

TrainResult train(std::span<const Patient> patients, const ModelConfig& mc,
                  const TrainConfig& tc, const ParameterStore* warm_start,
                  const EpochObserver& observer) {
  mc.validate();
  tc.validate();

  const LandmarkCohort cohort = landmark_filter(patients, tc.landmark);
  const std::size_t n = cohort.patients.size();
  std::size_t total_events = 0;
  for (const Patient* p : cohort.patients)
    total_events += static_cast<std::size_t>(p->rec.event);
  if (n < 2 || total_events < 1)
    throw InsufficientDataError(
        "train: landmark cohort needs >= 2 patients and >= 1 event");

  // Seeded split into train / validation indices.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng shuffle_rng(mix_seed(tc.seed, 0x5917ULL));
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[shuffle_rng.below(i)]);
  std::size_t n_val =
      static_cast<std::size_t>(static_cast<double>(n) * tc.val_fraction);
  if (n_val >= n) n_val = n - 1;
  std::vector<std::size_t> val_idx(perm.begin(), perm.begin() + n_val);
  std::vector<std::size_t> train_idx(perm.begin() + n_val, perm.end());

  // The train split must keep at least one event; swap one in if needed.
  auto has_event = [&](std::span<const std::size_t> idx) {
    for (std::size_t i : idx)
      if (cohort.patients[i]->rec.event) return true;
    return false;
  };
  if (!has_event(train_idx)) {
    for (std::size_t& v : val_idx) {
      if (cohort.patients[v]->rec.event) {
        std::swap(v, train_idx.front());
        break;
      }
    }
  }
  const bool val_usable = !val_idx.empty() && has_event(val_idx);

  std::vector<SurvivalRecord> train_rec, val_rec;
  for (std::size_t i : train_idx) train_rec.push_back(cohort.patients[i]->rec);
  for (std::size_t i : val_idx) val_rec.push_back(cohort.patients[i]->rec);
  if (!has_event(train_idx))
    throw InsufficientDataError("train: no events left in training split");

  ParameterStore store = init_parameters(mc);
  if (warm_start != nullptr) {
    if (warm_start->count() != store.count())
      throw InputError("train: warm start does not match the model config");
    for (std::size_t i = 0; i < store.count(); ++i) {
      if (!warm_start->has(store.name(i)) ||
          !warm_start->at(store.name(i)).same_shape(store.tensor(i)))
        throw InputError("train: warm start shape mismatch for '" +
                         store.name(i) + "'");
      store.tensor(i) = warm_start->at(store.name(i));
    }
  }
  const std::size_t n_params = store.total_size();
  std::vector<double> flat = store.flatten();
  AdamState adam(n_params);

  // Per-patient risk gradients: row k of G is d(r_k)/d(theta).
  const std::size_t n_train = train_idx.size();
  std::vector<double> per_patient_grad(n_train * n_params, 0.0);
  std::vector<double> train_risks(n_train, 0.0);

  // Flat offsets per parameter name, used to scatter tape gradients.
  std::map<std::string, std::size_t> flat_offsets;
  {
    std::size_t off = 0;
    for (std::size_t i = 0; i < store.count(); ++i) {
      flat_offsets[store.name(i)] = off;
      off += store.tensor(i).size();
    }
  }

  // Per-coordinate lr multipliers: positional embeddings form their own
  // parameter group.
  std::vector<double> lr_scale;
  if (tc.pos_embed_lr_scale != 1.0 || tc.content_lr_scale != 1.0) {
    lr_scale.assign(n_params, 1.0);
    for (std::size_t i = 0; i < store.count(); ++i) {
      const std::string& name = store.name(i);
      double scale = 1.0;
      if (name == "vision.pos_embed" || name == "seq.pos_embed")
        scale = tc.pos_embed_lr_scale;
      else if (is_penalized_parameter(name) && name != "surv.w1" &&
               name != "surv.w2")
        scale = tc.content_lr_scale;
      if (scale != 1.0) {
        const std::size_t off = flat_offsets.at(name);
        for (std::size_t k = 0; k < store.tensor(i).size(); ++k)
          lr_scale[off + k] = scale;
      }
    }
  }

  TrainResult result;
  std::vector<double> best_flat = flat;
  double best_monitor = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    store.unflatten(flat);

    auto forward_backward = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t i = train_idx[k];
        Tape tape;
        ModelVars vars = bind_parameters(tape, store, mc);
        DropoutCtx ctx(dropout_seed(tc.seed, epoch, i), mc.dropout);
        Var r = risk_score_node(tape, cohort.patients[i]->seq,
                                cohort.landmark_visits[i], vars, mc,
                                ctx.active ? &ctx : nullptr);
        train_risks[k] = tape.scalar_value(r);
        tape.backward(r);
        double* row = per_patient_grad.data() + k * n_params;
        tape.for_each_leaf_gradient(
            [&](const std::string& name, const Tensor& g) {
              std::memcpy(row + flat_offsets.at(name), g.data(),
                          g.size() * sizeof(double));
            });
      }
    };

    try {
      if (tc.threads <= 1 || n_train < 2) {
        forward_backward(0, n_train);
      } else {
        const std::size_t t = std::min<std::size_t>(
            static_cast<std::size_t>(tc.threads), n_train);
        std::vector<std::thread> pool;
        std::exception_ptr first_error;
        std::mutex err_mutex;
        for (std::size_t w = 0; w < t; ++w) {
          pool.emplace_back([&, w] {
            try {
              forward_backward(n_train * w / t, n_train * (w + 1) / t);
            } catch (...) {
              std::lock_guard<std::mutex> lock(err_mutex);
              if (!first_error) first_error = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
      }

      const double train_loss =
          neg_log_partial_likelihood(train_risks, train_rec);
      const double penalty = elastic_net_penalty(store, tc.lambda, tc.alpha);
      if (!std::isfinite(train_loss) || !std::isfinite(penalty))
        throw NumericError("non-finite loss");

      double val_loss = train_loss;
      double val_concordance = -1.0;
      if (val_usable) {
        const std::vector<double> vr =
            eval_risks(cohort, val_idx, store, mc, tc.threads);
        val_loss = neg_log_partial_likelihood(vr, val_rec);
        if (tc.selection == SelectionMetric::kValConcordance)
          val_concordance = harrell_concordance(vr, val_rec);
      }
      result.trace.push_back({epoch, train_loss, val_loss, penalty});
      if (observer) observer(epoch, store);

      // Model selection follows the held-out metric; without a validation
      // split it falls back to the full training objective so that the
      // returned parameters respect the regularizer.
      double monitor = val_usable ? val_loss : train_loss + penalty;
      if (val_usable && tc.selection == SelectionMetric::kValConcordance &&
          val_concordance >= 0.0)
        monitor = 1.0 - val_concordance;
      if (monitor < best_monitor) {
        best_monitor = monitor;
        best_flat = flat;
        result.best_epoch = epoch;
        result.best_val_loss = monitor;
        since_best = 0;
      } else if (++since_best >= tc.patience && tc.patience > 0) {
        break;
      }

      // Assemble the full-loss gradient: G^T w + penalty subgradient.
      const std::vector<double> w =
          partial_likelihood_risk_gradient(train_risks, train_rec);
      std::vector<double> grad(n_params, 0.0);
      using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>;
      Eigen::Map<const RowMat> G(per_patient_grad.data(),
                                 static_cast<Eigen::Index>(n_train),
                                 static_cast<Eigen::Index>(n_params));
      Eigen::Map<const Eigen::VectorXd> wv(w.data(),
                                           static_cast<Eigen::Index>(n_train));
      Eigen::Map<Eigen::VectorXd> gv(grad.data(),
                                     static_cast<Eigen::Index>(n_params));
      gv.noalias() = G.transpose() * wv;
      add_elastic_net_gradient(store, tc.lambda, tc.alpha, grad);

      adam_step(std::span<double>(flat), std::span<const double>(grad), adam,
                tc.learning_rate, std::span<const double>(lr_scale));
    } catch (const NumericError& e) {
      throw NumericError("train: diverged at epoch " + std::to_string(epoch) +
                         " (" + e.what() + ")");
    }
  }

  store.unflatten(best_flat);
  result.params = store;
  result.cohort_size = n;
  result.event_count = total_events;

  // Breslow table from the selected parameters over the whole landmark
  // cohort (evaluation mode).
  std::vector<std::size_t> all_idx(n);
  std::iota(all_idx.begin(), all_idx.end(), std::size_t{0});
  const std::vector<double> final_risks =
      eval_risks(cohort, all_idx, result.params, mc, tc.threads);
  std::vector<SurvivalRecord> all_rec;
  for (const Patient* p : cohort.patients) all_rec.push_back(p->rec);
  result.baseline = breslow_baseline(final_risks, all_rec);
  return result;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_trace_csv(const std::string& path,
                     std::span<const TraceRow> trace) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write trace: " + path);
  out << "epoch,train_loss,val_loss,penalty\n";
  for (const TraceRow& row : trace)
    out << row.epoch << ',' << fmt_double(row.train_loss) << ','
        << fmt_double(row.val_loss) << ',' << fmt_double(row.penalty) << '\n';
}

void write_breslow_csv(const std::string& path,
                       const BaselineHazardTable& table) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write breslow table: " + path);
  out << "t,d_k,h0_increment,H0_cum\n";
  for (std::size_t k = 0; k < table.times.size(); ++k)
    out << fmt_double(table.times[k]) << ',' << table.event_counts[k] << ','
        << fmt_double(table.increments[k]) << ','
        << fmt_double(table.cumulative[k]) << '\n';
}

BaselineHazardTable read_breslow_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read breslow table: " + path);
  std::string line;
  std::getline(in, line);
  if (line != "t,d_k,h0_increment,H0_cum")
    throw InputError("breslow table header mismatch: " + path);
  BaselineHazardTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double t = 0.0, d = 0.0, inc = 0.0, cum = 0.0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &t, &d, &inc, &cum) != 4)
      throw InputError("malformed breslow row in " + path);
    table.times.push_back(t);
    table.event_counts.push_back(d);
    table.increments.push_back(inc);
    table.cumulative.push_back(cum);
  }
  return table;
}

}  // namespace slf
