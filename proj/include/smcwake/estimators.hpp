#pragma once

// Per-datapoint archives of LT-SMC runs and the forward-KL gradient
// estimators built on them.  Every estimator returns
//   sum_r omega_r sum_k w_rk f(z_rk),   f(z) = -grad_phi log q_phi(z | x),
// with run weights omega_r derived from the stored evidence estimates; the
// ratios are formed in log space so that a common scale on every C-hat
// cancels before exponentiation.

#include "smcwake/encoder.hpp"
#include "smcwake/numkit.hpp"
#include "smcwake/smc.hpp"

#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <string>
#include <vector>

namespace smcwake {

// Full: every record kept.  SingleAtom: one atom drawn from each run's
// final particle set plus its log C-hat.  Latest: only the newest record
// (or the newest `window` records).
enum class StoreMode : std::uint8_t { Full = 0, SingleAtom = 1, Latest = 2 };

inline const char* to_string(StoreMode m) {
  switch (m) {
    case StoreMode::Full: return "full";
    case StoreMode::SingleAtom: return "single-atom";
    case StoreMode::Latest: return "latest";
  }
  return "?";
}

class EmptyStore : public std::logic_error {
 public:
  EmptyStore() : std::logic_error("gradient requested from an empty sampler store") {}
};

struct StoredRun {
  Mat atoms;    // latent_dim x K (K = 1 for single-atom storage)
  Vec weights;  // normalized
  double log_evidence = 0.0;
};

class SamplerStore {
 public:
  explicit SamplerStore(StoreMode mode = StoreMode::Full, std::size_t window = 1)
      : mode_{mode}, window_{window == 0 ? 1 : window} {}

  [[nodiscard]] StoreMode mode() const noexcept { return mode_; }
  [[nodiscard]] std::size_t window() const noexcept { return window_; }
  // M_j: number of runs ever appended.
  [[nodiscard]] std::size_t run_count() const noexcept { return run_count_; }
  [[nodiscard]] bool empty() const noexcept { return run_count_ == 0; }
  [[nodiscard]] const std::deque<StoredRun>& records() const noexcept { return records_; }
  [[nodiscard]] const StoredRun& latest() const {
    if (records_.empty()) throw EmptyStore{};
    return records_.back();
  }

  // log of the running sum of C-hat over every appended run.
  [[nodiscard]] double log_evidence_sum() const noexcept { return log_sum_; }
  // log of the running mean of C-hat.
  [[nodiscard]] double log_evidence_mean() const {
    if (empty()) throw EmptyStore{};
    return log_sum_ - std::log(static_cast<double>(run_count_));
  }

  // Number of doubles held by stored records.
  [[nodiscard]] std::size_t stored_doubles() const noexcept {
    std::size_t n = 0;
    for (const auto& r : records_) n += static_cast<std::size_t>(r.atoms.size() + r.weights.size() + 1);
    return n;
  }

  void append(const SmcRunRecord& rec, RngStream& rng) {
    append(StoredRun{rec.atoms, rec.weights, rec.log_evidence}, rng);
  }

  void append(StoredRun run, RngStream& rng) {
    if (!std::isfinite(run.log_evidence)) throw std::invalid_argument("stored run has non-finite log C-hat");
    if (run.atoms.cols() != run.weights.size() || run.atoms.cols() == 0) {
      throw DimensionError("stored run: atoms/weights mismatch");
    }
    log_sum_ = log_add_exp(log_sum_, run.log_evidence);
    ++run_count_;
    switch (mode_) {
      case StoreMode::Full:
        records_.push_back(std::move(run));
        break;
      case StoreMode::SingleAtom: {
        const auto i = static_cast<Index>(resample(run.weights, 1, ResampleScheme::Multinomial, rng)[0]);
        records_.push_back(StoredRun{run.atoms.col(i), Vec::Ones(1), run.log_evidence});
        break;
      }
      case StoreMode::Latest:
        records_.push_back(std::move(run));
        while (records_.size() > window_) records_.pop_front();
        break;
    }
  }

  void write_snapshot(std::ostream& out) const;
  static SamplerStore read_snapshot(std::istream& in);

 private:
  StoreMode mode_;
  std::size_t window_;
  std::deque<StoredRun> records_;
  std::size_t run_count_ = 0;
  double log_sum_ = kNegInf;
};

struct GradientEstimate {
  Vec grad;
  std::string label;
  std::size_t runs_used = 0;
  // Entropy of the run weights omega (0 when a single run dominates).
  double weight_entropy = 0.0;
};

// A run used by an estimator together with its log weight omega.
struct WeightedRun {
  const StoredRun* run;
  double log_omega;
};

namespace detail {

inline double entropy_of_log_weights(const std::vector<WeightedRun>& runs) {
  double h = 0.0;
  for (const auto& r : runs) {
    const double w = std::exp(r.log_omega);
    if (w > 0.0) h -= w * r.log_omega;
  }
  return h;
}

}  // namespace detail

// sum_r omega_r sum_k w_rk (-grad log q(z_rk | x)) in one backward pass.
inline Vec weighted_score_sum(const Encoder& enc, const VecRef& x, const std::vector<WeightedRun>& runs) {
  Index total = 0;
  for (const auto& r : runs) total += r.run->atoms.cols();
  Mat zs(enc.latent_dim(), total);
  Vec coeffs(total);
  Index c = 0;
  for (const auto& r : runs) {
    const double omega = std::exp(r.log_omega);
    const Index k = r.run->atoms.cols();
    zs.middleCols(c, k) = r.run->atoms;
    coeffs.segment(c, k) = -omega * r.run->weights;
    c += k;
  }
  return enc.score_grad(x, zs, coeffs);
}

// Evidence-weighted combination over all stored runs.
inline GradientEstimate grad_estimate_a(const SamplerStore& store, const Encoder& enc, const VecRef& x) {
  if (store.empty()) throw EmptyStore{};
  std::vector<WeightedRun> runs;
  double lse = kNegInf;
  for (const auto& r : store.records()) lse = log_add_exp(lse, r.log_evidence);
  for (const auto& r : store.records()) runs.push_back({&r, r.log_evidence - lse});
  return {weighted_score_sum(enc, x, runs), "a", runs.size(), detail::entropy_of_log_weights(runs)};
}

// Evidence-weighted combination over one retained atom per run.  On a full
// store each run contributes one atom drawn from its weights with `rng`.
inline GradientEstimate grad_estimate_b(const SamplerStore& store, const Encoder& enc, const VecRef& x,
                                        RngStream* rng = nullptr) {
  if (store.empty()) throw EmptyStore{};
  std::vector<StoredRun> atoms;
  const bool draw = store.mode() != StoreMode::SingleAtom;
  if (draw && rng == nullptr) throw std::invalid_argument("grad_estimate_b on a multi-atom store needs an rng");
  atoms.reserve(store.records().size());
  for (const auto& r : store.records()) {
    if (!draw) {
      atoms.push_back(r);
      continue;
    }
    const auto i = static_cast<Index>(resample(r.weights, 1, ResampleScheme::Multinomial, *rng)[0]);
    atoms.push_back(StoredRun{r.atoms.col(i), Vec::Ones(1), r.log_evidence});
  }
  double lse = kNegInf;
  for (const auto& r : atoms) lse = log_add_exp(lse, r.log_evidence);
  std::vector<WeightedRun> runs;
  for (const auto& r : atoms) runs.push_back({&r, r.log_evidence - lse});
  return {weighted_score_sum(enc, x, runs), "b", runs.size(), detail::entropy_of_log_weights(runs)};
}

// Newest record(s) scaled by C-hat over the all-time running mean of C-hat.
// With a window of L records the numerator is averaged over those L.
inline GradientEstimate grad_estimate_c(const SamplerStore& store, const Encoder& enc, const VecRef& x) {
  if (store.empty()) throw EmptyStore{};
  const double log_mean = store.log_evidence_mean();
  const auto& recs = store.records();
  const std::size_t l = store.mode() == StoreMode::Latest ? recs.size() : 1;
  const double log_l = std::log(static_cast<double>(l));
  std::vector<WeightedRun> runs;
  for (std::size_t i = recs.size() - l; i < recs.size(); ++i) {
    runs.push_back({&recs[i], recs[i].log_evidence - log_mean - log_l});
  }
  GradientEstimate g{weighted_score_sum(enc, x, runs), "c", runs.size(), 0.0};
  // entropy of the within-window shares, normalised for reporting
  double lse = kNegInf;
  for (const auto& r : runs) lse = log_add_exp(lse, r.log_omega);
  std::vector<WeightedRun> shares = runs;
  for (auto& r : shares) r.log_omega -= lse;
  g.weight_entropy = detail::entropy_of_log_weights(shares);
  return g;
}

enum class SubsampleMode {
  // M* draws with replacement, probability proportional to C-hat.
  EvidenceProportional,
  // M' distinct runs chosen uniformly.
  UniformSubset,
};

// Indices into store.records().
inline std::vector<std::size_t> subsample_records(const SamplerStore& store, std::size_t count, SubsampleMode mode,
                                                  RngStream& rng) {
  if (store.empty()) throw EmptyStore{};
  const std::size_t m = store.records().size();
  if (count == 0) throw std::invalid_argument("subsample_records: count must be positive");
  if (mode == SubsampleMode::EvidenceProportional) {
    Vec lw(static_cast<Index>(m));
    for (std::size_t i = 0; i < m; ++i) lw[static_cast<Index>(i)] = store.records()[i].log_evidence;
    return resample(normalize(lw).weights.values, count, ResampleScheme::Multinomial, rng);
  }
  std::vector<std::size_t> perm(m);
  for (std::size_t i = 0; i < m; ++i) perm[i] = i;
  const std::size_t take = std::min(count, m);
  for (std::size_t i = 0; i < take; ++i) std::swap(perm[i], perm[i + rng.index(m - i)]);
  perm.resize(take);
  return perm;
}

// Even-weighted combination over a subsample; label "a*" or "a'".
inline GradientEstimate grad_estimate_subsampled(const SamplerStore& store, const Encoder& enc, const VecRef& x,
                                                 std::size_t count, SubsampleMode mode, RngStream& rng) {
  const auto idx = subsample_records(store, count, mode, rng);
  const double log_share = -std::log(static_cast<double>(idx.size()));
  std::vector<WeightedRun> runs;
  for (auto i : idx) runs.push_back({&store.records()[i], log_share});
  return {weighted_score_sum(enc, x, runs), mode == SubsampleMode::EvidenceProportional ? "a*" : "a'", runs.size(),
          detail::entropy_of_log_weights(runs)};
}

//-----------------------------------------------------------------------------
// Binary snapshot.  Layout (little-endian):
//   "SMCWSTOR" | u32 version | u8 mode | u64 window | u64 run_count |
//   f64 log_sum | u64 n_records | per record: u64 rows, u64 cols,
//   f64 atoms[rows*cols] (column-major), f64 weights[cols], f64 log C-hat

inline constexpr char kStoreMagic[8] = {'S', 'M', 'C', 'W', 'S', 'T', 'O', 'R'};
inline constexpr std::uint32_t kStoreVersion = 1;

namespace detail {

inline void write_le_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_le_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated store snapshot");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void SamplerStore::write_snapshot(std::ostream& out) const {
  out.write(kStoreMagic, 8);
  const std::uint32_t ver = kStoreVersion;
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((ver >> (8 * i)) & 0xff));
  out.put(static_cast<char>(mode_));
  detail::write_le_u64(out, window_);
  detail::write_le_u64(out, run_count_);
  detail::write_le_f64(out, log_sum_);
  detail::write_le_u64(out, records_.size());
  for (const auto& r : records_) {
    detail::write_le_u64(out, static_cast<std::uint64_t>(r.atoms.rows()));
    detail::write_le_u64(out, static_cast<std::uint64_t>(r.atoms.cols()));
    for (Index i = 0; i < r.atoms.size(); ++i) detail::write_le_f64(out, r.atoms.data()[i]);
    for (Index i = 0; i < r.weights.size(); ++i) detail::write_le_f64(out, r.weights[i]);
    detail::write_le_f64(out, r.log_evidence);
  }
  if (!out) throw std::runtime_error("failed writing store snapshot");
}

inline SamplerStore SamplerStore::read_snapshot(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kStoreMagic, 8) != 0) {
    throw std::runtime_error("not a sampler store snapshot");
  }
  std::uint32_t ver = 0;
  for (int i = 0; i < 4; ++i) ver |= static_cast<std::uint32_t>(static_cast<unsigned char>(in.get())) << (8 * i);
  if (ver != kStoreVersion) throw std::runtime_error("unsupported store snapshot version " + std::to_string(ver));
  const int mode = in.get();
  if (mode < 0 || mode > 2) throw std::runtime_error("bad store mode in snapshot");
  SamplerStore s(static_cast<StoreMode>(mode), detail::read_le_u64(in));
  s.run_count_ = detail::read_le_u64(in);
  s.log_sum_ = detail::read_le_f64(in);
  const auto n = detail::read_le_u64(in);
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto rows = static_cast<Index>(detail::read_le_u64(in));
    const auto cols = static_cast<Index>(detail::read_le_u64(in));
    if (rows <= 0 || cols <= 0 || rows * cols > (Index{1} << 32)) throw std::runtime_error("bad record shape in snapshot");
    StoredRun r{Mat(rows, cols), Vec(cols), 0.0};
    for (Index i = 0; i < r.atoms.size(); ++i) r.atoms.data()[i] = detail::read_le_f64(in);
    for (Index i = 0; i < cols; ++i) r.weights[i] = detail::read_le_f64(in);
    r.log_evidence = detail::read_le_f64(in);
    s.records_.push_back(std::move(r));
  }
  return s;
}

inline void save_store(const SamplerStore& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  s.write_snapshot(out);
}

inline SamplerStore load_store(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return SamplerStore::read_snapshot(in);
}

}  // namespace smcwake
