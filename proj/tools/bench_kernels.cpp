// bench_kernels — times the serial reference kernels against their OpenMP
// counterparts and verifies the two produce bit-identical outputs (the
// contract that lets tests run on either path interchangeably).
//
//   bench_kernels [--size N] [--reps R]

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xling/kernels.hpp"
#include "xling/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double seconds_of(const std::function<void()>& fn, int reps) {
  // One warmup, then the best of `reps` timed passes.
  fn();
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

std::vector<double> random_vec(int64_t n, xling::Rng& rng) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.next_gaussian();
  return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double serial_s, double omp_s, double flops, bool identical) {
  std::printf("%-22s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx", name, serial_s * 1e3,
              omp_s * 1e3, serial_s / omp_s);
  if (flops > 0) std::printf("   %7.2f GFLOP/s (omp)", flops / omp_s / 1e9);
  std::printf("   %s\n", identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernel comparison"};
  int64_t n = 256;
  int reps = 5;
  app.add_option("--size", n, "square problem size (default 256)")->check(CLI::PositiveNumber);
  app.add_option("--reps", reps, "timed repetitions (default 5)")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  namespace kern = xling::kern;
  std::printf("threads: %d (OMP), problem size %lld\n\n", kern::max_threads(),
              static_cast<long long>(n));

  xling::Rng rng(12345);
  const std::vector<double> a = random_vec(n * n, rng);
  const std::vector<double> b = random_vec(n * n, rng);
  std::vector<double> out_s(static_cast<size_t>(n * n));
  std::vector<double> out_p(static_cast<size_t>(n * n));
  bool all_identical = true;

  {
    const double ts = seconds_of([&] { kern::serial::matmul(a.data(), b.data(), out_s.data(), n, n, n); }, reps);
    const double tp = seconds_of([&] { kern::omp::matmul(a.data(), b.data(), out_p.data(), n, n, n); }, reps);
    const bool same = bit_equal(out_s, out_p);
    all_identical &= same;
    report("matmul", ts, tp, 2.0 * n * n * n, same);
  }
  {
    const double ts = seconds_of([&] { kern::serial::matmul_nt(a.data(), b.data(), out_s.data(), n, n, n); }, reps);
    const double tp = seconds_of([&] { kern::omp::matmul_nt(a.data(), b.data(), out_p.data(), n, n, n); }, reps);
    const bool same = bit_equal(out_s, out_p);
    all_identical &= same;
    report("matmul_nt", ts, tp, 2.0 * n * n * n, same);
  }
  {
    const double ts = seconds_of([&] { kern::serial::matmul_tn(a.data(), b.data(), out_s.data(), n, n, n); }, reps);
    const double tp = seconds_of([&] { kern::omp::matmul_tn(a.data(), b.data(), out_p.data(), n, n, n); }, reps);
    const bool same = bit_equal(out_s, out_p);
    all_identical &= same;
    report("matmul_tn", ts, tp, 2.0 * n * n * n, same);
  }
  for (auto [f, name] : {std::pair{kern::Unary::relu, "unary(relu)"},
                         std::pair{kern::Unary::gelu, "unary(gelu)"},
                         std::pair{kern::Unary::sigmoid, "unary(sigmoid)"}}) {
    const double ts = seconds_of([&] { kern::serial::unary(f, a.data(), out_s.data(), n * n); }, reps);
    const double tp = seconds_of([&] { kern::omp::unary(f, a.data(), out_p.data(), n * n); }, reps);
    const bool same = bit_equal(out_s, out_p);
    all_identical &= same;
    report(name, ts, tp, 0, same);
  }
  {
    const double ts = seconds_of([&] { kern::serial::softmax_rows(a.data(), out_s.data(), n, n); }, reps);
    const double tp = seconds_of([&] { kern::omp::softmax_rows(a.data(), out_p.data(), n, n); }, reps);
    const bool same = bit_equal(out_s, out_p);
    all_identical &= same;
    report("softmax_rows", ts, tp, 0, same);
  }
  {
    const std::vector<double> gamma = random_vec(n, rng);
    const std::vector<double> beta = random_vec(n, rng);
    std::vector<double> xhat_s(static_cast<size_t>(n * n)), xhat_p(static_cast<size_t>(n * n));
    std::vector<double> inv_s(static_cast<size_t>(n)), inv_p(static_cast<size_t>(n));
    const double ts = seconds_of(
        [&] {
          kern::serial::layernorm_rows(a.data(), gamma.data(), beta.data(), out_s.data(),
                                       xhat_s.data(), inv_s.data(), n, n, 1e-5);
        },
        reps);
    const double tp = seconds_of(
        [&] {
          kern::omp::layernorm_rows(a.data(), gamma.data(), beta.data(), out_p.data(),
                                    xhat_p.data(), inv_p.data(), n, n, 1e-5);
        },
        reps);
    const bool same = bit_equal(out_s, out_p) && bit_equal(xhat_s, xhat_p) && bit_equal(inv_s, inv_p);
    all_identical &= same;
    report("layernorm_rows", ts, tp, 0, same);
  }
  {
    const double ts = seconds_of([&] { kern::serial::mul(a.data(), b.data(), out_s.data(), n * n); }, reps);
    const double tp = seconds_of([&] { kern::omp::mul(a.data(), b.data(), out_p.data(), n * n); }, reps);
    const bool same = bit_equal(out_s, out_p);
    all_identical &= same;
    report("mul", ts, tp, 0, same);
  }

  if (!all_identical) {
    std::fprintf(stderr, "\nFAIL: OpenMP kernels diverged from the serial reference\n");
    return 1;
  }
  std::printf("\nall kernels bit-identical across implementations\n");
  return 0;
}
