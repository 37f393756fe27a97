#pragma once

namespace ddlm {

// One row of a throughput/quality measurement.
struct BenchRecord {
  int block_size = 1;
  int steps_per_block = 1;
  double tokens_per_second = 0.0;
  double relative_forward_time = 1.0;  // T(b) / T(1)
  double mean_steps = 0.0;
  double pass_rate = 0.0;
  double wall_seconds = 0.0;
  double forward_seconds = 0.0;  // median single-forward time at this block size
  long long generated_tokens = 0;
};

}  // namespace ddlm
